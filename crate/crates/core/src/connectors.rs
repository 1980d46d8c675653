//! Modality connectors: frozen stub encoders, projection layers, the
//! audio/speech Q-Formers, video frame pooling and input assembly.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::nn::{session_attention, ATTN_MATRICES};
use crate::params::{ParamStore, Session, TrainMask};
use crate::tensor::{Real, Tensor};

pub const QFORMER_LAYERS: usize = 4;
pub const VIDEO_FRAMES: usize = 8;
/// Std of the frozen stub encoder projections.
pub const STUB_ENCODER_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Video,
    Audio,
    Speech,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Image,
        Modality::Video,
        Modality::Audio,
        Modality::Speech,
        Modality::Text,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Video => "video",
            Modality::Audio => "audio",
            Modality::Speech => "speech",
            Modality::Text => "text",
        }
    }

    /// Name of the encoder that serves this modality. Video frames go
    /// through the image encoder.
    pub fn encoder(self) -> Option<&'static str> {
        match self {
            Modality::Image | Modality::Video => Some("image"),
            Modality::Audio => Some("audio"),
            Modality::Speech => Some("speech"),
            Modality::Text => None,
        }
    }

    /// Name of the projection layer; video shares the image projection.
    pub fn projection(self) -> Option<&'static str> {
        self.encoder()
    }

    pub fn uses_qformer(self) -> bool {
        matches!(self, Modality::Audio | Modality::Speech)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown modality `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectorConfig {
    /// Stub encoder output width; also the Q-Former hidden width.
    #[serde(default = "d_enc_dim")]
    pub enc_dim: usize,
    /// Number of learnable Q-Former queries.
    #[serde(default = "d_queries")]
    pub queries: usize,
    #[serde(default = "d_qf_heads")]
    pub qformer_heads: usize,
    #[serde(default = "d_image_raw")]
    pub image_raw: usize,
    #[serde(default = "d_audio_raw")]
    pub audio_raw: usize,
    #[serde(default = "d_audio_raw")]
    pub speech_raw: usize,
}

fn d_enc_dim() -> usize {
    32
}
fn d_queries() -> usize {
    32
}
fn d_qf_heads() -> usize {
    4
}
fn d_image_raw() -> usize {
    24
}
fn d_audio_raw() -> usize {
    16
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        Self {
            enc_dim: d_enc_dim(),
            queries: d_queries(),
            qformer_heads: d_qf_heads(),
            image_raw: d_image_raw(),
            audio_raw: d_audio_raw(),
            speech_raw: d_audio_raw(),
        }
    }
}

impl ConnectorConfig {
    pub fn toy() -> Self {
        Self {
            queries: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.qformer_heads == 0 || !self.enc_dim.is_multiple_of(self.qformer_heads) {
            return Err(Error::Config(format!(
                "enc_dim {} is not divisible by {} Q-Former heads",
                self.enc_dim, self.qformer_heads
            )));
        }
        if self.queries == 0 {
            return Err(Error::Config("Q-Former needs at least one query".into()));
        }
        Ok(())
    }

    pub fn raw_dim(&self, encoder: &str) -> usize {
        match encoder {
            "image" => self.image_raw,
            "audio" => self.audio_raw,
            _ => self.speech_raw,
        }
    }
}

/// A tagged run of token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySequence<S> {
    pub modality: Modality,
    pub embeddings: Tensor<S>,
}

impl<S: Real> ModalitySequence<S> {
    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StubEncoder<S> {
    pub modality: Modality,
    /// `raw_dim × enc_dim`.
    pub w: Tensor<S>,
}

impl<S: Real> StubEncoder<S> {
    pub fn random<R: Rng + ?Sized>(modality: Modality, raw: usize, enc: usize, rng: &mut R) -> Self {
        Self {
            modality,
            w: Tensor::randn(&[raw, enc], STUB_ENCODER_STD, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionLayer<S> {
    /// `in × d`.
    pub w: Tensor<S>,
    /// `d`.
    pub b: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QFormerLayer<S> {
    pub ln1: (Tensor<S>, Tensor<S>),
    /// `wq, wk, wv, wo`.
    pub self_attn: [Tensor<S>; 4],
    pub ln2: (Tensor<S>, Tensor<S>),
    pub cross_attn: [Tensor<S>; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct QFormerParams<S> {
    /// `AM × d_q`.
    pub queries: Tensor<S>,
    pub layers: Vec<QFormerLayer<S>>,
    pub heads: usize,
    pub proj: ProjectionLayer<S>,
}

pub fn encoder_name(enc: &str) -> String {
    format!("enc.{enc}.w")
}

pub fn proj_names(proj: &str) -> (String, String) {
    (format!("proj.{proj}.w"), format!("proj.{proj}.b"))
}

fn qf_layer_prefix(m: &str, i: usize) -> String {
    format!("qf.{m}.layers.{i}")
}

/// Inserts encoders (frozen), projections and Q-Formers for every modality.
pub fn init_connectors<S: Real, R: Rng + ?Sized>(cc: &ConnectorConfig, width: usize, store: &mut ParamStore<S>, rng: &mut R) {
    let e = cc.enc_dim;
    for enc in ["image", "audio", "speech"] {
        store.insert(
            encoder_name(enc),
            Tensor::randn(&[cc.raw_dim(enc), e], STUB_ENCODER_STD, rng),
            true,
        );
    }
    for m in ["image", "audio", "speech"] {
        let (w, b) = proj_names(m);
        store.insert(w, Tensor::randn(&[e, width], 1.0 / (e as f64).sqrt(), rng), false);
        store.insert(b, Tensor::zeros(&[width]), false);
    }
    for m in ["audio", "speech"] {
        store.insert(format!("qf.{m}.queries"), Tensor::randn(&[cc.queries, e], 1.0, rng), false);
        for i in 0..QFORMER_LAYERS {
            let p = qf_layer_prefix(m, i);
            for ln in ["ln1", "ln2"] {
                store.insert(format!("{p}.{ln}.g"), Tensor::full(&[e], S::one()), false);
                store.insert(format!("{p}.{ln}.b"), Tensor::zeros(&[e]), false);
            }
            for att in ["sa", "ca"] {
                for w in ATTN_MATRICES {
                    store.insert(
                        format!("{p}.{att}.{w}"),
                        Tensor::randn(&[e, e], 1.0 / (e as f64).sqrt(), rng),
                        false,
                    );
                }
            }
        }
    }
}

/// `raw · W_enc` for one frame or patch set.
pub fn session_encode<S: Real>(s: &mut Session<'_, S>, raw: &Tensor<S>, encoder: &str) -> Result<Var> {
    let x = s.g.constant(raw.clone());
    s.linear(x, &encoder_name(encoder))
}

pub fn session_project<S: Real>(s: &mut Session<'_, S>, x: Var, proj: &str) -> Result<Var> {
    let (w, b) = proj_names(proj);
    s.affine(x, &w, &b)
}

pub fn session_image<S: Real>(s: &mut Session<'_, S>, raw: &Tensor<S>) -> Result<Var> {
    let e = session_encode(s, raw, "image")?;
    session_project(s, e, "image")
}

/// Per-patch mean of eight encoded frames, then the image projection. The
/// mean is a balanced pairwise sum scaled by 1/8, so identical frames give
/// the single-frame features exactly.
pub fn session_video<S: Real>(s: &mut Session<'_, S>, frames: &[Tensor<S>]) -> Result<Var> {
    if frames.len() != VIDEO_FRAMES {
        return Err(Error::Config(format!(
            "video needs exactly {VIDEO_FRAMES} frames, got {}",
            frames.len()
        )));
    }
    if frames.iter().any(|f| f.shape() != frames[0].shape()) {
        return Err(Error::shape(
            "encode_video",
            frames[0].shape(),
            frames[1..].iter().find(|f| f.shape() != frames[0].shape()).unwrap().shape(),
        ));
    }
    let mut level = Vec::with_capacity(VIDEO_FRAMES);
    for f in frames {
        level.push(session_encode(s, f, "image")?);
    }
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len() / 2);
        for pair in level.chunks(2) {
            next.push(s.g.add(pair[0], pair[1])?);
        }
        level = next;
    }
    let mean = s.g.scale(level[0], S::lit(1.0 / VIDEO_FRAMES as f64));
    session_project(s, mean, "image")
}

/// Q-Former over encoder states of one modality (`audio` or `speech`),
/// followed by its projection. Output length is always the query count.
pub fn session_qformer<S: Real>(s: &mut Session<'_, S>, states: Var, which: &str, heads: usize) -> Result<Var> {
    let t_enc = s.g.value(states).rows();
    if t_enc == 0 {
        return Err(Error::Invalid("Q-Former over zero encoder states".into()));
    }
    let mut xq = s.p(&format!("qf.{which}.queries"))?;
    let dq = s.g.value(xq).cols();
    if s.g.value(states).cols() != dq {
        return Err(Error::shape(
            "qformer cross-attention",
            &[t_enc, dq],
            s.g.value(states).shape(),
        ));
    }
    for i in 0..QFORMER_LAYERS {
        let p = qf_layer_prefix(which, i);
        let h = s.layer_norm(xq, &format!("{p}.ln1"))?;
        let a = session_attention(s, h, h, &format!("{p}.sa"), heads, false)?;
        let hs = s.g.add(xq, a)?;
        let h = s.layer_norm(hs, &format!("{p}.ln2"))?;
        let c = session_attention(s, h, states, &format!("{p}.ca"), heads, false)?;
        xq = s.g.add(hs, c)?;
    }
    session_project(s, xq, which)
}

pub fn session_audio_like<S: Real>(s: &mut Session<'_, S>, raw: &Tensor<S>, which: &str, heads: usize) -> Result<Var> {
    let states = session_encode(s, raw, which)?;
    session_qformer(s, states, which, heads)
}

fn run_plain<S: Real>(store: &ParamStore<S>, f: impl FnOnce(&mut Session<'_, S>) -> Result<Var>) -> Result<Tensor<S>> {
    let adapters = AdapterSet::new();
    let mask = TrainMask::none();
    let mut s = Session::new(store, &adapters, &mask);
    let out = f(&mut s)?;
    Ok(s.g.value(out).clone())
}

fn install_projection<S: Real>(store: &mut ParamStore<S>, name: &str, p: &ProjectionLayer<S>) {
    let (w, b) = proj_names(name);
    store.insert(w, p.w.clone(), false);
    store.insert(b, p.b.clone(), false);
}

fn check_encoder<S: Real>(raw: &Tensor<S>, enc: &StubEncoder<S>) -> Result<()> {
    if raw.cols() != enc.w.rows() {
        return Err(Error::shape("stub encoder", raw.shape(), enc.w.shape()));
    }
    Ok(())
}

pub fn encode_image<S: Real>(raw: &Tensor<S>, enc: &StubEncoder<S>, proj: &ProjectionLayer<S>) -> Result<ModalitySequence<S>> {
    check_encoder(raw, enc)?;
    let mut store = ParamStore::new();
    store.insert(encoder_name("image"), enc.w.clone(), true);
    install_projection(&mut store, "image", proj);
    let embeddings = run_plain(&store, |s| session_image(s, raw))?;
    Ok(ModalitySequence {
        modality: Modality::Image,
        embeddings,
    })
}

pub fn encode_video<S: Real>(
    frames: &[Tensor<S>],
    enc: &StubEncoder<S>,
    proj: &ProjectionLayer<S>,
) -> Result<ModalitySequence<S>> {
    if let Some(f) = frames.first() {
        check_encoder(f, enc)?;
    }
    let mut store = ParamStore::new();
    store.insert(encoder_name("image"), enc.w.clone(), true);
    install_projection(&mut store, "image", proj);
    let embeddings = run_plain(&store, |s| session_video(s, frames))?;
    Ok(ModalitySequence {
        modality: Modality::Video,
        embeddings,
    })
}

impl<S: Real> QFormerParams<S> {
    /// Writes the Q-Former under `qf.{which}` and its projection under
    /// `proj.{which}`.
    pub fn install(&self, which: &str, store: &mut ParamStore<S>) {
        store.insert(format!("qf.{which}.queries"), self.queries.clone(), false);
        for (i, layer) in self.layers.iter().enumerate() {
            let p = qf_layer_prefix(which, i);
            store.insert(format!("{p}.ln1.g"), layer.ln1.0.clone(), false);
            store.insert(format!("{p}.ln1.b"), layer.ln1.1.clone(), false);
            store.insert(format!("{p}.ln2.g"), layer.ln2.0.clone(), false);
            store.insert(format!("{p}.ln2.b"), layer.ln2.1.clone(), false);
            for (j, w) in ATTN_MATRICES.iter().enumerate() {
                store.insert(format!("{p}.sa.{w}"), layer.self_attn[j].clone(), false);
                store.insert(format!("{p}.ca.{w}"), layer.cross_attn[j].clone(), false);
            }
        }
        install_projection(store, which, &self.proj);
    }

    pub fn from_store(store: &ParamStore<S>, which: &str, heads: usize) -> Result<Self> {
        let get = |n: String| store.get(&n).cloned();
        let mut layers = Vec::with_capacity(QFORMER_LAYERS);
        for i in 0..QFORMER_LAYERS {
            let p = qf_layer_prefix(which, i);
            let attn = |kind: &str| -> Result<[Tensor<S>; 4]> {
                Ok([
                    get(format!("{p}.{kind}.wq"))?,
                    get(format!("{p}.{kind}.wk"))?,
                    get(format!("{p}.{kind}.wv"))?,
                    get(format!("{p}.{kind}.wo"))?,
                ])
            };
            layers.push(QFormerLayer {
                ln1: (get(format!("{p}.ln1.g"))?, get(format!("{p}.ln1.b"))?),
                self_attn: attn("sa")?,
                ln2: (get(format!("{p}.ln2.g"))?, get(format!("{p}.ln2.b"))?),
                cross_attn: attn("ca")?,
            });
        }
        let (w, b) = proj_names(which);
        Ok(Self {
            queries: get(format!("qf.{which}.queries"))?,
            layers,
            heads,
            proj: ProjectionLayer { w: get(w)?, b: get(b)? },
        })
    }
}

/// Distills encoder states to a fixed-length sequence of `AM` embeddings.
pub fn qformer_forward<S: Real>(states: &Tensor<S>, qf: &QFormerParams<S>, modality: Modality) -> Result<ModalitySequence<S>> {
    if !modality.uses_qformer() {
        return Err(Error::Invalid(format!("{modality} does not use a Q-Former")));
    }
    if qf.layers.len() != QFORMER_LAYERS {
        return Err(Error::Config(format!(
            "Q-Former must have {QFORMER_LAYERS} layers, got {}",
            qf.layers.len()
        )));
    }
    let which = modality.as_str();
    let mut store = ParamStore::new();
    qf.install(which, &mut store);
    let embeddings = run_plain(&store, |s| {
        let h = s.g.constant(states.clone());
        session_qformer(s, h, which, qf.heads)
    })?;
    Ok(ModalitySequence { modality, embeddings })
}

pub fn embed_text<S: Real>(ids: &[usize], table: &Tensor<S>) -> Result<ModalitySequence<S>> {
    let d = table.cols();
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= table.rows() {
            return Err(Error::Index {
                what: "token id",
                index: id,
                len: table.rows(),
            });
        }
        data.extend_from_slice(table.row(id));
    }
    Ok(ModalitySequence {
        modality: Modality::Text,
        embeddings: Tensor::new(vec![ids.len(), d], data)?,
    })
}

/// Concatenates sequences in order and returns the per-token modality labels.
pub fn assemble_input<S: Real>(seqs: &[ModalitySequence<S>]) -> Result<(Tensor<S>, Vec<Modality>)> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::Invalid("assemble_input: no sequences".into()))?;
    let d = first.embeddings.cols();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for s in seqs {
        if s.embeddings.cols() != d {
            return Err(Error::shape("assemble_input", first.embeddings.shape(), s.embeddings.shape()));
        }
        data.extend_from_slice(s.embeddings.data());
        labels.extend(std::iter::repeat_n(s.modality, s.len()));
    }
    Ok((Tensor::new(vec![labels.len(), d], data)?, labels))
}

/// Splits an assembled input back into maximal runs of equal labels.
pub fn split_by_labels<S: Real>(x: &Tensor<S>, labels: &[Modality]) -> Result<Vec<ModalitySequence<S>>> {
    if x.rows() != labels.len() {
        return Err(Error::shape("split_by_labels", x.shape(), &[labels.len()]));
    }
    let d = x.cols();
    let mut out: Vec<ModalitySequence<S>> = Vec::new();
    let mut start = 0;
    for i in 1..=labels.len() {
        if i == labels.len() || labels[i] != labels[start] {
            let data = x.data()[start * d..i * d].to_vec();
            out.push(ModalitySequence {
                modality: labels[start],
                embeddings: Tensor::new(vec![i - start, d], data)?,
            });
            start = i;
        }
    }
    Ok(out)
}
