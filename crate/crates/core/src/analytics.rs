//! Routing analytics: expert load distributions, per-expert modality
//! preferences and principal-component token pathways, exported as CSV.
//!
//! Pathway ranking is a reconstruction: tokens' concatenated one-hot
//! routing vectors are centered, projected onto the first principal
//! component, and ranked by absolute projection. A pathway is reported as
//! each MoE layer's top-1 expert.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::connectors::Modality;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{LayerRouting, UniMoe};
use crate::moe::ExpertBackend;
use crate::params::TrainMask;
use crate::runlog::RunManifest;
use crate::tensor::{kernels, Real, Tensor};

pub const LOADS_CSV: &str = "loads.csv";
pub const PREFS_CSV: &str = "prefs.csv";
pub const PATHWAYS_CSV: &str = "pathways.csv";
/// Modality column value of an expert that received no slots.
pub const EMPTY_MARKER: &str = "none";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub layer: usize,
    pub token: usize,
    pub modality: Modality,
    pub experts: Vec<usize>,
    pub gates: Vec<f64>,
}

/// Append-only routing records of an evaluation pass.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoutingLog {
    pub experts: usize,
    pub topk: usize,
    records: Vec<RoutingRecord>,
}

impl RoutingLog {
    pub fn new(experts: usize, topk: usize) -> Self {
        Self {
            experts,
            topk,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, r: RoutingRecord) -> Result<()> {
        if r.experts.len() != self.topk || r.gates.len() != self.topk {
            return Err(Error::Invalid(format!(
                "routing record with {} experts / {} gates, expected {}",
                r.experts.len(),
                r.gates.len(),
                self.topk
            )));
        }
        if let Some(&e) = r.experts.iter().find(|&&e| e >= self.experts) {
            return Err(Error::Index {
                what: "expert",
                index: e,
                len: self.experts,
            });
        }
        self.records.push(r);
        Ok(())
    }

    /// Records one forward pass whose tokens start at global index `offset`.
    pub fn extend_from_forward<S: Real>(
        &mut self,
        offset: usize,
        labels: &[Modality],
        routing: &[LayerRouting<S>],
    ) -> Result<()> {
        for lr in routing {
            let d = &lr.decision;
            if d.tokens() != labels.len() {
                return Err(Error::Invalid(format!(
                    "{} labels for {} routed tokens",
                    labels.len(),
                    d.tokens()
                )));
            }
            for (t, &label) in labels.iter().enumerate() {
                self.push(RoutingRecord {
                    layer: lr.layer,
                    token: offset + t,
                    modality: label,
                    experts: d.selected_for(t).to_vec(),
                    gates: d.gates.row(t).iter().map(|g| g.to_f64_lossy()).collect(),
                })?;
            }
        }
        Ok(())
    }

    pub fn records(&self) -> &[RoutingRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn layers(&self) -> Vec<usize> {
        self.records
            .iter()
            .map(|r| r.layer)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

/// Routes every sample through the model and logs each MoE layer's choices.
pub fn collect_routing<S: Real>(model: &UniMoe<S>, samples: &[Sample], backend: &dyn ExpertBackend<S>) -> Result<RoutingLog> {
    let mut log = RoutingLog::new(model.config.experts, model.config.topk);
    let mask = TrainMask::none();
    let mut offset = 0;
    for sample in samples {
        let mut s = model.session(&mask);
        let out = model.forward_sample(&mut s, sample, backend)?;
        log.extend_from_forward(offset, &out.labels, &out.routing)?;
        offset += out.labels.len();
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLoads {
    pub layer: usize,
    pub fractions: Vec<f64>,
}

/// Fraction of assignment slots each expert receives, per layer.
pub fn expert_load_distribution(log: &RoutingLog) -> Result<Vec<LayerLoads>> {
    if log.is_empty() {
        return Err(Error::Invalid("load distribution of an empty routing log".into()));
    }
    let mut counts: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for r in log.records() {
        let c = counts.entry(r.layer).or_insert_with(|| vec![0; log.experts]);
        for &e in &r.experts {
            c[e] += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(layer, c)| {
            let total: u64 = c.iter().sum();
            LayerLoads {
                layer,
                fractions: c.iter().map(|&n| n as f64 / total as f64).collect(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertPreference {
    pub layer: usize,
    pub expert: usize,
    /// Modality distribution of the expert's slots; `None` marks an expert
    /// that received no slots.
    pub fractions: Option<BTreeMap<Modality, f64>>,
}

pub fn modality_preference(log: &RoutingLog) -> Result<Vec<ExpertPreference>> {
    if log.is_empty() {
        return Err(Error::Invalid("modality preference of an empty routing log".into()));
    }
    let mut counts: BTreeMap<(usize, usize), BTreeMap<Modality, u64>> = BTreeMap::new();
    for layer in log.layers() {
        for e in 0..log.experts {
            counts.insert((layer, e), BTreeMap::new());
        }
    }
    for r in log.records() {
        for &e in &r.experts {
            *counts.get_mut(&(r.layer, e)).expect("seeded").entry(r.modality).or_insert(0) += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|((layer, expert), per)| {
            let total: u64 = per.values().sum();
            let fractions = (total > 0).then(|| per.into_iter().map(|(m, n)| (m, n as f64 / total as f64)).collect());
            ExpertPreference {
                layer,
                expert,
                fractions,
            }
        })
        .collect())
}

/// Tokens × (MoE layers · M) matrix of concatenated one-hot selections.
#[derive(Debug, Clone, PartialEq)]
pub struct PathwayMatrix {
    pub tokens: Vec<usize>,
    pub layers: Vec<usize>,
    pub experts: usize,
    pub topk: usize,
    /// Row-major, one row per token in `tokens` order.
    pub data: Vec<f64>,
    /// Top-1 expert of each token at each layer.
    pub top1: Vec<Vec<usize>>,
}

impl PathwayMatrix {
    pub fn from_log(log: &RoutingLog) -> Result<Self> {
        let layers = log.layers();
        let tokens: Vec<usize> = log
            .records()
            .iter()
            .map(|r| r.token)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let (m, nl) = (log.experts, layers.len());
        let tpos: BTreeMap<usize, usize> = tokens.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let lpos: BTreeMap<usize, usize> = layers.iter().enumerate().map(|(i, &l)| (l, i)).collect();
        let cols = nl * m;
        let mut data = vec![0.0; tokens.len() * cols];
        let mut top1 = vec![vec![usize::MAX; nl]; tokens.len()];
        for r in log.records() {
            let (ti, li) = (tpos[&r.token], lpos[&r.layer]);
            if top1[ti][li] != usize::MAX {
                return Err(Error::Invalid(format!("token {} routed twice at layer {}", r.token, r.layer)));
            }
            top1[ti][li] = r.experts[0];
            for &e in &r.experts {
                data[ti * cols + li * m + e] += 1.0;
            }
        }
        if let Some(ti) = top1.iter().position(|row| row.contains(&usize::MAX)) {
            return Err(Error::Invalid(format!("token {} is missing a layer's routing", tokens[ti])));
        }
        Ok(Self {
            tokens,
            layers,
            experts: m,
            topk: log.topk,
            data,
            top1,
        })
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn cols(&self) -> usize {
        self.layers.len() * self.experts
    }
}

/// Column-centered copy of a row-major matrix.
pub fn center_columns(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    for j in 0..cols {
        let mean = (0..rows).map(|i| data[i * cols + j]).sum::<f64>() / rows as f64;
        for i in 0..rows {
            out[i * cols + j] -= mean;
        }
    }
    out
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Leading eigenvector of the covariance `XᵀX` of a centered matrix, by
/// power iteration. A few rounds of repeated squaring pick the starting
/// vector; plain iterations on `XᵀX` then polish it. The sign is fixed so
/// the largest-magnitude component is positive. Returns zeros when the
/// matrix has no variance.
pub fn principal_component(centered: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let x = Tensor::new(vec![rows, cols], centered.to_vec()).expect("shape");
    let c = kernels::matmul(&kernels::transpose(&x), &x).expect("shape");
    if c.data().iter().all(|&v| v == 0.0) {
        return vec![0.0; cols];
    }
    let mut p = c.clone();
    for _ in 0..12 {
        p = kernels::matmul(&p, &p).expect("square");
        let scale = p.data().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if scale == 0.0 || !scale.is_finite() {
            break;
        }
        p.scale_in_place(1.0 / scale);
    }
    let best = (0..cols)
        .max_by(|&a, &b| {
            let na: f64 = (0..cols).map(|i| p.at(i, a).powi(2)).sum();
            let nb: f64 = (0..cols).map(|i| p.at(i, b).powi(2)).sum();
            na.total_cmp(&nb).then(b.cmp(&a))
        })
        .unwrap_or(0);
    let mut v: Vec<f64> = (0..cols).map(|i| p.at(i, best)).collect();
    if normalize(&mut v) == 0.0 {
        v = vec![1.0; cols];
        normalize(&mut v);
    }
    for _ in 0..10_000 {
        let mut next: Vec<f64> = (0..cols).map(|i| (0..cols).map(|j| c.at(i, j) * v[j]).sum()).collect();
        if normalize(&mut next) == 0.0 {
            break;
        }
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < 1e-15 {
            break;
        }
    }
    let lead = v
        .iter()
        .enumerate()
        .fold(0, |b, (i, x)| if x.abs() > v[b].abs() { i } else { b });
    if v[lead] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pathway {
    /// Zero-based rank.
    pub rank: usize,
    pub token: usize,
    pub projection: f64,
    /// Top-1 expert per MoE layer, in layer order.
    pub experts: Vec<usize>,
    pub is_top2: bool,
}

/// The `n` tokens with the largest absolute PC1 projection; ties keep
/// token order.
pub fn top_pathways(matrix: &PathwayMatrix, n: usize) -> Result<Vec<Pathway>> {
    let (rows, cols) = (matrix.rows(), matrix.cols());
    if n > rows {
        return Err(Error::Invalid(format!("asked for {n} pathways from {rows} tokens")));
    }
    let centered = center_columns(&matrix.data, rows, cols);
    let pc = principal_component(&centered, rows, cols);
    let proj: Vec<f64> = (0..rows)
        .map(|i| centered[i * cols..(i + 1) * cols].iter().zip(&pc).map(|(a, b)| a * b).sum())
        .collect();
    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by(|&a, &b| proj[b].abs().total_cmp(&proj[a].abs()));
    Ok(order
        .into_iter()
        .take(n)
        .enumerate()
        .map(|(rank, i)| Pathway {
            rank,
            token: matrix.tokens[i],
            projection: proj[i],
            experts: matrix.top1[i].clone(),
            is_top2: rank < 2,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnalyticsProducts {
    pub loads: Vec<LayerLoads>,
    pub prefs: Vec<ExpertPreference>,
    pub pathways: Vec<Pathway>,
    /// MoE layer ids matching each pathway's expert sequence.
    pub pathway_layers: Vec<usize>,
}

impl AnalyticsProducts {
    /// All three products from one log; an empty log gives empty products.
    pub fn from_log(log: &RoutingLog, top_n: usize) -> Result<Self> {
        if log.is_empty() {
            return Ok(Self::default());
        }
        let matrix = PathwayMatrix::from_log(log)?;
        Ok(Self {
            loads: expert_load_distribution(log)?,
            prefs: modality_preference(log)?,
            pathways: top_pathways(&matrix, top_n.min(matrix.rows()))?,
            pathway_layers: matrix.layers,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.loads.is_empty() && self.prefs.is_empty() && self.pathways.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadRow {
    pub layer: usize,
    pub expert: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefRow {
    pub layer: usize,
    pub expert: usize,
    pub modality: String,
    pub fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathwayRow {
    pub rank: usize,
    pub token: usize,
    pub layer: usize,
    pub expert: usize,
    pub is_top2: bool,
}

impl AnalyticsProducts {
    pub fn load_rows(&self) -> Vec<LoadRow> {
        self.loads
            .iter()
            .flat_map(|l| {
                l.fractions.iter().enumerate().map(move |(expert, &fraction)| LoadRow {
                    layer: l.layer,
                    expert,
                    fraction,
                })
            })
            .collect()
    }

    pub fn pref_rows(&self) -> Vec<PrefRow> {
        let mut rows = Vec::new();
        for p in &self.prefs {
            match &p.fractions {
                None => rows.push(PrefRow {
                    layer: p.layer,
                    expert: p.expert,
                    modality: EMPTY_MARKER.into(),
                    fraction: None,
                }),
                Some(f) => rows.extend(f.iter().map(|(m, &v)| PrefRow {
                    layer: p.layer,
                    expert: p.expert,
                    modality: m.to_string(),
                    fraction: Some(v),
                })),
            }
        }
        rows
    }

    pub fn pathway_rows(&self) -> Vec<PathwayRow> {
        self.pathways
            .iter()
            .flat_map(|p| {
                p.experts
                    .iter()
                    .zip(&self.pathway_layers)
                    .map(move |(&expert, &layer)| PathwayRow {
                        rank: p.rank,
                        token: p.token,
                        layer,
                        expert,
                        is_top2: p.is_top2,
                    })
            })
            .collect()
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Writes the CSV bundle and its manifest into `dir`. Empty products are
/// skipped, so an empty run leaves only the manifest.
pub fn export_analytics(products: &AnalyticsProducts, dir: &Path, manifest: &RunManifest) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if !products.loads.is_empty() {
        let p = dir.join(LOADS_CSV);
        write_csv(&p, &products.load_rows())?;
        written.push(p);
    }
    if !products.prefs.is_empty() {
        let p = dir.join(PREFS_CSV);
        write_csv(&p, &products.pref_rows())?;
        written.push(p);
    }
    if !products.pathways.is_empty() {
        let p = dir.join(PATHWAYS_CSV);
        write_csv(&p, &products.pathway_rows())?;
        written.push(p);
    }
    let mut manifest = manifest.clone();
    manifest.outputs = written
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    written.push(manifest.write(dir)?);
    Ok(written)
}
