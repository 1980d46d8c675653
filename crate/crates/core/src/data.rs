//! Synthetic multimodal tasks.
//!
//! Every sample carries one hidden class `c`. Raw features are the class's
//! codebook pattern plus Gaussian noise; the emitted target is recomputed
//! from the features alone (argmax of codebook dot products), so the target
//! is a deterministic function of the input. The answer is the class token
//! shifted by a per-modality offset (or unshifted for caption-style
//! alignment tasks) followed by EOS.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::connectors::{ConnectorConfig, Modality, VIDEO_FRAMES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const SEP: usize = 2;
pub const EOS: usize = 3;
/// Caption-style instruction: answer with the unshifted class token.
pub const CAP: usize = 9;
pub const CLASS_BASE: usize = 16;

/// Seed of the fixed evaluation split.
pub const EVAL_SEED: u64 = 0x5EED_E7A1;

pub fn instruction_token(m: Modality) -> usize {
    match m {
        Modality::Image => 4,
        Modality::Video => 5,
        Modality::Audio => 6,
        Modality::Speech => 7,
        Modality::Text => 8,
    }
}

/// Answer offset of the instruction task for each modality.
pub fn task_shift(m: Modality) -> usize {
    match m {
        Modality::Text => 0,
        Modality::Image | Modality::Video => 3,
        Modality::Audio => 7,
        Modality::Speech => 11,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default = "d_patches")]
    pub image_patches: usize,
    #[serde(default = "d_frames_min")]
    pub audio_frames_min: usize,
    #[serde(default = "d_frames_max")]
    pub audio_frames_max: usize,
    #[serde(default = "d_text_len")]
    pub text_len: usize,
    #[serde(default = "d_noise")]
    pub noise: f64,
    /// Seed of the codebooks shared by all tasks.
    #[serde(default = "d_world_seed")]
    pub world_seed: u64,
    #[serde(default = "d_eval_samples")]
    pub eval_samples: usize,
}

fn d_classes() -> usize {
    16
}
fn d_patches() -> usize {
    4
}
fn d_frames_min() -> usize {
    3
}
fn d_frames_max() -> usize {
    8
}
fn d_text_len() -> usize {
    4
}
fn d_noise() -> f64 {
    0.3
}
fn d_world_seed() -> u64 {
    7
}
fn d_eval_samples() -> usize {
    64
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: d_classes(),
            image_patches: d_patches(),
            audio_frames_min: d_frames_min(),
            audio_frames_max: d_frames_max(),
            text_len: d_text_len(),
            noise: d_noise(),
            world_seed: d_world_seed(),
            eval_samples: d_eval_samples(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.classes == 0 || CLASS_BASE + self.classes > vocab {
            return Err(Error::Config(format!(
                "{} classes do not fit a vocabulary of {vocab}",
                self.classes
            )));
        }
        if self.audio_frames_min == 0 || self.audio_frames_min > self.audio_frames_max {
            return Err(Error::Config("audio frame range must satisfy 1 <= min <= max".into()));
        }
        if self.image_patches == 0 || self.text_len == 0 {
            return Err(Error::Config("image_patches and text_len must be positive".into()));
        }
        Ok(())
    }
}

/// Raw input of one sample, before any encoder.
#[derive(Debug, Clone, PartialEq)]
pub enum RawInput {
    /// `patches × raw`.
    Image(Tensor<f64>),
    /// Eight frames of `patches × raw`.
    Video(Vec<Tensor<f64>>),
    /// `frames × raw`, variable length.
    Audio(Tensor<f64>),
    Speech(Tensor<f64>),
    Text(Vec<usize>),
}

impl RawInput {
    pub fn modality(&self) -> Modality {
        match self {
            RawInput::Image(_) => Modality::Image,
            RawInput::Video(_) => Modality::Video,
            RawInput::Audio(_) => Modality::Audio,
            RawInput::Speech(_) => Modality::Speech,
            RawInput::Text(_) => Modality::Text,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match self {
            RawInput::Image(t) | RawInput::Audio(t) | RawInput::Speech(t) => t.shape().to_vec(),
            RawInput::Video(f) => {
                let mut d = vec![f.len()];
                d.extend_from_slice(f[0].shape());
                d
            }
            RawInput::Text(ids) => vec![ids.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub raw: RawInput,
    pub instruction: usize,
    /// Answer tokens: class token then EOS.
    pub answer: [usize; 2],
    pub seed: u64,
}

impl Sample {
    pub fn modality(&self) -> Modality {
        self.raw.modality()
    }

    pub fn record(&self) -> SampleRecord {
        SampleRecord {
            modality: self.modality(),
            dims: self.raw.dims(),
            seed: self.seed,
            targets: self.answer.to_vec(),
        }
    }
}

/// Serializable description of a sample; `seed` regenerates its features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub modality: Modality,
    pub dims: Vec<usize>,
    pub seed: u64,
    pub targets: Vec<usize>,
}

/// Class codebooks shared by every task.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: DataConfig,
    /// `classes × (patches·image_raw)`; used by image and video.
    pub image: Tensor<f64>,
    /// `classes × audio_raw`.
    pub audio: Tensor<f64>,
    /// `classes × speech_raw`.
    pub speech: Tensor<f64>,
    image_raw: usize,
}

impl World {
    pub fn new(config: &DataConfig, cc: &ConnectorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.world_seed);
        let c = config.classes;
        Self {
            image: Tensor::randn(&[c, config.image_patches * cc.image_raw], 1.0, &mut rng),
            audio: Tensor::randn(&[c, cc.audio_raw], 1.0, &mut rng),
            speech: Tensor::randn(&[c, cc.speech_raw], 1.0, &mut rng),
            image_raw: cc.image_raw,
            config: config.clone(),
        }
    }

    fn codebook(&self, m: Modality) -> &Tensor<f64> {
        match m {
            Modality::Audio => &self.audio,
            Modality::Speech => &self.speech,
            _ => &self.image,
        }
    }

    /// The target function: class whose codebook pattern has the largest dot
    /// product with the mean features; ties go to the lower class.
    pub fn target_class(&self, raw: &RawInput) -> Result<usize> {
        let feature: Vec<f64> = match raw {
            RawInput::Text(ids) => {
                let first = *ids.first().ok_or_else(|| Error::Invalid("empty text sample".into()))?;
                return first
                    .checked_sub(CLASS_BASE)
                    .filter(|&c| c < self.config.classes)
                    .ok_or_else(|| Error::Invalid(format!("token {first} is not a class token")));
            }
            RawInput::Image(t) => t.data().to_vec(),
            RawInput::Video(frames) => {
                let n = frames[0].len();
                (0..n)
                    .map(|i| frames.iter().map(|f| f.data()[i]).sum::<f64>() / frames.len() as f64)
                    .collect()
            }
            RawInput::Audio(t) | RawInput::Speech(t) => {
                let (rows, cols) = (t.rows(), t.cols());
                (0..cols)
                    .map(|j| (0..rows).map(|r| t.at(r, j)).sum::<f64>() / rows as f64)
                    .collect()
            }
        };
        let book = self.codebook(raw.modality());
        if book.cols() != feature.len() {
            return Err(Error::shape("target function", book.shape(), &[feature.len()]));
        }
        let mut best = (0, f64::NEG_INFINITY);
        for c in 0..book.rows() {
            let dot: f64 = book.row(c).iter().zip(&feature).map(|(a, b)| a * b).sum();
            if dot > best.1 {
                best = (c, dot);
            }
        }
        Ok(best.0)
    }

    fn noisy(&self, pattern: &[f64], rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let noise = Tensor::<f64>::randn(&[rows, cols], self.config.noise, rng);
        let data = noise
            .data()
            .iter()
            .enumerate()
            .map(|(i, n)| pattern[i % pattern.len()] + n)
            .collect();
        Tensor::new(vec![rows, cols], data).expect("consistent shape")
    }

    /// Draws the raw input of one sample from its own seed.
    pub fn raw_input(&self, modality: Modality, seed: u64) -> RawInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = &self.config;
        let class = rng.gen_range(0..cfg.classes);
        match modality {
            Modality::Text => RawInput::Text(vec![CLASS_BASE + class; cfg.text_len]),
            Modality::Image => RawInput::Image(self.noisy(self.image.row(class), cfg.image_patches, self.image_raw, &mut rng)),
            Modality::Video => RawInput::Video(
                (0..VIDEO_FRAMES)
                    .map(|_| self.noisy(self.image.row(class), cfg.image_patches, self.image_raw, &mut rng))
                    .collect(),
            ),
            Modality::Audio | Modality::Speech => {
                let frames = rng.gen_range(cfg.audio_frames_min..=cfg.audio_frames_max);
                let book = self.codebook(modality);
                let t = self.noisy(book.row(class), frames, book.cols(), &mut rng);
                if modality == Modality::Audio {
                    RawInput::Audio(t)
                } else {
                    RawInput::Speech(t)
                }
            }
        }
    }
}

/// A task: which modalities it mixes and whether answers are caption-style
/// (unshifted) or instruction-style (shifted per modality).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub name: String,
    pub mix: Vec<Modality>,
    pub aligned: bool,
}

impl SyntheticTask {
    pub fn new(name: impl Into<String>, mix: &[Modality], aligned: bool) -> Self {
        Self {
            name: name.into(),
            mix: mix.to_vec(),
            aligned,
        }
    }

    /// Tasks reachable by name from the command line.
    pub fn named(name: &str) -> Result<Self> {
        use Modality::*;
        Ok(match name {
            "text" => Self::new("text", &[Text], true),
            "caption" => Self::new("caption", &[Image, Video, Audio, Speech], true),
            "image" => Self::new("image", &[Image, Video], false),
            "audio" => Self::new("audio", &[Audio], false),
            "speech" => Self::new("speech", &[Speech], false),
            "mixed" => Self::new("mixed", &[Text, Image, Video, Audio, Speech], false),
            other => {
                if let Ok(m) = other.parse::<Modality>() {
                    Self::new(other, &[m], false)
                } else {
                    return Err(Error::Config(format!("unknown task `{other}`")));
                }
            }
        })
    }

    pub fn sample(&self, world: &World, modality: Modality, seed: u64) -> Result<Sample> {
        let raw = world.raw_input(modality, seed);
        let class = world.target_class(&raw)?;
        let (instruction, shift) = if self.aligned {
            (CAP, 0)
        } else {
            (instruction_token(modality), task_shift(modality))
        };
        let c = world.config.classes;
        Ok(Sample {
            raw,
            instruction,
            answer: [CLASS_BASE + (class + shift) % c, EOS],
            seed,
        })
    }
}

/// Per-sample seed derived from a batch seed (SplitMix64 finalizer).
pub fn sample_seed(batch_seed: u64, index: u64) -> u64 {
    let mut z = batch_seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic batch: modalities cycle through the task mix.
pub fn generate_synthetic_batch(task: &SyntheticTask, world: &World, batch: usize, seed: u64) -> Result<Vec<Sample>> {
    if task.mix.is_empty() {
        return Err(Error::Config(format!("task `{}` has an empty modality mix", task.name)));
    }
    (0..batch)
        .map(|i| task.sample(world, task.mix[i % task.mix.len()], sample_seed(seed, i as u64)))
        .collect()
}

pub fn eval_split(task: &SyntheticTask, world: &World) -> Result<Vec<Sample>> {
    generate_synthetic_batch(task, world, world.config.eval_samples, EVAL_SEED)
}
