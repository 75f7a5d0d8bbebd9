//! Adam training of the grouped objective, checkpoints and degeneracy checks.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{
    ElboNoise, GroupBatch, Model, ModelConfig, ModelParams, NamedTensor, ScaleConvention,
};
use crate::synthdata::GroupedDataset;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GVAE";
pub const CHECKPOINT_VERSION: u32 = 1;

const INIT_STREAM: u64 = 0;
const SAMPLING_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Groups per minibatch.
    pub groups_per_batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            groups_per_batch: 20,
            epochs: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.learning_rate, self.epsilon]
            .iter()
            .any(|v| v.is_nan() || *v <= 0.0)
        {
            return Err(Error::Config(
                "learning_rate and epsilon must be positive".into(),
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if self.groups_per_batch == 0 {
            return Err(Error::Config("groups_per_batch must be at least 1".into()));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(
                "seed must fit in a signed 64-bit integer".into(),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn for_params(params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params.entries().iter().map(|e| e.tensor.len()).collect();
        AdamState::with_sizes(&sizes)
    }

    pub fn with_sizes(sizes: &[usize]) -> Self {
        AdamState {
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` along `-grad` (descent).
/// `t` is the 1-based step number.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    first: &mut [f64],
    second: &mut [f64],
    t: u64,
    hyper: &AdamHyper,
) {
    let c1 = 1.0 - hyper.beta1.powf(t as f64);
    let c2 = 1.0 - hyper.beta2.powf(t as f64);
    for i in 0..param.len() {
        let g = grad[i];
        first[i] = hyper.beta1 * first[i] + (1.0 - hyper.beta1) * g;
        second[i] = hyper.beta2 * second[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = first[i] / c1;
        let v_hat = second[i] / c2;
        param[i] -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
    }
}

/// Adam descent step over all parameter tensors. `grads` are loss gradients,
/// in parameter order.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.first.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step;
    for (i, tensor) in params.tensors_mut().enumerate() {
        if grads[i].len() != tensor.len() {
            return Err(Error::Contract(format!(
                "gradient {i} has the wrong length"
            )));
        }
        adam_update(
            tensor.data_mut(),
            &grads[i],
            &mut state.first[i],
            &mut state.second[i],
            t,
            hyper,
        );
    }
    Ok(())
}

/// Uniform class choice, then members drawn from that class.
#[derive(Debug, Clone)]
pub struct GroupSampler {
    classes: Vec<(u32, Vec<usize>)>,
}

impl GroupSampler {
    pub fn new(dataset: &GroupedDataset) -> Result<Self> {
        let classes: Vec<(u32, Vec<usize>)> = dataset.class_members().into_iter().collect();
        if classes.is_empty() {
            return Err(Error::Contract(
                "cannot sample groups from an empty dataset".into(),
            ));
        }
        Ok(GroupSampler { classes })
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    /// `groups` groups of `group_size` members, each from one class. Members
    /// are distinct unless the class has fewer than `group_size` items.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        dataset: &GroupedDataset,
        group_size: usize,
        groups: usize,
        rng: &mut R,
    ) -> Result<GroupBatch> {
        if group_size == 0 {
            return Err(Error::Contract("group size must be at least 1".into()));
        }
        let dim = dataset.dim;
        let mut data = Vec::with_capacity(groups * group_size * dim);
        let mut labels = Vec::with_capacity(groups);
        let mut members = Vec::with_capacity(groups * group_size);
        for _ in 0..groups {
            let (class, items) = &self.classes[rng.random_range(0..self.classes.len())];
            if items.len() >= group_size {
                for j in index::sample(rng, items.len(), group_size) {
                    members.push(items[j]);
                }
            } else {
                for _ in 0..group_size {
                    members.push(items[rng.random_range(0..items.len())]);
                }
            }
            labels.push(*class);
        }
        for &m in &members {
            data.extend_from_slice(&dataset.items[m].data);
        }
        Ok(GroupBatch {
            data,
            groups,
            group_size,
            dim,
            labels,
            members,
        })
    }
}

pub fn sample_groups<R: Rng + ?Sized>(
    dataset: &GroupedDataset,
    group_size: usize,
    groups: usize,
    rng: &mut R,
) -> Result<GroupBatch> {
    GroupSampler::new(dataset)?.sample(dataset, group_size, groups, rng)
}

/// Positions of the sampling and noise streams, so training can resume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub sampling_word_pos: u128,
    pub noise_word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    pub adam: AdamState,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn convention(&self) -> ScaleConvention {
        self.model.config.scale_convention()
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// Fresh model with initial weights drawn from the seed's init stream.
    pub fn initial(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        let mut init_rng = stream_rng(train.seed, INIT_STREAM);
        let model = Model::init(model, &mut init_rng)?;
        let adam = AdamState::for_params(&model.params);
        Ok(Checkpoint {
            model,
            adam,
            rng: RngState {
                seed: train.seed,
                sampling_word_pos: 0,
                noise_word_pos: 0,
            },
            train,
        })
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_elbo: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Minibatches per epoch: enough groups to cover the dataset's items once.
pub fn steps_per_epoch(items: usize, groups_per_batch: usize, group_size: usize) -> usize {
    items.div_ceil(groups_per_batch * group_size).max(1)
}

pub fn train(
    dataset: &GroupedDataset,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let ckpt = Checkpoint::initial(model.clone(), config.clone())?;
    continue_training(ckpt, dataset, config.epochs, |_| {})
}

/// Runs `epochs` more epochs from `ckpt`, invoking `on_epoch` after each.
///
/// The optimizer ascends the ELBO: gradients of the objective are negated
/// and handed to Adam as loss gradients.
pub fn continue_training(
    mut ckpt: Checkpoint,
    dataset: &GroupedDataset,
    epochs: usize,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let cfg = ckpt.model.config.clone();
    if dataset.dim != cfg.data_dim {
        return Err(Error::Contract(format!(
            "dataset dimension {} does not match model data_dim {}",
            dataset.dim, cfg.data_dim
        )));
    }
    let sampler = GroupSampler::new(dataset)?;
    let mut sampling = stream_rng(ckpt.rng.seed, SAMPLING_STREAM);
    sampling.set_word_pos(ckpt.rng.sampling_word_pos);
    let mut noise_rng = stream_rng(ckpt.rng.seed, NOISE_STREAM);
    noise_rng.set_word_pos(ckpt.rng.noise_word_pos);
    let hyper = ckpt.train.adam();
    let (b, k) = (ckpt.train.groups_per_batch, cfg.group_size);
    let steps = steps_per_epoch(dataset.len(), b, k);
    let first_epoch = (ckpt.adam.step as usize) / steps;

    let mut log = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let mut total = 0.0;
        for _ in 0..steps {
            let batch = sampler.sample(dataset, k, b, &mut sampling)?;
            let noise = ElboNoise::sample(&mut noise_rng, &cfg, b, k);
            let (value, mut grads, graph) = ckpt.model.objective_with_gradients(&batch, &noise)?;
            let step = ckpt.adam.step + 1;
            if !value.is_finite() {
                let tensor = match graph.first_non_finite() {
                    Some(id) => format!("graph node {} ({})", id.index(), graph.op_name(id)),
                    None => "objective".to_string(),
                };
                return Err(Error::NonFinite { tensor, step });
            }
            for (g, e) in grads.iter_mut().zip(ckpt.model.params.entries()) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        tensor: format!("gradient of {}", e.name),
                        step,
                    });
                }
                g.iter_mut().for_each(|v| *v = -*v);
            }
            adam_step(&mut ckpt.model.params, &grads, &mut ckpt.adam, &hyper)?;
            if let Some(name) = ckpt.model.params.first_non_finite() {
                return Err(Error::NonFinite {
                    tensor: name.to_string(),
                    step,
                });
            }
            total += value;
        }
        let record = EpochRecord {
            epoch: first_epoch + e + 1,
            mean_elbo: total / steps as f64,
        };
        on_epoch(&record);
        log.push(record);
    }
    ckpt.rng.sampling_word_pos = sampling.get_word_pos();
    ckpt.rng.noise_word_pos = noise_rng.get_word_pos();
    Ok(TrainOutcome {
        checkpoint: ckpt,
        log,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degeneracy {
    Healthy,
    /// Every content mean is (nearly) zero.
    ContentCollapse,
    /// Every content precision is (nearly) one.
    VarianceCollapse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegeneracyThresholds {
    pub content: f64,
    pub precision: f64,
    pub min_samples: usize,
}

impl Default for DegeneracyThresholds {
    fn default() -> Self {
        DegeneracyThresholds {
            content: 1e-2,
            precision: 1e-2,
            min_samples: 100,
        }
    }
}

/// Classifies a model from its content encodings of `samples` (row-major).
pub fn detect_degenerate(
    model: &Model,
    samples: &[f64],
    thresholds: &DegeneracyThresholds,
) -> Result<Degeneracy> {
    let d = model.config.data_dim;
    let n = samples.len() / d;
    if n < thresholds.min_samples || !samples.len().is_multiple_of(d) {
        return Err(Error::Contract(format!(
            "degeneracy check needs at least {} samples, got {n}",
            thresholds.min_samples
        )));
    }
    let means = model.content_means(samples)?;
    let max_mean = means.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if max_mean < thresholds.content {
        return Ok(Degeneracy::ContentCollapse);
    }
    let precisions = model.content_precisions(samples)?;
    let max_dev = precisions
        .iter()
        .flatten()
        .fold(0.0f64, |a, p| a.max((p - 1.0).abs()));
    if max_dev < thresholds.precision {
        return Ok(Degeneracy::VarianceCollapse);
    }
    Ok(Degeneracy::Healthy)
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    role: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RngRecord {
    seed: u64,
    sampling_word_pos: String,
    noise_word_pos: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    step: u64,
    convention: ScaleConvention,
    rng: RngRecord,
    model: ModelConfig,
    train: TrainConfig,
    tensors: Vec<TensorRecord>,
}

/// `GVAE`, version (u32 LE), manifest length (u64 LE), TOML manifest, then
/// the raw little-endian float64 blobs the manifest points into.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut blobs: Vec<&[f64]> = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    let entries = ckpt.model.params.entries();
    let groups: [(&str, Vec<&[f64]>); 3] = [
        ("param", entries.iter().map(|e| e.tensor.data()).collect()),
        (
            "adam_first",
            ckpt.adam.first.iter().map(|v| v.as_slice()).collect(),
        ),
        (
            "adam_second",
            ckpt.adam.second.iter().map(|v| v.as_slice()).collect(),
        ),
    ];
    for (role, datas) in groups {
        for (e, data) in entries.iter().zip(datas) {
            tensors.push(TensorRecord {
                name: e.name.clone(),
                role: role.to_string(),
                shape: e.tensor.shape().to_vec(),
                offset,
            });
            offset += 8 * data.len() as u64;
            blobs.push(data);
        }
    }
    let manifest = Manifest {
        step: ckpt.adam.step,
        convention: ckpt.convention(),
        rng: RngRecord {
            seed: ckpt.rng.seed,
            sampling_word_pos: ckpt.rng.sampling_word_pos.to_string(),
            noise_word_pos: ckpt.rng.noise_word_pos.to_string(),
        },
        model: ckpt.model.config.clone(),
        train: ckpt.train.clone(),
        tensors,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + text.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for data in blobs {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        reason: reason.into(),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(format_err(0, "bad magic, expected GVAE"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let blob_start = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| format_err(16, format!("manifest of {len} bytes runs past end of file")))?;
    let text = std::str::from_utf8(&bytes[16..blob_start])
        .map_err(|e| format_err(16 + e.valid_up_to(), "manifest is not UTF-8"))?;
    let manifest: Manifest = toml::from_str(text).map_err(|e| {
        let at = e.span().map(|s| s.start).unwrap_or(0);
        format_err(16 + at, format!("manifest: {}", e.message()))
    })?;
    let blob = &bytes[blob_start..];

    let parse_pos = |s: &str| {
        s.parse::<u128>()
            .map_err(|_| format_err(16, format!("bad RNG position {s:?}")))
    };
    let rng = RngState {
        seed: manifest.rng.seed,
        sampling_word_pos: parse_pos(&manifest.rng.sampling_word_pos)?,
        noise_word_pos: parse_pos(&manifest.rng.noise_word_pos)?,
    };

    let mut expected_offset = 0u64;
    let mut params = Vec::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for rec in &manifest.tensors {
        let n: usize = rec.shape.iter().product();
        if rec.offset != expected_offset {
            return Err(format_err(
                blob_start + expected_offset as usize,
                format!(
                    "tensor {} ({}) at unexpected offset {}",
                    rec.name, rec.role, rec.offset
                ),
            ));
        }
        let start = rec.offset as usize;
        let end = start + 8 * n;
        if end > blob.len() {
            return Err(format_err(
                blob_start + blob.len(),
                format!("truncated data for tensor {} ({})", rec.name, rec.role),
            ));
        }
        let values: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        expected_offset = end as u64;
        match rec.role.as_str() {
            "param" => params.push(NamedTensor {
                name: rec.name.clone(),
                tensor: Tensor::new(rec.shape.clone(), values)?,
            }),
            "adam_first" => first.push(values),
            "adam_second" => second.push(values),
            other => return Err(format_err(16, format!("unknown tensor role {other:?}"))),
        }
    }
    if expected_offset as usize != blob.len() {
        return Err(format_err(
            blob_start + expected_offset as usize,
            format!("{} trailing bytes", blob.len() - expected_offset as usize),
        ));
    }
    let params = ModelParams::from_entries(params)?;
    if first.len() != params.len() || second.len() != params.len() {
        return Err(format_err(16, "optimizer moments do not match parameters"));
    }
    let model = Model::new(manifest.model, params)?;
    if model.config.scale_convention() != manifest.convention {
        return Err(format_err(
            16,
            "scale convention does not match aggregation mode",
        ));
    }
    Ok(Checkpoint {
        model,
        train: manifest.train,
        adam: AdamState {
            first,
            second,
            step: manifest.step,
        },
        rng,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}
