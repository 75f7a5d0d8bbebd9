//! Few-shot classification, latent analyses and image grids.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::Model;
use crate::synthdata::GroupedDataset;
use crate::{Error, Result};

pub const THREADS_ENV: &str = "GVAE_THREADS";

/// Worker count from `GVAE_THREADS`; 1 when unset.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => parse_threads(&v),
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(Error::Config(format!("{THREADS_ENV}: {e}"))),
    }
}

pub fn parse_threads(v: &str) -> Result<usize> {
    match v.trim().parse::<usize>() {
        Ok(n) if n >= 1 => Ok(n),
        _ => Err(Error::Config(format!(
            "{THREADS_ENV} must be a positive integer, got {v:?}"
        ))),
    }
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FewShotProtocol {
    pub splits: usize,
    /// Gallery sizes per class to evaluate.
    pub shots: Vec<usize>,
    pub seed: u64,
    #[serde(skip, default = "one")]
    pub threads: usize,
}

impl Default for FewShotProtocol {
    fn default() -> Self {
        FewShotProtocol {
            splits: 100,
            shots: (1..=10).collect(),
            seed: 0,
            threads: 1,
        }
    }
}

impl FewShotProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.splits == 0 {
            return Err(Error::Config("splits must be at least 1".into()));
        }
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(Error::Config(
                "shots must be a non-empty list of positive sizes".into(),
            ));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(
                "protocol seed must fit in a signed 64-bit integer".into(),
            ));
        }
        Ok(())
    }

    pub fn max_shots(&self) -> usize {
        self.shots.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShotRate {
    pub shots: usize,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinRate {
    pub bin: u32,
    pub probes: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRates {
    pub bins: Vec<BinRate>,
    /// Bins that never held a probe.
    pub omitted: Vec<u32>,
}

/// Rows of `data` scaled to unit length; zero rows stay zero.
fn normalize_rows(data: &[f64], dim: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    for row in out.chunks_mut(dim) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (
        a.iter().map(|v| v * v).sum::<f64>().sqrt(),
        b.iter().map(|v| v * v).sum::<f64>().sqrt(),
    );
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

struct Classifier<'a> {
    unit: Vec<f64>,
    dim: usize,
    labels: &'a [u32],
    classes: Vec<Vec<usize>>,
}

/// One split at gallery size `shots`: for each probe, whether it was
/// classified correctly.
struct SplitOutcome {
    probes: Vec<(usize, bool)>,
}

impl<'a> Classifier<'a> {
    fn new(embeddings: &[f64], dim: usize, labels: &'a [u32], max_shots: usize) -> Result<Self> {
        if dim == 0 || embeddings.len() != labels.len() * dim {
            return Err(Error::Contract(format!(
                "{} embedding values for {} labels of dimension {dim}",
                embeddings.len(),
                labels.len()
            )));
        }
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        if by_class.len() < 2 {
            return Err(Error::Protocol(format!(
                "need at least 2 classes, found {}",
                by_class.len()
            )));
        }
        for (c, members) in &by_class {
            if members.len() <= max_shots {
                return Err(Error::Protocol(format!(
                    "class {c} has {} items, needs more than {max_shots}",
                    members.len()
                )));
            }
        }
        Ok(Classifier {
            unit: normalize_rows(embeddings, dim),
            dim,
            labels,
            classes: by_class.into_values().collect(),
        })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.unit[i * self.dim..(i + 1) * self.dim]
    }

    fn run(&self, seed: u64, split: usize, shots: usize) -> SplitOutcome {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((split as u64) << 16) | shots as u64);
        let mut gallery = Vec::with_capacity(self.classes.len() * shots);
        let mut probes = Vec::new();
        for members in &self.classes {
            let mut m = members.clone();
            m.shuffle(&mut rng);
            gallery.extend_from_slice(&m[..shots]);
            probes.extend_from_slice(&m[shots..]);
        }
        // ties go to the earliest entry of the shuffled gallery
        gallery.shuffle(&mut rng);
        let outcome = probes
            .iter()
            .map(|&p| {
                let q = self.row(p);
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = gallery[0];
                for &g in &gallery {
                    let s: f64 = q.iter().zip(self.row(g)).map(|(a, b)| a * b).sum();
                    if s > best {
                        best = s;
                        best_idx = g;
                    }
                }
                (p, self.labels[best_idx] == self.labels[p])
            })
            .collect();
        SplitOutcome { probes: outcome }
    }

    fn run_all(&self, protocol: &FewShotProtocol, shots: usize) -> Vec<SplitOutcome> {
        let threads = protocol.threads.clamp(1, protocol.splits);
        if threads == 1 {
            return (0..protocol.splits)
                .map(|s| self.run(protocol.seed, s, shots))
                .collect();
        }
        let chunk = protocol.splits.div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let lo = t * chunk;
                    let hi = ((t + 1) * chunk).min(protocol.splits);
                    scope.spawn(move || {
                        (lo..hi)
                            .map(|s| self.run(protocol.seed, s, shots))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("few-shot worker panicked"))
                .collect()
        })
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Few-shot success rates from precomputed embeddings (`labels.len()` rows
/// of `dim` values), one entry per gallery size in the protocol.
pub fn fewshot_embeddings(
    embeddings: &[f64],
    dim: usize,
    labels: &[u32],
    protocol: &FewShotProtocol,
) -> Result<Vec<ShotRate>> {
    protocol.validate()?;
    let clf = Classifier::new(embeddings, dim, labels, protocol.max_shots())?;
    Ok(protocol
        .shots
        .iter()
        .map(|&s| {
            let rates: Vec<f64> = clf
                .run_all(protocol, s)
                .iter()
                .map(|o| o.probes.iter().filter(|p| p.1).count() as f64 / o.probes.len() as f64)
                .collect();
            let (mean, sd) = mean_sd(&rates);
            ShotRate { shots: s, mean, sd }
        })
        .collect())
}

/// One-shot success rates pooled over splits, separately for each probe bin
/// in `0..bin_count`.
pub fn fewshot_by_bin_embeddings(
    embeddings: &[f64],
    dim: usize,
    labels: &[u32],
    bins: &[u32],
    bin_count: u32,
    protocol: &FewShotProtocol,
) -> Result<BinRates> {
    protocol.validate()?;
    if bins.len() != labels.len() {
        return Err(Error::Contract(
            "one transformation bin per item required".into(),
        ));
    }
    let clf = Classifier::new(embeddings, dim, labels, 1)?;
    let top = bins
        .iter()
        .copied()
        .max()
        .map_or(bin_count, |b| bin_count.max(b + 1));
    let mut hits = vec![0usize; top as usize];
    let mut totals = vec![0usize; top as usize];
    for outcome in clf.run_all(protocol, 1) {
        for (p, ok) in outcome.probes {
            let b = bins[p] as usize;
            totals[b] += 1;
            hits[b] += ok as usize;
        }
    }
    let mut result = BinRates {
        bins: Vec::new(),
        omitted: Vec::new(),
    };
    for b in 0..top as usize {
        if totals[b] == 0 {
            result.omitted.push(b as u32);
        } else {
            result.bins.push(BinRate {
                bin: b as u32,
                probes: totals[b],
                rate: hits[b] as f64 / totals[b] as f64,
            });
        }
    }
    Ok(result)
}

/// Few-shot rates with every test image embedded on its own as `h(x)`.
pub fn fewshot(
    model: &Model,
    dataset: &GroupedDataset,
    protocol: &FewShotProtocol,
) -> Result<Vec<ShotRate>> {
    let emb = model.content_means(&dataset.flat_data())?;
    fewshot_embeddings(&emb, model.config.content_dim, &dataset.labels(), protocol)
}

pub fn fewshot_by_transformation(
    model: &Model,
    dataset: &GroupedDataset,
    protocol: &FewShotProtocol,
) -> Result<BinRates> {
    let emb = model.content_means(&dataset.flat_data())?;
    fewshot_by_bin_embeddings(
        &emb,
        model.config.content_dim,
        &dataset.labels(),
        &dataset.bins(),
        dataset.bin_count,
        protocol,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimensionStd {
    pub dim: usize,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionReport {
    /// Fraction of the largest std a dimension needs to count as effective.
    pub threshold: f64,
    /// Sorted by decreasing std.
    pub dimensions: Vec<DimensionStd>,
    pub effective: Vec<usize>,
}

impl DimensionReport {
    pub fn from_stds(stds: &[f64], threshold: f64) -> Self {
        let mut dimensions: Vec<DimensionStd> = stds
            .iter()
            .enumerate()
            .map(|(dim, &std)| DimensionStd { dim, std })
            .collect();
        dimensions.sort_by(|a, b| b.std.total_cmp(&a.std).then(a.dim.cmp(&b.dim)));
        let max = dimensions.first().map_or(0.0, |d| d.std);
        let effective = if max > 0.0 {
            dimensions
                .iter()
                .filter(|d| d.std >= threshold * max)
                .map(|d| d.dim)
                .collect()
        } else {
            Vec::new()
        };
        DimensionReport {
            threshold,
            dimensions,
            effective,
        }
    }

    pub fn top_effective(&self, n: usize) -> Vec<usize> {
        self.effective.iter().copied().take(n).collect()
    }
}

fn column_stats(values: &[f64], cols: usize, col: usize) -> (f64, f64) {
    let n = values.len() / cols;
    let mean = (0..n).map(|r| values[r * cols + col]).sum::<f64>() / n as f64;
    let var = (0..n)
        .map(|r| (values[r * cols + col] - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    (mean, var.sqrt())
}

/// Std of each content-mean coordinate over `images` (row-major).
pub fn analyze_dimensions(
    model: &Model,
    images: &[f64],
    threshold: f64,
) -> Result<DimensionReport> {
    let d = model.config.data_dim;
    if images.len() < 2 * d || !images.len().is_multiple_of(d) {
        return Err(Error::Contract(
            "dimension analysis needs at least 2 images".into(),
        ));
    }
    let h = model.content_means(images)?;
    let m = model.config.content_dim;
    let stds: Vec<f64> = (0..m).map(|j| column_stats(&h, m, j).1).collect();
    Ok(DimensionReport::from_stds(&stds, threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub bin: u32,
    pub count: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Linear-interpolated quantile of sorted `v`.
fn quantile(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

impl Quartiles {
    fn of(bin: u32, mut values: Vec<f64>) -> Self {
        values.sort_by(f64::total_cmp);
        Quartiles {
            bin,
            count: values.len(),
            q1: quantile(&values, 0.25),
            median: quantile(&values, 0.5),
            q3: quantile(&values, 0.75),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionPrecision {
    pub dim: usize,
    pub bins: Vec<Quartiles>,
}

impl DimensionPrecision {
    /// Largest over smallest per-bin median.
    pub fn peak_ratio(&self) -> f64 {
        let (lo, hi) = self
            .bins
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), b| {
                (lo.min(b.median), hi.max(b.median))
            });
        hi / lo
    }
}

fn group_by_bin(bins: &[u32]) -> BTreeMap<u32, Vec<usize>> {
    let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &b) in bins.iter().enumerate() {
        out.entry(b).or_default().push(i);
    }
    out
}

fn check_images(model: &Model, images: &[f64], bins: &[u32]) -> Result<()> {
    let d = model.config.data_dim;
    if images.is_empty() || images.len() != bins.len() * d {
        return Err(Error::Contract(format!(
            "{} image values for {} bin labels of dimension {d}",
            images.len(),
            bins.len()
        )));
    }
    Ok(())
}

/// Per-bin quartiles of the content precision `1/s(x)` for each of `dims`.
pub fn precision_by_transformation(
    model: &Model,
    images: &[f64],
    bins: &[u32],
    dims: &[usize],
) -> Result<Vec<DimensionPrecision>> {
    check_images(model, images, bins)?;
    let m = model.config.content_dim;
    if let Some(&bad) = dims.iter().find(|&&d| d >= m) {
        return Err(Error::Contract(format!(
            "content dimension {bad} out of range"
        )));
    }
    let precisions: Vec<Vec<f64>> = model
        .encode_content_batch(images)?
        .iter()
        .map(|q| q.precision())
        .collect();
    let groups = group_by_bin(bins);
    Ok(dims
        .iter()
        .map(|&dim| DimensionPrecision {
            dim,
            bins: groups
                .iter()
                .map(|(&b, idx)| {
                    Quartiles::of(b, idx.iter().map(|&i| precisions[i][dim]).collect())
                })
                .collect(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinDistance {
    pub bin: u32,
    pub count: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionDistance {
    pub dim: usize,
    pub bins: Vec<BinDistance>,
}

impl DimensionDistance {
    /// Bin whose images change most when the dimension is perturbed.
    pub fn peak_bin(&self) -> Option<u32> {
        self.bins
            .iter()
            .max_by(|a, b| a.mean.total_cmp(&b.mean))
            .map(|b| b.bin)
    }
}

/// Mean per-bin distance `||f(g, h⁺) - f(g, h⁻)|| / √D` between decodings
/// with content coordinate `dim` set to `μ ± 3σ`.
pub fn perturbation_distance(
    model: &Model,
    images: &[f64],
    bins: &[u32],
    dim: usize,
) -> Result<DimensionDistance> {
    check_images(model, images, bins)?;
    let (l, m, d) = (
        model.config.transformation_dim,
        model.config.content_dim,
        model.config.data_dim,
    );
    if dim >= m {
        return Err(Error::Contract(format!(
            "content dimension {dim} out of range"
        )));
    }
    let n = bins.len();
    let mut z_lo = model.content_means(images)?;
    let (mu, sigma) = column_stats(&z_lo, m, dim);
    if sigma == 0.0 {
        return Err(Error::DegenerateDimension(dim));
    }
    let y = model.transformation_means(images)?;
    let mut z_hi = z_lo.clone();
    for r in 0..n {
        z_lo[r * m + dim] = mu - 3.0 * sigma;
        z_hi[r * m + dim] = mu + 3.0 * sigma;
    }
    debug_assert_eq!(y.len(), n * l);
    let a = model.decode_batch(&y, &z_lo)?;
    let b = model.decode_batch(&y, &z_hi)?;
    let dist: Vec<f64> = (0..n)
        .map(|r| {
            let s: f64 = (0..d).map(|i| (a[r * d + i] - b[r * d + i]).powi(2)).sum();
            (s / d as f64).sqrt()
        })
        .collect();
    Ok(DimensionDistance {
        dim,
        bins: group_by_bin(bins)
            .into_iter()
            .map(|(bin, idx)| BinDistance {
                bin,
                count: idx.len(),
                mean: idx.iter().map(|&i| dist[i]).sum::<f64>() / idx.len() as f64,
            })
            .collect(),
    })
}

/// Sample correlation; `None` when either side is constant or lengths differ.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionAnalysis {
    pub dim: usize,
    pub precision: Vec<Quartiles>,
    pub distance: Vec<BinDistance>,
    pub peak_bin: Option<u32>,
    /// Between per-bin median precision and per-bin mean distance.
    pub correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub dimensions: DimensionReport,
    pub per_dimension: Vec<DimensionAnalysis>,
}

/// Effective dimensions of `dataset`, then precision and perturbation
/// profiles for the `top` strongest of them.
pub fn analyze(
    model: &Model,
    dataset: &GroupedDataset,
    threshold: f64,
    top: usize,
) -> Result<AnalysisReport> {
    let images = dataset.flat_data();
    let bins = dataset.bins();
    let dimensions = analyze_dimensions(model, &images, threshold)?;
    let dims = dimensions.top_effective(top);
    let precision = precision_by_transformation(model, &images, &bins, &dims)?;
    let mut per_dimension = Vec::with_capacity(dims.len());
    for (p, &dim) in precision.into_iter().zip(&dims) {
        let distance = perturbation_distance(model, &images, &bins, dim)?;
        let medians: Vec<f64> = p.bins.iter().map(|q| q.median).collect();
        let means: Vec<f64> = distance.bins.iter().map(|b| b.mean).collect();
        per_dimension.push(DimensionAnalysis {
            dim,
            peak_bin: distance.peak_bin(),
            correlation: pearson(&medians, &means),
            precision: p.bins,
            distance: distance.bins,
        });
    }
    Ok(AnalysisReport {
        dimensions,
        per_dimension,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aggregation: String,
    pub content_dim: usize,
    pub test_items: usize,
    pub test_classes: usize,
    pub protocol: FewShotProtocol,
    pub fewshot: Vec<ShotRate>,
    pub one_shot_by_bin: BinRates,
    pub analysis: AnalysisReport,
}

impl EvalReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

pub fn evaluate(
    model: &Model,
    dataset: &GroupedDataset,
    protocol: &FewShotProtocol,
    threshold: f64,
    top: usize,
) -> Result<EvalReport> {
    Ok(EvalReport {
        aggregation: model.config.aggregation.as_str().to_string(),
        content_dim: model.config.content_dim,
        test_items: dataset.len(),
        test_classes: dataset.class_members().len(),
        protocol: protocol.clone(),
        fewshot: fewshot(model, dataset, protocol)?,
        one_shot_by_bin: fewshot_by_transformation(model, dataset, protocol)?,
        analysis: analyze(model, dataset, threshold, top)?,
    })
}

/// Row-major matrix of images, each `dim` values.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatrix {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub cells: Vec<f64>,
}

impl ImageMatrix {
    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let k = (i * self.cols + j) * self.dim;
        &self.cells[k..k + self.dim]
    }
}

fn rows_of(model: &Model, images: &[f64], what: &str) -> Result<usize> {
    let d = model.config.data_dim;
    if images.is_empty() || !images.len().is_multiple_of(d) {
        return Err(Error::Contract(format!(
            "{what} must be whole images of dimension {d}"
        )));
    }
    Ok(images.len() / d)
}

/// Cell `(i, j)` decodes the transformation of `transformation_images[j]`
/// with the content of `content_images[i]`.
pub fn swap_matrix(
    model: &Model,
    content_images: &[f64],
    transformation_images: &[f64],
) -> Result<ImageMatrix> {
    let ni = rows_of(model, content_images, "content images")?;
    let nj = rows_of(model, transformation_images, "transformation images")?;
    let (l, m) = (model.config.transformation_dim, model.config.content_dim);
    let h = model.content_means(content_images)?;
    let g = model.transformation_means(transformation_images)?;
    let mut ys = Vec::with_capacity(ni * nj * l);
    let mut zs = Vec::with_capacity(ni * nj * m);
    for i in 0..ni {
        for j in 0..nj {
            ys.extend_from_slice(&g[j * l..(j + 1) * l]);
            zs.extend_from_slice(&h[i * m..(i + 1) * m]);
        }
    }
    Ok(ImageMatrix {
        rows: ni,
        cols: nj,
        dim: model.config.data_dim,
        cells: model.decode_batch(&ys, &zs)?,
    })
}

/// Cell `(a, b)` decodes `(1-β)g(x1)+βg(x2)` with `(1-α)h(x1)+αh(x2)` for
/// `α = alphas[a]`, `β = betas[b]`. Values outside `[0, 1]` extrapolate.
pub fn interp_matrix(
    model: &Model,
    x1: &[f64],
    x2: &[f64],
    alphas: &[f64],
    betas: &[f64],
) -> Result<ImageMatrix> {
    let d = model.config.data_dim;
    if x1.len() != d || x2.len() != d {
        return Err(Error::Contract(format!(
            "interpolation endpoints must have dimension {d}"
        )));
    }
    if alphas.is_empty() || betas.is_empty() {
        return Err(Error::Contract("empty interpolation grid".into()));
    }
    let both: Vec<f64> = x1.iter().chain(x2).copied().collect();
    let (l, m) = (model.config.transformation_dim, model.config.content_dim);
    let g = model.transformation_means(&both)?;
    let h = model.content_means(&both)?;
    let mut ys = Vec::with_capacity(alphas.len() * betas.len() * l);
    let mut zs = Vec::with_capacity(alphas.len() * betas.len() * m);
    for &a in alphas {
        for &b in betas {
            ys.extend((0..l).map(|k| (1.0 - b) * g[k] + b * g[l + k]));
            zs.extend((0..m).map(|k| (1.0 - a) * h[k] + a * h[m + k]));
        }
    }
    Ok(ImageMatrix {
        rows: alphas.len(),
        cols: betas.len(),
        dim: d,
        cells: model.decode_batch(&ys, &zs)?,
    })
}

/// Grayscale canvas of tiles separated by 1-pixel lines.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

pub const SEPARATOR_VALUE: f64 = 1.0;

impl ImageGrid {
    /// Lays out `tiles[r][c]` (each `h × w`, `None` for blank) on one canvas.
    pub fn compose(tiles: &[Vec<Option<&[f64]>>], h: usize, w: usize) -> Result<Self> {
        let rows = tiles.len();
        let cols = tiles.first().map_or(0, |r| r.len());
        if rows == 0 || cols == 0 || tiles.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract(
                "tile layout must be a non-empty rectangle".into(),
            ));
        }
        let width = cols * w + cols - 1;
        let height = rows * h + rows - 1;
        let mut pixels = vec![SEPARATOR_VALUE; width * height];
        for (r, row) in tiles.iter().enumerate() {
            for (c, tile) in row.iter().enumerate() {
                let (top, left) = (r * (h + 1), c * (w + 1));
                for y in 0..h {
                    for x in 0..w {
                        pixels[(top + y) * width + left + x] = match tile {
                            Some(t) if t.len() == h * w => t[y * w + x],
                            Some(_) => {
                                return Err(Error::Contract(format!(
                                    "tile ({r}, {c}) is not {h}x{w}"
                                )))
                            }
                            None => 0.0,
                        };
                    }
                }
            }
        }
        Ok(ImageGrid {
            width,
            height,
            pixels,
        })
    }

    /// Matrix with its row samples down the left and column samples across
    /// the top; either may be omitted.
    pub fn with_samples(
        matrix: &ImageMatrix,
        row_samples: Option<&[f64]>,
        col_samples: Option<&[f64]>,
        h: usize,
        w: usize,
    ) -> Result<Self> {
        let d = matrix.dim;
        if h * w != d {
            return Err(Error::Contract(format!(
                "tiles of {h}x{w} cannot hold {d} values"
            )));
        }
        fn sample(s: &[f64], k: usize, d: usize) -> Result<&[f64]> {
            s.get(k * d..(k + 1) * d)
                .ok_or_else(|| Error::Contract("fewer samples than matrix rows or columns".into()))
        }
        let mut tiles: Vec<Vec<Option<&[f64]>>> = Vec::new();
        if let Some(cs) = col_samples {
            let mut top = Vec::new();
            if row_samples.is_some() {
                top.push(None);
            }
            for j in 0..matrix.cols {
                top.push(Some(sample(cs, j, d)?));
            }
            tiles.push(top);
        }
        for i in 0..matrix.rows {
            let mut row = Vec::new();
            if let Some(rs) = row_samples {
                row.push(Some(sample(rs, i, d)?));
            }
            for j in 0..matrix.cols {
                row.push(Some(matrix.cell(i, j)));
            }
            tiles.push(row);
        }
        ImageGrid::compose(&tiles, h, w)
    }

    /// Binary PGM, values clamped to `[0, 1]` and scaled to 0..=255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.pixels
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    /// Unclamped pixels as little-endian float32, row-major.
    pub fn to_f32_le(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect()
    }

    /// Writes `<stem>.pgm` and `<stem>.f32`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::File::create(dir.join(format!("{stem}.pgm")))?.write_all(&self.to_pgm())?;
        std::fs::File::create(dir.join(format!("{stem}.f32")))?.write_all(&self.to_f32_le())?;
        Ok(())
    }
}

/// Parses a binary PGM written by [`ImageGrid::to_pgm`].
pub fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos as u64,
                reason: "truncated PGM header".into(),
            });
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let bad = |reason: &str| Error::Format {
        offset: 0,
        reason: reason.into(),
    };
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    if fields[3] != "255" {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let data = bytes.get(pos..).unwrap_or(&[]);
    if data.len() != w * h {
        return Err(Error::Format {
            offset: pos as u64,
            reason: format!("expected {} pixels, found {}", w * h, data.len()),
        });
    }
    Ok((w, h, data.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{param_name, AggregationMode, HiddenWidths, ModelConfig, Network};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn one_hot(classes: usize, per: usize) -> (Vec<f64>, Vec<u32>) {
        let mut e = Vec::new();
        let mut l = Vec::new();
        for c in 0..classes {
            for _ in 0..per {
                e.extend((0..classes).map(|k| if k == c { 1.0 } else { 0.0 }));
                l.push(c as u32);
            }
        }
        (e, l)
    }

    fn small_protocol(splits: usize) -> FewShotProtocol {
        FewShotProtocol {
            splits,
            shots: vec![1, 2, 3],
            seed: 4,
            threads: 1,
        }
    }

    #[test]
    fn separated_embeddings_classify_perfectly() {
        let (e, l) = one_hot(4, 5);
        for r in fewshot_embeddings(&e, 4, &l, &small_protocol(10)).unwrap() {
            assert_eq!(r.mean, 1.0);
            assert_eq!(r.sd, 0.0);
        }
    }

    #[test]
    fn identical_embeddings_give_chance() {
        let classes = 5;
        let per = 11;
        let labels: Vec<u32> = (0..classes * per).map(|i| (i / per) as u32).collect();
        let e = vec![0.3; labels.len() * 2];
        let protocol = FewShotProtocol {
            splits: 200,
            shots: vec![1],
            seed: 9,
            threads: 1,
        };
        let r = fewshot_embeddings(&e, 2, &labels, &protocol).unwrap()[0];
        let p = 1.0 / classes as f64;
        let n = (200 * classes * (per - 1)) as f64;
        assert!(
            (r.mean - p).abs() <= 4.0 * (p * (1.0 - p) / n).sqrt(),
            "{}",
            r.mean
        );
    }

    #[test]
    fn too_small_classes_name_the_class() {
        let (e, mut l) = one_hot(3, 4);
        l[11] = 7;
        match fewshot_embeddings(&e, 3, &l, &small_protocol(2)) {
            Err(Error::Protocol(msg)) => assert!(msg.contains("class 2"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let (e, l) = one_hot(1, 6);
        assert!(matches!(
            fewshot_embeddings(&e, 1, &l, &small_protocol(2)),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn splits_partition_each_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels: Vec<u32> = (0..30).map(|i| (i % 3) as u32).collect();
        let e: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
        let clf = Classifier::new(&e, 2, &labels, 3).unwrap();
        for split in 0..5 {
            let out = clf.run(3, split, 3);
            let mut probes: Vec<usize> = out.probes.iter().map(|p| p.0).collect();
            assert_eq!(probes.len(), 30 - 9);
            probes.sort();
            probes.dedup();
            assert_eq!(probes.len(), 21);
        }
    }

    fn random_embeddings(seed: u64) -> (Vec<f64>, Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u32> = (0..60).map(|i| (i % 6) as u32).collect();
        let e = labels
            .iter()
            .flat_map(|&l| {
                let centre = l as f64;
                (0..4)
                    .map(|k| if k == (l as usize % 4) { 1.0 + centre * 0.1 } else { 0.0 } + rng.random_range(-0.6..0.6))
                    .collect::<Vec<_>>()
            })
            .collect();
        (e, labels)
    }

    #[test]
    fn rates_are_deterministic_and_thread_independent() {
        let (e, l) = random_embeddings(2);
        let p = small_protocol(12);
        let a = fewshot_embeddings(&e, 4, &l, &p).unwrap();
        assert_eq!(a, fewshot_embeddings(&e, 4, &l, &p).unwrap());
        let par = FewShotProtocol { threads: 5, ..p };
        assert_eq!(a, fewshot_embeddings(&e, 4, &l, &par).unwrap());
        assert!(a
            .iter()
            .all(|r| (0.0..=1.0).contains(&r.mean) && r.sd >= 0.0));
    }

    #[test]
    fn rates_invariant_to_rotation() {
        let (e, l) = random_embeddings(3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // random orthogonal matrix by Gram-Schmidt
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < 4 {
            let mut v: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
            for u in &q {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            q.push(v.iter().map(|a| a / n).collect());
        }
        let rotated: Vec<f64> = e
            .chunks(4)
            .flat_map(|row| {
                q.iter()
                    .map(|u| u.iter().zip(row).map(|(a, b)| a * b).sum::<f64>())
                    .collect::<Vec<_>>()
            })
            .collect();
        let p = small_protocol(10);
        let a = fewshot_embeddings(&e, 4, &l, &p).unwrap();
        let b = fewshot_embeddings(&rotated, 4, &l, &p).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.mean - y.mean).abs() <= 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn rates_invariant_to_positive_rescaling(seed in 0u64..1000, scales in prop::collection::vec(0.01f64..100.0, 60)) {
            let (e, l) = random_embeddings(seed);
            let scaled: Vec<f64> = e.chunks(4).zip(&scales).flat_map(|(r, s)| r.iter().map(move |v| v * s)).collect();
            let p = small_protocol(4);
            let a = fewshot_embeddings(&e, 4, &l, &p).unwrap();
            let b = fewshot_embeddings(&scaled, 4, &l, &p).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn bin_rates_account_for_overall_rate() {
        let (e, l) = random_embeddings(5);
        let bins: Vec<u32> = (0..l.len()).map(|i| [0u32, 1, 3][i % 3]).collect();
        let p = small_protocol(15);
        let overall = fewshot_embeddings(
            &e,
            4,
            &l,
            &FewShotProtocol {
                shots: vec![1],
                ..p.clone()
            },
        )
        .unwrap()[0];
        let by_bin = fewshot_by_bin_embeddings(&e, 4, &l, &bins, 5, &p).unwrap();
        assert_eq!(by_bin.omitted, vec![2, 4]);
        let probes: usize = by_bin.bins.iter().map(|b| b.probes).sum();
        let weighted: f64 = by_bin
            .bins
            .iter()
            .map(|b| b.rate * b.probes as f64)
            .sum::<f64>()
            / probes as f64;
        assert!((weighted - overall.mean).abs() < 1e-12);

        let single = fewshot_by_bin_embeddings(&e, 4, &l, &vec![0; l.len()], 1, &p).unwrap();
        assert_eq!(single.bins.len(), 1);
        assert!((single.bins[0].rate - overall.mean).abs() < 1e-12);
    }

    #[test]
    fn dimension_report_orders_and_thresholds() {
        let r = DimensionReport::from_stds(&[0.0, 1.0, 0.5], 0.1);
        assert_eq!(
            r.dimensions.iter().map(|d| d.dim).collect::<Vec<_>>(),
            vec![1, 2, 0]
        );
        assert_eq!(r.effective, vec![1, 2]);
        let r = DimensionReport::from_stds(&[0.0; 4], 0.1);
        assert!(r.effective.is_empty());
    }

    fn toy_model(mode: AggregationMode) -> Model {
        let cfg = ModelConfig {
            data_dim: 6,
            transformation_dim: 2,
            content_dim: 3,
            hidden: HiddenWidths::uniform(&[8]),
            aggregation: mode,
            group_size: 3,
        };
        Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(17)).unwrap()
    }

    fn zero_net(model: &mut Model, net: Network, keep_last_bias: bool) {
        let layers = model.config.layer_dims(net).len() - 1;
        for l in 0..layers {
            model
                .params
                .get_mut(&param_name(net, l, false))
                .unwrap()
                .data_mut()
                .fill(0.0);
            if !(keep_last_bias && l + 1 == layers) {
                model
                    .params
                    .get_mut(&param_name(net, l, true))
                    .unwrap()
                    .data_mut()
                    .fill(0.0);
            }
        }
    }

    fn images(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * 6).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn constant_content_encoder_has_no_effective_dimensions() {
        let mut m = toy_model(AggregationMode::Average);
        zero_net(&mut m, Network::ContentMean, false);
        let r = analyze_dimensions(&m, &images(10, 1), 0.1).unwrap();
        assert!(r.effective.is_empty());
        assert!(r.dimensions.iter().all(|d| d.std == 0.0));
        assert!(analyze_dimensions(&m, &images(1, 1), 0.1).is_err());
        assert!(matches!(
            perturbation_distance(&m, &images(10, 1), &[0; 10], 0),
            Err(Error::DegenerateDimension(0))
        ));
    }

    #[test]
    fn constant_scale_network_gives_matching_bins() {
        for mode in [AggregationMode::Average, AggregationMode::Product] {
            let mut m = toy_model(mode);
            zero_net(&mut m, Network::ContentScale, true);
            m.params
                .get_mut(&param_name(Network::ContentScale, 1, true))
                .unwrap()
                .data_mut()
                .copy_from_slice(&[0.4, -1.0, 2.0]);
            let bins: Vec<u32> = (0..12).map(|i| (i % 3) as u32).collect();
            let p = precision_by_transformation(&m, &images(12, 2), &bins, &[0, 1, 2]).unwrap();
            for dp in &p {
                let first = dp.bins[0];
                for b in &dp.bins {
                    assert_eq!((b.q1, b.median, b.q3), (first.q1, first.median, first.q3));
                    assert!(b.q1 > 0.0);
                }
                assert_eq!(dp.peak_ratio(), 1.0);
            }
        }
    }

    #[test]
    fn precisions_are_positive() {
        let m = toy_model(AggregationMode::Product);
        let bins: Vec<u32> = (0..20).map(|i| (i % 4) as u32).collect();
        for dp in precision_by_transformation(&m, &images(20, 3), &bins, &[0, 2]).unwrap() {
            assert!(dp
                .bins
                .iter()
                .all(|b| b.q1 > 0.0 && b.q1 <= b.median && b.median <= b.q3));
        }
    }

    #[test]
    fn content_ignoring_decoder_gives_zero_distance_and_flat_rows() {
        let mut m = toy_model(AggregationMode::Average);
        // decoder input columns for z follow the L transformation columns
        let w = m
            .params
            .get_mut(&param_name(Network::Decoder, 0, false))
            .unwrap();
        let cols = w.shape()[1];
        for r in 2..5 {
            w.data_mut()[r * cols..(r + 1) * cols].fill(0.0);
        }
        let x = images(8, 4);
        let d = perturbation_distance(&m, &x, &[0, 1, 0, 1, 0, 1, 0, 1], 1).unwrap();
        assert!(d.bins.iter().all(|b| b.mean == 0.0));

        let s = swap_matrix(&m, &x[..18], &x[18..42]).unwrap();
        assert_eq!((s.rows, s.cols, s.cells.len()), (3, 4, 72));
        for j in 0..4 {
            for i in 1..3 {
                assert_eq!(s.cell(i, j), s.cell(0, j));
            }
        }
        assert_ne!(s.cell(0, 0), s.cell(0, 1));
    }

    #[test]
    fn perturbation_distance_is_symmetric_and_non_negative() {
        let m = toy_model(AggregationMode::Average);
        let x = images(10, 5);
        let bins = [0u32, 1, 2, 0, 1, 2, 0, 1, 2, 0];
        let d = perturbation_distance(&m, &x, &bins, 2).unwrap();
        assert!(d.bins.iter().all(|b| b.mean >= 0.0));
        assert_eq!(d.bins.iter().map(|b| b.count).sum::<usize>(), 10);

        // direct recomputation with the roles of the two decodings swapped
        let h = m.content_means(&x).unwrap();
        let (mu, sigma) = column_stats(&h, 3, 2);
        let y = m.transformation_means(&x).unwrap();
        let mut lo = h.clone();
        let mut hi = h.clone();
        for r in 0..10 {
            lo[r * 3 + 2] = mu - 3.0 * sigma;
            hi[r * 3 + 2] = mu + 3.0 * sigma;
        }
        let a = m.decode_batch(&y, &hi).unwrap();
        let b = m.decode_batch(&y, &lo).unwrap();
        let first: f64 = (0..6).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt() / 6f64.sqrt();
        let bin0 = [0usize, 3, 6, 9];
        let mean0 = bin0
            .iter()
            .map(|&r| {
                (0..6)
                    .map(|i| (a[r * 6 + i] - b[r * 6 + i]).powi(2))
                    .sum::<f64>()
                    .sqrt()
                    / 6f64.sqrt()
            })
            .sum::<f64>()
            / 4.0;
        assert!(first >= 0.0);
        assert!((d.bins[0].mean - mean0).abs() < 1e-12);
    }

    #[test]
    fn swap_diagonal_is_reconstruction() {
        let m = toy_model(AggregationMode::Average);
        let x = images(3, 6);
        let s = swap_matrix(&m, &x, &x).unwrap();
        let rec = m.reconstruct(&x).unwrap();
        for i in 0..3 {
            assert_eq!(s.cell(i, i), &rec[i * 6..(i + 1) * 6]);
        }
    }

    #[test]
    fn interpolation_endpoints_midpoint_and_smoothness() {
        let m = toy_model(AggregationMode::Product);
        let x = images(2, 7);
        let (x1, x2) = (&x[..6], &x[6..]);
        let grid: Vec<f64> = (0..=20).map(|k| -0.5 + k as f64 * 0.1).collect();
        let g = interp_matrix(&m, x1, x2, &grid, &[0.0, 0.5, 1.0]).unwrap();
        let rec = m.reconstruct(&x).unwrap();
        let at = |a: f64| grid.iter().position(|v| (v - a).abs() < 1e-12).unwrap();
        for (c, v) in g.cell(at(0.0), 0).iter().zip(&rec[..6]) {
            assert!((c - v).abs() < 1e-12);
        }
        for (c, v) in g.cell(at(1.0), 2).iter().zip(&rec[6..]) {
            assert!((c - v).abs() < 1e-12);
        }

        let mid = interp_matrix(&m, x1, x2, &[0.5], &[0.5]).unwrap();
        let y: Vec<f64> = {
            let t = m.transformation_means(&x).unwrap();
            (0..2).map(|k| 0.5 * t[k] + 0.5 * t[2 + k]).collect()
        };
        let z: Vec<f64> = {
            let h = m.content_means(&x).unwrap();
            (0..3).map(|k| 0.5 * h[k] + 0.5 * h[3 + k]).collect()
        };
        assert_eq!(mid.cells, m.decode(&y, &z).unwrap());

        let mse = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
        };
        for col in 0..3 {
            let mut steps: Vec<f64> = (1..grid.len())
                .map(|r| mse(g.cell(r, col), g.cell(r - 1, col)))
                .collect();
            let max = steps.iter().cloned().fold(0.0, f64::max);
            steps.sort_by(f64::total_cmp);
            let median = steps[steps.len() / 2];
            assert!(max <= 10.0 * median, "col {col}: max {max} median {median}");
        }
    }

    #[test]
    fn grid_layout_and_exports() {
        let d = 4;
        let m = ImageMatrix {
            rows: 5,
            cols: 5,
            dim: d,
            cells: (0..100).map(|v| v as f64 / 100.0).collect(),
        };
        let samples: Vec<f64> = vec![0.5; 5 * d];
        let g = ImageGrid::with_samples(&m, Some(&samples), Some(&samples), 2, 2).unwrap();
        // 6 tiles of 2 px plus 5 separators each way
        assert_eq!((g.width, g.height), (17, 17));
        assert_eq!(g.pixels[2 * 17], SEPARATOR_VALUE);
        assert_eq!(g.pixels[0], 0.0);
        assert_eq!(g.pixels[3], 0.5);
        assert_eq!(g.pixels[3 * 17 + 3], m.cell(0, 0)[0]);

        let pgm = g.to_pgm();
        let (w, h, px) = read_pgm(&pgm).unwrap();
        assert_eq!((w, h, px.len()), (17, 17, 289));
        assert_eq!(px[3], 128);
        let raw = g.to_f32_le();
        assert_eq!(raw.len(), 289 * 4);
        assert_eq!(f32::from_le_bytes(raw[12..16].try_into().unwrap()), 0.5);

        let dir = tempfile::tempdir().unwrap();
        g.save(dir.path(), "swap").unwrap();
        assert_eq!(std::fs::read(dir.path().join("swap.pgm")).unwrap(), pgm);
        assert!(read_pgm(&pgm[..pgm.len() - 1]).is_err());
    }

    #[test]
    fn pearson_matches_known_values() {
        assert!(
            (pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]).unwrap() - 0.997_948_715_79).abs() < 1e-10
        );
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 2.0]), None);
    }

    #[test]
    fn threads_parse() {
        assert_eq!(parse_threads("4").unwrap(), 4);
        assert!(parse_threads("0").is_err());
        assert!(parse_threads("many").is_err());
    }

    #[test]
    fn report_serializes_deterministically() {
        let m = toy_model(AggregationMode::Average);
        let classes = 3;
        let items = (0..classes * 4)
            .map(|i| crate::synthdata::Item {
                data: images(1, 100 + i as u64),
                class_id: (i / 4) as u32,
                transformation_label: (i % 2) as u32,
            })
            .collect();
        let ds = GroupedDataset::new(items, 6, classes as u32, 0, 0, 2).unwrap();
        let p = FewShotProtocol {
            splits: 5,
            shots: vec![1, 2],
            ..FewShotProtocol::default()
        };
        let a = evaluate(&m, &ds, &p, 0.1, 8).unwrap().to_toml().unwrap();
        let b = evaluate(&m, &ds, &p, 0.1, 8).unwrap().to_toml().unwrap();
        assert_eq!(a, b);
        let back: EvalReport = toml::from_str(&a).unwrap();
        assert_eq!(back.fewshot.len(), 2);
    }
}
