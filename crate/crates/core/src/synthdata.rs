//! Synthetic grouped images with known content and transformation factors,
//! and the `GRPD` dataset file format.
//!
//! Each class owns a smooth random template; every item of the class is the
//! template cyclically translated by an item-specific `(dx, dy)` plus pixel
//! noise. The content of an item is therefore exactly its class template and
//! the transformation exactly its shift.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"GRPD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactorSpec {
    pub height: usize,
    pub width: usize,
    /// Horizontal shifts are drawn from `-max_shift_x ..= max_shift_x`.
    pub max_shift_x: i32,
    /// Vertical shifts are drawn from `-max_shift_y ..= max_shift_y`.
    pub max_shift_y: i32,
    pub noise_std: f64,
    /// Contrast stretch around the template median after min-max
    /// normalization; 1 leaves the normalized template untouched.
    pub contrast: f64,
    /// Number of transformation bins over `dx`.
    pub bins: usize,
}

impl Default for FactorSpec {
    fn default() -> Self {
        FactorSpec {
            height: 16,
            width: 16,
            max_shift_x: 2,
            max_shift_y: 1,
            noise_std: 0.02,
            contrast: 2.0,
            bins: 8,
        }
    }
}

impl FactorSpec {
    pub fn dim(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.max_shift_x < 0 || 2 * self.max_shift_x as usize > self.width {
            return Err(Error::Config(format!(
                "max_shift_x {} outside [0, width/2]",
                self.max_shift_x
            )));
        }
        if self.max_shift_y < 0 || 4 * self.max_shift_y as usize > self.height {
            return Err(Error::Config(format!(
                "max_shift_y {} outside [0, height/4]",
                self.max_shift_y
            )));
        }
        if self.noise_std.is_nan()
            || self.noise_std < 0.0
            || self.contrast.is_nan()
            || self.contrast <= 0.0
        {
            return Err(Error::Config(
                "noise_std must be >= 0 and contrast > 0".into(),
            ));
        }
        if self.bins == 0 {
            return Err(Error::Config("bins must be positive".into()));
        }
        Ok(())
    }

    /// Transformation bin of a horizontal shift.
    pub fn bin_of(&self, dx: i32) -> u32 {
        let span = (2 * self.max_shift_x + 1) as usize;
        let pos = (dx + self.max_shift_x) as usize;
        ((pos * self.bins) / span).min(self.bins - 1) as u32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub data: Vec<f64>,
    pub class_id: u32,
    pub transformation_label: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    pub items: Vec<Item>,
    pub dim: usize,
    pub class_count: u32,
    /// 0 when the data are not images.
    pub height: u32,
    pub width: u32,
    pub bin_count: u32,
}

impl GroupedDataset {
    pub fn new(
        items: Vec<Item>,
        dim: usize,
        class_count: u32,
        height: u32,
        width: u32,
        bin_count: u32,
    ) -> Result<Self> {
        let ds = GroupedDataset {
            items,
            dim,
            class_count,
            height,
            width,
            bin_count,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Contract("dataset dimension must be positive".into()));
        }
        if (self.height > 0 || self.width > 0) && (self.height * self.width) as usize != self.dim {
            return Err(Error::Contract(format!(
                "image metadata {}x{} does not match dimension {}",
                self.height, self.width, self.dim
            )));
        }
        for (i, it) in self.items.iter().enumerate() {
            if it.data.len() != self.dim {
                return Err(Error::Contract(format!(
                    "item {i} has {} values",
                    it.data.len()
                )));
            }
            if it.class_id >= self.class_count {
                return Err(Error::Contract(format!(
                    "item {i} has class {} outside [0, {})",
                    it.class_id, self.class_count
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Item indices of every non-empty class, by class id.
    pub fn class_members(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, it) in self.items.iter().enumerate() {
            map.entry(it.class_id).or_default().push(i);
        }
        map
    }

    /// All item vectors, row-major.
    pub fn flat_data(&self) -> Vec<f64> {
        self.items
            .iter()
            .flat_map(|it| it.data.iter().copied())
            .collect()
    }

    pub fn flat_rows(&self, indices: &[usize]) -> Vec<f64> {
        indices
            .iter()
            .flat_map(|&i| self.items[i].data.iter().copied())
            .collect()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.items.iter().map(|it| it.class_id).collect()
    }

    pub fn bins(&self) -> Vec<u32> {
        self.items
            .iter()
            .map(|it| it.transformation_label)
            .collect()
    }
}

/// Generator output with the ground truth needed to re-render items.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: GroupedDataset,
    pub test: GroupedDataset,
    pub templates: BTreeMap<u32, Vec<f64>>,
    /// `(dx, dy)` of every train item.
    pub train_shifts: Vec<(i32, i32)>,
    pub test_shifts: Vec<(i32, i32)>,
    pub spec: FactorSpec,
}

impl SyntheticData {
    /// Noise-free image of `class` shifted by `(dx, dy)`.
    pub fn render(&self, class: u32, dx: i32, dy: i32) -> Option<Vec<f64>> {
        self.templates
            .get(&class)
            .map(|t| translate(t, self.spec.height, self.spec.width, dx, dy))
    }
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn box_blur_cyclic(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut s = 0.0;
            for dr in [h - 1, 0, 1] {
                for dc in [w - 1, 0, 1] {
                    s += img[((r + dr) % h) * w + (c + dc) % w];
                }
            }
            out[r * w + c] = s / 9.0;
        }
    }
    out
}

fn to_f32_precision(v: f64) -> f64 {
    v as f32 as f64
}

/// Smoothed, normalized random template for one class.
pub fn make_template(spec: &FactorSpec, seed: u64, class: u32) -> Vec<f64> {
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1, class as u64));
    let raw: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    let smooth = box_blur_cyclic(&box_blur_cyclic(&raw, h, w), h, w);
    let lo = smooth.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = smooth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let mut norm: Vec<f64> = smooth.iter().map(|v| (v - lo) / span).collect();
    if spec.contrast != 1.0 {
        let mut sorted = norm.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let median = sorted[sorted.len() / 2];
        for v in &mut norm {
            *v = (0.5 + spec.contrast * (*v - median)).clamp(0.0, 1.0);
        }
    }
    norm.into_iter().map(to_f32_precision).collect()
}

/// Cyclic translation: `out[r][c] = img[r - dy][c - dx]` with wraparound.
pub fn translate(img: &[f64], h: usize, w: usize, dx: i32, dy: i32) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let sr = (r as i64 - dy as i64).rem_euclid(h as i64) as usize;
            let sc = (c as i64 - dx as i64).rem_euclid(w as i64) as usize;
            out[r * w + c] = img[sr * w + sc];
        }
    }
    out
}

/// Generates disjoint train and test classes. Train classes get ids
/// `0..train_classes`, test classes the following `test_classes` ids; both
/// datasets declare the full class count.
pub fn generate_with_truth(
    spec: &FactorSpec,
    train_classes: usize,
    test_classes: usize,
    items_per_class: usize,
    min_items: usize,
    seed: u64,
) -> Result<SyntheticData> {
    spec.validate()?;
    if train_classes < 2 || test_classes < 2 {
        return Err(Error::Contract(
            "need at least two train and two test classes".into(),
        ));
    }
    if items_per_class < min_items {
        return Err(Error::Contract(format!(
            "{items_per_class} items per class is fewer than the group size {min_items}"
        )));
    }
    let total = (train_classes + test_classes) as u32;
    let mut templates = BTreeMap::new();
    let mut build = |classes: std::ops::Range<u32>| {
        let mut items = Vec::new();
        let mut shifts = Vec::new();
        for class in classes {
            let template = make_template(spec, seed, class);
            for p in 0..items_per_class {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2 + class as u64, p as u64));
                let dx = rng.random_range(-spec.max_shift_x..=spec.max_shift_x);
                let dy = rng.random_range(-spec.max_shift_y..=spec.max_shift_y);
                let mut data = translate(&template, spec.height, spec.width, dx, dy);
                if spec.noise_std > 0.0 {
                    for v in &mut data {
                        let e: f64 = rng.sample(StandardNormal);
                        *v = (*v + spec.noise_std * e).clamp(0.0, 1.0);
                    }
                }
                data.iter_mut().for_each(|v| *v = to_f32_precision(*v));
                items.push(Item {
                    data,
                    class_id: class,
                    transformation_label: spec.bin_of(dx),
                });
                shifts.push((dx, dy));
            }
            templates.insert(class, template);
        }
        (items, shifts)
    };
    let (train_items, train_shifts) = build(0..train_classes as u32);
    let (test_items, test_shifts) = build(train_classes as u32..total);
    let (h, w) = (spec.height as u32, spec.width as u32);
    let bins = spec.bins as u32;
    Ok(SyntheticData {
        train: GroupedDataset::new(train_items, spec.dim(), total, h, w, bins)?,
        test: GroupedDataset::new(test_items, spec.dim(), total, h, w, bins)?,
        templates,
        train_shifts,
        test_shifts,
        spec: spec.clone(),
    })
}

pub fn generate(
    spec: &FactorSpec,
    train_classes: usize,
    test_classes: usize,
    items_per_class: usize,
    min_items: usize,
    seed: u64,
) -> Result<(GroupedDataset, GroupedDataset)> {
    let d = generate_with_truth(
        spec,
        train_classes,
        test_classes,
        items_per_class,
        min_items,
        seed,
    )?;
    Ok((d.train, d.test))
}

pub fn encode_dataset(ds: &GroupedDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut out = Vec::with_capacity(32 + ds.items.len() * (8 + 4 * ds.dim));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    let header = [
        ds.dim as u32,
        ds.class_count,
        ds.items.len() as u32,
        ds.height,
        ds.width,
        ds.bin_count,
    ];
    for v in header {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for it in &ds.items {
        out.extend_from_slice(&it.class_id.to_le_bytes());
        out.extend_from_slice(&it.transformation_label.to_le_bytes());
        for &v in &it.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<GroupedDataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic, expected GRPD".into(),
        });
    }
    let version = cur.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let dim = cur.u32("dimension")? as usize;
    let class_count = cur.u32("class count")?;
    let count = cur.u32("item count")? as usize;
    let height = cur.u32("height")?;
    let width = cur.u32("width")?;
    let bin_count = cur.u32("bin count")?;
    let record = 8 + 4 * dim;
    let remaining = bytes.len() - cur.pos;
    if remaining != count * record {
        return Err(Error::Format {
            offset: (cur.pos + (remaining / record.max(1)) * record) as u64,
            reason: format!(
                "header declares {count} items of {record} bytes but {remaining} payload bytes follow"
            ),
        });
    }
    let mut items = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = cur.u32("class id")?;
        let transformation_label = cur.u32("transformation label")?;
        let raw = cur.take(4 * dim, "item values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        items.push(Item {
            data,
            class_id,
            transformation_label,
        });
    }
    GroupedDataset::new(items, dim, class_count, height, width, bin_count).map_err(|e| {
        Error::Format {
            offset: 8,
            reason: e.to_string(),
        }
    })
}

pub fn save_dataset(ds: &GroupedDataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<GroupedDataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_dataset(&bytes)
}
