//! Dataset indices and batch composition: balanced batches for BSS-GAN and
//! the resampling schemes used by the baselines.

use std::collections::HashSet;
use std::path::Path;

use bssgan_tensor::Tensor;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{self, Augment, ImageStore, Source};
use crate::error::{config_err, data_err, Result};
use crate::networks::{Network, NOISE_DIM};

/// Which store records make up a dataset, by class, plus an unlabeled pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub class_names: Vec<String>,
    pub image_size: usize,
    pub classes: Vec<Vec<usize>>,
    pub unlabeled: Vec<usize>,
}

impl DatasetIndex {
    /// Build an index, rejecting duplicate ids anywhere.
    pub fn new(class_names: Vec<String>, image_size: usize, classes: Vec<Vec<usize>>, unlabeled: Vec<usize>) -> Result<Self> {
        if class_names.len() != classes.len() {
            return config_err(format!("{} class names for {} classes", class_names.len(), classes.len()));
        }
        let mut seen = HashSet::new();
        for &id in classes.iter().flatten().chain(&unlabeled) {
            if !seen.insert(id) {
                return data_err(format!("sample id {id} appears more than once in the index"));
            }
        }
        Ok(DatasetIndex { class_names, image_size, classes, unlabeled })
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.classes.iter().map(Vec::len).collect()
    }

    pub fn labeled_len(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    /// Class counts divided by the smallest count.
    pub fn ratio(&self) -> Vec<f64> {
        let counts = self.class_counts();
        let min = counts.iter().copied().min().unwrap_or(0).max(1) as f64;
        counts.iter().map(|&c| c as f64 / min).collect()
    }

    /// Class with the fewest samples (lowest index on ties).
    pub fn minority_class(&self) -> usize {
        let counts = self.class_counts();
        (0..counts.len()).min_by_key(|&i| (counts[i], i)).unwrap_or(0)
    }

    /// Class with the most samples (lowest index on ties).
    pub fn majority_class(&self) -> usize {
        let counts = self.class_counts();
        (0..counts.len()).min_by_key(|&i| (std::cmp::Reverse(counts[i]), i)).unwrap_or(0)
    }

    /// `(id, label)` pairs for every labeled sample, class by class.
    pub fn labeled(&self) -> Vec<(usize, usize)> {
        self.classes.iter().enumerate().flat_map(|(k, ids)| ids.iter().map(move |&id| (id, k))).collect()
    }

    pub fn all_ids(&self) -> HashSet<usize> {
        self.classes.iter().flatten().chain(&self.unlabeled).copied().collect()
    }
}

/// Sub-batch sizes of one balanced batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub k: usize,
    pub n_l: usize,
    pub n_g: usize,
    pub n_ul: usize,
    pub c: f64,
}

impl BatchPlan {
    pub fn m(&self) -> usize {
        self.n_l + self.n_g + self.n_ul
    }

    /// Labeled samples per real class.
    pub fn per_class(&self) -> usize {
        self.n_l / self.k
    }
}

/// Plan a balanced batch: `n_l / K` labeled samples per class, a generated
/// sub-batch of the same size and `c * n_l / K` unlabeled samples.
pub fn plan_balanced_batch(k: usize, n_l: usize, c: f64) -> Result<BatchPlan> {
    if k < 2 {
        return config_err(format!("balanced batches need at least 2 classes, got {k}"));
    }
    if n_l == 0 || n_l % k != 0 {
        return config_err(format!("n_l = {n_l} must be a positive multiple of K = {k}"));
    }
    if !(c >= 0.0) || !c.is_finite() {
        return config_err(format!("unlabeled multiplier c must be >= 0, got {c}"));
    }
    let per = n_l / k;
    let n_ul = c * per as f64;
    if (n_ul - n_ul.round()).abs() > 1e-9 {
        return config_err(format!("c * n_l / K = {n_ul} is not an integer"));
    }
    Ok(BatchPlan { k, n_l, n_g: per, n_ul: n_ul.round() as usize, c })
}

/// One balanced batch: labeled ids grouped by class, unlabeled ids and the
/// generator noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub labeled: Vec<usize>,
    pub labels: Vec<usize>,
    pub unlabeled: Vec<usize>,
    /// `(n_g, 100)` standard normal.
    pub noise: Tensor<f32>,
}

impl Batch {
    /// Real rows in discriminator order: labeled then unlabeled.
    pub fn real_ids(&self) -> Vec<usize> {
        self.labeled.iter().chain(&self.unlabeled).copied().collect()
    }

    pub fn label_counts(&self, k: usize) -> Vec<usize> {
        let mut counts = vec![0; k];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

pub fn sample_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor<f32> {
    let data = (0..n * NOISE_DIM).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::new(&[n, NOISE_DIM], data).expect("noise shape")
}

/// Draw a balanced batch. Labeled and unlabeled samples are drawn uniformly
/// with replacement from their pools.
pub fn draw_balanced_batch<R: Rng + ?Sized>(index: &DatasetIndex, plan: &BatchPlan, rng: &mut R) -> Result<Batch> {
    if index.k() != plan.k {
        return config_err(format!("index has {} classes, plan expects {}", index.k(), plan.k));
    }
    let per = plan.per_class();
    let mut labeled = Vec::with_capacity(plan.n_l);
    let mut labels = Vec::with_capacity(plan.n_l);
    for (k, pool) in index.classes.iter().enumerate() {
        if pool.is_empty() {
            return data_err(format!("class '{}' has no training samples", index.class_names[k]));
        }
        for _ in 0..per {
            labeled.push(pool[rng.random_range(0..pool.len())]);
            labels.push(k);
        }
    }
    if plan.n_ul > 0 && index.unlabeled.is_empty() {
        return data_err("plan needs unlabeled samples but the unlabeled pool is empty");
    }
    let unlabeled = (0..plan.n_ul).map(|_| index.unlabeled[rng.random_range(0..index.unlabeled.len())]).collect();
    let noise = sample_noise(plan.n_g, rng);
    Ok(Batch { labeled, labels, unlabeled, noise })
}

/// Cut every class down to the minority count by sampling without
/// replacement.
pub fn undersample<R: Rng + ?Sized>(idx: &DatasetIndex, rng: &mut R) -> Result<DatasetIndex> {
    let target = idx.class_counts().into_iter().min().unwrap_or(0);
    let classes = idx
        .classes
        .iter()
        .map(|ids| {
            let mut kept: Vec<usize> = index::sample(rng, ids.len(), target).into_iter().map(|i| ids[i]).collect();
            kept.sort_unstable();
            kept
        })
        .collect();
    DatasetIndex::new(idx.class_names.clone(), idx.image_size, classes, idx.unlabeled.clone())
}

/// Ranges for random augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DaConfig {
    /// Allow horizontal flips.
    pub flip: bool,
    /// Maximum shift as a fraction of the side.
    pub translate_frac: f64,
    pub rotate_deg: f64,
}

impl Default for DaConfig {
    fn default() -> Self {
        DaConfig { flip: true, translate_frac: 0.1, rotate_deg: 15.0 }
    }
}

impl DaConfig {
    pub fn identity() -> Self {
        DaConfig { flip: false, translate_frac: 0.0, rotate_deg: 0.0 }
    }

    pub fn sample<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Augment {
        let t = (self.translate_frac * size as f64) as f32;
        let r = self.rotate_deg as f32;
        Augment {
            flip: self.flip && rng.random_bool(0.5),
            dx: if t > 0.0 { rng.random_range(-t..=t) } else { 0.0 },
            dy: if t > 0.0 { rng.random_range(-t..=t) } else { 0.0 },
            rotate_deg: if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 },
        }
    }
}

/// Pad every smaller class up to the largest with augmented copies of its
/// own samples. Bases are visited in shuffled rounds so copies spread
/// evenly. The majority class is left untouched.
pub fn oversample_da<R: Rng + ?Sized>(store: &mut ImageStore, idx: &DatasetIndex, da: &DaConfig, rng: &mut R) -> Result<DatasetIndex> {
    let target = idx.class_counts().into_iter().max().unwrap_or(0);
    let mut classes = Vec::with_capacity(idx.k());
    for (k, ids) in idx.classes.iter().enumerate() {
        if ids.is_empty() {
            return data_err(format!("class '{}' is empty", idx.class_names[k]));
        }
        let mut out = ids.clone();
        let mut order = ids.clone();
        let mut j = order.len();
        while out.len() < target {
            if j == order.len() {
                order.shuffle(rng);
                j = 0;
            }
            let transform = da.sample(store.size(), rng);
            out.push(store.add_augmented(order[j], transform)?);
            j += 1;
        }
        classes.push(out);
    }
    DatasetIndex::new(idx.class_names.clone(), idx.image_size, classes, idx.unlabeled.clone())
}

/// Number of extra samples class `class` needs to match the largest class.
pub fn balance_deficit(idx: &DatasetIndex, class: usize) -> usize {
    let max = idx.class_counts().into_iter().max().unwrap_or(0);
    max - idx.classes[class].len()
}

/// Generate `count` images of class `class` with `generator`, write them to
/// `out_dir/<class>/gan_<seq>.png`, add them to the store and the index.
pub fn oversample_gan<R: Rng + ?Sized>(
    store: &mut ImageStore,
    idx: &DatasetIndex,
    generator: &Network,
    class: usize,
    count: usize,
    out_dir: &Path,
    rng: &mut R,
) -> Result<DatasetIndex> {
    if class >= idx.k() {
        return config_err(format!("class {class} out of range for {} classes", idx.k()));
    }
    let size = store.size();
    let mut classes = idx.classes.clone();
    let dir = out_dir.join(&idx.class_names[class]);
    let mut seq = 0;
    while seq < count {
        let n = (count - seq).min(64);
        let images = generator.infer(&sample_noise(n, rng), 64)?;
        if images.shape()[1..] != [size, size, 3] {
            return config_err(format!("generator emits {:?}, dataset needs {size}x{size}x3", &images.shape()[1..]));
        }
        for px in images.data().chunks_exact(size * size * 3) {
            let path = dir.join(format!("gan_{seq:06}.png"));
            data::save_png(&path, px, size)?;
            let quantized = px.iter().map(|&v| data::byte_to_unit(data::unit_to_byte(v))).collect();
            classes[class].push(store.add(Some(class), Source::Synthetic { path }, quantized)?);
            seq += 1;
        }
    }
    DatasetIndex::new(idx.class_names.clone(), idx.image_size, classes, idx.unlabeled.clone())
}

/// Balanced batches per epoch: `ceil(N_l / n_l)` over all labeled samples.
pub fn epoch_schedule(idx: &DatasetIndex, plan: &BatchPlan) -> usize {
    idx.labeled_len().div_ceil(plan.n_l).max(1)
}

/// Generated samples consumed after `epochs` epochs.
pub fn generated_total(plan: &BatchPlan, epochs: usize, batches_per_epoch: usize) -> usize {
    plan.n_g * epochs * batches_per_epoch
}
