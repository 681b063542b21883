//! Image storage, ingestion from disk, and the procedural concrete-surface
//! dataset.
//!
//! Pixels are kept as `S x S x 3` f32 in `[-1, 1]`; byte value `p` maps to
//! `p / 127.5 - 1`.

use std::borrow::Cow;
use std::fs;
use std::path::{Path, PathBuf};

use bssgan_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, Error, Result};
use crate::sampling::DatasetIndex;

/// Folder holding the unlabeled pool inside a split directory.
pub const UNLABELED_DIR: &str = "_unlabeled";
/// Optional file in a dataset root fixing the class order.
pub const DATASET_MANIFEST: &str = "dataset.json";

/// A geometric augmentation applied lazily when an augmented record is read.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    pub flip: bool,
    /// Translation in pixels (x right, y down).
    pub dx: f32,
    pub dy: f32,
    /// Counter-clockwise rotation about the tile center.
    pub rotate_deg: f32,
}

impl Augment {
    pub const IDENTITY: Augment = Augment { flip: false, dx: 0.0, dy: 0.0, rotate_deg: 0.0 };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Source {
    File { path: PathBuf },
    Procedural,
    Synthetic { path: PathBuf },
    Augmented { base: usize, transform: Augment },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: usize,
    /// True class when known. Records in an unlabeled pool may still carry
    /// their hidden label.
    pub label: Option<usize>,
    pub source: Source,
    /// Empty for augmented records.
    pixels: Vec<f32>,
}

/// Owns every image; a [`DatasetIndex`] refers to records by id.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStore {
    size: usize,
    records: Vec<ImageRecord>,
}

impl ImageStore {
    pub fn new(size: usize) -> Self {
        ImageStore { size, records: Vec::new() }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, id: usize) -> Option<&ImageRecord> {
        self.records.get(id)
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    fn pixel_len(&self) -> usize {
        self.size * self.size * 3
    }

    pub fn add(&mut self, label: Option<usize>, source: Source, pixels: Vec<f32>) -> Result<usize> {
        if pixels.len() != self.pixel_len() {
            return data_err(format!("image has {} values, expected {}", pixels.len(), self.pixel_len()));
        }
        if let Some(v) = pixels.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return data_err(format!("pixel value {v} outside [-1, 1]"));
        }
        Ok(self.push(label, source, pixels))
    }

    pub fn add_augmented(&mut self, base: usize, transform: Augment) -> Result<usize> {
        let Some(rec) = self.records.get(base) else {
            return data_err(format!("augmentation base {base} does not exist"));
        };
        let label = rec.label;
        Ok(self.push(label, Source::Augmented { base, transform }, Vec::new()))
    }

    fn push(&mut self, label: Option<usize>, source: Source, pixels: Vec<f32>) -> usize {
        let id = self.records.len();
        self.records.push(ImageRecord { id, label, source, pixels });
        id
    }

    pub fn pixels(&self, id: usize) -> Result<Cow<'_, [f32]>> {
        let Some(rec) = self.records.get(id) else {
            return data_err(format!("image id {id} does not exist"));
        };
        match rec.source {
            Source::Augmented { base, transform } => {
                let base = self.pixels(base)?;
                Ok(Cow::Owned(apply_augment(&base, self.size, &transform)))
            }
            _ => Ok(Cow::Borrowed(&rec.pixels)),
        }
    }

    /// Stack images into an `(n, S, S, 3)` tensor in the given order.
    pub fn batch(&self, ids: &[usize]) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(ids.len() * self.pixel_len());
        for &id in ids {
            data.extend_from_slice(&self.pixels(id)?);
        }
        Ok(Tensor::new(&[ids.len(), self.size, self.size, 3], data)?)
    }
}

pub fn byte_to_unit(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

/// Inverse of [`byte_to_unit`], clamping to `[0, 255]`.
pub fn unit_to_byte(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn quantize(v: f32) -> f32 {
    byte_to_unit(unit_to_byte(v))
}

/// Catmull-Rom cubic weight (`a = -0.5`).
pub fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Separable bicubic resize of an interleaved `h x w x c` image. Samples
/// outside the source read as zero. Pixel centers are aligned.
pub fn resize_bicubic(src: &[f32], h: usize, w: usize, c: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    fn taps(out: usize, inp: usize) -> Vec<[(isize, f64); 4]> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let x = (o as f64 + 0.5) * scale - 0.5;
                let x0 = x.floor();
                let mut t = [(0isize, 0.0); 4];
                for (j, tap) in t.iter_mut().enumerate() {
                    let p = x0 as isize - 1 + j as isize;
                    *tap = (p, cubic_weight(x - p as f64));
                }
                t
            })
            .collect()
    }
    let ty = taps(out_h, h);
    let tx = taps(out_w, w);
    // horizontal pass: h x out_w x c
    let mut mid = vec![0.0f64; h * out_w * c];
    for y in 0..h {
        for (ox, tap) in tx.iter().enumerate() {
            for &(p, wt) in tap {
                if p < 0 || p as usize >= w {
                    continue;
                }
                for ch in 0..c {
                    mid[(y * out_w + ox) * c + ch] += wt * src[(y * w + p as usize) * c + ch] as f64;
                }
            }
        }
    }
    let mut out = vec![0.0f32; out_h * out_w * c];
    for (oy, tap) in ty.iter().enumerate() {
        for ox in 0..out_w {
            for ch in 0..c {
                let mut acc = 0.0;
                for &(p, wt) in tap {
                    if p >= 0 && (p as usize) < h {
                        acc += wt * mid[(p as usize * out_w + ox) * c + ch];
                    }
                }
                out[(oy * out_w + ox) * c + ch] = acc as f32;
            }
        }
    }
    out
}

/// Decode an image file, resize it to `S x S` and map it to `[-1, 1]`.
pub fn load_image(path: &Path, size: usize) -> Result<Vec<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<f32> = img.into_raw().into_iter().map(f32::from).collect();
    let resized = if (h, w) == (size, size) { raw } else { resize_bicubic(&raw, h, w, 3, size, size) };
    Ok(resized.into_iter().map(|v| v.clamp(0.0, 255.0) / 127.5 - 1.0).collect())
}

/// Write an `S x S x 3` image in `[-1, 1]` as an 8-bit PNG.
pub fn save_png(path: &Path, pixels: &[f32], size: usize) -> Result<()> {
    write_rgb(path, pixels.iter().map(|&v| unit_to_byte(v)).collect(), size as u32, size as u32)
}

pub(crate) fn write_rgb(path: &Path, bytes: Vec<u8>, w: u32, h: u32) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let img = image::RgbImage::from_raw(w, h, bytes).ok_or_else(|| Error::Data("buffer size mismatch".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct DatasetManifest {
    classes: Vec<String>,
    #[serde(default)]
    image_size: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    counts: Vec<usize>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn ingest_files(store: &mut ImageStore, dir: &Path, label: Option<usize>) -> Result<Vec<usize>> {
    let mut ids = Vec::new();
    for path in sorted_entries(dir)? {
        if !path.is_file() || !is_image(&path) {
            continue;
        }
        match load_image(&path, store.size) {
            Ok(px) => ids.push(store.push(label, Source::File { path }, px)),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    Ok(ids)
}

/// Class names of a split directory: the order in `dataset.json` one level
/// up when present, sorted folder names otherwise.
pub fn class_names(split_dir: &Path) -> Result<Vec<String>> {
    if !split_dir.is_dir() {
        return data_err(format!("dataset directory {} does not exist", split_dir.display()));
    }
    if let Some(manifest) = split_dir.parent().map(|p| p.join(DATASET_MANIFEST)).filter(|p| p.is_file()) {
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        return Ok(m.classes);
    }
    let mut names = Vec::new();
    for p in sorted_entries(split_dir)? {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if p.is_dir() && name != UNLABELED_DIR {
            names.push(name);
        }
    }
    Ok(names)
}

/// Read one split directory (`<class>/*.png|jpg` plus optional
/// `_unlabeled/`) into `store`.
pub fn ingest_split(store: &mut ImageStore, split_dir: &Path, classes: &[String]) -> Result<DatasetIndex> {
    let mut per_class = Vec::with_capacity(classes.len());
    for (label, name) in classes.iter().enumerate() {
        let dir = split_dir.join(name);
        if !dir.is_dir() {
            return data_err(format!("class folder {} is missing", dir.display()));
        }
        let ids = ingest_files(store, &dir, Some(label))?;
        if ids.is_empty() {
            return data_err(format!("class '{name}' has no readable images in {}", dir.display()));
        }
        per_class.push(ids);
    }
    let unl_dir = split_dir.join(UNLABELED_DIR);
    let unlabeled = if unl_dir.is_dir() { ingest_files(store, &unl_dir, None)? } else { Vec::new() };
    DatasetIndex::new(classes.to_vec(), store.size, per_class, unlabeled)
}

/// Ingest a single directory of class folders at size `S`.
pub fn ingest_dir(root: &Path, size: usize) -> Result<(ImageStore, DatasetIndex)> {
    let classes = class_names(root)?;
    if classes.is_empty() {
        return data_err(format!("no class folders under {}", root.display()));
    }
    let mut store = ImageStore::new(size);
    let index = ingest_split(&mut store, root, &classes)?;
    Ok((store, index))
}

/// A dataset root with `train/` and `test/` splits sharing one store.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub store: ImageStore,
    pub train: DatasetIndex,
    pub test: DatasetIndex,
}

pub fn load_dataset(root: &Path, size: usize) -> Result<Dataset> {
    let train_dir = root.join("train");
    let test_dir = root.join("test");
    for d in [&train_dir, &test_dir] {
        if !d.is_dir() {
            return data_err(format!("expected split directory {}", d.display()));
        }
    }
    let classes = class_names(&train_dir)?;
    if classes.is_empty() {
        return data_err(format!("no class folders under {}", train_dir.display()));
    }
    let mut store = ImageStore::new(size);
    let train = ingest_split(&mut store, &train_dir, &classes)?;
    let test = ingest_split(&mut store, &test_dir, &classes)?;
    Ok(Dataset { store, train, test })
}

/// Write `index` under `dir/<class>/` and `dir/_unlabeled/` as PNG files
/// named by record id.
pub fn materialize(store: &ImageStore, index: &DatasetIndex, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut write = |sub: &str, ids: &[usize]| -> Result<()> {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        for &id in ids {
            let path = d.join(format!("{id:06}.png"));
            save_png(&path, &store.pixels(id)?, store.size)?;
            written.push(path);
        }
        Ok(())
    };
    for (name, ids) in index.class_names.iter().zip(&index.classes) {
        write(name, ids)?;
    }
    if !index.unlabeled.is_empty() {
        write(UNLABELED_DIR, &index.unlabeled)?;
    }
    Ok(written)
}

/// Write a `dataset.json` fixing class order and provenance.
pub fn write_dataset_manifest(root: &Path, classes: &[String], size: usize, seed: Option<u64>, counts: &[usize]) -> Result<()> {
    let m = DatasetManifest { classes: classes.to_vec(), image_size: Some(size), seed, counts: counts.to_vec() };
    let path = root.join(DATASET_MANIFEST);
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    fs::write(&path, serde_json::to_string_pretty(&m)? + "\n").map_err(|e| Error::io(&path, e))
}

/// Classes of the procedural stand-in dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceClass {
    Undamaged,
    Crack,
    Spalling,
}

impl SurfaceClass {
    pub fn short_name(self) -> &'static str {
        match self {
            SurfaceClass::Undamaged => "ud",
            SurfaceClass::Crack => "cr",
            SurfaceClass::Spalling => "sp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ud" | "undamaged" => Ok(SurfaceClass::Undamaged),
            "cr" | "crack" => Ok(SurfaceClass::Crack),
            "sp" | "spalling" => Ok(SurfaceClass::Spalling),
            other => config_err(format!("unknown surface class '{other}' (expected ud, cr or sp)")),
        }
    }

    /// Default class list for `n` counts: UD, CR, SP in that order.
    pub fn defaults(n: usize) -> Result<Vec<Self>> {
        let all = [SurfaceClass::Undamaged, SurfaceClass::Crack, SurfaceClass::Spalling];
        if n == 0 || n > all.len() {
            return config_err(format!("{n} class counts given; expected 1 to 3"));
        }
        Ok(all[..n].to_vec())
    }
}

/// Pixels darker than this only occur on damage.
pub const DAMAGE_LEVEL: f32 = -0.7;
const TEXTURE_MIN: f32 = -0.68;
const TEXTURE_MAX: f32 = 0.7;
// Damage is only slightly darker than the darkest texture, so the classes
// are separable by value but not trivially by a small network.
const CRACK_LEVELS: (f32, f32) = (-0.74, -0.71);
const SPALL_LEVELS: (f32, f32) = (-0.8, -0.71);

fn box_blur(src: &[f32], s: usize) -> Vec<f32> {
    let mut out = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            let (mut acc, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..(y + 2).min(s) {
                for xx in x.saturating_sub(1)..(x + 2).min(s) {
                    acc += src[yy * s + xx];
                    n += 1.0;
                }
            }
            out[y * s + x] = acc / n;
        }
    }
    out
}

/// Concrete-like texture: blurred fine noise on a bilinearly upsampled
/// coarse field, slightly tinted per channel.
fn texture<R: Rng>(s: usize, rng: &mut R) -> Vec<f32> {
    let mut fine: Vec<f32> = (0..s * s).map(|_| rng.random_range(-1.0..1.0)).collect();
    fine = box_blur(&box_blur(&fine, s), s);
    let g = s / 8 + 2;
    let coarse: Vec<f32> = (0..g * g).map(|_| rng.random_range(-1.0..1.0)).collect();
    let level: f32 = rng.random_range(-0.05..0.3);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.04..0.04));
    let mut out = vec![0.0; s * s * 3];
    for y in 0..s {
        for x in 0..s {
            let gy = y as f32 * (g - 1) as f32 / s as f32;
            let gx = x as f32 * (g - 1) as f32 / s as f32;
            let (y0, x0) = (gy as usize, gx as usize);
            let (fy, fx) = (gy - y0 as f32, gx - x0 as f32);
            let c = coarse[y0 * g + x0] * (1.0 - fy) * (1.0 - fx)
                + coarse[y0 * g + x0 + 1] * (1.0 - fy) * fx
                + coarse[(y0 + 1) * g + x0] * fy * (1.0 - fx)
                + coarse[(y0 + 1) * g + x0 + 1] * fy * fx;
            let v = level + 1.8 * fine[y * s + x] + 0.12 * c;
            for ch in 0..3 {
                out[(y * s + x) * 3 + ch] = (v + tint[ch]).clamp(TEXTURE_MIN, TEXTURE_MAX);
            }
        }
    }
    out
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Mask of a 1-3 px polyline running from one edge to the opposite edge.
fn crack_mask<R: Rng>(s: usize, rng: &mut R) -> Vec<bool> {
    let sf = s as f32;
    let width = rng.random_range(1..=3) as f32;
    let vertical = rng.random_bool(0.5);
    let n_mid = rng.random_range(2..=4);
    let mut pts = Vec::with_capacity(n_mid + 2);
    let mut across = rng.random_range(0.2 * sf..0.8 * sf);
    for i in 0..n_mid + 2 {
        let along = if i == 0 { -1.0 } else if i == n_mid + 1 { sf + 1.0 } else { sf * i as f32 / (n_mid + 1) as f32 };
        pts.push(if vertical { (across, along) } else { (along, across) });
        across = (across + rng.random_range(-0.2 * sf..0.2 * sf)).clamp(0.1 * sf, 0.9 * sf);
    }
    let mut mask = vec![false; s * s];
    for y in 0..s {
        for x in 0..s {
            let p = (x as f32 + 0.5, y as f32 + 0.5);
            mask[y * s + x] = pts.windows(2).any(|w| segment_distance(p, w[0], w[1]) <= width / 2.0 + 0.25);
        }
    }
    mask
}

/// Mask of a compact blob grown by a random walk inside a window of 0.6 S,
/// covering 4-10% of the tile.
fn spall_mask<R: Rng>(s: usize, rng: &mut R) -> Vec<bool> {
    let sf = s as f32;
    let target = (rng.random_range(0.04..0.10) * (s * s) as f32).ceil() as usize;
    let r = (s / 16).max(1) as isize;
    let half = (0.3 * sf) as isize;
    let (cx, cy) = (rng.random_range(0.35 * sf..0.65 * sf) as isize, rng.random_range(0.35 * sf..0.65 * sf) as isize);
    let (lo_x, hi_x) = ((cx - half).max(r), (cx + half).min(s as isize - 1 - r));
    let (lo_y, hi_y) = ((cy - half).max(r), (cy + half).min(s as isize - 1 - r));
    let (mut x, mut y) = (cx, cy);
    let mut mask = vec![false; s * s];
    let mut area = 0;
    while area < target {
        for yy in y - r..=y + r {
            for xx in x - r..=x + r {
                if (xx - x).pow(2) + (yy - y).pow(2) <= r * r + r {
                    let i = yy as usize * s + xx as usize;
                    if !mask[i] {
                        mask[i] = true;
                        area += 1;
                    }
                }
            }
        }
        x = (x + rng.random_range(-1i64..=1) as isize).clamp(lo_x, hi_x);
        y = (y + rng.random_range(-1i64..=1) as isize).clamp(lo_y, hi_y);
    }
    mask
}

fn paint<R: Rng>(img: &mut [f32], mask: &[bool], lo: f32, hi: f32, rng: &mut R) {
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let v = rng.random_range(lo..hi);
        for ch in 0..3 {
            img[i * 3 + ch] = v;
        }
    }
}

fn procedural_image<R: Rng>(class: SurfaceClass, s: usize, rng: &mut R) -> Vec<f32> {
    let mut img = texture(s, rng);
    match class {
        SurfaceClass::Undamaged => {}
        SurfaceClass::Crack => {
            let mask = crack_mask(s, rng);
            paint(&mut img, &mask, CRACK_LEVELS.0, CRACK_LEVELS.1, rng);
        }
        SurfaceClass::Spalling => {
            let mask = spall_mask(s, rng);
            paint(&mut img, &mask, SPALL_LEVELS.0, SPALL_LEVELS.1, rng);
        }
    }
    img.into_iter().map(quantize).collect()
}

/// Generate the procedural dataset: `counts[i]` images of `classes[i]`,
/// each `S x S x 3`, quantized to 8-bit levels so a PNG round trip is exact.
pub fn make_procedural(classes: &[SurfaceClass], counts: &[usize], size: usize, seed: u64) -> Result<(ImageStore, DatasetIndex)> {
    if classes.len() != counts.len() || classes.is_empty() {
        return config_err(format!("{} classes for {} counts", classes.len(), counts.len()));
    }
    if size < 8 {
        return config_err(format!("procedural images need size >= 8, got {size}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ImageStore::new(size);
    let mut per_class = Vec::with_capacity(classes.len());
    for (label, (&class, &n)) in classes.iter().zip(counts).enumerate() {
        let ids = (0..n).map(|_| store.push(Some(label), Source::Procedural, procedural_image(class, size, &mut rng))).collect();
        per_class.push(ids);
    }
    let names = classes.iter().map(|c| c.short_name().to_string()).collect();
    let index = DatasetIndex::new(names, size, per_class, Vec::new())?;
    Ok((store, index))
}

/// Hand-coded damage detector used to sanity-check the procedural classes:
/// no dark pixels means undamaged, dark pixels spanning the tile a crack,
/// otherwise spalling.
pub fn detect_surface(pixels: &[f32], size: usize) -> SurfaceClass {
    let (mut n, mut x0, mut x1, mut y0, mut y1) = (0, usize::MAX, 0, usize::MAX, 0);
    for y in 0..size {
        for x in 0..size {
            if pixels[(y * size + x) * 3] < DAMAGE_LEVEL {
                n += 1;
                (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
            }
        }
    }
    if (n as f32) < 0.01 * (size * size) as f32 {
        return SurfaceClass::Undamaged;
    }
    let extent = (x1 - x0 + 1).max(y1 - y0 + 1) as f32;
    if extent >= 0.85 * size as f32 {
        SurfaceClass::Crack
    } else {
        SurfaceClass::Spalling
    }
}

/// Train/test proportions for [`make_split`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_parts: usize,
    pub test_parts: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_parts: 2, test_parts: 1, seed: 0 }
    }
}

/// Stratified split: each class is shuffled and cut at
/// `round(n * train / (train + test))`. The unlabeled pool stays in train.
pub fn make_split(index: &DatasetIndex, spec: &SplitSpec) -> Result<(DatasetIndex, DatasetIndex)> {
    let total = spec.train_parts + spec.test_parts;
    if spec.train_parts == 0 || spec.test_parts == 0 {
        return config_err("split needs non-zero train and test parts");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (name, ids) in index.class_names.iter().zip(&index.classes) {
        let n_train = ((ids.len() * spec.train_parts) as f64 / total as f64).round() as usize;
        if n_train == 0 || n_train == ids.len() {
            return data_err(format!(
                "class '{name}' has {} samples, too few for a {}:{} split",
                ids.len(),
                spec.train_parts,
                spec.test_parts
            ));
        }
        let mut shuffled = ids.clone();
        shuffled.shuffle(&mut rng);
        let (a, b) = shuffled.split_at(n_train);
        let (mut a, mut b) = (a.to_vec(), b.to_vec());
        a.sort_unstable();
        b.sort_unstable();
        train.push(a);
        test.push(b);
    }
    Ok((
        DatasetIndex::new(index.class_names.clone(), index.image_size, train, index.unlabeled.clone())?,
        DatasetIndex::new(index.class_names.clone(), index.image_size, test, Vec::new())?,
    ))
}

/// Hold out `round(n * fraction)` samples of every class (at least one) as
/// a stratified validation index. The unlabeled pool stays in train.
pub fn stratified_holdout(index: &DatasetIndex, fraction: f64, seed: u64) -> Result<(DatasetIndex, DatasetIndex)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return config_err(format!("holdout fraction must be in (0, 1), got {fraction}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    let mut held = Vec::new();
    for (name, ids) in index.class_names.iter().zip(&index.classes) {
        let n = ((ids.len() as f64 * fraction).round() as usize).max(1);
        if n >= ids.len() {
            return data_err(format!("class '{name}' has {} samples, too few to hold out a validation split", ids.len()));
        }
        let mut shuffled = ids.clone();
        shuffled.shuffle(&mut rng);
        let (mut v, mut t) = (shuffled[..n].to_vec(), shuffled[n..].to_vec());
        v.sort_unstable();
        t.sort_unstable();
        held.push(v);
        keep.push(t);
    }
    Ok((
        DatasetIndex::new(index.class_names.clone(), index.image_size, keep, index.unlabeled.clone())?,
        DatasetIndex::new(index.class_names.clone(), index.image_size, held, Vec::new())?,
    ))
}

/// Keep a stratified `labeled_fraction` of each class labeled and move the
/// rest to the unlabeled pool.
pub fn make_hybrid(index: &DatasetIndex, labeled_fraction: f64, seed: u64) -> Result<DatasetIndex> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return config_err(format!("labeled fraction must be in (0, 1], got {labeled_fraction}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labeled = Vec::new();
    let mut unlabeled = index.unlabeled.clone();
    for (name, ids) in index.class_names.iter().zip(&index.classes) {
        let keep = (ids.len() as f64 * labeled_fraction).round() as usize;
        if keep == 0 {
            return data_err(format!("class '{name}' would keep no labeled samples"));
        }
        let mut shuffled = ids.clone();
        shuffled.shuffle(&mut rng);
        let mut kept = shuffled[..keep].to_vec();
        kept.sort_unstable();
        labeled.push(kept);
        unlabeled.extend_from_slice(&shuffled[keep..]);
    }
    unlabeled.sort_unstable();
    DatasetIndex::new(index.class_names.clone(), index.image_size, labeled, unlabeled)
}

/// Keep a random `fraction` of the unlabeled pool (0 empties it).
pub fn subsample_unlabeled(index: &DatasetIndex, fraction: f64, seed: u64) -> Result<DatasetIndex> {
    if !(0.0..=1.0).contains(&fraction) {
        return config_err(format!("unlabeled fraction must be in [0, 1], got {fraction}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = (index.unlabeled.len() as f64 * fraction).round() as usize;
    let mut pool = index.unlabeled.clone();
    pool.shuffle(&mut rng);
    pool.truncate(keep);
    pool.sort_unstable();
    DatasetIndex::new(index.class_names.clone(), index.image_size, index.classes.clone(), pool)
}

fn reflect(v: f32, n: usize) -> f32 {
    let max = n as f32 - 1.0;
    if max <= 0.0 {
        return 0.0;
    }
    let period = 2.0 * max;
    let mut m = v.rem_euclid(period);
    if m > max {
        m = period - m;
    }
    m
}

/// Apply `t` to an `S x S x 3` image: output pixel `p` samples the source at
/// the inverse-transformed location with bilinear interpolation and
/// reflect padding.
pub fn apply_augment(src: &[f32], s: usize, t: &Augment) -> Vec<f32> {
    if t.is_identity() {
        return src.to_vec();
    }
    let c = (s as f32 - 1.0) / 2.0;
    let (sin, cos) = t.rotate_deg.to_radians().sin_cos();
    let mut out = vec![0.0; s * s * 3];
    for y in 0..s {
        for x in 0..s {
            // undo translation, then rotation, then flip
            let (ux, uy) = (x as f32 - t.dx - c, y as f32 - t.dy - c);
            let (rx, ry) = (cos * ux - sin * uy, sin * ux + cos * uy);
            let mut sx = rx + c;
            let sy = ry + c;
            if t.flip {
                sx = 2.0 * c - sx;
            }
            let (sx, sy) = (reflect(sx, s), reflect(sy, s));
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(s - 1), (y0 + 1).min(s - 1));
            let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
            for ch in 0..3 {
                let at = |yy: usize, xx: usize| src[(yy * s + xx) * 3 + ch];
                out[(y * s + x) * 3 + ch] = at(y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + at(y0, x1) * fx * (1.0 - fy)
                    + at(y1, x0) * (1.0 - fx) * fy
                    + at(y1, x1) * fx * fy;
            }
        }
    }
    out
}
