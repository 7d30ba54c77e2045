//! CIFAR-100 binary ingestion, desk-scale subsetting, preprocessing, and a
//! synthetic stand-in dataset in the same byte format.
//!
//! A CIFAR-100 binary file is a sequence of 3074-byte records: one coarse
//! label byte, one fine label byte, then 3072 pixel bytes (1024 red, 1024
//! green, 1024 blue, each row-major 32×32).

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::SuperclassMap;
use crate::nn::Tensor;

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_BYTES: usize = 3 * IMAGE_SIDE * IMAGE_SIDE;
pub const RECORD_BYTES: usize = IMAGE_BYTES + 2;
pub const IMAGE_SHAPE: [usize; 3] = [3, IMAGE_SIDE, IMAGE_SIDE];
/// Environment variable naming the dataset root directory.
pub const DATA_ENV: &str = "BRAINTEACHER_DATA";

/// Raw records of one split, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawSplit {
    pub coarse: Vec<u8>,
    pub fine: Vec<u8>,
    /// `len × 3072` bytes.
    pub pixels: Vec<u8>,
}

impl RawSplit {
    pub fn len(&self) -> usize {
        self.fine.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fine.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    pub fn push(&mut self, coarse: u8, fine: u8, image: &[u8]) {
        assert_eq!(image.len(), IMAGE_BYTES);
        self.coarse.push(coarse);
        self.fine.push(fine);
        self.pixels.extend_from_slice(image);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * RECORD_BYTES);
        for i in 0..self.len() {
            out.push(self.coarse[i]);
            out.push(self.fine[i]);
            out.extend_from_slice(self.image(i));
        }
        out
    }
}

/// Parse a CIFAR-100 binary split, checking label ranges and that each coarse
/// label agrees with `map`.
pub fn parse_cifar100(bytes: &[u8], path: &Path, map: &SuperclassMap) -> Result<RawSplit> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        let offset = bytes.len() - bytes.len() % RECORD_BYTES;
        return Err(Error::parse(
            path,
            format!("truncated record at byte offset {offset} ({} trailing bytes)", bytes.len() - offset),
        ));
    }
    let mut split = RawSplit::default();
    for (r, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let offset = r * RECORD_BYTES;
        let (coarse, fine) = (rec[0], rec[1]);
        if coarse >= 20 {
            return Err(Error::parse(path, format!("coarse label {coarse} out of range at byte offset {offset}")));
        }
        if fine >= 100 {
            return Err(Error::parse(path, format!("fine label {fine} out of range at byte offset {}", offset + 1)));
        }
        if map.coarse(fine as usize) != coarse as usize {
            return Err(Error::parse(
                path,
                format!(
                    "fine class {fine} belongs to superclass {}, record says {coarse} (byte offset {offset})",
                    map.coarse(fine as usize)
                ),
            ));
        }
        split.push(coarse, fine, &rec[2..]);
    }
    Ok(split)
}

pub fn load_split(path: &Path, map: &SuperclassMap) -> Result<RawSplit> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar100(&bytes, path, map)
}

pub fn write_split(split: &RawSplit, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, split.to_bytes()).map_err(|e| Error::io(path, e))
}

/// `train.bin` and `test.bin` directly under `root` or under
/// `root/cifar-100-binary`.
pub fn locate_split_files(root: &Path) -> Result<(PathBuf, PathBuf)> {
    for dir in [root.to_path_buf(), root.join("cifar-100-binary")] {
        let (train, test) = (dir.join("train.bin"), dir.join("test.bin"));
        if train.is_file() && test.is_file() {
            return Ok((train, test));
        }
    }
    Err(Error::Config(format!(
        "no train.bin/test.bin under {} (set {DATA_ENV} or pass a dataset path)",
        root.display()
    )))
}

/// Dataset root from the environment, if set.
pub fn data_root_from_env() -> Option<PathBuf> {
    std::env::var_os(DATA_ENV).map(PathBuf::from)
}

/// Desk-scale subsetting. Fine classes come from `superclasses` unless
/// `fine_classes` lists them explicitly. Per-class counts take the first
/// records of each class in file order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubsetOptions {
    pub superclasses: Vec<usize>,
    pub fine_classes: Option<Vec<usize>>,
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    /// Training images held aside as teacher stimuli (class-balanced,
    /// removed from the training set).
    pub stimuli: usize,
}

impl Default for SubsetOptions {
    fn default() -> Self {
        Self {
            superclasses: vec![0, 1, 2, 3],
            fine_classes: None,
            train_per_class: None,
            test_per_class: None,
            stimuli: 100,
        }
    }
}

impl SubsetOptions {
    /// Retained fine classes, ascending.
    pub fn classes(&self, map: &SuperclassMap) -> Result<Vec<usize>> {
        let mut classes = match &self.fine_classes {
            Some(list) => list.clone(),
            None => {
                if let Some(&bad) = self.superclasses.iter().find(|&&c| c >= 20) {
                    return Err(Error::Config(format!("superclass {bad} out of range")));
                }
                self.superclasses.iter().flat_map(|&c| map.members(c)).collect()
            }
        };
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::Config("a subset needs at least two fine classes".into()));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= map.num_fine()) {
            return Err(Error::Config(format!("fine class {bad} out of range")));
        }
        Ok(classes)
    }
}

/// Images with labels re-indexed to the subset (`0..classes.len()`).
#[derive(Clone, Debug)]
pub struct LabeledImages {
    /// `N × 3 × 32 × 32`, values on a `[0, 1]` pixel scale (minus channel
    /// means where centred).
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Superclass of each image (CIFAR-100 coarse index).
    pub coarse: Vec<usize>,
    /// `"<split>-<record index>"`.
    pub ids: Vec<String>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select_rows(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            coarse: rows.iter().map(|&r| self.coarse[r]).collect(),
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub train: LabeledImages,
    pub test: LabeledImages,
    /// Teacher stimuli: held-aside training images, never centred.
    pub stimuli: LabeledImages,
    /// Original CIFAR-100 fine index of each local class.
    pub classes: Vec<usize>,
    /// Superclass map over local class indices.
    pub superclasses: SuperclassMap,
    /// Per-channel means subtracted from the training images.
    pub channel_means: [f64; 3],
    pub train_centered: bool,
}

impl DatasetBundle {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_name(&self, local: usize) -> &str {
        self.superclasses.fine_name(local)
    }
}

fn to_images(split: &RawSplit, rows: &[usize], classes: &[usize], prefix: &str) -> Result<LabeledImages> {
    let mut data = Vec::with_capacity(rows.len() * IMAGE_BYTES);
    for &r in rows {
        data.extend(split.image(r).iter().map(|&b| b as f32 / 255.0));
    }
    let mut shape = vec![rows.len()];
    shape.extend(IMAGE_SHAPE);
    if rows.is_empty() {
        return Err(Error::Config(format!("{prefix} subset is empty")));
    }
    Ok(LabeledImages {
        images: Tensor::new(shape, data)?,
        labels: rows
            .iter()
            .map(|&r| classes.binary_search(&(split.fine[r] as usize)).expect("row filtered by class"))
            .collect(),
        coarse: rows.iter().map(|&r| split.coarse[r] as usize).collect(),
        ids: rows.iter().map(|&r| format!("{prefix}-{r}")).collect(),
    })
}

/// Per-class row lists, in file order, truncated to `per_class`.
fn rows_by_class(split: &RawSplit, classes: &[usize], per_class: Option<usize>) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); classes.len()];
    for i in 0..split.len() {
        if let Ok(c) = classes.binary_search(&(split.fine[i] as usize)) {
            by_class[c].push(i);
        }
    }
    if let Some(n) = per_class {
        by_class.iter_mut().for_each(|rows| rows.truncate(n));
    }
    by_class
}

/// Subtract per-channel training means in place; returns the means.
fn center_channels(images: &mut Tensor<f32>) -> [f64; 3] {
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let n = images.batch();
    let mut means = [0.0f64; 3];
    for img in images.data().chunks(IMAGE_BYTES) {
        for (c, m) in means.iter_mut().enumerate() {
            *m += img[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    means.iter_mut().for_each(|m| *m /= (n * plane) as f64);
    for img in images.data_mut().chunks_mut(IMAGE_BYTES) {
        for (c, m) in means.iter().enumerate() {
            img[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v -= *m as f32);
        }
    }
    means
}

/// Assemble a bundle from raw splits. Training images are mean-centred per
/// channel using training statistics; test images and stimuli are not.
pub fn build_bundle(train: &RawSplit, test: &RawSplit, options: &SubsetOptions, map: &SuperclassMap) -> Result<DatasetBundle> {
    let classes = options.classes(map)?;
    if options.stimuli < 2 {
        return Err(Error::Config("at least two teacher stimuli are required".into()));
    }
    let k = classes.len();
    let mut train_rows = rows_by_class(train, &classes, None);
    let test_rows = rows_by_class(test, &classes, options.test_per_class);

    // Stimuli come off the end of each class list, round-robin over classes.
    let mut stimulus_rows = Vec::with_capacity(options.stimuli);
    let mut take = vec![0usize; k];
    for s in 0..options.stimuli {
        take[s % k] += 1;
    }
    for (c, rows) in train_rows.iter_mut().enumerate() {
        if rows.len() <= take[c] {
            return Err(Error::Config(format!(
                "class {} has {} training images, cannot hold aside {} stimuli",
                classes[c],
                rows.len(),
                take[c]
            )));
        }
        let tail = rows.split_off(rows.len() - take[c]);
        stimulus_rows.extend(tail);
    }
    if let Some(n) = options.train_per_class {
        train_rows.iter_mut().for_each(|rows| rows.truncate(n));
    }
    for (c, (tr, te)) in train_rows.iter().zip(&test_rows).enumerate() {
        if tr.is_empty() || te.is_empty() {
            return Err(Error::Config(format!("fine class {} has no training or test images", classes[c])));
        }
    }
    let flatten = |rows: Vec<Vec<usize>>| {
        let mut all: Vec<usize> = rows.into_iter().flatten().collect();
        all.sort_unstable();
        all
    };
    stimulus_rows.sort_unstable();

    let mut train_set = to_images(train, &flatten(train_rows), &classes, "train")?;
    let channel_means = center_channels(&mut train_set.images);
    Ok(DatasetBundle {
        train: train_set,
        test: to_images(test, &flatten(test_rows), &classes, "test")?,
        stimuli: to_images(train, &stimulus_rows, &classes, "train")?,
        superclasses: map.restrict(&classes)?,
        classes,
        channel_means,
        train_centered: true,
    })
}

/// Load `train.bin`/`test.bin` from `root` and build a subset bundle.
pub fn load_cifar100(root: &Path, options: &SubsetOptions) -> Result<DatasetBundle> {
    let map = SuperclassMap::cifar100();
    let (train_path, test_path) = locate_split_files(root)?;
    let train = load_split(&train_path, &map)?;
    let test = load_split(&test_path, &map)?;
    build_bundle(&train, &test, options, &map)
}

/// Parameters for the synthetic CIFAR-100 stand-in.
///
/// Each fine class is a textured pattern: an oriented grating plus a coloured
/// blob. Fine classes of one superclass share a palette and a base
/// orientation, so superclass siblings are visually closer than strangers.
/// Each image jitters the class parameters and adds pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCifar {
    /// Seed for the class-level parameters.
    pub universe_seed: u64,
    /// Seed for per-image draws.
    pub sample_seed: u64,
    pub fine_classes: Vec<usize>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of additive pixel noise, on a `[0, 1]` scale.
    pub noise: f64,
    /// Scale of per-image jitter applied to the class parameters.
    pub jitter: f64,
}

impl Default for SyntheticCifar {
    fn default() -> Self {
        Self {
            universe_seed: 2019,
            sample_seed: 1,
            fine_classes: (0..4).flat_map(|c| SuperclassMap::cifar100().members(c)).collect(),
            train_per_class: 250,
            test_per_class: 50,
            noise: 0.12,
            jitter: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ClassLook {
    orientation: f64,
    frequency: f64,
    contrast: f64,
    tint: [f64; 3],
    blob_color: [f64; 3],
    blob_center: (f64, f64),
    blob_radius: f64,
    background: [f64; 3],
}

fn perturb(rng: &mut ChaCha8Rng, v: f64, spread: f64) -> f64 {
    (v + rng.random_range(-spread..spread)).clamp(0.0, 1.0)
}

fn class_looks(universe_seed: u64, map: &SuperclassMap) -> Vec<ClassLook> {
    let mut rng = ChaCha8Rng::seed_from_u64(universe_seed);
    let supers: Vec<([f64; 3], f64, [f64; 3])> = (0..20)
        .map(|_| {
            let tint = [rng.random_range(0.2..1.0), rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)];
            let bg = [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)];
            (tint, rng.random_range(0.0..std::f64::consts::PI), bg)
        })
        .collect();
    (0..map.num_fine())
        .map(|f| {
            let (tint, base, bg) = supers[map.coarse(f)];
            ClassLook {
                orientation: base + rng.random_range(-0.5..0.5),
                frequency: rng.random_range(0.06..0.22),
                contrast: rng.random_range(0.15..0.3),
                tint: tint.map(|v| perturb(&mut rng, v, 0.2)),
                blob_color: [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
                blob_center: (rng.random_range(8.0..24.0), rng.random_range(8.0..24.0)),
                blob_radius: rng.random_range(3.0..7.0),
                background: bg.map(|v| perturb(&mut rng, v, 0.1)),
            }
        })
        .collect()
}

fn render(look: &ClassLook, config: &SyntheticCifar, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Vec<u8> {
    let j = config.jitter;
    let theta = look.orientation + j * rng.random_range(-0.25..0.25);
    let freq = look.frequency * (1.0 + j * rng.random_range(-0.15..0.15));
    let phase = rng.random_range(0.0..TAU);
    let (bx, by) = (
        look.blob_center.0 + j * rng.random_range(-4.0..4.0),
        look.blob_center.1 + j * rng.random_range(-4.0..4.0),
    );
    let radius = look.blob_radius * (1.0 + j * rng.random_range(-0.2..0.2));
    let brightness = j * rng.random_range(-0.1..0.1);
    let (c, s) = (theta.cos(), theta.sin());
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let mut out = vec![0u8; IMAGE_BYTES];
    for p in 0..plane {
        let (x, y) = ((p % IMAGE_SIDE) as f64, (p / IMAGE_SIDE) as f64);
        let grating = (TAU * freq * (x * c + y * s) + phase).cos();
        let d2 = (x - bx).powi(2) + (y - by).powi(2);
        let blob = (-d2 / (2.0 * radius * radius)).exp();
        for ch in 0..3 {
            let base = look.background[ch] + brightness + look.contrast * look.tint[ch] * grating;
            let v = base * (1.0 - blob) + look.blob_color[ch] * blob + config.noise * noise.sample(rng);
            out[ch * plane + p] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out
}

impl SyntheticCifar {
    pub fn validate(&self) -> Result<()> {
        if self.fine_classes.is_empty() || self.fine_classes.iter().any(|&c| c >= 100) {
            return Err(Error::Config("synthetic data needs fine classes in 0..100".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("synthetic data needs positive per-class counts".into()));
        }
        if !(self.noise >= 0.0 && self.jitter >= 0.0) {
            return Err(Error::Config("synthetic noise and jitter must be non-negative".into()));
        }
        Ok(())
    }

    /// Generate `(train, test)` splits. Records of all classes are interleaved
    /// in a seeded random order.
    pub fn generate(&self) -> Result<(RawSplit, RawSplit)> {
        self.validate()?;
        let map = SuperclassMap::cifar100();
        let looks = class_looks(self.universe_seed, &map);
        let noise = Normal::new(0.0, 1.0).expect("unit normal");
        let mut rng = ChaCha8Rng::seed_from_u64(self.sample_seed);
        let make = |per_class: usize, rng: &mut ChaCha8Rng| {
            let mut order: Vec<usize> = self
                .fine_classes
                .iter()
                .flat_map(|&c| std::iter::repeat_n(c, per_class))
                .collect();
            order.shuffle(rng);
            let mut split = RawSplit::default();
            for fine in order {
                let img = render(&looks[fine], self, rng, &noise);
                split.push(map.coarse(fine) as u8, fine as u8, &img);
            }
            split
        };
        let train = make(self.train_per_class, &mut rng);
        let test = make(self.test_per_class, &mut rng);
        Ok((train, test))
    }

    /// Generate and write `train.bin`/`test.bin` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let (train, test) = self.generate()?;
        write_split(&train, &dir.join("train.bin"))?;
        write_split(&test, &dir.join("test.bin"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SyntheticCifar {
        SyntheticCifar {
            fine_classes: vec![4, 30, 55],
            train_per_class: 6,
            test_per_class: 2,
            ..SyntheticCifar::default()
        }
    }

    #[test]
    fn bytes_round_trip() {
        let map = SuperclassMap::cifar100();
        let (train, _) = tiny().generate().unwrap();
        assert_eq!(train.len(), 18);
        let parsed = parse_cifar100(&train.to_bytes(), Path::new("t"), &map).unwrap();
        assert_eq!(parsed, train);
    }

    #[test]
    fn parse_errors_carry_offsets() {
        let map = SuperclassMap::cifar100();
        let (train, _) = tiny().generate().unwrap();
        let mut bytes = train.to_bytes();
        let err = parse_cifar100(&bytes[..RECORD_BYTES + 10], Path::new("t"), &map).unwrap_err();
        assert!(err.to_string().contains(&format!("offset {RECORD_BYTES}")), "{err}");
        bytes[RECORD_BYTES + 1] = 200;
        let err = parse_cifar100(&bytes, Path::new("t"), &map).unwrap_err();
        assert!(err.to_string().contains(&format!("offset {}", RECORD_BYTES + 1)), "{err}");
    }

    #[test]
    fn bundle_holds_stimuli_aside_and_centres_train_only() {
        let map = SuperclassMap::cifar100();
        let (train, test) = tiny().generate().unwrap();
        let opts = SubsetOptions {
            fine_classes: Some(vec![55, 4, 30]),
            stimuli: 4,
            ..SubsetOptions::default()
        };
        let b = build_bundle(&train, &test, &opts, &map).unwrap();
        assert_eq!(b.classes, vec![4, 30, 55]);
        assert_eq!((b.train.len(), b.stimuli.len(), b.test.len()), (14, 4, 6));
        assert!(b.stimuli.ids.iter().all(|id| !b.train.ids.contains(id)));
        assert!(b.test.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for (l, c) in b.train.labels.iter().zip(&b.train.coarse) {
            assert_eq!(map.coarse(b.classes[*l]), *c);
        }
    }
}
