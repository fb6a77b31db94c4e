//! The two-digit composite dataset: an even MNIST digit pasted into the
//! left half of a 64×64 canvas and an odd digit into the right half, with
//! the 25 (even, odd) class pairs partitioned across train/val/test so
//! that no pair seen in evaluation was ever seen in training.
//!
//! Samples are kept as packed bytes in memory and on disk; pixel scaling
//! to [0,1] happens when batches are assembled.

pub mod idx;
pub mod synthetic;

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

pub const DIGIT_SIZE: usize = 28;
pub const CANVAS_SIZE: usize = 64;
pub const CLASSES_PER_TASK: usize = 5;
pub const EVEN_DIGITS: [u8; 5] = [0, 2, 4, 6, 8];
pub const ODD_DIGITS: [u8; 5] = [1, 3, 5, 7, 9];

/// Largest row offset keeping a 28-pixel digit inside the canvas.
pub const MAX_ROW_OFFSET: usize = CANVAS_SIZE - DIGIT_SIZE;
/// Largest column offset keeping the left digit inside columns [0,32).
pub const MAX_LEFT_COL_OFFSET: usize = CANVAS_SIZE / 2 - DIGIT_SIZE;

/// One source digit, pixels in [0,1].
#[derive(Debug, Clone)]
pub struct MnistDigit {
    pub image: Tensor,
    pub label: u8,
}

impl MnistDigit {
    pub fn new(image: Tensor, label: u8) -> Result<Self> {
        if image.shape() != [DIGIT_SIZE, DIGIT_SIZE] {
            return Err(Error::shape(
                "digit",
                format!("expected {DIGIT_SIZE}x{DIGIT_SIZE}, got {:?}", image.shape()),
            ));
        }
        if label > 9 {
            return Err(Error::OutOfRange(format!("digit label {label} not in 0..=9")));
        }
        if image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::OutOfRange("digit pixels must lie in [0,1]".into()));
        }
        Ok(MnistDigit { image, label })
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.image.data().iter().map(|&v| (v * 255.0).round() as u8).collect()
    }
}

#[derive(Debug, Clone)]
struct PackedDigit {
    pixels: Vec<u8>,
    label: u8,
}

/// Pool of source digits indexed by class, guaranteed to cover all ten.
#[derive(Debug, Clone)]
pub struct DigitSource {
    digits: Vec<PackedDigit>,
    by_class: Vec<Vec<usize>>,
}

impl DigitSource {
    pub fn new(digits: Vec<MnistDigit>) -> Result<Self> {
        let packed: Vec<PackedDigit> = digits
            .iter()
            .map(|d| PackedDigit {
                pixels: d.to_bytes(),
                label: d.label,
            })
            .collect();
        let mut by_class = vec![Vec::new(); 10];
        for (i, d) in packed.iter().enumerate() {
            by_class[d.label as usize].push(i);
        }
        for (c, list) in by_class.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::InsufficientData(format!(
                    "digit source has no examples of class {c}"
                )));
            }
        }
        Ok(DigitSource {
            digits: packed,
            by_class,
        })
    }

    /// Load from an IDX image/label file pair (gzip or raw).
    pub fn from_idx(images_path: &Path, labels_path: &Path) -> Result<Self> {
        let images = match idx::parse_idx(images_path)? {
            idx::IdxData::Images(t) => t,
            idx::IdxData::Labels(_) => {
                return Err(Error::format(
                    images_path,
                    "expected an image file, found labels".to_string(),
                ));
            }
        };
        let labels = match idx::parse_idx(labels_path)? {
            idx::IdxData::Labels(l) => l,
            idx::IdxData::Images(_) => {
                return Err(Error::format(
                    labels_path,
                    "expected a label file, found images".to_string(),
                ));
            }
        };
        let n = images.shape()[0];
        if labels.len() != n {
            return Err(Error::format(
                images_path,
                format!("{n} images but {} labels", labels.len()),
            ));
        }
        let (h, w) = (images.shape()[1], images.shape()[2]);
        if h != DIGIT_SIZE || w != DIGIT_SIZE {
            return Err(Error::shape(
                "digit source",
                format!("expected {DIGIT_SIZE}x{DIGIT_SIZE} images, got {h}x{w}"),
            ));
        }
        let mut digits = Vec::with_capacity(n);
        for i in 0..n {
            let start = i * h * w;
            let img = Tensor::new(
                vec![h, w],
                images.data()[start..start + h * w].to_vec(),
            )?;
            digits.push(MnistDigit::new(img, labels[i])?);
        }
        Self::new(digits)
    }

    pub fn len(&self) -> usize {
        self.digits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digits.is_empty()
    }

    pub fn digit(&self, index: usize) -> MnistDigit {
        let p = &self.digits[index];
        let data: Vec<f64> = p.pixels.iter().map(|&b| b as f64 / 255.0).collect();
        MnistDigit {
            image: Tensor::new(vec![DIGIT_SIZE, DIGIT_SIZE], data).expect("digit shape"),
            label: p.label,
        }
    }

    pub fn class_indices(&self, class: u8) -> &[usize] {
        &self.by_class[class as usize]
    }
}

// ── splits ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Assignment of (even, odd) class pairs to splits, plus the per-pair
/// sample count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub train_pairs: Vec<(u8, u8)>,
    pub val_pairs: Vec<(u8, u8)>,
    pub test_pairs: Vec<(u8, u8)>,
    pub samples_per_pair: usize,
}

impl SplitPlan {
    pub fn pairs_for(&self, split: Split) -> &[(u8, u8)] {
        match split {
            Split::Train => &self.train_pairs,
            Split::Val => &self.val_pairs,
            Split::Test => &self.test_pairs,
        }
    }

    pub fn split_size(&self, split: Split) -> usize {
        self.pairs_for(split).len() * self.samples_per_pair
    }

    /// True when the plan covers all 25 pairs with the full 16/4/5 × 1000
    /// layout.
    pub fn is_full(&self) -> bool {
        self.train_pairs.len() == 16
            && self.val_pairs.len() == 4
            && self.test_pairs.len() == 5
            && self.samples_per_pair == 1000
    }
}

fn all_pairs() -> Vec<(u8, u8)> {
    let mut pairs = Vec::with_capacity(25);
    for &e in &EVEN_DIGITS {
        for &o in &ODD_DIGITS {
            pairs.push((e, o));
        }
    }
    pairs
}

/// Random partition of the 25 pairs into `counts` = (train, val, test)
/// pair sets, `samples_per_pair` composed samples each.
pub fn plan_splits_with(
    seed: u64,
    counts: (usize, usize, usize),
    samples_per_pair: usize,
) -> Result<SplitPlan> {
    let (tr, va, te) = counts;
    if tr == 0 || va == 0 || te == 0 {
        return Err(Error::InvalidArgument(
            "every split needs at least one pair".into(),
        ));
    }
    if tr + va + te > 25 {
        return Err(Error::InvalidArgument(format!(
            "{tr}+{va}+{te} pairs requested but only 25 exist"
        )));
    }
    if samples_per_pair == 0 {
        return Err(Error::InvalidArgument("samples_per_pair must be positive".into()));
    }
    let mut pairs = all_pairs();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b'p' as u64]));
    pairs.shuffle(&mut rng);
    Ok(SplitPlan {
        train_pairs: pairs[..tr].to_vec(),
        val_pairs: pairs[tr..tr + va].to_vec(),
        test_pairs: pairs[tr + va..tr + va + te].to_vec(),
        samples_per_pair,
    })
}

/// The full 16/4/5 pair partition with 1000 samples per pair
/// (16000/4000/5000 samples).
pub fn plan_splits(seed: u64) -> SplitPlan {
    plan_splits_with(seed, (16, 4, 5), 1000).expect("full layout is valid")
}

// ── samples ─────────────────────────────────────────────────────────────

/// One composed sample, pixels packed as bytes (0..255).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSample {
    pub pixels: Vec<u8>,
    pub label_left: u8,
    pub label_right: u8,
}

impl PackedSample {
    /// The digit-class pair this sample renders, as digit values.
    pub fn pair_id(&self) -> (u8, u8) {
        (EVEN_DIGITS[self.label_left as usize], ODD_DIGITS[self.label_right as usize])
    }
}

/// Tensor view of one sample: image `(1,64,64)` in [0,1].
#[derive(Debug, Clone)]
pub struct MultiDigitSample {
    pub image: Tensor,
    pub label_left: u8,
    pub label_right: u8,
    pub pair_id: (u8, u8),
}

impl PackedSample {
    pub fn to_sample(&self) -> MultiDigitSample {
        let data: Vec<f64> = self.pixels.iter().map(|&b| b as f64 / 255.0).collect();
        MultiDigitSample {
            image: Tensor::new(vec![1, CANVAS_SIZE, CANVAS_SIZE], data).expect("canvas shape"),
            label_left: self.label_left,
            label_right: self.label_right,
            pair_id: self.pair_id(),
        }
    }
}

fn class_index_even(digit: u8) -> u8 {
    digit / 2
}

fn class_index_odd(digit: u8) -> u8 {
    (digit - 1) / 2
}

fn paste(canvas: &mut [u8], digit: &[u8], row: usize, col: usize) {
    for r in 0..DIGIT_SIZE {
        let dst = (row + r) * CANVAS_SIZE + col;
        let src = r * DIGIT_SIZE;
        canvas[dst..dst + DIGIT_SIZE].copy_from_slice(&digit[src..src + DIGIT_SIZE]);
    }
}

fn compose_bytes(
    left: &[u8],
    left_label: u8,
    right: &[u8],
    right_label: u8,
    offsets: (usize, usize, usize, usize),
) -> Result<PackedSample> {
    let (row_l, col_l, row_r, col_r) = offsets;
    if left_label % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "left digit must be even, got {left_label}"
        )));
    }
    if right_label % 2 != 1 {
        return Err(Error::InvalidArgument(format!(
            "right digit must be odd, got {right_label}"
        )));
    }
    if row_l > MAX_ROW_OFFSET || row_r > MAX_ROW_OFFSET {
        return Err(Error::OutOfRange(format!(
            "row offsets ({row_l},{row_r}) exceed {MAX_ROW_OFFSET}"
        )));
    }
    if col_l > MAX_LEFT_COL_OFFSET {
        return Err(Error::OutOfRange(format!(
            "left column offset {col_l} exceeds {MAX_LEFT_COL_OFFSET}"
        )));
    }
    if !(CANVAS_SIZE / 2..=CANVAS_SIZE - DIGIT_SIZE).contains(&col_r) {
        return Err(Error::OutOfRange(format!(
            "right column offset {col_r} outside [{},{}]",
            CANVAS_SIZE / 2,
            CANVAS_SIZE - DIGIT_SIZE
        )));
    }
    let mut canvas = vec![0u8; CANVAS_SIZE * CANVAS_SIZE];
    paste(&mut canvas, left, row_l, col_l);
    paste(&mut canvas, right, row_r, col_r);
    Ok(PackedSample {
        pixels: canvas,
        label_left: class_index_even(left_label),
        label_right: class_index_odd(right_label),
    })
}

/// Compose with explicit paste offsets (rows in [0,36]; left column in
/// [0,4], right column in [32,36]).
pub fn compose_at(
    left: &MnistDigit,
    right: &MnistDigit,
    offsets: (usize, usize, usize, usize),
) -> Result<PackedSample> {
    compose_bytes(&left.to_bytes(), left.label, &right.to_bytes(), right.label, offsets)
}

/// Compose with uniform offsets. Draw order: left row, left column, right
/// row, right column.
pub fn compose_sample(
    left: &MnistDigit,
    right: &MnistDigit,
    rng: &mut impl Rng,
) -> Result<PackedSample> {
    let offsets = draw_offsets(rng);
    compose_at(left, right, offsets)
}

fn draw_offsets(rng: &mut impl Rng) -> (usize, usize, usize, usize) {
    let row_l = rng.gen_range(0..=MAX_ROW_OFFSET);
    let col_l = rng.gen_range(0..=MAX_LEFT_COL_OFFSET);
    let row_r = rng.gen_range(0..=MAX_ROW_OFFSET);
    let col_r = rng.gen_range(CANVAS_SIZE / 2..=CANVAS_SIZE - DIGIT_SIZE);
    (row_l, col_l, row_r, col_r)
}

// ── dataset construction ────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<PackedSample>,
    pub val: Vec<PackedSample>,
    pub test: Vec<PackedSample>,
    pub plan: SplitPlan,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[PackedSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Build all three splits from a digit source. Digit instances are drawn
/// uniformly with replacement per pair; each (split, pair) uses its own
/// derived RNG stream, so construction order never changes the output.
pub fn build_dataset_from_source(
    source: &DigitSource,
    plan: &SplitPlan,
    seed: u64,
) -> Result<Dataset> {
    let build_split = |split_idx: u64, pairs: &[(u8, u8)]| -> Result<Vec<PackedSample>> {
        let mut out = Vec::with_capacity(pairs.len() * plan.samples_per_pair);
        for &(even, odd) in pairs {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                &[b's' as u64, split_idx, even as u64, odd as u64],
            ));
            let evens = source.class_indices(even);
            let odds = source.class_indices(odd);
            for _ in 0..plan.samples_per_pair {
                let li = evens[rng.gen_range(0..evens.len())];
                let ri = odds[rng.gen_range(0..odds.len())];
                let offsets = draw_offsets(&mut rng);
                let l = &source.digits[li];
                let r = &source.digits[ri];
                out.push(compose_bytes(&l.pixels, l.label, &r.pixels, r.label, offsets)?);
            }
        }
        Ok(out)
    };
    Ok(Dataset {
        train: build_split(0, &plan.train_pairs)?,
        val: build_split(1, &plan.val_pairs)?,
        test: build_split(2, &plan.test_pairs)?,
        plan: plan.clone(),
    })
}

/// Build from MNIST IDX files in `mnist_dir` (standard training-set file
/// names, gzip or raw).
pub fn build_dataset(mnist_dir: &Path, plan: &SplitPlan, seed: u64) -> Result<Dataset> {
    let find = |stem: &str| -> Result<std::path::PathBuf> {
        let candidates = [format!("{stem}"), format!("{stem}.gz")];
        for c in &candidates {
            let p = mnist_dir.join(c);
            if p.exists() {
                return Ok(p);
            }
        }
        Err(Error::InvalidArgument(format!(
            "none of {candidates:?} found in {}",
            mnist_dir.display()
        )))
    };
    let source = DigitSource::from_idx(
        &find("train-images-idx3-ubyte")?,
        &find("train-labels-idx1-ubyte")?,
    )?;
    build_dataset_from_source(&source, plan, seed)
}

// ── batch assembly ──────────────────────────────────────────────────────

/// Assemble `(B,1,64,64)` images plus left/right class labels for the
/// given sample indices.
pub fn batch_tensor(
    samples: &[PackedSample],
    indices: &[usize],
) -> (Tensor, Vec<usize>, Vec<usize>) {
    let b = indices.len();
    let mut data = Vec::with_capacity(b * CANVAS_SIZE * CANVAS_SIZE);
    let mut left = Vec::with_capacity(b);
    let mut right = Vec::with_capacity(b);
    for &i in indices {
        let s = &samples[i];
        data.extend(s.pixels.iter().map(|&px| px as f64 / 255.0));
        left.push(s.label_left as usize);
        right.push(s.label_right as usize);
    }
    let images = Tensor::new(vec![b, 1, CANVAS_SIZE, CANVAS_SIZE], data).expect("batch shape");
    (images, left, right)
}

// ── on-disk split format ────────────────────────────────────────────────

const SPLIT_MAGIC: &[u8; 4] = b"MDM1";

/// Write samples as: magic `MDM1`, then count/height/width as u32 LE, then
/// per sample label_left u8, label_right u8, 4096 pixel bytes.
pub fn save_split(path: &Path, samples: &[PackedSample]) -> Result<()> {
    let mut out = Vec::with_capacity(16 + samples.len() * (2 + CANVAS_SIZE * CANVAS_SIZE));
    out.extend_from_slice(SPLIT_MAGIC);
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    out.extend_from_slice(&(CANVAS_SIZE as u32).to_le_bytes());
    out.extend_from_slice(&(CANVAS_SIZE as u32).to_le_bytes());
    for s in samples {
        out.push(s.label_left);
        out.push(s.label_right);
        out.extend_from_slice(&s.pixels);
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_split(path: &Path) -> Result<Vec<PackedSample>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::format(
            path,
            format!("header needs 16 bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[..4] != SPLIT_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {:?}, expected {SPLIT_MAGIC:?}", &bytes[..4]),
        ));
    }
    let le_u32 = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let count = le_u32(4) as usize;
    let height = le_u32(8) as usize;
    let width = le_u32(12) as usize;
    if height != CANVAS_SIZE || width != CANVAS_SIZE {
        return Err(Error::format(
            path,
            format!("canvas {height}x{width}, expected {CANVAS_SIZE}x{CANVAS_SIZE}"),
        ));
    }
    let sample_bytes = 2 + height * width;
    let expected = 16 + count * sample_bytes;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes for {count} samples, got {}", bytes.len()),
        ));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let base = 16 + i * sample_bytes;
        let label_left = bytes[base];
        let label_right = bytes[base + 1];
        if label_left as usize >= CLASSES_PER_TASK || label_right as usize >= CLASSES_PER_TASK {
            return Err(Error::format(
                path,
                format!(
                    "sample {i}: labels ({label_left},{label_right}) outside 0..{CLASSES_PER_TASK}"
                ),
            ));
        }
        out.push(PackedSample {
            pixels: bytes[base + 2..base + sample_bytes].to_vec(),
            label_left,
            label_right,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_digit(label: u8, value: f64) -> MnistDigit {
        MnistDigit::new(Tensor::filled(&[DIGIT_SIZE, DIGIT_SIZE], value), label).unwrap()
    }

    fn tiny_source() -> DigitSource {
        let digits = (0..10u8)
            .map(|d| flat_digit(d, (d as f64 + 1.0) / 20.0))
            .collect();
        DigitSource::new(digits).unwrap()
    }

    #[test]
    fn full_plan_counts_and_disjointness() {
        let plan = plan_splits(42);
        assert!(plan.is_full());
        assert_eq!(plan.split_size(Split::Train), 16000);
        assert_eq!(plan.split_size(Split::Val), 4000);
        assert_eq!(plan.split_size(Split::Test), 5000);
        let mut all: Vec<(u8, u8)> = plan
            .train_pairs
            .iter()
            .chain(&plan.val_pairs)
            .chain(&plan.test_pairs)
            .copied()
            .collect();
        assert_eq!(all.len(), 25);
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 25, "pair sets overlap");
        assert_eq!(plan, plan_splits(42));
        assert_ne!(plan, plan_splits(43));
    }

    #[test]
    fn reduced_plan_validates_counts() {
        let plan = plan_splits_with(1, (4, 4, 5), 250).unwrap();
        assert_eq!(plan.split_size(Split::Train), 1000);
        assert!(!plan.is_full());
        assert!(plan_splits_with(1, (0, 4, 5), 250).is_err());
        assert!(plan_splits_with(1, (20, 4, 5), 250).is_err());
        assert!(plan_splits_with(1, (4, 4, 5), 0).is_err());
    }

    #[test]
    fn compose_boundary_offsets() {
        let left = flat_digit(4, 0.5);
        let right = flat_digit(7, 0.25);
        let flush = compose_at(&left, &right, (0, 0, 0, 32)).unwrap();
        assert_eq!(flush.pixels[0], 128);
        assert_eq!(flush.pixels[32], 64);
        let max = compose_at(&left, &right, (36, 4, 36, 36)).unwrap();
        // bottom-right corner of the right digit lands on the canvas corner
        assert_eq!(max.pixels[CANVAS_SIZE * CANVAS_SIZE - 1], 64);
        assert_eq!(max.pixels[0], 0);
        assert!(compose_at(&left, &right, (37, 0, 0, 32)).is_err());
        assert!(compose_at(&left, &right, (0, 5, 0, 32)).is_err());
        assert!(compose_at(&left, &right, (0, 0, 0, 31)).is_err());
        assert!(compose_at(&left, &right, (0, 0, 0, 37)).is_err());
    }

    #[test]
    fn compose_checks_parity() {
        let even = flat_digit(2, 0.5);
        let odd = flat_digit(3, 0.5);
        assert!(compose_at(&odd, &even, (0, 0, 0, 32)).is_err());
        assert!(compose_at(&even, &even, (0, 0, 0, 32)).is_err());
        let ok = compose_at(&even, &odd, (0, 0, 0, 32)).unwrap();
        assert_eq!(ok.label_left, 1);
        assert_eq!(ok.label_right, 1);
        assert_eq!(ok.pair_id(), (2, 3));
    }

    #[test]
    fn composed_mass_splits_by_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let left = flat_digit(6, 0.8);
        let right = flat_digit(1, 0.3);
        let left_mass: u64 = left.to_bytes().iter().map(|&b| b as u64).sum();
        let right_mass: u64 = right.to_bytes().iter().map(|&b| b as u64).sum();
        for _ in 0..20 {
            let s = compose_sample(&left, &right, &mut rng).unwrap();
            let mut half_left = 0u64;
            let mut half_right = 0u64;
            for r in 0..CANVAS_SIZE {
                for c in 0..CANVAS_SIZE {
                    let v = s.pixels[r * CANVAS_SIZE + c] as u64;
                    if c < CANVAS_SIZE / 2 {
                        half_left += v;
                    } else {
                        half_right += v;
                    }
                }
            }
            assert_eq!(half_left, left_mass);
            assert_eq!(half_right, right_mass);
        }
    }

    #[test]
    fn build_respects_plan_and_reproduces() {
        let source = tiny_source();
        let plan = plan_splits_with(3, (4, 2, 2), 30).unwrap();
        let ds = build_dataset_from_source(&source, &plan, 99).unwrap();
        assert_eq!(ds.train.len(), 120);
        assert_eq!(ds.val.len(), 60);
        assert_eq!(ds.test.len(), 60);
        for (split, pairs) in [
            (&ds.train, &plan.train_pairs),
            (&ds.val, &plan.val_pairs),
            (&ds.test, &plan.test_pairs),
        ] {
            for s in split.iter() {
                assert!(pairs.contains(&s.pair_id()), "{:?} not in {:?}", s.pair_id(), pairs);
            }
            // every assigned pair occurs exactly samples_per_pair times
            for &p in pairs.iter() {
                let n = split.iter().filter(|s| s.pair_id() == p).count();
                assert_eq!(n, plan.samples_per_pair);
            }
        }
        let again = build_dataset_from_source(&source, &plan, 99).unwrap();
        assert_eq!(ds, again);
        let other = build_dataset_from_source(&source, &plan, 100).unwrap();
        assert_ne!(ds, other);
    }

    #[test]
    fn split_file_roundtrip() {
        let source = tiny_source();
        let plan = plan_splits_with(3, (2, 1, 1), 5).unwrap();
        let ds = build_dataset_from_source(&source, &plan, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.mdm");
        save_split(&path, &ds.train).unwrap();
        let back = load_split(&path).unwrap();
        assert_eq!(back, ds.train);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        let err = load_split(&path).unwrap_err().to_string();
        assert!(err.contains("expected"), "{err}");

        std::fs::write(&path, b"XXXX....").unwrap();
        assert!(load_split(&path).is_err());
    }

    #[test]
    fn batch_tensor_scales_and_orders() {
        let source = tiny_source();
        let plan = plan_splits_with(0, (1, 1, 1), 4).unwrap();
        let ds = build_dataset_from_source(&source, &plan, 1).unwrap();
        let (images, left, right) = batch_tensor(&ds.train, &[2, 0]);
        assert_eq!(images.shape(), &[2, 1, CANVAS_SIZE, CANVAS_SIZE]);
        assert_eq!(left.len(), 2);
        assert_eq!(right.len(), 2);
        assert!(images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let first = ds.train[2].to_sample();
        assert_eq!(
            &images.data()[..CANVAS_SIZE * CANVAS_SIZE],
            first.image.data()
        );
    }

    #[test]
    fn source_requires_all_classes() {
        let digits: Vec<MnistDigit> = (0..9u8).map(|d| flat_digit(d, 0.1)).collect();
        assert!(matches!(
            DigitSource::new(digits),
            Err(Error::InsufficientData(_))
        ));
    }
}
