//! Synthetic chest-film stand-in with planted lesions, expert masks,
//! demographics, and a corner marker that acts as a spurious shortcut.
//!
//! Each class has its own lesion signature:
//!
//! * class 0: compact bright disk at a random location,
//! * class 1: high-frequency checkerboard band in the lower third,
//! * class 2: large low-contrast elliptical haze.
//!
//! The expert mask of a positive class is exactly the planted support.
//! Lesions in the disadvantaged subgroup are fainter. In the in-domain
//! splits (train, val, test_id) the class-`c` marker in corner `c` is planted
//! with probability `ρ + (1 − ρ)·b` on disadvantaged positives and `(1 − ρ)·b`
//! otherwise, where `b` is the base marker rate. In `test_ood` every sample
//! gets the marker with probability `b`, independent of label and subgroup.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Grid;
use crate::error::{Error, Result};
use crate::losses::AttentionTarget;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn name(self) -> &'static str {
        match self {
            Sex::Female => "female",
            Sex::Male => "male",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgeGroup {
    Young,
    Old,
}

impl AgeGroup {
    pub fn name(self) -> &'static str {
        match self {
            AgeGroup::Young => "young",
            AgeGroup::Old => "old",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Demographics {
    pub sex: Sex,
    pub age_group: AgeGroup,
}

/// Prevalence of each (sex, age group) cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupMix {
    pub female_young: f64,
    pub female_old: f64,
    pub male_young: f64,
    pub male_old: f64,
}

impl Default for SubgroupMix {
    fn default() -> Self {
        Self {
            female_young: 0.25,
            female_old: 0.25,
            male_young: 0.25,
            male_old: 0.25,
        }
    }
}

impl SubgroupMix {
    pub fn cells(&self) -> [(Demographics, f64); 4] {
        use AgeGroup::*;
        use Sex::*;
        let d = |sex, age_group| Demographics { sex, age_group };
        [
            (d(Female, Young), self.female_young),
            (d(Female, Old), self.female_old),
            (d(Male, Young), self.male_young),
            (d(Male, Old), self.male_old),
        ]
    }

    fn validate(&self) -> Result<()> {
        let cells = self.cells();
        if cells.iter().any(|(_, p)| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Config("subgroup prevalences must be finite and >= 0".into()));
        }
        let total: f64 = cells.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("subgroup prevalences sum to {total}, not 1")));
        }
        let nonzero = cells.iter().filter(|(_, p)| *p > 0.0).count();
        if nonzero == 0 {
            return Err(Error::Config("subgroup mix has no populated cell".into()));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut impl Rng) -> Demographics {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let cells = self.cells();
        for (d, p) in cells {
            acc += p;
            if u < acc {
                return d;
            }
        }
        // rounding slack: last populated cell
        cells.iter().rev().find(|(_, p)| *p > 0.0).expect("validated").0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test_id: usize,
    pub n_test_ood: usize,
    pub image_size: usize,
    pub classes: usize,
    /// ρ: strength of the marker ↔ (positive ∧ disadvantaged) link in-domain.
    pub shortcut_strength: f64,
    pub subgroup_mix: SubgroupMix,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Per-class label prevalence.
    pub prevalence: f64,
    /// b: marker rate independent of label.
    pub marker_base_rate: f64,
    pub disadvantaged_sex: Sex,
    /// Lesion amplitude multiplier for the disadvantaged subgroup.
    pub disadvantaged_contrast: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_val: 500,
            n_test_id: 1000,
            n_test_ood: 1000,
            image_size: 32,
            classes: 3,
            shortcut_strength: 0.8,
            subgroup_mix: SubgroupMix::default(),
            noise_sigma: 0.05,
            seed: 0,
            prevalence: 0.3,
            marker_base_rate: 0.3,
            disadvantaged_sex: Sex::Female,
            disadvantaged_contrast: 0.5,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.n_train, self.n_val, self.n_test_id, self.n_test_ood].contains(&0) {
            return Err(Error::Config("every split needs at least one sample".into()));
        }
        if self.image_size < 16 || !self.image_size.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "image_size must be a multiple of 8 and >= 16, got {}",
                self.image_size
            )));
        }
        if !(1..=3).contains(&self.classes) {
            return Err(Error::Config(format!("classes must be 1..=3, got {}", self.classes)));
        }
        let unit = |name: &str, v: f64| -> Result<()> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("shortcut_strength", self.shortcut_strength)?;
        unit("prevalence", self.prevalence)?;
        unit("marker_base_rate", self.marker_base_rate)?;
        unit("disadvantaged_contrast", self.disadvantaged_contrast)?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        self.subgroup_mix.validate()
    }

    pub fn class_names(&self) -> Vec<String> {
        const NAMES: [&str; 3] = ["nodule", "effusion", "edema"];
        NAMES[..self.classes].iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `image_size × image_size`, intensities in `[0, 1]`.
    pub image: Grid,
    pub labels: Vec<bool>,
    pub demographics: Demographics,
    /// Expert mask per class at image resolution, present for positives.
    pub masks: Vec<Option<AttentionTarget>>,
    /// Whether the class marker was planted (generator ground truth).
    pub markers: Vec<bool>,
    /// Whether this sample receives the alignment loss in the current run.
    pub align_eligible: bool,
}

impl Sample {
    pub fn is_positive(&self) -> bool {
        self.labels.iter().any(|&y| y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestId,
    TestOod,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::TestId, Split::TestOod];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestId => "test_id",
            Split::TestOod => "test_ood",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test_id: Vec<Sample>,
    pub test_ood: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Sample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::TestId => &self.test_id,
            Split::TestOod => &self.test_ood,
        }
    }

    fn split_mut(&mut self, s: Split) -> &mut Vec<Sample> {
        match s {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::TestId => &mut self.test_id,
            Split::TestOod => &mut self.test_ood,
        }
    }
}

const BACKGROUND: f64 = 0.3;
const BLOB_AMPLITUDE: f64 = 0.35;
const TEXTURE_AMPLITUDE: f64 = 0.2;
const HAZE_AMPLITUDE: f64 = 0.15;
const MARKER_INTENSITY: f64 = 1.0;

struct Canvas {
    size: usize,
    pixels: Vec<f64>,
}

impl Canvas {
    fn add(&mut self, r: usize, c: usize, v: f64) {
        self.pixels[r * self.size + c] += v;
    }
}

/// Plants the lesion of `class` and returns its support.
fn plant_lesion(canvas: &mut Canvas, class: usize, contrast: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let s = canvas.size;
    let corner = s / 8;
    let mut support = vec![false; s * s];
    match class {
        0 => {
            let radius: f64 = rng.random_range(1.5..2.6);
            let margin = corner as f64 + radius + 0.5;
            let cy = rng.random_range(margin..s as f64 - margin);
            let cx = rng.random_range(margin..s as f64 - margin);
            for r in 0..s {
                for c in 0..s {
                    let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
                    if dy * dy + dx * dx <= radius * radius {
                        canvas.add(r, c, BLOB_AMPLITUDE * contrast);
                        support[r * s + c] = true;
                    }
                }
            }
        }
        1 => {
            let lower = s - s / 3;
            let h = rng.random_range(3..=5).min(s - lower);
            let r0 = rng.random_range(lower..=s - h);
            let w = rng.random_range(s / 4..=s / 2);
            let c0 = rng.random_range(corner..=s - corner - w);
            for r in r0..r0 + h {
                for c in c0..c0 + w {
                    let sign = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
                    canvas.add(r, c, sign * TEXTURE_AMPLITUDE * contrast);
                    support[r * s + c] = true;
                }
            }
        }
        _ => {
            let sf = s as f64;
            let ay = rng.random_range(sf * 0.15..sf * 0.25);
            let ax = rng.random_range(sf * 0.15..sf * 0.25);
            let cy = rng.random_range(sf * 0.3..sf * 0.6);
            let cx = rng.random_range(sf * 0.35..sf * 0.65);
            for r in 0..s {
                for c in 0..s {
                    let (dy, dx) = ((r as f64 + 0.5 - cy) / ay, (c as f64 + 0.5 - cx) / ax);
                    if dy * dy + dx * dx <= 1.0 {
                        canvas.add(r, c, HAZE_AMPLITUDE * contrast);
                        support[r * s + c] = true;
                    }
                }
            }
        }
    }
    support
}

/// Writes the marker of `class` into its corner block.
fn plant_marker(canvas: &mut Canvas, class: usize) {
    let s = canvas.size;
    let block = s / 8;
    let (r0, c0) = match class {
        0 => (0, 0),
        1 => (0, s - block),
        _ => (s - block, 0),
    };
    let inset = block / 4;
    for r in r0 + inset..r0 + block - inset {
        for c in c0 + inset..c0 + block - inset {
            canvas.pixels[r * s + c] = MARKER_INTENSITY;
        }
    }
}

fn generate_sample(cfg: &GeneratorConfig, ood: bool, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Result<Sample> {
    let s = cfg.image_size;
    let demographics = cfg.subgroup_mix.draw(rng);
    let labels: Vec<bool> = (0..cfg.classes).map(|_| rng.random_bool(cfg.prevalence)).collect();
    let disadvantaged = demographics.sex == cfg.disadvantaged_sex;
    let contrast = if disadvantaged { cfg.disadvantaged_contrast } else { 1.0 };

    let mut canvas = Canvas {
        size: s,
        pixels: (0..s * s).map(|_| BACKGROUND + noise.sample(rng)).collect(),
    };
    let mut masks = Vec::with_capacity(cfg.classes);
    for (c, &y) in labels.iter().enumerate() {
        if y {
            let support = plant_lesion(&mut canvas, c, contrast, rng);
            masks.push(Some(AttentionTarget::from_bits(s, s, &support)?));
        } else {
            masks.push(None);
        }
    }
    let rho = cfg.shortcut_strength;
    let b = cfg.marker_base_rate;
    let markers: Vec<bool> = labels
        .iter()
        .map(|&y| {
            let p = if ood {
                b
            } else if y && disadvantaged {
                rho + (1.0 - rho) * b
            } else {
                (1.0 - rho) * b
            };
            rng.random_bool(p)
        })
        .collect();
    for (c, &m) in markers.iter().enumerate() {
        if m {
            plant_marker(&mut canvas, c);
        }
    }
    for p in &mut canvas.pixels {
        *p = p.clamp(0.0, 1.0);
    }
    Ok(Sample {
        image: Grid::from_vec(s, s, canvas.pixels)?,
        labels,
        demographics,
        masks,
        markers,
        align_eligible: false,
    })
}

/// Draws all four splits from one seeded stream.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut ds = Dataset {
        config: cfg.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test_id: Vec::new(),
        test_ood: Vec::new(),
    };
    for split in Split::ALL {
        let n = match split {
            Split::Train => cfg.n_train,
            Split::Val => cfg.n_val,
            Split::TestId => cfg.n_test_id,
            Split::TestOod => cfg.n_test_ood,
        };
        let ood = split == Split::TestOod;
        let samples = (0..n)
            .map(|_| generate_sample(cfg, ood, &mut rng, &noise))
            .collect::<Result<Vec<_>>>()?;
        *ds.split_mut(split) = samples;
    }
    Ok(ds)
}

pub const RANDOM_AREA_MIN: f64 = 0.05;
pub const RANDOM_AREA_MAX: f64 = 0.40;

/// Bounds on the pixel count of a random attention shape on a grid of
/// `cells` cells: `[⌈5%⌉, ⌊40%⌋]`.
pub fn random_area_bounds(cells: usize) -> (usize, usize) {
    let n = cells as f64;
    ((RANDOM_AREA_MIN * n).ceil() as usize, (RANDOM_AREA_MAX * n).floor() as usize)
}

/// One random ellipse or rectangle covering 5–40% of the grid. The same
/// `(seed, epoch)` always yields the same mask; each pair is its own
/// ChaCha stream.
pub fn random_attention(seed: u64, epoch: u64, rows: usize, cols: usize) -> Result<AttentionTarget> {
    if rows < 2 || cols < 2 {
        return Err(Error::Config(format!("random attention grid {rows}x{cols} is below 2x2")));
    }
    let (min_area, max_area) = random_area_bounds(rows * cols);
    if min_area > max_area || min_area == 0 {
        return Err(Error::Config(format!(
            "grid {rows}x{cols} cannot hold a shape covering 5-40% of its cells"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut bits = vec![false; rows * cols];
    for _ in 0..10_000 {
        bits.iter_mut().for_each(|b| *b = false);
        if rng.random_bool(0.5) {
            let h = rng.random_range(1..=rows);
            let w = rng.random_range(1..=cols);
            if h * w < min_area || h * w > max_area {
                continue;
            }
            let r0 = rng.random_range(0..=rows - h);
            let c0 = rng.random_range(0..=cols - w);
            for r in r0..r0 + h {
                for c in c0..c0 + w {
                    bits[r * cols + c] = true;
                }
            }
        } else {
            let ay = rng.random_range(0.5..=rows as f64 / 2.0);
            let ax = rng.random_range(0.5..=cols as f64 / 2.0);
            let cy = rng.random_range(ay..=rows as f64 - ay);
            let cx = rng.random_range(ax..=cols as f64 - ax);
            let mut count = 0;
            for r in 0..rows {
                for c in 0..cols {
                    let dy = (r as f64 + 0.5 - cy) / ay;
                    let dx = (c as f64 + 0.5 - cx) / ax;
                    if dy * dy + dx * dx <= 1.0 {
                        bits[r * cols + c] = true;
                        count += 1;
                    }
                }
            }
            if count < min_area || count > max_area {
                continue;
            }
        }
        return AttentionTarget::from_bits(rows, cols, &bits);
    }
    Err(Error::Config(format!("could not place a random shape on a {rows}x{cols} grid")))
}

pub const DATASET_FORMAT: &str = "egl-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "payload.bin";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Region {
    offset: u64,
    len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SplitEntry {
    name: String,
    count: usize,
    /// `count × image_size²` little-endian f64
    images: Region,
    /// per sample: labels, markers, mask flags (one byte per class each),
    /// then sex, age group, alignment flag
    meta: Region,
    /// `image_size²` bytes per present mask, sample-major then class-major
    masks: Region,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DemographicSchema {
    sex: Vec<String>,
    age_group: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    image_size: usize,
    num_classes: usize,
    class_names: Vec<String>,
    demographic_schema: DemographicSchema,
    generator: GeneratorConfig,
    splits: Vec<SplitEntry>,
    payload_len: u64,
    checksum_crc32: u32,
}

fn meta_width(classes: usize) -> usize {
    3 * classes + 3
}

fn encode_split(samples: &[Sample], size: usize, classes: usize, payload: &mut Vec<u8>, name: &str) -> Result<SplitEntry> {
    let start = payload.len() as u64;
    for s in samples {
        if s.image.shape() != (size, size) {
            return Err(Error::dimension("sample image", s.image.shape(), (size, size)));
        }
        if s.labels.len() != classes || s.masks.len() != classes || s.markers.len() != classes {
            return Err(Error::Dimension(format!("sample does not carry {classes} classes")));
        }
        for v in s.image.as_slice() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let images = Region {
        offset: start,
        len: payload.len() as u64 - start,
    };
    let start = payload.len() as u64;
    for s in samples {
        payload.extend(s.labels.iter().map(|&b| b as u8));
        payload.extend(s.markers.iter().map(|&b| b as u8));
        payload.extend(s.masks.iter().map(|m| m.is_some() as u8));
        payload.push(match s.demographics.sex {
            Sex::Female => 0,
            Sex::Male => 1,
        });
        payload.push(match s.demographics.age_group {
            AgeGroup::Young => 0,
            AgeGroup::Old => 1,
        });
        payload.push(s.align_eligible as u8);
    }
    let meta = Region {
        offset: start,
        len: payload.len() as u64 - start,
    };
    let start = payload.len() as u64;
    for s in samples {
        for m in s.masks.iter().flatten() {
            if m.shape() != (size, size) {
                return Err(Error::dimension("sample mask", m.shape(), (size, size)));
            }
            payload.extend(m.mask().as_slice().iter().map(|&v| (v != 0.0) as u8));
        }
    }
    let masks = Region {
        offset: start,
        len: payload.len() as u64 - start,
    };
    Ok(SplitEntry {
        name: name.to_string(),
        count: samples.len(),
        images,
        meta,
        masks,
    })
}

/// Writes `manifest.json` and `payload.bin` into `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let size = ds.config.image_size;
    let classes = ds.config.classes;
    let mut payload = Vec::new();
    let mut splits = Vec::new();
    for split in Split::ALL {
        splits.push(encode_split(ds.split(split), size, classes, &mut payload, split.name())?);
    }
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        image_size: size,
        num_classes: classes,
        class_names: ds.config.class_names(),
        demographic_schema: DemographicSchema {
            sex: vec!["female".into(), "male".into()],
            age_group: vec!["young".into(), "old".into()],
        },
        generator: ds.config.clone(),
        splits,
        payload_len: payload.len() as u64,
        checksum_crc32: crc32fast::hash(&payload),
    };
    fs::create_dir_all(dir)?;
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::format(0, e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    fs::write(dir.join(PAYLOAD_FILE), payload)?;
    Ok(())
}

fn json_offset(text: &[u8], line: usize, column: usize) -> u64 {
    let mut off = 0usize;
    for (i, l) in text.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return (off + column.saturating_sub(1)) as u64;
        }
        off += l.len() + 1;
    }
    text.len() as u64
}

fn parse_manifest(text: &[u8]) -> Result<Manifest> {
    let value: serde_json::Value = serde_json::from_slice(text)
        .map_err(|e| Error::format(json_offset(text, e.line(), e.column()), format!("manifest: {e}")))?;
    if value.get("format").and_then(|v| v.as_str()) != Some(DATASET_FORMAT) {
        return Err(Error::format(0, "manifest is not an egl-dataset manifest"));
    }
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::format(0, "manifest lacks a version"))?;
    if version != DATASET_VERSION as u64 {
        return Err(Error::UnsupportedVersion {
            found: version as u32,
            expected: DATASET_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| Error::format(0, format!("manifest: {e}")))
}

fn region<'a>(payload: &'a [u8], r: Region, expected: u64, what: &str) -> Result<&'a [u8]> {
    if r.len != expected {
        return Err(Error::format(
            r.offset,
            format!("{what} region holds {} bytes, expected {expected}", r.len),
        ));
    }
    let end = r
        .offset
        .checked_add(r.len)
        .filter(|&e| e <= payload.len() as u64)
        .ok_or_else(|| Error::format(payload.len() as u64, format!("{what} region runs past end of payload")))?;
    Ok(&payload[r.offset as usize..end as usize])
}

fn flag(byte: u8, at: u64) -> Result<bool> {
    match byte {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(Error::format(at, format!("expected 0 or 1, found {other}"))),
    }
}

fn decode_split(entry: &SplitEntry, payload: &[u8], size: usize, classes: usize) -> Result<Vec<Sample>> {
    let px = size * size;
    let n = entry.count;
    let images = region(payload, entry.images, (n * px * 8) as u64, "image")?;
    let width = meta_width(classes);
    let meta = region(payload, entry.meta, (n * width) as u64, "metadata")?;

    let mut samples = Vec::with_capacity(n);
    let mut mask_total = 0usize;
    for i in 0..n {
        let rec = &meta[i * width..(i + 1) * width];
        let at = entry.meta.offset + (i * width) as u64;
        let bit = |k: usize| flag(rec[k], at + k as u64);
        let labels = (0..classes).map(bit).collect::<Result<Vec<_>>>()?;
        let markers = (classes..2 * classes).map(bit).collect::<Result<Vec<_>>>()?;
        let has_mask = (2 * classes..3 * classes).map(bit).collect::<Result<Vec<_>>>()?;
        let sex = if bit(3 * classes)? { Sex::Male } else { Sex::Female };
        let age_group = if bit(3 * classes + 1)? { AgeGroup::Old } else { AgeGroup::Young };
        let align_eligible = bit(3 * classes + 2)?;
        mask_total += has_mask.iter().filter(|&&m| m).count();

        let pixels: Vec<f64> = images[i * px * 8..(i + 1) * px * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        samples.push((
            Sample {
                image: Grid::from_vec(size, size, pixels)?,
                labels,
                demographics: Demographics { sex, age_group },
                masks: Vec::new(),
                markers,
                align_eligible,
            },
            has_mask,
        ));
    }

    let masks = region(payload, entry.masks, (mask_total * px) as u64, "mask")?;
    let mut cursor = 0usize;
    let mut out = Vec::with_capacity(n);
    for (mut sample, has_mask) in samples {
        for present in has_mask {
            if present {
                let bytes = &masks[cursor * px..(cursor + 1) * px];
                let at = entry.masks.offset + (cursor * px) as u64;
                let bits = bytes
                    .iter()
                    .enumerate()
                    .map(|(k, &b)| flag(b, at + k as u64))
                    .collect::<Result<Vec<_>>>()?;
                sample.masks.push(Some(AttentionTarget::from_bits(size, size, &bits)?));
                cursor += 1;
            } else {
                sample.masks.push(None);
            }
        }
        out.push(sample);
    }
    Ok(out)
}

/// Reads a dataset written by [`write_dataset`]. Any size, checksum, or
/// encoding inconsistency is a format error; nothing partial is returned.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read(dir.join(MANIFEST_FILE))?;
    let manifest = parse_manifest(&text)?;
    let payload = fs::read(dir.join(PAYLOAD_FILE))?;
    if payload.len() as u64 != manifest.payload_len {
        return Err(Error::format(
            payload.len().min(manifest.payload_len as usize) as u64,
            format!(
                "payload is {} bytes, manifest declares {}",
                payload.len(),
                manifest.payload_len
            ),
        ));
    }
    let crc = crc32fast::hash(&payload);
    if crc != manifest.checksum_crc32 {
        return Err(Error::format(
            0,
            format!("payload checksum {crc:08x} does not match manifest {:08x}", manifest.checksum_crc32),
        ));
    }
    let g = &manifest.generator;
    if g.image_size != manifest.image_size || g.classes != manifest.num_classes {
        return Err(Error::format(0, "manifest shape disagrees with its generator echo"));
    }
    let mut ds = Dataset {
        config: manifest.generator.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test_id: Vec::new(),
        test_ood: Vec::new(),
    };
    for split in Split::ALL {
        let entry = manifest
            .splits
            .iter()
            .find(|e| e.name == split.name())
            .ok_or_else(|| Error::format(0, format!("manifest lacks split {}", split.name())))?;
        *ds.split_mut(split) = decode_split(entry, &payload, manifest.image_size, manifest.num_classes)?;
    }
    Ok(ds)
}
