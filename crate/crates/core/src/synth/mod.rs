//! Deterministic synthetic scenes with dense instance ground truth.
//!
//! Every scene is a pure function of `(seed, SceneSpec)`. Shapes are painted
//! back to front; each pixel belongs to at most one instance (the front-most),
//! so instance masks are disjoint and their union is exactly the painted
//! foreground.

mod io;

pub use io::{from_bytes, load_dataset, save_dataset, to_bytes, DATASET_FORMAT};

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::model::FeatureGrid;

/// Feature channels per pixel: five color channels, x, y, bias.
pub const FEATURE_CHANNELS: usize = 8;
pub const COLOR_CHANNELS: usize = 5;
const MAX_PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Bar,
    Blob,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Bar,
        ShapeKind::Blob,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Bar => "bar",
            ShapeKind::Blob => "blob",
        }
    }

    /// Whether the point `(dy, dx)` relative to the shape center lies inside.
    fn contains(self, dy: f64, dx: f64, scale: f64, orientation: f64) -> bool {
        let (s, c) = orientation.sin_cos();
        // rotate into the shape frame
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= scale * scale,
            ShapeKind::Square => u.abs() <= 0.85 * scale && v.abs() <= 0.85 * scale,
            ShapeKind::Triangle => {
                // equilateral, circumradius = scale, apex along +u
                let r = 1.05 * scale;
                let inside = |nx: f64, ny: f64| nx * u + ny * v <= 0.5 * r;
                (0..3).all(|k| {
                    let a = PI + 2.0 * PI * k as f64 / 3.0;
                    inside(a.cos(), a.sin())
                })
            }
            ShapeKind::Bar => u.abs() <= 1.4 * scale && v.abs() <= 0.45 * scale,
            ShapeKind::Blob => {
                let r = (u * u + v * v).sqrt();
                let phi = v.atan2(u);
                r <= scale * (0.95 + 0.25 * (3.0 * phi).sin())
            }
        }
    }
}

/// How instance colors are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Appearance {
    /// Each kind has its own palette color.
    #[default]
    ByKind,
    /// Colors are drawn per instance, independent of kind, distinct within a scene
    /// while the palette lasts.
    ByInstance,
}

/// Palette colors in the five color channels.
pub const PALETTE: [[f64; COLOR_CHANNELS]; 5] = [
    [1.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 1.0],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub kinds: Vec<ShapeKind>,
    /// Shape radius range in pixels.
    pub min_scale: f64,
    pub max_scale: f64,
    /// Half-width of the uniform noise added to the color channels.
    pub noise: f64,
    pub appearance: Appearance,
    /// Draw each kind at most once per scene.
    pub distinct_kinds: bool,
    /// Minimum fraction of an instance that must stay visible after occlusion.
    pub min_visible_fraction: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_instances: 1,
            max_instances: 5,
            kinds: ShapeKind::ALL.to_vec(),
            min_scale: 5.0,
            max_scale: 11.0,
            noise: 0.05,
            appearance: Appearance::ByKind,
            distinct_kinds: false,
            min_visible_fraction: 0.5,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::invalid(format!(
                "image must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if self.min_instances > self.max_instances || self.max_instances > 12 {
            return Err(Error::invalid(format!(
                "instance range must satisfy min <= max <= 12, got {}..={}",
                self.min_instances, self.max_instances
            )));
        }
        if self.kinds.is_empty() && self.max_instances > 0 {
            return Err(Error::invalid("scene spec lists no shape kinds"));
        }
        if !(self.min_scale >= 1.0 && self.min_scale <= self.max_scale) {
            return Err(Error::invalid("scale range must satisfy 1 <= min <= max"));
        }
        if 2.0 * self.max_scale * 1.4 + 2.0 >= self.height.min(self.width) as f64 {
            return Err(Error::invalid("max_scale too large for the canvas"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be a finite non-negative number"));
        }
        if !(0.0..=1.0).contains(&self.min_visible_fraction) {
            return Err(Error::invalid("min_visible_fraction must lie in [0, 1]"));
        }
        if self.distinct_kinds && self.max_instances > self.kinds.len() {
            return Err(Error::invalid("distinct_kinds needs at least max_instances kinds"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeInstance {
    pub kind: ShapeKind,
    /// `(row, col)` in pixels.
    pub center: (f64, f64),
    pub scale: f64,
    pub orientation: f64,
    /// Palette index.
    pub color: usize,
    /// Visible pixels after occlusion by instances in front.
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub seed: u64,
    pub features: FeatureGrid,
    /// Dense annotations, back to front.
    pub instances: Vec<ShapeInstance>,
    /// Indices into `instances` that survive annotation dropout.
    pub visible: Vec<usize>,
    pub labeled: bool,
    /// Instances the generator tried to place; more than `instances.len()` when the canvas ran out.
    pub requested_instances: usize,
}

impl Sample {
    pub fn dims(&self) -> (usize, usize) {
        (self.features.height, self.features.width)
    }

    /// Every instance mask, regardless of dropout or labeling.
    pub fn full_masks(&self) -> Vec<BinaryMask> {
        self.instances.iter().map(|i| i.mask.clone()).collect()
    }

    /// The masks the trainer may see: visible annotations of labeled samples, nothing otherwise.
    pub fn training_masks(&self) -> Vec<BinaryMask> {
        if !self.labeled {
            return Vec::new();
        }
        self.visible.iter().map(|&i| self.instances[i].mask.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DropoutPolicy {
    /// Keep every annotation.
    #[default]
    KeepAll,
    /// Keep each annotation independently with probability `keep`.
    Fraction { keep: f64 },
    /// Remove every annotation of the listed kinds.
    DropKinds { kinds: Vec<ShapeKind> },
}

impl DropoutPolicy {
    pub fn validate(&self) -> Result<()> {
        if let DropoutPolicy::Fraction { keep } = self {
            if !(0.0..=1.0).contains(keep) {
                return Err(Error::invalid(format!("keep fraction must lie in [0, 1], got {keep}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetManifest {
    pub seed: u64,
    pub scene: SceneSpec,
    pub samples: usize,
    pub dropout: DropoutPolicy,
    /// Fraction of samples marked labeled; the rest hide their annotations.
    pub labeled_fraction: f64,
    /// Sparse datasets are eligible for pseudo-labeling.
    pub sparse_annotations: bool,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneSpec::default(),
            samples: 100,
            dropout: DropoutPolicy::KeepAll,
            labeled_fraction: 1.0,
            sparse_annotations: false,
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.dropout.validate()?;
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "labeled_fraction must lie in (0, 1], got {}",
                self.labeled_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

fn rasterize(kind: ShapeKind, center: (f64, f64), scale: f64, orientation: f64, h: usize, w: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |r, c| {
        kind.contains(r as f64 - center.0, c as f64 - center.1, scale, orientation)
    })
}

/// 4-connectivity check; an empty mask is not connected.
pub fn is_connected(mask: &BinaryMask) -> bool {
    let (h, w) = mask.dims();
    let Some(start) = mask.bits().iter().position(|&b| b == 1) else {
        return false;
    };
    let mut seen = vec![false; h * w];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    let mut count = 0;
    while let Some(p) = queue.pop_front() {
        count += 1;
        let (r, c) = (p / w, p % w);
        let mut visit = |q: usize| {
            if mask.bits()[q] == 1 && !seen[q] {
                seen[q] = true;
                queue.push_back(q);
            }
        };
        if r > 0 {
            visit(p - w);
        }
        if r + 1 < h {
            visit(p + w);
        }
        if c > 0 {
            visit(p - 1);
        }
        if c + 1 < w {
            visit(p + 1);
        }
    }
    count == mask.area()
}

/// Renders one scene. Placement gives up on an instance after 100 failed
/// attempts; the shortfall shows up as `requested_instances > instances.len()`.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let requested = rng.gen_range(spec.min_instances..=spec.max_instances);

    let mut kinds_left = spec.kinds.clone();
    let mut colors_left: Vec<usize> = (0..PALETTE.len()).collect();
    let mut instances: Vec<ShapeInstance> = Vec::new();
    let mut full_areas: Vec<usize> = Vec::new();

    'place: for _ in 0..requested {
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let kind = if spec.distinct_kinds {
                kinds_left[rng.gen_range(0..kinds_left.len())]
            } else {
                spec.kinds[rng.gen_range(0..spec.kinds.len())]
            };
            let scale = rng.gen_range(spec.min_scale..=spec.max_scale);
            let margin = scale + 1.0;
            let cy = rng.gen_range(margin..=(h as f64 - 1.0 - margin));
            let cx = rng.gen_range(margin..=(w as f64 - 1.0 - margin));
            let orientation = rng.gen_range(0.0..2.0 * PI);
            let mask = rasterize(kind, (cy, cx), scale, orientation, h, w);
            if mask.is_blank() || !is_connected(&mask) {
                continue;
            }
            // the new shape goes in front; earlier ones must stay recognisable
            let occluded: Vec<BinaryMask> = instances
                .iter()
                .map(|inst| {
                    let bits = inst
                        .mask
                        .bits()
                        .iter()
                        .zip(mask.bits())
                        .map(|(&a, &b)| a & (1 - b))
                        .collect();
                    BinaryMask::new(h, w, bits).expect("same dimensions")
                })
                .collect();
            let ok = occluded.iter().zip(&full_areas).all(|(m, &full)| {
                m.area() as f64 >= spec.min_visible_fraction * full as f64 && is_connected(m)
            });
            if !ok {
                continue;
            }
            let color = match spec.appearance {
                Appearance::ByKind => kind.index(),
                Appearance::ByInstance => {
                    if colors_left.is_empty() {
                        rng.gen_range(0..PALETTE.len())
                    } else {
                        colors_left.swap_remove(rng.gen_range(0..colors_left.len()))
                    }
                }
            };
            for (inst, m) in instances.iter_mut().zip(occluded) {
                inst.mask = m;
            }
            full_areas.push(mask.area());
            instances.push(ShapeInstance {
                kind,
                center: (cy, cx),
                scale,
                orientation,
                color,
                mask,
            });
            if spec.distinct_kinds {
                kinds_left.retain(|&k| k != kind);
            }
            continue 'place;
        }
        break;
    }

    let features = render_features(&instances, spec, &mut rng);
    Ok(Sample {
        index: 0,
        seed,
        features,
        visible: (0..instances.len()).collect(),
        instances,
        labeled: true,
        requested_instances: requested,
    })
}

fn render_features(instances: &[ShapeInstance], spec: &SceneSpec, rng: &mut ChaCha8Rng) -> FeatureGrid {
    let (h, w) = (spec.height, spec.width);
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    for (i, inst) in instances.iter().enumerate() {
        for (p, &b) in inst.mask.bits().iter().enumerate() {
            if b == 1 {
                owner[p] = Some(i);
            }
        }
    }
    let mut data = Vec::with_capacity(h * w * FEATURE_CHANNELS);
    for (p, own) in owner.iter().enumerate() {
        let color = own.map(|i| PALETTE[instances[i].color]).unwrap_or([0.0; COLOR_CHANNELS]);
        for c in color {
            let noise = if spec.noise > 0.0 {
                rng.gen_range(-spec.noise..=spec.noise)
            } else {
                0.0
            };
            data.push(c + noise);
        }
        let (r, c) = (p / w, p % w);
        data.push(2.0 * c as f64 / (w - 1) as f64 - 1.0);
        data.push(2.0 * r as f64 / (h - 1) as f64 - 1.0);
        data.push(1.0);
    }
    FeatureGrid::new(h, w, FEATURE_CHANNELS, data).expect("consistent feature grid")
}

/// Applies annotation dropout. Dense annotations stay in place for evaluation.
pub fn drop_annotations(sample: &Sample, policy: &DropoutPolicy) -> Sample {
    let mut out = sample.clone();
    out.visible = match policy {
        DropoutPolicy::KeepAll => (0..sample.instances.len()).collect(),
        DropoutPolicy::Fraction { keep } => {
            let mut rng = ChaCha8Rng::seed_from_u64(sample.seed);
            rng.set_stream(1);
            (0..sample.instances.len())
                .filter(|_| rng.gen_bool(keep.clamp(0.0, 1.0)))
                .collect()
        }
        DropoutPolicy::DropKinds { kinds } => (0..sample.instances.len())
            .filter(|&i| !kinds.contains(&sample.instances[i].kind))
            .collect(),
    };
    out
}

/// Disjoint labeled / unlabeled split. Unlabeled samples hide all annotations.
pub fn split_labeled_unlabeled(samples: Vec<Sample>, labeled_fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if samples.is_empty() {
        return Err(Error::Empty("cannot split an empty dataset"));
    }
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "labeled fraction must lie in (0, 1], got {labeled_fraction}"
        )));
    }
    let n = samples.len();
    let n_labeled = ((labeled_fraction * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_labeled = vec![false; n];
    for &i in &order[..n_labeled] {
        is_labeled[i] = true;
    }
    let (mut labeled, mut unlabeled) = (Vec::new(), Vec::new());
    for (i, mut s) in samples.into_iter().enumerate() {
        if is_labeled[i] {
            labeled.push(s);
        } else {
            s.labeled = false;
            s.visible.clear();
            unlabeled.push(s);
        }
    }
    Ok((labeled, unlabeled))
}

/// Region zeroed by [`cutout`]: `(top, left, height, width)`.
pub type CutRegion = (usize, usize, usize, usize);

/// Picks the cutout rectangle: sides uniform in `[dim/8, dim/3]`.
pub fn cutout_region(height: usize, width: usize, rng: &mut impl Rng) -> CutRegion {
    let side = |dim: usize, rng: &mut dyn rand::RngCore| {
        let lo = (dim / 8).max(1);
        let hi = (dim / 3).max(lo);
        rng.gen_range(lo..=hi)
    };
    let ch = side(height, rng);
    let cw = side(width, rng);
    let top = rng.gen_range(0..=height - ch);
    let left = rng.gen_range(0..=width - cw);
    (top, left, ch, cw)
}

/// Zeroes every feature channel inside one random rectangle. Annotations are untouched.
pub fn cutout(sample: &Sample, rng: &mut impl Rng) -> (Sample, CutRegion) {
    let mut out = sample.clone();
    let region = cutout_features(&mut out.features, rng);
    (out, region)
}

pub(crate) fn cutout_features(features: &mut FeatureGrid, rng: &mut impl Rng) -> CutRegion {
    let (h, w, d) = (features.height, features.width, features.channels);
    let region = cutout_region(h, w, rng);
    let (top, left, ch, cw) = region;
    for r in top..top + ch {
        for c in left..left + cw {
            let p = r * w + c;
            features.data[p * d..(p + 1) * d].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    region
}

/// Seed of sample `index` in a dataset.
pub fn sample_seed(dataset_seed: u64, index: usize) -> u64 {
    dataset_seed ^ index as u64
}

/// Generates, drops annotations, and splits per the manifest.
pub fn generate_dataset(manifest: &DatasetManifest) -> Result<Dataset> {
    use rayon::prelude::*;
    manifest.validate()?;
    let samples: Vec<Sample> = (0..manifest.samples)
        .into_par_iter()
        .map(|i| {
            let mut s = generate_scene(sample_seed(manifest.seed, i), &manifest.scene)?;
            s.index = i;
            Ok(drop_annotations(&s, &manifest.dropout))
        })
        .collect::<Result<_>>()?;
    let samples = if manifest.labeled_fraction < 1.0 && !samples.is_empty() {
        let (labeled, unlabeled) = split_labeled_unlabeled(samples, manifest.labeled_fraction, manifest.seed)?;
        let mut all: Vec<Sample> = labeled.into_iter().chain(unlabeled).collect();
        all.sort_by_key(|s| s.index);
        all
    } else {
        samples
    };
    Ok(Dataset {
        manifest: manifest.clone(),
        samples,
    })
}
