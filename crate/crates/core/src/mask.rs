//! Dense and run-length mask representations.
//!
//! Dense masks are stored row-major: pixel `(row, col)` lives at index
//! `row * width + col`. Run-length masks use column-major order (pixel
//! `(row, col)` at `col * height + row`) and always start with a run of
//! zeros, which may be empty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn check_dims(height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!(
            "mask dimensions must be positive, got {height}x{width}"
        )));
    }
    if height * width != len {
        return Err(Error::LengthMismatch {
            expected: height * width,
            actual: len,
        });
    }
    Ok(())
}

pub(crate) fn ensure_same_dims(expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// A hard per-pixel instance or foreground mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        check_dims(height, width, bits.len())?;
        if let Some(bad) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::invalid(format!("mask bit must be 0 or 1, got {bad}")));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "mask dimensions must be positive");
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut mask = Self::zeros(height, width);
        for r in 0..height {
            for c in 0..width {
                mask.bits[r * width + c] = f(r, c) as u8;
            }
        }
        mask
    }

    pub fn from_bools(height: usize, width: usize, bits: &[bool]) -> Result<Self> {
        Self::new(height, width, bits.iter().map(|&b| b as u8).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.bits[row * self.width + col] = on as u8;
    }

    /// Number of set pixels.
    pub fn area(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_blank(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    /// The mask as a soft mask with values in {0, 1}.
    pub fn to_soft(&self) -> SoftMask {
        SoftMask {
            height: self.height,
            width: self.width,
            values: self.bits.iter().map(|&b| b as f64).collect(),
        }
    }
}

/// Per-pixel probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SoftMask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(height, width, values.len())?;
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "soft mask value must lie in [0, 1], got {bad}"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn uniform(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Column-major run-length encoding with a leading zero-run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub runs: Vec<usize>,
}

/// How the soft foreground estimate aggregates per-query mask predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftUnionMode {
    /// `logistic(sum_j m_j)` over confidences in `[0, 1]`. Never drops below 0.5.
    #[default]
    SigmoidOfConfidences,
    /// `logistic(sum_j logit(m_j))`, with confidences clamped before the logit.
    SigmoidOfLogits,
}

/// Per-pixel logical OR of the annotations (the foreground ground truth).
///
/// `dims` fixes the output shape, so an empty annotation list yields an
/// all-zero mask.
pub fn union_foreground(annotations: &[BinaryMask], dims: (usize, usize)) -> Result<BinaryMask> {
    let mut out = BinaryMask::zeros(dims.0, dims.1);
    for mask in annotations {
        ensure_same_dims(dims, mask.dims())?;
        for (o, &b) in out.bits.iter_mut().zip(&mask.bits) {
            *o |= b;
        }
    }
    Ok(out)
}

/// Soft foreground estimate from a set of predicted instance masks.
pub fn soft_union_estimate(masks: &[SoftMask], mode: SoftUnionMode) -> Result<SoftMask> {
    let first = masks.first().ok_or(Error::Empty("soft union needs at least one mask"))?;
    for m in masks {
        ensure_same_dims(first.dims(), m.dims())?;
    }
    let views: Vec<&[f64]> = masks.iter().map(|m| m.values()).collect();
    Ok(SoftMask {
        height: first.height,
        width: first.width,
        values: soft_union_values(&views, mode),
    })
}

/// Pre-activation of the soft union at every pixel.
pub(crate) fn soft_union_preactivation(masks: &[&[f64]], mode: SoftUnionMode) -> Vec<f64> {
    let len = masks[0].len();
    let mut acc = vec![0.0; len];
    for m in masks {
        match mode {
            SoftUnionMode::SigmoidOfConfidences => {
                for (a, &v) in acc.iter_mut().zip(m.iter()) {
                    *a += v;
                }
            }
            SoftUnionMode::SigmoidOfLogits => {
                for (a, &v) in acc.iter_mut().zip(m.iter()) {
                    let p = clamp_prob(v);
                    *a += (p / (1.0 - p)).ln();
                }
            }
        }
    }
    acc
}

pub(crate) fn soft_union_values(masks: &[&[f64]], mode: SoftUnionMode) -> Vec<f64> {
    soft_union_preactivation(masks, mode)
        .into_iter()
        .map(logistic)
        .collect()
}

/// Derivative of one mask's contribution to the union pre-activation with
/// respect to that mask's confidence.
#[inline]
pub(crate) fn soft_union_input_derivative(value: f64, mode: SoftUnionMode) -> f64 {
    match mode {
        SoftUnionMode::SigmoidOfConfidences => 1.0,
        SoftUnionMode::SigmoidOfLogits => {
            if value <= PROB_EPS || value >= 1.0 - PROB_EPS {
                // clamped region: the logit is locally constant
                0.0
            } else {
                1.0 / (value * (1.0 - value))
            }
        }
    }
}

/// Intersection over union; zero when both masks are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    ensure_same_dims(a.dims(), b.dims())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

pub fn rle_encode(mask: &BinaryMask) -> RleMask {
    let (h, w) = mask.dims();
    let mut runs = Vec::new();
    let mut current = 0u8;
    let mut count = 0usize;
    for c in 0..w {
        for r in 0..h {
            let b = mask.bits[r * w + c];
            if b != current {
                runs.push(count);
                count = 0;
                current = b;
            }
            count += 1;
        }
    }
    runs.push(count);
    RleMask {
        height: h,
        width: w,
        runs,
    }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask> {
    let (h, w) = (rle.height, rle.width);
    if h == 0 || w == 0 {
        return Err(Error::malformed(format!("rle dimensions must be positive, got {h}x{w}")));
    }
    let total: usize = rle.runs.iter().sum();
    if total != h * w {
        return Err(Error::malformed(format!(
            "rle runs sum to {total}, expected {}",
            h * w
        )));
    }
    let mut mask = BinaryMask::zeros(h, w);
    let mut idx = 0usize;
    for (i, &run) in rle.runs.iter().enumerate() {
        let bit = (i % 2) as u8;
        for k in idx..idx + run {
            let (c, r) = (k / h, k % h);
            mask.bits[r * w + c] = bit;
        }
        idx += run;
    }
    Ok(mask)
}

/// Hardens a soft mask: a pixel is set iff its value is strictly above `threshold`.
pub fn binarize(soft: &SoftMask, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!(
            "binarize threshold must lie in (0, 1), got {threshold}"
        )));
    }
    Ok(BinaryMask {
        height: soft.height,
        width: soft.width,
        bits: soft.values.iter().map(|&v| (v > threshold) as u8).collect(),
    })
}
