//! Three-branch linear-logistic head over per-pixel features.
//!
//! Flat parameter layout, `d` = feature channels, `N` = queries:
//!
//! | range                     | contents                         |
//! |---------------------------|----------------------------------|
//! | `[0, N*d)`                | query vectors, query-major       |
//! | `[N*d, 2*N*d)`            | objectness vectors, query-major  |
//! | `[2*N*d, (2N+1)*d)`       | foreground vector                |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{logistic, SoftMask};

/// Pixel-major feature grid: channel `c` of pixel `p` is `data[p * channels + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("feature grid dimensions must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(Error::LengthMismatch {
                expected: height * width * channels,
                actual: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.channels];
        for p in 0..self.pixels() {
            for (a, v) in acc.iter_mut().zip(self.pixel(p)) {
                *a += v;
            }
        }
        let n = self.pixels() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// The three branch outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub masks: Vec<SoftMask>,
    pub scores: Vec<f64>,
    pub foreground: SoftMask,
}

/// Loss gradient with respect to every branch output.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrad {
    pub masks: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub foreground: Vec<f64>,
}

impl PredictionGrad {
    pub fn zeros(queries: usize, pixels: usize) -> Self {
        Self {
            masks: vec![vec![0.0; pixels]; queries],
            scores: vec![0.0; queries],
            foreground: vec![0.0; pixels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    /// Parameters start uniform in `[-scale, scale]`.
    pub scale: f64,
    /// Added to the bias channel of every query vector.
    pub mask_bias: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            scale: 0.1,
            mask_bias: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    num_queries: usize,
    dim: usize,
    params: Vec<f64>,
}

impl ToyModel {
    pub fn param_count(num_queries: usize, dim: usize) -> usize {
        (2 * num_queries + 1) * dim
    }

    pub fn zeros(num_queries: usize, dim: usize) -> Self {
        Self {
            num_queries,
            dim,
            params: vec![0.0; Self::param_count(num_queries, dim)],
        }
    }

    pub fn from_params(num_queries: usize, dim: usize, params: Vec<f64>) -> Result<Self> {
        if num_queries == 0 || dim == 0 {
            return Err(Error::invalid("model needs at least one query and one channel"));
        }
        let expected = Self::param_count(num_queries, dim);
        if params.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: params.len(),
            });
        }
        Ok(Self {
            num_queries,
            dim,
            params,
        })
    }

    /// Uniform random init. The last feature channel is assumed to be the bias.
    pub fn init(num_queries: usize, dim: usize, seed: u64, init: &InitConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::zeros(num_queries, dim);
        for p in model.params.iter_mut() {
            *p = rng.gen_range(-init.scale..=init.scale);
        }
        for j in 0..num_queries {
            model.params[j * dim + dim - 1] += init.mask_bias;
        }
        model
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn query(&self, j: usize) -> &[f64] {
        &self.params[j * self.dim..(j + 1) * self.dim]
    }

    pub fn objectness(&self, j: usize) -> &[f64] {
        let off = self.num_queries * self.dim;
        &self.params[off + j * self.dim..off + (j + 1) * self.dim]
    }

    pub fn foreground_vector(&self) -> &[f64] {
        let off = 2 * self.num_queries * self.dim;
        &self.params[off..off + self.dim]
    }

    fn check_features(&self, features: &FeatureGrid) -> Result<()> {
        if features.channels != self.dim {
            return Err(Error::LengthMismatch {
                expected: self.dim,
                actual: features.channels,
            });
        }
        Ok(())
    }

    /// Runs all three branches.
    pub fn forward(&self, features: &FeatureGrid) -> Result<PredictionSet> {
        self.check_features(features)?;
        let (h, w) = (features.height, features.width);
        let pixels = features.pixels();
        let masks = (0..self.num_queries)
            .map(|j| {
                let q = self.query(j);
                let values = (0..pixels).map(|p| logistic(dot(q, features.pixel(p)))).collect();
                SoftMask::new(h, w, values)
            })
            .collect::<Result<Vec<_>>>()?;
        let mean = features.mean();
        let scores = (0..self.num_queries)
            .map(|j| logistic(dot(self.objectness(j), &mean)))
            .collect();
        let fv = self.foreground_vector();
        let foreground = SoftMask::new(
            h,
            w,
            (0..pixels).map(|p| logistic(dot(fv, features.pixel(p)))).collect(),
        )?;
        Ok(PredictionSet {
            masks,
            scores,
            foreground,
        })
    }

    /// Chains output gradients through the logistic heads into the flat layout.
    pub fn backward(&self, features: &FeatureGrid, pred: &PredictionSet, grad: &PredictionGrad) -> Result<Vec<f64>> {
        self.check_features(features)?;
        let d = self.dim;
        let n = self.num_queries;
        let mut out = vec![0.0; self.params.len()];
        let pixels = features.pixels();

        for j in 0..n {
            let m = pred.masks[j].values();
            let g = &grad.masks[j];
            let slot = &mut out[j * d..(j + 1) * d];
            for p in 0..pixels {
                let coef = g[p] * m[p] * (1.0 - m[p]);
                if coef != 0.0 {
                    axpy(slot, coef, features.pixel(p));
                }
            }
        }

        let mean = features.mean();
        for j in 0..n {
            let s = pred.scores[j];
            let coef = grad.scores[j] * s * (1.0 - s);
            axpy(&mut out[(n + j) * d..(n + j + 1) * d], coef, &mean);
        }

        let f = pred.foreground.values();
        let slot = &mut out[2 * n * d..(2 * n + 1) * d];
        for p in 0..pixels {
            let coef = grad.foreground[p] * f[p] * (1.0 - f[p]);
            if coef != 0.0 {
                axpy(slot, coef, features.pixel(p));
            }
        }
        Ok(out)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
