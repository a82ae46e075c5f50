use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maps raw features to the representation both heads consume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureExtractor {
    /// Frozen encoder: heads see the precomputed features unchanged.
    Identity,
    /// One learnable hidden layer, `tanh(W x + b)`.
    Tanh(TanhLayer),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TanhLayer {
    /// `width x d`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TanhGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl TanhLayer {
    /// Gaussian weights with standard deviation `1/sqrt(d)`, zero bias.
    pub fn init(input_dim: usize, width: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (input_dim as f64).sqrt()).expect("valid std");
        TanhLayer {
            weights: Array2::from_shape_simple_fn((width, input_dim), || normal.sample(rng)),
            bias: Array1::zeros(width),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (x.dot(&self.weights.t()) + &self.bias).mapv(f64::tanh)
    }

    /// `out` is the forward output for `x`; `d_out` the loss gradient w.r.t. it.
    pub fn backward(&self, x: ArrayView2<f64>, out: &Array2<f64>, d_out: &Array2<f64>) -> TanhGrads {
        let d_pre = d_out * &out.mapv(|h| 1.0 - h * h);
        TanhGrads {
            weights: d_pre.t().dot(&x),
            bias: d_pre.sum_axis(Axis(0)),
        }
    }
}

impl FeatureExtractor {
    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            FeatureExtractor::Identity => input_dim,
            FeatureExtractor::Tanh(l) => l.weights.nrows(),
        }
    }

    pub fn is_learnable(&self) -> bool {
        matches!(self, FeatureExtractor::Tanh(_))
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            FeatureExtractor::Identity => Ok(x.to_owned()),
            FeatureExtractor::Tanh(l) => {
                if x.ncols() != l.weights.ncols() {
                    return Err(Error::Shape(format!(
                        "extractor expects {} features, got {}",
                        l.weights.ncols(),
                        x.ncols()
                    )));
                }
                Ok(l.forward(x))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn tanh_backward_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let layer = TanhLayer::init(3, 4, &mut rng);
        let x = Array2::from_shape_simple_fn((5, 3), || rng.gen_range(-2.0..2.0));
        let probe = Array2::from_shape_simple_fn((5, 4), || rng.gen_range(-1.0..1.0));
        // loss = sum(probe * tanh(Wx + b))
        let loss = |l: &TanhLayer| (l.forward(x.view()) * &probe).sum();
        let out = layer.forward(x.view());
        let g = layer.backward(x.view(), &out, &probe);
        let h = 1e-6;
        for idx in [(0, 0), (2, 1), (3, 2)] {
            let mut plus = layer.clone();
            plus.weights[idx] += h;
            let mut minus = layer.clone();
            minus.weights[idx] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!((fd - g.weights[idx]).abs() < 1e-7 * (1.0 + fd.abs()));
        }
        let mut plus = layer.clone();
        plus.bias[1] += h;
        let mut minus = layer.clone();
        minus.bias[1] -= h;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        assert!((fd - g.bias[1]).abs() < 1e-7 * (1.0 + fd.abs()));
    }

    #[test]
    fn identity_passes_through() {
        let x = ndarray::array![[1.0, 2.0]];
        assert_eq!(FeatureExtractor::Identity.forward(x.view()).unwrap(), x);
    }
}
