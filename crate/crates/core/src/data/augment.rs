use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature-space stand-ins for RandAugment's photometric operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentOp {
    GaussianNoise,
    FeatureScaling,
    FeatureDropout,
    IntensityShift,
    WindowPermutation,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 5] = [
        AugmentOp::GaussianNoise,
        AugmentOp::FeatureScaling,
        AugmentOp::FeatureDropout,
        AugmentOp::IntensityShift,
        AugmentOp::WindowPermutation,
    ];
}

/// Longest permuted window, reached at magnitude 1.
const MAX_WINDOW: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    pub num_ops: usize,
    pub magnitude: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            num_ops: 2,
            magnitude: 0.3,
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.magnitude) {
            return Err(Error::Config(format!(
                "augmentation magnitude must lie in [0, 1], got {}",
                self.magnitude
            )));
        }
        Ok(())
    }
}

/// Applies one op in place at magnitude `m`. Every op is the identity at `m == 0`.
pub fn apply_op(x: &mut [f64], op: AugmentOp, m: f64, rng: &mut impl Rng) {
    match op {
        AugmentOp::GaussianNoise => {
            for v in x.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += m * z;
            }
        }
        AugmentOp::FeatureScaling => {
            for v in x.iter_mut() {
                *v *= 1.0 + m * rng.random_range(-1.0..1.0);
            }
        }
        AugmentOp::FeatureDropout => {
            let p = 0.5 * m;
            for v in x.iter_mut() {
                if rng.random::<f64>() < p {
                    *v = 0.0;
                }
            }
        }
        AugmentOp::IntensityShift => {
            let shift = m * rng.random_range(-1.0..1.0);
            for v in x.iter_mut() {
                *v += shift;
            }
        }
        AugmentOp::WindowPermutation => {
            let w = (1 + (m * MAX_WINDOW as f64).floor() as usize).min(x.len());
            if w > 1 {
                let start = rng.random_range(0..=x.len() - w);
                x[start..start + w].shuffle(rng);
            }
        }
    }
}

/// Draws `num_ops` ops uniformly (with replacement) and applies them in order.
pub fn rand_augment(x: &[f64], policy: &AugmentationPolicy, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = x.to_vec();
    for _ in 0..policy.num_ops {
        let op = AugmentOp::ALL[rng.random_range(0..AugmentOp::ALL.len())];
        apply_op(&mut out, op, policy.magnitude, rng);
    }
    out
}
