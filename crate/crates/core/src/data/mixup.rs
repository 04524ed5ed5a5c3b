use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};

/// One interpolation draw, shared by the mix and reversed-mix states of a
/// training step. Batched: `partner[n]` is the index mixed with sample `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupTriple {
    pub lambda: f64,
    pub partner: Vec<usize>,
}

impl MixupTriple {
    /// `lambda ~ Beta(1, 1)` and a uniformly random pairing of the batch.
    pub fn sample(batch: usize, rng: &mut impl Rng) -> Self {
        use rand::seq::SliceRandom;
        let lambda = sample_lambda(rng);
        let mut partner: Vec<usize> = (0..batch).collect();
        partner.shuffle(rng);
        Self { lambda, partner }
    }
}

pub fn sample_lambda(rng: &mut impl Rng) -> f64 {
    Beta::new(1.0, 1.0).expect("valid beta").sample(rng)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// `lambda * a + (1 - lambda) * b`.
pub fn mix(a: &[f64], b: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "mix",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let mu = 1.0 - lambda;
    Ok(a.iter().zip(b).map(|(x, y)| lambda * x + mu * y).collect())
}

/// `(1 - lambda) * a + lambda * b`.
pub fn reverse_mix(a: &[f64], b: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "reverse_mix",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let mu = 1.0 - lambda;
    Ok(a.iter().zip(b).map(|(x, y)| mu * x + lambda * y).collect())
}

/// Row-wise `mix(first[n], second[n], lambda)`.
pub fn mix_rows(first: &[Vec<f64>], second: &[Vec<f64>], lambda: f64) -> Result<Vec<Vec<f64>>> {
    first.iter().zip(second).map(|(a, b)| mix(a, b, lambda)).collect()
}

/// Row-wise `reverse_mix(first[n], second[n], lambda)`.
pub fn reverse_mix_rows(first: &[Vec<f64>], second: &[Vec<f64>], lambda: f64) -> Result<Vec<Vec<f64>>> {
    first.iter().zip(second).map(|(a, b)| reverse_mix(a, b, lambda)).collect()
}
