//! Post-hoc OOD scorers over a frozen model: k-th nearest neighbour distance
//! in the normalized embedding space, maximum softmax probability, ODIN and
//! Mahalanobis distance. Higher scores mean "more in-distribution".

mod bank;
mod mahalanobis;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSample;
use crate::diffcore::{log_sum_exp, Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{argmax, normalize_embedding, TriAugModel};

pub use bank::{read_bank, write_bank, BANK_MAGIC};
pub use mahalanobis::MahalanobisModel;

#[cfg(test)]
mod tests;

/// Rows per forward pass when embedding a split.
const CHUNK: usize = 256;

/// Unit-norm training embeddings with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBank {
    dim: usize,
    z: Vec<f64>,
    labels: Vec<u16>,
}

impl EmbeddingBank {
    /// Checks shape and unit norms (within 1e-5).
    pub fn new(dim: usize, z: Vec<f64>, labels: Vec<u16>) -> Result<Self> {
        if dim == 0 || z.len() != dim * labels.len() {
            return Err(Error::InvalidShape {
                shape: vec![labels.len(), dim],
                len: z.len(),
            });
        }
        let bank = Self { dim, z, labels };
        for i in 0..bank.len() {
            let n = bank.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if !((n - 1.0).abs() <= 1e-5) {
                return Err(Error::InvalidArgument(format!("bank row {i} has norm {n}")));
            }
        }
        Ok(bank)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.z[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.z.chunks_exact(self.dim)
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }
}

/// Averaged, normalized embeddings of `samples` on their raw inputs.
pub fn embed_samples(model: &TriAugModel, samples: &[LabeledSample]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let x: Vec<Vec<f64>> = chunk.iter().map(|s| s.x.clone()).collect();
        let e = model.embed(&x)?;
        for (r, s) in chunk.iter().enumerate() {
            let z = normalize_embedding(e.row(r)).map_err(|_| {
                Error::Degenerate(format!("zero embedding for sample in group {} (class {})", s.group_id, s.y))
            })?;
            out.push(z);
        }
    }
    Ok(out)
}

/// Bank of clean training embeddings.
pub fn build_bank(model: &TriAugModel, train: &[LabeledSample]) -> Result<EmbeddingBank> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training split".into()));
    }
    let zs = embed_samples(model, train)?;
    let labels = train
        .iter()
        .map(|s| u16::try_from(s.y).map_err(|_| Error::InvalidArgument(format!("label {} too large", s.y))))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingBank::new(model.embed_dim(), zs.concat(), labels)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `-d'_k`: the negated k-th smallest (1-indexed) distance to the bank.
pub fn knn_score(z: &[f64], bank: &EmbeddingBank, k: usize) -> Result<f64> {
    if z.len() != bank.dim() {
        return Err(Error::DimensionMismatch {
            what: "knn query",
            expected: bank.dim(),
            found: z.len(),
        });
    }
    if k == 0 || k > bank.len() {
        return Err(Error::KTooLarge { k, n: bank.len() });
    }
    let mut d: Vec<f64> = bank.rows().map(|r| euclidean(r, z)).collect();
    let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(-*kth)
}

/// `k` clamped to `n`, with a warning when it had to shrink.
pub fn clamp_k(k: usize, n: usize) -> usize {
    if k > n {
        log::warn!("k = {k} exceeds the bank size {n}; using k = {n}");
        n
    } else {
        k.max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnnConfig {
    pub k: usize,
    /// Score several queries at once on the rayon pool. Each query's scan is
    /// sequential, so results are identical to the serial path.
    pub parallel: bool,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self { k: 1000, parallel: false }
    }
}

/// KNN scores for many queries.
pub fn knn_scores(queries: &[Vec<f64>], bank: &EmbeddingBank, k: usize, parallel: bool) -> Result<Vec<f64>> {
    if parallel {
        queries.par_iter().map(|z| knn_score(z, bank, k)).collect()
    } else {
        queries.iter().map(|z| knn_score(z, bank, k)).collect()
    }
}

/// Largest `tau` with `|{s >= tau}| / n >= tpr_target`.
pub fn calibrate_tau(scores: &[f64], tpr_target: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no calibration scores".into()));
    }
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::InvalidArgument(format!("tpr target {tpr_target} outside (0, 1]")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("calibration scores".into()));
    }
    if scores.len() < 20 {
        log::warn!("calibrating on only {} scores", scores.len());
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let c = min_accepted(n, tpr_target);
    Ok(sorted[n - c])
}

/// Smallest count `c` with `c / n >= target`.
pub(crate) fn min_accepted(n: usize, target: f64) -> usize {
    let mut c = ((target * n as f64).ceil() as usize).min(n);
    while c > 0 && (c - 1) as f64 / n as f64 >= target {
        c -= 1;
    }
    while c < n && (c as f64 / n as f64) < target {
        c += 1;
    }
    c.max(1)
}

/// `max_c softmax(g)_c`.
pub fn msp_score(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (m - log_sum_exp(logits)).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdinConfig {
    pub temperature: f64,
    pub epsilon: f64,
}

impl Default for OdinConfig {
    fn default() -> Self {
        Self {
            temperature: 1000.0,
            epsilon: 1e-3,
        }
    }
}

/// ODIN: temperature-scaled MSP of the averaged logits after one signed
/// gradient step on the input that raises the top-class log-probability.
pub fn odin_scores(model: &TriAugModel, x: &[Vec<f64>], config: OdinConfig) -> Result<Vec<f64>> {
    if !(config.temperature > 0.0) || !(config.epsilon >= 0.0) {
        return Err(Error::InvalidArgument("ODIN needs T > 0 and epsilon >= 0".into()));
    }
    let mut out = Vec::with_capacity(x.len());
    for chunk in x.chunks(CHUNK) {
        let perturbed = if config.epsilon == 0.0 {
            chunk.to_vec()
        } else {
            let mut graph = Graph::new();
            let vars = model.record_params(&mut graph, false);
            let xv = graph.param(Tensor::from_rows(chunk)?);
            let (_, g) = model.averaged(&mut graph, &vars, xv)?;
            let top: Vec<usize> = (0..chunk.len()).map(|r| argmax(graph.value(g).row(r))).collect();
            let scaled = graph.scale(g, 1.0 / config.temperature);
            let ls = graph.log_softmax(scaled);
            let picked = graph.pick(ls, &top)?;
            let total = graph.sum(picked);
            let grads = graph.backward(total)?;
            let gx = grads
                .get(xv)
                .ok_or_else(|| Error::InvalidArgument("no input gradient".into()))?;
            chunk
                .iter()
                .enumerate()
                .map(|(r, row)| {
                    row.iter()
                        .zip(gx.row(r))
                        .map(|(v, gr)| v + config.epsilon * sign(*gr))
                        .collect()
                })
                .collect()
        };
        let (_, g) = model.infer(&perturbed)?;
        for r in 0..g.rows() {
            let scaled: Vec<f64> = g.row(r).iter().map(|v| v * (1.0 / config.temperature)).collect();
            out.push(msp_score(&scaled));
        }
    }
    Ok(out)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Id,
    Ood,
}

/// One scored test sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub decision: Origin,
    pub origin: Origin,
    pub predicted: usize,
    /// Only for ID samples.
    pub truth: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub tau: f64,
    pub samples: Vec<ScoredSample>,
}

impl ScoreReport {
    /// Decisions are `Id` exactly when `score >= tau`.
    pub fn new(
        tau: f64,
        scores: &[f64],
        origins: &[Origin],
        predicted: &[usize],
        truths: &[Option<usize>],
    ) -> Result<Self> {
        let n = scores.len();
        if origins.len() != n || predicted.len() != n || truths.len() != n {
            return Err(Error::InvalidArgument("score report columns differ in length".into()));
        }
        let samples = (0..n)
            .map(|i| ScoredSample {
                score: scores[i],
                decision: if scores[i] >= tau { Origin::Id } else { Origin::Ood },
                origin: origins[i],
                predicted: predicted[i],
                truth: truths[i],
            })
            .collect();
        Ok(Self { tau, samples })
    }

    /// Fraction of ID samples accepted.
    pub fn tpr(&self) -> f64 {
        rate(&self.samples, Origin::Id)
    }

    /// Fraction of OOD samples accepted.
    pub fn fpr(&self) -> f64 {
        rate(&self.samples, Origin::Ood)
    }
}

fn rate(samples: &[ScoredSample], origin: Origin) -> f64 {
    let (hit, total) = samples
        .iter()
        .filter(|s| s.origin == origin)
        .fold((0usize, 0usize), |(h, t), s| (h + (s.decision == Origin::Id) as usize, t + 1));
    if total == 0 {
        f64::NAN
    } else {
        hit as f64 / total as f64
    }
}
