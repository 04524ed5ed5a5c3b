//! Balanced sphere loss.
//!
//! Two levels over the same prior-adjusted logits `g' = g + ln(pi)`:
//!
//! * subsphere: cross-entropy over the fine-grained ID classes;
//! * hypersphere: cross-entropy over two logits obtained by summing `g'`
//!   over malignant classes (index 0) and over benign classes (index 1).
//!
//! Both are normalized by the per-state batch size and summed over states.
//! The mixup wrappers weight the loss of one mixed forward pass by the two
//! source labels.

use serde::{Deserialize, Serialize};

use crate::data::{ClassPriors, Malignancy};
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};


/// Binary benign/malignant mask over the ID classes (1 = malignant).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskM {
    m: Vec<u8>,
}

impl MaskM {
    pub fn new(m: Vec<u8>) -> Result<Self> {
        if m.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask entries must be 0 or 1".into()));
        }
        if !m.contains(&0) || !m.contains(&1) {
            return Err(Error::Degenerate(
                "mask must contain at least one benign and one malignant class".into(),
            ));
        }
        Ok(Self { m })
    }

    pub fn from_malignancy(classes: &[Malignancy]) -> Result<Self> {
        Self::new(classes.iter().map(|c| c.as_u8()).collect())
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn entries(&self) -> &[u8] {
        &self.m
    }

    fn malignant(&self) -> Vec<f64> {
        self.m.iter().map(|&v| v as f64).collect()
    }

    fn benign(&self) -> Vec<f64> {
        self.m.iter().map(|&v| 1.0 - v as f64).collect()
    }
}

/// Index into the two hypersphere logits.
pub fn hyper_index(y_star: Malignancy) -> usize {
    match y_star {
        Malignancy::Malignant => 0,
        Malignancy::Benign => 1,
    }
}

/// How each hemisphere's logits are pooled into one hypersphere logit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperAggregation {
    /// Plain sum of adjusted logits.
    #[default]
    Sum,
    LogSumExp,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub prior_adjustment: bool,
    pub hypersphere: bool,
    pub aggregation: HyperAggregation,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            prior_adjustment: true,
            hypersphere: true,
            aggregation: HyperAggregation::Sum,
        }
    }
}

impl LossConfig {
    /// Unadjusted softmax cross-entropy only.
    pub fn cross_entropy() -> Self {
        Self {
            prior_adjustment: false,
            hypersphere: false,
            aggregation: HyperAggregation::Sum,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_h: f64,
    pub l_bs: f64,
}

/// Labels for one batch.
#[derive(Clone, Copy, Debug)]
pub struct Targets<'a> {
    pub y: &'a [usize],
    pub y_star: &'a [Malignancy],
}

/// `g'_c = g_c + ln(pi_c)`.
pub fn adjust_logits(g: &[f64], priors: &ClassPriors) -> Result<Vec<f64>> {
    if g.len() != priors.num_classes() {
        return Err(Error::DimensionMismatch {
            what: "adjust_logits",
            expected: priors.num_classes(),
            found: g.len(),
        });
    }
    if priors.pi.iter().any(|&p| p <= 0.0) {
        return Err(Error::InvalidArgument("zero class prior".into()));
    }
    Ok(g.iter().zip(priors.log_pi()).map(|(a, b)| a + b).collect())
}

/// Loss nodes recorded for one state.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_s: Var,
    pub l_h: Option<Var>,
    pub l_bs: Var,
}

/// Builds losses on a graph from raw `[N, C]` logits.
#[derive(Clone, Debug)]
pub struct SphereLoss {
    log_pi: Vec<f64>,
    mask: MaskM,
    config: LossConfig,
}

impl SphereLoss {
    pub fn new(priors: &ClassPriors, mask: &MaskM, config: LossConfig) -> Result<Self> {
        if priors.num_classes() != mask.len() {
            return Err(Error::DimensionMismatch {
                what: "class priors vs mask",
                expected: mask.len(),
                found: priors.num_classes(),
            });
        }
        if priors.pi.iter().any(|&p| p <= 0.0) {
            return Err(Error::InvalidArgument("zero class prior".into()));
        }
        Ok(Self {
            log_pi: priors.log_pi(),
            mask: mask.clone(),
            config,
        })
    }

    pub fn config(&self) -> &LossConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.mask.len()
    }

    /// `g + ln(pi)` when prior adjustment is on, else `g` itself.
    pub fn adjust(&self, graph: &mut Graph, logits: Var) -> Result<Var> {
        if !self.config.prior_adjustment {
            return Ok(logits);
        }
        let lp = graph.constant(Tensor::vector(self.log_pi.clone()));
        graph.add_bias(logits, lp)
    }

    /// `[N, 2]` hypersphere logits: malignant pool, then benign pool.
    pub fn hyper_logits(&self, graph: &mut Graph, adjusted: Var) -> Result<Var> {
        let (mal, ben) = (self.mask.malignant(), self.mask.benign());
        let (a, b) = match self.config.aggregation {
            HyperAggregation::Sum => (
                graph.masked_sum(adjusted, &mal)?,
                graph.masked_sum(adjusted, &ben)?,
            ),
            HyperAggregation::LogSumExp => (
                graph.masked_log_sum_exp(adjusted, &mal)?,
                graph.masked_log_sum_exp(adjusted, &ben)?,
            ),
        };
        graph.concat(&[a, b])
    }

    /// Mean negative log-likelihood of `index` under `softmax(v)`.
    fn mean_nll(graph: &mut Graph, v: Var, index: &[usize]) -> Result<Var> {
        let n = index.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let ls = graph.log_softmax(v);
        let picked = graph.pick(ls, index)?;
        let total = graph.sum(picked);
        Ok(graph.scale(total, -1.0 / n as f64))
    }

    /// Balanced sphere loss of one state's raw logits.
    pub fn state_loss(&self, graph: &mut Graph, logits: Var, targets: Targets<'_>) -> Result<LossVars> {
        let shape = graph.value(logits).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.num_classes() {
            return Err(Error::ShapeMismatch {
                op: "state_loss",
                left: shape,
                right: vec![targets.y.len(), self.num_classes()],
            });
        }
        if targets.y.len() != shape[0] || targets.y_star.len() != shape[0] {
            return Err(Error::InvalidArgument("label count differs from batch size".into()));
        }
        if let Some(&bad) = targets.y.iter().find(|&&y| y >= self.num_classes()) {
            return Err(Error::InvalidArgument(format!("label {bad} is not an ID class")));
        }
        let adjusted = self.adjust(graph, logits)?;
        let l_s = Self::mean_nll(graph, adjusted, targets.y)?;
        if !self.config.hypersphere {
            return Ok(LossVars {
                l_s,
                l_h: None,
                l_bs: l_s,
            });
        }
        let hyper = self.hyper_logits(graph, adjusted)?;
        let idx: Vec<usize> = targets.y_star.iter().map(|&m| hyper_index(m)).collect();
        let l_h = Self::mean_nll(graph, hyper, &idx)?;
        let l_bs = graph.add(l_h, l_s)?;
        Ok(LossVars {
            l_s,
            l_h: Some(l_h),
            l_bs,
        })
    }

    /// `lambda * L_bs(out, first) + (1 - lambda) * L_bs(out, second)` on one
    /// forward pass `logits` of a mixed batch.
    pub fn mixed_loss(
        &self,
        graph: &mut Graph,
        logits: Var,
        first: Targets<'_>,
        second: Targets<'_>,
        lambda: f64,
    ) -> Result<Var> {
        let a = self.state_loss(graph, logits, first)?.l_bs;
        let b = self.state_loss(graph, logits, second)?.l_bs;
        let a = graph.scale(a, lambda);
        let b = graph.scale(b, 1.0 - lambda);
        graph.add(a, b)
    }

    /// Balanced sphere loss over several states (one `[N, C]` logits tensor
    /// each), summed over states.
    pub fn evaluate(&self, logits_per_state: &[Tensor], targets: Targets<'_>) -> Result<LossBreakdown> {
        let mut graph = Graph::new();
        let mut out = LossBreakdown::default();
        for t in logits_per_state {
            let v = graph.constant(t.clone());
            let lv = self.state_loss(&mut graph, v, targets)?;
            out.l_s += graph.value(lv.l_s).item();
            if let Some(h) = lv.l_h {
                out.l_h += graph.value(h).item();
            }
        }
        out.l_bs = out.l_s + out.l_h;
        Ok(out)
    }
}

/// Subsphere loss from already-adjusted logits, one `[N, C]` tensor per state.
pub fn subsphere_loss(adjusted_per_state: &[Tensor], y: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for t in adjusted_per_state {
        let mut graph = Graph::new();
        let v = graph.constant(t.clone());
        let l = SphereLoss::mean_nll(&mut graph, v, y)?;
        total += graph.value(l).item();
    }
    Ok(total)
}

/// `[N, 2]` hypersphere logits from adjusted `[N, C]` logits.
pub fn hyper_logits(adjusted: &Tensor, mask: &MaskM, aggregation: HyperAggregation) -> Result<Tensor> {
    let mut graph = Graph::new();
    let v = graph.constant(adjusted.clone());
    let sl = SphereLoss {
        log_pi: vec![0.0; mask.len()],
        mask: mask.clone(),
        config: LossConfig {
            aggregation,
            ..LossConfig::default()
        },
    };
    let h = sl.hyper_logits(&mut graph, v)?;
    Ok(graph.value(h).clone())
}

/// Hypersphere loss from adjusted logits, one `[N, C]` tensor per state.
pub fn hypersphere_loss(
    adjusted_per_state: &[Tensor],
    y_star: &[Malignancy],
    mask: &MaskM,
    aggregation: HyperAggregation,
) -> Result<f64> {
    let idx: Vec<usize> = y_star.iter().map(|&m| hyper_index(m)).collect();
    let mut total = 0.0;
    for t in adjusted_per_state {
        let h = hyper_logits(t, mask, aggregation)?;
        let mut graph = Graph::new();
        let v = graph.constant(h);
        let l = SphereLoss::mean_nll(&mut graph, v, &idx)?;
        total += graph.value(l).item();
    }
    Ok(total)
}

/// Full breakdown from raw logits (one tensor per state).
pub fn balanced_sphere_loss(
    logits_per_state: &[Tensor],
    targets: Targets<'_>,
    priors: &ClassPriors,
    mask: &MaskM,
    config: LossConfig,
) -> Result<LossBreakdown> {
    SphereLoss::new(priors, mask, config)?.evaluate(logits_per_state, targets)
}
