//! Three-branch model: each branch is an MLP backbone followed by a
//! bias-free cosine classifier. Inference averages the branch embeddings.

mod checkpoint;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    mix_rows, rand_augment, reverse_mix_rows, AugmentationPolicy, LabeledSample, Malignancy,
    MixupTriple,
};
use crate::diffcore::{sgd_step, Graph, OptimizerState, Param, Tensor, Var};
use crate::error::{Error, Result};
use crate::loss::{SphereLoss, Targets};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_BLOB, CHECKPOINT_MANIFEST};

/// Norm floor used by the cosine classifier.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateKind {
    /// RandAugment-style perturbation of single samples.
    Clean,
    /// `lambda * x_i + (1 - lambda) * x_j`.
    Mix,
    /// `(1 - lambda) * x_i + lambda * x_j`.
    Rmix,
}

impl StateKind {
    pub fn name(self) -> &'static str {
        match self {
            StateKind::Clean => "clean",
            StateKind::Mix => "mix",
            StateKind::Rmix => "rmix",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriAugConfig {
    pub embed_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub cosine_scale: f64,
    pub share_backbone: bool,
    pub states_enabled: [StateKind; 3],
}

impl Default for TriAugConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_sizes: vec![128, 64],
            cosine_scale: 16.0,
            share_backbone: false,
            states_enabled: [StateKind::Clean, StateKind::Mix, StateKind::Rmix],
        }
    }
}

impl TriAugConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        if let Some(&smallest) = self.hidden_sizes.iter().min() {
            if self.embed_dim > smallest {
                return Err(Error::Config(format!(
                    "embed_dim {} exceeds the smallest hidden size {smallest}",
                    self.embed_dim
                )));
            }
        }
        if !(self.cosine_scale > 0.0 && self.cosine_scale.is_finite()) {
            return Err(Error::Config("cosine_scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    weight: usize,
    bias: usize,
}

/// Owned batch of inputs and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
    pub y_star: Vec<Malignancy>,
}

impl Batch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a LabeledSample>) -> Self {
        let mut b = Batch {
            x: Vec::new(),
            y: Vec::new(),
            y_star: Vec::new(),
        };
        for s in samples {
            b.x.push(s.x.clone());
            b.y.push(s.y);
            b.y_star.push(s.y_star);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn targets(&self) -> Targets<'_> {
        Targets {
            y: &self.y,
            y_star: &self.y_star,
        }
    }

    /// Rows reordered so that row `n` is row `order[n]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Batch {
        Batch {
            x: order.iter().map(|&j| self.x[j].clone()).collect(),
            y: order.iter().map(|&j| self.y[j]).collect(),
            y_star: order.iter().map(|&j| self.y_star[j]).collect(),
        }
    }
}

/// Per-slot training losses of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub kinds: [StateKind; 3],
    pub per_state: [f64; 3],
    pub total: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriAugModel {
    config: TriAugConfig,
    input_dim: usize,
    num_classes: usize,
    params: Vec<Param>,
    backbones: Vec<Vec<Layer>>,
    classifiers: [usize; 3],
}

/// Parameter leaves of one model recorded on a graph.
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    /// Leaves in parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl TriAugModel {
    /// Zero-valued parameter layout for `config`.
    fn layout(config: TriAugConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 || num_classes < 2 {
            return Err(Error::Config("need input_dim > 0 and at least two classes".into()));
        }
        let mut params = Vec::new();
        let n_backbones = if config.share_backbone { 1 } else { 3 };
        let mut backbones = Vec::with_capacity(n_backbones);
        for b in 0..n_backbones {
            let mut layers = Vec::new();
            let mut fan_in = input_dim;
            let widths = config.hidden_sizes.iter().copied().chain([config.embed_dim]);
            for (l, width) in widths.enumerate() {
                params.push(Param::new(
                    format!("backbone{b}.layer{l}.weight"),
                    Tensor::zeros(&[fan_in, width]),
                ));
                params.push(Param::new(format!("backbone{b}.layer{l}.bias"), Tensor::zeros(&[width])));
                layers.push(Layer {
                    weight: params.len() - 2,
                    bias: params.len() - 1,
                });
                fan_in = width;
            }
            backbones.push(layers);
        }
        let mut classifiers = [0; 3];
        for (i, slot) in classifiers.iter_mut().enumerate() {
            params.push(Param::new(
                format!("classifier{i}.weight"),
                Tensor::zeros(&[num_classes, config.embed_dim]),
            ));
            *slot = params.len() - 1;
        }
        Ok(Self {
            config,
            input_dim,
            num_classes,
            params,
            backbones,
            classifiers,
        })
    }

    /// He-normal weights, zero biases, standard-normal classifier rows.
    pub fn new(config: TriAugConfig, input_dim: usize, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut model = Self::layout(config, input_dim, num_classes)?;
        let classifiers = model.classifiers;
        for (i, p) in model.params.iter_mut().enumerate() {
            if classifiers.contains(&i) {
                for v in p.value.data_mut() {
                    *v = StandardNormal.sample(rng);
                }
            } else if p.value.shape().len() == 2 {
                let fan_in = p.value.shape()[0];
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                for v in p.value.data_mut() {
                    *v = normal.sample(rng);
                }
            }
        }
        Ok(model)
    }

    /// Rebuilds a model from named parameters (as stored in a checkpoint).
    pub fn from_params(config: TriAugConfig, input_dim: usize, num_classes: usize, params: Vec<Param>) -> Result<Self> {
        let template = Self::layout(config, input_dim, num_classes)?;
        if template.params.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for (t, p) in template.params.iter().zip(&params) {
            if t.name != p.name || t.value.shape() != p.value.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    p.name,
                    p.value.shape(),
                    t.name,
                    t.value.shape()
                )));
            }
            if !p.value.is_finite() {
                return Err(Error::NonFinite(format!("parameter `{}`", p.name)));
            }
        }
        Ok(Self { params, ..template })
    }

    pub fn config(&self) -> &TriAugConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn record_params(&self, graph: &mut Graph, trainable: bool) -> ParamVars {
        ParamVars(
            self.params
                .iter()
                .map(|p| {
                    if trainable {
                        graph.param(p.value.clone())
                    } else {
                        graph.constant(p.value.clone())
                    }
                })
                .collect(),
        )
    }

    pub fn classifier_weight(&self, branch: usize) -> &Tensor {
        &self.params[self.classifiers[branch]].value
    }

    fn backbone_of(&self, branch: usize) -> &[Layer] {
        if self.config.share_backbone {
            &self.backbones[0]
        } else {
            &self.backbones[branch]
        }
    }

    /// Records one branch on `graph`: returns `(embedding [N, D], logits [N, C])`.
    pub fn forward_branch(&self, graph: &mut Graph, vars: &ParamVars, branch: usize, x: Var) -> Result<(Var, Var)> {
        if branch >= 3 {
            return Err(Error::InvalidArgument(format!("branch {branch} out of range")));
        }
        let cols = graph.value(x).cols();
        if cols != self.input_dim {
            return Err(Error::DimensionMismatch {
                what: "model input",
                expected: self.input_dim,
                found: cols,
            });
        }
        let layers = self.backbone_of(branch);
        let mut h = x;
        for (l, layer) in layers.iter().enumerate() {
            let z = graph.matmul(h, vars.0[layer.weight])?;
            let z = graph.add_bias(z, vars.0[layer.bias])?;
            if !graph.value(z).is_finite() {
                return Err(Error::NonFinite(format!("branch {branch} layer {l} activation")));
            }
            h = if l + 1 < layers.len() { graph.relu(z) } else { z };
        }
        let logits = self.cosine_logits(graph, vars, branch, h)?;
        Ok((h, logits))
    }

    /// `s * cos(e, w_c)` for every class row `w_c`.
    fn cosine_logits(&self, graph: &mut Graph, vars: &ParamVars, branch: usize, e: Var) -> Result<Var> {
        let en = graph.l2_normalize_floored(e, NORM_FLOOR)?;
        let wn = graph.l2_normalize_floored(vars.0[self.classifiers[branch]], NORM_FLOOR)?;
        let wt = graph.transpose(wn)?;
        let cos = graph.matmul(en, wt)?;
        Ok(graph.scale(cos, self.config.cosine_scale))
    }

    fn input(&self, graph: &mut Graph, x: &[Vec<f64>]) -> Result<Var> {
        if x.is_empty() {
            return Err(Error::InvalidArgument("empty input batch".into()));
        }
        Ok(graph.constant(Tensor::from_rows(x)?))
    }

    /// Embedding (pre-normalization backbone output) and logits of one branch.
    pub fn forward_state(&self, branch: usize, x: &[Vec<f64>]) -> Result<(Tensor, Tensor)> {
        let mut graph = Graph::new();
        let vars = self.record_params(&mut graph, false);
        let xv = self.input(&mut graph, x)?;
        let (e, g) = self.forward_branch(&mut graph, &vars, branch, xv)?;
        Ok((graph.value(e).clone(), graph.value(g).clone()))
    }

    /// Averaged branch embeddings and averaged branch logits, on the raw input.
    pub fn infer(&self, x: &[Vec<f64>]) -> Result<(Tensor, Tensor)> {
        let mut graph = Graph::new();
        let vars = self.record_params(&mut graph, false);
        let xv = self.input(&mut graph, x)?;
        let (e, g) = self.averaged(&mut graph, &vars, xv)?;
        Ok((graph.value(e).clone(), graph.value(g).clone()))
    }

    /// Records the three branches on `x` and averages embeddings and logits.
    pub fn averaged(&self, graph: &mut Graph, vars: &ParamVars, x: Var) -> Result<(Var, Var)> {
        let mut es = Vec::with_capacity(3);
        let mut gs = Vec::with_capacity(3);
        for b in 0..3 {
            let (e, g) = self.forward_branch(graph, vars, b, x)?;
            es.push(e);
            gs.push(g);
        }
        let e = graph.add(es[0], es[1])?;
        let e = graph.add(e, es[2])?;
        let g = graph.add(gs[0], gs[1])?;
        let g = graph.add(g, gs[2])?;
        Ok((graph.scale(e, 1.0 / 3.0), graph.scale(g, 1.0 / 3.0)))
    }

    /// `f(x) = (f_1(x) + f_2(x) + f_3(x)) / 3`.
    pub fn embed(&self, x: &[Vec<f64>]) -> Result<Tensor> {
        Ok(self.infer(x)?.0)
    }

    /// Argmax of the averaged logits.
    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<usize>> {
        let (_, g) = self.infer(x)?;
        Ok((0..g.rows()).map(|r| argmax(g.row(r))).collect())
    }

    /// Loss of each slot for one batch, recorded on `graph` with trainable
    /// parameters `vars`. Clean slots draw their own augmentation; mix and
    /// rmix slots share `triple`.
    pub fn record_losses(
        &self,
        graph: &mut Graph,
        vars: &ParamVars,
        batch: &Batch,
        triple: &MixupTriple,
        loss: &SphereLoss,
        policy: &AugmentationPolicy,
        rng: &mut impl Rng,
    ) -> Result<[Var; 3]> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if triple.partner.len() != batch.len() {
            return Err(Error::InvalidArgument("mixup pairing does not match the batch".into()));
        }
        let partner = batch.permuted(&triple.partner);
        let mut out = Vec::with_capacity(3);
        for (slot, kind) in self.config.states_enabled.iter().enumerate() {
            let l = match kind {
                StateKind::Clean => {
                    let rows: Vec<Vec<f64>> = batch.x.iter().map(|x| rand_augment(x, policy, rng)).collect();
                    let xv = self.input(graph, &rows)?;
                    let (_, g) = self.forward_branch(graph, vars, slot, xv)?;
                    loss.state_loss(graph, g, batch.targets())?.l_bs
                }
                StateKind::Mix => self.record_mix(graph, vars, slot, batch, &partner, triple.lambda, loss)?,
                StateKind::Rmix => self.record_reverse_mix(graph, vars, slot, batch, &partner, triple.lambda, loss)?,
            };
            out.push(l);
        }
        Ok([out[0], out[1], out[2]])
    }

    /// `lambda * L_bs(y_first) + (1 - lambda) * L_bs(y_second)` on the
    /// branch output for `lambda * x_first + (1 - lambda) * x_second`.
    #[allow(clippy::too_many_arguments)]
    pub fn record_mix(
        &self,
        graph: &mut Graph,
        vars: &ParamVars,
        branch: usize,
        first: &Batch,
        second: &Batch,
        lambda: f64,
        loss: &SphereLoss,
    ) -> Result<Var> {
        let xv = self.input(graph, &mix_rows(&first.x, &second.x, lambda)?)?;
        let (_, g) = self.forward_branch(graph, vars, branch, xv)?;
        loss.mixed_loss(graph, g, first.targets(), second.targets(), lambda)
    }

    /// `(1 - lambda) * L_bs(y_first) + lambda * L_bs(y_second)` on the
    /// branch output for `(1 - lambda) * x_first + lambda * x_second`.
    #[allow(clippy::too_many_arguments)]
    pub fn record_reverse_mix(
        &self,
        graph: &mut Graph,
        vars: &ParamVars,
        branch: usize,
        first: &Batch,
        second: &Batch,
        lambda: f64,
        loss: &SphereLoss,
    ) -> Result<Var> {
        let xv = self.input(graph, &reverse_mix_rows(&first.x, &second.x, lambda)?)?;
        let (_, g) = self.forward_branch(graph, vars, branch, xv)?;
        let a = loss.state_loss(graph, g, first.targets())?.l_bs;
        let b = loss.state_loss(graph, g, second.targets())?.l_bs;
        let a = graph.scale(a, 1.0 - lambda);
        let b = graph.scale(b, lambda);
        graph.add(a, b)
    }

    /// Value of [`record_mix`](Self::record_mix) for one branch.
    pub fn mixup_loss(&self, branch: usize, first: &Batch, second: &Batch, lambda: f64, loss: &SphereLoss) -> Result<f64> {
        let mut graph = Graph::new();
        let vars = self.record_params(&mut graph, false);
        let l = self.record_mix(&mut graph, &vars, branch, first, second, lambda, loss)?;
        Ok(graph.value(l).item())
    }

    /// Value of [`record_reverse_mix`](Self::record_reverse_mix) for one branch.
    pub fn reverse_mixup_loss(
        &self,
        branch: usize,
        first: &Batch,
        second: &Batch,
        lambda: f64,
        loss: &SphereLoss,
    ) -> Result<f64> {
        let mut graph = Graph::new();
        let vars = self.record_params(&mut graph, false);
        let l = self.record_reverse_mix(&mut graph, &vars, branch, first, second, lambda, loss)?;
        Ok(graph.value(l).item())
    }

    /// Slot losses without updating anything.
    pub fn state_losses(
        &self,
        batch: &Batch,
        triple: &MixupTriple,
        loss: &SphereLoss,
        policy: &AugmentationPolicy,
        rng: &mut impl Rng,
    ) -> Result<StepLosses> {
        let mut graph = Graph::new();
        let vars = self.record_params(&mut graph, false);
        let ls = self.record_losses(&mut graph, &vars, batch, triple, loss, policy, rng)?;
        let per_state = ls.map(|v| graph.value(v).item());
        Ok(StepLosses {
            kinds: self.config.states_enabled,
            per_state,
            total: per_state.iter().sum(),
            lambda: triple.lambda,
        })
    }

    /// Gradient of `loss` for every parameter, zero where it has no effect.
    pub fn gradients(&self, graph: &mut Graph, vars: &ParamVars, loss: Var) -> Result<Vec<Tensor>> {
        let mut grads = graph.backward(loss)?;
        Ok(vars
            .0
            .iter()
            .zip(&self.params)
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect())
    }

    /// One SGD step on the unweighted sum of the three slot losses.
    pub fn train_step(
        &mut self,
        batch: &Batch,
        loss: &SphereLoss,
        policy: &AugmentationPolicy,
        opt: &mut OptimizerState,
        rng: &mut impl Rng,
    ) -> Result<StepLosses> {
        let triple = MixupTriple::sample(batch.len(), rng);
        self.train_step_with(batch, &triple, loss, policy, opt, rng)
    }

    pub fn train_step_with(
        &mut self,
        batch: &Batch,
        triple: &MixupTriple,
        loss: &SphereLoss,
        policy: &AugmentationPolicy,
        opt: &mut OptimizerState,
        rng: &mut impl Rng,
    ) -> Result<StepLosses> {
        let mut graph = Graph::new();
        let vars = self.record_params(&mut graph, true);
        let ls = self.record_losses(&mut graph, &vars, batch, triple, loss, policy, rng)?;
        let per_state = ls.map(|v| graph.value(v).item());
        let t = graph.add(ls[0], ls[1])?;
        let total = graph.add(t, ls[2])?;
        let total_value = graph.value(total).item();
        if !total_value.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let grads = self.gradients(&mut graph, &vars, total)?;
        sgd_step(&mut self.params, &grads, opt)?;
        Ok(StepLosses {
            kinds: self.config.states_enabled,
            per_state,
            total: total_value,
            lambda: triple.lambda,
        })
    }
}

/// `scale * cos(e_n, w_c)` for embeddings `e` `[N, D]` and class rows `w` `[C, D]`.
pub fn cosine_logits(e: &Tensor, w: &Tensor, scale: f64) -> Result<Tensor> {
    let mut graph = Graph::new();
    let ev = graph.constant(e.clone());
    let wv = graph.constant(w.clone());
    let en = graph.l2_normalize_floored(ev, NORM_FLOOR)?;
    let wn = graph.l2_normalize_floored(wv, NORM_FLOOR)?;
    let wt = graph.transpose(wn)?;
    let cos = graph.matmul(en, wt)?;
    let g = graph.scale(cos, scale);
    Ok(graph.value(g).clone())
}

/// `z = f / ||f||`.
pub fn normalize_embedding(f: &[f64]) -> Result<Vec<f64>> {
    let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Degenerate(format!("embedding norm is {n}")));
    }
    Ok(f.iter().map(|v| v / n).collect())
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
