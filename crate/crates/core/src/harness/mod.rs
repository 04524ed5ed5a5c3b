//! Experiment driver: training and evaluation on a dataset, and the
//! file-writing commands behind the CLI.

mod audit;
mod commands;
mod config;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{class_priors, Dataset, LabeledSample};
use crate::diffcore::OptimizerState;
use crate::error::{Error, Result};
use crate::loss::{MaskM, SphereLoss};
use crate::metrics::MetricReport;
use crate::model::{argmax, normalize_embedding, Batch, Checkpoint, StateKind, TriAugModel};
use crate::ood::{
    build_bank, calibrate_tau, clamp_k, knn_scores, msp_score, odin_scores, EmbeddingBank, MahalanobisModel,
    Origin, ScoreReport,
};

pub use audit::{Phase, SplitLoader, SplitName, SplitRead, SPLIT_RATIOS};
pub use commands::{
    cmd_compare, cmd_eval, cmd_gen_data, cmd_train, class_size_table, EvalSummary, RunRecord, BANK_FILE,
    CHECKPOINT_DIR, COMPARE_CSV, METRICS_CSV, METRICS_DOC, RUN_RECORD, SCORES_CSV, TRAIN_LOG,
};
pub use config::{AblationConfig, ExperimentConfig, OodSettings, TrainingConfig};

/// Mean slot losses over one epoch's steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub kinds: [StateKind; 3],
    pub l_s1: f64,
    pub l_mix: f64,
    pub l_rmix: f64,
    pub total: f64,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochLog>,
}

/// Trains on the loader's training split.
pub fn train(config: &ExperimentConfig, dataset: &Dataset, loader: &SplitLoader) -> Result<TrainOutcome> {
    config.validate()?;
    let classes = dataset.id_classes();
    loader.enter(Phase::Train);
    let train = loader.train();
    let priors = class_priors(train, classes)?;
    let mask = MaskM::from_malignancy(&dataset.malignancy[..classes])?;
    let loss_config = config.loss_config();
    let loss = SphereLoss::new(&priors, &mask, loss_config)?;

    let t = &config.training;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut model = TriAugModel::new(config.effective_model(), dataset.dim(), classes, &mut rng)?;
    let mut opt = OptimizerState::new(t.sgd)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(t.epochs);
    let mut step = 0usize;
    for epoch in 1..=t.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        let mut batches = 0usize;
        for chunk in order.chunks(t.batch_size) {
            let batch = Batch::from_samples(chunk.iter().map(|&i| &train[i]));
            let out = model
                .train_step(&batch, &loss, &t.augmentation, &mut opt, &mut rng)
                .map_err(|e| match e {
                    e if e.is_numeric() => Error::Diverged {
                        step,
                        what: e.to_string(),
                    },
                    e => e,
                })?;
            if !out.total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    what: format!("total loss {}", out.total),
                });
            }
            for (s, v) in sums.iter_mut().zip(out.per_state) {
                *s += v;
            }
            batches += 1;
            step += 1;
        }
        let n = batches as f64;
        let log = EpochLog {
            epoch,
            kinds: model.config().states_enabled,
            l_s1: sums[0] / n,
            l_mix: sums[1] / n,
            l_rmix: sums[2] / n,
            total: (sums[0] + sums[1] + sums[2]) / n,
        };
        log::info!(
            "epoch {epoch}/{}: L_S1 {:.4}  L_mix {:.4}  L_rmix {:.4}  total {:.4}",
            t.epochs,
            log.l_s1,
            log.l_mix,
            log.l_rmix,
            log.total
        );
        epochs.push(log);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            priors,
            mask,
            loss: loss_config,
            seed: t.seed,
        },
        epochs,
    })
}

/// OOD scorers in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    Msp,
    Odin,
    Mahalanobis,
    Knn,
}

impl Scorer {
    pub const ALL: [Scorer; 4] = [Scorer::Msp, Scorer::Odin, Scorer::Mahalanobis, Scorer::Knn];

    pub fn name(self) -> &'static str {
        match self {
            Scorer::Msp => "msp",
            Scorer::Odin => "odin",
            Scorer::Mahalanobis => "md",
            Scorer::Knn => "knn",
        }
    }
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "msp" => Ok(Scorer::Msp),
            "odin" => Ok(Scorer::Odin),
            "md" | "mahalanobis" => Ok(Scorer::Mahalanobis),
            "knn" | "ours" => Ok(Scorer::Knn),
            other => Err(Error::Config(format!("unknown scorer `{other}` (expected msp, odin, md, knn)"))),
        }
    }
}

/// Sorts and deduplicates a scorer selection into table order.
pub fn table_order(selection: &[Scorer]) -> Vec<Scorer> {
    Scorer::ALL.into_iter().filter(|s| selection.contains(s)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerResult {
    pub scorer: Scorer,
    pub tau: f64,
    /// Fraction of validation scores at or above `tau`.
    pub calibration_tpr: f64,
    pub report: MetricReport,
    pub test: ScoreReport,
}

pub struct EvalOutcome {
    pub bank: EmbeddingBank,
    pub k: usize,
    pub results: Vec<ScorerResult>,
}

/// Normalized averaged embeddings, averaged logits and raw inputs of a split.
struct Views {
    z: Vec<Vec<f64>>,
    logits: Vec<Vec<f64>>,
    x: Vec<Vec<f64>>,
}

fn views(model: &TriAugModel, samples: &[LabeledSample]) -> Result<Views> {
    let x: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
    let mut z = Vec::with_capacity(x.len());
    let mut logits = Vec::with_capacity(x.len());
    for (chunk, ss) in x.chunks(256).zip(samples.chunks(256)) {
        let (e, g) = model.infer(chunk)?;
        for (r, s) in ss.iter().enumerate() {
            z.push(normalize_embedding(e.row(r)).map_err(|_| {
                Error::Degenerate(format!("zero embedding for sample in group {}", s.group_id))
            })?);
            logits.push(g.row(r).to_vec());
        }
    }
    Ok(Views { z, logits, x })
}

struct Fitted<'a> {
    model: &'a TriAugModel,
    bank: &'a EmbeddingBank,
    k: usize,
    maha: Option<MahalanobisModel>,
    ood: &'a OodSettings,
}

impl Fitted<'_> {
    fn scores(&self, scorer: Scorer, v: &Views) -> Result<Vec<f64>> {
        match scorer {
            Scorer::Msp => Ok(v.logits.iter().map(|g| msp_score(g)).collect()),
            Scorer::Odin => odin_scores(self.model, &v.x, self.ood.odin),
            Scorer::Mahalanobis => {
                let m = self.maha.as_ref().expect("fitted when requested");
                v.z.iter().map(|z| m.score(z)).collect()
            }
            Scorer::Knn => knn_scores(&v.z, self.bank, self.k, self.ood.parallel),
        }
    }
}

/// Builds the bank, calibrates each scorer on the validation split, then
/// scores the ID and OOD test splits.
pub fn evaluate(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    ood: &OodSettings,
    scorers: &[Scorer],
    loader: &SplitLoader,
) -> Result<EvalOutcome> {
    let model = &checkpoint.model;
    if model.input_dim() != dataset.dim() {
        return Err(Error::DimensionMismatch {
            what: "checkpoint input dim vs dataset feature dim",
            expected: model.input_dim(),
            found: dataset.dim(),
        });
    }
    if model.num_classes() != dataset.id_classes() {
        return Err(Error::DimensionMismatch {
            what: "checkpoint classes vs dataset ID classes",
            expected: model.num_classes(),
            found: dataset.id_classes(),
        });
    }
    let scorers = table_order(scorers);
    if scorers.is_empty() {
        return Err(Error::Config("no scorer selected".into()));
    }

    loader.enter(Phase::Calibrate);
    let bank = build_bank(model, loader.train())?;
    let k = clamp_k(ood.k, bank.len());
    let maha = if scorers.contains(&Scorer::Mahalanobis) {
        Some(MahalanobisModel::fit(&bank, model.num_classes(), ood.mahalanobis_shrinkage)?)
    } else {
        None
    };
    let fitted = Fitted {
        model,
        bank: &bank,
        k,
        maha,
        ood,
    };
    let val = views(model, loader.val())?;
    let mut calibrated = Vec::with_capacity(scorers.len());
    for &s in &scorers {
        let scores = fitted.scores(s, &val)?;
        let tau = calibrate_tau(&scores, ood.tpr_target)?;
        let tpr = scores.iter().filter(|&&v| v >= tau).count() as f64 / scores.len() as f64;
        log::info!("{s}: tau = {tau} (validation TPR {tpr:.4})");
        calibrated.push((s, tau, tpr));
    }

    loader.enter(Phase::Test);
    let id_samples = loader.id_test();
    let id = views(model, id_samples)?;
    let ood_v = views(model, loader.ood_test())?;
    let predictions: Vec<usize> = id.logits.iter().map(|g| argmax(g)).collect();
    let truths: Vec<usize> = id_samples.iter().map(|s| s.y).collect();
    let ood_predictions: Vec<usize> = ood_v.logits.iter().map(|g| argmax(g)).collect();

    let mut results = Vec::with_capacity(scorers.len());
    for (s, tau, tpr) in calibrated {
        let id_scores = fitted.scores(s, &id)?;
        let ood_scores = fitted.scores(s, &ood_v)?;
        let report = MetricReport::compute(
            &id_scores,
            &ood_scores,
            &predictions,
            &truths,
            model.num_classes(),
            ood.tpr_target,
        )?;
        let all_scores: Vec<f64> = id_scores.iter().chain(&ood_scores).copied().collect();
        let origins: Vec<Origin> = std::iter::repeat_n(Origin::Id, id_scores.len())
            .chain(std::iter::repeat_n(Origin::Ood, ood_scores.len()))
            .collect();
        let predicted: Vec<usize> = predictions.iter().chain(&ood_predictions).copied().collect();
        let truth: Vec<Option<usize>> = truths
            .iter()
            .map(|&t| Some(t))
            .chain(std::iter::repeat_n(None, ood_scores.len()))
            .collect();
        let test = ScoreReport::new(tau, &all_scores, &origins, &predicted, &truth)?;
        results.push(ScorerResult {
            scorer: s,
            tau,
            calibration_tpr: tpr,
            report,
            test,
        });
    }
    Ok(EvalOutcome { bank, k, results })
}
