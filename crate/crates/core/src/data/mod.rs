//! Synthetic long-tailed benchmark: generation, grouped splitting, class
//! priors, feature-space augmentation and mixup pairs.

mod augment;
mod io;
mod mixup;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{apply_op, rand_augment, AugmentOp, AugmentationPolicy};
pub use io::{read_dataset, write_dataset, MANIFEST_FILE, SAMPLES_FILE};
pub use mixup::{mix, mix_rows, reverse_mix, reverse_mix_rows, sample_lambda, MixupTriple};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Malignancy {
    Benign,
    Malignant,
}

impl Malignancy {
    pub fn as_u8(self) -> u8 {
        match self {
            Malignancy::Benign => 0,
            Malignancy::Malignant => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Malignancy::Benign),
            1 => Some(Malignancy::Malignant),
            _ => None,
        }
    }
}

/// Generator parameters. Class sizes fall geometrically from
/// `head_class_size` so that head/tail equals `imbalance_ratio`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub id_classes: usize,
    pub ood_classes: usize,
    pub feature_dim: usize,
    pub imbalance_ratio: f64,
    pub head_class_size: usize,
    /// Radius of the sphere holding the class centers.
    pub cluster_separation: f64,
    /// Per-coordinate standard deviation around a center.
    pub intra_class_spread: f64,
    pub benign_fraction: f64,
    /// How many OOD classes sit between two ID centers; the rest are far out.
    pub near_ood_classes: usize,
    pub ood_class_size: usize,
    /// Far-OOD centers lie at this multiple of `cluster_separation`.
    pub far_ood_distance: f64,
    pub min_group_size: usize,
    pub max_group_size: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            id_classes: 8,
            ood_classes: 5,
            feature_dim: 64,
            imbalance_ratio: 47.975,
            head_class_size: 960,
            cluster_separation: 10.0,
            intra_class_spread: 1.0,
            benign_fraction: 0.75,
            near_ood_classes: 2,
            ood_class_size: 90,
            far_ood_distance: 2.0,
            min_group_size: 2,
            max_group_size: 5,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.id_classes < 2 {
            return bad(format!("id_classes must be >= 2, got {}", self.id_classes));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        if !(self.imbalance_ratio >= 1.0 && self.imbalance_ratio.is_finite()) {
            return bad(format!("imbalance_ratio must be >= 1, got {}", self.imbalance_ratio));
        }
        if !(self.cluster_separation > 0.0 && self.intra_class_spread > 0.0) {
            return bad("cluster_separation and intra_class_spread must be positive".into());
        }
        let malignant = self.malignant_count();
        if malignant == 0 || malignant >= self.id_classes {
            return bad(format!(
                "benign_fraction {} leaves no benign or no malignant ID class",
                self.benign_fraction
            ));
        }
        if self.near_ood_classes > self.ood_classes {
            return bad("near_ood_classes exceeds ood_classes".into());
        }
        if self.ood_classes > 0 && self.ood_class_size == 0 {
            return bad("ood_class_size must be positive".into());
        }
        if self.min_group_size == 0 || self.min_group_size > self.max_group_size {
            return bad("group sizes must satisfy 1 <= min <= max".into());
        }
        if self.id_classes + self.ood_classes > u16::MAX as usize {
            return bad("too many classes".into());
        }
        Ok(())
    }

    fn malignant_count(&self) -> usize {
        let benign = (self.benign_fraction * self.id_classes as f64).round() as isize;
        (self.id_classes as isize - benign).max(0) as usize
    }

    /// Coarse label of each ID class. Malignant classes take the odd
    /// indices first, so both hemispheres contain head and tail classes.
    pub fn id_malignancy(&self) -> Vec<Malignancy> {
        let mut out = vec![Malignancy::Benign; self.id_classes];
        let mut left = self.malignant_count();
        let order = (1..self.id_classes).step_by(2).chain((0..self.id_classes).step_by(2));
        for c in order {
            if left == 0 {
                break;
            }
            out[c] = Malignancy::Malignant;
            left -= 1;
        }
        out
    }

    /// `n_c = round(head * r^c)` with `r = ratio^(-1/(C-1))`.
    pub fn class_sizes(&self) -> Result<Vec<usize>> {
        let c = self.id_classes;
        let r = self.imbalance_ratio.powf(-1.0 / (c as f64 - 1.0));
        let sizes: Vec<usize> = (0..c)
            .map(|i| (self.head_class_size as f64 * r.powi(i as i32)).round() as usize)
            .collect();
        if let Some(pos) = sizes.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!(
                "class {pos} rounds to zero samples; increase head_class_size (now {})",
                self.head_class_size
            )));
        }
        Ok(sizes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub y: usize,
    pub y_star: Malignancy,
    pub group_id: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    /// Coarse label of every class, ID classes first.
    pub malignancy: Vec<Malignancy>,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn id_classes(&self) -> usize {
        self.spec.id_classes
    }

    pub fn ood_classes(&self) -> usize {
        self.spec.ood_classes
    }

    pub fn is_ood(&self, s: &LabeledSample) -> bool {
        s.y >= self.spec.id_classes
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.spec.id_classes + self.spec.ood_classes];
        for s in &self.samples {
            counts[s.y] += 1;
        }
        counts
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

/// Center on the sphere of radius `radius`, in the hemisphere of `m`
/// (sign of the first coordinate).
fn hemisphere_center(rng: &mut ChaCha8Rng, dim: usize, radius: f64, m: Malignancy) -> Vec<f64> {
    let mut u = unit_direction(rng, dim);
    let sign = match m {
        Malignancy::Malignant => 1.0,
        Malignancy::Benign => -1.0,
    };
    if dim > 1 {
        u[0] = sign * u[0].abs();
    } else {
        u[0] = sign;
    }
    scaled(&u, radius)
}

fn emit_class(
    rng: &mut ChaCha8Rng,
    spec: &DatasetSpec,
    center: &[f64],
    y: usize,
    y_star: Malignancy,
    n: usize,
    next_group: &mut u64,
    out: &mut Vec<LabeledSample>,
) {
    let mut left = n;
    while left > 0 {
        let mut g = rng.random_range(spec.min_group_size..=spec.max_group_size).min(left);
        // never leave a trailing group below the minimum size
        if left - g > 0 && left - g < spec.min_group_size {
            g = left;
        }
        for _ in 0..g {
            let x = center
                .iter()
                .map(|&c| {
                    let z: f64 = StandardNormal.sample(rng);
                    // stored at 32-bit precision so files round-trip exactly
                    (c + spec.intra_class_spread * z) as f32 as f64
                })
                .collect();
            out.push(LabeledSample {
                x,
                y,
                y_star,
                group_id: *next_group,
            });
        }
        *next_group += 1;
        left -= g;
    }
}

/// Deterministic in `spec.seed`.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let sizes = spec.class_sizes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.feature_dim;
    let radius = spec.cluster_separation;

    let mut malignancy = spec.id_malignancy();
    let id_centers: Vec<Vec<f64>> = malignancy
        .iter()
        .map(|&m| hemisphere_center(&mut rng, dim, radius, m))
        .collect();

    let mut ood_centers = Vec::with_capacity(spec.ood_classes);
    for k in 0..spec.ood_classes {
        let center = if k < spec.near_ood_classes {
            // normalized midpoint of two distinct ID centers
            let a = rng.random_range(0..spec.id_classes);
            let b = (a + rng.random_range(1..spec.id_classes)) % spec.id_classes;
            let mid: Vec<f64> = id_centers[a]
                .iter()
                .zip(&id_centers[b])
                .map(|(p, q)| 0.5 * (p + q))
                .collect();
            let n = mid.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-9 {
                scaled(&mid, radius / n)
            } else {
                scaled(&unit_direction(&mut rng, dim), radius)
            }
        } else {
            scaled(&unit_direction(&mut rng, dim), radius * spec.far_ood_distance)
        };
        let m = if center[0] >= 0.0 {
            Malignancy::Malignant
        } else {
            Malignancy::Benign
        };
        malignancy.push(m);
        ood_centers.push(center);
    }

    let total = sizes.iter().sum::<usize>() + spec.ood_classes * spec.ood_class_size;
    let mut samples = Vec::with_capacity(total);
    let mut next_group = 0u64;
    for (y, (center, &n)) in id_centers.iter().zip(&sizes).enumerate() {
        emit_class(&mut rng, spec, center, y, malignancy[y], n, &mut next_group, &mut samples);
    }
    for (k, center) in ood_centers.iter().enumerate() {
        let y = spec.id_classes + k;
        emit_class(
            &mut rng,
            spec,
            center,
            y,
            malignancy[y],
            spec.ood_class_size,
            &mut next_group,
            &mut samples,
        );
    }

    Ok(Dataset {
        spec: spec.clone(),
        malignancy,
        samples,
    })
}

/// Train/validation/test partition. `test` holds ID test samples followed
/// by every OOD sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

/// Group-level stratified split. Each ID class's groups are shuffled and
/// dealt out so that no group straddles two partitions; OOD samples only
/// ever land in `test`.
pub fn split(dataset: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let (rt, rv, rs) = ratios;
    if !(rt > 0.0 && rv > 0.0 && rs > 0.0) || ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let c_id = dataset.id_classes();
    let mut groups: Vec<Vec<u64>> = vec![Vec::new(); c_id];
    for s in dataset.samples.iter().filter(|s| s.y < c_id) {
        let g = &mut groups[s.y];
        if g.last() != Some(&s.group_id) && !g.contains(&s.group_id) {
            g.push(s.group_id);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // group_id -> partition (0 train, 1 val, 2 test)
    let mut assignment = std::collections::HashMap::new();
    for (class, g) in groups.iter_mut().enumerate() {
        let n = g.len();
        if n < 3 {
            return Err(Error::InsufficientGroups {
                class,
                groups: n,
                needed: 3,
            });
        }
        g.shuffle(&mut rng);
        let n_val = ((rv * n as f64).round() as usize).max(1);
        let n_test = ((rs * n as f64).round() as usize).max(1);
        let n_train = n - n_val - n_test;
        if n_train == 0 {
            return Err(Error::InsufficientGroups {
                class,
                groups: n,
                needed: n_val + n_test + 1,
            });
        }
        for (i, &gid) in g.iter().enumerate() {
            let part = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            assignment.insert(gid, part);
        }
    }

    let mut out = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let mut ood = Vec::new();
    for s in &dataset.samples {
        if s.y >= c_id {
            ood.push(s.clone());
            continue;
        }
        match assignment[&s.group_id] {
            0 => out.train.push(s.clone()),
            1 => out.val.push(s.clone()),
            _ => out.test.push(s.clone()),
        }
    }
    out.test.extend(ood);
    Ok(out)
}

/// Empirical class frequencies `pi_c = n_c / n` of a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPriors {
    pub counts: Vec<usize>,
    pub pi: Vec<f64>,
}

impl ClassPriors {
    pub fn from_counts(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidArgument("no classes".into()));
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!(
                "class {c} has no training samples; its log prior would be -inf"
            )));
        }
        let n: usize = counts.iter().sum();
        let pi = counts.iter().map(|&k| k as f64 / n as f64).collect();
        Ok(Self { counts, pi })
    }

    pub fn uniform(classes: usize) -> Self {
        Self {
            counts: vec![1; classes],
            pi: vec![1.0 / classes as f64; classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.pi.len()
    }

    pub fn log_pi(&self) -> Vec<f64> {
        self.pi.iter().map(|p| p.ln()).collect()
    }
}

pub fn class_priors(train: &[LabeledSample], classes: usize) -> Result<ClassPriors> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training split".into()));
    }
    let mut counts = vec![0usize; classes];
    for s in train {
        if s.y >= classes {
            return Err(Error::InvalidArgument(format!(
                "sample class {} outside the {classes} ID classes",
                s.y
            )));
        }
        counts[s.y] += 1;
    }
    ClassPriors::from_counts(counts)
}
