use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{AugmentationPolicy, ClassPriors, Malignancy};
use crate::diffcore::{OptimizerState, SgdConfig};
use crate::loss::{LossConfig, MaskM, SphereLoss};
use crate::model::{Batch, TriAugConfig};

fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize_embedding(&v).unwrap()
}

fn random_bank(rng: &mut impl Rng, n: usize, d: usize) -> EmbeddingBank {
    let z: Vec<f64> = (0..n).flat_map(|_| unit(rng, d)).collect();
    let labels = (0..n).map(|i| (i % 3) as u16).collect();
    EmbeddingBank::new(d, z, labels).unwrap()
}

#[test]
fn knn_examples() {
    let bank = EmbeddingBank::new(2, vec![1.0, 0.0, 0.0, 1.0], vec![0, 1]).unwrap();
    assert_eq!(knn_score(&[1.0, 0.0], &bank, 1).unwrap(), 0.0);
    assert!((knn_score(&[1.0, 0.0], &bank, 2).unwrap() + 2f64.sqrt()).abs() < 1e-15);
    assert!(matches!(knn_score(&[1.0, 0.0], &bank, 3), Err(Error::KTooLarge { k: 3, n: 2 })));
    assert!(knn_score(&[1.0, 0.0], &bank, 0).is_err());
    assert!(knn_score(&[1.0, 0.0, 0.0], &bank, 1).is_err());
}

#[test]
fn knn_selection_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let n = rng.random_range(1..60);
        let bank = random_bank(&mut rng, n, 5);
        let z = unit(&mut rng, 5);
        let k = rng.random_range(1..=n);
        let mut d: Vec<f64> = bank.rows().map(|r| euclidean(r, &z)).collect();
        d.sort_by(f64::total_cmp);
        assert_eq!(knn_score(&z, &bank, k).unwrap(), -d[k - 1]);
    }
}

#[test]
fn knn_ignores_bank_order_and_is_monotone_in_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let bank = random_bank(&mut rng, 40, 6);
    let z = unit(&mut rng, 6);
    let mut order: Vec<usize> = (0..40).collect();
    order.shuffle(&mut rng);
    let shuffled = EmbeddingBank::new(
        6,
        order.iter().flat_map(|&i| bank.row(i).to_vec()).collect(),
        order.iter().map(|&i| bank.labels()[i]).collect(),
    )
    .unwrap();
    let mut prev = f64::INFINITY;
    for k in 1..=40 {
        let s = knn_score(&z, &bank, k).unwrap();
        assert_eq!(s, knn_score(&z, &shuffled, k).unwrap());
        assert!(s <= prev);
        prev = s;
    }
}

#[test]
fn distance_and_cosine_rankings_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let bank = random_bank(&mut rng, 30, 8);
        let z = unit(&mut rng, 8);
        let d: Vec<f64> = bank.rows().map(|r| euclidean(r, &z)).collect();
        let cos: Vec<f64> = bank.rows().map(|r| r.iter().zip(&z).map(|(a, b)| a * b).sum()).collect();
        for i in 0..30 {
            assert!((d[i] * d[i] - (2.0 - 2.0 * cos[i])).abs() < 1e-12);
        }
        let mut by_d: Vec<usize> = (0..30).collect();
        by_d.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
        let mut by_cos: Vec<usize> = (0..30).collect();
        by_cos.sort_by(|&a, &b| cos[b].total_cmp(&cos[a]));
        assert_eq!(by_d, by_cos);
    }
}

#[test]
fn parallel_scores_match_serial() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bank = random_bank(&mut rng, 200, 8);
    let qs: Vec<Vec<f64>> = (0..64).map(|_| unit(&mut rng, 8)).collect();
    let a = knn_scores(&qs, &bank, 17, false).unwrap();
    let b = knn_scores(&qs, &bank, 17, true).unwrap();
    assert_eq!(a, b);
}

#[test]
fn k_is_clamped_to_the_bank() {
    assert_eq!(clamp_k(1000, 37), 37);
    assert_eq!(clamp_k(5, 37), 5);
}

#[test]
fn bank_rejects_non_unit_rows() {
    assert!(EmbeddingBank::new(2, vec![1.0, 1.0], vec![0]).is_err());
    assert!(EmbeddingBank::new(2, vec![1.0, 0.0, 1.0], vec![0]).is_err());
}

#[test]
fn bank_file_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bank = random_bank(&mut rng, 25, 7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.taeb");
    write_bank(&bank, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"TAEB");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 25);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 7);
    assert_eq!(bytes.len(), 12 + 25 * 7 * 4 + 25 * 2);
    let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
    assert_eq!(first, bank.row(0)[0] as f32);
    let last_label = u16::from_le_bytes(bytes[bytes.len() - 2..].try_into().unwrap());
    assert_eq!(last_label, bank.labels()[24]);

    let back = read_bank(&path).unwrap();
    assert_eq!(back.labels(), bank.labels());
    for (a, b) in back.rows().zip(bank.rows()) {
        for (x, y) in a.iter().zip(b) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }
    write_bank(&back, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);

    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(read_bank(&path), Err(Error::Format { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, bad).unwrap();
    assert!(read_bank(&path).is_err());
}

#[test]
fn calibrate_tau_examples() {
    let scores: Vec<f64> = (1..=100).map(f64::from).collect();
    assert_eq!(calibrate_tau(&scores, 0.95).unwrap(), 6.0);
    assert_eq!(calibrate_tau(&scores, 1.0).unwrap(), 1.0);
    assert_eq!(calibrate_tau(&[2.5; 30], 0.95).unwrap(), 2.5);
    assert!(calibrate_tau(&[], 0.95).is_err());
    assert!(calibrate_tau(&scores, 0.0).is_err());
}

/// Enumerates every candidate threshold and keeps the largest that works.
fn brute_tau(scores: &[f64], target: f64) -> f64 {
    let n = scores.len();
    scores
        .iter()
        .copied()
        .filter(|&t| {
            let c = scores.iter().filter(|&&s| s >= t).count();
            c as f64 / n as f64 >= target
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn calibrate_tau_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..300 {
        let n = rng.random_range(1..80);
        let levels = rng.random_range(1..10);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.1).collect();
        let t = [0.5, 0.9, 0.95, 0.99, 1.0, rng.random_range(0.01..1.0)][rng.random_range(0..6)];
        assert_eq!(calibrate_tau(&scores, t).unwrap(), brute_tau(&scores, t));
    }
}

#[test]
fn msp_examples() {
    assert!((msp_score(&[0.3; 4]) - 0.25).abs() < 1e-15);
    let p = msp_score(&[10.0, 0.0, 0.0]);
    assert!((p - 1.0 / (1.0 + 2.0 * (-10f64).exp())).abs() < 1e-15);
    assert!((p - 0.99991).abs() < 1e-5);
    assert!((msp_score(&[10.0 + 7.5, 7.5, 7.5]) - p).abs() < 1e-15);
}

fn toy_model(seed: u64, steps: usize) -> (TriAugModel, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = TriAugConfig {
        embed_dim: 4,
        hidden_sizes: vec![16],
        ..TriAugConfig::default()
    };
    let mut model = TriAugModel::new(config, 3, 3, &mut rng).unwrap();
    let centers = [[3.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 3.0]];
    let make = |rng: &mut ChaCha8Rng, n: usize| {
        let mut b = Batch {
            x: vec![],
            y: vec![],
            y_star: vec![],
        };
        for i in 0..n {
            let c = i % 3;
            b.x.push(centers[c].iter().map(|v| v + rng.random_range(-0.7..0.7)).collect());
            b.y.push(c);
            b.y_star.push(if c == 1 { Malignancy::Malignant } else { Malignancy::Benign });
        }
        b
    };
    let train = make(&mut rng, 60);
    let val = make(&mut rng, 60);
    let loss = SphereLoss::new(
        &ClassPriors::from_counts(vec![20, 20, 20]).unwrap(),
        &MaskM::new(vec![0, 1, 0]).unwrap(),
        LossConfig::default(),
    )
    .unwrap();
    let mut opt = OptimizerState::new(SgdConfig {
        learning_rate: 0.05,
        ..SgdConfig::default()
    })
    .unwrap();
    for _ in 0..steps {
        model
            .train_step(&train, &loss, &AugmentationPolicy::default(), &mut opt, &mut rng)
            .unwrap();
    }
    (model, val.x)
}

#[test]
fn odin_reduces_to_msp() {
    let (model, x) = toy_model(7, 0);
    let (_, g) = model.infer(&x).unwrap();
    let plain = odin_scores(
        &model,
        &x,
        OdinConfig {
            temperature: 1.0,
            epsilon: 0.0,
        },
    )
    .unwrap();
    for (r, s) in plain.iter().enumerate() {
        assert_eq!(*s, msp_score(g.row(r)));
    }
    let tempered = odin_scores(
        &model,
        &x,
        OdinConfig {
            temperature: 50.0,
            epsilon: 0.0,
        },
    )
    .unwrap();
    for (r, s) in tempered.iter().enumerate() {
        let scaled: Vec<f64> = g.row(r).iter().map(|v| v / 50.0).collect();
        assert!((s - msp_score(&scaled)).abs() < 1e-15);
    }
}

#[test]
fn odin_perturbation_raises_id_scores() {
    let (model, x) = toy_model(8, 100);
    let base = odin_scores(
        &model,
        &x,
        OdinConfig {
            epsilon: 0.0,
            ..OdinConfig::default()
        },
    )
    .unwrap();
    let pert = odin_scores(&model, &x, OdinConfig::default()).unwrap();
    let raised = base.iter().zip(&pert).filter(|(a, b)| b > a).count();
    assert!(raised as f64 >= 0.9 * x.len() as f64, "{raised}/{}", x.len());
}

#[test]
fn bank_is_unit_norm_deterministic_and_complete() {
    let (model, x) = toy_model(9, 5);
    let samples: Vec<LabeledSample> = x
        .iter()
        .enumerate()
        .map(|(i, v)| LabeledSample {
            x: v.clone(),
            y: i % 3,
            y_star: Malignancy::Benign,
            group_id: i as u64,
        })
        .collect();
    let bank = build_bank(&model, &samples).unwrap();
    assert_eq!(bank.len(), samples.len());
    for r in bank.rows() {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() <= 1e-5);
    }
    assert_eq!(build_bank(&model, &samples).unwrap(), bank);
    assert!(build_bank(&model, &[]).is_err());
}

#[test]
fn identity_covariance_is_squared_euclidean() {
    let means = vec![vec![0.0, 0.0], vec![3.0, 1.0]];
    let m = MahalanobisModel::from_parts(means, vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert!((m.score(&[1.0, 2.0]).unwrap() + 5.0).abs() < 1e-12);
    assert!((m.score(&[2.5, 1.0]).unwrap() + 0.25).abs() < 1e-12);
    assert_eq!(m.score(&[3.0, 1.0]).unwrap(), 0.0);
}

#[test]
fn two_by_two_hand_fit_matches_explicit_inverse() {
    // class 0 around (1, 0), class 1 around (0, 1)
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let z = vec![1.0, 0.0, s, s, 0.0, 1.0, -s, s, 0.6, 0.8, 0.8, 0.6];
    let labels = vec![0, 0, 1, 1, 1, 0];
    let bank = EmbeddingBank::new(2, z.clone(), labels.clone()).unwrap();
    let m = MahalanobisModel::fit(&bank, 2, 1e-3).unwrap();

    let rows: Vec<[f64; 2]> = z.chunks(2).map(|c| [c[0], c[1]]).collect();
    let mut mu = [[0.0; 2]; 2];
    let mut cnt = [0.0; 2];
    for (r, &l) in rows.iter().zip(&labels) {
        mu[l as usize][0] += r[0];
        mu[l as usize][1] += r[1];
        cnt[l as usize] += 1.0;
    }
    for c in 0..2 {
        mu[c][0] /= cnt[c];
        mu[c][1] /= cnt[c];
    }
    let (mut a, mut b, mut d) = (0.0, 0.0, 0.0);
    for (r, &l) in rows.iter().zip(&labels) {
        let (u, v) = (r[0] - mu[l as usize][0], r[1] - mu[l as usize][1]);
        a += u * u;
        b += u * v;
        d += v * v;
    }
    let n = rows.len() as f64;
    let (a, b, d) = (a / n + 1e-3, b / n, d / n + 1e-3);
    let det = a * d - b * b;
    let inv = [[d / det, -b / det], [-b / det, a / det]];
    let q = [0.3, -0.4];
    let dist = |c: usize| {
        let (u, v) = (q[0] - mu[c][0], q[1] - mu[c][1]);
        u * (inv[0][0] * u + inv[0][1] * v) + v * (inv[1][0] * u + inv[1][1] * v)
    };
    let expect = -dist(0).min(dist(1));
    let got = m.score(&q).unwrap();
    assert!((got - expect).abs() < 1e-9 * expect.abs().max(1.0), "{got} vs {expect}");
}

#[test]
fn mahalanobis_needs_two_vectors_per_class() {
    let bank = EmbeddingBank::new(2, vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8], vec![0, 0, 1]).unwrap();
    assert!(MahalanobisModel::fit(&bank, 2, 1e-3).is_err());
}

#[test]
fn singular_covariance_is_reported() {
    let r = MahalanobisModel::from_parts(vec![vec![0.0, 0.0]], vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
    assert!(matches!(r, Err(Error::SingularCovariance { .. })));
}

#[test]
fn mahalanobis_is_affine_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let d = 3;
    for _ in 0..50 {
        let means: Vec<Vec<f64>> = (0..3).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let l: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        // sigma = L L^T + I
        let sigma: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| (0..d).map(|k| l[i][k] * l[j][k]).sum::<f64>() + if i == j { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        // well conditioned A = I + 0.3 R
        let a: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| if i == j { 1.0 } else { 0.0 } + 0.3 * rng.random_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        let shift: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let apply = |v: &[f64]| -> Vec<f64> { (0..d).map(|i| (0..d).map(|j| a[i][j] * v[j]).sum::<f64>() + shift[i]).collect() };
        let sigma2: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        let mut s = 0.0;
                        for p in 0..d {
                            for q in 0..d {
                                s += a[i][p] * sigma[p][q] * a[j][q];
                            }
                        }
                        s
                    })
                    .collect()
            })
            .collect();
        let m1 = MahalanobisModel::from_parts(means.clone(), sigma).unwrap();
        let m2 = MahalanobisModel::from_parts(means.iter().map(|m| apply(m)).collect(), sigma2).unwrap();
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let s1 = m1.score(&z).unwrap();
        let s2 = m2.score(&apply(&z)).unwrap();
        assert!((s1 - s2).abs() < 1e-6 * s1.abs().max(1.0), "{s1} vs {s2}");
    }
}

#[test]
fn report_decisions_follow_tau() {
    let r = ScoreReport::new(
        0.5,
        &[0.4, 0.5, 0.9, 0.1],
        &[Origin::Id, Origin::Id, Origin::Ood, Origin::Ood],
        &[0, 1, 2, 0],
        &[Some(0), Some(1), None, None],
    )
    .unwrap();
    let d: Vec<Origin> = r.samples.iter().map(|s| s.decision).collect();
    assert_eq!(d, vec![Origin::Ood, Origin::Id, Origin::Id, Origin::Ood]);
    assert_eq!(r.tpr(), 0.5);
    assert_eq!(r.fpr(), 0.5);
}

proptest! {
    #[test]
    fn calibration_meets_its_target(
        scores in proptest::collection::vec(prop_oneof![-5i32..5, -1000i32..1000], 20..300),
        t in 0.01f64..=1.0,
    ) {
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let tau = calibrate_tau(&s, t).unwrap();
        let acc = s.iter().filter(|&&v| v >= tau).count() as f64 / s.len() as f64;
        prop_assert!(acc >= t);
    }

    #[test]
    fn msp_lies_between_uniform_and_one(g in proptest::collection::vec(-50f64..50.0, 2..10)) {
        let p = msp_score(&g);
        prop_assert!(p >= 1.0 / g.len() as f64 - 1e-15 && p <= 1.0);
    }
}
