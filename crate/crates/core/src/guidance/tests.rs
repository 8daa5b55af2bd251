use super::losses::{paired_rows, Head};
use super::*;
use crate::energy::{FnEnergy, Linear};
use crate::netcore::TimeEmbedding;
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::Rng;
use std::sync::Arc;

fn schedule() -> Schedule {
    Schedule::default()
}

fn zero_net(input: usize, cond: usize) -> Network {
    let spec = NetworkSpec::mlp(input, &[8], 1).with_cond_dim(cond);
    Network::from_params(spec.clone(), vec![0.0; spec.param_count()]).unwrap()
}

fn random_net(input: usize, cond: usize, seed: u64) -> Network {
    Network::init(NetworkSpec::mlp(input, &[16, 16], 1).with_cond_dim(cond), seed).unwrap()
}

/// Adds `c` to every output by moving the output bias.
fn shifted(net: &Network, c: f64) -> Network {
    let mut out = net.clone();
    *out.params_mut().last_mut().unwrap() += c;
    out
}

fn linear(coeffs: Vec<f64>, beta: f64) -> EnergySpec {
    EnergySpec::new(Arc::new(Linear { coeffs }), beta).unwrap()
}

fn constant(value: f64, beta: f64) -> EnergySpec {
    let e = FnEnergy {
        label: "constant".into(),
        value: move |_: &[f64]| value,
        gradient: |x: &[f64]| vec![0.0; x.len()],
    };
    EnergySpec::new(Arc::new(e), beta).unwrap()
}

fn batch(k: usize, d: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = Array2::from_shape_simple_fn((k, d), || rng.random_range(-2.0..2.0));
    let noise = Array2::from_shape_simple_fn((k, d), || rng.sample::<f64, _>(StandardNormal));
    (x0, noise)
}

#[test]
fn cep_two_sample_hand_value() {
    let x0 = array![[0.0], [1.0]];
    let noise = array![[0.3], [-0.2]];
    let v = cep_loss(&zero_net(1, 0), &schedule(), x0.view(), &linear(vec![1.0], 1.0), 0.4, noise.view(), None)
        .unwrap();
    let want = (1.0 + (-1.0f64).exp()) * 2f64.ln();
    assert!((v.value - want).abs() < 1e-12);
    assert!((v.value - 0.94809).abs() < 1e-4);
}

#[test]
fn zero_beta_labels_are_ones_and_shift_gradient_vanishes() {
    let (labels, clamped) = unnormalized_labels(&[0.0, 0.0, 0.0]);
    assert_eq!(labels, vec![1.0; 3]);
    assert_eq!(clamped, 0);
    let f = [0.3, -1.2, 2.5, 0.0];
    let (_, g) = soft_cross_entropy(&f, &[1.0; 4]);
    assert!(g.iter().sum::<f64>().abs() < 1e-12);
    // Constant f is optimal when all labels agree.
    let (at_const, g_const) = soft_cross_entropy(&[0.7; 4], &[1.0; 4]);
    assert!(g_const.iter().all(|v| v.abs() < 1e-15));
    assert!(at_const <= soft_cross_entropy(&f, &[1.0; 4]).0);
}

#[test]
fn self_normalized_label_values() {
    let l = self_normalized_labels(&[1.5; 5]);
    assert!(l.iter().all(|v| (v - 0.2).abs() < 1e-15));
    let l = self_normalized_labels(&[0.0, 2f64.ln()]);
    assert!((l[0] - 2.0 / 3.0).abs() < 1e-15 && (l[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn self_normalized_loss_bounded_by_label_entropy() {
    let labels = self_normalized_labels(&[0.2, 1.4, -0.3, 0.9]);
    let entropy: f64 = -labels.iter().map(|p| p * p.ln()).sum::<f64>();
    let matched: Vec<f64> = labels.iter().map(|p| -p.ln()).collect();
    let (at_match, _) = soft_cross_entropy(&matched, &labels);
    assert!((at_match - entropy).abs() < 1e-12);
    for f in [[0.0, 0.0, 0.0, 0.0], [1.0, -1.0, 0.5, 2.0], [3.0, 0.1, 0.2, -0.4]] {
        assert!(soft_cross_entropy(&f, &labels).0 > entropy);
    }
}

#[test]
fn multi_t_reduces_to_single_t() {
    let (x0, noise) = batch(6, 2, 1);
    let net = random_net(2, 0, 2);
    let e = linear(vec![0.4, -0.3], 2.0);
    let single = cep_loss(&net, &schedule(), x0.view(), &e, 0.35, noise.view(), None).unwrap();
    let multi = cep_multi_t_loss(&net, &schedule(), x0.view(), &e, &[0.35; 6], noise.view(), None).unwrap();
    assert_eq!(single.value, multi.value);
}

#[test]
fn multi_t_not_invariant_to_time_dependent_shift() {
    let (x0, noise) = batch(6, 2, 3);
    let net = random_net(2, 0, 4);
    let e = linear(vec![0.4, -0.3], 2.0);
    let times = [0.1, 0.2, 0.3, 0.5, 0.7, 0.9];
    let x_t = perturb_rows(&schedule(), x0.view(), &times, noise.view());
    let f: Vec<f64> = x_t
        .rows()
        .into_iter()
        .zip(times)
        .map(|(r, t)| net.forward(&r.to_vec(), Some(t), None).unwrap()[0])
        .collect();
    let (labels, _) = unnormalized_labels(&e.scaled_rows(x0.view()));
    let (base, _) = soft_cross_entropy(&f, &labels);
    let direct = cep_multi_t_loss(&net, &schedule(), x0.view(), &e, &times, noise.view(), None).unwrap();
    assert!((base - direct.value).abs() < 1e-12);
    let by_t: Vec<f64> = f.iter().zip(times).map(|(v, t)| v + t).collect();
    assert!((soft_cross_entropy(&by_t, &labels).0 - base).abs() > 1e-3);
    let global: Vec<f64> = f.iter().map(|v| v + 0.8).collect();
    assert!((soft_cross_entropy(&global, &labels).0 - base).abs() < 1e-12);
}

#[test]
fn group_size_must_exceed_one() {
    let (x0, noise) = batch(1, 2, 0);
    let net = random_net(2, 0, 0);
    let e = linear(vec![1.0, 0.0], 1.0);
    assert!(cep_loss(&net, &schedule(), x0.view(), &e, 0.5, noise.view(), None).is_err());
    assert!(cep_self_norm_loss(&net, &schedule(), x0.view(), &e, 0.5, noise.view(), None).is_err());
    assert!(cep_multi_t_loss(&net, &schedule(), x0.view(), &e, &[0.5], noise.view(), None).is_err());
    let c = array![[1.0, 0.0]];
    assert!(cep_conditional_loss(&random_net(2, 2, 0), &schedule(), x0.view(), c.view(), 0.5, noise.view()).is_err());
}

#[test]
fn conditional_zero_net_is_k_log_two() {
    let x0 = array![[0.0, 1.0], [1.0, -1.0]];
    let noise = array![[0.1, 0.2], [0.3, 0.4]];
    let c = array![[1.0, 0.0], [0.0, 1.0]];
    let v = cep_conditional_loss(&zero_net(2, 2), &schedule(), x0.view(), c.view(), 0.5, noise.view()).unwrap();
    assert!((v.value - 2.0 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn conditional_perfect_matching_limit() {
    let x0 = array![[0.0], [1.0], [2.0]];
    let noise = Array2::zeros((3, 1));
    let c = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let (_, head) = paired_rows(&schedule(), x0.view(), c.view(), &[0.2], noise.view(), 3);
    let Head::Paired { layouts } = &head else { panic!() };
    // f = -M on matched (x_j, c_u) pairs, 0 otherwise.
    let big = 60.0;
    let mut f = vec![0.0; 9];
    for (i, &u) in layouts[0].owner.iter().enumerate() {
        f[u * 3 + i] = -big;
    }
    let (loss, _, _) = head.apply(&f);
    assert!(loss < 1e-20, "{loss}");
}

#[test]
fn conditional_equals_class_sum_form() {
    let (x0, noise) = batch(7, 2, 5);
    let classes = [0, 2, 1, 0, 2, 2, 1];
    let c = one_hot(&classes, 3);
    let net = random_net(2, 3, 6);
    let a = cep_conditional_loss(&net, &schedule(), x0.view(), c.view(), 0.3, noise.view()).unwrap();
    let b = cep_conditional_loss_by_class(&net, &schedule(), x0.view(), c.view(), 0.3, noise.view()).unwrap();
    assert!((a.value - b.value).abs() < 1e-12, "{} {}", a.value, b.value);
}

#[test]
fn classifier_uniform_and_perfect() {
    let (x0, noise) = batch(5, 2, 7);
    let classes = [0, 3, 1, 2, 3];
    let v = classifier_loss(&zero_net(2, 4), &schedule(), x0.view(), &classes, 4, 0.5, noise.view()).unwrap();
    assert!((v.value - 4f64.ln()).abs() < 1e-12);
    let head = Head::Classifier {
        classes: classes.to_vec(),
        n_classes: 4,
    };
    let f: Vec<f64> = (0..20).map(|r| if classes[r / 4] == r % 4 { -60.0 } else { 0.0 }).collect();
    assert!(head.apply(&f).0 < 1e-20);
    assert!(classifier_loss(&zero_net(2, 4), &schedule(), x0.view(), &[0, 1, 2, 3, 4], 4, 0.5, noise.view()).is_err());
}

#[test]
fn regression_losses_at_exact_targets() {
    let point = [0.5, -1.5];
    let x0 = Array2::from_shape_fn((16, 2), |(_, j)| point[j]);
    let (_, noise) = batch(16, 2, 8);
    let e = linear(vec![1.0, 0.5], 3.0);
    let target = e.scaled(&point);
    let net = shifted(&zero_net(2, 0), target);
    let times = [0.4; 16];
    assert!(mse_loss(&net, &schedule(), x0.view(), &e, &times, noise.view()).unwrap().value < 1e-24);
    assert!(emse_loss(&net, &schedule(), x0.view(), &e, &times, noise.view()).unwrap().value < 1e-24);
    let flat = linear(vec![1.0, 0.5], 0.0);
    let v = emse_loss(&zero_net(2, 0), &schedule(), x0.view(), &flat, &times, noise.view()).unwrap();
    assert_eq!(v.value, 0.0);
    let (x1, _) = batch(16, 2, 9);
    assert!(mse_loss(&random_net(2, 0, 1), &schedule(), x1.view(), &e, &times, noise.view()).unwrap().value >= 0.0);
}

#[test]
fn emse_spike_increments_clamp_counter() {
    let spike = FnEnergy {
        label: "spike".into(),
        value: |x: &[f64]| if x[0] > 0.5 { 20.0 } else { 0.0 },
        gradient: |x: &[f64]| vec![0.0; x.len()],
    };
    let e = EnergySpec::new(Arc::new(spike), 2.0).unwrap();
    let x0 = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
    let noise = Array2::zeros((3, 2));
    let v = emse_loss(&zero_net(2, 0), &schedule(), x0.view(), &e, &[0.3; 3], noise.view()).unwrap();
    assert!(v.clamped >= 1);
    assert!(v.value.is_finite());
    let mild = linear(vec![0.1, 0.0], 1.0);
    let v = emse_loss(&zero_net(2, 0), &schedule(), x0.view(), &mild, &[0.3; 3], noise.view()).unwrap();
    assert_eq!(v.clamped, 0);
}

#[test]
fn unnormalized_labels_clamp() {
    let (l, c) = unnormalized_labels(&[-40.0, 0.0, 45.0]);
    assert_eq!(c, 2);
    assert_eq!(l[0], EXP_CLAMP.exp());
    assert_eq!(l[2], (-EXP_CLAMP).exp());
}

#[test]
fn head_gradients_match_finite_differences() {
    use crate::fdcheck::{central_gradient, max_relative_error};
    let f: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.37).collect();
    let heads = vec![
        Head::Contrast {
            group: 4,
            labels: (0..12).map(|i| 0.1 + (i % 3) as f64).collect(),
        },
        Head::Classifier {
            classes: vec![1, 0, 2, 2],
            n_classes: 3,
        },
        Head::Regression {
            targets: (0..12).map(|i| i as f64 * 0.1).collect(),
        },
        Head::ExpRegression {
            targets: (0..12).map(|i| i as f64 * 0.1 - 0.5).collect(),
        },
    ];
    for head in heads {
        let (_, g, _) = head.apply(&f);
        let fd = central_gradient(|p| head.apply(p).0, &f, 1e-6);
        assert!(max_relative_error(&g, &fd, 1e-8) < 1e-6, "{head:?}");
    }
    let x0 = Array2::from_shape_fn((6, 1), |(i, _)| i as f64);
    let c = one_hot(&[0, 1, 0, 1, 1, 0], 2);
    let (_, head) = paired_rows(&schedule(), x0.view(), c.view(), &[0.2, 0.6], Array2::zeros((6, 1)).view(), 3);
    let f: Vec<f64> = (0..12).map(|i| (i as f64 * 1.3).sin()).collect();
    let (_, g, _) = head.apply(&f);
    let fd = central_gradient(|p| head.apply(p).0, &f, 1e-6);
    assert!(max_relative_error(&g, &fd, 1e-8) < 1e-6);
}

#[test]
fn evaluate_parameter_gradient_matches_finite_differences() {
    use crate::fdcheck::{central_gradient, norm_relative_error};
    let (x0, noise) = batch(8, 2, 10);
    let net = random_net(2, 0, 11);
    let e = linear(vec![0.5, 0.2], 2.0);
    let (labels, _) = unnormalized_labels(&e.scaled_rows(x0.view()));
    let rows = contrast_rows(&schedule(), x0.view(), vec![0.3; 8], noise.view(), None);
    let head = Head::Contrast { group: 4, labels };
    let (_, g) = evaluate(&net, &rows, &head, true).unwrap();
    let g = g.unwrap();
    let fd = central_gradient(
        |p| {
            let n = Network::from_params(net.spec().clone(), p.to_vec()).unwrap();
            evaluate(&n, &rows, &head, false).unwrap().0.value
        },
        net.params(),
        1e-6,
    );
    assert!(norm_relative_error(&g, &fd, 1e-12) < 1e-6);
}

#[test]
fn methods_round_trip_names() {
    for m in GuidanceMethod::ALL {
        assert_eq!(m.as_str().parse::<GuidanceMethod>().unwrap(), m);
    }
    assert!(!GuidanceMethod::Dps.is_trained() && !GuidanceMethod::None.is_trained());
    assert!(GuidanceModel::training_free(GuidanceMethod::Cep, 1.0, schedule()).is_err());
    assert!(GuidanceModel::new(random_net(2, 0, 0), GuidanceMethod::Dps, 1.0, schedule()).is_err());
}

#[test]
fn training_free_methods_rejected_by_trainer() {
    let data = Array2::zeros((4, 2));
    let e = linear(vec![1.0, 0.0], 1.0);
    for m in [GuidanceMethod::Dps, GuidanceMethod::None] {
        let r = train_guidance(
            m,
            GuidanceData::unlabeled(data.view()),
            Some(&e),
            NetworkSpec::mlp(2, &[4], 1),
            schedule(),
            &GuidanceTrainConfig::default(),
            0,
        );
        assert!(r.is_err());
    }
}

fn quick_config(steps: usize) -> GuidanceTrainConfig {
    GuidanceTrainConfig {
        steps,
        learning_rate: 2e-3,
        group_size: 16,
        groups_per_step: 4,
        log_every: 10,
    }
}

#[test]
fn every_trained_method_runs_deterministically() {
    let (points, _) = batch(64, 2, 12);
    let labels: Vec<usize> = (0..64).map(|i| i % 3).collect();
    let e = linear(vec![0.5, -0.5], 2.0);
    for m in GuidanceMethod::ALL.into_iter().filter(|m| m.is_trained()) {
        let (data, spec) = if m.is_conditional() {
            (
                GuidanceData::labeled(points.view(), &labels, 3),
                NetworkSpec::mlp(2, &[16], 1).with_cond_dim(3),
            )
        } else {
            (GuidanceData::unlabeled(points.view()), NetworkSpec::mlp(2, &[16], 1))
        };
        let a = train_guidance(m, data, Some(&e), spec.clone(), schedule(), &quick_config(20), 3).unwrap();
        let b = train_guidance(m, data, Some(&e), spec, schedule(), &quick_config(20), 3).unwrap();
        assert_eq!(a.model, b.model, "{m}");
        assert_eq!(a.curve.values.len(), 2);
        assert!(a.curve.values.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn conditional_methods_need_labels() {
    let (points, _) = batch(16, 2, 1);
    let r = train_guidance(
        GuidanceMethod::CepCond,
        GuidanceData::unlabeled(points.view()),
        None,
        NetworkSpec::mlp(2, &[4], 1).with_cond_dim(2),
        schedule(),
        &quick_config(2),
        0,
    );
    assert!(r.is_err());
}

#[test]
fn permuted_pairing_raises_trained_conditional_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let labels: Vec<usize> = (0..400).map(|i| i % 2).collect();
    let points = Array2::from_shape_fn((400, 2), |(i, j)| {
        let centre = if labels[i] == 0 { -2.0 } else { 2.0 };
        (if j == 0 { centre } else { 0.0 }) + 0.3 * rng.sample::<f64, _>(StandardNormal)
    });
    let spec = NetworkSpec::mlp(2, &[32, 32], 1)
        .with_cond_dim(2)
        .with_time_embedding(TimeEmbedding::Sinusoidal(8));
    let trained = train_guidance(
        GuidanceMethod::CepCond,
        GuidanceData::labeled(points.view(), &labels, 2),
        None,
        spec,
        schedule(),
        &quick_config(300),
        5,
    )
    .unwrap();
    let net = trained.model.net.as_ref().unwrap();
    let idx: Vec<usize> = (0..16).collect();
    let x0 = gather(points.view(), &idx);
    let classes: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    let swapped: Vec<usize> = classes.iter().map(|c| 1 - c).collect();
    let noise = Array2::zeros((16, 2));
    let right =
        cep_conditional_loss(net, &schedule(), x0.view(), one_hot(&classes, 2).view(), 0.05, noise.view()).unwrap();
    let wrong =
        cep_conditional_loss(net, &schedule(), x0.view(), one_hot(&swapped, 2).view(), 0.05, noise.view()).unwrap();
    assert!(right.value + 1.0 < wrong.value, "{} vs {}", right.value, wrong.value);
}

#[test]
fn classifier_field_is_the_normalized_negative_log_posterior() {
    let model = GuidanceModel::new(random_net(2, 3, 5), GuidanceMethod::Classifier, 1.0, schedule()).unwrap();
    let x = array![[0.4, -1.1], [2.0, 0.3]];
    let t = 0.35;
    let mut total = [0.0; 2];
    for class in 0..3 {
        let c = one_hot(&[class, class], 3);
        let v = model.values(x.view(), t, Some(c.view())).unwrap();
        for (acc, vi) in total.iter_mut().zip(&v) {
            *acc += (-vi).exp();
        }
        let g = model.energy_gradient(x.view(), t, Some(c.view())).unwrap();
        for i in 0..2 {
            let fd = crate::fdcheck::central_gradient(
                |p| {
                    let row = Array2::from_shape_vec((1, 2), p.to_vec()).unwrap();
                    model.values(row.view(), t, Some(c.slice(ndarray::s![..1, ..]))).unwrap()[0]
                },
                &x.row(i).to_vec(),
                1e-5,
            );
            assert!(crate::fdcheck::max_relative_error(&g.row(i).to_vec(), &fd, 1e-6) < 1e-6);
        }
    }
    for p in total {
        assert!((p - 1.0).abs() < 1e-12, "class probabilities sum to {p}");
    }
    // A per-point shift shared by all classes leaves the field unchanged.
    let moved = GuidanceModel::new(shifted(model.net.as_ref().unwrap(), 2.5), GuidanceMethod::Classifier, 1.0, schedule())
        .unwrap();
    let c = one_hot(&[1, 2], 3);
    let (a, b) = (model.values(x.view(), t, Some(c.view())).unwrap(), moved.values(x.view(), t, Some(c.view())).unwrap());
    assert!(a.iter().zip(&b).all(|(u, v)| (u - v).abs() < 1e-12));
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = GuidanceModel::new(random_net(2, 0, 3), GuidanceMethod::CepSelfNorm, 4.0, schedule()).unwrap();
    let path = dir.path().join("guidance.json");
    model.save(&path, 3, serde_json::json!({"config_hash": "abc"})).unwrap();
    assert_eq!(GuidanceModel::load(&path).unwrap(), model);
    let dps = GuidanceModel::training_free(GuidanceMethod::Dps, 2.0, schedule()).unwrap();
    let path = dir.path().join("dps.json");
    dps.save(&path, 0, serde_json::json!({})).unwrap();
    assert_eq!(GuidanceModel::load(&path).unwrap(), dps);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cep_family_shift_invariant(seed in 0u64..10_000, c in -5.0f64..5.0, t in 0.01f64..1.0, beta in 0.0f64..5.0) {
        let (x0, noise) = batch(8, 2, seed);
        let net = random_net(2, 0, seed + 1);
        let moved = shifted(&net, c);
        let e = linear(vec![0.7, -0.4], beta);
        let s = schedule();
        let times: Vec<f64> = (0..8).map(|i| 0.05 + 0.1 * i as f64).collect();
        let pairs = [
            (cep_loss(&net, &s, x0.view(), &e, t, noise.view(), None).unwrap().value,
             cep_loss(&moved, &s, x0.view(), &e, t, noise.view(), None).unwrap().value),
            (cep_self_norm_loss(&net, &s, x0.view(), &e, t, noise.view(), None).unwrap().value,
             cep_self_norm_loss(&moved, &s, x0.view(), &e, t, noise.view(), None).unwrap().value),
            (cep_multi_t_loss(&net, &s, x0.view(), &e, &times, noise.view(), None).unwrap().value,
             cep_multi_t_loss(&moved, &s, x0.view(), &e, &times, noise.view(), None).unwrap().value),
        ];
        for (a, b) in pairs {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{} vs {}", a, b);
        }
        let cnet = random_net(2, 3, seed + 2);
        let cmoved = shifted(&cnet, c);
        let cond = one_hot(&[0, 1, 2, 0, 1, 2, 2, 0], 3);
        let a = cep_conditional_loss(&cnet, &s, x0.view(), cond.view(), t, noise.view()).unwrap().value;
        let b = cep_conditional_loss(&cmoved, &s, x0.view(), cond.view(), t, noise.view()).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn self_normalized_labels_are_distributions(e in proptest::collection::vec(-50.0f64..50.0, 2..40)) {
        let l = self_normalized_labels(&e);
        prop_assert!(l.iter().all(|v| *v >= 0.0));
        prop_assert!((l.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn constant_energy_labels_uniform(v in -3.0f64..3.0, beta in 0.0f64..4.0) {
        let e = constant(v, beta);
        let (x0, _) = batch(5, 2, 0);
        let l = self_normalized_labels(&e.scaled_rows(x0.view()));
        prop_assert!(l.iter().all(|p| (p - 0.2).abs() < 1e-15));
    }
}
