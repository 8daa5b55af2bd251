use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::fdcheck::{central_gradient, max_relative_error};

fn architectures() -> Vec<NetworkSpec> {
    vec![
        NetworkSpec::mlp(2, &[8, 8], 1),
        NetworkSpec::mlp(2, &[6], 3).with_activation(Activation::Relu),
        NetworkSpec::mlp(3, &[5, 7, 4], 1).with_time_embedding(TimeEmbedding::ConcatScalar),
        NetworkSpec::mlp(2, &[8, 8], 2).with_time_embedding(TimeEmbedding::None),
        NetworkSpec::mlp(2, &[8, 6], 1).with_cond_dim(3),
        NetworkSpec::mlp(2, &[16], 2)
            .with_activation(Activation::Relu)
            .with_cond_dim(2)
            .with_time_embedding(TimeEmbedding::Sinusoidal(4)),
    ]
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5))
}

struct Batch {
    x: Array2<f64>,
    t: Vec<f64>,
    c: Option<Array2<f64>>,
}

impl Batch {
    fn random(spec: &NetworkSpec, rows: usize, rng: &mut ChaCha8Rng) -> Self {
        Batch {
            x: random_matrix(rng, rows, spec.input_dim),
            t: (0..rows).map(|_| rng.random_range(0.0..1.0)).collect(),
            c: (spec.cond_dim > 0).then(|| random_matrix(rng, rows, spec.cond_dim)),
        }
    }

    fn input(&self) -> NetInput<'_> {
        NetInput::new(self.x.view())
            .with_time(&self.t)
            .with_cond(self.c.as_ref().map(|c| c.view()))
    }
}

/// A smooth non-trivial loss of the outputs and its output gradient.
fn test_loss(out: ArrayView2<'_, f64>) -> (f64, Array2<f64>) {
    let mut g = Array2::zeros(out.dim());
    let mut value = 0.0;
    for ((i, k), &o) in out.indexed_iter() {
        let w = 1.0 + 0.3 * i as f64 - 0.2 * k as f64;
        value += w * (o - 0.1).powi(2) + o.sin();
        g[(i, k)] = 2.0 * w * (o - 0.1) + o.cos();
    }
    (value, g)
}

#[test]
fn param_count_matches_layout() {
    let spec = NetworkSpec::mlp(2, &[4], 1).with_time_embedding(TimeEmbedding::None);
    assert_eq!(spec.param_count(), 2 * 4 + 4 + 4 + 1);
    let net = Network::init(spec, 0).unwrap();
    assert_eq!(net.param_count(), 17);
}

#[test]
fn init_is_deterministic() {
    let spec = NetworkSpec::mlp(2, &[16, 16], 1);
    let a = Network::init(spec.clone(), 42).unwrap();
    let b = Network::init(spec.clone(), 42).unwrap();
    let c = Network::init(spec, 43).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
}

#[test]
fn init_biases_zero_and_weights_bounded() {
    let spec = NetworkSpec::mlp(3, &[5], 2).with_time_embedding(TimeEmbedding::None);
    let net = Network::init(spec, 1).unwrap();
    let p = net.params();
    let bound = 1.0 / 3f64.sqrt();
    assert!(p[..15].iter().all(|w| w.abs() <= bound));
    assert!(p[15..20].iter().all(|&b| b == 0.0));
    assert!(p[30..].iter().all(|&b| b == 0.0));
}

#[test]
fn rejects_bad_specs_and_inputs() {
    assert!(Network::init(NetworkSpec::mlp(2, &[0], 1), 0).is_err());
    assert!(Network::init(NetworkSpec::mlp(2, &[4], 0), 0).is_err());
    let odd = NetworkSpec::mlp(2, &[4], 1).with_time_embedding(TimeEmbedding::Sinusoidal(3));
    assert!(Network::init(odd, 0).is_err());
    let net = Network::init(NetworkSpec::mlp(2, &[4], 1), 0).unwrap();
    assert!(net.forward(&[1.0, 2.0, 3.0], Some(0.5), None).is_err());
    assert!(net.forward(&[1.0, 2.0], None, None).is_err());
    assert!(net.forward(&[1.0, 2.0], Some(0.5), Some(&[1.0])).is_err());
    let multi = Network::init(NetworkSpec::mlp(2, &[4], 2), 0).unwrap();
    assert!(multi.grad_input(&[0.0, 0.0], Some(0.1), None).is_err());
}

#[test]
fn zero_weights_give_zero_output() {
    let spec = NetworkSpec::mlp(2, &[4, 4], 2);
    let net = Network::from_params(spec.clone(), vec![0.0; spec.param_count()]).unwrap();
    assert_eq!(net.forward(&[0.3, -2.0], Some(0.4), None).unwrap(), vec![0.0, 0.0]);
}

#[test]
fn single_linear_layer_by_hand() {
    let spec = NetworkSpec::mlp(2, &[], 2).with_time_embedding(TimeEmbedding::None);
    // W = [[2, 0], [1, -1]], b = [0.5, 0]
    let net = Network::from_params(spec, vec![2.0, 0.0, 1.0, -1.0, 0.5, 0.0]).unwrap();
    assert_eq!(net.forward(&[3.0, 4.0], None, None).unwrap(), vec![6.5, -1.0]);
}

#[test]
fn silu_values() {
    assert_eq!(Activation::Silu.apply(0.0), 0.0);
    assert!((Activation::Silu.apply(1.0) - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-15);
    assert!((Activation::Silu.apply(1.0) - 0.73106).abs() < 1e-5);
}

#[test]
fn sinusoidal_embedding_bounded() {
    let emb = TimeEmbedding::Sinusoidal(16);
    let mut buf = [0.0; 16];
    for i in 0..=1000 {
        emb.write(i as f64 / 1000.0, &mut buf);
        assert!(buf.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn param_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (k, spec) in architectures().into_iter().enumerate() {
        let net = Network::init(spec.clone(), k as u64).unwrap();
        // nonzero biases so every parameter participates
        let mut params = net.params().to_vec();
        params.iter_mut().for_each(|p| *p += rng.random_range(-0.1..0.1));
        let net = Network::from_params(spec.clone(), params.clone()).unwrap();
        let batch = Batch::random(&spec, 5, &mut rng);
        let (_, grad) = net.grad_params(&batch.input(), test_loss).unwrap();
        let fd = central_gradient(
            |p| {
                let n = Network::from_params(spec.clone(), p.to_vec()).unwrap();
                test_loss(n.forward_batch(&batch.input()).unwrap().view()).0
            },
            &params,
            1e-5,
        );
        let err = max_relative_error(&grad, &fd, 1e-5);
        assert!(err < 1e-4, "arch {k}: relative error {err}");
    }
}

#[test]
fn input_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (k, spec) in architectures().into_iter().enumerate() {
        let net = Network::init(spec.clone(), 100 + k as u64).unwrap();
        for _ in 0..10 {
            let batch = Batch::random(&spec, 1, &mut rng);
            let cot = random_matrix(&mut rng, 1, spec.output_dim);
            let (_, gx) = net.input_vjp_batch(&batch.input(), cot.view()).unwrap();
            let x0 = batch.x.row(0).to_vec();
            let fd = central_gradient(
                |x| {
                    let out = net
                        .forward(x, Some(batch.t[0]), batch.c.as_ref().map(|c| c.row(0).to_vec()).as_deref())
                        .unwrap();
                    out.iter().zip(cot.row(0)).map(|(o, c)| o * c).sum()
                },
                &x0,
                1e-5,
            );
            let err = max_relative_error(gx.row(0).as_slice().unwrap(), &fd, 1e-5);
            assert!(err < 1e-4, "arch {k}: relative error {err}");
        }
    }
}

#[test]
fn constant_loss_gives_zero_gradient() {
    let net = Network::init(NetworkSpec::mlp(2, &[8], 1), 3).unwrap();
    let x = Array2::from_elem((4, 2), 0.5);
    let t = vec![0.3; 4];
    let (v, g) = net
        .grad_params(&NetInput::new(x.view()).with_time(&t), |o| (7.0, Array2::zeros(o.dim())))
        .unwrap();
    assert_eq!(v, 7.0);
    assert!(g.iter().all(|&gi| gi == 0.0));
}

#[test]
fn squared_output_loss_at_zero_weights() {
    let spec = NetworkSpec::mlp(2, &[4], 1);
    let mut net = Network::from_params(spec.clone(), vec![0.0; spec.param_count()]).unwrap();
    let x = Array2::from_elem((1, 2), 1.0);
    let t = [0.5];
    let sq = |o: ArrayView2<'_, f64>| (o.iter().map(|v| v * v).sum(), o.mapv(|v| 2.0 * v));
    let input = NetInput::new(x.view()).with_time(&t);
    let (_, g) = net.grad_params(&input, sq).unwrap();
    assert_eq!(*g.last().unwrap(), 0.0);
    // after moving the output bias the same gradient entry becomes nonzero
    *net.params_mut().last_mut().unwrap() = 0.25;
    let (_, g) = net.grad_params(&input, sq).unwrap();
    assert_eq!(*g.last().unwrap(), 0.5);
}

#[test]
fn grad_input_of_constant_and_linear_networks() {
    let spec = NetworkSpec::mlp(3, &[], 1).with_time_embedding(TimeEmbedding::None);
    let constant = Network::from_params(spec.clone(), vec![0.0, 0.0, 0.0, 2.5]).unwrap();
    assert_eq!(constant.grad_input(&[1.0, 2.0, 3.0], None, None).unwrap(), vec![0.0; 3]);
    let linear = Network::from_params(spec, vec![0.5, -1.0, 2.0, 0.0]).unwrap();
    assert_eq!(linear.grad_input(&[4.0, 1.0, -3.0], None, None).unwrap(), vec![0.5, -1.0, 2.0]);
}

#[test]
fn forward_is_deterministic() {
    let spec = NetworkSpec::mlp(2, &[32, 32], 2);
    let net = Network::init(spec, 9).unwrap();
    let a = net.forward(&[0.1, 0.2], Some(0.7), None).unwrap();
    let b = net.forward(&[0.1, 0.2], Some(0.7), None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut net = Network::init(NetworkSpec::mlp(2, &[4], 1), 0).unwrap();
    let before = net.params().to_vec();
    let mut opt = OptimizerState::new(net.param_count(), 1e-2);
    opt.adam_step(&mut net, &vec![0.0; before.len()]).unwrap();
    assert_eq!(net.params(), &before[..]);
}

#[test]
fn adam_first_step_follows_gradient_sign() {
    let mut params = vec![0.0, 0.0, 0.0];
    let mut opt = OptimizerState::new(3, 0.1);
    opt.step(&mut params, &[3.0, -0.001, 50.0]).unwrap();
    for (p, s) in params.iter().zip([-1.0, 1.0, -1.0]) {
        assert!((p - s * 0.1).abs() < 1e-4, "{p}");
    }
}

#[test]
fn adam_minimizes_a_parabola() {
    // The bias-corrected recursion approaches 0 monotonically for 11 steps,
    // overshoots once near the origin, then settles.
    let mut w = [1.0];
    let mut opt = OptimizerState::new(1, 0.1);
    let mut prev = 1.0f64;
    for k in 1..=200 {
        let g = [2.0 * w[0]];
        opt.step(&mut w, &g).unwrap();
        if k <= 11 {
            assert!(w[0].abs() < prev, "step {k}");
        }
        prev = w[0].abs();
    }
    assert!(w[0].abs() < 1e-4, "{}", w[0]);
}

#[test]
fn adam_rejects_non_finite_gradient() {
    let mut params = vec![1.0, 2.0];
    let mut opt = OptimizerState::new(2, 0.1);
    assert!(opt.step(&mut params, &[f64::NAN, 0.0]).is_err());
    assert_eq!(params, vec![1.0, 2.0]);
    assert_eq!(opt.step_count, 0);
}

#[test]
fn polyak_interpolates() {
    let spec = NetworkSpec::mlp(1, &[], 1).with_time_embedding(TimeEmbedding::None);
    let online = Network::from_params(spec.clone(), vec![2.0, 2.0]).unwrap();
    let zero = Network::from_params(spec.clone(), vec![0.0, 0.0]).unwrap();
    let mut t = zero.clone();
    polyak_update(&mut t, &online, 1.0).unwrap();
    assert_eq!(t.params(), online.params());
    let mut t = zero.clone();
    polyak_update(&mut t, &online, 0.0).unwrap();
    assert_eq!(t.params(), zero.params());
    let mut t = zero;
    polyak_update(&mut t, &online, 0.5).unwrap();
    assert_eq!(t.params(), &[1.0, 1.0]);
    let other = Network::init(NetworkSpec::mlp(2, &[], 1), 0).unwrap();
    assert!(polyak_update(&mut t, &other, 0.5).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let net = Network::init(NetworkSpec::mlp(2, &[8], 1).with_cond_dim(2), 4).unwrap();
    let path = dir.path().join("guidance.json");
    save_checkpoint(&net, &path, 4, serde_json::json!({"method": "cep"})).unwrap();
    let bytes = std::fs::read(dir.path().join("guidance.bin")).unwrap();
    assert_eq!(bytes.len(), net.param_count() * 8);
    assert_eq!(&bytes[..8], &net.params()[0].to_le_bytes());
    let (loaded, header) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, net);
    assert_eq!(header.metadata["method"], "cep");
    std::fs::write(dir.path().join("guidance.bin"), &bytes[..16]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}
