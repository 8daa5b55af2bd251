//! Behaviour of trained noise-prediction models against closed-form answers.

use cep_core::bench2d::{builtin_energy, make_dataset, BuiltinEnergy, DatasetName};
use cep_core::energy::EnergySpec;
use cep_core::netcore::NetworkSpec;
use cep_core::prior::{train_prior, PriorModel, PriorTrainConfig};
use cep_core::sampler::{dps_batch, moments, sample, Guidance, NoiseModel, SamplerConfig, SolverKind};
use cep_core::schedule::Schedule;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn fit(data: &Array2<f64>, steps: usize, learning_rate: f64, seed: u64) -> PriorModel {
    let config = PriorTrainConfig {
        steps,
        batch_size: 512,
        learning_rate,
        log_every: 500,
    };
    let (prior, curve) = train_prior(
        data.view(),
        None,
        NetworkSpec::mlp(2, &[64, 64], 2),
        Schedule::default(),
        &config,
        seed,
    )
    .unwrap();
    assert!(curve.last().unwrap() < curve.first().unwrap());
    prior
}

#[test]
fn standard_normal_prior_learns_the_exact_noise_predictor_and_samples_back() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let data = Array2::from_shape_simple_fn((20_000, 2), || StandardNormal.sample(&mut rng));
    let prior = fit(&data, 6000, 1e-4, 4);
    let schedule = Schedule::default();

    let axis: Vec<f64> = (0..9).map(|i| -2.0 + 0.5 * i as f64).collect();
    let grid = Array2::from_shape_fn((81, 2), |(r, j)| if j == 0 { axis[r / 9] } else { axis[r % 9] });
    let mut sq = 0.0;
    let mut count = 0.0;
    for t in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let (_, sigma) = schedule.alpha_sigma(t).unwrap();
        let eps = prior.predict_noise(grid.view(), t, None).unwrap();
        sq += (&eps - &(&grid * sigma)).mapv(|v| v * v).sum();
        count += grid.len() as f64;
    }
    let rmse = (sq / count).sqrt();
    assert!(rmse < 0.1, "noise predictor rmse {rmse}");

    let batch = sample(&prior, &Guidance::None, &SamplerConfig::new(SolverKind::Euler, 1000, 0.0, 8), 4096, None).unwrap();
    let (mean, cov) = moments(batch.points.view());
    for m in &mean {
        assert!(m.abs() < 0.05, "mean {mean:?}");
    }
    for i in 0..2 {
        for j in 0..2 {
            let target = if i == j { 1.0 } else { 0.0 };
            assert!((cov[[i, j]] - target).abs() < 0.1, "cov {cov:?}");
        }
    }
}

#[test]
fn denoised_estimate_returns_data_points_at_the_smallest_time() {
    let data = make_dataset(DatasetName::EightGaussians, 20_000, 3).points;
    let prior = fit(&data, 3000, 1e-3, 5);
    let energy = EnergySpec::new(builtin_energy(BuiltinEnergy::Linear), 1.0).unwrap();
    let probe = data.slice(ndarray::s![..200, ..]);
    let t = prior.schedule.t_min;
    let (_, _, x_hat) = dps_batch(&prior, &energy, probe, t, None).unwrap();
    let worst = (&x_hat - &probe)
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .fold(0.0, f64::max);
    assert!(worst < 0.05, "max |x_hat - x_t| = {worst}");
}
