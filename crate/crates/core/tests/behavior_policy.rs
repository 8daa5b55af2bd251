use cep_core::prior::PriorTrainConfig;
use cep_core::qgpo::{
    behavior_network_spec, generate_behavior_dataset, generate_support_actions, policy_sampler_config,
    train_behavior_policy, PointGoalEnv,
};
use cep_core::schedule::Schedule;
use ndarray::Array2;

#[test]
fn behavior_samples_match_nearest_neighbour_action_means() {
    let env = PointGoalEnv::default();
    let data = generate_behavior_dataset(&env, 200, 0.5, 8).unwrap();
    let config = PriorTrainConfig {
        steps: 3000,
        batch_size: 512,
        learning_rate: 1e-3,
        log_every: 500,
    };
    let (behavior, _) =
        train_behavior_policy(&data, behavior_network_spec(&[64, 64]), Schedule::default(), &config, 2).unwrap();

    // The behaviour mean flips direction at the goal, so neighbourhood averages
    // are only a fair reference away from it.
    let picks: Vec<usize> = (0..data.len())
        .step_by(97)
        .filter(|&r| {
            let s = data.states.row(r);
            (s[0] - env.goal[0]).hypot(s[1] - env.goal[1]) > 1.0
        })
        .take(6)
        .collect();
    let states = Array2::from_shape_fn((picks.len(), 2), |(i, j)| data.states[[picks[i], j]]);
    let support = generate_support_actions(&behavior, states.view(), 256, &policy_sampler_config(0.0, 3)).unwrap();
    assert!(support.actions.iter().all(|a| (-1.0..=1.0).contains(a)));

    for (i, &p) in picks.iter().enumerate() {
        let s = data.states.row(p);
        let mut by_distance: Vec<(f64, usize)> = (0..data.len())
            .map(|r| {
                let d = &data.states.row(r) - &s;
                (d.dot(&d), r)
            })
            .collect();
        by_distance.sort_by(|a, b| a.0.total_cmp(&b.0));
        let neighbours: Vec<usize> = by_distance[..50].iter().map(|&(_, r)| r).collect();
        let acts = support.for_state(i);
        for j in 0..2 {
            let nn_mean = neighbours.iter().map(|&r| data.actions[[r, j]]).sum::<f64>() / 50.0;
            let model_mean = acts.column(j).mean().unwrap();
            assert!(
                (nn_mean - model_mean).abs() < 0.3,
                "state {p} axis {j}: model {model_mean}, neighbours {nn_mean}"
            );
        }
    }
}
