use std::sync::Arc;
use std::time::Duration;

use rdc_core::env::{EnvConfig, Environment, InitialCondition, Objective, RewardWeights};
use rdc_core::fem::SimParams;
use rdc_core::policy::{train, AgentConfig};
use rdc_core::proto::{RemoteEnv, Server};
use rdc_core::Mesh;

fn env() -> Environment {
    let mesh = Arc::new(Mesh::unit_square(8, 8, 4, 4).unwrap());
    let params = SimParams { beta: 2.5, gamma: 1.0, dt: 0.01, n_steps: 12, ..SimParams::default() };
    let cfg = EnvConfig {
        objective: Objective::State,
        weights: RewardWeights::default(),
        action_low: 0.1,
        action_high: 5.0,
        kappa_scale: 1.0,
        episode_len: 12,
        ic: InitialCondition::Disk { center: [0.5, 0.5], radius: 0.3, inside: 1.0, outside: 0.0 },
    };
    Environment::new(mesh, params, cfg).unwrap()
}

#[test]
fn remote_training_is_bit_identical() {
    let config = AgentConfig { hidden: 32, ..AgentConfig::default() };

    let mut local = env();
    let (local_agent, local_report) = train(&mut local, 15, 2024, config.clone()).unwrap();

    let server = Server::bind("127.0.0.1:0").unwrap().with_timeout(Some(Duration::from_secs(60)));
    let addr = server.local_addr().unwrap();
    let handle = std::thread::spawn(move || server.serve(&mut env()));
    let mut remote = RemoteEnv::connect(addr, Some(Duration::from_secs(60))).unwrap();
    let (remote_agent, remote_report) = train(&mut remote, 15, 2024, config).unwrap();
    remote.shutdown().unwrap();
    handle.join().unwrap().unwrap();

    let bits = |r: &rdc_core::policy::TrainReport| -> Vec<u64> {
        r.traces.iter().flat_map(|t| t.steps.iter().map(|s| s.reward.to_bits())).collect()
    };
    assert_eq!(bits(&local_report), bits(&remote_report));
    assert_eq!(local_report.baseline_episode, remote_report.baseline_episode);
    assert_eq!(local_agent.policy, remote_agent.policy);
}
