use super::*;
use proptest::prelude::*;
use std::sync::Arc;

use crate::env::{EnvConfig, EnvHandle, Environment, InitialCondition, Objective, RewardWeights};
use crate::fem::SimParams;
use crate::mesh::Mesh;

#[test]
fn shutdown_frame_is_byte_exact() {
    let bytes = Message::Shutdown.encode().unwrap();
    assert_eq!(&bytes[..4], &[0, 0, 0, 19]);
    assert_eq!(&bytes[4..], br#"{"kind":"shutdown"}"#);
    assert_eq!(Message::decode(&bytes).unwrap(), Message::Shutdown);
}

#[test]
fn floats_carry_seventeen_digits() {
    let json = Message::Action { values: vec![0.1, -1.0, 5e-324] }.to_json().unwrap();
    assert_eq!(json, r#"{"kind":"action","values":[1.0000000000000001e-1,-1.0000000000000000e0,4.9406564584124654e-324]}"#);
}

#[test]
fn fifteen_actions_decode_to_fifteen_values() {
    let values: Vec<f64> = (0..15).map(|i| -1.0 + i as f64 / 7.0).collect();
    let bytes = Message::Action { values: values.clone() }.encode().unwrap();
    match Message::decode(&bytes).unwrap() {
        Message::Action { values: v } => {
            assert_eq!(v.len(), 15);
            assert_eq!(v, values);
        }
        other => panic!("{other:?}"),
    }
}

fn body(json: &str) -> Vec<u8> {
    let mut out = (json.len() as u32).to_be_bytes().to_vec();
    out.extend_from_slice(json.as_bytes());
    out
}

#[test]
fn decode_errors_name_the_problem() {
    let full = Message::Hello { version: 1 }.encode().unwrap();
    assert!(matches!(Message::decode(&full[..full.len() - 2]), Err(ProtoError::Truncated { .. })));
    assert!(matches!(Message::decode(&full[..2]), Err(ProtoError::Truncated { expected: 4, got: 2 })));
    assert!(matches!(Message::decode(&[]), Err(ProtoError::Closed)));

    let mut huge = ((MAX_FRAME + 1) as u32).to_be_bytes().to_vec();
    huge.extend_from_slice(b"{}");
    assert!(matches!(Message::decode(&huge), Err(ProtoError::FrameTooLarge(_))));

    assert!(matches!(Message::decode(&body("{\"kind\":")), Err(ProtoError::Malformed(_))));
    assert!(matches!(Message::decode(&body("[1]")), Err(ProtoError::Malformed(_))));
    assert!(matches!(Message::decode(&body(r#"{"kind":"teleport"}"#)), Err(ProtoError::UnknownKind(k)) if k == "teleport"));

    let field = |json: &str| match Message::decode(&body(json)) {
        Err(ProtoError::Field { field, .. }) => field,
        other => panic!("{other:?}"),
    };
    assert_eq!(field(r#"{"version":1}"#), "kind");
    assert_eq!(field(r#"{"kind":"reset","seed":3}"#), "record_baseline");
    assert_eq!(field(r#"{"kind":"reset","seed":-3,"record_baseline":true}"#), "seed");
    assert_eq!(field(r#"{"kind":"action","values":[1.0,"x"]}"#), "values[1]");
    assert_eq!(field(r#"{"kind":"shutdown","now":true}"#), "now");
    assert_eq!(
        field(r#"{"kind":"reward_info","baseline":{"norm_c_bef":[],"norm_kappa_bef":[],"norm_c0":1}}"#),
        "baseline.norm_kappa0"
    );

    let trailing = [Message::Shutdown.encode().unwrap(), vec![0]].concat();
    assert!(matches!(Message::decode(&trailing), Err(ProtoError::Malformed(_))));
    assert!(matches!(
        Message::Action { values: vec![f64::NAN] }.encode(),
        Err(ProtoError::Field { field, .. }) if field == "values"
    ));
}

/// Hands out one byte per `read` call.
struct Trickle<'a>(&'a [u8]);

impl Read for Trickle<'_> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        if self.0.is_empty() || buf.is_empty() {
            return Ok(0);
        }
        buf[0] = self.0[0];
        self.0 = &self.0[1..];
        Ok(1)
    }
}

fn sample_messages() -> Vec<Message> {
    vec![
        Message::Hello { version: 1 },
        Message::Reset { seed: u64::MAX, record_baseline: true },
        Message::Action { values: vec![0.25, -0.75] },
        Message::Observation(Observation {
            step: 3,
            state: vec![0.0, 1.0 / 3.0, -2.5e-7],
            norm_c: 0.42,
            norm_kappa: 1.5e4,
            reward: -0.1,
            done: false,
            action: vec![1.0],
        }),
        Message::RewardInfo { baseline: None },
        Message::Error { code: "x".into(), message: "quote \" and\nnewline ✓".into() },
        Message::EpisodeEnd,
    ]
}

#[test]
fn parsing_is_independent_of_segmentation() {
    let msgs = sample_messages();
    let stream: Vec<u8> = msgs.iter().flat_map(|m| m.encode().unwrap()).collect();
    let mut r = Trickle(&stream);
    for m in &msgs {
        assert_eq!(&read_frame(&mut r).unwrap(), m);
    }
    assert!(matches!(read_frame(&mut r), Err(ProtoError::Closed)));
}

fn finite() -> impl Strategy<Value = f64> {
    any::<f64>().prop_filter("finite", |x| x.is_finite())
}

fn observation() -> impl Strategy<Value = Observation> {
    (
        any::<usize>(),
        prop::collection::vec(finite(), 0..40),
        finite(),
        finite(),
        finite(),
        any::<bool>(),
        prop::collection::vec(finite(), 0..16),
    )
        .prop_map(|(step, state, norm_c, norm_kappa, reward, done, action)| Observation {
            step,
            state,
            norm_c,
            norm_kappa,
            reward,
            done,
            action,
        })
}

fn message() -> impl Strategy<Value = Message> {
    prop_oneof![
        any::<u32>().prop_map(|version| Message::Hello { version }),
        (
            any::<u32>(),
            any::<usize>(),
            any::<usize>(),
            any::<usize>(),
            finite(),
            finite(),
            finite(),
            prop::collection::vec((finite(), finite()).prop_map(|(x, y)| [x, y]), 0..10)
        )
            .prop_map(|(version, n_actions, obs_size, episode_len, action_low, action_high, kappa_scale, nodes)| {
                Message::HelloAck {
                    version,
                    spec: EnvSpec { n_actions, obs_size, episode_len, action_low, action_high, kappa_scale, nodes },
                }
            }),
        (any::<u64>(), any::<bool>()).prop_map(|(seed, record_baseline)| Message::Reset { seed, record_baseline }),
        observation().prop_map(Message::Observation),
        prop::collection::vec(finite(), 0..20).prop_map(|values| Message::Action { values }),
        prop::option::of(
            (prop::collection::vec(finite(), 0..8), prop::collection::vec(finite(), 0..8), finite(), finite()).prop_map(
                |(norm_c_bef, norm_kappa_bef, norm_c0, norm_kappa0)| BaselineTrace {
                    norm_c_bef,
                    norm_kappa_bef,
                    norm_c0,
                    norm_kappa0
                }
            )
        )
        .prop_map(|baseline| Message::RewardInfo { baseline }),
        Just(Message::EpisodeEnd),
        Just(Message::Shutdown),
        (".*", ".*").prop_map(|(code, message)| Message::Error { code, message }),
    ]
}

proptest! {
    #[test]
    fn round_trip(m in message()) {
        let bytes = m.encode().unwrap();
        prop_assert_eq!(u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize, bytes.len() - 4);
        let head = format!("{{\"kind\":\"{}\"", m.kind());
        prop_assert!(bytes[4..].starts_with(head.as_bytes()));
        let back = Message::decode(&bytes).unwrap();
        // compare through bits so -0.0 and 0.0 are told apart
        prop_assert_eq!(format!("{back:?}"), format!("{m:?}"));
        prop_assert_eq!(back, m);
    }
}

fn small_env(episode_len: usize) -> Environment {
    let mesh = Arc::new(Mesh::unit_square(6, 6, 3, 3).unwrap());
    let params = SimParams { beta: 2.5, gamma: 1.0, dt: 0.01, n_steps: episode_len, ..SimParams::default() };
    let cfg = EnvConfig {
        objective: Objective::Diff,
        weights: RewardWeights::default(),
        action_low: 0.1,
        action_high: 5.0,
        kappa_scale: 1.0,
        episode_len,
        ic: InitialCondition::Disk { center: [0.5, 0.5], radius: 0.3, inside: 1.0, outside: 0.0 },
    };
    Environment::new(mesh, params, cfg).unwrap()
}

fn spawn_server(mut env: Environment) -> (SocketAddr, std::thread::JoinHandle<Result<(), ProtoError>>) {
    let server = Server::bind("127.0.0.1:0").unwrap().with_timeout(Some(Duration::from_secs(20)));
    let addr = server.local_addr().unwrap();
    (addr, std::thread::spawn(move || server.serve(&mut env)))
}

use std::net::SocketAddr;

#[test]
fn loopback_episode_matches_in_process() {
    let (addr, handle) = spawn_server(small_env(5));
    let mut remote = RemoteEnv::connect(addr, Some(Duration::from_secs(20))).unwrap();
    let mut local = small_env(5);
    assert_eq!(remote.spec(), local.spec());

    assert_eq!(remote.baseline().unwrap(), None);
    let envs: [&mut dyn EnvHandle; 2] = [&mut remote, &mut local];
    let mut runs = Vec::new();
    for env in envs {
        let mut obs = vec![env.reset(1, true).unwrap()];
        for k in 0..5 {
            obs.push(env.step(&[0.1 * k as f64 - 0.2; 9]).unwrap());
        }
        obs.push(env.reset(2, false).unwrap());
        for k in 0..5 {
            obs.push(env.step(&[0.9 - 0.3 * k as f64; 9]).unwrap());
        }
        assert!(obs.last().unwrap().done);
        runs.push((obs, env.baseline().unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
    let bits = |o: &Vec<Observation>| o.iter().flat_map(|x| x.state.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&runs[0].0), bits(&runs[1].0));

    // environment errors come back as error messages; the session survives
    match remote.step(&[0.0; 9]) {
        Err(EnvError::Transport(msg)) => assert!(msg.contains("episode already finished")),
        other => panic!("{other:?}"),
    }
    assert!(remote.reset(3, false).is_ok());
    remote.shutdown().unwrap();
    handle.join().unwrap().unwrap();
    // port released
    TcpListener::bind(addr).unwrap();
}

use std::net::{TcpListener, TcpStream};

#[test]
fn version_mismatch_closes_the_connection() {
    let (addr, handle) = spawn_server(small_env(2));
    match RemoteEnv::connect_with_version(addr, Some(Duration::from_secs(20)), PROTOCOL_VERSION + 1) {
        Err(ProtoError::Server { code, .. }) => assert_eq!(code, error_code::VERSION),
        other => panic!("{other:?}"),
    }
    // a well-behaved client is served afterwards
    let remote = RemoteEnv::connect(addr, Some(Duration::from_secs(20))).unwrap();
    remote.shutdown().unwrap();
    handle.join().unwrap().unwrap();
}

#[test]
fn requests_before_hello_are_rejected() {
    let (addr, handle) = spawn_server(small_env(2));
    let mut s = TcpStream::connect(addr).unwrap();
    write_frame(&mut s, &Message::Reset { seed: 0, record_baseline: true }).unwrap();
    match read_frame(&mut s).unwrap() {
        Message::Error { code, .. } => assert_eq!(code, error_code::PROTOCOL),
        other => panic!("{other:?}"),
    }
    assert!(matches!(read_frame(&mut s), Err(ProtoError::Closed) | Err(ProtoError::Io(_))));
    RemoteEnv::connect(addr, None).unwrap().shutdown().unwrap();
    handle.join().unwrap().unwrap();
}

#[test]
fn byte_at_a_time_delivery_over_tcp() {
    let (addr, handle) = spawn_server(small_env(2));
    let mut s = TcpStream::connect(addr).unwrap();
    s.set_nodelay(true).unwrap();
    let send_slowly = |s: &mut TcpStream, m: &Message| {
        for b in m.encode().unwrap() {
            s.write_all(&[b]).unwrap();
            s.flush().unwrap();
        }
    };
    send_slowly(&mut s, &Message::Hello { version: PROTOCOL_VERSION });
    assert!(matches!(read_frame(&mut s).unwrap(), Message::HelloAck { .. }));
    send_slowly(&mut s, &Message::Reset { seed: 4, record_baseline: true });
    let obs = match read_frame(&mut s).unwrap() {
        Message::Observation(o) => o,
        other => panic!("{other:?}"),
    };
    assert_eq!(obs, small_env(2).reset(4, true).unwrap());
    send_slowly(&mut s, &Message::Shutdown);
    assert_eq!(read_frame(&mut s).unwrap(), Message::Shutdown);
    handle.join().unwrap().unwrap();
}

#[test]
fn connection_loss_mid_episode() {
    let (addr, handle) = spawn_server(small_env(4));
    let mut remote = RemoteEnv::connect(addr, Some(Duration::from_secs(20))).unwrap();
    remote.reset(0, true).unwrap();
    remote.step(&[0.0; 9]).unwrap();
    drop(remote);

    // the server went back to accepting
    let mut second = RemoteEnv::connect(addr, Some(Duration::from_secs(20))).unwrap();
    second.reset(0, true).unwrap();

    second.shutdown().unwrap();
    handle.join().unwrap().unwrap();

    // a server that hangs up mid-request surfaces as a transport error
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let dead = listener.local_addr().unwrap();
    let t = std::thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        assert!(matches!(read_frame(&mut s).unwrap(), Message::Hello { .. }));
        write_frame(&mut s, &Message::HelloAck { version: PROTOCOL_VERSION, spec: small_env(4).spec() }).unwrap();
        assert!(matches!(read_frame(&mut s).unwrap(), Message::Reset { .. }));
        // hang up without answering
    });
    let mut client = RemoteEnv::connect(dead, Some(Duration::from_secs(20))).unwrap();
    match client.reset(0, false) {
        Err(EnvError::Transport(msg)) => assert!(msg.contains("closed") || msg.contains("i/o"), "{msg}"),
        other => panic!("{other:?}"),
    }
    t.join().unwrap();
}

#[test]
fn step_failures_are_reported_as_remote_errors() {
    let e: EnvError = ProtoError::Server { code: error_code::STEP_FAILED.into(), message: "newton".into() }.into();
    assert!(matches!(e, EnvError::Remote(m) if m == "newton"));
    let e: EnvError = ProtoError::Server { code: error_code::REJECTED.into(), message: "no".into() }.into();
    assert!(matches!(e, EnvError::Transport(_)));
}
