use std::net::TcpStream;
use std::time::{Duration, Instant};

use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

use shapectl::controller::{ControllerConfig, ControllerKind};
use shapectl::kinematics::RobotGeometry;
use shapectl::planner::{avoidance_session, ObstacleTrace, PlanConfig, TraceRow};
use shapectl::plant::DisturbanceProfile;
use shapectl_live::wire::*;
use shapectl_live::*;

fn spec(script: Option<ObstacleTrace>) -> SessionSpec {
    SessionSpec {
        kind: ControllerKind::Phy,
        model: None,
        controller: ControllerConfig::default(),
        planner: PlanConfig::default(),
        geometry: RobotGeometry::default(),
        disturbance: DisturbanceProfile::default(),
        script,
        tick_hz: 50.0,
        broadcast_hz: 30.0,
        autostart: true,
    }
}

fn static_trace() -> ObstacleTrace {
    ObstacleTrace {
        rows: vec![TraceRow { t: 0.0, x: -60.0, y: 250.0, radius: 25.0 }],
    }
}

fn input(seq: u64, command: Command) -> ClientInput {
    ClientInput { seq, client_t: seq as f64 * 7.0, command }
}

#[test]
fn every_kind_round_trips_with_kind_and_payload() {
    let bodies = vec![
        Body::Hello(Hello { schema_version: SCHEMA_VERSION, n_segments: 5, controller: "HYBRID".into(), tick_hz: 50.0, broadcast_hz: 30.0 }),
        Body::ObstacleUpdate(ObstacleUpdate { x: 1.0, y: 2.0, radius: 3.0 }),
        Body::TargetUpdate(TargetUpdate { x: 0.0, y: 480.0 }),
        Body::SessionControl(SessionControl { action: Action::Reset }),
        Body::Fault(FaultPayload { code: "malformed".into(), message: "x".into() }),
    ];
    for (i, body) in bodies.into_iter().enumerate() {
        let msg = WireMessage { seq: i as u64, t: 20.0, body };
        let text = serde_json::to_string(&msg).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["kind"], msg.body.kind());
        assert!(v.get("payload").is_some() && v.get("seq").is_some() && v.get("t").is_some());
        assert_eq!(serde_json::from_str::<WireMessage>(&text).unwrap(), msg);
    }
}

#[test]
fn clients_may_only_send_operator_kinds() {
    let ok = r#"{"seq":4,"t":12.5,"kind":"obstacle_update","payload":{"x":10,"y":200,"radius":20}}"#;
    let parsed = parse_client(ok).unwrap();
    assert_eq!(parsed.seq, 4);
    assert!(matches!(parsed.command, Command::Obstacle(Some(o)) if o.center == [10.0, 200.0]));
    let removal = r#"{"seq":5,"t":0,"kind":"obstacle_update","payload":{"x":0,"y":0,"radius":0}}"#;
    assert!(matches!(parse_client(removal).unwrap().command, Command::Obstacle(None)));
    let control = r#"{"seq":1,"t":0,"kind":"session_control","payload":{"action":"pause"}}"#;
    assert_eq!(parse_client(control).unwrap().command, Command::Control(Action::Pause));

    assert_eq!(parse_client("{not json").unwrap_err().code, "malformed");
    let typo = r#"{"seq":1,"t":0,"kind":"target_update","payload":{"x":0,"yy":1}}"#;
    assert_eq!(parse_client(typo).unwrap_err().code, "malformed");
    let hello = r#"{"seq":1,"t":0,"kind":"fault","payload":{"code":"a","message":"b"}}"#;
    assert_eq!(parse_client(hello).unwrap_err().code, "unexpected_kind");
}

#[test]
fn decimation_keeps_thirty_of_fifty_ticks() {
    let sent: Vec<u64> = (0..50).filter(|&k| decimate(k, 50.0, 30.0)).collect();
    assert_eq!(sent.len(), 30);
    assert_eq!(sent[0], 0);
    // never two skipped ticks in a row
    assert!(sent.windows(2).all(|w| w[1] - w[0] <= 2));
    assert!((0..10).all(|k| decimate(k, 50.0, 50.0)));
}

#[test]
fn without_input_the_host_matches_the_headless_session() {
    for trace in [static_trace(), ObstacleTrace::scripted_sweep()] {
        let spec = spec(Some(trace.clone()));
        let mut host = spec.build_host().unwrap();
        let live: Vec<_> = (0..150).map(|_| host.tick().step.unwrap()).collect();
        let headless = avoidance_session(
            spec.kind,
            None,
            &spec.controller,
            &spec.planner,
            &spec.geometry,
            &spec.disturbance,
            &trace,
            150.0 * spec.controller.control_period,
        )
        .unwrap();
        assert_eq!(live, headless);
    }
}

#[test]
fn reset_reports_step_zero_at_the_nominal_posture() {
    let spec = spec(Some(static_trace()));
    let mut host = spec.build_host().unwrap();
    for _ in 0..20 {
        host.tick();
    }
    host.apply(&input(1, Command::Control(Action::Reset)));
    let out = host.tick();
    assert!(out.broadcast);
    assert!(out.step.is_none());
    assert_eq!(out.state.step, 0);
    assert_eq!(out.state.q, spec.planner.nominal(&spec.geometry).0);
    assert_eq!(out.state.echo, Some(Echo { seq: 1, client_t: 7.0 }));
    assert_eq!(host.tick().state.step, 1);
}

#[test]
fn pause_freezes_and_start_resumes() {
    let spec = spec(None);
    let mut host = spec.build_host().unwrap();
    host.tick();
    host.apply(&input(1, Command::Control(Action::Pause)));
    let a = host.tick();
    let b = host.tick();
    assert!(a.step.is_none() && !a.state.running);
    assert_eq!(a.state.q, b.state.q);
    assert_eq!(a.state.step, 1);
    host.apply(&input(2, Command::Control(Action::Start)));
    assert_eq!(host.tick().state.step, 2);
}

#[test]
fn last_obstacle_update_of_a_tick_wins() {
    let spec = spec(Some(static_trace()));
    let mut host = spec.build_host().unwrap();
    host.apply(&input(1, Command::Obstacle(Some(shapectl::planner::Obstacle::new([-90.0, 200.0], 20.0)))));
    host.apply(&input(2, Command::Obstacle(Some(shapectl::planner::Obstacle::new([-70.0, 300.0], 15.0)))));
    let out = host.tick();
    assert_eq!(out.state.obstacle, Some(ObstacleBody { x: -70.0, y: 300.0, radius: 15.0 }));
    // the operator now owns the obstacle; the script no longer applies
    host.apply(&input(3, Command::Obstacle(None)));
    let out = host.tick();
    assert_eq!(out.state.obstacle, None);
    assert_eq!(out.state.min_clearance, None);
}

#[test]
fn target_update_moves_the_tip_goal() {
    let spec = spec(None);
    let mut host = spec.build_host().unwrap();
    host.apply(&input(1, Command::Target([20.0, 480.0])));
    for _ in 0..120 {
        host.tick();
    }
    let out = host.tick();
    assert_eq!(out.state.tip_target, [20.0, 480.0]);
    assert!(out.state.tip_error < 3.0, "{}", out.state.tip_error);
}

fn scripted_inputs() -> Vec<(u64, ClientInput)> {
    vec![
        (5, input(1, Command::Obstacle(Some(shapectl::planner::Obstacle::new([-80.0, 260.0], 25.0))))),
        (9, input(2, Command::Obstacle(Some(shapectl::planner::Obstacle::new([-60.0, 260.0], 25.0))))),
        (9, input(3, Command::Obstacle(Some(shapectl::planner::Obstacle::new([-50.0, 255.0], 25.0))))),
        (20, input(4, Command::Control(Action::Pause))),
        (24, input(5, Command::Control(Action::Start))),
        (30, input(6, Command::Target([10.0, 490.0]))),
        (41, input(7, Command::Control(Action::Reset))),
    ]
}

fn to_wire(i: &ClientInput) -> WireMessage {
    let body = match &i.command {
        Command::Obstacle(Some(o)) => Body::ObstacleUpdate(ObstacleUpdate { x: o.center[0], y: o.center[1], radius: o.radius }),
        Command::Obstacle(None) => Body::ObstacleUpdate(ObstacleUpdate { x: 0.0, y: 0.0, radius: 0.0 }),
        Command::Target(t) => Body::TargetUpdate(TargetUpdate { x: t[0], y: t[1] }),
        Command::Control(a) => Body::SessionControl(SessionControl { action: *a }),
    };
    WireMessage { seq: i.seq, t: i.client_t, body }
}

#[test]
fn recordings_replay_to_the_identical_state_stream() {
    let spec = spec(Some(static_trace()));
    let mut host = spec.build_host().unwrap();
    let mut rec = Recording::default();
    let inputs = scripted_inputs();
    for _ in 0..60 {
        let tick = host.tick_index();
        for (_, i) in inputs.iter().filter(|(t, _)| *t == tick) {
            host.apply(i);
            rec.input(tick, i, to_wire(i));
        }
        let out = host.tick();
        if out.broadcast {
            rec.output(&out);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.ndjson");
    rec.write(&path).unwrap();
    let loaded = Recording::read(&path).unwrap();
    assert_eq!(loaded.entries, rec.entries);
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), rec.entries.len());

    let mut fresh = spec.build_host().unwrap();
    let again = replay(&mut fresh, &loaded).unwrap();
    assert_eq!(again.entries, loaded.entries);
    let states = again.states();
    assert!(states.windows(2).all(|w| w[1].seq > w[0].seq && w[1].t > w[0].t));
}

type Client = WebSocket<MaybeTlsStream<TcpStream>>;

fn read_msg(ws: &mut Client) -> WireMessage {
    loop {
        match ws.read().unwrap() {
            Message::Text(t) => return serde_json::from_str(&t).unwrap(),
            _ => continue,
        }
    }
}

fn send(ws: &mut Client, msg: &WireMessage) {
    ws.send(Message::Text(serde_json::to_string(msg).unwrap())).unwrap();
}

#[test]
fn websocket_session_streams_states_and_survives_bad_frames() {
    let dir = tempfile::tempdir().unwrap();
    let rec_path = dir.path().join("live.ndjson");
    let spec = spec(Some(static_trace()));
    let server = serve(
        spec.clone(),
        ServeOptions {
            addr: "127.0.0.1:0".parse().unwrap(),
            max_ticks: Some(150),
            realtime: true,
            record: Some(rec_path.clone()),
        },
    )
    .unwrap();
    let (mut ws, _) = tungstenite::connect(format!("ws://{}", server.addr)).unwrap();
    let hello = read_msg(&mut ws);
    assert_eq!(hello.seq, 1);
    assert!(matches!(&hello.body, Body::Hello(h) if h.schema_version == SCHEMA_VERSION && h.n_segments == 5));

    let mut last_seq = hello.seq;
    let mut states = Vec::new();
    let mut faults = 0;
    let mut sent_bad = false;
    let mut sent_reset = false;
    let mut saw_reset = false;
    let deadline = Instant::now() + Duration::from_secs(60);
    while Instant::now() < deadline {
        let msg = match ws.read() {
            Ok(Message::Text(t)) => serde_json::from_str::<WireMessage>(&t).unwrap(),
            Ok(_) => continue,
            Err(_) => break,
        };
        assert!(msg.seq > last_seq, "seq {} after {last_seq}", msg.seq);
        last_seq = msg.seq;
        match msg.body {
            Body::State(s) => {
                assert_eq!(s.nodes.len(), 5);
                if sent_reset && s.step == 0 {
                    saw_reset = true;
                }
                states.push(s);
                if states.len() == 5 && !sent_bad {
                    ws.send(Message::Text("{\"kind\":".into())).unwrap();
                    send(&mut ws, &to_wire(&input(1, Command::Obstacle(Some(shapectl::planner::Obstacle::new([-70.0, 240.0], 20.0))))));
                    sent_bad = true;
                }
                if states.len() == 40 && !sent_reset {
                    send(&mut ws, &to_wire(&input(2, Command::Control(Action::Reset))));
                    sent_reset = true;
                }
            }
            Body::Fault(f) => {
                assert_eq!(f.code, "malformed");
                faults += 1;
            }
            other => panic!("unexpected {other:?}"),
        }
    }
    let stats = server.join().unwrap();
    assert_eq!(stats.ticks, 150);
    assert_eq!(faults, 1);
    assert!(saw_reset, "no state with step 0 after the reset");
    assert!(states.iter().any(|s| s.obstacle == Some(ObstacleBody { x: -70.0, y: 240.0, radius: 20.0 })));

    // the recorded stream replays exactly on a fresh host
    let recorded = Recording::read(&rec_path).unwrap();
    assert_eq!(recorded.entries.iter().filter(|e| e.dir == Direction::In).count(), 2);
    let mut fresh = spec.build_host().unwrap();
    let again = replay(&mut fresh, &recorded).unwrap();
    assert_eq!(again.entries, recorded.entries);
}
