//! Websocket host: one tick thread owns the session; one thread per client
//! forwards its inputs into a shared mailbox and writes broadcast states.

use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use tungstenite::{Message, WebSocket};

use shapectl::controller::{ControllerConfig, ControllerKind, DisplacementModel};
use shapectl::kinematics::RobotGeometry;
use shapectl::nn::SpatioCoupledNet;
use shapectl::planner::{AvoidanceSession, ObstacleTrace, PlanConfig};
use shapectl::plant::DisturbanceProfile;
use shapectl::{Error, Result};

use crate::host::SessionHost;
use crate::record::Recording;
use crate::wire::{parse_client, Body, ClientInput, FaultPayload, Hello, StatePayload, WireMessage, SCHEMA_VERSION};

/// Everything needed to build the session, owned so it can move to the tick thread.
#[derive(Clone)]
pub struct SessionSpec {
    pub kind: ControllerKind,
    pub model: Option<SpatioCoupledNet>,
    pub controller: ControllerConfig,
    pub planner: PlanConfig,
    pub geometry: RobotGeometry,
    pub disturbance: DisturbanceProfile,
    /// Obstacle schedule followed until an operator moves the obstacle.
    pub script: Option<ObstacleTrace>,
    pub tick_hz: f64,
    pub broadcast_hz: f64,
    pub autostart: bool,
}

impl SessionSpec {
    pub fn build_host(&self) -> Result<SessionHost<'_>> {
        let model = self.model.as_ref().map(|m| m as &dyn DisplacementModel);
        let session = AvoidanceSession::new(self.kind, model, &self.controller, &self.planner, &self.geometry, &self.disturbance)?;
        if let Some(trace) = &self.script {
            trace.validate()?;
        }
        Ok(SessionHost::new(
            session,
            self.script.clone(),
            self.controller.control_period,
            self.tick_hz,
            self.broadcast_hz,
            self.autostart,
        ))
    }

    fn hello(&self) -> Hello {
        Hello {
            schema_version: SCHEMA_VERSION,
            n_segments: self.geometry.n_segments,
            controller: self.kind.name().to_string(),
            tick_hz: self.tick_hz,
            broadcast_hz: self.broadcast_hz,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ServeOptions {
    pub addr: SocketAddr,
    /// Stop after this many ticks (replays, tests); run until stopped otherwise.
    pub max_ticks: Option<u64>,
    /// Pace ticks on the wall clock; off runs as fast as possible.
    pub realtime: bool,
    pub record: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ServeStats {
    pub ticks: u64,
    pub overruns: u64,
    pub clients: u64,
}

type Snapshot = Arc<(f64, StatePayload)>;

struct Shared {
    mailbox: Mutex<Vec<(ClientInput, WireMessage)>>,
    clients: Mutex<Vec<Sender<Snapshot>>>,
    stop: AtomicBool,
    connected: AtomicU64,
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    shared: Arc<Shared>,
    tick_thread: Option<JoinHandle<Result<ServeStats>>>,
    accept_thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn stop(&self) {
        self.shared.stop.store(true, Ordering::SeqCst);
    }

    /// Waits for the tick loop to end (after `stop` or `max_ticks`).
    pub fn join(mut self) -> Result<ServeStats> {
        let stats = self
            .tick_thread
            .take()
            .expect("joined once")
            .join()
            .map_err(|_| Error::Internal("tick thread panicked".into()))?;
        self.shared.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
        stats
    }
}

fn log_line(event: &str, detail: String) {
    eprintln!("{}", serde_json::json!({ "level": "warn", "event": event, "detail": detail }));
}

/// Binds, then runs the session on its own thread until stopped.
pub fn serve(spec: SessionSpec, opts: ServeOptions) -> Result<ServerHandle> {
    let listener = TcpListener::bind(opts.addr)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        mailbox: Mutex::new(Vec::new()),
        clients: Mutex::new(Vec::new()),
        stop: AtomicBool::new(false),
        connected: AtomicU64::new(0),
    });
    // fail on a bad configuration here rather than inside the thread
    spec.build_host()?;

    let hello = spec.hello();
    let accept_shared = Arc::clone(&shared);
    let accept_thread = std::thread::spawn(move || accept_loop(listener, accept_shared, hello));
    let tick_shared = Arc::clone(&shared);
    let tick_thread = std::thread::spawn(move || tick_loop(spec, opts, tick_shared));
    Ok(ServerHandle {
        addr,
        shared,
        tick_thread: Some(tick_thread),
        accept_thread: Some(accept_thread),
    })
}

fn tick_loop(spec: SessionSpec, opts: ServeOptions, shared: Arc<Shared>) -> Result<ServeStats> {
    let mut host = spec.build_host()?;
    let period = Duration::from_secs_f64(1.0 / spec.tick_hz);
    let start = Instant::now();
    let mut recording = opts.record.as_ref().map(|_| Recording::default());
    let mut stats = ServeStats::default();
    while !shared.stop.load(Ordering::SeqCst) && opts.max_ticks.map_or(true, |m| stats.ticks < m) {
        let tick = host.tick_index();
        if opts.realtime {
            let deadline = start + period * tick as u32;
            let now = Instant::now();
            if now < deadline {
                std::thread::sleep(deadline - now);
            } else if now - deadline > period {
                stats.overruns += 1;
                log_line("tick_overrun", format!("tick {tick} started {:?} late", now - deadline));
            }
        }
        let inputs = std::mem::take(&mut *shared.mailbox.lock().expect("mailbox lock"));
        for (input, msg) in inputs {
            host.apply(&input);
            if let Some(rec) = recording.as_mut() {
                rec.input(tick, &input, msg);
            }
        }
        let out = host.tick();
        stats.ticks += 1;
        if out.broadcast {
            if let Some(rec) = recording.as_mut() {
                rec.output(&out);
            }
            let snap: Snapshot = Arc::new((out.t_ms, out.state));
            shared
                .clients
                .lock()
                .expect("client list lock")
                .retain(|tx| tx.send(Arc::clone(&snap)).is_ok());
        }
    }
    shared.stop.store(true, Ordering::SeqCst);
    stats.clients = shared.connected.load(Ordering::SeqCst);
    if let (Some(rec), Some(path)) = (recording, opts.record.as_ref()) {
        rec.write(path)?;
    }
    Ok(stats)
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>, hello: Hello) {
    let mut workers = Vec::new();
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let (tx, rx) = channel();
                let s = Arc::clone(&shared);
                let h = hello.clone();
                workers.push(std::thread::spawn(move || {
                    if let Err(e) = client_loop(stream, &s, h, tx, rx) {
                        log_line("client_closed", e.to_string());
                    }
                }));
                shared.connected.fetch_add(1, Ordering::SeqCst);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(5)),
            Err(e) => log_line("accept_failed", e.to_string()),
        }
    }
    for w in workers {
        let _ = w.join();
    }
}

struct Outbox {
    seq: u64,
}

impl Outbox {
    fn send(&mut self, ws: &mut WebSocket<TcpStream>, t: f64, body: Body) -> tungstenite::Result<()> {
        self.seq += 1;
        let text = serde_json::to_string(&WireMessage { seq: self.seq, t, body }).expect("message serializes");
        ws.send(Message::Text(text))
    }
}

fn client_loop(
    stream: TcpStream,
    shared: &Shared,
    hello: Hello,
    tx: Sender<Snapshot>,
    rx: Receiver<Snapshot>,
) -> std::result::Result<(), Box<dyn std::error::Error>> {
    stream.set_nonblocking(false)?;
    let mut ws = tungstenite::accept(stream)?;
    ws.get_mut().set_read_timeout(Some(Duration::from_millis(2)))?;
    let mut out = Outbox { seq: 0 };
    out.send(&mut ws, 0.0, Body::Hello(hello))?;
    shared.clients.lock().expect("client list lock").push(tx);
    let mut last_t = 0.0;
    while !shared.stop.load(Ordering::SeqCst) {
        match ws.read() {
            Ok(Message::Text(text)) => match parse_client(&text) {
                Ok(input) => {
                    let msg: WireMessage = serde_json::from_str(&text)?;
                    shared.mailbox.lock().expect("mailbox lock").push((input, msg));
                }
                Err(fault) => out.send(&mut ws, last_t, Body::Fault(fault))?,
            },
            Ok(Message::Close(_)) => break,
            Ok(Message::Binary(_)) => out.send(
                &mut ws,
                last_t,
                Body::Fault(FaultPayload {
                    code: "malformed".into(),
                    message: "binary frames are not part of the schema".into(),
                }),
            )?,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => break,
            Err(e) => return Err(e.into()),
        }
        while let Ok(snap) = rx.try_recv() {
            last_t = snap.0;
            out.send(&mut ws, snap.0, Body::State(snap.1.clone()))?;
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
    Ok(())
}
