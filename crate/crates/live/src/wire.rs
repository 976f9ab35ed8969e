//! Message schema shared with browser clients. Every frame is one JSON
//! object `{"seq", "t", "kind", "payload"}`.

use serde::{Deserialize, Serialize};

use shapectl::planner::{Obstacle, SessionStep};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    /// Strictly increasing per connection (per sender for client messages).
    pub seq: u64,
    /// Milliseconds: the session clock for server messages, the client's own
    /// clock for client messages.
    pub t: f64,
    #[serde(flatten)]
    pub body: Body,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Body {
    Hello(Hello),
    State(StatePayload),
    ObstacleUpdate(ObstacleUpdate),
    TargetUpdate(TargetUpdate),
    SessionControl(SessionControl),
    Fault(FaultPayload),
}

impl Body {
    pub fn kind(&self) -> &'static str {
        match self {
            Body::Hello(_) => "hello",
            Body::State(_) => "state",
            Body::ObstacleUpdate(_) => "obstacle_update",
            Body::TargetUpdate(_) => "target_update",
            Body::SessionControl(_) => "session_control",
            Body::Fault(_) => "fault",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hello {
    pub schema_version: u32,
    pub n_segments: usize,
    pub controller: String,
    pub tick_hz: f64,
    pub broadcast_hz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleBody {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

impl From<Obstacle> for ObstacleBody {
    fn from(o: Obstacle) -> Self {
        ObstacleBody {
            x: o.center[0],
            y: o.center[1],
            radius: o.radius,
        }
    }
}

/// Sequence number and clock of the most recent client input applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Echo {
    pub seq: u64,
    pub client_t: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatePayload {
    /// Control cycles completed since start or the last reset.
    pub step: usize,
    pub running: bool,
    /// Node poses `(x, y, theta)`, base to tip.
    pub nodes: Vec<[f64; 3]>,
    pub q: Vec<f64>,
    pub tip_target: [f64; 2],
    pub tip_error: f64,
    /// Gate triplets of the last cycle; absent before the first cycle and
    /// after a faulted one.
    pub beta: Option<Vec<[f64; 3]>>,
    /// Backbone clearance; absent without an obstacle.
    pub min_clearance: Option<f64>,
    pub obstacle: Option<ObstacleBody>,
    pub plan_note: Option<String>,
    pub fault: Option<String>,
    pub echo: Option<Echo>,
}

impl StatePayload {
    pub fn from_step(rec: &SessionStep, nodes: Vec<[f64; 3]>, tip_target: [f64; 2], running: bool, echo: Option<Echo>) -> Self {
        let beta_ok = !rec.beta.is_empty() && rec.beta.iter().flatten().all(|b| b.is_finite());
        StatePayload {
            step: rec.step,
            running,
            nodes,
            q: rec.q.clone(),
            tip_target,
            tip_error: rec.tip_error,
            beta: beta_ok.then(|| rec.beta.clone()),
            min_clearance: rec.min_clearance.is_finite().then_some(rec.min_clearance),
            obstacle: rec.obstacle.map(ObstacleBody::from),
            plan_note: rec.plan_note.clone(),
            fault: rec.fault.clone(),
            echo,
        }
    }
}

/// A radius of zero or less removes the obstacle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleUpdate {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetUpdate {
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Start,
    Pause,
    Reset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionControl {
    pub action: Action,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultPayload {
    pub code: String,
    pub message: String,
}

/// A validated operator input.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientInput {
    pub seq: u64,
    pub client_t: f64,
    pub command: Command,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    Obstacle(Option<Obstacle>),
    Target([f64; 2]),
    Control(Action),
}

/// Parses a client frame; only the three operator kinds are accepted.
pub fn parse_client(text: &str) -> Result<ClientInput, FaultPayload> {
    let fault = |code: &str, message: String| FaultPayload {
        code: code.into(),
        message,
    };
    let msg: WireMessage = serde_json::from_str(text).map_err(|e| fault("malformed", e.to_string()))?;
    let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
    let command = match msg.body {
        Body::ObstacleUpdate(o) => {
            if !finite(&[o.x, o.y, o.radius]) {
                return Err(fault("invalid", "obstacle fields must be finite".into()));
            }
            Command::Obstacle((o.radius > 0.0).then(|| Obstacle::new([o.x, o.y], o.radius)))
        }
        Body::TargetUpdate(t) => {
            if !finite(&[t.x, t.y]) {
                return Err(fault("invalid", "target fields must be finite".into()));
            }
            Command::Target([t.x, t.y])
        }
        Body::SessionControl(c) => Command::Control(c.action),
        other => return Err(fault("unexpected_kind", format!("clients may not send {}", other.kind()))),
    };
    Ok(ClientInput {
        seq: msg.seq,
        client_t: msg.t,
        command,
    })
}
