//! The deterministic core of the live service: one avoidance session driven
//! tick by tick, with operator inputs applied at tick start.

use shapectl::planner::{AvoidanceSession, Obstacle, ObstacleTrace, SessionStep};

use crate::wire::{Action, ClientInput, Command, Echo, StatePayload};

/// What one tick produced.
#[derive(Clone, Debug, PartialEq)]
pub struct TickOutput {
    pub tick: u64,
    /// Session clock (ms).
    pub t_ms: f64,
    pub state: StatePayload,
    /// The control cycle run this tick, if the session was running.
    pub step: Option<SessionStep>,
    /// Whether clients receive this state (broadcast decimation).
    pub broadcast: bool,
}

pub struct SessionHost<'a> {
    session: AvoidanceSession<'a>,
    /// Obstacle schedule used until an operator moves the obstacle.
    script: Option<ObstacleTrace>,
    operator_obstacle: Option<Option<Obstacle>>,
    running: bool,
    tick: u64,
    tick_hz: f64,
    broadcast_hz: f64,
    period: f64,
    last: Option<SessionStep>,
    echo: Option<Echo>,
    force_broadcast: bool,
}

impl<'a> SessionHost<'a> {
    pub fn new(
        session: AvoidanceSession<'a>,
        script: Option<ObstacleTrace>,
        control_period: f64,
        tick_hz: f64,
        broadcast_hz: f64,
        autostart: bool,
    ) -> Self {
        SessionHost {
            session,
            script,
            operator_obstacle: None,
            running: autostart,
            tick: 0,
            tick_hz,
            broadcast_hz,
            period: control_period,
            last: None,
            echo: None,
            force_broadcast: false,
        }
    }

    pub fn tick_index(&self) -> u64 {
        self.tick
    }

    pub fn running(&self) -> bool {
        self.running
    }

    /// The obstacle in force at the session's present step.
    pub fn obstacle(&self) -> Option<Obstacle> {
        match (&self.operator_obstacle, &self.script) {
            (Some(o), _) => *o,
            (None, Some(trace)) => trace.at(self.session.step_index() as f64 * self.period),
            (None, None) => None,
        }
    }

    /// Applies one input; the caller drains its mailbox in arrival order, so
    /// the last obstacle update of a tick wins.
    pub fn apply(&mut self, input: &ClientInput) {
        match &input.command {
            Command::Obstacle(o) => self.operator_obstacle = Some(*o),
            Command::Target(tip) => self.session.set_tip_target(*tip),
            Command::Control(Action::Start) => self.running = true,
            Command::Control(Action::Pause) => self.running = false,
            Command::Control(Action::Reset) => {
                // a reset plan from the straight posture cannot fail: the
                // session was built from the same configuration
                let _ = self.session.reset();
                self.last = None;
                self.force_broadcast = true;
            }
        }
        self.echo = Some(Echo {
            seq: input.seq,
            client_t: input.client_t,
        });
    }

    /// Runs one tick: a control cycle when running (not on a reset tick) and
    /// the resulting state.
    pub fn tick(&mut self) -> TickOutput {
        let tick = self.tick;
        let obstacle = self.obstacle();
        let reset_tick = std::mem::take(&mut self.force_broadcast);
        let step = if self.running && !reset_tick {
            let rec = self.session.advance(obstacle);
            self.last = Some(rec.clone());
            Some(rec)
        } else {
            None
        };
        let mut rec = self.session.current(obstacle);
        if let Some(last) = &self.last {
            rec.beta = last.beta.clone();
            rec.plan_note = last.plan_note.clone();
            rec.fault = last.fault.clone();
        }
        let nodes = self.session.plant().shape.global.iter().map(|p| p.as_array()).collect();
        let state = StatePayload::from_step(&rec, nodes, self.session.tip_target(), self.running, self.echo.clone());
        self.tick += 1;
        TickOutput {
            tick,
            t_ms: tick as f64 * 1000.0 / self.tick_hz,
            state,
            step,
            broadcast: reset_tick || decimate(tick, self.tick_hz, self.broadcast_hz),
        }
    }
}

/// Whether tick `k` starts a new broadcast period: the first tick and every
/// tick where `floor(k * out / rate)` advances.
pub fn decimate(k: u64, rate: f64, out: f64) -> bool {
    if k == 0 || out >= rate {
        return true;
    }
    let slot = |k: u64| (k as f64 * out / rate + 1e-9).floor();
    slot(k) > slot(k - 1)
}
