//! Live bridge for the interactive obstacle-avoidance demo. The session
//! logic lives in [`host`]; [`server`] only moves messages.

pub mod host;
pub mod record;
pub mod server;
pub mod wire;

pub use host::{decimate, SessionHost, TickOutput};
pub use record::{replay, Direction, RecordEntry, Recording};
pub use server::{serve, ServeOptions, ServeStats, ServerHandle, SessionSpec};
