//! Live teaching sessions over HTTP: the service hands out query points,
//! accepts drawn demonstrations and refits the policy in the background.
//! Sessions are persisted as append-only JSON-lines event logs that replay
//! to the same state.

pub mod api;
pub mod error;
pub mod session;

pub use api::{router, serve, AppState, ServiceOptions};
pub use error::{ServiceError, ServiceResult};
pub use session::{
    read_events, replay_log, CreateRequest, DemoRequest, Event, SessionState, SessionView, Status, SCHEMA_VERSION,
};
