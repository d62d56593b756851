//! Live simulator sessions for people to watch, steer and take over.
//!
//! Every change to a session is an [`events::Event`]; the same events are
//! streamed to subscribers and appended to `<data dir>/<session id>.jsonl`,
//! from which sessions are rebuilt on restart.

pub mod api;
pub mod events;
pub mod session;

pub use api::router;
pub use events::{fold, Control, Event, EventBody, Snapshot};
pub use session::{CreateSession, ProfileEdit, ServiceError, SessionHandle, SessionService};

/// Serves `service` on `listener` until the future is dropped.
pub async fn serve(
    listener: tokio::net::TcpListener,
    service: std::sync::Arc<SessionService>,
    token: Option<String>,
) -> std::io::Result<()> {
    axum::serve(listener, router(service, token)).await
}
