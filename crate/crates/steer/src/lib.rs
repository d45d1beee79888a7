//! HTTP steering service: runs the true cart-pole under a trained policy at a
//! fixed tick rate, streams frames and accepts objective updates at runtime.
//!
//! | route | effect |
//! |---|---|
//! | `GET /health` | `{"status":"ok"}` |
//! | `GET /session` | current session state |
//! | `POST /objective` | `{omega_x?, omega_theta?}`, 400 outside the training box |
//! | `POST /reset` | `{x?, theta?}`, restart at rest |
//! | `POST /pause`, `POST /resume` | stop or start the tick loop |
//! | `POST /step` | `{ticks}`, advance synchronously and return the frames |
//! | `GET /stream` | server-sent events, one JSON frame per tick |

mod http;
mod session;

use std::net::SocketAddr;

use anyhow::Context;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use vop_core::PolicyModel;

pub use http::router;
pub use session::{
    spawn_session, Frame, Session, SessionConfig, SessionHandle, SessionState, SteerError, DEFAULT_TICK_HZ,
    MAX_STEP_TICKS,
};

/// A bound, running service.
pub struct Server {
    pub addr: SocketAddr,
    pub session: SessionHandle,
    pub task: JoinHandle<std::io::Result<()>>,
}

/// Binds `addr` and starts serving in the background.
pub async fn start(policy: PolicyModel, cfg: SessionConfig, addr: SocketAddr) -> anyhow::Result<Server> {
    let listener = TcpListener::bind(addr).await.with_context(|| format!("cannot bind {addr}"))?;
    let addr = listener.local_addr()?;
    let session = spawn_session(policy, cfg);
    let app = router(session.clone());
    let task = tokio::spawn(async move { axum::serve(listener, app).await });
    Ok(Server { addr, session, task })
}

/// Serves until the listener fails.
pub async fn serve(policy: PolicyModel, cfg: SessionConfig, addr: SocketAddr) -> anyhow::Result<()> {
    let server = start(policy, cfg, addr).await?;
    server.task.await?.context("server stopped")?;
    Ok(())
}
