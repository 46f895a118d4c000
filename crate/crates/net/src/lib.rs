//! Networking around the learning engine: the SSP1 stream protocol, the
//! JSON-lines session store, live session workers and the HTTP control
//! plane.

pub mod frame;
pub mod http;
pub mod service;
pub mod store;
pub mod stream;

use std::sync::Arc;

use tokio::net::TcpListener;

pub use service::{NetError, ServeConfig, Service};

/// Serves the HTTP control plane and the TCP stream plane until either
/// listener fails.
pub async fn serve(service: Arc<Service>, http: TcpListener, stream: TcpListener) -> std::io::Result<()> {
    let app = http::router(service.clone());
    tokio::select! {
        r = axum::serve(http, app) => r,
        r = stream::serve_stream(stream, service) => r,
    }
}
