//! HTTP service for running participant studies: admin configuration,
//! participant sessions with chat and search tasks, in-situ popups and
//! CSV export.

pub mod api;
pub mod auth;
pub mod error;
mod routes;
pub mod runtime;
pub mod service;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

pub use routes::router;
pub use service::{ServiceConfig, StudyService};

/// Serves `service` on `listener` until `shutdown` resolves. Outside test
/// mode a background task gives every session a clock tick each second so
/// periodic popups fire without participant activity.
pub async fn serve(
    listener: tokio::net::TcpListener,
    service: Arc<StudyService>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    if !service.is_test_mode() {
        let ticker = Arc::downgrade(&service);
        tokio::spawn(async move {
            let mut interval = tokio::time::interval(Duration::from_secs(1));
            loop {
                interval.tick().await;
                let Some(svc) = ticker.upgrade() else { break };
                if let Err(e) = svc.tick_all().await {
                    tracing::warn!(error = %e.message, "clock tick failed");
                }
            }
        });
    }
    let app = router(service).into_make_service_with_connect_info::<SocketAddr>();
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}
