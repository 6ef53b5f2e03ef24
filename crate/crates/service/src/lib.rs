//! HTTP service for the validity and annotation stages: leases clips to
//! raters, records their answers and resolves disagreements.

pub mod config;
pub mod error;
pub mod http;
pub mod store;

use std::sync::Arc;

pub use config::ServiceConfig;
pub use error::ServiceError;
pub use http::{router, AppState, Clock, ManualClock, SystemClock};
pub use store::{Ack, AnnotationPayload, ClipSeed, Effect, Payload, Store, StoreConfig, Submission, Task, TaskKind};

/// Opens the store, registers the configured clips and wires up the router
/// state.
pub fn build_state(config: &ServiceConfig, clock: Arc<dyn Clock>) -> Result<AppState, ServiceError> {
    let mut store = Store::open(&config.data_dir, config.store_config())?;
    if let Some(path) = &config.clips {
        let added = store.register(store::load_seeds(path)?)?;
        tracing::info!("registered {added} new clips from {}", path.display());
    }
    Ok(AppState::new(
        store,
        config.raters.clone(),
        config.media_root.clone(),
        clock,
    ))
}

pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let state = build_state(&config, Arc::new(SystemClock))?;
    let listener = tokio::net::TcpListener::bind(config.listen).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
