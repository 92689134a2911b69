//! HTTP and event-stream control service over the acquisition engine.
//!
//! One [`AppState`] owns the simulated microscope and the [`Session`] phase
//! machine. Handlers always take the session lock before the microscope
//! lock; the acquisition thread takes them one at a time and never nests.

mod api;
pub mod events;
pub mod render;
pub mod run;
pub mod session;

use std::path::PathBuf;
use std::sync::Arc;

use axum::http::{HeaderValue, Method};
use axum::Router;
use parking_lot::Mutex;
use tilescope::config::SystemConfig;
use tilescope::microscope::{HardwareError, VirtualMicroscope};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::run::{RunControl, SharedScope};
use crate::session::Session;

pub use api::ApiError;

/// Environment variable overriding `server.port`.
pub const PORT_ENV: &str = "TILESCOPE_PORT";
/// Environment variable overriding `data_root`.
pub const DATA_ROOT_ENV: &str = "TILESCOPE_DATA_ROOT";

/// Shared by every handler and the acquisition thread.
#[derive(Clone)]
pub struct AppState {
    pub config: Arc<SystemConfig>,
    pub session: Arc<Mutex<Session>>,
    pub scope: SharedScope,
    pub control: Arc<RunControl>,
}

impl AppState {
    pub fn new(config: SystemConfig) -> Result<Self, HardwareError> {
        let scope = VirtualMicroscope::new(config.simulator.clone())?;
        let session = Session::new(config.params.clone(), config.server.event_buffer);
        Ok(Self {
            config: Arc::new(config),
            session: Arc::new(Mutex::new(session)),
            scope: SharedScope(Arc::new(Mutex::new(scope))),
            control: Arc::new(RunControl::default()),
        })
    }

    /// Directory an acquisition called `name` writes into.
    pub fn run_dir(&self, name: &str) -> PathBuf {
        self.config.data_root.join(name)
    }
}

/// Apply `TILESCOPE_PORT` and `TILESCOPE_DATA_ROOT` from `lookup`.
pub fn apply_env_overrides(config: &mut SystemConfig, lookup: impl Fn(&str) -> Option<String>) -> Result<(), String> {
    if let Some(port) = lookup(PORT_ENV) {
        config.server.port = port
            .trim()
            .parse()
            .map_err(|_| format!("{PORT_ENV}={port:?} is not a port number"))?;
    }
    if let Some(root) = lookup(DATA_ROOT_ENV) {
        if root.is_empty() {
            return Err(format!("{DATA_ROOT_ENV} is empty"));
        }
        config.data_root = PathBuf::from(root);
    }
    Ok(())
}

fn cors(config: &SystemConfig) -> Result<CorsLayer, String> {
    let origin = match &config.server.cors_origin {
        Some(o) => AllowOrigin::exact(HeaderValue::from_str(o).map_err(|_| format!("invalid CORS origin {o:?}"))?),
        None => AllowOrigin::from(Any),
    };
    Ok(CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::PUT, Method::POST])
        .allow_headers(Any))
}

/// The router and the state behind it.
pub fn app(config: SystemConfig) -> Result<(Router, AppState), String> {
    let layer = cors(&config)?;
    let state = AppState::new(config).map_err(|e| e.to_string())?;
    Ok((api::routes(state.clone()).layer(layer), state))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides_port_and_root() {
        let mut c = SystemConfig::default();
        apply_env_overrides(&mut c, |k| match k {
            PORT_ENV => Some("9191".into()),
            DATA_ROOT_ENV => Some("/tmp/acq".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(c.server.port, 9191);
        assert_eq!(c.data_root, PathBuf::from("/tmp/acq"));
    }

    #[test]
    fn bad_port_is_reported() {
        let mut c = SystemConfig::default();
        let err = apply_env_overrides(&mut c, |k| (k == PORT_ENV).then(|| "eighty".to_string())).unwrap_err();
        assert!(err.contains(PORT_ENV));
        assert_eq!(c.server.port, 8080);
    }

    #[test]
    fn invalid_cors_origin_is_rejected() {
        let mut c = SystemConfig::default();
        c.server.cors_origin = Some("bad\norigin".into());
        assert!(app(c).is_err());
    }
}
