use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use tilescope::config::SystemConfig;
use tilescope_server::{app, apply_env_overrides};
use tracing_subscriber::EnvFilter;

/// Serve the acquisition control API over a simulated microscope.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// JSON system configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Listen address.
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let args = Args::parse();
    let mut config = match &args.config {
        Some(path) => match SystemConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None => SystemConfig::default(),
    };
    if let Err(e) = apply_env_overrides(&mut config, |k| std::env::var(k).ok()) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let addr = SocketAddr::new(args.host, config.server.port);
    let (router, _state) = match app(config) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let listener = match tokio::net::TcpListener::bind(addr).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: binding {addr}: {e}");
            return ExitCode::from(1);
        }
    };
    tracing::info!(%addr, "listening");
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    if let Err(e) = axum::serve(listener, router).with_graceful_shutdown(shutdown).await {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    ExitCode::SUCCESS
}
