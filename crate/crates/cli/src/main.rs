//! `tilescope`: run a scripted acquisition on the simulator, or one pipeline
//! stage on a directory of images.
//!
//! Exit status is 0 on success, 1 when a run fails, 2 for invalid input.

mod commands;
mod scan;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tilescope::imaging::Channel;
use tilescope::planner::StitchMode;

#[derive(Parser)]
#[command(name = "tilescope", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Overview, optional reference flattening and the time-lapse, on the simulator.
    Acquire {
        /// JSON system configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output directory; `<data_root>/<name>` when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Simulator seed, replacing the configured one.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stitch every timestep of the tiles in a directory.
    Stitch(StitchArgs),
    /// Build or apply flat-field references.
    Flatten {
        #[command(subcommand)]
        action: FlattenAction,
    },
    /// Stabilize a directory of stitched frames.
    Stabilize(StabilizeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    NoOverlap,
    GridBf,
    GridPc,
}

impl From<ModeArg> for StitchMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::NoOverlap => StitchMode::NoOverlap,
            ModeArg::GridBf => StitchMode::GridBF,
            ModeArg::GridPc => StitchMode::GridPC,
        }
    }
}

fn parse_channel(s: &str) -> Result<Channel, String> {
    s.parse().map_err(|e: tilescope::imaging::ImageError| e.to_string())
}

/// `RxC`, e.g. `5x5`.
fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("grid {s:?} is not of the form RxC"))?;
    let n = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0);
    match (n(r), n(c)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(format!("grid {s:?} needs positive row and column counts")),
    }
}

#[derive(Args)]
struct StitchArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Fractional overlap the tiles were acquired with.
    #[arg(long)]
    overlap: f64,
    /// Directory holding `{name}_tTTTT_zZZ_rRR_cCC_{CH}.tif` tiles.
    dir: PathBuf,
    /// Where panoramas go; the tile directory when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Take registration settings from this system configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the registration search radius in pixels.
    #[arg(long)]
    max_search_px: Option<usize>,
}

#[derive(Subcommand)]
enum FlattenAction {
    /// Average the tiles of a reference sample into one flat field per channel.
    Create {
        dir: PathBuf,
        /// Destination; `<dir>/resume` when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "10X")]
        objective: String,
        #[arg(long, default_value_t = 33.0)]
        exposure_ms: f64,
        #[arg(long, default_value_t = 1.0)]
        illumination: f64,
        /// Gaussian smoothing of the averaged background, in pixels.
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
    },
    /// Correct every tile of a directory into `<dir>/flattened`.
    Apply {
        dir: PathBuf,
        /// Directory with `flat_{CH}_{objective}.tif`; `<dir>/resume` when omitted.
        #[arg(long)]
        flat: Option<PathBuf>,
        /// Objective the flat fields were made with; needed only when several are present.
        #[arg(long)]
        objective: Option<String>,
        /// Exposure of the tiles, to report mismatched references.
        #[arg(long)]
        exposure_ms: Option<f64>,
    },
}

#[derive(Args)]
struct StabilizeArgs {
    /// Directory holding `{name}_tTTTT_{CH}_stitched.tif` frames.
    dir: PathBuf,
    /// Cut each frame into RxC cells and treat them as tiles.
    #[arg(long, value_parser = parse_grid)]
    grid: (usize, usize),
    /// Measure drift on the raw focal-slice tiles in the same directory
    /// instead of on frame cells; the grid must match theirs.
    #[arg(long)]
    from_tiles: bool,
    /// Acquisition name, needed only when the directory holds several.
    #[arg(long)]
    name: Option<String>,
    /// Channel whose frames carry no channel tag once stabilized.
    #[arg(long, value_parser = parse_channel)]
    primary: Option<Channel>,
    /// Take stabilizer settings (and the primary channel) from this configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Acquire { config, out, seed } => commands::acquire(&config, out, seed),
        Command::Stitch(a) => commands::stitch(&commands::StitchJob {
            mode: a.mode.into(),
            overlap: a.overlap,
            out: a.out.unwrap_or_else(|| a.dir.clone()),
            dir: a.dir,
            config: a.config,
            max_search_px: a.max_search_px,
        }),
        Command::Flatten {
            action:
                FlattenAction::Create {
                    dir,
                    out,
                    objective,
                    exposure_ms,
                    illumination,
                    sigma,
                },
        } => commands::flatten_create(&commands::FlattenCreateJob {
            out: out.unwrap_or_else(|| dir.join("resume")),
            dir,
            objective,
            exposure_ms,
            illumination,
            sigma,
        }),
        Command::Flatten {
            action:
                FlattenAction::Apply {
                    dir,
                    flat,
                    objective,
                    exposure_ms,
                },
        } => commands::flatten_apply(&commands::FlattenApplyJob {
            flat: flat.unwrap_or_else(|| dir.join("resume")),
            dir,
            objective,
            exposure_ms,
        }),
        Command::Stabilize(a) => commands::stabilize(&commands::StabilizeJob {
            dir: a.dir,
            rows: a.grid.0,
            cols: a.grid.1,
            from_tiles: a.from_tiles,
            name: a.name,
            primary: a.primary,
            config: a.config,
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parses_rows_by_columns() {
        assert_eq!(parse_grid("5x4"), Ok((5, 4)));
        assert_eq!(parse_grid("2X3"), Ok((2, 3)));
        assert!(parse_grid("0x3").is_err());
        assert!(parse_grid("5").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
