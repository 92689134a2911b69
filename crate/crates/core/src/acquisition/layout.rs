//! Directory layout and file naming shared by the engine and the batch tools.
//!
//! ```text
//! <out>/AcquisitionLog.txt
//! <out>/ZFlattening/plane_t0000.txt
//! <out>/resume/flat_PC_10X.tif (+ .txt)
//! <out>/overview/overview_PC.tif
//! <out>/roi00/<name>_t0000_z00_r00_c00_PC.tif
//! <out>/roi00/<name>_t0000_PC_stitched.tif
//! <out>/roi00/<name>_t0000_positions.txt
//! <out>/roi00/Stabilized/<name>_t0000_stabilized.tif
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;

use crate::imaging::Channel;

use super::AcquisitionError;

pub const LOG_FILE: &str = "AcquisitionLog.txt";
pub const ZFLATTENING_DIR: &str = "ZFlattening";
pub const RESUME_DIR: &str = "resume";
pub const OVERVIEW_DIR: &str = "overview";
pub const STABILIZED_DIR: &str = "Stabilized";

static TILE_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^([^_/\\]+)_t(\d+)_z(\d+)_r(\d+)_c(\d+)_(BF|PC|FL)\.tif$").expect("valid pattern")
});
static STITCHED_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^([^_/\\]+)_t(\d+)_(BF|PC|FL)_stitched\.tif$").expect("valid pattern"));

/// A parsed tile file name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TileKey {
    pub timestep: usize,
    pub z_index: usize,
    pub row: usize,
    pub col: usize,
    pub channel: Channel,
}

pub fn tile_file_name(name: &str, key: &TileKey) -> String {
    format!(
        "{name}_t{:04}_z{:02}_r{:02}_c{:02}_{}.tif",
        key.timestep, key.z_index, key.row, key.col, key.channel
    )
}

pub fn parse_tile_file_name(file: &str) -> Option<(String, TileKey)> {
    let c = TILE_RE.captures(file)?;
    let num = |i: usize| c[i].parse::<usize>().ok();
    Some((
        c[1].to_string(),
        TileKey {
            timestep: num(2)?,
            z_index: num(3)?,
            row: num(4)?,
            col: num(5)?,
            channel: c[6].parse().ok()?,
        },
    ))
}

pub fn stitched_file_name(name: &str, timestep: usize, channel: Channel) -> String {
    format!("{name}_t{timestep:04}_{channel}_stitched.tif")
}

pub fn parse_stitched_file_name(file: &str) -> Option<(String, usize, Channel)> {
    let c = STITCHED_RE.captures(file)?;
    Some((c[1].to_string(), c[2].parse().ok()?, c[3].parse().ok()?))
}

pub fn positions_file_name(name: &str, timestep: usize) -> String {
    format!("{name}_t{timestep:04}_positions.txt")
}

/// The primary channel's stabilized frame carries no channel tag; other
/// channels are tagged.
pub fn stabilized_file_name(name: &str, timestep: usize, channel: Option<Channel>) -> String {
    match channel {
        None => format!("{name}_t{timestep:04}_stabilized.tif"),
        Some(ch) => format!("{name}_t{timestep:04}_{ch}_stabilized.tif"),
    }
}

/// Paths inside one acquisition directory.
#[derive(Debug, Clone)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn create(&self) -> Result<(), AcquisitionError> {
        for d in [ZFLATTENING_DIR, RESUME_DIR, OVERVIEW_DIR] {
            std::fs::create_dir_all(self.root.join(d))?;
        }
        Ok(())
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join(LOG_FILE)
    }

    pub fn zflattening_path(&self, timestep: usize) -> PathBuf {
        self.root.join(ZFLATTENING_DIR).join(format!("plane_t{timestep:04}.txt"))
    }

    pub fn resume_dir(&self) -> PathBuf {
        self.root.join(RESUME_DIR)
    }

    pub fn overview_path(&self, channel: Channel) -> PathBuf {
        self.root.join(OVERVIEW_DIR).join(format!("overview_{channel}.tif"))
    }

    pub fn roi_dir(&self, roi: usize) -> PathBuf {
        self.root.join(format!("roi{roi:02}"))
    }

    pub fn tile_path(&self, roi: usize, name: &str, key: &TileKey) -> PathBuf {
        self.roi_dir(roi).join(tile_file_name(name, key))
    }

    pub fn stitched_path(&self, roi: usize, name: &str, timestep: usize, channel: Channel) -> PathBuf {
        self.roi_dir(roi).join(stitched_file_name(name, timestep, channel))
    }

    pub fn positions_path(&self, roi: usize, name: &str, timestep: usize) -> PathBuf {
        self.roi_dir(roi).join(positions_file_name(name, timestep))
    }

    pub fn stabilized_dir(&self, roi: usize) -> PathBuf {
        self.roi_dir(roi).join(STABILIZED_DIR)
    }
}

/// Tile origins of one stitched frame, in panorama pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionsFile {
    pub rows: usize,
    pub cols: usize,
    pub positions: Vec<(f64, f64)>,
}

impl PositionsFile {
    pub fn anchor(&self) -> (f64, f64) {
        self.positions.first().copied().unwrap_or((0.0, 0.0))
    }

    pub fn render(&self) -> String {
        let mut s = format!("rows: {}\ncols: {}\n", self.rows, self.cols);
        for (i, (x, y)) in self.positions.iter().enumerate() {
            let _ = writeln!(s, "r{:02}_c{:02}: {x:.6} {y:.6}", i / self.cols.max(1), i % self.cols.max(1));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut fields = BTreeMap::new();
        let mut positions = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once(':').ok_or_else(|| format!("malformed line {line:?}"))?;
            let v = v.trim();
            if k.starts_with('r') && k.contains("_c") {
                let mut it = v.split_whitespace().map(str::parse::<f64>);
                match (it.next(), it.next()) {
                    (Some(Ok(x)), Some(Ok(y))) => positions.push((x, y)),
                    _ => return Err(format!("bad position {line:?}")),
                }
            } else {
                fields.insert(k.trim().to_string(), v.parse::<usize>().map_err(|e| format!("{k}: {e}"))?);
            }
        }
        let rows = *fields.get("rows").ok_or("missing rows")?;
        let cols = *fields.get("cols").ok_or("missing cols")?;
        if positions.len() != rows * cols {
            return Err(format!("{} positions for a {rows}x{cols} grid", positions.len()));
        }
        Ok(Self { rows, cols, positions })
    }

    pub fn load(path: &Path) -> Result<Self, AcquisitionError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| AcquisitionError::Format(format!("{}: {e}", path.display())))
    }
}
