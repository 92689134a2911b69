//! Classifying the image files of a directory by name.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::{Path, PathBuf};

use tilescope::acquisition::layout::{parse_stitched_file_name, parse_tile_file_name};
use tilescope::acquisition::TileKey;
use tilescope::imaging::Channel;

/// TIFF files found directly inside one directory.
#[derive(Debug, Default)]
pub struct DirScan {
    /// Raw tiles by acquisition name.
    pub tiles: BTreeMap<String, BTreeMap<TileKey, PathBuf>>,
    /// Stitched frames by acquisition name, keyed by (timestep, channel).
    pub stitched: BTreeMap<String, BTreeMap<(usize, Channel), PathBuf>>,
    /// TIFF file names matching neither convention.
    pub offenders: Vec<String>,
}

fn is_tiff(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("tif") || e.eq_ignore_ascii_case("tiff"))
}

/// Sort the TIFF files of `dir` (subdirectories and other files are skipped).
pub fn scan_dir(dir: &Path) -> io::Result<DirScan> {
    let mut scan = DirScan::default();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<io::Result<_>>()?;
    entries.sort();
    for path in entries {
        if !path.is_file() || !is_tiff(&path) {
            continue;
        }
        let file = path.file_name().and_then(|f| f.to_str()).unwrap_or_default().to_string();
        if let Some((name, key)) = parse_tile_file_name(&file) {
            scan.tiles.entry(name).or_default().insert(key, path);
        } else if let Some((name, t, ch)) = parse_stitched_file_name(&file) {
            scan.stitched.entry(name).or_default().insert((t, ch), path);
        } else {
            scan.offenders.push(file);
        }
    }
    Ok(scan)
}

/// Grid and stack extent of one acquisition's tiles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGeometry {
    pub rows: usize,
    pub cols: usize,
    pub z_slices: usize,
    pub timesteps: Vec<usize>,
    pub channels: Vec<Channel>,
}

impl TileGeometry {
    pub fn of(tiles: &BTreeMap<TileKey, PathBuf>) -> Self {
        let keys = tiles.keys();
        let max = |f: fn(&TileKey) -> usize| keys.clone().map(f).max().map_or(0, |m| m + 1);
        let timesteps: BTreeSet<usize> = tiles.keys().map(|k| k.timestep).collect();
        let channels: BTreeSet<Channel> = tiles.keys().map(|k| k.channel).collect();
        Self {
            rows: max(|k| k.row),
            cols: max(|k| k.col),
            z_slices: max(|k| k.z_index),
            timesteps: timesteps.into_iter().collect(),
            channels: channels.into_iter().collect(),
        }
    }

    /// The slice the engine stitches: the middle of the stack.
    pub fn focal_slice(&self) -> usize {
        self.z_slices / 2
    }
}
