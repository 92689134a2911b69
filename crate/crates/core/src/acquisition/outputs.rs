//! Stitched and stabilized outputs, and the on-disk tile sources that feed
//! the stabilizer. Both the acquisition engine and the batch tools go
//! through these functions, so their outputs agree file for file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::flatfield::{apply_flattening, FlatField};
use crate::imaging::{load_tiff, save_tiff, Channel, Image};
use crate::stabilize::{
    frame_correction, run_stabilization, stabilize_frame, StabilizationReport, StabilizeError, StabilizerConfig,
    TileSource,
};
use crate::stitch::StitchOutput;

use super::layout::{
    positions_file_name, stabilized_file_name, stitched_file_name, tile_file_name, PositionsFile, TileKey,
    STABILIZED_DIR,
};
use super::AcquisitionError;

/// Write every channel's panorama plus the shared positions sidecar into
/// `dir`. Returns the panorama paths by channel.
pub fn write_stitch_outputs(
    dir: &Path,
    name: &str,
    timestep: usize,
    rows: usize,
    cols: usize,
    out: &StitchOutput,
) -> Result<BTreeMap<Channel, PathBuf>, AcquisitionError> {
    std::fs::create_dir_all(dir)?;
    let mut written = BTreeMap::new();
    for (ch, pano) in &out.panoramas {
        let path = dir.join(stitched_file_name(name, timestep, *ch));
        save_tiff(&pano.image, &path)?;
        written.insert(*ch, path);
    }
    // positions in panorama pixels, identical across channels
    let positions = out
        .panoramas
        .values()
        .next()
        .map(|p| p.tile_positions.clone())
        .unwrap_or_else(|| out.positions.clone());
    let sidecar = PositionsFile { rows, cols, positions };
    std::fs::write(dir.join(positions_file_name(name, timestep)), sidecar.render())?;
    Ok(written)
}

/// Raw tiles of one channel and z slice, read from an ROI directory on
/// demand and optionally flat-field corrected.
pub struct TileFileSource {
    pub dir: PathBuf,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub channel: Channel,
    pub z_index: usize,
    /// Acquisition timesteps to use, in order.
    pub timesteps: Vec<usize>,
    pub flat: Option<FlatField>,
}

impl TileSource for TileFileSource {
    type Tile = Image;

    fn n_timesteps(&self) -> usize {
        self.timesteps.len()
    }

    fn n_tiles(&self) -> usize {
        self.rows * self.cols
    }

    fn load(&self, t: usize, tile: usize) -> Result<Image, StabilizeError> {
        let key = TileKey {
            timestep: self.timesteps[t],
            z_index: self.z_index,
            row: tile / self.cols,
            col: tile % self.cols,
            channel: self.channel,
        };
        let path = self.dir.join(tile_file_name(&self.name, &key));
        let img = load_tiff(&path).map_err(|e| StabilizeError::Load(format!("{}: {e}", path.display())))?;
        match &self.flat {
            Some(ff) => apply_flattening(&img, ff).map_err(|e| StabilizeError::Load(e.to_string())),
            None => Ok(img),
        }
    }
}

/// Stitched frames cut into a `rows x cols` grid of sub-images, each treated
/// as a tile. Cells use frame 0's geometry; parts falling outside a smaller
/// frame read as zero.
pub struct FrameGridSource {
    pub frames: Vec<PathBuf>,
    pub rows: usize,
    pub cols: usize,
    cell: (usize, usize),
}

impl FrameGridSource {
    pub fn new(frames: Vec<PathBuf>, rows: usize, cols: usize) -> Result<Self, AcquisitionError> {
        if rows == 0 || cols == 0 {
            return Err(AcquisitionError::Parameter("grid must be at least 1x1".into()));
        }
        let first = frames
            .first()
            .ok_or_else(|| AcquisitionError::Parameter("no frames to stabilize".into()))?;
        let (w, h) = load_tiff(first)?.dims();
        if w / cols < 8 || h / rows < 8 {
            return Err(AcquisitionError::Parameter(format!(
                "a {rows}x{cols} grid leaves cells under 8 px on a {w}x{h} frame"
            )));
        }
        Ok(Self {
            frames,
            rows,
            cols,
            cell: (w / cols, h / rows),
        })
    }
}

impl TileSource for FrameGridSource {
    type Tile = Image;

    fn n_timesteps(&self) -> usize {
        self.frames.len()
    }

    fn n_tiles(&self) -> usize {
        self.rows * self.cols
    }

    fn load(&self, t: usize, tile: usize) -> Result<Image, StabilizeError> {
        let path = &self.frames[t];
        let frame = load_tiff(path).map_err(|e| StabilizeError::Load(format!("{}: {e}", path.display())))?;
        let (cw, ch) = self.cell;
        let x0 = (tile % self.cols) * cw;
        let y0 = (tile / self.cols) * ch;
        let (fw, fh) = frame.dims();
        Ok(Image::from_fn(cw, ch, frame.bit_depth(), frame.pixel_size(), frame.channel(), |x, y| {
            let (sx, sy) = (x0 + x, y0 + y);
            if sx < fw && sy < fh {
                frame.get(sx, sy) as f64
            } else {
                0.0
            }
        }))
    }
}

/// Result of stabilizing one ROI's stitched sequence.
#[derive(Debug, Clone)]
pub struct StabilizedSequence {
    pub report: StabilizationReport,
    pub written: Vec<PathBuf>,
}

/// Estimate drift from `source`, then write corrected stitched frames for
/// every channel into `dir/Stabilized`. `timesteps[i]` names the frame the
/// source's i-th step came from; `primary` gets the untagged file name.
pub fn stabilize_stitched(
    dir: &Path,
    name: &str,
    timesteps: &[usize],
    channels: &[Channel],
    primary: Channel,
    source: &impl TileSource,
    config: &StabilizerConfig,
) -> Result<StabilizedSequence, AcquisitionError> {
    if source.n_timesteps() != timesteps.len() {
        return Err(AcquisitionError::Parameter("tile source and frame list disagree in length".into()));
    }
    let report = run_stabilization(source, config)?;
    let out_dir = dir.join(STABILIZED_DIR);
    std::fs::create_dir_all(&out_dir)?;
    let anchor = |t: usize| -> Result<(f64, f64), AcquisitionError> {
        let p = dir.join(positions_file_name(name, t));
        if p.exists() {
            Ok(PositionsFile::load(&p)?.anchor())
        } else {
            Ok((0.0, 0.0))
        }
    };
    let anchor_0 = anchor(timesteps[0])?;
    let mut written = Vec::new();
    for &ch in channels {
        let first = load_tiff(dir.join(stitched_file_name(name, timesteps[0], ch)))?;
        let canvas = first.dims();
        drop(first);
        for (i, &t) in timesteps.iter().enumerate() {
            let frame = load_tiff(dir.join(stitched_file_name(name, t, ch)))?;
            let corr = frame_correction(anchor_0, anchor(t)?, report.cumulative[i]);
            let out = stabilize_frame(&frame, corr, canvas);
            let tag = (ch != primary).then_some(ch);
            let path = out_dir.join(stabilized_file_name(name, t, tag));
            save_tiff(&out, &path)?;
            written.push(path);
        }
    }
    Ok(StabilizedSequence { report, written })
}
