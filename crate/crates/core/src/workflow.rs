//! The scripted acquisition workflow: overview, optional flattening
//! reference, then the time-lapse, all on the simulator described by a
//! [`SystemConfig`].

use std::path::Path;

use crate::acquisition::{
    acquire_overview, create_flattening_on_reference_slide, load_flat_fields, run_timelapse, AcquisitionError,
    AcquisitionObserver, AcquisitionRecord, OutputLayout,
};
use crate::config::SystemConfig;
use crate::imaging::Channel;
use crate::microscope::VirtualMicroscope;

#[derive(Debug, Clone)]
pub struct WorkflowOutput {
    pub record: AcquisitionRecord,
    pub overview_warnings: Vec<String>,
    /// Channels a flat field was applied to.
    pub flattened: Vec<Channel>,
}

pub fn run_workflow<O: AcquisitionObserver>(
    config: &SystemConfig,
    out_dir: &Path,
    observer: O,
) -> Result<WorkflowOutput, AcquisitionError> {
    let mut setup = config.setup().map_err(AcquisitionError::Invalid)?;
    let mut scope = VirtualMicroscope::new(config.simulator.clone())?;
    let layout = OutputLayout::new(out_dir);
    layout.create()?;

    let label = config
        .overview_objective_label()
        .ok_or_else(|| AcquisitionError::Parameter("no objectives on the turret".into()))?;
    let (_, overview_warnings) = acquire_overview(
        &mut scope,
        &setup.overview,
        &label,
        config.overview_channel,
        config.overview_exposure_ms,
        Some(&layout),
    )?;

    if config.flattening.create {
        let mut reference = setup.clone();
        reference.params.normalize();
        create_flattening_on_reference_slide(&mut scope, &reference, &layout, config.flattening.reference_level)?;
    }
    let mut flattened = Vec::new();
    if setup.params.apply_flattening {
        let mut normalized = setup.params.clone();
        normalized.normalize();
        setup.flat_fields = load_flat_fields(
            &layout.resume_dir(),
            normalized.channels.keys().copied(),
            &normalized.objective,
        )?;
        flattened = setup.flat_fields.keys().copied().collect();
    }

    let record = run_timelapse(&mut scope, &setup, out_dir, observer)?;
    Ok(WorkflowOutput {
        record,
        overview_warnings,
        flattened,
    })
}
