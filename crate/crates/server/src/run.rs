//! Hardware sharing and the acquisition thread's view of the session.

use std::sync::Arc;

use parking_lot::{Condvar, Mutex};
use tilescope::acquisition::{AcqEvent, AcquisitionObserver, Control};
use tilescope::imaging::{BitDepth, Channel, Image};
use tilescope::microscope::{AutofocusOutcome, HardwareError, Microscope, MicroscopeState, ObjectiveSpec, VirtualMicroscope};
use tilescope::planner::StagePoint;

use crate::session::Session;

/// The simulator behind a lock that is taken once per hardware command, so
/// handlers can read the stage between the commands of a running loop.
#[derive(Clone)]
pub struct SharedScope(pub Arc<Mutex<VirtualMicroscope>>);

impl Microscope for SharedScope {
    fn state(&self) -> MicroscopeState {
        self.0.lock().state()
    }
    fn objectives(&self) -> Vec<ObjectiveSpec> {
        self.0.lock().objectives()
    }
    fn sensor_size(&self) -> (usize, usize) {
        self.0.lock().sensor_size()
    }
    fn set_stage_xy(&mut self, target: StagePoint) -> Result<f64, HardwareError> {
        self.0.lock().set_stage_xy(target)
    }
    fn set_stage_speed(&mut self, um_per_s: f64) -> Result<(), HardwareError> {
        self.0.lock().set_stage_speed(um_per_s)
    }
    fn set_z(&mut self, z_um: f64) -> Result<(), HardwareError> {
        self.0.lock().set_z(z_um)
    }
    fn set_objective(&mut self, turret_position: usize) -> Result<(), HardwareError> {
        self.0.lock().set_objective(turret_position)
    }
    fn set_channel(&mut self, channel: Channel) -> Result<(), HardwareError> {
        self.0.lock().set_channel(channel)
    }
    fn set_exposure(&mut self, channel: Channel, ms: f64) -> Result<(), HardwareError> {
        self.0.lock().set_exposure(channel, ms)
    }
    fn set_fl_shutter(&mut self, open: bool) -> Result<(), HardwareError> {
        self.0.lock().set_fl_shutter(open)
    }
    fn set_illumination(&mut self, fraction: f64) -> Result<(), HardwareError> {
        self.0.lock().set_illumination(fraction)
    }
    fn set_bit_depth(&mut self, depth: BitDepth) -> Result<(), HardwareError> {
        self.0.lock().set_bit_depth(depth)
    }
    fn snap_image(&mut self) -> Result<Image, HardwareError> {
        self.0.lock().snap_image()
    }
    fn autofocus(&mut self) -> Result<AutofocusOutcome, HardwareError> {
        self.0.lock().autofocus()
    }
    fn wait_until(&mut self, t_s: f64) {
        self.0.lock().wait_until(t_s)
    }
}

#[derive(Debug, Default)]
struct Flags {
    paused: bool,
    stop: bool,
}

/// Pause and stop requests for the running loop.
#[derive(Debug, Default)]
pub struct RunControl {
    flags: Mutex<Flags>,
    changed: Condvar,
}

impl RunControl {
    pub fn reset(&self) {
        *self.flags.lock() = Flags::default();
    }

    pub fn set_paused(&self, paused: bool) {
        self.flags.lock().paused = paused;
        self.changed.notify_all();
    }

    pub fn request_stop(&self) {
        self.flags.lock().stop = true;
        self.changed.notify_all();
    }

    /// Block while paused; report whether to carry on.
    pub fn wait_turn(&self) -> Control {
        let mut f = self.flags.lock();
        loop {
            if f.stop {
                return Control::Stop;
            }
            if !f.paused {
                return Control::Continue;
            }
            self.changed.wait(&mut f);
        }
    }
}

/// Forwards engine events into the session and honours pause and stop.
pub struct SessionObserver {
    pub session: Arc<Mutex<Session>>,
    pub control: Arc<RunControl>,
}

impl AcquisitionObserver for SessionObserver {
    fn on_event(&mut self, sim_time: f64, event: &AcqEvent) {
        self.session.lock().record_engine_event(sim_time, event);
    }

    fn checkpoint(&mut self) -> Control {
        self.control.wait_turn()
    }
}
