use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, TimeDelta, Utc};

use super::AcquisitionError;

/// Kinds of line in `AcquisitionLog.txt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LogKind {
    Move,
    Snap,
    AfOk,
    AfFail,
    PlaneFit,
    PlaneFallback,
    StepDone,
    Error,
    Warn,
}

impl LogKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LogKind::Move => "MOVE",
            LogKind::Snap => "SNAP",
            LogKind::AfOk => "AF_OK",
            LogKind::AfFail => "AF_FAIL",
            LogKind::PlaneFit => "PLANE_FIT",
            LogKind::PlaneFallback => "PLANE_FALLBACK",
            LogKind::StepDone => "STEP_DONE",
            LogKind::Error => "ERROR",
            LogKind::Warn => "WARN",
        }
    }
}

impl fmt::Display for LogKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LogKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "MOVE" => LogKind::Move,
            "SNAP" => LogKind::Snap,
            "AF_OK" => LogKind::AfOk,
            "AF_FAIL" => LogKind::AfFail,
            "PLANE_FIT" => LogKind::PlaneFit,
            "PLANE_FALLBACK" => LogKind::PlaneFallback,
            "STEP_DONE" => LogKind::StepDone,
            "ERROR" => LogKind::Error,
            "WARN" => LogKind::Warn,
            other => return Err(format!("unknown log kind {other:?}")),
        })
    }
}

/// Simulated clock zero.
pub fn sim_epoch() -> DateTime<Utc> {
    NaiveDate::from_ymd_opt(2000, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date")
        .and_utc()
}

pub fn sim_timestamp(t_s: f64) -> String {
    let ms = (t_s * 1000.0).round() as i64;
    (sim_epoch() + TimeDelta::milliseconds(ms))
        .format("%Y-%m-%dT%H:%M:%S%.3fZ")
        .to_string()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    /// Seconds since the simulated epoch.
    pub time_s: f64,
    pub kind: LogKind,
    pub payload: String,
}

impl LogEntry {
    pub fn render(&self) -> String {
        if self.payload.is_empty() {
            format!("{} {}", sim_timestamp(self.time_s), self.kind)
        } else {
            format!("{} {} {}", sim_timestamp(self.time_s), self.kind, self.payload)
        }
    }

    pub fn parse(line: &str) -> Result<Self, String> {
        let mut parts = line.splitn(3, ' ');
        let ts = parts.next().filter(|s| !s.is_empty()).ok_or("empty line")?;
        let kind = parts.next().ok_or_else(|| format!("no event kind in {line:?}"))?.parse()?;
        let payload = parts.next().unwrap_or("").to_string();
        let time = DateTime::parse_from_rfc3339(ts).map_err(|e| format!("timestamp {ts:?}: {e}"))?;
        let delta = time.with_timezone(&Utc) - sim_epoch();
        Ok(Self {
            time_s: delta.num_milliseconds() as f64 / 1000.0,
            kind,
            payload,
        })
    }
}

pub fn parse_log(text: &str) -> Result<Vec<LogEntry>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| LogEntry::parse(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

/// Line-buffered writer for `AcquisitionLog.txt`.
pub struct AcquisitionLog {
    out: BufWriter<File>,
}

impl AcquisitionLog {
    pub fn create(path: &Path) -> Result<Self, AcquisitionError> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write(&mut self, time_s: f64, kind: LogKind, payload: impl Into<String>) -> Result<(), AcquisitionError> {
        let entry = LogEntry {
            time_s,
            kind,
            payload: payload.into(),
        };
        writeln!(self.out, "{}", entry.render())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), AcquisitionError> {
        self.out.flush()?;
        Ok(())
    }
}
