//! Reverse-engineering microbenchmarks, the three attack variants, and the
//! flush-on-switch mitigation study.

mod attack;
mod mitigation;
mod reveng;
mod trace;

pub use attack::{
    channel_supported, run_attack, AttackConfig, AttackOutcome, Channel, Inference, RoundOutcome,
    Variant,
};
pub use mitigation::{
    mitigation_eval, period_from_micros, MitigationConfig, MitigationReport, Workload,
    DEFAULT_CLOCK_GHZ,
};
pub use reveng::{
    rev_conf_stride, rev_entries, rev_indexing, rev_page, rev_page_table, rev_replacement,
    ConfStrideLog, IndexingReport, IndexingRow, OffsetMode, PagePool, PageTrial, ReplacementReport,
    TlbState, Trigger,
};
pub use trace::{parse_trace, read_trace, TraceRecord};

use thiserror::Error;

use crate::cache::CacheError;
use crate::programs::{ProgramError, ScheduleError};
use crate::sidechannel::SideChannelError;
use crate::uarch::UarchError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(
        "variant {variant} cannot be observed through {channel}; supported channels: {supported}"
    )]
    Unsupported {
        variant: Variant,
        channel: Channel,
        supported: String,
    },
    #[error("invalid parameter: {0}")]
    BadParameter(String),
    #[error("noise probability {name}={value} is outside [0, 1]")]
    BadNoise { name: &'static str, value: f64 },
    #[error("flush period of {period} cycles is shorter than the {reset} cycles one reset takes")]
    PeriodTooShort { period: u64, reset: u64 },
    #[error("trace line {line}: {message}")]
    Trace { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    SideChannel(#[from] SideChannelError),
    #[error(transparent)]
    Uarch(#[from] UarchError),
}

/// Disturbances the simulated core would otherwise never see.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NoiseModel {
    /// Chance that each observed line or set loses its content to unrelated
    /// activity before it is measured.
    pub p_evict: f64,
    /// Chance per round that one random observed line is brought in by
    /// unrelated activity.
    pub p_extra_load: f64,
    /// Demand loads also bring in their neighbouring lines.
    pub next_line_noise: bool,
    pub seed: u64,
}

impl NoiseModel {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        for (name, value) in [
            ("p_evict", self.p_evict),
            ("p_extra_load", self.p_extra_load),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(ExperimentError::BadNoise { name, value });
            }
        }
        Ok(())
    }

    pub fn is_silent(&self) -> bool {
        self.p_evict == 0.0 && self.p_extra_load == 0.0 && !self.next_line_noise
    }
}
