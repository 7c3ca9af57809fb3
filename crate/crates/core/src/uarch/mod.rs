//! The IP-stride prefetcher state machine and the TLB that gates its
//! page-crossing behaviour.
//!
//! The history table is fully associative with 24 entries, indexed by the low
//! eight bits of the load's instruction pointer. There is no further tag
//! check, so any two loads whose IPs agree in those bits share one entry.

mod plru;
mod table;
mod tlb;

pub use plru::{plru_select_victim, plru_touch};
pub use table::{
    Observation, PrefetchRequest, PrefetchTable, PrefetcherEntry, TrainingOutcome, CONFIDENCE_MAX,
    MAX_STRIDE, TABLE_ENTRIES, TRIGGER_CONFIDENCE,
};
pub use tlb::{Tlb, DEFAULT_TLB_CAPACITY};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum UarchError {
    #[error("the prefetcher needs at least one write port to be reset")]
    ZeroWritePorts,
    #[error("replacement victim requested while {valid} of {TABLE_ENTRIES} entries are valid")]
    TableNotFull { valid: usize },
}
