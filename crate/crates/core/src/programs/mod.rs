//! Victims, attacker gadgets and kernel code as small step programs, the
//! address spaces they run in, and the scheduler that time-slices them onto
//! one simulated core.

mod builders;
mod domain;
mod schedule;

pub use builders::{
    build_gadget, build_kernel_syscall, build_victim, ip_matching_groups, training_offsets, Gadget,
    GadgetSpec, GroupLayout, KernelSpec, VictimSpec, MIN_STRIDE_LINES,
};
pub use domain::{Domain, DomainId, DomainKind, Domains, SharedRegion};
pub use schedule::{
    run_schedule, Event, EventKind, EventLog, FlushPolicy, Schedule, Simulator, Slice,
};

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::address::Address;
use crate::uarch::UarchError;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProgramError {
    #[error("if and else loads must use different IP tags (both {0:#04x})")]
    SameTag(u8),
    #[error("stride {0} bytes does not fit the 13-bit signed stride field")]
    StrideOutOfRange(i64),
    #[error("stride {0} bytes is shorter than 5 cache lines and would be confused with adjacent-line prefetching")]
    StrideTooShort(i64),
    #[error("a training sequence needs at least one iteration")]
    NoIterations,
    #[error("{iterations} loads with stride {stride} do not fit in one page")]
    DoesNotFit { stride: i64, iterations: u32 },
    #[error("{n_groups} groups of {group_size} cannot cover all 256 IP tags")]
    CoverageImpossible { n_groups: usize, group_size: usize },
    #[error("a group of {0} loads cannot have distinct 8-bit tags")]
    GroupTooLarge(usize),
    #[error("line range {start}..{end} is empty or leaves the page")]
    BadLineRange { start: u64, end: u64 },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("schedule references unknown domain {0}")]
    UnknownDomain(DomainId),
    #[error("program `{0}` branches on a secret but has no secret source")]
    MissingSecret(String),
    #[error("secret source of program `{0}` is exhausted")]
    SecretExhausted(String),
    #[error("virtual frame {vframe:#x} of domain {domain} cannot map to physical frame {pframe:#x} without aliasing")]
    NonInjective {
        domain: DomainId,
        vframe: u64,
        pframe: u64,
    },
    #[error(transparent)]
    Uarch(#[from] UarchError),
}

/// Ground-truth bits driving secret-dependent branches, consumed in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SecretSource {
    bits: Vec<bool>,
    cursor: usize,
}

impl SecretSource {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits, cursor: 0 }
    }

    pub fn random(seed: u64, len: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_bits((0..len).map(|_| rng.gen()).collect())
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn consumed(&self) -> &[bool] {
        &self.bits[..self.cursor]
    }

    pub fn remaining(&self) -> usize {
        self.bits.len() - self.cursor
    }

    pub fn next_bit(&mut self) -> Option<bool> {
        let bit = self.bits.get(self.cursor).copied()?;
        self.cursor += 1;
        Some(bit)
    }
}

/// Where a load goes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AddrExpr {
    Fixed(Address),
    /// A uniformly drawn line of `page` in `lines`, fresh on every execution.
    RandomLine {
        page: Address,
        lines: Range<u64>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Step {
    Load {
        ip: Address,
        addr: AddrExpr,
    },
    /// Consumes the next secret bit: `taken` runs on 1, `not_taken` on 0.
    Branch {
        taken: Vec<Step>,
        not_taken: Vec<Step>,
    },
    Flush(Address),
    FlushPage(Address),
    Observe(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    pub name: String,
    pub steps: Vec<Step>,
    pub secret: Option<SecretSource>,
}

impl Program {
    pub fn new(name: impl Into<String>, steps: Vec<Step>) -> Self {
        Self {
            name: name.into(),
            steps,
            secret: None,
        }
    }

    pub fn with_secret(mut self, secret: SecretSource) -> Self {
        self.secret = Some(secret);
        self
    }

    pub fn has_branch(&self) -> bool {
        fn any_branch(steps: &[Step]) -> bool {
            steps.iter().any(|s| matches!(s, Step::Branch { .. }))
        }
        any_branch(&self.steps)
    }

    /// Every load IP reachable in the program, in program order.
    pub fn load_ips(&self) -> Vec<Address> {
        fn walk(steps: &[Step], out: &mut Vec<Address>) {
            for s in steps {
                match s {
                    Step::Load { ip, .. } => out.push(*ip),
                    Step::Branch { taken, not_taken } => {
                        walk(taken, out);
                        walk(not_taken, out);
                    }
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.steps, &mut out);
        out
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.has_branch() && self.secret.is_none() {
            return Err(ScheduleError::MissingSecret(self.name.clone()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn secret_source_is_consumed_in_order() {
        let mut s = SecretSource::from_bits(vec![true, false]);
        assert_eq!(s.next_bit(), Some(true));
        assert_eq!(s.next_bit(), Some(false));
        assert_eq!(s.next_bit(), None);
        assert_eq!(s.consumed(), &[true, false]);
    }

    #[test]
    fn random_secret_is_seeded() {
        assert_eq!(SecretSource::random(9, 64), SecretSource::random(9, 64));
        assert_ne!(SecretSource::random(9, 64), SecretSource::random(10, 64));
    }

    #[test]
    fn branch_without_secret_is_rejected() {
        let p = Program::new(
            "v",
            vec![Step::Branch {
                taken: vec![],
                not_taken: vec![],
            }],
        );
        assert_eq!(p.validate(), Err(ScheduleError::MissingSecret("v".into())));
    }
}
