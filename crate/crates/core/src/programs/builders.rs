use std::ops::Range;

use super::{AddrExpr, Program, ProgramError, SecretSource, Step};
use crate::address::{Address, LINES_PER_PAGE, LINE_SIZE, PAGE_SIZE};
use crate::uarch::MAX_STRIDE;

/// Shortest stride that cannot be mistaken for adjacent-line prefetching.
pub const MIN_STRIDE_LINES: i64 = 5;

/// In-page byte offsets of a strided training run that finishes on the last
/// line of the page (the first line for negative strides).
pub fn training_offsets(stride: i64, iterations: u32) -> Result<Vec<u64>, ProgramError> {
    if stride.unsigned_abs() > MAX_STRIDE as u64 {
        return Err(ProgramError::StrideOutOfRange(stride));
    }
    if stride.unsigned_abs() < (MIN_STRIDE_LINES as u64) * LINE_SIZE {
        return Err(ProgramError::StrideTooShort(stride));
    }
    if iterations == 0 {
        return Err(ProgramError::NoIterations);
    }
    let span = stride.unsigned_abs() * u64::from(iterations - 1);
    let last_line = (LINES_PER_PAGE - 1) * LINE_SIZE;
    if span > last_line {
        return Err(ProgramError::DoesNotFit { stride, iterations });
    }
    let offsets = (0..u64::from(iterations)).map(|k| k * stride.unsigned_abs());
    Ok(if stride > 0 {
        offsets.map(|o| last_line - span + o).collect()
    } else {
        offsets.map(|o| span - o).collect()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GadgetSpec {
    pub if_tag: u8,
    pub else_tag: u8,
    /// Bytes.
    pub stride_if: i64,
    pub stride_else: i64,
    pub iterations: u32,
    /// Page the training loads walk through.
    pub data_page: Address,
    /// Page holding the gadget code; the two load IPs sit at its tag offsets.
    pub code_base: Address,
}

impl Default for GadgetSpec {
    fn default() -> Self {
        Self {
            if_tag: 0xA0,
            else_tag: 0xB4,
            stride_if: 7 * LINE_SIZE as i64,
            stride_else: 13 * LINE_SIZE as i64,
            iterations: 3,
            data_page: Address(0x1000_0000),
            code_base: Address(0x40_0000),
        }
    }
}

/// Attacker training code for a pair of secret-dependent loads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gadget {
    pub program: Program,
    pub if_ip: Address,
    pub else_ip: Address,
    pub stride_if: i64,
    pub stride_else: i64,
    /// Equal strides: the two paths leave the same footprint.
    pub indistinguishable: bool,
}

pub fn build_gadget(spec: &GadgetSpec) -> Result<Gadget, ProgramError> {
    if spec.if_tag == spec.else_tag {
        return Err(ProgramError::SameTag(spec.if_tag));
    }
    let if_offsets = training_offsets(spec.stride_if, spec.iterations)?;
    let else_offsets = training_offsets(spec.stride_else, spec.iterations)?;
    let code = spec.code_base.page_base();
    let if_ip = code + u64::from(spec.if_tag);
    let else_ip = code + u64::from(spec.else_tag);
    let page = spec.data_page.page_base();
    let steps = if_offsets
        .iter()
        .zip(&else_offsets)
        .flat_map(|(&a, &b)| {
            [
                Step::Load {
                    ip: if_ip,
                    addr: AddrExpr::Fixed(page + a),
                },
                Step::Load {
                    ip: else_ip,
                    addr: AddrExpr::Fixed(page + b),
                },
            ]
        })
        .collect();
    Ok(Gadget {
        program: Program::new("gadget", steps),
        if_ip,
        else_ip,
        stride_if: spec.stride_if,
        stride_else: spec.stride_else,
        indistinguishable: spec.stride_if == spec.stride_else,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VictimSpec {
    pub if_ip: Address,
    pub else_ip: Address,
    pub array_page: Address,
    /// Lines the per-round access is drawn from.
    pub lines: Range<u64>,
}

fn check_lines(lines: &Range<u64>) -> Result<(), ProgramError> {
    if lines.is_empty() || lines.end > LINES_PER_PAGE {
        return Err(ProgramError::BadLineRange {
            start: lines.start,
            end: lines.end,
        });
    }
    Ok(())
}

/// `if (secret) array[x] else array[y]`, one bit per run.
pub fn build_victim(secret: SecretSource, spec: &VictimSpec) -> Result<Program, ProgramError> {
    check_lines(&spec.lines)?;
    let addr = AddrExpr::RandomLine {
        page: spec.array_page.page_base(),
        lines: spec.lines.clone(),
    };
    let steps = vec![Step::Branch {
        taken: vec![Step::Load {
            ip: spec.if_ip,
            addr: addr.clone(),
        }],
        not_taken: vec![Step::Load {
            ip: spec.else_ip,
            addr,
        }],
    }];
    Ok(Program::new("victim", steps).with_secret(secret))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelSpec {
    pub ip: Address,
    /// Kernel-side virtual address of the shared page.
    pub shared_page: Address,
    pub lines: Range<u64>,
}

/// A system call that touches the shared page only when its bit is set.
pub fn build_kernel_syscall(
    secret: SecretSource,
    spec: &KernelSpec,
) -> Result<Program, ProgramError> {
    check_lines(&spec.lines)?;
    let steps = vec![Step::Branch {
        taken: vec![Step::Load {
            ip: spec.ip,
            addr: AddrExpr::RandomLine {
                page: spec.shared_page.page_base(),
                lines: spec.lines.clone(),
            },
        }],
        not_taken: vec![],
    }];
    Ok(Program::new("syscall", steps).with_secret(secret))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupLayout {
    pub code_base: Address,
    pub data_base: Address,
    /// Distance between the data pages of consecutive IPs; 0 puts every IP on
    /// the same page.
    pub page_step: u64,
    pub stride: i64,
    pub iterations: u32,
}

impl Default for GroupLayout {
    fn default() -> Self {
        Self {
            code_base: Address(0x50_0000),
            data_base: Address(0x2000_0000),
            page_step: PAGE_SIZE,
            stride: 11 * LINE_SIZE as i64,
            iterations: 3,
        }
    }
}

/// Training programs for `n_groups` groups of `group_size` loads whose tags
/// together run through every 8-bit value. Each load is trained to
/// completion before the next one starts.
pub fn ip_matching_groups(
    n_groups: usize,
    group_size: usize,
    layout: &GroupLayout,
) -> Result<Vec<Program>, ProgramError> {
    if group_size > 256 {
        return Err(ProgramError::GroupTooLarge(group_size));
    }
    if n_groups * group_size < 256 {
        return Err(ProgramError::CoverageImpossible {
            n_groups,
            group_size,
        });
    }
    let offsets = training_offsets(layout.stride, layout.iterations)?;
    let code = layout.code_base.page_base();
    let data = layout.data_base.page_base();
    Ok((0..n_groups)
        .map(|g| {
            let steps = (0..group_size)
                .flat_map(|j| {
                    let n = (g * group_size + j) as u64;
                    let ip = code + (g as u64) * PAGE_SIZE + n % 256;
                    let page = data + n * layout.page_step;
                    offsets.iter().map(move |&o| Step::Load {
                        ip,
                        addr: AddrExpr::Fixed(page + o),
                    })
                })
                .collect();
            Program::new(format!("group-{g}"), steps)
        })
        .collect())
}
