//! Byte addresses and the line/page views every other module reasons in.

use std::fmt;
use std::ops::{Add, Sub};

/// Cache line size in bytes.
pub const LINE_SIZE: u64 = 64;
/// Page size in bytes.
pub const PAGE_SIZE: u64 = 4096;
/// Cache lines per page.
pub const LINES_PER_PAGE: u64 = PAGE_SIZE / LINE_SIZE;

/// A 64-bit byte address. Used for instruction pointers, virtual and
/// physical data addresses alike; which one is meant is carried by context.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Address(pub u64);

impl Address {
    pub const fn new(value: u64) -> Self {
        Self(value)
    }

    pub const fn value(self) -> u64 {
        self.0
    }

    /// Global cache-line number (`value >> 6`).
    pub const fn line_index(self) -> u64 {
        self.0 >> 6
    }

    /// Page frame number (`value >> 12`).
    pub const fn page_frame(self) -> u64 {
        self.0 >> 12
    }

    /// Offset inside the 4 KiB page.
    pub const fn page_offset(self) -> u64 {
        self.0 & (PAGE_SIZE - 1)
    }

    /// Line number inside the page, `0..64`.
    pub const fn line_in_page(self) -> u64 {
        self.page_offset() / LINE_SIZE
    }

    /// Low 8 bits, the part of an instruction pointer the prefetcher indexes by.
    pub const fn ip_tag(self) -> u8 {
        (self.0 & 0xFF) as u8
    }

    /// Start of the page holding this address.
    pub const fn page_base(self) -> Address {
        Address(self.0 & !(PAGE_SIZE - 1))
    }

    /// Start of the cache line holding this address.
    pub const fn line_base(self) -> Address {
        Address(self.0 & !(LINE_SIZE - 1))
    }

    pub const fn from_frame(frame: u64) -> Address {
        Address(frame << 12)
    }

    /// Byte-signed offset, wrapping like hardware address arithmetic.
    pub const fn offset(self, delta: i64) -> Address {
        Address(self.0.wrapping_add_signed(delta))
    }

    /// Signed byte distance `self - earlier`.
    pub const fn distance_from(self, earlier: Address) -> i64 {
        self.0.wrapping_sub(earlier.0) as i64
    }
}

impl Add<u64> for Address {
    type Output = Address;

    fn add(self, rhs: u64) -> Address {
        Address(self.0.wrapping_add(rhs))
    }
}

impl Sub<u64> for Address {
    type Output = Address;

    fn sub(self, rhs: u64) -> Address {
        Address(self.0.wrapping_sub(rhs))
    }
}

impl From<u64> for Address {
    fn from(value: u64) -> Self {
        Address(value)
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

impl fmt::LowerHex for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::LowerHex::fmt(&self.0, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_views() {
        let a = Address(0x1234_5678);
        assert_eq!(a.line_index(), 0x1234_5678 >> 6);
        assert_eq!(a.page_frame(), 0x12345);
        assert_eq!(a.page_offset(), 0x678);
        assert_eq!(a.line_in_page(), 0x678 / 64);
        assert_eq!(a.ip_tag(), 0x78);
        assert_eq!(a.page_base(), Address(0x1234_5000));
    }

    #[test]
    fn signed_distance() {
        let a = Address(0x1000);
        let b = Address(0x1000 + 448);
        assert_eq!(b.distance_from(a), 448);
        assert_eq!(a.distance_from(b), -448);
        assert_eq!(a.offset(-64), Address(0x1000 - 64));
    }
}
