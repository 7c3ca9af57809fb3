//! Bit-PLRU over the prefetcher's history table.
//!
//! Each slot carries one MRU bit. Touching a slot sets its bit; if that would
//! leave every bit set, all the other bits are cleared first. The victim is the
//! lowest-index slot whose bit is clear.

use super::table::PrefetcherEntry;
use super::UarchError;

pub fn plru_touch(entries: &mut [PrefetcherEntry], slot: usize) {
    let all_others_set = entries
        .iter()
        .enumerate()
        .all(|(i, e)| i == slot || e.mru_bit);
    if all_others_set {
        for e in entries.iter_mut() {
            e.mru_bit = false;
        }
    }
    entries[slot].mru_bit = true;
}

/// Replacement victim among a completely valid table.
pub fn plru_select_victim(entries: &[PrefetcherEntry]) -> Result<usize, UarchError> {
    let valid = entries.iter().filter(|e| e.valid).count();
    if valid < entries.len() {
        return Err(UarchError::TableNotFull { valid });
    }
    // A full touch never leaves every bit set, so a clear bit always exists.
    Ok(entries
        .iter()
        .position(|e| !e.mru_bit)
        .expect("bit-PLRU invariant: at least one MRU bit is clear"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::address::Address;
    use crate::uarch::TABLE_ENTRIES;

    fn full_table() -> Vec<PrefetcherEntry> {
        (0..TABLE_ENTRIES)
            .map(|i| PrefetcherEntry {
                ip_tag: i as u8,
                last_addr: Address(0),
                stride: 0,
                confidence: 0,
                valid: true,
                mru_bit: false,
            })
            .collect()
    }

    #[test]
    fn touching_every_slot_in_order_resets_to_the_last() {
        let mut t = full_table();
        for slot in 0..TABLE_ENTRIES {
            plru_touch(&mut t, slot);
        }
        let set: Vec<usize> = (0..TABLE_ENTRIES).filter(|&i| t[i].mru_bit).collect();
        assert_eq!(set, vec![TABLE_ENTRIES - 1]);
        assert_eq!(plru_select_victim(&t), Ok(0));
    }

    #[test]
    fn victim_is_lowest_clear_bit() {
        let mut t = full_table();
        for slot in [0, 1, 2, 5] {
            plru_touch(&mut t, slot);
        }
        assert_eq!(plru_select_victim(&t), Ok(3));
    }

    #[test]
    fn victim_requires_a_full_table() {
        let mut t = full_table();
        for e in t.iter_mut().skip(1) {
            e.valid = false;
        }
        assert_eq!(
            plru_select_victim(&t),
            Err(UarchError::TableNotFull { valid: 1 })
        );
    }

    #[test]
    fn retouching_a_set_bit_changes_nothing() {
        let mut t = full_table();
        plru_touch(&mut t, 4);
        let before: Vec<bool> = t.iter().map(|e| e.mru_bit).collect();
        plru_touch(&mut t, 4);
        let after: Vec<bool> = t.iter().map(|e| e.mru_bit).collect();
        assert_eq!(before, after);
    }
}
