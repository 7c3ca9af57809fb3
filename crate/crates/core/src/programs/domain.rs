use std::collections::BTreeMap;

use super::ScheduleError;
use crate::address::{Address, PAGE_SIZE};

pub type DomainId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DomainKind {
    UserProcess,
    Kernel,
}

/// A virtual page range aliased onto physical frames that a peer domain
/// also maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SharedRegion {
    pub vaddr: Address,
    pub paddr: Address,
    pub pages: u64,
    pub peer: DomainId,
}

impl SharedRegion {
    pub fn contains(&self, vaddr: Address) -> bool {
        let start = self.vaddr.page_base().value();
        (start..start + self.pages * PAGE_SIZE).contains(&vaddr.value())
    }
}

/// An isolation context with its own page table.
///
/// Unless a page is mapped explicitly, virtual frame `v` lives at physical
/// frame `v + frame_offset`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Domain {
    pub id: DomainId,
    pub kind: DomainKind,
    pub frame_offset: u64,
    explicit: BTreeMap<u64, u64>,
    shared: Vec<SharedRegion>,
}

impl Domain {
    pub fn new(id: DomainId, kind: DomainKind, frame_offset: u64) -> Self {
        Self {
            id,
            kind,
            frame_offset,
            explicit: BTreeMap::new(),
            shared: Vec::new(),
        }
    }

    pub fn shared_regions(&self) -> &[SharedRegion] {
        &self.shared
    }

    pub fn translate_frame(&self, vframe: u64) -> u64 {
        self.explicit
            .get(&vframe)
            .copied()
            .unwrap_or_else(|| vframe.wrapping_add(self.frame_offset))
    }

    pub fn translate(&self, vaddr: Address) -> Address {
        Address::from_frame(self.translate_frame(vaddr.page_frame())) + vaddr.page_offset()
    }

    /// Maps one virtual frame explicitly, refusing mappings that would give a
    /// physical frame two virtual names in this domain.
    pub fn map_page(&mut self, vframe: u64, pframe: u64) -> Result<(), ScheduleError> {
        let conflict = ScheduleError::NonInjective {
            domain: self.id,
            vframe,
            pframe,
        };
        if self
            .explicit
            .iter()
            .any(|(&v, &p)| p == pframe && v != vframe)
        {
            return Err(conflict);
        }
        // The frame's identity-plus-offset owner, unless it was remapped away.
        if let Some(default_owner) = pframe.checked_sub(self.frame_offset) {
            if default_owner != vframe && !self.explicit.contains_key(&default_owner) {
                return Err(conflict);
            }
        }
        self.explicit.insert(vframe, pframe);
        Ok(())
    }

    /// Physical frames reachable through more than one virtual frame. Always
    /// empty for a domain built through [`Domain::map_page`].
    pub fn aliased_frames(&self) -> Vec<u64> {
        let mut seen: BTreeMap<u64, u64> = BTreeMap::new();
        let mut aliased = Vec::new();
        for (&v, &p) in &self.explicit {
            if let Some(&other) = seen.get(&p) {
                if other != v {
                    aliased.push(p);
                }
            }
            seen.insert(p, v);
        }
        aliased
    }
}

/// Every domain on the core.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Domains {
    domains: Vec<Domain>,
}

impl Domains {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a domain placed in its own region of physical memory.
    pub fn add(&mut self, kind: DomainKind) -> DomainId {
        let id = self.domains.len() as DomainId;
        // 2^28 frames (1 TiB) of physical space per domain.
        let frame_offset = (u64::from(id) + 1) << 28;
        self.domains.push(Domain::new(id, kind, frame_offset));
        id
    }

    pub fn get(&self, id: DomainId) -> Result<&Domain, ScheduleError> {
        self.domains
            .get(id as usize)
            .ok_or(ScheduleError::UnknownDomain(id))
    }

    pub fn get_mut(&mut self, id: DomainId) -> Result<&mut Domain, ScheduleError> {
        self.domains
            .get_mut(id as usize)
            .ok_or(ScheduleError::UnknownDomain(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Domain> {
        self.domains.iter()
    }

    /// Maps `pages` physical frames starting at `paddr` into `a` at `va` and
    /// into `b` at `vb`.
    pub fn share(
        &mut self,
        a: DomainId,
        va: Address,
        b: DomainId,
        vb: Address,
        paddr: Address,
        pages: u64,
    ) -> Result<(), ScheduleError> {
        self.get(a)?;
        self.get(b)?;
        for (id, v, peer) in [(a, va, b), (b, vb, a)] {
            let dom = self.get_mut(id)?;
            for k in 0..pages {
                dom.map_page(v.page_frame() + k, paddr.page_frame() + k)?;
            }
            dom.shared.push(SharedRegion {
                vaddr: v.page_base(),
                paddr: paddr.page_base(),
                pages,
                peer,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_mapping_is_identity_plus_offset() {
        let d = Domain::new(0, DomainKind::UserProcess, 0x100);
        assert_eq!(d.translate(Address(0x5123)), Address(0x105123));
    }

    #[test]
    fn shared_region_aliases_same_frames() {
        let mut ds = Domains::new();
        let a = ds.add(DomainKind::UserProcess);
        let b = ds.add(DomainKind::UserProcess);
        let phys = Address::from_frame(0x4242);
        ds.share(a, Address(0x7000_0000), b, Address(0x9000_0000), phys, 2)
            .unwrap();
        let pa = ds.get(a).unwrap().translate(Address(0x7000_1040));
        let pb = ds.get(b).unwrap().translate(Address(0x9000_1040));
        assert_eq!(pa, pb);
        assert_eq!(pa, phys + 0x1040);
        assert_eq!(ds.get(a).unwrap().shared_regions()[0].peer, b);
        assert!(ds.get(a).unwrap().aliased_frames().is_empty());
    }

    #[test]
    fn aliasing_within_one_domain_is_rejected() {
        let mut d = Domain::new(3, DomainKind::UserProcess, 0x1000);
        d.map_page(10, 99).unwrap();
        assert!(d.map_page(11, 99).is_err());
        // Already the default image of virtual frame 12.
        assert!(d.map_page(13, 0x1000 + 12).is_err());
    }

    #[test]
    fn unknown_domain() {
        let ds = Domains::new();
        assert_eq!(ds.get(4).unwrap_err(), ScheduleError::UnknownDomain(4));
    }
}
