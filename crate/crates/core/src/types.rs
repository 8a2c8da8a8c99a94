// SPDX-License-Identifier: Apache-2.0

//! Identifier newtypes and granule arithmetic shared by every module.

use std::fmt;

use serde::{Deserialize, Serialize};

pub const GRANULE_SHIFT: u32 = 12;
pub const GRANULE_SIZE: u64 = 1 << GRANULE_SHIFT;

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident, $inner:ty, $prefix:literal) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_newtype!(
    /// Realm (or normal-world) VM identifier.
    VmId, u32, "vm"
);
id_newtype!(
    /// Platform device identifier. A device's SMMU stream shares the number.
    DeviceId, u32, "dev"
);
id_newtype!(
    /// Physical interrupt number; virtual interrupts reuse the physical number.
    InterruptId, u32, "irq"
);

/// SMMU stream identifier. Every DMA-capable device owns exactly one stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StreamId(pub u32);

impl From<DeviceId> for StreamId {
    fn from(d: DeviceId) -> Self {
        StreamId(d.0)
    }
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stream{}", self.0)
    }
}

/// Index of a 4 KiB physical granule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Granule(pub u64);

impl Granule {
    pub fn of(addr: u64) -> Self {
        Granule(addr >> GRANULE_SHIFT)
    }

    pub fn base(self) -> u64 {
        self.0 << GRANULE_SHIFT
    }
}

/// Half-open range of granules `[start, start + count)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GranuleRange {
    pub start: u64,
    pub count: u64,
}

impl GranuleRange {
    pub fn new(start: u64, count: u64) -> Self {
        GranuleRange { start, count }
    }

    pub fn end(&self) -> u64 {
        self.start + self.count
    }

    pub fn contains(&self, granule: u64) -> bool {
        granule >= self.start && granule < self.end()
    }

    pub fn contains_addr(&self, addr: u64) -> bool {
        self.contains(addr >> GRANULE_SHIFT)
    }

    pub fn overlaps(&self, other: &GranuleRange) -> bool {
        self.start < other.end() && other.start < self.end()
    }

    pub fn base_addr(&self) -> u64 {
        self.start << GRANULE_SHIFT
    }

    pub fn len_bytes(&self) -> u64 {
        self.count << GRANULE_SHIFT
    }

    pub fn iter(&self) -> impl Iterator<Item = u64> {
        self.start..self.end()
    }
}

impl fmt::Display for GranuleRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:#x}+{}]", self.start, self.count)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    Read,
    Write,
}

/// Evaluation setups: normal-world VM baseline, realm VM baseline, and the
/// full memory + interrupt isolation protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Bn,
    Br,
    Dmi,
}

impl Mode {
    pub fn is_realm(self) -> bool {
        !matches!(self, Mode::Bn)
    }

    pub fn isolates(self) -> bool {
        matches!(self, Mode::Dmi)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Bn => "bn",
            Mode::Br => "br",
            Mode::Dmi => "dmi",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bn" => Ok(Mode::Bn),
            "br" => Ok(Mode::Br),
            "dmi" => Ok(Mode::Dmi),
            other => Err(format!("unknown mode `{other}` (expected bn, br or dmi)")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn granule_of_address() {
        assert_eq!(Granule::of(0x3fff), Granule(3));
        assert_eq!(Granule(5).base(), 0x5000);
    }

    #[test]
    fn range_overlap() {
        let a = GranuleRange::new(10, 4);
        assert!(a.overlaps(&GranuleRange::new(13, 1)));
        assert!(!a.overlaps(&GranuleRange::new(14, 2)));
        assert!(a.contains_addr(0xd123));
        assert!(!a.contains(14));
    }
}
