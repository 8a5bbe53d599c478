//! Facility registry access for the Colo filter chain.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::Result;
use crate::formats::read_facilities;
use crate::selection::FacilityRecord;

/// Source of facility metadata.
pub trait FacilityRegistry {
    fn lookup(&self, ids: &BTreeSet<u32>) -> Result<Vec<FacilityRecord>>;
}

/// Registry snapshot held in memory, usually loaded from a facilities CSV.
/// Unknown ids are left out of lookups.
#[derive(Debug, Clone, Default)]
pub struct SnapshotRegistry {
    records: BTreeMap<u32, FacilityRecord>,
}

impl SnapshotRegistry {
    pub fn new(records: Vec<FacilityRecord>) -> Self {
        SnapshotRegistry {
            records: records.into_iter().map(|r| (r.facility_id, r)).collect(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(Self::new(read_facilities(path)?))
    }

    pub fn all(&self) -> Vec<FacilityRecord> {
        self.records.values().cloned().collect()
    }
}

impl FacilityRegistry for SnapshotRegistry {
    fn lookup(&self, ids: &BTreeSet<u32>) -> Result<Vec<FacilityRecord>> {
        Ok(ids.iter().filter_map(|id| self.records.get(id).cloned()).collect())
    }
}
