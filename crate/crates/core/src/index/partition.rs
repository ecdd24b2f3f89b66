//! One fusion graph per (tenant, time bucket); queries fan out and merge.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{FusionIndex, IndexError, IndexNode, IndexParams};
use crate::catalog::TimeGranularity;

/// Partition key: tenant plus time bucket index. `bucket == ALL_TIME`
/// groups every timestamp into one partition.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PartitionKey {
    pub tenant: String,
    pub bucket: i64,
}

impl PartitionKey {
    pub const ALL_TIME: i64 = i64::MIN;

    pub fn new(tenant: impl Into<String>, bucket: i64) -> Self {
        PartitionKey {
            tenant: tenant.into(),
            bucket,
        }
    }
}

/// A set of per-partition fusion graphs for one dataset.
#[derive(Debug, Default)]
pub struct PartitionedIndex {
    parts: BTreeMap<PartitionKey, FusionIndex>,
}

impl PartitionedIndex {
    pub fn new() -> Self {
        PartitionedIndex::default()
    }

    /// Inserts into the node's partition, creating the graph on demand.
    pub fn insert(
        &mut self,
        base_params: &IndexParams,
        key: PartitionKey,
        node: IndexNode,
    ) -> Result<(), IndexError> {
        if !self.parts.contains_key(&key) {
            let mut params = base_params.clone();
            params.partition = key.clone();
            self.parts.insert(key.clone(), FusionIndex::new(params)?);
        }
        self.parts.get_mut(&key).unwrap().insert(node)
    }

    pub fn partition_key_for(
        tenant: &str,
        ts_ms: i64,
        granularity: Option<TimeGranularity>,
    ) -> PartitionKey {
        match granularity {
            Some(g) => PartitionKey::new(tenant, g.bucket(ts_ms)),
            None => PartitionKey::new(tenant, PartitionKey::ALL_TIME),
        }
    }

    pub fn partitions(&self) -> impl Iterator<Item = (&PartitionKey, &FusionIndex)> {
        self.parts.iter()
    }

    pub fn partitions_mut(&mut self) -> impl Iterator<Item = (&PartitionKey, &mut FusionIndex)> {
        self.parts.iter_mut()
    }

    pub fn get(&self, key: &PartitionKey) -> Option<&FusionIndex> {
        self.parts.get(key)
    }

    pub fn get_mut(&mut self, key: &PartitionKey) -> Option<&mut FusionIndex> {
        self.parts.get_mut(key)
    }

    pub fn insert_partition(&mut self, key: PartitionKey, index: FusionIndex) {
        self.parts.insert(key, index);
    }

    pub fn len(&self) -> usize {
        self.parts.values().map(FusionIndex::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn partition_count(&self) -> usize {
        self.parts.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routes_to_partitions() {
        let params = IndexParams::default();
        let mut p = PartitionedIndex::new();
        let day = 24 * 3_600_000i64;
        let k1 = PartitionedIndex::partition_key_for("t1", day, Some(TimeGranularity::Daily));
        let k2 = PartitionedIndex::partition_key_for("t1", 3 * day, Some(TimeGranularity::Daily));
        p.insert(&params, k1.clone(), IndexNode::new("a", vec![1.0, 0.0], 1.0))
            .unwrap();
        p.insert(&params, k2.clone(), IndexNode::new("b", vec![0.0, 1.0], 2.0))
            .unwrap();
        assert_eq!(p.partition_count(), 2);
        assert_eq!(p.get(&k1).unwrap().len(), 1);
        assert_eq!(p.get(&k2).unwrap().len(), 1);
    }
}
