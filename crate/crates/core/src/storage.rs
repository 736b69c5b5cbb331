//! Edge telemetry store: one partition per device, rows ordered by
//! timestamp. Appends to a partition are serialized and must not go back
//! in time.

use std::collections::HashMap;
use std::ops::Bound;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::identity::Did;
use crate::telemetry::TelemetryRecord;
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StorageError {
    #[error("record at {got} is older than latest {latest} for {device}")]
    NonMonotoneTimestamp { device: Did, latest: Timestamp, got: Timestamp },
}

pub trait TelemetryStore: Send + Sync {
    fn append(&self, record: TelemetryRecord) -> Result<(), StorageError>;

    /// Records of one device with timestamps inside the bounds, in order.
    fn scan(&self, device: &Did, from: Bound<Timestamp>, to: Bound<Timestamp>) -> Vec<TelemetryRecord>;

    fn latest(&self, device: &Did) -> Option<Timestamp>;
}

#[derive(Default)]
pub struct MemoryStore {
    partitions: RwLock<HashMap<Did, Arc<Mutex<Vec<TelemetryRecord>>>>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn partition(&self, device: &Did) -> Option<Arc<Mutex<Vec<TelemetryRecord>>>> {
        self.partitions.read().get(device).cloned()
    }

    pub fn len(&self, device: &Did) -> usize {
        self.partition(device).map_or(0, |p| p.lock().len())
    }
}

impl TelemetryStore for MemoryStore {
    fn append(&self, record: TelemetryRecord) -> Result<(), StorageError> {
        let partition = match self.partition(&record.device_did) {
            Some(p) => p,
            None => self.partitions.write().entry(record.device_did.clone()).or_default().clone(),
        };
        let mut rows = partition.lock();
        if let Some(last) = rows.last() {
            if record.timestamp < last.timestamp {
                return Err(StorageError::NonMonotoneTimestamp {
                    device: record.device_did,
                    latest: last.timestamp,
                    got: record.timestamp,
                });
            }
        }
        rows.push(record);
        Ok(())
    }

    fn scan(&self, device: &Did, from: Bound<Timestamp>, to: Bound<Timestamp>) -> Vec<TelemetryRecord> {
        let Some(partition) = self.partition(device) else {
            return Vec::new();
        };
        let rows = partition.lock();
        let lo = match from {
            Bound::Included(t) => rows.partition_point(|r| r.timestamp < t),
            Bound::Excluded(t) => rows.partition_point(|r| r.timestamp <= t),
            Bound::Unbounded => 0,
        };
        let hi = match to {
            Bound::Included(t) => rows.partition_point(|r| r.timestamp <= t),
            Bound::Excluded(t) => rows.partition_point(|r| r.timestamp < t),
            Bound::Unbounded => rows.len(),
        };
        if lo >= hi {
            return Vec::new();
        }
        rows[lo..hi].to_vec()
    }

    fn latest(&self, device: &Did) -> Option<Timestamp> {
        self.partition(device).and_then(|p| p.lock().last().map(|r| r.timestamp))
    }
}
