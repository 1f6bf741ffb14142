//! B+ tree key-value store on raw blocks.

pub mod layout;
pub mod tree;

use std::collections::HashMap;

use crate::nvme::{Block, BLOCK_SIZE};

pub use layout::{Value, FANOUT, LEAF_CAPACITY, VALUE_SIZE};
pub use tree::{
    BTree, DeleteOutcome, IntegrityReport, LookupTrace, PutOutcome, TreeError, Violation,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("block {lba} outside extent of {count} blocks")]
    OutOfRange { lba: u64, count: u64 },
    #[error("device error: {0}")]
    Device(String),
}

/// Slot-relative block storage. Reads and writes return the virtual time
/// they took in nanoseconds.
pub trait BlockStore {
    fn block_count(&self) -> u64;
    fn read(&mut self, lba: u64, buf: &mut Block) -> Result<u64, StoreError>;
    fn write(&mut self, lba: u64, buf: &Block) -> Result<u64, StoreError>;
}

/// Zero-latency in-memory store for tests and offline tools.
#[derive(Debug, Clone, Default)]
pub struct MemStore {
    count: u64,
    blocks: HashMap<u64, Box<Block>>,
}

impl MemStore {
    pub fn new(count: u64) -> Self {
        MemStore {
            count,
            blocks: HashMap::new(),
        }
    }

    /// Sorted copy of every written block.
    pub fn snapshot(&self) -> Vec<(u64, Box<Block>)> {
        let mut v: Vec<_> = self.blocks.iter().map(|(k, b)| (*k, b.clone())).collect();
        v.sort_by_key(|e| e.0);
        v
    }

    fn check(&self, lba: u64) -> Result<(), StoreError> {
        if lba >= self.count {
            return Err(StoreError::OutOfRange {
                lba,
                count: self.count,
            });
        }
        Ok(())
    }
}

impl BlockStore for MemStore {
    fn block_count(&self) -> u64 {
        self.count
    }

    fn read(&mut self, lba: u64, buf: &mut Block) -> Result<u64, StoreError> {
        self.check(lba)?;
        match self.blocks.get(&lba) {
            Some(b) => buf.copy_from_slice(&b[..]),
            None => buf.fill(0),
        }
        Ok(0)
    }

    fn write(&mut self, lba: u64, buf: &Block) -> Result<u64, StoreError> {
        self.check(lba)?;
        let mut b = Box::new([0u8; BLOCK_SIZE]);
        b.copy_from_slice(buf);
        self.blocks.insert(lba, b);
        Ok(0)
    }
}
