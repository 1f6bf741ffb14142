//! On-block layouts. All integers little-endian.
//!
//! Superblock (slot-relative block 0):
//!
//! | offset | size | field        |
//! |--------|------|--------------|
//! | 0      | 4    | magic `0x48424B56` |
//! | 4      | 4    | layout version (1) |
//! | 8      | 8    | root block   |
//! | 16     | 8    | height (levels, leaf included) |
//! | 24     | 8    | key count    |
//! | 32     | 8    | free-list head (0 = empty) |
//! | 40     | 8    | next never-used block |
//! | 48     | 8    | free-list length |
//! | 56     | 8    | extent size in blocks |
//!
//! Node header (first 16 bytes of every node):
//!
//! | offset | size | field |
//! |--------|------|-------|
//! | 0      | 1    | kind: 1 internal, 2 leaf |
//! | 1      | 1    | zero |
//! | 2      | 2    | n (keys in an internal node, entries in a leaf) |
//! | 4      | 4    | zero |
//! | 8      | 8    | leaf: next leaf block (0 = none); internal: zero |
//!
//! Internal node: keys at `16 + 8*i` (i < 254), children at `2048 + 8*i`
//! (i < 255). Child `i` holds keys in `[key[i-1], key[i])`.
//!
//! Leaf: keys at `16 + 8*i`, values at `256 + 128*i` (i < 29).
//!
//! A free block stores the next free block number in its first 8 bytes.

use crate::nvme::{Block, BLOCK_SIZE};

pub const MAGIC: u32 = 0x4842_4B56;
pub const LAYOUT_VERSION: u32 = 1;
pub const HEADER_SIZE: usize = 16;

pub const KIND_INTERNAL: u8 = 1;
pub const KIND_LEAF: u8 = 2;

pub const VALUE_SIZE: usize = 128;
pub type Value = [u8; VALUE_SIZE];

/// Maximum children of an internal node.
pub const FANOUT: usize = 255;
pub const MAX_INTERNAL_KEYS: usize = FANOUT - 1;
pub const LEAF_CAPACITY: usize = 29;

/// Occupancy floor for non-root nodes: ⌈F/2⌉−1 keys and ⌈L/2⌉ entries.
pub const MIN_INTERNAL_KEYS: usize = FANOUT.div_ceil(2) - 1;
pub const MIN_LEAF_ENTRIES: usize = LEAF_CAPACITY.div_ceil(2);

pub const INTERNAL_KEYS_OFF: usize = HEADER_SIZE;
pub const INTERNAL_CHILDREN_OFF: usize = 2048;
pub const LEAF_KEYS_OFF: usize = HEADER_SIZE;
pub const LEAF_VALUES_OFF: usize = 256;

/// Deepest tree the bundled get program descends.
pub const MAX_HEIGHT: u64 = 8;

pub const SB_ROOT_OFF: usize = 8;
pub const SB_HEIGHT_OFF: usize = 16;

const _: () = assert!(INTERNAL_KEYS_OFF + 8 * MAX_INTERNAL_KEYS <= INTERNAL_CHILDREN_OFF);
const _: () = assert!(INTERNAL_CHILDREN_OFF + 8 * FANOUT <= BLOCK_SIZE);
const _: () = assert!(LEAF_KEYS_OFF + 8 * LEAF_CAPACITY <= LEAF_VALUES_OFF);
const _: () = assert!(LEAF_VALUES_OFF + VALUE_SIZE * LEAF_CAPACITY <= BLOCK_SIZE);

pub fn get_u64(b: &Block, off: usize) -> u64 {
    u64::from_le_bytes(b[off..off + 8].try_into().unwrap())
}

pub fn put_u64(b: &mut Block, off: usize, v: u64) {
    b[off..off + 8].copy_from_slice(&v.to_le_bytes());
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Superblock {
    pub root: u64,
    pub height: u64,
    pub key_count: u64,
    pub free_head: u64,
    pub next_unused: u64,
    pub free_count: u64,
    pub block_count: u64,
}

impl Superblock {
    pub fn encode(&self) -> Box<Block> {
        let mut b = Box::new([0u8; BLOCK_SIZE]);
        b[0..4].copy_from_slice(&MAGIC.to_le_bytes());
        b[4..8].copy_from_slice(&LAYOUT_VERSION.to_le_bytes());
        for (i, v) in [
            self.root,
            self.height,
            self.key_count,
            self.free_head,
            self.next_unused,
            self.free_count,
            self.block_count,
        ]
        .into_iter()
        .enumerate()
        {
            put_u64(&mut b, 8 + 8 * i, v);
        }
        b
    }

    pub fn decode(b: &Block) -> Option<Superblock> {
        if u32::from_le_bytes(b[0..4].try_into().unwrap()) != MAGIC {
            return None;
        }
        let f = |i: usize| get_u64(b, 8 + 8 * i);
        Some(Superblock {
            root: f(0),
            height: f(1),
            key_count: f(2),
            free_head: f(3),
            next_unused: f(4),
            free_count: f(5),
            block_count: f(6),
        })
    }

    /// Blocks still available to the allocator.
    pub fn available(&self) -> u64 {
        self.free_count + self.block_count.saturating_sub(self.next_unused)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Internal {
        keys: Vec<u64>,
        children: Vec<u64>,
    },
    Leaf {
        keys: Vec<u64>,
        values: Vec<Value>,
        next: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeDecodeError {
    BadKind(u8),
    BadCount(usize),
}

impl Node {
    pub fn empty_leaf() -> Node {
        Node::Leaf {
            keys: Vec::new(),
            values: Vec::new(),
            next: 0,
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Node::Leaf { .. })
    }

    pub fn keys(&self) -> &[u64] {
        match self {
            Node::Internal { keys, .. } | Node::Leaf { keys, .. } => keys,
        }
    }

    pub fn encode(&self) -> Box<Block> {
        let mut b = Box::new([0u8; BLOCK_SIZE]);
        match self {
            Node::Internal { keys, children } => {
                debug_assert!(keys.len() <= MAX_INTERNAL_KEYS && children.len() == keys.len() + 1);
                b[0] = KIND_INTERNAL;
                b[2..4].copy_from_slice(&(keys.len() as u16).to_le_bytes());
                for (i, k) in keys.iter().enumerate() {
                    put_u64(&mut b, INTERNAL_KEYS_OFF + 8 * i, *k);
                }
                for (i, c) in children.iter().enumerate() {
                    put_u64(&mut b, INTERNAL_CHILDREN_OFF + 8 * i, *c);
                }
            }
            Node::Leaf { keys, values, next } => {
                debug_assert!(keys.len() <= LEAF_CAPACITY && values.len() == keys.len());
                b[0] = KIND_LEAF;
                b[2..4].copy_from_slice(&(keys.len() as u16).to_le_bytes());
                put_u64(&mut b, 8, *next);
                for (i, k) in keys.iter().enumerate() {
                    put_u64(&mut b, LEAF_KEYS_OFF + 8 * i, *k);
                }
                for (i, v) in values.iter().enumerate() {
                    let off = LEAF_VALUES_OFF + VALUE_SIZE * i;
                    b[off..off + VALUE_SIZE].copy_from_slice(v);
                }
            }
        }
        b
    }

    pub fn decode(b: &Block) -> Result<Node, NodeDecodeError> {
        let n = u16::from_le_bytes([b[2], b[3]]) as usize;
        match b[0] {
            KIND_INTERNAL => {
                if n > MAX_INTERNAL_KEYS {
                    return Err(NodeDecodeError::BadCount(n));
                }
                Ok(Node::Internal {
                    keys: (0..n)
                        .map(|i| get_u64(b, INTERNAL_KEYS_OFF + 8 * i))
                        .collect(),
                    children: (0..=n)
                        .map(|i| get_u64(b, INTERNAL_CHILDREN_OFF + 8 * i))
                        .collect(),
                })
            }
            KIND_LEAF => {
                if n > LEAF_CAPACITY {
                    return Err(NodeDecodeError::BadCount(n));
                }
                Ok(Node::Leaf {
                    keys: (0..n).map(|i| get_u64(b, LEAF_KEYS_OFF + 8 * i)).collect(),
                    values: (0..n)
                        .map(|i| {
                            let off = LEAF_VALUES_OFF + VALUE_SIZE * i;
                            b[off..off + VALUE_SIZE].try_into().unwrap()
                        })
                        .collect(),
                    next: get_u64(b, 8),
                })
            }
            k => Err(NodeDecodeError::BadKind(k)),
        }
    }
}
