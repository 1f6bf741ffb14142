//! B+ tree over a [`BlockStore`]. No caching: every node visit is a block
//! read. The superblock is read once at open and kept in memory; the engine
//! is the only writer, so the copy never goes stale.

use std::collections::BTreeSet;

use super::layout::*;
use super::{BlockStore, StoreError};
use crate::nvme::{Block, BLOCK_SIZE};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TreeError {
    #[error("extent of {0} blocks is too small (need at least 3)")]
    ExtentTooSmall(u64),
    #[error("no free blocks left in the extent")]
    OutOfSpace,
    #[error("block {0} is not a valid tree node")]
    Corrupt(u64),
    #[error("no tree: superblock magic missing")]
    NotFormatted,
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LookupTrace {
    pub blocks_read: u64,
    pub virtual_latency_ns: u64,
    pub path: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutOutcome {
    Inserted,
    Replaced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeleteOutcome {
    Deleted,
    NotFound,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub block: Option<u64>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IntegrityReport {
    pub violations: Vec<Violation>,
    pub leaves: u64,
    pub internal_nodes: u64,
    pub keys: u64,
}

impl IntegrityReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct BTree {
    sb: Superblock,
}

/// Child index to follow for `key`: the number of separators `<= key`.
fn child_index(keys: &[u64], key: u64) -> usize {
    keys.partition_point(|&k| k <= key)
}

impl BTree {
    /// Writes an empty tree: superblock at block 0, empty leaf root at 1.
    pub fn format(store: &mut dyn BlockStore) -> Result<BTree, TreeError> {
        let blocks = store.block_count();
        if blocks < 3 {
            return Err(TreeError::ExtentTooSmall(blocks));
        }
        store.write(1, &Node::empty_leaf().encode())?;
        let sb = Superblock {
            root: 1,
            height: 1,
            key_count: 0,
            free_head: 0,
            next_unused: 2,
            free_count: 0,
            block_count: blocks,
        };
        store.write(0, &sb.encode())?;
        Ok(BTree { sb })
    }

    pub fn open(store: &mut dyn BlockStore) -> Result<BTree, TreeError> {
        let mut b = [0u8; BLOCK_SIZE];
        store.read(0, &mut b)?;
        let sb = Superblock::decode(&b).ok_or(TreeError::NotFormatted)?;
        Ok(BTree { sb })
    }

    pub fn superblock(&self) -> &Superblock {
        &self.sb
    }

    pub fn height(&self) -> u64 {
        self.sb.height
    }

    pub fn len(&self) -> u64 {
        self.sb.key_count
    }

    pub fn is_empty(&self) -> bool {
        self.sb.key_count == 0
    }

    fn read_node(
        &self,
        store: &mut dyn BlockStore,
        lba: u64,
        trace: &mut LookupTrace,
    ) -> Result<Node, TreeError> {
        let mut b = [0u8; BLOCK_SIZE];
        trace.virtual_latency_ns += store.read(lba, &mut b)?;
        trace.blocks_read += 1;
        trace.path.push(lba);
        Node::decode(&b).map_err(|_| TreeError::Corrupt(lba))
    }

    fn write_node(
        &self,
        store: &mut dyn BlockStore,
        lba: u64,
        node: &Node,
    ) -> Result<(), TreeError> {
        store.write(lba, &node.encode())?;
        Ok(())
    }

    fn write_superblock(&self, store: &mut dyn BlockStore) -> Result<(), TreeError> {
        store.write(0, &self.sb.encode())?;
        Ok(())
    }

    fn alloc(&mut self, store: &mut dyn BlockStore) -> Result<u64, TreeError> {
        if self.sb.free_head != 0 {
            let lba = self.sb.free_head;
            let mut b = [0u8; BLOCK_SIZE];
            store.read(lba, &mut b)?;
            self.sb.free_head = get_u64(&b, 0);
            self.sb.free_count -= 1;
            return Ok(lba);
        }
        if self.sb.next_unused < self.sb.block_count {
            self.sb.next_unused += 1;
            return Ok(self.sb.next_unused - 1);
        }
        Err(TreeError::OutOfSpace)
    }

    fn free(&mut self, store: &mut dyn BlockStore, lba: u64) -> Result<(), TreeError> {
        let mut b: Box<Block> = Box::new([0u8; BLOCK_SIZE]);
        put_u64(&mut b, 0, self.sb.free_head);
        store.write(lba, &b)?;
        self.sb.free_head = lba;
        self.sb.free_count += 1;
        Ok(())
    }

    /// Descends root to leaf: exactly `height` block reads.
    pub fn get(
        &self,
        store: &mut dyn BlockStore,
        key: u64,
    ) -> Result<(Option<Value>, LookupTrace), TreeError> {
        let mut trace = LookupTrace::default();
        let mut lba = self.sb.root;
        loop {
            match self.read_node(store, lba, &mut trace)? {
                Node::Internal { keys, children } => lba = children[child_index(&keys, key)],
                Node::Leaf { keys, values, .. } => {
                    let v = keys.binary_search(&key).ok().map(|i| values[i]);
                    return Ok((v, trace));
                }
            }
        }
    }

    /// Path of (block, node, child index taken) from root to leaf.
    fn descend(
        &self,
        store: &mut dyn BlockStore,
        key: u64,
    ) -> Result<Vec<(u64, Node, usize)>, TreeError> {
        let mut trace = LookupTrace::default();
        let mut path = Vec::with_capacity(self.sb.height as usize);
        let mut lba = self.sb.root;
        loop {
            let node = self.read_node(store, lba, &mut trace)?;
            match &node {
                Node::Internal { keys, children } => {
                    let i = child_index(keys, key);
                    let next = children[i];
                    path.push((lba, node, i));
                    lba = next;
                }
                Node::Leaf { .. } => {
                    path.push((lba, node, 0));
                    return Ok(path);
                }
            }
        }
    }

    pub fn put(
        &mut self,
        store: &mut dyn BlockStore,
        key: u64,
        value: &Value,
    ) -> Result<PutOutcome, TreeError> {
        let mut path = self.descend(store, key)?;
        let (leaf_lba, mut leaf, _) = path.pop().expect("path ends at a leaf");
        let Node::Leaf { keys, values, .. } = &mut leaf else {
            unreachable!()
        };
        let pos = match keys.binary_search(&key) {
            Ok(i) => {
                values[i] = *value;
                self.write_node(store, leaf_lba, &leaf)?;
                return Ok(PutOutcome::Replaced);
            }
            Err(i) => i,
        };
        // Splits cascade through every full node above the leaf.
        let mut needed = 0;
        if keys.len() == LEAF_CAPACITY {
            needed = 1;
            for (_, n, _) in path.iter().rev() {
                if n.keys().len() < MAX_INTERNAL_KEYS {
                    break;
                }
                needed += 1;
            }
            if needed == path.len() + 1 {
                needed += 1;
            }
        }
        if self.sb.available() < needed as u64 {
            return Err(TreeError::OutOfSpace);
        }
        keys.insert(pos, key);
        values.insert(pos, *value);

        let mut carry = None;
        if keys.len() > LEAF_CAPACITY {
            let right_lba = self.alloc(store)?;
            let Node::Leaf { keys, values, next } = &mut leaf else {
                unreachable!()
            };
            let mid = keys.len() / 2;
            let right = Node::Leaf {
                keys: keys.split_off(mid),
                values: values.split_off(mid),
                next: *next,
            };
            *next = right_lba;
            carry = Some((right.keys()[0], right_lba));
            self.write_node(store, right_lba, &right)?;
        }
        self.write_node(store, leaf_lba, &leaf)?;

        while let Some((sep, right_lba)) = carry.take() {
            match path.pop() {
                Some((lba, mut node, idx)) => {
                    let Node::Internal { keys, children } = &mut node else {
                        unreachable!()
                    };
                    keys.insert(idx, sep);
                    children.insert(idx + 1, right_lba);
                    if keys.len() > MAX_INTERNAL_KEYS {
                        let mid = keys.len() / 2;
                        let mut rkeys = keys.split_off(mid);
                        let up = rkeys.remove(0);
                        let rchildren = children.split_off(mid + 1);
                        let new_lba = self.alloc(store)?;
                        self.write_node(
                            store,
                            new_lba,
                            &Node::Internal {
                                keys: rkeys,
                                children: rchildren,
                            },
                        )?;
                        carry = Some((up, new_lba));
                    }
                    self.write_node(store, lba, &node)?;
                }
                None => {
                    let root_lba = self.alloc(store)?;
                    let root = Node::Internal {
                        keys: vec![sep],
                        children: vec![self.sb.root, right_lba],
                    };
                    self.write_node(store, root_lba, &root)?;
                    self.sb.root = root_lba;
                    self.sb.height += 1;
                }
            }
        }
        self.sb.key_count += 1;
        self.write_superblock(store)?;
        Ok(PutOutcome::Inserted)
    }

    pub fn delete(
        &mut self,
        store: &mut dyn BlockStore,
        key: u64,
    ) -> Result<DeleteOutcome, TreeError> {
        let mut path = self.descend(store, key)?;
        let (leaf_lba, mut leaf, _) = path.pop().expect("path ends at a leaf");
        let Node::Leaf { keys, values, .. } = &mut leaf else {
            unreachable!()
        };
        let Ok(pos) = keys.binary_search(&key) else {
            return Ok(DeleteOutcome::NotFound);
        };
        keys.remove(pos);
        values.remove(pos);
        self.sb.key_count -= 1;

        let mut cur_lba = leaf_lba;
        let mut cur = leaf;
        loop {
            let min = if cur.is_leaf() {
                MIN_LEAF_ENTRIES
            } else {
                MIN_INTERNAL_KEYS
            };
            let Some((parent_lba, mut parent, ci)) = path.pop() else {
                // `cur` is the root.
                match &cur {
                    Node::Internal { keys, children } if keys.is_empty() => {
                        self.sb.root = children[0];
                        self.sb.height -= 1;
                        self.free(store, cur_lba)?;
                    }
                    _ => self.write_node(store, cur_lba, &cur)?,
                }
                break;
            };
            if cur.keys().len() >= min {
                self.write_node(store, cur_lba, &cur)?;
                break;
            }
            self.rebalance(store, &mut parent, ci, cur_lba, cur)?;
            cur_lba = parent_lba;
            cur = parent;
        }
        self.write_superblock(store)?;
        Ok(DeleteOutcome::Deleted)
    }

    /// Fixes an underfull child `ci` of `parent` by borrowing from a sibling
    /// or merging with one. Writes the children; the caller writes `parent`.
    fn rebalance(
        &mut self,
        store: &mut dyn BlockStore,
        parent: &mut Node,
        ci: usize,
        cur_lba: u64,
        mut cur: Node,
    ) -> Result<(), TreeError> {
        let Node::Internal {
            keys: pkeys,
            children,
        } = parent
        else {
            unreachable!()
        };
        let mut trace = LookupTrace::default();
        let min = if cur.is_leaf() {
            MIN_LEAF_ENTRIES
        } else {
            MIN_INTERNAL_KEYS
        };

        if ci > 0 {
            let left_lba = children[ci - 1];
            let mut left = self.read_node(store, left_lba, &mut trace)?;
            if left.keys().len() > min {
                match (&mut left, &mut cur) {
                    (
                        Node::Leaf {
                            keys: lk,
                            values: lv,
                            ..
                        },
                        Node::Leaf {
                            keys: ck,
                            values: cv,
                            ..
                        },
                    ) => {
                        ck.insert(0, lk.pop().unwrap());
                        cv.insert(0, lv.pop().unwrap());
                        pkeys[ci - 1] = ck[0];
                    }
                    (
                        Node::Internal {
                            keys: lk,
                            children: lc,
                        },
                        Node::Internal {
                            keys: ck,
                            children: cc,
                        },
                    ) => {
                        ck.insert(0, pkeys[ci - 1]);
                        cc.insert(0, lc.pop().unwrap());
                        pkeys[ci - 1] = lk.pop().unwrap();
                    }
                    _ => return Err(TreeError::Corrupt(left_lba)),
                }
                self.write_node(store, left_lba, &left)?;
                self.write_node(store, cur_lba, &cur)?;
                return Ok(());
            }
            if ci + 1 >= children.len() {
                self.merge(store, pkeys, children, ci - 1, left_lba, left, cur_lba, cur)?;
                return Ok(());
            }
        }
        let right_lba = children[ci + 1];
        let mut right = self.read_node(store, right_lba, &mut trace)?;
        if right.keys().len() > min {
            match (&mut cur, &mut right) {
                (
                    Node::Leaf {
                        keys: ck,
                        values: cv,
                        ..
                    },
                    Node::Leaf {
                        keys: rk,
                        values: rv,
                        ..
                    },
                ) => {
                    ck.push(rk.remove(0));
                    cv.push(rv.remove(0));
                    pkeys[ci] = rk[0];
                }
                (
                    Node::Internal {
                        keys: ck,
                        children: cc,
                    },
                    Node::Internal {
                        keys: rk,
                        children: rc,
                    },
                ) => {
                    ck.push(pkeys[ci]);
                    cc.push(rc.remove(0));
                    pkeys[ci] = rk.remove(0);
                }
                _ => return Err(TreeError::Corrupt(right_lba)),
            }
            self.write_node(store, right_lba, &right)?;
            self.write_node(store, cur_lba, &cur)?;
            return Ok(());
        }
        self.merge(store, pkeys, children, ci, cur_lba, cur, right_lba, right)
    }

    /// Merges child `li + 1` into child `li` and drops separator `li`.
    #[allow(clippy::too_many_arguments)]
    fn merge(
        &mut self,
        store: &mut dyn BlockStore,
        pkeys: &mut Vec<u64>,
        children: &mut Vec<u64>,
        li: usize,
        left_lba: u64,
        mut left: Node,
        right_lba: u64,
        right: Node,
    ) -> Result<(), TreeError> {
        let sep = pkeys.remove(li);
        children.remove(li + 1);
        match (&mut left, right) {
            (
                Node::Leaf {
                    keys: lk,
                    values: lv,
                    next,
                },
                Node::Leaf {
                    keys: rk,
                    values: rv,
                    next: rnext,
                },
            ) => {
                lk.extend(rk);
                lv.extend(rv);
                *next = rnext;
            }
            (
                Node::Internal {
                    keys: lk,
                    children: lc,
                },
                Node::Internal {
                    keys: rk,
                    children: rc,
                },
            ) => {
                lk.push(sep);
                lk.extend(rk);
                lc.extend(rc);
            }
            _ => return Err(TreeError::Corrupt(right_lba)),
        }
        self.write_node(store, left_lba, &left)?;
        self.free(store, right_lba)?;
        Ok(())
    }

    /// All entries in key order, following the leaf chain.
    pub fn entries(&self, store: &mut dyn BlockStore) -> Result<Vec<(u64, Value)>, TreeError> {
        let mut trace = LookupTrace::default();
        let mut lba = self.sb.root;
        loop {
            match self.read_node(store, lba, &mut trace)? {
                Node::Internal { children, .. } => lba = children[0],
                Node::Leaf { .. } => break,
            }
        }
        let mut out = Vec::new();
        while lba != 0 {
            let Node::Leaf { keys, values, next } = self.read_node(store, lba, &mut trace)? else {
                return Err(TreeError::Corrupt(lba));
            };
            out.extend(keys.into_iter().zip(values));
            lba = next;
        }
        Ok(out)
    }

    /// Full scan of the tree. Problems are reported, never raised.
    pub fn check_integrity(&self, store: &mut dyn BlockStore) -> IntegrityReport {
        let mut report = IntegrityReport::default();
        let sb = self.sb;
        let violate = |report: &mut IntegrityReport, block: Option<u64>, message: String| {
            report.violations.push(Violation { block, message });
        };
        match BTree::open(store) {
            Ok(on_disk) if on_disk.sb == sb => {}
            Ok(_) => violate(
                &mut report,
                Some(0),
                "on-disk superblock differs from the engine's copy".into(),
            ),
            Err(e) => violate(&mut report, Some(0), format!("superblock unreadable: {e}")),
        }
        if sb.height < 1 {
            violate(&mut report, Some(0), "height is zero".into());
        }
        let mut reachable = BTreeSet::new();
        let mut leaves_in_order = Vec::new();
        let mut leaf_next = Vec::new();
        // (block, depth, lower bound inclusive, upper bound exclusive)
        let mut stack = vec![(sb.root, 1u64, None::<u64>, None::<u64>)];
        while let Some((lba, depth, lo, hi)) = stack.pop() {
            if lba == 0 || lba >= sb.block_count {
                violate(
                    &mut report,
                    Some(lba),
                    format!("child reference {lba} outside the extent"),
                );
                continue;
            }
            if !reachable.insert(lba) {
                violate(&mut report, Some(lba), "block reachable twice".into());
                continue;
            }
            let mut b = [0u8; BLOCK_SIZE];
            if let Err(e) = store.read(lba, &mut b) {
                violate(&mut report, Some(lba), format!("read failed: {e}"));
                continue;
            }
            let node = match Node::decode(&b) {
                Ok(n) => n,
                Err(e) => {
                    violate(&mut report, Some(lba), format!("not a node: {e:?}"));
                    continue;
                }
            };
            let keys = node.keys();
            if keys.windows(2).any(|w| w[0] >= w[1]) {
                violate(&mut report, Some(lba), "keys not strictly ascending".into());
            }
            if let (Some(lo), Some(&first)) = (lo, keys.first()) {
                if first < lo {
                    violate(
                        &mut report,
                        Some(lba),
                        format!("key {first} below separator {lo}"),
                    );
                }
            }
            if let (Some(hi), Some(&last)) = (hi, keys.last()) {
                if last >= hi {
                    violate(
                        &mut report,
                        Some(lba),
                        format!("key {last} not below separator {hi}"),
                    );
                }
            }
            let is_root = lba == sb.root;
            match &node {
                Node::Internal { keys, children } => {
                    report.internal_nodes += 1;
                    if depth >= sb.height {
                        violate(
                            &mut report,
                            Some(lba),
                            format!("internal node at depth {depth} of {}", sb.height),
                        );
                    }
                    let floor = if is_root { 1 } else { MIN_INTERNAL_KEYS };
                    if keys.len() < floor {
                        violate(
                            &mut report,
                            Some(lba),
                            format!("{} keys, minimum {floor}", keys.len()),
                        );
                    }
                    // Push in reverse so leaves are visited left to right.
                    for i in (0..children.len()).rev() {
                        let clo = if i == 0 { lo } else { Some(keys[i - 1]) };
                        let chi = if i == keys.len() { hi } else { Some(keys[i]) };
                        stack.push((children[i], depth + 1, clo, chi));
                    }
                }
                Node::Leaf { keys, next, .. } => {
                    report.leaves += 1;
                    report.keys += keys.len() as u64;
                    if depth != sb.height {
                        violate(
                            &mut report,
                            Some(lba),
                            format!("leaf at depth {depth}, height {}", sb.height),
                        );
                    }
                    if !is_root && keys.len() < MIN_LEAF_ENTRIES {
                        violate(
                            &mut report,
                            Some(lba),
                            format!("{} entries, minimum {MIN_LEAF_ENTRIES}", keys.len()),
                        );
                    }
                    leaves_in_order.push(lba);
                    leaf_next.push(*next);
                }
            }
        }
        for i in 0..leaves_in_order.len() {
            let expect = leaves_in_order.get(i + 1).copied().unwrap_or(0);
            if leaf_next[i] != expect {
                violate(
                    &mut report,
                    Some(leaves_in_order[i]),
                    format!(
                        "next-leaf {} but the following leaf is {expect}",
                        leaf_next[i]
                    ),
                );
            }
        }
        if report.keys != sb.key_count {
            let msg = format!(
                "superblock counts {} keys, leaves hold {}",
                sb.key_count, report.keys
            );
            violate(&mut report, Some(0), msg);
        }
        let mut free = sb.free_head;
        let mut seen = 0;
        while free != 0 && seen <= sb.free_count {
            if reachable.contains(&free) {
                violate(
                    &mut report,
                    Some(free),
                    "block is both reachable and on the free list".into(),
                );
            }
            if free >= sb.next_unused {
                violate(
                    &mut report,
                    Some(free),
                    "free-list entry beyond the high-water mark".into(),
                );
                break;
            }
            let mut b = [0u8; BLOCK_SIZE];
            if store.read(free, &mut b).is_err() {
                break;
            }
            free = get_u64(&b, 0);
            seen += 1;
        }
        if seen != sb.free_count {
            violate(
                &mut report,
                Some(0),
                format!(
                    "free list holds {seen} blocks, superblock says {}",
                    sb.free_count
                ),
            );
        }
        report
    }
}
