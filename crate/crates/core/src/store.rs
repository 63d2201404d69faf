//! Single-owner, append-only memory store with a lineage DAG.
//!
//! A store holds only blocks its owner created. Keys of blocks received from
//! peers are remembered (so lineage may point at them), and peers report the
//! remixes they made of our blocks as remote child edges. Remix counts,
//! ancestors and descendants are always derived from these edges.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::cmb::{encode_fields, AgentId, Cmb, CmbKey, Lineage, Timestamp};
use crate::encoder::FieldEncoder;
use crate::error::CmbError;
use crate::field::FieldId;
use crate::lifecycle::{LifecycleRecord, LifecycleState, Trigger, Unauthorized, DAY_SECS};

/// Retention age applied when none is configured.
pub const DEFAULT_MAX_AGE_SECS: i64 = 90 * DAY_SECS;

/// Input to [`MemoryStore::create_cmb`]. Fields not listed in `texts` are filled
/// with the neutral baseline.
#[derive(Clone, Debug, Default)]
pub struct NewCmb {
    pub ts: Timestamp,
    pub confidence: f64,
    pub texts: BTreeMap<FieldId, String>,
    pub mood_va: Option<(f64, f64)>,
    pub parents: Vec<CmbKey>,
    pub method: String,
}

#[derive(Clone, Debug)]
pub struct StoredCmb {
    pub cmb: Arc<Cmb>,
    pub lifecycle: LifecycleRecord,
}

impl StoredCmb {
    pub fn state(&self) -> LifecycleState {
        self.lifecycle.state
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct SeenRef {
    origin: AgentId,
    at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineageInfo {
    pub parents: Vec<CmbKey>,
    pub ancestors: BTreeSet<CmbKey>,
    pub descendants: BTreeSet<CmbKey>,
    pub remix_count: usize,
    pub lineage_depth: usize,
}

#[derive(Clone, Debug)]
pub struct MemoryStore {
    owner: AgentId,
    records: BTreeMap<CmbKey, StoredCmb>,
    children: BTreeMap<CmbKey, BTreeSet<CmbKey>>,
    remote_children: BTreeMap<CmbKey, BTreeMap<CmbKey, AgentId>>,
    seen: BTreeMap<CmbKey, SeenRef>,
    next_seq: u64,
}

impl MemoryStore {
    pub fn new(owner: AgentId) -> Self {
        MemoryStore {
            owner,
            records: BTreeMap::new(),
            children: BTreeMap::new(),
            remote_children: BTreeMap::new(),
            seen: BTreeMap::new(),
            next_seq: 0,
        }
    }

    pub fn owner(&self) -> &AgentId {
        &self.owner
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, key: &CmbKey) -> bool {
        self.records.contains_key(key)
    }

    pub fn get(&self, key: &CmbKey) -> Option<&StoredCmb> {
        self.records.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = &StoredCmb> {
        self.records.values()
    }

    pub fn keys(&self) -> impl Iterator<Item = &CmbKey> {
        self.records.keys()
    }

    /// The key the next appended block should use.
    pub fn next_key(&self, ts: Timestamp) -> CmbKey {
        let mut seq = self.next_seq;
        loop {
            let key = CmbKey::generate(ts, &self.owner, seq);
            if !self.records.contains_key(&key) && !self.seen.contains_key(&key) {
                return key;
            }
            seq += 1;
        }
    }

    pub fn create_cmb(&mut self, draft: NewCmb, encoder: &FieldEncoder) -> Result<Arc<Cmb>, CmbError> {
        let fields = encode_fields(encoder, &draft.texts, draft.mood_va);
        let cmb = Cmb::from_parts(
            self.next_key(draft.ts),
            self.owner.clone(),
            draft.ts,
            draft.confidence,
            fields,
            Lineage {
                parents: draft.parents,
                method: draft.method,
            },
        )?;
        self.append(cmb)
    }

    /// Appends an owner-originated block. Parents must be stored here or have
    /// been seen from a peer.
    pub fn append(&mut self, cmb: Cmb) -> Result<Arc<Cmb>, CmbError> {
        if *cmb.origin() != self.owner {
            return Err(CmbError::CrossStoreWrite {
                owner: self.owner.clone(),
                origin: cmb.origin().clone(),
            });
        }
        let key = cmb.key().clone();
        if self.records.contains_key(&key) || self.seen.contains_key(&key) {
            return Err(CmbError::DuplicateKey(key));
        }
        if let Some(dim) = self.records.values().next().map(|r| r.cmb.dim()) {
            if dim != cmb.dim() {
                return Err(CmbError::Schema(format!(
                    "store holds {dim}-dim vectors, CMB has {}",
                    cmb.dim()
                )));
            }
        }
        for p in &cmb.lineage().parents {
            if *p == key {
                return Err(CmbError::SelfReference(key));
            }
            if !self.records.contains_key(p) && !self.seen.contains_key(p) {
                return Err(CmbError::UnknownParent(p.clone()));
            }
        }
        if self.reaches(&cmb.lineage().parents, &key) {
            return Err(CmbError::Cycle(key));
        }
        for p in &cmb.lineage().parents {
            if self.records.contains_key(p) {
                self.children.entry(p.clone()).or_default().insert(key.clone());
            }
        }
        let cmb = Arc::new(cmb);
        self.records.insert(
            key,
            StoredCmb {
                cmb: Arc::clone(&cmb),
                lifecycle: LifecycleRecord::default(),
            },
        );
        self.next_seq += 1;
        Ok(cmb)
    }

    /// True when `target` is an ancestor-or-self of any of `from`.
    fn reaches(&self, from: &[CmbKey], target: &CmbKey) -> bool {
        let mut stack: Vec<&CmbKey> = from.iter().collect();
        let mut visited = BTreeSet::new();
        while let Some(k) = stack.pop() {
            if k == target {
                return true;
            }
            if !visited.insert(k) {
                continue;
            }
            if let Some(r) = self.records.get(k) {
                stack.extend(r.cmb.lineage().parents.iter());
            }
        }
        false
    }

    /// Records that a peer's block was received and evaluated here.
    pub fn note_seen(&mut self, key: &CmbKey, origin: &AgentId, at: Timestamp) {
        if !self.records.contains_key(key) {
            self.seen.entry(key.clone()).or_insert(SeenRef {
                origin: origin.clone(),
                at,
            });
        }
    }

    pub fn has_seen(&self, key: &CmbKey) -> bool {
        self.seen.contains_key(key)
    }

    pub fn seen_origin(&self, key: &CmbKey) -> Option<&AgentId> {
        self.seen.get(key).map(|s| &s.origin)
    }

    /// A peer reports that `child` (stored on its node) lists our `parent`.
    pub fn record_remote_child(&mut self, parent: &CmbKey, child: &CmbKey, agent: &AgentId) -> Result<(), CmbError> {
        if !self.records.contains_key(parent) {
            return Err(CmbError::UnknownKey(parent.clone()));
        }
        self.remote_children
            .entry(parent.clone())
            .or_default()
            .insert(child.clone(), agent.clone());
        Ok(())
    }

    /// A peer reports that its `child` of our `parent` was purged.
    pub fn drop_remote_child(&mut self, parent: &CmbKey, child: &CmbKey) {
        if let Some(edges) = self.remote_children.get_mut(parent) {
            edges.remove(child);
            if edges.is_empty() {
                self.remote_children.remove(parent);
            }
        }
    }

    pub fn advance_lifecycle(&mut self, key: &CmbKey, trigger: &Trigger) -> Result<LifecycleState, CmbError> {
        let record = self
            .records
            .get_mut(key)
            .ok_or_else(|| CmbError::UnknownKey(key.clone()))?;
        let created = record.cmb.ts();
        record.lifecycle.apply(trigger, created).map_err(|Unauthorized| {
            let (agent, role) = match trigger {
                Trigger::HumanValidation { agent, role, .. } => (agent.clone(), *role),
                _ => unreachable!("only validation is role-gated"),
            };
            CmbError::Authority { agent, role }
        })
    }

    /// Direct children, local and remote.
    pub fn remix_count(&self, key: &CmbKey) -> usize {
        self.children.get(key).map_or(0, BTreeSet::len)
            + self.remote_children.get(key).map_or(0, BTreeMap::len)
    }

    /// Remix counts recomputed by scanning every stored lineage list.
    pub fn recount_remixes(&self) -> BTreeMap<CmbKey, usize> {
        let mut counts: BTreeMap<CmbKey, usize> = self.records.keys().map(|k| (k.clone(), 0)).collect();
        for r in self.records.values() {
            for p in &r.cmb.lineage().parents {
                if let Some(c) = counts.get_mut(p) {
                    *c += 1;
                }
            }
        }
        for (parent, edges) in &self.remote_children {
            if let Some(c) = counts.get_mut(parent) {
                *c += edges.len();
            }
        }
        counts
    }

    pub fn lineage_query(&self, key: &CmbKey) -> Result<LineageInfo, CmbError> {
        let record = self.records.get(key).ok_or_else(|| CmbError::UnknownKey(key.clone()))?;
        let parents = record.cmb.lineage().parents.clone();

        let mut ancestors = BTreeSet::new();
        let mut stack: Vec<&CmbKey> = parents.iter().collect();
        while let Some(k) = stack.pop() {
            if ancestors.insert(k.clone()) {
                if let Some(r) = self.records.get(k) {
                    stack.extend(r.cmb.lineage().parents.iter());
                }
            }
        }

        let mut descendants = BTreeSet::new();
        let mut stack = vec![key];
        while let Some(k) = stack.pop() {
            if let Some(remote) = self.remote_children.get(k) {
                descendants.extend(remote.keys().cloned());
            }
            for c in self.children.get(k).into_iter().flatten() {
                if descendants.insert(c.clone()) {
                    stack.push(c);
                }
            }
        }

        let mut depth_memo = BTreeMap::new();
        Ok(LineageInfo {
            lineage_depth: self.depth(key, &mut depth_memo),
            remix_count: self.remix_count(key),
            parents,
            ancestors,
            descendants,
        })
    }

    /// Longest parent chain; parents not stored here count as roots.
    fn depth(&self, key: &CmbKey, memo: &mut BTreeMap<CmbKey, usize>) -> usize {
        if let Some(d) = memo.get(key) {
            return *d;
        }
        let d = match self.records.get(key) {
            None => 0,
            Some(r) => r
                .cmb
                .lineage()
                .parents
                .iter()
                .map(|p| 1 + self.depth(p, memo))
                .max()
                .unwrap_or(0),
        };
        memo.insert(key.clone(), d);
        d
    }

    /// Kahn's algorithm over local edges; errors if a cycle exists.
    pub fn topological_order(&self) -> Result<Vec<CmbKey>, CmbError> {
        let mut indegree: BTreeMap<&CmbKey, usize> = self.records.keys().map(|k| (k, 0)).collect();
        for r in self.records.values() {
            let local_parents = r
                .cmb
                .lineage()
                .parents
                .iter()
                .filter(|p| self.records.contains_key(*p))
                .count();
            *indegree.get_mut(r.cmb.key()).expect("present") = local_parents;
        }
        let mut ready: Vec<&CmbKey> = indegree.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
        let mut order = Vec::with_capacity(self.records.len());
        while let Some(k) = ready.pop() {
            order.push(k.clone());
            for c in self.children.get(k).into_iter().flatten() {
                let d = indegree.get_mut(c).expect("child present");
                *d -= 1;
                if *d == 0 {
                    ready.push(c);
                }
            }
        }
        if order.len() != self.records.len() {
            let stuck = indegree
                .into_iter()
                .find(|(_, d)| *d > 0)
                .map(|(k, _)| k.clone())
                .expect("some node left");
            return Err(CmbError::Cycle(stuck));
        }
        Ok(order)
    }

    /// Purges blocks older than `max_age` that have no live children here or
    /// on peers. A block whose last child goes in this sweep is eligible on the
    /// next one. Returns the purged blocks in key order.
    pub fn retention_sweep(&mut self, t_now: Timestamp, max_age: i64) -> Vec<Arc<Cmb>> {
        let doomed: Vec<CmbKey> = self
            .records
            .iter()
            .filter(|(k, r)| {
                t_now - r.cmb.ts() > max_age
                    && self.children.get(*k).map_or(true, BTreeSet::is_empty)
                    && !self.remote_children.contains_key(*k)
            })
            .map(|(k, _)| k.clone())
            .collect();
        let mut purged = Vec::with_capacity(doomed.len());
        for key in doomed {
            let record = self.records.remove(&key).expect("listed");
            self.children.remove(&key);
            for p in &record.cmb.lineage().parents {
                if let Some(set) = self.children.get_mut(p) {
                    set.remove(&key);
                }
            }
            purged.push(record.cmb);
        }
        // Forget peer keys that are old and no longer referenced locally.
        let referenced: BTreeSet<&CmbKey> = self
            .records
            .values()
            .flat_map(|r| r.cmb.lineage().parents.iter())
            .collect();
        let stale: Vec<CmbKey> = self
            .seen
            .iter()
            .filter(|(k, s)| t_now - s.at > max_age && !referenced.contains(k))
            .map(|(k, _)| k.clone())
            .collect();
        for k in stale {
            self.seen.remove(&k);
        }
        purged
    }

    /// Highest-scoring anchors at `t_now`: lifecycle weight × exp(−age/τ),
    /// ties broken by key. Blocks from the future are skipped.
    pub fn top_anchors(&self, t_now: Timestamp, tau: f64, k: usize) -> Vec<&StoredCmb> {
        let mut scored: Vec<(f64, &StoredCmb)> = self
            .records
            .values()
            .filter(|r| r.cmb.ts() <= t_now)
            .map(|r| {
                let age = (t_now - r.cmb.ts()) as f64;
                (r.state().anchor_weight() * (-age / tau).exp(), r)
            })
            .collect();
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.1.cmb.key().cmp(b.1.cmb.key()))
        });
        scored.into_iter().take(k).map(|(_, r)| r).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::Role;

    fn draft(ts: i64, parents: Vec<CmbKey>) -> NewCmb {
        let mut texts = BTreeMap::new();
        texts.insert(FieldId::Focus, format!("observation at {ts}"));
        NewCmb {
            ts,
            confidence: 0.8,
            texts,
            mood_va: None,
            parents,
            method: "observation".into(),
        }
    }

    fn store() -> (MemoryStore, FieldEncoder) {
        (MemoryStore::new("coo-agent".into()), FieldEncoder::default())
    }

    #[test]
    fn create_root_is_observed() {
        let (mut s, enc) = store();
        let c = s.create_cmb(draft(10, vec![]), &enc).unwrap();
        assert!(c.lineage().parents.is_empty());
        let r = s.get(c.key()).unwrap();
        assert_eq!(r.state(), LifecycleState::Observed);
        assert_eq!(r.state().anchor_weight(), 1.0);
    }

    #[test]
    fn child_increments_computed_remix_count() {
        let (mut s, enc) = store();
        let a = s.create_cmb(draft(10, vec![]), &enc).unwrap();
        assert_eq!(s.remix_count(a.key()), 0);
        s.create_cmb(draft(20, vec![a.key().clone()]), &enc).unwrap();
        assert_eq!(s.remix_count(a.key()), 1);
        let scan = s
            .iter()
            .filter(|r| r.cmb.lineage().parents.contains(a.key()))
            .count();
        assert_eq!(scan, 1);
        assert_eq!(s.recount_remixes()[a.key()], 1);
    }

    #[test]
    fn unknown_parent_rejected() {
        let (mut s, enc) = store();
        let ghost = CmbKey::parse("ghost").unwrap();
        assert!(matches!(
            s.create_cmb(draft(1, vec![ghost.clone()]), &enc),
            Err(CmbError::UnknownParent(k)) if k == ghost
        ));
        s.note_seen(&ghost, &"peer".into(), 0);
        assert!(s.create_cmb(draft(1, vec![ghost]), &enc).is_ok());
    }

    #[test]
    fn foreign_origin_rejected() {
        let (mut s, enc) = store();
        let mut other = MemoryStore::new("research-agent".into());
        let c = other.create_cmb(draft(1, vec![]), &enc).unwrap();
        assert!(matches!(
            s.append((*c).clone()),
            Err(CmbError::CrossStoreWrite { .. })
        ));
    }

    #[test]
    fn business_chain_lineage() {
        let (mut s, enc) = store();
        let d = s.create_cmb(draft(1, vec![]), &enc).unwrap();
        let e = s.create_cmb(draft(2, vec![d.key().clone()]), &enc).unwrap();
        let f = s.create_cmb(draft(3, vec![e.key().clone()]), &enc).unwrap();
        let info = s.lineage_query(f.key()).unwrap();
        assert_eq!(info.ancestors, [d.key().clone(), e.key().clone()].into());
        assert_eq!(info.lineage_depth, 2);
        let root = s.lineage_query(d.key()).unwrap();
        assert!(root.ancestors.is_empty());
        assert_eq!(root.lineage_depth, 0);
        assert_eq!(root.descendants.len(), 2);
        assert_eq!(root.remix_count, 1);
        assert!(matches!(
            s.lineage_query(&CmbKey::parse("nope").unwrap()),
            Err(CmbError::UnknownKey(_))
        ));
    }

    #[test]
    fn retention_protection_lifts_one_sweep_later() {
        let (mut s, enc) = store();
        let a = s.create_cmb(draft(0, vec![]), &enc).unwrap();
        let b = s.create_cmb(draft(1, vec![a.key().clone()]), &enc).unwrap();
        let now = 200 * DAY_SECS;
        let first: Vec<_> = s.retention_sweep(now, DEFAULT_MAX_AGE_SECS).iter().map(|c| c.key().clone()).collect();
        assert_eq!(first, vec![b.key().clone()]);
        assert!(s.contains(a.key()));
        let second: Vec<_> = s.retention_sweep(now, DEFAULT_MAX_AGE_SECS).iter().map(|c| c.key().clone()).collect();
        assert_eq!(second, vec![a.key().clone()]);
        assert!(s.retention_sweep(now, DEFAULT_MAX_AGE_SECS).is_empty());
    }

    #[test]
    fn remote_children_protect_until_dropped() {
        let (mut s, enc) = store();
        let a = s.create_cmb(draft(0, vec![]), &enc).unwrap();
        let child = CmbKey::parse("remote-1").unwrap();
        s.record_remote_child(a.key(), &child, &"music-agent".into()).unwrap();
        assert_eq!(s.remix_count(a.key()), 1);
        assert!(s.retention_sweep(365 * DAY_SECS, DEFAULT_MAX_AGE_SECS).is_empty());
        s.drop_remote_child(a.key(), &child);
        assert_eq!(s.retention_sweep(365 * DAY_SECS, DEFAULT_MAX_AGE_SECS).len(), 1);
    }

    #[test]
    fn empty_sweep() {
        let (mut s, _) = store();
        assert!(s.retention_sweep(1_000_000, 10).is_empty());
    }

    #[test]
    fn validation_requires_authority() {
        let (mut s, enc) = store();
        let a = s.create_cmb(draft(0, vec![]), &enc).unwrap();
        let by_observer = Trigger::HumanValidation {
            agent: "intern".into(),
            role: Role::Observer,
            t: 5,
        };
        assert!(matches!(
            s.advance_lifecycle(a.key(), &by_observer),
            Err(CmbError::Authority { .. })
        ));
        assert_eq!(s.get(a.key()).unwrap().state(), LifecycleState::Observed);
        let by_founder = Trigger::HumanValidation {
            agent: "founder".into(),
            role: Role::Anchor,
            t: 5,
        };
        assert_eq!(s.advance_lifecycle(a.key(), &by_founder).unwrap(), LifecycleState::Validated);
    }

    #[test]
    fn anchors_rank_by_weight_and_recency() {
        let (mut s, enc) = store();
        let old = s.create_cmb(draft(0, vec![]), &enc).unwrap();
        let new = s.create_cmb(draft(3000, vec![]), &enc).unwrap();
        let future = s.create_cmb(draft(9000, vec![]), &enc).unwrap();
        let top: Vec<_> = s.top_anchors(3600, 1800.0, 5).iter().map(|r| r.cmb.key().clone()).collect();
        assert_eq!(top, vec![new.key().clone(), old.key().clone()]);
        assert!(!top.contains(future.key()));
        // Canonical old block outranks a fresh observed one.
        s.records.get_mut(old.key()).unwrap().lifecycle.state = LifecycleState::Canonical;
        let top = s.top_anchors(3600, 1_000_000.0, 1);
        assert_eq!(top[0].cmb.key(), old.key());
    }
}
