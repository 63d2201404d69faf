use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use meshfuse::lifecycle::DAY_SECS;
use meshfuse::{
    AgentId, Cmb, CmbError, CmbKey, FieldEncoder, FieldId, LifecycleState, MemoryStore, NewCmb, Role, Trigger,
};
use proptest::prelude::*;

fn draft(ts: i64, parents: Vec<CmbKey>) -> NewCmb {
    let mut texts = BTreeMap::new();
    texts.insert(FieldId::Focus, format!("note {ts}"));
    texts.insert(FieldId::Mood, "steady".to_string());
    NewCmb {
        ts,
        confidence: 0.9,
        texts,
        mood_va: Some((0.1, -0.2)),
        parents,
        method: "observation".into(),
    }
}

/// A random DAG: node `i` picks its parents among earlier nodes.
#[derive(Clone, Debug)]
struct Dag {
    ts: Vec<i64>,
    parents: Vec<Vec<usize>>,
}

fn dag(n: usize) -> impl Strategy<Value = Dag> {
    let nodes = proptest::collection::vec((0i64..200, proptest::collection::vec(any::<prop::sample::Index>(), 0..4)), n);
    nodes.prop_map(|raw| {
        let mut ts = Vec::new();
        let mut parents = Vec::new();
        for (i, (day, picks)) in raw.into_iter().enumerate() {
            ts.push(day * DAY_SECS);
            let ps: BTreeSet<usize> = if i == 0 {
                BTreeSet::new()
            } else {
                picks.iter().map(|p| p.index(i)).collect()
            };
            parents.push(ps.into_iter().collect());
        }
        Dag { ts, parents }
    })
}

fn build(d: &Dag, enc: &FieldEncoder) -> (MemoryStore, Vec<CmbKey>) {
    let mut s = MemoryStore::new("ops-agent".into());
    let mut keys: Vec<CmbKey> = Vec::new();
    for (i, ps) in d.parents.iter().enumerate() {
        let parents: Vec<CmbKey> = ps.iter().map(|&p| keys[p].clone()).collect();
        let c = s.create_cmb(draft(d.ts[i], parents), enc).unwrap();
        keys.push(c.key().clone());
        s.topological_order().unwrap();
    }
    (s, keys)
}

fn children_of(d: &Dag, alive: &BTreeSet<usize>) -> Vec<BTreeSet<usize>> {
    let mut ch = vec![BTreeSet::new(); d.ts.len()];
    for &i in alive {
        for &p in &d.parents[i] {
            ch[p].insert(i);
        }
    }
    ch
}

fn reach(start: usize, next: &dyn Fn(usize) -> Vec<usize>) -> BTreeSet<usize> {
    let mut seen = BTreeSet::new();
    let mut stack = next(start);
    while let Some(x) = stack.pop() {
        if seen.insert(x) {
            stack.extend(next(x));
        }
    }
    seen
}

fn longest_chain(i: usize, d: &Dag) -> usize {
    d.parents[i].iter().map(|&p| 1 + longest_chain(p, d)).max().unwrap_or(0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lineage_matches_dfs_oracle(d in dag(50)) {
        let enc = FieldEncoder::default();
        let (s, keys) = build(&d, &enc);
        let all: BTreeSet<usize> = (0..keys.len()).collect();
        let ch = children_of(&d, &all);
        let recount = s.recount_remixes();
        for i in 0..keys.len() {
            let info = s.lineage_query(&keys[i]).unwrap();
            let up = reach(i, &|x| d.parents[x].clone());
            let down = reach(i, &|x| ch[x].iter().copied().collect());
            let name = |set: BTreeSet<usize>| set.into_iter().map(|x| keys[x].clone()).collect::<BTreeSet<_>>();
            prop_assert_eq!(&info.ancestors, &name(up));
            prop_assert_eq!(&info.descendants, &name(down));
            prop_assert_eq!(info.remix_count, ch[i].len());
            prop_assert_eq!(recount[&keys[i]], ch[i].len());
            prop_assert_eq!(s.remix_count(&keys[i]), ch[i].len());
            prop_assert_eq!(info.lineage_depth, longest_chain(i, &d));
        }
    }

    #[test]
    fn sweeps_match_brute_force(d in dag(50), max_days in 10i64..150) {
        let enc = FieldEncoder::default();
        let (mut s, keys) = build(&d, &enc);
        let t_now = 200 * DAY_SECS;
        let max_age = max_days * DAY_SECS;
        let old = |i: usize| t_now - d.ts[i] > max_age;
        let mut alive: BTreeSet<usize> = (0..keys.len()).collect();
        let mut gone: BTreeSet<usize> = BTreeSet::new();
        loop {
            let ch = children_of(&d, &alive);
            let expect: BTreeSet<CmbKey> = alive
                .iter()
                .filter(|&&i| old(i) && ch[i].is_empty())
                .map(|&i| keys[i].clone())
                .collect();
            let got: BTreeSet<CmbKey> = s.retention_sweep(t_now, max_age).iter().map(|c| c.key().clone()).collect();
            prop_assert_eq!(&got, &expect);
            if got.is_empty() {
                break;
            }
            for (i, k) in keys.iter().enumerate() {
                if got.contains(k) {
                    alive.remove(&i);
                    gone.insert(i);
                }
            }
            // No survivor descends from a purged block.
            for &i in &alive {
                let up = reach(i, &|x| d.parents[x].clone());
                prop_assert!(up.is_disjoint(&gone));
            }
            s.topological_order().unwrap();
        }
        // At the fixed point a block is gone exactly when it and all its
        // descendants are past the retention age.
        let all: BTreeSet<usize> = (0..keys.len()).collect();
        let ch = children_of(&d, &all);
        for i in 0..keys.len() {
            let down = reach(i, &|x| ch[x].iter().copied().collect());
            let purgeable = old(i) && down.iter().all(|&j| old(j));
            prop_assert_eq!(gone.contains(&i), purgeable);
            prop_assert_eq!(s.contains(&keys[i]), !purgeable);
        }
    }

    #[test]
    fn stored_bytes_never_change(d in dag(20), remixers in proptest::collection::vec(0usize..20, 0..10)) {
        let enc = FieldEncoder::default();
        let (mut s, keys) = build(&d, &enc);
        let before: BTreeMap<CmbKey, String> = s.iter().map(|r| (r.cmb.key().clone(), r.cmb.to_canonical_json())).collect();
        for (n, i) in remixers.iter().enumerate() {
            let agent = AgentId::from(format!("peer-{}", n % 3).as_str());
            s.advance_lifecycle(&keys[*i], &Trigger::PeerRemix { agent, t: 300 * DAY_SECS }).unwrap();
        }
        s.advance_lifecycle(&keys[0], &Trigger::HumanValidation { agent: "founder".into(), role: Role::Validator, t: 301 * DAY_SECS }).unwrap();
        s.advance_lifecycle(&keys[1], &Trigger::Clock { t: 400 * DAY_SECS }).unwrap();
        s.create_cmb(draft(500 * DAY_SECS, vec![keys[0].clone()]), &enc).unwrap();
        s.retention_sweep(410 * DAY_SECS, 300 * DAY_SECS);
        for r in s.iter() {
            if let Some(b) = before.get(r.cmb.key()) {
                prop_assert_eq!(&r.cmb.to_canonical_json(), b);
            }
        }
    }

    /// Without clock triggers, states only move up the weight table.
    #[test]
    fn activity_never_lowers_state(ops in proptest::collection::vec((0u8..3, 0usize..4), 1..20)) {
        let enc = FieldEncoder::default();
        let mut s = MemoryStore::new("ops-agent".into());
        let k = s.create_cmb(draft(0, vec![]), &enc).unwrap().key().clone();
        let mut rank = s.get(&k).unwrap().state().rank();
        for (t, (kind, who)) in ops.into_iter().enumerate() {
            let agent = AgentId::from(format!("a{who}").as_str());
            let trig = match kind {
                0 | 1 => Trigger::PeerRemix { agent, t: t as i64 },
                _ => Trigger::HumanValidation { agent, role: Role::Anchor, t: t as i64 },
            };
            let state = s.advance_lifecycle(&k, &trig).unwrap();
            prop_assert!(state.rank() >= rank);
            rank = state.rank();
        }
    }
}

#[test]
fn chain_protection_lifts_on_next_sweep() {
    let enc = FieldEncoder::default();
    let mut s = MemoryStore::new("ops-agent".into());
    let a = s.create_cmb(draft(0, vec![]), &enc).unwrap();
    let b = s.create_cmb(draft(DAY_SECS, vec![a.key().clone()]), &enc).unwrap();
    let now = 100 * DAY_SECS;
    let first: Vec<CmbKey> = s.retention_sweep(now, 90 * DAY_SECS).iter().map(|c| c.key().clone()).collect();
    assert_eq!(first, vec![b.key().clone()]);
    assert!(s.contains(a.key()));
    let second: Vec<CmbKey> = s.retention_sweep(now, 90 * DAY_SECS).iter().map(|c| c.key().clone()).collect();
    assert_eq!(second, vec![a.key().clone()]);
    assert!(s.retention_sweep(now, 90 * DAY_SECS).is_empty());
}

#[test]
fn empty_store_sweeps_nothing() {
    let mut s = MemoryStore::new("ops-agent".into());
    assert!(s.retention_sweep(1_000 * DAY_SECS, 0).is_empty());
}

#[test]
fn business_chain_depth() {
    let enc = FieldEncoder::default();
    let mut s = MemoryStore::new("founder-agent".into());
    let d = s.create_cmb(draft(1, vec![]), &enc).unwrap();
    let e = s.create_cmb(draft(2, vec![d.key().clone()]), &enc).unwrap();
    let f = s.create_cmb(draft(3, vec![e.key().clone()]), &enc).unwrap();
    let info = s.lineage_query(f.key()).unwrap();
    assert_eq!(info.parents, vec![e.key().clone()]);
    assert_eq!(info.ancestors, BTreeSet::from([d.key().clone(), e.key().clone()]));
    assert_eq!(info.lineage_depth, 2);
    let root = s.lineage_query(d.key()).unwrap();
    assert!(root.ancestors.is_empty());
    assert_eq!(root.lineage_depth, 0);
    assert_eq!(root.descendants.len(), 2);
    assert!(matches!(
        s.lineage_query(&CmbKey::parse("nope").unwrap()),
        Err(CmbError::UnknownKey(_))
    ));
}

fn remix(agent: &str, t: i64) -> Trigger {
    Trigger::PeerRemix { agent: agent.into(), t }
}

#[test]
fn lifecycle_table() {
    let enc = FieldEncoder::default();
    let mut s = MemoryStore::new("ops-agent".into());
    let k = s.create_cmb(draft(0, vec![]), &enc).unwrap().key().clone();
    assert_eq!(s.get(&k).unwrap().state().anchor_weight(), 1.0);

    assert_eq!(s.advance_lifecycle(&k, &remix("music-agent", 10)).unwrap(), LifecycleState::Remixed);
    assert_eq!(s.get(&k).unwrap().state().anchor_weight(), 1.5);

    let v = Trigger::HumanValidation {
        agent: "founder".into(),
        role: Role::Validator,
        t: 20,
    };
    assert_eq!(s.advance_lifecycle(&k, &v).unwrap(), LifecycleState::Validated);
    assert_eq!(s.advance_lifecycle(&k, &remix("fitness-agent", 30)).unwrap(), LifecycleState::Canonical);
    assert_eq!(s.get(&k).unwrap().state().anchor_weight(), 3.0);

    let k2 = s.create_cmb(draft(0, vec![]), &enc).unwrap().key().clone();
    let clock = Trigger::Clock { t: 31 * DAY_SECS };
    assert_eq!(s.advance_lifecycle(&k2, &clock).unwrap(), LifecycleState::Archived);
    assert_eq!(s.get(&k2).unwrap().state().anchor_weight(), 0.5);
    assert_eq!(s.advance_lifecycle(&k, &clock).unwrap(), LifecycleState::Canonical);
}

#[test]
fn observer_validation_is_refused() {
    let enc = FieldEncoder::default();
    let mut s = MemoryStore::new("ops-agent".into());
    let k = s.create_cmb(draft(0, vec![]), &enc).unwrap().key().clone();
    let v = Trigger::HumanValidation {
        agent: "intern".into(),
        role: Role::Observer,
        t: 5,
    };
    assert!(matches!(
        s.advance_lifecycle(&k, &v),
        Err(CmbError::Authority { role: Role::Observer, .. })
    ));
    assert_eq!(s.get(&k).unwrap().state(), LifecycleState::Observed);
}

#[test]
fn missing_fields_carry_the_neutral_vector() {
    let enc = FieldEncoder::default();
    let mut s = MemoryStore::new("ops-agent".into());
    let c = s.create_cmb(draft(0, vec![]), &enc).unwrap();
    let commitment = c.field(FieldId::Commitment);
    assert_eq!(commitment.text, "neutral");
    assert_eq!(commitment.vector, enc.encode("neutral"));
    assert!((commitment.vector.norm() - 1.0).abs() < 1e-6);
    for (f, e) in c.fields().iter() {
        assert_eq!(e.valence.is_some(), f == FieldId::Mood);
        assert_eq!(e.arousal.is_some(), f == FieldId::Mood);
    }
}

#[test]
fn canonical_json_round_trips() {
    let enc = FieldEncoder::default();
    let mut s = MemoryStore::new("ops-agent".into());
    let c: Arc<Cmb> = s.create_cmb(draft(42, vec![]), &enc).unwrap();
    let text = c.to_canonical_json();
    let back = Cmb::from_json(&text, None).unwrap();
    assert_eq!(back.to_canonical_json(), text);
    assert_eq!(back.key(), c.key());
}

#[test]
fn confidence_out_of_range_is_rejected() {
    let enc = FieldEncoder::default();
    let mut s = MemoryStore::new("ops-agent".into());
    let mut d = draft(0, vec![]);
    d.confidence = 1.5;
    assert!(matches!(s.create_cmb(d, &enc), Err(CmbError::InvalidConfidence(_))));
    assert!(s.is_empty());
}
