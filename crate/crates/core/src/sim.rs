//! Deterministic discrete-event simulation of an agent mesh.
//!
//! Events are ordered by `(t, agent id, kind, insertion order)`; mesh-wide
//! events (state sync, daily clock) use the empty agent id so they run first
//! at their tick. All collections iterate in key order, so a given config
//! always yields the same trace bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blend::{
    blend_states, classify_peer_with, ingest_state, peer_drift, BlendConfig, BlendError, HiddenState, PeerClass,
};
use crate::cmb::{AgentId, Cmb, CmbKey, Timestamp, METHOD_OBSERVATION, METHOD_VALIDATION};
use crate::encoder::{Embedding, EncoderConfig, EncoderError, FieldEncoder};
use crate::error::CmbError;
use crate::field::FieldId;
use crate::lifecycle::{LifecycleState, Trigger, DAY_SECS};
use crate::narrative::{extract, Narrative};
use crate::profile::{AgentProfile, ProfileCatalog, ProfileError};
use crate::store::{MemoryStore, NewCmb, DEFAULT_MAX_AGE_SECS};
use crate::svaf::{commit, evaluate_cmb, Basis, Decision, SvafConfig, SvafError};

pub const DEFAULT_SYNC_INTERVAL: i64 = 60;
/// Neuron time constants are drawn log-uniformly from these strata, one third each.
pub const TAU_STRATA: [(f64, f64); 3] = [(1.0, 5.0), (5.0, 30.0), (30.0, 120.0)];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("unknown agent `{0}`")]
    UnknownAgent(AgentId),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Cmb(#[from] CmbError),
    #[error(transparent)]
    Svaf(#[from] SvafError),
    #[error(transparent)]
    Blend(#[from] BlendError),
    #[error("trace line {line}: {message}")]
    Trace { line: usize, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimAgent {
    pub profile: AgentProfile,
    /// Separate seed for this agent's time constants.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_seed: Option<u64>,
}

/// Something an agent perceives and broadcasts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: Timestamp,
    pub agent: AgentId,
    pub texts: BTreeMap<FieldId, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mood_va: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationSpec {
    pub t: Timestamp,
    pub agent: AgentId,
    pub observation: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RebroadcastSpec {
    pub t: Timestamp,
    pub observation: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub agents: Vec<SimAgent>,
    pub observations: Vec<Observation>,
    #[serde(default)]
    pub validations: Vec<ValidationSpec>,
    #[serde(default)]
    pub rebroadcasts: Vec<RebroadcastSpec>,
    pub duration: Timestamp,
    #[serde(default = "default_sync_interval")]
    pub sync_interval: i64,
    #[serde(default = "default_sweep_interval")]
    pub sweep_interval: i64,
    #[serde(default = "default_max_age")]
    pub max_age: i64,
    #[serde(default)]
    pub svaf: SvafConfig,
    #[serde(default)]
    pub blend: BlendConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
}

fn default_sync_interval() -> i64 {
    DEFAULT_SYNC_INTERVAL
}

fn default_sweep_interval() -> i64 {
    DAY_SECS
}

fn default_max_age() -> i64 {
    DEFAULT_MAX_AGE_SECS
}

impl SimConfig {
    pub fn new(seed: u64, agents: Vec<AgentProfile>, duration: Timestamp) -> Self {
        SimConfig {
            seed,
            agents: agents
                .into_iter()
                .map(|profile| SimAgent { profile, tau_seed: None })
                .collect(),
            observations: Vec::new(),
            validations: Vec::new(),
            rebroadcasts: Vec::new(),
            duration,
            sync_interval: DEFAULT_SYNC_INTERVAL,
            sweep_interval: DAY_SECS,
            max_age: DEFAULT_MAX_AGE_SECS,
            svaf: SvafConfig::default(),
            blend: BlendConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }

    /// Builds a mesh with one agent per agent type in the narrative, named
    /// `<type>-agent`. Signals become observations through field extraction.
    /// Without an explicit duration the run ends one sync interval after the
    /// last scripted event.
    pub fn from_narrative(
        narrative: &Narrative,
        catalog: &ProfileCatalog,
        seed: u64,
        duration: Option<Timestamp>,
    ) -> Result<Self, SimError> {
        narrative
            .validate_timing()
            .map_err(|e| SimError::Config(e.to_string()))?;
        let id = |ty: &str| AgentId::new(format!("{ty}-agent"));
        let mut agents = Vec::new();
        for ty in narrative.agent_types() {
            let mut profile = catalog.get(&ty)?.clone().with_id(id(&ty).as_str());
            if let Some(role) = narrative.roles.get(&ty) {
                profile = profile.with_role(*role);
            }
            agents.push(profile);
        }
        let last = narrative
            .signals
            .iter()
            .map(|s| s.t)
            .chain(narrative.validations.iter().map(|v| v.t))
            .chain(narrative.rebroadcasts.iter().map(|r| r.t))
            .max()
            .unwrap_or(0);
        let mut config = SimConfig::new(seed, agents, duration.unwrap_or(last + DEFAULT_SYNC_INTERVAL));
        config.observations = narrative
            .signals
            .iter()
            .map(|s| {
                let e = extract(s);
                Observation {
                    t: s.t,
                    agent: id(&s.agent),
                    confidence: Some(e.confidence()),
                    texts: e.texts,
                    mood_va: Some(e.mood_va),
                }
            })
            .collect();
        config.validations = narrative
            .validations
            .iter()
            .map(|v| ValidationSpec {
                t: v.t,
                agent: id(&v.agent),
                observation: v.signal,
            })
            .collect();
        config.rebroadcasts = narrative
            .rebroadcasts
            .iter()
            .map(|r| RebroadcastSpec {
                t: r.t,
                observation: r.signal,
            })
            .collect();
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.agents.len() < 2 {
            return bad("a mesh needs at least two agents".into());
        }
        let ids: BTreeSet<&AgentId> = self.agents.iter().map(|a| &a.profile.agent_id).collect();
        if ids.len() != self.agents.len() {
            return bad("agent ids must be distinct".into());
        }
        for a in &self.agents {
            a.profile.validate()?;
        }
        if self.duration <= 0 {
            return bad("duration must be positive".into());
        }
        if self.sync_interval <= 0 || self.sweep_interval <= 0 || self.max_age <= 0 {
            return bad("intervals and retention age must be positive".into());
        }
        self.svaf.thresholds.validate()?;
        for (i, o) in self.observations.iter().enumerate() {
            if !ids.contains(&o.agent) {
                return Err(SimError::UnknownAgent(o.agent.clone()));
            }
            if !(0..=self.duration).contains(&o.t) {
                return bad(format!("observation {i} at t={} is outside the run", o.t));
            }
        }
        let obs_time = |i: usize, what: &str, t: Timestamp| match self.observations.get(i) {
            None => Err(SimError::Config(format!("{what} refers to missing observation {i}"))),
            Some(o) if t <= o.t => Err(SimError::Config(format!("{what} of observation {i} must come after it"))),
            Some(_) if t > self.duration => Err(SimError::Config(format!("{what} at t={t} is outside the run"))),
            Some(_) => Ok(()),
        };
        for v in &self.validations {
            if !ids.contains(&v.agent) {
                return Err(SimError::UnknownAgent(v.agent.clone()));
            }
            obs_time(v.observation, "validation", v.t)?;
        }
        for r in &self.rebroadcasts {
            obs_time(r.observation, "rebroadcast", r.t)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Broadcast {
        t: Timestamp,
        agent: AgentId,
        key: CmbKey,
        rebroadcast: bool,
    },
    Evaluation {
        t: Timestamp,
        agent: AgentId,
        from: AgentId,
        key: CmbKey,
        decision: Decision,
        basis: Basis,
        total_drift: f64,
        max_drift: f64,
        freshness: f64,
        /// Coupling class of the sender as of the last sync round.
        peer_class: PeerClass,
        peer_drift: f64,
        remix: Option<CmbKey>,
        mood_delivered: bool,
    },
    Lifecycle {
        t: Timestamp,
        agent: AgentId,
        key: CmbKey,
        trigger: String,
        from: LifecycleState,
        to: LifecycleState,
    },
    ValidationRejected {
        t: Timestamp,
        agent: AgentId,
        validator: AgentId,
        key: CmbKey,
        reason: String,
    },
    Blend {
        t: Timestamp,
        agent: AgentId,
        peer: AgentId,
        class: PeerClass,
        alpha_eff: f64,
        /// Drift to the peer's snapshot before and after blending.
        drift_before: f64,
        drift_after: f64,
    },
    PairDrift {
        t: Timestamp,
        round: usize,
        a: AgentId,
        b: AgentId,
        before: f64,
        after: f64,
    },
    Sweep {
        t: Timestamp,
        agent: AgentId,
        purged: Vec<CmbKey>,
    },
    StoreSummary {
        agent: AgentId,
        live: usize,
        lifecycle: BTreeMap<LifecycleState, usize>,
        /// Mesh-wide lineage depth of live blocks as `(depth, count)` pairs.
        lineage_depths: Vec<(usize, usize)>,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self, SimError> {
        let mut events = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| SimError::Trace {
                line: i + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            events.push(serde_json::from_str(&line).map_err(|e| SimError::Trace {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Trace { events })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub sync_rounds: usize,
    pub broadcasts: usize,
    pub evaluations: usize,
    pub decisions: BTreeMap<Decision, usize>,
    /// Peer drift at the start of each sync round, keyed `a|b`.
    pub drift_series: BTreeMap<String, Vec<(Timestamp, f64)>>,
    pub final_drift: BTreeMap<String, f64>,
    pub coupling_classes: BTreeMap<PeerClass, usize>,
    pub lineage_depth_histogram: BTreeMap<usize, usize>,
    pub max_lineage_depth: usize,
    pub mood_deliveries: usize,
    pub live_cmbs: usize,
    pub purged_cmbs: usize,
    pub lifecycle: BTreeMap<LifecycleState, usize>,
    pub validations_rejected: usize,
}

pub fn pair_key(a: &AgentId, b: &AgentId) -> String {
    format!("{a}|{b}")
}

pub fn metrics(trace: &Trace) -> Summary {
    let mut s = Summary {
        sync_rounds: 0,
        broadcasts: 0,
        evaluations: 0,
        decisions: Decision::ALL.iter().map(|d| (*d, 0)).collect(),
        drift_series: BTreeMap::new(),
        final_drift: BTreeMap::new(),
        coupling_classes: [PeerClass::Aligned, PeerClass::Guarded, PeerClass::Rejected]
            .into_iter()
            .map(|c| (c, 0))
            .collect(),
        lineage_depth_histogram: BTreeMap::new(),
        max_lineage_depth: 0,
        mood_deliveries: 0,
        live_cmbs: 0,
        purged_cmbs: 0,
        lifecycle: LifecycleState::ALL.iter().map(|l| (*l, 0)).collect(),
        validations_rejected: 0,
    };
    let mut rounds = BTreeSet::new();
    for e in &trace.events {
        match e {
            TraceEvent::Broadcast { .. } => s.broadcasts += 1,
            TraceEvent::Evaluation {
                decision,
                mood_delivered,
                ..
            } => {
                s.evaluations += 1;
                *s.decisions.entry(*decision).or_default() += 1;
                s.mood_deliveries += usize::from(*mood_delivered);
            }
            TraceEvent::Blend { class, .. } => *s.coupling_classes.entry(*class).or_default() += 1,
            TraceEvent::PairDrift {
                t,
                round,
                a,
                b,
                before,
                after,
            } => {
                rounds.insert(*round);
                s.drift_series.entry(pair_key(a, b)).or_default().push((*t, *before));
                s.final_drift.insert(pair_key(a, b), *after);
            }
            TraceEvent::Sweep { purged, .. } => s.purged_cmbs += purged.len(),
            TraceEvent::ValidationRejected { .. } => s.validations_rejected += 1,
            TraceEvent::StoreSummary {
                live,
                lifecycle,
                lineage_depths,
                ..
            } => {
                s.live_cmbs += live;
                for (state, n) in lifecycle {
                    *s.lifecycle.entry(*state).or_default() += n;
                }
                for (d, n) in lineage_depths {
                    *s.lineage_depth_histogram.entry(*d).or_default() += n;
                }
            }
            TraceEvent::Lifecycle { .. } => {}
        }
    }
    s.sync_rounds = rounds.len();
    s.max_lineage_depth = s
        .lineage_depth_histogram
        .iter()
        .filter(|(_, n)| **n > 0)
        .map(|(d, _)| *d)
        .max()
        .unwrap_or(0);
    s
}

#[derive(Clone, Debug)]
enum Kind {
    Sync,
    Sweep,
    Observe(usize),
    Rebroadcast(usize),
    Deliver(Arc<Cmb>),
    RemixNotice {
        parent: CmbKey,
        child: CmbKey,
        from: AgentId,
    },
    Validate(usize),
    ValidationNotice {
        key: CmbKey,
        child: Option<CmbKey>,
        validator: AgentId,
    },
    PurgeNotice {
        parent: CmbKey,
        child: CmbKey,
    },
}

impl Kind {
    fn rank(&self) -> u8 {
        match self {
            Kind::Sync => 0,
            Kind::Sweep => 1,
            Kind::Observe(_) => 2,
            Kind::Rebroadcast(_) => 3,
            Kind::Deliver(_) => 4,
            Kind::RemixNotice { .. } => 5,
            Kind::Validate(_) => 6,
            Kind::ValidationNotice { .. } => 7,
            Kind::PurgeNotice { .. } => 8,
        }
    }
}

type EventKey = (Timestamp, String, u8, u64);

struct Node {
    profile: AgentProfile,
    store: MemoryStore,
    state: HiddenState,
}

/// Random initial state: values uniform in [-1, 1), time constants
/// log-uniform within each stratum, strata shuffled across neurons.
pub fn initial_state(dim: usize, rng: &mut ChaCha8Rng, tau_rng: Option<&mut ChaCha8Rng>) -> HiddenState {
    let h: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let tau_rng = match tau_rng {
        Some(r) => r,
        None => rng,
    };
    let mut strata: Vec<usize> = (0..dim).map(|i| i % TAU_STRATA.len()).collect();
    strata.shuffle(tau_rng);
    let tau = strata
        .into_iter()
        .map(|s| {
            let (lo, hi) = TAU_STRATA[s];
            let u: f64 = tau_rng.gen();
            (lo.ln() + u * (hi.ln() - lo.ln())).exp()
        })
        .collect();
    HiddenState::new(h, tau, 0).expect("finite positive state")
}

pub struct Simulation {
    config: SimConfig,
    encoder: FieldEncoder,
    nodes: BTreeMap<AgentId, Node>,
    synced: BTreeMap<AgentId, Vec<f64>>,
    queue: BTreeMap<EventKey, Kind>,
    seq: u64,
    origins: BTreeMap<CmbKey, AgentId>,
    observed: Vec<Option<Arc<Cmb>>>,
    round: usize,
    finished: bool,
    trace: Trace,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let encoder = FieldEncoder::new(&config.encoder)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut agents: Vec<&SimAgent> = config.agents.iter().collect();
        agents.sort_by(|a, b| a.profile.agent_id.cmp(&b.profile.agent_id));
        let mut nodes = BTreeMap::new();
        for a in agents {
            let mut tau_rng = a.tau_seed.map(ChaCha8Rng::seed_from_u64);
            let state = initial_state(encoder.dim(), &mut rng, tau_rng.as_mut());
            nodes.insert(
                a.profile.agent_id.clone(),
                Node {
                    profile: a.profile.clone(),
                    store: MemoryStore::new(a.profile.agent_id.clone()),
                    state,
                },
            );
        }
        let synced = nodes.iter().map(|(id, n)| (id.clone(), n.state.h.clone())).collect();
        let mut sim = Simulation {
            observed: vec![None; config.observations.len()],
            config,
            encoder,
            nodes,
            synced,
            queue: BTreeMap::new(),
            seq: 0,
            origins: BTreeMap::new(),
            round: 0,
            finished: false,
            trace: Trace::default(),
        };
        sim.push(0, "", Kind::Sync);
        if sim.config.sweep_interval <= sim.config.duration {
            sim.push(sim.config.sweep_interval, "", Kind::Sweep);
        }
        for i in 0..sim.config.observations.len() {
            let o = &sim.config.observations[i];
            let (t, a) = (o.t, o.agent.to_string());
            sim.push(t, &a, Kind::Observe(i));
        }
        for i in 0..sim.config.validations.len() {
            let v = &sim.config.validations[i];
            let (t, a) = (v.t, v.agent.to_string());
            sim.push(t, &a, Kind::Validate(i));
        }
        for i in 0..sim.config.rebroadcasts.len() {
            let r = &sim.config.rebroadcasts[i];
            let t = r.t;
            let a = sim.config.observations[r.observation].agent.to_string();
            sim.push(t, &a, Kind::Rebroadcast(r.observation));
        }
        Ok(sim)
    }

    fn push(&mut self, t: Timestamp, agent: &str, kind: Kind) {
        self.seq += 1;
        self.queue.insert((t, agent.to_string(), kind.rank(), self.seq), kind);
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn store(&self, agent: &AgentId) -> Option<&MemoryStore> {
        self.nodes.get(agent).map(|n| &n.store)
    }

    pub fn state(&self, agent: &AgentId) -> Option<&HiddenState> {
        self.nodes.get(agent).map(|n| &n.state)
    }

    pub fn agents(&self) -> impl Iterator<Item = &AgentId> {
        self.nodes.keys()
    }

    /// The block produced by an observation, once it has happened.
    pub fn observed(&self, observation: usize) -> Option<&Arc<Cmb>> {
        self.observed.get(observation)?.as_ref()
    }

    /// Runs every queued event and appends the final store summaries. Later
    /// calls return the same trace.
    pub fn run(&mut self) -> Result<&Trace, SimError> {
        if self.finished {
            return Ok(&self.trace);
        }
        while let Some(((t, agent, _, _), kind)) = self.queue.pop_first() {
            let agent = AgentId::new(agent);
            match kind {
                Kind::Sync => self.sync(t)?,
                Kind::Sweep => self.sweep(t)?,
                Kind::Observe(i) => self.observe(t, i)?,
                Kind::Rebroadcast(i) => self.rebroadcast(t, i),
                Kind::Deliver(cmb) => self.deliver(t, &agent, &cmb)?,
                Kind::RemixNotice { parent, child, from } => self.remix_notice(t, &agent, &parent, &child, &from)?,
                Kind::Validate(i) => self.validate(t, &agent, i)?,
                Kind::ValidationNotice { key, child, validator } => {
                    self.validation_notice(t, &agent, &key, child.as_ref(), &validator)?
                }
                Kind::PurgeNotice { parent, child } => {
                    if let Some(n) = self.nodes.get_mut(&agent) {
                        n.store.drop_remote_child(&parent, &child);
                    }
                }
            }
        }
        self.finish();
        self.finished = true;
        Ok(&self.trace)
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    fn node(&mut self, agent: &AgentId) -> Result<&mut Node, SimError> {
        self.nodes
            .get_mut(agent)
            .ok_or_else(|| SimError::UnknownAgent(agent.clone()))
    }

    fn broadcast(&mut self, t: Timestamp, cmb: &Arc<Cmb>, rebroadcast: bool) {
        self.trace.events.push(TraceEvent::Broadcast {
            t,
            agent: cmb.origin().clone(),
            key: cmb.key().clone(),
            rebroadcast,
        });
        let peers: Vec<String> = self
            .nodes
            .keys()
            .filter(|id| *id != cmb.origin())
            .map(|id| id.to_string())
            .collect();
        for p in peers {
            self.push(t, &p, Kind::Deliver(Arc::clone(cmb)));
        }
    }

    fn observe(&mut self, t: Timestamp, i: usize) -> Result<(), SimError> {
        let o = self.config.observations[i].clone();
        let encoder = self.encoder.clone();
        let node = self.node(&o.agent)?;
        let draft = NewCmb {
            ts: t,
            confidence: o.confidence.unwrap_or(node.profile.default_confidence),
            texts: o.texts,
            mood_va: o.mood_va,
            parents: Vec::new(),
            method: METHOD_OBSERVATION.to_string(),
        };
        let cmb = node.store.create_cmb(draft, &encoder)?;
        let own: Vec<(FieldId, &Embedding)> = FieldId::ALL.iter().map(|f| (*f, &cmb.field(*f).vector)).collect();
        node.state = ingest_state(&node.state, &own, &node.profile, t)?;
        self.origins.insert(cmb.key().clone(), o.agent.clone());
        self.observed[i] = Some(Arc::clone(&cmb));
        self.broadcast(t, &cmb, false);
        Ok(())
    }

    fn rebroadcast(&mut self, t: Timestamp, i: usize) {
        if let Some(cmb) = self.observed[i].clone() {
            self.broadcast(t, &cmb, true);
        }
    }

    fn deliver(&mut self, t: Timestamp, agent: &AgentId, cmb: &Arc<Cmb>) -> Result<(), SimError> {
        let blend = self.config.blend;
        let svaf = self.config.svaf.clone();
        let peer = classify_peer_with(&self.synced[agent], &self.synced[cmb.origin()], &blend)?;
        let node = self.node(agent)?;
        let outcome = evaluate_cmb(&node.store, &node.profile, cmb, t, &svaf)?;
        let remix = commit(&mut node.store, cmb, &outcome)?;
        if outcome.decision.is_accepted() {
            let fused: Vec<(FieldId, &Embedding)> = outcome.fused.iter().collect();
            node.state = ingest_state(&node.state, &fused, &node.profile, t)?;
        } else if outcome.mood_delivered {
            let mood = [(FieldId::Mood, &cmb.field(FieldId::Mood).vector)];
            node.state = ingest_state(&node.state, &mood, &node.profile, t)?;
        }
        self.trace.events.push(TraceEvent::Evaluation {
            t,
            agent: agent.clone(),
            from: cmb.origin().clone(),
            key: cmb.key().clone(),
            decision: outcome.decision,
            basis: outcome.basis,
            total_drift: outcome.total_drift,
            max_drift: outcome.max_drift(),
            freshness: outcome.freshness,
            peer_class: peer.class,
            peer_drift: peer.drift,
            remix: remix.as_ref().map(|r| r.key().clone()),
            mood_delivered: outcome.mood_delivered,
        });
        if let Some(r) = remix {
            self.origins.insert(r.key().clone(), agent.clone());
            self.push(
                t,
                cmb.origin().as_str(),
                Kind::RemixNotice {
                    parent: cmb.key().clone(),
                    child: r.key().clone(),
                    from: agent.clone(),
                },
            );
        }
        Ok(())
    }

    fn transition(&mut self, t: Timestamp, agent: &AgentId, key: &CmbKey, trigger: &Trigger) -> Result<(), SimError> {
        let node = self.node(agent)?;
        let Some(from) = node.store.get(key).map(|r| r.state()) else {
            return Ok(());
        };
        let to = node.store.advance_lifecycle(key, trigger)?;
        if from != to {
            self.trace.events.push(TraceEvent::Lifecycle {
                t,
                agent: agent.clone(),
                key: key.clone(),
                trigger: trigger.name().to_string(),
                from,
                to,
            });
        }
        Ok(())
    }

    fn remix_notice(
        &mut self,
        t: Timestamp,
        owner: &AgentId,
        parent: &CmbKey,
        child: &CmbKey,
        from: &AgentId,
    ) -> Result<(), SimError> {
        let node = self.node(owner)?;
        if !node.store.contains(parent) {
            return Ok(());
        }
        node.store.record_remote_child(parent, child, from)?;
        self.transition(
            t,
            owner,
            parent,
            &Trigger::PeerRemix {
                agent: from.clone(),
                t,
            },
        )
    }

    fn validate(&mut self, t: Timestamp, validator: &AgentId, i: usize) -> Result<(), SimError> {
        let obs = self.config.validations[i].observation;
        let target = self.observed[obs]
            .clone()
            .ok_or_else(|| SimError::Config(format!("validation {i} ran before observation {obs}")))?;
        let encoder = self.encoder.clone();
        let node = self.node(validator)?;
        let mut child = None;
        if node.profile.role.may_validate() {
            if !node.store.has_seen(target.key()) && !node.store.contains(target.key()) {
                node.store.note_seen(target.key(), target.origin(), t);
            }
            let mood = target.field(FieldId::Mood);
            let draft = NewCmb {
                ts: t,
                confidence: node.profile.default_confidence,
                texts: FieldId::ALL
                    .iter()
                    .map(|f| (*f, target.field(*f).text.clone()))
                    .collect(),
                mood_va: Some((mood.valence.unwrap_or(0.0), mood.arousal.unwrap_or(0.0))),
                parents: vec![target.key().clone()],
                method: METHOD_VALIDATION.to_string(),
            };
            let c = node.store.create_cmb(draft, &encoder)?;
            self.origins.insert(c.key().clone(), validator.clone());
            child = Some(c.key().clone());
        }
        self.push(
            t,
            target.origin().as_str(),
            Kind::ValidationNotice {
                key: target.key().clone(),
                child,
                validator: validator.clone(),
            },
        );
        Ok(())
    }

    fn validation_notice(
        &mut self,
        t: Timestamp,
        owner: &AgentId,
        key: &CmbKey,
        child: Option<&CmbKey>,
        validator: &AgentId,
    ) -> Result<(), SimError> {
        let role = self.node(validator)?.profile.role;
        let node = self.node(owner)?;
        if !node.store.contains(key) {
            return Ok(());
        }
        if let Some(c) = child {
            node.store.record_remote_child(key, c, validator)?;
        }
        let trigger = Trigger::HumanValidation {
            agent: validator.clone(),
            role,
            t,
        };
        match self.transition(t, owner, key, &trigger) {
            Err(SimError::Cmb(e @ CmbError::Authority { .. })) => {
                self.trace.events.push(TraceEvent::ValidationRejected {
                    t,
                    agent: owner.clone(),
                    validator: validator.clone(),
                    key: key.clone(),
                    reason: e.to_string(),
                });
                Ok(())
            }
            other => other,
        }
    }

    fn sync(&mut self, t: Timestamp) -> Result<(), SimError> {
        let blend = self.config.blend;
        let snapshot: BTreeMap<AgentId, Vec<f64>> =
            self.nodes.iter().map(|(id, n)| (id.clone(), n.state.h.clone())).collect();
        for (id, node) in self.nodes.iter_mut() {
            for (peer, peer_h) in &snapshot {
                if peer == id {
                    continue;
                }
                let d = classify_peer_with(&snapshot[id], peer_h, &blend)?;
                let drift_before = peer_drift(&node.state.h, peer_h)?;
                node.state = blend_states(&node.state, peer_h, d.alpha_eff, &blend)?;
                self.trace.events.push(TraceEvent::Blend {
                    t,
                    agent: id.clone(),
                    peer: peer.clone(),
                    class: d.class,
                    alpha_eff: d.alpha_eff,
                    drift_before,
                    drift_after: peer_drift(&node.state.h, peer_h)?,
                });
            }
        }
        let ids: Vec<AgentId> = self.nodes.keys().cloned().collect();
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                self.trace.events.push(TraceEvent::PairDrift {
                    t,
                    round: self.round,
                    a: a.clone(),
                    b: b.clone(),
                    before: peer_drift(&snapshot[a], &snapshot[b])?,
                    after: peer_drift(&self.nodes[a].state.h, &self.nodes[b].state.h)?,
                });
            }
        }
        self.synced = self.nodes.iter().map(|(id, n)| (id.clone(), n.state.h.clone())).collect();
        self.round += 1;
        let next = t + self.config.sync_interval;
        if next <= self.config.duration {
            self.push(next, "", Kind::Sync);
        }
        Ok(())
    }

    fn sweep(&mut self, t: Timestamp) -> Result<(), SimError> {
        let max_age = self.config.max_age;
        let ids: Vec<AgentId> = self.nodes.keys().cloned().collect();
        for id in &ids {
            let keys: Vec<CmbKey> = self.nodes[id].store.keys().cloned().collect();
            for k in &keys {
                self.transition(t, id, k, &Trigger::Clock { t })?;
            }
            let purged = self.node(id)?.store.retention_sweep(t, max_age);
            for cmb in &purged {
                for p in &cmb.lineage().parents {
                    if let Some(owner) = self.origins.get(p).filter(|o| *o != id).cloned() {
                        self.push(
                            t,
                            owner.as_str(),
                            Kind::PurgeNotice {
                                parent: p.clone(),
                                child: cmb.key().clone(),
                            },
                        );
                    }
                }
            }
            self.trace.events.push(TraceEvent::Sweep {
                t,
                agent: id.clone(),
                purged: purged.iter().map(|c| c.key().clone()).collect(),
            });
        }
        let next = t + self.config.sweep_interval;
        if next <= self.config.duration {
            self.push(next, "", Kind::Sweep);
        }
        Ok(())
    }

    /// Depth of every live block across all stores; parents no longer live
    /// anywhere end the chain.
    pub fn mesh_depths(&self) -> BTreeMap<CmbKey, usize> {
        let parents: BTreeMap<&CmbKey, &[CmbKey]> = self
            .nodes
            .values()
            .flat_map(|n| n.store.iter())
            .map(|r| (r.cmb.key(), r.cmb.lineage().parents.as_slice()))
            .collect();
        let mut depth: BTreeMap<CmbKey, usize> = BTreeMap::new();
        // Keys sort by timestamp first and parents always precede children in
        // time, but resolve iteratively to be safe with equal timestamps.
        let mut pending: Vec<&CmbKey> = parents.keys().copied().collect();
        while !pending.is_empty() {
            let before = pending.len();
            pending.retain(|k| {
                let mut d = 0;
                for p in parents[k] {
                    if parents.contains_key(p) {
                        match depth.get(p) {
                            Some(pd) => d = d.max(pd + 1),
                            None => return true,
                        }
                    }
                }
                depth.insert((*k).clone(), d);
                false
            });
            if pending.len() == before {
                break;
            }
        }
        depth
    }

    fn finish(&mut self) {
        let depths = self.mesh_depths();
        for (id, node) in &self.nodes {
            let mut lifecycle: BTreeMap<LifecycleState, usize> = LifecycleState::ALL.iter().map(|s| (*s, 0)).collect();
            let mut lineage_depths: BTreeMap<usize, usize> = BTreeMap::new();
            for r in node.store.iter() {
                *lifecycle.entry(r.state()).or_default() += 1;
                *lineage_depths
                    .entry(depths.get(r.cmb.key()).copied().unwrap_or(0))
                    .or_default() += 1;
            }
            self.trace.events.push(TraceEvent::StoreSummary {
                agent: id.clone(),
                live: node.store.len(),
                lifecycle,
                lineage_depths: lineage_depths.into_iter().collect(),
            });
        }
    }
}

/// Runs a full simulation and returns its trace.
pub fn run(config: SimConfig) -> Result<Trace, SimError> {
    let mut sim = Simulation::new(config)?;
    sim.run()?;
    Ok(sim.into_trace())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profiles() -> Vec<AgentProfile> {
        let c = ProfileCatalog::builtin();
        vec![c.for_agent("coding-agent").unwrap(), c.for_agent("music-agent").unwrap()]
    }

    #[test]
    fn tau_strata_are_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = initial_state(63, &mut rng, None);
        let count = |lo: f64, hi: f64| s.tau.iter().filter(|t| **t >= lo && **t < hi).count();
        assert_eq!(count(1.0, 5.0), 21);
        assert_eq!(count(5.0, 30.0), 21);
        assert_eq!(count(30.0, 120.0 + 1e-9), 21);
        assert!(s.h.iter().all(|x| (-1.0..1.0).contains(x)));
    }

    #[test]
    fn empty_mesh_run() {
        let trace = run(SimConfig::new(1, profiles(), 120)).unwrap();
        let m = metrics(&trace);
        assert_eq!(m.sync_rounds, 3);
        assert_eq!(m.evaluations, 0);
        assert_eq!(m.live_cmbs, 0);
        assert_eq!(m.drift_series["coding-agent|music-agent"].len(), 3);
    }

    #[test]
    fn config_errors() {
        assert!(matches!(
            Simulation::new(SimConfig::new(1, profiles()[..1].to_vec(), 10)),
            Err(SimError::Config(_))
        ));
        let mut c = SimConfig::new(1, profiles(), 10);
        c.observations.push(Observation {
            t: 0,
            agent: "nobody".into(),
            texts: BTreeMap::new(),
            mood_va: None,
            confidence: None,
        });
        assert!(matches!(Simulation::new(c), Err(SimError::UnknownAgent(_))));
    }

    #[test]
    fn empty_trace_metrics() {
        let m = metrics(&Trace::default());
        assert_eq!(m.evaluations, 0);
        assert_eq!(m.decisions.len(), 4);
        assert!(m.decisions.values().all(|n| *n == 0));
        assert_eq!(m.max_lineage_depth, 0);
    }
}
