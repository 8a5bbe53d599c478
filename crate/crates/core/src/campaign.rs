//! Round planning and execution against interchangeable measurement backends.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Mutex;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{aggregate_median, MeasurementRound, MedianSet, NodeId, NodeRecord, PairKey, Ping, RelayType, Role, RttSample};
use crate::engine::{feasible_relays, NodeIndex};
use crate::error::{Error, Result, RowError};
use crate::geo::PropagationConstants;
use crate::selection::{sample_relays, select_eyeball_endpoints, CoverageRecord, EyeballSet, EYEBALL_CUTOFF_PCT};
use crate::synth::{derive_seed, World};

const TAG_SELECT: u64 = 0x5e1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignPlan {
    pub seed: u64,
    pub rounds: u32,
    pub cadence_hours: u32,
    pub window_min: u32,
    pub interval_min: u32,
    pub pings: u8,
    pub start_time: DateTime<Utc>,
}

impl Default for CampaignPlan {
    fn default() -> Self {
        CampaignPlan {
            seed: 0,
            rounds: 1,
            cadence_hours: 12,
            window_min: 30,
            interval_min: 5,
            pings: 6,
            start_time: Utc.with_ymd_and_hms(2017, 4, 20, 0, 0, 0).unwrap(),
        }
    }
}

impl CampaignPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.rounds == 0 {
            return bad("plan has no rounds".into());
        }
        if self.pings == 0 || self.interval_min == 0 {
            return bad("pings and interval must be positive".into());
        }
        if self.pings as u32 * self.interval_min > self.window_min + self.interval_min {
            return bad(format!(
                "{} pings every {} min do not fit a {} min window",
                self.pings, self.interval_min, self.window_min
            ));
        }
        if self.cadence_hours * 60 < self.window_min {
            return bad(format!(
                "cadence {} h is shorter than the {} min window",
                self.cadence_hours, self.window_min
            ));
        }
        if (self.pings as usize) < crate::dataset::MIN_VALID_SAMPLES {
            log::warn!("{} pings per pair can never yield a median", self.pings);
        }
        Ok(())
    }

    /// Minutes after the window start at which each slot fires.
    pub fn slot_offsets(&self) -> Vec<u32> {
        (0..self.pings as u32).map(|s| s * self.interval_min).collect()
    }

    pub fn round_start(&self, round_id: u32) -> DateTime<Utc> {
        self.start_time + Duration::hours(self.cadence_hours as i64 * round_id as i64)
    }

    pub fn round_seed(&self, round_id: u32) -> u64 {
        derive_seed(self.seed, &[TAG_SELECT, round_id as u64])
    }

    fn relay_seed(&self, round_id: u32, t: RelayType) -> u64 {
        let k = RelayType::ALL.iter().position(|x| *x == t).expect("listed") as u64;
        derive_seed(self.seed, &[TAG_SELECT, round_id as u64, 1 + k])
    }
}

/// Node inventory a campaign draws from. Without coverage data every
/// endpoint and relay takes part in every round; with it, endpoints and
/// relays are re-sampled per round.
#[derive(Debug, Clone, Default)]
pub struct Inventory {
    pub nodes: Vec<NodeRecord>,
    pub coverage: Option<Vec<CoverageRecord>>,
}

impl Inventory {
    pub fn new(nodes: Vec<NodeRecord>) -> Self {
        Inventory { nodes, coverage: None }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let line = i as u64 + 1;
            if let Err(e) = n.validate() {
                errors.push(RowError { line, reason: e.to_string() });
            } else if !seen.insert(&n.node_id) {
                errors.push(RowError { line, reason: format!("duplicate node_id {}", n.node_id) });
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation { source_name: "inventory".into(), errors })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Task {
    SelectNodes {
        round_id: u32,
        seed: u64,
        endpoints: BTreeSet<NodeId>,
        relays_by_type: BTreeMap<RelayType, BTreeSet<NodeId>>,
    },
    DirectPing {
        round_id: u32,
        pair: PairKey,
        slot: u8,
        offset_min: u32,
    },
    Feasibility {
        round_id: u32,
        offset_min: u32,
    },
    /// Endpoint-relay ping, or a repeat of a direct ping when `remeasure`.
    LinkPing {
        round_id: u32,
        pair: PairKey,
        slot: u8,
        offset_min: u32,
        remeasure: bool,
    },
}

fn select_nodes(
    plan: &CampaignPlan,
    inv: &Inventory,
    round_id: u32,
) -> (BTreeSet<NodeId>, BTreeMap<RelayType, BTreeSet<NodeId>>) {
    let mut relays: BTreeMap<RelayType, BTreeSet<NodeId>> = BTreeMap::new();
    let endpoints = match &inv.coverage {
        None => {
            for n in &inv.nodes {
                if let Some(t) = n.relay_type.filter(|_| n.role == Role::Relay) {
                    relays.entry(t).or_default().insert(n.node_id.clone());
                }
            }
            inv.nodes
                .iter()
                .filter(|n| n.role == Role::Endpoint)
                .map(|n| n.node_id.clone())
                .collect()
        }
        Some(cov) => {
            let eyeballs = EyeballSet::from_coverage(cov, EYEBALL_CUTOFF_PCT);
            for t in RelayType::ALL {
                let ids = sample_relays(&inv.nodes, t, &eyeballs, plan.relay_seed(round_id, t));
                if !ids.is_empty() {
                    relays.insert(t, ids);
                }
            }
            select_eyeball_endpoints(cov, &inv.nodes, plan.round_seed(round_id))
        }
    };
    (endpoints, relays)
}

fn ordered(a: &NodeId, b: &NodeId) -> PairKey {
    PairKey::new(a.clone(), b.clone()).expect("distinct nodes")
}

/// Ordered task list for one round: node selection, direct pings, the
/// feasibility job, then endpoint-relay pings with direct re-measurement.
/// Ping tasks are listed slot by slot, in schedule order.
pub fn plan_round(plan: &CampaignPlan, inv: &Inventory, round_id: u32) -> Result<Vec<Task>> {
    plan.validate()?;
    inv.validate()?;
    let (endpoints, relays_by_type) = select_nodes(plan, inv, round_id);
    let mut round = MeasurementRound::new(round_id, plan.round_start(round_id));
    round.endpoints = endpoints.clone();
    let direct = round.endpoint_pairs();
    let relay_ids: BTreeSet<&NodeId> = relays_by_type.values().flatten().collect();
    let mut links: Vec<PairKey> = Vec::new();
    for e in &endpoints {
        for r in &relay_ids {
            if e != *r {
                links.push(ordered(e, r));
            }
        }
    }
    links.sort();

    let offsets = plan.slot_offsets();
    let mut tasks = vec![Task::SelectNodes {
        round_id,
        seed: plan.round_seed(round_id),
        endpoints,
        relays_by_type,
    }];
    for (slot, &off) in offsets.iter().enumerate() {
        tasks.extend(direct.iter().map(|pair| Task::DirectPing {
            round_id,
            pair: pair.clone(),
            slot: slot as u8,
            offset_min: off,
        }));
    }
    tasks.push(Task::Feasibility { round_id, offset_min: plan.window_min });
    for (slot, &off) in offsets.iter().enumerate() {
        let step = |pair: &PairKey, remeasure| Task::LinkPing {
            round_id,
            pair: pair.clone(),
            slot: slot as u8,
            offset_min: plan.window_min + off,
            remeasure,
        };
        tasks.extend(links.iter().map(|p| step(p, false)));
        tasks.extend(direct.iter().map(|p| step(p, true)));
    }
    Ok(tasks)
}

/// Source of ping results. Slots that get no answer come back as lost.
pub trait Backend: Sync {
    fn ping(&self, round_id: u32, src: &NodeId, dst: &NodeId, slots: &[u8]) -> Result<Vec<RttSample>>;
}

/// Answers from a generated world.
pub struct Simulator<'w> {
    pub world: &'w World,
}

impl Backend for Simulator<'_> {
    fn ping(&self, round_id: u32, src: &NodeId, dst: &NodeId, slots: &[u8]) -> Result<Vec<RttSample>> {
        let Some(&max) = slots.iter().max() else { return Ok(Vec::new()) };
        let series = self.world.ping_slots(src, dst, round_id, max + 1)?;
        Ok(series.into_iter().filter(|s| slots.contains(&s.slot)).collect())
    }
}

/// Answers from previously recorded samples, in either direction.
#[derive(Debug, Default)]
pub struct FileReplay {
    series: HashMap<(u32, PairKey), BTreeMap<u8, Ping>>,
}

impl FileReplay {
    pub fn new(samples: &[RttSample]) -> Result<Self> {
        let mut series: HashMap<(u32, PairKey), BTreeMap<u8, Ping>> = HashMap::new();
        for s in samples {
            let slots = series.entry((s.round_id, s.pair()?)).or_default();
            if slots.insert(s.slot, s.rtt).is_some() {
                return Err(Error::invalid(format!(
                    "two samples for {} round {} slot {}",
                    s.pair()?,
                    s.round_id,
                    s.slot
                )));
            }
        }
        Ok(FileReplay { series })
    }

    pub fn rounds(&self) -> BTreeSet<u32> {
        self.series.keys().map(|(r, _)| *r).collect()
    }
}

impl Backend for FileReplay {
    fn ping(&self, round_id: u32, src: &NodeId, dst: &NodeId, slots: &[u8]) -> Result<Vec<RttSample>> {
        let recorded = self.series.get(&(round_id, ordered(src, dst)));
        Ok(slots
            .iter()
            .map(|&slot| RttSample {
                src: src.clone(),
                dst: dst.clone(),
                round_id,
                slot,
                rtt: recorded.and_then(|m| m.get(&slot)).copied().unwrap_or(Ping::Lost),
            })
            .collect())
    }
}

/// Wire-level access to a measurement platform.
pub trait Transport: Sync {
    /// Sends `count` pings from `src` to `dst`; `None` marks a lost reply.
    fn ping_series(&self, credential: &str, src: &str, dst: &str, count: u8, interval_min: u32) -> Result<Vec<Option<f64>>>;
}

/// Canned transport for tests and dry runs; records every request.
#[derive(Debug, Default)]
pub struct MockTransport {
    responses: HashMap<(String, String), Vec<Option<f64>>>,
    requests: Mutex<Vec<(String, String)>>,
}

impl MockTransport {
    pub fn with_response(mut self, src: &str, dst: &str, rtts: Vec<Option<f64>>) -> Self {
        self.responses.insert((src.to_string(), dst.to_string()), rtts);
        self
    }

    pub fn requests(&self) -> Vec<(String, String)> {
        self.requests.lock().expect("poisoned").clone()
    }
}

impl Transport for MockTransport {
    fn ping_series(&self, _credential: &str, src: &str, dst: &str, count: u8, _interval_min: u32) -> Result<Vec<Option<f64>>> {
        self.requests.lock().expect("poisoned").push((src.to_string(), dst.to_string()));
        let canned = self
            .responses
            .get(&(src.to_string(), dst.to_string()))
            .or_else(|| self.responses.get(&(dst.to_string(), src.to_string())))
            .ok_or_else(|| Error::Backend(format!("no response for {src}->{dst}")))?;
        Ok(canned.iter().copied().take(count as usize).collect())
    }
}

pub const CREDENTIAL_ENV: &str = "TIV_PLATFORM_KEY";

/// Thin client for a live measurement platform.
pub struct LiveClient<T> {
    transport: T,
    credential: String,
    interval_min: u32,
}

impl<T: Transport> LiveClient<T> {
    /// Reads the API key from `TIV_PLATFORM_KEY`.
    pub fn from_env(transport: T, interval_min: u32) -> Result<Self> {
        let credential = std::env::var(CREDENTIAL_ENV)
            .map_err(|_| Error::Backend(format!("{CREDENTIAL_ENV} is not set")))?;
        Ok(LiveClient { transport, credential, interval_min })
    }

    pub fn mock(transport: T, interval_min: u32) -> Self {
        LiveClient { transport, credential: "mock".into(), interval_min }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }
}

impl<T: Transport> Backend for LiveClient<T> {
    fn ping(&self, round_id: u32, src: &NodeId, dst: &NodeId, slots: &[u8]) -> Result<Vec<RttSample>> {
        let Some(&max) = slots.iter().max() else { return Ok(Vec::new()) };
        let replies = self
            .transport
            .ping_series(&self.credential, src.as_str(), dst.as_str(), max + 1, self.interval_min)?;
        Ok(slots
            .iter()
            .map(|&slot| RttSample {
                src: src.clone(),
                dst: dst.clone(),
                round_id,
                slot,
                rtt: match replies.get(slot as usize).copied().flatten() {
                    Some(ms) if ms.is_finite() && ms > 0.0 => Ping::Reply(ms),
                    _ => Ping::Lost,
                },
            })
            .collect())
    }
}

/// Pings each pair over its slots concurrently. Failed requests count as
/// lost; an error is returned only when every request failed.
fn measure(
    backend: &dyn Backend,
    round_id: u32,
    pairs: &BTreeMap<PairKey, Vec<u8>>,
) -> Result<Vec<(PairKey, Vec<RttSample>)>> {
    let results: Vec<(PairKey, Result<Vec<RttSample>>)> = pairs
        .par_iter()
        .map(|(pair, slots)| (pair.clone(), backend.ping(round_id, pair.first(), pair.second(), slots)))
        .collect();
    let failures = results.iter().filter(|(_, r)| r.is_err()).count();
    if failures > 0 && failures == results.len() {
        let (_, first) = results.into_iter().next().expect("non-empty");
        return Err(Error::Backend(format!(
            "all {failures} requests in round {round_id} failed: {}",
            first.expect_err("failed")
        )));
    }
    Ok(results
        .into_iter()
        .map(|(pair, r)| match r {
            Ok(samples) => (pair, samples),
            Err(e) => {
                log::warn!("{pair} in round {round_id}: {e}; recorded as lost");
                (pair, Vec::new())
            }
        })
        .collect())
}

fn slots_by_pair<'a>(tasks: impl Iterator<Item = (&'a PairKey, u8)>) -> BTreeMap<PairKey, Vec<u8>> {
    let mut out: BTreeMap<PairKey, Vec<u8>> = BTreeMap::new();
    for (pair, slot) in tasks {
        out.entry(pair.clone()).or_default().push(slot);
    }
    out
}

/// Runs one planned round. Step-2 medians drive feasibility; step-4 link
/// pings go only to relays feasible for at least one pair of the endpoint.
/// The stored direct medians come from the step-4 re-measurement, and a
/// pair whose re-measurement yields no median is dropped for the round.
pub fn execute_round(
    plan: &CampaignPlan,
    inv: &Inventory,
    round_id: u32,
    backend: &dyn Backend,
    consts: &PropagationConstants,
) -> Result<MeasurementRound> {
    let tasks = plan_round(plan, inv, round_id)?;
    let mut round = MeasurementRound::new(round_id, plan.round_start(round_id));
    let mut direct = Vec::new();
    let mut links = Vec::new();
    let mut again = Vec::new();
    for t in &tasks {
        match t {
            Task::SelectNodes { endpoints, relays_by_type, .. } => {
                round.endpoints = endpoints.clone();
                round.relays_by_type = relays_by_type.clone();
            }
            Task::DirectPing { pair, slot, .. } => direct.push((pair, *slot)),
            Task::LinkPing { pair, slot, remeasure: false, .. } => links.push((pair, *slot)),
            Task::LinkPing { pair, slot, remeasure: true, .. } => again.push((pair, *slot)),
            Task::Feasibility { .. } => {}
        }
    }

    let direct = slots_by_pair(direct.into_iter());
    let mut step2 = MedianSet::default();
    for (_, samples) in measure(backend, round_id, &direct)? {
        if let Some(m) = aggregate_median(&samples)? {
            step2.insert(m);
        }
    }

    let index = NodeIndex::new(&inv.nodes);
    let relays: Vec<&NodeRecord> = round
        .relays_by_type
        .values()
        .flatten()
        .filter_map(|id| index.get(id))
        .collect();
    let mut wanted: BTreeSet<(NodeId, NodeId)> = BTreeSet::new();
    for m in step2.iter() {
        let (Some(a), Some(b)) = (index.get(m.pair.first()), index.get(m.pair.second())) else { continue };
        for f in feasible_relays(a, b, m.median, relays.iter().copied(), consts)? {
            wanted.insert((a.node_id.clone(), f.node_id.clone()));
            wanted.insert((b.node_id.clone(), f.node_id.clone()));
        }
    }
    let links = slots_by_pair(links.into_iter().filter(|(pair, _)| {
        let (x, y) = (pair.first().clone(), pair.second().clone());
        wanted.contains(&(x.clone(), y.clone())) || wanted.contains(&(y, x))
    }));
    for (_, samples) in measure(backend, round_id, &links)? {
        if let Some(m) = aggregate_median(&samples)? {
            round.link_medians.insert(m);
        }
    }
    let again = slots_by_pair(again.into_iter().filter(|(pair, _)| step2.get(pair).is_some()));
    for (_, samples) in measure(backend, round_id, &again)? {
        if let Some(m) = aggregate_median(&samples)? {
            round.direct_medians.insert(m);
        }
    }
    round.validate()?;
    Ok(round)
}

pub fn execute_plan(
    plan: &CampaignPlan,
    inv: &Inventory,
    backend: &dyn Backend,
    consts: &PropagationConstants,
) -> Result<Vec<MeasurementRound>> {
    (0..plan.rounds)
        .map(|r| execute_round(plan, inv, r, backend, consts))
        .collect()
}
