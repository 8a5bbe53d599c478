//! Feasibility pruning and one-relay path stitching.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{MeasurementRound, NodeId, NodeRecord, PairKey, RelayType};
use crate::error::{Error, Result};
use crate::geo::PropagationConstants;

/// An overlay path `endpoint -> relay -> endpoint` inferred from medians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelayedPath {
    pub pair: PairKey,
    pub relay: NodeId,
    pub relay_type: RelayType,
    pub round_id: u32,
    pub stitched_rtt: f64,
    pub direct_rtt: f64,
    /// `direct_rtt - stitched_rtt`; negative when the detour is slower.
    pub improvement: f64,
}

/// One (endpoint pair, round) with a measured direct median and every
/// feasible relayed path that could be stitched for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub pair: PairKey,
    pub round_id: u32,
    pub direct_rtt: f64,
    pub paths: Vec<RelayedPath>,
}

impl Case {
    pub fn paths_of(&self, t: RelayType) -> impl Iterator<Item = &RelayedPath> {
        self.paths.iter().filter(move |p| p.relay_type == t)
    }

    pub fn best_of(&self, t: RelayType) -> Option<&RelayedPath> {
        self.paths_of(t).min_by(|a, b| path_order(a, b))
    }
}

fn path_order(a: &RelayedPath, b: &RelayedPath) -> std::cmp::Ordering {
    a.stitched_rtt
        .total_cmp(&b.stitched_rtt)
        .then_with(|| a.relay.cmp(&b.relay))
}

/// Relays `f` with `2 * (t(n1, f) + t(f, n2)) <= direct_rtt`, where `t` is
/// the one-way fiber delay along the great circle.
///
/// Relays with unusable coordinates are left out.
pub fn feasible_relays<'a, I>(
    n1: &NodeRecord,
    n2: &NodeRecord,
    direct_rtt: f64,
    relays: I,
    consts: &PropagationConstants,
) -> Result<Vec<&'a NodeRecord>>
where
    I: IntoIterator<Item = &'a NodeRecord>,
{
    if !(direct_rtt.is_finite() && direct_rtt > 0.0) {
        return Err(Error::invalid(format!("direct RTT {direct_rtt} must be positive")));
    }
    n1.coord.validate()?;
    n2.coord.validate()?;
    let mut out = Vec::new();
    for f in relays {
        if !f.coord.is_valid() {
            log::warn!("relay {} has unusable coordinates; excluded", f.node_id);
            continue;
        }
        let lower_bound = 2.0 * (consts.delay_ms(&n1.coord, &f.coord)? + consts.delay_ms(&f.coord, &n2.coord)?);
        if lower_bound <= direct_rtt {
            out.push(f);
        }
    }
    Ok(out)
}

/// Stitches `pair` through `relay` with the round's medians.
///
/// `Ok(None)` when a link median is missing; `Err(Unmeasurable)` when the
/// round has no direct median for the pair.
pub fn stitch(round: &MeasurementRound, pair: &PairKey, relay: &NodeId) -> Result<Option<RelayedPath>> {
    let direct_rtt = round.direct_medians.median(pair).ok_or_else(|| {
        Error::Unmeasurable(format!("no direct median for {pair} in round {}", round.round_id))
    })?;
    let relay_type = round.relay_type_of(relay).ok_or_else(|| {
        Error::invalid(format!("{relay} is not a relay of round {}", round.round_id))
    })?;
    let leg = |end: &NodeId| -> Result<Option<f64>> {
        Ok(round.link_medians.median(&PairKey::new(end.clone(), relay.clone())?))
    };
    let (Some(a), Some(b)) = (leg(pair.first())?, leg(pair.second())?) else {
        return Ok(None);
    };
    let stitched_rtt = a + b;
    Ok(Some(RelayedPath {
        pair: pair.clone(),
        relay: relay.clone(),
        relay_type,
        round_id: round.round_id,
        stitched_rtt,
        direct_rtt,
        improvement: direct_rtt - stitched_rtt,
    }))
}

/// Minimum-latency path per relay type; ties go to the smaller relay id.
pub fn best_relay_per_type(paths: &[RelayedPath]) -> Result<BTreeMap<RelayType, RelayedPath>> {
    if let Some(head) = paths.first() {
        if let Some(p) = paths
            .iter()
            .find(|p| p.pair != head.pair || p.round_id != head.round_id)
        {
            return Err(Error::invalid(format!(
                "paths of several pair-rounds: {} r{} and {} r{}",
                head.pair, head.round_id, p.pair, p.round_id
            )));
        }
    }
    let mut best: BTreeMap<RelayType, RelayedPath> = BTreeMap::new();
    for p in paths {
        match best.get(&p.relay_type) {
            Some(cur) if path_order(cur, p).is_le() => {}
            _ => {
                best.insert(p.relay_type, p.clone());
            }
        }
    }
    Ok(best)
}

/// Lookup of node records by id.
#[derive(Debug, Clone, Default)]
pub struct NodeIndex(HashMap<NodeId, NodeRecord>);

impl NodeIndex {
    pub fn new(nodes: &[NodeRecord]) -> Self {
        NodeIndex(nodes.iter().map(|n| (n.node_id.clone(), n.clone())).collect())
    }

    pub fn get(&self, id: &NodeId) -> Option<&NodeRecord> {
        self.0.get(id)
    }

    fn require(&self, id: &NodeId) -> Result<&NodeRecord> {
        self.get(id)
            .ok_or_else(|| Error::invalid(format!("node {id} missing from inventory")))
    }
}

/// Evaluates every endpoint pair of a round: feasibility against the
/// round's direct median, then stitching through each feasible relay.
///
/// Pairs without a direct median are not cases and are skipped. Pairs are
/// independent and evaluated in parallel; output order is canonical.
pub fn evaluate_round(
    round: &MeasurementRound,
    nodes: &NodeIndex,
    consts: &PropagationConstants,
) -> Result<Vec<Case>> {
    let mut relays: Vec<&NodeRecord> = Vec::new();
    for id in round.relays_by_type.values().flatten() {
        match nodes.get(id) {
            Some(n) => relays.push(n),
            None => log::warn!("relay {id} missing from inventory; excluded"),
        }
    }
    relays.sort_by(|a, b| a.node_id.cmp(&b.node_id));

    let pairs: Vec<PairKey> = round
        .endpoint_pairs()
        .into_iter()
        .filter(|p| round.direct_medians.get(p).is_some())
        .collect();

    pairs
        .par_iter()
        .map(|pair| {
            let direct_rtt = round.direct_medians.median(pair).expect("filtered");
            let n1 = nodes.require(pair.first())?;
            let n2 = nodes.require(pair.second())?;
            let feasible = feasible_relays(n1, n2, direct_rtt, relays.iter().copied(), consts)?;
            let mut paths = Vec::new();
            for f in feasible {
                if let Some(p) = stitch(round, pair, &f.node_id)? {
                    paths.push(p);
                }
            }
            Ok(Case {
                pair: pair.clone(),
                round_id: round.round_id,
                direct_rtt,
                paths,
            })
        })
        .collect()
}

pub fn evaluate_rounds(
    rounds: &[MeasurementRound],
    nodes: &NodeIndex,
    consts: &PropagationConstants,
) -> Result<Vec<Case>> {
    let mut out = Vec::new();
    for r in rounds {
        out.extend(evaluate_round(r, nodes, consts)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{CountryCode, MedianRtt, Role};
    use crate::geo::GeoCoord;
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn node(id: &str, role: Role, lat: f64, lon: f64) -> NodeRecord {
        NodeRecord {
            node_id: id.into(),
            asn: 1,
            country: CountryCode::new("ZZ").unwrap(),
            role,
            relay_type: (role == Role::Relay).then_some(RelayType::Cor),
            coord: GeoCoord { lat, lon },
            facility_id: (role == Role::Relay).then_some(1),
            site_id: None,
            eyeball_verified: role == Role::Endpoint,
        }
    }

    #[test]
    fn midpoint_relay_is_feasible() {
        let c = PropagationConstants::default();
        let a = node("a", Role::Endpoint, 0.0, 0.0);
        let b = node("b", Role::Endpoint, 0.0, 40.0);
        let mid = node("m", Role::Relay, 0.0, 20.0);
        let floor = 2.0 * c.delay_ms(&a.coord, &b.coord).unwrap();
        let got = feasible_relays(&a, &b, floor * 3.0, [&mid], &c).unwrap();
        assert_eq!(got.len(), 1);
    }

    #[test]
    fn antipodal_relay_is_not() {
        let c = PropagationConstants::default();
        let a = node("a", Role::Endpoint, 0.0, 0.0);
        let b = node("b", Role::Endpoint, 0.0, 1.0);
        let far = node("f", Role::Relay, 0.0, -179.5);
        assert!(feasible_relays(&a, &b, 1.0, [&far], &c).unwrap().is_empty());
    }

    #[test]
    fn bad_inputs() {
        let c = PropagationConstants::default();
        let a = node("a", Role::Endpoint, 0.0, 0.0);
        let b = node("b", Role::Endpoint, 0.0, 1.0);
        assert!(feasible_relays(&a, &b, 0.0, [], &c).is_err());
        let broken = node("x", Role::Relay, f64::NAN, 0.0);
        assert!(feasible_relays(&a, &b, 500.0, [&broken], &c).unwrap().is_empty());
    }

    fn med(a: &str, b: &str, v: f64) -> MedianRtt {
        MedianRtt { pair: PairKey::new(a, b).unwrap(), round_id: 3, median: v, valid_count: 6 }
    }

    fn small_round() -> MeasurementRound {
        let mut r = MeasurementRound::new(3, Utc.with_ymd_and_hms(2017, 4, 20, 0, 0, 0).unwrap());
        r.endpoints = BTreeSet::from(["e1".into(), "e2".into()]);
        r.relays_by_type.insert(RelayType::Cor, BTreeSet::from(["r1".into(), "r2".into()]));
        r.relays_by_type.insert(RelayType::Plr, BTreeSet::from(["p1".into()]));
        r.direct_medians.insert(med("e1", "e2", 100.0));
        for m in [med("e1", "r1", 30.0), med("e2", "r1", 40.0), med("e1", "r2", 20.0), med("e2", "r2", 45.0), med("e1", "p1", 10.0)] {
            r.link_medians.insert(m);
        }
        r.validate().unwrap();
        r
    }

    #[test]
    fn stitch_arithmetic() {
        let r = small_round();
        let pair = PairKey::new("e1", "e2").unwrap();
        let p = stitch(&r, &pair, &"r1".into()).unwrap().unwrap();
        assert_eq!(p.stitched_rtt, 70.0);
        assert_eq!(p.improvement, 30.0);
        assert_eq!(p.relay_type, RelayType::Cor);
        assert_eq!(stitch(&r, &pair, &"p1".into()).unwrap(), None);
    }

    #[test]
    fn stitch_without_direct_is_unmeasurable() {
        let mut r = small_round();
        r.direct_medians = Default::default();
        let pair = PairKey::new("e1", "e2").unwrap();
        assert!(matches!(stitch(&r, &pair, &"r1".into()), Err(Error::Unmeasurable(_))));
    }

    #[test]
    fn best_per_type() {
        let r = small_round();
        let pair = PairKey::new("e1", "e2").unwrap();
        let paths: Vec<_> = ["r1", "r2"]
            .iter()
            .map(|id| stitch(&r, &pair, &(*id).into()).unwrap().unwrap())
            .collect();
        let best = best_relay_per_type(&paths).unwrap();
        assert_eq!(best[&RelayType::Cor].relay, NodeId::from("r2"));
        assert_eq!(best[&RelayType::Cor].stitched_rtt, 65.0);
        assert!(!best.contains_key(&RelayType::Plr));

        let one = best_relay_per_type(&paths[..1]).unwrap();
        assert_eq!(one[&RelayType::Cor].relay, NodeId::from("r1"));
    }

    #[test]
    fn ties_go_to_smaller_id() {
        let p = |id: &str| RelayedPath {
            pair: PairKey::new("a", "b").unwrap(),
            relay: id.into(),
            relay_type: RelayType::Cor,
            round_id: 0,
            stitched_rtt: 50.0,
            direct_rtt: 60.0,
            improvement: 10.0,
        };
        let best = best_relay_per_type(&[p("r9"), p("r3"), p("r5")]).unwrap();
        assert_eq!(best[&RelayType::Cor].relay, NodeId::from("r3"));
    }

    #[test]
    fn evaluate_small_round() {
        let r = small_round();
        let nodes = NodeIndex::new(&[
            node("e1", Role::Endpoint, 10.0, 0.0),
            node("e2", Role::Endpoint, 10.0, 2.0),
            node("r1", Role::Relay, 10.0, 1.0),
            node("r2", Role::Relay, 10.5, 1.0),
            node("p1", Role::Relay, 10.0, 1.0),
        ]);
        let cases = evaluate_round(&r, &nodes, &PropagationConstants::default()).unwrap();
        assert_eq!(cases.len(), 1);
        assert_eq!(cases[0].paths.len(), 2);
        assert_eq!(cases[0].best_of(RelayType::Cor).unwrap().relay, NodeId::from("r2"));
    }

    fn endpoint_strategy() -> impl Strategy<Value = (f64, f64)> {
        (-60.0f64..60.0, -170.0f64..170.0)
    }

    proptest! {
        #[test]
        fn feasibility_shrinks_with_rtt(
            a in endpoint_strategy(), b in endpoint_strategy(),
            rs in proptest::collection::vec(endpoint_strategy(), 1..30),
            rtt in 1.0f64..400.0, frac in 0.0f64..1.0,
        ) {
            let c = PropagationConstants::default();
            let n1 = node("a", Role::Endpoint, a.0, a.1);
            let n2 = node("b", Role::Endpoint, b.0, b.1);
            let relays: Vec<_> = rs.iter().enumerate()
                .map(|(i, (la, lo))| node(&format!("r{i}"), Role::Relay, *la, *lo)).collect();
            let big: BTreeSet<_> = feasible_relays(&n1, &n2, rtt, &relays, &c).unwrap()
                .into_iter().map(|n| n.node_id.clone()).collect();
            let small: BTreeSet<_> = feasible_relays(&n1, &n2, (rtt * frac).max(1e-9), &relays, &c).unwrap()
                .into_iter().map(|n| n.node_id.clone()).collect();
            prop_assert!(small.is_subset(&big));
        }

        #[test]
        fn stitching_scales_linearly(m1 in 1.0f64..300.0, m2 in 1.0f64..300.0, d in 1.0f64..600.0, k in 0.1f64..10.0) {
            let mut r = MeasurementRound::new(3, Utc.with_ymd_and_hms(2017, 4, 20, 0, 0, 0).unwrap());
            r.endpoints = BTreeSet::from(["e1".into(), "e2".into()]);
            r.relays_by_type.insert(RelayType::Cor, BTreeSet::from(["r1".into()]));
            let build = |s: f64| {
                let mut r = r.clone();
                r.direct_medians.insert(med("e1", "e2", d * s));
                r.link_medians.insert(med("e1", "r1", m1 * s));
                r.link_medians.insert(med("e2", "r1", m2 * s));
                r
            };
            let pair = PairKey::new("e1", "e2").unwrap();
            let base = stitch(&build(1.0), &pair, &"r1".into()).unwrap().unwrap();
            let scaled = stitch(&build(k), &pair, &"r1".into()).unwrap().unwrap();
            prop_assert!((scaled.stitched_rtt - k * base.stitched_rtt).abs() <= 1e-9 * scaled.stitched_rtt);
        }
    }
}
