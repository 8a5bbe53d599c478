//! Endpoint and relay candidate selection.
//!
//! Covers the eyeball cutoff-coverage curve, per-round endpoint sampling
//! (one eyeball AS per country, then one node from it), per-type relay
//! sampling, and the ordered five-rule filter chain for colocation relay
//! candidates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CountryCode, NodeId, NodeRecord, RelayType, Role};
use crate::error::{Error, Result};

/// User-coverage cutoff (percent) above which an AS counts as an eyeball.
pub const EYEBALL_CUTOFF_PCT: f64 = 10.0;
/// Default upper bound for the minimum looking-glass RTT, ms.
pub const DEFAULT_LG_THRESHOLD_MS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRecord {
    pub asn: u32,
    pub country: CountryCode,
    pub user_coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacilityRecord {
    pub facility_id: u32,
    pub name: String,
    pub city: String,
    pub country: CountryCode,
    pub active_in_registry: bool,
    pub net_count: u32,
    pub ixp_count: u32,
    pub cloud_services: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColoCandidate {
    pub ip: Ipv4Addr,
    pub asn_claimed: u32,
    pub candidate_facilities: BTreeSet<u32>,
    pub pingable: bool,
    #[serde(default)]
    pub asn_current: Option<u32>,
    #[serde(default)]
    pub moas: bool,
    #[serde(default)]
    pub facility_member_asns: BTreeMap<u32, BTreeSet<u32>>,
    #[serde(default)]
    pub lg_min_rtt: Option<f64>,
}

impl ColoCandidate {
    pub fn validate(&self) -> Result<()> {
        if self.candidate_facilities.is_empty() {
            return Err(Error::invalid(format!("{}: no candidate facilities", self.ip)));
        }
        if let Some(rtt) = self.lg_min_rtt {
            if !(rtt.is_finite() && rtt >= 0.0) {
                return Err(Error::invalid(format!("{}: bad lg_min_rtt {rtt}", self.ip)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoveragePoint {
    pub cutoff: f64,
    pub country_count: usize,
    pub as_count: usize,
}

fn check_pct(v: f64, what: &str) -> Result<()> {
    if !(0.0..=100.0).contains(&v) {
        return Err(Error::invalid(format!("{what} {v} outside [0, 100]")));
    }
    Ok(())
}

/// Counts (AS, country) tuples and countries whose coverage exceeds each cutoff.
pub fn eyeball_coverage_curve(
    records: &[CoverageRecord],
    cutoffs: &[f64],
) -> Result<Vec<CoveragePoint>> {
    let mut seen = BTreeSet::new();
    for r in records {
        check_pct(r.user_coverage, "user coverage")?;
        if !seen.insert((r.asn, &r.country)) {
            return Err(Error::invalid(format!(
                "duplicate coverage record for AS{} in {}",
                r.asn, r.country
            )));
        }
    }
    cutoffs
        .iter()
        .map(|&cutoff| {
            check_pct(cutoff, "cutoff")?;
            let above: Vec<&CoverageRecord> =
                records.iter().filter(|r| r.user_coverage > cutoff).collect();
            let countries: BTreeSet<&CountryCode> = above.iter().map(|r| &r.country).collect();
            Ok(CoveragePoint {
                cutoff,
                country_count: countries.len(),
                as_count: above.len(),
            })
        })
        .collect()
}

/// The verified eyeball (ASN, country) tuples.
#[derive(Debug, Clone, Default)]
pub struct EyeballSet {
    tuples: BTreeSet<(u32, CountryCode)>,
}

impl EyeballSet {
    pub fn from_coverage(records: &[CoverageRecord], cutoff_pct: f64) -> Self {
        EyeballSet {
            tuples: records
                .iter()
                .filter(|r| r.user_coverage > cutoff_pct)
                .map(|r| (r.asn, r.country.clone()))
                .collect(),
        }
    }

    pub fn contains(&self, asn: u32, country: &CountryCode) -> bool {
        self.tuples.contains(&(asn, country.clone()))
    }

    pub fn countries(&self) -> BTreeSet<&CountryCode> {
        self.tuples.iter().map(|(_, c)| c).collect()
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }
}

/// Two-step draw: a random AS within each country, then a random node of it.
fn one_per_country_by_as(pool: &[&NodeRecord], rng: &mut ChaCha8Rng) -> BTreeSet<NodeId> {
    let mut grouped: BTreeMap<&CountryCode, BTreeMap<u32, Vec<&NodeRecord>>> = BTreeMap::new();
    for n in pool {
        grouped
            .entry(&n.country)
            .or_default()
            .entry(n.asn)
            .or_default()
            .push(n);
    }
    let mut out = BTreeSet::new();
    for by_as in grouped.values_mut() {
        let asns: Vec<u32> = by_as.keys().copied().collect();
        let asn = *asns.choose(rng).expect("non-empty group");
        let nodes = by_as.get_mut(&asn).expect("key present");
        nodes.sort_by(|a, b| a.node_id.cmp(&b.node_id));
        out.insert(nodes.choose(rng).expect("non-empty group").node_id.clone());
    }
    out
}

/// Picks at most one eyeball endpoint per country, deterministically per seed.
pub fn select_eyeball_endpoints(
    coverage: &[CoverageRecord],
    nodes: &[NodeRecord],
    seed: u64,
) -> BTreeSet<NodeId> {
    let eyeballs = EyeballSet::from_coverage(coverage, EYEBALL_CUTOFF_PCT);
    let pool: Vec<&NodeRecord> = nodes
        .iter()
        .filter(|n| n.role == Role::Endpoint && n.eyeball_verified)
        .filter(|n| eyeballs.contains(n.asn, &n.country))
        .collect();
    let with_nodes: BTreeSet<&CountryCode> = pool.iter().map(|n| &n.country).collect();
    for c in eyeballs.countries() {
        if !with_nodes.contains(c) {
            log::warn!("country {c} has verified eyeball ASes but no usable endpoint; skipped");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    one_per_country_by_as(&pool, &mut rng)
}

/// Draws `lo..=hi` members per group (capped by group size), uniformly.
fn sample_per_group<K: Ord>(
    groups: BTreeMap<K, Vec<&NodeRecord>>,
    lo: usize,
    hi: usize,
    rng: &mut ChaCha8Rng,
) -> BTreeSet<NodeId> {
    let mut out = BTreeSet::new();
    for mut members in groups.into_values() {
        members.sort_by(|a, b| a.node_id.cmp(&b.node_id));
        let k = rng.random_range(lo..=hi).min(members.len());
        out.extend(members.choose_multiple(rng, k).map(|n| n.node_id.clone()));
    }
    out
}

/// Per-round relay sample for one relay type.
///
/// COR: 1-3 per facility. PLR: 1-2 per site. RAR_eye: one per country via
/// the eyeball AS-then-node draw. RAR_other: one per country among nodes
/// whose (ASN, country) is not a verified eyeball.
pub fn sample_relays(
    nodes: &[NodeRecord],
    relay_type: RelayType,
    eyeballs: &EyeballSet,
    seed: u64,
) -> BTreeSet<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let of_type = nodes.iter().filter(|n| n.is_relay_of(relay_type));
    match relay_type {
        RelayType::Cor => {
            let mut groups: BTreeMap<u32, Vec<&NodeRecord>> = BTreeMap::new();
            for n in of_type {
                match n.facility_id {
                    Some(f) => groups.entry(f).or_default().push(n),
                    None => log::warn!("COR relay {} has no facility; skipped", n.node_id),
                }
            }
            sample_per_group(groups, 1, 3, &mut rng)
        }
        RelayType::Plr => {
            let mut groups: BTreeMap<&str, Vec<&NodeRecord>> = BTreeMap::new();
            for n in of_type {
                match n.site_id.as_deref() {
                    Some(s) if !s.is_empty() => groups.entry(s).or_default().push(n),
                    _ => log::warn!("PLR relay {} has no site; skipped", n.node_id),
                }
            }
            sample_per_group(groups, 1, 2, &mut rng)
        }
        RelayType::RarEye => {
            let pool: Vec<&NodeRecord> = of_type
                .filter(|n| eyeballs.contains(n.asn, &n.country))
                .collect();
            one_per_country_by_as(&pool, &mut rng)
        }
        RelayType::RarOther => {
            let mut groups: BTreeMap<&CountryCode, Vec<&NodeRecord>> = BTreeMap::new();
            for n in of_type.filter(|n| !eyeballs.contains(n.asn, &n.country)) {
                groups.entry(&n.country).or_default().push(n);
            }
            sample_per_group(groups, 1, 1, &mut rng)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FilterRule {
    SingleActiveFacility,
    Pingability,
    SameIpOwnership,
    ActiveFacilityPresence,
    RttGeolocation,
}

impl FilterRule {
    pub const ORDER: [FilterRule; 5] = [
        FilterRule::SingleActiveFacility,
        FilterRule::Pingability,
        FilterRule::SameIpOwnership,
        FilterRule::ActiveFacilityPresence,
        FilterRule::RttGeolocation,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FilterRule::SingleActiveFacility => "Single-facility & active PeeringDB presence",
            FilterRule::Pingability => "Pingability",
            FilterRule::SameIpOwnership => "Same IP-ownership",
            FilterRule::ActiveFacilityPresence => "Active Facility presence of ASN",
            FilterRule::RttGeolocation => "RTT-based geolocation",
        }
    }
}

impl fmt::Display for FilterRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    pub ip: Ipv4Addr,
    pub rule: FilterRule,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuleStage {
    pub rule: FilterRule,
    pub passed: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterOutcome {
    pub initial: usize,
    pub stages: Vec<RuleStage>,
    pub survivors: Vec<ColoCandidate>,
    pub rejections: Vec<Rejection>,
}

impl FilterOutcome {
    /// Population before the chain followed by the survivors after each rule.
    pub fn attrition(&self) -> Vec<usize> {
        std::iter::once(self.initial)
            .chain(self.stages.iter().map(|s| s.passed))
            .collect()
    }
}

fn check_rule(
    rule: FilterRule,
    c: &ColoCandidate,
    facilities: &BTreeMap<u32, &FacilityRecord>,
    lg_threshold_ms: f64,
) -> std::result::Result<(), String> {
    match rule {
        FilterRule::SingleActiveFacility => {
            if c.candidate_facilities.len() != 1 {
                return Err(format!("{} candidate facilities", c.candidate_facilities.len()));
            }
            let id = *c.candidate_facilities.first().expect("len 1");
            match facilities.get(&id) {
                Some(f) if f.active_in_registry => Ok(()),
                Some(_) => Err(format!("facility {id} inactive")),
                None => Err(format!("facility {id} not in registry")),
            }
        }
        FilterRule::Pingability => {
            if c.pingable {
                Ok(())
            } else {
                Err("not pingable".into())
            }
        }
        FilterRule::SameIpOwnership => match c.asn_current {
            _ if c.moas => Err("MOAS prefix".into()),
            Some(a) if a == c.asn_claimed => Ok(()),
            Some(a) => Err(format!("now originated by AS{a}, claimed AS{}", c.asn_claimed)),
            None => Err("no current origin AS".into()),
        },
        FilterRule::ActiveFacilityPresence => {
            let id = *c.candidate_facilities.first().expect("non-empty");
            let present = c
                .facility_member_asns
                .get(&id)
                .is_some_and(|members| members.contains(&c.asn_claimed));
            if present {
                Ok(())
            } else {
                Err(format!("AS{} not a member of facility {id}", c.asn_claimed))
            }
        }
        FilterRule::RttGeolocation => match c.lg_min_rtt {
            Some(rtt) if rtt <= lg_threshold_ms => Ok(()),
            Some(rtt) => Err(format!("min looking-glass RTT {rtt} ms > {lg_threshold_ms} ms")),
            None => Err("no looking-glass measurement".into()),
        },
    }
}

/// Runs the five filter rules in order, recording per-rule attrition.
pub fn colo_filter_chain(
    candidates: &[ColoCandidate],
    facilities: &[FacilityRecord],
    lg_threshold_ms: f64,
) -> FilterOutcome {
    let by_id: BTreeMap<u32, &FacilityRecord> =
        facilities.iter().map(|f| (f.facility_id, f)).collect();
    let mut alive: Vec<ColoCandidate> = candidates.to_vec();
    let mut stages = Vec::with_capacity(FilterRule::ORDER.len());
    let mut rejections = Vec::new();
    for rule in FilterRule::ORDER {
        let before = alive.len();
        alive.retain(|c| match check_rule(rule, c, &by_id, lg_threshold_ms) {
            Ok(()) => true,
            Err(reason) => {
                rejections.push(Rejection { ip: c.ip, rule, reason });
                false
            }
        });
        stages.push(RuleStage {
            rule,
            passed: alive.len(),
            rejected: before - alive.len(),
        });
    }
    FilterOutcome {
        initial: candidates.len(),
        stages,
        survivors: alive,
        rejections,
    }
}
