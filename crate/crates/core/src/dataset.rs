//! Nodes, raw ping samples, per-round medians and rounds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::GeoCoord;

/// Minimum number of non-lost replies for a pair to get a median.
pub const MIN_VALID_SAMPLES: usize = 3;
/// Relative direction gap under which a pair counts as symmetric.
pub const SYMMETRY_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_owned())
    }
}

impl From<String> for NodeId {
    fn from(s: String) -> Self {
        NodeId(s)
    }
}

/// ISO-3166 alpha-2 country code, stored upper-case.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CountryCode(String);

impl CountryCode {
    pub fn new(code: &str) -> Result<Self> {
        let code = code.trim();
        if code.len() != 2 || !code.chars().all(|c| c.is_ascii_alphabetic()) {
            return Err(Error::invalid(format!("bad country code {code:?}")));
        }
        Ok(CountryCode(code.to_ascii_uppercase()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for CountryCode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        CountryCode::new(&s)
    }
}

impl From<CountryCode> for String {
    fn from(c: CountryCode) -> String {
        c.0
    }
}

impl fmt::Display for CountryCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Endpoint,
    Relay,
}

impl FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "endpoint" => Ok(Role::Endpoint),
            "relay" => Ok(Role::Relay),
            other => Err(Error::invalid(format!("unknown role {other:?}"))),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Endpoint => "endpoint",
            Role::Relay => "relay",
        })
    }
}

/// Where a relay lives: colocation facility, PlanetLab site, or an Atlas
/// probe in an eyeball / non-eyeball network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RelayType {
    #[serde(rename = "COR")]
    Cor,
    #[serde(rename = "PLR")]
    Plr,
    #[serde(rename = "RAR_eye")]
    RarEye,
    #[serde(rename = "RAR_other")]
    RarOther,
}

impl RelayType {
    pub const ALL: [RelayType; 4] = [
        RelayType::Cor,
        RelayType::Plr,
        RelayType::RarEye,
        RelayType::RarOther,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RelayType::Cor => "COR",
            RelayType::Plr => "PLR",
            RelayType::RarEye => "RAR_eye",
            RelayType::RarOther => "RAR_other",
        }
    }

    /// Parses a relay type column; `none` and the empty string map to `None`.
    pub fn parse_optional(s: &str) -> Result<Option<RelayType>> {
        match s.trim() {
            "" | "none" => Ok(None),
            other => other.parse().map(Some),
        }
    }
}

impl FromStr for RelayType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        RelayType::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown relay type {s:?}")))
    }
}

impl fmt::Display for RelayType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node_id: NodeId,
    pub asn: u32,
    pub country: CountryCode,
    pub role: Role,
    pub relay_type: Option<RelayType>,
    pub coord: GeoCoord,
    pub facility_id: Option<u32>,
    pub site_id: Option<String>,
    pub eyeball_verified: bool,
}

impl NodeRecord {
    pub fn validate(&self) -> Result<()> {
        if self.node_id.0.is_empty() {
            return Err(Error::invalid("empty node_id"));
        }
        if self.asn == 0 {
            return Err(Error::invalid("asn must be positive"));
        }
        self.coord.validate()?;
        match self.role {
            Role::Endpoint => {
                if self.relay_type.is_some() {
                    return Err(Error::invalid("endpoint must have relay_type none"));
                }
                if !self.eyeball_verified {
                    return Err(Error::invalid("endpoint must be eyeball_verified"));
                }
            }
            Role::Relay => match self.relay_type {
                None => return Err(Error::invalid("relay without relay_type")),
                Some(RelayType::Cor) if self.facility_id.is_none() => {
                    return Err(Error::invalid("COR relay without facility_id"))
                }
                Some(RelayType::Plr) if self.site_id.as_deref().unwrap_or("").is_empty() => {
                    return Err(Error::invalid("PLR relay without site_id"))
                }
                _ => {}
            },
        }
        if self.facility_id == Some(0) {
            return Err(Error::invalid("facility_id must be positive"));
        }
        Ok(())
    }

    pub fn is_relay_of(&self, t: RelayType) -> bool {
        self.role == Role::Relay && self.relay_type == Some(t)
    }
}

/// Unordered node pair; the smaller id (lexicographically) comes first.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "(NodeId, NodeId)", into = "(NodeId, NodeId)")]
pub struct PairKey {
    lo: NodeId,
    hi: NodeId,
}

impl PairKey {
    pub fn new(a: impl Into<NodeId>, b: impl Into<NodeId>) -> Result<Self> {
        let (a, b) = (a.into(), b.into());
        match a.cmp(&b) {
            std::cmp::Ordering::Less => Ok(PairKey { lo: a, hi: b }),
            std::cmp::Ordering::Greater => Ok(PairKey { lo: b, hi: a }),
            std::cmp::Ordering::Equal => Err(Error::invalid(format!("self-pair on {a}"))),
        }
    }

    pub fn first(&self) -> &NodeId {
        &self.lo
    }

    pub fn second(&self) -> &NodeId {
        &self.hi
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        &self.lo == id || &self.hi == id
    }

    pub fn other(&self, id: &NodeId) -> Option<&NodeId> {
        if &self.lo == id {
            Some(&self.hi)
        } else if &self.hi == id {
            Some(&self.lo)
        } else {
            None
        }
    }
}

impl TryFrom<(NodeId, NodeId)> for PairKey {
    type Error = Error;
    fn try_from((a, b): (NodeId, NodeId)) -> Result<Self> {
        PairKey::new(a, b)
    }
}

impl From<PairKey> for (NodeId, NodeId) {
    fn from(p: PairKey) -> Self {
        (p.lo, p.hi)
    }
}

impl fmt::Display for PairKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lo, self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Ping {
    Reply(f64),
    Lost,
}

impl Ping {
    pub fn rtt(&self) -> Option<f64> {
        match *self {
            Ping::Reply(ms) => Some(ms),
            Ping::Lost => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RttSample {
    pub src: NodeId,
    pub dst: NodeId,
    pub round_id: u32,
    pub slot: u8,
    pub rtt: Ping,
}

impl RttSample {
    pub fn pair(&self) -> Result<PairKey> {
        PairKey::new(self.src.clone(), self.dst.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianRtt {
    pub pair: PairKey,
    pub round_id: u32,
    pub median: f64,
    pub valid_count: u8,
}

/// Median with the mean-of-middle-two rule for even counts.
pub fn median_of(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Reduces one pair's samples for one round to a median.
///
/// Returns `Ok(None)` when fewer than three replies came back. All samples
/// must belong to the same unordered pair and round, with at most one
/// sample per slot.
pub fn aggregate_median(samples: &[RttSample]) -> Result<Option<MedianRtt>> {
    let Some(head) = samples.first() else {
        return Ok(None);
    };
    let pair = head.pair()?;
    let round_id = head.round_id;
    let mut slots = BTreeSet::new();
    let mut valid = Vec::with_capacity(samples.len());
    for s in samples {
        if s.round_id != round_id || s.pair()? != pair {
            return Err(Error::invalid(format!(
                "mixed samples: expected {pair} round {round_id}, got ({}, {}) round {}",
                s.src, s.dst, s.round_id
            )));
        }
        if !slots.insert(s.slot) {
            return Err(Error::invalid(format!(
                "duplicate slot {} for {pair} round {round_id}",
                s.slot
            )));
        }
        if let Ping::Reply(ms) = s.rtt {
            if !(ms.is_finite() && ms > 0.0) {
                return Err(Error::invalid(format!("rtt {ms} is not a positive number")));
            }
            valid.push(ms);
        }
    }
    if valid.len() < MIN_VALID_SAMPLES {
        return Ok(None);
    }
    let valid_count = valid.len() as u8;
    let median = median_of(&mut valid).expect("non-empty");
    Ok(Some(MedianRtt {
        pair,
        round_id,
        median,
        valid_count,
    }))
}

/// Groups samples by (round, pair) and aggregates each group.
pub fn aggregate_all(samples: &[RttSample]) -> Result<Vec<MedianRtt>> {
    let mut groups: BTreeMap<(u32, PairKey), Vec<RttSample>> = BTreeMap::new();
    for s in samples {
        groups
            .entry((s.round_id, s.pair()?))
            .or_default()
            .push(s.clone());
    }
    let mut out = Vec::new();
    for group in groups.values() {
        if let Some(m) = aggregate_median(group)? {
            out.push(m);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SymmetryReport {
    pub pairs_compared: usize,
    pub symmetric_pairs: usize,
    pub fraction: f64,
}

/// Share of bidirectionally measured pairs whose per-direction median RTTs
/// differ by at most 5% of the smaller one.
pub fn direction_symmetry_report(samples: &[RttSample]) -> Result<SymmetryReport> {
    let mut by_pair: BTreeMap<PairKey, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in samples {
        let pair = s.pair()?;
        let forward = &s.src == pair.first();
        let entry = by_pair.entry(pair).or_default();
        if let Some(ms) = s.rtt.rtt() {
            if forward {
                entry.0.push(ms);
            } else {
                entry.1.push(ms);
            }
        }
    }
    let mut compared = 0;
    let mut symmetric = 0;
    for (mut fwd, mut rev) in by_pair.into_values() {
        let (Some(a), Some(b)) = (median_of(&mut fwd), median_of(&mut rev)) else {
            continue;
        };
        compared += 1;
        if (a - b).abs() / a.min(b) <= SYMMETRY_TOLERANCE {
            symmetric += 1;
        }
    }
    if compared == 0 {
        return Err(Error::EmptyDomain("no pair measured in both directions"));
    }
    Ok(SymmetryReport {
        pairs_compared: compared,
        symmetric_pairs: symmetric,
        fraction: symmetric as f64 / compared as f64,
    })
}

/// Medians keyed by pair; serializes as a plain list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<MedianRtt>", into = "Vec<MedianRtt>")]
pub struct MedianSet(BTreeMap<PairKey, MedianRtt>);

impl MedianSet {
    pub fn insert(&mut self, m: MedianRtt) {
        self.0.insert(m.pair.clone(), m);
    }

    pub fn get(&self, pair: &PairKey) -> Option<&MedianRtt> {
        self.0.get(pair)
    }

    pub fn median(&self, pair: &PairKey) -> Option<f64> {
        self.0.get(pair).map(|m| m.median)
    }

    pub fn iter(&self) -> impl Iterator<Item = &MedianRtt> {
        self.0.values()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<MedianRtt>> for MedianSet {
    fn from(v: Vec<MedianRtt>) -> Self {
        MedianSet(v.into_iter().map(|m| (m.pair.clone(), m)).collect())
    }
}

impl From<MedianSet> for Vec<MedianRtt> {
    fn from(s: MedianSet) -> Self {
        s.0.into_values().collect()
    }
}

impl FromIterator<MedianRtt> for MedianSet {
    fn from_iter<I: IntoIterator<Item = MedianRtt>>(iter: I) -> Self {
        MedianSet(iter.into_iter().map(|m| (m.pair.clone(), m)).collect())
    }
}

/// One workflow iteration: who took part and what was measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRound {
    pub round_id: u32,
    pub start_time: DateTime<Utc>,
    pub endpoints: BTreeSet<NodeId>,
    pub relays_by_type: BTreeMap<RelayType, BTreeSet<NodeId>>,
    pub direct_medians: MedianSet,
    pub link_medians: MedianSet,
}

impl MeasurementRound {
    pub fn new(round_id: u32, start_time: DateTime<Utc>) -> Self {
        MeasurementRound {
            round_id,
            start_time,
            endpoints: BTreeSet::new(),
            relays_by_type: BTreeMap::new(),
            direct_medians: MedianSet::default(),
            link_medians: MedianSet::default(),
        }
    }

    pub fn relay_type_of(&self, id: &NodeId) -> Option<RelayType> {
        self.relays_by_type
            .iter()
            .find(|(_, ids)| ids.contains(id))
            .map(|(t, _)| *t)
    }

    pub fn is_relay(&self, id: &NodeId) -> bool {
        self.relay_type_of(id).is_some()
    }

    /// Endpoint pairs in canonical order.
    pub fn endpoint_pairs(&self) -> Vec<PairKey> {
        let eps: Vec<&NodeId> = self.endpoints.iter().collect();
        let mut out = Vec::with_capacity(eps.len() * eps.len().saturating_sub(1) / 2);
        for (i, a) in eps.iter().enumerate() {
            for b in &eps[i + 1..] {
                out.push(PairKey::new((*a).clone(), (*b).clone()).expect("distinct set members"));
            }
        }
        out
    }

    /// Checks that every median references nodes registered in this round.
    pub fn validate(&self) -> Result<()> {
        for m in self.direct_medians.iter() {
            if m.round_id != self.round_id {
                return Err(Error::invalid(format!("{} filed under round {}", m.pair, self.round_id)));
            }
            if !self.endpoints.contains(m.pair.first()) || !self.endpoints.contains(m.pair.second()) {
                return Err(Error::invalid(format!(
                    "direct median {} references an unregistered endpoint in round {}",
                    m.pair, self.round_id
                )));
            }
        }
        for m in self.link_medians.iter() {
            if m.round_id != self.round_id {
                return Err(Error::invalid(format!("{} filed under round {}", m.pair, self.round_id)));
            }
            let (a, b) = (m.pair.first(), m.pair.second());
            let ok = (self.endpoints.contains(a) && self.is_relay(b))
                || (self.endpoints.contains(b) && self.is_relay(a));
            if !ok {
                return Err(Error::invalid(format!(
                    "link median {} is not an endpoint-relay pair of round {}",
                    m.pair, self.round_id
                )));
            }
        }
        Ok(())
    }
}
