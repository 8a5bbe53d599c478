//! Latency-improvement analyses over evaluated cases.
//!
//! A case is one (endpoint pair, round) with a measured direct median. All
//! fractions are over every case unless a function says otherwise. A relay
//! "improves" a case when its path is faster than direct by at least the
//! improvement floor (1 ms by default).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{median_of, MeasurementRound, NodeId, PairKey, RelayType};
use crate::engine::{Case, NodeIndex};
use crate::error::{Error, Result};
use crate::selection::FacilityRecord;

pub const DEFAULT_IMPROVEMENT_FLOOR_MS: f64 = 1.0;
pub const DEFAULT_VOIP_THRESHOLD_MS: f64 = 320.0;
/// CV below which a pair counts as stable.
pub const STABLE_CV: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Deviation {
    #[default]
    Population,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    /// By number of cases each relay improves.
    #[default]
    Frequency,
    /// Greedy max-coverage: each step takes the relay adding most new cases.
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub improvement_floor_ms: f64,
    pub voip_threshold_ms: f64,
    pub deviation: Deviation,
    pub ranking: Ranking,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            improvement_floor_ms: DEFAULT_IMPROVEMENT_FLOOR_MS,
            voip_threshold_ms: DEFAULT_VOIP_THRESHOLD_MS,
            deviation: Deviation::Population,
            ranking: Ranking::Frequency,
        }
    }
}

fn fraction(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImprovementCdf {
    pub relay_type: RelayType,
    /// `(improvement_ms, cumulative fraction of improved cases)`.
    pub points: Vec<(f64, f64)>,
    pub improved_cases: usize,
    pub total_cases: usize,
    pub improved_fraction_of_total: f64,
    pub median_improvement_ms: Option<f64>,
}

/// Empirical CDF of the best relay's improvement per type, over the cases
/// that type improves.
pub fn improvement_cdf(cases: &[Case], floor_ms: f64) -> Result<BTreeMap<RelayType, ImprovementCdf>> {
    if cases.is_empty() {
        return Err(Error::EmptyDomain("no cases to build an improvement CDF from"));
    }
    let mut out = BTreeMap::new();
    for t in RelayType::ALL {
        let mut gains: Vec<f64> = cases
            .iter()
            .filter_map(|c| c.best_of(t))
            .map(|p| p.improvement)
            .filter(|&g| g >= floor_ms)
            .collect();
        gains.sort_by(f64::total_cmp);
        let n = gains.len();
        let mut points: Vec<(f64, f64)> = Vec::new();
        for (i, &g) in gains.iter().enumerate() {
            let f = (i + 1) as f64 / n as f64;
            match points.last_mut() {
                Some(last) if last.0 == g => last.1 = f,
                _ => points.push((g, f)),
            }
        }
        let median_improvement_ms = median_of(&mut gains.clone());
        out.insert(
            t,
            ImprovementCdf {
                relay_type: t,
                points,
                improved_cases: n,
                total_cases: cases.len(),
                improved_fraction_of_total: fraction(n, cases.len()),
                median_improvement_ms,
            },
        );
    }
    Ok(out)
}

/// Median, over cases with at least one improving relay of a type, of how
/// many relays of that type improve the case.
pub fn redundancy_per_pair(cases: &[Case], floor_ms: f64) -> BTreeMap<RelayType, Option<f64>> {
    RelayType::ALL
        .into_iter()
        .map(|t| {
            let mut counts: Vec<f64> = cases
                .iter()
                .map(|c| c.paths_of(t).filter(|p| p.improvement >= floor_ms).count())
                .filter(|&n| n > 0)
                .map(|n| n as f64)
                .collect();
            (t, median_of(&mut counts))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageCurve {
    pub relay_type: RelayType,
    pub ranked_relays: Vec<NodeId>,
    /// Entry `k - 1` is the share of all cases improved by the top `k` relays.
    pub cumulative_coverage: Vec<f64>,
}

/// Case indices each relay of type `t` improves.
fn improved_sets(cases: &[Case], t: RelayType, floor_ms: f64) -> BTreeMap<NodeId, BTreeSet<usize>> {
    let mut sets: BTreeMap<NodeId, BTreeSet<usize>> = BTreeMap::new();
    for (i, c) in cases.iter().enumerate() {
        for p in c.paths_of(t).filter(|p| p.improvement >= floor_ms) {
            sets.entry(p.relay.clone()).or_default().insert(i);
        }
    }
    sets
}

fn rank_relays(sets: &BTreeMap<NodeId, BTreeSet<usize>>, ranking: Ranking) -> Vec<NodeId> {
    match ranking {
        Ranking::Frequency => {
            let mut ids: Vec<&NodeId> = sets.keys().collect();
            ids.sort_by(|a, b| sets[*b].len().cmp(&sets[*a].len()).then_with(|| a.cmp(b)));
            ids.into_iter().cloned().collect()
        }
        Ranking::Greedy => {
            let mut left: BTreeMap<&NodeId, &BTreeSet<usize>> = sets.iter().collect();
            let mut covered = BTreeSet::new();
            let mut out = Vec::with_capacity(left.len());
            while !left.is_empty() {
                // first maximum in id order wins ties
                let (&id, _) = left
                    .iter()
                    .rev()
                    .max_by_key(|(_, s)| s.difference(&covered).count())
                    .expect("non-empty");
                covered.extend(left.remove(id).expect("present").iter().copied());
                out.push(id.clone());
            }
            out
        }
    }
}

/// Cumulative case coverage of the top-k relays of each type.
pub fn top_relay_coverage(
    cases: &[Case],
    max_k: usize,
    floor_ms: f64,
    ranking: Ranking,
) -> BTreeMap<RelayType, CoverageCurve> {
    RelayType::ALL
        .into_iter()
        .map(|t| {
            let sets = improved_sets(cases, t, floor_ms);
            let mut ranked = rank_relays(&sets, ranking);
            ranked.truncate(max_k);
            let mut covered = BTreeSet::new();
            let cumulative_coverage = ranked
                .iter()
                .map(|id| {
                    covered.extend(sets[id].iter().copied());
                    fraction(covered.len(), cases.len())
                })
                .collect();
            (
                t,
                CoverageCurve {
                    relay_type: t,
                    ranked_relays: ranked,
                    cumulative_coverage,
                },
            )
        })
        .collect()
}

/// For each threshold `tau`, the share of all cases whose best improvement
/// through `subset` (every relay of the type when `None`) reaches
/// `max(tau, floor)`.
pub fn threshold_coverage(
    cases: &[Case],
    relay_type: RelayType,
    subset: Option<&BTreeSet<NodeId>>,
    thresholds: &[f64],
    floor_ms: f64,
) -> Vec<(f64, f64)> {
    let best: Vec<f64> = cases
        .iter()
        .filter_map(|c| {
            c.paths_of(relay_type)
                .filter(|p| subset.is_none_or(|s| s.contains(&p.relay)))
                .map(|p| p.improvement)
                .max_by(f64::total_cmp)
        })
        .collect();
    thresholds
        .iter()
        .map(|&tau| {
            let need = tau.max(floor_ms);
            (tau, fraction(best.iter().filter(|&&g| g >= need).count(), cases.len()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FacilityRow {
    pub facility_id: Option<u32>,
    pub name: String,
    pub city: String,
    pub country: String,
    /// Share of COR-improved cases improved by this facility's top relays.
    pub pct_improved_cases: f64,
    /// Same, counting endpoint pairs improved in any round.
    pub pct_improved_pairs: f64,
    pub top_relays: usize,
    pub net_count: Option<u32>,
    pub ixp_count: Option<u32>,
    pub cloud_services: Option<bool>,
}

/// Facilities hosting the `top_n` most frequently improving COR relays.
pub fn facility_report(
    cases: &[Case],
    nodes: &NodeIndex,
    facilities: &[FacilityRecord],
    top_n: usize,
    floor_ms: f64,
) -> Vec<FacilityRow> {
    let sets = improved_sets(cases, RelayType::Cor, floor_ms);
    let mut top = rank_relays(&sets, Ranking::Frequency);
    top.truncate(top_n);

    let improved_cases: BTreeSet<usize> = sets.values().flatten().copied().collect();
    let pair_of = |i: usize| &cases[i].pair;
    let improved_pairs: BTreeSet<&PairKey> = improved_cases.iter().map(|&i| pair_of(i)).collect();

    let by_id: BTreeMap<u32, &FacilityRecord> = facilities.iter().map(|f| (f.facility_id, f)).collect();
    let mut groups: BTreeMap<Option<u32>, Vec<&NodeId>> = BTreeMap::new();
    for id in &top {
        let fac = nodes
            .get(id)
            .and_then(|n| n.facility_id)
            .filter(|f| by_id.contains_key(f));
        groups.entry(fac).or_default().push(id);
    }

    let mut rows: Vec<FacilityRow> = groups
        .into_iter()
        .map(|(fac, relays)| {
            let hit: BTreeSet<usize> = relays.iter().flat_map(|r| sets[*r].iter().copied()).collect();
            let hit_pairs: BTreeSet<&PairKey> = hit.iter().map(|&i| pair_of(i)).collect();
            let rec = fac.and_then(|f| by_id.get(&f).copied());
            FacilityRow {
                facility_id: fac,
                name: rec.map_or_else(|| "unknown".to_string(), |r| r.name.clone()),
                city: rec.map_or_else(String::new, |r| r.city.clone()),
                country: rec.map_or_else(String::new, |r| r.country.to_string()),
                pct_improved_cases: 100.0 * fraction(hit.len(), improved_cases.len()),
                pct_improved_pairs: 100.0 * fraction(hit_pairs.len(), improved_pairs.len()),
                top_relays: relays.len(),
                net_count: rec.map(|r| r.net_count),
                ixp_count: rec.map(|r| r.ixp_count),
                cloud_services: rec.map(|r| r.cloud_services),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        b.pct_improved_cases
            .total_cmp(&a.pct_improved_cases)
            .then_with(|| (a.facility_id.is_none(), a.facility_id).cmp(&(b.facility_id.is_none(), b.facility_id)))
    });
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountryChange {
    pub foreign_paths: usize,
    pub same_country_paths: usize,
    /// Improved share of relayed paths whose relay is outside both endpoint countries.
    pub foreign_improved: Option<f64>,
    /// Improved share of relayed paths whose relay shares a country with an endpoint.
    pub same_country_improved: Option<f64>,
}

/// Splits every relayed path by whether the relay sits in one of the
/// endpoints' countries.
pub fn country_change_effect(
    cases: &[Case],
    nodes: &NodeIndex,
    floor_ms: f64,
) -> Result<BTreeMap<RelayType, CountryChange>> {
    let country = |id: &NodeId| {
        nodes
            .get(id)
            .map(|n| &n.country)
            .ok_or_else(|| Error::invalid(format!("node {id} missing from inventory")))
    };
    let mut out = BTreeMap::new();
    for t in RelayType::ALL {
        let (mut foreign, mut foreign_hit, mut same, mut same_hit) = (0, 0, 0, 0);
        for c in cases {
            let (ca, cb) = (country(c.pair.first())?, country(c.pair.second())?);
            for p in c.paths_of(t) {
                let rc = country(&p.relay)?;
                let hit = (p.improvement >= floor_ms) as usize;
                if rc == ca || rc == cb {
                    same += 1;
                    same_hit += hit;
                } else {
                    foreign += 1;
                    foreign_hit += hit;
                }
            }
        }
        out.insert(
            t,
            CountryChange {
                foreign_paths: foreign,
                same_country_paths: same,
                foreign_improved: (foreign > 0).then(|| fraction(foreign_hit, foreign)),
                same_country_improved: (same > 0).then(|| fraction(same_hit, same)),
            },
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VoipReport {
    pub threshold_ms: f64,
    pub direct_fraction: f64,
    /// Share of cases still above the threshold when the best relay of a
    /// type is used whenever it beats direct.
    pub relayed_fraction: BTreeMap<RelayType, f64>,
}

pub fn voip_threshold_fraction(cases: &[Case], threshold_ms: f64) -> VoipReport {
    let direct = cases.iter().filter(|c| c.direct_rtt > threshold_ms).count();
    let relayed_fraction = RelayType::ALL
        .into_iter()
        .map(|t| {
            let above = cases
                .iter()
                .filter(|c| {
                    let best = c.best_of(t).map_or(f64::INFINITY, |p| p.stitched_rtt);
                    c.direct_rtt.min(best) > threshold_ms
                })
                .count();
            (t, fraction(above, cases.len()))
        })
        .collect();
    VoipReport {
        threshold_ms,
        direct_fraction: fraction(direct, cases.len()),
        relayed_fraction,
    }
}

/// Standard deviation over mean; `None` when the mean is not positive.
pub fn coefficient_of_variation(values: &[f64], deviation: Deviation) -> Option<f64> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if mean <= 0.0 {
        return None;
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    let denom = match deviation {
        Deviation::Population => n as f64,
        Deviation::Sample => (n - 1) as f64,
    };
    Some((ss / denom).sqrt() / mean)
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub const CV_QUANTILES: [f64; 7] = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairCv {
    pub pair: PairKey,
    pub rounds: usize,
    pub cv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvSummary {
    pub pairs: Vec<PairCv>,
    pub quantiles: Vec<(f64, f64)>,
    pub fraction_below_10pct: f64,
}

impl CvSummary {
    fn from_pairs(pairs: Vec<PairCv>) -> Self {
        let mut cvs: Vec<f64> = pairs.iter().map(|p| p.cv).collect();
        cvs.sort_by(f64::total_cmp);
        let quantiles = if cvs.is_empty() {
            Vec::new()
        } else {
            CV_QUANTILES.iter().map(|&q| (q, quantile(&cvs, q))).collect()
        };
        let below = cvs.iter().filter(|&&cv| cv < STABLE_CV).count();
        CvSummary {
            fraction_below_10pct: fraction(below, cvs.len()),
            pairs,
            quantiles,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub deviation: Deviation,
    pub direct: CvSummary,
    pub link: CvSummary,
    pub all: CvSummary,
}

/// Per-pair CV of per-round medians, over pairs seen in at least two rounds.
pub fn stability_cv(rounds: &[MeasurementRound], deviation: Deviation) -> StabilityReport {
    let collect = |pick: &dyn Fn(&MeasurementRound) -> &crate::dataset::MedianSet| {
        let mut series: BTreeMap<PairKey, Vec<f64>> = BTreeMap::new();
        for r in rounds {
            for m in pick(r).iter() {
                series.entry(m.pair.clone()).or_default().push(m.median);
            }
        }
        series
            .into_iter()
            .filter_map(|(pair, v)| {
                coefficient_of_variation(&v, deviation).map(|cv| PairCv { pair, rounds: v.len(), cv })
            })
            .collect::<Vec<_>>()
    };
    let direct = collect(&|r| &r.direct_medians);
    let link = collect(&|r| &r.link_medians);
    let all = direct.iter().chain(link.iter()).cloned().collect();
    StabilityReport {
        deviation,
        direct: CvSummary::from_pairs(direct),
        link: CvSummary::from_pairs(link),
        all: CvSummary::from_pairs(all),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{CountryCode, MedianRtt, Role};
    use crate::engine::RelayedPath;
    use crate::geo::GeoCoord;
    use crate::dataset::NodeRecord;
    use chrono::{TimeZone, Utc};

    fn path(pair: &PairKey, round: u32, relay: &str, t: RelayType, direct: f64, stitched: f64) -> RelayedPath {
        RelayedPath {
            pair: pair.clone(),
            relay: relay.into(),
            relay_type: t,
            round_id: round,
            stitched_rtt: stitched,
            direct_rtt: direct,
            improvement: direct - stitched,
        }
    }

    /// Case `i` for pair (a{i}, b{i}) with COR paths given as (relay, improvement).
    fn case(i: usize, direct: f64, cor: &[(&str, f64)]) -> Case {
        let pair = PairKey::new(format!("a{i}"), format!("b{i}")).unwrap();
        Case {
            paths: cor
                .iter()
                .map(|(r, g)| path(&pair, 0, r, RelayType::Cor, direct, direct - g))
                .collect(),
            pair,
            round_id: 0,
            direct_rtt: direct,
        }
    }

    #[test]
    fn cdf_small_example() {
        let cases = [case(0, 100.0, &[("r", 5.0)]), case(1, 100.0, &[("r", -2.0)]), case(2, 100.0, &[("r", 20.0)])];
        let cdf = improvement_cdf(&cases, 1.0).unwrap();
        let cor = &cdf[&RelayType::Cor];
        assert_eq!(cor.improved_fraction_of_total, 2.0 / 3.0);
        assert_eq!(cor.points, vec![(5.0, 0.5), (20.0, 1.0)]);
        assert_eq!(cdf[&RelayType::Plr].improved_fraction_of_total, 0.0);
        assert!(cdf[&RelayType::Plr].points.is_empty());
    }

    #[test]
    fn cdf_needs_cases() {
        assert!(matches!(improvement_cdf(&[], 1.0), Err(Error::EmptyDomain(_))));
    }

    #[test]
    fn no_improvement_anywhere() {
        let cases = [case(0, 50.0, &[("r", -1.0)]), case(1, 50.0, &[("r", -30.0)])];
        assert_eq!(improvement_cdf(&cases, 1.0).unwrap()[&RelayType::Cor].improved_fraction_of_total, 0.0);
    }

    #[test]
    fn cdf_points_are_monotone() {
        let cases: Vec<Case> = (0..40).map(|i| case(i, 200.0, &[("r", ((i * 37) % 23) as f64 - 3.0)])).collect();
        let cdf = &improvement_cdf(&cases, 1.0).unwrap()[&RelayType::Cor];
        assert!(cdf.points.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
        assert_eq!(cdf.points.last().unwrap().1, 1.0);
    }

    #[test]
    fn redundancy_median() {
        let single: Vec<Case> = (0..3).map(|i| case(i, 90.0, &[("r", 4.0), ("s", -4.0)])).collect();
        assert_eq!(redundancy_per_pair(&single, 1.0)[&RelayType::Cor], Some(1.0));
        let names: Vec<String> = (0..8).map(|k| format!("r{k}")).collect();
        let mk = |i, n: usize| case(i, 90.0, &names[..n].iter().map(|s| (s.as_str(), 5.0)).collect::<Vec<_>>());
        let cases = [mk(0, 2), mk(1, 8), mk(2, 8)];
        assert_eq!(redundancy_per_pair(&cases, 1.0)[&RelayType::Cor], Some(8.0));
        assert_eq!(redundancy_per_pair(&cases, 1.0)[&RelayType::Plr], None);
    }

    #[test]
    fn coverage_disjoint_and_overlapping() {
        let mut cases: Vec<Case> = Vec::new();
        for i in 0..3 {
            cases.push(case(i, 100.0, &[("r1", 10.0)]));
        }
        for i in 3..5 {
            cases.push(case(i, 100.0, &[("r2", 10.0)]));
        }
        for i in 5..10 {
            cases.push(case(i, 100.0, &[]));
        }
        let cov = top_relay_coverage(&cases, 100, 1.0, Ranking::Frequency);
        let c = &cov[&RelayType::Cor];
        assert_eq!(c.ranked_relays, vec![NodeId::from("r1"), NodeId::from("r2")]);
        assert_eq!(c.cumulative_coverage, vec![0.3, 0.5]);

        let overlap: Vec<Case> = (0..4).map(|i| case(i, 100.0, &[("r1", 10.0), ("r2", 9.0), ("r3", 8.0)])).collect();
        let c = &top_relay_coverage(&overlap, 10, 1.0, Ranking::Frequency)[&RelayType::Cor];
        assert_eq!(c.cumulative_coverage, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn greedy_differs_from_frequency() {
        // r1 covers {0,1,2}, r2 covers {0,1}, r3 covers {3}
        let cases = [
            case(0, 100.0, &[("r1", 5.0), ("r2", 5.0)]),
            case(1, 100.0, &[("r1", 5.0), ("r2", 5.0)]),
            case(2, 100.0, &[("r1", 5.0)]),
            case(3, 100.0, &[("r3", 5.0)]),
        ];
        let f = &top_relay_coverage(&cases, 2, 1.0, Ranking::Frequency)[&RelayType::Cor];
        let g = &top_relay_coverage(&cases, 2, 1.0, Ranking::Greedy)[&RelayType::Cor];
        assert_eq!(f.cumulative_coverage, vec![0.75, 0.75]);
        assert_eq!(g.cumulative_coverage, vec![0.75, 1.0]);
        assert_eq!(g.ranked_relays[1], NodeId::from("r3"));
    }

    #[test]
    fn threshold_zero_matches_improved_fraction() {
        let cases = [case(0, 100.0, &[("r1", 0.5)]), case(1, 100.0, &[("r1", 30.0), ("r2", 50.0)]), case(2, 100.0, &[("r2", 3.0)])];
        let all = threshold_coverage(&cases, RelayType::Cor, None, &[0.0, 20.0, 40.0, 60.0], 1.0);
        let improved = improvement_cdf(&cases, 1.0).unwrap()[&RelayType::Cor].improved_fraction_of_total;
        assert_eq!(all[0].1, improved);
        assert_eq!(all.iter().map(|p| p.1).collect::<Vec<_>>(), vec![2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0]);
        let top1 = BTreeSet::from([NodeId::from("r1")]);
        let sub = threshold_coverage(&cases, RelayType::Cor, Some(&top1), &[0.0, 20.0, 40.0, 60.0], 1.0);
        assert_eq!(sub.iter().map(|p| p.1).collect::<Vec<_>>(), vec![1.0 / 3.0, 1.0 / 3.0, 0.0, 0.0]);
    }

    fn node(id: &str, country: &str, role: Role, facility: Option<u32>) -> NodeRecord {
        NodeRecord {
            node_id: id.into(),
            asn: 7,
            country: CountryCode::new(country).unwrap(),
            role,
            relay_type: (role == Role::Relay).then_some(RelayType::Cor),
            coord: GeoCoord { lat: 0.0, lon: 0.0 },
            facility_id: facility,
            site_id: None,
            eyeball_verified: role == Role::Endpoint,
        }
    }

    fn facility(id: u32) -> FacilityRecord {
        FacilityRecord {
            facility_id: id,
            name: format!("F{id}"),
            city: "Somewhere".into(),
            country: CountryCode::new("DE").unwrap(),
            active_in_registry: true,
            net_count: 100 + id,
            ixp_count: id,
            cloud_services: true,
        }
    }

    #[test]
    fn facility_rows() {
        let nodes = NodeIndex::new(&[
            node("r1", "DE", Role::Relay, Some(1)),
            node("r2", "DE", Role::Relay, Some(1)),
            node("r3", "GB", Role::Relay, Some(2)),
            node("r4", "GB", Role::Relay, None),
        ]);
        let cases = [
            case(0, 100.0, &[("r1", 10.0)]),
            case(1, 100.0, &[("r2", 10.0)]),
            case(2, 100.0, &[("r3", 10.0), ("r1", 3.0)]),
            case(3, 100.0, &[("r4", 10.0)]),
            case(4, 100.0, &[]),
        ];
        let rows = facility_report(&cases, &nodes, &[facility(1), facility(2)], 20, 1.0);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].facility_id, Some(1));
        assert_eq!(rows[0].pct_improved_cases, 75.0);
        assert_eq!(rows[0].top_relays, 2);
        assert_eq!(rows[1].pct_improved_cases, 25.0);
        assert_eq!(rows[2].name, "unknown");

        let one = facility_report(&cases[..2], &nodes, &[facility(1)], 20, 1.0);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].pct_improved_cases, 100.0);
    }

    #[test]
    fn country_change_counts() {
        let nodes = NodeIndex::new(&[
            node("a0", "AA", Role::Endpoint, None),
            node("b0", "BB", Role::Endpoint, None),
            node("a1", "AA", Role::Endpoint, None),
            node("b1", "BB", Role::Endpoint, None),
            node("a2", "AA", Role::Endpoint, None),
            node("b2", "BB", Role::Endpoint, None),
            node("a3", "AA", Role::Endpoint, None),
            node("b3", "BB", Role::Endpoint, None),
            node("far", "CC", Role::Relay, Some(1)),
            node("near", "AA", Role::Relay, Some(2)),
        ]);
        let cases = [
            case(0, 100.0, &[("far", 10.0)]),
            case(1, 100.0, &[("far", -10.0)]),
            case(2, 100.0, &[("near", 10.0)]),
            case(3, 100.0, &[("near", -5.0), ("far", -20.0)]),
        ];
        let cc = &country_change_effect(&cases, &nodes, 1.0).unwrap()[&RelayType::Cor];
        assert_eq!((cc.foreign_paths, cc.same_country_paths), (3, 2));
        assert_eq!(cc.foreign_improved, Some(1.0 / 3.0));
        assert_eq!(cc.same_country_improved, Some(0.5));

        let all_foreign = country_change_effect(&cases[..1], &nodes, 1.0).unwrap();
        assert_eq!(all_foreign[&RelayType::Cor].foreign_improved, Some(1.0));
        assert_eq!(all_foreign[&RelayType::Cor].same_country_improved, None);
    }

    #[test]
    fn voip_fractions() {
        let cases = [case(0, 330.0, &[("r", 80.0)]), case(1, 100.0, &[("r", 10.0)])];
        let v = voip_threshold_fraction(&cases, 320.0);
        assert_eq!(v.direct_fraction, 0.5);
        assert_eq!(v.relayed_fraction[&RelayType::Cor], 0.0);
        assert_eq!(v.relayed_fraction[&RelayType::Plr], 0.5);
        let calm = voip_threshold_fraction(&[case(0, 100.0, &[])], 320.0);
        assert_eq!((calm.direct_fraction, calm.relayed_fraction[&RelayType::Cor]), (0.0, 0.0));
    }

    fn rounds_with(series: &[f64]) -> Vec<MeasurementRound> {
        series
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let mut r = MeasurementRound::new(i as u32, Utc.with_ymd_and_hms(2017, 4, 20, 0, 0, 0).unwrap());
                r.endpoints = BTreeSet::from(["x".into(), "y".into()]);
                r.direct_medians.insert(MedianRtt { pair: PairKey::new("x", "y").unwrap(), round_id: i as u32, median: m, valid_count: 6 });
                r
            })
            .collect()
    }

    #[test]
    fn cv_two_points() {
        let s = stability_cv(&rounds_with(&[90.0, 110.0]), Deviation::Population);
        assert_eq!(s.direct.pairs[0].cv, 0.10);
        assert_eq!(s.direct.fraction_below_10pct, 0.0);
        let s = stability_cv(&rounds_with(&[70.0, 70.0, 70.0]), Deviation::Population);
        assert_eq!(s.direct.pairs[0].cv, 0.0);
        assert_eq!(s.direct.fraction_below_10pct, 1.0);
        assert!(stability_cv(&rounds_with(&[70.0]), Deviation::Population).direct.pairs.is_empty());
        let sample = stability_cv(&rounds_with(&[90.0, 110.0]), Deviation::Sample);
        assert!((sample.direct.pairs[0].cv - 200f64.sqrt() / 100.0).abs() < 1e-15);
    }
}
