//! Plot-ready CSVs and the `summary.json` headline file.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::analytics::{
    country_change_effect, facility_report, improvement_cdf, redundancy_per_pair, stability_cv, threshold_coverage,
    top_relay_coverage, voip_threshold_fraction, AnalysisConfig, CountryChange, CvSummary, ImprovementCdf, VoipReport,
};
use crate::dataset::{MeasurementRound, NodeId, RelayType};
use crate::engine::{Case, NodeIndex};
use crate::error::{Error, Result};
use crate::formats::write_file;
use crate::selection::FacilityRecord;

/// Thresholds for the threshold-coverage curves, in ms.
pub const THRESHOLDS_MS: [f64; 21] = [
    0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0, 55.0, 60.0, 65.0, 70.0, 75.0, 80.0, 85.0, 90.0,
    95.0, 100.0,
];
pub const TOP_K: usize = 10;
pub const TOP_FACILITIES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TypeSummary {
    pub total_cases: usize,
    pub improved_cases: usize,
    pub improved_fraction: f64,
    pub median_improvement_ms: Option<f64>,
    pub median_improving_relays: Option<f64>,
    pub relays_seen: usize,
    pub top10_coverage: f64,
    pub country_change: CountryChange,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilitySummary {
    pub pairs: usize,
    pub fraction_below_10pct: f64,
    pub quantiles: Vec<(f64, f64)>,
}

impl From<&CvSummary> for StabilitySummary {
    fn from(s: &CvSummary) -> Self {
        StabilitySummary {
            pairs: s.pairs.len(),
            fraction_below_10pct: s.fraction_below_10pct,
            quantiles: s.quantiles.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub config: AnalysisConfig,
    pub rounds: usize,
    pub cases: usize,
    pub pairs: usize,
    pub by_type: BTreeMap<RelayType, TypeSummary>,
    pub voip: VoipReport,
    pub stability: BTreeMap<&'static str, StabilitySummary>,
}

fn empty_cdf(t: RelayType) -> ImprovementCdf {
    ImprovementCdf {
        relay_type: t,
        points: Vec::new(),
        improved_cases: 0,
        total_cases: 0,
        improved_fraction_of_total: 0.0,
        median_improvement_ms: None,
    }
}

fn write_xy(path: &Path, header: [&str; 2], rows: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    write_file(path, |w| {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(header)?;
        for (x, y) in rows {
            wr.write_record([x, y])?;
        }
        wr.flush().map_err(|e| Error::io(path, e))
    })
}

/// Runs every analysis over `cases` and writes the artifacts into `out_dir`.
/// Files for all four relay types are always written, empty when a type
/// has nothing to show.
pub fn write_report(
    out_dir: &Path,
    rounds: &[MeasurementRound],
    cases: &[Case],
    nodes: &NodeIndex,
    facilities: &[FacilityRecord],
    config: &AnalysisConfig,
) -> Result<Summary> {
    if rounds.is_empty() {
        return Err(Error::invalid("report needs at least one round"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let floor = config.improvement_floor_ms;

    let cdfs = if cases.is_empty() {
        RelayType::ALL.into_iter().map(|t| (t, empty_cdf(t))).collect()
    } else {
        improvement_cdf(cases, floor)?
    };
    let coverage = top_relay_coverage(cases, usize::MAX, floor, config.ranking);
    let redundancy = redundancy_per_pair(cases, floor);
    let country = country_change_effect(cases, nodes, floor)?;

    let mut by_type = BTreeMap::new();
    for t in RelayType::ALL {
        let cdf = &cdfs[&t];
        write_xy(
            &out_dir.join(format!("cdf_{t}.csv")),
            ["improvement_ms", "fraction"],
            cdf.points.iter().map(|(x, y)| (x.to_string(), y.to_string())),
        )?;
        let curve = &coverage[&t];
        write_xy(
            &out_dir.join(format!("coverage_{t}.csv")),
            ["k", "fraction"],
            curve
                .cumulative_coverage
                .iter()
                .enumerate()
                .map(|(i, f)| ((i + 1).to_string(), f.to_string())),
        )?;
        let top: BTreeSet<NodeId> = curve.ranked_relays.iter().take(TOP_K).cloned().collect();
        for (label, subset) in [("top10", Some(&top)), ("all", None)] {
            let points = threshold_coverage(cases, t, subset, &THRESHOLDS_MS, floor);
            write_xy(
                &out_dir.join(format!("threshold_{t}_{label}.csv")),
                ["tau_ms", "fraction"],
                points.iter().map(|(x, y)| (x.to_string(), y.to_string())),
            )?;
        }
        let relays_seen: BTreeSet<&NodeId> = cases.iter().flat_map(|c| c.paths_of(t)).map(|p| &p.relay).collect();
        by_type.insert(
            t,
            TypeSummary {
                total_cases: cases.len(),
                improved_cases: cdf.improved_cases,
                improved_fraction: cdf.improved_fraction_of_total,
                median_improvement_ms: cdf.median_improvement_ms,
                median_improving_relays: redundancy[&t],
                relays_seen: relays_seen.len(),
                top10_coverage: curve
                    .cumulative_coverage
                    .get(TOP_K.min(curve.cumulative_coverage.len()).saturating_sub(1))
                    .copied()
                    .unwrap_or(0.0),
                country_change: country[&t].clone(),
            },
        );
    }

    let rows = facility_report(cases, nodes, facilities, TOP_FACILITIES, floor);
    write_file(&out_dir.join("facilities.csv"), |w| {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "facility_id",
            "name",
            "city",
            "country",
            "pct_improved_cases",
            "pct_improved_pairs",
            "top_relays",
            "net_count",
            "ixp_count",
            "cloud_services",
        ])?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &rows {
            wr.write_record([
                opt(r.facility_id.map(|f| f.to_string())),
                r.name.clone(),
                r.city.clone(),
                r.country.clone(),
                r.pct_improved_cases.to_string(),
                r.pct_improved_pairs.to_string(),
                r.top_relays.to_string(),
                opt(r.net_count.map(|v| v.to_string())),
                opt(r.ixp_count.map(|v| v.to_string())),
                opt(r.cloud_services.map(|v| v.to_string())),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("facilities.csv", e))
    })?;

    let stability = stability_cv(rounds, config.deviation);
    let sets = [("direct", &stability.direct), ("link", &stability.link), ("all", &stability.all)];
    write_file(&out_dir.join("stability.csv"), |w| {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["set", "cv", "fraction"])?;
        for (label, s) in sets {
            let mut cvs: Vec<f64> = s.pairs.iter().map(|p| p.cv).collect();
            cvs.sort_by(f64::total_cmp);
            let n = cvs.len();
            for (i, cv) in cvs.iter().enumerate() {
                wr.write_record([label.to_string(), cv.to_string(), ((i + 1) as f64 / n as f64).to_string()])?;
            }
        }
        wr.flush().map_err(|e| Error::io("stability.csv", e))
    })?;

    let pairs: BTreeSet<_> = cases.iter().map(|c| &c.pair).collect();
    let summary = Summary {
        config: *config,
        rounds: rounds.len(),
        cases: cases.len(),
        pairs: pairs.len(),
        by_type,
        voip: voip_threshold_fraction(cases, config.voip_threshold_ms),
        stability: sets.iter().map(|(k, s)| (*k, StabilitySummary::from(*s))).collect(),
    };
    write_file(&out_dir.join("summary.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &summary)?;
        w.write_all(b"\n").map_err(|e| Error::io("summary.json", e))
    })?;
    Ok(summary)
}
