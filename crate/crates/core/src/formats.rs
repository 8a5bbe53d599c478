//! Persisted file formats.
//!
//! CSV readers validate every row and report all rejected rows with their
//! line numbers instead of stopping at the first one.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use csv::StringRecord;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::dataset::{CountryCode, MeasurementRound, NodeId, NodeRecord, Ping, RelayType, RttSample};
use crate::engine::RelayedPath;
use crate::error::{Error, Result, RowError};
use crate::geo::GeoCoord;
use crate::selection::{ColoCandidate, CoverageRecord, FacilityRecord};

pub const NODES_HEADER: [&str; 10] = [
    "node_id", "asn", "country", "role", "relay_type", "lat", "lon", "facility_id", "site_id", "eyeball_verified",
];
pub const SAMPLES_HEADER: [&str; 5] = ["src", "dst", "round", "slot", "rtt_ms"];
pub const COVERAGE_HEADER: [&str; 3] = ["asn", "country", "coverage_pct"];
pub const FACILITIES_HEADER: [&str; 8] = [
    "facility_id", "name", "city", "country", "active", "net_count", "ixp_count", "cloud_services",
];

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

type RowResult<T> = std::result::Result<T, String>;

fn parse_csv<T>(
    reader: impl Read,
    source_name: &str,
    header: &[&str],
    mut parse_row: impl FnMut(&StringRecord) -> RowResult<T>,
) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let fail = |errors| Error::Validation {
        source_name: source_name.to_string(),
        errors,
    };
    let got: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if got != header {
        return Err(fail(vec![RowError {
            line: 1,
            reason: format!("expected header `{}`, found `{}`", header.join(","), got.join(",")),
        }]));
    }
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for rec in rdr.records() {
        match rec {
            Ok(rec) => {
                let line = rec.position().map_or(0, |p| p.line());
                match parse_row(&rec) {
                    Ok(v) => out.push(v),
                    Err(reason) => errors.push(RowError { line, reason }),
                }
            }
            Err(e) => errors.push(RowError {
                line: e.position().map_or(0, |p| p.line()),
                reason: e.to_string(),
            }),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(fail(errors))
    }
}

fn field<'r>(rec: &'r StringRecord, i: usize, name: &str) -> RowResult<&'r str> {
    rec.get(i).ok_or_else(|| format!("missing field {name}"))
}

fn num<T: std::str::FromStr>(rec: &StringRecord, i: usize, name: &str) -> RowResult<T> {
    let raw = field(rec, i, name)?;
    raw.parse().map_err(|_| format!("{name}: cannot parse {raw:?}"))
}

fn opt_num<T: std::str::FromStr>(rec: &StringRecord, i: usize, name: &str) -> RowResult<Option<T>> {
    match field(rec, i, name)? {
        "" => Ok(None),
        _ => num(rec, i, name).map(Some),
    }
}

fn flag(rec: &StringRecord, i: usize, name: &str) -> RowResult<bool> {
    match field(rec, i, name)?.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" | "" => Ok(false),
        other => Err(format!("{name}: expected a boolean, got {other:?}")),
    }
}

fn country(rec: &StringRecord, i: usize) -> RowResult<CountryCode> {
    CountryCode::new(field(rec, i, "country")?).map_err(|e| e.to_string())
}

fn finite(v: f64, name: &str) -> RowResult<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{name} must be finite"))
    }
}

pub fn parse_nodes(reader: impl Read, source_name: &str) -> Result<Vec<NodeRecord>> {
    let mut seen = BTreeSet::new();
    parse_csv(reader, source_name, &NODES_HEADER, |rec| {
        let node = NodeRecord {
            node_id: NodeId(field(rec, 0, "node_id")?.to_string()),
            asn: num(rec, 1, "asn")?,
            country: country(rec, 2)?,
            role: field(rec, 3, "role")?.parse().map_err(|e: Error| e.to_string())?,
            relay_type: RelayType::parse_optional(field(rec, 4, "relay_type")?).map_err(|e| e.to_string())?,
            coord: GeoCoord {
                lat: finite(num(rec, 5, "lat")?, "lat")?,
                lon: finite(num(rec, 6, "lon")?, "lon")?,
            },
            facility_id: opt_num(rec, 7, "facility_id")?,
            site_id: Some(field(rec, 8, "site_id")?.to_string()).filter(|s| !s.is_empty()),
            eyeball_verified: flag(rec, 9, "eyeball_verified")?,
        };
        node.validate().map_err(|e| e.to_string())?;
        if !seen.insert(node.node_id.clone()) {
            return Err(format!("duplicate node_id {}", node.node_id));
        }
        Ok(node)
    })
}

pub fn read_nodes(path: &Path) -> Result<Vec<NodeRecord>> {
    parse_nodes(open(path)?, &path.display().to_string())
}

pub fn write_nodes(w: impl Write, nodes: &[NodeRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(NODES_HEADER)?;
    for n in nodes {
        wr.write_record([
            n.node_id.0.clone(),
            n.asn.to_string(),
            n.country.to_string(),
            n.role.to_string(),
            n.relay_type.map_or("none".to_string(), |t| t.to_string()),
            n.coord.lat.to_string(),
            n.coord.lon.to_string(),
            n.facility_id.map_or(String::new(), |f| f.to_string()),
            n.site_id.clone().unwrap_or_default(),
            n.eyeball_verified.to_string(),
        ])?;
    }
    wr.flush().map_err(|e| Error::io("<nodes>", e))
}

/// Parses ping samples; `slots` bounds the slot index (6 by default).
pub fn parse_samples(reader: impl Read, source_name: &str, slots: u8) -> Result<Vec<RttSample>> {
    let mut seen = BTreeSet::new();
    parse_csv(reader, source_name, &SAMPLES_HEADER, |rec| {
        let src = NodeId(field(rec, 0, "src")?.to_string());
        let dst = NodeId(field(rec, 1, "dst")?.to_string());
        if src.0.is_empty() || dst.0.is_empty() {
            return Err("empty node id".into());
        }
        if src == dst {
            return Err(format!("self-ping on {src}"));
        }
        let round_id: u32 = num(rec, 2, "round")?;
        let slot: u8 = num(rec, 3, "slot")?;
        if slot >= slots {
            return Err(format!("slot {slot} outside [0, {}]", slots - 1));
        }
        let rtt = match field(rec, 4, "rtt_ms")? {
            "lost" => Ping::Lost,
            raw => {
                let ms: f64 = raw.parse().map_err(|_| format!("rtt_ms: cannot parse {raw:?}"))?;
                if !(ms.is_finite() && ms > 0.0) {
                    return Err(format!("rtt_ms {raw} must be positive"));
                }
                Ping::Reply(ms)
            }
        };
        if !seen.insert((src.clone(), dst.clone(), round_id, slot)) {
            return Err(format!("duplicate sample {src}->{dst} round {round_id} slot {slot}"));
        }
        Ok(RttSample { src, dst, round_id, slot, rtt })
    })
}

pub fn read_samples(path: &Path, slots: u8) -> Result<Vec<RttSample>> {
    parse_samples(open(path)?, &path.display().to_string(), slots)
}

pub fn write_samples(w: impl Write, samples: &[RttSample]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(SAMPLES_HEADER)?;
    for s in samples {
        wr.write_record([
            s.src.0.clone(),
            s.dst.0.clone(),
            s.round_id.to_string(),
            s.slot.to_string(),
            s.rtt.rtt().map_or("lost".to_string(), |ms| ms.to_string()),
        ])?;
    }
    wr.flush().map_err(|e| Error::io("<samples>", e))
}

pub fn parse_coverage(reader: impl Read, source_name: &str) -> Result<Vec<CoverageRecord>> {
    let mut seen = BTreeSet::new();
    parse_csv(reader, source_name, &COVERAGE_HEADER, |rec| {
        let r = CoverageRecord {
            asn: num(rec, 0, "asn")?,
            country: country(rec, 1)?,
            user_coverage: num(rec, 2, "coverage_pct")?,
        };
        if !(0.0..=100.0).contains(&r.user_coverage) {
            return Err(format!("coverage_pct {} outside [0, 100]", r.user_coverage));
        }
        if !seen.insert((r.asn, r.country.clone())) {
            return Err(format!("duplicate record for AS{} in {}", r.asn, r.country));
        }
        Ok(r)
    })
}

pub fn read_coverage(path: &Path) -> Result<Vec<CoverageRecord>> {
    parse_coverage(open(path)?, &path.display().to_string())
}

pub fn write_coverage(w: impl Write, records: &[CoverageRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(COVERAGE_HEADER)?;
    for r in records {
        wr.write_record([r.asn.to_string(), r.country.to_string(), r.user_coverage.to_string()])?;
    }
    wr.flush().map_err(|e| Error::io("<coverage>", e))
}

pub fn parse_facilities(reader: impl Read, source_name: &str) -> Result<Vec<FacilityRecord>> {
    let mut seen = BTreeSet::new();
    parse_csv(reader, source_name, &FACILITIES_HEADER, |rec| {
        let f = FacilityRecord {
            facility_id: num(rec, 0, "facility_id")?,
            name: field(rec, 1, "name")?.to_string(),
            city: field(rec, 2, "city")?.to_string(),
            country: country(rec, 3)?,
            active_in_registry: flag(rec, 4, "active")?,
            net_count: num(rec, 5, "net_count")?,
            ixp_count: num(rec, 6, "ixp_count")?,
            cloud_services: flag(rec, 7, "cloud_services")?,
        };
        if !seen.insert(f.facility_id) {
            return Err(format!("duplicate facility_id {}", f.facility_id));
        }
        Ok(f)
    })
}

pub fn read_facilities(path: &Path) -> Result<Vec<FacilityRecord>> {
    parse_facilities(open(path)?, &path.display().to_string())
}

pub fn write_facilities(w: impl Write, facilities: &[FacilityRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(FACILITIES_HEADER)?;
    for f in facilities {
        wr.write_record([
            f.facility_id.to_string(),
            f.name.clone(),
            f.city.clone(),
            f.country.to_string(),
            f.active_in_registry.to_string(),
            f.net_count.to_string(),
            f.ixp_count.to_string(),
            f.cloud_services.to_string(),
        ])?;
    }
    wr.flush().map_err(|e| Error::io("<facilities>", e))
}

/// Colo candidates as a JSON array; each object is validated and reported
/// by array index.
pub fn parse_colo_candidates(reader: impl Read, source_name: &str) -> Result<Vec<ColoCandidate>> {
    let raw: Vec<serde_json::Value> = serde_json::from_reader(reader)?;
    let mut out = Vec::with_capacity(raw.len());
    let mut errors = Vec::new();
    for (i, v) in raw.into_iter().enumerate() {
        let parsed = serde_json::from_value::<ColoCandidate>(v)
            .map_err(|e| e.to_string())
            .and_then(|c| c.validate().map(|_| c).map_err(|e| e.to_string()));
        match parsed {
            Ok(c) => out.push(c),
            Err(reason) => errors.push(RowError {
                line: i as u64,
                reason: format!("element {i}: {reason}"),
            }),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(Error::Validation {
            source_name: source_name.to_string(),
            errors,
        })
    }
}

pub fn read_colo_candidates(path: &Path) -> Result<Vec<ColoCandidate>> {
    parse_colo_candidates(open(path)?, &path.display().to_string())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(open(path)?))?)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rounds(path: &Path) -> Result<Vec<MeasurementRound>> {
    let rounds: Vec<MeasurementRound> = read_json(path)?;
    for r in &rounds {
        r.validate()?;
    }
    Ok(rounds)
}

pub fn write_paths_jsonl(w: impl Write, paths: &[RelayedPath]) -> Result<()> {
    let mut w = BufWriter::new(w);
    for p in paths {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| Error::io("<paths>", e))?;
    }
    w.flush().map_err(|e| Error::io("<paths>", e))
}

pub fn parse_paths_jsonl(reader: impl Read) -> Result<Vec<RelayedPath>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io("<paths>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::invalid(format!("paths line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Writes `f(writer)` into `path`.
pub fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Role;

    #[test]
    fn nodes_roundtrip() {
        let nodes = vec![
            NodeRecord {
                node_id: "ep1".into(),
                asn: 3333,
                country: CountryCode::new("NL").unwrap(),
                role: Role::Endpoint,
                relay_type: None,
                coord: GeoCoord { lat: 52.37, lon: 4.89 },
                facility_id: None,
                site_id: None,
                eyeball_verified: true,
            },
            NodeRecord {
                node_id: "pl1".into(),
                asn: 680,
                country: CountryCode::new("DE").unwrap(),
                role: Role::Relay,
                relay_type: Some(RelayType::Plr),
                coord: GeoCoord { lat: 52.52, lon: 13.40 },
                facility_id: None,
                site_id: Some("tu-berlin".into()),
                eyeball_verified: false,
            },
        ];
        let mut buf = Vec::new();
        write_nodes(&mut buf, &nodes).unwrap();
        assert_eq!(parse_nodes(buf.as_slice(), "mem").unwrap(), nodes);
    }

    #[test]
    fn sample_rows_reported_with_lines() {
        let csv = "src,dst,round,slot,rtt_ms\n\
                   a,b,0,0,12.5\n\
                   a,b,0,1,lost\n\
                   a,b,0,7,3\n\
                   a,a,0,2,3\n\
                   a,b,0,3,-1\n\
                   a,b,0,0,11\n\
                   a,b,x,4,1\n";
        let err = parse_samples(csv.as_bytes(), "mem", 6).unwrap_err();
        let Error::Validation { errors, .. } = err else { panic!("{err}") };
        let lines: Vec<u64> = errors.iter().map(|e| e.line).collect();
        assert_eq!(lines, vec![4, 5, 6, 7, 8]);
        assert!(errors[0].reason.contains("slot 7"));
    }

    #[test]
    fn header_must_match() {
        let err = parse_coverage("asn,cc,pct\n1,GR,20\n".as_bytes(), "cov").unwrap_err();
        assert!(matches!(err, Error::Validation { ref errors, .. } if errors[0].line == 1));
    }

    #[test]
    fn node_invariants_checked_per_row() {
        let csv = "node_id,asn,country,role,relay_type,lat,lon,facility_id,site_id,eyeball_verified\n\
                   c1,174,US,relay,COR,40.7,-74.0,,,false\n\
                   e1,3320,DE,endpoint,none,52.5,13.4,,,true\n\
                   e1,3320,DE,endpoint,none,52.5,13.4,,,true\n\
                   e2,3320,DE,endpoint,none,152.5,13.4,,,true\n";
        let Error::Validation { errors, .. } = parse_nodes(csv.as_bytes(), "n").unwrap_err() else { panic!() };
        assert_eq!(errors.iter().map(|e| e.line).collect::<Vec<_>>(), vec![2, 4, 5]);
    }

    #[test]
    fn facilities_and_candidates() {
        let csv = "facility_id,name,city,country,active,net_count,ixp_count,cloud_services\n\
                   58,Equinix FR5,Frankfurt,DE,true,280,11,true\n";
        let f = parse_facilities(csv.as_bytes(), "f").unwrap();
        assert_eq!(f[0].ixp_count, 11);
        let json = r#"[{"ip":"192.0.2.1","asn_claimed":1,"candidate_facilities":[58],"pingable":true},
                       {"ip":"192.0.2.2","asn_claimed":1,"candidate_facilities":[],"pingable":true},
                       {"ip":"nope","asn_claimed":1,"candidate_facilities":[1],"pingable":true}]"#;
        let Error::Validation { errors, .. } = parse_colo_candidates(json.as_bytes(), "c").unwrap_err() else { panic!() };
        assert_eq!(errors.len(), 2);
    }
}
