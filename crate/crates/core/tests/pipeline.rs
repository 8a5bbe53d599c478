//! Campaign, engine and report wired together over different backends.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;

use tiv_core::analytics::AnalysisConfig;
use tiv_core::campaign::{
    execute_plan, plan_round, CampaignPlan, FileReplay, Inventory, LiveClient, MockTransport, Simulator, Task,
};
use tiv_core::dataset::{direction_symmetry_report, MeasurementRound, PairKey, Ping, RelayType, Role, RttSample};
use tiv_core::engine::{evaluate_rounds, NodeIndex};
use tiv_core::formats::{read_samples, write_file, write_samples};
use tiv_core::report::write_report;
use tiv_core::synth::{oracle_best_paths, World, WorldSpec, SLOTS};

fn spec(seed: u64) -> WorldSpec {
    WorldSpec {
        endpoints_per_country: 2,
        n_facilities: 6,
        relays_per_facility: 2,
        n_plr_sites: 3,
        n_rar: 8,
        noise_sigma: 0.03,
        loss_prob: 0.1,
        n_rounds: 3,
        ..WorldSpec::minimal(seed, 8)
    }
}

fn plan(world: &World) -> CampaignPlan {
    CampaignPlan { seed: world.spec.seed, rounds: world.spec.n_rounds, ..Default::default() }
}

fn simulate(world: &World, inv: &Inventory) -> Vec<MeasurementRound> {
    execute_plan(&plan(world), inv, &Simulator { world }, world.consts()).unwrap()
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.len() < 3 {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

#[test]
fn replayed_samples_give_the_same_rounds_as_the_simulator() {
    let world = World::generate(&spec(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("samples.csv");
    let samples = world.samples().unwrap();
    write_file(&path, |w| write_samples(w, &samples)).unwrap();
    let replay = FileReplay::new(&read_samples(&path, SLOTS).unwrap()).unwrap();
    assert_eq!(replay.rounds().len(), 3);

    for inv in [
        Inventory::new(world.nodes.clone()),
        Inventory { nodes: world.nodes.clone(), coverage: Some(world.coverage.clone()) },
    ] {
        let live = simulate(&world, &inv);
        let replayed = execute_plan(&plan(&world), &inv, &replay, world.consts()).unwrap();
        assert!(live.iter().all(|r| r.endpoints.len() >= 2 && !r.direct_medians.is_empty()));
        assert_eq!(live, replayed);
    }
}

#[test]
fn noiseless_medians_equal_base_rtt() {
    let world = World::generate(&WorldSpec { n_facilities: 3, relays_per_facility: 2, n_rar: 4, ..WorldSpec::minimal(8, 6) })
        .unwrap();
    let rounds = simulate(&world, &Inventory::new(world.nodes.clone()));
    let r = &rounds[0];
    assert_eq!(r.direct_medians.len(), 15);
    for m in r.direct_medians.iter().chain(r.link_medians.iter()) {
        assert_eq!(m.median, world.base_rtt(m.pair.first(), m.pair.second()).unwrap(), "{}", m.pair);
        assert_eq!(m.valid_count, SLOTS);
    }
}

#[test]
fn eighty_two_countries_give_3321_direct_pairs() {
    let world = World::generate(&WorldSpec { n_rar: 4, ..WorldSpec::minimal(5, 82) }).unwrap();
    let inv = Inventory { nodes: world.nodes.clone(), coverage: Some(world.coverage.clone()) };
    let tasks = plan_round(&plan(&world), &inv, 0).unwrap();
    let Some(Task::SelectNodes { endpoints, .. }) = tasks.first() else { panic!("selection comes first") };
    assert_eq!(endpoints.len(), 82);
    let first_slot = tasks.iter().filter(|t| matches!(t, Task::DirectPing { slot: 0, .. })).count();
    assert_eq!(first_slot, 3321);
    let all = tasks.iter().filter(|t| matches!(t, Task::DirectPing { .. })).count();
    assert_eq!(all, 3321 * SLOTS as usize);
}

#[test]
fn symmetry_report_matches_recount() {
    let world = World::generate(&WorldSpec { asymmetry_sigma: 0.04, noise_sigma: 0.01, loss_prob: 0.1, ..WorldSpec::minimal(21, 14) })
        .unwrap();
    let mut samples: Vec<RttSample> = world
        .round_samples(0)
        .unwrap()
        .into_iter()
        .filter(|s| world.node(&s.dst).is_some_and(|n| n.role == Role::Endpoint))
        .collect();
    samples.extend(world.reverse_samples(0).unwrap());
    let report = direction_symmetry_report(&samples).unwrap();

    let mut dirs: BTreeMap<PairKey, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in &samples {
        let pair = PairKey::new(s.src.clone(), s.dst.clone()).unwrap();
        let forward = s.src < s.dst;
        let e = dirs.entry(pair).or_default();
        if let Ping::Reply(ms) = s.rtt {
            if forward { e.0.push(ms) } else { e.1.push(ms) }
        }
    }
    let (mut compared, mut symmetric) = (0, 0);
    for (fwd, rev) in dirs.into_values() {
        let (Some(a), Some(b)) = (median(fwd), median(rev)) else { continue };
        compared += 1;
        symmetric += ((a - b).abs() <= 0.05 * a.min(b)) as usize;
    }
    assert_eq!(report.pairs_compared, compared);
    assert_eq!(report.symmetric_pairs, symmetric);
    assert!(symmetric > 0 && symmetric < compared, "{symmetric} of {compared}");
}

#[test]
fn mock_live_client_runs_through_to_a_report() {
    let world = World::generate(&WorldSpec {
        n_facilities: 2,
        relays_per_facility: 2,
        n_rar: 3,
        noise_sigma: 0.02,
        loss_prob: 0.1,
        n_rounds: 2,
        ..WorldSpec::minimal(12, 5)
    })
    .unwrap();
    // the mock has no notion of rounds, so only round 0 is canned
    let mut series: BTreeMap<(String, String), Vec<Option<f64>>> = BTreeMap::new();
    for s in world.round_samples(0).unwrap() {
        series.entry((s.src.to_string(), s.dst.to_string())).or_default().push(s.rtt.rtt());
    }
    let transport = series
        .into_iter()
        .fold(MockTransport::default(), |t, ((src, dst), rtts)| t.with_response(&src, &dst, rtts));
    let client = LiveClient::mock(transport, 5);
    let inv = Inventory::new(world.nodes.clone());
    let p = CampaignPlan { rounds: 1, ..plan(&world) };
    let live = execute_plan(&p, &inv, &client, world.consts()).unwrap();
    let sim = execute_plan(&p, &inv, &Simulator { world: &world }, world.consts()).unwrap();
    assert_eq!(live, sim);
    assert!(!client.transport().requests().is_empty());

    let nodes = NodeIndex::new(&world.nodes);
    let cases = evaluate_rounds(&live, &nodes, world.consts()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let summary = write_report(dir.path(), &live, &cases, &nodes, &world.facilities, &AnalysisConfig::default()).unwrap();
    assert_eq!(summary.cases, cases.len());
    assert_eq!(summary.pairs, 10);
}

#[test]
fn summary_fractions_match_exhaustive_oracle() {
    let world = World::generate(&WorldSpec { n_rounds: 5, ..spec(11) }).unwrap();
    let rounds = simulate(&world, &Inventory::new(world.nodes.clone()));
    let nodes = NodeIndex::new(&world.nodes);
    let cases = evaluate_rounds(&rounds, &nodes, world.consts()).unwrap();
    let config = AnalysisConfig::default();
    let dir = tempfile::tempdir().unwrap();
    write_report(dir.path(), &rounds, &cases, &nodes, &world.facilities, &config).unwrap();
    let summary: serde_json::Value =
        serde_json::from_reader(BufReader::new(File::open(dir.path().join("summary.json")).unwrap())).unwrap();

    let samples = world.samples().unwrap();
    let mut direct: BTreeMap<(u32, PairKey), Vec<f64>> = BTreeMap::new();
    for s in &samples {
        let ends = [&s.src, &s.dst].iter().all(|id| world.node(id).is_some_and(|n| n.role == Role::Endpoint));
        let slot = direct.entry((s.round_id, s.pair().unwrap())).or_default();
        if let (true, Ping::Reply(ms)) = (ends, s.rtt) {
            slot.push(ms);
        }
    }
    let direct: BTreeMap<(u32, PairKey), f64> =
        direct.into_iter().filter_map(|(k, v)| median(v).map(|m| (k, m))).collect();
    let oracle = oracle_best_paths(&world, &samples).unwrap();
    assert_eq!(summary["cases"].as_u64().unwrap() as usize, direct.len());
    for t in RelayType::ALL {
        let improved = direct
            .iter()
            .filter(|((r, pair), d)| {
                oracle
                    .get(&(*r, pair.clone(), t))
                    .is_some_and(|b| **d - b.stitched_rtt >= config.improvement_floor_ms)
            })
            .count();
        let got = summary["by_type"][t.as_str()]["improved_fraction"].as_f64().unwrap();
        assert_eq!(got, improved as f64 / direct.len() as f64, "{t}");
    }
}
