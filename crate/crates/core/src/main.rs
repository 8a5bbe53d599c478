use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use tiv_core::analytics::{AnalysisConfig, Deviation, Ranking, DEFAULT_IMPROVEMENT_FLOOR_MS, DEFAULT_VOIP_THRESHOLD_MS};
use tiv_core::campaign::{execute_plan, plan_round, CampaignPlan, FileReplay, Inventory, Simulator, Task};
use tiv_core::dataset::{NodeId, RelayType};
use tiv_core::engine::{evaluate_rounds, NodeIndex};
use tiv_core::formats::{self, write_file};
use tiv_core::geo::PropagationConstants;
use tiv_core::registry::{FacilityRegistry, SnapshotRegistry};
use tiv_core::report::write_report;
use tiv_core::selection::{colo_filter_chain, DEFAULT_LG_THRESHOLD_MS};
use tiv_core::synth::{World, WorldSpec, SLOTS};
use tiv_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tiv", version, about = "One-relay overlay path measurement and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and its raw ping samples
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the spec's round count
        #[arg(long)]
        rounds: Option<u32>,
    },
    /// Write the ordered task list of one round as JSON lines
    Plan {
        #[command(flatten)]
        inv: InventoryArgs,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long, default_value_t = 0)]
        round: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute a campaign against recorded samples or a synthetic world
    Run {
        #[command(flatten)]
        inv: InventoryArgs,
        #[command(flatten)]
        plan: PlanArgs,
        /// Replay these samples
        #[arg(long, conflicts_with = "world", required_unless_present = "world")]
        samples: Option<PathBuf>,
        /// Measure a synthetic world built from this spec
        #[arg(long)]
        world: Option<PathBuf>,
        /// Rounds output (JSON)
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the Colo candidate filter chain
    FilterColos {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        facilities: PathBuf,
        #[arg(long, default_value_t = DEFAULT_LG_THRESHOLD_MS)]
        lg_threshold_ms: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw the per-round endpoint and relay sample
    Sample {
        #[arg(long)]
        nodes: PathBuf,
        #[arg(long)]
        coverage: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        round: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stitch relayed paths for every round and write them as JSON lines
    Analyze {
        #[arg(long)]
        rounds: PathBuf,
        #[arg(long)]
        nodes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write plot-ready CSVs and summary.json
    Report {
        #[arg(long)]
        rounds: PathBuf,
        #[arg(long)]
        nodes: PathBuf,
        #[arg(long)]
        facilities: Option<PathBuf>,
        #[command(flatten)]
        analysis: AnalysisArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct InventoryArgs {
    #[arg(long)]
    nodes: PathBuf,
    /// Per-round eyeball sampling; without it every node takes part
    #[arg(long)]
    coverage: Option<PathBuf>,
}

impl InventoryArgs {
    fn load(&self) -> Result<Inventory> {
        Ok(Inventory {
            nodes: formats::read_nodes(&self.nodes)?,
            coverage: self.coverage.as_deref().map(formats::read_coverage).transpose()?,
        })
    }
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to the rounds present in the samples or world spec
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long, default_value_t = 12)]
    cadence_hours: u32,
    #[arg(long, default_value_t = 30)]
    window_min: u32,
    #[arg(long, default_value_t = 5)]
    interval_min: u32,
    #[arg(long, default_value_t = SLOTS)]
    pings: u8,
}

impl PlanArgs {
    fn plan(&self, rounds: u32) -> CampaignPlan {
        CampaignPlan {
            seed: self.seed,
            rounds: self.rounds.unwrap_or(rounds),
            cadence_hours: self.cadence_hours,
            window_min: self.window_min,
            interval_min: self.interval_min,
            pings: self.pings,
            ..CampaignPlan::default()
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DeviationArg {
    Population,
    Sample,
}

#[derive(Clone, Copy, ValueEnum)]
enum RankingArg {
    Frequency,
    Greedy,
}

#[derive(Args)]
struct AnalysisArgs {
    #[arg(long, default_value_t = DEFAULT_IMPROVEMENT_FLOOR_MS)]
    improvement_floor_ms: f64,
    #[arg(long, default_value_t = DEFAULT_VOIP_THRESHOLD_MS)]
    voip_threshold_ms: f64,
    #[arg(long, value_enum, default_value_t = DeviationArg::Population)]
    deviation: DeviationArg,
    #[arg(long, value_enum, default_value_t = RankingArg::Frequency)]
    ranking: RankingArg,
}

impl AnalysisArgs {
    fn config(&self) -> Result<AnalysisConfig> {
        for (name, v) in [
            ("--improvement-floor-ms", self.improvement_floor_ms),
            ("--voip-threshold-ms", self.voip_threshold_ms),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be a non-negative number")));
            }
        }
        Ok(AnalysisConfig {
            improvement_floor_ms: self.improvement_floor_ms,
            voip_threshold_ms: self.voip_threshold_ms,
            deviation: match self.deviation {
                DeviationArg::Population => Deviation::Population,
                DeviationArg::Sample => Deviation::Sample,
            },
            ranking: match self.ranking {
                RankingArg::Frequency => Ranking::Frequency,
                RankingArg::Greedy => Ranking::Greedy,
            },
        })
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn simulate(spec: &Path, out: &Path, seed: Option<u64>, rounds: Option<u32>) -> Result<()> {
    let mut spec: WorldSpec = formats::read_json(spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(r) = rounds {
        spec.n_rounds = r;
    }
    let world = World::generate(&spec)?;
    create_dir(out)?;
    write_file(&out.join("nodes.csv"), |w| formats::write_nodes(w, &world.nodes))?;
    write_file(&out.join("coverage.csv"), |w| formats::write_coverage(w, &world.coverage))?;
    write_file(&out.join("facilities.csv"), |w| formats::write_facilities(w, &world.facilities))?;
    let samples = world.samples()?;
    write_file(&out.join("samples.csv"), |w| formats::write_samples(w, &samples))?;
    formats::write_json(&out.join("world.json"), &world.spec)?;
    formats::write_json(&out.join("truth.json"), &world.truth)?;
    log::info!("{} nodes, {} samples written to {}", world.nodes.len(), samples.len(), out.display());
    Ok(())
}

fn plan(inv: &InventoryArgs, args: &PlanArgs, round: u32, out: &Path) -> Result<()> {
    let plan = args.plan(round + 1);
    let tasks: Vec<Task> = plan_round(&plan, &inv.load()?, round)?;
    write_file(out, |w| {
        for t in &tasks {
            serde_json::to_writer(&mut *w, t)?;
            std::io::Write::write_all(w, b"\n").map_err(|e| Error::io(out, e))?;
        }
        Ok(())
    })
}

fn run(inv: &InventoryArgs, args: &PlanArgs, samples: Option<&Path>, world: Option<&Path>, out: &Path) -> Result<()> {
    let inventory = inv.load()?;
    let consts = PropagationConstants::default();
    let rounds = match (samples, world) {
        (Some(path), _) => {
            let replay = FileReplay::new(&formats::read_samples(path, args.pings)?)?;
            let n = replay.rounds().last().map_or(1, |r| r + 1);
            execute_plan(&args.plan(n), &inventory, &replay, &consts)?
        }
        (None, Some(path)) => {
            let spec: WorldSpec = formats::read_json(path)?;
            let world = World::generate(&spec)?;
            if world.nodes != inventory.nodes {
                return Err(Error::invalid(format!(
                    "{} does not describe the world in {}",
                    inv.nodes.display(),
                    path.display()
                )));
            }
            execute_plan(&args.plan(spec.n_rounds), &inventory, &Simulator { world: &world }, &consts)?
        }
        (None, None) => unreachable!("clap requires a backend"),
    };
    formats::write_json(out, &rounds)
}

#[derive(Serialize)]
struct SampleOut {
    round: u32,
    endpoints: BTreeSet<NodeId>,
    relays: BTreeMap<RelayType, BTreeSet<NodeId>>,
}

/// Writes the node selection the planner would make for `round`.
fn sample(nodes: &Path, coverage: &Path, seed: u64, round: u32, out: &Path) -> Result<()> {
    let plan = CampaignPlan { seed, rounds: round + 1, ..CampaignPlan::default() };
    let inv = Inventory {
        nodes: formats::read_nodes(nodes)?,
        coverage: Some(formats::read_coverage(coverage)?),
    };
    match plan_round(&plan, &inv, round)?.into_iter().next() {
        Some(Task::SelectNodes { endpoints, relays_by_type, .. }) => {
            formats::write_json(out, &SampleOut { round, endpoints, relays: relays_by_type })
        }
        _ => unreachable!("plans start with node selection"),
    }
}

fn filter_colos(candidates: &Path, facilities: &Path, lg: f64, out: &Path) -> Result<()> {
    if !(lg.is_finite() && lg > 0.0) {
        return Err(Error::invalid("--lg-threshold-ms must be positive"));
    }
    let candidates = formats::read_colo_candidates(candidates)?;
    let registry = SnapshotRegistry::from_file(facilities)?;
    let ids: BTreeSet<u32> = candidates.iter().flat_map(|c| c.candidate_facilities.iter().copied()).collect();
    let outcome = colo_filter_chain(&candidates, &registry.lookup(&ids)?, lg);
    create_dir(out)?;
    formats::write_json(&out.join("survivors.json"), &outcome.survivors)?;
    write_file(&out.join("attrition.csv"), |w| {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["stage", "remaining"])?;
        wr.write_record(["input".to_string(), outcome.initial.to_string()])?;
        for s in &outcome.stages {
            wr.write_record([s.rule.name().to_string(), s.passed.to_string()])?;
        }
        wr.flush().map_err(|e| Error::io("attrition.csv", e))
    })?;
    write_file(&out.join("rejections.csv"), |w| {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["ip", "rule", "reason"])?;
        for r in &outcome.rejections {
            wr.write_record([r.ip.to_string(), r.rule.name().to_string(), r.reason.clone()])?;
        }
        wr.flush().map_err(|e| Error::io("rejections.csv", e))
    })?;
    println!("{}", outcome.attrition().iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" -> "));
    Ok(())
}

fn analyze(rounds: &Path, nodes: &Path, out: &Path) -> Result<()> {
    let rounds = formats::read_rounds(rounds)?;
    let index = NodeIndex::new(&formats::read_nodes(nodes)?);
    let cases = evaluate_rounds(&rounds, &index, &PropagationConstants::default())?;
    let paths: Vec<_> = cases.iter().flat_map(|c| c.paths.iter().cloned()).collect();
    write_file(out, |w| formats::write_paths_jsonl(w, &paths))?;
    println!("{} cases, {} relayed paths", cases.len(), paths.len());
    Ok(())
}

fn report(rounds: &Path, nodes: &Path, facilities: Option<&Path>, analysis: &AnalysisArgs, out: &Path) -> Result<()> {
    let config = analysis.config()?;
    let rounds = formats::read_rounds(rounds)?;
    let index = NodeIndex::new(&formats::read_nodes(nodes)?);
    let facilities = facilities.map(formats::read_facilities).transpose()?.unwrap_or_default();
    let cases = evaluate_rounds(&rounds, &index, &PropagationConstants::default())?;
    let summary = write_report(out, &rounds, &cases, &index, &facilities, &config)?;
    for (t, s) in &summary.by_type {
        println!("{t:<10} improved {:>6.2}% of {} cases", 100.0 * s.improved_fraction, s.total_cases);
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { spec, out, seed, rounds } => simulate(&spec, &out, seed, rounds),
        Command::Plan { inv, plan: p, round, out } => plan(&inv, &p, round, &out),
        Command::Run { inv, plan, samples, world, out } => run(&inv, &plan, samples.as_deref(), world.as_deref(), &out),
        Command::FilterColos { candidates, facilities, lg_threshold_ms, out } => {
            filter_colos(&candidates, &facilities, lg_threshold_ms, &out)
        }
        Command::Sample { nodes, coverage, seed, round, out } => sample(&nodes, &coverage, seed, round, &out),
        Command::Analyze { rounds, nodes, out } => analyze(&rounds, &nodes, &out),
        Command::Report { rounds, nodes, facilities, analysis, out } => {
            report(&rounds, &nodes, facilities.as_deref(), &analysis, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
