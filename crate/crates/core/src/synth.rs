//! Synthetic measurement worlds with known ground truth.
//!
//! Every link RTT is the geodesic fiber round trip times a per-link
//! inflation factor `>= 1`. Links touching a relay in a hub facility get
//! their inflation discounted by `hub_bonus`, which is what plants triangle
//! inequality violations through hubs. Samples add per-round drift and
//! per-ping multiplicative jitter and losses.
//!
//! All randomness is derived from the spec seed. Samples of a given
//! (round, pair) come from their own sub-stream, so any subset of pings can
//! be regenerated independently and in any order.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    median_of, CountryCode, NodeId, NodeRecord, PairKey, Ping, RelayType, Role, RttSample,
};
use crate::error::{Error, Result};
use crate::geo::{GeoCoord, PropagationConstants};
use crate::selection::{CoverageRecord, FacilityRecord};

/// Pings per pair per round.
pub const SLOTS: u8 = 6;
/// Improvement (ms) a relay must reach for ground truth to flag a TIV.
pub const TRUTH_FLOOR_MS: f64 = 1.0;
const MIN_RTT_MS: f64 = 1e-3;

/// Distribution of the per-link inflation factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InflationDist {
    Constant { factor: f64 },
    /// `1 + exp(N(mu, sigma))`.
    ShiftedLogNormal { mu: f64, sigma: f64 },
}

impl Default for InflationDist {
    fn default() -> Self {
        InflationDist::ShiftedLogNormal { mu: -1.2, sigma: 0.8 }
    }
}

impl InflationDist {
    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            InflationDist::Constant { factor } => factor,
            InflationDist::ShiftedLogNormal { mu, sigma } => {
                let z: f64 = rng.sample(StandardNormal);
                1.0 + (mu + sigma * z).exp()
            }
        }
    }
}

fn default_rounds() -> u32 {
    1
}
fn default_hub_bonus() -> f64 {
    1.0
}
fn default_plr_per_site() -> usize {
    2
}
fn default_rar_eye_share() -> f64 {
    0.5
}
fn default_tiv_margin() -> f64 {
    0.1
}
fn default_cadence() -> u32 {
    12
}
fn default_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2017, 4, 20, 0, 0, 0).unwrap()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    pub n_countries: usize,
    pub endpoints_per_country: usize,
    #[serde(default)]
    pub n_facilities: usize,
    #[serde(default)]
    pub relays_per_facility: usize,
    #[serde(default)]
    pub n_plr_sites: usize,
    #[serde(default = "default_plr_per_site")]
    pub plr_per_site: usize,
    #[serde(default)]
    pub n_rar: usize,
    /// Share of RIPE Atlas relays placed in eyeball networks.
    #[serde(default = "default_rar_eye_share")]
    pub rar_eye_share: f64,
    #[serde(default)]
    pub inflation_dist: InflationDist,
    /// Facilities `1..=n_hubs` are hubs.
    #[serde(default)]
    pub n_hubs: usize,
    #[serde(default = "default_hub_bonus")]
    pub hub_bonus: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    /// Per (pair, round) multiplicative drift.
    #[serde(default)]
    pub round_noise_sigma: f64,
    #[serde(default)]
    pub loss_prob: f64,
    #[serde(default = "default_rounds")]
    pub n_rounds: u32,
    /// When set, exactly `round(p * pairs)` endpoint pairs get an inflated
    /// direct path guaranteed to be beaten through every hub relay; all
    /// other endpoint pairs ride the geodesic and cannot be improved.
    /// Both sides are separated by `tiv_margin`.
    #[serde(default)]
    pub tiv_fraction: Option<f64>,
    #[serde(default = "default_tiv_margin")]
    pub tiv_margin: f64,
    /// Draw inflation per country pair instead of per link. Links inside a
    /// country stay on the geodesic.
    #[serde(default)]
    pub inter_country_only: bool,
    /// Relative spread between ping directions, used by reverse samples.
    #[serde(default)]
    pub asymmetry_sigma: f64,
    #[serde(default = "default_start")]
    pub start_time: DateTime<Utc>,
    #[serde(default = "default_cadence")]
    pub cadence_hours: u32,
}

impl WorldSpec {
    /// A small world with every optional knob at its neutral value.
    pub fn minimal(seed: u64, n_countries: usize) -> Self {
        WorldSpec {
            seed,
            n_countries,
            endpoints_per_country: 1,
            n_facilities: 0,
            relays_per_facility: 0,
            n_plr_sites: 0,
            plr_per_site: default_plr_per_site(),
            n_rar: 0,
            rar_eye_share: default_rar_eye_share(),
            inflation_dist: InflationDist::default(),
            n_hubs: 0,
            hub_bonus: 1.0,
            noise_sigma: 0.0,
            round_noise_sigma: 0.0,
            loss_prob: 0.0,
            n_rounds: 1,
            tiv_fraction: None,
            tiv_margin: default_tiv_margin(),
            inter_country_only: false,
            asymmetry_sigma: 0.0,
            start_time: default_start(),
            cadence_hours: default_cadence(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_countries == 0 || self.endpoints_per_country == 0 {
            return bad("world has no endpoints".into());
        }
        if self.n_countries * self.endpoints_per_country < 2 {
            return bad("need at least two endpoints".into());
        }
        if self.n_countries > 26 * 26 {
            return bad(format!("at most 676 countries, got {}", self.n_countries));
        }
        if self.n_hubs > self.n_facilities {
            return bad(format!("{} hubs but {} facilities", self.n_hubs, self.n_facilities));
        }
        if !(self.hub_bonus > 0.0 && self.hub_bonus <= 1.0) {
            return bad(format!("hub_bonus {} outside (0, 1]", self.hub_bonus));
        }
        if !(0.0..1.0).contains(&self.loss_prob) {
            return bad(format!("loss_prob {} outside [0, 1)", self.loss_prob));
        }
        if !(0.0..=1.0).contains(&self.rar_eye_share) {
            return bad(format!("rar_eye_share {} outside [0, 1]", self.rar_eye_share));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("round_noise_sigma", self.round_noise_sigma),
            ("asymmetry_sigma", self.asymmetry_sigma),
            ("tiv_margin", self.tiv_margin),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} {v} must be a non-negative number"));
            }
        }
        match self.inflation_dist {
            InflationDist::Constant { factor } if !(factor.is_finite() && factor >= 1.0) => {
                return bad(format!("constant inflation {factor} < 1"))
            }
            InflationDist::ShiftedLogNormal { mu, sigma } if !(mu.is_finite() && sigma.is_finite() && sigma >= 0.0) => {
                return bad("log-normal parameters must be finite, sigma >= 0".into())
            }
            _ => {}
        }
        if let Some(p) = self.tiv_fraction {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("tiv_fraction {p} outside [0, 1]"));
            }
            if p > 0.0 && (self.n_hubs == 0 || self.relays_per_facility == 0) {
                return bad("planting TIVs needs at least one populated hub facility".into());
            }
        }
        if self.n_rounds == 0 {
            return bad("n_rounds must be positive".into());
        }
        Ok(())
    }
}

/// Mixes a master seed with a path of integers into an independent seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(splitmix(master), |acc, &x| splitmix(acc ^ splitmix(x)))
}

const TAG_LAYOUT: u64 = 1;
const TAG_INFLATION: u64 = 2;
const TAG_PLANT: u64 = 3;
const TAG_SAMPLE: u64 = 4;
const TAG_REVERSE: u64 = 5;
const TAG_COUNTRY_INFLATION: u64 = 6;

fn country_key(code: &str) -> u64 {
    code.bytes().fold(0, |k, b| k << 8 | b as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTruth {
    pub pair: PairKey,
    /// Noiseless direct RTT.
    pub base_rtt: f64,
    pub inflation: f64,
    /// Whether the pair was deliberately given an inflated direct path.
    pub planted: bool,
    /// Relay types with at least one relay improving the noiseless direct
    /// RTT by [`TRUTH_FLOOR_MS`] or more.
    pub tiv_types: BTreeSet<RelayType>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub pairs: Vec<PairTruth>,
}

impl GroundTruth {
    pub fn planted_fraction(&self) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        self.pairs.iter().filter(|p| p.planted).count() as f64 / self.pairs.len() as f64
    }

    pub fn tiv_fraction(&self, t: RelayType) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        self.pairs.iter().filter(|p| p.tiv_types.contains(&t)).count() as f64 / self.pairs.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub nodes: Vec<NodeRecord>,
    pub coverage: Vec<CoverageRecord>,
    pub facilities: Vec<FacilityRecord>,
    pub truth: GroundTruth,
    index: HashMap<NodeId, usize>,
    /// Inflation per (lower index, higher index) link.
    inflation: HashMap<(usize, usize), f64>,
    consts: PropagationConstants,
}

fn country_code(i: usize) -> CountryCode {
    let a = (b'A' + (i / 26) as u8) as char;
    let b = (b'A' + (i % 26) as u8) as char;
    CountryCode::new(&format!("{a}{b}")).expect("two letters")
}

fn jitter(center: GeoCoord, spread: f64, rng: &mut ChaCha8Rng) -> GeoCoord {
    GeoCoord {
        lat: (center.lat + rng.random_range(-spread..=spread)).clamp(-89.0, 89.0),
        lon: ((center.lon + rng.random_range(-spread..=spread) + 540.0) % 360.0) - 180.0,
    }
}

/// Builds a world from its spec; fully determined by `spec.seed`.
pub fn generate(spec: &WorldSpec) -> Result<World> {
    World::generate(spec)
}

impl World {
    pub fn generate(spec: &WorldSpec) -> Result<World> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[TAG_LAYOUT]));
        let mut nodes = Vec::new();
        let mut coverage = Vec::new();
        let mut facilities = Vec::new();

        let centers: Vec<GeoCoord> = (0..spec.n_countries)
            .map(|_| GeoCoord {
                lat: rng.random_range(-50.0..=65.0),
                lon: rng.random_range(-179.0..=179.0),
            })
            .collect();
        let eyeball_ases_per_country = spec.endpoints_per_country.min(2);
        let eyeball_asn = |c: usize, k: usize| 1000 + (c * 10 + k) as u32;

        for (c, center) in centers.iter().enumerate() {
            let cc = country_code(c);
            for k in 0..eyeball_ases_per_country {
                coverage.push(CoverageRecord {
                    asn: eyeball_asn(c, k),
                    country: cc.clone(),
                    user_coverage: rng.random_range(10.5..=60.0),
                });
            }
            coverage.push(CoverageRecord {
                asn: eyeball_asn(c, 9),
                country: cc.clone(),
                user_coverage: rng.random_range(0.5..=9.5),
            });
            for e in 0..spec.endpoints_per_country {
                nodes.push(NodeRecord {
                    node_id: NodeId(format!("ep-{}-{e:02}", cc)),
                    asn: eyeball_asn(c, e % eyeball_ases_per_country),
                    country: cc.clone(),
                    role: Role::Endpoint,
                    relay_type: None,
                    coord: jitter(*center, 2.0, &mut rng),
                    facility_id: None,
                    site_id: None,
                    eyeball_verified: true,
                });
            }
        }

        for f in 1..=spec.n_facilities {
            let c = rng.random_range(0..spec.n_countries);
            let cc = country_code(c);
            let coord = jitter(centers[c], 1.0, &mut rng);
            let hub = f <= spec.n_hubs;
            facilities.push(FacilityRecord {
                facility_id: f as u32,
                name: format!("Facility {f:03}"),
                city: format!("City-{cc}"),
                country: cc.clone(),
                active_in_registry: true,
                net_count: if hub { rng.random_range(150..=400) } else { rng.random_range(10..=150) },
                ixp_count: if hub { rng.random_range(4..=12) } else { rng.random_range(0..=4) },
                cloud_services: hub || rng.random_bool(0.5),
            });
            for r in 0..spec.relays_per_facility {
                nodes.push(NodeRecord {
                    node_id: NodeId(format!("cor-{f:03}-{r:02}")),
                    asn: 60_000 + f as u32,
                    country: cc.clone(),
                    role: Role::Relay,
                    relay_type: Some(RelayType::Cor),
                    coord,
                    facility_id: Some(f as u32),
                    site_id: None,
                    eyeball_verified: false,
                });
            }
        }

        for s in 0..spec.n_plr_sites {
            let c = rng.random_range(0..spec.n_countries);
            let coord = jitter(centers[c], 1.5, &mut rng);
            for r in 0..spec.plr_per_site {
                nodes.push(NodeRecord {
                    node_id: NodeId(format!("plr-{s:03}-{r:02}")),
                    asn: 30_000 + s as u32,
                    country: country_code(c),
                    role: Role::Relay,
                    relay_type: Some(RelayType::Plr),
                    coord,
                    facility_id: None,
                    site_id: Some(format!("site-{s:03}")),
                    eyeball_verified: false,
                });
            }
        }

        let n_eye = (spec.n_rar as f64 * spec.rar_eye_share).round() as usize;
        for i in 0..spec.n_rar {
            let c = rng.random_range(0..spec.n_countries);
            let eye = i < n_eye;
            nodes.push(NodeRecord {
                node_id: NodeId(format!("{}-{i:04}", if eye { "rye" } else { "ryo" })),
                asn: if eye {
                    eyeball_asn(c, rng.random_range(0..eyeball_ases_per_country))
                } else {
                    40_000 + i as u32
                },
                country: country_code(c),
                role: Role::Relay,
                relay_type: Some(if eye { RelayType::RarEye } else { RelayType::RarOther }),
                coord: jitter(centers[c], 2.0, &mut rng),
                facility_id: None,
                site_id: None,
                eyeball_verified: eye,
            });
        }

        let index = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.node_id.clone(), i))
            .collect();
        let mut world = World {
            spec: spec.clone(),
            nodes,
            coverage,
            facilities,
            truth: GroundTruth::default(),
            index,
            inflation: HashMap::new(),
            consts: PropagationConstants::default(),
        };
        world.assign_inflation()?;
        world.truth = world.compute_truth()?;
        Ok(world)
    }

    fn endpoints_idx(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].role == Role::Endpoint)
            .collect()
    }

    fn relays_idx(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].role == Role::Relay)
            .collect()
    }

    fn is_hub(&self, i: usize) -> bool {
        let n = &self.nodes[i];
        n.relay_type == Some(RelayType::Cor)
            && n.facility_id.is_some_and(|f| (f as usize) <= self.spec.n_hubs)
    }

    fn geo_rtt(&self, i: usize, j: usize) -> Result<f64> {
        Ok(2.0 * self.consts.delay_ms(&self.nodes[i].coord, &self.nodes[j].coord)?)
    }

    fn draw_inflation(&self, i: usize, j: usize) -> f64 {
        let (lo, hi) = (i.min(j), i.max(j));
        let key = if self.spec.inter_country_only {
            let (a, b) = (self.nodes[lo].country.as_str(), self.nodes[hi].country.as_str());
            if a == b {
                return 1.0;
            }
            let (a, b) = (country_key(a.min(b)), country_key(a.max(b)));
            [TAG_COUNTRY_INFLATION, a, b]
        } else {
            [TAG_INFLATION, lo as u64, hi as u64]
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.spec.seed, &key));
        let mut f = self.spec.inflation_dist.draw(&mut rng);
        if self.is_hub(lo) || self.is_hub(hi) {
            f = (f * self.spec.hub_bonus).max(1.0);
        }
        f
    }

    fn assign_inflation(&mut self) -> Result<()> {
        let eps = self.endpoints_idx();
        let relays = self.relays_idx();
        // In planted mode relay legs carry at least the margin, so unplanted
        // pairs on the geodesic lose to every relay by that much.
        let leg_floor = match self.spec.tiv_fraction {
            Some(_) => 1.0 + self.spec.tiv_margin,
            None => 1.0,
        };
        for &e in &eps {
            for &r in &relays {
                let f = self.draw_inflation(e, r).max(leg_floor);
                self.inflation.insert((e.min(r), e.max(r)), f);
            }
        }
        let mut pairs = Vec::new();
        for (k, &a) in eps.iter().enumerate() {
            for &b in &eps[k + 1..] {
                pairs.push((a, b));
            }
        }
        match self.spec.tiv_fraction {
            None => {
                for &(a, b) in &pairs {
                    let f = self.draw_inflation(a, b);
                    self.inflation.insert((a, b), f);
                }
            }
            Some(p) => {
                let mut order = pairs.clone();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.spec.seed, &[TAG_PLANT]));
                order.shuffle(&mut rng);
                let n_planted = (p * pairs.len() as f64).round() as usize;
                let planted: BTreeSet<(usize, usize)> = order[..n_planted].iter().copied().collect();
                let mut hubs: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
                for r in relays.iter().copied().filter(|&r| self.is_hub(r)) {
                    hubs.entry(self.nodes[r].facility_id.expect("hub is COR")).or_default().push(r);
                }
                for &(a, b) in &pairs {
                    let f = if planted.contains(&(a, b)) {
                        // beat the slowest relay of the best hub, with margin
                        let mut detour = f64::INFINITY;
                        for members in hubs.values() {
                            let mut worst: f64 = 0.0;
                            for &r in members {
                                worst = worst.max(self.link_base(a, r)? + self.link_base(b, r)?);
                            }
                            detour = detour.min(worst);
                        }
                        let required = detour * (1.0 + self.spec.tiv_margin) + 2.0 * TRUTH_FLOOR_MS;
                        let geo = self.geo_rtt(a, b)?.max(MIN_RTT_MS);
                        self.draw_inflation(a, b).max(required / geo)
                    } else {
                        1.0
                    };
                    self.inflation.insert((a, b), f);
                }
            }
        }
        Ok(())
    }

    fn link_base(&self, i: usize, j: usize) -> Result<f64> {
        let f = self
            .inflation
            .get(&(i.min(j), i.max(j)))
            .copied()
            .ok_or_else(|| Error::invalid(format!("no link between {} and {}", self.nodes[i].node_id, self.nodes[j].node_id)))?;
        Ok((self.geo_rtt(i, j)? * f).max(MIN_RTT_MS))
    }

    fn compute_truth(&self) -> Result<GroundTruth> {
        let eps = self.endpoints_idx();
        let relays = self.relays_idx();
        let planted_mode = self.spec.tiv_fraction.is_some();
        let mut pairs = Vec::new();
        for (k, &a) in eps.iter().enumerate() {
            for &b in &eps[k + 1..] {
                let base_rtt = self.link_base(a, b)?;
                let inflation = self.inflation[&(a, b)];
                let mut tiv_types = BTreeSet::new();
                for &r in &relays {
                    let detour = self.link_base(a, r)? + self.link_base(b, r)?;
                    if base_rtt - detour >= TRUTH_FLOOR_MS {
                        tiv_types.insert(self.nodes[r].relay_type.expect("relay"));
                    }
                }
                pairs.push(PairTruth {
                    pair: PairKey::new(self.nodes[a].node_id.clone(), self.nodes[b].node_id.clone())?,
                    base_rtt,
                    inflation,
                    planted: planted_mode && inflation > 1.0,
                    tiv_types,
                });
            }
        }
        pairs.sort_by(|x, y| x.pair.cmp(&y.pair));
        Ok(GroundTruth { pairs })
    }

    pub fn node(&self, id: &NodeId) -> Option<&NodeRecord> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn consts(&self) -> &PropagationConstants {
        &self.consts
    }

    pub fn round_start(&self, round_id: u32) -> DateTime<Utc> {
        self.spec.start_time + Duration::hours(self.spec.cadence_hours as i64 * round_id as i64)
    }

    /// Noiseless RTT of an endpoint-endpoint or endpoint-relay link.
    pub fn base_rtt(&self, a: &NodeId, b: &NodeId) -> Result<f64> {
        let (i, j) = self.indices(a, b)?;
        self.link_base(i, j)
    }

    fn indices(&self, a: &NodeId, b: &NodeId) -> Result<(usize, usize)> {
        let i = *self.index.get(a).ok_or_else(|| Error::invalid(format!("unknown node {a}")))?;
        let j = *self.index.get(b).ok_or_else(|| Error::invalid(format!("unknown node {b}")))?;
        if i == j {
            return Err(Error::invalid(format!("self-ping on {a}")));
        }
        Ok((i, j))
    }

    /// The six pings of one pair in one round. Values depend only on the
    /// unordered pair; `src`/`dst` are echoed as given.
    pub fn ping_series(&self, src: &NodeId, dst: &NodeId, round_id: u32) -> Result<Vec<RttSample>> {
        self.ping_slots(src, dst, round_id, SLOTS)
    }

    /// Like [`World::ping_series`] with `pings` slots; the first slots do
    /// not depend on how many follow.
    pub fn ping_slots(&self, src: &NodeId, dst: &NodeId, round_id: u32, pings: u8) -> Result<Vec<RttSample>> {
        let (i, j) = self.indices(src, dst)?;
        let base = self.link_base(i, j)?;
        let (lo, hi) = (i.min(j) as u64, i.max(j) as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.spec.seed,
            &[TAG_SAMPLE, round_id as u64, lo, hi],
        ));
        let drift = if self.spec.round_noise_sigma > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            (self.spec.round_noise_sigma * z).exp()
        } else {
            1.0
        };
        let mut out = Vec::with_capacity(pings as usize);
        for slot in 0..pings {
            let lost = self.spec.loss_prob > 0.0 && rng.random::<f64>() < self.spec.loss_prob;
            let jitter = if self.spec.noise_sigma > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                (self.spec.noise_sigma * z).exp()
            } else {
                1.0
            };
            out.push(RttSample {
                src: src.clone(),
                dst: dst.clone(),
                round_id,
                slot,
                rtt: if lost { Ping::Lost } else { Ping::Reply(base * drift * jitter) },
            });
        }
        Ok(out)
    }

    /// Every endpoint-endpoint and endpoint-relay series of one round,
    /// in canonical order with the smaller id as source.
    pub fn round_samples(&self, round_id: u32) -> Result<Vec<RttSample>> {
        let mut ids: Vec<&NodeId> = self.endpoints_idx().iter().map(|&i| &self.nodes[i].node_id).collect();
        ids.sort();
        let mut relay_ids: Vec<&NodeId> = self.relays_idx().iter().map(|&i| &self.nodes[i].node_id).collect();
        relay_ids.sort();
        let mut out = Vec::new();
        for (k, a) in ids.iter().enumerate() {
            for b in &ids[k + 1..] {
                out.extend(self.ping_series(a, b, round_id)?);
            }
        }
        for e in &ids {
            for r in &relay_ids {
                let (src, dst) = if e < r { (*e, *r) } else { (*r, *e) };
                out.extend(self.ping_series(src, dst, round_id)?);
            }
        }
        Ok(out)
    }

    pub fn samples(&self) -> Result<Vec<RttSample>> {
        let mut out = Vec::new();
        for r in 0..self.spec.n_rounds {
            out.extend(self.round_samples(r)?);
        }
        Ok(out)
    }

    /// Endpoint-endpoint pings of one round in the reverse direction, with
    /// a per-pair asymmetry factor `exp(asymmetry_sigma * z)`.
    pub fn reverse_samples(&self, round_id: u32) -> Result<Vec<RttSample>> {
        let forward: Vec<RttSample> = self
            .round_samples(round_id)?
            .into_iter()
            .filter(|s| self.node(&s.src).is_some_and(|n| n.role == Role::Endpoint)
                && self.node(&s.dst).is_some_and(|n| n.role == Role::Endpoint))
            .collect();
        let mut out = Vec::with_capacity(forward.len());
        for s in forward {
            let (i, j) = self.indices(&s.src, &s.dst)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                self.spec.seed,
                &[TAG_REVERSE, round_id as u64, i.min(j) as u64, i.max(j) as u64],
            ));
            let z: f64 = rng.sample(StandardNormal);
            let skew = (self.spec.asymmetry_sigma * z).exp();
            out.push(RttSample {
                src: s.dst,
                dst: s.src,
                round_id,
                slot: s.slot,
                rtt: match s.rtt {
                    Ping::Reply(ms) => Ping::Reply(ms * skew),
                    Ping::Lost => Ping::Lost,
                },
            });
        }
        Ok(out)
    }
}

/// Best stitched path per relay type for one (round, pair).
#[derive(Debug, Clone, PartialEq)]
pub struct OracleBest {
    pub relay: NodeId,
    pub stitched_rtt: f64,
}

pub type OracleKey = (u32, PairKey, RelayType);

/// Exhaustive reference for best relays: recomputes medians from the raw
/// samples, tests the fiber-delay feasibility bound for every relay of the
/// world, and keeps the minimum stitched sum per type (smaller id on ties).
pub fn oracle_best_paths(world: &World, samples: &[RttSample]) -> Result<BTreeMap<OracleKey, OracleBest>> {
    let mut raw: HashMap<(u32, PairKey), Vec<f64>> = HashMap::new();
    let mut seen: HashMap<(u32, PairKey), usize> = HashMap::new();
    for s in samples {
        let key = (s.round_id, s.pair()?);
        *seen.entry(key.clone()).or_default() += 1;
        if let Ping::Reply(ms) = s.rtt {
            raw.entry(key).or_default().push(ms);
        }
    }
    let medians: HashMap<(u32, PairKey), f64> = raw
        .into_iter()
        .filter(|(_, v)| v.len() >= 3)
        .map(|(k, mut v)| {
            let m = median_of(&mut v).expect("non-empty");
            (k, m)
        })
        .collect();

    let consts = world.consts();
    let endpoints: Vec<&NodeRecord> = world.nodes.iter().filter(|n| n.role == Role::Endpoint).collect();
    let relays: Vec<&NodeRecord> = world.nodes.iter().filter(|n| n.role == Role::Relay).collect();
    let rounds: BTreeSet<u32> = seen.keys().map(|(r, _)| *r).collect();

    let mut out = BTreeMap::new();
    for &round in &rounds {
        for (k, a) in endpoints.iter().enumerate() {
            for b in &endpoints[k + 1..] {
                let pair = PairKey::new(a.node_id.clone(), b.node_id.clone())?;
                let Some(&direct) = medians.get(&(round, pair.clone())) else {
                    continue;
                };
                for f in &relays {
                    let bound = 2.0 * (consts.delay_ms(&a.coord, &f.coord)? + consts.delay_ms(&f.coord, &b.coord)?);
                    if bound > direct {
                        continue;
                    }
                    let ma = medians.get(&(round, PairKey::new(a.node_id.clone(), f.node_id.clone())?));
                    let mb = medians.get(&(round, PairKey::new(b.node_id.clone(), f.node_id.clone())?));
                    let (Some(ma), Some(mb)) = (ma, mb) else { continue };
                    let stitched = ma + mb;
                    let key = (round, pair.clone(), f.relay_type.expect("relay"));
                    let better = match out.get(&key) {
                        None => true,
                        Some(OracleBest { relay, stitched_rtt }) => {
                            stitched < *stitched_rtt || (stitched == *stitched_rtt && f.node_id < *relay)
                        }
                    };
                    if better {
                        out.insert(key, OracleBest { relay: f.node_id.clone(), stitched_rtt: stitched });
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> WorldSpec {
        WorldSpec {
            n_facilities: 4,
            relays_per_facility: 2,
            n_plr_sites: 3,
            n_rar: 6,
            n_hubs: 1,
            hub_bonus: 0.6,
            noise_sigma: 0.03,
            loss_prob: 0.1,
            n_rounds: 2,
            ..WorldSpec::minimal(11, 6)
        }
    }

    #[test]
    fn rejects_degenerate_specs() {
        let mut s = WorldSpec::minimal(1, 3);
        s.endpoints_per_country = 0;
        assert!(matches!(World::generate(&s), Err(Error::InvalidSpec(_))));
        let mut s = WorldSpec::minimal(1, 3);
        s.loss_prob = 1.0;
        assert!(World::generate(&s).is_err());
        let mut s = WorldSpec::minimal(1, 3);
        s.tiv_fraction = Some(0.5);
        assert!(World::generate(&s).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = World::generate(&spec()).unwrap();
        let b = World::generate(&spec()).unwrap();
        assert_eq!(a.nodes, b.nodes);
        assert_eq!(a.samples().unwrap(), b.samples().unwrap());
        let mut other = spec();
        other.seed = 12;
        assert_ne!(World::generate(&other).unwrap().samples().unwrap(), a.samples().unwrap());
    }

    #[test]
    fn inventory_is_valid() {
        let w = World::generate(&spec()).unwrap();
        for n in &w.nodes {
            n.validate().unwrap();
        }
        assert_eq!(w.nodes.iter().filter(|n| n.role == Role::Endpoint).count(), 6);
        assert_eq!(w.facilities.len(), 4);
    }

    #[test]
    fn pure_metric_world_is_exact_and_has_no_tivs() {
        let s = WorldSpec {
            inflation_dist: InflationDist::Constant { factor: 1.0 },
            n_facilities: 5,
            relays_per_facility: 2,
            n_plr_sites: 4,
            n_rar: 10,
            ..WorldSpec::minimal(5, 10)
        };
        let w = World::generate(&s).unwrap();
        for smp in w.samples().unwrap() {
            let (i, j) = w.indices(&smp.src, &smp.dst).unwrap();
            assert_eq!(smp.rtt, Ping::Reply(w.geo_rtt(i, j).unwrap().max(MIN_RTT_MS)));
        }
        assert!(w.truth.pairs.iter().all(|p| p.tiv_types.is_empty()));
    }

    #[test]
    fn hub_discount_beats_inflated_direct() {
        // two far endpoints, one hub relay halfway, direct inflation 2.0
        let mut s = WorldSpec {
            inflation_dist: InflationDist::Constant { factor: 2.0 },
            n_facilities: 1,
            relays_per_facility: 1,
            n_hubs: 1,
            hub_bonus: 0.5,
            ..WorldSpec::minimal(3, 2)
        };
        let mut w = World::generate(&s).unwrap();
        // place the nodes by hand and recompute
        w.nodes[0].coord = GeoCoord { lat: 0.0, lon: -40.0 };
        w.nodes[1].coord = GeoCoord { lat: 0.0, lon: 40.0 };
        w.nodes[2].coord = GeoCoord { lat: 0.0, lon: 0.0 };
        w.inflation.clear();
        w.assign_inflation().unwrap();
        w.truth = w.compute_truth().unwrap();
        let geo = w.geo_rtt(0, 1).unwrap();
        assert_eq!(w.link_base(0, 1).unwrap(), 2.0 * geo);
        // hub links: max(1, 2.0 * 0.5) = 1
        let detour = w.link_base(0, 2).unwrap() + w.link_base(1, 2).unwrap();
        assert!((detour - geo).abs() < 1e-9);
        assert_eq!(w.truth.pairs[0].tiv_types, BTreeSet::from([RelayType::Cor]));

        s.hub_bonus = 1.0;
        let mut w = World::generate(&s).unwrap();
        w.nodes[0].coord = GeoCoord { lat: 0.0, lon: -40.0 };
        w.nodes[1].coord = GeoCoord { lat: 0.0, lon: 40.0 };
        w.nodes[2].coord = GeoCoord { lat: 0.0, lon: 0.0 };
        w.inflation.clear();
        w.assign_inflation().unwrap();
        w.truth = w.compute_truth().unwrap();
        assert!(w.truth.pairs[0].tiv_types.is_empty());
    }

    #[test]
    fn noiseless_samples_respect_physical_floor() {
        let mut s = spec();
        s.noise_sigma = 0.0;
        s.loss_prob = 0.0;
        let w = World::generate(&s).unwrap();
        for smp in w.samples().unwrap() {
            let (i, j) = w.indices(&smp.src, &smp.dst).unwrap();
            assert!(smp.rtt.rtt().unwrap() >= w.geo_rtt(i, j).unwrap());
        }
    }

    #[test]
    fn planted_truth_is_sound() {
        let s = WorldSpec {
            n_facilities: 3,
            relays_per_facility: 2,
            n_hubs: 1,
            hub_bonus: 0.5,
            tiv_fraction: Some(0.4),
            ..WorldSpec::minimal(21, 10)
        };
        let w = World::generate(&s).unwrap();
        assert_eq!(w.truth.pairs.len(), 45);
        assert_eq!(w.truth.pairs.iter().filter(|p| p.planted).count(), 18);
        for p in &w.truth.pairs {
            assert_eq!(p.planted, p.tiv_types.contains(&RelayType::Cor), "{}", p.pair);
            // every flagged type has a relay that improves in noiseless replay
            for t in &p.tiv_types {
                let improving = w.nodes.iter().filter(|n| n.is_relay_of(*t)).any(|r| {
                    let d = w.base_rtt(p.pair.first(), &r.node_id).unwrap()
                        + w.base_rtt(p.pair.second(), &r.node_id).unwrap();
                    p.base_rtt - d > 0.0
                });
                assert!(improving);
            }
        }
    }

    #[test]
    fn spec_json_defaults() {
        let s: WorldSpec = serde_json::from_str(r#"{"seed":1,"n_countries":4,"endpoints_per_country":1}"#).unwrap();
        assert_eq!(s.n_rounds, 1);
        assert_eq!(s.hub_bonus, 1.0);
        World::generate(&s).unwrap();
    }
}
