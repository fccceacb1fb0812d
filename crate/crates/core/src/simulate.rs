//! Closed-form ground-truth kernels and Ogata thinning simulation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, EventSequence};
use crate::exec::{map_indexed, Parallelism};
use crate::graph::{scaled_laplacian, Graph};
use crate::matrix::SquareMatrix;
use crate::model::InfluenceModel;

/// Horizon shared by the synthetic benchmarks.
pub const DEFAULT_HORIZON: f64 = 50.0;

/// Influence of the closed-form kernels is ignored beyond this lag
/// (`e^{-2 lag}` is about `1e-7` there).
pub const TRUTH_MAX_LAG: f64 = 8.0;

/// Lag below which the `1/(8 pi s)` factor of the diffusion kernel is
/// frozen; it is not integrable at zero.
pub const DIFFUSION_MIN_LAG: f64 = 0.1;

/// Centers of the three Gaussian modes of the 50-node kernel; the same
/// nodes are joined by chords.
pub const RING50_CENTERS: [usize; 3] = [8, 25, 41];

const RING50_MATRIX: &str = include_str!("../data/gt50_gaussian_ring.csv");
const RING50_NOISE_SEED: u64 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruthKind {
    Gt3Negative,
    Gt16Twohop,
    Gt50GaussianRing,
    Gt50Diffusion,
    Gt225,
}

impl GroundTruthKind {
    pub const ALL: [GroundTruthKind; 5] = [
        GroundTruthKind::Gt3Negative,
        GroundTruthKind::Gt16Twohop,
        GroundTruthKind::Gt50GaussianRing,
        GroundTruthKind::Gt50Diffusion,
        GroundTruthKind::Gt225,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GroundTruthKind::Gt3Negative => "gt3_negative",
            GroundTruthKind::Gt16Twohop => "gt16_twohop",
            GroundTruthKind::Gt50GaussianRing => "gt50_gaussian_ring",
            GroundTruthKind::Gt50Diffusion => "gt50_diffusion",
            GroundTruthKind::Gt225 => "gt225",
        }
    }

    /// Background rate (shared by all nodes) tuned so that sequences on
    /// `[0, 50]` have the benchmark's average length.
    pub fn default_mu(self) -> f64 {
        match self {
            GroundTruthKind::Gt3Negative => 0.3,
            GroundTruthKind::Gt16Twohop => 0.1,
            GroundTruthKind::Gt50GaussianRing => 0.089,
            GroundTruthKind::Gt50Diffusion => 0.18,
            GroundTruthKind::Gt225 => 0.01445,
        }
    }

    /// Benchmark average sequence length.
    pub fn reference_length(self) -> f64 {
        match self {
            GroundTruthKind::Gt3Negative => 50.9,
            GroundTruthKind::Gt16Twohop => 105.8,
            GroundTruthKind::Gt50GaussianRing => 386.8,
            GroundTruthKind::Gt50Diffusion => 558.1,
            GroundTruthKind::Gt225 => 498.3,
        }
    }
}

impl std::str::FromStr for GroundTruthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GroundTruthKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ground-truth kind `{s}`")))
    }
}

/// Serializable description of a ground truth (kind plus overrides).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSpec {
    pub kind: GroundTruthKind,
    pub mu: f64,
    pub horizon: f64,
}

impl GroundTruthSpec {
    pub fn new(kind: GroundTruthKind) -> Self {
        Self {
            kind,
            mu: kind.default_mu(),
            horizon: DEFAULT_HORIZON,
        }
    }

    pub fn build(&self) -> Result<GroundTruthKernel> {
        GroundTruthKernel::new(*self)
    }
}

#[derive(Debug, Clone)]
enum Spatial {
    /// `temporal(t', lag) * M(v', v)`.
    Separable(SquareMatrix),
    /// Hop distances for the diffusion kernel and their maximum.
    Diffusion(Vec<Vec<usize>>, usize),
}

#[derive(Debug, Clone)]
pub struct GroundTruthKernel {
    spec: GroundTruthSpec,
    graph: Graph,
    spatial: Spatial,
    /// Per source node, `sum_v max(M(v', v), 0)` (separable kinds).
    positive_row_sums: Vec<f64>,
}

pub fn ground_truth(kind: GroundTruthKind) -> Result<GroundTruthKernel> {
    GroundTruthSpec::new(kind).build()
}

pub fn ring50_graph() -> Result<Graph> {
    let mut edges: Vec<(usize, usize)> = (0..50).map(|v| (v, (v + 1) % 50)).collect();
    let c = RING50_CENTERS;
    edges.extend([(c[0], c[1]), (c[1], c[2]), (c[2], c[0])]);
    Graph::new(50, &edges)
}

fn ring_distance(a: usize, b: usize, n: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(n - d)
}

/// Regenerates the 50-node Gaussian-ring influence matrix: three Gaussian
/// bumps (height 0.5, width 3 nodes) on the diagonal, 0.05 between ring
/// neighbours, and 0.1 plus seeded uniform(0, 0.05) noise on the chords.
pub fn generate_ring50_matrix() -> SquareMatrix {
    let n = 50;
    let mut m = SquareMatrix::zeros(n);
    for v in 0..n {
        let bump: f64 = RING50_CENTERS
            .iter()
            .map(|&c| {
                let d = ring_distance(v, c, n) as f64;
                (-d * d / (2.0 * 9.0)).exp()
            })
            .sum();
        m.set(v, v, 0.5 * bump);
        m.set(v, (v + 1) % n, 0.05);
        m.set(v, (v + n - 1) % n, 0.05);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(RING50_NOISE_SEED);
    for &a in &RING50_CENTERS {
        for &b in &RING50_CENTERS {
            if a != b {
                m.set(a, b, 0.1 + rng.gen_range(0.0..0.05));
            }
        }
    }
    m
}

pub fn matrix_to_csv(m: &SquareMatrix) -> String {
    let mut out = String::new();
    for i in 0..m.dim() {
        let row: Vec<String> = m.row(i).iter().map(|x| format!("{x:.17e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(text: &str) -> Result<SquareMatrix> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            line.split(',')
                .map(|x| {
                    x.trim().parse::<f64>().map_err(|e| Error::Parse {
                        line: i as u64 + 1,
                        message: e.to_string(),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("matrix CSV is not square"));
    }
    Ok(SquareMatrix::from_row_major(n, rows.concat()))
}

pub fn ring50_matrix() -> Result<SquareMatrix> {
    matrix_from_csv(RING50_MATRIX)
}

impl GroundTruthKernel {
    pub fn new(spec: GroundTruthSpec) -> Result<Self> {
        if !(spec.mu > 0.0) {
            return Err(Error::invalid(format!("background rate must be positive, got {}", spec.mu)));
        }
        if !(spec.horizon > 0.0) {
            return Err(Error::invalid("horizon must be positive"));
        }
        let (graph, spatial) = match spec.kind {
            GroundTruthKind::Gt3Negative => {
                let g = Graph::path(3)?;
                let mut m = SquareMatrix::zeros(3);
                for (v, d) in [0.5, 0.7, 0.5].into_iter().enumerate() {
                    m.set(v, v, 0.5 * d);
                }
                m.add_at(1, 0, 0.2 * -0.2);
                m.add_at(1, 2, 0.2 * 0.4);
                (g, Spatial::Separable(m))
            }
            GroundTruthKind::Gt16Twohop => {
                let g = Graph::ring(16)?;
                let lt = scaled_laplacian(&g)?.scaled_laplacian;
                let mut cheb2 = lt.matmul(&lt).scaled(2.0);
                cheb2.axpy(-1.0, &SquareMatrix::identity(16));
                let mut m = SquareMatrix::identity(16).scaled(0.2);
                m.axpy(-0.3, &lt);
                m.axpy(0.1, &cheb2);
                (g, Spatial::Separable(m))
            }
            GroundTruthKind::Gt50GaussianRing => (ring50_graph()?, Spatial::Separable(ring50_matrix()?)),
            GroundTruthKind::Gt50Diffusion => {
                let g = ring50_graph()?;
                let hops = g.hop_distances();
                let max_hop = hops.iter().flatten().copied().max().unwrap_or(0);
                (g, Spatial::Diffusion(hops, max_hop))
            }
            GroundTruthKind::Gt225 => {
                let g = Graph::lattice(15, 15)?;
                let mut m = g.adjacency_matrix().scaled(0.1);
                m.axpy(0.3, &SquareMatrix::identity(225));
                (g, Spatial::Separable(m))
            }
        };
        let positive_row_sums = match &spatial {
            Spatial::Separable(m) => (0..m.dim())
                .map(|v| m.row(v).iter().map(|x| x.max(0.0)).sum())
                .collect(),
            Spatial::Diffusion(..) => Vec::new(),
        };
        Ok(Self {
            spec,
            graph,
            spatial,
            positive_row_sums,
        })
    }

    pub fn spec(&self) -> GroundTruthSpec {
        self.spec
    }

    pub fn kind(&self) -> GroundTruthKind {
        self.spec.kind
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn mu(&self) -> f64 {
        self.spec.mu
    }

    pub fn horizon(&self) -> f64 {
        self.spec.horizon
    }

    /// Spatial matrix of separable kinds.
    pub fn spatial_matrix(&self) -> Option<&SquareMatrix> {
        match &self.spatial {
            Spatial::Separable(m) => Some(m),
            Spatial::Diffusion(..) => None,
        }
    }

    /// Temporal factor of separable kinds.
    pub fn temporal(&self, t_prime: f64, lag: f64) -> f64 {
        match self.spec.kind {
            GroundTruthKind::Gt3Negative | GroundTruthKind::Gt16Twohop => {
                1.5 * (0.5 + 0.5 * (0.2 * t_prime).cos()) * (-2.0 * lag).exp()
            }
            _ => 2.0 * (-2.0 * lag).exp(),
        }
    }

    /// Kernel matrix at `(t', t' + lag)`.
    pub fn kernel_matrix(&self, t_prime: f64, lag: f64) -> SquareMatrix {
        let n = self.graph.num_nodes();
        SquareMatrix::from_fn(n, |a, b| self.kernel(t_prime, t_prime + lag, a, b))
    }
}

/// Spatial part of the diffusion kernel with the `1/(8 pi s)` prefactor
/// frozen below [`DIFFUSION_MIN_LAG`].
fn diffusion_spatial(lag: f64, hops: usize) -> f64 {
    let gauss = if hops == 0 {
        1.0
    } else {
        (-((hops * hops) as f64) / (8.0 * lag)).exp()
    };
    gauss / (8.0 * std::f64::consts::PI * lag.max(DIFFUSION_MIN_LAG))
}

/// `sup_{s >= s0} diffusion_spatial(s, d)`: the profile increases up to
/// `max(d^2 / 8, DIFFUSION_MIN_LAG)` and decreases afterwards.
fn diffusion_spatial_sup(s0: f64, hops: usize) -> f64 {
    let peak = ((hops * hops) as f64 / 8.0).max(DIFFUSION_MIN_LAG);
    diffusion_spatial(peak.max(s0), hops)
}

impl InfluenceModel for GroundTruthKernel {
    fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    fn background(&self) -> Vec<f64> {
        vec![self.spec.mu; self.graph.num_nodes()]
    }

    fn max_lag(&self) -> f64 {
        TRUTH_MAX_LAG
    }

    fn kernel(&self, t_prime: f64, t: f64, v_prime: usize, v: usize) -> f64 {
        let lag = t - t_prime;
        if lag > TRUTH_MAX_LAG {
            return 0.0;
        }
        match &self.spatial {
            Spatial::Separable(m) => self.temporal(t_prime, lag) * m.get(v_prime, v),
            Spatial::Diffusion(hops, _) => (-2.0 * lag).exp() * diffusion_spatial(lag, hops[v_prime][v]),
        }
    }

    fn add_influence(&self, t_prime: f64, t: f64, v_prime: usize, out: &mut [f64]) {
        let lag = t - t_prime;
        if lag > TRUTH_MAX_LAG {
            return;
        }
        match &self.spatial {
            Spatial::Separable(m) => {
                let c = self.temporal(t_prime, lag);
                for (o, x) in out.iter_mut().zip(m.row(v_prime)) {
                    *o += c * x;
                }
            }
            Spatial::Diffusion(hops, max_hop) => {
                let decay = (-2.0 * lag).exp();
                let by_hop: Vec<f64> = (0..=*max_hop).map(|h| decay * diffusion_spatial(lag, h)).collect();
                for (o, &h) in out.iter_mut().zip(&hops[v_prime]) {
                    *o += by_hop[h];
                }
            }
        }
    }

    fn positive_influence_bound(&self, t_prime: f64, v_prime: usize, min_lag: f64) -> f64 {
        let lag = min_lag.max(0.0);
        if lag > TRUTH_MAX_LAG {
            return 0.0;
        }
        match &self.spatial {
            Spatial::Separable(_) => self.temporal(t_prime, lag) * self.positive_row_sums[v_prime],
            Spatial::Diffusion(hops, max_hop) => {
                let by_hop: Vec<f64> = (0..=*max_hop).map(|h| diffusion_spatial_sup(lag, h)).collect();
                (-2.0 * lag).exp() * hops[v_prime].iter().map(|&h| by_hop[h]).sum::<f64>()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundRefresh {
    /// Recompute the thinning bound after every candidate.
    #[default]
    EveryCandidate,
    /// Recompute only after accepted events.
    AcceptedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub num_sequences: usize,
    pub horizon: f64,
    pub seed: u64,
    pub refresh: BoundRefresh,
    /// Clamp negative intensities to zero; otherwise they are an error.
    pub clamp_negative: bool,
    #[serde(skip)]
    pub parallelism: Parallelism,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_sequences: 1000,
            horizon: DEFAULT_HORIZON,
            seed: 0,
            refresh: BoundRefresh::EveryCandidate,
            clamp_negative: true,
            parallelism: Parallelism::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub sequences: Vec<EventSequence>,
    pub candidates: u64,
    /// Candidates at which the total clamped intensity exceeded the bound.
    pub violations: u64,
}

impl Simulation {
    pub fn mean_length(&self) -> f64 {
        if self.sequences.is_empty() {
            return 0.0;
        }
        self.sequences.iter().map(|s| s.len() as f64).sum::<f64>() / self.sequences.len() as f64
    }
}

/// Deterministic per-sequence generator: the run seed with the sequence
/// index as stream.
pub fn sequence_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

struct SeqStats {
    candidates: u64,
    violations: u64,
}

fn thinning_bound<M: InfluenceModel + ?Sized>(source: &M, mu_total: f64, t: f64, history: &[Event]) -> f64 {
    let max_lag = source.max_lag();
    let mut bound = mu_total;
    for e in history.iter().rev() {
        if t - e.t > max_lag {
            break;
        }
        bound += source.positive_influence_bound(e.t, e.node, t - e.t);
    }
    bound
}

fn simulate_one<M: InfluenceModel + ?Sized>(
    source: &M,
    cfg: &SimConfig,
    index: usize,
) -> Result<(EventSequence, SeqStats)> {
    let mut rng = sequence_rng(cfg.seed, index);
    let n = source.num_nodes();
    let mu_total: f64 = source.background().iter().map(|m| m.max(0.0)).sum();
    let mut history: Vec<Event> = Vec::new();
    let mut lam = vec![0.0; n];
    let mut stats = SeqStats {
        candidates: 0,
        violations: 0,
    };
    let mut t = 0.0;
    let mut bound = thinning_bound(source, mu_total, t, &history);
    loop {
        if !(bound > 0.0) {
            break;
        }
        let wait: f64 = rng.sample::<f64, _>(Exp1) / bound;
        t += wait;
        if t > cfg.horizon {
            break;
        }
        stats.candidates += 1;
        source.intensities(t, &history, &mut lam);
        if !cfg.clamp_negative {
            if let Some((v, &x)) = lam.iter().enumerate().find(|(_, &x)| x < 0.0) {
                return Err(Error::NegativeIntensity { t, node: v, value: x });
            }
        }
        let total: f64 = lam.iter().map(|x| x.max(0.0)).sum();
        if total > bound * (1.0 + 1e-12) {
            stats.violations += 1;
        }
        let u: f64 = rng.gen();
        let accepted = u * bound <= total && total > 0.0;
        if accepted {
            let mut pick = rng.gen::<f64>() * total;
            let mut node = n - 1;
            for (v, &x) in lam.iter().enumerate() {
                let x = x.max(0.0);
                if pick < x {
                    node = v;
                    break;
                }
                pick -= x;
            }
            if history.last().map_or(true, |e| e.t < t) {
                history.push(Event { t, node });
            }
        }
        if accepted || cfg.refresh == BoundRefresh::EveryCandidate {
            bound = thinning_bound(source, mu_total, t, &history);
        }
    }
    Ok((EventSequence::new(cfg.horizon, history)?, stats))
}

/// Simulates `cfg.num_sequences` sequences by thinning with the clamped
/// intensity `max(lambda, 0)`.
pub fn thinning_simulate<M: InfluenceModel + ?Sized>(source: &M, cfg: &SimConfig) -> Result<Simulation> {
    if source.background().iter().any(|&m| !(m > 0.0)) {
        return Err(Error::invalid("background intensity must be positive"));
    }
    if !(cfg.horizon > 0.0) {
        return Err(Error::invalid("horizon must be positive"));
    }
    let results = map_indexed(cfg.num_sequences, cfg.parallelism, |s| simulate_one(source, cfg, s));
    let mut sim = Simulation {
        sequences: Vec::with_capacity(cfg.num_sequences),
        candidates: 0,
        violations: 0,
    };
    for r in results {
        let (seq, stats) = r?;
        sim.sequences.push(seq);
        sim.candidates += stats.candidates;
        sim.violations += stats.violations;
    }
    Ok(sim)
}
