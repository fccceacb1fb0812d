//! The low-rank influence kernel
//! `k(t', t, v', v) = sum_{r,l} alpha_rl psi_l(t') phi_l(t - t') B_r(v', v)`
//! and the conditional intensity it induces.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{sigmoid, softplus, GridConfig, ScalarNet, TemporalGrid, DEFAULT_HIDDEN};
use crate::error::{Error, Result};
use crate::events::Event;
use crate::filters::{chebyshev_bank, gat_bank, l3net_bank, FilterBank, FilterMode, GatSupport};
use crate::graph::{khop_index, scaled_laplacian, Graph};
use crate::matrix::SquareMatrix;

/// Shared interface of learned and closed-form kernels, used by the
/// simulator and the evaluation metrics.
pub trait InfluenceModel: Sync {
    fn num_nodes(&self) -> usize;

    fn background(&self) -> Vec<f64>;

    /// Lags beyond this contribute nothing.
    fn max_lag(&self) -> f64;

    /// `k(t', t, v', v)`. Callers guarantee `t >= t'`.
    fn kernel(&self, t_prime: f64, t: f64, v_prime: usize, v: usize) -> f64;

    /// Adds `k(t', t, v', v)` for every target `v` into `out`.
    fn add_influence(&self, t_prime: f64, t: f64, v_prime: usize, out: &mut [f64]) {
        for (v, o) in out.iter_mut().enumerate() {
            *o += self.kernel(t_prime, t, v_prime, v);
        }
    }

    /// Upper bound on `sum_v max(k(t', t, v', v), 0)` over all
    /// `t >= t' + min_lag`.
    fn positive_influence_bound(&self, t_prime: f64, v_prime: usize, min_lag: f64) -> f64;

    /// `lambda(t, v)` for every node; `history` holds the events before `t`.
    fn intensities(&self, t: f64, history: &[Event], out: &mut [f64]) {
        out.copy_from_slice(&self.background());
        let max_lag = self.max_lag();
        for e in history.iter().rev() {
            if t - e.t > max_lag {
                break;
            }
            self.add_influence(e.t, t, e.node, out);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuMode {
    /// One background rate shared by every node.
    Tied,
    #[default]
    PerNode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub mode: FilterMode,
    /// Number of filters for `chebyshev` and `gat`.
    pub num_filters: usize,
    /// Hop order per filter for `l3net`.
    pub orders: Vec<usize>,
    pub gat_support: GatSupport,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            mode: FilterMode::L3net,
            num_filters: 2,
            orders: vec![0, 1],
            gat_support: GatSupport::OneHop,
        }
    }
}

impl FilterConfig {
    pub fn num_filters(&self) -> usize {
        match self.mode {
            FilterMode::L3net => self.orders.len(),
            _ => self.num_filters,
        }
    }

    pub fn build<R: Rng + ?Sized>(&self, graph: &Graph, rng: &mut R) -> Result<FilterBank> {
        match self.mode {
            FilterMode::Chebyshev => chebyshev_bank(&scaled_laplacian(graph)?, self.num_filters),
            FilterMode::L3net => {
                let max = self.orders.iter().copied().max().unwrap_or(0);
                l3net_bank(&khop_index(graph, max), &self.orders, rng)
            }
            FilterMode::Gat => gat_bank(&khop_index(graph, 1), self.num_filters, self.gat_support),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Temporal rank `L`.
    pub num_basis: usize,
    pub hidden: usize,
    pub mu_mode: MuMode,
    pub filter: FilterConfig,
    /// Interpolation grid intervals per unit time.
    pub grid_density: f64,
    /// Explicit interpolation grid size; overrides `grid_density`.
    pub grid_points: Option<usize>,
    /// Truncation lag; defaults to the horizon.
    pub tau_max: Option<f64>,
    /// Barrier grid size as a multiple of the interpolation grid.
    pub barrier_factor: usize,
    /// `alpha` entries start uniform on `[-s, s]`.
    pub alpha_init: f64,
    pub mu_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_basis: 1,
            hidden: DEFAULT_HIDDEN,
            mu_mode: MuMode::PerNode,
            filter: FilterConfig::default(),
            grid_density: 100.0,
            grid_points: None,
            tau_max: None,
            barrier_factor: 2,
            alpha_init: 0.1,
            mu_init: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: field.into(),
                message: message.into(),
            })
        };
        if self.num_basis == 0 {
            return bad("num_basis", "must be at least 1");
        }
        if self.hidden == 0 {
            return bad("hidden", "must be at least 1");
        }
        if self.filter.num_filters() == 0 {
            return bad("filter", "needs at least one filter");
        }
        if !(self.grid_density > 0.0) {
            return bad("grid_density", "must be positive");
        }
        if self.grid_points.is_some_and(|g| g < 2) {
            return bad("grid_points", "must be at least 2");
        }
        if self.tau_max.is_some_and(|t| !(t > 0.0)) {
            return bad("tau_max", "must be positive");
        }
        if self.barrier_factor == 0 {
            return bad("barrier_factor", "must be at least 1");
        }
        if !(self.mu_init > 0.0) {
            return bad("mu_init", "must be positive");
        }
        Ok(())
    }

    pub fn grid_config(&self, horizon: f64) -> Result<GridConfig> {
        let points = self
            .grid_points
            .unwrap_or_else(|| (self.grid_density * horizon).ceil() as usize + 1);
        let tau_max = self.tau_max.unwrap_or(horizon).min(horizon);
        GridConfig::new(horizon, points, tau_max)
    }
}

/// Where each parameter block lives in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub alpha: std::ops::Range<usize>,
    pub mu: std::ops::Range<usize>,
    pub psi: Vec<std::ops::Range<usize>>,
    pub phi: Vec<std::ops::Range<usize>>,
    pub filters: std::ops::Range<usize>,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.filters.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Named blocks in vector order.
    pub fn blocks(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut out = vec![
            ("alpha".to_string(), self.alpha.clone()),
            ("mu".to_string(), self.mu.clone()),
        ];
        for (l, r) in self.psi.iter().enumerate() {
            out.push((format!("psi{l}"), r.clone()));
        }
        for (l, r) in self.phi.iter().enumerate() {
            out.push((format!("phi{l}"), r.clone()));
        }
        if !self.filters.is_empty() {
            out.push(("filters".to_string(), self.filters.clone()));
        }
        out
    }
}

/// Serializable state of a [`KernelModel`] (everything but caches).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub graph: Graph,
    pub num_basis: usize,
    /// `R x L`, row-major.
    pub alpha: Vec<f64>,
    pub mu_mode: MuMode,
    /// Softplus pre-images of the background rates.
    pub mu_raw: Vec<f64>,
    pub psi_nets: Vec<ScalarNet>,
    pub phi_nets: Vec<ScalarNet>,
    pub bank: FilterBank,
    pub grid: GridConfig,
    pub barrier_points: usize,
}

/// Entry of [`KernelModel::rank_report`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankEntry {
    pub filter: usize,
    pub basis: usize,
    pub alpha: f64,
    pub magnitude: f64,
    pub discardable: bool,
}

#[derive(Debug, Clone)]
pub struct KernelModel {
    state: ModelState,
    filters: Vec<SquareMatrix>,
    /// `M_l = sum_r alpha_rl B_r`.
    mixed: Vec<SquareMatrix>,
    mu: Vec<f64>,
    grid: TemporalGrid,
}

pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

impl KernelModel {
    pub fn new<R: Rng + ?Sized>(
        graph: &Graph,
        cfg: &ModelConfig,
        horizon: f64,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid_config(horizon)?;
        let bank = cfg.filter.build(graph, rng)?;
        let l = cfg.num_basis;
        let r = bank.num_filters();
        let alpha = (0..r * l)
            .map(|_| {
                if cfg.alpha_init > 0.0 {
                    rng.gen_range(-cfg.alpha_init..cfg.alpha_init)
                } else {
                    0.0
                }
            })
            .collect();
        let psi_nets = (0..l)
            .map(|_| ScalarNet::random(cfg.hidden, 1.0 / horizon, rng))
            .collect();
        let phi_nets = (0..l)
            .map(|_| ScalarNet::random(cfg.hidden, 1.0 / grid.tau_max, rng))
            .collect();
        let mu_len = match cfg.mu_mode {
            MuMode::Tied => 1,
            MuMode::PerNode => graph.num_nodes(),
        };
        let state = ModelState {
            graph: graph.clone(),
            num_basis: l,
            alpha,
            mu_mode: cfg.mu_mode,
            mu_raw: vec![inverse_softplus(cfg.mu_init); mu_len],
            psi_nets,
            phi_nets,
            bank,
            grid,
            barrier_points: cfg.barrier_factor * grid.points,
        };
        Self::from_state(state)
    }

    pub fn from_state(state: ModelState) -> Result<Self> {
        let n = state.graph.num_nodes();
        let l = state.num_basis;
        let r = state.bank.num_filters();
        if state.bank.num_nodes() != n {
            return Err(Error::invalid("filter bank and graph disagree on node count"));
        }
        if state.alpha.len() != r * l {
            return Err(Error::invalid(format!(
                "alpha has {} entries, expected {r} x {l}",
                state.alpha.len()
            )));
        }
        if state.psi_nets.len() != l || state.phi_nets.len() != l {
            return Err(Error::invalid("one psi and one phi network per basis required"));
        }
        let mu_len = match state.mu_mode {
            MuMode::Tied => 1,
            MuMode::PerNode => n,
        };
        if state.mu_raw.len() != mu_len {
            return Err(Error::invalid("background parameter count mismatch"));
        }
        if state.barrier_points < 2 {
            return Err(Error::invalid("barrier grid needs at least 2 points"));
        }
        let grid = TemporalGrid::build(&state.phi_nets, state.grid)?;
        let mut model = Self {
            state,
            filters: Vec::new(),
            mixed: Vec::new(),
            mu: Vec::new(),
            grid,
        };
        model.refresh_linear();
        Ok(model)
    }

    /// Recomputes `B_r`, `M_l` and `mu` from the state.
    fn refresh_linear(&mut self) {
        let n = self.num_nodes();
        self.filters = self.state.bank.materialize();
        let l_count = self.state.num_basis;
        self.mixed = (0..l_count)
            .map(|l| {
                let mut m = SquareMatrix::zeros(n);
                for (r, b) in self.filters.iter().enumerate() {
                    m.axpy(self.state.alpha[r * l_count + l], b);
                }
                m
            })
            .collect();
        self.mu = match self.state.mu_mode {
            MuMode::Tied => vec![softplus(self.state.mu_raw[0]); n],
            MuMode::PerNode => self.state.mu_raw.iter().map(|&x| softplus(x)).collect(),
        };
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn into_state(self) -> ModelState {
        self.state
    }

    pub fn graph(&self) -> &Graph {
        &self.state.graph
    }

    pub fn num_basis(&self) -> usize {
        self.state.num_basis
    }

    pub fn num_filters(&self) -> usize {
        self.state.bank.num_filters()
    }

    pub fn horizon(&self) -> f64 {
        self.state.grid.horizon
    }

    pub fn grid(&self) -> &TemporalGrid {
        &self.grid
    }

    pub fn barrier_points(&self) -> usize {
        self.state.barrier_points
    }

    pub fn set_barrier_points(&mut self, points: usize) -> Result<()> {
        if points < 2 {
            return Err(Error::invalid("barrier grid needs at least 2 points"));
        }
        self.state.barrier_points = points;
        Ok(())
    }

    pub fn bank(&self) -> &FilterBank {
        &self.state.bank
    }

    pub fn filters(&self) -> &[SquareMatrix] {
        &self.filters
    }

    pub fn mixed(&self) -> &[SquareMatrix] {
        &self.mixed
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn mu_mode(&self) -> MuMode {
        self.state.mu_mode
    }

    pub fn alpha(&self, r: usize, l: usize) -> f64 {
        self.state.alpha[r * self.state.num_basis + l]
    }

    pub fn psi_net(&self, l: usize) -> &ScalarNet {
        &self.state.psi_nets[l]
    }

    pub fn phi_net(&self, l: usize) -> &ScalarNet {
        &self.state.phi_nets[l]
    }

    pub fn set_alpha(&mut self, alpha: &[f64]) -> Result<()> {
        if alpha.len() != self.state.alpha.len() {
            return Err(Error::invalid("alpha length mismatch"));
        }
        self.state.alpha.copy_from_slice(alpha);
        self.refresh_linear();
        Ok(())
    }

    /// Sets every background rate (tied mode requires all equal).
    pub fn set_mu(&mut self, mu: &[f64]) -> Result<()> {
        let n = self.num_nodes();
        if mu.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::invalid("background rates must be positive"));
        }
        match self.state.mu_mode {
            MuMode::Tied => {
                if mu.is_empty() || mu.iter().any(|&m| m != mu[0]) {
                    return Err(Error::invalid("tied background needs one common rate"));
                }
                self.state.mu_raw = vec![inverse_softplus(mu[0])];
            }
            MuMode::PerNode => {
                if mu.len() != n {
                    return Err(Error::invalid("one background rate per node required"));
                }
                self.state.mu_raw = mu.iter().map(|&m| inverse_softplus(m)).collect();
            }
        }
        self.refresh_linear();
        Ok(())
    }

    /// Replaces the temporal networks (and rebuilds the grid).
    pub fn set_nets(&mut self, psi: Vec<ScalarNet>, phi: Vec<ScalarNet>) -> Result<()> {
        let l = self.state.num_basis;
        if psi.len() != l || phi.len() != l {
            return Err(Error::invalid("one psi and one phi network per basis required"));
        }
        self.state.psi_nets = psi;
        self.state.phi_nets = phi;
        self.grid = TemporalGrid::build(&self.state.phi_nets, self.state.grid)?;
        Ok(())
    }

    pub fn set_filter_params(&mut self, params: &[f64]) -> Result<()> {
        self.state.bank.set_free_params(params)?;
        self.refresh_linear();
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        let mut off = 0;
        let mut take = |len: usize| {
            let r = off..off + len;
            off += len;
            r
        };
        let alpha = take(self.state.alpha.len());
        let mu = take(self.state.mu_raw.len());
        let psi = self.state.psi_nets.iter().map(|n| take(n.num_params())).collect();
        let phi = self.state.phi_nets.iter().map(|n| take(n.num_params())).collect();
        let filters = take(self.state.bank.num_params());
        ParamLayout {
            alpha,
            mu,
            psi,
            phi,
            filters,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout().len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        p.extend_from_slice(&self.state.alpha);
        p.extend_from_slice(&self.state.mu_raw);
        for net in self.state.psi_nets.iter().chain(&self.state.phi_nets) {
            p.extend_from_slice(net.params());
        }
        p.extend_from_slice(self.state.bank.free_params());
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let layout = self.layout();
        if params.len() != layout.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                layout.len(),
                params.len()
            )));
        }
        self.state.alpha.copy_from_slice(&params[layout.alpha.clone()]);
        self.state.mu_raw.copy_from_slice(&params[layout.mu.clone()]);
        for (net, r) in self.state.psi_nets.iter_mut().zip(&layout.psi) {
            net.params_mut().copy_from_slice(&params[r.clone()]);
        }
        let mut phi_changed = false;
        for (net, r) in self.state.phi_nets.iter_mut().zip(&layout.phi) {
            if net.params() != &params[r.clone()] {
                net.params_mut().copy_from_slice(&params[r.clone()]);
                phi_changed = true;
            }
        }
        self.state.bank.set_free_params(&params[layout.filters.clone()])?;
        if phi_changed {
            self.grid = TemporalGrid::build(&self.state.phi_nets, self.state.grid)?;
        }
        self.refresh_linear();
        Ok(())
    }

    /// `phi_l(lag)`, zero beyond the truncation lag.
    fn phi(&self, l: usize, lag: f64, exact: bool) -> f64 {
        if exact {
            if lag > self.state.grid.tau_max {
                0.0
            } else {
                self.state.phi_nets[l].forward(lag)
            }
        } else {
            self.grid.phi_at(l, lag)
        }
    }

    pub fn kernel_eval(
        &self,
        t_prime: f64,
        t: f64,
        v_prime: usize,
        v: usize,
        exact: bool,
    ) -> Result<f64> {
        if t < t_prime {
            return Err(Error::invalid(format!("t = {t} precedes t' = {t_prime}")));
        }
        let n = self.num_nodes();
        if v_prime >= n || v >= n {
            return Err(Error::NodeOutOfRange {
                node: v_prime.max(v),
                num_nodes: n,
            });
        }
        let lag = t - t_prime;
        Ok((0..self.num_basis())
            .map(|l| {
                self.state.psi_nets[l].forward(t_prime)
                    * self.phi(l, lag, exact)
                    * self.mixed[l].get(v_prime, v)
            })
            .sum())
    }

    /// Kernel matrix `k(t', t' + lag, ., .)` on the grid path.
    pub fn kernel_matrix(&self, t_prime: f64, lag: f64, exact: bool) -> Result<SquareMatrix> {
        if lag < 0.0 {
            return Err(Error::invalid(format!("negative lag {lag}")));
        }
        let n = self.num_nodes();
        let mut out = SquareMatrix::zeros(n);
        for l in 0..self.num_basis() {
            let c = self.state.psi_nets[l].forward(t_prime) * self.phi(l, lag, exact);
            out.axpy(c, &self.mixed[l]);
        }
        Ok(out)
    }

    fn check_history(&self, t: f64, history: &[Event]) -> Result<()> {
        for (i, e) in history.iter().enumerate() {
            if (i > 0 && history[i - 1].t > e.t) || e.t >= t {
                return Err(Error::UnorderedHistory(i));
            }
            if e.node >= self.num_nodes() {
                return Err(Error::NodeOutOfRange {
                    node: e.node,
                    num_nodes: self.num_nodes(),
                });
            }
        }
        Ok(())
    }

    pub fn intensity(&self, t: f64, v: usize, history: &[Event], exact: bool) -> Result<f64> {
        self.check_history(t, history)?;
        let mut acc = self.mu[v];
        for e in history {
            acc += self.kernel_eval(e.t, t, e.node, v, exact)?;
        }
        Ok(acc)
    }

    /// Adds `upstream * d lambda(t, v) / d theta` (grid path) into `grad`.
    pub fn intensity_grad(
        &self,
        t: f64,
        v: usize,
        history: &[Event],
        upstream: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        self.check_history(t, history)?;
        let layout = self.layout();
        if grad.len() != layout.len() {
            return Err(Error::invalid("gradient buffer has wrong length"));
        }
        let n = self.num_nodes();
        let l_count = self.num_basis();
        let g = self.grid.points();
        let mut d_mu = vec![0.0; n];
        d_mu[v] = upstream;
        let mut d_mixed = vec![SquareMatrix::zeros(n); l_count];
        let mut d_phi = vec![vec![0.0; g]; l_count];
        for e in history {
            for l in 0..l_count {
                let Some(s) = self.grid.phi_stencil(t - e.t) else {
                    continue;
                };
                let (psi_val, trace) = self.state.psi_nets[l].forward_trace(e.t);
                let phi_val = crate::basis::interp(self.grid.phi_values(l), s);
                let m = self.mixed[l].get(e.node, v);
                d_mixed[l].add_at(e.node, v, upstream * psi_val * phi_val);
                let dphi = upstream * psi_val * m;
                d_phi[l][s.j] += (1.0 - s.frac) * dphi;
                d_phi[l][s.j + 1] += s.frac * dphi;
                self.state.psi_nets[l].backward_into(
                    &trace,
                    upstream * phi_val * m,
                    &mut grad[layout.psi[l].clone()],
                );
            }
        }
        self.accumulate_shared_grad(&layout, &d_mu, &d_mixed, &d_phi, grad)
    }

    /// Pushes gradients with respect to `mu_v`, `M_l` and the tabulated
    /// `phi_l` knots back to the parameter vector.
    pub(crate) fn accumulate_shared_grad(
        &self,
        layout: &ParamLayout,
        d_mu: &[f64],
        d_mixed: &[SquareMatrix],
        d_phi: &[Vec<f64>],
        grad: &mut [f64],
    ) -> Result<()> {
        let l_count = self.num_basis();
        match self.state.mu_mode {
            MuMode::Tied => {
                grad[layout.mu.start] += sigmoid(self.state.mu_raw[0]) * d_mu.iter().sum::<f64>();
            }
            MuMode::PerNode => {
                for (k, (raw, d)) in self.state.mu_raw.iter().zip(d_mu).enumerate() {
                    grad[layout.mu.start + k] += sigmoid(*raw) * d;
                }
            }
        }
        for (r, b) in self.filters.iter().enumerate() {
            for (l, dm) in d_mixed.iter().enumerate() {
                grad[layout.alpha.start + r * l_count + l] += b.dot(dm);
            }
        }
        if self.state.bank.num_params() > 0 {
            let d_filters: Vec<SquareMatrix> = (0..self.num_filters())
                .map(|r| {
                    let mut d = SquareMatrix::zeros(self.num_nodes());
                    for (l, dm) in d_mixed.iter().enumerate() {
                        d.axpy(self.alpha(r, l), dm);
                    }
                    d
                })
                .collect();
            let fg = self.state.bank.filter_grad(&d_filters)?;
            for (dst, g) in grad[layout.filters.clone()].iter_mut().zip(fg) {
                *dst += g;
            }
        }
        let active = self.grid.active_knots();
        for (l, dphi) in d_phi.iter().enumerate() {
            let net = &self.state.phi_nets[l];
            let dst = &mut grad[layout.phi[l].clone()];
            for (j, &d) in dphi.iter().enumerate().take(active) {
                if d != 0.0 {
                    let (_, trace) = net.forward_trace(self.grid.knot(j));
                    net.backward_into(&trace, d, dst);
                }
            }
        }
        Ok(())
    }

    /// `|alpha_rl|` sorted in decreasing order; entries below
    /// `threshold * max |alpha|` are flagged as discardable.
    pub fn rank_report(&self, threshold: f64) -> Vec<RankEntry> {
        let l_count = self.num_basis();
        let max = self.state.alpha.iter().fold(0.0_f64, |m, a| m.max(a.abs()));
        let mut entries: Vec<RankEntry> = self
            .state
            .alpha
            .iter()
            .enumerate()
            .map(|(k, &a)| RankEntry {
                filter: k / l_count,
                basis: k % l_count,
                alpha: a,
                magnitude: a.abs(),
                discardable: a.abs() < threshold * max,
            })
            .collect();
        entries.sort_by(|a, b| b.magnitude.total_cmp(&a.magnitude));
        entries
    }

    /// Copy with every discardable coefficient of `rank_report(threshold)`
    /// set to zero.
    pub fn truncated(&self, threshold: f64) -> Result<Self> {
        let l_count = self.num_basis();
        let mut alpha = self.state.alpha.clone();
        for e in self.rank_report(threshold) {
            if e.discardable {
                alpha[e.filter * l_count + e.basis] = 0.0;
            }
        }
        let mut out = self.clone();
        out.set_alpha(&alpha)?;
        Ok(out)
    }

    fn row_abs_sum(&self, l: usize, v_prime: usize) -> f64 {
        self.mixed[l].row(v_prime).iter().map(|m| m.abs()).sum()
    }
}

impl InfluenceModel for KernelModel {
    fn num_nodes(&self) -> usize {
        self.state.graph.num_nodes()
    }

    fn background(&self) -> Vec<f64> {
        self.mu.clone()
    }

    fn max_lag(&self) -> f64 {
        self.state.grid.tau_max
    }

    fn kernel(&self, t_prime: f64, t: f64, v_prime: usize, v: usize) -> f64 {
        (0..self.num_basis())
            .map(|l| {
                self.state.psi_nets[l].forward(t_prime)
                    * self.grid.phi_at(l, t - t_prime)
                    * self.mixed[l].get(v_prime, v)
            })
            .sum()
    }

    fn add_influence(&self, t_prime: f64, t: f64, v_prime: usize, out: &mut [f64]) {
        for l in 0..self.num_basis() {
            let phi = self.grid.phi_at(l, t - t_prime);
            if phi == 0.0 {
                continue;
            }
            let c = self.state.psi_nets[l].forward(t_prime) * phi;
            for (o, m) in out.iter_mut().zip(self.mixed[l].row(v_prime)) {
                *o += c * m;
            }
        }
    }

    fn positive_influence_bound(&self, t_prime: f64, v_prime: usize, min_lag: f64) -> f64 {
        if min_lag > self.state.grid.tau_max {
            return 0.0;
        }
        // Linear interpolation never exceeds the largest knot it touches.
        let start = ((min_lag.max(0.0) / self.grid.delta()).floor() as usize)
            .min(self.grid.points() - 1);
        (0..self.num_basis())
            .map(|l| {
                let phi_max = self.grid.phi_values(l)[start..]
                    .iter()
                    .fold(0.0_f64, |m, p| m.max(p.abs()));
                self.state.psi_nets[l].forward(t_prime).abs() * phi_max * self.row_abs_sum(l, v_prime)
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model(seed: u64) -> KernelModel {
        let g = Graph::path(3).unwrap();
        let cfg = ModelConfig {
            num_basis: 2,
            hidden: 6,
            filter: FilterConfig {
                mode: FilterMode::L3net,
                orders: vec![0, 1],
                ..Default::default()
            },
            grid_points: Some(101),
            alpha_init: 0.5,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        KernelModel::new(&g, &cfg, 2.0, &mut rng).unwrap()
    }

    fn history() -> Vec<Event> {
        [(0.1, 0), (0.4, 2), (0.9, 1), (1.3, 1), (1.6, 0)]
            .iter()
            .map(|&(t, node)| Event { t, node })
            .collect()
    }

    #[test]
    fn zero_alpha_kernel_vanishes() {
        let mut m = small_model(1);
        m.set_alpha(&[0.0; 4]).unwrap();
        assert_eq!(m.kernel_eval(0.2, 0.9, 0, 1, true).unwrap(), 0.0);
        assert_eq!(m.intensity(1.9, 2, &history(), false).unwrap(), m.mu()[2]);
    }

    #[test]
    fn kernel_rejects_reversed_times() {
        let m = small_model(1);
        assert!(m.kernel_eval(1.0, 0.5, 0, 0, true).is_err());
    }

    #[test]
    fn exact_and_grid_paths_agree() {
        let m = small_model(2);
        for &(tp, lag) in &[(0.0, 0.0), (0.3, 0.45), (1.0, 0.77), (0.2, 1.7)] {
            let a = m.kernel_eval(tp, tp + lag, 0, 1, true).unwrap();
            let b = m.kernel_eval(tp, tp + lag, 0, 1, false).unwrap();
            assert!((a - b).abs() <= 1e-2 * a.abs().max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn intensity_is_additive_over_histories() {
        let m = small_model(3);
        let h = history();
        let t = 1.9;
        let mu = m.mu()[1];
        let full = m.intensity(t, 1, &h, false).unwrap() - mu;
        let a = m.intensity(t, 1, &h[..2], false).unwrap() - mu;
        let b = m.intensity(t, 1, &h[2..], false).unwrap() - mu;
        assert!((full - a - b).abs() < 1e-12);
        assert!(m.intensity(1.0, 1, &h, false).is_err());
    }

    #[test]
    fn params_round_trip() {
        let mut m = small_model(4);
        let p = m.params();
        assert_eq!(p.len(), m.num_params());
        let q: Vec<f64> = p.iter().map(|x| x * 0.5).collect();
        m.set_params(&q).unwrap();
        assert_eq!(m.params(), q);
    }

    #[test]
    fn intensity_grad_matches_finite_differences() {
        let mut m = small_model(5);
        let h = history();
        let (t, v) = (1.93, 1);
        let mut grad = vec![0.0; m.num_params()];
        m.intensity_grad(t, v, &h, 1.0, &mut grad).unwrap();
        let base = m.params();
        let step = 1e-6;
        for (name, block) in m.layout().blocks() {
            let mut fd = Vec::new();
            for k in block.clone() {
                let mut p = base.clone();
                p[k] += step;
                m.set_params(&p).unwrap();
                let fp = m.intensity(t, v, &h, false).unwrap();
                p[k] -= 2.0 * step;
                m.set_params(&p).unwrap();
                let fm = m.intensity(t, v, &h, false).unwrap();
                fd.push((fp - fm) / (2.0 * step));
            }
            m.set_params(&base).unwrap();
            let scale = fd.iter().fold(0.0_f64, |a, x| a.max(x.abs())).max(1e-10);
            let err = grad[block]
                .iter()
                .zip(&fd)
                .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
            assert!(err / scale < 1e-4, "block {name}: {}", err / scale);
        }
    }

    #[test]
    fn mu_gradient_is_indicator() {
        let mut m = small_model(6);
        m.set_mu(&[0.5, 0.7, 0.9]).unwrap();
        let mut grad = vec![0.0; m.num_params()];
        m.intensity_grad(1.0, 2, &[], 1.0, &mut grad).unwrap();
        let mu_block = &grad[m.layout().mu];
        // chain through softplus: d mu / d raw = sigmoid(raw) = 1 - exp(-mu)
        assert!((mu_block[2] - (1.0 - (-0.9f64).exp())).abs() < 1e-12);
        assert_eq!(mu_block[0], 0.0);
        assert_eq!(mu_block[1], 0.0);
    }

    #[test]
    fn rank_report_orders_and_flags() {
        let mut m = small_model(7);
        m.set_alpha(&[2.0, 0.01, -0.5, 0.3]).unwrap();
        let report = m.rank_report(0.05);
        assert_eq!((report[0].filter, report[0].basis), (0, 0));
        assert_eq!(report.last().unwrap().alpha, 0.01);
        assert!(report.last().unwrap().discardable);
        assert_eq!(report.iter().filter(|e| e.discardable).count(), 1);
        m.set_alpha(&[0.4; 4]).unwrap();
        assert!(m.rank_report(0.99).iter().all(|e| !e.discardable));
    }

    #[test]
    fn tied_mu_stays_tied() {
        let g = Graph::ring(5).unwrap();
        let cfg = ModelConfig {
            mu_mode: MuMode::Tied,
            hidden: 4,
            grid_points: Some(11),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = KernelModel::new(&g, &cfg, 1.0, &mut rng).unwrap();
        let mut p = m.params();
        p[m.layout().mu.start] = 0.3;
        m.set_params(&p).unwrap();
        assert!(m.mu().iter().all(|&x| x == m.mu()[0]));
        assert!(m.set_mu(&[0.1, 0.2, 0.1, 0.1, 0.1]).is_err());
    }

    #[test]
    fn positive_bound_dominates_influence() {
        let m = small_model(8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let tp: f64 = rng.gen_range(0.0..1.0);
            let lag0: f64 = rng.gen_range(0.0..1.0);
            let extra: f64 = rng.gen_range(0.0..1.0);
            let vp = rng.gen_range(0..3);
            let bound = m.positive_influence_bound(tp, vp, lag0);
            let mut out = vec![0.0; 3];
            m.add_influence(tp, tp + lag0 + extra, vp, &mut out);
            let pos: f64 = out.iter().map(|x| x.max(0.0)).sum();
            assert!(pos <= bound + 1e-12, "{pos} > {bound}");
        }
    }
}
