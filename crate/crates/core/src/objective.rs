//! Training objectives: negative log-likelihood and least squares, each with
//! an optional log-barrier penalty, evaluated on the interpolation grid with
//! exact gradients.

use serde::{Deserialize, Serialize};

use crate::basis::{cumulative_trapezoid_adjoint, interp, Stencil};
use crate::error::{Error, Result};
use crate::events::{Event, EventSequence};
use crate::exec::{map_indexed, Parallelism};
use crate::matrix::SquareMatrix;
use crate::model::{InfluenceModel, KernelModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Nll,
    Ls,
}

/// Log-barrier `-(1/w) mean log(lambda - b)` over a uniform time grid of
/// `points` points on `[0, T]` times every node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierGrid {
    pub points: usize,
    pub bound: f64,
    pub weight: f64,
}

impl BarrierGrid {
    pub fn times(&self, horizon: f64) -> Vec<f64> {
        uniform_times(horizon, self.points)
    }
}

pub(crate) fn uniform_times(horizon: f64, points: usize) -> Vec<f64> {
    let step = horizon / (points - 1) as f64;
    (0..points).map(|k| k as f64 * step).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub kind: LossKind,
    pub barrier: Option<BarrierGrid>,
    /// Grid used for the least-squares integral when no barrier is set.
    pub integration_points: usize,
    pub parallelism: Parallelism,
}

impl ObjectiveConfig {
    pub fn new(model: &KernelModel, kind: LossKind) -> Self {
        Self {
            kind,
            barrier: None,
            integration_points: model.barrier_points(),
            parallelism: Parallelism::Auto,
        }
    }

    pub fn with_barrier(mut self, bound: f64, weight: f64) -> Self {
        self.barrier = Some(BarrierGrid {
            points: self.integration_points,
            bound,
            weight,
        });
        self
    }

    fn grid_points(&self) -> usize {
        self.barrier.map_or(self.integration_points, |b| b.points)
    }
}

/// Batch-averaged loss terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `-sum log lambda(t_i, v_i)` (NLL) or `-2 sum lambda(t_i, v_i)` (LS).
    pub data_term: f64,
    /// `sum_v int lambda` (NLL) or `sum_v int lambda^2` (LS).
    pub integral_term: f64,
    /// `p(theta, b)` before division by `w`; zero without a barrier.
    pub barrier_term: f64,
    /// `data_term + integral_term`.
    pub loss: f64,
    /// `loss + barrier_term / w`.
    pub total: f64,
    pub per_sequence: Vec<f64>,
    /// Smallest intensity seen on the barrier grid, when it was evaluated.
    pub min_grid_intensity: Option<f64>,
    pub num_events: usize,
}

#[derive(Debug, Clone, Copy)]
struct Probe {
    t: f64,
    /// Include an event located exactly at `t`.
    inclusive: bool,
}

/// Per-sequence gradient buffers with respect to intermediate quantities.
struct SeqGrad {
    d_psi: Vec<f64>,
    d_mu: Vec<f64>,
    d_mixed: Vec<SquareMatrix>,
    d_phi: Vec<Vec<f64>>,
    d_cum: Vec<Vec<f64>>,
}

impl SeqGrad {
    fn new(model: &KernelModel, num_events: usize) -> Self {
        let l = model.num_basis();
        let n = model.num_nodes();
        let g = model.grid().points();
        Self {
            d_psi: vec![0.0; num_events * l],
            d_mu: vec![0.0; n],
            d_mixed: vec![SquareMatrix::zeros(n); l],
            d_phi: vec![vec![0.0; g]; l],
            d_cum: vec![vec![0.0; g]; l],
        }
    }
}

#[inline]
fn scatter(values: &mut [f64], s: Stencil, d: f64) {
    values[s.j] += (1.0 - s.frac) * d;
    values[s.j + 1] += s.frac * d;
}

struct SeqContext<'a> {
    model: &'a KernelModel,
    events: &'a [Event],
    /// `psi_l(t_i)` at `i * L + l`.
    psi: Vec<f64>,
}

impl<'a> SeqContext<'a> {
    fn new(model: &'a KernelModel, seq: &'a EventSequence) -> Self {
        let l_count = model.num_basis();
        let events = seq.events();
        let mut psi = Vec::with_capacity(events.len() * l_count);
        for e in events {
            for l in 0..l_count {
                psi.push(model.psi_net(l).forward(e.t));
            }
        }
        Self { model, events, psi }
    }

    fn l_count(&self) -> usize {
        self.model.num_basis()
    }

    /// First event index whose lag to `t` is within the truncation lag.
    fn advance_lo(&self, mut lo: usize, t: f64) -> usize {
        let tau = self.model.grid().tau_max();
        while lo < self.events.len() && t - self.events[lo].t > tau {
            lo += 1;
        }
        lo
    }

    /// `lambda(t_i, v_i)` for every event, history strictly before `t_i`.
    fn event_intensities(&self) -> Vec<f64> {
        let m = self.model;
        let grid = m.grid();
        let lc = self.l_count();
        let mut lo = 0;
        self.events
            .iter()
            .enumerate()
            .map(|(i, e)| {
                lo = self.advance_lo(lo, e.t);
                let mut lam = m.mu()[e.node];
                for j in lo..i {
                    let src = self.events[j];
                    let Some(s) = grid.phi_stencil(e.t - src.t) else {
                        continue;
                    };
                    for l in 0..lc {
                        let phi = interp(grid.phi_values(l), s);
                        lam += self.psi[j * lc + l] * phi * m.mixed()[l].get(src.node, e.node);
                    }
                }
                lam
            })
            .collect()
    }

    fn event_backward(&self, d_lam: &[f64], acc: &mut SeqGrad) {
        let m = self.model;
        let grid = m.grid();
        let lc = self.l_count();
        let mut lo = 0;
        for (i, e) in self.events.iter().enumerate() {
            lo = self.advance_lo(lo, e.t);
            let d = d_lam[i];
            if d == 0.0 {
                continue;
            }
            acc.d_mu[e.node] += d;
            for j in lo..i {
                let src = self.events[j];
                let Some(s) = grid.phi_stencil(e.t - src.t) else {
                    continue;
                };
                for l in 0..lc {
                    let phi = interp(grid.phi_values(l), s);
                    let psi = self.psi[j * lc + l];
                    let mix = m.mixed()[l].get(src.node, e.node);
                    acc.d_psi[j * lc + l] += d * phi * mix;
                    scatter(&mut acc.d_phi[l], s, d * psi * mix);
                    acc.d_mixed[l].add_at(src.node, e.node, d * psi * phi);
                }
            }
        }
    }

    /// `lambda(t, .)` for each probe (probes sorted by time, exclusive
    /// before inclusive at equal times), row-major `P x |V|`.
    fn probe_intensities(&self, probes: &[Probe]) -> Vec<f64> {
        let m = self.model;
        let grid = m.grid();
        let n = m.num_nodes();
        let lc = self.l_count();
        let mut out = Vec::with_capacity(probes.len() * n);
        let (mut lo, mut hi) = (0, 0);
        for p in probes {
            lo = self.advance_lo(lo, p.t);
            hi = self.advance_hi(hi, p);
            let start = out.len();
            out.extend_from_slice(m.mu());
            let row = &mut out[start..];
            for j in lo..hi {
                let src = self.events[j];
                let Some(s) = grid.phi_stencil(p.t - src.t) else {
                    continue;
                };
                for l in 0..lc {
                    let c = self.psi[j * lc + l] * interp(grid.phi_values(l), s);
                    if c == 0.0 {
                        continue;
                    }
                    for (o, mix) in row.iter_mut().zip(m.mixed()[l].row(src.node)) {
                        *o += c * mix;
                    }
                }
            }
        }
        out
    }

    fn advance_hi(&self, mut hi: usize, p: &Probe) -> usize {
        while hi < self.events.len()
            && (self.events[hi].t < p.t || (p.inclusive && self.events[hi].t == p.t))
        {
            hi += 1;
        }
        hi
    }

    fn probe_backward(&self, probes: &[Probe], d_lam: &[f64], acc: &mut SeqGrad) {
        let m = self.model;
        let grid = m.grid();
        let n = m.num_nodes();
        let lc = self.l_count();
        let (mut lo, mut hi) = (0, 0);
        for (k, p) in probes.iter().enumerate() {
            lo = self.advance_lo(lo, p.t);
            hi = self.advance_hi(hi, p);
            let d_row = &d_lam[k * n..(k + 1) * n];
            for (dm, d) in acc.d_mu.iter_mut().zip(d_row) {
                *dm += d;
            }
            for j in lo..hi {
                let src = self.events[j];
                let Some(s) = grid.phi_stencil(p.t - src.t) else {
                    continue;
                };
                for l in 0..lc {
                    let phi = interp(grid.phi_values(l), s);
                    let psi = self.psi[j * lc + l];
                    let mix_row = m.mixed()[l].row(src.node);
                    let g: f64 = d_row.iter().zip(mix_row).map(|(d, x)| d * x).sum();
                    acc.d_psi[j * lc + l] += g * phi;
                    scatter(&mut acc.d_phi[l], s, g * psi);
                    let c = psi * phi;
                    if c != 0.0 {
                        for (dst, d) in acc.d_mixed[l].row_mut(src.node).iter_mut().zip(d_row) {
                            *dst += c * d;
                        }
                    }
                }
            }
        }
    }

    /// `sum_v int_0^T lambda(t, v) dt` in closed form on the cumulative grid.
    fn linear_integral(&self) -> f64 {
        let m = self.model;
        let grid = m.grid();
        let horizon = m.horizon();
        let lc = self.l_count();
        let row_sums: Vec<Vec<f64>> = m.mixed().iter().map(SquareMatrix::row_sums).collect();
        let mut total = m.mu().iter().sum::<f64>() * horizon;
        for (i, e) in self.events.iter().enumerate() {
            let s = grid.cum_stencil(horizon - e.t);
            for l in 0..lc {
                total += self.psi[i * lc + l] * interp(grid.cum_values(l), s) * row_sums[l][e.node];
            }
        }
        total
    }

    fn linear_integral_backward(&self, d: f64, acc: &mut SeqGrad) {
        let m = self.model;
        let grid = m.grid();
        let horizon = m.horizon();
        let lc = self.l_count();
        for dm in acc.d_mu.iter_mut() {
            *dm += d * horizon;
        }
        for (i, e) in self.events.iter().enumerate() {
            let s = grid.cum_stencil(horizon - e.t);
            for l in 0..lc {
                let cum = interp(grid.cum_values(l), s);
                let psi = self.psi[i * lc + l];
                let rs: f64 = m.mixed()[l].row(e.node).iter().sum();
                acc.d_psi[i * lc + l] += d * cum * rs;
                scatter(&mut acc.d_cum[l], s, d * psi * rs);
                for x in acc.d_mixed[l].row_mut(e.node) {
                    *x += d * psi * cum;
                }
            }
        }
    }

    /// Backpropagates `d_psi` through the psi networks.
    fn psi_param_grad(&self, d_psi: &[f64]) -> Vec<Vec<f64>> {
        let m = self.model;
        let lc = self.l_count();
        (0..lc)
            .map(|l| {
                let net = m.psi_net(l);
                let mut g = vec![0.0; net.num_params()];
                for (i, e) in self.events.iter().enumerate() {
                    let d = d_psi[i * lc + l];
                    if d != 0.0 {
                        let (_, trace) = net.forward_trace(e.t);
                        net.backward_into(&trace, d, &mut g);
                    }
                }
                g
            })
            .collect()
    }
}

/// Probe layout for the least-squares integral: the uniform grid merged
/// with left and right limits at every event.
struct LsPlan {
    probes: Vec<Probe>,
    /// Panel endpoints as `(time, index of right limit, index of left limit)`.
    breakpoints: Vec<(f64, usize, usize)>,
    /// Indices of uniform-grid probes.
    grid_index: Vec<usize>,
}

fn plan_probes(grid_times: &[f64], events: &[Event], with_events: bool) -> LsPlan {
    let mut probes = Vec::with_capacity(grid_times.len() + 2 * events.len());
    let mut breakpoints = Vec::new();
    let mut grid_index = Vec::with_capacity(grid_times.len());
    let (mut gi, mut ei) = (0, 0);
    let ev_count = if with_events { events.len() } else { 0 };
    while gi < grid_times.len() || ei < ev_count {
        let take_event = ei < ev_count && (gi >= grid_times.len() || events[ei].t < grid_times[gi]);
        if take_event {
            let t = events[ei].t;
            probes.push(Probe { t, inclusive: false });
            probes.push(Probe { t, inclusive: true });
            let k = probes.len();
            breakpoints.push((t, k - 1, k - 2));
            ei += 1;
        } else {
            let t = grid_times[gi];
            probes.push(Probe {
                t,
                inclusive: false,
            });
            let k = probes.len() - 1;
            grid_index.push(k);
            breakpoints.push((t, k, k));
            gi += 1;
        }
    }
    LsPlan {
        probes,
        breakpoints,
        grid_index,
    }
}

struct SeqOutput {
    data: f64,
    integral: f64,
    barrier: f64,
    min_grid: Option<f64>,
    grad: Option<SeqGradFinal>,
}

struct SeqGradFinal {
    psi: Vec<Vec<f64>>,
    d_mu: Vec<f64>,
    d_mixed: Vec<SquareMatrix>,
    d_phi: Vec<Vec<f64>>,
    d_cum: Vec<Vec<f64>>,
}

fn check_sequence(model: &KernelModel, seq: &EventSequence) -> Result<()> {
    let horizon = model.horizon();
    if (seq.horizon() - horizon).abs() > 1e-9 * horizon {
        return Err(Error::invalid(format!(
            "sequence horizon {} does not match model horizon {horizon}",
            seq.horizon()
        )));
    }
    if let Some(v) = seq.max_node() {
        if v >= model.num_nodes() {
            return Err(Error::NodeOutOfRange {
                node: v,
                num_nodes: model.num_nodes(),
            });
        }
    }
    Ok(())
}

/// `scale` multiplies every loss term of this sequence (1/|batch|).
fn sequence_objective(
    model: &KernelModel,
    seq: &EventSequence,
    s_index: usize,
    cfg: &ObjectiveConfig,
    scale: f64,
    want_grad: bool,
) -> Result<SeqOutput> {
    check_sequence(model, seq)?;
    let ctx = SeqContext::new(model, seq);
    let n = model.num_nodes();
    let lam_events = ctx.event_intensities();
    let mut acc = want_grad.then(|| SeqGrad::new(model, seq.len()));

    let data = match cfg.kind {
        LossKind::Nll => {
            if let Some((i, &v)) = lam_events.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
                return Err(Error::InfeasibleLoss {
                    sequence: s_index,
                    index: i,
                    value: v,
                });
            }
            if let Some(acc) = acc.as_mut() {
                let d: Vec<f64> = lam_events.iter().map(|l| -scale / l).collect();
                ctx.event_backward(&d, acc);
            }
            -lam_events.iter().map(|l| l.ln()).sum::<f64>()
        }
        LossKind::Ls => {
            if let Some(acc) = acc.as_mut() {
                ctx.event_backward(&vec![-2.0 * scale; lam_events.len()], acc);
            }
            -2.0 * lam_events.iter().sum::<f64>()
        }
    };

    let need_grid = cfg.kind == LossKind::Ls || cfg.barrier.is_some();
    let mut integral = 0.0;
    let mut barrier = 0.0;
    let mut min_grid = None;
    if cfg.kind == LossKind::Nll {
        integral = ctx.linear_integral();
        if let Some(acc) = acc.as_mut() {
            ctx.linear_integral_backward(scale, acc);
        }
    }
    if need_grid {
        let times = uniform_times(model.horizon(), cfg.grid_points());
        let plan = plan_probes(&times, seq.events(), cfg.kind == LossKind::Ls);
        let lam = ctx.probe_intensities(&plan.probes);
        let mut d_lam = acc.as_ref().map(|_| vec![0.0; lam.len()]);
        let mut grid_min = f64::INFINITY;
        for &k in &plan.grid_index {
            for &x in &lam[k * n..(k + 1) * n] {
                grid_min = grid_min.min(x);
            }
        }
        min_grid = Some(grid_min);
        if cfg.kind == LossKind::Ls {
            for w in plan.breakpoints.windows(2) {
                let (ta, right_a, _) = w[0];
                let (tb, _, left_b) = w[1];
                let half = 0.5 * (tb - ta);
                let ra = &lam[right_a * n..(right_a + 1) * n];
                let lb = &lam[left_b * n..(left_b + 1) * n];
                integral += half
                    * (ra.iter().map(|x| x * x).sum::<f64>() + lb.iter().map(|x| x * x).sum::<f64>());
                if let Some(d) = d_lam.as_mut() {
                    for v in 0..n {
                        d[right_a * n + v] += scale * half * 2.0 * ra[v];
                        d[left_b * n + v] += scale * half * 2.0 * lb[v];
                    }
                }
            }
        }
        if let Some(bg) = cfg.barrier {
            let count = (plan.grid_index.len() * n) as f64;
            let mut sum_log = 0.0;
            for (g, &k) in plan.grid_index.iter().enumerate() {
                for v in 0..n {
                    let margin = lam[k * n + v] - bg.bound;
                    if !(margin > 0.0) {
                        return Err(Error::InfeasibleBarrier {
                            sequence: s_index,
                            t: times[g],
                            node: v,
                            value: lam[k * n + v],
                            bound: bg.bound,
                        });
                    }
                    sum_log += margin.ln();
                    if let Some(d) = d_lam.as_mut() {
                        d[k * n + v] -= scale / (bg.weight * count * margin);
                    }
                }
            }
            barrier = -sum_log / count;
        }
        if let (Some(acc), Some(d)) = (acc.as_mut(), d_lam.as_ref()) {
            ctx.probe_backward(&plan.probes, d, acc);
        }
    }

    let grad = acc.map(|acc| SeqGradFinal {
        psi: ctx.psi_param_grad(&acc.d_psi),
        d_mu: acc.d_mu,
        d_mixed: acc.d_mixed,
        d_phi: acc.d_phi,
        d_cum: acc.d_cum,
    });
    Ok(SeqOutput {
        data,
        integral,
        barrier,
        min_grid,
        grad,
    })
}

fn run(
    model: &KernelModel,
    batch: &[EventSequence],
    cfg: &ObjectiveConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(bg) = cfg.barrier {
        if bg.points < 2 || !(bg.weight > 0.0) {
            return Err(Error::invalid("barrier needs >= 2 points and a positive weight"));
        }
    }
    if cfg.integration_points < 2 {
        return Err(Error::invalid("integration grid needs at least 2 points"));
    }
    let scale = 1.0 / batch.len() as f64;
    let outputs = map_indexed(batch.len(), cfg.parallelism, |s| {
        sequence_objective(model, &batch[s], s, cfg, scale, want_grad)
    });
    let outputs: Vec<SeqOutput> = outputs.into_iter().collect::<Result<_>>()?;

    let inv_w = cfg.barrier.map_or(0.0, |b| 1.0 / b.weight);
    let mut bd = LossBreakdown {
        data_term: 0.0,
        integral_term: 0.0,
        barrier_term: 0.0,
        loss: 0.0,
        total: 0.0,
        per_sequence: Vec::with_capacity(batch.len()),
        min_grid_intensity: None,
        num_events: batch.iter().map(EventSequence::len).sum(),
    };
    for o in &outputs {
        bd.data_term += o.data * scale;
        bd.integral_term += o.integral * scale;
        bd.barrier_term += o.barrier * scale;
        bd.per_sequence.push(o.data + o.integral + o.barrier * inv_w);
        if let Some(mg) = o.min_grid {
            bd.min_grid_intensity = Some(bd.min_grid_intensity.map_or(mg, |m: f64| m.min(mg)));
        }
    }
    bd.loss = bd.data_term + bd.integral_term;
    bd.total = bd.loss + bd.barrier_term * inv_w;

    if !want_grad {
        return Ok((bd, None));
    }
    let layout = model.layout();
    let mut grad = vec![0.0; layout.len()];
    let n = model.num_nodes();
    let lc = model.num_basis();
    let g = model.grid().points();
    let mut d_mu = vec![0.0; n];
    let mut d_mixed = vec![SquareMatrix::zeros(n); lc];
    let mut d_phi = vec![vec![0.0; g]; lc];
    let mut d_cum = vec![vec![0.0; g]; lc];
    for o in outputs {
        let sg = o.grad.expect("gradient requested");
        for (l, pg) in sg.psi.iter().enumerate() {
            for (dst, x) in grad[layout.psi[l].clone()].iter_mut().zip(pg) {
                *dst += x;
            }
        }
        add_into(&mut d_mu, &sg.d_mu);
        for l in 0..lc {
            d_mixed[l].axpy(1.0, &sg.d_mixed[l]);
            add_into(&mut d_phi[l], &sg.d_phi[l]);
            add_into(&mut d_cum[l], &sg.d_cum[l]);
        }
    }
    let delta = model.grid().delta();
    for l in 0..lc {
        cumulative_trapezoid_adjoint(&d_cum[l], delta, &mut d_phi[l]);
    }
    model.accumulate_shared_grad(&layout, &d_mu, &d_mixed, &d_phi, &mut grad)?;
    Ok((bd, Some(grad)))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Loss terms without gradient.
pub fn evaluate(
    model: &KernelModel,
    batch: &[EventSequence],
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    run(model, batch, cfg, false).map(|(bd, _)| bd)
}

/// Loss terms and the gradient of `total` with respect to
/// [`KernelModel::params`].
pub fn total_loss_and_grad(
    model: &KernelModel,
    batch: &[EventSequence],
    cfg: &ObjectiveConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    run(model, batch, cfg, true).map(|(bd, g)| (bd, g.expect("gradient requested")))
}

pub fn nll(model: &KernelModel, batch: &[EventSequence]) -> Result<LossBreakdown> {
    evaluate(model, batch, &ObjectiveConfig::new(model, LossKind::Nll))
}

pub fn ls(model: &KernelModel, batch: &[EventSequence]) -> Result<LossBreakdown> {
    evaluate(model, batch, &ObjectiveConfig::new(model, LossKind::Ls))
}

/// `p(theta, b) = -mean log(lambda - b)` over the barrier grid, averaged
/// over the batch.
pub fn log_barrier(model: &KernelModel, batch: &[EventSequence], bg: BarrierGrid) -> Result<f64> {
    let mut cfg = ObjectiveConfig::new(model, LossKind::Nll);
    cfg.barrier = Some(bg);
    evaluate(model, batch, &cfg).map(|bd| bd.barrier_term)
}

/// Smallest grid-path intensity over the barrier grid of every sequence.
pub fn min_grid_intensity(
    model: &KernelModel,
    batch: &[EventSequence],
    points: usize,
    parallelism: Parallelism,
) -> Result<f64> {
    let times = uniform_times(model.horizon(), points);
    let mins = map_indexed(batch.len(), parallelism, |s| -> Result<f64> {
        check_sequence(model, &batch[s])?;
        let ctx = SeqContext::new(model, &batch[s]);
        let plan = plan_probes(&times, batch[s].events(), false);
        Ok(ctx
            .probe_intensities(&plan.probes)
            .into_iter()
            .fold(f64::INFINITY, f64::min))
    });
    mins.into_iter()
        .try_fold(f64::INFINITY, |acc, m| m.map(|m| acc.min(m)))
}

/// `lambda(t_i, v_i)` on the grid path for every event of `seq`.
pub fn event_intensities(model: &KernelModel, seq: &EventSequence) -> Result<Vec<f64>> {
    check_sequence(model, seq)?;
    Ok(SeqContext::new(model, seq).event_intensities())
}
