//! Temporal basis functions: small scalar feed-forward networks for
//! `psi_l(t')` and `phi_l(t - t')`, plus the uniform grid used to tabulate
//! `phi_l` and its running integral.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 32;

#[inline]
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `1 -> H -> H -> 1` network with softplus on both hidden layers and an
/// affine output. The input is multiplied by a fixed `input_scale` first so
/// that times on long horizons land in an O(1) range.
///
/// Parameter layout (flat): `w1[H], b1[H], w2[H*H] (row = output unit),
/// b2[H], w3[H], b3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarNet {
    hidden: usize,
    input_scale: f64,
    params: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
pub struct NetTrace {
    x: f64,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
}

impl ScalarNet {
    pub fn num_params_for(hidden: usize) -> usize {
        hidden * hidden + 4 * hidden + 1
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization for every
    /// weight and bias.
    pub fn random<R: Rng + ?Sized>(hidden: usize, input_scale: f64, rng: &mut R) -> Self {
        let h = hidden;
        let mut params = Vec::with_capacity(Self::num_params_for(h));
        let mut push = |count: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..count {
                params.push(rng.gen_range(-bound..bound));
            }
        };
        push(h, 1); // w1
        push(h, 1); // b1
        push(h * h, h); // w2
        push(h, h); // b2
        push(h, h); // w3
        push(1, h); // b3
        Self {
            hidden,
            input_scale,
            params,
        }
    }

    /// Network whose output is the constant `c` (all weights zero).
    pub fn constant(hidden: usize, c: f64) -> Self {
        let mut params = vec![0.0; Self::num_params_for(hidden)];
        *params.last_mut().unwrap() = c;
        Self {
            hidden,
            input_scale: 1.0,
            params,
        }
    }

    pub fn from_params(hidden: usize, input_scale: f64, params: Vec<f64>) -> Result<Self> {
        if params.len() != Self::num_params_for(hidden) {
            return Err(Error::invalid(format!(
                "network with hidden width {hidden} needs {} parameters, got {}",
                Self::num_params_for(hidden),
                params.len()
            )));
        }
        Ok(Self {
            hidden,
            input_scale,
            params,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_scale(&self) -> f64 {
        self.input_scale
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64], &[f64], f64) {
        let h = self.hidden;
        let p = &self.params;
        let (w1, rest) = p.split_at(h);
        let (b1, rest) = rest.split_at(h);
        let (w2, rest) = rest.split_at(h * h);
        let (b2, rest) = rest.split_at(h);
        let (w3, rest) = rest.split_at(h);
        (w1, b1, w2, b2, w3, rest[0])
    }

    pub fn forward(&self, t: f64) -> f64 {
        self.forward_trace(t).0
    }

    pub fn forward_trace(&self, t: f64) -> (f64, NetTrace) {
        let (w1, b1, w2, b2, w3, b3) = self.split();
        let h = self.hidden;
        let x = t * self.input_scale;
        let z1: Vec<f64> = w1.iter().zip(b1).map(|(w, b)| w * x + b).collect();
        let a1: Vec<f64> = z1.iter().map(|&z| softplus(z)).collect();
        let mut z2 = b2.to_vec();
        for (k, zk) in z2.iter_mut().enumerate() {
            let row = &w2[k * h..(k + 1) * h];
            *zk += row.iter().zip(&a1).map(|(w, a)| w * a).sum::<f64>();
        }
        let a2: Vec<f64> = z2.iter().map(|&z| softplus(z)).collect();
        let y = b3 + w3.iter().zip(&a2).map(|(w, a)| w * a).sum::<f64>();
        (y, NetTrace { x, z1, a1, z2, a2 })
    }

    /// Accumulates `upstream * d(output)/d(params)` into `grad`.
    pub fn backward_into(&self, trace: &NetTrace, upstream: f64, grad: &mut [f64]) {
        if upstream == 0.0 {
            return;
        }
        let h = self.hidden;
        let (_, _, w2, _, w3, _) = self.split();
        let (g_w1, rest) = grad.split_at_mut(h);
        let (g_b1, rest) = rest.split_at_mut(h);
        let (g_w2, rest) = rest.split_at_mut(h * h);
        let (g_b2, rest) = rest.split_at_mut(h);
        let (g_w3, g_b3) = rest.split_at_mut(h);
        g_b3[0] += upstream;
        let mut dz2 = vec![0.0; h];
        for k in 0..h {
            g_w3[k] += upstream * trace.a2[k];
            dz2[k] = upstream * w3[k] * sigmoid(trace.z2[k]);
        }
        let mut da1 = vec![0.0; h];
        for k in 0..h {
            let d = dz2[k];
            g_b2[k] += d;
            if d == 0.0 {
                continue;
            }
            let row = &w2[k * h..(k + 1) * h];
            let grow = &mut g_w2[k * h..(k + 1) * h];
            for j in 0..h {
                grow[j] += d * trace.a1[j];
                da1[j] += d * row[j];
            }
        }
        for j in 0..h {
            let dz1 = da1[j] * sigmoid(trace.z1[j]);
            g_b1[j] += dz1;
            g_w1[j] += dz1 * trace.x;
        }
    }

    /// Gradient of `upstream * net(t)` with respect to every parameter.
    pub fn backward(&self, t: f64, upstream: f64) -> Vec<f64> {
        let mut grad = vec![0.0; self.num_params()];
        let (_, trace) = self.forward_trace(t);
        self.backward_into(&trace, upstream, &mut grad);
        grad
    }
}

/// Shape of the interpolation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub horizon: f64,
    pub points: usize,
    pub tau_max: f64,
}

impl GridConfig {
    pub fn new(horizon: f64, points: usize, tau_max: f64) -> Result<Self> {
        let cfg = Self {
            horizon,
            points,
            tau_max,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Grid with `per_unit` intervals per unit of time and no truncation.
    pub fn with_density(horizon: f64, per_unit: f64) -> Result<Self> {
        let points = (per_unit * horizon).ceil() as usize + 1;
        Self::new(horizon, points.max(2), horizon)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::invalid(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if self.points < 2 {
            return Err(Error::invalid("grid needs at least 2 points"));
        }
        if !(self.tau_max > 0.0 && self.tau_max <= self.horizon) {
            return Err(Error::invalid(format!(
                "tau_max must lie in (0, T], got {}",
                self.tau_max
            )));
        }
        Ok(())
    }

    pub fn delta(&self) -> f64 {
        self.horizon / (self.points - 1) as f64
    }
}

/// Tabulated `phi_l` on a uniform grid over `[0, T]` together with the
/// running trapezoidal integral `F_l`.
#[derive(Debug)]
pub struct TemporalGrid {
    config: GridConfig,
    delta: f64,
    /// Knots `0..active` lie within `tau_max`; later knots are zero.
    active: usize,
    phi_values: Vec<Vec<f64>>,
    cum_values: Vec<Vec<f64>>,
    clamp_warnings: AtomicUsize,
}

impl Clone for TemporalGrid {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            delta: self.delta,
            active: self.active,
            phi_values: self.phi_values.clone(),
            cum_values: self.cum_values.clone(),
            clamp_warnings: AtomicUsize::new(self.clamp_warnings.load(Ordering::Relaxed)),
        }
    }
}

/// Linear interpolation stencil: `value = (1 - frac) * v[j] + frac * v[j + 1]`.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub j: usize,
    pub frac: f64,
}

impl TemporalGrid {
    pub fn build(nets_phi: &[ScalarNet], config: GridConfig) -> Result<Self> {
        config.validate()?;
        let g = config.points;
        let delta = config.delta();
        let active = (0..g).take_while(|&j| j as f64 * delta <= config.tau_max).count();
        let mut phi_values = Vec::with_capacity(nets_phi.len());
        let mut cum_values = Vec::with_capacity(nets_phi.len());
        for net in nets_phi {
            let mut phi = vec![0.0; g];
            for (j, p) in phi.iter_mut().enumerate().take(active) {
                *p = net.forward(j as f64 * delta);
            }
            cum_values.push(cumulative_trapezoid(&phi, delta));
            phi_values.push(phi);
        }
        Ok(Self {
            config,
            delta,
            active,
            phi_values,
            cum_values,
            clamp_warnings: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> GridConfig {
        self.config
    }

    pub fn horizon(&self) -> f64 {
        self.config.horizon
    }

    pub fn tau_max(&self) -> f64 {
        self.config.tau_max
    }

    pub fn points(&self) -> usize {
        self.config.points
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Number of knots that are evaluated (lag <= tau_max).
    pub fn active_knots(&self) -> usize {
        self.active
    }

    pub fn knot(&self, j: usize) -> f64 {
        j as f64 * self.delta
    }

    pub fn phi_values(&self, l: usize) -> &[f64] {
        &self.phi_values[l]
    }

    pub fn cum_values(&self, l: usize) -> &[f64] {
        &self.cum_values[l]
    }

    pub fn clamp_warnings(&self) -> usize {
        self.clamp_warnings.load(Ordering::Relaxed)
    }

    #[inline]
    fn stencil_unchecked(&self, x: f64) -> Stencil {
        let pos = x / self.delta;
        let last = self.config.points - 2;
        let j = (pos.floor() as usize).min(last);
        Stencil {
            j,
            frac: (pos - j as f64).clamp(0.0, 1.0),
        }
    }

    /// Stencil for `phi` at `lag`, or `None` beyond the truncation lag.
    #[inline]
    pub fn phi_stencil(&self, lag: f64) -> Option<Stencil> {
        if lag > self.config.tau_max {
            None
        } else {
            Some(self.stencil_unchecked(lag.max(0.0)))
        }
    }

    #[inline]
    pub fn phi_at(&self, l: usize, lag: f64) -> f64 {
        match self.phi_stencil(lag) {
            None => 0.0,
            Some(s) => interp(&self.phi_values[l], s),
        }
    }

    pub fn interp_phi(&self, l: usize, lag: f64) -> Result<f64> {
        if lag < 0.0 {
            return Err(Error::invalid(format!("negative lag {lag}")));
        }
        Ok(self.phi_at(l, lag))
    }

    /// Stencil for `F` at `t`, clamping `t` into `[0, T]` (each clamp bumps
    /// the warning counter).
    pub fn cum_stencil(&self, t: f64) -> Stencil {
        let tc = if t < 0.0 || t > self.config.horizon {
            self.clamp_warnings.fetch_add(1, Ordering::Relaxed);
            t.clamp(0.0, self.config.horizon)
        } else {
            t
        };
        self.stencil_unchecked(tc)
    }

    pub fn interp_cum(&self, l: usize, t: f64) -> f64 {
        interp(&self.cum_values[l], self.cum_stencil(t))
    }
}

#[inline]
pub fn interp(values: &[f64], s: Stencil) -> f64 {
    (1.0 - s.frac) * values[s.j] + s.frac * values[s.j + 1]
}

pub fn cumulative_trapezoid(values: &[f64], delta: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in values.windows(2) {
        acc += 0.5 * delta * (w[0] + w[1]);
        out.push(acc);
    }
    out
}

/// Adjoint of [`cumulative_trapezoid`]: adds `dLoss/dvalues` given
/// `dLoss/dcum` into `d_values`.
pub fn cumulative_trapezoid_adjoint(d_cum: &[f64], delta: f64, d_values: &mut [f64]) {
    let g = d_cum.len();
    if g < 2 {
        return;
    }
    // suffix[k] = sum_{j >= k} d_cum[j]
    let mut suffix = 0.0;
    for k in (0..g).rev() {
        let s_next = suffix;
        suffix += d_cum[k];
        // cum[j] (j >= 1) = delta * (v0/2 + v1 + ... + v_{j-1} + vj/2)
        if k == 0 {
            d_values[0] += 0.5 * delta * s_next;
        } else {
            d_values[k] += delta * s_next + 0.5 * delta * d_cum[k];
        }
    }
}
