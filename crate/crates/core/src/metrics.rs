//! Held-out likelihood, distributional predictive metrics and kernel
//! recovery error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, EventSequence};
use crate::exec::{map_indexed, Parallelism};
use crate::model::{InfluenceModel, KernelModel};
use crate::objective::{evaluate, LossKind, ObjectiveConfig};
use crate::simulate::{thinning_simulate, SimConfig};

pub const DEFAULT_SMOOTHING: f64 = 1e-6;
pub const DEFAULT_GENERATED_SEQUENCES: usize = 100;

/// Held-out log-likelihood per event of a learned model (grid path).
/// Infeasible intensities at test events give `-inf`.
pub fn test_loglik(model: &KernelModel, test: &[EventSequence]) -> Result<f64> {
    let events: usize = test.iter().map(EventSequence::len).sum();
    if events == 0 {
        return Err(Error::invalid("test set has no events"));
    }
    match evaluate(model, test, &ObjectiveConfig::new(model, LossKind::Nll)) {
        Ok(bd) => Ok(-bd.total * test.len() as f64 / events as f64),
        Err(e) if e.is_numerical() => Ok(f64::NEG_INFINITY),
        Err(e) => Err(e),
    }
}

/// Log-likelihood per event of any intensity source, using the clamped
/// intensity `max(lambda, 0)` and composite Simpson quadrature with panels
/// no wider than `step` between consecutive events.
pub fn quadrature_loglik<M: InfluenceModel + ?Sized>(
    source: &M,
    test: &[EventSequence],
    step: f64,
    parallelism: Parallelism,
) -> Result<f64> {
    let events: usize = test.iter().map(EventSequence::len).sum();
    if events == 0 {
        return Err(Error::invalid("test set has no events"));
    }
    if !(step > 0.0) {
        return Err(Error::invalid("quadrature step must be positive"));
    }
    let per_seq = map_indexed(test.len(), parallelism, |s| sequence_loglik(source, &test[s], step));
    let total: f64 = per_seq.iter().sum();
    Ok(total / events as f64)
}

fn sequence_loglik<M: InfluenceModel + ?Sized>(source: &M, seq: &EventSequence, step: f64) -> f64 {
    let n = source.num_nodes();
    let ev = seq.events();
    let mut lam = vec![0.0; n];
    let mut log_sum = 0.0;
    for (i, e) in ev.iter().enumerate() {
        source.intensities(e.t, &ev[..i], &mut lam);
        let x = lam[e.node].max(0.0);
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        log_sum += x.ln();
    }
    let mut breaks = Vec::with_capacity(ev.len() + 2);
    breaks.push(0.0);
    breaks.extend(ev.iter().map(|e| e.t));
    breaks.push(seq.horizon());
    let mut integral = 0.0;
    for (k, w) in breaks.windows(2).enumerate() {
        // Inside (t_k, t_{k+1}) the history is the first k events.
        integral += simpson_clamped(source, &ev[..k], w[0], w[1], step, &mut lam);
    }
    log_sum - integral
}

fn simpson_clamped<M: InfluenceModel + ?Sized>(
    source: &M,
    history: &[Event],
    a: f64,
    b: f64,
    step: f64,
    lam: &mut [f64],
) -> f64 {
    if b <= a {
        return 0.0;
    }
    let pairs = ((b - a) / (2.0 * step)).ceil().max(1.0) as usize;
    let m = 2 * pairs;
    let h = (b - a) / m as f64;
    let mut acc = 0.0;
    for k in 0..=m {
        let t = if k == m { b } else { a + k as f64 * h };
        source.intensities(t, history, lam);
        let f: f64 = lam.iter().map(|x| x.max(0.0)).sum();
        let w = if k == 0 || k == m {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * f;
    }
    acc * h / 3.0
}

/// Compensator increments `Lambda(t_i) - Lambda(t_{i-1})` of the pooled
/// process (all nodes, clamped intensity), starting from `Lambda(0) = 0`.
/// Under a correct model they are i.i.d. unit exponentials.
pub fn rescaled_intervals<M: InfluenceModel + ?Sized>(
    source: &M,
    seq: &EventSequence,
    step: f64,
) -> Vec<f64> {
    let ev = seq.events();
    let mut lam = vec![0.0; source.num_nodes()];
    let mut prev = 0.0;
    ev.iter()
        .enumerate()
        .map(|(k, e)| {
            let out = simpson_clamped(source, &ev[..k], prev, e.t, step, &mut lam);
            prev = e.t;
            out
        })
        .collect()
}

/// Kolmogorov-Smirnov distance between the empirical distribution of
/// `samples` and the unit exponential.
pub fn ks_unit_exponential(samples: &[f64]) -> f64 {
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(i, &xi)| {
            let cdf = 1.0 - (-xi.max(0.0)).exp();
            (cdf - i as f64 / n).max((i + 1) as f64 / n - cdf)
        })
        .fold(0.0, f64::max)
}

fn check_same_horizon(a: &[EventSequence], b: &[EventSequence]) -> Result<f64> {
    let h = a
        .first()
        .or(b.first())
        .map(EventSequence::horizon)
        .ok_or_else(|| Error::invalid("empty sequence set"))?;
    if a.iter().chain(b).any(|s| (s.horizon() - h).abs() > 1e-9 * h) {
        return Err(Error::invalid("sequence sets have different horizons"));
    }
    Ok(h)
}

fn mean_count(seqs: &[EventSequence]) -> f64 {
    seqs.iter().map(|s| s.len() as f64).sum::<f64>() / seqs.len() as f64
}

/// Absolute difference of the mean event frequency (events per unit time
/// per sequence).
pub fn time_mae(generated: &[EventSequence], test: &[EventSequence]) -> Result<f64> {
    if generated.is_empty() || test.is_empty() {
        return Err(Error::invalid("time MAE needs non-empty sequence sets"));
    }
    let h = check_same_horizon(generated, test)?;
    Ok((mean_count(generated) - mean_count(test)).abs() / h)
}

/// Absolute difference of the mean number of events per sequence.
pub fn count_mae(generated: &[EventSequence], test: &[EventSequence]) -> Result<f64> {
    if generated.is_empty() || test.is_empty() {
        return Err(Error::invalid("count MAE needs non-empty sequence sets"));
    }
    Ok((mean_count(generated) - mean_count(test)).abs())
}

/// Empirical node distribution with add-`smoothing` regularization.
pub fn type_distribution(seqs: &[EventSequence], num_nodes: usize, smoothing: f64) -> Vec<f64> {
    let mut counts = vec![0.0; num_nodes];
    for s in seqs {
        for e in s.events() {
            counts[e.node] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    let norm = 1.0 + smoothing * num_nodes as f64;
    counts
        .iter()
        .map(|&c| {
            let p = if total > 0.0 { c / total } else { 1.0 / num_nodes as f64 };
            (p + smoothing) / norm
        })
        .collect()
}

/// `KL(p_test || p_generated)` over node frequencies in nats.
pub fn type_kld(
    generated: &[EventSequence],
    test: &[EventSequence],
    num_nodes: usize,
    smoothing: f64,
) -> Result<f64> {
    if !(smoothing > 0.0) {
        return Err(Error::invalid("smoothing must be positive"));
    }
    let max_node = generated.iter().chain(test).filter_map(EventSequence::max_node).max();
    if max_node.is_some_and(|v| v >= num_nodes) {
        return Err(Error::invalid("event node exceeds the node count"));
    }
    let p = type_distribution(test, num_nodes, smoothing);
    let q = type_distribution(generated, num_nodes, smoothing);
    Ok(kl_divergence(&p, &q))
}

pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum::<f64>()
        .max(0.0)
}

/// Source times and lags at which kernels are compared (every node pair).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeGrid {
    pub t_primes: Vec<f64>,
    pub lags: Vec<f64>,
}

impl ProbeGrid {
    /// Ten source times spread over `[0, T)` and lags `0, 0.1, ..., max_lag`.
    pub fn standard(horizon: f64, max_lag: f64) -> Self {
        let steps = (max_lag / 0.1).round() as usize;
        Self {
            t_primes: (0..10).map(|k| k as f64 * horizon / 10.0).collect(),
            lags: (0..=steps).map(|k| k as f64 * max_lag / steps.max(1) as f64).collect(),
        }
    }
}

/// `||k_model - k_truth||_2 / ||k_truth||_2` over the probe grid.
pub fn kernel_recovery_error<A, B>(model: &A, truth: &B, probe: &ProbeGrid) -> Result<f64>
where
    A: InfluenceModel + ?Sized,
    B: InfluenceModel + ?Sized,
{
    let n = truth.num_nodes();
    if model.num_nodes() != n {
        return Err(Error::invalid(format!(
            "model has {} nodes, truth has {n}",
            model.num_nodes()
        )));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for &tp in &probe.t_primes {
        for &lag in &probe.lags {
            for a in 0..n {
                for b in 0..n {
                    let kt = truth.kernel(tp, tp + lag, a, b);
                    let km = model.kernel(tp, tp + lag, a, b);
                    num += (km - kt).powi(2);
                    den += kt * kt;
                }
            }
        }
    }
    if den == 0.0 {
        return Err(Error::invalid("truth kernel vanishes on the probe grid"));
    }
    Ok((num / den).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub generated_sequences: usize,
    pub seed: u64,
    pub smoothing: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            generated_sequences: DEFAULT_GENERATED_SEQUENCES,
            seed: 0,
            smoothing: DEFAULT_SMOOTHING,
        }
    }
}

/// JSON has no infinities; non-finite values are written as the strings
/// `"inf"`, `"-inf"` and `"nan"`.
mod extended_float {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else if x.is_nan() {
            s.serialize_str("nan")
        } else if *x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(x) => Ok(x),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(with = "extended_float")]
    pub test_ll_per_event: f64,
    /// Events per unit time.
    pub time_mae: f64,
    /// Events per sequence.
    pub count_mae: f64,
    pub type_kld: f64,
    pub kernel_l2_rel: Option<f64>,
    pub num_test_sequences: usize,
    pub num_test_events: usize,
    pub num_generated_sequences: usize,
    pub num_generated_events: usize,
    pub smoothing: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl MetricsReport {
    /// Fixed-order plain-text table.
    pub fn table(&self) -> String {
        let kernel = self
            .kernel_l2_rel
            .map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"));
        format!(
            "test_ll_per_event  {:.6}\ntime_mae           {:.6}\ncount_mae          {:.6}\ntype_kld           {:.6}\nkernel_l2_rel      {}\ntest sequences     {}\ntest events        {}\ngenerated seqs     {}\ngenerated events   {}\n",
            self.test_ll_per_event,
            self.time_mae,
            self.count_mae,
            self.type_kld,
            kernel,
            self.num_test_sequences,
            self.num_test_events,
            self.num_generated_sequences,
            self.num_generated_events,
        )
    }
}

/// Generates sequences from `source`, compares them against `test`, and
/// bundles the supplied held-out log-likelihood.
pub fn build_report<M: InfluenceModel + ?Sized>(
    source: &M,
    test_ll_per_event: f64,
    test: &[EventSequence],
    kernel_l2_rel: Option<f64>,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let horizon = test
        .first()
        .map(EventSequence::horizon)
        .ok_or_else(|| Error::invalid("empty test set"))?;
    let n = source.num_nodes();
    if test.iter().filter_map(EventSequence::max_node).any(|v| v >= n) {
        return Err(Error::invalid(format!(
            "test data references nodes beyond the model's {n}"
        )));
    }
    let sim = thinning_simulate(
        source,
        &SimConfig {
            num_sequences: opts.generated_sequences,
            horizon,
            seed: opts.seed,
            ..Default::default()
        },
    )?;
    Ok(MetricsReport {
        test_ll_per_event,
        time_mae: time_mae(&sim.sequences, test)?,
        count_mae: count_mae(&sim.sequences, test)?,
        type_kld: type_kld(&sim.sequences, test, n, opts.smoothing)?,
        kernel_l2_rel,
        num_test_sequences: test.len(),
        num_test_events: test.iter().map(EventSequence::len).sum(),
        num_generated_sequences: sim.sequences.len(),
        num_generated_events: sim.sequences.iter().map(EventSequence::len).sum(),
        smoothing: opts.smoothing,
        seed: opts.seed,
        diagnostics: if test_ll_per_event == f64::NEG_INFINITY {
            vec!["intensity is non-positive at a test event".to_string()]
        } else {
            Vec::new()
        },
    })
}
