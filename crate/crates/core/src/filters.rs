//! Banks of localized graph filters `B_1..B_R`.
//!
//! Three parametrizations are supported:
//! * `Chebyshev`: fixed polynomials `T_0..T_{R-1}` of the scaled Laplacian.
//! * `L3Net`: one learnable filter per hop order, free on its hop shell.
//! * `Gat`: learnable attention-style filters, a per-source-row softmax of
//!   free logits restricted to a support mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NeighborhoodIndex, SpectralData};
use crate::matrix::SquareMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    Chebyshev,
    L3net,
    Gat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatSupport {
    /// Nodes at hop distance exactly one from the source.
    OneHop,
    /// Every node, including the source itself.
    Full,
}

/// Upper end of the uniform initialization for L3Net entries.
pub const L3NET_INIT_MAX: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    mode: FilterMode,
    num_nodes: usize,
    /// Hop order per filter (L3Net only).
    #[serde(default)]
    orders: Vec<usize>,
    #[serde(default)]
    support: Option<GatSupport>,
    /// Per filter, the masked-in `(source, target)` entries in row-major order.
    masks: Vec<Vec<(usize, usize)>>,
    /// Stored matrices for the fixed Chebyshev bank.
    #[serde(default)]
    fixed: Vec<SquareMatrix>,
    free_params: Vec<f64>,
}

pub fn chebyshev_bank(spec: &SpectralData, r: usize) -> Result<FilterBank> {
    if r == 0 {
        return Err(Error::invalid("filter bank needs R >= 1"));
    }
    let n = spec.scaled_laplacian.dim();
    let lt = &spec.scaled_laplacian;
    let mut fixed = vec![SquareMatrix::identity(n)];
    if r > 1 {
        fixed.push(lt.clone());
    }
    while fixed.len() < r {
        let k = fixed.len();
        let mut next = lt.matmul(&fixed[k - 1]).scaled(2.0);
        next.axpy(-1.0, &fixed[k - 2]);
        fixed.push(next);
    }
    let masks = fixed
        .iter()
        .map(|b| {
            let mut entries = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    if b.get(i, j) != 0.0 {
                        entries.push((i, j));
                    }
                }
            }
            entries
        })
        .collect();
    Ok(FilterBank {
        mode: FilterMode::Chebyshev,
        num_nodes: n,
        orders: Vec::new(),
        support: None,
        masks,
        fixed,
        free_params: Vec::new(),
    })
}

pub fn l3net_bank<R: Rng + ?Sized>(
    idx: &NeighborhoodIndex,
    orders: &[usize],
    rng: &mut R,
) -> Result<FilterBank> {
    if orders.is_empty() {
        return Err(Error::invalid("filter bank needs R >= 1"));
    }
    let n = idx.num_nodes();
    let mut masks = Vec::with_capacity(orders.len());
    for &order in orders {
        if order > idx.max_order() {
            return Err(Error::OrderTooLarge {
                order,
                max: idx.max_order(),
            });
        }
        let mut entries = Vec::new();
        for src in 0..n {
            for &dst in idx.shell(order, src) {
                entries.push((src, dst));
            }
        }
        masks.push(entries);
    }
    let count: usize = masks.iter().map(Vec::len).sum();
    let free_params = (0..count).map(|_| rng.gen_range(0.0..L3NET_INIT_MAX)).collect();
    Ok(FilterBank {
        mode: FilterMode::L3net,
        num_nodes: n,
        orders: orders.to_vec(),
        support: None,
        masks,
        fixed: Vec::new(),
        free_params,
    })
}

pub fn gat_bank(idx: &NeighborhoodIndex, r: usize, support: GatSupport) -> Result<FilterBank> {
    if r == 0 {
        return Err(Error::invalid("filter bank needs R >= 1"));
    }
    let n = idx.num_nodes();
    let mut entries = Vec::new();
    for src in 0..n {
        match support {
            GatSupport::OneHop => {
                if idx.max_order() < 1 {
                    return Err(Error::OrderTooLarge {
                        order: 1,
                        max: idx.max_order(),
                    });
                }
                entries.extend(idx.shell(1, src).iter().map(|&dst| (src, dst)));
            }
            GatSupport::Full => entries.extend((0..n).map(|dst| (src, dst))),
        }
    }
    let count = entries.len() * r;
    Ok(FilterBank {
        mode: FilterMode::Gat,
        num_nodes: n,
        orders: Vec::new(),
        support: Some(support),
        masks: vec![entries; r],
        fixed: Vec::new(),
        free_params: vec![0.0; count],
    })
}

impl FilterBank {
    pub fn mode(&self) -> FilterMode {
        self.mode
    }

    pub fn num_filters(&self) -> usize {
        self.masks.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn orders(&self) -> &[usize] {
        &self.orders
    }

    pub fn mask(&self, r: usize) -> &[(usize, usize)] {
        &self.masks[r]
    }

    pub fn is_masked_in(&self, r: usize, src: usize, dst: usize) -> bool {
        self.masks[r].binary_search(&(src, dst)).is_ok()
    }

    pub fn num_params(&self) -> usize {
        self.free_params.len()
    }

    pub fn free_params(&self) -> &[f64] {
        &self.free_params
    }

    pub fn set_free_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.free_params.len() {
            return Err(Error::invalid(format!(
                "expected {} filter parameters, got {}",
                self.free_params.len(),
                params.len()
            )));
        }
        self.free_params.copy_from_slice(params);
        Ok(())
    }

    /// Offsets of each filter's block inside `free_params`.
    fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.masks.len());
        let mut acc = 0;
        for m in &self.masks {
            off.push(acc);
            acc += m.len();
        }
        off
    }

    /// Concrete `B_r` matrices for the current parameters.
    pub fn materialize(&self) -> Vec<SquareMatrix> {
        let n = self.num_nodes;
        match self.mode {
            FilterMode::Chebyshev => self.fixed.clone(),
            FilterMode::L3net => {
                let mut out = Vec::with_capacity(self.masks.len());
                let mut p = self.free_params.iter();
                for mask in &self.masks {
                    let mut b = SquareMatrix::zeros(n);
                    for (&(i, j), &val) in mask.iter().zip(&mut p) {
                        b.set(i, j, val);
                    }
                    out.push(b);
                }
                out
            }
            FilterMode::Gat => {
                let offsets = self.offsets();
                self.masks
                    .iter()
                    .zip(offsets)
                    .map(|(mask, off)| {
                        let mut b = SquareMatrix::zeros(n);
                        let logits = &self.free_params[off..off + mask.len()];
                        for (range, row) in row_groups(mask) {
                            let probs = softmax(&logits[range.clone()]);
                            for (k, p) in range.zip(probs) {
                                b.set(row, mask[k].1, p);
                            }
                        }
                        b
                    })
                    .collect()
            }
        }
    }

    /// Gradient with respect to `free_params`, given `dLoss/dB_r` for every
    /// filter.
    pub fn filter_grad(&self, upstream: &[SquareMatrix]) -> Result<Vec<f64>> {
        if upstream.len() != self.masks.len() {
            return Err(Error::invalid("one upstream matrix per filter required"));
        }
        match self.mode {
            FilterMode::Chebyshev => Err(Error::NotTrainable),
            FilterMode::L3net => Ok(self
                .masks
                .iter()
                .zip(upstream)
                .flat_map(|(mask, up)| mask.iter().map(move |&(i, j)| up.get(i, j)))
                .collect()),
            FilterMode::Gat => {
                let mut grad = vec![0.0; self.free_params.len()];
                for ((mask, up), off) in self.masks.iter().zip(upstream).zip(self.offsets()) {
                    let logits = &self.free_params[off..off + mask.len()];
                    for (range, row) in row_groups(mask) {
                        let probs = softmax(&logits[range.clone()]);
                        let g: Vec<f64> = range.clone().map(|k| up.get(row, mask[k].1)).collect();
                        let mean: f64 = probs.iter().zip(&g).map(|(p, gk)| p * gk).sum();
                        for ((k, p), gk) in range.zip(&probs).zip(&g) {
                            grad[off + k] = p * (gk - mean);
                        }
                    }
                }
                Ok(grad)
            }
        }
    }
}

/// Contiguous runs of entries sharing a source row.
fn row_groups(mask: &[(usize, usize)]) -> Vec<(std::ops::Range<usize>, usize)> {
    let mut groups = Vec::new();
    let mut start = 0;
    while start < mask.len() {
        let row = mask[start].0;
        let mut end = start;
        while end < mask.len() && mask[end].0 == row {
            end += 1;
        }
        groups.push((start..end, row));
        start = end;
    }
    groups
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
