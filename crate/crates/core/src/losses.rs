//! Classification losses over a single logit vector: cross-entropy, seesaw,
//! and a cost-matrix weighted cross-entropy.
//!
//! Every loss returns its value together with the analytic gradient with
//! respect to the logits.

use crate::data::ClassTable;
use crate::error::{Error, Result};

/// Probability clamp used by every `log` of a probability.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// d value / d logits.
    pub grad: Vec<f64>,
}

fn check_logits(z: &[f64]) -> Result<()> {
    if z.is_empty() {
        return Err(Error::arg("empty logit vector"));
    }
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::arg(format!("non-finite logit at index {i}")));
    }
    Ok(())
}

fn check_label(y: usize, c: usize) -> Result<()> {
    if y >= c {
        return Err(Error::arg(format!("label {y} out of range for {c} classes")));
    }
    Ok(())
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    check_logits(z)?;
    Ok(softmax_unchecked(z))
}

pub(crate) fn softmax_unchecked(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn cross_entropy(z: &[f64], y: usize) -> Result<LossResult> {
    check_logits(z)?;
    check_label(y, z.len())?;
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
    let value = (m + sum.ln() - z[y]).max(0.0);
    let mut grad = softmax_unchecked(z);
    grad[y] -= 1.0;
    Ok(LossResult { value, grad })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountMode {
    /// Counts fixed at construction.
    Static,
    /// Each evaluated label increments its class count.
    Online,
}

/// Per-class counts and exponents for the seesaw reweighting.
#[derive(Debug, Clone, PartialEq)]
pub struct SeesawState {
    class_counts: Vec<f64>,
    /// Mitigation exponent.
    pub p: f64,
    /// Compensation exponent.
    pub q: f64,
    pub count_mode: CountMode,
}

impl SeesawState {
    pub const DEFAULT_P: f64 = 0.8;
    pub const DEFAULT_Q: f64 = 2.0;

    pub fn new(class_counts: Vec<u64>, p: f64, q: f64, count_mode: CountMode) -> Result<Self> {
        if class_counts.is_empty() {
            return Err(Error::arg("seesaw needs at least one class"));
        }
        if !(p >= 0.0 && q >= 0.0 && p.is_finite() && q.is_finite()) {
            return Err(Error::arg(format!("seesaw exponents must be finite and >= 0 (p={p}, q={q})")));
        }
        Ok(SeesawState {
            class_counts: class_counts.into_iter().map(|c| c as f64).collect(),
            p,
            q,
            count_mode,
        })
    }

    /// Static counts from a training-label histogram.
    pub fn from_labels(labels: &[usize], classes: usize, p: f64, q: f64) -> Result<Self> {
        let mut counts = vec![0u64; classes];
        for &y in labels {
            check_label(y, classes)?;
            counts[y] += 1;
        }
        Self::new(counts, p, q, CountMode::Static)
    }

    pub fn classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn counts(&self) -> &[f64] {
        &self.class_counts
    }

    /// Records a positive label; no-op in static mode.
    pub fn record(&mut self, y: usize) {
        if self.count_mode == CountMode::Online {
            self.class_counts[y] += 1.0;
        }
    }

    /// Evaluates the loss, then records `y` (online mode).
    pub fn loss(&mut self, z: &[f64], y: usize) -> Result<LossResult> {
        let r = seesaw_loss(z, y, self)?;
        self.record(y);
        Ok(r)
    }
}

/// Row `y` of the seesaw factor matrix: `S_yj = M_yj * C_yj`, with `S_yy = 1`.
///
/// Mitigation `M_yj = min(1, (N_j/N_y)^p)` (1 when `N_y = 0`), compensation
/// `C_yj = max(1, (sigma_j/sigma_y)^q)`.
pub fn seesaw_factors(z: &[f64], y: usize, state: &SeesawState) -> Result<Vec<f64>> {
    check_logits(z)?;
    check_label(y, z.len())?;
    if state.classes() != z.len() {
        return Err(Error::arg(format!(
            "seesaw state has {} classes, logits have {}",
            state.classes(),
            z.len()
        )));
    }
    let counts = &state.class_counts;
    if state.p > 0.0 && counts.iter().all(|&c| c == 0.0) {
        log::warn!("seesaw counts are all zero; mitigation disabled");
    }
    // sigma_j / sigma_y = exp(z_j - z_y)
    let ny = counts[y];
    Ok((0..z.len())
        .map(|j| {
            if j == y {
                return 1.0;
            }
            let mitigation = if ny == 0.0 {
                1.0
            } else {
                (counts[j] / ny).powf(state.p).min(1.0)
            };
            let compensation = ((z[j] - z[y]) * state.q).exp().max(1.0);
            mitigation * compensation
        })
        .collect())
}

/// Seesaw loss with explicit factors, held constant in the gradient.
pub fn seesaw_loss_with_factors(z: &[f64], y: usize, factors: &[f64]) -> Result<LossResult> {
    check_logits(z)?;
    check_label(y, z.len())?;
    if factors.len() != z.len() {
        return Err(Error::arg("seesaw factor row length differs from logits"));
    }
    if let Some(j) = factors.iter().position(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::arg(format!("seesaw factor {j} must be finite and >= 0")));
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // weighted terms w_j = S_yj e^{z_j - m}, with S_yy = 1
    let w: Vec<f64> = z
        .iter()
        .enumerate()
        .map(|(j, &v)| if j == y { 1.0 } else { factors[j] } * (v - m).exp())
        .collect();
    let denom: f64 = w.iter().sum();
    let value = (denom.ln() - (z[y] - m)).max(0.0);
    let grad = w
        .iter()
        .enumerate()
        .map(|(j, &wj)| if j == y { wj / denom - 1.0 } else { wj / denom })
        .collect();
    Ok(LossResult { value, grad })
}

/// `-log sigma_hat_y` with `sigma_hat_i = e^{z_i} / (sum_{j != i} S_ij e^{z_j} + e^{z_i})`.
///
/// Compensation factors depend on `z` but are treated as constants when
/// differentiating.
pub fn seesaw_loss(z: &[f64], y: usize, state: &SeesawState) -> Result<LossResult> {
    let factors = seesaw_factors(z, y, state)?;
    seesaw_loss_with_factors(z, y, &factors)
}

/// Off-diagonal misclassification costs; `cost[truth][pred]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    c: usize,
    cost: Vec<f64>,
}

impl CostMatrix {
    pub fn new(c: usize, cost: Vec<f64>) -> Result<Self> {
        if cost.len() != c * c {
            return Err(Error::arg("cost matrix must be C x C"));
        }
        for y in 0..c {
            for j in 0..c {
                let v = cost[y * c + j];
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::arg(format!("cost[{y}][{j}] = {v} must be finite and >= 0")));
                }
                if y == j && v != 0.0 {
                    return Err(Error::arg(format!("cost[{y}][{y}] must be zero")));
                }
            }
        }
        Ok(CostMatrix { c, cost })
    }

    pub fn classes(&self) -> usize {
        self.c
    }

    pub fn get(&self, truth: usize, pred: usize) -> f64 {
        self.cost[truth * self.c + pred]
    }

    pub fn row(&self, truth: usize) -> &[f64] {
        &self.cost[truth * self.c..(truth + 1) * self.c]
    }
}

/// Weights per confusion type, keyed by (truth status, predicted status).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfusionCosts {
    pub harmless_to_harmless: f64,
    pub harmless_to_venomous: f64,
    pub venomous_to_harmless: f64,
    pub venomous_to_venomous: f64,
}

impl Default for ConfusionCosts {
    /// The composite metric's weights on P1..P4.
    fn default() -> Self {
        ConfusionCosts {
            harmless_to_harmless: 1.0,
            harmless_to_venomous: 2.0,
            venomous_to_harmless: 5.0,
            venomous_to_venomous: 2.0,
        }
    }
}

pub fn build_cost_matrix(classes: &ClassTable, w: ConfusionCosts) -> Result<CostMatrix> {
    let c = classes.len();
    let mut cost = vec![0.0; c * c];
    for y in 0..c {
        for j in 0..c {
            if y == j {
                continue;
            }
            cost[y * c + j] = match (classes.is_venomous(y), classes.is_venomous(j)) {
                (false, false) => w.harmless_to_harmless,
                (false, true) => w.harmless_to_venomous,
                (true, false) => w.venomous_to_harmless,
                (true, true) => w.venomous_to_venomous,
            };
        }
    }
    CostMatrix::new(c, cost)
}

/// Cost-weighted cross-entropy:
/// `-fn_weight[y] log sigma_y - sum_{j != y} cost[y][j] log(1 - sigma_j)`.
///
/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`; a clamped term
/// contributes no gradient.
pub fn rwwce_loss(z: &[f64], y: usize, cost: &CostMatrix, fn_weight: &[f64]) -> Result<LossResult> {
    check_logits(z)?;
    let c = z.len();
    check_label(y, c)?;
    if cost.classes() != c || fn_weight.len() != c {
        return Err(Error::arg("rwwce shapes disagree with logits"));
    }
    if let Some(i) = fn_weight.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::arg(format!("fn_weight[{i}] must be finite and >= 0")));
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = e.iter().sum();
    let sigma: Vec<f64> = e.iter().map(|v| v / total).collect();

    let mut value = 0.0;
    let mut grad = vec![0.0; c];

    let wy = fn_weight[y];
    let sy = sigma[y];
    if sy >= PROB_EPS {
        value -= wy * sy.ln();
        for k in 0..c {
            grad[k] += wy * (sigma[k] - if k == y { 1.0 } else { 0.0 });
        }
    } else {
        value -= wy * PROB_EPS.ln();
    }

    // d(-log(1 - s_j))/dz_k = s_j (delta_jk - s_k) / (1 - s_j)
    let mut coupling = 0.0;
    for j in 0..c {
        let cj = cost.get(y, j);
        if j == y || cj == 0.0 {
            continue;
        }
        let rest = (total - e[j]) / total;
        if rest >= PROB_EPS {
            value -= cj * rest.ln();
            let r = cj * sigma[j] / rest;
            grad[j] += r;
            coupling += r;
        } else {
            value -= cj * PROB_EPS.ln();
        }
    }
    for k in 0..c {
        grad[k] -= sigma[k] * coupling;
    }
    Ok(LossResult {
        value: value.max(0.0),
        grad,
    })
}
