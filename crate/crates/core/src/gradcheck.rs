//! Central-difference checks of every analytic gradient in the crate.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{cross_entropy, rwwce_loss, seesaw_factors, seesaw_loss_with_factors, CostMatrix, CountMode, SeesawState};
use crate::prior::{loc_loss_masked, DropoutMasks, PriorMlp, PrototypeMatrix};

pub const STEP: f64 = 1e-6;
pub const THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Seesaw,
    Rwwce,
    Loc,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::CrossEntropy, LossKind::Seesaw, LossKind::Rwwce, LossKind::Loc];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "ce",
            LossKind::Seesaw => "seesaw",
            LossKind::Rwwce => "rwwce",
            LossKind::Loc => "loc",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown loss `{s}` (ce|seesaw|rwwce|loc)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckSummary {
    pub loss: LossKind,
    pub trials: usize,
    pub max_rel_err: f64,
    pub failures: usize,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// `max|a - n| / max(max|a|, max|n|, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(1e-8)
}

/// Central differences of `f` around `x`.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + STEP;
        let up = f(&probe)?;
        probe[i] = orig - STEP;
        let down = f(&probe)?;
        probe[i] = orig;
        out.push((up - down) / (2.0 * STEP));
    }
    Ok(out)
}

fn logits(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    (0..c).map(|_| rng.random_range(-3.0..3.0)).collect()
}

fn trial(kind: LossKind, rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = rng.random_range(2..=7);
    let y = rng.random_range(0..c);
    match kind {
        LossKind::CrossEntropy => {
            let z = logits(rng, c);
            let a = cross_entropy(&z, y)?.grad;
            let n = numeric_gradient(&z, |v| Ok(cross_entropy(v, y)?.value))?;
            Ok(relative_error(&a, &n))
        }
        LossKind::Seesaw => {
            let z = logits(rng, c);
            let counts = (0..c).map(|_| rng.random_range(0..200)).collect();
            let state = SeesawState::new(counts, rng.random_range(0.0..2.0), rng.random_range(0.0..3.0), CountMode::Static)?;
            // compensation frozen at the evaluation point
            let factors = seesaw_factors(&z, y, &state)?;
            let a = seesaw_loss_with_factors(&z, y, &factors)?.grad;
            let n = numeric_gradient(&z, |v| Ok(seesaw_loss_with_factors(v, y, &factors)?.value))?;
            Ok(relative_error(&a, &n))
        }
        LossKind::Rwwce => {
            let z = logits(rng, c);
            let cost: Vec<f64> = (0..c * c)
                .map(|i| if i / c == i % c { 0.0 } else { rng.random_range(0.0..5.0) })
                .collect();
            let cost = CostMatrix::new(c, cost)?;
            let fn_w: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..5.0)).collect();
            let a = rwwce_loss(&z, y, &cost, &fn_w)?.grad;
            let n = numeric_gradient(&z, |v| Ok(rwwce_loss(v, y, &cost, &fn_w)?.value))?;
            Ok(relative_error(&a, &n))
        }
        LossKind::Loc => {
            let d_in = rng.random_range(1..=5);
            let h = rng.random_range(2..=6);
            let d_out = rng.random_range(2..=4);
            let dropout = if rng.random::<bool>() { 0.3 } else { 0.0 };
            let mut model = PriorMlp::new(d_in, h, d_out, dropout, rng.random())?;
            model.params_mut().iter_mut().for_each(|p| *p += rng.random_range(-0.1..0.1));
            let o = Array2::from_shape_simple_fn((d_out, c), || rng.random_range(-1.0..1.0));
            let o = PrototypeMatrix::from_columns(o, false)?;
            let x: Vec<f64> = (0..d_in).map(|_| rng.random_range(-2.0..2.0)).collect();
            let r: Vec<f64> = (0..d_in).map(|_| rng.random_range(-2.0..2.0)).collect();
            let lambda = rng.random_range(0.5..10.0);
            let (mx, mr) = if dropout > 0.0 {
                (
                    Some(DropoutMasks::sample(1, h, dropout, rng)),
                    Some(DropoutMasks::sample(1, h, dropout, rng)),
                )
            } else {
                (None, None)
            };
            let a = loc_loss_masked(&model, &x, &r, &o, y, lambda, mx.as_ref(), mr.as_ref())?.grad;
            let base = model.params().to_vec();
            let mut probe = model.clone();
            let n = numeric_gradient(&base, |p| {
                probe.params_mut().copy_from_slice(p);
                Ok(loc_loss_masked(&probe, &x, &r, &o, y, lambda, mx.as_ref(), mr.as_ref())?.value)
            })?;
            Ok(relative_error(&a, &n))
        }
    }
}

/// Runs `trials` random instances of one loss from a fixed seed.
pub fn run_suite(kind: LossKind, trials: usize, seed: u64) -> Result<GradcheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ kind as u64);
    let mut max_rel_err = 0.0f64;
    let mut failures = 0;
    for _ in 0..trials {
        let err = trial(kind, &mut rng)?;
        if err.is_nan() || err >= THRESHOLD {
            failures += 1;
        }
        max_rel_err = max_rel_err.max(err);
    }
    Ok(GradcheckSummary {
        loss: kind,
        trials,
        max_rel_err,
        failures,
    })
}
