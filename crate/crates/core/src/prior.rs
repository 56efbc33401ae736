//! Location prior: a three-layer MLP mapping metadata features to an
//! embedding whose dot products with class prototypes score how plausible
//! each class is at that location.
//!
//! Training minimizes the presence-only negative log-likelihood
//!
//! ```text
//! L = -lambda log s(g(x).O_y) - sum_{i != y} log(1 - s(g(x).O_i)) - sum_i log(1 - s(g(r).O_i))
//! ```
//!
//! where `s` is the logistic sigmoid and `r` a uniformly random location.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::format::{read_container, read_sidecar, write_container, write_sidecar, FeatureMatrix};
use crate::losses::{LossResult, PROB_EPS};
use crate::optim::{adamw_step, lr_at, AdamWConfig, AdamWState, CosineSchedule};
use crate::pca::{pca_from_matrices, pca_matrices, PcaModel};

pub type PriorRng = ChaCha8Rng;

/// Three dense layers `d_in -> hidden -> hidden -> d_out`, ReLU between,
/// inverted dropout after the first two activations.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMlp {
    d_in: usize,
    hidden: usize,
    d_out: usize,
    pub dropout: f64,
    pub seed: u64,
    /// W1, b1, W2, b2, W3, b3 flattened; weights row-major (out x in).
    params: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct LayerSpan {
    w: usize,
    b: usize,
    out: usize,
    inp: usize,
}

impl PriorMlp {
    pub const DEFAULT_HIDDEN: usize = 256;
    pub const DEFAULT_DROPOUT: f64 = 0.3;

    /// He-uniform weights, zero biases, drawn from `seed`.
    pub fn new(d_in: usize, hidden: usize, d_out: usize, dropout: f64, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(d_in, hidden, d_out, dropout, seed)?;
        let mut rng = PriorRng::seed_from_u64(seed);
        for l in m.spans() {
            let bound = (6.0 / l.inp as f64).sqrt();
            for w in &mut m.params[l.w..l.w + l.out * l.inp] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(m)
    }

    pub fn zeros(d_in: usize, hidden: usize, d_out: usize, dropout: f64, seed: u64) -> Result<Self> {
        if d_in == 0 || hidden == 0 || d_out == 0 {
            return Err(Error::arg("prior layer sizes must be positive"));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::arg(format!("dropout {dropout} must lie in [0, 1)")));
        }
        let n = hidden * d_in + hidden + hidden * hidden + hidden + d_out * hidden + d_out;
        Ok(PriorMlp {
            d_in,
            hidden,
            d_out,
            dropout,
            seed,
            params: vec![0.0; n],
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn spans(&self) -> [LayerSpan; 3] {
        let (i, h, o) = (self.d_in, self.hidden, self.d_out);
        let w1 = 0;
        let b1 = w1 + h * i;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + o * h;
        [
            LayerSpan { w: w1, b: b1, out: h, inp: i },
            LayerSpan { w: w2, b: b2, out: h, inp: h },
            LayerSpan { w: w3, b: b3, out: o, inp: h },
        ]
    }

    fn weight(&self, l: LayerSpan) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((l.out, l.inp), &self.params[l.w..l.w + l.out * l.inp]).unwrap()
    }

    fn bias(&self, l: LayerSpan) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[l.b..l.b + l.out])
    }

    /// Weight and bias of each layer as matrices (bias as 1 x out).
    pub fn layer_matrices(&self) -> Result<Vec<FeatureMatrix>> {
        let mut out = Vec::with_capacity(6);
        for l in self.spans() {
            out.push(FeatureMatrix::new(l.out, l.inp, self.params[l.w..l.w + l.out * l.inp].to_vec())?);
            out.push(FeatureMatrix::new(1, l.out, self.params[l.b..l.b + l.out].to_vec())?);
        }
        Ok(out)
    }

    pub fn from_layer_matrices(ms: &[FeatureMatrix], dropout: f64, seed: u64) -> Result<Self> {
        if ms.len() != 6 {
            return Err(Error::arg(format!("prior needs 6 layer matrices, found {}", ms.len())));
        }
        let mut m = Self::zeros(ms[0].dims(), ms[0].rows(), ms[4].rows(), dropout, seed)?;
        for (k, l) in m.spans().into_iter().enumerate() {
            let (w, b) = (&ms[2 * k], &ms[2 * k + 1]);
            if w.rows() != l.out || w.dims() != l.inp || b.rows() != 1 || b.dims() != l.out {
                return Err(Error::arg(format!("prior layer {k} has inconsistent shape")));
            }
            m.params[l.w..l.w + l.out * l.inp].copy_from_slice(w.data());
            m.params[l.b..l.b + l.out].copy_from_slice(b.data());
        }
        Ok(m)
    }
}

/// Scaled dropout masks (entries 0 or 1/(1-p)) for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub first: Array2<f64>,
    pub second: Array2<f64>,
}

impl DropoutMasks {
    pub fn sample(batch: usize, hidden: usize, rate: f64, rng: &mut impl Rng) -> Self {
        let keep = 1.0 / (1.0 - rate);
        let mut draw = || {
            Array2::from_shape_simple_fn((batch, hidden), || if rng.random::<f64>() < rate { 0.0 } else { keep })
        };
        let first = draw();
        let second = draw();
        DropoutMasks { first, second }
    }
}

pub enum Mode<'a> {
    /// Dropout disabled (identity under inverted dropout).
    Eval,
    /// Fresh masks drawn from the given stream.
    Train(&'a mut PriorRng),
}

struct ForwardCache {
    x: Array2<f64>,
    z1: Array2<f64>,
    a1: Array2<f64>,
    z2: Array2<f64>,
    a2: Array2<f64>,
    out: Array2<f64>,
}

fn relu_masked(z: &Array2<f64>, mask: Option<&Array2<f64>>) -> Array2<f64> {
    let mut a = z.mapv(|v| v.max(0.0));
    if let Some(m) = mask {
        a *= m;
    }
    a
}

fn affine(x: &ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut z = x.dot(&w.t());
    z += &b;
    z
}

impl PriorMlp {
    fn forward_cached(&self, x: ArrayView2<f64>, masks: Option<&DropoutMasks>) -> ForwardCache {
        let [l1, l2, l3] = self.spans();
        let z1 = affine(&x, self.weight(l1), self.bias(l1));
        let a1 = relu_masked(&z1, masks.map(|m| &m.first));
        let z2 = affine(&a1.view(), self.weight(l2), self.bias(l2));
        let a2 = relu_masked(&z2, masks.map(|m| &m.second));
        let out = affine(&a2.view(), self.weight(l3), self.bias(l3));
        ForwardCache {
            x: x.to_owned(),
            z1,
            a1,
            z2,
            a2,
            out,
        }
    }

    /// Accumulates parameter gradients given d loss / d out.
    fn backward(&self, cache: &ForwardCache, d_out: &Array2<f64>, masks: Option<&DropoutMasks>, grad: &mut [f64]) {
        let [l1, l2, l3] = self.spans();
        let accumulate = |l: LayerSpan, delta: &Array2<f64>, input: &Array2<f64>, grad: &mut [f64]| {
            let mut gw = ArrayViewMut2::from_shape((l.out, l.inp), &mut grad[l.w..l.w + l.out * l.inp]).unwrap();
            gw += &delta.t().dot(input);
            let mut gb = ArrayViewMut1::from(&mut grad[l.b..l.b + l.out]);
            gb += &delta.sum_axis(Axis(0));
        };
        accumulate(l3, d_out, &cache.a2, grad);

        let mut d2 = d_out.dot(&self.weight(l3));
        if let Some(m) = masks {
            d2 *= &m.second;
        }
        d2.zip_mut_with(&cache.z2, |d, &z| if z <= 0.0 { *d = 0.0 });
        accumulate(l2, &d2, &cache.a1, grad);

        let mut d1 = d2.dot(&self.weight(l2));
        if let Some(m) = masks {
            d1 *= &m.first;
        }
        d1.zip_mut_with(&cache.z1, |d, &z| if z <= 0.0 { *d = 0.0 });
        accumulate(l1, &d1, &cache.x, grad);
    }
}

/// Embedding `g(x)` for one metadata vector.
pub fn prior_forward(model: &PriorMlp, x: &[f64], mode: Mode<'_>) -> Result<Vec<f64>> {
    if x.len() != model.d_in {
        return Err(Error::arg(format!("prior expects {} input dims, got {}", model.d_in, x.len())));
    }
    let xv = ArrayView2::from_shape((1, x.len()), x).unwrap();
    let masks = match mode {
        Mode::Eval => None,
        Mode::Train(rng) => Some(DropoutMasks::sample(1, model.hidden, model.dropout, rng)),
    };
    Ok(model.forward_cached(xv, masks.as_ref()).out.into_raw_vec_and_offset().0)
}

/// Class prototypes as columns of a `d_out x C` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeMatrix {
    o: Array2<f64>,
    pub normalized: bool,
    /// Classes whose column is zero (no rows, or a zero mean).
    pub empty_classes: Vec<usize>,
}

impl PrototypeMatrix {
    pub fn from_columns(o: Array2<f64>, normalized: bool) -> Result<Self> {
        if o.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prototype matrix".into()));
        }
        let empty_classes = (0..o.ncols())
            .filter(|&c| o.column(c).iter().all(|&v| v == 0.0))
            .collect();
        Ok(PrototypeMatrix {
            o,
            normalized,
            empty_classes,
        })
    }

    pub fn dims(&self) -> usize {
        self.o.nrows()
    }

    pub fn classes(&self) -> usize {
        self.o.ncols()
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.o.view()
    }

    pub fn column(&self, c: usize) -> ArrayView1<'_, f64> {
        self.o.column(c)
    }
}

/// Column `c` is the mean of rows labelled `c`, optionally L2-normalized.
pub fn compute_prototypes(
    features: &FeatureMatrix,
    labels: &[usize],
    classes: usize,
    normalize: bool,
) -> Result<PrototypeMatrix> {
    if labels.len() != features.rows() {
        return Err(Error::arg(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.rows()
        )));
    }
    if classes == 0 {
        return Err(Error::arg("no classes"));
    }
    let d = features.dims();
    let mut sums = Array2::<f64>::zeros((d, classes));
    let mut counts = vec![0usize; classes];
    for (row, &y) in features.iter_rows().zip(labels) {
        if y >= classes {
            return Err(Error::arg(format!("label {y} out of range for {classes} classes")));
        }
        counts[y] += 1;
        let mut col = sums.column_mut(y);
        col += &ArrayView1::from(row);
    }
    let mut empty = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        let mut col = sums.column_mut(c);
        if n == 0 {
            empty.push(c);
            continue;
        }
        col /= n as f64;
        let norm = col.dot(&col).sqrt();
        if norm <= 1e-12 {
            col.fill(0.0);
            empty.push(c);
        } else if normalize {
            col /= norm;
        }
    }
    if !empty.is_empty() {
        log::warn!("{} classes have zero prototypes: {:?}", empty.len(), &empty[..empty.len().min(10)]);
    }
    Ok(PrototypeMatrix {
        o: sums,
        normalized: normalize,
        empty_classes: empty,
    })
}

/// Raw affinities `P_c = g(x) . O_c` (eval mode).
pub fn prior_scores(model: &PriorMlp, x: &[f64], o: &PrototypeMatrix) -> Result<Vec<f64>> {
    if o.dims() != model.d_out {
        return Err(Error::arg(format!(
            "prototypes have {} dims, prior outputs {}",
            o.dims(),
            model.d_out
        )));
    }
    let g = prior_forward(model, x, Mode::Eval)?;
    Ok(ArrayView1::from(&g).dot(&o.o).to_vec())
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `-log clamp(s(u))` and its derivative in `u` (zero where clamped).
fn neg_log_sigmoid(u: f64) -> (f64, f64) {
    let p = sigmoid(u);
    if p < PROB_EPS {
        (-PROB_EPS.ln(), 0.0)
    } else if p > 1.0 - PROB_EPS {
        (-(1.0 - PROB_EPS).ln(), 0.0)
    } else {
        (-p.ln(), -sigmoid(-u))
    }
}

/// Batch-mean location loss and its gradient over all parameters.
#[allow(clippy::too_many_arguments)]
pub fn loc_loss_batch(
    model: &PriorMlp,
    xs: ArrayView2<f64>,
    rs: ArrayView2<f64>,
    o: &PrototypeMatrix,
    ys: &[usize],
    lambda: f64,
    masks_x: Option<&DropoutMasks>,
    masks_r: Option<&DropoutMasks>,
) -> Result<LossResult> {
    let b = ys.len();
    if b == 0 || xs.nrows() != b || rs.nrows() != b {
        return Err(Error::arg("loc loss batch shapes disagree"));
    }
    if xs.ncols() != model.d_in || rs.ncols() != model.d_in {
        return Err(Error::arg(format!("prior expects {} input dims", model.d_in)));
    }
    if o.dims() != model.d_out {
        return Err(Error::arg("prototype dims differ from prior output"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::arg(format!("lambda {lambda} must be finite and >= 0")));
    }
    let c = o.classes();
    if let Some(&y) = ys.iter().find(|&&y| y >= c) {
        return Err(Error::arg(format!("label {y} out of range for {c} classes")));
    }
    let scale = 1.0 / b as f64;

    let cx = model.forward_cached(xs, masks_x);
    let cr = model.forward_cached(rs, masks_r);
    let ux = cx.out.dot(&o.o);
    let ur = cr.out.dot(&o.o);

    let mut value = 0.0;
    let mut dux = Array2::<f64>::zeros((b, c));
    let mut dur = Array2::<f64>::zeros((b, c));
    for i in 0..b {
        for k in 0..c {
            let (v, d) = if k == ys[i] {
                let (v, d) = neg_log_sigmoid(ux[[i, k]]);
                (lambda * v, lambda * d)
            } else {
                let (v, d) = neg_log_sigmoid(-ux[[i, k]]);
                (v, -d)
            };
            value += v;
            dux[[i, k]] = d * scale;
            let (v, d) = neg_log_sigmoid(-ur[[i, k]]);
            value += v;
            dur[[i, k]] = -d * scale;
        }
    }
    if !value.is_finite() || ux.iter().chain(ur.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("location loss intermediate".into()));
    }

    let mut grad = vec![0.0; model.params.len()];
    let d_out_x = dux.dot(&o.o.t());
    let d_out_r = dur.dot(&o.o.t());
    model.backward(&cx, &d_out_x, masks_x, &mut grad);
    model.backward(&cr, &d_out_r, masks_r, &mut grad);
    Ok(LossResult {
        value: value * scale,
        grad,
    })
}

/// Single-example location loss in eval mode; `grad` is over `model.params()`.
pub fn loc_loss(
    model: &PriorMlp,
    x: &[f64],
    r: &[f64],
    o: &PrototypeMatrix,
    y: usize,
    lambda: f64,
) -> Result<LossResult> {
    loc_loss_masked(model, x, r, o, y, lambda, None, None)
}

/// Single-example location loss with fixed dropout masks (batch of one).
#[allow(clippy::too_many_arguments)]
pub fn loc_loss_masked(
    model: &PriorMlp,
    x: &[f64],
    r: &[f64],
    o: &PrototypeMatrix,
    y: usize,
    lambda: f64,
    masks_x: Option<&DropoutMasks>,
    masks_r: Option<&DropoutMasks>,
) -> Result<LossResult> {
    if x.len() != model.d_in || r.len() != model.d_in {
        return Err(Error::arg(format!("prior expects {} input dims", model.d_in)));
    }
    let xs = ArrayView2::from_shape((1, x.len()), x).unwrap();
    let rs = ArrayView2::from_shape((1, r.len()), r).unwrap();
    loc_loss_batch(model, xs, rs, o, &[y], lambda, masks_x, masks_r)
}

/// Per-dimension `(min, max)` of a feature matrix.
pub fn feature_bounds(m: &FeatureMatrix) -> Vec<(f64, f64)> {
    (0..m.dims())
        .map(|j| {
            m.iter_rows()
                .map(|r| r[j])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        })
        .collect()
}

pub fn sample_random_location(bounds: &[(f64, f64)], rng: &mut impl Rng) -> Vec<f64> {
    bounds
        .iter()
        .map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
        .collect()
}

/// Uniform over classes, then uniform within the class.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    by_class: Vec<Vec<usize>>,
}

impl BalancedSampler {
    pub fn new(labels: &[usize], classes: usize) -> Result<Self> {
        let mut by_class = vec![Vec::new(); classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::arg(format!("label {y} out of range for {classes} classes")));
            }
            by_class[y].push(i);
        }
        if let Some(c) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::arg(format!("class {c} has no examples for balanced sampling")));
        }
        Ok(BalancedSampler { by_class })
    }

    pub fn draw(&self, rng: &mut impl Rng) -> usize {
        let members = &self.by_class[rng.random_range(0..self.by_class.len())];
        members[rng.random_range(0..members.len())]
    }

    /// Endless stream of example indices.
    pub fn stream<'a, R: Rng>(&'a self, rng: &'a mut R) -> impl Iterator<Item = usize> + 'a {
        std::iter::repeat_with(move || self.draw(rng))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorTrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden: usize,
    pub dropout: f64,
    pub base_lr: f64,
    pub warmup_lr: f64,
    pub final_lr: f64,
    pub adamw: AdamWConfig,
    /// Sampling box for random locations; defaults to the training features' bounds.
    pub feature_bounds: Option<Vec<(f64, f64)>>,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        PriorTrainConfig {
            lambda: 10.0,
            epochs: 30,
            batch_size: 256,
            seed: 0,
            hidden: PriorMlp::DEFAULT_HIDDEN,
            dropout: PriorMlp::DEFAULT_DROPOUT,
            base_lr: 1e-3,
            warmup_lr: 1e-5,
            final_lr: 0.0,
            adamw: AdamWConfig::default(),
            feature_bounds: None,
        }
    }
}

/// Metadata features and labels the prior is fit to.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorTrainData {
    pub features: FeatureMatrix,
    pub labels: Vec<usize>,
}

/// One example per (observation, location) pair, metadata passed through `pca`.
pub fn prior_training_set(bundle: &DatasetBundle, pca: Option<&PcaModel>) -> Result<PriorTrainData> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for g in bundle.observations.groups() {
        let mut seen: Vec<&str> = Vec::new();
        for &i in &g.rows {
            let obs = &bundle.observations.rows[i];
            if seen.contains(&obs.location_code.as_str()) {
                continue;
            }
            seen.push(&obs.location_code);
            let y = obs
                .class_id
                .ok_or_else(|| Error::arg(format!("observation {} is unlabeled", obs.observation_id)))?;
            let meta = bundle
                .metadata_for(i)
                .ok_or_else(|| Error::arg(format!("observation {} has no metadata row", obs.observation_id)))?;
            rows.push(match pca {
                Some(p) => p.transform_row(meta)?,
                None => meta.to_vec(),
            });
            labels.push(y);
        }
    }
    if rows.is_empty() {
        return Err(Error::arg("no training observations for the prior"));
    }
    Ok(PriorTrainData {
        features: FeatureMatrix::from_rows(&rows)?,
        labels,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorTrainOutcome {
    pub model: PriorMlp,
    /// Mean batch loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// AdamW on batch-mean location loss with balanced sampling and a warmup
/// (first epoch) plus cosine schedule. Bitwise deterministic for a seed.
pub fn train_prior(data: &PriorTrainData, o: &PrototypeMatrix, cfg: &PriorTrainConfig) -> Result<PriorTrainOutcome> {
    if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) {
        return Err(Error::arg(format!("lambda {} must be finite and >= 0", cfg.lambda)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::arg("batch_size must be positive"));
    }
    let d_in = data.features.dims();
    let mut model = PriorMlp::new(d_in, cfg.hidden, o.dims(), cfg.dropout, cfg.seed)?;
    if cfg.epochs == 0 {
        return Ok(PriorTrainOutcome {
            model,
            loss_trace: Vec::new(),
        });
    }
    let bounds = match &cfg.feature_bounds {
        Some(b) if b.len() != d_in => {
            return Err(Error::arg(format!("feature bounds have {} dims, features {d_in}", b.len())))
        }
        Some(b) => b.clone(),
        None => feature_bounds(&data.features),
    };
    if bounds.iter().any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi)) {
        return Err(Error::arg("feature bounds must be finite with min <= max"));
    }
    let sampler = BalancedSampler::new(&data.labels, o.classes())?;

    let n = data.features.rows();
    let steps_per_epoch = n.div_ceil(cfg.batch_size).max(1) as u64;
    let total = steps_per_epoch * cfg.epochs as u64;
    let warmup = if cfg.epochs > 1 { steps_per_epoch } else { 0 };
    let schedule = CosineSchedule::new(warmup, total, cfg.warmup_lr, cfg.base_lr, cfg.final_lr)?;
    let mut opt = AdamWState::new(model.params.len(), cfg.adamw);
    let mut rng = PriorRng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));

    let b = cfg.batch_size;
    let mut xs = Array2::<f64>::zeros((b, d_in));
    let mut rs = Array2::<f64>::zeros((b, d_in));
    let mut ys = vec![0usize; b];
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..steps_per_epoch {
            for (i, y) in ys.iter_mut().enumerate() {
                let idx = sampler.draw(&mut rng);
                *y = data.labels[idx];
                xs.row_mut(i).assign(&ArrayView1::from(data.features.row(idx)));
                let r = sample_random_location(&bounds, &mut rng);
                rs.row_mut(i).assign(&Array1::from(r));
            }
            let (mx, mr) = if model.dropout > 0.0 {
                (
                    Some(DropoutMasks::sample(b, model.hidden, model.dropout, &mut rng)),
                    Some(DropoutMasks::sample(b, model.hidden, model.dropout, &mut rng)),
                )
            } else {
                (None, None)
            };
            let res = loc_loss_batch(&model, xs.view(), rs.view(), o, &ys, cfg.lambda, mx.as_ref(), mr.as_ref())?;
            let lr = lr_at(&schedule, step)?;
            adamw_step(&mut model.params, &res.grad, &mut opt, lr)?;
            epoch_loss += res.value;
            step += 1;
        }
        let mean = epoch_loss / steps_per_epoch as f64;
        log::info!("prior epoch {}: mean loss {mean:.6}", trace.len());
        trace.push(mean);
    }
    Ok(PriorTrainOutcome {
        model,
        loss_trace: trace,
    })
}

/// Everything inference needs from a trained prior.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorArtifact {
    pub model: PriorMlp,
    pub prototypes: PrototypeMatrix,
    pub pca: Option<PcaModel>,
}

impl PriorArtifact {
    /// Prior affinities for a raw (un-reduced) metadata vector.
    pub fn scores(&self, metadata: &[f64]) -> Result<Vec<f64>> {
        match &self.pca {
            Some(p) => prior_scores(&self.model, &p.transform_row(metadata)?, &self.prototypes),
            None => prior_scores(&self.model, metadata, &self.prototypes),
        }
    }
}

/// Container layout: W1 b1 W2 b2 W3 b3 O [pca mean, components, eigenvalues].
pub fn save_prior(artifact: &PriorArtifact, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut ms = artifact.model.layer_matrices()?;
    ms.push(FeatureMatrix::from_array(&artifact.prototypes.matrix())?);
    if let Some(p) = &artifact.pca {
        ms.extend(pca_matrices(p)?);
    }
    let refs: Vec<&FeatureMatrix> = ms.iter().collect();
    write_container(&refs, path)?;
    let m = &artifact.model;
    let mut meta = vec![
        ("d_in", m.d_in.to_string()),
        ("hidden", m.hidden.to_string()),
        ("d_out", m.d_out.to_string()),
        ("classes", artifact.prototypes.classes().to_string()),
        ("dropout", m.dropout.to_string()),
        ("seed", m.seed.to_string()),
        ("normalized", artifact.prototypes.normalized.to_string()),
        ("pca", artifact.pca.is_some().to_string()),
    ];
    if let Some(p) = &artifact.pca {
        meta.push(("pca_total_variance", format!("{:e}", p.total_variance)));
    }
    write_sidecar(path, &meta)
}

pub fn load_prior(path: impl AsRef<Path>) -> Result<PriorArtifact> {
    let path = path.as_ref();
    let ms = read_container(path)?;
    let meta = read_sidecar(path)?;
    let get = |k: &str| -> Result<&String> {
        meta.get(k)
            .ok_or_else(|| Error::Config(format!("{}: sidecar missing `{k}`", path.display())))
    };
    let bad = |k: &str| Error::Config(format!("{}: bad sidecar value for `{k}`", path.display()));
    let dropout: f64 = get("dropout")?.parse().map_err(|_| bad("dropout"))?;
    let seed: u64 = get("seed")?.parse().map_err(|_| bad("seed"))?;
    let normalized: bool = get("normalized")?.parse().map_err(|_| bad("normalized"))?;
    let has_pca: bool = get("pca")?.parse().map_err(|_| bad("pca"))?;
    let expected = if has_pca { 10 } else { 7 };
    if ms.len() != expected {
        return Err(Error::Config(format!(
            "{}: expected {expected} matrices, found {}",
            path.display(),
            ms.len()
        )));
    }
    let model = PriorMlp::from_layer_matrices(&ms[..6], dropout, seed)?;
    let prototypes = PrototypeMatrix::from_columns(ms[6].to_array(), normalized)?;
    if prototypes.dims() != model.d_out {
        return Err(Error::Config("prototype dims disagree with prior output".into()));
    }
    let pca = if has_pca {
        let tv = meta
            .get("pca_total_variance")
            .and_then(|v| v.parse().ok())
            .unwrap_or(0.0);
        let p = pca_from_matrices(&ms[7..10], tv)?;
        if p.k() != model.d_in {
            return Err(Error::Config("pca output dims disagree with prior input".into()));
        }
        Some(p)
    } else {
        None
    };
    for (k, want) in [("d_in", model.d_in), ("hidden", model.hidden), ("d_out", model.d_out)] {
        if get(k)?.parse::<usize>().ok() != Some(want) {
            return Err(bad(k));
        }
    }
    Ok(PriorArtifact {
        model,
        prototypes,
        pca,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proto(cols: &[&[f64]]) -> PrototypeMatrix {
        let d = cols[0].len();
        let o = Array2::from_shape_fn((d, cols.len()), |(i, c)| cols[c][i]);
        PrototypeMatrix::from_columns(o, true).unwrap()
    }

    #[test]
    fn zero_model_gives_zero_embedding() {
        let m = PriorMlp::zeros(3, 4, 2, 0.3, 0).unwrap();
        assert_eq!(prior_forward(&m, &[1.0, -2.0, 3.0], Mode::Eval).unwrap(), vec![0.0, 0.0]);
        let o = proto(&[&[1.0, 0.0], &[0.0, 1.0], &[0.6, 0.8]]);
        assert_eq!(prior_scores(&m, &[1.0, 2.0, 3.0], &o).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn eval_is_deterministic_and_dropout_zero_matches() {
        let m = PriorMlp::new(3, 8, 4, 0.0, 11).unwrap();
        let x = [0.2, -0.4, 1.0];
        let a = prior_forward(&m, &x, Mode::Eval).unwrap();
        assert_eq!(a, prior_forward(&m, &x, Mode::Eval).unwrap());
        let mut rng = PriorRng::seed_from_u64(3);
        assert_eq!(a, prior_forward(&m, &x, Mode::Train(&mut rng)).unwrap());
    }

    #[test]
    fn train_mode_dropout_changes_output() {
        let m = PriorMlp::new(3, 64, 4, 0.5, 11).unwrap();
        let x = [0.2, -0.4, 1.0];
        let mut rng = PriorRng::seed_from_u64(3);
        let eval = prior_forward(&m, &x, Mode::Eval).unwrap();
        let train = prior_forward(&m, &x, Mode::Train(&mut rng)).unwrap();
        assert_ne!(eval, train);
    }

    #[test]
    fn forward_dimension_mismatch() {
        let m = PriorMlp::zeros(3, 4, 2, 0.3, 0).unwrap();
        assert!(prior_forward(&m, &[1.0], Mode::Eval).is_err());
    }

    #[test]
    fn single_row_prototype_is_unit() {
        let f = FeatureMatrix::from_rows(&[[3.0, 4.0], [1.0, 0.0]]).unwrap();
        let o = compute_prototypes(&f, &[0, 1], 2, true).unwrap();
        assert!((o.column(0)[0] - 0.6).abs() < 1e-15 && (o.column(0)[1] - 0.8).abs() < 1e-15);
        assert!(o.empty_classes.is_empty());
    }

    #[test]
    fn opposite_rows_give_zero_column() {
        let f = FeatureMatrix::from_rows(&[[3.0, 4.0], [-3.0, -4.0], [1.0, 1.0]]).unwrap();
        let o = compute_prototypes(&f, &[0, 0, 1], 3, true).unwrap();
        assert_eq!(o.column(0).to_vec(), vec![0.0, 0.0]);
        assert_eq!(o.empty_classes, vec![0, 2]);
        assert!(compute_prototypes(&f, &[0, 0], 3, true).is_err());
        assert!(compute_prototypes(&f, &[0, 0, 5], 3, true).is_err());
    }

    #[test]
    fn loc_loss_single_class_zero_dots() {
        let m = PriorMlp::zeros(2, 3, 2, 0.0, 0).unwrap();
        let o = proto(&[&[1.0, 0.0]]);
        let r = loc_loss(&m, &[0.5, 0.5], &[0.1, 0.9], &o, 0, 1.0).unwrap();
        assert!((r.value - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn loc_loss_goes_to_zero_with_negative_dots_and_no_positive_weight() {
        // out = b3 = (-t, 0): every dot product with prototype (1, 0) is -t
        let mut m = PriorMlp::zeros(2, 3, 2, 0.0, 0).unwrap();
        let o = proto(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let b3 = m.spans()[2].b;
        let mut last = f64::INFINITY;
        for t in [1.0, 5.0, 20.0] {
            m.params_mut()[b3] = -t;
            let v = loc_loss(&m, &[0.0, 0.0], &[0.0, 0.0], &o, 0, 0.0).unwrap().value;
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-7);
    }

    #[test]
    fn lambda_derivative_is_positive_term() {
        let m = PriorMlp::new(3, 4, 2, 0.0, 5).unwrap();
        let o = proto(&[&[1.0, 0.0], &[0.0, 1.0], &[0.6, 0.8]]);
        let (x, r) = ([0.3, -0.2, 0.9], [0.1, 0.4, -0.5]);
        let l0 = loc_loss(&m, &x, &r, &o, 2, 0.0).unwrap().value;
        let l1 = loc_loss(&m, &x, &r, &o, 2, 1.0).unwrap().value;
        let l5 = loc_loss(&m, &x, &r, &o, 2, 5.0).unwrap().value;
        assert!(l1 - l0 >= 0.0);
        assert!(((l5 - l0) - 5.0 * (l1 - l0)).abs() < 1e-12);
    }

    #[test]
    fn random_location_bounds() {
        let mut rng = PriorRng::seed_from_u64(1);
        assert_eq!(sample_random_location(&[(0.0, 0.0); 3], &mut rng), vec![0.0; 3]);
        let b = [(0.0, 1.0); 4];
        let mut sum = [0.0; 4];
        for _ in 0..10_000 {
            let v = sample_random_location(&b, &mut rng);
            for (s, x) in sum.iter_mut().zip(&v) {
                assert!((0.0..=1.0).contains(x));
                *s += x;
            }
        }
        for s in sum {
            assert!((s / 10_000.0 - 0.5).abs() < 0.02);
        }
        let mut a = PriorRng::seed_from_u64(9);
        let mut c = PriorRng::seed_from_u64(9);
        for _ in 0..5 {
            assert_eq!(sample_random_location(&b, &mut a), sample_random_location(&b, &mut c));
        }
    }

    #[test]
    fn balanced_sampler_equalizes() {
        let labels: Vec<usize> = (0..10).map(|i| usize::from(i == 9)).collect();
        let s = BalancedSampler::new(&labels, 2).unwrap();
        let mut rng = PriorRng::seed_from_u64(42);
        let ones = s.stream(&mut rng).take(1000).filter(|&i| labels[i] == 1).count();
        assert!((ones as f64 / 1000.0 - 0.5).abs() < 0.05, "{ones}");
    }

    #[test]
    fn balanced_sampler_single_class_and_empty() {
        let s = BalancedSampler::new(&[0, 0, 0], 1).unwrap();
        let mut rng = PriorRng::seed_from_u64(0);
        assert!(s.stream(&mut rng).take(50).all(|i| i < 3));
        assert!(BalancedSampler::new(&[0, 0], 2).is_err());
    }

    #[test]
    fn balanced_sampler_covers_every_class_quickly() {
        let c = 12;
        let labels: Vec<usize> = (0..200).map(|i| if i < 189 { 0 } else { i - 188 }).collect();
        let s = BalancedSampler::new(&labels, c).unwrap();
        let mut rng = PriorRng::seed_from_u64(7);
        let mut seen = vec![false; c];
        for i in s.stream(&mut rng).take(c * 20) {
            seen[labels[i]] = true;
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = PriorTrainData {
            features: FeatureMatrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap(),
            labels: vec![0, 1],
        };
        let o = proto(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let cfg = PriorTrainConfig {
            epochs: 0,
            hidden: 8,
            ..Default::default()
        };
        let out = train_prior(&data, &o, &cfg).unwrap();
        assert_eq!(out.model, PriorMlp::new(2, 8, 2, cfg.dropout, cfg.seed).unwrap());
        assert!(out.loss_trace.is_empty());
    }

    #[test]
    fn save_load_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("prior.vgf");
        let model = PriorMlp::new(3, 5, 2, 0.3, 4).unwrap();
        let o = proto(&[&[1.0, 0.0], &[0.0, 1.0], &[0.6, 0.8]]);
        let art = PriorArtifact {
            model,
            prototypes: o,
            pca: None,
        };
        save_prior(&art, &p).unwrap();
        let back = load_prior(&p).unwrap();
        let q: Vec<f64> = art.model.params().iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(back.model.params(), q.as_slice());
        assert_eq!(back.model.dropout, 0.3);
        assert_eq!(back.prototypes.column(2).to_vec(), vec![0.6f32 as f64, 0.8f32 as f64]);
    }
}
