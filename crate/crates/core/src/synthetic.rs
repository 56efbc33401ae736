//! Seeded long-tailed datasets with a location signal, and naive oracles
//! used to cross-check the main pipeline.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::{
    write_bundle, ClassEntry, ClassTable, DatasetBundle, LocationTable, Observation, ObservationTable,
};
use crate::error::{Error, Result};
use crate::format::FeatureMatrix;
use crate::metrics::write_label_csv;

pub const DEFAULT_SEED: u64 = 2023;
pub const TRAIN_DIR: &str = "train";
pub const TEST_DIR: &str = "test";
pub const TRUTH_FILE: &str = "truth.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_classes: usize,
    /// Head-class count over tail-class count.
    pub imbalance_ratio: f64,
    pub dims_meta: usize,
    pub dims_proto: usize,
    pub venom_fraction: f64,
    /// Probability that a location is drawn near its class centre rather
    /// than uniformly over the map.
    pub location_informativeness: f64,
    pub n_observations: usize,
    pub images_min: usize,
    pub images_max: usize,
    /// Per-class share of observations held out (each class keeps one in train).
    pub test_fraction: f64,
    /// Height of the true-class logit bump.
    pub logit_scale: f64,
    pub logit_noise: f64,
    pub embed_noise: f64,
    /// Standard deviation of locations around their class centre.
    pub location_spread: f64,
    /// Standard deviation of class centres around their region centre.
    pub centre_jitter: f64,
    /// Classes sharing one region.
    pub region_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: DEFAULT_SEED,
            n_classes: 50,
            imbalance_ratio: 100.0,
            dims_meta: 8,
            dims_proto: 16,
            venom_fraction: 0.25,
            location_informativeness: 0.8,
            n_observations: 5000,
            images_min: 1,
            images_max: 3,
            test_fraction: 0.2,
            logit_scale: 8.0,
            logit_noise: 2.5,
            embed_noise: 0.5,
            location_spread: 0.5,
            centre_jitter: 1.5,
            region_size: 5,
        }
    }
}

/// Half-width of the box regions and uniform noise are drawn from.
const MAP_HALF_WIDTH: f64 = 4.0;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_classes == 0 {
            bad.push("n_classes must be >= 1");
        }
        if !(self.imbalance_ratio >= 1.0 && self.imbalance_ratio.is_finite()) {
            bad.push("imbalance_ratio must be finite and >= 1");
        }
        if self.dims_meta == 0 || self.dims_proto == 0 {
            bad.push("dims_meta and dims_proto must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.venom_fraction) {
            bad.push("venom_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.location_informativeness) {
            bad.push("location_informativeness must lie in [0, 1]");
        }
        if self.n_observations < self.n_classes {
            bad.push("n_observations must be >= n_classes");
        }
        if self.images_min == 0 || self.images_min > self.images_max {
            bad.push("images per observation need 1 <= min <= max");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            bad.push("test_fraction must lie in [0, 1)");
        }
        if [
            self.logit_scale,
            self.logit_noise,
            self.embed_noise,
            self.location_spread,
            self.centre_jitter,
        ]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            bad.push("scales and noise levels must be finite and >= 0");
        }
        if self.region_size == 0 {
            bad.push("region_size must be >= 1");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// Number of venomous classes, `ceil(venom_fraction * C)`.
    pub fn venomous_count(&self) -> usize {
        ((self.venom_fraction * self.n_classes as f64).ceil() as usize).min(self.n_classes)
    }
}

/// Power-law counts from head to tail summing to `total`, each at least 1.
pub fn class_counts(n_classes: usize, ratio: f64, total: usize) -> Vec<usize> {
    let alpha = if n_classes > 1 {
        ratio.ln() / (n_classes as f64).ln()
    } else {
        0.0
    };
    let weights: Vec<f64> = (0..n_classes).map(|c| ((c + 1) as f64).powf(-alpha)).collect();
    let wsum: f64 = weights.iter().sum();
    let spare = total - n_classes;
    let ideal: Vec<f64> = weights.iter().map(|w| spare as f64 * w / wsum).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let mut left = spare - counts.iter().sum::<usize>();
    // largest remainder, lower class first on ties
    let mut order: Vec<usize> = (0..n_classes).collect();
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[c] += 1;
        left -= 1;
    }
    counts.iter_mut().for_each(|c| *c += 1);
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub train: DatasetBundle,
    /// Same layout as `train`, labels removed.
    pub test: DatasetBundle,
    /// Test labels by observation id.
    pub truth: BTreeMap<String, usize>,
    /// Observations per class across both splits.
    pub class_counts: Vec<usize>,
}

#[derive(Default)]
struct SplitBuilder {
    rows: Vec<Observation>,
    logits: Vec<Vec<f64>>,
    embeddings: Vec<Vec<f64>>,
    metadata: Vec<Vec<f64>>,
    locations: BTreeMap<String, usize>,
}

impl SplitBuilder {
    fn finish(self, classes: &ClassTable, labeled: bool, c: usize, dims_proto: usize, dims_meta: usize) -> Result<DatasetBundle> {
        let matrix = |rows: &[Vec<f64>], dims: usize| -> Result<FeatureMatrix> {
            if rows.is_empty() {
                Ok(FeatureMatrix::zeros(0, dims))
            } else {
                Ok(FeatureMatrix::from_rows(rows)?.quantized())
            }
        };
        let mut rows = self.rows;
        if !labeled {
            rows.iter_mut().for_each(|r| r.class_id = None);
        }
        Ok(DatasetBundle {
            classes: classes.clone(),
            observations: ObservationTable { rows },
            logits: Some(matrix(&self.logits, c)?),
            embeddings: Some(matrix(&self.embeddings, dims_proto)?),
            metadata: matrix(&self.metadata, dims_meta)?,
            locations: LocationTable::new(self.locations),
        })
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Bitwise deterministic for a given config.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.n_classes;

    let mut venom_ids: Vec<usize> = (0..c).collect();
    venom_ids.shuffle(&mut rng);
    let mut venomous = vec![false; c];
    for &v in &venom_ids[..cfg.venomous_count()] {
        venomous[v] = true;
    }
    let classes = ClassTable::new(
        venomous
            .iter()
            .enumerate()
            .map(|(i, &v)| ClassEntry {
                name: format!("species_{i:03}"),
                venomous: v,
            })
            .collect(),
    )?;

    let n_regions = c.div_ceil(cfg.region_size);
    let regions: Vec<Vec<f64>> = (0..n_regions)
        .map(|_| (0..cfg.dims_meta).map(|_| rng.random_range(-MAP_HALF_WIDTH..MAP_HALF_WIDTH)).collect())
        .collect();
    let centres: Vec<Vec<f64>> = (0..c)
        .map(|k| {
            let r = &regions[k / cfg.region_size];
            r.iter().map(|v| v + cfg.centre_jitter * rng.sample::<f64, _>(StandardNormal)).collect()
        })
        .collect();
    let prototypes: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            let v = gaussian_vec(&mut rng, cfg.dims_proto, 1.0);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();

    let counts = class_counts(c, cfg.imbalance_ratio, cfg.n_observations);
    let mut plan: Vec<(usize, bool)> = Vec::with_capacity(cfg.n_observations);
    for (k, &n) in counts.iter().enumerate() {
        let n_test = ((cfg.test_fraction * n as f64).round() as usize).min(n - 1);
        plan.extend((0..n).map(|i| (k, i < n_test)));
    }
    plan.shuffle(&mut rng);

    let logit_noise = Normal::new(0.0, cfg.logit_noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut train = SplitBuilder::default();
    let mut test = SplitBuilder::default();
    let mut truth = BTreeMap::new();
    for (n, &(y, is_test)) in plan.iter().enumerate() {
        let id = format!("obs{n:05}");
        let split = if is_test { &mut test } else { &mut train };
        let location = if rng.random::<f64>() < cfg.location_informativeness {
            centres[y]
                .iter()
                .map(|m| m + cfg.location_spread * rng.sample::<f64, _>(StandardNormal))
                .collect()
        } else {
            (0..cfg.dims_meta)
                .map(|_| rng.random_range(-MAP_HALF_WIDTH..MAP_HALF_WIDTH))
                .collect()
        };
        let code = format!("L{n:05}");
        split.locations.insert(code.clone(), split.metadata.len());
        split.metadata.push(location);
        let images = rng.random_range(cfg.images_min..=cfg.images_max);
        for _ in 0..images {
            let mut z: Vec<f64> = (0..c).map(|_| logit_noise.sample(&mut rng)).collect();
            z[y] += cfg.logit_scale;
            let e: Vec<f64> = prototypes[y]
                .iter()
                .map(|p| p + cfg.embed_noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            split.rows.push(Observation {
                observation_id: id.clone(),
                image_index: split.logits.len(),
                class_id: Some(y),
                location_code: code.clone(),
            });
            split.logits.push(z);
            split.embeddings.push(e);
        }
        if is_test {
            truth.insert(id, y);
        }
    }
    Ok(SynthDataset {
        train: train.finish(&classes, true, c, cfg.dims_proto, cfg.dims_meta)?,
        test: test.finish(&classes, false, c, cfg.dims_proto, cfg.dims_meta)?,
        truth,
        class_counts: counts,
    })
}

/// `train/`, `test/`, `truth.csv` and a manifest recording the config.
pub fn write_synth(ds: &SynthDataset, cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    write_bundle(&ds.train, dir.join(TRAIN_DIR))?;
    write_bundle(&ds.test, dir.join(TEST_DIR))?;
    write_label_csv(&ds.truth, dir.join(TRUTH_FILE))?;

    let mut m = String::new();
    let fields: [(&str, String); 17] = [
        ("seed", cfg.seed.to_string()),
        ("n_classes", cfg.n_classes.to_string()),
        ("imbalance_ratio", cfg.imbalance_ratio.to_string()),
        ("dims_meta", cfg.dims_meta.to_string()),
        ("dims_proto", cfg.dims_proto.to_string()),
        ("venom_fraction", cfg.venom_fraction.to_string()),
        ("location_informativeness", cfg.location_informativeness.to_string()),
        ("n_observations", cfg.n_observations.to_string()),
        ("images_min", cfg.images_min.to_string()),
        ("images_max", cfg.images_max.to_string()),
        ("test_fraction", cfg.test_fraction.to_string()),
        ("logit_scale", cfg.logit_scale.to_string()),
        ("logit_noise", cfg.logit_noise.to_string()),
        ("embed_noise", cfg.embed_noise.to_string()),
        ("location_spread", cfg.location_spread.to_string()),
        ("centre_jitter", cfg.centre_jitter.to_string()),
        ("region_size", cfg.region_size.to_string()),
    ];
    for (k, v) in fields {
        let _ = writeln!(m, "{k} = {v}");
    }
    let head = ds.class_counts.iter().max().copied().unwrap_or(0);
    let tail = ds.class_counts.iter().min().copied().unwrap_or(0);
    let _ = writeln!(m, "head_count = {head}");
    let _ = writeln!(m, "tail_count = {tail}");
    let _ = writeln!(m, "train_observations = {}", ds.train.observations.groups().len());
    let _ = writeln!(m, "test_observations = {}", ds.truth.len());
    let p = dir.join(MANIFEST_FILE);
    std::fs::write(&p, m).map_err(|e| Error::io(&p, e))
}

/// Deliberately naive reference implementations. Nothing here calls into
/// the rest of the crate.
#[allow(clippy::needless_range_loop)]
pub mod oracle {
    use std::collections::BTreeMap;

    /// Seesaw loss value by direct summation.
    pub fn oracle_seesaw(z: &[f64], y: usize, counts: &[f64], p: f64, q: f64) -> f64 {
        let mut big = z[0];
        for v in z {
            if *v > big {
                big = *v;
            }
        }
        let mut e = Vec::new();
        let mut total = 0.0;
        for v in z {
            e.push((v - big).exp());
            total += (v - big).exp();
        }
        let mut denom = e[y];
        for j in 0..z.len() {
            if j == y {
                continue;
            }
            let mut m = 1.0;
            if counts[y] > 0.0 && counts[j] < counts[y] {
                m = (counts[j] / counts[y]).powf(p);
            }
            let mut comp = 1.0;
            if e[j] / total > e[y] / total {
                comp = (q * (z[j] - z[y])).exp();
            }
            denom += m * comp * e[j];
        }
        -(e[y] / denom).ln()
    }

    #[derive(Debug, Clone, PartialEq)]
    pub struct OracleReport {
        pub macro_f1: f64,
        pub p1: f64,
        pub p2: f64,
        pub p3: f64,
        pub p4: f64,
        pub accuracy: f64,
        pub composite: f64,
    }

    /// Default weights, per-status P denominators, supported-class F1.
    pub fn oracle_metric(truth: &[usize], pred: &[usize], venomous: &[bool]) -> OracleReport {
        let n = truth.len();
        let mut f1_sum = 0.0;
        let mut f1_n = 0.0;
        for k in 0..venomous.len() {
            let mut tp = 0.0;
            let mut fp = 0.0;
            let mut fneg = 0.0;
            for i in 0..n {
                if truth[i] == k && pred[i] == k {
                    tp += 1.0;
                } else if truth[i] == k {
                    fneg += 1.0;
                } else if pred[i] == k {
                    fp += 1.0;
                }
            }
            if tp + fneg == 0.0 {
                continue;
            }
            f1_n += 1.0;
            if tp > 0.0 {
                let prec = tp / (tp + fp);
                let rec = tp / (tp + fneg);
                f1_sum += 2.0 * prec * rec / (prec + rec);
            }
        }
        let f1 = 100.0 * f1_sum / f1_n;

        let (mut hh, mut hv, mut vh, mut vv, mut harmless, mut venom, mut right) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let tv = venomous[truth[i]];
            let pv = venomous[pred[i]];
            if tv {
                venom += 1.0;
            } else {
                harmless += 1.0;
            }
            if truth[i] == pred[i] {
                right += 1.0;
                continue;
            }
            if !tv && !pv {
                hh += 1.0;
            }
            if !tv && pv {
                hv += 1.0;
            }
            if tv && !pv {
                vh += 1.0;
            }
            if tv && pv {
                vv += 1.0;
            }
        }
        let pct = |a: f64, b: f64| if b == 0.0 { 0.0 } else { 100.0 * a / b };
        let (p1, p2, p3, p4) = (pct(hh, harmless), pct(hv, harmless), pct(vh, venom), pct(vv, venom));
        let composite = (f1 + (100.0 - p1) + 2.0 * (100.0 - p2) + 5.0 * (100.0 - p3) + 2.0 * (100.0 - p4)) / 11.0;
        OracleReport {
            macro_f1: f1,
            p1,
            p2,
            p3,
            p4,
            accuracy: 100.0 * right / n as f64,
            composite,
        }
    }

    /// A trained prior in plain nested vectors.
    #[derive(Debug, Clone)]
    pub struct OraclePrior {
        /// Three `(weights out x in, bias)` layers.
        pub layers: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
        /// One prototype per class.
        pub prototypes: Vec<Vec<f64>>,
        /// `(mean, component rows)` applied before the network.
        pub pca: Option<(Vec<f64>, Vec<Vec<f64>>)>,
    }

    impl OraclePrior {
        pub fn affinities(&self, meta: &[f64]) -> Vec<f64> {
            let mut x: Vec<f64> = match &self.pca {
                Some((mean, comps)) => comps
                    .iter()
                    .map(|row| {
                        let mut s = 0.0;
                        for j in 0..row.len() {
                            s += row[j] * (meta[j] - mean[j]);
                        }
                        s
                    })
                    .collect(),
                None => meta.to_vec(),
            };
            for (li, (w, b)) in self.layers.iter().enumerate() {
                let mut next = Vec::new();
                for o in 0..w.len() {
                    let mut s = b[o];
                    for i in 0..x.len() {
                        s += w[o][i] * x[i];
                    }
                    if li < 2 && s < 0.0 {
                        s = 0.0;
                    }
                    next.push(s);
                }
                x = next;
            }
            self.prototypes
                .iter()
                .map(|col| {
                    let mut s = 0.0;
                    for i in 0..col.len() {
                        s += col[i] * x[i];
                    }
                    s
                })
                .collect()
        }
    }

    /// One image row of an observation.
    #[derive(Debug, Clone)]
    pub struct OracleImage<'a> {
        pub observation_id: &'a str,
        pub logits: &'a [f64],
        pub metadata: &'a [f64],
    }

    /// Softmax, optional prior product, averaging, then escalation when
    /// `tau` is given (top-5).
    pub fn oracle_predict(
        images: &[OracleImage<'_>],
        prior: Option<&OraclePrior>,
        venomous: &[bool],
        tau: Option<f64>,
    ) -> BTreeMap<String, usize> {
        let soft = |z: &[f64]| -> Vec<f64> {
            let mut big = f64::NEG_INFINITY;
            for v in z {
                big = big.max(*v);
            }
            let e: Vec<f64> = z.iter().map(|v| (v - big).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        };
        let mut sums: BTreeMap<String, (Vec<f64>, f64)> = BTreeMap::new();
        for img in images {
            let mut s = soft(img.logits);
            if let Some(p) = prior {
                let pr = soft(&p.affinities(img.metadata));
                let prod: Vec<f64> = s.iter().zip(&pr).map(|(a, b)| a * b).collect();
                let t: f64 = prod.iter().sum();
                if t > 0.0 {
                    s = prod.iter().map(|v| v / t).collect();
                }
            }
            let entry = sums
                .entry(img.observation_id.to_string())
                .or_insert_with(|| (vec![0.0; s.len()], 0.0));
            for k in 0..s.len() {
                entry.0[k] += s[k];
            }
            entry.1 += 1.0;
        }
        let mut out = BTreeMap::new();
        for (id, (sum, n)) in sums {
            let avg: Vec<f64> = sum.iter().map(|v| v / n).collect();
            let mut best = 0;
            for k in 1..avg.len() {
                if avg[k] > avg[best] {
                    best = k;
                }
            }
            let mut pick = best;
            if let Some(t) = tau {
                if avg[best] < t {
                    // selection of the five best, ties to lower id
                    let mut taken = vec![false; avg.len()];
                    for _ in 0..5.min(avg.len()) {
                        let mut top = usize::MAX;
                        for k in 0..avg.len() {
                            if !taken[k] && (top == usize::MAX || avg[k] > avg[top]) {
                                top = k;
                            }
                        }
                        taken[top] = true;
                        if venomous[top] {
                            pick = top;
                            break;
                        }
                    }
                }
            }
            out.insert(id, pick);
        }
        out
    }
}
