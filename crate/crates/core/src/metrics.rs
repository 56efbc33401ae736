//! Macro F1, venom-confusion rates and the weighted composite score.
//!
//! ```text
//! M = [w1 F1 + w2 (100 - P1) + w3 (100 - P2) + w4 (100 - P3) + w5 (100 - P4)] / sum(w)
//! ```
//!
//! with P1..P4 the percentages of harmless->other harmless,
//! harmless->venomous, venomous->harmless and venomous->other venomous
//! errors.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::data::ClassTable;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricWeights(pub [f64; 5]);

impl Default for MetricWeights {
    fn default() -> Self {
        MetricWeights([1.0, 1.0, 2.0, 5.0, 2.0])
    }
}

impl MetricWeights {
    pub fn new(w: [f64; 5]) -> Result<Self> {
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::arg("metric weights must be non-negative with a positive sum"));
        }
        Ok(MetricWeights(w))
    }
}

/// Denominator used for P1..P4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PDenominator {
    /// Ground-truth count of the truth side's venom status.
    #[default]
    Status,
    /// All scored observations.
    All,
    /// All misclassified observations.
    Errors,
}

impl std::str::FromStr for PDenominator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "status" => Ok(PDenominator::Status),
            "all" => Ok(PDenominator::All),
            "errors" => Ok(PDenominator::Errors),
            _ => Err(Error::arg(format!("unknown pdenom `{s}` (status|all|errors)"))),
        }
    }
}

impl std::fmt::Display for PDenominator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PDenominator::Status => "status",
            PDenominator::All => "all",
            PDenominator::Errors => "errors",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricOptions {
    pub weights: MetricWeights,
    pub pdenom: PDenominator,
    /// Average F1 over every class instead of only supported ones.
    pub f1_all_classes: bool,
}

/// `counts[truth][pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    c: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.c
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.c + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        (0..self.c).map(|p| self.get(class, p)).sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        (0..self.c).map(|t| self.get(t, class)).sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.c).map(|i| self.get(i, i)).sum()
    }
}

pub fn confusion_matrix(truth: &[usize], pred: &[usize], c: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::arg(format!("{} truths vs {} predictions", truth.len(), pred.len())));
    }
    if truth.is_empty() {
        return Err(Error::arg("nothing to score"));
    }
    let mut counts = vec![0u64; c * c];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= c || p >= c {
            return Err(Error::arg(format!("class id out of range ({t}, {p}) for {c} classes")));
        }
        counts[t * c + p] += 1;
    }
    Ok(ConfusionMatrix { c, counts })
}

/// Mean per-class F1 as a percentage.
pub fn macro_f1(cm: &ConfusionMatrix, all_classes: bool) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for k in 0..cm.classes() {
        let support = cm.support(k);
        if support == 0 && !all_classes {
            continue;
        }
        let tp = cm.get(k, k) as f64;
        let predicted = cm.predicted(k) as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if support > 0 { tp / support as f64 } else { 0.0 };
        sum += if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        n += 1;
    }
    if n == 0 {
        return Err(Error::arg("no classes with ground-truth support"));
    }
    Ok(100.0 * sum / n as f64)
}

/// (P1, P2, P3, P4) as percentages.
pub fn venom_confusions(cm: &ConfusionMatrix, classes: &ClassTable, pdenom: PDenominator) -> Result<[f64; 4]> {
    if classes.len() != cm.classes() {
        return Err(Error::arg("class table does not cover the confusion matrix"));
    }
    // [hh, hv, vh, vv] error counts and per-status support
    let mut errs = [0u64; 4];
    let mut harmless = 0u64;
    let mut venomous = 0u64;
    for t in 0..cm.classes() {
        let tv = classes.is_venomous(t);
        let support = cm.support(t);
        if tv {
            venomous += support;
        } else {
            harmless += support;
        }
        for p in 0..cm.classes() {
            if p == t {
                continue;
            }
            let slot = match (tv, classes.is_venomous(p)) {
                (false, false) => 0,
                (false, true) => 1,
                (true, false) => 2,
                (true, true) => 3,
            };
            errs[slot] += cm.get(t, p);
        }
    }
    let denoms = match pdenom {
        PDenominator::Status => [harmless, harmless, venomous, venomous],
        PDenominator::All => [cm.total(); 4],
        PDenominator::Errors => [errs.iter().sum(); 4],
    };
    let mut out = [0.0; 4];
    for i in 0..4 {
        if denoms[i] == 0 {
            if pdenom != PDenominator::Errors {
                log::warn!("P{} has an empty denominator; reporting 0", i + 1);
            }
            continue;
        }
        out[i] = 100.0 * errs[i] as f64 / denoms[i] as f64;
    }
    Ok(out)
}

pub fn track1_metric(f1: f64, p: [f64; 4], weights: &MetricWeights) -> f64 {
    let w = weights.0;
    let num = w[0] * f1 + w[1] * (100.0 - p[0]) + w[2] * (100.0 - p[1]) + w[3] * (100.0 - p[2]) + w[4] * (100.0 - p[3]);
    num / w.iter().sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub macro_f1: f64,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub p4: f64,
    pub accuracy: f64,
    pub composite: f64,
    pub n_observations: usize,
    pub confusion: ConfusionMatrix,
}

#[derive(Serialize)]
struct JsonReport {
    macro_f1: f64,
    p1: f64,
    p2: f64,
    p3: f64,
    p4: f64,
    accuracy: f64,
    composite: f64,
    n_observations: usize,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        let j = JsonReport {
            macro_f1: self.macro_f1,
            p1: self.p1,
            p2: self.p2,
            p3: self.p3,
            p4: self.p4,
            accuracy: self.accuracy,
            composite: self.composite,
            n_observations: self.n_observations,
        };
        serde_json::to_string_pretty(&j).expect("plain struct serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let rows = [
            ("observations", self.n_observations as f64, false),
            ("macro_f1", self.macro_f1, true),
            ("accuracy", self.accuracy, true),
            ("p1 harmless->harmless", self.p1, true),
            ("p2 harmless->venomous", self.p2, true),
            ("p3 venomous->harmless", self.p3, true),
            ("p4 venomous->venomous", self.p4, true),
            ("composite", self.composite, true),
        ];
        for (name, v, pct) in rows {
            if pct {
                let _ = writeln!(s, "{name:<24} {v:>9.4}");
            } else {
                let _ = writeln!(s, "{name:<24} {v:>9}");
            }
        }
        s
    }
}

/// Full report from aligned truth/prediction label vectors.
pub fn evaluate(truth: &[usize], pred: &[usize], classes: &ClassTable, opts: &MetricOptions) -> Result<MetricReport> {
    let cm = confusion_matrix(truth, pred, classes.len())?;
    let f1 = macro_f1(&cm, opts.f1_all_classes)?;
    let p = venom_confusions(&cm, classes, opts.pdenom)?;
    let accuracy = 100.0 * cm.correct() as f64 / cm.total() as f64;
    Ok(MetricReport {
        macro_f1: f1,
        p1: p[0],
        p2: p[1],
        p3: p[2],
        p4: p[3],
        accuracy,
        composite: track1_metric(f1, p, &opts.weights),
        n_observations: truth.len(),
        confusion: cm,
    })
}

/// Reads `observation_id,class_id` (extra columns ignored).
pub fn read_label_csv(path: impl AsRef<Path>) -> Result<BTreeMap<String, usize>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers = rdr.headers().map_err(|e| Error::parse(path, 1, e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::parse(path, 1, format!("missing `{name}` column")))
    };
    let (id_col, class_col) = (col("observation_id")?, col("class_id")?);
    let mut out = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, i + 2, e.to_string()))?;
        let line = rec.position().map_or(i + 2, |p| p.line() as usize);
        let id = rec[id_col].trim().to_string();
        let class: usize = rec[class_col]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, line, format!("bad class_id `{}`", &rec[class_col])))?;
        if out.insert(id.clone(), class).is_some() {
            return Err(Error::parse(path, line, format!("duplicate observation_id `{id}`")));
        }
    }
    Ok(out)
}

pub fn write_label_csv(labels: &BTreeMap<String, usize>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("observation_id,class_id\n");
    for (id, c) in labels {
        let _ = writeln!(text, "{id},{c}");
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Joins truth and predictions on observation id and scores them.
pub fn score_labels(
    truth: &BTreeMap<String, usize>,
    pred: &BTreeMap<String, usize>,
    classes: &ClassTable,
    opts: &MetricOptions,
) -> Result<MetricReport> {
    let t: HashSet<&String> = truth.keys().collect();
    let p: HashSet<&String> = pred.keys().collect();
    if t != p {
        let mut offenders: Vec<String> = t
            .difference(&p)
            .map(|id| format!("missing prediction for `{id}`"))
            .chain(p.difference(&t).map(|id| format!("prediction for unknown `{id}`")))
            .collect();
        offenders.sort();
        return Err(Error::validation(offenders));
    }
    let (ts, ps): (Vec<usize>, Vec<usize>) = truth.iter().map(|(id, &c)| (c, pred[id])).unzip();
    evaluate(&ts, &ps, classes, opts)
}

pub fn score_predictions(
    truth_path: impl AsRef<Path>,
    pred_path: impl AsRef<Path>,
    classes: &ClassTable,
    opts: &MetricOptions,
) -> Result<MetricReport> {
    score_labels(&read_label_csv(truth_path)?, &read_label_csv(pred_path)?, classes, opts)
}
