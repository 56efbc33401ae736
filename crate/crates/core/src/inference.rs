//! Joint image/prior scoring, observation averaging and the venomous
//! escalation rule.

use std::path::Path;

use rayon::prelude::*;

use crate::data::{ClassTable, DatasetBundle};
use crate::error::{Error, Result};
use crate::format::FeatureMatrix;
use crate::losses::softmax_unchecked;
use crate::prior::PriorArtifact;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreStage {
    Raw,
    Combined,
    Aggregated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub stage: ScoreStage,
    pub scores: FeatureMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EscalationPolicy {
    /// Rows whose top score reaches `tau` are left alone.
    pub tau: f64,
    /// Number of top classes searched for a venomous candidate.
    pub k: usize,
}

impl Default for EscalationPolicy {
    fn default() -> Self {
        EscalationPolicy { tau: 0.5, k: 5 }
    }
}

impl EscalationPolicy {
    pub fn new(tau: f64, k: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::arg(format!("tau {tau} must lie in [0, 1]")));
        }
        if k == 0 {
            return Err(Error::arg("escalation k must be at least 1"));
        }
        Ok(EscalationPolicy { tau, k })
    }
}

/// Index of the largest entry; lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Class ids ordered by score descending, ties by lower id.
pub fn ranked(row: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..row.len()).collect();
    ids.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("finite scores").then(a.cmp(&b)));
    ids
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointRow {
    pub scores: Vec<f64>,
    /// The product vanished and the image scores were used unchanged.
    pub fell_back: bool,
}

/// `softmax(P) * S` elementwise, renormalized to sum to one.
pub fn joint_scores(s: &[f64], p: &[f64]) -> Result<JointRow> {
    if s.len() != p.len() || s.is_empty() {
        return Err(Error::arg(format!(
            "joint scores need equal non-empty lengths ({} vs {})",
            s.len(),
            p.len()
        )));
    }
    if s.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::arg("image scores must be finite and non-negative"));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("prior scores must be finite"));
    }
    let prior = softmax_unchecked(p);
    let prod: Vec<f64> = prior.iter().zip(s).map(|(a, b)| a * b).collect();
    let total: f64 = prod.iter().sum();
    if total > 0.0 && total.is_finite() {
        Ok(JointRow {
            scores: prod.into_iter().map(|v| v / total).collect(),
            fell_back: false,
        })
    } else {
        log::warn!("joint score product vanished; falling back to image scores");
        Ok(JointRow {
            scores: s.to_vec(),
            fell_back: true,
        })
    }
}

/// Elementwise mean of the rows.
pub fn aggregate_observation<R: AsRef<[f64]>>(rows: &[R]) -> Result<Vec<f64>> {
    let first = rows.first().ok_or_else(|| Error::arg("cannot aggregate zero rows"))?;
    let c = first.as_ref().len();
    let mut out = vec![0.0; c];
    for r in rows {
        let r = r.as_ref();
        if r.len() != c {
            return Err(Error::arg("aggregated rows differ in length"));
        }
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    let n = rows.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Confident rows keep their argmax; otherwise the best venomous class in
/// the top `k` (if any) is returned.
pub fn escalate_venomous(row: &[f64], classes: &ClassTable, policy: &EscalationPolicy) -> usize {
    let top = argmax(row);
    if row[top] >= policy.tau {
        return top;
    }
    ranked(row)
        .into_iter()
        .take(policy.k)
        .find(|&c| classes.is_venomous(c))
        .unwrap_or(top)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreKind {
    /// Unnormalized image-model outputs; softmaxed per row.
    #[default]
    Logits,
    /// Non-negative scores; each row is normalized to sum to one.
    Probabilities,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PredictOptions {
    /// `None` disables escalation.
    pub escalation: Option<EscalationPolicy>,
    pub score_kind: ScoreKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPrediction {
    pub observation_id: String,
    pub class_id: usize,
    pub pre_escalation: usize,
    pub max_confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRun {
    /// Sorted by observation id.
    pub predictions: Vec<ObservationPrediction>,
    /// Per image, normalized image-model scores (S).
    pub raw: ScoreMatrix,
    /// Per image, after the prior (S').
    pub combined: ScoreMatrix,
    /// Per observation, same order as `predictions`.
    pub aggregated: ScoreMatrix,
    /// Images where the joint product vanished.
    pub fallbacks: usize,
}

fn normalized_image_scores(row: &[f64], kind: ScoreKind) -> Result<Vec<f64>> {
    match kind {
        ScoreKind::Logits => Ok(softmax_unchecked(row)),
        ScoreKind::Probabilities => {
            if row.iter().any(|v| *v < 0.0) {
                return Err(Error::arg("probability scores must be non-negative"));
            }
            let total: f64 = row.iter().sum();
            if total <= 0.0 {
                return Err(Error::arg("probability row sums to zero"));
            }
            Ok(row.iter().map(|v| v / total).collect())
        }
    }
}

/// Runs the full decision pipeline over a validated bundle.
pub fn predict_dataset(
    bundle: &DatasetBundle,
    prior: Option<&PriorArtifact>,
    opts: &PredictOptions,
) -> Result<PredictionRun> {
    let logits = bundle.logits()?;
    let c = bundle.classes.len();
    if logits.dims() != c {
        return Err(Error::arg(format!("logits have {} columns for {c} classes", logits.dims())));
    }
    if let Some(p) = prior {
        if p.prototypes.classes() != c {
            return Err(Error::arg(format!(
                "prior was trained for {} classes, dataset has {c}",
                p.prototypes.classes()
            )));
        }
    }
    let rows = &bundle.observations.rows;

    let per_image: Vec<(Vec<f64>, JointRow)> = (0..rows.len())
        .into_par_iter()
        .map(|i| {
            let obs = &rows[i];
            if obs.image_index >= logits.rows() {
                return Err(Error::arg(format!(
                    "observation {} references image {} beyond {} rows",
                    obs.observation_id,
                    obs.image_index,
                    logits.rows()
                )));
            }
            let s = normalized_image_scores(logits.row(obs.image_index), opts.score_kind)?;
            let joint = match prior {
                Some(p) => {
                    let meta = bundle.metadata_for(i).ok_or_else(|| {
                        Error::arg(format!("observation {} has no metadata row", obs.observation_id))
                    })?;
                    joint_scores(&s, &p.scores(meta)?)?
                }
                None => JointRow {
                    scores: s.clone(),
                    fell_back: false,
                },
            };
            Ok((s, joint))
        })
        .collect::<Result<_>>()?;
    let fallbacks = per_image.iter().filter(|(_, j)| j.fell_back).count();

    let groups = bundle.observations.groups();
    let decided: Vec<(ObservationPrediction, Vec<f64>)> = groups
        .par_iter()
        .map(|g| {
            let members: Vec<&[f64]> = g.rows.iter().map(|&i| per_image[i].1.scores.as_slice()).collect();
            let agg = aggregate_observation(&members)?;
            let pre = argmax(&agg);
            let class_id = match &opts.escalation {
                Some(policy) => escalate_venomous(&agg, &bundle.classes, policy),
                None => pre,
            };
            Ok((
                ObservationPrediction {
                    observation_id: g.observation_id.clone(),
                    class_id,
                    pre_escalation: pre,
                    max_confidence: agg[pre],
                },
                agg,
            ))
        })
        .collect::<Result<_>>()?;

    let to_matrix = |rows: Vec<&[f64]>| -> Result<FeatureMatrix> {
        if rows.is_empty() {
            Ok(FeatureMatrix::zeros(0, c))
        } else {
            FeatureMatrix::from_rows(&rows)
        }
    };
    let raw = to_matrix(per_image.iter().map(|(s, _)| s.as_slice()).collect())?;
    let combined = to_matrix(per_image.iter().map(|(_, j)| j.scores.as_slice()).collect())?;
    let aggregated = to_matrix(decided.iter().map(|(_, a)| a.as_slice()).collect())?;
    Ok(PredictionRun {
        predictions: decided.into_iter().map(|(p, _)| p).collect(),
        raw: ScoreMatrix {
            stage: ScoreStage::Raw,
            scores: raw,
        },
        combined: ScoreMatrix {
            stage: ScoreStage::Combined,
            scores: combined,
        },
        aggregated: ScoreMatrix {
            stage: ScoreStage::Aggregated,
            scores: aggregated,
        },
        fallbacks,
    })
}

/// `observation_id,class_id`, plus `pre_escalation_class_id,max_confidence` when `explain`.
pub fn write_predictions_csv(preds: &[ObservationPrediction], path: impl AsRef<Path>, explain: bool) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from(if explain {
        "observation_id,class_id,pre_escalation_class_id,max_confidence\n"
    } else {
        "observation_id,class_id\n"
    });
    for p in preds {
        if explain {
            text.push_str(&format!(
                "{},{},{},{:.6}\n",
                p.observation_id, p.class_id, p.pre_escalation, p.max_confidence
            ));
        } else {
            text.push_str(&format!("{},{}\n", p.observation_id, p.class_id));
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
