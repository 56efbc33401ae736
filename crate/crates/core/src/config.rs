//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::data::ValidationMode;
use crate::error::{Error, Result};
use crate::inference::{EscalationPolicy, ScoreKind};
use crate::metrics::{MetricOptions, MetricWeights, PDenominator};
use crate::pca::DEFAULT_COMPONENTS;
use crate::prior::PriorTrainConfig;
use crate::synthetic::SynthConfig;

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_key_values(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, i + 1, format!("expected `key = value`, found `{line}`")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::parse(path, i + 1, "empty key"));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::parse(path, i + 1, format!("duplicate key `{k}`")));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub pca_components: usize,
    pub prior: PriorTrainConfig,
    pub normalize_prototypes: bool,
    pub escalate: bool,
    pub escalation: EscalationPolicy,
    pub score_kind: ScoreKind,
    pub metric: MetricOptions,
    pub seesaw_p: f64,
    pub seesaw_q: f64,
    pub validation_mode: ValidationMode,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            pca_components: DEFAULT_COMPONENTS,
            prior: PriorTrainConfig::default(),
            normalize_prototypes: true,
            escalate: true,
            escalation: EscalationPolicy::default(),
            score_kind: ScoreKind::Logits,
            metric: MetricOptions::default(),
            seesaw_p: 0.8,
            seesaw_q: 2.0,
            validation_mode: ValidationMode::Drop,
            synth: SynthConfig::default(),
        }
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("bad value `{v}` for `{key}`: {e}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{v}` for `{key}`"))),
    }
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        for (k, v) in parse_key_values(&text, path)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Defaults, or the file's values when a path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::from_file)
    }

    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let p = &mut self.prior;
        let s = &mut self.synth;
        match key {
            "pca.components" => self.pca_components = value(key, v)?,
            "prior.lambda" => p.lambda = value(key, v)?,
            "prior.epochs" => p.epochs = value(key, v)?,
            "prior.batch_size" => p.batch_size = value(key, v)?,
            "prior.seed" => p.seed = value(key, v)?,
            "prior.hidden" => p.hidden = value(key, v)?,
            "prior.dropout" => p.dropout = value(key, v)?,
            "prior.base_lr" => p.base_lr = value(key, v)?,
            "prior.warmup_lr" => p.warmup_lr = value(key, v)?,
            "prior.final_lr" => p.final_lr = value(key, v)?,
            "prior.normalize_prototypes" => self.normalize_prototypes = flag(key, v)?,
            "adamw.beta1" => p.adamw.beta1 = value(key, v)?,
            "adamw.beta2" => p.adamw.beta2 = value(key, v)?,
            "adamw.eps" => p.adamw.eps = value(key, v)?,
            "adamw.weight_decay" => p.adamw.weight_decay = value(key, v)?,
            "infer.escalate" => self.escalate = flag(key, v)?,
            "infer.tau" => self.escalation = EscalationPolicy::new(value(key, v)?, self.escalation.k)?,
            "infer.top_k" => self.escalation = EscalationPolicy::new(self.escalation.tau, value(key, v)?)?,
            "infer.scores" => {
                self.score_kind = match v {
                    "logits" => ScoreKind::Logits,
                    "probabilities" => ScoreKind::Probabilities,
                    _ => return Err(Error::Config(format!("bad value `{v}` for `{key}` (logits|probabilities)"))),
                }
            }
            "metric.weights" => {
                let w: Vec<f64> = v.split(',').map(|x| value(key, x.trim())).collect::<Result<_>>()?;
                let w: [f64; 5] = w
                    .try_into()
                    .map_err(|_| Error::Config(format!("`{key}` needs five comma-separated weights")))?;
                self.metric.weights = MetricWeights::new(w)?;
            }
            "metric.pdenom" => self.metric.pdenom = v.parse::<PDenominator>()?,
            "metric.f1_all_classes" => self.metric.f1_all_classes = flag(key, v)?,
            "seesaw.p" => self.seesaw_p = value(key, v)?,
            "seesaw.q" => self.seesaw_q = value(key, v)?,
            "validate.mode" => {
                self.validation_mode = match v {
                    "strict" => ValidationMode::Strict,
                    "drop" => ValidationMode::Drop,
                    _ => return Err(Error::Config(format!("bad value `{v}` for `{key}` (strict|drop)"))),
                }
            }
            "synth.seed" => s.seed = value(key, v)?,
            "synth.n_classes" => s.n_classes = value(key, v)?,
            "synth.imbalance_ratio" => s.imbalance_ratio = value(key, v)?,
            "synth.dims_meta" => s.dims_meta = value(key, v)?,
            "synth.dims_proto" => s.dims_proto = value(key, v)?,
            "synth.venom_fraction" => s.venom_fraction = value(key, v)?,
            "synth.location_informativeness" => s.location_informativeness = value(key, v)?,
            "synth.n_observations" => s.n_observations = value(key, v)?,
            "synth.images_min" => s.images_min = value(key, v)?,
            "synth.images_max" => s.images_max = value(key, v)?,
            "synth.test_fraction" => s.test_fraction = value(key, v)?,
            "synth.logit_scale" => s.logit_scale = value(key, v)?,
            "synth.logit_noise" => s.logit_noise = value(key, v)?,
            "synth.embed_noise" => s.embed_noise = value(key, v)?,
            "synth.location_spread" => s.location_spread = value(key, v)?,
            "synth.centre_jitter" => s.centre_jitter = value(key, v)?,
            "synth.region_size" => s.region_size = value(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn resolved(&self) -> Vec<(&'static str, String)> {
        let p = &self.prior;
        let s = &self.synth;
        let w = self.metric.weights.0;
        vec![
            ("pca.components", self.pca_components.to_string()),
            ("prior.lambda", p.lambda.to_string()),
            ("prior.epochs", p.epochs.to_string()),
            ("prior.batch_size", p.batch_size.to_string()),
            ("prior.seed", p.seed.to_string()),
            ("prior.hidden", p.hidden.to_string()),
            ("prior.dropout", p.dropout.to_string()),
            ("prior.base_lr", p.base_lr.to_string()),
            ("prior.warmup_lr", p.warmup_lr.to_string()),
            ("prior.final_lr", p.final_lr.to_string()),
            ("prior.normalize_prototypes", self.normalize_prototypes.to_string()),
            ("adamw.beta1", p.adamw.beta1.to_string()),
            ("adamw.beta2", p.adamw.beta2.to_string()),
            ("adamw.eps", p.adamw.eps.to_string()),
            ("adamw.weight_decay", p.adamw.weight_decay.to_string()),
            ("infer.escalate", self.escalate.to_string()),
            ("infer.tau", self.escalation.tau.to_string()),
            ("infer.top_k", self.escalation.k.to_string()),
            (
                "infer.scores",
                match self.score_kind {
                    ScoreKind::Logits => "logits",
                    ScoreKind::Probabilities => "probabilities",
                }
                .to_string(),
            ),
            ("metric.weights", w.map(|x| x.to_string()).join(",")),
            ("metric.pdenom", self.metric.pdenom.to_string()),
            ("metric.f1_all_classes", self.metric.f1_all_classes.to_string()),
            ("seesaw.p", self.seesaw_p.to_string()),
            ("seesaw.q", self.seesaw_q.to_string()),
            (
                "validate.mode",
                match self.validation_mode {
                    ValidationMode::Strict => "strict",
                    ValidationMode::Drop => "drop",
                }
                .to_string(),
            ),
            ("synth.seed", s.seed.to_string()),
            ("synth.n_classes", s.n_classes.to_string()),
            ("synth.imbalance_ratio", s.imbalance_ratio.to_string()),
            ("synth.dims_meta", s.dims_meta.to_string()),
            ("synth.dims_proto", s.dims_proto.to_string()),
            ("synth.venom_fraction", s.venom_fraction.to_string()),
            ("synth.location_informativeness", s.location_informativeness.to_string()),
            ("synth.n_observations", s.n_observations.to_string()),
            ("synth.images_min", s.images_min.to_string()),
            ("synth.images_max", s.images_max.to_string()),
            ("synth.test_fraction", s.test_fraction.to_string()),
            ("synth.logit_scale", s.logit_scale.to_string()),
            ("synth.logit_noise", s.logit_noise.to_string()),
            ("synth.embed_noise", s.embed_noise.to_string()),
            ("synth.location_spread", s.location_spread.to_string()),
            ("synth.centre_jitter", s.centre_jitter.to_string()),
            ("synth.region_size", s.region_size.to_string()),
        ]
    }

    pub fn log_resolved(&self) {
        for (k, v) in self.resolved() {
            log::info!("config {k} = {v}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let kv = parse_key_values("# top\n\na = 1 # trailing\n b=two \n", Path::new("x")).unwrap();
        assert_eq!(kv["a"], "1");
        assert_eq!(kv["b"], "two");
        assert_eq!(kv.len(), 2);
    }

    #[test]
    fn rejects_malformed_lines() {
        let err = parse_key_values("a = 1\nnonsense\n", Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("line 2") || matches!(err, Error::Parse { line: 2, .. }));
        assert!(parse_key_values("a=1\na=2\n", Path::new("x")).is_err());
    }

    #[test]
    fn unknown_key_rejected() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("prior.lamda", "3"), Err(Error::Config(_))));
        assert!(matches!(c.set("prior.lambda", "abc"), Err(Error::Config(_))));
    }

    #[test]
    fn resolved_round_trips() {
        let mut c = RunConfig::default();
        c.set("infer.tau", "0.3").unwrap();
        c.set("metric.weights", "1,1,1,1,1").unwrap();
        c.set("metric.pdenom", "all").unwrap();
        let mut back = RunConfig::default();
        for (k, v) in c.resolved() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, c);
    }

    #[test]
    fn loads_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "prior.epochs = 3\nsynth.seed = 9\n").unwrap();
        let c = RunConfig::from_file(&path).unwrap();
        assert_eq!(c.prior.epochs, 3);
        assert_eq!(c.synth.seed, 9);
        assert_eq!(c.pca_components, DEFAULT_COMPONENTS);
    }
}
