//! Library results checked against the naive reference implementations.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use venomguard::inference::{predict_dataset, EscalationPolicy, PredictOptions};
use venomguard::losses::{seesaw_loss, CountMode, SeesawState};
use venomguard::pca::fit_pca;
use venomguard::prior::{PriorArtifact, PriorMlp, PrototypeMatrix};
use venomguard::synthetic::oracle::{oracle_predict, oracle_seesaw, OracleImage, OraclePrior};
use venomguard::synthetic::{class_counts, generate, SynthConfig};

#[test]
fn seesaw_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let c = rng.random_range(2..=12);
        let z: Vec<f64> = (0..c).map(|_| rng.random_range(-6.0..6.0)).collect();
        let y = rng.random_range(0..c);
        let counts: Vec<u64> = (0..c).map(|_| rng.random_range(0..500)).collect();
        let (p, q) = (rng.random_range(0.0..2.0), rng.random_range(0.0..3.0));
        let state = SeesawState::new(counts.clone(), p, q, CountMode::Static).unwrap();
        let got = seesaw_loss(&z, y, &state).unwrap().value;
        let fc: Vec<f64> = counts.iter().map(|&n| n as f64).collect();
        let want = oracle_seesaw(&z, y, &fc, p, q);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

fn to_oracle(a: &PriorArtifact) -> OraclePrior {
    let ms = a.model.layer_matrices().unwrap();
    let layers = ms
        .chunks(2)
        .map(|wb| (wb[0].iter_rows().map(<[f64]>::to_vec).collect(), wb[1].row(0).to_vec()))
        .collect();
    let o = a.prototypes.matrix();
    let prototypes = (0..o.ncols()).map(|c| o.column(c).to_vec()).collect();
    let pca = a
        .pca
        .as_ref()
        .map(|p| (p.mean.clone(), p.components.iter_rows().map(<[f64]>::to_vec).collect()));
    OraclePrior { layers, prototypes, pca }
}

#[test]
fn predictions_match_oracle() {
    let cfg = SynthConfig {
        n_classes: 15,
        n_observations: 600,
        logit_noise: 4.0,
        ..SynthConfig::default()
    };
    let ds = generate(&cfg).unwrap();
    let b = &ds.test;
    let c = b.classes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = PriorMlp::new(4, 8, 3, 0.1, 1).unwrap();
    model.params_mut().iter_mut().for_each(|p| *p += rng.random_range(-0.5..0.5));
    let prototypes =
        PrototypeMatrix::from_columns(Array2::from_shape_simple_fn((3, c), || rng.random_range(-1.0..1.0)), false).unwrap();
    let prior = PriorArtifact {
        model,
        prototypes,
        pca: Some(fit_pca(&b.metadata, 4).unwrap()),
    };
    let oracle_prior = to_oracle(&prior);

    let logits = b.logits().unwrap();
    let images: Vec<OracleImage<'_>> = b
        .observations
        .rows
        .iter()
        .enumerate()
        .map(|(i, o)| OracleImage {
            observation_id: &o.observation_id,
            logits: logits.row(o.image_index),
            metadata: b.metadata_for(i).unwrap(),
        })
        .collect();
    let flags = b.classes.venomous_flags();

    let mut escalated = 0;
    for with_prior in [false, true] {
        for tau in [None, Some(0.5)] {
            let opts = PredictOptions {
                escalation: tau.map(|t| EscalationPolicy::new(t, 5).unwrap()),
                ..PredictOptions::default()
            };
            let run = predict_dataset(b, with_prior.then_some(&prior), &opts).unwrap();
            let want = oracle_predict(&images, with_prior.then_some(&oracle_prior), &flags, tau);
            assert_eq!(run.predictions.len(), want.len());
            for p in &run.predictions {
                assert_eq!(p.class_id, want[&p.observation_id], "{} prior={with_prior} tau={tau:?}", p.observation_id);
                escalated += usize::from(p.class_id != p.pre_escalation);
            }
        }
    }
    assert!(escalated > 0, "the comparison never exercised escalation");
}

#[test]
fn default_class_counts_are_pinned() {
    let cfg = SynthConfig::default();
    let counts = class_counts(cfg.n_classes, cfg.imbalance_ratio, cfg.n_observations);
    assert_eq!(counts.iter().sum::<usize>(), cfg.n_observations);
    let head = *counts.iter().max().unwrap();
    let tail = *counts.iter().min().unwrap();
    assert_eq!((head, tail), (1450, 15));
    let ratio = head as f64 / tail as f64;
    assert!((80.0..=120.0).contains(&ratio), "{ratio}");
}

#[test]
fn uninformative_locations_carry_no_class_signal() {
    // With informativeness 0 every location is uniform noise, so the
    // per-class mean location collapses towards the global mean.
    let spread = |informativeness: f64| {
        let cfg = SynthConfig {
            n_classes: 6,
            n_observations: 3000,
            imbalance_ratio: 1.0,
            location_informativeness: informativeness,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let b = &ds.train;
        let d = b.metadata.dims();
        let labels = b.observations.labels().unwrap();
        let mut sums = vec![vec![0.0; d]; cfg.n_classes];
        let mut n = vec![0.0; cfg.n_classes];
        for (i, &y) in labels.iter().enumerate() {
            let m = b.metadata_for(i).unwrap();
            sums[y].iter_mut().zip(m).for_each(|(s, v)| *s += v);
            n[y] += 1.0;
        }
        let means: Vec<Vec<f64>> = sums.iter().zip(&n).map(|(s, k)| s.iter().map(|v| v / k).collect()).collect();
        let mut total = 0.0;
        for a in &means {
            for c in &means {
                total += a.iter().zip(c).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            }
        }
        total
    };
    let (none, strong) = (spread(0.0), spread(1.0));
    assert!(none * 20.0 < strong, "{none} vs {strong}");
}
