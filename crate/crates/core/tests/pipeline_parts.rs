use std::io::Write;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tabtta::calibrator::{compute_shift_trend, ConstantTemperature};
use tabtta::handler::{adapt_batch, align_distribution_baseline, HandlerConfig, HandlerState};
use tabtta::harness::{fit_models, prepare_data, DataConfig, RunConfig};
use tabtta::metrics::DiscreteInstance;
use tabtta::nn::TrainConfig;
use tabtta::shift::SyntheticSpec;
use tabtta::source::import_logits;

fn small_config() -> RunConfig {
    RunConfig {
        data: DataConfig {
            synthetic: Some(SyntheticSpec {
                num_classes: 3,
                num_features: 3,
                n_source: 1200,
                n_target: 400,
                source_label_dist: vec![0.6, 0.3, 0.1],
                target_label_dist: vec![0.1, 0.3, 0.6],
                class_separation: 2.5,
                categorical_levels: 4,
                seed: 8,
            }),
            ..Default::default()
        },
        source_train: TrainConfig {
            epochs: 10,
            ..Default::default()
        },
        calibrator_train: TrainConfig {
            epochs: 8,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn calibrator_training_lowers_its_loss() {
    let cfg = small_config();
    let (source, _) = prepare_data(&cfg, 0).unwrap();
    let fitted = fit_models(&source, &cfg, 0).unwrap();
    let losses = &fitted.calibration_history.epoch_losses;
    assert_eq!(losses.len(), 8);
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(losses.last().unwrap() < losses.first().unwrap(), "{losses:?}");
}

#[test]
fn imported_logits_adapt_like_native_ones() {
    let cfg = small_config();
    let (source, target) = prepare_data(&cfg, 1).unwrap();
    let fitted = fit_models(&source, &cfg, 1).unwrap();
    let pre = fitted.model.preprocessor();
    let encoded = pre.apply(&target).unwrap().matrix;
    let native = fitted.model.predict_encoded(encoded.view()).unwrap();

    let mut file = tempfile::NamedTempFile::new().unwrap();
    for row in native.outer_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(file, "{}", cells.join(",")).unwrap();
    }
    file.flush().unwrap();
    let imported = import_logits::<f64>(file.path(), 3, 64).unwrap();
    assert_eq!(imported.len(), target.len().div_ceil(64));

    let groups = pre.groups();
    let handler = HandlerConfig::default();
    let mut a = HandlerState::uniform(3);
    let mut b = HandlerState::uniform(3);
    for batch in &imported {
        let rows = &batch.row_ids;
        let x = encoded.select(Axis(0), rows);
        let trend = compute_shift_trend(x.view(), &groups, &fitted.stats.column_means).unwrap();
        let own = tabtta::source::LogitsBatch::new(native.select(Axis(0), rows), rows.clone()).unwrap();
        let (out_a, next_a) = adapt_batch(batch, &trend, &fitted.calibrator, &fitted.stats, &handler, &a).unwrap();
        let (out_b, next_b) = adapt_batch(&own, &trend, &fitted.calibrator, &fitted.stats, &handler, &b).unwrap();
        assert_eq!(out_a.probs, out_b.probs);
        assert_eq!(out_a.predictions, out_b.predictions);
        a = next_a;
        b = next_b;
    }
    assert_eq!(a, b);
}

/// With exact posteriors and the true target prior, the aligned argmax is the
/// Bayes rule `argmax_y p_t(y) P(x | y)`.
#[test]
fn alignment_recovers_the_target_bayes_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for k in 0..200 {
        let c = 2 + k % 4;
        let inst = DiscreteInstance::random(&mut rng, c, 3 + k % 9);
        let cond = &inst.source_conditionals;
        for x in 0..cond.ncols() {
            let joint: Vec<f64> = (0..c).map(|y| inst.source_prior[y] * cond[[y, x]]).collect();
            let z: f64 = joint.iter().sum();
            let posterior: Vec<f64> = joint.iter().map(|v| v / z).collect();
            let aligned = align_distribution_baseline(&posterior, &inst.target_prior, &inst.source_prior);
            let bayes: Vec<f64> = (0..c).map(|y| inst.target_prior[y] * cond[[y, x]]).collect();
            let zb: f64 = bayes.iter().sum();
            for y in 0..c {
                assert!((aligned[y] - bayes[y] / zb).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn constant_unit_temperature_full_mode_is_deterministic() {
    let cfg = small_config();
    let (source, target) = prepare_data(&cfg, 2).unwrap();
    let fitted = fit_models(&source, &cfg, 2).unwrap();
    let pre = fitted.model.preprocessor();
    let encoded = pre.apply(&target).unwrap().matrix;
    let logits = fitted.model.predict_encoded(encoded.view()).unwrap();
    let batch = tabtta::source::LogitsBatch::new(logits.slice(ndarray::s![..64, ..]).to_owned(), (0..64).collect())
        .unwrap();
    let trend = compute_shift_trend(
        encoded.slice(ndarray::s![..64, ..]),
        &pre.groups(),
        &fitted.stats.column_means,
    )
    .unwrap();
    let state = HandlerState::uniform(3);
    let run = || {
        adapt_batch(&batch, &trend, &ConstantTemperature(1.0), &fitted.stats, &HandlerConfig::default(), &state)
            .unwrap()
    };
    let (first, s1) = run();
    let (second, s2) = run();
    assert_eq!(first.probs, second.probs);
    assert_eq!(s1, s2);
    let sums: Array2<f64> = first.probs.sum_axis(Axis(1)).insert_axis(Axis(1));
    assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-9));
}
