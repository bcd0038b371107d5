//! Whole-run behaviour of the trainer on small synthetic datasets.

use asr_core::constraints::{ConstraintSet, SceneConfig};
use asr_core::data::{synth_dataset, Composite, DatasetExample, DatasetSpec, GlyphBank, GlyphSource};
use asr_core::generative::ModelConfig;
use asr_core::model::AsrModel;
use asr_core::training::{EpochRow, TrainConfig, Trainer};

fn sprites(counts: Vec<(usize, usize)>, non_overlap: bool, seed: u64) -> Vec<DatasetExample> {
    let spec = DatasetSpec {
        source: GlyphSource::ProceduralSprites,
        counts,
        canvas_size: 50,
        glyph_size: 20,
        non_overlap,
        seed,
        max_attempts: 100_000,
        composite: Composite::Max,
    };
    synth_dataset(&spec, &GlyphBank::load(&spec.source, 20).unwrap()).unwrap()
}

fn small_model(fixed_steps: bool) -> ModelConfig {
    ModelConfig { rnn_hidden: 64, encoder_hidden: 64, mlp_hidden: [128, 64], fixed_steps, ..ModelConfig::default() }
}

fn train(model: ModelConfig, constraints: ConstraintSet, config: TrainConfig, data: &[DatasetExample]) -> Vec<EpochRow> {
    let seed = config.seed;
    let mut t = Trainer::new(AsrModel::new(model, seed).unwrap(), constraints, config).unwrap();
    t.train(data, &[], None).unwrap()
}

/// Trailing means over `window` epochs never rise by more than `slack` of
/// their magnitude.
fn non_increasing_trend(series: &[f64], window: usize, slack: f64) -> Result<(), String> {
    let smooth: Vec<f64> = series.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect();
    for (i, p) in smooth.windows(2).enumerate() {
        if p[1] > p[0] + slack * p[0].abs() {
            return Err(format!("smoothed nELBO rose from {:.2} to {:.2} at window {}: {smooth:?}", p[0], p[1], i + 1));
        }
    }
    Ok(())
}

#[test]
fn smoothed_nelbo_does_not_rise_with_counts_imposed() {
    let data = sprites(vec![(1, 250), (3, 250)], false, 21);
    let config = TrainConfig { epochs: 30, seed: 3, eval_every: 0, force_gt_counts: true, ..TrainConfig::default() };
    let rows = train(small_model(false), ConstraintSet::default(), config, &data);
    let nelbo: Vec<f64> = rows.iter().map(|r| r.nelbo).collect();
    non_increasing_trend(&nelbo, 10, 0.05).unwrap();
    assert!(nelbo[nelbo.len() - 1] < nelbo[0], "{nelbo:?}");
}

/// Needs the full 5000-image set: on small sets the first epochs are spent
/// in the phase where boxes drift together before the penalty separates them.
#[test]
fn overlap_penalty_halves_training_overlap() {
    let data = sprites(vec![(3, 5000)], true, 22);
    let ids = ["overlap", "contain_left", "contain_right", "contain_top", "contain_bottom", "scale_band", "scale_similarity"];
    let weights = [1.0, 1.0, 1.0, 1.0, 1.0, 20.0, 10.0];
    let pairs: Vec<(String, f64)> = ids.iter().zip(weights).map(|(i, w)| (i.to_string(), w)).collect();
    let constraints = ConstraintSet::from_weights(&pairs, SceneConfig::default()).unwrap();
    let config = TrainConfig { epochs: 8, seed: 4, eval_every: 0, ..TrainConfig::default() };
    let model = ModelConfig { rnn_hidden: 128, encoder_hidden: 128, mlp_hidden: [256, 128], fixed_steps: true, ..ModelConfig::default() };
    let rows = train(model, constraints, config, &data);
    let (first, last) = (rows[0].f1_mean, rows[rows.len() - 1].f1_mean);
    assert!(last <= 0.5 * first, "F1 {first:.3} -> {last:.3}");
}

#[test]
fn analytic_kl_trains_to_a_finite_bound() {
    let data = sprites(vec![(1, 32), (3, 32)], false, 23);
    let config = TrainConfig { epochs: 3, seed: 5, eval_every: 0, analytic_kl: true, ..TrainConfig::default() };
    let rows = train(small_model(false), ConstraintSet::default(), config, &data);
    assert!(rows.iter().all(|r| r.nelbo.is_finite() && r.kl.is_finite() && r.skipped_steps == 0));
}

#[test]
fn trend_check_flags_a_rise() {
    let mut s: Vec<f64> = (0..30).map(|i| -100.0 - i as f64).collect();
    assert!(non_increasing_trend(&s, 10, 0.05).is_ok());
    s.extend(std::iter::repeat_n(0.0, 10));
    assert!(non_increasing_trend(&s, 10, 0.05).is_err());
}
