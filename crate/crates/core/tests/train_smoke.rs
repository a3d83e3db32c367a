//! End-to-end training smoke: the dropless model must actually learn the
//! synthetic task, and runs must reproduce bitwise.

use blockmoe::moe::MoEConfig;
use blockmoe::trainer::{train_loop, AdamParams, SynthTaskConfig, TrainMode};

#[test]
fn dropless_run_halves_the_mse_on_the_default_task() {
    let metrics = train_loop(
        &MoEConfig::default(),
        &SynthTaskConfig::default(),
        &AdamParams::default(),
        300,
        TrainMode::Dropless,
    )
    .unwrap();
    let initial = metrics.first().unwrap().loss;
    let final_ = metrics.last().unwrap().loss;
    assert!(
        final_ < 0.5 * initial,
        "initial {initial:.6}, final {final_:.6}"
    );
    assert!(metrics.iter().all(|m| m.drop_fraction == 0.0));
}

#[test]
fn capacity_one_under_skew_drops_in_the_first_steps() {
    let task = SynthTaskConfig {
        skew: 2.0,
        ..SynthTaskConfig::default()
    };
    let metrics = train_loop(
        &MoEConfig::default(),
        &task,
        &AdamParams::default(),
        10,
        TrainMode::Capacity(1.0),
    )
    .unwrap();
    assert!(
        metrics.iter().take(10).any(|m| m.drop_fraction > 0.0),
        "{:?}",
        metrics.iter().map(|m| m.drop_fraction).collect::<Vec<_>>()
    );
}
