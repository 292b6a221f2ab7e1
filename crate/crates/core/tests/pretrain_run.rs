//! End-to-end runs of the two-phase training loop: loss trend, phase
//! schedule, exact resume, and checkpoint integrity.

use std::fs;
use std::path::PathBuf;

use paco_core::config::{Phase, RunConfig};
use paco_core::data::generate_synthetic;
use paco_core::patch::ImageTensor;
use paco_core::pretrain::{run_pretraining, AblationSpec, TrainState};

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.image_size = 24;
    cfg.embed_dim = 16;
    cfg.encoder_depth = 1;
    cfg.encoder_heads = 2;
    cfg.decoder_depth = 1;
    cfg.feature_tap_layers = vec![1];
    cfg.perceptual_layer_indices = vec![1];
    cfg.backbone_channels = vec![4];
    cfg.epochs = 4;
    cfg.batch_size = 8;
    cfg.base_lr = 3e-3;
    cfg.seed = 77;
    cfg
}

fn images(count: usize, cfg: &RunConfig, seed: u64) -> Vec<ImageTensor> {
    generate_synthetic(count, cfg.image_size, cfg.channels, seed)
        .expect("synthetic data")
        .into_iter()
        .map(|s| s.image)
        .collect()
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(name);
    if dir.exists() {
        fs::remove_dir_all(&dir).expect("clear old dir");
    }
    fs::create_dir_all(&dir).expect("create dir");
    dir
}

#[test]
fn epoch_mean_loss_decreases_over_the_run() {
    let cfg = tiny_config();
    let data = images(64, &cfg, 77);
    let out = fresh_dir("paco_run_trend");
    let summary =
        run_pretraining(&cfg, &AblationSpec::default(), &data, &out, None).expect("run");

    assert_eq!(summary.epochs.len(), cfg.epochs);
    assert_eq!(summary.steps.len(), cfg.epochs * 8, "64 images / batch 8");
    let first_main = summary.epochs[1].mean_mse;
    let last_main = summary.epochs.last().unwrap().mean_mse;
    assert!(
        last_main < first_main,
        "mean mse should fall over the main phase: {first_main} -> {last_main}"
    );
    assert!(out.join("train_log.csv").exists());
    assert!(out.join("run_summary.json").exists());
    assert!(summary.final_checkpoint.exists());
}

#[test]
fn phase_schedule_runs_incubation_exactly_once() {
    let cfg = tiny_config();
    let data = images(16, &cfg, 78);

    let out = fresh_dir("paco_run_phases");
    let summary =
        run_pretraining(&cfg, &AblationSpec::default(), &data, &out, None).expect("run");
    assert_eq!(summary.epochs[0].phase, Phase::Incubation);
    assert!(
        summary.epochs[1..].iter().all(|e| e.phase == Phase::Main),
        "every epoch after the first must be a main epoch"
    );

    let out = fresh_dir("paco_run_phases_noinc");
    let spec = AblationSpec { incubation_enabled: false, ..AblationSpec::default() };
    let summary = run_pretraining(&cfg, &spec, &data, &out, None).expect("run");
    assert!(
        summary.epochs.iter().all(|e| e.phase == Phase::Main),
        "with incubation off, every epoch is a main epoch"
    );
}

#[test]
fn resume_reproduces_the_straight_run_exactly() {
    let cfg = tiny_config();
    let data = images(64, &cfg, 79);
    let spec = AblationSpec::default();

    let out_a = fresh_dir("paco_run_resume_a");
    let straight = run_pretraining(&cfg, &spec, &data, &out_a, None).expect("straight run");

    let midpoint = out_a.join("checkpoint_epoch_002.ckpt");
    assert!(midpoint.exists());
    let out_b = fresh_dir("paco_run_resume_b");
    let resumed =
        run_pretraining(&cfg, &spec, &data, &out_b, Some(&midpoint)).expect("resumed run");

    // The resumed log is the tail of the straight log, value for value.
    let tail = &straight.steps[straight.steps.len() - resumed.steps.len()..];
    assert_eq!(resumed.steps.len(), 16, "two remaining epochs of 8 steps");
    for (r, s) in resumed.steps.iter().zip(tail.iter()) {
        assert_eq!(r.step, s.step);
        assert_eq!(r.epoch, s.epoch);
        assert_eq!(r.phase, s.phase);
        assert_eq!(r.mse, s.mse, "step {}: mse diverged after resume", r.step);
        assert_eq!(r.total, s.total, "step {}: total diverged after resume", r.step);
    }
    assert_eq!(resumed.params_checksum, straight.params_checksum);
    assert_eq!(
        fs::read(&straight.final_checkpoint).unwrap(),
        fs::read(&resumed.final_checkpoint).unwrap(),
        "final checkpoints must be byte-identical"
    );
}

#[test]
fn resume_past_the_end_still_writes_a_final_checkpoint() {
    let mut cfg = tiny_config();
    cfg.epochs = 2;
    let data = images(16, &cfg, 80);
    let spec = AblationSpec::default();

    let out_a = fresh_dir("paco_run_done_a");
    let straight = run_pretraining(&cfg, &spec, &data, &out_a, None).expect("run");

    let out_b = fresh_dir("paco_run_done_b");
    let resumed =
        run_pretraining(&cfg, &spec, &data, &out_b, Some(&straight.final_checkpoint))
            .expect("no-op resume");
    assert!(resumed.steps.is_empty(), "nothing left to train");
    assert!(resumed.final_checkpoint.exists());
    assert_eq!(resumed.params_checksum, straight.params_checksum);
}

#[test]
fn a_corrupted_checkpoint_is_rejected() {
    let mut cfg = tiny_config();
    cfg.epochs = 1;
    let data = images(8, &cfg, 81);
    let spec = AblationSpec::default();
    let out = fresh_dir("paco_run_corrupt");
    let summary = run_pretraining(&cfg, &spec, &data, &out, None).expect("run");

    let mut bytes = fs::read(&summary.final_checkpoint).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    let tampered = out.join("tampered.ckpt");
    fs::write(&tampered, &bytes).unwrap();

    let err = TrainState::load(&tampered, &cfg, &spec).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains("sha") || msg.contains("checksum") || msg.contains("payload"),
        "corruption should fail the integrity check, got: {msg}"
    );
}
