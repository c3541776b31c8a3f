mod common;

use candle_core::{DType, Device};

use flowmo::checkpoint::{CheckpointState, Stage, TensorMap};
use flowmo::data::{synthetic_dataset, Dataset};
use flowmo::nn::{seeded, to_f64_vec};
use flowmo::trainer::{train_stage1a, train_stage1b, PostTrainObjective, TrainOptions};
use flowmo::Error;

fn bits(t: &candle_core::Tensor) -> Vec<u64> {
    to_f64_vec(t).unwrap().iter().map(|v| v.to_bits()).collect()
}

fn same(a: &TensorMap, b: &TensorMap, prefix: &str) -> bool {
    a.iter().filter(|(k, _)| k.starts_with(prefix)).all(|(k, v)| bits(v) == bits(&b[k]))
}

fn data() -> Dataset {
    synthetic_dataset(0, 8, 16, 8).unwrap()
}

fn stage1a(overrides: &[&str]) -> CheckpointState {
    let cfg = common::tiny_with(overrides);
    train_stage1a(&cfg, &data(), &mut seeded(0), &TrainOptions::default()).unwrap().state
}

#[test]
fn stage1a_is_deterministic() {
    let a = stage1a(&["train.max_steps=5"]);
    let b = stage1a(&["train.max_steps=5"]);
    assert!(same(&a.params, &b.params, ""));
    assert!(same(&a.ema, &b.ema, ""));
    assert_eq!(a.step, 5);
    assert_eq!(a.stage, Stage::Stage1a);
}

#[test]
fn encoder_stops_moving_after_freeze_step() {
    let at3 = stage1a(&["train.max_steps=3", "train.encoder_freeze_step=3"]);
    let at6 = stage1a(&["train.max_steps=6", "train.encoder_freeze_step=3"]);
    assert!(same(&at3.params, &at6.params, "encoder."));
    assert!(same(&at3.adam_m, &at6.adam_m, "encoder."));
    assert!(!same(&at3.params, &at6.params, "decoder."));
    let unfrozen = stage1a(&["train.max_steps=6"]);
    assert!(!same(&at3.params, &unfrozen.params, "encoder."));
}

#[test]
fn stage1b_keeps_encoder_bit_identical() {
    let cfg = common::tiny_with(&["train.max_steps=5", "train.stage1b_max_steps=3"]);
    let init = train_stage1a(&cfg, &data(), &mut seeded(0), &TrainOptions::default()).unwrap().state;
    let run = train_stage1b(&cfg, &init, &data(), &mut seeded(1), &TrainOptions::default(), PostTrainObjective::ChainSample).unwrap();
    let post = &run.state;
    assert_eq!(post.stage, Stage::Stage1b);
    assert_eq!(post.step, 3);
    // Stage 1B starts from the 1A EMA weights.
    assert!(same(&init.ema, &post.params, "encoder."));
    assert!(same(&init.ema, &post.ema, "encoder."));
    assert!(!same(&init.ema, &post.params, "decoder."));
    assert!(post.adam_m.keys().all(|k| !k.starts_with("encoder.")));
    assert!(run.report.steps.iter().all(|r| r.sample > 0.0));
}

#[test]
fn zero_sample_weight_matches_flow_only() {
    let cfg = common::tiny_with(&["train.max_steps=4", "train.stage1b_max_steps=3", "train.lambda_sample=0"]);
    let init = train_stage1a(&cfg, &data(), &mut seeded(0), &TrainOptions::default()).unwrap().state;
    let opts = TrainOptions::default();
    let chain = train_stage1b(&cfg, &init, &data(), &mut seeded(2), &opts, PostTrainObjective::ChainSample).unwrap();
    let flow = train_stage1b(&cfg, &init, &data(), &mut seeded(2), &opts, PostTrainObjective::FlowOnly).unwrap();
    assert!(same(&chain.state.params, &flow.state.params, ""));
}

#[test]
fn stage1b_resumes_its_own_checkpoint() {
    let cfg = common::tiny_with(&["train.max_steps=3", "train.stage1b_max_steps=2"]);
    let init = train_stage1a(&cfg, &data(), &mut seeded(0), &TrainOptions::default()).unwrap().state;
    let opts = TrainOptions::default();
    let first = train_stage1b(&cfg, &init, &data(), &mut seeded(1), &opts, PostTrainObjective::ChainSample).unwrap().state;
    let second = train_stage1b(&cfg, &first, &data(), &mut seeded(1), &opts, PostTrainObjective::ChainSample).unwrap().state;
    assert_eq!(second.step, 4);
    assert_eq!(second.adam_step, 4);
}

#[test]
fn stage1b_rejects_wrong_checkpoints() {
    let cfg = common::tiny_with(&["train.max_steps=2", "train.stage1b_max_steps=1"]);
    let init = train_stage1a(&cfg, &data(), &mut seeded(0), &TrainOptions::default()).unwrap().state;
    let opts = TrainOptions::default();
    let mut wrong_stage = init.clone();
    wrong_stage.stage = Stage::Stage2;
    let err = train_stage1b(&cfg, &wrong_stage, &data(), &mut seeded(1), &opts, PostTrainObjective::ChainSample).unwrap_err();
    assert!(matches!(err, Error::StageMismatch { .. }), "{err}");

    let other = common::tiny_with(&["model.latent_seq_len=4"]);
    let err = train_stage1b(&other, &init, &data(), &mut seeded(1), &opts, PostTrainObjective::ChainSample).unwrap_err();
    assert!(matches!(err, Error::FingerprintMismatch { .. }), "{err}");
}

#[test]
fn early_stopping_returns_best_snapshot() {
    let cfg = common::tiny_with(&["train.max_steps=3", "train.stage1b_max_steps=8", "train.eval_interval=1", "train.learning_rate=0.5"]);
    let init = train_stage1a(&cfg, &data(), &mut seeded(0), &TrainOptions::default()).unwrap().state;
    let held = synthetic_dataset(9, 4, 16, 8).unwrap().all(DType::F32, &Device::Cpu).unwrap();
    let opts = TrainOptions { held_out: Some(held), ..Default::default() };
    let run = train_stage1b(&cfg, &init, &data(), &mut seeded(1), &opts, PostTrainObjective::ChainSample).unwrap();
    let r = &run.report;
    let best = r.evals.iter().min_by(|a, b| a.perceptual.total_cmp(&b.perceptual)).unwrap();
    assert_eq!(r.selected_step, best.step);
    assert_eq!(run.state.step as usize, best.step);
    if r.early_stopped {
        let last = r.evals.last().unwrap().step;
        let after_best = r.evals.iter().filter(|e| e.step > best.step).count();
        assert_eq!(after_best, 3, "stopped at {last}");
    }
}

#[test]
fn report_csv_has_one_row_per_step() {
    let cfg = common::tiny_with(&["train.max_steps=4", "train.eval_interval=2"]);
    let held = synthetic_dataset(9, 4, 16, 8).unwrap().all(DType::F32, &Device::Cpu).unwrap();
    let opts = TrainOptions { held_out: Some(held), ..Default::default() };
    let run = train_stage1a(&cfg, &data(), &mut seeded(0), &opts).unwrap();
    assert_eq!(run.report.evals.len(), 2);
    let mut buf = Vec::new();
    run.report.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("step,"));
}

#[test]
fn wrong_resolution_is_rejected() {
    let cfg = common::tiny_with(&["train.max_steps=1"]);
    let small = synthetic_dataset(0, 4, 8, 8).unwrap();
    let err = train_stage1a(&cfg, &small, &mut seeded(0), &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
}
