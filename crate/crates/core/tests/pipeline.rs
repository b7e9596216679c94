//! End-to-end runs over small synthetic data: train, save, reload, predict,
//! refine, score.

use renet_seg::data::{cue_oracle, generate_longrange_splits, Dataset, LongRangeTaskConfig};
use renet_seg::densecrf::{argmax_labels, mean_field, CrfParams};
use renet_seg::harness::{evaluate, init_params, train, ConfusionMatrix, SgdConfig};
use renet_seg::layers::{NormConfig, NormMode};
use renet_seg::models::{Arch, ModelConfig, Network, DESK_SCALE};

fn small_task() -> LongRangeTaskConfig {
    LongRangeTaskConfig {
        height: 16,
        width: 64,
        cue_size: 4,
        band_start: 40,
        band_width: 24,
        ..LongRangeTaskConfig::default()
    }
}

fn sgd(iterations: usize) -> SgdConfig {
    SgdConfig {
        lr: 0.01,
        iterations,
        batch: 2,
        seed: 3,
        ..SgdConfig::default()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn hybrid() -> ModelConfig {
    let mut m = ModelConfig::new(Arch::HReNet, DESK_SCALE, 4);
    m.norm = NormConfig::new(NormMode::Batch);
    m
}

#[test]
fn cue_oracle_scores_perfectly() {
    let cfg = small_task();
    let data = generate_longrange_splits(0, 12, &cfg).unwrap().split("test").unwrap();
    let mut m = ConfusionMatrix::new(cfg.classes);
    for s in &data.samples {
        m.add(&s.labels, &cue_oracle(s, &cfg)).unwrap();
    }
    let r = m.report().unwrap();
    assert_eq!((r.pixel_accuracy, r.mean_iou), (1.0, 1.0));
}

#[test]
fn training_lowers_the_loss() {
    let data = generate_longrange_splits(8, 0, &small_task()).unwrap().split("train").unwrap();
    for model in [ModelConfig::new(Arch::BaselineFcn, DESK_SCALE, 4), hybrid()] {
        let mut net = Network::<f32>::new(model.build().unwrap()).unwrap();
        init_params(&mut net, 1).unwrap();
        let rep = train(&mut net, &data, &sgd(60)).unwrap();
        let (head, tail) = (mean(&rep.losses[..10]), mean(&rep.losses[50..]));
        assert!(tail < head, "{:?}: {head} -> {tail}", model.arch);
        assert!(rep.losses.iter().all(|l| l.is_finite()));
    }
}

#[test]
fn reloaded_checkpoint_predicts_the_same() {
    let data: Dataset = generate_longrange_splits(4, 2, &small_task()).unwrap();
    let mut net = Network::<f32>::new(hybrid().build().unwrap()).unwrap();
    init_params(&mut net, 2).unwrap();
    train(&mut net, &data.split("train").unwrap(), &sgd(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    net.save(dir.path()).unwrap();
    let mut back = Network::<f32>::load(dir.path()).unwrap();
    let test = data.split("test").unwrap();
    for s in &test.samples {
        let a = net.forward_variable_size(&s.image).unwrap();
        let b = back.forward_variable_size(&s.image).unwrap();
        assert_eq!(a.data(), b.data());
    }
    assert_eq!(evaluate(&mut net, &test).unwrap(), evaluate(&mut back, &test).unwrap());
}

#[test]
fn crf_refines_network_output() {
    let data = generate_longrange_splits(0, 1, &small_task()).unwrap().split("test").unwrap();
    let mut net = Network::<f64>::new(hybrid().build().unwrap()).unwrap();
    init_params(&mut net, 5).unwrap();
    let s = &data.samples[0];
    let probs = net.forward_variable_size(&s.image.cast()).unwrap();
    let q = mean_field(&probs, &s.image.cast(), &CrfParams::default()).unwrap();
    assert_eq!(q.shape(), probs.shape());
    let plane = s.height() * s.width();
    for px in 0..plane {
        let total: f64 = (0..4).map(|k| q.data()[k * plane + px]).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
    let labels = argmax_labels(&q).unwrap();
    assert_eq!((labels.height, labels.width), (s.height(), s.width()));
}
