use polyseg::checkpoint;
use polyseg::datapipe::synthetic_samples;
use polyseg::models::{build_model, Arch, ModelConfig};
use polyseg::trainer::{
    bce_loss, clip_global_norm, dice_loss, overfit_sanity, train, LossKind, TrainConfig, TrainHistory,
};
use polyseg::{SegError, Tensor};

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 2, learning_rate: 1e-3, seed: 5, ..TrainConfig::default() }
}

fn run(arch: Arch, cfg: &TrainConfig) -> (polyseg::models::Model, TrainHistory) {
    let data = synthetic_samples(6, 16, 1);
    let model = build_model(&ModelConfig::new(arch).with_size(4, 2)).unwrap();
    train(model, &data[..4], &data[4..], cfg).unwrap()
}

#[test]
fn history_has_one_record_per_epoch() {
    let (_, h) = run(Arch::Unet, &small_config(3));
    assert_eq!(h.len(), 3);
    assert_eq!(h.records.iter().map(|r| r.epoch).collect::<Vec<_>>(), [1, 2, 3]);
    let jsonl = h.to_jsonl();
    let lines: Vec<&str> = jsonl.lines().collect();
    assert_eq!(lines.len(), 3);
    let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    for k in ["epoch", "train_loss", "val_loss", "val_dice"] {
        assert!(v.get(k).is_some(), "missing {k}");
    }
}

#[test]
fn same_seed_same_result() {
    for arch in [Arch::ResUnet, Arch::PraNetLite] {
        let (a, ha) = run(arch, &small_config(2));
        let (b, hb) = run(arch, &small_config(2));
        assert_eq!(ha, hb);
        assert_eq!(a.params().tensors(), b.params().tensors());
    }
}

#[test]
fn training_fits_a_small_problem() {
    let cfg = TrainConfig { epochs: 150, batch_size: 4, learning_rate: 3e-3, seed: 0, ..TrainConfig::default() };
    let data = synthetic_samples(4, 16, 2);
    let model = build_model(&ModelConfig::new(Arch::Unet).with_size(4, 2)).unwrap();
    let (_, h) = train(model, &data, &data, &cfg).unwrap();
    let first = h.records.first().unwrap();
    let last = h.records.last().unwrap();
    assert!(last.train_loss < 0.5 * first.train_loss, "{} -> {}", first.train_loss, last.train_loss);
    assert!(last.val_dice > first.val_dice);
}

#[test]
fn overfit_sanity_starts_high_and_repeats() {
    let a = overfit_sanity(Arch::LeakyUnet, 0).unwrap();
    assert!(a > 0.3, "{a}");
    assert_eq!(a, overfit_sanity(Arch::LeakyUnet, 0).unwrap());
    assert_eq!(overfit_sanity(Arch::Unet, 2).unwrap(), overfit_sanity(Arch::Unet, 2).unwrap());
}

#[test]
fn non_finite_loss_aborts_with_location() {
    let data = synthetic_samples(4, 16, 1);
    let mut model = build_model(&ModelConfig::new(Arch::Unet).with_size(4, 2)).unwrap();
    model.params_mut().set("head.conv.bias", Tensor::full(&[1], f64::NAN)).unwrap();
    match train(model, &data[..2], &data[2..], &small_config(2)) {
        Err(SegError::NonFinite { epoch, step, .. }) => assert_eq!((epoch, step), (1, 1)),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn best_checkpoint_round_trips_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("best.json");
    let cfg = TrainConfig { checkpoint_path: Some(path.clone()), ..small_config(2) };
    let (model, _) = run(Arch::InceptionUnet, &cfg);
    let ck = checkpoint::load(&path).unwrap();
    assert_eq!(ck.input_size, Some([16, 16]));
    assert_eq!(ck.model.config(), model.config());
    let text = checkpoint::to_json(&model, Some([16, 16]));
    let back = checkpoint::from_json(&text).unwrap();
    assert_eq!(back.model.params().tensors(), model.params().tensors());
    for (a, b) in back.model.params().tensors().iter().zip(model.params().tensors()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn loss_values() {
    let t = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
    let z = Tensor::zeros(&[1, 1, 1, 2]);
    assert!((bce_loss(&z, &t).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    // p = 0.5 everywhere: 1 - (2*0.5 + 1) / (1 + 1 + 1)
    assert!((dice_loss(&z, &t).unwrap() - (1.0 - 2.0 / 3.0)).abs() < 1e-12);
    let big = Tensor::new(vec![1, 1, 1, 2], vec![800.0, -800.0]).unwrap();
    assert!(bce_loss(&big, &t).unwrap() < 1e-300);
    assert!(bce_loss(&z, &Tensor::zeros(&[1, 1, 2, 1])).is_err());
}

#[test]
fn clipping_caps_the_global_norm() {
    let mut g = vec![Tensor::full(&[3], 4.0), Tensor::full(&[1], 3.0)];
    let norm = clip_global_norm(&mut g, 5.0);
    assert!((norm - 57f64.sqrt()).abs() < 1e-12);
    let after: f64 = g.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
    assert!((after - 5.0).abs() < 1e-12);
}

#[test]
fn config_parsing() {
    let c = TrainConfig::from_json(r#"{"loss": "bce+dice", "epochs": 3}"#).unwrap();
    assert_eq!((c.loss, c.epochs, c.batch_size), (LossKind::BceDice, 3, 4));
    assert!(TrainConfig::from_json(r#"{"epochs": 0}"#).is_err());
    assert!(TrainConfig::from_json(r#"{"loss": "mse"}"#).is_err());
    assert!(TrainConfig::from_json(r#"{"momentum": 0.9}"#).is_err());
}
