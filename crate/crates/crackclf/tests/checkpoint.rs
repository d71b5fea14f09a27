use crackclf::checkpoint::{config_diff, load_tensors, save_f32_tensors, Checkpoint};
use crackclf_core::adversary::CriticConfig;
use crackclf_core::segnet::{SegNet, SegNetConfig};
use crackclf_core::synthetic::{dataset, SyntheticConfig};
use crackclf_core::trainer::{ClfTrainer, DeepSupervision, RecordLog, Sample, TrainConfig};
use crackclf_core::Tensor;

fn data() -> Vec<Sample> {
    let cfg = SyntheticConfig {
        height: 32,
        width: 32,
        ..SyntheticConfig::default()
    };
    dataset(&cfg, 2, 5)
}

fn train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 1,
        lr: 1e-2,
        seed: 3,
        flips: true,
        ..TrainConfig::default()
    }
}

fn trainer(epochs: usize) -> ClfTrainer<SegNet, DeepSupervision> {
    let net = SegNet::new(SegNetConfig::tiny(4, 2), 3).unwrap();
    let critic = CriticConfig {
        block_channels: vec![4, 8],
        ..CriticConfig::default()
    };
    ClfTrainer::new(net, DeepSupervision::default(), critic, train_config(epochs)).unwrap()
}

fn loss_bits(log: &RecordLog) -> Vec<String> {
    log.0.iter().map(|r| serde_json::to_string(r).unwrap()).collect()
}

#[test]
fn bytes_round_trip_everything() {
    let mut t = trainer(1);
    t.fit(&data(), &[], &mut RecordLog::default()).unwrap();
    let c = Checkpoint::from_trainer(&t);
    let back = Checkpoint::from_bytes(&c.to_bytes().unwrap(), "mem".as_ref()).unwrap();
    assert_eq!(back.model, c.model);
    assert_eq!(back.critic_config, c.critic_config);
    assert_eq!(back.train, c.train);
    assert_eq!(back.segnet, c.segnet);
    assert_eq!(back.critic, c.critic);
    assert_eq!(back.seg_opt, c.seg_opt);
    assert_eq!(back.critic_opt, c.critic_opt);
    assert_eq!(back.progress, c.progress);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.safetensors");
    let mut full = trainer(3);
    let mut full_log = RecordLog::default();
    full.fit(&data(), &[], &mut full_log).unwrap();

    let mut head = trainer(1);
    let mut log = RecordLog::default();
    head.fit(&data(), &[], &mut log).unwrap();
    Checkpoint::from_trainer(&head).save(&path).unwrap();
    let mut tail = Checkpoint::load(&path)
        .unwrap()
        .into_trainer(DeepSupervision::default(), train_config(3))
        .unwrap();
    tail.fit(&data(), &[], &mut log).unwrap();

    assert_eq!(loss_bits(&full_log), loss_bits(&log));
    assert_eq!(full.backbone().params(), tail.backbone().params());
    assert_eq!(full.critic().unwrap().params(), tail.critic().unwrap().params());
}

#[test]
fn network_reloads_identically() {
    let net = SegNet::new(SegNetConfig::tiny(4, 2), 9).unwrap();
    let t = ClfTrainer::new(
        net,
        DeepSupervision::default(),
        CriticConfig::default(),
        TrainConfig {
            clf_enabled: false,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let c = Checkpoint::from_trainer(&t);
    assert!(c.critic.is_none());
    let back = Checkpoint::from_bytes(&c.to_bytes().unwrap(), "mem".as_ref()).unwrap();
    let image = &data()[0].image;
    let a = t.backbone().infer(image).unwrap().fused;
    let b = back.network().unwrap().infer(image).unwrap().fused;
    assert_eq!(a, b);
}

#[test]
fn corrupt_and_mismatched_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.safetensors");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    let e = Checkpoint::load(&path).unwrap_err().to_string();
    assert!(e.contains("bad.safetensors"), "{e}");

    let t = trainer(1);
    let mut c = Checkpoint::from_trainer(&t);
    c.model = SegNetConfig::tiny(8, 2);
    let e = Checkpoint::from_bytes(&c.to_bytes().unwrap(), "mem".as_ref())
        .unwrap_err()
        .to_string();
    assert!(e.contains("seg/"), "{e}");
}

#[test]
fn config_diff_names_fields() {
    let a = SegNetConfig::default();
    let b = SegNetConfig::tiny(8, 4);
    let d = config_diff("model", &a, &b);
    assert!(d.iter().any(|l| l.contains("model.stage_channels")), "{d:?}");
    assert!(d.iter().any(|l| l.contains("model.reduction_ratio")), "{d:?}");
    assert!(config_diff("model", &a, &a).is_empty());
}

#[test]
fn f32_dumps_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.safetensors");
    let t = Tensor::from_vec(&[1, 2, 2], vec![0.25, 0.5, 0.125, 1.0]).unwrap();
    save_f32_tensors(&path, &[("prob".into(), t.clone())]).unwrap();
    let back = load_tensors(&path).unwrap();
    assert_eq!(back, vec![("prob".to_string(), t)]);
}
