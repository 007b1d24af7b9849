use cqlab::dataset::{ingest_dataset, synthetic_colour_classes, write_cifar10, DatasetFormat};
use cqlab::harness::{train_joint, TrainConfig, TrainOptions, Trainer, Objective, metrics_csv};
use cqlab::io::Checkpoint;
use cqlab::recognition::{evaluate_top1, Classifier, Quantiser};
use cqlab::Error;

fn tiny(epochs: usize) -> TrainConfig {
    TrainConfig {
        colours: 2,
        epochs,
        batch_size: 8,
        query_dim: 8,
        encoder_widths: [4, 8, 8],
        classifier_widths: vec![8, 8],
        augment: true,
        grad_clip: 2.0,
        ..TrainConfig::default()
    }
}

#[test]
fn cifar_file_to_checkpoint_and_back() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_colour_classes(24, 32, 1);
    let bin = dir.path().join("data_batch_1.bin");
    std::fs::write(&bin, write_cifar10(data.items()).unwrap()).unwrap();
    let loaded = ingest_dataset(dir.path(), DatasetFormat::Cifar10).unwrap();
    assert_eq!(loaded.len(), 24);
    for (a, b) in loaded.items().iter().zip(data.items()) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.image.to_rgb8(), b.image.to_rgb8());
    }

    let (train, test) = loaded.split_at(16);
    let ck_dir = dir.path().join("ck");
    let t = train_joint(&tiny(2), &train, Some(&test), &TrainOptions { checkpoint_dir: Some(ck_dir.clone()) }).unwrap();
    assert!(ck_dir.join("epoch_001.cqck").exists() && ck_dir.join("epoch_002.cqck").exists());

    let ck = Checkpoint::load(&ck_dir.join("epoch_002.cqck")).unwrap();
    let q = ck.quantiser().unwrap();
    let c = ck.classifier().unwrap().unwrap();
    let images: Vec<_> = test.images().cloned().collect();
    assert_eq!(q.quantise_test_batch(&images).unwrap(), t.quantiser.quantise_test_batch(&images).unwrap());
    assert_eq!(c.scores(&images).unwrap(), t.classifier.scores(&images).unwrap());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (train, test) = synthetic_colour_classes(32, 16, 2).split_at(24);
    let full = train_joint(&tiny(3), &train, Some(&test), &TrainOptions::default()).unwrap();
    let first = train_joint(&tiny(1), &train, Some(&test), &TrainOptions::default()).unwrap();
    let bytes = first.checkpoint().to_bytes().unwrap();
    let mut resumed = Trainer::resume(tiny(3), &Checkpoint::from_bytes(&bytes).unwrap(), Objective::Standard).unwrap();
    resumed.run(&train, Some(&test), &TrainOptions::default()).unwrap();
    assert_eq!(metrics_csv(&resumed.history), metrics_csv(&full.history));
    assert_eq!(resumed.checkpoint().to_bytes().unwrap(), full.checkpoint().to_bytes().unwrap());
}

#[test]
fn upper_bound_equals_raw_classification() {
    let (train, test) = synthetic_colour_classes(24, 16, 3).split_at(16);
    let t = train_joint(&tiny(1), &train, None, &TrainOptions::default()).unwrap();
    let r = evaluate_top1(&t.classifier, Quantiser::Bypass, &test).unwrap();
    let images: Vec<_> = test.images().cloned().collect();
    let correct = t
        .classifier
        .scores(&images)
        .unwrap()
        .iter()
        .zip(test.items())
        .filter(|(s, x)| {
            let best = s.iter().enumerate().fold(0, |b, (i, v)| if *v > s[b] { i } else { b });
            best == x.label
        })
        .count();
    assert_eq!(r.top1, correct as f64 / test.len() as f64);
    assert_eq!(r.samples, test.len());
}

#[test]
fn corrupted_checkpoint_is_rejected_with_offset() {
    let (train, _) = synthetic_colour_classes(8, 16, 4).split_at(8);
    let t = train_joint(&tiny(1), &train, None, &TrainOptions::default()).unwrap();
    let mut bytes = t.checkpoint().to_bytes().unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Corrupt { .. })));
    assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(Error::Corrupt { .. })));
}
