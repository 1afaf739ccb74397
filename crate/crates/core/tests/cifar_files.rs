//! CIFAR-10 binary batches on disk.

use nnwm::data::{load_cifar10_binary, CIFAR_RECORD_LEN};
use nnwm::Error;

/// One record: label byte then 1024 red, 1024 green, 1024 blue bytes.
fn record(label: u8, fill: [u8; 3]) -> Vec<u8> {
    let mut r = vec![label];
    for c in fill {
        r.extend(std::iter::repeat(c).take(1024));
    }
    r
}

fn write_batches(dir: &std::path::Path, test_labels: &[u8]) {
    for i in 1..=5u8 {
        let bytes = [record(i, [0, 255, 51]), record(0, [255, 0, 102])].concat();
        std::fs::write(dir.join(format!("data_batch_{i}.bin")), bytes).unwrap();
    }
    let test: Vec<u8> = test_labels.iter().flat_map(|&l| record(l, [51, 51, 51])).collect();
    std::fs::write(dir.join("test_batch.bin"), test).unwrap();
}

#[test]
fn loads_and_centers_on_training_statistics() {
    let dir = tempfile::tempdir().unwrap();
    write_batches(dir.path(), &[9, 3]);
    let (train, test) = load_cifar10_binary(dir.path()).unwrap();
    assert_eq!(CIFAR_RECORD_LEN, 3073);
    assert_eq!(train.len(), 10);
    assert_eq!(test.len(), 2);
    assert_eq!(train.labels[..4], [1, 0, 2, 0]);
    assert_eq!(test.labels, vec![9, 3]);
    assert_eq!((train.shape.channels, train.shape.height, train.shape.width), (3, 32, 32));
    // Training channel means over [0, 1] scaled pixels: red 0.5, green 0.5, blue 0.3.
    let px = |ds: &nnwm::data::Dataset, i: usize, c: usize| ds.image(i)[c * 1024];
    assert!((px(&train, 0, 0) + 0.5).abs() < 1e-6);
    assert!((px(&train, 0, 1) - 0.5).abs() < 1e-6);
    assert!((px(&train, 0, 2) + 0.1).abs() < 1e-6);
    assert!((px(&test, 0, 0) - (0.2 - 0.5)).abs() < 1e-6);
    assert!((px(&test, 0, 2) - (0.2 - 0.3)).abs() < 1e-6);
}

#[test]
fn missing_batch_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    write_batches(dir.path(), &[1]);
    std::fs::remove_file(dir.path().join("data_batch_3.bin")).unwrap();
    assert!(matches!(load_cifar10_binary(dir.path()), Err(Error::Io { .. })));
}

#[test]
fn truncated_test_batch_reports_record_offset() {
    let dir = tempfile::tempdir().unwrap();
    write_batches(dir.path(), &[1, 2]);
    let path = dir.path().join("test_batch.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(CIFAR_RECORD_LEN + 100);
    std::fs::write(&path, bytes).unwrap();
    match load_cifar10_binary(dir.path()) {
        Err(Error::Data { offset, .. }) => assert_eq!(offset, CIFAR_RECORD_LEN as u64),
        other => panic!("expected data error, got {other:?}"),
    }
}
