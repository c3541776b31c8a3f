use candle_core::{DType, Device};

use flowmo::data::{load_folder, synthetic_dataset, write_images, SYNTHETIC_CLASSES};
use flowmo::Error;

#[test]
fn synthetic_classes_are_balanced() {
    let n = 10_000;
    let data = synthetic_dataset(0, n, 8, 8).unwrap();
    let mut hist = [0usize; SYNTHETIC_CLASSES as usize];
    for l in data.labels() {
        hist[l.unwrap() as usize] += 1;
    }
    let expected = 1.0 / SYNTHETIC_CLASSES as f64;
    for (c, &count) in hist.iter().enumerate() {
        let share = count as f64 / n as f64;
        assert!((share - expected).abs() <= 0.02, "class {c}: {share:.4}");
    }
}

#[test]
fn synthetic_pixels_are_in_range_and_deterministic() {
    let a = synthetic_dataset(5, 16, 12, 4).unwrap();
    let b = synthetic_dataset(5, 16, 12, 4).unwrap();
    assert_eq!(a, b);
    assert!(a.records.iter().all(|r| r.pixels.iter().all(|v| (-1.0..=1.0).contains(v))));
    assert_ne!(a, synthetic_dataset(6, 16, 12, 4).unwrap());
}

#[test]
fn folder_roundtrip_skips_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_dataset(1, 3, 16, 8).unwrap();
    let x = data.all(DType::F32, &Device::Cpu).unwrap();
    write_images(&x, dir.path(), "img").unwrap();
    std::fs::write(dir.path().join("zz_broken.png"), b"not an image").unwrap();
    let loaded = load_folder(dir.path(), 16).unwrap();
    assert_eq!(loaded.len(), 3);
    // 8-bit quantization is the only loss.
    for (a, b) in data.records.iter().zip(&loaded.records) {
        let worst = a.pixels.iter().zip(&b.pixels).fold(0f32, |m, (p, q)| m.max((p - q).abs()));
        assert!(worst <= 1.0 / 255.0 + 1e-6, "{worst}");
    }
    let resized = load_folder(dir.path(), 8).unwrap();
    assert_eq!(resized.resolution(), Some(8));
}

#[test]
fn empty_folder_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_folder(dir.path(), 16), Err(Error::EmptyDataset(_))));
}
