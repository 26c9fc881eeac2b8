use std::fs;

use uhkd::data::{load_external, synth_dataset, write_packed};
use uhkd::{Error, SynthConfig};

fn small() -> SynthConfig {
    SynthConfig {
        n_per_class: 3,
        image_size: 8,
        ..SynthConfig::default()
    }
}

#[test]
fn packed_round_trip_within_quantization() {
    let ds = synth_dataset(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_packed(&ds, dir.path()).unwrap();
    let back = load_external(dir.path(), &manifest).unwrap();
    assert_eq!(back.num_classes, ds.num_classes);
    assert_eq!((back.train.len(), back.val.len()), (ds.train.len(), ds.val.len()));
    for (b, &i) in back.train.iter().chain(&back.val).zip(ds.train.iter().chain(&ds.val)) {
        assert_eq!(back.labels[*b], ds.labels[i]);
        let worst = back
            .image(*b)
            .iter()
            .zip(ds.image(i))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 0.5 / 255.0 + 1e-12, "{worst}");
    }
}

#[test]
fn truncated_record_reports_offset() {
    let ds = synth_dataset(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_packed(&ds, dir.path()).unwrap();
    let path = dir.path().join("val.bin");
    let mut bytes = fs::read(&path).unwrap();
    let record = 1 + 3 * 8 * 8;
    bytes.truncate(2 * record + 10);
    fs::write(&path, bytes).unwrap();
    match load_external(dir.path(), &manifest) {
        Err(Error::Format { path: p, offset, .. }) => {
            assert_eq!(p, path);
            assert_eq!(offset, 2 * record as u64);
        }
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn out_of_range_label_is_a_format_error() {
    let ds = synth_dataset(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_packed(&ds, dir.path()).unwrap();
    let path = dir.path().join("train.bin");
    let mut bytes = fs::read(&path).unwrap();
    let record = 1 + 3 * 8 * 8;
    bytes[record] = 200;
    fs::write(&path, bytes).unwrap();
    assert!(matches!(
        load_external(dir.path(), &manifest),
        Err(Error::Format { offset, .. }) if offset == record as u64
    ));
}

#[test]
fn empty_manifest_and_empty_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.txt");
    fs::write(&manifest, "# nothing here\nimage_size = 8\nnum_classes = 10\n").unwrap();
    let err = load_external(dir.path(), &manifest).unwrap_err();
    assert!(err.to_string().contains("empty dataset"), "{err}");

    fs::write(dir.path().join("a.bin"), []).unwrap();
    fs::write(&manifest, "image_size = 8\nnum_classes = 10\nfile = a.bin train\n").unwrap();
    let err = load_external(dir.path(), &manifest).unwrap_err();
    assert!(err.to_string().contains("empty dataset"), "{err}");
}

#[test]
fn malformed_manifest_lines() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.txt");
    for text in ["image_size 8\n", "image_size = eight\n", "colour = blue\n", "file = a.bin test\n"] {
        fs::write(&manifest, text).unwrap();
        assert!(matches!(load_external(dir.path(), &manifest), Err(Error::Config(_))), "{text:?}");
    }
}
