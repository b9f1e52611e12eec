use fusionbench::data::{parse_cifar10_batch, read_container, split, write_container, CIFAR_RECORD_BYTES};
use fusionbench::model::{build_classifier, deserialize_params, serialize_params, ArchConfig, ClassifierKind};
use fusionbench::pipeline::DataSettings;
use fusionbench::Error;

fn fixture() -> Vec<u8> {
    std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/cifar10_two_records.bin")).unwrap()
}

#[test]
fn cifar_fixture_decodes_planes_in_order() {
    let bytes = fixture();
    assert_eq!(bytes.len(), 2 * CIFAR_RECORD_BYTES);
    let recs = parse_cifar10_batch(&bytes).unwrap();
    assert_eq!(recs.iter().map(|r| r.0).collect::<Vec<_>>(), vec![3, 9]);
    // first record: byte i of the pixel block is (7i + 1) mod 256
    let img = &recs[0].1;
    for (ch, y, x) in [(0, 0, 0), (0, 5, 17), (1, 0, 0), (2, 31, 31), (1, 12, 3)] {
        let i = ch * 1024 + y * 32 + x;
        let want = ((7 * i + 1) % 256) as f32 / 255.0;
        assert_eq!(img.at(&[ch, y, x]).to_bits(), want.to_bits());
    }
    for (r, (_, img)) in recs.iter().enumerate() {
        let raw = &bytes[r * CIFAR_RECORD_BYTES + 1..(r + 1) * CIFAR_RECORD_BYTES];
        for (v, b) in img.data().iter().zip(raw) {
            assert_eq!(v.to_bits(), (*b as f32 / 255.0).to_bits());
        }
    }
}

#[test]
fn cifar_truncation_and_bad_labels_are_reported() {
    let bytes = fixture();
    match parse_cifar10_batch(&bytes[..CIFAR_RECORD_BYTES + 10]) {
        Err(Error::Parse { offset, .. }) => assert_eq!(offset, CIFAR_RECORD_BYTES),
        other => panic!("{other:?}"),
    }
    let mut bad = bytes.clone();
    bad[CIFAR_RECORD_BYTES] = 10;
    assert!(matches!(parse_cifar10_batch(&bad), Err(Error::Value { index: 1, .. })));
}

#[test]
fn reference_split_sizes() {
    let ds = DataSettings { classes: 6, image_size: 16, n_per_class: 1250, ..DataSettings::default() }.generate().unwrap();
    let (tr, te) = split(&ds, 0.75, 9).unwrap();
    assert_eq!((ds.len(), tr.len(), te.len()), (7500, 5625, 1875));
}

#[test]
fn containers_and_checkpoints_roundtrip_byte_for_byte() {
    let ds = DataSettings { classes: 3, image_size: 16, n_per_class: 4, ..DataSettings::default() }.generate().unwrap();
    let bytes = write_container(&ds).unwrap();
    let back = read_container(&bytes).unwrap();
    assert_eq!(back, ds);
    assert_eq!(write_container(&back).unwrap(), bytes);

    let arch = ArchConfig { in_channels: 3, widths: vec![4, 8], output_dim: 8, kernel: 3 };
    for kind in [ClassifierKind::Foreground, ClassifierKind::Background, ClassifierKind::Joint] {
        let clf = build_classifier(kind, &arch, 3, 1).unwrap();
        let b = serialize_params(&clf).unwrap();
        let again = deserialize_params(&b).unwrap();
        assert_eq!(again, clf);
        assert_eq!(serialize_params(&again).unwrap(), b);
    }
}
