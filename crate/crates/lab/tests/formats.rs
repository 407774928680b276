use tima_core::data::{generate_synthetic, SyntheticSpec};
use tima_core::model::{DualEncoder, EncoderConfig};
use tima_lab::formats::{
    decode_checkpoint, decode_dataset, encode_checkpoint, encode_dataset, load_checkpoint,
    load_dataset, save_checkpoint, save_dataset, FormatError, FORMAT_VERSION,
};

fn small_model(seed: u64) -> DualEncoder {
    let cfg = EncoderConfig {
        input_dim: 16,
        hidden_dims: vec![8, 6],
        embed_dim: 4,
        num_classes: 3,
        seed,
    };
    DualEncoder::new(cfg)
        .unwrap()
        .with_temperature(0.05)
        .unwrap()
}

fn small_data() -> tima_core::data::Dataset {
    let spec = SyntheticSpec {
        image_side: 4,
        train_count: 30,
        test_count: 10,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec).unwrap().0
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for seed in 0..5 {
        let model = small_model(seed);
        let back = decode_checkpoint(&encode_checkpoint(&model)).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.temperature().to_bits(), model.temperature().to_bits());
        assert_eq!(back.params(), model.params());
        assert_eq!(back.fingerprint(), model.fingerprint());
    }
}

#[test]
fn checkpoint_without_hidden_layers() {
    let cfg = EncoderConfig {
        input_dim: 5,
        hidden_dims: vec![],
        embed_dim: 3,
        num_classes: 2,
        seed: 1,
    };
    let model = DualEncoder::new(cfg).unwrap();
    assert_eq!(
        decode_checkpoint(&encode_checkpoint(&model))
            .unwrap()
            .params(),
        model.params()
    );
}

#[test]
fn dataset_round_trip_is_exact() {
    let data = small_data();
    let back = decode_dataset(&encode_dataset(&data)).unwrap();
    assert_eq!(back.labels(), data.labels());
    assert_eq!(back.superclass_of(), data.superclass_of());
    assert_eq!(back.image_side(), data.image_side());
    assert_eq!(back.num_superclasses(), data.num_superclasses());
    assert!(back
        .pixels()
        .iter()
        .zip(data.pixels())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(3);
    save_checkpoint(&model, &dir.path().join("m.timm")).unwrap();
    assert_eq!(
        load_checkpoint(&dir.path().join("m.timm"))
            .unwrap()
            .params(),
        model.params()
    );
    let data = small_data();
    save_dataset(&data, &dir.path().join("d.timd")).unwrap();
    assert_eq!(
        load_dataset(&dir.path().join("d.timd")).unwrap().pixels(),
        data.pixels()
    );
    assert!(matches!(
        load_dataset(&dir.path().join("missing.timd")),
        Err(FormatError::Io(_))
    ));
}

#[test]
fn wrong_magic_is_rejected() {
    let model = encode_checkpoint(&small_model(0));
    let data = encode_dataset(&small_data());
    assert!(matches!(
        decode_dataset(&model),
        Err(FormatError::BadMagic {
            expected: "TIMD",
            ..
        })
    ));
    assert!(matches!(
        decode_checkpoint(&data),
        Err(FormatError::BadMagic {
            expected: "TIMM",
            ..
        })
    ));
    assert!(matches!(
        decode_checkpoint(b"\x89PNG\r\n\x1a\n"),
        Err(FormatError::BadMagic { .. })
    ));
}

#[test]
fn every_truncation_is_reported() {
    let model = encode_checkpoint(&small_model(0));
    for len in 0..model.len() {
        match decode_checkpoint(&model[..len]) {
            Err(FormatError::TruncatedFile { .. }) => {}
            other => panic!("checkpoint prefix {len}: {other:?}"),
        }
    }
    let data = encode_dataset(&small_data());
    for len in 0..data.len() {
        match decode_dataset(&data[..len]) {
            Err(FormatError::TruncatedFile { .. }) => {}
            other => panic!("dataset prefix {len}: {:?}", other.map(|d| d.len())),
        }
    }
}

#[test]
fn other_versions_are_rejected() {
    for mut bytes in [
        encode_checkpoint(&small_model(0)),
        encode_dataset(&small_data()),
    ] {
        bytes[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        let err = match decode_checkpoint(&bytes) {
            Err(FormatError::BadMagic { .. }) => decode_dataset(&bytes).map(|_| ()).unwrap_err(),
            other => other.map(|_| ()).unwrap_err(),
        };
        assert!(
            matches!(err, FormatError::UnsupportedVersion(v) if v == FORMAT_VERSION + 1),
            "{err:?}"
        );
    }
}

#[test]
fn trailing_bytes_are_rejected() {
    let mut bytes = encode_checkpoint(&small_model(0));
    bytes.push(0);
    assert!(matches!(
        decode_checkpoint(&bytes),
        Err(FormatError::TrailingBytes(1))
    ));
}

#[test]
fn inconsistent_contents_are_invalid() {
    // declare one more class than the label range allows
    let data = small_data();
    let mut bytes = encode_dataset(&data);
    let label_at = 24 + 2 * data.num_classes();
    bytes[label_at..label_at + 2].copy_from_slice(&(data.num_classes() as u16).to_le_bytes());
    assert!(matches!(
        decode_dataset(&bytes),
        Err(FormatError::Invalid(_))
    ));
}
