use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use residual_transformer::checkpoint::{META_FIELDS, META_NAME};
use residual_transformer::*;

fn model(enc: EncoderConfig) -> Model<f32> {
    Model::new(&ModelConfig::new(enc, 7)).unwrap()
}

#[test]
fn save_load_gives_bitwise_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.rtck");
    let mut enc = EncoderConfig::tiny().with_seed(1);
    enc.mask = Some(ChunkMaskSpec::new(2, 1, 0).unwrap());
    let m = model(enc);
    save_checkpoint(&m, &path).unwrap();
    let back: Model<f32> = load_checkpoint(&path, Some(m.config())).unwrap();
    for ((na, a), (nb, b)) in m.params().iter().zip(back.params().iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.tensor, b.tensor);
    }
    let tokens = [1, 5, 2, 6, 0, 3];
    let a = m.logits(&tokens, 2, 3).unwrap();
    let b = back.logits(&tokens, 2, 3).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn f64_models_round_to_f32_on_save() {
    let m = Model::<f64>::new(&ModelConfig::new(EncoderConfig::tiny(), 7)).unwrap();
    let back: Model<f64> = Checkpoint::from_model(&m).to_model().unwrap();
    for ((_, a), (_, b)) in m.params().iter().zip(back.params().iter()) {
        for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
            assert_eq!(*y, f64::from(*x as f32));
        }
    }
}

#[test]
fn each_damage_class_is_reported_distinctly() {
    let bytes = Checkpoint::from_model(&model(EncoderConfig::tiny())).to_bytes();

    let truncated = &bytes[..bytes.len() - 1];
    assert!(matches!(Checkpoint::from_bytes(truncated), Err(Error::Truncated(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(Error::Truncated(_))));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::CorruptHeader(_))));

    let mut version = bytes.clone();
    version[4] = 2;
    assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::UnsupportedVersion(2))));

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(Checkpoint::from_bytes(&trailing), Err(Error::CorruptHeader(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.rtck");
    std::fs::write(&path, &bytes).unwrap();
    let other = ModelConfig::new(EncoderConfig::tiny().with_sharing(1), 7);
    match load_checkpoint::<f32>(&path, Some(&other)) {
        Err(Error::ConfigMismatch { fields }) => assert!(fields.iter().any(|f| f.contains("share_every"))),
        other => panic!("expected mismatch, got {:?}", other.map(|m| m.num_params())),
    }
    assert!(matches!(load_checkpoint::<f32>(dir.path().join("missing"), None), Err(Error::Io(_))));
}

#[test]
fn header_layout_is_as_documented() {
    let bytes = Checkpoint::from_model(&model(EncoderConfig::tiny())).to_bytes();
    assert_eq!(&bytes[..4], b"RTCK");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let name_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    assert_eq!(&bytes[16..16 + name_len], META_NAME.as_bytes());
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ckpt.tensors[0].shape, vec![META_FIELDS.len()]);
}

#[test]
fn tensors_agree_with_the_accounting_record() {
    for (k, r, diag) in [(1, 0, true), (2, 0, true), (2, 2, true), (3, 1, false), (1, 3, true)] {
        let enc = EncoderConfig::tiny().with_layers(6).with_sharing(k).with_rank(r).with_diag(diag);
        let ckpt = Checkpoint::from_model(&model(enc.clone()));
        let counts = count_params(&enc);
        let names: Vec<&str> = ckpt.weights().map(|t| t.name.as_str()).collect();
        assert_eq!(names.iter().collect::<HashSet<_>>().len(), names.len(), "duplicate names");

        let total = |pred: &dyn Fn(&str) -> bool| -> usize {
            ckpt.weights().filter(|t| pred(&t.name)).map(|t| t.data.len()).sum()
        };
        assert_eq!(total(&|n| n.starts_with("encoder.group")), counts.shared_total);
        let adapter = |n: &str| n.starts_with("encoder.layer") && [".a", ".b", ".diag"].iter().any(|s| n.ends_with(s));
        assert_eq!(total(&adapter), counts.residual_total);
        assert_eq!(total(&|n| n.contains("norm")), counts.norm_total);
        assert_eq!(names.iter().filter(|n| n.starts_with("encoder.group")).count(), counts.num_groups * 12);
        let model_params = model(enc).num_params();
        assert_eq!(ckpt.weights().map(|t| t.data.len()).sum::<usize>(), model_params);
        assert_eq!(ckpt.tensors.len(), names.len() + 1);
    }
}

fn arb_config() -> impl Strategy<Value = ModelConfig> {
    (1usize..6, 1usize..6, 0usize..4, any::<bool>(), any::<bool>(), 0u32..3, any::<u64>(), 2usize..9).prop_map(
        |(layers, k, rank, diag, unique, extra, seed, vocab)| {
            let mut enc = EncoderConfig::tiny()
                .with_layers(layers)
                .with_sharing(k.min(layers))
                .with_rank(rank)
                .with_diag(diag)
                .with_seed(seed);
            enc.unique_last_layer = unique;
            if extra == 1 {
                enc.activation = Activation::Gelu;
            }
            if extra == 2 {
                enc.mask = Some(ChunkMaskSpec::new(1 + (seed % 4) as usize, (seed % 3) as usize, 1).unwrap());
                enc.dropout = 0.25;
            }
            ModelConfig::new(enc, vocab)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn save_load_save_is_byte_identical(cfg in arb_config(), noise in any::<u64>()) {
        let mut m = Model::<f32>::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(noise);
        for t in m.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-3.0..3.0);
            }
        }
        let bytes = Checkpoint::from_model(&m).to_bytes();
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(ckpt.model_config().unwrap().structural_diff(&cfg), Vec::<String>::new());
        let back: Model<f32> = ckpt.to_model().unwrap();
        prop_assert_eq!(Checkpoint::from_model(&back).to_bytes(), bytes);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let _ = Checkpoint::from_bytes(&bytes);
        let mut with_header = b"RTCK\x01\x00\x00\x00".to_vec();
        with_header.extend_from_slice(&bytes);
        let _ = Checkpoint::from_bytes(&with_header);
    }
}
