use phaseda::autodiff::Tensor;
use phaseda::image::Image;
use phaseda::io::{
    decode_pgm, decode_ppm, decode_tensor, encode_pgm, encode_ppm, encode_tensor, quantize, read_checkpoint, write_checkpoint,
    Checkpoint, FileTensor, TensorFileError,
};
use phaseda::mask::SegMask;
use phaseda::synthdata::{
    gen_dataset, gen_scene, write_dataset, DatasetReader, SceneConfig, ShiftConfig, Split, SynthError, MANIFEST,
};
use proptest::prelude::*;

fn f32_tensor() -> impl Strategy<Value = Tensor<f32>> {
    prop::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), n)
            .prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
    })
}

proptest! {
    #[test]
    fn tensor_file_round_trip_is_bit_exact(t in f32_tensor()) {
        let bytes = encode_tensor(&FileTensor::F32(t.clone()));
        let FileTensor::F32(back) = decode_tensor(&bytes).unwrap() else { panic!("dtype changed") };
        prop_assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn any_truncation_is_rejected(t in f32_tensor(), cut in 1usize..8) {
        let bytes = encode_tensor(&FileTensor::F32(t));
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode_tensor(&bytes[..keep]).is_err());
    }

    #[test]
    fn ppm_round_trip_of_quantized_images(levels in prop::collection::vec(any::<u8>(), 3 * 5 * 4)) {
        let img = Image::new(3, 5, 4, levels.iter().map(|&l| l as f32 / 255.0).collect()).unwrap();
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        for (a, &l) in back.data().iter().zip(&levels) {
            prop_assert_eq!(quantize(*a), l);
            prop_assert_eq!(*a, l as f32 / 255.0);
        }
    }

    #[test]
    fn pgm_round_trip(values in prop::collection::vec(any::<u8>(), 12)) {
        let m = SegMask::new(3, 4, values).unwrap();
        prop_assert_eq!(decode_pgm(&encode_pgm(&m)).unwrap(), m);
    }
}

#[test]
fn quantization_rounds_half_up() {
    assert_eq!(quantize(0.5 / 255.0), 1);
    assert_eq!(quantize(0.49 / 255.0), 0);
    assert_eq!(quantize(-1.0), 0);
    assert_eq!(quantize(2.0), 255);
}

#[test]
fn declared_two_by_two_with_fifteen_payload_bytes_is_rejected() {
    let mut bytes = b"TNSR".to_vec();
    bytes.extend([1u8, 1, 2]);
    bytes.extend(2u32.to_le_bytes());
    bytes.extend(2u32.to_le_bytes());
    bytes.extend([0u8; 15]);
    assert!(matches!(decode_tensor(&bytes), Err(TensorFileError::Truncated { .. })));
    bytes.push(0);
    assert!(decode_tensor(&bytes).is_ok());
}

#[test]
fn u8_and_f64_payloads_round_trip() {
    let u = FileTensor::U8 { shape: vec![2, 3], data: vec![0, 1, 2, 253, 254, 255] };
    assert_eq!(decode_tensor(&encode_tensor(&u)).unwrap(), u);
    let d = FileTensor::F64(Tensor::from_fn(&[3], |i| i as f64 * std::f64::consts::PI));
    assert_eq!(decode_tensor(&encode_tensor(&d)).unwrap(), d);
}

#[test]
fn checkpoint_keeps_names_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let mut tensors = std::collections::BTreeMap::new();
    tensors.insert("a.w".to_string(), Tensor::from_fn(&[2, 2], |i| i as f32));
    tensors.insert("b".to_string(), Tensor::from_fn(&[3], |i| -(i as f32)));
    let ckpt = Checkpoint { tensors, metadata: serde_json::json!({ "seed": 4, "cfg": { "x": 1 } }) };
    let path = dir.path().join("m.tnsr");
    write_checkpoint(&path, &ckpt).unwrap();
    assert_eq!(read_checkpoint(&path).unwrap(), ckpt);
    let err = read_checkpoint(&dir.path().join("missing.tnsr")).unwrap_err().to_string();
    assert!(err.contains("missing.tnsr"), "{err}");
}

fn small() -> SceneConfig {
    SceneConfig { classes: 4, height: 32, width: 32, ..SceneConfig::default() }
}

#[test]
fn scenes_are_deterministic_and_valid() {
    let cfg = small();
    let a = gen_scene(99, &cfg).unwrap();
    let b = gen_scene(99, &cfg).unwrap();
    assert_eq!(a.source, b.source);
    assert_eq!(a.target, b.target);
    assert_eq!(a.mask, b.mask);
    a.mask.validate(cfg.classes).unwrap();
    for img in [&a.source, &a.target] {
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_ne!(a.source, a.target);
    assert_ne!(gen_scene(100, &cfg).unwrap().mask, a.mask);
}

#[test]
fn identity_shift_leaves_source_nearly_unchanged() {
    let cfg = SceneConfig { shift: ShiftConfig { noise_sigma: 0.0, ..ShiftConfig::identity() }, ..small() };
    let s = gen_scene(5, &cfg).unwrap();
    let diff = s.source.data().iter().zip(s.target.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(diff < 1e-5, "{diff}");
}

#[test]
fn dataset_splits_and_mask_firewall() {
    let ds = gen_dataset(20, 3, &small()).unwrap();
    assert_eq!((ds.train_src.len(), ds.train_tgt.len(), ds.eval_tgt.len()), (14, 3, 3));
    let view = ds.training_view();
    assert_eq!(view.source_len(), 14);
    assert!(matches!(view.target_mask(0), Err(SynthError::MaskRefused { .. })));

    let dir = tempfile::tempdir().unwrap();
    let written = write_dataset(&ds, dir.path()).unwrap();
    assert_eq!(written.last().unwrap(), &dir.path().join(MANIFEST));
    assert!(written.iter().all(|p| p.is_file()));
    // every file in the directory is named in the manifest
    let mut on_disk = 0;
    for split in Split::ALL {
        on_disk += std::fs::read_dir(dir.path().join(split.name())).unwrap().count();
    }
    assert_eq!(on_disk + 1, written.len());

    let reader = DatasetReader::open(dir.path()).unwrap();
    assert_eq!(reader.len(Split::EvalTgt), 3);
    assert!(reader.training_mask(Split::TrainSrc, 0).is_ok());
    assert!(matches!(reader.training_mask(Split::TrainTgt, 0), Err(SynthError::MaskRefused { .. })));
    assert!(matches!(reader.training_mask(Split::EvalTgt, 0), Err(SynthError::MaskRefused { .. })));
    assert_eq!(reader.evaluation_mask(Split::EvalTgt, 1).unwrap(), ds.eval_tgt[1].mask);
    let back = reader.load(ds.config.clone(), ds.seed).unwrap();
    assert_eq!(back.train_src[2].source, ds.train_src[2].source);
    assert_eq!(back.eval_tgt[0].target, ds.eval_tgt[0].target);
}

#[test]
fn every_class_appears_across_a_dataset() {
    let ds = gen_dataset(20, 11, &small()).unwrap();
    let mut seen = [false; 4];
    for s in &ds.train_src {
        for &v in s.mask.values() {
            seen[v as usize] = true;
        }
    }
    assert!(seen.iter().all(|&b| b), "{seen:?}");
}
