use mvdg::geom::PointCloud;
use mvdg::io::{
    decode_pcb, decode_tensor, decode_xyz, encode_pcb, encode_tensor, encode_xyz, load_dataset, read_cloud, write_cloud, Checkpoint, CloudFormat, DatasetManifest,
    DomainRole, FormatError, ManifestEntry, Split,
};
use mvdg::model::{DgMvp, ModelConfig};
use mvdg::nn::{BackboneConfig, Depth};
use mvdg::ops::Mode;
use mvdg::rng::seeded;
use mvdg::tensor::Tensor;
use proptest::prelude::*;
use serde_json::json;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pcb_round_trip_is_bitwise(points in prop::collection::vec(prop::array::uniform3(-1e6f32..1e6), 0..200)) {
        // the payload is 32-bit, so f32-representable clouds survive exactly
        let c = PointCloud::new(points.iter().map(|p| p.map(f64::from)).collect());
        prop_assert_eq!(decode_pcb(&encode_pcb(&c)).unwrap(), c);
    }

    #[test]
    fn xyz_round_trip_within_print_precision(points in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..100)) {
        let c = PointCloud::new(points);
        let back = decode_xyz(&encode_xyz(&c)).unwrap();
        prop_assert_eq!(back.len(), c.len());
        for (a, b) in c.points.iter().zip(&back.points) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() <= 1e-8 * a[k].abs().max(1e-300));
            }
        }
    }

    #[test]
    fn tensor_round_trip(dims in prop::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
        let t = Tensor::from_fn(&dims, |i| (i as f32 * 0.37 + seed as f32).sin());
        prop_assert_eq!(decode_tensor(&encode_tensor(&t).unwrap()).unwrap(), t);
    }
}

#[test]
fn corrupt_inputs_are_rejected() {
    let c = PointCloud::new(vec![[1.0, 2.0, 3.0]; 4]);
    let bytes = encode_pcb(&c);
    assert!(matches!(decode_pcb(&bytes[..bytes.len() - 1]), Err(FormatError::TruncatedFile { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_pcb(&bad), Err(FormatError::BadMagic { .. })));
    assert!(matches!(decode_xyz("1 2 3\n4 5\n"), Err(FormatError::Parse { line: 2, .. })));
    let t = encode_tensor(&Tensor::<f32>::zeros(&[2, 3])).unwrap();
    assert!(matches!(decode_tensor(&t[..t.len() - 4]), Err(FormatError::TruncatedFile { .. })));
    assert!(matches!(encode_tensor(&Tensor::<f32>::scalar(1.0)), Err(FormatError::BadRank)));
}

#[test]
fn manifest_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("clouds")).unwrap();
    let a = PointCloud::new(vec![[0.125, 0.25, -0.375]; 5]);
    let b = PointCloud::new(vec![[0.5, 0.75, 0.3]; 7]);
    write_cloud(&dir.path().join("clouds/a.pcb"), &a, CloudFormat::Pcb).unwrap();
    write_cloud(&dir.path().join("clouds/b.xyz"), &b, CloudFormat::Xyz).unwrap();
    let m = DatasetManifest {
        name: "toy".into(),
        role: DomainRole::Source,
        classes: vec!["cube".into(), "ball".into()],
        entries: vec![
            ManifestEntry { path: "clouds/a.pcb".into(), class: "ball".into(), split: Split::Train },
            ManifestEntry { path: "clouds/b.xyz".into(), class: "cube".into(), split: Split::Test },
        ],
    };
    m.save(&dir.path().join("m.json")).unwrap();
    let all = load_dataset(&dir.path().join("m.json"), None).unwrap();
    assert_eq!(all.len(), 2);
    assert_eq!(all.samples[0].label.0, 1);
    assert_eq!(all.samples[0].cloud.points, a.points);
    let test = load_dataset(&dir.path().join("m.json"), Some(Split::Test)).unwrap();
    assert_eq!((test.len(), test.samples[0].label.0), (1, 0));
    assert_eq!(read_cloud(&dir.path().join("clouds/b.xyz"), CloudFormat::Xyz).unwrap(), b);

    let mut bad = m.clone();
    bad.entries[0].class = "cone".into();
    assert!(matches!(bad.save(&dir.path().join("bad.json")), Err(FormatError::Manifest(_))));
    std::fs::write(dir.path().join("bad.json"), serde_json::to_string(&bad).unwrap()).unwrap();
    assert!(matches!(load_dataset(&dir.path().join("bad.json"), None), Err(FormatError::Manifest(_))));
}

fn small_config() -> ModelConfig {
    ModelConfig { backbone: BackboneConfig { depth: Depth::D9, width: 4, in_channels: 1, resolution: 32 }, mmp_scales: vec![1, 2], strip_dim: 6, ..ModelConfig::desk(3) }
}

#[test]
fn checkpoint_restores_bitwise_identical_forward() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = DgMvp::<f32>::new(small_config(), &mut seeded(1)).unwrap();
    // move the running statistics away from their initial values
    let x = Tensor::from_fn(&[12, 1, 32, 32], |i| ((i * 31) % 17) as f32 / 17.0);
    model.logits(x.clone(), Mode::Train).unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::from_model(&model, json!({"epoch": 3})).save(&path).unwrap();

    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.meta["epoch"], 3);
    let mut fresh = DgMvp::<f32>::new(small_config(), &mut seeded(2)).unwrap();
    loaded.restore_into(&mut fresh).unwrap();
    let (a1, a2) = model.logits(x.clone(), Mode::Eval).unwrap();
    let (b1, b2) = fresh.logits(x, Mode::Eval).unwrap();
    assert_eq!(a1.data(), b1.data());
    assert_eq!(a2.data(), b2.data());
    assert_eq!(loaded.encode().unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn checkpoint_config_mismatch_names_the_field() {
    let model = DgMvp::<f32>::new(small_config(), &mut seeded(1)).unwrap();
    let ck = Checkpoint::from_model(&model, json!({}));
    let mut other_cfg = small_config();
    other_cfg.backbone.width = 8;
    let mut other = DgMvp::<f32>::new(other_cfg, &mut seeded(1)).unwrap();
    match ck.restore_into(&mut other) {
        Err(FormatError::ConfigMismatch { field, .. }) => assert_eq!(field, "backbone.width"),
        other => panic!("{other:?}"),
    }
}
