use depthfusion::format::*;
use depthfusion::output::{tree_digest, OutputDir};
use depthfusion_core::geometry::PointCloud;
use depthfusion_core::model::{Model, ModelConfig};
use depthfusion_core::scene::{generate_corpus, CorpusSpec};
use depthfusion_core::Tensor;
use proptest::prelude::*;

proptest! {
    #[test]
    fn tensors_round_trip_bit_exactly(shape in prop::collection::vec(0usize..5, 0..4), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.rotate_left(i as u32) >> 2)).collect();
        let t = Tensor::new(&shape, data).unwrap();
        let bytes = tensor_bytes(&t);
        prop_assert_eq!(bytes.len(), 4 + 4 * shape.len() + 8 * n);
        let back = read_tensor(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn points_round_trip_at_f32_precision(raw in prop::collection::vec((prop::array::uniform3(-100.0f32..100.0), 0.0f32..=1.0), 0..20)) {
        let pts: Vec<[f64; 4]> = raw.iter().map(|(p, i)| [p[0], p[1], p[2], *i].map(f64::from)).collect();
        let pc = PointCloud::new(pts.clone()).unwrap();
        let bytes = points_bytes(&pc);
        prop_assert_eq!(bytes.len(), 16 * pts.len());
        let back = parse_points(&bytes).unwrap();
        prop_assert_eq!(back.points(), pts.as_slice());
    }
}

#[test]
fn tensor_layout_is_little_endian_with_a_shape_header() {
    let t = Tensor::new(&[1, 2], vec![1.0, -2.5]).unwrap();
    let mut want = Vec::new();
    for u in [2u32, 1, 2] {
        want.extend_from_slice(&u.to_le_bytes());
    }
    want.extend_from_slice(&1.0f64.to_le_bytes());
    want.extend_from_slice(&(-2.5f64).to_le_bytes());
    assert_eq!(tensor_bytes(&t), want);
}

#[test]
fn malformed_buffers_are_format_errors() {
    let bytes = tensor_bytes(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    assert_eq!(read_tensor(&mut &bytes[..bytes.len() - 1]).unwrap_err().kind(), "format");
    assert_eq!(read_tensor(&mut &bytes[..2]).unwrap_err().kind(), "format");
    assert_eq!(read_tensor(&mut &[99u8, 0, 0, 0][..]).unwrap_err().kind(), "format");
    assert_eq!(parse_points(&[0u8; 17]).unwrap_err().kind(), "format");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.bin");
    let mut padded = bytes.clone();
    padded.push(0);
    std::fs::write(&path, padded).unwrap();
    assert_eq!(load_tensor(&path).unwrap_err().kind(), "format");
    std::fs::write(&path, &bytes).unwrap();
    assert_eq!(load_tensor(&path).unwrap().data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn scenes_round_trip_through_a_directory() {
    let spec = CorpusSpec { image_rows: 4, image_cols: 8, ..CorpusSpec::default() };
    let scene = generate_corpus(&spec, 3..4).unwrap().remove(0);
    let dir = tempfile::tempdir().unwrap();
    let out = OutputDir::create(dir.path()).unwrap();
    save_scene(&out, "s", &scene).unwrap();
    let back = load_scene(&dir.path().join("s")).unwrap();
    assert_eq!(back.images, scene.images);
    assert_eq!(back.boxes, scene.boxes);
    assert_eq!(back.cameras, scene.cameras);
    let rounded: Vec<[f64; 4]> = scene.points.points().iter().map(|p| p.map(|v| v as f32 as f64)).collect();
    assert_eq!(back.points.points(), rounded.as_slice());
}

#[test]
fn checkpoints_restore_every_parameter() {
    let cfg = ModelConfig { channels: 8, voxel_channels: 4, heads: 2, proposals: 2, ..ModelConfig::desk() };
    let trained = Model::new(cfg.clone(), 1).unwrap();
    let mut fresh = Model::new(cfg, 2).unwrap();
    assert_ne!(trained.store, fresh.store);
    let dir = tempfile::tempdir().unwrap();
    let out = OutputDir::create(dir.path()).unwrap();
    save_checkpoint(&out, "ck/model", &trained.store, "multiply").unwrap();
    let stem = dir.path().join("ck/model");
    load_checkpoint(&stem, &mut fresh.store, "multiply").unwrap();
    assert_eq!(trained.store, fresh.store);
    assert_eq!(load_checkpoint(&stem, &mut fresh.store, "sum").unwrap_err().kind(), "config");

    let small = ModelConfig { channels: 4, voxel_channels: 4, heads: 2, proposals: 2, ..ModelConfig::desk() };
    let mut other = Model::new(small, 1).unwrap();
    assert!(load_checkpoint(&stem, &mut other.store, "multiply").is_err());
}

#[test]
fn writes_leave_no_temporary_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = OutputDir::create(dir.path().join("o")).unwrap();
    out.write("a/b.txt", b"one").unwrap();
    out.write("a/b.txt", b"two").unwrap();
    out.write_json("c.json", &[1, 2]).unwrap();
    let files: Vec<String> = tree_digest(out.root()).unwrap().into_iter().map(|(p, _)| p).collect();
    assert_eq!(files, vec!["a/b.txt", "c.json"]);
    assert_eq!(std::fs::read(out.path("a/b.txt")).unwrap(), b"two");
    assert_eq!(std::fs::read_to_string(out.path("c.json")).unwrap(), "[\n  1,\n  2\n]\n");
}
