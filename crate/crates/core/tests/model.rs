use freqmamba::block::Ablation;
use freqmamba::error::Error;
use freqmamba::model::{Checkpoint, Model, ModelConfig, CHECKPOINT_MAGIC};
use freqmamba::{Shape, Tensor};

fn trained_like(seed: u64) -> Model {
    // perturb every parameter so the zero-initialized output layer is live
    let mut m = Model::build(ModelConfig::default(), seed).unwrap();
    for (i, t) in m.store.tensors_mut().iter_mut().enumerate() {
        let noise = Tensor::randn(t.shape(), 0.05, 1000 + i as u64);
        t.add_assign(&noise).unwrap();
    }
    m
}

#[test]
fn save_load_forward_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.fmck");
    let m = trained_like(1);
    m.save(&path, 17).unwrap();
    let back = Model::load(&path, Some(&m.config)).unwrap();
    assert_eq!(back.config, m.config);
    let x = Tensor::uniform(Shape::new(1, 3, 32, 32), 0.0, 1.0, 2);
    let (a, b) = (m.infer(&x).unwrap(), back.infer(&x).unwrap());
    assert!(a.max_abs_diff(&b) < 1e-6, "{}", a.max_abs_diff(&b));

    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.iteration, 17);
    assert_eq!(ck.tensors.len(), m.store.len());
    for ((name, t), (_, stored_name, orig)) in ck.tensors.iter().zip(m.store.iter()) {
        assert_eq!(name, stored_name);
        assert_eq!(t, &orig.to_f32_precision());
    }
}

#[test]
fn file_layout_starts_with_magic_version_and_config() {
    let m = Model::build(ModelConfig::default(), 3).unwrap();
    let mut buf = Vec::new();
    m.to_checkpoint(5).write(&mut buf).unwrap();
    assert_eq!(&buf[..4], CHECKPOINT_MAGIC);
    assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
    let len = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let text = std::str::from_utf8(&buf[12..12 + len]).unwrap();
    assert_eq!(ModelConfig::from_text(text).unwrap(), m.config);
}

#[test]
fn corrupted_checkpoints_give_distinct_errors() {
    let m = Model::build(ModelConfig::default(), 4).unwrap();
    let mut buf = Vec::new();
    m.to_checkpoint(0).write(&mut buf).unwrap();

    let mut bad = buf.clone();
    bad[1] = b'?';
    assert!(matches!(Checkpoint::read(&bad[..]), Err(Error::MagicMismatch { .. })));

    let mut bad = buf.clone();
    bad[4..8].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(
        Checkpoint::read(&bad[..]),
        Err(Error::VersionMismatch { expected: 1, found: 7 })
    ));

    for cut in [2, 10, buf.len() / 2, buf.len() - 1] {
        let r = Checkpoint::read(&buf[..cut]);
        assert!(matches!(r, Err(Error::Truncated(_))), "cut at {cut}: {r:?}");
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fmck");
    m.save(&path, 0).unwrap();
    let other = ModelConfig {
        state_dim: 4,
        ..ModelConfig::default()
    };
    assert!(matches!(Model::load(&path, Some(&other)), Err(Error::ConfigMismatch(_))));
}

#[test]
fn forward_preserves_shape_and_is_deterministic() {
    let m = trained_like(5);
    for size in [64, 96] {
        let x = Tensor::uniform(Shape::new(1, 3, size, size), 0.0, 1.0, 6);
        let y = m.infer(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.is_finite());
    }
    let x = Tensor::uniform(Shape::new(2, 3, 32, 48), 0.0, 1.0, 7);
    let again = trained_like(5);
    assert_eq!(m.infer(&x).unwrap(), again.infer(&x).unwrap());
    let err = m.infer(&Tensor::zeros(Shape::new(1, 3, 40, 32))).unwrap_err();
    assert!(err.to_string().contains("16"), "{err}");
}

#[test]
fn table_two_rows_build_and_run() {
    let rows = [
        Ablation { use_fourier: false, ..Ablation::default() },
        Ablation { use_band: false, ..Ablation::default() },
        Ablation { use_spatial_mamba: false, ..Ablation::default() },
        Ablation { use_attention_map: false, ..Ablation::default() },
    ];
    let full = Model::build(ModelConfig::default(), 0).unwrap().parameter_count();
    let x = Tensor::uniform(Shape::new(1, 3, 32, 32), 0.0, 1.0, 8);
    for ablation in rows {
        let cfg = ModelConfig {
            ablation,
            ..ModelConfig::default()
        };
        let m = Model::build(cfg, 0).unwrap();
        assert_ne!(m.parameter_count(), full, "{ablation:?}");
        // zero-initialized output layer: every row starts as the identity
        assert_eq!(m.infer(&x).unwrap(), x);
    }
}
