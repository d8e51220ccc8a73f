use apvt::blocks::ReductionSharing;
use apvt::data_io::encode_checkpoint;
use apvt::model::{Model, ModelConfig, STRIDES};
use apvt::verify::parameter_audit;
use apvt::Error;
use apvt_demo::{audit, Scene};

#[test]
fn audit_matches_built_models() {
    let report = audit([1, 2, 3, 1], 3, 16, 4).unwrap();
    let built = parameter_audit(ReductionSharing::PerBlock).unwrap();
    for (row, b) in report.variants.iter().zip(&built) {
        assert_eq!(row.name, b.name);
        assert_eq!(row.total, b.total());
        assert!((row.deviation_percent - 100.0 * b.deviation()).abs() < 1e-9);
    }
    let custom = ModelConfig::custom([1, 2, 3, 1], 3, 16, 4, (32, 32)).unwrap();
    let model = Model::<f32>::build(&custom, 0).unwrap();
    assert_eq!(report.custom.total, model.store.num_scalars());
    assert_eq!(report.custom.stages.iter().map(|s| s.total).sum::<usize>() + report.custom.head, report.custom.total);
    assert!((report.width_ratio - 1.438).abs() < 1e-3);
    assert!(audit([1, 1, 1, 1], 0, 16, 4).is_err());
}

#[test]
fn heatmaps_are_distributions_over_the_reduced_grid() {
    let scene = Scene::new("apvt-8-2x-a", 128, 3, 0).unwrap();
    assert_eq!(scene.label, 3);
    assert_eq!(scene.rgba.len(), 32 * 32 * 4);
    for (stage, r) in [8, 4, 2, 1].into_iter().enumerate() {
        let side = 128 / STRIDES[stage];
        let h = scene.attention(stage, 1, 1, 0, (side - 1, 0)).unwrap();
        assert_eq!(h.grid, (side, side));
        assert_eq!(h.reduction, r);
        assert_eq!(h.kv_grid, (side / r, side / r));
        assert_eq!(h.weights.len(), side * side / (r * r));
        assert!(h.weights.iter().all(|&w| w > 0.0));
        assert!((h.weights.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
    let wide = Scene::new("apvt-8-2x-a", 224, 3, 0).unwrap();
    assert_eq!(wide.attention(0, 0, 0, 0, (0, 0)).unwrap().kv_grid, (7, 7));
}

#[test]
fn attention_arguments_are_checked() {
    let scene = Scene::new("apvt-8-2x-a", 64, 0, 1).unwrap();
    assert!(matches!(scene.attention(4, 0, 0, 0, (0, 0)), Err(Error::Config(_))));
    assert!(matches!(scene.attention(0, 2, 0, 0, (0, 0)), Err(Error::Config(_))));
    assert!(matches!(scene.attention(0, 0, 2, 0, (0, 0)), Err(Error::Config(_))));
    assert!(matches!(scene.attention(0, 0, 0, 1, (0, 0)), Err(Error::Config(_))));
    assert!(matches!(scene.attention(0, 0, 0, 0, (16, 0)), Err(Error::Config(_))));
    assert!(Scene::new("apvt-8-2x-a", 48, 0, 1).is_err());
    assert!(matches!(Scene::new("apvt-1", 64, 0, 1), Err(Error::UnknownVariant(_))));
}

#[test]
fn energy_maps_follow_the_pyramid() {
    let scene = Scene::new("apvt-8-4x-a", 128, 5, 2).unwrap();
    let maps = scene.energy().unwrap();
    assert_eq!(maps.len(), 4);
    for (m, (stride, c)) in maps.iter().zip(STRIDES.iter().zip([32, 64, 160, 256])) {
        assert_eq!(m.grid, (128 / stride, 128 / stride));
        assert_eq!(m.channels, c);
        assert_eq!(m.values.len(), m.grid.0 * m.grid.1);
        assert!(m.values.iter().all(|v| v.is_finite() && *v >= m.min && *v <= m.max));
        assert!(m.max > m.min);
    }
}

#[test]
fn checkpoint_replaces_weights_atomically() {
    let mut scene = Scene::new("apvt-8-2x-a", 64, 2, 0).unwrap();
    let other = Scene::new("apvt-8-2x-a", 64, 2, 9).unwrap();
    let before = scene.attention(1, 0, 0, 1, (3, 3)).unwrap();
    let bytes = encode_checkpoint(&other.model.store);
    let mut bad = bytes.clone();
    bad[0] ^= 1;
    assert!(matches!(scene.load_checkpoint(&bad), Err(Error::BadMagic { .. })));
    assert_eq!(scene.attention(1, 0, 0, 1, (3, 3)).unwrap(), before);
    let small = encode_checkpoint(&Model::<f32>::build(&ModelConfig::variant("apvt-8-2x-b").unwrap(), 0).unwrap().store);
    assert!(scene.load_checkpoint(&small).is_err());
    assert_eq!(scene.attention(1, 0, 0, 1, (3, 3)).unwrap(), before);
    scene.load_checkpoint(&bytes).unwrap();
    assert_ne!(scene.attention(1, 0, 0, 1, (3, 3)).unwrap(), before);
    assert_eq!(encode_checkpoint(&scene.model.store), bytes);
}
