use cvreg_core::features::EmbeddingSource;
use cvreg_core::metrics::{endpoint_error, foreground_labels, mean_dice};
use cvreg_core::synth::make_phantom;
use cvreg_core::{register, DisplacementField, Error, FeatureProviderConfig, PyramidConfig, Volume, VolumeKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn self_registration_is_near_identity() {
    let (img, labels) = make_phantom([48, 48, 48], 5).unwrap();
    let r = register(&img, &img, &PyramidConfig::default()).unwrap();
    assert_eq!(r.field.dims(), img.dims());
    assert!(r.field.max_abs() < 0.5, "{}", r.field.max_abs());
    for level in &r.report.levels {
        assert!(level.max_increment < 0.5, "level {}: {}", level.level, level.max_increment);
    }
    let warped = r.field.warp(&labels).unwrap();
    assert_eq!(mean_dice(&warped, &labels, &foreground_labels(&labels)).unwrap(), 1.0);
}

/// Body voxels at least `margin` from the border.
pub fn body_mask(img: &Volume, margin: usize) -> Vec<bool> {
    let d = img.dims();
    (0..img.num_voxels())
        .map(|v| {
            let p = img.voxel_coords(v);
            img.data()[v] > 50.0 && (0..3).all(|a| p[a] >= margin && p[a] + margin < d[a])
        })
        .collect()
}

#[test]
fn pyramid_reaches_beyond_single_level_capture() {
    let dims = [96, 96, 96];
    let (fixed, _) = make_phantom(dims, 2).unwrap();
    let truth = DisplacementField::constant(dims, [1.0; 3], [10.0, 0.0, 0.0]);
    let moving = DisplacementField::constant(dims, [1.0; 3], [-10.0, 0.0, 0.0]).warp(&fixed).unwrap();
    let mask = body_mask(&fixed, 12);
    let cfg = PyramidConfig {
        run_instance_opt: false,
        ..PyramidConfig::default()
    };
    let pym3 = register(&fixed, &moving, &cfg).unwrap();
    let e3 = endpoint_error(&pym3.field, &truth, Some(&mask)).unwrap().mean;
    assert!(e3 < 1.0, "Pym3 error {e3}");
    let pym1 = register(&fixed, &moving, &PyramidConfig { run_instance_opt: false, ..PyramidConfig::with_radii(&[3]) }).unwrap();
    let e1 = endpoint_error(&pym1.field, &truth, Some(&mask)).unwrap().mean;
    assert!(e1 > 3.0, "Pym1 error {e1}");
}

#[test]
fn registration_is_deterministic() {
    let (img, _) = make_phantom([32, 32, 32], 9).unwrap();
    let u = cvreg_core::synth::make_smooth_field([32, 32, 32], 3.0, 4.0, 9).unwrap();
    let moving = u.warp(&img).unwrap();
    let cfg = PyramidConfig {
        levels: 2,
        radii: vec![2, 2],
        ..PyramidConfig::default()
    };
    let a = register(&img, &moving, &cfg).unwrap();
    let b = register(&img, &moving, &cfg).unwrap();
    assert_eq!(a.field, b.field);
    assert_eq!(a.report.levels.len(), 2);
    assert_eq!(a.report.instance_opt.as_ref().unwrap().loss_trace, b.report.instance_opt.unwrap().loss_trace);
}

fn random_embedding(dims: [usize; 3], channels: usize, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = channels * dims.iter().product::<usize>();
    Volume::new(dims, [2.0; 3], channels, VolumeKind::FeatureMap, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn embedded_provider_self_registration_and_grid_check() {
    let dir = tempfile::tempdir().unwrap();
    let local = dir.path().join("local.cvr");
    let global = dir.path().join("global.cvr");
    cvreg_core::io::write_volume(&local, &random_embedding([16, 16, 16], 8, 1)).unwrap();
    cvreg_core::io::write_volume(&global, &random_embedding([8, 8, 8], 4, 2)).unwrap();
    let source = EmbeddingSource {
        local: local.clone(),
        global: Some(global),
    };
    let cfg = PyramidConfig {
        levels: 2,
        radii: vec![2, 2],
        provider: FeatureProviderConfig::Embedded {
            fixed: source.clone(),
            moving: source,
        },
        ..PyramidConfig::default()
    };
    let img = Volume::zeros([32, 32, 32], [1.0; 3], 1, VolumeKind::ScalarImage).unwrap();
    let r = register(&img, &img, &cfg).unwrap();
    assert!(r.field.max_abs() < 0.5);
    let trace = &r.report.instance_opt.unwrap().loss_trace;
    assert!((trace[0] + 2.0).abs() < 1e-9, "{}", trace[0]);

    let small = Volume::zeros([24, 24, 24], [1.0; 3], 1, VolumeKind::ScalarImage).unwrap();
    assert!(matches!(register(&small, &small, &cfg), Err(Error::DimensionMismatch { .. })));
}
