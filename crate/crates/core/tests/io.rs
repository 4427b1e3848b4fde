use cvreg_core::io::{load_any, read_nifti, read_volume, save_any, write_nifti, write_volume};
use cvreg_core::{Error, Volume, VolumeKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_volume(kind: VolumeKind, channels: usize, rng: &mut ChaCha8Rng) -> Volume {
    let dims = [5, 3, 4];
    let n = channels * 60;
    let data = (0..n)
        .map(|_| match kind {
            VolumeKind::LabelMap => rng.gen_range(0..9) as f64,
            _ => rng.gen_range(-100.0f32..100.0) as f64,
        })
        .collect();
    Volume::new(dims, [0.5, 1.25, 3.0], channels, kind, data).unwrap()
}

#[test]
fn container_files_round_trip_every_kind() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (kind, channels) in [
        (VolumeKind::ScalarImage, 1),
        (VolumeKind::LabelMap, 1),
        (VolumeKind::FeatureMap, 6),
        (VolumeKind::VectorField, 3),
    ] {
        let vol = random_volume(kind, channels, &mut rng);
        let path = dir.path().join(format!("{}.cvr", kind.name()));
        write_volume(&path, &vol).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 40 + 4 * 60 * channels);
        let back = read_volume(&path).unwrap();
        assert_eq!(back, vol);
        write_volume(&path, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }
}

#[test]
fn nifti_files_round_trip_values() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let vol = random_volume(VolumeKind::ScalarImage, 1, &mut rng);
    let path = dir.path().join("img.nii");
    write_nifti(&path, &vol).unwrap();
    let back = read_nifti(&path).unwrap().volume;
    assert_eq!(back.data(), vol.data());
    assert_eq!(back.spacing(), vol.spacing());
    assert_eq!(load_any(&path).unwrap(), back);
}

#[test]
fn extension_selects_format() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vol = random_volume(VolumeKind::ScalarImage, 1, &mut rng);
    let nii = dir.path().join("a.nii");
    let cvr = dir.path().join("a.cvr");
    save_any(&nii, &vol).unwrap();
    save_any(&cvr, &vol).unwrap();
    assert_eq!(&std::fs::read(&nii).unwrap()[344..348], b"n+1\0");
    assert_eq!(&std::fs::read(&cvr).unwrap()[0..4], b"CVR1");
}

#[test]
fn file_errors_are_classified() {
    let dir = tempfile::tempdir().unwrap();
    let missing = read_volume(dir.path().join("missing.cvr")).unwrap_err();
    assert!(matches!(missing, Error::Io { .. }) && missing.is_io());

    let path = dir.path().join("short.cvr");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    write_volume(&path, &random_volume(VolumeKind::ScalarImage, 1, &mut rng)).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    match read_volume(&path).unwrap_err() {
        Error::Format(e) => {
            assert_eq!(e.code(), "size-mismatch");
            assert!(e.to_string().contains("expected 240 bytes, found 236 bytes"), "{e}");
        }
        e => panic!("unexpected {e}"),
    }

    let gz = dir.path().join("img.nii");
    std::fs::write(&gz, [0x1f, 0x8b, 0, 0].repeat(100)).unwrap();
    match read_nifti(&gz).unwrap_err() {
        Error::Format(e) => assert_eq!(e.code(), "unsupported-nifti"),
        e => panic!("unexpected {e}"),
    }
}
