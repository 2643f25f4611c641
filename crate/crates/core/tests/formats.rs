use std::fs;

use otseg_core::data::{
    apply_domain_shift, generate_scene, read_dataset, write_dataset, DomainShift, SceneSpec, ShiftSpec, MANIFEST,
};
use otseg_core::nn::{SegNet, SegNetConfig};
use otseg_core::Error;
use proptest::prelude::*;

fn shift() -> ShiftSpec {
    ShiftSpec {
        shift: DomainShift {
            channel_gain: [0.6, 0.9, 1.3],
            channel_bias: [0.1, 0.0, -0.1],
            noise_sigma: 0.05,
            texture_freq: 2.0,
        },
        seed: 5,
    }
}

#[test]
fn dataset_round_trip_reproduces_quantized_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec { seed: 3, ..Default::default() };
    write_dataset(dir.path(), &spec, 10, None, true).unwrap();
    let data = read_dataset(dir.path()).unwrap();
    assert_eq!(data.len(), 10);
    for i in 0..10 {
        let scene = generate_scene(&spec, i as u64).unwrap();
        assert_eq!(data.images[i], scene.image.quantized());
        assert_eq!(data.labels.as_ref().unwrap()[i], scene.labels);
    }
}

#[test]
fn target_manifest_is_unlabeled_and_shares_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec { seed: 3, ..Default::default() };
    write_dataset(&dir.path().join("t"), &spec, 5, Some(&shift()), false).unwrap();
    write_dataset(&dir.path().join("e"), &spec, 5, Some(&shift()), true).unwrap();
    write_dataset(&dir.path().join("s"), &spec, 5, None, true).unwrap();
    let manifest = fs::read_to_string(dir.path().join("t").join(MANIFEST)).unwrap();
    assert!(manifest.lines().skip(1).all(|l| l.ends_with(",none")));
    let t = read_dataset(&dir.path().join("t")).unwrap();
    assert!(t.labels.is_none());
    let e = read_dataset(&dir.path().join("e")).unwrap();
    let s = read_dataset(&dir.path().join("s")).unwrap();
    assert_eq!(e.labels, s.labels);
    assert_eq!(t.images, e.images);
    let shifted = apply_domain_shift(&generate_scene(&spec, 2).unwrap().image, &shift().shift, 5, 2).unwrap();
    assert_eq!(t.images[2], shifted.quantized());
}

#[test]
fn corrupt_files_are_rejected_with_their_path() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &SceneSpec::default(), 2, None, true).unwrap();
    let bad = dir.path().join("images/0001.ppm");
    let mut bytes = fs::read(&bad).unwrap();
    bytes[1] = b'3';
    fs::write(&bad, bytes).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Data { .. }));
    assert!(err.to_string().contains("0001.ppm"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &SceneSpec::default(), 2, None, true).unwrap();
    let label = dir.path().join("labels/0000.pgm");
    let mut bytes = fs::read(&label).unwrap();
    *bytes.last_mut().unwrap() = 9;
    fs::write(&label, bytes).unwrap();
    assert!(read_dataset(dir.path()).unwrap_err().to_string().contains("0000.pgm"));

    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &SceneSpec::default(), 2, None, true).unwrap();
    let m = dir.path().join(MANIFEST);
    let text = fs::read_to_string(&m).unwrap().replace("count=2", "count=3");
    fs::write(&m, text).unwrap();
    assert!(read_dataset(dir.path()).is_err());
}

#[test]
fn checkpoint_rejects_damage() {
    let net = SegNet::new(SegNetConfig::default(), 1).unwrap();
    let bytes = net.to_bytes(5);
    assert!(SegNet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(SegNet::from_bytes(&bad).is_err());
    let (back, it) = SegNet::from_bytes(&bytes).unwrap();
    assert_eq!(it, 5);
    assert_eq!(back.params(), net.params());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_checkpoints_round_trip(w in (1usize..6, 1usize..6, 1usize..6), classes in 2usize..6, seed: u64, it: u32) {
        let cfg = SegNetConfig { in_channels: 3, num_classes: classes, widths: [w.0, w.1, w.2] };
        let net = SegNet::new(cfg, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        net.save(&path, it).unwrap();
        let (back, it2) = SegNet::load(&path).unwrap();
        prop_assert_eq!(it2, it);
        prop_assert_eq!(back.config(), net.config());
        let same = back.params().iter().zip(net.params()).all(|(a, b)| {
            a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        prop_assert!(same);
    }

    #[test]
    fn random_datasets_round_trip(side in 2usize..5, classes in 2usize..6, seed: u64, count in 1usize..4, shifted: bool) {
        let spec = SceneSpec { side: side * 4, num_classes: classes, shapes_min: 0, shapes_max: 4, seed };
        let dir = tempfile::tempdir().unwrap();
        let sh = shifted.then(shift);
        let written = write_dataset(dir.path(), &spec, count, sh.as_ref(), true).unwrap();
        let data = read_dataset(dir.path()).unwrap();
        prop_assert_eq!(&data.manifest, &written);
        for i in 0..count {
            let scene = generate_scene(&spec, i as u64).unwrap();
            let img = match &sh {
                Some(s) => apply_domain_shift(&scene.image, &s.shift, s.seed, i as u64).unwrap(),
                None => scene.image,
            };
            prop_assert_eq!(&data.images[i], &img.quantized());
            prop_assert_eq!(&data.labels.as_ref().unwrap()[i], &scene.labels);
        }
    }
}
