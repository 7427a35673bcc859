use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stereoforge::data::*;
use stereoforge::dibr::{gather_render, DisparityMap};
use stereoforge::kv::KvConfig;
use stereoforge::{Error, Image, Plane};

fn spec(text: &str) -> SceneSpec {
    SceneSpec::from_kv(&KvConfig::parse(text).unwrap()).unwrap()
}

#[test]
fn synth_dir_round_trip() {
    let s = spec("dims = 32x16\nseed = 3\nrange = -4..6\nlayers = noise:-2:full, stripes:5:random\n");
    let pairs = synth_dataset(&s, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_stereo_dir(dir.path(), &pairs).unwrap();
    let back = load_stereo_dir(dir.path()).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in pairs.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.dims(), b.dims());
        // 8-bit storage
        let max = a.left.data().iter().zip(b.left.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max);
        assert!(max <= 0.5 / 255.0 + 1e-6);
        assert_eq!(a.gt_disparity.as_ref().unwrap().data(), b.gt_disparity.as_ref().unwrap().data());
    }
}

#[test]
fn ground_truth_disparity_reconstructs_right_view() {
    let s = spec("dims = 48x16\nseed = 11\nrange = -4..6\nlayers = noise/2:-2:full, stripes/4:5:random/0.3/0.6\n");
    let scene = render_scene(&s).unwrap();
    let p = &scene.pair;
    let rendered = gather_render(&p.left, p.gt_disparity.as_ref().unwrap()).unwrap();
    let (w, h) = p.dims();
    for y in 0..h {
        for x in 0..w {
            if scene.holes.get(y, x) {
                continue;
            }
            for c in 0..3 {
                assert_eq!(rendered.get(c, y, x), p.right.get(c, y, x), "({y}, {x})");
            }
        }
    }
}

#[test]
fn unmatched_and_empty_directories() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("left")).unwrap();
    fs::create_dir_all(dir.path().join("right")).unwrap();
    assert!(matches!(load_stereo_dir(dir.path()), Err(Error::EmptyDataset(_))));
    Image::filled(4, 2, [0.5; 3]).save(&dir.path().join("left").join("a.png")).unwrap();
    match load_stereo_dir(dir.path()) {
        Err(Error::UnmatchedFile(name)) => assert_eq!(name, "a"),
        other => panic!("unexpected {:?}", other.map(|d| d.len())),
    }
    Image::filled(4, 2, [0.5; 3]).save(&dir.path().join("right").join("a.ppm")).unwrap();
    assert_eq!(load_stereo_dir(dir.path()).unwrap().len(), 1);
    fs::write(dir.path().join("left").join("b.png"), b"not a png").unwrap();
    Image::filled(4, 2, [0.5; 3]).save(&dir.path().join("right").join("b.png")).unwrap();
    assert!(matches!(load_stereo_dir(dir.path()), Err(Error::Decode { .. })));
}

#[test]
fn preprocess_scales_disparity_and_crops_consistently() {
    let left = Image::from_fn(16, 8, |c, y, x| (c * 100 + y * 16 + x) as f32 / 400.0);
    let mut pair = StereoPair::new("p", left.clone(), left).unwrap();
    pair.gt_disparity = Some(DisparityMap::constant(16, 8, 2.0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = preprocess(&pair, (32, 16), (24, 12), &mut rng).unwrap();
    assert_eq!(out.dims(), (24, 12));
    assert!(out.gt_disparity.unwrap().data().iter().all(|&d| (d - 4.0).abs() < 1e-6));
    assert_eq!(out.left, out.right);
    assert!(preprocess(&pair, (16, 8), (20, 8), &mut rng).is_err());
}

#[test]
fn synth_is_seed_deterministic() {
    let s = spec("seed = 5\nlayers = noise:1:full, noise/3:4:rect/4/4/20/10\n");
    let a = synth_dataset(&s, 2).unwrap();
    let b = synth_dataset(&s, 2).unwrap();
    assert_eq!(a[0].left, b[0].left);
    assert_eq!(a[1].right, b[1].right);
    assert_ne!(a[0].left, a[1].left);
}

#[test]
fn pfm_files_are_bottom_up_little_endian() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.pfm");
    let plane = Plane::from_fn(3, 2, |y, x| (y * 3 + x) as f32);
    plane.save_pfm(&p).unwrap();
    let bytes = fs::read(&p).unwrap();
    assert!(bytes.starts_with(b"Pf\n3 2\n-1"));
    let body = &bytes[bytes.len() - 24..];
    // first stored row is the bottom image row (values 3, 4, 5)
    assert_eq!(f32::from_le_bytes(body[0..4].try_into().unwrap()), 3.0);
    assert_eq!(Plane::load_pfm(&p).unwrap(), plane);
}
