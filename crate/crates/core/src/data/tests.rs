use super::*;
use proptest::prelude::*;

fn spec(seed: u64) -> SceneSpec {
    SceneSpec { size: 128, seed, ..SceneSpec::default() }
}

#[test]
fn no_colonies_means_no_annotations() {
    let s = SceneSpec { colonies: (0, 0), ..spec(3) };
    let scene = generate_scene(&s).unwrap();
    assert!(scene.gt.is_empty());
    assert_eq!(scene.image.shape(), [3, 128, 128]);
}

#[test]
fn same_seed_same_scene() {
    let a = generate_scene(&spec(11)).unwrap();
    let b = generate_scene(&spec(11)).unwrap();
    assert_eq!(a.image.data(), b.image.data());
    assert_eq!(a.gt, b.gt);
    let c = generate_scene(&spec(12)).unwrap();
    assert_ne!(a.image.data(), c.image.data());
}

#[test]
fn infeasible_specs_are_rejected() {
    for bad in [
        SceneSpec { radius: (2.0, 200.0), ..spec(0) },
        SceneSpec { radius: (1.0, 4.0), ..spec(0) },
        SceneSpec { size: 100, ..spec(0) },
        SceneSpec { colonies: (5, 2), ..spec(0) },
        SceneSpec { num_classes: 0, ..spec(0) },
    ] {
        assert!(generate_scene(&bad).is_err(), "{bad:?}");
    }
}

/// Extent of the pixels a colony actually touches.
fn painted_extent(col: &Colony, size: usize) -> BBox {
    let (mut x1, mut y1, mut x2, mut y2) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for y in 0..size {
        for x in 0..size {
            if col.alpha(x as f64 + 0.5, y as f64 + 0.5) > 0.0 {
                x1 = x1.min(x as f64);
                y1 = y1.min(y as f64);
                x2 = x2.max(x as f64 + 1.0);
                y2 = y2.max(y as f64 + 1.0);
            }
        }
    }
    BBox::new(x1, y1, x2, y2)
}

#[test]
fn box_matches_analytic_ellipse_bound() {
    let cases = [(40.0, 50.0, 8.0, 5.0, 0.0), (64.3, 70.1, 10.0, 6.0, 0.7), (30.5, 90.2, 3.0, 2.0, 1.9)];
    for (cx, cy, a, b, angle) in cases {
        let col = Colony { class_id: 1, cx, cy, a, b, angle, contrast: 0.3 };
        let scene = render_scene(128, 0.02, &[col], 5);
        let gt = scene.gt.objects[0].1;
        // hand bound: axis extents of the rotated ellipse
        let hw = ((a * angle.cos()).powi(2) + (b * angle.sin()).powi(2)).sqrt();
        let hh = ((a * angle.sin()).powi(2) + (b * angle.cos()).powi(2)).sqrt();
        let want = BBox::new(cx - hw, cy - hh, cx + hw, cy + hh);
        for (g, w) in [(gt.x1, want.x1), (gt.y1, want.y1), (gt.x2, want.x2), (gt.y2, want.y2)] {
            assert!((g - w).abs() < 1e-12);
        }
        let painted = painted_extent(&col, 128);
        for (p, w) in [(painted.x1, want.x1), (painted.y1, want.y1), (painted.x2, want.x2), (painted.y2, want.y2)] {
            assert!((p - w).abs() <= 1.0, "painted {painted:?} vs analytic {want:?}");
        }
    }
}

#[test]
fn colony_contrast_matches_configured_lift() {
    let s = SceneSpec { colonies: (6, 6), radius: (6.0, 9.0), contrast: (0.1, 0.3), overlap_prob: 0.0, texture: 0.02, ..spec(21) };
    let scene = generate_scene(&s).unwrap();
    let size = s.size;
    let plane = size * size;
    let px = |x: usize, y: usize| (0..3).map(|c| scene.image.data()[c * plane + y * size + x] as f64).sum::<f64>() / 3.0;
    for col in &scene.colonies {
        let (mut core, mut nc, mut ring, mut nr) = (0.0, 0, 0.0, 0);
        let (cx, cy) = (col.cx, col.cy);
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let d = (fx - cx).hypot(fy - cy);
                if d < 0.4 * col.b {
                    core += px(x, y);
                    nc += 1;
                } else if d > col.a + 2.0 && d < col.a + 4.0 && scene.colonies.iter().all(|o| o.alpha(fx, fy) == 0.0) {
                    ring += px(x, y);
                    nr += 1;
                }
            }
        }
        let lift = core / nc as f64 - ring / nr as f64;
        assert!((lift - col.contrast).abs() < 0.03, "lift {lift} vs {}", col.contrast);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn boxes_in_bounds_and_pixels_in_unit_range(seed in 0u64..1_000_000) {
        let scene = generate_scene(&spec(seed)).unwrap();
        for (k, b) in &scene.gt.objects {
            prop_assert!(*k < 5);
            prop_assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 128.0 && b.y2 <= 128.0);
            prop_assert!(b.area() >= 4.0);
        }
        prop_assert!(scene.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn flip_mirrors_pixels_and_boxes() {
    let scene = generate_scene(&spec(4)).unwrap();
    let (img, gt) = flip_horizontal(&scene.image, &scene.gt);
    assert_eq!(img.data()[5], scene.image.data()[127 - 5]);
    let (back, gt2) = flip_horizontal(&img, &gt);
    assert_eq!(back, scene.image);
    for ((_, a), (_, b)) in gt2.objects.iter().zip(&scene.gt.objects) {
        assert!((a.x1 - b.x1).abs() < 1e-12 && (a.x2 - b.x2).abs() < 1e-12);
    }
}

#[test]
fn dataset_round_trip_and_bookkeeping() {
    let dir = tempfile::tempdir().unwrap();
    let s = SceneSpec { size: 64, colonies: (0, 8), radius: (2.0, 6.0), ..SceneSpec::default() };
    let m = generate_dataset(dir.path(), &s, 100, 3).unwrap();
    let expected: usize = (0..100).map(|i| generate_scene(&s.for_image(i)).unwrap().gt.len()).sum();
    assert_eq!(m.annotations.len(), expected);
    let back = read_dataset(&dir.path().join("annotations.json")).unwrap();
    assert_eq!(back, m);

    // worker count does not change the output
    let dir1 = tempfile::tempdir().unwrap();
    let m1 = generate_dataset(dir1.path(), &s, 100, 1).unwrap();
    assert_eq!(m1, m);

    let (_, samples) = load_samples(&dir.path().join("annotations.json")).unwrap();
    assert_eq!(samples.len(), 100);
    let direct = generate_scene(&s.for_image(7)).unwrap();
    let max_q = samples[7].image.data().iter().zip(direct.image.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(max_q <= 0.5 / 255.0 + 1e-6);
    assert_eq!(samples[7].gt.len(), direct.gt.len());
}

fn record_manifest() -> DatasetManifest {
    DatasetManifest {
        images: vec![ImageRecord { id: 1, file_name: "a.png".into(), width: 64, height: 64 }],
        annotations: vec![AnnotationRecord { id: 1, image_id: 1, category_id: 1, bbox: [0.1, 2.0 / 3.0, 10.0, 5.5] }],
        categories: vec![CategoryRecord { id: 1, name: "x".into() }],
    }
}

#[test]
fn manifest_floats_survive_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.json");
    write_dataset(&p, &record_manifest()).unwrap();
    assert_eq!(read_dataset(&p).unwrap(), record_manifest());
}

#[test]
fn malformed_manifests_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.json");

    let mut m = record_manifest();
    m.annotations[0].image_id = 9;
    std::fs::write(&p, serde_json::to_string(&m).unwrap()).unwrap();
    let e = read_dataset(&p).unwrap_err().to_string();
    assert!(e.contains("annotations[0].image_id") && e.contains("9"), "{e}");

    let mut m = record_manifest();
    m.annotations[0].bbox = [60.0, 0.0, 10.0, 4.0];
    std::fs::write(&p, serde_json::to_string(&m).unwrap()).unwrap();
    assert!(read_dataset(&p).unwrap_err().to_string().contains("annotations[0].bbox"));

    std::fs::write(&p, "{\n  \"images\": [],\n  \"annotations\": [{\"id\": 1}],\n  \"categories\": []\n}").unwrap();
    let e = read_dataset(&p).unwrap_err().to_string();
    assert!(e.contains("line 3") && e.contains("image_id"), "{e}");
}

/// 520 images, one annotation each, classes cycling through 5.
fn balanced(n: usize, classes: u64) -> DatasetManifest {
    DatasetManifest {
        images: (0..n as u64).map(|i| ImageRecord { id: i + 1, file_name: format!("{i}.png"), width: 64, height: 64 }).collect(),
        annotations: (0..n as u64)
            .map(|i| AnnotationRecord { id: i + 1, image_id: i + 1, category_id: i % classes + 1, bbox: [1.0, 1.0, 4.0, 4.0] })
            .collect(),
        categories: (0..classes).map(|k| CategoryRecord { id: k + 1, name: format!("c{k}") }).collect(),
    }
}

#[test]
fn subset_sizes_and_identity() {
    let m = balanced(520, 5);
    assert_eq!(subset(&m, 1.0, 3).unwrap(), m);
    assert_eq!(subset(&m, 0.1, 3).unwrap().images.len(), 52);
    assert_eq!(subset(&m, 0.05, 3).unwrap().images.len(), 26);
    assert_eq!(subset(&m, 0.01, 3).unwrap().images.len(), 5);
    assert!(subset(&m, 0.001, 3).is_err());
    assert!(subset(&m, 0.0, 3).is_err());
    assert!(subset(&m, 1.5, 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn subset_is_stratified(fraction in 0.02f64..0.99, seed in 0u64..1000, classes in 2u64..6) {
        let m = balanced(520, classes);
        let s = subset(&m, fraction, seed).unwrap();
        let n = s.images.len();
        prop_assert_eq!(n, (fraction * 520.0).floor() as usize);
        prop_assert!(s.validate().is_ok());
        for k in 1..=classes {
            let per = s.annotations.iter().filter(|a| a.category_id == k).count() as f64;
            let share = n as f64 / classes as f64;
            prop_assert!((per - share).abs() <= 1.0, "class {} has {} of share {}", k, per, share);
        }
        prop_assert_eq!(s.annotations.len(), n);
    }
}
