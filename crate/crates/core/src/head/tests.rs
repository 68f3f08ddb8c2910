use super::*;
use crate::gradcheck::{probe_weights, random_tensor, GradCheck};
use crate::tensor::{seeded_rng, Tensor};
use proptest::prelude::*;

const STRIDES: [usize; 2] = [4, 8];

fn build_head(channels: usize, classes: usize, seed: u64) -> (ParamStore<f64>, HeadParams) {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed);
    let p = HeadParams::new(&mut ParamBuilder::new(&mut store, &mut rng), channels, classes, &HeadConfig { width: 4, prior: 0.01 });
    (store, p)
}

/// Leaf-only outputs with the given logits and distances.
fn leaf_outputs(g: &mut Graph<'_, f64>, levels: &[(Tensor<f64>, Tensor<f64>, usize)]) -> Vec<LevelOutput> {
    levels
        .iter()
        .map(|(c, l, s)| LevelOutput { cls: g.input(c.clone()), ltrb: g.input(l.clone()), stride: *s })
        .collect()
}

#[test]
fn zeroed_classifier_scores_one_half() {
    let (mut store, p) = build_head(3, 2, 1);
    p.cls.zero(&mut store);
    let mut g = Graph::new(&store);
    let x = g.input(random_tensor(&[1, 3, 4, 4], 1.0, 2));
    let out = head_forward(&mut g, &[x], &[4], &p).unwrap();
    let s = g.sigmoid(out[0].cls);
    assert!(g.value(s).data().iter().all(|v| *v == 0.5));
}

#[test]
fn prior_initialisation_sets_scores() {
    let (mut store, p) = build_head(3, 2, 1);
    p.cls.zero(&mut store);
    p.init_prior(&mut store, 0.01);
    let mut g = Graph::new(&store);
    let x = g.input(random_tensor(&[1, 3, 2, 2], 1.0, 2));
    let out = head_forward(&mut g, &[x], &[4], &p).unwrap();
    let s = g.sigmoid(out[0].cls);
    assert!(g.value(s).data().iter().all(|v| (v - 0.01).abs() < 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn distances_strictly_positive(scale in 0.1f64..200.0, seed in 0u64..1000) {
        let (store, p) = build_head(3, 2, seed);
        let store32 = store.cast::<f32>();
        let mut g = Graph::new(&store32);
        let x = g.input(random_tensor(&[1, 3, 3, 3], scale, seed).cast());
        let out = head_forward(&mut g, &[x], &[4], &p).unwrap();
        prop_assert!(g.value(out[0].ltrb).data().iter().all(|v| *v > 0.0));
    }
}

#[test]
fn empty_annotations_with_zero_logits_give_closed_form() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let levels = [
        (Tensor::zeros(&[2, 3, 4, 4]), Tensor::ones(&[2, 4, 4, 4]), 4),
        (Tensor::zeros(&[2, 3, 2, 2]), Tensor::ones(&[2, 4, 2, 2]), 8),
    ];
    let outs = leaf_outputs(&mut g, &levels);
    let gts = vec![GroundTruth::default(); 2];
    let (loss, parts) = assign_and_loss(&mut g, &outs, &gts, &LossConfig::default()).unwrap();
    // each logit is a negative at p = 1/2: (1 - alpha) p^gamma ln 2
    let per_logit = 0.75 * 0.25 * std::f64::consts::LN_2;
    let count = 2.0 * 3.0 * (16.0 + 4.0);
    assert!((g.value(loss).data()[0] - count * per_logit).abs() < 1e-12);
    assert_eq!(parts.num_pos, 0);
    assert_eq!(parts.reg, 0.0);
}

#[test]
fn exact_distances_give_zero_box_loss() {
    let obj = BBox::new(5.0, 6.0, 17.0, 15.0);
    let gt = GroundTruth::new(vec![(1, obj)]);
    let cfg = LossConfig::default();
    let asg = assign(&gt, &[(8, 8), (4, 4)], &STRIDES, &cfg);
    assert!(asg.num_positive() > 0);
    let mut ltrb = Tensor::<f64>::ones(&[1, 4, 8, 8]);
    for (loc, a) in asg.levels[0].iter().enumerate() {
        if a.is_some() {
            let (px, py) = anchor_point(loc / 8, loc % 8, 4);
            let d = [px - obj.x1, py - obj.y1, obj.x2 - px, obj.y2 - py];
            for j in 0..4 {
                ltrb.data_mut()[j * 64 + loc] = d[j] / 4.0;
            }
        }
    }
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let levels = [
        (random_tensor(&[1, 2, 8, 8], 2.0, 1), ltrb, 4),
        (random_tensor(&[1, 2, 4, 4], 2.0, 2), Tensor::ones(&[1, 4, 4, 4]), 8),
    ];
    let outs = leaf_outputs(&mut g, &levels);
    let (_, parts) = assign_and_loss(&mut g, &outs, &[gt], &cfg).unwrap();
    assert!(parts.reg.abs() < 1e-12, "{}", parts.reg);
    assert!(parts.cls > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn loss_is_non_negative(seed in 0u64..10_000, n_obj in 0usize..4) {
        use rand::Rng;
        let mut rng = seeded_rng(seed);
        let objects = (0..n_obj)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..28.0), rng.random_range(0.0..28.0));
                let (w, h) = (rng.random_range(2.0..20.0f64), rng.random_range(2.0..20.0f64));
                (rng.random_range(0..2usize), BBox::new(x, y, (x + w).min(32.0), (y + h).min(32.0)))
            })
            .collect();
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let levels = [
            (random_tensor(&[1, 2, 8, 8], 4.0, seed), random_tensor(&[1, 4, 8, 8], 3.0, seed + 1).clone(), 4),
            (random_tensor(&[1, 2, 4, 4], 4.0, seed + 2), random_tensor(&[1, 4, 4, 4], 3.0, seed + 3), 8),
        ];
        let levels: Vec<_> = levels.into_iter().map(|(c, l, s)| {
            let l = Tensor::from_vec(l.shape(), l.data().iter().map(|v| v.abs() + 1e-3).collect()).unwrap();
            (c, l, s)
        }).collect();
        let outs = leaf_outputs(&mut g, &levels);
        let (loss, parts) = assign_and_loss(&mut g, &outs, &[GroundTruth::new(objects)], &LossConfig::default()).unwrap();
        prop_assert!(g.value(loss).data()[0] >= 0.0);
        prop_assert!(parts.cls >= 0.0 && parts.reg >= 0.0);
    }

    #[test]
    fn focal_derivative_matches_differences(z in -8.0f64..8.0, positive in any::<bool>()) {
        let h = 1e-6;
        let (_, d) = focal_term(z, positive, 0.25, 2.0);
        let num = (focal_term(z + h, positive, 0.25, 2.0).0 - focal_term(z - h, positive, 0.25, 2.0).0) / (2.0 * h);
        prop_assert!((d - num).abs() < 1e-7, "{} vs {}", d, num);
    }

    #[test]
    fn giou_derivative_matches_differences(p in prop::array::uniform4(0.5f64..10.0), t in prop::array::uniform4(-1.0f64..10.0)) {
        prop_assume!(t[0] + t[2] > 0.5 && t[1] + t[3] > 0.5);
        prop_assume!((0..4).all(|j| (p[j] - t[j]).abs() > 1e-3));
        let (v, d) = giou_loss(p, t);
        prop_assert!((0.0..=2.0).contains(&v));
        for j in 0..4 {
            let h = 1e-6;
            let mut a = p;
            a[j] += h;
            let mut b = p;
            b[j] -= h;
            let num = (giou_loss(a, t).0 - giou_loss(b, t).0) / (2.0 * h);
            prop_assert!((d[j] - num).abs() < 1e-6, "side {}: {} vs {}", j, d[j], num);
        }
    }
}

#[test]
fn giou_of_identical_boxes_is_zero() {
    assert_eq!(giou_loss([1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0]).0, 0.0);
    // disjoint boxes exceed 1
    assert!(giou_loss([1.0, 1.0, 1.0, 1.0], [-5.0, 1.0, 7.0, 1.0]).0 > 1.0);
}

#[test]
fn assignment_picks_level_by_size_and_falls_back_to_nearest() {
    let cfg = LossConfig::default();
    let extents = [(16, 16), (8, 8)];
    // small object on stride 4
    let small = GroundTruth::new(vec![(0, BBox::new(10.0, 10.0, 20.0, 18.0))]);
    let a = assign(&small, &extents, &STRIDES, &cfg);
    assert!(a.levels[0].iter().any(|v| v.is_some()));
    assert!(a.levels[1].iter().all(|v| v.is_none()));
    // larger than 8 * 4 goes to stride 8
    let big = GroundTruth::new(vec![(0, BBox::new(0.0, 0.0, 40.0, 30.0))]);
    let a = assign(&big, &extents, &STRIDES, &cfg);
    assert!(a.levels[0].iter().all(|v| v.is_none()));
    assert!(a.levels[1].iter().any(|v| v.is_some()));
    // a sliver between anchors takes the nearest location
    let sliver = GroundTruth::new(vec![(1, BBox::new(8.2, 8.2, 9.8, 9.8))]);
    let a = assign(&sliver, &extents, &STRIDES, &cfg);
    assert_eq!(a.num_positive(), 1);
    assert_eq!(a.levels[0][2 * 16 + 2], Some(0));
}

#[test]
fn overlapping_objects_give_location_to_smaller() {
    let cfg = LossConfig::default();
    let gt = GroundTruth::new(vec![(0, BBox::new(0.0, 0.0, 24.0, 24.0)), (1, BBox::new(8.0, 8.0, 16.0, 16.0))]);
    let a = assign(&gt, &[(8, 8)], &[4], &cfg);
    // anchor (10, 10) lies in both
    assert_eq!(a.levels[0][2 * 8 + 2], Some(1));
}

#[test]
fn head_and_loss_gradcheck() {
    let (mut store, p) = build_head(4, 2, 5);
    let feats = [random_tensor(&[1, 4, 8, 8], 1.0, 6), random_tensor(&[1, 4, 4, 4], 1.0, 7)];
    let gt = vec![GroundTruth::new(vec![(0, BBox::new(3.0, 4.0, 14.0, 12.0)), (1, BBox::new(2.0, 1.0, 30.0, 28.0))])];
    let report = GradCheck { step: 1e-5, ..GradCheck::default() }
        .run(&mut store, |g| {
            let xs: Vec<Var> = feats.iter().map(|f| g.input(f.clone())).collect();
            let outs = head_forward(g, &xs, &STRIDES, &p)?;
            Ok(assign_and_loss(g, &outs, &gt, &LossConfig::default())?.0)
        })
        .unwrap();
    assert!(report.passed(1e-3), "{:?}", report.failures(1e-3).collect::<Vec<_>>());

    let probes = [probe_weights(&[1, 2, 8, 8], 1), probe_weights(&[1, 4, 8, 8], 2)];
    let report = GradCheck::default()
        .run(&mut store, |g| {
            let xs: Vec<Var> = feats.iter().map(|f| g.input(f.clone())).collect();
            let outs = head_forward(g, &xs, &STRIDES, &p)?;
            let a = g.weighted_sum(outs[0].cls, probes[0].clone())?;
            let b = g.weighted_sum(outs[0].ltrb, probes[1].clone())?;
            g.add(a, b)
        })
        .unwrap();
    assert!(report.passed(1e-3), "{:?}", report.failures(1e-3).collect::<Vec<_>>());
}

fn single_level(g: &mut Graph<'_, f64>, logits: Vec<f64>, ltrb: Vec<f64>, hw: (usize, usize), k: usize, s: usize) -> Vec<LevelOutput> {
    let c = Tensor::from_vec(&[1, k, hw.0, hw.1], logits).unwrap();
    let l = Tensor::from_vec(&[1, 4, hw.0, hw.1], ltrb).unwrap();
    leaf_outputs(g, &[(c, l, s)])
}

#[test]
fn single_confident_location_decodes_to_one_box() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let mut logits = vec![-10.0; 4];
    logits[3] = 2.0; // row 1, col 1
    let mut ltrb = vec![1.0; 16];
    for (j, v) in [0.5, 0.25, 1.5, 0.75].iter().enumerate() {
        ltrb[j * 4 + 3] = *v;
    }
    let outs = single_level(&mut g, logits, ltrb, (2, 2), 1, 8);
    let dets = decode_and_nms(&g, &outs, (16, 16), &DecodeConfig::default()).unwrap();
    assert_eq!(dets[0].len(), 1);
    let d = dets[0][0];
    assert_eq!(d.bbox, BBox::new(12.0 - 4.0, 12.0 - 2.0, 12.0 + 12.0, 12.0 + 6.0).clip(16.0, 16.0));
    assert_eq!(d.class_id, 0);
    assert!((d.score - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);

    let none = decode_and_nms(&g, &outs, (16, 16), &DecodeConfig { score_thr: 1.0, ..DecodeConfig::default() }).unwrap();
    assert!(none[0].is_empty());
}

#[test]
fn identical_boxes_collapse_to_one() {
    let b = BBox::new(1.0, 1.0, 5.0, 5.0);
    assert_eq!(nms(&[b, b], &[0.9, 0.8], 0.5), vec![0]);
    assert_eq!(nms(&[b, b], &[0.3, 0.8], 0.5), vec![1]);
}

/// Quadratic reference: repeatedly take the best remaining box and delete
/// everything that overlaps it too much.
fn reference_nms(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while !alive.is_empty() {
        let (pos, &best) = alive
            .iter()
            .enumerate()
            .max_by(|a, b| scores[*a.1].total_cmp(&scores[*b.1]).then(b.1.cmp(a.1)))
            .unwrap();
        keep.push(best);
        alive.remove(pos);
        alive.retain(|&i| iou(&boxes[best], &boxes[i]) <= thr);
    }
    keep
}

fn random_boxes(seed: u64, n: usize) -> (Vec<BBox>, Vec<f64>) {
    use rand::Rng;
    let mut rng = seeded_rng(seed);
    let boxes = (0..n)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..20.0), rng.random_range(0.0..20.0));
            BBox::new(x, y, x + rng.random_range(1.0..12.0), y + rng.random_range(1.0..12.0))
        })
        .collect();
    let scores = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    (boxes, scores)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nms_matches_quadratic_reference(seed in 0u64..100_000, thr in 0.1f64..0.9) {
        let (boxes, scores) = random_boxes(seed, 10);
        let mut got = nms(&boxes, &scores, thr);
        let mut want = reference_nms(&boxes, &scores, thr);
        got.sort_unstable();
        want.sort_unstable();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn nms_ignores_input_order(seed in 0u64..100_000, shift in 1usize..10) {
        let (boxes, scores) = random_boxes(seed, 10);
        let kept: Vec<BBox> = nms(&boxes, &scores, 0.5).into_iter().map(|i| boxes[i]).collect();
        let mut rb = boxes.clone();
        let mut rs = scores.clone();
        rb.rotate_left(shift);
        rs.rotate_left(shift);
        rb.reverse();
        rs.reverse();
        let kept2: Vec<BBox> = nms(&rb, &rs, 0.5).into_iter().map(|i| rb[i]).collect();
        prop_assert_eq!(kept, kept2);
    }
}

fn det(class_id: usize, score: f64, bbox: BBox) -> Detection {
    Detection { class_id, score, bbox }
}

#[test]
fn perfect_predictions_score_one() {
    let gts = vec![
        GroundTruth::new(vec![(0, BBox::new(0.0, 0.0, 10.0, 10.0)), (1, BBox::new(20.0, 20.0, 30.0, 26.0))]),
        GroundTruth::new(vec![(1, BBox::new(3.0, 4.0, 9.0, 9.0))]),
    ];
    let dets: Vec<Vec<Detection>> = gts.iter().map(|g| g.objects.iter().map(|(c, b)| det(*c, 1.0, *b)).collect()).collect();
    let m = evaluate(&dets, &gts, 2).unwrap().unwrap();
    assert_eq!(m, Metrics { map: 1.0, ap50: 1.0, ap75: 1.0, r50: 1.0 });
}

#[test]
fn no_predictions_score_zero_and_empty_truth_is_undefined() {
    let gts = vec![GroundTruth::new(vec![(0, BBox::new(0.0, 0.0, 10.0, 10.0))])];
    let m = evaluate(&[vec![]], &gts, 1).unwrap().unwrap();
    assert_eq!(m, Metrics { map: 0.0, ap50: 0.0, ap75: 0.0, r50: 0.0 });
    let dets = vec![vec![det(0, 0.9, BBox::new(0.0, 0.0, 4.0, 4.0))]];
    assert_eq!(evaluate(&dets, &[GroundTruth::default()], 1).unwrap(), None);
    assert!(evaluate(&dets, &[], 1).is_err());
}

#[test]
fn mixed_case_matches_hand_enumeration() {
    // GT a is hit at IoU 0.6 by the best detection, a false positive comes
    // second, GT b is missed. PR points: (0.5, 1.0), (0.5, 0.5). Recall
    // levels 0.00..0.50 interpolate to precision 1, so AP = 51/101 for
    // thresholds up to 0.60 and 0 above.
    let a = BBox::new(0.0, 0.0, 10.0, 10.0);
    let b = BBox::new(40.0, 40.0, 50.0, 50.0);
    let gts = vec![GroundTruth::new(vec![(0, a), (0, b)])];
    let dets = vec![vec![det(0, 0.9, BBox::new(0.0, 0.0, 10.0, 6.0)), det(0, 0.8, BBox::new(20.0, 20.0, 30.0, 30.0))]];
    let m = evaluate(&dets, &gts, 1).unwrap().unwrap();
    assert_eq!(m.ap50, 51.0 / 101.0);
    assert_eq!(m.ap75, 0.0);
    assert_eq!(m.map, 3.0 * (51.0 / 101.0) / 10.0);
    assert_eq!(m.r50, 0.5);

    // with the false positive ranked first, precision at recall 0.5 is 1/2
    let dets = vec![vec![det(0, 0.7, BBox::new(0.0, 0.0, 10.0, 6.0)), det(0, 0.8, BBox::new(20.0, 20.0, 30.0, 30.0))]];
    let m = evaluate(&dets, &gts, 1).unwrap().unwrap();
    assert_eq!(m.ap50, 51.0 * 0.5 / 101.0);
}

#[test]
fn thresholds_are_exact() {
    for (i, t) in IOU_THRESHOLDS.iter().enumerate() {
        assert_eq!(*t, (50 + 5 * i) as f64 / 100.0);
    }
}

#[test]
fn removing_a_false_positive_never_lowers_map() {
    let gts = vec![GroundTruth::new(vec![(0, BBox::new(0.0, 0.0, 10.0, 10.0)), (0, BBox::new(30.0, 0.0, 40.0, 10.0))])];
    let pool = [
        det(0, 0.95, BBox::new(0.0, 0.0, 10.0, 9.0)),
        det(0, 0.9, BBox::new(60.0, 60.0, 70.0, 70.0)),
        det(0, 0.85, BBox::new(31.0, 0.0, 40.0, 10.0)),
        det(0, 0.8, BBox::new(0.0, 50.0, 5.0, 55.0)),
        det(0, 0.6, BBox::new(29.0, 1.0, 41.0, 10.0)),
    ];
    // every subset of the detections
    for mask in 0u32..(1 << pool.len()) {
        let chosen: Vec<Detection> = (0..pool.len()).filter(|i| mask & (1 << i) != 0).map(|i| pool[i]).collect();
        let full = evaluate(std::slice::from_ref(&chosen), &gts, 1).unwrap().unwrap();
        for (i, d) in chosen.iter().enumerate() {
            let is_fp = gts[0].objects.iter().all(|(_, b)| iou(b, &d.bbox) < 0.5);
            if is_fp {
                let mut less = chosen.clone();
                less.remove(i);
                let m = evaluate(&[less], &gts, 1).unwrap().unwrap();
                assert!(m.map >= full.map, "mask {mask:b} removing {i}");
                assert!(m.r50 <= 1.0);
            }
        }
        assert_eq!(full.r50 == 1.0, gts[0].objects.iter().all(|(_, b)| chosen.iter().any(|d| iou(b, &d.bbox) >= 0.5)));
    }
}

#[test]
fn coco_export_uses_xywh_and_one_based_categories() {
    let dets = vec![vec![det(0, 0.5, BBox::new(1.0, 2.0, 4.0, 8.0))], vec![det(2, 0.25, BBox::new(0.0, 0.0, 1.0, 1.0))]];
    let r = to_coco_results(&[7, 9], &dets);
    assert_eq!(r[0], CocoResult { image_id: 7, category_id: 1, bbox: [1.0, 2.0, 3.0, 6.0], score: 0.5 });
    assert_eq!(r[1].category_id, 3);
    let json = serde_json::to_string(&r[0]).unwrap();
    assert!(json.contains("\"bbox\":[1.0,2.0,3.0,6.0]"));
}
