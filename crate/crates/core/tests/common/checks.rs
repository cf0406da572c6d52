//! Randomized sweeps shared by the focused test files and the acceptance run.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hoikd::branches::{bag_and_normalize, ScoreBundle, Variant};
use hoikd::distill::{loss_graph, LossOptions, Routing};
use hoikd::evaluator::{evaluate, ApMode, Detection, GtInstance};
use hoikd::geometry::BBox;
use hoikd::labels::LabelSpace;
use hoikd::tensorcore::gradcheck;
use hoikd::tensorcore::{softmax_slice, Graph, Tensor, TensorError, Var};

type Make = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>;
type Op = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>>;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn u(shape: &'static [usize], lo: f64, hi: f64) -> impl Fn(&mut ChaCha8Rng) -> Tensor<f64> {
    move |r| uniform(r, shape, lo, hi)
}

/// Every differentiable graph op with an input generator.
pub fn op_cases() -> Vec<(&'static str, Make, Op)> {
    fn case(
        name: &'static str,
        make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + 'static,
        op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError> + 'static,
    ) -> (&'static str, Make, Op) {
        (name, Box::new(make), Box::new(op))
    }
    fn pair(r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)]
    }
    vec![
        case("matmul", |r| vec![u(&[3, 4], -1.0, 1.0)(r), u(&[4, 2], -1.0, 1.0)(r)], |g, x| g.matmul(x[0], x[1])),
        case("matmul_nt", |r| vec![u(&[3, 4], -1.0, 1.0)(r), u(&[2, 4], -1.0, 1.0)(r)], |g, x| g.matmul_nt(x[0], x[1])),
        case("bmm", |r| vec![u(&[2, 3, 4], -1.0, 1.0)(r), u(&[2, 4, 2], -1.0, 1.0)(r)], |g, x| g.bmm(x[0], x[1], false)),
        case("bmm_nt", |r| vec![u(&[2, 1, 4], -1.0, 1.0)(r), u(&[2, 5, 4], -1.0, 1.0)(r)], |g, x| g.bmm(x[0], x[1], true)),
        case("add", pair, |g, x| g.add(x[0], x[1])),
        case("sub", pair, |g, x| g.sub(x[0], x[1])),
        case("mul", pair, |g, x| g.mul(x[0], x[1])),
        case("add_bias", |r| vec![u(&[3, 4], -1.0, 1.0)(r), u(&[4], -1.0, 1.0)(r)], |g, x| g.add_bias(x[0], x[1])),
        case("scale_by", |r| vec![u(&[2, 3], -1.0, 1.0)(r), u(&[1], 0.5, 2.0)(r)], |g, x| g.scale_by(x[0], x[1])),
        case("scale", |r| vec![u(&[5], -1.0, 1.0)(r)], |g, x| g.scale(x[0], -2.5)),
        case("add_scalar", |r| vec![u(&[5], -1.0, 1.0)(r)], |g, x| g.add_scalar(x[0], 0.75)),
        case("log", |r| vec![u(&[5], 0.2, 3.0)(r)], |g, x| g.log(x[0])),
        case("exp", |r| vec![u(&[5], -2.0, 2.0)(r)], |g, x| g.exp(x[0])),
        case("sigmoid", |r| vec![u(&[5], -4.0, 4.0)(r)], |g, x| g.sigmoid(x[0])),
        case("powf", |r| vec![u(&[5], 0.2, 2.0)(r)], |g, x| g.powf(x[0], 2.8)),
        // kept away from the kink
        case("relu", |r| vec![u(&[6], 0.05, 1.0)(r).map(|v| if v < 0.5 { -v } else { v })], |g, x| g.relu(x[0])),
        case("concat0", |r| vec![u(&[2, 3], -1.0, 1.0)(r), u(&[1, 3], -1.0, 1.0)(r)], |g, x| g.concat(&[x[0], x[1]], 0)),
        case("concat1", |r| vec![u(&[2, 3], -1.0, 1.0)(r), u(&[2, 2], -1.0, 1.0)(r)], |g, x| g.concat(&[x[0], x[1]], 1)),
        case("slice", |r| vec![u(&[3, 5], -1.0, 1.0)(r)], |g, x| g.slice(x[0], 1, 1, 3)),
        case("gather_rows", |r| vec![u(&[4, 3], -1.0, 1.0)(r)], |g, x| g.gather_rows(x[0], &[2, 0, 2])),
        case("reshape", |r| vec![u(&[2, 6], -1.0, 1.0)(r)], |g, x| g.reshape(x[0], [3, 4])),
        case("sum", |r| vec![u(&[2, 3], -1.0, 1.0)(r)], |g, x| g.sum(x[0])),
        case("mean", |r| vec![u(&[2, 3, 4], -1.0, 1.0)(r)], |g, x| g.mean(x[0], 1)),
        case("max", |r| vec![u(&[4, 3], -1.0, 1.0)(r)], |g, x| Ok(g.max(x[0], 0)?.0)),
        case("softmax", |r| vec![u(&[3, 4], -3.0, 3.0)(r)], |g, x| g.softmax(x[0], 0)),
        case("softmax_last", |r| vec![u(&[2, 1, 5], -3.0, 3.0)(r)], |g, x| g.softmax(x[0], 2)),
        case("l2_normalize", |r| vec![u(&[3, 4], -1.0, 1.0)(r)], |g, x| g.l2_normalize(x[0])),
        // a raw probability vector would leave the simplex under perturbation
        case("kl_div", |r| vec![u(&[6], -2.0, 2.0)(r), u(&[6], -2.0, 2.0)(r)], |g, x| {
            let p = g.softmax(x[0], 0)?;
            let q = g.softmax(x[1], 0)?;
            g.kl_div(p, q, 1e-8)
        }),
    ]
}

/// Worst relative gradient error per op over `cases` random inputs each.
pub fn op_gradchecks(cases: u64) -> Vec<(&'static str, f64)> {
    op_cases()
        .into_iter()
        .map(|(name, make, op)| {
            let worst = (0..cases)
                .map(|case| {
                    let mut rng = ChaCha8Rng::seed_from_u64(case * 7919 + name.len() as u64);
                    let inputs = make(&mut rng);
                    gradcheck::check(&inputs, 1e-3, |g, xs| {
                        let y = op(g, xs)?;
                        // fixed random weights give every output entry its own sensitivity
                        let w = g.constant(uniform(&mut ChaCha8Rng::seed_from_u64(case), g.shape(y), -1.0, 1.0));
                        let p = g.mul(y, w)?;
                        g.sum(p)
                    })
                    .unwrap_or_else(|e| panic!("{name}: {e}"))
                    .max_rel_error
                })
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

/// Worst relative error of the full per-image loss gradient on the two-pair
/// toy image, over every trainable parameter.
pub fn loss_gradcheck(per_input: usize) -> Vec<(String, f64)> {
    let t = super::teacher(10);
    let f = super::two_pair_features(&t.trunk, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let d_g = softmax_slice(&(0..30).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f32>>());
    let d_u: Vec<Vec<f32>> =
        (0..2).map(|_| softmax_slice(&(0..30).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f32>>())).collect();
    let mut out = Vec::new();
    for (variant, routing) in [(Variant::Full, "u:g"), (Variant::Full, "g+u:g+u"), (Variant::Early, "u:g")] {
        let s = super::student(&t, variant, 13);
        let routing = Routing::parse(routing).unwrap();
        let inputs = super::trainable_f64(&s.params);
        // 1e-6 is roundoff-limited for the small pooling gradients
        let report = gradcheck::check_sampled(&inputs, 1e-5, per_input, 3, |g: &mut Graph<f64>, vars: &[Var]| {
            let p = super::bind_f64(&s.params, g, vars);
            let w = g.constant(t.embedding.matrix.cast());
            let scale = g.constant(Tensor::vector(&[s.logit_scale as f64]));
            let fw = s.forward(g, &p, &f, w, scale)?;
            let l = loss_graph(g, &fw, &d_g, &d_u, &routing, &LossOptions::default())
                .map_err(|e| TensorError::Usage(e.to_string()))?;
            Ok(l.expect("pairs present").total)
        })
        .unwrap();
        assert_eq!(report.rel_errors.len(), inputs.len());
        out.push((format!("{} {}", variant.name(), routing.label()), report.max_rel_error));
    }
    out
}

fn random_logits(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let spread = [1.0, 10.0, 80.0][rng.random_range(0..3)];
    (0..n).map(|_| rng.random_range(-spread..spread)).collect()
}

/// Softmax sums, KL sign and identity, and score-bundle structure over
/// `cases` random inputs. Returns the violations.
pub fn distribution_sweep(cases: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for case in 0..cases {
        let n = rng.random_range(1..40);
        match case % 4 {
            0 => {
                let rows = rng.random_range(1..5);
                let x: Vec<f32> = (0..rows).flat_map(|_| random_logits(&mut rng, n)).collect();
                let mut g = Graph::<f32>::new();
                let v = g.constant(Tensor::new([rows, n], x.clone()).unwrap());
                let s = g.softmax(v, 1).unwrap();
                for (r, row) in g.value(s).data().chunks(n).enumerate() {
                    let sum: f64 = row.iter().map(|&v| v as f64).sum();
                    if (sum - 1.0).abs() > 1e-5 || row.iter().any(|v| *v < 0.0) {
                        bad.push(format!("case {case}: graph softmax row {r} sums to {sum}"));
                    }
                    let direct = softmax_slice(&x[r * n..(r + 1) * n]);
                    if direct.iter().zip(row).any(|(a, b)| (a - b).abs() > 1e-6) {
                        bad.push(format!("case {case}: softmax_slice disagrees with graph softmax"));
                    }
                }
            }
            1 => {
                let p = softmax_slice(&random_logits(&mut rng, n).iter().map(|&v| v as f64).collect::<Vec<_>>());
                let q = softmax_slice(&random_logits(&mut rng, n).iter().map(|&v| v as f64).collect::<Vec<_>>());
                let mut g = Graph::<f64>::new();
                let (pv, qv) = (g.constant(Tensor::vector(&p)), g.constant(Tensor::vector(&q)));
                let kl = g.kl_div(pv, qv, 1e-8).unwrap();
                let kl = g.value(kl).item();
                if kl < -1e-6 {
                    bad.push(format!("case {case}: KL(p, q) = {kl}"));
                }
                let same = g.kl_div(pv, pv, 1e-8).unwrap();
                if g.value(same).item().abs() > 1e-12 {
                    bad.push(format!("case {case}: KL(p, p) = {}", g.value(same).item()));
                }
            }
            _ => {
                let m = rng.random_range(1..6);
                let s_ho: Vec<Vec<f32>> = (0..m).map(|_| random_logits(&mut rng, n)).collect();
                let (s_hat, s_bar, p_ho) = bag_and_normalize(&s_ho).unwrap();
                let bundle = ScoreBundle {
                    s_g: Some(softmax_slice(&random_logits(&mut rng, n))),
                    s_u: (0..m).map(|_| softmax_slice(&random_logits(&mut rng, n))).collect(),
                    s_ho,
                    s_hat,
                    s_bar,
                    p_ho,
                };
                if let Err(e) = bundle.check(1e-5) {
                    bad.push(format!("case {case}: {e}"));
                }
                if bundle.p_ho.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                    bad.push(format!("case {case}: p_ho outside [0, 1]"));
                }
            }
        }
    }
    bad
}

fn area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = a[2].min(b[2]) - a[0].max(b[0]);
    let ih = a[3].min(b[3]) - a[1].max(b[1]);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (area(a) + area(b) - inter)
}

/// Reference AP for one class: rank detections, let each claim its best
/// unclaimed ground truth, then integrate the precision envelope one recall
/// step at a time.
fn oracle_ap(dets: &[&Detection], gts: &[&GtInstance]) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut claimed = vec![false; gts.len()];
    let mut tp = Vec::new();
    for &i in &order {
        let d = dets[i];
        let mut best = None;
        let mut best_q = 0.0;
        for (j, g) in gts.iter().enumerate() {
            let q = iou(&d.human.to_array(), &g.human.to_array()).min(iou(&d.object.to_array(), &g.object.to_array()));
            if !claimed[j] && g.image_id == d.image_id && q >= 0.5 && (best.is_none() || q > best_q) {
                best = Some(j);
                best_q = q;
            }
        }
        if let Some(j) = best {
            claimed[j] = true;
        }
        tp.push(best.is_some());
    }
    let precision_at = |k: usize| tp[..=k].iter().filter(|&&t| t).count() as f64 / (k + 1) as f64;
    let mut ap = 0.0;
    for k in 0..tp.len() {
        if tp[k] {
            let envelope = (k..tp.len()).map(precision_at).fold(0.0, f64::max);
            ap += envelope / gts.len() as f64;
        }
    }
    ap
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let (x, y) = (rng.random_range(0..16) as f64, rng.random_range(0..16) as f64);
    let (w, h) = (rng.random_range(2..9) as f64, rng.random_range(2..9) as f64);
    BBox::new(x, y, x + w, y + h).unwrap()
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox) -> BBox {
    let mut d = || rng.random_range(-1..=1) as f64;
    let (x1, y1) = (b.x1() + d(), b.y1() + d());
    let (x2, y2) = (b.x2() + d(), b.y2() + d());
    BBox::new(x1, y1, x2.max(x1 + 1.0), y2.max(y1 + 1.0)).unwrap()
}

/// Compares the evaluator with the reference on `cases` random micro
/// instances (up to 5 images, 4 classes, 8 detections). Returns mismatches.
pub fn evaluator_sweep(cases: usize, seed: u64) -> Vec<String> {
    let mut labels = LabelSpace::product(&["hold", "ride"], &["cup", "bike"]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for case in 0..cases {
        for h in labels.hois.iter_mut() {
            h.train_count = rng.random_range(0..20);
        }
        let images = rng.random_range(1..=5u64);
        let gts: Vec<GtInstance> = (0..rng.random_range(0..=6))
            .map(|_| GtInstance {
                image_id: rng.random_range(1..=images),
                human: random_box(&mut rng),
                object: random_box(&mut rng),
                hoi_id: rng.random_range(1..=4),
            })
            .collect();
        let dets: Vec<Detection> = (0..rng.random_range(0..=8))
            .map(|_| {
                // coarse scores so ties happen
                let score = rng.random_range(0..6) as f64 / 5.0;
                if !gts.is_empty() && rng.random_bool(0.7) {
                    let g = &gts[rng.random_range(0..gts.len())];
                    let hoi_id = if rng.random_bool(0.85) { g.hoi_id } else { rng.random_range(1..=4) };
                    Detection { image_id: g.image_id, human: jitter(&mut rng, &g.human), object: jitter(&mut rng, &g.object), hoi_id, score }
                } else {
                    Detection {
                        image_id: rng.random_range(1..=images),
                        human: random_box(&mut rng),
                        object: random_box(&mut rng),
                        hoi_id: rng.random_range(1..=4),
                        score,
                    }
                }
            })
            .collect();

        let report = evaluate(&dets, &gts, &labels, 10, ApMode::AllPoint).unwrap();
        let mut per_class = BTreeMap::new();
        for c in 1..=4u32 {
            let d: Vec<&Detection> = dets.iter().filter(|d| d.hoi_id == c).collect();
            let g: Vec<&GtInstance> = gts.iter().filter(|g| g.hoi_id == c).collect();
            let ap = oracle_ap(&d, &g);
            if (ap - report.per_class_ap[c as usize - 1]).abs() > 1e-9 {
                bad.push(format!("case {case}: class {c} AP {} vs oracle {ap}", report.per_class_ap[c as usize - 1]));
            }
            if !g.is_empty() {
                per_class.insert(c, (ap, labels.hois[c as usize - 1].train_count < 10));
            }
        }
        let mean = |keep: &dyn Fn(bool) -> bool| {
            let v: Vec<f64> = per_class.values().filter(|(_, r)| keep(*r)).map(|(ap, _)| *ap).collect();
            if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 }
        };
        let expect = [mean(&|_| true), mean(&|r| r), mean(&|r| !r)];
        let got = [report.map_full, report.map_rare, report.map_nonrare];
        if expect.iter().zip(&got).any(|(a, b)| (a - b).abs() > 1e-9) {
            bad.push(format!("case {case}: split means {got:?} vs oracle {expect:?}"));
        }
    }
    bad
}

/// mAP for the three-detection fixture: TP, FP, TP against two ground truths.
pub fn ap_fixture() -> f64 {
    let labels = LabelSpace::product(&["hold"], &["cup"]);
    let b = |x: f64| BBox::new(x, 0.0, x + 10.0, 10.0).unwrap();
    let gt = |x: f64| GtInstance { image_id: 1, human: b(x), object: b(x + 20.0), hoi_id: 1 };
    let gts = vec![gt(0.0), gt(40.0)];
    let det = |x: f64, score: f64| Detection { image_id: 1, human: b(x), object: b(x + 20.0), hoi_id: 1, score };
    let dets = vec![det(0.0, 0.9), det(100.0, 0.8), det(40.0, 0.7)];
    evaluate(&dets, &gts, &labels, 10, ApMode::AllPoint).unwrap().map_full
}
