mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hoikd::branches::{bag_and_normalize, enumerate_pairs, ForwardVars, ImageFeatures, Variant};
use hoikd::distill::*;
use hoikd::infer::extract_split;
use hoikd::synthworld::{generate_dataset, Dataset, WorldConfig};
use hoikd::tensorcore::{softmax_slice, Graph, Tensor};
use hoikd::Error;

use common::*;

fn tiny_world(seed: u64) -> Dataset {
    generate_dataset(&WorldConfig { n_train: 8, n_test: 2, ..Default::default() }, seed).unwrap()
}

fn random_dist(n: usize, rng: &mut ChaCha8Rng, sharp: f32) -> Vec<f32> {
    let logits: Vec<f32> = (0..n).map(|_| sharp * rng.random_range(-1.0..1.0)).collect();
    softmax_slice(&logits)
}

fn kl(p: &[f32], q: &[f32]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| a as f64 * ((a as f64 + 1e-8) / (b as f64 + 1e-8)).ln()).sum()
}

#[test]
fn supervision_cache_contract() {
    let d = tiny_world(1);
    let t = teacher(2);
    let cache = precompute_supervision(&d.train, &t, 64).unwrap();
    let mut expected = 0;
    for (i, p) in d.train.proposals.iter().enumerate() {
        let pairs = enumerate_pairs(&p.proposals, 64.0, 64.0, 64);
        expected += 1 + pairs.len();
        let s = cache.lookup(d.train.gt.images[i].id, &pairs).unwrap();
        for v in std::iter::once(&s.d_g).chain(&s.d_u) {
            assert_eq!(v.len(), 30);
            assert!((v.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs() <= 1e-6);
        }
        if let Some(first) = pairs.first() {
            let crop = make_union_crop(&d.train.images[i], &first.union, 32).unwrap();
            assert_eq!(t.score(&crop).unwrap(), s.d_u[0]);
        }
    }
    assert_eq!(cache.vector_count(), expected);

    let dir = tempfile::tempdir().unwrap();
    cache.save(dir.path()).unwrap();
    let back = SupervisionCache::load(dir.path()).unwrap();
    assert_eq!(back, cache);
    assert_eq!(back, precompute_supervision(&d.train, &t, 64).unwrap());

    // a different enumeration is caught by the stored hashes
    let (i, p) = d.train.proposals.iter().enumerate().find(|(_, p)| enumerate_pairs(&p.proposals, 64.0, 64.0, 64).len() > 1).unwrap();
    let fewer = enumerate_pairs(&p.proposals, 64.0, 64.0, 1);
    assert!(matches!(cache.lookup(d.train.gt.images[i].id, &fewer), Err(Error::Cache(_))));
    let mut moved = enumerate_pairs(&p.proposals, 64.0, 64.0, 64);
    moved.swap(0, 1);
    assert!(matches!(cache.lookup(d.train.gt.images[i].id, &moved), Err(Error::Cache(_))));
    assert!(matches!(cache.lookup(42_424_242, &[]), Err(Error::Cache(_))));
}

/// Graph leaves standing in for branch outputs.
struct Fake {
    fw: ForwardVars,
}

fn fake(g: &mut Graph<f64>, s_g: &[f32], union_logits: &[Vec<f32>], s_ho: &[Vec<f32>]) -> Fake {
    let mat = |rows: &[Vec<f32>]| {
        Tensor::new([rows.len(), rows[0].len()], rows.iter().flatten().map(|&v| v as f64).collect()).unwrap()
    };
    let sg = g.param(Tensor::new([1, s_g.len()], s_g.iter().map(|&v| v as f64).collect()).unwrap());
    let ul = g.param(mat(union_logits));
    let su = g.softmax(ul, 1).unwrap();
    let sho = g.param(mat(s_ho));
    Fake { fw: ForwardVars { s_g: Some(sg), union_logits: Some(ul), s_u: Some(su), s_ho: Some(sho) } }
}

fn ln(v: &[f32]) -> Vec<f32> {
    v.iter().map(|x| x.ln()).collect()
}

#[test]
fn matching_teacher_gives_zero_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 30;
    let d_g = random_dist(n, &mut rng, 4.0);
    let d_u: Vec<Vec<f32>> = (0..3).map(|_| random_dist(n, &mut rng, 4.0)).collect();
    let mut g = Graph::<f64>::new();
    let union_logits: Vec<Vec<f32>> = d_u.iter().map(|d| ln(d)).collect();
    // every pair row equal to ln d_g: the bag max is ln d_g itself
    let ho = vec![ln(&d_g); 3];
    let f = fake(&mut g, &d_g, &union_logits, &ho);
    let l = loss_graph(&mut g, &f.fw, &d_g, &d_u, &Routing::default(), &LossOptions::default()).unwrap().unwrap();
    let b = LossBreakdown::read(&g, &l);
    assert!(b.total.abs() <= 3e-7, "{b:?}");
}

#[test]
fn single_pair_ho_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 12;
    let d_g = random_dist(n, &mut rng, 3.0);
    let d_u = vec![random_dist(n, &mut rng, 3.0)];
    let s_ho: Vec<f32> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
    let expect = kl(&softmax_slice(&s_ho), &d_g);

    let eval = |routing: Routing, du: &[Vec<f32>]| {
        let mut g = Graph::<f64>::new();
        let f = fake(&mut g, &d_g, std::slice::from_ref(&s_ho), std::slice::from_ref(&s_ho));
        let l = loss_graph(&mut g, &f.fw, &d_g, du, &routing, &LossOptions::default()).unwrap().unwrap();
        LossBreakdown::read(&g, &l)
    };
    let b = eval(Routing::default(), &d_u);
    assert!((b.l_ho - expect).abs() < 1e-6, "{} vs {expect}", b.l_ho);

    // with M = 1, MIL against d_g is per-pair supervision by d_g
    let u = Routing { ho_branch: Supervision::U, ..Routing::default() };
    assert!((eval(u, std::slice::from_ref(&d_g)).l_ho - b.l_ho).abs() < 1e-12);
    let gu = Routing { ho_branch: Supervision::GU, ..Routing::default() };
    assert!((eval(gu, std::slice::from_ref(&d_g)).l_ho - 2.0 * b.l_ho).abs() < 1e-12);
}

#[test]
fn loss_terms_stay_non_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let routings = ["u:g", "g:g", "u:u", "u:g+u", "g+u:g", "g+u:g+u"];
    for case in 0..300 {
        let n = rng.random_range(1..20);
        let m = rng.random_range(1..5);
        let d_g = random_dist(n, &mut rng, 8.0);
        let d_u: Vec<Vec<f32>> = (0..m).map(|_| random_dist(n, &mut rng, 8.0)).collect();
        let rows = |rng: &mut ChaCha8Rng| (0..m).map(|_| (0..n).map(|_| rng.random_range(-10.0..10.0)).collect()).collect::<Vec<Vec<f32>>>();
        let (ul, ho) = (rows(&mut rng), rows(&mut rng));
        let s_g = random_dist(n, &mut rng, 8.0);
        let routing = Routing::parse(routings[case % routings.len()]).unwrap();
        let opts = LossOptions { teacher_first: case % 2 == 1, ..Default::default() };
        let mut g = Graph::<f64>::new();
        let f = fake(&mut g, &s_g, &ul, &ho);
        let l = loss_graph(&mut g, &f.fw, &d_g, &d_u, &routing, &opts).unwrap().unwrap();
        let b = LossBreakdown::read(&g, &l);
        for v in [b.l_g, b.l_u, b.l_ho, b.total] {
            assert!(v >= -1e-6 && v.is_finite(), "case {case}: {b:?}");
        }
    }
}

#[test]
fn empty_image_only_has_the_global_term() {
    let t = teacher(6);
    let f = ImageFeatures::extract(&t.trunk, 1, &noise_image(64, 7), &[], 64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d_g = random_dist(30, &mut rng, 2.0);
    for (variant, expect_some) in [(Variant::Full, true), (Variant::Baseline, false)] {
        let s = student(&t, variant, 9);
        let mut g = Graph::<f32>::new();
        let p = s.params.bind(&mut g);
        let w = g.constant(t.embedding.matrix.clone());
        let scale = g.constant(Tensor::vector(&[s.logit_scale]));
        let fw = s.forward(&mut g, &p, &f, w, scale).unwrap();
        assert!(fw.s_u.is_none() && fw.s_ho.is_none());
        let l = loss_graph(&mut g, &fw, &d_g, &[], &Routing::default(), &LossOptions::default()).unwrap();
        assert_eq!(l.is_some(), expect_some);
        if let Some(l) = l {
            let b = LossBreakdown::read(&g, &l);
            assert_eq!((b.l_u, b.l_ho), (0.0, 0.0));
            assert_eq!(b.total, b.l_g);
        }
    }
}

#[test]
fn full_loss_gradcheck_on_two_pair_image() {
    for (case, worst) in common::checks::loss_gradcheck(12) {
        assert!(worst < 1e-4, "{case}: {worst}");
    }
}

proptest! {
    #[test]
    fn bag_max_is_monotone(vals in proptest::collection::vec(-5.0f32..5.0, 12), m in 0usize..3, c in 0usize..4, bump in 0.0f32..3.0) {
        let rows: Vec<Vec<f32>> = vals.chunks(4).map(|r| r.to_vec()).collect();
        let (before, _, _) = bag_and_normalize(&rows).unwrap();
        let mut up = rows.clone();
        up[m][c] += bump;
        let (after, _, _) = bag_and_normalize(&up).unwrap();
        prop_assert!(after[c] >= before[c]);
        let is_argmax = rows.iter().all(|r| r[c] <= rows[m][c]);
        if is_argmax && bump > 0.0 {
            prop_assert!(after[c] > before[c]);
        }
    }
}

#[test]
fn routing_config() {
    assert_eq!(Routing::default().label(), "u:g");
    assert_eq!(Routing::parse("g+u:u").unwrap().union_branch, Supervision::GU);
    assert!(Routing::parse("x:g").is_err());
    assert!(Routing { global_branch: Supervision::U, ..Routing::default() }.validate().is_err());
    let r: Routing = serde_json::from_str(r#"{"union_branch": "g+u"}"#).unwrap();
    assert_eq!(r.ho_branch, Supervision::G);
    assert!(serde_json::from_str::<Routing>(r#"{"pose_branch": "g"}"#).is_err());
}

#[test]
fn class_subsets_and_restriction() {
    let s = class_subset(30, Some(5), 7).unwrap();
    assert_eq!(s.len(), 5);
    assert!(s.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(s, class_subset(30, Some(5), 7).unwrap());
    assert_eq!(class_subset(30, None, 7).unwrap(), (0..30).collect::<Vec<_>>());
    assert!(class_subset(30, Some(31), 7).is_err());
    let r = restrict(&[0.1, 0.2, 0.3, 0.4], &[1, 3]);
    assert!((r[0] - 1.0 / 3.0).abs() < 1e-7 && (r[1] - 2.0 / 3.0).abs() < 1e-7);
    assert_eq!(restrict(&[1.0, 0.0, 0.0], &[1, 2]), vec![0.5, 0.5]);
}

struct Setup {
    teacher: hoikd::encoder::TeacherModel,
    feats: Vec<ImageFeatures>,
    cache: SupervisionCache,
}

fn setup() -> Setup {
    let d = tiny_world(14);
    let teacher = teacher(15);
    let feats = extract_split(&teacher.trunk, &d.train, 64).unwrap();
    let cache = precompute_supervision(&d.train, &teacher, 64).unwrap();
    Setup { teacher, feats, cache }
}

fn small_cfg() -> TrainConfig {
    TrainConfig { total_iters: 6, decay_iter: 4, batch_size: 4, lr: 1e-3, seed: 3, ..TrainConfig::default() }
}

#[test]
fn config_validation() {
    assert!(TrainConfig { decay_iter: 2000, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { variant: Variant::Tf, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig::default().validate().is_ok());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 1}"#).is_err());
    let c = TrainConfig::default();
    assert_eq!((c.lr, c.batch_size, c.total_iters, c.decay_iter), (1e-4, 16, 2000, 1000));
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let s = setup();
    let cfg = TrainConfig { lr: 0.0, ..small_cfg() };
    let run = train(&s.teacher, &s.feats, &s.cache, &cfg).unwrap();
    let fresh = hoikd::branches::StudentModel::new(&s.teacher, cfg.student_config(), hoikd::seeds::sub_seed(cfg.seed, "student")).unwrap();
    assert_eq!(run.model.params.entries(), fresh.params.entries());
}

#[test]
fn training_is_deterministic_and_leaves_the_trunk_alone() {
    let s = setup();
    let cfg = small_cfg();
    let a = train(&s.teacher, &s.feats, &s.cache, &cfg).unwrap();
    let b = train(&s.teacher, &s.feats, &s.cache, &cfg).unwrap();
    assert_eq!(a.trunk_hash_before, a.trunk_hash_after);
    assert_eq!(a.curve, b.curve);
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_student(da.path(), &a, &cfg).unwrap();
    save_student(db.path(), &b, &cfg).unwrap();
    for f in ["student.json", "weights/manifest.json", "weights/data.bin"] {
        assert_eq!(std::fs::read(da.path().join(f)).unwrap(), std::fs::read(db.path().join(f)).unwrap(), "{f}");
    }
    let (loaded, _) = load_student(da.path(), &s.teacher).unwrap();
    assert_eq!(loaded.params.entries(), a.model.params.entries());

    // learning-rate decay shows up in the curve
    assert_eq!(a.curve[3].lr, 1e-3);
    assert!((a.curve[4].lr - 1e-4).abs() < 1e-12);
    let csv = curve_csv(&a.curve);
    assert!(csv.starts_with("iter,L_g,L_u,L_ho,total,lr\n"));
    assert_eq!(csv.lines().count(), 7);
    assert!(a.curve.iter().all(|r| r.loss.total.is_finite() && r.loss.total >= -1e-6));
}

#[test]
fn trained_classes_can_be_a_subset() {
    let s = setup();
    let run = train(&s.teacher, &s.feats, &s.cache, &TrainConfig { nprime: Some(5), ..small_cfg() }).unwrap();
    assert_eq!(run.classes.len(), 5);
}

#[test]
fn stale_cache_is_rejected() {
    let s = setup();
    let mut feats = s.feats.clone();
    let f = feats.iter_mut().find(|f| f.num_pairs() > 1).unwrap();
    f.pairs.truncate(1);
    f.unions.truncate(1);
    assert!(matches!(train(&s.teacher, &feats, &s.cache, &small_cfg()), Err(Error::Cache(_))));
}

#[test]
fn nan_loss_names_the_term() {
    let s = setup();
    let mut images = s.cache.images.clone();
    images[0].d_g[0] = f32::NAN;
    let bad = SupervisionCache::from_images(s.cache.num_classes, s.cache.max_pairs, images);
    let cfg = TrainConfig { batch_size: 8, ..small_cfg() };
    match train(&s.teacher, &s.feats, &bad, &cfg) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("iteration 0") && msg.contains("L_"), "{msg}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("NaN supervision trained without complaint"),
    }
}

