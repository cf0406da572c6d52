//! Experiment plumbing shared by the command line and the test suites:
//! seeded stage construction, the on-disk layout, and ablation grids.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::branches::{ImageFeatures, Variant};
use crate::distill::{
    curve_csv, load_student, precompute_supervision, save_student, train, Routing, Supervision, SupervisionCache,
    TrainConfig, TrainRun,
};
use crate::encoder::{embed_labels, TeacherConfig, TeacherModel, Trunk, TrunkConfig};
use crate::evaluator::{evaluate, flatten, ApMode, EvalReport, ImageDetections};
use crate::infer::{extract_split, infer, Scorer};
use crate::labels::LabelSpace;
use crate::seeds::sub_seed;
use crate::synthworld::{generate_dataset, pretrain_teacher, Dataset, PretrainConfig, Split, TeacherReport, WorldConfig};
use crate::{Error, Result};

/// Rows of the ablation tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationGrid {
    pub seeds: Vec<u64>,
    /// Branch rows (training-free variants included).
    pub variants: Vec<Variant>,
    /// Routing rows, trained with the full variant.
    pub routings: Vec<Routing>,
    /// Class-subset sizes; empty means `N/6`, `N/2`, `N`.
    pub nprimes: Vec<usize>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        let r = |u, h| Routing { global_branch: Supervision::G, union_branch: u, ho_branch: h };
        use Supervision::*;
        Self {
            seeds: vec![0, 1, 2],
            variants: vec![
                Variant::Baseline,
                Variant::HoUnion,
                Variant::HoGlobal,
                Variant::Early,
                Variant::Full,
                Variant::Tf,
                Variant::Tfstar,
            ],
            routings: vec![r(G, G), r(U, U), r(U, G), r(U, GU), r(GU, G)],
            nprimes: Vec::new(),
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every sub-seed.
    pub seed: u64,
    pub world: WorldConfig,
    pub trunk: TrunkConfig,
    pub teacher: TeacherConfig,
    pub pretrain: PretrainConfig,
    /// Student training. Its `seed` and `nprime_seed` are derived from the
    /// root seed and ignored here.
    pub train: TrainConfig,
    pub rare_threshold: usize,
    pub ap_mode: ApMode,
    pub ablation: AblationGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            trunk: TrunkConfig::default(),
            teacher: TeacherConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            rare_threshold: 10,
            ap_mode: ApMode::AllPoint,
            ablation: AblationGrid::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(Error::json(path))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if self.trunk.dim != self.train.dim {
            return Err(Error::Config(format!("train.dim {} must equal trunk.dim {}", self.train.dim, self.trunk.dim)));
        }
        if self.teacher.heads != self.train.heads {
            return Err(Error::Config("train.heads must equal teacher.heads".into()));
        }
        if self.pretrain.decay_iter >= self.pretrain.iters && self.pretrain.iters > 0 {
            return Err(Error::Config("pretrain.decay_iter must be below pretrain.iters".into()));
        }
        let n = self.world.verbs.len() * self.world.objects.len();
        if let Some(k) = self.train.nprime {
            if k == 0 || k > n {
                return Err(Error::Config(format!("nprime {k} outside 1..={n}")));
            }
        }
        self.train.routing.validate()?;
        if !self.train.variant.training_free() {
            self.train.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Training config with the derived seeds filled in.
    pub fn seeded_train(&self) -> TrainConfig {
        TrainConfig {
            seed: sub_seed(self.seed, "student"),
            nprime_seed: sub_seed(self.seed, "nprime"),
            ..self.train.clone()
        }
    }

    pub fn num_classes(&self) -> usize {
        self.world.verbs.len() * self.world.objects.len()
    }
}

/// Name of a trained or training-free cell, e.g. `full`, `full_u-g_ho-gu`,
/// `full_n5`.
pub fn cell_name(variant: Variant, routing: &Routing, nprime: Option<usize>) -> String {
    let mut s = variant.name().to_string();
    if !variant.training_free() && *routing != Routing::default() {
        let tag = |x: Supervision| x.to_string().replace('+', "");
        let _ = write!(s, "_u-{}_ho-{}", tag(routing.union_branch), tag(routing.ho_branch));
    }
    if let (false, Some(k)) = (variant.training_free(), nprime) {
        let _ = write!(s, "_n{k}");
    }
    s
}

/// A freshly initialized (untrained) teacher for `labels`.
pub fn build_teacher(cfg: &RunConfig, labels: &LabelSpace) -> Result<TeacherModel> {
    let trunk = Arc::new(Trunk::random(cfg.trunk.clone(), sub_seed(cfg.seed, "trunk")));
    let emb = embed_labels(&labels.pairs(), cfg.trunk.dim, sub_seed(cfg.seed, "text"))?;
    TeacherModel::new(trunk, emb, cfg.teacher.clone(), sub_seed(cfg.seed, "teacher"))
}

pub fn make_dataset(cfg: &RunConfig) -> Result<Dataset> {
    generate_dataset(&cfg.world, sub_seed(cfg.seed, "dataset"))
}

pub fn pretrain(cfg: &RunConfig, dataset: &Dataset) -> Result<(TeacherModel, TeacherReport)> {
    let teacher = build_teacher(cfg, &dataset.labels)?;
    pretrain_teacher(teacher, &cfg.world, &dataset.test, &cfg.pretrain, sub_seed(cfg.seed, "pretrain"))
}

/// Scores plus inference throughput.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub name: String,
    pub seed: u64,
    pub report: EvalReport,
    /// Test images per second, feature extraction included.
    pub fps: f64,
}

/// All stage outputs of one seed, held in memory.
pub struct Experiment {
    pub config: RunConfig,
    pub dataset: Dataset,
    pub teacher: TeacherModel,
    pub teacher_report: Option<TeacherReport>,
    pub train_features: Vec<ImageFeatures>,
    pub test_features: Vec<ImageFeatures>,
    pub train_supervision: SupervisionCache,
    pub test_supervision: SupervisionCache,
}

impl Experiment {
    /// Generates the dataset and pretrains the teacher.
    pub fn prepare(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let dataset = make_dataset(&config)?;
        let (teacher, report) = pretrain(&config, &dataset)?;
        Self::assemble(config, dataset, teacher, Some(report))
    }

    /// Builds features and supervision for an existing dataset and teacher.
    pub fn assemble(config: RunConfig, dataset: Dataset, teacher: TeacherModel, teacher_report: Option<TeacherReport>) -> Result<Self> {
        let m = config.train.max_pairs;
        let train_features = extract_split(&teacher.trunk, &dataset.train, m)?;
        let test_features = extract_split(&teacher.trunk, &dataset.test, m)?;
        let train_supervision = precompute_supervision(&dataset.train, &teacher, m)?;
        let test_supervision = precompute_supervision(&dataset.test, &teacher, m)?;
        Ok(Self { config, dataset, teacher, teacher_report, train_features, test_features, train_supervision, test_supervision })
    }

    pub fn train_config(&self, variant: Variant, routing: Routing, nprime: Option<usize>) -> TrainConfig {
        TrainConfig { variant, routing, nprime, ..self.config.seeded_train() }
    }

    pub fn train(&self, cfg: &TrainConfig) -> Result<TrainRun> {
        train(&self.teacher, &self.train_features, &self.train_supervision, cfg)
    }

    fn evaluate_detections(&self, dets: &[ImageDetections]) -> Result<EvalReport> {
        evaluate(&flatten(dets), &self.dataset.test.gt.instances, &self.dataset.labels, self.config.rare_threshold, self.config.ap_mode)
    }

    /// Student inference on the test split; throughput is measured on a
    /// fresh feature pass.
    pub fn evaluate_student(&self, run: &TrainRun, name: &str) -> Result<(Vec<ImageDetections>, CellResult)> {
        let t0 = Instant::now();
        let feats = extract_split(&self.teacher.trunk, &self.dataset.test, run.model.config.max_pairs)?;
        let scorer = Scorer::Student { model: &run.model, embedding: &self.teacher.embedding.matrix };
        let dets = infer(&self.dataset.labels, &feats, &scorer, run.model.config.variant, self.config.train.gamma)?;
        let fps = self.dataset.test.len() as f64 / t0.elapsed().as_secs_f64();
        let report = self.evaluate_detections(&dets)?;
        Ok((dets, CellResult { name: name.to_string(), seed: self.config.seed, report, fps }))
    }

    /// Teacher-only inference; throughput includes the teacher passes.
    pub fn evaluate_training_free(&self, variant: Variant) -> Result<(Vec<ImageDetections>, CellResult)> {
        let t0 = Instant::now();
        let sup = precompute_supervision(&self.dataset.test, &self.teacher, self.config.train.max_pairs)?;
        let dets = infer(&self.dataset.labels, &self.test_features, &Scorer::Teacher(&sup), variant, self.config.train.gamma)?;
        let fps = self.dataset.test.len() as f64 / t0.elapsed().as_secs_f64();
        let report = self.evaluate_detections(&dets)?;
        Ok((dets, CellResult { name: variant.name().to_string(), seed: self.config.seed, report, fps }))
    }

    /// Trains (if needed) and evaluates one cell.
    pub fn run_cell(&self, variant: Variant, routing: Routing, nprime: Option<usize>) -> Result<CellResult> {
        if variant.training_free() {
            return Ok(self.evaluate_training_free(variant)?.1);
        }
        let cfg = self.train_config(variant, routing, nprime);
        let run = self.train(&cfg)?;
        Ok(self.evaluate_student(&run, &cell_name(variant, &routing, nprime))?.1)
    }
}

/// Directory layout of a pipeline output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn teacher(&self) -> PathBuf {
        self.root.join("teacher")
    }
    pub fn supervision(&self, split: &str) -> PathBuf {
        self.root.join("supervision").join(split)
    }
    pub fn student(&self, name: &str) -> PathBuf {
        self.root.join("students").join(name)
    }
    pub fn detections(&self, name: &str) -> PathBuf {
        self.root.join("detections").join(format!("{name}.json"))
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation")
    }
}

/// Fails with [`Error::MissingInput`] unless `path` exists.
pub fn require(path: &Path, stage: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput { stage, path: path.to_path_buf() })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let json = serde_json::to_string_pretty(value).map_err(Error::json(path))?;
    fs::write(path, json + "\n").map_err(Error::io(path))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(Error::json(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(path, text).map_err(Error::io(path))
}

/// Stage `synth-gen`: renders the dataset under `data/`.
pub fn stage_synth_gen(cfg: &RunConfig, layout: &Layout) -> Result<Dataset> {
    let d = make_dataset(cfg)?;
    d.save(&layout.data())?;
    Ok(d)
}

fn load_dataset(layout: &Layout) -> Result<Dataset> {
    require(&layout.data().join("labels.json"), "synth-gen")?;
    Dataset::load(&layout.data(), false)
}

fn load_split(layout: &Layout, split: &str) -> Result<(LabelSpace, Split)> {
    require(&layout.data().join("labels.json"), "synth-gen")?;
    let labels: LabelSpace = read_json(&layout.data().join("labels.json"))?;
    Ok((labels, Split::load(&layout.data().join(split), false)?))
}

fn load_teacher(layout: &Layout) -> Result<TeacherModel> {
    require(&layout.teacher().join("teacher.json"), "teacher-pretrain")?;
    TeacherModel::load(&layout.teacher())
}

/// Stage `teacher-pretrain`: writes `teacher/` and `teacher/report.json`.
pub fn stage_teacher_pretrain(cfg: &RunConfig, layout: &Layout) -> Result<TeacherReport> {
    let d = load_dataset(layout)?;
    let (teacher, report) = pretrain(cfg, &d)?;
    teacher.save(&layout.teacher())?;
    write_json(&layout.teacher().join("report.json"), &report)?;
    Ok(report)
}

/// Stage `supervise`: teacher distributions for both splits.
pub fn stage_supervise(cfg: &RunConfig, layout: &Layout) -> Result<usize> {
    let teacher = load_teacher(layout)?;
    let mut count = 0;
    for split in ["train", "test"] {
        let (_, s) = load_split(layout, split)?;
        let cache = precompute_supervision(&s, &teacher, cfg.train.max_pairs)?;
        count += cache.vector_count();
        cache.save(&layout.supervision(split))?;
    }
    Ok(count)
}

/// Stage `train`: fits one student and writes it with its loss curve.
pub fn stage_train(cfg: &RunConfig, layout: &Layout) -> Result<(String, TrainRun)> {
    let variant = cfg.train.variant;
    if variant.training_free() {
        return Err(Error::Config(format!("variant {} is training-free; run `infer` directly", variant.name())));
    }
    let teacher = load_teacher(layout)?;
    let (_, split) = load_split(layout, "train")?;
    require(&layout.supervision("train").join("pairs.json"), "supervise")?;
    let cache = SupervisionCache::load(&layout.supervision("train"))?;
    let feats = extract_split(&teacher.trunk, &split, cfg.train.max_pairs)?;
    let tcfg = cfg.seeded_train();
    let run = train(&teacher, &feats, &cache, &tcfg)?;
    if run.trunk_hash_before != run.trunk_hash_after {
        return Err(Error::Numeric("frozen trunk changed during training".into()));
    }
    let name = cell_name(variant, &tcfg.routing, tcfg.nprime);
    let dir = layout.student(&name);
    save_student(&dir, &run, &tcfg)?;
    write_text(&dir.join("loss.csv"), &curve_csv(&run.curve))?;
    Ok((name, run))
}

/// Stage `infer`: detections for the test split.
pub fn stage_infer(cfg: &RunConfig, layout: &Layout) -> Result<(String, Vec<ImageDetections>)> {
    let teacher = load_teacher(layout)?;
    let (labels, split) = load_split(layout, "test")?;
    let variant = cfg.train.variant;
    let name = cell_name(variant, &cfg.train.routing, cfg.train.nprime);
    let feats = extract_split(&teacher.trunk, &split, cfg.train.max_pairs)?;
    let dets = if variant.training_free() {
        require(&layout.supervision("test").join("pairs.json"), "supervise")?;
        let cache = SupervisionCache::load(&layout.supervision("test"))?;
        infer(&labels, &feats, &Scorer::Teacher(&cache), variant, cfg.train.gamma)?
    } else {
        let dir = layout.student(&name);
        require(&dir.join("student.json"), "train")?;
        let (model, _) = load_student(&dir, &teacher)?;
        infer(&labels, &feats, &Scorer::Student { model: &model, embedding: &teacher.embedding.matrix }, variant, cfg.train.gamma)?
    };
    write_json(&layout.detections(&name), &dets)?;
    Ok((name, dets))
}

/// Evaluates a detections file against ground truth and labels files.
pub fn eval_files(dets: &Path, gt: &Path, labels: &Path, rare_threshold: usize, mode: ApMode) -> Result<EvalReport> {
    require(dets, "infer")?;
    require(gt, "synth-gen")?;
    require(labels, "synth-gen")?;
    let dets: Vec<ImageDetections> = read_json(dets)?;
    let gt: crate::evaluator::GroundTruth = read_json(gt)?;
    let labels: LabelSpace = read_json(labels)?;
    labels.validate()?;
    evaluate(&flatten(&dets), &gt.instances, &labels, rare_threshold, mode)
}

/// Stage `eval`: scores `detections/<name>.json` and writes `reports/<name>.{json,md}`.
pub fn stage_eval(cfg: &RunConfig, layout: &Layout) -> Result<(String, EvalReport)> {
    let name = cell_name(cfg.train.variant, &cfg.train.routing, cfg.train.nprime);
    let report = eval_files(
        &layout.detections(&name),
        &layout.data().join("test").join("gt.json"),
        &layout.data().join("labels.json"),
        cfg.rare_threshold,
        cfg.ap_mode,
    )?;
    write_json(&layout.reports().join(format!("{name}.json")), &report)?;
    write_text(&layout.reports().join(format!("{name}.md")), &report.markdown(&name))?;
    Ok((name, report))
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub table: String,
    pub label: String,
    pub cells: Vec<std::result::Result<CellResult, String>>,
}

/// Mean and half range of `xs`.
pub fn mean_range(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some((mean, (hi - lo) / 2.0))
}

fn fmt_stat(xs: &[f64], scale: f64) -> String {
    match mean_range(xs) {
        None => "failed".into(),
        Some((m, _)) if xs.len() == 1 => format!("{:.2}", scale * m),
        Some((m, r)) => format!("{:.2} ± {:.2}", scale * m, scale * r),
    }
}

/// Markdown and CSV renderings of ablation rows.
pub fn render_ablation(rows: &[AblationRow]) -> (String, String) {
    let mut md = String::new();
    let mut csv = String::from("table,row,seed,map_full,map_rare,map_nonrare,fps,status\n");
    let mut current = "";
    for row in rows {
        if row.table != current {
            current = &row.table;
            let _ = writeln!(md, "\n### {current}\n");
            let _ = writeln!(md, "| Method | Full | Rare | Non-Rare | Speed (fps) | Seeds |");
            let _ = writeln!(md, "|---|---|---|---|---|---|");
        }
        let ok: Vec<&CellResult> = row.cells.iter().filter_map(|c| c.as_ref().ok()).collect();
        let col = |f: fn(&CellResult) -> f64, s| fmt_stat(&ok.iter().map(|c| f(c)).collect::<Vec<_>>(), s);
        let failures = row.cells.len() - ok.len();
        let seeds = if failures > 0 { format!("{} ({} failed)", ok.len(), failures) } else { ok.len().to_string() };
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            row.label,
            col(|c| c.report.map_full, 100.0),
            col(|c| c.report.map_rare, 100.0),
            col(|c| c.report.map_nonrare, 100.0),
            col(|c| c.fps, 1.0),
            seeds
        );
        for c in &row.cells {
            match c {
                Ok(c) => {
                    let r = &c.report;
                    let _ = writeln!(
                        csv,
                        "{},{},{},{:.6},{:.6},{:.6},{:.3},ok",
                        row.table, row.label, c.seed, r.map_full, r.map_rare, r.map_nonrare, c.fps
                    );
                }
                Err(e) => {
                    let _ = writeln!(csv, "{},{},,,,,,\"failed: {}\"", row.table, row.label, e.replace('"', "'"));
                }
            }
        }
    }
    (md.trim_start().to_string(), csv)
}

type CellKey = (Variant, Routing, Option<usize>);

/// Runs the branch, routing and class-subset tables for every grid seed.
/// Cell failures are recorded in the rows instead of aborting.
pub fn run_ablation(cfg: &RunConfig, mut progress: impl FnMut(&str)) -> Result<Vec<AblationRow>> {
    let grid = &cfg.ablation;
    let n = cfg.num_classes();
    let nprimes: Vec<usize> = if grid.nprimes.is_empty() { vec![(n / 6).max(1), (n / 2).max(1), n] } else { grid.nprimes.clone() };
    let default = Routing::default();
    let mut specs: Vec<(String, String, Variant, Routing, Option<usize>)> = Vec::new();
    for &v in &grid.variants {
        specs.push(("Branches".into(), v.name().into(), v, default, None));
    }
    for r in &grid.routings {
        specs.push(("Supervision routing (union:ho)".into(), r.label(), Variant::Full, *r, None));
    }
    for &k in &nprimes {
        specs.push(("Training classes N'".into(), format!("N'={k}"), Variant::Full, default, (k < n).then_some(k)));
    }
    let mut rows: Vec<AblationRow> =
        specs.iter().map(|(t, l, ..)| AblationRow { table: t.clone(), label: l.clone(), cells: Vec::new() }).collect();
    for &seed in &grid.seeds {
        let scfg = cfg.with_seed(seed);
        progress(&format!("seed {seed}: preparing dataset and teacher"));
        let exp = match Experiment::prepare(scfg) {
            Ok(e) => e,
            Err(e) => {
                let msg = format!("seed {seed}: {e}");
                rows.iter_mut().for_each(|r| r.cells.push(Err(msg.clone())));
                continue;
            }
        };
        // cells with identical settings are trained once
        let mut done: Vec<(CellKey, std::result::Result<CellResult, String>)> = Vec::new();
        for (row, (_, label, v, r, k)) in rows.iter_mut().zip(&specs) {
            let key = (*v, *r, *k);
            let cell = match done.iter().find(|(kk, _)| *kk == key) {
                Some((_, c)) => c.clone(),
                None => {
                    progress(&format!("seed {seed}: {label}"));
                    let c = exp.run_cell(*v, *r, *k).map_err(|e| e.to_string());
                    done.push((key, c.clone()));
                    c
                }
            };
            row.cells.push(cell);
        }
    }
    Ok(rows)
}

/// Stage `ablate`: writes `ablation/table.md` and `ablation/table.csv`.
pub fn stage_ablate(cfg: &RunConfig, layout: &Layout, progress: impl FnMut(&str)) -> Result<Vec<AblationRow>> {
    let rows = run_ablation(cfg, progress)?;
    let (md, csv) = render_ablation(&rows);
    write_text(&layout.ablation().join("table.md"), &md)?;
    write_text(&layout.ablation().join("table.csv"), &csv)?;
    write_json(&layout.ablation().join("cells.json"), &rows)?;
    Ok(rows)
}

/// Record of the command, config and code version written next to each stage's outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub git_describe: String,
    pub wall_time_s: f64,
    pub config: RunConfig,
}

/// Merged summary of several output directories.
pub struct Summary {
    pub markdown: String,
    pub csv: String,
    pub skipped: Vec<PathBuf>,
}

fn flatten_json(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_json(&key, x, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

type NamedReports = Vec<(String, EvalReport)>;

/// Collects `reports/*.json` from each run directory. Reports sharing a name
/// are aggregated as mean ± half range across directories; configuration
/// keys that differ from the first run are listed per directory.
pub fn summarize(dirs: &[PathBuf]) -> Result<Summary> {
    let mut skipped = Vec::new();
    let mut found: Vec<(PathBuf, Option<RunConfig>, NamedReports)> = Vec::new();
    for dir in dirs {
        let rdir = Layout::new(dir).reports();
        let Ok(entries) = fs::read_dir(&rdir) else {
            skipped.push(dir.clone());
            continue;
        };
        let mut names: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json") && p.file_name().is_some_and(|n| n != "run.json"))
            .collect();
        names.sort();
        let mut reports = Vec::new();
        for p in names {
            let name = p.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
            reports.push((name, read_json::<EvalReport>(&p)?));
        }
        if reports.is_empty() {
            skipped.push(dir.clone());
            continue;
        }
        let config = read_json::<RunRecord>(&rdir.join("run.json")).ok().map(|r| r.config);
        found.push((dir.clone(), config, reports));
    }

    let base: Vec<(String, String)> = found
        .iter()
        .find_map(|(_, c, _)| c.as_ref())
        .map(|c| {
            let mut v = Vec::new();
            flatten_json("", &serde_json::to_value(c).expect("config serializes"), &mut v);
            v
        })
        .unwrap_or_default();
    let mut md = String::from("| Run | Report | Full | Rare | Non-Rare | Config deltas |\n|---|---|---|---|---|---|\n");
    let mut csv = String::from("run,report,map_full,map_rare,map_nonrare\n");
    let mut groups: Vec<(String, Vec<&EvalReport>)> = Vec::new();
    for (dir, cfg, reports) in &found {
        let deltas = cfg
            .as_ref()
            .map(|c| {
                let mut v = Vec::new();
                flatten_json("", &serde_json::to_value(c).expect("config serializes"), &mut v);
                v.iter()
                    .filter(|kv| !base.contains(kv))
                    .map(|(k, x)| format!("**{k}**={x}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            })
            .unwrap_or_else(|| "(no run.json)".into());
        for (name, r) in reports {
            let _ = writeln!(
                md,
                "| {} | {} | {:.2} | {:.2} | {:.2} | {} |",
                dir.display(),
                name,
                100.0 * r.map_full,
                100.0 * r.map_rare,
                100.0 * r.map_nonrare,
                deltas
            );
            let _ = writeln!(csv, "{},{},{:.6},{:.6},{:.6}", dir.display(), name, r.map_full, r.map_rare, r.map_nonrare);
            match groups.iter_mut().find(|(n, _)| n == name) {
                Some((_, g)) => g.push(r),
                None => groups.push((name.clone(), vec![r])),
            }
        }
    }
    if groups.iter().any(|(_, g)| g.len() > 1) {
        md.push_str("\n| Report | Runs | Full | Rare | Non-Rare |\n|---|---|---|---|---|\n");
        for (name, g) in &groups {
            let stat = |f: fn(&EvalReport) -> f64| fmt_stat(&g.iter().map(|r| f(r)).collect::<Vec<_>>(), 100.0);
            let _ = writeln!(
                md,
                "| {name} | {} | {} | {} | {} |",
                g.len(),
                stat(|r| r.map_full),
                stat(|r| r.map_rare),
                stat(|r| r.map_nonrare)
            );
        }
    }
    if !skipped.is_empty() {
        md.push_str("\nSkipped:\n");
        for s in &skipped {
            let _ = writeln!(md, "- {}", s.display());
        }
    }
    Ok(Summary { markdown: md, csv, skipped })
}

/// Concatenates every `students/*/loss.csv` under the run directories, with
/// the run and student prepended to each row.
pub fn merged_loss_curves(dirs: &[PathBuf]) -> String {
    let mut out = String::from("run,student,iter,L_g,L_u,L_ho,total,lr\n");
    for dir in dirs {
        let Ok(entries) = fs::read_dir(dir.join("students")) else { continue };
        let mut students: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        students.sort();
        for s in students {
            let Ok(text) = fs::read_to_string(s.join("loss.csv")) else { continue };
            let name = s.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
            for line in text.lines().skip(1) {
                let _ = writeln!(out, "{},{},{}", dir.display(), name, line);
            }
        }
    }
    out
}
