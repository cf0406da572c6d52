//! `hoikd`: batch pipeline for distilling an HOI detector from a teacher.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use hoikd::branches::Variant;
use hoikd::distill::{Routing, Supervision};
use hoikd::pipeline::{self, Layout, RunConfig, RunRecord};
use hoikd::tensorcore::TensorError;
use hoikd::Error;

#[derive(Parser)]
#[command(name = "hoikd", version, about = "Zero-shot HOI detection by multi-level distillation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration (defaults are used for missing keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory shared by all stages.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single worker thread.
    #[arg(long, global = true)]
    serial: bool,
    /// full, baseline, early, ho_union, ho_global, tf or tfstar.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Per-branch supervision, e.g. `union=u,ho=g+u` (values g, u, g+u).
    #[arg(long, global = true)]
    routing: Option<String>,
    /// Train on a random subset of this many classes.
    #[arg(long, global = true)]
    nprime: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as JSON.
    Config,
    /// Render the synthetic dataset.
    SynthGen,
    /// Pretrain the teacher on its own labeled corpus.
    TeacherPretrain,
    /// Cache teacher distributions for every image and pair.
    Supervise,
    /// Train a student.
    Train,
    /// Write test-split detections.
    Infer,
    /// Score detections. Explicit files override the run layout.
    Eval {
        #[arg(long, requires_all = ["gt", "labels"])]
        detections: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Every stage from synth-gen to eval.
    Pipeline,
    /// Branch, routing and class-subset ablation tables.
    Ablate,
    /// Merge reports from several run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn parse_routing(s: &str, base: Routing) -> Result<Routing, Error> {
    let mut r = base;
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (branch, value) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("routing entry {part:?} should be <branch>=<g|u|g+u>")))?;
        let v: Supervision = value.parse()?;
        match branch {
            "global" => r.global_branch = v,
            "union" => r.union_branch = v,
            "ho" => r.ho_branch = v,
            _ => return Err(Error::Config(format!("unknown branch {branch:?} (global, union, ho)"))),
        }
    }
    r.validate()?;
    Ok(r)
}

fn load_config(c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| Error::Io { path: p.clone(), source })?;
            RunConfig::from_json(&text, p)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(v) = &c.variant {
        cfg.train.variant = Variant::parse(v)?;
    }
    if let Some(r) = &c.routing {
        cfg.train.routing = parse_routing(r, cfg.train.routing)?;
    }
    if let Some(k) = c.nprime {
        cfg.train.nprime = Some(k);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn record(dir: &Path, command: &str, cfg: &RunConfig, started: Instant) -> Result<(), Error> {
    let rec = RunRecord {
        command: command.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        git_describe: git_describe(),
        wall_time_s: started.elapsed().as_secs_f64(),
        config: cfg.clone(),
    };
    pipeline::write_json(&dir.join("run.json"), &rec)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.common.serial {
        rayon::ThreadPoolBuilder::new().num_threads(1).build_global().context("configuring the thread pool")?;
    }
    let cfg = load_config(&cli.common)?;
    let layout = Layout::new(&cli.common.out);
    let t0 = Instant::now();
    match cli.command {
        Command::Config => println!("{}", serde_json::to_string_pretty(&cfg)?),
        Command::SynthGen => synth_gen(&cfg, &layout, t0)?,
        Command::TeacherPretrain => teacher_pretrain(&cfg, &layout, t0)?,
        Command::Supervise => supervise(&cfg, &layout, t0)?,
        Command::Train => train(&cfg, &layout, t0)?,
        Command::Infer => infer(&cfg, &layout, t0)?,
        Command::Eval { detections, gt, labels } => match (detections, gt, labels) {
            (Some(d), Some(g), Some(l)) => {
                let report = pipeline::eval_files(&d, &g, &l, cfg.rare_threshold, cfg.ap_mode)?;
                println!("{}", serde_json::to_string_pretty(&report)?);
            }
            _ => eval(&cfg, &layout, t0)?,
        },
        Command::Pipeline => {
            synth_gen(&cfg, &layout, t0)?;
            teacher_pretrain(&cfg, &layout, Instant::now())?;
            supervise(&cfg, &layout, Instant::now())?;
            if !cfg.train.variant.training_free() {
                train(&cfg, &layout, Instant::now())?;
            }
            infer(&cfg, &layout, Instant::now())?;
            eval(&cfg, &layout, Instant::now())?;
        }
        Command::Ablate => {
            let rows = pipeline::stage_ablate(&cfg, &layout, |msg| eprintln!("[ablate] {msg}"))?;
            record(&layout.ablation(), "ablate", &cfg, t0)?;
            let (md, _) = pipeline::render_ablation(&rows);
            println!("{md}");
        }
        Command::Report { runs } => {
            let s = pipeline::summarize(&runs)?;
            let dir = layout.root.join("summary");
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            fs::write(dir.join("summary.md"), &s.markdown)?;
            fs::write(dir.join("summary.csv"), &s.csv)?;
            fs::write(dir.join("loss_curves.csv"), pipeline::merged_loss_curves(&runs))?;
            println!("{}", s.markdown);
        }
    }
    Ok(())
}

fn synth_gen(cfg: &RunConfig, layout: &Layout, t0: Instant) -> anyhow::Result<()> {
    let d = pipeline::stage_synth_gen(cfg, layout)?;
    record(&layout.data(), "synth-gen", cfg, t0)?;
    eprintln!("synth-gen: {} train / {} test images in {}", d.train.len(), d.test.len(), layout.data().display());
    Ok(())
}

fn teacher_pretrain(cfg: &RunConfig, layout: &Layout, t0: Instant) -> anyhow::Result<()> {
    let r = pipeline::stage_teacher_pretrain(cfg, layout)?;
    record(&layout.teacher(), "teacher-pretrain", cfg, t0)?;
    eprintln!(
        "teacher-pretrain: held-out top-1 {:.3} (gate {:.2}{})",
        r.heldout_top1,
        cfg.pretrain.gate,
        if r.passed_gate { "" } else { ", NOT met: downstream results are invalid" }
    );
    Ok(())
}

fn supervise(cfg: &RunConfig, layout: &Layout, t0: Instant) -> anyhow::Result<()> {
    let n = pipeline::stage_supervise(cfg, layout)?;
    record(&layout.root.join("supervision"), "supervise", cfg, t0)?;
    eprintln!("supervise: {n} teacher vectors cached");
    Ok(())
}

fn train(cfg: &RunConfig, layout: &Layout, t0: Instant) -> anyhow::Result<()> {
    let (name, run) = pipeline::stage_train(cfg, layout)?;
    record(&layout.student(&name), "train", cfg, t0)?;
    let (a, b) = hoikd::distill::curve_endpoints(&run.curve, 50);
    eprintln!("train: {name}, loss {a:.4} -> {b:.4}");
    Ok(())
}

fn infer(cfg: &RunConfig, layout: &Layout, t0: Instant) -> anyhow::Result<()> {
    let (name, dets) = pipeline::stage_infer(cfg, layout)?;
    record(&layout.root.join("detections"), "infer", cfg, t0)?;
    let n: usize = dets.iter().map(|d| d.detections.len()).sum();
    eprintln!("infer: {name}, {n} detections");
    Ok(())
}

fn eval(cfg: &RunConfig, layout: &Layout, t0: Instant) -> anyhow::Result<()> {
    let (name, report) = pipeline::stage_eval(cfg, layout)?;
    record(&layout.reports(), "eval", cfg, t0)?;
    print!("{}", report.markdown(&name));
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::MissingInput { .. }) | Some(Error::Cache(_)) => 3,
        Some(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 3,
        Some(Error::Numeric(_)) | Some(Error::Tensor(TensorError::NonFinite { .. })) => 4,
        Some(
            Error::Config(_) | Error::Json { .. } | Error::Token(_) | Error::UnknownHoi(_) | Error::Box(_) | Error::Resolution { .. },
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
