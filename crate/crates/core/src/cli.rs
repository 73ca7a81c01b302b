//! The `pulse` command line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{
    generate_synthetic_dataset, read_dataset, read_fold_dir, write_dataset, FoldArchive, Modality, SyntheticConfig,
};
use crate::error::{PulseError, Result};
use crate::mae::PhysioMae;
use crate::metrics::{binary_metrics, macro_multiclass, MetricsReport, Task};
use crate::signal::{build_loso_folds, preprocess_to_dir, process_all, WindowSpec};
use crate::train::{
    collapse_report, distill, finetune, init_seed, pretrain, run_fold, stage_seed, FeatureSpec, FoldOutcome, History,
    KdHeads, Part, PresetId, RunConfig,
};

const CKPT_EXT: &str = "ckpt";
const HEADS_FILE: &str = "heads.pheads";
const CLASSIFIER_FILE: &str = "classifier.pclf";

#[derive(Parser, Debug)]
#[command(name = "pulse", version, about = "Privileged EDA transfer for wearable stress detection")]
pub struct Cli {
    /// -v for progress, -vv for per-epoch detail
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic recording set
    Synth(SynthArgs),
    /// Resample, filter, normalise and window recordings into LOSO fold archives
    Preprocess(PreprocessArgs),
    /// Masked-autoencoder pretraining per fold
    Pretrain(PretrainArgs),
    /// Distil a frozen teacher into student encoders per fold
    Distill(DistillArgs),
    /// Train the classifier on frozen encoders per fold
    Finetune(FinetuneArgs),
    /// Run one or more presets end to end
    Run(RunArgs),
    /// Metrics for a score file
    Eval(EvalArgs),
    /// Collapse diagnostics of student encoders
    Diagnose(DiagnoseArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 6)]
    pub subjects: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.8)]
    pub coupling: f64,
    #[arg(long, default_value_t = 1200.0)]
    pub duration_s: f64,
    /// Include an amusement state (label 3)
    #[arg(long)]
    pub three_class: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 60.0)]
    pub window_s: f64,
    #[arg(long, default_value_t = 0.25)]
    pub stride_s: f64,
    #[arg(long)]
    pub std_threshold: Option<f64>,
    /// TOML with a [preprocess] table
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Where fold archives come from and how the run is configured.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// TOML run configuration, layered over the defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of fold archives
    #[arg(long, conflicts_with = "synthetic")]
    pub folds: Option<PathBuf>,
    /// Generate and preprocess synthetic data in memory (small profile unless --config says otherwise)
    #[arg(long)]
    pub synthetic: bool,
    /// Only these 1-based folds
    #[arg(long = "fold", value_delimiter = ',')]
    pub only: Vec<u32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; results do not depend on it
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Train the EDA encoder alone (reconstruction only) instead of the cheap sensors
    #[arg(long)]
    pub eda: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory of a `pretrain` run holding the teacher
    #[arg(long)]
    pub teacher: PathBuf,
    /// Output directory of a `pretrain` run holding the students
    #[arg(long)]
    pub students: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory of a `pretrain` or `distill` run
    #[arg(long)]
    pub encoders: PathBuf,
    /// Use only these encoders (default: every checkpoint found)
    #[arg(long, value_delimiter = ',')]
    pub modalities: Vec<String>,
    /// Ignore transfer heads even when the encoder directory has them
    #[arg(long)]
    pub no_heads: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// One or more of A, B, C, D, E
    #[arg(long, value_delimiter = ',', required = true, value_parser = parse_preset)]
    pub preset: Vec<PresetId>,
    /// Several seeds; overrides --seed
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Output directory (default runs/<presets>-seed<seed>)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// One row per window: a score, or one probability per class
    #[arg(long)]
    pub scores: PathBuf,
    /// One integer per line: 0/1, or the class index with --multiclass
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub multiclass: bool,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory of a `pretrain` or `distill` run
    #[arg(long)]
    pub encoders: PathBuf,
    /// Measure on test windows instead of training windows
    #[arg(long)]
    pub test: bool,
}

fn parse_preset(s: &str) -> std::result::Result<PresetId, String> {
    s.parse().map_err(|e: PulseError| match e {
        PulseError::Config(m) => m,
        other => other.to_string(),
    })
}

/// Written into every output directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub data: String,
    pub seeds: Vec<u64>,
    pub config: RunConfig,
    /// Stage name to checkpoint paths relative to the output directory.
    pub checkpoints: BTreeMap<String, Vec<String>>,
    pub timing_s: BTreeMap<String, f64>,
}

impl RunManifest {
    fn new(command: &str, data: &DataArgs, cfg: &RunConfig, seeds: Vec<u64>) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            data: match &data.folds {
                Some(p) => p.display().to_string(),
                None => "synthetic".into(),
            },
            seeds,
            config: cfg.clone(),
            checkpoints: BTreeMap::new(),
            timing_s: BTreeMap::new(),
        }
    }

    fn add(&mut self, stage: &str, out: &Path, path: &Path) {
        let rel = path.strip_prefix(out).unwrap_or(path).display().to_string();
        self.checkpoints.entry(stage.into()).or_default().push(rel);
    }

    fn write(&self, out: &Path) -> Result<()> {
        fs::write(out.join("manifest.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &PulseError) -> i32 {
    match e {
        PulseError::Config(_) => 2,
        _ => 1,
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Distill(a) => distill_cmd(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Run(a) => run_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Diagnose(a) => diagnose_cmd(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        n_subjects: a.subjects,
        duration_s: a.duration_s,
        seed: a.seed,
        coupling: a.coupling,
        three_class: a.three_class,
    };
    cfg.validate().map_err(as_config)?;
    let recs = generate_synthetic_dataset(&cfg)?;
    write_dataset(&a.out, &recs)?;
    println!("wrote {} synthetic subjects to {}", recs.len(), a.out.display());
    Ok(())
}

fn as_config(e: PulseError) -> PulseError {
    match e {
        PulseError::InvalidArgument(m) => PulseError::Config(m),
        other => other,
    }
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), false)?.preprocess;
    cfg.window = WindowSpec::from_seconds(a.window_s, a.stride_s, 64.0).map_err(as_config)?;
    if let Some(t) = a.std_threshold {
        cfg.std_threshold = t;
    }
    let recs = read_dataset(&a.input)?;
    let counts = preprocess_to_dir(&recs, &cfg, &a.out)?;
    print!("{}", fs::read_to_string(a.out.join("summary.txt"))?);
    log::info!("{} fold archives in {}", counts.len(), a.out.display());
    Ok(())
}

/// Config for `--config`, layered over the small synthetic profile when
/// `synthetic` is set and over the defaults otherwise.
fn load_config(path: Option<&Path>, synthetic: bool) -> Result<RunConfig> {
    let base = if synthetic { RunConfig::quick() } else { RunConfig::default() };
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| PulseError::Config(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::from_toml_over(&base, &text)?
        }
        None => base,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_folds(d: &DataArgs, cfg: &RunConfig) -> Result<Vec<FoldArchive>> {
    let folds = match (&d.folds, d.synthetic) {
        (Some(dir), _) => read_fold_dir(dir)?,
        (None, true) => {
            let recs = generate_synthetic_dataset(&cfg.synthetic)?;
            build_loso_folds(&process_all(&recs, &cfg.preprocess)?)?
        }
        (None, false) => return Err(PulseError::Config("give --folds DIR or --synthetic".into())),
    };
    if folds.is_empty() {
        return Err(PulseError::Config("no fold archives found".into()));
    }
    let folds: Vec<FoldArchive> = if d.only.is_empty() {
        folds
    } else {
        if let Some(k) = d.only.iter().find(|k| !folds.iter().any(|f| f.fold_id == **k)) {
            return Err(PulseError::Config(format!("fold {k} does not exist")));
        }
        folds.into_iter().filter(|f| d.only.contains(&f.fold_id)).collect()
    };
    Ok(folds)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| PulseError::InvalidArgument(e.to_string()))
}

fn fold_dir(out: &Path, fold_id: u32) -> PathBuf {
    out.join(format!("fold_{fold_id:02}"))
}

fn ckpt_path(dir: &Path, m: Modality) -> PathBuf {
    dir.join(format!("{}.{CKPT_EXT}", m.name()))
}

/// Every encoder checkpoint in `dir`, in modality order.
fn load_encoders(dir: &Path) -> Result<Vec<PhysioMae>> {
    let mut out = Vec::new();
    for m in Modality::ALL {
        let p = ckpt_path(dir, m);
        if p.exists() {
            out.push(PhysioMae::load(&p)?.0);
        }
    }
    if out.is_empty() {
        return Err(PulseError::InvalidArgument(format!("no encoder checkpoints in {}", dir.display())));
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_history(dir: &Path, name: &str, h: &History) -> Result<()> {
    write_text(&dir.join(format!("{name}.csv")), &h.to_csv())
}

fn save_encoders(dir: &Path, models: &[PhysioMae], stage: &str, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    models
        .iter()
        .map(|m| {
            let p = ckpt_path(dir, m.modality);
            m.save(&p, serde_json::json!({ "stage": stage, "seed": seed }))?;
            Ok(p)
        })
        .collect()
}

fn pretrain_cmd(a: PretrainArgs) -> Result<()> {
    let cfg = load_config(a.data.config.as_deref(), a.data.synthetic)?;
    let folds = load_folds(&a.data, &cfg)?;
    let seed = a.data.seed;
    let mods: Vec<Modality> = if a.eda { vec![Modality::Eda] } else { cfg.pretrain.modalities.clone() };
    let t0 = Instant::now();
    let results: Vec<(u32, Vec<PhysioMae>, History)> = pool(a.data.jobs)?.install(|| {
        folds
            .par_iter()
            .map(|f| {
                let mut models = mods
                    .iter()
                    .map(|&m| PhysioMae::new(cfg.model.clone(), m, init_seed(seed, m)))
                    .collect::<Result<Vec<_>>>()?;
                let h = pretrain(f, &mut models, &cfg.pretrain, stage_seed(seed, &cfg.pretrain))?;
                Ok((f.fold_id, models, h))
            })
            .collect::<Result<_>>()
    })?;
    let mut man = RunManifest::new("pretrain", &a.data, &cfg, vec![seed]);
    let name = if a.eda { "pretrain_eda" } else { "pretrain" };
    for (k, models, h) in &results {
        let dir = fold_dir(&a.out, *k);
        for p in save_encoders(&dir, models, name, seed)? {
            man.add(name, &a.out, &p);
        }
        write_history(&dir, name, h)?;
        let last = h.epochs.last().and_then(|e| e.loss_rec);
        println!("fold {k}: {} epochs, final rec {}", h.epochs.len(), fmt_opt(last));
    }
    man.timing_s.insert(name.into(), t0.elapsed().as_secs_f64());
    man.write(&a.out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.5}"))
}

fn distill_cmd(a: DistillArgs) -> Result<()> {
    let cfg = load_config(a.data.config.as_deref(), a.data.synthetic)?;
    let folds = load_folds(&a.data, &cfg)?;
    let seed = a.data.seed;
    let t0 = Instant::now();
    let results = pool(a.data.jobs)?.install(|| {
        folds
            .par_iter()
            .map(|f| {
                let tdir = fold_dir(&a.teacher, f.fold_id);
                let teacher = PhysioMae::load(&ckpt_path(&tdir, cfg.distill.teacher))
                    .map_err(|e| PulseError::InvalidArgument(format!("teacher for fold {}: {e}", f.fold_id)))?
                    .0;
                let mut students: Vec<PhysioMae> = load_encoders(&fold_dir(&a.students, f.fold_id))?
                    .into_iter()
                    .filter(|m| m.modality != cfg.distill.teacher && !m.private_only)
                    .collect();
                if students.is_empty() {
                    return Err(PulseError::InvalidArgument(format!("fold {} has no student encoders", f.fold_id)));
                }
                let out = distill(f, &teacher, &mut students, &cfg.distill, stage_seed(seed, &cfg.distill))?;
                Ok((f.fold_id, students, out))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut man = RunManifest::new("distill", &a.data, &cfg, vec![seed]);
    for (k, students, out) in &results {
        let dir = fold_dir(&a.out, *k);
        for p in save_encoders(&dir, students, "distill", seed)? {
            man.add("distill", &a.out, &p);
        }
        let hp = dir.join(HEADS_FILE);
        out.heads.save(&hp)?;
        man.add("distill", &a.out, &hp);
        write_history(&dir, "distill", &out.history)?;
        write_text(&dir.join("collapse.csv"), &collapse_csv(*k, &out.collapse))?;
        let summary: Vec<String> = out
            .collapse
            .iter()
            .map(|c| format!("{} cos {:.3} var {:.2e}", c.modality, c.mean_pairwise_cosine, c.mean_feature_variance))
            .collect();
        println!("fold {k}: {}", summary.join(", "));
    }
    man.timing_s.insert("distill".into(), t0.elapsed().as_secs_f64());
    man.write(&a.out)
}

fn collapse_csv(fold: u32, entries: &[crate::metrics::CollapseEntry]) -> String {
    let mut s = String::from("fold,modality,mean_pairwise_cosine,mean_feature_variance,excluded_pairs\n");
    for c in entries {
        let _ = writeln!(
            s,
            "{fold},{},{:.10},{:.10e},{}",
            c.modality, c.mean_pairwise_cosine, c.mean_feature_variance, c.excluded_pairs
        );
    }
    s
}

fn scores_csv(fold: &FoldArchive, scores: &[f64], task: Task) -> String {
    let k = match task {
        Task::Binary => 1,
        Task::ThreeClass => 3,
    };
    let mut s = String::from("window,label");
    for c in 0..k {
        let _ = write!(s, ",score{c}");
    }
    s.push('\n');
    for (i, row) in scores.chunks(k).enumerate() {
        let _ = write!(s, "{i},{}", fold.l_test[i]);
        for v in row {
            let _ = write!(s, ",{v:.10}");
        }
        s.push('\n');
    }
    s
}

fn finetune_cmd(a: FinetuneArgs) -> Result<()> {
    let cfg = load_config(a.data.config.as_deref(), a.data.synthetic)?;
    let folds = load_folds(&a.data, &cfg)?;
    let seed = a.data.seed;
    let wanted = a
        .modalities
        .iter()
        .map(|s| Modality::from_name(s).ok_or_else(|| PulseError::Config(format!("unknown modality `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    let t0 = Instant::now();
    let results = pool(a.data.jobs)?.install(|| {
        folds
            .par_iter()
            .map(|f| {
                let dir = fold_dir(&a.encoders, f.fold_id);
                let models: Vec<PhysioMae> = load_encoders(&dir)?
                    .into_iter()
                    .filter(|m| wanted.is_empty() || wanted.contains(&m.modality))
                    .collect();
                if models.is_empty() {
                    return Err(PulseError::Config("no encoder matches --modalities".into()));
                }
                let hp = dir.join(HEADS_FILE);
                let heads = if hp.exists() && !a.no_heads { Some(KdHeads::load(&hp)?) } else { None };
                let ft_seed = stage_seed(seed, &cfg.finetune);
                let spec = FeatureSpec::new(models.iter().collect(), heads.as_ref(), cfg.finetune.fusion, ft_seed)?;
                let out = finetune(f, &spec, &cfg.finetune, cfg.task, ft_seed)?;
                Ok((f, out))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut man = RunManifest::new("finetune", &a.data, &cfg, vec![seed]);
    let mut report = MetricsReport {
        name: "finetune".into(),
        task: cfg.task,
        folds: Vec::new(),
    };
    for (f, out) in &results {
        let dir = fold_dir(&a.out, f.fold_id);
        fs::create_dir_all(&dir)?;
        let cp = dir.join(CLASSIFIER_FILE);
        out.classifier.save(&cp)?;
        man.add("finetune", &a.out, &cp);
        write_history(&dir, "finetune", &out.history)?;
        write_text(&dir.join("scores.csv"), &scores_csv(f, &out.test_scores, cfg.task))?;
        report.folds.push(crate::metrics::FoldMetrics {
            fold: f.fold_id,
            subject: f.subjects[f.test_subject].clone(),
            metrics: out.test_metrics.clone(),
        });
    }
    man.timing_s.insert("finetune".into(), t0.elapsed().as_secs_f64());
    write_text(&a.out.join("metrics.csv"), &report.to_csv())?;
    write_text(&a.out.join("metrics.txt"), &report.to_text())?;
    print!("{}", report.to_text());
    man.write(&a.out)
}

fn run_cmd(a: RunArgs) -> Result<()> {
    let cfg = load_config(a.data.config.as_deref(), a.data.synthetic)?;
    let seeds = if a.seeds.is_empty() { vec![a.data.seed] } else { a.seeds.clone() };
    let mut presets = a.preset.clone();
    presets.sort();
    presets.dedup();
    let out = a.out.clone().unwrap_or_else(|| {
        let names: String = presets.iter().map(|p| p.to_string()).collect();
        PathBuf::from("runs").join(format!("{names}-seed{}", seeds[0]))
    });
    let t0 = Instant::now();
    let folds = load_folds(&a.data, &cfg)?;
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let jobs: Vec<(usize, u64)> = seeds.iter().flat_map(|&s| (0..folds.len()).map(move |f| (f, s))).collect();
    let done: Vec<(Vec<FoldOutcome>, f64)> = pool(a.data.jobs)?.install(|| {
        jobs.par_iter()
            .map(|&(f, s)| {
                let t = Instant::now();
                let r = run_fold(&presets, &folds[f], &cfg, s)?;
                log::info!("fold {} seed {s} done in {:.1}s", folds[f].fold_id, t.elapsed().as_secs_f64());
                Ok((r, t.elapsed().as_secs_f64()))
            })
            .collect::<Result<_>>()
    })?;

    let mut man = RunManifest::new("run", &a.data, &cfg, seeds.clone());
    let mut csv = String::new();
    let mut text = String::new();
    for (outcomes, secs) in &done {
        for o in outcomes {
            let fold = folds.iter().find(|f| f.fold_id == o.metrics.fold).expect("outcome fold");
            let dir = out.join(o.preset.to_string()).join(format!("seed{}", o.seed)).join(format!("fold_{:02}", fold.fold_id));
            let stage = format!("{}/seed{}", o.preset, o.seed);
            for p in save_encoders(&dir, &o.models, "encoder", o.seed)? {
                man.add(&stage, &out, &p);
            }
            if let Some(h) = &o.heads {
                let hp = dir.join(HEADS_FILE);
                h.save(&hp)?;
                man.add(&stage, &out, &hp);
            }
            let cp = dir.join(CLASSIFIER_FILE);
            o.classifier.save(&cp)?;
            man.add(&stage, &out, &cp);
            for (name, h) in &o.histories {
                write_history(&dir, name, h)?;
            }
            if !o.collapse.is_empty() {
                write_text(&dir.join("collapse.csv"), &collapse_csv(fold.fold_id, &o.collapse))?;
            }
            write_text(&dir.join("scores.csv"), &scores_csv(fold, &o.test_scores, cfg.task))?;
        }
        let (f, s) = (outcomes[0].metrics.fold, outcomes[0].seed);
        man.timing_s.insert(format!("fold_{f:02}/seed{s}"), *secs);
    }
    for &p in &presets {
        let mut per_seed = Vec::new();
        for &s in &seeds {
            let mut folds_m: Vec<_> = done
                .iter()
                .flat_map(|(o, _)| o)
                .filter(|o| o.preset == p && o.seed == s)
                .map(|o| o.metrics.clone())
                .collect();
            folds_m.sort_by_key(|m| m.fold);
            let r = MetricsReport {
                name: format!("{p}/seed{s}"),
                task: cfg.task,
                folds: folds_m,
            };
            r.validate()?;
            let body = r.to_csv();
            if csv.is_empty() {
                csv.push_str(&body);
            } else {
                csv.push_str(body.split_once('\n').map_or("", |x| x.1));
            }
            text.push_str(&r.to_text());
            per_seed.push(r.auroc().0);
        }
        if seeds.len() > 1 {
            let (m, sd) = crate::metrics::mean_sd(&per_seed);
            let _ = writeln!(text, "{p} AUROC over {} seeds: {m:.4} ± {sd:.4}", seeds.len());
        }
    }
    fs::write(out.join("metrics.csv"), &csv)?;
    fs::write(out.join("metrics.txt"), &text)?;
    man.timing_s.insert("total".into(), t0.elapsed().as_secs_f64());
    man.write(&out)?;
    print!("{text}");
    println!("outputs in {}", out.display());
    Ok(())
}

fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| PulseError::Format(format!("{}:{}: `{t}` is not a number", path.display(), i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// `auroc,auprc,accuracy,threshold` header plus one row.
pub fn eval_files(scores: &Path, labels: &Path, multiclass: bool, threshold: f64) -> Result<String> {
    let s = read_rows(scores)?;
    let l: Vec<f64> = read_rows(labels)?.into_iter().flatten().collect();
    if s.len() != l.len() {
        return Err(PulseError::Shape(format!("{} score rows but {} labels", s.len(), l.len())));
    }
    let as_class = |v: f64| -> Result<usize> {
        if v >= 0.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(PulseError::Format(format!("label {v} is not a class index")))
        }
    };
    let m = if multiclass {
        let k = s.first().map_or(0, Vec::len);
        if s.iter().any(|r| r.len() != k) || k < 2 {
            return Err(PulseError::Shape("multiclass scores need the same k ≥ 2 columns on every row".into()));
        }
        let classes = l.iter().map(|&v| as_class(v)).collect::<Result<Vec<_>>>()?;
        let flat: Vec<f64> = s.into_iter().flatten().collect();
        macro_multiclass(&flat, &classes, k)?
    } else {
        if s.iter().any(|r| r.len() != 1) {
            return Err(PulseError::Shape("binary scores need one column (use --multiclass)".into()));
        }
        let pos = l
            .iter()
            .map(|&v| match as_class(v)? {
                0 => Ok(false),
                1 => Ok(true),
                c => Err(PulseError::Format(format!("binary label {c} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let flat: Vec<f64> = s.into_iter().flatten().collect();
        binary_metrics(&flat, &pos, threshold)?
    };
    Ok(format!(
        "auroc,auprc,accuracy,threshold\n{:.10},{:.10},{:.10},{}\n",
        m.auroc, m.auprc, m.accuracy, m.threshold
    ))
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    print!("{}", eval_files(&a.scores, &a.labels, a.multiclass, a.threshold)?);
    Ok(())
}

fn diagnose_cmd(a: DiagnoseArgs) -> Result<()> {
    let cfg = load_config(a.data.config.as_deref(), a.data.synthetic)?;
    let folds = load_folds(&a.data, &cfg)?;
    let part = if a.test { Part::Test } else { Part::Train };
    let mut out = String::new();
    for f in &folds {
        let dir = fold_dir(&a.encoders, f.fold_id);
        let students: Vec<PhysioMae> = load_encoders(&dir)?.into_iter().filter(|m| !m.private_only).collect();
        if students.is_empty() {
            return Err(PulseError::InvalidArgument(format!("no shared-token encoders in {}", dir.display())));
        }
        let hp = dir.join(HEADS_FILE);
        let heads = if hp.exists() { Some(KdHeads::load(&hp)?) } else { None };
        let n = match part {
            Part::Train => f.n_train(),
            Part::Test => f.n_test(),
        };
        let idx: Vec<usize> = (0..n).collect();
        let rep = collapse_report(f, part, &students, heads.as_ref(), &idx, a.data.seed)?;
        let body = collapse_csv(f.fold_id, &rep);
        if out.is_empty() {
            out.push_str(&body);
        } else {
            out.push_str(body.split_once('\n').map_or("", |x| x.1));
        }
    }
    print!("{out}");
    Ok(())
}
