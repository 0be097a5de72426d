//! Command implementations behind the `tqdm-mini` binary.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use tqdm_core::autograd::sigmoid;
use tqdm_core::config::{Matching, PromptMode, RunConfig};
use tqdm_core::evalkit::{coherence_map, pr_curve, similarity_map, threshold_grid, ApRule};
use tqdm_core::labels::IGNORE_LABEL;
use tqdm_core::model::Model;
use tqdm_core::synthdata::{write_benchmark, DomainStyle};
use tqdm_core::train::{evaluate_domain, split_scenes, Checkpoint, DomainEval, Trainer, TrainOutputs, TrainSummary};

pub const THREADS_ENV: &str = "TQDM_MINI_THREADS";

#[derive(Parser, Debug)]
#[command(name = "tqdm-mini", version, about = "Desk-scale textual query-driven mask transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON run configuration with flat keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the run seed (the data seed for gen-data).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Start from the reduced preset instead of the defaults.
    #[arg(long)]
    pub small: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic benchmark and its manifest.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the source domain; writes metrics, checkpoints and a summary.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// mIoU and per-class IoU on the listed domains.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "source,hue_shift,texture_noise,sketch")]
        domains: Vec<String>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export similarity maps, coherence maps or PR curves as CSV.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        kind: AnalysisKind,
        #[arg(long, default_value = "source")]
        domain: String,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value_t = 0)]
        image: usize,
        /// Anchor pixel `y,x` on the embedding grid (coherence only).
        #[arg(long, value_delimiter = ',')]
        anchor: Option<Vec<usize>>,
        /// Domain of the compared image (coherence only); defaults to `--domain`.
        #[arg(long)]
        target_domain: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every variant of the toggle grid for several seeds and tabulate.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', value_enum)]
        variants: Option<Vec<Variant>>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AnalysisKind {
    Simmap,
    Coherence,
    Pr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    RandomQueries,
    NoTextToPixel,
    NoLangReg,
    NoVlReg,
    NoVReg,
    NoRegs,
    Bipartite,
    FixedPrompt,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::RandomQueries,
        Variant::NoTextToPixel,
        Variant::NoLangReg,
        Variant::NoVlReg,
        Variant::NoVReg,
        Variant::NoRegs,
        Variant::Bipartite,
        Variant::FixedPrompt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::RandomQueries => "random_queries",
            Variant::NoTextToPixel => "no_text_to_pixel",
            Variant::NoLangReg => "no_lang_reg",
            Variant::NoVlReg => "no_vl_reg",
            Variant::NoVReg => "no_v_reg",
            Variant::NoRegs => "no_regs",
            Variant::Bipartite => "bipartite",
            Variant::FixedPrompt => "fixed_prompt",
        }
    }

    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::RandomQueries => c.use_textual_queries = false,
            Variant::NoTextToPixel => c.use_text_to_pixel = false,
            Variant::NoLangReg => c.lang_reg = false,
            Variant::NoVlReg => c.vl_reg = false,
            Variant::NoVReg => c.v_reg = false,
            Variant::NoRegs => {
                c.lang_reg = false;
                c.vl_reg = false;
                c.v_reg = false;
            }
            Variant::Bipartite => c.matching = Matching::Bipartite,
            Variant::FixedPrompt => c.prompt = PromptMode::FixedTemplate,
        }
        c
    }
}

/// File, then `--set` overrides, then `--seed`.
pub fn resolve_config(args: &ConfigArgs, seed_is_data_seed: bool) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::read(p).with_context(|| format!("reading config {}", p.display()))?,
        None if args.small => RunConfig::small(),
        None => RunConfig::default(),
    };
    cfg = cfg.with_overrides(&args.overrides)?;
    if let Some(seed) = args.seed {
        if seed_is_data_seed {
            cfg.data_seed = seed;
        } else {
            cfg.seed = seed;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(csv::Writer::from_path(path)?)
}

fn parse_domain(name: &str) -> Result<DomainStyle> {
    name.parse().map_err(|e| anyhow::anyhow!("{e}"))
}

/// Worker threads for parallel runs, from the environment (default 1).
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

#[derive(Serialize)]
struct GenDataReport<'a> {
    config: &'a RunConfig,
    config_hash: String,
    scenes: usize,
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<usize> {
    let entries = write_benchmark(out, &cfg.splits())?;
    write_json(
        &out.join("config.json"),
        &GenDataReport {
            config: cfg,
            config_hash: cfg.hash(),
            scenes: entries.len(),
        },
    )?;
    Ok(entries.len())
}

#[derive(Serialize)]
struct TrainReport<'a> {
    config: &'a RunConfig,
    config_hash: String,
    summary: &'a TrainSummary,
}

pub fn train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    let mut trainer = match resume {
        Some(p) => Trainer::<f64>::resume(p)?,
        None => Trainer::<f64>::new(cfg)?,
    };
    let cfg = trainer.config().clone();
    let outputs = TrainOutputs {
        metrics: Some(out.join("metrics.jsonl")),
        checkpoints: Some(out.join("checkpoints")),
        dumps: Some(out.join("dumps")),
    };
    let summary = trainer.run(&outputs)?;
    write_json(
        &out.join("summary.json"),
        &TrainReport {
            config: &cfg,
            config_hash: cfg.hash(),
            summary: &summary,
        },
    )?;
    Ok(summary)
}

fn load_model(path: &Path) -> Result<Model<f64>> {
    Ok(Checkpoint::<f64>::read(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .model)
}

/// Writes `miou.csv`, `per_class_iou.csv` and `eval.json` under `out`.
pub fn eval(checkpoint: &Path, domains: &[String], split: &str, out: &Path) -> Result<Vec<DomainEval>> {
    let model = load_model(checkpoint)?;
    let cfg = model.config();
    let results = domains
        .iter()
        .map(|d| Ok(evaluate_domain(&model, split, parse_domain(d)?)?))
        .collect::<Result<Vec<_>>>()?;
    let hash = cfg.hash();
    let mut table = csv_writer(&out.join("miou.csv"))?;
    table.write_record(["domain", "split", "miou", "pixels", "config_hash"])?;
    for r in &results {
        table.write_record([r.domain.clone(), r.split.clone(), format!("{:.6}", r.miou), r.pixels.to_string(), hash.clone()])?;
    }
    table.flush()?;
    let names = tqdm_core::text_query::ClassVocabulary::synthetic(cfg.num_classes)?;
    let mut per_class = csv_writer(&out.join("per_class_iou.csv"))?;
    per_class.write_record(["domain", "class", "name", "iou"])?;
    for r in &results {
        for (c, iou) in r.per_class.iter().enumerate() {
            let v = iou.map_or_else(String::new, |v| format!("{v:.6}"));
            per_class.write_record([r.domain.clone(), c.to_string(), names.names()[c].clone(), v])?;
        }
    }
    per_class.flush()?;
    write_json(
        &out.join("eval.json"),
        &serde_json::json!({ "config": cfg, "config_hash": hash, "results": results }),
    )?;
    Ok(results)
}

#[derive(Clone, Debug)]
pub struct AnalyzeRequest {
    pub kind: AnalysisKind,
    pub domain: String,
    pub split: String,
    pub image: usize,
    pub anchor: Option<(usize, usize)>,
    pub target_domain: Option<String>,
}

/// Writes the CSV for one analysis kind and returns its path.
pub fn analyze(checkpoint: &Path, req: &AnalyzeRequest, out: &Path) -> Result<PathBuf> {
    let model = load_model(checkpoint)?;
    let cfg = model.config().clone();
    let scenes = split_scenes(&cfg, &req.split, parse_domain(&req.domain)?)?;
    let scene = scenes
        .get(req.image)
        .with_context(|| format!("image index {} outside the {}-scene split", req.image, scenes.len()))?;
    let image = scene.image.cast::<f64>();
    fs::create_dir_all(out)?;
    write_json(&out.join("analysis_config.json"), &serde_json::json!({ "config": cfg, "config_hash": cfg.hash() }))?;
    match req.kind {
        AnalysisKind::Simmap => {
            let (visual, grid, text) = match &model {
                Model::Tqdm(m) => {
                    let a = m.analyze(&image)?;
                    (a.visual, a.patch_grid, a.text)
                }
                Model::Baseline(m) => {
                    let x = m.backbone.encode_image(&m.store, &image)?.x;
                    (x, cfg.backbone().patch_grid(), m.query_values())
                }
            };
            let map = similarity_map(&visual, grid, &text, (image.height(), image.width()))?;
            let path = out.join("simmap.csv");
            let mut w = csv_writer(&path)?;
            w.write_record(["class", "y", "x", "value", "label"])?;
            for (c, values) in map.values.iter().enumerate() {
                for (i, v) in values.iter().enumerate() {
                    let (y, x) = (i / map.width, i % map.width);
                    w.write_record([c.to_string(), y.to_string(), x.to_string(), format!("{v:.6}"), scene.labels.labels[i].to_string()])?;
                }
            }
            w.flush()?;
            Ok(path)
        }
        AnalysisKind::Coherence => {
            let Model::Tqdm(m) = &model else {
                bail!("coherence maps need a checkpoint of the full model");
            };
            let source = m.analyze(&image)?;
            let target = match &req.target_domain {
                Some(d) => {
                    let other = split_scenes(&cfg, &req.split, parse_domain(d)?)?;
                    m.analyze(&other[req.image].image.cast())?
                }
                None => source.clone(),
            };
            let last = source.stages.len() - 1;
            let (h, w) = (source.stages[0].height, source.stages[0].width);
            let anchor = req.anchor.unwrap_or((h / 2, w / 2));
            let path = out.join("coherence.csv");
            let mut wr = csv_writer(&path)?;
            wr.write_record(["stage", "anchor_y", "anchor_x", "y", "x", "cosine"])?;
            for stage in [0, last] {
                let map = coherence_map(&source.stages[stage], anchor, &target.stages[stage])?;
                for (i, v) in map.iter().enumerate() {
                    wr.write_record([
                        stage.to_string(),
                        anchor.0.to_string(),
                        anchor.1.to_string(),
                        (i / w).to_string(),
                        (i % w).to_string(),
                        format!("{v:.9}"),
                    ])?;
                }
            }
            wr.flush()?;
            Ok(path)
        }
        AnalysisKind::Pr => {
            let Model::Tqdm(m) = &model else {
                bail!("region proposals need a checkpoint of the full model");
            };
            let a = m.analyze(&image)?;
            let z = a.stages.last().expect("at least the input stage");
            let logits = z.values.matmul_nt(&a.initial_queries);
            let labels = scene.labels.resize_nearest(z.height, z.width);
            let valid: Vec<usize> = (0..labels.labels.len()).filter(|&i| labels.labels[i] != IGNORE_LABEL).collect();
            let thresholds = threshold_grid(101);
            let path = out.join("pr.csv");
            let mut w = csv_writer(&path)?;
            w.write_record(["class", "threshold", "precision", "recall", "ap"])?;
            for c in 0..cfg.num_classes {
                let scores: Vec<f64> = valid.iter().map(|&i| sigmoid(logits.get(i, c))).collect();
                let gt: Vec<bool> = valid.iter().map(|&i| labels.labels[i] as usize == c).collect();
                let Some(curve) = pr_curve(&scores, &gt, &thresholds, ApRule::Trapezoid)? else {
                    continue;
                };
                for p in &curve.points {
                    w.write_record([
                        c.to_string(),
                        format!("{:.2}", p.threshold),
                        format!("{:.6}", p.precision),
                        format!("{:.6}", p.recall),
                        format!("{:.6}", curve.ap),
                    ])?;
                }
            }
            w.flush()?;
            Ok(path)
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: &'static str,
    pub seed: u64,
    pub config_hash: String,
    pub checkpoint_sha256: String,
    pub source_val: f64,
    pub hue_shift: f64,
    pub texture_noise: f64,
    pub sketch: f64,
    pub shifted_mean: f64,
}

fn ablation_run(base: &RunConfig, variant: Variant, seed: u64, out: &Path) -> Result<AblationRow> {
    let cfg = RunConfig { seed, ..variant.apply(base) };
    let dir = out.join("runs").join(format!("{}_s{seed}", variant.name()));
    let summary = train(&cfg, &dir, None)?;
    let ckpt = summary.final_checkpoint.context("training wrote no checkpoint")?;
    let bytes = fs::read(&ckpt)?;
    let model = Checkpoint::<f64>::from_bytes(&bytes)?.model;
    let source = evaluate_domain(&model, "val", DomainStyle::Source)?.miou;
    let shifted: Vec<f64> = DomainStyle::targets()
        .into_iter()
        .map(|d| Ok(evaluate_domain(&model, "test", d)?.miou))
        .collect::<Result<_>>()?;
    Ok(AblationRow {
        variant: variant.name(),
        seed,
        config_hash: cfg.hash(),
        checkpoint_sha256: hex::encode(Sha256::digest(&bytes)),
        source_val: source,
        hue_shift: shifted[0],
        texture_noise: shifted[1],
        sketch: shifted[2],
        shifted_mean: shifted.iter().sum::<f64>() / 3.0,
    })
}

/// Runs `variants x seeds` trainings (seeds `base.seed..base.seed + seeds`) and writes `ablation.csv`.
pub fn ablate(base: &RunConfig, variants: &[Variant], seeds: u64, out: &Path) -> Result<Vec<AblationRow>> {
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| (0..seeds).map(move |s| (v, base.seed + s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(worker_threads()).build()?;
    let rows = pool.install(|| {
        jobs.par_iter()
            .map(|&(v, s)| ablation_run(base, v, s, out))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut w = csv_writer(&out.join("ablation.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    write_json(&out.join("ablation_config.json"), &serde_json::json!({ "config": base, "config_hash": base.hash() }))?;
    Ok(rows)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = resolve_config(&config, true)?;
            let n = gen_data(&cfg, &out)?;
            println!("wrote {n} scenes to {}", out.display());
        }
        Command::Train { config, out, resume } => {
            let cfg = resolve_config(&config, false)?;
            let s = train(&cfg, &out, resume.as_deref())?;
            println!(
                "trained {} steps, total loss {:.4} -> {:.4}; checkpoint {}",
                s.steps,
                s.first_total,
                s.last_total,
                s.final_checkpoint.map(|p| p.display().to_string()).unwrap_or_default()
            );
        }
        Command::Eval { checkpoint, domains, split, out } => {
            for r in eval(&checkpoint, &domains, &split, &out)? {
                println!("{:<14} {:<5} mIoU {:.4}", r.domain, r.split, r.miou);
            }
        }
        Command::Analyze { checkpoint, kind, domain, split, image, anchor, target_domain, out } => {
            let anchor = match anchor.as_deref() {
                None => None,
                Some([y, x]) => Some((*y, *x)),
                Some(_) => bail!("--anchor takes y,x"),
            };
            let req = AnalyzeRequest { kind, domain, split, image, anchor, target_domain };
            println!("{}", analyze(&checkpoint, &req, &out)?.display());
        }
        Command::Ablate { config, variants, seeds, out } => {
            let cfg = resolve_config(&config, false)?;
            let variants = variants.unwrap_or_else(|| Variant::ALL.to_vec());
            for r in ablate(&cfg, &variants, seeds, &out)? {
                println!("{:<18} seed {} shifted mIoU {:.4}", r.variant, r.seed, r.shifted_mean);
            }
        }
    }
    Ok(())
}
