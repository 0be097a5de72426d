//! Seeded training loop, metrics log, checkpoints and domain evaluation.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalkit::ConfusionMatrix;
use crate::losses::LossReport;
use crate::model::{Model, Sample};
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::params::ParamGroup;
use crate::scalar::Scalar;
use crate::synthdata::{augment, generate_split, write_ppm, DomainStyle, LabeledScene};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 8] = b"TQDMCKP1";

pub fn to_sample<T: Scalar>(scene: &LabeledScene) -> Sample<T> {
    Sample {
        image: scene.image.cast(),
        labels: scene.labels.clone(),
    }
}

/// One source scene drawn for a step and the seed of its augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchItem {
    pub index: usize,
    pub scene_seed: u64,
    pub augment_seed: u64,
}

/// Batch composition depends only on the run seed and the step number.
pub fn batch_plan(cfg: &RunConfig, scenes: &[LabeledScene], step: usize) -> Vec<BatchItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    rng.set_stream(step as u64);
    (0..cfg.batch_size)
        .map(|_| {
            let index = rng.random_range(0..scenes.len());
            BatchItem {
                index,
                scene_seed: scenes[index].seed,
                augment_seed: rng.random(),
            }
        })
        .collect()
}

/// Per-step line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub loss: LossReport,
    pub matching_checks: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// JSON-lines metrics log.
    pub metrics: Option<PathBuf>,
    /// Directory for periodic and final checkpoints.
    pub checkpoints: Option<PathBuf>,
    /// Where a failing batch is dumped; defaults to the checkpoint directory.
    pub dumps: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_total: f64,
    pub last_total: f64,
    /// Query/target pairs checked against the fixed-matching rule.
    pub matching_checks: usize,
    pub final_checkpoint: Option<PathBuf>,
}

pub struct Trainer<T> {
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    /// Next step to run.
    pub step: usize,
    pub scenes: Vec<LabeledScene>,
}

fn adam_config(cfg: &RunConfig) -> AdamWConfig {
    AdamWConfig {
        weight_decay: cfg.weight_decay,
        backbone_lr_factor: cfg.backbone_lr_factor,
        grad_clip: cfg.grad_clip,
        ..AdamWConfig::default()
    }
}

pub fn source_train_scenes(cfg: &RunConfig) -> Result<Vec<LabeledScene>> {
    let split = cfg.splits();
    let seeds: Vec<u64> = split.train_seeds().collect();
    generate_split(&split, &seeds, DomainStyle::Source)
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let model = Model::new(cfg)?;
        let optimizer = AdamW::new(adam_config(cfg), model.store());
        Ok(Self {
            model,
            optimizer,
            step: 0,
            scenes: source_train_scenes(cfg)?,
        })
    }

    pub fn resume(path: &Path) -> Result<Self> {
        let ck = Checkpoint::<T>::read(path)?;
        let scenes = source_train_scenes(ck.model.config())?;
        Ok(Self {
            model: ck.model,
            optimizer: ck.optimizer,
            step: ck.step,
            scenes,
        })
    }

    pub fn config(&self) -> &RunConfig {
        self.model.config()
    }

    pub fn batch(&self, plan: &[BatchItem]) -> Vec<Sample<T>> {
        plan.iter()
            .map(|item| {
                let scene = &self.scenes[item.index];
                if self.config().augment {
                    to_sample(&augment(scene, item.augment_seed))
                } else {
                    to_sample(scene)
                }
            })
            .collect()
    }

    /// Forward, backward and update on an explicit batch.
    pub fn step_on(&mut self, batch: &[Sample<T>]) -> Result<StepRecord> {
        let cfg = self.config().clone();
        let lr = lr_at(self.step, cfg.lr, cfg.warmup_steps, cfg.total_steps);
        let mut g = Graph::new();
        let out = self.model.batch_loss(&mut g, batch)?;
        if !out.report.is_finite() || !g.value(out.objective).all_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("{:?}", out.report),
            });
        }
        let grads = g.backward(out.objective);
        let params = grads.params();
        let grad_norm = self.optimizer.step(self.model.store_mut(), &params, lr)?;
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("gradient norm {grad_norm}"),
            });
        }
        let record = StepRecord {
            step: self.step,
            lr,
            grad_norm,
            loss: out.report,
            matching_checks: out.matching_checks,
        };
        self.step += 1;
        Ok(record)
    }

    fn dump_batch(&self, dir: &Path, plan: &[BatchItem], batch: &[Sample<T>], err: &Error) -> Result<PathBuf> {
        let dir = dir.join(format!("nan_step{:06}", self.step));
        fs::create_dir_all(&dir)?;
        let images: Vec<serde_json::Value> = plan
            .iter()
            .zip(batch)
            .enumerate()
            .map(|(i, (item, s))| {
                let px = s.image.pixels();
                let finite = px.iter().all(|v| v.is_finite());
                let mean = px.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / px.len() as f64;
                let path = dir.join(format!("image{i}.ppm"));
                let _ = write_ppm(&path, &s.image.cast());
                serde_json::json!({
                    "item": item,
                    "pixels_finite": finite,
                    "pixel_mean": mean,
                    "ignore_pixels": s.labels.valid().iter().filter(|v| !**v).count(),
                    "image": path,
                })
            })
            .collect();
        let dump = serde_json::json!({
            "step": self.step,
            "error": err.to_string(),
            "config": self.config(),
            "batch": images,
        });
        let path = dir.join("dump.json");
        fs::write(&path, serde_json::to_string_pretty(&dump)?)?;
        Ok(path)
    }

    /// Runs until `total_steps`, logging every step and checkpointing periodically.
    pub fn run(&mut self, outputs: &TrainOutputs) -> Result<TrainSummary> {
        let cfg = self.config().clone();
        let mut log = match &outputs.metrics {
            Some(p) => {
                if let Some(parent) = p.parent() {
                    fs::create_dir_all(parent)?;
                }
                Some(BufWriter::new(fs::File::create(p)?))
            }
            None => None,
        };
        if let Some(dir) = &outputs.checkpoints {
            fs::create_dir_all(dir)?;
        }
        let mut summary = TrainSummary::default();
        while self.step < cfg.total_steps {
            let plan = batch_plan(&cfg, &self.scenes, self.step);
            let batch = self.batch(&plan);
            let record = match self.step_on(&batch) {
                Ok(r) => r,
                Err(err @ Error::NonFinite { .. }) => {
                    if let Some(dir) = outputs.dumps.as_ref().or(outputs.checkpoints.as_ref()) {
                        let path = self.dump_batch(dir, &plan, &batch, &err)?;
                        return Err(Error::NonFinite {
                            step: self.step,
                            detail: format!("{err}; batch dumped to {}", path.display()),
                        });
                    }
                    return Err(err);
                }
                Err(e) => return Err(e),
            };
            if summary.steps == 0 {
                summary.first_total = record.loss.total;
            }
            summary.steps += 1;
            summary.last_total = record.loss.total;
            summary.matching_checks += record.matching_checks;
            if let Some(w) = log.as_mut() {
                serde_json::to_writer(&mut *w, &record)?;
                w.write_all(b"\n")?;
            }
            if let Some(dir) = &outputs.checkpoints {
                if cfg.checkpoint_every > 0 && self.step % cfg.checkpoint_every == 0 && self.step < cfg.total_steps {
                    self.checkpoint()
                        .write(&dir.join(format!("step{:06}.ckpt", self.step)))?;
                }
            }
        }
        if let Some(w) = log.as_mut() {
            w.flush()?;
        }
        if let Some(dir) = &outputs.checkpoints {
            let path = dir.join("final.ckpt");
            self.checkpoint().write(&path)?;
            summary.final_checkpoint = Some(path);
        }
        Ok(summary)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    rows: usize,
    cols: usize,
    group: ParamGroup,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: RunConfig,
    config_hash: String,
    step: usize,
    optimizer: AdamWConfig,
    optimizer_steps: u64,
    params: Vec<ParamHeader>,
}

/// Model parameters (trainable and frozen), optimizer moments and step.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    pub step: usize,
}

fn put_values<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
}

fn take_values<T: Scalar>(bytes: &[u8], pos: &mut usize, rows: usize, cols: usize) -> Result<Tensor<T>> {
    let n = rows * cols;
    let end = *pos + n * 8;
    if end > bytes.len() {
        return Err(Error::Format("checkpoint payload truncated".into()));
    }
    let data = bytes[*pos..end]
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
        .collect();
    *pos = end;
    Tensor::from_vec(rows, cols, data)
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = self.model.store();
        let cfg = self.model.config();
        let header = CheckpointHeader {
            config: cfg.clone(),
            config_hash: cfg.hash(),
            step: self.step,
            optimizer: self.optimizer.config.clone(),
            optimizer_steps: self.optimizer.steps,
            params: store
                .iter()
                .map(|(_, e)| ParamHeader {
                    name: e.name.clone(),
                    rows: e.value.rows(),
                    cols: e.value.cols(),
                    group: e.group,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, e) in store.iter() {
            put_values(&mut out, &e.value);
        }
        for t in self.optimizer.first.iter().chain(&self.optimizer.second) {
            put_values(&mut out, t);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header: CheckpointHeader = serde_json::from_slice(
            bytes
                .get(16..16 + len)
                .ok_or_else(|| Error::Format("checkpoint header truncated".into()))?,
        )?;
        if header.config.hash() != header.config_hash {
            return Err(Error::Format("config hash does not match embedded config".into()));
        }
        let mut model = Model::<T>::new(&header.config)?;
        if model.store().len() != header.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                header.params.len(),
                model.store().len()
            )));
        }
        let mut pos = 16 + len;
        let mut shapes = Vec::with_capacity(header.params.len());
        for p in &header.params {
            let id = model
                .store()
                .id(&p.name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {}", p.name)))?;
            let value = take_values(bytes, &mut pos, p.rows, p.cols)?;
            model.store_mut().set(id, value)?;
            shapes.push((p.rows, p.cols));
        }
        let mut optimizer = AdamW::new(header.optimizer, model.store());
        optimizer.steps = header.optimizer_steps;
        for moments in [&mut optimizer.first, &mut optimizer.second] {
            for (slot, &(r, c)) in moments.iter_mut().zip(&shapes) {
                *slot = take_values(bytes, &mut pos, r, c)?;
            }
        }
        if pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint payload".into()));
        }
        Ok(Self {
            model,
            optimizer,
            step: header.step,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// mIoU of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainEval {
    pub domain: String,
    pub split: String,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub pixels: u64,
}

pub fn evaluate<T: Scalar>(model: &Model<T>, scenes: &[LabeledScene]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config().num_classes);
    for scene in scenes {
        let pred = model.predict(&scene.image.cast())?;
        cm.accumulate(&pred, &scene.labels)?;
    }
    Ok(cm)
}

/// Scenes of a split (`train`, `val` or `test`) rendered in `domain`.
pub fn split_scenes(cfg: &RunConfig, split: &str, domain: DomainStyle) -> Result<Vec<LabeledScene>> {
    let s = cfg.splits();
    let seeds: Vec<u64> = match split {
        "train" => s.train_seeds().collect(),
        "val" => s.val_seeds().collect(),
        "test" => s.test_seeds().collect(),
        other => return Err(Error::Input(format!("unknown split {other:?}"))),
    };
    generate_split(&s, &seeds, domain)
}

pub fn evaluate_domain<T: Scalar>(model: &Model<T>, split: &str, domain: DomainStyle) -> Result<DomainEval> {
    let scenes = split_scenes(model.config(), split, domain)?;
    let cm = evaluate(model, &scenes)?;
    let (per_class, miou) = cm.miou();
    Ok(DomainEval {
        domain: domain.name().to_string(),
        split: split.to_string(),
        miou,
        per_class,
        pixels: cm.total(),
    })
}

/// Source validation plus every shifted test domain.
pub fn evaluate_benchmark<T: Scalar>(model: &Model<T>) -> Result<Vec<DomainEval>> {
    let mut out = vec![evaluate_domain(model, "val", DomainStyle::Source)?];
    for d in DomainStyle::targets() {
        out.push(evaluate_domain(model, "test", d)?);
    }
    Ok(out)
}
