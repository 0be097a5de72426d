//! Full segmentation model, the query-only baseline and their batch losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::backbone::{Backbone, BackboneVars, FrozenReference, ImageTensor};
use crate::config::{Architecture, Matching, PromptMode, RunConfig};
use crate::error::{Error, Result};
use crate::evalkit::resize_bilinear;
use crate::labels::LabelMap;
use crate::losses::{
    baseline_objective_var, lang_reg_var, seg_loss_var, total_loss, v_reg_var, vl_reg_var, LossReport,
};
use crate::mask_decoder::{
    bipartite_match, fixed_match, semantic_inference, ClassLogits, MaskDecoder, MaskDecoderVars, MaskLogits,
    MatchAssignment,
};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::pixel_decoder::{PerPixelEmbeddings, PixelDecoder, PixelDecoderVars};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text_query::{CenterProjection, ClassVocabulary, Prompt, QueryGenerator, TextEncoder};

/// One training image with labels at image resolution.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub image: ImageTensor<T>,
    pub labels: LabelMap,
}

/// Objective node and its scalar breakdown.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub objective: Var,
    pub report: LossReport,
    /// Query/target pairs verified against the fixed-matching rule.
    pub matching_checks: usize,
}

/// Independent random stream per component so toggles do not shift other initializations.
fn component_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug)]
enum QuerySource {
    Textual(QueryGenerator),
    Learned(ParamId),
}

/// Graph nodes derived from the class names.
#[derive(Clone, Copy, Debug)]
pub struct TextVars {
    pub text: Var,
    pub queries: Var,
    pub centers: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ImageVars {
    pub backbone: BackboneVars,
    pub pixel: PixelDecoderVars,
    pub decoder: MaskDecoderVars,
}

/// Inference products used by the analysis exports.
#[derive(Clone, Debug)]
pub struct Analysis<T> {
    pub text: Tensor<T>,
    pub initial_queries: Tensor<T>,
    /// Joint-space patch embeddings on the patch grid.
    pub visual: Tensor<T>,
    pub patch_grid: (usize, usize),
    /// Per-pixel embeddings after `m` pixel-decoder layers, `m = 0..=M`.
    pub stages: Vec<PerPixelEmbeddings<T>>,
    pub masks: MaskLogits<T>,
    pub classes: ClassLogits<T>,
}

#[derive(Clone, Debug)]
pub struct TqdmModel<T> {
    pub config: RunConfig,
    pub store: ParamStore<T>,
    pub vocab: ClassVocabulary,
    pub text_encoder: TextEncoder,
    prompt: Option<ParamId>,
    /// Class embeddings under the fixed template prompt.
    pub template_text: Tensor<T>,
    queries: QuerySource,
    centers: CenterProjection,
    pub backbone: Backbone,
    pub reference: FrozenReference,
    pub pixel_decoder: PixelDecoder,
    pub mask_decoder: MaskDecoder,
}

impl<T: Scalar> TqdmModel<T> {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mut store = ParamStore::new();
        let vocab = ClassVocabulary::synthetic(config.num_classes)?;
        let text_encoder = TextEncoder::new(&mut store, config.text_encoder(), &mut component_rng(seed, 1));
        let template_text = text_encoder.fixed_prompt_embeddings(&store, &vocab)?.values;
        let prompt = match config.prompt {
            PromptMode::Learnable => {
                let p = Prompt::<T>::random(config.prompt_len, config.text_token_dim, &mut component_rng(seed, 2))?;
                Some(store.insert("prompt", p.embeddings, ParamGroup::Head, false))
            }
            PromptMode::FixedTemplate => None,
        };
        let mut qrng = component_rng(seed, 3);
        let queries = if config.use_textual_queries {
            QuerySource::Textual(QueryGenerator::new(&mut store, config.embed_dim, config.feature_dim, &mut qrng))
        } else {
            let init = Tensor::randn(config.num_classes, config.feature_dim, 1.0, &mut qrng);
            QuerySource::Learned(store.insert("random_queries", init, ParamGroup::Head, false))
        };
        let centers = CenterProjection::new(&mut store, config.embed_dim, config.feature_dim, &mut component_rng(seed, 4));
        let backbone = Backbone::new(
            &mut store,
            config.backbone(),
            "backbone",
            ParamGroup::Backbone,
            &mut component_rng(seed, 5),
        )?;
        let reference = FrozenReference::snapshot(&mut store, &backbone)?;
        let pixel_decoder = PixelDecoder::new(&mut store, config.pixel_decoder(), &mut component_rng(seed, 6));
        let mask_decoder = MaskDecoder::new(&mut store, config.mask_decoder(), &mut component_rng(seed, 7));
        Ok(Self {
            config: config.clone(),
            store,
            vocab,
            text_encoder,
            prompt,
            template_text,
            queries,
            centers,
            backbone,
            reference,
            pixel_decoder,
            mask_decoder,
        })
    }

    pub fn text_forward(&self, g: &mut Graph<T>) -> Result<TextVars> {
        let text = match self.prompt {
            Some(id) => {
                let p = g.param(&self.store, id);
                self.text_encoder.encode(g, &self.store, &self.vocab, p)?
            }
            None => g.constant(self.template_text.clone()),
        };
        let queries = match &self.queries {
            QuerySource::Textual(mlp) => mlp.forward(g, &self.store, text)?,
            QuerySource::Learned(id) => g.param(&self.store, *id),
        };
        let centers = if self.config.use_text_to_pixel {
            Some(self.centers.forward(g, &self.store, text)?)
        } else {
            None
        };
        Ok(TextVars {
            text,
            queries,
            centers,
        })
    }

    pub fn image_forward(&self, g: &mut Graph<T>, text: &TextVars, image: &ImageTensor<T>) -> Result<ImageVars> {
        let backbone = self.backbone.forward(g, &self.store, image)?;
        let grids = self.config.backbone().scale_grids();
        let pixel = self
            .pixel_decoder
            .forward(g, &self.store, backbone.ms_features, grids, text.centers)?;
        let decoder = self.mask_decoder.forward(
            g,
            &self.store,
            text.queries,
            pixel.scales,
            grids,
            pixel.embeddings,
        )?;
        Ok(ImageVars {
            backbone,
            pixel,
            decoder,
        })
    }

    fn assignments(&self, g: &Graph<T>, vars: &MaskDecoderVars, labels: &LabelMap) -> Vec<MatchAssignment> {
        let k = self.config.num_classes;
        let mut preds: Vec<(Var, Var)> = vars.intermediate.clone();
        preds.push((vars.masks, vars.classes));
        match self.config.matching {
            Matching::Fixed => vec![fixed_match(labels, k); preds.len()],
            Matching::Bipartite => {
                let weights = (self.config.bce_weight, self.config.dice_weight, self.config.cls_weight);
                preds
                    .iter()
                    .map(|&(m, c)| {
                        let masks = MaskLogits {
                            height: labels.height,
                            width: labels.width,
                            values: g.value(m).clone(),
                        };
                        let classes = ClassLogits {
                            values: g.value(c).clone(),
                        };
                        bipartite_match(&masks, &classes, labels, weights)
                    })
                    .collect()
            }
        }
    }

    pub fn batch_loss(&self, g: &mut Graph<T>, batch: &[Sample<T>]) -> Result<BatchLoss> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let cfg = &self.config;
        let loss_cfg = cfg.losses();
        let regs = cfg.regularizers();
        let (fh, fw) = cfg.backbone().scale_grids()[0];
        let (ph, pw) = cfg.backbone().patch_grid();
        let text = self.text_forward(g)?;
        let mut per_image = Vec::with_capacity(batch.len());
        let mut sums = [0.0f64; 5];
        let mut checks = 0;
        for sample in batch {
            sample.labels.validate(cfg.num_classes)?;
            let vars = self.image_forward(g, &text, &sample.image)?;
            let labels_fine = sample.labels.resize_nearest(fh, fw);
            let assigns = self.assignments(g, &vars.decoder, &labels_fine);
            if cfg.matching == Matching::Fixed {
                for a in &assigns {
                    for (k, t) in a.matched() {
                        if t.class != k {
                            return Err(Error::Validation(format!(
                                "fixed matching assigned class {} to query {k}",
                                t.class
                            )));
                        }
                        checks += 1;
                    }
                    checks += a.targets.iter().filter(|t| t.is_none()).count();
                }
            }
            let mut preds = vars.decoder.intermediate.clone();
            preds.push((vars.decoder.masks, vars.decoder.classes));
            let assign_refs: Vec<&MatchAssignment> = assigns.iter().collect();
            let (seg, terms) = seg_loss_var(g, &preds, &assign_refs, &loss_cfg);
            for i in 0..3 {
                sums[i] += terms[i];
            }
            let mut parts = vec![seg];
            if regs.vision_language {
                let labels_patch = sample.labels.resize_nearest(ph, pw);
                let (vl, _) = vl_reg_var(g, vars.backbone.x, text.text, &labels_patch, &loss_cfg)?;
                sums[3] += g.value(vl).item().to_f64_lossy();
                parts.push(vl);
            }
            if regs.vision {
                let reference = self.reference.reference_cls(&self.store, &sample.image)?;
                let r = g.constant(reference);
                let v = v_reg_var(g, vars.backbone.cls_token, r);
                sums[4] += g.value(v).item().to_f64_lossy();
                parts.push(v);
            }
            per_image.push(g.add_all(&parts));
        }
        let n = batch.len() as f64;
        let summed = g.add_all(&per_image);
        let mut objective = g.scale(summed, T::lit(1.0 / n));
        let mut lang = 0.0;
        if regs.language {
            let t0 = g.constant(self.template_text.clone());
            let l = lang_reg_var(g, text.text, t0);
            lang = g.value(l).item().to_f64_lossy();
            objective = g.add(objective, l);
        }
        let w = [cfg.bce_weight, cfg.dice_weight, cfg.cls_weight];
        let seg_mean = (w[0] * sums[0] + w[1] * sums[1] + w[2] * sums[2]) / n;
        let report = total_loss(
            sums[0] / n,
            sums[1] / n,
            sums[2] / n,
            seg_mean,
            (lang, sums[3] / n, sums[4] / n),
            regs,
        );
        Ok(BatchLoss {
            objective,
            report,
            matching_checks: checks,
        })
    }

    /// Mask and class logits of the final layer at the embedding resolution.
    pub fn infer(&self, image: &ImageTensor<T>) -> Result<(MaskLogits<T>, ClassLogits<T>)> {
        let mut g = Graph::inference();
        let text = self.text_forward(&mut g)?;
        let vars = self.image_forward(&mut g, &text, image)?;
        let (h, w) = self.config.backbone().scale_grids()[0];
        Ok((
            MaskLogits {
                height: h,
                width: w,
                values: g.value(vars.decoder.masks).clone(),
            },
            ClassLogits {
                values: g.value(vars.decoder.classes).clone(),
            },
        ))
    }

    pub fn predict(&self, image: &ImageTensor<T>) -> Result<LabelMap> {
        let (masks, classes) = self.infer(image)?;
        let up = upsample_rows(&masks.values, (masks.height, masks.width), (image.height(), image.width()));
        let masks = MaskLogits {
            height: image.height(),
            width: image.width(),
            values: up,
        };
        Ok(semantic_inference(&masks, &classes))
    }

    pub fn analyze(&self, image: &ImageTensor<T>) -> Result<Analysis<T>> {
        let mut g = Graph::inference();
        let text = self.text_forward(&mut g)?;
        let vars = self.image_forward(&mut g, &text, image)?;
        let bcfg = self.config.backbone();
        let (fh, fw) = bcfg.scale_grids()[0];
        let mut stages = Vec::with_capacity(vars.pixel.fine_stages.len());
        for &s in &vars.pixel.fine_stages {
            let z = self.pixel_decoder.embed(&mut g, &self.store, s);
            stages.push(PerPixelEmbeddings::new(fh, fw, g.value(z).clone())?);
        }
        Ok(Analysis {
            text: g.value(text.text).clone(),
            initial_queries: g.value(text.queries).clone(),
            visual: g.value(vars.backbone.x).clone(),
            patch_grid: bcfg.patch_grid(),
            stages,
            masks: MaskLogits {
                height: fh,
                width: fw,
                values: g.value(vars.decoder.masks).clone(),
            },
            classes: ClassLogits {
                values: g.value(vars.decoder.classes).clone(),
            },
        })
    }
}

/// Bilinear upsampling of every row of a `rows x (h * w)` tensor.
pub fn upsample_rows<T: Scalar>(values: &Tensor<T>, from: (usize, usize), to: (usize, usize)) -> Tensor<T> {
    let mut out = Tensor::zeros(values.rows(), to.0 * to.1);
    for r in 0..values.rows() {
        let src: Vec<f64> = values.row(r).iter().map(|v| v.to_f64_lossy()).collect();
        let up = resize_bilinear(&src, from.0, from.1, to.0, to.1);
        for (o, v) in out.row_mut(r).iter_mut().zip(up) {
            *o = T::lit(v);
        }
    }
    out
}

/// Image encoder plus `K` joint-space queries scored by cosine similarity.
#[derive(Clone, Debug)]
pub struct BaselineModel<T> {
    pub config: RunConfig,
    pub store: ParamStore<T>,
    pub vocab: ClassVocabulary,
    pub text_encoder: TextEncoder,
    /// Frozen class embeddings used as textual queries.
    pub template_text: Tensor<T>,
    learned: Option<ParamId>,
    pub backbone: Backbone,
}

impl<T: Scalar> BaselineModel<T> {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mut store = ParamStore::new();
        let vocab = ClassVocabulary::synthetic(config.num_classes)?;
        let text_encoder = TextEncoder::new(&mut store, config.text_encoder(), &mut component_rng(seed, 1));
        let template_text = text_encoder.fixed_prompt_embeddings(&store, &vocab)?.values;
        let learned = (!config.use_textual_queries).then(|| {
            let init = Tensor::randn(config.num_classes, config.embed_dim, 1.0, &mut component_rng(seed, 3));
            store.insert("baseline.queries", init, ParamGroup::Head, false)
        });
        let backbone = Backbone::new(
            &mut store,
            config.backbone(),
            "backbone",
            ParamGroup::Backbone,
            &mut component_rng(seed, 5),
        )?;
        Ok(Self {
            config: config.clone(),
            store,
            vocab,
            text_encoder,
            template_text,
            learned,
            backbone,
        })
    }

    fn queries(&self, g: &mut Graph<T>) -> Var {
        match self.learned {
            Some(id) => g.param(&self.store, id),
            None => g.constant(self.template_text.clone()),
        }
    }

    pub fn query_values(&self) -> Tensor<T> {
        match self.learned {
            Some(id) => self.store.get(id).clone(),
            None => self.template_text.clone(),
        }
    }

    pub fn batch_loss(&self, g: &mut Graph<T>, batch: &[Sample<T>]) -> Result<BatchLoss> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let cfg = self.config.losses();
        let (ph, pw) = self.config.backbone().patch_grid();
        let q = self.queries(g);
        let mut parts = Vec::with_capacity(batch.len());
        let mut sum = 0.0;
        for sample in batch {
            sample.labels.validate(self.config.num_classes)?;
            let vars = self.backbone.forward(g, &self.store, &sample.image)?;
            let labels = sample.labels.resize_nearest(ph, pw);
            let (l, _) = baseline_objective_var(g, vars.x, q, &labels, &cfg)?;
            sum += g.value(l).item().to_f64_lossy();
            parts.push(l);
        }
        let n = batch.len() as f64;
        let summed = g.add_all(&parts);
        let objective = g.scale(summed, T::lit(1.0 / n));
        let mut report = LossReport {
            seg: sum / n,
            ..LossReport::default()
        };
        report.total = report.seg;
        Ok(BatchLoss {
            objective,
            report,
            matching_checks: 0,
        })
    }

    /// `hw x K` cosine scores on the patch grid.
    pub fn scores(&self, image: &ImageTensor<T>) -> Result<Tensor<T>> {
        let out = self.backbone.encode_image(&self.store, image)?;
        Ok(out
            .x
            .l2_normalize_rows()
            .matmul_nt(&self.query_values().l2_normalize_rows()))
    }

    pub fn predict(&self, image: &ImageTensor<T>) -> Result<LabelMap> {
        let s = self.scores(image)?.transpose();
        let grid = self.config.backbone().patch_grid();
        let (h, w) = (image.height(), image.width());
        let up = upsample_rows(&s, grid, (h, w));
        let labels = (0..h * w)
            .map(|i| {
                let mut best = 0;
                for c in 1..up.rows() {
                    if up.get(c, i) > up.get(best, i) {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(h, w, labels)
    }
}

/// Either architecture behind one interface.
#[derive(Clone, Debug)]
pub enum Model<T> {
    Tqdm(Box<TqdmModel<T>>),
    Baseline(Box<BaselineModel<T>>),
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &RunConfig) -> Result<Self> {
        Ok(match config.architecture {
            Architecture::Tqdm => Self::Tqdm(Box::new(TqdmModel::new(config)?)),
            Architecture::Baseline => Self::Baseline(Box::new(BaselineModel::new(config)?)),
        })
    }

    pub fn config(&self) -> &RunConfig {
        match self {
            Self::Tqdm(m) => &m.config,
            Self::Baseline(m) => &m.config,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        match self {
            Self::Tqdm(m) => &m.store,
            Self::Baseline(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            Self::Tqdm(m) => &mut m.store,
            Self::Baseline(m) => &mut m.store,
        }
    }

    pub fn batch_loss(&self, g: &mut Graph<T>, batch: &[Sample<T>]) -> Result<BatchLoss> {
        match self {
            Self::Tqdm(m) => m.batch_loss(g, batch),
            Self::Baseline(m) => m.batch_loss(g, batch),
        }
    }

    pub fn predict(&self, image: &ImageTensor<T>) -> Result<LabelMap> {
        match self {
            Self::Tqdm(m) => m.predict(image),
            Self::Baseline(m) => m.predict(image),
        }
    }

    pub fn as_tqdm(&self) -> Option<&TqdmModel<T>> {
        match self {
            Self::Tqdm(m) => Some(m),
            Self::Baseline(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradients;
    use crate::synthdata::{generate_scene, DomainStyle};

    fn tiny() -> RunConfig {
        RunConfig {
            crop_size: 16,
            patch: 4,
            backbone_width: 8,
            backbone_blocks: 1,
            backbone_heads: 2,
            mlp_ratio: 2,
            embed_dim: 8,
            feature_dim: 8,
            decoder_layers: 2,
            pixel_decoder_layers: 1,
            decoder_heads: 2,
            ffn_hidden: 8,
            prompt_len: 2,
            text_token_dim: 8,
            text_blocks: 1,
            text_heads: 2,
            num_classes: 3,
            ..RunConfig::default()
        }
    }

    fn sample(seed: u64, cfg: &RunConfig) -> Sample<f64> {
        let s = generate_scene(seed, cfg.num_classes, cfg.crop_size, DomainStyle::Source).unwrap();
        Sample {
            image: s.image,
            labels: s.labels,
        }
    }

    #[test]
    fn report_is_consistent_with_objective() {
        let cfg = tiny();
        let m = TqdmModel::<f64>::new(&cfg).unwrap();
        let batch = [sample(1, &cfg), sample(2, &cfg)];
        let mut g = Graph::new();
        let out = m.batch_loss(&mut g, &batch).unwrap();
        let total = g.value(out.objective).item();
        assert!((total - out.report.total).abs() < 1e-10 * total.abs().max(1.0));
        assert!(out.report.is_finite());
        // the reference equals the live encoder before any update
        assert_eq!(out.report.reg_v, 0.0);
        assert!(out.matching_checks > 0);
    }

    #[test]
    fn toggles_remove_exactly_their_term() {
        let base = tiny();
        let batch = [sample(3, &base), sample(4, &base)];
        let eval = |cfg: &RunConfig| {
            let m = TqdmModel::<f64>::new(cfg).unwrap();
            let mut g = Graph::new();
            m.batch_loss(&mut g, &batch).unwrap().report
        };
        let all = eval(&base);
        let no_l = eval(&RunConfig { lang_reg: false, ..base.clone() });
        let no_vl = eval(&RunConfig { vl_reg: false, ..base.clone() });
        assert!((all.total - no_l.total - all.reg_l).abs() < 1e-12);
        assert!((all.total - no_vl.total - all.reg_vl).abs() < 1e-12);
        assert_eq!(no_l.seg, all.seg);
    }

    #[test]
    fn variants_build_and_predict() {
        let base = tiny();
        let img = sample(5, &base).image;
        for cfg in [
            RunConfig { use_textual_queries: false, ..base.clone() },
            RunConfig { use_text_to_pixel: false, ..base.clone() },
            RunConfig { prompt: PromptMode::FixedTemplate, ..base.clone() },
            RunConfig { matching: Matching::Bipartite, ..base.clone() },
            RunConfig { architecture: Architecture::Baseline, ..base.clone() },
            RunConfig { architecture: Architecture::Baseline, use_textual_queries: false, ..base.clone() },
        ] {
            let m = Model::<f64>::new(&cfg).unwrap();
            let p = m.predict(&img).unwrap();
            assert_eq!((p.height, p.width), (16, 16));
            assert!(p.validate(cfg.num_classes).is_ok());
            let mut g = Graph::new();
            let out = m.batch_loss(&mut g, &[sample(6, &cfg)]).unwrap();
            assert!(out.report.is_finite());
            let grads = g.backward(out.objective);
            assert!(!grads.params().is_empty());
        }
    }

    #[test]
    fn shared_streams_keep_backbone_init_across_toggles() {
        let base = tiny();
        let a = TqdmModel::<f64>::new(&base).unwrap();
        let b = TqdmModel::<f64>::new(&RunConfig { use_textual_queries: false, ..base.clone() }).unwrap();
        let id_a = a.store.id("backbone.patch_embed.weight").unwrap();
        let id_b = b.store.id("backbone.patch_embed.weight").unwrap();
        assert_eq!(a.store.get(id_a), b.store.get(id_b));
    }

    #[test]
    fn end_to_end_parameter_gradients() {
        let cfg = RunConfig {
            crop_size: 8,
            decoder_layers: 1,
            ..tiny()
        };
        let m = TqdmModel::<f64>::new(&cfg).unwrap();
        let batch = [sample(7, &cfg)];
        let ids: Vec<ParamId> = m
            .store
            .trainable_ids()
            .into_iter()
            .filter(|&id| {
                let n = &m.store.entry(id).name;
                n == "prompt" || n.starts_with("query_mlp") || n.starts_with("mask_decoder.class_head")
            })
            .collect();
        let r = check_param_gradients(&m.store, &ids, Some(3), |g, s| {
            let mut local = m.clone();
            local.store = s.clone();
            local.batch_loss(g, &batch).unwrap().objective
        });
        r.assert_below(1e-4);
    }
}
