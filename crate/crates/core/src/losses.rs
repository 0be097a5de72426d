//! Segmentation loss, the three regularizers and the baseline objective.
//!
//! Every loss comes in two flavours: a `*_var` builder that adds nodes to a
//! [`Graph`] for training, and a plain function on values for inspection.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::mask_decoder::{ClassLogits, MaskLogits, MatchAssignment};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub bce_weight: f64,
    pub dice_weight: f64,
    pub cls_weight: f64,
    pub temperature: f64,
    pub no_object_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            bce_weight: 5.0,
            dice_weight: 5.0,
            cls_weight: 2.0,
            temperature: 0.07,
            no_object_weight: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [
            self.bce_weight,
            self.dice_weight,
            self.cls_weight,
            self.no_object_weight,
        ];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Which regularizers join the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Regularizers {
    pub language: bool,
    pub vision_language: bool,
    pub vision: bool,
}

impl Default for Regularizers {
    fn default() -> Self {
        Self {
            language: true,
            vision_language: true,
            vision: true,
        }
    }
}

impl Regularizers {
    pub fn none() -> Self {
        Self {
            language: false,
            vision_language: false,
            vision: false,
        }
    }
}

/// Scalar loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub bce: f64,
    pub dice: f64,
    pub cls: f64,
    pub seg: f64,
    pub reg_l: f64,
    pub reg_vl: f64,
    pub reg_v: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.bce, self.dice, self.cls, self.seg, self.reg_l, self.reg_vl, self.reg_v,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Combines already weighted segmentation loss and regularizer values.
pub fn total_loss(
    bce: f64,
    dice: f64,
    cls: f64,
    seg: f64,
    regs: (f64, f64, f64),
    enabled: Regularizers,
) -> LossReport {
    let reg_l = if enabled.language { regs.0 } else { 0.0 };
    let reg_vl = if enabled.vision_language { regs.1 } else { 0.0 };
    let reg_v = if enabled.vision { regs.2 } else { 0.0 };
    LossReport {
        bce,
        dice,
        cls,
        seg,
        reg_l,
        reg_vl,
        reg_v,
        total: seg + reg_l + reg_vl + reg_v,
    }
}

fn matched_targets<T: Scalar>(assign: &MatchAssignment) -> (Vec<usize>, Tensor<T>) {
    let rows: Vec<usize> = assign.matched().map(|(k, _)| k).collect();
    let pixels = assign.valid.len();
    let mut target = Tensor::zeros(rows.len(), pixels);
    for (r, (_, t)) in assign.matched().enumerate() {
        for (i, &m) in t.mask.iter().enumerate() {
            if m {
                target.set(r, i, T::one());
            }
        }
    }
    (rows, target)
}

pub fn bce_mask_loss_var<T: Scalar>(g: &mut Graph<T>, masks: Var, assign: &MatchAssignment) -> Var {
    let (rows, target) = matched_targets(assign);
    if rows.is_empty() {
        return g.constant(Tensor::scalar(T::zero()));
    }
    let sel = g.select_rows(masks, &rows);
    g.bce_with_logits(sel, target, Some(assign.valid.clone()))
}

pub fn dice_loss_var<T: Scalar>(g: &mut Graph<T>, masks: Var, assign: &MatchAssignment) -> Var {
    let (rows, target) = matched_targets(assign);
    if rows.is_empty() {
        return g.constant(Tensor::scalar(T::zero()));
    }
    let sel = g.select_rows(masks, &rows);
    g.dice(sel, target, Some(assign.valid.clone()))
}

pub fn cls_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    classes: Var,
    assign: &MatchAssignment,
    cfg: &LossConfig,
) -> Var {
    let no_object = g.value(classes).cols() - 1;
    let targets = assign.class_targets(no_object);
    let weights = targets
        .iter()
        .map(|&t| {
            if t == no_object {
                T::lit(cfg.no_object_weight)
            } else {
                T::one()
            }
        })
        .collect();
    g.cross_entropy(classes, targets.into_iter().map(Some).collect(), weights)
}

/// Unweighted `(bce, dice, cls)` nodes for one prediction.
pub fn seg_terms_var<T: Scalar>(
    g: &mut Graph<T>,
    masks: Var,
    classes: Var,
    assign: &MatchAssignment,
    cfg: &LossConfig,
) -> [Var; 3] {
    [
        bce_mask_loss_var(g, masks, assign),
        dice_loss_var(g, masks, assign),
        cls_loss_var(g, classes, assign, cfg),
    ]
}

/// Weighted segmentation loss summed over `(masks, classes)` predictions.
/// Returns the total node and the unweighted per-term sums.
pub fn seg_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    predictions: &[(Var, Var)],
    assignments: &[&MatchAssignment],
    cfg: &LossConfig,
) -> (Var, [f64; 3]) {
    assert_eq!(predictions.len(), assignments.len(), "one assignment per prediction");
    let mut parts = Vec::with_capacity(3 * predictions.len());
    let mut sums = [0.0; 3];
    let weights = [cfg.bce_weight, cfg.dice_weight, cfg.cls_weight];
    for (&(m, c), a) in predictions.iter().zip(assignments) {
        let terms = seg_terms_var(g, m, c, a, cfg);
        for i in 0..3 {
            sums[i] += g.value(terms[i]).item().to_f64_lossy();
            parts.push(g.scale(terms[i], T::lit(weights[i])));
        }
    }
    if parts.is_empty() {
        return (g.constant(Tensor::scalar(T::zero())), sums);
    }
    (g.add_all(&parts), sums)
}

/// Cross-entropy of `softmax(t_hat t0_hat^T)` rows against the identity, averaged over rows.
pub fn lang_reg_var<T: Scalar>(g: &mut Graph<T>, t: Var, t0: Var) -> Var {
    let k = g.value(t).rows();
    let tn = g.l2_normalize_rows(t);
    let t0n = g.l2_normalize_rows(t0);
    let sim = g.matmul_nt(tn, t0n);
    g.cross_entropy(sim, (0..k).map(Some).collect(), vec![T::one(); k])
}

/// Per-pixel cross-entropy of `softmax(x_hat e_hat^T / tau)` against labels on the
/// grid of `x`. The flag is false when every pixel is ignored.
pub fn pixel_text_ce_var<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    embeddings: Var,
    labels: &LabelMap,
    temperature: f64,
) -> Result<(Var, bool)> {
    let (rows, cx) = g.value(x).shape();
    let (k, ce) = g.value(embeddings).shape();
    if cx != ce {
        return Err(Error::Config(format!(
            "visual width {cx} differs from embedding width {ce}"
        )));
    }
    if labels.labels.len() != rows {
        return Err(Error::Shape(format!(
            "{} labels for {rows} visual embeddings",
            labels.labels.len()
        )));
    }
    labels.validate(k)?;
    let xn = g.l2_normalize_rows(x);
    let en = g.l2_normalize_rows(embeddings);
    let sim = g.matmul_nt(xn, en);
    let logits = g.scale(sim, T::lit(1.0 / temperature));
    let targets: Vec<Option<usize>> = labels
        .labels
        .iter()
        .map(|&l| (l != IGNORE_LABEL).then_some(l as usize))
        .collect();
    let any = targets.iter().any(Option::is_some);
    Ok((g.cross_entropy(logits, targets, vec![T::one(); rows]), any))
}

pub fn vl_reg_var<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    t: Var,
    labels: &LabelMap,
    cfg: &LossConfig,
) -> Result<(Var, bool)> {
    pixel_text_ce_var(g, x, t, labels, cfg.temperature)
}

/// Same pixel-wise objective with arbitrary queries in place of text embeddings.
pub fn baseline_objective_var<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    queries: Var,
    labels: &LabelMap,
    cfg: &LossConfig,
) -> Result<(Var, bool)> {
    pixel_text_ce_var(g, x, queries, labels, cfg.temperature)
}

pub fn v_reg_var<T: Scalar>(g: &mut Graph<T>, cls_live: Var, cls_ref: Var) -> Var {
    let d = g.sub(cls_live, cls_ref);
    g.l2_norm(d)
}

fn eval<T: Scalar>(build: impl FnOnce(&mut Graph<T>) -> Var) -> T {
    let mut g = Graph::inference();
    let v = build(&mut g);
    g.value(v).item()
}

pub fn bce_mask_loss<T: Scalar>(masks: &MaskLogits<T>, assign: &MatchAssignment) -> T {
    eval(|g| {
        let m = g.constant(masks.values.clone());
        bce_mask_loss_var(g, m, assign)
    })
}

pub fn dice_loss<T: Scalar>(masks: &MaskLogits<T>, assign: &MatchAssignment) -> T {
    eval(|g| {
        let m = g.constant(masks.values.clone());
        dice_loss_var(g, m, assign)
    })
}

pub fn cls_loss<T: Scalar>(classes: &ClassLogits<T>, assign: &MatchAssignment, cfg: &LossConfig) -> T {
    eval(|g| {
        let c = g.constant(classes.values.clone());
        cls_loss_var(g, c, assign, cfg)
    })
}

/// Weighted segmentation loss over several predictions sharing one assignment.
pub fn seg_loss<T: Scalar>(
    predictions: &[(MaskLogits<T>, ClassLogits<T>)],
    assign: &MatchAssignment,
    cfg: &LossConfig,
) -> T {
    eval(|g| {
        let preds: Vec<(Var, Var)> = predictions
            .iter()
            .map(|(m, c)| (g.constant(m.values.clone()), g.constant(c.values.clone())))
            .collect();
        let assigns = vec![assign; preds.len()];
        seg_loss_var(g, &preds, &assigns, cfg).0
    })
}

pub fn lang_reg<T: Scalar>(t: &Tensor<T>, t0: &Tensor<T>) -> T {
    eval(|g| {
        let a = g.constant(t.clone());
        let b = g.constant(t0.clone());
        lang_reg_var(g, a, b)
    })
}

pub fn vl_reg<T: Scalar>(
    x: &Tensor<T>,
    t: &Tensor<T>,
    labels: &LabelMap,
    cfg: &LossConfig,
) -> Result<(T, bool)> {
    let mut g = Graph::inference();
    let a = g.constant(x.clone());
    let b = g.constant(t.clone());
    let (v, any) = vl_reg_var(&mut g, a, b, labels, cfg)?;
    Ok((g.value(v).item(), any))
}

pub fn baseline_objective<T: Scalar>(
    x: &Tensor<T>,
    queries: &Tensor<T>,
    labels: &LabelMap,
    cfg: &LossConfig,
) -> Result<(T, bool)> {
    vl_reg(x, queries, labels, cfg)
}

pub fn v_reg<T: Scalar>(cls_live: &[T], cls_ref: &[T]) -> T {
    cls_live
        .iter()
        .zip(cls_ref)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<T>()
        .sqrt()
}
