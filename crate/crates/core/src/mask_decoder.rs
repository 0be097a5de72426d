//! Query refinement with masked cross-attention, mask and class prediction,
//! target assignment and semantic inference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamGroup, ParamStore};
use crate::pixel_decoder::{PerPixelEmbeddings, PixelFeatures};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pre-sigmoid masks, `K x (H' * W')` row-major per query.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits<T> {
    pub height: usize,
    pub width: usize,
    pub values: Tensor<T>,
}

impl<T: Scalar> MaskLogits<T> {
    pub fn num_queries(&self) -> usize {
        self.values.rows()
    }

    pub fn get(&self, k: usize, y: usize, x: usize) -> T {
        self.values.get(k, y * self.width + x)
    }
}

/// Per-query logits over the classes plus a trailing no-object entry.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassLogits<T> {
    pub values: Tensor<T>,
}

impl<T: Scalar> ClassLogits<T> {
    pub fn no_object(&self) -> usize {
        self.values.cols() - 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskTarget {
    pub class: usize,
    pub mask: Vec<bool>,
}

/// Per-query supervision on the mask grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchAssignment {
    pub height: usize,
    pub width: usize,
    pub targets: Vec<Option<MaskTarget>>,
    /// Pixels that carry a label.
    pub valid: Vec<bool>,
}

impl MatchAssignment {
    pub fn matched(&self) -> impl Iterator<Item = (usize, &MaskTarget)> {
        self.targets
            .iter()
            .enumerate()
            .filter_map(|(k, t)| t.as_ref().map(|t| (k, t)))
    }

    /// Class target per query, `no_object` for unmatched ones.
    pub fn class_targets(&self, no_object: usize) -> Vec<usize> {
        self.targets
            .iter()
            .map(|t| t.as_ref().map_or(no_object, |t| t.class))
            .collect()
    }
}

/// Binary proposals `R[k][pixel]` at the embedding resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionProposals {
    pub height: usize,
    pub width: usize,
    pub threshold: f64,
    pub values: Vec<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskDecoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub num_classes: usize,
    pub mask_threshold: f64,
}

impl Default for MaskDecoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            layers: 9,
            heads: 4,
            ffn_hidden: 64,
            num_classes: 5,
            mask_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
struct QueryLayer {
    cross: MultiHeadAttention,
    norm1: LayerNorm,
    self_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub config: MaskDecoderConfig,
    layers: Vec<QueryLayer>,
    pub class_head: Linear,
}

/// Graph nodes of a decoder pass.
#[derive(Clone, Debug)]
pub struct MaskDecoderVars {
    pub queries: Var,
    pub masks: Var,
    pub classes: Var,
    /// `(masks, classes)` predicted from the queries entering each layer.
    pub intermediate: Vec<(Var, Var)>,
    /// Cross-attention node of every layer.
    pub cross_attention: Vec<Var>,
}

/// Scale visited by layer `n`: coarse, mid, fine, repeating.
pub fn scale_for_layer(n: usize) -> usize {
    2 - n % 3
}

/// Block-averages fine-grid mask logits down to an integer-factor coarser grid.
fn pool_to_grid<T: Scalar>(
    masks: &Tensor<T>,
    fine: (usize, usize),
    grid: (usize, usize),
) -> Result<Tensor<T>> {
    let (fh, fw) = fine;
    let (h, w) = grid;
    if h == 0 || w == 0 || fh % h != 0 || fw % w != 0 {
        return Err(Error::Shape(format!(
            "cannot pool a {fh}x{fw} mask to {h}x{w}"
        )));
    }
    let (sy, sx) = (fh / h, fw / w);
    let norm = T::lit((sy * sx) as f64);
    let mut out = Tensor::zeros(masks.rows(), h * w);
    for k in 0..masks.rows() {
        let src = masks.row(k);
        let dst = out.row_mut(k);
        for y in 0..fh {
            for x in 0..fw {
                dst[(y / sy) * w + x / sx] += src[y * fw + x];
            }
        }
        for v in dst.iter_mut() {
            *v /= norm;
        }
    }
    Ok(out)
}

/// Attention restriction: query `k` may see pixel `i` when `sigmoid(mask) > threshold`;
/// queries with no visible pixel see everything.
pub fn attention_mask<T: Scalar>(mask: &Tensor<T>, threshold: f64) -> Vec<bool> {
    let mut allowed = Vec::with_capacity(mask.len());
    for k in 0..mask.rows() {
        let row: Vec<bool> = mask
            .row(k)
            .iter()
            .map(|&v| sigmoid(v).to_f64_lossy() > threshold)
            .collect();
        if row.iter().any(|&a| a) {
            allowed.extend(row);
        } else {
            allowed.extend(std::iter::repeat_n(true, row.len()));
        }
    }
    allowed
}

impl MaskDecoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: MaskDecoderConfig,
        rng: &mut R,
    ) -> Self {
        let d = config.dim;
        let g = ParamGroup::Head;
        let layers = (0..config.layers)
            .map(|i| {
                let n = |s: &str| format!("mask_decoder.layer{i}.{s}");
                QueryLayer {
                    cross: MultiHeadAttention::new(store, &n("cross"), d, config.heads, g, rng),
                    norm1: LayerNorm::new(store, &n("norm1"), d, g),
                    self_attn: MultiHeadAttention::new(store, &n("self"), d, config.heads, g, rng),
                    norm2: LayerNorm::new(store, &n("norm2"), d, g),
                    ffn: FeedForward::new(store, &n("ffn"), d, config.ffn_hidden, d, g, rng),
                    norm3: LayerNorm::new(store, &n("norm3"), d, g),
                }
            })
            .collect();
        let class_head = Linear::new(
            store,
            "mask_decoder.class_head",
            d,
            config.num_classes + 1,
            true,
            g,
            rng,
        );
        Self {
            config,
            layers,
            class_head,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// One refinement layer; `allowed` is a row-major `K x L_s` restriction.
    /// Returns the refined queries and the cross-attention node.
    pub fn layer_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        n: usize,
        q: Var,
        pixels: Var,
        allowed: Option<&[bool]>,
    ) -> (Var, Var) {
        let layer = &self.layers[n];
        let (a, node) = layer.cross.forward(g, store, q, pixels, allowed);
        let h = g.add(q, a);
        let h = layer.norm1.forward(g, store, h);
        let (s, _) = layer.self_attn.forward(g, store, h, h, None);
        let h2 = g.add(h, s);
        let h2 = layer.norm2.forward(g, store, h2);
        let f = layer.ffn.forward(g, store, h2);
        let h3 = g.add(h2, f);
        (layer.norm3.forward(g, store, h3), node)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        q0: Var,
        scales: [Var; 3],
        grids: [(usize, usize); 3],
        embeddings: Var,
    ) -> Result<MaskDecoderVars> {
        let d = self.config.dim;
        if g.value(q0).cols() != d || g.value(embeddings).cols() != d {
            return Err(Error::Config(format!(
                "mask decoder width {d}, queries {} and embeddings {}",
                g.value(q0).cols(),
                g.value(embeddings).cols()
            )));
        }
        let mut q = q0;
        let mut intermediate = Vec::with_capacity(self.layers.len());
        let mut cross_attention = Vec::with_capacity(self.layers.len());
        for n in 0..self.layers.len() {
            let masks = g.matmul_nt(q, embeddings);
            let classes = self.class_head.forward(g, store, q);
            intermediate.push((masks, classes));
            let s = scale_for_layer(n);
            let pooled = pool_to_grid(g.value(masks), grids[0], grids[s])?;
            let allowed = attention_mask(&pooled, self.config.mask_threshold);
            let (next, node) = self.layer_forward(g, store, n, q, scales[s], Some(&allowed));
            q = next;
            cross_attention.push(node);
        }
        let masks = g.matmul_nt(q, embeddings);
        let classes = self.class_head.forward(g, store, q);
        Ok(MaskDecoderVars {
            queries: q,
            masks,
            classes,
            intermediate,
            cross_attention,
        })
    }

    /// Value-level single layer with the mask given at the attended scale.
    pub fn masked_attention_layer<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        n: usize,
        q: &Tensor<T>,
        pixels: &Tensor<T>,
        prev_mask: &Tensor<T>,
    ) -> Tensor<T> {
        let mut g = Graph::inference();
        let qv = g.constant(q.clone());
        let pv = g.constant(pixels.clone());
        let allowed = attention_mask(prev_mask, self.config.mask_threshold);
        let (out, _) = self.layer_forward(&mut g, store, n, qv, pv, Some(&allowed));
        g.value(out).clone()
    }

    /// Runs every layer; returns the refined queries and the mask logits that
    /// steered each layer.
    pub fn decode_queries<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        q0: &Tensor<T>,
        feats: &PixelFeatures<T>,
        z: &PerPixelEmbeddings<T>,
    ) -> Result<(Tensor<T>, Vec<MaskLogits<T>>)> {
        let mut g = Graph::inference();
        let qv = g.constant(q0.clone());
        let scales = [0, 1, 2].map(|s| g.constant(feats.scale(s)));
        let zv = g.constant(z.values.clone());
        let out = self.forward(&mut g, store, qv, scales, feats.grid_shapes, zv)?;
        let inter = out
            .intermediate
            .iter()
            .map(|&(m, _)| MaskLogits {
                height: z.height,
                width: z.width,
                values: g.value(m).clone(),
            })
            .collect();
        Ok((g.value(out.queries).clone(), inter))
    }

    pub fn predict_classes<T: Scalar>(&self, store: &ParamStore<T>, q: &Tensor<T>) -> ClassLogits<T> {
        let mut g = Graph::inference();
        let qv = g.constant(q.clone());
        let c = self.class_head.forward(&mut g, store, qv);
        ClassLogits {
            values: g.value(c).clone(),
        }
    }
}

/// `logits[k, pixel] = <q_k, Z[pixel]>`.
pub fn predict_masks<T: Scalar>(q: &Tensor<T>, z: &PerPixelEmbeddings<T>) -> MaskLogits<T> {
    MaskLogits {
        height: z.height,
        width: z.width,
        values: q.matmul_nt(&z.values),
    }
}

/// Query `k` is supervised with class `k` when that class is present, else no-object.
pub fn fixed_match(gt: &LabelMap, num_queries: usize) -> MatchAssignment {
    let targets = (0..num_queries)
        .map(|k| {
            gt.contains(k).then(|| MaskTarget {
                class: k,
                mask: gt.mask_of(k),
            })
        })
        .collect();
    MatchAssignment {
        height: gt.height,
        width: gt.width,
        targets,
        valid: gt.valid(),
    }
}

/// Mean BCE and dice of one logit row against a binary target over valid pixels.
fn mask_costs<T: Scalar>(logits: &[T], target: &[bool], valid: &[bool]) -> (f64, f64) {
    let (mut bce, mut n, mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((&x, &y), &v) in logits.iter().zip(target).zip(valid) {
        if !v {
            continue;
        }
        let x = x.to_f64_lossy();
        let yf = if y { 1.0 } else { 0.0 };
        bce += x.max(0.0) - x * yf + (-x.abs()).exp().ln_1p();
        n += 1.0;
        let p = 1.0 / (1.0 + (-x).exp());
        inter += p * yf;
        psum += p;
        ysum += yf;
    }
    let bce = if n > 0.0 { bce / n } else { 0.0 };
    (bce, 1.0 - (2.0 * inter + 1.0) / (psum + ysum + 1.0))
}

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`).
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "more rows than columns");
    // potentials method, 1-based with a sentinel column 0
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Bipartite assignment of present classes to queries by matching cost
/// `w_cls * (-p(class)) + w_bce * bce + w_dice * dice`.
pub fn bipartite_match<T: Scalar>(
    masks: &MaskLogits<T>,
    classes: &ClassLogits<T>,
    gt: &LabelMap,
    weights: (f64, f64, f64),
) -> MatchAssignment {
    let (w_bce, w_dice, w_cls) = weights;
    let probs = classes.values.softmax_rows();
    let valid = gt.valid();
    let present: Vec<usize> = (0..classes.no_object()).filter(|&c| gt.contains(c)).collect();
    let gt_masks: Vec<Vec<bool>> = present.iter().map(|&c| gt.mask_of(c)).collect();
    let cost: Vec<Vec<f64>> = present
        .iter()
        .zip(&gt_masks)
        .map(|(&c, mask)| {
            (0..masks.num_queries())
                .map(|k| {
                    let (bce, dice) = mask_costs(masks.values.row(k), mask, &valid);
                    w_bce * bce + w_dice * dice - w_cls * probs.get(k, c).to_f64_lossy()
                })
                .collect()
        })
        .collect();
    let mut targets = vec![None; masks.num_queries()];
    for (t, q) in hungarian(&cost).into_iter().enumerate() {
        targets[q] = Some(MaskTarget {
            class: present[t],
            mask: gt_masks[t].clone(),
        });
    }
    MatchAssignment {
        height: gt.height,
        width: gt.width,
        targets,
        valid,
    }
}

/// Per-pixel argmax over `sum_k softmax(cls)[k, c] * sigmoid(mask)[k, pixel]`;
/// ties go to the lowest class.
pub fn semantic_inference<T: Scalar>(masks: &MaskLogits<T>, classes: &ClassLogits<T>) -> LabelMap {
    let probs = classes.values.softmax_rows();
    let num_classes = classes.no_object();
    let p = masks.values.map(sigmoid);
    // scores: classes x pixels
    let scores = probs
        .slice_cols(0, num_classes)
        .matmul_tn(&p);
    let pixels = masks.height * masks.width;
    let labels = (0..pixels)
        .map(|i| {
            let mut best = 0;
            for c in 1..num_classes {
                if scores.get(c, i) > scores.get(best, i) {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap {
        height: masks.height,
        width: masks.width,
        labels,
    }
}

/// Thresholded `sigmoid(Z q0^T)`.
pub fn region_proposals<T: Scalar>(
    z: &PerPixelEmbeddings<T>,
    q0: &Tensor<T>,
    threshold: f64,
) -> Result<RegionProposals> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Input(format!("threshold {threshold} outside [0, 1]")));
    }
    let logits = q0.matmul_nt(&z.values);
    let values = (0..logits.rows())
        .map(|k| {
            logits
                .row(k)
                .iter()
                .map(|&v| sigmoid(v).to_f64_lossy() > threshold)
                .collect()
        })
        .collect();
    Ok(RegionProposals {
        height: z.height,
        width: z.width,
        threshold,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradients;
    use crate::labels::IGNORE_LABEL;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type Tensor = crate::tensor::Tensor<f64>;

    fn decoder(layers: usize, k: usize, seed: u64) -> (ParamStore<f64>, MaskDecoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = MaskDecoderConfig {
            dim: 4,
            layers,
            heads: 2,
            ffn_hidden: 8,
            num_classes: k,
            mask_threshold: 0.5,
        };
        let dec = MaskDecoder::new(&mut store, cfg, &mut rng);
        (store, dec)
    }

    fn features(rng: &mut ChaCha8Rng) -> (PixelFeatures<f64>, PerPixelEmbeddings<f64>) {
        let grids = [(4, 4), (2, 2), (1, 1)];
        let scales = [
            Tensor::randn(16, 4, 1.0, rng),
            Tensor::randn(4, 4, 1.0, rng),
            Tensor::randn(1, 4, 1.0, rng),
        ];
        let feats = PixelFeatures::from_scales(&scales, grids).unwrap();
        let z = PerPixelEmbeddings::new(4, 4, Tensor::randn(16, 4, 1.0, rng)).unwrap();
        (feats, z)
    }

    #[test]
    fn all_foreground_mask_equals_unmasked() {
        let (store, dec) = decoder(1, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Tensor::randn(3, 4, 1.0, &mut rng);
        let px = Tensor::randn(5, 4, 1.0, &mut rng);
        let fg = Tensor::filled(3, 5, 10.0);
        let bg = Tensor::filled(3, 5, -10.0);
        let masked = dec.masked_attention_layer(&store, 0, &q, &px, &fg);
        let fallback = dec.masked_attention_layer(&store, 0, &q, &px, &bg);
        let mut g = Graph::inference();
        let qv = g.constant(q.clone());
        let pv = g.constant(px.clone());
        let (free, _) = dec.layer_forward(&mut g, &store, 0, qv, pv, None);
        assert_eq!(&masked, g.value(free));
        assert_eq!(&fallback, g.value(free));
    }

    #[test]
    fn disallowed_pixel_gets_zero_weight() {
        let (store, dec) = decoder(1, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Tensor::randn(2, 4, 1.0, &mut rng);
        let px = Tensor::randn(2, 4, 1.0, &mut rng);
        let prev = Tensor::from_f64(2, 2, &[3.0, -3.0, 1.0, 1.0]).unwrap();
        let allowed = attention_mask(&prev, 0.5);
        assert_eq!(allowed, vec![true, false, true, true]);
        let mut g = Graph::inference();
        let qv = g.constant(q);
        let pv = g.constant(px);
        let (_, node) = dec.layer_forward(&mut g, &store, 0, qv, pv, Some(&allowed));
        for head in g.attention_probs(node).unwrap() {
            assert_eq!(head.get(0, 1), 0.0);
            assert_eq!(head.get(0, 0), 1.0);
            assert!(head.get(1, 1) > 0.0);
        }
    }

    #[test]
    fn decode_lengths_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (feats, z) = features(&mut rng);
        let q0 = Tensor::randn(3, 4, 1.0, &mut rng);

        let (store0, dec0) = decoder(0, 3, 6);
        let (q, inter) = dec0.decode_queries(&store0, &q0, &feats, &z).unwrap();
        assert_eq!(q, q0);
        assert!(inter.is_empty());

        let (store, dec) = decoder(4, 3, 6);
        let (q, inter) = dec.decode_queries(&store, &q0, &feats, &z).unwrap();
        assert_eq!(inter.len(), 4);
        let final_masks = predict_masks(&q, &z);
        for m in &inter {
            assert_eq!(m.values.shape(), final_masks.values.shape());
        }
        let perm = [2, 0, 1];
        let (qp, _) = dec
            .decode_queries(&store, &q0.select_rows(&perm), &feats, &z)
            .unwrap();
        let want = q.select_rows(&perm);
        for (a, b) in qp.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn round_robin_schedule() {
        let seq: Vec<usize> = (0..9).map(scale_for_layer).collect();
        assert_eq!(seq, vec![2, 1, 0, 2, 1, 0, 2, 1, 0]);
        let m = Tensor::from_f64(1, 16, &(0..16).map(|i| i as f64).collect::<Vec<_>>()).unwrap();
        let p = pool_to_grid(&m, (4, 4), (2, 2)).unwrap();
        assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
        assert!(pool_to_grid(&m, (4, 4), (3, 3)).is_err());
    }

    #[test]
    fn mask_prediction_by_hand() {
        let z = PerPixelEmbeddings::new(
            2,
            2,
            Tensor::from_f64(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -2.0, 0.5]).unwrap(),
        )
        .unwrap();
        let q = Tensor::from_f64(2, 2, &[2.0, 3.0, 0.0, 0.0]).unwrap();
        let m = predict_masks(&q, &z);
        assert_eq!(m.values.row(0), &[2.0, 3.0, 5.0, -2.5]);
        assert_eq!(m.values.row(1), &[0.0; 4]);
        assert_eq!(sigmoid(m.get(1, 1, 1)), 0.5);

        let flat = PerPixelEmbeddings::new(1, 3, Tensor::from_f64(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap()).unwrap();
        let m = predict_masks(&q, &flat);
        assert!(m.values.row(0).iter().all(|&v| v == 8.0));
    }

    #[test]
    fn class_head_properties_and_gradients() {
        let (mut store, dec) = decoder(0, 4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = Tensor::randn(4, 4, 1.0, &mut rng);
        let ids = store.trainable_ids();
        let r = check_param_gradients(&store, &ids, None, |g, s| {
            let qv = g.constant(q.clone());
            let c = dec.class_head.forward(g, s, qv);
            g.cross_entropy(c, vec![Some(0), Some(1), Some(4), None], vec![1.0, 1.0, 0.1, 1.0])
        });
        r.assert_below(1e-4);

        let same = Tensor::from_rows(&[q.row(0).to_vec(), q.row(0).to_vec()]).unwrap();
        let c = dec.predict_classes(&store, &same);
        assert_eq!(c.values.row(0), c.values.row(1));

        store.set(dec.class_head.weight, Tensor::zeros(4, 5)).unwrap();
        let p = dec.predict_classes(&store, &q).values.softmax_rows();
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn fixed_matching_rules() {
        let gt = LabelMap::new(2, 2, vec![0, 2, 2, IGNORE_LABEL]).unwrap();
        let a = fixed_match(&gt, 3);
        assert_eq!(a.targets[0].as_ref().unwrap().class, 0);
        assert!(a.targets[1].is_none());
        assert_eq!(a.targets[2].as_ref().unwrap().mask, vec![false, true, true, false]);
        assert_eq!(a.class_targets(3), vec![0, 3, 2]);
        assert_eq!(a.valid, vec![true, true, true, false]);

        let one = fixed_match(&LabelMap::filled(3, 3, 1), 3);
        assert_eq!(one.matched().map(|(k, _)| k).collect::<Vec<_>>(), vec![1]);
        for (k, t) in a.matched() {
            assert_eq!(t.class, k);
        }
    }

    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[row][j] + rec(cost, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(cost, 0, &mut vec![false; cost[0].len()])
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..40 {
            let n = 1 + trial % 4;
            let m = n + trial % 3;
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let a = hungarian(&cost);
            let mut seen = vec![false; m];
            for &j in &a {
                assert!(!seen[j]);
                seen[j] = true;
            }
            let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            assert!((total - brute_force(&cost)).abs() < 1e-12);
        }
    }

    #[test]
    fn bipartite_assigns_each_present_class_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let gt = LabelMap::new(2, 2, vec![0, 1, 1, 3]).unwrap();
        let masks = MaskLogits {
            height: 2,
            width: 2,
            values: Tensor::randn(4, 4, 2.0, &mut rng),
        };
        let classes = ClassLogits {
            values: Tensor::randn(4, 5, 1.0, &mut rng),
        };
        let a = bipartite_match(&masks, &classes, &gt, (5.0, 5.0, 2.0));
        let mut got: Vec<usize> = a.matched().map(|(_, t)| t.class).collect();
        got.sort();
        assert_eq!(got, vec![0, 1, 3]);
    }

    #[test]
    fn semantic_inference_cases() {
        // one-hot classes with hard masks reproduce the union of masks
        let big = 30.0;
        let masks = MaskLogits {
            height: 1,
            width: 3,
            values: Tensor::from_f64(2, 3, &[big, -big, -big, -big, big, big]).unwrap(),
        };
        let classes = ClassLogits {
            values: Tensor::from_f64(2, 3, &[big, -big, -big, -big, big, -big]).unwrap(),
        };
        assert_eq!(semantic_inference(&masks, &classes).labels, vec![0, 1, 1]);

        let uniform = ClassLogits {
            values: Tensor::zeros(2, 3),
        };
        let flat = MaskLogits {
            height: 1,
            width: 3,
            values: Tensor::zeros(2, 3),
        };
        assert_eq!(semantic_inference(&flat, &uniform).labels, vec![0, 0, 0]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let masks = MaskLogits {
            height: 2,
            width: 3,
            values: Tensor::randn(2, 6, 2.0, &mut rng),
        };
        let classes = ClassLogits {
            values: Tensor::randn(2, 3, 2.0, &mut rng),
        };
        let got = semantic_inference(&masks, &classes);
        for i in 0..6 {
            let score = |c: usize| -> f64 {
                (0..2)
                    .map(|k| {
                        let row = classes.values.row(k);
                        let z: f64 = row.iter().map(|v| v.exp()).sum();
                        row[c].exp() / z / (1.0 + (-masks.values.get(k, i)).exp())
                    })
                    .sum()
            };
            let want = if score(1) > score(0) { 1 } else { 0 };
            assert_eq!(got.labels[i], want);
        }
    }

    #[test]
    fn proposals_thresholds() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = PerPixelEmbeddings::new(3, 3, Tensor::randn(9, 4, 1.0, &mut rng)).unwrap();
        let q0 = Tensor::randn(2, 4, 1.0, &mut rng);
        let all = region_proposals(&z, &q0, 0.0).unwrap();
        assert!(all.values.iter().flatten().all(|&v| v));
        let none = region_proposals(&z, &q0, 1.0).unwrap();
        assert!(none.values.iter().flatten().all(|&v| !v));
        let half = region_proposals(&z, &q0, 0.5).unwrap();
        let logits = q0.matmul_nt(&z.values);
        for k in 0..2 {
            for i in 0..9 {
                assert_eq!(half.values[k][i], logits.get(k, i) > 0.0);
            }
        }
        assert!(matches!(region_proposals(&z, &q0, 1.5), Err(Error::Input(_))));
    }
}
