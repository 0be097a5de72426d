//! Multi-scale pixel decoder with text-to-pixel attention.
//!
//! Every layer runs self-attention inside each scale, a feed-forward block,
//! and then text-to-pixel attention over the concatenated token sequence:
//! pixel tokens are the queries, the textual cluster centers provide keys and
//! values, and the result is added back to the pixel tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear};
use crate::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Flattened multi-scale tokens, `L x D`, ordered fine, mid, coarse.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelFeatures<T> {
    pub values: Tensor<T>,
    pub scale_index: Vec<usize>,
    pub grid_shapes: [(usize, usize); 3],
}

impl<T: Scalar> PixelFeatures<T> {
    pub fn from_scales(scales: &[Tensor<T>; 3], grid_shapes: [(usize, usize); 3]) -> Result<Self> {
        for (s, (t, (h, w))) in scales.iter().zip(grid_shapes).enumerate() {
            if t.rows() != h * w {
                return Err(Error::Shape(format!(
                    "scale {s} has {} tokens, grid {h}x{w}",
                    t.rows()
                )));
            }
        }
        let values = Tensor::concat_rows(&[&scales[0], &scales[1], &scales[2]])?;
        let scale_index = grid_shapes
            .iter()
            .enumerate()
            .flat_map(|(s, (h, w))| std::iter::repeat_n(s, h * w))
            .collect();
        Ok(Self {
            values,
            scale_index,
            grid_shapes,
        })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn scale(&self, s: usize) -> Tensor<T> {
        let start: usize = self.grid_shapes[..s].iter().map(|(h, w)| h * w).sum();
        let (h, w) = self.grid_shapes[s];
        self.values.slice_rows(start, h * w)
    }
}

/// Per-pixel embeddings at the fine resolution, `(H' * W') x D` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PerPixelEmbeddings<T> {
    pub height: usize,
    pub width: usize,
    pub values: Tensor<T>,
}

impl<T: Scalar> PerPixelEmbeddings<T> {
    pub fn new(height: usize, width: usize, values: Tensor<T>) -> Result<Self> {
        if values.rows() != height * width {
            return Err(Error::Shape(format!(
                "{} embeddings for a {height}x{width} map",
                values.rows()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        self.values.row(y * self.width + x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelDecoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub text_to_pixel: bool,
    /// Divide text-to-pixel logits by `sqrt(D)`.
    pub scaled_logits: bool,
}

impl Default for PixelDecoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            layers: 6,
            heads: 4,
            ffn_hidden: 64,
            text_to_pixel: true,
            scaled_logits: true,
        }
    }
}

/// Text-to-pixel cross attention with a residual update.
#[derive(Clone, Debug)]
pub struct TextToPixelAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub scaled_logits: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct TextToPixelVars {
    pub output: Var,
    /// Attention node; its single head holds the `L x K` weights.
    pub attention: Var,
}

impl TextToPixelAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        scaled_logits: bool,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Head;
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, g, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, g, rng),
            // residual branch without a following norm starts small
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, g, rng).with_gain(store, 0.1),
            scaled_logits,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: Var,
        centers: Var,
    ) -> Result<TextToPixelVars> {
        let d = self.query.fan_in;
        if g.value(z).cols() != d || g.value(centers).cols() != d {
            return Err(Error::Config(format!(
                "text-to-pixel attention expects width {d}, got pixels {} and centers {}",
                g.value(z).cols(),
                g.value(centers).cols()
            )));
        }
        let mut q = self.query.forward(g, store, z);
        if !self.scaled_logits {
            // the attention op always divides by sqrt(width)
            q = g.scale(q, T::lit(d as f64).sqrt());
        }
        let k = self.key.forward(g, store, centers);
        let v = self.value.forward(g, store, centers);
        let attention = g.attention(q, k, v, 1, None);
        let output = g.add(z, attention);
        Ok(TextToPixelVars { output, attention })
    }

    /// Value-level update; returns the refined features and the `L x K` weights.
    pub fn apply<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        z: &PixelFeatures<T>,
        centers: &Tensor<T>,
    ) -> Result<(PixelFeatures<T>, Tensor<T>)> {
        let mut g = Graph::inference();
        let zv = g.constant(z.values.clone());
        let cv = g.constant(centers.clone());
        let out = self.forward(&mut g, store, zv, cv)?;
        let weights = g.attention_probs(out.attention).expect("attention node")[0].clone();
        Ok((
            PixelFeatures {
                values: g.value(out.output).clone(),
                ..z.clone()
            },
            weights,
        ))
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    qkv: [Linear; 3],
    mix: Linear,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
    text_attn: Option<TextToPixelAttention>,
}

#[derive(Clone, Debug)]
pub struct PixelDecoder {
    pub config: PixelDecoderConfig,
    layers: Vec<DecoderLayer>,
    mask_head: Linear,
}

/// Graph nodes of one decoder pass.
#[derive(Clone, Debug)]
pub struct PixelDecoderVars {
    /// Refined `[fine, mid, coarse]` features.
    pub scales: [Var; 3],
    /// `(H' * W') x D` per-pixel embeddings.
    pub embeddings: Var,
    /// Text-to-pixel attention nodes, one per layer when enabled.
    pub text_attention: Vec<Var>,
    /// Fine-scale features entering layer 0 and leaving every layer (`M + 1` entries).
    pub fine_stages: Vec<Var>,
}

impl PixelDecoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: PixelDecoderConfig,
        rng: &mut R,
    ) -> Self {
        let d = config.dim;
        let g = ParamGroup::Head;
        let layers = (0..config.layers)
            .map(|i| {
                let n = |s: &str| format!("pixel_decoder.layer{i}.{s}");
                DecoderLayer {
                    qkv: [
                        Linear::new(store, &n("self_q"), d, d, true, g, rng),
                        Linear::new(store, &n("self_k"), d, d, true, g, rng),
                        Linear::new(store, &n("self_v"), d, d, true, g, rng),
                    ],
                    mix: Linear::new(store, &n("mix"), d, d, true, g, rng),
                    norm1: LayerNorm::new(store, &n("norm1"), d, g),
                    ffn: FeedForward::new(store, &n("ffn"), d, config.ffn_hidden, d, g, rng),
                    norm2: LayerNorm::new(store, &n("norm2"), d, g),
                    text_attn: config.text_to_pixel.then(|| {
                        TextToPixelAttention::new(store, &n("text_attn"), d, config.scaled_logits, rng)
                    }),
                }
            })
            .collect();
        let mask_head = Linear::new(store, "pixel_decoder.mask_head", d, d, true, g, rng).with_gain(store, 0.1);
        Self {
            config,
            layers,
            mask_head,
        }
    }

    /// Per-pixel embedding head applied to fine-scale features.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, fine: Var) -> Var {
        self.mask_head.forward(g, store, fine)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        scales: [Var; 3],
        grids: [(usize, usize); 3],
        centers: Option<Var>,
    ) -> Result<PixelDecoderVars> {
        let d = self.config.dim;
        let lens: Vec<usize> = grids.iter().map(|(h, w)| h * w).collect();
        for (s, &v) in scales.iter().enumerate() {
            if g.value(v).shape() != (lens[s], d) {
                return Err(Error::Shape(format!(
                    "scale {s} is {:?}, expected ({}, {d})",
                    g.value(v).shape(),
                    lens[s]
                )));
            }
        }
        if self.config.text_to_pixel && centers.is_none() && !self.layers.is_empty() {
            return Err(Error::Config("text-to-pixel attention needs cluster centers".into()));
        }
        let offsets = [0, lens[0], lens[0] + lens[1]];
        let mut z = g.concat_rows(&scales);
        let mut text_attention = Vec::new();
        let mut fine_stages = vec![scales[0]];
        for layer in &self.layers {
            let q = layer.qkv[0].forward(g, store, z);
            let k = layer.qkv[1].forward(g, store, z);
            let v = layer.qkv[2].forward(g, store, z);
            let mut parts = Vec::with_capacity(3);
            for s in 0..3 {
                let qs = g.slice_rows(q, offsets[s], lens[s]);
                let ks = g.slice_rows(k, offsets[s], lens[s]);
                let vs = g.slice_rows(v, offsets[s], lens[s]);
                parts.push(g.attention(qs, ks, vs, self.config.heads, None));
            }
            let attn = g.concat_rows(&parts);
            let mixed = layer.mix.forward(g, store, attn);
            let h = g.add(z, mixed);
            let h = layer.norm1.forward(g, store, h);
            let f = layer.ffn.forward(g, store, h);
            let h2 = g.add(h, f);
            z = layer.norm2.forward(g, store, h2);
            if let Some(ta) = &layer.text_attn {
                let out = ta.forward(g, store, z, centers.expect("checked above"))?;
                z = out.output;
                text_attention.push(out.attention);
            }
            fine_stages.push(g.slice_rows(z, 0, lens[0]));
        }
        let out_scales = [
            g.slice_rows(z, 0, lens[0]),
            g.slice_rows(z, offsets[1], lens[1]),
            g.slice_rows(z, offsets[2], lens[2]),
        ];
        let embeddings = self.embed(g, store, out_scales[0]);
        Ok(PixelDecoderVars {
            scales: out_scales,
            embeddings,
            text_attention,
            fine_stages,
        })
    }

    /// Value-level decoding of backbone features.
    pub fn pixel_decode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        ms: &[Tensor<T>; 3],
        grids: [(usize, usize); 3],
        centers: Option<&Tensor<T>>,
    ) -> Result<(PixelFeatures<T>, PerPixelEmbeddings<T>)> {
        let mut g = Graph::inference();
        let scales = [
            g.constant(ms[0].clone()),
            g.constant(ms[1].clone()),
            g.constant(ms[2].clone()),
        ];
        let c = centers.map(|c| g.constant(c.clone()));
        let out = self.forward(&mut g, store, scales, grids, c)?;
        let refined = out.scales.map(|v| g.value(v).clone());
        let feats = PixelFeatures::from_scales(&refined, grids)?;
        let (h, w) = grids[0];
        let emb = PerPixelEmbeddings::new(h, w, g.value(out.embeddings).clone())?;
        Ok((feats, emb))
    }
}
