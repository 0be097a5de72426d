//! Toy vision transformer image encoder.
//!
//! Produces three feature scales for the pixel decoder (fine = 2x transposed
//! convolution of the patch grid, mid = the patch grid, coarse = 2x average
//! pool), joint-space visual embeddings `x` for every patch, and the projected
//! `[class]` token.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, TransformerBlock};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// RGB image with values in `[0, 1]`, stored row-major as `H x W x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<T> {
    height: usize,
    width: usize,
    pixels: Vec<T>,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn new(height: usize, width: usize, pixels: Vec<T>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Input(format!(
                "{} values do not form a {height}x{width}x3 image",
                pixels.len()
            )));
        }
        if pixels
            .iter()
            .any(|v| !v.is_finite() || *v < T::zero() || *v > T::one())
        {
            return Err(Error::Input("pixel values must be finite and in [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn cast<U: Scalar>(&self) -> ImageTensor<U> {
        ImageTensor {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    /// Patches as rows of `3 * patch^2` values, patch-major in raster order.
    pub fn patchify(&self, patch: usize) -> Result<Tensor<T>> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(Error::Input(format!(
                "image {}x{} is not divisible by patch size {patch}",
                self.height, self.width
            )));
        }
        let (gh, gw) = (self.height / patch, self.width / patch);
        let mut out = Tensor::zeros(gh * gw, 3 * patch * patch);
        for py in 0..gh {
            for px in 0..gw {
                let row = out.row_mut(py * gw + px);
                let mut i = 0;
                for dy in 0..patch {
                    for dx in 0..patch {
                        for c in 0..3 {
                            row[i] = self.get(py * patch + dy, px * patch + dx, c);
                            i += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Joint vision-language dimension `C`.
    pub embed_dim: usize,
    /// Pixel-decoder dimension `D`.
    pub feature_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            width: 96,
            blocks: 4,
            heads: 4,
            mlp_ratio: 4,
            embed_dim: 64,
            feature_dim: 32,
        }
    }
}

impl BackboneConfig {
    pub fn patch_grid(&self) -> (usize, usize) {
        (self.image_size / self.patch, self.image_size / self.patch)
    }

    /// `(h, w)` of the fine, mid and coarse feature maps.
    pub fn scale_grids(&self) -> [(usize, usize); 3] {
        let (h, w) = self.patch_grid();
        [(2 * h, 2 * w), (h, w), (h / 2, w / 2)]
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.patch_grid();
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if h % 2 != 0 || w % 2 != 0 || h == 0 {
            return Err(Error::Config(format!(
                "patch grid {h}x{w} must be even for the coarse scale"
            )));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config("backbone width not divisible by heads".into()));
        }
        Ok(())
    }
}

/// Graph nodes produced by one image encoding.
#[derive(Clone, Copy, Debug)]
pub struct BackboneVars {
    /// `[fine, mid, coarse]`, each `(h_s * w_s) x D`.
    pub ms_features: [Var; 3],
    /// `hw x C` joint-space patch embeddings.
    pub x: Var,
    /// `1 x C` projected `[class]` token.
    pub cls_token: Var,
}

/// Value-level encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneOutput<T> {
    pub ms_features: [Tensor<T>; 3],
    pub grids: [(usize, usize); 3],
    pub x: Tensor<T>,
    pub cls_token: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    patch_embed: Linear,
    cls: ParamId,
    positional: ParamId,
    blocks: Vec<TransformerBlock>,
    final_norm: LayerNorm,
    joint_proj: Linear,
    fine_up: Linear,
    fine_proj: Linear,
    mid_proj: Linear,
    coarse_proj: Linear,
    prefix: String,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: BackboneConfig,
        prefix: &str,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (h, w) = c.patch_grid();
        let n = |s: &str| format!("{prefix}.{s}");
        let patch_embed = Linear::new(store, &n("patch_embed"), 3 * c.patch * c.patch, c.width, true, group, rng);
        let cls = store.insert(n("cls"), Tensor::randn(1, c.width, 0.02, rng), group, false);
        let positional = store.insert(n("positional"), Tensor::randn(h * w + 1, c.width, 0.02, rng), group, false);
        let blocks = (0..c.blocks)
            .map(|i| TransformerBlock::new(store, &n(&format!("block{i}")), c.width, c.heads, c.mlp_ratio, group, rng))
            .collect();
        let final_norm = LayerNorm::new(store, &n("final_norm"), c.width, group);
        let joint_proj = Linear::new(store, &n("joint_proj"), c.width, c.embed_dim, false, group, rng);
        let fine_up = Linear::new(store, &n("fine_up"), c.width, 4 * c.feature_dim, true, group, rng);
        let fine_proj = Linear::new(store, &n("fine_proj"), c.feature_dim, c.feature_dim, true, group, rng);
        let mid_proj = Linear::new(store, &n("mid_proj"), c.width, c.feature_dim, true, group, rng);
        let coarse_proj = Linear::new(store, &n("coarse_proj"), c.width, c.feature_dim, true, group, rng);
        Ok(Self {
            config,
            patch_embed,
            cls,
            positional,
            blocks,
            final_norm,
            joint_proj,
            fine_up,
            fine_proj,
            mid_proj,
            coarse_proj,
            prefix: prefix.to_string(),
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Ids of every parameter owned by this encoder.
    pub fn parameter_ids<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        let p = format!("{}.", self.prefix);
        store
            .iter()
            .filter(|(_, e)| e.name.starts_with(&p))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: &ImageTensor<T>,
    ) -> Result<BackboneVars> {
        let c = &self.config;
        if image.height() != c.image_size || image.width() != c.image_size {
            return Err(Error::Input(format!(
                "image is {}x{}, encoder expects {}x{}",
                image.height(),
                image.width(),
                c.image_size,
                c.image_size
            )));
        }
        let patches = g.constant(image.patchify(c.patch)?);
        let tokens = self.patch_embed.forward(g, store, patches);
        let cls = g.param(store, self.cls);
        let seq = g.concat_rows(&[cls, tokens]);
        let pos = g.param(store, self.positional);
        let mut x = g.add(seq, pos);
        for block in &self.blocks {
            x = block.forward(g, store, x);
        }
        let x = self.final_norm.forward(g, store, x);
        let (h, w) = c.patch_grid();
        let cls_row = g.slice_rows(x, 0, 1);
        let grid = g.slice_rows(x, 1, h * w);

        let joint = self.joint_proj.forward(g, store, grid);
        let cls_token = self.joint_proj.forward(g, store, cls_row);

        let mid = self.mid_proj.forward(g, store, grid);
        let pool = g.constant(avg_pool_matrix(h, w));
        let pooled = g.matmul(pool, grid);
        let coarse = self.coarse_proj.forward(g, store, pooled);
        let up = self.fine_up.forward(g, store, grid);
        let idx = pixel_shuffle_indices(h, w, c.feature_dim);
        let shuffled = g.gather(up, idx, 4 * h * w, c.feature_dim);
        let fine = self.fine_proj.forward(g, store, shuffled);

        Ok(BackboneVars {
            ms_features: [fine, mid, coarse],
            x: joint,
            cls_token,
        })
    }

    /// Value-level encoding.
    pub fn encode_image<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        image: &ImageTensor<T>,
    ) -> Result<BackboneOutput<T>> {
        let mut g = Graph::inference();
        let vars = self.forward(&mut g, store, image)?;
        Ok(BackboneOutput {
            ms_features: vars.ms_features.map(|v| g.value(v).clone()),
            grids: self.config.scale_grids(),
            x: g.value(vars.x).clone(),
            cls_token: g.value(vars.cls_token).clone(),
        })
    }
}

/// Snapshot of the encoder at initialization, kept in the frozen group.
#[derive(Clone, Debug)]
pub struct FrozenReference {
    backbone: Backbone,
}

impl FrozenReference {
    pub fn snapshot<T: Scalar>(store: &mut ParamStore<T>, live: &Backbone) -> Result<Self> {
        let prefix = format!("ref.{}", live.prefix);
        // structure only; the values are overwritten below
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let backbone = Backbone::new(store, live.config.clone(), &prefix, ParamGroup::Frozen, &mut rng)?;
        let live_prefix = format!("{}.", live.prefix);
        let sources: HashMap<String, ParamId> = store
            .iter()
            .filter_map(|(id, e)| e.name.strip_prefix(&live_prefix).map(|s| (s.to_string(), id)))
            .collect();
        for dst in backbone.parameter_ids(store) {
            let name = store.entry(dst).name.clone();
            let key = name
                .strip_prefix(&format!("{prefix}."))
                .expect("reference parameter prefix");
            let src = sources[key];
            let value = store.get(src).clone();
            store.set(dst, value)?;
        }
        Ok(Self { backbone })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// `[class]` token of the initial encoder; never carries gradients.
    pub fn reference_cls<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        image: &ImageTensor<T>,
    ) -> Result<Tensor<T>> {
        Ok(self.backbone.encode_image(store, image)?.cls_token)
    }
}

/// `(h/2 * w/2) x (h * w)` matrix averaging 2x2 blocks.
pub fn avg_pool_matrix<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut m = Tensor::zeros(oh * ow, h * w);
    let q = T::lit(0.25);
    for i in 0..oh {
        for j in 0..ow {
            for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                m.set(i * ow + j, (2 * i + a) * w + 2 * j + b, q);
            }
        }
    }
    m
}

/// Gather indices turning `hw x 4D` sub-pixel outputs into a `(2h * 2w) x D` map.
fn pixel_shuffle_indices(h: usize, w: usize, d: usize) -> Vec<usize> {
    let (fh, fw) = (2 * h, 2 * w);
    let mut idx = Vec::with_capacity(fh * fw * d);
    for y in 0..fh {
        for x in 0..fw {
            let src_row = (y / 2) * w + x / 2;
            let block = (y % 2) * 2 + x % 2;
            for c in 0..d {
                idx.push(src_row * 4 * d + block * d + c);
            }
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradients;

    fn random_image(size: usize, seed: u64) -> ImageTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..size * size * 3).map(|_| rng.random::<f64>()).collect();
        ImageTensor::new(size, size, px).unwrap()
    }

    #[test]
    fn shapes_for_64px_patch_8() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = BackboneConfig {
            width: 16,
            blocks: 1,
            heads: 2,
            mlp_ratio: 2,
            ..BackboneConfig::default()
        };
        let bb = Backbone::new(&mut store, cfg.clone(), "backbone", ParamGroup::Backbone, &mut rng).unwrap();
        let out = bb.encode_image(&store, &random_image(64, 2)).unwrap();
        assert_eq!(out.x.shape(), (64, cfg.embed_dim));
        assert_eq!(out.cls_token.shape(), (1, cfg.embed_dim));
        assert_eq!(out.grids, [(16, 16), (8, 8), (4, 4)]);
        assert_eq!(out.ms_features[0].shape(), (256, cfg.feature_dim));
        assert_eq!(out.ms_features[1].shape(), (64, cfg.feature_dim));
        assert_eq!(out.ms_features[2].shape(), (16, cfg.feature_dim));
        let again = bb.encode_image(&store, &random_image(64, 2)).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn rejects_indivisible_images() {
        let img = random_image(20, 1);
        assert!(matches!(img.patchify(8), Err(Error::Input(_))));
        assert!(ImageTensor::new(2, 2, vec![1.5f64; 12]).is_err());
        let cfg = BackboneConfig {
            image_size: 60,
            ..BackboneConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pixel_shuffle_places_subpixels() {
        // h = w = 1, d = 1: four sub-pixel channels land on the 2x2 output
        assert_eq!(pixel_shuffle_indices(1, 1, 1), vec![0, 1, 2, 3]);
        let idx = pixel_shuffle_indices(1, 2, 1);
        // output row 0: (0,0)->src0 blk0, (0,1)->src0 blk1, (0,2)->src1 blk0, (0,3)->src1 blk1
        assert_eq!(&idx[..4], &[0, 1, 4, 5]);
    }

    #[test]
    fn reference_matches_live_until_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = BackboneConfig {
            image_size: 32,
            width: 16,
            blocks: 1,
            heads: 2,
            mlp_ratio: 2,
            embed_dim: 8,
            feature_dim: 8,
            ..BackboneConfig::default()
        };
        let bb = Backbone::new(&mut store, cfg, "backbone", ParamGroup::Backbone, &mut rng).unwrap();
        let reference = FrozenReference::snapshot(&mut store, &bb).unwrap();
        let img = random_image(32, 4);
        let live = bb.encode_image(&store, &img).unwrap().cls_token;
        let frozen = reference.reference_cls(&store, &img).unwrap();
        assert_eq!(live, frozen);
        for id in reference.backbone().parameter_ids(&store) {
            assert!(!store.trainable(id));
        }
        let live_ids = bb.parameter_ids(&store);
        assert!(live_ids.iter().all(|id| !reference.backbone().parameter_ids(&store).contains(id)));

        let w = live_ids[0];
        let bumped = store.get(w).map(|v| v + 0.1);
        store.set(w, bumped).unwrap();
        assert_eq!(reference.reference_cls(&store, &img).unwrap(), frozen);
        assert_ne!(bb.encode_image(&store, &img).unwrap().cls_token, frozen);
    }

    #[test]
    fn sum_of_x_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = BackboneConfig {
            image_size: 16,
            width: 8,
            blocks: 1,
            heads: 2,
            mlp_ratio: 2,
            embed_dim: 4,
            feature_dim: 4,
            ..BackboneConfig::default()
        };
        let bb = Backbone::new(&mut store, cfg, "backbone", ParamGroup::Backbone, &mut rng).unwrap();
        let img = random_image(16, 6);
        let ids = bb.parameter_ids(&store);
        let report = check_param_gradients(&store, &ids, Some(3), |g, s| {
            let out = bb.forward(g, s, &img).unwrap();
            let a = g.sum(out.x);
            let b = g.sum(out.ms_features[0]);
            let sq = g.mul(out.ms_features[2], out.ms_features[2]);
            let c = g.sum(sq);
            g.add_all(&[a, b, c])
        });
        report.assert_below(1e-4);
    }
}
