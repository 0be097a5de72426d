//! Layer building blocks that bind stored parameters into a [`Graph`].

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let weight = store.weight(format!("{name}.weight"), fan_in, fan_out, group, rng);
        let bias = bias.then(|| store.bias(format!("{name}.bias"), fan_out, group));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// Multiplies the initial weights by `gain`.
    pub fn with_gain<T: Scalar>(self, store: &mut ParamStore<T>, gain: f64) -> Self {
        let w = store.get(self.weight).scale(T::lit(gain));
        *store.get_mut(self.weight) = w;
        self
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, group: ParamGroup) -> Self {
        Self {
            gamma: store.ones(format!("{name}.gamma"), dim, group),
            beta: store.bias(format!("{name}.beta"), dim, group),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        out: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, group, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out, true, group, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        assert_eq!(dim % heads, 0, "{name}: width {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, group, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, group, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, group, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, group, rng),
            heads,
        }
    }

    /// Attention of `queries` over `context`, optionally restricted by a
    /// row-major `queries x context` mask.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        queries: Var,
        context: Var,
        allowed: Option<&[bool]>,
    ) -> (Var, Var) {
        let q = self.q.forward(g, store, queries);
        let k = self.k.forward(g, store, context);
        let v = self.v.forward(g, store, context);
        let attn = g.attention(q, k, v, self.heads, allowed);
        (self.out.forward(g, store, attn), attn)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: FeedForward,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim, group),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, group, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim, group),
            mlp: FeedForward::new(
                store,
                &format!("{name}.mlp"),
                dim,
                dim * mlp_ratio,
                dim,
                group,
                rng,
            ),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.norm1.forward(g, store, x);
        let (a, _) = self.attn.forward(g, store, h, h, None);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, store, x);
        let m = self.mlp.forward(g, store, h);
        g.add(x, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradients;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transformer_block_param_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let block = TransformerBlock::new(&mut store, "b", 8, 2, 2, ParamGroup::Head, &mut rng);
        let x = Tensor::randn(5, 8, 1.0, &mut rng);
        let ids = store.trainable_ids();
        let report = check_param_gradients(&store, &ids, Some(6), |g, s| {
            let xv = g.constant(x.clone());
            let y = block.forward(g, s, xv);
            let sq = g.mul(y, y);
            g.sum(sq)
        });
        report.assert_below(1e-4);
    }
}
