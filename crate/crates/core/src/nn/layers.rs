//! Layer descriptions. A layer holds only parameter ids; values live in a
//! [`ParamStore`] so one architecture can be evaluated against any store
//! with the same layout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{kaiming_normal, normal, ParamId, ParamStore};
use super::tensor::{Element, Tensor};

/// Group count used by every normalisation layer.
pub fn norm_groups(channels: usize) -> usize {
    let mut g = channels.min(8);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Element, R: Rng>(
        store: &mut ParamStore<E>,
        name: &str,
        dims: usize,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let mut shape = vec![cout, cin];
        shape.extend(std::iter::repeat_n(kernel, dims));
        let fan_in = cin * kernel.pow(dims as u32);
        let w = store.add(format!("{name}.w"), kaiming_normal(rng, shape, fan_in));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![cout]));
        Self { w, b, stride, pad: kernel / 2 }
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, s: &ParamStore<E>, x: Var) -> Var {
        let w = g.param(s, self.w);
        let b = g.param(s, self.b);
        g.conv(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<E: Element, R: Rng>(
        store: &mut ParamStore<E>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), kaiming_normal(rng, vec![output, input], input));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![output]));
        Self { w, b }
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, s: &ParamStore<E>, x: Var) -> Var {
        let w = g.param(s, self.w);
        let b = g.param(s, self.b);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(vec![channels], E::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![channels]));
        Self { gamma, beta, groups: norm_groups(channels) }
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<E>, s: &ParamStore<E>, x: Var) -> Var {
        let gamma = g.param(s, self.gamma);
        let beta = g.param(s, self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Embedding {
    table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<E: Element, R: Rng>(
        store: &mut ParamStore<E>,
        name: &str,
        rows: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = store.add(format!("{name}.table"), normal(rng, vec![rows, dim], 1.0));
        Self { table, rows, dim }
    }

    /// `[idx.len(), dim]`.
    pub fn forward<E: Element>(&self, g: &mut Graph<E>, s: &ParamStore<E>, idx: &[usize]) -> Var {
        let t = g.param(s, self.table);
        g.embedding(t, idx)
    }

    pub fn id(&self) -> ParamId {
        self.table
    }
}

/// Pre-norm residual block with an optional per-channel conditioning shift.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    emb: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Element, R: Rng>(
        store: &mut ParamStore<E>,
        name: &str,
        dims: usize,
        cin: usize,
        cout: usize,
        emb_dim: Option<usize>,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin),
            conv1: Conv::new(store, &format!("{name}.conv1"), dims, cin, cout, 3, 1, rng),
            emb: emb_dim.map(|d| Linear::new(store, &format!("{name}.emb"), d, cout, rng)),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout),
            conv2: Conv::new(store, &format!("{name}.conv2"), dims, cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv::new(store, &format!("{name}.skip"), dims, cin, cout, 1, 1, rng)),
        }
    }

    /// `emb` is the already activated `[B, emb_dim]` conditioning vector.
    pub fn forward<E: Element>(&self, g: &mut Graph<E>, s: &ParamStore<E>, x: Var, emb: Option<Var>) -> Var {
        let h = self.norm1.forward(g, s, x);
        let h = g.silu(h);
        let mut h = self.conv1.forward(g, s, h);
        if let (Some(lin), Some(e)) = (&self.emb, emb) {
            let shift = lin.forward(g, s, e);
            h = g.add_channel(h, shift);
        }
        let h = self.norm2.forward(g, s, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, s, h);
        let skip = match &self.skip {
            Some(c) => c.forward(g, s, x),
            None => x,
        };
        g.add(skip, h)
    }
}

/// Residual single-head attention over the spatial positions of a feature
/// map. With a context the keys and values come from the context tokens
/// (cross-attention); otherwise from the map itself.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttnBlock {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl AttnBlock {
    pub fn new<E: Element, R: Rng>(
        store: &mut ParamStore<E>,
        name: &str,
        channels: usize,
        context_dim: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let kv_in = context_dim.unwrap_or(channels);
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels),
            q: Linear::new(store, &format!("{name}.q"), channels, channels, rng),
            k: Linear::new(store, &format!("{name}.k"), kv_in, channels, rng),
            v: Linear::new(store, &format!("{name}.v"), kv_in, channels, rng),
            out: Linear::new(store, &format!("{name}.out"), channels, channels, rng),
        }
    }

    /// `x: [B, C, *S]`; `context: ([B, L, ctx_dim], key lengths)`.
    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        s: &ParamStore<E>,
        x: Var,
        context: Option<(Var, &[usize])>,
    ) -> Var {
        let shape = g.shape(x).to_vec();
        let (b, c) = (shape[0], shape[1]);
        let p: usize = shape[2..].iter().product();
        let h = self.norm.forward(g, s, x);
        let h = g.reshape(h, vec![b, c, p]);
        let tokens = g.transpose12(h);
        let q = self.q.forward(g, s, tokens);
        let (k, v, lens) = match context {
            Some((ctx, lens)) => (self.k.forward(g, s, ctx), self.v.forward(g, s, ctx), Some(lens.to_vec())),
            None => (self.k.forward(g, s, tokens), self.v.forward(g, s, tokens), None),
        };
        let a = g.attention(q, k, v, lens);
        let o = self.out.forward(g, s, a);
        let o = g.transpose12(o);
        let o = g.reshape(o, shape);
        g.add(x, o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn group_counts_divide_channels() {
        assert_eq!(norm_groups(16), 8);
        assert_eq!(norm_groups(4), 4);
        assert_eq!(norm_groups(12), 6);
        assert_eq!(norm_groups(1), 1);
    }

    #[test]
    fn blocks_preserve_spatial_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let res = ResBlock::new(&mut store, "r", 2, 4, 8, Some(6), &mut rng);
        let attn = AttnBlock::new(&mut store, "a", 8, Some(5), &mut rng);
        let mut g = Graph::inference();
        let x = g.constant(Tensor::full(vec![2, 4, 4, 4], 0.3));
        let e = g.constant(Tensor::full(vec![2, 6], 0.1));
        let ctx = g.constant(Tensor::full(vec![2, 3, 5], 0.2));
        let h = res.forward(&mut g, &store, x, Some(e));
        assert_eq!(g.shape(h), &[2, 8, 4, 4]);
        let y = attn.forward(&mut g, &store, h, Some((ctx, &[3, 1])));
        assert_eq!(g.shape(y), &[2, 8, 4, 4]);
        assert!(g.value(y).all_finite());
    }
}
