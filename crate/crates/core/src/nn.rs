//! Named parameter storage and the small layer library shared by the
//! encoders, the fusion block and the classification heads.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Segment, Var};
use crate::tensor::Mat;

/// Ordered, named collection of trainable matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: usize) -> &Mat {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Mat {
        &mut self.values[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &str, &Mat)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (i, n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// Graph node for parameter `id` (shared across calls within one graph).
    pub fn var(&self, g: &mut Graph, id: usize) -> Var {
        g.param(id, &self.values[id])
    }

    pub fn zero_all(&mut self) {
        for v in &mut self.values {
            v.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Allocates parameters under a dotted name prefix.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Init<'_>) -> R) -> R {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        let mut child = Init { store: &mut *self.store, rng: &mut *self.rng, prefix };
        f(&mut child)
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> usize {
        let data = (0..rows * cols).map(|_| self.rng.random_range(-bound..=bound)).collect();
        let full = self.full(name);
        self.store.add(full, Mat::from_vec(rows, cols, data))
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> usize {
        let full = self.full(name);
        self.store.add(full, Mat::filled(rows, cols, value))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights uniform in `±1/sqrt(fan_in)`, bias zero.
    pub fn new(init: &mut Init<'_>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        init.scope(name, |i| {
            let w = i.uniform("w", fan_in, fan_out, 1.0 / (fan_in as f64).sqrt());
            let b = i.constant("b", 1, fan_out, 0.0);
            Linear { w, b, fan_in, fan_out }
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = ps.var(g, self.w);
        let b = ps.var(g, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize) -> Self {
        init.scope(name, |i| LayerNorm { gain: i.constant("gain", 1, d, 1.0), bias: i.constant("bias", 1, d, 0.0) })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gain = ps.var(g, self.gain);
        let bias = ps.var(g, self.bias);
        let s = g.mul_row(n, gain);
        g.add_row(s, bias)
    }
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Outputs of one attention call: the projected result and the raw
/// attention node (for inspecting probabilities).
pub struct AttentionOut {
    pub out: Var,
    pub attn: Var,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize, heads: usize) -> Self {
        assert!(heads > 0 && d % heads == 0, "d_model {d} not divisible by {heads} heads");
        init.scope(name, |i| MultiHeadAttention {
            q: Linear::new(i, "q", d, d),
            k: Linear::new(i, "k", d, d),
            v: Linear::new(i, "v", d, d),
            o: Linear::new(i, "o", d, d),
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, query: Var, kv: Var, qseg: Rc<Vec<Segment>>, kseg: Rc<Vec<Segment>>) -> AttentionOut {
        let q = self.q.forward(g, ps, query);
        let k = self.k.forward(g, ps, kv);
        let v = self.v.forward(g, ps, kv);
        let attn = g.attention(q, k, v, self.heads, qseg, kseg);
        AttentionOut { out: self.o.forward(g, ps, attn), attn }
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize, hidden: usize) -> Self {
        init.scope(name, |i| FeedForward { l1: Linear::new(i, "l1", d, hidden), l2: Linear::new(i, "l2", hidden, d) })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let h = self.l1.forward(g, ps, x);
        let h = g.gelu(h);
        self.l2.forward(g, ps, h)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Clone, Copy, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize, heads: usize) -> Self {
        init.scope(name, |i| TransformerBlock {
            ln1: LayerNorm::new(i, "ln1", d),
            attn: MultiHeadAttention::new(i, "attn", d, heads),
            ln2: LayerNorm::new(i, "ln2", d),
            ffn: FeedForward::new(i, "ffn", d, 4 * d),
        })
    }

    /// Self-attention restricted to each segment.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, seg: Rc<Vec<Segment>>) -> Var {
        let h = self.ln1.forward(g, ps, x);
        let a = self.attn.forward(g, ps, h, h, seg.clone(), seg).out;
        let x = g.add(x, a);
        let h = self.ln2.forward(g, ps, x);
        let f = self.ffn.forward(g, ps, h);
        g.add(x, f)
    }
}

/// `n` equal segments of length `len`, back to back.
pub fn uniform_segments(n: usize, len: usize) -> Rc<Vec<Segment>> {
    Rc::new((0..n).map(|i| (i * len, len)).collect())
}

/// Row indices `start, start+stride, ...` (`n` of them).
pub fn strided_rows(n: usize, stride: usize, start: usize) -> Vec<usize> {
    (0..n).map(|i| i * stride + start).collect()
}

/// Constant `[n, n*k]` matrix averaging each run of `k` consecutive rows.
pub fn mean_pool_matrix(n: usize, k: usize) -> Mat {
    let mut m = Mat::zeros(n, n * k);
    for i in 0..n {
        for j in 0..k {
            m.set(i, i * k + j, 1.0 / k as f64);
        }
    }
    m
}

/// Adds a `[p, d]` table to every consecutive block of `p` rows of `x`.
pub fn add_tiled(g: &mut Graph, x: Var, table: Var) -> Var {
    let (n, d) = g.value(x).shape();
    let p = g.value(table).rows();
    assert!(p > 0 && n % p == 0, "add_tiled: {n} rows not a multiple of {p}");
    let idx: Vec<usize> = (0..n * d).map(|i| i % (p * d)).collect();
    let tiled = g.gather(table, Rc::new(idx), n, d);
    g.add(x, tiled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn scoped_names_are_dotted() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut store, &mut rng);
        let lin = init.scope("enc", |i| Linear::new(i, "proj", 3, 2));
        assert_eq!(store.name(lin.w), "enc.proj.w");
        assert_eq!(store.id("enc.proj.b"), Some(lin.b));
        assert_eq!(store.num_scalars(), 8);
    }

    #[test]
    fn linear_init_respects_fan_in_bound() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut Init::new(&mut store, &mut rng), "l", 16, 4);
        assert!(store.get(lin.w).data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn tiled_addition_repeats_table() {
        let mut g = Graph::new();
        let x = g.constant(Mat::zeros(4, 2));
        let t = g.constant(Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = add_tiled(&mut g, x, t);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
    }
}
