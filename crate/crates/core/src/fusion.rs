//! Progressive audio–text–visual fusion.
//!
//! 1. Self-attention residual on the audio and text sequences: `f ← f + SA(f)`.
//! 2. Text queries audio: `f_at = MHA(f_t, f_a, f_a)`.
//! 3. `f_atv = MHA(FFN(f_at), f_v, f_v)`.
//!
//! With `residual` enabled (the default) steps 2 and 3 and the FFN also add
//! their query input back, so the query content survives attention; with it
//! disabled the block is the bare composition above. Sequence features are
//! reduced to vectors by reading out the first row of each shot's query.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Segment, Var};
use crate::encoders::Encoded;
use crate::error::{Error, Result};
use crate::nn::{FeedForward, Init, LayerNorm, MultiHeadAttention, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Residual connections around both cross-attentions and the FFN.
    pub residual: bool,
    /// Layer norm before the self-attention of step 1.
    pub sa_layer_norm: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { residual: true, sa_layer_norm: false }
    }
}

/// Which modalities take part in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySet {
    pub v: bool,
    pub a: bool,
    pub t: bool,
}

impl ModalitySet {
    pub const ALL: ModalitySet = ModalitySet { v: true, a: true, t: true };

    pub fn parse(s: &str) -> Option<Self> {
        let mut m = ModalitySet { v: false, a: false, t: false };
        for c in s.chars() {
            match c {
                'v' => m.v = true,
                'a' => m.a = true,
                't' => m.t = true,
                _ => return None,
            }
        }
        (m.count() > 0).then_some(m)
    }

    pub fn count(&self) -> usize {
        usize::from(self.v) + usize::from(self.a) + usize::from(self.t)
    }

    pub fn label(&self) -> String {
        [(self.v, 'v'), (self.a, 'a'), (self.t, 't')].iter().filter(|(on, _)| *on).map(|(_, c)| *c).collect()
    }
}

#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub cfg: FusionConfig,
    pub sa_audio: MultiHeadAttention,
    pub sa_text: MultiHeadAttention,
    pub cross_text_audio: MultiHeadAttention,
    pub ffn: FeedForward,
    pub cross_visual: MultiHeadAttention,
    pub ln_audio: Option<LayerNorm>,
    pub ln_text: Option<LayerNorm>,
}

/// Fused batch features.
pub struct Fused {
    /// Audio–text feature `[B, d]`, present when both are active.
    pub f_at: Option<Var>,
    /// Final fused feature `[B, d]`.
    pub f_atv: Var,
}

struct Seq {
    x: Var,
    seg: Rc<Vec<Segment>>,
}

fn readout(g: &mut Graph, s: &Seq) -> Var {
    let rows: Vec<usize> = s.seg.iter().map(|&(start, _)| start).collect();
    g.select_rows(s.x, &rows)
}

impl FusionBlock {
    pub fn new(init: &mut Init<'_>, d: usize, heads: usize, cfg: FusionConfig) -> Self {
        init.scope("fusion", |i| FusionBlock {
            sa_audio: MultiHeadAttention::new(i, "sa_audio", d, heads),
            sa_text: MultiHeadAttention::new(i, "sa_text", d, heads),
            cross_text_audio: MultiHeadAttention::new(i, "cross_text_audio", d, heads),
            ffn: FeedForward::new(i, "ffn", d, 4 * d),
            cross_visual: MultiHeadAttention::new(i, "cross_visual", d, heads),
            ln_audio: cfg.sa_layer_norm.then(|| LayerNorm::new(i, "ln_audio", d)),
            ln_text: cfg.sa_layer_norm.then(|| LayerNorm::new(i, "ln_text", d)),
            cfg,
        })
    }

    /// `f + SA(f)` within each segment.
    pub fn sa_residual(&self, g: &mut Graph, ps: &ParamStore, sa: &MultiHeadAttention, ln: Option<&LayerNorm>, x: Var, seg: Rc<Vec<Segment>>) -> Var {
        let h = match ln {
            Some(ln) => ln.forward(g, ps, x),
            None => x,
        };
        let a = sa.forward(g, ps, h, h, seg.clone(), seg).out;
        g.add(x, a)
    }

    fn maybe_residual(&self, g: &mut Graph, out: Var, input: Var) -> Var {
        if self.cfg.residual {
            g.add(out, input)
        } else {
            out
        }
    }

    /// Fuses the active modalities. A single active modality is passed
    /// through as its pooled encoder feature.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, v: Option<&Encoded>, a: Option<&Encoded>, t: Option<&Encoded>) -> Fused {
        let active = usize::from(v.is_some()) + usize::from(a.is_some()) + usize::from(t.is_some());
        assert!(active > 0, "fusion needs at least one modality");
        if active == 1 {
            let e = v.or(a).or(t).expect("one modality");
            return Fused { f_at: None, f_atv: e.pooled };
        }
        let a = a.map(|e| Seq { x: self.sa_residual(g, ps, &self.sa_audio, self.ln_audio.as_ref(), e.seq, e.seg.clone()), seg: e.seg.clone() });
        let t = t.map(|e| Seq { x: self.sa_residual(g, ps, &self.sa_text, self.ln_text.as_ref(), e.seq, e.seg.clone()), seg: e.seg.clone() });
        let at = match (a, t) {
            (Some(a), Some(t)) => {
                let x = self.cross_text_audio.forward(g, ps, t.x, a.x, t.seg.clone(), a.seg.clone()).out;
                let x = self.maybe_residual(g, x, t.x);
                Seq { x, seg: t.seg }
            }
            (Some(s), None) | (None, Some(s)) => s,
            (None, None) => unreachable!("visual-only handled above"),
        };
        let f_at = readout(g, &at);
        let h = self.ffn.forward(g, ps, at.x);
        let h = self.maybe_residual(g, h, at.x);
        let out = match v {
            Some(v) => {
                let x = self.cross_visual.forward(g, ps, h, v.seq, at.seg.clone(), v.seg.clone()).out;
                self.maybe_residual(g, x, h)
            }
            None => h,
        };
        let f_atv = readout(g, &Seq { x: out, seg: at.seg });
        Fused { f_at: Some(f_at), f_atv }
    }
}

fn check_width(m: &Mat, d: usize, what: &str) -> Result<()> {
    if m.cols() != d || m.rows() == 0 {
        return Err(Error::Argument(format!("{what}: expected a non-empty [n, {d}] matrix, got {:?}", m.shape())));
    }
    Ok(())
}

fn attn_width(mha: &MultiHeadAttention, ps: &ParamStore) -> usize {
    ps.get(mha.q.w).rows()
}

/// Multi-head attention of one query sequence over one key/value sequence.
/// Returns the output and the per-head attention matrices.
pub fn mha(query: &Mat, key: &Mat, value: &Mat, params: &MultiHeadAttention, ps: &ParamStore) -> Result<(Mat, Vec<Mat>)> {
    let d = attn_width(params, ps);
    check_width(query, d, "query")?;
    check_width(key, d, "key")?;
    check_width(value, d, "value")?;
    if key.rows() != value.rows() {
        return Err(Error::Argument(format!("key has {} rows, value has {}", key.rows(), value.rows())));
    }
    let mut g = Graph::new();
    let (q, k) = (g.constant(query.clone()), g.constant(key.clone()));
    let v = g.constant(value.clone());
    let q = params.q.forward(&mut g, ps, q);
    let k = params.k.forward(&mut g, ps, k);
    let v = params.v.forward(&mut g, ps, v);
    let attn = g.attention(q, k, v, params.heads, Rc::new(vec![(0, query.rows())]), Rc::new(vec![(0, key.rows())]));
    let out = params.o.forward(&mut g, ps, attn);
    Ok((g.value(out).clone(), g.attention_probs(attn)))
}

/// `f + SA(f)` on one sequence.
pub fn sa_residual(f: &Mat, block: &FusionBlock, which: &MultiHeadAttention, ps: &ParamStore) -> Result<Mat> {
    check_width(f, attn_width(which, ps), "sequence")?;
    let mut g = Graph::new();
    let x = g.constant(f.clone());
    let ln = if std::ptr::eq(which, &block.sa_audio) { block.ln_audio.as_ref() } else { block.ln_text.as_ref() };
    let y = block.sa_residual(&mut g, ps, which, ln, x, Rc::new(vec![(0, f.rows())]));
    Ok(g.value(y).clone())
}

/// Fuses one shot's features (vectors are `[1, d]` sequences) and returns
/// `(f_at, f_atv)`.
pub fn fuse_all(f_v: &Mat, f_a: &Mat, f_t: &Mat, block: &FusionBlock, ps: &ParamStore) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = attn_width(&block.sa_audio, ps);
    check_width(f_v, d, "f_v")?;
    check_width(f_a, d, "f_a")?;
    check_width(f_t, d, "f_t")?;
    let mut g = Graph::new();
    let wrap = |g: &mut Graph, m: &Mat| {
        let x = g.constant(m.clone());
        Encoded { seq: x, seg: Rc::new(vec![(0, m.rows())]), pooled: x }
    };
    let (v, a, t) = (wrap(&mut g, f_v), wrap(&mut g, f_a), wrap(&mut g, f_t));
    let fused = block.forward(&mut g, ps, Some(&v), Some(&a), Some(&t));
    let f_at = g.value(fused.f_at.expect("audio and text active")).data().to_vec();
    Ok((f_at, g.value(fused.f_atv).data().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(residual: bool) -> (ParamStore, FusionBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = FusionBlock::new(&mut Init::new(&mut store, &mut rng), 4, 2, FusionConfig { residual, sa_layer_norm: false });
        (store, block)
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn single_key_attention_returns_projected_value() {
        let (ps, block) = setup(true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, kv) = (rand_mat(&mut rng, 1, 4), rand_mat(&mut rng, 1, 4));
        let (out, probs) = mha(&q, &kv, &kv, &block.cross_visual, &ps).unwrap();
        let p = &block.cross_visual;
        let v = kv.matmul(ps.get(p.v.w));
        let mut v = v;
        v.add_assign(ps.get(p.v.b));
        let mut expect = v.matmul(ps.get(p.o.w));
        expect.add_assign(ps.get(p.o.b));
        assert!(out.max_abs_diff(&expect) < 1e-12);
        assert!(probs.iter().all(|m| m.get(0, 0) == 1.0));
    }

    #[test]
    fn hand_computed_two_key_attention() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = MultiHeadAttention::new(&mut Init::new(&mut ps, &mut rng), "m", 2, 1);
        for lin in [m.q, m.k, m.v, m.o] {
            *ps.get_mut(lin.w) = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
            *ps.get_mut(lin.b) = Mat::zeros(1, 2);
        }
        let q = Mat::from_vec(1, 2, vec![1.0, 0.0]);
        let k = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let v = Mat::from_vec(2, 2, vec![2.0, 0.0, 0.0, 4.0]);
        let (out, _) = mha(&q, &k, &v, &m, &ps).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let (e0, e1) = (s.exp(), 1.0);
        let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        assert!((out.get(0, 0) - 2.0 * p0).abs() < 1e-12);
        assert!((out.get(0, 1) - 4.0 * p1).abs() < 1e-12);
    }

    #[test]
    fn zero_sa_weights_give_identity_residual() {
        let (mut ps, block) = setup(true);
        for lin in [block.sa_audio.q, block.sa_audio.k, block.sa_audio.v, block.sa_audio.o] {
            ps.get_mut(lin.w).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let f = rand_mat(&mut ChaCha8Rng::seed_from_u64(2), 3, 4);
        let out = sa_residual(&f, &block, &block.sa_audio, &ps).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn zero_value_projection_ignores_visual() {
        for residual in [true, false] {
            let (mut ps, block) = setup(residual);
            let v = block.cross_visual.v;
            ps.get_mut(v.w).data_mut().iter_mut().for_each(|x| *x = 0.0);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let (fa, ft) = (rand_mat(&mut rng, 1, 4), rand_mat(&mut rng, 1, 4));
            let (v1, v2) = (rand_mat(&mut rng, 1, 4), rand_mat(&mut rng, 1, 4));
            let a = fuse_all(&v1, &fa, &ft, &block, &ps).unwrap();
            let b = fuse_all(&v2, &fa, &ft, &block, &ps).unwrap();
            assert_eq!(a.1, b.1);
        }
    }

    #[test]
    fn modality_set_parsing() {
        assert_eq!(ModalitySet::parse("va").unwrap().label(), "va");
        assert_eq!(ModalitySet::parse("tav").unwrap(), ModalitySet::ALL);
        assert!(ModalitySet::parse("").is_none());
        assert!(ModalitySet::parse("x").is_none());
    }

    #[test]
    fn dimension_mismatch_is_an_argument_error() {
        let (ps, block) = setup(true);
        let bad = Mat::zeros(1, 3);
        let ok = Mat::zeros(1, 4);
        assert!(matches!(fuse_all(&bad, &ok, &ok, &block, &ps), Err(Error::Argument(_))));
    }
}
