//! Visual, audio and text encoders.
//!
//! Each encoder works on a whole batch at once: shot sequences are stacked
//! row-wise and attention is restricted to per-shot (or per-group) segments.
//! Besides the pooled feature `[B, d]`, every encoder returns its final token
//! sequence, which the fusion block consumes.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Segment, Var, GATHER_ZERO};
use crate::data_model::{Frames, ShotRecord, Spectrogram};
use crate::error::{Error, Result};
use crate::nn::{add_tiled, mean_pool_matrix, strided_rows, uniform_segments, Init, Linear, ParamStore, TransformerBlock};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub n_groups: usize,
    pub group_size: usize,
    /// Frame shape `[C, H, W]`.
    pub frame: [usize; 3],
    /// Output channels of the two strided convolutions.
    pub conv_channels: [usize; 2],
    /// Square kernel size, equal to the stride.
    pub conv_kernel: usize,
    /// Spectrogram shape `[M, F]`.
    pub spec: [usize; 2],
    /// Audio patch `[p_m, p_f]`.
    pub patch: [usize; 2],
    pub vocab_size: usize,
    pub seq_len: usize,
    /// Frames and spectrograms enter the encoders as `(x − input_mean) / input_std`.
    pub input_mean: f64,
    pub input_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            layers: 1,
            n_groups: 4,
            group_size: 4,
            frame: [3, 32, 32],
            conv_channels: [4, 8],
            conv_kernel: 4,
            spec: [32, 48],
            patch: [16, 16],
            vocab_size: 160,
            seq_len: 24,
            input_mean: 0.5,
            input_std: 0.25,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads)));
        }
        if self.n_groups == 0 || self.group_size == 0 || self.layers == 0 || self.vocab_size == 0 || self.seq_len == 0 {
            return Err(Error::Config("group counts, layers, vocabulary and sequence length must be positive".into()));
        }
        if !(self.input_std > 0.0 && self.input_std.is_finite() && self.input_mean.is_finite()) {
            return Err(Error::Config(format!("input_std must be positive and input_mean finite, got {} and {}", self.input_std, self.input_mean)));
        }
        if self.patch.contains(&0) {
            return Err(Error::Config("patch dimensions must be positive".into()));
        }
        let [_, h, w] = self.frame;
        let k = self.conv_kernel;
        let (h1, w1) = (conv_out(h, k), conv_out(w, k));
        if k == 0 || h1 == 0 || w1 == 0 || conv_out(h1, k) == 0 || conv_out(w1, k) == 0 {
            return Err(Error::Config(format!("frame {h}x{w} too small for two stride-{k} convolutions")));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let [m, f] = self.spec;
        m.div_ceil(self.patch[0]) * f.div_ceil(self.patch[1])
    }
}

fn conv_out(n: usize, k: usize) -> usize {
    if k == 0 || n < k {
        0
    } else {
        (n - k) / k + 1
    }
}

/// Start frame of each group: the clip is cut into `n_groups` equal
/// segments (tail remainder ignored) and each group takes the first
/// `group_size` frames of its segment.
pub fn group_starts(t: usize, n_groups: usize, group_size: usize) -> Result<Vec<usize>> {
    let need = n_groups * group_size;
    if n_groups == 0 || group_size == 0 {
        return Err(Error::Argument("n_groups and group_size must be positive".into()));
    }
    if t < need {
        return Err(Error::Argument(format!("{t} frames given, at least {need} required")));
    }
    let seg = t / n_groups;
    Ok((0..n_groups).map(|i| i * seg).collect())
}

/// Sampled frame groups `[n_groups, group_size, C, H, W]`, flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameGroups {
    pub n_groups: usize,
    pub group_size: usize,
    pub frame_len: usize,
    pub data: Vec<f64>,
}

impl FrameGroups {
    pub fn group(&self, i: usize) -> &[f64] {
        let n = self.group_size * self.frame_len;
        &self.data[i * n..(i + 1) * n]
    }
}

pub fn sample_frame_groups(frames: &Frames, n_groups: usize, group_size: usize) -> Result<FrameGroups> {
    let starts = group_starts(frames.t, n_groups, group_size)?;
    let mut data = Vec::with_capacity(n_groups * group_size * frames.frame_len());
    for s in starts {
        for k in 0..group_size {
            data.extend_from_slice(frames.frame(s + k));
        }
    }
    Ok(FrameGroups { n_groups, group_size, frame_len: frames.frame_len(), data })
}

/// Flat indices into a row-major `[M, F]` spectrogram, one row per patch
/// (mel-major patch order), `GATHER_ZERO` for padding.
pub fn patch_indices(m: usize, f: usize, pm: usize, pf: usize) -> Result<(usize, Vec<usize>)> {
    if pm == 0 || pf == 0 {
        return Err(Error::Argument(format!("patch dimensions must be positive, got {pm}x{pf}")));
    }
    let (nm, nf) = (m.div_ceil(pm), f.div_ceil(pf));
    let mut idx = Vec::with_capacity(nm * nf * pm * pf);
    for i in 0..nm {
        for j in 0..nf {
            for a in 0..pm {
                for b in 0..pf {
                    let (r, c) = (i * pm + a, j * pf + b);
                    idx.push(if r < m && c < f { r * f + c } else { GATHER_ZERO });
                }
            }
        }
    }
    Ok((nm * nf, idx))
}

/// Zero-padded non-overlapping patches `[num_patches, p_m·p_f]`.
pub fn patchify_spectrogram(spec: &Spectrogram, patch: (usize, usize)) -> Result<Mat> {
    let (n, idx) = patch_indices(spec.m, spec.f, patch.0, patch.1)?;
    let data = idx.iter().map(|&i| if i == GATHER_ZERO { 0.0 } else { spec.data[i] }).collect();
    Ok(Mat::from_vec(n, patch.0 * patch.1, data))
}

/// Output of one modality encoder for a batch of `B` shots.
#[derive(Clone)]
pub struct Encoded {
    /// Final token sequence, all shots stacked.
    pub seq: Var,
    /// Per-shot row ranges within `seq`.
    pub seg: Rc<Vec<Segment>>,
    /// Pooled feature `[B, d]`.
    pub pooled: Var,
}

type IndexCache = RefCell<HashMap<usize, Rc<Vec<usize>>>>;

/// Frame model (two strided convolutions and a projection), a transformer
/// over each group's frames with first-position readout, and mean pooling
/// over groups.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    cfg: EncoderConfig,
    conv1: Linear,
    conv2: Linear,
    proj: Linear,
    pos: usize,
    blocks: Vec<TransformerBlock>,
    im2col1: IndexCache,
    im2col2: IndexCache,
}

impl VisualEncoder {
    pub fn new(init: &mut Init<'_>, cfg: &EncoderConfig) -> Self {
        let [c, h, w] = cfg.frame;
        let k = cfg.conv_kernel;
        let [c1, c2] = cfg.conv_channels;
        let (h2, w2) = (conv_out(conv_out(h, k), k), conv_out(conv_out(w, k), k));
        init.scope("visual", |i| VisualEncoder {
            cfg: cfg.clone(),
            conv1: Linear::new(i, "conv1", c * k * k, c1),
            conv2: Linear::new(i, "conv2", c1 * k * k, c2),
            proj: Linear::new(i, "proj", c2 * h2 * w2, cfg.d_model),
            pos: i.uniform("pos", cfg.group_size, cfg.d_model, 0.1),
            blocks: (0..cfg.layers).map(|l| TransformerBlock::new(i, &format!("block{l}"), cfg.d_model, cfg.heads)).collect(),
            im2col1: RefCell::default(),
            im2col2: RefCell::default(),
        })
    }

    fn conv1_index(&self, frames: usize) -> Rc<Vec<usize>> {
        self.im2col1
            .borrow_mut()
            .entry(frames)
            .or_insert_with(|| {
                let [c, h, w] = self.cfg.frame;
                let k = self.cfg.conv_kernel;
                let (h1, w1) = (conv_out(h, k), conv_out(w, k));
                let mut idx = Vec::with_capacity(frames * h1 * w1 * c * k * k);
                for f in 0..frames {
                    for oy in 0..h1 {
                        for ox in 0..w1 {
                            for ch in 0..c {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        idx.push(f * c * h * w + ch * h * w + (oy * k + ky) * w + ox * k + kx);
                                    }
                                }
                            }
                        }
                    }
                }
                Rc::new(idx)
            })
            .clone()
    }

    fn conv2_index(&self, frames: usize) -> Rc<Vec<usize>> {
        self.im2col2
            .borrow_mut()
            .entry(frames)
            .or_insert_with(|| {
                let [_, h, w] = self.cfg.frame;
                let k = self.cfg.conv_kernel;
                let c1 = self.cfg.conv_channels[0];
                let (h1, w1) = (conv_out(h, k), conv_out(w, k));
                let (h2, w2) = (conv_out(h1, k), conv_out(w1, k));
                let mut idx = Vec::with_capacity(frames * h2 * w2 * c1 * k * k);
                for f in 0..frames {
                    for oy in 0..h2 {
                        for ox in 0..w2 {
                            for ch in 0..c1 {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let row = f * h1 * w1 + (oy * k + ky) * w1 + ox * k + kx;
                                        idx.push(row * c1 + ch);
                                    }
                                }
                            }
                        }
                    }
                }
                Rc::new(idx)
            })
            .clone()
    }

    /// Per-frame embeddings `[frames, d]` from a `[frames, C·H·W]` input.
    pub fn frame_model(&self, g: &mut Graph, ps: &ParamStore, frames: Var) -> Var {
        let nf = g.value(frames).rows();
        let [c, h, w] = self.cfg.frame;
        let k = self.cfg.conv_kernel;
        let [c1, c2] = self.cfg.conv_channels;
        let (h1, w1) = (conv_out(h, k), conv_out(w, k));
        let (h2, w2) = (conv_out(h1, k), conv_out(w1, k));
        let cols1 = g.gather(frames, self.conv1_index(nf), nf * h1 * w1, c * k * k);
        let y1 = self.conv1.forward(g, ps, cols1);
        let y1 = g.gelu(y1);
        let cols2 = g.gather(y1, self.conv2_index(nf), nf * h2 * w2, c1 * k * k);
        let y2 = self.conv2.forward(g, ps, cols2);
        let y2 = g.gelu(y2);
        let flat = g.reshape(y2, nf, h2 * w2 * c2);
        self.proj.forward(g, ps, flat)
    }

    /// `frames` holds `B · n_groups · group_size` rows ordered (shot, group, frame).
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, frames: Var) -> Encoded {
        let (n, gs) = (self.cfg.n_groups, self.cfg.group_size);
        let rows = g.value(frames).rows();
        assert_eq!(rows % (n * gs), 0, "visual input rows must be a multiple of n_groups * group_size");
        let b = rows / (n * gs);
        let x = self.frame_model(g, ps, frames);
        let pos = ps.var(g, self.pos);
        let mut x = add_tiled(g, x, pos);
        let seg = uniform_segments(b * n, gs);
        for blk in &self.blocks {
            x = blk.forward(g, ps, x, seg.clone());
        }
        let groups = g.select_rows(x, &strided_rows(b * n, gs, 0));
        let pool = g.constant(mean_pool_matrix(b, n));
        let pooled = g.matmul(pool, groups);
        Encoded { seq: groups, seg: uniform_segments(b, n), pooled }
    }
}

/// Prepends a readout row to each shot's block of `per` rows.
fn prepend_readout(g: &mut Graph, readout: Var, rows: Var, b: usize, per: usize) -> Var {
    let all = g.concat_rows(&[readout, rows]);
    let order: Vec<usize> = (0..b).flat_map(|s| std::iter::once(0).chain((0..per).map(move |p| 1 + s * per + p))).collect();
    g.select_rows(all, &order)
}

/// Patch embedding with a readout token, learned positions and a transformer.
#[derive(Clone, Debug)]
pub struct AudioEncoder {
    cfg: EncoderConfig,
    embed: Linear,
    readout: usize,
    pos: usize,
    blocks: Vec<TransformerBlock>,
    patch_index: IndexCache,
}

impl AudioEncoder {
    pub fn new(init: &mut Init<'_>, cfg: &EncoderConfig) -> Self {
        let [pm, pf] = cfg.patch;
        init.scope("audio", |i| AudioEncoder {
            cfg: cfg.clone(),
            embed: Linear::new(i, "embed", pm * pf, cfg.d_model),
            readout: i.uniform("readout", 1, cfg.d_model, 0.1),
            pos: i.uniform("pos", 1 + cfg.num_patches(), cfg.d_model, 0.1),
            blocks: (0..cfg.layers).map(|l| TransformerBlock::new(i, &format!("block{l}"), cfg.d_model, cfg.heads)).collect(),
            patch_index: RefCell::default(),
        })
    }

    fn index(&self, b: usize) -> Rc<Vec<usize>> {
        self.patch_index
            .borrow_mut()
            .entry(b)
            .or_insert_with(|| {
                let [m, f] = self.cfg.spec;
                let [pm, pf] = self.cfg.patch;
                let (_, one) = patch_indices(m, f, pm, pf).expect("validated patch size");
                let stride = m * f;
                Rc::new((0..b).flat_map(|s| one.iter().map(move |&i| if i == GATHER_ZERO { i } else { s * stride + i })).collect())
            })
            .clone()
    }

    /// `spec` is `[B, M·F]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, spec: Var) -> Encoded {
        let b = g.value(spec).rows();
        let p = self.cfg.num_patches();
        let [pm, pf] = self.cfg.patch;
        let patches = g.gather(spec, self.index(b), b * p, pm * pf);
        let emb = self.embed.forward(g, ps, patches);
        let readout = ps.var(g, self.readout);
        let x = prepend_readout(g, readout, emb, b, p);
        let pos = ps.var(g, self.pos);
        let mut x = add_tiled(g, x, pos);
        let seg = uniform_segments(b, 1 + p);
        for blk in &self.blocks {
            x = blk.forward(g, ps, x, seg.clone());
        }
        let pooled = g.select_rows(x, &strided_rows(b, 1 + p, 0));
        Encoded { seq: x, seg, pooled }
    }
}

/// Token embedding with a readout token, learned positions and a transformer.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    cfg: EncoderConfig,
    table: usize,
    readout: usize,
    pos: usize,
    blocks: Vec<TransformerBlock>,
}

impl TextEncoder {
    pub fn new(init: &mut Init<'_>, cfg: &EncoderConfig) -> Self {
        init.scope("text", |i| TextEncoder {
            cfg: cfg.clone(),
            table: i.uniform("embed", cfg.vocab_size, cfg.d_model, 1.0),
            readout: i.uniform("readout", 1, cfg.d_model, 0.1),
            pos: i.uniform("pos", 1 + cfg.seq_len, cfg.d_model, 0.1),
            blocks: (0..cfg.layers).map(|l| TransformerBlock::new(i, &format!("block{l}"), cfg.d_model, cfg.heads)).collect(),
        })
    }

    /// `tokens` holds `B` sequences of `seq_len` ids, concatenated.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, tokens: &[usize]) -> Result<Encoded> {
        let l = self.cfg.seq_len;
        if tokens.len() % l != 0 {
            return Err(Error::Argument(format!("token count {} is not a multiple of sequence length {l}", tokens.len())));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Argument(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size)));
        }
        let b = tokens.len() / l;
        let table = ps.var(g, self.table);
        let emb = g.select_rows(table, tokens);
        let readout = ps.var(g, self.readout);
        let x = prepend_readout(g, readout, emb, b, l);
        let pos = ps.var(g, self.pos);
        let mut x = add_tiled(g, x, pos);
        let seg = uniform_segments(b, 1 + l);
        for blk in &self.blocks {
            x = blk.forward(g, ps, x, seg.clone());
        }
        let pooled = g.select_rows(x, &strided_rows(b, 1 + l, 0));
        Ok(Encoded { seq: x, seg, pooled })
    }
}

/// Per-shot features. `f_v`, `f_a`, `f_t` are pooled encoder outputs;
/// the fused entries are filled in by the model when available.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBundle {
    pub shot_id: String,
    pub identity_id: String,
    pub forged: bool,
    pub f_v: Vec<f64>,
    pub f_a: Vec<f64>,
    pub f_t: Vec<f64>,
    #[serde(default)]
    pub f_at: Option<Vec<f64>>,
    #[serde(default)]
    pub f_atv: Option<Vec<f64>>,
    #[serde(default)]
    pub f_prime: Option<Vec<f64>>,
}

impl FeatureBundle {
    pub fn modality(&self, m: crate::synthetic::Modality) -> &[f64] {
        match m {
            crate::synthetic::Modality::V => &self.f_v,
            crate::synthetic::Modality::A => &self.f_a,
            crate::synthetic::Modality::T => &self.f_t,
        }
    }
}

/// Raw batch inputs in the layout the encoders expect.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchInputs {
    pub batch: usize,
    /// `[B · n_groups · group_size, C·H·W]`.
    pub frames: Mat,
    /// `[B, M·F]`.
    pub spec: Mat,
    /// `B · seq_len` token ids.
    pub tokens: Vec<usize>,
}

impl BatchInputs {
    pub fn from_shots(shots: &[&ShotRecord], cfg: &EncoderConfig) -> Result<Self> {
        let [c, h, w] = cfg.frame;
        let [m, f] = cfg.spec;
        let mut frames = Vec::new();
        let mut spec = Vec::with_capacity(shots.len() * m * f);
        let mut tokens = Vec::with_capacity(shots.len() * cfg.seq_len);
        for s in shots {
            let fr = &s.frames;
            if (fr.c, fr.h, fr.w) != (c, h, w) {
                return Err(Error::Argument(format!("{}: frame shape {}x{}x{} does not match encoder {c}x{h}x{w}", s.meta.shot_id, fr.c, fr.h, fr.w)));
            }
            if (s.spectrogram.m, s.spectrogram.f) != (m, f) {
                return Err(Error::Argument(format!("{}: spectrogram shape {}x{} does not match encoder {m}x{f}", s.meta.shot_id, s.spectrogram.m, s.spectrogram.f)));
            }
            if s.tokens.len() != cfg.seq_len {
                return Err(Error::Argument(format!("{}: {} tokens, encoder expects {}", s.meta.shot_id, s.tokens.len(), cfg.seq_len)));
            }
            let norm = |x: &f64| (x - cfg.input_mean) / cfg.input_std;
            frames.extend(sample_frame_groups(fr, cfg.n_groups, cfg.group_size)?.data.iter().map(norm));
            spec.extend(s.spectrogram.data.iter().map(norm));
            tokens.extend_from_slice(&s.tokens);
        }
        let b = shots.len();
        Ok(Self { batch: b, frames: Mat::from_vec(b * cfg.n_groups * cfg.group_size, c * h * w, frames), spec: Mat::from_vec(b, m * f, spec), tokens })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn group_start_examples() {
        assert_eq!(group_starts(32, 4, 4).unwrap(), vec![0, 8, 16, 24]);
        assert_eq!(group_starts(16, 4, 4).unwrap(), vec![0, 4, 8, 12]);
        assert_eq!(group_starts(34, 4, 4).unwrap(), vec![0, 8, 16, 24]);
        let err = group_starts(15, 4, 4).unwrap_err().to_string();
        assert!(err.contains("16"), "{err}");
    }

    #[test]
    fn patch_counts() {
        let spec = |m, f| Spectrogram { m, f, data: vec![0.0; m * f] };
        assert_eq!(patchify_spectrogram(&spec(32, 48), (16, 16)).unwrap().rows(), 6);
        let p = patchify_spectrogram(&spec(33, 48), (16, 16)).unwrap();
        assert_eq!(p.rows(), 9);
        assert!(p.data().iter().all(|&v| v == 0.0));
        assert!(patchify_spectrogram(&spec(4, 4), (0, 2)).is_err());
    }

    #[test]
    fn patches_are_mel_major() {
        let s = Spectrogram { m: 2, f: 4, data: (0..8).map(f64::from).collect() };
        let p = patchify_spectrogram(&s, (2, 2)).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn conv_index_matches_direct_convolution() {
        let cfg = EncoderConfig { frame: [2, 8, 8], conv_channels: [3, 2], conv_kernel: 2, ..EncoderConfig::default() };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = VisualEncoder::new(&mut Init::new(&mut store, &mut rng), &cfg);
        let input: Vec<f64> = (0..128).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
        let mut g = Graph::new();
        let x = g.constant(Mat::from_vec(1, 128, input.clone()));
        let cols = g.gather(x, enc.conv1_index(1), 16, 8);
        let y = enc.conv1.forward(&mut g, &store, cols);
        let w = store.get(enc.conv1.w);
        for oy in 0..4 {
            for ox in 0..4 {
                for o in 0..3 {
                    let mut acc = 0.0;
                    for ch in 0..2 {
                        for ky in 0..2 {
                            for kx in 0..2 {
                                acc += input[ch * 64 + (oy * 2 + ky) * 8 + ox * 2 + kx] * w.get(ch * 4 + ky * 2 + kx, o);
                            }
                        }
                    }
                    assert!((g.value(y).get(oy * 4 + ox, o) - acc).abs() < 1e-12);
                }
            }
        }
    }
}
