//! Seeded synthetic multimodal corpora.
//!
//! Every shot carries a planted state: the claimed identity's per-modality
//! signatures and a shared latent `z`. Frames, spectrogram and tokens are
//! fixed random linear renders of (signature, latent) plus noise, so the
//! three modalities of a pristine shot agree on `z` and on the identity.
//! Forgeries edit the planted state of one modality and re-render only that
//! modality.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_model::{validate_corpus, write_corpus, Category, Corpus, ForgeryLabel, Frames, ShotMeta, ShotRecord, Spectrogram, Split};
use crate::error::{Error, Result};
use crate::tensor::{dot, norm};

/// Derives an independent 64-bit seed from a base seed and a string key.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn rng_for(seed: u64, key: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, key))
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    V,
    A,
    T,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::V, Modality::A, Modality::T];

    pub fn name(self) -> &'static str {
        match self {
            Modality::V => "v",
            Modality::A => "a",
            Modality::T => "t",
        }
    }
}

/// Per-identity unit signatures and the face-swap donor map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityBank {
    pub ids: Vec<String>,
    pub sig_v: Vec<Vec<f64>>,
    pub sig_a: Vec<Vec<f64>>,
    pub sig_t: Vec<Vec<f64>>,
    /// `lookalike[i]` is the donor index for identity `i`; never `i`.
    pub lookalike: Vec<usize>,
}

/// Maximum |cosine| between two identities' same-modality signatures.
pub const SIGNATURE_SEPARATION: f64 = 0.5;

pub fn identity_name(i: usize) -> String {
    format!("id{i:02}")
}

pub fn make_identity_bank(num_identities: usize, d_sig: usize, seed: u64) -> Result<IdentityBank> {
    if num_identities < 2 {
        return Err(Error::Config(format!("need at least 2 identities for a face-swap donor, got {num_identities}")));
    }
    if d_sig == 0 {
        return Err(Error::Config("d_sig must be positive".into()));
    }
    let mut rng = rng_for(seed, "identity-bank");
    let draw = |rng: &mut ChaCha8Rng| -> Result<Vec<Vec<f64>>> {
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(num_identities);
        let mut attempts = 0usize;
        while out.len() < num_identities {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::Config(format!("cannot place {num_identities} separated signatures in {d_sig} dimensions")));
            }
            let v = unit(normal_vec(rng, d_sig));
            if out.iter().all(|u| dot(u, &v).abs() < SIGNATURE_SEPARATION) {
                out.push(v);
            }
        }
        Ok(out)
    };
    let sig_v = draw(&mut rng)?;
    let sig_a = draw(&mut rng)?;
    let sig_t = draw(&mut rng)?;
    let mut perm: Vec<usize> = (0..num_identities).collect();
    perm.shuffle(&mut rng);
    let mut lookalike = vec![0; num_identities];
    for i in 0..num_identities {
        lookalike[perm[i]] = perm[(i + 1) % num_identities];
    }
    Ok(IdentityBank { ids: (0..num_identities).map(identity_name).collect(), sig_v, sig_a, sig_t, lookalike })
}

impl IdentityBank {
    pub fn index_of(&self, identity_id: &str) -> Result<usize> {
        self.ids.iter().position(|i| i == identity_id).ok_or_else(|| Error::UnknownIdentity(identity_id.to_string()))
    }

    pub fn signature(&self, m: Modality, i: usize) -> &[f64] {
        match m {
            Modality::V => &self.sig_v[i],
            Modality::A => &self.sig_a[i],
            Modality::T => &self.sig_t[i],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub f: usize,
    pub l: usize,
    pub d_sig: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self { t: 16, c: 3, h: 32, w: 32, m: 32, f: 48, l: 24, d_sig: 16 }
    }
}

/// Rendering and forgery magnitudes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalConfig {
    /// Latent dimension of the shared content variable `z`.
    pub d_lat: usize,
    /// Quantisation bins per token component.
    pub q_bins: usize,
    /// Scale of the signature/latent render in frames and spectrograms.
    pub amp: f64,
    /// Scale applied to signatures before rendering.
    pub sig_gain: f64,
    pub noise: f64,
    pub tok_noise: f64,
    /// Synthetic-speech band artifact added by TTS and voice conversion.
    pub tts_artifact: f64,
    /// Blending seam pattern added by face swap.
    pub seam: f64,
    /// Weight of the donor signature in a face swap.
    pub swap_weight: f64,
    /// Off-identity deviation of imperfect clones, per category.
    pub swap_dev: f64,
    pub tts_dev: f64,
    pub vc_dev: f64,
    pub llm_dev: f64,
    /// Per-frame latent jitter of lip sync.
    pub lip_jitter: f64,
}

impl Default for SignalConfig {
    fn default() -> Self {
        Self {
            d_lat: 4,
            q_bins: 8,
            amp: 0.08,
            sig_gain: 4.0,
            noise: 0.02,
            tok_noise: 0.15,
            tts_artifact: 0.05,
            seam: 0.0,
            swap_weight: 0.5,
            swap_dev: 0.4,
            tts_dev: 0.4,
            vc_dev: 0.8,
            llm_dev: 0.6,
            lip_jitter: 0.7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub reference: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixEntry {
    pub categories: Vec<Category>,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub num_identities: usize,
    pub shots_per_identity: SplitCounts,
    /// Fraction of train/val/test shots that are forged (rounded per identity).
    pub forged_fraction: f64,
    pub forgery_mix: Vec<MixEntry>,
    pub dims: Dims,
    pub seed: u64,
    pub inconsistency_strength: f64,
    pub signal: SignalConfig,
}

pub fn default_forgery_mix() -> Vec<MixEntry> {
    use Category::*;
    let combos: [&[Category]; 11] = [
        &[FaceSwap],
        &[LipSync],
        &[AudioTts],
        &[AudioVoiceConversion],
        &[AudioShuffle],
        &[TextLlm],
        &[TextShuffle],
        &[FaceSwap, AudioVoiceConversion],
        &[TextLlm, AudioTts, LipSync],
        &[AudioTts, LipSync],
        &[TextShuffle, AudioShuffle],
    ];
    combos.iter().map(|c| MixEntry { categories: c.to_vec(), weight: 1.0 }).collect()
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_identities: 8,
            shots_per_identity: SplitCounts { reference: 8, train: 96, val: 16, test: 24 },
            forged_fraction: 0.5,
            forgery_mix: default_forgery_mix(),
            dims: Dims::default(),
            seed: 11,
            inconsistency_strength: 1.0,
            signal: SignalConfig::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.shots_per_identity;
        if c.train == 0 || c.reference == 0 {
            return Err(Error::Config("train and reference counts must be at least 1".into()));
        }
        if !(self.inconsistency_strength > 0.0 && self.inconsistency_strength <= 1.0) {
            return Err(Error::Config(format!("inconsistency_strength must lie in (0, 1], got {}", self.inconsistency_strength)));
        }
        if !(0.0..=1.0).contains(&self.forged_fraction) {
            return Err(Error::Config(format!("forged_fraction must lie in [0, 1], got {}", self.forged_fraction)));
        }
        if self.forged_fraction > 0.0 && (self.forgery_mix.is_empty() || self.forgery_mix.iter().any(|m| m.categories.is_empty() || !(m.weight > 0.0))) {
            return Err(Error::Config("forgery_mix entries need non-empty categories and positive weights".into()));
        }
        let d = &self.dims;
        if [d.t, d.c, d.h, d.w, d.m, d.f, d.l, d.d_sig, self.signal.d_lat, self.signal.q_bins].contains(&0) {
            return Err(Error::Config("all dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Token vocabulary: one bin range per token component.
    pub fn vocab_size(&self) -> usize {
        (self.dims.d_sig + self.signal.d_lat) * self.signal.q_bins
    }
}

/// Fixed random render matrices shared by every shot of a corpus.
#[derive(Clone, Debug)]
pub struct Renderer {
    dims: Dims,
    sig: SignalConfig,
    /// `[P, d_sig]` and `[P, d_lat]` row-major, `P = C·H·W`.
    frame_sig: Vec<f64>,
    frame_lat: Vec<f64>,
    seam: Vec<f64>,
    /// `[M·F, d_sig]` and `[M·F, d_lat]`.
    spec_sig: Vec<f64>,
    spec_lat: Vec<f64>,
    tts_band: Vec<f64>,
}

impl Renderer {
    pub fn new(dims: Dims, sig: SignalConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, "renderer");
        let p = dims.c * dims.h * dims.w;
        let s = dims.m * dims.f;
        let frame_sig = normal_vec(&mut rng, p * dims.d_sig);
        let frame_lat = normal_vec(&mut rng, p * sig.d_lat);
        let seam = normal_vec(&mut rng, p);
        let spec_sig = normal_vec(&mut rng, s * dims.d_sig);
        let spec_lat = normal_vec(&mut rng, s * sig.d_lat);
        let mut tts_band = vec![0.0; s];
        for (i, v) in normal_vec(&mut rng, s).into_iter().enumerate() {
            if i / dims.f >= dims.m / 2 {
                tts_band[i] = v;
            }
        }
        Self { dims, sig, frame_sig, frame_lat, seam, spec_sig, spec_lat, tts_band }
    }

    fn project(mat: &[f64], v: &[f64], row: usize) -> f64 {
        dot(&mat[row * v.len()..(row + 1) * v.len()], v)
    }

    pub fn frames(&self, st: &Planted, rng: &mut ChaCha8Rng) -> Frames {
        let d = self.dims;
        let p = d.c * d.h * d.w;
        let sv: Vec<f64> = st.sig_v.iter().map(|x| x * self.sig.sig_gain).collect();
        let base: Vec<f64> = (0..p).map(|i| Self::project(&self.frame_sig, &sv, i)).collect();
        let seam = st.seam * self.sig.seam;
        let mut data = Vec::with_capacity(d.t * p);
        for t in 0..d.t {
            let zt = st.z_v_frame(t, self.sig.d_lat);
            for i in 0..p {
                let x = 0.5 + self.sig.amp * (base[i] + Self::project(&self.frame_lat, zt, i)) + self.sig.noise * rng.sample::<f64, _>(StandardNormal) + seam * self.seam[i];
                data.push(x.clamp(0.0, 1.0) as f32 as f64);
            }
        }
        Frames { t: d.t, c: d.c, h: d.h, w: d.w, data }
    }

    pub fn spectrogram(&self, st: &Planted, rng: &mut ChaCha8Rng) -> Spectrogram {
        let d = self.dims;
        let sa: Vec<f64> = st.sig_a.iter().map(|x| x * self.sig.sig_gain).collect();
        let art = st.tts * self.sig.tts_artifact;
        let data = (0..d.m * d.f)
            .map(|i| {
                let x = 0.5 + self.sig.amp * (Self::project(&self.spec_sig, &sa, i) + Self::project(&self.spec_lat, &st.z_a, i)) + self.sig.noise * rng.sample::<f64, _>(StandardNormal) + art * self.tts_band[i];
                x as f32 as f64
            })
            .collect();
        Spectrogram { m: d.m, f: d.f, data }
    }

    /// Token `l` encodes component `l mod C` of `(gain·s_t, z_t)`, quantised
    /// into `q_bins` bins over `[-2.5, 2.5]`.
    pub fn tokens(&self, st: &Planted, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let q = self.sig.q_bins;
        let comps: Vec<f64> = st.sig_t.iter().map(|x| x * self.sig.sig_gain).chain(st.z_t.iter().copied()).collect();
        let c = comps.len();
        (0..self.dims.l)
            .map(|l| {
                let k = l % c;
                let v = comps[k] + self.sig.tok_noise * rng.sample::<f64, _>(StandardNormal);
                let bin = ((v + 2.5) / 5.0 * q as f64).floor().clamp(0.0, (q - 1) as f64) as usize;
                k * q + bin
            })
            .collect()
    }
}

/// Planted generator state of one shot (ground truth for oracle tests).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Planted {
    pub identity: usize,
    pub sig_v: Vec<f64>,
    pub sig_a: Vec<f64>,
    pub sig_t: Vec<f64>,
    /// Shared content latent of the pristine source.
    pub z: Vec<f64>,
    /// Per-frame visual latents, `T × d_lat`; empty means `z` in every frame.
    pub z_v: Vec<f64>,
    pub z_a: Vec<f64>,
    pub z_t: Vec<f64>,
    pub tts: f64,
    pub seam: f64,
}

impl Planted {
    fn z_v_frame(&self, t: usize, d_lat: usize) -> &[f64] {
        if self.z_v.is_empty() {
            &self.z
        } else {
            &self.z_v[t * d_lat..(t + 1) * d_lat]
        }
    }
}

/// A generated shot together with its planted state.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticShot {
    pub record: ShotRecord,
    pub planted: Planted,
}

/// Everything needed to render shots for one corpus.
pub struct Generator {
    pub config: GenConfig,
    pub bank: IdentityBank,
    pub renderer: Renderer,
}

impl Generator {
    pub fn new(config: GenConfig) -> Result<Self> {
        config.validate()?;
        let bank = make_identity_bank(config.num_identities, config.dims.d_sig, config.seed)?;
        let renderer = Renderer::new(config.dims, config.signal.clone(), config.seed);
        Ok(Self { config, bank, renderer })
    }
}

/// Renders a pristine shot of `identity_id`; all randomness comes from `seed`.
pub fn synthesize_pristine_shot(gen: &Generator, identity_id: &str, meta: ShotMeta, seed: u64) -> Result<SyntheticShot> {
    let ident = gen.bank.index_of(identity_id)?;
    let mut rng = rng_for(seed, "latent");
    let z = normal_vec(&mut rng, gen.config.signal.d_lat);
    let planted = Planted {
        identity: ident,
        sig_v: gen.bank.sig_v[ident].clone(),
        sig_a: gen.bank.sig_a[ident].clone(),
        sig_t: gen.bank.sig_t[ident].clone(),
        z_v: Vec::new(),
        z_a: z.clone(),
        z_t: z.clone(),
        z,
        tts: 0.0,
        seam: 0.0,
    };
    let record = ShotRecord {
        meta: ShotMeta { identity_id: identity_id.to_string(), ..meta },
        label: ForgeryLabel::PRISTINE,
        frames: gen.renderer.frames(&planted, &mut rng_for(seed, "frames")),
        spectrogram: gen.renderer.spectrogram(&planted, &mut rng_for(seed, "spectrogram")),
        tokens: gen.renderer.tokens(&planted, &mut rng_for(seed, "tokens")),
    };
    Ok(SyntheticShot { record, planted })
}

/// Applies the selected forgeries to a pristine shot. Only modalities touched
/// by a selected category are re-rendered; the claimed identity is kept.
pub fn apply_forgery(shot: &SyntheticShot, categories: &BTreeSet<Category>, gen: &Generator, seed: u64, strength: f64) -> Result<SyntheticShot> {
    if categories.is_empty() {
        return Err(Error::Argument("forgery needs at least one category".into()));
    }
    if shot.record.label.is_forged() {
        return Err(Error::State(format!("{} is already forged", shot.record.meta.shot_id)));
    }
    let cfg = &gen.config.signal;
    let bank = &gen.bank;
    let k = strength;
    let n_id = bank.ids.len();
    let mut rng = rng_for(seed, "forgery");
    let mut st = shot.planted.clone();
    let me = st.identity;
    let mix = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| (1.0 - k) * x + k * y).collect() };
    let other = |rng: &mut ChaCha8Rng| -> usize {
        let j = rng.random_range(0..n_id - 1);
        if j >= me {
            j + 1
        } else {
            j
        }
    };
    // Unit vector moved off `v` by `amt·k` along a random orthogonal direction.
    let deviate = |rng: &mut ChaCha8Rng, v: &[f64], amt: f64| -> Vec<f64> {
        let mut d = normal_vec(rng, v.len());
        let p = dot(&d, v);
        d.iter_mut().zip(v).for_each(|(x, y)| *x -= p * y);
        let d = unit(d);
        unit(v.iter().zip(&d).map(|(x, y)| x + k * amt * y).collect())
    };
    let (mut touch_v, mut touch_a, mut touch_t) = (false, false, false);
    for c in categories {
        match c {
            Category::TextLlm => {
                st.z_t = mix(&st.z, &normal_vec(&mut rng, cfg.d_lat));
                st.sig_t = deviate(&mut rng, &st.sig_t, cfg.llm_dev);
                touch_t = true;
            }
            Category::TextShuffle => {
                let j = other(&mut rng);
                st.sig_t = unit(mix(&st.sig_t, &bank.sig_t[j]));
                touch_t = true;
            }
            Category::AudioTts => {
                st.z_a = mix(&st.z, &normal_vec(&mut rng, cfg.d_lat));
                st.sig_a = deviate(&mut rng, &st.sig_a, cfg.tts_dev);
                st.tts = k;
                touch_a = true;
            }
            Category::AudioVoiceConversion => {
                st.z_a = mix(&st.z, &normal_vec(&mut rng, cfg.d_lat));
                st.sig_a = deviate(&mut rng, &st.sig_a, cfg.vc_dev);
                st.tts = k;
                touch_a = true;
            }
            Category::AudioShuffle => {
                let j = other(&mut rng);
                st.sig_a = unit(mix(&st.sig_a, &bank.sig_a[j]));
                st.z_a = mix(&st.z, &normal_vec(&mut rng, cfg.d_lat));
                touch_a = true;
            }
            Category::FaceSwap => {
                let donor = &bank.sig_v[bank.lookalike[me]];
                let w = k * cfg.swap_weight;
                let hybrid = unit(st.sig_v.iter().zip(donor).map(|(x, y)| (1.0 - w) * x + w * y).collect());
                st.sig_v = deviate(&mut rng, &hybrid, cfg.swap_dev);
                st.seam = k;
                touch_v = true;
            }
            Category::LipSync => {
                let t = gen.config.dims.t;
                st.z_v = (0..t).flat_map(|_| st.z.clone()).collect();
                for x in st.z_v.iter_mut() {
                    *x += k * cfg.lip_jitter * rng.sample::<f64, _>(StandardNormal);
                }
                touch_v = true;
            }
        }
    }
    let mut record = shot.record.clone();
    record.label = ForgeryLabel::forged(categories);
    if touch_v {
        record.frames = gen.renderer.frames(&st, &mut rng_for(seed, "frames"));
    }
    if touch_a {
        record.spectrogram = gen.renderer.spectrogram(&st, &mut rng_for(seed, "spectrogram"));
    }
    if touch_t {
        record.tokens = gen.renderer.tokens(&st, &mut rng_for(seed, "tokens"));
    }
    Ok(SyntheticShot { record, planted: st })
}

/// Planted bookkeeping for one generated shot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotReport {
    pub shot_id: String,
    pub identity_id: String,
    pub split: Split,
    pub categories: Vec<Category>,
    pub planted: Planted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenReport {
    pub config: GenConfig,
    pub vocab_size: usize,
    pub lookalike: BTreeMap<String, String>,
    pub shots: Vec<ShotReport>,
}

fn pick_mix<'a>(mix: &'a [MixEntry], rng: &mut ChaCha8Rng) -> &'a MixEntry {
    let total: f64 = mix.iter().map(|m| m.weight).sum();
    let mut u = rng.random_range(0.0..total);
    for m in mix {
        if u < m.weight {
            return m;
        }
        u -= m.weight;
    }
    mix.last().expect("non-empty mix")
}

/// Generates the full corpus in memory. Each pristine train/val/test shot
/// is its own source video; forged shots are derived from a pristine shot of
/// the same identity and split and share its source video id.
pub fn generate(config: &GenConfig) -> Result<(Corpus, GenReport)> {
    let gen = Generator::new(config.clone())?;
    let counts = config.shots_per_identity;
    let mut shots = Vec::new();
    let mut reports = Vec::new();
    let mut push = |s: SyntheticShot, cats: Vec<Category>| {
        reports.push(ShotReport { shot_id: s.record.meta.shot_id.clone(), identity_id: s.record.meta.identity_id.clone(), split: s.record.meta.split, categories: cats, planted: s.planted });
        shots.push(s.record);
    };
    for id in &gen.bank.ids {
        for (split, n) in [(Split::Reference, counts.reference), (Split::Train, counts.train), (Split::Val, counts.val), (Split::Test, counts.test)] {
            if n == 0 {
                continue;
            }
            let n_forged = if split == Split::Reference { 0 } else { ((n as f64 * config.forged_fraction).round() as usize).min(n.saturating_sub(1)) };
            let n_pristine = n - n_forged;
            let mut dur_rng = rng_for(config.seed, &format!("{id}-{}-durations", split.name()));
            let mut pristine = Vec::with_capacity(n_pristine);
            for k in 0..n_pristine {
                let shot_id = format!("{id}-{}-{k:03}", split.name());
                let meta = ShotMeta { shot_id: shot_id.clone(), identity_id: id.clone(), source_video_id: format!("{id}-{}-v{k:03}", split.name()), split, duration_s: dur_rng.random_range(5.0..20.0f64).round() };
                let s = synthesize_pristine_shot(&gen, id, meta, derive_seed(config.seed, &shot_id))?;
                pristine.push(s.clone());
                push(s, Vec::new());
            }
            for k in 0..n_forged {
                let shot_id = format!("{id}-{}-{:03}", split.name(), n_pristine + k);
                let seed = derive_seed(config.seed, &shot_id);
                let src = &pristine[k % n_pristine];
                let cats: BTreeSet<Category> = pick_mix(&config.forgery_mix, &mut rng_for(seed, "mix")).categories.iter().copied().collect();
                let mut f = apply_forgery(src, &cats, &gen, seed, config.inconsistency_strength)?;
                f.record.meta.shot_id = shot_id;
                push(f, cats.into_iter().collect());
            }
        }
    }
    let corpus = Corpus::from_shots(shots);
    let lookalike = gen.bank.lookalike.iter().enumerate().map(|(i, &j)| (gen.bank.ids[i].clone(), gen.bank.ids[j].clone())).collect();
    let report = GenReport { config: config.clone(), vocab_size: config.vocab_size(), lookalike, shots: reports };
    let v = validate_corpus(&corpus);
    if !v.is_valid() {
        return Err(Error::Integrity(format!("generated corpus failed validation: {:?}", v.violations)));
    }
    Ok((corpus, report))
}

/// Generates a corpus and writes `manifest.jsonl`, tensor files and
/// `gen_report.json` under `out`.
pub fn build_corpus(config: &GenConfig, out: &Path) -> Result<(Corpus, GenReport)> {
    let (corpus, report) = generate(config)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_corpus(&corpus, out)?;
    let path = out.join("gen_report.json");
    let json = serde_json::to_vec_pretty(&report).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok((corpus, report))
}

/// Pearson correlation over paired samples; `None` for fewer than 2 samples
/// or zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> GenConfig {
        GenConfig { num_identities: 2, shots_per_identity: SplitCounts { reference: 2, train: 4, val: 0, test: 0 }, seed: 11, ..GenConfig::default() }
    }

    fn meta(id: &str) -> ShotMeta {
        ShotMeta { shot_id: id.into(), identity_id: String::new(), source_video_id: format!("{id}-v"), split: Split::Train, duration_s: 6.0 }
    }

    #[test]
    fn bank_is_deterministic_and_separated() {
        assert_eq!(make_identity_bank(2, 8, 7).unwrap(), make_identity_bank(2, 8, 7).unwrap());
        let b = make_identity_bank(5, 16, 3).unwrap();
        let mut pairs = 0;
        for i in 0..5 {
            assert!((dot(&b.sig_v[i], &b.sig_v[i]) - 1.0).abs() < 1e-12);
            assert_ne!(b.lookalike[i], i);
            for j in i + 1..5 {
                assert!(dot(&b.sig_v[i], &b.sig_v[j]) < 0.5);
                pairs += 1;
            }
        }
        assert_eq!(pairs, 10);
        assert!(make_identity_bank(1, 8, 0).is_err());
    }

    #[test]
    fn pristine_shots_are_deterministic_and_seed_dependent() {
        let gen = Generator::new(small_config()).unwrap();
        let a = synthesize_pristine_shot(&gen, "id00", meta("s"), 1).unwrap();
        assert_eq!(a, synthesize_pristine_shot(&gen, "id00", meta("s"), 1).unwrap());
        assert_eq!(a.record.label, ForgeryLabel::PRISTINE);
        let b = synthesize_pristine_shot(&gen, "id00", meta("s"), 2).unwrap();
        let linf = a.record.frames.data.iter().zip(&b.record.frames.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(linf > 0.0);
        assert!(matches!(synthesize_pristine_shot(&gen, "nobody", meta("s"), 1), Err(Error::UnknownIdentity(_))));
    }

    #[test]
    fn forgery_touches_only_its_modality() {
        let gen = Generator::new(small_config()).unwrap();
        let p = synthesize_pristine_shot(&gen, "id01", meta("s"), 5).unwrap();
        let f = apply_forgery(&p, &[Category::AudioTts].into(), &gen, 9, 1.0).unwrap();
        assert_eq!(f.record.frames, p.record.frames);
        assert_eq!(f.record.tokens, p.record.tokens);
        assert_ne!(f.record.spectrogram, p.record.spectrogram);
        assert_eq!(f.record.meta.identity_id, "id01");
        let fs = apply_forgery(&p, &[Category::FaceSwap].into(), &gen, 9, 1.0).unwrap();
        assert_eq!(fs.record.label.y_types, [0, 0, 0, 0, 0, 1, 0]);
        assert_eq!(fs.record.label.y_binary, 1);
        assert!(matches!(apply_forgery(&p, &BTreeSet::new(), &gen, 9, 1.0), Err(Error::Argument(_))));
        assert!(matches!(apply_forgery(&f, &[Category::LipSync].into(), &gen, 9, 1.0), Err(Error::State(_))));
    }

    #[test]
    fn forgery_breaks_audio_text_latent_agreement() {
        let gen = Generator::new(small_config()).unwrap();
        let cats: BTreeSet<Category> = [Category::TextLlm, Category::AudioTts, Category::LipSync].into();
        let (mut pa, mut pt, mut fa, mut ft) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for k in 0..200u64 {
            let p = synthesize_pristine_shot(&gen, "id00", meta("s"), k).unwrap();
            let f = apply_forgery(&p, &cats, &gen, 1000 + k, 1.0).unwrap();
            pa.extend(&p.planted.z_a);
            pt.extend(&p.planted.z_t);
            fa.extend(&f.planted.z_a);
            ft.extend(&f.planted.z_t);
        }
        assert!(pearson(&pa, &pt).unwrap() > 0.8);
        assert!(pearson(&fa, &ft).unwrap().abs() < 0.2);
    }

    #[test]
    fn corpus_counts() {
        let (corpus, report) = generate(&small_config()).unwrap();
        assert_eq!(corpus.shots.len(), 12);
        let refs: Vec<_> = corpus.shots.iter().filter(|s| s.meta.split == Split::Reference).collect();
        assert_eq!(refs.len(), 4);
        assert!(refs.iter().all(|s| !s.label.is_forged()));
        let forged = corpus.shots.iter().filter(|s| s.meta.split == Split::Train && s.label.is_forged()).count();
        assert_eq!(forged, 4);
        assert_eq!(report.shots.len(), 12);
        assert!(validate_corpus(&corpus).is_valid());
    }

    #[test]
    fn forged_shots_share_a_pristine_source_video() {
        let (corpus, _) = generate(&small_config()).unwrap();
        for s in corpus.shots.iter().filter(|s| s.label.is_forged()) {
            assert!(corpus.shots.iter().any(|p| !p.label.is_forged() && p.meta.source_video_id == s.meta.source_video_id));
        }
    }
}
