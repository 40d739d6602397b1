//! Shots, labels, corpora, the JSONL manifest and the short-shot merge rule.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::Tensor;
use crate::error::{Error, Result};

pub const NUM_TYPES: usize = 7;

/// Forgery categories in label-vector order.
pub const CATEGORY_NAMES: [&str; NUM_TYPES] = ["text_llm", "text_shuffle", "audio_tts", "audio_voice_conversion", "audio_shuffle", "face_swap", "lip_sync"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    TextLlm,
    TextShuffle,
    AudioTts,
    AudioVoiceConversion,
    AudioShuffle,
    FaceSwap,
    LipSync,
}

impl Category {
    pub const ALL: [Category; NUM_TYPES] = [
        Category::TextLlm,
        Category::TextShuffle,
        Category::AudioTts,
        Category::AudioVoiceConversion,
        Category::AudioShuffle,
        Category::FaceSwap,
        Category::LipSync,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        CATEGORY_NAMES[self.index()]
    }

    pub fn from_name(name: &str) -> Option<Self> {
        CATEGORY_NAMES.iter().position(|&n| n == name).map(|i| Self::ALL[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ForgeryLabel {
    pub y_binary: u8,
    pub y_types: [u8; NUM_TYPES],
}

impl ForgeryLabel {
    pub const PRISTINE: ForgeryLabel = ForgeryLabel { y_binary: 0, y_types: [0; NUM_TYPES] };

    pub fn forged(categories: &BTreeSet<Category>) -> Self {
        let mut y_types = [0; NUM_TYPES];
        for c in categories {
            y_types[c.index()] = 1;
        }
        Self { y_binary: u8::from(!categories.is_empty()), y_types }
    }

    /// Checks value ranges and binary/multi-label consistency.
    pub fn check(&self) -> std::result::Result<(), String> {
        if self.y_binary > 1 || self.y_types.iter().any(|&v| v > 1) {
            return Err("label entries must be 0 or 1".into());
        }
        let any = self.y_types.iter().any(|&v| v == 1);
        match (self.y_binary, any) {
            (0, true) => Err("pristine label (y_binary=0) has forgery types set".into()),
            (1, false) => Err("forged label (y_binary=1) has no forgery type set".into()),
            _ => Ok(()),
        }
    }

    pub fn is_forged(&self) -> bool {
        self.y_binary == 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Reference,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Reference => "reference",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            "reference" => Some(Split::Reference),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotMeta {
    pub shot_id: String,
    pub identity_id: String,
    pub source_video_id: String,
    pub split: Split,
    pub duration_s: f64,
}

/// Frame sequence `[T, C, H, W]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Frames {
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Frames {
    pub fn zeros(t: usize, c: usize, h: usize, w: usize) -> Self {
        Self { t, c, h, w, data: vec![0.0; t * c * h * w] }
    }

    pub fn frame_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[i * n..(i + 1) * n]
    }
}

/// Spectrogram `[M, F]` (mel bins × time frames), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub m: usize,
    pub f: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShotRecord {
    pub meta: ShotMeta,
    pub label: ForgeryLabel,
    pub frames: Frames,
    pub spectrogram: Spectrogram,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub shots: Vec<ShotRecord>,
    pub identity_roster: BTreeSet<String>,
}

impl Corpus {
    pub fn from_shots(shots: Vec<ShotRecord>) -> Self {
        let identity_roster = shots.iter().map(|s| s.meta.identity_id.clone()).collect();
        Self { shots, identity_roster }
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.shots.iter().enumerate().filter(|(_, s)| s.meta.split == split).map(|(i, _)| i).collect()
    }

    pub fn find(&self, shot_id: &str) -> Option<&ShotRecord> {
        self.shots.iter().find(|s| s.meta.shot_id == shot_id)
    }
}

/// A manifest tensor reference: a relative path or an inline array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TensorRef {
    Path(String),
    Inline { shape: Vec<usize>, data: Vec<f64> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub shot_id: String,
    pub identity_id: String,
    pub source_video_id: String,
    pub split: Split,
    pub duration_s: f64,
    pub y_binary: u8,
    pub y_types: Vec<u8>,
    pub frames_ref: TensorRef,
    pub spectrogram_ref: TensorRef,
    pub tokens_ref: TensorRef,
}

fn load_ref(r: &TensorRef, base: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    match r {
        TensorRef::Inline { shape, data } => Ok((shape.clone(), data.clone())),
        TensorRef::Path(p) => {
            let t = Tensor::read(&base.join(p))?;
            Ok((t.shape.clone(), t.to_f64()))
        }
    }
}

fn record_to_shot(rec: ManifestRecord, base: &Path, line: usize) -> Result<ShotRecord> {
    let schema = |msg: String| Error::Schema { line, msg };
    let y_types: [u8; NUM_TYPES] = rec.y_types.as_slice().try_into().map_err(|_| schema(format!("y_types must have {NUM_TYPES} entries, got {}", rec.y_types.len())))?;
    let label = ForgeryLabel { y_binary: rec.y_binary, y_types };
    label.check().map_err(|m| Error::Integrity(format!("line {line} ({}): {m}", rec.shot_id)))?;
    if rec.split == Split::Reference && label.is_forged() {
        return Err(Error::Integrity(format!("line {line} ({}): reference set must be pristine", rec.shot_id)));
    }
    if !(rec.duration_s > 0.0 && rec.duration_s.is_finite()) {
        return Err(schema(format!("duration_s must be positive, got {}", rec.duration_s)));
    }
    let (fs, fd) = load_ref(&rec.frames_ref, base)?;
    let [t, c, h, w] = fs.as_slice() else {
        return Err(schema(format!("frames must have rank 4, got shape {fs:?}")));
    };
    let (ss, sd) = load_ref(&rec.spectrogram_ref, base)?;
    let [m, f] = ss.as_slice() else {
        return Err(schema(format!("spectrogram must have rank 2, got shape {ss:?}")));
    };
    let (ts, td) = load_ref(&rec.tokens_ref, base)?;
    if ts.len() != 1 {
        return Err(schema(format!("tokens must have rank 1, got shape {ts:?}")));
    }
    if fd.len() != fs.iter().product::<usize>() || sd.len() != ss.iter().product::<usize>() || td.len() != ts[0] {
        return Err(schema("inline tensor data length does not match its shape".into()));
    }
    let tokens = td
        .iter()
        .map(|&v| if v >= 0.0 && v.fract() == 0.0 { Ok(v as usize) } else { Err(schema(format!("token id {v} is not a non-negative integer"))) })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShotRecord {
        meta: ShotMeta { shot_id: rec.shot_id, identity_id: rec.identity_id, source_video_id: rec.source_video_id, split: rec.split, duration_s: rec.duration_s },
        label,
        frames: Frames { t: *t, c: *c, h: *h, w: *w, data: fd },
        spectrogram: Spectrogram { m: *m, f: *f, data: sd },
        tokens,
    })
}

/// Parses a JSONL manifest; path references resolve against `base`.
pub fn parse_manifest(manifest: &[u8], base: &Path) -> Result<Corpus> {
    let text = std::str::from_utf8(manifest).map_err(|e| Error::Parse { line: 0, msg: format!("manifest is not UTF-8: {e}") })?;
    let mut shots = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(raw).map_err(|e| match e.classify() {
            serde_json::error::Category::Data => Error::Schema { line, msg: e.to_string() },
            _ => Error::Parse { line, msg: e.to_string() },
        })?;
        if !seen.insert(rec.shot_id.clone()) {
            return Err(Error::Integrity(format!("line {line}: duplicate shot_id {}", rec.shot_id)));
        }
        shots.push(record_to_shot(rec, base, line)?);
    }
    Ok(Corpus::from_shots(shots))
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join("manifest.jsonl");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    parse_manifest(&bytes, dir)
}

fn record_for(shot: &ShotRecord, refs: [TensorRef; 3]) -> ManifestRecord {
    let [frames_ref, spectrogram_ref, tokens_ref] = refs;
    ManifestRecord {
        shot_id: shot.meta.shot_id.clone(),
        identity_id: shot.meta.identity_id.clone(),
        source_video_id: shot.meta.source_video_id.clone(),
        split: shot.meta.split,
        duration_s: shot.meta.duration_s,
        y_binary: shot.label.y_binary,
        y_types: shot.label.y_types.to_vec(),
        frames_ref,
        spectrogram_ref,
        tokens_ref,
    }
}

fn push_line(out: &mut String, rec: &ManifestRecord) {
    out.push_str(&serde_json::to_string(rec).expect("manifest record serializes"));
    out.push('\n');
}

/// Manifest with every tensor inlined.
pub fn serialize_inline(corpus: &Corpus) -> String {
    let mut out = String::new();
    for s in &corpus.shots {
        let f = &s.frames;
        let refs = [
            TensorRef::Inline { shape: vec![f.t, f.c, f.h, f.w], data: f.data.clone() },
            TensorRef::Inline { shape: vec![s.spectrogram.m, s.spectrogram.f], data: s.spectrogram.data.clone() },
            TensorRef::Inline { shape: vec![s.tokens.len()], data: s.tokens.iter().map(|&t| t as f64).collect() },
        ];
        push_line(&mut out, &record_for(s, refs));
    }
    out
}

fn to_f32_exact(data: &[f64], what: &str, shot: &str) -> Result<Vec<f32>> {
    data.iter()
        .map(|&v| {
            let x = v as f32;
            if x as f64 == v {
                Ok(x)
            } else {
                Err(Error::Argument(format!("{shot}: {what} value {v} is not representable as f32")))
            }
        })
        .collect()
}

/// Writes `manifest.jsonl` plus one float32/int32 container per tensor under
/// `dir/tensors/`. Values must be exactly representable in the stored dtype.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let tdir = dir.join("tensors");
    fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    let mut out = String::new();
    for s in &corpus.shots {
        let id = &s.meta.shot_id;
        let f = &s.frames;
        let names = [format!("tensors/{id}.frames.rmfd"), format!("tensors/{id}.spec.rmfd"), format!("tensors/{id}.tokens.rmfd")];
        Tensor::f32(vec![f.t, f.c, f.h, f.w], to_f32_exact(&f.data, "frame", id)?).write(&dir.join(&names[0]))?;
        let sp = &s.spectrogram;
        Tensor::f32(vec![sp.m, sp.f], to_f32_exact(&sp.data, "spectrogram", id)?).write(&dir.join(&names[1]))?;
        let toks = s.tokens.iter().map(|&t| i32::try_from(t).map_err(|_| Error::Argument(format!("{id}: token {t} exceeds i32")))).collect::<Result<Vec<_>>>()?;
        Tensor::i32(vec![toks.len()], toks).write(&dir.join(&names[2]))?;
        push_line(&mut out, &record_for(s, names.map(TensorRef::Path)));
    }
    let path = dir.join("manifest.jsonl");
    fs::write(&path, out).map_err(|e| Error::io(&path, e))
}

/// SHA-256 over the manifest and every referenced tensor file, in manifest order.
pub fn corpus_hash(dir: &Path) -> Result<String> {
    let path = dir.join("manifest.jsonl");
    let manifest = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut h = Sha256::new();
    h.update(&manifest);
    let text = String::from_utf8_lossy(&manifest);
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(raw).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        for r in [&rec.frames_ref, &rec.spectrogram_ref, &rec.tokens_ref] {
            if let TensorRef::Path(p) = r {
                let fp = dir.join(p);
                h.update(fs::read(&fp).map_err(|e| Error::io(&fp, e))?);
            }
        }
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub shot_id: Option<String>,
    pub identity_id: Option<String>,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub split_counts: BTreeMap<String, usize>,
    pub reference_counts: BTreeMap<String, usize>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Minimum frame count the default visual sampler needs (4 groups of 4).
pub const DEFAULT_MIN_FRAMES: usize = 16;

pub fn validate_corpus(corpus: &Corpus) -> ValidationReport {
    validate_corpus_with(corpus, DEFAULT_MIN_FRAMES)
}

/// Lists every invariant violation; never fails.
pub fn validate_corpus_with(corpus: &Corpus, min_frames: usize) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let shot_v = |s: &ShotRecord, message: String| Violation { shot_id: Some(s.meta.shot_id.clone()), identity_id: Some(s.meta.identity_id.clone()), message };
    let mut seen = BTreeSet::new();
    let mut video_split: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    let mut suspects: BTreeSet<&str> = BTreeSet::new();
    for s in &corpus.shots {
        *rep.split_counts.entry(s.meta.split.name().to_string()).or_default() += 1;
        if s.meta.split == Split::Reference {
            *rep.reference_counts.entry(s.meta.identity_id.clone()).or_default() += 1;
            if s.label.is_forged() {
                rep.violations.push(shot_v(s, "reference set must be pristine".into()));
            }
        } else {
            suspects.insert(&s.meta.identity_id);
            video_split.entry(&s.meta.source_video_id).or_default().insert(s.meta.split);
        }
        if !seen.insert(s.meta.shot_id.as_str()) {
            rep.violations.push(shot_v(s, "duplicate shot_id".into()));
        }
        if let Err(m) = s.label.check() {
            rep.violations.push(shot_v(s, m));
        }
        if !(s.meta.duration_s > 0.0 && s.meta.duration_s.is_finite()) {
            rep.violations.push(shot_v(s, format!("duration_s must be positive, got {}", s.meta.duration_s)));
        }
        if !corpus.identity_roster.contains(&s.meta.identity_id) {
            rep.violations.push(shot_v(s, "identity missing from roster".into()));
        }
        let f = &s.frames;
        if f.data.len() != f.t * f.c * f.h * f.w || s.spectrogram.data.len() != s.spectrogram.m * s.spectrogram.f {
            rep.violations.push(shot_v(s, "tensor data length does not match shape".into()));
        }
        if f.t < min_frames {
            rep.violations.push(shot_v(s, format!("needs at least {min_frames} frames, has {}", f.t)));
        }
        if !f.data.iter().chain(&s.spectrogram.data).all(|v| v.is_finite()) {
            rep.violations.push(shot_v(s, "non-finite tensor entry".into()));
        }
        if f.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            rep.violations.push(shot_v(s, "frame values must lie in [0, 1]".into()));
        }
    }
    for id in suspects {
        if !rep.reference_counts.contains_key(id) {
            rep.violations.push(Violation { shot_id: None, identity_id: Some(id.to_string()), message: "identity lacks reference media".into() });
        }
    }
    for (video, splits) in video_split {
        if splits.len() > 1 {
            let names: Vec<&str> = splits.iter().map(|s| s.name()).collect();
            rep.violations.push(Violation { shot_id: None, identity_id: None, message: format!("source video {video} crosses splits {}", names.join(",")) });
        }
    }
    rep
}

/// Shots shorter than this are merged with their neighbours.
pub const MIN_SHOT_SECONDS: f64 = 5.0;

/// Repeatedly merges the leftmost shot under [`MIN_SHOT_SECONDS`] with its
/// preceding and following shots (only the existing one at a boundary). The
/// merged shot keeps the earliest shot's metadata with the summed duration.
pub fn merge_short_shots(shots: &[ShotMeta]) -> Vec<ShotMeta> {
    let mut out = shots.to_vec();
    while out.len() > 1 {
        let Some(i) = out.iter().position(|s| s.duration_s < MIN_SHOT_SECONDS) else { break };
        let lo = i.saturating_sub(1);
        let hi = (i + 1).min(out.len() - 1);
        let total = out[lo..=hi].iter().map(|s| s.duration_s).sum();
        let mut merged = out[lo].clone();
        merged.duration_s = total;
        out.splice(lo..=hi, [merged]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(id: &str, d: f64) -> ShotMeta {
        ShotMeta { shot_id: id.into(), identity_id: "p".into(), source_video_id: "v".into(), split: Split::Train, duration_s: d }
    }

    fn durations(v: &[ShotMeta]) -> Vec<f64> {
        v.iter().map(|s| s.duration_s).collect()
    }

    #[test]
    fn merge_examples() {
        let m = |ds: &[f64]| durations(&merge_short_shots(&ds.iter().enumerate().map(|(i, &d)| meta(&format!("s{i}"), d)).collect::<Vec<_>>()));
        assert_eq!(m(&[6.0, 7.0]), vec![6.0, 7.0]);
        assert_eq!(m(&[6.0, 3.0, 7.0]), vec![16.0]);
        assert_eq!(m(&[2.0, 6.0, 7.0]), vec![8.0, 7.0]);
        assert_eq!(m(&[6.0, 2.0]), vec![8.0]);
        assert_eq!(m(&[1.0, 1.0]), vec![2.0]);
        assert!(m(&[]).is_empty());
    }

    #[test]
    fn merged_shot_keeps_earliest_id() {
        let out = merge_short_shots(&[meta("a", 6.0), meta("b", 3.0), meta("c", 7.0)]);
        assert_eq!(out[0].shot_id, "a");
    }

    #[test]
    fn label_consistency() {
        assert!(ForgeryLabel::PRISTINE.check().is_ok());
        assert!(ForgeryLabel { y_binary: 0, y_types: [1, 0, 0, 0, 0, 0, 0] }.check().is_err());
        assert!(ForgeryLabel { y_binary: 1, y_types: [0; 7] }.check().is_err());
        let l = ForgeryLabel::forged(&[Category::FaceSwap].into());
        assert_eq!(l.y_types, [0, 0, 0, 0, 0, 1, 0]);
    }

    #[test]
    fn category_names_follow_label_order() {
        for (i, c) in Category::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(Category::from_name(c.name()), Some(*c));
        }
    }
}
