//! Split evaluation and the ablation runner.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::sigmoid;
use crate::data_model::{Corpus, ShotRecord, Split, NUM_TYPES};
use crate::error::{Error, Result};
use crate::fusion::ModalitySet;
use crate::metrics::{binary_metrics, multilabel_metrics, MetricsReport};
use crate::model::Model;
use crate::reference::{build_reference_index, fuse_with_reference, RefIndex, SelectMode};
use crate::tensor::Mat;
use crate::training::{fit, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub alpha: f64,
    pub threshold: f64,
    pub modalities: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { alpha: 0.001, threshold: 0.5, modalities: "vat".into() }
    }
}

impl EvalConfig {
    pub fn modality_set(&self) -> Result<ModalitySet> {
        ModalitySet::parse(&self.modalities).ok_or_else(|| Error::Config(format!("invalid modality subset {:?}", self.modalities)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub shot_id: String,
    pub p_forged: f64,
    pub p_types: [f64; NUM_TYPES],
}

/// Forward pass with mean-mode reference fusion. `index` must have been built
/// from the exact parameters at `live_version`; it is ignored when alpha is 0.
pub fn predict(model: &Model, shots: &[&ShotRecord], index: Option<&RefIndex>, live_version: u64, cfg: &EvalConfig) -> Result<Vec<Prediction>> {
    let mods = cfg.modality_set()?;
    let feats = model.features(shots, mods)?;
    let d = model.d_model();
    let mut fused = Vec::with_capacity(feats.len() * d);
    for f in &feats {
        let f_atv = f.f_atv.as_deref().unwrap_or_default();
        if cfg.alpha == 0.0 {
            fused.extend_from_slice(f_atv);
            continue;
        }
        let index = index.ok_or_else(|| Error::Reference("reference fusion is enabled but no reference index was supplied".into()))?;
        index.check_fresh(live_version, 0)?;
        let r = index.select(&f.identity_id, SelectMode::Mean)?;
        fused.extend(fuse_with_reference(f_atv, r.f_atv.as_deref().unwrap_or_default(), cfg.alpha)?);
    }
    let (bic, mlc) = model.head_logits(&Mat::from_vec(feats.len(), d, fused));
    Ok(feats
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut p_types = [0.0; NUM_TYPES];
            for (c, p) in p_types.iter_mut().enumerate() {
                *p = sigmoid(mlc.get(i, c));
            }
            Prediction { shot_id: f.shot_id.clone(), p_forged: sigmoid(bic.get(i, 1) - bic.get(i, 0)), p_types }
        })
        .collect())
}

pub fn report_from_predictions(preds: &[Prediction], shots: &[&ShotRecord], threshold: f64) -> Result<MetricsReport> {
    let scores: Vec<f64> = preds.iter().map(|p| p.p_forged).collect();
    let labels: Vec<u8> = shots.iter().map(|s| s.label.y_binary).collect();
    let probs: Vec<[f64; NUM_TYPES]> = preds.iter().map(|p| p.p_types).collect();
    let types: Vec<[u8; NUM_TYPES]> = shots.iter().map(|s| s.label.y_types).collect();
    let b = binary_metrics(&scores, &labels, threshold)?;
    let m = multilabel_metrics(&probs, &types, threshold)?;
    Ok(MetricsReport::new(b, m, preds.len()))
}

/// Evaluates `split` with a supplied index (see [`predict`]).
pub fn evaluate(model: &Model, corpus: &Corpus, split: Split, index: Option<&RefIndex>, live_version: u64, cfg: &EvalConfig) -> Result<MetricsReport> {
    let shots: Vec<&ShotRecord> = corpus.split_indices(split).into_iter().map(|i| &corpus.shots[i]).collect();
    if shots.is_empty() {
        return Err(Error::Argument(format!("split {} is empty", split.name())));
    }
    let preds = predict(model, &shots, index, live_version, cfg)?;
    report_from_predictions(&preds, &shots, cfg.threshold)
}

/// Evaluates `split` after building a fresh mean-mode index when needed.
pub fn evaluate_fresh(model: &Model, corpus: &Corpus, split: Split, corpus_hash: &str, cfg: &EvalConfig) -> Result<MetricsReport> {
    let index = if cfg.alpha == 0.0 { None } else { Some(build_reference_index(corpus, model, cfg.modality_set()?, 0, corpus_hash)?) };
    evaluate(model, corpus, split, index.as_ref(), 0, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Textual,
    Visual,
    Audio,
    VisualTextual,
    AudioTextual,
    VisualAudio,
    NoModalLoss,
    NoIdentity,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Textual,
        Variant::Visual,
        Variant::Audio,
        Variant::VisualTextual,
        Variant::AudioTextual,
        Variant::VisualAudio,
        Variant::NoModalLoss,
        Variant::NoIdentity,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Textual => "Textual",
            Variant::Visual => "Visual",
            Variant::Audio => "Audio",
            Variant::VisualTextual => "Visual+Textual",
            Variant::AudioTextual => "Audio+Textual",
            Variant::VisualAudio => "Visual+Audio",
            Variant::NoModalLoss => "w/o L_modal",
            Variant::NoIdentity => "w/o identity",
            Variant::Full => "Full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| Error::Argument(format!("unknown ablation variant {s:?}")))
    }

    /// Parses `all` or a comma-separated list of variant names.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        if s == "all" {
            return Ok(Self::ALL.to_vec());
        }
        s.split(',').map(|p| Self::parse(p.trim())).collect()
    }

    /// The base config with this variant's flag changes applied.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        let subset = match self {
            Variant::Textual => Some("t"),
            Variant::Visual => Some("v"),
            Variant::Audio => Some("a"),
            Variant::VisualTextual => Some("vt"),
            Variant::AudioTextual => Some("at"),
            Variant::VisualAudio => Some("va"),
            _ => None,
        };
        if let Some(s) = subset {
            c.modality_subset = s.into();
        }
        match self {
            Variant::NoModalLoss => {
                c.use_modal_loss = false;
                c.weights.beta = 0.0;
            }
            Variant::NoIdentity => {
                c.use_identity = false;
                c.weights.gamma = 0.0;
                c.alpha = 0.0;
            }
            _ => {}
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub config: TrainConfig,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v.name())
    }

    pub fn render(&self) -> String {
        let rows: Vec<(String, MetricsReport)> = self.rows.iter().map(|r| (r.variant.clone(), r.metrics.clone())).collect();
        render_table(&rows)
    }
}

/// Trains every variant from the same seed and evaluates it on the test split.
pub fn run_ablation(base: &TrainConfig, corpus: &Corpus, corpus_hash: &str, variants: &[Variant]) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for &v in variants {
        let config = v.apply(base);
        log::info!("ablation variant {}", v.name());
        let outcome = fit(&config, corpus, corpus_hash, None)?;
        let metrics = evaluate_fresh(&outcome.model, corpus, Split::Test, corpus_hash, &config.eval_config())?;
        table.rows.push(AblationRow { variant: v.name().into(), config, metrics });
    }
    Ok(table)
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{:.2}", 100.0 * v))
}

/// Text table with columns ACC, AUC | mAP, CF1, OF1 in percent.
pub fn render_table(rows: &[(String, MetricsReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(7);
    let mut s = String::new();
    let _ = writeln!(s, "{:<width$} | {:>6} {:>6} | {:>6} {:>6} {:>6}", "Variant", "ACC", "AUC", "mAP", "CF1", "OF1");
    let _ = writeln!(s, "{}", "-".repeat(width + 39));
    for (name, m) in rows {
        let _ = writeln!(s, "{:<width$} | {:>6} {:>6} | {:>6} {:>6} {:>6}", name, pct(Some(m.acc)), pct(m.auc), pct(m.map), pct(Some(m.cf1)), pct(Some(m.of1)));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthetic::{generate, GenConfig, SplitCounts};

    fn corpus() -> Corpus {
        let cfg = GenConfig { num_identities: 2, shots_per_identity: SplitCounts { reference: 2, train: 2, val: 0, test: 5 }, seed: 2, ..GenConfig::default() };
        generate(&cfg).unwrap().0
    }

    #[test]
    fn zeroed_heads_score_at_chance() {
        let c = corpus();
        let mut model = Model::new(ModelConfig::default()).unwrap();
        let ids: Vec<usize> = model.params.iter().filter(|(_, n, _)| n.starts_with("heads")).map(|(id, _, _)| id).collect();
        assert!(!ids.is_empty());
        for id in ids {
            model.params.get_mut(id).data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
        let m = evaluate_fresh(&model, &c, Split::Test, "h", &EvalConfig::default()).unwrap();
        let test = c.split_indices(Split::Test);
        let forged = test.iter().filter(|&&i| c.shots[i].label.is_forged()).count() as f64 / test.len() as f64;
        // p = 0.5 is predicted forged under the >= threshold rule.
        assert!((m.acc - forged).abs() < 1e-12);
        assert_eq!(m.auc, Some(0.5));
    }

    #[test]
    fn fusion_off_needs_no_index_and_is_deterministic() {
        let c = corpus();
        let model = Model::new(ModelConfig::default()).unwrap();
        let cfg = EvalConfig { alpha: 0.0, ..EvalConfig::default() };
        let a = evaluate(&model, &c, Split::Test, None, 0, &cfg).unwrap();
        assert_eq!(a, evaluate(&model, &c, Split::Test, None, 0, &cfg).unwrap());
        assert!(matches!(evaluate(&model, &c, Split::Test, None, 0, &EvalConfig::default()), Err(Error::Reference(_))));
        assert!(matches!(evaluate(&model, &c, Split::Val, None, 0, &cfg), Err(Error::Argument(_))));
    }

    #[test]
    fn stale_index_is_refused_at_evaluation() {
        let c = corpus();
        let model = Model::new(ModelConfig::default()).unwrap();
        let cfg = EvalConfig::default();
        let index = build_reference_index(&c, &model, cfg.modality_set().unwrap(), 3, "h").unwrap();
        assert!(matches!(evaluate(&model, &c, Split::Test, Some(&index), 4, &cfg), Err(Error::Stale { .. })));
        assert!(evaluate(&model, &c, Split::Test, Some(&index), 3, &cfg).is_ok());
    }

    #[test]
    fn variant_flags() {
        let base = TrainConfig::default();
        let c = Variant::NoIdentity.apply(&base);
        assert_eq!((c.weights.gamma, c.alpha, c.use_identity), (0.0, 0.0, false));
        assert_eq!(c.weights.beta, base.weights.beta);
        let c = Variant::NoModalLoss.apply(&base);
        assert!(!c.use_modal_loss);
        assert_eq!(Variant::VisualAudio.apply(&base).modality_subset, "va");
        assert_eq!(Variant::Full.apply(&base), base);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!(Variant::parse_list("all").unwrap().len(), 9);
        assert_eq!(Variant::parse_list("Full,w/o identity").unwrap(), vec![Variant::Full, Variant::NoIdentity]);
        assert!(Variant::parse_list("Everything").is_err());
    }

    #[test]
    fn table_layout() {
        let m = MetricsReport { acc: 0.5, auc: None, map: Some(0.25), cf1: 0.0, of1: 1.0, n_samples: 2, per_class_ap: vec![None; NUM_TYPES] };
        let t = render_table(&[("Full".into(), m)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("ACC") && lines[0].contains("OF1"));
        assert!(lines[2].contains("50.00") && lines[2].contains("25.00") && lines[2].contains("100.00"));
    }
}
