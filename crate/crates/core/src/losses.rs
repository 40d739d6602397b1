//! Contrastive and classification objectives.
//!
//! Every contrastive term is an InfoNCE over cosine similarities,
//! `−log softmax(σ(anchor, c)/τ)[positive]`, evaluated on a graph so the
//! same code serves the value API and training. Excluded candidates are
//! masked with `−inf`, which drops them from the log-sum-exp exactly.

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data_model::{ForgeryLabel, NUM_TYPES};
use crate::encoders::FeatureBundle;
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, ParamStore};
use crate::synthetic::Modality;
use crate::tensor::{norm, Mat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub tau: f64,
    /// Directed (anchor modality, candidate modality) pairs.
    pub modality_pairs: Vec<(Modality, Modality)>,
    pub include_positive_in_denominator: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        use Modality::*;
        Self { tau: 1.0, modality_pairs: vec![(A, V), (A, T), (V, A), (T, A)], include_positive_in_denominator: true }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Argument(format!("tau must be positive, got {}", self.tau)));
        }
        if let Some((p, _)) = self.modality_pairs.iter().find(|(p, q)| p == q) {
            return Err(Error::Argument(format!("self-pair ({0},{0}) is not allowed", p.name())));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { beta: 0.2, gamma: 0.2 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_bic: f64,
    pub l_mlc: f64,
    pub l_modal: f64,
    pub l_identity: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomputes the weighted total with the same arithmetic.
    pub fn total_matches(&self, w: &LossWeights) -> bool {
        weighted_total(self.l_bic, self.l_mlc, self.l_modal, self.l_identity, w).to_bits() == self.total.to_bits()
    }
}

fn weighted_total(l_bic: f64, l_mlc: f64, l_modal: f64, l_identity: f64, w: &LossWeights) -> f64 {
    l_bic + l_mlc + w.beta * l_modal + w.gamma * l_identity
}

/// `total = l_bic + l_mlc + β·l_modal + γ·l_identity`.
pub fn total_loss(l_bic: f64, l_mlc: f64, l_modal: f64, l_identity: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown { l_bic, l_mlc, l_modal, l_identity, total: weighted_total(l_bic, l_mlc, l_modal, l_identity, w) }
}

/// One InfoNCE term: anchor row, positive candidate column, negative
/// candidate columns (distinct, not containing the positive), and weight.
#[derive(Clone, Debug, PartialEq)]
pub struct NceTerm {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
    pub weight: f64,
}

/// `Σ weight · InfoNCE` over `terms`, as a `[1, 1]` node.
pub fn nce_graph(g: &mut Graph, anchors: Var, candidates: Var, terms: &[NceTerm], tau: f64, include_positive: bool) -> Var {
    let an = g.row_l2_normalize(anchors);
    let cn = g.row_l2_normalize(candidates);
    let sim = g.matmul_nt(an, cn);
    let logits = g.scale(sim, 1.0 / tau);
    let nc = g.value(candidates).rows();
    let nt = terms.len();
    let mut rows = Vec::with_capacity(nt);
    let mut mask = Mat::filled(nt, nc, f64::NEG_INFINITY);
    let mut pos_idx = Vec::with_capacity(nt);
    let mut weights = Vec::with_capacity(nt);
    for (r, t) in terms.iter().enumerate() {
        rows.push(t.anchor);
        if include_positive {
            mask.set(r, t.positive, 0.0);
        }
        for &n in &t.negatives {
            mask.set(r, n, 0.0);
        }
        pos_idx.push(t.anchor * nc + t.positive);
        weights.push(t.weight);
    }
    let per_term = g.select_rows(logits, &rows);
    let masked = g.add_const(per_term, Rc::new(mask));
    let lse = g.logsumexp_rows(masked);
    let pos = g.gather(logits, Rc::new(pos_idx), nt, 1);
    let losses = g.sub(lse, pos);
    let weighted = g.mul_const(losses, Rc::new(Mat::from_vec(nt, 1, weights)));
    g.sum_all(weighted)
}

fn check_vectors<'a>(vs: impl IntoIterator<Item = &'a [f64]>, d: usize) -> Result<()> {
    for v in vs {
        if v.len() != d {
            return Err(Error::Argument(format!("feature of length {} where {d} expected", v.len())));
        }
        if norm(v) == 0.0 {
            return Err(Error::Similarity("zero-norm feature".into()));
        }
    }
    Ok(())
}

fn stack(vs: &[&[f64]]) -> Mat {
    let d = vs.first().map_or(0, |v| v.len());
    Mat::from_vec(vs.len(), d, vs.iter().flat_map(|v| v.iter().copied()).collect())
}

/// InfoNCE of one anchor against `candidates`, where every candidate other
/// than the positive is a negative.
pub fn info_nce(anchor: &[f64], candidates: &[Vec<f64>], positive_index: usize, tau: f64) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Argument("info_nce needs at least one candidate".into()));
    }
    if positive_index >= candidates.len() {
        return Err(Error::Argument(format!("positive index {positive_index} out of {} candidates", candidates.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::Argument(format!("tau must be positive, got {tau}")));
    }
    check_vectors(std::iter::once(anchor).chain(candidates.iter().map(Vec::as_slice)), anchor.len())?;
    let mut g = Graph::new();
    let a = g.constant(Mat::row_vector(anchor.to_vec()));
    let refs: Vec<&[f64]> = candidates.iter().map(Vec::as_slice).collect();
    let c = g.constant(stack(&refs));
    let term = NceTerm { anchor: 0, positive: positive_index, negatives: (0..candidates.len()).filter(|&j| j != positive_index).collect(), weight: 1.0 };
    let out = nce_graph(&mut g, a, c, &[term], tau, true);
    Ok(g.value(out).get(0, 0))
}

/// For each anchor shot: the shot whose candidate-modality feature is the
/// positive, and the shots whose features are negatives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorPlan {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairPlan {
    pub anchors: Vec<AnchorPlan>,
}

impl PairPlan {
    /// Every pristine shot anchors; its own other-modality feature is the
    /// positive and every other shot in the batch is a negative.
    pub fn in_batch(forged: &[bool]) -> Self {
        let n = forged.len();
        let anchors = (0..n).filter(|&i| !forged[i]).map(|i| AnchorPlan { anchor: i, positive: i, negatives: (0..n).filter(|&j| j != i).collect() }).collect();
        Self { anchors }
    }

    pub fn check(&self, forged: &[bool]) -> Result<()> {
        let n = forged.len();
        for p in &self.anchors {
            if p.anchor >= n || p.positive >= n || p.negatives.iter().any(|&j| j >= n) {
                return Err(Error::Pairing(format!("anchor {} refers to a shot outside the batch of {n}", p.anchor)));
            }
            if forged[p.anchor] {
                return Err(Error::Pairing(format!("contract violation: forged shot {} used as an anchor", p.anchor)));
            }
            if p.negatives.contains(&p.positive) {
                return Err(Error::Pairing(format!("anchor {} lists its positive as a negative", p.anchor)));
            }
        }
        Ok(())
    }
}

/// Per-modality batch features on a graph; `None` for inactive modalities.
#[derive(Clone, Copy, Debug, Default)]
pub struct ModalityVars {
    pub v: Option<Var>,
    pub a: Option<Var>,
    pub t: Option<Var>,
}

impl ModalityVars {
    pub fn get(&self, m: Modality) -> Option<Var> {
        match m {
            Modality::V => self.v,
            Modality::A => self.a,
            Modality::T => self.t,
        }
    }
}

/// Mean cross-modal InfoNCE over (pair, anchor); pairs with an inactive
/// modality are skipped. `None` when no term is active.
pub fn cross_modal_graph(g: &mut Graph, feats: &ModalityVars, plan: &PairPlan, cfg: &ContrastiveConfig) -> Option<Var> {
    let pairs: Vec<(Var, Var)> = cfg.modality_pairs.iter().filter_map(|&(p, q)| Some((feats.get(p)?, feats.get(q)?))).collect();
    let n = pairs.len() * plan.anchors.len();
    if n == 0 {
        return None;
    }
    let w = 1.0 / n as f64;
    let terms: Vec<NceTerm> = plan.anchors.iter().map(|p| NceTerm { anchor: p.anchor, positive: p.positive, negatives: p.negatives.clone(), weight: w }).collect();
    let parts: Vec<Var> = pairs.iter().map(|&(a, c)| nce_graph(g, a, c, &terms, cfg.tau, cfg.include_positive_in_denominator)).collect();
    Some(sum_vars(g, &parts))
}

fn sum_vars(g: &mut Graph, parts: &[Var]) -> Var {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p);
    }
    acc
}

fn bundle_vars(g: &mut Graph, feats: &[FeatureBundle]) -> ModalityVars {
    let mut mk = |m: Modality| {
        let rows: Vec<&[f64]> = feats.iter().map(|f| f.modality(m)).collect();
        g.constant(stack(&rows))
    };
    ModalityVars { v: Some(mk(Modality::V)), a: Some(mk(Modality::A)), t: Some(mk(Modality::T)) }
}

fn check_bundles<'a>(feats: impl IntoIterator<Item = &'a FeatureBundle>, modalities: &[Modality]) -> Result<()> {
    let feats: Vec<&FeatureBundle> = feats.into_iter().collect();
    let d = feats.first().map_or(0, |f| f.f_v.len());
    for f in feats {
        check_vectors(modalities.iter().map(|&m| f.modality(m)), d)?;
    }
    Ok(())
}

/// Cross-modal contrastive loss over a batch of shot features.
pub fn cross_modal_loss(features: &[FeatureBundle], plan: &PairPlan, cfg: &ContrastiveConfig) -> Result<f64> {
    cfg.validate()?;
    let forged: Vec<bool> = features.iter().map(|f| f.forged).collect();
    plan.check(&forged)?;
    if plan.anchors.is_empty() {
        return Err(Error::Pairing("no pristine anchor in the batch".into()));
    }
    if !cfg.include_positive_in_denominator && plan.anchors.iter().any(|p| p.negatives.is_empty()) {
        return Err(Error::Pairing("an anchor has no negatives and the positive is excluded from the denominator".into()));
    }
    check_bundles(features, &Modality::ALL)?;
    let mut g = Graph::new();
    let vars = bundle_vars(&mut g, features);
    match cross_modal_graph(&mut g, &vars, plan, cfg) {
        Some(v) => Ok(g.value(v).get(0, 0)),
        None => Ok(0.0),
    }
}

/// Batch description for the identity-aware loss.
pub struct IdentityBatch<'a> {
    pub identities: &'a [String],
    pub forged: &'a [bool],
    /// Identity of each reference row.
    pub ref_identities: &'a [String],
}

/// Identity-aware InfoNCE terms for one modality. Candidates are the
/// reference rows followed by the batch rows. Returns the weighted sum (each
/// anchor contributes total weight 1, split over its positives) and the
/// number of anchors.
pub fn identity_graph(g: &mut Graph, batch: Var, refs: Var, ib: &IdentityBatch<'_>, cfg: &ContrastiveConfig) -> Result<Option<(Var, usize)>> {
    let nr = ib.ref_identities.len();
    let mut terms = Vec::new();
    let mut anchors = 0;
    for (i, id) in ib.identities.iter().enumerate() {
        if ib.forged[i] {
            continue;
        }
        let positives: Vec<usize> = (0..nr).filter(|&j| &ib.ref_identities[j] == id).collect();
        if positives.is_empty() {
            return Err(Error::Pairing(format!("identity {id} has no reference sample")));
        }
        let mut negatives: Vec<usize> = (0..nr).filter(|&j| &ib.ref_identities[j] != id).collect();
        negatives.extend((0..ib.identities.len()).filter(|&k| ib.forged[k] && &ib.identities[k] == id).map(|k| nr + k));
        if !cfg.include_positive_in_denominator && negatives.is_empty() {
            return Err(Error::Pairing(format!("anchor of identity {id} has no negatives and the positive is excluded")));
        }
        let w = 1.0 / positives.len() as f64;
        for p in positives {
            terms.push(NceTerm { anchor: i, positive: p, negatives: negatives.clone(), weight: w });
        }
        anchors += 1;
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let cands = g.concat_rows(&[refs, batch]);
    Ok(Some((nce_graph(g, batch, cands, &terms, cfg.tau, cfg.include_positive_in_denominator), anchors)))
}

/// Identity-aware contrastive loss: mean over (pristine anchor, modality).
pub fn identity_loss(train: &[FeatureBundle], refs: &BTreeMap<String, Vec<FeatureBundle>>, cfg: &ContrastiveConfig) -> Result<f64> {
    cfg.validate()?;
    let ref_list: Vec<&FeatureBundle> = refs.values().flatten().collect();
    check_bundles(train.iter().chain(ref_list.iter().copied()), &Modality::ALL)?;
    let identities: Vec<String> = train.iter().map(|f| f.identity_id.clone()).collect();
    let forged: Vec<bool> = train.iter().map(|f| f.forged).collect();
    let ref_identities: Vec<String> = refs.iter().flat_map(|(id, v)| std::iter::repeat_n(id.clone(), v.len())).collect();
    let ib = IdentityBatch { identities: &identities, forged: &forged, ref_identities: &ref_identities };
    let mut g = Graph::new();
    let mut parts = Vec::new();
    let mut count = 0;
    for m in Modality::ALL {
        let b: Vec<&[f64]> = train.iter().map(|f| f.modality(m)).collect();
        let r: Vec<&[f64]> = ref_list.iter().map(|f| f.modality(m)).collect();
        let bv = g.constant(stack(&b));
        let rv = g.constant(if r.is_empty() { Mat::zeros(0, b.first().map_or(0, |v| v.len())) } else { stack(&r) });
        if let Some((v, n)) = identity_graph(&mut g, bv, rv, &ib, cfg)? {
            parts.push(v);
            count += n;
        }
    }
    if parts.is_empty() {
        return Err(Error::Pairing("no pristine anchor in the batch".into()));
    }
    let s = sum_vars(&mut g, &parts);
    let mean = g.scale(s, 1.0 / count as f64);
    Ok(g.value(mean).get(0, 0))
}

/// Binary (2-way softmax) and multi-label (7-way sigmoid) heads.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub bic: Linear,
    pub mlc: Linear,
}

impl Heads {
    pub fn new(init: &mut Init<'_>, d: usize) -> Self {
        init.scope("heads", |i| Heads { bic: Linear::new(i, "bic", d, 2), mlc: Linear::new(i, "mlc", d, NUM_TYPES) })
    }

    /// `(binary logits [B, 2], multi-label logits [B, 7])`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, f_prime: Var) -> (Var, Var) {
        (self.bic.forward(g, ps, f_prime), self.mlc.forward(g, ps, f_prime))
    }
}

/// Mean 2-class cross-entropy and mean per-class sigmoid BCE over the batch.
pub fn classification_graph(g: &mut Graph, bic_logits: Var, mlc_logits: Var, labels: &[ForgeryLabel]) -> (Var, Var) {
    let n = labels.len();
    let lsm = g.log_softmax_rows(bic_logits);
    let picks: Vec<usize> = labels.iter().enumerate().map(|(i, l)| i * 2 + l.y_binary as usize).collect();
    let picked = g.gather(lsm, Rc::new(picks), n, 1);
    let s = g.sum_all(picked);
    let l_bic = g.scale(s, -1.0 / n as f64);
    let targets = Mat::from_vec(n, NUM_TYPES, labels.iter().flat_map(|l| l.y_types.iter().map(|&v| f64::from(v))).collect());
    let bce = g.sigmoid_bce(mlc_logits, Rc::new(targets));
    let l_mlc = g.mean_all(bce);
    (l_bic, l_mlc)
}

/// `(l_bic, l_mlc)` for one fused feature.
pub fn classification_losses(f_prime: &[f64], y: &ForgeryLabel, heads: &Heads, ps: &ParamStore) -> Result<(f64, f64)> {
    let d = ps.get(heads.bic.w).rows();
    if f_prime.len() != d {
        return Err(Error::Argument(format!("feature of length {} where {d} expected", f_prime.len())));
    }
    y.check().map_err(Error::Argument)?;
    let mut g = Graph::new();
    let x = g.constant(Mat::row_vector(f_prime.to_vec()));
    let (b, m) = heads.forward(&mut g, ps, x);
    let (lb, lm) = classification_graph(&mut g, b, m, std::slice::from_ref(y));
    Ok((g.value(lb).get(0, 0), g.value(lm).get(0, 0)))
}
