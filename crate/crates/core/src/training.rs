//! Batching, the optimisation step, the learning-rate schedule and the
//! training loop.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Var};
use crate::data_model::{Corpus, ForgeryLabel, ShotRecord, Split};
use crate::encoders::FeatureBundle;
use crate::error::{Error, Result};
use crate::eval::{evaluate_fresh, EvalConfig};
use crate::fusion::ModalitySet;
use crate::losses::{classification_graph, cross_modal_graph, identity_graph, total_loss, ContrastiveConfig, IdentityBatch, LossBreakdown, LossWeights, ModalityVars, PairPlan};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamStore;
use crate::reference::{build_reference_index, RefIndex, SelectMode};
use crate::synthetic::{derive_seed, rng_for, Modality};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        OptimizerConfig::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weights: LossWeights,
    pub alpha: f64,
    pub tau: f64,
    pub seed: u64,
    pub use_modal_loss: bool,
    pub use_identity: bool,
    pub modality_subset: String,
    /// Reference index rebuild period in steps.
    pub refresh_every: usize,
    /// Validation period in steps; 0 validates only after the last step.
    pub val_every: usize,
    /// Scales the classification terms in the optimised objective only.
    pub head_weight: f64,
    pub optimizer: OptimizerConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            steps: 2000,
            base_lr: 3e-3,
            warmup_start_lr: 3e-5,
            min_lr: 1e-6,
            warmup_steps: 100,
            weights: LossWeights::default(),
            alpha: 0.001,
            tau: 1.0,
            seed: 0,
            use_modal_loss: true,
            use_identity: true,
            modality_subset: "vat".into(),
            refresh_every: 200,
            val_every: 200,
            head_weight: 1.0,
            optimizer: OptimizerConfig::adam(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Long-run schedule: 90k steps, 1000 warmup steps from 2e-7 to 5e-5,
    /// cosine decay floored at 1e-8.
    pub fn long_schedule() -> Self {
        Self { steps: 90_000, base_lr: 5e-5, warmup_start_lr: 2e-7, min_lr: 1e-8, warmup_steps: 1000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.warmup_steps >= self.steps {
            return bad(format!("warmup_steps {} must be below steps {}", self.warmup_steps, self.steps));
        }
        for (name, v) in [("base_lr", self.base_lr), ("warmup_start_lr", self.warmup_start_lr), ("min_lr", self.min_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.min_lr > self.base_lr {
            return bad(format!("min_lr {} exceeds base_lr {}", self.min_lr, self.base_lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.use_modal_loss && self.use_identity && self.batch_size < 4 {
            return bad(format!("batch_size {} is below 4 with both contrastive losses active", self.batch_size));
        }
        if self.refresh_every == 0 {
            return bad("refresh_every must be positive".into());
        }
        if !self.alpha.is_finite() || !self.head_weight.is_finite() || !self.weights.beta.is_finite() || !self.weights.gamma.is_finite() {
            return bad("loss weights must be finite".into());
        }
        self.modality_set()?;
        self.contrastive().validate()
    }

    pub fn modality_set(&self) -> Result<ModalitySet> {
        ModalitySet::parse(&self.modality_subset).ok_or_else(|| Error::Config(format!("invalid modality subset {:?}", self.modality_subset)))
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig { tau: self.tau, ..ContrastiveConfig::default() }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig { alpha: self.alpha, modalities: self.modality_subset.clone(), ..EvalConfig::default() }
    }

    fn modal_active(&self) -> bool {
        self.use_modal_loss && self.weights.beta != 0.0
    }

    fn identity_active(&self) -> bool {
        self.use_identity && self.weights.gamma != 0.0
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Linear warmup from `warmup_start_lr` to `base_lr`, then cosine decay to
/// zero at `steps`, floored at `min_lr`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.steps {
        return Err(Error::Argument(format!("step {step} is beyond the schedule length {}", cfg.steps)));
    }
    Ok(lr_curve(step as f64, cfg))
}

/// The schedule at a fractional step `x` in `[0, steps]`.
pub fn lr_curve(x: f64, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_steps as f64;
    if x < w {
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * (x / w);
    }
    let progress = (x - w) / (cfg.steps as f64 - w);
    (cfg.base_lr * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0).max(cfg.min_lr)
}

/// Corpus indices of one training batch, pristine shots first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub epoch: u64,
    pub index: usize,
    pub shots: Vec<usize>,
    /// Seed for this batch's reference draws.
    pub ref_seed: u64,
}

/// Balanced sizes summing to `n`, each at most `b`.
fn batch_sizes(n: usize, b: usize) -> Vec<usize> {
    let k = n.div_ceil(b);
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

/// Partitions the train split into batches. When a contrastive loss is
/// active every batch holds at least one pristine anchor and one forged shot.
pub fn make_batches(corpus: &Corpus, cfg: &TrainConfig, epoch: u64) -> Result<Vec<Batch>> {
    let train = corpus.split_indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Batching("the train split is empty".into()));
    }
    let mut rng = rng_for(cfg.seed, &format!("batches/{epoch}"));
    let (mut pristine, mut forged): (Vec<usize>, Vec<usize>) = train.iter().partition(|&&i| !corpus.shots[i].label.is_forged());
    pristine.shuffle(&mut rng);
    forged.shuffle(&mut rng);
    let sizes = batch_sizes(train.len(), cfg.batch_size);
    let constrained = cfg.modal_active() || cfg.identity_active();
    if constrained {
        if forged.is_empty() {
            return Err(Error::Batching("contrastive losses need forged negatives but the train split has no forged shot".into()));
        }
        if pristine.len() < sizes.len() || forged.len() < sizes.len() {
            return Err(Error::Batching(format!(
                "{} batches need one pristine anchor and one forged shot each; train split has {} pristine and {} forged",
                sizes.len(),
                pristine.len(),
                forged.len()
            )));
        }
        if sizes.iter().any(|&s| s < 2) {
            return Err(Error::Batching("a batch would hold fewer than two shots".into()));
        }
    }
    let (mut p_left, mut f_left) = (pristine.len(), forged.len());
    let (mut pi, mut fi) = (0, 0);
    let mut out = Vec::with_capacity(sizes.len());
    for (k, &s) in sizes.iter().enumerate() {
        let rest = sizes.len() - k - 1;
        let reserve = usize::from(constrained);
        // Forged share proportional to what is left, respecting the reserve
        // each remaining batch needs.
        let ideal = (f_left * s + (p_left + f_left) / 2) / (p_left + f_left);
        let lo = reserve.max(s.saturating_sub(p_left - reserve * rest));
        let hi = (s - reserve).min(f_left - reserve * rest);
        let nf = ideal.clamp(lo, hi.max(lo));
        let np = s - nf;
        let mut shots: Vec<usize> = pristine[pi..pi + np].to_vec();
        shots.extend_from_slice(&forged[fi..fi + nf]);
        pi += np;
        fi += nf;
        p_left -= np;
        f_left -= nf;
        out.push(Batch { epoch, index: k, shots, ref_seed: derive_seed(cfg.seed, &format!("refs/{epoch}/{k}")) });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    first: Vec<Mat>,
    second: Vec<Mat>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, m)| Mat::zeros(m.rows(), m.cols())).collect::<Vec<_>>();
        let second = if matches!(config, OptimizerConfig::Adam { .. }) { zeros() } else { Vec::new() };
        Self { config, first: zeros(), second, t: 0 }
    }

    /// One update; parameters without a gradient see a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let ids: Vec<usize> = params.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let p = params.get_mut(id);
            let g = grads.param(id);
            let grad = |i: usize| g.map_or(0.0, |g| g.data()[i]);
            let m = self.first[id].data_mut();
            match self.config {
                OptimizerConfig::Sgd { momentum } => {
                    for (i, (w, b)) in p.data_mut().iter_mut().zip(m.iter_mut()).enumerate() {
                        *b = momentum * *b + grad(i);
                        *w -= lr * *b;
                    }
                }
                OptimizerConfig::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.t as i32);
                    let c2 = 1.0 - beta2.powi(self.t as i32);
                    let v = self.second[id].data_mut();
                    for (i, ((w, m), v)) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).enumerate() {
                        let gi = grad(i);
                        *m = beta1 * *m + (1.0 - beta1) * gi;
                        *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Model, optimiser, parameter version (= steps taken) and the reference
/// index snapshot used by the identity loss and reference fusion.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Optimizer,
    pub step: u64,
    pub index: Option<RefIndex>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut mc = cfg.model.clone();
        mc.init_seed = derive_seed(cfg.seed, "init");
        let model = Model::new(mc)?;
        let optimizer = Optimizer::new(cfg.optimizer, &model.params);
        Ok(Self { model, optimizer, step: 0, index: None })
    }

    pub fn needs_index(cfg: &TrainConfig) -> bool {
        cfg.alpha != 0.0 || cfg.identity_active()
    }

    /// Rebuilds the reference index from the live parameters.
    pub fn refresh_index(&mut self, corpus: &Corpus, cfg: &TrainConfig, corpus_hash: &str) -> Result<()> {
        self.index = Some(build_reference_index(corpus, &self.model, cfg.modality_set()?, self.step, corpus_hash)?);
        Ok(())
    }
}

fn stack_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, d: usize) -> Mat {
    let data: Vec<f64> = rows.flat_map(|r| r.iter().copied()).collect();
    Mat::from_vec(data.len() / d, d, data)
}

fn check_finite(name: &str, v: f64, step: u64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{name} is {v} at step {step}")))
    }
}

/// Forward, loss, backward and one optimiser update at `lr_at(state.step)`.
/// Returns the losses before the update.
pub fn train_step(state: &mut TrainState, batch: &Batch, corpus: &Corpus, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mods = cfg.modality_set()?;
    let shots: Vec<&ShotRecord> = batch.shots.iter().map(|&i| &corpus.shots[i]).collect();
    let labels: Vec<ForgeryLabel> = shots.iter().map(|s| s.label).collect();
    let identities: Vec<String> = shots.iter().map(|s| s.meta.identity_id.clone()).collect();
    let forged: Vec<bool> = labels.iter().map(ForgeryLabel::is_forged).collect();
    let model = &state.model;
    let d = model.d_model();

    let drawn: Option<Vec<FeatureBundle>> = if TrainState::needs_index(cfg) {
        let index = state.index.as_ref().ok_or_else(|| Error::State("reference index has not been built".into()))?;
        index.check_fresh(state.step, cfg.refresh_every as u64 - 1)?;
        Some(index.select_all(SelectMode::Random { seed: batch.ref_seed })?)
    } else {
        None
    };

    let inputs = model.inputs(&shots)?;
    let mut g = Graph::new();
    let fw = model.forward(&mut g, &inputs, mods)?;
    let mut f_prime = fw.fused.f_atv;
    if cfg.alpha != 0.0 {
        let drawn = drawn.as_ref().expect("drawn when alpha is nonzero");
        let by_id: BTreeMap<&str, &FeatureBundle> = drawn.iter().map(|f| (f.identity_id.as_str(), f)).collect();
        let mut rows = Vec::with_capacity(shots.len() * d);
        for id in &identities {
            let r = by_id.get(id.as_str()).ok_or_else(|| Error::UnknownIdentity(id.clone()))?;
            rows.extend(r.f_atv.as_deref().unwrap_or_default().iter().map(|x| cfg.alpha * x));
        }
        f_prime = g.add_const(f_prime, Rc::new(Mat::from_vec(shots.len(), d, rows)));
    }
    let (bic, mlc) = model.heads.forward(&mut g, &model.params, f_prime);
    let (l_bic, l_mlc) = classification_graph(&mut g, bic, mlc, &labels);
    let heads = g.add(l_bic, l_mlc);
    let mut objective = g.scale(heads, cfg.head_weight);

    let pooled = ModalityVars { v: fw.v.as_ref().map(|e| e.pooled), a: fw.a.as_ref().map(|e| e.pooled), t: fw.t.as_ref().map(|e| e.pooled) };
    let contrastive = cfg.contrastive();
    let mut l_modal: Option<Var> = None;
    if cfg.modal_active() {
        let plan = PairPlan::in_batch(&forged);
        l_modal = cross_modal_graph(&mut g, &pooled, &plan, &contrastive);
        if let Some(v) = l_modal {
            let w = g.scale(v, cfg.weights.beta);
            objective = g.add(objective, w);
        }
    }
    let mut l_identity: Option<Var> = None;
    if cfg.identity_active() {
        let drawn = drawn.as_ref().expect("drawn when identity loss is active");
        let ref_identities: Vec<String> = drawn.iter().map(|f| f.identity_id.clone()).collect();
        let ib = IdentityBatch { identities: &identities, forged: &forged, ref_identities: &ref_identities };
        let mut parts = Vec::new();
        let mut anchors = 0;
        for m in Modality::ALL {
            let Some(batch_var) = pooled.get(m) else { continue };
            let refs = g.constant(stack_rows(drawn.iter().map(|f| f.modality(m)), d));
            if let Some((v, n)) = identity_graph(&mut g, batch_var, refs, &ib, &contrastive)? {
                parts.push(v);
                anchors += n;
            }
        }
        if let Some((&first, rest)) = parts.split_first() {
            let mut s = first;
            for &p in rest {
                s = g.add(s, p);
            }
            let mean = g.scale(s, 1.0 / anchors as f64);
            l_identity = Some(mean);
            let w = g.scale(mean, cfg.weights.gamma);
            objective = g.add(objective, w);
        }
    }

    let scalar = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).get(0, 0));
    let breakdown = total_loss(scalar(Some(l_bic)), scalar(Some(l_mlc)), scalar(l_modal), scalar(l_identity), &cfg.weights);
    for (name, v) in [("l_bic", breakdown.l_bic), ("l_mlc", breakdown.l_mlc), ("l_modal", breakdown.l_modal), ("l_identity", breakdown.l_identity)] {
        check_finite(name, v, state.step)?;
    }
    let lr = lr_at(state.step as usize, cfg)?;
    let grads = g.backward(objective);
    for (id, name, _) in state.model.params.iter() {
        if let Some(gm) = grads.param(id) {
            if !gm.all_finite() {
                return Err(Error::Numeric(format!("gradient of {name} is not finite at step {}", state.step)));
            }
        }
    }
    state.optimizer.step(&mut state.model.params, &grads, lr);
    state.step += 1;
    Ok(breakdown)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub step: usize,
    pub acc: f64,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointReport {
    pub steps: usize,
    pub losses: Vec<StepLoss>,
    pub validation: Vec<ValPoint>,
    pub best_step: usize,
    pub best_val_auc: Option<f64>,
    pub final_hash: String,
    pub best_hash: String,
}

pub struct FitOutcome {
    /// Parameters with the best validation AUC (final ones when none exists).
    pub model: Model,
    pub final_model: Model,
    pub report: CheckpointReport,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "train_report.json";

/// Runs `cfg.steps` optimisation steps. With `out`, writes both checkpoints,
/// the config, the report and a run manifest there.
pub fn fit(cfg: &TrainConfig, corpus: &Corpus, corpus_hash: &str, out: Option<&Path>) -> Result<FitOutcome> {
    cfg.validate()?;
    let started = unix_now();
    let mut state = TrainState::new(cfg)?;
    let eval_cfg = cfg.eval_config();
    let has_val = !corpus.split_indices(Split::Val).is_empty();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut validation = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut epoch = 0u64;
    'outer: loop {
        for batch in make_batches(corpus, cfg, epoch)? {
            let step = state.step as usize;
            if step >= cfg.steps {
                break 'outer;
            }
            if TrainState::needs_index(cfg) && step % cfg.refresh_every == 0 {
                state.refresh_index(corpus, cfg, corpus_hash)?;
            }
            let lr = lr_at(step, cfg)?;
            let loss = train_step(&mut state, &batch, corpus, cfg)?;
            losses.push(StepLoss { step, lr, loss });
            let done = step + 1;
            if has_val && ((cfg.val_every > 0 && done % cfg.val_every == 0) || done == cfg.steps) {
                let m = evaluate_fresh(&state.model, corpus, Split::Val, corpus_hash, &eval_cfg)?;
                log::debug!("step {done}: val acc {:.4} auc {:?}", m.acc, m.auc);
                validation.push(ValPoint { step: done, acc: m.acc, auc: m.auc });
                if let Some(auc) = m.auc {
                    if best.as_ref().is_none_or(|(b, _, _)| auc > *b) {
                        best = Some((auc, done, state.model.params.clone()));
                    }
                }
            }
        }
        epoch += 1;
    }
    let final_model = state.model;
    let mut model = final_model.clone();
    let (best_val_auc, best_step) = match best {
        Some((auc, step, params)) => {
            model.params = params;
            (Some(auc), step)
        }
        None => (None, cfg.steps),
    };
    let report = CheckpointReport { steps: cfg.steps, losses, validation, best_step, best_val_auc, final_hash: final_model.param_hash(), best_hash: model.param_hash() };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        model.save(&dir.join(BEST_CHECKPOINT))?;
        final_model.save(&dir.join(FINAL_CHECKPOINT))?;
        write_json(&dir.join(CONFIG_FILE), cfg)?;
        write_json(&dir.join(REPORT_FILE), &report)?;
        let manifest = RunManifest::new("fit", None, cfg.hash(), corpus_hash, cfg.seed, started);
        manifest.finish(dir)?;
    }
    Ok(FitOutcome { model, final_model, report })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub const MANIFEST_FILE: &str = "run.json";

/// A later command that touched an existing run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub command: String,
    pub seed: u64,
    pub started: u64,
    pub finished: u64,
    pub outputs_hash: String,
}

/// Provenance record; one per run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config_hash: String,
    pub corpus_hash: String,
    /// Corpus directory the run read, when it read one.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    pub seed: u64,
    pub started: u64,
    pub finished: u64,
    /// SHA-256 over the names and contents of every other file in the directory.
    pub outputs_hash: String,
    #[serde(default)]
    pub followups: Vec<CommandRecord>,
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<PathBuf>, config_hash: String, corpus_hash: &str, seed: u64, started: u64) -> Self {
        Self { command: command.into(), config_path, config_hash, corpus_hash: corpus_hash.into(), data_dir: None, seed, started, finished: started, outputs_hash: String::new(), followups: Vec::new() }
    }

    /// Stamps the finish time and output hash and writes `run.json`.
    pub fn finish(mut self, dir: &Path) -> Result<Self> {
        self.finished = unix_now();
        self.outputs_hash = outputs_hash(dir)?;
        write_json(&dir.join(MANIFEST_FILE), &self)?;
        Ok(self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(MANIFEST_FILE))
    }

    /// Appends a command record to an existing manifest.
    pub fn append(dir: &Path, command: &str, seed: u64, started: u64) -> Result<()> {
        let mut m = Self::load(dir)?;
        m.followups.push(CommandRecord { command: command.into(), seed, started, finished: unix_now(), outputs_hash: outputs_hash(dir)? });
        write_json(&dir.join(MANIFEST_FILE), &m)
    }
}

/// Content hash of a directory tree, excluding the manifest itself.
pub fn outputs_hash(dir: &Path) -> Result<String> {
    fn walk(base: &Path, dir: &Path, files: &mut Vec<(String, PathBuf)>) -> Result<()> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for e in entries {
            let path = e.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(base, &path, files)?;
            } else {
                let rel = path.strip_prefix(base).unwrap_or(&path).to_string_lossy().replace('\\', "/");
                if rel != MANIFEST_FILE {
                    files.push((rel, path));
                }
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for (rel, path) in files {
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update(rel.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}
