//! The full detector: three encoders, the fusion block and both heads, with
//! their parameters in one [`ParamStore`].

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Graph;
use crate::container::{read_bundle, write_bundle, Tensor, TensorData};
use crate::data_model::ShotRecord;
use crate::encoders::{AudioEncoder, BatchInputs, Encoded, EncoderConfig, FeatureBundle, TextEncoder, VisualEncoder};
use crate::error::{Error, Result};
use crate::fusion::{Fused, FusionBlock, FusionConfig, ModalitySet};
use crate::losses::Heads;
use crate::nn::{Init, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), fusion: FusionConfig::default(), init_seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub visual: VisualEncoder,
    pub audio: AudioEncoder,
    pub text: TextEncoder,
    pub fusion: FusionBlock,
    pub heads: Heads,
}

/// Graph handles produced by one batch forward pass.
pub struct Forward {
    pub v: Option<Encoded>,
    pub a: Option<Encoded>,
    pub t: Option<Encoded>,
    pub fused: Fused,
}

/// Shots encoded per graph during inference.
const INFER_CHUNK: usize = 16;

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.encoder.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut init = Init::new(&mut params, &mut rng);
        let e = &config.encoder;
        let visual = VisualEncoder::new(&mut init, e);
        let audio = AudioEncoder::new(&mut init, e);
        let text = TextEncoder::new(&mut init, e);
        let fusion = FusionBlock::new(&mut init, e.d_model, e.heads, config.fusion.clone());
        let heads = Heads::new(&mut init, e.d_model);
        Ok(Self { config, params, visual, audio, text, fusion, heads })
    }

    pub fn d_model(&self) -> usize {
        self.config.encoder.d_model
    }

    pub fn inputs(&self, shots: &[&ShotRecord]) -> Result<BatchInputs> {
        BatchInputs::from_shots(shots, &self.config.encoder)
    }

    /// Encodes the active modalities and fuses them.
    pub fn forward(&self, g: &mut Graph, inputs: &BatchInputs, mods: ModalitySet) -> Result<Forward> {
        let ps = &self.params;
        let v = if mods.v {
            let x = g.constant(inputs.frames.clone());
            Some(self.visual.forward(g, ps, x))
        } else {
            None
        };
        let a = if mods.a {
            let x = g.constant(inputs.spec.clone());
            Some(self.audio.forward(g, ps, x))
        } else {
            None
        };
        let t = if mods.t { Some(self.text.forward(g, ps, &inputs.tokens)?) } else { None };
        let fused = self.fusion.forward(g, ps, v.as_ref(), a.as_ref(), t.as_ref());
        Ok(Forward { v, a, t, fused })
    }

    /// Per-shot features (inactive modalities left empty), computed in chunks.
    pub fn features(&self, shots: &[&ShotRecord], mods: ModalitySet) -> Result<Vec<FeatureBundle>> {
        let mut out = Vec::with_capacity(shots.len());
        for chunk in shots.chunks(INFER_CHUNK) {
            let inputs = self.inputs(chunk)?;
            let mut g = Graph::new();
            let fw = self.forward(&mut g, &inputs, mods)?;
            let rows = |e: &Option<Encoded>, i: usize| e.as_ref().map_or_else(Vec::new, |e| g.value(e.pooled).row(i).to_vec());
            for (i, s) in chunk.iter().enumerate() {
                out.push(FeatureBundle {
                    shot_id: s.meta.shot_id.clone(),
                    identity_id: s.meta.identity_id.clone(),
                    forged: s.label.is_forged(),
                    f_v: rows(&fw.v, i),
                    f_a: rows(&fw.a, i),
                    f_t: rows(&fw.t, i),
                    f_at: fw.fused.f_at.map(|v| g.value(v).row(i).to_vec()),
                    f_atv: Some(g.value(fw.fused.f_atv).row(i).to_vec()),
                    f_prime: None,
                });
            }
        }
        Ok(out)
    }

    /// Head logits for a batch of fused features `[B, d]`.
    pub fn head_logits(&self, f_prime: &Mat) -> (Mat, Mat) {
        let mut g = Graph::new();
        let x = g.constant(f_prime.clone());
        let (b, m) = self.heads.forward(&mut g, &self.params, x);
        (g.value(b).clone(), g.value(m).clone())
    }

    pub fn param_tensors(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|(_, name, m)| (name.to_string(), Tensor::f64(vec![m.rows(), m.cols()], m.data().to_vec()))).collect()
    }

    /// SHA-256 over parameter names, shapes and exact values.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for (_, name, m) in self.params.iter() {
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bundle(path, &self.param_tensors())
    }

    /// Rebuilds the model for `config` and loads every parameter from `path`.
    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        let mut model = Self::new(config)?;
        model.load_params(path)?;
        Ok(model)
    }

    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        let tensors = read_bundle(path)?;
        let bad = |msg: String| Error::Container { path: path.to_path_buf(), msg };
        if tensors.len() != self.params.len() {
            return Err(bad(format!("checkpoint has {} tensors, model expects {}", tensors.len(), self.params.len())));
        }
        for (name, t) in tensors {
            let id = self.params.id(&name).ok_or_else(|| bad(format!("unknown parameter {name}")))?;
            let target = self.params.get_mut(id);
            let TensorData::F64(data) = t.data else {
                return Err(bad(format!("{name}: expected f64 data")));
            };
            if t.shape != [target.rows(), target.cols()] {
                return Err(bad(format!("{name}: shape {:?} does not match {:?}", t.shape, target.shape())));
            }
            *target = Mat::from_vec(target.rows(), target.cols(), data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let model = Model::new(ModelConfig { init_seed: 4, ..ModelConfig::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let other = Model::load(ModelConfig { init_seed: 5, ..ModelConfig::default() }, &path).unwrap();
        assert_eq!(other.params, model.params);
        assert_eq!(other.param_hash(), model.param_hash());
    }
}
