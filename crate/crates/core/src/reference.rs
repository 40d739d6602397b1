//! Per-identity reference features and their fusion into shot features.
//!
//! The index is a snapshot taken with the parameters at some version. During
//! training it may lag the live parameters by at most the refresh interval;
//! evaluation requires a snapshot of the exact parameters in use.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{read_bundle, write_bundle, Tensor};
use crate::data_model::{Corpus, ShotRecord, Split};
use crate::encoders::FeatureBundle;
use crate::error::{Error, Result};
use crate::fusion::ModalitySet;
use crate::model::Model;
use crate::synthetic::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefIndex {
    /// Parameter version the features were computed with.
    pub version: u64,
    pub corpus_hash: String,
    pub modalities: String,
    /// Reference features per identity, in corpus order.
    pub entries: BTreeMap<String, Vec<FeatureBundle>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    /// Uniform draw, deterministic in `(seed, identity)`.
    Random { seed: u64 },
    /// Element-wise mean over all references of the identity.
    Mean,
}

/// Identities that appear in the corpus but have no reference shot.
fn identities_without_reference(corpus: &Corpus, have: &BTreeMap<String, Vec<FeatureBundle>>) -> Vec<String> {
    let mut all: Vec<&String> = corpus.identity_roster.iter().collect();
    all.extend(corpus.shots.iter().map(|s| &s.meta.identity_id));
    all.sort();
    all.dedup();
    all.into_iter().filter(|id| !have.contains_key(*id)).cloned().collect()
}

/// Encodes every reference-split shot with `model`.
pub fn build_reference_index(corpus: &Corpus, model: &Model, mods: ModalitySet, version: u64, corpus_hash: &str) -> Result<RefIndex> {
    let shots: Vec<&ShotRecord> = corpus.split_indices(Split::Reference).into_iter().map(|i| &corpus.shots[i]).collect();
    if let Some(s) = shots.iter().find(|s| s.label.is_forged()) {
        return Err(Error::Reference(format!("reference shot {} is forged", s.meta.shot_id)));
    }
    let mut entries: BTreeMap<String, Vec<FeatureBundle>> = BTreeMap::new();
    for f in model.features(&shots, mods)? {
        entries.entry(f.identity_id.clone()).or_default().push(f);
    }
    let missing = identities_without_reference(corpus, &entries);
    if !missing.is_empty() {
        return Err(Error::Reference(format!("identities without reference media: {}", missing.join(", "))));
    }
    Ok(RefIndex { version, corpus_hash: corpus_hash.to_string(), modalities: mods.label(), entries })
}

fn mean_of(rows: &[&[f64]]) -> Vec<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut out = vec![0.0; d];
    for r in rows {
        for (o, x) in out.iter_mut().zip(*r) {
            *o += x;
        }
    }
    let n = rows.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

impl RefIndex {
    pub fn identities(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Errors unless `live - version <= max_lag`.
    pub fn check_fresh(&self, live: u64, max_lag: u64) -> Result<()> {
        if self.version > live || live - self.version > max_lag {
            return Err(Error::Stale { index: self.version, live });
        }
        Ok(())
    }

    /// One reference feature set for `identity`.
    pub fn select(&self, identity: &str, mode: SelectMode) -> Result<FeatureBundle> {
        let list = self.entries.get(identity).filter(|l| !l.is_empty()).ok_or_else(|| Error::UnknownIdentity(identity.to_string()))?;
        match mode {
            SelectMode::Random { seed } => {
                let k = rng_for(seed, identity).random_range(0..list.len());
                Ok(list[k].clone())
            }
            SelectMode::Mean => {
                fn col<'a>(list: &'a [FeatureBundle], f: impl Fn(&'a FeatureBundle) -> &'a [f64]) -> Vec<f64> {
                    mean_of(&list.iter().map(f).collect::<Vec<_>>())
                }
                let f_atv = col(list, |f| f.f_atv.as_deref().unwrap_or(&[]));
                Ok(FeatureBundle {
                    shot_id: format!("{identity}/mean"),
                    identity_id: identity.to_string(),
                    forged: false,
                    f_v: col(list, |f| &f.f_v),
                    f_a: col(list, |f| &f.f_a),
                    f_t: col(list, |f| &f.f_t),
                    f_at: None,
                    f_atv: (!f_atv.is_empty()).then_some(f_atv),
                    f_prime: None,
                })
            }
        }
    }

    /// One selection per identity, in identity order.
    pub fn select_all(&self, mode: SelectMode) -> Result<Vec<FeatureBundle>> {
        self.identities().map(|id| self.select(id, mode)).collect()
    }

    /// Cache file for this index under `dir`, keyed by corpus hash and version.
    pub fn cache_path(dir: &Path, corpus_hash: &str, version: u64) -> PathBuf {
        let short = &corpus_hash[..corpus_hash.len().min(16)];
        dir.join(format!("refindex-{short}-v{version}.rmfd"))
    }

    /// Writes the index as a tensor bundle. Each tensor name is a JSON array
    /// `[identity, shot_id, field]`; the first entry carries the metadata.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = Self::cache_path(dir, &self.corpus_hash, self.version);
        let meta = CacheMeta { version: self.version, corpus_hash: self.corpus_hash.clone(), modalities: self.modalities.clone() };
        let mut tensors = vec![(serde_json::to_string(&meta).map_err(|e| Error::json(&path, e))?, Tensor::f64(vec![0], Vec::new()))];
        for (id, list) in &self.entries {
            for f in list {
                let fields: [(&str, &[f64]); 4] = [("f_v", &f.f_v), ("f_a", &f.f_a), ("f_t", &f.f_t), ("f_atv", f.f_atv.as_deref().unwrap_or_default())];
                for (field, data) in fields {
                    let name = serde_json::to_string(&[id.as_str(), f.shot_id.as_str(), field]).map_err(|e| Error::json(&path, e))?;
                    tensors.push((name, Tensor::f64(vec![data.len()], data.to_vec())));
                }
            }
        }
        write_bundle(&path, &tensors)?;
        Ok(path)
    }

    /// Loads a cached index; `None` when no cache exists for the key.
    pub fn load(dir: &Path, corpus_hash: &str, version: u64) -> Result<Option<Self>> {
        let path = Self::cache_path(dir, corpus_hash, version);
        if !path.exists() {
            return Ok(None);
        }
        let bad = |msg: String| Error::Container { path: path.clone(), msg };
        let mut tensors = read_bundle(&path)?.into_iter();
        let (meta, _) = tensors.next().ok_or_else(|| bad("empty reference index".into()))?;
        let meta: CacheMeta = serde_json::from_str(&meta).map_err(|e| bad(format!("metadata: {e}")))?;
        if meta.corpus_hash != corpus_hash || meta.version != version {
            return Err(Error::Reference(format!("{} does not match its key", path.display())));
        }
        let mut entries: BTreeMap<String, Vec<FeatureBundle>> = BTreeMap::new();
        for (name, t) in tensors {
            let [id, shot, field]: [String; 3] = serde_json::from_str(&name).map_err(|e| bad(format!("tensor name {name:?}: {e}")))?;
            let list = entries.entry(id.clone()).or_default();
            if list.last().is_none_or(|f| f.shot_id != shot) {
                list.push(FeatureBundle { shot_id: shot, identity_id: id, forged: false, f_v: Vec::new(), f_a: Vec::new(), f_t: Vec::new(), f_at: None, f_atv: None, f_prime: None });
            }
            let f = list.last_mut().expect("pushed above");
            let data = t.to_f64();
            match field.as_str() {
                "f_v" => f.f_v = data,
                "f_a" => f.f_a = data,
                "f_t" => f.f_t = data,
                "f_atv" => f.f_atv = (!data.is_empty()).then_some(data),
                other => return Err(bad(format!("unknown field {other}"))),
            }
        }
        Ok(Some(Self { version: meta.version, corpus_hash: meta.corpus_hash, modalities: meta.modalities, entries }))
    }
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    version: u64,
    corpus_hash: String,
    modalities: String,
}

/// Free-function form of [`RefIndex::select`].
pub fn select_reference(index: &RefIndex, identity: &str, mode: SelectMode) -> Result<FeatureBundle> {
    index.select(identity, mode)
}

/// `f + alpha * reference`.
pub fn fuse_with_reference(f: &[f64], reference: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if f.len() != reference.len() {
        return Err(Error::Argument(format!("feature length {} does not match reference length {}", f.len(), reference.len())));
    }
    Ok(f.iter().zip(reference).map(|(x, r)| x + alpha * r).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bundle(id: &str, k: usize, v: f64) -> FeatureBundle {
        FeatureBundle {
            shot_id: format!("{id}-{k}"),
            identity_id: id.into(),
            forged: false,
            f_v: vec![v, 0.0],
            f_a: vec![0.0, v],
            f_t: vec![v, v],
            f_at: None,
            f_atv: Some(vec![2.0 * v, 1.0]),
            f_prime: None,
        }
    }

    fn index() -> RefIndex {
        let mut entries = BTreeMap::new();
        entries.insert("a".to_string(), vec![bundle("a", 0, 1.0), bundle("a", 1, 3.0)]);
        entries.insert("b".to_string(), vec![bundle("b", 0, -1.0)]);
        RefIndex { version: 5, corpus_hash: "ab".repeat(32), modalities: "vat".into(), entries }
    }

    #[test]
    fn mean_mode_averages() {
        let m = index().select("a", SelectMode::Mean).unwrap();
        assert_eq!(m.f_v, vec![2.0, 0.0]);
        assert_eq!(m.f_atv, Some(vec![4.0, 1.0]));
    }

    #[test]
    fn random_mode_is_deterministic_and_valid() {
        let idx = index();
        for seed in 0..20 {
            let x = idx.select("a", SelectMode::Random { seed }).unwrap();
            assert_eq!(x, idx.select("a", SelectMode::Random { seed }).unwrap());
            assert!(idx.entries["a"].contains(&x));
        }
    }

    #[test]
    fn unknown_identity() {
        assert!(matches!(index().select("zz", SelectMode::Mean), Err(Error::UnknownIdentity(_))));
    }

    #[test]
    fn freshness() {
        let idx = index();
        assert!(idx.check_fresh(5, 0).is_ok());
        assert!(idx.check_fresh(8, 3).is_ok());
        assert!(matches!(idx.check_fresh(9, 3), Err(Error::Stale { index: 5, live: 9 })));
        assert!(idx.check_fresh(4, 3).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let idx = index();
        idx.save(dir.path()).unwrap();
        assert_eq!(RefIndex::load(dir.path(), &idx.corpus_hash, 5).unwrap(), Some(idx.clone()));
        assert_eq!(RefIndex::load(dir.path(), &idx.corpus_hash, 6).unwrap(), None);
    }

    #[test]
    fn fuse_length_mismatch() {
        assert!(fuse_with_reference(&[1.0], &[1.0, 2.0], 0.1).is_err());
    }

    proptest! {
        #[test]
        fn fusion_is_linear(f in proptest::collection::vec(-10.0..10.0f64, 4), r in proptest::collection::vec(-10.0..10.0f64, 4), a in -2.0..2.0f64, b in -2.0..2.0f64) {
            let zero = fuse_with_reference(&f, &r, 0.0).unwrap();
            prop_assert_eq!(&zero, &f);
            let lhs = fuse_with_reference(&f, &r, a + b).unwrap();
            let step = fuse_with_reference(&fuse_with_reference(&f, &r, a).unwrap(), &r, b).unwrap();
            for (x, y) in lhs.iter().zip(&step) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }
}
