//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line to
//! the real stdout (not the captured test output) and then asserts.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use forgeref::data_model::{merge_short_shots, parse_manifest, serialize_inline, validate_corpus, Corpus, ForgeryLabel, Frames, ShotMeta, ShotRecord, Spectrogram, Split, MIN_SHOT_SECONDS, NUM_TYPES};
use forgeref::encoders::FeatureBundle;
use forgeref::eval::{run_ablation, AblationTable, Variant};
use forgeref::gradcheck::GradCheckConfig;
use forgeref::gradsuite::run_suites;
use forgeref::losses::{cross_modal_loss, identity_loss, ContrastiveConfig, PairPlan};
use forgeref::metrics::{auc, average_precision};
use forgeref::synthetic::{generate, Dims, GenConfig, SplitCounts};
use forgeref::training::{lr_at, lr_curve, TrainConfig};

fn report(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} | {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// ---------------------------------------------------------------- losses

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `−log(e^{s⁺/τ} / (e^{s⁺/τ} + Σ e^{s⁻/τ}))`, summed term by term.
fn nce_oracle(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> f64 {
    let num = (cosine(anchor, positive) / tau).exp();
    let mut den = num;
    for n in negatives {
        den += (cosine(anchor, n) / tau).exp();
    }
    -(num / den).ln()
}

fn modality(f: &FeatureBundle, m: char) -> &[f64] {
    match m {
        'v' => &f.f_v,
        'a' => &f.f_a,
        _ => &f.f_t,
    }
}

/// Mean over the four directed pairs and every pristine anchor; each anchor's
/// candidates are the other modality's features of every shot in the batch.
fn cross_modal_oracle(batch: &[FeatureBundle], tau: f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (p, q) in [('a', 'v'), ('a', 't'), ('v', 'a'), ('t', 'a')] {
        for (i, f) in batch.iter().enumerate() {
            if f.forged {
                continue;
            }
            let negatives: Vec<&[f64]> = batch.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, g)| modality(g, q)).collect();
            total += nce_oracle(modality(f, p), modality(f, q), &negatives, tau);
            count += 1;
        }
    }
    total / count as f64
}

/// Mean over (pristine anchor, modality); an anchor's terms average over its
/// same-identity references, with other identities' references and the
/// batch's forged shots of the same identity as negatives.
fn identity_oracle(batch: &[FeatureBundle], refs: &BTreeMap<String, Vec<FeatureBundle>>, tau: f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for m in ['v', 'a', 't'] {
        for f in batch.iter().filter(|f| !f.forged) {
            let mut negatives: Vec<&[f64]> = Vec::new();
            for (id, list) in refs {
                if *id != f.identity_id {
                    negatives.extend(list.iter().map(|r| modality(r, m)));
                }
            }
            negatives.extend(batch.iter().filter(|g| g.forged && g.identity_id == f.identity_id).map(|g| modality(g, m)));
            let positives = &refs[&f.identity_id];
            let mut anchor_loss = 0.0;
            for p in positives {
                anchor_loss += nce_oracle(modality(f, m), modality(p, m), &negatives, tau);
            }
            total += anchor_loss / positives.len() as f64;
            count += 1;
        }
    }
    total / count as f64
}

fn random_bundle(rng: &mut ChaCha8Rng, d: usize, id: &str, forged: bool) -> FeatureBundle {
    let mut v = || (0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    FeatureBundle { shot_id: String::new(), identity_id: id.into(), forged, f_v: v(), f_a: v(), f_t: v(), f_at: None, f_atv: None, f_prime: None }
}

#[test]
fn criterion_1_loss_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..25 {
        let b = rng.random_range(2..=8);
        let d = rng.random_range(2..=16);
        let n_ids = rng.random_range(2..=4);
        let tau = [1.0, 0.5, 0.07][rng.random_range(0..3)];
        let ids: Vec<String> = (0..n_ids).map(|k| format!("id{k}")).collect();
        let mut forged: Vec<bool> = (0..b).map(|_| rng.random_bool(0.4)).collect();
        forged[0] = false;
        let batch: Vec<FeatureBundle> = forged.iter().map(|&f| {
            let id = ids[rng.random_range(0..n_ids)].clone();
            random_bundle(&mut rng, d, &id, f)
        }).collect();
        let refs: BTreeMap<String, Vec<FeatureBundle>> = ids
            .iter()
            .map(|id| {
                let k = rng.random_range(1..=3);
                (id.clone(), (0..k).map(|_| random_bundle(&mut rng, d, id, false)).collect())
            })
            .collect();
        let cfg = ContrastiveConfig { tau, ..ContrastiveConfig::default() };
        let plan = PairPlan::in_batch(&forged);
        let got = cross_modal_loss(&batch, &plan, &cfg).unwrap();
        worst = worst.max((got - cross_modal_oracle(&batch, tau)).abs());
        let got = identity_loss(&batch, &refs, &cfg).unwrap();
        worst = worst.max((got - identity_oracle(&batch, &refs, tau)).abs());
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-6 && elapsed < Duration::from_secs(10);
    report(1, pass, &format!("max |loss - oracle| = {worst:.2e} over 25 batches (tol 1e-6); {}", secs(elapsed)));
    assert!(pass);
}

// -------------------------------------------------------------- gradients

#[test]
fn criterion_2_gradient_suite() {
    let start = Instant::now();
    let cfg = GradCheckConfig::default();
    let rep = run_suites(0, &cfg);
    let elapsed = start.elapsed();
    let failed: Vec<&str> = rep.entries.iter().filter(|e| !e.passed).map(|e| e.name.as_str()).collect();
    let pass = rep.passed() && cfg.step == 1e-5 && cfg.tolerance == 1e-4 && elapsed < Duration::from_secs(120);
    report(2, pass, &format!("{} checks, max rel error {:.2e} (tol 1e-4, step 1e-5), failed {failed:?}; {}", rep.entries.len(), rep.max_error(), secs(elapsed)));
    assert!(pass);
}

// --------------------------------------------------------------- schedule

#[test]
fn criterion_3_schedule() {
    let c = TrainConfig::long_schedule();
    let rel = |a: f64, b: f64| (a - b).abs() / b;
    let values = [(0, 2e-7), (1000, 5e-5), (c.steps, 1e-8)];
    let worst = values.iter().map(|&(s, want)| rel(lr_at(s, &c).unwrap(), want)).fold(0.0, f64::max);
    let w = c.warmup_steps as f64;
    let gap = (lr_curve(w - 1e-9, &c) - lr_curve(w, &c)).abs().max((lr_curve(w + 1e-9, &c) - lr_curve(w, &c)).abs());
    let pass = worst <= 1e-12 && gap <= 1e-12;
    report(3, pass, &format!("anchor values max rel error {worst:.1e}; warmup boundary jump {gap:.1e} (tol 1e-12)"));
    assert!(pass);
}

// ---------------------------------------------------------------- metrics

fn auc_pairwise(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    num / den
}

/// Walks thresholds from high to low and accumulates precision × recall gain.
fn ap_accumulate(scores: &[f64], labels: &[u8]) -> f64 {
    let positives = labels.iter().filter(|&&y| y == 1).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let predicted = scores.iter().filter(|&&s| s >= t).count() as f64;
        let tp = scores.iter().zip(labels).filter(|(&s, &y)| s >= t && y == 1).count() as f64;
        let recall = tp / positives;
        ap += (recall - prev_recall) * tp / predicted;
        prev_recall = recall;
    }
    ap
}

#[test]
fn criterion_4_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut worst_auc, mut worst_ap): (f64, f64) = (0.0, 0.0);
    let mut checked = 0;
    while checked < 100 {
        let n = rng.random_range(2..=200);
        let coarse = rng.random_bool(0.5);
        let scores: Vec<f64> = (0..n).map(|_| if coarse { rng.random_range(0..5) as f64 / 4.0 } else { rng.random_range(0.0..1.0) }).collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        let pos = labels.iter().filter(|&&y| y == 1).count();
        if pos == 0 || pos == n {
            continue;
        }
        worst_auc = worst_auc.max((auc(&scores, &labels).unwrap().unwrap() - auc_pairwise(&scores, &labels)).abs());
        worst_ap = worst_ap.max((average_precision(&scores, &labels).unwrap().unwrap() - ap_accumulate(&scores, &labels)).abs());
        checked += 1;
    }
    let pass = worst_auc <= 1e-9 && worst_ap <= 1e-9;
    report(4, pass, &format!("100 instances; max AUC gap {worst_auc:.1e}, max AP gap {worst_ap:.1e} (tol 1e-9)"));
    assert!(pass);
}

// ------------------------------------------------------ toy experiments

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const VARIANTS: [Variant; 6] = [Variant::Full, Variant::NoIdentity, Variant::VisualAudio, Variant::Visual, Variant::Audio, Variant::Textual];

struct Ablations {
    tables: Vec<AblationTable>,
    full_seed0: Duration,
}

/// Trains every needed variant once for all five seeds on the default corpus.
fn ablations() -> &'static Ablations {
    static CELL: OnceLock<Ablations> = OnceLock::new();
    CELL.get_or_init(|| {
        let gen = GenConfig::default();
        assert_eq!((gen.seed, gen.inconsistency_strength), (11, 1.0));
        let (corpus, _) = generate(&gen).expect("default corpus");
        let base = TrainConfig::default();
        assert_eq!(base.steps, 2000);
        let mut full_seed0 = Duration::ZERO;
        let tables = SEEDS
            .iter()
            .map(|&seed| {
                let cfg = TrainConfig { seed, ..base.clone() };
                let start = Instant::now();
                let mut t = run_ablation(&cfg, &corpus, "default-corpus", &VARIANTS[..1]).expect("full run");
                if seed == 0 {
                    full_seed0 = start.elapsed();
                }
                t.rows.extend(run_ablation(&cfg, &corpus, "default-corpus", &VARIANTS[1..]).expect("ablation").rows);
                t
            })
            .collect();
        Ablations { tables, full_seed0 }
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn test_auc(t: &AblationTable, v: Variant) -> f64 {
    t.get(v).and_then(|r| r.metrics.auc).unwrap_or(f64::NAN)
}

fn median_auc(v: Variant) -> f64 {
    median(ablations().tables.iter().map(|t| test_auc(t, v)).collect())
}

#[test]
fn criterion_5_toy_detectability() {
    let a = ablations();
    let full0 = test_auc(&a.tables[0], Variant::Full);
    let full = median_auc(Variant::Full);
    let no_id = median_auc(Variant::NoIdentity);
    let per_seed: Vec<String> = a.tables.iter().map(|t| format!("{:.4}/{:.4}", test_auc(t, Variant::Full), test_auc(t, Variant::NoIdentity))).collect();
    let pass = full0 >= 0.90 && full - no_id >= 0.02 && a.full_seed0 < Duration::from_secs(15 * 60);
    report(
        5,
        pass,
        &format!(
            "Full test AUC (seed 0) {full0:.4} (need >= 0.90); median Full {full:.4} vs w/o identity {no_id:.4}, gap {:.4} (need >= 0.02); per seed Full/w-o-id {per_seed:?}; Full run {}",
            full - no_id,
            secs(a.full_seed0)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_ablation_ordering() {
    let full = median_auc(Variant::Full);
    let va = median_auc(Variant::VisualAudio);
    let uni = [Variant::Visual, Variant::Audio, Variant::Textual].map(median_auc);
    let best_uni = uni.iter().copied().fold(f64::MIN, f64::max);
    let pass = full + 0.005 >= va && va + 0.005 >= best_uni;
    report(6, pass, &format!("median test AUC Full {full:.4} >= Visual+Audio {va:.4} >= best unimodal {best_uni:.4} (V/A/T {:.4}/{:.4}/{:.4}; ties within 0.005)", uni[0], uni[1], uni[2]));
    assert!(pass);
}

// ---------------------------------------------------- structural invariants

fn shot(id: &str, identity: &str, video: &str, split: Split, label: ForgeryLabel, duration_s: f64, pixel: f64) -> ShotRecord {
    ShotRecord {
        meta: ShotMeta { shot_id: id.into(), identity_id: identity.into(), source_video_id: video.into(), split, duration_s },
        label,
        frames: Frames { t: 16, c: 1, h: 1, w: 2, data: vec![pixel; 32] },
        spectrogram: Spectrogram { m: 2, f: 2, data: vec![pixel - 0.5; 4] },
        tokens: vec![1, 2, 3],
    }
}

fn label_strategy() -> impl Strategy<Value = ForgeryLabel> {
    prop_oneof![
        Just(ForgeryLabel::PRISTINE),
        proptest::collection::vec(0u8..=1, NUM_TYPES).prop_filter("at least one type", |v| v.contains(&1)).prop_map(|v| ForgeryLabel { y_binary: 1, y_types: v.try_into().unwrap() }),
    ]
}

/// A corpus that satisfies every invariant by construction.
fn corpus_strategy() -> impl Strategy<Value = Corpus> {
    let suspect = (0usize..3, 0usize..3, label_strategy(), 0.5f64..30.0, 0.0f64..=1.0);
    (proptest::collection::vec(suspect, 1..10), proptest::collection::vec(1usize..3, 3)).prop_map(|(suspects, n_refs)| {
        let mut shots = Vec::new();
        let mut used = BTreeSet::new();
        for (k, (identity, split, label, dur, px)) in suspects.into_iter().enumerate() {
            let split = [Split::Train, Split::Val, Split::Test][split];
            let id = format!("p{identity}");
            used.insert(identity);
            shots.push(shot(&format!("s{k}"), &id, &format!("v{k}"), split, label, dur, px));
        }
        for identity in used {
            for r in 0..n_refs[identity] {
                shots.push(shot(&format!("r{identity}-{r}"), &format!("p{identity}"), &format!("rv{identity}-{r}"), Split::Reference, ForgeryLabel::PRISTINE, 6.0, 0.5));
            }
        }
        Corpus::from_shots(shots)
    })
}

fn run_cases<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let mut runner = TestRunner::new(PropConfig { cases: 1000, failure_persistence: None, ..PropConfig::default() });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn has(c: &Corpus, needle: &str) -> bool {
    validate_corpus(c).violations.iter().any(|v| v.message.contains(needle))
}

#[test]
fn criterion_7_structural_invariants() {
    let start = Instant::now();
    let mut failures = Vec::new();

    let valid = run_cases(corpus_strategy(), |c| {
        prop_assert!(validate_corpus(&c).is_valid(), "{:?}", validate_corpus(&c).violations);
        let mut bad = c.clone();
        let r = bad.shots.iter().position(|s| s.meta.split == Split::Reference).unwrap();
        bad.shots[r].label = ForgeryLabel { y_binary: 1, y_types: [1, 0, 0, 0, 0, 0, 0] };
        prop_assert!(has(&bad, "reference set must be pristine"));
        let mut bad = c.clone();
        bad.shots.retain(|s| !(s.meta.split == Split::Reference && s.meta.identity_id == c.shots[0].meta.identity_id));
        prop_assert!(has(&bad, "lacks reference media"));
        let mut bad = c.clone();
        let dup = bad.shots[0].clone();
        bad.shots.push(dup);
        prop_assert!(has(&bad, "duplicate shot_id"));
        let mut bad = c.clone();
        bad.shots[0].frames.data[0] = 1.5;
        prop_assert!(has(&bad, "[0, 1]"));
        Ok(())
    });
    if let Err(e) = valid {
        failures.push(format!("validate_corpus: {e}"));
    }

    let metas = proptest::collection::vec(0.1f64..12.0, 0..40).prop_map(|ds| {
        ds.into_iter().enumerate().map(|(k, d)| ShotMeta { shot_id: format!("s{k:02}"), identity_id: "p".into(), source_video_id: "v".into(), split: Split::Train, duration_s: d }).collect::<Vec<_>>()
    });
    let merge = run_cases(metas, |input| {
        let out = merge_short_shots(&input);
        let before: f64 = input.iter().map(|s| s.duration_s).sum();
        let after: f64 = out.iter().map(|s| s.duration_s).sum();
        prop_assert!((before - after).abs() <= 1e-9 * before.max(1.0));
        if out.len() > 1 {
            prop_assert!(out.iter().all(|s| s.duration_s >= MIN_SHOT_SECONDS));
        }
        prop_assert_eq!(out.is_empty(), input.is_empty());
        let ids: Vec<&str> = input.iter().map(|s| s.shot_id.as_str()).collect();
        let mut pos = 0;
        for s in &out {
            let at = ids[pos..].iter().position(|&i| i == s.shot_id);
            prop_assert!(at.is_some(), "output ids must be an ordered subset of the input");
            pos += at.unwrap() + 1;
        }
        Ok(())
    });
    if let Err(e) = merge {
        failures.push(format!("merge_short_shots: {e}"));
    }

    let tiny = Dims { t: 16, c: 1, h: 2, w: 2, m: 2, f: 2, l: 3, d_sig: 4 };
    let gen_cases = (any::<u64>(), 2usize..4, 0.0f64..=1.0);
    let pristine = run_cases(gen_cases, |(seed, ids, frac)| {
        let cfg = GenConfig { num_identities: ids, shots_per_identity: SplitCounts { reference: 1, train: 2, val: 0, test: 1 }, forged_fraction: frac, dims: tiny.clone(), seed, ..GenConfig::default() };
        let (c, _) = generate(&cfg).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(c.shots.iter().filter(|s| s.meta.split == Split::Reference).all(|s| !s.label.is_forged()));
        prop_assert!(validate_corpus(&c).is_valid());
        Ok(())
    });
    if let Err(e) = pristine {
        failures.push(format!("reference pristineness: {e}"));
    }

    let round_trip = run_cases(corpus_strategy(), |c| {
        let text = serialize_inline(&c);
        let back = parse_manifest(text.as_bytes(), Path::new(".")).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(serialize_inline(&back), text);
        Ok(())
    });
    if let Err(e) = round_trip {
        failures.push(format!("manifest round trip: {e}"));
    }

    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(30);
    report(7, pass, &format!("4 properties x 1000 cases; failures {failures:?}; {}", secs(elapsed)));
    assert!(pass, "{failures:?}");
}

// ------------------------------------------------------------ determinism

fn pipeline(dir: &Path, gen_cfg: &Path) -> Vec<u8> {
    let bin = env!("CARGO_BIN_EXE_forgeref");
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).env("RUST_LOG", "warn").output().expect("spawn forgeref");
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    let data = dir.join("data");
    let runs = dir.join("run");
    let (d, r) = (data.to_str().unwrap(), runs.to_str().unwrap());
    run(&["gen-data", "--config", gen_cfg.to_str().unwrap(), "--out", d, "--seed", "11"]);
    run(&["train", "--data", d, "--out", r, "--seed", "3", "--steps", "40"]);
    run(&["eval", "--run", r, "--split", "test"]);
    std::fs::read(runs.join("eval_test.json")).expect("eval report")
}

#[test]
fn criterion_8_determinism() {
    let start = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let gen_cfg = root.path().join("gen.json");
    let cfg = GenConfig { num_identities: 3, shots_per_identity: SplitCounts { reference: 2, train: 6, val: 2, test: 4 }, ..GenConfig::default() };
    std::fs::write(&gen_cfg, serde_json::to_vec(&cfg).unwrap()).unwrap();
    let a = pipeline(&root.path().join("a"), &gen_cfg);
    let b = pipeline(&root.path().join("b"), &gen_cfg);
    let pass = a == b && !a.is_empty();
    report(8, pass, &format!("gen-data -> train -> eval twice: eval_test.json {} ({} bytes); {}", if a == b { "byte-identical" } else { "differs" }, a.len(), secs(start.elapsed())));
    assert!(pass);
}
