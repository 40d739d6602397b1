//! Finite-difference suites over every trainable component, at sizes small
//! enough (under 1000 parameters each) for exhaustive central differences.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::data_model::ForgeryLabel;
use crate::encoders::{AudioEncoder, Encoded, EncoderConfig, TextEncoder, VisualEncoder};
use crate::fusion::{FusionBlock, FusionConfig};
use crate::gradcheck::{check_inputs, check_params, GradCheckConfig, GradCheckReport};
use crate::losses::{classification_graph, cross_modal_graph, identity_graph, ContrastiveConfig, Heads, IdentityBatch, ModalityVars, PairPlan};
use crate::nn::{strided_rows, uniform_segments, Init, ParamStore};
use crate::synthetic::rng_for;
use crate::tensor::Mat;

/// Encoder sizes used by the suites.
pub fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig {
        d_model: 4,
        heads: 2,
        layers: 1,
        n_groups: 2,
        group_size: 2,
        frame: [1, 4, 4],
        conv_channels: [2, 2],
        conv_kernel: 2,
        spec: [4, 4],
        patch: [2, 2],
        vocab_size: 6,
        seq_len: 3,
        input_mean: 0.5,
        input_std: 0.25,
    }
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Scalar probe `Σ w ⊙ x` with fixed random weights.
fn probe(g: &mut Graph, x: Var, w: &Rc<Mat>) -> Var {
    let y = g.mul_const(x, w.clone());
    g.sum_all(y)
}

fn build<T>(seed: u64, f: impl FnOnce(&mut Init<'_>) -> T) -> (ParamStore, T) {
    let mut ps = ParamStore::new();
    let mut rng = rng_for(seed, "gradsuite/init");
    let module = {
        let mut init = Init::new(&mut ps, &mut rng);
        f(&mut init)
    };
    (ps, module)
}

fn fake_encoded(g: &mut Graph, seq: Var, b: usize, len: usize) -> Encoded {
    let seg = uniform_segments(b, len);
    let pooled = g.select_rows(seq, &strided_rows(b, len, 0));
    Encoded { seq, seg, pooled }
}

/// Runs every suite; entry names are `suite/tensor`.
pub fn run_suites(seed: u64, cfg: &GradCheckConfig) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    let ec = tiny_encoder_config();
    let d = ec.d_model;
    let b = 2;
    let mut rng = rng_for(seed, "gradsuite/data");

    // Visual encoder.
    let (ps, enc) = build(seed, |i| VisualEncoder::new(i, &ec));
    let frames = random_mat(&mut rng, b * ec.n_groups * ec.group_size, 16, 1.0);
    let w = Rc::new(random_mat(&mut rng, b, d, 1.0));
    let fr = frames.clone();
    report.extend("visual", check_params(&ps, &|g: &mut Graph, ps: &ParamStore| {
        let x = g.constant(fr.clone());
        let e = enc.forward(g, ps, x);
        probe(g, e.pooled, &w)
    }, cfg));
    report.extend("visual", check_inputs(&[frames], &|g: &mut Graph, v: &[Var]| {
        let e = enc.forward(g, &ps, v[0]);
        probe(g, e.pooled, &w)
    }, cfg));

    // Audio encoder.
    let (ps, enc) = build(seed, |i| AudioEncoder::new(i, &ec));
    let spec = random_mat(&mut rng, b, 16, 1.0);
    let sp = spec.clone();
    report.extend("audio", check_params(&ps, &|g: &mut Graph, ps: &ParamStore| {
        let x = g.constant(sp.clone());
        let e = enc.forward(g, ps, x);
        probe(g, e.pooled, &w)
    }, cfg));
    report.extend("audio", check_inputs(&[spec], &|g: &mut Graph, v: &[Var]| {
        let e = enc.forward(g, &ps, v[0]);
        probe(g, e.pooled, &w)
    }, cfg));

    // Text encoder.
    let (ps, enc) = build(seed, |i| TextEncoder::new(i, &ec));
    let tokens: Vec<usize> = (0..b * ec.seq_len).map(|_| rng.random_range(0..ec.vocab_size)).collect();
    report.extend("text", check_params(&ps, &|g: &mut Graph, ps: &ParamStore| {
        let e = enc.forward(g, ps, &tokens).expect("valid tokens");
        probe(g, e.pooled, &w)
    }, cfg));

    // Fusion block over all three modalities, with and without residuals.
    for (label, residual) in [("fusion", true), ("fusion_literal", false)] {
        let (ps, block) = build(seed, |i| FusionBlock::new(i, d, 2, FusionConfig { residual, ..FusionConfig::default() }));
        let (lv, la, lt) = (2, 3, 4);
        let inputs = vec![random_mat(&mut rng, b * lv, d, 1.0), random_mat(&mut rng, b * la, d, 1.0), random_mat(&mut rng, b * lt, d, 1.0)];
        let run = |g: &mut Graph, ps: &ParamStore, vars: [Var; 3]| {
            let v = fake_encoded(g, vars[0], b, lv);
            let a = fake_encoded(g, vars[1], b, la);
            let t = fake_encoded(g, vars[2], b, lt);
            let fused = block.forward(g, ps, Some(&v), Some(&a), Some(&t));
            let p1 = probe(g, fused.f_atv, &w);
            let f_at = fused.f_at.expect("audio and text active");
            let p2 = probe(g, f_at, &w);
            g.add(p1, p2)
        };
        let consts = inputs.clone();
        report.extend(label, check_params(&ps, &|g: &mut Graph, ps: &ParamStore| {
            let vars = [g.constant(consts[0].clone()), g.constant(consts[1].clone()), g.constant(consts[2].clone())];
            run(g, ps, vars)
        }, cfg));
        report.extend(label, check_inputs(&inputs, &|g: &mut Graph, v: &[Var]| run(g, &ps, [v[0], v[1], v[2]]), cfg));
    }

    // Cross-modal contrastive loss, temperature below one to sharpen it.
    let n = 5;
    let forged = [false, false, true, false, true];
    let plan = PairPlan::in_batch(&forged);
    let cc = ContrastiveConfig { tau: 0.5, ..ContrastiveConfig::default() };
    let feats = vec![random_mat(&mut rng, n, d, 1.0), random_mat(&mut rng, n, d, 1.0), random_mat(&mut rng, n, d, 1.0)];
    report.extend("cross_modal_loss", check_inputs(&feats, &|g: &mut Graph, v: &[Var]| {
        let mv = ModalityVars { v: Some(v[0]), a: Some(v[1]), t: Some(v[2]) };
        cross_modal_graph(g, &mv, &plan, &cc).expect("active pairs")
    }, cfg));

    // Identity-aware loss.
    let identities: Vec<String> = ["p", "q", "p", "p", "q"].iter().map(|s| s.to_string()).collect();
    let ref_identities: Vec<String> = ["p", "p", "q", "r"].iter().map(|s| s.to_string()).collect();
    let ib = IdentityBatch { identities: &identities, forged: &forged, ref_identities: &ref_identities };
    let mats = vec![random_mat(&mut rng, n, d, 1.0), random_mat(&mut rng, ref_identities.len(), d, 1.0)];
    report.extend("identity_loss", check_inputs(&mats, &|g: &mut Graph, v: &[Var]| {
        identity_graph(g, v[0], v[1], &ib, &cc).expect("valid batch").expect("anchors present").0
    }, cfg));

    // Classification heads and both classification losses.
    let (ps, heads) = build(seed, |i| Heads::new(i, d));
    let labels: Vec<ForgeryLabel> = forged
        .iter()
        .enumerate()
        .map(|(i, &f)| if f { ForgeryLabel { y_binary: 1, y_types: [0, 1, 0, 0, 0, (i % 2) as u8, 1] } } else { ForgeryLabel::PRISTINE })
        .collect();
    let fp = random_mat(&mut rng, n, d, 1.0);
    let fpc = fp.clone();
    let loss = |g: &mut Graph, ps: &ParamStore, x: Var| {
        let (bic, mlc) = heads.forward(g, ps, x);
        let (lb, lm) = classification_graph(g, bic, mlc, &labels);
        g.add(lb, lm)
    };
    report.extend("classification", check_params(&ps, &|g: &mut Graph, ps: &ParamStore| {
        let x = g.constant(fpc.clone());
        loss(g, ps, x)
    }, cfg));
    report.extend("classification", check_inputs(&[fp], &|g: &mut Graph, v: &[Var]| loss(g, &ps, v[0]), cfg));

    // Reference fusion feeding the heads: f + α·ref.
    let refs = Rc::new(random_mat(&mut rng, n, d, 1.0).scale(0.25));
    let fp = random_mat(&mut rng, n, d, 1.0);
    report.extend("reference_fusion", check_inputs(&[fp], &|g: &mut Graph, v: &[Var]| {
        let x = g.add_const(v[0], refs.clone());
        loss(g, &ps, x)
    }, cfg));
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_and_cover_every_component() {
        let report = run_suites(3, &GradCheckConfig::default());
        for e in &report.entries {
            assert!(e.passed, "{} rel error {}", e.name, e.rel_error);
        }
        for suite in ["visual", "audio", "text", "fusion", "fusion_literal", "cross_modal_loss", "identity_loss", "classification", "reference_fusion"] {
            assert!(report.entries.iter().any(|e| e.name.starts_with(&format!("{suite}/"))), "{suite} missing");
        }
    }

    #[test]
    fn corrupted_gradient_fails() {
        let cfg = GradCheckConfig { analytic_scale: 1.001, ..GradCheckConfig::default() };
        assert!(!run_suites(3, &cfg).passed());
    }

    #[test]
    fn components_are_small() {
        let ec = tiny_encoder_config();
        let (ps, _) = build(0, |i| VisualEncoder::new(i, &ec));
        assert!(ps.num_scalars() <= 1000);
        let (ps, _) = build(0, |i| FusionBlock::new(i, 4, 2, FusionConfig::default()));
        assert!(ps.num_scalars() <= 1000);
    }
}
