//! Central finite-difference checks of backpropagated gradients.
//!
//! The error for one tensor is `‖analytic − numeric‖₂ / max(‖analytic‖₂,
//! ‖numeric‖₂)`; tensors whose gradients both have norm below
//! `abs_floor` pass trivially.

use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::nn::ParamStore;
use crate::tensor::Mat;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub abs_floor: f64,
    /// Multiplies every analytic gradient; values other than 1 simulate a
    /// broken backward pass.
    pub analytic_scale: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, abs_floor: 1e-9, analytic_scale: 1.0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.passed)
    }

    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn extend(&mut self, prefix: &str, other: GradCheckReport) {
        for mut e in other.entries {
            e.name = format!("{prefix}/{}", e.name);
            self.entries.push(e);
        }
    }
}

fn compare(name: String, analytic: &Mat, numeric: &Mat, cfg: &GradCheckConfig) -> GradCheckEntry {
    let diff: f64 = analytic.data().iter().zip(numeric.data()).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let scale = analytic.frobenius().max(numeric.frobenius());
    let rel_error = if scale < cfg.abs_floor { 0.0 } else { diff / scale };
    GradCheckEntry { name, passed: rel_error < cfg.tolerance && rel_error.is_finite(), rel_error }
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).get(0, 0)
}

/// Checks gradients of `f` with respect to every input matrix.
pub fn check_inputs<F>(inputs: &[Mat], f: &F, cfg: &GradCheckConfig) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |mats: &[Mat]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = mats.iter().map(|m| g.input(m.clone())).collect();
        let out = f(&mut g, &vars);
        scalar(&g, out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let mut report = GradCheckReport::default();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.of(vars[k]).cloned().unwrap_or_else(|| Mat::zeros(input.rows(), input.cols())).scale(cfg.analytic_scale);
        let mut numeric = Mat::zeros(input.rows(), input.cols());
        let mut work = inputs.to_vec();
        for i in 0..input.len() {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + cfg.step;
            let up = eval(&work);
            work[k].data_mut()[i] = orig - cfg.step;
            let down = eval(&work);
            work[k].data_mut()[i] = orig;
            numeric.data_mut()[i] = (up - down) / (2.0 * cfg.step);
        }
        report.entries.push(compare(format!("input{k}"), &analytic, &numeric, cfg));
    }
    report
}

/// Checks gradients of `f` with respect to every parameter in `store`.
pub fn check_params<F>(store: &ParamStore, f: &F, cfg: &GradCheckConfig) -> GradCheckReport
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let eval = |ps: &ParamStore| {
        let mut g = Graph::new();
        let out = f(&mut g, ps);
        scalar(&g, out)
    };
    let mut g = Graph::new();
    let out = f(&mut g, store);
    let grads = g.backward(out);
    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for (id, name, value) in store.iter() {
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Mat::zeros(value.rows(), value.cols())).scale(cfg.analytic_scale);
        let mut numeric = Mat::zeros(value.rows(), value.cols());
        for i in 0..value.len() {
            let orig = value.data()[i];
            work.get_mut(id).data_mut()[i] = orig + cfg.step;
            let up = eval(&work);
            work.get_mut(id).data_mut()[i] = orig - cfg.step;
            let down = eval(&work);
            work.get_mut(id).data_mut()[i] = orig;
            numeric.data_mut()[i] = (up - down) / (2.0 * cfg.step);
        }
        report.entries.push(compare(name.to_string(), &analytic, &numeric, cfg));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_scaled_gradient() {
        let inputs = vec![Mat::from_vec(1, 3, vec![0.3, -0.7, 1.1])];
        let f = |g: &mut Graph, v: &[Var]| {
            let sq = g.mul(v[0], v[0]);
            g.sum_all(sq)
        };
        assert!(check_inputs(&inputs, &f, &GradCheckConfig::default()).passed());
        let broken = GradCheckConfig { analytic_scale: 1.01, ..Default::default() };
        assert!(!check_inputs(&inputs, &f, &broken).passed());
    }
}
