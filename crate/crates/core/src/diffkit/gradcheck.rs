//! Finite-difference verification of analytic gradients (64-bit only).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so entries whose true gradient
/// is (numerically) zero are judged on absolute error instead.
const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Tensors with more entries are checked on a seeded random subset of
    /// this many entries.
    pub max_entries_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_entries_per_tensor: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntryLocation {
    pub tensor: String,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<EntryLocation>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Compares the analytic gradient of `⟨r, f(inputs, params)⟩` against
/// central differences, where `r` is a fixed seeded random cotangent with
/// entries in [-1, 1]. Every input entry and every parameter entry used by
/// `f` is checked (subsampled above `max_entries_per_tensor`).
pub fn check_gradients<F>(
    store: &mut ParamStore<f64>,
    inputs: &mut [Tensor<f64>],
    f: F,
    cfg: &GradCheckConfig,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, store, &vars)?;
    check_finite(g.value(out), "forward output")?;
    let cotangent = Tensor::from_fn(g.shape(out), |_| rng.random_range(-1.0..1.0));
    let loss = project(&mut g, out, cotangent.clone());
    let grads = g.backward(loss);

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    for (i, (t, v)) in inputs.iter().zip(&vars).enumerate() {
        let gv = grads.wrt(*v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.len()]);
        analytic.push((format!("input[{i}]"), gv));
    }
    let pgrads = grads.param_grads();
    for (id, p) in store.iter() {
        let gv = pgrads
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, g)| g.to_vec())
            .unwrap_or(vec![0.0; p.value.len()]);
        analytic.push((p.name.clone(), gv));
    }
    for (name, gv) in &analytic {
        if let Some(i) = gv.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("analytic gradient of {name} at entry {i}")));
        }
    }

    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, store, &vars)?;
        let loss = project(&mut g, out, cotangent.clone());
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("perturbed forward evaluation".into()));
        }
        Ok(value)
    };

    let mut report = GradReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        tolerance: cfg.tolerance,
    };
    let n_inputs = inputs.len();
    let param_ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (slot, (name, gv)) in analytic.iter().enumerate() {
        let len = gv.len();
        let entries: Vec<usize> = if len <= cfg.max_entries_per_tensor {
            (0..len).collect()
        } else {
            let mut idx = sample(&mut rng, len, cfg.max_entries_per_tensor).into_vec();
            idx.sort_unstable();
            idx
        };
        for e in entries {
            let numeric = if slot < n_inputs {
                let orig = inputs[slot].data()[e];
                inputs[slot].data_mut()[e] = orig + cfg.step;
                let plus = eval(store, inputs);
                inputs[slot].data_mut()[e] = orig - cfg.step;
                let minus = eval(store, inputs);
                inputs[slot].data_mut()[e] = orig;
                (plus? - minus?) / (2.0 * cfg.step)
            } else {
                let id = param_ids[slot - n_inputs];
                let orig = store.value(id).data()[e];
                store.get_mut(id).value.data_mut()[e] = orig + cfg.step;
                let plus = eval(store, inputs);
                store.get_mut(id).value.data_mut()[e] = orig - cfg.step;
                let minus = eval(store, inputs);
                store.get_mut(id).value.data_mut()[e] = orig;
                (plus? - minus?) / (2.0 * cfg.step)
            };
            let a = gv[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some(EntryLocation {
                        tensor: name.clone(),
                        index: e,
                    });
                }
            }
        }
    }
    Ok(report)
}

fn project(g: &mut Graph<f64>, out: Var, cotangent: Tensor<f64>) -> Var {
    let shape = g.shape(out).to_vec();
    let r = g.input(cotangent.reshape(&shape).expect("cotangent shape"));
    let prod = g.mul(out, r);
    g.sum(prod)
}

fn check_finite(t: &Tensor<f64>, what: &str) -> Result<()> {
    match t.first_non_finite() {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite(format!("{what} at entry {i}"))),
    }
}
