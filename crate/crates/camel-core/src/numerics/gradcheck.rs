//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::numerics::params::{fnv1a, ParamStore};
use crate::numerics::tensor::Tensor;

/// Deterministic scalar loss over a parameter store.
pub trait LossFn {
    fn loss_and_grads(&self, params: &ParamStore) -> Result<(f64, BTreeMap<String, Tensor>)>;

    /// Value-only evaluation; override when gradients are expensive.
    fn loss(&self, params: &ParamStore) -> Result<f64> {
        self.loss_and_grads(params).map(|(l, _)| l)
    }
}

impl<F> LossFn for F
where
    F: Fn(&ParamStore) -> Result<(f64, BTreeMap<String, Tensor>)>,
{
    fn loss_and_grads(&self, params: &ParamStore) -> Result<(f64, BTreeMap<String, Tensor>)> {
        self(params)
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Parameters with more elements than this get a seeded random subset.
    pub max_probes_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            max_probes_per_tensor: 16,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_err: f64,
    pub worst_param: Option<String>,
    pub probes: usize,
    pub tolerance: f64,
    /// Set when evaluation produced a non-finite loss; the check is void.
    pub aborted: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.aborted.is_none() && self.max_rel_err < self.tolerance
    }
}

/// Relative error with an additive floor so near-zero gradients do not
/// amplify finite-difference noise.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + 1e-3)
}

/// Compare analytic gradients against central finite differences
/// `(f(x+eps) - f(x-eps)) / (2 eps)` element by element.
pub fn grad_check(f: &dyn LossFn, params: &ParamStore, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        per_param: BTreeMap::new(),
        max_rel_err: 0.0,
        worst_param: None,
        probes: 0,
        tolerance: cfg.tolerance,
        aborted: None,
    };
    let (base_loss, grads) = match f.loss_and_grads(params) {
        Ok(x) => x,
        Err(e) => {
            report.aborted = Some(format!("loss evaluation failed: {e}"));
            return Ok(report);
        }
    };
    if !base_loss.is_finite() {
        report.aborted = Some(format!("non-finite loss {base_loss}"));
        return Ok(report);
    }

    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut work = params.clone();
    for name in &names {
        let value = params.value(name)?.clone();
        let n = value.numel();
        let probe_idx: Vec<usize> = if n <= cfg.max_probes_per_tensor {
            (0..n).collect()
        } else {
            let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ fnv1a(name.as_bytes()));
            let mut v = sample(&mut rng, n, cfg.max_probes_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let analytic = grads.get(name);
        let mut worst = 0.0f64;
        for &i in &probe_idx {
            let x0 = value.data()[i];
            work.set_element(name, i, x0 + cfg.eps)?;
            let up = f.loss(&work)?;
            work.set_element(name, i, x0 - cfg.eps)?;
            let down = f.loss(&work)?;
            work.set_element(name, i, x0)?;
            if !up.is_finite() || !down.is_finite() {
                report.aborted = Some(format!("non-finite loss while perturbing {name}[{i}]"));
                return Ok(report);
            }
            // Parameters live on the f32 grid, so use the realized step.
            let hi = (x0 + cfg.eps) as f32 as f64;
            let lo = (x0 - cfg.eps) as f32 as f64;
            let numeric = (up - down) / (hi - lo);
            let a = analytic.map_or(0.0, |t| t.data()[i]);
            worst = worst.max(rel_err(a, numeric));
            report.probes += 1;
        }
        report.per_param.insert(name.clone(), worst);
        if worst > report.max_rel_err {
            report.max_rel_err = worst;
            report.worst_param = Some(name.clone());
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;

    fn quadratic_loss(params: &ParamStore) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut tape = Tape::new();
        let p = tape.param(params, "q")?;
        let col = tape.reshape(p, vec![4, 1])?;
        let row = tape.transpose(col)?;
        let sq = tape.matmul(row, col)?; // [[sum of squares]]
        let s = tape.sum(sq);
        let loss = tape.value(s).data()[0];
        let grads = tape.backward(s)?;
        Ok((loss, grads))
    }

    #[test]
    fn quadratic_is_exact_for_central_differences() {
        let mut store = ParamStore::new();
        store.insert(
            "q",
            Tensor::from_rows(&[vec![0.5, -1.25], vec![2.0, 0.75]]).unwrap(),
        );
        let report = grad_check(&quadratic_loss, &store, &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "report: {report:?}");
        assert!(
            report.max_rel_err < 1e-8,
            "max rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn nan_loss_aborts() {
        let f = |_: &ParamStore| -> Result<(f64, BTreeMap<String, Tensor>)> {
            Ok((f64::NAN, BTreeMap::new()))
        };
        let mut store = ParamStore::new();
        store.insert("q", Tensor::scalar(1.0));
        let report = grad_check(&f, &store, &GradCheckConfig::default()).unwrap();
        assert!(report.aborted.is_some());
        assert!(!report.passed());
    }
}
