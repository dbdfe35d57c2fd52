//! Central finite-difference check of reverse-mode gradients, run in `f64`.

use std::collections::BTreeMap;

use rand::seq::index::sample;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{derive_seed, name_hash, seeded_rng, ParamSet};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Coordinates checked per tensor; larger tensors are subsampled.
    pub max_coords_per_param: usize,
    /// Denominator floor of the relative error, so that two gradients that
    /// are both numerically zero compare equal.
    pub floor: f64,
    pub seed: u64,
    /// Times the step is divided by 4 when `p +- eps` straddles a ReLU or
    /// max-pool kink before the coordinate is skipped.
    pub kink_retries: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            tolerance: 1e-4,
            max_coords_per_param: 16,
            floor: 1e-8,
            seed: 0,
            kink_retries: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_param: BTreeMap<String, f64>,
    pub coords_checked: usize,
    /// Coordinates left out because every step tried straddled a kink.
    pub coords_skipped: usize,
    /// `(name, index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

struct Eval {
    value: f64,
    residual: f64,
    kinks: u64,
}

/// Loss with its residual (see [`Graph::residual`]) and kink signature.
fn eval_loss<F>(forward: &F, params: &ParamSet<f64>) -> Result<Eval>
where
    F: for<'p> Fn(&mut Graph<'p, f64>, &'p ParamSet<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = forward(&mut g, params)?;
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(TensorError::Input(format!("loss must be scalar, got {:?}", v.shape())));
    }
    Ok(Eval {
        value: v.data()[0],
        residual: g.residual(loss),
        kinks: g.kink_signature(),
    })
}

/// Compares the gradients produced by [`Graph::backward`] with
/// `(f(p + eps) - f(p - eps)) / 2 eps` for every trainable tensor.
pub fn grad_check<F>(forward: F, params: &ParamSet<f64>, config: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'p> Fn(&mut Graph<'p, f64>, &'p ParamSet<f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let loss = forward(&mut g, params)?;
        g.backward(loss)?
    };
    let first = eval_loss(&forward, params)?;
    let second = eval_loss(&forward, params)?;
    if first.value.to_bits() != second.value.to_bits() || first.residual.to_bits() != second.residual.to_bits() {
        return Err(TensorError::NonDeterministic(format!(
            "two evaluations gave {:e} and {:e}",
            first.value, second.value
        )));
    }

    let mut work = params.clone();
    let mut per_param = BTreeMap::new();
    let mut coords_checked = 0;
    let mut coords_skipped = 0;
    let mut worst_coord: Option<(String, usize, f64, f64)> = None;
    let mut worst_overall = -1.0;
    let trainable: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in trainable {
        let numel = params.value(&name)?.numel();
        let mut coords: Vec<usize> = if numel <= config.max_coords_per_param {
            (0..numel).collect()
        } else {
            let mut rng = seeded_rng(derive_seed(&[config.seed, name_hash(&name)]));
            sample(&mut rng, numel, config.max_coords_per_param).into_vec()
        };
        coords.sort_unstable();
        let grad = analytic
            .get(&name)
            .ok_or_else(|| TensorError::MissingGrad(name.clone()))?
            .data()
            .to_vec();
        let mut worst: f64 = 0.0;
        for i in coords {
            let orig = work.value(&name)?.data()[i];
            let mut eps = config.epsilon;
            let mut numeric = None;
            for _ in 0..=config.kink_retries {
                work.get_mut(&name)?.value.data_mut()[i] = orig + eps;
                let plus = eval_loss(&forward, &work)?;
                work.get_mut(&name)?.value.data_mut()[i] = orig - eps;
                let minus = eval_loss(&forward, &work)?;
                work.get_mut(&name)?.value.data_mut()[i] = orig;
                if plus.kinks == first.kinks && minus.kinks == first.kinks {
                    // high and low parts are differenced separately so that
                    // the residuals are not rounded away
                    numeric = Some(((plus.value - minus.value) + (plus.residual - minus.residual)) / (2.0 * eps));
                    break;
                }
                eps /= 4.0;
            }
            let Some(numeric) = numeric else {
                coords_skipped += 1;
                continue;
            };
            let err = relative_error(grad[i], numeric, config.floor);
            worst = worst.max(err);
            if err > worst_overall {
                worst_overall = err;
                worst_coord = Some((name.clone(), i, grad[i], numeric));
            }
            coords_checked += 1;
        }
        per_param.insert(name, worst);
    }
    let max_rel_error = per_param.values().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        passed: max_rel_error < config.tolerance,
        per_param,
        coords_checked,
        coords_skipped,
        worst: worst_coord,
    })
}
