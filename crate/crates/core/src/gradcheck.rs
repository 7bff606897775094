//! Central finite-difference checks of reverse-mode gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Forward, ParameterSet};

/// Largest relative error seen for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Entries sampled per tensor; tensors this small are checked in full.
    pub samples_per_tensor: usize,
    /// Denominator floor for relative errors.
    pub floor: f64,
    pub seed: u64,
    /// Only tensors whose name starts with one of these are checked; empty
    /// checks every tensor that receives a gradient.
    pub prefixes: Vec<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-4, samples_per_tensor: 6, floor: 1e-7, seed: 0, prefixes: Vec::new() }
    }
}

fn scalar(f: &Forward, loss: Var) -> Result<f64> {
    let m = f.value(loss);
    if m.rows() != 1 || m.cols() != 1 {
        return Err(Error::Shape(format!("loss must be 1x1, got {}x{}", m.rows(), m.cols())));
    }
    Ok(m.get(0, 0))
}

/// Compares the gradient of `loss` (built with dropout off) against central
/// differences. Perturbations use the difference actually representable in
/// the `f32` parameter storage.
pub fn check_gradients(
    params: &ParameterSet,
    loss: impl Fn(&mut Forward) -> Result<Var>,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let grads = {
        let mut f = Forward::eval(params);
        let l = loss(&mut f)?;
        scalar(&f, l)?;
        f.gradients(l)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut probe = params.clone();
    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut f = Forward::eval(p);
        let l = loss(&mut f)?;
        scalar(&f, l)
    };
    let mut tensors = Vec::new();
    for (name, g) in grads.iter() {
        if !options.prefixes.is_empty() && !options.prefixes.iter().any(|p| name.starts_with(p.as_str())) {
            continue;
        }
        let n = g.data().len();
        let picks: Vec<usize> = if n <= options.samples_per_tensor {
            (0..n).collect()
        } else {
            index::sample(&mut rng, n, options.samples_per_tensor).into_vec()
        };
        let mut worst: f64 = 0.0;
        for &k in &picks {
            let original = params.get(name).expect("gradient for a bound parameter").data()[k];
            let plus = (original as f64 + options.step) as f32;
            let minus = (original as f64 - options.step) as f32;
            probe.get_mut(name).expect("cloned").data_mut()[k] = plus;
            let lp = eval(&probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[k] = minus;
            let lm = eval(&probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[k] = original;
            let numeric = (lp - lm) / (plus as f64 - minus as f64);
            worst = worst.max(relative_error(g.data()[k], numeric, options.floor));
        }
        tensors.push(TensorCheck {
            name: name.clone(),
            entries_checked: picks.len(),
            max_rel_error: worst,
            analytic_norm: g.data().iter().map(|v| v * v).sum::<f64>().sqrt(),
        });
    }
    Ok(GradCheckReport { tensors })
}
