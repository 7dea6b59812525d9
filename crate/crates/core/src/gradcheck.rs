//! Central finite-difference checks of tape gradients.
//!
//! Relative error per coordinate is `|analytic - numeric| / max(1, |numeric|)`;
//! both checkers report the maximum over the coordinates visited.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Checks `d f / d point` for a tensor-to-scalar function.
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Graph<'_>, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_input(&ParamStore::new(), f, point, epsilon)
}

/// [`grad_check`] for functions that also read parameters from `store`.
pub fn grad_check_input<F>(store: &ParamStore, f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Graph<'_>, Var<'t>) -> Result<Var<'t>>,
{
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let analytic = {
        let g = Graph::new(store);
        let x = g.input(point.clone())?;
        let y = f(&g, x)?;
        let grads = g.backward(y)?;
        grads.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()))
    };
    let eval = |p: &Tensor| -> Result<f64> {
        let g = Graph::new(store);
        let x = g.input(p.clone())?;
        f(&g, x)?.item()
    };
    let mut worst = 0.0_f64;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic.data()[i], (up - down) / (2.0 * epsilon)));
    }
    Ok(worst)
}

/// Which parameter coordinates a parameter check visits.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// A seeded random sample of this many trainable coordinates.
    Sample(usize, u64),
}

/// Checks the gradient of `loss(graph)` with respect to every trainable
/// parameter in `store` (or a sampled subset of coordinates).
pub fn grad_check_params<F>(store: &ParamStore, loss: F, epsilon: f64, coverage: Coverage) -> Result<f64>
where
    F: for<'t> Fn(&'t Graph<'_>) -> Result<Var<'t>>,
{
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let analytic: Vec<f64> = {
        let g = Graph::training(store);
        let l = loss(&g)?;
        let grads = g.backward(l)?;
        store.ids().filter(|&id| store.entry(id).trainable).flat_map(|id| grads.param(id).data().to_vec()).collect()
    };
    let base = store.flatten_trainable();
    let coords: Vec<usize> = match coverage {
        Coverage::All => (0..base.len()).collect(),
        Coverage::Sample(n, seed) => {
            let mut rng = crate::rng(seed);
            let n = n.min(base.len());
            let mut v = sample(&mut rng, base.len(), n).into_vec();
            v.sort_unstable();
            v
        }
    };
    let mut probe = store.clone();
    let mut flat = base.clone();
    let mut eval = |flat: &[f64]| -> Result<f64> {
        probe.load_trainable(flat)?;
        let g = Graph::training(&probe);
        loss(&g)?.item()
    };
    let mut worst = 0.0_f64;
    for i in coords {
        flat[i] = base[i] + epsilon;
        let up = eval(&flat)?;
        flat[i] = base[i] - epsilon;
        let down = eval(&flat)?;
        flat[i] = base[i];
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * epsilon)));
    }
    Ok(worst)
}

/// Uniform random tensor in `[-scale, scale]`.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..=scale)).collect()).expect("positive shape")
}
