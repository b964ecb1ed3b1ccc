//! Central finite-difference gradient checking.
//!
//! The numerical side only evaluates the forward function, so it is
//! independent of every backward rule it checks.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a gradient check: relative error per input,
/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares backward-pass gradients of the scalar built by `f` against
/// central differences with step `h` for every input tensor.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = vals
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(Error::Shape("gradient check needs a scalar output".into()));
        }
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut rel_errors = Vec::with_capacity(inputs.len());
    for (k, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = vec![0.0; inputs[k].numel()];
        let mut work: Vec<Tensor> = inputs.to_vec();
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            numeric[i] = (plus - minus) / (2.0 * h);
        }
        let diff = norm(analytic.iter().zip(&numeric).map(|(a, n)| a - n));
        let scale = norm(analytic.iter().copied()).max(norm(numeric.iter().copied()));
        rel_errors.push(if scale == 0.0 { diff } else { diff / scale });
    }
    Ok(GradCheck { rel_errors })
}

fn norm(it: impl Iterator<Item = f64>) -> f64 {
    it.map(|v| v * v).sum::<f64>().sqrt()
}
