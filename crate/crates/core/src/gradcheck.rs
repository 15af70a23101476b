//! Central-finite-difference gradient checking.

use crate::error::{ModelError, TensorError};
use crate::nn::ParamContainer;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Compare the tape gradient of a scalar-valued function against
/// central finite differences at every coordinate of `x`.
///
/// Returns the max over coordinates of
/// `|analytic - central_difference| / max(1, |analytic|)`.
pub fn finite_difference_check<F>(mut f: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: FnMut(&mut Tape, &Tensor) -> Result<Tensor, TensorError>,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut tape = Tape::recording();
    let xx = tape.leaf(x);
    let y = f(&mut tape, &xx)?;
    if !y.is_scalar_shaped() {
        return Err(TensorError::LossNotScalar {
            got: y.shape().to_vec(),
        });
    }
    let grads = tape.backward(&y)?;
    let analytic = grads.get(&xx)?;

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let fp = eval_scalar(&mut f, x.shape(), plus)?;
        let fm = eval_scalar(&mut f, x.shape(), minus)?;
        let fd = (fp - fm) / (2.0 * eps);
        let gi = analytic.data()[i];
        let rel = (gi - fd).abs() / gi.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn eval_scalar<F>(f: &mut F, shape: &[usize], data: Vec<f64>) -> Result<f64, TensorError>
where
    F: FnMut(&mut Tape, &Tensor) -> Result<Tensor, TensorError>,
{
    let mut tape = Tape::eval();
    let x = Tensor::from_vec(shape.to_vec(), data)?;
    Ok(f(&mut tape, &x)?.item())
}

/// Check every parameter of a container against central finite
/// differences of a scalar loss over the whole model. Returns
/// (parameter name, max relative error) pairs in visit order.
///
/// One parameter at a time is swapped for the probe tensor; the others
/// stay constant, so the analytic gradient under test is exactly the
/// per-parameter adjoint the trainer consumes.
pub fn finite_difference_check_params<M, F>(
    model: &M,
    mut loss: F,
    eps: f64,
) -> Result<Vec<(String, f64)>, ModelError>
where
    M: ParamContainer,
    F: FnMut(&mut Tape, &M) -> Result<Tensor, ModelError>,
{
    assert!(eps > 0.0, "eps must be positive");
    let named = model.named();
    let mut out = Vec::with_capacity(named.len());
    for (k, (name, base)) in named.iter().enumerate() {
        let patch = |x: &Tensor, model: &M| -> M {
            let mut i = 0;
            model.map_params(&mut |t| {
                let r = if i == k { x.clone() } else { t.detached() };
                i += 1;
                r
            })
        };

        // Analytic gradient with only this parameter tracked.
        let mut tape = Tape::recording();
        let x = tape.leaf(base);
        let patched = patch(&x, model);
        let y = loss(&mut tape, &patched)?;
        if !y.is_scalar_shaped() {
            return Err(ModelError::Tensor(TensorError::LossNotScalar {
                got: y.shape().to_vec(),
            }));
        }
        let grads = tape.backward(&y)?;
        let analytic = grads.get(&x)?;

        let mut worst = 0.0f64;
        for i in 0..base.len() {
            let mut plus = base.data().to_vec();
            plus[i] += eps;
            let mut minus = base.data().to_vec();
            minus[i] -= eps;
            let mut fp_tape = Tape::eval();
            let xp = Tensor::from_vec(base.shape().to_vec(), plus).map_err(ModelError::Tensor)?;
            let fp = loss(&mut fp_tape, &patch(&xp, model))?.item();
            let mut fm_tape = Tape::eval();
            let xm = Tensor::from_vec(base.shape().to_vec(), minus).map_err(ModelError::Tensor)?;
            let fm = loss(&mut fm_tape, &patch(&xm, model))?.item();
            let fd = (fp - fm) / (2.0 * eps);
            let gi = analytic.data()[i];
            worst = worst.max((gi - fd).abs() / gi.abs().max(1.0));
        }
        out.push((name.clone(), worst));
    }
    Ok(out)
}
