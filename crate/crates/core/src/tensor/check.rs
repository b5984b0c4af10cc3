//! Central finite-difference gradient verification.
//!
//! The checker rebuilds the function on a fresh tape for the analytic
//! gradient and for every coordinate probe, so it exercises exactly the same
//! code path training uses. Relative error per coordinate is
//! `|a - n| / max(1, |a|, |n|)`; a constant function therefore reports 0.

use super::{RawTensor, Tape, Tensor, TensorResult};
use crate::Scalar;

/// Maximum relative error between the analytic gradient of `build` at `x0`
/// and central finite differences with step `h`.
///
/// `build` must construct a scalar-valued graph from the given input tensor.
pub fn finite_diff_check<S, F>(build: F, x0: &RawTensor<S>, h: S) -> TensorResult<S>
where
    S: Scalar,
    F: Fn(&Tape<S>, &Tensor<S>) -> TensorResult<Tensor<S>>,
{
    let analytic = {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let loss = build(&tape, &x)?;
        let grads = tape.backward(&loss)?;
        grads
            .wrt(&x)
            .cloned()
            .unwrap_or_else(|| RawTensor::zeros(x0.shape()))
    };

    let eval = |probe: &RawTensor<S>| -> TensorResult<S> {
        let tape = Tape::new();
        let x = tape.leaf(probe.clone(), false);
        Ok(build(&tape, &x)?.item())
    };

    let mut max_rel = S::zero();
    let mut probe = x0.clone();
    for i in 0..x0.numel() {
        let orig = x0.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (plus - minus) / (h + h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / S::one().max(a.abs()).max(numeric.abs());
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
