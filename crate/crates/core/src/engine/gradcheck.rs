//! Finite-difference verification of tape gradients.

use super::{EngineError, ParamSet, Tape, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Max over all checked elements of `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`.
    pub max_rel_error: f64,
    /// Parameter holding the worst element.
    pub worst_param: Option<String>,
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central finite differences at the current parameter values.
///
/// `f` must be deterministic; dropout has to be disabled or seeded inside it.
pub fn gradient_check<F>(params: &mut ParamSet, f: F) -> Result<GradCheck, EngineError>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var, EngineError>,
{
    gradient_check_strided(params, 1, f)
}

/// Like [`gradient_check`] but probes only every `stride`-th element of each
/// parameter (the first element is always probed).
pub fn gradient_check_strided<F>(params: &mut ParamSet, stride: usize, f: F) -> Result<GradCheck, EngineError>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var, EngineError>,
{
    let stride = stride.max(1);
    params.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    tape.backward(loss, params);
    let analytic: Vec<Vec<f64>> = params.iter().map(|(_, p)| p.grad.data().to_vec()).collect();
    params.zero_grad();
    for (g, (_, p)) in analytic.iter().zip(params.iter()) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(EngineError::NonFiniteGradient(p.name.clone()));
        }
    }

    let eval = |params: &ParamSet| -> Result<f64, EngineError> {
        let mut t = Tape::new();
        let l = f(&mut t, params)?;
        Ok(t.value(l).item())
    };

    let mut report = GradCheck { max_rel_error: 0.0, worst_param: None, checked: 0 };
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for (pi, id) in ids.into_iter().enumerate() {
        let n = params.get(id).value.len();
        for j in (0..n).step_by(stride) {
            let orig = params.get(id).value.data()[j];
            params.get_mut(id).value.data_mut()[j] = orig + FD_STEP;
            let plus = eval(params)?;
            params.get_mut(id).value.data_mut()[j] = orig - FD_STEP;
            let minus = eval(params)?;
            params.get_mut(id).value.data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let ad = analytic[pi][j];
            let err = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst_param = Some(params.get(id).name.clone());
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tensor;

    #[test]
    fn constant_function_has_zero_error() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::row(vec![0.3, -0.2]));
        let r = gradient_check(&mut ps, |t, _| Ok(t.constant(Tensor::scalar(4.0)))).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }
}
