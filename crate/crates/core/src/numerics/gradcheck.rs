use super::{Graph, NumericsError, Tensor, Var};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences and returns the worst relative error over every
/// coordinate of every input:
/// `|analytic - numeric| / max(|analytic|, eps)`.
///
/// `build` records the function on a fresh graph, given one leaf per input.
/// Points at non-differentiable kinks must be filtered out by the caller.
pub fn grad_check<B>(build: B, inputs: &[Tensor<f64>], eps: f64) -> Result<f64, NumericsError>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    let eval = |points: &[Tensor<f64>]| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = points.iter().map(|p| g.constant(p.clone())).collect();
        let out = build(&mut g, &vars)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(NumericsError::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|p| g.param(p.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for idx in 0..inputs[k].len() {
            let orig = inputs[k].data()[idx];
            probe[k].data_mut()[idx] = orig + eps;
            let plus = eval(&probe)?;
            probe[k].data_mut()[idx] = orig - eps;
            let minus = eval(&probe)?;
            probe[k].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[idx];
            let err = (a - numeric).abs() / a.abs().max(eps);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
