use crate::error::{invalid, Error, Result};
use crate::numeric::{Graph, Tensor, Var};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Worst relative error over every element of every parameter.
    pub max_rel_error: f64,
    /// Worst relative error per parameter tensor, in input order.
    pub per_param: Vec<f64>,
}

/// Checks the reverse-mode gradient of a scalar function against central
/// differences.
///
/// `f` receives a fresh graph and one leaf per entry of `params`, and must
/// return a scalar var. The relative error of an element is
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(params: &[Tensor], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step <= 1e-3) {
        return invalid(format!("grad_check step must lie in (0, 1e-3], got {step}"));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    if !g.scalar(loss).is_finite() {
        return Err(Error::NonFinite("loss at the base point".into()));
    }
    let grads = g.backward(loss);

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|p| g.constant(p.clone())).collect();
        let l = f(&mut g, &vars)?;
        let v = g.scalar(l);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("loss while probing".into()))
        }
    };

    let mut probe = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(p.dims()));
        let mut worst: f64 = 0.0;
        for j in 0..p.len() {
            let orig = p.data()[j];
            probe[i].data_mut()[j] = orig + step;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
        per_param.push(worst);
    }
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheck {
        max_rel_error,
        per_param,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn target(n: usize) -> Tensor {
        Tensor::full(&[1, n], 0.0)
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::from_rows(&[[3.0]]);
        let check = grad_check(std::slice::from_ref(&x), 1e-4, |g, v| g.squared_error_mean(v[0], &target(1))).unwrap();
        assert!(check.max_rel_error < 1e-8, "{check:?}");

        let mut g = Graph::new();
        let v = g.param(x);
        let l = g.squared_error_mean(v, &target(1)).unwrap();
        assert_eq!(g.backward(l).get(v).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constant_function() {
        let x = Tensor::from_rows(&[[1.0, -2.0]]);
        let check = grad_check(&[x], 1e-5, |g, _| Ok(g.constant(Tensor::scalar(7.0)))).unwrap();
        assert_eq!(check.max_rel_error, 0.0);
    }

    #[test]
    fn step_out_of_range() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(std::slice::from_ref(&x), 0.0, |g, v| Ok(v[0]).map(|v| g.scale(v, 1.0))).is_err());
        assert!(grad_check(&[x], 1e-2, |g, v| Ok(g.scale(v[0], 1.0))).is_err());
    }

    #[test]
    fn every_graph_op_passes() {
        let a = Tensor::from_rows(&[[0.3, -1.2, 0.7, 0.1], [1.1, 0.4, -0.5, 0.9], [-0.2, 0.8, 0.6, -1.4]]);
        let b = Tensor::from_rows(&[[0.5, -0.3, 0.2, 0.9], [0.1, 0.7, -0.6, 0.4], [0.3, 0.2, 0.8, -0.1], [-0.7, 0.5, 0.1, 0.6]]);
        let gamma = Tensor::from_rows(&[[1.1, 0.9, 1.3, 0.7]]);
        let beta = Tensor::from_rows(&[[0.1, -0.2, 0.05, 0.3]]);
        let tgt = Tensor::from_rows(&[[5.0, -5.0, 5.0, -5.0], [-5.0, 5.0, -5.0, 5.0], [5.0, 5.0, -5.0, -5.0]]);
        let rep = Tensor::full(&[3, 4], 0.25);
        let check = grad_check(&[a, b, gamma, beta], 1e-5, |g, v| {
            let ln = g.layer_norm(v[0], v[2], v[3])?;
            let m = g.matmul(ln, v[1])?;
            let m = g.add_row(m, v[3])?;
            let t = g.transpose(m);
            let t = g.transpose(t);
            let s = g.softmax_rows(t);
            let left = g.slice_cols(s, 0, 2)?;
            let right = g.slice_cols(m, 2, 2)?;
            let cat = g.concat_cols(&[left, right])?;
            let act = g.gelu(cat);
            let act = g.add(act, m)?;
            let act = g.replace_rows(act, &rep, &[false, true, false])?;
            let l1 = g.weighted_abs_mean(act, &tgt, &[1.5, 0.5, 1.0])?;
            let n = g.row_l2_normalize(m);
            let l2 = g.squared_error_mean(n, &rep)?;
            let sc = g.scale(l2, 3.0);
            Ok(g.weighted_sum(&[(l1, 0.7), (sc, 1.3)]))
        })
        .unwrap();
        assert!(check.max_rel_error < 1e-7, "{check:?}");
    }
}
