use rayon::prelude::*;

use super::{Bound, NumericsError, ParamStore, Tape, Var};

/// Denominator floor for relative errors so that gradients that are zero in
/// both routes compare as equal instead of dividing noise by noise.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat indices whose relative error exceeded the tolerance.
    pub flagged: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.flagged.is_empty())
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences `(f(θ+h) - f(θ-h)) / 2h`, entry by entry, for every
/// parameter selected by `include`.
pub fn check_gradients<F>(
    f: F,
    params: &ParamStore,
    include: impl Fn(&str) -> bool,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var, NumericsError> + Sync,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, &include);
    let loss = f(&mut tape, &bound)?;
    let grads = tape.backward(loss)?;
    let analytic = bound.collect_grads(&tape, &grads);

    let eval = |store: &ParamStore| -> Result<f64, NumericsError> {
        let mut t = Tape::new();
        let b = store.bind(&mut t, |_| false);
        let l = f(&mut t, &b)?;
        let v = t.value(l);
        if v.numel() != 1 {
            return Err(NumericsError::NotScalar(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };

    let mut out = Vec::new();
    for (pi, (name, tensor)) in params.iter().enumerate() {
        if !include(name) {
            continue;
        }
        let numeric: Vec<f64> = (0..tensor.numel())
            .into_par_iter()
            .map(|j| {
                let mut plus = params.clone();
                plus.get_mut(name)?.data_mut()[j] += h;
                let mut minus = params.clone();
                minus.get_mut(name)?.data_mut()[j] -= h;
                Ok((eval(&plus)? - eval(&minus)?) / (2.0 * h))
            })
            .collect::<Result<_, NumericsError>>()?;
        let mut check = ParamCheck {
            name: name.to_string(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            flagged: vec![],
        };
        for (j, (&a, &n)) in analytic[pi].iter().zip(&numeric).enumerate() {
            let rel = relative_error(a, n);
            check.max_rel_error = check.max_rel_error.max(rel);
            check.max_abs_error = check.max_abs_error.max((a - n).abs());
            if rel > tol {
                check.flagged.push(j);
            }
        }
        out.push(check);
    }
    Ok(GradCheckReport { tol, params: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn store(x: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::row_vector(x));
        s
    }

    #[test]
    fn quadratic_matches() {
        let s = store(vec![1.0, 2.0]);
        let report = check_gradients(
            |t, b| {
                let x = b.var("x")?;
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &s,
            |_| true,
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let s = store(vec![0.3, -0.7]);
        let mut tape = Tape::new();
        let b = s.bind(&mut tape, |_| true);
        let c = tape.constant(Tensor::full(&[1], 4.0));
        let x = b.var("x").unwrap();
        let zero = tape.scale(x, 0.0);
        let zs = tape.sum(zero);
        let y = tape.add(zs, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(x).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_scalar_function_is_an_error() {
        let s = store(vec![1.0, 2.0]);
        let r = check_gradients(|_, b| b.var("x"), &s, |_| true, 1e-5, 1e-6);
        assert!(matches!(r, Err(NumericsError::NotScalar(_))));
    }
}
