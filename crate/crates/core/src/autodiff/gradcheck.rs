//! Central finite-difference oracle for reverse-mode gradients.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::Result;

/// A collection of named tensors that can be perturbed coordinate-wise.
pub trait Parameters: Clone {
    /// Names of the coordinates to check, in a deterministic order.
    fn checked_names(&self) -> Vec<String>;
    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor>;
}

impl Parameters for BTreeMap<String, Tensor> {
    fn checked_names(&self) -> Vec<String> {
        self.keys().cloned().collect()
    }

    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.get_mut(name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// `max |analytic - fd| / max(1, |analytic|)` over every coordinate.
    pub max_rel_error: f64,
    /// Coordinate attaining the maximum.
    pub worst: Option<(String, usize)>,
    /// Coordinates where the perturbed function was not finite.
    pub non_finite: Vec<(String, usize)>,
    pub coordinates: usize,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.non_finite.is_empty() && self.max_rel_error < tol
    }
}

/// Compares `analytic` against central differences of `f` with step `h`.
///
/// Parameters without an analytic entry are treated as having zero gradient.
pub fn finite_difference_check<P, F>(
    mut f: F,
    params: &P,
    analytic: &BTreeMap<String, Tensor>,
    h: f64,
) -> Result<FdReport>
where
    P: Parameters,
    F: FnMut(&P) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(crate::error::invalid(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let mut work = params.clone();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        non_finite: vec![],
        coordinates: 0,
    };
    for name in params.checked_names() {
        let n = work
            .tensor_mut(&name)
            .map(|t| t.numel())
            .ok_or_else(|| crate::error::Error::UnknownParam(name.clone()))?;
        for i in 0..n {
            let orig = work.tensor_mut(&name).unwrap().data()[i];
            work.tensor_mut(&name).unwrap().data_mut()[i] = orig + h;
            let plus = f(&work)?;
            work.tensor_mut(&name).unwrap().data_mut()[i] = orig - h;
            let minus = f(&work)?;
            work.tensor_mut(&name).unwrap().data_mut()[i] = orig;
            report.coordinates += 1;

            if !plus.is_finite() || !minus.is_finite() {
                report.non_finite.push((name.clone(), i));
                continue;
            }
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic.get(&name).map_or(0.0, |t| t.data()[i]);
            let rel = (a - fd).abs() / a.abs().max(1.0);
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn quadratic_is_exact() {
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), Tensor::row(vec![0.3, -1.2, 2.0]));
        let a = [1.0, 2.0, 0.5];
        // f(x) = sum a_i x_i^2 + x_0 x_1
        let f = |p: &BTreeMap<String, Tensor>| -> Result<f64> {
            let x = p["x"].data();
            Ok(x.iter().zip(&a).map(|(v, c)| c * v * v).sum::<f64>() + x[0] * x[1])
        };
        let x = params["x"].data().to_vec();
        let mut g = BTreeMap::new();
        g.insert(
            "x".to_string(),
            Tensor::row(vec![2.0 * x[0] + x[1], 4.0 * x[1] + x[0], 1.0 * x[2]]),
        );
        let rep = finite_difference_check(f, &params, &g, 1e-5).unwrap();
        assert!(rep.max_rel_error < 1e-8, "{rep:?}");
        assert_eq!(rep.coordinates, 3);
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), Tensor::row(vec![1.0]));
        let f = |p: &BTreeMap<String, Tensor>| Ok(p["x"].data()[0].powi(2));
        let mut g = BTreeMap::new();
        g.insert("x".to_string(), Tensor::row(vec![3.0]));
        let rep = finite_difference_check(f, &params, &g, 1e-5).unwrap();
        assert!(rep.max_rel_error > 0.3);
        assert_eq!(rep.worst, Some(("x".to_string(), 0)));
    }

    #[test]
    fn reports_non_finite_coordinates() {
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), Tensor::row(vec![0.0, 1.0]));
        let f = |p: &BTreeMap<String, Tensor>| Ok(p["x"].data()[0].sqrt() + p["x"].data()[1]);
        let rep = finite_difference_check(f, &params, &BTreeMap::new(), 1e-5).unwrap();
        assert_eq!(rep.non_finite, vec![("x".to_string(), 0)]);
        assert!(!rep.passes(1e-4));
    }

    #[test]
    fn rejects_nonpositive_step() {
        let params: BTreeMap<String, Tensor> = BTreeMap::new();
        assert!(finite_difference_check(|_| Ok(0.0), &params, &BTreeMap::new(), 0.0).is_err());
    }

    #[test]
    fn tape_primitives_match_finite_differences() {
        let mut params = BTreeMap::new();
        params.insert(
            "w".to_string(),
            Tensor::new(
                vec![3, 4],
                (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect(),
            )
            .unwrap(),
        );
        params.insert("x".to_string(), Tensor::row(vec![0.4, -0.7, 1.1]));
        params.insert("b".to_string(), Tensor::row(vec![0.1, -0.2, 0.0, 0.3]));
        // A composite exercising most primitives.
        let build = |p: &BTreeMap<String, Tensor>, tape: &mut Tape| -> Result<_> {
            let w = tape.param("w", p["w"].clone(), true);
            let x = tape.param("x", p["x"].clone(), true);
            let b = tape.param("b", p["b"].clone(), true);
            let xw = tape.matmul(x, w)?;
            let z = tape.add(xw, b)?;
            let s = tape.sigmoid(z)?;
            let th = tape.tanh(z)?;
            let r = tape.relu(z)?;
            let m = tape.mul(s, th)?;
            let c = tape.concat(&[m, r])?;
            let ls = tape.log_softmax(c)?;
            let sm = tape.softmax(z)?;
            let pick = tape.slice(ls, 2, 3)?;
            let smp = tape.slice(sm, 1, 1)?;
            let a = tape.sum(pick)?;
            let bb = tape.mean(smp)?;
            let diff = tape.sub(a, bb)?;
            let n = tape.neg(diff)?;
            let out = tape.scale(n, 0.7)?;
            Ok(out)
        };
        let mut tape = Tape::new();
        let loss = build(&params, &mut tape).unwrap();
        let grads = tape.backward(loss).unwrap().into_params();
        let rep = finite_difference_check(
            |p| {
                let mut t = Tape::new();
                let l = build(p, &mut t)?;
                Ok(t.value(l).item())
            },
            &params,
            &grads,
            1e-5,
        )
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }
}
