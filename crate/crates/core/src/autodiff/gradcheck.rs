//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::tape::{register, Tape, Var};
use super::tensor::{ParameterStore, Tensor};
use crate::error::Result;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Probes closer than this to an activation kink are rejected.
pub const KINK_MARGIN: f64 = 10.0 * FD_STEP;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn inputs_store(point: &[Tensor]) -> ParameterStore {
    let mut s = ParameterStore::new();
    for (i, t) in point.iter().enumerate() {
        s.insert(format!("x{i:02}"), t.clone()).expect("unique names");
    }
    s
}

fn eval<F>(build: &F, store: &ParameterStore) -> Result<(Tape, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = register(&mut tape, store);
    let handles: Vec<Var> = store.names().map(|n| vars.get(n)).collect::<Result<_>>()?;
    let out = build(&mut tape, &handles)?;
    Ok((tape, out))
}

/// True when no kinked activation in the graph is evaluated within
/// [`KINK_MARGIN`] of its kink at `point`.
pub fn probe_is_smooth<F>(build: &F, point: &[Tensor]) -> Result<bool>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _) = eval(build, &inputs_store(point))?;
    Ok(tape.min_kink_distance() > KINK_MARGIN)
}

/// Compares the tape gradient of a scalar-valued `build` against central
/// differences at `point`. The relative error of each element uses the
/// denominator max(1, |analytic|, |numeric|).
pub fn grad_check<F>(op: &str, build: F, point: &[Tensor], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let store = inputs_store(point);
    let (tape, out) = eval(&build, &store)?;
    let analytic = tape.backward(out)?;

    let mut max_rel: f64 = 0.0;
    let mut probe = store.clone();
    let names: Vec<String> = store.names().cloned().collect();
    for name in &names {
        let base = store.get(name).expect("present");
        let zero = Tensor::zeros(base.shape());
        let g = analytic.get(name).unwrap_or(&zero);
        for k in 0..base.len() {
            let orig = base.data()[k];
            probe.get_mut(name).expect("present").data_mut()[k] = orig + FD_STEP;
            let (t_plus, o_plus) = eval(&build, &probe)?;
            probe.get_mut(name).expect("present").data_mut()[k] = orig - FD_STEP;
            let (t_minus, o_minus) = eval(&build, &probe)?;
            probe.get_mut(name).expect("present").data_mut()[k] = orig;

            let numeric = (t_plus.value(o_plus).item() - t_minus.value(o_minus).item()) / (2.0 * FD_STEP);
            let a = g.data()[k];
            let denom = 1f64.max(a.abs()).max(numeric.abs());
            let rel = (a - numeric).abs() / denom;
            if !rel.is_finite() {
                max_rel = f64::INFINITY;
            } else {
                max_rel = max_rel.max(rel);
            }
        }
    }
    Ok(GradCheckReport { op: op.to_string(), max_rel_error: max_rel, tolerance, pass: max_rel < tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_form_is_tight() {
        // f(x) = sum((A x) ⊙ (A x)); gradient 2 Aᵀ A x
        let mut rng = crate::seed::rng(&[1]);
        for _ in 0..5 {
            let a = random(&mut rng, 3, 4);
            let x = random(&mut rng, 4, 1);
            let report = grad_check(
                "quadratic",
                |t, v| {
                    let ax = t.matmul(v[0], v[1])?;
                    let sq = t.mul(ax, ax)?;
                    Ok(t.sum(sq))
                },
                &[a, x],
                1e-6,
            )
            .unwrap();
            assert!(report.pass, "{report:?}");
        }
    }

    #[test]
    fn leaky_relu_away_from_kink() {
        let build = |t: &mut Tape, v: &[Var]| {
            let y = t.leaky_relu(v[0], 0.2);
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        };
        let point = [Tensor::matrix(1, 4, vec![0.5, -0.3, 2.0, -1.5]).unwrap()];
        assert!(probe_is_smooth(&build, &point).unwrap());
        assert!(grad_check("leaky_relu", build, &point, 1e-6).unwrap().pass);
    }

    #[test]
    fn kink_probe_is_filtered() {
        let build = |t: &mut Tape, v: &[Var]| {
            let y = t.leaky_relu(v[0], 0.2);
            Ok(t.sum(y))
        };
        let at_kink = [Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap()];
        assert!(!probe_is_smooth(&build, &at_kink).unwrap());
        let near = [Tensor::matrix(1, 2, vec![5.0 * FD_STEP, 1.0]).unwrap()];
        assert!(!probe_is_smooth(&build, &near).unwrap());
    }

    #[test]
    fn wrong_gradient_is_caught() {
        struct Wrong;
        impl super::super::tape::CustomOp for Wrong {
            fn name(&self) -> &'static str {
                "wrong"
            }
            fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
                vec![Some(Tensor::scalar(3.0 * g.item()))]
            }
        }
        let report = grad_check(
            "wrong",
            |t, v| {
                let x = t.value(v[0]).item();
                Ok(t.custom(vec![v[0]], Tensor::scalar(x * x), Box::new(Wrong)))
            },
            &[Tensor::scalar(0.7)],
            1e-4,
        )
        .unwrap();
        assert!(!report.pass);
    }
}
