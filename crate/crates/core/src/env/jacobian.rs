use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Environment, SimState};
use crate::error::{Error, Result};

/// Linearisation of the Euler map `F(s) = s + dt·f(s)` around `s_star`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianTemplate {
    pub j: Array2<f64>,
    /// `|J − I|`, entry `(i, j)` is the influence of `s_j` on `s_i'`.
    pub a_gt: Array2<f64>,
    pub s_star: SimState,
    pub dt: f64,
}

impl JacobianTemplate {
    pub fn dim(&self) -> usize {
        self.j.nrows()
    }

    /// Number of non-zero off-diagonal entries of `A_GT`.
    pub fn num_edges(&self, tol: f64) -> usize {
        let d = self.dim();
        (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && self.a_gt[[i, j]] > tol)
            .count()
    }
}

/// Template for a continuous environment; errors for discrete ones.
pub fn jacobian_template(env: &dyn Environment, s_star: &SimState, dt: f64) -> Result<JacobianTemplate> {
    if env.vector_field(&s_star.values).is_none() {
        return Err(Error::config(format!(
            "environment '{}' has no continuous vector field",
            env.config().name()
        )));
    }
    if s_star.dim() != env.state_dim() {
        return Err(Error::input(format!(
            "reference state has dimension {}, expected {}",
            s_star.dim(),
            env.state_dim()
        )));
    }
    jacobian_from_fn(|s| env.vector_field(s).expect("checked above"), s_star, dt)
}

/// Central-difference Jacobian of `s + dt·f(s)` with step `1e-5·max(1, |s*|∞)`.
pub fn jacobian_from_fn<F>(f: F, s_star: &SimState, dt: f64) -> Result<JacobianTemplate>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::config(format!("dt must be positive, got {dt}")));
    }
    let d = s_star.dim();
    let base = f(&s_star.values);
    if !s_star.is_finite() || base.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("non-finite dynamics at the reference state"));
    }
    let inf_norm = s_star.values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let h = 1e-5 * inf_norm.max(1.0);
    let mut j = Array2::<f64>::eye(d);
    let mut s = s_star.values.clone();
    for col in 0..d {
        let orig = s[col];
        s[col] = orig + h;
        let plus = f(&s);
        s[col] = orig - h;
        let minus = f(&s);
        s[col] = orig;
        for row in 0..d {
            let g = (plus[row] - minus[row]) / (2.0 * h);
            if !g.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite derivative ∂f_{row}/∂s_{col} at the reference state"
                )));
            }
            j[[row, col]] += dt * g;
        }
    }
    let a_gt = (&j - &Array2::<f64>::eye(d)).mapv(f64::abs);
    Ok(JacobianTemplate {
        j,
        a_gt,
        s_star: s_star.clone(),
        dt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{OscillatorConfig, OscillatorEnv, PushingConfig, PushingEnv};

    #[test]
    fn oscillator_template() {
        let e = OscillatorEnv::new(OscillatorConfig::default()).unwrap();
        let t = jacobian_template(&e, &SimState::new(vec![0.3, -0.2], 0), 0.1).unwrap();
        let expected = [[0.0, 0.1], [0.1, 0.0]];
        for i in 0..2 {
            for k in 0..2 {
                assert!((t.a_gt[[i, k]] - expected[i][k]).abs() < 1e-9);
            }
        }
        // analytic J = I + dt·[[0,1],[-1,0]]
        let analytic = [[1.0, 0.1], [-0.1, 1.0]];
        for i in 0..2 {
            for k in 0..2 {
                assert!((t.j[[i, k]] - analytic[i][k]).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn zero_field_gives_identity() {
        let t = jacobian_from_fn(|s| vec![0.0; s.len()], &SimState::new(vec![1.0, 2.0, 3.0], 0), 0.1)
            .unwrap();
        assert_eq!(t.j, Array2::<f64>::eye(3));
        assert!(t.a_gt.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_finite_dynamics_is_numeric_error() {
        let err = jacobian_from_fn(|s| s.iter().map(|x| 1.0 / x).collect(), &SimState::new(vec![0.0], 0), 0.1)
            .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn discrete_environment_is_rejected() {
        let e = PushingEnv::new(PushingConfig::default()).unwrap();
        assert!(jacobian_template(&e, &e.initial_state(0), 0.1).is_err());
    }
}
