//! Bounded control functions and the controller state dynamics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ControllerParams, Microgrid};

/// Integral-path voltage reference `V* + Δ1 tanh(v / Δ1)`.
#[inline]
pub fn omega1(v: f64, p: &ControllerParams) -> f64 {
    if p.delta1 == 0.0 {
        return p.v_star;
    }
    p.v_star + p.delta1 * (v / p.delta1).tanh()
}

#[inline]
pub fn omega1_prime(v: f64, p: &ControllerParams) -> f64 {
    if p.delta1 == 0.0 {
        return 0.0;
    }
    sech2(v / p.delta1)
}

/// Proportional-path correction `Δ2 tanh(k_p (I / I_rated - λ))`.
#[inline]
pub fn omega2(lambda: f64, i_g: f64, inv_rated: f64, p: &ControllerParams) -> f64 {
    p.delta2 * (p.settings.k_p * (inv_rated * i_g - lambda)).tanh()
}

/// Partial derivative of [`omega2`] with respect to `Λ I - λ`.
#[inline]
pub fn omega2_prime(lambda: f64, i_g: f64, inv_rated: f64, p: &ControllerParams) -> f64 {
    let kp = p.settings.k_p;
    p.delta2 * kp * sech2(kp * (inv_rated * i_g - lambda))
}

/// Per-unit current set-point `K_I + Δ_I tanh(λ / Δ_I)`.
#[inline]
pub fn sigma(lambda: f64, p: &ControllerParams) -> f64 {
    if p.delta_i == 0.0 {
        return p.k_i;
    }
    p.k_i + p.delta_i * (lambda / p.delta_i).tanh()
}

#[inline]
pub fn sigma_prime(lambda: f64, p: &ControllerParams) -> f64 {
    if p.delta_i == 0.0 {
        return 0.0;
    }
    sech2(lambda / p.delta_i)
}

/// Anti-windup leakage coefficient, close to zero inside `(v_neg, v_pos)` and
/// close to `alpha` outside.
#[inline]
pub fn rho(v: f64, p: &ControllerParams) -> f64 {
    let b = p.settings.b;
    p.settings.alpha * (1.0 + 0.5 * ((b * (v - p.v_pos)).tanh() - (b * (v - p.v_neg)).tanh()))
}

#[inline]
pub fn rho_prime(v: f64, p: &ControllerParams) -> f64 {
    let b = p.settings.b;
    0.5 * p.settings.alpha * b * (sech2(b * (v - p.v_pos)) - sech2(b * (v - p.v_neg)))
}

/// Total leakage acting on `v`: `ρ(v) v + B_v v`.
#[inline]
pub fn leak(v: f64, p: &ControllerParams) -> f64 {
    (rho(v, p) + p.settings.b_v) * v
}

#[inline]
pub fn leak_prime(v: f64, p: &ControllerParams) -> f64 {
    rho_prime(v, p) * v + rho(v, p) + p.settings.b_v
}

/// `sech²(x)`, computed without overflow for large `|x|`.
#[inline]
pub(crate) fn sech2(x: f64) -> f64 {
    let t = x.tanh();
    if x.abs() < 1.0 {
        1.0 - t * t
    } else {
        // 1 - tanh² loses everything once tanh rounds to 1.
        let e = (-2.0 * x.abs()).exp();
        4.0 * e / ((1.0 + e) * (1.0 + e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub v: Vec<f64>,
    pub lambda: Vec<f64>,
    pub zeta: Vec<f64>,
}

impl ControllerState {
    pub fn zeros(n_g: usize) -> Self {
        Self {
            v: vec![0.0; n_g],
            lambda: vec![0.0; n_g],
            zeta: vec![0.0; n_g],
        }
    }

    pub fn n_g(&self) -> usize {
        self.v.len()
    }
}

/// Slice form of the controller dynamics. Offline generators keep their
/// states frozen.
#[allow(clippy::too_many_arguments)]
pub(crate) fn controller_rhs_into(
    v: &[f64],
    lambda: &[f64],
    zeta: &[f64],
    i_g: &[f64],
    grid: &Microgrid,
    dv: &mut [f64],
    dlambda: &mut [f64],
    dzeta: &mut [f64],
) {
    let p = &grid.controller;
    let s = &p.settings;
    let n = v.len();
    let lap = grid.laplacian_flat();
    let inv_rated = grid.inv_rated();
    let online = grid.online();
    for i in 0..n {
        if !online[i] {
            dv[i] = 0.0;
            dlambda[i] = 0.0;
            dzeta[i] = 0.0;
            continue;
        }
        let row = &lap[i * n..(i + 1) * n];
        let mut l_lambda = 0.0;
        let mut l_zeta = 0.0;
        for j in 0..n {
            l_lambda += row[j] * lambda[j];
            l_zeta += row[j] * zeta[j];
        }
        let sig = sigma(lambda[i], p);
        let share = inv_rated[i] * i_g[i];
        dv[i] = (-leak(v[i], p) + s.k_v * (sig - share)) / s.tau;
        dlambda[i] = (share - sig - l_zeta - s.k * l_lambda) / s.tau_p;
        dzeta[i] = (l_lambda - s.b_zeta * zeta[i]) / s.tau_d;
    }
}

/// Time derivative of the controller states for given generator currents.
pub fn controller_rhs(
    state: &ControllerState,
    i_g: &[f64],
    grid: &Microgrid,
) -> Result<ControllerState> {
    let n = grid.n_g();
    for (what, len) in [
        ("controller state v", state.v.len()),
        ("controller state lambda", state.lambda.len()),
        ("controller state zeta", state.zeta.len()),
        ("generator currents", i_g.len()),
    ] {
        if len != n {
            return Err(Error::Dimension {
                what,
                expected: n,
                got: len,
            });
        }
    }
    let mut out = ControllerState::zeros(n);
    controller_rhs_into(
        &state.v,
        &state.lambda,
        &state.zeta,
        i_g,
        grid,
        &mut out.v,
        &mut out.lambda,
        &mut out.zeta,
    );
    Ok(out)
}
