//! Monotonicity certificate, Lyapunov monitors, linearization and
//! eigenvalue sweeps.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::omega1;
use crate::equilibrium::{solve_equilibrium, EquilibriumReport, QssSolver, EQUILIBRIUM_TOL};
use crate::error::{Error, Result};
use crate::grid::{ControllerSettings, Microgrid};
use crate::plant::{full_jacobian, StateLayout};

/// Real-part magnitude below which an eigenvalue counts as a zero mode.
pub const NEAR_ZERO: f64 = 1e-8;

/// Matrices of the slow/fast port-Hamiltonian-like decomposition.
#[derive(Debug, Clone)]
pub struct CompactForm {
    pub q_s: DMatrix<f64>,
    pub p_s: DMatrix<f64>,
    pub j_s: DMatrix<f64>,
    pub q_f: DMatrix<f64>,
    pub p_f: DMatrix<f64>,
    pub j_f: DMatrix<f64>,
}

impl CompactForm {
    pub fn new(grid: &Microgrid) -> Self {
        let n = grid.n_g();
        let (ne, nk) = (grid.n_e(), grid.n_k());
        let s = &grid.controller.settings;
        let e = &grid.electrical;
        let lap = grid.laplacian();

        let mut q_s = DMatrix::zeros(2 * n, 2 * n);
        let mut p_s = DMatrix::zeros(2 * n, 2 * n);
        let mut j_s = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            q_s[(i, i)] = s.tau_p;
            q_s[(n + i, n + i)] = s.tau_d;
            p_s[(n + i, n + i)] = s.b_zeta;
            for j in 0..n {
                p_s[(i, j)] = s.k * lap[(i, j)];
                j_s[(i, n + j)] = -lap[(i, j)];
                j_s[(n + i, j)] = lap[(i, j)];
            }
        }

        let nf = n + ne + nk;
        let diag = |v: Vec<f64>| DMatrix::from_diagonal(&DVector::from_vec(v));
        let q_f = diag(e.l_g.iter().chain(&e.l_e).chain(&e.c_n).copied().collect());
        let p_f = diag(
            e.r_g
                .iter()
                .chain(&e.r_e)
                .chain(&e.g_cte)
                .copied()
                .collect(),
        );
        let mut j_f = DMatrix::zeros(nf, nf);
        let bg = grid.topology.beta_g();
        let be = grid.topology.beta_e();
        for k in 0..nk {
            for i in 0..n {
                j_f[(i, n + ne + k)] = -bg[(i, k)];
                j_f[(n + ne + k, i)] = bg[(i, k)];
            }
            for j in 0..ne {
                j_f[(n + j, n + ne + k)] = -be[(j, k)];
                j_f[(n + ne + k, n + j)] = be[(j, k)];
            }
        }
        Self {
            q_s,
            p_s,
            j_s,
            q_f,
            p_f,
            j_f,
        }
    }
}

/// `W_s = ½ (x - x̄)ᵀ blockdiag(τ_p, τ_d) (x - x̄)` over `x = (λ, ζ)`.
pub fn lyapunov_slow(
    lambda: &[f64],
    zeta: &[f64],
    lambda_bar: &[f64],
    zeta_bar: &[f64],
    s: &ControllerSettings,
) -> f64 {
    let a: f64 = lambda
        .iter()
        .zip(lambda_bar)
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    let b: f64 = zeta
        .iter()
        .zip(zeta_bar)
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    0.5 * (s.tau_p * a + s.tau_d * b)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance
/// `tol`.
pub fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = simpson(fa, fm, fb, a, b);
    recurse(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Fast Lyapunov function.
///
/// `y_tilde` is the deviation of the fast states `(I_g, I_e, V_n, v)` from
/// their quasi-steady values at the slow state `x̄ + x̃`; `x_tilde` and
/// `x_bar` are `(λ, ζ)` vectors. The quadratic term measures the electrical
/// deviation from the equilibrium fast state; the integral term weighs the
/// integrator deviation through `ω1`.
pub fn lyapunov_fast(
    y_tilde: &[f64],
    x_tilde: &[f64],
    x_bar: &[f64],
    grid: &Microgrid,
) -> Result<f64> {
    let ly = StateLayout::of(grid);
    let n = ly.n_g;
    let nf = n + ly.n_e + ly.n_k;
    if y_tilde.len() != nf + n {
        return Err(Error::Dimension {
            what: "fast deviation",
            expected: nf + n,
            got: y_tilde.len(),
        });
    }
    if x_tilde.len() != 2 * n || x_bar.len() != 2 * n {
        return Err(Error::Dimension {
            what: "slow state",
            expected: 2 * n,
            got: x_tilde.len().min(x_bar.len()),
        });
    }
    let solver = QssSolver::new(grid)?;
    let lam: Vec<f64> = (0..n).map(|i| x_bar[i] + x_tilde[i]).collect();
    let q_now = solver.solve(&lam, None)?;
    let q_bar = solver.solve(&x_bar[..n], Some(&q_now))?;
    let h_now: Vec<f64> = q_now
        .h1
        .iter()
        .chain(&q_now.h2)
        .chain(&q_now.h3)
        .copied()
        .collect();
    let h_bar: Vec<f64> = q_bar
        .h1
        .iter()
        .chain(&q_bar.h2)
        .chain(&q_bar.h3)
        .copied()
        .collect();
    let e = &grid.electrical;
    let q_f: Vec<f64> = e.l_g.iter().chain(&e.l_e).chain(&e.c_n).copied().collect();
    let mut quad = 0.0;
    for k in 0..nf {
        let dev = y_tilde[k] + h_now[k] - h_bar[k];
        quad += q_f[k] * dev * dev;
    }
    quad *= 0.5;

    let p = &grid.controller;
    let s = &p.settings;
    let mut integral = 0.0;
    for i in 0..n {
        let shift = q_now.h4[i];
        let base = omega1(q_bar.h4[i], p);
        let weight = s.tau * e.i_rated[i] / s.k_v;
        let f = |eta: f64| omega1(eta + shift, p) - base;
        integral += weight * adaptive_simpson(&f, 0.0, y_tilde[nf + i], 1e-10);
    }
    Ok(quad + integral)
}

/// `M(λ) = σ(λ) - Λ h¹(λ)`.
pub fn compute_m(lambda: &[f64], grid: &Microgrid) -> Result<Vec<f64>> {
    Ok(QssSolver::new(grid)?.mismatch(lambda, None)?.0)
}

/// Symmetric part of the central-difference Jacobian of `M` at `λ`. Step
/// `j` is `step_scale (1 + |λ_j|)`.
pub fn jacobian_m_sym(solver: &QssSolver, lambda: &[f64], step_scale: f64) -> Result<DMatrix<f64>> {
    if !(step_scale > 0.0) {
        return Err(Error::param("step", "must be positive"));
    }
    let n = lambda.len();
    let (_, center) = solver.mismatch(lambda, None)?;
    let mut jm = DMatrix::zeros(n, n);
    let mut lp = lambda.to_vec();
    for j in 0..n {
        let h = step_scale * (1.0 + lambda[j].abs());
        lp[j] = lambda[j] + h;
        let (mp, _) = solver.mismatch(&lp, Some(&center))?;
        lp[j] = lambda[j] - h;
        let (mm, _) = solver.mismatch(&lp, Some(&center))?;
        lp[j] = lambda[j];
        for i in 0..n {
            jm[(i, j)] = (mp[i] - mm[i]) / (2.0 * h);
        }
    }
    Ok((&jm + jm.transpose()) * 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateSpec {
    /// Points on the consensus line `λ = s 1`.
    pub n_diag: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Uniform random samples in the box `[lambda_min, lambda_max]^n`.
    pub n_random: usize,
    /// Pass requires every sampled minimum eigenvalue to exceed this.
    pub margin: f64,
    pub step: f64,
}

impl Default for CertificateSpec {
    fn default() -> Self {
        Self {
            n_diag: 41,
            lambda_min: -1.0,
            lambda_max: 1.0,
            n_random: 20,
            margin: 0.0,
            step: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateSample {
    pub lambda: Vec<f64>,
    pub min_eig: Option<f64>,
    /// `Σ_{j≠i} |m_ij| < m_ii` for every row.
    pub diag_dominant: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub samples: Vec<CertificateSample>,
    pub pass: bool,
    /// Smallest eigenvalue over all successful samples.
    pub min_eig: f64,
    pub failed_samples: usize,
    pub solver_errors: usize,
    pub margin: f64,
    pub seed: u64,
    pub alpha: f64,
    pub i_rated: Vec<f64>,
    pub g_cte: Vec<f64>,
}

/// Samples the symmetric Jacobian of `M` on the consensus line and at
/// seeded random points.
pub fn certify_monotonicity(
    grid: &Microgrid,
    spec: &CertificateSpec,
    seed: u64,
) -> Result<CertificateReport> {
    if spec.n_diag + spec.n_random == 0 {
        return Err(Error::param(
            "certificate grid",
            "needs at least one sample",
        ));
    }
    if !(spec.lambda_max > spec.lambda_min) {
        return Err(Error::param(
            "certificate grid",
            "lambda_max must exceed lambda_min",
        ));
    }
    let n = grid.n_g();
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(spec.n_diag + spec.n_random);
    for k in 0..spec.n_diag {
        let s = if spec.n_diag == 1 {
            0.5 * (spec.lambda_min + spec.lambda_max)
        } else {
            spec.lambda_min
                + (spec.lambda_max - spec.lambda_min) * k as f64 / (spec.n_diag - 1) as f64
        };
        points.push(vec![s; n]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..spec.n_random {
        points.push(
            (0..n)
                .map(|_| rng.random_range(spec.lambda_min..spec.lambda_max))
                .collect(),
        );
    }

    let solver = QssSolver::new(grid)?;
    let samples: Vec<CertificateSample> = points
        .into_par_iter()
        .map(|lambda| match jacobian_m_sym(&solver, &lambda, spec.step) {
            Ok(m) => {
                let min_eig = SymmetricEigen::new(m.clone())
                    .eigenvalues
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min);
                let dd = (0..n).all(|i| {
                    let off: f64 = (0..n).filter(|&j| j != i).map(|j| m[(i, j)].abs()).sum();
                    off < m[(i, i)]
                });
                CertificateSample {
                    lambda,
                    min_eig: Some(min_eig),
                    diag_dominant: Some(dd),
                    error: None,
                }
            }
            Err(e) => CertificateSample {
                lambda,
                min_eig: None,
                diag_dominant: None,
                error: Some(e.to_string()),
            },
        })
        .collect();

    let solver_errors = samples.iter().filter(|s| s.error.is_some()).count();
    let failed_samples = samples
        .iter()
        .filter(|s| s.min_eig.is_none_or(|m| !(m > spec.margin)))
        .count();
    let min_eig = samples
        .iter()
        .filter_map(|s| s.min_eig)
        .fold(f64::INFINITY, f64::min);
    Ok(CertificateReport {
        pass: failed_samples == 0,
        samples,
        min_eig,
        failed_samples,
        solver_errors,
        margin: spec.margin,
        seed,
        alpha: grid.controller.settings.alpha,
        i_rated: grid.electrical.i_rated.clone(),
        g_cte: grid.electrical.g_cte.clone(),
    })
}

/// A complex eigenvalue as `(re, im)`.
pub type Eig = (f64, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearizationReport {
    pub equilibrium: EquilibriumReport,
    pub state_labels: Vec<String>,
    /// Row-major Jacobian of the closed loop at the equilibrium.
    pub jacobian: Vec<Vec<f64>>,
    /// Sorted by real part, then imaginary part.
    pub eigenvalues: Vec<Eig>,
    /// Largest `‖A q - μ q‖ / ‖A‖` over the computed pairs.
    pub max_pair_residual: f64,
    pub max_real: f64,
    /// Eigenvalues with `|Re| < 1e-8`.
    pub near_zero: usize,
}

fn sort_eigs(e: &mut [Eig]) {
    e.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
}

/// Eigenvalues of a real square matrix.
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Eig>> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::Eigen("matrix has non-finite entries".into()));
    }
    let ev = a.clone().complex_eigenvalues();
    let mut out: Vec<Eig> = ev.iter().map(|c| (c.re, c.im)).collect();
    if out.iter().any(|(r, i)| !r.is_finite() || !i.is_finite()) {
        return Err(Error::Eigen("eigenvalue iteration did not converge".into()));
    }
    sort_eigs(&mut out);
    Ok(out)
}

/// Relative residual `‖A q - μ q‖ / ‖A‖` of an eigenvector from shifted
/// inverse iteration.
pub fn eigenpair_residual(a: &DMatrix<f64>, mu: Eig) -> f64 {
    let n = a.nrows();
    let norm_a = a.norm().max(f64::MIN_POSITIVE);
    let ac: DMatrix<Complex<f64>> = a.map(|x| Complex::new(x, 0.0));
    let mu_c = Complex::new(mu.0, mu.1);
    let mut best = f64::INFINITY;
    for shift in [1e-10, 1e-8, 1e-6] {
        let sigma = mu_c + Complex::new(shift * norm_a, 0.5 * shift * norm_a);
        let b = &ac - DMatrix::<Complex<f64>>::identity(n, n) * sigma;
        let lu = b.lu();
        let mut q =
            DVector::<Complex<f64>>::from_fn(n, |i, _| Complex::new(1.0 + 0.1 * i as f64, 0.3));
        let mut ok = true;
        for _ in 0..3 {
            match lu.solve(&q) {
                Some(next) => {
                    let nn = next.norm();
                    if !(nn.is_finite() && nn > 0.0) {
                        ok = false;
                        break;
                    }
                    q = next.unscale(nn);
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let r = (&ac * &q - q.scale(1.0).map(|c| c * mu_c)).norm() / norm_a;
        best = best.min(r);
        if best <= 1e-6 {
            break;
        }
    }
    best
}

/// Jacobian and spectrum of the closed loop at an equilibrium.
pub fn linearize(grid: &Microgrid, equilibrium: &EquilibriumReport) -> Result<LinearizationReport> {
    if !(equilibrium.residual < EQUILIBRIUM_TOL) {
        return Err(Error::param(
            "equilibrium",
            format!(
                "residual {:e} is not below {EQUILIBRIUM_TOL:e}",
                equilibrium.residual
            ),
        ));
    }
    let x = equilibrium.state.to_vec();
    let a = full_jacobian(&x, grid, true);
    let eigs = eigenvalues(&a)?;
    let max_pair_residual = eigs
        .par_iter()
        .map(|&mu| eigenpair_residual(&a, mu))
        .reduce(|| 0.0, f64::max);
    if !(max_pair_residual <= 1e-6) {
        return Err(Error::Eigen(format!(
            "eigenpair residual {max_pair_residual:e} exceeds 1e-6"
        )));
    }
    let max_real = eigs.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max);
    let near_zero = eigs.iter().filter(|e| e.0.abs() < NEAR_ZERO).count();
    let jacobian = (0..a.nrows())
        .map(|i| a.row(i).iter().copied().collect())
        .collect();
    Ok(LinearizationReport {
        equilibrium: equilibrium.clone(),
        state_labels: StateLayout::of(grid).labels(),
        jacobian,
        eigenvalues: eigs,
        max_pair_residual,
        max_real,
        near_zero,
    })
}

/// `n` logarithmically spaced values from `lo` to `hi` inclusive.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|k| {
            if k == 0 {
                lo
            } else if k == n - 1 {
                hi
            } else {
                10f64.powf(a + (b - a) * k as f64 / (n - 1) as f64)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Controller parameters set to each value (e.g. `["tau_p", "tau_d"]`).
    pub targets: Vec<String>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub value: f64,
    pub eigenvalues: Option<Vec<Eig>>,
    pub max_real: Option<f64>,
    pub near_zero: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub targets: Vec<String>,
    pub records: Vec<SweepRecord>,
}

impl SweepReport {
    /// Largest eigenvalue displacement between any successful point and the
    /// first successful one.
    pub fn max_drift(&self) -> Option<f64> {
        let mut ok = self.records.iter().filter_map(|r| r.eigenvalues.as_ref());
        let base = ok.next()?;
        Some(ok.map(|e| spectrum_distance(base, e)).fold(0.0, f64::max))
    }
}

/// Symmetric nearest-match distance between two spectra.
pub fn spectrum_distance(a: &[Eig], b: &[Eig]) -> f64 {
    let one_way = |x: &[Eig], y: &[Eig]| {
        x.iter()
            .map(|p| {
                y.iter()
                    .map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    one_way(a, b).max(one_way(b, a))
}

fn sweep_point(grid: &Microgrid, targets: &[String], value: f64) -> Result<LinearizationReport> {
    let mut s = grid.controller.settings.clone();
    for t in targets {
        s.set(t, value)?;
    }
    let g = grid.with_settings(&s)?;
    let eq = solve_equilibrium(&g)?;
    linearize(&g, &eq)
}

/// Re-solves and linearizes at every value; failures are recorded per point.
/// Results keep the order of `spec.values`.
pub fn sweep_eigs(grid: &Microgrid, spec: &SweepSpec) -> Result<SweepReport> {
    if spec.targets.is_empty() {
        return Err(Error::param(
            "sweep targets",
            "at least one parameter required",
        ));
    }
    // Reject unknown names before fanning out.
    for t in &spec.targets {
        grid.controller.settings.get(t)?;
    }
    let mut records: Vec<SweepRecord> = spec
        .values
        .par_iter()
        .map(|&value| match sweep_point(grid, &spec.targets, value) {
            Ok(rep) => SweepRecord {
                value,
                max_real: Some(rep.max_real),
                near_zero: Some(rep.near_zero),
                eigenvalues: Some(rep.eigenvalues),
                error: None,
            },
            Err(e) => SweepRecord {
                value,
                eigenvalues: None,
                max_real: None,
                near_zero: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    // Stable, so repeated values keep their input order.
    records.sort_by(|a, b| a.value.total_cmp(&b.value));
    Ok(SweepReport {
        targets: spec.targets.clone(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use rand::Rng;

    #[test]
    fn compact_form_structure() {
        let grid = presets::cs2().microgrid().unwrap();
        let cf = CompactForm::new(&grid);
        assert!((&cf.j_s + cf.j_s.transpose()).amax() == 0.0);
        assert!((&cf.j_f + cf.j_f.transpose()).amax() == 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let xs = DVector::from_fn(8, |_, _| rng.random_range(-5.0..5.0));
            let xf = DVector::from_fn(13, |_, _| rng.random_range(-5.0..5.0));
            assert!((xs.transpose() * &cf.j_s * &xs)[0].abs() < 1e-12);
            assert!((xf.transpose() * &cf.j_f * &xf)[0].abs() < 1e-12);
        }
        for m in [&cf.q_s, &cf.p_s, &cf.q_f, &cf.p_f] {
            let min = SymmetricEigen::new(m.clone()).eigenvalues.min();
            assert!(min > -1e-12);
        }
        // kL leaves the consensus direction undamped; the electrical losses don't.
        assert!(SymmetricEigen::new(cf.p_s.clone()).eigenvalues.min().abs() < 1e-12);
        assert!(SymmetricEigen::new(cf.p_f.clone()).eigenvalues.min() > 0.0);
    }

    #[test]
    fn slow_lyapunov_values() {
        let s = ControllerSettings::default();
        let z = [0.0; 4];
        assert_eq!(lyapunov_slow(&z, &z, &z, &z, &s), 0.0);
        assert_eq!(lyapunov_slow(&[1.0, 0.0, 0.0, 0.0], &z, &z, &z, &s), 5.0);
        let x = [0.1, -0.2, 0.3, 0.05];
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let w1 = lyapunov_slow(&x, &x, &z, &z, &s);
        let w2 = lyapunov_slow(&x2, &x2, &z, &z, &s);
        assert!((w2 - 4.0 * w1).abs() < 1e-14);
    }

    #[test]
    fn simpson_against_closed_form() {
        // ∫ tanh over [0, y] is ln cosh y.
        for y in [-3.0, -0.5, 0.1, 2.0, 7.0] {
            let q = adaptive_simpson(&|x: f64| x.tanh(), 0.0, y, 1e-12);
            assert!((q - f64::cosh(y).ln()).abs() < 1e-10, "{y}");
        }
    }

    #[test]
    fn fast_lyapunov_integral_closed_form() {
        let grid = presets::cs2().microgrid().unwrap();
        let eq = solve_equilibrium(&grid).unwrap();
        let x_bar: Vec<f64> = eq
            .state
            .ctrl
            .lambda
            .iter()
            .chain(&eq.state.ctrl.zeta)
            .copied()
            .collect();
        let n = 4;
        let nf = 13;
        let p = &grid.controller;
        let s = &p.settings;
        let mut y = vec![0.0; nf + n];
        y[nf] = 0.3;
        y[nf + 2] = -4.0;
        let vf = lyapunov_fast(&y, &[0.0; 8], &x_bar, &grid).unwrap();
        let mut expected = 0.0;
        for i in 0..n {
            let c = eq.state.ctrl.v[i];
            let d1 = p.delta1;
            // Antiderivative of V* + Δ1 tanh((η + c)/Δ1) - ω1(c).
            let val = d1 * d1 * (((y[nf + i] + c) / d1).cosh().ln() - (c / d1).cosh().ln())
                + (p.v_star - omega1(c, p)) * y[nf + i];
            expected += s.tau * grid.electrical.i_rated[i] / s.k_v * val;
        }
        assert!((vf - expected).abs() < 1e-8, "{vf} vs {expected}");
    }

    #[test]
    fn fast_lyapunov_positive() {
        let grid = presets::cs2().microgrid().unwrap();
        let eq = solve_equilibrium(&grid).unwrap();
        let x_bar: Vec<f64> = eq
            .state
            .ctrl
            .lambda
            .iter()
            .chain(&eq.state.ctrl.zeta)
            .copied()
            .collect();
        assert!(
            lyapunov_fast(&[0.0; 17], &[0.0; 8], &x_bar, &grid)
                .unwrap()
                .abs()
                < 1e-14
        );
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let y: Vec<f64> = (0..17).map(|_| rng.random_range(-2.0..2.0)).collect();
            assert!(lyapunov_fast(&y, &[0.0; 8], &x_bar, &grid).unwrap() > 0.0);
        }
    }

    #[test]
    fn mismatch_at_equilibrium_is_leakage() {
        let grid = presets::cs2().microgrid().unwrap();
        let eq = solve_equilibrium(&grid).unwrap();
        let m = compute_m(&eq.state.ctrl.lambda, &grid).unwrap();
        let s = &grid.controller.settings;
        for i in 0..4 {
            let v = eq.state.ctrl.v[i];
            let expected = crate::controller::leak(v, &grid.controller) / s.k_v;
            assert!((m[i] - expected).abs() < 1e-8);
            assert!((m[i] - s.b_v * v / s.k_v).abs() < 1e-8);
        }
    }

    #[test]
    fn degenerate_m_jacobian_zero() {
        let mut cfg = presets::cs2();
        cfg.controller.alpha = 0.0;
        cfg.controller.b_v = 0.0;
        let grid = cfg.microgrid().unwrap();
        let solver = QssSolver::new(&grid).unwrap();
        let j = jacobian_m_sym(&solver, &[-0.30, -0.29, -0.31, -0.30], 1e-7).unwrap();
        assert!(j.amax() < 1e-6);
        let rep = certify_monotonicity(&grid, &CertificateSpec::default(), 1).unwrap();
        assert!(!rep.pass);
    }

    #[test]
    fn symmetric_part_is_symmetric() {
        let grid = presets::cs2().microgrid().unwrap();
        let solver = QssSolver::new(&grid).unwrap();
        let j = jacobian_m_sym(&solver, &[0.1, -0.4, 0.3, 0.0], 1e-7).unwrap();
        assert_eq!(j, j.transpose());
    }

    #[test]
    fn electrical_block_spectrum() {
        // With the controller frozen, the Jacobian is block triangular and the
        // electrical block is the standalone RLC network.
        let grid = presets::cs2().microgrid().unwrap();
        let eq = solve_equilibrium(&grid).unwrap();
        let a = full_jacobian(&eq.state.to_vec(), &grid, false);
        let e = &grid.electrical;
        let nf = 13;
        let mut net = DMatrix::zeros(nf, nf);
        for (i, &k) in grid.topology.gen_bus().iter().enumerate() {
            net[(i, i)] = -e.r_g[i] / e.l_g[i];
            net[(i, 9 + k)] = -1.0 / e.l_g[i];
            net[(9 + k, i)] = 1.0 / e.c_n[k];
        }
        for (j, &(f, t)) in grid.topology.line_endpoints().iter().enumerate() {
            net[(4 + j, 4 + j)] = -e.r_e[j] / e.l_e[j];
            net[(4 + j, 9 + f)] = -1.0 / e.l_e[j];
            net[(4 + j, 9 + t)] = 1.0 / e.l_e[j];
            net[(9 + f, 4 + j)] += 1.0 / e.c_n[f];
            net[(9 + t, 4 + j)] -= 1.0 / e.c_n[t];
        }
        for k in 0..4 {
            net[(9 + k, 9 + k)] = -e.g_cte[k] / e.c_n[k];
        }
        let block = a.view((0, 0), (nf, nf)).into_owned();
        assert!((&block - &net).amax() < 1e-9 * net.amax());
        let full = eigenvalues(&a).unwrap();
        let expected = eigenvalues(&net).unwrap();
        for ev in expected {
            let d = full
                .iter()
                .map(|f| ((f.0 - ev.0).powi(2) + (f.1 - ev.1).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(d < 1e-6 * (1.0 + ev.0.abs() + ev.1.abs()));
        }
    }

    #[test]
    fn logspace_endpoints() {
        let v = logspace(0.1, 1000.0, 5);
        assert_eq!(v[0], 0.1);
        assert_eq!(v[4], 1000.0);
        assert!((v[2] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn sweep_records_failures() {
        let grid = presets::cs2().microgrid().unwrap();
        let rep = sweep_eigs(
            &grid,
            &SweepSpec {
                targets: vec!["tau".into()],
                values: vec![-1.0, 1.0],
            },
        )
        .unwrap();
        assert!(rep.records[0].error.is_some());
        assert!(rep.records[1].max_real.unwrap() < 0.0);
        assert!(sweep_eigs(
            &grid,
            &SweepSpec {
                targets: vec!["bogus".into()],
                values: vec![1.0]
            }
        )
        .is_err());
    }
}
