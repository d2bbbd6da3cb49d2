//! Electrical and cyber topology, parameter sets and their validation.
//!
//! Bus, line and generator indices are zero-based throughout. Generator `i`
//! injects into bus `gen_bus[i]`; line `j` runs between
//! `line_endpoints[j] = (from, to)` with `+1` on `from` and `-1` on `to` in
//! the line incidence matrix.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Second-smallest Laplacian eigenvalue below which the cyber graph counts
/// as disconnected.
pub const CONNECTIVITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTopology {
    n_k: usize,
    gen_bus: Vec<usize>,
    line_endpoints: Vec<(usize, usize)>,
    cyber_adjacency: DMatrix<f64>,
}

impl GridTopology {
    pub fn new(
        n_k: usize,
        gen_bus: Vec<usize>,
        line_endpoints: Vec<(usize, usize)>,
        cyber_adjacency: DMatrix<f64>,
    ) -> Result<Self> {
        if n_k == 0 {
            return Err(Error::Structure("at least one bus is required".into()));
        }
        if gen_bus.is_empty() {
            return Err(Error::Structure(
                "at least one generator is required".into(),
            ));
        }
        for (i, &k) in gen_bus.iter().enumerate() {
            if k >= n_k {
                return Err(Error::Structure(format!(
                    "generator {i} attached to bus {k}, but there are only {n_k} buses"
                )));
            }
        }
        for (j, &(a, b)) in line_endpoints.iter().enumerate() {
            if a >= n_k || b >= n_k {
                return Err(Error::Structure(format!(
                    "line {j} endpoint ({a}, {b}) out of range for {n_k} buses"
                )));
            }
            if a == b {
                return Err(Error::Structure(format!(
                    "line {j} is a self-loop on bus {a}"
                )));
            }
        }
        let n_g = gen_bus.len();
        if cyber_adjacency.nrows() != n_g || cyber_adjacency.ncols() != n_g {
            return Err(Error::Dimension {
                what: "cyber adjacency",
                expected: n_g,
                got: cyber_adjacency.nrows(),
            });
        }
        // Validates symmetry, sign and connectivity.
        build_laplacian(&cyber_adjacency)?;
        Ok(Self {
            n_k,
            gen_bus,
            line_endpoints,
            cyber_adjacency,
        })
    }

    /// Four buses with one DG each, lines forming the ring 1-2-3-4-1 plus the
    /// chord 1-3, and a four-node communication ring with unit weights.
    pub fn four_bus_ring() -> Self {
        let adjacency = ring_adjacency(4);
        Self::new(
            4,
            vec![0, 1, 2, 3],
            vec![(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)],
            adjacency,
        )
        .expect("built-in topology is valid")
    }

    pub fn n_g(&self) -> usize {
        self.gen_bus.len()
    }

    pub fn n_e(&self) -> usize {
        self.line_endpoints.len()
    }

    pub fn n_k(&self) -> usize {
        self.n_k
    }

    pub fn gen_bus(&self) -> &[usize] {
        &self.gen_bus
    }

    pub fn line_endpoints(&self) -> &[(usize, usize)] {
        &self.line_endpoints
    }

    pub fn cyber_adjacency(&self) -> &DMatrix<f64> {
        &self.cyber_adjacency
    }

    /// Generator incidence matrix (n_g x n_k).
    pub fn beta_g(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.n_g(), self.n_k);
        for (i, &k) in self.gen_bus.iter().enumerate() {
            b[(i, k)] = 1.0;
        }
        b
    }

    /// Line incidence matrix (n_e x n_k).
    pub fn beta_e(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.n_e(), self.n_k);
        for (j, &(from, to)) in self.line_endpoints.iter().enumerate() {
            b[(j, from)] = 1.0;
            b[(j, to)] = -1.0;
        }
        b
    }
}

/// Unit-weight ring over `n` nodes.
pub fn ring_adjacency(n: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n, n);
    if n < 2 {
        return a;
    }
    for i in 0..n {
        let j = (i + 1) % n;
        if i != j {
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
    }
    a
}

fn check_adjacency(adj: &DMatrix<f64>) -> Result<()> {
    let n = adj.nrows();
    if adj.ncols() != n {
        return Err(Error::Dimension {
            what: "adjacency (square)",
            expected: n,
            got: adj.ncols(),
        });
    }
    let scale = adj.amax().max(1.0);
    for i in 0..n {
        if adj[(i, i)] != 0.0 {
            return Err(Error::Structure(format!(
                "adjacency has nonzero diagonal at {i}"
            )));
        }
        for j in 0..n {
            let a = adj[(i, j)];
            if !a.is_finite() || a < 0.0 {
                return Err(Error::Structure(format!(
                    "adjacency entry ({i}, {j}) = {a} must be finite and nonnegative"
                )));
            }
            if (a - adj[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::Structure(format!(
                    "adjacency is asymmetric at ({i}, {j}): {a} vs {}",
                    adj[(j, i)]
                )));
            }
        }
    }
    Ok(())
}

fn degree_minus_adjacency(adj: &DMatrix<f64>) -> DMatrix<f64> {
    let n = adj.nrows();
    let mut l = -adj.clone();
    for i in 0..n {
        l[(i, i)] = adj.row(i).sum();
    }
    l
}

/// Second-smallest eigenvalue of a symmetric Laplacian.
pub fn fiedler_value(laplacian: &DMatrix<f64>) -> f64 {
    if laplacian.nrows() < 2 {
        return f64::INFINITY;
    }
    let mut eig: Vec<f64> = SymmetricEigen::new(laplacian.clone())
        .eigenvalues
        .iter()
        .copied()
        .collect();
    eig.sort_by(f64::total_cmp);
    eig[1]
}

/// Graph Laplacian `degree - adjacency` of a connected undirected graph.
pub fn build_laplacian(adj: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_adjacency(adj)?;
    let l = degree_minus_adjacency(adj);
    let fiedler = fiedler_value(&l);
    if fiedler <= CONNECTIVITY_TOL {
        return Err(Error::Structure(format!(
            "cyber graph is disconnected (Fiedler value {fiedler:e})"
        )));
    }
    Ok(l)
}

/// Laplacian of the subgraph induced by the `active` nodes, embedded in the
/// full index space. Inactive nodes get zero rows and columns. The active
/// subgraph must be connected.
pub fn build_active_laplacian(adj: &DMatrix<f64>, active: &[bool]) -> Result<DMatrix<f64>> {
    check_adjacency(adj)?;
    let n = adj.nrows();
    if active.len() != n {
        return Err(Error::Dimension {
            what: "active mask",
            expected: n,
            got: active.len(),
        });
    }
    let mut masked = adj.clone();
    for i in 0..n {
        for j in 0..n {
            if !active[i] || !active[j] {
                masked[(i, j)] = 0.0;
            }
        }
    }
    let l = degree_minus_adjacency(&masked);
    let idx: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
    if idx.is_empty() {
        return Err(Error::Structure("no active nodes in cyber graph".into()));
    }
    let sub = DMatrix::from_fn(idx.len(), idx.len(), |r, c| l[(idx[r], idx[c])]);
    let fiedler = fiedler_value(&sub);
    if fiedler <= CONNECTIVITY_TOL {
        return Err(Error::Structure(format!(
            "active cyber subgraph is disconnected (Fiedler value {fiedler:e})"
        )));
    }
    Ok(l)
}

/// Per-unit electrical data as tabulated: resistances and inductances in p.u.
/// of `r_base`/`l_base`, everything else already in SI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerUnitElectrical {
    pub r_g: Vec<f64>,
    pub l_g: Vec<f64>,
    pub r_e: Vec<f64>,
    pub l_e: Vec<f64>,
    pub c_n: Vec<f64>,
    pub g_cte: Vec<f64>,
    pub i_cte: Vec<f64>,
    pub i_rated: Vec<f64>,
    pub r_base: f64,
    pub l_base: f64,
}

/// Electrical constants in SI units (ohm, henry, farad, siemens, ampere).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectricalParams {
    pub r_g: Vec<f64>,
    pub l_g: Vec<f64>,
    pub r_e: Vec<f64>,
    pub l_e: Vec<f64>,
    pub c_n: Vec<f64>,
    pub g_cte: Vec<f64>,
    pub i_cte: Vec<f64>,
    pub i_rated: Vec<f64>,
}

impl PerUnitElectrical {
    pub fn to_si(&self) -> Result<ElectricalParams> {
        if !(self.r_base > 0.0) || !self.r_base.is_finite() {
            return Err(Error::param("r_base", "base resistance must be positive"));
        }
        if !(self.l_base > 0.0) || !self.l_base.is_finite() {
            return Err(Error::param("l_base", "base inductance must be positive"));
        }
        let scale = |v: &[f64], base: f64| v.iter().map(|x| x * base).collect::<Vec<_>>();
        Ok(ElectricalParams {
            r_g: scale(&self.r_g, self.r_base),
            l_g: scale(&self.l_g, self.l_base),
            r_e: scale(&self.r_e, self.r_base),
            l_e: scale(&self.l_e, self.l_base),
            c_n: self.c_n.clone(),
            g_cte: self.g_cte.clone(),
            i_cte: self.i_cte.clone(),
            i_rated: self.i_rated.clone(),
        })
    }
}

impl ElectricalParams {
    /// Inverse of [`PerUnitElectrical::to_si`].
    pub fn to_per_unit(&self, r_base: f64, l_base: f64) -> Result<PerUnitElectrical> {
        if !(r_base > 0.0) || !(l_base > 0.0) {
            return Err(Error::param("base", "bases must be positive"));
        }
        let scale = |v: &[f64], base: f64| v.iter().map(|x| x / base).collect::<Vec<_>>();
        Ok(PerUnitElectrical {
            r_g: scale(&self.r_g, r_base),
            l_g: scale(&self.l_g, l_base),
            r_e: scale(&self.r_e, r_base),
            l_e: scale(&self.l_e, l_base),
            c_n: self.c_n.clone(),
            g_cte: self.g_cte.clone(),
            i_cte: self.i_cte.clone(),
            i_rated: self.i_rated.clone(),
            r_base,
            l_base,
        })
    }

    pub fn validate(&self, topo: &GridTopology) -> Result<()> {
        let dims: [(&'static str, &[f64], usize); 8] = [
            ("r_g", &self.r_g, topo.n_g()),
            ("l_g", &self.l_g, topo.n_g()),
            ("i_rated", &self.i_rated, topo.n_g()),
            ("r_e", &self.r_e, topo.n_e()),
            ("l_e", &self.l_e, topo.n_e()),
            ("c_n", &self.c_n, topo.n_k()),
            ("g_cte", &self.g_cte, topo.n_k()),
            ("i_cte", &self.i_cte, topo.n_k()),
        ];
        for (what, v, n) in dims {
            if v.len() != n {
                return Err(Error::Dimension {
                    what,
                    expected: n,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::param(what, "entries must be finite"));
            }
        }
        for (what, v) in [
            ("r_g", &self.r_g),
            ("l_g", &self.l_g),
            ("r_e", &self.r_e),
            ("l_e", &self.l_e),
            ("c_n", &self.c_n),
            ("i_rated", &self.i_rated),
        ] {
            if v.iter().any(|&x| x <= 0.0) {
                return Err(Error::param(what, "entries must be strictly positive"));
            }
        }
        if self.g_cte.iter().any(|&x| x < 0.0) {
            return Err(Error::param("g_cte", "entries must be nonnegative"));
        }
        Ok(())
    }

    /// Smallest branch time constant L/R over generators and lines.
    pub fn min_time_constant(&self) -> f64 {
        self.l_g
            .iter()
            .zip(&self.r_g)
            .chain(self.l_e.iter().zip(&self.r_e))
            .map(|(l, r)| l / r)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Raw controller tuning as found in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSettings {
    /// Nominal network voltage (V).
    pub v_n: f64,
    /// Allowed relative deviation from `v_n`.
    pub mu: f64,
    /// Share of the voltage band given to the integral path; the rest goes
    /// to the proportional path.
    pub delta1_frac: f64,
    pub k_v: f64,
    pub k_p: f64,
    /// Half-width of the per-unit current set-point band.
    pub phi_band: f64,
    pub tau: f64,
    pub tau_p: f64,
    pub tau_d: f64,
    /// Consensus gain.
    pub k: f64,
    /// Leakage coefficient.
    pub alpha: f64,
    /// Leakage steepness.
    pub b: f64,
    /// Saturation tolerance (V) that places the leakage band edges.
    pub v_tol: f64,
    pub b_v: f64,
    pub b_zeta: f64,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        Self {
            v_n: 48.0,
            mu: 0.05,
            delta1_frac: 1.0,
            k_v: 0.5,
            k_p: 0.0,
            phi_band: 1.0,
            tau: 1.0,
            tau_p: 10.0,
            tau_d: 10.0,
            k: 10.0,
            alpha: 1e-11,
            b: 5.0,
            v_tol: 0.1,
            b_v: 1e-5,
            b_zeta: 1e-3,
        }
    }
}

/// Controller tuning with every derived constant resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    pub settings: ControllerSettings,
    pub v_max: f64,
    pub v_min: f64,
    pub v_star: f64,
    pub delta: f64,
    pub delta1: f64,
    pub delta2: f64,
    /// Centre of the per-unit current band.
    pub k_i: f64,
    /// Half-width of the per-unit current band.
    pub delta_i: f64,
    pub v_pos: f64,
    pub v_neg: f64,
}

impl ControllerSettings {
    /// Resolves the voltage limits, band weights and leakage band edges.
    pub fn derive(&self) -> Result<ControllerParams> {
        let s = self;
        let finite = [
            ("v_n", s.v_n),
            ("mu", s.mu),
            ("delta1_frac", s.delta1_frac),
            ("k_v", s.k_v),
            ("k_p", s.k_p),
            ("phi_band", s.phi_band),
            ("tau", s.tau),
            ("tau_p", s.tau_p),
            ("tau_d", s.tau_d),
            ("k", s.k),
            ("alpha", s.alpha),
            ("b", s.b),
            ("v_tol", s.v_tol),
            ("b_v", s.b_v),
            ("b_zeta", s.b_zeta),
        ];
        for (name, x) in finite {
            if !x.is_finite() {
                return Err(Error::param(name, "must be finite"));
            }
        }
        if s.v_n <= 0.0 {
            return Err(Error::param("v_n", "must be positive"));
        }
        if s.mu <= 0.0 || s.mu >= 1.0 {
            return Err(Error::param("mu", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&s.delta1_frac) {
            return Err(Error::param("delta1_frac", "must lie in [0, 1]"));
        }
        if s.phi_band <= 0.0 {
            return Err(Error::param("phi_band", "must be positive"));
        }
        for (name, x) in [("tau", s.tau), ("tau_p", s.tau_p), ("tau_d", s.tau_d)] {
            if x <= 0.0 {
                return Err(Error::param(name, "time constants must be positive"));
            }
        }
        if s.k_v <= 0.0 {
            return Err(Error::param("k_v", "must be positive"));
        }
        if s.k_p < 0.0 || s.k < 0.0 {
            return Err(Error::param("k_p/k", "gains must be nonnegative"));
        }
        if s.alpha < 0.0 {
            return Err(Error::param("alpha", "must be nonnegative"));
        }
        if s.b <= 0.0 {
            return Err(Error::param("b", "must be positive"));
        }
        if s.b_v < 0.0 || s.b_zeta < 0.0 {
            return Err(Error::param("b_v/b_zeta", "leakages must be nonnegative"));
        }

        let delta = s.mu * s.v_n;
        let v_star = s.v_n;
        let v_max = v_star + delta;
        let v_min = v_star - delta;
        let delta1 = s.delta1_frac * delta;
        let delta2 = delta - delta1;

        if s.v_tol <= 0.0 || s.v_tol >= delta {
            return Err(Error::param(
                "v_tol",
                format!("must lie in (0, {delta}) so the leakage band edges are finite"),
            ));
        }
        let v_pos = delta * ((v_max - s.v_tol - v_star) / delta).atanh();
        let v_neg = delta * ((v_min + s.v_tol - v_star) / delta).atanh();
        if !(v_pos > v_neg) {
            return Err(Error::param("v_tol", "leakage band is empty"));
        }

        // Symmetric band: I_min = 1 - phi, I_max = 1 + phi.
        let k_i = 1.0;
        let delta_i = s.phi_band;

        Ok(ControllerParams {
            settings: s.clone(),
            v_max,
            v_min,
            v_star,
            delta,
            delta1,
            delta2,
            k_i,
            delta_i,
            v_pos,
            v_neg,
        })
    }

    /// Sets a tuning value by its field name (`alpha`, `tau_p`, ...).
    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        *self.slot(name)? = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<f64> {
        Ok(*self.clone().slot(name)?)
    }

    pub const FIELDS: [&'static str; 15] = [
        "v_n",
        "mu",
        "delta1_frac",
        "k_v",
        "k_p",
        "phi_band",
        "tau",
        "tau_p",
        "tau_d",
        "k",
        "alpha",
        "b",
        "v_tol",
        "b_v",
        "b_zeta",
    ];

    fn slot(&mut self, name: &str) -> Result<&mut f64> {
        Ok(match name {
            "v_n" => &mut self.v_n,
            "mu" => &mut self.mu,
            "delta1_frac" => &mut self.delta1_frac,
            "k_v" => &mut self.k_v,
            "k_p" => &mut self.k_p,
            "phi_band" => &mut self.phi_band,
            "tau" => &mut self.tau,
            "tau_p" => &mut self.tau_p,
            "tau_d" => &mut self.tau_d,
            "k" => &mut self.k,
            "alpha" => &mut self.alpha,
            "b" => &mut self.b,
            "v_tol" => &mut self.v_tol,
            "b_v" => &mut self.b_v,
            "b_zeta" => &mut self.b_zeta,
            _ => {
                return Err(Error::Config(format!(
                    "unknown controller parameter `{name}`"
                )))
            }
        })
    }
}

/// A fully resolved microgrid: topology, SI parameters, derived controller
/// constants and the current cyber Laplacian.
///
/// Values are immutable once built; scenario events produce modified copies.
#[derive(Debug, Clone)]
pub struct Microgrid {
    pub topology: GridTopology,
    pub electrical: ElectricalParams,
    pub controller: ControllerParams,
    laplacian: DMatrix<f64>,
    /// Row-major copy of the Laplacian for the hot path.
    lap_flat: Vec<f64>,
    /// Lambda = diag(1 / I_rated).
    inv_rated: Vec<f64>,
    online: Vec<bool>,
}

impl Microgrid {
    pub fn new(
        topology: GridTopology,
        electrical: ElectricalParams,
        settings: &ControllerSettings,
    ) -> Result<Self> {
        electrical.validate(&topology)?;
        let controller = settings.derive()?;
        let online = vec![true; topology.n_g()];
        let laplacian = build_laplacian(topology.cyber_adjacency())?;
        let inv_rated = electrical.i_rated.iter().map(|r| 1.0 / r).collect();
        Ok(Self::assemble(
            topology, electrical, controller, laplacian, inv_rated, online,
        ))
    }

    fn assemble(
        topology: GridTopology,
        electrical: ElectricalParams,
        controller: ControllerParams,
        laplacian: DMatrix<f64>,
        inv_rated: Vec<f64>,
        online: Vec<bool>,
    ) -> Self {
        let n = laplacian.nrows();
        let lap_flat = (0..n * n)
            .map(|idx| laplacian[(idx / n, idx % n)])
            .collect();
        Self {
            topology,
            electrical,
            controller,
            laplacian,
            lap_flat,
            inv_rated,
            online,
        }
    }

    pub fn n_g(&self) -> usize {
        self.topology.n_g()
    }

    pub fn n_e(&self) -> usize {
        self.topology.n_e()
    }

    pub fn n_k(&self) -> usize {
        self.topology.n_k()
    }

    pub fn laplacian(&self) -> &DMatrix<f64> {
        &self.laplacian
    }

    pub(crate) fn laplacian_flat(&self) -> &[f64] {
        &self.lap_flat
    }

    /// Diagonal of Lambda, i.e. `1 / I_rated` per generator.
    pub fn inv_rated(&self) -> &[f64] {
        &self.inv_rated
    }

    pub fn online(&self) -> &[bool] {
        &self.online
    }

    pub fn is_online(&self, dg: usize) -> bool {
        self.online[dg]
    }

    /// Copy with a different controller tuning.
    pub fn with_settings(&self, settings: &ControllerSettings) -> Result<Self> {
        let controller = settings.derive()?;
        Ok(Self::assemble(
            self.topology.clone(),
            self.electrical.clone(),
            controller,
            self.laplacian.clone(),
            self.inv_rated.clone(),
            self.online.clone(),
        ))
    }

    /// Copy with different electrical parameters (e.g. after a load step).
    pub fn with_electrical(&self, electrical: ElectricalParams) -> Result<Self> {
        electrical.validate(&self.topology)?;
        let inv_rated = electrical.i_rated.iter().map(|r| 1.0 / r).collect();
        Ok(Self::assemble(
            self.topology.clone(),
            electrical,
            self.controller.clone(),
            self.laplacian.clone(),
            inv_rated,
            self.online.clone(),
        ))
    }

    /// Copy with a different set of connected generators; the Laplacian is
    /// rebuilt on the connected subgraph.
    pub fn with_online(&self, online: Vec<bool>) -> Result<Self> {
        let laplacian = build_active_laplacian(self.topology.cyber_adjacency(), &online)?;
        Ok(Self::assemble(
            self.topology.clone(),
            self.electrical.clone(),
            self.controller.clone(),
            laplacian,
            self.inv_rated.clone(),
            online,
        ))
    }

    pub fn all_online(&self) -> bool {
        self.online.iter().all(|&o| o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table1_pu() -> PerUnitElectrical {
        PerUnitElectrical {
            r_g: vec![0.5, 0.4, 0.55, 0.6],
            l_g: vec![0.5, 0.4, 0.55, 0.6],
            r_e: vec![1.0, 2.0, 2.0, 1.0, 1.0],
            l_e: vec![1.0, 2.0, 2.0, 1.0, 1.0],
            c_n: vec![22e-3; 4],
            g_cte: vec![1.0 / 40.0, 1.0 / 30.0, 1.0 / 30.0, 1.0 / 30.0],
            i_cte: vec![1.0, 1.2, 0.8, 1.0],
            i_rated: vec![12.0, 4.0, 8.0, 8.0],
            r_base: 0.15,
            l_base: 300e-6,
        }
    }

    #[test]
    fn ring_laplacian_structure() {
        let l = build_laplacian(&ring_adjacency(4)).unwrap();
        for i in 0..4 {
            assert_eq!(l[(i, i)], 2.0);
            let minus_ones = (0..4).filter(|&j| l[(i, j)] == -1.0).count();
            assert_eq!(minus_ones, 2);
            assert_eq!(l.row(i).sum(), 0.0);
        }
    }

    #[test]
    fn ring_laplacian_spectrum() {
        // Circulant with first row (2, -1, 0, -1): eigenvalues 2 - 2 cos(2 pi m / 4).
        let expected = [0.0, 2.0, 2.0, 4.0];
        let l = build_laplacian(&ring_adjacency(4)).unwrap();
        let mut eig: Vec<f64> = SymmetricEigen::new(l).eigenvalues.iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        for (a, b) in eig.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{eig:?}");
        }
    }

    #[test]
    fn laplacian_rejects_bad_adjacency() {
        let mut asym = ring_adjacency(4);
        asym[(0, 1)] = 2.0;
        assert!(matches!(build_laplacian(&asym), Err(Error::Structure(_))));

        let mut split = DMatrix::zeros(4, 4);
        split[(0, 1)] = 1.0;
        split[(1, 0)] = 1.0;
        split[(2, 3)] = 1.0;
        split[(3, 2)] = 1.0;
        let err = build_laplacian(&split).unwrap_err();
        assert!(err.to_string().contains("disconnected"));

        let mut diag = ring_adjacency(3);
        diag[(1, 1)] = 1.0;
        assert!(build_laplacian(&diag).is_err());
    }

    #[test]
    fn active_laplacian_drops_node() {
        let l = build_active_laplacian(&ring_adjacency(4), &[false, true, true, true]).unwrap();
        for j in 0..4 {
            assert_eq!(l[(0, j)], 0.0);
            assert_eq!(l[(j, 0)], 0.0);
        }
        // Path 2-3-4 remains.
        assert_eq!(l[(1, 1)], 1.0);
        assert_eq!(l[(2, 2)], 2.0);
        assert_eq!(l[(3, 3)], 1.0);
        for i in 0..4 {
            assert_eq!(l.row(i).sum(), 0.0);
        }
        // Dropping two opposite ring nodes disconnects the rest.
        assert!(build_active_laplacian(&ring_adjacency(4), &[false, true, false, true]).is_err());
    }

    #[test]
    fn incidence_rows() {
        let t = GridTopology::four_bus_ring();
        let bg = t.beta_g();
        for i in 0..t.n_g() {
            assert_eq!(bg.row(i).sum(), 1.0);
            assert_eq!(bg.row(i).iter().filter(|&&x| x == 1.0).count(), 1);
        }
        let be = t.beta_e();
        for j in 0..t.n_e() {
            assert_eq!(be.row(j).iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(be.row(j).iter().filter(|&&x| x == -1.0).count(), 1);
            assert_eq!(be.row(j).sum(), 0.0);
        }
    }

    #[test]
    fn topology_validation() {
        assert!(GridTopology::new(2, vec![0, 2], vec![(0, 1)], ring_adjacency(2)).is_err());
        assert!(GridTopology::new(2, vec![0, 1], vec![(1, 1)], ring_adjacency(2)).is_err());
        assert!(GridTopology::new(2, vec![0, 1], vec![(0, 1)], ring_adjacency(3)).is_err());
        assert!(GridTopology::new(2, vec![0, 1], vec![(0, 1)], ring_adjacency(2)).is_ok());
    }

    #[test]
    fn per_unit_conversion() {
        let si = table1_pu().to_si().unwrap();
        assert!((si.r_g[0] - 0.075).abs() < 1e-15);
        assert!((si.l_g[1] - 120e-6).abs() < 1e-18);
        let unit = PerUnitElectrical {
            r_g: vec![1.0],
            ..table1_pu()
        };
        assert!((unit.to_si().unwrap().r_g[0] - 0.15).abs() < 1e-15);

        let bad = PerUnitElectrical {
            r_base: 0.0,
            ..table1_pu()
        };
        assert!(bad.to_si().is_err());
    }

    #[test]
    fn controller_constants() {
        let p = ControllerSettings::default().derive().unwrap();
        assert!((p.v_max - 50.4).abs() < 1e-12);
        assert!((p.v_min - 45.6).abs() < 1e-12);
        assert!((p.v_star - 48.0).abs() < 1e-12);
        assert!((p.delta - 2.4).abs() < 1e-12);
        assert!((p.v_pos + p.v_neg).abs() < 1e-12);

        let half = ControllerSettings {
            phi_band: 0.5,
            ..Default::default()
        }
        .derive()
        .unwrap();
        assert_eq!(half.k_i, 1.0);
        assert_eq!(half.delta_i, 0.5);

        for v_tol in [0.0, -0.1, 0.05 * 48.0, 3.0] {
            let s = ControllerSettings {
                v_tol,
                ..Default::default()
            };
            assert!(s.derive().is_err(), "v_tol = {v_tol}");
        }
    }

    #[test]
    fn settings_set_get() {
        let mut s = ControllerSettings::default();
        s.set("alpha", 0.25).unwrap();
        assert_eq!(s.get("alpha").unwrap(), 0.25);
        assert_eq!(s.get("b_zeta").unwrap(), 1e-3);
        assert!(s.set("nope", 1.0).is_err());
        assert!(s.get("nope").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn adjacency_strategy() -> impl Strategy<Value = DMatrix<f64>> {
            (3usize..7).prop_flat_map(|n| {
                proptest::collection::vec(0.0f64..3.0, n * n).prop_map(move |w| {
                    // A ring guarantees connectivity; extra weights ride on top.
                    let mut a = ring_adjacency(n);
                    for i in 0..n {
                        for j in (i + 1)..n {
                            let x = w[i * n + j];
                            a[(i, j)] += x;
                            a[(j, i)] += x;
                        }
                    }
                    a
                })
            })
        }

        proptest! {
            #[test]
            fn laplacian_psd_with_simple_zero(adj in adjacency_strategy()) {
                let l = build_laplacian(&adj).unwrap();
                let n = l.nrows();
                let ones = nalgebra::DVector::from_element(n, 1.0);
                prop_assert!((&l * ones).amax() < 1e-12);
                let mut eig: Vec<f64> = SymmetricEigen::new(l).eigenvalues.iter().copied().collect();
                eig.sort_by(f64::total_cmp);
                prop_assert!(eig[0].abs() < 1e-10);
                prop_assert!(eig[1] > CONNECTIVITY_TOL);
            }

            #[test]
            fn per_unit_round_trip(scale in 0.01f64..10.0, r_base in 0.01f64..5.0, l_base in 1e-6f64..1e-2) {
                let mut pu = table1_pu();
                pu.r_g.iter_mut().for_each(|x| *x *= scale);
                pu.r_base = r_base;
                pu.l_base = l_base;
                let back = pu.to_si().unwrap().to_per_unit(r_base, l_base).unwrap();
                for (a, b) in pu.r_g.iter().zip(&back.r_g).chain(pu.l_e.iter().zip(&back.l_e)) {
                    prop_assert!(((a - b) / a).abs() < 1e-12);
                }
            }

            #[test]
            fn line_flow_conservation(currents in proptest::collection::vec(-50.0f64..50.0, 5)) {
                // Sum over buses of the line injections vanishes for any line currents.
                let be = GridTopology::four_bus_ring().beta_e();
                let inj = be.transpose() * nalgebra::DVector::from_vec(currents);
                prop_assert!(inj.sum().abs() < 1e-10);
            }
        }
    }
}
