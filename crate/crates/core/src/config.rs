//! Run configuration, built-in presets and dotted-path overrides.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{ControllerSettings, GridTopology, Microgrid, PerUnitElectrical};
use crate::scenario::{IntegrateOptions, LyapunovReference, ReducedOptions, Scenario};
use crate::stability::{CertificateSpec, SweepSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    /// Bus of each generator (zero-based).
    pub gen_bus: Vec<usize>,
    /// `[from, to]` bus pairs.
    pub lines: Vec<[usize; 2]>,
    /// `[i, j]` for unit weight or `[i, j, weight]`.
    pub cyber_edges: Vec<Vec<f64>>,
}

impl TopologyConfig {
    pub fn build(&self, n_k: usize) -> Result<GridTopology> {
        let n_g = self.gen_bus.len();
        let mut adj = DMatrix::zeros(n_g, n_g);
        for edge in &self.cyber_edges {
            let (i, j, w) = match edge.as_slice() {
                [i, j] => (*i, *j, 1.0),
                [i, j, w] => (*i, *j, *w),
                _ => {
                    return Err(Error::Config(format!(
                        "cyber edge {edge:?} must have two or three entries"
                    )))
                }
            };
            let as_index = |x: f64| -> Result<usize> {
                if x.fract() != 0.0 || x < 0.0 || x as usize >= n_g {
                    return Err(Error::Config(format!(
                        "cyber edge endpoint {x} is not a generator index"
                    )));
                }
                Ok(x as usize)
            };
            let (i, j) = (as_index(i)?, as_index(j)?);
            if i == j {
                return Err(Error::Structure(format!(
                    "cyber edge ({i}, {i}) is a self-loop"
                )));
            }
            adj[(i, j)] = w;
            adj[(j, i)] = w;
        }
        GridTopology::new(
            n_k,
            self.gen_bus.clone(),
            self.lines.iter().map(|l| (l[0], l[1])).collect(),
            adj,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub dt: f64,
    pub t_end: f64,
    pub sample_every: usize,
    /// Initial bus voltage; every other state starts at zero.
    pub initial_bus_voltage: f64,
    pub scenario: Scenario,
    /// Slow step for the reduced simulation.
    pub reduced_dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub electrical: PerUnitElectrical,
    pub topology: TopologyConfig,
    pub controller: ControllerSettings,
    pub simulation: SimulationConfig,
    pub certificate: CertificateSpec,
    pub sweep: SweepSpec,
    pub seed: u64,
}

impl RunConfig {
    /// Validated model built from this configuration.
    pub fn microgrid(&self) -> Result<Microgrid> {
        let topo = self.topology.build(self.electrical.c_n.len())?;
        let e = self.electrical.to_si()?;
        Microgrid::new(topo, e, &self.controller)
    }

    pub fn integrate_options(&self) -> IntegrateOptions {
        IntegrateOptions {
            dt: self.simulation.dt,
            t_end: self.simulation.t_end,
            sample_every: self.simulation.sample_every,
            reference: LyapunovReference::SegmentEquilibrium,
        }
    }

    pub fn reduced_options(&self) -> ReducedOptions {
        ReducedOptions {
            dt: self.simulation.reduced_dt,
            t_end: self.simulation.t_end,
            sample_every: 1,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

pub mod presets {
    //! Built-in parameter sets.

    use super::*;
    use crate::stability::logspace;

    pub const NAMES: [&str; 5] = ["table1", "cs2", "pi", "high-alpha", "high-alpha-pu"];

    /// Four-generator benchmark network with unit-weight cyber ring.
    pub fn table1() -> RunConfig {
        RunConfig {
            electrical: PerUnitElectrical {
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
            },
            topology: TopologyConfig {
                gen_bus: vec![0, 1, 2, 3],
                lines: vec![[0, 1], [1, 2], [2, 3], [3, 0], [0, 2]],
                cyber_edges: vec![
                    vec![0.0, 1.0],
                    vec![1.0, 2.0],
                    vec![2.0, 3.0],
                    vec![3.0, 0.0],
                ],
            },
            controller: ControllerSettings::default(),
            simulation: SimulationConfig {
                dt: 1e-4,
                t_end: 450.0,
                sample_every: 100,
                initial_bus_voltage: 48.0,
                scenario: Scenario::load_steps_and_plug_and_play(),
                reduced_dt: 1e-2,
            },
            certificate: CertificateSpec::default(),
            sweep: SweepSpec {
                targets: vec!["tau_p".into(), "tau_d".into()],
                values: logspace(0.1, 1000.0, 21),
            },
            seed: 0,
        }
    }

    /// Rated currents scaled by 1.5 and load conductances by 5.
    pub fn cs2() -> RunConfig {
        let mut c = table1();
        c.electrical.i_rated.iter_mut().for_each(|x| *x *= 1.5);
        c.electrical.g_cte.iter_mut().for_each(|x| *x *= 5.0);
        c
    }

    /// `cs2` with the proportional path carrying 30 % of the band.
    pub fn pi() -> RunConfig {
        let mut c = cs2();
        c.controller.k_p = 10.0;
        c.controller.delta1_frac = 0.7;
        c
    }

    /// Large leakage, `alpha = V_max` in volts.
    pub fn high_alpha() -> RunConfig {
        let mut c = table1();
        c.controller.alpha = 50.4;
        c
    }

    /// Large leakage, `alpha = V_max` in per-unit.
    pub fn high_alpha_pu() -> RunConfig {
        let mut c = table1();
        c.controller.alpha = 1.05;
        c
    }

    pub fn by_name(name: &str) -> Result<RunConfig> {
        match name {
            "table1" => Ok(table1()),
            "cs2" => Ok(cs2()),
            "pi" => Ok(pi()),
            "high-alpha" => Ok(high_alpha()),
            "high-alpha-pu" => Ok(high_alpha_pu()),
            _ => Err(Error::Config(format!(
                "unknown preset `{name}` (available: {})",
                NAMES.join(", ")
            ))),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value, path: &str) -> Result<()> {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let sub = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None => return Err(Error::Config(format!("unknown key `{sub}`"))),
                }
            }
            Ok(())
        }
        (slot @ toml::Value::Float(_), toml::Value::Integer(i)) => {
            *slot = toml::Value::Float(i as f64);
            Ok(())
        }
        (slot, v) => {
            if std::mem::discriminant(slot) != std::mem::discriminant(&v) {
                return Err(Error::Config(format!(
                    "type mismatch at `{path}`: expected {}, got {}",
                    slot.type_str(),
                    v.type_str()
                )));
            }
            *slot = v;
            Ok(())
        }
    }
}

/// Parses `a.b.c=value` into a nested table.
fn override_table(spec: &str) -> Result<toml::Value> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut out = value;
    for key in path.rsplit('.') {
        let mut t = toml::Table::new();
        t.insert(key.to_string(), out);
        out = toml::Value::Table(t);
    }
    Ok(out)
}

/// Resolves a configuration: preset (explicit, then the file's `preset`
/// key, then `table1`), file contents, then `key=value` overrides.
pub fn load_config(
    path: Option<&Path>,
    preset: Option<&str>,
    overrides: &[String],
) -> Result<RunConfig> {
    let mut file_table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    let file_preset = match file_table.remove("preset") {
        Some(toml::Value::String(s)) => Some(s),
        Some(other) => {
            return Err(Error::Config(format!(
                "`preset` must be a string, got {}",
                other.type_str()
            )))
        }
        None => None,
    };
    let name = preset
        .map(str::to_string)
        .or(file_preset)
        .unwrap_or_else(|| "table1".into());
    let base = presets::by_name(&name)?;
    let mut value = toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut value, toml::Value::Table(file_table), "")?;
    for o in overrides {
        merge(&mut value, override_table(o)?, "")?;
    }
    let cfg: RunConfig = value
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.microgrid()?;
    cfg.controller.derive()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn preset_values() {
        assert_eq!(
            presets::table1().electrical.i_rated,
            vec![12.0, 4.0, 8.0, 8.0]
        );
        let cs2 = presets::cs2();
        assert_eq!(cs2.electrical.i_rated, vec![18.0, 6.0, 12.0, 12.0]);
        for (a, b) in cs2
            .electrical
            .g_cte
            .iter()
            .zip(&presets::table1().electrical.g_cte)
        {
            assert!((a - 5.0 * b).abs() < 1e-15);
        }
        let pi = presets::pi().microgrid().unwrap();
        assert_eq!(pi.controller.settings.k_p, 10.0);
        assert!((pi.controller.delta1 - 0.7 * 2.4).abs() < 1e-12);
        assert!((pi.controller.delta2 - 0.3 * 2.4).abs() < 1e-12);
        for name in presets::NAMES {
            presets::by_name(name).unwrap().microgrid().unwrap();
        }
        assert!(presets::by_name("nope").is_err());
    }

    #[test]
    fn overrides_and_errors() {
        let c = load_config(
            None,
            Some("cs2"),
            &["controller.alpha=1e-3".into(), "controller.tau=2".into()],
        )
        .unwrap();
        assert_eq!(c.controller.alpha, 1e-3);
        assert_eq!(c.controller.tau, 2.0);
        assert!(matches!(
            load_config(None, None, &["controller.nope=1".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            load_config(None, None, &["controller.alpha=\"x\"".into()]),
            Err(Error::Config(_))
        ));
        assert!(load_config(None, None, &["noequals".into()]).is_err());
        // Validation failures surface with the violated invariant.
        let err = load_config(None, None, &["controller.v_tol=5".into()]).unwrap_err();
        assert!(err.to_string().contains("v_tol"));
    }

    #[test]
    fn file_merge() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            f,
            "preset = \"cs2\"\n[controller]\nk_v = 2\n[simulation]\nt_end = 10.0"
        )
        .unwrap();
        let c = load_config(Some(f.path()), None, &[]).unwrap();
        assert_eq!(c.controller.k_v, 2.0);
        assert_eq!(c.simulation.t_end, 10.0);
        assert_eq!(c.electrical.i_rated[0], 18.0);
        let c = load_config(Some(f.path()), Some("table1"), &[]).unwrap();
        assert_eq!(c.electrical.i_rated[0], 12.0);
    }

    #[test]
    fn round_trip_and_hash() {
        let c = presets::cs2();
        let text = c.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut d = c.clone();
        d.seed = 1;
        assert_ne!(d.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn weighted_cyber_edges() {
        let mut c = presets::table1();
        c.topology.cyber_edges = vec![vec![0.0, 1.0, 2.0], vec![1.0, 2.0], vec![2.0, 3.0]];
        let g = c.microgrid().unwrap();
        assert_eq!(g.laplacian()[(0, 0)], 2.0);
        c.topology.cyber_edges = vec![vec![0.0, 1.0]];
        assert!(matches!(c.microgrid(), Err(Error::Structure(_))));
        c.topology.cyber_edges = vec![vec![0.0]];
        assert!(matches!(c.microgrid(), Err(Error::Config(_))));
    }
}
