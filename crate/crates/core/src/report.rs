//! JSON report envelopes and CSV writers.

use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::scenario::{ReducedTrajectory, Trajectory};
use crate::stability::{Eig, SweepReport};

/// Common wrapper written by every command.
#[derive(Debug, Clone, Serialize)]
pub struct Envelope<'a, T: Serialize> {
    pub kind: &'a str,
    pub config_hash: &'a str,
    pub seed: u64,
    pub result: &'a T,
}

pub fn write_json<T: Serialize>(
    w: &mut impl Write,
    kind: &str,
    config_hash: &str,
    seed: u64,
    result: &T,
) -> Result<()> {
    let env = Envelope {
        kind,
        config_hash,
        seed,
        result,
    };
    serde_json::to_writer_pretty(&mut *w, &env)?;
    writeln!(w)?;
    Ok(())
}

fn write_row(w: &mut impl Write, row: &[f64]) -> std::io::Result<()> {
    let mut first = true;
    for v in row {
        if !first {
            w.write_all(b",")?;
        }
        first = false;
        // `{:?}` keeps full round-trip precision.
        write!(w, "{v:?}")?;
    }
    w.write_all(b"\n")
}

/// One row per sample, columns as in [`Trajectory::header`].
pub fn write_trajectory_csv(w: &mut impl Write, traj: &Trajectory) -> Result<()> {
    writeln!(w, "{}", traj.header().join(","))?;
    for row in traj.rows() {
        write_row(w, &row)?;
    }
    Ok(())
}

/// Reduced-model samples: slow states, quasi-steady currents and voltages,
/// sharing error and `W_s`.
pub fn write_reduced_csv(w: &mut impl Write, traj: &ReducedTrajectory) -> Result<()> {
    let (Some(lam0), Some(vn0)) = (traj.lambda.first(), traj.v_n.first()) else {
        writeln!(w, "t")?;
        return Ok(());
    };
    let (n, nk) = (lam0.len(), vn0.len());
    let mut header = vec!["t".to_string()];
    for (prefix, count) in [("lam", n), ("zeta", n), ("Ig", n), ("Vn", nk), ("v", n)] {
        header.extend((1..=count).map(|i| format!("{prefix}{i}")));
    }
    header.push("share_err_pu".into());
    header.push("Ws".into());
    writeln!(w, "{}", header.join(","))?;
    let mut row = Vec::with_capacity(header.len());
    for k in 0..traj.t.len() {
        row.clear();
        row.push(traj.t[k]);
        row.extend_from_slice(&traj.lambda[k]);
        row.extend_from_slice(&traj.zeta[k]);
        row.extend_from_slice(&traj.i_g[k]);
        row.extend_from_slice(&traj.v_n[k]);
        row.extend_from_slice(&traj.v[k]);
        row.push(traj.share_err[k]);
        row.push(traj.ws[k]);
        write_row(w, &row)?;
    }
    Ok(())
}

/// Long-format spectrum table: `param,value,re,im`.
pub fn write_sweep_csv(w: &mut impl Write, report: &SweepReport) -> Result<()> {
    writeln!(w, "param,value,re,im")?;
    let param = report.targets.join("+");
    for rec in &report.records {
        for &(re, im) in rec.eigenvalues.iter().flatten() {
            write!(w, "{param},")?;
            write_row(w, &[rec.value, re, im])?;
        }
    }
    Ok(())
}

/// Spectrum of a single linearization: `re,im`.
pub fn write_spectrum_csv(w: &mut impl Write, eigs: &[Eig]) -> Result<()> {
    writeln!(w, "re,im")?;
    for &(re, im) in eigs {
        write_row(w, &[re, im])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_envelope_fields() {
        let mut buf = Vec::new();
        write_json(&mut buf, "demo", "abc", 7, &vec![1.0, 2.0]).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(v["kind"], "demo");
        assert_eq!(v["config_hash"], "abc");
        assert_eq!(v["seed"], 7);
        assert_eq!(v["result"][1], 2.0);
    }

    #[test]
    fn spectrum_csv_round_trips() {
        let eigs = vec![(-1.0 / 3.0, 0.1), (-2.0, 0.0)];
        let mut buf = Vec::new();
        write_spectrum_csv(&mut buf, &eigs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let back: Vec<Eig> = text
            .lines()
            .skip(1)
            .map(|l| {
                let (a, b) = l.split_once(',').unwrap();
                (a.parse().unwrap(), b.parse().unwrap())
            })
            .collect();
        assert_eq!(back, eigs);
    }

    #[test]
    fn reduced_csv_header_matches_rows() {
        let traj = ReducedTrajectory {
            t: vec![0.0, 0.01],
            lambda: vec![vec![0.0; 2]; 2],
            zeta: vec![vec![0.0; 2]; 2],
            i_g: vec![vec![1.0, 2.0]; 2],
            v_n: vec![vec![48.0; 3]; 2],
            v: vec![vec![0.5; 2]; 2],
            share_err: vec![0.1, 0.05],
            ws: vec![1.0, 0.9],
            event_marks: vec![],
        };
        let mut buf = Vec::new();
        write_reduced_csv(&mut buf, &traj).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let cols = lines[0].split(',').count();
        assert_eq!(cols, 1 + 2 * 4 + 3 + 2);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == cols));
        assert!(lines[0].ends_with("share_err_pu,Ws"));
    }
}
