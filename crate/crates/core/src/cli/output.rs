//! File emission: CSV with full-precision floats, pretty JSON, plain-text summaries.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::asymptotics::FisherReport;
use crate::error::{Error, Result};
use crate::experiment::StudyReport;
use crate::grid::{SampledPath, TimeGrid};

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("CSV error: {other:?}")),
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_error)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_path_csv(path: &Path, x: &SampledPath, bh: &SampledPath) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["t", "X", "BH"]).map_err(csv_error)?;
    let grid = x.grid();
    for i in 0..grid.len() {
        w.write_record([fmt_f64(grid.t(i)), fmt_f64(x.values()[i]), fmt_f64(bh.values()[i])])
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the `t` and `X` columns of a path file and checks them against `grid`.
pub fn read_path_csv(path: &Path, grid: TimeGrid) -> Result<SampledPath> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(csv_error)?;
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse {
                row: 1,
                message: format!("missing column '{name}'"),
            })
    };
    let (ct, cx) = (col("t")?, col("X")?);
    let mut ts = Vec::new();
    let mut xs = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        let cell = |c: usize, name: &str| -> Result<f64> {
            let s = rec.get(c).ok_or_else(|| Error::Parse {
                row,
                message: format!("missing value for '{name}'"),
            })?;
            let v: f64 = s.parse().map_err(|_| Error::Parse {
                row,
                message: format!("'{s}' in column '{name}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    message: format!("non-finite value in column '{name}'"),
                });
            }
            Ok(v)
        };
        ts.push(cell(ct, "t")?);
        xs.push(cell(cx, "X")?);
    }
    if ts.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "data has {} rows but the configured grid has {} nodes",
            ts.len(),
            grid.len()
        )));
    }
    let tol = 1e-9 * grid.horizon().max(1.0);
    if let Some(i) = (0..grid.len()).find(|&i| (ts[i] - grid.t(i)).abs() > tol) {
        return Err(Error::GridMismatch(format!(
            "row {} has t = {} but the grid node is {}",
            i + 2,
            ts[i],
            grid.t(i)
        )));
    }
    SampledPath::new(grid, xs)
}

fn write_matrix_rows(w: &mut csv::Writer<fs::File>, name: &str, m: &[Vec<f64>]) -> Result<()> {
    for (i, row) in m.iter().enumerate() {
        let mut rec = vec![name.to_string(), i.to_string()];
        rec.extend(row.iter().map(|&v| fmt_f64(v)));
        w.write_record(&rec).map_err(csv_error)?;
    }
    Ok(())
}

/// `fisher.csv`: one row per matrix row, tagged `gamma`, `inverse`,
/// `cholesky`, then a single `eigenvalues` row.
pub fn write_fisher_csv(path: &Path, report: &FisherReport) -> Result<()> {
    let d = report.gamma.len();
    let mut w = csv_writer(path)?;
    let mut header = vec!["matrix".to_string(), "row".to_string()];
    header.extend((0..d).map(|j| format!("c{j}")));
    w.write_record(&header).map_err(csv_error)?;
    write_matrix_rows(&mut w, "gamma", &report.gamma)?;
    write_matrix_rows(&mut w, "inverse", &report.inverse)?;
    write_matrix_rows(&mut w, "cholesky", &report.cholesky)?;
    write_matrix_rows(&mut w, "eigenvalues", std::slice::from_ref(&report.eigenvalues))?;
    w.flush()?;
    Ok(())
}

pub fn write_replicates_csv(path: &Path, report: &StudyReport) -> Result<()> {
    let d = report.config.theta0.len();
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = vec!["index".into(), "seed".into(), "epsilon".into()];
    header.extend((0..d).map(|k| format!("theta_hat_{k}")));
    header.extend((0..d).map(|k| format!("u_{k}")));
    header.extend(["loglik", "converged", "hit_boundary", "n_evals", "error"].map(String::from));
    w.write_record(&header).map_err(csv_error)?;
    for e in &report.epsilons {
        for r in &e.replicates {
            let mut rec = vec![r.index.to_string(), r.seed.to_string(), fmt_f64(r.epsilon)];
            let pad = |v: &[f64]| -> Vec<String> {
                (0..d).map(|k| v.get(k).map_or_else(|| "NaN".to_string(), |&x| fmt_f64(x))).collect()
            };
            rec.extend(pad(&r.theta_hat));
            rec.extend(pad(&r.normalized_error));
            rec.push(fmt_f64(r.loglik));
            rec.push(r.converged.to_string());
            rec.push(r.hit_boundary.to_string());
            rec.push(r.n_evals.to_string());
            rec.push(r.error.clone().unwrap_or_default());
            w.write_record(&rec).map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Long-format comparison table: one row per (ε, coordinate, quantity).
pub fn write_summary_csv(path: &Path, report: &StudyReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "epsilon",
        "coordinate",
        "quantity",
        "empirical",
        "theoretical",
        "standard_error",
        "relative_error",
    ])
    .map_err(csv_error)?;
    let nan = f64::NAN;
    for e in &report.epsilons {
        let s = &e.summary;
        let mut row = |coord: String, q: &str, vals: [f64; 4]| -> Result<()> {
            let mut rec = vec![fmt_f64(s.epsilon), coord, q.to_string()];
            rec.extend(vals.iter().map(|&v| fmt_f64(v)));
            w.write_record(&rec).map_err(csv_error)
        };
        for c in &s.coordinates {
            let k = c.index.to_string();
            row(k.clone(), "mean", [c.mean, 0.0, c.mean_se, c.mean / c.theory_variance.sqrt()])?;
            row(k.clone(), "variance", [c.variance, c.theory_variance, nan, c.variance_relative_error])?;
            if let Some(ks) = &c.ks {
                row(k.clone(), "ks_statistic", [ks.statistic, nan, nan, nan])?;
                row(k.clone(), "ks_p_value", [ks.p_value, nan, nan, nan])?;
            }
            for m in &c.moments {
                row(
                    k.clone(),
                    &format!("E[{}]", m.function),
                    [m.empirical, m.theoretical, m.standard_error, m.relative_error],
                )?;
            }
            for t in &c.tails {
                row(
                    k.clone(),
                    &format!("P(|u|>{}sd)", t.r),
                    [t.empirical, t.theoretical, nan, (t.empirical - t.theoretical) / t.theoretical],
                )?;
            }
        }
        row(
            "all".into(),
            "frobenius_distance",
            [s.frobenius_distance, 0.0, s.frobenius_se, nan],
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_histogram_csv(path: &Path, report: &StudyReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["epsilon", "coordinate", "center", "count", "density", "normal_density"])
        .map_err(csv_error)?;
    for e in &report.epsilons {
        for c in &e.summary.coordinates {
            let Some(h) = &c.histogram else { continue };
            for b in 0..h.centers.len() {
                w.write_record([
                    fmt_f64(e.epsilon),
                    c.index.to_string(),
                    fmt_f64(h.centers[b]),
                    h.counts[b].to_string(),
                    fmt_f64(h.density[b]),
                    fmt_f64(h.normal_density[b]),
                ])
                .map_err(csv_error)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn study_summary_text(report: &StudyReport) -> String {
    let c = &report.config;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "model {} theta0 {:?}  H = {}  T = {}  n = {}  M = {}  seed = {}",
        c.model, c.theta0, c.hurst, c.horizon, c.steps, c.replicates, c.seed
    );
    let _ = writeln!(s, "Gamma = {:?}", report.fisher.gamma);
    let _ = writeln!(s, "Gamma^-1 = {:?}", report.fisher.inverse);
    for e in &report.epsilons {
        let m = &e.summary;
        let _ = writeln!(s, "\nepsilon = {}", m.epsilon);
        let _ = writeln!(
            s,
            "  replicates used {}  failed {}  on boundary {}  not converged {}{}",
            m.n_used,
            m.n_failed,
            m.n_boundary,
            m.n_not_converged,
            if m.unreliable { "  [UNRELIABLE]" } else { "" }
        );
        let _ = writeln!(
            s,
            "  |S - Gamma^-1|_F / |Gamma^-1|_F = {:.4} (se {:.4})",
            m.frobenius_distance, m.frobenius_se
        );
        for k in &m.coordinates {
            let _ = writeln!(
                s,
                "  u_{}: mean {:+.4} (se {:.4})  var {:.4} vs {:.4} ({:+.1}%)",
                k.index,
                k.mean,
                k.mean_se,
                k.variance,
                k.theory_variance,
                100.0 * k.variance_relative_error
            );
            if let Some(ks) = &k.ks {
                let _ = writeln!(s, "       KS D = {:.4}  p = {:.4}", ks.statistic, ks.p_value);
            }
            for mm in &k.moments {
                let _ = writeln!(
                    s,
                    "       E[{}] = {:.4} vs {:.4}",
                    mm.function, mm.empirical, mm.theoretical
                );
            }
            for t in &k.tails {
                let _ = writeln!(
                    s,
                    "       P(|u| > {} sd) = {:.4} vs {:.4}",
                    t.r, t.empirical, t.theoretical
                );
            }
        }
    }
    if let Some(g) = &report.grid_doubling {
        let _ = writeln!(
            s,
            "\ndoubling n = {} moves the empirical covariance by {:.2}%",
            g.steps,
            100.0 * g.relative_change
        );
    }
    if let Some(m) = report.schedule_monotone {
        let _ = writeln!(s, "\nFrobenius distance non-increasing in epsilon (CI overlap): {m}");
    }
    s
}

/// Writes the study files into `dir`; returns the paths written.
pub fn write_study(dir: &Path, report: &StudyReport, json: bool, csv: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if json {
        let p = dir.join("report.json");
        write_json(&p, report)?;
        out.push(p);
    }
    if csv {
        for (name, f) in [
            ("replicates.csv", write_replicates_csv as fn(&Path, &StudyReport) -> Result<()>),
            ("summary.csv", write_summary_csv),
            ("histogram.csv", write_histogram_csv),
        ] {
            let p = dir.join(name);
            f(&p, report)?;
            out.push(p);
        }
    }
    let p = dir.join("summary.txt");
    fs::write(&p, study_summary_text(report))?;
    out.push(p);
    Ok(out)
}
