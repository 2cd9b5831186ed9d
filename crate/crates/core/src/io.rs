//! Dataset CSV, experiment config and report files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::sim::{parse_config, summarize_curves, ExperimentConfig, SimulationReport};

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Reads a headed CSV whose last column is the response `y` and whose other
/// columns are covariates.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_dataset(file)
}

pub fn parse_dataset<R: std::io::Read>(input: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = rdr.headers().map_err(|e| csv_error(e, 1))?.clone();
    if headers.len() < 2 || headers.get(headers.len() - 1) != Some("y") {
        return Err(Error::Parse {
            line: 1,
            message: "header must list covariate columns followed by `y`".into(),
        });
    }
    let dim = headers.len() - 1;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(e, 0))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != dim + 1 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", dim + 1, rec.len()),
            });
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                message: format!("column `{}`: `{field}` is not a number", &headers[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("column `{}`: non-finite value", &headers[j]),
                });
            }
            if j < dim {
                x.push(v);
            } else {
                y.push(v);
            }
        }
    }
    if y.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "no observations".into(),
        });
    }
    Dataset::new(dim, x, y)
}

fn csv_error(e: csv::Error, fallback_line: usize) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line() as usize);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

fn covariate_names(dim: usize) -> Vec<String> {
    if dim == 1 {
        vec!["x".into()]
    } else {
        (1..=dim).map(|j| format!("x{j}")).collect()
    }
}

/// Writes `x…,y` rows with 17 significant digits so values round-trip exactly.
pub fn write_dataset<W: std::io::Write>(out: W, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = covariate_names(data.dim());
    header.push("y".into());
    w.write_record(&header).map_err(io_err)?;
    for i in 0..data.len() {
        let row: Vec<String> = data
            .x(i)
            .iter()
            .copied()
            .chain([data.y(i)])
            .map(fmt_f64)
            .collect();
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

fn io_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// Creates `dir` if needed and proves it is writable.
pub fn ensure_writable_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"")
        .map_err(|e| Error::Io(format!("{} is not writable: {e}", dir.display())))?;
    fs::remove_file(&probe)?;
    Ok(())
}

fn indexed(name: &str, len: usize) -> Vec<String> {
    if len == 1 {
        vec![name.into()]
    } else {
        (1..=len).map(|j| format!("{name}{j}")).collect()
    }
}

/// One row per (scheme, estimator, replication).
pub fn write_estimates<W: std::io::Write>(out: W, report: &SimulationReport) -> Result<()> {
    let p = report.config.truth.beta.len();
    let q = report.config.truth.lambda.len();
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = vec!["scheme".into(), "estimator".into(), "replication".into()];
    header.extend((1..=p).map(|j| format!("beta{j}")));
    header.extend(indexed("lambda", q));
    header.extend(indexed("lambda_refined", q));
    header.extend(["sigma", "sigma_refined", "converged", "included"].map(String::from));
    w.write_record(&header).map_err(io_err)?;
    for r in &report.records {
        let f = &r.fit;
        let mut row = vec![
            r.scheme.clone(),
            r.estimator.to_string(),
            r.replication.to_string(),
        ];
        let vec_cells = |v: &Option<Vec<f64>>, k: usize| -> Vec<String> {
            (0..k).map(|j| opt(v.as_ref().map(|v| v[j]))).collect()
        };
        row.extend(vec_cells(&f.beta, p));
        row.extend(vec_cells(&f.lambda, q));
        row.extend(vec_cells(&f.lambda_refined, q));
        row.push(opt(f.sigma));
        row.push(opt(f.sigma_refined));
        row.push(f.converged().to_string());
        row.push(r.included().to_string());
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

/// MSE/bias per (scheme, estimator, parameter).
pub fn write_summary<W: std::io::Write>(out: W, report: &SimulationReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "scheme",
        "estimator",
        "parameter",
        "truth",
        "mse",
        "rmse",
        "bias",
        "included",
        "excluded",
        "not_converged",
    ])
    .map_err(io_err)?;
    for c in &report.cells {
        for (k, t) in report.config.truth.beta.iter().enumerate() {
            w.write_record([
                c.scheme.clone(),
                c.estimator.to_string(),
                format!("beta{}", k + 1),
                fmt_f64(*t),
                fmt_f64(c.mse[k]),
                fmt_f64(c.mse[k].sqrt()),
                fmt_f64(c.bias[k]),
                c.included.to_string(),
                c.excluded.to_string(),
                c.not_converged.to_string(),
            ])
            .map_err(io_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Metadata<'a> {
    version: &'static str,
    master_seed: u64,
    config: &'a ExperimentConfig,
    wall_time_seconds: f64,
    shared_clean_samples: &'static str,
    excluded: Vec<ExclusionCount<'a>>,
    files: Vec<String>,
}

#[derive(Serialize)]
struct ExclusionCount<'a> {
    scheme: &'a str,
    estimator: String,
    excluded: usize,
    not_converged: usize,
}

/// Writes estimates.csv, summary.csv, curves/<scheme>_<estimator>.csv and
/// metadata.json into `dir`; returns the paths written.
pub fn write_report(
    dir: &Path,
    report: &SimulationReport,
    wall_time_seconds: f64,
) -> Result<Vec<PathBuf>> {
    ensure_writable_dir(dir)?;
    let mut files = Vec::new();
    let estimates = dir.join("estimates.csv");
    write_estimates(fs::File::create(&estimates)?, report)?;
    files.push(estimates);
    let summary = dir.join("summary.csv");
    write_summary(fs::File::create(&summary)?, report)?;
    files.push(summary);

    let curves = dir.join("curves");
    fs::create_dir_all(&curves)?;
    for c in &report.cells {
        let Ok(band) = summarize_curves(report, c.estimator, &c.scheme) else {
            continue;
        };
        let path = curves.join(format!("{}_{}.csv", c.scheme, c.estimator));
        let mut w = csv::Writer::from_path(&path).map_err(io_err)?;
        w.write_record(["x", "q025", "q25", "median", "q75", "q975", "truth"])
            .map_err(io_err)?;
        for j in 0..band.x.len() {
            let row = [
                band.x[j],
                band.q025[j],
                band.q25[j],
                band.median[j],
                band.q75[j],
                band.q975[j],
                band.truth[j],
            ];
            w.write_record(row.map(fmt_f64)).map_err(io_err)?;
        }
        w.flush()?;
        files.push(path);
    }

    let meta_path = dir.join("metadata.json");
    let meta = Metadata {
        version: env!("CARGO_PKG_VERSION"),
        master_seed: report.config.master_seed,
        config: &report.config,
        wall_time_seconds,
        shared_clean_samples: "each replication draws one clean sample that every scheme contaminates and every estimator fits",
        excluded: report
            .cells
            .iter()
            .map(|c| ExclusionCount {
                scheme: &c.scheme,
                estimator: c.estimator.to_string(),
                excluded: c.excluded,
                not_converged: c.not_converged,
            })
            .collect(),
        files: files.iter().map(|p| p.strip_prefix(dir).unwrap_or(p).display().to_string()).collect(),
    };
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
    files.push(meta_path);
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip_is_exact() {
        let x = vec![0.1, 1.0 / 3.0, 2.0f64.sqrt(), 1e-300];
        let y = vec![-5.0, std::f64::consts::PI, 1e300, 0.0];
        let d = Dataset::from_scalar(x, y).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &d).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("x,y\n"));
        assert_eq!(parse_dataset(buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn multi_covariate_header() {
        let d = parse_dataset("x1,x2,y\n1,2,3\n4,5,6\n".as_bytes()).unwrap();
        assert_eq!((d.dim(), d.len()), (2, 2));
        assert_eq!(d.x(1), &[4.0, 5.0]);
        let mut buf = Vec::new();
        write_dataset(&mut buf, &d).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("x1,x2,y\n"));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let e = parse_dataset("x,y\n1,2\n3,abc\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e:?}");
        let e = parse_dataset("x,y\n1,2\n3\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e:?}");
        let e = parse_dataset("a,b\n1,2\n".as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e:?}");
        assert!(parse_dataset("x,y\n".as_bytes()).is_err());
        assert!(parse_dataset("x,y\n1,inf\n".as_bytes()).is_err());
    }

    #[test]
    fn unwritable_directory_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let file = tmp.path().join("plain");
        fs::write(&file, b"").unwrap();
        assert!(ensure_writable_dir(&file.join("sub")).is_err());
        assert!(ensure_writable_dir(&tmp.path().join("a/b")).is_ok());
    }
}
