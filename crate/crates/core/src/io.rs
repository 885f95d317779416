//! CSV formats: paths (`path_id,t,y`), covariates (`path_id,<names>`), and
//! ensembles (`path_id,sample_id,t,y`).

use std::collections::HashMap;
use std::fs::File;
use std::path::Path;

use crate::error::{GlimError, Issue, Result};
use crate::path::{validate_dataset, EnsembleEntry, PathDataset, RawPath, SimulationEnsemble, TerminalRule};

fn open_reader(file: &Path) -> Result<csv::Reader<File>> {
    let f = File::open(file).map_err(|e| GlimError::io(file, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f))
}

fn open_writer(file: &Path) -> Result<csv::Writer<File>> {
    let f = File::create(file).map_err(|e| GlimError::io(file, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn csv_error(file: &Path, e: csv::Error) -> GlimError {
    match e.position() {
        Some(pos) => GlimError::Input(format!("{}: line {}: {e}", file.display(), pos.line())),
        None => GlimError::Input(format!("{}: {e}", file.display())),
    }
}

fn write_error(file: &Path, e: csv::Error) -> GlimError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => GlimError::io(file, io),
        other => GlimError::Input(format!("{}: {other:?}", file.display())),
    }
}

fn check_header(file: &Path, reader: &mut csv::Reader<File>, expected: &[&str]) -> Result<Vec<String>> {
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(file, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < expected.len() || header.iter().zip(expected).any(|(a, b)| a != b) {
        return Err(GlimError::Input(format!(
            "{}: line 1: expected header starting with '{}', found '{}'",
            file.display(),
            expected.join(","),
            header.join(",")
        )));
    }
    Ok(header)
}

fn field<T: std::str::FromStr>(file: &Path, line: u64, name: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| {
        GlimError::Input(format!("{}: line {line}: cannot parse {name} from '{raw}'", file.display()))
    })
}

struct Rows<F> {
    records: csv::StringRecordsIntoIter<File>,
    file: F,
}

impl<F: AsRef<Path>> Iterator for Rows<F> {
    type Item = Result<(u64, csv::StringRecord)>;

    fn next(&mut self) -> Option<Self::Item> {
        self.records.next().map(|r| {
            let file = self.file.as_ref();
            let rec = r.map_err(|e| csv_error(file, e))?;
            let line = rec.position().map_or(0, |p| p.line());
            Ok((line, rec))
        })
    }
}

fn rows(file: &Path, reader: csv::Reader<File>) -> Rows<&Path> {
    Rows {
        records: reader.into_records(),
        file,
    }
}

/// Reads `path_id,t,y` rows into raw paths, in order of first appearance.
/// Missing time points become NaN and are reported by validation.
pub fn read_raw_paths(file: &Path) -> Result<Vec<RawPath>> {
    let mut reader = open_reader(file)?;
    check_header(file, &mut reader, &["path_id", "t", "y"])?;
    let mut order: Vec<String> = Vec::new();
    let mut points: HashMap<String, Vec<(usize, f64)>> = HashMap::new();
    for row in rows(file, reader) {
        let (line, rec) = row?;
        if rec.len() != 3 {
            return Err(GlimError::Input(format!(
                "{}: line {line}: expected 3 fields, found {}",
                file.display(),
                rec.len()
            )));
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(GlimError::Input(format!("{}: line {line}: empty path_id", file.display())));
        }
        let t: usize = field(file, line, "t", &rec[1])?;
        let y: f64 = field(file, line, "y", &rec[2])?;
        let entry = points.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Vec::new()
        });
        if entry.iter().any(|(s, _)| *s == t) {
            return Err(GlimError::Input(format!(
                "{}: line {line}: duplicate t={t} for path '{id}'",
                file.display()
            )));
        }
        entry.push((t, y));
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let pts = &points[&id];
            let horizon = pts.iter().map(|(t, _)| *t).max().unwrap_or(0);
            let mut y = vec![f64::NAN; horizon + 1];
            for &(t, v) in pts {
                y[t] = v;
            }
            RawPath::new(id, y, Vec::new())
        })
        .collect())
}

/// Covariate names and rows from `path_id,<name1>,...`.
pub fn read_covariates(file: &Path) -> Result<(Vec<String>, Vec<(String, Vec<f64>)>)> {
    let mut reader = open_reader(file)?;
    let header = check_header(file, &mut reader, &["path_id"])?;
    let names: Vec<String> = header[1..].to_vec();
    let mut out = Vec::new();
    for row in rows(file, reader) {
        let (line, rec) = row?;
        if rec.len() != header.len() {
            return Err(GlimError::Input(format!(
                "{}: line {line}: expected {} fields, found {}",
                file.display(),
                header.len(),
                rec.len()
            )));
        }
        let values = names
            .iter()
            .enumerate()
            .map(|(k, name)| field(file, line, name, &rec[k + 1]))
            .collect::<Result<Vec<f64>>>()?;
        out.push((rec[0].to_string(), values));
    }
    Ok((names, out))
}

/// Joins a path file with an optional covariate file and validates the result.
pub fn load_dataset(paths: &Path, covariates: Option<&Path>, rule: TerminalRule) -> Result<PathDataset> {
    let mut raw = read_raw_paths(paths)?;
    if raw.is_empty() {
        return Err(GlimError::Input(format!("{}: no paths", paths.display())));
    }
    let names = match covariates {
        None => Vec::new(),
        Some(file) => {
            let (names, rows) = read_covariates(file)?;
            let mut by_id: HashMap<String, Vec<f64>> = HashMap::new();
            let mut issues = Vec::new();
            for (id, v) in rows {
                if by_id.insert(id.clone(), v).is_some() {
                    issues.push(Issue {
                        path_id: id,
                        index: None,
                        message: "duplicate covariate row".into(),
                    });
                }
            }
            for r in &mut raw {
                match by_id.remove(&r.id) {
                    Some(v) => r.covariates = v,
                    None => issues.push(Issue {
                        path_id: r.id.clone(),
                        index: None,
                        message: "no covariate row".into(),
                    }),
                }
            }
            let mut extra: Vec<String> = by_id.into_keys().collect();
            extra.sort();
            issues.extend(extra.into_iter().map(|id| Issue {
                path_id: id,
                index: None,
                message: "covariates given for an unknown path".into(),
            }));
            if !issues.is_empty() {
                return Err(GlimError::Validation(issues));
            }
            names
        }
    };
    validate_dataset(raw, names, rule)
}

pub fn write_paths(file: &Path, data: &PathDataset) -> Result<()> {
    let mut w = open_writer(file)?;
    let err = |e| write_error(file, e);
    w.write_record(["path_id", "t", "y"]).map_err(err)?;
    for p in data.paths() {
        for (t, y) in p.values().iter().enumerate() {
            w.write_record([p.id(), &t.to_string(), &y.to_string()]).map_err(err)?;
        }
    }
    w.flush().map_err(|e| GlimError::io(file, e))
}

pub fn write_covariates(file: &Path, data: &PathDataset) -> Result<()> {
    let mut w = open_writer(file)?;
    let err = |e| write_error(file, e);
    let mut header = vec!["path_id".to_string()];
    header.extend(data.covariate_names().iter().cloned());
    w.write_record(&header).map_err(err)?;
    for p in data.paths() {
        let mut rec = vec![p.id().to_string()];
        rec.extend(p.covariates().iter().map(f64::to_string));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| GlimError::io(file, e))
}

pub fn write_ensemble(file: &Path, ens: &SimulationEnsemble) -> Result<()> {
    let mut w = open_writer(file)?;
    let err = |e| write_error(file, e);
    w.write_record(["path_id", "sample_id", "t", "y"]).map_err(err)?;
    for e in ens.entries() {
        for (s, sample) in e.samples.iter().enumerate() {
            let sid = s.to_string();
            for (t, y) in sample.iter().enumerate() {
                w.write_record([e.path_id.as_str(), &sid, &t.to_string(), &y.to_string()])
                    .map_err(err)?;
            }
        }
    }
    w.flush().map_err(|e| GlimError::io(file, e))
}

/// Reads `path_id,sample_id,t,y`; each path's `y_0` is taken from its first sample.
pub fn read_ensemble(file: &Path) -> Result<SimulationEnsemble> {
    let mut reader = open_reader(file)?;
    check_header(file, &mut reader, &["path_id", "sample_id", "t", "y"])?;
    let mut order: Vec<String> = Vec::new();
    let mut samples: HashMap<String, Vec<Vec<(usize, f64)>>> = HashMap::new();
    let mut horizon = 0;
    for row in rows(file, reader) {
        let (line, rec) = row?;
        if rec.len() != 4 {
            return Err(GlimError::Input(format!(
                "{}: line {line}: expected 4 fields, found {}",
                file.display(),
                rec.len()
            )));
        }
        let id = rec[0].to_string();
        let sid: usize = field(file, line, "sample_id", &rec[1])?;
        let t: usize = field(file, line, "t", &rec[2])?;
        let y: f64 = field(file, line, "y", &rec[3])?;
        horizon = horizon.max(t);
        let per = samples.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Vec::new()
        });
        if per.len() <= sid {
            per.resize(sid + 1, Vec::new());
        }
        if per[sid].iter().any(|(s, _)| *s == t) {
            return Err(GlimError::Input(format!(
                "{}: line {line}: duplicate t={t} for path '{id}' sample {sid}",
                file.display()
            )));
        }
        per[sid].push((t, y));
    }
    if order.is_empty() {
        return Err(GlimError::Input(format!("{}: ensemble is empty", file.display())));
    }
    let mut issues = Vec::new();
    let mut entries = Vec::with_capacity(order.len());
    for id in order {
        let per = &samples[&id];
        let mut dense = Vec::with_capacity(per.len());
        for (sid, pts) in per.iter().enumerate() {
            let mut y = vec![f64::NAN; horizon + 1];
            for &(t, v) in pts {
                y[t] = v;
            }
            if let Some(t) = y.iter().position(|v| v.is_nan()) {
                issues.push(Issue {
                    path_id: id.clone(),
                    index: Some(t),
                    message: format!("sample {sid} is missing this time point"),
                });
            }
            dense.push(y);
        }
        entries.push(EnsembleEntry {
            y0: dense[0][0],
            path_id: id,
            samples: dense,
        });
    }
    if !issues.is_empty() {
        return Err(GlimError::Validation(issues));
    }
    SimulationEnsemble::new(horizon, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::ProbabilityPath;
    use std::io::Write;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        File::create(&p).unwrap().write_all(text.as_bytes()).unwrap();
        p
    }

    #[test]
    fn paths_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let data = PathDataset::from_paths(
            vec!["x".into(), "z".into()],
            vec![
                ProbabilityPath::new("a", vec![0.1, 0.30000000000000004, 1.0], vec![1.0, -2.5]).unwrap(),
                ProbabilityPath::new("b", vec![0.7, 0.2, 0.0], vec![0.0, 1e-300]).unwrap(),
            ],
        )
        .unwrap();
        let pf = dir.path().join("paths.csv");
        let cf = dir.path().join("cov.csv");
        write_paths(&pf, &data).unwrap();
        write_covariates(&cf, &data).unwrap();
        let back = load_dataset(&pf, Some(&cf), TerminalRule::Required).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "p.csv", "path_id,t,y\na,0,0.5\na,1,abc\na,2,1\n");
        let err = read_raw_paths(&f).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn bad_header_is_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "p.csv", "id,time,y\na,0,0.5\n");
        assert!(matches!(read_raw_paths(&f), Err(GlimError::Input(_))));
    }

    #[test]
    fn missing_point_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "p.csv", "path_id,t,y\na,0,0.5\na,2,1\n");
        let err = load_dataset(&f, None, TerminalRule::Required).unwrap_err();
        assert!(matches!(err, GlimError::Validation(ref v) if v[0].index == Some(1)), "{err}");
    }

    #[test]
    fn missing_covariates_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "p.csv", "path_id,t,y\na,0,0.5\na,1,1\nb,0,0.5\nb,1,0\n");
        let c = write(dir.path(), "c.csv", "path_id,x\na,1\nzz,2\n");
        match load_dataset(&p, Some(&c), TerminalRule::Required).unwrap_err() {
            GlimError::Validation(v) => {
                let ids: Vec<&str> = v.iter().map(|i| i.path_id.as_str()).collect();
                assert_eq!(ids, ["b", "zz"]);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn ensemble_roundtrip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let ens = SimulationEnsemble::new(
            2,
            vec![EnsembleEntry {
                path_id: "a".into(),
                y0: 0.4,
                samples: vec![vec![0.4, 0.1, 0.0], vec![0.4, 0.9, 1.0]],
            }],
        )
        .unwrap();
        let f = dir.path().join("e.csv");
        write_ensemble(&f, &ens).unwrap();
        assert_eq!(read_ensemble(&f).unwrap(), ens);
        let empty = write(dir.path(), "empty.csv", "path_id,sample_id,t,y\n");
        assert!(matches!(read_ensemble(&empty), Err(GlimError::Input(_))));
    }
}
