use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::baselines::{intra_cluster_inertia, misclassification_rate, KMeansResult, RegMixFit};
use crate::error::{Error, Result};
use crate::hmm::{ChainParams, Constraint};
use crate::mixhmmr::{Dataset, FitResult, ModelParams};
use crate::numcore::{TimeGrid, TimeRescale};

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

/// Reads a rectangular numeric table. A first row with any non-numeric cell
/// is treated as a header and skipped. Rows and columns in errors are
/// 1-based file positions.
pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (r, record) in reader(path)?.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row: r + 1,
            column: 0,
            message: e.to_string(),
        })?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Vec<std::result::Result<f64, usize>> = record
            .iter()
            .enumerate()
            .map(|(c, cell)| cell.parse::<f64>().map_err(|_| c))
            .collect();
        if r == 0 && parsed.iter().any(|p| p.is_err()) {
            continue;
        }
        let mut row = Vec::with_capacity(parsed.len());
        for (c, p) in parsed.into_iter().enumerate() {
            match p {
                Ok(v) => row.push(v),
                Err(_) => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        row: r + 1,
                        column: c + 1,
                        message: format!("`{}` is not a number", &record[c]),
                    })
                }
            }
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row: r + 1,
                    column: row.len().min(w) + 1,
                    message: format!("row has {} values, expected {w}", row.len()),
                })
            }
            _ => {}
        }
        rows.push(row);
    }
    let w = width.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        row: 1,
        column: 1,
        message: "no numeric rows".to_string(),
    })?;
    let n = rows.len();
    Ok(Array2::from_shape_vec((n, w), rows.into_iter().flatten().collect()).expect("rectangular"))
}

/// Reads one integer label per line.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let mut labels = Vec::new();
    for (r, record) in reader(path)?.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row: r + 1,
            column: 0,
            message: e.to_string(),
        })?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if record.len() != 1 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: r + 1,
                column: 2,
                message: format!("expected one label per row, found {} cells", record.len()),
            });
        }
        match record[0].parse::<usize>() {
            Ok(v) => labels.push(v),
            Err(_) if r == 0 => continue,
            Err(_) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row: r + 1,
                    column: 1,
                    message: format!("`{}` is not a non-negative integer", &record[0]),
                })
            }
        }
    }
    Ok(labels)
}

/// Loads curves (one per row), an optional single-row time file and an
/// optional single-column label file. Without a time file the grid is
/// 0, 1, ..., m-1.
pub fn load_csv(curves: &Path, time: Option<&Path>, labels: Option<&Path>) -> Result<Dataset> {
    let x = read_matrix(curves)?;
    let m = x.ncols();
    let grid = match time {
        Some(p) => {
            let t = read_matrix(p)?;
            let points: Vec<f64> = if t.nrows() == 1 {
                t.row(0).to_vec()
            } else if t.ncols() == 1 {
                t.column(0).to_vec()
            } else {
                return Err(Error::Parse {
                    path: p.to_path_buf(),
                    row: 2,
                    column: 1,
                    message: "time file must be a single row or column".to_string(),
                });
            };
            if points.len() != m {
                return Err(Error::Parse {
                    path: p.to_path_buf(),
                    row: 1,
                    column: points.len().min(m) + 1,
                    message: format!("{} time points for curves of length {m}", points.len()),
                });
            }
            TimeGrid::new(points)?
        }
        None => TimeGrid::unit(m)?,
    };
    let data = Dataset::new(x, grid)?;
    match labels {
        Some(p) => {
            let l = read_labels(p)?;
            if l.len() != data.n() {
                return Err(Error::Parse {
                    path: p.to_path_buf(),
                    row: l.len().min(data.n()) + 1,
                    column: 1,
                    message: format!("{} labels for {} curves", l.len(), data.n()),
                });
            }
            data.with_labels(l)
        }
        None => Ok(data),
    }
}

fn fmt_row<T: ToString>(row: impl Iterator<Item = T>) -> String {
    row.map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Float rows with shortest round-trip formatting.
pub fn matrix_csv(x: &Array2<f64>) -> String {
    let mut s = String::new();
    for row in x.rows() {
        s.push_str(&fmt_row(row.iter()));
        s.push('\n');
    }
    s
}

pub fn int_matrix_csv(x: &Array2<usize>) -> String {
    let mut s = String::new();
    for row in x.rows() {
        s.push_str(&fmt_row(row.iter()));
        s.push('\n');
    }
    s
}

pub fn labels_csv(labels: &[usize]) -> String {
    labels.iter().map(|l| format!("{l}\n")).collect()
}

pub fn save_csv(path: &Path, x: &Array2<f64>) -> Result<()> {
    write_atomic(path, matrix_csv(x).as_bytes())
}

/// Writes curves.csv, time.csv and, when known, truth.csv and states.csv.
pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let p = dir.join(name);
        write_atomic(&p, body.as_bytes())?;
        written.push(p);
        Ok(())
    };
    put("curves.csv", matrix_csv(&data.curves))?;
    put("time.csv", format!("{}\n", fmt_row(data.grid.points().iter())))?;
    if let Some(l) = &data.truth_labels {
        put("truth.csv", labels_csv(l))?;
    }
    if let Some(s) = &data.truth_states {
        put("states.csv", int_matrix_csv(s))?;
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterParamsFile {
    pub pi: Vec<f64>,
    #[serde(rename = "A")]
    pub trans: Vec<Vec<f64>>,
    pub betas: Vec<Vec<f64>>,
    pub sigma2: Vec<f64>,
}

/// JSON layout of fitted parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub w: Vec<f64>,
    pub clusters: Vec<ClusterParamsFile>,
    pub degree: usize,
    pub constraint: Constraint,
    pub time_rescale: TimeRescale,
}

impl ParamsFile {
    pub fn from_params(params: &ModelParams, rescale: TimeRescale) -> Self {
        let constraint = params.chains.first().map_or(Constraint::LeftRight, |c| c.constraint);
        Self {
            w: params.weights.clone(),
            clusters: (0..params.clusters())
                .map(|g| ClusterParamsFile {
                    pi: params.chains[g].pi.clone(),
                    trans: params.chains[g].trans.rows().into_iter().map(|r| r.to_vec()).collect(),
                    betas: params.betas[g].clone(),
                    sigma2: params.sigma2[g].clone(),
                })
                .collect(),
            degree: params.degree(),
            constraint,
            time_rescale: rescale,
        }
    }

    pub fn from_regmix(fit: &RegMixFit, rescale: TimeRescale) -> Self {
        Self {
            w: fit.params.alpha.clone(),
            clusters: (0..fit.params.alpha.len())
                .map(|g| ClusterParamsFile {
                    pi: vec![1.0],
                    trans: vec![vec![1.0]],
                    betas: vec![fit.params.betas[g].clone()],
                    sigma2: vec![fit.params.sigma2[g]],
                })
                .collect(),
            degree: fit.params.betas[0].len() - 1,
            constraint: Constraint::LeftRight,
            time_rescale: rescale,
        }
    }

    pub fn to_params(&self) -> Result<ModelParams> {
        let mut chains = Vec::with_capacity(self.clusters.len());
        for c in &self.clusters {
            let k = c.pi.len();
            if c.trans.len() != k || c.trans.iter().any(|r| r.len() != k) {
                return Err(Error::invalid("transition matrix shape does not match pi"));
            }
            let trans = Array2::from_shape_vec((k, k), c.trans.iter().flatten().copied().collect())
                .expect("checked shape");
            chains.push(ChainParams::new(c.pi.clone(), trans, self.constraint)?);
        }
        let params = ModelParams {
            weights: self.w.clone(),
            chains,
            betas: self.clusters.iter().map(|c| c.betas.clone()).collect(),
            sigma2: self.clusters.iter().map(|c| c.sigma2.clone()).collect(),
        };
        params.validate()?;
        if params.degree() != self.degree {
            return Err(Error::invalid("coefficient length does not match degree"));
        }
        Ok(params)
    }
}

/// Summary written to report.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub model: String,
    pub clusters: usize,
    pub regimes: usize,
    pub degree: usize,
    pub loglik: Option<f64>,
    pub bic: Option<f64>,
    pub nu: Option<usize>,
    pub nu_exact: Option<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub degeneracy_events: usize,
    pub misclassification_rate: Option<f64>,
    pub intra_cluster_inertia: Option<f64>,
}

/// Everything `save_outputs` writes, independent of the fitted model.
#[derive(Debug, Clone)]
pub struct OutputBundle {
    pub labels: Vec<usize>,
    pub tau: Array2<f64>,
    pub mean_curves: Array2<f64>,
    pub segmentation: Array2<usize>,
    pub params: serde_json::Value,
    pub loglik_trace: Vec<f64>,
    pub report: Report,
}

fn quality(data: &Dataset, labels: &[usize], means: &Array2<f64>) -> (Option<f64>, Option<f64>) {
    let rate = data
        .truth_labels
        .as_ref()
        .and_then(|t| misclassification_rate(labels, t).ok());
    let inertia = intra_cluster_inertia(data, labels, means).ok().filter(|v| v.is_finite());
    (rate, inertia)
}

impl OutputBundle {
    pub fn from_fit(model: &str, fit: &FitResult, data: &Dataset) -> Result<Self> {
        let (rate, inertia) = quality(data, &fit.labels, &fit.mean_curves);
        Ok(Self {
            labels: fit.labels.clone(),
            tau: fit.posteriors.tau.clone(),
            mean_curves: fit.mean_curves.clone(),
            segmentation: fit.segmentations.clone(),
            params: serde_json::to_value(ParamsFile::from_params(&fit.params, fit.rescale))?,
            loglik_trace: fit.loglik_trace.clone(),
            report: Report {
                model: model.to_string(),
                clusters: fit.params.clusters(),
                regimes: fit.params.regimes(),
                degree: fit.params.degree(),
                loglik: Some(fit.loglik),
                bic: Some(fit.bic),
                nu: Some(fit.nu),
                nu_exact: Some(fit.nu_exact),
                iterations: fit.iterations,
                converged: fit.converged,
                degeneracy_events: fit.degeneracy_events,
                misclassification_rate: rate,
                intra_cluster_inertia: inertia,
            },
        })
    }

    pub fn from_regmix(fit: &RegMixFit, data: &Dataset) -> Result<Self> {
        let (rate, inertia) = quality(data, &fit.labels, &fit.mean_curves);
        let rescale = data.grid.rescale();
        Ok(Self {
            labels: fit.labels.clone(),
            tau: fit.tau.clone(),
            mean_curves: fit.mean_curves.clone(),
            segmentation: Array2::zeros((data.n(), data.m())),
            params: serde_json::to_value(ParamsFile::from_regmix(fit, rescale))?,
            loglik_trace: fit.loglik_trace.clone(),
            report: Report {
                model: "mixreg".to_string(),
                clusters: fit.params.alpha.len(),
                regimes: 1,
                degree: fit.params.betas[0].len() - 1,
                loglik: Some(fit.loglik),
                bic: Some(fit.bic),
                nu: Some(fit.nu),
                nu_exact: Some(fit.nu),
                iterations: fit.iterations,
                converged: fit.converged,
                degeneracy_events: fit.degeneracy_events,
                misclassification_rate: rate,
                intra_cluster_inertia: inertia,
            },
        })
    }

    pub fn from_kmeans(fit: &KMeansResult, data: &Dataset) -> Result<Self> {
        let g = fit.centroids.nrows();
        let (rate, inertia) = quality(data, &fit.labels, &fit.centroids);
        let mut tau = Array2::zeros((data.n(), g));
        for (i, &l) in fit.labels.iter().enumerate() {
            tau[[i, l]] = 1.0;
        }
        let sizes: Vec<f64> = (0..g)
            .map(|c| fit.labels.iter().filter(|&&l| l == c).count() as f64 / data.n() as f64)
            .collect();
        let params = serde_json::json!({
            "w": sizes,
            "centroids": fit.centroids.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
        });
        Ok(Self {
            labels: fit.labels.clone(),
            tau,
            mean_curves: fit.centroids.clone(),
            segmentation: Array2::zeros((data.n(), data.m())),
            params,
            loglik_trace: fit.inertia_trace.clone(),
            report: Report {
                model: "kmeans".to_string(),
                clusters: g,
                regimes: 1,
                degree: 0,
                loglik: None,
                bic: None,
                nu: None,
                nu_exact: None,
                iterations: fit.iterations,
                converged: true,
                degeneracy_events: 0,
                misclassification_rate: rate,
                intra_cluster_inertia: inertia,
            },
        })
    }
}

/// Names of the files written by [`save_outputs`].
pub const OUTPUT_FILES: [&str; 7] = [
    "labels.csv",
    "means.csv",
    "tau.csv",
    "segmentation.csv",
    "params.json",
    "loglik.csv",
    "report.json",
];

pub fn save_outputs(bundle: &OutputBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bodies = [
        labels_csv(&bundle.labels),
        matrix_csv(&bundle.mean_curves),
        matrix_csv(&bundle.tau),
        int_matrix_csv(&bundle.segmentation),
        serde_json::to_string_pretty(&bundle.params)? + "\n",
        bundle.loglik_trace.iter().map(|v| format!("{v}\n")).collect(),
        serde_json::to_string_pretty(&bundle.report)? + "\n",
    ];
    let mut written = Vec::with_capacity(bodies.len());
    for (name, body) in OUTPUT_FILES.iter().zip(bodies) {
        let p = dir.join(name);
        write_atomic(&p, body.as_bytes())?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn reads_plain_and_headed_tables() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "1,2,3\n4,5,6\n").unwrap();
        assert_eq!(read_matrix(&p).unwrap(), array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        fs::write(&p, "a,b,c\n1,2,3\n").unwrap();
        assert_eq!(read_matrix(&p).unwrap(), array![[1.0, 2.0, 3.0]]);
    }

    #[test]
    fn ragged_and_bad_cells_name_their_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "1,2,3\n4,5\n").unwrap();
        match read_matrix(&p).unwrap_err() {
            Error::Parse { row, .. } => assert_eq!(row, 2),
            e => panic!("unexpected {e}"),
        }
        fs::write(&p, "1,2,3\n4,x,6\n").unwrap();
        match read_matrix(&p).unwrap_err() {
            Error::Parse { row, column, .. } => assert_eq!((row, column), (2, 2)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn load_with_time_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let c = dir.path().join("c.csv");
        let t = dir.path().join("t.csv");
        let l = dir.path().join("l.csv");
        fs::write(&c, "1,2,3\n4,5,6\n").unwrap();
        fs::write(&t, "0.5,1.0,2.0\n").unwrap();
        fs::write(&l, "0\n1\n").unwrap();
        let d = load_csv(&c, Some(&t), Some(&l)).unwrap();
        assert_eq!((d.n(), d.m()), (2, 3));
        assert_eq!(d.grid.points(), &[0.5, 1.0, 2.0]);
        assert_eq!(d.truth_labels, Some(vec![0, 1]));
        let d = load_csv(&c, None, None).unwrap();
        assert_eq!(d.grid.points(), &[0.0, 1.0, 2.0]);
        fs::write(&l, "0\n").unwrap();
        assert!(load_csv(&c, None, Some(&l)).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        let x = array![[0.1 + 0.2, 1e-300, -7.25], [std::f64::consts::PI, 1.0 / 3.0, 12345678.9]];
        save_csv(&p, &x).unwrap();
        assert_eq!(read_matrix(&p).unwrap(), x);
    }
}
