//! Time-series datasets on disk and their per-group representative series.
//!
//! A dataset directory holds `meta.json` plus `X_train.csv` / `X_test.csv`.
//! Each CSV row is one sample flattened time-major (`t0_f0, t0_f1, ...`)
//! followed by a `label` column.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classification => "classification",
            Task::Regression => "regression",
        })
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("{file}: row {row} has {found} cells, expected {expected} (T*d + 1)")]
    ShapeMismatch {
        file: String,
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("{file}: row {row} label {label} outside [0, {n_classes})")]
    LabelOutOfRange {
        file: String,
        row: usize,
        label: i64,
        n_classes: usize,
    },
    #[error("{file}: row {row}: {msg}")]
    Parse { file: String, row: usize, msg: String },
    #[error("invalid meta.json: {0}")]
    InvalidMeta(String),
    #[error("group {0} has no training members")]
    EmptyGroup(String),
    #[error("n_bins must be at least 1")]
    InvalidBins,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Targets of one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "values")]
pub enum Labels {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(v) => v.len(),
            Labels::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One split: samples stored time-major, `x[i][t * d + f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x: Vec<Vec<f64>>,
    pub y: Labels,
}

impl Split {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    pub name: String,
    pub task: Task,
    pub seq_length: usize,
    pub n_features: usize,
    pub train: Split,
    pub test: Split,
    pub class_names: Option<Vec<String>>,
    pub description: String,
    pub feature_descriptions: Vec<String>,
}

impl TimeSeriesDataset {
    pub fn n_classes(&self) -> Option<usize> {
        self.class_names.as_ref().map(Vec::len)
    }

    /// Output width of the model head: class count, or 1 for regression.
    pub fn output_units(&self) -> usize {
        match self.task {
            Task::Classification => self.n_classes().unwrap_or(1),
            Task::Regression => 1,
        }
    }

    pub fn value(&self, sample: &[f64], t: usize, f: usize) -> f64 {
        sample[t * self.n_features + f]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    name: String,
    task: Task,
    seq_length: usize,
    n_features: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_names: Option<Vec<String>>,
    #[serde(default)]
    description: String,
    #[serde(default)]
    feature_descriptions: Vec<String>,
}

pub const META_FILE: &str = "meta.json";
pub const TRAIN_FILE: &str = "X_train.csv";
pub const TEST_FILE: &str = "X_test.csv";

/// Expected CSV header for a `T x d` layout.
pub fn csv_header(seq_length: usize, n_features: usize) -> Vec<String> {
    let mut cols = Vec::with_capacity(seq_length * n_features + 1);
    for t in 0..seq_length {
        for f in 0..n_features {
            cols.push(format!("t{t}_f{f}"));
        }
    }
    cols.push("label".to_string());
    cols
}

/// Loads `<root>/<name>/`. Falls back to `root` itself when it already holds
/// a `meta.json`.
pub fn load_dataset(root: &Path, name: &str) -> Result<TimeSeriesDataset, DatasetError> {
    let nested = root.join(name);
    let dir = if nested.join(META_FILE).is_file() {
        nested
    } else if root.join(META_FILE).is_file() {
        root.to_path_buf()
    } else {
        return Err(DatasetError::MissingFile(nested.join(META_FILE)));
    };

    let meta_text = fs::read_to_string(dir.join(META_FILE))?;
    let meta: Meta =
        serde_json::from_str(&meta_text).map_err(|e| DatasetError::InvalidMeta(e.to_string()))?;
    if meta.seq_length == 0 || meta.n_features == 0 {
        return Err(DatasetError::InvalidMeta(
            "seq_length and n_features must be >= 1".into(),
        ));
    }
    let n_classes = match (meta.task, &meta.class_names) {
        (Task::Classification, Some(names)) if !names.is_empty() => Some(names.len()),
        (Task::Classification, _) => {
            return Err(DatasetError::InvalidMeta(
                "classification datasets need class_names".into(),
            ))
        }
        (Task::Regression, Some(_)) => {
            return Err(DatasetError::InvalidMeta(
                "regression datasets must not define class_names".into(),
            ))
        }
        (Task::Regression, None) => None,
    };
    let feature_descriptions = if meta.feature_descriptions.is_empty() {
        vec![String::new(); meta.n_features]
    } else if meta.feature_descriptions.len() == meta.n_features {
        meta.feature_descriptions.clone()
    } else {
        return Err(DatasetError::InvalidMeta(format!(
            "{} feature descriptions for {} features",
            meta.feature_descriptions.len(),
            meta.n_features
        )));
    };

    let layout = Layout {
        seq_length: meta.seq_length,
        n_features: meta.n_features,
        n_classes,
    };
    let train = read_split(&dir.join(TRAIN_FILE), &layout)?;
    let test = read_split(&dir.join(TEST_FILE), &layout)?;

    Ok(TimeSeriesDataset {
        name: meta.name,
        task: meta.task,
        seq_length: meta.seq_length,
        n_features: meta.n_features,
        train,
        test,
        class_names: meta.class_names,
        description: meta.description,
        feature_descriptions,
    })
}

struct Layout {
    seq_length: usize,
    n_features: usize,
    n_classes: Option<usize>,
}

fn read_split(path: &Path, layout: &Layout) -> Result<Split, DatasetError> {
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let file = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let width = layout.seq_length * layout.n_features + 1;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;

    let header = reader.headers()?.clone();
    if header.len() != width {
        return Err(DatasetError::ShapeMismatch {
            file,
            row: 0,
            expected: width,
            found: header.len(),
        });
    }
    let expected = csv_header(layout.seq_length, layout.n_features);
    if let Some((col, (got, want))) = header
        .iter()
        .zip(expected.iter())
        .enumerate()
        .find(|(_, (g, w))| g.trim() != w.as_str())
    {
        return Err(DatasetError::Parse {
            file,
            row: 0,
            msg: format!("header column {col} is {got:?}, expected {want:?}"),
        });
    }

    let mut xs = Vec::new();
    let mut classes = Vec::new();
    let mut values = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record?;
        if record.len() != width {
            return Err(DatasetError::ShapeMismatch {
                file,
                row,
                expected: width,
                found: record.len(),
            });
        }
        let mut cells: Vec<Option<f64>> = Vec::with_capacity(width - 1);
        for (col, cell) in record.iter().take(width - 1).enumerate() {
            let cell = cell.trim();
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                cells.push(None);
            } else {
                let v: f64 = cell.parse().map_err(|_| DatasetError::Parse {
                    file: file.clone(),
                    row,
                    msg: format!("column {col}: {cell:?} is not a number"),
                })?;
                cells.push(v.is_finite().then_some(v));
            }
        }
        xs.push(impute(&cells, layout.seq_length, layout.n_features));

        let label = record.get(width - 1).unwrap_or("").trim();
        match layout.n_classes {
            Some(n_classes) => {
                let parsed: f64 = label.parse().map_err(|_| DatasetError::Parse {
                    file: file.clone(),
                    row,
                    msg: format!("label {label:?} is not a class id"),
                })?;
                if parsed.fract() != 0.0 || !parsed.is_finite() {
                    return Err(DatasetError::Parse {
                        file,
                        row,
                        msg: format!("label {label:?} is not an integer"),
                    });
                }
                let id = parsed as i64;
                if id < 0 || id as usize >= n_classes {
                    return Err(DatasetError::LabelOutOfRange {
                        file,
                        row,
                        label: id,
                        n_classes,
                    });
                }
                classes.push(id as usize);
            }
            None => {
                let v: f64 = label.parse().map_err(|_| DatasetError::Parse {
                    file: file.clone(),
                    row,
                    msg: format!("label {label:?} is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(DatasetError::Parse {
                        file,
                        row,
                        msg: "regression target must be finite".into(),
                    });
                }
                values.push(v);
            }
        }
    }

    let y = if layout.n_classes.is_some() {
        Labels::Classes(classes)
    } else {
        Labels::Values(values)
    };
    Ok(Split { x: xs, y })
}

/// Forward-fill along time per feature, then backward-fill, then zero.
fn impute(cells: &[Option<f64>], seq_length: usize, n_features: usize) -> Vec<f64> {
    let mut out = vec![0.0; cells.len()];
    for f in 0..n_features {
        let mut filled: Vec<Option<f64>> = (0..seq_length).map(|t| cells[t * n_features + f]).collect();
        let mut last = None;
        for v in filled.iter_mut() {
            match v {
                Some(x) => last = Some(*x),
                None => *v = last,
            }
        }
        let mut next = None;
        for v in filled.iter_mut().rev() {
            match v {
                Some(x) => next = Some(*x),
                None => *v = next,
            }
        }
        for (t, v) in filled.into_iter().enumerate() {
            out[t * n_features + f] = v.unwrap_or(0.0);
        }
    }
    out
}

/// Writes a dataset in the on-disk layout `load_dataset` reads.
pub fn save_dataset(dir: &Path, ds: &TimeSeriesDataset) -> Result<(), DatasetError> {
    fs::create_dir_all(dir)?;
    let meta = Meta {
        name: ds.name.clone(),
        task: ds.task,
        seq_length: ds.seq_length,
        n_features: ds.n_features,
        class_names: ds.class_names.clone(),
        description: ds.description.clone(),
        feature_descriptions: ds.feature_descriptions.clone(),
    };
    let meta_json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(dir.join(META_FILE), meta_json + "\n")?;
    for (file, split) in [(TRAIN_FILE, &ds.train), (TEST_FILE, &ds.test)] {
        let mut w = csv::Writer::from_path(dir.join(file))?;
        w.write_record(csv_header(ds.seq_length, ds.n_features))?;
        for (i, sample) in split.x.iter().enumerate() {
            let mut row: Vec<String> = sample.iter().map(|v| v.to_string()).collect();
            row.push(match &split.y {
                Labels::Classes(c) => c[i].to_string(),
                Labels::Values(v) => v[i].to_string(),
            });
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Timestamp-wise mean and population standard deviation of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeSeries {
    pub group_label: String,
    pub seq_length: usize,
    pub n_features: usize,
    /// Time-major `[t * d + f]`.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub support_count: usize,
}

impl RepresentativeSeries {
    pub fn mean_at(&self, t: usize, f: usize) -> f64 {
        self.mean[t * self.n_features + f]
    }

    pub fn std_at(&self, t: usize, f: usize) -> f64 {
        self.std[t * self.n_features + f]
    }

    /// Mean trace of one feature over time.
    pub fn feature_mean(&self, f: usize) -> Vec<f64> {
        (0..self.seq_length).map(|t| self.mean_at(t, f)).collect()
    }

    pub fn feature_std(&self, f: usize) -> Vec<f64> {
        (0..self.seq_length).map(|t| self.std_at(t, f)).collect()
    }
}

pub const DEFAULT_REGRESSION_BINS: usize = 4;

/// One representative series per class (classification) or per
/// equal-frequency range of the target (regression).
pub fn representative_series(
    ds: &TimeSeriesDataset,
    n_bins: usize,
) -> Result<Vec<RepresentativeSeries>, DatasetError> {
    let groups: Vec<(String, Vec<usize>)> = match &ds.train.y {
        Labels::Classes(ys) => {
            let names = ds.class_names.clone().unwrap_or_default();
            names
                .into_iter()
                .enumerate()
                .map(|(class, name)| {
                    let members = ys
                        .iter()
                        .enumerate()
                        .filter(|(_, &y)| y == class)
                        .map(|(i, _)| i)
                        .collect();
                    (name, members)
                })
                .collect()
        }
        Labels::Values(ys) => {
            if n_bins == 0 {
                return Err(DatasetError::InvalidBins);
            }
            quantile_bins(ys, n_bins)
                .into_iter()
                .map(|bin| (bin.label, bin.members))
                .collect()
        }
    };

    groups
        .into_iter()
        .map(|(label, members)| {
            if members.is_empty() {
                return Err(DatasetError::EmptyGroup(label));
            }
            Ok(aggregate(ds, label, &members))
        })
        .collect()
}

fn aggregate(ds: &TimeSeriesDataset, label: String, members: &[usize]) -> RepresentativeSeries {
    let width = ds.seq_length * ds.n_features;
    let n = members.len() as f64;
    let mut mean = vec![0.0; width];
    for &m in members {
        for (acc, v) in mean.iter_mut().zip(&ds.train.x[m]) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    let mut var = vec![0.0; width];
    for &m in members {
        for ((acc, v), mu) in var.iter_mut().zip(&ds.train.x[m]).zip(&mean) {
            let d = v - mu;
            *acc += d * d;
        }
    }
    let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
    RepresentativeSeries {
        group_label: label,
        seq_length: ds.seq_length,
        n_features: ds.n_features,
        mean,
        std,
        support_count: members.len(),
    }
}

/// A regression target bin.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBin {
    pub label: String,
    pub lo: f64,
    pub hi: f64,
    pub members: Vec<usize>,
}

/// Equal-frequency bins over `ys`. Cut points sit at the sorted positions
/// `floor(i * N / k)`; equal values never straddle a boundary, so ties can
/// leave fewer than `k` bins. Ranges are half-open except the last.
pub fn quantile_bins(ys: &[f64], n_bins: usize) -> Vec<TargetBin> {
    if ys.is_empty() || n_bins == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..ys.len()).collect();
    order.sort_by(|&a, &b| ys[a].total_cmp(&ys[b]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| ys[i]).collect();
    let n = sorted.len();

    let mut bounds: Vec<usize> = (0..n_bins)
        .map(|i| {
            let cut = sorted[i * n / n_bins];
            sorted.partition_point(|&v| v < cut)
        })
        .collect();
    bounds.push(n);
    bounds.dedup();

    let last = bounds.len() - 2;
    bounds
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let lo = sorted[w[0]];
            let (hi, label) = if i == last {
                let hi = sorted[n - 1];
                (hi, format!("[{lo},{hi}]"))
            } else {
                let hi = sorted[w[1]];
                (hi, format!("[{lo},{hi})"))
            };
            let mut members: Vec<usize> = order[w[0]..w[1]].to_vec();
            members.sort_unstable();
            TargetBin {
                label,
                lo,
                hi,
                members,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_fixture(dir: &Path, task: &str, classes: Option<&[&str]>, train: &str, test: &str) {
        let meta = serde_json::json!({
            "name": "tiny",
            "task": task,
            "seq_length": 3,
            "n_features": 1,
            "class_names": classes,
            "description": "tiny fixture",
            "feature_descriptions": ["signal"],
        });
        let mut meta = meta;
        if classes.is_none() {
            meta.as_object_mut().unwrap().remove("class_names");
        }
        fs::write(dir.join(META_FILE), meta.to_string()).unwrap();
        let header = "t0_f0,t1_f0,t2_f0,label\n";
        let mut f = fs::File::create(dir.join(TRAIN_FILE)).unwrap();
        write!(f, "{header}{train}").unwrap();
        let mut f = fs::File::create(dir.join(TEST_FILE)).unwrap();
        write!(f, "{header}{test}").unwrap();
    }

    #[test]
    fn loads_two_sample_fixture() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path(), "classification", Some(&["a", "b", "c"]), "1,2,3,0\n4,5,6,2\n", "1,1,1,1\n");
        let ds = load_dataset(tmp.path(), "tiny").unwrap();
        assert_eq!(ds.train.len(), 2);
        assert_eq!((ds.seq_length, ds.n_features), (3, 1));
        assert_eq!(ds.train.y, Labels::Classes(vec![0, 2]));
        assert_eq!(ds.output_units(), 3);
    }

    #[test]
    fn empty_cell_is_forward_filled() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path(), "classification", Some(&["a", "b"]), "1,,3,0\n,,7,1\n", "1,1,1,1\n");
        let ds = load_dataset(tmp.path(), "tiny").unwrap();
        assert_eq!(ds.train.x[0], vec![1.0, 1.0, 3.0]);
        // leading gap: backward fill
        assert_eq!(ds.train.x[1], vec![7.0, 7.0, 7.0]);
    }

    #[test]
    fn all_missing_feature_becomes_zero() {
        assert_eq!(impute(&[None, None], 2, 1), vec![0.0, 0.0]);
    }

    #[test]
    fn label_out_of_range() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path(), "classification", Some(&["a", "b", "c"]), "1,2,3,5\n", "1,1,1,1\n");
        let err = load_dataset(tmp.path(), "tiny").unwrap_err();
        assert!(matches!(err, DatasetError::LabelOutOfRange { label: 5, n_classes: 3, .. }));
    }

    #[test]
    fn short_row_is_shape_mismatch() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path(), "classification", Some(&["a"]), "1,2,0\n", "1,1,1,0\n");
        let err = load_dataset(tmp.path(), "tiny").unwrap_err();
        assert!(matches!(err, DatasetError::ShapeMismatch { expected: 4, found: 3, .. }));
    }

    #[test]
    fn missing_directory() {
        let tmp = tempfile::tempdir().unwrap();
        let err = load_dataset(&tmp.path().join("nope"), "tiny").unwrap_err();
        assert!(matches!(err, DatasetError::MissingFile(_)));
    }

    #[test]
    fn missing_test_split() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path(), "classification", Some(&["a"]), "1,2,3,0\n", "1,1,1,0\n");
        fs::remove_file(tmp.path().join(TEST_FILE)).unwrap();
        assert!(matches!(load_dataset(tmp.path(), "tiny"), Err(DatasetError::MissingFile(_))));
    }

    #[test]
    fn regression_with_class_names_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path(), "regression", Some(&["a"]), "1,2,3,0.5\n", "1,1,1,1\n");
        assert!(matches!(load_dataset(tmp.path(), "tiny"), Err(DatasetError::InvalidMeta(_))));
    }

    fn one_feature_dataset(series: &[[f64; 2]], y: Labels, classes: Option<Vec<String>>) -> TimeSeriesDataset {
        let task = if classes.is_some() { Task::Classification } else { Task::Regression };
        TimeSeriesDataset {
            name: "mem".into(),
            task,
            seq_length: 2,
            n_features: 1,
            train: Split { x: series.iter().map(|s| s.to_vec()).collect(), y: y.clone() },
            test: Split { x: vec![], y: match y { Labels::Classes(_) => Labels::Classes(vec![]), Labels::Values(_) => Labels::Values(vec![]) } },
            class_names: classes,
            description: String::new(),
            feature_descriptions: vec![String::new()],
        }
    }

    #[test]
    fn two_member_mean_and_std() {
        let ds = one_feature_dataset(&[[1.0, 3.0], [3.0, 5.0]], Labels::Classes(vec![0, 0]), Some(vec!["a".into()]));
        let reps = representative_series(&ds, 4).unwrap();
        assert_eq!(reps.len(), 1);
        assert_eq!(reps[0].mean, vec![2.0, 4.0]);
        assert_eq!(reps[0].std, vec![1.0, 1.0]);
        assert_eq!(reps[0].support_count, 2);
    }

    #[test]
    fn single_member_has_zero_std() {
        let ds = one_feature_dataset(&[[1.5, -2.0], [0.0, 0.0]], Labels::Classes(vec![0, 1]), Some(vec!["a".into(), "b".into()]));
        let reps = representative_series(&ds, 1).unwrap();
        assert_eq!(reps[0].mean, vec![1.5, -2.0]);
        assert_eq!(reps[0].std, vec![0.0, 0.0]);
    }

    #[test]
    fn empty_class_is_an_error() {
        let ds = one_feature_dataset(&[[1.0, 1.0]], Labels::Classes(vec![0]), Some(vec!["a".into(), "b".into()]));
        assert!(matches!(representative_series(&ds, 1), Err(DatasetError::EmptyGroup(g)) if g == "b"));
    }

    #[test]
    fn eight_targets_four_bins() {
        let ys: Vec<f64> = (1..=8).map(f64::from).collect();
        let bins = quantile_bins(&ys, 4);
        let labels: Vec<&str> = bins.iter().map(|b| b.label.as_str()).collect();
        assert_eq!(labels, ["[1,3)", "[3,5)", "[5,7)", "[7,8]"]);
        assert!(bins.iter().all(|b| b.members.len() == 2));
    }

    #[test]
    fn ties_are_not_split_across_bins() {
        let ys = [1.0, 1.0, 1.0, 1.0, 2.0, 3.0];
        let bins = quantile_bins(&ys, 3);
        assert_eq!(bins[0].members, vec![0, 1, 2, 3]);
        assert_eq!(bins.iter().map(|b| b.members.len()).sum::<usize>(), 6);
    }

    #[test]
    fn zero_bins_rejected() {
        let ds = one_feature_dataset(&[[1.0, 1.0]], Labels::Values(vec![1.0]), None);
        assert!(matches!(representative_series(&ds, 0), Err(DatasetError::InvalidBins)));
    }
}
