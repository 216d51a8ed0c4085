//! UCR-format dataset loading, z-normalization, and split merging.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};

/// Which rows of a UCR archive folder to load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    /// Train and test rows concatenated (train first). The usual protocol for
    /// whole-archive clustering.
    Merged,
    /// Test rows only.
    Test,
}

/// In-memory dataset: N series of equal length T, with optional labels
/// remapped to `0..n_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub values: Array2<f64>,
    pub labels: Option<Vec<usize>>,
    pub name: String,
    pub n_classes: usize,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn t(&self) -> usize {
        self.values.ncols()
    }
}

struct RawSplit {
    labels: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

fn parse_tsv(path: &Path) -> Result<RawSplit> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut expected: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let label_tok = fields.next().unwrap_or("");
        let label: f64 = label_tok.trim().parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: format!("non-numeric label {label_tok:?}"),
        })?;
        if label.is_nan() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: "missing value (NaN) in label column".into(),
            });
        }
        let mut row = Vec::new();
        for tok in fields {
            let tok = tok.trim();
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("non-numeric cell {tok:?}"),
            })?;
            if v.is_nan() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: "missing value (NaN) rejected".into(),
                });
            }
            row.push(v);
        }
        match expected {
            None => {
                if row.len() < 2 {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: lineno + 1,
                        msg: format!("series too short: length {}", row.len()),
                    });
                }
                expected = Some(row.len());
            }
            Some(e) if e != row.len() => {
                return Err(Error::RaggedRows {
                    row: rows.len(),
                    got: row.len(),
                    expected: e,
                });
            }
            _ => {}
        }
        labels.push(label);
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "empty file".into(),
        });
    }
    Ok(RawSplit { labels, rows })
}

fn assemble(name: &str, splits: Vec<RawSplit>) -> Result<Dataset> {
    let t = splits[0].rows[0].len();
    for s in &splits {
        if s.rows[0].len() != t {
            return Err(Error::LengthMismatch(t, s.rows[0].len()));
        }
    }
    let mut raw_labels = Vec::new();
    let mut rows = Vec::new();
    for s in splits {
        raw_labels.extend(s.labels);
        rows.extend(s.rows);
    }
    // remap label tokens to contiguous 0..K-1 in ascending numeric order
    let mut distinct: Vec<f64> = raw_labels.clone();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::TooFewLabels(distinct.len()));
    }
    let labels: Vec<usize> = raw_labels
        .iter()
        .map(|l| distinct.iter().position(|d| d == l).unwrap())
        .collect();

    let n = rows.len();
    let mut values = Array2::<f64>::zeros((n, t));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            values[[i, j]] = v;
        }
    }
    Ok(Dataset {
        values,
        labels: Some(labels),
        name: name.to_string(),
        n_classes: distinct.len(),
    })
}

/// Load one split selection from `data_root/name/name_{TRAIN,TEST}.tsv`.
pub fn load_ucr_split(data_root: &Path, name: &str, split: Split) -> Result<Dataset> {
    let dir = data_root.join(name);
    let train: PathBuf = dir.join(format!("{name}_TRAIN.tsv"));
    let test: PathBuf = dir.join(format!("{name}_TEST.tsv"));
    let splits = match split {
        Split::Merged => vec![parse_tsv(&train)?, parse_tsv(&test)?],
        Split::Test => vec![parse_tsv(&test)?],
    };
    assemble(name, splits)
}

/// Load the merged train+test dataset for `name`, labels remapped to `0..K-1`.
pub fn load_ucr_dataset(data_root: &Path, name: &str) -> Result<Dataset> {
    load_ucr_split(data_root, name, Split::Merged)
}

/// Per-row z-normalization with the population standard deviation. Rows with
/// std below 1e-8 become all zeros.
pub fn znormalize(d: &Dataset) -> Dataset {
    let t = d.t();
    let mut values = d.values.clone();
    for mut row in values.rows_mut() {
        let mean = row.sum() / t as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
        let std = var.sqrt();
        if std < 1e-8 {
            row.fill(0.0);
        } else {
            row.mapv_inplace(|v| (v - mean) / std);
        }
    }
    Dataset {
        values,
        labels: d.labels.clone(),
        name: d.name.clone(),
        n_classes: d.n_classes,
    }
}

/// Concatenate two datasets row-wise (train rows then test rows).
pub fn merge_splits(train: &Dataset, test: &Dataset) -> Result<Dataset> {
    if train.t() != test.t() {
        return Err(Error::LengthMismatch(train.t(), test.t()));
    }
    let labels = match (&train.labels, &test.labels) {
        (Some(a), Some(b)) => {
            if train.n_classes != test.n_classes {
                return Err(Error::TooFewLabels(train.n_classes.min(test.n_classes)));
            }
            let mut l = a.clone();
            l.extend_from_slice(b);
            Some(l)
        }
        (None, None) => None,
        _ => {
            return Err(Error::Config(
                "cannot merge labeled with unlabeled dataset".into(),
            ))
        }
    };
    let n = train.n() + test.n();
    let mut values = Array2::<f64>::zeros((n, train.t()));
    values
        .slice_mut(ndarray::s![..train.n(), ..])
        .assign(&train.values);
    values
        .slice_mut(ndarray::s![train.n().., ..])
        .assign(&test.values);
    Ok(Dataset {
        values,
        labels,
        name: train.name.clone(),
        n_classes: train.n_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_archive(dir: &Path, name: &str, train: &str, test: &str) {
        let d = dir.join(name);
        fs::create_dir_all(&d).unwrap();
        let mut f = fs::File::create(d.join(format!("{name}_TRAIN.tsv"))).unwrap();
        f.write_all(train.as_bytes()).unwrap();
        let mut f = fs::File::create(d.join(format!("{name}_TEST.tsv"))).unwrap();
        f.write_all(test.as_bytes()).unwrap();
    }

    #[test]
    fn loads_minimal_archive() {
        let dir = tempfile::tempdir().unwrap();
        write_archive(dir.path(), "Toy", "1\t0.0\t1.0\n2\t1.0\t0.0\n", "1\t0.5\t0.5\n");
        let d = load_ucr_dataset(dir.path(), "Toy").unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.t(), 2);
        assert_eq!(d.n_classes, 2);
        assert_eq!(d.labels.as_deref(), Some(&[0, 1, 0][..]));

        let test_only = load_ucr_split(dir.path(), "Toy", Split::Test);
        // test split alone has one distinct label
        assert!(matches!(test_only, Err(Error::TooFewLabels(1))));
    }

    #[test]
    fn ragged_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_archive(
            dir.path(),
            "Bad",
            "1\t0.0\t1.0\t2.0\n2\t1.0\t0.0\n",
            "1\t0.0\t1.0\t2.0\n",
        );
        let err = load_ucr_dataset(dir.path(), "Bad").unwrap_err();
        assert!(matches!(err, Error::RaggedRows { .. }), "{err}");
    }

    #[test]
    fn nan_and_garbage_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_archive(dir.path(), "Nan", "1\t0.0\tNaN\n2\t1.0\t0.0\n", "1\t0.0\t1.0\n");
        assert!(matches!(
            load_ucr_dataset(dir.path(), "Nan").unwrap_err(),
            Error::Parse { .. }
        ));
        write_archive(dir.path(), "Gar", "1\t0.0\tfoo\n", "1\t0.0\t1.0\n");
        assert!(matches!(
            load_ucr_dataset(dir.path(), "Gar").unwrap_err(),
            Error::Parse { .. }
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_ucr_dataset(dir.path(), "Nope").unwrap_err(),
            Error::Io { .. }
        ));
    }

    #[test]
    fn znormalize_hand_case() {
        let d = Dataset {
            values: ndarray::arr2(&[[1.0, 2.0, 3.0], [5.0, 5.0, 5.0]]),
            labels: None,
            name: "z".into(),
            n_classes: 0,
        };
        let z = znormalize(&d);
        // population std of [1,2,3] is sqrt(2/3)
        let want = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((z.values[[0, 0]] + want).abs() < 1e-4);
        assert!(z.values[[0, 1]].abs() < 1e-12);
        assert!((z.values[[0, 2]] - want).abs() < 1e-4);
        assert!((z.values[[0, 0]] + 1.2247).abs() < 1e-4);
        // constant row becomes zeros
        assert!(z.values.row(1).iter().all(|&v| v == 0.0));
        // idempotence on already-normalized rows
        let z2 = znormalize(&z);
        for (a, b) in z.values.iter().zip(z2.values.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        // each row has mean ~0 and std ~1 (non-constant rows)
        let row = z.values.row(0);
        let mean = row.sum() / 3.0;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-6);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn merge_conserves_rows_and_checks_t() {
        let a = Dataset {
            values: Array2::zeros((10, 5)),
            labels: Some(vec![0; 10]),
            name: "a".into(),
            n_classes: 2,
        };
        let b = Dataset {
            values: Array2::ones((5, 5)),
            labels: Some(vec![1; 5]),
            name: "a".into(),
            n_classes: 2,
        };
        let m = merge_splits(&a, &b).unwrap();
        assert_eq!(m.n(), 15);
        assert_eq!(m.n_classes, 2);
        assert_eq!(m.values[[12, 0]], 1.0);

        let c = Dataset {
            values: Array2::zeros((2, 6)),
            labels: Some(vec![0, 1]),
            name: "a".into(),
            n_classes: 2,
        };
        assert!(matches!(
            merge_splits(&a, &c).unwrap_err(),
            Error::LengthMismatch(5, 6)
        ));
    }

    #[test]
    fn load_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        write_archive(
            dir.path(),
            "Det",
            "1\t0.25\t-1.5\t3.0\n3\t1.0\t0.0\t2.0\n",
            "1\t0.5\t0.5\t0.125\n",
        );
        let a = znormalize(&load_ucr_dataset(dir.path(), "Det").unwrap());
        let b = znormalize(&load_ucr_dataset(dir.path(), "Det").unwrap());
        assert_eq!(a, b);
    }
}
