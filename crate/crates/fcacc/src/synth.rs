//! Synthetic dataset generators in UCR archive layout.
//!
//! `synthetic_control` follows the classic control-chart recipe (six pattern
//! classes over 60 timesteps); `shapelet_pair` embeds class-specific pulse
//! shapes in unit noise, in the spirit of the simulated shapelet benchmark.
//! Both can be written out as `name_{TRAIN,TEST}.tsv` archives so the loader,
//! the CLI, and the tests run against real files. When a real UCR folder is
//! present at the same path it is used untouched.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Six-class control-chart dataset: normal, cyclic, increasing/decreasing
/// trend, upward/downward shift. 100 series per class, 60 timesteps.
pub fn synthetic_control(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_per, t) = (100usize, 60usize);
    let n = n_per * 6;
    let mut values = Array2::<f64>::zeros((n, t));
    let mut labels = Vec::with_capacity(n);
    let (m, s) = (30.0, 2.0);
    for class in 0..6usize {
        for row in 0..n_per {
            let i = class * n_per + row;
            labels.push(class);
            let a = 10.0 + rng.random::<f64>() * 5.0;
            let period = 10.0 + rng.random::<f64>() * 5.0;
            let g = 0.2 + rng.random::<f64>() * 0.3;
            let kshift = 7.5 + rng.random::<f64>() * 12.5;
            let t3 = (t as f64 / 3.0 + rng.random::<f64>() * (t as f64 / 3.0)) as usize;
            for ti in 0..t {
                let r = rng.random::<f64>() * 6.0 - 3.0;
                let base = m + r * s;
                let tf = ti as f64;
                values[[i, ti]] = match class {
                    0 => base,
                    1 => base + a * (2.0 * std::f64::consts::PI * tf / period).sin(),
                    2 => base + g * tf,
                    3 => base - g * tf,
                    4 => base + if ti >= t3 { kshift } else { 0.0 },
                    _ => base - if ti >= t3 { kshift } else { 0.0 },
                };
            }
        }
    }
    Dataset {
        values,
        labels: Some(labels),
        name: "SyntheticControl".into(),
        n_classes: 6,
    }
}

fn embed_pulse(row: &mut [f64], start: usize, len: usize, amp: f64, square: bool) {
    for (off, slot) in row[start..start + len].iter_mut().enumerate() {
        let shape = if square {
            1.0
        } else {
            // triangle: ramp up then down
            let half = len as f64 / 2.0;
            1.0 - ((off as f64 - half).abs() / half)
        };
        *slot += amp * shape;
    }
}

/// Two-class dataset distinguished by embedded pulse shape (triangles vs
/// squares) at random positions in white noise. 100 series per class.
pub fn shapelet_pair(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_per, t) = (100usize, 500usize);
    let n = n_per * 2;
    let mut values = Array2::<f64>::zeros((n, t));
    let mut labels = Vec::with_capacity(n);
    for class in 0..2usize {
        for row in 0..n_per {
            let i = class * n_per + row;
            labels.push(class);
            let mut series = vec![0.0f64; t];
            for v in series.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *v = g;
            }
            let n_pulses = 4 + rng.random_range(0..3);
            for _ in 0..n_pulses {
                let len = 30 + rng.random_range(0..20);
                let start = rng.random_range(0..t - len);
                let amp = 2.0 + rng.random::<f64>();
                embed_pulse(&mut series, start, len, amp, class == 1);
            }
            for (ti, &v) in series.iter().enumerate() {
                values[[i, ti]] = v;
            }
        }
    }
    Dataset {
        values,
        labels: Some(labels),
        name: "ShapeletSim".into(),
        n_classes: 2,
    }
}

/// Write `root/name/name_{TRAIN,TEST}.tsv`, splitting each class so the
/// train file holds `n_train` rows in total (class-balanced), labels 1-based.
pub fn write_ucr_archive(root: &Path, d: &Dataset, n_train: usize) -> Result<()> {
    let labels = d
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("archive writing needs labels".into()))?;
    let dir = root.join(&d.name);
    fs::create_dir_all(&dir).map_err(|source| Error::Io {
        path: dir.clone(),
        source,
    })?;
    let per_class_train = n_train / d.n_classes;
    let mut seen = vec![0usize; d.n_classes];
    let mut train = String::new();
    let mut test = String::new();
    for i in 0..d.n() {
        let class = labels[i];
        let target = if seen[class] < per_class_train {
            &mut train
        } else {
            &mut test
        };
        seen[class] += 1;
        target.push_str(&format!("{}", class + 1));
        for ti in 0..d.t() {
            target.push_str(&format!("\t{:.6}", d.values[[i, ti]]));
        }
        target.push('\n');
    }
    for (fname, text) in [
        (format!("{}_TRAIN.tsv", d.name), train),
        (format!("{}_TEST.tsv", d.name), test),
    ] {
        let path = dir.join(fname);
        fs::File::create(&path)
            .and_then(|mut f| f.write_all(text.as_bytes()))
            .map_err(|source| Error::Io { path: path.clone(), source })?;
    }
    Ok(())
}

/// Make sure `root/name/` exists, generating the stand-in archive when it
/// does not. Returns true when a fresh archive was generated.
pub fn ensure_archive(root: &Path, name: &str, seed: u64) -> Result<bool> {
    let probe = root.join(name).join(format!("{name}_TRAIN.tsv"));
    if probe.exists() {
        return Ok(false);
    }
    let (d, n_train) = match name {
        "SyntheticControl" => (synthetic_control(seed), 300),
        "ShapeletSim" => (shapelet_pair(seed), 20),
        other => {
            return Err(Error::Config(format!(
                "no generator for dataset {other:?}; provide real data under --data-root"
            )))
        }
    };
    write_ucr_archive(root, &d, n_train)?;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_ucr_dataset;

    #[test]
    fn control_chart_dimensions_and_determinism() {
        let d = synthetic_control(0);
        assert_eq!(d.n(), 600);
        assert_eq!(d.t(), 60);
        assert_eq!(d.n_classes, 6);
        let d2 = synthetic_control(0);
        assert_eq!(d, d2);
        assert_ne!(d, synthetic_control(1));
    }

    #[test]
    fn archive_roundtrip_matches_loader() {
        let dir = tempfile::tempdir().unwrap();
        let d = synthetic_control(7);
        write_ucr_archive(dir.path(), &d, 300).unwrap();
        let loaded = load_ucr_dataset(dir.path(), "SyntheticControl").unwrap();
        assert_eq!(loaded.n(), 600);
        assert_eq!(loaded.t(), 60);
        assert_eq!(loaded.n_classes, 6);
        // class balance is preserved in both splits
        let labels = loaded.labels.as_ref().unwrap();
        for class in 0..6 {
            assert_eq!(labels.iter().filter(|&&l| l == class).count(), 100);
        }
    }

    #[test]
    fn shapelet_dataset_shape() {
        let d = shapelet_pair(3);
        assert_eq!(d.n(), 200);
        assert_eq!(d.t(), 500);
        assert_eq!(d.n_classes, 2);
    }

    #[test]
    fn ensure_archive_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ensure_archive(dir.path(), "ShapeletSim", 0).unwrap());
        assert!(!ensure_archive(dir.path(), "ShapeletSim", 0).unwrap());
        assert!(ensure_archive(dir.path(), "NotADataset", 0).is_err());
        let loaded = load_ucr_dataset(dir.path(), "ShapeletSim").unwrap();
        assert_eq!(loaded.n(), 200);
    }
}
