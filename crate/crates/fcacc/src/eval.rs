//! Clustering quality metrics and embedding export.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Per-row argmax with ties broken toward the lowest cluster index.
pub fn hard_assign(p: &Array2<f64>) -> Vec<usize> {
    let (n, k) = p.dim();
    (0..n)
        .map(|i| {
            let mut best = 0usize;
            for j in 1..k {
                if p[[i, j]] > p[[i, best]] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn contingency(labels: &[usize], preds: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let kl = labels.iter().max().map_or(0, |&m| m + 1);
    let kp = preds.iter().max().map_or(0, |&m| m + 1);
    let mut table = vec![vec![0.0; kp]; kl];
    for (&l, &p) in labels.iter().zip(preds.iter()) {
        table[l][p] += 1.0;
    }
    let row: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<f64> = (0..kp).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    (table, row, col)
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with geometric-mean normalization and
/// natural logarithms. Two single-cluster partitions are identical and score
/// 1; if only one side is constant the score is 0.
pub fn nmi(labels: &[usize], preds: &[usize]) -> Result<f64> {
    if labels.len() != preds.len() {
        return Err(Error::LengthMismatch(labels.len(), preds.len()));
    }
    if labels.is_empty() {
        return Err(Error::Config("nmi needs at least one sample".into()));
    }
    let n = labels.len() as f64;
    let (table, row, col) = contingency(labels, preds);
    let hl = entropy(&row, n);
    let hp = entropy(&col, n);
    if hl == 0.0 && hp == 0.0 {
        return Ok(1.0);
    }
    if hl == 0.0 || hp == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, r) in table.iter().enumerate() {
        for (j, &c) in r.iter().enumerate() {
            if c > 0.0 {
                let pij = c / n;
                mi += pij * (pij / (row[i] / n * (col[j] / n))).ln();
            }
        }
    }
    Ok((mi / (hl * hp).sqrt()).clamp(0.0, 1.0))
}

/// Rand index: the fraction of sample pairs on which the two partitions
/// agree (together in both or apart in both). Computed from the contingency
/// table; the tests check it against exhaustive pair enumeration.
pub fn rand_index(labels: &[usize], preds: &[usize]) -> Result<f64> {
    if labels.len() != preds.len() {
        return Err(Error::LengthMismatch(labels.len(), preds.len()));
    }
    let n = labels.len();
    if n < 2 {
        return Err(Error::Config("rand index needs at least two samples".into()));
    }
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let (table, row, col) = contingency(labels, preds);
    let together_both: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let together_labels: f64 = row.iter().map(|&c| choose2(c)).sum();
    let together_preds: f64 = col.iter().map(|&c| choose2(c)).sum();
    let total = choose2(n as f64);
    let disagreements = together_labels + together_preds - 2.0 * together_both;
    Ok((total - disagreements) / total)
}

/// Final clustering quality summary for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub nmi: f64,
    pub ri: f64,
    pub n_samples: usize,
    pub k_true: usize,
    pub k_pred: usize,
}

pub fn evaluate(labels: &[usize], preds: &[usize]) -> Result<MetricsReport> {
    let nmi_v = nmi(labels, preds)?;
    let ri_v = rand_index(labels, preds)?;
    let k_of = |v: &[usize]| {
        let mut s: Vec<usize> = v.to_vec();
        s.sort_unstable();
        s.dedup();
        s.len()
    };
    Ok(MetricsReport {
        nmi: nmi_v,
        ri: ri_v,
        n_samples: labels.len(),
        k_true: k_of(labels),
        k_pred: k_of(preds),
    })
}

/// CSV of embeddings: one row per sample, D embedding columns then the true
/// label (-1 when unknown) and the predicted label. Values keep six decimals.
pub fn export_embeddings(
    z: &Array2<f64>,
    labels: Option<&[usize]>,
    preds: &[usize],
    path: &Path,
) -> Result<()> {
    let (n, d) = z.dim();
    assert_eq!(preds.len(), n);
    if let Some(l) = labels {
        assert_eq!(l.len(), n);
    }
    let mut out = String::new();
    let header: Vec<String> = (0..d)
        .map(|j| format!("e{j}"))
        .chain(["label".to_string(), "pred".to_string()])
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..n {
        for j in 0..d {
            out.push_str(&format!("{:.6},", z[[i, j]]));
        }
        let label = labels.map_or(-1i64, |l| l[i] as i64);
        out.push_str(&format!("{label},{}\n", preds[i]));
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Oracle: direct entropy/MI sums over the joint distribution.
    pub(crate) fn nmi_oracle(labels: &[usize], preds: &[usize]) -> f64 {
        let n = labels.len() as f64;
        let kl = labels.iter().max().unwrap() + 1;
        let kp = preds.iter().max().unwrap() + 1;
        let mut joint = vec![vec![0.0; kp]; kl];
        for (&l, &p) in labels.iter().zip(preds) {
            joint[l][p] += 1.0 / n;
        }
        let pl: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
        let pp: Vec<f64> = (0..kp).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
        let h = |ps: &[f64]| -> f64 {
            ps.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
        };
        let (hl, hp) = (h(&pl), h(&pp));
        if hl == 0.0 && hp == 0.0 {
            return 1.0;
        }
        if hl == 0.0 || hp == 0.0 {
            return 0.0;
        }
        let mut mi = 0.0;
        for i in 0..kl {
            for j in 0..kp {
                if joint[i][j] > 0.0 {
                    mi += joint[i][j] * (joint[i][j] / (pl[i] * pp[j])).ln();
                }
            }
        }
        mi / (hl * hp).sqrt()
    }

    /// Oracle: exhaustive pair enumeration.
    pub(crate) fn rand_index_oracle(labels: &[usize], preds: &[usize]) -> f64 {
        let n = labels.len();
        let mut agree = 0usize;
        let mut total = 0usize;
        for i in 0..n {
            for j in i + 1..n {
                let same_l = labels[i] == labels[j];
                let same_p = preds[i] == preds[j];
                if same_l == same_p {
                    agree += 1;
                }
                total += 1;
            }
        }
        agree as f64 / total as f64
    }

    #[test]
    fn hard_assign_rules() {
        let p = ndarray::arr2(&[[0.7, 0.3], [0.5, 0.5], [0.0, 1.0]]);
        assert_eq!(hard_assign(&p), vec![0, 0, 1]);
    }

    #[test]
    fn nmi_known_values() {
        assert_eq!(nmi(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 1, 0, 1], &[0, 0, 0, 0]).unwrap(), 0.0);
        // non-constant self-agreement is exact
        let x = vec![0, 2, 1, 2, 0, 1, 1];
        assert_eq!(nmi(&x, &x).unwrap(), 1.0);
        // constant on both sides counts as identical single clusterings
        assert_eq!(nmi(&[3, 3, 3], &[0, 0, 0]).unwrap(), 1.0);
        // hand case against the oracle
        let l = [0, 0, 1, 1];
        let p = [0, 1, 1, 1];
        let got = nmi(&l, &p).unwrap();
        assert!((got - nmi_oracle(&l, &p)).abs() < 1e-9);
        assert!(matches!(
            nmi(&[0, 1], &[0]),
            Err(Error::LengthMismatch(2, 1))
        ));
    }

    #[test]
    fn rand_index_known_values() {
        assert_eq!(rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        let got = rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert!((got - 2.0 / 6.0).abs() < 1e-12);
        assert!(rand_index(&[0], &[0]).is_err());
    }

    #[test]
    fn metrics_match_oracles_and_are_relabel_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let n = rng.random_range(2..=8);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let nmi_got = nmi(&labels, &preds).unwrap();
            let ri_got = rand_index(&labels, &preds).unwrap();
            assert!((nmi_got - nmi_oracle(&labels, &preds)).abs() < 1e-9);
            assert!((ri_got - rand_index_oracle(&labels, &preds)).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&nmi_got));
            assert!((0.0..=1.0).contains(&ri_got));

            // bijective relabeling of predictions changes nothing
            let relabel = [2usize, 0, 1];
            let relabeled: Vec<usize> = preds.iter().map(|&p| relabel[p]).collect();
            assert!((nmi(&labels, &relabeled).unwrap() - nmi_got).abs() < 1e-12);
            assert!((rand_index(&labels, &relabeled).unwrap() - ri_got).abs() < 1e-12);
        }
    }

    #[test]
    fn export_embeddings_format() {
        let dir = tempfile::tempdir().unwrap();
        let z = ndarray::arr2(&[[0.1234567, 1.0, -2.5], [3.0, 4.0, 5.0]]);
        let path = dir.path().join("emb.csv");
        export_embeddings(&z, Some(&[1, 0]), &[0, 0], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3, "header + 2 rows");
        assert_eq!(lines[0], "e0,e1,e2,label,pred");
        let first: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(first.len(), 5);
        let parsed: f64 = first[0].parse().unwrap();
        assert!((parsed - 0.123457).abs() < 1e-9, "six-decimal rounding");
    }
}
