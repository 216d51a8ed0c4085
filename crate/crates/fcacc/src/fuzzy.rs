//! Fuzzy c-means over pooled instance embeddings, and the cluster-awareness
//! generation that selects each cluster's high-confidence members.
//!
//! Membership and center updates follow the standard m-weighted alternation;
//! the clustering loss fed back to the encoder weights distances linearly by
//! membership (a `p^m`-weighted variant is available behind a flag in the
//! trainer config). Cluster-aware sets apply a dual rule: a per-cluster cap
//! of `floor(r*N/K)` members and a membership floor `theta`.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::contrast::PositiveSets;
use crate::error::{Error, Result};

/// Row-stochastic soft assignment plus the cluster centers that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipMatrix {
    pub p: Array2<f64>,
    pub centers: Array2<f64>,
    pub m: f64,
}

impl MembershipMatrix {
    pub fn n(&self) -> usize {
        self.p.nrows()
    }

    pub fn k(&self) -> usize {
        self.p.ncols()
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

/// Membership update: `p_ij` proportional to `d_ij^(2/(1-m))`. A sample that
/// coincides with a center is assigned crisply to it (the analytical limit).
pub fn fcm_update_membership(
    z: &Array2<f64>,
    centers: &Array2<f64>,
    m: f64,
) -> Result<Array2<f64>> {
    let (n, _) = z.dim();
    let k = centers.nrows();
    if m <= 1.0 {
        return Err(Error::Config("fuzziness m must be > 1".into()));
    }
    if k < 2 {
        return Err(Error::Config("need at least 2 clusters".into()));
    }
    if z.iter().chain(centers.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fcm inputs"));
    }
    let expo = 1.0 / (m - 1.0);
    let mut p = Array2::<f64>::zeros((n, k));
    let mut d2 = vec![0.0; k];
    for i in 0..n {
        let zi = z.row(i);
        let mut dmin = f64::INFINITY;
        for j in 0..k {
            d2[j] = sq_dist(zi, centers.row(j));
            if d2[j] < dmin {
                dmin = d2[j];
            }
        }
        if dmin == 0.0 {
            let hit = d2.iter().position(|&d| d == 0.0).unwrap();
            p[[i, hit]] = 1.0;
            continue;
        }
        // stable ratio form of d^(2/(1-m)): weights (dmin/d)^(1/(m-1)) <= 1
        let mut total = 0.0;
        for j in 0..k {
            let w = (dmin / d2[j]).powf(expo);
            p[[i, j]] = w;
            total += w;
        }
        for j in 0..k {
            p[[i, j]] /= total;
        }
    }
    Ok(p)
}

/// Center update: weighted mean with weights `p^m`. A cluster with no mass is
/// reported so the caller can re-seed it.
pub fn fcm_update_centers(z: &Array2<f64>, p: &Array2<f64>, m: f64) -> Result<Array2<f64>> {
    let (n, d) = z.dim();
    let k = p.ncols();
    let mut centers = Array2::<f64>::zeros((k, d));
    for j in 0..k {
        let mut mass = 0.0;
        for i in 0..n {
            let w = p[[i, j]].powf(m);
            mass += w;
            for di in 0..d {
                centers[[j, di]] += w * z[[i, di]];
            }
        }
        if mass <= 0.0 {
            return Err(Error::EmptyCluster(j));
        }
        for di in 0..d {
            centers[[j, di]] /= mass;
        }
    }
    Ok(centers)
}

/// FCM objective `sum_ij p_ij^m ||z_i - mu_j||^2`, the quantity the
/// alternating updates drive down.
pub fn fcm_objective(z: &Array2<f64>, p: &Array2<f64>, centers: &Array2<f64>, m: f64) -> f64 {
    let (n, _) = z.dim();
    let k = centers.nrows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..k {
            total += p[[i, j]].powf(m) * sq_dist(z.row(i), centers.row(j));
        }
    }
    total
}

/// Linear-membership clustering loss `sum_ij p_ij ||z_i - mu_j||^2`.
pub fn cluster_loss_value(z: &Array2<f64>, p: &Array2<f64>, centers: &Array2<f64>) -> f64 {
    let (n, _) = z.dim();
    let k = centers.nrows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..k {
            total += p[[i, j]] * sq_dist(z.row(i), centers.row(j));
        }
    }
    total
}

fn kmeanspp_seed(z: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (n, d) = z.dim();
    let mut centers = Array2::<f64>::zeros((k, d));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&z.row(first));
    let mut best = vec![f64::INFINITY; n];
    for j in 1..k {
        for i in 0..n {
            let dd = sq_dist(z.row(i), centers.row(j - 1));
            if dd < best[i] {
                best[i] = dd;
            }
        }
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in best.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(j).assign(&z.row(pick));
    }
    centers
}

fn repair_empty(z: &Array2<f64>, centers: &mut Array2<f64>, dead: usize) {
    // re-seed at the point worst served by the current centers
    let (n, _) = z.dim();
    let mut worst = 0usize;
    let mut worst_d = -1.0;
    for i in 0..n {
        let nearest = (0..centers.nrows())
            .map(|j| sq_dist(z.row(i), centers.row(j)))
            .fold(f64::INFINITY, f64::min);
        if nearest > worst_d {
            worst_d = nearest;
            worst = i;
        }
    }
    let zrow = z.row(worst).to_owned();
    centers.row_mut(dead).assign(&zrow);
}

fn fcm_iterate(
    z: &Array2<f64>,
    mut centers: Array2<f64>,
    m: f64,
    tol: f64,
    max_iter: usize,
) -> Result<MembershipMatrix> {
    let k = centers.nrows();
    let mut p = fcm_update_membership(z, &centers, m)?;
    for _ in 0..max_iter {
        let new_centers = match fcm_update_centers(z, &p, m) {
            Ok(c) => c,
            Err(Error::EmptyCluster(j)) => {
                repair_empty(z, &mut centers, j);
                p = fcm_update_membership(z, &centers, m)?;
                continue;
            }
            Err(e) => return Err(e),
        };
        let shift = (0..k)
            .map(|j| sq_dist(new_centers.row(j), centers.row(j)).sqrt())
            .fold(0.0, f64::max);
        centers = new_centers;
        p = fcm_update_membership(z, &centers, m)?;
        if shift < tol {
            break;
        }
    }
    Ok(MembershipMatrix { p, centers, m })
}

/// Fit from k-means++-style seeded centers; deterministic per seed.
pub fn fcm_fit(
    z: &Array2<f64>,
    k: usize,
    m: f64,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<MembershipMatrix> {
    let n = z.nrows();
    if n < k {
        return Err(Error::TooFewSamples { n, k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = kmeanspp_seed(z, k, &mut rng);
    fcm_iterate(z, centers, m, tol, max_iter)
}

/// Fit continuing from previous centers (the per-epoch warm start).
pub fn fcm_fit_warm(
    z: &Array2<f64>,
    centers: Array2<f64>,
    m: f64,
    tol: f64,
    max_iter: usize,
) -> Result<MembershipMatrix> {
    let n = z.nrows();
    if n < centers.nrows() {
        return Err(Error::TooFewSamples { n, k: centers.nrows() });
    }
    fcm_iterate(z, centers, m, tol, max_iter)
}

/// High-confidence member sets per cluster: per-sample peak membership and
/// hard assignment, the per-cluster cap, the effective thresholds, and the
/// selected index sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAwareSets {
    pub p_max: Vec<f64>,
    pub assign: Vec<usize>,
    pub n_cap: usize,
    pub sigma: Vec<f64>,
    pub sets: Vec<Vec<usize>>,
}

impl ClusterAwareSets {
    pub fn total_selected(&self) -> usize {
        self.sets.iter().map(|s| s.len()).sum()
    }

    /// Replacement used by the no-cluster-awareness ablation: every sample is
    /// admitted to its argmax cluster, thresholds ignored.
    pub fn from_argmax(p: &Array2<f64>) -> Self {
        let (n, k) = p.dim();
        let assign = crate::eval::hard_assign(p);
        let p_max: Vec<f64> = (0..n)
            .map(|i| p.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut sets = vec![Vec::new(); k];
        for (i, &c) in assign.iter().enumerate() {
            sets[c].push(i);
        }
        ClusterAwareSets {
            p_max,
            assign,
            n_cap: n,
            sigma: vec![0.0; k],
            sets,
        }
    }
}

/// Select each cluster's confident members: sort members by peak membership,
/// cap at `floor(r*N/K)`, and keep those at or above `max(xi_k, theta)`.
pub fn compute_cluster_aware_sets(p: &Array2<f64>, r: f64, theta: f64) -> ClusterAwareSets {
    let (n, k) = p.dim();
    let assign = crate::eval::hard_assign(p);
    let p_max: Vec<f64> = (0..n)
        .map(|i| p.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let n_cap = (r * (n as f64 / k as f64)).floor() as usize;

    let mut sigma = vec![0.0; k];
    let mut sets = vec![Vec::new(); k];
    for (kk, (sig, set)) in sigma.iter_mut().zip(sets.iter_mut()).enumerate() {
        let mut members: Vec<usize> = (0..n).filter(|&i| assign[i] == kk).collect();
        members.sort_by(|&a, &b| {
            p_max[b]
                .partial_cmp(&p_max[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let xi = if members.is_empty() || n_cap == 0 {
            1.0
        } else if members.len() < n_cap {
            p_max[*members.last().unwrap()]
        } else {
            p_max[members[n_cap - 1]]
        };
        *sig = xi.max(theta);
        let mut chosen: Vec<usize> = members
            .into_iter()
            .take(n_cap)
            .filter(|&i| p_max[i] >= *sig)
            .collect();
        chosen.sort_unstable();
        *set = chosen;
    }
    ClusterAwareSets {
        p_max,
        assign,
        n_cap,
        sigma,
        sets,
    }
}

/// Batch-local positive sets: an anchor that belongs to its cluster's aware
/// set pairs with the set's other in-batch members, everyone else is a
/// singleton.
pub fn batch_positive_sets(sets: &ClusterAwareSets, batch: &[usize]) -> PositiveSets {
    let b = batch.len();
    let mut out = Vec::with_capacity(b);
    for (bi, &i) in batch.iter().enumerate() {
        let k = sets.assign[i];
        let aware = &sets.sets[k];
        if aware.binary_search(&i).is_ok() {
            let mut pos: Vec<usize> = batch
                .iter()
                .enumerate()
                .filter(|(_, &j)| aware.binary_search(&j).is_ok() && sets.assign[j] == k)
                .map(|(bj, _)| bj)
                .collect();
            if !pos.contains(&bi) {
                pos.push(bi);
            }
            out.push(pos);
        } else {
            out.push(vec![bi]);
        }
    }
    PositiveSets::new(b, out).expect("batch positive sets are well-formed by construction")
}

/// Write memberships as CSV, one row per sample, six decimal places.
pub fn export_memberships_csv(path: &Path, mm: &MembershipMatrix) -> Result<()> {
    let mut out = String::new();
    for i in 0..mm.n() {
        let row: Vec<String> = (0..mm.k()).map(|j| format!("{:.6}", mm.p[[i, j]])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
}

/// Write the aware sets as CSV rows `cluster,index,p_max`.
pub fn export_aware_sets_csv(path: &Path, sets: &ClusterAwareSets) -> Result<()> {
    let mut out = String::from("cluster,index,p_max\n");
    for (k, set) in sets.sets.iter().enumerate() {
        for &i in set {
            out.push_str(&format!("{k},{i},{:.6}\n", sets.p_max[i]));
        }
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

    fn blob_data(seed: u64, n_per: usize, d: usize, spread: f64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [[0.0, 5.0], [8.0, -3.0]];
        let n = n_per * 2;
        let mut z = Array2::<f64>::zeros((n, d));
        let mut labels = vec![0usize; n];
        for i in 0..n {
            let c = i / n_per;
            labels[i] = c;
            for j in 0..d {
                let base = centers[c][j % 2];
                z[[i, j]] = base + (rng.random::<f64>() - 0.5) * spread;
            }
        }
        (z, labels)
    }

    #[test]
    fn membership_hand_case_eq9() {
        // D=1, z=0, centers at -1 and 2, m=1.5: weights d^-4 = (1, 1/16)
        let z = ndarray::arr2(&[[0.0]]);
        let centers = ndarray::arr2(&[[-1.0], [2.0]]);
        let p = fcm_update_membership(&z, &centers, 1.5).unwrap();
        assert!((p[[0, 0]] - 16.0 / 17.0).abs() < 1e-12);
        assert!((p[[0, 1]] - 1.0 / 17.0).abs() < 1e-12);
    }

    #[test]
    fn membership_zero_distance_and_symmetry() {
        let z = ndarray::arr2(&[[1.0, 2.0]]);
        let centers = ndarray::arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let p = fcm_update_membership(&z, &centers, 1.5).unwrap();
        assert_eq!(p[[0, 0]], 1.0);
        assert_eq!(p[[0, 1]], 0.0);

        // equidistant from all centers -> uniform row
        let z = ndarray::arr2(&[[0.0, 0.0]]);
        let centers = ndarray::arr2(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]);
        let p = fcm_update_membership(&z, &centers, 1.5).unwrap();
        for j in 0..3 {
            assert!((p[[0, j]] - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn center_update_rules() {
        let z = ndarray::arr2(&[[0.0, 0.0], [2.0, 2.0], [10.0, 0.0], [12.0, 2.0]]);
        // crisp: centers are plain means regardless of m
        let p = ndarray::arr2(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]);
        for m in [1.3, 1.5, 2.5] {
            let c = fcm_update_centers(&z, &p, m).unwrap();
            assert!((c[[0, 0]] - 1.0).abs() < 1e-12);
            assert!((c[[1, 0]] - 11.0).abs() < 1e-12);
        }
        // uniform rows: every center is the global mean
        let p = Array2::from_elem((4, 2), 0.5);
        let c = fcm_update_centers(&z, &p, 1.5).unwrap();
        for j in 0..2 {
            assert!((c[[j, 0]] - 6.0).abs() < 1e-12);
            assert!((c[[j, 1]] - 1.0).abs() < 1e-12);
        }
        // two points, identity assignment
        let z = ndarray::arr2(&[[1.0], [5.0]]);
        let p = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let c = fcm_update_centers(&z, &p, 1.5).unwrap();
        assert_eq!(c, ndarray::arr2(&[[1.0], [5.0]]));
        // an empty column is an error
        let p = ndarray::arr2(&[[1.0, 0.0], [1.0, 0.0]]);
        assert!(matches!(
            fcm_update_centers(&z, &p, 1.5),
            Err(Error::EmptyCluster(1))
        ));
    }

    #[test]
    fn fit_separated_blobs_matches_cloud_oracle() {
        let (z, labels) = blob_data(3, 30, 4, 1.0);
        let mm = fcm_fit(&z, 2, 1.5, 1e-6, 100, 7).unwrap();
        let pred = crate::eval::hard_assign(&mm.p);
        // brute-force oracle: nearest cloud mean
        let agree: usize = pred
            .iter()
            .zip(&labels)
            .filter(|(p, l)| **p == **l)
            .count();
        let acc = agree.max(60 - agree); // up to label swap
        assert_eq!(acc, 60);
        // rows on the simplex
        for i in 0..mm.n() {
            let s: f64 = mm.p.row(i).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(mm.p.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn fit_k_equals_n_goes_crisp() {
        let z = ndarray::arr2(&[[0.0, 0.0], [4.0, 0.0], [0.0, 4.0], [4.0, 4.0]]);
        let mm = fcm_fit(&z, 4, 1.5, 1e-9, 200, 1).unwrap();
        let pred = crate::eval::hard_assign(&mm.p);
        let mut sorted = pred.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 4, "each point captures one center");
        for i in 0..4 {
            assert!(mm.p[[i, pred[i]]] > 0.99);
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let (z, _) = blob_data(5, 20, 3, 2.0);
        let a = fcm_fit(&z, 2, 1.5, 1e-6, 100, 42).unwrap();
        let b = fcm_fit(&z, 2, 1.5, 1e-6, 100, 42).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            fcm_fit(&z, 100, 1.5, 1e-6, 100, 42),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn objective_non_increasing_and_scale_invariance() {
        for seed in 0..5u64 {
            let (z, _) = blob_data(seed, 15, 3, 6.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let mut centers = kmeanspp_seed(&z, 3, &mut rng);
            let mut p = fcm_update_membership(&z, &centers, 1.5).unwrap();
            let mut prev = fcm_objective(&z, &p, &centers, 1.5);
            for _ in 0..25 {
                centers = fcm_update_centers(&z, &p, 1.5).unwrap();
                p = fcm_update_membership(&z, &centers, 1.5).unwrap();
                let now = fcm_objective(&z, &p, &centers, 1.5);
                assert!(now <= prev + 1e-9, "objective rose: {prev} -> {now}");
                prev = now;
            }
            // common positive rescaling leaves the hard assignment unchanged
            let z2 = z.mapv(|v| v * 3.7);
            let c2 = centers.mapv(|v| v * 3.7);
            let p2 = fcm_update_membership(&z2, &c2, 1.5).unwrap();
            assert_eq!(crate::eval::hard_assign(&p), crate::eval::hard_assign(&p2));
        }
    }

    #[test]
    fn cluster_loss_values() {
        let z = ndarray::arr2(&[[1.0]]);
        let mu = ndarray::arr2(&[[0.0]]);
        let p = ndarray::arr2(&[[1.0]]);
        assert_eq!(cluster_loss_value(&z, &p, &mu), 1.0);

        let z = ndarray::arr2(&[[2.0, 0.0], [0.0, 3.0]]);
        let p = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(cluster_loss_value(&z, &p, &z.clone()), 0.0);
    }

    fn oracle_sets(p: &Array2<f64>, r: f64, theta: f64) -> Vec<Vec<usize>> {
        // independent sort / cap / threshold implementation
        let (n, k) = p.dim();
        let assign = crate::eval::hard_assign(p);
        let pmax: Vec<f64> = (0..n)
            .map(|i| p.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let cap = (r * n as f64 / k as f64).floor() as usize;
        (0..k)
            .map(|kk| {
                let mut mem: Vec<usize> = (0..n).filter(|&i| assign[i] == kk).collect();
                mem.sort_by(|&a, &b| pmax[b].partial_cmp(&pmax[a]).unwrap().then(a.cmp(&b)));
                mem.truncate(cap);
                let mut keep: Vec<usize> = mem.into_iter().filter(|&i| pmax[i] >= theta).collect();
                keep.sort_unstable();
                keep
            })
            .collect()
    }

    fn random_membership(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut p = Array2::<f64>::zeros((n, k));
        for i in 0..n {
            let mut total = 0.0;
            for j in 0..k {
                let v: f64 = rng.random::<f64>();
                p[[i, j]] = v;
                total += v;
            }
            for j in 0..k {
                p[[i, j]] /= total;
            }
        }
        p
    }

    #[test]
    fn aware_sets_spec_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // cap arithmetic: r=0.5, N=100, K=4 -> 12
        let p = random_membership(100, 4, &mut rng);
        let s = compute_cluster_aware_sets(&p, 0.5, 0.95);
        assert_eq!(s.n_cap, 12);

        // sigma = max(xi, theta)
        let p = ndarray::arr2(&[
            [0.90, 0.10],
            [0.88, 0.12],
        ]);
        let s = compute_cluster_aware_sets(&p, 1.0, 0.95);
        assert_eq!(s.sigma[0], 0.95);
        assert!(s.sets[0].is_empty(), "nobody reaches theta");

        // three members 0.99 / 0.97 / 0.90 in cluster 0, cap 2, theta 0.95
        let p = ndarray::arr2(&[
            [0.99, 0.01],
            [0.97, 0.03],
            [0.90, 0.10],
            [0.05, 0.95],
        ]);
        let s = compute_cluster_aware_sets(&p, 1.0, 0.95); // floor(1*4/2)=2
        assert_eq!(s.n_cap, 2);
        assert!((s.sigma[0] - 0.97).abs() < 1e-12);
        assert_eq!(s.sets[0], vec![0, 1]);

        // r = 0: cap 0, xi = 1, all sets empty under theta < 1
        let s = compute_cluster_aware_sets(&p, 0.0, 0.95);
        assert_eq!(s.n_cap, 0);
        assert!(s.sets.iter().all(|v| v.is_empty()));
        assert!(s.sigma.iter().all(|&v| v >= 0.95));
    }

    #[test]
    fn aware_sets_match_oracle_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for case in 0..200 {
            let n = 2 + (case * 7) % 49;
            let k = 2 + (case * 3) % 7;
            let p = random_membership(n, k, &mut rng);
            let r = [0.0, 0.25, 0.5, 1.0][case % 4];
            let theta = [0.0, 0.3, 0.95, 1.0][(case / 4) % 4];
            let got = compute_cluster_aware_sets(&p, r, theta);
            let want = oracle_sets(&p, r, theta);
            assert_eq!(got.sets, want, "case {case}");
            // structural invariants
            for (kk, set) in got.sets.iter().enumerate() {
                assert!(set.len() <= got.n_cap);
                assert!(got.sigma[kk] >= theta);
                for &i in set {
                    assert_eq!(got.assign[i], kk);
                    assert!(got.p_max[i] >= got.sigma[kk]);
                }
            }
        }
    }

    #[test]
    fn batch_positive_sets_rules() {
        let p = ndarray::arr2(&[
            [0.99, 0.01], // 0: confident cluster 0
            [0.98, 0.02], // 1: confident cluster 0
            [0.60, 0.40], // 2: cluster 0, low confidence
            [0.02, 0.98], // 3: confident cluster 1
        ]);
        let s = compute_cluster_aware_sets(&p, 1.0, 0.95);
        assert_eq!(s.sets[0], vec![0, 1]);
        assert_eq!(s.sets[1], vec![3]);

        let pos = batch_positive_sets(&s, &[0, 1, 2, 3]);
        assert_eq!(pos.pos(0), &[0, 1]);
        assert_eq!(pos.pos(1), &[0, 1]);
        assert_eq!(pos.pos(2), &[2], "non-member falls back to singleton");
        assert_eq!(pos.pos(3), &[3], "sole in-batch member of its set");

        // partition property over random batches
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let n = 12;
            let p = random_membership(n, 3, &mut rng);
            let s = compute_cluster_aware_sets(&p, 0.7, 0.5);
            let batch: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < 0.6).collect();
            if batch.is_empty() {
                continue;
            }
            let pos = batch_positive_sets(&s, &batch);
            for bi in 0..batch.len() {
                let negs = pos.negatives(bi);
                let mut union: Vec<usize> = pos.pos(bi).to_vec();
                union.extend(&negs);
                union.sort_unstable();
                assert_eq!(union, (0..batch.len()).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn csv_exports_roundtrip_shape() {
        let dir = tempfile::tempdir().unwrap();
        let mm = MembershipMatrix {
            p: ndarray::arr2(&[[0.75, 0.25], [0.5, 0.5]]),
            centers: ndarray::arr2(&[[0.0], [1.0]]),
            m: 1.5,
        };
        let path = dir.path().join("memberships.csv");
        export_memberships_csv(&path, &mm).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("0.750000,0.250000"));

        let s = compute_cluster_aware_sets(&mm.p, 1.0, 0.6);
        let path = dir.path().join("aware.csv");
        export_aware_sets_csv(&path, &s).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("cluster,index,p_max\n"));
    }
}
