//! Three-view augmentation: multiple cropping plus perturbation.
//!
//! From a batch of series of length T we crop three windows sharing the
//! overlap `[n1, m2)`: the overlap itself (perturbed) becomes view `a`, the
//! left-extended window `[m1, m2)` is view `b`, and the right-extended window
//! `[n1, n2)` is view `c`. Pair (a,b) carries transformation+subseries
//! consistency, pair (b,c) contextual consistency.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Crop boundaries, 0-based, half-open: views are `[m1,m2)`, `[n1,m2)`,
/// `[n1,n2)` with `0 <= m1 < n1 <= m2 <= n2 <= T` and `m2 - n1 >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropTriplet {
    pub m1: usize,
    pub n1: usize,
    pub m2: usize,
    pub n2: usize,
}

impl CropTriplet {
    pub fn overlap_len(&self) -> usize {
        self.m2 - self.n1
    }

    pub fn len_a(&self) -> usize {
        self.m2 - self.n1
    }

    pub fn len_b(&self) -> usize {
        self.m2 - self.m1
    }

    pub fn len_c(&self) -> usize {
        self.n2 - self.n1
    }

    pub fn is_valid(&self, t: usize) -> bool {
        self.m1 < self.n1 && self.n1 <= self.m2 && self.m2 <= self.n2 && self.n2 <= t
            && self.m2 - self.n1 >= 1
    }
}

/// Local offsets of the shared overlap region inside each view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverlapMap {
    pub len: usize,
    pub in_a: usize,
    pub in_b: usize,
    pub in_c: usize,
}

impl OverlapMap {
    pub fn from_crop(crop: &CropTriplet) -> Self {
        OverlapMap {
            len: crop.overlap_len(),
            in_a: 0,
            in_b: crop.n1 - crop.m1,
            in_c: 0,
        }
    }

    /// (offset in anchor view, offset in partner view) for the (a,b) pair.
    pub fn pair_ab(&self) -> (usize, usize) {
        (self.in_a, self.in_b)
    }

    /// Same for the (b,c) pair.
    pub fn pair_bc(&self) -> (usize, usize) {
        (self.in_b, self.in_c)
    }
}

/// The three augmented views of one batch, all sharing a single crop.
#[derive(Debug, Clone)]
pub struct ViewTriple {
    pub xa: Array2<f64>,
    pub xb: Array2<f64>,
    pub xc: Array2<f64>,
    pub crop: CropTriplet,
    pub overlap: OverlapMap,
}

/// Uniformly sample a feasible crop triplet by rejection. Every tuple
/// satisfying the invariants (with overlap at least `min_overlap`) is
/// equally likely.
pub fn sample_crop_boundaries(
    t: usize,
    min_overlap: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CropTriplet> {
    if min_overlap < 1 || t < min_overlap + 2 {
        return Err(Error::SeriesTooShort { t, min_overlap });
    }
    loop {
        let m1 = rng.random_range(0..=t);
        let n1 = rng.random_range(0..=t);
        let m2 = rng.random_range(0..=t);
        let n2 = rng.random_range(0..=t);
        if m1 < n1 && n1 <= m2 && m2 <= n2 && m2 - n1 >= min_overlap {
            return Ok(CropTriplet { m1, n1, m2, n2 });
        }
    }
}

/// Additive zero-mean Gaussian jitter with standard deviation `sigma`.
/// The generator is advanced even for `sigma = 0`, so rng consumption does
/// not depend on the setting.
pub fn perturb(segment: &Array2<f64>, sigma: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut out = segment.clone();
    for v in out.iter_mut() {
        let g: f64 = StandardNormal.sample(rng);
        *v += sigma * g;
    }
    out
}

/// Crop the three views out of `batch` and perturb view `a`.
pub fn make_views(
    batch: &Array2<f64>,
    crop: CropTriplet,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ViewTriple> {
    let t = batch.ncols();
    if !crop.is_valid(t) {
        return Err(Error::SeriesTooShort { t, min_overlap: 1 });
    }
    let raw_a = batch.slice(ndarray::s![.., crop.n1..crop.m2]).to_owned();
    let xb = batch.slice(ndarray::s![.., crop.m1..crop.m2]).to_owned();
    let xc = batch.slice(ndarray::s![.., crop.n1..crop.n2]).to_owned();
    let xa = perturb(&raw_a, sigma, rng);
    Ok(ViewTriple {
        xa,
        xb,
        xc,
        crop,
        overlap: OverlapMap::from_crop(&crop),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn crop_invariants_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..2000 {
            let c = sample_crop_boundaries(10, 1, &mut rng).unwrap();
            assert!(c.is_valid(10), "{c:?}");
        }
    }

    #[test]
    fn tiny_t_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let c = sample_crop_boundaries(3, 1, &mut rng).unwrap();
            assert!(c.is_valid(3), "{c:?}");
        }
        assert!(matches!(
            sample_crop_boundaries(2, 1, &mut rng),
            Err(Error::SeriesTooShort { .. })
        ));
    }

    #[test]
    fn perturb_identity_and_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((20, 30), |(i, j)| (i * 31 + j) as f64 * 0.01);
        let same = perturb(&x, 0.0, &mut rng);
        assert_eq!(x, same);

        let x = Array2::zeros((100, 200));
        let y = perturb(&x, 0.1, &mut rng);
        assert_eq!(y.dim(), (100, 200));
        let n = (100 * 200) as f64;
        let mean = y.sum() / n;
        let std = (y.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!((std - 0.1).abs() < 0.02, "sample std {std}");

        // deterministic given the seed
        let mut rng_a = ChaCha8Rng::seed_from_u64(7);
        let mut rng_b = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(perturb(&x, 0.1, &mut rng_a), perturb(&x, 0.1, &mut rng_b));
    }

    #[test]
    fn views_hand_index_case() {
        // batch of one series 0..9, crop (0,2,6,9)
        let batch = Array2::from_shape_fn((1, 10), |(_, j)| j as f64);
        let crop = CropTriplet { m1: 0, n1: 2, m2: 6, n2: 9 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = make_views(&batch, crop, 0.0, &mut rng).unwrap();
        assert_eq!(v.xb.row(0).to_vec(), vec![0., 1., 2., 3., 4., 5.]);
        assert_eq!(v.xc.row(0).to_vec(), vec![2., 3., 4., 5., 6., 7., 8.]);
        assert_eq!(v.xa.row(0).to_vec(), vec![2., 3., 4., 5.]);
        assert_eq!(v.overlap.len, 4);
        assert_eq!(v.overlap.in_b, 2);
        assert_eq!(v.overlap.in_c, 0);
        assert_eq!(v.overlap.in_a, 0);
    }

    #[test]
    fn overlap_consistency_sigma_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = Array2::from_shape_fn((8, 40), |(i, j)| ((i + 1) * (j + 3)) as f64 % 7.0);
        for _ in 0..50 {
            let crop = sample_crop_boundaries(40, 1, &mut rng).unwrap();
            let v = make_views(&batch, crop, 0.0, &mut rng).unwrap();
            assert_eq!(v.xa.nrows(), 8);
            assert_eq!(v.xb.nrows(), 8);
            assert_eq!(v.xc.nrows(), 8);
            let w = v.overlap.len;
            for i in 0..8 {
                for t in 0..w {
                    let a = v.xa[[i, v.overlap.in_a + t]];
                    let b = v.xb[[i, v.overlap.in_b + t]];
                    let c = v.xc[[i, v.overlap.in_c + t]];
                    assert_eq!(a, b);
                    assert_eq!(b, c);
                }
            }
            // pairing semantics on the raw crop indices: a's support within b's,
            // b's and c's supports distinct but overlapping
            assert!(crop.n1 >= crop.m1 && crop.m2 <= crop.m2);
            assert!((crop.m1, crop.m2) != (crop.n1, crop.n2) || crop.m1 < crop.n1);
            assert!(crop.m1 < crop.n1);
        }
    }

    #[test]
    fn crop_exceeding_t_is_rejected() {
        let batch = Array2::zeros((2, 5));
        let crop = CropTriplet { m1: 0, n1: 1, m2: 4, n2: 6 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(make_views(&batch, crop, 0.0, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn prop_crop_uniform_invariants(t in 3usize..120, min_ov in 1usize..3, seed in 0u64..1000) {
            prop_assume!(t >= min_ov + 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = sample_crop_boundaries(t, min_ov, &mut rng).unwrap();
            prop_assert!(c.is_valid(t));
            prop_assert!(c.overlap_len() >= min_ov);
        }

        #[test]
        fn prop_perturb_preserves_shape(rows in 1usize..6, cols in 1usize..20, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Array2::from_shape_fn((rows, cols), |(i, j)| (i + j) as f64);
            let y = perturb(&x, 0.3, &mut rng);
            prop_assert_eq!(y.dim(), (rows, cols));
        }
    }
}
