//! Cluster-aware contrastive learning: dual universum hard negatives and the
//! temperature-free time-level / instance-level losses.
//!
//! All similarities are raw inner products. Time-level terms contrast one
//! instance's timestamps inside the overlap region; instance-level terms
//! contrast instances at a shared timestamp, with positives taken from the
//! same high-confidence cluster. Hard negatives are convex mixes with the
//! positive-side coefficient capped at 0.5, one shared `(lambda, partner)`
//! pattern across the three views.

use std::sync::Arc;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Elem, Graph, Var};
use crate::error::{Error, Result};

/// Per-anchor positive index sets over batch positions. `i` is always a
/// member of its own set; negatives are the complement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveSets {
    sets: Vec<Vec<usize>>,
}

impl PositiveSets {
    pub fn new(n: usize, mut sets: Vec<Vec<usize>>) -> Result<Self> {
        if sets.len() != n {
            return Err(Error::Config("positive sets length != batch size".into()));
        }
        for (i, s) in sets.iter_mut().enumerate() {
            s.sort_unstable();
            s.dedup();
            if !s.contains(&i) {
                return Err(Error::Config(format!("positive set {i} must contain {i}")));
            }
            if s.iter().any(|&j| j >= n) {
                return Err(Error::Config(format!("positive set {i} out of range")));
            }
        }
        Ok(PositiveSets { sets })
    }

    /// The cluster-agnostic degradation: every anchor is its own only positive.
    pub fn singletons(n: usize) -> Self {
        PositiveSets {
            sets: (0..n).map(|i| vec![i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn pos(&self, i: usize) -> &[usize] {
        &self.sets[i]
    }

    pub fn negatives(&self, i: usize) -> Vec<usize> {
        (0..self.len()).filter(|j| !self.sets[i].contains(j)).collect()
    }

    /// (B,B) mask with `mask[i][j] = j in N+(i)`.
    pub fn pos_mask(&self) -> Array2<bool> {
        let n = self.len();
        let mut m = Array2::from_elem((n, n), false);
        for (i, s) in self.sets.iter().enumerate() {
            for &j in s {
                m[[i, j]] = true;
            }
        }
        m
    }

    pub fn neg_mask(&self) -> Array2<bool> {
        self.pos_mask().mapv(|v| !v)
    }

    /// Relabel batch positions through `perm` (new position of old `i` is
    /// `perm[i]`). Used by the permutation-equivariance tests.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.len();
        let mut sets = vec![Vec::new(); n];
        for (i, s) in self.sets.iter().enumerate() {
            sets[perm[i]] = s.iter().map(|&j| perm[j]).collect();
        }
        for s in &mut sets {
            s.sort_unstable();
        }
        PositiveSets { sets }
    }
}

/// Representations of the three views, restricted to the overlap region.
/// View `a` is absent in the two-view ablation.
#[derive(Debug, Clone, Copy)]
pub struct ViewReps {
    pub a: Option<Var>,
    pub b: Var,
    pub c: Var,
}

/// Which view pairs enter the losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    /// (a,b) and (b,c), the full three-view objective.
    ThreeView,
    /// (b,c) only: the context-only two-view ablation.
    TwoView,
}

/// Sampled structure of the time-level mixes: one lambda per batch, one
/// partner timestamp per `(i, t)`, shared by all views.
#[derive(Debug, Clone)]
pub struct TimeHnPlan {
    pub lambda: f64,
    pub partner: Arc<Array2<usize>>,
}

/// Sample a time-level plan. `partner[i][t]` is uniform over the overlap
/// excluding `t`; `lambda` is uniform on `(0, lambda1_max]`.
pub fn plan_time_hn(
    batch: usize,
    omega_len: usize,
    lambda1_max: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TimeHnPlan> {
    if omega_len < 2 {
        return Err(Error::OverlapTooSmall(omega_len));
    }
    if !(lambda1_max > 0.0 && lambda1_max <= 0.5) {
        return Err(Error::Config("lambda1_max must lie in (0, 0.5]".into()));
    }
    let lambda = lambda1_max * (1.0 - rng.random::<f64>());
    let mut partner = Array2::<usize>::zeros((batch, omega_len));
    for i in 0..batch {
        for t in 0..omega_len {
            let r = rng.random_range(0..omega_len - 1);
            partner[[i, t]] = if r >= t { r + 1 } else { r };
        }
    }
    Ok(TimeHnPlan {
        lambda,
        partner: Arc::new(partner),
    })
}

fn mix_time<E: Elem>(g: &mut Graph<E>, z: Var, plan: &TimeHnPlan) -> Var {
    let partner = g.gather_axis1(z, plan.partner.clone());
    g.affine(z, partner, plan.lambda, 1.0 - plan.lambda)
}

/// Time-level hard negatives for each present view.
pub fn apply_time_hn<E: Elem>(g: &mut Graph<E>, z: &ViewReps, plan: &TimeHnPlan) -> ViewReps {
    ViewReps {
        a: z.a.map(|za| mix_time(g, za, plan)),
        b: mix_time(g, z.b, plan),
        c: mix_time(g, z.c, plan),
    }
}

/// Sample + apply in one step (the usual call).
pub fn gen_time_hard_negatives<E: Elem>(
    g: &mut Graph<E>,
    z: &ViewReps,
    omega_len: usize,
    batch: usize,
    lambda1_max: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(ViewReps, TimeHnPlan)> {
    let plan = plan_time_hn(batch, omega_len, lambda1_max, rng)?;
    Ok((apply_time_hn(g, z, &plan), plan))
}

/// Sampled structure of the instance-level mixes: per `(i, t)` a same-cluster
/// positive `k` (falling back to `i` itself) and an out-of-set negative `j`.
#[derive(Debug, Clone)]
pub struct InstanceHnPlan {
    pub lambda: f64,
    pub pos_partner: Arc<Array2<usize>>,
    pub neg_partner: Arc<Array2<usize>>,
}

pub fn plan_instance_hn(
    pos_sets: &PositiveSets,
    omega_len: usize,
    lambda2_max: f64,
    rng: &mut ChaCha8Rng,
) -> Result<InstanceHnPlan> {
    let n = pos_sets.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    if !(lambda2_max > 0.0 && lambda2_max <= 0.5) {
        return Err(Error::Config("lambda2_max must lie in (0, 0.5]".into()));
    }
    let lambda = lambda2_max * (1.0 - rng.random::<f64>());
    let mut pos_partner = Array2::<usize>::zeros((n, omega_len));
    let mut neg_partner = Array2::<usize>::zeros((n, omega_len));
    for i in 0..n {
        let pos = pos_sets.pos(i);
        let negs = pos_sets.negatives(i);
        // when the whole batch is one positive set, mix against any other
        // instance so the sample still exists for other anchors' denominators
        let fallback: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let negs = if negs.is_empty() { &fallback } else { &negs };
        for t in 0..omega_len {
            pos_partner[[i, t]] = pos[rng.random_range(0..pos.len())];
            neg_partner[[i, t]] = negs[rng.random_range(0..negs.len())];
        }
    }
    Ok(InstanceHnPlan {
        lambda,
        pos_partner: Arc::new(pos_partner),
        neg_partner: Arc::new(neg_partner),
    })
}

fn mix_instance<E: Elem>(g: &mut Graph<E>, z: Var, plan: &InstanceHnPlan) -> Var {
    let zk = g.gather_axis0(z, plan.pos_partner.clone());
    let zj = g.gather_axis0(z, plan.neg_partner.clone());
    g.affine(zk, zj, plan.lambda, 1.0 - plan.lambda)
}

pub fn apply_instance_hn<E: Elem>(
    g: &mut Graph<E>,
    z: &ViewReps,
    plan: &InstanceHnPlan,
) -> ViewReps {
    ViewReps {
        a: z.a.map(|za| mix_instance(g, za, plan)),
        b: mix_instance(g, z.b, plan),
        c: mix_instance(g, z.c, plan),
    }
}

pub fn gen_instance_hard_negatives<E: Elem>(
    g: &mut Graph<E>,
    z: &ViewReps,
    pos_sets: &PositiveSets,
    omega_len: usize,
    lambda2_max: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(ViewReps, InstanceHnPlan)> {
    let plan = plan_instance_hn(pos_sets, omega_len, lambda2_max, rng)?;
    Ok((apply_instance_hn(g, z, &plan), plan))
}

fn all_true(r: usize, c: usize) -> Array2<bool> {
    Array2::from_elem((r, c), true)
}

fn off_diagonal(n: usize) -> Array2<bool> {
    Array2::from_shape_fn((n, n), |(i, j)| i != j)
}

fn hconcat_masks(masks: &[Array2<bool>]) -> Arc<Array2<bool>> {
    let views: Vec<_> = masks.iter().map(|m| m.view()).collect();
    let cat = ndarray::concatenate(ndarray::Axis(1), &views).unwrap();
    Arc::new(cat.as_standard_layout().into_owned())
}

fn resolve_pairs(z: &ViewReps, hn: Option<&ViewReps>, pairing: Pairing) -> Vec<(Var, Var, Option<(Var, Var)>)> {
    let mut pairs = Vec::new();
    if pairing == Pairing::ThreeView {
        let za = z.a.expect("three-view pairing requires view a");
        let hn_ab = hn.map(|h| (h.a.expect("hard negatives missing view a"), h.b));
        pairs.push((za, z.b, hn_ab));
    }
    let hn_bc = hn.map(|h| (h.b, h.c));
    pairs.push((z.b, z.c, hn_bc));
    pairs
}

/// One directional time-level term: anchor `u` against partner `v` over the
/// overlap, negatives = other timestamps (cross-view, same-view off-diagonal)
/// plus both views' time-level mixes.
fn time_pair_term<E: Elem>(g: &mut Graph<E>, zu: Var, zv: Var, hn: Option<(Var, Var)>) -> Var {
    let w = g.value(zu).shape()[1];
    let zv_t = g.swap_axes(zv, 1, 2);
    let s_uv = g.bmm(zu, zv_t); // (B, W, W)
    let zu_t = g.swap_axes(zu, 1, 2);
    let s_uu = g.bmm(zu, zu_t);

    let mut fams = vec![s_uv, s_uu];
    let mut masks = vec![all_true(w, w), off_diagonal(w)];
    if let Some((hu, hv)) = hn {
        let hu_t = g.swap_axes(hu, 1, 2);
        fams.push(g.bmm(zu, hu_t));
        masks.push(all_true(w, w));
        let hv_t = g.swap_axes(hv, 1, 2);
        fams.push(g.bmm(zu, hv_t));
        masks.push(all_true(w, w));
    }
    let den_in = g.concat_last(&fams);
    let den = g.lse_masked3(den_in, hconcat_masks(&masks));
    let num = g.diag12(s_uv);
    let diff = g.sub(den, num);
    g.mean_all(diff)
}

/// Mean over `(i, t)` of the summed per-pair time-level terms.
pub fn time_contrastive_loss<E: Elem>(
    g: &mut Graph<E>,
    z: &ViewReps,
    hn: Option<&ViewReps>,
    pairing: Pairing,
) -> Var {
    let terms: Vec<Var> = resolve_pairs(z, hn, pairing)
        .into_iter()
        .map(|(u, v, h)| time_pair_term(g, u, v, h))
        .collect();
    g.addn(&terms)
}

/// One directional instance-level term at every overlap timestamp: positives
/// are the anchor's same-cluster instances (cross-view), negatives the rest
/// of the batch plus both views' instance-level mixes. Anchors with an empty
/// negative set are excluded from the mean.
fn instance_pair_term<E: Elem>(
    g: &mut Graph<E>,
    zu: Var,
    zv: Var,
    hn: Option<(Var, Var)>,
    pos_sets: &PositiveSets,
) -> Var {
    let shape = g.value(zu).shape().to_vec();
    let (b, w) = (shape[0], shape[1]);
    debug_assert_eq!(pos_sets.len(), b);
    let pos_mask = Arc::new(pos_sets.pos_mask());
    let neg_mask = pos_sets.neg_mask();

    let zu_t = g.swap_axes(zu, 0, 1); // (W, B, D)
    let zv_t = g.swap_axes(zv, 0, 1);
    let zv_tt = g.swap_axes(zv_t, 1, 2);
    let s_uv = g.bmm(zu_t, zv_tt); // (W, B, B)
    let zu_tt = g.swap_axes(zu_t, 1, 2);
    let s_uu = g.bmm(zu_t, zu_tt);

    let num = g.lse_masked3(s_uv, pos_mask);

    let mut fams = vec![s_uu, s_uv];
    let mut masks = vec![neg_mask.clone(), neg_mask.clone()];
    if let Some((hu, hv)) = hn {
        let hu_t = g.swap_axes(hu, 0, 1);
        let hu_tt = g.swap_axes(hu_t, 1, 2);
        fams.push(g.bmm(zu_t, hu_tt));
        masks.push(neg_mask.clone());
        let hv_t = g.swap_axes(hv, 0, 1);
        let hv_tt = g.swap_axes(hv_t, 1, 2);
        fams.push(g.bmm(zu_t, hv_tt));
        masks.push(neg_mask.clone());
    }
    let den_in = g.concat_last(&fams);
    let den = g.lse_masked3(den_in, hconcat_masks(&masks));
    let diff = g.sub(den, num);

    let mut weights = ndarray::ArrayD::<E>::zeros(IxDyn(&[w, b]));
    for i in 0..b {
        if pos_sets.pos(i).len() < b {
            for t in 0..w {
                weights[[t, i]] = E::one();
            }
        }
    }
    g.mean_weighted(diff, weights)
}

/// Mean over `(i, t)` of the summed per-pair instance-level terms.
pub fn instance_contrastive_loss<E: Elem>(
    g: &mut Graph<E>,
    z: &ViewReps,
    hn: Option<&ViewReps>,
    pos_sets: &PositiveSets,
    pairing: Pairing,
) -> Var {
    let terms: Vec<Var> = resolve_pairs(z, hn, pairing)
        .into_iter()
        .map(|(u, v, h)| instance_pair_term(g, u, v, h, pos_sets))
        .collect();
    g.addn(&terms)
}

/// Sum of the two already-averaged contrastive losses.
pub fn total_contrastive_loss<E: Elem>(g: &mut Graph<E>, time_loss: Var, inst_loss: Var) -> Var {
    g.addn(&[time_loss, inst_loss])
}
