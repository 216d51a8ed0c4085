//! Tape operations. Each op computes its value eagerly and records a closure
//! producing parent gradients from the output gradient.

use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, Ix3, IxDyn, s};

use super::{Elem, Graph, Var};

impl<E: Elem> Graph<E> {
    /// Elementwise `a + b` (same shape).
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let val = self.value(a).to_owned() + &self.value(b).view();
        self.push(
            val,
            vec![a, b],
            Some(Box::new(|g| vec![g.clone(), g.clone()])),
        )
    }

    /// Elementwise `a - b` (same shape).
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let val = self.value(a).to_owned() - &self.value(b).view();
        self.push(
            val,
            vec![a, b],
            Some(Box::new(|g| vec![g.clone(), g.mapv(|x| -x)])),
        )
    }

    /// Elementwise `a * b` (same shape).
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let val = va.to_owned() * &vb.view();
        self.push(
            val,
            vec![a, b],
            Some(Box::new(move |g| {
                vec![g * &vb.view(), g * &va.view()]
            })),
        )
    }

    /// `c * a` for a scalar constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ce = E::from_f64(c);
        let val = self.value(a).to_owned() * ce;
        self.push(
            val,
            vec![a],
            Some(Box::new(move |g| vec![g * ce])),
        )
    }

    /// `alpha * a + beta * b` (same shape). Used for the universum mixes.
    pub fn affine(&mut self, a: Var, b: Var, alpha: f64, beta: f64) -> Var {
        let al = E::from_f64(alpha);
        let be = E::from_f64(beta);
        let val = self.value(a).to_owned() * al + &(self.value(b).to_owned() * be).view();
        self.push(
            val,
            vec![a, b],
            Some(Box::new(move |g| vec![g * al, g * be])),
        )
    }

    /// Elementwise product with a constant array (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: ArrayD<E>) -> Var {
        let c = c.into_shared();
        let val = self.value(a).to_owned() * &c.view();
        self.push(
            val,
            vec![a],
            Some(Box::new(move |g| vec![g * &c.view()])),
        )
    }

    /// Broadcast-add a 1-D bias along `axis`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Var {
        let vx = self.value(x).clone();
        let vb = self.value(bias).clone();
        let mut bshape = vec![1usize; vx.ndim()];
        bshape[axis] = vb.len();
        let bview = vb.view().into_shape_with_order(IxDyn(&bshape)).unwrap();
        let val = vx.to_owned() + &bview;
        self.push(
            val,
            vec![x, bias],
            Some(Box::new(move |g| {
                let mut gb = g.clone();
                for ax in (0..g.ndim()).rev() {
                    if ax != axis {
                        gb = gb.sum_axis(Axis(ax));
                    }
                }
                vec![g.clone(), gb]
            })),
        )
    }

    /// `(M,K) x (K,N) -> (M,N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
        let b2 = vb.view().into_dimensionality::<Ix2>().unwrap();
        let (m, k) = a2.dim();
        let n = b2.dim().1;
        let mut out = Array2::<E>::zeros((m, n));
        general_mat_mul(E::one(), &a2, &b2, E::zero(), &mut out);
        self.push(
            out.into_dyn(),
            vec![a, b],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = vb.view().into_dimensionality::<Ix2>().unwrap();
                let mut ga = Array2::<E>::zeros((m, k));
                general_mat_mul(E::one(), &g2, &b2.t(), E::zero(), &mut ga);
                let mut gb = Array2::<E>::zeros((k, n));
                general_mat_mul(E::one(), &a2.t(), &g2, E::zero(), &mut gb);
                vec![ga.into_dyn(), gb.into_dyn()]
            })),
        )
    }

    /// Batched matmul: `(B,M,K) x (B,K,N) -> (B,M,N)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let a3 = va.view().into_dimensionality::<Ix3>().unwrap();
        let b3 = vb.view().into_dimensionality::<Ix3>().unwrap();
        let (nb, m, k) = a3.dim();
        let n = b3.dim().2;
        assert_eq!(b3.dim().0, nb);
        assert_eq!(b3.dim().1, k);
        let mut out = ndarray::Array3::<E>::zeros((nb, m, n));
        for bi in 0..nb {
            let mut o = out.index_axis_mut(Axis(0), bi);
            general_mat_mul(
                E::one(),
                &a3.index_axis(Axis(0), bi),
                &b3.index_axis(Axis(0), bi),
                E::zero(),
                &mut o,
            );
        }
        self.push(
            out.into_dyn(),
            vec![a, b],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let a3 = va.view().into_dimensionality::<Ix3>().unwrap();
                let b3 = vb.view().into_dimensionality::<Ix3>().unwrap();
                let mut ga = ndarray::Array3::<E>::zeros((nb, m, k));
                let mut gb = ndarray::Array3::<E>::zeros((nb, k, n));
                for bi in 0..nb {
                    let gsl = g3.index_axis(Axis(0), bi);
                    let mut gasl = ga.index_axis_mut(Axis(0), bi);
                    general_mat_mul(
                        E::one(),
                        &gsl,
                        &b3.index_axis(Axis(0), bi).t(),
                        E::zero(),
                        &mut gasl,
                    );
                    let mut gbsl = gb.index_axis_mut(Axis(0), bi);
                    general_mat_mul(
                        E::one(),
                        &a3.index_axis(Axis(0), bi).t(),
                        &gsl,
                        E::zero(),
                        &mut gbsl,
                    );
                }
                vec![ga.into_dyn(), gb.into_dyn()]
            })),
        )
    }

    /// Swap two axes (materialized in standard layout).
    pub fn swap_axes(&mut self, x: Var, i: usize, j: usize) -> Var {
        let mut v = self.value(x).view();
        v.swap_axes(i, j);
        let val = v.as_standard_layout().into_owned();
        self.push(
            val,
            vec![x],
            Some(Box::new(move |g| {
                let mut gv = g.view();
                gv.swap_axes(i, j);
                vec![gv.as_standard_layout().into_owned()]
            })),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let old_shape: Vec<usize> = self.value(x).shape().to_vec();
        let val = self
            .value(x)
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible size");
        self.push(
            val,
            vec![x],
            Some(Box::new(move |g| {
                vec![g
                    .to_owned()
                    .into_shape_with_order(IxDyn(&old_shape))
                    .unwrap()]
            })),
        )
    }

    /// Slice `[start, start+len)` along axis 1 of a 3-D array.
    pub fn slice_axis1(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xshape: Vec<usize> = self.value(x).shape().to_vec();
        assert_eq!(xshape.len(), 3);
        let val = self
            .value(x)
            .slice(s![.., start..start + len, ..])
            .to_owned();
        self.push(
            val.into_dyn(),
            vec![x],
            Some(Box::new(move |g| {
                let mut gx = ArrayD::<E>::zeros(IxDyn(&xshape));
                gx.slice_mut(s![.., start..start + len, ..])
                    .assign(&g.view().into_dimensionality::<Ix3>().unwrap());
                vec![gx]
            })),
        )
    }

    /// Concatenate along the last axis.
    pub fn concat_last(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let views: Vec<_> = xs.iter().map(|&v| self.value(v).view()).collect();
        let last = views[0].ndim() - 1;
        let widths: Vec<usize> = views.iter().map(|v| v.shape()[last]).collect();
        let cat = ndarray::concatenate(Axis(last), &views).expect("concat: shape mismatch");
        let val = if cat.is_standard_layout() {
            cat
        } else {
            cat.as_standard_layout().into_owned()
        };
        let parents = xs.to_vec();
        self.push(
            val,
            parents,
            Some(Box::new(move |g| {
                let mut out = Vec::with_capacity(widths.len());
                let mut off = 0;
                for &w in &widths {
                    out.push(
                        g.slice_axis(Axis(last), ndarray::Slice::from(off..off + w))
                            .to_owned(),
                    );
                    off += w;
                }
                out
            })),
        )
    }

    /// `(B,T,T) -> (B,T)` taking `x[b,t,t]`.
    pub fn diag12(&mut self, x: Var) -> Var {
        let v = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let (b, t, t2) = v.dim();
        assert_eq!(t, t2);
        let mut out = Array2::<E>::zeros((b, t));
        for bi in 0..b {
            for ti in 0..t {
                out[[bi, ti]] = v[[bi, ti, ti]];
            }
        }
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = ndarray::Array3::<E>::zeros((b, t, t));
                for bi in 0..b {
                    for ti in 0..t {
                        gx[[bi, ti, ti]] = g2[[bi, ti]];
                    }
                }
                vec![gx.into_dyn()]
            })),
        )
    }

    /// Gather along the time axis: `out[b,t,:] = x[b, idx[b,t], :]`.
    pub fn gather_axis1(&mut self, x: Var, idx: Arc<Array2<usize>>) -> Var {
        let v = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let (b, t, d) = v.dim();
        let (ib, it) = idx.dim();
        assert_eq!(ib, b);
        let vcow = v.as_standard_layout();
        let xs = vcow.as_slice().unwrap();
        let mut out = ndarray::Array3::<E>::zeros((b, it, d));
        {
            let os = out.as_slice_mut().unwrap();
            for bi in 0..b {
                for ti in 0..it {
                    let src = (bi * t + idx[[bi, ti]]) * d;
                    let dst = (bi * it + ti) * d;
                    os[dst..dst + d].copy_from_slice(&xs[src..src + d]);
                }
            }
        }
        let idx_b = idx.clone();
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Box::new(move |g| {
                let gsl = g.as_slice().unwrap();
                let mut gx = ndarray::Array3::<E>::zeros((b, t, d));
                {
                    let gxs = gx.as_slice_mut().unwrap();
                    for bi in 0..b {
                        for ti in 0..it {
                            let dst = (bi * t + idx_b[[bi, ti]]) * d;
                            let src = (bi * it + ti) * d;
                            for k in 0..d {
                                gxs[dst + k] = gxs[dst + k] + gsl[src + k];
                            }
                        }
                    }
                }
                vec![gx.into_dyn()]
            })),
        )
    }

    /// Gather along the batch axis: `out[r,t,:] = x[idx[r,t], t, :]`.
    pub fn gather_axis0(&mut self, x: Var, idx: Arc<Array2<usize>>) -> Var {
        let v = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let (b, t, d) = v.dim();
        let (rows, it) = idx.dim();
        assert_eq!(it, t);
        let vcow = v.as_standard_layout();
        let xs = vcow.as_slice().unwrap();
        let mut out = ndarray::Array3::<E>::zeros((rows, t, d));
        {
            let os = out.as_slice_mut().unwrap();
            for r in 0..rows {
                for ti in 0..t {
                    let src = (idx[[r, ti]] * t + ti) * d;
                    let dst = (r * t + ti) * d;
                    os[dst..dst + d].copy_from_slice(&xs[src..src + d]);
                }
            }
        }
        let idx_b = idx.clone();
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Box::new(move |g| {
                let gsl = g.as_slice().unwrap();
                let mut gx = ndarray::Array3::<E>::zeros((b, t, d));
                {
                    let gxs = gx.as_slice_mut().unwrap();
                    for r in 0..rows {
                        for ti in 0..t {
                            let dst = (idx_b[[r, ti]] * t + ti) * d;
                            let src = (r * t + ti) * d;
                            for k in 0..d {
                                gxs[dst + k] = gxs[dst + k] + gsl[src + k];
                            }
                        }
                    }
                }
                vec![gx.into_dyn()]
            })),
        )
    }

    /// Masked log-sum-exp over the last axis of a 3-D array, mask over the
    /// trailing two axes. Rows with no admitted entries yield 0 with zero
    /// gradient. Max-subtraction keeps large logits finite.
    pub fn lse_masked3(&mut self, x: Var, mask: Arc<Array2<bool>>) -> Var {
        let v = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let (a, r, c) = v.dim();
        assert_eq!(mask.dim(), (r, c));
        let vcow = v.as_standard_layout();
        let xs = vcow.as_slice().unwrap();
        let ms = mask.as_slice().expect("lse_masked3: mask must be standard layout");
        let mut out = Array2::<E>::zeros((a, r));
        for ai in 0..a {
            for ri in 0..r {
                let base = (ai * r + ri) * c;
                let mrow = &ms[ri * c..(ri + 1) * c];
                let mut mx = E::neg_infinity();
                for ci in 0..c {
                    if mrow[ci] {
                        let xv = xs[base + ci];
                        if xv > mx {
                            mx = xv;
                        }
                    }
                }
                if mx == E::neg_infinity() {
                    out[[ai, ri]] = E::zero();
                    continue;
                }
                let mut s = E::zero();
                for ci in 0..c {
                    if mrow[ci] {
                        s = s + (xs[base + ci] - mx).exp();
                    }
                }
                out[[ai, ri]] = mx + s.ln();
            }
        }
        let out_shared = out.into_dyn().into_shared();
        let out_cl = out_shared.clone();
        let vx = self.value(x).clone();
        let mask_b = mask.clone();
        let id = self.len();
        self.nodes.push(super::Node {
            value: out_shared,
            parents: vec![x],
            grad_fn: Some(Box::new(move |g| {
                let gsl = g.as_slice().unwrap();
                let xs = vx.as_slice().unwrap();
                let os = out_cl.as_slice().unwrap();
                let ms = mask_b.as_slice().unwrap();
                let mut gx = ndarray::Array3::<E>::zeros((a, r, c));
                {
                    let gxs = gx.as_slice_mut().unwrap();
                    for ai in 0..a {
                        for ri in 0..r {
                            let row = ai * r + ri;
                            let gv = gsl[row];
                            if gv == E::zero() {
                                continue;
                            }
                            let base = row * c;
                            let mrow = &ms[ri * c..(ri + 1) * c];
                            // detect the empty-row sentinel: recompute cheaply
                            let mut any = false;
                            for ci in 0..c {
                                if mrow[ci] {
                                    any = true;
                                    break;
                                }
                            }
                            if !any {
                                continue;
                            }
                            let o = os[row];
                            for ci in 0..c {
                                if mrow[ci] {
                                    gxs[base + ci] = gv * (xs[base + ci] - o).exp();
                                }
                            }
                        }
                    }
                }
                vec![gx.into_dyn()]
            })),
        });
        Var(id)
    }

    /// Mean over all elements.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let inv = E::from_f64(1.0 / n as f64);
        let val = ndarray::arr0(self.value(x).iter().fold(E::zero(), |s, &v| s + v) * inv);
        let shape: Vec<usize> = self.value(x).shape().to_vec();
        self.push(
            val.into_dyn(),
            vec![x],
            Some(Box::new(move |g| {
                let gv = *g.iter().next().unwrap() * inv;
                vec![ArrayD::from_elem(IxDyn(&shape), gv)]
            })),
        )
    }

    /// Weighted mean `sum(w*x)/sum(w)` with constant weights; 0 if all weights
    /// vanish.
    pub fn mean_weighted(&mut self, x: Var, w: ArrayD<E>) -> Var {
        assert_eq!(w.shape(), self.value(x).shape());
        let wsum = w.iter().fold(E::zero(), |s, &v| s + v);
        let val = if wsum == E::zero() {
            E::zero()
        } else {
            self.value(x)
                .iter()
                .zip(w.iter())
                .fold(E::zero(), |s, (&xv, &wv)| s + xv * wv)
                / wsum
        };
        let w = w.into_shared();
        self.push(
            ndarray::arr0(val).into_dyn(),
            vec![x],
            Some(Box::new(move |g| {
                let gv = *g.iter().next().unwrap();
                if wsum == E::zero() {
                    vec![ArrayD::zeros(w.raw_dim())]
                } else {
                    vec![w.to_owned() * (gv / wsum)]
                }
            })),
        )
    }

    /// Sum of scalar nodes.
    pub fn addn(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let val = xs
            .iter()
            .fold(E::zero(), |s, &v| s + self.scalar(v));
        let n = xs.len();
        self.push(
            ndarray::arr0(val).into_dyn(),
            xs.to_vec(),
            Some(Box::new(move |g| vec![g.clone(); n])),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x).clone();
        let c = E::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let k = E::from_f64(0.044715);
        let half = E::from_f64(0.5);
        let one = E::one();
        let val = vx.mapv(|v| {
            let u = c * (v + k * v * v * v);
            half * v * (one + u.tanh())
        });
        self.push(
            val,
            vec![x],
            Some(Box::new(move |g| {
                let three_k = E::from_f64(3.0 * 0.044715);
                let mut gx = vx.to_owned();
                gx.zip_mut_with(g, |v, &gv| {
                    let u = c * (*v + k * *v * *v * *v);
                    let t = u.tanh();
                    let sech2 = one - t * t;
                    let d = half * (one + t) + half * *v * sech2 * c * (one + three_k * *v * *v);
                    *v = gv * d;
                });
                vec![gx]
            })),
        )
    }

    /// Max over axis 1 of `(B,T,D)`; ties resolve to the earliest timestep.
    pub fn max_axis1(&mut self, x: Var) -> Var {
        let v = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let (b, t, d) = v.dim();
        assert!(t >= 1);
        let mut out = Array2::<E>::zeros((b, d));
        let mut arg = Array2::<usize>::zeros((b, d));
        for bi in 0..b {
            for di in 0..d {
                let mut best = v[[bi, 0, di]];
                let mut besti = 0usize;
                for ti in 1..t {
                    let cand = v[[bi, ti, di]];
                    if cand > best {
                        best = cand;
                        besti = ti;
                    }
                }
                out[[bi, di]] = best;
                arg[[bi, di]] = besti;
            }
        }
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = ndarray::Array3::<E>::zeros((b, t, d));
                for bi in 0..b {
                    for di in 0..d {
                        gx[[bi, arg[[bi, di]], di]] = g2[[bi, di]];
                    }
                }
                vec![gx.into_dyn()]
            })),
        )
    }

    /// Membership-weighted sum of squared distances to fixed centers:
    /// `sum_ij p[i,j] * ||z_i - mu_j||^2`. Gradients flow to `z` only.
    pub fn cluster_sqdist(&mut self, z: Var, p: Array2<E>, mu: Array2<E>) -> Var {
        let vz = self.value(z).clone();
        let z2 = vz.view().into_dimensionality::<Ix2>().unwrap();
        let (n, d) = z2.dim();
        let k = mu.dim().0;
        assert_eq!(p.dim(), (n, k));
        assert_eq!(mu.dim().1, d);
        let mut total = E::zero();
        for i in 0..n {
            for j in 0..k {
                let mut sq = E::zero();
                for di in 0..d {
                    let diff = z2[[i, di]] - mu[[j, di]];
                    sq = sq + diff * diff;
                }
                total = total + p[[i, j]] * sq;
            }
        }
        self.push(
            ndarray::arr0(total).into_dyn(),
            vec![z],
            Some(Box::new(move |g| {
                let gv = *g.iter().next().unwrap();
                let z2 = vz.view().into_dimensionality::<Ix2>().unwrap();
                // d/dz_i = 2 * (z_i * sum_j p_ij - (p @ mu)_i)
                let mut pmu = Array2::<E>::zeros((n, d));
                general_mat_mul(E::one(), &p, &mu, E::zero(), &mut pmu);
                let psum: Array1<E> = p.sum_axis(Axis(1));
                let mut gz = Array2::<E>::zeros((n, d));
                for i in 0..n {
                    for di in 0..d {
                        gz[[i, di]] =
                            E::from_f64(2.0) * gv * (z2[[i, di]] * psum[i] - pmu[[i, di]]);
                    }
                }
                vec![gz.into_dyn()]
            })),
        )
    }
}
