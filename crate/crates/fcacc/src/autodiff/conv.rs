//! Dilated 1-D convolution via im2col + matmul.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, Axis, Ix1, Ix3};

use super::{Elem, Graph, Var};

/// Fill `cols` (C*K, L) with the im2col expansion of one batch element,
/// zero-padding so output length equals input length.
fn im2col<E: Elem>(x: &[E], c: usize, l: usize, k: usize, dilation: usize, cols: &mut Array2<E>) {
    let pad_left = ((k - 1) * dilation) / 2;
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        let xrow = &x[ci * l..(ci + 1) * l];
        for ki in 0..k {
            let row = &mut cs[(ci * k + ki) * l..(ci * k + ki + 1) * l];
            // source index = pos + ki*dilation - pad_left
            let shift = ki * dilation;
            for (pos, slot) in row.iter_mut().enumerate() {
                let src = pos + shift;
                *slot = if src >= pad_left && src - pad_left < l {
                    xrow[src - pad_left]
                } else {
                    E::zero()
                };
            }
        }
    }
}

/// Scatter the im2col-space gradient back onto the input.
fn col2im<E: Elem>(cols: &Array2<E>, c: usize, l: usize, k: usize, dilation: usize, gx: &mut [E]) {
    let pad_left = ((k - 1) * dilation) / 2;
    let cs = cols.as_slice().unwrap();
    for ci in 0..c {
        let gxrow = &mut gx[ci * l..(ci + 1) * l];
        for ki in 0..k {
            let row = &cs[(ci * k + ki) * l..(ci * k + ki + 1) * l];
            let shift = ki * dilation;
            for (pos, &gv) in row.iter().enumerate() {
                let src = pos + shift;
                if src >= pad_left && src - pad_left < l {
                    gxrow[src - pad_left] = gxrow[src - pad_left] + gv;
                }
            }
        }
    }
}

/// Forward pass shared by the graph op and the inference-only encoder path,
/// so both produce bit-identical values.
pub(crate) fn conv1d_forward<E: Elem>(
    x: ndarray::ArrayView3<E>,
    w: ndarray::ArrayView3<E>,
    bias: ndarray::ArrayView1<E>,
    dilation: usize,
) -> Array3<E> {
    let (b, c, l) = x.dim();
    let (o, wc, k) = w.dim();
    assert_eq!(wc, c, "conv1d: channel mismatch");
    assert_eq!(bias.len(), o);
    let w2 = w.into_shape_with_order((o, c * k)).unwrap();
    let mut out = Array3::<E>::zeros((b, o, l));
    let mut cols = Array2::<E>::zeros((c * k, l));
    let xs = x.as_slice().expect("conv1d: non-standard layout");
    for bi in 0..b {
        im2col(&xs[bi * c * l..(bi + 1) * c * l], c, l, k, dilation, &mut cols);
        let mut osl = out.index_axis_mut(Axis(0), bi);
        general_mat_mul(E::one(), &w2, &cols, E::zero(), &mut osl);
    }
    for bi in 0..b {
        for oi in 0..o {
            let bias_v = bias[oi];
            out.index_axis_mut(Axis(0), bi)
                .index_axis_mut(Axis(0), oi)
                .mapv_inplace(|v| v + bias_v);
        }
    }
    out
}

impl<E: Elem> Graph<E> {
    /// Dilated 1-D convolution, length-preserving zero padding.
    /// `x`: (B, C, L), `w`: (O, C, K), `bias`: (O).
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Var, dilation: usize) -> Var {
        let vx = self.value(x).clone();
        let vw = self.value(w).clone();
        let vb = self.value(bias).clone();
        let x3 = vx.view().into_dimensionality::<Ix3>().unwrap();
        let w3 = vw.view().into_dimensionality::<Ix3>().unwrap();
        let (b, c, l) = x3.dim();
        let (o, _, k) = w3.dim();
        let b1 = vb.view().into_dimensionality::<Ix1>().unwrap();
        let out = conv1d_forward(x3, w3, b1, dilation);

        self.push(
            out.into_dyn(),
            vec![x, w, bias],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let x3 = vx.view().into_dimensionality::<Ix3>().unwrap();
                let xs = x3.as_slice().unwrap();
                let w2 = vw
                    .view()
                    .into_shape_with_order((o, c * k))
                    .unwrap()
                    .to_owned();

                let mut gw2 = Array2::<E>::zeros((o, c * k));
                let mut gx = Array3::<E>::zeros((b, c, l));
                let mut gb = ndarray::Array1::<E>::zeros(o);
                let mut cols = Array2::<E>::zeros((c * k, l));
                let mut gcols = Array2::<E>::zeros((c * k, l));
                {
                    let gxs = gx.as_slice_mut().unwrap();
                    for bi in 0..b {
                        let gsl = g3.index_axis(Axis(0), bi);
                        // d/dw accumulates g @ cols^T over the batch
                        im2col(&xs[bi * c * l..(bi + 1) * c * l], c, l, k, dilation, &mut cols);
                        general_mat_mul(E::one(), &gsl, &cols.t(), E::one(), &mut gw2);
                        // d/dx = col2im(w^T @ g)
                        general_mat_mul(E::one(), &w2.t(), &gsl, E::zero(), &mut gcols);
                        col2im(
                            &gcols,
                            c,
                            l,
                            k,
                            dilation,
                            &mut gxs[bi * c * l..(bi + 1) * c * l],
                        );
                        for oi in 0..o {
                            gb[oi] = gb[oi] + gsl.index_axis(Axis(0), oi).sum();
                        }
                    }
                }
                vec![
                    gx.into_dyn(),
                    gw2.into_shape_with_order((o, c, k)).unwrap().into_dyn(),
                    gb.into_dyn(),
                ]
            })),
        )
    }
}
