//! Matrix products and convolution lowering.
//!
//! Heavy products are split across the rayon pool; each output chunk is
//! produced by exactly one thread, so results are bit-deterministic
//! regardless of thread scheduling.

use ndarray::parallel::prelude::*;
use ndarray::{Array2, Array3, ArrayD, ArrayView2, ArrayView3, Axis, Ix2, Ix3, Ix4, Zip};

use super::Var;

/// Row-chunked parallel 2D matmul.
pub(crate) fn par_mm(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (n, k) = a.dim();
    let m = b.dim().1;
    if n * k * m < (1 << 17) || rayon::current_num_threads() < 2 {
        return a.dot(&b);
    }
    let chunk = n.div_ceil(rayon::current_num_threads());
    let mut out = Array2::zeros((n, m));
    out.axis_chunks_iter_mut(Axis(0), chunk)
        .into_par_iter()
        .zip(a.axis_chunks_iter(Axis(0), chunk).into_par_iter())
        .for_each(|(mut oc, ac)| oc.assign(&ac.dot(&b)));
    out
}

/// Batch-parallel 3D matmul: `[B, n, k] x [B, k, m] -> [B, n, m]`.
pub(crate) fn par_bmm(a: ArrayView3<f64>, b: ArrayView3<f64>) -> Array3<f64> {
    let (bsz, n, _k) = a.dim();
    let m = b.dim().2;
    let mut out = Array3::zeros((bsz, n, m));
    Zip::from(out.outer_iter_mut())
        .and(a.outer_iter())
        .and(b.outer_iter())
        .par_for_each(|mut o, av, bv| o.assign(&av.dot(&bv)));
    out
}

fn as2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2d view")
}

fn as3(a: &ArrayD<f64>) -> ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().expect("3d view")
}

impl Var {
    /// 2D matrix product `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&self, rhs: &Var) -> Var {
        assert_eq!(self.ndim(), 2);
        assert_eq!(rhs.ndim(), 2);
        assert_eq!(
            self.shape()[1],
            rhs.shape()[0],
            "matmul inner dims {:?} x {:?}",
            self.shape(),
            rhs.shape()
        );
        let (aid, bid) = (self.id(), rhs.id());
        let value = {
            let a = self.graph();
            let tape = a.inner.borrow();
            par_mm(as2(&tape.nodes[aid].value), as2(&tape.nodes[bid].value)).into_dyn()
        };
        self.graph().push(
            value,
            Some(Box::new(move |ctx, sink| {
                    let g = as2(ctx.grad);
                    let a = as2(ctx.value(aid));
                    let b = as2(ctx.value(bid));
                    sink(aid, par_mm(g, b.t()).into_dyn());
                    sink(bid, par_mm(a.t(), g).into_dyn());
                })),
        )
    }

    /// Batched matrix product `[B, n, k] x [B, k, m] -> [B, n, m]`.
    pub fn bmm(&self, rhs: &Var) -> Var {
        assert_eq!(self.ndim(), 3);
        assert_eq!(rhs.ndim(), 3);
        assert_eq!(self.shape()[0], rhs.shape()[0], "bmm batch dims differ");
        assert_eq!(self.shape()[2], rhs.shape()[1], "bmm inner dims differ");
        let (aid, bid) = (self.id(), rhs.id());
        let value = {
            let tape = self.graph().inner.borrow();
            par_bmm(as3(&tape.nodes[aid].value), as3(&tape.nodes[bid].value)).into_dyn()
        };
        self.graph().push(
            value,
            Some(Box::new(move |ctx, sink| {
                    let g = as3(ctx.grad);
                    let a = as3(ctx.value(aid));
                    let b = as3(ctx.value(bid));
                    let bt = b.permuted_axes([0, 2, 1]);
                    let at = a.permuted_axes([0, 2, 1]);
                    let bt = bt.as_standard_layout();
                    let at = at.as_standard_layout();
                    sink(aid, par_bmm(g, bt.view()).into_dyn());
                    sink(bid, par_bmm(at.view(), g).into_dyn());
                })),
        )
    }

    /// Affine map over the last axis: `x[..., in] -> x W + b` with
    /// `w: [in, out]`, `b: [out]`.
    pub fn linear(&self, w: &Var, b: &Var) -> Var {
        let in_dim = *self.shape().last().unwrap();
        assert_eq!(w.shape()[0], in_dim, "linear fan-in mismatch");
        let rows = self.numel() / in_dim;
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = w.shape()[1];
        let flat = self.reshape(&[rows, in_dim]);
        let prod = flat.matmul(w).reshape(&out_shape);
        prod.add(b)
    }

    /// Lowers 2D conv patches: `[B, H, W, C] -> [B, OH*OW, k*k*C]` with
    /// stride `s` and symmetric zero padding `pad`. Row (oy, ox) lists
    /// entries in (ky, kx, c) order.
    pub fn im2col(&self, k: usize, s: usize, pad: usize) -> Var {
        assert_eq!(self.ndim(), 4, "im2col expects [B, H, W, C]");
        let id = self.id();
        let (bsz, h, w, c) = {
            let sh = self.shape();
            (sh[0], sh[1], sh[2], sh[3])
        };
        let oh = (h + 2 * pad - k) / s + 1;
        let ow = (w + 2 * pad - k) / s + 1;
        let value = self.with_value(|a| {
            let a = a.view().into_dimensionality::<Ix4>().unwrap();
            let mut out = Array3::<f64>::zeros((bsz, oh * ow, k * k * c));
            for bi in 0..bsz {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row = oy * ow + ox;
                        let mut col = 0;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - pad as isize;
                                let ix = (ox * s + kx) as isize - pad as isize;
                                let inside =
                                    iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize;
                                for ch in 0..c {
                                    out[[bi, row, col]] = if inside {
                                        a[[bi, iy as usize, ix as usize, ch]]
                                    } else {
                                        0.0
                                    };
                                    col += 1;
                                }
                            }
                        }
                    }
                }
            }
            out.into_dyn()
        });
        self.graph().push(
            value,
            Some(Box::new(move |ctx, sink| {
                    let g = ctx
                        .grad
                        .view()
                        .into_dimensionality::<Ix3>()
                        .expect("im2col grad");
                    let mut dx = ndarray::Array4::<f64>::zeros((bsz, h, w, c));
                    for bi in 0..bsz {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let row = oy * ow + ox;
                                let mut col = 0;
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (oy * s + ky) as isize - pad as isize;
                                        let ix = (ox * s + kx) as isize - pad as isize;
                                        let inside = iy >= 0
                                            && iy < h as isize
                                            && ix >= 0
                                            && ix < w as isize;
                                        for ch in 0..c {
                                            if inside {
                                                dx[[bi, iy as usize, ix as usize, ch]] +=
                                                    g[[bi, row, col]];
                                            }
                                            col += 1;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    sink(id, dx.into_dyn())
                })),
        )
    }
}

