//! Shape-manipulating ops: reshape, permute, slice, concat.

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use super::Var;

impl Var {
    /// Row-major reshape (copies into standard layout).
    pub fn reshape(&self, new_shape: &[usize]) -> Var {
        assert_eq!(
            self.numel(),
            new_shape.iter().product::<usize>(),
            "reshape {:?} -> {:?} changes element count",
            self.shape(),
            new_shape
        );
        let id = self.id();
        let old_shape = self.shape().to_vec();
        let value = self.with_value(|a| logical_reshape(a, new_shape));
        self.graph().push(
            value,
            Some(Box::new(move |ctx, sink| sink(id, logical_reshape(ctx.grad, &old_shape)))),
        )
    }

    /// Axis permutation, materialized in standard layout.
    pub fn permute(&self, axes: &[usize]) -> Var {
        assert_eq!(axes.len(), self.ndim());
        let id = self.id();
        let axes = axes.to_vec();
        let mut inverse = vec![0usize; axes.len()];
        for (dst, &src) in axes.iter().enumerate() {
            inverse[src] = dst;
        }
        let value = self.with_value(|a| {
            a.view()
                .permuted_axes(IxDyn(&axes))
                .as_standard_layout()
                .to_owned()
        });
        self.graph().push(
            value,
            Some(Box::new(move |ctx, sink| {
                    sink(
                        id,
                        ctx.grad
                            .view()
                            .permuted_axes(IxDyn(&inverse))
                            .as_standard_layout()
                            .to_owned(),
                    )
                })),
        )
    }

    /// Contiguous slice of `len` entries starting at `start` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Var {
        assert!(start + len <= self.shape()[axis]);
        let id = self.id();
        let parent_shape = self.shape().to_vec();
        let value = self.with_value(|a| {
            a.slice_axis(Axis(axis), Slice::from(start..start + len))
                .to_owned()
        });
        self.graph().push(
            value,
            Some(Box::new(move |ctx, sink| {
                    let mut g = ArrayD::zeros(IxDyn(&parent_shape));
                    g.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                        .assign(ctx.grad);
                    sink(id, g)
                })),
        )
    }

    /// Concatenation along `axis`.
    pub fn concat(parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let graph = parts[0].graph().clone();
        let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let value = {
            let views: Vec<ArrayD<f64>> = parts.iter().map(|p| p.value()).collect();
            let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(axis), &view_refs).expect("concat shapes")
        };
        graph.push(
            value,
            Some(Box::new(move |ctx, sink| {
                let mut offset = 0;
                for (&pid, &len) in ids.iter().zip(&lens) {
                    let g = ctx
                        .grad
                        .slice_axis(Axis(axis), Slice::from(offset..offset + len))
                        .to_owned();
                    sink(pid, g);
                    offset += len;
                }
            })),
        )
    }
}

/// Reshape that follows logical (row-major) iteration order regardless of
/// the source layout.
fn logical_reshape(a: &ArrayD<f64>, new_shape: &[usize]) -> ArrayD<f64> {
    if let Some(slice) = a.as_slice() {
        ArrayD::from_shape_vec(IxDyn(new_shape), slice.to_vec()).expect("numel checked")
    } else {
        ArrayD::from_shape_vec(IxDyn(new_shape), a.iter().cloned().collect())
            .expect("numel checked")
    }
}
