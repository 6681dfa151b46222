use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::var::{Backward, Var};

struct Reshape {
    from: Vec<usize>,
}
struct Narrow {
    axis: usize,
    start: usize,
    full: usize,
}
struct Pad {
    axis: usize,
    start: usize,
    len: usize,
}
struct Concat {
    axis: usize,
    sizes: Vec<usize>,
}
struct Transpose2d;

/// `(outer, axis length, inner)` for a row-major shape.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl<T: Scalar> Backward<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _: &[Var<T>], g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(g.reshape(&self.from)?)])
    }
}

impl<T: Scalar> Backward<T> for Narrow {
    fn name(&self) -> &'static str {
        "narrow"
    }
    fn backward(&self, _: &[Var<T>], g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(g.pad_axis(self.axis, self.start, self.full)?)])
    }
}

impl<T: Scalar> Backward<T> for Pad {
    fn name(&self) -> &'static str {
        "pad_axis"
    }
    fn backward(&self, _: &[Var<T>], g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(g.narrow(self.axis, self.start, self.len)?)])
    }
}

impl<T: Scalar> Backward<T> for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, _: &[Var<T>], g: &Var<T>, needed: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(self.sizes.len());
        for (&len, &need) in self.sizes.iter().zip(needed) {
            out.push(if need {
                Some(g.narrow(self.axis, start, len)?)
            } else {
                None
            });
            start += len;
        }
        Ok(out)
    }
}

impl<T: Scalar> Backward<T> for Transpose2d {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn backward(&self, _: &[Var<T>], g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(g.transpose()?)])
    }
}

impl<T: Scalar> Var<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let out = self.value().clone().reshape(shape)?;
        Ok(Var::record(
            out,
            Reshape {
                from: self.shape().to_vec(),
            },
            vec![self.clone()],
        ))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(shape, axis);
        let data = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[axis] = len;
        Ok(Var::record(
            Tensor::new(&new_shape, out)?,
            Narrow { axis, start, full },
            vec![self.clone()],
        ))
    }

    /// Zero-pads along `axis` so that `self` lands at `start` in an axis of length `full`.
    pub fn pad_axis(&self, axis: usize, start: usize, full: usize) -> Result<Var<T>> {
        let shape = self.shape();
        if axis >= shape.len() || start + shape[axis] > full {
            return Err(Error::invalid(
                "pad_axis",
                format!("axis {axis} start {start} full {full} of {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(shape, axis);
        let mut new_shape = shape.to_vec();
        new_shape[axis] = full;
        let mut out = vec![T::zero(); outer * full * inner];
        let data = self.data();
        for o in 0..outer {
            let dst = (o * full + start) * inner;
            out[dst..dst + len * inner].copy_from_slice(&data[o * len * inner..(o + 1) * len * inner]);
        }
        Ok(Var::record(
            Tensor::new(&new_shape, out)?,
            Pad { axis, start, len },
            vec![self.clone()],
        ))
    }

    pub fn concat(parts: &[Var<T>], axis: usize) -> Result<Var<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::invalid("concat", format!("axis {axis} of rank {rank}")));
        }
        for p in parts {
            let same = p.shape().len() == rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&sizes) {
                out.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Var::record(
            Tensor::new(&shape, out)?,
            Concat { axis, sizes },
            parts.to_vec(),
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Var<T>> {
        let &[r, c] = self.shape() else {
            return Err(Error::invalid("transpose", format!("rank-2 input, got {:?}", self.shape())));
        };
        let data = self.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = data[i * c + j];
            }
        }
        Ok(Var::record(
            Tensor::new(&[c, r], out)?,
            Transpose2d,
            vec![self.clone()],
        ))
    }
}
