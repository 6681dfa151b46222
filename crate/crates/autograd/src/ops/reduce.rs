use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::var::{Backward, Var};

struct Sum {
    shape: Vec<usize>,
}
struct Fill {
    src_shape: Vec<usize>,
}
struct SumRows {
    shape: Vec<usize>,
}
struct ExpandRows {
    rows: usize,
}
struct ChannelSum {
    shape: Vec<usize>,
}
struct ChannelBroadcast;

/// Splits a shape into (outer, channels, inner) around axis 1.
fn channel_split(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::invalid("channel op", format!("need rank >= 2, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl<T: Scalar> Backward<T> for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, _: &[Var<T>], g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(g.fill(&self.shape)?)])
    }
}

impl<T: Scalar> Backward<T> for Fill {
    fn name(&self) -> &'static str {
        "fill"
    }
    fn backward(&self, _: &[Var<T>], g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(g.sum().reshape(&self.src_shape)?)])
    }
}

impl<T: Scalar> Backward<T> for SumRows {
    fn name(&self) -> &'static str {
        "sum_rows"
    }
    fn backward(&self, _: &[Var<T>], g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(g.expand_rows(&self.shape)?)])
    }
}

impl<T: Scalar> Backward<T> for ExpandRows {
    fn name(&self) -> &'static str {
        "expand_rows"
    }
    fn backward(&self, _: &[Var<T>], g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        debug_assert_eq!(g.shape()[0], self.rows);
        Ok(vec![Some(g.sum_rows()?)])
    }
}

impl<T: Scalar> Backward<T> for ChannelSum {
    fn name(&self) -> &'static str {
        "channel_sum"
    }
    fn backward(&self, _: &[Var<T>], g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(g.channel_broadcast(&self.shape)?)])
    }
}

impl<T: Scalar> Backward<T> for ChannelBroadcast {
    fn name(&self) -> &'static str {
        "channel_broadcast"
    }
    fn backward(&self, _: &[Var<T>], g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(g.channel_sum()?)])
    }
}

impl<T: Scalar> Var<T> {
    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Var<T> {
        let out = Tensor::scalar(self.value().sum());
        Var::record(
            out,
            Sum {
                shape: self.shape().to_vec(),
            },
            vec![self.clone()],
        )
    }

    pub fn mean(&self) -> Var<T> {
        let n = T::from_usize(self.len().max(1)).unwrap();
        self.sum().scale(T::one() / n)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn fill(&self, shape: &[usize]) -> Result<Var<T>> {
        if self.len() != 1 {
            return Err(Error::invalid("fill", format!("source shape {:?}", self.shape())));
        }
        let out = Tensor::full(shape, self.data()[0]);
        Ok(Var::record(
            out,
            Fill {
                src_shape: self.shape().to_vec(),
            },
            vec![self.clone()],
        ))
    }

    /// Sums everything except the leading axis: `[R, ...] -> [R]`.
    pub fn sum_rows(&self) -> Result<Var<T>> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(Error::invalid("sum_rows", "rank-0 input"));
        }
        let rows = shape[0];
        let inner = if rows == 0 { 0 } else { self.len() / rows };
        let data = self.data();
        let out: Vec<T> = (0..rows)
            .map(|r| data[r * inner..(r + 1) * inner].iter().copied().sum())
            .collect();
        Ok(Var::record(
            Tensor::new(&[rows], out)?,
            SumRows {
                shape: shape.to_vec(),
            },
            vec![self.clone()],
        ))
    }

    /// Inverse of [`Var::sum_rows`]: repeats `[R]` over the trailing axes of `shape`.
    pub fn expand_rows(&self, shape: &[usize]) -> Result<Var<T>> {
        if self.shape().len() != 1 || shape.first() != Some(&self.shape()[0]) {
            return Err(Error::shape("expand_rows", self.shape(), shape));
        }
        let rows = shape[0];
        let inner: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(rows * inner);
        for &v in self.data() {
            out.extend(std::iter::repeat_n(v, inner));
        }
        Ok(Var::record(
            Tensor::new(shape, out)?,
            ExpandRows { rows },
            vec![self.clone()],
        ))
    }

    /// Sums over every axis except axis 1: `[N, C, ...] -> [C]`.
    pub fn channel_sum(&self) -> Result<Var<T>> {
        let (outer, c, inner) = channel_split(self.shape())?;
        let data = self.data();
        let mut out = vec![T::zero(); c];
        for n in 0..outer {
            for (ch, o) in out.iter_mut().enumerate() {
                let start = (n * c + ch) * inner;
                *o = *o + data[start..start + inner].iter().copied().sum();
            }
        }
        Ok(Var::record(
            Tensor::new(&[c], out)?,
            ChannelSum {
                shape: self.shape().to_vec(),
            },
            vec![self.clone()],
        ))
    }

    /// Broadcasts a per-channel vector `[C]` to `shape = [N, C, ...]`.
    pub fn channel_broadcast(&self, shape: &[usize]) -> Result<Var<T>> {
        let (outer, c, inner) = channel_split(shape)?;
        if self.shape() != [c] {
            return Err(Error::shape("channel_broadcast", self.shape(), shape));
        }
        let mut out = Vec::with_capacity(outer * c * inner);
        for _ in 0..outer {
            for &v in self.data() {
                out.extend(std::iter::repeat_n(v, inner));
            }
        }
        Ok(Var::record(
            Tensor::new(shape, out)?,
            ChannelBroadcast,
            vec![self.clone()],
        ))
    }

    /// Adds a per-channel bias `[C]` to `self = [N, C, ...]`.
    pub fn add_channel_bias(&self, bias: &Var<T>) -> Result<Var<T>> {
        self.add(&bias.channel_broadcast(self.shape())?)
    }
}
