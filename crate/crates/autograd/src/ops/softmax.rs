use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::var::{Backward, Var};

struct Softmax;
struct LogSoftmax;

fn rows_of(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, k] => Ok((r, k)),
        _ => Err(Error::invalid("softmax", format!("rank-2 input, got {shape:?}"))),
    }
}

fn log_softmax_rows<T: Scalar>(data: &[T], rows: usize, k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * k);
    for r in 0..rows {
        let row = &data[r * k..(r + 1) * k];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

impl<T: Scalar> Backward<T> for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, x: &[Var<T>], g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        // y ⊙ (g − Σ_k g_k y_k)
        let y = x[0].softmax_rows()?;
        let dot = g.mul(&y)?.sum_rows()?.expand_rows(y.shape())?;
        Ok(vec![Some(y.mul(&g.sub(&dot)?)?)])
    }
}

impl<T: Scalar> Backward<T> for LogSoftmax {
    fn name(&self) -> &'static str {
        "log_softmax"
    }
    fn backward(&self, x: &[Var<T>], g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        // g − softmax(x) ⊙ Σ_k g_k
        let y = x[0].softmax_rows()?;
        let total = g.sum_rows()?.expand_rows(y.shape())?;
        Ok(vec![Some(g.sub(&y.mul(&total)?)?)])
    }
}

impl<T: Scalar> Var<T> {
    /// Row-wise softmax of a `[rows, k]` matrix.
    pub fn softmax_rows(&self) -> Result<Var<T>> {
        let (r, k) = rows_of(self.shape())?;
        let out: Vec<T> = log_softmax_rows(self.data(), r, k)
            .into_iter()
            .map(|v| v.exp())
            .collect();
        Ok(Var::record(Tensor::new(&[r, k], out)?, Softmax, vec![self.clone()]))
    }

    /// Row-wise log-softmax of a `[rows, k]` matrix.
    pub fn log_softmax_rows(&self) -> Result<Var<T>> {
        let (r, k) = rows_of(self.shape())?;
        let out = log_softmax_rows(self.data(), r, k);
        Ok(Var::record(Tensor::new(&[r, k], out)?, LogSoftmax, vec![self.clone()]))
    }
}
