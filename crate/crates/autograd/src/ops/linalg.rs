use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;
use crate::var::{Backward, Var};

struct MatMul {
    trans_a: bool,
    trans_b: bool,
}

impl<T: Scalar> Backward<T> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, x: &[Var<T>], g: &Var<T>, needed: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        let (a, b) = (&x[0], &x[1]);
        let (ta, tb) = (self.trans_a, self.trans_b);
        let ga = if !needed[0] {
            None
        } else if ta {
            Some(b.matmul_t(g, tb, true)?)
        } else {
            Some(g.matmul_t(b, false, !tb)?)
        };
        let gb = if !needed[1] {
            None
        } else if tb {
            Some(g.matmul_t(a, true, ta)?)
        } else {
            Some(a.matmul_t(g, !ta, false)?)
        };
        Ok(vec![ga, gb])
    }
}

fn dims2(shape: &[usize], trans: bool) -> Result<(usize, usize)> {
    match *shape {
        [r, c] if trans => Ok((c, r)),
        [r, c] => Ok((r, c)),
        _ => Err(Error::invalid("matmul", format!("rank-2 operands, got {shape:?}"))),
    }
}

impl<T: Scalar> Var<T> {
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` where `op` transposes when the flag is set.
    pub fn matmul_t(&self, other: &Var<T>, trans_a: bool, trans_b: bool) -> Result<Var<T>> {
        let (m, k) = dims2(self.shape(), trans_a)?;
        let (k2, n) = dims2(other.shape(), trans_b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.data(), trans_a, other.data(), trans_b, &mut out, false);
        Ok(Var::record(
            Tensor::new(&[m, n], out)?,
            MatMul { trans_a, trans_b },
            vec![self.clone(), other.clone()],
        ))
    }
}
