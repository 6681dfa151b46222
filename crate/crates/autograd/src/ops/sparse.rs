//! Fixed sparse linear maps: gathers, scatters, crops and interpolation.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::var::{Backward, Var};

#[derive(Clone, Debug)]
struct Csr<T> {
    indptr: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<T>,
}

impl<T: Scalar> Csr<T> {
    fn apply(&self, x: &[T]) -> Vec<T> {
        self.indptr
            .windows(2)
            .map(|w| {
                (w[0]..w[1])
                    .map(|e| self.weights[e] * x[self.indices[e]])
                    .sum()
            })
            .collect()
    }
}

/// A linear map `y = A x` between flattened tensors, stored together with `Aᵀ`.
#[derive(Clone, Debug)]
pub struct SparseMap<T> {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    forward: Csr<T>,
    adjoint: Csr<T>,
}

impl<T: Scalar> SparseMap<T> {
    /// `rows[i]` lists the `(input index, weight)` terms of output element `i`.
    pub fn new(in_shape: &[usize], out_shape: &[usize], rows: Vec<Vec<(usize, T)>>) -> Result<Self> {
        let in_len: usize = in_shape.iter().product();
        let out_len: usize = out_shape.iter().product();
        if rows.len() != out_len {
            return Err(Error::invalid(
                "sparse_map",
                format!("{} rows for output shape {out_shape:?}", rows.len()),
            ));
        }
        let mut fwd = Csr {
            indptr: vec![0],
            indices: Vec::new(),
            weights: Vec::new(),
        };
        let mut cols: Vec<Vec<(usize, T)>> = vec![Vec::new(); in_len];
        for (i, row) in rows.into_iter().enumerate() {
            for (j, w) in row {
                if j >= in_len {
                    return Err(Error::invalid("sparse_map", format!("input index {j} >= {in_len}")));
                }
                fwd.indices.push(j);
                fwd.weights.push(w);
                cols[j].push((i, w));
            }
            fwd.indptr.push(fwd.indices.len());
        }
        let mut adj = Csr {
            indptr: vec![0],
            indices: Vec::new(),
            weights: Vec::new(),
        };
        for col in cols {
            for (i, w) in col {
                adj.indices.push(i);
                adj.weights.push(w);
            }
            adj.indptr.push(adj.indices.len());
        }
        Ok(SparseMap {
            in_shape: in_shape.to_vec(),
            out_shape: out_shape.to_vec(),
            forward: fwd,
            adjoint: adj,
        })
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    /// Applies the map (or its adjoint) to a plain tensor.
    pub fn apply_tensor(&self, x: &Tensor<T>, adjoint: bool) -> Result<Tensor<T>> {
        let (csr, src, dst) = if adjoint {
            (&self.adjoint, &self.out_shape, &self.in_shape)
        } else {
            (&self.forward, &self.in_shape, &self.out_shape)
        };
        if x.len() != src.iter().product::<usize>() {
            return Err(Error::shape("sparse_map", x.shape(), src));
        }
        Tensor::new(dst, csr.apply(x.data()))
    }
}

struct SparseApply<T> {
    map: Rc<SparseMap<T>>,
    adjoint: bool,
}

impl<T: Scalar> Backward<T> for SparseApply<T> {
    fn name(&self) -> &'static str {
        "sparse_map"
    }
    fn backward(&self, _: &[Var<T>], g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(g.sparse_map(&self.map, !self.adjoint)?)])
    }
}

impl<T: Scalar> Var<T> {
    /// Applies `map` (or its adjoint). The input is reinterpreted by length.
    pub fn sparse_map(&self, map: &Rc<SparseMap<T>>, adjoint: bool) -> Result<Var<T>> {
        let src_shape = if adjoint { map.out_shape() } else { map.in_shape() };
        let x = if self.shape() == src_shape {
            self.clone()
        } else {
            self.reshape(src_shape)?
        };
        let out = map.apply_tensor(x.value(), adjoint)?;
        Ok(Var::record(
            out,
            SparseApply {
                map: Rc::clone(map),
                adjoint,
            },
            vec![x],
        ))
    }
}
