//! 3D convolution over `[N, C, X, Y, Z]` tensors via im2col + GEMM.
//!
//! The forward convolution, its input gradient (a transposed convolution) and
//! its weight gradient are three recorded ops whose backward rules are
//! expressed through one another, so the family is closed under
//! differentiation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;
use crate::var::{Backward, Var};

/// Stride, zero padding, dilation and channel groups; identical on all three axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvSpec {
    /// Shape-preserving spec for an odd kernel of size `k` at stride 1.
    pub fn same(k: usize, dilation: usize) -> Self {
        ConvSpec {
            padding: dilation * (k - 1) / 2,
            dilation,
            ..Default::default()
        }
    }

    pub fn strided(k: usize, stride: usize) -> Self {
        ConvSpec {
            stride,
            padding: (k - 1) / 2,
            ..Default::default()
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// Output spatial size for input size `i` and kernel size `k`.
    pub fn output_len(&self, i: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = i + 2 * self.padding;
        (padded >= span && self.stride > 0).then(|| (padded - span) / self.stride + 1)
    }
}

const DIRECT_MAX_COUT: usize = 2;

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    i: [usize; 3],
    k: [usize; 3],
    o: [usize; 3],
    s: usize,
    p: usize,
    d: usize,
}

impl Geom {
    fn new(x_shape: &[usize], w_shape: &[usize], spec: &ConvSpec) -> Result<Self> {
        let (&[n, cin, i0, i1, i2], &[cout, cin_g, k0, k1, k2]) = (x_shape, w_shape) else {
            return Err(Error::invalid(
                "conv3d",
                format!("expected rank-5 input and weight, got {x_shape:?} / {w_shape:?}"),
            ));
        };
        let g = spec.groups.max(1);
        if cin % g != 0 || cout % g != 0 || cin_g != cin / g {
            return Err(Error::shape("conv3d", x_shape, w_shape));
        }
        let mut o = [0; 3];
        for (a, (&i, &k)) in [i0, i1, i2].iter().zip(&[k0, k1, k2]).enumerate() {
            o[a] = spec.output_len(i, k).ok_or_else(|| {
                Error::invalid("conv3d", format!("kernel {k} does not fit input extent {i}"))
            })?;
        }
        Ok(Geom {
            n,
            cin,
            cout,
            groups: g,
            i: [i0, i1, i2],
            k: [k0, k1, k2],
            o,
            s: spec.stride,
            p: spec.padding,
            d: spec.dilation,
        })
    }

    fn ivol(&self) -> usize {
        self.i.iter().product()
    }
    fn kvol(&self) -> usize {
        self.k.iter().product()
    }
    fn ovol(&self) -> usize {
        self.o.iter().product()
    }
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn pointwise(&self) -> bool {
        self.kvol() == 1 && self.s == 1 && self.p == 0
    }
    /// Few output channels: accumulating runs directly beats building columns.
    fn direct(&self) -> bool {
        !self.pointwise() && self.cout_g() <= DIRECT_MAX_COUT
    }
    fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.o[0], self.o[1], self.o[2]]
    }
    fn in_shape(&self) -> Vec<usize> {
        vec![self.n, self.cin, self.i[0], self.i[1], self.i[2]]
    }
    fn w_shape(&self) -> Vec<usize> {
        vec![self.cout, self.cin_g(), self.k[0], self.k[1], self.k[2]]
    }

    /// Output positions `lo..hi` along `axis` whose input index `o*s + off` is in bounds.
    fn valid(&self, axis: usize, kidx: usize) -> (usize, usize, isize) {
        let off = (kidx * self.d) as isize - self.p as isize;
        let s = self.s as isize;
        let o = self.o[axis] as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = ((self.i[axis] as isize - 1 - off).div_euclid(s) + 1).clamp(0, o);
        let lo = lo.min(hi);
        (lo as usize, hi as usize, off)
    }

    /// Visits every (column row, output offset, input offset, run length) segment.
    /// Runs are contiguous along the last axis when the stride is 1.
    fn for_each_run(&self, channels: usize, mut f: impl FnMut(usize, usize, usize)) {
        let ovol = self.ovol();
        self.for_each_run_rows(channels, |row, dst, src, len| f(row * ovol + dst, src, len));
    }

    /// Like [`Geom::for_each_run`] but yields `(column row, offset within the row, input offset, length)`.
    fn for_each_run_rows(&self, channels: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (o1, o2) = (self.o[1], self.o[2]);
        let (i1, i2) = (self.i[1], self.i[2]);
        let ivol = self.ivol();
        for c in 0..channels {
            for kx in 0..self.k[0] {
                let (x_lo, x_hi, x_off) = self.valid(0, kx);
                for ky in 0..self.k[1] {
                    let (y_lo, y_hi, y_off) = self.valid(1, ky);
                    for kz in 0..self.k[2] {
                        let (z_lo, z_hi, z_off) = self.valid(2, kz);
                        let row = ((c * self.k[0] + kx) * self.k[1] + ky) * self.k[2] + kz;
                        if z_lo >= z_hi {
                            continue;
                        }
                        for ox in x_lo..x_hi {
                            let ix = (ox * self.s) as isize + x_off;
                            for oy in y_lo..y_hi {
                                let iy = (oy * self.s) as isize + y_off;
                                let src = c * ivol + (ix as usize * i1 + iy as usize) * i2;
                                let dst = (ox * o1 + oy) * o2;
                                if self.s == 1 {
                                    let iz = (z_lo as isize + z_off) as usize;
                                    f(row, dst + z_lo, src + iz, z_hi - z_lo);
                                } else {
                                    for oz in z_lo..z_hi {
                                        let iz = ((oz * self.s) as isize + z_off) as usize;
                                        f(row, dst + oz, src + iz, 1);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        cols.iter_mut().for_each(|v| *v = T::zero());
        self.for_each_run(self.cin_g(), |dst, src, len| {
            cols[dst..dst + len].copy_from_slice(&x[src..src + len]);
        });
    }

    fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        self.for_each_run(self.cin_g(), |dst, src, len| {
            for (xv, &cv) in x[src..src + len].iter_mut().zip(&cols[dst..dst + len]) {
                *xv = *xv + cv;
            }
        });
    }
}

fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: &Geom) -> Result<Tensor<T>> {
    let (ivol, ovol, kvol) = (g.ivol(), g.ovol(), g.kvol());
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let wg_len = cout_g * cin_g * kvol;
    let mut out = vec![T::zero(); g.n * g.cout * ovol];
    let xd = x.data();
    let wd = w.data();
    out.par_chunks_mut(g.cout * ovol)
        .enumerate()
        .for_each(|(n, yn)| {
            let xn = &xd[n * g.cin * ivol..(n + 1) * g.cin * ivol];
            if g.direct() {
                for gi in 0..g.groups {
                    let xg = &xn[gi * cin_g * ivol..(gi + 1) * cin_g * ivol];
                    let wg = &wd[gi * wg_len..(gi + 1) * wg_len];
                    let yg = &mut yn[gi * cout_g * ovol..(gi + 1) * cout_g * ovol];
                    g.for_each_run_rows(cin_g, |row, dst, src, len| {
                        for co in 0..cout_g {
                            let wv = wg[co * cin_g * kvol + row];
                            let y = &mut yg[co * ovol + dst..co * ovol + dst + len];
                            for (yv, &xv) in y.iter_mut().zip(&xg[src..src + len]) {
                                *yv = *yv + wv * xv;
                            }
                        }
                    });
                }
                return;
            }
            let mut cols = if g.pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); cin_g * kvol * ovol]
            };
            for gi in 0..g.groups {
                let xg = &xn[gi * cin_g * ivol..(gi + 1) * cin_g * ivol];
                let cols_ref: &[T] = if g.pointwise() {
                    xg
                } else {
                    g.im2col(xg, &mut cols);
                    &cols
                };
                gemm(
                    cout_g,
                    cin_g * kvol,
                    ovol,
                    &wd[gi * wg_len..(gi + 1) * wg_len],
                    false,
                    cols_ref,
                    false,
                    &mut yn[gi * cout_g * ovol..(gi + 1) * cout_g * ovol],
                    false,
                );
            }
        });
    Tensor::new(&g.out_shape(), out)
}

fn conv_input_grad<T: Scalar>(gy: &Tensor<T>, w: &Tensor<T>, g: &Geom) -> Result<Tensor<T>> {
    let (ivol, ovol, kvol) = (g.ivol(), g.ovol(), g.kvol());
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let wg_len = cout_g * cin_g * kvol;
    let mut out = vec![T::zero(); g.n * g.cin * ivol];
    let gyd = gy.data();
    let wd = w.data();
    out.par_chunks_mut(g.cin * ivol)
        .enumerate()
        .for_each(|(n, gxn)| {
            let gyn = &gyd[n * g.cout * ovol..(n + 1) * g.cout * ovol];
            if g.direct() {
                for gi in 0..g.groups {
                    let gyg = &gyn[gi * cout_g * ovol..(gi + 1) * cout_g * ovol];
                    let wg = &wd[gi * wg_len..(gi + 1) * wg_len];
                    let gxg = &mut gxn[gi * cin_g * ivol..(gi + 1) * cin_g * ivol];
                    g.for_each_run_rows(cin_g, |row, dst, src, len| {
                        for co in 0..cout_g {
                            let wv = wg[co * cin_g * kvol + row];
                            let gyr = &gyg[co * ovol + dst..co * ovol + dst + len];
                            for (xv, &yv) in gxg[src..src + len].iter_mut().zip(gyr) {
                                *xv = *xv + wv * yv;
                            }
                        }
                    });
                }
                return;
            }
            let mut cols = if g.pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); cin_g * kvol * ovol]
            };
            for gi in 0..g.groups {
                let gyg = &gyn[gi * cout_g * ovol..(gi + 1) * cout_g * ovol];
                let wg = &wd[gi * wg_len..(gi + 1) * wg_len];
                let gxg = &mut gxn[gi * cin_g * ivol..(gi + 1) * cin_g * ivol];
                if g.pointwise() {
                    gemm(cin_g, cout_g, ovol, wg, true, gyg, false, gxg, false);
                } else {
                    gemm(cin_g * kvol, cout_g, ovol, wg, true, gyg, false, &mut cols, false);
                    g.col2im(&cols, gxg);
                }
            }
        });
    Tensor::new(&g.in_shape(), out)
}

fn conv_weight_grad<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>, g: &Geom) -> Result<Tensor<T>> {
    let (ivol, ovol, kvol) = (g.ivol(), g.ovol(), g.kvol());
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let wg_len = cout_g * cin_g * kvol;
    let xd = x.data();
    let gyd = gy.data();
    let partials: Vec<Vec<T>> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let mut gw = vec![T::zero(); g.cout * cin_g * kvol];
            let xn = &xd[n * g.cin * ivol..(n + 1) * g.cin * ivol];
            let gyn = &gyd[n * g.cout * ovol..(n + 1) * g.cout * ovol];
            if g.direct() {
                for gi in 0..g.groups {
                    let xg = &xn[gi * cin_g * ivol..(gi + 1) * cin_g * ivol];
                    let gyg = &gyn[gi * cout_g * ovol..(gi + 1) * cout_g * ovol];
                    let gwg = &mut gw[gi * wg_len..(gi + 1) * wg_len];
                    g.for_each_run_rows(cin_g, |row, dst, src, len| {
                        for co in 0..cout_g {
                            let gyr = &gyg[co * ovol + dst..co * ovol + dst + len];
                            let dot = gyr.iter().zip(&xg[src..src + len]).fold(T::zero(), |a, (&p, &q)| a + p * q);
                            let slot = &mut gwg[co * cin_g * kvol + row];
                            *slot = *slot + dot;
                        }
                    });
                }
                return gw;
            }
            let mut cols = if g.pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); cin_g * kvol * ovol]
            };
            for gi in 0..g.groups {
                let xg = &xn[gi * cin_g * ivol..(gi + 1) * cin_g * ivol];
                let cols_ref: &[T] = if g.pointwise() {
                    xg
                } else {
                    g.im2col(xg, &mut cols);
                    &cols
                };
                gemm(
                    cout_g,
                    ovol,
                    cin_g * kvol,
                    &gyn[gi * cout_g * ovol..(gi + 1) * cout_g * ovol],
                    false,
                    cols_ref,
                    true,
                    &mut gw[gi * wg_len..(gi + 1) * wg_len],
                    false,
                );
            }
            gw
        })
        .collect();
    let mut out = vec![T::zero(); g.cout * cin_g * kvol];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o = *o + v;
        }
    }
    Tensor::new(&g.w_shape(), out)
}

struct Conv3d {
    spec: ConvSpec,
}
struct ConvInputGrad {
    spec: ConvSpec,
    x_shape: Vec<usize>,
}
struct ConvWeightGrad {
    spec: ConvSpec,
    w_shape: Vec<usize>,
}

impl<T: Scalar> Backward<T> for Conv3d {
    fn name(&self) -> &'static str {
        "conv3d"
    }
    fn backward(&self, x: &[Var<T>], g: &Var<T>, needed: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        let (input, weight) = (&x[0], &x[1]);
        let gx = if needed[0] {
            Some(g.conv3d_input_grad(weight, self.spec, input.shape())?)
        } else {
            None
        };
        let gw = if needed[1] {
            Some(input.conv3d_weight_grad(g, self.spec, weight.shape())?)
        } else {
            None
        };
        Ok(vec![gx, gw])
    }
}

impl<T: Scalar> Backward<T> for ConvInputGrad {
    fn name(&self) -> &'static str {
        "conv3d_input_grad"
    }
    fn backward(&self, x: &[Var<T>], g: &Var<T>, needed: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        // out = Cᵀ(gy, w):  ⟨out, G⟩ = ⟨gy, C(G, w)⟩ = ⟨w, W(G, gy)⟩
        let (gy, weight) = (&x[0], &x[1]);
        let d_gy = if needed[0] {
            Some(g.conv3d(weight, self.spec)?)
        } else {
            None
        };
        let d_w = if needed[1] {
            Some(g.conv3d_weight_grad(gy, self.spec, weight.shape())?)
        } else {
            None
        };
        debug_assert_eq!(g.shape(), self.x_shape.as_slice());
        Ok(vec![d_gy, d_w])
    }
}

impl<T: Scalar> Backward<T> for ConvWeightGrad {
    fn name(&self) -> &'static str {
        "conv3d_weight_grad"
    }
    fn backward(&self, x: &[Var<T>], g: &Var<T>, needed: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        // out = W(x, gy):  ⟨out, B⟩ = ⟨gy, C(x, B)⟩ = ⟨x, Cᵀ(gy, B)⟩
        let (input, gy) = (&x[0], &x[1]);
        let d_x = if needed[0] {
            Some(gy.conv3d_input_grad(g, self.spec, input.shape())?)
        } else {
            None
        };
        let d_gy = if needed[1] {
            Some(input.conv3d(g, self.spec)?)
        } else {
            None
        };
        debug_assert_eq!(g.shape(), self.w_shape.as_slice());
        Ok(vec![d_x, d_gy])
    }
}

impl<T: Scalar> Var<T> {
    /// Cross-correlation of `self: [N, Cin, X, Y, Z]` with `weight: [Cout, Cin/groups, kx, ky, kz]`.
    pub fn conv3d(&self, weight: &Var<T>, spec: ConvSpec) -> Result<Var<T>> {
        let g = Geom::new(self.shape(), weight.shape(), &spec)?;
        let out = conv_forward(self.value(), weight.value(), &g)?;
        Ok(Var::record(
            out,
            Conv3d { spec },
            vec![self.clone(), weight.clone()],
        ))
    }

    /// Gradient of a convolution with respect to its input, given `self` as
    /// the output gradient. Equivalent to a transposed convolution.
    pub fn conv3d_input_grad(&self, weight: &Var<T>, spec: ConvSpec, x_shape: &[usize]) -> Result<Var<T>> {
        let g = Geom::new(x_shape, weight.shape(), &spec)?;
        if self.shape() != g.out_shape().as_slice() {
            return Err(Error::shape("conv3d_input_grad", self.shape(), &g.out_shape()));
        }
        let out = conv_input_grad(self.value(), weight.value(), &g)?;
        Ok(Var::record(
            out,
            ConvInputGrad {
                spec,
                x_shape: x_shape.to_vec(),
            },
            vec![self.clone(), weight.clone()],
        ))
    }

    /// Gradient of a convolution with respect to its weight, given `self` as
    /// the input and `gy` as the output gradient.
    pub fn conv3d_weight_grad(&self, gy: &Var<T>, spec: ConvSpec, w_shape: &[usize]) -> Result<Var<T>> {
        let g = Geom::new(self.shape(), w_shape, &spec)?;
        if gy.shape() != g.out_shape().as_slice() {
            return Err(Error::shape("conv3d_weight_grad", gy.shape(), &g.out_shape()));
        }
        let out = conv_weight_grad(self.value(), gy.value(), &g)?;
        Ok(Var::record(
            out,
            ConvWeightGrad {
                spec,
                w_shape: w_shape.to_vec(),
            },
            vec![self.clone(), gy.clone()],
        ))
    }
}

struct Upsample2;
struct SumPool2;

fn spatial(shape: &[usize], op: &'static str) -> Result<(usize, [usize; 3])> {
    match *shape {
        [n, c, a, b, d] => Ok((n * c, [a, b, d])),
        _ => Err(Error::invalid(op, format!("expected rank-5, got {shape:?}"))),
    }
}

impl<T: Scalar> Backward<T> for Upsample2 {
    fn name(&self) -> &'static str {
        "upsample2"
    }
    fn backward(&self, _: &[Var<T>], g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(g.sum_pool2()?)])
    }
}

impl<T: Scalar> Backward<T> for SumPool2 {
    fn name(&self) -> &'static str {
        "sum_pool2"
    }
    fn backward(&self, _: &[Var<T>], g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(g.upsample2()?)])
    }
}

impl<T: Scalar> Var<T> {
    /// Nearest-neighbour ×2 upsampling of all three spatial axes.
    pub fn upsample2(&self) -> Result<Var<T>> {
        let (planes, [a, b, c]) = spatial(self.shape(), "upsample2")?;
        let (a2, b2, c2) = (2 * a, 2 * b, 2 * c);
        let src = self.data();
        let mut out = vec![T::zero(); planes * a2 * b2 * c2];
        for p in 0..planes {
            let s = &src[p * a * b * c..(p + 1) * a * b * c];
            let o = &mut out[p * a2 * b2 * c2..(p + 1) * a2 * b2 * c2];
            for x in 0..a2 {
                for y in 0..b2 {
                    let row = &s[((x / 2) * b + y / 2) * c..((x / 2) * b + y / 2 + 1) * c];
                    let dst = &mut o[(x * b2 + y) * c2..(x * b2 + y + 1) * c2];
                    for (z, v) in dst.iter_mut().enumerate() {
                        *v = row[z / 2];
                    }
                }
            }
        }
        let sh = self.shape();
        Ok(Var::record(
            Tensor::new(&[sh[0], sh[1], a2, b2, c2], out)?,
            Upsample2,
            vec![self.clone()],
        ))
    }

    /// Sums non-overlapping 2×2×2 blocks; every spatial extent must be even.
    pub fn sum_pool2(&self) -> Result<Var<T>> {
        let (planes, [a2, b2, c2]) = spatial(self.shape(), "sum_pool2")?;
        if a2 % 2 != 0 || b2 % 2 != 0 || c2 % 2 != 0 {
            return Err(Error::invalid("sum_pool2", format!("odd extent in {:?}", self.shape())));
        }
        let (a, b, c) = (a2 / 2, b2 / 2, c2 / 2);
        let src = self.data();
        let mut out = vec![T::zero(); planes * a * b * c];
        for p in 0..planes {
            let s = &src[p * a2 * b2 * c2..(p + 1) * a2 * b2 * c2];
            let o = &mut out[p * a * b * c..(p + 1) * a * b * c];
            for x in 0..a2 {
                for y in 0..b2 {
                    let row = &s[(x * b2 + y) * c2..(x * b2 + y + 1) * c2];
                    let dst = &mut o[((x / 2) * b + y / 2) * c..((x / 2) * b + y / 2 + 1) * c];
                    for (z, &v) in row.iter().enumerate() {
                        dst[z / 2] = dst[z / 2] + v;
                    }
                }
            }
        }
        let sh = self.shape();
        Ok(Var::record(
            Tensor::new(&[sh[0], sh[1], a, b, c], out)?,
            SumPool2,
            vec![self.clone()],
        ))
    }
}
