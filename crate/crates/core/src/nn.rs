//! Parameterised layers over a shared [`ParamSet`]. Layers hold slot indices;
//! the caller binds the set to `Var`s once per forward pass.

use rand::Rng;
use tensorgrad::{kaiming_uniform, ConvSpec, ParamSet, Scalar, Tensor, Var};

use crate::error::Result;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct Conv {
    w: usize,
    b: usize,
    pub spec: ConvSpec,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: ConvSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = cin / spec.groups * k * k * k;
        let w = params.push(
            format!("{name}.weight"),
            kaiming_uniform(&[cout, cin / spec.groups, k, k, k], fan_in, LEAKY_SLOPE, rng),
        )?;
        let b = params.push(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Conv { w, b, spec, cin, cout })
    }

    pub fn forward<T: Scalar>(&self, p: &[Var<T>], x: &Var<T>) -> Result<Var<T>> {
        Ok(x.conv3d(&p[self.w], self.spec)?.add_channel_bias(&p[self.b])?)
    }

    pub fn weight_slot(&self) -> usize {
        self.w
    }

    pub fn bias_slot(&self) -> usize {
        self.b
    }
}

/// Dense layer on `[N, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let w = params.push(
            format!("{name}.weight"),
            tensorgrad::uniform(&[fan_in, fan_out], bound, rng),
        )?;
        let b = params.push(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(Linear { w, b })
    }

    pub fn forward<T: Scalar>(&self, p: &[Var<T>], x: &Var<T>) -> Result<Var<T>> {
        Ok(x.matmul(&p[self.w])?.add_channel_bias(&p[self.b])?)
    }

    pub fn slots(&self) -> [usize; 2] {
        [self.w, self.b]
    }
}

pub fn lrelu<T: Scalar>(x: Var<T>) -> Var<T> {
    x.leaky_relu(T::from_f64_lossy(LEAKY_SLOPE))
}

/// Concatenation along the channel axis.
pub fn cat<T: Scalar>(parts: &[Var<T>]) -> Result<Var<T>> {
    Ok(Var::concat(parts, 1)?)
}

/// Spatial mean `[N, C, ...] -> [N, C]`.
pub fn global_avg_pool<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let shape = x.shape();
    let (n, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let pooled = x.reshape(&[n * c, s])?.sum_rows()?;
    Ok(pooled
        .scale(T::one() / T::from_usize(s).unwrap())
        .reshape(&[n, c])?)
}

/// Stacks `[X, Y, Z]` arrays into an `[N, C, X, Y, Z]` tensor, channel-major per sample.
pub fn stack_channels<T: Scalar>(samples: &[Vec<&ndarray::Array3<f32>>]) -> Result<Tensor<T>> {
    let n = samples.len();
    let c = samples.first().map_or(0, Vec::len);
    let (x, y, z) = samples
        .first()
        .and_then(|s| s.first())
        .map_or((0, 0, 0), |a| a.dim());
    let mut data = Vec::with_capacity(n * c * x * y * z);
    for chans in samples {
        for a in chans {
            if a.dim() != (x, y, z) {
                return Err(crate::Error::Shape(format!("{:?} vs {:?}", a.dim(), (x, y, z))));
            }
            data.extend(a.iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
    }
    Ok(Tensor::new(&[n, c, x, y, z], data)?)
}

/// Splits `[N, 1, X, Y, Z]` back into `N` arrays.
pub fn unstack<T: Scalar>(t: &Tensor<T>) -> Result<Vec<ndarray::Array3<f32>>> {
    let shape = t.shape();
    if shape.len() != 5 || shape[1] != 1 {
        return Err(crate::Error::Shape(format!("expected [N, 1, X, Y, Z], got {shape:?}")));
    }
    let vol = shape[2] * shape[3] * shape[4];
    Ok(t.data()
        .chunks(vol)
        .map(|c| {
            ndarray::Array3::from_shape_vec(
                (shape[2], shape[3], shape[4]),
                c.iter().map(|v| v.to_f64_lossy() as f32).collect(),
            )
            .expect("chunk length matches")
        })
        .collect())
}
