use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::var::{Backward, Var};

struct Add;
struct Sub;
struct Mul;
struct Div;
struct Scale<T>(T);
struct AddScalar;
struct Abs;
struct Square;
struct Sqrt;
struct Tanh;
struct Exp;
struct LeakyRelu<T>(T);

impl<T: Scalar> Backward<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[Var<T>], g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(g.clone()), Some(g.clone())])
    }
}

impl<T: Scalar> Backward<T> for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &[Var<T>], g: &Var<T>, needed: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(g.clone()), needed[1].then(|| g.neg())])
    }
}

impl<T: Scalar> Backward<T> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, x: &[Var<T>], g: &Var<T>, needed: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        let ga = if needed[0] { Some(g.mul(&x[1])?) } else { None };
        let gb = if needed[1] { Some(g.mul(&x[0])?) } else { None };
        Ok(vec![ga, gb])
    }
}

impl<T: Scalar> Backward<T> for Div {
    fn name(&self) -> &'static str {
        "div"
    }
    fn backward(&self, x: &[Var<T>], g: &Var<T>, needed: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        let ga = if needed[0] { Some(g.div(&x[1])?) } else { None };
        let gb = if needed[1] {
            // d(a/b)/db = -a / b²
            Some(g.mul(&x[0])?.div(&x[1].square())?.neg())
        } else {
            None
        };
        Ok(vec![ga, gb])
    }
}

impl<T: Scalar> Backward<T> for Scale<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[Var<T>], g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(g.scale(self.0))])
    }
}

impl<T: Scalar> Backward<T> for AddScalar {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, _: &[Var<T>], g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(g.clone())])
    }
}

impl<T: Scalar> Backward<T> for Abs {
    fn name(&self) -> &'static str {
        "abs"
    }
    fn backward(&self, x: &[Var<T>], g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        let sign = x[0].value().map(|v| {
            if v > T::zero() {
                T::one()
            } else if v < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        });
        Ok(vec![Some(g.mul(&Var::constant(sign))?)])
    }
}

impl<T: Scalar> Backward<T> for Square {
    fn name(&self) -> &'static str {
        "square"
    }
    fn backward(&self, x: &[Var<T>], g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        let two = T::one() + T::one();
        Ok(vec![Some(g.mul(&x[0].scale(two))?)])
    }
}

impl<T: Scalar> Backward<T> for Sqrt {
    fn name(&self) -> &'static str {
        "sqrt"
    }
    fn backward(&self, x: &[Var<T>], g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        let two = T::one() + T::one();
        Ok(vec![Some(g.div(&x[0].sqrt().scale(two))?)])
    }
}

impl<T: Scalar> Backward<T> for Tanh {
    fn name(&self) -> &'static str {
        "tanh"
    }
    fn backward(&self, x: &[Var<T>], g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        let slope = x[0].tanh().square().neg().add_scalar(T::one());
        Ok(vec![Some(g.mul(&slope)?)])
    }
}

impl<T: Scalar> Backward<T> for Exp {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn backward(&self, x: &[Var<T>], g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(g.mul(&x[0].exp())?)])
    }
}

impl<T: Scalar> Backward<T> for LeakyRelu<T> {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }
    fn backward(&self, x: &[Var<T>], g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        let slope = self.0;
        let d = x[0]
            .value()
            .map(|v| if v > T::zero() { T::one() } else { slope });
        Ok(vec![Some(g.mul(&Var::constant(d))?)])
    }
}

impl<T: Scalar> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        let out = self.value().zip_map(other.value(), "add", |a, b| a + b)?;
        Ok(Var::record(out, Add, vec![self.clone(), other.clone()]))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        let out = self.value().zip_map(other.value(), "sub", |a, b| a - b)?;
        Ok(Var::record(out, Sub, vec![self.clone(), other.clone()]))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        let out = self.value().zip_map(other.value(), "mul", |a, b| a * b)?;
        Ok(Var::record(out, Mul, vec![self.clone(), other.clone()]))
    }

    pub fn div(&self, other: &Var<T>) -> Result<Var<T>> {
        let out = self.value().zip_map(other.value(), "div", |a, b| a / b)?;
        Ok(Var::record(out, Div, vec![self.clone(), other.clone()]))
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-T::one())
    }

    pub fn scale(&self, c: T) -> Var<T> {
        Var::record(self.value().map(|v| v * c), Scale(c), vec![self.clone()])
    }

    pub fn add_scalar(&self, c: T) -> Var<T> {
        Var::record(self.value().map(|v| v + c), AddScalar, vec![self.clone()])
    }

    pub fn abs(&self) -> Var<T> {
        Var::record(self.value().map(|v| v.abs()), Abs, vec![self.clone()])
    }

    pub fn square(&self) -> Var<T> {
        Var::record(self.value().map(|v| v * v), Square, vec![self.clone()])
    }

    pub fn sqrt(&self) -> Var<T> {
        Var::record(self.value().map(|v| v.sqrt()), Sqrt, vec![self.clone()])
    }

    pub fn tanh(&self) -> Var<T> {
        Var::record(self.value().map(|v| v.tanh()), Tanh, vec![self.clone()])
    }

    pub fn exp(&self) -> Var<T> {
        Var::record(self.value().map(|v| v.exp()), Exp, vec![self.clone()])
    }

    pub fn leaky_relu(&self, slope: T) -> Var<T> {
        let out = self
            .value()
            .map(|v| if v > T::zero() { v } else { v * slope });
        Var::record(out, LeakyRelu(slope), vec![self.clone()])
    }

    pub fn relu(&self) -> Var<T> {
        self.leaky_relu(T::zero())
    }

    /// Multiplies by a tensor that is treated as a constant.
    pub fn mul_const(&self, c: &Tensor<T>) -> Result<Var<T>> {
        self.mul(&Var::constant(c.clone()))
    }

    pub fn add_const(&self, c: &Tensor<T>) -> Result<Var<T>> {
        self.add(&Var::constant(c.clone()))
    }
}
