use super::tape::{Op, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adds `f(k, g[k])` into a gradient slot, summing when the slot is a
/// broadcast scalar.
pub(super) fn accumulate_broadcast<T: Scalar>(
    slot: Option<&mut [T]>,
    g: &[T],
    f: impl Fn(usize, T) -> T,
) {
    let Some(s) = slot else { return };
    if s.len() == g.len() {
        for (k, (s, &gk)) in s.iter_mut().zip(g).enumerate() {
            *s = *s + f(k, gk);
        }
    } else {
        let total: T = g.iter().enumerate().map(|(k, &gk)| f(k, gk)).sum();
        s[0] = s[0] + total;
    }
}

fn broadcast_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.len() == 1 {
        Ok(a.shape().to_vec())
    } else if a.len() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::shape(format!(
            "cannot broadcast {:?} with {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    let shape = broadcast_shape(a, b)?;
    let (ad, bd) = (a.data(), b.data());
    let n: usize = shape.iter().product();
    let pick = |x: &[T], k: usize| if x.len() == 1 { x[0] } else { x[k] };
    let data = (0..n).map(|k| f(pick(ad, k), pick(bd, k))).collect();
    Tensor::new(&shape, data)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    /// Elementwise sum. Shapes must match or one side must hold one value.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = binary(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = binary(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = binary(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// `1 - x`.
    pub fn complement(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::one() - x);
        self.push(out, Op::Complement(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if v.rank() == 0 || v.shape()[1..] != tail[..] {
                return Err(Error::shape(format!(
                    "concat: {:?} does not match trailing {:?}",
                    v.shape(),
                    tail
                )));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }
}
