use super::tape::{Op, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `a (M x K) * b (K x N)` on raw row-major slices.
pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + aip * bv;
            }
        }
    }
    out
}

pub(super) fn matmul_backward_lhs<T: Scalar>(b: &Tensor<T>, g: &[T], s: &mut [T]) {
    let (k, n) = (b.shape()[0], b.shape()[1]);
    let m = g.len() / n;
    let bd = b.data();
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let bp = &bd[p * n..(p + 1) * n];
            let dot: T = gi.iter().zip(bp).map(|(&x, &y)| x * y).sum();
            s[i * k + p] = s[i * k + p] + dot;
        }
    }
}

pub(super) fn matmul_backward_rhs<T: Scalar>(a: &Tensor<T>, g: &[T], s: &mut [T]) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = g.len() / m;
    let ad = a.data();
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            for (sv, &gv) in s[p * n..(p + 1) * n].iter_mut().zip(gi) {
                *sv = *sv + aip * gv;
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (sa, sb) => {
                return Err(Error::shape(format!("matmul of {sa:?} and {sb:?}")));
            }
        };
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(&[m, n], data)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }
}
