//! Matrix products and affine helpers.

use super::{Result, Tensor, TensorError};

/// c[m,n] += a[m,k] * b[k,n]
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// c[m,n] += a^T[m,k] * b[k,n] where a is stored as [k,m]
pub(crate) fn gemm_at_b_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// c[m,n] += a[m,k] * b^T[k,n] where b is stored as [n,k]
pub(crate) fn gemm_a_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            crow[j] += acc;
        }
    }
}

impl Tensor {
    /// [m,k] x [k,n] -> [m,n]
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let [m, k] = self.rank2("matmul")?;
        let [k2, n] = other.rank2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(&self.data(), &other.data(), &mut out, m, k, n);
        let a = self.clone();
        let b = other.clone();
        Tensor::make_op(
            "matmul",
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                // dA = g * B^T ; dB = A^T * g
                let mut ga = vec![0.0; m * k];
                gemm_a_bt_acc(ctx.upstream, &b.data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                gemm_at_b_acc(&a.data(), ctx.upstream, &mut gb, k, m, n);
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    /// Broadcast-add a row vector: [m,n] + [n] -> [m,n]
    pub fn add_rowvec(&self, bias: &Tensor) -> Result<Tensor> {
        let [m, n] = self.rank2("add_rowvec")?;
        if bias.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_rowvec",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let bv = bias.to_vec();
        let data: Vec<f64> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a + bv[i % n])
            .collect();
        Tensor::make_op(
            "add_rowvec",
            data,
            vec![m, n],
            vec![self.clone(), bias.clone()],
            Box::new(move |ctx| {
                let mut gb = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        gb[j] += ctx.upstream[i * n + j];
                    }
                }
                vec![Some(ctx.upstream.to_vec()), Some(gb)]
            }),
        )
    }
}
