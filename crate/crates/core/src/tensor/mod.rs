//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every op records its inputs and a backward closure on an implicit tape
//! (the DAG of `Tensor` handles, ordered by creation id). `backward` on a
//! scalar walks that tape once in reverse creation order, so gradients are
//! deterministic in sequential mode. Forward ops validate that their output
//! is finite and fail loudly otherwise instead of letting NaNs poison a run.

mod conv;
mod linalg;
mod nn;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("backward already called on this tensor; rebuild the graph before calling again")]
    DoubleBackward,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}")]
    Invalid(String),
}

/// Context handed to backward closures.
pub(crate) struct BackCtx<'a> {
    pub out_data: &'a [f64],
    pub upstream: &'a [f64],
}

type BackFn = Box<dyn Fn(&BackCtx) -> Vec<Option<Vec<f64>>>>;

struct OpNode {
    parents: Vec<Tensor>,
    backward: BackFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    /// True if this tensor participates in the autodiff graph.
    requires_grad: bool,
    /// True only for leaves created with `param`: these receive `.grad`.
    grad_slot: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Option<OpNode>,
    backward_done: Cell<bool>,
}

/// Handle to an immutable tensor value. Cloning is cheap (shared storage).
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op, index: i });
        }
    }
    Ok(())
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new_leaf(data: Vec<f64>, shape: Vec<usize>, grad_slot: bool) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            requires_grad: grad_slot,
            grad_slot,
            grad: RefCell::new(None),
            op: None,
            backward_done: Cell::new(false),
        }))
    }

    /// Constant leaf (no gradient).
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(TensorError::Invalid(format!(
                "from_vec: shape {:?} needs {} values, got {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        check_finite("from_vec", &data)?;
        Ok(Tensor::new_leaf(data, shape.to_vec(), false))
    }

    /// Trainable leaf: receives `.grad` after backward.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(TensorError::Invalid(format!(
                "param: shape {:?} needs {} values, got {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        check_finite("param", &data)?;
        Ok(Tensor::new_leaf(data, shape.to_vec(), true))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new_leaf(vec![v], vec![1], false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new_leaf(vec![0.0; numel_of(shape)], shape.to_vec(), false)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::new_leaf(vec![1.0; numel_of(shape)], shape.to_vec(), false)
    }

    pub(crate) fn make_op(
        op: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackFn,
    ) -> Result<Tensor> {
        debug_assert_eq!(numel_of(&shape), data.len(), "{op}: bad output shape");
        check_finite(op, &data)?;
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        let node = if requires_grad {
            Some(OpNode { parents, backward })
        } else {
            None
        };
        Ok(Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad_slot: false,
            grad: RefCell::new(None),
            op: node,
            backward_done: Cell::new(false),
        })))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.0.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.0.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Accumulated gradient, if this is a `param` leaf that took part in a backward pass.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrite the value of a leaf in place (optimizer update).
    pub fn set_data(&self, new: Vec<f64>) -> Result<()> {
        if new.len() != self.numel() {
            return Err(TensorError::Invalid(format!(
                "set_data: expected {} values for shape {:?}, got {}",
                self.numel(),
                self.shape(),
                new.len()
            )));
        }
        check_finite("set_data", &new)?;
        *self.0.data.borrow_mut() = new;
        Ok(())
    }

    /// A constant copy that is cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::new_leaf(self.to_vec(), self.0.shape.clone(), false)
    }

    /// Reverse pass from a scalar loss. Gradients accumulate (+=) into every
    /// `param` leaf reachable from this tensor; call `zero_grad` between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.0.shape.clone()));
        }
        if self.0.backward_done.get() {
            return Err(TensorError::DoubleBackward);
        }
        self.0.backward_done.set(true);
        if !self.0.requires_grad {
            return Ok(());
        }

        // Collect the reachable differentiable subgraph.
        let mut seen: HashMap<u64, Tensor> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if seen.contains_key(&t.0.id) {
                continue;
            }
            if let Some(node) = &t.0.op {
                for p in &node.parents {
                    if p.0.requires_grad && !seen.contains_key(&p.0.id) {
                        stack.push(p.clone());
                    }
                }
            }
            seen.insert(t.0.id, t);
        }

        // Creation ids are monotone, so descending id order is a valid
        // reverse-topological order and is deterministic.
        let mut order: Vec<Tensor> = seen.into_values().collect();
        order.sort_by(|a, b| b.0.id.cmp(&a.0.id));

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.0.id, vec![1.0]);

        for t in order {
            let Some(g) = grads.remove(&t.0.id) else {
                continue;
            };
            if t.0.grad_slot {
                let mut slot = t.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    None => *slot = Some(g.clone()),
                }
            }
            if let Some(node) = &t.0.op {
                let parent_grads = {
                    let out = t.0.data.borrow();
                    (node.backward)(&BackCtx {
                        out_data: &out,
                        upstream: &g,
                    })
                };
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !p.0.requires_grad {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), p.numel());
                    let entry = grads
                        .entry(p.0.id)
                        .or_insert_with(|| vec![0.0; p.numel()]);
                    for (a, v) in entry.iter_mut().zip(&pg) {
                        *a += v;
                    }
                }
            }
        }
        Ok(())
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.0.shape != other.0.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.0.shape.clone(),
                rhs: other.0.shape.clone(),
            });
        }
        Ok(())
    }

    // ---- elementwise binary ----

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        Tensor::make_op(
            "add",
            data,
            self.0.shape.clone(),
            vec![self.clone(), other.clone()],
            Box::new(|ctx| {
                vec![
                    Some(ctx.upstream.to_vec()),
                    Some(ctx.upstream.to_vec()),
                ]
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        Tensor::make_op(
            "sub",
            data,
            self.0.shape.clone(),
            vec![self.clone(), other.clone()],
            Box::new(|ctx| {
                vec![
                    Some(ctx.upstream.to_vec()),
                    Some(ctx.upstream.iter().map(|g| -g).collect()),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        let a = self.clone();
        let b = other.clone();
        Tensor::make_op(
            "mul",
            data,
            self.0.shape.clone(),
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                let av = a.data();
                let bv = b.data();
                vec![
                    Some(ctx.upstream.iter().zip(bv.iter()).map(|(g, b)| g * b).collect()),
                    Some(ctx.upstream.iter().zip(av.iter()).map(|(g, a)| g * a).collect()),
                ]
            }),
        )
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "div")?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a / b)
            .collect();
        let a = self.clone();
        let b = other.clone();
        Tensor::make_op(
            "div",
            data,
            self.0.shape.clone(),
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                let av = a.data();
                let bv = b.data();
                let ga: Vec<f64> = ctx
                    .upstream
                    .iter()
                    .zip(bv.iter())
                    .map(|(g, b)| g / b)
                    .collect();
                let gb: Vec<f64> = ctx
                    .upstream
                    .iter()
                    .zip(av.iter().zip(bv.iter()))
                    .map(|(g, (a, b))| -g * a / (b * b))
                    .collect();
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    // ---- elementwise unary / scalar ----

    pub fn neg(&self) -> Result<Tensor> {
        self.mul_scalar(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|a| a + c).collect();
        Tensor::make_op(
            "add_scalar",
            data,
            self.0.shape.clone(),
            vec![self.clone()],
            Box::new(|ctx| vec![Some(ctx.upstream.to_vec())]),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|a| a * c).collect();
        Tensor::make_op(
            "mul_scalar",
            data,
            self.0.shape.clone(),
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(ctx.upstream.iter().map(|g| g * c).collect())]),
        )
    }

    pub fn ln(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|a| a.ln()).collect();
        let a = self.clone();
        Tensor::make_op(
            "ln",
            data,
            self.0.shape.clone(),
            vec![self.clone()],
            Box::new(move |ctx| {
                let av = a.data();
                vec![Some(
                    ctx.upstream.iter().zip(av.iter()).map(|(g, a)| g / a).collect(),
                )]
            }),
        )
    }

    pub fn exp(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|a| a.exp()).collect();
        Tensor::make_op(
            "exp",
            data,
            self.0.shape.clone(),
            vec![self.clone()],
            Box::new(|ctx| {
                vec![Some(
                    ctx.upstream
                        .iter()
                        .zip(ctx.out_data.iter())
                        .map(|(g, y)| g * y)
                        .collect(),
                )]
            }),
        )
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|a| a.sqrt()).collect();
        Tensor::make_op(
            "sqrt",
            data,
            self.0.shape.clone(),
            vec![self.clone()],
            Box::new(|ctx| {
                vec![Some(
                    ctx.upstream
                        .iter()
                        .zip(ctx.out_data.iter())
                        .map(|(g, y)| g / (2.0 * y))
                        .collect(),
                )]
            }),
        )
    }

    /// ln(1 + e^x), numerically stable for large |x|.
    pub fn softplus(&self) -> Result<Tensor> {
        fn sp(x: f64) -> f64 {
            if x > 30.0 {
                x
            } else if x < -30.0 {
                x.exp()
            } else {
                x.exp().ln_1p()
            }
        }
        fn sigmoid(x: f64) -> f64 {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        let data: Vec<f64> = self.data().iter().map(|a| sp(*a)).collect();
        let a = self.clone();
        Tensor::make_op(
            "softplus",
            data,
            self.0.shape.clone(),
            vec![self.clone()],
            Box::new(move |ctx| {
                let av = a.data();
                vec![Some(
                    ctx.upstream
                        .iter()
                        .zip(av.iter())
                        .map(|(g, x)| g * sigmoid(*x))
                        .collect(),
                )]
            }),
        )
    }

    // ---- reductions ----

    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::make_op(
            "sum",
            vec![s],
            vec![1],
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(vec![ctx.upstream[0]; n])]),
        )
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(TensorError::Invalid("mean of empty tensor".into()));
        }
        let n = self.numel();
        let s: f64 = self.data().iter().sum();
        Tensor::make_op(
            "mean",
            vec![s / n as f64],
            vec![1],
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(vec![ctx.upstream[0] / n as f64; n])]),
        )
    }

    /// Row sums of a rank-2 tensor: [K, C] -> [K].
    pub fn sum_lastdim(&self) -> Result<Tensor> {
        let [k, c] = self.rank2("sum_lastdim")?;
        let src = self.data();
        let data: Vec<f64> = (0..k).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect();
        drop(src);
        Tensor::make_op(
            "sum_lastdim",
            data,
            vec![k],
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![0.0; k * c];
                for i in 0..k {
                    for j in 0..c {
                        g[i * c + j] = ctx.upstream[i];
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Normalize each row of a rank-2 tensor to sum to one.
    pub fn normalize_lastdim(&self) -> Result<Tensor> {
        let [k, c] = self.rank2("normalize_lastdim")?;
        let src = self.data();
        let mut data = vec![0.0; k * c];
        let mut sums = vec![0.0; k];
        for i in 0..k {
            let s: f64 = src[i * c..(i + 1) * c].iter().sum();
            sums[i] = s;
            for j in 0..c {
                data[i * c + j] = src[i * c + j] / s;
            }
        }
        drop(src);
        Tensor::make_op(
            "normalize_lastdim",
            data,
            vec![k, c],
            vec![self.clone()],
            Box::new(move |ctx| {
                // y = x / s;  dx = (g - y * <g, y-row... see below>) / s
                let mut g = vec![0.0; k * c];
                for i in 0..k {
                    let row = &ctx.out_data[i * c..(i + 1) * c];
                    let gu = &ctx.upstream[i * c..(i + 1) * c];
                    let dot: f64 = gu.iter().zip(row.iter()).map(|(g, y)| g * y).sum();
                    for j in 0..c {
                        g[i * c + j] = (gu[j] - dot) / sums[i];
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Copy with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(TensorError::BadShape {
                op: "reshape",
                expected: format!("{} elements", self.numel()),
                got: shape.to_vec(),
            });
        }
        Tensor::make_op(
            "reshape",
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|ctx| vec![Some(ctx.upstream.to_vec())]),
        )
    }

    pub(crate) fn rank2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.0.shape.as_slice() {
            [a, b] => Ok([*a, *b]),
            _ => Err(TensorError::BadShape {
                op,
                expected: "rank-2 tensor".into(),
                got: self.0.shape.clone(),
            }),
        }
    }

    pub(crate) fn rank4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.0.shape.as_slice() {
            [a, b, c, d] => Ok([*a, *b, *c, *d]),
            _ => Err(TensorError::BadShape {
                op,
                expected: "rank-4 tensor".into(),
                got: self.0.shape.clone(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let w = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let loss = w.mul(&w).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn grad_accumulates_until_reset() {
        let w = Tensor::param(vec![3.0], &[1]).unwrap();
        for _ in 0..2 {
            let loss = w.mul(&w).unwrap().sum().unwrap();
            loss.backward().unwrap();
        }
        assert_eq!(w.grad().unwrap(), vec![12.0]);
        w.zero_grad();
        assert!(w.grad().is_none());
    }

    #[test]
    fn second_backward_errors() {
        let w = Tensor::param(vec![1.0], &[1]).unwrap();
        let loss = w.sum().unwrap();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(TensorError::DoubleBackward)));
    }

    #[test]
    fn non_scalar_loss_errors() {
        let w = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(
            w.backward(),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn detached_tensor_gets_no_gradient() {
        let w = Tensor::param(vec![2.0], &[1]).unwrap();
        let d = w.detach();
        let loss = d.mul(&d).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert!(w.grad().is_none());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn nan_is_rejected_at_op_boundary() {
        let a = Tensor::from_vec(vec![-1.0], &[1]).unwrap();
        assert!(matches!(a.ln(), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn normalize_rows_sum_to_one() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let n = a.normalize_lastdim().unwrap();
        let d = n.to_vec();
        assert!((d[0] + d[1] + d[2] - 1.0).abs() < 1e-12);
        assert!((d[3] + d[4] + d[5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = w*w + w  =>  dloss/dw = 2w + 1
        let w = Tensor::param(vec![3.0], &[1]).unwrap();
        let loss = w.mul(&w).unwrap().add(&w).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![7.0]);
    }
}
