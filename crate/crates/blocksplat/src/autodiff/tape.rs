//! Wengert tape: reverse-mode AD via operation recording.
//!
//! Forward calls record one node per primitive op; `backward` replays the
//! nodes once, in reverse order, accumulating gradients by the chain rule.
//! Custom nodes (rasterizer, image losses) supply their own vector-Jacobian
//! closure and plug into the same traversal.

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a value in a tape's arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive differentiable operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    /// Elementwise a + b.
    Add,
    /// Elementwise a - b.
    Sub,
    /// Elementwise a * b.
    Mul,
    /// [m,k] x [k,n] matrix product.
    MatMul,
    /// max(x, 0); subgradient at 0 is 0.
    Relu,
    /// 1 / (1 + exp(-x)).
    Sigmoid,
    /// ln(1 + exp(x)), stable for large |x|.
    Softplus,
    /// exp(x).
    Exp,
    /// Sum of all elements, scalar output.
    Sum,
    /// Mean of all elements, scalar output.
    Mean,
    /// Elementwise x^2.
    Square,
    /// Elementwise c * x.
    Scale(f64),
    /// Concatenate along `axis` (rank 1 or 2 inputs).
    Concat { axis: usize },
    /// Contiguous slice [start, start+len) along `axis` (rank 1 or 2).
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
}

/// Vector-Jacobian product for a custom node:
/// (input values, output value, output gradient) -> per-input gradients.
pub type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + Send>;

enum NodeKind {
    Prim(Op),
    /// Same data, new shape; gradient reshapes back.
    Reshape,
    Custom(CustomBackward),
}

struct Node {
    inputs: Vec<ValueId>,
    output: ValueId,
    kind: NodeKind,
}

/// Records forward values and nodes; single-threaded.
pub struct Tape {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
    params: Vec<ValueId>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push_value(&mut self, t: Tensor) -> ValueId {
        let id = ValueId(self.values.len());
        self.values.push(t);
        id
    }

    /// Register a learnable parameter slot. Slot order is the registration order.
    pub fn param(&mut self, t: Tensor) -> ValueId {
        let id = self.push_value(t);
        self.params.push(id);
        id
    }

    /// A leaf value that is not a parameter; gradients flowing into it are dropped.
    pub fn constant(&mut self, t: Tensor) -> ValueId {
        self.push_value(t)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn params(&self) -> &[ValueId] {
        &self.params
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn check_id(&self, id: ValueId) -> Result<()> {
        if id.0 >= self.values.len() {
            return Err(Error::contract(format!(
                "value id {} not on this tape",
                id.0
            )));
        }
        Ok(())
    }

    /// Record a primitive op. Inputs must be finite and shape-compatible.
    pub fn apply(&mut self, op: Op, inputs: &[ValueId]) -> Result<ValueId> {
        for &id in inputs {
            self.check_id(id)?;
            if !self.values[id.0].all_finite() {
                return Err(Error::numerics(format!("non-finite input to {op:?}")));
            }
        }
        let in_refs: Vec<&Tensor> = inputs.iter().map(|&id| &self.values[id.0]).collect();
        let out = eval_op(op, &in_refs)?;
        if !out.all_finite() {
            return Err(Error::numerics(format!("non-finite output of {op:?}")));
        }
        let out_id = self.push_value(out);
        self.nodes.push(Node {
            inputs: inputs.to_vec(),
            output: out_id,
            kind: NodeKind::Prim(op),
        });
        Ok(out_id)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        self.apply(Op::Relu, &[x])
    }
    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId> {
        self.apply(Op::Sigmoid, &[x])
    }
    pub fn softplus(&mut self, x: ValueId) -> Result<ValueId> {
        self.apply(Op::Softplus, &[x])
    }
    pub fn exp(&mut self, x: ValueId) -> Result<ValueId> {
        self.apply(Op::Exp, &[x])
    }
    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        self.apply(Op::Sum, &[x])
    }
    pub fn mean(&mut self, x: ValueId) -> Result<ValueId> {
        self.apply(Op::Mean, &[x])
    }
    pub fn square(&mut self, x: ValueId) -> Result<ValueId> {
        self.apply(Op::Square, &[x])
    }
    pub fn scale(&mut self, x: ValueId, c: f64) -> Result<ValueId> {
        self.apply(Op::Scale(c), &[x])
    }
    pub fn concat(&mut self, inputs: &[ValueId], axis: usize) -> Result<ValueId> {
        self.apply(Op::Concat { axis }, inputs)
    }
    pub fn slice(&mut self, x: ValueId, axis: usize, start: usize, len: usize) -> Result<ValueId> {
        self.apply(Op::Slice { axis, start, len }, &[x])
    }

    /// Same data under a new shape; gradient is reshaped back.
    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        self.check_id(x)?;
        let out = self.values[x.0].reshaped(shape)?;
        let out_id = self.push_value(out);
        self.nodes.push(Node {
            inputs: vec![x],
            output: out_id,
            kind: NodeKind::Reshape,
        });
        Ok(out_id)
    }

    /// Record a node with a caller-supplied forward value and backward closure.
    pub fn custom(
        &mut self,
        inputs: &[ValueId],
        output: Tensor,
        backward: CustomBackward,
    ) -> Result<ValueId> {
        for &id in inputs {
            self.check_id(id)?;
        }
        if !output.all_finite() {
            return Err(Error::numerics("non-finite output of custom op"));
        }
        let out_id = self.push_value(output);
        self.nodes.push(Node {
            inputs: inputs.to_vec(),
            output: out_id,
            kind: NodeKind::Custom(backward),
        });
        Ok(out_id)
    }
}

/// Gradients per tape value after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `id`; exact zeros if the slot is unreachable.
    pub fn get(&self, tape: &Tape, id: ValueId) -> Tensor {
        match &self.grads[id.index()] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).shape().to_vec()),
        }
    }

    /// Gradients for every registered parameter slot, in registration order.
    pub fn wrt_params(&self, tape: &Tape) -> Vec<Tensor> {
        tape.params().iter().map(|&id| self.get(tape, id)).collect()
    }
}

/// Reverse pass from a scalar loss. Visits each node exactly once.
pub fn backward(tape: &Tape, loss: ValueId) -> Result<Gradients> {
    tape.check_id(loss)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::contract(format!(
            "backward needs a scalar loss, got shape {:?}",
            tape.value(loss).shape()
        )));
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; tape.values.len()];
    grads[loss.index()] = Some(Tensor::scalar(1.0));

    for node in tape.nodes.iter().rev() {
        let out_grad = match grads[node.output.index()].take() {
            Some(g) => g,
            None => continue,
        };
        let in_refs: Vec<&Tensor> = node.inputs.iter().map(|&id| tape.value(id)).collect();
        let out_val = tape.value(node.output);
        let in_grads = match &node.kind {
            NodeKind::Prim(op) => backward_op(*op, &in_refs, out_val, &out_grad),
            NodeKind::Reshape => {
                vec![out_grad
                    .reshaped(in_refs[0].shape().to_vec())
                    .expect("reshape gradient shape")]
            }
            NodeKind::Custom(f) => f(&in_refs, out_val, &out_grad),
        };
        debug_assert_eq!(in_grads.len(), node.inputs.len());
        for (&id, g) in node.inputs.iter().zip(in_grads) {
            debug_assert_eq!(g.shape(), tape.value(id).shape());
            match &mut grads[id.index()] {
                Some(acc) => acc.add_assign(&g)?,
                slot @ None => *slot = Some(g),
            }
        }
        // Re-seed the output slot so sibling reads of this value stay correct
        // (a value can feed multiple later nodes; those were already drained).
        grads[node.output.index()] = Some(out_grad);
    }
    Ok(Gradients { grads })
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn eval_op(op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let arity_err = |want: &str| {
        Err(Error::shape(format!(
            "{op:?} expects {want} inputs, got {}",
            inputs.len()
        )))
    };
    match op {
        Op::Add | Op::Sub | Op::Mul => {
            if inputs.len() != 2 {
                return arity_err("2");
            }
            let f = match op {
                Op::Add => |a: f64, b: f64| a + b,
                Op::Sub => |a: f64, b: f64| a - b,
                _ => |a: f64, b: f64| a * b,
            };
            inputs[0].zip_map(inputs[1], f)
        }
        Op::MatMul => {
            if inputs.len() != 2 {
                return arity_err("2");
            }
            matmul(inputs[0], inputs[1])
        }
        Op::Relu | Op::Sigmoid | Op::Softplus | Op::Exp | Op::Square => {
            if inputs.len() != 1 {
                return arity_err("1");
            }
            let f = match op {
                Op::Relu => |x: f64| if x > 0.0 { x } else { 0.0 },
                Op::Sigmoid => stable_sigmoid,
                Op::Softplus => stable_softplus,
                Op::Exp => f64::exp,
                _ => |x: f64| x * x,
            };
            Ok(inputs[0].map(f))
        }
        Op::Sum => {
            if inputs.len() != 1 {
                return arity_err("1");
            }
            Ok(Tensor::scalar(inputs[0].data().iter().sum()))
        }
        Op::Mean => {
            if inputs.len() != 1 {
                return arity_err("1");
            }
            if inputs[0].is_empty() {
                return Err(Error::shape("mean of empty tensor"));
            }
            let n = inputs[0].len() as f64;
            Ok(Tensor::scalar(inputs[0].data().iter().sum::<f64>() / n))
        }
        Op::Scale(c) => {
            if inputs.len() != 1 {
                return arity_err("1");
            }
            Ok(inputs[0].map(|x| c * x))
        }
        Op::Concat { axis } => concat(inputs, axis),
        Op::Slice { axis, start, len } => {
            if inputs.len() != 1 {
                return arity_err("1");
            }
            slice(inputs[0], axis, start, len)
        }
    }
}

fn backward_op(op: Op, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
    match op {
        Op::Add => vec![grad.clone(), grad.clone()],
        Op::Sub => vec![grad.clone(), grad.map(|g| -g)],
        Op::Mul => vec![
            grad.zip_map(inputs[1], |g, b| g * b).expect("mul backward"),
            grad.zip_map(inputs[0], |g, a| g * a).expect("mul backward"),
        ],
        Op::MatMul => {
            let a = inputs[0];
            let b = inputs[1];
            let ga = matmul(grad, &transpose(b)).expect("matmul backward A");
            let gb = matmul(&transpose(a), grad).expect("matmul backward B");
            vec![ga, gb]
        }
        Op::Relu => {
            vec![grad
                .zip_map(inputs[0], |g, x| if x > 0.0 { g } else { 0.0 })
                .expect("relu backward")]
        }
        Op::Sigmoid => {
            vec![grad
                .zip_map(output, |g, s| g * s * (1.0 - s))
                .expect("sigmoid backward")]
        }
        Op::Softplus => {
            vec![grad
                .zip_map(inputs[0], |g, x| g * stable_sigmoid(x))
                .expect("softplus backward")]
        }
        Op::Exp => vec![grad.zip_map(output, |g, e| g * e).expect("exp backward")],
        Op::Square => {
            vec![grad
                .zip_map(inputs[0], |g, x| g * 2.0 * x)
                .expect("square backward")]
        }
        Op::Sum => vec![Tensor::full(inputs[0].shape().to_vec(), grad.item())],
        Op::Mean => {
            let n = inputs[0].len() as f64;
            vec![Tensor::full(inputs[0].shape().to_vec(), grad.item() / n)]
        }
        Op::Scale(c) => vec![grad.map(|g| c * g)],
        Op::Concat { axis } => concat_backward(inputs, grad, axis),
        Op::Slice { axis, start, len } => {
            vec![slice_backward(inputs[0], grad, axis, start, len)]
        }
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
        return Err(Error::shape(format!(
            "matmul on {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

fn transpose(a: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape().len(), 2);
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).expect("transpose")
}

fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(Error::shape("concat of zero tensors"));
    }
    let rank = inputs[0].shape().len();
    if rank == 0 || rank > 2 || axis >= rank {
        return Err(Error::shape(format!("concat axis {axis} on rank {rank}")));
    }
    for t in inputs {
        if t.shape().len() != rank {
            return Err(Error::shape("concat rank mismatch"));
        }
    }
    if rank == 1 || axis == 0 {
        // Row-major: axis-0 concat is a plain append (rank 1 or 2).
        if rank == 2 {
            let cols = inputs[0].cols();
            if inputs.iter().any(|t| t.cols() != cols) {
                return Err(Error::shape("concat axis 0 column mismatch"));
            }
            let rows = inputs.iter().map(|t| t.rows()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for t in inputs {
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![rows, cols], data)
        } else {
            let len = inputs.iter().map(|t| t.len()).sum();
            let mut data = Vec::with_capacity(len);
            for t in inputs {
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![len], data)
        }
    } else {
        // axis == 1, rank 2: splice rows.
        let rows = inputs[0].rows();
        if inputs.iter().any(|t| t.rows() != rows) {
            return Err(Error::shape("concat axis 1 row mismatch"));
        }
        let cols: usize = inputs.iter().map(|t| t.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for t in inputs {
                let c = t.cols();
                data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        Tensor::new(vec![rows, cols], data)
    }
}

fn concat_backward(inputs: &[&Tensor], grad: &Tensor, axis: usize) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(inputs.len());
    let rank = inputs[0].shape().len();
    if rank == 1 || axis == 0 {
        let mut offset = 0;
        for t in inputs {
            let n = t.len();
            let data = grad.data()[offset..offset + n].to_vec();
            out.push(Tensor::new(t.shape().to_vec(), data).expect("concat backward"));
            offset += n;
        }
    } else {
        let rows = inputs[0].rows();
        let total_cols = grad.cols();
        let mut col_offset = 0;
        for t in inputs {
            let c = t.cols();
            let mut data = Vec::with_capacity(rows * c);
            for r in 0..rows {
                let base = r * total_cols + col_offset;
                data.extend_from_slice(&grad.data()[base..base + c]);
            }
            out.push(Tensor::new(vec![rows, c], data).expect("concat backward"));
            col_offset += c;
        }
    }
    out
}

fn slice(t: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let rank = t.shape().len();
    if rank == 0 || rank > 2 || axis >= rank {
        return Err(Error::shape(format!("slice axis {axis} on rank {rank}")));
    }
    if start + len > t.shape()[axis] {
        return Err(Error::shape(format!(
            "slice [{start}, {}) out of bounds for axis size {}",
            start + len,
            t.shape()[axis]
        )));
    }
    if rank == 1 {
        Tensor::new(vec![len], t.data()[start..start + len].to_vec())
    } else if axis == 0 {
        let c = t.cols();
        Tensor::new(
            vec![len, c],
            t.data()[start * c..(start + len) * c].to_vec(),
        )
    } else {
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            let base = r * cols + start;
            data.extend_from_slice(&t.data()[base..base + len]);
        }
        Tensor::new(vec![rows, len], data)
    }
}

fn slice_backward(input: &Tensor, grad: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let mut out = Tensor::zeros(input.shape().to_vec());
    let rank = input.shape().len();
    if rank == 1 {
        out.data_mut()[start..start + len].copy_from_slice(grad.data());
    } else if axis == 0 {
        let c = input.cols();
        out.data_mut()[start * c..(start + len) * c].copy_from_slice(grad.data());
    } else {
        let cols = input.cols();
        for r in 0..input.rows() {
            let base = r * cols + start;
            out.data_mut()[base..base + len].copy_from_slice(&grad.data()[r * len..(r + 1) * len]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = tape.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let y = tape.matmul(i2, v).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn softplus_deep_negative() {
        // ln(1 + e^-50) evaluated directly via ln_1p.
        let expect = (-50.0f64).exp().ln_1p();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(-50.0));
        let y = tape.softplus(x).unwrap();
        let got = tape.value(y).item();
        assert!(got > 0.0);
        assert!(
            (got - expect).abs() / expect <= 1e-12,
            "got {got:e}, expect {expect:e}"
        );
        assert!((got - 1.928749847963918e-22).abs() / 1.93e-22 < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_input_is_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(f64::NAN));
        assert!(matches!(tape.relu(a), Err(Error::Numerics(_))));
    }

    #[test]
    fn exp_overflow_is_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1e4));
        assert!(matches!(tape.exp(a), Err(Error::Numerics(_))));
    }

    #[test]
    fn sum_square_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.square(w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = backward(&tape, loss).unwrap();
        assert_eq!(grads.get(&tape, w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_slot_gets_exact_zero() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let u = tape.param(Tensor::new(vec![2], vec![5.0, 6.0]).unwrap());
        let sq = tape.square(w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = backward(&tape, loss).unwrap();
        assert_eq!(grads.get(&tape, u).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.square(w).unwrap();
        assert!(matches!(backward(&tape, sq), Err(Error::Contract(_))));
    }

    #[test]
    fn value_reused_by_two_nodes_accumulates() {
        // loss = sum(w*w) + sum(w) -> grad = 2w + 1
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(vec![2], vec![3.0, -1.0]).unwrap());
        let sq = tape.square(w).unwrap();
        let s1 = tape.sum(sq).unwrap();
        let s2 = tape.sum(w).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        let grads = backward(&tape, loss).unwrap();
        assert_eq!(grads.get(&tape, w).data(), &[7.0, -1.0]);
    }

    #[test]
    fn concat_axis0_and_axis1_roundtrip_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = tape.param(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let cat = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(cat).shape(), &[2, 2]);
        let cat1 = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(cat1).data(), &[1.0, 2.0, 3.0, 4.0]);
        let s0 = tape.sum(cat).unwrap();
        let s1 = tape.sum(cat1).unwrap();
        let loss = tape.add(s0, s1).unwrap();
        let grads = backward(&tape, loss).unwrap();
        assert_eq!(grads.get(&tape, a).data(), &[2.0, 2.0]);
        assert_eq!(grads.get(&tape, b).data(), &[2.0, 2.0]);
    }

    #[test]
    fn column_slice_gradient_scatters() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let s = tape.slice(a, 1, 1, 2).unwrap();
        assert_eq!(tape.value(s).data(), &[2.0, 3.0, 5.0, 6.0]);
        let loss = tape.sum(s).unwrap();
        let grads = backward(&tape, loss).unwrap();
        assert_eq!(grads.get(&tape, a).data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_linearity_exact_on_dyadic_inputs() {
        // alpha*f + beta*g with dyadic inputs and coefficients: gradients combine exactly.
        let alpha = 0.75;
        let beta = 0.5;
        let point = Tensor::new(vec![3], vec![0.25, -1.5, 2.0]).unwrap();

        let run = |with_combo: bool| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let w = tape.param(point.clone());
            let sq = tape.square(w).unwrap();
            let f = tape.sum(sq).unwrap();
            let g = tape.sum(w).unwrap();
            if with_combo {
                let af = tape.scale(f, alpha).unwrap();
                let bg = tape.scale(g, beta).unwrap();
                let loss = tape.add(af, bg).unwrap();
                let grads = backward(&tape, loss).unwrap();
                (grads.get(&tape, w).data().to_vec(), vec![], vec![])
            } else {
                let gf = backward(&tape, f).unwrap().get(&tape, w).data().to_vec();
                let gg = backward(&tape, g).unwrap().get(&tape, w).data().to_vec();
                (vec![], gf, gg)
            }
        };
        let (combo, _, _) = run(true);
        let (_, gf, gg) = run(false);
        for i in 0..3 {
            assert_eq!(combo[i], alpha * gf[i] + beta * gg[i]);
        }
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        use crate::autodiff::gradcheck::grad_check;
        // Inputs kept away from relu kinks (|x| > 1e-3).
        let a = Tensor::new(vec![2, 3], vec![0.31, -0.72, 1.4, -0.55, 0.91, 0.12]).unwrap();
        let b = Tensor::new(vec![2, 3], vec![-0.41, 0.83, 0.27, 1.1, -0.64, 0.52]).unwrap();
        let m = Tensor::new(vec![3, 2], vec![0.5, -0.2, 0.8, 0.3, -0.7, 0.6]).unwrap();

        let binary: Vec<(&str, Op)> = vec![("add", Op::Add), ("sub", Op::Sub), ("mul", Op::Mul)];
        for (name, op) in binary {
            let report = grad_check(
                move |tape, ids| {
                    let y = tape.apply(op, &[ids[0], ids[1]])?;
                    let sq = tape.square(y)?;
                    tape.sum(sq)
                },
                &[a.clone(), b.clone()],
                1e-5,
                1e-6,
            )
            .unwrap();
            assert!(report.pass, "{name}: max rel err {}", report.max_rel_err);
        }

        let unary: Vec<(&str, Op)> = vec![
            ("relu", Op::Relu),
            ("sigmoid", Op::Sigmoid),
            ("softplus", Op::Softplus),
            ("exp", Op::Exp),
            ("square", Op::Square),
            ("scale", Op::Scale(-1.7)),
            ("sum", Op::Sum),
            ("mean", Op::Mean),
            (
                "slice",
                Op::Slice {
                    axis: 1,
                    start: 1,
                    len: 2,
                },
            ),
        ];
        for (name, op) in unary {
            let report = grad_check(
                move |tape, ids| {
                    let y = tape.apply(op, &[ids[0]])?;
                    let sq = tape.square(y)?;
                    tape.sum(sq)
                },
                std::slice::from_ref(&a),
                1e-5,
                1e-6,
            )
            .unwrap();
            assert!(report.pass, "{name}: max rel err {}", report.max_rel_err);
        }

        for (name, op) in [
            ("matmul", Op::MatMul),
            ("concat0", Op::Concat { axis: 0 }),
            ("concat1", Op::Concat { axis: 1 }),
        ] {
            let second = if name == "matmul" {
                m.clone()
            } else {
                b.clone()
            };
            let report = grad_check(
                move |tape, ids| {
                    let y = tape.apply(op, &[ids[0], ids[1]])?;
                    let sq = tape.square(y)?;
                    tape.sum(sq)
                },
                &[a.clone(), second],
                1e-5,
                1e-6,
            )
            .unwrap();
            assert!(report.pass, "{name}: max rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn determinism_bitwise() {
        let run = || -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let w = tape.param(Tensor::new(vec![3], vec![0.3, -0.7, 1.9]).unwrap());
            let s = tape.sigmoid(w).unwrap();
            let sq = tape.square(s).unwrap();
            let loss = tape.mean(sq).unwrap();
            let grads = backward(&tape, loss).unwrap();
            (tape.value(loss).item(), grads.get(&tape, w).data().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
