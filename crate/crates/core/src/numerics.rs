//! Dense-tensor math with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive operation during the forward pass and
//! replays the records in reverse to accumulate gradients. Tensors are
//! rank-1 or rank-2 `f64` buffers stored row-major inside the tape; the
//! [`Tensor`] handle is just a node id. A tape and its tensors belong to one
//! worker at a time; independent tapes may run concurrently.

/// Floor applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`]. Only meaningful with the tape it came from.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Tensor(pub(crate) usize);

impl Tensor {
    /// Node id within the owning tape.
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// out = scale * x + shift, elementwise; only the scale matters in
    /// the backward pass.
    Affine {
        x: usize,
        scale: f64,
    },
    /// w: [r, c], x: [c] -> out: [r]
    MatVec {
        w: usize,
        x: usize,
    },
    /// x: [r], w: [r, c] -> out: [c]
    VecMat {
        x: usize,
        w: usize,
    },
    Tanh(usize),
    Sigmoid(usize),
    Softmax(usize),
    /// ln(max(x, PROB_FLOOR)), elementwise.
    LnClamped(usize),
    /// out = [x[index]]
    Gather {
        x: usize,
        index: usize,
    },
    /// out = [ln(max(x[index], PROB_FLOOR))]
    LogGather {
        x: usize,
        index: usize,
    },
    Sum(usize),
    Dot(usize, usize),
    /// Rank-1 inputs laid end to end.
    Concat(Vec<usize>),
    /// k rank-1 inputs of width w stacked into [k, w].
    StackRows(Vec<usize>),
    /// table: [rows, width] -> out: [width]
    EmbedRow {
        table: usize,
        row: usize,
    },
    Clamp01(usize),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
}

/// Ordered record of primitive operations; inputs always precede outputs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node {
            op,
            shape,
            data,
            grad,
        });
        Tensor(self.nodes.len() - 1)
    }

    /// New leaf node carrying `data` with the given shape.
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf: shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        self.push(Op::Leaf, shape.to_vec(), data)
    }

    pub fn vector(&mut self, data: Vec<f64>) -> Tensor {
        let n = data.len();
        self.push(Op::Leaf, vec![n], data)
    }

    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.push(Op::Leaf, vec![1], vec![v])
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        self.push(Op::Leaf, shape.to_vec(), vec![0.0; n])
    }

    pub fn data(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].data
    }

    pub fn grad(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].grad
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    /// Value of a scalar node.
    pub fn value(&self, t: Tensor) -> f64 {
        assert_eq!(self.nodes[t.0].data.len(), 1, "value: node is not a scalar");
        self.nodes[t.0].data[0]
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            for g in &mut node.grad {
                *g = 0.0;
            }
        }
    }

    fn assert_same_shape(&self, a: Tensor, b: Tensor, op: &str) {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "{op}: shape mismatch {:?} vs {:?}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.assert_same_shape(a, b, "add");
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        self.push(Op::Add(a.0, b.0), self.nodes[a.0].shape.clone(), data)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.assert_same_shape(a, b, "sub");
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        self.push(Op::Sub(a.0, b.0), self.nodes[a.0].shape.clone(), data)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.assert_same_shape(a, b, "mul");
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        self.push(Op::Mul(a.0, b.0), self.nodes[a.0].shape.clone(), data)
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: Tensor, scale: f64, shift: f64) -> Tensor {
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|v| scale * v + shift)
            .collect();
        self.push(
            Op::Affine { x: x.0, scale },
            self.nodes[x.0].shape.clone(),
            data,
        )
    }

    /// `w[r,c] · x[c] -> [r]`
    pub fn matvec(&mut self, w: Tensor, x: Tensor) -> Tensor {
        let (r, c) = self.mat_dims(w, "matvec");
        assert_eq!(
            self.nodes[x.0].data.len(),
            c,
            "matvec: vector length mismatch"
        );
        let wd = &self.nodes[w.0].data;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; r];
        for i in 0..r {
            let row = &wd[i * c..(i + 1) * c];
            let mut s = 0.0;
            for j in 0..c {
                s += row[j] * xd[j];
            }
            out[i] = s;
        }
        self.push(Op::MatVec { w: w.0, x: x.0 }, vec![r], out)
    }

    /// `x[r] · w[r,c] -> [c]`
    pub fn vecmat(&mut self, x: Tensor, w: Tensor) -> Tensor {
        let (r, c) = self.mat_dims(w, "vecmat");
        assert_eq!(
            self.nodes[x.0].data.len(),
            r,
            "vecmat: vector length mismatch"
        );
        let wd = &self.nodes[w.0].data;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; c];
        for i in 0..r {
            let xi = xd[i];
            let row = &wd[i * c..(i + 1) * c];
            for j in 0..c {
                out[j] += xi * row[j];
            }
        }
        self.push(Op::VecMat { x: x.0, w: w.0 }, vec![c], out)
    }

    fn mat_dims(&self, m: Tensor, op: &str) -> (usize, usize) {
        let shape = &self.nodes[m.0].shape;
        assert_eq!(
            shape.len(),
            2,
            "{op}: expected rank-2 tensor, got {:?}",
            shape
        );
        (shape[0], shape[1])
    }

    pub fn tanh(&mut self, x: Tensor) -> Tensor {
        let data = self.nodes[x.0].data.iter().map(|v| v.tanh()).collect();
        self.push(Op::Tanh(x.0), self.nodes[x.0].shape.clone(), data)
    }

    pub fn sigmoid(&mut self, x: Tensor) -> Tensor {
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        self.push(Op::Sigmoid(x.0), self.nodes[x.0].shape.clone(), data)
    }

    /// Numerically stabilized softmax over a rank-1 tensor of logits.
    /// Rejects non-finite inputs.
    pub fn softmax(&mut self, logits: Tensor) -> Tensor {
        let xs = &self.nodes[logits.0].data;
        assert!(!xs.is_empty(), "softmax: empty input");
        for (i, v) in xs.iter().enumerate() {
            assert!(v.is_finite(), "softmax: non-finite input {v} at index {i}");
        }
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let data = exps.iter().map(|e| e / z).collect();
        self.push(
            Op::Softmax(logits.0),
            self.nodes[logits.0].shape.clone(),
            data,
        )
    }

    /// Elementwise `ln(max(x, PROB_FLOOR))`.
    pub fn ln_clamped(&mut self, x: Tensor) -> Tensor {
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|v| v.max(PROB_FLOOR).ln())
            .collect();
        self.push(Op::LnClamped(x.0), self.nodes[x.0].shape.clone(), data)
    }

    /// Single element `x[index]` as a scalar node.
    pub fn gather(&mut self, x: Tensor, index: usize) -> Tensor {
        let n = self.nodes[x.0].data.len();
        assert!(
            index < n,
            "gather: index {index} out of range for length {n}"
        );
        let v = self.nodes[x.0].data[index];
        self.push(Op::Gather { x: x.0, index }, vec![1], vec![v])
    }

    /// `ln(max(dist[index], PROB_FLOOR))` as a scalar node; differentiable
    /// through the tape. The clamp keeps degenerate distributions finite.
    pub fn log_prob_gather(&mut self, dist: Tensor, index: usize) -> Tensor {
        let n = self.nodes[dist.0].data.len();
        assert!(
            index < n,
            "log_prob_gather: index {index} out of range for distribution of size {n}"
        );
        let v = self.nodes[dist.0].data[index].max(PROB_FLOOR).ln();
        self.push(Op::LogGather { x: dist.0, index }, vec![1], vec![v])
    }

    pub fn sum(&mut self, x: Tensor) -> Tensor {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        self.push(Op::Sum(x.0), vec![1], vec![s])
    }

    pub fn dot(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.assert_same_shape(a, b, "dot");
        let s: f64 = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .sum();
        self.push(Op::Dot(a.0, b.0), vec![1], vec![s])
    }

    /// Rank-1 tensors laid end to end.
    pub fn concat(&mut self, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat: no inputs");
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let n = data.len();
        self.push(
            Op::Concat(parts.iter().map(|p| p.0).collect()),
            vec![n],
            data,
        )
    }

    /// k equal-width rank-1 tensors stacked into `[k, width]`.
    pub fn stack_rows(&mut self, rows: &[Tensor]) -> Tensor {
        assert!(!rows.is_empty(), "stack_rows: no inputs");
        let width = self.nodes[rows[0].0].data.len();
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            assert_eq!(self.nodes[r.0].data.len(), width, "stack_rows: ragged rows");
            data.extend_from_slice(&self.nodes[r.0].data);
        }
        self.push(
            Op::StackRows(rows.iter().map(|r| r.0).collect()),
            vec![rows.len(), width],
            data,
        )
    }

    /// Row `row` of a rank-2 table, as a rank-1 tensor.
    pub fn embed_row(&mut self, table: Tensor, row: usize) -> Tensor {
        let (rows, width) = self.mat_dims(table, "embed_row");
        assert!(
            row < rows,
            "embed_row: row {row} out of range for table with {rows} rows"
        );
        let data = self.nodes[table.0].data[row * width..(row + 1) * width].to_vec();
        self.push(
            Op::EmbedRow {
                table: table.0,
                row,
            },
            vec![width],
            data,
        )
    }

    /// Elementwise clamp to [0, 1]; gradient passes through inside the range.
    pub fn clamp01(&mut self, x: Tensor) -> Tensor {
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        self.push(Op::Clamp01(x.0), self.nodes[x.0].shape.clone(), data)
    }

    /// Reverse sweep from a scalar `loss`, accumulating `d loss / d node`
    /// into every leaf's grad. Repeated calls without [`Tape::zero_grads`]
    /// accumulate at the leaves; intermediate grads are scratch space and
    /// reset at the start of each sweep. Deterministic: the sweep order is
    /// the reverse tape order.
    pub fn backward(&mut self, loss: Tensor) {
        assert_eq!(
            self.nodes[loss.0].data.len(),
            1,
            "backward: loss must be a scalar, got shape {:?}",
            self.nodes[loss.0].shape
        );

        // Mark the subgraph that feeds the loss so unrelated nodes are skipped.
        let mut needed = vec![false; loss.0 + 1];
        needed[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if !needed[i] {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Dot(a, b) => {
                    needed[*a] = true;
                    needed[*b] = true;
                }
                Op::Affine { x, .. }
                | Op::Tanh(x)
                | Op::Sigmoid(x)
                | Op::Softmax(x)
                | Op::LnClamped(x)
                | Op::Sum(x)
                | Op::Clamp01(x)
                | Op::Gather { x, .. }
                | Op::LogGather { x, .. } => needed[*x] = true,
                Op::MatVec { w, x } => {
                    needed[*w] = true;
                    needed[*x] = true;
                }
                Op::VecMat { x, w } => {
                    needed[*x] = true;
                    needed[*w] = true;
                }
                Op::Concat(parts) | Op::StackRows(parts) => {
                    for p in parts {
                        needed[*p] = true;
                    }
                }
                Op::EmbedRow { table, .. } => needed[*table] = true,
            }
        }

        // Intermediates are scratch for this sweep; only leaves accumulate.
        for i in 0..=loss.0 {
            if needed[i] && !matches!(self.nodes[i].op, Op::Leaf) {
                for g in &mut self.nodes[i].grad {
                    *g = 0.0;
                }
            }
        }

        // Seed with d loss / d loss = 1 and sweep in reverse.
        self.nodes[loss.0].grad[0] += 1.0;
        for i in (0..=loss.0).rev() {
            if !needed[i] {
                continue;
            }
            // Inputs always precede node i, so split once and borrow both sides.
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let g = &node.grad;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (k, gv) in g.iter().enumerate() {
                        before[*a].grad[k] += gv;
                        before[*b].grad[k] += gv;
                    }
                }
                Op::Sub(a, b) => {
                    for (k, gv) in g.iter().enumerate() {
                        before[*a].grad[k] += gv;
                        before[*b].grad[k] -= gv;
                    }
                }
                Op::Mul(a, b) => {
                    for k in 0..g.len() {
                        let ga = g[k] * before[*b].data[k];
                        let gb = g[k] * before[*a].data[k];
                        before[*a].grad[k] += ga;
                        before[*b].grad[k] += gb;
                    }
                }
                Op::Affine { x, scale, .. } => {
                    for (k, gv) in g.iter().enumerate() {
                        before[*x].grad[k] += scale * gv;
                    }
                }
                Op::MatVec { w, x } => {
                    let c = before[*x].data.len();
                    for i_row in 0..g.len() {
                        let gv = g[i_row];
                        if gv == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            before[*w].grad[i_row * c + j] += gv * before[*x].data[j];
                        }
                    }
                    for j in 0..c {
                        let mut s = 0.0;
                        for i_row in 0..g.len() {
                            s += before[*w].data[i_row * c + j] * g[i_row];
                        }
                        before[*x].grad[j] += s;
                    }
                }
                Op::VecMat { x, w } => {
                    let r = before[*x].data.len();
                    let c = g.len();
                    for i_row in 0..r {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += before[*w].data[i_row * c + j] * g[j];
                        }
                        before[*x].grad[i_row] += s;
                        let xi = before[*x].data[i_row];
                        for j in 0..c {
                            before[*w].grad[i_row * c + j] += xi * g[j];
                        }
                    }
                }
                Op::Tanh(x) => {
                    for (k, gv) in g.iter().enumerate() {
                        let y = node.data[k];
                        before[*x].grad[k] += (1.0 - y * y) * gv;
                    }
                }
                Op::Sigmoid(x) => {
                    for (k, gv) in g.iter().enumerate() {
                        let y = node.data[k];
                        before[*x].grad[k] += y * (1.0 - y) * gv;
                    }
                }
                Op::Softmax(x) => {
                    let dot: f64 = g.iter().zip(&node.data).map(|(gv, y)| gv * y).sum();
                    for (k, gv) in g.iter().enumerate() {
                        let y = node.data[k];
                        before[*x].grad[k] += y * (gv - dot);
                    }
                }
                Op::LnClamped(x) => {
                    for (k, gv) in g.iter().enumerate() {
                        let v = before[*x].data[k];
                        if v > PROB_FLOOR {
                            before[*x].grad[k] += gv / v;
                        }
                    }
                }
                Op::Gather { x, index } => {
                    before[*x].grad[*index] += g[0];
                }
                Op::LogGather { x, index } => {
                    let v = before[*x].data[*index];
                    if v > PROB_FLOOR {
                        before[*x].grad[*index] += g[0] / v;
                    }
                }
                Op::Sum(x) => {
                    for gx in before[*x].grad.iter_mut() {
                        *gx += g[0];
                    }
                }
                Op::Dot(a, b) => {
                    for k in 0..before[*a].data.len() {
                        let ga = g[0] * before[*b].data[k];
                        let gb = g[0] * before[*a].data[k];
                        before[*a].grad[k] += ga;
                        before[*b].grad[k] += gb;
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = before[*p].data.len();
                        for k in 0..n {
                            before[*p].grad[k] += g[offset + k];
                        }
                        offset += n;
                    }
                }
                Op::StackRows(parts) => {
                    let width = node.shape[1];
                    for (r, p) in parts.iter().enumerate() {
                        for k in 0..width {
                            before[*p].grad[k] += g[r * width + k];
                        }
                    }
                }
                Op::EmbedRow { table, row } => {
                    let width = g.len();
                    for k in 0..width {
                        before[*table].grad[row * width + k] += g[k];
                    }
                }
                Op::Clamp01(x) => {
                    for (k, gv) in g.iter().enumerate() {
                        let v = before[*x].data[k];
                        if (0.0..=1.0).contains(&v) {
                            before[*x].grad[k] += gv;
                        }
                    }
                }
            }
        }
    }
}

/// Central-difference numeric gradient of `f` at `params`:
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` per coordinate.
/// Independent of the tape; used as the gradient-check oracle.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, params: &[f64], eps: f64) -> Vec<f64> {
    assert!(eps > 0.0, "finite_diff_grad: eps must be positive");
    let mut grad = vec![0.0; params.len()];
    let mut work = params.to_vec();
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let hi = f(&work);
        work[i] = orig - eps;
        let lo = f(&work);
        work[i] = orig;
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    grad
}

/// `|a - b| / max(|a|, |b|, floor)` with the floor guarding tiny denominators.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let x = tape.vector(vec![0.0, 0.0]);
        let y = tape.softmax(x);
        assert_eq!(tape.data(y), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_is_stabilized_against_overflow() {
        let mut tape = Tape::new();
        let x = tape.vector(vec![1000.0, 1000.0, 1000.0]);
        let y = tape.softmax(x);
        for v in tape.data(y) {
            assert!(v.is_finite());
            assert_close(*v, 1.0 / 3.0, 1e-12);
        }
    }

    #[test]
    fn softmax_hand_value() {
        // softmax([ln 2, 0]) = [2, 1] / 3
        let mut tape = Tape::new();
        let x = tape.vector(vec![2.0f64.ln(), 0.0]);
        let y = tape.softmax(x);
        assert_close(tape.data(y)[0], 2.0 / 3.0, 1e-15);
        assert_close(tape.data(y)[1], 1.0 / 3.0, 1e-15);
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::new();
        let x = tape.vector(vec![0.0, f64::NAN]);
        tape.softmax(x);
    }

    #[test]
    fn log_prob_gather_values() {
        let mut tape = Tape::new();
        let d = tape.vector(vec![0.5, 0.5]);
        let lp = tape.log_prob_gather(d, 0);
        assert_close(tape.value(lp), 0.5f64.ln(), 1e-15);

        let degenerate = tape.vector(vec![1.0, 0.0]);
        let lp0 = tape.log_prob_gather(degenerate, 1);
        assert!(tape.value(lp0).is_finite());
        assert_close(tape.value(lp0), PROB_FLOOR.ln(), 1e-12);

        let d2 = tape.vector(vec![2.0 / 3.0, 1.0 / 3.0]);
        let lp2 = tape.log_prob_gather(d2, 1);
        assert_close(tape.value(lp2), (1.0f64 / 3.0).ln(), 1e-15);
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn log_prob_gather_rejects_bad_index() {
        let mut tape = Tape::new();
        let d = tape.vector(vec![0.5, 0.5]);
        tape.log_prob_gather(d, 2);
    }

    #[test]
    fn backward_product_rule() {
        let mut tape = Tape::new();
        let x = tape.scalar(2.0);
        let y = tape.scalar(3.0);
        let loss = tape.mul(x, y);
        tape.backward(loss);
        assert_eq!(tape.grad(x), &[3.0]);
        assert_eq!(tape.grad(y), &[2.0]);
    }

    #[test]
    fn backward_softmax_cross_entropy_identity() {
        // d/dlogits of -ln softmax(logits)[target] = softmax - onehot
        let mut tape = Tape::new();
        let logits = tape.vector(vec![0.0, 0.0]);
        let dist = tape.softmax(logits);
        let lp = tape.log_prob_gather(dist, 0);
        let loss = tape.affine(lp, -1.0, 0.0);
        tape.backward(loss);
        let g = tape.grad(logits);
        assert_close(g[0], -0.5, 1e-12);
        assert_close(g[1], 0.5, 1e-12);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut tape = Tape::new();
        let x = tape.scalar(2.0);
        let loss = tape.mul(x, x);
        tape.backward(loss);
        assert_close(tape.grad(x)[0], 4.0, 1e-12);
        tape.backward(loss);
        assert_close(tape.grad(x)[0], 8.0, 1e-12);
        tape.zero_grads();
        tape.backward(loss);
        assert_close(tape.grad(x)[0], 4.0, 1e-12);
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut tape = Tape::new();
            let w = tape.leaf(vec![0.3, -0.2, 0.7, 0.1, 0.5, -0.9], &[2, 3]);
            let x = tape.vector(vec![0.11, -0.47, 0.23]);
            let h = tape.matvec(w, x);
            let t = tape.tanh(h);
            let s = tape.softmax(t);
            let lp = tape.log_prob_gather(s, 1);
            let loss = tape.affine(lp, -1.0, 0.0);
            tape.backward(loss);
            (tape.grad(w).to_vec(), tape.grad(x).to_vec())
        };
        let (gw1, gx1) = build();
        let (gw2, gx2) = build();
        assert_eq!(
            gw1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            gw2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            gx1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            gx2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    #[should_panic(expected = "scalar")]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.vector(vec![1.0, 2.0]);
        tape.backward(x);
    }

    #[test]
    fn finite_diff_square() {
        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], 1e-5);
        assert_close(g[0], 6.0, 1e-6);
    }

    #[test]
    fn finite_diff_constant() {
        let g = finite_diff_grad(|_| 42.0, &[1.0, 2.0, 3.0], 1e-5);
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn unrelated_nodes_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.scalar(2.0);
        let unrelated = tape.scalar(5.0);
        let _side = tape.mul(unrelated, unrelated);
        let loss = tape.mul(x, x);
        tape.backward(loss);
        assert_eq!(tape.grad(unrelated), &[0.0]);
    }

    #[test]
    fn clamp01_passes_gradient_inside_range() {
        let mut tape = Tape::new();
        let x = tape.vector(vec![-0.5, 0.5, 1.5]);
        let y = tape.clamp01(x);
        assert_eq!(tape.data(y), &[0.0, 0.5, 1.0]);
        let s = tape.sum(y);
        tape.backward(s);
        assert_eq!(tape.grad(x), &[0.0, 1.0, 0.0]);
    }
}
