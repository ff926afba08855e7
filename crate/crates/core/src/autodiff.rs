//! Minimal reverse-mode differentiation over dense row-major tensors.
//!
//! Only the operations needed to differentiate the batch ECMMD loss through a
//! ReLU generator are provided. Nodes are appended to a [`Tape`] as the forward
//! pass runs, so every node's inputs precede it; [`Tape::backward`] walks the
//! nodes once in reverse.
//!
//! ReLU uses `d/da max(a, 0) = 0` at `a = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{GeneratorNet, OutputActivation};
use crate::kernels::{KernelConfig, KernelFamily};
use crate::knn::KnnGraph;
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "shape {shape:?} needs {len} entries, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.shape[..] {
            [r, c] => Matrix::new(r, c, self.data.clone()),
            _ => Err(Error::DimensionMismatch(format!(
                "tensor of shape {:?} is not a matrix",
                self.shape
            ))),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn rows_cols(&self) -> (usize, usize) {
        match self.shape[..] {
            [r, c] => (r, c),
            [c] => (1, c),
            [] => (1, 1),
            _ => unreachable!("only rank <= 2 tensors appear on the tape"),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a (n×k) · b (k×m)`, accumulating over `k` in ascending order.
pub(crate) fn matmul(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for t in 0..k {
            let av = a[i * k + t];
            let brow = &b[t * m..(t + 1) * m];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    /// Constant or parameter input.
    Leaf { param: Option<usize> },
    MatMul(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    ConcatCols(NodeId, NodeId),
    /// `out[t] = ‖a[i_t] - b[j_t]‖²` over the listed row pairs.
    PairSqDist { a: NodeId, b: NodeId, pairs: Vec<(usize, usize)> },
    Scale(NodeId, f64),
    Exp(NodeId),
    Sum(NodeId),
    /// `Σ c_t · s_t + constant` over scalar nodes `s_t`; the constant only shifts the value.
    Combine { terms: Vec<(NodeId, f64)> },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Recorded forward computation. Single owner; one backward pass per tape.
pub struct Tape {
    nodes: Vec<Node>,
    n_params: usize,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            n_params: 0,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { param: None }, value, false)
    }

    /// Registers the next parameter; parameters are numbered in call order.
    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        let param = self.n_params;
        self.n_params += 1;
        self.push(Op::Leaf { param: Some(param) }, value, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.value(a).rows_cols();
        let (k2, m) = self.value(b).rows_cols();
        if k != k2 {
            return Err(Error::DimensionMismatch(format!("matmul {n}x{k} by {k2}x{m}")));
        }
        let data = matmul(self.value(a).data(), n, k, self.value(b).data(), m);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(vec![n, m], data)?, rg))
    }

    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, m) = self.value(a).rows_cols();
        if self.value(bias).len() != m {
            return Err(Error::DimensionMismatch(format!(
                "bias of length {} for {m} columns",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_exact_mut(m.max(1)) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let rg = self.needs(&[a, bias]);
        Ok(self.push(Op::AddRowBias(a, bias), Tensor::new(vec![n, m], data)?, rg))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        };
        let rg = self.needs(&[a]);
        self.push(Op::Relu(a), out, rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| sigmoid(x)).collect(),
        };
        let rg = self.needs(&[a]);
        self.push(Op::Sigmoid(a), out, rg)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, ca) = self.value(a).rows_cols();
        let (n2, cb) = self.value(b).rows_cols();
        if n != n2 {
            return Err(Error::DimensionMismatch(format!("concat of {n} and {n2} rows")));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(&va[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&vb[i * cb..(i + 1) * cb]);
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::ConcatCols(a, b), Tensor::new(vec![n, ca + cb], data)?, rg))
    }

    pub fn pair_sq_dist(&mut self, a: NodeId, b: NodeId, pairs: Vec<(usize, usize)>) -> Result<NodeId> {
        let (na, ca) = self.value(a).rows_cols();
        let (nb, cb) = self.value(b).rows_cols();
        if ca != cb {
            return Err(Error::DimensionMismatch(format!("pair distance of {ca}- and {cb}-dim rows")));
        }
        if pairs.iter().any(|&(i, j)| i >= na || j >= nb) {
            return Err(Error::DimensionMismatch("pair index outside operand rows".into()));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = pairs
            .iter()
            .map(|&(i, j)| {
                crate::matrix::squared_euclidean(&va[i * ca..(i + 1) * ca], &vb[j * cb..(j + 1) * cb])
            })
            .collect();
        let rg = self.needs(&[a, b]);
        let len = data.len();
        Ok(self.push(Op::PairSqDist { a, b, pairs }, Tensor::new(vec![len], data)?, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|x| x * c).collect(),
        };
        let rg = self.needs(&[a]);
        self.push(Op::Scale(a, c), out, rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|x| x.exp()).collect(),
        };
        let rg = self.needs(&[a]);
        self.push(Op::Exp(a), out, rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        let rg = self.needs(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(total), rg)
    }

    pub fn combine(&mut self, terms: Vec<(NodeId, f64)>, constant: f64) -> Result<NodeId> {
        let mut total = constant;
        for &(id, c) in &terms {
            if self.value(id).len() != 1 {
                return Err(Error::DimensionMismatch("combine expects scalar terms".into()));
            }
            total += c * self.value(id).data()[0];
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let rg = self.needs(&ids);
        Ok(self.push(Op::Combine { terms }, Tensor::scalar(total), rg))
    }

    /// Gradients of the scalar node `output` with respect to every parameter,
    /// in registration order. A tape supports exactly one backward pass.
    pub fn backward(&mut self, output: NodeId) -> Result<Vec<Tensor>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if self.value(output).len() != 1 {
            return Err(Error::DimensionMismatch("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf { .. } = node.op {
                // parameters keep their gradient
                grads[idx] = Some(g);
                continue;
            }
            let mut send = |id: NodeId, t: Tensor| {
                if !self.nodes[id.0].requires_grad {
                    return;
                }
                match &mut grads[id.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf { .. } => unreachable!(),
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (n, k) = va.rows_cols();
                    let (_, m) = vb.rows_cols();
                    // dA = G Bᵀ
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        for t in 0..k {
                            let brow = &vb.data[t * m..(t + 1) * m];
                            let grow = &g.data[i * m..(i + 1) * m];
                            da[i * k + t] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    // dB = Aᵀ G
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        let grow = &g.data[i * m..(i + 1) * m];
                        for t in 0..k {
                            let av = va.data[i * k + t];
                            for (o, gv) in db[t * m..(t + 1) * m].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    let (sa, sb) = (va.shape.clone(), vb.shape.clone());
                    send(*a, Tensor { shape: sa, data: da });
                    send(*b, Tensor { shape: sb, data: db });
                }
                Op::AddRowBias(a, bias) => {
                    let (_, m) = g.rows_cols();
                    let mut db = vec![0.0; m];
                    for row in g.data.chunks_exact(m.max(1)) {
                        for (o, v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    let sb = self.nodes[bias.0].value.shape.clone();
                    send(*bias, Tensor { shape: sb, data: db });
                    send(*a, g);
                }
                Op::Relu(a) => {
                    let pre = &self.nodes[a.0].value;
                    let data = g
                        .data
                        .iter()
                        .zip(&pre.data)
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    send(*a, Tensor { shape: g.shape.clone(), data });
                }
                Op::Sigmoid(a) => {
                    let data = g
                        .data
                        .iter()
                        .zip(&node.value.data)
                        .map(|(gv, s)| gv * s * (1.0 - s))
                        .collect();
                    send(*a, Tensor { shape: g.shape.clone(), data });
                }
                Op::ConcatCols(a, b) => {
                    let (n, ca) = self.nodes[a.0].value.rows_cols();
                    let (_, cb) = self.nodes[b.0].value.rows_cols();
                    let mut da = Vec::with_capacity(n * ca);
                    let mut db = Vec::with_capacity(n * cb);
                    for row in g.data.chunks_exact(ca + cb) {
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    let (sa, sb) = (self.nodes[a.0].value.shape.clone(), self.nodes[b.0].value.shape.clone());
                    send(*a, Tensor { shape: sa, data: da });
                    send(*b, Tensor { shape: sb, data: db });
                }
                Op::PairSqDist { a, b, pairs } => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (_, c) = va.rows_cols();
                    let mut da = vec![0.0; va.len()];
                    let mut db = vec![0.0; vb.len()];
                    for (t, &(i, j)) in pairs.iter().enumerate() {
                        let w = 2.0 * g.data[t];
                        for col in 0..c {
                            let diff = va.data[i * c + col] - vb.data[j * c + col];
                            da[i * c + col] += w * diff;
                            db[j * c + col] -= w * diff;
                        }
                    }
                    let (sa, sb) = (va.shape.clone(), vb.shape.clone());
                    send(*a, Tensor { shape: sa, data: da });
                    send(*b, Tensor { shape: sb, data: db });
                }
                Op::Scale(a, c) => {
                    let data = g.data.iter().map(|v| v * c).collect();
                    send(*a, Tensor { shape: g.shape.clone(), data });
                }
                Op::Exp(a) => {
                    let data = g.data.iter().zip(&node.value.data).map(|(gv, e)| gv * e).collect();
                    send(*a, Tensor { shape: g.shape.clone(), data });
                }
                Op::Sum(a) => {
                    let shape = self.nodes[a.0].value.shape.clone();
                    let len = self.nodes[a.0].value.len();
                    send(*a, Tensor { shape, data: vec![g.data[0]; len] });
                }
                Op::Combine { terms, .. } => {
                    for &(id, c) in terms {
                        send(id, Tensor::scalar(c * g.data[0]));
                    }
                }
            }
        }

        let mut out: Vec<Option<Tensor>> = (0..self.n_params).map(|_| None).collect();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(p) } = node.op {
                out[p] = Some(
                    grads[idx]
                        .take()
                        .unwrap_or_else(|| Tensor::zeros(node.value.shape.clone())),
                );
            }
        }
        Ok(out.into_iter().map(|t| t.expect("every parameter is a leaf")).collect())
    }
}

/// Rows of one training batch: predictors, observed responses and the noise
/// assigned to each row.
#[derive(Debug, Clone, Copy)]
pub struct BatchView<'a> {
    pub x: &'a Matrix,
    pub y: &'a Matrix,
    pub eta: &'a Matrix,
}

impl<'a> BatchView<'a> {
    pub fn new(x: &'a Matrix, y: &'a Matrix, eta: &'a Matrix) -> Result<Self> {
        if x.rows() != y.rows() || x.rows() != eta.rows() {
            return Err(Error::DimensionMismatch(format!(
                "batch rows: x {}, y {}, eta {}",
                x.rows(),
                y.rows(),
                eta.rows()
            )));
        }
        Ok(Self { x, y, eta })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

/// Records the generator forward pass `g(η, x)` with input `[η | x]`.
/// Returns the output node.
pub fn record_generator(tape: &mut Tape, net: &GeneratorNet, eta: &Matrix, x: &Matrix) -> Result<NodeId> {
    net.check_inputs(eta, x)?;
    let eta_n = tape.constant(Tensor::from_matrix(eta));
    let x_n = tape.constant(Tensor::from_matrix(x));
    let mut h = tape.concat_cols(eta_n, x_n)?;
    let last = net.layers().len() - 1;
    for (l, layer) in net.layers().iter().enumerate() {
        let w = tape.parameter(layer.weight.clone());
        let b = tape.parameter(layer.bias.clone());
        let pre = tape.matmul(h, w)?;
        let pre = tape.add_row_bias(pre, b)?;
        h = if l < last {
            tape.relu(pre)
        } else {
            match net.config().output_activation {
                OutputActivation::Linear => pre,
                OutputActivation::Sigmoid => tape.sigmoid(pre),
            }
        };
        if tape.value(h).data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("activation of layer {l}")));
        }
    }
    Ok(h)
}

/// Forward pass of the batch loss
/// `1/(B k) Σ_i Σ_{j ∈ N(i)} H((y_i, g_i), (y_j, g_j))` with `g_i = g(η_i, x_i)`.
///
/// The `K(y_i, y_j)` terms do not depend on the parameters and enter as a
/// constant.
pub fn forward_loss(
    net: &GeneratorNet,
    batch: &BatchView<'_>,
    kernel: &KernelConfig,
    graph: &KnnGraph,
) -> Result<(f64, Tape, NodeId)> {
    kernel.validate()?;
    if kernel.family != KernelFamily::Gaussian {
        return Err(Error::InvalidParameter(
            "only the gaussian kernel is differentiable everywhere; training needs it".into(),
        ));
    }
    if graph.n() != batch.len() {
        return Err(Error::DimensionMismatch(format!(
            "graph on {} nodes for a batch of {}",
            graph.n(),
            batch.len()
        )));
    }
    if batch.y.cols() != net.config().p {
        return Err(Error::DimensionMismatch(format!(
            "responses have {} columns, generator emits {}",
            batch.y.cols(),
            net.config().p
        )));
    }
    let mut tape = Tape::new();
    let z = record_generator(&mut tape, net, batch.eta, batch.x)?;
    let y = tape.constant(Tensor::from_matrix(batch.y));

    let pairs: Vec<(usize, usize)> = graph.edges().collect();
    let norm = 1.0 / (graph.n() * graph.k()) as f64;
    let yy: f64 = pairs
        .iter()
        .map(|&(i, j)| kernel.eval_unchecked(batch.y.row(i), batch.y.row(j)))
        .sum();
    let gamma = -1.0 / (2.0 * kernel.bandwidth * kernel.bandwidth);

    let kernel_sum = |tape: &mut Tape, a: NodeId, b: NodeId| -> Result<NodeId> {
        let d = tape.pair_sq_dist(a, b, pairs.clone())?;
        let s = tape.scale(d, gamma);
        let e = tape.exp(s);
        Ok(tape.sum(e))
    };
    let yz = kernel_sum(&mut tape, y, z)?;
    let zy = kernel_sum(&mut tape, z, y)?;
    let zz = kernel_sum(&mut tape, z, z)?;
    let loss = tape.combine(vec![(zz, norm), (yz, -norm), (zy, -norm)], yy * norm)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("batch loss".into()));
    }
    Ok((value, tape, loss))
}

/// Loss and parameter gradients in [`GeneratorNet::parameters`] order.
pub fn loss_and_gradients(
    net: &GeneratorNet,
    batch: &BatchView<'_>,
    kernel: &KernelConfig,
    graph: &KnnGraph,
) -> Result<(f64, Vec<Tensor>)> {
    let (loss, mut tape, out) = forward_loss(net, batch, kernel, graph)?;
    let grads = tape.backward(out)?;
    Ok((loss, grads))
}

/// Central-difference gradient of the batch loss evaluated through
/// [`crate::ecmmd::estimate`] on plain generator outputs. Test oracle only:
/// it costs two loss evaluations per parameter entry.
pub fn finite_diff_gradient(
    net: &GeneratorNet,
    batch: &BatchView<'_>,
    kernel: &KernelConfig,
    graph: &KnnGraph,
    step: f64,
) -> Result<Vec<Tensor>> {
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {step}")));
    }
    let loss_at = |probe: &GeneratorNet| -> Result<f64> {
        let z = probe.generate(batch.eta, batch.x)?;
        crate::ecmmd::estimate(graph, batch.y, &z, *kernel)
    };
    let mut probe = net.clone();
    let mut grads = Vec::new();
    for p in 0..net.parameters().len() {
        let len = net.parameters()[p].len();
        let mut g = Tensor::zeros(net.parameters()[p].shape().to_vec());
        for e in 0..len {
            let orig = net.parameters()[p].data()[e];
            probe.parameters_mut()[p].data_mut()[e] = orig + step;
            let up = loss_at(&probe)?;
            probe.parameters_mut()[p].data_mut()[e] = orig - step;
            let down = loss_at(&probe)?;
            probe.parameters_mut()[p].data_mut()[e] = orig;
            g.data_mut()[e] = (up - down) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Smallest `|pre-activation|` over all hidden ReLU units for the given
/// inputs. Finite-difference checks need this well above the step size.
pub fn min_relu_margin(net: &GeneratorNet, eta: &Matrix, x: &Matrix) -> Result<f64> {
    net.check_inputs(eta, x)?;
    let mut h = eta.hstack(x)?.into_data();
    let mut width = net.config().m + net.config().d;
    let n = eta.rows();
    let mut margin = f64::INFINITY;
    let last = net.layers().len() - 1;
    for layer in &net.layers()[..last] {
        let out = layer.weight.shape()[1];
        let mut pre = matmul(&h, n, width, layer.weight.data(), out);
        for row in pre.chunks_exact_mut(out) {
            for (v, b) in row.iter_mut().zip(layer.bias.data()) {
                *v += b;
                margin = margin.min(v.abs());
            }
        }
        h = pre.into_iter().map(|v| v.max(0.0)).collect();
        width = out;
    }
    Ok(margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecmmd::estimate;
    use crate::generator::{init_generator, sample_noise, GeneratorConfig, NoiseSpec};
    use crate::rng::SeededRng;

    fn fixture(seed: u64, b: usize, hidden: Vec<usize>) -> (GeneratorNet, Matrix, Matrix, Matrix) {
        let net = init_generator(&GeneratorConfig::new(1, 2, hidden, seed)).unwrap();
        let mut rng = SeededRng::new(seed ^ 0xabc);
        let x = Matrix::from_fn(b, 1, |_, _| rng.uniform_range(-2.0, 2.0));
        let y = Matrix::from_fn(b, 2, |_, _| rng.standard_normal());
        let eta = sample_noise(&NoiseSpec::new(3).unwrap(), b, seed + 7);
        (net, x, y, eta)
    }

    #[test]
    fn relu_gradient_is_zero_at_and_below_zero() {
        let mut tape = Tape::new();
        let a = tape.parameter(Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(a);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn gaussian_kernel_derivative() {
        // d/da exp(-(a-b)^2 / 2) at a = 0, b = 1 is exp(-1/2).
        let mut tape = Tape::new();
        let a = tape.parameter(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let d = tape.pair_sq_dist(a, b, vec![(0, 0)]).unwrap();
        let s = tape.scale(d, -0.5);
        let e = tape.exp(s);
        let out = tape.sum(e);
        let g = tape.backward(out).unwrap();
        assert!((g[0].data()[0] - 0.6065306597126334).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_and_matmul_gradients() {
        let mut tape = Tape::new();
        let a = tape.parameter(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.parameter(Tensor::new(vec![2, 1], vec![0.5, -0.25]).unwrap());
        let m = tape.matmul(a, w).unwrap();
        let s = tape.sigmoid(m);
        let out = tape.sum(s);
        let g = tape.backward(out).unwrap();
        // pre-activation is 0, sigmoid' = 1/4
        assert_eq!(g[0].data(), &[0.125, -0.0625]);
        assert_eq!(g[1].data(), &[0.25, 0.5]);
    }

    #[test]
    fn tape_cannot_be_replayed() {
        let (net, x, y, eta) = fixture(1, 6, vec![4]);
        let graph = KnnGraph::build(&x, 2).unwrap();
        let batch = BatchView::new(&x, &y, &eta).unwrap();
        let (_, mut tape, out) = forward_loss(&net, &batch, &KernelConfig::gaussian(1.0).unwrap(), &graph).unwrap();
        tape.backward(out).unwrap();
        assert!(matches!(tape.backward(out), Err(Error::TapeConsumed)));
    }

    #[test]
    fn loss_matches_estimator() {
        for seed in 0..20u64 {
            let (net, x, y, eta) = fixture(seed, 12, vec![8, 8]);
            let graph = KnnGraph::build(&x, 3).unwrap();
            let kernel = KernelConfig::gaussian(0.5 + seed as f64 * 0.1).unwrap();
            let batch = BatchView::new(&x, &y, &eta).unwrap();
            let (loss, _, _) = forward_loss(&net, &batch, &kernel, &graph).unwrap();
            let z = net.generate(&eta, &x).unwrap();
            let reference = estimate(&graph, &y, &z, kernel).unwrap();
            assert!((loss - reference).abs() < 1e-12, "seed {seed}: {loss} vs {reference}");
        }
    }

    #[test]
    fn zero_loss_when_generator_reproduces_responses() {
        // zero weights and biases set to the common response: z_i = y_i
        let cfg = GeneratorConfig::new(1, 2, vec![3], 0);
        let mut net = init_generator(&cfg).unwrap();
        for p in net.parameters_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        net.parameters_mut()[3].data_mut().copy_from_slice(&[0.3, -0.7]);
        let x = Matrix::column(&[0.0, 1.0, 2.0, 3.0]);
        let y = Matrix::from_fn(4, 2, |_, j| if j == 0 { 0.3 } else { -0.7 });
        let eta = sample_noise(&NoiseSpec::new(3).unwrap(), 4, 5);
        let graph = KnnGraph::build(&x, 1).unwrap();
        let batch = BatchView::new(&x, &y, &eta).unwrap();
        let (loss, grads) = loss_and_gradients(&net, &batch, &KernelConfig::gaussian(1.0).unwrap(), &graph).unwrap();
        assert_eq!(loss, 0.0);
        for g in grads {
            assert!(g.data().iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn output_bias_gradient_by_hand() {
        // Zero network, batch of two, k = 1: z = c for both rows, y = (0, 1).
        // L = 1/2 Σ_i [K(y_i,y_j) - 2 K(y_i, c) + 1], so
        // dL/dc = -Σ_i dK(y_i,c)/dc = -Σ_i K(y_i,c) (y_i - c) / h².
        let cfg = GeneratorConfig::new(1, 1, vec![2], 0);
        let mut net = init_generator(&cfg).unwrap();
        for p in net.parameters_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let c = 0.25;
        net.parameters_mut()[3].data_mut()[0] = c;
        let x = Matrix::column(&[0.0, 1.0]);
        let y = Matrix::column(&[0.0, 1.0]);
        let eta = sample_noise(&NoiseSpec::new(3).unwrap(), 2, 1);
        let graph = KnnGraph::build(&x, 1).unwrap();
        let batch = BatchView::new(&x, &y, &eta).unwrap();
        let (loss, grads) = loss_and_gradients(&net, &batch, &KernelConfig::gaussian(1.0).unwrap(), &graph).unwrap();
        let k = |a: f64, b: f64| (-(a - b) * (a - b) / 2.0).exp();
        let expected_loss = 0.5 * (2.0 * k(0.0, 1.0) - 2.0 * k(0.0, c) - 2.0 * k(1.0, c) + 2.0);
        let expected_grad = -(k(0.0, c) * (0.0 - c) + k(1.0, c) * (1.0 - c));
        assert!((loss - expected_loss).abs() < 1e-14);
        assert!((grads[3].data()[0] - expected_grad).abs() < 1e-14);
    }

    #[test]
    fn matches_central_differences() {
        let mut checked = 0;
        for seed in 0..40u64 {
            let (net, x, y, eta) = fixture(seed, 8, vec![6, 6]);
            if min_relu_margin(&net, &eta, &x).unwrap() < 1e-2 {
                continue;
            }
            let graph = KnnGraph::build(&x, 3).unwrap();
            let kernel = KernelConfig::gaussian(1.0).unwrap();
            let batch = BatchView::new(&x, &y, &eta).unwrap();
            let (_, ad) = loss_and_gradients(&net, &batch, &kernel, &graph).unwrap();
            let fd = finite_diff_gradient(&net, &batch, &kernel, &graph, 1e-5).unwrap();
            for (a, f) in ad.iter().zip(&fd) {
                for (u, v) in a.data().iter().zip(f.data()) {
                    assert!((u - v).abs() <= 1e-6 * (1.0 + v.abs()), "seed {seed}: {u} vs {v}");
                }
            }
            checked += 1;
        }
        assert!(checked >= 5, "only {checked} smooth fixtures");
    }

    #[test]
    fn central_difference_error_is_second_order() {
        // Halving the step should cut the truncation error by about 4.
        let (net, x, y, eta) = (0..100u64)
            .map(|s| fixture(s, 8, vec![5]))
            .find(|(n, x, _, e)| min_relu_margin(n, e, x).unwrap() > 5e-2)
            .unwrap();
        let graph = KnnGraph::build(&x, 3).unwrap();
        let kernel = KernelConfig::gaussian(0.7).unwrap();
        let batch = BatchView::new(&x, &y, &eta).unwrap();
        let (_, ad) = loss_and_gradients(&net, &batch, &kernel, &graph).unwrap();
        let err = |step: f64| {
            let fd = finite_diff_gradient(&net, &batch, &kernel, &graph, step).unwrap();
            ad.iter()
                .zip(&fd)
                .flat_map(|(a, f)| a.data().iter().zip(f.data()).map(|(u, v)| (u - v).abs()))
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(4e-3), err(2e-3));
        let ratio = e1 / e2;
        assert!((3.0..5.5).contains(&ratio), "ratio {ratio} ({e1} / {e2})");
    }

    #[test]
    fn rejects_laplace_and_shape_errors() {
        let (net, x, y, eta) = fixture(2, 6, vec![4]);
        let graph = KnnGraph::build(&x, 2).unwrap();
        let batch = BatchView::new(&x, &y, &eta).unwrap();
        assert!(forward_loss(&net, &batch, &KernelConfig::laplace(1.0).unwrap(), &graph).is_err());
        let small = KnnGraph::build(&Matrix::column(&[0.0, 1.0, 2.0]), 1).unwrap();
        assert!(forward_loss(&net, &batch, &KernelConfig::gaussian(1.0).unwrap(), &small).is_err());
        let short = Matrix::zeros(5, 3);
        assert!(BatchView::new(&x, &y, &short).is_err());
    }
}
