use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, add_assign, gemm, View};
use crate::error::{CarlError, Result};

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    AddConst(NodeId),
    MulConst(NodeId, Vec<f64>),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Exp(NodeId),
    Log(NodeId, f64),
    Tanh(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Powf(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    TransposeLast2 {
        x: NodeId,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Permute0213 {
        x: NodeId,
        dims: [usize; 4],
    },
    Reshape(NodeId),
    ConcatRows(Vec<NodeId>),
    Gather {
        table: NodeId,
        idx: Vec<usize>,
        width: usize,
    },
    SelectAxis1 {
        x: NodeId,
        dims: [usize; 3],
        index: usize,
    },
    SoftmaxRows {
        x: NodeId,
        temperature: f64,
        cols: usize,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2Norm {
        x: NodeId,
        eps: f64,
        cols: usize,
    },
    L2Normalize {
        x: NodeId,
        eps: f64,
        cols: usize,
        norms: Vec<f64>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
}

/// A value in the autodiff graph.
#[derive(Debug)]
pub struct TensorNode {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    pub requires_grad: bool,
    op: Op,
}

/// Tape of tensor nodes in creation order. Parents always precede children,
/// so a reverse sweep over the tape is a valid topological order.
pub struct Graph {
    nodes: Vec<TensorNode>,
    rng: ChaCha8Rng,
    seed: u64,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl Graph {
    pub fn new(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &TensorNode {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].data[0]
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(numel(&shape), data.len());
        let grad = vec![0.0; data.len()];
        self.nodes.push(TensorNode {
            shape,
            data,
            grad,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn check_len(shape: &[usize], data: &[f64]) -> Result<()> {
        if numel(shape) != data.len() {
            return Err(CarlError::Dimension {
                op: "leaf",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(())
    }

    /// Trainable leaf.
    pub fn param(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<NodeId> {
        Self::check_len(shape, &data)?;
        Ok(self.push(shape.to_vec(), data, true, Op::Leaf))
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<NodeId> {
        Self::check_len(shape, &data)?;
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf))
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<NodeId> {
        if requires_grad {
            self.param(data, shape)
        } else {
            self.constant(data, shape)
        }
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CarlError::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_op(&mut self, a: NodeId, b: NodeId, name: &'static str, f: fn(f64, f64) -> f64, op: Op) -> Result<NodeId> {
        self.same_shape(name, a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[.., j] + bias[j]` over the trailing axis.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let d = last_dim(self.shape(x));
        if self.shape(bias) != [d] {
            return Err(CarlError::Dimension {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let data = self
            .value(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), data, rg, Op::AddBias(x, bias)))
    }

    /// `x + c` for a gradient-free tensor `c` of the same size.
    pub fn add_const(&mut self, x: NodeId, c: &[f64]) -> Result<NodeId> {
        if c.len() != self.value(x).len() {
            return Err(CarlError::Dimension {
                op: "add_const",
                lhs: self.shape(x).to_vec(),
                rhs: vec![c.len()],
            });
        }
        let data = self.value(x).iter().zip(c).map(|(a, b)| a + b).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), data, rg, Op::AddConst(x)))
    }

    /// `x ⊙ c` for a gradient-free tensor `c` of the same size.
    pub fn mul_const(&mut self, x: NodeId, c: Vec<f64>) -> Result<NodeId> {
        if c.len() != self.value(x).len() {
            return Err(CarlError::Dimension {
                op: "mul_const",
                lhs: self.shape(x).to_vec(),
                rhs: vec![c.len()],
            });
        }
        let data = self.value(x).iter().zip(&c).map(|(a, b)| a * b).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), data, rg, Op::MulConst(x, c)))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let data = self.value(x).iter().map(|v| v * s).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), data, rg, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: NodeId, s: f64) -> NodeId {
        let data = self.value(x).iter().map(|v| v + s).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), data, rg, Op::AddScalar(x))
    }

    fn map(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let data = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), data, rg, op)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.map(x, f64::exp, Op::Exp(x))
    }

    /// Natural log. A positive `floor` clamps the argument from below and
    /// zeroes the gradient where the clamp is active.
    pub fn log(&mut self, x: NodeId, floor: f64) -> NodeId {
        self.map(x, move |v| v.max(floor).ln(), Op::Log(x, floor))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.map(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.map(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn powf(&mut self, x: NodeId, p: f64) -> NodeId {
        self.map(x, move |v| v.powf(p), Op::Powf(x, p))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![s], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len().max(1) as f64;
        let s: f64 = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![s / n], rg, Op::Mean(x))
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CarlError::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a),
            View::row_major(m, k),
            self.value(b),
            View::row_major(k, n),
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b, m, k, n }))
    }

    /// Batched product `[B×m×k] · [B×k×n]`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(CarlError::Dimension {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..batch {
            gemm(
                &av[i * m * k..(i + 1) * m * k],
                View::row_major(m, k),
                &bv[i * k * n..(i + 1) * k * n],
                View::row_major(k, n),
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![batch, m, n], out, rg, Op::BatchMatMul { a, b, batch, m, k, n }))
    }

    /// Swaps the last two axes; rank 2 or 3.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let (batch, rows, cols) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => {
                return Err(CarlError::Dimension {
                    op: "transpose",
                    lhs: s,
                    rhs: vec![],
                })
            }
        };
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            let off = b * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[off + j * rows + i] = src[off + i * cols + j];
                }
            }
        }
        let mut shape = s;
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let rg = self.rg(x);
        Ok(self.push(shape, out, rg, Op::TransposeLast2 { x, batch, rows, cols }))
    }

    /// `[a,b,c,d] -> [a,c,b,d]`.
    pub fn permute_0213(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(CarlError::Dimension {
                op: "permute_0213",
                lhs: s,
                rhs: vec![],
            });
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = permute_0213_data(self.value(x), dims);
        let rg = self.rg(x);
        Ok(self.push(vec![s[0], s[2], s[1], s[3]], out, rg, Op::Permute0213 { x, dims }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel(shape) != self.value(x).len() {
            return Err(CarlError::Dimension {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), data, rg, Op::Reshape(x)))
    }

    /// Concatenation along the leading axis.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| CarlError::Contract("concat of zero tensors".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(CarlError::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            lead += s[0];
            data.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, data, rg, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows of a `[V×d]` table selected by `idx`, giving `[len×d]`.
    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> Result<NodeId> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(CarlError::Dimension {
                op: "gather_rows",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (rows, width) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(CarlError::Contract(format!(
                "gather index {bad} out of range for table with {rows} rows"
            )));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(&t[i * width..(i + 1) * width]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![idx.len(), width],
            data,
            rg,
            Op::Gather {
                table,
                idx: idx.to_vec(),
                width,
            },
        ))
    }

    /// `x[:, index, :]` of a `[N×T×d]` tensor.
    pub fn select_axis1(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 3 || index >= s[1] {
            return Err(CarlError::Dimension {
                op: "select_axis1",
                lhs: s.to_vec(),
                rhs: vec![index],
            });
        }
        let dims = [s[0], s[1], s[2]];
        let v = self.value(x);
        let mut data = Vec::with_capacity(dims[0] * dims[2]);
        for i in 0..dims[0] {
            let off = (i * dims[1] + index) * dims[2];
            data.extend_from_slice(&v[off..off + dims[2]]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![dims[0], dims[2]], data, rg, Op::SelectAxis1 { x, dims, index }))
    }

    /// Softmax over the trailing axis of `x / temperature`, stabilized by
    /// subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: NodeId, temperature: f64) -> Result<NodeId> {
        if !(temperature > 0.0) {
            return Err(CarlError::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let cols = last_dim(self.shape(x));
        let mut data = self.value(x).to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row, temperature);
        }
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), data, rg, Op::SoftmaxRows { x, temperature, cols }))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let d = last_dim(self.shape(x));
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(CarlError::Dimension {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        if !(eps > 0.0) {
            return Err(CarlError::Parameter(format!("layer_norm eps must be positive, got {eps}")));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = xv.len() / d;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Euclidean norm over the trailing axis, floored at `eps`.
    pub fn l2_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let s = self.shape(x).to_vec();
        let cols = last_dim(&s);
        let data = self
            .value(x)
            .chunks(cols)
            .map(|r| kernels::dot(r, r).sqrt().max(eps))
            .collect();
        let shape = s[..s.len().saturating_sub(1)].to_vec();
        let rg = self.rg(x);
        self.push(shape, data, rg, Op::L2Norm { x, eps, cols })
    }

    /// Rows of `x` divided by their (eps-floored) Euclidean norms.
    pub fn l2_normalize(&mut self, x: NodeId, eps: f64) -> NodeId {
        let cols = last_dim(self.shape(x));
        let xv = self.value(x);
        let norms: Vec<f64> = xv.chunks(cols).map(|r| kernels::dot(r, r).sqrt()).collect();
        let data = xv
            .chunks(cols)
            .zip(&norms)
            .flat_map(|(r, &n)| {
                let d = n.max(eps);
                r.iter().map(move |v| v / d)
            })
            .collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), data, rg, Op::L2Normalize { x, eps, cols, norms })
    }

    /// Inverted dropout with a mask drawn from the graph's seeded RNG.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(CarlError::Parameter(format!("dropout probability {p} not in [0,1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = self.value(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), data, rg, Op::Dropout { x, mask }))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into existing
    /// `grad` buffers, so repeated calls add up.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(CarlError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut pending: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut pending);
            add_assign(&mut self.nodes[i].grad, &g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], pending: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let y = &nodes[i].data;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, pending, *a) {
                    add_assign(ga, g);
                }
                if let Some(gb) = slot(nodes, pending, *b) {
                    add_assign(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, pending, *a) {
                    add_assign(ga, g);
                }
                if let Some(gb) = slot(nodes, pending, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].data, &nodes[b.0].data);
                if let Some(ga) = slot(nodes, pending, *a) {
                    for ((d, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if let Some(gb) = slot(nodes, pending, *b) {
                    for ((d, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = slot(nodes, pending, *x) {
                    add_assign(gx, g);
                }
                let d = nodes[b.0].data.len();
                if let Some(gb) = slot(nodes, pending, *b) {
                    for row in g.chunks(d) {
                        add_assign(gb, row);
                    }
                }
            }
            Op::AddConst(x) | Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = slot(nodes, pending, *x) {
                    add_assign(gx, g);
                }
            }
            Op::MulConst(x, c) => {
                if let Some(gx) = slot(nodes, pending, *x) {
                    for ((d, gi), ci) in gx.iter_mut().zip(g).zip(c) {
                        *d += gi * ci;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = slot(nodes, pending, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, gi)| *d += s * gi);
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = slot(nodes, pending, *x) {
                    for ((d, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                        *d += gi * yi;
                    }
                }
            }
            Op::Log(x, floor) => {
                let xv = &nodes[x.0].data;
                if let Some(gx) = slot(nodes, pending, *x) {
                    for ((d, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        if *floor <= 0.0 || *xi > *floor {
                            *d += gi / xi;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = slot(nodes, pending, *x) {
                    for ((d, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].data;
                if let Some(gx) = slot(nodes, pending, *x) {
                    for ((d, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *d += gi * kernels::gelu_grad(*xi);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = slot(nodes, pending, *x) {
                    for ((d, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Powf(x, p) => {
                let xv = &nodes[x.0].data;
                let p = *p;
                if let Some(gx) = slot(nodes, pending, *x) {
                    for ((d, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        let local = if *xi == 0.0 {
                            if p == 1.0 {
                                1.0
                            } else {
                                0.0
                            }
                        } else {
                            p * xi.powf(p - 1.0)
                        };
                        *d += gi * local;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, pending, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = slot(nodes, pending, *x) {
                    let s = g[0] / gx.len().max(1) as f64;
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(ga) = slot(nodes, pending, *a) {
                    gemm(g, View::row_major(m, n), &nodes[b.0].data, View::row_major(k, n).t(), 1.0, ga);
                }
                if let Some(gb) = slot(nodes, pending, *b) {
                    gemm(&nodes[a.0].data, View::row_major(m, k).t(), g, View::row_major(m, n), 1.0, gb);
                }
            }
            Op::BatchMatMul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (&nodes[a.0].data, &nodes[b.0].data);
                if let Some(ga) = slot(nodes, pending, *a) {
                    for i in 0..*batch {
                        gemm(
                            &g[i * m * n..(i + 1) * m * n],
                            View::row_major(m, n),
                            &bv[i * k * n..(i + 1) * k * n],
                            View::row_major(k, n).t(),
                            1.0,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
                if let Some(gb) = slot(nodes, pending, *b) {
                    for i in 0..*batch {
                        gemm(
                            &av[i * m * k..(i + 1) * m * k],
                            View::row_major(m, k).t(),
                            &g[i * m * n..(i + 1) * m * n],
                            View::row_major(m, n),
                            1.0,
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                }
            }
            Op::TransposeLast2 { x, batch, rows, cols } => {
                if let Some(gx) = slot(nodes, pending, *x) {
                    let (rows, cols) = (*rows, *cols);
                    for bi in 0..*batch {
                        let off = bi * rows * cols;
                        for r in 0..rows {
                            for c in 0..cols {
                                gx[off + r * cols + c] += g[off + c * rows + r];
                            }
                        }
                    }
                }
            }
            Op::Permute0213 { x, dims } => {
                if let Some(gx) = slot(nodes, pending, *x) {
                    // the inverse of 0213 is itself
                    let back = permute_0213_data(g, [dims[0], dims[2], dims[1], dims[3]]);
                    add_assign(gx, &back);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].data.len();
                    if let Some(gp) = slot(nodes, pending, *p) {
                        add_assign(gp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Gather { table, idx, width } => {
                if let Some(gt) = slot(nodes, pending, *table) {
                    let w = *width;
                    for (r, &row) in idx.iter().enumerate() {
                        add_assign(&mut gt[row * w..(row + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::SelectAxis1 { x, dims, index } => {
                if let Some(gx) = slot(nodes, pending, *x) {
                    let [n, t, d] = *dims;
                    for r in 0..n {
                        let off = (r * t + index) * d;
                        add_assign(&mut gx[off..off + d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::SoftmaxRows { x, temperature, cols } => {
                if let Some(gx) = slot(nodes, pending, *x) {
                    let c = *cols;
                    for ((gr, yr), dr) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                        let s = kernels::dot(gr, yr);
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - s) / temperature;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = &nodes[gain.0].data;
                let d = gv.len();
                if let Some(gb) = slot(nodes, pending, *bias) {
                    for row in g.chunks(d) {
                        add_assign(gb, row);
                    }
                }
                if let Some(gg) = slot(nodes, pending, *gain) {
                    for (row, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += row[j] * hr[j];
                        }
                    }
                }
                if let Some(gx) = slot(nodes, pending, *x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, ((row, hr), dr)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        for j in 0..d {
                            dxhat[j] = row[j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = kernels::dot(&dxhat, hr) / d as f64;
                        for j in 0..d {
                            dr[j] += rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::L2Norm { x, eps, cols } => {
                let xv = &nodes[x.0].data;
                if let Some(gx) = slot(nodes, pending, *x) {
                    let c = *cols;
                    for (r, (xr, dr)) in xv.chunks(c).zip(gx.chunks_mut(c)).enumerate() {
                        let n = kernels::dot(xr, xr).sqrt();
                        if n > *eps {
                            for j in 0..c {
                                dr[j] += g[r] * xr[j] / n;
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { x, eps, cols, norms } => {
                if let Some(gx) = slot(nodes, pending, *x) {
                    let c = *cols;
                    for (r, ((gr, yr), dr)) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                        let n = norms[r];
                        if n > *eps {
                            let s = kernels::dot(gr, yr);
                            for j in 0..c {
                                dr[j] += (gr[j] - yr[j] * s) / n;
                            }
                        } else {
                            for j in 0..c {
                                dr[j] += gr[j] / eps;
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = slot(nodes, pending, *x) {
                    for ((d, gi), mi) in gx.iter_mut().zip(g).zip(mask) {
                        *d += gi * mi;
                    }
                }
            }
        }
    }
}

/// Row-wise stabilized softmax of `row / temperature`, in place.
pub fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v / temperature - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Lazily allocated gradient slot for parent `p`, or None when `p` is frozen.
fn slot<'a>(nodes: &[TensorNode], pending: &'a mut [Option<Vec<f64>>], p: NodeId) -> Option<&'a mut Vec<f64>> {
    if !nodes[p.0].requires_grad {
        return None;
    }
    let len = nodes[p.0].data.len();
    Some(pending[p.0].get_or_insert_with(|| vec![0.0; len]))
}

fn permute_0213_data(src: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let [a, b, c, d] = dims;
    let mut out = vec![0.0; src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let from = ((i * b + j) * c + k) * d;
                let to = ((i * c + k) * b + j) * d;
                out[to..to + d].copy_from_slice(&src[from..from + d]);
            }
        }
    }
    out
}
