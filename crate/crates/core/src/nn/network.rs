//! A small feed-forward layer graph with analytic backward passes.
//!
//! Nodes are evaluated in insertion order, so any node may consume the output
//! of any earlier node; skip connections are plain multi-input nodes.
//! Activations live in a [`Trace`] returned from [`Network::forward`], which
//! keeps the network itself immutable during training and inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;
pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters are skipped by the optimizer and gradient checks.
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    /// 3x3 convolution, stride 1, zero "same" padding.
    Conv3x3 {
        weight: ParamId,
        bias: ParamId,
    },
    MaxPool2,
    /// Nearest-neighbour 2x upsampling.
    Upsample2,
    Relu,
    Sigmoid,
    /// Channel concatenation of the two inputs.
    Concat,
    /// Element-wise sum of the two inputs.
    Add,
    /// Fully connected layer over the flattened input.
    Dense {
        weight: ParamId,
        bias: ParamId,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    /// Per-item output shape (no batch axis).
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    nodes: Vec<Node>,
    params: Vec<Param>,
    output: NodeId,
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    node_count: usize,
    batch: usize,
    acts: Vec<Tensor>,
    /// Argmax offsets for max-pool nodes, indexed like `acts`.
    pool_index: Vec<Vec<u32>>,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        self.acts.last().expect("trace has at least the input node")
    }

    pub fn activation(&self, node: NodeId) -> &Tensor {
        &self.acts[node]
    }
}

/// Parameter gradients (aligned with [`Network::params`], zero for frozen
/// parameters) and the input gradient.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<Tensor>,
    pub input: Tensor,
}

impl Network {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[0].shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.output].shape
    }

    pub fn output_node(&self) -> NodeId {
        self.output
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn freeze_all(&mut self) {
        self.params.iter_mut().for_each(|p| p.frozen = true);
    }

    /// Evaluates the graph on a batch `[N, ...input_shape]`.
    pub fn forward(&self, x: &Tensor) -> Result<Trace> {
        if x.dims().len() != self.input_shape().len() + 1 || &x.dims()[1..] != self.input_shape() {
            return Err(Error::invalid(format!(
                "input dims {:?} do not match network input [N, {:?}]",
                x.dims(),
                self.input_shape()
            )));
        }
        let batch = x.batch();
        let mut acts: Vec<Tensor> = Vec::with_capacity(self.output + 1);
        let mut pool_index = vec![Vec::new(); self.output + 1];
        for (id, node) in self.nodes.iter().enumerate().take(self.output + 1) {
            let out = match &node.op {
                Op::Input => x.clone(),
                Op::Conv3x3 { weight, bias } => conv_forward(
                    &acts[node.inputs[0]],
                    &self.params[*weight].value,
                    &self.params[*bias].value,
                ),
                Op::MaxPool2 => {
                    let (out, idx) = maxpool_forward(&acts[node.inputs[0]]);
                    pool_index[id] = idx;
                    out
                }
                Op::Upsample2 => upsample_forward(&acts[node.inputs[0]]),
                Op::Relu => map(&acts[node.inputs[0]], |v| v.max(0.0)),
                Op::Sigmoid => map(&acts[node.inputs[0]], |v| 1.0 / (1.0 + (-v).exp())),
                Op::Concat => concat_forward(&acts[node.inputs[0]], &acts[node.inputs[1]]),
                Op::Add => {
                    let mut out = acts[node.inputs[0]].clone();
                    out.add_assign(&acts[node.inputs[1]]);
                    out
                }
                Op::Dense { weight, bias } => dense_forward(
                    &acts[node.inputs[0]],
                    &self.params[*weight].value,
                    &self.params[*bias].value,
                ),
            };
            debug_assert_eq!(&out.dims()[1..], node.shape.as_slice(), "node {id}");
            acts.push(out);
        }
        Ok(Trace {
            node_count: self.nodes.len(),
            batch,
            acts,
            pool_index,
        })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut trace = self.forward(x)?;
        Ok(trace.acts.swap_remove(self.output))
    }

    /// Backpropagates `grad_out` (shaped like the output) through the trace.
    pub fn backward(&self, trace: &Trace, grad_out: &Tensor) -> Result<Gradients> {
        self.backward_from(trace, &[(self.output, grad_out)])
    }

    /// Backpropagates gradient seeds placed on arbitrary nodes.
    pub fn backward_from(&self, trace: &Trace, seeds: &[(NodeId, &Tensor)]) -> Result<Gradients> {
        if trace.node_count != self.nodes.len() || trace.acts.len() != self.output + 1 {
            return Err(Error::State(
                "trace was not produced by this network".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; trace.acts.len()];
        for (node, g) in seeds {
            if *node >= trace.acts.len() {
                return Err(Error::State(format!(
                    "no activation recorded for node {node}"
                )));
            }
            if g.dims() != trace.acts[*node].dims() {
                return Err(Error::invalid(format!(
                    "gradient dims {:?} do not match activation {:?}",
                    g.dims(),
                    trace.acts[*node].dims()
                )));
            }
            accumulate(&mut grads[*node], (*g).clone());
        }
        let mut param_grads: Vec<Tensor> = self
            .params
            .iter()
            .map(|p| Tensor::zeros(p.value.dims()))
            .collect();

        for id in (1..trace.acts.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => unreachable!("only node 0 is an input"),
                Op::Conv3x3 { weight, bias } => {
                    let x = &trace.acts[node.inputs[0]];
                    let pg = (!self.params[*weight].frozen)
                        .then(|| split_two(&mut param_grads, *weight, *bias));
                    let dx = conv_backward(x, &self.params[*weight].value, &g, pg);
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::MaxPool2 => {
                    let x = &trace.acts[node.inputs[0]];
                    let mut dx = Tensor::zeros(x.dims());
                    for (o, &i) in trace.pool_index[id].iter().enumerate() {
                        dx.data_mut()[i as usize] += g.data()[o];
                    }
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::Upsample2 => {
                    let dx = upsample_backward(&g, trace.acts[node.inputs[0]].dims());
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::Relu => {
                    let x = &trace.acts[node.inputs[0]];
                    let mut dx = g;
                    for (d, v) in dx.data_mut().iter_mut().zip(x.data()) {
                        if *v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::Sigmoid => {
                    let y = &trace.acts[id];
                    let mut dx = g;
                    for (d, s) in dx.data_mut().iter_mut().zip(y.data()) {
                        *d *= s * (1.0 - s);
                    }
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::Concat => {
                    let a = &trace.acts[node.inputs[0]];
                    let b = &trace.acts[node.inputs[1]];
                    let (da, db) = concat_backward(&g, a.dims(), b.dims());
                    accumulate(&mut grads[node.inputs[0]], da);
                    accumulate(&mut grads[node.inputs[1]], db);
                }
                Op::Add => {
                    accumulate(&mut grads[node.inputs[0]], g.clone());
                    accumulate(&mut grads[node.inputs[1]], g);
                }
                Op::Dense { weight, bias } => {
                    let x = &trace.acts[node.inputs[0]];
                    let pg = (!self.params[*weight].frozen)
                        .then(|| split_two(&mut param_grads, *weight, *bias));
                    let dx = dense_backward(x, &self.params[*weight].value, &g, pg);
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
            }
        }
        let input = grads[0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(trace.acts[0].dims()));
        debug_assert_eq!(input.batch(), trace.batch);
        Ok(Gradients {
            params: param_grads,
            input,
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn split_two(v: &mut [Tensor], a: usize, b: usize) -> (&mut Tensor, &mut Tensor) {
    assert!(a < b, "weight is registered before bias");
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.dims(), x.data().iter().map(|&v| f(v)).collect()).expect("same dims")
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices fully contained in the given slices
    // (checked by the debug assertions at each call site), and `c` does not
    // alias `a` or `b` because it is a distinct &mut borrow.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unrolls 3x3 neighbourhoods: `cols[(ci*9 + ky*3 + kx), y*w + x]`.
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], cin: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..w - 1])
                            .for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (n, cin, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let cout = weight.dims()[0];
    let hw = h * w;
    let k = cin * 9;
    let mut out = Tensor::zeros(&[n, cout, h, w]);
    let mut cols = vec![0.0; k * hw];
    for s in 0..n {
        im2col(x.item(s), cin, h, w, &mut cols);
        let dst = &mut out.data_mut()[s * cout * hw..(s + 1) * cout * hw];
        for (co, b) in bias.data().iter().enumerate() {
            dst[co * hw..(co + 1) * hw].fill(*b);
        }
        gemm(
            cout,
            k,
            hw,
            weight.data(),
            (k as isize, 1),
            &cols,
            (hw as isize, 1),
            1.0,
            dst,
        );
    }
    out
}

/// Input gradient of a convolution; parameter gradients are accumulated into
/// `pg` when given.
fn conv_backward(
    x: &Tensor,
    weight: &Tensor,
    g: &Tensor,
    mut pg: Option<(&mut Tensor, &mut Tensor)>,
) -> Tensor {
    let (n, cin, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let cout = weight.dims()[0];
    let hw = h * w;
    let k = cin * 9;
    let mut dx = Tensor::zeros(x.dims());
    let mut cols = if pg.is_some() {
        vec![0.0; k * hw]
    } else {
        Vec::new()
    };
    let mut dcols = vec![0.0; k * hw];
    for s in 0..n {
        let gs = g.item(s);
        if let Some((dw, db)) = pg.as_mut() {
            for co in 0..cout {
                db.data_mut()[co] += gs[co * hw..(co + 1) * hw].iter().sum::<f64>();
            }
            im2col(x.item(s), cin, h, w, &mut cols);
            // dW[cout x k] += g[cout x hw] * cols^T[hw x k]
            gemm(
                cout,
                hw,
                k,
                gs,
                (hw as isize, 1),
                &cols,
                (1, hw as isize),
                1.0,
                dw.data_mut(),
            );
        }
        // dcols[k x hw] = W^T[k x cout] * g[cout x hw]
        gemm(
            k,
            cout,
            hw,
            weight.data(),
            (1, k as isize),
            gs,
            (hw as isize, 1),
            0.0,
            &mut dcols,
        );
        col2im_add(
            &dcols,
            cin,
            h,
            w,
            &mut dx.data_mut()[s * cin * hw..(s + 1) * cin * hw],
        );
    }
    dx
}

fn maxpool_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (n, c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut idx = vec![0u32; n * c * oh * ow];
    let src = x.data();
    for p in 0..n * c {
        let base = p * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + 2 * y * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * xo + dx;
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                let o = p * oh * ow + y * ow + xo;
                out.data_mut()[o] = src[best];
                idx[o] = best as u32;
            }
        }
    }
    (out, idx)
}

fn upsample_forward(x: &Tensor) -> Tensor {
    let (n, c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        for y in 0..2 * h {
            for xo in 0..2 * w {
                dst[p * 4 * h * w + y * 2 * w + xo] = src[p * h * w + (y / 2) * w + xo / 2];
            }
        }
    }
    out
}

fn upsample_backward(g: &Tensor, in_dims: &[usize]) -> Tensor {
    let (n, c, h, w) = (in_dims[0], in_dims[1], in_dims[2], in_dims[3]);
    let mut dx = Tensor::zeros(in_dims);
    let src = g.data();
    let dst = dx.data_mut();
    for p in 0..n * c {
        for y in 0..2 * h {
            for xo in 0..2 * w {
                dst[p * h * w + (y / 2) * w + xo / 2] += src[p * 4 * h * w + y * 2 * w + xo];
            }
        }
    }
    dx
}

fn concat_forward(a: &Tensor, b: &Tensor) -> Tensor {
    let n = a.batch();
    let (la, lb) = (a.item_len(), b.item_len());
    let mut dims = a.dims().to_vec();
    dims[1] += b.dims()[1];
    let mut data = Vec::with_capacity(n * (la + lb));
    for s in 0..n {
        data.extend_from_slice(a.item(s));
        data.extend_from_slice(b.item(s));
    }
    Tensor::new(&dims, data).expect("concat dims")
}

fn concat_backward(g: &Tensor, a_dims: &[usize], b_dims: &[usize]) -> (Tensor, Tensor) {
    let n = g.batch();
    let la: usize = a_dims[1..].iter().product();
    let lb: usize = b_dims[1..].iter().product();
    let mut da = Vec::with_capacity(n * la);
    let mut db = Vec::with_capacity(n * lb);
    for s in 0..n {
        let item = g.item(s);
        da.extend_from_slice(&item[..la]);
        db.extend_from_slice(&item[la..]);
    }
    (
        Tensor::new(a_dims, da).expect("dims"),
        Tensor::new(b_dims, db).expect("dims"),
    )
}

fn dense_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let n = x.batch();
    let fin = x.item_len();
    let fout = weight.dims()[0];
    let mut out = Tensor::zeros(&[n, fout]);
    for s in 0..n {
        out.data_mut()[s * fout..(s + 1) * fout].copy_from_slice(bias.data());
    }
    // out[n x fout] += x[n x fin] * W^T[fin x fout]
    gemm(
        n,
        fin,
        fout,
        x.data(),
        (fin as isize, 1),
        weight.data(),
        (1, fin as isize),
        1.0,
        out.data_mut(),
    );
    out
}

fn dense_backward(
    x: &Tensor,
    weight: &Tensor,
    g: &Tensor,
    pg: Option<(&mut Tensor, &mut Tensor)>,
) -> Tensor {
    let n = x.batch();
    let fin = x.item_len();
    let fout = weight.dims()[0];
    if let Some((dw, db)) = pg {
        for s in 0..n {
            for (d, v) in db.data_mut().iter_mut().zip(g.item(s)) {
                *d += v;
            }
        }
        // dW[fout x fin] += g^T[fout x n] * x[n x fin]
        gemm(
            fout,
            n,
            fin,
            g.data(),
            (1, fout as isize),
            x.data(),
            (fin as isize, 1),
            1.0,
            dw.data_mut(),
        );
    }
    // dx[n x fin] = g[n x fout] * W[fout x fin]
    let mut dx = Tensor::zeros(x.dims());
    gemm(
        n,
        fout,
        fin,
        g.data(),
        (fout as isize, 1),
        weight.data(),
        (fin as isize, 1),
        0.0,
        dx.data_mut(),
    );
    dx
}

/// Incrementally assembles a [`Network`], inferring shapes and initializing
/// parameters (He-normal weights, zero biases) from a seeded generator.
pub struct NetworkBuilder {
    nodes: Vec<Node>,
    params: Vec<Param>,
    rng: ChaCha8Rng,
}

impl NetworkBuilder {
    /// `input_shape` excludes the batch axis, e.g. `[channels, height, width]`.
    pub fn new(input_shape: &[usize], seed: u64) -> Self {
        Self {
            nodes: vec![Node {
                op: Op::Input,
                inputs: vec![],
                shape: input_shape.to_vec(),
            }],
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node].shape
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, inputs, shape });
        self.nodes.len() - 1
    }

    fn add_param(&mut self, name: String, dims: &[usize], std: f64) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let len: usize = dims.iter().product();
        let data = if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..len).map(|_| normal.sample(&mut self.rng)).collect()
        } else {
            vec![0.0; len]
        };
        self.params.push(Param {
            name,
            value: Tensor::new(dims, data).expect("dims"),
            frozen: false,
        });
        self.params.len() - 1
    }

    pub fn conv3x3(&mut self, name: &str, x: NodeId, cout: usize) -> NodeId {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3, "conv input must be [C, H, W]");
        let cin = s[0];
        let std = (2.0 / (cin * 9) as f64).sqrt();
        let weight = self.add_param(format!("{name}.weight"), &[cout, cin, 3, 3], std);
        let bias = self.add_param(format!("{name}.bias"), &[cout], 0.0);
        self.push(
            Op::Conv3x3 { weight, bias },
            vec![x],
            vec![cout, s[1], s[2]],
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(Op::Relu, vec![x], s)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(Op::Sigmoid, vec![x], s)
    }

    pub fn max_pool(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        assert!(
            s.len() == 3 && s[1].is_multiple_of(2) && s[2].is_multiple_of(2),
            "max-pool needs even [C, H, W]"
        );
        self.push(Op::MaxPool2, vec![x], vec![s[0], s[1] / 2, s[2] / 2])
    }

    pub fn upsample(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3);
        self.push(Op::Upsample2, vec![x], vec![s[0], s[1] * 2, s[2] * 2])
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 3 && sa[1..] == sb[1..],
            "concat needs matching spatial dims"
        );
        self.push(Op::Concat, vec![a, b], vec![sa[0] + sb[0], sa[1], sa[2]])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        assert_eq!(s, self.shape(b), "add needs equal shapes");
        self.push(Op::Add, vec![a, b], s)
    }

    pub fn dense(&mut self, name: &str, x: NodeId, fout: usize) -> NodeId {
        let fin: usize = self.shape(x).iter().product();
        let std = (2.0 / fin as f64).sqrt();
        let weight = self.add_param(format!("{name}.weight"), &[fout, fin], std);
        let bias = self.add_param(format!("{name}.bias"), &[fout], 0.0);
        self.push(Op::Dense { weight, bias }, vec![x], vec![fout])
    }

    /// Finalizes with `output` as the result node; later nodes are dropped.
    pub fn finish(mut self, output: NodeId) -> Network {
        self.nodes.truncate(output + 1);
        Network {
            nodes: self.nodes,
            params: self.params,
            output,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(dims, data).unwrap()
    }

    #[test]
    fn identity_network_copies_input() {
        let net = NetworkBuilder::new(&[2, 4, 4], 0).finish(0);
        let x = t(&[1, 2, 4, 4], (0..32).map(|v| v as f64).collect());
        assert_eq!(net.predict(&x).unwrap(), x);
    }

    #[test]
    fn all_ones_conv_counts_neighbours() {
        let mut b = NetworkBuilder::new(&[1, 5, 5], 0);
        let c = b.conv3x3("c", 0, 1);
        let mut net = b.finish(c);
        net.params_mut()[0].value.fill(1.0);
        let y = net.predict(&t(&[1, 1, 5, 5], vec![1.0; 25])).unwrap();
        let at = |x: usize, yy: usize| y.data()[yy * 5 + x];
        assert_eq!(at(2, 2), 9.0);
        assert_eq!(at(1, 3), 9.0);
        assert_eq!(at(0, 0), 4.0);
        assert_eq!(at(4, 4), 4.0);
        assert_eq!(at(2, 0), 6.0);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut b = NetworkBuilder::new(&[2, 4, 6], 3);
        let c = b.conv3x3("c", 0, 3);
        let net = b.finish(c);
        let x = t(
            &[2, 2, 4, 6],
            (0..96).map(|v| ((v * 37) % 11) as f64 - 5.0).collect(),
        );
        let y = net.predict(&x).unwrap();
        let w = &net.params()[0].value;
        for s in 0..2 {
            for co in 0..3 {
                for yy in 0..4 {
                    for xx in 0..6 {
                        let mut acc = 0.0;
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (sy, sx) = (yy as isize + ky - 1, xx as isize + kx - 1);
                                    if !(0..4).contains(&sy) || !(0..6).contains(&sx) {
                                        continue;
                                    }
                                    let xv = x.data()
                                        [((s * 2 + ci) * 4 + sy as usize) * 6 + sx as usize];
                                    acc += xv
                                        * w.data()
                                            [((co * 2 + ci) * 3 + ky as usize) * 3 + kx as usize];
                                }
                            }
                        }
                        let got = y.data()[((s * 3 + co) * 4 + yy) * 6 + xx];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn relu_zeroes_negatives() {
        let mut b = NetworkBuilder::new(&[4], 0);
        let r = b.relu(0);
        let net = b.finish(r);
        let y = net
            .predict(&t(&[1, 4], vec![-2.0, -0.0, 0.5, 3.0]))
            .unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.5, 3.0]);
    }

    #[test]
    fn upsample_then_pool_is_identity_on_constants() {
        let mut b = NetworkBuilder::new(&[1, 4, 4], 0);
        let u = b.upsample(0);
        let p = b.max_pool(u);
        let net = b.finish(p);
        let x = t(&[1, 1, 4, 4], vec![0.7; 16]);
        assert_eq!(net.predict(&x).unwrap(), x);
    }

    #[test]
    fn zero_loss_gradient_gives_zero_param_gradients() {
        let mut b = NetworkBuilder::new(&[1, 4, 4], 1);
        let c = b.conv3x3("c", 0, 2);
        let r = b.relu(c);
        let d = b.dense("d", r, 1);
        let net = b.finish(d);
        let x = t(&[2, 1, 4, 4], (0..32).map(|v| v as f64 / 32.0).collect());
        let tr = net.forward(&x).unwrap();
        let g = net.backward(&tr, &Tensor::zeros(&[2, 1])).unwrap();
        assert!(g.params.iter().all(|p| p.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn dense_quadratic_gradient_matches_closed_form() {
        // L = sum (x w - y)^2, dL/dw = 2 x^T (x w - y)
        let mut b = NetworkBuilder::new(&[3], 5);
        let d = b.dense("d", 0, 1);
        let net = b.finish(d);
        let x = t(
            &[4, 3],
            vec![
                1.0, 2.0, 0.5, -1.0, 0.3, 2.0, 0.0, 1.5, -0.7, 2.2, -0.4, 1.0,
            ],
        );
        let ys = [0.5, -1.0, 2.0, 0.1];
        let tr = net.forward(&x).unwrap();
        let resid: Vec<f64> = tr
            .output()
            .data()
            .iter()
            .zip(ys)
            .map(|(p, y)| p - y)
            .collect();
        let g = net
            .backward(&tr, &t(&[4, 1], resid.iter().map(|r| 2.0 * r).collect()))
            .unwrap();
        for j in 0..3 {
            let want: f64 = (0..4).map(|i| 2.0 * x.data()[i * 3 + j] * resid[i]).sum();
            assert!((g.params[0].data()[j] - want).abs() < 1e-12);
        }
        let want_b: f64 = resid.iter().map(|r| 2.0 * r).sum();
        assert!((g.params[1].data()[0] - want_b).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_dims() {
        let net = NetworkBuilder::new(&[1, 4, 4], 0).finish(0);
        assert!(matches!(
            net.forward(&Tensor::zeros(&[1, 1, 4, 5])),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn foreign_trace_is_a_state_error() {
        let mut b = NetworkBuilder::new(&[1, 4, 4], 0);
        let r = b.relu(0);
        let net = b.finish(r);
        let other = NetworkBuilder::new(&[1, 4, 4], 0).finish(0);
        let tr = other.forward(&Tensor::zeros(&[1, 1, 4, 4])).unwrap();
        assert!(matches!(
            net.backward(&tr, &Tensor::zeros(&[1, 1, 4, 4])),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut b = NetworkBuilder::new(&[1, 8, 8], 42);
            let c = b.conv3x3("c", 0, 4);
            let p = b.max_pool(c);
            let d = b.dense("d", p, 2);
            b.finish(d)
        };
        let x = t(&[1, 1, 8, 8], (0..64).map(|v| (v as f64).sin()).collect());
        assert_eq!(build().predict(&x).unwrap(), build().predict(&x).unwrap());
    }
}
