//! Recorded forward computations with exact reverse-mode gradients.
//!
//! A [`Tape`] is an append-only graph: builder methods validate shapes as
//! nodes are added, so a constructed tape is topologically ordered and every
//! node's shape is determined by its parents. Tapes are immutable once built
//! and evaluations are pure; concurrent forward/backward passes over the same
//! tape need only their own [`TapeValues`] workspace.

use std::collections::BTreeMap;

use super::conv::{conv_geometry, ConvGeometry};
use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    Parameter,
    Input,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, a: f64) -> f64 {
        match self {
            // Subgradient at 0 is taken as 0.
            Activation::Relu => a.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-a).exp()),
            Activation::Tanh => a.tanh(),
        }
    }

    /// Derivative expressed through input `a` and output `y`.
    fn derivative(self, a: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(LeafKind),
    /// `weight [m, n] · input(flattened) [n] -> [m]`
    Linear { weight: NodeId, input: NodeId },
    Add { lhs: NodeId, rhs: NodeId },
    Activation { input: NodeId, f: Activation },
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        stride: usize,
        padding: Padding,
    },
    /// Nearest-neighbor spatial upsampling of `[H, W, C]` by an integer factor.
    Upsample { input: NodeId, factor: usize },
    Sum { input: NodeId },
    SquaredNorm { input: NodeId },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf(_))
    }

    /// All leaves in insertion order with their kinds.
    pub fn leaves(&self) -> impl Iterator<Item = (NodeId, LeafKind)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Leaf(kind) => Some((NodeId(i), kind)),
            _ => None,
        })
    }

    pub fn leaf(&mut self, kind: LeafKind, shape: &[usize]) -> NodeId {
        self.push(Op::Leaf(kind), shape.to_vec())
    }

    pub fn linear(&mut self, weight: NodeId, input: NodeId) -> Result<NodeId, TensorError> {
        let ws = self.shape_of(weight);
        if ws.len() != 2 {
            return Err(self.shape_err(weight, format!("linear weight must be [m,n], got {ws:?}")));
        }
        let (m, n) = (ws[0], ws[1]);
        let in_len: usize = self.shape_of(input).iter().product();
        if in_len != n {
            return Err(self.shape_err(
                input,
                format!("linear expects input of {n} values, got {in_len}"),
            ));
        }
        Ok(self.push(Op::Linear { weight, input }, vec![m]))
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, TensorError> {
        if self.shape_of(lhs) != self.shape_of(rhs) {
            return Err(self.shape_err(
                rhs,
                format!("add of {:?} and {:?}", self.shape_of(lhs), self.shape_of(rhs)),
            ));
        }
        let shape = self.shape_of(lhs).to_vec();
        Ok(self.push(Op::Add { lhs, rhs }, shape))
    }

    pub fn activation(&mut self, input: NodeId, f: Activation) -> NodeId {
        let shape = self.shape_of(input).to_vec();
        self.push(Op::Activation { input, f }, shape)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId, TensorError> {
        let g: ConvGeometry =
            conv_geometry(self.shape_of(input), self.shape_of(kernels), stride, padding)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                kernels,
                stride,
                padding,
            },
            vec![g.out_h, g.out_w, g.m],
        ))
    }

    pub fn upsample(&mut self, input: NodeId, factor: usize) -> Result<NodeId, TensorError> {
        let s = self.shape_of(input);
        if s.len() != 3 {
            return Err(self.shape_err(input, format!("upsample expects [H,W,C], got {s:?}")));
        }
        if factor == 0 {
            return Err(TensorError::InvalidOp("upsample factor must be positive".into()));
        }
        let shape = vec![s[0] * factor, s[1] * factor, s[2]];
        Ok(self.push(Op::Upsample { input, factor }, shape))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        self.push(Op::Sum { input }, vec![])
    }

    pub fn squared_norm(&mut self, input: NodeId) -> NodeId {
        self.push(Op::SquaredNorm { input }, vec![])
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(&self, node: NodeId, message: String) -> TensorError {
        TensorError::ShapeMismatch {
            node: node.0,
            message,
        }
    }
}

/// Values of every node from one forward pass.
#[derive(Debug, Clone)]
pub struct TapeValues {
    values: Vec<Tensor>,
}

impl TapeValues {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }
}

/// Evaluates the tape with the given leaf bindings, returning values for all
/// nodes. Deterministic for fixed inputs; rejects unbound leaves, shape
/// mismatches (with the offending node), and non-finite intermediates.
pub fn eval_forward(
    tape: &Tape,
    leaves: &BTreeMap<NodeId, Tensor>,
) -> Result<TapeValues, TensorError> {
    let mut values: Vec<Tensor> = Vec::with_capacity(tape.nodes.len());
    for (i, node) in tape.nodes.iter().enumerate() {
        let out = match &node.op {
            Op::Leaf(_) => {
                let t = leaves
                    .get(&NodeId(i))
                    .ok_or(TensorError::UnboundLeaf { node: i })?;
                if t.shape() != node.shape.as_slice() {
                    return Err(TensorError::ShapeMismatch {
                        node: i,
                        message: format!(
                            "leaf bound with shape {:?}, declared {:?}",
                            t.shape(),
                            node.shape
                        ),
                    });
                }
                t.clone()
            }
            Op::Linear { weight, input } => {
                let w = &values[weight.0];
                let x = &values[input.0];
                let (m, n) = (w.shape()[0], w.shape()[1]);
                let mut out = vec![0.0; m];
                let wv = w.values();
                let xv = x.values();
                for (row, o) in out.iter_mut().enumerate() {
                    let base = row * n;
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += wv[base + j] * xv[j];
                    }
                    *o = acc;
                }
                Tensor::new(vec![m], out).map_err(|_| TensorError::NonFiniteNode { node: i })?
            }
            Op::Add { lhs, rhs } => values[lhs.0]
                .add_scaled(&values[rhs.0], 1.0)
                .map_err(|_| TensorError::NonFiniteNode { node: i })?,
            Op::Activation { input, f } => values[input.0]
                .map(|a| f.apply(a))
                .map_err(|_| TensorError::NonFiniteNode { node: i })?,
            Op::Conv2d {
                input,
                kernels,
                stride,
                padding,
            } => super::conv::conv2d(&values[input.0], &values[kernels.0], *stride, *padding)
                .map_err(|e| match e {
                    TensorError::NonFinite { .. } => TensorError::NonFiniteNode { node: i },
                    other => other,
                })?,
            Op::Upsample { input, factor } => {
                let x = &values[input.0];
                let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let f = *factor;
                let mut out = vec![0.0; h * f * w * f * c];
                for y in 0..h * f {
                    for xcol in 0..w * f {
                        let src = ((y / f) * w + xcol / f) * c;
                        let dst = (y * w * f + xcol) * c;
                        out[dst..dst + c].copy_from_slice(&x.values()[src..src + c]);
                    }
                }
                Tensor::new(vec![h * f, w * f, c], out)
                    .map_err(|_| TensorError::NonFiniteNode { node: i })?
            }
            Op::Sum { input } => {
                let s: f64 = values[input.0].values().iter().sum();
                Tensor::new(vec![], vec![s]).map_err(|_| TensorError::NonFiniteNode { node: i })?
            }
            Op::SquaredNorm { input } => {
                let s = values[input.0].squared_norm();
                Tensor::new(vec![], vec![s]).map_err(|_| TensorError::NonFiniteNode { node: i })?
            }
        };
        values.push(out);
    }
    Ok(TapeValues { values })
}

/// Exact gradient of a scalar `seed` node with respect to every leaf, both
/// parameters and inputs. Requires the forward values for the same bindings.
pub fn eval_backward(
    tape: &Tape,
    values: &TapeValues,
    seed: NodeId,
) -> Result<BTreeMap<NodeId, Tensor>, TensorError> {
    let len = values.get(seed).len();
    if len != 1 {
        return Err(TensorError::NonScalarSeed {
            node: seed.index(),
            len,
        });
    }
    let one = Tensor::new(values.get(seed).shape().to_vec(), vec![1.0])?;
    eval_backward_seeded(tape, values, &[(seed, one)])
}

/// General vector-Jacobian product: propagates the given cotangents backward
/// and returns the accumulated gradient at every leaf. `eval_backward` is the
/// special case of a single scalar seed with cotangent 1.
pub fn eval_backward_seeded(
    tape: &Tape,
    values: &TapeValues,
    seeds: &[(NodeId, Tensor)],
) -> Result<BTreeMap<NodeId, Tensor>, TensorError> {
    let n = tape.nodes.len();
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
    for (id, cot) in seeds {
        if cot.shape() != tape.shape_of(*id) {
            return Err(TensorError::ShapeMismatch {
                node: id.0,
                message: format!(
                    "cotangent shape {:?} vs node shape {:?}",
                    cot.shape(),
                    tape.shape_of(*id)
                ),
            });
        }
        accumulate(&mut grads[id.0], cot.values());
    }

    for i in (0..n).rev() {
        let Some(gout) = grads[i].take() else {
            continue;
        };
        match &tape.nodes[i].op {
            Op::Leaf(_) => {
                grads[i] = Some(gout);
            }
            Op::Linear { weight, input } => {
                let w = values.values[weight.0].values();
                let x = values.values[input.0].values();
                let (m, nn) = (
                    tape.nodes[weight.0].shape[0],
                    tape.nodes[weight.0].shape[1],
                );
                let mut dw = vec![0.0; m * nn];
                let mut dx = vec![0.0; nn];
                for row in 0..m {
                    let g = gout[row];
                    if g == 0.0 {
                        continue;
                    }
                    let base = row * nn;
                    for j in 0..nn {
                        dw[base + j] += g * x[j];
                        dx[j] += g * w[base + j];
                    }
                }
                accumulate(&mut grads[weight.0], &dw);
                accumulate(&mut grads[input.0], &dx);
            }
            Op::Add { lhs, rhs } => {
                accumulate(&mut grads[lhs.0], &gout);
                accumulate(&mut grads[rhs.0], &gout);
            }
            Op::Activation { input, f } => {
                let a = values.values[input.0].values();
                let y = values.values[i].values();
                let dx: Vec<f64> = gout
                    .iter()
                    .enumerate()
                    .map(|(j, g)| g * f.derivative(a[j], y[j]))
                    .collect();
                accumulate(&mut grads[input.0], &dx);
            }
            Op::Conv2d {
                input,
                kernels,
                stride,
                padding,
            } => {
                let gt = Tensor::new(tape.nodes[i].shape.clone(), gout)?;
                let (dx, dk) = super::conv::conv2d_backward(
                    &values.values[input.0],
                    &values.values[kernels.0],
                    *stride,
                    *padding,
                    &gt,
                )?;
                accumulate(&mut grads[input.0], dx.values());
                accumulate(&mut grads[kernels.0], dk.values());
            }
            Op::Upsample { input, factor } => {
                let s = &tape.nodes[input.0].shape;
                let (h, w, c) = (s[0], s[1], s[2]);
                let f = *factor;
                let mut dx = vec![0.0; h * w * c];
                for y in 0..h * f {
                    for xcol in 0..w * f {
                        let src = ((y / f) * w + xcol / f) * c;
                        let dst = (y * w * f + xcol) * c;
                        for ci in 0..c {
                            dx[src + ci] += gout[dst + ci];
                        }
                    }
                }
                accumulate(&mut grads[input.0], &dx);
            }
            Op::Sum { input } => {
                let g = gout[0];
                let len = values.values[input.0].len();
                accumulate(&mut grads[input.0], &vec![g; len]);
            }
            Op::SquaredNorm { input } => {
                let g = gout[0];
                let dx: Vec<f64> = values.values[input.0]
                    .values()
                    .iter()
                    .map(|x| 2.0 * g * x)
                    .collect();
                accumulate(&mut grads[input.0], &dx);
            }
        }
    }

    let mut out = BTreeMap::new();
    for (id, _) in tape.leaves() {
        let shape = tape.shape_of(id).to_vec();
        let g = match &grads[id.0] {
            Some(v) => Tensor::new(shape, v.clone())?,
            None => Tensor::zeros(&shape),
        };
        out.insert(id, g);
    }
    Ok(out)
}

fn accumulate(slot: &mut Option<Vec<f64>>, addend: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(addend) {
                *a += b;
            }
        }
        None => *slot = Some(addend.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn bindings(pairs: Vec<(NodeId, Tensor)>) -> BTreeMap<NodeId, Tensor> {
        pairs.into_iter().collect()
    }

    #[test]
    fn identity_linear_node() {
        let mut tape = Tape::new();
        let w = tape.leaf(LeafKind::Parameter, &[2, 2]);
        let x = tape.leaf(LeafKind::Input, &[2]);
        let y = tape.linear(w, x).unwrap();
        let vals = eval_forward(
            &tape,
            &bindings(vec![
                (w, Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()),
                (x, Tensor::vector(&[1.0, 2.0]).unwrap()),
            ]),
        )
        .unwrap();
        assert_eq!(vals.get(y).values(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(LeafKind::Input, &[3]);
        let y = tape.activation(x, Activation::Relu);
        let vals = eval_forward(
            &tape,
            &bindings(vec![(x, Tensor::vector(&[-1.0, 0.0, 3.0]).unwrap())]),
        )
        .unwrap();
        assert_eq!(vals.get(y).values(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn two_layer_net_matches_hand_rolled_loops() {
        let mut r = rng::seeded(21);
        let (n_in, n_h, n_out) = (4, 5, 3);
        let w1v: Vec<f64> = (0..n_h * n_in).map(|_| r.random_range(-1.0..1.0)).collect();
        let b1v: Vec<f64> = (0..n_h).map(|_| r.random_range(-1.0..1.0)).collect();
        let w2v: Vec<f64> = (0..n_out * n_h).map(|_| r.random_range(-1.0..1.0)).collect();
        let xv: Vec<f64> = (0..n_in).map(|_| r.random_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let w1 = tape.leaf(LeafKind::Parameter, &[n_h, n_in]);
        let b1 = tape.leaf(LeafKind::Parameter, &[n_h]);
        let w2 = tape.leaf(LeafKind::Parameter, &[n_out, n_h]);
        let x = tape.leaf(LeafKind::Input, &[n_in]);
        let a1 = tape.linear(w1, x).unwrap();
        let a1b = tape.add(a1, b1).unwrap();
        let h = tape.activation(a1b, Activation::Relu);
        let out = tape.linear(w2, h).unwrap();

        let vals = eval_forward(
            &tape,
            &bindings(vec![
                (w1, Tensor::new(vec![n_h, n_in], w1v.clone()).unwrap()),
                (b1, Tensor::vector(&b1v).unwrap()),
                (w2, Tensor::new(vec![n_out, n_h], w2v.clone()).unwrap()),
                (x, Tensor::vector(&xv).unwrap()),
            ]),
        )
        .unwrap();

        // Straight-line re-implementation.
        let mut hidden = vec![0.0; n_h];
        for i in 0..n_h {
            let mut a = b1v[i];
            for j in 0..n_in {
                a += w1v[i * n_in + j] * xv[j];
            }
            hidden[i] = a.max(0.0);
        }
        let mut expect = vec![0.0; n_out];
        for i in 0..n_out {
            for j in 0..n_h {
                expect[i] += w2v[i * n_h + j] * hidden[j];
            }
        }
        for (a, b) in vals.get(out).values().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_of_identity_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(LeafKind::Input, &[1]);
        let s = tape.sum(x);
        let vals =
            eval_forward(&tape, &bindings(vec![(x, Tensor::vector(&[4.2]).unwrap())])).unwrap();
        let grads = eval_backward(&tape, &vals, s).unwrap();
        assert_eq!(grads[&x].values(), &[1.0]);
    }

    #[test]
    fn gradient_of_half_squared_norm_is_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(LeafKind::Input, &[2]);
        let n = tape.squared_norm(x);
        let vals = eval_forward(
            &tape,
            &bindings(vec![(x, Tensor::vector(&[3.0, -4.0]).unwrap())]),
        )
        .unwrap();
        // seed ‖x‖² with cotangent ½ gives ∇(‖x‖²/2) = x
        let half = Tensor::new(vec![], vec![0.5]).unwrap();
        let grads = eval_backward_seeded(&tape, &vals, &[(n, half)]).unwrap();
        assert_eq!(grads[&x].values(), &[3.0, -4.0]);
    }

    #[test]
    fn rejects_non_scalar_seed() {
        let mut tape = Tape::new();
        let x = tape.leaf(LeafKind::Input, &[2]);
        let y = tape.activation(x, Activation::Tanh);
        let vals = eval_forward(
            &tape,
            &bindings(vec![(x, Tensor::vector(&[0.1, 0.2]).unwrap())]),
        )
        .unwrap();
        assert!(matches!(
            eval_backward(&tape, &vals, y),
            Err(TensorError::NonScalarSeed { .. })
        ));
    }

    #[test]
    fn rejects_unbound_leaf_and_bad_shape() {
        let mut tape = Tape::new();
        let x = tape.leaf(LeafKind::Input, &[2]);
        let _ = tape.sum(x);
        assert!(matches!(
            eval_forward(&tape, &BTreeMap::new()),
            Err(TensorError::UnboundLeaf { .. })
        ));
        assert!(matches!(
            eval_forward(&tape, &bindings(vec![(x, Tensor::vector(&[1.0]).unwrap())])),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn backward_is_linear_in_the_seed() {
        // gradient of a·f + b·g equals a·grad(f) + b·grad(g)
        let mut tape = Tape::new();
        let x = tape.leaf(LeafKind::Input, &[3]);
        let t = tape.activation(x, Activation::Tanh);
        let f = tape.sum(t);
        let g = tape.squared_norm(x);
        let vals = eval_forward(
            &tape,
            &bindings(vec![(x, Tensor::vector(&[0.3, -0.7, 1.1]).unwrap())]),
        )
        .unwrap();
        let (a, b) = (1.7, -0.4);
        let combined = eval_backward_seeded(
            &tape,
            &vals,
            &[
                (f, Tensor::new(vec![], vec![a]).unwrap()),
                (g, Tensor::new(vec![], vec![b]).unwrap()),
            ],
        )
        .unwrap();
        let gf = eval_backward(&tape, &vals, f).unwrap();
        let gg = eval_backward(&tape, &vals, g).unwrap();
        for i in 0..3 {
            let expect = a * gf[&x].values()[i] + b * gg[&x].values()[i];
            assert!((combined[&x].values()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut tape = Tape::new();
        let w = tape.leaf(LeafKind::Parameter, &[3, 3]);
        let x = tape.leaf(LeafKind::Input, &[3]);
        let a = tape.linear(w, x).unwrap();
        let h = tape.activation(a, Activation::Sigmoid);
        let out = tape.squared_norm(h);
        let mut r = rng::seeded(5);
        let b = bindings(vec![
            (
                w,
                Tensor::new(vec![3, 3], (0..9).map(|_| r.random_range(-1.0..1.0)).collect())
                    .unwrap(),
            ),
            (x, Tensor::vector(&[0.2, -0.8, 0.5]).unwrap()),
        ]);
        let v1 = eval_forward(&tape, &b).unwrap();
        let v2 = eval_forward(&tape, &b).unwrap();
        assert_eq!(v1.get(out).values()[0].to_bits(), v2.get(out).values()[0].to_bits());
    }

    #[test]
    fn upsample_round_trip_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(LeafKind::Input, &[2, 2, 1]);
        let up = tape.upsample(x, 2).unwrap();
        assert_eq!(tape.shape_of(up), &[4, 4, 1]);
        let vals = eval_forward(
            &tape,
            &bindings(vec![(
                x,
                Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            )]),
        )
        .unwrap();
        assert_eq!(
            vals.get(up).values(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }
}
