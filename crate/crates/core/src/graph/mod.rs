//! Typed computation-graph IR.
//!
//! A [`ModelGraph`] is an immutable, validated, topologically ordered list of
//! nodes connected by named values, together with the float weights they read.
//! Every value carries a statically inferred per-sample shape: the leading
//! batch dimension is implicit and never stored.

pub mod builder;
pub mod cost;
pub mod groups;
pub mod onnx;
pub mod prune;
pub mod toy;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Declared graph input or output: a value name and its per-sample dims.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValueSpec {
    pub name: String,
    pub dims: Vec<usize>,
}

impl ValueSpec {
    pub fn new(name: impl Into<String>, dims: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            dims,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvAttrs {
    pub kernel: [usize; 2],
    pub strides: [usize; 2],
    /// ONNX order: top, left, bottom, right.
    pub pads: [usize; 4],
    pub dilations: [usize; 2],
    pub group: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolAttrs {
    pub kernel: [usize; 2],
    pub strides: [usize; 2],
    pub pads: [usize; 4],
    /// Only meaningful for average pooling.
    pub count_include_pad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GemmAttrs {
    pub alpha: f32,
    pub beta: f32,
    pub trans_b: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Conv(ConvAttrs),
    Gemm(GemmAttrs),
    MatMul,
    BatchNorm { epsilon: f32 },
    Relu,
    MaxPool(PoolAttrs),
    AveragePool(PoolAttrs),
    GlobalAveragePool,
    Add,
    Concat { axis: i64 },
    Flatten { axis: i64 },
    Reshape,
    /// Unsupported op admitted through the exclusion list. Never executed,
    /// never rewritten; every channel touching it is pinned.
    Opaque {
        op_type: String,
        domain: String,
        attributes: Vec<onnx::proto::AttributeProto>,
    },
}

impl Op {
    pub fn op_type(&self) -> &str {
        match self {
            Op::Conv(_) => "Conv",
            Op::Gemm(_) => "Gemm",
            Op::MatMul => "MatMul",
            Op::BatchNorm { .. } => "BatchNormalization",
            Op::Relu => "Relu",
            Op::MaxPool(_) => "MaxPool",
            Op::AveragePool(_) => "AveragePool",
            Op::GlobalAveragePool => "GlobalAveragePool",
            Op::Add => "Add",
            Op::Concat { .. } => "Concat",
            Op::Flatten { .. } => "Flatten",
            Op::Reshape => "Reshape",
            Op::Opaque { op_type, .. } => op_type,
        }
    }

    /// Ops whose output channels are computed by their own filters.
    pub fn is_producer(&self) -> bool {
        matches!(self, Op::Conv(_) | Op::Gemm(_) | Op::MatMul)
    }

    pub fn is_opaque(&self) -> bool {
        matches!(self, Op::Opaque { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl Node {
    pub fn output(&self) -> &str {
        &self.outputs[0]
    }
}

/// How a constant operand of `Add` broadcasts against the activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasLayout {
    Scalar,
    /// One entry per channel, stored along `axis` of the constant tensor.
    PerChannel { axis: usize },
}

/// A producer→consumer link carrying one named value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub value: String,
}

#[derive(Debug, Clone)]
pub struct ModelGraph {
    name: String,
    source_hash: String,
    nodes: Vec<Node>,
    inputs: Vec<ValueSpec>,
    outputs: Vec<ValueSpec>,
    weights: BTreeMap<String, Tensor>,
    shape_consts: BTreeMap<String, Vec<i64>>,
    declared_shapes: BTreeMap<String, Vec<usize>>,
    value_dims: BTreeMap<String, Vec<usize>>,
    producer: HashMap<String, usize>,
}

/// Raw ingredients of a graph before validation.
#[derive(Debug, Clone, Default)]
pub struct GraphParts {
    pub name: String,
    pub source_hash: String,
    pub nodes: Vec<Node>,
    pub inputs: Vec<ValueSpec>,
    pub outputs: Vec<ValueSpec>,
    pub weights: BTreeMap<String, Tensor>,
    pub shape_consts: BTreeMap<String, Vec<i64>>,
    /// Shapes of values produced by opaque nodes (taken from ONNX value_info).
    pub declared_shapes: BTreeMap<String, Vec<usize>>,
}

impl ModelGraph {
    /// Validates the parts, orders nodes topologically and infers every shape.
    pub fn from_parts(parts: GraphParts) -> Result<Self> {
        let GraphParts {
            name,
            source_hash,
            nodes,
            inputs,
            outputs,
            weights,
            shape_consts,
            declared_shapes,
        } = parts;
        if nodes.is_empty() {
            return Err(Error::EmptyGraph);
        }
        if inputs.is_empty() {
            return Err(Error::InvalidGraph("graph declares no inputs".into()));
        }
        if outputs.is_empty() {
            return Err(Error::InvalidGraph("graph declares no outputs".into()));
        }

        let mut ids = BTreeSet::new();
        for n in &nodes {
            if n.id.is_empty() || !ids.insert(n.id.as_str()) {
                return Err(Error::InvalidGraph(format!("duplicate or empty node id `{}`", n.id)));
            }
            if n.outputs.is_empty() {
                return Err(Error::InvalidGraph(format!("node `{}` has no outputs", n.id)));
            }
        }

        let is_const = |v: &str| weights.contains_key(v) || shape_consts.contains_key(v);
        let mut produced_by: HashMap<String, usize> = HashMap::new();
        for input in &inputs {
            if is_const(&input.name) {
                return Err(Error::InvalidGraph(format!(
                    "graph input `{}` collides with a constant",
                    input.name
                )));
            }
        }
        for (i, n) in nodes.iter().enumerate() {
            for out in &n.outputs {
                if is_const(out) || inputs.iter().any(|s| &s.name == out) {
                    return Err(Error::InvalidGraph(format!(
                        "node `{}` overwrites value `{out}`",
                        n.id
                    )));
                }
                if produced_by.insert(out.clone(), i).is_some() {
                    return Err(Error::InvalidGraph(format!("value `{out}` produced twice")));
                }
            }
        }

        // Kahn's algorithm, stable with respect to the given order.
        let mut indegree = vec![0usize; nodes.len()];
        let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
        let mut const_users: HashMap<&str, &str> = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            for input in &n.inputs {
                if let Some(&p) = produced_by.get(input) {
                    indegree[i] += 1;
                    dependents[p].push(i);
                } else if is_const(input) {
                    if let Some(other) = const_users.insert(input, &n.id) {
                        if other != n.id {
                            return Err(Error::InvalidGraph(format!(
                                "initializer `{input}` is shared by `{other}` and `{}`",
                                n.id
                            )));
                        }
                    }
                } else if !inputs.iter().any(|s| &s.name == input) {
                    return Err(Error::InvalidGraph(format!(
                        "node `{}` reads undefined value `{input}`",
                        n.id
                    )));
                }
            }
        }
        let mut ready: BTreeSet<usize> = (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(nodes.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &d in &dependents[i] {
                indegree[d] -= 1;
                if indegree[d] == 0 {
                    ready.insert(d);
                }
            }
        }
        if order.len() != nodes.len() {
            return Err(Error::InvalidGraph("graph contains a cycle".into()));
        }
        let mut slots: Vec<Option<Node>> = nodes.into_iter().map(Some).collect();
        let nodes: Vec<Node> = order.iter().map(|&i| slots[i].take().unwrap()).collect();
        let producer: HashMap<String, usize> = nodes
            .iter()
            .enumerate()
            .flat_map(|(i, n)| n.outputs.iter().map(move |o| (o.clone(), i)))
            .collect();

        let mut graph = ModelGraph {
            name,
            source_hash,
            nodes,
            inputs,
            outputs,
            weights,
            shape_consts,
            declared_shapes,
            value_dims: BTreeMap::new(),
            producer,
        };
        graph.infer_shapes()?;
        Ok(graph)
    }

    pub fn into_parts(self) -> GraphParts {
        GraphParts {
            name: self.name,
            source_hash: self.source_hash,
            nodes: self.nodes,
            inputs: self.inputs,
            outputs: self.outputs,
            weights: self.weights,
            shape_consts: self.shape_consts,
            declared_shapes: self.declared_shapes,
        }
    }

    pub fn to_parts(&self) -> GraphParts {
        self.clone().into_parts()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// SHA-256 of the bytes this graph was loaded from; empty for built graphs.
    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn inputs(&self) -> &[ValueSpec] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[ValueSpec] {
        &self.outputs
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub fn weight(&self, name: &str) -> Option<&Tensor> {
        self.weights.get(name)
    }

    pub fn shape_consts(&self) -> &BTreeMap<String, Vec<i64>> {
        &self.shape_consts
    }

    pub fn declared_shapes(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.declared_shapes
    }

    pub fn is_constant(&self, value: &str) -> bool {
        self.weights.contains_key(value) || self.shape_consts.contains_key(value)
    }

    /// Per-sample dims of any activation value.
    pub fn value_dims(&self, value: &str) -> Option<&[usize]> {
        self.value_dims.get(value).map(Vec::as_slice)
    }

    pub fn producer_of(&self, value: &str) -> Option<&Node> {
        self.producer.get(value).map(|&i| &self.nodes[i])
    }

    pub fn consumers_of<'a>(&'a self, value: &'a str) -> impl Iterator<Item = &'a Node> + 'a {
        self.nodes
            .iter()
            .filter(move |n| n.inputs.iter().any(|i| i == value))
    }

    /// Names of the constants (weights and shape tensors) a node reads.
    pub fn weight_refs<'a>(&'a self, node: &'a Node) -> impl Iterator<Item = &'a str> + 'a {
        node.inputs
            .iter()
            .map(String::as_str)
            .filter(|i| self.is_constant(i))
    }

    /// Activation inputs of a node (constants excluded).
    pub fn activation_inputs<'a>(&'a self, node: &'a Node) -> impl Iterator<Item = &'a str> + 'a {
        node.inputs
            .iter()
            .map(String::as_str)
            .filter(|i| !self.is_constant(i))
    }

    pub fn edges(&self) -> Vec<Edge> {
        let mut edges = Vec::new();
        for n in &self.nodes {
            for input in &n.inputs {
                if let Some(p) = self.producer_of(input) {
                    edges.push(Edge {
                        from: p.id.clone(),
                        to: n.id.clone(),
                        value: input.clone(),
                    });
                }
            }
        }
        edges
    }

    /// Structural and bitwise equality, ignoring the source hash.
    pub fn same_as(&self, other: &ModelGraph) -> bool {
        self.name == other.name
            && self.nodes == other.nodes
            && self.inputs == other.inputs
            && self.outputs == other.outputs
            && self.shape_consts == other.shape_consts
            && self.declared_shapes == other.declared_shapes
            && self.weights.len() == other.weights.len()
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    /// Returns a copy with some weights replaced, re-validated.
    pub fn with_weights(&self, replaced: BTreeMap<String, Tensor>) -> Result<ModelGraph> {
        let mut parts = self.to_parts();
        for (k, v) in replaced {
            parts.weights.insert(k, v);
        }
        parts.source_hash.clear();
        ModelGraph::from_parts(parts)
    }

    /// Determines how a constant operand of `Add` broadcasts against `dims`.
    pub fn bias_layout(dims: &[usize], const_shape: &[usize]) -> Option<BiasLayout> {
        let numel: usize = const_shape.iter().product();
        if numel == 1 && const_shape.len() <= dims.len() + 1 {
            return Some(BiasLayout::Scalar);
        }
        let c = *dims.first()?;
        let rank = dims.len();
        // Accept [C, 1, .., 1] with or without a leading batch 1.
        let candidates: [(usize, usize); 2] = [(rank, 0), (rank + 1, 1)];
        for (len, axis) in candidates {
            if const_shape.len() == len
                && const_shape[axis] == c
                && const_shape[..axis].iter().all(|&d| d == 1)
                && const_shape[axis + 1..].iter().all(|&d| d == 1)
            {
                return Some(BiasLayout::PerChannel { axis });
            }
        }
        None
    }

    fn infer_shapes(&mut self) -> Result<()> {
        let mut dims: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for input in &self.inputs {
            dims.insert(input.name.clone(), input.dims.clone());
        }
        for node in &self.nodes {
            let out = self.infer_node(node, &dims)?;
            if out.len() != node.outputs.len() {
                return Err(Error::ShapeInference {
                    node: node.id.clone(),
                    reason: format!("expected {} outputs, op yields {}", node.outputs.len(), out.len()),
                });
            }
            for (name, d) in node.outputs.iter().zip(out) {
                if d.contains(&0) {
                    return Err(Error::ShapeInference {
                        node: node.id.clone(),
                        reason: format!("output `{name}` has an empty dimension {d:?}"),
                    });
                }
                dims.insert(name.clone(), d);
            }
        }
        for spec in &mut self.outputs {
            let inferred = dims.get(&spec.name).ok_or_else(|| {
                Error::InvalidGraph(format!("graph output `{}` is never produced", spec.name))
            })?;
            if !spec.dims.is_empty() && &spec.dims != inferred {
                let node = self
                    .producer
                    .get(&spec.name)
                    .map(|&i| self.nodes[i].id.clone())
                    .unwrap_or_else(|| spec.name.clone());
                return Err(Error::ShapeInference {
                    node,
                    reason: format!(
                        "declared output shape {:?} disagrees with inferred {:?}",
                        spec.dims, inferred
                    ),
                });
            }
            spec.dims = inferred.clone();
        }
        self.value_dims = dims;
        Ok(())
    }

    fn infer_node(&self, node: &Node, dims: &BTreeMap<String, Vec<usize>>) -> Result<Vec<Vec<usize>>> {
        let fail = |reason: String| Error::ShapeInference {
            node: node.id.clone(),
            reason,
        };
        let act = |i: usize| -> Result<&Vec<usize>> {
            let name = node
                .inputs
                .get(i)
                .ok_or_else(|| fail(format!("missing input #{i}")))?;
            if self.is_constant(name) {
                return Err(fail(format!("input #{i} `{name}` must be an activation")));
            }
            dims.get(name)
                .ok_or_else(|| fail(format!("input `{name}` has no known shape")))
        };
        let weight = |i: usize| -> Result<&Tensor> {
            let name = node
                .inputs
                .get(i)
                .ok_or_else(|| fail(format!("missing input #{i}")))?;
            self.weights
                .get(name)
                .ok_or_else(|| fail(format!("input #{i} `{name}` must be a float initializer")))
        };
        let arity = |lo: usize, hi: usize| -> Result<()> {
            if node.inputs.len() < lo || node.inputs.len() > hi {
                Err(fail(format!("expected {lo}..={hi} inputs, got {}", node.inputs.len())))
            } else {
                Ok(())
            }
        };

        let out = match &node.op {
            Op::Conv(a) => {
                arity(2, 3)?;
                let x = act(0)?;
                let w = weight(1)?;
                if x.len() != 3 {
                    return Err(fail(format!("conv input must be CHW, got {x:?}")));
                }
                let ws = w.shape();
                if ws.len() != 4 {
                    return Err(fail(format!("conv weight must be rank 4, got {ws:?}")));
                }
                if a.group == 0 || x[0] % a.group != 0 || ws[0] % a.group != 0 {
                    return Err(fail(format!("group {} does not divide channels", a.group)));
                }
                if ws[1] * a.group != x[0] {
                    return Err(fail(format!(
                        "weight expects {} input channels, input has {}",
                        ws[1] * a.group,
                        x[0]
                    )));
                }
                if [ws[2], ws[3]] != a.kernel {
                    return Err(fail(format!("kernel_shape {:?} disagrees with weight {ws:?}", a.kernel)));
                }
                if node.inputs.len() == 3 && weight(2)?.shape() != [ws[0]] {
                    return Err(fail("conv bias must have shape [out_channels]".into()));
                }
                let (h, w_) = conv_out_hw(x[1], x[2], a.kernel, a.strides, a.pads, a.dilations)
                    .ok_or_else(|| fail("kernel larger than padded input".into()))?;
                vec![vec![ws[0], h, w_]]
            }
            Op::Gemm(a) => {
                arity(2, 3)?;
                let x = act(0)?;
                let b = weight(1)?;
                if x.len() != 1 {
                    return Err(fail(format!("gemm input must be 2-D, got per-sample {x:?}")));
                }
                let bs = b.shape();
                if bs.len() != 2 {
                    return Err(fail("gemm weight must be rank 2".into()));
                }
                let (fan_in, out) = if a.trans_b { (bs[1], bs[0]) } else { (bs[0], bs[1]) };
                if fan_in != x[0] {
                    return Err(fail(format!("gemm expects {fan_in} features, input has {}", x[0])));
                }
                if node.inputs.len() == 3 {
                    let cs = weight(2)?.shape();
                    let ok = cs == [out] || cs == [1, out] || cs.iter().product::<usize>() == 1;
                    if !ok {
                        return Err(fail(format!("gemm bias shape {cs:?} is not broadcastable to [{out}]")));
                    }
                }
                vec![vec![out]]
            }
            Op::MatMul => {
                arity(2, 2)?;
                let x = act(0)?;
                let b = weight(1)?;
                if x.len() != 1 || b.shape().len() != 2 || b.shape()[0] != x[0] {
                    return Err(fail(format!(
                        "matmul supports [N,F] x [F,O] with a constant right operand, got {x:?} x {:?}",
                        b.shape()
                    )));
                }
                vec![vec![b.shape()[1]]]
            }
            Op::BatchNorm { .. } => {
                arity(5, 5)?;
                let x = act(0)?;
                let c = *x.first().ok_or_else(|| fail("rank-0 input".into()))?;
                for i in 1..5 {
                    if weight(i)?.shape() != [c] {
                        return Err(fail(format!("normalization vector #{i} must have length {c}")));
                    }
                }
                vec![x.clone()]
            }
            Op::Relu => {
                arity(1, 1)?;
                vec![act(0)?.clone()]
            }
            Op::MaxPool(a) | Op::AveragePool(a) => {
                arity(1, 1)?;
                let x = act(0)?;
                if x.len() != 3 {
                    return Err(fail(format!("pooling input must be CHW, got {x:?}")));
                }
                let (h, w) = conv_out_hw(x[1], x[2], a.kernel, a.strides, a.pads, [1, 1])
                    .ok_or_else(|| fail("pooling window larger than padded input".into()))?;
                vec![vec![x[0], h, w]]
            }
            Op::GlobalAveragePool => {
                arity(1, 1)?;
                let x = act(0)?;
                if x.len() != 3 {
                    return Err(fail(format!("global pooling input must be CHW, got {x:?}")));
                }
                vec![vec![x[0], 1, 1]]
            }
            Op::Add => {
                arity(2, 2)?;
                let a_const = self.is_constant(&node.inputs[0]);
                let b_const = self.is_constant(&node.inputs[1]);
                match (a_const, b_const) {
                    (false, false) => {
                        let (a, b) = (act(0)?, act(1)?);
                        if a != b {
                            return Err(fail(format!("element-wise add of mismatched shapes {a:?} and {b:?}")));
                        }
                        vec![a.clone()]
                    }
                    (true, true) => return Err(fail("add of two constants".into())),
                    _ => {
                        let (ai, ci) = if a_const { (1, 0) } else { (0, 1) };
                        let x = act(ai)?;
                        let c = weight(ci)?;
                        if Self::bias_layout(x, c.shape()).is_none() {
                            return Err(fail(format!(
                                "constant of shape {:?} is neither scalar nor per-channel for {x:?}",
                                c.shape()
                            )));
                        }
                        vec![x.clone()]
                    }
                }
            }
            Op::Concat { axis } => {
                if node.inputs.is_empty() {
                    return Err(fail("concat without inputs".into()));
                }
                let first = act(0)?.clone();
                let batched_rank = first.len() as i64 + 1;
                let norm = if *axis < 0 { axis + batched_rank } else { *axis };
                if norm != 1 {
                    return Err(fail(format!("only channel concatenation (axis 1) is supported, got {axis}")));
                }
                let mut out = first.clone();
                out[0] = 0;
                for i in 0..node.inputs.len() {
                    let d = act(i)?;
                    if d.len() != first.len() || d[1..] != first[1..] {
                        return Err(fail(format!("concat input {d:?} incompatible with {first:?}")));
                    }
                    out[0] += d[0];
                }
                vec![out]
            }
            Op::Flatten { axis } => {
                arity(1, 1)?;
                let x = act(0)?;
                if *axis != 1 {
                    return Err(fail(format!("only batch-preserving flatten (axis 1) is supported, got {axis}")));
                }
                vec![vec![x.iter().product()]]
            }
            Op::Reshape => {
                arity(2, 2)?;
                let x = act(0)?;
                let target = self
                    .shape_consts
                    .get(&node.inputs[1])
                    .ok_or_else(|| fail("reshape target must be an int64 initializer".into()))?;
                let numel: usize = x.iter().product();
                let ok = target.len() == 2
                    && (target[0] == 0 || target[0] == -1 || target[0] > 0)
                    && (target[1] == -1 || target[1] == numel as i64)
                    && !(target[0] == -1 && target[1] == -1);
                if !ok {
                    return Err(fail(format!(
                        "only batch-preserving flatten reshapes are supported, got target {target:?}"
                    )));
                }
                vec![vec![numel]]
            }
            Op::Opaque { .. } => node
                .outputs
                .iter()
                .map(|o| {
                    self.declared_shapes
                        .get(o)
                        .cloned()
                        .ok_or_else(|| fail(format!("opaque output `{o}` needs a declared shape")))
                })
                .collect::<Result<_>>()?,
        };
        Ok(out)
    }
}

/// Spatial output size of a windowed op; `None` when the window does not fit.
pub fn conv_out_hw(
    h: usize,
    w: usize,
    kernel: [usize; 2],
    strides: [usize; 2],
    pads: [usize; 4],
    dilations: [usize; 2],
) -> Option<(usize, usize)> {
    let one = |size: usize, k: usize, s: usize, p0: usize, p1: usize, d: usize| -> Option<usize> {
        let span = d * (k.checked_sub(1)?) + 1;
        let padded = size + p0 + p1;
        if s == 0 || padded < span {
            return None;
        }
        Some((padded - span) / s + 1)
    };
    Some((
        one(h, kernel[0], strides[0], pads[0], pads[2], dilations[0])?,
        one(w, kernel[1], strides[1], pads[1], pads[3], dilations[1])?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::builder::GraphBuilder;

    fn chain() -> GraphBuilder {
        let mut b = GraphBuilder::new("chain");
        let x = b.input("x", vec![2, 5, 5]);
        let c = b.conv("c1", &x, Tensor::zeros(vec![4, 2, 3, 3]), None, [1, 1], [1, 1, 1, 1], 1);
        let r = b.relu("r1", &c);
        b.output(&r);
        b
    }

    #[test]
    fn infers_conv_shapes() {
        let g = chain().build().unwrap();
        assert_eq!(g.value_dims("c1"), Some(&[4, 5, 5][..]));
        assert_eq!(g.outputs()[0].dims, vec![4, 5, 5]);
        assert_eq!(g.edges().len(), 1);
    }

    #[test]
    fn empty_graph_rejected() {
        let parts = GraphParts {
            inputs: vec![ValueSpec::new("x", vec![1])],
            outputs: vec![ValueSpec::new("x", vec![1])],
            ..Default::default()
        };
        assert!(matches!(ModelGraph::from_parts(parts), Err(Error::EmptyGraph)));
    }

    #[test]
    fn cycle_rejected() {
        let mut parts = chain().build().unwrap().into_parts();
        parts.nodes[0].inputs[0] = "r1".into();
        assert!(matches!(ModelGraph::from_parts(parts), Err(Error::InvalidGraph(_))));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut parts = chain().build().unwrap().into_parts();
        parts.weights.insert("c1.weight".into(), Tensor::zeros(vec![4, 3, 3, 3]));
        match ModelGraph::from_parts(parts) {
            Err(Error::ShapeInference { node, .. }) => assert_eq!(node, "c1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nodes_are_topologically_sorted() {
        let mut parts = chain().build().unwrap().into_parts();
        parts.nodes.reverse();
        let g = ModelGraph::from_parts(parts).unwrap();
        assert_eq!(g.nodes()[0].id, "c1");
    }

    #[test]
    fn bias_layouts() {
        assert_eq!(ModelGraph::bias_layout(&[4, 3, 3], &[4, 1, 1]), Some(BiasLayout::PerChannel { axis: 0 }));
        assert_eq!(ModelGraph::bias_layout(&[4, 3, 3], &[1, 4, 1, 1]), Some(BiasLayout::PerChannel { axis: 1 }));
        assert_eq!(ModelGraph::bias_layout(&[6], &[6]), Some(BiasLayout::PerChannel { axis: 0 }));
        assert_eq!(ModelGraph::bias_layout(&[6], &[1]), Some(BiasLayout::Scalar));
        assert_eq!(ModelGraph::bias_layout(&[4, 3, 3], &[3]), None);
    }
}
