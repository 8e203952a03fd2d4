//! Programmatic graph construction. Each node's single output value is named
//! after the node id, and its weights are named `{id}.weight`, `{id}.bias`,
//! `{id}.running_mean`, `{id}.running_var`.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::graph::{ConvAttrs, GemmAttrs, GraphParts, ModelGraph, Node, Op, PoolAttrs, ValueSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GraphBuilder {
    parts: GraphParts,
}

impl GraphBuilder {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            parts: GraphParts {
                name: name.into(),
                ..Default::default()
            },
        }
    }

    pub fn input(&mut self, name: &str, dims: Vec<usize>) -> String {
        self.parts.inputs.push(ValueSpec::new(name, dims));
        name.to_string()
    }

    /// Marks a value as a graph output; its shape is inferred at build time.
    pub fn output(&mut self, value: &str) {
        self.parts.outputs.push(ValueSpec::new(value, Vec::new()));
    }

    fn weight(&mut self, id: &str, suffix: &str, t: Tensor) -> String {
        let name = format!("{id}.{suffix}");
        self.parts.weights.insert(name.clone(), t);
        name
    }

    fn push(&mut self, id: &str, op: Op, inputs: Vec<String>) -> String {
        self.parts.nodes.push(Node {
            id: id.to_string(),
            op,
            inputs,
            outputs: vec![id.to_string()],
        });
        id.to_string()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        id: &str,
        x: &str,
        weight: Tensor,
        bias: Option<Tensor>,
        strides: [usize; 2],
        pads: [usize; 4],
        group: usize,
    ) -> String {
        let kernel = [weight.shape()[2], weight.shape()[3]];
        let attrs = ConvAttrs {
            kernel,
            strides,
            pads,
            dilations: [1, 1],
            group,
        };
        self.conv_with(id, x, weight, bias, attrs)
    }

    pub fn conv_with(&mut self, id: &str, x: &str, weight: Tensor, bias: Option<Tensor>, attrs: ConvAttrs) -> String {
        let mut inputs = vec![x.to_string(), self.weight(id, "weight", weight)];
        if let Some(b) = bias {
            inputs.push(self.weight(id, "bias", b));
        }
        self.push(id, Op::Conv(attrs), inputs)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(&mut self, id: &str, x: &str, scale: Tensor, shift: Tensor, mean: Tensor, var: Tensor, epsilon: f32) -> String {
        let inputs = vec![
            x.to_string(),
            self.weight(id, "weight", scale),
            self.weight(id, "bias", shift),
            self.weight(id, "running_mean", mean),
            self.weight(id, "running_var", var),
        ];
        self.push(id, Op::BatchNorm { epsilon }, inputs)
    }

    pub fn relu(&mut self, id: &str, x: &str) -> String {
        self.push(id, Op::Relu, vec![x.to_string()])
    }

    pub fn max_pool(&mut self, id: &str, x: &str, kernel: [usize; 2], strides: [usize; 2], pads: [usize; 4]) -> String {
        let attrs = PoolAttrs {
            kernel,
            strides,
            pads,
            count_include_pad: false,
        };
        self.push(id, Op::MaxPool(attrs), vec![x.to_string()])
    }

    pub fn avg_pool(&mut self, id: &str, x: &str, kernel: [usize; 2], strides: [usize; 2], pads: [usize; 4]) -> String {
        let attrs = PoolAttrs {
            kernel,
            strides,
            pads,
            count_include_pad: false,
        };
        self.push(id, Op::AveragePool(attrs), vec![x.to_string()])
    }

    pub fn global_avg_pool(&mut self, id: &str, x: &str) -> String {
        self.push(id, Op::GlobalAveragePool, vec![x.to_string()])
    }

    pub fn add(&mut self, id: &str, a: &str, b: &str) -> String {
        self.push(id, Op::Add, vec![a.to_string(), b.to_string()])
    }

    /// Adds a constant (scalar or per-channel) to an activation.
    pub fn add_const(&mut self, id: &str, x: &str, c: Tensor) -> String {
        let c = self.weight(id, "bias", c);
        self.push(id, Op::Add, vec![x.to_string(), c])
    }

    pub fn concat(&mut self, id: &str, xs: &[&str]) -> String {
        self.push(id, Op::Concat { axis: 1 }, xs.iter().map(|s| s.to_string()).collect())
    }

    pub fn flatten(&mut self, id: &str, x: &str) -> String {
        self.push(id, Op::Flatten { axis: 1 }, vec![x.to_string()])
    }

    /// Batch-preserving flatten expressed as `Reshape(x, [0, -1])`.
    pub fn reshape_flatten(&mut self, id: &str, x: &str) -> String {
        let name = format!("{id}.shape");
        self.parts.shape_consts.insert(name.clone(), vec![0, -1]);
        self.push(id, Op::Reshape, vec![x.to_string(), name])
    }

    /// Dense layer with ONNX `transB=1`, i.e. weight laid out `[out, in]`.
    pub fn gemm(&mut self, id: &str, x: &str, weight: Tensor, bias: Option<Tensor>) -> String {
        let mut inputs = vec![x.to_string(), self.weight(id, "weight", weight)];
        if let Some(b) = bias {
            inputs.push(self.weight(id, "bias", b));
        }
        let attrs = GemmAttrs {
            alpha: 1.0,
            beta: 1.0,
            trans_b: true,
        };
        self.push(id, Op::Gemm(attrs), inputs)
    }

    /// `x @ weight` with weight laid out `[in, out]`.
    pub fn matmul(&mut self, id: &str, x: &str, weight: Tensor) -> String {
        let w = self.weight(id, "weight", weight);
        self.push(id, Op::MatMul, vec![x.to_string(), w])
    }

    /// Node the engine does not understand; admitted only through exclusions.
    pub fn opaque(&mut self, id: &str, op_type: &str, inputs: &[&str], out_dims: Vec<usize>) -> String {
        self.parts.declared_shapes.insert(id.to_string(), out_dims);
        let op = Op::Opaque {
            op_type: op_type.to_string(),
            domain: String::new(),
            attributes: Vec::new(),
        };
        self.push(id, op, inputs.iter().map(|s| s.to_string()).collect())
    }

    pub fn weights_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.parts.weights
    }

    pub fn build(self) -> Result<ModelGraph> {
        ModelGraph::from_parts(self.parts)
    }
}
