//! ONNX import/export for the supported op subset.

use std::collections::{BTreeMap, BTreeSet};

use prost::Message;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{ConvAttrs, GemmAttrs, GraphParts, ModelGraph, Node, Op, PoolAttrs, ValueSpec};
use crate::tensor::Tensor;

/// Opset written by [`export_model`].
pub const EXPORT_OPSET: i64 = 13;
/// Default-domain opsets accepted by [`load_model`].
pub const SUPPORTED_OPSETS: std::ops::RangeInclusive<i64> = 7..=21;
const EXPORT_IR_VERSION: i64 = 7;
const BATCH_DIM: &str = "N";

/// Hand-written subset of the ONNX protobuf schema. Field numbers follow
/// `onnx.proto`; unknown fields are skipped on decode.
pub mod proto {
    #[derive(Clone, PartialEq, prost::Message)]
    pub struct ModelProto {
        #[prost(int64, tag = "1")]
        pub ir_version: i64,
        #[prost(string, tag = "2")]
        pub producer_name: String,
        #[prost(string, tag = "3")]
        pub producer_version: String,
        #[prost(string, tag = "4")]
        pub domain: String,
        #[prost(int64, tag = "5")]
        pub model_version: i64,
        #[prost(string, tag = "6")]
        pub doc_string: String,
        #[prost(message, optional, tag = "7")]
        pub graph: Option<GraphProto>,
        #[prost(message, repeated, tag = "8")]
        pub opset_import: Vec<OperatorSetIdProto>,
    }

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct OperatorSetIdProto {
        #[prost(string, tag = "1")]
        pub domain: String,
        #[prost(int64, tag = "2")]
        pub version: i64,
    }

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct GraphProto {
        #[prost(message, repeated, tag = "1")]
        pub node: Vec<NodeProto>,
        #[prost(string, tag = "2")]
        pub name: String,
        #[prost(message, repeated, tag = "5")]
        pub initializer: Vec<TensorProto>,
        #[prost(string, tag = "10")]
        pub doc_string: String,
        #[prost(message, repeated, tag = "11")]
        pub input: Vec<ValueInfoProto>,
        #[prost(message, repeated, tag = "12")]
        pub output: Vec<ValueInfoProto>,
        #[prost(message, repeated, tag = "13")]
        pub value_info: Vec<ValueInfoProto>,
    }

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct NodeProto {
        #[prost(string, repeated, tag = "1")]
        pub input: Vec<String>,
        #[prost(string, repeated, tag = "2")]
        pub output: Vec<String>,
        #[prost(string, tag = "3")]
        pub name: String,
        #[prost(string, tag = "4")]
        pub op_type: String,
        #[prost(message, repeated, tag = "5")]
        pub attribute: Vec<AttributeProto>,
        #[prost(string, tag = "6")]
        pub doc_string: String,
        #[prost(string, tag = "7")]
        pub domain: String,
    }

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct AttributeProto {
        #[prost(string, tag = "1")]
        pub name: String,
        #[prost(float, tag = "2")]
        pub f: f32,
        #[prost(int64, tag = "3")]
        pub i: i64,
        #[prost(bytes = "vec", tag = "4")]
        pub s: Vec<u8>,
        #[prost(message, optional, tag = "5")]
        pub t: Option<TensorProto>,
        #[prost(float, repeated, tag = "7")]
        pub floats: Vec<f32>,
        #[prost(int64, repeated, tag = "8")]
        pub ints: Vec<i64>,
        #[prost(bytes = "vec", repeated, tag = "9")]
        pub strings: Vec<Vec<u8>>,
        #[prost(int32, tag = "20")]
        pub r#type: i32,
    }

    pub mod attribute_type {
        pub const FLOAT: i32 = 1;
        pub const INT: i32 = 2;
        pub const INTS: i32 = 7;
    }

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct TensorProto {
        #[prost(int64, repeated, tag = "1")]
        pub dims: Vec<i64>,
        #[prost(int32, tag = "2")]
        pub data_type: i32,
        #[prost(float, repeated, tag = "4")]
        pub float_data: Vec<f32>,
        #[prost(int64, repeated, tag = "7")]
        pub int64_data: Vec<i64>,
        #[prost(string, tag = "8")]
        pub name: String,
        #[prost(bytes = "vec", tag = "9")]
        pub raw_data: Vec<u8>,
        #[prost(int32, tag = "14")]
        pub data_location: i32,
    }

    pub mod data_type {
        pub const FLOAT: i32 = 1;
        pub const INT64: i32 = 7;
    }

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct ValueInfoProto {
        #[prost(string, tag = "1")]
        pub name: String,
        #[prost(message, optional, tag = "2")]
        pub r#type: Option<TypeProto>,
    }

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct TypeProto {
        #[prost(message, optional, tag = "1")]
        pub tensor_type: Option<TypeProtoTensor>,
    }

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct TypeProtoTensor {
        #[prost(int32, tag = "1")]
        pub elem_type: i32,
        #[prost(message, optional, tag = "2")]
        pub shape: Option<TensorShapeProto>,
    }

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct TensorShapeProto {
        #[prost(message, repeated, tag = "1")]
        pub dim: Vec<Dimension>,
    }

    #[derive(Clone, PartialEq, prost::Message)]
    pub struct Dimension {
        #[prost(int64, optional, tag = "1")]
        pub dim_value: Option<i64>,
        #[prost(string, optional, tag = "2")]
        pub dim_param: Option<String>,
    }
}

use proto::{attribute_type, data_type, AttributeProto, NodeProto, TensorProto, ValueInfoProto};

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Node ids or op types admitted as opaque when the op is unsupported.
    pub exclusions: Vec<String>,
}

impl LoadOptions {
    pub fn with_exclusions(exclusions: &[impl AsRef<str>]) -> Self {
        Self {
            exclusions: exclusions.iter().map(|s| s.as_ref().to_string()).collect(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn load_model(bytes: &[u8], options: &LoadOptions) -> Result<ModelGraph> {
    let model = proto::ModelProto::decode(bytes).map_err(|e| Error::Malformed(format!("protobuf decode failed: {e}")))?;
    let opset = model
        .opset_import
        .iter()
        .find(|o| o.domain.is_empty() || o.domain == "ai.onnx")
        .map(|o| o.version)
        .ok_or_else(|| Error::Malformed("model does not import the default ONNX opset".into()))?;
    if !SUPPORTED_OPSETS.contains(&opset) {
        return Err(Error::Malformed(format!(
            "opset {opset} outside the supported range {}..={}",
            SUPPORTED_OPSETS.start(),
            SUPPORTED_OPSETS.end()
        )));
    }
    let graph = model.graph.ok_or_else(|| Error::Malformed("model has no graph".into()))?;

    let mut weights = BTreeMap::new();
    let mut shape_consts = BTreeMap::new();
    for init in &graph.initializer {
        if init.name.is_empty() {
            return Err(Error::Malformed("initializer without a name".into()));
        }
        if init.data_location != 0 {
            return Err(Error::Malformed(format!("initializer `{}` uses external data", init.name)));
        }
        let dims = init
            .dims
            .iter()
            .map(|&d| usize::try_from(d).map_err(|_| Error::Malformed(format!("initializer `{}` has negative dim", init.name))))
            .collect::<Result<Vec<_>>>()?;
        let duplicate = match init.data_type {
            data_type::FLOAT => weights.insert(init.name.clone(), decode_float(init, dims)?).is_some(),
            data_type::INT64 => shape_consts.insert(init.name.clone(), decode_int64(init, &dims)?).is_some(),
            other => {
                return Err(Error::Malformed(format!(
                    "initializer `{}` has unsupported data type {other}",
                    init.name
                )))
            }
        };
        if duplicate {
            return Err(Error::Malformed(format!("initializer `{}` declared twice", init.name)));
        }
    }

    let is_init = |n: &str| weights.contains_key(n) || shape_consts.contains_key(n);
    let inputs = graph
        .input
        .iter()
        .filter(|v| !is_init(&v.name))
        .map(|v| {
            let dims = value_dims(v)?.ok_or_else(|| Error::Malformed(format!("graph input `{}` has no static shape", v.name)))?;
            Ok(ValueSpec::new(&v.name, dims))
        })
        .collect::<Result<Vec<_>>>()?;
    let outputs = graph
        .output
        .iter()
        .map(|v| Ok(ValueSpec::new(&v.name, value_dims(v)?.unwrap_or_default())))
        .collect::<Result<Vec<_>>>()?;
    let mut known_shapes = BTreeMap::new();
    for v in graph.value_info.iter().chain(&graph.output) {
        if let Some(d) = value_dims(v)? {
            known_shapes.insert(v.name.clone(), d);
        }
    }

    let mut nodes = Vec::with_capacity(graph.node.len());
    let mut declared_shapes = BTreeMap::new();
    for (index, n) in graph.node.iter().enumerate() {
        let id = if n.name.is_empty() {
            format!("{}_{index}", n.op_type)
        } else {
            n.name.clone()
        };
        let mut op = parse_op(&id, n, options)?;
        if let Op::Conv(c) = &mut op {
            // kernel_shape is optional in ONNX; it is implied by the weight.
            if c.kernel == [0, 0] {
                if let Some(w) = n.input.get(1).and_then(|w| weights.get(w)).filter(|w| w.shape().len() == 4) {
                    c.kernel = [w.shape()[2], w.shape()[3]];
                }
            }
        }
        if op.is_opaque() {
            for o in &n.output {
                if let Some(d) = known_shapes.get(o) {
                    declared_shapes.insert(o.clone(), d.clone());
                }
            }
        }
        nodes.push(Node {
            id,
            op,
            inputs: n.input.clone(),
            outputs: n.output.clone(),
        });
    }

    ModelGraph::from_parts(GraphParts {
        name: graph.name,
        source_hash: sha256_hex(bytes),
        nodes,
        inputs,
        outputs,
        weights,
        shape_consts,
        declared_shapes,
    })
}

fn decode_float(init: &TensorProto, dims: Vec<usize>) -> Result<Tensor> {
    if !init.raw_data.is_empty() {
        Tensor::from_le_bytes(dims, &init.raw_data)
    } else {
        Tensor::new(dims, init.float_data.clone()).map_err(|e| Error::Malformed(format!("initializer `{}`: {e}", init.name)))
    }
}

fn decode_int64(init: &TensorProto, dims: &[usize]) -> Result<Vec<i64>> {
    let values: Vec<i64> = if !init.raw_data.is_empty() {
        if !init.raw_data.len().is_multiple_of(8) {
            return Err(Error::Malformed(format!("initializer `{}` has truncated int64 data", init.name)));
        }
        init.raw_data
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect()
    } else {
        init.int64_data.clone()
    };
    if values.len() != dims.iter().product::<usize>() {
        return Err(Error::Malformed(format!("initializer `{}` has {} values for dims {dims:?}", init.name, values.len())));
    }
    Ok(values)
}

/// Per-sample dims of a declared value (batch dim stripped), if fully static.
fn value_dims(v: &ValueInfoProto) -> Result<Option<Vec<usize>>> {
    let Some(shape) = v.r#type.as_ref().and_then(|t| t.tensor_type.as_ref()).and_then(|t| t.shape.as_ref()) else {
        return Ok(None);
    };
    if shape.dim.len() < 2 {
        return Err(Error::Malformed(format!("value `{}` must be batched with rank >= 2", v.name)));
    }
    let mut dims = Vec::with_capacity(shape.dim.len() - 1);
    for d in &shape.dim[1..] {
        match d.dim_value {
            Some(x) if x > 0 => dims.push(x as usize),
            _ => return Ok(None),
        }
    }
    Ok(Some(dims))
}

struct Attrs<'a> {
    node: &'a str,
    map: BTreeMap<&'a str, &'a AttributeProto>,
}

impl<'a> Attrs<'a> {
    fn new(node: &'a str, n: &'a NodeProto) -> Self {
        Self {
            node,
            map: n.attribute.iter().map(|a| (a.name.as_str(), a)).collect(),
        }
    }

    fn bad(&self, reason: String) -> Error {
        Error::Malformed(format!("node `{}`: {reason}", self.node))
    }

    fn int(&self, name: &str, default: i64) -> i64 {
        self.map.get(name).map_or(default, |a| a.i)
    }

    fn float(&self, name: &str, default: f32) -> f32 {
        self.map.get(name).map_or(default, |a| a.f)
    }

    fn ints(&self, name: &str) -> Option<&'a [i64]> {
        self.map.get(name).map(|a| a.ints.as_slice())
    }

    fn string(&self, name: &str) -> Option<String> {
        self.map.get(name).map(|a| String::from_utf8_lossy(&a.s).into_owned())
    }

    fn pair(&self, name: &str, default: usize) -> Result<[usize; 2]> {
        match self.ints(name) {
            None => Ok([default; 2]),
            Some([a, b]) if *a > 0 && *b > 0 => Ok([*a as usize, *b as usize]),
            Some(v) => Err(self.bad(format!("`{name}` must be two positive ints, got {v:?}"))),
        }
    }

    fn pads(&self) -> Result<[usize; 4]> {
        match self.string("auto_pad").as_deref() {
            None | Some("NOTSET") | Some("VALID") | Some("") => {}
            Some(other) => return Err(self.bad(format!("auto_pad `{other}` is not supported"))),
        }
        match self.ints("pads") {
            None => Ok([0; 4]),
            Some(p) if p.len() == 4 && p.iter().all(|&x| x >= 0) => Ok([p[0] as usize, p[1] as usize, p[2] as usize, p[3] as usize]),
            Some(p) => Err(self.bad(format!("`pads` must be four non-negative ints, got {p:?}"))),
        }
    }

    fn require_zero(&self, name: &str) -> Result<()> {
        if self.int(name, 0) != 0 {
            return Err(self.bad(format!("attribute `{name}` must be 0")));
        }
        Ok(())
    }

    fn pool(&self) -> Result<PoolAttrs> {
        let kernel = match self.ints("kernel_shape") {
            Some(_) => self.pair("kernel_shape", 1)?,
            None => return Err(self.bad("pooling needs `kernel_shape`".into())),
        };
        self.require_zero("ceil_mode")?;
        self.require_zero("storage_order")?;
        if self.pair("dilations", 1)? != [1, 1] {
            return Err(self.bad("dilated pooling is not supported".into()));
        }
        Ok(PoolAttrs {
            kernel,
            strides: self.pair("strides", 1)?,
            pads: self.pads()?,
            count_include_pad: self.int("count_include_pad", 0) != 0,
        })
    }
}

fn parse_op(id: &str, n: &NodeProto, options: &LoadOptions) -> Result<Op> {
    let a = Attrs::new(id, n);
    let default_domain = n.domain.is_empty() || n.domain == "ai.onnx";
    let single_output = || -> Result<()> {
        if n.output.len() != 1 {
            return Err(a.bad(format!("expected exactly one output, got {}", n.output.len())));
        }
        Ok(())
    };
    let op = match (default_domain, n.op_type.as_str()) {
        (true, "Conv") => {
            let kernel = match a.ints("kernel_shape") {
                Some(_) => a.pair("kernel_shape", 1)?,
                None => [0, 0],
            };
            let group = a.int("group", 1);
            if group < 1 {
                return Err(a.bad("`group` must be positive".into()));
            }
            Op::Conv(ConvAttrs {
                kernel,
                strides: a.pair("strides", 1)?,
                pads: a.pads()?,
                dilations: a.pair("dilations", 1)?,
                group: group as usize,
            })
        }
        (true, "Gemm") => {
            a.require_zero("transA")?;
            Op::Gemm(GemmAttrs {
                alpha: a.float("alpha", 1.0),
                beta: a.float("beta", 1.0),
                trans_b: a.int("transB", 0) != 0,
            })
        }
        (true, "MatMul") => Op::MatMul,
        (true, "BatchNormalization") => {
            a.require_zero("training_mode")?;
            Op::BatchNorm {
                epsilon: a.float("epsilon", 1e-5),
            }
        }
        (true, "Relu") => Op::Relu,
        (true, "MaxPool") => Op::MaxPool(a.pool()?),
        (true, "AveragePool") => Op::AveragePool(a.pool()?),
        (true, "GlobalAveragePool") => Op::GlobalAveragePool,
        (true, "Add") => Op::Add,
        (true, "Concat") => Op::Concat {
            axis: a.map.get("axis").map(|x| x.i).ok_or_else(|| a.bad("concat needs `axis`".into()))?,
        },
        (true, "Flatten") => Op::Flatten { axis: a.int("axis", 1) },
        (true, "Reshape") => {
            a.require_zero("allowzero")?;
            Op::Reshape
        }
        _ => {
            let admitted = options.exclusions.iter().any(|e| e == id || e == &n.op_type);
            if !admitted {
                return Err(Error::UnsupportedOp {
                    node: id.to_string(),
                    op: n.op_type.clone(),
                });
            }
            return Ok(Op::Opaque {
                op_type: n.op_type.clone(),
                domain: n.domain.clone(),
                attributes: n.attribute.clone(),
            });
        }
    };
    single_output()?;
    Ok(op)
}

fn attr_int(name: &str, i: i64) -> AttributeProto {
    AttributeProto {
        name: name.into(),
        i,
        r#type: attribute_type::INT,
        ..Default::default()
    }
}

fn attr_float(name: &str, f: f32) -> AttributeProto {
    AttributeProto {
        name: name.into(),
        f,
        r#type: attribute_type::FLOAT,
        ..Default::default()
    }
}

fn attr_ints(name: &str, ints: &[usize]) -> AttributeProto {
    AttributeProto {
        name: name.into(),
        ints: ints.iter().map(|&x| x as i64).collect(),
        r#type: attribute_type::INTS,
        ..Default::default()
    }
}

fn op_attributes(op: &Op) -> Vec<AttributeProto> {
    let pool = |p: &PoolAttrs, avg: bool| {
        let mut v = vec![attr_ints("kernel_shape", &p.kernel), attr_ints("pads", &p.pads), attr_ints("strides", &p.strides)];
        if avg {
            v.insert(0, attr_int("count_include_pad", i64::from(p.count_include_pad)));
        }
        v
    };
    match op {
        Op::Conv(c) => vec![
            attr_ints("dilations", &c.dilations),
            attr_int("group", c.group as i64),
            attr_ints("kernel_shape", &c.kernel),
            attr_ints("pads", &c.pads),
            attr_ints("strides", &c.strides),
        ],
        Op::Gemm(g) => vec![attr_float("alpha", g.alpha), attr_float("beta", g.beta), attr_int("transB", i64::from(g.trans_b))],
        Op::BatchNorm { epsilon } => vec![attr_float("epsilon", *epsilon)],
        Op::MaxPool(p) => pool(p, false),
        Op::AveragePool(p) => pool(p, true),
        Op::Concat { axis } => vec![attr_int("axis", *axis)],
        Op::Flatten { axis } => vec![attr_int("axis", *axis)],
        Op::Opaque { attributes, .. } => attributes.clone(),
        Op::MatMul | Op::Relu | Op::GlobalAveragePool | Op::Add | Op::Reshape => Vec::new(),
    }
}

fn value_info(name: &str, dims: &[usize]) -> ValueInfoProto {
    let mut dim = vec![proto::Dimension {
        dim_value: None,
        dim_param: Some(BATCH_DIM.into()),
    }];
    dim.extend(dims.iter().map(|&d| proto::Dimension {
        dim_value: Some(d as i64),
        dim_param: None,
    }));
    ValueInfoProto {
        name: name.into(),
        r#type: Some(proto::TypeProto {
            tensor_type: Some(proto::TypeProtoTensor {
                elem_type: data_type::FLOAT,
                shape: Some(proto::TensorShapeProto { dim }),
            }),
        }),
    }
}

/// Serializes a graph deterministically: nodes in topological order,
/// initializers sorted by name, floats stored as raw little-endian bytes.
pub fn export_model(g: &ModelGraph) -> Vec<u8> {
    let mut initializer: Vec<TensorProto> = g
        .weights()
        .iter()
        .map(|(name, t)| TensorProto {
            dims: t.shape().iter().map(|&d| d as i64).collect(),
            data_type: data_type::FLOAT,
            name: name.clone(),
            raw_data: t.to_le_bytes(),
            ..Default::default()
        })
        .collect();
    initializer.extend(g.shape_consts().iter().map(|(name, v)| TensorProto {
        dims: vec![v.len() as i64],
        data_type: data_type::INT64,
        name: name.clone(),
        raw_data: v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        ..Default::default()
    }));
    initializer.sort_by(|a, b| a.name.cmp(&b.name));

    let node = g
        .nodes()
        .iter()
        .map(|n| {
            let domain = match &n.op {
                Op::Opaque { domain, .. } => domain.clone(),
                _ => String::new(),
            };
            NodeProto {
                input: n.inputs.clone(),
                output: n.outputs.clone(),
                name: n.id.clone(),
                op_type: n.op.op_type().to_string(),
                attribute: op_attributes(&n.op),
                domain,
                ..Default::default()
            }
        })
        .collect();

    let mut opset_import = vec![proto::OperatorSetIdProto {
        domain: String::new(),
        version: EXPORT_OPSET,
    }];
    let custom: BTreeSet<&str> = g
        .nodes()
        .iter()
        .filter_map(|n| match &n.op {
            Op::Opaque { domain, .. } if !domain.is_empty() && domain != "ai.onnx" => Some(domain.as_str()),
            _ => None,
        })
        .collect();
    opset_import.extend(custom.into_iter().map(|d| proto::OperatorSetIdProto {
        domain: d.into(),
        version: 1,
    }));

    let model = proto::ModelProto {
        ir_version: EXPORT_IR_VERSION,
        producer_name: "gcprune".into(),
        producer_version: env!("CARGO_PKG_VERSION").into(),
        graph: Some(proto::GraphProto {
            node,
            name: g.name().to_string(),
            initializer,
            input: g.inputs().iter().map(|s| value_info(&s.name, &s.dims)).collect(),
            output: g.outputs().iter().map(|s| value_info(&s.name, &s.dims)).collect(),
            value_info: g.declared_shapes().iter().map(|(n, d)| value_info(n, d)).collect(),
            ..Default::default()
        }),
        opset_import,
        ..Default::default()
    };
    model.encode_to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::builder::GraphBuilder;

    fn small() -> ModelGraph {
        let mut b = GraphBuilder::new("small");
        let x = b.input("x", vec![2, 4, 4]);
        let c = b.conv("c1", &x, Tensor::from_fn(vec![3, 2, 3, 3], |i| i as f32 * 0.01), Some(Tensor::zeros(vec![3])), [1, 1], [1, 1, 1, 1], 1);
        let r = b.relu("r1", &c);
        let f = b.reshape_flatten("flat", &r);
        let y = b.gemm("fc", &f, Tensor::from_fn(vec![2, 48], |i| (i as f32).sin()), None);
        b.output(&y);
        b.build().unwrap()
    }

    #[test]
    fn round_trip_is_isomorphic_and_deterministic() {
        let g = small();
        let bytes = export_model(&g);
        assert_eq!(bytes, export_model(&g));
        let back = load_model(&bytes, &LoadOptions::default()).unwrap();
        assert!(back.same_as(&g));
        assert_eq!(back.source_hash(), sha256_hex(&bytes));
        assert_eq!(export_model(&back), bytes);
    }

    #[test]
    fn garbage_is_malformed() {
        assert!(matches!(load_model(&[0xff, 0xff, 0xff], &LoadOptions::default()), Err(Error::Malformed(_))));
    }

    fn with_unknown_op() -> Vec<u8> {
        let mut model = proto::ModelProto::decode(export_model(&small()).as_slice()).unwrap();
        let graph = model.graph.as_mut().unwrap();
        graph.node[1].op_type = "Swish".into();
        graph.value_info.push(value_info("r1", &[3, 4, 4]));
        model.encode_to_vec()
    }

    #[test]
    fn unknown_op_rejected_unless_excluded() {
        let bytes = with_unknown_op();
        match load_model(&bytes, &LoadOptions::default()) {
            Err(Error::UnsupportedOp { node, op }) => {
                assert_eq!(node, "r1");
                assert_eq!(op, "Swish");
            }
            other => panic!("unexpected {other:?}"),
        }
        let g = load_model(&bytes, &LoadOptions::with_exclusions(&["r1"])).unwrap();
        assert!(g.node("r1").unwrap().op.is_opaque());
        let again = load_model(&export_model(&g), &LoadOptions::with_exclusions(&["Swish"])).unwrap();
        assert!(again.same_as(&g));
    }

    #[test]
    fn empty_graph_rejected() {
        let mut model = proto::ModelProto::decode(export_model(&small()).as_slice()).unwrap();
        model.graph.as_mut().unwrap().node.clear();
        assert!(matches!(load_model(&model.encode_to_vec(), &LoadOptions::default()), Err(Error::EmptyGraph)));
    }

    #[test]
    fn old_opset_rejected() {
        let mut model = proto::ModelProto::decode(export_model(&small()).as_slice()).unwrap();
        model.opset_import[0].version = 6;
        assert!(matches!(load_model(&model.encode_to_vec(), &LoadOptions::default()), Err(Error::Malformed(_))));
    }

    #[test]
    fn float_data_field_accepted() {
        let mut model = proto::ModelProto::decode(export_model(&small()).as_slice()).unwrap();
        for init in &mut model.graph.as_mut().unwrap().initializer {
            if init.data_type == data_type::FLOAT {
                init.float_data = Tensor::from_le_bytes(vec![init.raw_data.len() / 4], &init.raw_data).unwrap().into_data();
                init.raw_data.clear();
            }
        }
        let g = load_model(&model.encode_to_vec(), &LoadOptions::default()).unwrap();
        assert!(g.same_as(&small()));
    }
}
