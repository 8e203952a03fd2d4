//! Reference float32 executor with channel-mask overlays.
//!
//! Values are stored batched (`[N, ...per-sample dims]`); every node is
//! evaluated independently per sample, so results do not depend on how rayon
//! schedules the work.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::groups::{ChannelAnalysis, GroupId};
use crate::graph::{conv_out_hw, BiasLayout, ConvAttrs, GemmAttrs, ModelGraph, Node, Op, PoolAttrs};
use crate::tensor::Tensor;

/// Per-sample element ranges to zero, per value. Applied right after a value
/// is produced.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChannelMask {
    groups: BTreeSet<GroupId>,
    ranges: BTreeMap<String, Vec<(usize, usize)>>,
}

impl ChannelMask {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Zeroes every position where the given groups appear. Pinned groups are
    /// accepted; masking never enforces pruning constraints.
    pub fn from_groups(g: &ModelGraph, analysis: &ChannelAnalysis, groups: &BTreeSet<GroupId>) -> Result<Self> {
        let mut ranges: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
        for &id in groups {
            analysis.group(id)?;
            for z in analysis.zero_points(id) {
                let dims = g
                    .value_dims(&z.value)
                    .ok_or_else(|| Error::InputMismatch(format!("analysis refers to unknown value `{}`", z.value)))?;
                let inner: usize = dims[1..].iter().product();
                ranges.entry(z.value.clone()).or_default().push((z.start * inner, z.width * inner));
            }
        }
        Ok(Self {
            groups: groups.clone(),
            ranges,
        })
    }

    pub fn groups(&self) -> &BTreeSet<GroupId> {
        &self.groups
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    fn ranges(&self, value: &str) -> &[(usize, usize)] {
        self.ranges.get(value).map_or(&[], Vec::as_slice)
    }
}

/// All activations of one evaluation, reusable as the base of an
/// incremental evaluation under a larger mask.
#[derive(Debug, Clone)]
pub struct ValueCache {
    batch: usize,
    mask: ChannelMask,
    values: BTreeMap<String, Arc<Vec<f32>>>,
}

impl ValueCache {
    pub fn mask(&self) -> &ChannelMask {
        &self.mask
    }

    pub fn value(&self, name: &str) -> Option<&[f32]> {
        self.values.get(name).map(|v| v.as_slice())
    }

    /// Batched graph outputs, in declaration order.
    pub fn outputs(&self, g: &ModelGraph) -> Vec<Tensor> {
        g.outputs()
            .iter()
            .map(|s| {
                let mut shape = vec![self.batch];
                shape.extend_from_slice(&s.dims);
                Tensor::new(shape, self.values[&s.name].to_vec()).expect("sized")
            })
            .collect()
    }
}

/// Runs `g` on batched `inputs` (one tensor per graph input, leading batch
/// dim) and returns the batched outputs.
pub fn forward(g: &ModelGraph, inputs: &[Tensor], mask: &ChannelMask) -> Result<Vec<Tensor>> {
    Ok(forward_cached(g, inputs, mask)?.outputs(g))
}

/// Like [`forward`] but keeps every intermediate value.
pub fn forward_cached(g: &ModelGraph, inputs: &[Tensor], mask: &ChannelMask) -> Result<ValueCache> {
    if inputs.len() != g.inputs().len() {
        return Err(Error::InputMismatch(format!(
            "graph has {} inputs, got {}",
            g.inputs().len(),
            inputs.len()
        )));
    }
    let batch = inputs.first().map_or(0, |t| t.shape().first().copied().unwrap_or(0));
    if batch == 0 {
        return Err(Error::InputMismatch("empty input batch".into()));
    }
    let mut values = BTreeMap::new();
    for (spec, t) in g.inputs().iter().zip(inputs) {
        if t.shape()[0] != batch || t.shape()[1..] != spec.dims[..] {
            return Err(Error::InputMismatch(format!(
                "input `{}` expects [N, {:?}], got {:?}",
                spec.name,
                spec.dims,
                t.shape()
            )));
        }
        let mut data = t.data().to_vec();
        apply_ranges(&mut data, batch, mask.ranges(&spec.name));
        values.insert(spec.name.clone(), Arc::new(data));
    }
    let mut cache = ValueCache {
        batch,
        mask: mask.clone(),
        values,
    };
    for node in g.nodes() {
        let out = eval_node(g, node, &cache.values, batch)?;
        let out = finish(node, out, batch, mask)?;
        cache.values.insert(node.output().to_string(), Arc::new(out));
    }
    Ok(cache)
}

/// Re-evaluates under `mask`, which must contain `base.mask()`, recomputing
/// only nodes downstream of newly masked values. Bit-identical to a full
/// [`forward_cached`] under `mask`.
pub fn forward_incremental(g: &ModelGraph, base: &ValueCache, mask: &ChannelMask) -> Result<ValueCache> {
    if !base.mask.groups.is_subset(&mask.groups) {
        return Err(Error::InputMismatch("incremental mask must extend the cached mask".into()));
    }
    let batch = base.batch;
    let mut values = base.values.clone();
    let mut dirty: BTreeSet<&str> = BTreeSet::new();
    for spec in g.inputs() {
        if mask.ranges(&spec.name).len() != base.mask.ranges(&spec.name).len() {
            let mut data = values[&spec.name].to_vec();
            apply_ranges(&mut data, batch, mask.ranges(&spec.name));
            values.insert(spec.name.clone(), Arc::new(data));
            dirty.insert(&spec.name);
        }
    }
    for node in g.nodes() {
        let out_name = node.output();
        let inputs_dirty = node.inputs.iter().any(|i| dirty.contains(i.as_str()));
        let newly_masked = mask.ranges(out_name).len() != base.mask.ranges(out_name).len();
        if inputs_dirty {
            let out = eval_node(g, node, &values, batch)?;
            values.insert(out_name.to_string(), Arc::new(finish(node, out, batch, mask)?));
        } else if newly_masked {
            let mut data = values[out_name].to_vec();
            apply_ranges(&mut data, batch, mask.ranges(out_name));
            values.insert(out_name.to_string(), Arc::new(data));
        } else {
            continue;
        }
        dirty.insert(out_name);
    }
    Ok(ValueCache {
        batch,
        mask: mask.clone(),
        values,
    })
}

fn finish(node: &Node, mut out: Vec<f32>, batch: usize, mask: &ChannelMask) -> Result<Vec<f32>> {
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { node: node.id.clone() });
    }
    apply_ranges(&mut out, batch, mask.ranges(node.output()));
    Ok(out)
}

/// Zeroes `[start, start + len)` of every sample.
fn apply_ranges(data: &mut [f32], batch: usize, ranges: &[(usize, usize)]) {
    if ranges.is_empty() {
        return;
    }
    let per_sample = data.len() / batch;
    for sample in data.chunks_mut(per_sample) {
        for &(start, len) in ranges {
            sample[start..start + len].fill(0.0);
        }
    }
}

fn eval_node(g: &ModelGraph, node: &Node, values: &BTreeMap<String, Arc<Vec<f32>>>, batch: usize) -> Result<Vec<f32>> {
    let act = |i: usize| -> &[f32] { values[&node.inputs[i]].as_slice() };
    let dims = |name: &str| g.value_dims(name).expect("inferred");
    let in_dims = g.activation_inputs(node).next().and_then(|v| g.value_dims(v)).unwrap_or(&[]);
    let out_dims = dims(node.output());
    let w = |i: usize| g.weight(&node.inputs[i]).expect("validated");
    let out = match &node.op {
        Op::Conv(a) => conv(act(0), batch, in_dims, out_dims, w(1), node.inputs.get(2).map(|_| w(2)), a),
        Op::Gemm(a) => gemm(act(0), batch, in_dims[0], out_dims[0], w(1), node.inputs.get(2).map(|_| w(2)), *a),
        Op::MatMul => matmul(act(0), batch, in_dims[0], out_dims[0], w(1)),
        Op::BatchNorm { epsilon } => batch_norm(act(0), in_dims, [w(1), w(2), w(3), w(4)], *epsilon),
        Op::Relu => act(0).iter().map(|&v| v.max(0.0)).collect(),
        Op::MaxPool(p) => pool(act(0), batch, in_dims, out_dims, p, true),
        Op::AveragePool(p) => pool(act(0), batch, in_dims, out_dims, p, false),
        Op::GlobalAveragePool => {
            let hw = in_dims[1] * in_dims[2];
            act(0)
                .chunks(hw)
                .map(|c| (c.iter().map(|&v| f64::from(v)).sum::<f64>() / hw as f64) as f32)
                .collect()
        }
        Op::Add => {
            let consts: Vec<bool> = node.inputs.iter().map(|i| g.is_constant(i)).collect();
            match consts.as_slice() {
                [false, false] => act(0).iter().zip(act(1)).map(|(a, b)| a + b).collect(),
                _ => {
                    let ai = usize::from(consts[0]);
                    let x = act(ai);
                    let c = w(1 - ai);
                    let x_dims = dims(&node.inputs[ai]);
                    match ModelGraph::bias_layout(x_dims, c.shape()).expect("validated") {
                        BiasLayout::Scalar => x.iter().map(|v| v + c.data()[0]).collect(),
                        BiasLayout::PerChannel { .. } => {
                            let inner: usize = x_dims[1..].iter().product();
                            let ch = x_dims[0];
                            x.iter()
                                .enumerate()
                                .map(|(i, v)| v + c.data()[(i / inner) % ch])
                                .collect()
                        }
                    }
                }
            }
        }
        Op::Concat { .. } => {
            let per: Vec<usize> = node.inputs.iter().map(|i| dims(i).iter().product()).collect();
            let total: usize = per.iter().sum();
            let mut out = Vec::with_capacity(total * batch);
            for s in 0..batch {
                for (i, &n) in per.iter().enumerate() {
                    out.extend_from_slice(&act(i)[s * n..(s + 1) * n]);
                }
            }
            out
        }
        Op::Flatten { .. } | Op::Reshape => act(0).to_vec(),
        Op::Opaque { op_type, .. } => {
            return Err(Error::NotExecutable {
                node: node.id.clone(),
                op: op_type.clone(),
            })
        }
    };
    Ok(out)
}

fn conv(x: &[f32], batch: usize, in_dims: &[usize], out_dims: &[usize], w: &Tensor, bias: Option<&Tensor>, a: &ConvAttrs) -> Vec<f32> {
    let (cin, h, wd) = (in_dims[0], in_dims[1], in_dims[2]);
    let (cout, ho, wo) = (out_dims[0], out_dims[1], out_dims[2]);
    debug_assert_eq!(conv_out_hw(h, wd, a.kernel, a.strides, a.pads, a.dilations), Some((ho, wo)));
    let [kh, kw] = a.kernel;
    let groups = a.group;
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let k = cin_g * kh * kw;
    let hw_out = ho * wo;
    let per_in = cin * h * wd;
    let per_out = cout * hw_out;
    let mut out = vec![0.0f32; batch * per_out];
    out.par_chunks_mut(per_out).enumerate().for_each(|(s, y)| {
        let xs = &x[s * per_in..(s + 1) * per_in];
        let mut col = vec![0.0f32; k * hw_out];
        for grp in 0..groups {
            for ci in 0..cin_g {
                let c = grp * cin_g + ci;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row = (ci * kh + ky) * kw + kx;
                        let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                        for oy in 0..ho {
                            let iy = (oy * a.strides[0] + ky * a.dilations[0]) as isize - a.pads[0] as isize;
                            for ox in 0..wo {
                                let ix = (ox * a.strides[1] + kx * a.dilations[1]) as isize - a.pads[1] as isize;
                                dst[oy * wo + ox] = if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < wd {
                                    xs[(c * h + iy as usize) * wd + ix as usize]
                                } else {
                                    0.0
                                };
                            }
                        }
                    }
                }
            }
            let wg = &w.data()[grp * cout_g * k..(grp + 1) * cout_g * k];
            let yg = &mut y[grp * cout_g * hw_out..(grp + 1) * cout_g * hw_out];
            // SAFETY: slices are sized m*k, k*n and m*n with row-major strides.
            unsafe {
                matrixmultiply::sgemm(
                    cout_g,
                    k,
                    hw_out,
                    1.0,
                    wg.as_ptr(),
                    k as isize,
                    1,
                    col.as_ptr(),
                    hw_out as isize,
                    1,
                    0.0,
                    yg.as_mut_ptr(),
                    hw_out as isize,
                    1,
                );
            }
        }
        if let Some(b) = bias {
            for (c, plane) in y.chunks_mut(hw_out).enumerate() {
                let bv = b.data()[c];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    out
}

/// `y = alpha * x W' + beta * c`, with `W'` the (possibly transposed) weight.
fn gemm(x: &[f32], batch: usize, fan_in: usize, out: usize, w: &Tensor, bias: Option<&Tensor>, a: GemmAttrs) -> Vec<f32> {
    let (rsb, csb) = if a.trans_b { (1, fan_in as isize) } else { (out as isize, 1) };
    let mut y = vec![0.0f32; batch * out];
    // SAFETY: x is batch*fan_in, w is fan_in*out (either layout), y is batch*out.
    unsafe {
        matrixmultiply::sgemm(
            batch,
            fan_in,
            out,
            a.alpha,
            x.as_ptr(),
            fan_in as isize,
            1,
            w.data().as_ptr(),
            rsb,
            csb,
            0.0,
            y.as_mut_ptr(),
            out as isize,
            1,
        );
    }
    if let Some(c) = bias {
        let per_out = c.len() > 1;
        for row in y.chunks_mut(out) {
            for (j, v) in row.iter_mut().enumerate() {
                *v += a.beta * c.data()[if per_out { j } else { 0 }];
            }
        }
    }
    y
}

fn matmul(x: &[f32], batch: usize, fan_in: usize, out: usize, w: &Tensor) -> Vec<f32> {
    let attrs = GemmAttrs {
        alpha: 1.0,
        beta: 0.0,
        trans_b: false,
    };
    gemm(x, batch, fan_in, out, w, None, attrs)
}

fn batch_norm(x: &[f32], dims: &[usize], [scale, shift, mean, var]: [&Tensor; 4], eps: f32) -> Vec<f32> {
    let ch = dims[0];
    let inner: usize = dims[1..].iter().product();
    let coef: Vec<(f32, f32)> = (0..ch)
        .map(|c| {
            let k = scale.data()[c] / (var.data()[c] + eps).sqrt();
            (k, shift.data()[c] - mean.data()[c] * k)
        })
        .collect();
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let (k, b) = coef[(i / inner) % ch];
            v * k + b
        })
        .collect()
}

fn pool(x: &[f32], batch: usize, in_dims: &[usize], out_dims: &[usize], p: &PoolAttrs, is_max: bool) -> Vec<f32> {
    let (c, h, w) = (in_dims[0], in_dims[1], in_dims[2]);
    let (ho, wo) = (out_dims[1], out_dims[2]);
    let mut out = Vec::with_capacity(batch * c * ho * wo);
    for plane in x.chunks(h * w) {
        for oy in 0..ho {
            for ox in 0..wo {
                let y0 = (oy * p.strides[0]) as isize - p.pads[0] as isize;
                let x0 = (ox * p.strides[1]) as isize - p.pads[1] as isize;
                let mut acc = if is_max { f32::NEG_INFINITY } else { 0.0 };
                let mut n = 0usize;
                for ky in 0..p.kernel[0] as isize {
                    for kx in 0..p.kernel[1] as isize {
                        let (iy, ix) = (y0 + ky, x0 + kx);
                        if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                            continue;
                        }
                        let v = plane[iy as usize * w + ix as usize];
                        if is_max {
                            acc = acc.max(v);
                        } else {
                            acc += v;
                        }
                        n += 1;
                    }
                }
                if !is_max {
                    let denom = if p.count_include_pad { p.kernel[0] * p.kernel[1] } else { n.max(1) };
                    acc /= denom as f32;
                }
                out.push(acc);
            }
        }
    }
    out
}
