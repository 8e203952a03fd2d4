//! Seeded toy multitask networks used as fixtures.
//!
//! Both share the same outline: a conv trunk with one skip-add, a pooling
//! stage, a two-branch concat, then a classification head and a regression
//! head.
//!
//! | arch       | trunk                                                      | heads                                             |
//! |------------|------------------------------------------------------------|---------------------------------------------------|
//! | `toy_mt_a` | conv1 16, conv2 16, conv3 16 (+ conv2 skip), maxpool, conv4 24 ‖ conv5 8, conv6 32 | GAP, fc1 24, head_cls 5 / conv7 4, flatten, head_reg 3 |
//! | `toy_mt_b` | conv1 12, conv2 12, conv3 12 (+ conv1 skip), avgpool, conv4 16 ‖ conv5 16, conv6 24 /2 | GAP, reshape, fc1 16 (MatMul+Add), head_cls 4 / flatten, head_reg 2 |

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use crate::error::Error;
use crate::graph::builder::GraphBuilder;
use crate::graph::ModelGraph;
use crate::tensor::Tensor;

pub const TOY_INPUT: &str = "input";
pub const TOY_INPUT_DIMS: [usize; 3] = [3, 16, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyArch {
    ToyMtA,
    ToyMtB,
}

impl ToyArch {
    pub fn id(self) -> &'static str {
        match self {
            ToyArch::ToyMtA => "toy_mt_a",
            ToyArch::ToyMtB => "toy_mt_b",
        }
    }

    /// Graph outputs: (classification logits, regression vector).
    pub fn heads(self) -> (&'static str, &'static str) {
        ("head_cls", "head_reg")
    }
}

impl fmt::Display for ToyArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ToyArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "toy_mt_a" => Ok(ToyArch::ToyMtA),
            "toy_mt_b" => Ok(ToyArch::ToyMtB),
            other => Err(Error::Config(format!("unknown toy architecture `{other}` (expected toy_mt_a or toy_mt_b)"))),
        }
    }
}

/// Head nodes that must stay unpruned.
pub fn toy_exclusions(arch: ToyArch) -> Vec<&'static str> {
    match arch {
        ToyArch::ToyMtA => vec!["head_cls", "head_reg"],
        ToyArch::ToyMtB => vec!["head_cls_mm", "head_cls", "head_reg"],
    }
}

struct Init {
    rng: ChaCha8Rng,
    filter_scale: LogNormal<f32>,
}

impl Init {
    fn normal(&mut self, shape: Vec<usize>, std: f32) -> Tensor {
        let d = Normal::new(0.0f32, std).expect("positive std");
        Tensor::from_fn(shape, |_| d.sample(&mut self.rng))
    }

    /// He-normal filters, each scaled by its own log-normal factor so that
    /// filter norms spread like those of a trained network.
    fn filters(&mut self, out: usize, fan_in: usize, rest: &[usize]) -> Tensor {
        let per: usize = rest.iter().product();
        let std = (2.0 / fan_in as f32).sqrt();
        let d = Normal::new(0.0f32, std).expect("positive std");
        let mut data = Vec::with_capacity(out * per);
        for _ in 0..out {
            let s = self.filter_scale.sample(&mut self.rng);
            data.extend((0..per).map(|_| s * d.sample(&mut self.rng)));
        }
        let mut shape = vec![out];
        shape.extend_from_slice(rest);
        Tensor::new(shape, data).expect("sized")
    }

    fn uniform(&mut self, n: usize, lo: f32, hi: f32) -> Tensor {
        Tensor::from_fn(vec![n], |_| self.rng.random_range(lo..hi))
    }

    fn conv_weight(&mut self, out: usize, cin: usize, k: usize) -> Tensor {
        self.filters(out, cin * k * k, &[cin, k, k])
    }

    /// `[out, in]` dense weight.
    fn dense(&mut self, out: usize, fan_in: usize) -> Tensor {
        self.filters(out, fan_in, &[fan_in])
    }

    /// `[in, out]` dense weight for MatMul.
    fn dense_t(&mut self, fan_in: usize, out: usize) -> Tensor {
        let w = self.dense(out, fan_in);
        Tensor::from_fn(vec![fan_in, out], |i| w.data()[(i % out) * fan_in + i / out])
    }
}

struct Net {
    b: GraphBuilder,
    init: Init,
}

impl Net {
    #[allow(clippy::too_many_arguments)]
    fn conv_bn_relu(&mut self, n: usize, x: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> String {
        let c = self.conv_bn(n, x, cin, cout, k, stride, bias);
        self.b.relu(&format!("relu{n}"), &c)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bn(&mut self, n: usize, x: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> String {
        let w = self.init.conv_weight(cout, cin, k);
        let bias = bias.then(|| self.init.normal(vec![cout], 0.05));
        let p = k / 2;
        let c = self.b.conv(&format!("conv{n}"), x, w, bias, [stride, stride], [p, p, p, p], 1);
        self.bn(&format!("bn{n}"), &c, cout)
    }

    fn bn(&mut self, id: &str, x: &str, c: usize) -> String {
        let scale = self.init.uniform(c, 0.6, 1.4);
        let shift = self.init.normal(vec![c], 0.1);
        let mean = self.init.normal(vec![c], 0.1);
        let var = self.init.uniform(c, 0.5, 2.0);
        self.b.batch_norm(id, x, scale, shift, mean, var, 1e-5)
    }
}

/// Builds a toy network with weights drawn from a ChaCha8 stream seeded by
/// `seed`; identical arguments give bit-identical graphs.
pub fn build_toy_model(seed: u64, arch: ToyArch) -> ModelGraph {
    let mut net = Net {
        b: GraphBuilder::new(arch.id()),
        init: Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            filter_scale: LogNormal::new(0.0, 0.5).expect("valid"),
        },
    };
    let x = net.b.input(TOY_INPUT, TOY_INPUT_DIMS.to_vec());
    match arch {
        ToyArch::ToyMtA => toy_a(&mut net, &x),
        ToyArch::ToyMtB => toy_b(&mut net, &x),
    }
    net.b.build().expect("toy architecture is valid")
}

fn toy_a(n: &mut Net, x: &str) {
    let r1 = n.conv_bn_relu(1, x, 3, 16, 3, 1, false);
    let s = n.conv_bn_relu(2, &r1, 16, 16, 3, 1, false);
    let b3 = n.conv_bn(3, &s, 16, 16, 3, 1, false);
    let a = n.b.add("add1", &b3, &s);
    let r3 = n.b.relu("relu3", &a);
    let p = n.b.max_pool("pool1", &r3, [2, 2], [2, 2], [0; 4]);
    let r4 = n.conv_bn_relu(4, &p, 16, 24, 1, 1, true);
    let r5 = n.conv_bn_relu(5, &p, 16, 8, 1, 1, true);
    let cat = n.b.concat("cat1", &[&r4, &r5]);
    let r6 = n.conv_bn_relu(6, &cat, 32, 32, 3, 1, false);

    let gap = n.b.global_avg_pool("gap", &r6);
    let f = n.b.flatten("flat1", &gap);
    let w = n.init.dense(24, 32);
    let bias = n.init.normal(vec![24], 0.05);
    let fc1 = n.b.gemm("fc1", &f, w, Some(bias));
    let rf = n.b.relu("relu_fc1", &fc1);
    let w = n.init.dense(5, 24);
    let bias = n.init.normal(vec![5], 0.05);
    let cls = n.b.gemm("head_cls", &rf, w, Some(bias));

    let r7 = n.conv_bn_relu(7, &r6, 32, 4, 1, 1, true);
    let f2 = n.b.flatten("flat2", &r7);
    let w = n.init.dense(3, 256);
    let bias = n.init.normal(vec![3], 0.05);
    let reg = n.b.gemm("head_reg", &f2, w, Some(bias));
    n.b.output(&cls);
    n.b.output(&reg);
}

fn toy_b(n: &mut Net, x: &str) {
    let r1 = n.conv_bn_relu(1, x, 3, 12, 3, 1, false);
    let r2 = n.conv_bn_relu(2, &r1, 12, 12, 3, 1, false);
    let b3 = n.conv_bn(3, &r2, 12, 12, 3, 1, false);
    let a = n.b.add("add1", &b3, &r1);
    let r3 = n.b.relu("relu3", &a);
    let p = n.b.avg_pool("pool1", &r3, [2, 2], [2, 2], [0; 4]);
    let r4 = n.conv_bn_relu(4, &p, 12, 16, 3, 1, false);
    let r5 = n.conv_bn_relu(5, &p, 12, 16, 1, 1, true);
    let cat = n.b.concat("cat1", &[&r4, &r5]);
    let r6 = n.conv_bn_relu(6, &cat, 32, 24, 3, 2, false);

    let gap = n.b.global_avg_pool("gap", &r6);
    let f = n.b.reshape_flatten("reshape1", &gap);
    let w = n.init.dense_t(24, 16);
    let mm = n.b.matmul("fc1", &f, w);
    let bias = n.init.normal(vec![16], 0.05);
    let fc1 = n.b.add_const("fc1_bias", &mm, bias);
    let rf = n.b.relu("relu_fc1", &fc1);
    let w = n.init.dense_t(16, 4);
    let mm = n.b.matmul("head_cls_mm", &rf, w);
    let bias = n.init.normal(vec![4], 0.05);
    let cls = n.b.add_const("head_cls", &mm, bias);

    let f2 = n.b.flatten("flat2", &r6);
    let w = n.init.dense(2, 384);
    let bias = n.init.normal(vec![2], 0.05);
    let reg = n.b.gemm("head_reg", &f2, w, Some(bias));
    n.b.output(&cls);
    n.b.output(&reg);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        for arch in [ToyArch::ToyMtA, ToyArch::ToyMtB] {
            let a = build_toy_model(0, arch);
            let b = build_toy_model(0, arch);
            assert!(a.same_as(&b));
            let c = build_toy_model(1, arch);
            assert!(!a.same_as(&c));
            assert_eq!(a.outputs().len(), 2);
        }
    }

    #[test]
    fn head_shapes() {
        let a = build_toy_model(0, ToyArch::ToyMtA);
        assert_eq!(a.value_dims("head_cls"), Some(&[5][..]));
        assert_eq!(a.value_dims("head_reg"), Some(&[3][..]));
        let b = build_toy_model(0, ToyArch::ToyMtB);
        assert_eq!(b.value_dims("head_cls"), Some(&[4][..]));
        assert_eq!(b.value_dims("head_reg"), Some(&[2][..]));
    }

    #[test]
    fn arch_parse() {
        assert_eq!("toy_mt_b".parse::<ToyArch>().unwrap(), ToyArch::ToyMtB);
        assert!("toy".parse::<ToyArch>().is_err());
    }
}
