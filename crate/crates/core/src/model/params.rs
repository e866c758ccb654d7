//! Trainable parameter containers: single-hidden-layer MLPs (hidden width
//! equals output width), the three-layer conv stack, positional embedding
//! tables and the classifier head, all addressable by stable names for
//! gradient harvesting, optimizers, gradient checking and checkpoints.

use super::config::ModelConfig;
use crate::rng::derive_stream;
use crate::tensor::{ParamStore, Tape, Tensor, TensorError, Var};

/// linear -> ReLU -> linear with bias; hidden width equals output width.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub name: String,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp {
    pub fn init(name: &str, in_dim: usize, out_dim: usize, seed: u64, tag: u64) -> Self {
        let hidden = out_dim;
        let mut r1 = derive_stream(seed, &[tag, 0]);
        let mut r2 = derive_stream(seed, &[tag, 1]);
        Mlp {
            name: name.to_string(),
            w1: Tensor::glorot_uniform(vec![in_dim, hidden], in_dim, hidden, &mut r1),
            b1: Tensor::zeros(vec![hidden]).with_grad(),
            w2: Tensor::glorot_uniform(vec![hidden, out_dim], hidden, out_dim, &mut r2),
            b2: Tensor::zeros(vec![out_dim]).with_grad(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w2.shape()[1]
    }

    /// x: [m x in] -> [m x out]
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let w1 = tape.bind(&format!("{}.w1", self.name), &self.w1);
        let b1 = tape.bind(&format!("{}.b1", self.name), &self.b1);
        let w2 = tape.bind(&format!("{}.w2", self.name), &self.w2);
        let b2 = tape.bind(&format!("{}.b2", self.name), &self.b2);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h);
        let out = tape.matmul(h, w2)?;
        tape.add_row(out, b2)
    }

    fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    fn tensor_mut(&mut self, field: &str) -> Option<&mut Tensor> {
        match field {
            "w1" => Some(&mut self.w1),
            "b1" => Some(&mut self.b1),
            "w2" => Some(&mut self.w2),
            "b2" => Some(&mut self.b2),
            _ => None,
        }
    }
}

/// Three 3x3 stride-2 conv layers with ReLU: 1 -> 8 -> C -> C channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub name: String,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

impl ConvStack {
    pub fn init(name: &str, channels: usize, seed: u64, tag: u64) -> Self {
        let mid = 8usize;
        let conv_w = |co: usize, ci: usize, r: &mut crate::rng::Rng| {
            Tensor::glorot_uniform(vec![co, ci, 3, 3], ci * 9, co * 9, r)
        };
        let mut r1 = derive_stream(seed, &[tag, 0]);
        let mut r2 = derive_stream(seed, &[tag, 1]);
        let mut r3 = derive_stream(seed, &[tag, 2]);
        ConvStack {
            name: name.to_string(),
            w1: conv_w(mid, 1, &mut r1),
            b1: Tensor::zeros(vec![mid]).with_grad(),
            w2: conv_w(channels, mid, &mut r2),
            b2: Tensor::zeros(vec![channels]).with_grad(),
            w3: conv_w(channels, channels, &mut r3),
            b3: Tensor::zeros(vec![channels]).with_grad(),
        }
    }

    /// x: [1 x h x w] -> [channels x ceil(h/8) x ceil(w/8)]
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let w1 = tape.bind(&format!("{}.w1", self.name), &self.w1);
        let b1 = tape.bind(&format!("{}.b1", self.name), &self.b1);
        let w2 = tape.bind(&format!("{}.w2", self.name), &self.w2);
        let b2 = tape.bind(&format!("{}.b2", self.name), &self.b2);
        let w3 = tape.bind(&format!("{}.w3", self.name), &self.w3);
        let b3 = tape.bind(&format!("{}.b3", self.name), &self.b3);
        let h = tape.conv3x3_s2(x, w1, b1)?;
        let h = tape.relu(h);
        let h = tape.conv3x3_s2(h, w2, b2)?;
        let h = tape.relu(h);
        let h = tape.conv3x3_s2(h, w3, b3)?;
        Ok(tape.relu(h))
    }

    fn tensors(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w3", &self.w3),
            ("b3", &self.b3),
        ]
    }

    fn tensor_mut(&mut self, field: &str) -> Option<&mut Tensor> {
        match field {
            "w1" => Some(&mut self.w1),
            "b1" => Some(&mut self.b1),
            "w2" => Some(&mut self.w2),
            "b2" => Some(&mut self.b2),
            "w3" => Some(&mut self.w3),
            "b3" => Some(&mut self.b3),
            _ => None,
        }
    }
}

/// Per-head attention parameters: the pair MLP producing the head's edge
/// vector, and the scoring MLP collapsing it to a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub pair: Mlp,
    pub score: Mlp,
}

/// Every trainable table and MLP of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub n_classes: usize,
    pub text_proj: Mlp,
    pub conv: ConvStack,
    pub fusion: Mlp,
    pub edge_proj: Mlp,
    pub pos_hor: Tensor,
    pub pos_ver: Tensor,
    pub heads: Vec<HeadParams>,
    pub updates: Vec<Mlp>,
    pub cls_w: Tensor,
    pub cls_b: Tensor,
}

impl ModelParams {
    pub fn init(config: ModelConfig, n_classes: usize, seed: u64) -> Self {
        config.validate().expect("invalid model config");
        assert!(n_classes >= 2, "need background plus at least one class");
        let mut tag = 0u64;
        let mut next = || {
            tag += 1;
            tag
        };
        let pair_in = config.pair_input_dim();
        let update_in = config.update_input_dim();
        let sub = config.pos_dim / 4;
        let text_proj = Mlp::init("text_proj", config.text.raw_dim, config.text.text_dim, seed, next());
        let conv = ConvStack::init("conv", config.visual.channels, seed, next());
        let fusion = Mlp::init("fusion", config.text.text_dim * config.visual_dim(), config.node_dim, seed, next());
        let edge_proj = Mlp::init("edge_proj", 6, config.edge_dim, seed, next());
        let pos_hor = Tensor::normal_init(vec![config.grid_k, sub], 0.02, &mut derive_stream(seed, &[next()]));
        let pos_ver = Tensor::normal_init(vec![config.grid_k, sub], 0.02, &mut derive_stream(seed, &[next()]));
        let heads = (0..config.heads)
            .map(|h| HeadParams {
                pair: Mlp::init(&format!("attn{h}.pair"), pair_in, config.node_dim, seed, next()),
                score: Mlp::init(&format!("attn{h}.score"), config.node_dim, 1, seed, next()),
            })
            .collect();
        let updates = (0..config.steps)
            .map(|k| Mlp::init(&format!("update{k}"), update_in, config.node_dim, seed, next()))
            .collect();
        let cls_w = Tensor::glorot_uniform(
            vec![config.node_dim, n_classes],
            config.node_dim,
            n_classes,
            &mut derive_stream(seed, &[next()]),
        );
        let cls_b = Tensor::zeros(vec![n_classes]).with_grad();
        ModelParams {
            config,
            n_classes,
            text_proj,
            conv,
            fusion,
            edge_proj,
            pos_hor,
            pos_ver,
            heads,
            updates,
            cls_w,
            cls_b,
        }
    }

    /// All tensors with their stable names, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        fn push_mlp<'a>(out: &mut Vec<(String, &'a Tensor)>, mlp: &'a Mlp) {
            for (field, t) in mlp.tensors() {
                out.push((format!("{}.{field}", mlp.name), t));
            }
        }
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        push_mlp(&mut out, &self.text_proj);
        for (field, t) in self.conv.tensors() {
            out.push((format!("{}.{field}", self.conv.name), t));
        }
        push_mlp(&mut out, &self.fusion);
        push_mlp(&mut out, &self.edge_proj);
        out.push(("pos_hor".into(), &self.pos_hor));
        out.push(("pos_ver".into(), &self.pos_ver));
        for h in &self.heads {
            push_mlp(&mut out, &h.pair);
            push_mlp(&mut out, &h.score);
        }
        for u in &self.updates {
            push_mlp(&mut out, u);
        }
        out.push(("cls.w".into(), &self.cls_w));
        out.push(("cls.b".into(), &self.cls_b));
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.named().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "pos_hor" => return Some(&mut self.pos_hor),
            "pos_ver" => return Some(&mut self.pos_ver),
            "cls.w" => return Some(&mut self.cls_w),
            "cls.b" => return Some(&mut self.cls_b),
            _ => {}
        }
        if let Some(rest) = name.strip_prefix("text_proj.") {
            return self.text_proj.tensor_mut(rest);
        }
        if let Some(rest) = name.strip_prefix("conv.") {
            return self.conv.tensor_mut(rest);
        }
        if let Some(rest) = name.strip_prefix("fusion.") {
            return self.fusion.tensor_mut(rest);
        }
        if let Some(rest) = name.strip_prefix("edge_proj.") {
            return self.edge_proj.tensor_mut(rest);
        }
        if let Some(rest) = name.strip_prefix("attn") {
            let (idx, rest) = rest.split_once('.')?;
            let h: usize = idx.parse().ok()?;
            let head = self.heads.get_mut(h)?;
            if let Some(field) = rest.strip_prefix("pair.") {
                return head.pair.tensor_mut(field);
            }
            if let Some(field) = rest.strip_prefix("score.") {
                return head.score.tensor_mut(field);
            }
            return None;
        }
        if let Some(rest) = name.strip_prefix("update") {
            let (idx, field) = rest.split_once('.')?;
            let k: usize = idx.parse().ok()?;
            return self.updates.get_mut(k)?.tensor_mut(field);
        }
        None
    }

    /// Adds harvested tape gradients into the parameter gradient buffers.
    pub fn accumulate_grads<'a>(&mut self, grads: impl Iterator<Item = (&'a str, Option<&'a [f64]>)>) {
        for (name, grad) in grads {
            if let Some(g) = grad {
                self.tensor_mut(name)
                    .unwrap_or_else(|| panic!("harvested gradient for unknown tensor {name}"))
                    .accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        let names = self.param_names();
        for name in names {
            self.tensor_mut(&name).unwrap().zero_grad();
        }
    }

    pub fn total_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

impl ParamStore for ModelParams {
    fn param_names(&self) -> Vec<String> {
        self.named().into_iter().map(|(n, _)| n).collect()
    }

    fn values(&self, name: &str) -> &[f64] {
        self.tensor(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .values()
    }

    fn values_mut(&mut self, name: &str) -> &mut [f64] {
        self.tensor_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .values_mut()
    }
}
