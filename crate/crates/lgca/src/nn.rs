//! Parameters and the small set of layers the model is built from.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Arr, Tape, Var};

/// Standard normal sample via Box-Muller, driven by the explicit run rng.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

struct ParamData {
    value: Arr,
    momentum: Arr,
}

/// A named, trainable array. Clones share storage.
#[derive(Clone)]
pub struct Param {
    name: String,
    data: Rc<RefCell<ParamData>>,
}

impl Param {
    fn new(name: String, value: Arr) -> Param {
        let momentum = Arr::zeros(value.raw_dim());
        Param {
            name,
            data: Rc::new(RefCell::new(ParamData { value, momentum })),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> Arr {
        self.data.borrow().value.clone()
    }

    pub fn set_value(&self, value: Arr) {
        let mut d = self.data.borrow_mut();
        assert_eq!(d.value.shape(), value.shape(), "param {}: shape change", self.name);
        d.value = value;
    }

    pub fn len(&self) -> usize {
        self.data.borrow().value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> Vec<usize> {
        self.data.borrow().value.shape().to_vec()
    }

    /// SGD update with momentum and decoupled-from-loss weight decay folded
    /// into the gradient.
    pub fn sgd_step(&self, grad: &Arr, lr: f64, momentum: f64, weight_decay: f64) {
        let mut d = self.data.borrow_mut();
        let mut g = grad.clone();
        if weight_decay != 0.0 {
            g.zip_mut_with(&d.value, |gi, &v| *gi += weight_decay * v);
        }
        d.momentum.zip_mut_with(&g, |m, &gi| *m = momentum * *m + gi);
        let step = d.momentum.clone();
        d.value.zip_mut_with(&step, |v, &m| *v -= lr * m);
    }

    pub fn reset_momentum(&self) {
        let mut d = self.data.borrow_mut();
        d.momentum.fill(0.0);
    }

    /// Leafs the current value into `tape` and records the pairing so the
    /// optimizer can fetch this parameter's gradient after backward.
    pub fn bind(&self, tape: &Rc<Tape>, bindings: &mut Bindings) -> Var {
        let var = tape.leaf(self.value());
        bindings.pairs.push((self.clone(), var.clone()));
        var
    }
}

/// Parameter-to-tape pairings collected during one forward pass.
#[derive(Default)]
pub struct Bindings {
    pairs: Vec<(Param, Var)>,
}

impl Bindings {
    pub fn new() -> Bindings {
        Bindings::default()
    }

    pub fn pairs(&self) -> &[(Param, Var)] {
        &self.pairs
    }
}

/// Registry of every parameter a model owns, in creation order.
#[derive(Default)]
pub struct Registry {
    params: Vec<Param>,
}

impl Registry {
    pub fn new() -> Registry {
        Registry::default()
    }

    pub fn add(&mut self, name: &str, value: Arr) -> Param {
        assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        let p = Param::new(name.to_string(), value);
        self.params.push(p.clone());
        p
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// He-style normal scaled by fan-in.
    He,
    Normal(f64),
    Zero,
    Identity,
}

fn init_matrix(init: Init, rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Arr {
    match init {
        Init::He => {
            let std = (2.0 / fan_in as f64).sqrt();
            Arr::from_shape_fn(IxDyn(&[rows, cols]), |_| normal(rng) * std)
        }
        Init::Normal(std) => Arr::from_shape_fn(IxDyn(&[rows, cols]), |_| normal(rng) * std),
        Init::Zero => Arr::zeros(IxDyn(&[rows, cols])),
        Init::Identity => {
            assert_eq!(rows, cols, "identity init needs a square matrix");
            let mut m = Arr::zeros(IxDyn(&[rows, cols]));
            for i in 0..rows {
                m[[i, i]] = 1.0;
            }
            m
        }
    }
}

/// 2-d convolution layer.
pub struct Conv2d {
    pub w: Param,
    pub b: Option<Param>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &mut Registry,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Conv2d {
        let fan_in = cin * k * k;
        let w = init_matrix(init, cout, cin * k * k, fan_in, rng)
            .into_shape_with_order(IxDyn(&[cout, cin, k, k]))
            .unwrap();
        let w = reg.add(&format!("{name}.w"), w);
        let b = bias.then(|| reg.add(&format!("{name}.b"), Arr::zeros(IxDyn(&[cout]))));
        Conv2d {
            w,
            b,
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Var, bind: &mut Bindings) -> Var {
        let w = self.w.bind(x.tape(), bind);
        let b = self.b.as_ref().map(|b| b.bind(x.tape(), bind));
        x.conv2d(&w, b.as_ref(), self.stride, self.pad)
    }

    /// Multiplies for one forward pass at the given output resolution.
    pub fn macs(&self, out_h: usize, out_w: usize) -> u64 {
        let ws = self.w.shape();
        (ws[0] * ws[1] * ws[2] * ws[3] * out_h * out_w) as u64
    }
}

/// Fully connected layer applied to the trailing axis.
pub struct Linear {
    pub w: Param,
    pub b: Option<Param>,
}

impl Linear {
    pub fn new(
        reg: &mut Registry,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Linear {
        let w = reg.add(&format!("{name}.w"), init_matrix(init, cout, cin, cin, rng));
        let b = bias.then(|| reg.add(&format!("{name}.b"), Arr::zeros(IxDyn(&[cout]))));
        Linear { w, b }
    }

    /// `x` is `[rows, cin]`; returns `[rows, cout]`.
    pub fn forward(&self, x: &Var, bind: &mut Bindings) -> Var {
        let w = self.w.bind(x.tape(), bind);
        let out = x.matmul(&w.permute(&[1, 0]));
        match &self.b {
            Some(b) => out.add_bias_rows(&b.bind(x.tape(), bind)),
            None => out,
        }
    }

    pub fn macs(&self, rows: usize) -> u64 {
        let ws = self.w.shape();
        (ws[0] * ws[1] * rows) as u64
    }
}

/// Group normalization with learned affine parameters.
pub struct GroupNorm {
    pub gamma: Param,
    pub beta: Param,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(reg: &mut Registry, name: &str, channels: usize, groups: usize) -> GroupNorm {
        assert!(
            channels % groups == 0,
            "{name}: {channels} channels not divisible by {groups} groups"
        );
        GroupNorm {
            gamma: reg.add(&format!("{name}.gamma"), Arr::ones(IxDyn(&[channels]))),
            beta: reg.add(&format!("{name}.beta"), Arr::zeros(IxDyn(&[channels]))),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Var, bind: &mut Bindings) -> Var {
        let gamma = self.gamma.bind(x.tape(), bind);
        let beta = self.beta.bind(x.tape(), bind);
        x.group_norm(&gamma, &beta, self.groups, self.eps)
    }
}

/// Normalization slot in a conv block.
pub enum Norm {
    Group(GroupNorm),
    None,
}

impl Norm {
    pub fn new(
        reg: &mut Registry,
        name: &str,
        channels: usize,
        kind: crate::config::NormKind,
    ) -> Norm {
        match kind {
            crate::config::NormKind::Group(g) => {
                // Fall back to fewer groups when the width is too small.
                let groups = if channels % g == 0 { g } else { 1 };
                Norm::Group(GroupNorm::new(reg, name, channels, groups))
            }
            crate::config::NormKind::None => Norm::None,
        }
    }

    pub fn forward(&self, x: &Var, bind: &mut Bindings) -> Var {
        match self {
            Norm::Group(gn) => gn.forward(x, bind),
            Norm::None => x.scale(1.0),
        }
    }
}

/// Pointwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Act {
    Relu,
    LeakyRelu(f64),
}

impl Act {
    pub fn forward(&self, x: &Var) -> Var {
        match self {
            Act::Relu => x.relu(),
            Act::LeakyRelu(s) => x.leaky_relu(*s),
        }
    }
}

/// Convolution followed by optional normalization and an activation.
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: Norm,
    pub act: Act,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &mut Registry,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        norm: crate::config::NormKind,
        act: Act,
        rng: &mut ChaCha8Rng,
    ) -> ConvBlock {
        let pad = k / 2;
        ConvBlock {
            conv: Conv2d::new(reg, &format!("{name}.conv"), cin, cout, k, stride, pad, true, Init::He, rng),
            norm: Norm::new(reg, &format!("{name}.norm"), cout, norm),
            act,
        }
    }

    pub fn forward(&self, x: &Var, bind: &mut Bindings) -> Var {
        let y = self.conv.forward(x, bind);
        let y = self.norm.forward(&y, bind);
        self.act.forward(&y)
    }
}
