//! Layers, parameter registry and the Adam optimizer.
//!
//! Parameters are reference-counted cells holding the current leaf variable;
//! forward passes borrow it, the optimizer swaps in a fresh leaf after each
//! update. Every network exposes its parameters and persistent buffers in a
//! fixed order, which is what the checkpoint format serializes.

use ndarray::{Array1, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{self, Gradients, Var};

pub struct Param {
    name: String,
    var: RefCell<Var>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f32>) -> Rc<Param> {
        Rc::new(Param {
            name: name.into(),
            var: RefCell::new(Var::leaf(value)),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Current leaf variable (cheap clone; shares the value).
    pub fn var(&self) -> Var {
        self.var.borrow().clone()
    }

    pub fn value(&self) -> ArrayD<f32> {
        self.var.borrow().value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.var.borrow().shape().to_vec()
    }

    /// Replace the value with a fresh leaf. Graphs built from the old leaf
    /// keep referencing the old value.
    pub fn set(&self, value: ArrayD<f32>) {
        assert_eq!(
            self.var.borrow().shape(),
            value.shape(),
            "param {} shape change",
            self.name
        );
        *self.var.borrow_mut() = Var::leaf(value);
    }
}

/// Persistent non-trainable state (batch-norm running statistics).
pub struct Buffer {
    pub name: String,
    pub value: RefCell<ArrayD<f32>>,
}

impl Buffer {
    pub fn new(name: impl Into<String>, value: ArrayD<f32>) -> Rc<Buffer> {
        Rc::new(Buffer {
            name: name.into(),
            value: RefCell::new(value),
        })
    }
}

/// He-normal initialization for convolution and linear weights.
pub fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
    let std = (2.0 / fan_in as f32).sqrt();
    let dist = Normal::new(0.0f32, std).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

pub struct Conv2d {
    pub weight: Rc<Param>,
    pub bias: Option<Rc<Param>>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Conv2d {
        let weight = Param::new(
            format!("{name}.weight"),
            he_normal(rng, &[out_c, in_c, k, k], in_c * k * k),
        );
        let bias = bias.then(|| Param::new(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_c]))));
        Conv2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        let y = tensor::conv2d(x, &self.weight.var(), self.stride, self.pad);
        match &self.bias {
            Some(b) => tensor::add_bias(&y, &b.var()),
            None => y,
        }
    }

    /// Forward with the weights detached: gradients flow to the input but
    /// never accumulate on the layer (frozen feature extractors).
    pub fn forward_frozen(&self, x: &Var) -> Var {
        let y = tensor::conv2d(x, &self.weight.var().detach(), self.stride, self.pad);
        match &self.bias {
            Some(b) => tensor::add_bias(&y, &b.var().detach()),
            None => y,
        }
    }

    pub fn params(&self) -> Vec<Rc<Param>> {
        let mut p = vec![Rc::clone(&self.weight)];
        if let Some(b) = &self.bias {
            p.push(Rc::clone(b));
        }
        p
    }
}

/// 2-strided deconvolution (transposed convolution), weight `(in, out, k, k)`.
pub struct ConvTranspose2d {
    pub weight: Rc<Param>,
    pub bias: Option<Rc<Param>>,
    stride: usize,
    pad: usize,
    k: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> ConvTranspose2d {
        let weight = Param::new(
            format!("{name}.weight"),
            he_normal(rng, &[in_c, out_c, k, k], in_c * k * k),
        );
        let bias = bias.then(|| Param::new(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_c]))));
        ConvTranspose2d {
            weight,
            bias,
            stride,
            pad,
            k,
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let out_h = (h - 1) * self.stride + self.k - 2 * self.pad;
        let out_w = (w - 1) * self.stride + self.k - 2 * self.pad;
        let y = tensor::conv2d_input_grad(x, &self.weight.var(), self.stride, self.pad, out_h, out_w);
        match &self.bias {
            Some(b) => tensor::add_bias(&y, &b.var()),
            None => y,
        }
    }

    pub fn params(&self) -> Vec<Rc<Param>> {
        let mut p = vec![Rc::clone(&self.weight)];
        if let Some(b) = &self.bias {
            p.push(Rc::clone(b));
        }
        p
    }
}

pub struct BatchNorm2d {
    pub gamma: Rc<Param>,
    pub beta: Rc<Param>,
    pub running_mean: Rc<Buffer>,
    pub running_var: Rc<Buffer>,
    eps: f32,
    momentum: f32,
    composite: bool,
}

impl BatchNorm2d {
    /// Fused fast path; backward is first-order only.
    pub fn new(name: &str, channels: usize) -> BatchNorm2d {
        Self::build(name, channels, false)
    }

    /// Composite formulation whose backward is itself differentiable; the
    /// discriminator needs this for the gradient penalty.
    pub fn new_composite(name: &str, channels: usize) -> BatchNorm2d {
        Self::build(name, channels, true)
    }

    fn build(name: &str, channels: usize, composite: bool) -> BatchNorm2d {
        BatchNorm2d {
            gamma: Param::new(format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[channels]), 1.0)),
            beta: Param::new(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: Buffer::new(format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Buffer::new(
                format!("{name}.running_var"),
                ArrayD::from_elem(IxDyn(&[channels]), 1.0),
            ),
            eps: 1e-5,
            momentum: 0.1,
            composite,
        }
    }

    fn update_running(&self, c: usize, n: f32, means: &[f32], vars: &[f32]) {
        // running statistics track the unbiased batch variance
        let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let mut rm = self.running_mean.value.borrow_mut();
        let mut rv = self.running_var.value.borrow_mut();
        for ci in 0..c {
            rm[[ci]] = (1.0 - self.momentum) * rm[[ci]] + self.momentum * means[ci];
            rv[[ci]] = (1.0 - self.momentum) * rv[[ci]] + self.momentum * vars[ci] * correction;
        }
    }

    pub fn forward(&self, x: &Var, train: bool) -> Var {
        let c = x.shape()[1];
        let bshape = [1, c, 1, 1];
        if train && !self.composite {
            let (y, means, invs) = tensor::norm_fused(
                x,
                &self.gamma.var(),
                &self.beta.var(),
                tensor::NormAxes::PerChannel,
                self.eps,
            );
            let vars: Vec<f32> = invs
                .iter()
                .map(|&inv| (1.0 / (inv as f64 * inv as f64) - self.eps as f64) as f32)
                .collect();
            self.update_running(c, (x.len() / c) as f32, &means, &vars);
            return y;
        }
        let gamma = tensor::reshape(&self.gamma.var(), &bshape);
        let beta = tensor::reshape(&self.beta.var(), &bshape);
        if train {
            let mu = tensor::mean_axes(x, &[0, 2, 3]);
            let xc = tensor::sub(x, &tensor::broadcast_to(&mu, x.shape()));
            let var = tensor::mean_axes(&tensor::square(&xc), &[0, 2, 3]);
            let inv = tensor::rsqrt(&tensor::add_scalar(&var, self.eps));
            let y = tensor::mul(&xc, &tensor::broadcast_to(&inv, x.shape()));
            let means: Vec<f32> = (0..c).map(|ci| mu.value()[[0, ci, 0, 0]]).collect();
            let vars: Vec<f32> = (0..c).map(|ci| var.value()[[0, ci, 0, 0]]).collect();
            self.update_running(c, (x.len() / c) as f32, &means, &vars);
            let scaled = tensor::mul(&y, &tensor::broadcast_to(&gamma, x.shape()));
            tensor::add(&scaled, &tensor::broadcast_to(&beta, x.shape()))
        } else {
            let rm = self.running_mean.value.borrow();
            let rv = self.running_var.value.borrow();
            let mu = Var::constant(rm.clone().into_shape_with_order(IxDyn(&bshape)).unwrap());
            let inv = Var::constant(
                rv.mapv(|v| 1.0 / (v + self.eps).sqrt())
                    .into_shape_with_order(IxDyn(&bshape))
                    .unwrap(),
            );
            let xc = tensor::sub(x, &tensor::broadcast_to(&mu, x.shape()));
            let y = tensor::mul(&xc, &tensor::broadcast_to(&inv, x.shape()));
            let scaled = tensor::mul(&y, &tensor::broadcast_to(&gamma, x.shape()));
            tensor::add(&scaled, &tensor::broadcast_to(&beta, x.shape()))
        }
    }

    pub fn params(&self) -> Vec<Rc<Param>> {
        vec![Rc::clone(&self.gamma), Rc::clone(&self.beta)]
    }

    pub fn buffers(&self) -> Vec<Rc<Buffer>> {
        vec![Rc::clone(&self.running_mean), Rc::clone(&self.running_var)]
    }
}

/// Instance normalization with learned affine terms; statistics are per
/// sample and per channel, identical in train and eval modes.
pub struct InstanceNorm2d {
    pub gamma: Rc<Param>,
    pub beta: Rc<Param>,
    eps: f32,
}

impl InstanceNorm2d {
    pub fn new(name: &str, channels: usize) -> InstanceNorm2d {
        InstanceNorm2d {
            gamma: Param::new(format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[channels]), 1.0)),
            beta: Param::new(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels]))),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        let (y, _, _) = tensor::norm_fused(
            x,
            &self.gamma.var(),
            &self.beta.var(),
            tensor::NormAxes::PerSampleChannel,
            self.eps,
        );
        y
    }

    pub fn params(&self) -> Vec<Rc<Param>> {
        vec![Rc::clone(&self.gamma), Rc::clone(&self.beta)]
    }
}

pub enum Norm {
    Batch(BatchNorm2d),
    Instance(InstanceNorm2d),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    Instance,
}

impl Norm {
    pub fn new(kind: NormKind, name: &str, channels: usize) -> Norm {
        match kind {
            NormKind::Batch => Norm::Batch(BatchNorm2d::new(name, channels)),
            NormKind::Instance => Norm::Instance(InstanceNorm2d::new(name, channels)),
        }
    }

    pub fn forward(&self, x: &Var, train: bool) -> Var {
        match self {
            Norm::Batch(bn) => bn.forward(x, train),
            Norm::Instance(inl) => inl.forward(x),
        }
    }

    pub fn params(&self) -> Vec<Rc<Param>> {
        match self {
            Norm::Batch(bn) => bn.params(),
            Norm::Instance(inl) => inl.params(),
        }
    }

    pub fn buffers(&self) -> Vec<Rc<Buffer>> {
        match self {
            Norm::Batch(bn) => bn.buffers(),
            Norm::Instance(_) => Vec::new(),
        }
    }
}

pub struct Linear {
    pub weight: Rc<Param>, // (in, out)
    pub bias: Rc<Param>,   // (out)
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, in_f: usize, out_f: usize) -> Linear {
        Linear {
            weight: Param::new(format!("{name}.weight"), he_normal(rng, &[in_f, out_f], in_f)),
            bias: Param::new(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_f]))),
        }
    }

    /// Zero weights plus a fixed bias: the output starts at `bias` exactly.
    pub fn zero_init_with_bias(name: &str, in_f: usize, bias: Array1<f32>) -> Linear {
        let out_f = bias.len();
        Linear {
            weight: Param::new(format!("{name}.weight"), ArrayD::zeros(IxDyn(&[in_f, out_f]))),
            bias: Param::new(format!("{name}.bias"), bias.into_dyn()),
        }
    }

    /// `x` is `(B, in)`.
    pub fn forward(&self, x: &Var) -> Var {
        let y = tensor::matmul(x, &self.weight.var());
        let out = y.shape()[1];
        let b = tensor::reshape(&self.bias.var(), &[1, out]);
        tensor::add(&y, &tensor::broadcast_to(&b, y.shape()))
    }

    pub fn params(&self) -> Vec<Rc<Param>> {
        vec![Rc::clone(&self.weight), Rc::clone(&self.bias)]
    }
}

/// One encoder scale: a standard convolution, then a 2-strided convolution
/// that halves the resolution; norm + relu after each. Kernel sizes default
/// to 3 (standard) and 4 (strided) and are recorded in the config.
pub struct EncoderBlock {
    conv: Conv2d,
    norm1: Norm,
    down: Conv2d,
    norm2: Norm,
}

impl EncoderBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        kind: NormKind,
        standard_k: usize,
        strided_k: usize,
    ) -> EncoderBlock {
        assert!(standard_k % 2 == 1, "standard kernel must be odd");
        assert!(strided_k == 3 || strided_k == 4, "strided kernel must be 3 or 4");
        EncoderBlock {
            conv: Conv2d::new(
                rng,
                &format!("{name}.conv"),
                in_c,
                out_c,
                standard_k,
                1,
                (standard_k - 1) / 2,
                false,
            ),
            norm1: Norm::new(kind, &format!("{name}.norm1"), out_c),
            down: Conv2d::new(rng, &format!("{name}.down"), out_c, out_c, strided_k, 2, 1, false),
            norm2: Norm::new(kind, &format!("{name}.norm2"), out_c),
        }
    }

    pub fn forward(&self, x: &Var, train: bool) -> Var {
        let y = tensor::relu(&self.norm1.forward(&self.conv.forward(x), train));
        tensor::relu(&self.norm2.forward(&self.down.forward(&y), train))
    }

    pub fn params(&self) -> Vec<Rc<Param>> {
        let mut p = self.conv.params();
        p.extend(self.norm1.params());
        p.extend(self.down.params());
        p.extend(self.norm2.params());
        p
    }

    pub fn buffers(&self) -> Vec<Rc<Buffer>> {
        let mut b = self.norm1.buffers();
        b.extend(self.norm2.buffers());
        b
    }
}

/// Five-scale encoder shared by the geometric matcher's feature extractors
/// and the generator's encoders; only the normalization differs.
pub struct Encoder {
    blocks: Vec<EncoderBlock>,
}

pub const ENCODER_DEPTHS: [usize; 5] = [16, 32, 64, 128, 256];

impl Encoder {
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        kind: NormKind,
        standard_k: usize,
        strided_k: usize,
    ) -> Encoder {
        let mut blocks = Vec::new();
        let mut prev = in_c;
        for (i, &depth) in ENCODER_DEPTHS.iter().enumerate() {
            blocks.push(EncoderBlock::new(
                rng,
                &format!("{name}.block{i}"),
                prev,
                depth,
                kind,
                standard_k,
                strided_k,
            ));
            prev = depth;
        }
        Encoder { blocks }
    }

    /// Final feature map only.
    pub fn forward(&self, x: &Var, train: bool) -> Var {
        self.forward_pyramid(x, train).pop().unwrap()
    }

    /// All five scales, shallowest first.
    pub fn forward_pyramid(&self, x: &Var, train: bool) -> Vec<Var> {
        let mut levels = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for block in &self.blocks {
            cur = block.forward(&cur, train);
            levels.push(cur.clone());
        }
        levels
    }

    pub fn params(&self) -> Vec<Rc<Param>> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    pub fn buffers(&self) -> Vec<Rc<Buffer>> {
        self.blocks.iter().flat_map(|b| b.buffers()).collect()
    }
}

/// Adam with bias correction; one instance per optimizer group.
pub struct Adam {
    pub lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: usize,
    params: Vec<Rc<Param>>,
    state: Vec<(ArrayD<f32>, ArrayD<f32>)>,
}

impl Adam {
    pub fn new(params: Vec<Rc<Param>>, lr: f32, beta1: f32, beta2: f32) -> Adam {
        let state = params
            .iter()
            .map(|p| {
                let shape = p.shape();
                (
                    ArrayD::zeros(IxDyn(&shape)),
                    ArrayD::zeros(IxDyn(&shape)),
                )
            })
            .collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            params,
            state,
        }
    }

    pub fn step(&mut self, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (param, (m, v)) in self.params.iter().zip(self.state.iter_mut()) {
            let var = param.var();
            let Some(g) = grads.get(&var) else { continue };
            let g = g.value();
            let mut new_val = param.value();
            // single fused pass over moments and parameters
            let (Some(gs), Some(ms), Some(vs), Some(ps)) = (
                g.as_slice(),
                m.as_slice_mut(),
                v.as_slice_mut(),
                new_val.as_slice_mut(),
            ) else {
                unreachable!("optimizer state is always standard layout");
            };
            for i in 0..ps.len() {
                let gi = gs[i];
                ms[i] = b1 * ms[i] + (1.0 - b1) * gi;
                vs[i] = b2 * vs[i] + (1.0 - b2) * gi * gi;
                ps[i] -= lr * (ms[i] / bc1) / ((vs[i] / bc2).sqrt() + eps);
            }
            param.set(new_val);
        }
    }

    pub fn params(&self) -> &[Rc<Param>] {
        &self.params
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// (step, per-param first and second moments) for checkpointing.
    pub fn state(&self) -> (usize, &[(ArrayD<f32>, ArrayD<f32>)]) {
        (self.step, &self.state)
    }

    pub fn load_state(&mut self, step: usize, state: Vec<(ArrayD<f32>, ArrayD<f32>)>) {
        assert_eq!(state.len(), self.state.len(), "optimizer state length mismatch");
        self.step = step;
        self.state = state;
    }
}


#[cfg(test)]
mod fused_norm_tests {
    use super::*;
    use crate::tensor::{self, Var};
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0f32..1.0))
    }

    /// The fused batch norm must agree with the composite formulation in
    /// both value and first-order gradients.
    #[test]
    fn fused_batch_norm_matches_composite() {
        let x0 = randn(&[2, 3, 4, 4], 61);
        let run = |composite: bool| -> (ArrayD<f32>, ArrayD<f32>, ArrayD<f32>, ArrayD<f32>) {
            let bn = if composite {
                BatchNorm2d::new_composite("bn", 3)
            } else {
                BatchNorm2d::new("bn", 3)
            };
            bn.gamma.set(randn(&[3], 62).mapv(|v| 1.0 + 0.3 * v));
            bn.beta.set(randn(&[3], 63).mapv(|v| 0.2 * v));
            let x = Var::leaf(x0.clone());
            let y = bn.forward(&x, true);
            let loss = tensor::mean_all(&tensor::square(&tensor::add_scalar(&y, 0.1)));
            let grads = loss.backward();
            (
                y.value().clone(),
                grads.get_or_zeros(&x),
                grads.get_or_zeros(&bn.gamma.var()),
                grads.get_or_zeros(&bn.beta.var()),
            )
        };
        let (yf, dxf, dgf, dbf) = run(false);
        let (yc, dxc, dgc, dbc) = run(true);
        for (a, b) in [(yf, yc), (dxf, dxc), (dgf, dgc), (dbf, dbc)] {
            let max = a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(max <= 1e-4, "fused/composite mismatch {max}");
        }
    }

    /// Instance-norm gradient against central finite differences.
    #[test]
    fn fused_instance_norm_gradient_check() {
        let x0 = randn(&[2, 2, 3, 3], 71);
        let f = |x: &ArrayD<f32>| -> f32 {
            let inorm = InstanceNorm2d::new("in", 2);
            inorm.gamma.set(ArrayD::from_elem(IxDyn(&[2]), 1.3));
            inorm.beta.set(ArrayD::from_elem(IxDyn(&[2]), -0.2));
            let y = inorm.forward(&Var::constant(x.clone()));
            tensor::mean_all(&tensor::square(&tensor::add_scalar(&y, 0.3))).item()
        };
        let inorm = InstanceNorm2d::new("in", 2);
        inorm.gamma.set(ArrayD::from_elem(IxDyn(&[2]), 1.3));
        inorm.beta.set(ArrayD::from_elem(IxDyn(&[2]), -0.2));
        let x = Var::leaf(x0.clone());
        let y = inorm.forward(&x);
        let loss = tensor::mean_all(&tensor::square(&tensor::add_scalar(&y, 0.3)));
        let analytic = loss.backward().get_or_zeros(&x);
        let eps = 1e-2f32;
        for flat in 0..x0.len() {
            let mut p = x0.clone();
            p.as_slice_mut().unwrap()[flat] += eps;
            let mut m = x0.clone();
            m.as_slice_mut().unwrap()[flat] -= eps;
            let fd = (f(&p) - f(&m)) / (2.0 * eps);
            let an = analytic.as_slice().unwrap()[flat];
            assert!(
                (fd - an).abs() <= 3e-2 * fd.abs().max(an.abs()).max(0.1),
                "at {flat}: fd={fd} an={an}"
            );
        }
    }
}
