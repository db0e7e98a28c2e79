use super::params::{Bind, Mode, ParamStore, StatUpdate};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor, Var};

pub(crate) const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub(crate) const LEAKY_SLOPE: f64 = 0.2;
/// Weight bound multiplier: `sqrt(6 / (1 + slope^2))` keeps activation and
/// gradient scale roughly constant through leaky-rectifier layers.
pub(crate) const WEIGHT_GAIN: f64 = 2.401922307076307;

/// (Leaky) rectifier, or its softplus-based smooth counterpart when
/// finite-difference checks need a differentiable network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Activation {
    pub slope: f64,
    pub smooth: bool,
}

impl Activation {
    pub fn leaky(smooth: bool) -> Self {
        Self {
            slope: LEAKY_SLOPE,
            smooth,
        }
    }

    pub fn relu(smooth: bool) -> Self {
        Self { slope: 0.0, smooth }
    }

    pub fn apply<'t, T: Element>(&self, x: &Var<'t, T>) -> Var<'t, T> {
        let s = T::lit(self.slope);
        if self.smooth {
            x.smooth_leaky_relu(s)
        } else {
            x.leaky_relu(s)
        }
    }

    /// `f'(h)` as a tape value. For the piecewise-linear activation this is
    /// a constant mask; the smooth form stays differentiable.
    pub fn derivative<'t, T: Element>(&self, h: &Var<'t, T>) -> Var<'t, T> {
        let s = T::lit(self.slope);
        if self.smooth {
            h.sigmoid().scale(T::one() - s).add_scalar(s)
        } else {
            let mask = h.value().map(|v| if v > T::zero() { T::one() } else { s });
            h.tape().constant(mask)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: usize,
    pub bias: usize,
    pub inputs: usize,
}

impl Dense {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add_uniform(
            format!("{name}.weight"),
            vec![inputs, outputs],
            inputs,
            WEIGHT_GAIN,
            rng,
        );
        let bias = store.add_uniform(format!("{name}.bias"), vec![outputs], inputs, 1.0, rng);
        Self { weight, bias, inputs }
    }

    pub fn forward<'t, T: Element>(&self, b: &Bind<'t, '_, T>, x: &Var<'t, T>) -> Var<'t, T> {
        x.linear(&b.var(self.weight), &b.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: usize,
    pub bias: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add_uniform(
            format!("{name}.weight"),
            vec![out_ch, in_ch, kernel, kernel],
            fan_in,
            WEIGHT_GAIN,
            rng,
        );
        let bias = store.add_uniform(format!("{name}.bias"), vec![out_ch], fan_in, 1.0, rng);
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<'t, T: Element>(&self, b: &Bind<'t, '_, T>, x: &Var<'t, T>) -> Var<'t, T> {
        x.conv2d(&b.var(self.weight), &b.var(self.bias), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

impl BatchNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(vec![channels]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels]), true),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(vec![channels]),
                false,
            ),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(vec![channels]), false),
        }
    }

    pub fn forward<'t, T: Element>(&self, b: &Bind<'t, '_, T>, x: &Var<'t, T>) -> Var<'t, T> {
        let store = b.store();
        let running = match b.mode() {
            Mode::Train => None,
            Mode::Eval => Some((
                &store.get(self.running_mean).value,
                &store.get(self.running_var).value,
            )),
        };
        let (y, stats) = x.batch_norm(&b.var(self.gamma), &b.var(self.beta), running, T::lit(BN_EPS));
        if let Some((mean, var)) = stats {
            b.record_stats(StatUpdate {
                mean_idx: self.running_mean,
                var_idx: self.running_var,
                mean,
                var,
            });
        }
        y
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    None,
    Down,
    Up,
}

/// Pre-activation residual block with 3x3 convolutions. Down-sampling
/// average-pools after the second convolution, up-sampling repeats pixels
/// before the first; a 1x1 convolution adapts the shortcut when the channel
/// count changes.
#[derive(Clone, Debug)]
pub struct ResBlock {
    bn1: BatchNorm,
    conv1: Conv,
    bn2: BatchNorm,
    conv2: Conv,
    shortcut: Option<Conv>,
    resample: Resample,
    act: Activation,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        resample: Resample,
        act: Activation,
        rng: &mut Rng,
    ) -> Self {
        Self {
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), in_ch),
            conv1: Conv::new(store, &format!("{name}.conv1"), in_ch, out_ch, 3, 1, 1, rng),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), out_ch),
            conv2: Conv::new(store, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, rng),
            shortcut: (in_ch != out_ch)
                .then(|| Conv::new(store, &format!("{name}.shortcut"), in_ch, out_ch, 1, 1, 0, rng)),
            resample,
            act,
        }
    }

    pub fn forward<'t, T: Element>(&self, b: &Bind<'t, '_, T>, x: &Var<'t, T>) -> Var<'t, T> {
        let mut h = self.act.apply(&self.bn1.forward(b, x));
        if self.resample == Resample::Up {
            h = h.upsample2();
        }
        h = self.conv1.forward(b, &h);
        h = self.conv2.forward(b, &self.act.apply(&self.bn2.forward(b, &h)));
        let mut sc = *x;
        if self.resample == Resample::Up {
            sc = sc.upsample2();
        }
        if let Some(conv) = &self.shortcut {
            sc = conv.forward(b, &sc);
        }
        if self.resample == Resample::Down {
            h = h.avg_pool2();
            sc = sc.avg_pool2();
        }
        h.add(&sc)
    }
}
