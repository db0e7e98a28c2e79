use super::layers::{Activation, BatchNorm, Conv, Dense, ResBlock, Resample};
use super::params::{Bind, ParamStore};
use crate::config::Arch;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Var};

/// Static description of an encoder, enough to rebuild its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderSpec {
    pub arch: Arch,
    pub channels: usize,
    pub image_size: (usize, usize),
    pub num_clusters: usize,
    pub style_dim: usize,
    pub width_divisor: usize,
    pub smooth: bool,
}

impl EncoderSpec {
    /// Resolves [`Arch::Auto`] from the image size.
    pub fn resolved_arch(&self) -> Result<Arch> {
        let (h, w) = self.image_size;
        let arch = match self.arch {
            Arch::Auto => match (h, w) {
                (28, 28) => Arch::Conv28,
                (32, 32) => Arch::Resnet32,
                (96, 96) => Arch::Resnet96,
                _ => return Err(Error::UnsupportedImageSize { height: h, width: w }),
            },
            a => a,
        };
        // every architecture halves the side a fixed number of times
        let halvings = match arch {
            Arch::Conv28 => 2,
            Arch::Resnet32 => 3,
            Arch::Resnet96 => 4,
            Arch::Auto => unreachable!(),
        };
        let unit = 1usize << halvings;
        if h % unit != 0 || w % unit != 0 || h == 0 || w == 0 {
            return Err(Error::UnsupportedImageSize { height: h, width: w });
        }
        Ok(arch)
    }

    fn width(&self, n: usize) -> usize {
        (n / self.width_divisor).max(1)
    }
}

#[derive(Clone, Debug)]
enum Body {
    /// conv 4x4/2 -> BN -> lReLU, twice, then dense -> BN -> lReLU.
    Conv28 {
        conv1: Conv,
        bn1: BatchNorm,
        conv2: Conv,
        bn2: BatchNorm,
        dense: Dense,
        bn3: BatchNorm,
    },
    /// Residual stack; the discriminator reads the flattened output of the
    /// second-to-last block.
    Resnet { blocks: Vec<ResBlock>, bn: BatchNorm },
}

/// Image encoder with a softmax category head and a linear style head.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub spec: EncoderSpec,
    pub params: ParamStore<T>,
    body: Body,
    cat_head: Dense,
    style_head: Option<Dense>,
    feature_dim: usize,
}

/// Tape values produced by one encoder pass over a batch.
#[derive(Clone, Copy)]
pub struct EncoderOutput<'t, T> {
    /// `[m, K + d_s]`: category probabilities followed by style.
    pub z: Var<'t, T>,
    pub z_c: Var<'t, T>,
    /// Shared features handed to the discriminator, `[m, feature_dim]`.
    pub features: Var<'t, T>,
}

impl<T: Element> Encoder<T> {
    pub fn new(spec: EncoderSpec, rng: &mut Rng) -> Result<Self> {
        let arch = spec.resolved_arch()?;
        let mut p = ParamStore::new();
        let (h, w) = spec.image_size;
        let (body, head_in, feature_dim) = match arch {
            Arch::Conv28 => {
                let (c1, c2, d) = (spec.width(64), spec.width(128), spec.width(1024));
                let flat = c2 * (h / 4) * (w / 4);
                let body = Body::Conv28 {
                    conv1: Conv::new(&mut p, "conv1", spec.channels, c1, 4, 2, 1, rng),
                    bn1: BatchNorm::new(&mut p, "bn1", c1),
                    conv2: Conv::new(&mut p, "conv2", c1, c2, 4, 2, 1, rng),
                    bn2: BatchNorm::new(&mut p, "bn2", c2),
                    dense: Dense::new(&mut p, "dense", flat, d, rng),
                    bn3: BatchNorm::new(&mut p, "bn3", d),
                };
                (body, d, flat)
            }
            Arch::Resnet32 | Arch::Resnet96 => {
                let widths: &[usize] = if arch == Arch::Resnet32 {
                    &[128, 256, 512]
                } else {
                    &[64, 128, 256, 512]
                };
                let act = Activation::relu(spec.smooth);
                let mut blocks = Vec::new();
                let mut ch = spec.channels;
                for (i, &wd) in widths.iter().enumerate() {
                    let out = spec.width(wd);
                    blocks.push(ResBlock::new(
                        &mut p,
                        &format!("block{}", i + 1),
                        ch,
                        out,
                        Resample::Down,
                        act,
                        rng,
                    ));
                    ch = out;
                }
                let last = spec.width(512);
                blocks.push(ResBlock::new(
                    &mut p,
                    &format!("block{}", widths.len() + 1),
                    ch,
                    last,
                    Resample::None,
                    act,
                    rng,
                ));
                let side = 1 << widths.len();
                let flat = ch * (h / side) * (w / side);
                let bn = BatchNorm::new(&mut p, "final_bn", last);
                (Body::Resnet { blocks, bn }, last, flat)
            }
            Arch::Auto => unreachable!(),
        };
        let cat_head = Dense::new(&mut p, "category_head", head_in, spec.num_clusters, rng);
        let style_head =
            (spec.style_dim > 0).then(|| Dense::new(&mut p, "style_head", head_in, spec.style_dim, rng));
        Ok(Self {
            spec: EncoderSpec { arch, ..spec },
            params: p,
            body,
            cat_head,
            style_head,
            feature_dim,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.num_clusters + self.spec.style_dim
    }

    /// `x: [m, channels, h, w]`.
    pub fn forward<'t>(&self, b: &Bind<'t, '_, T>, x: &Var<'t, T>) -> EncoderOutput<'t, T> {
        let shape = x.shape();
        assert_eq!(
            &shape[1..],
            &[self.spec.channels, self.spec.image_size.0, self.spec.image_size.1],
            "encoder input shape"
        );
        let lrelu = Activation::leaky(self.spec.smooth);
        let (hidden, features) = match &self.body {
            Body::Conv28 {
                conv1,
                bn1,
                conv2,
                bn2,
                dense,
                bn3,
            } => {
                let h = lrelu.apply(&bn1.forward(b, &conv1.forward(b, x)));
                let h = lrelu.apply(&bn2.forward(b, &conv2.forward(b, &h)));
                let features = h.flatten();
                let d = lrelu.apply(&bn3.forward(b, &dense.forward(b, &features)));
                (d, features)
            }
            Body::Resnet { blocks, bn } => {
                let mut h = *x;
                let mut features = None;
                for (i, block) in blocks.iter().enumerate() {
                    h = block.forward(b, &h);
                    if i + 2 == blocks.len() {
                        features = Some(h.flatten());
                    }
                }
                let relu = Activation::relu(self.spec.smooth);
                let pooled = relu.apply(&bn.forward(b, &h)).global_avg_pool();
                (pooled, features.expect("at least two blocks"))
            }
        };
        let z_c = self.cat_head.forward(b, &hidden).softmax();
        let z = match &self.style_head {
            Some(head) => Var::cat_cols(&[z_c, head.forward(b, &hidden)]),
            None => z_c,
        };
        EncoderOutput { z, z_c, features }
    }
}
