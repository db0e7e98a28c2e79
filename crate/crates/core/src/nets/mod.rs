//! Encoder, discriminator and critic networks.
//!
//! Parameters live in a [`ParamStore`] per model. A forward pass binds a
//! store to a [`Tape`](crate::tensor::Tape) through [`Bind`], which also
//! decides whether gradients are wanted and which batch-norm statistics are
//! used.

mod encoder;
mod layers;
mod mlp;
mod params;

pub use encoder::{Encoder, EncoderOutput, EncoderSpec};
pub use layers::{Activation, BN_MOMENTUM};
pub use mlp::Mlp;
pub use params::{Bind, Mode, Param, ParamStore, StatUpdate};

use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::rng::{stream, Stream};
use crate::tensor::{Element, Tape, Tensor};

/// Hidden widths of the critic and discriminator before width division.
pub const MLP_HIDDEN: (usize, usize) = (1024, 512);

/// Evaluation forward passes are chunked to bound memory.
pub const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug)]
pub struct Models<T> {
    pub encoder: Encoder<T>,
    pub discriminator: Mlp<T>,
    pub critic: Mlp<T>,
}

/// Channels seen by the encoder under `cfg`.
pub fn input_channels(cfg: &ExperimentConfig) -> usize {
    if cfg.grayscale || !cfg.dataset_name.is_color() {
        1
    } else {
        3
    }
}

pub fn encoder_spec(cfg: &ExperimentConfig) -> EncoderSpec {
    EncoderSpec {
        arch: cfg.arch,
        channels: input_channels(cfg),
        image_size: cfg.image_size,
        num_clusters: cfg.num_clusters,
        style_dim: cfg.style_dim,
        width_divisor: cfg.width_divisor,
        smooth: cfg.smooth_activations,
    }
}

/// Builds and seeds all three networks for `cfg`.
pub fn build_models<T: Element>(cfg: &ExperimentConfig) -> Result<Models<T>> {
    let mut rng = stream(cfg.seed, Stream::Init);
    let encoder = Encoder::new(encoder_spec(cfg), &mut rng)?;
    let div = cfg.width_divisor.max(1);
    let hidden = ((MLP_HIDDEN.0 / div).max(1), (MLP_HIDDEN.1 / div).max(1));
    let latent = encoder.latent_dim();
    let discriminator = Mlp::new(
        encoder.feature_dim() + latent,
        hidden,
        cfg.smooth_activations,
        &mut rng,
    );
    let critic = Mlp::new(latent, hidden, cfg.smooth_activations, &mut rng);
    Ok(Models {
        encoder,
        discriminator,
        critic,
    })
}

impl<T: Element> Models<T> {
    /// Digest of every parameter name and shape; two model sets with equal
    /// hashes can exchange checkpoints.
    pub fn arch_hash(&self) -> String {
        let mut h = Sha256::new();
        for (tag, store) in self.stores() {
            h.update(tag.as_bytes());
            store.hash_layout(&mut h);
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn stores(&self) -> [(&'static str, &ParamStore<T>); 3] {
        [
            ("encoder", &self.encoder.params),
            ("discriminator", &self.discriminator.params),
            ("critic", &self.critic.params),
        ]
    }

    pub fn stores_mut(&mut self) -> [(&'static str, &mut ParamStore<T>); 3] {
        [
            ("encoder", &mut self.encoder.params),
            ("discriminator", &mut self.discriminator.params),
            ("critic", &mut self.critic.params),
        ]
    }
}

/// Evaluation-mode latents and discriminator features, `([N, K+d_s], [N, F])`.
pub fn encode<T: Element>(encoder: &Encoder<T>, images: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let n = images.dim(0);
    let mut zs = Vec::new();
    let mut fs = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let tape = Tape::new();
        let b = Bind::new(&tape, &encoder.params, false, Mode::Eval);
        let x = tape.constant(images.select_rows(&idx));
        let out = encoder.forward(&b, &x);
        zs.push(out.z.value());
        fs.push(out.features.value());
    }
    (Tensor::cat_rows(&zs), Tensor::cat_rows(&fs))
}

/// Discriminator logits for `(features_i, z_i)` pairs.
pub fn discriminate<T: Element>(disc: &Mlp<T>, features: &Tensor<T>, z: &Tensor<T>) -> Tensor<T> {
    assert_eq!(features.dim(0), z.dim(0), "discriminate: batch mismatch");
    let tape = Tape::new();
    let b = Bind::new(&tape, &disc.params, false, Mode::Eval);
    let x = crate::tensor::Var::cat_cols(&[tape.constant(features.clone()), tape.constant(z.clone())]);
    disc.forward(&b, &x).value()
}

pub fn criticize<T: Element>(critic: &Mlp<T>, z: &Tensor<T>) -> Tensor<T> {
    let tape = Tape::new();
    let b = Bind::new(&tape, &critic.params, false, Mode::Eval);
    critic.forward(&b, &tape.constant(z.clone())).value()
}
