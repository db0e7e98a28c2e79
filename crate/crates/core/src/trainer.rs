//! The alternating training loop: `n_critic` critic updates, then one joint
//! update of encoder and discriminator.

use std::collections::VecDeque;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentSpec;
use crate::checkpoint::save_checkpoint;
use crate::config::{save_config, ExperimentConfig};
use crate::data::{BatchSampler, Dataset, ImageSet};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Evaluation};
use crate::losses::{
    adv_c_loss, adv_q_loss, aug_kl, mi_loss, negative_pairing, BoundMlp, CriticLoss, LossWeights,
};
use crate::nets::{build_models, Bind, Mode, Models, BN_MOMENTUM};
use crate::optim::Optimizers;
use crate::prior::{interpolate_rows, sample_eps, sample_prior};
use crate::rng::{stream, Rng, Stream};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Window length of the moving averages reported in the log.
pub const MONITOR_WINDOW: usize = 50;

pub fn loss_weights(cfg: &ExperimentConfig) -> LossWeights {
    LossWeights {
        beta_mi: cfg.beta_mi,
        beta_aug: cfg.beta_aug,
        beta_adv: cfg.beta_adv,
    }
}

/// Tape values of the encoder/discriminator objective.
pub struct EncoderRound<'t, T> {
    /// `beta_mi * l_mi + beta_aug * l_aug + beta_adv * l_adv_q`. Its
    /// gradient with respect to the discriminator equals that of
    /// `beta_mi * l_mi`, since no other term depends on it.
    pub l_q: Var<'t, T>,
    pub l_mi: Var<'t, T>,
    pub l_aug: Var<'t, T>,
    pub l_adv_q: Var<'t, T>,
}

/// Builds the encoder objective for images `x`, their augmented versions
/// (`None` means augmentation is the identity) and the negative pairing.
#[allow(clippy::too_many_arguments)]
pub fn encoder_objective<'t, T: Element>(
    models: &Models<T>,
    enc: &Bind<'t, '_, T>,
    disc: &Bind<'t, '_, T>,
    critic: &Bind<'t, '_, T>,
    x: &Tensor<T>,
    x_aug: Option<&Tensor<T>>,
    pairing: &[usize],
    w: LossWeights,
) -> Result<EncoderRound<'t, T>> {
    let tape = enc.tape();
    let out = models.encoder.forward(enc, &tape.constant(x.clone()));
    let l_aug = match x_aug {
        Some(xa) => {
            let aug = models.encoder.forward(enc, &tape.constant(xa.clone()));
            aug_kl(&out.z_c, &aug.z_c)
        }
        None => aug_kl(&out.z_c, &out.z_c),
    };
    let pos_in = Var::cat_cols(&[out.features, out.z]);
    let neg_in = Var::cat_cols(&[out.features, out.z.gather_rows(pairing)]);
    let pos = models.discriminator.forward(disc, &pos_in);
    let neg = models.discriminator.forward(disc, &neg_in);
    let l_mi = mi_loss(&pos, &neg)?;
    let l_adv_q = adv_q_loss(&models.critic.forward(critic, &out.z))?;
    let l_q = l_mi
        .scale(T::lit(w.beta_mi))
        .add(&l_aug.scale(T::lit(w.beta_aug)))
        .add(&l_adv_q.scale(T::lit(w.beta_adv)));
    Ok(EncoderRound {
        l_q,
        l_mi,
        l_aug,
        l_adv_q,
    })
}

pub struct CriticRound<'t, T> {
    /// `beta_adv * l_adv_c`
    pub l_c: Var<'t, T>,
    pub loss: CriticLoss<'t, T>,
}

/// Builds the critic objective. The encoder runs on `x` but no gradient
/// reaches it; `prior` and `eps` are the prior draws and mixing weights.
#[allow(clippy::too_many_arguments)]
pub fn critic_objective<'t, T: Element>(
    models: &Models<T>,
    enc: &Bind<'t, '_, T>,
    critic: &Bind<'t, '_, T>,
    x: &Tensor<T>,
    prior: &Tensor<T>,
    eps: &[f64],
    lambda: f64,
    beta_adv: f64,
) -> Result<CriticRound<'t, T>> {
    let tape = critic.tape();
    let z_enc = models.encoder.forward(enc, &tape.constant(x.clone())).z.value();
    let z_hat = interpolate_rows(&z_enc, prior, eps);
    let bound = BoundMlp {
        mlp: &models.critic,
        bind: critic,
    };
    let loss = adv_c_loss(
        &bound,
        &tape.constant(z_enc),
        &tape.constant(prior.clone()),
        &tape.constant(z_hat),
        lambda,
    )?;
    Ok(CriticRound {
        l_c: loss.total.scale(T::lit(beta_adv)),
        loss,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CriticStats {
    pub l_c: f64,
    pub l_adv_c: f64,
    pub gp_term: f64,
    pub neg_critic_loss: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EncoderStats {
    pub l_mi: f64,
    pub l_aug: f64,
    pub l_adv_q: f64,
    pub l_q_total: f64,
    pub l_d_total: f64,
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: ExperimentConfig,
    pub models: Models<f32>,
    pub optimizers: Optimizers<f32>,
    /// Encoder updates performed.
    pub step: usize,
    pub critic_updates: usize,
    prior_rng: Rng,
    pairing_rng: Rng,
    interp_rng: Rng,
}

fn finite_or_dump(what: &str, values: &[(&str, f64)]) -> Result<()> {
    if values.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    let dump: Vec<String> = values.iter().map(|(k, v)| format!("{k}={v}")).collect();
    Err(Error::NonFinite(format!("{what}: {}", dump.join(", "))))
}

impl TrainState {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let models = build_models::<f32>(config)?;
        let optimizers = Optimizers::new(&models, config);
        Ok(Self {
            config: config.clone(),
            models,
            optimizers,
            step: 0,
            critic_updates: 0,
            prior_rng: stream(config.seed, Stream::Prior),
            pairing_rng: stream(config.seed, Stream::Pairing),
            interp_rng: stream(config.seed, Stream::Interpolate),
        })
    }

    /// One critic update on images `x` (no augmentation on this path).
    pub fn critic_step(&mut self, x: &Tensor<f32>) -> Result<CriticStats> {
        let cfg = &self.config;
        let m = x.dim(0);
        let prior = sample_prior(m, cfg.num_clusters, cfg.style_dim, cfg.sigma, &mut self.prior_rng);
        let eps = sample_eps(m, &mut self.interp_rng);
        let tape = Tape::new();
        let enc = Bind::new(&tape, &self.models.encoder.params, false, Mode::Train);
        let critic = Bind::new(&tape, &self.models.critic.params, true, Mode::Train);
        let round = critic_objective(
            &self.models,
            &enc,
            &critic,
            x,
            &prior,
            &eps,
            cfg.lambda,
            cfg.beta_adv,
        )?;
        let stats = CriticStats {
            l_c: round.l_c.value().item() as f64,
            l_adv_c: round.loss.total.value().item() as f64,
            gp_term: round.loss.gp.value().item() as f64,
            neg_critic_loss: round.loss.neg_critic_loss(),
        };
        finite_or_dump(
            "critic step",
            &[
                ("l_c", stats.l_c),
                ("l_adv_c", stats.l_adv_c),
                ("gp_term", stats.gp_term),
            ],
        )?;
        let grads = critic.grads(&round.l_c.backward());
        let enc_stats = enc.take_stat_updates();
        drop((enc, critic));
        self.optimizers
            .critic
            .step(&mut self.models.critic.params, &grads);
        self.models
            .encoder
            .params
            .apply_stat_updates(enc_stats, BN_MOMENTUM);
        self.critic_updates += 1;
        Ok(stats)
    }

    /// One joint encoder/discriminator update. `x_aug` holds the augmented
    /// images for the same rows, or `None` when augmentation is disabled.
    pub fn encoder_step(&mut self, x: &Tensor<f32>, x_aug: Option<&Tensor<f32>>) -> Result<EncoderStats> {
        let w = loss_weights(&self.config);
        let pairing = negative_pairing(x.dim(0), &mut self.pairing_rng)?;
        let tape = Tape::new();
        let enc = Bind::new(&tape, &self.models.encoder.params, true, Mode::Train);
        let disc = Bind::new(&tape, &self.models.discriminator.params, true, Mode::Train);
        let critic = Bind::new(&tape, &self.models.critic.params, false, Mode::Train);
        let round = encoder_objective(&self.models, &enc, &disc, &critic, x, x_aug, &pairing, w)?;
        let l_mi = round.l_mi.value().item() as f64;
        let stats = EncoderStats {
            l_mi,
            l_aug: round.l_aug.value().item() as f64,
            l_adv_q: round.l_adv_q.value().item() as f64,
            l_q_total: round.l_q.value().item() as f64,
            l_d_total: w.beta_mi * l_mi,
        };
        finite_or_dump(
            "encoder step",
            &[
                ("l_mi", stats.l_mi),
                ("l_aug", stats.l_aug),
                ("l_adv_q", stats.l_adv_q),
                ("l_q_total", stats.l_q_total),
            ],
        )?;
        let g = round.l_q.backward();
        let enc_grads = enc.grads(&g);
        let disc_grads = disc.grads(&g);
        let enc_stats = enc.take_stat_updates();
        drop((enc, disc, critic));
        self.optimizers
            .encoder
            .step(&mut self.models.encoder.params, &enc_grads);
        self.optimizers
            .discriminator
            .step(&mut self.models.discriminator.params, &disc_grads);
        self.models
            .encoder
            .params
            .apply_stat_updates(enc_stats, BN_MOMENTUM);
        self.step += 1;
        Ok(stats)
    }
}

/// Inputs for one encoder step and the critic steps preceding it.
pub struct RoundBatches {
    pub critic: Vec<Tensor<f32>>,
    pub encoder: Tensor<f32>,
    pub encoder_aug: Option<Tensor<f32>>,
}

/// Draws minibatches and their augmentations in a fixed order.
pub struct BatchFeeder {
    images: ImageSet,
    sampler: BatchSampler,
    aug_rng: Rng,
    spec: AugmentSpec,
    grayscale: bool,
    n_critic: usize,
}

impl BatchFeeder {
    pub fn new(images: ImageSet, cfg: &ExperimentConfig) -> Result<Self> {
        if cfg.batch_size > images.len() {
            return Err(Error::InvalidArgument(format!(
                "batch size {} exceeds dataset size {}",
                cfg.batch_size,
                images.len()
            )));
        }
        Ok(Self {
            sampler: BatchSampler::new(images.len(), cfg.batch_size, cfg.seed, true),
            images,
            aug_rng: stream(cfg.seed, Stream::Augment),
            spec: cfg.augmentation.clone(),
            grayscale: cfg.grayscale,
            n_critic: cfg.n_critic,
        })
    }

    pub fn next_round(&mut self) -> RoundBatches {
        let critic = (0..self.n_critic)
            .map(|_| {
                let idx = self.sampler.next_batch();
                self.images.batch_tensor(&idx, self.grayscale, None)
            })
            .collect();
        let idx = self.sampler.next_batch();
        let encoder = self.images.batch_tensor(&idx, self.grayscale, None);
        let encoder_aug = self.spec.enabled.then(|| {
            self.images
                .batch_tensor(&idx, self.grayscale, Some((&self.spec, &mut self.aug_rng)))
        });
        RoundBatches {
            critic,
            encoder,
            encoder_aug,
        }
    }
}

/// Batch production either inline or on a background thread. Both yield
/// the same sequence; the thread only overlaps it with computation.
enum Feed {
    Inline(BatchFeeder),
    Prefetch(Option<Receiver<RoundBatches>>, Option<JoinHandle<()>>),
}

impl Feed {
    fn new(feeder: BatchFeeder, prefetch: bool, rounds: usize) -> Self {
        if !prefetch {
            return Feed::Inline(feeder);
        }
        let (tx, rx) = sync_channel(2);
        let mut feeder = feeder;
        let handle = std::thread::spawn(move || {
            for _ in 0..rounds {
                if tx.send(feeder.next_round()).is_err() {
                    break;
                }
            }
        });
        Feed::Prefetch(Some(rx), Some(handle))
    }

    fn next(&mut self) -> RoundBatches {
        match self {
            Feed::Inline(f) => f.next_round(),
            Feed::Prefetch(rx, _) => rx
                .as_ref()
                .expect("receiver alive")
                .recv()
                .expect("prefetch thread ended early"),
        }
    }
}

impl Drop for Feed {
    fn drop(&mut self) {
        if let Feed::Prefetch(rx, handle) = self {
            drop(rx.take());
            if let Some(h) = handle.take() {
                let _ = h.join();
            }
        }
    }
}

/// Per-encoder-step losses (critic values averaged over the round).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_mi: f64,
    pub l_aug: f64,
    pub l_adv_q: f64,
    pub l_q_total: f64,
    pub l_d_total: f64,
    pub l_c: f64,
    pub gp_term: f64,
    pub neg_critic_loss: f64,
}

/// One line of the metrics log: loss means over the last
/// [`MONITOR_WINDOW`] steps and, when labels exist, clustering metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub l_mi: f64,
    pub l_aug: f64,
    pub l_adv_q: f64,
    pub l_c: f64,
    pub neg_critic_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nmi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ari: Option<f64>,
}

pub type ProgressFn = Box<dyn FnMut(&LogRecord) + Send>;

#[derive(Default)]
pub struct TrainOptions {
    /// Where logs, checkpoints and reports go; nothing is written if unset.
    pub out_dir: Option<PathBuf>,
    /// Produce batches on the training thread only.
    pub strict_deterministic: bool,
    pub cancel: Option<Arc<AtomicBool>>,
    pub on_record: Option<ProgressFn>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRecord>,
    pub history: Vec<StepRecord>,
    pub final_eval: Option<Evaluation>,
}

pub const METRICS_LOG: &str = "metrics.jsonl";
pub const LOSS_TRACE: &str = "loss_trace.csv";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";

pub fn checkpoint_path(out_dir: &Path, step: usize) -> PathBuf {
    out_dir
        .join("checkpoints")
        .join(format!("step-{step:07}.safetensors"))
}

fn window_mean(h: &VecDeque<StepRecord>, f: impl Fn(&StepRecord) -> f64) -> f64 {
    h.iter().map(f).sum::<f64>() / h.len().max(1) as f64
}

struct Outputs {
    dir: PathBuf,
    log: std::fs::File,
    trace: csv::Writer<std::fs::File>,
}

impl Outputs {
    fn open(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_config(cfg, dir.join("config.toml"))?;
        let lp = dir.join(METRICS_LOG);
        let log = std::fs::File::create(&lp).map_err(|e| Error::io(&lp, e))?;
        let tp = dir.join(LOSS_TRACE);
        let trace = csv::Writer::from_path(&tp).map_err(|e| Error::Io {
            path: tp.clone(),
            source: e.into(),
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            log,
            trace,
        })
    }

    fn record(&mut self, r: &LogRecord) -> Result<()> {
        let p = self.dir.join(METRICS_LOG);
        writeln!(
            self.log,
            "{}",
            serde_json::to_string(r).expect("record serializes")
        )
        .and_then(|_| self.log.flush())
        .map_err(|e| Error::io(&p, e))
    }

    fn step(&mut self, s: &StepRecord) -> Result<()> {
        let p = self.dir.join(LOSS_TRACE);
        self.trace.serialize(s).map_err(|e| Error::Io {
            path: p,
            source: e.into(),
        })
    }
}

/// Runs the full schedule on `data`. Labels, when present, are used only to
/// report metrics.
pub fn train(cfg: &ExperimentConfig, data: &Dataset, mut opts: TrainOptions) -> Result<TrainOutcome> {
    let mut state = TrainState::new(cfg)?;
    let mut feed = Feed::new(
        BatchFeeder::new(data.images.clone(), cfg)?,
        !opts.strict_deterministic,
        cfg.total_encoder_steps,
    );
    let mut out = match &opts.out_dir {
        Some(dir) => Some(Outputs::open(dir, cfg)?),
        None => None,
    };
    let hash = cfg.hash();
    let labels = data.labels.as_deref();
    let mut window: VecDeque<StepRecord> = VecDeque::with_capacity(MONITOR_WINDOW);
    let mut history = Vec::with_capacity(cfg.total_encoder_steps);
    let mut log = Vec::new();
    let mut final_eval = None;
    while state.step < cfg.total_encoder_steps {
        if opts.cancel.as_ref().is_some_and(|c| c.load(Ordering::Relaxed)) {
            return Err(Error::Cancelled(state.step));
        }
        let round = feed.next();
        let mut critic = Vec::with_capacity(round.critic.len());
        for x in &round.critic {
            critic.push(state.critic_step(x)?);
        }
        let e = state.encoder_step(&round.encoder, round.encoder_aug.as_ref())?;
        let nc = critic.len().max(1) as f64;
        let rec = StepRecord {
            step: state.step,
            l_mi: e.l_mi,
            l_aug: e.l_aug,
            l_adv_q: e.l_adv_q,
            l_q_total: e.l_q_total,
            l_d_total: e.l_d_total,
            l_c: critic.iter().map(|c| c.l_c).sum::<f64>() / nc,
            gp_term: critic.iter().map(|c| c.gp_term).sum::<f64>() / nc,
            neg_critic_loss: critic.iter().map(|c| c.neg_critic_loss).sum::<f64>() / nc,
        };
        if window.len() == MONITOR_WINDOW {
            window.pop_front();
        }
        window.push_back(rec);
        history.push(rec);
        if let Some(o) = out.as_mut() {
            o.step(&rec)?;
        }
        let last = state.step == cfg.total_encoder_steps;
        if state.step % cfg.eval_every == 0 || last {
            let eval = match labels {
                Some(l) => Some(evaluate(
                    &state.models.encoder,
                    &data.images,
                    l,
                    cfg.grayscale,
                    false,
                    cfg.seed,
                    &hash,
                )?),
                None => None,
            };
            let am = eval.as_ref().map(|e| e.argmax());
            let r = LogRecord {
                step: state.step,
                l_mi: window_mean(&window, |s| s.l_mi),
                l_aug: window_mean(&window, |s| s.l_aug),
                l_adv_q: window_mean(&window, |s| s.l_adv_q),
                l_c: window_mean(&window, |s| s.l_c),
                neg_critic_loss: window_mean(&window, |s| s.neg_critic_loss),
                acc: am.map(|m| m.acc),
                nmi: am.map(|m| m.nmi),
                ari: am.map(|m| m.ari),
            };
            log::info!(
                "step {} l_mi {:.4} l_aug {:.4} l_adv_q {:.4} l_c {:.4} -L_C {:.4}{}",
                r.step,
                r.l_mi,
                r.l_aug,
                r.l_adv_q,
                r.l_c,
                r.neg_critic_loss,
                am.map(|m| format!(" acc {:.4} nmi {:.4} ari {:.4}", m.acc, m.nmi, m.ari))
                    .unwrap_or_default()
            );
            if let Some(o) = out.as_mut() {
                o.record(&r)?;
            }
            if let Some(cb) = opts.on_record.as_mut() {
                cb(&r);
            }
            log.push(r);
            if last {
                final_eval = eval;
            }
        }
        if let Some(o) = out.as_ref() {
            if state.step % cfg.checkpoint_every == 0 && !last {
                save_checkpoint(
                    checkpoint_path(&o.dir, state.step),
                    cfg,
                    &state.models,
                    Some(&state.optimizers),
                    state.step,
                )?;
            }
        }
    }
    drop(feed);
    if let Some(mut o) = out {
        o.trace
            .flush()
            .map_err(|e| Error::io(o.dir.join(LOSS_TRACE), e))?;
        save_checkpoint(
            o.dir.join(FINAL_CHECKPOINT),
            cfg,
            &state.models,
            Some(&state.optimizers),
            state.step,
        )?;
        if let Some(ev) = &final_eval {
            ev.write(&o.dir)?;
        }
    }
    Ok(TrainOutcome {
        state,
        log,
        history,
        final_eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_blocks;
    use crate::nets::ParamStore;

    fn small_config(extra: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&format!(
            "dataset_name = \"synthetic_blocks\"\n\
             width_divisor = 16\nstyle_dim = 4\nbatch_size = 8\nn_critic = 2\n\
             total_encoder_steps = 3\neval_every = 2\n{extra}"
        ))
        .unwrap()
    }

    fn data(cfg: &ExperimentConfig) -> Dataset {
        make_synthetic_blocks(16, cfg.image_size, 0.1, cfg.seed)
    }

    fn batch(cfg: &ExperimentConfig, ds: &Dataset, aug: bool) -> (Tensor<f32>, Option<Tensor<f32>>) {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|i| i * 3 % ds.len()).collect();
        let x = ds.images.batch_tensor(&idx, true, None);
        let mut rng = stream(1, Stream::Augment);
        let xa = aug.then(|| {
            ds.images
                .batch_tensor(&idx, true, Some((&cfg.augmentation, &mut rng)))
        });
        (x, xa)
    }

    fn snapshot(p: &ParamStore<f32>) -> Vec<Vec<u32>> {
        p.iter()
            .map(|q| q.value.data().iter().map(|v| v.to_bits()).collect())
            .collect()
    }

    #[test]
    fn critic_step_touches_only_the_critic_weights() {
        let cfg = small_config("");
        let ds = data(&cfg);
        let mut st = TrainState::new(&cfg).unwrap();
        let (x, _) = batch(&cfg, &ds, false);
        let enc_trainable: Vec<_> = st.models.encoder.params.iter().map(|p| p.trainable).collect();
        let enc = snapshot(&st.models.encoder.params);
        let disc = snapshot(&st.models.discriminator.params);
        let critic = snapshot(&st.models.critic.params);
        st.critic_step(&x).unwrap();
        let enc_after = snapshot(&st.models.encoder.params);
        for ((a, b), trainable) in enc.iter().zip(&enc_after).zip(&enc_trainable) {
            if *trainable {
                assert_eq!(a, b);
            }
        }
        assert_eq!(disc, snapshot(&st.models.discriminator.params));
        assert_ne!(critic, snapshot(&st.models.critic.params));
        assert_eq!(st.critic_updates, 1);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn encoder_step_leaves_the_critic_alone() {
        let cfg = small_config("");
        let ds = data(&cfg);
        let mut st = TrainState::new(&cfg).unwrap();
        let (x, xa) = batch(&cfg, &ds, true);
        let enc = snapshot(&st.models.encoder.params);
        let disc = snapshot(&st.models.discriminator.params);
        let critic = snapshot(&st.models.critic.params);
        let s = st.encoder_step(&x, xa.as_ref()).unwrap();
        assert_eq!(critic, snapshot(&st.models.critic.params));
        assert_ne!(enc, snapshot(&st.models.encoder.params));
        assert_ne!(disc, snapshot(&st.models.discriminator.params));
        assert!(s.l_aug > 0.0);
        assert!((s.l_d_total - cfg.beta_mi * s.l_mi).abs() < 1e-12);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn identity_augmentation_gives_exactly_zero_invariance_loss() {
        let cfg = small_config("[augmentation]\nenabled = false\n");
        let ds = data(&cfg);
        let mut st = TrainState::new(&cfg).unwrap();
        let (x, _) = batch(&cfg, &ds, false);
        let s = st.encoder_step(&x, None).unwrap();
        assert_eq!(s.l_aug, 0.0);
    }

    #[test]
    fn equal_states_take_equal_steps() {
        let cfg = small_config("");
        let ds = data(&cfg);
        let (x, xa) = batch(&cfg, &ds, true);
        let mut a = TrainState::new(&cfg).unwrap();
        let mut b = a.clone();
        assert_eq!(a.critic_step(&x).unwrap(), b.critic_step(&x).unwrap());
        assert_eq!(
            a.encoder_step(&x, xa.as_ref()).unwrap(),
            b.encoder_step(&x, xa.as_ref()).unwrap()
        );
        assert_eq!(a.models.encoder.params, b.models.encoder.params);
    }

    #[test]
    fn schedule_counts_critic_updates_and_logs() {
        let cfg = small_config("");
        let ds = data(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let out = train(
            &cfg,
            &ds,
            TrainOptions {
                out_dir: Some(dir.path().to_path_buf()),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.state.step, 3);
        assert_eq!(out.state.critic_updates, 3 * cfg.n_critic);
        assert_eq!(out.history.len(), 3);
        // logged at step 2 and at the final step
        assert_eq!(out.log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![2, 3]);
        assert!(out.log.iter().all(|r| r.acc.is_some()));
        let text = std::fs::read_to_string(dir.path().join(METRICS_LOG)).unwrap();
        assert_eq!(text.lines().count(), 2);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in [
            "step",
            "l_mi",
            "l_aug",
            "l_adv_q",
            "l_c",
            "neg_critic_loss",
            "acc",
            "nmi",
            "ari",
        ] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        assert!(dir.path().join(FINAL_CHECKPOINT).exists());
        assert!(dir.path().join("metrics.json").exists());
        assert!(dir.path().join("config.toml").exists());
    }

    #[test]
    fn prefetch_and_inline_feeds_agree() {
        let cfg = small_config("");
        let ds = data(&cfg);
        let run = |strict| {
            train(
                &cfg,
                &ds,
                TrainOptions {
                    strict_deterministic: strict,
                    ..Default::default()
                },
            )
            .unwrap()
            .history
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn cancellation_stops_before_the_next_round() {
        let cfg = small_config("");
        let ds = data(&cfg);
        let flag = Arc::new(AtomicBool::new(true));
        let err = train(
            &cfg,
            &ds,
            TrainOptions {
                cancel: Some(flag),
                ..Default::default()
            },
        )
        .err()
        .unwrap();
        assert!(matches!(err, Error::Cancelled(0)));
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let mut cfg = small_config("");
        cfg.batch_size = 64;
        let ds = make_synthetic_blocks(4, cfg.image_size, 0.1, 0);
        assert!(matches!(
            train(&cfg, &ds, TrainOptions::default()),
            Err(Error::InvalidArgument(_))
        ));
    }
}
