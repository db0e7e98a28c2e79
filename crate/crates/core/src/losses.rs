//! Loss terms and the three combined objectives.
//!
//! Tape-level functions return [`Var`]s so that the trainer can
//! differentiate them; the `*_value` helpers evaluate the same formulas on
//! plain slices.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Bind, Mlp};
use crate::rng::Rng;
use crate::tensor::{Element, Tape, Tensor, Var};

/// Lower clamp applied to the second argument of the KL term.
pub const KL_FLOOR: f64 = 1e-12;

/// Binary cross-entropy of a discriminator that should call positive pairs
/// real and negative pairs fake:
/// `-mean(log S(pos)) - mean(log(1 - S(neg)))`, written with softplus.
pub fn mi_loss<'t, T: Element>(pos: &Var<'t, T>, neg: &Var<'t, T>) -> Result<Var<'t, T>> {
    let (p, n) = (pos.shape(), neg.shape());
    if p.iter().product::<usize>() == 0 || n.iter().product::<usize>() == 0 {
        return Err(Error::InvalidArgument("mi_loss needs non-empty logits".into()));
    }
    if p != n {
        return Err(Error::Shape(format!(
            "mi_loss: positive {p:?} vs negative {n:?} logits"
        )));
    }
    Ok(pos.neg().softplus().mean().add(&neg.softplus().mean()))
}

pub fn mi_loss_value(pos: &[f64], neg: &[f64]) -> Result<f64> {
    let tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::from_vec(vec![pos.len()], pos.to_vec()));
    let n = tape.constant(Tensor::from_vec(vec![neg.len()], neg.to_vec()));
    Ok(mi_loss(&p, &n)?.value().item())
}

/// Partner `j(i) = (i + offset) mod m` for every row, with the offset drawn
/// uniformly from `[1, m-1]` so that no row is paired with itself.
pub fn negative_pairing(m: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "negative pairing needs at least 2 rows, got {m}"
        )));
    }
    let offset = rng.random_range(1..m);
    Ok(pairing_from_offset(m, offset))
}

pub fn pairing_from_offset(m: usize, offset: usize) -> Vec<usize> {
    (0..m).map(|i| (i + offset) % m).collect()
}

/// Batch mean of `KL(p_i || q_i)` over row-stochastic `[m, K]` matrices.
/// Gradients flow into both arguments.
pub fn aug_kl<'t, T: Element>(p: &Var<'t, T>, q: &Var<'t, T>) -> Var<'t, T> {
    p.kl_rows(q, T::lit(KL_FLOOR)).mean()
}

/// `sum_k p_k log(p_k / max(q_k, floor))`, with `0 log 0 = 0`.
pub fn aug_kl_value(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "KL of vectors with lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(KL_FLOOR).ln()))
        .sum())
}

/// `-mean C(z)` over encoded latents.
pub fn adv_q_loss<'t, T: Element>(critic_on_encoded: &Var<'t, T>) -> Result<Var<'t, T>> {
    if critic_on_encoded.value().numel() == 0 {
        return Err(Error::InvalidArgument(
            "adv_q_loss needs at least one output".into(),
        ));
    }
    Ok(critic_on_encoded.mean().neg())
}

/// A scalar function of latent rows whose input gradient can be expressed
/// on the tape.
pub trait Critic<'t, T: Element> {
    /// `[m, d] -> [m]`
    fn score(&self, z: &Var<'t, T>) -> Var<'t, T>;
    /// Scores together with `d score_i / d z_i`, `[m, d]`, differentiable
    /// with respect to the critic's parameters.
    fn score_with_input_grad(&self, z: &Var<'t, T>) -> (Var<'t, T>, Var<'t, T>);
}

/// An [`Mlp`] bound to a tape.
pub struct BoundMlp<'a, 't, 'm, T: Element> {
    pub mlp: &'a Mlp<T>,
    pub bind: &'a Bind<'t, 'm, T>,
}

impl<'t, T: Element> Critic<'t, T> for BoundMlp<'_, 't, '_, T> {
    fn score(&self, z: &Var<'t, T>) -> Var<'t, T> {
        self.mlp.forward(self.bind, z)
    }

    fn score_with_input_grad(&self, z: &Var<'t, T>) -> (Var<'t, T>, Var<'t, T>) {
        self.mlp.forward_with_input_grad(self.bind, z)
    }
}

/// `lambda * mean_i (||grad C(z_hat_i)|| - 1)^2`.
pub fn gradient_penalty<'t, T: Element>(
    critic: &impl Critic<'t, T>,
    z_hat: &Var<'t, T>,
    lambda: f64,
) -> Result<Var<'t, T>> {
    let (_, g) = critic.score_with_input_grad(z_hat);
    let gv = g.value();
    if let Some(bad) = (0..gv.dim(0)).find(|&i| gv.row(i).iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!(
            "critic input gradient at interpolate {bad}"
        )));
    }
    Ok(g.row_norm()
        .add_scalar(-T::one())
        .square()
        .mean()
        .scale(T::lit(lambda)))
}

/// The critic objective and its parts.
pub struct CriticLoss<'t, T> {
    /// `mean C(z_enc) - mean C(z_prior) + gp`
    pub total: Var<'t, T>,
    pub gp: Var<'t, T>,
}

impl<T: Element> CriticLoss<'_, T> {
    /// The negated critic loss, the running estimate of the distance between
    /// encoded and prior latents.
    pub fn neg_critic_loss(&self) -> f64 {
        -self.total.value().item().as_f64()
    }
}

pub fn adv_c_loss<'t, T: Element>(
    critic: &impl Critic<'t, T>,
    z_encoded: &Var<'t, T>,
    z_prior: &Var<'t, T>,
    z_hat: &Var<'t, T>,
    lambda: f64,
) -> Result<CriticLoss<'t, T>> {
    let (e, p, h) = (z_encoded.shape(), z_prior.shape(), z_hat.shape());
    if e != p || e != h {
        return Err(Error::Shape(format!(
            "adv_c_loss: encoded {e:?}, prior {p:?}, interpolates {h:?}"
        )));
    }
    let gp = gradient_penalty(critic, z_hat, lambda)?;
    let total = critic
        .score(z_encoded)
        .mean()
        .sub(&critic.score(z_prior).mean())
        .add(&gp);
    Ok(CriticLoss { total, gp })
}

/// Loss weights of the three objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub beta_mi: f64,
    pub beta_aug: f64,
    pub beta_adv: f64,
}

/// Scalar loss values of one training round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_mi: f64,
    pub l_aug: f64,
    pub l_adv_q: f64,
    pub l_adv_c: f64,
    pub gp_term: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mi: f64,
    pub l_aug: f64,
    pub l_adv_q: f64,
    pub l_adv_c: f64,
    pub gp_term: f64,
    /// `beta_mi * l_mi + beta_aug * l_aug + beta_adv * l_adv_q`
    pub l_q_total: f64,
    /// `beta_mi * l_mi`
    pub l_d_total: f64,
    /// `beta_adv * l_adv_c`
    pub l_c_total: f64,
    pub neg_critic_loss: f64,
}

pub fn combine_objectives(parts: LossParts, w: LossWeights) -> Result<LossBreakdown> {
    let named = [
        ("l_mi", parts.l_mi),
        ("l_aug", parts.l_aug),
        ("l_adv_q", parts.l_adv_q),
        ("l_adv_c", parts.l_adv_c),
        ("gp_term", parts.gp_term),
        ("beta_mi", w.beta_mi),
        ("beta_aug", w.beta_aug),
        ("beta_adv", w.beta_adv),
    ];
    if let Some((name, v)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{name} = {v}")));
    }
    Ok(LossBreakdown {
        l_mi: parts.l_mi,
        l_aug: parts.l_aug,
        l_adv_q: parts.l_adv_q,
        l_adv_c: parts.l_adv_c,
        gp_term: parts.gp_term,
        l_q_total: w.beta_mi * parts.l_mi + w.beta_aug * parts.l_aug + w.beta_adv * parts.l_adv_q,
        l_d_total: w.beta_mi * parts.l_mi,
        l_c_total: w.beta_adv * parts.l_adv_c,
        neg_critic_loss: -parts.l_adv_c,
    })
}
