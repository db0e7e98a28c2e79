use crate::config::ExperimentConfig;
use crate::nets::{Models, ParamStore};
use crate::tensor::{Element, Tensor};

pub const ADAM_EPS: f64 = 1e-8;

/// Adam over the trainable entries of one [`ParamStore`], with bias
/// correction. Parameters that received no gradient are left untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    /// First and second moments per parameter index.
    pub moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Element> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let moments = store
            .iter()
            .map(|p| {
                p.trainable.then(|| {
                    (
                        Tensor::zeros(p.value.shape().to_vec()),
                        Tensor::zeros(p.value.shape().to_vec()),
                    )
                })
            })
            .collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: ADAM_EPS,
            t: 0,
            moments,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let step = T::lit(self.lr / (1.0 - self.beta1.powi(t)));
        let bc2 = T::lit(1.0 - self.beta2.powi(t));
        let eps = T::lit(self.eps);
        for (i, g) in grads.iter().enumerate() {
            let (Some(g), Some((m, v))) = (g, self.moments[i].as_mut()) else {
                continue;
            };
            let (md, vd) = (m.data_mut(), v.data_mut());
            let w = store.value_mut(i).data_mut();
            for (((wj, mj), vj), &gj) in w.iter_mut().zip(md).zip(vd).zip(g.data()) {
                *mj = b1 * *mj + c1 * gj;
                *vj = b2 * *vj + c2 * gj * gj;
                *wj -= step * *mj / ((*vj / bc2).sqrt() + eps);
            }
        }
    }
}

/// One optimizer per network, sharing the configured hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers<T> {
    pub encoder: Adam<T>,
    pub discriminator: Adam<T>,
    pub critic: Adam<T>,
}

impl<T: Element> Optimizers<T> {
    pub fn new(models: &Models<T>, cfg: &ExperimentConfig) -> Self {
        let make = |s: &ParamStore<T>| Adam::new(s, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2);
        Self {
            encoder: make(&models.encoder.params),
            discriminator: make(&models.discriminator.params),
            critic: make(&models.critic.params),
        }
    }

    pub fn by_tag(&self) -> [(&'static str, &Adam<T>); 3] {
        [
            ("encoder", &self.encoder),
            ("discriminator", &self.discriminator),
            ("critic", &self.critic),
        ]
    }

    pub fn by_tag_mut(&mut self) -> [(&'static str, &mut Adam<T>); 3] {
        [
            ("encoder", &mut self.encoder),
            ("discriminator", &mut self.discriminator),
            ("critic", &mut self.critic),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_each_weight_by_lr_against_the_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]), true);
        store.add("frozen", Tensor::ones(vec![1]), false);
        let mut opt = Adam::new(&store, 0.1, 0.5, 0.9);
        let g = Tensor::from_vec(vec![3], vec![0.5, -2.0, 0.0]);
        opt.step(&mut store, &[Some(g), Some(Tensor::ones(vec![1]))]);
        let w = store.get(0).value.data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 2.1).abs() < 1e-6);
        assert_eq!(w[2], 3.0);
        assert_eq!(store.get(1).value.data(), &[1.0]);
    }

    #[test]
    fn matches_reference_recursion_over_several_steps() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::from_vec(vec![1], vec![0.0]), true);
        let mut opt = Adam::new(&store, 0.01, 0.5, 0.9);
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let g = (t as f64).sin();
            opt.step(&mut store, &[Some(Tensor::from_vec(vec![1], vec![g]))]);
            m = 0.5 * m + 0.5 * g;
            v = 0.9 * v + 0.1 * g * g;
            let mh = m / (1.0 - 0.5f64.powi(t));
            let vh = v / (1.0 - 0.9f64.powi(t));
            w -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((store.get(0).value.data()[0] - w).abs() < 1e-12);
    }
}
