use super::layers::{Activation, Dense};
use super::params::{Bind, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Element, Var};

/// Three dense layers with leaky rectifiers between them and a single
/// linear output; used for both the critic and the discriminator.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    pub params: ParamStore<T>,
    layers: [Dense; 3],
    act: Activation,
}

impl<T: Element> Mlp<T> {
    pub fn new(inputs: usize, hidden: (usize, usize), smooth: bool, rng: &mut Rng) -> Self {
        let mut p = ParamStore::new();
        let l1 = Dense::new(&mut p, "fc1", inputs, hidden.0, rng);
        let l2 = Dense::new(&mut p, "fc2", hidden.0, hidden.1, rng);
        let l3 = Dense::new(&mut p, "fc3", hidden.1, 1, rng);
        Self {
            params: p,
            layers: [l1, l2, l3],
            act: Activation::leaky(smooth),
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    /// Sets the output layer to zero so that every output is exactly zero.
    pub fn zero_output_layer(&mut self) {
        for idx in [self.layers[2].weight, self.layers[2].bias] {
            self.params
                .value_mut(idx)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = T::zero());
        }
    }

    /// `[m, inputs] -> [m]`
    pub fn forward<'t>(&self, b: &Bind<'t, '_, T>, x: &Var<'t, T>) -> Var<'t, T> {
        let [l1, l2, l3] = &self.layers;
        let h = self.act.apply(&l1.forward(b, x));
        let h = self.act.apply(&l2.forward(b, &h));
        let m = x.shape()[0];
        l3.forward(b, &h).reshape(vec![m])
    }

    /// Output and its gradient with respect to the input rows, the latter
    /// built from tape operations so that it can itself be differentiated
    /// with respect to the parameters:
    /// `dy/dx = ((f'(h2) * w3^T) W2^T * f'(h1)) W1^T`.
    pub fn forward_with_input_grad<'t>(
        &self,
        b: &Bind<'t, '_, T>,
        x: &Var<'t, T>,
    ) -> (Var<'t, T>, Var<'t, T>) {
        let [l1, l2, l3] = &self.layers;
        let m = x.shape()[0];
        let h1 = l1.forward(b, x);
        let a1 = self.act.apply(&h1);
        let h2 = l2.forward(b, &a1);
        let a2 = self.act.apply(&h2);
        let y = l3.forward(b, &a2).reshape(vec![m]);
        let w3_row = b.var(l3.weight).reshape(vec![l3.inputs]).broadcast_rows(m);
        let g2 = self.act.derivative(&h2).mul(&w3_row);
        let g1 = g2.matmul_nt(&b.var(l2.weight)).mul(&self.act.derivative(&h1));
        let gx = g1.matmul_nt(&b.var(l1.weight));
        (y, gx)
    }
}
