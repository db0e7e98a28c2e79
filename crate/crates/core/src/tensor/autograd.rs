use std::cell::RefCell;

use super::kernels::{self, ConvGeom};
use super::{Element, Tensor};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Records operations in evaluation order so that gradients can be
/// propagated back in a single reverse sweep. One tape per step.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that gradients flow into.
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push<F>(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: F) -> Var<'_, T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

fn same_tape<T>(a: &Var<'_, T>, b: &Var<'_, T>) {
    assert!(std::ptr::eq(a.tape, b.tape), "vars from different tapes");
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant(self.value())
    }

    /// Reverse sweep from this scalar.
    pub fn backward(&self) -> Gradients<T> {
        let nodes = self.tape.nodes.borrow();
        assert_eq!(
            nodes[self.id].value.numel(),
            1,
            "backward() needs a scalar, got {:?}",
            nodes[self.id].value.shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[self.id] = Some(Tensor::ones(nodes[self.id].value.shape().to_vec()));
        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&grad, &needs);
            for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape());
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => grads[p] = Some(g),
                }
            }
        }
        Gradients { grads }
    }

    fn unary_op<F>(&self, value: Tensor<T>, backward: F) -> Var<'t, T>
    where
        F: Fn(&Tensor<T>) -> Tensor<T> + 'static,
    {
        self.tape
            .push(value, &[*self], move |g, _| vec![Some(backward(g))])
    }

    /// Pointwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn pointwise(&self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'t, T> {
        let x = self.value();
        let y = x.map(f);
        let y2 = y.clone();
        self.unary_op(y, move |g| {
            let mut out = g.clone();
            for ((o, &xi), &yi) in out.data_mut().iter_mut().zip(x.data()).zip(y2.data()) {
                *o *= df(xi, yi);
            }
            out
        })
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.leaky_relu(T::zero())
    }

    pub fn leaky_relu(&self, slope: T) -> Var<'t, T> {
        self.pointwise(
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    /// `slope·x + (1-slope)·softplus(x)`: a smooth stand-in for leaky ReLU.
    pub fn smooth_leaky_relu(&self, slope: T) -> Var<'t, T> {
        let rest = T::one() - slope;
        self.pointwise(
            move |x| slope * x + rest * softplus(x),
            move |x, _| slope + rest * sigmoid(x),
        )
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.pointwise(sigmoid, |_, y| y * (T::one() - y))
    }

    /// `log(1 + e^x)` evaluated without overflow.
    pub fn softplus(&self) -> Var<'t, T> {
        self.pointwise(softplus, |x, _| sigmoid(x))
    }

    pub fn square(&self) -> Var<'t, T> {
        self.pointwise(|x| x * x, |x, _| x + x)
    }

    pub fn scale(&self, s: T) -> Var<'t, T> {
        self.pointwise(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: T) -> Var<'t, T> {
        self.pointwise(move |x| x + s, |_, _| T::one())
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    fn binary(
        &self,
        other: &Var<'t, T>,
        f: impl Fn(T, T) -> T,
        grads: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'t, T> {
        same_tape(self, other);
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "elementwise op shape mismatch");
        let y = a.zip_map(&b, f);
        self.tape
            .push(y, &[*self, *other], move |g, needs| grads(g, &a, &b, needs))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Var<'t, T> {
        self.binary(
            other,
            |a, b| a + b,
            |g, _, _, _| vec![Some(g.clone()), Some(g.clone())],
        )
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Var<'t, T> {
        self.binary(
            other,
            |a, b| a - b,
            |g, _, _, needs| vec![Some(g.clone()), needs[1].then(|| g.map(|v| -v))],
        )
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Var<'t, T> {
        self.binary(
            other,
            |a, b| a * b,
            |g, a, b, needs| {
                vec![
                    needs[0].then(|| g.zip_map(b, |g, b| g * b)),
                    needs[1].then(|| g.zip_map(a, |g, a| g * a)),
                ]
            },
        )
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Var<'t, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = x.reshape(shape);
        self.unary_op(y, move |g| g.reshape(old.clone()))
    }

    /// `[n, ...] -> [n, prod(...)]`
    pub fn flatten(&self) -> Var<'t, T> {
        let shape = self.shape();
        let rest: usize = shape[1..].iter().product();
        self.reshape(vec![shape[0], rest])
    }

    pub fn sum(&self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.unary_op(Tensor::scalar(x.sum()), move |g| {
            Tensor::full(shape.clone(), g.item())
        })
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = T::from_usize(self.value().numel()).unwrap();
        self.sum().scale(T::one() / n)
    }

    /// `[m, n] -> [m]`
    pub fn sum_rows(&self) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(x.rank(), 2, "sum_rows expects a matrix");
        let (m, n) = (x.dim(0), x.dim(1));
        let y: Vec<T> = (0..m).map(|i| x.row(i).iter().copied().sum()).collect();
        self.unary_op(Tensor::from_vec(vec![m], y), move |g| {
            let mut d = Vec::with_capacity(m * n);
            for &gi in g.data() {
                d.extend(std::iter::repeat_n(gi, n));
            }
            Tensor::from_vec(vec![m, n], d)
        })
    }

    /// Euclidean norm of each row, `[m, n] -> [m]`. The gradient at a zero
    /// row is taken to be zero.
    pub fn row_norm(&self) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(x.rank(), 2, "row_norm expects a matrix");
        let (m, n) = (x.dim(0), x.dim(1));
        let norms: Vec<T> = (0..m)
            .map(|i| x.row(i).iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let y = Tensor::from_vec(vec![m], norms.clone());
        self.unary_op(y, move |g| {
            let mut d = vec![T::zero(); m * n];
            for i in 0..m {
                if norms[i] > T::zero() {
                    let s = g.data()[i] / norms[i];
                    for (dj, &xj) in d[i * n..(i + 1) * n].iter_mut().zip(x.row(i)) {
                        *dj = s * xj;
                    }
                }
            }
            Tensor::from_vec(vec![m, n], d)
        })
    }

    /// `[n] -> [m, n]` by repeating the vector `m` times.
    pub fn broadcast_rows(&self, m: usize) -> Var<'t, T> {
        let v = self.value();
        let n = v.numel();
        let old = v.shape().to_vec();
        let mut d = Vec::with_capacity(m * n);
        for _ in 0..m {
            d.extend_from_slice(v.data());
        }
        self.unary_op(Tensor::from_vec(vec![m, n], d), move |g| {
            let mut acc = vec![T::zero(); n];
            for row in g.data().chunks_exact(n) {
                for (a, &b) in acc.iter_mut().zip(row) {
                    *a += b;
                }
            }
            Tensor::from_vec(old.clone(), acc)
        })
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&self, other: &Var<'t, T>) -> Var<'t, T> {
        self.matmul_impl(other, false)
    }

    /// `[m, k] x [n, k]^T -> [m, n]`
    pub fn matmul_nt(&self, other: &Var<'t, T>) -> Var<'t, T> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: &Var<'t, T>, b_t: bool) -> Var<'t, T> {
        same_tape(self, other);
        let a = self.value();
        let b = other.value();
        assert!(a.rank() == 2 && b.rank() == 2, "matmul expects matrices");
        let (m, k) = (a.dim(0), a.dim(1));
        let n = if b_t { b.dim(0) } else { b.dim(1) };
        let kb = if b_t { b.dim(1) } else { b.dim(0) };
        assert_eq!(k, kb, "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
        let mut y = vec![T::zero(); m * n];
        kernels::matmul(m, n, k, &mut y, false, a.data(), false, b.data(), b_t);
        self.tape.push(
            Tensor::from_vec(vec![m, n], y),
            &[*self, *other],
            move |g, needs| {
                let da = needs[0].then(|| {
                    // dA = dY · op(B)^T
                    let mut d = vec![T::zero(); m * k];
                    kernels::matmul(m, k, n, &mut d, false, g.data(), false, b.data(), !b_t);
                    Tensor::from_vec(vec![m, k], d)
                });
                let db = needs[1].then(|| {
                    let mut d = vec![T::zero(); k * n];
                    if b_t {
                        // dB[n,k] = dY^T · A
                        kernels::matmul(n, k, m, &mut d, false, g.data(), true, a.data(), false);
                        Tensor::from_vec(vec![n, k], d)
                    } else {
                        kernels::matmul(k, n, m, &mut d, false, a.data(), true, g.data(), false);
                        Tensor::from_vec(vec![k, n], d)
                    }
                });
                vec![da, db]
            },
        )
    }

    /// Affine map `x·W + b` with `x: [m, k]`, `W: [k, n]`, `b: [n]`.
    pub fn linear(&self, weight: &Var<'t, T>, bias: &Var<'t, T>) -> Var<'t, T> {
        same_tape(self, weight);
        same_tape(self, bias);
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        assert!(x.rank() == 2 && w.rank() == 2, "linear expects matrices");
        let (m, k, n) = (x.dim(0), x.dim(1), w.dim(1));
        assert_eq!(k, w.dim(0), "linear: input width {k} vs weight {:?}", w.shape());
        assert_eq!(b.numel(), n, "linear: bias length");
        let mut y = Vec::with_capacity(m * n);
        for _ in 0..m {
            y.extend_from_slice(b.data());
        }
        kernels::matmul(m, n, k, &mut y, true, x.data(), false, w.data(), false);
        let b_shape = b.shape().to_vec();
        self.tape.push(
            Tensor::from_vec(vec![m, n], y),
            &[*self, *weight, *bias],
            move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut d = vec![T::zero(); m * k];
                    kernels::matmul(m, k, n, &mut d, false, g.data(), false, w.data(), true);
                    Tensor::from_vec(vec![m, k], d)
                });
                let dw = needs[1].then(|| {
                    let mut d = vec![T::zero(); k * n];
                    kernels::matmul(k, n, m, &mut d, false, x.data(), true, g.data(), false);
                    Tensor::from_vec(vec![k, n], d)
                });
                let db = needs[2].then(|| {
                    let mut d = vec![T::zero(); n];
                    for row in g.data().chunks_exact(n) {
                        for (a, &v) in d.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::from_vec(b_shape.clone(), d)
                });
                vec![dx, dw, db]
            },
        )
    }

    /// 2-D convolution, `x: [n, c, h, w]`, `weight: [o, c, kh, kw]`, `bias: [o]`.
    pub fn conv2d(&self, weight: &Var<'t, T>, bias: &Var<'t, T>, stride: usize, pad: usize) -> Var<'t, T> {
        same_tape(self, weight);
        same_tape(self, bias);
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        assert_eq!(x.rank(), 4, "conv2d input must be NCHW, got {:?}", x.shape());
        assert_eq!(w.rank(), 4, "conv2d weight must be OCKK");
        assert_eq!(x.dim(1), w.dim(1), "conv2d channel mismatch");
        let geom = ConvGeom {
            n: x.dim(0),
            c: x.dim(1),
            h: x.dim(2),
            w: x.dim(3),
            kh: w.dim(2),
            kw: w.dim(3),
            stride,
            pad,
        };
        let o = w.dim(0);
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let p = oh * ow;
        let ncols = geom.cols();
        let patch = geom.patch();
        let cols = kernels::im2col(x.data(), &geom);
        let mut y_cm = vec![T::zero(); o * ncols];
        kernels::matmul(o, ncols, patch, &mut y_cm, false, w.data(), false, &cols, false);
        let mut y = kernels::swap_batch_channel(&y_cm, o, geom.n, p);
        drop(y_cm);
        for (i, v) in y.iter_mut().enumerate() {
            *v += b.data()[(i / p) % o];
        }
        let w_shape = w.shape().to_vec();
        self.tape.push(
            Tensor::from_vec(vec![geom.n, o, oh, ow], y),
            &[*self, *weight, *bias],
            move |g, needs| {
                let g_cm = kernels::swap_batch_channel(g.data(), geom.n, o, p);
                let dx = needs[0].then(|| {
                    let mut dcols = vec![T::zero(); patch * ncols];
                    kernels::matmul(patch, ncols, o, &mut dcols, false, w.data(), true, &g_cm, false);
                    Tensor::from_vec(
                        vec![geom.n, geom.c, geom.h, geom.w],
                        kernels::col2im(&dcols, &geom),
                    )
                });
                let dw = needs[1].then(|| {
                    let mut d = vec![T::zero(); o * patch];
                    kernels::matmul(o, patch, ncols, &mut d, false, &g_cm, false, &cols, true);
                    Tensor::from_vec(w_shape.clone(), d)
                });
                let db = needs[2].then(|| {
                    let d: Vec<T> = g_cm
                        .chunks_exact(ncols)
                        .map(|r| r.iter().copied().sum())
                        .collect();
                    Tensor::from_vec(vec![o], d)
                });
                vec![dx, dw, db]
            },
        )
    }

    /// Batch normalization over axis 1 of `[n, c, ...]`. In training mode the
    /// batch statistics are used and returned as `(mean, unbiased var)`; in
    /// evaluation mode `running` supplies them.
    pub fn batch_norm(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        running: Option<(&Tensor<T>, &Tensor<T>)>,
        eps: T,
    ) -> (Var<'t, T>, Option<(Tensor<T>, Tensor<T>)>) {
        same_tape(self, gamma);
        same_tape(self, beta);
        let x = self.value();
        let gm = gamma.value();
        let bt = beta.value();
        let shape = x.shape().to_vec();
        assert!(shape.len() >= 2, "batch_norm needs [n, c, ...]");
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        assert_eq!(gm.numel(), c, "batch_norm gamma length");
        let count = n * s;
        let xd = x.data();
        let idx = move |i: usize, ch: usize, j: usize| (i * c + ch) * s + j;

        let (mean, var, batch_stats) = match running {
            Some((rm, rv)) => (rm.data().to_vec(), rv.data().to_vec(), None),
            None => {
                assert!(
                    count > 1,
                    "batch_norm in training mode needs more than one value per channel"
                );
                let cnt = T::from_usize(count).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for i in 0..n {
                        for j in 0..s {
                            acc += xd[idx(i, ch, j)];
                        }
                    }
                    let mu = acc / cnt;
                    let mut sq = T::zero();
                    for i in 0..n {
                        for j in 0..s {
                            let d = xd[idx(i, ch, j)] - mu;
                            sq += d * d;
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq / cnt;
                }
                let unbiased: Vec<T> = var.iter().map(|&v| v * cnt / (cnt - T::one())).collect();
                let stats = (
                    Tensor::from_vec(vec![c], mean.clone()),
                    Tensor::from_vec(vec![c], unbiased),
                );
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut y = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                for j in 0..s {
                    let k = idx(i, ch, j);
                    xhat[k] = (xd[k] - mean[ch]) * inv_std[ch];
                    y[k] = gm.data()[ch] * xhat[k] + bt.data()[ch];
                }
            }
        }
        let training = batch_stats.is_some();
        let out = self.tape.push(
            Tensor::from_vec(shape.clone(), y),
            &[*self, *gamma, *beta],
            move |g, needs| {
                let gd = g.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        for j in 0..s {
                            let k = idx(i, ch, j);
                            dgamma[ch] += gd[k] * xhat[k];
                            dbeta[ch] += gd[k];
                        }
                    }
                }
                let dx = needs[0].then(|| {
                    let mut dx = vec![T::zero(); gd.len()];
                    let cnt = T::from_usize(count).unwrap();
                    for ch in 0..c {
                        let gch = gm.data()[ch];
                        for i in 0..n {
                            for j in 0..s {
                                let k = idx(i, ch, j);
                                dx[k] = if training {
                                    // dxhat = g·gamma; dx = inv_std/M · (M·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                                    gch * inv_std[ch] / cnt * (cnt * gd[k] - dbeta[ch] - xhat[k] * dgamma[ch])
                                } else {
                                    gch * inv_std[ch] * gd[k]
                                };
                            }
                        }
                    }
                    Tensor::from_vec(shape.clone(), dx)
                });
                vec![
                    dx,
                    needs[1].then(|| Tensor::from_vec(vec![c], dgamma)),
                    needs[2].then(|| Tensor::from_vec(vec![c], dbeta)),
                ]
            },
        );
        (out, batch_stats)
    }

    /// 2x2 average pooling with stride 2 on `[n, c, h, w]`.
    pub fn avg_pool2(&self) -> Var<'t, T> {
        let x = self.value();
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4);
        assert!(
            s[2].is_multiple_of(2) && s[3].is_multiple_of(2),
            "avg_pool2 needs even spatial dims, got {s:?}"
        );
        let y = kernels::avg_pool2(x.data(), s[0], s[1], s[2], s[3]);
        self.unary_op(
            Tensor::from_vec(vec![s[0], s[1], s[2] / 2, s[3] / 2], y),
            move |g| {
                Tensor::from_vec(
                    s.clone(),
                    kernels::avg_pool2_backward(g.data(), s[0], s[1], s[2], s[3]),
                )
            },
        )
    }

    /// Nearest-neighbour 2x upsampling on `[n, c, h, w]`.
    pub fn upsample2(&self) -> Var<'t, T> {
        let x = self.value();
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4);
        let y = kernels::upsample2(x.data(), s[0], s[1], s[2], s[3]);
        self.unary_op(
            Tensor::from_vec(vec![s[0], s[1], s[2] * 2, s[3] * 2], y),
            move |g| {
                Tensor::from_vec(
                    s.clone(),
                    kernels::upsample2_backward(g.data(), s[0], s[1], s[2], s[3]),
                )
            },
        )
    }

    /// Mean over the spatial dims, `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&self) -> Var<'t, T> {
        let x = self.value();
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4);
        let area = s[2] * s[3];
        let inv = T::one() / T::from_usize(area).unwrap();
        let y: Vec<T> = x
            .data()
            .chunks_exact(area)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        self.unary_op(Tensor::from_vec(vec![s[0], s[1]], y), move |g| {
            let mut d = Vec::with_capacity(g.numel() * area);
            for &gi in g.data() {
                d.extend(std::iter::repeat_n(gi * inv, area));
            }
            Tensor::from_vec(s.clone(), d)
        })
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&self) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(x.rank(), 2, "softmax expects a matrix");
        let (m, n) = (x.dim(0), x.dim(1));
        let mut y = vec![T::zero(); m * n];
        for i in 0..m {
            let row = x.row(i);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let out = &mut y[i * n..(i + 1) * n];
            let mut total = T::zero();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mx).exp();
                total += *o;
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        let yt = Tensor::from_vec(vec![m, n], y);
        let y2 = yt.clone();
        self.unary_op(yt, move |g| {
            let mut d = vec![T::zero(); m * n];
            for i in 0..m {
                let (yi, gi) = (y2.row(i), g.row(i));
                let dot: T = yi.iter().zip(gi).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    d[i * n + j] = yi[j] * (gi[j] - dot);
                }
            }
            Tensor::from_vec(vec![m, n], d)
        })
    }

    /// Per-row `KL(p_i || q_i)` for two row-stochastic matrices, `[m, k] -> [m]`.
    /// Terms with `p = 0` contribute zero; `q` is clamped below at `floor`.
    pub fn kl_rows(&self, q: &Var<'t, T>, floor: T) -> Var<'t, T> {
        same_tape(self, q);
        let p = self.value();
        let qv = q.value();
        assert_eq!(p.shape(), qv.shape(), "kl_rows shape mismatch");
        assert_eq!(p.rank(), 2);
        let (m, k) = (p.dim(0), p.dim(1));
        let kl: Vec<T> = (0..m)
            .map(|i| {
                p.row(i)
                    .iter()
                    .zip(qv.row(i))
                    .map(|(&pi, &qi)| {
                        if pi > T::zero() {
                            pi * (pi.ln() - qi.max(floor).ln())
                        } else {
                            T::zero()
                        }
                    })
                    .sum()
            })
            .collect();
        self.tape
            .push(Tensor::from_vec(vec![m], kl), &[*self, *q], move |g, needs| {
                let dp = needs[0].then(|| {
                    let mut d = vec![T::zero(); m * k];
                    for i in 0..m {
                        for j in 0..k {
                            let (pi, qi) = (p.row(i)[j], qv.row(i)[j]);
                            d[i * k + j] = g.data()[i] * (pi.max(floor).ln() - qi.max(floor).ln() + T::one());
                        }
                    }
                    Tensor::from_vec(vec![m, k], d)
                });
                let dq = needs[1].then(|| {
                    let mut d = vec![T::zero(); m * k];
                    for i in 0..m {
                        for j in 0..k {
                            let (pi, qi) = (p.row(i)[j], qv.row(i)[j]);
                            if qi > floor {
                                d[i * k + j] = -g.data()[i] * pi / qi;
                            }
                        }
                    }
                    Tensor::from_vec(vec![m, k], d)
                });
                vec![dp, dq]
            })
    }

    /// Concatenates matrices along columns.
    pub fn cat_cols(parts: &[Var<'t, T>]) -> Var<'t, T> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let m = values[0].dim(0);
        let widths: Vec<usize> = values
            .iter()
            .map(|v| {
                assert_eq!(v.rank(), 2, "cat_cols expects matrices");
                assert_eq!(v.dim(0), m, "cat_cols row count mismatch");
                v.dim(1)
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut y = Vec::with_capacity(m * total);
        for i in 0..m {
            for v in &values {
                y.extend_from_slice(v.row(i));
            }
        }
        for p in parts {
            same_tape(&parts[0], p);
        }
        tape.push(Tensor::from_vec(vec![m, total], y), parts, move |g, needs| {
            let mut out = Vec::with_capacity(widths.len());
            let mut offset = 0;
            for (&w, &need) in widths.iter().zip(needs) {
                out.push(need.then(|| {
                    let mut d = Vec::with_capacity(m * w);
                    for i in 0..m {
                        d.extend_from_slice(&g.row(i)[offset..offset + w]);
                    }
                    Tensor::from_vec(vec![m, w], d)
                }));
                offset += w;
            }
            out
        })
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(x.rank(), 2);
        let (m, n) = (x.dim(0), x.dim(1));
        assert!(start + len <= n, "narrow_cols out of range");
        let mut y = Vec::with_capacity(m * len);
        for i in 0..m {
            y.extend_from_slice(&x.row(i)[start..start + len]);
        }
        self.unary_op(Tensor::from_vec(vec![m, len], y), move |g| {
            let mut d = vec![T::zero(); m * n];
            for i in 0..m {
                d[i * n + start..i * n + start + len].copy_from_slice(g.row(i));
            }
            Tensor::from_vec(vec![m, n], d)
        })
    }

    /// Rows `idx` (repeats allowed) of a tensor viewed as `[dim0, rest]`.
    pub fn gather_rows(&self, idx: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let width = x.numel() / shape[0];
        let y = x.select_rows(idx);
        let idx = idx.to_vec();
        self.unary_op(y, move |g| {
            let mut d = vec![T::zero(); shape.iter().product()];
            for (r, &i) in idx.iter().enumerate() {
                for (a, &b) in d[i * width..(i + 1) * width].iter_mut().zip(g.row(r)) {
                    *a += b;
                }
            }
            Tensor::from_vec(shape.clone(), d)
        })
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.numel())
            .map(|i| {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn check(x: Tensor<f64>, build: &dyn for<'t> Fn(Var<'t, f64>) -> Var<'t, f64>) {
        let tape = Tape::new();
        let v = tape.variable(x.clone());
        let out = build(v);
        let grads = out.backward();
        let analytic = grads.get(v).unwrap().to_f64_vec();
        let numeric = numeric_grad(&x, &|xx| {
            let t = Tape::new();
            build(t.constant(xx.clone())).value().item()
        });
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let scale = a.abs().max(n.abs()).max(1e-6);
            assert!(
                (a - n).abs() / scale < 1e-5,
                "entry {i}: analytic {a} numeric {n}"
            );
        }
    }

    fn ramp(shape: &[usize], a: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(
            shape.to_vec(),
            (0..n).map(|i| ((i as f64 + 1.0) * a).sin()).collect(),
        )
    }

    #[test]
    fn pointwise_and_reduction_grads() {
        check(ramp(&[3, 4], 0.7), &|v| v.smooth_leaky_relu(0.2).square().mean());
        check(ramp(&[3, 4], 0.9), &|v| v.softplus().sum());
        check(ramp(&[3, 4], 1.1), &|v| v.sigmoid().mul(&v).sum());
        check(ramp(&[3, 4], 0.3), &|v| v.row_norm().sum());
        check(ramp(&[3, 4], 0.5), &|v| {
            v.softmax().narrow_cols(1, 2).square().sum()
        });
    }

    #[test]
    fn matmul_linear_grads() {
        let w = ramp(&[4, 5], 0.37);
        let w2 = w.clone();
        check(ramp(&[3, 4], 0.7), &move |v| {
            let wv = v.tape.constant(w2.clone());
            v.matmul(&wv).square().sum()
        });
        let b = ramp(&[6, 4], 0.21);
        check(ramp(&[3, 4], 0.7), &move |v| {
            let bv = v.tape.constant(b.clone());
            v.matmul_nt(&bv).square().sum()
        });
        let x = ramp(&[3, 4], 0.7);
        check(w, &move |wv| {
            let xv = wv.tape.constant(x.clone());
            let bias = wv.tape.constant(ramp(&[5], 0.4));
            xv.linear(&wv, &bias).leaky_relu(0.2).sum()
        });
    }

    #[test]
    fn conv_and_pool_grads() {
        let w = ramp(&[3, 2, 3, 3], 0.19);
        let x = ramp(&[2, 2, 6, 6], 0.31);
        let w2 = w.clone();
        check(x.clone(), &move |v| {
            let wv = v.tape.constant(w2.clone());
            let b = v.tape.constant(ramp(&[3], 0.5));
            v.conv2d(&wv, &b, 1, 1).avg_pool2().square().sum()
        });
        check(w, &move |wv| {
            let xv = wv.tape.constant(x.clone());
            let b = wv.tape.constant(ramp(&[3], 0.5));
            xv.conv2d(&wv, &b, 2, 1)
                .upsample2()
                .global_avg_pool()
                .square()
                .sum()
        });
    }

    #[test]
    fn batch_norm_grads_train_and_eval() {
        let x = ramp(&[4, 3, 2, 2], 0.43);
        check(x.clone(), &|v| {
            let g = v.tape.constant(ramp(&[3], 0.8));
            let b = v.tape.constant(ramp(&[3], 0.2));
            let (y, _) = v.batch_norm(&g, &b, None, 1e-5);
            y.mul(&y.sigmoid()).sum()
        });
        check(ramp(&[3], 0.8), &move |g| {
            let xv = g.tape.constant(x.clone());
            let b = g.tape.constant(ramp(&[3], 0.2));
            let rm = ramp(&[3], 0.1);
            let rv = ramp(&[3], 0.3).map(|v| v.abs() + 0.5);
            let (y, stats) = xv.batch_norm(&g, &b, Some((&rm, &rv)), 1e-5);
            assert!(stats.is_none());
            y.square().sum()
        });
    }

    #[test]
    fn structural_op_grads() {
        let q = ramp(&[3, 4], 0.9).map(|v| v.abs() + 0.1);
        check(ramp(&[3, 4], 0.6), &move |v| {
            let p = v.softmax();
            let qv = v.tape.constant(q.clone());
            let qs = qv.softmax();
            p.kl_rows(&qs, 1e-12).sum()
        });
        let fixed = ramp(&[3, 4], 0.4);
        check(ramp(&[3, 4], 0.6), &move |v| {
            let qs = v.scale(0.5).softmax();
            let p = v.tape.constant(fixed.clone()).softmax();
            p.kl_rows(&qs, 1e-12).sum()
        });
        check(ramp(&[3, 2], 0.6), &|v| {
            let c = Var::cat_cols(&[v, v.square()]);
            c.gather_rows(&[2, 0, 0]).sum_rows().square().sum()
        });
        check(ramp(&[5], 0.6), &|v| v.broadcast_rows(3).square().sum());
        check(ramp(&[2, 3, 2], 0.6), &|v| v.flatten().square().sum());
    }

    #[test]
    fn constants_record_no_backward() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::ones(vec![2, 2]));
        let b = a.square().sum();
        assert!(!b.requires_grad());
        let v = tape.variable(Tensor::ones(vec![2, 2]));
        let c = v.add(&a).sum();
        let g = c.backward();
        assert_eq!(g.get(v).unwrap().data(), &[1.0; 4]);
        assert!(g.get(a).is_none());
    }

    #[test]
    fn row_norm_zero_row_has_zero_grad() {
        let tape = Tape::<f64>::new();
        let v = tape.variable(Tensor::zeros(vec![2, 3]));
        let g = v.row_norm().sum().backward();
        assert!(g.get(v).unwrap().data().iter().all(|&x| x == 0.0));
    }
}
