//! Reverse-mode differentiation over [`FeatureGrid`] values.
//!
//! A [`Tape`] records every op in execution order. [`Tape::backward`] walks the
//! record in reverse, calling each kernel's vector-Jacobian product. Nodes are
//! addressed by [`Var`] handles that are only meaningful for the tape that
//! issued them.
//!
//! Leaves are either trainable ([`Tape::leaf`]) or constant
//! ([`Tape::constant`]); gradients are only computed and stored for nodes that
//! depend on at least one trainable leaf.

use crate::error::{shape_err, Error, Result};
use crate::grid::{
    self, activate, activate_backward, bilinear_warp, bilinear_warp_backward, conv2d,
    conv2d_backward, conv_transpose2d, conv_transpose2d_backward, group_norm, group_norm_backward,
    Activation, FeatureGrid, GroupNormCache, Real,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        cache: GroupNormCache<T>,
    },
    Activate {
        x: Var,
        kind: Activation,
    },
    Warp {
        source: Var,
        flow: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale {
        x: Var,
        factor: T,
    },
    Abs(Var),
    Square(Var),
    BceWithLogits {
        logits: Var,
        target: Var,
    },
    Sum(Var),
}

struct Node<T> {
    value: FeatureGrid<T>,
    op: Op<T>,
    needs_grad: bool,
    grad: Option<FeatureGrid<T>>,
}

/// Single-owner record of one forward pass.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: FeatureGrid<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf: receives a gradient on [`Tape::backward`].
    pub fn leaf(&mut self, value: FeatureGrid<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, value: FeatureGrid<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &FeatureGrid<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&FeatureGrid<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Clear every gradient slot.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let value = conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride)?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, stride }, needs))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let value =
            conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride)?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, stride }, needs))
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
        let (value, cache) = group_norm(self.value(x), groups, self.value(gamma), self.value(beta))?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                cache,
            },
            needs,
        ))
    }

    pub fn activate(&mut self, x: Var, kind: Activation) -> Var {
        let value = activate(self.value(x), kind);
        let needs = self.needs(x);
        self.push(value, Op::Activate { x, kind }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Tanh)
    }

    pub fn warp(&mut self, source: Var, flow: Var) -> Result<Var> {
        let value = bilinear_warp(self.value(source), self.value(flow))?;
        let needs = self.needs(source) || self.needs(flow);
        Ok(self.push(value, Op::Warp { source, flow }, needs))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let value = {
            let grids: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            grid::concat_channels(&grids)?
        };
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Channels `[start, start + len)`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).select_channels(start, len)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Slice { x, start }, needs))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{name}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let value = self.value(a).zip_map(self.value(b), f)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, factor }, needs)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        let needs = self.needs(x);
        self.push(value, Op::Abs(x), needs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let needs = self.needs(x);
        self.push(value, Op::Square(x), needs)
    }

    /// Elementwise numerically stable binary cross-entropy on logits:
    /// `max(l, 0) - l * t + ln(1 + exp(-|l|))`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        self.binary(
            logits,
            target,
            "bce_with_logits",
            |l, t| l.max(T::zero()) - l * t + (-l.abs()).exp().ln_1p(),
            Op::BceWithLogits { logits, target },
        )
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = FeatureGrid::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(value, Op::Sum(x), needs)
    }

    /// Reverse pass from a scalar root.
    ///
    /// Gradients accumulate into the per-node slots, so calling this twice
    /// without [`Tape::zero_grad`] doubles every gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut pending: Vec<Option<FeatureGrid<T>>> = Vec::new();
        pending.resize_with(loss.0 + 1, || None);
        pending[loss.0] = Some(FeatureGrid::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else {
                continue;
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut pending)?;
            let slot = &mut self.nodes[i].grad;
            match slot {
                Some(acc) => acc.add_assign(&g),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(
        &self,
        i: usize,
        g: &FeatureGrid<T>,
        pending: &mut [Option<FeatureGrid<T>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let mut send = |v: Var, contribution: FeatureGrid<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut pending[v.0] {
                Some(acc) => acc.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride } => {
                let grads = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    b.is_some(),
                    *stride,
                    g,
                    self.needs(*x),
                )?;
                if let Some(dx) = grads.input {
                    send(*x, dx);
                }
                send(*w, grads.weight);
                if let (Some(b), Some(db)) = (b, grads.bias) {
                    send(*b, db.reshape(self.shape(*b))?);
                }
            }
            Op::ConvTranspose2d { x, w, b, stride } => {
                let grads = conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    b.is_some(),
                    *stride,
                    g,
                    self.needs(*x),
                )?;
                if let Some(dx) = grads.input {
                    send(*x, dx);
                }
                send(*w, grads.weight);
                if let (Some(b), Some(db)) = (b, grads.bias) {
                    send(*b, db.reshape(self.shape(*b))?);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                cache,
            } => {
                let grads = group_norm_backward(g, cache, *groups, self.value(*gamma));
                send(*x, grads.input);
                send(*gamma, grads.gamma.reshape(self.shape(*gamma))?);
                send(*beta, grads.beta.reshape(self.shape(*beta))?);
            }
            Op::Activate { x, kind } => {
                send(*x, activate_backward(self.value(*x), &node.value, g, *kind));
            }
            Op::Warp { source, flow } => {
                let (ds, df) = bilinear_warp_backward(
                    self.value(*source),
                    self.value(*flow),
                    g,
                    self.needs(*source),
                    self.needs(*flow),
                )?;
                if let Some(ds) = ds {
                    send(*source, ds);
                }
                if let Some(df) = df {
                    send(*flow, df);
                }
            }
            Op::Concat { parts } => {
                let sizes: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
                for (p, piece) in parts.iter().zip(grid::split_channels(g, &sizes)) {
                    send(*p, piece);
                }
            }
            Op::Slice { x, start } => {
                let mut full = FeatureGrid::zeros(self.shape(*x));
                let len = node.value.channels();
                for b in 0..full.batch() {
                    for c in 0..len {
                        full.plane_mut(b, start + c).copy_from_slice(g.plane(b, c));
                    }
                }
                send(*x, full);
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    send(*a, g.zip_map(self.value(*b), |d, y| d * y)?);
                }
                if self.needs(*b) {
                    send(*b, g.zip_map(self.value(*a), |d, x| d * x)?);
                }
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                send(*x, g.map(|v| v * f));
            }
            Op::Abs(x) => {
                send(
                    *x,
                    g.zip_map(self.value(*x), |d, v| {
                        if v > T::zero() {
                            d
                        } else if v < T::zero() {
                            -d
                        } else {
                            T::zero()
                        }
                    })?,
                );
            }
            Op::Square(x) => {
                let two = T::lit(2.0);
                send(*x, g.zip_map(self.value(*x), |d, v| d * two * v)?);
            }
            Op::BceWithLogits { logits, target } => {
                // d/dl = sigmoid(l) - t
                let l = self.value(*logits);
                let t = self.value(*target);
                let mut dl = g.clone();
                for ((d, &lv), &tv) in dl.data_mut().iter_mut().zip(l.data()).zip(t.data()) {
                    *d = *d * (grid::sigmoid(lv) - tv);
                }
                send(*logits, dl);
                if self.needs(*target) {
                    // d/dt = -l
                    send(*target, g.zip_map(l, |d, lv| -d * lv)?);
                }
            }
            Op::Sum(x) => {
                send(*x, FeatureGrid::full(self.shape(*x), g.data()[0]));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(FeatureGrid::from_fn([1, 2, 3, 3], |[_, c, y, x]| (c + y * x) as f64));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert!(t.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut t = Tape::<f64>::new();
        let xv = FeatureGrid::from_fn([2, 1, 2, 3], |[b, _, y, x]| b as f64 - y as f64 * 0.5 + x as f64);
        let x = t.leaf(xv.clone());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &xv.map(|v| 2.0 * v));
    }

    #[test]
    fn backward_accumulates_until_cleared() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(FeatureGrid::full([1, 1, 2, 2], 3.0));
        let y = t.scale(x, 2.0);
        let s = t.sum(y);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(x).unwrap().data().iter().all(|&g| g == 4.0));
        t.zero_grad();
        t.backward(s).unwrap();
        assert!(t.grad(x).unwrap().data().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(FeatureGrid::zeros([1, 1, 2, 2]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(FeatureGrid::full([1, 1, 2, 2], 1.0));
        let c = t.constant(FeatureGrid::full([1, 1, 2, 2], 2.0));
        let m = t.mul(x, c).unwrap();
        let s = t.sum(m);
        t.backward(s).unwrap();
        assert!(t.grad(c).is_none());
        assert!(t.grad(x).unwrap().data().iter().all(|&g| g == 2.0));
        assert!(t.grad(m).is_some());
    }

    #[test]
    fn bce_with_logits_values() {
        let mut t = Tape::<f64>::new();
        let l = t.leaf(FeatureGrid::from_vec([1, 1, 1, 3], vec![0.0, 20.0, -20.0]).unwrap());
        let y = t.constant(FeatureGrid::from_vec([1, 1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let b = t.bce_with_logits(l, y).unwrap();
        let v = t.value(b).data().to_vec();
        assert!((v[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(v[1] < 1e-8 && v[2] < 1e-8);
    }
}
