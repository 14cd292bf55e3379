//! A reverse-mode autodiff tape over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients for every node.

use crate::error::{shape_err, Result};
use crate::kernels::{self, GroupNormCache};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, dilation: usize },
    Add(Var, Var),
    Mul(Var, Var),
    /// `map` (N x 1 x H x W) broadcast over the channels of `feat`.
    MulChannels { map: Var, feat: Var },
    Affine { x: Var, scale: f64 },
    Sigmoid(Var),
    LeakyRelu { x: Var, slope: f64 },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, cache: GroupNormCache },
    MaxPool { x: Var, argmax: Vec<usize> },
    UpsampleNearest { x: Var, factor: usize },
    ResizeBilinear { x: Var },
    Concat { parts: Vec<Var>, channels: Vec<usize> },
    Bce { logits: Var, target: Tensor },
    Dice { logits: Var, target: Tensor, eps: f64 },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), dilation)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, dilation }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Multiplies every channel of `feat` by the single-channel `map`.
    pub fn mul_channels(&mut self, map: Var, feat: Var) -> Result<Var> {
        let (mn, mc, mh, mw) = self.value(map).dims4()?;
        let (n, c, h, w) = self.value(feat).dims4()?;
        if mc != 1 || (mn, mh, mw) != (n, h, w) {
            return shape_err(format!(
                "attention map {:?} does not align with features {:?}",
                self.value(map).shape(),
                self.value(feat).shape()
            ));
        }
        let hw = h * w;
        let m = self.value(map).data();
        let f = self.value(feat).data();
        let mut out = Vec::with_capacity(f.len());
        for i in 0..n {
            let mi = &m[i * hw..(i + 1) * hw];
            for ch in 0..c {
                let fi = &f[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                out.extend(fi.iter().zip(mi).map(|(a, b)| a * b));
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(out, Op::MulChannels { map, feat }))
    }

    /// `scale * x + offset`.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + offset);
        self.push(out, Op::Affine { x, scale })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// `x` where `x >= 0`, `slope * x` otherwise; slope 0 is a plain ReLU.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v >= 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu { x, slope })
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (out, cache) = kernels::group_norm(self.value(x), self.value(gamma), self.value(beta), groups)?;
        Ok(self.push(out, Op::GroupNorm { x, gamma, beta, groups, cache }))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = kernels::max_pool2(self.value(x))?;
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    pub fn max_pool3_same(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = kernels::max_pool3_same(self.value(x))?;
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = kernels::upsample_nearest(self.value(x), factor)?;
        Ok(self.push(out, Op::UpsampleNearest { x, factor }))
    }

    pub fn resize_bilinear(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (_, _, xh, xw) = self.value(x).dims4()?;
        if (xh, xw) == (h, w) {
            return Ok(x);
        }
        let out = kernels::resize_bilinear(self.value(x), h, w)?;
        Ok(self.push(out, Op::ResizeBilinear { x }))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat_channels(&values)?;
        let channels = values.iter().map(|t| t.shape()[1]).collect();
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), channels }))
    }

    /// Mean binary cross-entropy on logits, in the log-sum-exp stable form.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != target.shape() {
            return shape_err(format!("bce: logits {:?} vs truth {:?}", z.shape(), target.shape()));
        }
        let sum: f64 = z
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(sum / z.numel() as f64);
        Ok(self.push(out, Op::Bce { logits, target: target.clone() }))
    }

    /// Smoothed soft Dice loss over every pixel of the batch.
    pub fn dice_loss(&mut self, logits: Var, target: &Tensor, eps: f64) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != target.shape() {
            return shape_err(format!("dice: logits {:?} vs truth {:?}", z.shape(), target.shape()));
        }
        let (mut inter, mut sum_p, mut sum_t) = (0.0, 0.0, 0.0);
        for (&zv, &t) in z.data().iter().zip(target.data()) {
            let p = kernels::sigmoid(zv);
            inter += p * t;
            sum_p += p;
            sum_t += t;
        }
        let out = Tensor::scalar(1.0 - (2.0 * inter + eps) / (sum_p + sum_t + eps));
        Ok(self.push(out, Op::Dice { logits, target: target.clone(), eps }))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            if self.value(v).numel() != 1 {
                return shape_err("weighted_sum expects scalar terms");
            }
            total += w * self.value(v).item();
        }
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec())))
    }

    /// Back-propagates from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return shape_err("backward needs a scalar root");
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, dilation } => {
                    let (gx, gw, gb) =
                        kernels::conv2d_backward(self.value(*x), self.value(*w), &g, *dilation)?;
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&g, self.value(*b), |g, v| g * v);
                    let gb = zip_map(&g, self.value(*a), |g, v| g * v);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MulChannels { map, feat } => {
                    let (n, c, h, w) = self.value(*feat).dims4()?;
                    let hw = h * w;
                    let m = self.value(*map).data();
                    let f = self.value(*feat).data();
                    let gd = g.data();
                    let mut gmap = vec![0.0; n * hw];
                    let mut gfeat = vec![0.0; gd.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * hw;
                            for j in 0..hw {
                                gmap[i * hw + j] += gd[off + j] * f[off + j];
                                gfeat[off + j] = gd[off + j] * m[i * hw + j];
                            }
                        }
                    }
                    acc(&mut grads, *map, Tensor::new(vec![n, 1, h, w], gmap)?);
                    acc(&mut grads, *feat, Tensor::new(vec![n, c, h, w], gfeat)?);
                }
                Op::Affine { x, scale } => {
                    let s = *scale;
                    acc(&mut grads, *x, g.map(|v| v * s));
                }
                Op::Sigmoid(x) => {
                    let gx = zip_map(&g, &node.value, |g, s| g * s * (1.0 - s));
                    acc(&mut grads, *x, gx);
                }
                Op::LeakyRelu { x, slope } => {
                    let s = *slope;
                    let gx = zip_map(&g, self.value(*x), |g, v| if v >= 0.0 { g } else { s * g });
                    acc(&mut grads, *x, gx);
                }
                Op::GroupNorm { x, gamma, beta, groups, cache } => {
                    let (gx, ggamma, gbeta) = kernels::group_norm_backward(
                        self.value(*x).shape(),
                        self.value(*gamma),
                        *groups,
                        cache,
                        &g,
                    );
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gamma, ggamma);
                    acc(&mut grads, *beta, gbeta);
                }
                Op::MaxPool { x, argmax } => {
                    let gx = kernels::max_pool_backward(self.value(*x).shape(), argmax, &g);
                    acc(&mut grads, *x, gx);
                }
                Op::UpsampleNearest { x, factor } => {
                    acc(&mut grads, *x, kernels::upsample_nearest_backward(&g, *factor)?);
                }
                Op::ResizeBilinear { x } => {
                    let gx = kernels::resize_bilinear_backward(self.value(*x).shape(), &g)?;
                    acc(&mut grads, *x, gx);
                }
                Op::Concat { parts, channels } => {
                    for (p, gp) in parts.iter().zip(kernels::split_channels(&g, channels)) {
                        acc(&mut grads, *p, gp);
                    }
                }
                Op::Bce { logits, target } => {
                    let z = self.value(*logits);
                    let scale = g.item() / z.numel() as f64;
                    let gz = zip_map(z, target, |z, t| (kernels::sigmoid(z) - t) * scale);
                    acc(&mut grads, *logits, gz);
                }
                Op::Dice { logits, target, eps } => {
                    let z = self.value(*logits);
                    let (mut inter, mut denom) = (0.0, *eps);
                    for (&zv, &t) in z.data().iter().zip(target.data()) {
                        let p = kernels::sigmoid(zv);
                        inter += p * t;
                        denom += p + t;
                    }
                    let num = 2.0 * inter + eps;
                    let gs = g.item();
                    let gz = zip_map(z, target, |zv, t| {
                        let p = kernels::sigmoid(zv);
                        let dl_dp = -(2.0 * t * denom - num) / (denom * denom);
                        gs * dl_dp * p * (1.0 - p)
                    });
                    acc(&mut grads, *logits, gz);
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        acc(&mut grads, v, Tensor::scalar(g.item() * w));
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients(grads))
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map operands share a shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(loss)/d(input) for a small graph builder.
    fn check(build: impl Fn(&mut Graph, Var) -> Var, input: Tensor) {
        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let y = build(&mut g, x);
        let grads = g.backward(y).unwrap();
        let analytic = grads.get(x).unwrap().clone();
        let h = 1e-6;
        for i in 0..input.numel() {
            let eval = |delta: f64| {
                let mut t = input.clone();
                t.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.leaf(t);
                let y = build(&mut g, x);
                g.value(y).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + a.abs().max(numeric.abs())),
                "element {i}: analytic {a} numeric {numeric}"
            );
        }
    }

    fn input(shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |i| ((i * 7919 % 97) as f64 / 97.0 - 0.5) * 2.0)
    }

    fn weights(shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |i| ((i * 104729 % 61) as f64 / 61.0 - 0.5) * 0.8)
    }

    fn probe(g: &mut Graph, y: Var) -> Var {
        let shape = g.value(y).shape().to_vec();
        let target = Tensor::from_fn(&shape, |i| (i % 3 == 0) as u8 as f64);
        let bce = g.bce_with_logits(y, &target).unwrap();
        let dice = g.dice_loss(y, &target, 1.0).unwrap();
        g.weighted_sum(&[(bce, 1.0), (dice, 0.7)]).unwrap()
    }

    #[test]
    fn conv_gradients() {
        for dil in [1, 2] {
            check(
                |g, x| {
                    let w = g.leaf(weights(&[1, 2, 3, 3]));
                    let b = g.leaf(Tensor::full(&[1], 0.1));
                    let y = g.conv2d(x, w, Some(b), dil).unwrap();
                    probe(g, y)
                },
                input(&[2, 2, 5, 5]),
            );
        }
    }

    #[test]
    fn norm_and_pool_gradients() {
        check(
            |g, x| {
                let gamma = g.leaf(Tensor::from_fn(&[4], |i| 1.0 + 0.1 * i as f64));
                let beta = g.leaf(Tensor::from_fn(&[4], |i| 0.05 * i as f64));
                let y = g.group_norm(x, gamma, beta, 2).unwrap();
                let y = g.max_pool2(y).unwrap();
                let y = g.upsample_nearest(y, 2).unwrap();
                let y = g.max_pool3_same(y).unwrap();
                let w = g.leaf(weights(&[1, 4, 1, 1]));
                let y = g.conv2d(y, w, None, 1).unwrap();
                probe(g, y)
            },
            input(&[1, 4, 4, 4]),
        );
    }

    #[test]
    fn attention_and_resize_gradients() {
        check(
            |g, x| {
                let w = g.leaf(weights(&[1, 3, 1, 1]));
                let coarse = g.conv2d(x, w, None, 1).unwrap();
                let s = g.sigmoid(coarse);
                let a = g.affine(s, -1.0, 1.0);
                let att = g.mul_channels(a, x).unwrap();
                let cat = g.concat(&[att, x]).unwrap();
                let w2 = g.leaf(weights(&[1, 6, 3, 3]));
                let y = g.conv2d(cat, w2, None, 1).unwrap();
                let y = g.leaky_relu(y, 0.1);
                let y = g.resize_bilinear(y, 7, 5).unwrap();
                let z = g.resize_bilinear(y, 4, 4).unwrap();
                let zz = g.mul(z, z).unwrap();
                let z = g.add(zz, z).unwrap();
                probe(g, z)
            },
            input(&[1, 3, 4, 4]),
        );
    }
}
