//! Named parameter storage and the small layers every architecture is built from.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{domain_err, shape_err, Result};
use crate::tensor::Tensor;

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a leaf on `g`, in storage order.
    pub fn leaves(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone())).collect()
    }

    /// Replaces a tensor by name, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let Some(slot) = self.get_mut(name) else {
            return shape_err(format!("no parameter named {name}"));
        };
        if slot.shape() != value.shape() {
            return shape_err(format!(
                "parameter {name} has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            ));
        }
        *slot = value;
        Ok(())
    }
}

/// Allocates parameters in a fixed order from a seeded generator.
pub struct ParamBuilder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        debug_assert!(self.store.index_of(&name).is_none(), "duplicate parameter {name}");
        self.store.names.push(name);
        self.store.tensors.push(t);
        self.store.tensors.len() - 1
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
    }

    /// Square convolution with fan-in scaled uniform weights.
    pub fn conv(&mut self, name: &str, in_ch: usize, out_ch: usize, kernel: usize, dilation: usize) -> Conv {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let w = self.uniform(&[out_ch, in_ch, kernel, kernel], (6.0 / fan_in).sqrt());
        let b = self.uniform(&[out_ch], 1.0 / fan_in.sqrt());
        Conv {
            weight: self.push(format!("{name}.weight"), w),
            bias: Some(self.push(format!("{name}.bias"), b)),
            in_ch,
            out_ch,
            kernel,
            dilation,
        }
    }

    pub fn norm(&mut self, name: &str, channels: usize) -> Norm {
        Norm {
            gamma: self.push(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: self.push(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups: norm_groups(channels),
        }
    }
}

/// Largest group count not above four that divides `channels`.
pub fn norm_groups(channels: usize) -> usize {
    (1..=4).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    Leaky(f64),
}

impl Activation {
    pub fn slope(self) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Leaky(s) => s,
        }
    }

    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        g.leaky_relu(x, self.slope())
    }
}

/// Element-wise leaky ReLU: `x` for `x >= 0`, `slope * x` otherwise.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    if !(slope >= 0.0) {
        return domain_err(format!("leaky slope must be >= 0, got {slope}"));
    }
    Ok(x.map(|v| if v >= 0.0 { v } else { slope * v }))
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: usize,
    pub bias: Option<usize>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv {
    pub fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let c = g.value(x).dims4()?.1;
        if c != self.in_ch {
            return shape_err(format!(
                "{}x{} conv expects {} input channels, got {c}",
                self.kernel, self.kernel, self.in_ch
            ));
        }
        g.conv2d(x, p[self.weight], self.bias.map(|b| p[b]), self.dilation)
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: usize,
    pub beta: usize,
    pub groups: usize,
}

impl Norm {
    pub fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        g.group_norm(x, p[self.gamma], p[self.beta], self.groups)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::new(vec![3], vec![5.0, -2.0, -3.0]).unwrap();
        let y = leaky_relu(&x, 0.1).unwrap();
        assert_eq!(y.data()[0], 5.0);
        assert!((y.data()[1] + 0.2).abs() < 1e-15);
        assert_eq!(leaky_relu(&x, 0.0).unwrap().data()[2], 0.0);
        assert!(leaky_relu(&x, -0.1).is_err());
    }

    #[test]
    fn single_pointwise_conv_has_four_parameters() {
        let mut b = ParamBuilder::new(0);
        b.conv("head", 3, 1, 1, 1);
        assert_eq!(b.finish().scalar_count(), 4);
    }

    #[test]
    fn group_counts() {
        assert_eq!(norm_groups(32), 4);
        assert_eq!(norm_groups(6), 3);
        assert_eq!(norm_groups(2), 2);
        assert_eq!(norm_groups(1), 1);
    }
}
