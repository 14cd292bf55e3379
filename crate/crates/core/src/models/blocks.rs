//! Building blocks shared by the architectures: residual, inception and
//! reverse-attention units.

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::models::layers::{Activation, Conv, Norm, ParamBuilder, ParamStore};
use crate::tensor::Tensor;

/// Pre-activation residual unit: `shortcut(x) + F(x)` where
/// `F = (norm -> act -> conv) x 2`, both convs 3x3 at the block's dilation.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub norm1: Norm,
    pub conv1: Conv,
    pub norm2: Norm,
    pub conv2: Conv,
    /// 1x1 projection when input and output widths differ.
    pub shortcut: Option<Conv>,
    pub act: Activation,
}

impl ResidualBlock {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        dilation: usize,
        act: Activation,
    ) -> Self {
        let norm1 = b.norm(&format!("{name}.norm1"), in_ch);
        let conv1 = b.conv(&format!("{name}.conv1"), in_ch, out_ch, 3, dilation);
        let norm2 = b.norm(&format!("{name}.norm2"), out_ch);
        let conv2 = b.conv(&format!("{name}.conv2"), out_ch, out_ch, 3, dilation);
        let shortcut = (in_ch != out_ch).then(|| b.conv(&format!("{name}.shortcut"), in_ch, out_ch, 1, 1));
        Self { norm1, conv1, norm2, conv2, shortcut, act }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_ch
    }

    pub fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let c = g.value(x).dims4()?.1;
        if c != self.in_channels() {
            return shape_err(format!(
                "residual block expects {} channels, got {c}",
                self.in_channels()
            ));
        }
        let h = self.norm1.apply(g, p, x)?;
        let h = self.act.apply(g, h);
        let h = self.conv1.apply(g, p, h)?;
        let h = self.norm2.apply(g, p, h)?;
        let h = self.act.apply(g, h);
        let h = self.conv2.apply(g, p, h)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.apply(g, p, x)?,
            None => x,
        };
        g.add(skip, h)
    }
}

/// Four parallel branches concatenated along channels:
/// 1x1; 1x1 -> 3x3; 1x1 -> 5x5; 3x3 max-pool -> 1x1. Every conv is followed
/// by the block activation.
#[derive(Debug, Clone)]
pub struct InceptionBlock {
    pub branch1: Conv,
    pub branch3_reduce: Conv,
    pub branch3: Conv,
    pub branch5_reduce: Conv,
    pub branch5: Conv,
    pub pool_proj: Conv,
    pub act: Activation,
}

impl InceptionBlock {
    /// `widths` are the output widths of the (1x1, 3x3, 5x5, pool) branches;
    /// the reduction convs in front of 3x3 and 5x5 use the same width.
    pub fn new(b: &mut ParamBuilder, name: &str, in_ch: usize, widths: [usize; 4], act: Activation) -> Self {
        let [w1, w3, w5, wp] = widths;
        Self {
            branch1: b.conv(&format!("{name}.b1"), in_ch, w1, 1, 1),
            branch3_reduce: b.conv(&format!("{name}.b3_reduce"), in_ch, w3, 1, 1),
            branch3: b.conv(&format!("{name}.b3"), w3, w3, 3, 1),
            branch5_reduce: b.conv(&format!("{name}.b5_reduce"), in_ch, w5, 1, 1),
            branch5: b.conv(&format!("{name}.b5"), w5, w5, 5, 1),
            pool_proj: b.conv(&format!("{name}.pool_proj"), in_ch, wp, 1, 1),
            act,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.branch1.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.branch1.out_ch + self.branch3.out_ch + self.branch5.out_ch + self.pool_proj.out_ch
    }

    pub fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let c = g.value(x).dims4()?.1;
        if c != self.in_channels() {
            return shape_err(format!(
                "inception block expects {} channels, got {c}",
                self.in_channels()
            ));
        }
        let act = self.act;
        let conv_act = |g: &mut Graph, conv: &Conv, v: Var| -> Result<Var> {
            let y = conv.apply(g, p, v)?;
            Ok(act.apply(g, y))
        };
        let b1 = conv_act(g, &self.branch1, x)?;
        let r3 = conv_act(g, &self.branch3_reduce, x)?;
        let b3 = conv_act(g, &self.branch3, r3)?;
        let r5 = conv_act(g, &self.branch5_reduce, x)?;
        let b5 = conv_act(g, &self.branch5, r5)?;
        let pooled = g.max_pool3_same(x)?;
        let bp = conv_act(g, &self.pool_proj, pooled)?;
        g.concat(&[b1, b3, b5, bp])
    }
}

/// Refines a coarse logit map using features weighted by `1 - sigmoid(coarse)`:
/// `refined = coarse + conv_stack(A * features)`.
#[derive(Debug, Clone)]
pub struct ReverseAttention {
    pub conv1: Conv,
    pub conv2: Conv,
    pub act: Activation,
}

impl ReverseAttention {
    pub fn new(b: &mut ParamBuilder, name: &str, in_ch: usize, hidden: usize, act: Activation) -> Self {
        Self {
            conv1: b.conv(&format!("{name}.conv1"), in_ch, hidden, 3, 1),
            conv2: b.conv(&format!("{name}.conv2"), hidden, 1, 3, 1),
            act,
        }
    }

    pub fn apply(&self, g: &mut Graph, p: &[Var], features: Var, coarse: Var) -> Result<Var> {
        let fshape = g.value(features).dims4()?;
        let cshape = g.value(coarse).dims4()?;
        if (fshape.0, fshape.2, fshape.3) != (cshape.0, cshape.2, cshape.3) || cshape.1 != 1 {
            return shape_err(format!(
                "reverse attention: features {:?} and coarse map {:?} are not aligned",
                g.value(features).shape(),
                g.value(coarse).shape()
            ));
        }
        let s = g.sigmoid(coarse);
        let attention = g.affine(s, -1.0, 1.0);
        let attended = g.mul_channels(attention, features)?;
        let h = self.conv1.apply(g, p, attended)?;
        let h = self.act.apply(g, h);
        let r = self.conv2.apply(g, p, h)?;
        g.add(coarse, r)
    }
}

/// Evaluates a block outside of any model, without keeping gradients.
pub fn eval_block(
    params: &ParamStore,
    inputs: &[&Tensor],
    f: impl FnOnce(&mut Graph, &[Var], &[Var]) -> Result<Var>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.leaves(&mut g);
    let xs: Vec<Var> = inputs.iter().map(|t| g.leaf((*t).clone())).collect();
    let out = f(&mut g, &p, &xs)?;
    Ok(g.value(out).clone())
}

/// Applies a residual block to a tensor.
pub fn residual_block(x: &Tensor, block: &ResidualBlock, params: &ParamStore) -> Result<Tensor> {
    eval_block(params, &[x], |g, p, xs| block.apply(g, p, xs[0]))
}

/// Applies an inception block to a tensor.
pub fn inception_block(x: &Tensor, block: &InceptionBlock, params: &ParamStore) -> Result<Tensor> {
    eval_block(params, &[x], |g, p, xs| block.apply(g, p, xs[0]))
}

/// Applies one reverse-attention refinement.
pub fn reverse_attention(
    features: &Tensor,
    coarse_logits: &Tensor,
    block: &ReverseAttention,
    params: &ParamStore,
) -> Result<Tensor> {
    eval_block(params, &[features, coarse_logits], |g, p, xs| block.apply(g, p, xs[0], xs[1]))
}
