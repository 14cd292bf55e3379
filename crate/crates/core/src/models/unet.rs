//! U-shaped encoder/decoder shared by the plain, leaky, residual and
//! inception variants. Only the per-stage block differs between them.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::models::blocks::{InceptionBlock, ResidualBlock};
use crate::models::layers::{Activation, Conv, Norm, ParamBuilder};

/// Two convolutions, each followed by the activation.
#[derive(Debug, Clone)]
pub struct DoubleConv {
    pub conv1: Conv,
    pub conv2: Conv,
    pub act: Activation,
}

/// Inception block followed by a 3x3 conv, group norm and activation.
#[derive(Debug, Clone)]
pub struct InceptionStage {
    pub block: InceptionBlock,
    pub conv: Conv,
    pub norm: Norm,
    pub act: Activation,
}

#[derive(Debug, Clone)]
pub enum Stage {
    Double(DoubleConv),
    Residual(Vec<ResidualBlock>),
    Inception(InceptionStage),
}

impl Stage {
    pub fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        match self {
            Stage::Double(s) => {
                let h = s.conv1.apply(g, p, x)?;
                let h = s.act.apply(g, h);
                let h = s.conv2.apply(g, p, h)?;
                Ok(s.act.apply(g, h))
            }
            Stage::Residual(blocks) => {
                let mut h = x;
                for b in blocks {
                    h = b.apply(g, p, h)?;
                }
                Ok(h)
            }
            Stage::Inception(s) => {
                let h = s.block.apply(g, p, x)?;
                let h = s.conv.apply(g, p, h)?;
                let h = s.norm.apply(g, p, h)?;
                Ok(s.act.apply(g, h))
            }
        }
    }
}

/// Which block family fills the stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StageFamily {
    Plain,
    Residual,
    Inception,
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub encoder: Vec<Stage>,
    pub bottleneck: Stage,
    /// `up[i]` maps level `i + 1` width to level `i` width after upsampling.
    pub up: Vec<Conv>,
    pub decoder: Vec<Stage>,
    pub head_norm: Option<Norm>,
    pub head: Conv,
    pub act: Activation,
    pub family: StageFamily,
}

fn stage(
    b: &mut ParamBuilder,
    family: StageFamily,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    first_kernel: usize,
    act: Activation,
) -> Stage {
    match family {
        StageFamily::Plain => Stage::Double(DoubleConv {
            conv1: b.conv(&format!("{name}.conv1"), in_ch, out_ch, first_kernel, 1),
            conv2: b.conv(&format!("{name}.conv2"), out_ch, out_ch, 3, 1),
            act,
        }),
        StageFamily::Residual => Stage::Residual(vec![ResidualBlock::new(b, &format!("{name}.res"), in_ch, out_ch, 1, act)]),
        StageFamily::Inception => {
            let bw = (out_ch / 4).max(1);
            let block = InceptionBlock::new(b, &format!("{name}.inception"), in_ch, [bw; 4], act);
            let conv = b.conv(&format!("{name}.conv"), block.out_channels(), out_ch, 3, 1);
            let norm = b.norm(&format!("{name}.norm"), out_ch);
            Stage::Inception(InceptionStage { block, conv, norm, act })
        }
    }
}

impl UNet {
    pub fn new(
        b: &mut ParamBuilder,
        family: StageFamily,
        in_channels: usize,
        base_width: usize,
        depth: usize,
        dilation_rates: &[usize],
        act: Activation,
    ) -> Self {
        let width = |level: usize| base_width << level;
        // 5x5 then 3x3 on the way down for the plain family.
        let enc_kernel = if family == StageFamily::Plain { 5 } else { 3 };
        let mut encoder = Vec::with_capacity(depth);
        let mut prev = in_channels;
        for level in 0..depth {
            encoder.push(stage(b, family, &format!("enc{level}"), prev, width(level), enc_kernel, act));
            prev = width(level);
        }
        let bottleneck = match family {
            StageFamily::Residual => {
                let mut blocks = Vec::with_capacity(dilation_rates.len());
                for (i, &rate) in dilation_rates.iter().enumerate() {
                    blocks.push(ResidualBlock::new(b, &format!("bottleneck.res{i}"), prev, width(depth), rate, act));
                    prev = width(depth);
                }
                Stage::Residual(blocks)
            }
            _ => stage(b, family, "bottleneck", prev, width(depth), 3, act),
        };
        let mut up = Vec::with_capacity(depth);
        let mut decoder = Vec::with_capacity(depth);
        for level in 0..depth {
            up.push(b.conv(&format!("up{level}"), width(level + 1), width(level), 3, 1));
            decoder.push(stage(b, family, &format!("dec{level}"), 2 * width(level), width(level), 3, act));
        }
        let head_norm = (family == StageFamily::Residual).then(|| b.norm("head.norm", width(0)));
        let head = b.conv("head.conv", width(0), 1, 1, 1);
        Self { encoder, bottleneck, up, decoder, head_norm, head, act, family }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for s in &self.encoder {
            h = s.apply(g, p, h)?;
            skips.push(h);
            h = g.max_pool2(h)?;
        }
        h = self.bottleneck.apply(g, p, h)?;
        for level in (0..self.decoder.len()).rev() {
            h = g.upsample_nearest(h, 2)?;
            h = self.up[level].apply(g, p, h)?;
            // Residual stages normalise and activate on entry.
            if self.family != StageFamily::Residual {
                h = self.act.apply(g, h);
            }
            h = g.concat(&[skips[level], h])?;
            h = self.decoder[level].apply(g, p, h)?;
        }
        if let Some(norm) = &self.head_norm {
            h = norm.apply(g, p, h)?;
            h = self.act.apply(g, h);
        }
        self.head.apply(g, p, h)
    }
}
