//! Reverse-attention network at desk scale: residual encoder, a partial
//! decoder over the three deepest features, and a three-stage cascade of
//! reverse-attention refinements from deep to shallow.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::models::blocks::{ResidualBlock, ReverseAttention};
use crate::models::layers::{Activation, Conv, ParamBuilder};

#[derive(Debug, Clone)]
pub struct PartialDecoder {
    /// 1x1 reductions for the (shallow, middle, deep) features.
    pub reduce: [Conv; 3],
    pub fuse: Conv,
    pub out: Conv,
    pub act: Activation,
}

impl PartialDecoder {
    /// `feats` are ordered shallow to deep, each half the size of the previous.
    fn apply(&self, g: &mut Graph, p: &[Var], feats: [Var; 3]) -> Result<Var> {
        let r3 = self.reduce[0].apply(g, p, feats[0])?;
        let r4 = self.reduce[1].apply(g, p, feats[1])?;
        let r5 = self.reduce[2].apply(g, p, feats[2])?;
        let r5_up = g.upsample_nearest(r5, 2)?;
        let r5_up2 = g.upsample_nearest(r5, 4)?;
        let r4_up = g.upsample_nearest(r4, 2)?;
        let x4 = g.mul(r4, r5_up)?;
        let x3 = g.mul(r3, r4_up)?;
        let x3 = g.mul(x3, r5_up2)?;
        let x4_up = g.upsample_nearest(x4, 2)?;
        let cat = g.concat(&[x3, x4_up, r5_up2])?;
        let h = self.fuse.apply(g, p, cat)?;
        let h = self.act.apply(g, h);
        self.out.apply(g, p, h)
    }
}

#[derive(Debug, Clone)]
pub struct PraNetLite {
    pub encoder: Vec<ResidualBlock>,
    pub bottleneck: Vec<ResidualBlock>,
    pub decoder: PartialDecoder,
    /// Refiners for the (deep, middle, shallow) features, applied in that order.
    pub refiners: [ReverseAttention; 3],
}

/// Result of one forward pass: the final map and the side maps, all still at
/// their native resolutions.
pub struct PraNetMaps {
    pub main: Var,
    pub side: Vec<Var>,
}

impl PraNetLite {
    /// Requires `depth >= 2` so that three feature levels exist.
    pub fn new(
        b: &mut ParamBuilder,
        in_channels: usize,
        base_width: usize,
        depth: usize,
        dilation_rates: &[usize],
        act: Activation,
    ) -> Self {
        debug_assert!(depth >= 2);
        let width = |level: usize| base_width << level;
        let mut encoder = Vec::with_capacity(depth);
        let mut prev = in_channels;
        for level in 0..depth {
            encoder.push(ResidualBlock::new(b, &format!("enc{level}"), prev, width(level), 1, act));
            prev = width(level);
        }
        let mut bottleneck = Vec::with_capacity(dilation_rates.len());
        for (i, &rate) in dilation_rates.iter().enumerate() {
            bottleneck.push(ResidualBlock::new(b, &format!("bottleneck.res{i}"), prev, width(depth), rate, act));
            prev = width(depth);
        }
        let k = base_width;
        let levels = [depth - 2, depth - 1, depth];
        let decoder = PartialDecoder {
            reduce: levels.map(|l| b.conv(&format!("pd.reduce{l}"), width(l), k, 1, 1)),
            fuse: b.conv("pd.fuse", 3 * k, k, 3, 1),
            out: b.conv("pd.out", k, 1, 1, 1),
            act,
        };
        let refiners = [levels[2], levels[1], levels[0]]
            .map(|l| ReverseAttention::new(b, &format!("ra{l}"), width(l), k, act));
        Self { encoder, bottleneck, decoder, refiners }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<PraNetMaps> {
        let mut feats = Vec::with_capacity(self.encoder.len() + 1);
        let mut h = x;
        for block in &self.encoder {
            h = block.apply(g, p, h)?;
            feats.push(h);
            h = g.max_pool2(h)?;
        }
        for block in &self.bottleneck {
            h = block.apply(g, p, h)?;
        }
        feats.push(h);
        let n = feats.len();
        let (shallow, middle, deep) = (feats[n - 3], feats[n - 2], feats[n - 1]);
        let global = self.decoder.apply(g, p, [shallow, middle, deep])?;

        let mut side = vec![global];
        let mut current = global;
        for (refiner, feat) in self.refiners.iter().zip([deep, middle, shallow]) {
            let (_, _, fh, fw) = g.value(feat).dims4()?;
            let coarse = g.resize_bilinear(current, fh, fw)?;
            current = refiner.apply(g, p, feat, coarse)?;
            side.push(current);
        }
        let main = side.pop().expect("three refinements");
        Ok(PraNetMaps { main, side })
    }
}
