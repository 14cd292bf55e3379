//! The five run architectures behind one forward-pass contract.

pub mod blocks;
pub mod layers;
pub mod pranet;
pub mod unet;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result, SegError};
use crate::tensor::Tensor;

pub use blocks::{inception_block, residual_block, reverse_attention, InceptionBlock, ResidualBlock, ReverseAttention};
pub use layers::{leaky_relu, Activation, ParamBuilder, ParamStore};

use pranet::PraNetLite;
use unet::{StageFamily, UNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "unet")]
    Unet,
    #[serde(rename = "leaky-unet")]
    LeakyUnet,
    #[serde(rename = "resunet")]
    ResUnet,
    #[serde(rename = "inception-unet")]
    InceptionUnet,
    #[serde(rename = "pranet-lite")]
    PraNetLite,
}

impl Arch {
    pub const ALL: [Arch; 5] = [
        Arch::Unet,
        Arch::LeakyUnet,
        Arch::ResUnet,
        Arch::InceptionUnet,
        Arch::PraNetLite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Unet => "unet",
            Arch::LeakyUnet => "leaky-unet",
            Arch::ResUnet => "resunet",
            Arch::InceptionUnet => "inception-unet",
            Arch::PraNetLite => "pranet-lite",
        }
    }

    pub fn valid_names() -> String {
        Arch::ALL.map(Arch::name).join(", ")
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = SegError;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| SegError::Config(format!("unknown arch {s:?}; valid: {}", Arch::valid_names())))
    }
}

fn default_in_channels() -> usize {
    3
}
fn default_base_width() -> usize {
    32
}
fn default_depth() -> usize {
    4
}
fn default_leaky_slope() -> f64 {
    0.1
}
fn default_dilation_rates() -> Vec<usize> {
    vec![1, 2, 4]
}

/// Architecture selector plus its width/depth/activation/dilation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_base_width")]
    pub base_width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_leaky_slope")]
    pub leaky_slope: f64,
    #[serde(default = "default_dilation_rates")]
    pub dilation_rates: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(arch: Arch) -> Self {
        Self {
            arch,
            in_channels: default_in_channels(),
            base_width: default_base_width(),
            depth: default_depth(),
            leaky_slope: default_leaky_slope(),
            dilation_rates: default_dilation_rates(),
            seed: 0,
        }
    }

    pub fn with_size(mut self, base_width: usize, depth: usize) -> Self {
        self.base_width = base_width;
        self.depth = depth;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SegError::Config(m));
        if self.in_channels == 0 {
            return bad("in_channels must be >= 1".into());
        }
        if self.base_width == 0 {
            return bad("base_width must be >= 1".into());
        }
        if self.depth == 0 || self.depth > 16 {
            return bad(format!("depth must be in 1..=16, got {}", self.depth));
        }
        if !(self.leaky_slope >= 0.0) || !self.leaky_slope.is_finite() {
            return bad(format!("leaky_slope must be a finite value >= 0, got {}", self.leaky_slope));
        }
        if self.dilation_rates.is_empty() || self.dilation_rates.contains(&0) {
            return bad("dilation_rates must be a nonempty list of positive integers".into());
        }
        if self.arch == Arch::PraNetLite && self.depth < 2 {
            return bad("pranet-lite needs depth >= 2 to have three feature levels".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            serde_json::from_str(text).map_err(|e| SegError::Config(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Spatial dimensions must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone)]
enum Network {
    UNet(UNet),
    PraNet(PraNetLite),
}

/// Logit maps at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub main: Tensor,
    /// Side outputs; empty for the U-Net variants, three for pranet-lite.
    pub aux: Vec<Tensor>,
}

/// Graph handles produced by [`Model::forward_graph`].
pub struct GraphOutput {
    pub params: Vec<Var>,
    pub main: Var,
    pub aux: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    net: Network,
}

/// Builds a freshly initialised model. Deterministic in `config.seed`.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut b = ParamBuilder::new(config.seed);
    let c = config;
    let net = match c.arch {
        Arch::Unet => Network::UNet(UNet::new(&mut b, StageFamily::Plain, c.in_channels, c.base_width, c.depth, &c.dilation_rates, Activation::Relu)),
        Arch::LeakyUnet => Network::UNet(UNet::new(
            &mut b,
            StageFamily::Plain,
            c.in_channels,
            c.base_width,
            c.depth,
            &c.dilation_rates,
            Activation::Leaky(c.leaky_slope),
        )),
        Arch::ResUnet => Network::UNet(UNet::new(&mut b, StageFamily::Residual, c.in_channels, c.base_width, c.depth, &c.dilation_rates, Activation::Relu)),
        Arch::InceptionUnet => Network::UNet(UNet::new(&mut b, StageFamily::Inception, c.in_channels, c.base_width, c.depth, &c.dilation_rates, Activation::Relu)),
        Arch::PraNetLite => Network::PraNet(PraNetLite::new(&mut b, c.in_channels, c.base_width, c.depth, &c.dilation_rates, Activation::Relu)),
    };
    Ok(Model {
        config: config.clone(),
        params: b.finish(),
        net,
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let (n, c, h, w) = batch.dims4()?;
        if n == 0 {
            return shape_err("batch must contain at least one sample");
        }
        if c != self.config.in_channels {
            return shape_err(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            ));
        }
        let m = self.config.spatial_multiple();
        if h % m != 0 || h == 0 {
            return shape_err(format!("height {h} is not divisible by 2^depth = {m}"));
        }
        if w % m != 0 || w == 0 {
            return shape_err(format!("width {w} is not divisible by 2^depth = {m}"));
        }
        Ok(())
    }

    /// Runs the network on `g`, registering every parameter as a leaf.
    pub fn forward_graph(&self, g: &mut Graph, batch: Var) -> Result<GraphOutput> {
        self.check_input(g.value(batch))?;
        let (_, _, h, w) = g.value(batch).dims4()?;
        let params = self.params.leaves(g);
        let (main, aux) = match &self.net {
            Network::UNet(net) => (net.forward(g, &params, batch)?, Vec::new()),
            Network::PraNet(net) => {
                let maps = net.forward(g, &params, batch)?;
                let main = g.resize_bilinear(maps.main, h, w)?;
                let aux = maps
                    .side
                    .into_iter()
                    .map(|s| g.resize_bilinear(s, h, w))
                    .collect::<Result<Vec<_>>>()?;
                (main, aux)
            }
        };
        Ok(GraphOutput { params, main, aux })
    }

    /// Forward pass on an `N x in_channels x H x W` batch.
    pub fn forward(&self, batch: &Tensor) -> Result<ModelOutput> {
        let mut g = Graph::new();
        let x = g.leaf(batch.clone());
        let out = self.forward_graph(&mut g, x)?;
        Ok(ModelOutput {
            main: g.value(out.main).clone(),
            aux: out.aux.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }

    /// Replaces all parameters, checking names and shapes against the built topology.
    pub fn load_params(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.params.len() {
            return shape_err(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                named.len()
            ));
        }
        for (name, t) in named {
            self.params.set(&name, t)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_names_round_trip() {
        for a in Arch::ALL {
            assert_eq!(a.name().parse::<Arch>().unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{}\"", a.name()));
        }
        assert!(matches!("bogus".parse::<Arch>(), Err(SegError::Config(_))));
    }

    #[test]
    fn config_json_defaults_and_rejections() {
        let cfg = ModelConfig::from_json(r#"{"arch":"resunet"}"#).unwrap();
        assert_eq!(cfg, ModelConfig::new(Arch::ResUnet));
        assert!(ModelConfig::from_json(r#"{"arch":"bogus"}"#).is_err());
        assert!(ModelConfig::from_json(r#"{"arch":"unet","extra":1}"#).is_err());
        assert!(ModelConfig::from_json(r#"{"arch":"unet","depth":0}"#).is_err());
        assert!(ModelConfig::from_json(r#"{"arch":"pranet-lite","depth":1}"#).is_err());
        let back = ModelConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unet_shape_contract() {
        let m = build_model(&ModelConfig::new(Arch::Unet).with_size(4, 2)).unwrap();
        let out = m.forward(&Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        assert_eq!(out.main.shape(), &[1, 1, 64, 64]);
        assert!(out.aux.is_empty());
    }

    #[test]
    fn indivisible_input_names_dimension() {
        let m = build_model(&ModelConfig::new(Arch::Unet).with_size(2, 2)).unwrap();
        let err = m.forward(&Tensor::zeros(&[1, 3, 16, 18])).unwrap_err().to_string();
        assert!(err.contains("width 18"), "{err}");
        let err = m.forward(&Tensor::zeros(&[1, 3, 14, 16])).unwrap_err().to_string();
        assert!(err.contains("height 14"), "{err}");
    }
}
