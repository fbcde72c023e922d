//! Detector assembly: backbone, FPN, optional enhancement, shared head.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::ConvParams;
use crate::params::{Bound, Init, ParamStore};
use crate::pyramid::{self, BackboneParams, Enhancer, FpnParams, Level, PyramidSet};
use crate::tensor::Tensor;

use super::config::ModelConfig;

/// Head shared across levels: one 3×3 conv + ReLU, then 3×3 classification
/// and regression convolutions. One anchor per cell.
#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub shared: ConvParams,
    pub cls: ConvParams,
    pub reg: ConvParams,
}

impl HeadParams {
    /// The classifier bias starts at `-ln((1 - prior) / prior)`.
    pub fn register(store: &mut ParamStore, channels: usize, num_classes: usize, prior: f64) -> Result<()> {
        ConvParams::register(store, "head.shared", channels, channels, 3)?;
        store.register("head.cls.weight", &[num_classes, channels, 3, 3], Init::Xavier)?;
        store.register("head.cls.bias", &[num_classes], Init::Constant(-((1.0 - prior) / prior).ln()))?;
        ConvParams::register(store, "head.reg", channels, 4, 3)
    }

    pub fn bind(bound: &Bound) -> Result<Self> {
        Ok(HeadParams {
            shared: ConvParams::bind(bound, "head.shared")?,
            cls: ConvParams::bind(bound, "head.cls")?,
            reg: ConvParams::bind(bound, "head.reg")?,
        })
    }
}

/// Raw head outputs of one level: logits `[K, H, W]`, deltas `[4, H, W]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelOutput {
    pub level: Level,
    pub cls: Var,
    pub reg: Var,
}

pub fn head_forward(g: &mut Graph, pyr: &PyramidSet, levels: &[Level], head: &HeadParams) -> Result<Vec<LevelOutput>> {
    levels
        .iter()
        .map(|&level| {
            let x = pyr.get(level)?;
            let h = head.shared.apply_relu(g, x, 1)?;
            let cls = head.cls.apply(g, h)?;
            let reg = head.reg.apply(g, h)?;
            Ok(LevelOutput { level, cls, reg })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub config: ModelConfig,
}

impl Detector {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Detector { config })
    }

    /// Registration order is backbone, FPN, head, then enhancement modules,
    /// so a baseline and an enhanced model share all common initial values.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let c = &self.config;
        let mut store = ParamStore::new(seed);
        BackboneParams::register(&mut store, &c.backbone)?;
        FpnParams::register(&mut store, &c.backbone)?;
        HeadParams::register(&mut store, c.backbone.pyramid_channels, c.num_classes, c.cls_prior)?;
        if c.enhance {
            for &l in &c.enhance_levels {
                Enhancer::register(&mut store, l, c.backbone.pyramid_channels, &c.fbsm)?;
            }
        }
        Ok(store)
    }

    /// Adds the normalized image to `g` as a constant.
    pub fn input(&self, g: &mut Graph, image: &Tensor) -> Result<Var> {
        image.chw()?;
        let (m, s) = (self.config.input_mean, self.config.input_std);
        let x = Tensor::new(image.dims(), image.data().iter().map(|v| (v - m) / s).collect())?;
        Ok(g.constant(x))
    }

    pub fn pyramid(&self, g: &mut Graph, bound: &Bound, image: Var) -> Result<PyramidSet> {
        let c = &self.config;
        let backbone = BackboneParams::bind(bound)?;
        let fpn = FpnParams::bind(bound)?;
        let feats = pyramid::backbone_forward(g, image, &backbone)?;
        let pyr = pyramid::build_fpn(g, &feats, &fpn)?;
        if !c.enhance {
            return Ok(pyr);
        }
        let enhancers = c
            .enhance_levels
            .iter()
            .map(|&l| Enhancer::bind(bound, l, &c.fbsm))
            .collect::<Result<Vec<_>>>()?;
        pyramid::efpn_bs_forward(g, &pyr, &enhancers, true)
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, image: Var) -> Result<Vec<LevelOutput>> {
        let pyr = self.pyramid(g, bound, image)?;
        let head = HeadParams::bind(bound)?;
        let out = head_forward(g, &pyr, &self.config.levels, &head)?;
        for o in &out {
            let k = g.value(o.cls).chw()?.0;
            if k != self.config.num_classes {
                return Err(Error::shape("head_forward", format!("{k} class maps")));
            }
        }
        Ok(out)
    }
}
