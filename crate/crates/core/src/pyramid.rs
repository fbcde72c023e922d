//! Small strided backbone, FPN (P2–P6) and the enhanced-pyramid wiring that
//! replaces P2 with the CEM + FBSM output computed from an upsampled P5.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cem::{self, CemParams};
use crate::error::{Error, Result};
use crate::fbsm::{self, FbsmConfig, FbsmParams};
use crate::graph::{Graph, Var};
use crate::nn::ConvParams;
use crate::params::{Bound, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    P2,
    P3,
    P4,
    P5,
    P6,
}

impl Level {
    pub const ALL: [Level; 5] = [Level::P2, Level::P3, Level::P4, Level::P5, Level::P6];

    pub fn stride(self) -> usize {
        match self {
            Level::P2 => 4,
            Level::P3 => 8,
            Level::P4 => 16,
            Level::P5 => 32,
            Level::P6 => 64,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Feature-map size for an `h × w` image.
    pub fn dims_for(self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride()), w.div_ceil(self.stride()))
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::P2 => "P2",
            Level::P3 => "P3",
            Level::P4 => "P4",
            Level::P5 => "P5",
            Level::P6 => "P6",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Pyramid levels keyed by [`Level`]; strides follow from the key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PyramidSet {
    levels: BTreeMap<Level, Var>,
}

impl PyramidSet {
    pub fn new(levels: BTreeMap<Level, Var>) -> Self {
        PyramidSet { levels }
    }

    pub fn get(&self, level: Level) -> Result<Var> {
        self.levels.get(&level).copied().ok_or_else(|| Error::Invalid(format!("pyramid has no {level}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Level, Var)> + '_ {
        self.levels.iter().map(|(l, v)| (*l, *v))
    }

    pub fn is_complete(&self) -> bool {
        Level::ALL.iter().all(|l| self.levels.contains_key(l))
    }

    /// Checks shared channel count and `ceil(image / stride)` spatial sizes.
    pub fn validate(&self, g: &Graph, image_h: usize, image_w: usize) -> Result<usize> {
        let mut channels = None;
        for (l, v) in self.iter() {
            let (c, h, w) = g.value(v).chw()?;
            if (h, w) != l.dims_for(image_h, image_w) {
                return Err(Error::shape("pyramid", format!("{l} is {h}x{w}")));
            }
            if *channels.get_or_insert(c) != c {
                return Err(Error::shape("pyramid", format!("{l} has {c} channels")));
            }
        }
        channels.ok_or_else(|| Error::Invalid("empty pyramid".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Channels of C2..C5 (strides 4, 8, 16, 32).
    pub stage_channels: [usize; 4],
    pub pyramid_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { in_channels: 3, stem_channels: 16, stage_channels: [24, 32, 32, 32], pyramid_channels: 16 }
    }
}

const STAGE_NAMES: [&str; 4] = ["c2", "c3", "c4", "c5"];

#[derive(Debug, Clone, Copy)]
pub struct BackboneParams {
    pub stem: ConvParams,
    pub stages: [ConvParams; 4],
}

impl BackboneParams {
    pub fn register(store: &mut ParamStore, cfg: &BackboneConfig) -> Result<()> {
        ConvParams::register(store, "backbone.stem", cfg.in_channels, cfg.stem_channels, 3)?;
        let mut c_in = cfg.stem_channels;
        for (name, &c) in STAGE_NAMES.iter().zip(&cfg.stage_channels) {
            ConvParams::register(store, &format!("backbone.{name}"), c_in, c, 3)?;
            c_in = c;
        }
        Ok(())
    }

    pub fn bind(bound: &Bound) -> Result<Self> {
        let s = |n: &str| ConvParams::bind(bound, &format!("backbone.{n}"));
        Ok(BackboneParams { stem: s("stem")?, stages: [s("c2")?, s("c3")?, s("c4")?, s("c5")?] })
    }
}

/// Stem (3×3, stride 2) then four 3×3 stride-2 stages, each followed by ReLU.
/// Returns C2..C5 at strides 4, 8, 16, 32.
pub fn backbone_forward(g: &mut Graph, image: Var, params: &BackboneParams) -> Result<[Var; 4]> {
    let (_, h, w) = g.value(image).chw()?;
    if h % 64 != 0 || w % 64 != 0 {
        return Err(Error::Invalid(format!("image size {h}x{w} must be divisible by 64")));
    }
    let mut x = params.stem.apply_relu(g, image, 2)?;
    let mut out = [x; 4];
    for (slot, conv) in out.iter_mut().zip(&params.stages) {
        x = conv.apply_relu(g, x, 2)?;
        *slot = x;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct FpnParams {
    pub lateral: [ConvParams; 4],
    pub smooth: [ConvParams; 4],
}

impl FpnParams {
    pub fn register(store: &mut ParamStore, cfg: &BackboneConfig) -> Result<()> {
        let c = cfg.pyramid_channels;
        for (i, &ci) in cfg.stage_channels.iter().enumerate() {
            ConvParams::register(store, &format!("fpn.lateral{}", i + 2), ci, c, 1)?;
        }
        for i in 0..4 {
            ConvParams::register(store, &format!("fpn.smooth{}", i + 2), c, c, 3)?;
        }
        Ok(())
    }

    pub fn bind(bound: &Bound) -> Result<Self> {
        let b = |n: String| ConvParams::bind(bound, &n);
        let lateral = [2, 3, 4, 5].map(|i| b(format!("fpn.lateral{i}")));
        let smooth = [2, 3, 4, 5].map(|i| b(format!("fpn.smooth{i}")));
        let [l2, l3, l4, l5] = lateral;
        let [s2, s3, s4, s5] = smooth;
        Ok(FpnParams { lateral: [l2?, l3?, l4?, l5?], smooth: [s2?, s3?, s4?, s5?] })
    }
}

/// Top-down pathway with 1×1 laterals, nearest-neighbour upsampling and 3×3
/// smoothing; P6 is a stride-2 max pool of P5.
pub fn build_fpn(g: &mut Graph, feats: &[Var; 4], params: &FpnParams) -> Result<PyramidSet> {
    let mut inner = params.lateral[3].apply(g, feats[3])?;
    let mut merged = [inner; 4];
    for i in (0..3).rev() {
        let lat = params.lateral[i].apply(g, feats[i])?;
        let (_, h, w) = g.value(lat).chw()?;
        let up = g.upsample_nearest(inner, (h, w))?;
        inner = g.add(lat, up)?;
        merged[i] = inner;
    }
    let mut levels = BTreeMap::new();
    for (i, level) in [Level::P2, Level::P3, Level::P4, Level::P5].into_iter().enumerate() {
        levels.insert(level, params.smooth[i].apply(g, merged[i])?);
    }
    let p6 = g.max_pool2(levels[&Level::P5])?;
    levels.insert(Level::P6, p6);
    Ok(PyramidSet::new(levels))
}

/// CEM + FBSM parameters for one enhanced level.
#[derive(Debug, Clone, Copy)]
pub struct Enhancer {
    pub level: Level,
    pub cem: CemParams,
    pub fbsm: FbsmParams,
}

impl Enhancer {
    fn prefix(level: Level, module: &str) -> String {
        format!("{module}.{}", level.name().to_lowercase())
    }

    pub fn register(store: &mut ParamStore, level: Level, channels: usize, cfg: &FbsmConfig) -> Result<()> {
        CemParams::register(store, &Self::prefix(level, "cem"), channels, channels)?;
        FbsmParams::register(store, &Self::prefix(level, "fbsm"), channels, channels, cfg)
    }

    pub fn bind(bound: &Bound, level: Level, cfg: &FbsmConfig) -> Result<Self> {
        Ok(Enhancer {
            level,
            cem: CemParams::bind(bound, &Self::prefix(level, "cem"))?,
            fbsm: FbsmParams::bind(bound, &Self::prefix(level, "fbsm"), cfg)?,
        })
    }
}

/// Replaces each enhanced level `L` with `fbsm(up(P5), cem(up(P5), L))`,
/// where `up` is bilinear upsampling of P5 to `L`'s resolution. All other
/// levels are passed through untouched. With `enabled == false` the input
/// pyramid is returned as is.
pub fn efpn_bs_forward(g: &mut Graph, pyr: &PyramidSet, enhancers: &[Enhancer], enabled: bool) -> Result<PyramidSet> {
    if !enabled {
        return Ok(pyr.clone());
    }
    let p5 = pyr.get(Level::P5)?;
    let mut levels = pyr.levels.clone();
    for e in enhancers {
        let low = pyr.get(e.level)?;
        let (_, h, w) = g.value(low).chw()?;
        let aligned = g.bilinear_upsample(p5, (h, w))?;
        let enhanced = cem::cem_forward(g, aligned, low, &e.cem)?;
        let refined = fbsm::fbsm_forward(g, aligned, enhanced, &e.fbsm)?;
        levels.insert(e.level, refined);
    }
    Ok(PyramidSet::new(levels))
}
