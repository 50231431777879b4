//! Weight-shared five-layer convolutional backbone and depth-wise
//! cross-correlation of template and search features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::kernels::conv_out_len;
use crate::layers::{grid_to_tokens, Conv};
use crate::params::{Bound, Init};
use crate::tensor::Real;

pub const LAYERS: usize = 5;

/// Per-layer geometry. Layers 3, 4 and 5 must agree in channel count and
/// output resolution so their correlation maps tokenize to equal shapes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub pads: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneConfig {
    /// 3→8→16→16→16→16; two stride-2 stages then stride 1. A 32×32 input
    /// yields 6×6×16 at levels 3–5.
    pub fn toy() -> Self {
        BackboneConfig {
            channels: vec![8, 16, 16, 16, 16],
            kernels: vec![4, 4, 3, 3, 3],
            strides: vec![2, 2, 1, 1, 1],
            pads: vec![1, 1, 0, 1, 1],
        }
    }

    /// AlexNet-like geometry for 127×127 templates and 287×287 search regions.
    pub fn paper_scale() -> Self {
        BackboneConfig {
            channels: vec![96, 256, 256, 256, 256],
            kernels: vec![11, 5, 3, 3, 3],
            strides: vec![2, 2, 1, 1, 1],
            pads: vec![0, 0, 0, 1, 1],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.channels[LAYERS - 1]
    }

    /// Product of the strides: image pixels per correlation cell.
    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    /// Spatial side of each layer's output for a square input of side `input`.
    pub fn feature_sizes(&self, input: usize) -> Result<[usize; LAYERS]> {
        self.validate_lists()?;
        let mut out = [0; LAYERS];
        let mut side = input;
        for (i, o) in out.iter_mut().enumerate() {
            side = conv_out_len(side, self.kernels[i], self.strides[i], self.pads[i]).map_err(
                |e| Error::config(format!("backbone layer {} on {input}px input: {e}", i + 1)),
            )?;
            *o = side;
        }
        if out[2] != out[3] || out[3] != out[4] {
            return Err(Error::config(format!(
                "backbone layers 3–5 must share a resolution, got {:?} for {input}px input",
                &out[2..]
            )));
        }
        Ok(out)
    }

    /// Side of the correlation grid for the given template/search sizes.
    pub fn grid_side(&self, template: usize, search: usize) -> Result<usize> {
        let z = self.feature_sizes(template)?[LAYERS - 1];
        let x = self.feature_sizes(search)?[LAYERS - 1];
        if z > x {
            return Err(Error::config(format!(
                "template features ({z}) larger than search features ({x})"
            )));
        }
        Ok(x - z + 1)
    }

    fn validate_lists(&self) -> Result<()> {
        for (key, list) in [
            ("backbone.channels", &self.channels),
            ("backbone.kernels", &self.kernels),
            ("backbone.strides", &self.strides),
            ("backbone.pads", &self.pads),
        ] {
            if list.len() != LAYERS {
                return Err(Error::config(format!(
                    "{key} needs {LAYERS} entries, got {}",
                    list.len()
                )));
            }
        }
        if self.channels.contains(&0) || self.kernels.contains(&0) {
            return Err(Error::config(
                "backbone channels and kernels must be positive",
            ));
        }
        if self.channels[2] != self.channels[3] || self.channels[3] != self.channels[4] {
            return Err(Error::config(format!(
                "backbone.channels[2..5] must be equal, got {:?}",
                &self.channels[2..]
            )));
        }
        Ok(())
    }
}

pub fn init_backbone<T: Real, R: Rng>(init: &mut Init<'_, T, R>, cfg: &BackboneConfig) {
    let mut c_in = 3;
    for (i, &c) in cfg.channels.iter().enumerate() {
        init.conv(
            &format!("backbone.conv{}", i + 1),
            c,
            c_in,
            cfg.kernels[i],
            2f64.sqrt(),
        );
        c_in = c;
    }
}

pub struct BackboneParams<'g, T: Real> {
    pub layers: Vec<Conv<'g, T>>,
}

impl<'g, T: Real> BackboneParams<'g, T> {
    pub fn bind(b: &Bound<'g, T>, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate_lists()?;
        Ok(BackboneParams {
            layers: (0..LAYERS)
                .map(|i| {
                    Conv::bind(
                        b,
                        &format!("backbone.conv{}", i + 1),
                        cfg.strides[i],
                        cfg.pads[i],
                    )
                })
                .collect::<Result<_>>()?,
        })
    }
}

/// Activations of backbone layers 3, 4 and 5.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid<'g, T: Real> {
    pub levels: [Var<'g, T>; 3],
}

/// Layers 1–4 are rectified; layer 5 is left linear.
pub fn backbone_forward<'g, T: Real>(
    image: Var<'g, T>,
    params: &BackboneParams<'g, T>,
) -> Result<FeaturePyramid<'g, T>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::contract(format!(
            "backbone expects a 3×H×W image, got {shape:?}"
        )));
    }
    let mut outs = Vec::with_capacity(LAYERS);
    let mut x = image;
    for (i, conv) in params.layers.iter().enumerate() {
        x = conv.forward(x)?;
        if i + 1 < LAYERS {
            x = x.relu();
        }
        outs.push(x);
    }
    Ok(FeaturePyramid {
        levels: [outs[2], outs[3], outs[4]],
    })
}

/// Per-channel valid correlation of search features by template features.
pub fn dwc<'g, T: Real>(template: Var<'g, T>, search: Var<'g, T>) -> Result<Var<'g, T>> {
    let (zs, xs) = (template.shape(), search.shape());
    if zs.len() != 3 || xs.len() != 3 || zs[0] != xs[0] {
        return Err(Error::contract(format!(
            "correlation needs C×H×W maps with equal C, got {zs:?} and {xs:?}"
        )));
    }
    if zs[1] > xs[1] || zs[2] > xs[2] {
        return Err(Error::contract(format!(
            "template {zs:?} is larger than search {xs:?}"
        )));
    }
    search.depthwise_xcorr(template)
}

/// Correlation tokens `M3, M4, M5` (each `n×C`, n = height·width).
#[derive(Clone, Copy, Debug)]
pub struct CorrelationTokens<'g, T: Real> {
    pub levels: [Var<'g, T>; 3],
    pub height: usize,
    pub width: usize,
}

pub fn correlation_pyramid<'g, T: Real>(
    template: Var<'g, T>,
    search: Var<'g, T>,
    params: &BackboneParams<'g, T>,
) -> Result<CorrelationTokens<'g, T>> {
    let fz = backbone_forward(template, params)?;
    let fx = backbone_forward(search, params)?;
    let mut maps = Vec::with_capacity(3);
    for (z, x) in fz.levels.into_iter().zip(fx.levels) {
        maps.push(dwc(z, x)?);
    }
    let shape = maps[0].shape();
    if maps.iter().any(|m| m.shape() != shape) {
        return Err(Error::contract("correlation levels disagree in shape"));
    }
    Ok(CorrelationTokens {
        levels: [
            grid_to_tokens(maps[0])?,
            grid_to_tokens(maps[1])?,
            grid_to_tokens(maps[2])?,
        ],
        height: shape[1],
        width: shape[2],
    })
}
