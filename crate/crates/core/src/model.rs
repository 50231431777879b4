//! The full tracker: shared backbone, correlation pyramid, transformer and
//! prediction head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::ScopeMask;
use crate::autodiff::{Graph, Var};
use crate::backbone::{correlation_pyramid, init_backbone, BackboneConfig, BackboneParams};
use crate::error::{Error, Result};
use crate::head::{
    head_forward, init_head, loss_total, GridGeometry, HeadConfig, HeadMaps, HeadOutput,
    HeadParams, LossTerms, Targets,
};
use crate::params::{Bound, Init, ModelParams};
use crate::tensor::{Real, Tensor};
use crate::transformer::{
    build_scopes, init_transformer, transformer_forward, TransformerConfig, TransformerParams,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionSection {
    /// Token channels; must equal the backbone's last channel count.
    pub channels: usize,
    pub heads: usize,
    /// LRA window of both encoders.
    pub k: usize,
    /// Overrides `k` for the second encoder.
    pub k2: Option<usize>,
    /// Defaults to `2·channels`.
    pub ffn_hidden: Option<usize>,
    /// Defaults to `channels / 4`.
    pub lec_path_channels: Option<usize>,
    pub norm_eps: f64,
}

impl Default for AttentionSection {
    fn default() -> Self {
        AttentionSection {
            channels: 16,
            heads: 2,
            k: 3,
            k2: None,
            ffn_hidden: None,
            lec_path_channels: None,
            norm_eps: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputSection {
    pub template_size: usize,
    pub search_size: usize,
}

impl Default for InputSection {
    fn default() -> Self {
        InputSection {
            template_size: 32,
            search_size: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Flags {
    pub paper_literal_residual: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub attention: AttentionSection,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub input: InputSection,
    pub flags: Flags,
}

impl ModelConfig {
    /// 32/64 crops, 16-channel tokens on a 9×9 grid.
    pub fn toy() -> Self {
        Self::default()
    }

    /// 127/287 crops and 256-channel tokens on a 41×41 grid.
    pub fn paper_scale() -> Self {
        ModelConfig {
            attention: AttentionSection {
                channels: 256,
                heads: 8,
                ..AttentionSection::default()
            },
            backbone: BackboneConfig::paper_scale(),
            input: InputSection {
                template_size: 127,
                search_size: 287,
            },
            ..Self::default()
        }
    }

    pub fn transformer(&self) -> TransformerConfig {
        let a = &self.attention;
        let mut t = TransformerConfig::new(a.channels, a.heads, a.k);
        t.windows[1] = a.k2.unwrap_or(a.k);
        if let Some(h) = a.ffn_hidden {
            t.ffn_hidden = h;
        }
        if let Some(p) = a.lec_path_channels {
            t.lec_path_channels = p;
        }
        t.norm_eps = a.norm_eps;
        t.paper_literal_residual = self.flags.paper_literal_residual;
        t
    }

    pub fn grid_side(&self) -> Result<usize> {
        self.backbone
            .grid_side(self.input.template_size, self.input.search_size)
    }

    pub fn geometry(&self) -> Result<GridGeometry> {
        let side = self.grid_side()?;
        let s = self.input.search_size as f64 / 2.0;
        Ok(GridGeometry {
            height: side,
            width: side,
            stride: self.backbone.total_stride() as f64,
            center: (s, s),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.transformer().validate()?;
        self.head.validate()?;
        self.grid_side()?;
        if self.backbone.out_channels() != self.attention.channels {
            return Err(Error::config(format!(
                "attention.channels ({}) must equal backbone.channels[4] ({})",
                self.attention.channels,
                self.backbone.out_channels()
            )));
        }
        Ok(())
    }
}

/// Validated configuration plus the derived grid, scopes and label geometry.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub transformer: TransformerConfig,
    pub geometry: GridGeometry,
    pub scopes: [ScopeMask; 2],
}

pub struct TrackerParams<'g, T: Real> {
    pub backbone: BackboneParams<'g, T>,
    pub transformer: TransformerParams<'g, T>,
    pub head: HeadParams<'g, T>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let transformer = cfg.transformer();
        let geometry = cfg.geometry()?;
        let scopes = build_scopes(&transformer, geometry.height, geometry.width)?;
        Ok(Model {
            cfg,
            transformer,
            geometry,
            scopes,
        })
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ModelParams<T> {
        let mut p = ModelParams::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut p, &mut rng);
        init_backbone(&mut init, &self.cfg.backbone);
        init_transformer(&mut init, &self.transformer);
        init_head(&mut init, self.cfg.attention.channels);
        p
    }

    pub fn bind<'g, T: Real>(&self, b: &Bound<'g, T>) -> Result<TrackerParams<'g, T>> {
        Ok(TrackerParams {
            backbone: BackboneParams::bind(b, &self.cfg.backbone)?,
            transformer: TransformerParams::bind(b, &self.transformer)?,
            head: HeadParams::bind(b)?,
        })
    }

    fn check_crop<T: Real>(&self, what: &str, x: Var<'_, T>, side: usize) -> Result<()> {
        if x.shape() != [3, side, side] {
            return Err(Error::contract(format!(
                "{what} crop must be 3×{side}×{side}, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward<'g, T: Real>(
        &self,
        params: &TrackerParams<'g, T>,
        template: Var<'g, T>,
        search: Var<'g, T>,
    ) -> Result<HeadOutput<'g, T>> {
        self.check_crop("template", template, self.cfg.input.template_size)?;
        self.check_crop("search", search, self.cfg.input.search_size)?;
        let tokens = correlation_pyramid(template, search, &params.backbone)?;
        let m_d = transformer_forward(tokens.levels, &params.transformer, &self.scopes)?;
        head_forward(m_d, &params.head, (tokens.height, tokens.width))
    }

    pub fn loss<'g, T: Real>(
        &self,
        params: &TrackerParams<'g, T>,
        template: Var<'g, T>,
        search: Var<'g, T>,
        targets: &Targets,
    ) -> Result<LossTerms<'g, T>> {
        let out = self.forward(params, template, search)?;
        loss_total(&out, targets, &self.cfg.head)
    }

    /// Forward pass without keeping the graph.
    pub fn predict<T: Real>(
        &self,
        params: &ModelParams<T>,
        template: &Tensor<T>,
        search: &Tensor<T>,
    ) -> Result<HeadMaps<T>> {
        let g = Graph::new();
        let b = params.bind(&g);
        let tp = self.bind(&b)?;
        let out = self.forward(&tp, g.leaf(template.clone()), g.leaf(search.clone()))?;
        Ok(out.maps())
    }

    /// Center-classification radius in pixels.
    pub fn center_radius(&self) -> f64 {
        self.cfg.head.center_radius * self.geometry.stride
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn toy_model_geometry() {
        let m = Model::new(ModelConfig::toy()).unwrap();
        assert_eq!((m.geometry.height, m.geometry.width), (9, 9));
        assert_eq!(m.geometry.stride, 4.0);
        assert_eq!(m.geometry.cell_center(40), (32.0, 32.0));
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let mut cfg = ModelConfig::toy();
        cfg.attention.channels = 8;
        assert!(matches!(Model::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let m = Model::new(ModelConfig::toy()).unwrap();
        let p = m.init_params::<f64>(7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::uniform(&[3, 32, 32], 1.0, &mut rng);
        let x = Tensor::uniform(&[3, 64, 64], 1.0, &mut rng);
        let a = m.predict(&p, &z, &x).unwrap();
        let b = m.predict(&p, &z, &x).unwrap();
        assert_eq!(a.cls1.shape(), [2, 9, 9]);
        assert_eq!(a.reg.shape(), [4, 9, 9]);
        assert!(a.cls1.bit_eq(&b.cls1) && a.reg.bit_eq(&b.reg));
        assert!(a.reg.data().iter().all(|&v| v > 0.0 && v.is_finite()));
        assert!(m.predict(&p, &x, &x).is_err());
    }
}
