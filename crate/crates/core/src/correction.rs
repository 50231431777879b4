//! Local element correction: a projected channel concat of queries and keys
//! refined by a residual detail-inquiry net built from two inception-style
//! element generators.
//!
//! Generator I runs a 1×1 and a 3×3 path; generator II runs 1×1→3×3 and
//! 1×1→5×5 paths. Every generator conv is followed by a ReLU, the 1×1
//! entry/exit projections are linear. All convolutions keep the spatial size.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{grid_to_tokens, tokens_to_grid, Conv};
use crate::params::{Bound, Init};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LecConfig {
    pub channels: usize,
    /// Output channels of each generator path; a generator emits twice this.
    pub path_channels: usize,
}

impl LecConfig {
    /// `c/4` per path, so each generator emits `c/2` channels.
    pub fn with_default_paths(channels: usize) -> Self {
        LecConfig {
            channels,
            path_channels: (channels / 4).max(1),
        }
    }

    pub fn generator_channels(&self) -> usize {
        2 * self.path_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.path_channels == 0 || self.generator_channels() >= self.channels {
            return Err(Error::config(format!(
                "lec.path_channels ({}) must be positive with 2·path_channels < channels ({})",
                self.path_channels, self.channels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorVariant {
    /// Paths 1×1 and 3×3.
    Narrow,
    /// Paths 1×1→3×3 and 1×1→5×5.
    Wide,
}

impl GeneratorVariant {
    /// (path name, [(conv name, kernel)])
    fn layout(self) -> &'static [(&'static str, &'static [(&'static str, usize)])] {
        match self {
            GeneratorVariant::Narrow => &[("b1", &[("conv", 1)]), ("b3", &[("conv", 3)])],
            GeneratorVariant::Wide => &[
                ("b3", &[("reduce", 1), ("conv", 3)]),
                ("b5", &[("reduce", 1), ("conv", 5)]),
            ],
        }
    }
}

pub fn init_generator<T: Real, R: Rng>(
    init: &mut Init<'_, T, R>,
    prefix: &str,
    variant: GeneratorVariant,
    cfg: &LecConfig,
) {
    let p = cfg.path_channels;
    for (path, convs) in variant.layout() {
        let mut c_in = cfg.channels;
        for (name, k) in convs.iter() {
            init.conv(&format!("{prefix}.{path}.{name}"), p, c_in, *k, 2f64.sqrt());
            c_in = p;
        }
    }
}

pub fn init_din<T: Real, R: Rng>(init: &mut Init<'_, T, R>, prefix: &str, cfg: &LecConfig) {
    init_generator(
        init,
        &format!("{prefix}.eg1"),
        GeneratorVariant::Narrow,
        cfg,
    );
    init_generator(init, &format!("{prefix}.eg2"), GeneratorVariant::Wide, cfg);
    init.conv(
        &format!("{prefix}.proj_out"),
        cfg.channels,
        2 * cfg.generator_channels(),
        1,
        0.5,
    );
}

pub fn init_lec<T: Real, R: Rng>(init: &mut Init<'_, T, R>, prefix: &str, cfg: &LecConfig) {
    init.conv(
        &format!("{prefix}.proj_in"),
        cfg.channels,
        2 * cfg.channels,
        1,
        1.0,
    );
    init_din(init, prefix, cfg);
}

pub struct GeneratorParams<'g, T: Real> {
    pub variant: GeneratorVariant,
    pub paths: Vec<Vec<Conv<'g, T>>>,
}

impl<'g, T: Real> GeneratorParams<'g, T> {
    pub fn bind(b: &Bound<'g, T>, prefix: &str, variant: GeneratorVariant) -> Result<Self> {
        let paths = variant
            .layout()
            .iter()
            .map(|(path, convs)| {
                convs
                    .iter()
                    .map(|(name, _)| Conv::bind_same(b, &format!("{prefix}.{path}.{name}")))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GeneratorParams { variant, paths })
    }

    pub fn out_channels(&self) -> usize {
        self.paths
            .iter()
            .map(|p| p.last().map_or(0, Conv::out_channels))
            .sum()
    }
}

pub struct DinParams<'g, T: Real> {
    pub eg1: GeneratorParams<'g, T>,
    pub eg2: GeneratorParams<'g, T>,
    pub proj_out: Conv<'g, T>,
}

impl<'g, T: Real> DinParams<'g, T> {
    pub fn bind(b: &Bound<'g, T>, prefix: &str) -> Result<Self> {
        let p = DinParams {
            eg1: GeneratorParams::bind(b, &format!("{prefix}.eg1"), GeneratorVariant::Narrow)?,
            eg2: GeneratorParams::bind(b, &format!("{prefix}.eg2"), GeneratorVariant::Wide)?,
            proj_out: Conv::bind_same(b, &format!("{prefix}.proj_out"))?,
        };
        let concat = p.eg1.out_channels() + p.eg2.out_channels();
        let proj_in = p.proj_out.weight.shape()[1];
        if concat != proj_in {
            return Err(Error::config(format!(
                "{prefix}: generators emit {concat} channels but proj_out expects {proj_in}"
            )));
        }
        Ok(p)
    }
}

pub struct LecParams<'g, T: Real> {
    pub proj_in: Conv<'g, T>,
    pub din: DinParams<'g, T>,
}

impl<'g, T: Real> LecParams<'g, T> {
    pub fn bind(b: &Bound<'g, T>, prefix: &str) -> Result<Self> {
        Ok(LecParams {
            proj_in: Conv::bind_same(b, &format!("{prefix}.proj_in"))?,
            din: DinParams::bind(b, prefix)?,
        })
    }
}

/// Channel concat of the generator's rectified paths, `c'×H×W`.
pub fn element_generator<'g, T: Real>(
    x: Var<'g, T>,
    params: &GeneratorParams<'g, T>,
) -> Result<Var<'g, T>> {
    let c_in = x.shape()[0];
    let outs = params
        .paths
        .iter()
        .map(|path| {
            let first = path
                .first()
                .ok_or_else(|| Error::config("empty generator path"))?;
            if first.weight.shape()[1] != c_in {
                return Err(Error::config(format!(
                    "generator path expects {} input channels, got {c_in}",
                    first.weight.shape()[1]
                )));
            }
            path.iter()
                .try_fold(x, |h, conv| Ok(conv.forward(h)?.relu()))
        })
        .collect::<Result<Vec<_>>>()?;
    Var::concat_rows(&outs)
}

/// `x + Proj(Cat(EG_I(x), EG_II(x)))` on a `c×H×W` map.
pub fn din<'g, T: Real>(x: Var<'g, T>, params: &DinParams<'g, T>) -> Result<Var<'g, T>> {
    let cat = Var::concat_rows(&[
        element_generator(x, &params.eg1)?,
        element_generator(x, &params.eg2)?,
    ])?;
    x.add(params.proj_out.forward(cat)?)
}

/// Detail-correction map `DIN(Proj(Cat(Q, K)))` for `n×c` token sequences
/// on an `height×width` grid.
pub fn lec<'g, T: Real>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    params: &LecParams<'g, T>,
    height: usize,
    width: usize,
) -> Result<Var<'g, T>> {
    if q.shape() != k.shape() {
        return Err(Error::contract(format!(
            "LEC inputs must match, got {:?} and {:?}",
            q.shape(),
            k.shape()
        )));
    }
    let cat = Var::concat_rows(&[
        tokens_to_grid(q, height, width)?,
        tokens_to_grid(k, height, width)?,
    ])?;
    grid_to_tokens(din(params.proj_in.forward(cat)?, &params.din)?)
}
