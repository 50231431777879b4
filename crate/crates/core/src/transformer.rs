//! Two local-recognition encoder layers and one global decoder layer, all
//! post-norm and shape-preserving on `n×c` token sequences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    init_lra, init_mha, mh_lra, mha_global, AttentionParams, LraConfig, MhaParams, ScopeMask,
};
use crate::autodiff::Var;
use crate::correction::{din, init_din, init_lec, lec, DinParams, LecConfig, LecParams};
use crate::error::{Error, Result};
use crate::layers::{grid_to_tokens, tokens_to_grid, Linear, Norm};
use crate::params::{Bound, Init};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub channels: usize,
    pub heads: usize,
    /// LRA window side for encoder 1 and encoder 2.
    pub windows: [usize; 2],
    pub ffn_hidden: usize,
    pub lec_path_channels: usize,
    pub norm_eps: f64,
    /// Second encoder residual on `M4` and no residual around the decoder's
    /// self-attention.
    pub paper_literal_residual: bool,
}

impl TransformerConfig {
    pub fn new(channels: usize, heads: usize, window: usize) -> Self {
        TransformerConfig {
            channels,
            heads,
            windows: [window; 2],
            ffn_hidden: 2 * channels,
            lec_path_channels: LecConfig::with_default_paths(channels).path_channels,
            norm_eps: 1e-5,
            paper_literal_residual: false,
        }
    }

    pub fn lra(&self, layer: usize) -> LraConfig {
        LraConfig {
            channels: self.channels,
            heads: self.heads,
            window: self.windows[layer],
        }
    }

    pub fn lec(&self) -> LecConfig {
        LecConfig {
            channels: self.channels,
            path_channels: self.lec_path_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lra(0).validate()?;
        self.lra(1).validate()?;
        self.lec().validate()?;
        if self.ffn_hidden == 0 {
            return Err(Error::config("ffn_hidden must be positive"));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("norm eps must be positive"));
        }
        Ok(())
    }
}

pub fn init_ffn<T: Real, R: Rng>(init: &mut Init<'_, T, R>, prefix: &str, c: usize, hidden: usize) {
    init.matrix(&format!("{prefix}.fc1.weight"), c, hidden, 2f64.sqrt());
    init.full(&format!("{prefix}.fc1.bias"), &[hidden], 0.0);
    init.matrix(&format!("{prefix}.fc2.weight"), hidden, c, 1.0);
    init.full(&format!("{prefix}.fc2.bias"), &[c], 0.0);
}

fn init_encoder<T: Real, R: Rng>(
    init: &mut Init<'_, T, R>,
    prefix: &str,
    cfg: &TransformerConfig,
    layer: usize,
) {
    let c = cfg.channels;
    init_lra(init, &format!("{prefix}.lra"), &cfg.lra(layer));
    init_lec(init, &format!("{prefix}.lec"), &cfg.lec());
    init_ffn(init, &format!("{prefix}.ffn"), c, cfg.ffn_hidden);
    for i in 1..=3 {
        init.norm(&format!("{prefix}.norm{i}"), c);
    }
}

/// Parameters `enc1.*`, `enc2.*` and `dec.*`.
pub fn init_transformer<T: Real, R: Rng>(init: &mut Init<'_, T, R>, cfg: &TransformerConfig) {
    let c = cfg.channels;
    init_encoder(init, "enc1", cfg, 0);
    init_encoder(init, "enc2", cfg, 1);
    init_din(init, "dec.din", &cfg.lec());
    init_mha(init, "dec.mhsa", c);
    init_mha(init, "dec.mha", c);
    init_lec(init, "dec.lec", &cfg.lec());
    init_ffn(init, "dec.ffn", c, cfg.ffn_hidden);
    for i in 1..=4 {
        init.norm(&format!("dec.norm{i}"), c);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams<'g, T: Real> {
    pub fc1: Linear<'g, T>,
    pub fc2: Linear<'g, T>,
}

impl<'g, T: Real> FfnParams<'g, T> {
    pub fn bind(b: &Bound<'g, T>, prefix: &str) -> Result<Self> {
        Ok(FfnParams {
            fc1: Linear::bind(b, &format!("{prefix}.fc1"))?,
            fc2: Linear::bind(b, &format!("{prefix}.fc2"))?,
        })
    }
}

/// `ReLU(x·W1 + b1)·W2 + b2` per token.
pub fn ffn<'g, T: Real>(x: Var<'g, T>, params: &FfnParams<'g, T>) -> Result<Var<'g, T>> {
    params.fc2.forward(params.fc1.forward(x)?.relu())
}

pub struct EncoderLayerParams<'g, T: Real> {
    pub lra: AttentionParams<'g, T>,
    pub lec: LecParams<'g, T>,
    pub ffn: FfnParams<'g, T>,
    pub norms: [Norm<'g, T>; 3],
}

impl<'g, T: Real> EncoderLayerParams<'g, T> {
    pub fn bind(
        b: &Bound<'g, T>,
        prefix: &str,
        cfg: &TransformerConfig,
        layer: usize,
    ) -> Result<Self> {
        let norm = |i: usize| Norm::bind(b, &format!("{prefix}.norm{i}"), cfg.norm_eps);
        Ok(EncoderLayerParams {
            lra: AttentionParams::bind(b, &format!("{prefix}.lra"), cfg.lra(layer))?,
            lec: LecParams::bind(b, &format!("{prefix}.lec"))?,
            ffn: FfnParams::bind(b, &format!("{prefix}.ffn"))?,
            norms: [norm(1)?, norm(2)?, norm(3)?],
        })
    }
}

pub struct DecoderLayerParams<'g, T: Real> {
    pub din: DinParams<'g, T>,
    pub mhsa: MhaParams<'g, T>,
    pub mha: MhaParams<'g, T>,
    pub lec: LecParams<'g, T>,
    pub ffn: FfnParams<'g, T>,
    pub norms: [Norm<'g, T>; 4],
}

impl<'g, T: Real> DecoderLayerParams<'g, T> {
    pub fn bind(b: &Bound<'g, T>, prefix: &str, cfg: &TransformerConfig) -> Result<Self> {
        let norm = |i: usize| Norm::bind(b, &format!("{prefix}.norm{i}"), cfg.norm_eps);
        Ok(DecoderLayerParams {
            din: DinParams::bind(b, &format!("{prefix}.din"))?,
            mhsa: MhaParams::bind(b, &format!("{prefix}.mhsa"), cfg.heads)?,
            mha: MhaParams::bind(b, &format!("{prefix}.mha"), cfg.heads)?,
            lec: LecParams::bind(b, &format!("{prefix}.lec"))?,
            ffn: FfnParams::bind(b, &format!("{prefix}.ffn"))?,
            norms: [norm(1)?, norm(2)?, norm(3)?, norm(4)?],
        })
    }
}

pub struct TransformerParams<'g, T: Real> {
    pub cfg: TransformerConfig,
    pub enc1: EncoderLayerParams<'g, T>,
    pub enc2: EncoderLayerParams<'g, T>,
    pub dec: DecoderLayerParams<'g, T>,
}

impl<'g, T: Real> TransformerParams<'g, T> {
    pub fn bind(b: &Bound<'g, T>, cfg: &TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(TransformerParams {
            cfg: *cfg,
            enc1: EncoderLayerParams::bind(b, "enc1", cfg, 0)?,
            enc2: EncoderLayerParams::bind(b, "enc2", cfg, 1)?,
            dec: DecoderLayerParams::bind(b, "dec", cfg)?,
        })
    }
}

fn same_shape<T: Real>(what: &str, xs: &[Var<'_, T>]) -> Result<()> {
    let s = xs[0].shape();
    if s.len() != 2 || xs.iter().any(|x| x.shape() != s) {
        return Err(Error::contract(format!(
            "{what} inputs must be equal n×c sequences, got {:?}",
            xs.iter().map(|x| x.shape()).collect::<Vec<_>>()
        )));
    }
    Ok(())
}

/// Shared encoder body:
/// `M̂ = Norm1(MH-LRA(q, kv, kv) + residual)`,
/// `out = Norm3(LEC(lec_a, lec_b) + Norm2(FFN(M̂) + M̂))`.
pub fn encoder_block<'g, T: Real>(
    q: Var<'g, T>,
    kv: Var<'g, T>,
    residual: Var<'g, T>,
    lec_inputs: (Var<'g, T>, Var<'g, T>),
    params: &EncoderLayerParams<'g, T>,
    scope: &ScopeMask,
) -> Result<Var<'g, T>> {
    same_shape("encoder", &[q, kv, residual, lec_inputs.0, lec_inputs.1])?;
    let [n1, n2, n3] = &params.norms;
    let t = lec(
        lec_inputs.0,
        lec_inputs.1,
        &params.lec,
        scope.height(),
        scope.width(),
    )?;
    let m_hat = n1.forward(mh_lra(q, kv, kv, &params.lra, scope)?.add(residual)?)?;
    let inner = n2.forward(ffn(m_hat, &params.ffn)?.add(m_hat)?)?;
    n3.forward(t.add(inner)?)
}

/// Queries from `M4`, keys and values from `M3`.
pub fn encoder_layer_1<'g, T: Real>(
    m3: Var<'g, T>,
    m4: Var<'g, T>,
    params: &EncoderLayerParams<'g, T>,
    scope: &ScopeMask,
) -> Result<Var<'g, T>> {
    encoder_block(m4, m3, m4, (m3, m4), params, scope)
}

/// Queries from `M5`, keys and values from the first encoder's output.
pub fn encoder_layer_2<'g, T: Real>(
    m5: Var<'g, T>,
    m_e1: Var<'g, T>,
    params: &EncoderLayerParams<'g, T>,
    scope: &ScopeMask,
) -> Result<Var<'g, T>> {
    encoder_block(m5, m_e1, m5, (m_e1, m_e1), params, scope)
}

/// Queries preset by `DIN(M5)`; global self-attention, then global
/// cross-attention onto the encoder memory.
pub fn decoder_layer<'g, T: Real>(
    m5: Var<'g, T>,
    m_e2: Var<'g, T>,
    params: &DecoderLayerParams<'g, T>,
    grid: (usize, usize),
    self_residual: bool,
) -> Result<Var<'g, T>> {
    same_shape("decoder", &[m5, m_e2])?;
    let (h, w) = grid;
    let [n1, n2, n3, n4] = &params.norms;
    let x = grid_to_tokens(din(tokens_to_grid(m5, h, w)?, &params.din)?)?;
    let sa = mha_global(x, x, x, &params.mhsa)?;
    let q_hat = n1.forward(if self_residual { sa.add(x)? } else { sa })?;
    let t = lec(q_hat, m_e2, &params.lec, h, w)?;
    let m_hat = n2.forward(mha_global(q_hat, m_e2, m_e2, &params.mha)?.add(q_hat)?)?;
    let inner = n3.forward(ffn(m_hat, &params.ffn)?.add(m_hat)?)?;
    n4.forward(t.add(inner)?)
}

/// `M3, M4, M5 → M_D`. `scopes` are the LRA windows of the two encoders.
pub fn transformer_forward<'g, T: Real>(
    levels: [Var<'g, T>; 3],
    params: &TransformerParams<'g, T>,
    scopes: &[ScopeMask; 2],
) -> Result<Var<'g, T>> {
    let [m3, m4, m5] = levels;
    same_shape("transformer", &levels)?;
    let grid = (scopes[0].height(), scopes[0].width());
    if (scopes[1].height(), scopes[1].width()) != grid {
        return Err(Error::contract("encoder scopes disagree on the grid"));
    }
    let literal = params.cfg.paper_literal_residual;
    let m_e1 = encoder_layer_1(m3, m4, &params.enc1, &scopes[0])?;
    let m_e2 = if literal {
        encoder_block(m5, m_e1, m4, (m_e1, m_e1), &params.enc2, &scopes[1])?
    } else {
        encoder_layer_2(m5, m_e1, &params.enc2, &scopes[1])?
    };
    decoder_layer(m5, m_e2, &params.dec, grid, !literal)
}

/// Scope masks for both encoders on an `h×w` grid.
pub fn build_scopes(cfg: &TransformerConfig, h: usize, w: usize) -> Result<[ScopeMask; 2]> {
    Ok([
        ScopeMask::new(h, w, cfg.windows[0])?,
        ScopeMask::new(h, w, cfg.windows[1])?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::params::ModelParams;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (TransformerConfig, ModelParams<f64>) {
        let cfg = TransformerConfig::new(8, 2, 3);
        let mut p = ModelParams::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_transformer(&mut Init::new(&mut p, &mut rng), &cfg);
        (cfg, p)
    }

    fn tokens(g: &Graph<f64>, n: usize, c: usize, seed: u64) -> Var<'_, f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        g.leaf(Tensor::uniform(&[n, c], 1.0, &mut rng))
    }

    #[test]
    fn ffn_zero_weights_give_zero() {
        let g = Graph::<f64>::new();
        let mut p = ModelParams::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_ffn(&mut Init::new(&mut p, &mut rng), "f", 4, 8);
        for (_, t) in p.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let b = p.bind(&g);
        let y = ffn(tokens(&g, 5, 4, 1), &FfnParams::bind(&b, "f").unwrap()).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layers_preserve_shape() {
        let (cfg, p) = setup(3);
        let g = Graph::new();
        let b = p.bind(&g);
        let params = TransformerParams::bind(&b, &cfg).unwrap();
        let scopes = build_scopes(&cfg, 3, 4).unwrap();
        let levels = [0, 1, 2].map(|s| tokens(&g, 12, 8, s));
        let out = transformer_forward(levels, &params, &scopes).unwrap();
        assert_eq!(out.shape(), vec![12, 8]);
        assert!(out.value().all_finite());
    }

    #[test]
    fn mismatched_levels_rejected() {
        let (cfg, p) = setup(3);
        let g = Graph::new();
        let b = p.bind(&g);
        let params = TransformerParams::bind(&b, &cfg).unwrap();
        let scopes = build_scopes(&cfg, 3, 3).unwrap();
        let levels = [
            tokens(&g, 9, 8, 0),
            tokens(&g, 9, 8, 1),
            tokens(&g, 8, 8, 2),
        ];
        assert!(matches!(
            transformer_forward(levels, &params, &scopes),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn literal_flag_changes_output() {
        let (mut cfg, p) = setup(5);
        let g = Graph::new();
        let b = p.bind(&g);
        let scopes = build_scopes(&cfg, 3, 3).unwrap();
        let levels = [0, 1, 2].map(|s| tokens(&g, 9, 8, s));
        let a = transformer_forward(levels, &TransformerParams::bind(&b, &cfg).unwrap(), &scopes)
            .unwrap();
        cfg.paper_literal_residual = true;
        let l = transformer_forward(levels, &TransformerParams::bind(&b, &cfg).unwrap(), &scopes)
            .unwrap();
        assert!(a.value().max_abs_diff(&l.value()).unwrap() > 1e-6);
    }
}
