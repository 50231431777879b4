//! Named finite-difference checks for every differentiable primitive, every
//! layer and the assembled tracker, all on small 64-bit shapes.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    build_scope, init_lra, init_mha, lra_head, mh_lra, mha_global, AttentionParams, LraConfig,
    MhaParams,
};
use crate::autodiff::{Graph, Var};
use crate::backbone::BackboneConfig;
use crate::correction::{din, init_din, init_lec, lec, DinParams, LecConfig, LecParams};
use crate::dd::Dd;
use crate::error::Result;
use crate::gradcheck::{refined_check, GradCheckReport};
use crate::head::{assign_labels, head_forward, init_head, loss_total, BoundingBox, HeadParams};
use crate::model::{AttentionSection, InputSection, Model, ModelConfig};
use crate::params::{Bound, Init, ModelParams};
use crate::tensor::{Real, Tensor};
use crate::transformer::{
    decoder_layer, encoder_layer_1, encoder_layer_2, ffn, init_ffn, init_transformer,
    DecoderLayerParams, EncoderLayerParams, FfnParams, TransformerConfig,
};

type Eval<T> = Box<dyn for<'g> Fn(&'g Graph<T>, &Bound<'g, T>) -> Result<Var<'g, T>> + Send + Sync>;

fn eval<T: Real, F>(f: F) -> Eval<T>
where
    F: for<'g> Fn(&'g Graph<T>, &Bound<'g, T>) -> Result<Var<'g, T>> + Send + Sync + 'static,
{
    Box::new(f)
}

/// One scalar objective, instantiated in 64-bit and in double-double.
struct Objective {
    f64: Eval<f64>,
    dd: Eval<Dd>,
}

/// Builds an [`Objective`] from a closure body generic over `T`. Captures
/// listed after the closure are cloned into each instantiation.
macro_rules! objective {
    (move |$g:tt, $p:ident| $body:expr $(, $cap:ident)*) => {
        Objective {
            f64: {
                $(let $cap = $cap.clone();)*
                #[allow(unused_braces)]
                let f = eval(move |$g, $p| {
                    #[allow(dead_code)]
                    type T = f64;
                    $body
                });
                f
            },
            dd: {
                $(let $cap = $cap.clone();)*
                #[allow(unused_braces)]
                let f = eval(move |$g, $p| {
                    #[allow(dead_code)]
                    type T = Dd;
                    $body
                });
                f
            },
        }
    };
}

/// A scalar objective over `params`. Tensors in `fixed` enter the graph as
/// constants; they are the key-projection biases, whose gradient vanishes
/// identically because a softmax ignores a per-row shift of its scores.
pub struct Case {
    pub name: String,
    pub params: ModelParams<f64>,
    pub fixed: ModelParams<f64>,
    objective: Objective,
}

#[derive(Clone, Debug)]
pub struct CaseOutcome {
    pub name: String,
    pub report: GradCheckReport,
    /// Largest analytic gradient entry over the fixed tensors.
    pub fixed_grad_max: f64,
    pub fixed: Vec<String>,
}

impl CaseOutcome {
    pub fn passed(&self, tol: f64) -> bool {
        self.report.max_rel_error < tol && self.fixed_grad_max < FIXED_GRAD_LIMIT
    }
}

/// Bound on the analytic gradient of a fixed tensor.
pub const FIXED_GRAD_LIMIT: f64 = 1e-10;

impl Case {
    fn new(name: impl Into<String>, params: ModelParams<f64>, objective: Objective) -> Self {
        Case {
            name: name.into(),
            params,
            fixed: ModelParams::new(),
            objective,
        }
    }

    /// Moves every tensor whose name ends in one of `suffixes` into `fixed`.
    fn fix(mut self, suffixes: &[&str]) -> Self {
        let mut kept = ModelParams::new();
        for (name, t) in self.params.iter() {
            if suffixes.iter().any(|s| name.ends_with(s)) {
                self.fixed.insert(name, t.clone());
            } else {
                kept.insert(name, t.clone());
            }
        }
        self.params = kept;
        self
    }

    pub fn entries(&self) -> usize {
        self.params.numel()
    }

    /// Entries whose 64-bit error exceeds `refine_above` are re-measured in
    /// double-double.
    pub fn run(&self, eps: f64, refine_above: f64) -> Result<CaseOutcome> {
        let wide = self.fixed.cast::<Dd>();
        let report = refined_check(
            &self.params,
            eps,
            refine_above,
            |g, b| {
                let all = b.clone().merge(self.fixed.bind(g));
                (self.objective.f64)(g, &all)
            },
            |g, b| {
                let all = b.clone().merge(wide.bind(g));
                (self.objective.dd)(g, &all)
            },
        )?;
        let fixed_grad_max = if self.fixed.is_empty() {
            0.0
        } else {
            let g = Graph::new();
            let fixed = self.fixed.bind(&g);
            let all = self.params.bind(&g).merge(fixed.clone());
            let grads = g.backward((self.objective.f64)(&g, &all)?)?;
            fixed
                .iter()
                .flat_map(|(_, v)| grads.wrt(v).into_data())
                .fold(0.0f64, |m, x| m.max(x.abs()))
        };
        Ok(CaseOutcome {
            name: self.name.clone(),
            report,
            fixed_grad_max,
            fixed: self.fixed.names().map(str::to_string).collect(),
        })
    }
}

fn rng_for(seed: u64, salt: &str) -> ChaCha8Rng {
    let h = salt.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    });
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, bound, rng)
}

/// Uniform magnitudes in `[lo, hi]` with random sign.
fn away_from_zero(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(lo..=hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn store(entries: Vec<(&str, Tensor<f64>)>) -> ModelParams<f64> {
    let mut p = ModelParams::new();
    for (k, v) in entries {
        p.insert(k, v);
    }
    p
}

/// `Σ x ⊙ R` for a fixed random `R` in ±1 drawn from `salt`.
fn project<'g, T: Real>(g: &'g Graph<T>, x: Var<'g, T>, salt: u64) -> Result<Var<'g, T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(salt);
    let r = g.leaf(Tensor::uniform(&x.shape(), 1.0, &mut rng));
    Ok(x.mul(r)?.sum())
}

/// Biases start at zero and norms at identity; give them generic values so
/// their gradients are exercised away from that special point.
fn perturb(p: &mut ModelParams<f64>, rng: &mut ChaCha8Rng) {
    for (name, t) in p.iter_mut() {
        let offset = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
        if name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta") {
            for v in t.data_mut() {
                *v = offset + rng.random_range(-0.2..=0.2);
            }
        }
    }
}

const KEY_BIASES: [&str; 2] = ["w_k.bias", "phi_k.bias"];

/// One case per differentiable primitive.
pub fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut cases = Vec::new();
    let salt = seed.wrapping_mul(31).wrapping_add(7);
    let r = |name: &str| rng_for(seed, name);

    let mut g = r("binary");
    let (a, b) = (uniform(&[3, 4], 1.0, &mut g), uniform(&[3, 4], 1.0, &mut g));
    let ab = store(vec![("a", a), ("b", b)]);
    cases.push(Case::new(
        "add",
        ab.clone(),
        objective!(move |g, p| project(g, p.get("a")?.add(p.get("b")?)?, salt)),
    ));
    cases.push(Case::new(
        "sub",
        ab.clone(),
        objective!(move |g, p| project(g, p.get("a")?.sub(p.get("b")?)?, salt)),
    ));
    cases.push(Case::new(
        "mul",
        ab,
        objective!(move |g, p| project(g, p.get("a")?.mul(p.get("b")?)?, salt)),
    ));

    let mut g = r("unary");
    let x = store(vec![("x", uniform(&[3, 4], 1.0, &mut g))]);
    cases.push(Case::new(
        "scale",
        x.clone(),
        objective!(move |g, p| project(g, p.get("x")?.scale(T::lit(-1.7)), salt)),
    ));
    cases.push(Case::new(
        "exp",
        x.clone(),
        objective!(move |g, p| project(g, p.get("x")?.exp(), salt)),
    ));
    cases.push(Case::new(
        "reshape",
        x.clone(),
        objective!(move |g, p| project(g, p.get("x")?.reshape(&[2, 6])?, salt)),
    ));
    cases.push(Case::new(
        "transpose",
        x.clone(),
        objective!(move |g, p| project(g, p.get("x")?.transpose()?, salt)),
    ));
    cases.push(Case::new(
        "softmax_rows",
        x.clone(),
        objective!(move |g, p| project(g, p.get("x")?.softmax_rows()?, salt)),
    ));
    cases.push(Case::new(
        "slice_cols",
        x.clone(),
        objective!(move |g, p| project(g, p.get("x")?.slice_cols(1, 2)?, salt)),
    ));
    cases.push(Case::new(
        "sum",
        x.clone(),
        objective!(move |_, p| Ok(p.get("x")?.exp().sum())),
    ));
    cases.push(Case::new(
        "mean",
        x,
        objective!(move |_, p| Ok(p.get("x")?.exp().mean())),
    ));

    let mut g = r("relu");
    let x = store(vec![("x", away_from_zero(&[3, 4], 0.05, 1.0, &mut g))]);
    cases.push(Case::new(
        "relu",
        x,
        objective!(move |g, p| project(g, p.get("x")?.relu(), salt)),
    ));

    let mut g = r("matmul");
    let mm = store(vec![
        ("a", uniform(&[3, 4], 1.0, &mut g)),
        ("b", uniform(&[4, 5], 1.0, &mut g)),
    ]);
    cases.push(Case::new(
        "matmul",
        mm,
        objective!(move |g, p| project(g, p.get("a")?.matmul(p.get("b")?)?, salt)),
    ));

    let mut g = r("bias");
    let rb = store(vec![
        ("x", uniform(&[3, 4], 1.0, &mut g)),
        ("bias", uniform(&[4], 1.0, &mut g)),
    ]);
    cases.push(Case::new(
        "add_row_bias",
        rb,
        objective!(move |g, p| project(g, p.get("x")?.add_row_bias(p.get("bias")?)?, salt)),
    ));
    let cb = store(vec![
        ("x", uniform(&[2, 3, 3], 1.0, &mut g)),
        ("bias", uniform(&[2], 1.0, &mut g)),
    ]);
    cases.push(Case::new(
        "add_channel_bias",
        cb,
        objective!(move |g, p| project(g, p.get("x")?.add_channel_bias(p.get("bias")?)?, salt)),
    ));

    let mut g = r("conv");
    let c1 = store(vec![
        ("x", uniform(&[2, 5, 5], 1.0, &mut g)),
        ("k", uniform(&[3, 2, 3, 3], 1.0, &mut g)),
    ]);
    cases.push(Case::new(
        "conv2d",
        c1,
        objective!(move |g, p| project(g, p.get("x")?.conv2d(p.get("k")?, 1, 1)?, salt)),
    ));
    let c2 = store(vec![
        ("x", uniform(&[2, 6, 6], 1.0, &mut g)),
        ("k", uniform(&[3, 2, 4, 4], 1.0, &mut g)),
    ]);
    cases.push(Case::new(
        "conv2d_strided",
        c2,
        objective!(move |g, p| project(g, p.get("x")?.conv2d(p.get("k")?, 2, 1)?, salt)),
    ));

    let mut g = r("layer_norm");
    let ln = store(vec![
        ("x", uniform(&[4, 6], 1.0, &mut g)),
        ("gamma", uniform(&[6], 1.0, &mut g)),
        ("beta", uniform(&[6], 1.0, &mut g)),
    ]);
    cases.push(Case::new(
        "layer_norm",
        ln,
        objective!(move |g, p| {
            let y = p
                .get("x")?
                .layer_norm(p.get("gamma")?, p.get("beta")?, T::lit(1e-5))?;
            project(g, y, salt)
        }),
    ));

    let mut g = r("concat");
    let cr = store(vec![
        ("a", uniform(&[2, 3, 3], 1.0, &mut g)),
        ("b", uniform(&[1, 3, 3], 1.0, &mut g)),
    ]);
    cases.push(Case::new(
        "concat_rows",
        cr,
        objective!(move |g, p| {
            project(g, Var::concat_rows(&[p.get("a")?, p.get("b")?])?, salt)
        }),
    ));
    let cc = store(vec![
        ("a", uniform(&[3, 2], 1.0, &mut g)),
        ("b", uniform(&[3, 4], 1.0, &mut g)),
    ]);
    cases.push(Case::new(
        "concat_cols",
        cc,
        objective!(move |g, p| {
            project(g, Var::concat_cols(&[p.get("a")?, p.get("b")?])?, salt)
        }),
    ));

    let mut g = r("xcorr");
    let xc = store(vec![
        ("search", uniform(&[2, 6, 6], 1.0, &mut g)),
        ("template", uniform(&[2, 3, 3], 1.0, &mut g)),
    ]);
    cases.push(Case::new(
        "depthwise_xcorr",
        xc,
        objective!(move |g, p| {
            project(
                g,
                p.get("search")?.depthwise_xcorr(p.get("template")?)?,
                salt,
            )
        }),
    ));

    let scope = build_scope(3, 4, 3).expect("3×4 grid, window 3");
    let nnz = scope.nnz();
    let mut g = r("local");
    let ls = store(vec![
        ("q", uniform(&[12, 4], 1.0, &mut g)),
        ("k", uniform(&[12, 4], 1.0, &mut g)),
    ]);
    let s = scope.clone();
    cases.push(Case::new(
        "local_scores",
        ls,
        objective!(
            move |g, p| {
                let sc = Rc::new(s.clone());
                project(g, p.get("q")?.local_scores(p.get("k")?, &sc)?, salt)
            },
            s
        ),
    ));
    let ss = store(vec![("s", uniform(&[nnz], 2.0, &mut g))]);
    let s = scope.clone();
    cases.push(Case::new(
        "segment_softmax",
        ss,
        objective!(
            move |g, p| {
                let sc = Rc::new(s.clone());
                project(g, p.get("s")?.segment_softmax(&sc)?, salt)
            },
            s
        ),
    ));
    let lm = store(vec![
        ("w", uniform(&[nnz], 1.0, &mut g)),
        ("v", uniform(&[12, 3], 1.0, &mut g)),
    ]);
    cases.push(Case::new(
        "local_mix",
        lm,
        objective!(
            move |g, p| {
                let sc = Rc::new(scope.clone());
                project(g, p.get("w")?.local_mix(p.get("v")?, &sc)?, salt)
            },
            scope
        ),
    ));

    let mut g = r("losses");
    let labels: Vec<usize> = (0..9).map(|_| g.random_range(0..3)).collect();
    let ce = store(vec![("logits", uniform(&[3, 3, 3], 2.0, &mut g))]);
    cases.push(Case::new(
        "cross_entropy",
        ce,
        objective!(
            move |_, p| { p.get("logits")?.cross_entropy(&labels) },
            labels
        ),
    ));
    let targets: Vec<f64> = (0..9).map(|_| g.random_range(0..2) as f64).collect();
    let bce = store(vec![("logits", uniform(&[1, 3, 3], 2.0, &mut g))]);
    cases.push(Case::new(
        "bce_with_logits",
        bce,
        objective!(
            move |_, p| {
                let t: Vec<T> = targets.iter().map(|&v| T::lit(v)).collect();
                p.get("logits")?.bce_with_logits(&t)
            },
            targets
        ),
    ));
    let cells = vec![0usize, 4, 7];
    let boxes: Vec<[f64; 4]> = (0..3)
        .map(|_| [0; 4].map(|_| g.random_range(0.5..2.0)))
        .collect();
    let iou = store(vec![("raw", uniform(&[4, 3, 3], 0.7, &mut g))]);
    cases.push(Case::new(
        "iou_loss",
        iou,
        objective!(
            move |_, p| {
                let b: Vec<[T; 4]> = boxes.iter().map(|b| b.map(T::lit)).collect();
                p.get("raw")?.exp().iou_loss(&cells, &b)
            },
            cells,
            boxes
        ),
    ));
    cases
}

const C: usize = 8;
const HEADS: usize = 2;
const GRID: (usize, usize) = (3, 4);

fn tokens(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(&[GRID.0 * GRID.1, C], 1.0, rng)
}

fn small_transformer() -> TransformerConfig {
    TransformerConfig::new(C, HEADS, 3)
}

/// One case per layer: attention, correction, encoder and decoder layers,
/// each loss term and the full tracker.
pub fn layer_cases(seed: u64) -> Vec<Case> {
    let mut cases = Vec::new();
    let salt = seed.wrapping_mul(131).wrapping_add(3);
    let tcfg = small_transformer();
    let scope = build_scope(GRID.0, GRID.1, 3).expect("valid scope");
    let lra_cfg = LraConfig {
        channels: C,
        heads: HEADS,
        window: 3,
    };

    let with_params =
        |name: &str, inputs: &[&str], init: &dyn Fn(&mut Init<'_, f64, ChaCha8Rng>)| {
            let mut rng = rng_for(seed, name);
            let mut p = ModelParams::new();
            init(&mut Init::new(&mut p, &mut rng));
            perturb(&mut p, &mut rng);
            for input in inputs {
                p.insert(*input, tokens(&mut rng));
            }
            p
        };

    let p = with_params("lra_head", &["q", "k", "v"], &|i| {
        init_lra(i, "a", &lra_cfg)
    });
    let s = scope.clone();
    for head in 0..HEADS {
        let s = s.clone();
        cases.push(
            Case::new(
                format!("lra_head_{head}"),
                p.clone(),
                objective!(
                    move |g, b| {
                        let a = AttentionParams::bind(b, "a", lra_cfg)?;
                        let out = lra_head(b.get("q")?, b.get("k")?, b.get("v")?, &a, head, &s)?;
                        project(g, out, salt)
                    },
                    s
                ),
            )
            .fix(&KEY_BIASES),
        );
    }
    let s = scope.clone();
    cases.push(
        Case::new(
            "mh_lra",
            p,
            objective!(
                move |g, b| {
                    let a = AttentionParams::bind(b, "a", lra_cfg)?;
                    project(
                        g,
                        mh_lra(b.get("q")?, b.get("k")?, b.get("v")?, &a, &s)?,
                        salt,
                    )
                },
                s
            ),
        )
        .fix(&KEY_BIASES),
    );

    let p = with_params("mha", &["q", "kv"], &|i| init_mha(i, "m", C));
    cases.push(
        Case::new(
            "mha_global",
            p,
            objective!(move |g, b| {
                let m = MhaParams::bind(b, "m", HEADS)?;
                project(
                    g,
                    mha_global(b.get("q")?, b.get("kv")?, b.get("kv")?, &m)?,
                    salt,
                )
            }),
        )
        .fix(&KEY_BIASES),
    );

    let lec_cfg = LecConfig::with_default_paths(C);
    let mut p = with_params("din", &[], &|i| init_din(i, "d", &lec_cfg));
    let mut rng = rng_for(seed, "din.x");
    p.insert("x", uniform(&[C, GRID.0, GRID.1], 1.0, &mut rng));
    cases.push(Case::new(
        "din",
        p,
        objective!(move |g, b| project(g, din(b.get("x")?, &DinParams::bind(b, "d")?)?, salt)),
    ));

    let p = with_params("lec", &["q", "k"], &|i| init_lec(i, "l", &lec_cfg));
    cases.push(Case::new(
        "lec",
        p,
        objective!(move |g, b| {
            let l = LecParams::bind(b, "l")?;
            project(g, lec(b.get("q")?, b.get("k")?, &l, GRID.0, GRID.1)?, salt)
        }),
    ));

    let p = with_params("ffn", &["x"], &|i| init_ffn(i, "f", C, 2 * C));
    cases.push(Case::new(
        "ffn",
        p,
        objective!(move |g, b| project(g, ffn(b.get("x")?, &FfnParams::bind(b, "f")?)?, salt)),
    ));

    let full = |name: &str, inputs: &[&str], keep: &str| {
        with_params(name, inputs, &|i| {
            let mut all = ModelParams::new();
            init_transformer(&mut Init::new(&mut all, i.rng), &tcfg);
            for (n, t) in all.iter() {
                if n.starts_with(keep) {
                    i.store.insert(n, t.clone());
                }
            }
        })
    };

    let p = full("encoder_1", &["m3", "m4"], "enc1.");
    let s = scope.clone();
    cases.push(
        Case::new(
            "encoder_layer_1",
            p,
            objective!(
                move |g, b| {
                    let e = EncoderLayerParams::bind(b, "enc1", &tcfg, 0)?;
                    project(
                        g,
                        encoder_layer_1(b.get("m3")?, b.get("m4")?, &e, &s)?,
                        salt,
                    )
                },
                s
            ),
        )
        .fix(&KEY_BIASES),
    );
    let p = full("encoder_2", &["m5", "m_e1"], "enc2.");
    let s = scope.clone();
    cases.push(
        Case::new(
            "encoder_layer_2",
            p,
            objective!(
                move |g, b| {
                    let e = EncoderLayerParams::bind(b, "enc2", &tcfg, 1)?;
                    project(
                        g,
                        encoder_layer_2(b.get("m5")?, b.get("m_e1")?, &e, &s)?,
                        salt,
                    )
                },
                s
            ),
        )
        .fix(&KEY_BIASES),
    );
    let p = full("decoder", &["m5", "m_e2"], "dec.");
    cases.push(
        Case::new(
            "decoder_layer",
            p,
            objective!(move |g, b| {
                let d = DecoderLayerParams::bind(b, "dec", &tcfg)?;
                project(
                    g,
                    decoder_layer(b.get("m5")?, b.get("m_e2")?, &d, GRID, true)?,
                    salt,
                )
            }),
        )
        .fix(&KEY_BIASES),
    );

    cases.extend(loss_cases(seed));
    cases.push(pipeline_case(seed));
    cases
}

fn loss_cases(seed: u64) -> Vec<Case> {
    let model = Model::new(pipeline_config()).expect("pipeline config is valid");
    let geom = model.geometry;
    let mut rng = rng_for(seed, "head");
    let mut p = ModelParams::new();
    init_head(&mut Init::new(&mut p, &mut rng), C);
    perturb(&mut p, &mut rng);
    p.insert("m_d", uniform(&[geom.len(), C], 1.0, &mut rng));
    let gt = BoundingBox::from_center(
        geom.center.0 + rng.random_range(-2.0..2.0),
        geom.center.1 + rng.random_range(-2.0..2.0),
        rng.random_range(9.0..13.0),
        rng.random_range(9.0..13.0),
    );
    let targets = assign_labels(&gt, &geom, model.center_radius());
    let head_cfg = model.cfg.head;
    let grid = (geom.height, geom.width);
    ["cls1", "cls2", "reg"]
        .into_iter()
        .map(|term| {
            Case::new(
                format!("loss_{term}"),
                p.clone(),
                objective!(
                    move |_, b| {
                        let out = head_forward(b.get("m_d")?, &HeadParams::bind(b)?, grid)?;
                        let l = loss_total(&out, &targets, &head_cfg)?;
                        Ok(match term {
                            "cls1" => l.cls1,
                            "cls2" => l.cls2,
                            _ => l.reg,
                        })
                    },
                    targets
                ),
            )
        })
        .collect()
}

/// 16/28 crops through a 4-8-8-8-8 backbone onto a 4×4 grid of 8 channels.
pub fn pipeline_config() -> ModelConfig {
    ModelConfig {
        attention: AttentionSection {
            channels: C,
            heads: HEADS,
            k: 3,
            ..AttentionSection::default()
        },
        backbone: BackboneConfig {
            channels: vec![4, C, C, C, C],
            ..BackboneConfig::toy()
        },
        input: InputSection {
            template_size: 16,
            search_size: 28,
        },
        ..ModelConfig::default()
    }
}

fn pipeline_case(seed: u64) -> Case {
    let model = Model::new(pipeline_config()).expect("pipeline config is valid");
    let mut rng = rng_for(seed, "pipeline");
    let mut p = model.init_params::<f64>(rng.random());
    perturb(&mut p, &mut rng);
    let input = model.cfg.input;
    let template = uniform(
        &[3, input.template_size, input.template_size],
        1.0,
        &mut rng,
    );
    let search = uniform(&[3, input.search_size, input.search_size], 1.0, &mut rng);
    let c = input.search_size as f64 / 2.0;
    let gt = BoundingBox::from_center(
        c + rng.random_range(-2.0..2.0),
        c + rng.random_range(-2.0..2.0),
        rng.random_range(9.0..13.0),
        rng.random_range(9.0..13.0),
    );
    let targets = assign_labels(&gt, &model.geometry, model.center_radius());
    Case::new(
        "full_pipeline",
        p,
        objective!(
            move |g, b| {
                let tp = model.bind(b)?;
                let z = g.leaf(template.cast());
                let x = g.leaf(search.cast());
                Ok(model.loss(&tp, z, x, &targets)?.total)
            },
            targets,
            model,
            template,
            search
        ),
    )
    .fix(&KEY_BIASES)
}

/// Every primitive and layer case for one seed.
pub fn gradient_suite(seed: u64) -> Vec<Case> {
    let mut cases = primitive_cases(seed);
    cases.extend(layer_cases(seed));
    cases
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::DEFAULT_EPS;

    #[test]
    fn primitive_cases_pass() {
        for case in primitive_cases(0) {
            let out = case.run(DEFAULT_EPS, 1e-7).unwrap();
            assert!(out.passed(1e-5), "{}: {:?}", out.name, out.report);
        }
    }

    #[test]
    fn fixing_moves_key_biases() {
        let cases = layer_cases(0);
        let mha = cases.iter().find(|c| c.name == "mha_global").unwrap();
        assert_eq!(mha.fixed.names().collect::<Vec<_>>(), vec!["m.w_k.bias"]);
        assert!(!mha.params.contains("m.w_k.bias"));
        let pipe = cases.iter().find(|c| c.name == "full_pipeline").unwrap();
        assert_eq!(pipe.fixed.len(), 4);
    }
}
