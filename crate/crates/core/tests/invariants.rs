use lpat::attention::{build_scope, init_lra, mh_lra, AttentionParams, LraConfig};
use lpat::autodiff::Graph;
use lpat::backbone::{backbone_forward, dwc, init_backbone, BackboneConfig, BackboneParams};
use lpat::checks::global_limit;
use lpat::correction::{init_lec, lec, LecConfig, LecParams};
use lpat::harness::{gen_sequence, Motion, SequenceConfig};
use lpat::kernels;
use lpat::model::{Model, ModelConfig};
use lpat::params::{Init, ModelParams};
use lpat::tensor::{Real, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn lra_store(cfg: &LraConfig, seed: u64) -> ModelParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::new();
    init_lra(&mut Init::new(&mut p, &mut rng), "a", cfg);
    p
}

/// Direct per-channel valid sliding window.
fn xcorr_oracle(z: &Tensor<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let (c, hz, wz) = z.dims3().unwrap();
    let (_, hx, wx) = x.dims3().unwrap();
    let (ho, wo) = (hx - hz + 1, wx - wz + 1);
    Tensor::from_fn(&[c, ho, wo], |idx| {
        let (ch, y, xo) = (idx / (ho * wo), idx / wo % ho, idx % wo);
        let mut s = 0.0;
        for u in 0..hz {
            for v in 0..wz {
                s += z.data()[(ch * hz + u) * wz + v] * x.data()[(ch * hx + y + u) * wx + xo + v];
            }
        }
        s
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..9,
        seed in any::<u64>(),
        masked in prop::collection::vec(any::<bool>(), 48),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Tensor::<f64>::uniform(&[rows, cols], 30.0, &mut rng).into_data();
        for r in 0..rows {
            // keep column 0 live so no row is fully masked
            for c in 1..cols {
                if masked[(r * cols + c) % masked.len()] {
                    x[r * cols + c] = f64::sentinel();
                }
            }
        }
        let y = kernels::softmax_rows(&x, rows, cols).unwrap();
        for r in 0..rows {
            let row = &y[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
            for c in 0..cols {
                if x[r * cols + c] == f64::sentinel() {
                    prop_assert_eq!(row[c], 0.0);
                }
            }
        }
    }

    #[test]
    fn lra_output_ignores_values_outside_scope(
        h in 1usize..6,
        w in 1usize..6,
        heads in 1usize..3,
        window in prop::sample::select(vec![1usize, 3, 5]),
        seed in any::<u64>(),
        query in any::<prop::sample::Index>(),
    ) {
        let cfg = LraConfig { channels: 2 * heads, heads, window };
        let scope = build_scope(h, w, window).unwrap();
        let n = h * w;
        let i = query.index(n);
        let outside: Vec<usize> = (0..n).filter(|&j| !scope.contains(i, j)).collect();
        prop_assume!(!outside.is_empty());
        let store = lra_store(&cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let q = Tensor::<f64>::uniform(&[n, cfg.channels], 1.0, &mut rng);
        let k = Tensor::<f64>::uniform(&[n, cfg.channels], 1.0, &mut rng);
        let v = Tensor::<f64>::uniform(&[n, cfg.channels], 1.0, &mut rng);
        let mut v2 = v.clone();
        for &j in &outside {
            for c in 0..cfg.channels {
                v2.data_mut()[j * cfg.channels + c] += 7.5;
            }
        }
        let run = |v: &Tensor<f64>| {
            let g = Graph::new();
            let b = store.bind(&g);
            let p = AttentionParams::bind(&b, "a", cfg).unwrap();
            let out = mh_lra(g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()), &p, &scope).unwrap();
            out.value().row(i).to_vec()
        };
        let (a, b) = (run(&v), run(&v2));
        prop_assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn dwc_matches_sliding_window(
        c in 1usize..4,
        hz in 1usize..5,
        wz in 1usize..5,
        dh in 0usize..4,
        dw in 0usize..4,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::<f64>::uniform(&[c, hz, wz], 1.0, &mut rng);
        let x = Tensor::<f64>::uniform(&[c, hz + dh, wz + dw], 1.0, &mut rng);
        let g = Graph::new();
        let out = dwc(g.leaf(z.clone()), g.leaf(x.clone())).unwrap().value();
        prop_assert!(out.max_abs_diff(&xcorr_oracle(&z, &x)).unwrap() < 1e-12);
    }

    #[test]
    fn lec_preserves_token_shape(
        channels in 3usize..9,
        h in 1usize..5,
        w in 1usize..5,
        seed in any::<u64>(),
    ) {
        let cfg = LecConfig::with_default_paths(channels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ModelParams::<f64>::new();
        init_lec(&mut Init::new(&mut store, &mut rng), "l", &cfg);
        let g = Graph::new();
        let b = store.bind(&g);
        let p = LecParams::bind(&b, "l").unwrap();
        let q = g.leaf(Tensor::uniform(&[h * w, channels], 1.0, &mut rng));
        let k = g.leaf(Tensor::uniform(&[h * w, channels], 1.0, &mut rng));
        prop_assert_eq!(lec(q, k, &p, h, w).unwrap().shape(), vec![h * w, channels]);
    }

    #[test]
    fn full_window_is_global_attention(seed in any::<u64>()) {
        let (_, diff) = global_limit(seed, 6).unwrap();
        prop_assert!(diff < 1e-10);
    }

    #[test]
    fn sequences_are_reproducible_and_in_frame(seed in any::<u64>(), step in 0.0..6.0f64) {
        let cfg = SequenceConfig {
            frames: 6,
            motion: Motion::RandomWalk { step },
            ..SequenceConfig::default()
        };
        let a = gen_sequence(&cfg, seed).unwrap();
        let b = gen_sequence(&cfg, seed).unwrap();
        prop_assert_eq!(&a.gt, &b.gt);
        prop_assert!(a.frames.iter().zip(&b.frames).all(|(x, y)| x.bit_eq(y)));
        for bx in &a.gt {
            prop_assert!(bx.x1 <= bx.x2 && bx.y1 <= bx.y2);
            prop_assert!(bx.is_within(a.width() as f64, a.height() as f64));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn backbone_weights_are_shared(seed in any::<u64>(), layer in 1usize..6) {
        let cfg = BackboneConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ModelParams::<f64>::new();
        init_backbone(&mut Init::new(&mut store, &mut rng), &cfg);
        let image = Tensor::<f64>::uniform(&[3, 32, 32], 1.0, &mut rng);
        let branches = |store: &ModelParams<f64>| {
            let g = Graph::new();
            let b = store.bind(&g);
            let p = BackboneParams::bind(&b, &cfg).unwrap();
            let z = backbone_forward(g.leaf(image.clone()), &p).unwrap();
            let x = backbone_forward(g.leaf(image.clone()), &p).unwrap();
            (z.levels.map(|v| (*v.value()).clone()), x.levels.map(|v| (*v.value()).clone()))
        };
        let (z0, x0) = branches(&store);
        let wname = format!("backbone.conv{layer}.weight");
        for v in store.get_mut(&wname).unwrap().data_mut() {
            *v *= 1.5;
        }
        let (z1, x1) = branches(&store);
        for l in 0..3 {
            prop_assert!(z0[l].bit_eq(&x0[l]));
            prop_assert!(z1[l].bit_eq(&x1[l]));
        }
        prop_assert!(!z0[2].bit_eq(&z1[2]));
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let model = Model::new(ModelConfig::toy()).unwrap();
        let params = model.init_params::<f32>(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::<f32>::uniform(&[3, 32, 32], 1.0, &mut rng);
        let x = Tensor::<f32>::uniform(&[3, 64, 64], 1.0, &mut rng);
        let a = model.predict(&params, &z, &x).unwrap();
        let b = model.predict(&params, &z, &x).unwrap();
        prop_assert!(a.cls1.bit_eq(&b.cls1));
        prop_assert!(a.cls2.bit_eq(&b.cls2));
        prop_assert!(a.reg.bit_eq(&b.reg));
    }
}
