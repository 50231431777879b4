//! Two classification branches and one regression branch over the decoder
//! tokens, label assignment on the correlation grid, the weighted loss and
//! box decoding.
//!
//! Regression outputs are `(l, t, r, b)` distances in units of the grid
//! stride; labels keep pixel units and are divided by the stride when fed to
//! the IoU loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Var};
use crate::error::{Error, Result};
use crate::layers::{tokens_to_grid, Conv};
use crate::params::{Bound, Init};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1 <= x2 && y1 <= y2) {
            return Err(Error::contract(format!(
                "box corners out of order: ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(BoundingBox { x1, y1, x2, y2 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoundingBox {
            x1: cx - w / 2.0,
            y1: cy - h / 2.0,
            x2: cx + w / 2.0,
            y2: cy + h / 2.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BoundingBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// Intersection with `[0, w] × [0, h]`; a box fully outside collapses
    /// onto the nearest border.
    pub fn clip(&self, w: f64, h: f64) -> Self {
        let cx = |v: f64| v.clamp(0.0, w);
        let cy = |v: f64| v.clamp(0.0, h);
        BoundingBox {
            x1: cx(self.x1),
            y1: cy(self.y1),
            x2: cx(self.x2),
            y2: cy(self.y2),
        }
    }

    pub fn is_within(&self, w: f64, h: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= w && self.y2 <= h
    }
}

/// Intersection over union; 0 for disjoint boxes or when the union is empty.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Radius of the center-classification positives, in grid strides.
    pub center_radius: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            center_radius: 1.5,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("head.lambda1", self.lambda1),
            ("head.lambda2", self.lambda2),
            ("head.lambda3", self.lambda3),
            ("head.center_radius", self.center_radius),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "{key} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

const BRANCHES: [(&str, usize); 3] = [("cls1", 2), ("cls2", 1), ("reg", 4)];

/// `head.trunk` plus two 3×3 convs per branch, `head.{cls1|cls2|reg}.{0,1}`.
pub fn init_head<T: Real, R: Rng>(init: &mut Init<'_, T, R>, channels: usize) {
    init.conv("head.trunk", channels, channels, 3, 2f64.sqrt());
    for (name, out) in BRANCHES {
        init.conv(
            &format!("head.{name}.0"),
            channels,
            channels,
            3,
            2f64.sqrt(),
        );
        init.conv(&format!("head.{name}.1"), out, channels, 3, 0.1);
    }
}

pub struct HeadParams<'g, T: Real> {
    pub trunk: Conv<'g, T>,
    /// `[cls1, cls2, reg]`, each `[hidden, out]`.
    pub branches: [[Conv<'g, T>; 2]; 3],
}

impl<'g, T: Real> HeadParams<'g, T> {
    pub fn bind(b: &Bound<'g, T>) -> Result<Self> {
        let branch = |name: &str| -> Result<[Conv<'g, T>; 2]> {
            Ok([
                Conv::bind_same(b, &format!("head.{name}.0"))?,
                Conv::bind_same(b, &format!("head.{name}.1"))?,
            ])
        };
        Ok(HeadParams {
            trunk: Conv::bind_same(b, "head.trunk")?,
            branches: [branch("cls1")?, branch("cls2")?, branch("reg")?],
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput<'g, T: Real> {
    /// Two-class logits, `2×H×W`, foreground is channel 1.
    pub cls1: Var<'g, T>,
    /// Center logits, `1×H×W`.
    pub cls2: Var<'g, T>,
    /// Positive `(l, t, r, b)` distances in strides, `4×H×W`.
    pub reg: Var<'g, T>,
}

impl<T: Real> HeadOutput<'_, T> {
    pub fn maps(&self) -> HeadMaps<T> {
        HeadMaps {
            cls1: (*self.cls1.value()).clone(),
            cls2: (*self.cls2.value()).clone(),
            reg: (*self.reg.value()).clone(),
        }
    }
}

/// Detached head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMaps<T> {
    pub cls1: Tensor<T>,
    pub cls2: Tensor<T>,
    pub reg: Tensor<T>,
}

pub fn head_forward<'g, T: Real>(
    m_d: Var<'g, T>,
    params: &HeadParams<'g, T>,
    grid: (usize, usize),
) -> Result<HeadOutput<'g, T>> {
    let x = tokens_to_grid(m_d, grid.0, grid.1)?;
    let trunk = params.trunk.forward(x)?.relu();
    let branch = |[hidden, out]: &[Conv<'g, T>; 2]| -> Result<Var<'g, T>> {
        out.forward(hidden.forward(trunk)?.relu())
    };
    let [c1, c2, r] = &params.branches;
    Ok(HeadOutput {
        cls1: branch(c1)?,
        cls2: branch(c2)?,
        reg: branch(r)?.exp(),
    })
}

/// Placement of the correlation grid inside the search crop. Cell `(row,
/// col)` is centered at `center + ((col, row) − (W−1, H−1)/2)·stride`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGeometry {
    pub height: usize,
    pub width: usize,
    pub stride: f64,
    pub center: (f64, f64),
}

impl GridGeometry {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_center(&self, cell: usize) -> (f64, f64) {
        let (row, col) = (cell / self.width, cell % self.width);
        (
            self.center.0 + (col as f64 - (self.width as f64 - 1.0) / 2.0) * self.stride,
            self.center.1 + (row as f64 - (self.height as f64 - 1.0) / 2.0) * self.stride,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// Per-cell class for the two-class branch, 1 inside the box.
    pub cls1: Vec<usize>,
    /// Per-cell 0/1 center labels.
    pub cls2: Vec<f64>,
    /// Cells with `cls1 == 1`, ascending.
    pub positives: Vec<usize>,
    /// Pixel `(l, t, r, b)` from each positive cell center to the box sides.
    pub reg: Vec<[f64; 4]>,
    pub stride: f64,
}

impl Targets {
    pub fn no_positives(&self) -> bool {
        self.positives.is_empty()
    }
}

/// `radius` is in pixels.
pub fn assign_labels(gt: &BoundingBox, geom: &GridGeometry, radius: f64) -> Targets {
    let n = geom.len();
    let (gx, gy) = gt.center();
    let mut t = Targets {
        cls1: vec![0; n],
        cls2: vec![0.0; n],
        positives: Vec::new(),
        reg: Vec::new(),
        stride: geom.stride,
    };
    for cell in 0..n {
        let (cx, cy) = geom.cell_center(cell);
        if cx >= gt.x1 && cx <= gt.x2 && cy >= gt.y1 && cy <= gt.y2 {
            t.cls1[cell] = 1;
            t.positives.push(cell);
            t.reg.push([cx - gt.x1, cy - gt.y1, gt.x2 - cx, gt.y2 - cy]);
        }
        if (cx - gx).hypot(cy - gy) <= radius {
            t.cls2[cell] = 1.0;
        }
    }
    t
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'g, T: Real> {
    pub total: Var<'g, T>,
    pub cls1: Var<'g, T>,
    pub cls2: Var<'g, T>,
    pub reg: Var<'g, T>,
    /// Set when the regression term had no positive cell and contributes 0.
    pub no_positives: bool,
}

/// `λ1·CE(cls1) + λ2·BCE(cls2) + λ3·mean(1 − IoU)` over positive cells.
pub fn loss_total<'g, T: Real>(
    out: &HeadOutput<'g, T>,
    targets: &Targets,
    cfg: &HeadConfig,
) -> Result<LossTerms<'g, T>> {
    let cls1 = out.cls1.cross_entropy(&targets.cls1)?;
    let cls2_targets: Vec<T> = targets.cls2.iter().map(|&v| T::lit(v)).collect();
    let cls2 = out.cls2.bce_with_logits(&cls2_targets)?;
    let reg_targets: Vec<[T; 4]> = targets
        .reg
        .iter()
        .map(|r| r.map(|v| T::lit(v / targets.stride)))
        .collect();
    let reg = out.reg.iou_loss(&targets.positives, &reg_targets)?;
    let total = cls1
        .scale(T::lit(cfg.lambda1))
        .add(cls2.scale(T::lit(cfg.lambda2)))?
        .add(reg.scale(T::lit(cfg.lambda3)))?;
    Ok(LossTerms {
        total,
        cls1,
        cls2,
        reg,
        no_positives: targets.no_positives(),
    })
}

/// Fused score per cell: `P(foreground) · σ(center logit)`.
pub fn fused_scores<T: Real>(maps: &HeadMaps<T>) -> Vec<f64> {
    let n = maps.cls2.len();
    let c1 = maps.cls1.data();
    (0..n)
        .map(|i| {
            let (bg, fg) = (c1[i].as_f64(), c1[n + i].as_f64());
            let p_fg = 1.0 / (1.0 + (bg - fg).exp());
            p_fg * sigmoid(maps.cls2.data()[i].as_f64())
        })
        .collect()
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decoded {
    pub bbox: BoundingBox,
    pub cell: usize,
    pub score: f64,
}

/// Box regressed at the best-scoring cell, in search-crop pixels.
pub fn decode_box<T: Real>(maps: &HeadMaps<T>, geom: &GridGeometry) -> Result<Decoded> {
    let n = geom.len();
    if maps.cls1.len() != 2 * n || maps.cls2.len() != n || maps.reg.len() != 4 * n {
        return Err(Error::contract(format!(
            "head maps {:?}/{:?}/{:?} do not match a {}×{} grid",
            maps.cls1.shape(),
            maps.cls2.shape(),
            maps.reg.shape(),
            geom.height,
            geom.width
        )));
    }
    let scores = fused_scores(maps);
    let cell = argmax_first(&scores);
    let (cx, cy) = geom.cell_center(cell);
    let d = |s: usize| maps.reg.data()[s * n + cell].as_f64() * geom.stride;
    Ok(Decoded {
        bbox: BoundingBox {
            x1: cx - d(0),
            y1: cy - d(1),
            x2: cx + d(2),
            y2: cy + d(3),
        },
        cell,
        score: scores[cell],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::params::ModelParams;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_hand_values() {
        assert_eq!(iou(&bx(0., 0., 2., 2.), &bx(1., 1., 3., 3.)), 1.0 / 7.0);
        assert_eq!(iou(&bx(0., 0., 1., 1.), &bx(2., 2., 3., 3.)), 0.0);
        assert_eq!(iou(&bx(1., 1., 1., 1.), &bx(1., 1., 1., 1.)), 0.0);
        assert!(BoundingBox::new(2., 0., 1., 1.).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.01..40.0f64, 0.01..40.0f64)
            .prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn iou_self_is_one(a in arb_box()) {
            prop_assert_eq!(iou(&a, &a), 1.0);
        }
    }

    fn geom6() -> GridGeometry {
        GridGeometry {
            height: 6,
            width: 6,
            stride: 4.0,
            center: (32.0, 32.0),
        }
    }

    #[test]
    fn whole_image_box_is_all_positive() {
        let t = assign_labels(&bx(0., 0., 64., 64.), &geom6(), 6.0);
        assert_eq!(t.positives.len(), 36);
        assert!(t.cls1.iter().all(|&l| l == 1));
    }

    #[test]
    fn tiny_box_has_at_most_one_positive() {
        let t = assign_labels(&bx(29.5, 29.5, 30.5, 30.5), &geom6(), 0.0);
        assert!(t.positives.len() <= 1);
        assert_eq!(t.positives, vec![14]);
        assert_eq!(t.reg[0], [0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn centered_box_labels_are_symmetric() {
        let g = geom6();
        let t = assign_labels(&bx(24., 24., 40., 40.), &g, 6.0);
        for r in 0..6 {
            for c in 0..6 {
                let i = r * 6 + c;
                for j in [r * 6 + (5 - c), (5 - r) * 6 + c, c * 6 + r] {
                    assert_eq!(t.cls1[i], t.cls1[j]);
                    assert_eq!(t.cls2[i], t.cls2[j]);
                }
            }
        }
        // cell centers sit at 22, 26, ..., 42 on each axis
        let expect: Vec<usize> = (0..36)
            .filter(|&i| {
                let (x, y) = g.cell_center(i);
                (24.0..=40.0).contains(&x) && (24.0..=40.0).contains(&y)
            })
            .collect();
        assert_eq!(expect.len(), 16);
        assert_eq!(t.positives, expect);
        // radius 6 around (32,32): the four nearest centers (30|34, 30|34)
        assert_eq!(t.cls2.iter().filter(|&&v| v == 1.0).count(), 4);
    }

    #[test]
    fn disjoint_box_flags_no_positives() {
        let t = assign_labels(&bx(100., 100., 110., 110.), &geom6(), 6.0);
        assert!(t.no_positives());
    }

    fn zero_head() -> ModelParams<f64> {
        let mut p = ModelParams::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_head(&mut Init::new(&mut p, &mut rng), 4);
        for (_, t) in p.iter_mut() {
            t.data_mut().fill(0.0);
        }
        p
    }

    #[test]
    fn zero_head_outputs() {
        let p = zero_head();
        let g = Graph::new();
        let b = p.bind(&g);
        let x = g.leaf(Tensor::from_fn(&[36, 4], |i| i as f64 * 0.1));
        let out = head_forward(x, &HeadParams::bind(&b).unwrap(), (6, 6)).unwrap();
        assert_eq!(out.cls1.shape(), vec![2, 6, 6]);
        assert_eq!(out.cls2.shape(), vec![1, 6, 6]);
        assert_eq!(out.reg.shape(), vec![4, 6, 6]);
        assert!(out.cls1.value().data().iter().all(|&v| v == 0.0));
        assert!(out.reg.value().data().iter().all(|&v| v == 1.0));

        // uniform scores decode at cell 0
        let d = decode_box(&out.maps(), &geom6()).unwrap();
        assert_eq!(d.cell, 0);
        let (cx, cy) = geom6().cell_center(0);
        assert_eq!(d.bbox, bx(cx - 4.0, cy - 4.0, cx + 4.0, cy + 4.0));
    }

    #[test]
    fn loss_terms_on_hand_grid() {
        // 2×2 grid, one positive cell (index 3)
        let g = Graph::<f64>::new();
        let cls1 =
            g.leaf(Tensor::new(&[2, 2, 2], vec![0.0, 1.0, -1.0, 0.5, 0.0, 0.0, 2.0, 1.0]).unwrap());
        let cls2 = g.leaf(Tensor::new(&[1, 2, 2], vec![-1.0, 0.0, 0.5, 2.0]).unwrap());
        let reg = g.leaf(
            Tensor::new(&[4, 2, 2], (0..16).map(|i| 0.5 + i as f64 * 0.1).collect()).unwrap(),
        );
        let out = HeadOutput { cls1, cls2, reg };
        let targets = Targets {
            cls1: vec![0, 0, 0, 1],
            cls2: vec![0.0, 0.0, 1.0, 1.0],
            positives: vec![3],
            reg: vec![[2.0, 4.0, 6.0, 8.0]],
            stride: 2.0,
        };
        let cfg = HeadConfig {
            lambda1: 0.5,
            lambda2: 2.0,
            lambda3: 3.0,
            center_radius: 1.5,
        };
        let l = loss_total(&out, &targets, &cfg).unwrap();

        let ce = |logits: [f64; 2], label: usize| {
            let z = logits[0].exp() + logits[1].exp();
            z.ln() - logits[label]
        };
        let e1 =
            (ce([0.0, 0.0], 0) + ce([1.0, 0.0], 0) + ce([-1.0, 2.0], 0) + ce([0.5, 1.0], 1)) / 4.0;
        let bce = |x: f64, y: f64| {
            let p = 1.0 / (1.0 + (-x).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        };
        let e2 = (bce(-1.0, 0.0) + bce(0.0, 0.0) + bce(0.5, 1.0) + bce(2.0, 1.0)) / 4.0;
        // prediction at cell 3: channels 3, 7, 11, 15 → (0.8, 1.2, 1.6, 2.0); target (1, 2, 3, 4) strides
        let (p, t) = ([0.8, 1.2, 1.6, 2.0], [1.0, 2.0, 3.0, 4.0]);
        let inter = (0.8f64.min(1.0) + 1.6) * (1.2 + 2.0);
        let union = (p[0] + p[2]) * (p[1] + p[3]) + (t[0] + t[2]) * (t[1] + t[3]) - inter;
        let e3 = 1.0 - inter / union;

        assert!((l.cls1.value().item() - e1).abs() < 1e-12);
        assert!((l.cls2.value().item() - e2).abs() < 1e-12);
        assert!((l.reg.value().item() - e3).abs() < 1e-12);
        let total = 0.5 * e1 + 2.0 * e2 + 3.0 * e3;
        assert!((l.total.value().item() - total).abs() < 1e-12);
        assert!(!l.no_positives);
    }

    #[test]
    fn saturated_perfect_prediction_has_near_zero_loss() {
        let g = Graph::<f64>::new();
        let labels = [0usize, 1, 1, 0];
        let centers = [0.0, 1.0, 0.0, 0.0];
        let cls1 = g.leaf(Tensor::from_fn(&[2, 2, 2], |i| {
            let (k, c) = (i / 4, i % 4);
            if k == labels[c] {
                20.0
            } else {
                -20.0
            }
        }));
        let cls2 = g.leaf(Tensor::from_fn(&[1, 2, 2], |i| {
            if centers[i] == 1.0 {
                20.0
            } else {
                -20.0
            }
        }));
        let reg = g.leaf(Tensor::from_fn(&[4, 2, 2], |_| 1.5));
        let targets = Targets {
            cls1: labels.to_vec(),
            cls2: centers.to_vec(),
            positives: vec![1, 2],
            reg: vec![[3.0; 4], [3.0; 4]],
            stride: 2.0,
        };
        let l = loss_total(
            &HeadOutput { cls1, cls2, reg },
            &targets,
            &HeadConfig::default(),
        )
        .unwrap();
        assert!(l.reg.value().item().abs() < 1e-15);
        let total = l.total.value().item();
        assert!((0.0..1e-6).contains(&total), "{total}");
    }

    proptest! {
        #[test]
        fn argmax_survives_power_transform(
            fg in prop::collection::vec(0.001..1.0f64, 9),
            ctr in prop::collection::vec(0.001..1.0f64, 9),
            alpha in 0.1..5.0f64,
        ) {
            let fused: Vec<f64> = fg.iter().zip(&ctr).map(|(a, b)| a * b).collect();
            let powered: Vec<f64> = fg.iter().zip(&ctr).map(|(a, b)| a.powf(alpha) * b.powf(alpha)).collect();
            let a = argmax_first(&fused);
            let b = argmax_first(&powered);
            // powers of distinct products can round to equal values; accept ties
            prop_assert!(a == b || powered[a] == powered[b]);
        }
    }
}
