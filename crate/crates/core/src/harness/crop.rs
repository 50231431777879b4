//! 1:1 crops around a point, template/search pair construction.

use rand::Rng;

use super::synth::SyntheticSequence;
use crate::error::{Error, Result};
use crate::head::{assign_labels, BoundingBox, Targets};
use crate::model::Model;
use crate::tensor::{Real, Tensor};

/// Symmetric reflection of an integer coordinate into `[0, len)`.
fn mirror(i: i64, len: usize) -> usize {
    let n = len as i64;
    let period = 2 * n;
    let t = i.rem_euclid(period);
    (if t < n { t } else { period - 1 - t }) as usize
}

#[derive(Clone, Debug)]
pub struct Crop<T> {
    /// `3×size×size`, pixel values mapped from `[0, 1]` to `[−1, 1]`.
    pub image: Tensor<T>,
    /// Frame coordinates of the crop's top-left corner.
    pub origin: (i64, i64),
    /// Whether any pixel came from mirror padding.
    pub padded: bool,
}

impl<T> Crop<T> {
    pub fn to_crop(&self, b: &BoundingBox) -> BoundingBox {
        b.translate(-self.origin.0 as f64, -self.origin.1 as f64)
    }

    pub fn to_frame(&self, b: &BoundingBox) -> BoundingBox {
        b.translate(self.origin.0 as f64, self.origin.1 as f64)
    }
}

/// Square crop of side `size` whose center is the pixel corner nearest to
/// `center`.
pub fn crop<T: Real>(frame: &Tensor<f32>, center: (f64, f64), size: usize) -> Result<Crop<T>> {
    let (c, h, w) = frame.dims3()?;
    if c != 3 {
        return Err(Error::contract(format!(
            "frames must be 3×H×W, got {:?}",
            frame.shape()
        )));
    }
    if !(center.0.is_finite() && center.1.is_finite()) {
        return Err(Error::contract("crop center must be finite"));
    }
    let half = size as f64 / 2.0;
    let ox = (center.0 - half).round() as i64;
    let oy = (center.1 - half).round() as i64;
    let mut padded = false;
    let src = frame.data();
    let mut data = Vec::with_capacity(3 * size * size);
    for ch in 0..3 {
        for y in 0..size as i64 {
            let fy = oy + y;
            let sy = mirror(fy, h);
            for x in 0..size as i64 {
                let fx = ox + x;
                let sx = mirror(fx, w);
                padded |= fx < 0 || fy < 0 || fx >= w as i64 || fy >= h as i64;
                let v = src[(ch * h + sy) * w + sx] as f64;
                data.push(T::lit(2.0 * v - 1.0));
            }
        }
    }
    Ok(Crop {
        image: Tensor::new(&[3, size, size], data)?,
        origin: (ox, oy),
        padded,
    })
}

#[derive(Clone, Debug)]
pub struct Pair<T> {
    pub template: Crop<T>,
    pub search: Crop<T>,
    /// Ground truth of frame `j` in search-crop coordinates.
    pub gt: BoundingBox,
    pub targets: Targets,
}

impl<T> Pair<T> {
    pub fn padded(&self) -> bool {
        self.template.padded || self.search.padded
    }
}

/// Template from frame `i` centered on its box, search from frame `j`
/// centered on frame `i`'s box shifted by up to `jitter` pixels per axis.
pub fn make_pair<T: Real, R: Rng>(
    seq: &SyntheticSequence,
    i: usize,
    j: usize,
    model: &Model,
    jitter: f64,
    rng: &mut R,
) -> Result<Pair<T>> {
    if i >= seq.len() || j >= seq.len() {
        return Err(Error::contract(format!(
            "pair ({i}, {j}) out of a {}-frame sequence",
            seq.len()
        )));
    }
    let input = &model.cfg.input;
    let (cx, cy) = seq.gt[i].center();
    let template = crop(&seq.frames[i], (cx, cy), input.template_size)?;
    let (dx, dy) = if jitter > 0.0 {
        (
            rng.random_range(-jitter..=jitter),
            rng.random_range(-jitter..=jitter),
        )
    } else {
        (0.0, 0.0)
    };
    let search = crop(&seq.frames[j], (cx + dx, cy + dy), input.search_size)?;
    let gt = search.to_crop(&seq.gt[j]);
    let targets = assign_labels(&gt, &model.geometry, model.center_radius());
    Ok(Pair {
        template,
        search,
        gt,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::{gen_sequence, SequenceConfig};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mirror_indices() {
        let got: Vec<usize> = (-4..8).map(|i| mirror(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
    }

    #[test]
    fn crop_inside_matches_frame() {
        let f = Tensor::from_fn(&[3, 10, 10], |i| (i % 97) as f32 / 97.0);
        let c = crop::<f64>(&f, (5.0, 5.0), 4).unwrap();
        assert_eq!(c.origin, (3, 3));
        assert!(!c.padded);
        let expect = 2.0 * f.data()[(10 + 4) * 10 + 3] as f64 - 1.0;
        assert_eq!(c.image.data()[16 + 4 + 0], expect);
        let edge = crop::<f64>(&f, (1.0, 5.0), 4).unwrap();
        assert!(edge.padded);
    }

    #[test]
    fn unjittered_same_frame_pair_is_centered() {
        let model = Model::new(ModelConfig::toy()).unwrap();
        let seq = gen_sequence(&SequenceConfig::default(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = make_pair::<f64, _>(&seq, 2, 2, &model, 0.0, &mut rng).unwrap();
        let (x, y) = p.gt.center();
        assert!((x - 32.0).abs() <= 0.5 && (y - 32.0).abs() <= 0.5);
        assert_eq!(p.template.image.shape(), [3, 32, 32]);
        assert_eq!(p.search.image.shape(), [3, 64, 64]);
        // labels recomputed directly from geometry
        let direct = assign_labels(&p.gt, &model.geometry, 6.0);
        assert_eq!(p.targets, direct);
        assert!(!p.targets.no_positives());
    }

    #[test]
    fn paper_scale_crop_sizes() {
        let model = Model::new(ModelConfig::paper_scale()).unwrap();
        let cfg = SequenceConfig {
            frame_width: 320,
            frame_height: 320,
            object_min: 40.0,
            object_max: 80.0,
            frames: 2,
            ..SequenceConfig::default()
        };
        let seq = gen_sequence(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = make_pair::<f32, _>(&seq, 0, 1, &model, 4.0, &mut rng).unwrap();
        assert_eq!(p.template.image.shape(), [3, 127, 127]);
        assert_eq!(p.search.image.shape(), [3, 287, 287]);
        assert_eq!(p.targets.cls1.len(), 41 * 41);
    }
}
