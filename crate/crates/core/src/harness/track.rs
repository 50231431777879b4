//! Closed-loop tracking with a template fixed at frame 0.

use serde::{Deserialize, Serialize};

use super::crop::crop;
use super::synth::SyntheticSequence;
use crate::error::{Error, Result};
use crate::head::{decode_box, iou, BoundingBox};
use crate::model::Model;
use crate::params::ModelParams;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub iou: f64,
}

impl FrameResult {
    pub fn bbox(&self) -> BoundingBox {
        BoundingBox {
            x1: self.x1,
            y1: self.y1,
            x2: self.x2,
            y2: self.y2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    /// Frames `1..len`; frame 0 is the initialization.
    pub frames: Vec<FrameResult>,
    pub mean_iou: f64,
}

/// Each search crop is centered on the previous prediction; boxes are
/// mapped back to frame coordinates and clipped to the frame.
pub fn track_sequence<T: Real>(
    model: &Model,
    params: &ModelParams<T>,
    seq: &SyntheticSequence,
) -> Result<TrackResult> {
    if seq.len() < 2 {
        return Err(Error::contract("tracking needs at least two frames"));
    }
    let (fw, fh) = (seq.width() as f64, seq.height() as f64);
    let input = &model.cfg.input;
    let template = crop::<T>(&seq.frames[0], seq.gt[0].center(), input.template_size)?;
    let mut prev = seq.gt[0];
    let mut frames = Vec::with_capacity(seq.len() - 1);
    for t in 1..seq.len() {
        let search = crop::<T>(&seq.frames[t], prev.center(), input.search_size)?;
        let maps = model.predict(params, &template.image, &search.image)?;
        let decoded = decode_box(&maps, &model.geometry)?;
        let mut b = search.to_frame(&decoded.bbox).clip(fw, fh);
        if !(b.x1.is_finite() && b.y1.is_finite() && b.x2.is_finite() && b.y2.is_finite()) {
            b = prev;
        }
        frames.push(FrameResult {
            frame: t,
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
            iou: iou(&b, &seq.gt[t]),
        });
        prev = b;
    }
    let mean_iou = frames.iter().map(|f| f.iou).sum::<f64>() / frames.len() as f64;
    Ok(TrackResult { frames, mean_iou })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::{gen_sequence, SequenceConfig};
    use crate::model::ModelConfig;

    #[test]
    fn untrained_model_emits_valid_boxes() {
        let model = Model::new(ModelConfig::toy()).unwrap();
        let p = model.init_params::<f32>(3);
        let seq = gen_sequence(
            &SequenceConfig {
                frames: 4,
                ..SequenceConfig::default()
            },
            2,
        )
        .unwrap();
        let a = track_sequence(&model, &p, &seq).unwrap();
        assert_eq!(a.frames.len(), 3);
        for f in &a.frames {
            let b = f.bbox();
            assert!(b.x1 <= b.x2 && b.y1 <= b.y2 && b.is_within(96.0, 96.0));
            assert!((0.0..=1.0).contains(&f.iou));
        }
        let b = track_sequence(&model, &p, &seq).unwrap();
        assert_eq!(a, b);
    }
}
