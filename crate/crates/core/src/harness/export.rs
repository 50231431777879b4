//! PNG frames plus a JSON ground-truth list.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use super::synth::SyntheticSequence;
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtEntry {
    pub frame: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

pub fn gt_entries(seq: &SyntheticSequence) -> Vec<GtEntry> {
    seq.gt
        .iter()
        .enumerate()
        .map(|(frame, b)| GtEntry {
            frame,
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
        })
        .collect()
}

pub fn frame_to_rgb(frame: &Tensor<f32>) -> Result<ImageBuffer<Rgb<u8>, Vec<u8>>> {
    let (_, h, w) = frame.dims3()?;
    let d = frame.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([0, 1, 2].map(|c| (d[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8))
    }))
}

/// Writes `frame_0000.png`, `frame_0001.png`, ... and `gt.json` into `dir`.
pub fn export_sequence(seq: &SyntheticSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in seq.frames.iter().enumerate() {
        frame_to_rgb(f)?.save(dir.join(format!("frame_{i:04}.png")))?;
    }
    fs::write(
        dir.join("gt.json"),
        serde_json::to_string_pretty(&gt_entries(seq))?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::{gen_sequence, SequenceConfig};

    #[test]
    fn export_writes_frames_and_gt() {
        let seq = gen_sequence(
            &SequenceConfig {
                frames: 2,
                ..SequenceConfig::default()
            },
            8,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_sequence(&seq, dir.path()).unwrap();
        let img = image::open(dir.path().join("frame_0001.png"))
            .unwrap()
            .to_rgb8();
        assert_eq!(img.dimensions(), (96, 96));
        let px = img.get_pixel(5, 7);
        let expect = (seq.frames[1].data()[7 * 96 + 5] * 255.0).round() as u8;
        assert_eq!(px[0], expect);
        let gt: Vec<GtEntry> =
            serde_json::from_str(&fs::read_to_string(dir.path().join("gt.json")).unwrap()).unwrap();
        assert_eq!(gt, gt_entries(&seq));
        assert_eq!(gt[1].frame, 1);
    }
}
