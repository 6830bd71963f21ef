//! Ground-truth-backed predictions for pipeline self-checks.
//!
//! Feeding encoded targets back through decode and the metrics as if they
//! were network output gives an upper bound every metric must hit exactly;
//! tests use it to separate pipeline bugs from model quality.

use crate::encoding::{encode_ground_truth, layout, EncodeParams, FeatureMaps, GroundTruthMaps};
use crate::error::{Error, Result};
use crate::nn::DOWNSAMPLE;
use crate::train::{LoadedSample, Predictor};

/// Pre-activation value whose sigmoid is within 1e-7 of 1.
const SATURATION_CLAMP: f64 = 1e-7;

/// Converts encoded targets into the pre-activation form the network emits:
/// binary channels become logits of the (clamped) target probability, so the
/// sigmoid recovers the target exactly up to the clamp; regression channels
/// are copied through.
pub fn pre_activation_from_ground_truth(gt: &GroundTruthMaps) -> FeatureMaps {
    let mut maps = gt.maps.clone();
    for ch in layout::CLASSIFICATION {
        for v in maps.index_axis_mut(ndarray::Axis(0), ch).iter_mut() {
            let p = v.clamp(SATURATION_CLAMP, 1.0 - SATURATION_CLAMP);
            *v = (p / (1.0 - p)).ln();
        }
    }
    FeatureMaps::new(maps).expect("ground truth maps are finite")
}

/// A predictor that encodes each sample's own labels: the ceiling of the
/// whole detect-and-score pipeline. Evaluating it must reach a perfect
/// structural AP; anything less is a codec or metric defect.
#[derive(Debug, Clone, Default)]
pub struct IdealPredictor {
    pub encode: EncodeParams,
}

impl Predictor for IdealPredictor {
    fn predict(&self, sample: &LoadedSample) -> Result<FeatureMaps> {
        let lines = sample
            .lines
            .as_ref()
            .ok_or_else(|| Error::Data(format!("sample {:?} has no labels", sample.id)))?;
        let (_, h, w) = sample.image.dim();
        let (mh, mw) = (h / DOWNSAMPLE, w / DOWNSAMPLE);
        let scale = 1.0 / DOWNSAMPLE as f64;
        let lines_map: Vec<_> = lines
            .iter()
            .map(|l| {
                let mut m = *l;
                m.start.x *= scale;
                m.start.y *= scale;
                m.end.x *= scale;
                m.end.y *= scale;
                m
            })
            .collect();
        let gt = encode_ground_truth(&lines_map, mh, mw, &self.encode)?;
        Ok(pre_activation_from_ground_truth(&gt))
    }
}
