use shelfpick_core::image::{DepthImage, MaskImage};
use shelfpick_core::planner::{CollapsePredictor, PlannerError, PredictionMap};

use crate::checkpoint::Checkpoint;
use crate::gemm::Gemm;
use crate::model::{mask_tensor, normalize_depth, Model, CLASSES};
use crate::ops::softmax;
use crate::NeuralError;

/// Per-pixel class probabilities from `model`.
pub fn predict<T: Gemm>(
    model: &Model<T>,
    depth: &DepthImage,
    mask_e: &MaskImage,
    mask_s: &MaskImage,
) -> Result<PredictionMap, NeuralError> {
    let logits = model.forward(normalize_depth(depth), mask_tensor(mask_e), mask_tensor(mask_s))?;
    let p = softmax(&logits)?;
    let n = depth.width * depth.height;
    let probs = (0..n)
        .map(|i| std::array::from_fn::<f32, CLASSES, _>(|c| p.data[c * n + i].as_f64() as f32))
        .collect();
    Ok(PredictionMap { width: depth.width, height: depth.height, probs })
}

/// Trained network behind the planner's predictor interface.
#[derive(Clone, Debug)]
pub struct LearnedPredictor {
    pub model: Model<f32>,
}

impl LearnedPredictor {
    pub fn new(model: Model<f32>) -> Self {
        Self { model }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, NeuralError> {
        Ok(Self::new(ckpt.model()?))
    }
}

impl CollapsePredictor for LearnedPredictor {
    fn predict(&self, depth: &DepthImage, mask_e: &MaskImage, mask_s: &MaskImage) -> Result<PredictionMap, PlannerError> {
        let r = self.model.spec.resolution;
        for (w, h) in [(depth.width, depth.height), (mask_e.width, mask_e.height), (mask_s.width, mask_s.height)] {
            if (w, h) != (r, r) {
                return Err(PlannerError::ShapeMismatch(format!("inputs must be {r}×{r}, got {w}×{h}")));
            }
        }
        predict(&self.model, depth, mask_e, mask_s).map_err(|e| PlannerError::Predictor(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use shelfpick_core::image::Grid;

    fn inputs() -> (DepthImage, MaskImage, MaskImage) {
        let depth = Grid::from_vec(16, 16, (0..256).map(|i| 0.2 + 0.3 * (i % 7) as f32 / 7.0).collect());
        let e = Grid::from_vec(16, 16, (0..256).map(|i| u8::from(i % 16 < 5)).collect());
        let s = Grid::from_vec(16, 16, (0..256).map(|i| u8::from(i / 16 > 10)).collect());
        (depth, e, s)
    }

    fn predictor() -> LearnedPredictor {
        let spec = ModelSpec {
            resolution: 16,
            depth_widths: vec![2, 3, 4, 4],
            mask_widths: vec![2, 2, 2, 2, 2],
            decoder_widths: vec![3, 3, 2, 2],
            skip_taps: vec![true; 4],
        };
        LearnedPredictor::new(Model::new(spec, 5).unwrap())
    }

    #[test]
    fn output_rows_lie_on_the_simplex() {
        let (d, e, s) = inputs();
        let map = predictor().predict(&d, &e, &s).unwrap();
        assert_eq!((map.width, map.height), (16, 16));
        assert!(map.simplex_error() < 1e-5);
    }

    #[test]
    fn inference_is_deterministic() {
        let (d, e, s) = inputs();
        let p = predictor();
        assert_eq!(p.predict(&d, &e, &s).unwrap(), p.predict(&d, &e, &s).unwrap());
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let (_, e, s) = inputs();
        let d = Grid::new(32, 32, 0.4f32);
        assert!(matches!(predictor().predict(&d, &e, &s), Err(PlannerError::ShapeMismatch(_))));
    }
}
