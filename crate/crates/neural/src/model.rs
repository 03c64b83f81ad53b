//! Three-branch encoder with a skip-connected transposed-conv decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use shelfpick_core::image::{DepthImage, MaskImage};

use crate::gemm::Gemm;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use crate::NeuralError;

pub const CLASSES: usize = 4;
/// Every branch downsamples by this factor before the decoder.
pub const STAGES: usize = 4;
pub const MASK_LAYERS: usize = 5;

/// Depth at the back wall and the span mapped onto `[0, 1]` for the input.
const DEPTH_FAR: f32 = 0.5;
const DEPTH_SPAN: f32 = 0.3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub resolution: usize,
    /// Output width of each two-conv depth block.
    pub depth_widths: Vec<usize>,
    /// Output width of each mask-branch conv layer.
    pub mask_widths: Vec<usize>,
    /// Output width of each transposed-conv stage.
    pub decoder_widths: Vec<usize>,
    /// `skip_taps[i]` concatenates the pre-pool output of depth block
    /// `STAGES - 1 - i` after decoder stage `i`.
    pub skip_taps: Vec<bool>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            resolution: 64,
            depth_widths: vec![16, 32, 64, 128],
            mask_widths: vec![8, 16, 32, 64, 64],
            decoder_widths: vec![64, 32, 16, 8],
            skip_taps: vec![true; STAGES],
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |m: String| Err(NeuralError::InvalidSpec(m));
        let factor = 1 << STAGES;
        if self.resolution == 0 || self.resolution % factor != 0 {
            return bad(format!("resolution {} is not a positive multiple of {factor}", self.resolution));
        }
        for (name, v, n) in [
            ("depth_widths", &self.depth_widths, STAGES),
            ("mask_widths", &self.mask_widths, MASK_LAYERS),
            ("decoder_widths", &self.decoder_widths, STAGES),
        ] {
            if v.len() != n {
                return bad(format!("{name} needs {n} entries, got {}", v.len()));
            }
            if v.contains(&0) {
                return bad(format!("{name} has a zero width"));
            }
        }
        if self.skip_taps.len() != STAGES {
            return bad(format!("skip_taps needs {STAGES} entries, got {}", self.skip_taps.len()));
        }
        Ok(())
    }

    /// Channels entering the decoder.
    pub fn bottleneck_width(&self) -> usize {
        self.depth_widths[STAGES - 1] + 2 * self.mask_widths[MASK_LAYERS - 1]
    }

    /// Channels after decoder stage `i`, including its skip concat.
    pub fn stage_width(&self, i: usize) -> usize {
        let skip = if self.skip_taps[i] { self.depth_widths[STAGES - 1 - i] } else { 0 };
        self.decoder_widths[i] + skip
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    depth: Vec<[Layer; 2]>,
    mask_e: Vec<Layer>,
    mask_s: Vec<Layer>,
    decoder: Vec<Layer>,
    head: Layer,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub params: Vec<Tensor<T>>,
    layout: Layout,
}

/// Parameter shapes in storage order: kernel then bias for every layer.
fn plan(spec: &ModelSpec) -> (Layout, Vec<Vec<usize>>) {
    let mut shapes = Vec::new();
    let mut layer = |shape: [usize; 4], out: usize| {
        shapes.push(shape.to_vec());
        shapes.push(vec![out]);
        Layer { w: shapes.len() - 2, b: shapes.len() - 1 }
    };
    let mut depth = Vec::new();
    let mut cin = 1;
    for &c in &spec.depth_widths {
        depth.push([layer([c, cin, 3, 3], c), layer([c, c, 3, 3], c)]);
        cin = c;
    }
    let mask = |layer: &mut dyn FnMut([usize; 4], usize) -> Layer| {
        let mut cin = 1;
        spec.mask_widths
            .iter()
            .map(|&c| {
                let l = layer([c, cin, 3, 3], c);
                cin = c;
                l
            })
            .collect::<Vec<_>>()
    };
    let mask_e = mask(&mut layer);
    let mask_s = mask(&mut layer);
    let mut decoder = Vec::new();
    let mut cin = spec.bottleneck_width();
    for (i, &c) in spec.decoder_widths.iter().enumerate() {
        // Transposed kernels are stored input-major.
        decoder.push(layer([cin, c, 4, 4], c));
        cin = spec.stage_width(i);
    }
    let head = layer([CLASSES, cin, 1, 1], CLASSES);
    (Layout { depth, mask_e, mask_s, decoder, head }, shapes)
}

/// Scales depth so the back wall maps to 0 and the front of the shelf to 1.
pub fn normalize_depth<T: Gemm>(depth: &DepthImage) -> Tensor<T> {
    Tensor {
        shape: vec![1, depth.height, depth.width],
        data: depth.data.iter().map(|&d| T::lit(f64::from((DEPTH_FAR - d) / DEPTH_SPAN))).collect(),
    }
}

pub fn mask_tensor<T: Gemm>(mask: &MaskImage) -> Tensor<T> {
    Tensor {
        shape: vec![1, mask.height, mask.width],
        data: mask.data.iter().map(|&m| if m != 0 { T::one() } else { T::zero() }).collect(),
    }
}

impl<T: Gemm> Model<T> {
    /// He-initialized kernels (fan-in scaling) and zero biases.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, NeuralError> {
        spec.validate()?;
        let (layout, shapes) = plan(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = shapes
            .iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(shape);
                }
                // For transposed kernels each output sees in/stride² inputs
                // per tap; the conv fan-in formula is kept for simplicity.
                let fan_in = shape[1..].iter().product::<usize>();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Tensor {
                    shape: shape.clone(),
                    data: (0..shape.iter().product::<usize>()).map(|_| T::lit(normal.sample(&mut rng))).collect(),
                }
            })
            .collect();
        Ok(Self { spec, params, layout })
    }

    /// Wraps existing parameters, checking them against the spec.
    pub fn from_params(spec: ModelSpec, params: Vec<Tensor<T>>) -> Result<Self, NeuralError> {
        spec.validate()?;
        let (layout, shapes) = plan(&spec);
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| *s != p.shape) {
            return Err(NeuralError::ShapeMismatch("parameters do not fit the spec".into()));
        }
        Ok(Self { spec, params, layout })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn mask_conv_layers(&self) -> [usize; 2] {
        [self.layout.mask_e.len(), self.layout.mask_s.len()]
    }

    /// Records the forward pass on `graph` and returns the logits node.
    pub fn forward_graph<'p>(
        &self,
        graph: &mut Graph<'p, T>,
        depth: Tensor<T>,
        mask_e: Tensor<T>,
        mask_s: Tensor<T>,
    ) -> Result<NodeId, NeuralError> {
        let r = self.spec.resolution;
        for t in [&depth, &mask_e, &mask_s] {
            if t.shape != [1, r, r] {
                return Err(NeuralError::ShapeMismatch(format!("input {:?}, model expects [1, {r}, {r}]", t.shape)));
            }
        }
        let l = &self.layout;
        let mut x = graph.input(depth);
        let mut taps = Vec::with_capacity(STAGES);
        for block in &l.depth {
            for layer in block {
                let y = graph.conv(x, layer.w, layer.b, 1, 1)?;
                x = graph.relu(y);
            }
            taps.push(x);
            x = graph.maxpool(x)?;
        }
        let mut branch = |input: Tensor<T>, layers: &[Layer]| -> Result<NodeId, NeuralError> {
            let mut m = graph.input(input);
            for (i, layer) in layers.iter().enumerate() {
                let stride = if i < STAGES { 2 } else { 1 };
                let y = graph.conv(m, layer.w, layer.b, stride, 1)?;
                m = graph.relu(y);
            }
            Ok(m)
        };
        let e = branch(mask_e, &l.mask_e)?;
        let s = branch(mask_s, &l.mask_s)?;
        let mut h = graph.concat(&[x, e, s])?;
        for (i, layer) in l.decoder.iter().enumerate() {
            let y = graph.deconv(h, layer.w, layer.b, 2, 1)?;
            h = graph.relu(y);
            if self.spec.skip_taps[i] {
                h = graph.concat(&[h, taps[STAGES - 1 - i]])?;
            }
        }
        graph.conv(h, l.head.w, l.head.b, 1, 0)
    }

    /// Logits of shape `[4, R, R]`.
    pub fn forward(&self, depth: Tensor<T>, mask_e: Tensor<T>, mask_s: Tensor<T>) -> Result<Tensor<T>, NeuralError> {
        let mut graph = Graph::new(&self.params);
        let out = self.forward_graph(&mut graph, depth, mask_e, mask_s)?;
        Ok(graph.value(out).clone())
    }
}
