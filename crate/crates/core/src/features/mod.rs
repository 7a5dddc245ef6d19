//! Frozen convolutional feature extraction with gradients back to the input.
//!
//! The backbone is the VGG-16 convolutional trunk (or a prefix of it), with
//! post-activation feature maps. Grayscale inputs are replicated to three
//! channels and normalized with the backbone's per-channel constants before
//! the first convolution. Weights are loaded from an external safetensors
//! file or generated synthetically from a seed; they are never mutated, so
//! a backbone may be shared freely across threads.
//!
//! Feature losses provide their own layer-space gradients through
//! [`FeatureObjective`]; [`loss_gradient`] injects those into reverse-mode
//! backpropagation through the trunk to obtain per-pixel derivatives.

mod arch;
mod conv;
pub mod weights;

use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::image::Image;
use crate::{Error, Result};
pub use arch::{layer_index, pool_stages, ConvLayerDef, VGG16_CONV_LAYERS};
use conv::{conv3x3_backward_input, conv3x3_bias_relu, maxpool2, maxpool2_backward, Tensor3};
pub(crate) use conv::{matmul, matmul_self_t};

use serde::{Deserialize, Serialize};

/// Which layers feed the style and content losses, and the per-layer style
/// weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub style_layers: Vec<String>,
    pub content_layers: Vec<String>,
    /// One weight per style layer, non-negative, not all zero.
    pub layer_weights: Vec<f64>,
}

impl Default for LayerSelection {
    /// First 8 convolutions for style at equal weight, 4th (conv2_2) for
    /// content.
    fn default() -> Self {
        let style_layers: Vec<String> = VGG16_CONV_LAYERS[..8]
            .iter()
            .map(|l| l.name.to_string())
            .collect();
        let layer_weights = vec![1.0 / 8.0; 8];
        LayerSelection {
            style_layers,
            content_layers: vec!["conv2_2".to_string()],
            layer_weights,
        }
    }
}

impl LayerSelection {
    pub fn validate(&self) -> Result<()> {
        if self.style_layers.is_empty() || self.content_layers.is_empty() {
            return Err(Error::InvalidParameter {
                name: "layers",
                reason: "style and content layer lists must be non-empty".into(),
            });
        }
        if self.layer_weights.len() != self.style_layers.len() {
            return Err(Error::InvalidParameter {
                name: "layer_weights",
                reason: format!(
                    "{} weights for {} style layers",
                    self.layer_weights.len(),
                    self.style_layers.len()
                ),
            });
        }
        if self.layer_weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidParameter {
                name: "layer_weights",
                reason: "weights must be non-negative".into(),
            });
        }
        if self.layer_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "layer_weights",
                reason: "at least one weight must be positive".into(),
            });
        }
        for name in self.style_layers.iter().chain(&self.content_layers) {
            if arch::layer_index(name).is_none() {
                return Err(Error::UnknownLayer(name.clone()));
            }
        }
        Ok(())
    }

    /// Union of style and content layers in trunk order, deduplicated.
    pub fn union_layers(&self) -> Vec<String> {
        let mut indices: Vec<usize> = self
            .style_layers
            .iter()
            .chain(&self.content_layers)
            .filter_map(|n| arch::layer_index(n))
            .collect();
        indices.sort_unstable();
        indices.dedup();
        indices
            .into_iter()
            .map(|i| VGG16_CONV_LAYERS[i].name.to_string())
            .collect()
    }

    /// Trunk index of the deepest selected layer.
    pub fn deepest_index(&self) -> Result<usize> {
        self.style_layers
            .iter()
            .chain(&self.content_layers)
            .map(|n| arch::layer_index(n).ok_or_else(|| Error::UnknownLayer(n.clone())))
            .try_fold(0usize, |acc, idx| Ok(acc.max(idx?)))
    }
}

/// One layer's feature maps, flattened to `[maps, positions]`.
#[derive(Debug, Clone)]
pub struct FeatureEntry {
    pub layer: String,
    pub data: Array2<f64>,
}

/// Per-layer feature matrices for the selected layers, in trunk order.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub entries: Vec<FeatureEntry>,
}

impl FeatureStack {
    pub fn get(&self, layer: &str) -> Result<&Array2<f64>> {
        self.entries
            .iter()
            .find(|e| e.layer == layer)
            .map(|e| &e.data)
            .ok_or_else(|| Error::StackMismatch(format!("layer {layer} not in stack")))
    }
}

/// Layer-space gradients to inject during backpropagation.
#[derive(Debug, Clone, Default)]
pub struct FeatureGrads {
    pub per_layer: Vec<(String, Array2<f64>)>,
}

/// A scalar objective over extracted features, differentiable in the
/// feature entries.
pub trait FeatureObjective {
    fn selection(&self) -> &LayerSelection;
    fn value(&self, stack: &FeatureStack) -> Result<f64>;
    fn feature_gradient(&self, stack: &FeatureStack) -> Result<FeatureGrads>;

    /// Value and gradient together; implementations override this when the
    /// two share intermediate products.
    fn value_and_feature_gradient(&self, stack: &FeatureStack) -> Result<(f64, FeatureGrads)> {
        Ok((self.value(stack)?, self.feature_gradient(stack)?))
    }
}

/// Channel replication and normalization constants applied before the first
/// convolution (ImageNet statistics by default).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

struct ConvLayer {
    def: &'static ConvLayerDef,
    /// `[out_ch, in_ch*9]`, im2col ordering.
    weight: Vec<f64>,
    /// `[in_ch*9, out_ch]` transpose of `weight`, for the input gradient.
    weight_t: Vec<f64>,
    bias: Vec<f64>,
}

/// The frozen feature extractor.
pub struct Backbone {
    layers: Vec<ConvLayer>,
    pub preprocess: Preprocess,
    checksum: String,
}

impl Backbone {
    /// Loads a safetensors weights file; the SHA-256 of the file is recorded
    /// as the backbone checksum.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let tensors = weights::parse_safetensors(bytes)?;
        Ok(Self::from_tensors(&tensors.layers, weights::sha256_hex(bytes)))
    }

    /// Deterministic He-initialized trunk of `depth` layers; the checksum is
    /// the SHA-256 of the canonical file those weights serialize to, so a
    /// synthetic backbone and its exported file are interchangeable.
    pub fn synthetic(depth: usize, seed: u64) -> Self {
        let layers = weights::synthetic_trunk(depth, seed);
        let bytes = weights::serialize_trunk(&layers);
        Self::from_tensors(&layers, weights::sha256_hex(&bytes))
    }

    fn from_tensors(tensors: &[(Vec<f32>, Vec<f32>)], checksum: String) -> Self {
        let mut layers = Vec::with_capacity(tensors.len());
        for (i, (w, b)) in tensors.iter().enumerate() {
            let def = &VGG16_CONV_LAYERS[i];
            let (o, ck) = (def.out_ch, def.in_ch * 9);
            let weight: Vec<f64> = w.iter().map(|&v| v as f64).collect();
            let mut weight_t = vec![0.0f64; ck * o];
            for oi in 0..o {
                for cki in 0..ck {
                    weight_t[cki * o + oi] = weight[oi * ck + cki];
                }
            }
            layers.push(ConvLayer {
                def,
                weight,
                weight_t,
                bias: b.iter().map(|&v| v as f64).collect(),
            });
        }
        Backbone {
            layers,
            preprocess: Preprocess::default(),
            checksum,
        }
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Number of loaded trunk layers.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_defs(&self) -> impl Iterator<Item = &'static ConvLayerDef> + '_ {
        self.layers.iter().map(|l| l.def)
    }

    fn check_depth(&self, deepest: usize, name: &str) -> Result<()> {
        if deepest >= self.layers.len() {
            return Err(Error::MissingWeight {
                layer: name.to_string(),
            });
        }
        Ok(())
    }

    /// Runs the trunk up to (and including) layer `deepest`, keeping the
    /// post-activation maps and pooling masks for a later backward pass.
    pub fn forward(&self, gray: ArrayView2<'_, f64>, deepest: usize) -> Result<Forward<'_>> {
        self.check_depth(deepest, VGG16_CONV_LAYERS[deepest].name)?;
        let (h, w) = gray.dim();
        let stages = arch::pool_stages(deepest);
        let min = 1usize << stages;
        if h < min || w < min {
            return Err(Error::InputTooSmallForLayer {
                layer: self.layers[deepest].def.name.to_string(),
                height: h,
                width: w,
                min,
            });
        }

        // Replicate to three channels and normalize.
        let mut input = Tensor3::zeros(3, h, w);
        for c in 0..3 {
            let (mean, std) = (self.preprocess.mean[c], self.preprocess.std[c]);
            let plane = &mut input.data[c * h * w..(c + 1) * h * w];
            for (dst, src) in plane.iter_mut().zip(gray.iter()) {
                *dst = (src - mean) / std;
            }
        }

        let mut acts: Vec<Tensor3> = Vec::with_capacity(deepest + 1);
        let mut masks: Vec<Option<(Vec<u8>, usize, usize)>> = Vec::with_capacity(deepest + 1);
        for (i, layer) in self.layers[..=deepest].iter().enumerate() {
            let src = if i == 0 { &input } else { &acts[i - 1] };
            let out = if layer.def.pool_before {
                let (pooled, mask) = maxpool2(src);
                masks.push(Some((mask, src.h, src.w)));
                conv3x3_bias_relu(&layer.weight, &layer.bias, layer.def.out_ch, &pooled)
            } else {
                masks.push(None);
                conv3x3_bias_relu(&layer.weight, &layer.bias, layer.def.out_ch, src)
            };
            acts.push(out);
        }
        Ok(Forward {
            backbone: self,
            acts,
            masks,
            input_dims: (h, w),
        })
    }
}

impl std::fmt::Debug for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backbone")
            .field("depth", &self.layers.len())
            .field("checksum", &self.checksum)
            .finish()
    }
}

/// Cached activations of one forward pass.
pub struct Forward<'a> {
    backbone: &'a Backbone,
    acts: Vec<Tensor3>,
    masks: Vec<Option<(Vec<u8>, usize, usize)>>,
    input_dims: (usize, usize),
}

impl Forward<'_> {
    /// Copies one layer's post-activation maps as an `[N_l, M_l]` matrix.
    pub fn feature_matrix(&self, layer: &str) -> Result<Array2<f64>> {
        let idx = arch::layer_index(layer).ok_or_else(|| Error::UnknownLayer(layer.into()))?;
        let act = self.acts.get(idx).ok_or_else(|| Error::MissingWeight {
            layer: layer.to_string(),
        })?;
        Ok(Array2::from_shape_vec((act.c, act.h * act.w), act.data.clone())
            .expect("tensor layout is [c][h*w]"))
    }

    /// Features for every layer in the selection's union, in trunk order.
    pub fn features(&self, sel: &LayerSelection) -> Result<FeatureStack> {
        let mut entries = Vec::new();
        for layer in sel.union_layers() {
            entries.push(FeatureEntry {
                data: self.feature_matrix(&layer)?,
                layer,
            });
        }
        Ok(FeatureStack { entries })
    }

    /// Backpropagates layer-space gradients to a per-pixel gradient image.
    pub fn backward(&self, grads: &FeatureGrads) -> Result<Array2<f64>> {
        let deepest = self.acts.len() - 1;
        // Map injections onto trunk indices.
        let mut injected: Vec<Option<&Array2<f64>>> = vec![None; deepest + 1];
        for (name, grad) in &grads.per_layer {
            let idx = arch::layer_index(name).ok_or_else(|| Error::UnknownLayer(name.clone()))?;
            if idx > deepest {
                return Err(Error::StackMismatch(format!(
                    "gradient injected at {name}, beyond the forward depth"
                )));
            }
            let act = &self.acts[idx];
            if grad.dim() != (act.c, act.h * act.w) {
                return Err(Error::StackMismatch(format!(
                    "gradient shape {:?} at {name} does not match features ({}, {})",
                    grad.dim(),
                    act.c,
                    act.h * act.w
                )));
            }
            if injected[idx].is_some() {
                return Err(Error::StackMismatch(format!(
                    "duplicate gradient injection at {name}"
                )));
            }
            injected[idx] = Some(grad);
        }

        let top = &self.acts[deepest];
        let mut g = Tensor3::zeros(top.c, top.h, top.w);
        for i in (0..=deepest).rev() {
            let act = &self.acts[i];
            if let Some(inj) = injected[i] {
                let src = inj.as_slice().expect("owned standard layout");
                for (dst, v) in g.data.iter_mut().zip(src) {
                    *dst += v;
                }
            }
            // Post-activation gradient through the ReLU.
            for (gv, av) in g.data.iter_mut().zip(&act.data) {
                if *av <= 0.0 {
                    *gv = 0.0;
                }
            }
            let layer = &self.backbone.layers[i];
            let d_in = conv3x3_backward_input(&layer.weight_t, layer.def.in_ch, &g);
            g = match &self.masks[i] {
                Some((mask, ph, pw)) => maxpool2_backward(&d_in, mask, *ph, *pw),
                None => d_in,
            };
        }

        // Collapse the three normalized channels back to grayscale.
        let (h, w) = self.input_dims;
        let mut out = Array2::<f64>::zeros((h, w));
        let out_slice = out.as_slice_mut().expect("freshly allocated");
        for c in 0..3 {
            let inv_std = 1.0 / self.backbone.preprocess.std[c];
            for (dst, v) in out_slice.iter_mut().zip(g.channel(c)) {
                *dst += v * inv_std;
            }
        }
        Ok(out)
    }
}

/// Extracts the feature stack of an image for the selected layers.
pub fn extract(backbone: &Backbone, img: &Image, sel: &LayerSelection) -> Result<FeatureStack> {
    sel.validate()?;
    let gray = img.to_f64();
    let fwd = backbone.forward(gray.view(), sel.deepest_index()?)?;
    fwd.features(sel)
}

/// Per-pixel gradient of `objective` at `img`, by reverse-mode
/// differentiation through the frozen trunk.
pub fn loss_gradient(
    backbone: &Backbone,
    img: &Image,
    objective: &dyn FeatureObjective,
) -> Result<Array2<f64>> {
    let gray = img.to_f64();
    Ok(loss_value_and_gradient(backbone, gray.view(), objective)?.1)
}

/// One forward/backward pass: the objective value and its pixel gradient.
pub fn loss_value_and_gradient(
    backbone: &Backbone,
    gray: ArrayView2<'_, f64>,
    objective: &dyn FeatureObjective,
) -> Result<(f64, Array2<f64>)> {
    let sel = objective.selection();
    sel.validate()?;
    let fwd = backbone.forward(gray, sel.deepest_index()?)?;
    let stack = fwd.features(sel)?;
    let (value, grads) = objective.value_and_feature_gradient(&stack)?;
    let grad = fwd.backward(&grads)?;
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Image::new(Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn first_layer_shapes_follow_architecture() {
        let backbone = Backbone::synthetic(1, 1);
        let sel = LayerSelection {
            style_layers: vec!["conv1_1".into()],
            content_layers: vec!["conv1_1".into()],
            layer_weights: vec![1.0],
        };
        let stack = extract(&backbone, &random_image(1, 64, 64), &sel).unwrap();
        assert_eq!(stack.entries.len(), 1);
        assert_eq!(stack.get("conv1_1").unwrap().dim(), (64, 64 * 64));
    }

    #[test]
    fn downsampled_layer_shapes_follow_architecture() {
        let backbone = Backbone::synthetic(5, 1);
        let sel = LayerSelection {
            style_layers: vec!["conv3_1".into()],
            content_layers: vec!["conv3_1".into()],
            layer_weights: vec![1.0],
        };
        let stack = extract(&backbone, &random_image(2, 64, 64), &sel).unwrap();
        // Fifth conv layer sits after two pooling stages: 64 -> 16 per side.
        assert_eq!(stack.get("conv3_1").unwrap().dim(), (256, 16 * 16));
    }

    #[test]
    fn extraction_is_deterministic() {
        let backbone = Backbone::synthetic(8, 3);
        let img = random_image(5, 32, 32);
        let sel = LayerSelection::default();
        let a = extract(&backbone, &img, &sel).unwrap();
        let b = extract(&backbone, &img, &sel).unwrap();
        for (ea, eb) in a.entries.iter().zip(&b.entries) {
            assert_eq!(ea.layer, eb.layer);
            assert_eq!(ea.data, eb.data);
        }
    }

    #[test]
    fn reloading_same_bytes_gives_identical_features() {
        let tensors = weights::synthetic_trunk(2, 7);
        let bytes = weights::serialize_trunk(&tensors);
        let b1 = Backbone::from_bytes(&bytes).unwrap();
        let b2 = Backbone::from_bytes(&bytes).unwrap();
        assert_eq!(b1.checksum(), b2.checksum());
        let img = random_image(8, 16, 16);
        let sel = LayerSelection {
            style_layers: vec!["conv1_2".into()],
            content_layers: vec!["conv1_1".into()],
            layer_weights: vec![1.0],
        };
        let fa = extract(&b1, &img, &sel).unwrap();
        let fb = extract(&b2, &img, &sel).unwrap();
        assert_eq!(fa.get("conv1_2").unwrap(), fb.get("conv1_2").unwrap());
    }

    #[test]
    fn synthetic_matches_its_serialized_file() {
        let direct = Backbone::synthetic(3, 21);
        let bytes = weights::serialize_trunk(&weights::synthetic_trunk(3, 21));
        let loaded = Backbone::from_bytes(&bytes).unwrap();
        assert_eq!(direct.checksum(), loaded.checksum());
    }

    #[test]
    fn rejects_selection_beyond_loaded_depth() {
        let backbone = Backbone::synthetic(2, 1);
        let sel = LayerSelection {
            style_layers: vec!["conv3_1".into()],
            content_layers: vec!["conv1_1".into()],
            layer_weights: vec![1.0],
        };
        assert!(extract(&backbone, &random_image(1, 32, 32), &sel).is_err());
    }

    #[test]
    fn rejects_image_too_small_for_deep_layer() {
        let backbone = Backbone::synthetic(8, 1);
        let gray = Array2::<f64>::zeros((4, 32));
        assert!(matches!(
            backbone.forward(gray.view(), 7),
            Err(Error::InputTooSmallForLayer { .. })
        ));
    }

    #[test]
    fn zero_objective_gives_zero_gradient() {
        struct Zero(LayerSelection);
        impl FeatureObjective for Zero {
            fn selection(&self) -> &LayerSelection {
                &self.0
            }
            fn value(&self, _: &FeatureStack) -> Result<f64> {
                Ok(0.0)
            }
            fn feature_gradient(&self, stack: &FeatureStack) -> Result<FeatureGrads> {
                Ok(FeatureGrads {
                    per_layer: stack
                        .entries
                        .iter()
                        .map(|e| (e.layer.clone(), Array2::zeros(e.data.dim())))
                        .collect(),
                })
            }
        }
        let backbone = Backbone::synthetic(8, 2);
        let img = random_image(3, 16, 16);
        let grad = loss_gradient(&backbone, &img, &Zero(LayerSelection::default())).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }
}
