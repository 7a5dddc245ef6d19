//! The neural style transfer engine: Gram matrices, content/style losses and
//! the iterative transfer operation.
//!
//! Content loss is the (halved) elementwise difference between feature
//! stacks; style loss compares Gram matrices per layer, each normalized by
//! 4 * N_l^2 * M_l^2 and combined with the per-layer weights. Both losses
//! come in the squared (L2) form and an absolute-difference (L1) variant
//! that tends to preserve sharpness; the norm mode applies to content and
//! style alike.
//!
//! `transfer` minimizes `alpha * content + beta * style` over the pixels of
//! a working copy of the input with fixed-step Adam updates, so "N
//! iterations of the engine" is well defined. Iterates are not clipped
//! while the optimization runs; only the returned image is clipped.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::features::{
    extract, loss_value_and_gradient, Backbone, FeatureEntry, FeatureGrads, FeatureObjective,
    FeatureStack, LayerSelection,
};
use crate::image::{clip01_f64, Image};
use crate::{Error, Result};

/// Norm applied to both loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    L1,
    L2,
}

/// First-order update parameters for the transfer iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Style-transfer engine configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NSTConfig {
    /// Content weight; only the ratio to `beta` matters for the minimizer.
    pub alpha: f64,
    /// Style weight, conventionally normalized to 1.
    pub beta: f64,
    pub selection: LayerSelection,
    pub norm_mode: NormMode,
    /// Adam step size for the pixel updates.
    pub step_size: f64,
    pub optimizer: AdamParams,
}

impl Default for NSTConfig {
    fn default() -> Self {
        NSTConfig {
            alpha: 1e-6,
            beta: 1.0,
            selection: LayerSelection::default(),
            norm_mode: NormMode::L1,
            step_size: 0.01,
            optimizer: AdamParams::default(),
        }
    }
}

impl NSTConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) || self.alpha + self.beta <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "alpha/beta",
                reason: format!(
                    "weights must be non-negative with a positive sum, got {} and {}",
                    self.alpha, self.beta
                ),
            });
        }
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidParameter {
                name: "step_size",
                reason: format!("must be positive, got {}", self.step_size),
            });
        }
        self.selection.validate()
    }
}

/// A layer's feature correlation matrix `G = F F^T`.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub layer: String,
    pub matrix: Array2<f64>,
}

/// Gram matrix of one layer's `[N_l, M_l]` feature matrix.
pub fn gram(features: &FeatureEntry) -> GramMatrix {
    GramMatrix {
        layer: features.layer.clone(),
        matrix: crate::features::matmul_self_t(&features.data),
    }
}

fn penalty(diff: f64, mode: NormMode) -> f64 {
    match mode {
        NormMode::L1 => diff.abs(),
        NormMode::L2 => diff * diff,
    }
}

/// Content loss between two stacks, summed over the selection's content
/// layers: half the summed squared (L2) or absolute (L1) feature difference.
pub fn content_loss(
    x_feats: &FeatureStack,
    c_feats: &FeatureStack,
    cfg: &NSTConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for layer in &cfg.selection.content_layers {
        let fx = x_feats.get(layer)?;
        let fc = c_feats.get(layer)?;
        if fx.dim() != fc.dim() {
            return Err(Error::StackMismatch(format!(
                "content layer {layer}: {:?} vs {:?}",
                fx.dim(),
                fc.dim()
            )));
        }
        let mut acc = 0.0;
        for (a, b) in fx.iter().zip(fc.iter()) {
            acc += penalty(a - b, cfg.norm_mode);
        }
        total += 0.5 * acc;
    }
    Ok(total)
}

fn gram_layer_loss(gx: &Array2<f64>, gs: &Array2<f64>, m: usize, mode: NormMode) -> f64 {
    let n = gx.dim().0;
    let norm = 4.0 * (n * n) as f64 * (m * m) as f64;
    let mut acc = 0.0;
    for (a, b) in gx.iter().zip(gs.iter()) {
        acc += penalty(a - b, mode);
    }
    acc / norm
}

/// Style loss between two stacks: per style layer, the normalized Gram
/// difference, combined with the per-layer weights.
pub fn style_loss(x_feats: &FeatureStack, s_feats: &FeatureStack, cfg: &NSTConfig) -> Result<f64> {
    let mut total = 0.0;
    for (layer, weight) in cfg
        .selection
        .style_layers
        .iter()
        .zip(&cfg.selection.layer_weights)
    {
        let fx = x_feats.get(layer)?;
        let fs = s_feats.get(layer)?;
        if fx.dim() != fs.dim() {
            return Err(Error::StackMismatch(format!(
                "style layer {layer}: {:?} vs {:?}",
                fx.dim(),
                fs.dim()
            )));
        }
        let gx = crate::features::matmul_self_t(fx);
        let gs = crate::features::matmul_self_t(fs);
        total += weight * gram_layer_loss(&gx, &gs, fx.dim().1, cfg.norm_mode);
    }
    Ok(total)
}

/// Precomputed optimization targets: content features of the content image
/// and Gram matrices of the style image, reused across iterations and
/// candidate evaluations.
#[derive(Debug, Clone)]
pub struct TransferTargets {
    content: Vec<(String, Array2<f64>)>,
    style: Vec<(String, f64, Array2<f64>, usize)>, // (layer, weight, gram, m)
    selection: LayerSelection,
}

impl TransferTargets {
    pub fn new(
        backbone: &Backbone,
        x_content: &Image,
        x_style: &Image,
        cfg: &NSTConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let sel = &cfg.selection;
        let content_stack = extract(backbone, x_content, sel)?;
        let style_stack = extract(backbone, x_style, sel)?;
        let content = sel
            .content_layers
            .iter()
            .map(|l| Ok((l.clone(), content_stack.get(l)?.clone())))
            .collect::<Result<_>>()?;
        let style = sel
            .style_layers
            .iter()
            .zip(&sel.layer_weights)
            .map(|(l, &w)| {
                let f = style_stack.get(l)?;
                Ok((l.clone(), w, crate::features::matmul_self_t(f), f.dim().1))
            })
            .collect::<Result<_>>()?;
        Ok(TransferTargets {
            content,
            style,
            selection: sel.clone(),
        })
    }
}

/// The combined transfer objective `alpha * content + beta * style` against
/// fixed targets.
pub struct TransferObjective<'a> {
    pub targets: &'a TransferTargets,
    pub alpha: f64,
    pub beta: f64,
    pub norm_mode: NormMode,
}

impl<'a> TransferObjective<'a> {
    pub fn new(targets: &'a TransferTargets, cfg: &NSTConfig) -> Self {
        TransferObjective {
            targets,
            alpha: cfg.alpha,
            beta: cfg.beta,
            norm_mode: cfg.norm_mode,
        }
    }

    /// `(total, content, style)` at the given stack.
    pub fn parts(&self, stack: &FeatureStack) -> Result<(f64, f64, f64)> {
        let (content, style, _) = self.evaluate(stack, false)?;
        Ok((self.alpha * content + self.beta * style, content, style))
    }

    /// Shared evaluation: loss terms, plus layer-space gradients when asked.
    /// The Gram matrix of each style layer is computed once and feeds both.
    fn evaluate(
        &self,
        stack: &FeatureStack,
        with_grad: bool,
    ) -> Result<(f64, f64, Option<FeatureGrads>)> {
        let mut grads: Vec<(String, Array2<f64>)> = if with_grad {
            stack
                .entries
                .iter()
                .map(|e| (e.layer.clone(), Array2::zeros(e.data.dim())))
                .collect()
        } else {
            Vec::new()
        };
        let lookup = |name: &str, grads: &Vec<(String, Array2<f64>)>| -> usize {
            grads
                .iter()
                .position(|(l, _)| l == name)
                .expect("stack covers selection")
        };

        let mut content = 0.0;
        for (layer, target) in &self.targets.content {
            let f = stack.get(layer)?;
            if f.dim() != target.dim() {
                return Err(Error::StackMismatch(format!(
                    "content layer {layer}: {:?} vs {:?}",
                    f.dim(),
                    target.dim()
                )));
            }
            let mut acc = 0.0;
            if with_grad {
                let idx = lookup(layer, &grads);
                let g = &mut grads[idx].1;
                match self.norm_mode {
                    NormMode::L2 => {
                        for ((gv, a), b) in g.iter_mut().zip(f.iter()).zip(target.iter()) {
                            let d = a - b;
                            acc += d * d;
                            *gv += self.alpha * d;
                        }
                    }
                    NormMode::L1 => {
                        for ((gv, a), b) in g.iter_mut().zip(f.iter()).zip(target.iter()) {
                            let d = a - b;
                            acc += d.abs();
                            *gv += self.alpha * 0.5 * d.signum_or_zero();
                        }
                    }
                }
            } else {
                for (a, b) in f.iter().zip(target.iter()) {
                    acc += penalty(a - b, self.norm_mode);
                }
            }
            content += 0.5 * acc;
        }

        let mut style = 0.0;
        for (layer, weight, target_gram, m) in &self.targets.style {
            let f = stack.get(layer)?;
            let n = f.dim().0;
            if f.dim().1 != *m || n != target_gram.dim().0 {
                return Err(Error::StackMismatch(format!(
                    "style layer {layer}: {:?} vs gram {:?} with m={m}",
                    f.dim(),
                    target_gram.dim()
                )));
            }
            let g = crate::features::matmul_self_t(f);
            let diff = &g - target_gram;
            let norm = 4.0 * (n * n) as f64 * (m * m) as f64;
            let layer_loss = diff.iter().map(|&d| penalty(d, self.norm_mode)).sum::<f64>() / norm;
            style += weight * layer_loss;
            if with_grad {
                // d/dF of the normalized Gram loss: L2 gives (G - Gs) F /
                // (N^2 M^2), L1 gives sign(G - Gs) F / (2 N^2 M^2); both use
                // the symmetry of the difference matrix.
                let (mat, scale) = match self.norm_mode {
                    NormMode::L2 => (diff, 1.0 / ((n * n) as f64 * (m * m) as f64)),
                    NormMode::L1 => (
                        diff.mapv(|d| d.signum_or_zero()),
                        1.0 / (2.0 * (n * n) as f64 * (m * m) as f64),
                    ),
                };
                let contrib = crate::features::matmul(&mat, f);
                let idx = lookup(layer, &grads);
                let gmat = &mut grads[idx].1;
                let factor = self.beta * weight * scale;
                for (gv, c) in gmat.iter_mut().zip(contrib.iter()) {
                    *gv += factor * c;
                }
            }
        }

        let grads = with_grad.then_some(FeatureGrads { per_layer: grads });
        Ok((content, style, grads))
    }
}

impl FeatureObjective for TransferObjective<'_> {
    fn selection(&self) -> &LayerSelection {
        &self.targets.selection
    }

    fn value(&self, stack: &FeatureStack) -> Result<f64> {
        Ok(self.parts(stack)?.0)
    }

    fn feature_gradient(&self, stack: &FeatureStack) -> Result<FeatureGrads> {
        let (.., grads) = self.evaluate(stack, true)?;
        Ok(grads.expect("gradient requested"))
    }

    fn value_and_feature_gradient(&self, stack: &FeatureStack) -> Result<(f64, FeatureGrads)> {
        let (content, style, grads) = self.evaluate(stack, true)?;
        Ok((
            self.alpha * content + self.beta * style,
            grads.expect("gradient requested"),
        ))
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    /// `signum` with `sign(0) = 0`, the subgradient convention for |x|.
    fn signum_or_zero(self) -> f64 {
        if self == 0.0 {
            0.0
        } else {
            self.signum()
        }
    }
}

/// Outcome of a transfer run.
#[derive(Debug, Clone)]
pub struct TransferResult {
    pub output: Image,
    pub final_total_loss: f64,
    pub final_content_loss: f64,
    pub final_style_loss: f64,
    pub iterations_run: usize,
}

/// Total loss `alpha * content + beta * style` of `x` against content image
/// `x_c` and style image `x_s`; returns `(total, content, style)`.
pub fn total_loss(
    x: &Image,
    x_c: &Image,
    x_s: &Image,
    backbone: &Backbone,
    cfg: &NSTConfig,
) -> Result<(f64, f64, f64)> {
    let targets = TransferTargets::new(backbone, x_c, x_s, cfg)?;
    let stack = extract(backbone, x, &cfg.selection)?;
    TransferObjective::new(&targets, cfg).parts(&stack)
}

struct AdamState {
    m: Array2<f64>,
    v: Array2<f64>,
    t: u32,
}

impl AdamState {
    fn new(dim: (usize, usize)) -> Self {
        AdamState {
            m: Array2::zeros(dim),
            v: Array2::zeros(dim),
            t: 0,
        }
    }

    fn step(&mut self, x: &mut Array2<f64>, grad: &Array2<f64>, lr: f64, p: &AdamParams) {
        self.t += 1;
        let bc1 = 1.0 - p.beta1.powi(self.t as i32);
        let bc2 = 1.0 - p.beta2.powi(self.t as i32);
        for ((m, v), (xv, g)) in self
            .m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(x.iter_mut().zip(grad.iter()))
        {
            *m = p.beta1 * *m + (1.0 - p.beta1) * g;
            *v = p.beta2 * *v + (1.0 - p.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *xv -= lr * m_hat / (v_hat.sqrt() + p.epsilon);
        }
    }
}

/// Runs the transfer optimization and snapshots the (clipped) iterate at
/// each requested iteration count. Checkpoints must be strictly increasing;
/// a checkpoint of 0 snapshots the initial image. Because the update is
/// deterministic, the snapshot at count `c` is bit-identical to a separate
/// `transfer` run of `c` iterations.
pub fn transfer_checkpoints(
    x_init: &Image,
    targets: &TransferTargets,
    checkpoints: &[usize],
    backbone: &Backbone,
    cfg: &NSTConfig,
) -> Result<Vec<Image>> {
    cfg.validate()?;
    if !checkpoints.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::InvalidParameter {
            name: "checkpoints",
            reason: "iteration counts must be strictly increasing".into(),
        });
    }
    let objective = TransferObjective::new(targets, cfg);
    let mut x = x_init.to_f64();
    let mut adam = AdamState::new(x.dim());
    let mut outputs = Vec::with_capacity(checkpoints.len());
    let mut remaining = checkpoints.iter().peekable();
    let last = *checkpoints.last().unwrap_or(&0);

    if remaining.peek() == Some(&&0) {
        outputs.push(clip01_f64(&x));
        remaining.next();
    }
    for step in 1..=last {
        let (value, grad) = loss_value_and_gradient(backbone, x.view(), &objective)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                context: "style transfer iteration".into(),
            });
        }
        adam.step(&mut x, &grad, cfg.step_size, &cfg.optimizer);
        if remaining.peek() == Some(&&step) {
            outputs.push(clip01_f64(&x));
            remaining.next();
        }
    }
    Ok(outputs)
}

/// Runs `n_iters` transfer iterations from `x_init`, matching content to
/// `x_content` and style to `x_guid`. With `n_iters = 0` the input is
/// returned unchanged along with its initial losses.
pub fn transfer(
    x_init: &Image,
    x_guid: &Image,
    x_content: &Image,
    n_iters: usize,
    backbone: &Backbone,
    cfg: &NSTConfig,
) -> Result<TransferResult> {
    x_init.check_same_shape(x_guid)?;
    x_init.check_same_shape(x_content)?;
    let targets = TransferTargets::new(backbone, x_content, x_guid, cfg)?;
    transfer_with_targets(x_init, &targets, n_iters, backbone, cfg)
}

/// [`transfer`] against precomputed targets.
pub fn transfer_with_targets(
    x_init: &Image,
    targets: &TransferTargets,
    n_iters: usize,
    backbone: &Backbone,
    cfg: &NSTConfig,
) -> Result<TransferResult> {
    let output = if n_iters == 0 {
        x_init.clone()
    } else {
        transfer_checkpoints(x_init, targets, &[n_iters], backbone, cfg)?
            .pop()
            .expect("one checkpoint requested")
    };
    let objective = TransferObjective::new(targets, cfg);
    let stack = extract(backbone, &output, &targets.selection)?;
    let (total, content, style) = objective.parts(&stack)?;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: n_iters,
            context: "final transfer loss".into(),
        });
    }
    Ok(TransferResult {
        output,
        final_total_loss: total,
        final_content_loss: content,
        final_style_loss: style,
        iterations_run: n_iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureEntry;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn entry(layer: &str, data: Array2<f64>) -> FeatureEntry {
        FeatureEntry {
            layer: layer.into(),
            data,
        }
    }

    fn stack(entries: Vec<FeatureEntry>) -> FeatureStack {
        FeatureStack { entries }
    }

    fn single_layer_cfg(mode: NormMode) -> NSTConfig {
        NSTConfig {
            selection: LayerSelection {
                style_layers: vec!["conv1_1".into()],
                content_layers: vec!["conv1_1".into()],
                layer_weights: vec![1.0],
            },
            norm_mode: mode,
            ..NSTConfig::default()
        }
    }

    #[test]
    fn gram_of_ones_is_position_count() {
        let g = gram(&entry("conv1_1", Array2::from_elem((1, 5), 1.0)));
        assert_eq!(g.matrix, array![[5.0]]);
    }

    #[test]
    fn gram_hand_example() {
        let f = array![[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let g = gram(&entry("conv1_1", f));
        assert_eq!(g.matrix, array![[2.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn gram_is_symmetric_psd_for_random_features() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..10 {
            let f = Array2::from_shape_fn((6, 11), |_| rng.random_range(-1.0..1.0));
            let g = gram(&entry("conv1_1", f)).matrix;
            let trace: f64 = (0..6).map(|i| g[[i, i]]).sum();
            for i in 0..6 {
                for j in 0..6 {
                    assert!((g[[i, j]] - g[[j, i]]).abs() <= 1e-12 * trace.abs().max(1.0));
                }
            }
            // PSD certificate via eigenvalues of the symmetric matrix.
            let fm = faer::Mat::from_fn(6, 6, |i, j| g[[i, j]]);
            let eig = fm
                .self_adjoint_eigenvalues(faer::Side::Lower)
                .expect("symmetric eigensolve");
            for ev in eig {
                assert!(ev >= -1e-8 * trace, "eigenvalue {ev} below tolerance");
            }
        }
    }

    #[test]
    fn content_loss_hand_examples() {
        let a = stack(vec![entry("conv1_1", array![[1.0, 2.0]])]);
        let b = stack(vec![entry("conv1_1", array![[1.0, 4.0]])]);
        let l2 = content_loss(&a, &b, &single_layer_cfg(NormMode::L2)).unwrap();
        assert!((l2 - 2.0).abs() < 1e-15); // 0.5 * (2)^2
        let l1 = content_loss(&a, &b, &single_layer_cfg(NormMode::L1)).unwrap();
        assert!((l1 - 1.0).abs() < 1e-15); // 0.5 * |2|
        let zero = content_loss(&a, &a, &single_layer_cfg(NormMode::L2)).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn style_loss_hand_example() {
        // N=1, M=1: F_x = [2] -> G_x = 4; F_s = [1] -> G_s = 1.
        let a = stack(vec![entry("conv1_1", array![[2.0]])]);
        let b = stack(vec![entry("conv1_1", array![[1.0]])]);
        let l2 = style_loss(&a, &b, &single_layer_cfg(NormMode::L2)).unwrap();
        assert!((l2 - 2.25).abs() < 1e-15); // 9/4
        let same = style_loss(&a, &a, &single_layer_cfg(NormMode::L2)).unwrap();
        assert_eq!(same, 0.0);
    }

    #[test]
    fn zero_weight_layer_drops_out() {
        let cfg = NSTConfig {
            selection: LayerSelection {
                style_layers: vec!["conv1_1".into(), "conv1_2".into()],
                content_layers: vec!["conv1_1".into()],
                layer_weights: vec![1.0, 0.0],
            },
            norm_mode: NormMode::L2,
            ..NSTConfig::default()
        };
        let one_layer_cfg = single_layer_cfg(NormMode::L2);
        let a = stack(vec![
            entry("conv1_1", array![[2.0]]),
            entry("conv1_2", array![[7.0]]),
        ]);
        let b = stack(vec![
            entry("conv1_1", array![[1.0]]),
            entry("conv1_2", array![[-3.0]]),
        ]);
        let weighted = style_loss(&a, &b, &cfg).unwrap();
        let first_only = style_loss(&a, &b, &one_layer_cfg).unwrap();
        assert_eq!(weighted, first_only);
    }

    #[test]
    fn style_loss_invariant_under_shared_position_permutation() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let fx = Array2::from_shape_fn((4, 12), |_| rng.random_range(-1.0..1.0));
        let fs = Array2::from_shape_fn((4, 12), |_| rng.random_range(-1.0..1.0));
        let mut perm: Vec<usize> = (0..12).collect();
        // Fisher-Yates with the same seeded stream.
        for i in (1..12).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let apply = |f: &Array2<f64>| {
            let mut out = Array2::zeros(f.dim());
            for (new_col, &old_col) in perm.iter().enumerate() {
                out.column_mut(new_col).assign(&f.column(old_col));
            }
            out
        };
        let cfg = single_layer_cfg(NormMode::L2);
        let base = style_loss(
            &stack(vec![entry("conv1_1", fx.clone())]),
            &stack(vec![entry("conv1_1", fs.clone())]),
            &cfg,
        )
        .unwrap();
        let permuted = style_loss(
            &stack(vec![entry("conv1_1", apply(&fx))]),
            &stack(vec![entry("conv1_1", apply(&fs))]),
            &cfg,
        )
        .unwrap();
        assert!((base - permuted).abs() <= 1e-10 * base.abs().max(1.0));
    }

    #[test]
    fn losses_are_nonnegative_and_zero_only_at_equality() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..8 {
            let fx = Array2::from_shape_fn((3, 7), |_| rng.random_range(-1.0..1.0));
            let mut fy = fx.clone();
            fy[[1, 3]] += 0.5;
            for mode in [NormMode::L1, NormMode::L2] {
                let cfg = single_layer_cfg(mode);
                let sx = stack(vec![entry("conv1_1", fx.clone())]);
                let sy = stack(vec![entry("conv1_1", fy.clone())]);
                assert_eq!(content_loss(&sx, &sx, &cfg).unwrap(), 0.0);
                assert!(content_loss(&sx, &sy, &cfg).unwrap() > 0.0);
                assert_eq!(style_loss(&sx, &sx, &cfg).unwrap(), 0.0);
                assert!(style_loss(&sx, &sy, &cfg).unwrap() > 0.0);
            }
        }
    }

    fn phantom_images() -> (Image, Image, Image) {
        let spec = crate::phantom::PhantomSpec {
            size: 64,
            contrast_gamma: 1.4,
            noise: crate::image::NoiseSpec::new(20.0 / 255.0, 2),
        };
        crate::phantom::make_phantom_pair(&spec).unwrap()
    }

    #[test]
    fn total_loss_is_consistent_with_composition() {
        let backbone = Backbone::synthetic(8, 5);
        let (clean, noisy, guidance) = phantom_images();
        let cfg = NSTConfig::default();
        let (total, content, style) = total_loss(&noisy, &clean, &guidance, &backbone, &cfg).unwrap();
        let x_feats = extract(&backbone, &noisy, &cfg.selection).unwrap();
        let c_feats = extract(&backbone, &clean, &cfg.selection).unwrap();
        let s_feats = extract(&backbone, &guidance, &cfg.selection).unwrap();
        let content2 = content_loss(&x_feats, &c_feats, &cfg).unwrap();
        let style2 = style_loss(&x_feats, &s_feats, &cfg).unwrap();
        let total2 = cfg.alpha * content2 + cfg.beta * style2;
        assert!((content - content2).abs() <= 1e-10 * content2.max(1.0));
        assert!((style - style2).abs() <= 1e-10 * style2.max(1.0));
        assert!((total - total2).abs() <= 1e-10 * total2.max(1e-12));
    }

    #[test]
    fn total_loss_zero_at_identical_inputs() {
        let backbone = Backbone::synthetic(8, 5);
        let (clean, ..) = phantom_images();
        let cfg = NSTConfig::default();
        let (total, content, style) = total_loss(&clean, &clean, &clean, &backbone, &cfg).unwrap();
        assert_eq!((total, content, style), (0.0, 0.0, 0.0));
    }

    #[test]
    fn total_loss_alpha_zero_is_pure_style() {
        let backbone = Backbone::synthetic(8, 5);
        let (clean, noisy, guidance) = phantom_images();
        let cfg = NSTConfig {
            alpha: 0.0,
            ..NSTConfig::default()
        };
        let (total, _, style) = total_loss(&noisy, &clean, &guidance, &backbone, &cfg).unwrap();
        assert_eq!(total, cfg.beta * style);
    }

    #[test]
    fn transfer_zero_iterations_is_identity() {
        let backbone = Backbone::synthetic(8, 5);
        let (clean, noisy, guidance) = phantom_images();
        let result = transfer(&noisy, &guidance, &clean, 0, &backbone, &NSTConfig::default()).unwrap();
        assert!(result.output.bit_eq(&noisy));
        assert_eq!(result.iterations_run, 0);
    }

    #[test]
    fn transfer_at_global_minimum_is_stationary() {
        let backbone = Backbone::synthetic(8, 5);
        let (clean, ..) = phantom_images();
        let result = transfer(&clean, &clean, &clean, 3, &backbone, &NSTConfig::default()).unwrap();
        assert!(result.output.bit_eq(&clean));
        assert_eq!(result.final_total_loss, 0.0);
    }

    #[test]
    fn transfer_reduces_total_loss() {
        let backbone = Backbone::synthetic(8, 5);
        let (clean, noisy, guidance) = phantom_images();
        let cfg = NSTConfig::default();
        let initial = total_loss(&noisy, &clean, &guidance, &backbone, &cfg).unwrap().0;
        let result = transfer(&noisy, &guidance, &clean, 100, &backbone, &cfg).unwrap();
        assert!(
            result.final_total_loss < initial,
            "{} !< {initial}",
            result.final_total_loss
        );
    }

    #[test]
    fn checkpoints_match_separate_runs_bit_for_bit() {
        let backbone = Backbone::synthetic(8, 5);
        let (clean, noisy, guidance) = phantom_images();
        let cfg = NSTConfig::default();
        let targets = TransferTargets::new(&backbone, &clean, &guidance, &cfg).unwrap();
        let counts = [2usize, 4, 5];
        let snaps = transfer_checkpoints(&noisy, &targets, &counts, &backbone, &cfg).unwrap();
        for (&n, snap) in counts.iter().zip(&snaps) {
            let solo = transfer_with_targets(&noisy, &targets, n, &backbone, &cfg).unwrap();
            assert!(solo.output.bit_eq(snap), "checkpoint {n} diverged");
        }
    }

    #[test]
    fn total_loss_scales_with_weights() {
        let backbone = Backbone::synthetic(8, 5);
        let (clean, noisy, guidance) = phantom_images();
        let base = NSTConfig::default();
        let scaled = NSTConfig {
            alpha: base.alpha * 3.0,
            beta: base.beta * 3.0,
            ..base.clone()
        };
        let (t1, ..) = total_loss(&noisy, &clean, &guidance, &backbone, &base).unwrap();
        let (t3, ..) = total_loss(&noisy, &clean, &guidance, &backbone, &scaled).unwrap();
        assert!((t3 - 3.0 * t1).abs() <= 1e-9 * t1.abs().max(1e-12));
    }
}
