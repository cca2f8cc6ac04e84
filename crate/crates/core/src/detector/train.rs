//! Gradient accumulation and SGD for [`Detector`].
//!
//! Supervised gradients flow from the main heads into the backbone. Committee
//! heads only ever receive gradients for their own parameters: their input
//! features are treated as constants, so no committee objective can move a
//! backbone or main-head parameter.

use crate::detector::anchors::InstanceTargets;
use crate::detector::nn::{relu_backward, ConvGrad};
use crate::detector::{BackboneCache, Detector, Features, ParamGroup};
use crate::error::Result;
use crate::losses::{committee_discrepancy_grad, focal_loss_grad, fpil_weight, smooth_l1_grad, LossConfig};

/// One gradient buffer per layer, in [`Detector::convs`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<ConvGrad>,
}

impl Gradients {
    pub fn zeros(det: &Detector) -> Self {
        Self {
            layers: det.convs().into_iter().map(ConvGrad::zeros_like).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        self.layers.iter_mut().for_each(ConvGrad::fill_zero);
    }

    pub fn group_is_zero(&self, det: &Detector, group: ParamGroup) -> bool {
        self.layers
            .iter()
            .zip(det.layer_groups())
            .filter(|(_, g)| *g == group)
            .all(|(l, _)| l.is_zero())
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias))
            .map(|v| (*v as f64) * (*v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales to at most `max_norm` in global L2 norm; returns the norm
    /// before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm {
            let s = (max_norm / n) as f32;
            for l in &mut self.layers {
                l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= s);
            }
        }
        n
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Which supervised terms to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SupervisedTerms {
    pub main: bool,
    pub committee: bool,
}

impl SupervisedTerms {
    pub const BOTH: Self = Self {
        main: true,
        committee: true,
    };
}

/// Per-image values of the supervised terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisedValues {
    pub l_main: f64,
    pub l_com: f64,
}

/// Backbone output kept for an unlabeled image: the level features and the
/// main classifier's background probabilities, both constant while only the
/// committee trains.
#[derive(Debug, Clone)]
pub struct FrozenInstance {
    pub features: Features,
    pub background: Vec<f64>,
}

impl Detector {
    fn layer_index(&self, group: ParamGroup, i: usize) -> usize {
        let nb = self.backbone.len();
        match group {
            ParamGroup::Backbone => i,
            ParamGroup::MainHead => nb + i,
            ParamGroup::Committee => nb + 2 + i,
        }
    }

    /// Adds `scale * d(L_main + L_com)/d(params)` for one labeled image and
    /// returns the unscaled loss values.
    pub fn accumulate_supervised(
        &self,
        image: &[f32],
        targets: &InstanceTargets,
        loss: &LossConfig,
        scale: f64,
        terms: SupervisedTerms,
        grads: &mut Gradients,
    ) -> Result<SupervisedValues> {
        self.check_image(image)?;
        let mut cache = BackboneCache::default();
        let outputs = self.backbone_forward(image, Some(&mut cache));
        let features = self.features_from_outputs(&outputs);
        let k = self.config.num_labels();
        let t = self.num_anchors();

        let main_probs = self.classify(&self.main_cls, &features);
        let loc = self.gather(&self.head_outputs(&self.main_loc, &features), 4);
        let positives = targets.positive_indices();
        let pred_pos: Vec<[f64; 4]> = positives
            .iter()
            .map(|&j| [loc[j * 4], loc[j * 4 + 1], loc[j * 4 + 2], loc[j * 4 + 3]])
            .collect();
        let target_pos: Vec<[f64; 4]> = positives.iter().map(|&j| targets.loc_target[j]).collect();

        let (focal, g_cls) = focal_loss_grad(&main_probs, targets, loss.focal_alpha, loss.focal_gamma, scale);
        let (l1, g_pos) = smooth_l1_grad(&pred_pos, &target_pos, scale);
        let l_main = focal + l1;

        let mut level_grads: Vec<Vec<f32>> = features
            .levels
            .iter()
            .map(|l| vec![0.0; self.main_cls.in_channels * l.h * l.w])
            .collect();

        if terms.main {
            let mut g_loc = vec![0.0; t * 4];
            for (&j, g) in positives.iter().zip(&g_pos) {
                g_loc[j * 4..j * 4 + 4].copy_from_slice(g);
            }
            let cls_idx = self.layer_index(ParamGroup::MainHead, 0);
            let loc_idx = self.layer_index(ParamGroup::MainHead, 1);
            let g_cls_levels = self.scatter(&g_cls, k);
            let g_loc_levels = self.scatter(&g_loc, 4);
            for (level, lf) in features.levels.iter().enumerate() {
                let n = lf.h * lf.w;
                self.main_cls
                    .backward_params(&lf.cols, &g_cls_levels[level], n, &mut grads.layers[cls_idx]);
                self.main_loc
                    .backward_params(&lf.cols, &g_loc_levels[level], n, &mut grads.layers[loc_idx]);
                let mut dcols = vec![0.0f32; lf.cols.len()];
                self.main_cls.backward_cols(&g_cls_levels[level], n, &mut dcols);
                self.main_loc.backward_cols(&g_loc_levels[level], n, &mut dcols);
                self.main_cls.col2im(&dcols, lf.h, lf.w, &mut level_grads[level]);
            }
        }

        let mut l_com = 0.0;
        let n_members = self.committee.len();
        for (i, head) in self.committee.iter().enumerate() {
            let probs = self.classify(head, &features);
            let (v, g) = focal_loss_grad(&probs, targets, loss.focal_alpha, loss.focal_gamma, scale / n_members as f64);
            l_com += v / n_members as f64;
            if terms.committee {
                let idx = self.layer_index(ParamGroup::Committee, i);
                for (level, g_level) in self.scatter(&g, k).iter().enumerate() {
                    let lf = &features.levels[level];
                    head.backward_params(&lf.cols, g_level, lf.h * lf.w, &mut grads.layers[idx]);
                }
            }
        }

        if terms.main {
            self.backbone_backward(&outputs, &cache, level_grads, grads);
        }
        Ok(SupervisedValues { l_main, l_com })
    }

    fn backbone_backward(
        &self,
        outputs: &[(Vec<f32>, usize, usize)],
        cache: &BackboneCache,
        level_grads: Vec<Vec<f32>>,
        grads: &mut Gradients,
    ) {
        let mut dact: Vec<Option<Vec<f32>>> = vec![None; self.backbone.len()];
        for (&block, g) in self.level_blocks.iter().zip(level_grads) {
            match &mut dact[block] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        for b in (0..self.backbone.len()).rev() {
            let Some(mut g) = dact[b].take() else {
                continue;
            };
            let (act, ho, wo) = &outputs[b];
            relu_backward(act, &mut g);
            let conv = &self.backbone[b];
            let n = ho * wo;
            conv.backward_params(&cache.cols[b], &g, n, &mut grads.layers[b]);
            if b > 0 {
                let (h, w) = cache.dims[b];
                let mut dcols = vec![0.0f32; cache.cols[b].len()];
                conv.backward_cols(&g, n, &mut dcols);
                let prev = dact[b - 1].get_or_insert_with(|| vec![0.0; conv.in_channels * h * w]);
                conv.col2im(&dcols, h, w, prev);
            }
        }
    }

    /// Backbone features and background scores of an unlabeled image.
    pub fn freeze(&self, image: &[f32]) -> Result<FrozenInstance> {
        let features = self.features(image)?;
        let main = self.classify(&self.main_cls, &features);
        let k = self.config.num_labels();
        let background = main.chunks_exact(k).map(|r| r[k - 1]).collect();
        Ok(FrozenInstance { features, background })
    }

    /// Adds `scale * d(D_img)/d(committee params)` for one unlabeled image,
    /// FPIL-weighted when `gamma_fpil` is given. Returns the image
    /// discrepancy.
    pub fn accumulate_discrepancy(
        &self,
        frozen: &FrozenInstance,
        gamma_fpil: Option<f64>,
        scale: f64,
        grads: &mut Gradients,
    ) -> Result<f64> {
        let k = self.config.num_labels();
        let committee = self.committee_probs(&frozen.features);
        let weights: Option<Vec<f64>> =
            gamma_fpil.map(|g| frozen.background.iter().map(|&b| fpil_weight(b, g)).collect());
        let (value, member_grads) = committee_discrepancy_grad(&committee, k, weights.as_deref(), scale)?;
        for (i, (head, g)) in self.committee.iter().zip(&member_grads).enumerate() {
            let idx = self.layer_index(ParamGroup::Committee, i);
            for (level, g_level) in self.scatter(g, k).iter().enumerate() {
                let lf = &frozen.features.levels[level];
                head.backward_params(&lf.cols, g_level, lf.h * lf.w, &mut grads.layers[idx]);
            }
        }
        Ok(value)
    }
}

/// SGD with momentum and L2 weight decay, in the
/// usual `v = mu * v + g + wd * w; w -= lr * v` form.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<ConvGrad>,
}

impl Sgd {
    pub fn new(det: &Detector, learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: det.convs().into_iter().map(ConvGrad::zeros_like).collect(),
        }
    }

    /// Updates only the layers whose group is listed in `groups`; all other
    /// parameters and their momentum buffers are left untouched.
    pub fn step(&mut self, det: &mut Detector, grads: &Gradients, groups: &[ParamGroup]) {
        let layer_groups = det.layer_groups();
        let (lr, mu, wd) = (self.learning_rate as f32, self.momentum as f32, self.weight_decay as f32);
        for (((conv, g), v), group) in det
            .convs_mut()
            .into_iter()
            .zip(&grads.layers)
            .zip(&mut self.velocity)
            .zip(layer_groups)
        {
            if !groups.contains(&group) {
                continue;
            }
            for ((w, gw), vw) in conv.weight.iter_mut().zip(&g.weight).zip(&mut v.weight) {
                *vw = mu * *vw + gw + wd * *w;
                *w -= lr * *vw;
            }
            for ((b, gb), vb) in conv.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
                *vb = mu * *vb + gb + wd * *b;
                *b -= lr * *vb;
            }
        }
    }
}
