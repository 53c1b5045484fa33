//! The detection network.
//!
//! A page goes through four stages:
//!
//! 1. a convolutional backbone runs once over the screenshot;
//! 2. every element box is RoI-pooled from the feature map and concatenated
//!    with an encoding of its box geometry (plus optional heuristic
//!    features), giving the visual representation `v_i`;
//! 3. single-head graph attention over the element's context neighbors gives
//!    `c_i = sum_j alpha_ij W2 v_j` with
//!    `alpha_ij = softmax_j(LeakyReLU(a^T [W1 v_i || W2 v_j]))`;
//! 4. an FC head maps `[v_i || c_i]` to four logits (price, title, image, background).
//!
//! Gradients are derived by hand in [`network`]; see the finite-difference
//! tests there.

pub mod backbone;
pub mod checkpoint;
pub mod network;
mod params;
pub mod roi;

pub use backbone::{backbone_features, BackboneTrace, FeatureMap};
pub use network::{ForwardMode, ForwardPass, PageInputs};
pub use params::{
    BackboneParams, BasicBlock, BatchNorm, GatParams, HeadParams, ModelParams, PositionalParams,
    ResNetStem, SmallBackbone,
};
pub use roi::roi_pool;

use std::collections::BTreeMap;

use image::RgbImage;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dom::{WebElement, Webpage};
use crate::features::{heuristic_features, TagVocabulary};
use crate::geom::BBox;
use crate::graph::ContextGraph;

/// Length of the raw box vector `[x, y, w, h, w/h]`.
pub const POS_INPUTS: usize = 5;
pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("attention over an empty neighborhood")]
    EmptyNeighborhood,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Random-init two-layer stack, stride 32.
    #[default]
    Small,
    /// Pretrained residual stem loaded from a weights file, stride 4, frozen.
    ResNetStem,
}

impl std::str::FromStr for BackboneKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "small" => Ok(BackboneKind::Small),
            "resnet_stem" | "resnet18" => Ok(BackboneKind::ResNetStem),
            o => Err(format!("unknown backbone {o:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub roi_output: (usize, usize),
    pub pos_dim: usize,
    pub proj_dim: usize,
    pub backbone_channels: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub num_classes: usize,
    pub use_context: bool,
    pub use_extra_features: bool,
    pub use_positional: bool,
    pub head_hidden: usize,
    pub backbone: BackboneKind,
    pub small_hidden_channels: usize,
    pub freeze_backbone: bool,
    /// Screenshot side in pixels; inputs must be exactly `viewport x viewport`.
    pub viewport: u32,
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
    pub ratio_clamp: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Heuristic feature width; set from the tag vocabulary when `use_extra_features`.
    pub extra_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            roi_output: (3, 3),
            pos_dim: 32,
            proj_dim: 384,
            backbone_channels: 64,
            dropout: 0.2,
            leaky_slope: 0.01,
            num_classes: NUM_CLASSES,
            use_context: true,
            use_extra_features: false,
            use_positional: true,
            head_hidden: 128,
            backbone: BackboneKind::Small,
            small_hidden_channels: 16,
            freeze_backbone: false,
            viewport: crate::geom::VIEWPORT_SIDE,
            pixel_mean: [0.485, 0.456, 0.406],
            pixel_std: [0.229, 0.224, 0.225],
            ratio_clamp: 20.0,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            extra_dim: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.roi_output.0 == 0 || self.roi_output.1 == 0 {
            return bad("roi_output must be positive");
        }
        if self.pos_dim == 0
            || self.proj_dim == 0
            || self.backbone_channels == 0
            || self.head_hidden == 0
        {
            return bad("dimensions must be positive");
        }
        if self.small_hidden_channels == 0 {
            return bad("small_hidden_channels must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.num_classes != NUM_CLASSES {
            return bad("num_classes must be 4");
        }
        if self.use_extra_features != (self.extra_dim > 0) {
            return bad("extra_dim must be positive exactly when use_extra_features is set");
        }
        let stride = self.backbone_stride();
        if self.viewport == 0 || !(self.viewport as usize).is_multiple_of(stride) {
            return Err(ModelError::Config(format!(
                "viewport must be a positive multiple of {stride}"
            )));
        }
        if self.backbone == BackboneKind::ResNetStem && !self.freeze_backbone {
            return bad("the residual stem backbone is inference-only; set freeze_backbone");
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("invalid batch-norm settings");
        }
        Ok(())
    }

    /// Cumulative stride of the backbone.
    pub fn backbone_stride(&self) -> usize {
        match self.backbone {
            BackboneKind::Small => 32,
            BackboneKind::ResNetStem => 4,
        }
    }

    pub fn roi_dim(&self) -> usize {
        self.backbone_channels * self.roi_output.0 * self.roi_output.1
    }

    pub fn pos_width(&self) -> usize {
        if self.use_positional {
            self.pos_dim
        } else {
            0
        }
    }

    /// Width of `v_i`.
    pub fn visual_dim(&self) -> usize {
        self.roi_dim() + self.pos_width() + self.extra_dim
    }

    /// Width of `[v_i || c_i]`.
    pub fn head_input_dim(&self) -> usize {
        self.visual_dim() + self.proj_dim
    }
}

/// Normalized positional input: box divided by the viewport side, `w/h` clamped.
pub fn positional_inputs(b: &BBox, viewport: f64, ratio_clamp: f64) -> [f64; POS_INPUTS] {
    let ratio = if b.h > 0.0 { b.w / b.h } else { ratio_clamp };
    [
        b.x / viewport,
        b.y / viewport,
        b.w / viewport,
        b.h / viewport,
        ratio.clamp(0.0, ratio_clamp),
    ]
}

/// Heuristic features rescaled for the network: box like the positional
/// input, font size over 32 px, `ln(1 + words)`.
pub fn extra_inputs(e: &WebElement, vocab: &TagVocabulary, config: &ModelConfig) -> Vec<f64> {
    let f = heuristic_features(e, vocab);
    let mut v: Vec<f64> = f.tag_onehot.iter().map(|&b| b as f64).collect();
    v.extend([f.has_currency, f.has_text, f.has_number].map(f64::from));
    v.push(f.font_size / 32.0);
    v.push((1.0 + f.num_words as f64).ln());
    v.extend(positional_inputs(
        &e.bbox,
        config.viewport as f64,
        config.ratio_clamp,
    ));
    v
}

pub(crate) fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

pub(crate) fn bn_eval(x: f64, bn: &BatchNorm, i: usize, eps: f64) -> f64 {
    (x - bn.running_mean[i]) / (bn.running_var[i] + eps).sqrt() * bn.gamma[i] + bn.beta[i]
}

/// Positional features of one box at inference: affine, batch norm (running
/// statistics), ReLU.
pub fn positional_encode(bbox: &BBox, pos: &PositionalParams, config: &ModelConfig) -> Array1<f64> {
    let x =
        Array1::from(positional_inputs(bbox, config.viewport as f64, config.ratio_clamp).to_vec());
    let z = pos.weight.dot(&x) + &pos.bias;
    Array1::from_shape_fn(z.len(), |i| {
        bn_eval(z[i], &pos.bn, i, config.bn_eps).max(0.0)
    })
}

/// Attention weights of element `v_i` over `neighbors` (one row per neighbor).
pub fn attention_scores(
    v_i: ArrayView1<'_, f64>,
    neighbors: ArrayView2<'_, f64>,
    gat: &GatParams,
    leaky_slope: f64,
) -> Result<Vec<f64>, ModelError> {
    if neighbors.nrows() == 0 {
        return Err(ModelError::EmptyNeighborhood);
    }
    if v_i.len() != gat.w1.ncols() || neighbors.ncols() != gat.w2.ncols() {
        return Err(ModelError::Shape(format!(
            "visual dim {} / {} does not match projections ({})",
            v_i.len(),
            neighbors.ncols(),
            gat.w1.ncols()
        )));
    }
    let q = gat.a_query().dot(&gat.w1.dot(&v_i));
    let keys = neighbors.dot(&gat.w2.t()).dot(&gat.a_key());
    let logits: Vec<f64> = keys.iter().map(|&t| leaky(q + t, leaky_slope)).collect();
    Ok(softmax(&logits))
}

/// Max-subtracted softmax.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Contextual representation `c_i` with its attention map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextRepr {
    pub vec: Vec<f64>,
    /// neighbor element id → attention weight.
    pub attn: BTreeMap<u32, f64>,
}

/// `c_i = sum_j alpha_ij W2 v_j`; the zero vector when there are no neighbors.
pub fn context_repr(
    neighbor_ids: &[u32],
    neighbors: ArrayView2<'_, f64>,
    alpha: &[f64],
    gat: &GatParams,
) -> Result<ContextRepr, ModelError> {
    if alpha.len() != neighbors.nrows() || neighbor_ids.len() != alpha.len() {
        return Err(ModelError::Shape(
            "alpha, neighbor ids and neighbor rows differ in length".into(),
        ));
    }
    let mut c = Array1::<f64>::zeros(gat.proj_dim());
    // Projecting row by row keeps a one-hot alpha bit-identical to `W2 v_j`.
    for (row, &a) in neighbors.axis_iter(Axis(0)).zip(alpha) {
        c.scaled_add(a, &gat.w2.dot(&row));
    }
    Ok(ContextRepr {
        vec: c.to_vec(),
        attn: neighbor_ids
            .iter()
            .copied()
            .zip(alpha.iter().copied())
            .collect(),
    })
}

/// Inference-mode logits `(price, title, image, background)` for one element.
pub fn classify(
    v_i: ArrayView1<'_, f64>,
    c_i: &ContextRepr,
    head: &HeadParams,
    config: &ModelConfig,
) -> Result<[f64; NUM_CLASSES], ModelError> {
    if v_i.len() != config.visual_dim() {
        return Err(ModelError::Shape(format!(
            "v_i has {} entries, expected {}",
            v_i.len(),
            config.visual_dim()
        )));
    }
    if c_i.vec.len() != config.proj_dim {
        return Err(ModelError::Shape(format!(
            "c_i has {} entries, expected {}",
            c_i.vec.len(),
            config.proj_dim
        )));
    }
    let mut z = v_i.to_vec();
    if config.use_context {
        z.extend_from_slice(&c_i.vec);
    } else {
        z.extend(std::iter::repeat_n(0.0, config.proj_dim));
    }
    let z = Array1::from(z);
    let pre = head.hidden_w.dot(&z) + &head.hidden_b;
    let h = Array1::from_shape_fn(pre.len(), |i| {
        bn_eval(pre[i], &head.bn, i, config.bn_eps).max(0.0)
    });
    let out = head.out_w.dot(&h) + &head.out_b;
    Ok([out[0], out[1], out[2], out[3]])
}

/// A configured network with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub vocab: Option<TagVocabulary>,
}

/// Logits and attention for every element of a page, in preorder.
#[derive(Clone, Debug)]
pub struct PageOutput {
    pub logits: Array2<f64>,
    pub contexts: Vec<ContextRepr>,
    /// Element ids by row.
    pub element_ids: Vec<u32>,
}

impl Model {
    /// Random initialization from `seed`. `vocab` is required iff the config
    /// enables heuristic features; `extra_dim` is derived from it.
    pub fn new(
        mut config: ModelConfig,
        vocab: Option<TagVocabulary>,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.extra_dim = match (&vocab, config.use_extra_features) {
            (Some(v), true) => v.feature_dim(),
            (None, true) => {
                return Err(ModelError::Config(
                    "heuristic features need a tag vocabulary".into(),
                ))
            }
            (_, false) => 0,
        };
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&config, &mut rng);
        let vocab = if config.use_extra_features {
            vocab
        } else {
            None
        };
        Ok(Model {
            config,
            params,
            vocab,
        })
    }

    /// Runs the backbone on `screenshot` and pools every element of `page`.
    pub fn page_inputs(
        &self,
        page: &Webpage,
        screenshot: &RgbImage,
    ) -> Result<PageInputs, ModelError> {
        let (fmap, _) = backbone_features(screenshot, &self.params.backbone, &self.config, false)?;
        Ok(self.inputs_from_fmap(page, &fmap).0)
    }

    /// Pools from an existing feature map; also returns the pooling argmaxes.
    pub fn inputs_from_fmap(
        &self,
        page: &Webpage,
        fmap: &FeatureMap,
    ) -> (PageInputs, Vec<Vec<usize>>) {
        let cfg = &self.config;
        let n = page.elements.len();
        let mut roi = Array2::zeros((n, cfg.roi_dim()));
        let mut argmax = Vec::with_capacity(n);
        for (i, e) in ordered(page).into_iter().enumerate() {
            let (pooled, am) = roi::roi_pool_with_argmax(fmap, &e.bbox, cfg.roi_output);
            roi.row_mut(i)
                .assign(&ndarray::Array1::from_iter(pooled.iter().copied()));
            argmax.push(am);
        }
        (self.geometry_inputs(page, roi), argmax)
    }

    /// Assembles [`PageInputs`] from already pooled RoI rows (preorder).
    pub fn geometry_inputs(&self, page: &Webpage, roi: Array2<f64>) -> PageInputs {
        let cfg = &self.config;
        let els = ordered(page);
        let boxes = Array2::from_shape_fn((els.len(), POS_INPUTS), |(i, k)| {
            positional_inputs(&els[i].bbox, cfg.viewport as f64, cfg.ratio_clamp)[k]
        });
        let extra = self
            .vocab
            .as_ref()
            .filter(|_| cfg.use_extra_features)
            .map(|v| {
                let rows: Vec<Vec<f64>> = els.iter().map(|e| extra_inputs(e, v, cfg)).collect();
                Array2::from_shape_fn((rows.len(), cfg.extra_dim), |(i, k)| rows[i][k])
            });
        PageInputs { roi, boxes, extra }
    }

    /// Inference over a whole page. Row `i` of the logits is the element with preorder index `i`.
    pub fn forward_page(
        &self,
        page: &Webpage,
        graph: &ContextGraph,
        screenshot: &RgbImage,
    ) -> Result<PageOutput, ModelError> {
        let inputs = self.page_inputs(page, screenshot)?;
        self.forward_inputs(page, graph, &inputs)
    }

    /// Inference from precomputed inputs.
    pub fn forward_inputs(
        &self,
        page: &Webpage,
        graph: &ContextGraph,
        inputs: &PageInputs,
    ) -> Result<PageOutput, ModelError> {
        if graph.len() != page.len() {
            return Err(ModelError::Shape(format!(
                "graph covers {} elements, page has {}",
                graph.len(),
                page.len()
            )));
        }
        let pass = network::forward(
            &self.params,
            &self.config,
            inputs,
            graph.index_lists(),
            ForwardMode::Eval,
        )?;
        let ids: Vec<u32> = ordered(page).iter().map(|e| e.element_id).collect();
        let contexts = pass.contexts(&ids);
        Ok(PageOutput {
            logits: pass.logits,
            contexts,
            element_ids: ids,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        checkpoint::save(self, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        checkpoint::load(path)
    }
}

/// Page elements sorted by preorder index.
pub fn ordered(page: &Webpage) -> Vec<&WebElement> {
    let mut v: Vec<&WebElement> = page.elements.iter().collect();
    v.sort_by_key(|e| e.preorder_index);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn gat_1d(w1: f64, w2: f64, a: [f64; 2]) -> GatParams {
        GatParams {
            w1: array![[w1]],
            w2: array![[w2]],
            a: array![a[0], a[1]],
        }
    }

    #[test]
    fn identical_neighbors_uniform() {
        let gat = GatParams {
            w1: Array2::from_shape_fn((3, 4), |(i, j)| (i + j) as f64 * 0.1),
            w2: Array2::from_shape_fn((3, 4), |(i, j)| (i * j) as f64 * 0.2 - 0.3),
            a: array![0.5, -0.2, 0.1, 0.3, 0.7, -0.4],
        };
        let v = array![1.0, 2.0, -1.0, 0.5];
        let nb = Array2::from_shape_fn((5, 4), |(_, j)| j as f64 - 1.5);
        let a = attention_scores(v.view(), nb.view(), &gat, 0.01).unwrap();
        for x in a {
            assert!((x - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn single_neighbor_gets_full_weight() {
        let gat = gat_1d(1.0, 2.0, [0.3, 0.9]);
        let a = attention_scores(array![1.0].view(), array![[4.0]].view(), &gat, 0.01).unwrap();
        assert_eq!(a, vec![1.0]);
    }

    #[test]
    fn hand_logits_zero_and_ln3() {
        // q = a1 * w1 * v_i = 0, key_j = a2 * w2 * v_j = (0, ln 3).
        let gat = gat_1d(1.0, 1.0, [0.0, 1.0]);
        let nb = array![[0.0], [3f64.ln()]];
        let a = attention_scores(array![5.0].view(), nb.view(), &gat, 0.01).unwrap();
        assert!(
            (a[0] - 0.25).abs() < 1e-12 && (a[1] - 0.75).abs() < 1e-12,
            "{a:?}"
        );
    }

    #[test]
    fn empty_neighborhood_signalled() {
        let gat = gat_1d(1.0, 1.0, [1.0, 1.0]);
        let nb = Array2::<f64>::zeros((0, 1));
        assert!(matches!(
            attention_scores(array![1.0].view(), nb.view(), &gat, 0.01),
            Err(ModelError::EmptyNeighborhood)
        ));
        let c = context_repr(&[], nb.view(), &[], &gat).unwrap();
        assert_eq!(c.vec, vec![0.0]);
    }

    #[test]
    fn context_weighted_sum() {
        let gat = gat_1d(1.0, 1.0, [0.0, 1.0]);
        let c = context_repr(&[7, 9], array![[0.0], [4.0]].view(), &[0.25, 0.75], &gat).unwrap();
        assert_eq!(c.vec, vec![3.0]);
        assert_eq!(c.attn[&9], 0.75);
    }

    #[test]
    fn one_hot_alpha_reproduces_projection() {
        let gat = GatParams {
            w1: Array2::zeros((2, 3)),
            w2: array![[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]],
            a: Array1::zeros(4),
        };
        let nb = array![[1.0, 2.0, 3.0], [-1.0, 0.5, 4.0]];
        let c = context_repr(&[1, 2], nb.view(), &[0.0, 1.0], &gat).unwrap();
        let expected = gat.w2.dot(&nb.row(1));
        assert_eq!(c.vec, expected.to_vec());
    }

    #[test]
    fn positional_zero_weights() {
        let cfg = ModelConfig::default();
        let pos = PositionalParams {
            weight: Array2::zeros((cfg.pos_dim, 5)),
            bias: Array1::zeros(cfg.pos_dim),
            bn: BatchNorm::new(cfg.pos_dim),
        };
        for b in [BBox::new(0., 0., 10., 10.), BBox::new(100., 200., 50., 25.)] {
            assert!(positional_encode(&b, &pos, &cfg).iter().all(|&x| x == 0.0));
        }
        assert_eq!(cfg.pos_dim, 32);
        assert_eq!(cfg.roi_output, (3, 3));
    }

    #[test]
    fn positional_normalization() {
        let x = positional_inputs(&BBox::new(640., 320., 128., 2.), 1280.0, 20.0);
        assert_eq!(x, [0.5, 0.25, 0.1, 2.0 / 1280.0, 20.0]);
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let cfg = ModelConfig {
            proj_dim: 2,
            backbone_channels: 1,
            roi_output: (1, 1),
            pos_dim: 2,
            ..Default::default()
        };
        let head = HeadParams {
            hidden_w: Array2::zeros((cfg.head_hidden, cfg.head_input_dim())),
            hidden_b: Array1::zeros(cfg.head_hidden),
            bn: BatchNorm::new(cfg.head_hidden),
            out_w: Array2::zeros((4, cfg.head_hidden)),
            out_b: Array1::zeros(4),
        };
        let v = Array1::ones(cfg.visual_dim());
        let c = ContextRepr {
            vec: vec![1.0, 2.0],
            attn: BTreeMap::new(),
        };
        let logits = classify(v.view(), &c, &head, &cfg).unwrap();
        for p in softmax(&logits) {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let short = Array1::ones(cfg.visual_dim() - 1);
        assert!(matches!(
            classify(short.view(), &c, &head, &cfg),
            Err(ModelError::Shape(_))
        ));
    }

    #[test]
    fn extra_dim_follows_vocabulary() {
        let vocab = TagVocabulary {
            tags: vec!["IMG".into(), "SPAN".into()],
        };
        let cfg = ModelConfig {
            use_extra_features: true,
            ..Default::default()
        };
        let m = Model::new(cfg, Some(vocab.clone()), 1).unwrap();
        let base = ModelConfig::default().visual_dim();
        assert_eq!(m.config.visual_dim(), base + vocab.feature_dim());
        assert!(Model::new(
            ModelConfig {
                use_extra_features: true,
                ..Default::default()
            },
            None,
            1
        )
        .is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig {
            dropout: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            viewport: 1000,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            backbone: BackboneKind::ResNetStem,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
