//! Training loop: background subsampling, masked cross-entropy, Adam with L2
//! weight decay, early stopping on the validation mean accuracy.
//!
//! Determinism: every random draw comes from a ChaCha stream keyed by
//! `(seed, epoch, page)`. Per-page gradients in a batch run in parallel and
//! are summed in batch order, and batch-norm running statistics are folded
//! in page order, so results do not depend on thread scheduling.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array2, Array3, ArrayView2};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dom::{Label, Webpage};
use crate::eval::{cross_domain_accuracy, predict_page, ClassAccuracy, Prediction, Truth};
use crate::features::{TagVocabulary, DEFAULT_VOCAB_SIZE};
use crate::graph::{build_graph_with, ContextGraph, GraphMetric, DEFAULT_K};
use crate::model::backbone::{backbone_features, small_backward};
use crate::model::network::{self, apply_bn_stats, ForwardMode, PageInputs};
use crate::model::roi::roi_backward;
use crate::model::{
    BackboneKind, BackboneParams, Model, ModelConfig, ModelError, ModelParams, NUM_CLASSES,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence {
        epoch: usize,
        reports: Vec<EpochReport>,
    },
    #[error("domain {0:?} appears in both training and validation pages")]
    DomainOverlap(String),
    #[error("page {0:?} is not fully labeled")]
    Unlabeled(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("screenshot {path}: {source}")]
    Image {
        path: String,
        source: image::ImageError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Flat training configuration; also the `train` config file schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_pages: usize,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub bg_sampling: bool,
    pub bg_sample_frac: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub k: usize,
    pub graph_metric: GraphMetric,
    pub use_context: bool,
    pub use_positional: bool,
    pub use_extra_features: bool,
    pub vocab_size: usize,
    pub freeze_backbone: bool,
    pub backbone: BackboneKind,
    /// Residual-stem weights (torchvision names); required for that backbone.
    pub backbone_weights: Option<String>,
    pub dropout: f64,
    pub proj_dim: usize,
    pub pos_dim: usize,
    pub head_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            lr: 5e-4,
            batch_pages: 5,
            weight_decay: 1e-3,
            max_epochs: 50,
            bg_sampling: true,
            bg_sample_frac: 0.9,
            early_stop_patience: 5,
            seed: 0,
            k: DEFAULT_K,
            graph_metric: GraphMetric::Preorder,
            use_context: true,
            use_positional: true,
            use_extra_features: false,
            vocab_size: DEFAULT_VOCAB_SIZE,
            freeze_backbone: false,
            backbone: BackboneKind::Small,
            backbone_weights: None,
            dropout: m.dropout,
            proj_dim: m.proj_dim,
            pos_dim: m.pos_dim,
            head_hidden: m.head_hidden,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(0.0..=1.0).contains(&self.bg_sample_frac) {
            return bad("bg_sample_frac must lie in [0, 1]");
        }
        if self.batch_pages == 0 {
            return bad("batch_pages must be at least 1");
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay non-negative");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.backbone == BackboneKind::ResNetStem && self.backbone_weights.is_none() {
            return bad("the residual stem backbone needs backbone_weights");
        }
        self.model_config(None).validate()?;
        Ok(())
    }

    /// Model configuration implied by these settings (`extra_dim` from `vocab`).
    pub fn model_config(&self, vocab: Option<&TagVocabulary>) -> ModelConfig {
        let freeze = self.freeze_backbone || self.backbone == BackboneKind::ResNetStem;
        ModelConfig {
            use_context: self.use_context,
            use_positional: self.use_positional,
            use_extra_features: self.use_extra_features,
            extra_dim: if self.use_extra_features {
                vocab.map_or(1, |v| v.feature_dim())
            } else {
                0
            },
            backbone: self.backbone,
            freeze_backbone: freeze,
            dropout: self.dropout,
            proj_dim: self.proj_dim,
            pos_dim: self.pos_dim,
            head_hidden: self.head_hidden,
            ..ModelConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))
    }
}

/// Per-epoch training record, one JSON line each in the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: ClassAccuracy,
    pub val_mean: f64,
    pub wall_time: f64,
}

/// Trained model with its history.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub reports: Vec<EpochReport>,
    /// Epoch whose parameters were restored.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Independent stream per `(seed, epoch, page, purpose)`.
fn stream(seed: u64, epoch: u64, page: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt << 48 ^ epoch << 24 ^ page);
    rng
}

/// All non-background ids plus `floor(frac * B)` background ids drawn
/// uniformly without replacement.
pub fn sample_background(page: &Webpage, frac: f64, rng: &mut ChaCha8Rng) -> BTreeSet<u32> {
    let (bg, fg): (Vec<_>, Vec<_>) = page
        .elements
        .iter()
        .partition(|e| e.label == Label::Background);
    // The epsilon absorbs representation error such as 0.29 * 100 = 28.999...
    let take = ((frac.clamp(0.0, 1.0) * bg.len() as f64) + 1e-9).floor() as usize;
    let ids: Vec<u32> = bg.iter().map(|e| e.element_id).collect();
    let mut kept: BTreeSet<u32> = fg.iter().map(|e| e.element_id).collect();
    kept.extend(ids.choose_multiple(rng, take.min(ids.len())).copied());
    kept
}

/// Rows (preorder) of the page whose element id is in `ids`.
pub fn mask_rows(page: &Webpage, ids: &BTreeSet<u32>) -> Vec<bool> {
    crate::model::ordered(page)
        .iter()
        .map(|e| ids.contains(&e.element_id))
        .collect()
}

/// Summed cross-entropy over masked rows, and its gradient w.r.t. the logits.
pub fn cross_entropy_sum(
    logits: ArrayView2<'_, f64>,
    labels: &[Label],
    mask: &[bool],
) -> Result<(f64, Array2<f64>, usize), TrainError> {
    let n = logits.nrows();
    if logits.ncols() != NUM_CLASSES || labels.len() != n || mask.len() != n {
        return Err(TrainError::Shape(format!(
            "logits {:?}, {} labels, {} mask entries",
            logits.dim(),
            labels.len(),
            mask.len()
        )));
    }
    let mut total = 0.0;
    let mut grad = Array2::zeros(logits.dim());
    let mut count = 0;
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
        let y = labels[i].index();
        total += lse - row[y];
        for c in 0..NUM_CLASSES {
            grad[[i, c]] = (row[c] - lse).exp() - if c == y { 1.0 } else { 0.0 };
        }
        count += 1;
    }
    Ok((total, grad, count))
}

/// Mean cross-entropy over masked rows.
pub fn loss(
    logits: ArrayView2<'_, f64>,
    labels: &[Label],
    mask: &[bool],
) -> Result<f64, TrainError> {
    let (sum, _, count) = cross_entropy_sum(logits, labels, mask)?;
    if count == 0 {
        return Err(TrainError::Shape("loss over an empty mask".into()));
    }
    Ok(sum / count as f64)
}

/// Labels in preorder.
pub fn page_labels(page: &Webpage) -> Vec<Label> {
    crate::model::ordered(page)
        .iter()
        .map(|e| e.label)
        .collect()
}

/// Ground truth of fully labeled pages.
pub fn truth_of<'a>(pages: impl IntoIterator<Item = &'a Webpage>) -> Truth {
    pages
        .into_iter()
        .filter_map(|p| {
            let id = |l| p.labeled(l);
            Some((
                p.page_id.clone(),
                [id(Label::Price)?, id(Label::Title)?, id(Label::Image)?],
            ))
        })
        .collect()
}

/// RoI features of every page under one frozen backbone, keyed by page id.
#[derive(Clone, Debug, Default)]
pub struct RoiCache {
    fingerprint: String,
    rows: HashMap<String, Arc<Array2<f64>>>,
}

fn backbone_fingerprint(params: &ModelParams) -> String {
    let mut h = Sha256::new();
    for (name, t, _) in params.tensors() {
        if name.starts_with("backbone.") {
            h.update(name.as_bytes());
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

pub(crate) fn load_screenshot(page: &Webpage) -> Result<image::RgbImage, TrainError> {
    let path = page.screenshot_ref.as_ref().ok_or_else(|| {
        TrainError::EmptyDataset(format!("page {} has no screenshot", page.page_id))
    })?;
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|source| TrainError::Image {
            path: path.display().to_string(),
            source,
        })
}

impl RoiCache {
    /// Runs `model`'s backbone over every page (in parallel) and pools each element.
    pub fn build(model: &Model, pages: &[&Webpage]) -> Result<Self, TrainError> {
        let rows: Vec<(String, Arc<Array2<f64>>)> = pages
            .par_iter()
            .map(|p| {
                let img = load_screenshot(p)?;
                let (fmap, _) =
                    backbone_features(&img, &model.params.backbone, &model.config, false)?;
                let inputs = model.inputs_from_fmap(p, &fmap).0;
                Ok((p.page_id.clone(), Arc::new(inputs.roi)))
            })
            .collect::<Result<_, TrainError>>()?;
        Ok(RoiCache {
            fingerprint: backbone_fingerprint(&model.params),
            rows: rows.into_iter().collect(),
        })
    }

    pub fn get(&self, page_id: &str) -> Option<&Arc<Array2<f64>>> {
        self.rows.get(page_id)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Whether the cache was computed with exactly this backbone.
    pub fn matches(&self, params: &ModelParams) -> bool {
        self.fingerprint == backbone_fingerprint(params)
    }
}

/// A page prepared for training: graph and (when frozen) cached inputs.
struct Prepared<'a> {
    page: &'a Webpage,
    graph: ContextGraph,
    labels: Vec<Label>,
    inputs: Option<PageInputs>,
}

struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(p: &ModelParams) -> Self {
        Adam {
            m: p.zeros_like(),
            v: p.zeros_like(),
            t: 0,
        }
    }

    /// One step with L2 decay folded into the gradient.
    fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &ModelParams,
        lr: f64,
        wd: f64,
        freeze_backbone: bool,
    ) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let ps = params.tensors_mut();
        let gs = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((name, mut p, trainable), (_, g, _)), ((_, mut m, _), (_, mut v, _))) in
            ps.into_iter().zip(gs).zip(ms.into_iter().zip(vs))
        {
            if !trainable || (freeze_backbone && name.starts_with("backbone.")) {
                continue;
            }
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    let g = g + wd * *p;
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                });
        }
    }
}

fn check_pages(train: &[Webpage], val: &[Webpage]) -> Result<(), TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("no training pages".into()));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyDataset("no validation pages".into()));
    }
    for p in train.iter().chain(val) {
        if p.elements.is_empty() {
            return Err(TrainError::EmptyDataset(format!(
                "page {} has no elements",
                p.page_id
            )));
        }
        if !p.fully_labeled {
            return Err(TrainError::Unlabeled(p.page_id.clone()));
        }
    }
    let train_domains: BTreeSet<&str> = train.iter().map(|p| p.domain.as_str()).collect();
    if let Some(p) = val
        .iter()
        .find(|p| train_domains.contains(p.domain.as_str()))
    {
        return Err(TrainError::DomainOverlap(p.domain.clone()));
    }
    Ok(())
}

/// Builds the initial model for `cfg` (vocabulary from `train` when needed).
pub fn init_model(train: &[Webpage], cfg: &TrainConfig) -> Result<Model, TrainError> {
    let vocab = cfg
        .use_extra_features
        .then(|| TagVocabulary::from_pages(train, cfg.vocab_size));
    let mut model = Model::new(cfg.model_config(vocab.as_ref()), vocab, cfg.seed)?;
    if let (BackboneKind::ResNetStem, Some(path)) = (cfg.backbone, &cfg.backbone_weights) {
        model.params.backbone = crate::model::checkpoint::load_resnet_stem(Path::new(path))?;
    }
    Ok(model)
}

/// Predictions for `pages` with inference-mode parameters.
pub fn predict_pages(
    model: &Model,
    pages: &[Webpage],
    k: usize,
    metric: GraphMetric,
    cache: Option<&RoiCache>,
) -> Result<Vec<Prediction>, TrainError> {
    let usable = cache.filter(|c| c.matches(&model.params));
    pages
        .par_iter()
        .map(|p| {
            let graph = build_graph_with(&p.page_id, &p.elements, k, metric);
            let inputs = match usable.and_then(|c| c.get(&p.page_id)) {
                Some(roi) => model.geometry_inputs(p, (**roi).clone()),
                None => model.page_inputs(p, &load_screenshot(p)?)?,
            };
            let out = model.forward_inputs(p, &graph, &inputs)?;
            Ok(predict_page(
                &p.page_id,
                &out.element_ids,
                out.logits.view(),
            ))
        })
        .collect()
}

/// Trains on `train`, early-stopping on `val`. With a frozen backbone the
/// RoI features come from `cache` (built here when absent or stale).
pub fn train(
    train: &[Webpage],
    val: &[Webpage],
    cfg: &TrainConfig,
    cache: Option<&RoiCache>,
) -> Result<TrainOutcome, TrainError> {
    train_with_log(train, val, cfg, cache, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with_log(
    train: &[Webpage],
    val: &[Webpage],
    cfg: &TrainConfig,
    cache: Option<&RoiCache>,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_pages(train, val)?;
    let mut model = init_model(train, cfg)?;
    let frozen = model.config.freeze_backbone;

    let built;
    let cache = if frozen {
        match cache.filter(|c| c.matches(&model.params)) {
            Some(c) => Some(c),
            None => {
                let all: Vec<&Webpage> = train.iter().chain(val).collect();
                built = RoiCache::build(&model, &all)?;
                Some(&built)
            }
        }
    } else {
        None
    };

    let prepared: Vec<Prepared<'_>> = train
        .iter()
        .map(|p| {
            let inputs = match cache {
                Some(c) => {
                    let roi = c.get(&p.page_id).ok_or_else(|| {
                        TrainError::EmptyDataset(format!(
                            "no cached features for page {}",
                            p.page_id
                        ))
                    })?;
                    Some(model.geometry_inputs(p, (**roi).clone()))
                }
                None => None,
            };
            Ok(Prepared {
                page: p,
                graph: build_graph_with(&p.page_id, &p.elements, cfg.k, cfg.graph_metric),
                labels: page_labels(p),
                inputs,
            })
        })
        .collect::<Result<_, TrainError>>()?;
    let val_truth = truth_of(val);

    let mut adam = Adam::new(&model.params);
    let mut reports = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut stream(cfg.seed, epoch as u64, 0, 1));
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for batch in order.chunks(cfg.batch_pages) {
            let masks: Vec<Vec<bool>> = batch
                .iter()
                .map(|&pi| {
                    let p = prepared[pi].page;
                    if cfg.bg_sampling {
                        let mut rng = stream(cfg.seed, epoch as u64, pi as u64, 2);
                        mask_rows(p, &sample_background(p, cfg.bg_sample_frac, &mut rng))
                    } else {
                        vec![true; p.len()]
                    }
                })
                .collect();
            let total: usize = masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();
            if total == 0 {
                continue;
            }
            let scale = 1.0 / total as f64;
            let results: Vec<(f64, ModelParams, network::BnStats)> = batch
                .par_iter()
                .zip(&masks)
                .map(|(&pi, mask)| {
                    let dropout_seed = stream(cfg.seed, epoch as u64, pi as u64, 3).next_u64();
                    page_gradient(&model, &prepared[pi], mask, scale, frozen, dropout_seed)
                })
                .collect::<Result<_, TrainError>>()?;
            let mut grads = model.params.zeros_like();
            for (l, g, _) in &results {
                loss_sum += l;
                grads.add_assign(g);
            }
            loss_count += total;
            adam.step(&mut model.params, &grads, cfg.lr, cfg.weight_decay, frozen);
            for (_, _, st) in &results {
                apply_bn_stats(&mut model.params, st, model.config.bn_momentum);
            }
        }
        let train_loss = loss_sum / loss_count.max(1) as f64;
        if !train_loss.is_finite() {
            return Err(TrainError::Divergence { epoch, reports });
        }
        let preds = predict_pages(&model, val, cfg.k, cfg.graph_metric, cache)?;
        let acc = cross_domain_accuracy(&preds, &val_truth)
            .map_err(|e| TrainError::Shape(e.to_string()))?;
        let report = EpochReport {
            epoch,
            train_loss,
            val_mean: acc.mean(),
            val: acc,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {train_loss:.4}, val price {:.3} title {:.3} image {:.3}",
            acc.price,
            acc.title,
            acc.image
        );
        on_epoch(&report);
        let improved = best.as_ref().is_none_or(|b| report.val_mean > b.0);
        reports.push(report);
        if improved {
            best = Some((acc.mean(), epoch, model.params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(TrainOutcome {
        model,
        reports,
        best_epoch,
        stopped_early,
    })
}

/// Summed loss, gradients (already scaled by `scale`) and BN statistics of one page.
fn page_gradient(
    model: &Model,
    prep: &Prepared<'_>,
    mask: &[bool],
    scale: f64,
    frozen: bool,
    dropout_seed: u64,
) -> Result<(f64, ModelParams, network::BnStats), TrainError> {
    let mode = ForwardMode::Train {
        dropout_seed: Some(dropout_seed),
    };
    let lists = prep.graph.index_lists();
    let (pass, trace) = match &prep.inputs {
        Some(inputs) => (
            network::forward(&model.params, &model.config, inputs, lists, mode)?,
            None,
        ),
        None => {
            let img = load_screenshot(prep.page)?;
            let (fmap, trace) =
                backbone_features(&img, &model.params.backbone, &model.config, !frozen)?;
            let (inputs, argmax) = model.inputs_from_fmap(prep.page, &fmap);
            let pass = network::forward(&model.params, &model.config, &inputs, lists, mode)?;
            (pass, trace.map(|t| (t, argmax, fmap.data.dim())))
        }
    };
    let (sum, mut dlogits, _) = cross_entropy_sum(pass.logits.view(), &prep.labels, mask)?;
    dlogits *= scale;
    let (mut grads, d_roi) = pass.backward(&model.params, &model.config, &dlogits);
    if let (Some((trace, argmax, dim)), BackboneParams::Small(bp)) = (trace, &model.params.backbone)
    {
        let mut d_fmap = Array3::zeros(dim);
        for (row, am) in d_roi.rows().into_iter().zip(&argmax) {
            roi_backward(row.as_slice().expect("row-major"), am, d_fmap.view_mut());
        }
        let g = small_backward(&trace, bp, &d_fmap);
        if let BackboneParams::Small(gb) = &mut grads.backbone {
            gb.conv1_w = g.conv1_w;
            gb.conv1_b = g.conv1_b;
            gb.conv2_w = g.conv2_w;
            gb.conv2_b = g.conv2_b;
        }
    }
    Ok((sum, grads, pass.bn_stats()))
}

/// Per-class accuracy mean and sample standard deviation over folds.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Pages grouped by domain, in input order.
pub fn pages_by_domain(pages: &[Webpage]) -> BTreeMap<&str, Vec<&Webpage>> {
    let mut m: BTreeMap<&str, Vec<&Webpage>> = BTreeMap::new();
    for p in pages {
        m.entry(p.domain.as_str()).or_default().push(p);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dom::WebElement;
    use crate::geom::BBox;
    use ndarray::array;

    fn page(n_bg: usize) -> Webpage {
        let mut elements: Vec<WebElement> = (0..n_bg + 3)
            .map(|i| WebElement {
                element_id: i as u32 * 10,
                bbox: BBox::new(0., 0., 5., 5.),
                tag: "P".into(),
                text: None,
                font_size: None,
                label: Label::Background,
                preorder_index: i,
                dom_path: vec![],
            })
            .collect();
        elements[0].label = Label::Price;
        elements[1].label = Label::Title;
        elements[2].label = Label::Image;
        Webpage {
            page_id: "p".into(),
            domain: "d".into(),
            screenshot_ref: None,
            elements,
            fully_labeled: true,
            dom: None,
        }
    }

    #[test]
    fn sampling_extremes() {
        let p = page(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            sample_background(&p, 0.0, &mut rng),
            [0, 10, 20].into_iter().collect()
        );
        assert_eq!(sample_background(&p, 1.0, &mut rng).len(), 13);
    }

    #[test]
    fn ninety_percent_of_ten_covers_all_ids() {
        let p = page(10);
        let mut seen = BTreeSet::new();
        for s in 0..1000 {
            let kept = sample_background(&p, 0.9, &mut stream(s, 0, 0, 2));
            assert_eq!(kept.len(), 3 + 9);
            assert!([0, 10, 20].iter().all(|id| kept.contains(id)));
            seen.extend(kept);
        }
        assert_eq!(seen.len(), 13);
    }

    #[test]
    fn uniform_logits_give_ln4() {
        let z = Array2::zeros((3, 4));
        let l = loss(
            z.view(),
            &[Label::Price, Label::Background, Label::Image],
            &[true; 3],
        )
        .unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_logits_give_small_loss() {
        let z = array![[50.0, 0.0, 0.0, 0.0]];
        assert!(loss(z.view(), &[Label::Price], &[true]).unwrap() < 1e-20);
    }

    #[test]
    fn hand_two_element_loss() {
        let z = array![[1.0, 2.0, 0.0, -1.0], [0.5, 0.5, 0.5, 3.0]];
        let nll =
            |r: [f64; 4], y: usize| -(r[y].exp() / r.iter().map(|v| v.exp()).sum::<f64>()).ln();
        let expect = (nll([1.0, 2.0, 0.0, -1.0], 1) + nll([0.5, 0.5, 0.5, 3.0], 3)) / 2.0;
        let got = loss(z.view(), &[Label::Title, Label::Background], &[true, true]).unwrap();
        assert!((got - expect).abs() < 1e-14);
        let masked = loss(z.view(), &[Label::Title, Label::Background], &[true, false]).unwrap();
        assert!((masked - nll([1.0, 2.0, 0.0, -1.0], 1)).abs() < 1e-14);
        assert!(loss(z.view(), &[Label::Title], &[true]).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = ModelConfig {
            proj_dim: 2,
            head_hidden: 2,
            pos_dim: 2,
            backbone_channels: 1,
            viewport: 64,
            ..Default::default()
        };
        let m = Model::new(cfg, None, 0).unwrap();
        let mut p = m.params.clone();
        let mut g = p.zeros_like();
        g.head.out_b.fill(3.0);
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &g, 0.01, 0.0, true);
        for (a, b) in p.head.out_b.iter().zip(&m.params.head.out_b) {
            assert!((b - a - 0.01).abs() < 1e-9);
        }
        assert_eq!(p.head.hidden_w, m.params.head.hidden_w);
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            bg_sample_frac: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_pages: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        let t = TrainConfig::from_toml("lr = 0.001\nk = 4\n").unwrap();
        assert_eq!((t.lr, t.k, t.batch_pages), (0.001, 4, 5));
        assert!(TrainConfig::from_toml("learning_rate = 1").is_err());
    }

    #[test]
    fn empty_and_overlapping_splits_rejected() {
        let p = page(2);
        let cfg = TrainConfig::default();
        assert!(matches!(
            train(&[], &[p.clone()], &cfg, None),
            Err(TrainError::EmptyDataset(_))
        ));
        assert!(matches!(
            train(&[p.clone()], &[p.clone()], &cfg, None),
            Err(TrainError::DomainOverlap(_))
        ));
        let mut unl = p.clone();
        unl.fully_labeled = false;
        unl.domain = "e".into();
        assert!(matches!(
            train(&[p], &[unl], &cfg, None),
            Err(TrainError::Unlabeled(_))
        ));
    }

    #[test]
    fn fold_statistics() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
