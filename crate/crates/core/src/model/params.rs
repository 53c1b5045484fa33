//! Learned weights and their named-tensor view.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use super::{BackboneKind, ModelConfig, POS_INPUTS};

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
        }
    }
}

/// Two patchifying convolutions (`k = s = 8`, then `k = s = 4`), each followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct SmallBackbone {
    pub conv1_w: Array4<f64>,
    pub conv1_b: Array1<f64>,
    pub conv2_w: Array4<f64>,
    pub conv2_b: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasicBlock {
    pub conv1: Array4<f64>,
    pub bn1: BatchNorm,
    pub conv2: Array4<f64>,
    pub bn2: BatchNorm,
}

/// Stem and first residual stage of an 18-layer residual network, inference only.
#[derive(Clone, Debug, PartialEq)]
pub struct ResNetStem {
    pub conv1: Array4<f64>,
    pub bn1: BatchNorm,
    pub blocks: [BasicBlock; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub enum BackboneParams {
    Small(SmallBackbone),
    ResNetStem(Box<ResNetStem>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionalParams {
    /// `P x 5`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub bn: BatchNorm,
}

/// Attention projections. `w1`, `w2` are `proj x visual_dim`; `a` has length `2 * proj`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatParams {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    pub a: Array1<f64>,
}

impl GatParams {
    pub fn proj_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn a_query(&self) -> ndarray::ArrayView1<'_, f64> {
        self.a.slice(ndarray::s![..self.proj_dim()])
    }

    pub fn a_key(&self) -> ndarray::ArrayView1<'_, f64> {
        self.a.slice(ndarray::s![self.proj_dim()..])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub hidden_w: Array2<f64>,
    pub hidden_b: Array1<f64>,
    pub bn: BatchNorm,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub backbone: BackboneParams,
    pub pos: Option<PositionalParams>,
    pub gat: GatParams,
    pub head: HeadParams,
}

fn uniform<R: Rng, D: ndarray::Dimension>(
    shape: D,
    bound: f64,
    rng: &mut R,
) -> ndarray::Array<f64, D> {
    ndarray::Array::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound))
}

fn linear<R: Rng>(out: usize, inp: usize, rng: &mut R) -> (Array2<f64>, Array1<f64>) {
    let b = 1.0 / (inp as f64).sqrt();
    (
        uniform(ndarray::Ix2(out, inp), b, rng),
        uniform(ndarray::Ix1(out), b, rng),
    )
}

fn conv_he<R: Rng>(out: usize, inp: usize, k: usize, rng: &mut R) -> Array4<f64> {
    let fan_in = (inp * k * k) as f64;
    uniform(ndarray::Ix4(out, inp, k, k), (6.0 / fan_in).sqrt(), rng)
}

impl ResNetStem {
    pub fn zeros(channels: usize) -> Self {
        let block = || BasicBlock {
            conv1: Array4::zeros((channels, channels, 3, 3)),
            bn1: BatchNorm::new(channels),
            conv2: Array4::zeros((channels, channels, 3, 3)),
            bn2: BatchNorm::new(channels),
        };
        ResNetStem {
            conv1: Array4::zeros((channels, 3, 7, 7)),
            bn1: BatchNorm::new(channels),
            blocks: [block(), block()],
        }
    }

    pub fn random<R: Rng>(channels: usize, rng: &mut R) -> Self {
        let block = |rng: &mut R| BasicBlock {
            conv1: conv_he(channels, channels, 3, rng),
            bn1: BatchNorm::new(channels),
            conv2: conv_he(channels, channels, 3, rng),
            bn2: BatchNorm::new(channels),
        };
        let conv1 = conv_he(channels, 3, 7, rng);
        let b0 = block(rng);
        let b1 = block(rng);
        ResNetStem {
            conv1,
            bn1: BatchNorm::new(channels),
            blocks: [b0, b1],
        }
    }
}

impl ModelParams {
    /// Fresh random parameters for `config`.
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let c = config.backbone_channels;
        let backbone = match config.backbone {
            BackboneKind::Small => BackboneParams::Small(SmallBackbone {
                conv1_w: conv_he(config.small_hidden_channels, 3, 8, rng),
                conv1_b: Array1::zeros(config.small_hidden_channels),
                conv2_w: conv_he(c, config.small_hidden_channels, 4, rng),
                conv2_b: Array1::zeros(c),
            }),
            BackboneKind::ResNetStem => {
                BackboneParams::ResNetStem(Box::new(ResNetStem::random(c, rng)))
            }
        };
        let pos = config.use_positional.then(|| {
            let (weight, bias) = linear(config.pos_dim, POS_INPUTS, rng);
            PositionalParams {
                weight,
                bias,
                bn: BatchNorm::new(config.pos_dim),
            }
        });
        let d = config.visual_dim();
        let p = config.proj_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let gat = GatParams {
            w1: uniform(ndarray::Ix2(p, d), bound, rng),
            w2: uniform(ndarray::Ix2(p, d), bound, rng),
            a: uniform(ndarray::Ix1(2 * p), 1.0 / ((2 * p) as f64).sqrt(), rng),
        };
        let (hidden_w, hidden_b) = linear(config.head_hidden, config.head_input_dim(), rng);
        let (out_w, out_b) = linear(config.num_classes, config.head_hidden, rng);
        let head = HeadParams {
            hidden_w,
            hidden_b,
            bn: BatchNorm::new(config.head_hidden),
            out_w,
            out_b,
        };
        ModelParams {
            backbone,
            pos,
            gat,
            head,
        }
    }

    /// Same shapes, every entry zero. Used as the gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t, _) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Every tensor by name, with a flag telling whether the optimizer updates it.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>, bool)> {
        let mut v: Vec<(String, ArrayViewD<'_, f64>, bool)> = Vec::new();
        let mut put = |name: &str, t, trainable: bool| v.push((name.to_string(), t, trainable));
        match &self.backbone {
            BackboneParams::Small(b) => {
                put("backbone.conv1.weight", b.conv1_w.view().into_dyn(), true);
                put("backbone.conv1.bias", b.conv1_b.view().into_dyn(), true);
                put("backbone.conv2.weight", b.conv2_w.view().into_dyn(), true);
                put("backbone.conv2.bias", b.conv2_b.view().into_dyn(), true);
            }
            BackboneParams::ResNetStem(r) => {
                put("backbone.conv1.weight", r.conv1.view().into_dyn(), false);
                bn_views("backbone.bn1", &r.bn1, false, &mut put);
                for (i, blk) in r.blocks.iter().enumerate() {
                    put(
                        &format!("backbone.layer1.{i}.conv1.weight"),
                        blk.conv1.view().into_dyn(),
                        false,
                    );
                    bn_views(
                        &format!("backbone.layer1.{i}.bn1"),
                        &blk.bn1,
                        false,
                        &mut put,
                    );
                    put(
                        &format!("backbone.layer1.{i}.conv2.weight"),
                        blk.conv2.view().into_dyn(),
                        false,
                    );
                    bn_views(
                        &format!("backbone.layer1.{i}.bn2"),
                        &blk.bn2,
                        false,
                        &mut put,
                    );
                }
            }
        }
        if let Some(p) = &self.pos {
            put("pos.weight", p.weight.view().into_dyn(), true);
            put("pos.bias", p.bias.view().into_dyn(), true);
            bn_views("pos.bn", &p.bn, true, &mut put);
        }
        put("gat.w1", self.gat.w1.view().into_dyn(), true);
        put("gat.w2", self.gat.w2.view().into_dyn(), true);
        put("gat.a", self.gat.a.view().into_dyn(), true);
        put(
            "head.hidden.weight",
            self.head.hidden_w.view().into_dyn(),
            true,
        );
        put(
            "head.hidden.bias",
            self.head.hidden_b.view().into_dyn(),
            true,
        );
        bn_views("head.bn", &self.head.bn, true, &mut put);
        put("head.out.weight", self.head.out_w.view().into_dyn(), true);
        put("head.out.bias", self.head.out_b.view().into_dyn(), true);
        v
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>, bool)> {
        let mut v: Vec<(String, ArrayViewMutD<'_, f64>, bool)> = Vec::new();
        let mut put = |name: &str, t, trainable: bool| v.push((name.to_string(), t, trainable));
        match &mut self.backbone {
            BackboneParams::Small(b) => {
                put(
                    "backbone.conv1.weight",
                    b.conv1_w.view_mut().into_dyn(),
                    true,
                );
                put("backbone.conv1.bias", b.conv1_b.view_mut().into_dyn(), true);
                put(
                    "backbone.conv2.weight",
                    b.conv2_w.view_mut().into_dyn(),
                    true,
                );
                put("backbone.conv2.bias", b.conv2_b.view_mut().into_dyn(), true);
            }
            BackboneParams::ResNetStem(r) => {
                let r = &mut **r;
                put(
                    "backbone.conv1.weight",
                    r.conv1.view_mut().into_dyn(),
                    false,
                );
                bn_views_mut("backbone.bn1", &mut r.bn1, false, &mut put);
                for (i, blk) in r.blocks.iter_mut().enumerate() {
                    put(
                        &format!("backbone.layer1.{i}.conv1.weight"),
                        blk.conv1.view_mut().into_dyn(),
                        false,
                    );
                    bn_views_mut(
                        &format!("backbone.layer1.{i}.bn1"),
                        &mut blk.bn1,
                        false,
                        &mut put,
                    );
                    put(
                        &format!("backbone.layer1.{i}.conv2.weight"),
                        blk.conv2.view_mut().into_dyn(),
                        false,
                    );
                    bn_views_mut(
                        &format!("backbone.layer1.{i}.bn2"),
                        &mut blk.bn2,
                        false,
                        &mut put,
                    );
                }
            }
        }
        if let Some(p) = &mut self.pos {
            put("pos.weight", p.weight.view_mut().into_dyn(), true);
            put("pos.bias", p.bias.view_mut().into_dyn(), true);
            bn_views_mut("pos.bn", &mut p.bn, true, &mut put);
        }
        put("gat.w1", self.gat.w1.view_mut().into_dyn(), true);
        put("gat.w2", self.gat.w2.view_mut().into_dyn(), true);
        put("gat.a", self.gat.a.view_mut().into_dyn(), true);
        put(
            "head.hidden.weight",
            self.head.hidden_w.view_mut().into_dyn(),
            true,
        );
        put(
            "head.hidden.bias",
            self.head.hidden_b.view_mut().into_dyn(),
            true,
        );
        bn_views_mut("head.bn", &mut self.head.bn, true, &mut put);
        put(
            "head.out.weight",
            self.head.out_w.view_mut().into_dyn(),
            true,
        );
        put("head.out.bias", self.head.out_b.view_mut().into_dyn(), true);
        v
    }

    /// Owned copy of every tensor, keyed by name.
    pub fn to_named(&self) -> Vec<(String, ArrayD<f64>)> {
        self.tensors()
            .into_iter()
            .map(|(n, t, _)| (n, t.to_owned()))
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|t| t.2)
            .map(|t| t.1.len())
            .sum()
    }

    /// `self += other` over trainable tensors.
    pub fn add_assign(&mut self, other: &ModelParams) {
        for ((_, mut a, tr), (_, b, _)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            if tr {
                a += &b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, mut a, tr) in self.tensors_mut() {
            if tr {
                a *= factor;
            }
        }
    }
}

/// BN gamma/beta are trainable when the layer is; running statistics never are.
fn bn_views<'a>(
    prefix: &str,
    bn: &'a BatchNorm,
    trainable: bool,
    put: &mut impl FnMut(&str, ArrayViewD<'a, f64>, bool),
) {
    put(
        &format!("{prefix}.weight"),
        bn.gamma.view().into_dyn(),
        trainable,
    );
    put(
        &format!("{prefix}.bias"),
        bn.beta.view().into_dyn(),
        trainable,
    );
    put(
        &format!("{prefix}.running_mean"),
        bn.running_mean.view().into_dyn(),
        false,
    );
    put(
        &format!("{prefix}.running_var"),
        bn.running_var.view().into_dyn(),
        false,
    );
}

fn bn_views_mut<'a>(
    prefix: &str,
    bn: &'a mut BatchNorm,
    trainable: bool,
    put: &mut impl FnMut(&str, ArrayViewMutD<'a, f64>, bool),
) {
    put(
        &format!("{prefix}.weight"),
        bn.gamma.view_mut().into_dyn(),
        trainable,
    );
    put(
        &format!("{prefix}.bias"),
        bn.beta.view_mut().into_dyn(),
        trainable,
    );
    put(
        &format!("{prefix}.running_mean"),
        bn.running_mean.view_mut().into_dyn(),
        false,
    );
    put(
        &format!("{prefix}.running_var"),
        bn.running_var.view_mut().into_dyn(),
        false,
    );
}
