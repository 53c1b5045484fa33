//! Page-level forward and backward passes over all elements at once.
//!
//! Batch norm normalizes over the elements of one page in training mode and
//! uses running statistics in eval mode. The attention query term is computed
//! as `q_i = v_i . (W1^T a_q)`, so `W1` only enters through that vector and
//! its gradient is the rank-one `a_q (V^T dq)^T`.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::BatchNorm;
use super::{leaky, ContextRepr, ModelConfig, ModelError, ModelParams, NUM_CLASSES, POS_INPUTS};

/// Per-page network inputs, rows in preorder.
#[derive(Clone, Debug, PartialEq)]
pub struct PageInputs {
    /// Flattened RoI features, `N x (C * oh * ow)`.
    pub roi: Array2<f64>,
    /// Normalized `[x, y, w, h, w/h]`, `N x 5`.
    pub boxes: Array2<f64>,
    /// Heuristic features, `N x extra_dim`, when enabled.
    pub extra: Option<Array2<f64>>,
}

impl PageInputs {
    pub fn len(&self) -> usize {
        self.roi.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.roi.nrows() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Running BN statistics, no dropout.
    Eval,
    /// Page BN statistics; dropout drawn from the seed when given.
    Train { dropout_seed: Option<u64> },
}

#[derive(Clone, Debug)]
struct BnCache {
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
    /// Batch mean and biased variance (training mode only).
    batch: Option<(Array1<f64>, Array1<f64>)>,
}

/// Batch statistics gathered in training mode, applied to the running
/// estimates by [`apply_bn_stats`].
#[derive(Clone, Debug, Default)]
pub struct BnStats {
    pub n: usize,
    pub pos: Option<(Array1<f64>, Array1<f64>)>,
    pub head: Option<(Array1<f64>, Array1<f64>)>,
}

/// Activations of one forward pass, enough to run [`ForwardPass::backward`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Array2<f64>,
    neighbors: Vec<Vec<usize>>,
    use_context: bool,
    v: Array2<f64>,
    u1: Array1<f64>,
    keys: Array2<f64>,
    alpha: Vec<Vec<f64>>,
    scores: Vec<Vec<f64>>,
    context: Array2<f64>,
    pos_bn: Option<BnCache>,
    pos_out: Option<Array2<f64>>,
    pos_inputs: Option<Array2<f64>>,
    head_in: Array2<f64>,
    head_bn: BnCache,
    head_act: Array2<f64>,
    dropout_mask: Option<Array2<f64>>,
}

fn bn_forward(x: &Array2<f64>, bn: &BatchNorm, eps: f64, train: bool) -> (Array2<f64>, BnCache) {
    let (mean, var) = if train {
        let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
        let var = x.var_axis(Axis(0), 0.0);
        (mean, var)
    } else {
        (bn.running_mean.clone(), bn.running_var.clone())
    };
    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let x_hat = (x - &mean) * &inv_std;
    let y = &x_hat * &bn.gamma + &bn.beta;
    (
        y,
        BnCache {
            x_hat,
            inv_std,
            batch: train.then_some((mean, var)),
        },
    )
}

/// Returns `(dx, dgamma, dbeta)`.
fn bn_backward(
    dy: &Array2<f64>,
    cache: &BnCache,
    bn: &BatchNorm,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dgamma = (dy * &cache.x_hat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    let dx_hat = dy * &bn.gamma;
    let dx = if cache.batch.is_some() {
        let n = dy.nrows() as f64;
        let sum = dx_hat.sum_axis(Axis(0));
        let dot = (&dx_hat * &cache.x_hat).sum_axis(Axis(0));
        ((&dx_hat * n) - &sum - &(&cache.x_hat * &dot)) * &(&cache.inv_std / n)
    } else {
        dx_hat * &cache.inv_std
    };
    (dx, dgamma, dbeta)
}

fn check_inputs(
    config: &ModelConfig,
    inputs: &PageInputs,
    neighbors: &[Vec<usize>],
) -> Result<(), ModelError> {
    let n = inputs.len();
    let shape = |m: String| Err(ModelError::Shape(m));
    if n == 0 {
        return shape("page without elements".into());
    }
    if inputs.roi.ncols() != config.roi_dim() {
        return shape(format!(
            "RoI width {} != {}",
            inputs.roi.ncols(),
            config.roi_dim()
        ));
    }
    if inputs.boxes.dim() != (n, POS_INPUTS) {
        return shape(format!(
            "box matrix is {:?}, expected ({n}, 5)",
            inputs.boxes.dim()
        ));
    }
    match (&inputs.extra, config.extra_dim) {
        (None, 0) => {}
        (Some(e), d) if e.dim() == (n, d) && d > 0 => {}
        _ => return shape("heuristic feature matrix does not match extra_dim".into()),
    }
    if neighbors.len() != n || neighbors.iter().flatten().any(|&j| j >= n) {
        return shape("neighbor lists do not match the page".into());
    }
    Ok(())
}

/// Runs the network over one page. `neighbors[i]` lists the preorder
/// indices attended to by element `i`.
pub fn forward(
    params: &ModelParams,
    config: &ModelConfig,
    inputs: &PageInputs,
    neighbors: &[Vec<usize>],
    mode: ForwardMode,
) -> Result<ForwardPass, ModelError> {
    check_inputs(config, inputs, neighbors)?;
    let train = matches!(mode, ForwardMode::Train { .. });
    let n = inputs.len();
    let eps = config.bn_eps;

    let (pos_bn, pos_out) = match (&params.pos, config.use_positional) {
        (Some(pos), true) => {
            let z = inputs.boxes.dot(&pos.weight.t()) + &pos.bias;
            let (y, cache) = bn_forward(&z, &pos.bn, eps, train);
            (Some(cache), Some(y.mapv(|v| v.max(0.0))))
        }
        (None, false) => (None, None),
        _ => {
            return Err(ModelError::Shape(
                "positional parameters do not match use_positional".into(),
            ))
        }
    };
    let mut parts: Vec<ArrayView2<'_, f64>> = vec![inputs.roi.view()];
    if let Some(p) = &pos_out {
        parts.push(p.view());
    }
    if let Some(e) = &inputs.extra {
        parts.push(e.view());
    }
    let v = concatenate(Axis(1), &parts).expect("row counts agree");

    let gat = &params.gat;
    let p = config.proj_dim;
    let slope = config.leaky_slope;
    let mut context = Array2::zeros((n, p));
    let mut alpha = vec![Vec::new(); n];
    let mut scores = vec![Vec::new(); n];
    let (u1, keys) = if config.use_context {
        let u1 = gat.w1.t().dot(&gat.a_query());
        let q = v.dot(&u1);
        let keys = v.dot(&gat.w2.t());
        let t = keys.dot(&gat.a_key());
        for i in 0..n {
            if neighbors[i].is_empty() {
                continue;
            }
            let s: Vec<f64> = neighbors[i].iter().map(|&j| q[i] + t[j]).collect();
            let e: Vec<f64> = s.iter().map(|&x| leaky(x, slope)).collect();
            let a = super::softmax(&e);
            let mut row = context.row_mut(i);
            for (&j, &aj) in neighbors[i].iter().zip(&a) {
                row.scaled_add(aj, &keys.row(j));
            }
            alpha[i] = a;
            scores[i] = s;
        }
        (u1, keys)
    } else {
        (Array1::zeros(0), Array2::zeros((0, 0)))
    };

    let head = &params.head;
    let head_in = concatenate![Axis(1), v, context];
    let pre = head_in.dot(&head.hidden_w.t()) + &head.hidden_b;
    let (bn_out, head_bn) = bn_forward(&pre, &head.bn, eps, train);
    let mut head_act = bn_out.mapv(|x| x.max(0.0));
    let dropout_mask = match mode {
        ForwardMode::Train {
            dropout_seed: Some(seed),
        } if config.dropout > 0.0 => {
            let keep = 1.0 - config.dropout;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = Array2::from_shape_simple_fn(head_act.dim(), || {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            head_act *= &mask;
            Some(mask)
        }
        _ => None,
    };
    let logits = head_act.dot(&head.out_w.t()) + &head.out_b;
    debug_assert_eq!(logits.ncols(), NUM_CLASSES);

    Ok(ForwardPass {
        logits,
        neighbors: neighbors.to_vec(),
        use_context: config.use_context,
        v,
        u1,
        keys,
        alpha,
        scores,
        context,
        pos_inputs: pos_out.as_ref().map(|_| inputs.boxes.clone()),
        pos_bn,
        pos_out,
        head_in,
        head_bn,
        head_act,
        dropout_mask,
    })
}

impl ForwardPass {
    /// Attention maps and context vectors, keyed by element id (`ids[i]` is row `i`).
    pub fn contexts(&self, ids: &[u32]) -> Vec<ContextRepr> {
        (0..self.logits.nrows())
            .map(|i| ContextRepr {
                vec: self.context.row(i).to_vec(),
                attn: self.neighbors[i]
                    .iter()
                    .zip(&self.alpha[i])
                    .map(|(&j, &a)| (ids[j], a))
                    .collect(),
            })
            .collect()
    }

    /// Attention weights of element `i` over its neighbor list.
    pub fn alpha(&self, i: usize) -> &[f64] {
        &self.alpha[i]
    }

    /// Visual representations `v_i`, one row per element.
    pub fn visual(&self) -> &Array2<f64> {
        &self.v
    }

    pub fn bn_stats(&self) -> BnStats {
        BnStats {
            n: self.logits.nrows(),
            pos: self.pos_bn.as_ref().and_then(|c| c.batch.clone()),
            head: self.head_bn.batch.clone(),
        }
    }

    /// Gradients of a loss with `d_logits = dL/dlogits`. Returns parameter
    /// gradients (backbone entries zero) and the gradient at the RoI features.
    pub fn backward(
        &self,
        params: &ModelParams,
        config: &ModelConfig,
        d_logits: &Array2<f64>,
    ) -> (ModelParams, Array2<f64>) {
        let mut g = params.zeros_like();
        let head = &params.head;
        let n = self.logits.nrows();

        g.head.out_w = d_logits.t().dot(&self.head_act);
        g.head.out_b = d_logits.sum_axis(Axis(0));
        let mut d_act = d_logits.dot(&head.out_w);
        if let Some(mask) = &self.dropout_mask {
            d_act *= mask;
        }
        // ReLU after BN: positive outputs pass the gradient.
        let bn_y = &self.head_bn.x_hat * &head.bn.gamma + &head.bn.beta;
        d_act.zip_mut_with(&bn_y, |d, &y| {
            if y <= 0.0 {
                *d = 0.0
            }
        });
        let (d_pre, dgamma, dbeta) = bn_backward(&d_act, &self.head_bn, &head.bn);
        g.head.bn.gamma = dgamma;
        g.head.bn.beta = dbeta;
        g.head.hidden_w = d_pre.t().dot(&self.head_in);
        g.head.hidden_b = d_pre.sum_axis(Axis(0));
        let d_in = d_pre.dot(&head.hidden_w);
        let vd = self.v.ncols();
        let mut dv = d_in.slice(s![.., ..vd]).to_owned();

        if self.use_context {
            let gat = &params.gat;
            let dc = d_in.slice(s![.., vd..]);
            let mut dk = Array2::<f64>::zeros(self.keys.dim());
            let mut dq = Array1::<f64>::zeros(n);
            let mut dt = Array1::<f64>::zeros(n);
            for i in 0..n {
                let nb = &self.neighbors[i];
                if nb.is_empty() {
                    continue;
                }
                let a = &self.alpha[i];
                let dci = dc.row(i);
                let da: Vec<f64> = nb.iter().map(|&j| dci.dot(&self.keys.row(j))).collect();
                let mean: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
                for (m, &j) in nb.iter().enumerate() {
                    dk.row_mut(j).scaled_add(a[m], &dci);
                    let de = a[m] * (da[m] - mean);
                    let ds = if self.scores[i][m] > 0.0 {
                        de
                    } else {
                        de * config.leaky_slope
                    };
                    dq[i] += ds;
                    dt[j] += ds;
                }
            }
            // t = K a_k
            let a_key = gat.a_key();
            for (mut row, &d) in dk.axis_iter_mut(Axis(0)).zip(&dt) {
                row.scaled_add(d, &a_key);
            }
            let da_key = self.keys.t().dot(&dt);
            // q = V u1, u1 = W1^T a_q
            let du1 = self.v.t().dot(&dq);
            for (mut row, &d) in dv.axis_iter_mut(Axis(0)).zip(&dq) {
                row.scaled_add(d, &self.u1);
            }
            let a_query = gat.a_query();
            let p = gat.proj_dim();
            g.gat.w1 = Array2::from_shape_fn((p, vd), |(r, c)| a_query[r] * du1[c]);
            let da_query = gat.w1.dot(&du1);
            g.gat.a.slice_mut(s![..p]).assign(&da_query);
            g.gat.a.slice_mut(s![p..]).assign(&da_key);
            // K = V W2^T
            g.gat.w2 = dk.t().dot(&self.v);
            dv += &dk.dot(&gat.w2);
        }

        let roi_dim = config.roi_dim();
        if let (Some(cache), Some(out), Some(pos)) = (&self.pos_bn, &self.pos_out, &params.pos) {
            let pw = config.pos_dim;
            let mut dpos = dv.slice(s![.., roi_dim..roi_dim + pw]).to_owned();
            dpos.zip_mut_with(out, |d, &y| {
                if y <= 0.0 {
                    *d = 0.0
                }
            });
            let (dz, dgamma, dbeta) = bn_backward(&dpos, cache, &pos.bn);
            let gp = g.pos.as_mut().expect("positional gradient slot");
            gp.bn.gamma = dgamma;
            gp.bn.beta = dbeta;
            let boxes = self.pos_inputs.as_ref().expect("positional inputs cached");
            gp.weight = dz.t().dot(boxes);
            gp.bias = dz.sum_axis(Axis(0));
        }
        let d_roi = dv.slice(s![.., ..roi_dim]).to_owned();
        (g, d_roi)
    }
}

/// Folds page batch statistics into the running estimates, PyTorch style
/// (unbiased variance; pages with one element only move the mean).
pub fn apply_bn_stats(params: &mut ModelParams, stats: &BnStats, momentum: f64) {
    let upd = |bn: &mut BatchNorm, st: &(Array1<f64>, Array1<f64>)| {
        bn.running_mean
            .zip_mut_with(&st.0, |r, &m| *r = (1.0 - momentum) * *r + momentum * m);
        if stats.n > 1 {
            let c = stats.n as f64 / (stats.n as f64 - 1.0);
            bn.running_var
                .zip_mut_with(&st.1, |r, &v| *r = (1.0 - momentum) * *r + momentum * v * c);
        }
    };
    if let (Some(p), Some(st)) = (params.pos.as_mut(), stats.pos.as_ref()) {
        upd(&mut p.bn, st);
    }
    if let Some(st) = &stats.head {
        upd(&mut params.head.bn, st);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use rand::Rng;

    fn setup(
        use_context: bool,
        use_positional: bool,
    ) -> (Model, PageInputs, Vec<Vec<usize>>, Array2<f64>) {
        let cfg = ModelConfig {
            proj_dim: 6,
            head_hidden: 7,
            pos_dim: 4,
            backbone_channels: 2,
            roi_output: (1, 2),
            viewport: 64,
            use_context,
            use_positional,
            ..Default::default()
        };
        let model = Model::new(cfg, None, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 5;
        let inputs = PageInputs {
            roi: Array2::from_shape_simple_fn((n, 4), || rng.random_range(0.0..2.0)),
            boxes: Array2::from_shape_simple_fn((n, 5), || rng.random_range(0.0..1.0)),
            extra: None,
        };
        let nb = vec![vec![1, 2], vec![0, 2, 3], vec![1, 3], vec![4], vec![]];
        let g = Array2::from_shape_simple_fn((n, 4), || rng.random_range(-1.0..1.0));
        (model, inputs, nb, g)
    }

    fn loss(m: &Model, inputs: &PageInputs, nb: &[Vec<usize>], g: &Array2<f64>) -> f64 {
        let pass = forward(
            &m.params,
            &m.config,
            inputs,
            nb,
            ForwardMode::Train { dropout_seed: None },
        )
        .unwrap();
        (&pass.logits * g).sum()
    }

    fn check(use_context: bool, use_positional: bool) {
        let (mut m, inputs, nb, g) = setup(use_context, use_positional);
        let pass = forward(
            &m.params,
            &m.config,
            &inputs,
            &nb,
            ForwardMode::Train { dropout_seed: None },
        )
        .unwrap();
        let (grads, d_roi) = pass.backward(&m.params, &m.config, &g);
        let analytic: Vec<(String, Vec<f64>, bool)> = grads
            .tensors()
            .into_iter()
            .map(|(n, t, tr)| (n, t.iter().copied().collect(), tr))
            .collect();
        let h = 1e-6;
        for (ti, (name, ga, trainable)) in analytic.iter().enumerate() {
            if !trainable || name.starts_with("backbone") {
                continue;
            }
            for k in 0..ga.len() {
                let bump = |m: &mut Model, d: f64| {
                    let mut ts = m.params.tensors_mut();
                    let t = &mut ts[ti].1;
                    let x = t.iter_mut().nth(k).unwrap();
                    *x += d;
                };
                bump(&mut m, h);
                let lp = loss(&m, &inputs, &nb, &g);
                bump(&mut m, -2.0 * h);
                let lm = loss(&m, &inputs, &nb, &g);
                bump(&mut m, h);
                let num = (lp - lm) / (2.0 * h);
                let err = (num - ga[k]).abs() / num.abs().max(ga[k].abs()).max(1e-4);
                assert!(err < 1e-4, "{name}[{k}]: analytic {} numeric {num}", ga[k]);
            }
        }
        for idx in [(0, 0), (2, 3), (4, 1)] {
            let mut ip = inputs.clone();
            ip.roi[idx] += h;
            let lp = loss(&m, &ip, &nb, &g);
            ip.roi[idx] -= 2.0 * h;
            let lm = loss(&m, &ip, &nb, &g);
            let num = (lp - lm) / (2.0 * h);
            assert!(
                (num - d_roi[idx]).abs() < 1e-6 * num.abs().max(1.0),
                "roi {idx:?}"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check(true, true);
    }

    #[test]
    fn gradients_without_context_or_positional() {
        check(false, false);
    }

    #[test]
    fn context_switch_equals_empty_neighborhoods() {
        let (m, inputs, nb, _) = setup(true, true);
        let mut off = m.clone();
        off.config.use_context = false;
        let empty = vec![Vec::new(); nb.len()];
        let a = forward(&off.params, &off.config, &inputs, &nb, ForwardMode::Eval).unwrap();
        let b = forward(&m.params, &m.config, &inputs, &empty, ForwardMode::Eval).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (m, inputs, nb, _) = setup(true, true);
        let pass = forward(&m.params, &m.config, &inputs, &nb, ForwardMode::Eval).unwrap();
        for i in 0..nb.len() {
            let a = pass.alpha(i);
            assert_eq!(a.len(), nb[i].len());
            if !a.is_empty() {
                assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropout_is_seeded() {
        let (m, inputs, nb, _) = setup(true, true);
        let run = |s| {
            forward(
                &m.params,
                &m.config,
                &inputs,
                &nb,
                ForwardMode::Train {
                    dropout_seed: Some(s),
                },
            )
            .unwrap()
        };
        assert_eq!(run(3).logits, run(3).logits);
        assert_ne!(run(3).logits, run(4).logits);
    }

    #[test]
    fn running_stats_update() {
        let (mut m, inputs, nb, _) = setup(true, true);
        let pass = forward(
            &m.params,
            &m.config,
            &inputs,
            &nb,
            ForwardMode::Train { dropout_seed: None },
        )
        .unwrap();
        let st = pass.bn_stats();
        let before = m.params.head.bn.running_mean.clone();
        apply_bn_stats(&mut m.params, &st, 0.1);
        let (mean, _) = st.head.unwrap();
        let expect = &before * 0.9 + &(&mean * 0.1);
        assert_eq!(m.params.head.bn.running_mean, expect);
    }
}
