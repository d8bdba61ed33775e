//! Batched forward pass with cached intermediates and the matching
//! reverse pass. Training and gradient checks go through here; the
//! single-sample functions in the parent module are the reference path.

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, matvec_into, matvec_t_acc, outer_acc, softmax_backward, softmax_into, RngState};

use super::params::{HeadParameters, BN_EPS};
use super::{confidence, confidence_grad, fusion_weights};

/// Dropout and batch statistics are active only in `Train`.
pub enum Mode<'a> {
    Train(&'a mut RngState),
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// One hidden layer's cached activations, all `batch × hidden` except the
/// per-feature statistics.
#[derive(Debug, Clone, Default)]
struct HiddenCache {
    pre: Vec<f64>,
    /// Dropout multipliers (0 or 1/(1−p)); empty in eval mode.
    mask: Vec<f64>,
    xhat: Vec<f64>,
    out: Vec<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

/// Everything the reverse pass needs, plus the per-sample distributions.
/// Matrices are row-major with one row per sample.
#[derive(Debug, Clone)]
pub struct Forward {
    pub batch: usize,
    train: bool,
    /// Embeddings in head space, `batch × d`.
    pub embeddings: Vec<f64>,
    hidden: [HiddenCache; 2],
    pub primary: Vec<f64>,
    /// `batch × N·K` anchor distances.
    pub distances: Vec<f64>,
    pub similarities: Vec<f64>,
    pub anchor_term: Vec<f64>,
    /// `batch × heads × T × p` projections.
    query: Vec<f64>,
    key: Vec<f64>,
    value: Vec<f64>,
    /// `batch × heads × T × T` attention weights.
    attention: Vec<f64>,
    pooled: Vec<f64>,
    pub attentive_term: Vec<f64>,
    pub c_anchor: Vec<f64>,
    pub c_attentive: Vec<f64>,
    pub correction: Vec<f64>,
    pub c_primary: Vec<f64>,
    pub c_correction: Vec<f64>,
    pub final_dist: Vec<f64>,
}

impl Forward {
    pub fn row<'a>(&self, data: &'a [f64], i: usize) -> &'a [f64] {
        let w = data.len() / self.batch;
        &data[i * w..(i + 1) * w]
    }

    /// Output of the last hidden layer (the features the output layer sees).
    pub fn pre_logits(&self) -> &[f64] {
        &self.hidden[1].out
    }
}

/// Runs the head on a batch of input embeddings.
pub fn forward(params: &HeadParameters, inputs: &[&[f64]], mut mode: Mode<'_>) -> Result<Forward> {
    let cfg = params.config();
    let lay = params.layout();
    let v = params.values();
    let b = inputs.len();
    if b == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let (d, hid, n) = (cfg.dim, cfg.hidden, cfg.num_classes);

    let mut embeddings = Vec::with_capacity(b * d);
    for x in inputs {
        embeddings.extend(params.reduce(x)?);
    }

    // Primary MLP: Linear → ReLU → Dropout → BatchNorm, twice, then Linear.
    let train = mode.is_train();
    let mut hidden: [HiddenCache; 2] = Default::default();
    let layers = [
        (&lay.fc1_weight, &lay.fc1_bias, &lay.bn1_scale, &lay.bn1_shift, d),
        (&lay.fc2_weight, &lay.fc2_bias, &lay.bn2_scale, &lay.bn2_shift, hid),
    ];
    for (li, (w, bias, scale, shift, in_dim)) in layers.into_iter().enumerate() {
        let input: &[f64] = if li == 0 { &embeddings } else { &hidden[0].out };
        let mut cache = HiddenCache {
            pre: vec![0.0; b * hid],
            ..Default::default()
        };
        for i in 0..b {
            let row = &mut cache.pre[i * hid..(i + 1) * hid];
            matvec_into(&v[w.clone()], hid, in_dim, &input[i * in_dim..(i + 1) * in_dim], row);
            axpy(1.0, &v[bias.clone()], row);
        }
        let mut act: Vec<f64> = cache.pre.iter().map(|&z| z.max(0.0)).collect();
        let (gamma, beta) = (&v[scale.clone()], &v[shift.clone()]);
        match &mut mode {
            Mode::Train(rng) => {
                let keep = 1.0 / (1.0 - cfg.dropout);
                cache.mask = (0..b * hid)
                    .map(|_| if rng.uniform() < cfg.dropout { 0.0 } else { keep })
                    .collect();
                for (a, m) in act.iter_mut().zip(&cache.mask) {
                    *a *= m;
                }
                let mut mean = vec![0.0; hid];
                for i in 0..b {
                    axpy(1.0, &act[i * hid..(i + 1) * hid], &mut mean);
                }
                mean.iter_mut().for_each(|m| *m /= b as f64);
                let mut var = vec![0.0; hid];
                for i in 0..b {
                    for j in 0..hid {
                        let c = act[i * hid + j] - mean[j];
                        var[j] += c * c;
                    }
                }
                var.iter_mut().for_each(|s| *s /= b as f64);
                cache.inv_std = var.iter().map(|s| 1.0 / (s + BN_EPS).sqrt()).collect();
                cache.batch_mean = mean;
                cache.batch_var = var;
            }
            Mode::Eval => {
                let bn = params.batch_norm();
                cache.inv_std = bn.var[li].iter().map(|s| 1.0 / (s + BN_EPS).sqrt()).collect();
                cache.batch_mean = bn.mean[li].clone();
            }
        }
        cache.xhat = vec![0.0; b * hid];
        cache.out = vec![0.0; b * hid];
        for i in 0..b {
            for j in 0..hid {
                let k = i * hid + j;
                let xh = (act[k] - cache.batch_mean[j]) * cache.inv_std[j];
                cache.xhat[k] = xh;
                cache.out[k] = gamma[j] * xh + beta[j];
            }
        }
        hidden[li] = cache;
    }

    let mut primary = vec![0.0; b * n];
    let mut logits = vec![0.0; n];
    for i in 0..b {
        matvec_into(&v[lay.out_weight.clone()], n, hid, &hidden[1].out[i * hid..(i + 1) * hid], &mut logits);
        axpy(1.0, &v[lay.out_bias.clone()], &mut logits);
        softmax_into(&logits, 1.0, &mut primary[i * n..(i + 1) * n]);
    }

    // Anchor similarities and correction.
    let k = cfg.anchors_per_class;
    let p_total = cfg.num_anchors();
    let mut distances = vec![0.0; b * p_total];
    let mut similarities = vec![0.0; b * p_total];
    let mut anchor_term = vec![0.0; b * n];
    if k > 0 {
        let anchors = params.anchors();
        let mut neg = vec![0.0; p_total];
        for i in 0..b {
            let e = &embeddings[i * d..(i + 1) * d];
            let dist = &mut distances[i * p_total..(i + 1) * p_total];
            for (p, dp) in dist.iter_mut().enumerate() {
                *dp = crate::numerics::squared_distance(e, &anchors[p * d..(p + 1) * d]).sqrt();
                neg[p] = -*dp;
            }
            let sim = &mut similarities[i * p_total..(i + 1) * p_total];
            softmax_into(&neg, cfg.temperature, sim);
            let tg = &mut anchor_term[i * n..(i + 1) * n];
            for (p, s) in sim.iter().enumerate() {
                tg[p / k] += s;
            }
        }
    }

    // Multi-head self-attention over T tokens of the embedding.
    let (t, td, heads, hd) = (cfg.tokens, cfg.token_dim(), cfg.heads, cfg.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();
    let proj = heads * t * hd;
    let mut query = vec![0.0; b * proj];
    let mut key = vec![0.0; b * proj];
    let mut value = vec![0.0; b * proj];
    let mut attention = vec![0.0; b * heads * t * t];
    let mut pooled = vec![0.0; b * heads * hd];
    let mut attentive_term = vec![0.0; b * n];
    let (wq, wk, wv) = (&v[lay.query.clone()], &v[lay.key.clone()], &v[lay.value.clone()]);
    let mut scores = vec![0.0; t];
    let mut attn_logits = vec![0.0; n];
    for i in 0..b {
        let e = &embeddings[i * d..(i + 1) * d];
        for h in 0..heads {
            let wsz = hd * td;
            let base = i * proj + h * t * hd;
            for tok in 0..t {
                let x = &e[tok * td..(tok + 1) * td];
                let o = base + tok * hd;
                matvec_into(&wq[h * wsz..(h + 1) * wsz], hd, td, x, &mut query[o..o + hd]);
                matvec_into(&wk[h * wsz..(h + 1) * wsz], hd, td, x, &mut key[o..o + hd]);
                matvec_into(&wv[h * wsz..(h + 1) * wsz], hd, td, x, &mut value[o..o + hd]);
            }
            let abase = (i * heads + h) * t * t;
            let pool = &mut pooled[(i * heads + h) * hd..(i * heads + h + 1) * hd];
            for tq in 0..t {
                let q = &query[base + tq * hd..base + (tq + 1) * hd];
                for (tk, sc) in scores.iter_mut().enumerate() {
                    *sc = dot(q, &key[base + tk * hd..base + (tk + 1) * hd]) * scale;
                }
                let row = &mut attention[abase + tq * t..abase + (tq + 1) * t];
                softmax_into(&scores, 1.0, row);
                for (tk, &a) in row.iter().enumerate() {
                    axpy(a / t as f64, &value[base + tk * hd..base + (tk + 1) * hd], pool);
                }
            }
        }
        matvec_into(
            &v[lay.attn_out.clone()],
            n,
            heads * hd,
            &pooled[i * heads * hd..(i + 1) * heads * hd],
            &mut attn_logits,
        );
        softmax_into(&attn_logits, 1.0, &mut attentive_term[i * n..(i + 1) * n]);
    }

    // Confidence-weighted fusion.
    let mut c_anchor = vec![0.0; b];
    let mut c_attentive = vec![0.0; b];
    let mut correction = vec![0.0; b * n];
    let mut c_primary = vec![0.0; b];
    let mut c_correction = vec![0.0; b];
    let mut final_dist = vec![0.0; b * n];
    for i in 0..b {
        let r = i * n..(i + 1) * n;
        let ta = &attentive_term[r.clone()];
        c_attentive[i] = confidence(ta);
        if k > 0 {
            let tg = &anchor_term[r.clone()];
            c_anchor[i] = confidence(tg);
            let (wg, wa) = fusion_weights(c_anchor[i], c_attentive[i]);
            for (j, c) in correction[r.clone()].iter_mut().enumerate() {
                *c = wg * tg[j] + wa * ta[j];
            }
        } else {
            correction[r.clone()].copy_from_slice(ta);
        }
        let l = &primary[r.clone()];
        let tc = &correction[r.clone()];
        c_primary[i] = confidence(l);
        c_correction[i] = confidence(tc);
        let (wl, wt) = fusion_weights(c_primary[i], c_correction[i]);
        for (j, f) in final_dist[r].iter_mut().enumerate() {
            *f = wl * l[j] + wt * tc[j];
        }
    }

    Ok(Forward {
        batch: b,
        train,
        embeddings,
        hidden,
        primary,
        distances,
        similarities,
        anchor_term,
        query,
        key,
        value,
        attention,
        pooled,
        attentive_term,
        c_anchor,
        c_attentive,
        correction,
        c_primary,
        c_correction,
        final_dist,
    })
}

/// Folds the batch statistics of a training forward pass into the running
/// batch-norm estimates: `running ← momentum·running + (1 − momentum)·batch`,
/// with the unbiased batch variance.
pub fn update_running_stats(params: &mut HeadParameters, fwd: &Forward, momentum: f64) {
    if !fwd.train {
        return;
    }
    let b = fwd.batch as f64;
    let unbias = if fwd.batch > 1 { b / (b - 1.0) } else { 1.0 };
    let bn = params.batch_norm_mut();
    for (li, cache) in fwd.hidden.iter().enumerate() {
        for j in 0..cache.batch_mean.len() {
            bn.mean[li][j] = momentum * bn.mean[li][j] + (1.0 - momentum) * cache.batch_mean[j];
            bn.var[li][j] = momentum * bn.var[li][j] + (1.0 - momentum) * cache.batch_var[j] * unbias;
        }
    }
}

/// Backpropagates upstream gradients into `grad` (accumulating).
///
/// `d_final` is `∂loss/∂L_final` (`batch × N`); `d_embed` is any direct
/// `∂loss/∂e` on the head-space embeddings (`batch × d`), e.g. from the
/// center loss. Gradients for anchors from losses that read the anchors
/// directly are the caller's business.
pub fn backward(
    params: &HeadParameters,
    inputs: &[&[f64]],
    fwd: &Forward,
    d_final: &[f64],
    d_embed: &[f64],
    grad: &mut [f64],
) {
    let cfg = params.config();
    let lay = params.layout();
    let v = params.values();
    let (b, d, hid, n) = (fwd.batch, cfg.dim, cfg.hidden, cfg.num_classes);
    let k = cfg.anchors_per_class;
    let p_total = cfg.num_anchors();
    let (t, td, heads, hd) = (cfg.tokens, cfg.token_dim(), cfg.heads, cfg.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();
    let proj = heads * t * hd;

    let mut d_emb = d_embed.to_vec();
    let mut d_logits = vec![0.0; b * n];

    let mut dl = vec![0.0; n];
    let mut dt = vec![0.0; n];
    let mut dtg = vec![0.0; n];
    let mut dta = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut ds = vec![0.0; p_total];
    let mut du = vec![0.0; p_total];
    let mut dpooled = vec![0.0; heads * hd];
    let mut dq = vec![0.0; t * hd];
    let mut dk = vec![0.0; t * hd];
    let mut dv = vec![0.0; t * hd];
    let mut da = vec![0.0; t];
    let mut dscore = vec![0.0; t];

    for i in 0..b {
        let r = i * n..(i + 1) * n;
        let df = &d_final[r.clone()];
        let l = &fwd.primary[r.clone()];
        let tc = &fwd.correction[r.clone()];
        let fin = &fwd.final_dist[r.clone()];

        // L = wl·l + wt·t with weights from confidences.
        fuse_backward(df, l, tc, fin, fwd.c_primary[i], fwd.c_correction[i], &mut dl, &mut dt);

        let ta = &fwd.attentive_term[r.clone()];
        if k > 0 {
            let tg = &fwd.anchor_term[r.clone()];
            fuse_backward(&dt, tg, ta, tc, fwd.c_anchor[i], fwd.c_attentive[i], &mut dtg, &mut dta);
        } else {
            dta.copy_from_slice(&dt);
        }

        // Primary softmax.
        softmax_backward(l, &dl, &mut d_logits[r.clone()]);

        let e = &fwd.embeddings[i * d..(i + 1) * d];
        let de = &mut d_emb[i * d..(i + 1) * d];

        // Anchor correction: t_g[c] = Σ_j s[c·K + j], s = softmax(−dist/δ).
        if k > 0 {
            let sim = &fwd.similarities[i * p_total..(i + 1) * p_total];
            let dist = &fwd.distances[i * p_total..(i + 1) * p_total];
            for (p, g) in ds.iter_mut().enumerate() {
                *g = dtg[p / k];
            }
            softmax_backward(sim, &ds, &mut du);
            let anchors = params.anchors();
            for p in 0..p_total {
                if dist[p] <= 0.0 {
                    continue;
                }
                let coef = -du[p] / (cfg.temperature * dist[p]);
                let a = &anchors[p * d..(p + 1) * d];
                let ga = &mut grad[lay.anchors.start + p * d..lay.anchors.start + (p + 1) * d];
                for j in 0..d {
                    let diff = e[j] - a[j];
                    de[j] += coef * diff;
                    ga[j] -= coef * diff;
                }
            }
        }

        // Attentive correction.
        softmax_backward(ta, &dta, &mut tmp);
        let pooled = &fwd.pooled[i * heads * hd..(i + 1) * heads * hd];
        outer_acc(&tmp, pooled, &mut grad[lay.attn_out.clone()]);
        dpooled.fill(0.0);
        matvec_t_acc(&v[lay.attn_out.clone()], n, heads * hd, &tmp, &mut dpooled);
        let wsz = hd * td;
        for h in 0..heads {
            let base = i * proj + h * t * hd;
            let q = &fwd.query[base..base + t * hd];
            let kk = &fwd.key[base..base + t * hd];
            let vv = &fwd.value[base..base + t * hd];
            let attn = &fwd.attention[(i * heads + h) * t * t..(i * heads + h + 1) * t * t];
            // Every token's output contributes 1/T of the pooled vector.
            let dh: Vec<f64> = dpooled[h * hd..(h + 1) * hd].iter().map(|g| g / t as f64).collect();
            dq.fill(0.0);
            dk.fill(0.0);
            dv.fill(0.0);
            for tq in 0..t {
                let row = &attn[tq * t..(tq + 1) * t];
                for tk in 0..t {
                    da[tk] = dot(&dh, &vv[tk * hd..(tk + 1) * hd]);
                    axpy(row[tk], &dh, &mut dv[tk * hd..(tk + 1) * hd]);
                }
                softmax_backward(row, &da, &mut dscore);
                for tk in 0..t {
                    let g = dscore[tk] * scale;
                    if g == 0.0 {
                        continue;
                    }
                    axpy(g, &kk[tk * hd..(tk + 1) * hd], &mut dq[tq * hd..(tq + 1) * hd]);
                    axpy(g, &q[tq * hd..(tq + 1) * hd], &mut dk[tk * hd..(tk + 1) * hd]);
                }
            }
            for (range, dproj) in [(&lay.query, &dq), (&lay.key, &dk), (&lay.value, &dv)] {
                let w = &v[range.start + h * wsz..range.start + (h + 1) * wsz];
                for tok in 0..t {
                    let x = &e[tok * td..(tok + 1) * td];
                    let g = &dproj[tok * hd..(tok + 1) * hd];
                    outer_acc(g, x, &mut grad[range.start + h * wsz..range.start + (h + 1) * wsz]);
                    matvec_t_acc(w, hd, td, g, &mut de[tok * td..(tok + 1) * td]);
                }
            }
        }
    }

    // Output layer.
    let h2 = &fwd.hidden[1].out;
    let mut d_hidden = vec![0.0; b * hid];
    for i in 0..b {
        let dz = &d_logits[i * n..(i + 1) * n];
        outer_acc(dz, &h2[i * hid..(i + 1) * hid], &mut grad[lay.out_weight.clone()]);
        axpy(1.0, dz, &mut grad[lay.out_bias.clone()]);
        matvec_t_acc(&v[lay.out_weight.clone()], n, hid, dz, &mut d_hidden[i * hid..(i + 1) * hid]);
    }

    // Hidden layers, last to first.
    let layers = [
        (&lay.fc1_weight, &lay.fc1_bias, &lay.bn1_scale, &lay.bn1_shift, d),
        (&lay.fc2_weight, &lay.fc2_bias, &lay.bn2_scale, &lay.bn2_shift, hid),
    ];
    for li in (0..2).rev() {
        let (w, bias, scale_r, shift_r, in_dim) = layers[li];
        let cache = &fwd.hidden[li];
        let gamma = &v[scale_r.clone()];
        let mut d_act = vec![0.0; b * hid];
        for j in 0..hid {
            let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
            for i in 0..b {
                let idx = i * hid + j;
                sum_dy += d_hidden[idx];
                sum_dy_xhat += d_hidden[idx] * cache.xhat[idx];
            }
            grad[scale_r.start + j] += sum_dy_xhat;
            grad[shift_r.start + j] += sum_dy;
            let g = gamma[j];
            if fwd.train {
                // dx = inv_std/B · (B·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂)), dx̂ = γ·dy.
                let bf = b as f64;
                for i in 0..b {
                    let idx = i * hid + j;
                    d_act[idx] = g * cache.inv_std[j] / bf
                        * (bf * d_hidden[idx] - sum_dy - cache.xhat[idx] * sum_dy_xhat);
                }
            } else {
                for i in 0..b {
                    let idx = i * hid + j;
                    d_act[idx] = g * cache.inv_std[j] * d_hidden[idx];
                }
            }
        }
        for (idx, g) in d_act.iter_mut().enumerate() {
            if cache.pre[idx] <= 0.0 {
                *g = 0.0;
            } else if fwd.train {
                *g *= cache.mask[idx];
            }
        }
        let input: &[f64] = if li == 0 { &fwd.embeddings } else { &fwd.hidden[0].out };
        let mut d_input = vec![0.0; b * in_dim];
        for i in 0..b {
            let dz = &d_act[i * hid..(i + 1) * hid];
            outer_acc(dz, &input[i * in_dim..(i + 1) * in_dim], &mut grad[w.clone()]);
            axpy(1.0, dz, &mut grad[bias.clone()]);
            matvec_t_acc(&v[w.clone()], hid, in_dim, dz, &mut d_input[i * in_dim..(i + 1) * in_dim]);
        }
        if li == 1 {
            d_hidden = d_input;
        } else {
            axpy(1.0, &d_input, &mut d_emb);
        }
    }

    // Reduction layer.
    if cfg.reduction {
        for (i, x) in inputs.iter().enumerate() {
            let de = &d_emb[i * d..(i + 1) * d];
            outer_acc(de, x, &mut grad[lay.reduction_weight.clone()]);
            axpy(1.0, de, &mut grad[lay.reduction_bias.clone()]);
        }
    }
}

/// Reverse of `out = wa·a + wb·b` where `(wa, wb)` are the normalized
/// confidences of `a` and `b`. Overwrites `da` and `db`.
#[allow(clippy::too_many_arguments)]
fn fuse_backward(d_out: &[f64], a: &[f64], b: &[f64], out: &[f64], ca: f64, cb: f64, da: &mut [f64], db: &mut [f64]) {
    let (wa, wb) = fusion_weights(ca, cb);
    for j in 0..d_out.len() {
        da[j] = wa * d_out[j];
        db[j] = wb * d_out[j];
    }
    let sum = ca + cb;
    if sum < super::FUSION_EPS {
        return;
    }
    // ∂out/∂ca = (a − out)/(ca + cb), ∂out/∂cb = (b − out)/(ca + cb).
    let mut dca = 0.0;
    let mut dcb = 0.0;
    for j in 0..d_out.len() {
        dca += d_out[j] * (a[j] - out[j]);
        dcb += d_out[j] * (b[j] - out[j]);
    }
    dca /= sum;
    dcb /= sum;
    confidence_grad(a, dca, da);
    confidence_grad(b, dcb, db);
}
