//! Naive scalar-loop reference implementations. They read parameters by
//! array name and share no code with the library's forward pass.

use relbal_core::head::HeadParameters;

fn arr<'a>(p: &'a HeadParameters, name: &str) -> &'a [f64] {
    p.array(name).unwrap_or(&[])
}

pub fn naive_softmax(z: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn naive_confidence(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &v in p {
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    1.0 - h / (p.len() as f64).ln()
}

pub fn naive_fuse(a: &[f64], b: &[f64]) -> Vec<f64> {
    let (ca, cb) = (naive_confidence(a), naive_confidence(b));
    (0..a.len()).map(|i| (ca * a[i] + cb * b[i]) / (ca + cb)).collect()
}

pub fn oracle_reduce(p: &HeadParameters, x: &[f64]) -> Vec<f64> {
    let cfg = p.config();
    if !cfg.reduction {
        return x.to_vec();
    }
    let w = arr(p, "reduction.weight");
    let b = arr(p, "reduction.bias");
    let mut e = vec![0.0; cfg.dim];
    for r in 0..cfg.dim {
        e[r] = b[r];
        for c in 0..cfg.input_dim {
            e[r] += w[r * cfg.input_dim + c] * x[c];
        }
    }
    e
}

pub fn oracle_primary(p: &HeadParameters, x: &[f64]) -> Vec<f64> {
    let cfg = p.config();
    let mut h = oracle_reduce(p, x);
    for layer in 0..2 {
        let w = arr(p, &format!("mlp.fc{}.weight", layer + 1));
        let b = arr(p, &format!("mlp.fc{}.bias", layer + 1));
        let scale = arr(p, &format!("mlp.bn{}.scale", layer + 1));
        let shift = arr(p, &format!("mlp.bn{}.shift", layer + 1));
        let mut next = vec![0.0; cfg.hidden];
        for j in 0..cfg.hidden {
            let mut z = b[j];
            for i in 0..h.len() {
                z += w[j * h.len() + i] * h[i];
            }
            let r = if z > 0.0 { z } else { 0.0 };
            let mean = p.batch_norm().mean[layer][j];
            let var = p.batch_norm().var[layer][j];
            next[j] = scale[j] * (r - mean) / (var + 1e-5).sqrt() + shift[j];
        }
        h = next;
    }
    let w = arr(p, "mlp.out.weight");
    let b = arr(p, "mlp.out.bias");
    let logits: Vec<f64> = (0..cfg.num_classes)
        .map(|c| b[c] + (0..cfg.hidden).map(|j| w[c * cfg.hidden + j] * h[j]).sum::<f64>())
        .collect();
    naive_softmax(&logits)
}

pub fn oracle_anchor_term(p: &HeadParameters, e: &[f64]) -> Vec<f64> {
    let cfg = p.config();
    let a = arr(p, "anchors");
    let d = cfg.dim;
    let mut t = vec![0.0; cfg.num_classes];
    let mut total = 0.0;
    for i in 0..cfg.num_classes {
        for j in 0..cfg.anchors_per_class {
            let mut sq = 0.0;
            for k in 0..d {
                let diff = e[k] - a[(i * cfg.anchors_per_class + j) * d + k];
                sq += diff * diff;
            }
            let w = (-sq.sqrt() / cfg.temperature).exp();
            t[i] += w;
            total += w;
        }
    }
    t.iter().map(|v| v / total).collect()
}

pub fn oracle_pool(p: &HeadParameters, e: &[f64]) -> Vec<f64> {
    let cfg = p.config();
    let (t, td, hd) = (cfg.tokens, cfg.dim / cfg.tokens, cfg.dim / cfg.tokens / cfg.heads);
    let proj = |name: &str, h: usize, tok: usize, r: usize| -> f64 {
        let w = arr(p, name);
        let mut s = 0.0;
        for c in 0..td {
            s += w[(h * hd + r) * td + c] * e[tok * td + c];
        }
        s
    };
    let mut pooled = Vec::new();
    for h in 0..cfg.heads {
        let mut out = vec![0.0; hd];
        for qi in 0..t {
            let mut logits = vec![0.0; t];
            for (ki, logit) in logits.iter_mut().enumerate() {
                for r in 0..hd {
                    *logit += proj("attention.query", h, qi, r) * proj("attention.key", h, ki, r);
                }
                *logit /= (hd as f64).sqrt();
            }
            let w = naive_softmax(&logits);
            for r in 0..hd {
                for ki in 0..t {
                    out[r] += w[ki] * proj("attention.value", h, ki, r) / t as f64;
                }
            }
        }
        pooled.extend(out);
    }
    pooled
}

pub fn oracle_attentive(p: &HeadParameters, e: &[f64]) -> Vec<f64> {
    let cfg = p.config();
    let pooled = oracle_pool(p, e);
    let w = arr(p, "attention.out");
    let logits: Vec<f64> = (0..cfg.num_classes)
        .map(|c| (0..pooled.len()).map(|j| w[c * pooled.len() + j] * pooled[j]).sum())
        .collect();
    naive_softmax(&logits)
}

pub fn oracle_final(p: &HeadParameters, x: &[f64]) -> Vec<f64> {
    let l = oracle_primary(p, x);
    let e = oracle_reduce(p, x);
    let ta = oracle_attentive(p, &e);
    let t = if p.config().anchors_per_class > 0 {
        naive_fuse(&oracle_anchor_term(p, &e), &ta)
    } else {
        ta
    };
    naive_fuse(&l, &t)
}

pub fn quadruple_loop_anchor_loss(p: &HeadParameters) -> f64 {
    let cfg = p.config();
    let (n, k) = (cfg.num_classes, cfg.anchors_per_class);
    let count = (n * k) as f64;
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..k {
            for u in 0..n {
                for v in 0..k {
                    if (i, j) == (u, v) {
                        continue;
                    }
                    let a = p.anchor(i, j);
                    let b = p.anchor(u, v);
                    sum += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                }
            }
        }
    }
    -sum / (count * (count - 1.0))
}

/// Batch mean of the explicit minimum over each sample's class anchors.
pub fn enumerated_center_loss(p: &HeadParameters, embs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let k = p.config().anchors_per_class;
    let mut total = 0.0;
    for (e, &y) in embs.iter().zip(labels) {
        let mut best = f64::INFINITY;
        for j in 0..k {
            let d: f64 = e.iter().zip(p.anchor(y, j)).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.min(d);
        }
        total += best;
    }
    total / embs.len() as f64
}
