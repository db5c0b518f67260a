//! Shared test oracles: a dense Jacobi SVD, an independently hand-assembled
//! reference transformer forward, unrolled EMA weights, and a synthetic
//! structured-text corpus for desk-scale training runs.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use desklm::data::{byte_tokenize, TokenShard, BYTE_VOCAB};

// ── one-sided Jacobi SVD ────────────────────────────────────────────────

pub struct Svd {
    pub u: Vec<f64>,     // m x r (r = min(m,n)), column-orthonormal
    pub sigma: Vec<f64>, // r
    pub vt: Vec<f64>,    // r x n, row-orthonormal
    pub m: usize,
    pub n: usize,
}

/// One-sided Jacobi SVD; cubic but exact enough for oracle duty on small
/// matrices. Works on the transpose when m < n.
pub fn jacobi_svd(a: &[f64], m: usize, n: usize) -> Svd {
    if m < n {
        let mut at = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                at[j * m + i] = a[i * n + j];
            }
        }
        let svd = jacobi_svd(&at, n, m);
        // A = (AT)^T = (U S V^T)^T = V S U^T
        let r = svd.sigma.len();
        let mut u = vec![0.0; m * r];
        for i in 0..m {
            for k in 0..r {
                u[i * r + k] = svd.vt[k * m + i];
            }
        }
        let mut vt = vec![0.0; r * n];
        for k in 0..r {
            for j in 0..n {
                vt[k * n + j] = svd.u[j * r + k];
            }
        }
        return Svd { u, sigma: svd.sigma, vt, m, n };
    }

    // columns of work = columns of A; V accumulates the rotations
    let mut work = a.to_vec(); // m x n row-major
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let col_dot = |w: &[f64], i: usize, j: usize| -> f64 {
        (0..m).map(|r| w[r * n + i] * w[r * n + j]).sum()
    };
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                let aii = col_dot(&work, i, i);
                let ajj = col_dot(&work, j, j);
                let aij = col_dot(&work, i, j);
                off = off.max(aij.abs() / (aii * ajj).sqrt().max(1e-300));
                if aij.abs() < 1e-15 * (aii * ajj).sqrt().max(1e-300) {
                    continue;
                }
                let tau = (ajj - aii) / (2.0 * aij);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let wi = work[r * n + i];
                    let wj = work[r * n + j];
                    work[r * n + i] = c * wi - s * wj;
                    work[r * n + j] = s * wi + c * wj;
                }
                for r in 0..n {
                    let vi = v[r * n + i];
                    let vj = v[r * n + j];
                    v[r * n + i] = c * vi - s * vj;
                    v[r * n + j] = s * vi + c * vj;
                }
            }
        }
        if off < 1e-14 {
            break;
        }
    }
    let mut sigma = vec![0.0; n];
    let mut u = vec![0.0; m * n];
    for j in 0..n {
        let norm = (0..m).map(|r| work[r * n + j] * work[r * n + j]).sum::<f64>().sqrt();
        sigma[j] = norm;
        if norm > 0.0 {
            for r in 0..m {
                u[r * n + j] = work[r * n + j] / norm;
            }
        }
    }
    let mut vt = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            vt[i * n + j] = v[j * n + i];
        }
    }
    Svd { u, sigma, vt, m, n }
}

impl Svd {
    /// Polar factor U·Vᵀ (m x n).
    pub fn polar(&self) -> Vec<f64> {
        let r = self.sigma.len();
        let mut out = vec![0.0; self.m * self.n];
        for i in 0..self.m {
            for j in 0..self.n {
                let mut s = 0.0;
                for k in 0..r {
                    s += self.u[i * r + k] * self.vt[k * self.n + j];
                }
                out[i * self.n + j] = s;
            }
        }
        out
    }

    /// Max |A - U Σ Vᵀ| entry, a self-check that the oracle factored A.
    pub fn reconstruction_error(&self, a: &[f64]) -> f64 {
        let r = self.sigma.len();
        let mut worst = 0.0f64;
        for i in 0..self.m {
            for j in 0..self.n {
                let mut s = 0.0;
                for k in 0..r {
                    s += self.u[i * r + k] * self.sigma[k] * self.vt[k * self.n + j];
                }
                worst = worst.max((s - a[i * self.n + j]).abs());
            }
        }
        worst
    }
}

/// Random m x n matrix with prescribed condition number via A = U Σ Vᵀ.
pub fn random_conditioned(rng: &mut ChaCha8Rng, m: usize, n: usize, cond: f64) -> Vec<f64> {
    let r = m.min(n);
    // random Gaussian, then orthonormalize columns (Gram-Schmidt)
    let basis = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut q = vec![0.0; rows * cols];
        for j in 0..cols {
            let mut col: Vec<f64> =
                (0..rows).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            for prev in 0..j {
                let dot: f64 = (0..rows).map(|i| q[i * cols + prev] * col[i]).sum();
                for i in 0..rows {
                    col[i] -= dot * q[i * cols + prev];
                }
            }
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for i in 0..rows {
                q[i * cols + j] = col[i] / norm;
            }
        }
        q
    };
    let u = basis(m, r, rng);
    let v = basis(n, r, rng);
    // log-uniform singular values in [1/cond, 1]
    let mut sigma: Vec<f64> =
        (0..r).map(|_| (-rng.gen_range(0.0..cond.ln())).exp()).collect();
    sigma[0] = 1.0;
    if r > 1 {
        sigma[1] = 1.0 / cond; // pin the extremes so cond(A) == cond exactly
    }
    let mut a = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..r {
                s += u[i * r + k] * sigma[k] * v[j * r + k];
            }
            a[i * n + j] = s;
        }
    }
    a
}

// ── reference transformer forward (independent implementation) ─────────

/// Plain pre-norm decoder block forward with Eq.-1 attention, written as
/// straight loops against raw weight slices. No code shared with the graph
/// path; used to pin down the all-toggles-off model.
pub struct RefWeights {
    pub d: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub rope_theta: f64,
    pub embedding: Vec<f64>,  // (V, d)
    pub layers: Vec<RefLayer>,
    pub final_gain: Vec<f64>, // (d,)
    pub lm_head: Vec<f64>,    // (V, d)
}

pub struct RefLayer {
    pub attn_gain: Vec<f64>,
    pub ffn_gain: Vec<f64>,
    pub wq: Vec<f64>, // (n_h*d_h, d)
    pub wk: Vec<f64>, // (kv, d)
    pub wv: Vec<f64>, // (kv, d)
    pub wo: Vec<f64>, // (d, n_h*d_h)
    pub w1: Vec<f64>, // (ffn, d)
    pub w2: Vec<f64>, // (d, ffn)
    pub w3: Vec<f64>, // (ffn, d)
}

const REF_RMS_EPS: f64 = 1e-6;

fn ref_rmsnorm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + REF_RMS_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * r * g).collect()
}

/// y = W x with W stored (out, in).
fn ref_proj(w: &[f64], x: &[f64], out: usize, inp: usize) -> Vec<f64> {
    (0..out)
        .map(|o| (0..inp).map(|i| w[o * inp + i] * x[i]).sum())
        .collect()
}

fn ref_rope(x: &mut [f64], pos: usize, theta: f64) {
    let d = x.len();
    for p in 0..d / 2 {
        let freq = theta.powf(-((2 * p) as f64) / d as f64);
        let (s, c) = ((pos as f64) * freq).sin_cos();
        let (a, b) = (x[2 * p], x[2 * p + 1]);
        x[2 * p] = a * c - b * s;
        x[2 * p + 1] = a * s + b * c;
    }
}

impl RefWeights {
    /// Logits for a single sequence (t, vocab), flattened row-major.
    pub fn forward(&self, ids: &[usize]) -> Vec<f64> {
        let t = ids.len();
        let d = self.d;
        let dh = self.head_dim;
        let group = self.n_heads / self.n_kv_heads;
        let mut x: Vec<Vec<f64>> =
            ids.iter().map(|&id| self.embedding[id * d..(id + 1) * d].to_vec()).collect();
        for layer in &self.layers {
            // attention sublayer
            let normed: Vec<Vec<f64>> =
                x.iter().map(|row| ref_rmsnorm(row, &layer.attn_gain)).collect();
            let qd = self.n_heads * dh;
            let kvd = self.n_kv_heads * dh;
            let mut qs: Vec<Vec<f64>> = Vec::with_capacity(t);
            let mut ks: Vec<Vec<f64>> = Vec::with_capacity(t);
            let mut vs: Vec<Vec<f64>> = Vec::with_capacity(t);
            for (pos, h) in normed.iter().enumerate() {
                let mut q = ref_proj(&layer.wq, h, qd, d);
                let mut k = ref_proj(&layer.wk, h, kvd, d);
                let v = ref_proj(&layer.wv, h, kvd, d);
                for hh in 0..self.n_heads {
                    ref_rope(&mut q[hh * dh..(hh + 1) * dh], pos, self.rope_theta);
                }
                for kh in 0..self.n_kv_heads {
                    ref_rope(&mut k[kh * dh..(kh + 1) * dh], pos, self.rope_theta);
                }
                qs.push(q);
                ks.push(k);
                vs.push(v);
            }
            for i in 0..t {
                let mut cat = vec![0.0; qd];
                for hh in 0..self.n_heads {
                    let kv = hh / group;
                    let q = &qs[i][hh * dh..(hh + 1) * dh];
                    let mut logits = Vec::with_capacity(i + 1);
                    for j in 0..=i {
                        let k = &ks[j][kv * dh..(kv + 1) * dh];
                        let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
                        logits.push(dot / (dh as f64).sqrt());
                    }
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for j in 0..=i {
                        let p = exps[j] / z;
                        let v = &vs[j][kv * dh..(kv + 1) * dh];
                        for (c, &vv) in cat[hh * dh..(hh + 1) * dh].iter_mut().zip(v) {
                            *c += p * vv;
                        }
                    }
                }
                let proj = ref_proj(&layer.wo, &cat, d, qd);
                for (xi, pi) in x[i].iter_mut().zip(&proj) {
                    *xi += pi;
                }
            }
            // feed-forward sublayer
            for row in x.iter_mut() {
                let h = ref_rmsnorm(row, &layer.ffn_gain);
                let a = ref_proj(&layer.w1, &h, self.ffn, d);
                let b = ref_proj(&layer.w3, &h, self.ffn, d);
                let gated: Vec<f64> = a
                    .iter()
                    .zip(&b)
                    .map(|(&av, &bv)| av / (1.0 + (-av).exp()) * bv)
                    .collect();
                let out = ref_proj(&layer.w2, &gated, d, self.ffn);
                for (xi, oi) in row.iter_mut().zip(&out) {
                    *xi += oi;
                }
            }
        }
        let mut logits = Vec::with_capacity(t * self.vocab);
        for row in &x {
            let fin = ref_rmsnorm(row, &self.final_gain);
            logits.extend(ref_proj(&self.lm_head, &fin, self.vocab, d));
        }
        logits
    }
}

/// Extracts reference weights from a trained/initialized model.
pub fn ref_weights_from_model(model: &desklm::model::ModelParams<f64>) -> RefWeights {
    let c = &model.config;
    let layers = model
        .layers
        .iter()
        .map(|l| RefLayer {
            attn_gain: l.attn_norm_gain.to_vec(),
            ffn_gain: l.ffn_norm_gain.to_vec(),
            wq: l.w_q.to_vec(),
            wk: l.w_k.to_vec(),
            wv: l.w_v.to_vec(),
            wo: l.w_o.to_vec(),
            w1: l.w1.to_vec(),
            w2: l.w2.to_vec(),
            w3: l.w3.to_vec(),
        })
        .collect();
    RefWeights {
        d: c.d_model,
        n_heads: c.n_heads,
        n_kv_heads: c.n_kv_heads,
        head_dim: c.head_dim,
        ffn: c.ffn_dim,
        vocab: c.vocab_size,
        rope_theta: c.rope_theta,
        embedding: model.embedding.to_vec(),
        layers,
        final_gain: model.final_norm_gain.to_vec(),
        lm_head: model.lm_head.to_vec(),
    }
}

// ── unrolled EMA weights ────────────────────────────────────────────────

/// Explicit weights of `e <- c₁; e <- β e + (1-β) cᵢ`:
/// w₁ = β^(n-1), wᵢ = (1-β)·β^(n-i) for i >= 2.
pub fn unrolled_ema_weights(n: usize, beta: f64) -> Vec<f64> {
    (1..=n)
        .map(|i| {
            if i == 1 {
                beta.powi((n - 1) as i32)
            } else {
                (1.0 - beta) * beta.powi((n - i) as i32)
            }
        })
        .collect()
}

// ── synthetic structured corpus ─────────────────────────────────────────

fn lexicon(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let onsets = ["b", "c", "d", "f", "g", "l", "m", "n", "p", "r", "s", "t", "v", "st", "tr"];
    let vowels = ["a", "e", "i", "o", "u"];
    let codas = ["", "n", "r", "s", "t", "l"];
    let mut words = Vec::with_capacity(n);
    while words.len() < n {
        let syllables = rng.gen_range(1..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(onsets[rng.gen_range(0..onsets.len())]);
            w.push_str(vowels[rng.gen_range(0..vowels.len())]);
            w.push_str(codas[rng.gen_range(0..codas.len())]);
        }
        if !words.contains(&w) {
            words.push(w);
        }
    }
    words
}

fn zipf_pick<'a>(rng: &mut ChaCha8Rng, words: &'a [String]) -> &'a str {
    // approximate Zipf by squaring a uniform draw
    let u: f64 = rng.gen_range(0.0f64..1.0);
    let idx = ((u * u) * words.len() as f64) as usize;
    &words[idx.min(words.len() - 1)]
}

fn web_doc(rng: &mut ChaCha8Rng, words: &[String]) -> String {
    let n_topic = rng.gen_range(4..9);
    let topic: Vec<&String> =
        (0..n_topic).map(|_| &words[rng.gen_range(0..words.len())]).collect();
    let verbs = ["makes", "holds", "finds", "turns", "keeps", "shows", "takes"];
    let n_sentences = rng.gen_range(4..18);
    let mut doc = String::new();
    for _ in 0..n_sentences {
        let subject =
            if rng.gen_bool(0.6) { topic[rng.gen_range(0..topic.len())] } else { zipf_pick(rng, words) };
        let object =
            if rng.gen_bool(0.6) { topic[rng.gen_range(0..topic.len())] } else { zipf_pick(rng, words) };
        let verb = verbs[rng.gen_range(0..verbs.len())];
        doc.push_str("the ");
        doc.push_str(subject);
        doc.push(' ');
        doc.push_str(verb);
        doc.push_str(" the ");
        doc.push_str(object);
        if rng.gen_bool(0.4) {
            doc.push_str(" of ");
            doc.push_str(zipf_pick(rng, words));
        }
        doc.push_str(". ");
    }
    doc
}

fn code_doc(rng: &mut ChaCha8Rng, words: &[String]) -> String {
    let n_vars = rng.gen_range(2..6);
    let vars: Vec<String> = (0..n_vars).map(|i| format!("{}{}", zipf_pick(rng, words), i)).collect();
    let mut doc = String::new();
    for _ in 0..rng.gen_range(3..12) {
        match rng.gen_range(0..3) {
            0 => {
                let v = &vars[rng.gen_range(0..vars.len())];
                doc.push_str(&format!("let {} = {};\n", v, rng.gen_range(0..100)));
            }
            1 => {
                let a = &vars[rng.gen_range(0..vars.len())];
                let b = &vars[rng.gen_range(0..vars.len())];
                doc.push_str(&format!("{} = {} + {};\n", a, a, b));
            }
            _ => {
                let f = zipf_pick(rng, words);
                let v = &vars[rng.gen_range(0..vars.len())];
                doc.push_str(&format!("fn {}({}) {{ return {} * 2; }}\n", f, v, v));
            }
        }
    }
    doc
}

fn math_doc(rng: &mut ChaCha8Rng) -> String {
    let mut doc = String::new();
    for _ in 0..rng.gen_range(4..16) {
        let a = rng.gen_range(0..90);
        let b = rng.gen_range(0..90);
        if rng.gen_bool(0.5) {
            doc.push_str(&format!("{} + {} = {}. ", a, b, a + b));
        } else {
            doc.push_str(&format!("{} * {} = {}. ", a % 12, b % 12, (a % 12) * (b % 12)));
        }
    }
    doc
}

/// Deterministic three-source corpus with quality scores and natural
/// length variation, tokenized at byte level.
pub fn synth_shards(seed: u64, docs_per_source: usize) -> Vec<TokenShard> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = lexicon(&mut rng, 220);
    let mut shards = Vec::new();
    for source in ["web", "code", "math"] {
        let mut shard = TokenShard::new(source, BYTE_VOCAB);
        for _ in 0..docs_per_source {
            let text = match source {
                "web" => web_doc(&mut rng, &words),
                "code" => code_doc(&mut rng, &words),
                _ => math_doc(&mut rng),
            };
            let quality = Some(rng.gen_range(0.0f32..5.0));
            shard.push_doc(&byte_tokenize(&text), text.chars().count() as u64, quality);
        }
        shards.push(shard);
    }
    shards
}

/// Total token count across shards.
pub fn shard_tokens(shards: &[TokenShard]) -> usize {
    shards.iter().map(|s| s.token_ids.len()).sum()
}
