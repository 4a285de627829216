use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::GenerationConfig;
use super::kernels::{dot, gelu, log_softmax_row, matmul};
use super::model::ModelState;
use super::params::Layout;
use super::real::Real;
use super::TokenId;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    /// A stop token was produced (and is included in the output).
    Stop,
    MaxNewTokens,
    ContextFull,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub finish: FinishReason,
}

impl Generation {
    pub fn truncated(&self) -> bool {
        self.finish != FinishReason::Stop
    }
}

/// Incremental decoder that caches keys and values so each new token costs
/// one position of compute.
pub struct Decoder<'a, F: Real> {
    model: &'a ModelState<F>,
    layout: Layout,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    len: usize,
}

impl<'a, F: Real> Decoder<'a, F> {
    pub fn new(model: &'a ModelState<F>) -> Self {
        let n = model.config.context_window * model.config.d_model;
        Self {
            model,
            layout: model.layout(),
            keys: vec![Vec::with_capacity(n); model.config.n_layers],
            values: vec![Vec::with_capacity(n); model.config.n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `token` and returns the log-distribution of the next token.
    pub fn push(&mut self, token: TokenId) -> Result<Vec<F>> {
        let m = self.model;
        let cfg = &m.config;
        m.check_fits(self.len + 1)?;
        let (d, ff, v_sz, heads) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_heads);
        let hd = d / heads;
        let p = &m.params;
        let lay = &self.layout;
        let id = token as usize;
        if id >= v_sz {
            return Err(crate::Error::ShapeError(format!("token id {id} >= vocab {v_sz}")));
        }
        let pos = self.len;
        let mut x: Vec<F> = (0..d)
            .map(|j| p.at(lay.tok_emb)[id * d + j] + p.at(lay.pos_emb)[pos * d + j])
            .collect();
        let scale = F::one() / F::from_usize(hd).unwrap().sqrt();
        for (l, s) in lay.layers.iter().enumerate() {
            let h1 = layer_norm_vec(&x, p.at(s.ln1_gain), p.at(s.ln1_bias));
            let mut q = vec![F::zero(); d];
            let mut k = vec![F::zero(); d];
            let mut v = vec![F::zero(); d];
            matmul(&mut q, &h1, p.at(s.wq), 1, d, d);
            matmul(&mut k, &h1, p.at(s.wk), 1, d, d);
            matmul(&mut v, &h1, p.at(s.wv), 1, d, d);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let (kc, vc) = (&self.keys[l], &self.values[l]);
            let mut ctx = vec![F::zero(); d];
            let mut scores = vec![F::zero(); pos + 1];
            for h in 0..heads {
                let off = h * hd;
                let qh = &q[off..off + hd];
                let mut max = F::neg_infinity();
                for (j, sc) in scores.iter_mut().enumerate() {
                    *sc = dot(qh, &kc[j * d + off..j * d + off + hd]) * scale;
                    max = max.max(*sc);
                }
                let mut sum = F::zero();
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    sum += *sc;
                }
                let inv = F::one() / sum;
                for (j, &sc) in scores.iter().enumerate() {
                    let a = sc * inv;
                    for c in 0..hd {
                        ctx[off + c] += a * vc[j * d + off + c];
                    }
                }
            }
            let mut proj = vec![F::zero(); d];
            matmul(&mut proj, &ctx, p.at(s.wo), 1, d, d);
            for (a, b) in x.iter_mut().zip(&proj) {
                *a += *b;
            }
            let h2 = layer_norm_vec(&x, p.at(s.ln2_gain), p.at(s.ln2_bias));
            let mut u = vec![F::zero(); ff];
            matmul(&mut u, &h2, p.at(s.w_in), 1, d, ff);
            for (ui, &b) in u.iter_mut().zip(p.at(s.b_in)) {
                *ui = gelu(*ui + b);
            }
            let mut out = vec![F::zero(); d];
            matmul(&mut out, &u, p.at(s.w_out), 1, ff, d);
            for j in 0..d {
                x[j] += out[j] + p.at(s.b_out)[j];
            }
        }
        let hf = layer_norm_vec(&x, p.at(lay.lnf_gain), p.at(lay.lnf_bias));
        let mut logits = vec![F::zero(); v_sz];
        matmul(&mut logits, &hf, p.at(lay.lm_head), 1, d, v_sz);
        log_softmax_row(&mut logits);
        self.len += 1;
        Ok(logits)
    }
}

fn layer_norm_vec<F: Real>(x: &[F], gain: &[F], bias: &[F]) -> Vec<F> {
    let d = x.len();
    let inv_d = F::one() / F::from_usize(d).unwrap();
    let mean = x.iter().copied().sum::<F>() * inv_d;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
    let rs = F::one() / (var + F::from_f64_lossy(1e-5)).sqrt();
    (0..d).map(|j| (x[j] - mean) * rs * gain[j] + bias[j]).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Draws one token from a log-distribution after temperature scaling and
/// nucleus filtering.
pub fn draw_token<F: Real, R: Rng>(log_probs: &[F], cfg: &GenerationConfig, rng: &mut R) -> usize {
    if cfg.greedy {
        return argmax(log_probs);
    }
    let inv_t = 1.0 / cfg.temperature;
    let max = log_probs
        .iter()
        .map(|v| v.as_f64() * inv_t)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = log_probs
        .iter()
        .map(|v| (v.as_f64() * inv_t - max).exp())
        .collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    let u: f64 = rng.random();
    if cfg.top_p >= 1.0 {
        return sample_index(&probs, u);
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        kept.push(i);
        mass += probs[i];
        if mass >= cfg.top_p {
            break;
        }
    }
    let nucleus: Vec<f64> = kept.iter().map(|&i| probs[i] / mass).collect();
    kept[sample_index(&nucleus, u)]
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the cumulative sum: take the last non-zero entry.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Samples a continuation of `prefix`. Stops after emitting any token in
/// `stop_tokens`, after `max_new_tokens`, or when the context is full.
pub fn sample<F: Real>(
    model: &ModelState<F>,
    prefix: &[TokenId],
    cfg: &GenerationConfig,
    stop_tokens: &[TokenId],
) -> Result<Generation> {
    cfg.validate()?;
    model.check_fits(prefix.len())?;
    if prefix.is_empty() {
        return Err(crate::Error::ShapeError("empty prefix".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut dec = Decoder::new(model);
    let mut next = Vec::new();
    for &t in prefix {
        next = dec.push(t)?;
    }
    let window = model.config.context_window;
    let mut out = Vec::new();
    loop {
        if out.len() >= cfg.max_new_tokens {
            return Ok(Generation {
                tokens: out,
                finish: FinishReason::MaxNewTokens,
            });
        }
        if prefix.len() + out.len() >= window {
            return Ok(Generation {
                tokens: out,
                finish: FinishReason::ContextFull,
            });
        }
        let tok = draw_token(&next, cfg, &mut rng) as TokenId;
        out.push(tok);
        if stop_tokens.contains(&tok) {
            return Ok(Generation {
                tokens: out,
                finish: FinishReason::Stop,
            });
        }
        if prefix.len() + out.len() < window {
            next = dec.push(tok)?;
        }
    }
}
