use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::kernels::{gelu, gelu_grad, log_softmax_row, matmul, matmul_at_acc, matmul_bt_acc};
use super::params::{Layout, Params, Tensor};
use super::real::Real;
use super::TokenId;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Parameters and configuration of a pre-norm decoder-only transformer with
/// learned absolute positions, GELU feed-forward blocks and an untied output
/// head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState<F = f32> {
    pub config: ModelConfig,
    pub params: Params<F>,
    pub step_count: u64,
}

/// Per-position next-token log-probabilities, `rows × vocab`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbTable<F> {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<F>,
}

impl<F: Real> LogProbTable<F> {
    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }
}

#[derive(Debug, Clone)]
struct LnCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

#[derive(Debug, Clone)]
struct LayerCache<F> {
    ln1: LnCache<F>,
    h1: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    att: Vec<F>,
    ctx: Vec<F>,
    ln2: LnCache<F>,
    h2: Vec<F>,
    pre_act: Vec<F>,
    act: Vec<F>,
}

/// Activations retained by [`ModelState::forward_train`] for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache<F>>,
    lnf: LnCache<F>,
    hf: Vec<F>,
    pub log_probs: LogProbTable<F>,
}

impl<F: Real> ForwardCache<F> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl<F: Real> ModelState<F> {
    /// Fresh model, initialized deterministically from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 0.02;
        let resid_std = std / ((2 * config.n_layers) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let resid = Normal::new(0.0, resid_std).expect("valid std");
        let entries = Layout::shapes(&config)
            .into_iter()
            .map(|(name, shape)| {
                let mut t = Tensor::<F>::zeros(&shape);
                if name.ends_with(".gain") {
                    t.data.fill(F::one());
                } else if name.ends_with(".bias") || name.ends_with(".b_in") || name.ends_with(".b_out") {
                    // zeros
                } else {
                    let dist = if name.ends_with("attn.wo") || name.ends_with("mlp.w_out") {
                        &resid
                    } else {
                        &normal
                    };
                    for v in &mut t.data {
                        *v = F::from_f64_lossy(dist.sample(&mut rng));
                    }
                }
                (name, t)
            })
            .collect();
        Ok(Self {
            config,
            params: Params::new(entries),
            step_count: 0,
        })
    }

    /// A model whose output head is zero, so every next-token distribution
    /// is uniform.
    pub fn uniform(config: ModelConfig) -> Result<Self> {
        let mut m = Self::new(config)?;
        let head = Layout::new(config.n_layers).lm_head;
        m.params.at_mut(head).fill(F::zero());
        Ok(m)
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.config.n_layers)
    }

    pub fn cast<G: Real>(&self) -> ModelState<G> {
        ModelState {
            config: self.config,
            params: self.params.cast(),
            step_count: self.step_count,
        }
    }

    pub fn check_fits(&self, len: usize) -> Result<()> {
        if len > self.config.context_window {
            return Err(Error::ContextOverflow {
                len,
                window: self.config.context_window,
            });
        }
        Ok(())
    }

    /// Next-token log-probabilities at every position of `tokens`.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<LogProbTable<F>> {
        Ok(self.forward_train(tokens)?.log_probs)
    }

    /// Forward pass that keeps the activations needed by
    /// [`ModelState::backward_into`].
    pub fn forward_train(&self, tokens: &[TokenId]) -> Result<ForwardCache<F>> {
        self.check_fits(tokens.len())?;
        let cfg = &self.config;
        let lay = self.layout();
        let (t_len, d, ff, v_sz) = (tokens.len(), cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let p = &self.params;

        let mut x = vec![F::zero(); t_len * d];
        let tok = p.at(lay.tok_emb);
        let pos = p.at(lay.pos_emb);
        for (t, &id) in tokens.iter().enumerate() {
            let id = id as usize;
            if id >= v_sz {
                return Err(Error::ShapeError(format!("token id {id} >= vocab {v_sz}")));
            }
            let row = &mut x[t * d..(t + 1) * d];
            for j in 0..d {
                row[j] = tok[id * d + j] + pos[t * d + j];
            }
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for slots in &lay.layers {
            let (h1, ln1) = layer_norm(&x, p.at(slots.ln1_gain), p.at(slots.ln1_bias), d);
            let mut q = vec![F::zero(); t_len * d];
            let mut k = vec![F::zero(); t_len * d];
            let mut v = vec![F::zero(); t_len * d];
            matmul(&mut q, &h1, p.at(slots.wq), t_len, d, d);
            matmul(&mut k, &h1, p.at(slots.wk), t_len, d, d);
            matmul(&mut v, &h1, p.at(slots.wv), t_len, d, d);
            let (att, ctx) = causal_attention(&q, &k, &v, t_len, d, cfg.n_heads);
            let mut proj = vec![F::zero(); t_len * d];
            matmul(&mut proj, &ctx, p.at(slots.wo), t_len, d, d);
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += *pi;
            }

            let (h2, ln2) = layer_norm(&x, p.at(slots.ln2_gain), p.at(slots.ln2_bias), d);
            let mut pre_act = vec![F::zero(); t_len * ff];
            matmul(&mut pre_act, &h2, p.at(slots.w_in), t_len, d, ff);
            let b_in = p.at(slots.b_in);
            for row in pre_act.chunks_mut(ff) {
                for (u, &b) in row.iter_mut().zip(b_in) {
                    *u += b;
                }
            }
            let act: Vec<F> = pre_act.iter().map(|&u| gelu(u)).collect();
            let mut mlp = vec![F::zero(); t_len * d];
            matmul(&mut mlp, &act, p.at(slots.w_out), t_len, ff, d);
            let b_out = p.at(slots.b_out);
            for (row, mrow) in x.chunks_mut(d).zip(mlp.chunks(d)) {
                for j in 0..d {
                    row[j] += mrow[j] + b_out[j];
                }
            }
            layers.push(LayerCache {
                ln1,
                h1,
                q,
                k,
                v,
                att,
                ctx,
                ln2,
                h2,
                pre_act,
                act,
            });
        }

        let (hf, lnf) = layer_norm(&x, p.at(lay.lnf_gain), p.at(lay.lnf_bias), d);
        let mut logits = vec![F::zero(); t_len * v_sz];
        matmul(&mut logits, &hf, p.at(lay.lm_head), t_len, d, v_sz);
        for row in logits.chunks_mut(v_sz) {
            log_softmax_row(row);
        }
        Ok(ForwardCache {
            tokens: tokens.to_vec(),
            layers,
            lnf,
            hf,
            log_probs: LogProbTable {
                rows: t_len,
                vocab: v_sz,
                data: logits,
            },
        })
    }

    /// Accumulates into `grads` the gradient of a scalar objective whose
    /// derivative with respect to the pre-softmax logits is `dlogits`
    /// (`len × vocab`).
    pub fn backward_into(&self, cache: &ForwardCache<F>, dlogits: &[F], grads: &mut Params<F>) {
        let cfg = &self.config;
        let lay = self.layout();
        let (t_len, d, ff, v_sz) = (cache.len(), cfg.d_model, cfg.d_ff, cfg.vocab_size);
        debug_assert_eq!(dlogits.len(), t_len * v_sz);
        let p = &self.params;

        matmul_at_acc(grads.at_mut(lay.lm_head), &cache.hf, dlogits, t_len, d, v_sz);
        let mut dhf = vec![F::zero(); t_len * d];
        matmul_bt_acc(&mut dhf, dlogits, p.at(lay.lm_head), t_len, d, v_sz);
        let mut dx = layer_norm_backward(
            &dhf,
            &cache.lnf,
            p.at(lay.lnf_gain),
            grads,
            lay.lnf_gain,
            lay.lnf_bias,
            d,
        );

        for (slots, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // feed-forward block; dx is the gradient w.r.t. the block output
            {
                let db = grads.at_mut(slots.b_out);
                for row in dx.chunks(d) {
                    for j in 0..d {
                        db[j] += row[j];
                    }
                }
            }
            matmul_at_acc(grads.at_mut(slots.w_out), &lc.act, &dx, t_len, ff, d);
            let mut dact = vec![F::zero(); t_len * ff];
            matmul_bt_acc(&mut dact, &dx, p.at(slots.w_out), t_len, ff, d);
            for (g, &u) in dact.iter_mut().zip(&lc.pre_act) {
                *g *= gelu_grad(u);
            }
            {
                let db = grads.at_mut(slots.b_in);
                for row in dact.chunks(ff) {
                    for j in 0..ff {
                        db[j] += row[j];
                    }
                }
            }
            matmul_at_acc(grads.at_mut(slots.w_in), &lc.h2, &dact, t_len, d, ff);
            let mut dh2 = vec![F::zero(); t_len * d];
            matmul_bt_acc(&mut dh2, &dact, p.at(slots.w_in), t_len, d, ff);
            let dres = layer_norm_backward(
                &dh2,
                &lc.ln2,
                p.at(slots.ln2_gain),
                grads,
                slots.ln2_gain,
                slots.ln2_bias,
                d,
            );
            for (a, b) in dx.iter_mut().zip(&dres) {
                *a += *b;
            }

            // attention block
            matmul_at_acc(grads.at_mut(slots.wo), &lc.ctx, &dx, t_len, d, d);
            let mut dctx = vec![F::zero(); t_len * d];
            matmul_bt_acc(&mut dctx, &dx, p.at(slots.wo), t_len, d, d);
            let (dq, dk, dv) =
                causal_attention_backward(&dctx, &lc.q, &lc.k, &lc.v, &lc.att, t_len, d, cfg.n_heads);
            matmul_at_acc(grads.at_mut(slots.wq), &lc.h1, &dq, t_len, d, d);
            matmul_at_acc(grads.at_mut(slots.wk), &lc.h1, &dk, t_len, d, d);
            matmul_at_acc(grads.at_mut(slots.wv), &lc.h1, &dv, t_len, d, d);
            let mut dh1 = vec![F::zero(); t_len * d];
            matmul_bt_acc(&mut dh1, &dq, p.at(slots.wq), t_len, d, d);
            matmul_bt_acc(&mut dh1, &dk, p.at(slots.wk), t_len, d, d);
            matmul_bt_acc(&mut dh1, &dv, p.at(slots.wv), t_len, d, d);
            let dres = layer_norm_backward(
                &dh1,
                &lc.ln1,
                p.at(slots.ln1_gain),
                grads,
                slots.ln1_gain,
                slots.ln1_bias,
                d,
            );
            for (a, b) in dx.iter_mut().zip(&dres) {
                *a += *b;
            }
        }

        {
            let dtok = grads.at_mut(lay.tok_emb);
            for (t, &id) in cache.tokens.iter().enumerate() {
                let id = id as usize;
                for j in 0..d {
                    dtok[id * d + j] += dx[t * d + j];
                }
            }
        }
        let dpos = grads.at_mut(lay.pos_emb);
        for t in 0..t_len {
            for j in 0..d {
                dpos[t * d + j] += dx[t * d + j];
            }
        }
    }
}

fn layer_norm<F: Real>(x: &[F], gain: &[F], bias: &[F], d: usize) -> (Vec<F>, LnCache<F>) {
    let rows = x.len() / d;
    let mut out = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); rows];
    let inv_d = F::one() / F::from_usize(d).unwrap();
    let eps = F::from_f64_lossy(LN_EPS);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (out, LnCache { xhat, rstd })
}

fn layer_norm_backward<F: Real>(
    dy: &[F],
    cache: &LnCache<F>,
    gain: &[F],
    grads: &mut Params<F>,
    gain_idx: usize,
    bias_idx: usize,
    d: usize,
) -> Vec<F> {
    let rows = dy.len() / d;
    {
        let dg = grads.at_mut(gain_idx);
        for r in 0..rows {
            for j in 0..d {
                dg[j] += dy[r * d + j] * cache.xhat[r * d + j];
            }
        }
    }
    {
        let db = grads.at_mut(bias_idx);
        for r in 0..rows {
            for j in 0..d {
                db[j] += dy[r * d + j];
            }
        }
    }
    let inv_d = F::one() / F::from_usize(d).unwrap();
    let mut dx = vec![F::zero(); dy.len()];
    for r in 0..rows {
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for j in 0..d {
            let g = dy[r * d + j] * gain[j];
            mean_dxhat += g;
            mean_dxhat_xhat += g * cache.xhat[r * d + j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rs = cache.rstd[r];
        for j in 0..d {
            let g = dy[r * d + j] * gain[j];
            dx[r * d + j] = rs * (g - mean_dxhat - cache.xhat[r * d + j] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Returns (attention probabilities `heads × T × T`, context `T × d`).
fn causal_attention<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    t_len: usize,
    d: usize,
    heads: usize,
) -> (Vec<F>, Vec<F>) {
    let hd = d / heads;
    let scale = F::one() / F::from_usize(hd).unwrap().sqrt();
    let mut att = vec![F::zero(); heads * t_len * t_len];
    let mut ctx = vec![F::zero(); t_len * d];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..t_len {
            let qi = &q[i * d + off..i * d + off + hd];
            let arow = &mut att[(h * t_len + i) * t_len..(h * t_len + i + 1) * t_len];
            let mut max = F::neg_infinity();
            for j in 0..=i {
                let kj = &k[j * d + off..j * d + off + hd];
                let s = super::kernels::dot(qi, kj) * scale;
                arow[j] = s;
                if s > max {
                    max = s;
                }
            }
            let mut sum = F::zero();
            for a in arow.iter_mut().take(i + 1) {
                *a = (*a - max).exp();
                sum += *a;
            }
            let inv = F::one() / sum;
            let out = &mut ctx[i * d + off..i * d + off + hd];
            for j in 0..=i {
                arow[j] *= inv;
                let a = arow[j];
                let vj = &v[j * d + off..j * d + off + hd];
                for c in 0..hd {
                    out[c] += a * vj[c];
                }
            }
        }
    }
    (att, ctx)
}

#[allow(clippy::too_many_arguments)]
fn causal_attention_backward<F: Real>(
    dctx: &[F],
    q: &[F],
    k: &[F],
    v: &[F],
    att: &[F],
    t_len: usize,
    d: usize,
    heads: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let hd = d / heads;
    let scale = F::one() / F::from_usize(hd).unwrap().sqrt();
    let mut dq = vec![F::zero(); t_len * d];
    let mut dk = vec![F::zero(); t_len * d];
    let mut dv = vec![F::zero(); t_len * d];
    let mut da = vec![F::zero(); t_len];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..t_len {
            let arow = &att[(h * t_len + i) * t_len..(h * t_len + i + 1) * t_len];
            let gi = &dctx[i * d + off..i * d + off + hd];
            let mut weighted = F::zero();
            for j in 0..=i {
                let vj = &v[j * d + off..j * d + off + hd];
                da[j] = super::kernels::dot(gi, vj);
                weighted += arow[j] * da[j];
                let dvj = &mut dv[j * d + off..j * d + off + hd];
                for c in 0..hd {
                    dvj[c] += arow[j] * gi[c];
                }
            }
            for j in 0..=i {
                let ds = arow[j] * (da[j] - weighted) * scale;
                if ds == F::zero() {
                    continue;
                }
                for c in 0..hd {
                    dq[i * d + off + c] += ds * k[j * d + off + c];
                    dk[j * d + off + c] += ds * q[i * d + off + c];
                }
            }
        }
    }
    (dq, dk, dv)
}
