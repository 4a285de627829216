use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::real::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::from_f64_lossy(x.as_f64())).collect(),
        }
    }
}

/// Ordered collection of named tensors. The order is fixed by the model
/// layout, so parameters, gradients and optimizer moments line up by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params<F> {
    entries: Vec<(String, Tensor<F>)>,
}

impl<F: Real> Params<F> {
    pub fn new(entries: Vec<(String, Tensor<F>)>) -> Self {
        Self { entries }
    }

    pub fn zeros_like(other: &Params<F>) -> Self {
        Self {
            entries: other
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(&t.shape)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    #[inline]
    pub fn at(&self, idx: usize) -> &[F] {
        &self.entries[idx].1.data
    }

    #[inline]
    pub fn at_mut(&mut self, idx: usize) -> &mut [F] {
        &mut self.entries[idx].1.data
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<F> {
        &self.entries[idx].1
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }

    /// Euclidean norm over every scalar, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: F) {
        for (_, t) in &mut self.entries {
            for v in &mut t.data {
                *v *= factor;
            }
        }
    }

    /// `self += other`, index by index.
    pub fn add_assign(&mut self, other: &Params<F>) -> Result<()> {
        self.check_same_layout(other)?;
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn check_same_layout(&self, other: &Params<F>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::ShapeError(format!(
                "{} tensors vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, a), (nb, b)) in self.entries.iter().zip(&other.entries) {
            if na != nb || a.shape != b.shape {
                return Err(Error::ShapeError(format!(
                    "{na}{:?} vs {nb}{:?}",
                    a.shape, b.shape
                )));
            }
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> Params<G> {
        Params {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }
}

/// Indices of the per-layer tensors inside [`Params`].
#[derive(Debug, Clone, Copy)]
pub struct LayerSlots {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w_in: usize,
    pub b_in: usize,
    pub w_out: usize,
    pub b_out: usize,
}

const PER_LAYER: usize = 12;

#[derive(Debug, Clone)]
pub struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerSlots>,
    pub lnf_gain: usize,
    pub lnf_bias: usize,
    pub lm_head: usize,
}

impl Layout {
    pub fn new(n_layers: usize) -> Self {
        let layers = (0..n_layers)
            .map(|l| {
                let b = 2 + l * PER_LAYER;
                LayerSlots {
                    ln1_gain: b,
                    ln1_bias: b + 1,
                    wq: b + 2,
                    wk: b + 3,
                    wv: b + 4,
                    wo: b + 5,
                    ln2_gain: b + 6,
                    ln2_bias: b + 7,
                    w_in: b + 8,
                    b_in: b + 9,
                    w_out: b + 10,
                    b_out: b + 11,
                }
            })
            .collect();
        let tail = 2 + n_layers * PER_LAYER;
        Self {
            tok_emb: 0,
            pos_emb: 1,
            layers,
            lnf_gain: tail,
            lnf_bias: tail + 1,
            lm_head: tail + 2,
        }
    }

    /// Names and shapes in layout order.
    pub fn shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (v, t, d, f) = (cfg.vocab_size, cfg.context_window, cfg.d_model, cfg.d_ff);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![t, d]),
        ];
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.wo"), vec![d, d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("mlp.w_in"), vec![d, f]),
                (p("mlp.b_in"), vec![f]),
                (p("mlp.w_out"), vec![f, d]),
                (p("mlp.b_out"), vec![d]),
            ]);
        }
        out.extend([
            ("ln_f.gain".to_string(), vec![d]),
            ("ln_f.bias".to_string(), vec![d]),
            ("lm_head".to_string(), vec![d, v]),
        ]);
        out
    }
}
