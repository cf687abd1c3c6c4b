use rand_distr::{Distribution, Uniform};

use crate::bottleneck::Representation;
use crate::error::{Error, Result};
use crate::numkit::{dropout_mask, Matrix, RngStream};
use crate::Float;

pub const DEFAULT_DROPOUT: f64 = 0.1;

/// Non-parametric decoding: the logit of class `c` is the mean over present
/// heads of the retrieved values' column `c`.
pub fn decode_nonparametric(rep: &Representation, n_classes: usize) -> Result<Vec<Float>> {
    if rep.values.cols() != n_classes {
        return Err(Error::InvalidConfig(format!(
            "value width {} does not match {n_classes} classes",
            rep.values.cols()
        )));
    }
    let present = rep.num_present();
    if present == 0 {
        return Err(Error::InvalidInput("no head produced a value".into()));
    }
    let mut acc = vec![0f64; n_classes];
    for c in (0..rep.num_heads()).filter(|&c| rep.is_present(c)) {
        for (a, &v) in acc.iter_mut().zip(rep.values.row(c)) {
            *a += v as f64;
        }
    }
    Ok(acc.into_iter().map(|a| (a / present as f64) as Float).collect())
}

/// Gradient of the loss with respect to the representation rows, given the
/// gradient with respect to the non-parametric logits.
pub fn nonparametric_backward(rep: &Representation, dlogits: &[Float]) -> Matrix {
    let present = rep.num_present().max(1) as Float;
    let mut drep = Matrix::zeros(rep.num_heads(), rep.values.cols());
    for c in (0..rep.num_heads()).filter(|&c| rep.is_present(c)) {
        for (d, &g) in drep.row_mut(c).iter_mut().zip(dlogits) {
            *d = g / present;
        }
    }
    drep
}

/// Linear layer over the concatenated head values, preceded by dropout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParametricDecoder {
    /// `in_dim x n_classes`.
    pub weight: Matrix,
    /// `1 x n_classes`.
    pub bias: Matrix,
    pub dropout: f64,
}

/// What the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ParametricCache {
    pub input: Vec<Float>,
    pub mask: Vec<Float>,
}

#[derive(Clone, Debug)]
pub struct ParametricGrads {
    pub weight: Matrix,
    pub bias: Matrix,
    pub input: Vec<Float>,
}

impl ParametricDecoder {
    /// Uniform `±1/sqrt(in_dim)` weights, zero bias.
    pub fn new(in_dim: usize, n_classes: usize, dropout: f64, rng: &mut RngStream) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        ParametricDecoder {
            weight: Matrix::from_fn(in_dim, n_classes, |_, _| dist.sample(rng) as Float),
            bias: Matrix::zeros(1, n_classes),
            dropout,
        }
    }

    pub fn zeros(in_dim: usize, n_classes: usize) -> Self {
        ParametricDecoder {
            weight: Matrix::zeros(in_dim, n_classes),
            bias: Matrix::zeros(1, n_classes),
            dropout: 0.0,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.weight.cols()
    }

    /// `logits = Wᵀ (x ⊙ mask) + b`.
    pub fn forward(&self, input: &[Float], mask: &[Float]) -> Result<Vec<Float>> {
        if input.len() != self.in_dim() || mask.len() != input.len() {
            return Err(Error::InvalidConfig(format!(
                "decoder expects {} inputs, got {} (mask {})",
                self.in_dim(),
                input.len(),
                mask.len()
            )));
        }
        let mut acc: Vec<f64> = self.bias.row(0).iter().map(|&b| b as f64).collect();
        for (i, (&x, &m)) in input.iter().zip(mask).enumerate() {
            let xi = (x * m) as f64;
            if xi == 0.0 {
                continue;
            }
            for (a, &w) in acc.iter_mut().zip(self.weight.row(i)) {
                *a += w as f64 * xi;
            }
        }
        Ok(acc.into_iter().map(|a| a as Float).collect())
    }

    pub fn backward(&self, cache: &ParametricCache, dlogits: &[Float]) -> ParametricGrads {
        let mut weight = Matrix::zeros(self.in_dim(), self.n_classes());
        let mut input = vec![0.0; self.in_dim()];
        for (i, slot) in input.iter_mut().enumerate() {
            let xi = cache.input[i] * cache.mask[i];
            let row = weight.row_mut(i);
            for (g, &d) in row.iter_mut().zip(dlogits) {
                *g = xi * d;
            }
            let back: f64 = self
                .weight
                .row(i)
                .iter()
                .zip(dlogits)
                .map(|(&w, &d)| w as f64 * d as f64)
                .sum();
            *slot = (back * cache.mask[i] as f64) as Float;
        }
        ParametricGrads {
            weight,
            bias: Matrix::from_vec(1, dlogits.len(), dlogits.to_vec()).expect("finite dlogits"),
            input,
        }
    }

    /// Appends zero-initialised output columns.
    pub fn grow_classes(&mut self, n_classes: usize) {
        if n_classes <= self.n_classes() {
            return;
        }
        let old = self.n_classes();
        let grow = |m: &Matrix| Matrix::from_fn(m.rows(), n_classes, |r, c| if c < old { m.get(r, c) } else { 0.0 });
        self.weight = grow(&self.weight);
        self.bias = grow(&self.bias);
    }
}

/// Parametric decoding of a representation: concatenates the head rows,
/// applies dropout when training and the linear layer.
pub fn decode_parametric(
    rep: &Representation,
    decoder: &ParametricDecoder,
    rng: &mut RngStream,
    train: bool,
) -> Result<(Vec<Float>, ParametricCache)> {
    let input = rep.values.as_slice().to_vec();
    let mask = dropout_mask(input.len(), decoder.dropout, rng, train)?;
    let logits = decoder.forward(&input, &mask)?;
    Ok((logits, ParametricCache { input, mask }))
}
