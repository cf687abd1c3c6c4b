use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};
use crate::Float;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-table AdamW state with a step counter per row, so rows that are
/// rarely selected still get a correct bias correction.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamWConfig,
    first_moment: Matrix,
    second_moment: Matrix,
    steps: Vec<u64>,
}

impl OptimState {
    pub fn new(rows: usize, cols: usize, config: AdamWConfig) -> Self {
        OptimState {
            config,
            first_moment: Matrix::zeros(rows, cols),
            second_moment: Matrix::zeros(rows, cols),
            steps: vec![0; rows],
        }
    }

    pub fn for_params(params: &Matrix, config: AdamWConfig) -> Self {
        OptimState::new(params.rows(), params.cols(), config)
    }

    pub fn steps(&self, row: usize) -> u64 {
        self.steps[row]
    }

    pub fn first_moment(&self) -> &Matrix {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &Matrix {
        &self.second_moment
    }

    /// Appends zero-initialised columns, keeping existing moments.
    pub fn grow_cols(&mut self, extra: usize) {
        let grow = |m: &Matrix| {
            Matrix::from_fn(m.rows(), m.cols() + extra, |r, c| {
                if c < m.cols() {
                    m.get(r, c)
                } else {
                    0.0
                }
            })
        };
        self.first_moment = grow(&self.first_moment);
        self.second_moment = grow(&self.second_moment);
    }
}

/// Gradient rows keyed by parameter row index. Rows absent from the map
/// are untouched by the step.
#[derive(Clone, Debug, Default)]
pub struct RowGrads {
    cols: usize,
    rows: BTreeMap<usize, Vec<Float>>,
}

impl RowGrads {
    pub fn new(cols: usize) -> Self {
        RowGrads {
            cols,
            rows: BTreeMap::new(),
        }
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Accumulates `scale * grad` into row `row`.
    pub fn add(&mut self, row: usize, grad: &[Float], scale: Float) {
        debug_assert_eq!(grad.len(), self.cols);
        let acc = self
            .rows
            .entry(row)
            .or_insert_with(|| vec![0.0; grad.len()]);
        for (a, g) in acc.iter_mut().zip(grad) {
            *a += scale * g;
        }
    }

    /// Marks a row as touched with a zero gradient.
    pub fn touch(&mut self, row: usize) {
        let cols = self.cols;
        self.rows.entry(row).or_insert_with(|| vec![0.0; cols]);
    }

    pub fn insert(&mut self, row: usize, grad: Vec<Float>) {
        self.rows.insert(row, grad);
    }

    pub fn get(&self, row: usize) -> Option<&[Float]> {
        self.rows.get(&row).map(Vec::as_slice)
    }

    pub fn touched(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn scale(&mut self, s: Float) {
        for g in self.rows.values_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Dense gradient covering every row of a `rows x cols` table.
    pub fn dense(grad: &Matrix) -> Self {
        let mut out = RowGrads::new(grad.cols());
        for r in 0..grad.rows() {
            out.insert(r, grad.row(r).to_vec());
        }
        out
    }
}

/// Decoupled-weight-decay Adam step restricted to the rows present in
/// `grads`. Every other row of `params` and of the optimizer state is left
/// untouched, including its step counter.
pub fn lazy_step(params: &mut Matrix, grads: &RowGrads, state: &mut OptimState) -> Result<()> {
    if state.first_moment.shape() != params.shape() {
        return Err(Error::InvalidInput(format!(
            "optimizer state {:?} does not match parameters {:?}",
            state.first_moment.shape(),
            params.shape()
        )));
    }
    if grads.cols != params.cols() {
        return Err(Error::InvalidInput(format!(
            "gradient width {} does not match parameter width {}",
            grads.cols,
            params.cols()
        )));
    }
    if let Some((&row, _)) = grads.rows.iter().next_back() {
        if row >= params.rows() {
            return Err(Error::Index {
                index: row,
                len: params.rows(),
            });
        }
    }
    if let Some((row, g)) = grads.rows.iter().find(|(_, g)| g.len() != params.cols()) {
        return Err(Error::InvalidInput(format!(
            "gradient row {row} has width {}",
            g.len()
        )));
    }

    let AdamWConfig {
        lr,
        weight_decay,
        beta1,
        beta2,
        eps,
    } = state.config;
    for (&row, grad) in &grads.rows {
        state.steps[row] += 1;
        let t = state.steps[row] as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        let p = params.row_mut(row);
        let m = state.first_moment.row_mut(row);
        let v = state.second_moment.row_mut(row);
        for j in 0..p.len() {
            let g = grad[j] as f64;
            let mj = beta1 * m[j] as f64 + (1.0 - beta1) * g;
            let vj = beta2 * v[j] as f64 + (1.0 - beta2) * g * g;
            m[j] = mj as Float;
            v[j] = vj as Float;
            let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
            p[j] = (p[j] as f64 * decay - update) as Float;
        }
    }
    Ok(())
}
