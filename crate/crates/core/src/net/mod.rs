//! Reward models.
//!
//! [`Network`] is the bias-free ReLU network
//! `h(x; θ) = W_L ReLU(W_{L−1} ReLU(⋯ ReLU(W_1 x)))` and [`LinearModel`] is
//! the identity-feature baseline `h(x; θ) = xᵀθ`. Both expose the same
//! [`RewardModel`] surface so training, uncertainty and selection code is
//! shared between neural and linear policies.

mod checkpoint;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, CHECKPOINT_MAGIC};
pub use train::{
    binary_loss, dueling_loss, loss_gradient, train, LossKind, Regularizer, TrainReport, TrainingBatch,
    TrainingConfig,
};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::Rng;

/// Anything that maps a feature vector to a scalar reward estimate through a
/// flat parameter vector.
pub trait RewardModel: Clone + Send + Sync {
    fn input_dim(&self) -> usize;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// The `m` in the `1/m` data-term scaling and `1/√m` feature scaling.
    fn width_scale(&self) -> f64;

    /// True when `g(x; θ)` does not depend on θ (linear models).
    fn constant_features(&self) -> bool;

    /// Outputs for every row of `x` (N×d).
    fn forward_batch(&self, x: ArrayView2<f64>) -> Array1<f64>;

    /// Outputs for every row of `x` plus `Σ_i c_i g(x_i; θ)`, where the
    /// coefficients are computed from the outputs.
    fn backprop_batch(
        &self,
        x: ArrayView2<f64>,
        coefficients: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    ) -> (Array1<f64>, Vec<f64>);

    /// Per-example gradients, one row of length `p` per input row.
    fn gradient_rows(&self, x: ArrayView2<f64>) -> Array2<f64>;

    fn forward(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.input_dim(), x.len())?;
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.forward_batch(view)[0])
    }

    /// `g(x; θ)`, the gradient of the output with respect to all parameters.
    fn param_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.gradient_rows(view).into_raw_vec_and_offset().0)
    }
}

/// Depth, width and input dimension of a [`Network`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub depth: usize,
    pub width: usize,
    pub input_dim: usize,
}

impl NetworkShape {
    pub fn new(depth: usize, width: usize, input_dim: usize) -> Result<Self> {
        if depth < 2 {
            return Err(Error::Config(format!(
                "network depth must be at least 2, got {depth}"
            )));
        }
        if width == 0 || !width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "network width must be even and positive, got {width}"
            )));
        }
        if input_dim == 0 {
            return Err(Error::Config("network input dimension must be positive".into()));
        }
        Ok(Self {
            depth,
            width,
            input_dim,
        })
    }

    /// `(rows, cols)` of `W_1 … W_L`.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.depth);
        dims.push((self.width, self.input_dim));
        for _ in 2..self.depth {
            dims.push((self.width, self.width));
        }
        dims.push((1, self.width));
        dims
    }

    /// `d·m + (L−2)·m² + m`.
    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(r, c)| r * c).sum()
    }

    fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.depth + 1);
        let mut acc = 0;
        out.push(0);
        for (r, c) in self.layer_dims() {
            acc += r * c;
            out.push(acc);
        }
        out
    }
}

/// All weights of a network, stored flat in layer order, each layer
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    shape: NetworkShape,
    values: Vec<f64>,
}

impl NetworkParams {
    pub fn zeros(shape: NetworkShape) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.num_params()],
        }
    }

    pub fn unflatten(shape: NetworkShape, values: Vec<f64>) -> Result<Self> {
        check_dim(shape.num_params(), values.len())?;
        Ok(Self { shape, values })
    }

    pub fn flatten(&self) -> &[f64] {
        &self.values
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.values
    }

    pub fn shape(&self) -> NetworkShape {
        self.shape
    }

    /// View of `W_{index+1}`.
    pub fn layer(&self, index: usize) -> ArrayView2<'_, f64> {
        let offsets = self.shape.offsets();
        let (r, c) = self.shape.layer_dims()[index];
        ArrayView2::from_shape((r, c), &self.values[offsets[index]..offsets[index + 1]]).expect("layer view")
    }

    pub fn layers(&self) -> Vec<ArrayView2<'_, f64>> {
        (0..self.shape.depth).map(|i| self.layer(i)).collect()
    }
}

/// Symmetric initialisation θ0.
///
/// Hidden layers are block-diagonal duplicates `[[A, 0], [0, A]]` with
/// `A_ij ~ N(0, 4/m)` and the output layer is `[w, −w]` with
/// `w_j ~ N(0, 2/m)`. With an even input dimension the first layer is also
/// block-diagonal, so `h(x; θ0) = 0` whenever `x_j = x_{j+d/2}`. With an odd
/// input dimension the first layer stacks one block twice, `[[A], [A]]`,
/// which makes `h(x; θ0) = 0` for every `x`.
pub fn init_symmetric(rng: &mut Rng, shape: NetworkShape) -> Result<NetworkParams> {
    let shape = NetworkShape::new(shape.depth, shape.width, shape.input_dim)?;
    let m = shape.width;
    let half = m / 2;
    let hidden = Normal::new(0.0, (4.0 / m as f64).sqrt()).expect("valid normal");
    let output = Normal::new(0.0, (2.0 / m as f64).sqrt()).expect("valid normal");
    let mut values = Vec::with_capacity(shape.num_params());

    let d = shape.input_dim;
    let mut w1 = Array2::<f64>::zeros((m, d));
    if d % 2 == 0 {
        let block = Array2::from_shape_fn((half, d / 2), |_| hidden.sample(rng));
        w1.slice_mut(s![..half, ..d / 2]).assign(&block);
        w1.slice_mut(s![half.., d / 2..]).assign(&block);
    } else {
        let block = Array2::from_shape_fn((half, d), |_| hidden.sample(rng));
        w1.slice_mut(s![..half, ..]).assign(&block);
        w1.slice_mut(s![half.., ..]).assign(&block);
    }
    values.extend(w1.iter());

    for _ in 2..shape.depth {
        let block = Array2::from_shape_fn((half, half), |_| hidden.sample(rng));
        let mut w = Array2::<f64>::zeros((m, m));
        w.slice_mut(s![..half, ..half]).assign(&block);
        w.slice_mut(s![half.., half..]).assign(&block);
        values.extend(w.iter());
    }

    let w: Vec<f64> = (0..half).map(|_| output.sample(rng)).collect();
    values.extend(w.iter().copied());
    values.extend(w.iter().map(|v| -v));

    NetworkParams::unflatten(shape, values)
}

/// Fully connected bias-free ReLU network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    params: NetworkParams,
}

impl Network {
    pub fn new(params: NetworkParams) -> Self {
        Self { params }
    }

    pub fn shape(&self) -> NetworkShape {
        self.params.shape
    }

    pub fn network_params(&self) -> &NetworkParams {
        &self.params
    }

    /// Hidden activations `A_1 … A_{L−1}` for a batch.
    fn hidden_activations(&self, x: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let layers = self.params.layers();
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(layers.len() - 1);
        for (l, w) in layers.iter().enumerate().take(layers.len() - 1) {
            let input = if l == 0 { x } else { acts[l - 1].view() };
            let mut z = input.dot(&w.t());
            z.mapv_inplace(|v| v.max(0.0));
            acts.push(z);
        }
        acts
    }

    /// Backpropagated signals `Δ_1 … Δ_{L−1}` (N×m each) for unit output
    /// coefficients scaled per row by `c`.
    fn hidden_deltas(&self, acts: &[Array2<f64>], c: &[f64]) -> Vec<Array2<f64>> {
        let layers = self.params.layers();
        let depth = layers.len();
        let out_w = layers[depth - 1].row(0);
        let n = c.len();
        let mut deltas: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); depth - 1];
        let top = &acts[depth - 2];
        let mut delta = Array2::from_shape_fn((n, out_w.len()), |(i, j)| {
            if top[[i, j]] > 0.0 {
                c[i] * out_w[j]
            } else {
                0.0
            }
        });
        for l in (0..depth - 1).rev() {
            if l > 0 {
                let mut prev = delta.dot(&layers[l]);
                let mask = &acts[l - 1];
                ndarray::Zip::from(&mut prev).and(mask).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                deltas[l] = delta;
                delta = prev;
            } else {
                deltas[l] = std::mem::replace(&mut delta, Array2::zeros((0, 0)));
            }
        }
        deltas
    }
}

impl RewardModel for Network {
    fn input_dim(&self) -> usize {
        self.params.shape.input_dim
    }

    fn params(&self) -> &[f64] {
        &self.params.values
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params.values
    }

    fn width_scale(&self) -> f64 {
        self.params.shape.width as f64
    }

    fn constant_features(&self) -> bool {
        false
    }

    fn forward_batch(&self, x: ArrayView2<f64>) -> Array1<f64> {
        let acts = self.hidden_activations(x);
        let out_w = self.params.layer(self.params.shape.depth - 1);
        acts.last().expect("depth >= 2").dot(&out_w.row(0))
    }

    fn backprop_batch(
        &self,
        x: ArrayView2<f64>,
        coefficients: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    ) -> (Array1<f64>, Vec<f64>) {
        let depth = self.params.shape.depth;
        let acts = self.hidden_activations(x);
        let out_w = self.params.layer(depth - 1);
        let outputs = acts[depth - 2].dot(&out_w.row(0));
        let c = coefficients(outputs.as_slice().expect("contiguous outputs"));
        let deltas = self.hidden_deltas(&acts, &c);

        let mut grad = Vec::with_capacity(self.params.values.len());
        for l in 0..depth - 1 {
            let input = if l == 0 { x } else { acts[l - 1].view() };
            let gw = deltas[l].t().dot(&input);
            grad.extend(gw.iter());
        }
        let c_view = ArrayView1::from(&c[..]);
        let g_out = acts[depth - 2].t().dot(&c_view);
        grad.extend(g_out.iter());
        (outputs, grad)
    }

    fn gradient_rows(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let n = x.nrows();
        let depth = self.params.shape.depth;
        let acts = self.hidden_activations(x);
        let ones = vec![1.0; n];
        let deltas = self.hidden_deltas(&acts, &ones);
        let p = self.params.values.len();
        let offsets = self.params.shape.offsets();
        let mut g = Array2::<f64>::zeros((n, p));
        for (i, mut row) in g.axis_iter_mut(Axis(0)).enumerate() {
            let row = row.as_slice_mut().expect("contiguous row");
            for l in 0..depth - 1 {
                let input = if l == 0 { x.row(i) } else { acts[l - 1].row(i) };
                let delta = deltas[l].row(i);
                let cols = input.len();
                let block = &mut row[offsets[l]..offsets[l + 1]];
                for (r, &dr) in delta.iter().enumerate() {
                    if dr != 0.0 {
                        let dst = &mut block[r * cols..(r + 1) * cols];
                        for (d, &a) in dst.iter_mut().zip(input.iter()) {
                            *d = dr * a;
                        }
                    }
                }
            }
            let top = acts[depth - 2].row(i);
            row[offsets[depth - 1]..].copy_from_slice(top.as_slice().expect("contiguous"));
        }
        g
    }
}

/// `h(x; θ) = xᵀθ` with `g(x; θ) = x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    theta: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(dim: usize) -> Self {
        Self {
            theta: vec![0.0; dim],
        }
    }

    pub fn new(theta: Vec<f64>) -> Self {
        Self { theta }
    }
}

impl RewardModel for LinearModel {
    fn input_dim(&self) -> usize {
        self.theta.len()
    }

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn width_scale(&self) -> f64 {
        1.0
    }

    fn constant_features(&self) -> bool {
        true
    }

    fn forward_batch(&self, x: ArrayView2<f64>) -> Array1<f64> {
        x.dot(&ArrayView1::from(&self.theta[..]))
    }

    fn backprop_batch(
        &self,
        x: ArrayView2<f64>,
        coefficients: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    ) -> (Array1<f64>, Vec<f64>) {
        let outputs = self.forward_batch(x);
        let c = coefficients(outputs.as_slice().expect("contiguous outputs"));
        let grad = x.t().dot(&ArrayView1::from(&c[..]));
        (outputs, grad.to_vec())
    }

    fn gradient_rows(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.to_owned()
    }
}

/// Linear scores `x_i · θ̂` for every arm.
pub fn linear_scores(theta_hat: &[f64], contexts: &crate::env::RoundContexts) -> Result<Vec<f64>> {
    check_dim(theta_hat.len(), contexts.dim())?;
    Ok(contexts.features.dot(&ArrayView1::from(theta_hat)).to_vec())
}
