//! Dense feed-forward networks with explicit forward/backward passes.
//!
//! A network is a stack of affine layers, each `z = x W^T + b` followed by an
//! activation. Softmax is only permitted on the final layer; for such heads
//! the backward pass takes the upstream gradient in *logit* space (the losses
//! in this crate all produce logit-space gradients, which sidesteps the
//! unstable division by near-zero probabilities).
//!
//! Dropout is inverted (surviving units scaled by `1/(1-p)` at train time) and
//! applies to the post-activation of every non-final layer. Callers that need
//! dropout on a network's *output* (the encoders) apply a [`DropoutMask`]
//! themselves.

use rand::Rng as _;
use rand_chacha::rand_core::SeedableRng;

use crate::error::{Error, Result};
use crate::ndnum::matrix::Matrix;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
    /// Row softmax; only valid on the final layer.
    Softmax,
}

#[derive(Debug, Clone)]
pub struct Layer {
    /// Row-major `(out_dim x in_dim)`.
    pub w: Matrix,
    pub b: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Per-layer dropout mask holding `0` or `1/(1-p)` entries.
#[derive(Debug, Clone)]
pub struct DropoutMask {
    mask: Matrix,
}

impl DropoutMask {
    /// Samples an inverted-dropout mask. `p` is the drop probability.
    pub fn sample(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout p must be in [0,1)");
        let keep_scale = 1.0 / (1.0 - p);
        let mut mask = Matrix::zeros(rows, cols);
        for v in mask.data_mut() {
            *v = if rng.random::<f64>() < p { 0.0 } else { keep_scale };
        }
        DropoutMask { mask }
    }

    pub fn identity(rows: usize, cols: usize) -> Self {
        DropoutMask {
            mask: Matrix::from_vec(rows, cols, vec![1.0; rows * cols]).unwrap(),
        }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        x.hadamard(&self.mask)
    }

    /// Forces one entry to pass through unscaled.
    pub fn set_keep(&mut self, r: usize, c: usize) {
        self.mask.set(r, c, 1.0);
    }
}

/// Everything `forward` saw, retained for the backward pass: the input, each
/// layer's pre-activation, post-activation (after dropout), and dropout masks
/// when running in train mode.
#[derive(Debug, Clone)]
pub struct ActivationStack {
    pub input: Matrix,
    pub pre: Vec<Matrix>,
    pub post: Vec<Matrix>,
    pub masks: Vec<Option<DropoutMask>>,
}

impl ActivationStack {
    pub fn output(&self) -> &Matrix {
        self.post.last().expect("forward produces at least one layer")
    }
}

/// Per-layer parameter gradients, shape-matched to the network.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub d_w: Vec<Matrix>,
    pub d_b: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Gradients {
            d_w: mlp
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            d_b: mlp.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.d_w.iter_mut().zip(&other.d_w) {
            a.add_assign(b);
        }
        for (a, b) in self.d_b.iter_mut().zip(&other.d_b) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.d_w {
            w.scale(s);
        }
        for b in &mut self.d_b {
            for v in b {
                *v *= s;
            }
        }
    }
}

impl Mlp {
    /// Builds a network from `(in, out, activation)` layer specs with
    /// Glorot-uniform weights (`±sqrt(6/(fan_in+fan_out))`) and zero biases.
    pub fn new(dims: &[(usize, usize, Activation)], rng: &mut Rng) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::EmptyInput("Mlp::new: no layers"));
        }
        let mut layers = Vec::with_capacity(dims.len());
        for (i, &(in_dim, out_dim, activation)) in dims.iter().enumerate() {
            if in_dim == 0 || out_dim == 0 {
                return Err(Error::State(format!("layer {i} has a zero dimension")));
            }
            if i > 0 && dims[i - 1].1 != in_dim {
                return Err(Error::Shape {
                    context: "Mlp::new: layer dims must chain",
                    expected: format!("{}", dims[i - 1].1),
                    actual: format!("{in_dim}"),
                });
            }
            if activation == Activation::Softmax && i + 1 != dims.len() {
                return Err(Error::State(
                    "softmax is only permitted on the final layer".into(),
                ));
            }
            let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
            let mut w = Matrix::zeros(out_dim, in_dim);
            for v in w.data_mut() {
                *v = rng.random_range(-limit..limit);
            }
            layers.push(Layer {
                w,
                b: vec![0.0; out_dim],
                activation,
            });
        }
        Ok(Mlp { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn from_layers(layers: Vec<Layer>) -> Self {
        assert!(!layers.is_empty());
        Mlp { layers }
    }

    /// Forward pass over a batch (rows are samples).
    ///
    /// In train mode, dropout masks are sampled for every non-final layer and
    /// recorded on the stack; in eval mode (or `dropout_p == 0`) no masks are
    /// recorded and dropout is the identity.
    pub fn forward(
        &self,
        batch: &Matrix,
        dropout_p: f64,
        rng: &mut Rng,
        train_mode: bool,
    ) -> Result<ActivationStack> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Shape {
                context: "Mlp::forward",
                expected: format!("{} input columns", self.input_dim()),
                actual: format!("{}", batch.cols()),
            });
        }
        let n_layers = self.layers.len();
        let mut pre = Vec::with_capacity(n_layers);
        let mut post = Vec::with_capacity(n_layers);
        let mut masks = Vec::with_capacity(n_layers);
        let mut x = batch.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = x.matmul_transpose(&layer.w);
            for r in 0..z.rows() {
                for (v, &b) in z.row_mut(r).iter_mut().zip(&layer.b) {
                    *v += b;
                }
            }
            let mut a = match layer.activation {
                Activation::Relu => z.map(|v| v.max(0.0)),
                Activation::Identity => z.clone(),
                Activation::Softmax => softmax_rows(&z),
            };
            let is_final = li + 1 == n_layers;
            let mask = if train_mode && dropout_p > 0.0 && !is_final {
                let m = DropoutMask::sample(a.rows(), a.cols(), dropout_p, rng);
                a = m.apply(&a);
                Some(m)
            } else {
                None
            };
            pre.push(z);
            post.push(a.clone());
            masks.push(mask);
            x = a;
        }
        Ok(ActivationStack {
            input: batch.clone(),
            pre,
            post,
            masks,
        })
    }

    /// Eval-mode forward that returns just the output.
    pub fn infer(&self, batch: &Matrix) -> Result<Matrix> {
        let mut scratch = Rng::seed_from_u64(0);
        Ok(self
            .forward(batch, 0.0, &mut scratch, false)?
            .output()
            .clone())
    }

    /// Backward pass. `grad_output` is the upstream gradient with respect to
    /// the final layer's output — in logit space when that layer is softmax.
    ///
    /// Returns parameter gradients and the gradient with respect to the input.
    pub fn backward(
        &self,
        stack: &ActivationStack,
        grad_output: &Matrix,
    ) -> Result<(Gradients, Matrix)> {
        let n_layers = self.layers.len();
        if stack.pre.len() != n_layers {
            return Err(Error::State(
                "activation stack does not match network depth".into(),
            ));
        }
        let out = stack.output();
        if (grad_output.rows(), grad_output.cols()) != (out.rows(), out.cols()) {
            return Err(Error::Shape {
                context: "Mlp::backward",
                expected: format!("{}x{}", out.rows(), out.cols()),
                actual: format!("{}x{}", grad_output.rows(), grad_output.cols()),
            });
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = grad_output.clone();
        for li in (0..n_layers).rev() {
            let layer = &self.layers[li];
            let is_final = li + 1 == n_layers;
            // Through dropout first (post-activation side).
            if let Some(mask) = &stack.masks[li] {
                delta = mask.apply(&delta);
            }
            // Through the activation into pre-activation space.
            let delta_z = match layer.activation {
                Activation::Relu => {
                    let z = &stack.pre[li];
                    let mut d = delta.clone();
                    for (dv, &zv) in d.data_mut().iter_mut().zip(z.data()) {
                        if zv <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    d
                }
                Activation::Identity => delta,
                Activation::Softmax => {
                    debug_assert!(is_final);
                    delta // contract: already in logit space
                }
            };
            let input = if li == 0 {
                &stack.input
            } else {
                &stack.post[li - 1]
            };
            grads.d_w[li] = delta_z.transpose_matmul(input);
            let db = &mut grads.d_b[li];
            for r in 0..delta_z.rows() {
                for (b, &d) in db.iter_mut().zip(delta_z.row(r)) {
                    *b += d;
                }
            }
            delta = delta_z.matmul(&layer.w);
        }
        Ok((grads, delta))
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.data().len() + l.b.len())
            .sum()
    }

    /// Flattens all parameters (layer order, weights then bias) into one vector.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.w.data());
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "set_params_flat length");
        let mut off = 0;
        for l in &mut self.layers {
            let wn = l.w.data().len();
            l.w.data_mut().copy_from_slice(&flat[off..off + wn]);
            off += wn;
            let bn = l.b.len();
            l.b.copy_from_slice(&flat[off..off + bn]);
            off += bn;
        }
    }

    /// Flattens gradients in the same order as `params_flat`.
    pub fn grads_flat(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (dw, db) in grads.d_w.iter().zip(&grads.d_b) {
            out.extend_from_slice(dw.data());
            out.extend_from_slice(db);
        }
        out
    }
}

/// Row-wise softmax with the log-sum-exp shift.
pub fn softmax_rows(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn single_layer(w: Matrix, b: Vec<f64>, activation: Activation) -> Mlp {
        Mlp::from_layers(vec![Layer { w, b, activation }])
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mlp = single_layer(Matrix::identity(2), vec![0.0, 0.0], Activation::Identity);
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let mut rng = rng_for(0, "t", 0);
        let out = mlp.forward(&x, 0.0, &mut rng, false).unwrap();
        assert_eq!(out.output().data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_layer_clamps_negatives() {
        let mlp = single_layer(Matrix::identity(2), vec![0.0, 0.0], Activation::Relu);
        let x = Matrix::from_rows(&[vec![-1.0, 3.0]]).unwrap();
        let mut rng = rng_for(0, "t", 0);
        let out = mlp.forward(&x, 0.0, &mut rng, false).unwrap();
        assert_eq!(out.output().data(), &[0.0, 3.0]);
    }

    #[test]
    fn two_layer_forward_matches_straight_line_arithmetic() {
        // Oracle: the same arithmetic written out long-hand, no Matrix reuse.
        let mut rng = rng_for(7, "fwd-oracle", 0);
        let mlp = Mlp::new(
            &[(3, 4, Activation::Relu), (4, 2, Activation::Identity)],
            &mut rng,
        )
        .unwrap();
        let x = vec![1.0, 1.0, 1.0];
        let l0 = &mlp.layers()[0];
        let mut h = vec![0.0; 4];
        for o in 0..4 {
            let mut acc = l0.b[o];
            for i in 0..3 {
                acc += l0.w.get(o, i) * x[i];
            }
            h[o] = acc.max(0.0);
        }
        let l1 = &mlp.layers()[1];
        let mut y = vec![0.0; 2];
        for o in 0..2 {
            let mut acc = l1.b[o];
            for i in 0..4 {
                acc += l1.w.get(o, i) * h[i];
            }
            y[o] = acc;
        }
        let batch = Matrix::from_rows(&[x]).unwrap();
        let mut scratch = rng_for(0, "t", 0);
        let out = mlp.forward(&batch, 0.0, &mut scratch, false).unwrap();
        for (a, b) in out.output().data().iter().zip(&y) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_grad_output_gives_zero_gradients() {
        let mut rng = rng_for(3, "t", 0);
        let mlp = Mlp::new(
            &[(3, 5, Activation::Relu), (5, 2, Activation::Identity)],
            &mut rng,
        )
        .unwrap();
        let x = Matrix::from_rows(&[vec![0.5, -0.2, 1.0], vec![1.0, 2.0, 3.0]]).unwrap();
        let stack = mlp.forward(&x, 0.0, &mut rng, false).unwrap();
        let zero = Matrix::zeros(2, 2);
        let (grads, d_in) = mlp.backward(&stack, &zero).unwrap();
        assert!(grads.d_w.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
        assert!(grads.d_b.iter().all(|b| b.iter().all(|&v| v == 0.0)));
        assert!(d_in.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_net_squared_error_grad_is_closed_form() {
        // One identity layer, loss = 0.5*||Wx+b - t||^2, so dW = residual^T x.
        let w = Matrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap();
        let mlp = single_layer(w, vec![0.1, -0.2], Activation::Identity);
        let x = Matrix::from_rows(&[vec![1.5, -0.5]]).unwrap();
        let t = [1.0, 0.0];
        let mut rng = rng_for(0, "t", 0);
        let stack = mlp.forward(&x, 0.0, &mut rng, false).unwrap();
        let y = stack.output();
        let residual =
            Matrix::from_rows(&[vec![y.get(0, 0) - t[0], y.get(0, 1) - t[1]]]).unwrap();
        let (grads, _) = mlp.backward(&stack, &residual).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                let expect = residual.get(0, o) * x.get(0, i);
                assert!((grads.d_w[0].get(o, i) - expect).abs() < 1e-12);
            }
            assert!((grads.d_b[0][o] - residual.get(0, o)).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let mut rng = rng_for(11, "t", 0);
        let mlp = Mlp::new(
            &[(4, 8, Activation::Relu), (8, 3, Activation::Identity)],
            &mut rng,
        )
        .unwrap();
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 0.5, 0.0]]).unwrap();
        let a = mlp.forward(&x, 0.9, &mut rng, false).unwrap();
        let b = mlp.forward(&x, 0.0, &mut rng, false).unwrap();
        assert_eq!(a.output().data(), b.output().data());
        assert!(a.masks.iter().all(|m| m.is_none()));
    }

    #[test]
    fn dropout_train_mode_preserves_expected_activation() {
        let mut rng = rng_for(13, "t", 0);
        let p = 0.5;
        let n = 20_000;
        let mask = DropoutMask::sample(n, 1, p, &mut rng);
        let ones = Matrix::from_vec(n, 1, vec![1.0; n]).unwrap();
        let kept = mask.apply(&ones);
        let mean = kept.data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "inverted dropout mean {mean}");
    }

    #[test]
    fn softmax_only_on_final_layer() {
        let mut rng = rng_for(1, "t", 0);
        let err = Mlp::new(
            &[(2, 2, Activation::Softmax), (2, 2, Activation::Identity)],
            &mut rng,
        );
        assert!(err.is_err());
    }

    #[test]
    fn forward_rejects_dim_mismatch() {
        let mut rng = rng_for(1, "t", 0);
        let mlp = Mlp::new(&[(3, 2, Activation::Identity)], &mut rng).unwrap();
        let x = Matrix::zeros(1, 4);
        assert!(mlp.forward(&x, 0.0, &mut rng, false).is_err());
    }

    #[test]
    fn params_flat_roundtrip() {
        let mut rng = rng_for(5, "t", 0);
        let mut mlp = Mlp::new(
            &[(3, 4, Activation::Relu), (4, 2, Activation::Softmax)],
            &mut rng,
        )
        .unwrap();
        let flat = mlp.params_flat();
        assert_eq!(flat.len(), mlp.param_count());
        let mut bumped = flat.clone();
        bumped[0] += 1.0;
        mlp.set_params_flat(&bumped);
        assert_eq!(mlp.params_flat(), bumped);
    }
}
