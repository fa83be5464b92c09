//! Layer vocabulary: convolution, batch normalization, dropout, dense.
//!
//! Layers own [`ParamId`]s into a [`ParamStore`], never tensor data; forward
//! methods record ops on a [`Tape`]. Weight initialization is He-uniform
//! ahead of ReLU and Glorot-uniform otherwise, with zero biases, gamma = 1,
//! beta = 0.

use crate::error::{Error, Result};
use crate::params::{glorot_uniform, he_uniform, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tape::{conv_out_dims, Mode, Padding, Tape, ValueId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Activation {
    None,
    Relu,
    Softmax,
}

pub struct Conv2DLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub padding: Padding,
    pub stride: (usize, usize),
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2DLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut Rng,
        name: &str,
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        padding: Padding,
        stride: (usize, usize),
    ) -> Result<Self> {
        if kh < 1 || kw < 1 {
            return Err(Error::invalid("conv2d", "kernel extents must be >= 1"));
        }
        let fan_in = kh * kw * cin;
        let kernel = store.add(
            format!("{name}/kernel"),
            he_uniform(rng, Shape::new(vec![kh, kw, cin, cout]), fan_in),
            true,
        )?;
        let bias = store.add(
            format!("{name}/bias"),
            Tensor::zeros(Shape::new(vec![cout])),
            true,
        )?;
        Ok(Conv2DLayer {
            kernel,
            bias,
            padding,
            stride,
            kh,
            kw,
            cin,
            cout,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: ValueId,
    ) -> Result<ValueId> {
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, k, b, self.padding, self.stride)
    }

    pub fn out_shape(&self, input: &Shape) -> Result<Shape> {
        let (h, w) = (input.dim(1), input.dim(2));
        let (oh, ow, _, _) = conv_out_dims(h, w, self.kh, self.kw, self.stride, self.padding)?;
        Ok(Shape::new(vec![input.dim(0), oh, ow, self.cout]))
    }
}

pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub epsilon: f64,
    pub momentum: f64,
    pub channels: usize,
}

impl BatchNormLayer {
    /// Defaults chosen for small feature maps at batch 32: eps 1e-3,
    /// momentum 0.01.
    pub const EPSILON: f64 = 1e-3;
    pub const MOMENTUM: f64 = 0.01;

    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        let gamma = store.add(
            format!("{name}/gamma"),
            Tensor::full(Shape::new(vec![channels]), S::one()),
            true,
        )?;
        let beta = store.add(
            format!("{name}/beta"),
            Tensor::zeros(Shape::new(vec![channels])),
            true,
        )?;
        let running_mean = store.add(
            format!("{name}/running_mean"),
            Tensor::zeros(Shape::new(vec![channels])),
            false,
        )?;
        let running_var = store.add(
            format!("{name}/running_var"),
            Tensor::full(Shape::new(vec![channels]), S::one()),
            false,
        )?;
        Ok(BatchNormLayer {
            gamma,
            beta,
            running_mean,
            running_var,
            epsilon: Self::EPSILON,
            momentum: Self::MOMENTUM,
            channels,
        })
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates as `running <- (1-momentum)*running + momentum*batch`;
    /// infer mode is a fixed affine map using the running estimates.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &mut ParamStore<S>,
        x: ValueId,
        mode: Mode,
    ) -> Result<ValueId> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (out, stats) = tape.batchnorm_train(x, gamma, beta, self.epsilon)?;
                let mom = S::from_f64(self.momentum);
                let keep = S::one() - mom;
                {
                    let rm = store.get_mut(self.running_mean);
                    for (r, b) in rm.value.data_mut().iter_mut().zip(&stats.mean) {
                        *r = keep * *r + mom * *b;
                    }
                }
                {
                    let rv = store.get_mut(self.running_var);
                    for (r, b) in rv.value.data_mut().iter_mut().zip(&stats.var) {
                        *r = keep * *r + mom * *b;
                    }
                }
                Ok(out)
            }
            Mode::Infer => {
                let mean = store.get(self.running_mean).value.data().to_vec();
                let var = store.get(self.running_var).value.data().to_vec();
                tape.batchnorm_infer(x, gamma, beta, &mean, &var, self.epsilon)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DropoutLayer {
    pub rate: f64,
}

impl DropoutLayer {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        Ok(DropoutLayer { rate })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        x: ValueId,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<ValueId> {
        match mode {
            Mode::Train => tape.dropout(x, self.rate, rng),
            Mode::Infer => Ok(x),
        }
    }
}

pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        let shape = Shape::new(vec![in_dim, out_dim]);
        let weight_init = match activation {
            Activation::Relu => he_uniform(rng, shape, in_dim),
            _ => glorot_uniform(rng, shape, in_dim, out_dim),
        };
        let weight = store.add(format!("{name}/weight"), weight_init, true)?;
        let bias = store.add(
            format!("{name}/bias"),
            Tensor::zeros(Shape::new(vec![out_dim])),
            true,
        )?;
        Ok(DenseLayer {
            weight,
            bias,
            activation,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: ValueId,
    ) -> Result<ValueId> {
        if tape.shape(x).rank() != 2 || tape.shape(x).dim(1) != self.in_dim {
            return Err(Error::shape_mismatch(
                "dense",
                tape.shape(x),
                format!("Nx{}", self.in_dim),
            ));
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let z = tape.matmul(x, w)?;
        let z = tape.add_row_vec(z, b)?;
        match self.activation {
            Activation::None => Ok(z),
            Activation::Relu => tape.relu(z),
            Activation::Softmax => tape.softmax(z),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_tape_fn, random_tensor, OP_TOL};
    use crate::kernels;

    fn ctx() -> (ParamStore<f64>, Rng) {
        (ParamStore::new(), Rng::new(7))
    }

    // Direct six-nested-loop reference for same-padded stride-1 convolution.
    fn conv_oracle(
        x: &Tensor<f64>,
        k: &Tensor<f64>,
        bias: &[f64],
        pad: (usize, usize),
    ) -> Vec<f64> {
        let (n, h, w, cin) = (
            x.shape().dim(0),
            x.shape().dim(1),
            x.shape().dim(2),
            x.shape().dim(3),
        );
        let (kh, kw, _, cout) = (
            k.shape().dim(0),
            k.shape().dim(1),
            k.shape().dim(2),
            k.shape().dim(3),
        );
        let mut out = vec![0.0; n * h * w * cout];
        for ni in 0..n {
            for oh in 0..h {
                for ow in 0..w {
                    for co in 0..cout {
                        let mut acc = bias[co];
                        for dh in 0..kh {
                            for dw in 0..kw {
                                let ih = oh as isize + dh as isize - pad.0 as isize;
                                let iw = ow as isize + dw as isize - pad.1 as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += x.at4(ni, ih as usize, iw as usize, ci)
                                        * k.at4(dh, dw, ci, co);
                                }
                            }
                        }
                        out[((ni * h + oh) * w + ow) * cout + co] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_same_matches_loop_oracle() {
        let mut rng = Rng::new(100);
        let x: Tensor<f64> = random_tensor(&mut rng, &[1, 5, 5, 2], -1.0, 1.0);
        let k: Tensor<f64> = random_tensor(&mut rng, &[3, 3, 2, 4], -1.0, 1.0);
        let bias: Tensor<f64> = random_tensor(&mut rng, &[4], -0.5, 0.5);

        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let ki = tape.leaf(k.clone());
        let bi = tape.leaf(bias.clone());
        let y = tape.conv2d(xi, ki, bi, Padding::Same, (1, 1)).unwrap();

        let expect = conv_oracle(&x, &k, bias.data(), (1, 1));
        assert_eq!(tape.data(y), expect.as_slice());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = Rng::new(31);
        for (dims, kdims, pad, stride) in [
            (vec![2, 5, 5, 2], vec![3, 3, 2, 3], Padding::Same, (1, 1)),
            (vec![1, 6, 6, 1], vec![2, 2, 1, 2], Padding::Same, (1, 1)),
            (vec![1, 5, 5, 2], vec![3, 3, 2, 2], Padding::Valid, (1, 1)),
            (vec![1, 7, 7, 2], vec![3, 3, 2, 2], Padding::Same, (2, 2)),
        ] {
            let x: Tensor<f64> = random_tensor(&mut rng, &dims, -1.0, 1.0);
            let k: Tensor<f64> = random_tensor(&mut rng, &kdims, -1.0, 1.0);
            let b: Tensor<f64> = random_tensor(&mut rng, &[kdims[3]], -0.5, 0.5);
            let outcome = check_tape_fn("conv2d", &[x, k, b], OP_TOL, |t, ids| {
                let y = t.conv2d(ids[0], ids[1], ids[2], pad, stride)?;
                t.sum(y)
            })
            .unwrap();
            assert!(
                outcome.passed(),
                "conv2d {dims:?} {kdims:?}: max rel err {}",
                outcome.max_rel_err
            );
        }
    }

    #[test]
    fn dense_identity_and_hand_case() {
        let (mut store, mut rng) = ctx();
        let layer = DenseLayer::new(&mut store, &mut rng, "d", 2, 2, Activation::None).unwrap();
        store.get_mut(layer.weight).value =
            Tensor::new(Shape::new(vec![2, 2]), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(Shape::new(vec![1, 2]), vec![3.0, -4.0]).unwrap());
        let y = layer.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.data(y), &[3.0, -4.0]);

        // x=[1,1], W=[[1],[1]], b=[0.5] -> 2.5
        let mut store2 = ParamStore::<f64>::new();
        let l2 = DenseLayer::new(&mut store2, &mut rng, "d", 2, 1, Activation::None).unwrap();
        store2.get_mut(l2.weight).value =
            Tensor::new(Shape::new(vec![2, 1]), vec![1.0, 1.0]).unwrap();
        store2.get_mut(l2.bias).value = Tensor::new(Shape::new(vec![1]), vec![0.5]).unwrap();
        let mut t2 = Tape::new();
        let x2 = t2.leaf(Tensor::new(Shape::new(vec![1, 2]), vec![1.0, 1.0]).unwrap());
        let y2 = l2.forward(&mut t2, &store2, x2).unwrap();
        assert_eq!(t2.data(y2), &[2.5]);
    }

    #[test]
    fn dense_width_mismatch_is_error() {
        let (mut store, mut rng) = ctx();
        let layer = DenseLayer::new(&mut store, &mut rng, "d", 3, 2, Activation::None).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(Shape::new(vec![1, 4])));
        assert!(layer.forward(&mut tape, &store, x).is_err());
    }

    #[test]
    fn dense_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let x: Tensor<f64> = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let w: Tensor<f64> = random_tensor(&mut rng, &[4, 2], -1.0, 1.0);
        let b: Tensor<f64> = random_tensor(&mut rng, &[2], -0.5, 0.5);
        let outcome = check_tape_fn("dense", &[x, w, b], OP_TOL, |t, ids| {
            let z = t.matmul(ids[0], ids[1])?;
            let z = t.add_row_vec(z, ids[2])?;
            let z = t.relu(z)?;
            t.sum(z)
        })
        .unwrap();
        assert!(outcome.passed(), "max rel err {}", outcome.max_rel_err);
    }

    #[test]
    fn batchnorm_constant_channel_gives_zero_output() {
        let (mut store, _) = ctx();
        let bn = BatchNormLayer::new(&mut store, "bn", 2).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(Shape::new(vec![2, 2, 2, 2]), 3.0f64));
        let y = bn.forward(&mut tape, &mut store, x, Mode::Train).unwrap();
        for &v in tape.data(y) {
            assert!(v.abs() < 1e-12, "constant input should normalize to zero, got {v}");
        }
    }

    #[test]
    fn batchnorm_gamma_zero_gives_beta() {
        let (mut store, _) = ctx();
        let bn = BatchNormLayer::new(&mut store, "bn", 1).unwrap();
        store.get_mut(bn.gamma).value = Tensor::zeros(Shape::new(vec![1]));
        store.get_mut(bn.beta).value = Tensor::full(Shape::new(vec![1]), 0.75f64);
        let mut rng = Rng::new(8);
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor::<f64>(&mut rng, &[1, 3, 3, 1], -2.0, 2.0));
        let y = bn.forward(&mut tape, &mut store, x, Mode::Train).unwrap();
        for &v in tape.data(y) {
            assert_eq!(v, 0.75);
        }
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let mut rng = Rng::new(21);
        let (mut store, _) = ctx();
        let bn = BatchNormLayer::new(&mut store, "bn", 3).unwrap();
        let mut tape = Tape::new();
        // Batch variance must dominate eps=1e-3 for unit output variance.
        let x = tape.leaf(random_tensor::<f64>(&mut rng, &[4, 6, 6, 3], -2.0, 2.0));
        let y = bn.forward(&mut tape, &mut store, x, Mode::Train).unwrap();
        let rows = 4 * 6 * 6;
        let stats = kernels::channel_moments(rows, 3, tape.data(y));
        for c in 0..3 {
            assert!(stats.mean[c].abs() < 1e-5, "mean[{c}] = {}", stats.mean[c]);
            assert!(
                (stats.var[c] - 1.0).abs() < 1e-3,
                "var[{c}] = {}",
                stats.var[c]
            );
        }
    }

    #[test]
    fn batchnorm_updates_running_stats() {
        let (mut store, mut rng) = ctx();
        let bn = BatchNormLayer::new(&mut store, "bn", 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor::<f64>(&mut rng, &[2, 4, 4, 1], 4.0, 6.0));
        bn.forward(&mut tape, &mut store, x, Mode::Train).unwrap();
        let rm = store.get(bn.running_mean).value.data()[0];
        // one update: (1-0.01)*0 + 0.01*batch_mean, batch mean near 5
        assert!(rm > 0.03 && rm < 0.07, "running mean after one step {rm}");
    }

    #[test]
    fn batchnorm_infer_is_deterministic_affine() {
        let (mut store, mut rng) = ctx();
        let bn = BatchNormLayer::new(&mut store, "bn", 2).unwrap();
        let x: Tensor<f64> = random_tensor(&mut rng, &[1, 3, 3, 2], -1.0, 1.0);
        let mut t1 = Tape::new();
        let x1 = t1.leaf(x.clone());
        let y1 = bn.forward(&mut t1, &mut store, x1, Mode::Infer).unwrap();
        let mut t2 = Tape::new();
        let x2 = t2.leaf(x);
        let y2 = bn.forward(&mut t2, &mut store, x2, Mode::Infer).unwrap();
        assert_eq!(t1.data(y1), t2.data(y2));
    }

    #[test]
    fn batchnorm_rejects_degenerate_batch() {
        let (mut store, _) = ctx();
        let bn = BatchNormLayer::new(&mut store, "bn", 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(Shape::new(vec![1, 1, 1, 1])));
        assert!(bn.forward(&mut tape, &mut store, x, Mode::Train).is_err());
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut rng = Rng::new(77);
        let x: Tensor<f64> = random_tensor(&mut rng, &[2, 3, 3, 2], -1.5, 1.5);
        let gamma: Tensor<f64> = random_tensor(&mut rng, &[2], 0.5, 1.5);
        let beta: Tensor<f64> = random_tensor(&mut rng, &[2], -0.5, 0.5);
        let outcome = check_tape_fn("batchnorm", &[x, gamma, beta], OP_TOL, |t, ids| {
            let (y, _) = t.batchnorm_train(ids[0], ids[1], ids[2], 1e-3)?;
            // Weight the outputs so the gradient is not uniform.
            let w: Vec<f64> = (0..t.data(y).len()).map(|i| 0.3 + 0.01 * i as f64).collect();
            let wlen = w.len();
            let wt = t.leaf(Tensor::new(Shape::new(vec![2, 3, 3, 2]), w).unwrap());
            debug_assert_eq!(wlen, t.data(y).len());
            let prod = t.mul(y, wt)?;
            t.sum(prod)
        })
        .unwrap();
        assert!(outcome.passed(), "max rel err {}", outcome.max_rel_err);
    }

    #[test]
    fn maxpool_matches_windowed_max_oracle() {
        let mut rng = Rng::new(50);
        let x: Tensor<f64> = random_tensor(&mut rng, &[1, 6, 6, 2], -1.0, 1.0);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let y = tape.maxpool2(xi).unwrap();
        for oh in 0..3 {
            for ow in 0..3 {
                for c in 0..2 {
                    let mut best = f64::NEG_INFINITY;
                    for dh in 0..2 {
                        for dw in 0..2 {
                            best = best.max(x.at4(0, oh * 2 + dh, ow * 2 + dw, c));
                        }
                    }
                    let got = tape.data(y)[(oh * 3 + ow) * 2 + c];
                    assert_eq!(got, best);
                }
            }
        }
        // gradient of sum is one-hot per window
        let loss = tape.sum(y).unwrap();
        tape.backward(loss, None).unwrap();
        let g = tape.grad(xi).unwrap();
        for oh in 0..3 {
            for ow in 0..3 {
                for c in 0..2 {
                    let ones: f64 = (0..2)
                        .flat_map(|dh| (0..2).map(move |dw| (dh, dw)))
                        .map(|(dh, dw)| g[((oh * 2 + dh) * 6 + (ow * 2 + dw)) * 2 + c])
                        .sum();
                    assert_eq!(ones, 1.0);
                }
            }
        }
    }

    #[test]
    fn gap_matches_mean_oracle() {
        let mut rng = Rng::new(51);
        let x: Tensor<f64> = random_tensor(&mut rng, &[2, 4, 5, 3], -1.0, 1.0);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let y = tape.gap(xi).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let mut acc = 0.0;
                for h in 0..4 {
                    for w in 0..5 {
                        acc += x.at4(n, h, w, c);
                    }
                }
                let expect = acc / 20.0;
                assert!((tape.data(y)[n * 3 + c] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn relu_gradient_away_from_zero() {
        let mut rng = Rng::new(13);
        // keep |x| > 0.1 so the kink is never crossed by the FD step
        let mut x: Tensor<f64> = random_tensor(&mut rng, &[10], 0.1, 1.0);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = -*v;
            }
        }
        let outcome = check_tape_fn("relu", &[x], 1e-5, |t, ids| {
            let y = t.relu(ids[0])?;
            t.sum(y)
        })
        .unwrap();
        assert!(outcome.passed(), "max rel err {}", outcome.max_rel_err);
    }

    #[test]
    fn pool_and_gap_and_softmax_gradients() {
        let mut rng = Rng::new(14);
        let x: Tensor<f64> = random_tensor(&mut rng, &[1, 4, 4, 2], -1.0, 1.0);
        let outcome = check_tape_fn("maxpool+gap", &[x], OP_TOL, |t, ids| {
            let p = t.maxpool2(ids[0])?;
            let g = t.gap(p)?;
            let w = t.leaf(Tensor::new(Shape::new(vec![1, 2]), vec![1.0, 2.0]).unwrap());
            let prod = t.mul(g, w)?;
            t.sum(prod)
        })
        .unwrap();
        assert!(outcome.passed(), "max rel err {}", outcome.max_rel_err);

        let z: Tensor<f64> = random_tensor(&mut rng, &[3, 5], -2.0, 2.0);
        let outcome = check_tape_fn("softmax", &[z], OP_TOL, |t, ids| {
            let p = t.softmax(ids[0])?;
            let w: Vec<f64> = (0..15).map(|i| (i as f64) * 0.2 - 1.0).collect();
            let wt = t.leaf(Tensor::new(Shape::new(vec![3, 5]), w).unwrap());
            let prod = t.mul(p, wt)?;
            t.sum(prod)
        })
        .unwrap();
        assert!(outcome.passed(), "max rel err {}", outcome.max_rel_err);
    }

    #[test]
    fn dropout_infer_is_identity_any_rate() {
        let (_, mut rng) = ctx();
        let layer = DropoutLayer::new(0.7).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor::<f64>(&mut rng, &[10], -1.0, 1.0));
        let y = layer.forward(&mut tape, x, Mode::Infer, &mut rng).unwrap();
        assert_eq!(x, y);
    }
}
