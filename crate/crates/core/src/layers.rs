//! Convolution, batch normalisation, pooling and dense layers.
//!
//! Layers only hold [`ParamId`]s; values live in the model's [`ParamStore`]
//! and are reached through a [`Ctx`] during a forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;
use crate::params::{Bound, Group, ParamId, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a layer needs during one forward pass.
pub struct Ctx<'a, S: Scalar> {
    pub tape: &'a mut Tape<S>,
    pub store: &'a mut ParamStore<S>,
    pub bound: &'a Bound,
    pub mode: Mode,
}

impl<S: Scalar> Ctx<'_, S> {
    pub fn var(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }
}

/// 3×3 (or any odd `k`) convolution with "same" padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_maps: usize,
    pub out_maps: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    /// He-initialised kernel; the optional bias starts at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        group: Group,
        in_maps: usize,
        out_maps: usize,
        kernel: usize,
        stride: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) || !(1..=2).contains(&stride) {
            return Err(Error::Input(format!(
                "conv {name}: kernel must be odd and stride 1 or 2 (got k={kernel}, s={stride})"
            )));
        }
        let w = init::he_conv(rng, out_maps, in_maps, kernel);
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::from_f64(&[out_maps, in_maps, kernel, kernel], &w)?,
            group,
            true,
        );
        let bias = with_bias
            .then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_maps]), group, false));
        Ok(Conv2d {
            weight,
            bias,
            in_maps,
            out_maps,
            kernel,
            stride,
        })
    }

    pub fn param_count(&self) -> u64 {
        let w = (self.out_maps * self.in_maps * self.kernel * self.kernel) as u64;
        w + if self.bias.is_some() { self.out_maps as u64 } else { 0 }
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let channels = cx.tape.shape(x).get(1).copied().unwrap_or(0);
        if channels != self.in_maps {
            return Err(Error::dim(
                "conv2d channels",
                cx.tape.shape(x),
                &[self.out_maps, self.in_maps, self.kernel, self.kernel],
            ));
        }
        let w = cx.var(self.weight);
        let b = self.bias.map(|id| cx.var(id));
        cx.tape.conv2d(x, w, b, self.stride, self.kernel / 2)
    }
}

/// Batch-norm hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub maps: usize,
    pub cfg: BatchNormConfig,
}

impl BatchNorm {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        group: Group,
        maps: usize,
        cfg: BatchNormConfig,
    ) -> Self {
        BatchNorm {
            scale: store.add(format!("{name}.scale"), Tensor::ones(&[maps]), group, true),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[maps]), group, false),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[maps]), group),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[maps]), group),
            maps,
            cfg,
        }
    }

    pub fn param_count(&self) -> u64 {
        2 * self.maps as u64
    }

    /// Train mode normalises with batch statistics and folds them into the
    /// running averages (unbiased variance); eval mode only reads them.
    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let g = cx.var(self.scale);
        let b = cx.var(self.shift);
        let eps = S::from_f64_lossy(self.cfg.eps);
        match cx.mode {
            Mode::Eval => {
                let mean = cx.store.value(self.running_mean).data().to_vec();
                let var = cx.store.value(self.running_var).data().to_vec();
                let (y, _, _) = cx.tape.batch_norm(x, g, b, Some((&mean, &var)), eps)?;
                Ok(y)
            }
            Mode::Train => {
                let shape = cx.tape.shape(x).to_vec();
                let (y, mean, var) = cx.tape.batch_norm(x, g, b, None, eps)?;
                let count = (shape[0] * shape[2] * shape[3]) as f64;
                let unbias = S::from_f64_lossy(count / (count - 1.0));
                let m = S::from_f64_lossy(self.cfg.momentum);
                let keep = S::one() - m;
                let rm = cx.store.value_mut(self.running_mean).data_mut();
                for (r, &v) in rm.iter_mut().zip(&mean) {
                    *r = keep * *r + m * v;
                }
                let rv = cx.store.value_mut(self.running_var).data_mut();
                for (r, &v) in rv.iter_mut().zip(&var) {
                    *r = keep * *r + m * v * unbias;
                }
                Ok(y)
            }
        }
    }
}

/// Affine map `x·W + b` with `W[d×out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    /// He-normal weights over the fan-in, zero bias.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        group: Group,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = init::normal(rng, inputs * outputs, (2.0 / inputs as f64).sqrt());
        Ok(Dense {
            weight: store.add(format!("{name}.weight"), Tensor::from_f64(&[inputs, outputs], &w)?, group, true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), group, false),
            inputs,
            outputs,
        })
    }

    pub fn param_count(&self) -> u64 {
        (self.inputs * self.outputs + self.outputs) as u64
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: Var) -> Result<Var> {
        dense(cx.tape, x, cx.bound.var(self.weight), cx.bound.var(self.bias))
    }
}

/// `x[b×d] · w[d×k] + bias[k]`.
pub fn dense<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, bias)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn conv_counts_overlaps() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 4, 4]));
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[1, 1, 4, 4]);
        let d = v.data();
        assert_eq!(d[0], 4.0);
        assert_eq!(d[3], 4.0);
        assert_eq!(d[5], 9.0);
        assert_eq!(d[1], 6.0);
    }

    #[test]
    fn conv_stride_two_halves_extent() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 32, 32]));
        let w = tape.constant(Tensor::zeros(&[8, 3, 3, 3]));
        let y = tape.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 8, 16, 16]);
        // ceil rule on odd extents
        let x = tape.constant(Tensor::zeros(&[1, 3, 5, 5]));
        let y = tape.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 8, 3, 3]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 8, 8]));
        let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, None, 1, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn conv_bias_added() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let w = tape.constant(Tensor::ones(&[2, 1, 3, 3]));
        let b = tape.constant(Tensor::from_f64(&[2], &[1.5, -2.0]).unwrap());
        let y = tape.conv2d(x, w, Some(b), 1, 1).unwrap();
        let v = tape.value(y).data();
        assert!(v[..9].iter().all(|&e| e == 1.5));
        assert!(v[9..18].iter().all(|&e| e == -2.0));
    }

    #[test]
    fn batch_norm_train_statistics() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", Group::Trunk, 3, BatchNormConfig::default());
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let vals: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| ((i * 37) % 11) as f64 * 0.7 - 2.0).collect();
        let x = tape.constant(Tensor::new(&[2, 3, 4, 4], vals).unwrap());
        let mut cx = Ctx { tape: &mut tape, store: &mut store, bound: &bound, mode: Mode::Train };
        let y = bn.forward(&mut cx, x).unwrap();
        let v = tape.value(y).data();
        for ch in 0..3 {
            let mut xs = Vec::new();
            for n in 0..2 {
                xs.extend_from_slice(&v[(n * 3 + ch) * 16..(n * 3 + ch + 1) * 16]);
            }
            let m = xs.iter().sum::<f64>() / 32.0;
            let var = xs.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 32.0;
            assert!(approx(m, 0.0, 1e-5));
            assert!(approx(var, 1.0, 1e-4), "{var}");
        }
        // running statistics moved away from their defaults
        assert!(store.value(bn.running_mean).data().iter().any(|&m| m != 0.0));
    }

    #[test]
    fn batch_norm_constant_input_is_zero() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", Group::Trunk, 2, BatchNormConfig::default());
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::full(&[2, 2, 3, 3], 4.2));
        let mut cx = Ctx { tape: &mut tape, store: &mut store, bound: &bound, mode: Mode::Train };
        let y = bn.forward(&mut cx, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_rejects_single_sample_in_train() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", Group::Trunk, 2, BatchNormConfig::default());
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::ones(&[1, 2, 3, 3]));
        let mut cx = Ctx { tape: &mut tape, store: &mut store, bound: &bound, mode: Mode::Train };
        assert!(matches!(bn.forward(&mut cx, x), Err(Error::Contract(_))));
        cx.mode = Mode::Eval;
        assert!(bn.forward(&mut cx, x).is_ok());
    }

    #[test]
    fn batch_norm_eval_is_affine() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", Group::Trunk, 1, BatchNormConfig::default());
        store.value_mut(bn.running_mean).data_mut()[0] = 2.0;
        store.value_mut(bn.running_var).data_mut()[0] = 4.0;
        store.value_mut(bn.scale).data_mut()[0] = 3.0;
        store.value_mut(bn.shift).data_mut()[0] = 1.0;
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_f64(&[1, 1, 1, 2], &[2.0, 6.0]).unwrap());
        let mut cx = Ctx { tape: &mut tape, store: &mut store, bound: &bound, mode: Mode::Eval };
        let y = bn.forward(&mut cx, x).unwrap();
        let v = tape.value(y).data();
        let s = (4.0f64 + 1e-5).sqrt();
        assert!(approx(v[0], 1.0, 1e-12));
        assert!(approx(v[1], 3.0 * 4.0 / s + 1.0, 1e-12));
    }

    #[test]
    fn meanpool_window_and_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap());
        let y = tape.meanpool2x2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);

        let x = tape.constant(Tensor::full(&[2, 16, 32, 32], 0.3));
        let y = tape.meanpool2x2(x).unwrap();
        assert_eq!(tape.shape(y), &[2, 16, 16, 16]);
        assert!(tape.value(y).data().iter().all(|&v| approx(v, 0.3, 1e-15)));
        let f = tape.flatten(y).unwrap();
        assert_eq!(tape.shape(f), &[2, 4096]);

        let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(tape.meanpool2x2(odd).is_err());
    }

    #[test]
    fn global_pool_value_shape_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full(&[1, 64, 8, 8], 1.25));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 64]);
        assert!(tape.value(y).data().iter().all(|&v| v == 1.25));
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| approx(g, 1.0 / 64.0, 1e-15)));
    }

    #[test]
    fn dense_identity_passthrough() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        let w = tape.constant(eye);
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = dense(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }
}
