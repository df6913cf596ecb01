//! Peephole LSTM that runs along network depth: one step per residual block.
//!
//! Per step, with `x` the adapted block output and `(h, c)` the previous
//! state:
//!
//! ```text
//! i  = σ(W_xi x + W_hi h + w_ci ⊙ c + b_i)
//! f  = σ(W_xf x + W_hf h + w_cf ⊙ c + b_f)
//! c' = f ⊙ c + i ⊙ tanh(W_xc x + W_hc h + b_c)
//! o  = σ_o(W_xo x + W_ho h + w_co ⊙ c' + b_o)
//! h' = o ⊙ tanh(c')
//! ```
//!
//! The output-gate peephole reads the new cell `c'`. `σ_o` is configurable
//! ([`OutputGate`]).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;
use crate::layers::Ctx;
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor, Var};

/// Nonlinearity of the output gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputGate {
    #[default]
    Tanh,
    Logistic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LstmConfig {
    pub input: usize,
    pub hidden: usize,
    pub output_gate: OutputGate,
    /// Initial bias of the input, forget and output gates.
    pub gate_bias: f64,
    pub learn_initial_cell: bool,
}

impl LstmConfig {
    pub fn new(input: usize, hidden: usize) -> Self {
        LstmConfig {
            input,
            hidden,
            output_gate: OutputGate::Tanh,
            gate_bias: -1.0,
            learn_initial_cell: true,
        }
    }

    /// Trainable scalars: four input and recurrent matrices with their
    /// biases, three peepholes and the learned initial state.
    pub fn param_count(&self) -> u64 {
        let (i, h) = (self.input as u64, self.hidden as u64);
        let init = if self.learn_initial_cell { 2 * h } else { h };
        4 * (h * i + h * h + h) + 3 * h + init
    }
}

const GATES: [&str; 4] = ["i", "f", "o", "c"];
const IN: usize = 0;
const FORGET: usize = 1;
const OUT: usize = 2;
const CELL: usize = 3;

/// Parameter handles of the cell.
#[derive(Clone, Debug)]
pub struct Lstm {
    /// Input weights `[h×i]` for the i, f, o and cell gates.
    pub w_x: [ParamId; 4],
    /// Recurrent weights `[h×h]`, same gate order.
    pub w_h: [ParamId; 4],
    /// Peepholes `[h]` for the i, f and o gates.
    pub peephole: [ParamId; 3],
    pub bias: [ParamId; 4],
    pub h0: ParamId,
    pub c0: Option<ParamId>,
    pub cfg: LstmConfig,
    /// Negates the backward pass through the cell update; only used to
    /// prove that gradient checks catch a broken derivative.
    #[doc(hidden)]
    pub fault_injection: bool,
}

/// Hidden and cell state after `step_index` steps.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
    pub step_index: usize,
}

impl Lstm {
    /// Orthogonal gate matrices, `gate_bias` on the i/f/o biases, zero cell
    /// bias, zero peepholes and zero (learned) initial state.
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, cfg: LstmConfig, rng: &mut impl Rng) -> Result<Self> {
        let (i, h) = (cfg.input, cfg.hidden);
        if i == 0 || h == 0 {
            return Err(Error::Input(format!("LSTM widths must be positive (i={i}, h={h})")));
        }
        let g = Group::Lstm;
        let mut mat = |store: &mut ParamStore<S>, name: String, cols: usize| -> Result<ParamId> {
            let w = init::orthogonal(rng, h, cols);
            Ok(store.add(name, Tensor::from_f64(&[h, cols], &w)?, g, true))
        };
        let mut w_x = Vec::with_capacity(4);
        let mut w_h = Vec::with_capacity(4);
        for gate in GATES {
            w_x.push(mat(store, format!("lstm.w_x{gate}"), i)?);
        }
        for gate in GATES {
            w_h.push(mat(store, format!("lstm.w_h{gate}"), h)?);
        }
        let peephole = [0, 1, 2].map(|k| store.add(format!("lstm.w_c{}", GATES[k]), Tensor::zeros(&[h]), g, true));
        let bias = [0, 1, 2, 3].map(|k| {
            let b = if k == CELL { 0.0 } else { cfg.gate_bias };
            store.add(
                format!("lstm.b_{}", GATES[k]),
                Tensor::full(&[h], S::from_f64_lossy(b)),
                g,
                false,
            )
        });
        let h0 = store.add("lstm.h0", Tensor::zeros(&[h]), g, false);
        let c0 = cfg
            .learn_initial_cell
            .then(|| store.add("lstm.c0", Tensor::zeros(&[h]), g, false));
        Ok(Lstm {
            w_x: w_x.try_into().expect("four gates"),
            w_h: w_h.try_into().expect("four gates"),
            peephole,
            bias,
            h0,
            c0,
            cfg,
            fault_injection: false,
        })
    }

    pub fn param_count(&self) -> u64 {
        self.cfg.param_count()
    }

    /// Learned initial state repeated over the batch.
    pub fn initial_state<S: Scalar>(&self, cx: &mut Ctx<S>, batch: usize) -> Result<LstmState> {
        let h0 = cx.var(self.h0);
        let h = cx.tape.broadcast_rows(h0, batch)?;
        let c = match self.c0 {
            Some(id) => {
                let c0 = cx.var(id);
                cx.tape.broadcast_rows(c0, batch)?
            }
            None => cx.tape.constant(Tensor::zeros(&[batch, self.cfg.hidden])),
        };
        Ok(LstmState { h, c, step_index: 0 })
    }

    fn pre_activation<S: Scalar>(
        &self,
        cx: &mut Ctx<S>,
        gate: usize,
        x: Var,
        h: Var,
        peep_cell: Option<Var>,
    ) -> Result<Var> {
        let wx = cx.var(self.w_x[gate]);
        let wh = cx.var(self.w_h[gate]);
        let a = cx.tape.matmul_nt(x, wx)?;
        let b = cx.tape.matmul_nt(h, wh)?;
        let mut z = cx.tape.add(a, b)?;
        if let Some(c) = peep_cell {
            let p = cx.var(self.peephole[gate]);
            let pc = cx.tape.mul(c, p)?;
            z = cx.tape.add(z, pc)?;
        }
        let bias = cx.var(self.bias[gate]);
        cx.tape.add(z, bias)
    }

    /// One depth step.
    pub fn step<S: Scalar>(&self, cx: &mut Ctx<S>, x: Var, s: LstmState) -> Result<LstmState> {
        let (i, h) = (self.cfg.input, self.cfg.hidden);
        let xs = cx.tape.shape(x);
        if xs.len() != 2 || xs[1] != i {
            return Err(Error::dim("lstm_step input", xs, &[xs.first().copied().unwrap_or(0), i]));
        }
        let batch = xs[0];
        for v in [s.h, s.c] {
            if cx.tape.shape(v) != [batch, h] {
                return Err(Error::dim("lstm_step state", cx.tape.shape(v), &[batch, h]));
            }
        }
        let zi = self.pre_activation(cx, IN, x, s.h, Some(s.c))?;
        let ig = cx.tape.sigmoid(zi);
        let zf = self.pre_activation(cx, FORGET, x, s.h, Some(s.c))?;
        let fg = cx.tape.sigmoid(zf);
        let zc = self.pre_activation(cx, CELL, x, s.h, None)?;
        let cand = cx.tape.tanh(zc);
        let kept = cx.tape.mul(fg, s.c)?;
        let written = cx.tape.mul(ig, cand)?;
        let c = cx.tape.add(kept, written)?;
        if self.fault_injection {
            cx.tape.flip_backward_sign(c);
        }
        let zo = self.pre_activation(cx, OUT, x, s.h, Some(c))?;
        let og = match self.cfg.output_gate {
            OutputGate::Tanh => cx.tape.tanh(zo),
            OutputGate::Logistic => cx.tape.sigmoid(zo),
        };
        let tc = cx.tape.tanh(c);
        let h = cx.tape.mul(og, tc)?;
        Ok(LstmState {
            h,
            c,
            step_index: s.step_index + 1,
        })
    }

    /// Folds [`step`](Self::step) over `xs` from the learned initial state and
    /// returns the final hidden state.
    pub fn run_sequence<S: Scalar>(&self, cx: &mut Ctx<S>, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("run_sequence needs at least one step".into()))?;
        let batch = cx.tape.shape(*first).first().copied().unwrap_or(0);
        let mut state = self.initial_state(cx, batch)?;
        for &x in xs {
            state = self.step(cx, x, state)?;
        }
        Ok(state.h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;
    use crate::tensor::Tape;

    fn build(cfg: LstmConfig, seed: u64) -> (ParamStore<f64>, Lstm) {
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, cfg, &mut init::seeded(seed)).unwrap();
        (store, lstm)
    }

    fn zero_all(store: &mut ParamStore<f64>) {
        for p in store.iter_mut() {
            p.value.fill(0.0);
        }
    }

    #[test]
    fn recurrent_matrices_are_orthogonal() {
        let (store, lstm) = build(LstmConfig::new(12, 6), 3);
        for id in lstm.w_h.iter() {
            let w = store.value(*id);
            let wwt = w.matmul(&w.transpose().unwrap()).unwrap();
            for a in 0..6 {
                for b in 0..6 {
                    let e = if a == b { 1.0 } else { 0.0 };
                    assert!((wwt.data()[a * 6 + b] - e).abs() < 1e-5);
                }
            }
        }
        // input matrices have orthonormal rows
        let w = store.value(lstm.w_x[0]);
        let wwt = w.matmul(&w.transpose().unwrap()).unwrap();
        assert!((wwt.data()[0] - 1.0).abs() < 1e-10 && wwt.data()[1].abs() < 1e-10);
    }

    #[test]
    fn biases_and_state_initialisation() {
        let mut cfg = LstmConfig::new(4, 3);
        cfg.gate_bias = -1.0;
        let (store, lstm) = build(cfg, 0);
        for k in [IN, FORGET, OUT] {
            assert!(store.value(lstm.bias[k]).data().iter().all(|&b| b == -1.0));
        }
        assert!(store.value(lstm.bias[CELL]).data().iter().all(|&b| b == 0.0));
        for id in lstm.peephole.iter().chain([&lstm.h0, lstm.c0.as_ref().unwrap()]) {
            assert!(store.value(*id).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn param_count_closed_form() {
        let cfg = LstmConfig::new(4096, 100);
        assert_eq!(cfg.param_count(), 1_679_300);
        let (store, lstm) = build(LstmConfig::new(7, 3), 0);
        assert_eq!(store.scalar_count(), lstm.param_count());
        let mut no_c0 = LstmConfig::new(7, 3);
        no_c0.learn_initial_cell = false;
        let (store, _) = build(no_c0, 0);
        assert_eq!(store.scalar_count(), no_c0.param_count());
    }

    fn zero_weight_step(gate: OutputGate) {
        let mut cfg = LstmConfig::new(3, 2);
        cfg.output_gate = gate;
        let (mut store, lstm) = build(cfg, 1);
        zero_all(&mut store);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_f64(&[1, 3], &[0.3, -2.0, 5.0]).unwrap());
        let h = tape.constant(Tensor::from_f64(&[1, 2], &[0.1, 0.2]).unwrap());
        let c = tape.constant(Tensor::from_f64(&[1, 2], &[0.8, -0.4]).unwrap());
        let mut cx = Ctx { tape: &mut tape, store: &mut store, bound: &bound, mode: Mode::Eval };
        let s = lstm.step(&mut cx, x, LstmState { h, c, step_index: 0 }).unwrap();
        let c_new = tape.value(s.c).data().to_vec();
        assert!((c_new[0] - 0.4).abs() < 1e-15 && (c_new[1] + 0.2).abs() < 1e-15);
        let o = match gate {
            OutputGate::Tanh => 0.0,
            OutputGate::Logistic => 0.5,
        };
        let h_new = tape.value(s.h).data();
        for k in 0..2 {
            assert!((h_new[k] - o * c_new[k].tanh()).abs() < 1e-15);
        }
        assert_eq!(s.step_index, 1);
    }

    #[test]
    fn zero_weights_halve_the_cell() {
        zero_weight_step(OutputGate::Tanh);
        zero_weight_step(OutputGate::Logistic);
    }

    #[test]
    fn saturated_gates_preserve_memory() {
        let (mut store, lstm) = build(LstmConfig::new(3, 2), 2);
        store.value_mut(lstm.bias[FORGET]).fill(60.0);
        store.value_mut(lstm.bias[IN]).fill(-60.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_f64(&[1, 3], &[0.3, -0.2, 0.5]).unwrap());
        let h = tape.constant(Tensor::from_f64(&[1, 2], &[0.1, 0.2]).unwrap());
        let c = tape.constant(Tensor::from_f64(&[1, 2], &[0.8, -0.4]).unwrap());
        let mut cx = Ctx { tape: &mut tape, store: &mut store, bound: &bound, mode: Mode::Eval };
        let s = lstm.step(&mut cx, x, LstmState { h, c, step_index: 0 }).unwrap();
        let c_new = tape.value(s.c).data();
        assert!((c_new[0] - 0.8).abs() < 1e-12 && (c_new[1] + 0.4).abs() < 1e-12);
    }

    #[test]
    fn width_mismatch_and_empty_sequence() {
        let (mut store, lstm) = build(LstmConfig::new(3, 2), 2);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        let mut cx = Ctx { tape: &mut tape, store: &mut store, bound: &bound, mode: Mode::Eval };
        assert!(matches!(lstm.run_sequence(&mut cx, &[x]), Err(Error::Dimension { .. })));
        assert!(matches!(lstm.run_sequence(&mut cx, &[]), Err(Error::Contract(_))));
    }
}
