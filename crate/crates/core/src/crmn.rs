//! Residual trunk + depth-wise LSTM + concatenated softmax head.
//!
//! Every residual block output is mean-pooled 2×2, flattened in
//! (map, row, col) order and zero-padded at the tail to the first stage's
//! pooled width before entering the LSTM as one step. The LSTM only reads
//! from the trunk. The head sees `[global pool | final hidden state]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;
use crate::layers::{Ctx, Dense, Mode};
use crate::lstm::{Lstm, LstmConfig};
use crate::model::Classifier;
use crate::params::{Bound, Group, ParamStore};
use crate::resnet::{NetworkConfig, ResidualTrunk};
use crate::tensor::{Scalar, Tape, Var};

/// Pool, flatten and pad one tap to `max_width` columns.
pub fn adapt_tap<S: Scalar>(tape: &mut Tape<S>, tap: Var, max_width: usize) -> Result<Var> {
    let pooled = tape.meanpool2x2(tap)?;
    let flat = tape.flatten(pooled)?;
    let width = tape.shape(flat)[1];
    if width > max_width {
        return Err(Error::Contract(format!(
            "pooled tap width {width} exceeds LSTM input width {max_width}"
        )));
    }
    tape.pad_tail(flat, max_width)
}

/// How one tap was adapted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapTrace {
    pub maps: usize,
    pub extent: usize,
    pub pooled_width: usize,
    pub pad: usize,
}

/// Adapter bookkeeping for every tap of a config, derived from shapes only.
pub fn adapter_trace(cfg: &NetworkConfig) -> Vec<TapTrace> {
    let max_width = cfg.max_width();
    cfg.stage_maps()
        .iter()
        .zip(cfg.stage_extents())
        .flat_map(|(&maps, extent)| {
            let pooled_width = maps * (extent / 2) * (extent / 2);
            std::iter::repeat_n(TapTrace {
                maps,
                extent,
                pooled_width,
                pad: max_width - pooled_width,
            }, cfg.n)
        })
        .collect()
}

/// Handles produced by a full forward pass.
#[derive(Clone, Debug)]
pub struct CrmnOutput {
    pub logits: Var,
    pub pool: Var,
    pub taps: Vec<Var>,
    pub adapted: Vec<Var>,
    pub hidden: Var,
}

#[derive(Clone, Debug)]
pub struct Crmn<S: Scalar> {
    cfg: NetworkConfig,
    store: ParamStore<S>,
    trunk: ResidualTrunk,
    lstm: Lstm,
    head: Dense,
}

impl<S: Scalar> Crmn<S> {
    /// Trunk first, then LSTM, then head, all drawn from one seeded stream.
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        let mut rng = init::seeded(seed);
        let mut store = ParamStore::new();
        let trunk = ResidualTrunk::build(cfg, &mut store, &mut rng)?;
        let lstm_cfg = LstmConfig {
            input: cfg.max_width(),
            hidden: cfg.hidden_size,
            output_gate: cfg.output_gate,
            gate_bias: cfg.gate_bias,
            learn_initial_cell: cfg.learn_initial_cell,
        };
        let lstm = Lstm::new(&mut store, lstm_cfg, &mut rng)?;
        let head = Dense::new(&mut store, "head", Group::Head, cfg.pool_width() + cfg.hidden_size, cfg.classes, &mut rng)?;
        Ok(Crmn {
            cfg: cfg.clone(),
            store,
            trunk,
            lstm,
            head,
        })
    }

    pub fn trunk(&self) -> &ResidualTrunk {
        &self.trunk
    }

    pub fn lstm(&self) -> &Lstm {
        &self.lstm
    }

    #[doc(hidden)]
    pub fn lstm_mut(&mut self) -> &mut Lstm {
        &mut self.lstm
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    pub fn max_width(&self) -> usize {
        self.cfg.max_width()
    }

    pub fn head_width(&self) -> usize {
        self.head.inputs
    }

    pub fn layer_count(&self) -> usize {
        self.trunk.conv_layer_count() + 1
    }

    /// Full pass exposing intermediate handles.
    pub fn forward_full(&mut self, tape: &mut Tape<S>, bound: &Bound, x: Var, mode: Mode) -> Result<CrmnOutput> {
        let out = {
            let mut cx = Ctx {
                tape: &mut *tape,
                store: &mut self.store,
                bound,
                mode,
            };
            self.trunk.forward(&mut cx, x)?
        };
        self.forward_memory(tape, bound, out.pool, out.taps, mode)
    }

    /// Everything after the trunk: tap adapters, LSTM and head, given the
    /// trunk's pooled features and per-block outputs.
    pub fn forward_memory(&mut self, tape: &mut Tape<S>, bound: &Bound, pool: Var, taps: Vec<Var>, mode: Mode) -> Result<CrmnOutput> {
        let mut cx = Ctx {
            tape,
            store: &mut self.store,
            bound,
            mode,
        };
        let max_width = self.cfg.max_width();
        let adapted = taps
            .iter()
            .map(|&t| adapt_tap(cx.tape, t, max_width))
            .collect::<Result<Vec<_>>>()?;
        let hidden = self.lstm.run_sequence(&mut cx, &adapted)?;
        let features = cx.tape.concat_cols(pool, hidden)?;
        let logits = self.head.forward(&mut cx, features)?;
        Ok(CrmnOutput {
            logits,
            pool,
            taps,
            adapted,
            hidden,
        })
    }
}

impl<S: Scalar> Classifier<S> for Crmn<S> {
    fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    fn forward_bound(&mut self, tape: &mut Tape<S>, bound: &Bound, x: Var, mode: Mode) -> Result<Var> {
        Ok(self.forward_full(tape, bound, x, mode)?.logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn adapter_widths_for_base_16() {
        let cfg = NetworkConfig::new(5, 16, 100);
        let trace = adapter_trace(&cfg);
        assert_eq!(trace.len(), 15);
        assert_eq!(trace[0], TapTrace { maps: 16, extent: 32, pooled_width: 4096, pad: 0 });
        assert_eq!(trace[5], TapTrace { maps: 32, extent: 16, pooled_width: 2048, pad: 2048 });
        assert_eq!(trace[14], TapTrace { maps: 64, extent: 8, pooled_width: 1024, pad: 3072 });
        assert!(trace.iter().all(|t| t.pooled_width + t.pad == cfg.max_width()));
    }

    #[test]
    fn adapt_tap_layout() {
        let mut tape = Tape::<f64>::new();
        let vals: Vec<f64> = (0..2 * 2 * 4 * 4).map(|v| v as f64).collect();
        let tap = tape.constant(Tensor::new(&[2, 2, 4, 4], vals).unwrap());
        let a = adapt_tap(&mut tape, tap, 12).unwrap();
        let v = tape.value(a);
        assert_eq!(v.shape(), &[2, 12]);
        // map 0, first window: (0+1+4+5)/4
        assert_eq!(v.data()[0], 2.5);
        // map 1 starts after 4 pooled values of map 0
        assert_eq!(v.data()[4], 18.5);
        assert!(v.data()[8..12].iter().all(|&z| z == 0.0));
        assert!(matches!(adapt_tap(&mut tape, tap, 7), Err(Error::Contract(_))));
    }

    #[test]
    fn head_and_lstm_widths() {
        let cfg = NetworkConfig::new(1, 4, 3).with_hidden(5);
        let m = Crmn::<f32>::new(&cfg, 0).unwrap();
        assert_eq!(m.max_width(), 1024);
        assert_eq!(m.head_width(), 16 + 5);
        assert_eq!(m.layer_count(), 8);
    }
}
