//! Central finite-difference gradient checks in 64-bit precision.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::init;
use crate::layers::{Ctx, Mode};
use crate::lstm::{Lstm, LstmConfig, OutputGate};
use crate::crmn::Crmn;
use crate::model::Classifier;
use crate::params::{Group, ParamKind, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Default perturbation.
pub const EPSILON: f64 = 1e-5;

/// Magnitudes below this are compared absolutely; the finite-difference
/// noise floor at `EPSILON` is far below it.
pub const SCALE_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, SCALE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Worst {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Worst>,
}

impl GradReport {
    fn new() -> Self {
        GradReport {
            checked: 0,
            max_rel_err: 0.0,
            worst: None,
        }
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some(Worst {
                name: name.to_string(),
                index,
                analytic,
                numeric,
            });
        }
    }

    pub fn merge(mut self, other: GradReport) -> GradReport {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
            self.worst = other.worst;
        }
        self
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tolerance
    }
}

/// Checks `d f / d inputs` where `f` builds a scalar from leaves holding
/// `inputs`.
pub fn check_fn<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradReport::new();
    let mut work = inputs.to_vec();
    for t in 0..work.len() {
        for k in 0..work[t].len() {
            let orig = work[t].data()[k];
            work[t].data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work[t].data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work[t].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            report.record(&format!("input{t}"), k, analytic[t].data()[k], numeric);
        }
    }
    Ok(report)
}

/// Loss over a parameter store, with an analytic gradient path.
pub trait Objective {
    fn store(&mut self) -> &mut ParamStore<f64>;
    /// Loss value with gradients added to the store.
    fn loss_and_grad(&mut self) -> Result<f64>;
    fn loss(&mut self) -> Result<f64>;
}

/// Checks every trainable scalar of an objective's store, optionally
/// restricted to parameters whose name passes `filter`.
pub fn check_objective<O: Objective>(obj: &mut O, eps: f64, filter: impl Fn(&str) -> bool) -> Result<GradReport> {
    obj.store().zero_grad();
    let snapshot = obj.store().snapshot();
    obj.loss_and_grad()?;
    let analytic: Vec<Tensor<f64>> = obj.store().iter().map(|p| p.grad.clone()).collect();
    obj.store().restore(&snapshot)?;

    let mut report = GradReport::new();
    let count = obj.store().len();
    for pi in 0..count {
        let (name, kind, len) = {
            let p = obj.store().iter().nth(pi).expect("index in range");
            (p.name.clone(), p.kind, p.value.len())
        };
        if kind != ParamKind::Trainable || !filter(&name) {
            continue;
        }
        for k in 0..len {
            let orig = snapshot[pi].data()[k];
            set(obj.store(), pi, k, orig + eps);
            let plus = obj.loss()?;
            set(obj.store(), pi, k, orig - eps);
            let minus = obj.loss()?;
            obj.store().restore(&snapshot)?;
            let numeric = (plus - minus) / (2.0 * eps);
            report.record(&name, k, analytic[pi].data()[k], numeric);
        }
    }
    if !report.max_rel_err.is_finite() {
        return Err(Error::Numeric(format!("non-finite gradient error in {:?}", report.worst)));
    }
    Ok(report)
}

fn set(store: &mut ParamStore<f64>, param: usize, k: usize, value: f64) {
    let p = store.iter_mut().nth(param).expect("index in range");
    p.value.data_mut()[k] = value;
}

/// Cross-entropy of a classifier on a fixed batch.
pub struct ClassifierObjective<'a, M> {
    pub model: &'a mut M,
    pub images: Tensor<f64>,
    pub labels: Vec<usize>,
    pub mode: Mode,
}

impl<M: Classifier<f64>> Objective for ClassifierObjective<'_, M> {
    fn store(&mut self) -> &mut ParamStore<f64> {
        self.model.store_mut()
    }

    fn loss_and_grad(&mut self) -> Result<f64> {
        Ok(self.model.loss_and_grad(&self.images, &self.labels, self.mode)?.0)
    }

    fn loss(&mut self) -> Result<f64> {
        // train-mode batch norm updates running statistics; they do not
        // influence train-mode outputs, so repeated evaluation is pure.
        self.model.loss(&self.images, &self.labels, self.mode)
    }
}

/// A standalone LSTM unrolled over a fixed input sequence; the loss is a
/// fixed random projection of the final hidden state.
pub struct LstmProbe {
    pub store: ParamStore<f64>,
    pub lstm: Lstm,
    pub inputs: Vec<Tensor<f64>>,
    pub projection: Tensor<f64>,
}

impl LstmProbe {
    pub fn new(input: usize, hidden: usize, steps: usize, batch: usize, output_gate: OutputGate, seed: u64) -> Result<Self> {
        let mut rng = init::seeded(seed);
        let mut store = ParamStore::new();
        let mut cfg = LstmConfig::new(input, hidden);
        cfg.output_gate = output_gate;
        let lstm = Lstm::new(&mut store, cfg, &mut rng)?;
        // Move peepholes, biases and the initial state off their structured
        // initial values so every derivative path is exercised.
        for p in store.iter_mut() {
            if p.value.rank() == 1 {
                let noise = init::normal(&mut rng, p.value.len(), 0.5);
                for (v, n) in p.value.data_mut().iter_mut().zip(noise) {
                    *v += n;
                }
            }
        }
        let inputs = (0..steps)
            .map(|_| Tensor::from_f64(&[batch, input], &init::normal(&mut rng, batch * input, 1.0)))
            .collect::<Result<Vec<_>>>()?;
        let projection = Tensor::from_f64(&[batch, hidden], &init::normal(&mut rng, batch * hidden, 1.0))?;
        Ok(LstmProbe {
            store,
            lstm,
            inputs,
            projection,
        })
    }

    fn run(&mut self, requires_grad: bool) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.store.bind_with(&mut tape, requires_grad);
        let xs: Vec<Var> = self.inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let proj = tape.constant(self.projection.clone());
        let mut cx = Ctx {
            tape: &mut tape,
            store: &mut self.store,
            bound: &bound,
            mode: Mode::Train,
        };
        let h = self.lstm.run_sequence(&mut cx, &xs)?;
        let weighted = tape.mul(h, proj)?;
        let loss = tape.sum(weighted);
        if requires_grad {
            tape.backward(loss)?;
            self.store.accumulate_grads(&tape, &bound)?;
        }
        Ok(tape.value(loss).item())
    }
}

impl Objective for LstmProbe {
    fn store(&mut self) -> &mut ParamStore<f64> {
        &mut self.store
    }

    fn loss_and_grad(&mut self) -> Result<f64> {
        self.run(true)
    }

    fn loss(&mut self) -> Result<f64> {
        self.run(false)
    }
}

/// Tolerance on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

fn randn(shape: &[usize], seed: u64) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    Tensor::from_f64(shape, &init::normal(&mut init::seeded(seed), n, 1.0))
}

/// Convolution (strided, biased), batch norm, tanh, pooling, flattening,
/// tail padding, dense, logistic and softmax cross-entropy.
pub fn ops_suite() -> Result<GradReport> {
    let conv_bn = check_fn(
        &[
            randn(&[2, 2, 5, 5], 1)?,
            randn(&[3, 2, 3, 3], 2)?,
            randn(&[3], 3)?,
            randn(&[3], 4)?,
            randn(&[3], 5)?,
            randn(&[2, 3, 3, 3], 6)?,
        ],
        EPSILON,
        |t, v| {
            let c = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            let (n, _, _) = t.batch_norm(c, v[3], v[4], None, 1e-5)?;
            let s = t.tanh(n);
            let m = t.mul(s, v[5])?;
            Ok(t.sum(m))
        },
    )?;
    let pool_head = check_fn(
        &[randn(&[2, 3, 4, 4], 7)?, randn(&[3 * 4 + 2, 3], 8)?, randn(&[3], 9)?],
        EPSILON,
        |t, v| {
            let p = t.meanpool2x2(v[0])?;
            let f = t.flatten(p)?;
            let padded = t.pad_tail(f, 14)?;
            let logits = crate::layers::dense(t, padded, v[1], v[2])?;
            let s = t.sigmoid(logits);
            t.softmax_cross_entropy(s, &[0, 2])
        },
    )?;
    let gap_concat = check_fn(&[randn(&[2, 3, 4, 4], 10)?, randn(&[2, 2], 11)?], EPSILON, |t, v| {
        let g = t.global_avg_pool(v[0])?;
        let c = t.concat_cols(g, v[1])?;
        let th = t.tanh(c);
        let sq = t.mul(th, c)?;
        Ok(t.sum(sq))
    })?;
    Ok(conv_bn.merge(pool_head).merge(gap_concat))
}

/// A 3-step peephole LSTM with 8 inputs and 5 hidden units, under both
/// output-gate nonlinearities. `fault` flips the sign of the gradient
/// flowing back through the cell update.
pub fn lstm_suite(fault: bool) -> Result<GradReport> {
    let mut report: Option<GradReport> = None;
    for gate in [OutputGate::Tanh, OutputGate::Logistic] {
        let mut probe = LstmProbe::new(8, 5, 3, 2, gate, 11)?;
        probe.lstm.fault_injection = fault;
        let r = check_objective(&mut probe, EPSILON, |_| true)?;
        report = Some(match report {
            Some(prev) => prev.merge(r),
            None => r,
        });
    }
    Ok(report.expect("two gates checked"))
}

/// Smallest end-to-end configuration: one block per stage, 4 base maps,
/// 5 hidden units, 3 classes, 32×32 inputs, batch of 2, train mode.
pub fn micro_crmn_config() -> crate::resnet::NetworkConfig {
    crate::resnet::NetworkConfig::new(1, 4, 3).with_hidden(5)
}

/// Cross-entropy of a CRMN on a fixed batch. Loss-only evaluations reuse
/// the trunk outputs while no trunk tensor differs from the cached values,
/// which is the case for every LSTM and head perturbation.
pub struct CrmnObjective {
    pub model: Crmn<f64>,
    pub images: Tensor<f64>,
    pub labels: Vec<usize>,
    cache: Option<TrunkCache>,
}

struct TrunkCache {
    trunk_values: Vec<Tensor<f64>>,
    pool: Tensor<f64>,
    taps: Vec<Tensor<f64>>,
}

impl CrmnObjective {
    pub fn new(model: Crmn<f64>, images: Tensor<f64>, labels: Vec<usize>) -> Self {
        CrmnObjective {
            model,
            images,
            labels,
            cache: None,
        }
    }

    fn trunk_values(&self) -> Vec<Tensor<f64>> {
        self.model
            .store()
            .trainable()
            .filter(|p| p.group == Group::Trunk)
            .map(|p| p.value.clone())
            .collect()
    }
}

impl Objective for CrmnObjective {
    fn store(&mut self) -> &mut ParamStore<f64> {
        self.model.store_mut()
    }

    fn loss_and_grad(&mut self) -> Result<f64> {
        Ok(self.model.loss_and_grad(&self.images, &self.labels, Mode::Train)?.0)
    }

    fn loss(&mut self) -> Result<f64> {
        let current = self.trunk_values();
        let mut tape = Tape::new();
        let bound = self.model.store().bind_with(&mut tape, false);
        let hit = self.cache.as_ref().is_some_and(|c| c.trunk_values == current);
        let logits = if hit {
            let c = self.cache.as_ref().expect("cache hit");
            let pool = tape.constant(c.pool.clone());
            let taps = c.taps.iter().map(|t| tape.constant(t.clone())).collect();
            self.model.forward_memory(&mut tape, &bound, pool, taps, Mode::Train)?.logits
        } else {
            let x = tape.constant(self.images.clone());
            let out = self.model.forward_full(&mut tape, &bound, x, Mode::Train)?;
            self.cache = Some(TrunkCache {
                trunk_values: current,
                pool: tape.value(out.pool).clone(),
                taps: out.taps.iter().map(|&t| tape.value(t).clone()).collect(),
            });
            out.logits
        };
        let loss = tape.softmax_cross_entropy(logits, &self.labels)?;
        Ok(tape.value(loss).item())
    }
}

/// Every parameter of a micro CRMN against cross-entropy on a random batch.
pub fn micro_crmn_suite(fault: bool) -> Result<GradReport> {
    let cfg = micro_crmn_config();
    let mut model = Crmn::<f64>::new(&cfg, 3)?;
    model.lstm_mut().fault_injection = fault;
    let e = cfg.input_extent;
    let mut obj = CrmnObjective::new(model, randn(&[2, 3, e, e], 21)?, vec![0, 2]);
    check_objective(&mut obj, EPSILON, |_| true)
}
