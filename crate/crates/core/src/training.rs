//! SGD with momentum, the validation-patience learning-rate schedule and its
//! round-robin per-component variant.
//!
//! Epochs are numbered from 1. A shift decided at the end of epoch `e`
//! takes effect from epoch `e + 1`; the history row for `e` shows the rates
//! used during `e`, and the recorded schedule lists `e` with the new rate.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentPolicy, ImageDataset};
use crate::error::{Error, Result};
use crate::init;
use crate::layers::Mode;
use crate::model::{argmax_rows, Classifier};
use crate::params::{Group, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Strictly decreasing learning rates.
    pub lr_ladder: Vec<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// β: epochs without validation improvement before a shift.
    pub patience: usize,
    /// m: no shift may happen before this epoch. Applies to the first shift
    /// only.
    pub min_epochs_first_shift: usize,
    /// Shifting to a rate below this stops training. `None` means the
    /// smallest ladder rate, so every rung is used once.
    pub lr_floor: Option<f64>,
    pub max_epochs: usize,
    pub seed: u64,
    /// Shift one component group at a time, cycling trunk, lstm, head.
    pub rrlr: bool,
    /// Apply weight decay to biases, batch-norm shifts and initial states too.
    pub decay_all: bool,
    pub augment: Option<AugmentPolicy>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_ladder: vec![0.1, 0.01, 0.001],
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 100,
            patience: 10,
            min_epochs_first_shift: 70,
            lr_floor: None,
            max_epochs: 500,
            seed: 0,
            rrlr: false,
            decay_all: false,
            augment: Some(AugmentPolicy::default()),
        }
    }
}

impl TrainConfig {
    pub fn floor(&self) -> f64 {
        self.lr_floor
            .unwrap_or_else(|| self.lr_ladder.iter().copied().fold(f64::INFINITY, f64::min))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(m));
        if self.lr_ladder.is_empty() || self.lr_ladder.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return bad(format!("learning-rate ladder must be non-empty and positive: {:?}", self.lr_ladder));
        }
        if self.lr_ladder.windows(2).any(|w| w[1] >= w[0]) {
            return bad(format!("learning-rate ladder must be strictly decreasing: {:?}", self.lr_ladder));
        }
        let floor = self.floor();
        if !(floor > 0.0) {
            return bad(format!("lr floor must be positive, got {floor}"));
        }
        let n = self.lr_ladder.len();
        if self.lr_ladder[..n - 1].iter().any(|&r| r <= floor) {
            return bad(format!("every rate but the last must exceed the floor {floor}"));
        }
        if self.batch_size == 0 || self.patience == 0 {
            return bad("batch size and patience must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad(format!("momentum {} / weight decay {} out of range", self.momentum, self.weight_decay));
        }
        Ok(())
    }
}

/// `v ← μ·v − lr·(g + λ·p)`, `p ← p + v` for every trainable parameter,
/// with `lr` taken from the parameter's group. `λ` is zero for parameters
/// outside the decay set unless `decay_all`.
pub fn sgd_step<S: Scalar>(
    store: &mut ParamStore<S>,
    velocity: &mut [Tensor<S>],
    lr: [f64; 3],
    momentum: f64,
    weight_decay: f64,
    decay_all: bool,
) -> Result<()> {
    if velocity.len() != store.len() {
        return Err(Error::Contract(format!(
            "{} velocity tensors for {} parameters",
            velocity.len(),
            store.len()
        )));
    }
    for (p, v) in store.iter_mut().zip(velocity.iter_mut()) {
        if p.kind != ParamKind::Trainable {
            continue;
        }
        if !p.grad.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in {}", p.name)));
        }
        if v.shape() != p.value.shape() {
            return Err(Error::dim("sgd_step", v.shape(), p.value.shape()));
        }
        let rate = S::from_f64_lossy(lr[p.group.index()]);
        let mu = S::from_f64_lossy(momentum);
        let wd = S::from_f64_lossy(if p.decay || decay_all { weight_decay } else { 0.0 });
        for ((w, vel), &g) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(p.grad.data()) {
            *vel = mu * *vel - rate * (g + wd * *w);
            *w = *w + *vel;
        }
    }
    Ok(())
}

pub fn zero_velocity<S: Scalar>(store: &ParamStore<S>) -> Vec<Tensor<S>> {
    store.iter().map(|p| Tensor::zeros(p.value.shape())).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    Joint,
    Rrlr,
}

/// One learning-rate change: from the epoch after `epoch`, `group` uses
/// `lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftRecord {
    pub epoch: usize,
    pub group: Group,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub val_error: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Decision {
    Continue { improved: bool },
    /// Reload the best parameters, then use the new rates for `groups`.
    ReloadAndShift(Vec<Group>),
    Stop,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScheduleState {
    pub mode: ScheduleMode,
    /// Ladder position per group, indexed by [`Group::index`].
    pub index: [usize; 3],
    /// Next group to shift in round-robin mode.
    pub cursor: Group,
    pub best_error: f64,
    pub best_acc: f64,
    pub best_epoch: Option<usize>,
    pub since_improvement: usize,
    pub shifts: Vec<ShiftRecord>,
}

impl ScheduleState {
    pub fn new(mode: ScheduleMode) -> Self {
        ScheduleState {
            mode,
            index: [0; 3],
            cursor: Group::Trunk,
            best_error: f64::INFINITY,
            best_acc: f64::NEG_INFINITY,
            best_epoch: None,
            since_improvement: 0,
            shifts: Vec::new(),
        }
    }

    pub fn rates(&self, ladder: &[f64]) -> [f64; 3] {
        self.index.map(|i| ladder[i])
    }
}

fn next_group(g: Group) -> Group {
    match g {
        Group::Trunk => Group::Lstm,
        Group::Lstm => Group::Head,
        Group::Head => Group::Trunk,
    }
}

/// Consumes one epoch's validation metrics.
///
/// Improvement means a strictly lower validation error or a strictly
/// higher validation accuracy; the best of each is tracked separately.
/// After `patience` epochs without improvement, and not before epoch
/// `min_epochs_first_shift` for the first shift, the schedule shifts. A
/// shift that would leave the ladder or drop below the floor stops.
pub fn patience_controller(state: &mut ScheduleState, epoch: usize, m: EpochMetrics, cfg: &TrainConfig) -> Decision {
    let improved = m.val_error < state.best_error || m.val_acc > state.best_acc;
    if improved {
        state.best_error = state.best_error.min(m.val_error);
        state.best_acc = state.best_acc.max(m.val_acc);
        state.best_epoch = Some(epoch);
        state.since_improvement = 0;
        return Decision::Continue { improved: true };
    }
    state.since_improvement += 1;
    if state.since_improvement < cfg.patience {
        return Decision::Continue { improved: false };
    }
    if state.shifts.is_empty() && epoch < cfg.min_epochs_first_shift {
        return Decision::Continue { improved: false };
    }
    let groups = match state.mode {
        ScheduleMode::Joint => Group::ALL.to_vec(),
        ScheduleMode::Rrlr => vec![state.cursor],
    };
    let floor = cfg.floor();
    for &g in &groups {
        let next = state.index[g.index()] + 1;
        if next >= cfg.lr_ladder.len() || cfg.lr_ladder[next] < floor {
            return Decision::Stop;
        }
    }
    for &g in &groups {
        state.index[g.index()] += 1;
        state.shifts.push(ShiftRecord {
            epoch,
            group: g,
            lr: cfg.lr_ladder[state.index[g.index()]],
        });
    }
    if state.mode == ScheduleMode::Rrlr {
        state.cursor = next_group(state.cursor);
    }
    state.since_improvement = 0;
    Decision::ReloadAndShift(groups)
}

/// Where learning-rate changes come from.
#[derive(Clone, Debug, PartialEq)]
pub enum ScheduleSource {
    /// Patience search on the validation split.
    Search,
    /// Apply a recorded schedule at its epochs without consulting
    /// validation; runs for `max_epochs`.
    Replay(Vec<ShiftRecord>),
    /// First ladder rate for `max_epochs`.
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr_trunk: f64,
    pub lr_lstm: f64,
    pub lr_head: f64,
    pub train_loss: f64,
    /// Mean validation cross-entropy.
    pub val_error: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    LadderExhausted,
    EpochBudget,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub schedule: Vec<ShiftRecord>,
    pub best_epoch: Option<usize>,
    pub stop: StopReason,
}

/// Mean cross-entropy and accuracy in eval mode.
pub fn evaluate<S: Scalar>(model: &mut dyn Classifier<S>, ds: &ImageDataset, batch_size: usize) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Input("cannot evaluate an empty dataset".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = ds.batch(chunk)?;
        let logits = model.logits(&x.cast(), Mode::Eval)?;
        let mut tape = crate::tensor::Tape::new();
        let lv = tape.constant(logits.clone());
        let l = tape.softmax_cross_entropy(lv, &labels)?;
        loss += tape.value(l).item().as_f64() * chunk.len() as f64;
        correct += argmax_rows(&logits)?.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok((loss / ds.len() as f64, correct as f64 / ds.len() as f64))
}

/// Runs SGD over `train`, consulting `val` for the patience search.
/// `on_epoch` sees each history row as it is produced.
pub fn train<S: Scalar>(
    model: &mut dyn Classifier<S>,
    train: &ImageDataset,
    val: Option<&ImageDataset>,
    cfg: &TrainConfig,
    source: &ScheduleSource,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if matches!(source, ScheduleSource::Search) && val.is_none() {
        return Err(Error::Input("schedule search needs a validation split".into()));
    }
    if let ScheduleSource::Replay(shifts) = source {
        for s in shifts {
            if !cfg.lr_ladder.contains(&s.lr) {
                return Err(Error::Input(format!("replayed rate {} is not on the ladder", s.lr)));
            }
        }
    }
    let mode = if cfg.rrlr { ScheduleMode::Rrlr } else { ScheduleMode::Joint };
    let mut state = ScheduleState::new(mode);
    let mut rates = state.rates(&cfg.lr_ladder);
    let mut rng = init::seeded(cfg.seed);
    let mut velocity = zero_velocity(model.store());
    let mut best = model.store().snapshot();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stop = StopReason::EpochBudget;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (mut x, labels) = train.batch(chunk)?;
            if let Some(policy) = &cfg.augment {
                x = augment(&x, policy, &mut rng)?;
            }
            model.store_mut().zero_grad();
            let (loss, _) = model.loss_and_grad(&x.cast(), &labels, Mode::Train)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("epoch {epoch}: training loss is {loss}")));
            }
            loss_sum += loss * chunk.len() as f64;
            sgd_step(model.store_mut(), &mut velocity, rates, cfg.momentum, cfg.weight_decay, cfg.decay_all)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}: {m}")),
                    other => other,
                })?;
        }
        let (val_error, val_acc) = match val {
            Some(v) => {
                let (e, a) = evaluate(model, v, cfg.batch_size)?;
                (Some(e), Some(a))
            }
            None => (None, None),
        };
        let record = EpochRecord {
            epoch,
            lr_trunk: rates[0],
            lr_lstm: rates[1],
            lr_head: rates[2],
            train_loss: loss_sum / train.len() as f64,
            val_error,
            val_acc,
        };
        on_epoch(&record);
        history.push(record);

        match source {
            ScheduleSource::Search => {
                let metrics = EpochMetrics {
                    val_error: val_error.expect("search has validation"),
                    val_acc: val_acc.expect("search has validation"),
                };
                match patience_controller(&mut state, epoch, metrics, cfg) {
                    Decision::Continue { improved: true } => best = model.store().snapshot(),
                    Decision::Continue { improved: false } => {}
                    Decision::ReloadAndShift(_) => {
                        model.store_mut().restore(&best)?;
                        velocity = zero_velocity(model.store());
                        rates = state.rates(&cfg.lr_ladder);
                    }
                    Decision::Stop => {
                        model.store_mut().restore(&best)?;
                        stop = StopReason::LadderExhausted;
                        break;
                    }
                }
            }
            ScheduleSource::Replay(shifts) => {
                for s in shifts.iter().filter(|s| s.epoch == epoch) {
                    rates[s.group.index()] = s.lr;
                    state.shifts.push(*s);
                }
            }
            ScheduleSource::Constant => {}
        }
    }
    Ok(TrainOutcome {
        history,
        schedule: state.shifts,
        best_epoch: state.best_epoch,
        stop,
    })
}

pub fn write_history_csv<W: Write>(rows: &[EpochRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history_csv<R: std::io::Read>(input: R) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let rows = r.deserialize().collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
    Ok(rows)
}

pub fn parse_schedule(json: &[u8]) -> Result<Vec<ShiftRecord>> {
    let s: Vec<ShiftRecord> = serde_json::from_slice(json)?;
    if let Some(bad) = s.iter().find(|r| !(r.lr > 0.0) || r.epoch == 0) {
        return Err(Error::Input(format!("invalid schedule entry {bad:?}")));
    }
    if s.windows(2).any(|w| w[1].epoch < w[0].epoch) {
        return Err(Error::Input("schedule epochs must be non-decreasing".into()));
    }
    Ok(s)
}

/// Long-format rows `(series, epoch, value)` for plotting; empty
/// validation cells are skipped.
pub fn curves(rows: &[EpochRecord]) -> Vec<(&'static str, usize, f64)> {
    let mut out = Vec::new();
    let series: [(&'static str, fn(&EpochRecord) -> Option<f64>); 6] = [
        ("train_loss", |r| Some(r.train_loss)),
        ("val_error", |r| r.val_error),
        ("val_acc", |r| r.val_acc),
        ("lr_trunk", |r| Some(r.lr_trunk)),
        ("lr_lstm", |r| Some(r.lr_lstm)),
        ("lr_head", |r| Some(r.lr_head)),
    ];
    for (name, get) in series {
        for r in rows {
            if let Some(v) = get(r) {
                out.push((name, r.epoch, v));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(ladder: &[f64], patience: usize, m: usize, rrlr: bool) -> TrainConfig {
        TrainConfig {
            lr_ladder: ladder.to_vec(),
            patience,
            min_epochs_first_shift: m,
            rrlr,
            ..TrainConfig::default()
        }
    }

    fn flat() -> EpochMetrics {
        EpochMetrics { val_error: 1.0, val_acc: 0.5 }
    }

    #[test]
    fn vanilla_sgd_and_decay_exclusion() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap(), Group::Trunk, true);
        let b = store.add("b", Tensor::from_f64(&[1], &[3.0]).unwrap(), Group::Head, false);
        store.get_mut(w).grad = Tensor::from_f64(&[2], &[0.5, 0.25]).unwrap();
        let mut v = zero_velocity(&store);
        sgd_step(&mut store, &mut v, [0.1, 0.0, 0.2], 0.0, 0.0, false).unwrap();
        assert_eq!(store.value(w).data(), &[0.95, -2.025]);
        assert_eq!(store.value(b).data(), &[3.0]);

        // zero gradient: only decayed tensors move
        store.zero_grad();
        sgd_step(&mut store, &mut v, [0.1, 0.1, 0.1], 0.0, 0.5, false).unwrap();
        assert_eq!(store.value(b).data(), &[3.0]);
        assert_eq!(store.value(w).data(), &[0.95 - 0.1 * 0.5 * 0.95, -2.025 - 0.1 * 0.5 * -2.025]);
        sgd_step(&mut store, &mut v, [0.1, 0.1, 0.1], 0.0, 0.5, true).unwrap();
        assert_eq!(store.value(b).data(), &[3.0 - 0.1 * 0.5 * 3.0]);

        store.get_mut(w).grad.data_mut()[0] = f64::NAN;
        assert!(matches!(sgd_step(&mut store, &mut v, [0.1; 3], 0.9, 0.0, false), Err(Error::Numeric(_))));
    }

    #[test]
    fn momentum_on_quadratic_matches_hand_trace() {
        // f(p) = p²/2, g = p; p0 = 1, lr 0.1, μ 0.9, λ 0.01
        // step 1: v = -0.1·(1 + 0.01) = -0.101, p = 0.899
        // step 2: v = 0.9·-0.101 - 0.1·(0.899 + 0.00899) = -0.181699, p = 0.717301
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::scalar(1.0), Group::Lstm, true);
        let mut v = zero_velocity(&store);
        for _ in 0..2 {
            let p = store.value(id).item();
            store.get_mut(id).grad = Tensor::scalar(p);
            sgd_step(&mut store, &mut v, [0.0, 0.1, 0.0], 0.9, 0.01, false).unwrap();
        }
        assert!((v[0].item() + 0.181699).abs() < 1e-12);
        assert!((store.value(id).item() - 0.717301).abs() < 1e-12);

        // g = 0, no decay: velocity decays geometrically, position drifts by v
        store.get_mut(id).grad = Tensor::scalar(0.0);
        let before = v[0].item();
        sgd_step(&mut store, &mut v, [0.0, 0.1, 0.0], 0.9, 0.0, false).unwrap();
        assert!((v[0].item() - 0.9 * before).abs() < 1e-15);
    }

    #[test]
    fn floor_before_first_shift() {
        let c = cfg(&[0.1, 0.01, 0.001], 2, 70, false);
        let mut s = ScheduleState::new(ScheduleMode::Joint);
        assert_eq!(patience_controller(&mut s, 1, flat(), &c), Decision::Continue { improved: true });
        for e in 2..=69 {
            assert_eq!(patience_controller(&mut s, e, flat(), &c), Decision::Continue { improved: false }, "{e}");
        }
        assert_eq!(patience_controller(&mut s, 70, flat(), &c), Decision::ReloadAndShift(Group::ALL.to_vec()));
        assert_eq!(s.index, [1, 1, 1]);
        // later shifts only need patience
        assert_eq!(patience_controller(&mut s, 71, flat(), &c), Decision::Continue { improved: false });
        assert_eq!(patience_controller(&mut s, 72, flat(), &c), Decision::ReloadAndShift(Group::ALL.to_vec()));
        assert_eq!(patience_controller(&mut s, 73, flat(), &c), Decision::Continue { improved: false });
        assert_eq!(patience_controller(&mut s, 74, flat(), &c), Decision::Stop);
        let epochs: Vec<usize> = s.shifts.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![70, 70, 70, 72, 72, 72]);
    }

    #[test]
    fn ties_do_not_count_as_improvement() {
        let c = cfg(&[0.1, 0.01], 1, 0, false);
        let mut s = ScheduleState::new(ScheduleMode::Joint);
        patience_controller(&mut s, 1, EpochMetrics { val_error: 0.5, val_acc: 0.7 }, &c);
        let d = patience_controller(&mut s, 2, EpochMetrics { val_error: 0.5, val_acc: 0.7 }, &c);
        assert_eq!(d, Decision::ReloadAndShift(Group::ALL.to_vec()));
        let d = patience_controller(&mut s, 3, EpochMetrics { val_error: 0.6, val_acc: 0.71 }, &c);
        assert_eq!(d, Decision::Continue { improved: true });
        assert_eq!((s.best_error, s.best_acc, s.best_epoch), (0.5, 0.71, Some(3)));
    }

    #[test]
    fn improving_every_epoch_never_shifts() {
        let c = cfg(&[0.1, 0.01], 3, 0, false);
        let mut s = ScheduleState::new(ScheduleMode::Joint);
        for e in 1..=500 {
            let m = EpochMetrics { val_error: 1.0 / e as f64, val_acc: 0.0 };
            assert_eq!(patience_controller(&mut s, e, m, &c), Decision::Continue { improved: true });
        }
        assert!(s.shifts.is_empty());
    }

    #[test]
    fn ladder_validation() {
        assert!(cfg(&[0.1, 0.01], 1, 0, false).validate().is_ok());
        assert!(cfg(&[0.1, 0.1], 1, 0, false).validate().is_err());
        assert!(cfg(&[], 1, 0, false).validate().is_err());
        let mut c = cfg(&[0.1, 0.01, 0.001], 1, 0, false);
        c.lr_floor = Some(0.05);
        assert!(c.validate().is_err());
    }

    #[test]
    fn curves_have_one_row_per_epoch_per_series() {
        let rows: Vec<EpochRecord> = (1..=3)
            .map(|e| EpochRecord {
                epoch: e,
                lr_trunk: 0.1,
                lr_lstm: 0.1,
                lr_head: 0.1,
                train_loss: 1.0 / e as f64,
                val_error: Some(0.5),
                val_acc: Some(0.25),
            })
            .collect();
        let c = curves(&rows);
        assert_eq!(c.len(), 18);
        let mut buf = Vec::new();
        write_history_csv(&rows, &mut buf).unwrap();
        assert!(buf.starts_with(b"epoch,lr_trunk,lr_lstm,lr_head,train_loss,val_error,val_acc\n"));
        assert_eq!(read_history_csv(&buf[..]).unwrap(), rows);
    }
}
