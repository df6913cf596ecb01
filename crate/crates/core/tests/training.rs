//! Schedule state machines and end-to-end training behaviour.

use crmn::data::{split_validation, synth_images};
use crmn::params::Group::{self, Head, Lstm, Trunk};
use crmn::training::{
    evaluate, patience_controller, train, Decision, EpochMetrics, ScheduleMode, ScheduleSource, ScheduleState,
    ShiftRecord, StopReason, TrainConfig,
};
use crmn::{Classifier, Crmn, NetworkConfig};

fn cfg(ladder: &[f64], patience: usize, m: usize, rrlr: bool) -> TrainConfig {
    TrainConfig {
        lr_ladder: ladder.to_vec(),
        patience,
        min_epochs_first_shift: m,
        rrlr,
        ..TrainConfig::default()
    }
}

/// Feeds one improving epoch, then flat metrics; returns each non-trivial
/// decision as (epoch, decision, ladder indices after it).
fn trace(c: &TrainConfig, mode: ScheduleMode, epochs: usize) -> Vec<(usize, Decision, [usize; 3])> {
    let mut s = ScheduleState::new(mode);
    let mut out = Vec::new();
    for e in 1..=epochs {
        let d = patience_controller(&mut s, e, EpochMetrics { val_error: 1.0, val_acc: 0.5 }, c);
        let stop = d == Decision::Stop;
        if !matches!(d, Decision::Continue { .. }) {
            out.push((e, d, s.index));
        }
        if stop {
            break;
        }
    }
    out
}

fn shift(groups: &[Group]) -> Decision {
    Decision::ReloadAndShift(groups.to_vec())
}

#[test]
fn rrlr_six_shift_trace() {
    // β = 2, m = 4, ladder of three rates; improvement only at epoch 1.
    let c = cfg(&[0.1, 0.01, 0.001], 2, 4, true);
    let expected = vec![
        (4, shift(&[Trunk]), [1, 0, 0]),
        (6, shift(&[Lstm]), [1, 1, 0]),
        (8, shift(&[Head]), [1, 1, 1]),
        (10, shift(&[Trunk]), [2, 1, 1]),
        (12, shift(&[Lstm]), [2, 2, 1]),
        (14, shift(&[Head]), [2, 2, 2]),
        (16, Decision::Stop, [2, 2, 2]),
    ];
    assert_eq!(trace(&c, ScheduleMode::Rrlr, 100), expected);
}

#[test]
fn rrlr_two_rung_ladder_stops_when_trunk_runs_out() {
    let c = cfg(&[0.1, 0.01], 2, 4, true);
    let expected = vec![
        (4, shift(&[Trunk]), [1, 0, 0]),
        (6, shift(&[Lstm]), [1, 1, 0]),
        (8, shift(&[Head]), [1, 1, 1]),
        (10, Decision::Stop, [1, 1, 1]),
    ];
    assert_eq!(trace(&c, ScheduleMode::Rrlr, 100), expected);
}

#[test]
fn joint_trace_with_first_shift_floor() {
    let c = cfg(&[0.1, 0.01, 0.001], 2, 70, false);
    let all = [Trunk, Lstm, Head];
    let expected = vec![
        (70, shift(&all), [1, 1, 1]),
        (72, shift(&all), [2, 2, 2]),
        (74, Decision::Stop, [2, 2, 2]),
    ];
    assert_eq!(trace(&c, ScheduleMode::Joint, 200), expected);
}

#[test]
fn improvement_resets_patience_between_shifts() {
    let c = cfg(&[0.1, 0.01, 0.001], 2, 0, true);
    let mut s = ScheduleState::new(ScheduleMode::Rrlr);
    let m = |err: f64, acc: f64| EpochMetrics { val_error: err, val_acc: acc };
    let seq = [
        (m(1.0, 0.1), Decision::Continue { improved: true }),
        (m(1.0, 0.1), Decision::Continue { improved: false }),
        (m(1.1, 0.2), Decision::Continue { improved: true }),
        (m(1.1, 0.2), Decision::Continue { improved: false }),
        (m(2.0, 0.0), shift(&[Trunk])),
        (m(0.9, 0.0), Decision::Continue { improved: true }),
        (m(0.95, 0.15), Decision::Continue { improved: false }),
        (m(0.95, 0.15), shift(&[Lstm])),
    ];
    for (e, (metrics, want)) in seq.into_iter().enumerate() {
        assert_eq!(patience_controller(&mut s, e + 1, metrics, &c), want, "epoch {}", e + 1);
    }
    assert_eq!(s.best_epoch, Some(6));
    assert_eq!((s.best_error, s.best_acc), (0.9, 0.2));
}

fn micro() -> (NetworkConfig, crmn::data::ImageDataset) {
    let mut net = NetworkConfig::new(1, 2, 4).with_hidden(6);
    net.input_extent = 16;
    (net, synth_images(4, 16, 16, 7).unwrap())
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr_ladder: vec![0.1, 0.01, 0.001],
        batch_size: 16,
        patience: 1,
        min_epochs_first_shift: 3,
        max_epochs: epochs,
        seed: 5,
        augment: Some(crmn::data::AugmentPolicy::for_extent(16)),
        ..TrainConfig::default()
    }
}

#[test]
fn seeded_runs_are_bit_identical() {
    let (net, ds) = micro();
    let run = || {
        let mut m = Crmn::<f32>::new(&net, 1).unwrap();
        train(&mut m, &ds, None, &quick(2), &ScheduleSource::Constant, |_| {}).unwrap().history
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), 2);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
    }
}

#[test]
fn search_ends_on_the_best_parameters() {
    let (net, ds) = micro();
    let (tr, val) = split_validation(&ds, 0).unwrap();
    let mut m = Crmn::<f32>::new(&net, 1).unwrap();
    let out = train(&mut m, &tr, Some(&val), &quick(60), &ScheduleSource::Search, |_| {}).unwrap();
    assert_eq!(out.stop, StopReason::LadderExhausted);
    assert_eq!(out.schedule.len(), 6);
    let best = out.best_epoch.unwrap();
    let row = out.history[best - 1];
    let (err, acc) = evaluate(&mut m, &val, 16).unwrap();
    // the restored parameters reproduce the best epoch's validation
    // metrics exactly
    assert_eq!(err.to_bits(), row.val_error.unwrap().to_bits());
    assert_eq!(acc, row.val_acc.unwrap());

    // every group's rate is non-increasing over the run
    for w in out.history.windows(2) {
        assert!(w[1].lr_trunk <= w[0].lr_trunk && w[1].lr_lstm <= w[0].lr_lstm && w[1].lr_head <= w[0].lr_head);
    }
}

#[test]
fn replay_shifts_exactly_at_recorded_epochs() {
    let (net, ds) = micro();
    let shifts = vec![
        ShiftRecord { epoch: 1, group: Trunk, lr: 0.01 },
        ShiftRecord { epoch: 2, group: Lstm, lr: 0.01 },
        ShiftRecord { epoch: 2, group: Head, lr: 0.001 },
    ];
    let mut m = Crmn::<f32>::new(&net, 1).unwrap();
    let out = train(&mut m, &ds, None, &quick(3), &ScheduleSource::Replay(shifts.clone()), |_| {}).unwrap();
    assert_eq!(out.schedule, shifts);
    let rates: Vec<[f64; 3]> = out.history.iter().map(|r| [r.lr_trunk, r.lr_lstm, r.lr_head]).collect();
    assert_eq!(rates, vec![[0.1, 0.1, 0.1], [0.01, 0.1, 0.1], [0.01, 0.01, 0.001]]);

    let off_ladder = vec![ShiftRecord { epoch: 1, group: Trunk, lr: 0.05 }];
    let mut m = Crmn::<f32>::new(&net, 1).unwrap();
    assert!(train(&mut m, &ds, None, &quick(1), &ScheduleSource::Replay(off_ladder), |_| {}).is_err());
}

#[test]
fn search_requires_validation() {
    let (net, ds) = micro();
    let mut m = Crmn::<f32>::new(&net, 1).unwrap();
    assert!(train(&mut m, &ds, None, &quick(1), &ScheduleSource::Search, |_| {}).is_err());
    assert!(m.store().scalar_count() > 0);
}
