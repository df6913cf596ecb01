//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use crmn::analysis::{default_grid, flop_estimate, lstm_step_ops, param_count, ModelKind};
use crmn::crmn::adapter_trace;
use crmn::data::{synth_dataset, synth_images, Split};
use crmn::gradcheck::{lstm_suite, micro_crmn_suite, TOLERANCE};
use crmn::layers::Ctx;
use crmn::params::Group::{Head, Lstm, Trunk};
use crmn::training::{
    evaluate, patience_controller, train, write_history_csv, Decision, EpochMetrics, ScheduleMode, ScheduleSource,
    ScheduleState, ShiftRecord, TrainConfig,
};
use crmn::{init, Classifier, Crmn, Mode, NetworkConfig, ResNet, Shortcut, Tape, Tensor, Variant};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Published parameter counts in millions, in `default_grid` order.
const TABLE_PARAMS: [f64; 12] = [2.12, 3.67, 5.74, 15.16, 0.47, 1.05, 1.86, 7.41, 2.16, 3.56, 5.19, 14.01];

fn table_params() -> Outcome {
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for (row, &want) in default_grid().iter().zip(&TABLE_PARAMS) {
        let got = param_count(row.kind, &row.config).map_err(|e| e.to_string())?.millions();
        let rel = (got - want).abs() / want;
        worst = worst.max(rel);
        if rel > 0.02 {
            lines.push(format!("{}-{} x{}: {got:.3} vs {want}", row.kind, row.config.layer_count(), row.config.base_maps));
        }
    }
    check(lines.is_empty(), format!("12 cells, worst relative deviation {:.3}% {}", worst * 100.0, lines.join("; ")))
}

fn structural_counts() -> Outcome {
    let configs = [
        NetworkConfig::new(1, 4, 3).with_hidden(5),
        NetworkConfig::new(2, 8, 10).with_hidden(32),
        NetworkConfig::new(3, 16, 100),
        NetworkConfig::new(1, 24, 10).with_variant(Variant::Preactivation),
        NetworkConfig::new(2, 6, 7).with_shortcut(Shortcut::Projection),
        NetworkConfig::new(5, 64, 100),
    ];
    for cfg in &configs {
        let c = Crmn::<f32>::new(cfg, 0).map_err(|e| e.to_string())?;
        let r = ResNet::<f32>::new(cfg, 0).map_err(|e| e.to_string())?;
        let pc = param_count(ModelKind::Crmn, cfg).unwrap().total;
        let pr = param_count(ModelKind::Resnet, cfg).unwrap().total;
        if pc != c.store().scalar_count() || pr != r.store().scalar_count() {
            return Err(format!(
                "n={} base={}: crmn {pc} vs {}, resnet {pr} vs {}",
                cfg.n,
                cfg.base_maps,
                c.store().scalar_count(),
                r.store().scalar_count()
            ));
        }
    }
    Ok(format!("{} configs x 2 kinds exact", configs.len()))
}

fn constant_memory() -> Outcome {
    let mut parts = Vec::new();
    for base in [16, 32] {
        let d: Vec<u64> = [3, 5, 8]
            .iter()
            .map(|&n| {
                let cfg = NetworkConfig::new(n, base, 100);
                param_count(ModelKind::Crmn, &cfg).unwrap().total - param_count(ModelKind::Resnet, &cfg).unwrap().total
            })
            .collect();
        if d.windows(2).any(|w| w[0] != w[1]) {
            return Err(format!("base {base}: {d:?}"));
        }
        parts.push(format!("base {base}: +{}", d[0]));
    }
    Ok(parts.join(", "))
}

fn gradients() -> Outcome {
    let lstm = lstm_suite(false).map_err(|e| e.to_string())?;
    let full = micro_crmn_suite(false).map_err(|e| e.to_string())?;
    check(
        lstm.passes(TOLERANCE) && full.passes(TOLERANCE),
        format!(
            "lstm {} scalars max {:.2e}; micro-CRMN {} scalars max {:.2e}",
            lstm.checked, lstm.max_rel_err, full.checked, full.max_rel_err
        ),
    )
}

fn random_images(cfg: &NetworkConfig, b: usize, seed: u64) -> Tensor<f32> {
    let e = cfg.input_extent;
    Tensor::from_f64(&[b, 3, e, e], &init::normal(&mut init::seeded(seed), b * 3 * e * e, 1.0)).unwrap()
}

fn architecture() -> Outcome {
    for (n, base) in [(1, 4), (2, 8), (5, 16)] {
        let cfg = NetworkConfig::new(n, base, 10).with_hidden(8);
        let w = base * 256;
        let trace = adapter_trace(&cfg);
        let pads_ok = trace.iter().enumerate().all(|(k, t)| t.pad == [0, w / 2, 3 * w / 4][k / n]);
        let mut crmn = Crmn::<f32>::new(&cfg, 3).unwrap();
        if trace.len() != 3 * n || crmn.layer_count() != 6 * n + 2 || crmn.max_width() != w || !pads_ok {
            return Err(format!("n={n} base={base}: taps {}, layers {}, width {}", trace.len(), crmn.layer_count(), crmn.max_width()));
        }

        let x = random_images(&cfg, 2, 4);
        let mut t1 = Tape::new();
        let b1 = crmn.store().bind(&mut t1);
        let xv = t1.constant(x.clone());
        let full = crmn.forward_full(&mut t1, &b1, xv, Mode::Train).unwrap();

        let mut plain = ResNet::<f32>::new(&cfg, 3).unwrap();
        let trunk = plain.trunk().clone();
        let mut t2 = Tape::new();
        let b2 = plain.store().bind(&mut t2);
        let xv = t2.constant(x);
        let mut cx = Ctx { tape: &mut t2, store: plain.store_mut(), bound: &b2, mode: Mode::Train };
        let alone = trunk.forward(&mut cx, xv).unwrap();
        let bits = |t: &Tape<f32>, v| t.value(v).data().iter().map(|f| f.to_bits()).collect::<Vec<u32>>();
        let same = full.taps.iter().zip(&alone.taps).all(|(a, b)| bits(&t1, *a) == bits(&t2, *b))
            && bits(&t1, full.pool) == bits(&t2, alone.pool);
        if !same {
            return Err(format!("n={n} base={base}: trunk activations differ with the LSTM attached"));
        }
    }
    Ok("taps 3n, layers 6n+2, width base*256 with pads 0, w/2, 3w/4; trunk bit-identical".into())
}

fn flops() -> Outcome {
    let mut parts = Vec::new();
    for kind in [ModelKind::Resnet, ModelKind::Crmn] {
        let cfg = NetworkConfig::new(1, 4, 3).with_hidden(5);
        let mut model = crmn::model::build::<f32>(kind, &cfg, 1).unwrap();
        let mut tape = Tape::new();
        let bound = model.store().bind_with(&mut tape, false);
        let x = tape.constant(random_images(&cfg, 1, 2));
        tape.reset_op_count();
        model.forward_bound(&mut tape, &bound, x, Mode::Eval).unwrap();
        let measured = tape.op_count().total();
        let estimate = flop_estimate(kind, &cfg).unwrap().total_ops;
        if measured != estimate {
            return Err(format!("{kind}: instrumented {measured} vs estimate {estimate}"));
        }
        parts.push(format!("{kind} {measured}"));
    }
    let h = 100;
    let step = |i: usize| lstm_step_ops(i, h).total() as i64;
    let slope = step(2048) - step(1024);
    let linear = [4096, 8192, 16384].iter().all(|&i| step(i + 1024) - step(i) == slope);
    check(linear, format!("instrumented == estimate ({}); LSTM step linear in i", parts.join(", ")))
}

fn schedules() -> Outcome {
    let flat = EpochMetrics { val_error: 1.0, val_acc: 0.5 };
    let run = |c: &TrainConfig, mode| {
        let mut s = ScheduleState::new(mode);
        let mut out = Vec::new();
        for e in 1..=200 {
            let d = patience_controller(&mut s, e, flat, c);
            if !matches!(d, Decision::Continue { .. }) {
                let stop = d == Decision::Stop;
                out.push((e, d));
                if stop {
                    break;
                }
            }
        }
        out
    };
    let sh = |g: &[crmn::Group]| Decision::ReloadAndShift(g.to_vec());
    let rr = TrainConfig { lr_ladder: vec![0.1, 0.01, 0.001], patience: 2, min_epochs_first_shift: 4, rrlr: true, ..TrainConfig::default() };
    let rr_want = vec![
        (4, sh(&[Trunk])),
        (6, sh(&[Lstm])),
        (8, sh(&[Head])),
        (10, sh(&[Trunk])),
        (12, sh(&[Lstm])),
        (14, sh(&[Head])),
        (16, Decision::Stop),
    ];
    let joint = TrainConfig { patience: 2, min_epochs_first_shift: 70, ..rr.clone() };
    let all = [Trunk, Lstm, Head];
    let joint_want = vec![(70, sh(&all)), (72, sh(&all)), (74, Decision::Stop)];
    let rr_got = run(&rr, ScheduleMode::Rrlr);
    let joint_got = run(&joint, ScheduleMode::Joint);
    check(
        rr_got == rr_want && joint_got == joint_want,
        format!("rrlr 6 shifts trunk>lstm>head x2 then stop; joint first shift at m=70; got {} / {} decisions", rr_got.len(), joint_got.len()),
    )
}

fn learning() -> Outcome {
    // Memorisation: micro CRMN, 64 samples.
    let cfg = NetworkConfig::new(1, 4, 4).with_hidden(5);
    let ds = synth_dataset(4, 16, 1).unwrap();
    let mut m = Crmn::<f32>::new(&cfg, 1).unwrap();
    let mut reached = None;
    for epoch in 1..=200u64 {
        let tc = TrainConfig { lr_ladder: vec![0.05], batch_size: 16, max_epochs: 1, seed: epoch, augment: None, ..TrainConfig::default() };
        train(&mut m, &ds, None, &tc, &ScheduleSource::Constant, |_| {}).map_err(|e| e.to_string())?;
        let (_, acc) = evaluate(&mut m, &ds, 64).unwrap();
        if acc >= 0.99 {
            reached = Some((epoch, acc));
            break;
        }
    }
    let Some((epoch, acc)) = reached else {
        return Err("micro CRMN did not reach 99% train accuracy in 200 epochs".into());
    };

    // Generalisation: 14-layer CRMN, 10 classes, held-out split.
    let start = Instant::now();
    let cfg = NetworkConfig::new(2, 8, 10).with_hidden(32);
    let all = synth_images(10, 80, 32, 2).unwrap();
    let train_set = all.subset(&(0..600).collect::<Vec<_>>(), Split::Train).unwrap();
    let test_set = all.subset(&(600..800).collect::<Vec<_>>(), Split::Test).unwrap();
    let mut m = Crmn::<f32>::new(&cfg, 1).unwrap();
    let tc = TrainConfig { lr_ladder: vec![0.05, 0.005], batch_size: 50, max_epochs: 10, augment: Some(Default::default()), ..TrainConfig::default() };
    let schedule = ScheduleSource::Replay(vec![
        ShiftRecord { epoch: 7, group: Trunk, lr: 0.005 },
        ShiftRecord { epoch: 7, group: Lstm, lr: 0.005 },
        ShiftRecord { epoch: 7, group: Head, lr: 0.005 },
    ]);
    train(&mut m, &train_set, None, &tc, &schedule, |_| {}).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let (_, test_acc) = evaluate(&mut m, &test_set, 100).unwrap();
    let majority = test_set.majority_fraction();
    check(
        test_acc - majority >= 0.30 && elapsed < Duration::from_secs(600),
        format!(
            "micro overfit {:.0}% at epoch {epoch}; 14-layer held-out {:.1}% vs majority {:.1}% in {:.0?}",
            acc * 100.0,
            test_acc * 100.0,
            majority * 100.0,
            elapsed
        ),
    )
}

fn determinism() -> Outcome {
    std::env::set_var("CRMN_DETERMINISTIC", "1");
    let cfg = NetworkConfig::new(2, 8, 10).with_hidden(16);
    let ds = synth_dataset(10, 20, 3).unwrap();
    let (tr, val) = crmn::data::split_validation(&ds, 1).unwrap();
    let tc = TrainConfig { batch_size: 50, max_epochs: 3, seed: 9, ..TrainConfig::default() };
    let run = || {
        let mut m = Crmn::<f32>::new(&cfg, 4).unwrap();
        let out = train(&mut m, &tr, Some(&val), &tc, &ScheduleSource::Search, |_| {}).unwrap();
        let mut csv = Vec::new();
        write_history_csv(&out.history, &mut csv).unwrap();
        csv
    };
    let (a, b) = (run(), run());
    let rows = a.iter().filter(|&&c| c == b'\n').count() - 1;
    check(a == b && rows == 3, format!("{rows} epochs, {} history bytes, identical: {}", a.len(), a == b))
}

fn main() {
    let criteria: [(u32, &str, u64, fn() -> Outcome); 9] = [
        (1, "parameter table reproduction", 1, table_params),
        (2, "structural parameter counts", 30, structural_counts),
        (3, "depth-independent memory parameters", 1, constant_memory),
        (4, "finite-difference gradients", 120, gradients),
        (5, "architecture invariants", 10, architecture),
        (6, "operation counting", 10, flops),
        (7, "schedule state machines", 1, schedules),
        (8, "desk-scale learning", 900, learning),
        (9, "determinism", 300, determinism),
    ];
    let mut failed = 0;
    for (id, name, budget, f) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        let (ok, detail) = match result {
            Ok(d) if secs <= budget as f64 => (true, d),
            Ok(d) => (false, format!("{d}; over the {budget}s budget")),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "{} criterion {id} {name}: {detail} ({secs:.1}s)",
            if ok { "PASS" } else { "FAIL" }
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
