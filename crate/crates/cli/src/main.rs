//! `crmn`: analyse, train, evaluate and gradient-check residual memory
//! networks.
//!
//! Exit codes: 0 success, 2 usage, 3 data or file format, 4 numeric failure.

mod manifest;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use crmn::analysis::{self, ModelKind, TableRow};
use crmn::checkpoint::Checkpoint;
use crmn::data::{self, AugmentPolicy, NormalizeMode};
use crmn::gradcheck::{self, GradReport, TOLERANCE};
use crmn::lstm::OutputGate;
use crmn::model;
use crmn::training::{self, ScheduleSource, TrainConfig};
use crmn::{Error, NetworkConfig, Shortcut, Variant};
use serde_json::json;

use manifest::{DataSpec, RunManifest, ScheduleSpec};

#[derive(Parser)]
#[command(name = "crmn", version, about = "Convolutional residual memory networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and operation counts as JSON.
    Analyze(AnalyzeArgs),
    /// Train a model; writes a checkpoint, history CSV, schedule JSON and
    /// run manifest.
    Train(Box<TrainArgs>),
    /// Loss and accuracy of a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Finite-difference gradient verification.
    Gradcheck(GradcheckArgs),
    /// Long-format (series, epoch, value) CSV from a history file.
    Curves(CurvesArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Crmn,
    Resnet,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Crmn => ModelKind::Crmn,
            KindArg::Resnet => ModelKind::Resnet,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TableArg {
    DefaultGrid,
}

#[derive(Args)]
struct NetArgs {
    #[arg(long, value_enum, default_value = "crmn")]
    kind: KindArg,
    /// Total layers, 6n+2.
    #[arg(long, default_value_t = 32)]
    layers: usize,
    /// Width multiplier of the 16-map baseline.
    #[arg(long, default_value_t = 1.0)]
    fm_mult: f64,
    #[arg(long, default_value_t = 100)]
    hidden: usize,
    #[arg(long, default_value_t = 100)]
    classes: usize,
    /// Residual block ordering; defaults to pre-activation from 64 base maps.
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, value_enum, default_value = "zero-pad")]
    shortcut: ShortcutArg,
    #[arg(long, value_enum, default_value = "tanh")]
    output_gate: GateArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Original,
    Preactivation,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShortcutArg {
    ZeroPad,
    Projection,
}

#[derive(Clone, Copy, ValueEnum)]
enum GateArg {
    Tanh,
    Logistic,
}

impl NetArgs {
    fn config(&self, extent: usize) -> crmn::Result<NetworkConfig> {
        let mut cfg = NetworkConfig::from_layers(self.layers, self.fm_mult, self.classes)?
            .with_hidden(self.hidden)
            .with_shortcut(match self.shortcut {
                ShortcutArg::ZeroPad => Shortcut::ZeroPad,
                ShortcutArg::Projection => Shortcut::Projection,
            })
            .with_output_gate(match self.output_gate {
                GateArg::Tanh => OutputGate::Tanh,
                GateArg::Logistic => OutputGate::Logistic,
            });
        if let Some(v) = self.variant {
            cfg = cfg.with_variant(match v {
                VariantArg::Original => Variant::Original,
                VariantArg::Preactivation => Variant::Preactivation,
            });
        }
        cfg.input_extent = extent;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    net: NetArgs,
    /// Report a predefined grid of configurations instead.
    #[arg(long, value_enum)]
    table: Option<TableArg>,
    /// Human-readable table instead of JSON.
    #[arg(long)]
    pretty: bool,
}

#[derive(Args)]
struct DataArgs {
    /// CIFAR-10 binary training files.
    #[arg(long, num_args = 1.., conflicts_with_all = ["cifar100", "raw"])]
    cifar10: Vec<PathBuf>,
    /// CIFAR-100 binary training file(s).
    #[arg(long, num_args = 1.., conflicts_with = "raw")]
    cifar100: Vec<PathBuf>,
    /// Raw tensor container for training.
    #[arg(long)]
    raw: Option<PathBuf>,
    /// Test file in the same format as the training data.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Synthetic data: number of classes (used when no files are given).
    #[arg(long, default_value_t = 4)]
    synth_classes: usize,
    #[arg(long, default_value_t = 64)]
    synth_per_class: usize,
    #[arg(long, default_value_t = 16)]
    synth_test_per_class: usize,
    #[arg(long, default_value_t = 32)]
    synth_extent: usize,
    #[arg(long, default_value_t = 0)]
    synth_seed: u64,
}

impl DataArgs {
    fn spec(&self) -> DataSpec {
        if !self.cifar10.is_empty() || !self.cifar100.is_empty() {
            let (variant, train) = if self.cifar10.is_empty() {
                (data::CifarVariant::C100, self.cifar100.clone())
            } else {
                (data::CifarVariant::C10, self.cifar10.clone())
            };
            DataSpec::Cifar {
                variant,
                train,
                test: self.test.clone(),
            }
        } else if let Some(raw) = &self.raw {
            DataSpec::Raw {
                train: raw.clone(),
                test: self.test.clone(),
            }
        } else {
            DataSpec::Synth {
                classes: self.synth_classes,
                per_class: self.synth_per_class,
                test_per_class: self.synth_test_per_class,
                extent: self.synth_extent,
                seed: self.synth_seed,
            }
        }
    }

    fn extent(&self) -> usize {
        match self.spec() {
            DataSpec::Synth { extent, .. } => extent,
            _ => data::CIFAR_EXTENT,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    None,
    MeanPixel,
    Gcn,
}

#[derive(Args)]
struct TrainArgs {
    /// Take every setting from a run manifest; other flags except --out are
    /// ignored.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    net: NetArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.01,0.001")]
    lr_ladder: Vec<f64>,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    /// Epochs without validation improvement before a shift.
    #[arg(long, default_value_t = 10)]
    patience: usize,
    /// Earliest epoch of the first shift.
    #[arg(long, default_value_t = 70)]
    min_epochs: usize,
    #[arg(long)]
    lr_floor: Option<f64>,
    /// Epoch budget.
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Round-robin shifts: trunk, then LSTM, then head.
    #[arg(long)]
    rrlr: bool,
    /// Weight decay on biases, normalization shifts and initial states too.
    #[arg(long)]
    decay_all: bool,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    flip: bool,
    #[arg(long, value_enum, default_value = "mean-pixel")]
    normalize: NormArg,
    /// Patience search on a 10% validation split (the default).
    #[arg(long, conflicts_with_all = ["schedule_replay", "constant_lr"])]
    schedule_search: bool,
    /// Apply a recorded schedule JSON, training on all data.
    #[arg(long, conflicts_with = "constant_lr")]
    schedule_replay: Option<PathBuf>,
    /// Keep the first ladder rate throughout, training on all data.
    #[arg(long)]
    constant_lr: bool,
    /// Output directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

impl TrainArgs {
    fn manifest(&self) -> Result<RunManifest, CliError> {
        if let Some(path) = &self.manifest {
            let m: RunManifest = serde_json::from_slice(&read(path)?).map_err(Error::from)?;
            m.validate()?;
            return Ok(m);
        }
        let extent = self.data.extent();
        let network = self.net.config(extent)?;
        let schedule = match (&self.schedule_replay, self.constant_lr) {
            (Some(p), _) => ScheduleSpec::Replay {
                shifts: training::parse_schedule(&read(p)?)?,
            },
            (None, true) => ScheduleSpec::Constant,
            (None, false) => ScheduleSpec::Search,
        };
        let train = TrainConfig {
            lr_ladder: self.lr_ladder.clone(),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            patience: self.patience,
            min_epochs_first_shift: self.min_epochs,
            lr_floor: self.lr_floor,
            max_epochs: self.epochs,
            seed: self.seed,
            rrlr: self.rrlr,
            decay_all: self.decay_all,
            augment: (!self.no_augment).then(|| AugmentPolicy {
                flip: self.flip,
                ..AugmentPolicy::for_extent(extent)
            }),
        };
        let m = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            kind: self.net.kind.into(),
            network,
            train,
            schedule,
            data: self.data.spec(),
            normalize: match self.normalize {
                NormArg::None => None,
                NormArg::MeanPixel => Some(NormalizeMode::MeanPixel),
                NormArg::Gcn => Some(NormalizeMode::Gcn),
            },
            model_seed: self.seed,
            split_seed: self.split_seed,
            deterministic: deterministic_flag(),
            checksums: Default::default(),
        };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run manifest of the training run, for data and normalization.
    #[arg(long)]
    manifest: PathBuf,
    /// Which split of the manifest's data to score.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Ops,
    Lstm,
    Full,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "lstm")]
    scope: Scope,
    /// Flip the sign of the cell-update gradient; the check must fail.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct CurvesArgs {
    history: PathBuf,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    /// Gradient check ran but exceeded the tolerance.
    Mismatch(GradReport),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::Input(_)) => 2,
            CliError::Core(Error::Numeric(_)) | CliError::Mismatch(_) => 4,
            CliError::Core(_) => 3,
        }
    }
}

fn deterministic_flag() -> bool {
    std::env::var("CRMN_DETERMINISTIC").is_ok_and(|v| v == "1")
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| {
        CliError::Core(Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| {
        CliError::Core(Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
    })
}

fn stdout_line(s: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{s}");
}

fn analyze(a: &AnalyzeArgs) -> Result<(), CliError> {
    let rows = match a.table {
        Some(TableArg::DefaultGrid) => analysis::default_grid(),
        None => vec![TableRow {
            kind: a.net.kind.into(),
            config: a.net.config(32)?,
        }],
    };
    if a.pretty {
        print!("{}", analysis::render_table(&rows)?);
        return Ok(());
    }
    let reports = rows
        .iter()
        .map(|r| analysis::cost_report(r.kind, &r.config))
        .collect::<crmn::Result<Vec<_>>>()?;
    let value = match a.table {
        Some(_) => serde_json::to_string_pretty(&reports),
        None => serde_json::to_string_pretty(&reports[0]),
    }
    .map_err(Error::from)?;
    stdout_line(&value);
    Ok(())
}

/// Data for a manifest: (training set, validation set, held-out set), all
/// normalized with statistics of the training set.
type Splits = (data::ImageDataset, Option<data::ImageDataset>, Option<data::ImageDataset>);

fn prepare_data(m: &RunManifest) -> Result<Splits, CliError> {
    let (pool, test) = m.data.load()?;
    m.check_checksums(&pool, test.as_ref())?;
    if pool.extent() != m.network.input_extent {
        return Err(Error::Input(format!(
            "images are {0}x{0}, network expects {1}x{1}",
            pool.extent(),
            m.network.input_extent
        ))
        .into());
    }
    if pool.classes > m.network.classes {
        return Err(Error::Input(format!(
            "data has {} classes, network has {}",
            pool.classes, m.network.classes
        ))
        .into());
    }
    let (train, val) = match m.schedule {
        ScheduleSpec::Search => {
            let (t, v) = data::split_validation(&pool, m.split_seed)?;
            (t, Some(v))
        }
        _ => (pool, None),
    };
    let Some(mode) = m.normalize else {
        return Ok((train, val, test));
    };
    let stats = data::fit_normalization(&train, mode);
    let apply = |d: &data::ImageDataset| data::apply_normalization(d, &stats);
    Ok((
        apply(&train)?,
        val.as_ref().map(apply).transpose()?,
        test.as_ref().map(apply).transpose()?,
    ))
}

fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mut m = a.manifest()?;
    let (pool, test) = m.data.load()?;
    m.checksums = manifest::checksums(&pool, test.as_ref());
    drop((pool, test));
    let (train_set, val, test) = prepare_data(&m)?;
    let source = match &m.schedule {
        ScheduleSpec::Search => ScheduleSource::Search,
        ScheduleSpec::Replay { shifts } => ScheduleSource::Replay(shifts.clone()),
        ScheduleSpec::Constant => ScheduleSource::Constant,
    };
    // Search validates on the held-out 10%; otherwise the test split, when
    // present, fills the validation columns of the history.
    let monitor = val.as_ref().or(test.as_ref());
    let mut net = model::build::<f32>(m.kind, &m.network, m.model_seed)?;
    eprintln!(
        "training {} ({} layers, {} parameters) on {} images",
        m.kind,
        m.network.layer_count(),
        net.store().scalar_count(),
        train_set.len()
    );
    let outcome = training::train(net.as_mut(), &train_set, monitor, &m.train, &source, |r| {
        eprintln!(
            "epoch {:>4}  lr {:.4}/{:.4}/{:.4}  train {:.4}  val {}  acc {}",
            r.epoch,
            r.lr_trunk,
            r.lr_lstm,
            r.lr_head,
            r.train_loss,
            r.val_error.map_or("-".into(), |v| format!("{v:.4}")),
            r.val_acc.map_or("-".into(), |v| format!("{v:.4}")),
        )
    })?;

    fs::create_dir_all(&a.out).map_err(Error::from)?;
    let ck = Checkpoint::from_store(m.kind, &m.network, net.store());
    write_file(&a.out.join("model.ckpt"), &ck.to_bytes()?)?;
    let mut csv = Vec::new();
    training::write_history_csv(&outcome.history, &mut csv)?;
    write_file(&a.out.join("history.csv"), &csv)?;
    let schedule = serde_json::to_vec_pretty(&outcome.schedule).map_err(Error::from)?;
    write_file(&a.out.join("schedule.json"), &schedule)?;
    let manifest = serde_json::to_vec_pretty(&m).map_err(Error::from)?;
    write_file(&a.out.join("manifest.json"), &manifest)?;

    let summary = json!({
        "out": a.out,
        "epochs": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "stop": outcome.stop,
        "shifts": outcome.schedule.len(),
        "final_train_loss": outcome.history.last().map(|r| r.train_loss),
    });
    stdout_line(&summary.to_string());
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let m: RunManifest = serde_json::from_slice(&read(&a.manifest)?).map_err(Error::from)?;
    let ck = Checkpoint::parse(&read(&a.checkpoint)?)?;
    let mut net = model::build::<f32>(ck.manifest.kind, &ck.manifest.config, 0)?;
    ck.load_into(net.store_mut())?;
    let (train_set, _, test) = prepare_data(&m)?;
    let ds = match a.split {
        SplitArg::Train => train_set,
        SplitArg::Test => test.ok_or_else(|| Error::Input("manifest has no test split".into()))?,
    };
    let (loss, acc) = training::evaluate(net.as_mut(), &ds, a.batch_size)?;
    stdout_line(&json!({"images": ds.len(), "loss": loss, "accuracy": acc}).to_string());
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let report = match a.scope {
        Scope::Ops => gradcheck::ops_suite()?,
        Scope::Lstm => gradcheck::lstm_suite(a.inject_fault)?,
        Scope::Full => gradcheck::micro_crmn_suite(a.inject_fault)?,
    };
    let pass = report.passes(TOLERANCE);
    stdout_line(&json!({"pass": pass, "tolerance": TOLERANCE, "report": report}).to_string());
    if pass {
        Ok(())
    } else {
        Err(CliError::Mismatch(report))
    }
}

fn curves(a: &CurvesArgs) -> Result<(), CliError> {
    let rows = training::read_history_csv(&read(&a.history)?[..])?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["series", "epoch", "value"]).map_err(Error::from)?;
    for (series, epoch, value) in training::curves(&rows) {
        w.write_record([series, &epoch.to_string(), &value.to_string()]).map_err(Error::from)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    match &a.out {
        Some(p) => write_file(p, &bytes),
        None => {
            std::io::stdout().lock().write_all(&bytes).map_err(Error::from)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Curves(a) => curves(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Core(err) => eprintln!("error: {err}"),
                CliError::Mismatch(r) => eprintln!(
                    "error: gradient mismatch, max relative error {:.3e} at {:?}",
                    r.max_rel_err, r.worst
                ),
            }
            ExitCode::from(e.exit_code())
        }
    }
}
