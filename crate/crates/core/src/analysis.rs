//! Closed-form parameter and operation counts.
//!
//! Everything here is computed from a [`NetworkConfig`] alone; nothing is
//! instantiated. Operation counts are per image for an inference pass up to
//! the logits, counting each multiplication, addition and activation
//! evaluation as one operation:
//!
//! - a length-`k` dot product is `k` multiplications and `k - 1` additions
//! - a convolution output costs `c·k²` multiplications and `c·k² - 1`
//!   additions (padding taps included)
//! - batch norm is two multiplications and two additions per element
//! - 2×2 mean pooling is three additions and one multiplication per output
//! - global average pooling is `H·W - 1` additions and one multiplication
//!   per map
//! - ReLU, sigmoid and tanh are one activation per element
//! - reshapes, zero padding, concatenation and subsampling are free

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::resnet::{NetworkConfig, Shortcut, Variant};
use crate::tensor::OpCount;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Resnet,
    Crmn,
}

impl std::str::FromStr for ModelKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "resnet" => Ok(ModelKind::Resnet),
            "crmn" => Ok(ModelKind::Crmn),
            other => Err(crate::Error::Input(format!("unknown model kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Resnet => "ResNet",
            ModelKind::Crmn => "CRMN",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub trunk: u64,
    pub lstm: u64,
    pub head: u64,
    pub total: u64,
}

impl ParamBreakdown {
    pub fn millions(&self) -> f64 {
        self.total as f64 / 1e6
    }
}

/// Cost of one residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCost {
    /// Output maps `f`.
    pub maps: usize,
    /// Output extent `n`.
    pub extent: usize,
    /// Kernel size `k`.
    pub kernel: usize,
    pub stride: usize,
    pub cost: OpCount,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub stem: OpCount,
    pub blocks: Vec<BlockCost>,
    /// Final normalisation (pre-activation variant) and global pooling.
    pub pool: OpCount,
    /// Pooling of every tap before it enters the LSTM.
    pub adapters: OpCount,
    pub lstm_step: OpCount,
    pub lstm_steps: usize,
    pub lstm: OpCount,
    pub head: OpCount,
    pub total: OpCount,
    pub total_ops: u64,
    /// Operations of the same config without the memory (trunk, pool and a
    /// pool-only head).
    pub resnet_ops: u64,
    /// `total_ops / resnet_ops`.
    pub memory_ratio: f64,
}

/// Full report as emitted by the command line tool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub kind: ModelKind,
    pub layers: usize,
    pub config: NetworkConfig,
    pub params: ParamBreakdown,
    pub flops: FlopBreakdown,
}

fn block_inputs(cfg: &NetworkConfig) -> Vec<(usize, usize, usize, usize, usize)> {
    // (in maps, out maps, stride, in extent, out extent) per block
    let mut out = Vec::new();
    let mut in_maps = cfg.base_maps;
    let mut in_ext = cfg.input_extent;
    for (s, (&maps, ext)) in cfg.stage_maps().iter().zip(cfg.stage_extents()).enumerate() {
        for b in 0..cfg.n {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            out.push((in_maps, maps, stride, in_ext, ext));
            in_maps = maps;
            in_ext = ext;
        }
    }
    out
}

fn has_shortcut_params(cfg: &NetworkConfig, in_maps: usize, out_maps: usize, stride: usize) -> bool {
    cfg.shortcut == Shortcut::Projection && (in_maps != out_maps || stride != 1)
}

/// Trainable scalars per component.
pub fn param_count(kind: ModelKind, cfg: &NetworkConfig) -> Result<ParamBreakdown> {
    cfg.validate()?;
    let f = cfg.base_maps as u64;
    let original = cfg.variant == Variant::Original;
    let mut trunk = 3 * f * 9;
    if original {
        trunk += 2 * f;
    }
    for (cin, cout, stride, _, _) in block_inputs(cfg) {
        let (i, o) = (cin as u64, cout as u64);
        trunk += i * o * 9 + o * o * 9;
        trunk += if original { 4 * o } else { 2 * i + 2 * o };
        if has_shortcut_params(cfg, cin, cout, stride) {
            trunk += i * o + if original { 2 * o } else { 0 };
        }
    }
    if !original {
        trunk += 2 * 4 * f;
    }
    let classes = cfg.classes as u64;
    let h = cfg.hidden_size as u64;
    let (lstm, head_in) = match kind {
        ModelKind::Resnet => (0, 4 * f),
        ModelKind::Crmn => {
            let i = cfg.max_width() as u64;
            let initial = if cfg.learn_initial_cell { 2 * h } else { h };
            (4 * (h * i + h * h + h) + 3 * h + initial, 4 * f + h)
        }
    };
    let head = head_in * classes + classes;
    Ok(ParamBreakdown {
        trunk,
        lstm,
        head,
        total: trunk + lstm + head,
    })
}

fn conv_ops(cin: usize, cout: usize, k: usize, ext: usize) -> OpCount {
    let outputs = (cout * ext * ext) as u64;
    let taps = (cin * k * k) as u64;
    OpCount::new(outputs * taps, outputs * (taps - 1), 0)
}

fn bn_ops(maps: usize, ext: usize) -> OpCount {
    let n = (maps * ext * ext) as u64;
    OpCount::new(2 * n, 2 * n, 0)
}

fn act_ops(maps: usize, ext: usize) -> OpCount {
    OpCount::new(0, 0, (maps * ext * ext) as u64)
}

fn add_ops(maps: usize, ext: usize) -> OpCount {
    OpCount::new(0, (maps * ext * ext) as u64, 0)
}

/// `1×d · d×k` product plus bias.
fn dense_ops(d: usize, k: usize) -> OpCount {
    let (d, k) = (d as u64, k as u64);
    OpCount::new(d * k, (d - 1) * k + k, 0)
}

/// One LSTM step for input width `i` and hidden size `h`.
pub fn lstm_step_ops(i: usize, h: usize) -> OpCount {
    let (i, h) = (i as u64, h as u64);
    // four gates: W_x x and W_h h products, their sum, the bias
    let mut c = OpCount::new(4 * (h * i + h * h), 4 * (h * (i - 1) + h * (h - 1)) + 4 * h + 4 * h, 0);
    // three peepholes: product and sum
    c += OpCount::new(3 * h, 3 * h, 0);
    // cell update f⊙c + i⊙s, output o⊙tanh(c)
    c += OpCount::new(3 * h, h, 0);
    // σ(i), σ(f), tanh(s), σ_o(o), tanh(c)
    c += OpCount::new(0, 0, 5 * h);
    c
}

/// Per-image operation counts.
pub fn flop_estimate(kind: ModelKind, cfg: &NetworkConfig) -> Result<FlopBreakdown> {
    cfg.validate()?;
    let f = cfg.base_maps;
    let e = cfg.input_extent;
    let original = cfg.variant == Variant::Original;

    let mut stem = conv_ops(3, f, 3, e);
    if original {
        stem += bn_ops(f, e) + act_ops(f, e);
    }

    let mut blocks = Vec::new();
    for (cin, cout, stride, ein, eout) in block_inputs(cfg) {
        let mut cost = conv_ops(cin, cout, 3, eout) + conv_ops(cout, cout, 3, eout);
        cost += bn_ops(cout, eout) + act_ops(cout, eout);
        if original {
            cost += bn_ops(cout, eout);
        } else {
            cost += bn_ops(cin, ein) + act_ops(cin, ein);
        }
        if has_shortcut_params(cfg, cin, cout, stride) {
            cost += conv_ops(cin, cout, 1, eout);
            if original {
                cost += bn_ops(cout, eout);
            }
        }
        cost += add_ops(cout, eout);
        if original {
            cost += act_ops(cout, eout);
        }
        blocks.push(BlockCost {
            maps: cout,
            extent: eout,
            kernel: 3,
            stride,
            cost,
        });
    }

    let last_maps = 4 * f;
    let last_ext = e / 4;
    let mut pool = OpCount::new(last_maps as u64, (last_maps * (last_ext * last_ext - 1)) as u64, 0);
    if !original {
        pool += bn_ops(last_maps, last_ext) + act_ops(last_maps, last_ext);
    }

    let trunk_total = blocks.iter().fold(stem + pool, |acc, b| acc + b.cost);
    let resnet_head = dense_ops(last_maps, cfg.classes);
    let resnet_ops = (trunk_total + resnet_head).total();

    let (adapters, lstm_step, lstm_steps, head) = match kind {
        ModelKind::Resnet => (OpCount::default(), OpCount::default(), 0, resnet_head),
        ModelKind::Crmn => {
            let adapters = blocks.iter().fold(OpCount::default(), |acc, b| {
                let outputs = (b.maps * (b.extent / 2) * (b.extent / 2)) as u64;
                acc + OpCount::new(outputs, 3 * outputs, 0)
            });
            let step = lstm_step_ops(cfg.max_width(), cfg.hidden_size);
            (adapters, step, blocks.len(), dense_ops(last_maps + cfg.hidden_size, cfg.classes))
        }
    };
    let lstm = lstm_step.scaled(lstm_steps as u64);
    let total = trunk_total + adapters + lstm + head;
    Ok(FlopBreakdown {
        stem,
        blocks,
        pool,
        adapters,
        lstm_step,
        lstm_steps,
        lstm,
        head,
        total,
        total_ops: total.total(),
        resnet_ops,
        memory_ratio: total.total() as f64 / resnet_ops as f64,
    })
}

pub fn cost_report(kind: ModelKind, cfg: &NetworkConfig) -> Result<CostReport> {
    Ok(CostReport {
        kind,
        layers: cfg.layer_count(),
        config: cfg.clone(),
        params: param_count(kind, cfg)?,
        flops: flop_estimate(kind, cfg)?,
    })
}

/// One row of a comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub kind: ModelKind,
    pub config: NetworkConfig,
}

/// The twelve-row depth/width comparison grid on 100 classes: four deep
/// ResNets, four 32-layer ResNets and four 32-layer CRMNs.
pub fn default_grid() -> Vec<TableRow> {
    let rows: [(ModelKind, usize, f64); 12] = [
        (ModelKind::Resnet, 134, 1.0),
        (ModelKind::Resnet, 104, 1.5),
        (ModelKind::Resnet, 92, 2.0),
        (ModelKind::Resnet, 62, 4.0),
        (ModelKind::Resnet, 32, 1.0),
        (ModelKind::Resnet, 32, 1.5),
        (ModelKind::Resnet, 32, 2.0),
        (ModelKind::Resnet, 32, 4.0),
        (ModelKind::Crmn, 32, 1.0),
        (ModelKind::Crmn, 32, 1.5),
        (ModelKind::Crmn, 32, 2.0),
        (ModelKind::Crmn, 32, 4.0),
    ];
    rows.iter()
        .map(|&(kind, layers, mult)| TableRow {
            kind,
            config: NetworkConfig::from_layers(layers, mult, 100).expect("grid rows are 6n+2"),
        })
        .collect()
}

fn format_multiplier(base_maps: usize) -> String {
    let m = base_maps as f64 / 16.0;
    let s = format!("{m:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Text table of layers, width multiplier and parameters in millions.
pub fn render_table(rows: &[TableRow]) -> Result<String> {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<8} {:>6} {:>10} {:>14} {:>16}\n",
        "Model", "Layers", "F.map 16x", "Params (M)", "Ops/image (M)"
    ));
    for row in rows {
        let p = param_count(row.kind, &row.config)?;
        let f = flop_estimate(row.kind, &row.config)?;
        out.push_str(&format!(
            "{:<8} {:>6} {:>10} {:>14.2} {:>16.2}\n",
            row.kind.to_string(),
            row.config.layer_count(),
            format_multiplier(row.config.base_maps),
            p.millions(),
            f.total_ops as f64 / 1e6
        ));
    }
    Ok(out)
}
