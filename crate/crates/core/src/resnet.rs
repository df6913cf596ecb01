//! The 6n+2 layer residual trunk and the plain ResNet classifier built on it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;
use crate::layers::{BatchNorm, BatchNormConfig, Conv2d, Ctx, Dense, Mode};
use crate::lstm::OutputGate;
use crate::model::Classifier;
use crate::params::{Bound, Group, ParamStore};
use crate::tensor::{Scalar, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// conv-BN-ReLU-conv-BN, add, ReLU.
    Original,
    /// BN-ReLU-conv-BN-ReLU-conv, add.
    Preactivation,
}

/// How a block whose map count or extent changes builds its shortcut.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shortcut {
    /// Strided subsampling plus zero maps; no parameters.
    ZeroPad,
    /// Strided 1×1 convolution.
    Projection,
}

/// Layout used to flatten pooled taps into LSTM inputs.
pub const FLATTEN_ORDER: &str = "map,row,col";

/// Architecture description from which every model is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Residual blocks per stage.
    pub n: usize,
    /// Feature maps in the first stage; later stages use 2× and 4×.
    pub base_maps: usize,
    pub classes: usize,
    pub variant: Variant,
    pub hidden_size: usize,
    pub input_extent: usize,
    pub shortcut: Shortcut,
    pub output_gate: OutputGate,
    /// Initial bias of the input, forget and output gates.
    pub gate_bias: f64,
    /// Learn the initial cell state alongside the initial hidden state.
    pub learn_initial_cell: bool,
    pub batch_norm: BatchNormConfig,
    pub flatten_order: String,
}

impl NetworkConfig {
    /// Defaults: hidden size 100, the pre-activation variant from 64 base
    /// maps upwards, zero-padding shortcuts, tanh output gate, gate bias -1.
    pub fn new(n: usize, base_maps: usize, classes: usize) -> Self {
        NetworkConfig {
            n,
            base_maps,
            classes,
            variant: if base_maps >= 64 {
                Variant::Preactivation
            } else {
                Variant::Original
            },
            hidden_size: 100,
            input_extent: 32,
            shortcut: Shortcut::ZeroPad,
            output_gate: OutputGate::Tanh,
            gate_bias: -1.0,
            learn_initial_cell: true,
            batch_norm: BatchNormConfig::default(),
            flatten_order: FLATTEN_ORDER.to_string(),
        }
    }

    /// Config from a total layer count (must be 6n+2) and a multiplier of
    /// the 16-map baseline width.
    pub fn from_layers(layers: usize, fm_mult: f64, classes: usize) -> Result<Self> {
        let n = blocks_for_layers(layers)?;
        let base = (16.0 * fm_mult).round();
        if !(base >= 1.0) {
            return Err(Error::Input(format!("feature-map multiplier {fm_mult} gives no maps")));
        }
        Ok(Self::new(n, base as usize, classes))
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden_size = hidden;
        self
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_shortcut(mut self, shortcut: Shortcut) -> Self {
        self.shortcut = shortcut;
        self
    }

    pub fn with_output_gate(mut self, gate: OutputGate) -> Self {
        self.output_gate = gate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Input(msg));
        if self.n == 0 || self.base_maps == 0 || self.classes == 0 || self.hidden_size == 0 {
            return bad(format!(
                "n, base_maps, classes and hidden_size must be positive: {self:?}"
            ));
        }
        if self.input_extent < 8 || !self.input_extent.is_multiple_of(8) {
            return bad(format!("input extent {} must be a positive multiple of 8", self.input_extent));
        }
        if self.flatten_order != FLATTEN_ORDER {
            return bad(format!("unsupported flatten order {:?}", self.flatten_order));
        }
        if !(self.batch_norm.momentum > 0.0 && self.batch_norm.momentum < 1.0 && self.batch_norm.eps > 0.0) {
            return bad(format!("invalid batch-norm settings {:?}", self.batch_norm));
        }
        Ok(())
    }

    /// 6n+2: stem, two convolutions per block, classifier.
    pub fn layer_count(&self) -> usize {
        6 * self.n + 2
    }

    pub fn tap_count(&self) -> usize {
        3 * self.n
    }

    pub fn stage_maps(&self) -> [usize; 3] {
        [self.base_maps, 2 * self.base_maps, 4 * self.base_maps]
    }

    pub fn stage_extents(&self) -> [usize; 3] {
        let e = self.input_extent;
        [e, e / 2, e / 4]
    }

    /// Width of every LSTM input: the first stage's pooled width, which is
    /// the largest of the three.
    pub fn max_width(&self) -> usize {
        self.stage_maps()
            .iter()
            .zip(self.stage_extents())
            .map(|(m, e)| m * (e / 2) * (e / 2))
            .max()
            .unwrap_or(0)
    }

    pub fn pool_width(&self) -> usize {
        4 * self.base_maps
    }
}

pub fn blocks_for_layers(layers: usize) -> Result<usize> {
    if layers < 8 || !(layers - 2).is_multiple_of(6) {
        return Err(Error::Input(format!("layers must be 6n+2, got {layers}")));
    }
    Ok((layers - 2) / 6)
}

#[derive(Clone, Debug)]
enum ShortcutPath {
    Identity,
    Pad { out_maps: usize, stride: usize },
    Project { conv: Conv2d, bn: Option<BatchNorm> },
}

/// Two 3×3 convolutions plus a shortcut.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    bn1: BatchNorm,
    bn2: BatchNorm,
    shortcut: ShortcutPath,
    variant: Variant,
    pub in_maps: usize,
    pub out_maps: usize,
    pub stride: usize,
}

impl ResidualBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_maps: usize,
        out_maps: usize,
        stride: usize,
        cfg: &NetworkConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let g = Group::Trunk;
        let bnc = cfg.batch_norm;
        let (bn1_maps, bn1_name) = match cfg.variant {
            Variant::Original => (out_maps, format!("{name}.bn1")),
            Variant::Preactivation => (in_maps, format!("{name}.bn1")),
        };
        let bn1 = BatchNorm::new(store, &bn1_name, g, bn1_maps, bnc);
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), g, in_maps, out_maps, 3, stride, false, rng)?;
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), g, out_maps, bnc);
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), g, out_maps, out_maps, 3, 1, false, rng)?;
        let shortcut = if in_maps == out_maps && stride == 1 {
            ShortcutPath::Identity
        } else {
            match cfg.shortcut {
                Shortcut::ZeroPad => ShortcutPath::Pad { out_maps, stride },
                Shortcut::Projection => {
                    let conv = Conv2d::new(store, &format!("{name}.proj"), g, in_maps, out_maps, 1, stride, false, rng)?;
                    let bn = (cfg.variant == Variant::Original)
                        .then(|| BatchNorm::new(store, &format!("{name}.proj_bn"), g, out_maps, bnc));
                    ShortcutPath::Project { conv, bn }
                }
            }
        };
        Ok(ResidualBlock {
            conv1,
            conv2,
            bn1,
            bn2,
            shortcut,
            variant: cfg.variant,
            in_maps,
            out_maps,
            stride,
        })
    }

    pub fn param_count(&self) -> u64 {
        let sc = match &self.shortcut {
            ShortcutPath::Identity | ShortcutPath::Pad { .. } => 0,
            ShortcutPath::Project { conv, bn } => conv.param_count() + bn.as_ref().map_or(0, |b| b.param_count()),
        };
        self.conv1.param_count() + self.conv2.param_count() + self.bn1.param_count() + self.bn2.param_count() + sc
    }

    fn shortcut<S: Scalar>(&self, cx: &mut Ctx<S>, x: Var, preact: Var) -> Result<Var> {
        match &self.shortcut {
            ShortcutPath::Identity => Ok(x),
            ShortcutPath::Pad { out_maps, stride } => cx.tape.shortcut_pad(x, *out_maps, *stride),
            ShortcutPath::Project { conv, bn } => {
                let y = conv.forward(cx, preact)?;
                match bn {
                    Some(bn) => bn.forward(cx, y),
                    None => Ok(y),
                }
            }
        }
    }

    /// Block output after the residual addition (and the final ReLU in the
    /// original variant).
    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: Var) -> Result<Var> {
        match self.variant {
            Variant::Original => {
                let y = self.conv1.forward(cx, x)?;
                let y = self.bn1.forward(cx, y)?;
                let y = cx.tape.relu(y);
                let y = self.conv2.forward(cx, y)?;
                let y = self.bn2.forward(cx, y)?;
                let s = self.shortcut(cx, x, x)?;
                let sum = cx.tape.add(y, s)?;
                Ok(cx.tape.relu(sum))
            }
            Variant::Preactivation => {
                let a = self.bn1.forward(cx, x)?;
                let a = cx.tape.relu(a);
                let y = self.conv1.forward(cx, a)?;
                let y = self.bn2.forward(cx, y)?;
                let y = cx.tape.relu(y);
                let y = self.conv2.forward(cx, y)?;
                let s = self.shortcut(cx, x, a)?;
                cx.tape.add(y, s)
            }
        }
    }
}

/// Output of one trunk pass.
#[derive(Clone, Debug)]
pub struct TrunkOutput {
    /// Global average pool of the last stage, `[b×4·base_maps]`.
    pub pool: Var,
    /// One tensor per residual block, shallowest first.
    pub taps: Vec<Var>,
}

/// Stem convolution followed by three stages of `n` residual blocks.
#[derive(Clone, Debug)]
pub struct ResidualTrunk {
    stem: Conv2d,
    stem_bn: Option<BatchNorm>,
    stages: Vec<Vec<ResidualBlock>>,
    final_bn: Option<BatchNorm>,
    input_extent: usize,
}

impl ResidualTrunk {
    pub fn build<S: Scalar>(cfg: &NetworkConfig, store: &mut ParamStore<S>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let g = Group::Trunk;
        let base = cfg.base_maps;
        let stem = Conv2d::new(store, "trunk.stem", g, 3, base, 3, 1, false, rng)?;
        let stem_bn = (cfg.variant == Variant::Original)
            .then(|| BatchNorm::new(store, "trunk.stem_bn", g, base, cfg.batch_norm));
        let mut stages = Vec::with_capacity(3);
        let mut in_maps = base;
        for (s, &maps) in cfg.stage_maps().iter().enumerate() {
            let mut blocks = Vec::with_capacity(cfg.n);
            for b in 0..cfg.n {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let name = format!("trunk.stage{}.block{}", s + 1, b + 1);
                blocks.push(ResidualBlock::new(store, &name, in_maps, maps, stride, cfg, rng)?);
                in_maps = maps;
            }
            stages.push(blocks);
        }
        let final_bn = (cfg.variant == Variant::Preactivation)
            .then(|| BatchNorm::new(store, "trunk.final_bn", g, in_maps, cfg.batch_norm));
        Ok(ResidualTrunk {
            stem,
            stem_bn,
            stages,
            final_bn,
            input_extent: cfg.input_extent,
        })
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ResidualBlock> {
        self.stages.iter().flatten()
    }

    /// Convolution layers: stem plus two per block.
    pub fn conv_layer_count(&self) -> usize {
        1 + 2 * self.blocks().count()
    }

    pub fn param_count(&self) -> u64 {
        self.stem.param_count()
            + self.stem_bn.as_ref().map_or(0, |b| b.param_count())
            + self.blocks().map(|b| b.param_count()).sum::<u64>()
            + self.final_bn.as_ref().map_or(0, |b| b.param_count())
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<S>, x: Var) -> Result<TrunkOutput> {
        let shape = cx.tape.shape(x);
        let e = self.input_extent;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != e || shape[3] != e {
            return Err(Error::dim("trunk input", shape, &[shape.first().copied().unwrap_or(0), 3, e, e]));
        }
        let mut h = self.stem.forward(cx, x)?;
        if let Some(bn) = &self.stem_bn {
            h = bn.forward(cx, h)?;
            h = cx.tape.relu(h);
        }
        let mut taps = Vec::with_capacity(self.blocks().count());
        for block in self.blocks() {
            h = block.forward(cx, h)?;
            taps.push(h);
        }
        if let Some(bn) = &self.final_bn {
            h = bn.forward(cx, h)?;
            h = cx.tape.relu(h);
        }
        let pool = cx.tape.global_avg_pool(h)?;
        Ok(TrunkOutput { pool, taps })
    }
}

/// Residual network with a dense softmax head on the global pool.
#[derive(Clone, Debug)]
pub struct ResNet<S: Scalar> {
    cfg: NetworkConfig,
    store: ParamStore<S>,
    trunk: ResidualTrunk,
    head: Dense,
}

impl<S: Scalar> ResNet<S> {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        let mut rng = init::seeded(seed);
        let mut store = ParamStore::new();
        let trunk = ResidualTrunk::build(cfg, &mut store, &mut rng)?;
        let head = Dense::new(&mut store, "head", Group::Head, cfg.pool_width(), cfg.classes, &mut rng)?;
        Ok(ResNet {
            cfg: cfg.clone(),
            store,
            trunk,
            head,
        })
    }

    pub fn trunk(&self) -> &ResidualTrunk {
        &self.trunk
    }

    /// Layers counted as in the 6n+2 rule.
    pub fn layer_count(&self) -> usize {
        self.trunk.conv_layer_count() + 1
    }
}

impl<S: Scalar> Classifier<S> for ResNet<S> {
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
        let mut cx = Ctx {
            tape,
            store: &mut self.store,
            bound,
            mode,
        };
        let out = self.trunk.forward(&mut cx, x)?;
        self.head.forward(&mut cx, out.pool)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn layer_rule() {
        assert_eq!(NetworkConfig::new(5, 16, 100).layer_count(), 32);
        assert_eq!(NetworkConfig::new(22, 16, 100).layer_count(), 134);
        assert!(blocks_for_layers(31).is_err());
        assert_eq!(blocks_for_layers(62).unwrap(), 10);
        let cfg = NetworkConfig::from_layers(32, 1.5, 100).unwrap();
        assert_eq!((cfg.n, cfg.base_maps), (5, 24));
        assert_eq!(cfg.variant, Variant::Original);
        assert_eq!(NetworkConfig::from_layers(32, 4.0, 100).unwrap().variant, Variant::Preactivation);
    }

    #[test]
    fn max_width_is_stage_one() {
        for base in [4, 16, 24, 64] {
            let cfg = NetworkConfig::new(1, base, 10);
            assert_eq!(cfg.max_width(), base * 256);
        }
    }

    #[test]
    fn micro_trunk_taps_and_layers() {
        let cfg = NetworkConfig::new(1, 4, 3);
        let mut net = ResNet::<f32>::new(&cfg, 0).unwrap();
        assert_eq!(net.layer_count(), 8);
        let mut tape = Tape::new();
        let bound = net.store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[2, 3, 32, 32]));
        let mut cx = Ctx { tape: &mut tape, store: &mut net.store, bound: &bound, mode: Mode::Train };
        let out = net.trunk.forward(&mut cx, x).unwrap();
        assert_eq!(out.taps.len(), 3);
        assert_eq!(tape.shape(out.taps[0]), &[2, 4, 32, 32]);
        assert_eq!(tape.shape(out.taps[1]), &[2, 8, 16, 16]);
        assert_eq!(tape.shape(out.taps[2]), &[2, 16, 8, 8]);
        assert_eq!(tape.shape(out.pool), &[2, 16]);
    }

    #[test]
    fn wrong_extent_rejected() {
        let cfg = NetworkConfig::new(1, 4, 3);
        let mut net = ResNet::<f32>::new(&cfg, 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 16, 16]));
        assert!(matches!(net.forward(&mut tape, x, Mode::Eval), Err(Error::Dimension { .. })));
    }
}
