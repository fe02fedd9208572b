//! Multi-scale U-Net of FreqSSM blocks and the `FMCK` checkpoint format.
//!
//! Four resolutions: three encoder stages (each followed by a 2x mean-pool
//! and a 1x1 widening conv), a bottleneck, and three decoder stages (2x
//! nearest upsampling, 1x1 narrowing conv, skip concatenation and a 1x1
//! reduction). Encoder features are modulated by degradation prior maps
//! computed from the rainy image resized to each scale. The output adds the
//! rainy input back; the last conv starts at zero.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::block::{self, Ablation, AttentionMapGen, BranchOutputs, FreqSsmBlock};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::ops::{self, Resize};
use crate::params::{Bound, Conv, ParamStore, Pointwise};
use crate::scan::DEFAULT_STATE_DIM;
use crate::tensor::{read_exact_or_truncated, Shape, Tensor};

pub const STAGES: usize = 7;
pub const SCALES: usize = 4;
/// Input sides must be a multiple of this.
pub const SIZE_MULTIPLE: usize = 16;
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Blocks per stage: three encoder stages, bottleneck, three decoder stages.
    pub depths: Vec<usize>,
    pub base_channels: usize,
    /// Channel multiplier per resolution, finest first.
    pub channel_multipliers: Vec<usize>,
    pub state_dim: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depths: vec![1; STAGES],
            base_channels: 8,
            channel_multipliers: vec![1, 2, 2, 4],
            state_dim: DEFAULT_STATE_DIM,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    /// Stage depths of the full-size network.
    pub fn full_depths() -> Vec<usize> {
        vec![2, 3, 3, 4, 3, 3, 2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.len() != STAGES {
            return arg_err(
                "ModelConfig",
                format!("depths needs {STAGES} entries, got {}", self.depths.len()),
            );
        }
        if self.channel_multipliers.len() != SCALES {
            return arg_err(
                "ModelConfig",
                format!(
                    "channel_multipliers needs {SCALES} entries, got {}",
                    self.channel_multipliers.len()
                ),
            );
        }
        if self.base_channels == 0 || self.channel_multipliers.contains(&0) {
            return arg_err("ModelConfig", "channel counts must be positive");
        }
        if self.state_dim == 0 {
            return arg_err("ModelConfig", "state_dim must be positive");
        }
        if !self.ablation.any_branch() {
            return arg_err("ModelConfig", "at least one block branch must be enabled");
        }
        Ok(())
    }

    pub fn channels(&self, scale: usize) -> usize {
        self.base_channels * self.channel_multipliers[scale]
    }

    pub fn block_count(&self) -> usize {
        self.depths.iter().sum()
    }

    /// Canonical text form stored in checkpoints.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let c: ModelConfig = toml::from_str(text).map_err(|e| Error::Malformed(format!("model config: {e}")))?;
        c.validate()?;
        Ok(c)
    }
}

/// Resolution index of each of the seven stages.
fn stage_scale(stage: usize) -> usize {
    match stage {
        0..=3 => stage,
        _ => STAGES - 1 - stage,
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    up: Pointwise,
    reduce: Pointwise,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    intro: Conv,
    outro: Conv,
    /// Blocks per stage.
    stages: Vec<Vec<FreqSsmBlock>>,
    attention: Vec<AttentionMapGen>,
    down: Vec<Pointwise>,
    decoders: Vec<Decoder>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    /// Degradation prior maps, finest scale first.
    pub attention: Vec<Var>,
    /// `(block name, branch outputs)` in evaluation order.
    pub branches: Vec<(String, BranchOutputs)>,
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let c0 = config.channels(0);
        let intro = Conv::new(&mut store, "intro", IMAGE_CHANNELS, c0, 3);
        let mut stages = Vec::with_capacity(STAGES);
        let mut attention = Vec::new();
        let mut down = Vec::new();
        let mut decoders = Vec::new();
        for (stage, &depth) in config.depths.iter().enumerate() {
            let scale = stage_scale(stage);
            let c = config.channels(scale);
            let prefix = stage_name(stage);
            if stage < 3 && config.ablation.use_attention_map {
                attention.push(AttentionMapGen::new(
                    &mut store,
                    &format!("{prefix}.attention"),
                    IMAGE_CHANNELS,
                    c,
                    config.state_dim,
                ));
            }
            if stage > 3 {
                let below = config.channels(scale + 1);
                decoders.push(Decoder {
                    up: Pointwise::new(&mut store, &format!("{prefix}.up"), below, c),
                    reduce: Pointwise::new(&mut store, &format!("{prefix}.reduce"), 2 * c, c),
                });
            }
            let blocks = (0..depth)
                .map(|b| {
                    FreqSsmBlock::new(
                        &mut store,
                        &format!("{prefix}.block{b}"),
                        c,
                        config.state_dim,
                        config.ablation,
                    )
                })
                .collect();
            stages.push(blocks);
            if stage < 3 {
                let next = config.channels(scale + 1);
                down.push(Pointwise::new(&mut store, &format!("{prefix}.down"), c, next));
            }
        }
        let outro = Conv::new(&mut store, "outro", c0, IMAGE_CHANNELS, 3);
        for id in [outro.weight, outro.bias] {
            let s = store.get(id).shape();
            store.set(id, Tensor::zeros(s))?;
        }
        Ok(Model {
            config,
            store,
            intro,
            outro,
            stages,
            attention,
            down,
            decoders,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    pub fn block_count(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }

    pub fn check_input(shape: Shape) -> Result<()> {
        if shape.c() != IMAGE_CHANNELS {
            return shape_err(
                "model forward",
                format!("expected {IMAGE_CHANNELS} image channels, got C={}", shape.c()),
            );
        }
        if shape.h() % SIZE_MULTIPLE != 0 || shape.w() % SIZE_MULTIPLE != 0 || shape.h() == 0 || shape.w() == 0 {
            return shape_err(
                "model forward",
                format!(
                    "H={} and W={} must be positive multiples of {SIZE_MULTIPLE}",
                    shape.h(),
                    shape.w()
                ),
            );
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, rainy: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, p, rainy)?.0)
    }

    pub fn forward_traced(&self, tape: &mut Tape, p: &Bound, rainy: Var) -> Result<(Var, ForwardTrace)> {
        Self::check_input(tape.value(rainy).shape())?;
        let mut trace = ForwardTrace::default();

        let mut images = vec![rainy];
        for _ in 1..3 {
            let last = *images.last().unwrap();
            images.push(ops::resize(tape, last, Resize::Down2)?);
        }

        let mut f = self.intro.forward(tape, p, rainy)?;
        let mut skips = Vec::with_capacity(3);
        for stage in 0..3 {
            let map = match self.attention.get(stage) {
                Some(g) => {
                    let m = g.map(tape, p, images[stage])?;
                    trace.attention.push(m);
                    Some(m)
                }
                None => None,
            };
            for (b, block) in self.stages[stage].iter().enumerate() {
                if let Some(m) = map {
                    f = block::apply_attention(tape, f, m)?;
                }
                f = self.run_block(tape, p, block, f, stage, b, &mut trace)?;
            }
            skips.push(f);
            f = ops::resize(tape, f, Resize::Down2)?;
            f = self.down[stage].forward(tape, p, f)?;
        }
        for (b, block) in self.stages[3].iter().enumerate() {
            f = self.run_block(tape, p, block, f, 3, b, &mut trace)?;
        }
        for (i, dec) in self.decoders.iter().enumerate() {
            let stage = 4 + i;
            f = ops::resize(tape, f, Resize::Up2)?;
            f = dec.up.forward(tape, p, f)?;
            let skip = skips[stage_scale(stage)];
            f = ops::concat_channels(tape, &[f, skip])?;
            f = dec.reduce.forward(tape, p, f)?;
            for (b, block) in self.stages[stage].iter().enumerate() {
                f = self.run_block(tape, p, block, f, stage, b, &mut trace)?;
            }
        }
        let residual = self.outro.forward(tape, p, f)?;
        Ok((ops::add(tape, residual, rainy)?, trace))
    }

    #[allow(clippy::too_many_arguments)]
    fn run_block(
        &self,
        tape: &mut Tape,
        p: &Bound,
        block: &FreqSsmBlock,
        f: Var,
        stage: usize,
        b: usize,
        trace: &mut ForwardTrace,
    ) -> Result<Var> {
        let (y, branches) = block.forward_traced(tape, p, f)?;
        trace.branches.push((format!("{}.block{b}", stage_name(stage)), branches));
        Ok(y)
    }

    /// Restores a batch of images without recording gradients.
    pub fn infer(&self, rainy: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let x = tape.constant(rainy.clone());
        let y = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn to_checkpoint(&self, iteration: u64) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            iteration,
            tensors: self
                .store
                .iter()
                .map(|(_, name, t)| (name.to_string(), t.clone()))
                .collect(),
        }
    }

    /// Rebuilds a model from a checkpoint. Tensors whose names are not model
    /// parameters (such as optimizer state) are ignored.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = Model::build(ck.config.clone(), 0)?;
        let mut seen = vec![false; model.store.len()];
        for (name, t) in &ck.tensors {
            if let Some(id) = model.store.find(name) {
                model.store.set(id, t.clone()).map_err(|e| Error::ConfigMismatch(e.to_string()))?;
                seen[id.index()] = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let missing = model.store.names().nth(i).unwrap_or_default().to_string();
            return Err(Error::ConfigMismatch(format!("parameter {missing} missing from checkpoint")));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>, iteration: u64) -> Result<()> {
        self.to_checkpoint(iteration).save(path)
    }

    /// Loads a checkpoint, optionally insisting on a specific configuration.
    pub fn load(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if let Some(cfg) = expected {
            if cfg != &ck.config {
                return Err(Error::ConfigMismatch(format!(
                    "file holds\n{}\nexpected\n{}",
                    ck.config.to_text(),
                    cfg.to_text()
                )));
            }
        }
        Model::from_checkpoint(&ck)
    }
}

fn stage_name(stage: usize) -> String {
    match stage {
        0..=2 => format!("enc{stage}"),
        3 => "bottleneck".into(),
        _ => format!("dec{}", stage_scale(stage)),
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized model state. Payloads are stored as 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub iteration: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Layout: magic, u32 version, u32 config length, config text, u64
    /// iteration, then records of (u32 name length, name, 4 x u32 dims,
    /// f32 payload) until end of file. All integers little-endian.
    pub fn write(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let text = self.config.to_text();
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        w.write_all(&self.iteration.to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            for d in t.shape().0 {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact_or_truncated(&mut r, &mut magic, "checkpoint magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::MagicMismatch {
                expected: *CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = read_u32(&mut r, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let len = read_u32(&mut r, "config length")? as usize;
        let mut text = vec![0u8; len];
        read_exact_or_truncated(&mut r, &mut text, "config text")?;
        let text = String::from_utf8(text).map_err(|_| Error::Malformed("config text is not UTF-8".into()))?;
        let config = ModelConfig::from_text(&text)?;
        let mut it = [0u8; 8];
        read_exact_or_truncated(&mut r, &mut it, "iteration")?;
        let iteration = u64::from_le_bytes(it);

        let mut tensors = Vec::new();
        loop {
            let mut first = [0u8; 1];
            if r.read(&mut first)? == 0 {
                break;
            }
            let mut rest = [0u8; 3];
            read_exact_or_truncated(&mut r, &mut rest, "record name length")?;
            let name_len = u32::from_le_bytes([first[0], rest[0], rest[1], rest[2]]) as usize;
            let mut name = vec![0u8; name_len];
            read_exact_or_truncated(&mut r, &mut name, "record name")?;
            let name = String::from_utf8(name).map_err(|_| Error::Malformed("record name is not UTF-8".into()))?;
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = read_u32(&mut r, "record dims")? as usize;
            }
            let shape = Shape(dims);
            let mut payload = vec![0u8; shape.numel() * 4];
            read_exact_or_truncated(&mut r, &mut payload, &format!("payload of {name}"))?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint {
            config,
            iteration,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
