//! Sequence models over the autodiff core.
//!
//! Every architecture consumes a padded batch of token sequences and
//! returns readout logits at requested `(sequence, position)` slots.

mod recurrent;
pub mod scripted;
mod transformer;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::memory::{CELL_SIZE, TRAIN_STACK_DEPTH, TRAIN_TAPE_CELLS};
use crate::scalar::Scalar;
use crate::tasks::TaskSpec;

pub use recurrent::{lstm_step, rnn_step};
pub use transformer::{alibi_slopes, attention, sinusoid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Rnn,
    Lstm,
    StackRnn,
    StackLstm,
    TapeRnn,
    Transformer,
}

impl Arch {
    pub const ALL: [Arch; 6] = [Arch::Rnn, Arch::Lstm, Arch::StackRnn, Arch::StackLstm, Arch::TapeRnn, Arch::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Rnn => "rnn",
            Arch::Lstm => "lstm",
            Arch::StackRnn => "stack_rnn",
            Arch::StackLstm => "stack_lstm",
            Arch::TapeRnn => "tape_rnn",
            Arch::Transformer => "transformer",
        }
    }

    /// Display name used in score tables.
    pub fn label(self) -> &'static str {
        match self {
            Arch::Rnn => "RNN",
            Arch::Lstm => "LSTM",
            Arch::StackRnn => "Stack-RNN",
            Arch::StackLstm => "Stack-LSTM",
            Arch::TapeRnn => "Tape-RNN",
            Arch::Transformer => "Transformer",
        }
    }

    pub fn controller(self) -> Option<Controller> {
        match self {
            Arch::Rnn | Arch::StackRnn | Arch::TapeRnn => Some(Controller::Rnn),
            Arch::Lstm | Arch::StackLstm => Some(Controller::Lstm),
            Arch::Transformer => None,
        }
    }

    pub fn memory(self) -> MemoryKind {
        match self {
            Arch::StackRnn | Arch::StackLstm => MemoryKind::Stack,
            Arch::TapeRnn => MemoryKind::Tape,
            _ => MemoryKind::None,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = Arch::ALL.iter().map(|a| a.name()).collect();
            Error::Config(format!("unknown architecture '{s}'; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Controller {
    Rnn,
    Lstm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MemoryKind {
    None,
    Stack,
    Tape,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEnc {
    None,
    SinCos,
    Rope,
    Alibi,
    RelativeXl,
}

impl PosEnc {
    pub const ALL: [PosEnc; 5] = [PosEnc::None, PosEnc::SinCos, PosEnc::Rope, PosEnc::Alibi, PosEnc::RelativeXl];

    pub fn name(self) -> &'static str {
        match self {
            PosEnc::None => "none",
            PosEnc::SinCos => "sin_cos",
            PosEnc::Rope => "rope",
            PosEnc::Alibi => "alibi",
            PosEnc::RelativeXl => "relative_xl",
        }
    }
}

impl fmt::Display for PosEnc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PosEnc {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PosEnc::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<_> = PosEnc::ALL.iter().map(|p| p.name()).collect();
            Error::Config(format!("unknown positional encoding '{s}'; expected one of {}", names.join(", ")))
        })
    }
}

/// Number of computation tokens inserted between input and output slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CompTokens {
    #[serde(rename = "0")]
    Zero,
    #[serde(rename = "l")]
    Len,
    #[serde(rename = "2l")]
    TwiceLen,
}

impl CompTokens {
    pub const ALL: [CompTokens; 3] = [CompTokens::Zero, CompTokens::Len, CompTokens::TwiceLen];

    pub fn count(self, len: usize) -> usize {
        match self {
            CompTokens::Zero => 0,
            CompTokens::Len => len,
            CompTokens::TwiceLen => 2 * len,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CompTokens::Zero => "0",
            CompTokens::Len => "l",
            CompTokens::TwiceLen => "2l",
        }
    }
}

impl fmt::Display for CompTokens {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CompTokens {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "0" => Ok(CompTokens::Zero),
            "l" | "1l" => Ok(CompTokens::Len),
            "2l" => Ok(CompTokens::TwiceLen),
            _ => Err(Error::Config(format!("unknown comp_tokens '{s}'; expected 0, l or 2l"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Controller width for recurrent models.
    pub hidden: usize,
    pub cell_size: usize,
    pub blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub dropout: f64,
    pub pos_enc: PosEnc,
    pub causal: bool,
    pub n_tapes: usize,
    pub comp_tokens: CompTokens,
    /// Output symbols are fed back as inputs after a separator.
    pub autoregressive: bool,
}

impl ModelConfig {
    pub fn new(arch: Arch) -> Self {
        ModelConfig {
            arch,
            hidden: 256,
            cell_size: CELL_SIZE,
            blocks: 5,
            d_model: 64,
            heads: 8,
            dropout: 0.1,
            pos_enc: PosEnc::None,
            causal: false,
            n_tapes: 1,
            comp_tokens: CompTokens::Zero,
            autoregressive: false,
        }
    }

    /// Small dimensions for gradient checks and unit tests.
    pub fn tiny(arch: Arch) -> Self {
        ModelConfig { hidden: 8, cell_size: 4, blocks: 2, d_model: 8, heads: 2, dropout: 0.0, ..ModelConfig::new(arch) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.hidden == 0 || self.cell_size == 0 {
            return bad("hidden and cell sizes must be positive".into());
        }
        if self.arch == Arch::Transformer {
            if self.blocks == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
                return bad(format!("d_model {} must split over {} heads", self.d_model, self.heads));
            }
            let d_head = self.d_model / self.heads;
            if matches!(self.pos_enc, PosEnc::Rope) && d_head % 2 != 0 {
                return bad(format!("RoPE needs an even head width, got {d_head}"));
            }
            if matches!(self.pos_enc, PosEnc::SinCos | PosEnc::RelativeXl) && self.d_model % 2 != 0 {
                return bad(format!("sinusoids need an even d_model, got {}", self.d_model));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.arch == Arch::TapeRnn && self.n_tapes == 0 {
            return bad("n_tapes must be at least 1".into());
        }
        if self.arch != Arch::TapeRnn && self.comp_tokens != CompTokens::Zero {
            return bad("computation tokens are only used by tape_rnn".into());
        }
        Ok(())
    }

    /// The Transformer attends causally whenever it is autoregressive.
    pub fn is_causal(&self) -> bool {
        self.causal || self.autoregressive
    }
}

/// Token coding shared by the harness and the models.
///
/// Input symbols keep their task codes, followed by the empty token, the
/// computation token (if used) and, in autoregressive mode, the output
/// symbols.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub input_symbols: usize,
    pub output_symbols: usize,
    pub computation: bool,
    pub autoregressive: bool,
}

impl Vocab {
    pub fn new(spec: &TaskSpec, config: &ModelConfig) -> Self {
        Vocab {
            input_symbols: spec.input_vocab(),
            output_symbols: spec.output_vocab(),
            computation: config.comp_tokens != CompTokens::Zero,
            autoregressive: config.autoregressive,
        }
    }

    pub fn empty(&self) -> usize {
        self.input_symbols
    }

    pub fn computation(&self) -> usize {
        self.input_symbols + 1
    }

    /// Input code of an output symbol fed back in autoregressive mode.
    pub fn feedback(&self, symbol: usize) -> usize {
        self.input_symbols + 1 + usize::from(self.computation) + symbol
    }

    pub fn input_size(&self) -> usize {
        self.input_symbols
            + 1
            + usize::from(self.computation)
            + if self.autoregressive { self.output_symbols } else { 0 }
    }
}

/// A right-padded batch: every row of `tokens` has the same length.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    pub tokens: Vec<Vec<usize>>,
    /// Tape jump distance per sequence (its input length).
    pub jumps: Vec<usize>,
    /// `(sequence, position)` slots whose logits are returned, in order.
    pub outputs: Vec<(usize, usize)>,
}

impl SeqBatch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    fn validate(&self, vocab: usize) -> Result<()> {
        let t = self.steps();
        if self.tokens.is_empty() || t == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if self.tokens.iter().any(|row| row.len() != t) {
            return Err(Error::InvalidInput("batch rows must be padded to one length".into()));
        }
        if let Some(&tok) = self.tokens.iter().flatten().find(|&&tok| tok >= vocab) {
            return Err(Error::InvalidInput(format!("token {tok} outside vocabulary of {vocab}")));
        }
        if self.jumps.len() != self.tokens.len() {
            return Err(Error::InvalidInput("one jump per sequence required".into()));
        }
        if self.outputs.iter().any(|&(b, p)| b >= self.tokens.len() || p >= t) {
            return Err(Error::InvalidInput("output slot outside the batch".into()));
        }
        Ok(())
    }
}

/// Memory sizes for a sequence of `steps` tokens. Training-length
/// sequences get the training sizes; longer ones get enough room that
/// the memory never saturates or wraps past half a tape.
pub fn memory_sizes(steps: usize) -> (usize, usize) {
    (TRAIN_STACK_DEPTH.max(steps), TRAIN_TAPE_CELLS.max(2 * steps + 1))
}

/// Graph handles produced by one unrolled forward pass.
#[derive(Clone, Debug, Default)]
pub struct Unrolled {
    /// Recurrent models: controller output `[B×H]` per step.
    /// Transformer: activations `[B·T×D]` after the embedding and after
    /// each block.
    pub hidden: Vec<Var>,
    /// Per step, per memory: action distributions `[B×A]`.
    pub actions: Vec<Vec<Var>>,
    /// Per step, per memory: the state after the step (stack `[B×R×C]`,
    /// or tape cells `[B×N×C]` followed by the head `[B×N]`).
    pub memory: Vec<Vec<Var>>,
    /// Readout logits `[B·T×K]` at every position, if requested.
    pub logits: Option<Var>,
}

#[derive(Clone, Debug)]
pub(crate) struct Readout {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) enum Body {
    Recurrent(recurrent::RecurrentParams),
    Transformer(transformer::TransformerParams),
}

/// Parameters plus the configuration that shapes them.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore<T>,
    body: Body,
    readout: Readout,
}

pub(crate) fn glorot<T: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| T::from_float(rng.gen_range(-limit..limit))).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches data")
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters: Glorot-uniform matrices, zero biases.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, spec: &TaskSpec, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::new(spec, &config);
        let mut params = ParamStore::new();
        let (body, width) = match config.arch {
            Arch::Transformer => {
                let p = transformer::TransformerParams::init(&config, vocab.input_size(), &mut params, rng)?;
                (Body::Transformer(p), config.d_model)
            }
            _ => {
                let p = recurrent::RecurrentParams::init(&config, vocab.input_size(), &mut params, rng)?;
                (Body::Recurrent(p), config.hidden)
            }
        };
        let readout = Readout {
            w: params.insert("readout.w", glorot(rng, width, vocab.output_symbols))?,
            b: params.insert("readout.b", Tensor::zeros(&[vocab.output_symbols]))?,
        };
        Ok(Model { config, vocab, params, body, readout })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            vocab: self.vocab,
            params: self.params.cast(),
            body: self.body.clone(),
            readout: self.readout.clone(),
        }
    }

    /// Runs the model over `batch`; `dropout_rng` switches on training-time
    /// dropout. With `all_logits` the readout is applied at every position.
    pub fn unroll(
        &self,
        g: &mut Graph<T>,
        batch: &SeqBatch,
        dropout_rng: Option<&mut dyn RngCore>,
        keep_history: bool,
        all_logits: bool,
    ) -> Result<Unrolled> {
        self.unroll_with(&self.params, g, batch, dropout_rng, keep_history, all_logits)
    }

    /// [`Model::unroll`] with parameter values taken from `store`, which
    /// must have the layout of `self.params`.
    pub fn unroll_with(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        batch: &SeqBatch,
        dropout_rng: Option<&mut dyn RngCore>,
        keep_history: bool,
        all_logits: bool,
    ) -> Result<Unrolled> {
        batch.validate(self.vocab.input_size())?;
        let mut out = match &self.body {
            Body::Recurrent(p) => p.unroll(g, store, &self.config, batch, keep_history)?,
            Body::Transformer(p) => p.unroll(g, store, &self.config, batch, dropout_rng)?,
        };
        if all_logits {
            let rows = self.feature_rows(g, &out, batch, None)?;
            out.logits = Some(self.apply_readout(g, store, rows)?);
        }
        Ok(out)
    }

    /// Logits `[outputs×K]` at the batch's output slots.
    pub fn forward(&self, g: &mut Graph<T>, batch: &SeqBatch, dropout_rng: Option<&mut dyn RngCore>) -> Result<Var> {
        self.forward_with(&self.params, g, batch, dropout_rng)
    }

    pub fn forward_with(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        batch: &SeqBatch,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let unrolled = self.unroll_with(store, g, batch, dropout_rng, false, false)?;
        let rows = self.feature_rows(g, &unrolled, batch, Some(&batch.outputs))?;
        self.apply_readout(g, store, rows)
    }

    /// Output logits computed without gradient bookkeeping.
    pub fn predict(&self, batch: &SeqBatch) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let logits = self.forward(&mut g, batch, None)?;
        Ok(g.value(logits).clone())
    }

    fn feature_rows(
        &self,
        g: &mut Graph<T>,
        unrolled: &Unrolled,
        batch: &SeqBatch,
        slots: Option<&[(usize, usize)]>,
    ) -> Result<Var> {
        let (b, t) = (batch.len(), batch.steps());
        let all: Vec<(usize, usize)>;
        let slots = match slots {
            Some(s) => s,
            None => {
                all = (0..b).flat_map(|i| (0..t).map(move |p| (i, p))).collect();
                &all
            }
        };
        match &self.body {
            Body::Recurrent(_) => {
                // Stack only the steps that are read out.
                let mut steps: Vec<usize> = slots.iter().map(|&(_, p)| p).collect();
                steps.sort_unstable();
                steps.dedup();
                let parts: Vec<Var> = steps.iter().map(|&p| unrolled.hidden[p]).collect();
                let stacked = g.concat_rows(&parts)?;
                let index: Vec<usize> = slots
                    .iter()
                    .map(|&(i, p)| steps.binary_search(&p).expect("step collected") * b + i)
                    .collect();
                g.gather_rows(stacked, &index)
            }
            Body::Transformer(_) => {
                let last = *unrolled.hidden.last().expect("at least the embedding layer");
                let index: Vec<usize> = slots.iter().map(|&(i, p)| i * t + p).collect();
                g.gather_rows(last, &index)
            }
        }
    }

    fn apply_readout(&self, g: &mut Graph<T>, store: &ParamStore<T>, rows: Var) -> Result<Var> {
        let rows = match &self.body {
            Body::Transformer(p) => p.final_norm(g, store, rows)?,
            Body::Recurrent(_) => rows,
        };
        let w = g.param(store, self.readout.w);
        let b = g.param(store, self.readout.b);
        let z = g.matmul(rows, w)?;
        g.add_bias(z, b)
    }
}
