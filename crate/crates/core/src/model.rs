//! The assembled network: a reduced-width CNN backbone of MSDA blocks,
//! per-slice heads, a stacked ConvLSTM with per-position heads, and a
//! weighted-ensemble head fusing the per-position probabilities.

use crate::conv::ConvSpec;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::nn::{ConvBnRelu, ConvLstm, ConvLstmConfig, Ctx, Initializer, Linear, Mode, MsdaBlock, MsdaConfig, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How the predicted class of a sequence is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Inference {
    /// Argmax of the weighted-ensemble output.
    Ensemble,
    /// Majority vote over per-slice argmaxes (slice-only ablation).
    SliceVote,
}

impl Inference {
    pub fn name(self) -> &'static str {
        match self {
            Inference::Ensemble => "ensemble",
            Inference::SliceVote => "slice_vote",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ensemble" => Some(Inference::Ensemble),
            "slice_vote" => Some(Inference::SliceVote),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Square slice extent.
    pub input_size: usize,
    /// Slices per sequence; fixes the width of the ensemble FC layer.
    pub seq_len: usize,
    pub num_classes: usize,
    pub stage_channels: Vec<usize>,
    pub se_reduction: usize,
    pub lstm_hidden: usize,
    pub lstm_kernel: usize,
    pub lstm_layers: usize,
    pub we_conv_channels: usize,
    pub we_kernel: usize,
    pub inference: Inference,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            seq_len: 5,
            num_classes: 3,
            stage_channels: vec![16, 32, 64],
            se_reduction: 4,
            lstm_hidden: 32,
            lstm_kernel: 3,
            lstm_layers: 2,
            we_conv_channels: 8,
            we_kernel: 3,
            inference: Inference::Ensemble,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.num_classes) {
            return Err(Error::Config(format!("num_classes must be 2 or 3, got {}", self.num_classes)));
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::Config("stage_channels must be a non-empty list of positive widths".into()));
        }
        let factor = 1usize << (self.stage_channels.len() + 1);
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of {factor} for {} stages",
                self.input_size,
                self.stage_channels.len()
            )));
        }
        for &c in &self.stage_channels {
            MsdaConfig::new(c, c, self.se_reduction).validate()?;
        }
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len must be positive".into()));
        }
        if self.we_kernel.is_multiple_of(2) || self.we_conv_channels == 0 {
            return Err(Error::Config(format!(
                "ensemble kernel must be odd and channels positive, got kernel {} channels {}",
                self.we_kernel, self.we_conv_channels
            )));
        }
        if self.seq_len < self.we_kernel {
            return Err(Error::Config(format!(
                "seq_len {} is shorter than the ensemble kernel {}",
                self.seq_len, self.we_kernel
            )));
        }
        self.convlstm().validate()
    }

    pub fn convlstm(&self) -> ConvLstmConfig {
        ConvLstmConfig {
            input_channels: *self.stage_channels.last().unwrap_or(&1),
            hidden_channels: self.lstm_hidden,
            kernel_size: self.lstm_kernel,
            num_layers: self.lstm_layers,
        }
    }

    /// Spatial extent of the backbone output, `input_size / 2^(stages+1)`.
    pub fn feature_size(&self) -> usize {
        self.input_size >> (self.stage_channels.len() + 1)
    }

    pub fn feature_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated non-empty")
    }
}

#[derive(Debug, Clone)]
struct Stage {
    msda: MsdaBlock,
    down: ConvBnRelu,
}

/// Weighted-ensemble head: conv1d over the `T x K` probability descriptor,
/// relu, flatten, FC to `K` logits.
#[derive(Debug, Clone)]
pub struct WeightedEnsemble {
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub fc: Linear,
    pub kernel: usize,
    pub seq_len: usize,
}

impl WeightedEnsemble {
    pub fn new<E: Element>(store: &mut ParamStore<E>, init: &mut Initializer, cfg: &ModelConfig) -> Result<Self> {
        let (k, ch, t) = (cfg.num_classes, cfg.we_conv_channels, cfg.seq_len);
        Ok(Self {
            conv_weight: store.add("we.conv.weight", init.fan_in_uniform(&[ch, k, cfg.we_kernel], k * cfg.we_kernel)?, true)?,
            conv_bias: store.add("we.conv.bias", Tensor::zeros(&[ch])?, true)?,
            fc: Linear::new(store, init, "we.fc", ch * t, k)?,
            kernel: cfg.we_kernel,
            seq_len: t,
        })
    }

    /// `probs_seq` holds `T` tensors of shape `[B,K]`; returns `[B,K]` logits.
    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, '_, E>, probs_seq: &[Var]) -> Result<Var> {
        if probs_seq.len() != self.seq_len {
            return Err(Error::shape(
                "weighted_ensemble",
                format!("model was built for T={} but got {} positions", self.seq_len, probs_seq.len()),
            ));
        }
        let &[b, k] = ctx.tape.dims(probs_seq[0])? else {
            return Err(Error::shape("weighted_ensemble", "probabilities must be [B,K]"));
        };
        let cols = probs_seq
            .iter()
            .map(|&p| ctx.tape.reshape(p, &[b, k, 1]))
            .collect::<Result<Vec<_>>>()?;
        let signal = ctx.tape.concat(&cols, 2)?;
        let (w, bias) = (ctx.param(self.conv_weight), ctx.param(self.conv_bias));
        let y = ctx.tape.conv1d(signal, w, Some(bias), ConvSpec::same(self.kernel, 1, 1))?;
        let y = ctx.tape.relu(y)?;
        let width = ctx.tape.value(y)?.numel() / b;
        let flat = ctx.tape.reshape(y, &[b, width])?;
        self.fc.forward(ctx, flat)
    }
}

/// Logits of the three prediction families for a batch of `B` sequences.
#[derive(Debug, Clone)]
pub struct BatchLogits {
    /// `[B*T, K]`, row `b*T + t`.
    pub slice: Var,
    /// `T` tensors of `[B, K]`.
    pub sequence: Vec<Var>,
    /// `[B, K]`.
    pub ensemble: Var,
}

/// Probabilities for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePrediction {
    /// `[T,K]` per-slice head probabilities.
    pub probs_slice: Tensor<f32>,
    /// `[T,K]` per-position sequence head probabilities.
    pub probs_seq: Tensor<f32>,
    /// `[K]` weighted-ensemble probabilities.
    pub probs_final: Tensor<f32>,
    /// Argmax of `probs_final`, lowest index on ties.
    pub predicted_class: usize,
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<E: PartialOrd + Copy>(values: &[E]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl SlicePrediction {
    pub fn num_classes(&self) -> usize {
        self.probs_final.numel()
    }

    /// Majority vote over per-slice argmaxes, lowest class index on ties.
    pub fn slice_vote(&self) -> usize {
        let k = self.num_classes();
        let mut votes = vec![0usize; k];
        for row in self.probs_slice.data().chunks(k) {
            votes[argmax(row)] += 1;
        }
        argmax(&votes)
    }

    pub fn class_for(&self, mode: Inference) -> usize {
        match mode {
            Inference::Ensemble => self.predicted_class,
            Inference::SliceVote => self.slice_vote(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SmaNet {
    config: ModelConfig,
    stem: ConvBnRelu,
    stages: Vec<Stage>,
    slice_head: Linear,
    convlstm: ConvLstm,
    seq_head: Linear,
    ensemble: WeightedEnsemble,
}

impl SmaNet {
    /// Builds the network and a freshly initialised parameter store.
    pub fn new<E: Element>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<E>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let s2 = ConvSpec::new(2, 1, 1, 1);
        let c0 = config.stage_channels[0];
        let stem = ConvBnRelu::new(&mut store, &mut init, "stem", "conv", 1, c0, 3, s2)?;
        let mut stages = Vec::with_capacity(config.stage_channels.len());
        let mut cin = c0;
        for (i, &c) in config.stage_channels.iter().enumerate() {
            let prefix = format!("stage{}", i + 1);
            let msda = MsdaBlock::new(&mut store, &mut init, &format!("{prefix}.msda"), MsdaConfig::new(cin, c, config.se_reduction))?;
            let down = ConvBnRelu::new(&mut store, &mut init, &format!("{prefix}.down"), "conv", c, c, 3, s2)?;
            stages.push(Stage { msda, down });
            cin = c;
        }
        let k = config.num_classes;
        let slice_head = Linear::new(&mut store, &mut init, "slice_head.fc", cin, k)?;
        let convlstm = ConvLstm::new(&mut store, &mut init, "convlstm", config.convlstm())?;
        let seq_head = Linear::new(&mut store, &mut init, "seq_head.fc", config.lstm_hidden, k)?;
        let ensemble = WeightedEnsemble::new(&mut store, &mut init, &config)?;
        let model = Self {
            config,
            stem,
            stages,
            slice_head,
            convlstm,
            seq_head,
            ensemble,
        };
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn msda_blocks(&self) -> impl Iterator<Item = &MsdaBlock> {
        self.stages.iter().map(|s| &s.msda)
    }

    pub fn convlstm(&self) -> &ConvLstm {
        &self.convlstm
    }

    /// `[N,1,S,S] -> [N,C_last,S/2^(stages+1),S/2^(stages+1)]`.
    pub fn backbone_forward<E: Element>(&self, ctx: &mut Ctx<'_, '_, E>, slices: Var) -> Result<Var> {
        let d = ctx.tape.dims(slices)?;
        let s = self.config.input_size;
        if d.len() != 4 || d[1] != 1 || d[2] != s || d[3] != s {
            return Err(Error::shape("backbone", format!("expected [N,1,{s},{s}], got {d:?}")));
        }
        let mut x = self.stem.forward(ctx, slices)?;
        for stage in &self.stages {
            x = stage.msda.forward(ctx, x)?;
            x = stage.down.forward(ctx, x)?;
        }
        Ok(x)
    }

    /// Global average pooling then FC: `[N,C,h,w] -> [N,K]`.
    pub fn slice_head<E: Element>(&self, ctx: &mut Ctx<'_, '_, E>, features: Var) -> Result<Var> {
        let pooled = ctx.tape.global_avg_pool(features)?;
        self.slice_head.forward(ctx, pooled)
    }

    /// Shared across positions: `[N,Ch,h,w] -> [N,K]`.
    pub fn sequence_head<E: Element>(&self, ctx: &mut Ctx<'_, '_, E>, hidden: Var) -> Result<Var> {
        let pooled = ctx.tape.global_avg_pool(hidden)?;
        self.seq_head.forward(ctx, pooled)
    }

    pub fn weighted_ensemble<E: Element>(&self, ctx: &mut Ctx<'_, '_, E>, probs_seq: &[Var]) -> Result<Var> {
        self.ensemble.forward(ctx, probs_seq)
    }

    /// Full forward for `batch` sequences stacked sequence-major as
    /// `[batch*T, 1, S, S]` (row `b*T + t`).
    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, '_, E>, slices: Var, batch: usize) -> Result<BatchLogits> {
        let t_len = self.config.seq_len;
        let n = ctx.tape.dims(slices)?[0];
        if batch == 0 || n != batch * t_len {
            return Err(Error::shape(
                "model_forward",
                format!("{n} slices do not form {batch} sequences of T={t_len}"),
            ));
        }
        let features = self.backbone_forward(ctx, slices)?;
        let slice = self.slice_head(ctx, features)?;
        let per_t = (0..t_len)
            .map(|t| {
                let rows: Vec<usize> = (0..batch).map(|b| b * t_len + t).collect();
                ctx.tape.index_select(features, &rows)
            })
            .collect::<Result<Vec<_>>>()?;
        let hidden = self.convlstm.unroll(ctx, &per_t)?;
        let mut sequence = Vec::with_capacity(t_len);
        let mut probs = Vec::with_capacity(t_len);
        for h in hidden {
            let logits = self.sequence_head(ctx, h)?;
            probs.push(ctx.tape.softmax(logits)?);
            sequence.push(logits);
        }
        let ensemble = self.weighted_ensemble(ctx, &probs)?;
        Ok(BatchLogits { slice, sequence, ensemble })
    }

    /// Evaluation-mode prediction for one sequence given as `T*S*S` pixels.
    pub fn predict<E: Element>(&self, store: &ParamStore<E>, pixels: &[f32]) -> Result<SlicePrediction> {
        let (t_len, s) = (self.config.seq_len, self.config.input_size);
        if pixels.len() != t_len * s * s {
            return Err(Error::shape(
                "predict",
                format!(
                    "model expects T={t_len} slices of {s}x{s} ({} values), got {}",
                    t_len * s * s,
                    pixels.len()
                ),
            ));
        }
        let input = Tensor::new(&[t_len, 1, s, s], pixels.iter().map(|&p| E::from_f64_lossy(p as f64)).collect())?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, Mode::Eval);
        let x = ctx.tape.constant(input);
        let logits = self.forward(&mut ctx, x, 1)?;
        let k = self.config.num_classes;
        let to_f32 = |t: &Tensor<E>| t.data().iter().map(|v| v.to_f64_lossy() as f32).collect::<Vec<f32>>();
        let probs_slice = {
            let p = ctx.tape.softmax(logits.slice)?;
            to_f32(ctx.tape.value(p)?)
        };
        let mut probs_seq = Vec::with_capacity(t_len * k);
        for &l in &logits.sequence {
            let p = ctx.tape.softmax(l)?;
            probs_seq.extend(to_f32(ctx.tape.value(p)?));
        }
        let pf = ctx.tape.softmax(logits.ensemble)?;
        let probs_final = to_f32(ctx.tape.value(pf)?);
        let predicted_class = argmax(&probs_final);
        Ok(SlicePrediction {
            probs_slice: Tensor::new(&[t_len, k], probs_slice)?,
            probs_seq: Tensor::new(&[t_len, k], probs_seq)?,
            probs_final: Tensor::new(&[k], probs_final)?,
            predicted_class,
        })
    }
}

/// Trainable-parameter counts by name, in store order.
pub fn param_census<E: Element>(store: &ParamStore<E>) -> Vec<(String, usize)> {
    store
        .trainable_ids()
        .map(|id| (store.name(id).to_string(), store.tensor(id).numel()))
        .collect()
}

/// Total weights held by depthwise MSDA branch kernels.
pub fn depthwise_census<E: Element>(store: &ParamStore<E>) -> usize {
    param_census(store)
        .into_iter()
        .filter(|(name, _)| name.contains(".depthwise.weight"))
        .map(|(_, n)| n)
        .sum()
}
