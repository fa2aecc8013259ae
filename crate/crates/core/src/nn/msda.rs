//! Multi-scale discriminative aggregation block.
//!
//! A dense 1x1 convolution produces `x`; three depthwise 3x3 atrous
//! branches with dilations 1, 2, 3 are chained as
//! `y1 = f1(x)`, `y2 = f2(x + y1)`, `y3 = f3(x + y2)`; their sum is
//! re-weighted per channel by a squeeze-and-excitation gate.

use super::{ConvBnRelu, Ctx, Initializer, Linear, ParamStore};
use crate::conv::ConvSpec;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tape::Var;

pub const DILATION_RATES: [usize; 3] = [1, 2, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MsdaConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub se_reduction: usize,
}

impl MsdaConfig {
    pub fn new(in_channels: usize, out_channels: usize, se_reduction: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            se_reduction,
        }
    }

    pub fn dilation_rates(&self) -> [usize; 3] {
        DILATION_RATES
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("MSDA channel counts must be positive".into()));
        }
        if self.se_reduction == 0 || self.se_reduction > self.out_channels || !self.out_channels.is_multiple_of(self.se_reduction) {
            return Err(Error::Config(format!(
                "SE reduction {} must divide the {} output channels",
                self.se_reduction, self.out_channels
            )));
        }
        Ok(())
    }

    /// Weights held by the three depthwise branches: `3 * C * 9`.
    pub fn depthwise_weight_count(&self) -> usize {
        DILATION_RATES.len() * self.out_channels * 9
    }
}

/// Squeeze-and-excitation channel gate.
#[derive(Debug, Clone)]
pub struct SeGate {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SeGate {
    pub fn new<E: Element>(store: &mut ParamStore<E>, init: &mut Initializer, prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "SE reduction {reduction} must divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Linear::new(store, init, &format!("{prefix}.fc1"), channels, hidden)?,
            fc2: Linear::new(store, init, &format!("{prefix}.fc2"), hidden, channels)?,
        })
    }

    /// Per-sample channel scales `[N,C]` in (0,1).
    pub fn scales<E: Element>(&self, ctx: &mut Ctx<'_, '_, E>, u: Var) -> Result<Var> {
        let pooled = ctx.tape.global_avg_pool(u)?;
        let h = self.fc1.forward(ctx, pooled)?;
        let h = ctx.tape.relu(h)?;
        let s = self.fc2.forward(ctx, h)?;
        ctx.tape.sigmoid(s)
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, '_, E>, u: Var) -> Result<Var> {
        let s = self.scales(ctx, u)?;
        ctx.tape.channel_scale(u, s)
    }
}

#[derive(Debug, Clone)]
pub struct MsdaBlock {
    pub config: MsdaConfig,
    pub pointwise: ConvBnRelu,
    pub branches: [ConvBnRelu; 3],
    pub se: SeGate,
}

impl MsdaBlock {
    pub fn new<E: Element>(store: &mut ParamStore<E>, init: &mut Initializer, prefix: &str, config: MsdaConfig) -> Result<Self> {
        config.validate()?;
        let c = config.out_channels;
        let pointwise = ConvBnRelu::new(store, init, &format!("{prefix}.pointwise"), "conv", config.in_channels, c, 1, ConvSpec::default())?;
        let mut branch = |i: usize, d: usize| {
            ConvBnRelu::new(store, init, &format!("{prefix}.branch{i}"), "depthwise", c, c, 3, ConvSpec::same(3, d, c))
        };
        let branches = [branch(1, DILATION_RATES[0])?, branch(2, DILATION_RATES[1])?, branch(3, DILATION_RATES[2])?];
        let se = SeGate::new(store, init, &format!("{prefix}.se"), c, config.se_reduction)?;
        Ok(Self {
            config,
            pointwise,
            branches,
            se,
        })
    }

    /// Pointwise stage: `relu(bn(conv1x1(input)))`.
    pub fn pointwise_forward<E: Element>(&self, ctx: &mut Ctx<'_, '_, E>, input: Var) -> Result<Var> {
        self.pointwise.forward(ctx, input)
    }

    /// Hierarchically chained atrous branches on the pointwise output.
    pub fn separable_branches<E: Element>(&self, ctx: &mut Ctx<'_, '_, E>, x: Var) -> Result<[Var; 3]> {
        let y1 = self.branches[0].forward(ctx, x)?;
        let in2 = ctx.tape.add(x, y1)?;
        let y2 = self.branches[1].forward(ctx, in2)?;
        let in3 = ctx.tape.add(x, y2)?;
        let y3 = self.branches[2].forward(ctx, in3)?;
        Ok([y1, y2, y3])
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, '_, E>, input: Var) -> Result<Var> {
        let x = self.pointwise_forward(ctx, input)?;
        let [y1, y2, y3] = self.separable_branches(ctx, x)?;
        let u = ctx.tape.add(y1, y2)?;
        let u = ctx.tape.add(u, y3)?;
        self.se.forward(ctx, u)
    }
}
