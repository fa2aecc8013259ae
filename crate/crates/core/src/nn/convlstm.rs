//! Convolutional LSTM without peephole connections.

use super::{Conv, Ctx, Initializer, ParamStore};
use crate::conv::ConvSpec;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tape::Var;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLstmConfig {
    pub input_channels: usize,
    pub hidden_channels: usize,
    pub kernel_size: usize,
    pub num_layers: usize,
}

impl ConvLstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.hidden_channels == 0 || self.num_layers == 0 {
            return Err(Error::Config("ConvLSTM channel and layer counts must be positive".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "ConvLSTM kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }
}

/// Hidden and cell state, both `[N,Ch,H,W]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLstmState {
    pub h: Var,
    pub c: Var,
}

/// Gate activations of one step, exposed for inspection.
#[derive(Debug, Clone, Copy)]
pub struct GateValues {
    pub input: Var,
    pub forget: Var,
    pub output: Var,
    pub candidate: Var,
}

pub const FORGET_BIAS_INIT: f64 = 1.0;

/// One ConvLSTM layer. Gate channels are laid out input, forget, output,
/// candidate in both convolutions.
#[derive(Debug, Clone)]
pub struct ConvLstmCell {
    pub hidden_channels: usize,
    /// Input-to-gates convolution with the gate biases.
    pub input_conv: Conv,
    /// Hidden-to-gates convolution, bias-free.
    pub hidden_conv: Conv,
}

impl ConvLstmCell {
    pub fn new<E: Element>(store: &mut ParamStore<E>, init: &mut Initializer, prefix: &str, cin: usize, hidden: usize, kernel: usize) -> Result<Self> {
        let spec = ConvSpec::same(kernel, 1, 1);
        let input_conv = Conv::new(store, init, &format!("{prefix}.input_conv"), cin, 4 * hidden, kernel, spec, true)?;
        let hidden_conv = Conv::new(store, init, &format!("{prefix}.hidden_conv"), hidden, 4 * hidden, kernel, spec, false)?;
        let bias = input_conv.bias.expect("input conv carries the gate bias");
        store.tensor_mut(bias).data_mut()[hidden..2 * hidden]
            .iter_mut()
            .for_each(|b| *b = E::from_f64_lossy(FORGET_BIAS_INIT));
        Ok(Self {
            hidden_channels: hidden,
            input_conv,
            hidden_conv,
        })
    }

    /// Advances one time step. `state = None` means zero hidden and cell state.
    pub fn step<E: Element>(&self, ctx: &mut Ctx<'_, '_, E>, x: Var, state: Option<ConvLstmState>) -> Result<(ConvLstmState, GateValues)> {
        let ch = self.hidden_channels;
        let mut gates = self.input_conv.forward(ctx, x)?;
        if let Some(s) = state {
            let (gd, hd, cd) = (ctx.tape.dims(gates)?.to_vec(), ctx.tape.dims(s.h)?, ctx.tape.dims(s.c)?);
            let expect = [gd[0], ch, gd[2], gd[3]];
            if hd != expect || cd != expect {
                return Err(Error::shape(
                    "convlstm_step",
                    format!("state {hd:?}/{cd:?} does not match input-derived {expect:?}"),
                ));
            }
            let hg = self.hidden_conv.forward(ctx, s.h)?;
            gates = ctx.tape.add(gates, hg)?;
        }
        let t = &mut *ctx.tape;
        let i = t.narrow(gates, 1, 0, ch)?;
        let i = t.sigmoid(i)?;
        let f = t.narrow(gates, 1, ch, ch)?;
        let f = t.sigmoid(f)?;
        let o = t.narrow(gates, 1, 2 * ch, ch)?;
        let o = t.sigmoid(o)?;
        let g = t.narrow(gates, 1, 3 * ch, ch)?;
        let g = t.tanh(g)?;
        let ig = t.mul(i, g)?;
        let c = match state {
            Some(s) => {
                let fc = t.mul(f, s.c)?;
                t.add(fc, ig)?
            }
            None => ig,
        };
        let tc = t.tanh(c)?;
        let h = t.mul(o, tc)?;
        Ok((
            ConvLstmState { h, c },
            GateValues {
                input: i,
                forget: f,
                output: o,
                candidate: g,
            },
        ))
    }
}

/// Stack of ConvLSTM layers; layer `l+1` consumes the hidden sequence of layer `l`.
#[derive(Debug, Clone)]
pub struct ConvLstm {
    pub config: ConvLstmConfig,
    pub cells: Vec<ConvLstmCell>,
}

impl ConvLstm {
    pub fn new<E: Element>(store: &mut ParamStore<E>, init: &mut Initializer, prefix: &str, config: ConvLstmConfig) -> Result<Self> {
        config.validate()?;
        let cells = (0..config.num_layers)
            .map(|l| {
                let cin = if l == 0 { config.input_channels } else { config.hidden_channels };
                ConvLstmCell::new(store, init, &format!("{prefix}.layer{}", l + 1), cin, config.hidden_channels, config.kernel_size)
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, cells })
    }

    /// Runs the stack over `sequence` from zero initial states and returns
    /// the top layer's hidden states.
    pub fn unroll<E: Element>(&self, ctx: &mut Ctx<'_, '_, E>, sequence: &[Var]) -> Result<Vec<Var>> {
        if sequence.is_empty() {
            return Err(Error::Config("ConvLSTM unroll needs at least one time step".into()));
        }
        let mut inputs = sequence.to_vec();
        for cell in &self.cells {
            let mut state = None;
            let mut hidden = Vec::with_capacity(inputs.len());
            for &x in &inputs {
                let (s, _) = cell.step(ctx, x, state)?;
                hidden.push(s.h);
                state = Some(s);
            }
            inputs = hidden;
        }
        Ok(inputs)
    }
}
