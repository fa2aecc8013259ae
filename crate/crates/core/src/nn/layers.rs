use super::{BnUpdate, Ctx, Initializer, Mode, ParamId, ParamStore, BN_EPSILON};
use crate::conv::ConvSpec;
use crate::element::Element;
use crate::error::Result;
use crate::tape::Var;
use crate::tensor::Tensor;

/// 2-D convolution with an optional bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Result<Self> {
        let cin_g = cin / spec.groups;
        let fan_in = cin_g * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            init.fan_in_uniform(&[cout, cin_g, kernel, kernel], fan_in)?,
            true,
        )?;
        let bias = bias
            .then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])?, true))
            .transpose()?;
        Ok(Self { weight, bias, spec })
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, '_, E>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.spec)
    }
}

/// Per-channel batch normalisation with running statistics kept as buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], E::one())?, true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])?, true)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels])?, false)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], E::one())?, false)?,
        })
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, '_, E>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        let eps = E::from_f64_lossy(BN_EPSILON);
        match ctx.mode() {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm_train(x, g, b, eps)?;
                let n = stats.count as f64;
                let unbias = E::from_f64_lossy(n / (n - 1.0));
                ctx.push_update(BnUpdate {
                    mean_id: self.running_mean,
                    var_id: self.running_var,
                    batch_mean: stats.mean,
                    batch_var: stats.var.into_iter().map(|v| v * unbias).collect(),
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = ctx.store();
                let mean = store.tensor(self.running_mean).data().to_vec();
                let var = store.tensor(self.running_var).data().to_vec();
                ctx.tape.batch_norm_eval(x, g, b, &mean, &var, eps)
            }
        }
    }
}

/// Bias-free convolution, batch norm, relu.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    /// Registers `{prefix}.{conv_name}.weight` and `{prefix}.bn.*`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        init: &mut Initializer,
        prefix: &str,
        conv_name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(store, init, &format!("{prefix}.{conv_name}"), cin, cout, kernel, spec, false)?,
            bn: BatchNorm::new(store, &format!("{prefix}.bn"), cout)?,
        })
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, '_, E>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        ctx.tape.relu(y)
    }
}

/// Fully connected layer `[N,Fin] -> [N,Fout]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<E: Element>(store: &mut ParamStore<E>, init: &mut Initializer, name: &str, fin: usize, fout: usize) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), init.fan_in_uniform(&[fout, fin], fin)?, true)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fout])?, true)?,
        })
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, '_, E>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        ctx.tape.linear(x, w, Some(b))
    }
}
