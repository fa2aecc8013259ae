//! Parameter storage, forward-pass context and the composite blocks.

mod convlstm;
mod layers;
mod msda;
mod params;

pub use convlstm::{ConvLstm, ConvLstmCell, ConvLstmConfig, ConvLstmState, GateValues};
pub use layers::{BatchNorm, Conv, ConvBnRelu, Linear};
pub use msda::{MsdaBlock, MsdaConfig, SeGate, DILATION_RATES};
pub use params::{Initializer, ParamId, ParamStore};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are updated.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Pending running-statistic update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate<E> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Vec<E>,
    /// Unbiased batch variance.
    pub batch_var: Vec<E>,
}

/// Binds a parameter store to a tape for one forward pass.
pub struct Ctx<'t, 's, E: Element> {
    pub tape: &'t mut Tape<E>,
    store: &'s ParamStore<E>,
    vars: Vec<Option<Var>>,
    mode: Mode,
    updates: Vec<BnUpdate<E>>,
}

impl<'t, 's, E: Element> Ctx<'t, 's, E> {
    /// Records every trainable parameter as a gradient-tracking leaf.
    pub fn new(tape: &'t mut Tape<E>, store: &'s ParamStore<E>, mode: Mode) -> Self {
        let vars = store
            .ids()
            .map(|id| store.is_trainable(id).then(|| tape.leaf(store.tensor(id))))
            .collect();
        Self {
            tape,
            store,
            vars,
            mode,
            updates: Vec::new(),
        }
    }

    /// Uses caller-provided variables for the trainable parameters, in
    /// [`ParamStore::trainable_ids`] order.
    pub fn with_vars(tape: &'t mut Tape<E>, store: &'s ParamStore<E>, trainable: &[Var], mode: Mode) -> Result<Self> {
        let count = store.trainable_ids().count();
        if trainable.len() != count {
            return Err(Error::Config(format!(
                "expected {count} parameter variables, got {}",
                trainable.len()
            )));
        }
        let mut it = trainable.iter().copied();
        let vars = store
            .ids()
            .map(|id| if store.is_trainable(id) { it.next() } else { None })
            .collect();
        Ok(Self {
            tape,
            store,
            vars,
            mode,
            updates: Vec::new(),
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<E> {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.vars[id.0].unwrap_or_else(|| panic!("{} is not a trainable parameter", self.store.name(id)))
    }

    /// Variable bound to each trainable parameter, in store order.
    pub fn trainable_vars(&self) -> Vec<(ParamId, Var)> {
        self.store
            .ids()
            .filter_map(|id| self.vars[id.0].map(|v| (id, v)))
            .collect()
    }

    pub(crate) fn push_update(&mut self, update: BnUpdate<E>) {
        self.updates.push(update);
    }

    pub fn take_updates(&mut self) -> Vec<BnUpdate<E>> {
        std::mem::take(&mut self.updates)
    }
}

/// Applies `running = (1 - momentum) * running + momentum * batch`.
pub fn apply_bn_updates<E: Element>(store: &mut ParamStore<E>, updates: &[BnUpdate<E>], momentum: f64) {
    let m = E::from_f64_lossy(momentum);
    let keep = E::one() - m;
    for u in updates {
        for (id, batch) in [(u.mean_id, &u.batch_mean), (u.var_id, &u.batch_var)] {
            store
                .tensor_mut(id)
                .data_mut()
                .iter_mut()
                .zip(batch)
                .for_each(|(r, &b)| *r = keep * *r + m * b);
        }
    }
}

/// Copies gradients of the trainable leaves from a finished tape into the
/// store's gradient buffers.
pub fn collect_grads<E: Element>(store: &mut ParamStore<E>, tape: &Tape<E>, vars: &[(ParamId, Var)]) -> Result<()> {
    for &(id, var) in vars {
        if let Some(g) = tape.grad(var)? {
            store.tensor_mut(id).accumulate_grad(g)?;
        }
    }
    Ok(())
}
