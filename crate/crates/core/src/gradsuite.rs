//! The gradient-check table run by `smanet gradcheck`: every primitive and
//! every composite block, each compared with central differences in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::ConvSpec;
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport, DEFAULT_EPSILON};
use crate::loss::{loss_2d, loss_3d, loss_sv};
use crate::model::{Inference, ModelConfig, SmaNet, WeightedEnsemble};
use crate::nn::{ConvLstm, ConvLstmCell, ConvLstmConfig, ConvLstmState, Ctx, Initializer, Mode, MsdaBlock, MsdaConfig, ParamStore, SeGate};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

/// A row passes when its maximum relative error is below this.
pub const PASS_THRESHOLD: f64 = 1e-4;
/// Step for composite blocks.
pub const BLOCK_EPSILON: f64 = 1e-4;
/// Minimum distance of every relu input from zero at a block check point.
pub const RELU_MARGIN: f64 = 1e-2;
const MAX_CANDIDATES: u64 = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Primitive,
    Block,
}

#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub name: &'static str,
    pub kind: RowKind,
    pub report: GradCheckReport,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < PASS_THRESHOLD
    }
}

fn random(dims: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0)).expect("valid dims")
}

/// Values with magnitude in `[0.1, 1]`, away from the relu kink.
fn off_kink(dims: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
    .expect("valid dims")
}

/// Reduces any output to a scalar with fixed non-uniform weights so every
/// output element contributes a distinct amount.
fn weighted_sum(t: &mut Tape<f64>, v: Var) -> Result<Var> {
    let dims = t.dims(v)?.to_vec();
    let w = Tensor::from_fn(&dims, |i| (1.3 * i as f64 + 0.5).sin()).expect("valid dims");
    let w = t.constant(w);
    let p = t.mul(v, w)?;
    t.sum(p)
}

type Program = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn primitive(name: &'static str, inputs: Vec<Tensor<f64>>, program: Program) -> (&'static str, Vec<Tensor<f64>>, Program) {
    (name, inputs, program)
}

fn primitive_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, Program)> {
    let s = [2, 3];
    vec![
        primitive("add", vec![random(&s, 1), random(&s, 2)], Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y)
        })),
        primitive("sub", vec![random(&s, 3), random(&s, 4)], Box::new(|t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y)
        })),
        primitive("mul", vec![random(&s, 5), random(&s, 6)], Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y)
        })),
        primitive("mul_broadcast", vec![random(&s, 7), random(&[1], 8)], Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y)
        })),
        primitive("add_scalar", vec![random(&s, 9)], Box::new(|t, v| {
            let y = t.add_scalar(v[0], 0.75)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y)
        })),
        primitive("mul_scalar", vec![random(&s, 10)], Box::new(|t, v| {
            let y = t.mul_scalar(v[0], -1.5)?;
            weighted_sum(t, y)
        })),
        primitive("relu", vec![off_kink(&[3, 4], 11)], Box::new(|t, v| {
            let y = t.relu(v[0])?;
            weighted_sum(t, y)
        })),
        primitive("sigmoid", vec![random(&[3, 4], 12)], Box::new(|t, v| {
            let y = t.sigmoid(v[0])?;
            weighted_sum(t, y)
        })),
        primitive("tanh", vec![random(&[3, 4], 13)], Box::new(|t, v| {
            let y = t.tanh(v[0])?;
            weighted_sum(t, y)
        })),
        primitive(
            "conv2d_dilated_grouped",
            vec![random(&[2, 4, 6, 6], 14), random(&[4, 2, 3, 3], 15), random(&[4], 16)],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(1, 2, 2, 2))?;
                weighted_sum(t, y)
            }),
        ),
        primitive(
            "conv2d_strided",
            vec![random(&[2, 3, 7, 7], 17), random(&[2, 3, 3, 3], 18)],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], None, ConvSpec::new(2, 1, 1, 1))?;
                weighted_sum(t, y)
            }),
        ),
        primitive(
            "conv1d",
            vec![random(&[2, 3, 7], 19), random(&[2, 3, 3], 20), random(&[2], 21)],
            Box::new(|t, v| {
                let y = t.conv1d(v[0], v[1], Some(v[2]), ConvSpec::same(3, 1, 1))?;
                weighted_sum(t, y)
            }),
        ),
        primitive(
            "linear",
            vec![random(&[3, 4], 22), random(&[2, 4], 23), random(&[2], 24)],
            Box::new(|t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                weighted_sum(t, y)
            }),
        ),
        primitive(
            "batch_norm_train",
            vec![random(&[3, 2, 2, 2], 25), random(&[2], 26), random(&[2], 27)],
            Box::new(|t, v| {
                let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, y)
            }),
        ),
        primitive(
            "batch_norm_eval",
            vec![random(&[3, 2, 2, 2], 28), random(&[2], 29), random(&[2], 30)],
            Box::new(|t, v| {
                let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 1.5], 1e-5)?;
                weighted_sum(t, y)
            }),
        ),
        primitive("global_avg_pool", vec![random(&[2, 3, 3, 3], 31)], Box::new(|t, v| {
            let y = t.global_avg_pool(v[0])?;
            weighted_sum(t, y)
        })),
        primitive(
            "channel_scale",
            vec![random(&[2, 3, 2, 2], 32), random(&[2, 3], 33)],
            Box::new(|t, v| {
                let y = t.channel_scale(v[0], v[1])?;
                weighted_sum(t, y)
            }),
        ),
        primitive("softmax", vec![random(&[3, 4], 34)], Box::new(|t, v| {
            let y = t.softmax(v[0])?;
            weighted_sum(t, y)
        })),
        primitive("cross_entropy", vec![random(&[4, 3], 35)], Box::new(|t, v| t.cross_entropy(v[0], &[0, 2, 1, 2]))),
        primitive("sum", vec![random(&s, 36)], Box::new(|t, v| {
            let y = t.mul(v[0], v[0])?;
            t.sum(y)
        })),
        primitive("mean", vec![random(&s, 37)], Box::new(|t, v| {
            let y = t.mul(v[0], v[0])?;
            t.mean(y)
        })),
        primitive("reshape", vec![random(&s, 38)], Box::new(|t, v| {
            let y = t.reshape(v[0], &[3, 2])?;
            weighted_sum(t, y)
        })),
        primitive("narrow", vec![random(&[2, 5, 2], 39)], Box::new(|t, v| {
            let y = t.narrow(v[0], 1, 1, 3)?;
            weighted_sum(t, y)
        })),
        primitive("concat", vec![random(&[2, 2], 40), random(&[2, 3], 41)], Box::new(|t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            weighted_sum(t, y)
        })),
        primitive("index_select", vec![random(&[4, 3], 42)], Box::new(|t, v| {
            let y = t.index_select(v[0], &[3, 0, 3])?;
            weighted_sum(t, y)
        })),
    ]
}

fn block_output(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    if tape.value(out)?.numel() == 1 {
        Ok(out)
    } else {
        weighted_sum(tape, out)
    }
}

/// Checks a block against its external inputs plus every trainable
/// parameter, with batch norm in training mode.
///
/// Central differences are meaningless where a relu input sits within the
/// step of its kink, so candidate points are drawn from successive seeds
/// until every relu input in the block is at least [`RELU_MARGIN`] from
/// zero. Blocks without relu take the first candidate.
fn check_block<M, B, F>(build: B, fault: Option<OpKind>, body: F) -> Result<GradCheckReport>
where
    B: Fn(u64) -> Result<(M, ParamStore<f64>, Vec<Tensor<f64>>)>,
    F: Fn(&M, &mut Ctx<'_, '_, f64>, &[Var]) -> Result<Var>,
{
    let run = |module: &M, store: &ParamStore<f64>, tape: &mut Tape<f64>, vars: &[Var], n: usize| -> Result<Var> {
        let out = {
            let mut ctx = Ctx::with_vars(tape, store, &vars[n..], Mode::Train)?;
            body(module, &mut ctx, &vars[..n])?
        };
        block_output(tape, out)
    };
    let mut seed = 0;
    let (module, store, inputs) = loop {
        let (module, store, inputs) = build(seed)?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .cloned()
            .chain(store.trainable_ids().map(|id| store.tensor(id).detached()))
            .map(|t| tape.constant(t))
            .collect();
        run(&module, &store, &mut tape, &vars, inputs.len())?;
        let clear = tape.relu_margin().is_none_or(|m| m >= RELU_MARGIN);
        if clear || seed + 1 == MAX_CANDIDATES {
            break (module, store, inputs);
        }
        seed += 1;
    };
    let n = inputs.len();
    let mut all = inputs;
    all.extend(store.trainable_ids().map(|id| store.tensor(id).detached()));
    grad_check(&all, BLOCK_EPSILON, fault, |tape, vars| run(&module, &store, tape, vars, n))
}

/// Configuration of the small network used for the whole-model row.
pub fn micro_model_config() -> ModelConfig {
    ModelConfig {
        input_size: 8,
        seq_len: 3,
        num_classes: 3,
        stage_channels: vec![4],
        se_reduction: 2,
        lstm_hidden: 2,
        lstm_kernel: 3,
        lstm_layers: 2,
        we_conv_channels: 2,
        we_kernel: 3,
        inference: Inference::Ensemble,
    }
}

fn inputs(shapes: &[&[usize]], seed: u64) -> Vec<Tensor<f64>> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, d)| random(d, 1000 * seed + 50 + i as u64))
        .collect()
}

fn block_rows(fault: Option<OpKind>) -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::new();
    let mut push = |name: &'static str, report: GradCheckReport| {
        rows.push(GradCheckRow {
            name,
            kind: RowKind::Block,
            report,
        })
    };

    push(
        "se_gate",
        check_block(
            |seed| {
                let mut store = ParamStore::new();
                let se = SeGate::new(&mut store, &mut Initializer::new(seed), "se", 4, 2)?;
                Ok((se, store, inputs(&[&[2, 4, 3, 3]], seed)))
            },
            fault,
            |se, ctx, x| se.forward(ctx, x[0]),
        )?,
    );

    push(
        "msda_block",
        check_block(
            |seed| {
                let mut store = ParamStore::new();
                let msda = MsdaBlock::new(&mut store, &mut Initializer::new(seed), "msda", MsdaConfig::new(2, 4, 2))?;
                Ok((msda, store, inputs(&[&[2, 2, 5, 5]], seed)))
            },
            fault,
            |msda, ctx, x| msda.forward(ctx, x[0]),
        )?,
    );

    push(
        "convlstm_step",
        check_block(
            |seed| {
                let mut store = ParamStore::new();
                let cell = ConvLstmCell::new(&mut store, &mut Initializer::new(seed), "cell", 2, 2, 3)?;
                Ok((cell, store, inputs(&[&[2, 2, 3, 3][..]; 3], seed)))
            },
            fault,
            |cell, ctx, v| {
                let (s, _) = cell.step(ctx, v[0], Some(ConvLstmState { h: v[1], c: v[2] }))?;
                ctx.tape.concat(&[s.h, s.c], 1)
            },
        )?,
    );

    push(
        "convlstm_unroll",
        check_block(
            |seed| {
                let mut store = ParamStore::new();
                let cfg = ConvLstmConfig {
                    input_channels: 2,
                    hidden_channels: 2,
                    kernel_size: 3,
                    num_layers: 2,
                };
                let lstm = ConvLstm::new(&mut store, &mut Initializer::new(seed), "convlstm", cfg)?;
                Ok((lstm, store, inputs(&[&[2, 2, 3, 3][..]; 3], seed)))
            },
            fault,
            |lstm, ctx, v| {
                let hs = lstm.unroll(ctx, v)?;
                ctx.tape.concat(&hs, 1)
            },
        )?,
    );

    push(
        "weighted_ensemble",
        check_block(
            |seed| {
                let mut store = ParamStore::new();
                let we = WeightedEnsemble::new(&mut store, &mut Initializer::new(seed), &micro_model_config())?;
                Ok((we, store, inputs(&[&[2, 3][..]; 3], seed)))
            },
            fault,
            |we, ctx, v| {
                let probs = v.iter().map(|&l| ctx.tape.softmax(l)).collect::<Result<Vec<_>>>()?;
                we.forward(ctx, &probs)
            },
        )?,
    );

    push(
        "loss_sv",
        check_block(
            |seed| Ok(((), ParamStore::new(), inputs(&[&[6, 3], &[2, 3], &[2, 3], &[2, 3], &[2, 3]], seed))),
            fault,
            |_, ctx, v| {
                let t = &mut *ctx.tape;
                let l2 = loss_2d(t, v[0], &[1, 2], 3)?;
                let l3 = loss_3d(t, &v[1..4], v[4], &[1, 2])?;
                loss_sv(t, l2, l3, 0.7)
            },
        )?,
    );

    let micro = micro_model_config();
    let seq_len = micro.seq_len;
    push(
        "full_model",
        check_block(
            |seed| {
                let (model, store) = SmaNet::new::<f64>(micro.clone(), seed)?;
                let s = micro.input_size;
                Ok((model, store, inputs(&[&[2 * seq_len, 1, s, s]], seed)))
            },
            fault,
            |model, ctx, v| {
                let targets = [0usize, 2];
                let out = model.forward(ctx, v[0], 2)?;
                let t = &mut *ctx.tape;
                let l2 = loss_2d(t, out.slice, &targets, seq_len)?;
                let l3 = loss_3d(t, &out.sequence, out.ensemble, &targets)?;
                loss_sv(t, l2, l3, 1.0)
            },
        )?,
    );
    Ok(rows)
}

/// Runs every row. `fault` flips the sign of one backward rule in the
/// analytic pass so that the rows depending on it fail.
pub fn run_suite(fault: Option<OpKind>) -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::new();
    for (name, inputs, program) in primitive_cases() {
        let report = grad_check(&inputs, DEFAULT_EPSILON, fault, |t, v| program(t, v))?;
        rows.push(GradCheckRow {
            name,
            kind: RowKind::Primitive,
            report,
        });
    }
    rows.extend(block_rows(fault)?);
    Ok(rows)
}

/// Fixed-width table, one row per check, `PASS`/`FAIL` in the last column.
pub fn format_table(rows: &[GradCheckRow]) -> String {
    let mut out = format!("{:<24} {:<9} {:>8} {:>12}  result\n", "check", "kind", "elements", "max_rel_err");
    for r in rows {
        let kind = match r.kind {
            RowKind::Primitive => "primitive",
            RowKind::Block => "block",
        };
        out.push_str(&format!(
            "{:<24} {:<9} {:>8} {:>12.3e}  {}\n",
            r.name,
            kind,
            r.report.elements,
            r.report.max_rel_error,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    out
}
