//! Training loop, evaluation and checkpoint persistence.
//!
//! A checkpoint holds every model tensor under its parameter name (batch-norm
//! running statistics included), the Adam moments as `adam.m.<name>` and
//! `adam.v.<name>`, the step count as `adam.step`, and run metadata under
//! `meta.*` (`meta.config` stores the UTF-8 config echo one byte per value).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, CONFIG_ECHO_FILE};
use crate::data::SequenceSample;
use crate::error::{Error, Result};
use crate::format::{read_checkpoint_file, write_checkpoint_file};
use crate::loss::{loss_2d, loss_3d, loss_sv};
use crate::metrics::{ConfusionMatrix, EvalReport, ScoredSample};
use crate::model::{Inference, ModelConfig, SlicePrediction, SmaNet};
use crate::nn::{apply_bn_updates, collect_grads, Ctx, Mode, ParamStore, BN_MOMENTUM};
use crate::optim::{epoch_learning_rate, Adam, AdamConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const LAST_CHECKPOINT: &str = "last.smck";
pub const BEST_CHECKPOINT: &str = "best.smck";
pub const METRICS_LOG: &str = "metrics.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Per-epoch multiplicative decay of the learning rate.
    pub lr_decay: f64,
    /// Weight of the sequence-level loss.
    pub lambda: f64,
    pub epochs: usize,
    /// Whole sequences per optimizer step.
    pub batch_size: usize,
    /// Seeds initialisation, shuffling and jitter.
    pub seed: u64,
    pub adam: AdamConfig,
    pub bn_momentum: f64,
    /// Amplitude of per-sequence brightness/contrast jitter; 0 disables it.
    pub jitter: f64,
    /// Validate every this many epochs (and always after the last one).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            lr_decay: 0.95,
            lambda: 1.0,
            epochs: 30,
            batch_size: 4,
            seed: 0,
            adam: AdamConfig::default(),
            bn_momentum: BN_MOMENTUM,
            jitter: 0.0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr decay must lie in (0,1], got {}", self.lr_decay));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch size and eval interval must be positive".into());
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad(format!("invalid Adam settings {a:?}"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad(format!("bn momentum must lie in [0,1], got {}", self.bn_momentum));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return bad(format!("jitter must lie in [0,1), got {}", self.jitter));
        }
        Ok(())
    }
}

/// Metrics and per-sequence predictions for one split.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<SlicePrediction>,
    pub predicted: Vec<usize>,
}

/// Score for the narrow-vs-synechiae AUC: the synechiae probability of the
/// prediction family used for inference.
fn synechiae_score(p: &SlicePrediction, mode: Inference) -> f64 {
    match mode {
        Inference::Ensemble => p.probs_final.data()[2] as f64,
        Inference::SliceVote => {
            let k = p.num_classes();
            let rows = p.probs_slice.data().chunks(k);
            let n = rows.len() as f64;
            rows.map(|r| r[2] as f64).sum::<f64>() / n
        }
    }
}

/// Predicts every sample one sequence at a time in evaluation mode.
pub fn evaluate(model: &SmaNet, store: &ParamStore<f32>, samples: &[SequenceSample], split: &str) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Config(format!("split `{split}` has no sequences")));
    }
    let k = model.config().num_classes;
    let mode = model.config().inference;
    let mut predictions = Vec::with_capacity(samples.len());
    let mut predicted = Vec::with_capacity(samples.len());
    let mut auc = Vec::new();
    for s in samples {
        let p = model.predict(store, &s.pixels)?;
        predicted.push(p.class_for(mode));
        if k == 3 && s.label >= 1 {
            auc.push(ScoredSample::new(synechiae_score(&p, mode), s.label == 2));
        }
        predictions.push(p);
    }
    let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let confusion = ConfusionMatrix::from_predictions(&truth, &predicted, k)?;
    let report = EvalReport::from_parts(split, &confusion, &auc)?;
    Ok(Evaluation {
        report,
        confusion,
        predictions,
        predicted,
    })
}

fn check_samples(config: &ModelConfig, samples: &[SequenceSample]) -> Result<()> {
    for s in samples {
        if s.seq_len != config.seq_len || s.size != config.input_size {
            return Err(Error::shape(
                "dataset",
                format!(
                    "sequence {} is [{},{},{}] but the model expects [{},{},{}]",
                    s.sequence_id, s.seq_len, s.size, s.size, config.seq_len, config.input_size, config.input_size
                ),
            ));
        }
        if s.label >= config.num_classes {
            return Err(Error::Range(format!("label {} of sequence {} with K={}", s.label, s.sequence_id, config.num_classes)));
        }
    }
    Ok(())
}

fn encode_text(text: &str) -> Result<Tensor<f32>> {
    let bytes: Vec<f32> = if text.is_empty() { vec![0.0] } else { text.bytes().map(f32::from).collect() };
    Tensor::new(&[bytes.len()], bytes)
}

fn decode_text(t: &Tensor<f32>) -> Result<String> {
    let bytes = t
        .data()
        .iter()
        .filter(|&&v| v != 0.0)
        .map(|&v| if v.fract() == 0.0 && (1.0..=255.0).contains(&v) { Ok(v as u8) } else { Err(Error::Format("meta.config holds a non-byte value".into())) })
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|_| Error::Format("meta.config is not UTF-8".into()))
}

fn find<'a>(entries: &'a [(String, Tensor<f32>)], name: &str) -> Option<&'a Tensor<f32>> {
    entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
}

fn is_model_entry(name: &str) -> bool {
    !(name.starts_with("adam.") || name.starts_with("meta."))
}

/// Copies model tensors from checkpoint entries into `store`. The first
/// tensor that is missing, extra or differently shaped is named in the error.
pub fn load_params(store: &mut ParamStore<f32>, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let t = find(entries, &name)
            .ok_or_else(|| Error::Config(format!("checkpoint does not match model: tensor `{name}` is missing")))?;
        let param = store.tensor_mut(id);
        if t.dims() != param.dims() {
            return Err(Error::Config(format!(
                "checkpoint does not match model: tensor `{name}` has dims {:?}, model expects {:?}",
                t.dims(),
                param.dims()
            )));
        }
        param.data_mut().copy_from_slice(t.data());
    }
    if let Some((name, _)) = entries.iter().find(|(n, _)| is_model_entry(n) && store.id(n).is_none()) {
        return Err(Error::Config(format!("checkpoint does not match model: unexpected tensor `{name}`")));
    }
    Ok(())
}

/// The run config stored in a checkpoint.
pub fn checkpoint_config(entries: &[(String, Tensor<f32>)]) -> Result<RunConfig> {
    let t = find(entries, "meta.config").ok_or_else(|| Error::Format("checkpoint has no meta.config entry".into()))?;
    RunConfig::parse(&decode_text(t)?)
}

/// Rebuilds the model recorded in a checkpoint file, or the one described
/// by `config` when given (a mismatch is then reported by tensor name).
pub fn load_model(path: &Path, config: Option<&ModelConfig>) -> Result<(SmaNet, ParamStore<f32>, RunConfig)> {
    let entries = read_checkpoint_file(path)?;
    let run = checkpoint_config(&entries)?;
    let model_config = config.cloned().unwrap_or_else(|| run.model.clone());
    let (model, mut store) = SmaNet::new::<f32>(model_config, 0)?;
    load_params(&mut store, &entries)?;
    Ok((model, store, run))
}

/// Model, optimizer and progress of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: SmaNet,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Best validation balanced accuracy so far, -1 before any validation.
    pub best_bacc: f64,
    /// 1-based epoch of `best_bacc`, 0 before any validation.
    pub best_epoch: usize,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, store) = SmaNet::new::<f32>(model_config, config.seed)?;
        let adam = Adam::new(&store, config.adam);
        Ok(Self {
            model,
            store,
            adam,
            config,
            epoch: 0,
            best_bacc: -1.0,
            best_epoch: 0,
        })
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        epoch_learning_rate(self.config.learning_rate, self.config.lr_decay, epoch)
    }

    /// Order in which `n` training sequences are visited in `epoch`.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(2 * epoch as u64 + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One optimizer step on `batch`; returns the batch loss.
    pub fn train_step(&mut self, batch: &[&SequenceSample], lr: f64, jitter_rng: Option<&mut ChaCha8Rng>) -> Result<f64> {
        let cfg = self.model.config();
        let (t_len, s) = (cfg.seq_len, cfg.input_size);
        let mut pixels = Vec::with_capacity(batch.len() * t_len * s * s);
        let mut targets = Vec::with_capacity(batch.len());
        match jitter_rng {
            Some(rng) => {
                let j = self.config.jitter;
                for b in batch {
                    let contrast = 1.0 + rng.random_range(-j..=j);
                    let brightness = rng.random_range(-j..=j);
                    pixels.extend(b.pixels.iter().map(|&p| (((p as f64 - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0)) as f32));
                }
            }
            None => batch.iter().for_each(|b| pixels.extend_from_slice(&b.pixels)),
        }
        targets.extend(batch.iter().map(|b| b.label));
        let input = Tensor::new(&[batch.len() * t_len, 1, s, s], pixels)?;

        let mut tape = Tape::new();
        let (root, updates, vars) = {
            let mut ctx = Ctx::new(&mut tape, &self.store, Mode::Train);
            let x = ctx.tape.constant(input);
            let out = self.model.forward(&mut ctx, x, batch.len())?;
            let l2 = loss_2d(ctx.tape, out.slice, &targets, t_len)?;
            let l3 = loss_3d(ctx.tape, &out.sequence, out.ensemble, &targets)?;
            let root = loss_sv(ctx.tape, l2, l3, self.config.lambda)?;
            (root, ctx.take_updates(), ctx.trainable_vars())
        };
        let loss = tape.value(root)?.item()? as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {}", self.epoch + 1)));
        }
        tape.backward(root)?;
        self.store.zero_grads();
        collect_grads(&mut self.store, &tape, &vars)?;
        self.adam.step(&mut self.store, lr)?;
        apply_bn_updates(&mut self.store, &updates, self.config.bn_momentum);
        Ok(loss)
    }

    /// Runs the next epoch over `train`; returns the mean batch loss.
    pub fn train_epoch(&mut self, train: &[SequenceSample]) -> Result<f64> {
        check_samples(self.model.config(), train)?;
        if train.is_empty() {
            return Err(Error::Config("training split has no sequences".into()));
        }
        let epoch = self.epoch;
        let lr = self.learning_rate(epoch);
        let order = self.epoch_order(train.len(), epoch);
        let mut jitter = (self.config.jitter > 0.0).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(2 * epoch as u64 + 2);
            rng
        });
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&SequenceSample> = chunk.iter().map(|&i| &train[i]).collect();
            total += self.train_step(&batch, lr, jitter.as_mut())?;
            batches += 1;
        }
        self.epoch += 1;
        Ok(total / batches as f64)
    }

    pub fn evaluate(&self, samples: &[SequenceSample], split: &str) -> Result<Evaluation> {
        check_samples(self.model.config(), samples)?;
        evaluate(&self.model, &self.store, samples, split)
    }

    pub fn checkpoint_entries(&self, config_text: &str) -> Result<Vec<(String, Tensor<f32>)>> {
        let mut entries: Vec<(String, Tensor<f32>)> = self
            .store
            .iter()
            .map(|(_, name, t)| (name.to_string(), t.detached()))
            .collect();
        let state = &self.adam.state;
        for (slot, &id) in state.ids.iter().enumerate() {
            let name = self.store.name(id);
            let dims = self.store.tensor(id).dims();
            entries.push((format!("adam.m.{name}"), Tensor::new(dims, state.m[slot].clone())?));
            entries.push((format!("adam.v.{name}"), Tensor::new(dims, state.v[slot].clone())?));
        }
        entries.push(("adam.step".into(), Tensor::new(&[1], vec![state.step as f32])?));
        entries.push(("meta.epoch".into(), Tensor::new(&[1], vec![self.epoch as f32])?));
        entries.push(("meta.best_bacc".into(), Tensor::new(&[1], vec![self.best_bacc as f32])?));
        entries.push(("meta.best_epoch".into(), Tensor::new(&[1], vec![self.best_epoch as f32])?));
        entries.push(("meta.config".into(), encode_text(config_text)?));
        Ok(entries)
    }

    pub fn save(&self, path: &Path, config_text: &str) -> Result<()> {
        write_checkpoint_file(path, &self.checkpoint_entries(config_text)?)
    }

    /// Restores parameters, optimizer state and progress.
    pub fn restore(&mut self, entries: &[(String, Tensor<f32>)]) -> Result<()> {
        load_params(&mut self.store, entries)?;
        let scalar = |name: &str| -> Result<f64> {
            find(entries, name)
                .ok_or_else(|| Error::Format(format!("checkpoint has no {name} entry")))?
                .item()
                .map(f64::from)
        };
        let state = &mut self.adam.state;
        for (slot, &id) in state.ids.iter().enumerate() {
            let name = self.store.name(id);
            for (prefix, buf) in [("adam.m", &mut state.m[slot]), ("adam.v", &mut state.v[slot])] {
                let key = format!("{prefix}.{name}");
                let t = find(entries, &key).ok_or_else(|| Error::Format(format!("checkpoint has no {key} entry")))?;
                if t.numel() != buf.len() {
                    return Err(Error::Format(format!("{key} has {} values, expected {}", t.numel(), buf.len())));
                }
                buf.copy_from_slice(t.data());
            }
        }
        state.step = scalar("adam.step")? as u64;
        self.epoch = scalar("meta.epoch")? as usize;
        self.best_bacc = scalar("meta.best_bacc")?;
        self.best_epoch = scalar("meta.best_epoch")? as usize;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.restore(&read_checkpoint_file(path)?)
    }
}

/// What a finished run reports.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    /// Mean training loss of each epoch run in this invocation.
    pub train_losses: Vec<f64>,
    /// Validation balanced accuracy per epoch, NaN where skipped.
    pub val_bacc: Vec<f64>,
    pub best_bacc: f64,
    pub best_epoch: usize,
    pub epochs_completed: usize,
}

fn io_write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Trains for `config.train.epochs` epochs in `run_dir`, validating on `val`.
///
/// Writes the config echo, `last.smck` (initially and after every epoch),
/// `best.smck` whenever validation balanced accuracy strictly improves, and
/// one `metrics.tsv` line per epoch. With `resume`, progress continues from
/// that checkpoint and earlier log lines in `run_dir` are kept.
pub fn train_run(
    run_dir: &Path,
    config: &RunConfig,
    train: &[SequenceSample],
    val: &[SequenceSample],
    resume: Option<&Path>,
) -> Result<(Trainer, RunSummary)> {
    config.model.validate()?;
    config.train.validate()?;
    check_samples(&config.model, train)?;
    check_samples(&config.model, val)?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(format!("creating {}", run_dir.display()), e))?;
    let text = config.render();
    io_write(&run_dir.join(CONFIG_ECHO_FILE), &text)?;

    let mut trainer = Trainer::new(config.model.clone(), config.train.clone())?;
    let log_path = run_dir.join(METRICS_LOG);
    let mut log: Vec<String> = Vec::new();
    if let Some(path) = resume {
        trainer.load(path)?;
        if let Ok(old) = fs::read_to_string(&log_path) {
            log.extend(old.lines().take(trainer.epoch).map(str::to_string));
        }
    }
    let last = run_dir.join(LAST_CHECKPOINT);
    trainer.save(&last, &text)?;

    let mut summary = RunSummary {
        run_dir: run_dir.to_path_buf(),
        train_losses: Vec::new(),
        val_bacc: Vec::new(),
        best_bacc: trainer.best_bacc,
        best_epoch: trainer.best_epoch,
        epochs_completed: trainer.epoch,
    };
    let epochs = config.train.epochs;
    while trainer.epoch < epochs {
        let lr = trainer.learning_rate(trainer.epoch);
        let loss = match trainer.train_epoch(train) {
            Ok(l) => l,
            Err(e) => {
                trainer.save(&last, &text)?;
                return Err(e);
            }
        };
        let e = trainer.epoch;
        let bacc = if e % config.train.eval_every == 0 || e == epochs {
            trainer.evaluate(val, "val")?.report.b_acc
        } else {
            f64::NAN
        };
        let improved = bacc > trainer.best_bacc;
        if improved {
            trainer.best_bacc = bacc;
            trainer.best_epoch = e;
        }
        trainer.save(&last, &text)?;
        if improved {
            trainer.save(&run_dir.join(BEST_CHECKPOINT), &text)?;
        }
        log.push(format!("{e}\t{loss:.6}\t{bacc:.6}\t{lr:.6e}"));
        let mut body = log.join("\n");
        body.push('\n');
        io_write(&log_path, &body)?;
        summary.train_losses.push(loss);
        summary.val_bacc.push(bacc);
    }
    summary.best_bacc = trainer.best_bacc;
    summary.best_epoch = trainer.best_epoch;
    summary.epochs_completed = trainer.epoch;
    Ok((trainer, summary))
}
