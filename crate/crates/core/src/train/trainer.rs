use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use autograd::{Element, Tape, Tensor};
use serde::{Deserialize, Serialize};

use super::config::{ControllerSignal, Mode, Precision, TrainConfig};
use super::optim::Optimizer;
use crate::checkpoint::Checkpoint;
use crate::data::{gt_mask_image, Dataset, LabelBatch, Manifest, Split};
use crate::error::{io_err, json_err, Error, Result};
use crate::eval::evaluate;
use crate::losses::{combine, dice_ce_deep_supervision, rl_loss, total_loss, tr_loss};
use crate::network::{ArchitectureDescriptor, Network, ParamCount};
use crate::pruning::{sample_ids, CalibrationCache, ControllerState, Event, EventKind};
use crate::report::timeline;
use crate::rng::{purpose, Stream};

pub const EPOCHS_CSV: &str = "epochs.csv";
pub const EVENTS_JSONL: &str = "events.jsonl";
pub const CONTROLLER_CSV: &str = "controller.csv";
pub const EVALS_JSONL: &str = "evals.jsonl";
pub const TIMELINE_JSON: &str = "timeline.json";
pub const INITIAL_ARCHITECTURE: &str = "architecture_initial.json";
const CSV_HEADER: &str = "epoch,l_seg,l_tr,l_rl,l_total,params_effective,branches_active,event,seconds";

/// Loss components of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub l_seg: f64,
    pub l_tr: f64,
    pub l_rl: f64,
    pub l_total: f64,
}

/// One row of the epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_seg: f64,
    pub l_tr: f64,
    pub l_rl: f64,
    pub l_total: f64,
    pub params_effective: usize,
    pub branches_active: usize,
    /// Controller events of this epoch joined by `+`; empty if none.
    pub event: String,
    pub seconds: f64,
}

impl EpochRecord {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.3}",
            self.epoch,
            self.l_seg,
            self.l_tr,
            self.l_rl,
            self.l_total,
            self.params_effective,
            self.branches_active,
            self.event,
            self.seconds
        )
    }
}

/// Reads an epoch log written by the trainer.
pub fn read_epoch_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Data(format!("{}: unexpected header", path.display())));
    }
    let bad = |n: usize| Error::Data(format!("{}: malformed row {n}", path.display()));
    lines
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad(n));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(n));
            let int = |i: usize| f[i].parse::<usize>().map_err(|_| bad(n));
            Ok(EpochRecord {
                epoch: int(0)?,
                l_seg: num(1)?,
                l_tr: num(2)?,
                l_rl: num(3)?,
                l_total: num(4)?,
                params_effective: int(5)?,
                branches_active: int(6)?,
                event: f[7].to_string(),
                seconds: num(8)?,
            })
        })
        .collect()
}

/// Periodic evaluation result used to track accuracy across pruning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub epoch: usize,
    pub split: Split,
    /// Per foreground class.
    pub mean_dice: Vec<f64>,
    pub mean_nsd: Vec<f64>,
    pub params_effective: usize,
    /// Commits issued up to and including this epoch.
    pub commits: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub epochs: usize,
    pub initial_params: ParamCount,
    pub final_params: ParamCount,
    pub events: Vec<Event>,
    pub final_architecture: ArchitectureDescriptor,
    pub final_checkpoint: PathBuf,
    pub evals: Vec<EvalPoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Bookkeeping {
    initial: ArchitectureDescriptor,
    initial_params: ParamCount,
    records: Vec<EpochRecord>,
    evals: Vec<EvalPoint>,
}

/// Stateful training run over one configuration.
pub struct Trainer<E> {
    pub config: TrainConfig,
    pub network: Network<E>,
    pub optimizer: Optimizer<E>,
    pub controller: ControllerState,
    /// Completed epochs.
    pub epoch: usize,
    pub records: Vec<EpochRecord>,
    pub evals: Vec<EvalPoint>,
    rng: Stream,
    initial: ArchitectureDescriptor,
    initial_params: ParamCount,
    train: Dataset,
    eval_data: Option<Dataset>,
    monitor: Option<(Tensor<E>, LabelBatch)>,
}

impl<E: Element> Trainer<E> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let network = match config.mode {
            Mode::Psp => Network::build(&config.model.resolve()?, config.seed)?,
            Mode::Retrain => {
                let desc = config.load_architecture()?.expect("validated");
                Network::compact_from_descriptor(&desc, config.seed)?
            }
        };
        let mut controller = match config.mode {
            Mode::Psp => ControllerState::new(config.initial_p()?),
            Mode::Retrain => ControllerState::disabled(),
        };
        controller.window = config.controller_window;
        controller.threshold = config.improvement_threshold;
        controller.tolerance = config.convergence_tolerance;
        let optimizer = Optimizer::new(config.optimizer.clone())?;
        let rng = Stream::new(config.seed, purpose::SAMPLING);
        let (train, eval_data) = load_data(&config)?;
        let monitor = monitor_batch(&config, &train)?;
        Ok(Self {
            monitor,
            initial: network.descriptor(),
            initial_params: network.param_count(),
            network,
            optimizer,
            controller,
            epoch: 0,
            records: Vec::new(),
            evals: Vec::new(),
            rng,
            train,
            eval_data,
            config,
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(config: TrainConfig, dir: &Path) -> Result<Self> {
        config.validate()?;
        let ck = Checkpoint::<E>::load(dir)?;
        let book: Bookkeeping = serde_json::from_value(ck.extra.clone())
            .map_err(|e| Error::Checkpoint(format!("trainer bookkeeping: {e}")))?;
        if book.records.len() != ck.epoch {
            return Err(Error::Checkpoint(format!(
                "checkpoint at epoch {} carries {} epoch records",
                ck.epoch,
                book.records.len()
            )));
        }
        let (train, eval_data) = load_data(&config)?;
        let monitor = monitor_batch(&config, &train)?;
        log::info!("resuming from {} after epoch {}", dir.display(), ck.epoch);
        Ok(Self {
            network: ck.network,
            optimizer: ck.optimizer,
            controller: ck.controller,
            epoch: ck.epoch,
            records: book.records,
            evals: book.evals,
            rng: Stream::from_state(ck.rng),
            initial: book.initial,
            initial_params: book.initial_params,
            train,
            eval_data,
            monitor,
            config,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<E>> {
        let book = Bookkeeping {
            initial: self.initial.clone(),
            initial_params: self.initial_params,
            records: self.records.clone(),
            evals: self.evals.clone(),
        };
        Ok(Checkpoint {
            network: self.network.clone(),
            optimizer: self.optimizer.clone(),
            controller: self.controller.clone(),
            rng: self.rng.state(),
            epoch: self.epoch,
            extra: serde_json::to_value(book).map_err(|e| Error::Checkpoint(e.to_string()))?,
        })
    }

    pub fn checkpoint_dir(&self, epoch: usize) -> PathBuf {
        self.config
            .output_dir
            .join("checkpoints")
            .join(format!("epoch_{epoch:04}"))
    }

    pub fn save_checkpoint(&self) -> Result<PathBuf> {
        let dir = self.checkpoint_dir(self.epoch);
        self.checkpoint()?.save(&dir)?;
        Ok(dir)
    }

    /// Forward, total loss, backward and one optimizer step on a fresh batch.
    pub fn train_step(&mut self) -> Result<StepLosses> {
        let cfg = &self.config;
        let (x, y) = self
            .train
            .sample_batch::<E>(&mut self.rng, cfg.batch_size, cfg.patch_size)?;
        let pyramid = y.pyramid(self.network.depth() - 1)?;

        // target encoding of the GT-masked image; gradient-free by design
        let masked = gt_mask_image(&x, &y)?;
        let mut side = Tape::inference();
        let mv = side.leaf(masked, false);
        let ev = self.network.encode(&mut side, mv)?;
        let enc_target = side.take_value(ev);

        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = self.network.forward(&mut tape, xv)?;
        let seg = dice_ce_deep_supervision(&mut tape, &out.logits, &pyramid, &cfg.loss)?;
        let target = tape.constant(enc_target);
        let tr = tr_loss(&mut tape, out.encoding, target)?;
        let rl = rl_loss(&mut tape, &out.features, &pyramid, &cfg.loss)?;
        let total = combine(&mut tape, seg, tr, rl, &cfg.loss)?;
        let item = |v| tape.value(v).item().as_f64();
        let losses = StepLosses {
            l_seg: item(seg),
            l_tr: item(tr),
            l_rl: item(rl),
            l_total: item(total),
        };
        if !losses.l_total.is_finite() {
            return Err(Error::Numeric(format!(
                "training loss at epoch {} ({losses:?}); last checkpoint kept",
                self.epoch
            )));
        }
        let grads = tape.backward(total)?;
        self.optimizer.apply(self.network.params_mut(), &grads)?;
        Ok(losses)
    }

    /// Gradient-free TR and RL on the fixed monitoring batch.
    pub fn monitor_losses(&self) -> Result<Option<(f64, f64)>> {
        let Some((x, y)) = &self.monitor else { return Ok(None) };
        let pyramid = y.pyramid(self.network.depth() - 1)?;
        let mut tape = Tape::inference();
        let mv = tape.leaf(gt_mask_image(x, y)?, false);
        let target = self.network.encode(&mut tape, mv)?;
        let xv = tape.leaf(x.clone(), false);
        let out = self.network.forward(&mut tape, xv)?;
        let tr = tr_loss(&mut tape, out.encoding, target)?;
        let rl = rl_loss(&mut tape, &out.features, &pyramid, &self.config.loss)?;
        Ok(Some((tape.value(tr).item().as_f64(), tape.value(rl).item().as_f64())))
    }

    /// Stage 1 (all optimizer steps), then stage 2 (one controller update),
    /// logging, evaluation and checkpointing.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let start = Instant::now();
        let epoch = self.epoch;
        let iters = self.config.iterations_per_epoch;
        let (mut seg, mut tr, mut rl) = (0.0, 0.0, 0.0);
        for _ in 0..iters {
            let l = self.train_step()?;
            seg += l.l_seg;
            tr += l.l_tr;
            rl += l.l_rl;
        }
        let n = iters as f64;
        let b = total_loss(seg / n, tr / n, rl / n, &self.config.loss)?;

        let events = match self.config.mode {
            Mode::Retrain => Vec::new(),
            Mode::Psp => {
                let (tr, rl) = self.monitor_losses()?.unwrap_or((b.l_tr, b.l_rl));
                let train = &self.train;
                let patch = self.config.patch_size;
                let count = self.config.calibration_count;
                let seed = self.config.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64);
                self.controller.step(epoch, tr, rl, &mut self.network, |net| {
                    CalibrationCache::build(net, train.len(), count, seed, |i| train.center_crop(i, patch))
                })?
            }
        };
        if events.iter().any(|e| e.event == EventKind::Commit) {
            let live = self.network.params();
            self.optimizer.retain(&live);
        }

        let pc = self.network.param_count();
        let record = EpochRecord {
            epoch,
            l_seg: b.l_seg,
            l_tr: b.l_tr,
            l_rl: b.l_rl,
            l_total: b.l_total,
            params_effective: pc.effective,
            branches_active: self.network.active_branch_count(),
            event: events
                .iter()
                .map(|e| format!("{:?}", e.event))
                .collect::<Vec<_>>()
                .join("+"),
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: seg {:.4} tr {:.4} rl {:.4} total {:.4} params {} ({:.1}s)",
            record.l_seg,
            record.l_tr,
            record.l_rl,
            record.l_total,
            record.params_effective,
            record.seconds
        );
        self.records.push(record.clone());
        self.epoch += 1;

        let last = self.epoch == self.config.epochs;
        let every = self.config.eval_every;
        if every > 0 && (self.epoch.is_multiple_of(every) || last) {
            self.periodic_eval(epoch)?;
        }
        self.write_logs()?;
        let cadence = self.config.checkpoint_every;
        if !events.is_empty() || last || (cadence > 0 && self.epoch.is_multiple_of(cadence)) {
            self.save_checkpoint()?;
        }
        Ok(record)
    }

    fn periodic_eval(&mut self, epoch: usize) -> Result<()> {
        let Some(data) = &self.eval_data else { return Ok(()) };
        let r = evaluate(
            &self.network,
            data,
            self.config.eval_split,
            self.config.patch_size,
            self.config.nsd_tolerance_mm,
            self.config.eval_cases,
        )?;
        let commits = self
            .controller
            .events
            .iter()
            .filter(|e| e.event == EventKind::Commit)
            .count();
        log::info!("epoch {epoch}: eval dice {:?}", r.mean_dice);
        self.evals.push(EvalPoint {
            epoch,
            split: self.config.eval_split,
            mean_dice: r.mean_dice,
            mean_nsd: r.mean_nsd,
            params_effective: self.network.param_count().effective,
            commits,
        });
        Ok(())
    }

    /// Rewrites every log from in-memory state, so resumed runs stay consistent.
    pub fn write_logs(&self) -> Result<()> {
        let out = &self.config.output_dir;
        fs::create_dir_all(out).map_err(io_err(out))?;
        write_json(&out.join(INITIAL_ARCHITECTURE), &self.initial)?;

        let mut csv = String::from(CSV_HEADER);
        csv.push('\n');
        for r in &self.records {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        let p = out.join(EPOCHS_CSV);
        fs::write(&p, csv).map_err(io_err(&p))?;

        write_jsonl(&out.join(EVENTS_JSONL), &self.controller.events)?;
        let mut ctl = String::from("epoch,tr,rl,fd\n");
        let c = &self.controller;
        for (e, (tr, rl)) in c.tr_history.iter().zip(&c.rl_history).enumerate() {
            ctl.push_str(&format!("{e},{tr},{rl},{}\n", tr + rl));
        }
        let p = out.join(CONTROLLER_CSV);
        fs::write(&p, ctl).map_err(io_err(&p))?;
        write_jsonl(&out.join(EVALS_JSONL), &self.evals)?;
        let tl = timeline(&self.initial, &self.controller.events, Some(self.epoch))?;
        write_json(&out.join(TIMELINE_JSON), &tl)
    }

    /// Trains through the configured epoch budget and writes the final checkpoint.
    pub fn run(&mut self) -> Result<RunSummary> {
        fs::create_dir_all(&self.config.output_dir).map_err(io_err(&self.config.output_dir))?;
        self.config.save(&self.config.output_dir.join("config.json"))?;
        self.write_logs()?;
        while self.epoch < self.config.epochs {
            self.run_epoch()?;
        }
        let final_dir = self.config.output_dir.join("final");
        self.checkpoint()?.save(&final_dir)?;
        let summary = RunSummary {
            mode: self.config.mode,
            epochs: self.epoch,
            initial_params: self.initial_params,
            final_params: self.network.param_count(),
            events: self.controller.events.clone(),
            final_architecture: self.network.descriptor(),
            final_checkpoint: final_dir,
            evals: self.evals.clone(),
        };
        write_json(&self.config.output_dir.join("summary.json"), &summary)?;
        Ok(summary)
    }
}

fn load_data(config: &TrainConfig) -> Result<(Dataset, Option<Dataset>)> {
    let manifest = Manifest::load(&config.dataset)?;
    let train = Dataset::load(&manifest, Split::Train)?;
    let eval = if config.eval_every > 0 {
        Some(Dataset::load(&manifest, config.eval_split)?)
    } else {
        None
    };
    Ok((train, eval))
}

/// Centre crops of a fixed sample of training cases, when the controller
/// runs on the monitoring signal.
fn monitor_batch<E: Element>(config: &TrainConfig, train: &Dataset) -> Result<Option<(Tensor<E>, LabelBatch)>> {
    if config.mode != Mode::Psp || config.controller_signal != ControllerSignal::Monitor {
        return Ok(None);
    }
    let ids = sample_ids(train.len(), config.monitor_count, config.seed ^ 0x6d6f_6e69)?;
    let p = config.patch_size;
    let mut xs = Vec::with_capacity(ids.len());
    let mut labels = Vec::new();
    for &i in &ids {
        let dims = train.cases[i].image.dims;
        let origin = std::array::from_fn(|k| dims[k].saturating_sub(p[k]) / 2);
        let (x, y) = train.crop::<E>(i, origin, p)?;
        xs.push(x);
        labels.extend(y);
    }
    let y = LabelBatch::new([ids.len(), p[0], p[1], p[2]], labels)?;
    Ok(Some((Tensor::stack_batch(&xs)?, y)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_vec_pretty(value).map_err(json_err(path))?;
    fs::write(path, json).map_err(io_err(path))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it).map_err(json_err(path))?;
        buf.write_all(b"\n").map_err(io_err(path))?;
    }
    fs::write(path, buf).map_err(io_err(path))
}

/// Trains (or resumes) at the configured precision.
pub fn run(config: &TrainConfig, resume: Option<&Path>) -> Result<RunSummary> {
    fn go<E: Element>(config: &TrainConfig, resume: Option<&Path>) -> Result<RunSummary> {
        let mut t = match resume {
            Some(dir) => Trainer::<E>::resume(config.clone(), dir)?,
            None => Trainer::<E>::new(config.clone())?,
        };
        t.run()
    }
    match config.precision {
        Precision::F32 => go::<f32>(config, resume),
        Precision::F64 => go::<f64>(config, resume),
    }
}
