//! ℓ1 training loop with Adam and step-halving learning rate.

use std::io::Write;
use std::path::Path;
use std::sync::mpsc::sync_channel;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::{derive_seed, make_batch, PatchBatch, SigmaSpec};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::ImageBuffer;
use crate::optim::{AdamConfig, AdamState};

/// Stream id for per-iteration batch seeds.
const BATCH_STREAM: u64 = 1;
const QUEUE_DEPTH: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_halving_interval: u64,
    pub batch: usize,
    pub patch: usize,
    pub sigma: SigmaSpec,
    pub max_iters: u64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            lr_halving_interval: 100_000,
            batch: 32,
            patch: 80,
            sigma: SigmaSpec::Fixed(25.0),
            max_iters: 10_000,
            seed: 0,
            adam: AdamConfig::default(),
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr must be positive");
        }
        if self.lr_halving_interval == 0 {
            return bad("lr_halving_interval must be positive");
        }
        if self.batch == 0 || self.patch == 0 {
            return bad("batch and patch must be positive");
        }
        if self.max_iters == 0 || self.checkpoint_every == 0 {
            return bad("max_iters and checkpoint_every must be positive");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam betas must be in [0, 1) and eps positive");
        }
        self.sigma.validate()
    }

    pub fn lr_at(&self, iter: u64) -> f64 {
        lr_schedule(self.lr0, self.lr_halving_interval, iter)
    }

    /// Seed of the batch consumed at iteration `iter`.
    pub fn batch_seed(&self, iter: u64) -> u64 {
        derive_seed(self.seed, BATCH_STREAM, iter)
    }

    pub fn batch_at(&self, corpus: &[ImageBuffer], iter: u64) -> Result<PatchBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.batch_seed(iter));
        make_batch(corpus, self.sigma, self.batch, self.patch, &mut rng)
    }
}

/// `lr0 · 2^(−floor(iter / interval))`.
pub fn lr_schedule(lr0: f64, interval: u64, iter: u64) -> f64 {
    let halvings = (iter / interval).min(i32::MAX as u64) as i32;
    lr0 * 0.5f64.powi(halvings)
}

/// Loss before the update at iteration `iter`, and the rate used for it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iter: u64,
    pub loss: f64,
    pub lr: f64,
}

pub enum TrainEvent<'a> {
    Step(LossRecord),
    /// Emitted every `checkpoint_every` iterations and after the last one.
    Checkpoint(&'a Checkpoint),
}

/// Trains `state` from `state.iteration` up to `cfg.max_iters`.
///
/// Batches are produced on a separate thread. Each batch depends only on
/// `cfg.seed` and its iteration index, so a resumed run replays the same
/// sequence as an unbroken one.
pub fn train<F>(
    state: &mut Checkpoint,
    corpus: &[ImageBuffer],
    cfg: &TrainConfig,
    mut on_event: F,
) -> Result<()>
where
    F: FnMut(TrainEvent<'_>) -> Result<()>,
{
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let in_ch = state.net.config().in_channels;
    if let Some(img) = corpus.iter().find(|img| img.channels() != in_ch) {
        return Err(Error::ChannelMismatch {
            expected: in_ch,
            actual: img.channels(),
        });
    }
    let start = state.iteration;
    if start >= cfg.max_iters {
        return Ok(());
    }
    // Fail early on unusable corpora rather than inside the producer.
    cfg.batch_at(corpus, start)?;

    let mut adam = state
        .optimizer
        .take()
        .unwrap_or_else(|| AdamState::new(state.net.params()));
    let result = std::thread::scope(|scope| {
        let (tx, rx) = sync_channel::<Result<PatchBatch>>(QUEUE_DEPTH);
        scope.spawn(move || {
            for iter in start..cfg.max_iters {
                if tx.send(cfg.batch_at(corpus, iter)).is_err() {
                    break;
                }
            }
        });

        let mut graph = Graph::new();
        for iter in start..cfg.max_iters {
            let batch = rx.recv().expect("producer outlives the loop")?;
            graph.clear();
            let x = graph.constant(batch.noisy);
            let target = graph.constant(batch.clean);
            let out = state.net.forward(&mut graph, x, true)?;
            let loss_var = graph.l1_loss(out.output, target)?;
            let loss = graph.value(loss_var).data()[0] as f64;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: iter,
                    batch_seed: cfg.batch_seed(iter),
                    loss,
                });
            }
            graph.backward(loss_var)?;
            let lr = cfg.lr_at(iter);
            let grads: Vec<_> = out.params.iter().map(|&p| graph.grad(p)).collect();
            adam.step(state.net.params_mut(), &grads, lr, &cfg.adam)?;
            on_event(TrainEvent::Step(LossRecord { iter, loss, lr }))?;

            let done = iter + 1;
            if done % cfg.checkpoint_every == 0 || done == cfg.max_iters {
                state.iteration = done;
                state.optimizer = Some(adam.clone());
                on_event(TrainEvent::Checkpoint(state))?;
            }
        }
        Ok(())
    });
    state.optimizer = Some(adam);
    result
}

pub const LOSS_LOG_HEADER: &str = "iter,loss,lr";

/// One CSV line; floats use the shortest exact representation.
pub fn format_record(r: &LossRecord) -> String {
    format!("{},{:?},{:?}", r.iter, r.loss, r.lr)
}

pub fn parse_loss_log(text: &str) -> Result<Vec<LossRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_LOG_HEADER) {
        return Err(Error::InvalidArgument(format!(
            "loss log must start with `{LOSS_LOG_HEADER}`"
        )));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let bad = || Error::InvalidArgument(format!("bad loss log line `{l}`"));
            let mut it = l.split(',');
            let mut next = || it.next().ok_or_else(bad);
            let iter = next()?.parse().map_err(|_| bad())?;
            let loss = next()?.parse().map_err(|_| bad())?;
            let lr = next()?.parse().map_err(|_| bad())?;
            Ok(LossRecord { iter, loss, lr })
        })
        .collect()
}

/// Append-only `iter,loss,lr` writer.
pub struct LossLog {
    file: std::io::BufWriter<std::fs::File>,
    path: std::path::PathBuf,
}

impl LossLog {
    /// Creates the file with a header, or appends when `append` and it exists.
    pub fn open(path: impl AsRef<Path>, append: bool) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let exists = path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut log = Self {
            file: std::io::BufWriter::new(file),
            path,
        };
        if !(append && exists) {
            log.write_line(LOSS_LOG_HEADER)?;
        }
        Ok(log)
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn push(&mut self, r: &LossRecord) -> Result<()> {
        self.write_line(&format_record(r))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}
