//! Mini-batch training: Adam, global-norm clipping, optional KL annealing
//! and early stopping on the validation bound.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::nvdm::{self, Noise, NvdmModel, ParamGrads};
use crate::param::Param;
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global L2 norm cap; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    /// Batches over which the KL weight ramps from 0 to 1; 0 keeps it at 1.
    pub kl_anneal_batches: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub threads: usize,
    pub train_samples: usize,
    pub valid_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.002,
            batch_size: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            kl_anneal_batches: 0,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            threads: 1,
            train_samples: 1,
            valid_samples: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be finite and >= 0");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.threads == 0 {
            return fail("batch_size, max_epochs, patience and threads must be >= 1");
        }
        if self.train_samples == 0 || self.valid_samples == 0 {
            return fail("sample counts must be >= 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || !(self.clip_norm > 0.0) {
            return fail("adam_eps and clip_norm must be > 0");
        }
        Ok(())
    }
}

/// `min(1, step / kl_anneal_batches)`, or 1 when annealing is off.
pub fn kl_weight(step: usize, config: &TrainConfig) -> f64 {
    if config.kl_anneal_batches == 0 {
        1.0
    } else {
        (step as f64 / config.kl_anneal_batches as f64).min(1.0)
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales all gradients by `clip_norm / norm` when the global norm exceeds
/// `clip_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Vec<f64>], clip_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip_norm {
        let s = clip_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Adam with one pair of moment slots per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[&Param], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn slot_shapes(&self) -> Vec<usize> {
        self.m.iter().map(Vec::len).collect()
    }

    /// Descends along `grads` (gradients of a loss).
    pub fn update(&mut self, params: &mut [&mut Param], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("adam", &[params.len(), grads.len()], &[self.m.len()]));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            if g.len() != p.len() {
                return Err(Error::shape("adam", &[g.len()], &[p.len()]));
            }
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_bound: f64,
    pub valid_bound: f64,
    pub kl_gaussian: f64,
    pub kl_piecewise: f64,
    pub wallclock_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// `epoch train_bound valid_bound kl_g kl_p wallclock_s`, one line per epoch.
    pub fn to_tsv(&self) -> String {
        self.render(true)
    }

    /// Same as [`TrainLog::to_tsv`] without the wallclock column.
    pub fn to_tsv_deterministic(&self) -> String {
        self.render(false)
    }

    fn render(&self, wallclock: bool) -> String {
        let mut s = String::new();
        for r in &self.epochs {
            let _ = write!(
                s,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                r.epoch, r.train_bound, r.valid_bound, r.kl_gaussian, r.kl_piecewise
            );
            if wallclock {
                let _ = write!(s, "\t{:.3}", r.wallclock_s);
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation bound.
    pub model: NvdmModel,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_valid_bound: f64,
}

/// Per-document noise stream for batch `step`, independent of sharding.
fn doc_rng(seed: u64, step: u64, position: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(0x1_0000_0000).wrapping_add(position).wrapping_add(1));
    rng
}

#[derive(Clone, Copy, Debug, Default)]
struct BatchStats {
    bound: f64,
    kl_g: f64,
    kl_p: f64,
}

/// Summed bound gradient and statistics over a slice of documents, on one tape.
fn shard_pass(
    model: &NvdmModel,
    docs: &[&Document],
    seed: u64,
    step: u64,
    offset: usize,
    kl_w: f64,
    samples: usize,
) -> Result<(BatchStats, ParamGrads)> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, true);
    let mut stats = BatchStats::default();
    let mut bounds: Vec<Var> = Vec::with_capacity(docs.len());
    for (i, doc) in docs.iter().enumerate() {
        let mut rng = doc_rng(seed, step, (offset + i) as u64);
        let noise = Noise::draw_many(&model.config, samples, &mut rng);
        let x = tape.constant(model.input_tensor(doc)?);
        let b = nvdm::doc_bound(&mut tape, &vars, &model.config, x, doc, kl_w, &noise)?;
        stats.bound += tape.scalar(b.bound);
        stats.kl_g += b.kl_gaussian.map_or(0.0, |v| tape.scalar(v));
        stats.kl_p += b.kl_piecewise.map_or(0.0, |v| tape.scalar(v));
        bounds.push(b.bound);
    }
    let total = tape.add_n(&bounds)?;
    let mut grads = tape.backward(total)?;
    Ok((stats, nvdm::collect_grads(&vars, &mut grads)))
}

/// Documents per reduction block. Blocks are summed in order, so the result
/// does not depend on the thread count.
const BLOCK: usize = 10;

fn batch_pass(
    model: &NvdmModel,
    docs: &[&Document],
    cfg: &TrainConfig,
    step: u64,
    kl_w: f64,
) -> Result<(BatchStats, ParamGrads)> {
    let blocks: Vec<(usize, &[&Document])> = docs.chunks(BLOCK).enumerate().map(|(k, c)| (k * BLOCK, c)).collect();
    let run = |group: &[(usize, &[&Document])]| -> Vec<Result<(BatchStats, ParamGrads)>> {
        group
            .iter()
            .map(|&(offset, chunk)| shard_pass(model, chunk, cfg.seed, step, offset, kl_w, cfg.train_samples))
            .collect()
    };
    let shards = cfg.threads.min(blocks.len()).max(1);
    let results: Vec<Result<(BatchStats, ParamGrads)>> = if shards == 1 {
        run(&blocks)
    } else {
        let per = blocks.len().div_ceil(shards);
        std::thread::scope(|s| {
            let handles: Vec<_> = blocks.chunks(per).map(|group| s.spawn(move || run(group))).collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("training shard panicked"))
                .collect()
        })
    };
    let mut stats = BatchStats::default();
    let mut acc: Option<ParamGrads> = None;
    for r in results {
        let (s, g) = r?;
        stats.bound += s.bound;
        stats.kl_g += s.kl_g;
        stats.kl_p += s.kl_p;
        match &mut acc {
            None => acc = Some(g),
            Some(a) => a.iter_mut().flatten().zip(g.iter().flatten()).for_each(|(x, y)| *x += y),
        }
    }
    Ok((stats, acc.expect("at least one block")))
}

fn norm_snapshot(model: &NvdmModel) -> String {
    model
        .params()
        .iter()
        .map(|p| format!("{}={:.4e}", p.name, p.norm()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Mean per-document bound on `docs` with fixed noise (drawn from `seed`).
pub fn validation_bound(model: &NvdmModel, docs: &[Document], samples: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for (i, doc) in docs.iter().enumerate() {
        let mut rng = doc_rng(seed ^ 0x5eed_0f_da7a, u64::MAX, i as u64);
        let noise = Noise::draw_many(&model.config, samples, &mut rng);
        total += model.elbo_with_noise(doc, 1.0, &noise)?.bound;
    }
    Ok(total / docs.len() as f64)
}

/// Runs training and returns the best-validation parameters.
pub fn train(model: NvdmModel, train_docs: &[Document], valid_docs: &[Document], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, train_docs, valid_docs, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    mut model: NvdmModel,
    train_docs: &[Document],
    valid_docs: &[Document],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_docs.is_empty() || valid_docs.is_empty() {
        return Err(Error::Contract("training and validation sets must be non-empty".into()));
    }
    let start = Instant::now();
    let mut adam = Adam::new(&model.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_docs.len()).collect();
    let mut log = TrainLog::default();
    let mut best = (f64::NEG_INFINITY, 0usize, model.clone());
    let mut stale = 0usize;
    let mut step: u64 = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = BatchStats::default();
        for batch in order.chunks(cfg.batch_size) {
            let docs: Vec<&Document> = batch.iter().map(|&i| &train_docs[i]).collect();
            let kl_w = kl_weight(step as usize, cfg);
            let (stats, mut grads) = batch_pass(&model, &docs, cfg, step, kl_w)?;
            let scale = -1.0 / docs.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
            let finite = stats.bound.is_finite() && grads.iter().flatten().all(|g| g.is_finite());
            if !finite {
                return Err(Error::NonFinite {
                    batch: step as usize,
                    norms: norm_snapshot(&model),
                });
            }
            clip_gradients(&mut grads, cfg.clip_norm);
            adam.update(&mut model.params_mut(), &grads, cfg.learning_rate)?;
            sums.bound += stats.bound;
            sums.kl_g += stats.kl_g;
            sums.kl_p += stats.kl_p;
            step += 1;
        }
        let n = train_docs.len() as f64;
        let valid = validation_bound(&model, valid_docs, cfg.valid_samples, cfg.seed)?;
        if !valid.is_finite() {
            return Err(Error::NonFinite {
                batch: step as usize,
                norms: norm_snapshot(&model),
            });
        }
        let record = EpochRecord {
            epoch,
            train_bound: sums.bound / n,
            valid_bound: valid,
            kl_gaussian: sums.kl_g / n,
            kl_piecewise: sums.kl_p / n,
            wallclock_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.epochs.push(record);
        if valid > best.0 {
            best = (valid, epoch, model.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best.2,
        log,
        best_epoch: best.1,
        best_valid_bound: best.0,
    })
}

/// Mean batch bound for one fixed batch, without updating anything.
pub fn batch_bound(model: &NvdmModel, docs: &[&Document], cfg: &TrainConfig, step: u64) -> Result<f64> {
    let (stats, _) = batch_pass(model, docs, cfg, step, kl_weight(step as usize, cfg))?;
    Ok(stats.bound / docs.len() as f64)
}

/// One Adam step on a fixed batch; returns the batch bound before the step.
pub fn step_on_batch(
    model: &mut NvdmModel,
    adam: &mut Adam,
    docs: &[&Document],
    cfg: &TrainConfig,
    step: u64,
) -> Result<f64> {
    let (stats, mut grads) = batch_pass(model, docs, cfg, step, kl_weight(step as usize, cfg))?;
    let scale = -1.0 / docs.len() as f64;
    grads.iter_mut().flatten().for_each(|g| *g *= scale);
    clip_gradients(&mut grads, cfg.clip_norm);
    adam.update(&mut model.params_mut(), &grads, cfg.learning_rate)?;
    Ok(stats.bound / docs.len() as f64)
}
