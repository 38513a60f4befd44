use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{
    noam_lr, scst_step, xe_step, AdamState, RunConfig, ScstContext, ScstExample, StepReport, TrainState, XeExample,
};
use crate::assignment::BagEmbedder;
use crate::autodiff::Real;
use crate::data::{CaptionedSample, Dataset, FeatureGrid, Vocabulary};
use crate::decoding::{beam_search, BeamConfig, Hypothesis};
use crate::error::{Error, Result};
use crate::metrics::{cider_d, reward, DocFreq};
use crate::model::{CaptionModel, Checkpoint};

const SAMPLER_SALT: u64 = 0x6a09_e667_f3bc_c908;

/// One JSON line of the training log.
pub type LogRecord = StepReport;

/// Batches drawn from seeded per-epoch permutations; the batch for a step
/// depends only on the seed and the step, so resumed runs see the same data.
#[derive(Clone, Debug)]
pub struct Sampler {
    len: usize,
    batch: usize,
    seed: u64,
}

impl Sampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<Self> {
        if len == 0 || batch == 0 {
            return Err(Error::Config("sampler needs items and a positive batch size".into()));
        }
        Ok(Sampler { len, batch, seed })
    }

    fn epoch(&self, e: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ SAMPLER_SALT);
        rng.set_stream(e);
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn batch(&self, step: u64) -> Vec<usize> {
        let start = step as usize * self.batch;
        let mut out = Vec::with_capacity(self.batch);
        let mut cached: Option<(usize, Vec<usize>)> = None;
        for pos in start..start + self.batch {
            let e = pos / self.len;
            if cached.as_ref().map(|c| c.0) != Some(e) {
                cached = Some((e, self.epoch(e as u64)));
            }
            out.push(cached.as_ref().unwrap().1[pos % self.len]);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Validation {
    pub step: u64,
    pub online_cider: f64,
    pub target_cider: f64,
}

pub struct TrainOutcome {
    pub state: TrainState<f32>,
    pub last: Checkpoint,
    /// Checkpoint with the best target validation CIDEr-D seen in this run.
    pub best: Option<Checkpoint>,
    pub validations: Vec<Validation>,
}

/// Top-1 beam hypothesis per grid.
pub fn caption_images<T: Real>(
    model: &CaptionModel<T>,
    grids: &[&FeatureGrid],
    beam: usize,
) -> Result<Vec<Hypothesis>> {
    let cfg = BeamConfig::new(beam, model.config.max_length);
    grids
        .iter()
        .map(|g| {
            let mut b = beam_search(&model.incremental(g)?, &cfg)?;
            Ok(b.swap_remove(0))
        })
        .collect()
}

/// Corpus CIDEr-D of top-1 captions, with document frequencies from the
/// references of `samples`.
pub fn validate_cider<T: Real>(
    model: &CaptionModel<T>,
    samples: &[CaptionedSample],
    vocab: &Vocabulary,
    beam: usize,
) -> Result<f64> {
    let grids: Vec<&FeatureGrid> = samples.iter().map(|s| &s.features).collect();
    let hyps = caption_images(model, &grids, beam)?;
    let cands: Vec<String> = hyps.iter().map(|h| vocab.decode(h.body())).collect();
    let refs: Vec<Vec<String>> = samples.iter().map(|s| s.reference_text.clone()).collect();
    let df = DocFreq::build(&refs)?;
    Ok(cider_d(&cands, &refs, &df)?.value)
}

/// Mean reward over every hypothesis of every beam.
pub fn mean_beam_reward<T: Real>(
    model: &CaptionModel<T>,
    samples: &[CaptionedSample],
    vocab: &Vocabulary,
    df: &DocFreq,
    beam: usize,
) -> Result<f64> {
    let cfg = BeamConfig::new(beam, model.config.max_length);
    let mut total = 0.0;
    for s in samples {
        let b = beam_search(&model.incremental(&s.features)?, &cfg)?;
        total += b
            .iter()
            .map(|h| reward(&vocab.decode(h.body()), &s.reference_text, df))
            .sum::<f64>()
            / b.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Reward document frequencies, built from the training references.
pub fn scst_df(data: &Dataset) -> Result<DocFreq> {
    let refs: Vec<Vec<String>> = data.train.iter().map(|s| s.reference_text.clone()).collect();
    DocFreq::build(&refs)
}

fn write_log(log: &mut dyn Write, rec: &LogRecord) -> Result<()> {
    let line = serde_json::to_string(rec)?;
    writeln!(log, "{line}").map_err(|e| Error::io("<training log>", e))
}

fn stamp(state: &TrainState<f32>, cfg: &RunConfig, vocab: &Vocabulary, stage: &str) -> Checkpoint {
    let mut ck = state.to_checkpoint();
    ck.vocab = Some(vocab.clone());
    ck.settings.insert("run_config".into(), cfg.to_text());
    ck.settings.insert("stage".into(), stage.into());
    ck
}

fn validate_both(state: &TrainState<f32>, cfg: &RunConfig, data: &Dataset, vocab: &Vocabulary) -> Result<Validation> {
    let n = cfg.val_images.min(data.val.len());
    let val = &data.val[..n];
    Ok(Validation {
        step: state.step,
        online_cider: validate_cider(&state.online, val, vocab, cfg.eval_beam)?,
        target_cider: validate_cider(&state.target, val, vocab, cfg.eval_beam)?,
    })
}

fn check_resume(ck: &Checkpoint, cfg: &RunConfig, vocab: &Vocabulary) -> Result<()> {
    if ck.config != cfg.model(vocab.len()) {
        return Err(Error::Config(
            "checkpoint architecture disagrees with the run config".into(),
        ));
    }
    if ck.seed != cfg.seed {
        return Err(Error::Config(format!(
            "checkpoint seed {} disagrees with config seed {}",
            ck.seed, cfg.seed
        )));
    }
    Ok(())
}

struct Tracker {
    validations: Vec<Validation>,
    best: Option<(f64, Checkpoint)>,
}

impl Tracker {
    fn record(&mut self, v: Validation, ck: impl FnOnce() -> Checkpoint) {
        if self.best.as_ref().is_none_or(|(b, _)| v.target_cider > *b) {
            self.best = Some((v.target_cider, ck()));
        }
        self.validations.push(v);
    }
}

/// XE stage up to `cfg.xe_steps` total steps, optionally resuming.
pub fn train_xe(
    cfg: &RunConfig,
    data: &Dataset,
    vocab: &Vocabulary,
    resume: Option<&Checkpoint>,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut state = match resume {
        Some(ck) => {
            check_resume(ck, cfg, vocab)?;
            TrainState::from_checkpoint(ck)?
        }
        None => TrainState::new(cfg.model(vocab.len()), cfg.seed, cfg.ema_momentum, cfg.lambda_kd)?,
    };
    state.ema_enabled = cfg.ema_enabled;

    let items: Vec<(usize, usize)> = data
        .train
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.references.len()).map(move |j| (i, j)))
        .collect();
    let sampler = Sampler::new(items.len(), cfg.batch_size, cfg.seed)?;
    let mut tracker = Tracker {
        validations: Vec::new(),
        best: None,
    };
    while state.step < cfg.xe_steps {
        let batch: Vec<XeExample> = sampler
            .batch(state.step)
            .into_iter()
            .map(|k| {
                let (i, j) = items[k];
                XeExample {
                    grid: &data.train[i].features,
                    caption: &data.train[i].references[j],
                }
            })
            .collect();
        let lr = noam_lr(state.step + 1, cfg.model_dim, cfg.warmup) * cfg.lr_scale;
        let report = xe_step(&mut state, &batch, lr)?;
        write_log(log, &report)?;
        let due = cfg.val_every > 0 && state.step % cfg.val_every == 0;
        if (due || state.step == cfg.xe_steps) && !data.val.is_empty() {
            let v = validate_both(&state, cfg, data, vocab)?;
            tracker.record(v, || stamp(&state, cfg, vocab, "xe"));
        }
    }
    let last = stamp(&state, cfg, vocab, "xe");
    Ok(TrainOutcome {
        state,
        last,
        best: tracker.best.map(|b| b.1),
        validations: tracker.validations,
    })
}

/// SCST stage for `cfg.scst_steps` steps after the checkpoint's XE steps.
/// A checkpoint written by this stage resumes where it stopped.
pub fn train_scst(
    cfg: &RunConfig,
    data: &Dataset,
    vocab: &Vocabulary,
    from: &Checkpoint,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_resume(from, cfg, vocab)?;
    let mut state = TrainState::<f32>::from_checkpoint(from)?;
    let start = if from.settings.get("stage").map(String::as_str) == Some("scst") {
        from.settings
            .get("scst_start")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data("SCST checkpoint lacks scst_start".into()))?
    } else {
        state.adam = AdamState::new(&state.online.params);
        state.step
    };
    state.momentum = cfg.ema_momentum;
    state.ema_enabled = cfg.ema_enabled;
    state.lambda_kd = cfg.scst_lambda_kd;
    let scst = cfg.scst();
    let df = scst_df(data)?;
    let corpus: Vec<_> = data.train.iter().flat_map(|s| s.references.iter().cloned()).collect();
    let embedder = BagEmbedder::from_corpus(vocab.len(), &corpus);
    let ctx = ScstContext {
        vocab,
        df: &df,
        embedder: &embedder,
    };
    let sampler = Sampler::new(data.train.len(), cfg.scst_batch_size, cfg.seed.wrapping_add(1))?;
    let stamp_scst = |state: &TrainState<f32>| {
        let mut ck = stamp(state, cfg, vocab, "scst");
        ck.settings.insert("scst_start".into(), start.to_string());
        ck
    };
    let mut tracker = Tracker {
        validations: Vec::new(),
        best: None,
    };
    while state.step - start < cfg.scst_steps {
        let batch: Vec<ScstExample> = sampler
            .batch(state.step - start)
            .into_iter()
            .map(|i| ScstExample {
                grid: &data.train[i].features,
                refs: &data.train[i].reference_text,
            })
            .collect();
        let report = scst_step(&mut state, &batch, &scst, &ctx)?;
        write_log(log, &report)?;
        let done = state.step - start;
        let due = cfg.val_every > 0 && done % cfg.val_every == 0;
        if (due || done == cfg.scst_steps) && !data.val.is_empty() {
            let v = validate_both(&state, cfg, data, vocab)?;
            tracker.record(v, || stamp_scst(&state));
        }
    }
    let last = stamp_scst(&state);
    Ok(TrainOutcome {
        state,
        last,
        best: tracker.best.map(|b| b.1),
        validations: tracker.validations,
    })
}
