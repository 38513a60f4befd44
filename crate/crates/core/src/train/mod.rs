//! Mean-teacher training: XE with logit distillation and EMA targets, then
//! SCST fine-tuning with beam-pairing distillation.

mod config;
mod optim;
mod run;

pub use config::{Pairing, RunConfig, ScstConfig};
pub use optim::{adam_update, ema_update, noam_lr, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use run::{
    caption_images, mean_beam_reward, scst_df, train_scst, train_xe, validate_cider, LogRecord, Sampler, TrainOutcome,
    Validation,
};

use std::collections::BTreeMap;

use serde::Serialize;

use crate::assignment::{hungarian, pairing_cost, BagEmbedder, CaptionEmbedder};
use crate::autodiff::{DropoutStream, Graph, Mode, Real, Tensor, Var};
use crate::data::{FeatureGrid, TokenSequence, Vocabulary, BOS};
use crate::decoding::{beam_search, Beam, BeamConfig, Hypothesis};
use crate::error::{Error, Result};
use crate::metrics::{reward, DocFreq};
use crate::model::{Bound, CaptionModel, Checkpoint, ModelConfig, ModelParams};

/// Online and target networks with optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub online: CaptionModel<T>,
    pub target: CaptionModel<T>,
    pub adam: AdamState<T>,
    pub step: u64,
    pub seed: u64,
    pub momentum: f64,
    pub lambda_kd: f64,
    pub ema_enabled: bool,
}

impl<T: Real> TrainState<T> {
    /// Fresh state; the target starts as an exact copy of the online model.
    pub fn new(config: ModelConfig, seed: u64, momentum: f64, lambda_kd: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("EMA momentum {momentum} not in [0, 1]")));
        }
        let online = CaptionModel::new(config, seed)?;
        let target = online.clone();
        let adam = AdamState::new(&online.params);
        Ok(TrainState {
            online,
            target,
            adam,
            step: 0,
            seed,
            momentum,
            lambda_kd,
            ema_enabled: true,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.online.config.clone(), self.step, self.seed);
        ck.put_params("online", &self.online.params);
        ck.put_params("target", &self.target.params);
        let shapes = &self.online.params;
        ck.put_params("adam.m", &self.adam.moments_as_params(&self.adam.m, shapes));
        ck.put_params("adam.v", &self.adam.moments_as_params(&self.adam.v, shapes));
        ck.settings.insert("adam_t".into(), self.adam.t.to_string());
        ck.settings.insert("momentum".into(), format!("{:?}", self.momentum));
        ck.settings.insert("lambda_kd".into(), format!("{:?}", self.lambda_kd));
        ck.settings.insert("ema_enabled".into(), self.ema_enabled.to_string());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let online = CaptionModel::from_params(ck.config.clone(), ck.params("online")?)?;
        let target = CaptionModel::from_params(ck.config.clone(), ck.params("target")?)?;
        let setting = |key: &str| -> Result<&str> {
            ck.settings
                .get(key)
                .map(String::as_str)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks setting {key}")))
        };
        let parse_f = |key: &str| -> Result<f64> {
            setting(key)?
                .parse()
                .map_err(|_| Error::Data(format!("bad checkpoint setting {key}")))
        };
        let adam = if ck.has_params("adam.m") {
            let flat = |p: ModelParams<T>| -> BTreeMap<String, Vec<T>> {
                p.iter().map(|(k, t)| (k.clone(), t.data().to_vec())).collect()
            };
            AdamState {
                m: flat(ck.params("adam.m")?),
                v: flat(ck.params("adam.v")?),
                t: setting("adam_t")?
                    .parse()
                    .map_err(|_| Error::Data("bad checkpoint setting adam_t".into()))?,
            }
        } else {
            AdamState::new(&online.params)
        };
        Ok(TrainState {
            online,
            target,
            adam,
            step: ck.step,
            seed: ck.seed,
            momentum: parse_f("momentum")?,
            lambda_kd: parse_f("lambda_kd")?,
            ema_enabled: setting("ema_enabled")? == "true",
        })
    }
}

/// One teacher-forced training pair.
#[derive(Clone, Copy, Debug)]
pub struct XeExample<'a> {
    pub grid: &'a FeatureGrid,
    pub caption: &'a TokenSequence,
}

/// Per-step numbers written to the training log.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub xe_loss: Option<f64>,
    pub kd_loss: Option<f64>,
    pub reward_mean: Option<f64>,
    pub baseline: Option<f64>,
}

pub struct XeLoss {
    pub loss: Var,
    pub xe: f64,
    pub kd: f64,
}

/// Dropout stream of the online network at `step`; the target uses the next one.
pub fn online_stream(step: u64) -> u64 {
    2 * step
}

/// `mean_b [XE(online) + λ_KD · MSE(target, online)]` over the batch. The
/// target logits enter the MSE as detached values, so no gradient reaches
/// the target parameters whatever way they were bound.
pub fn xe_loss<T: Real>(
    g: &mut Graph<T>,
    online: (&CaptionModel<T>, &Bound),
    target: Option<(&CaptionModel<T>, &Bound)>,
    batch: &[XeExample<'_>],
    lambda_kd: f64,
    step: u64,
) -> Result<XeLoss> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let (om, ob) = online;
    g.set_stream(online_stream(step));
    let mut online_logits = Vec::with_capacity(batch.len());
    let mut xe_terms = Vec::with_capacity(batch.len());
    for ex in batch {
        let enc = om.encode_graph(g, ob, ex.grid)?;
        let logits = om.decode_graph(g, ob, &enc, ex.caption.inputs())?;
        xe_terms.push(g.cross_entropy(logits, ex.caption.targets(), ex.caption.target_mask())?);
        online_logits.push(logits);
    }
    let mut kd_terms = Vec::new();
    if let (Some((tm, tb)), true) = (target, lambda_kd != 0.0) {
        g.set_stream(online_stream(step) + 1);
        for (ex, &lo) in batch.iter().zip(&online_logits) {
            let enc = tm.encode_graph(g, tb, ex.grid)?;
            let lt = tm.decode_graph(g, tb, &enc, ex.caption.inputs())?;
            kd_terms.push(g.masked_mse(lt, lo, ex.caption.target_mask())?);
        }
    }
    let mut total: Option<Var> = None;
    for (i, &xe) in xe_terms.iter().enumerate() {
        let term = match kd_terms.get(i) {
            Some(&kd) => {
                let w = g.scale(kd, lambda_kd);
                g.add(xe, w)?
            }
            None => xe,
        };
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let b = batch.len() as f64;
    let loss = g.scale(total.expect("batch is non-empty"), 1.0 / b);
    let mean = |g: &Graph<T>, v: &[Var]| v.iter().map(|&x| g.scalar(x).f64()).sum::<f64>() / b;
    Ok(XeLoss {
        loss,
        xe: mean(g, &xe_terms),
        kd: mean(g, &kd_terms),
    })
}

/// Gradients of every bound parameter; parameters the loss never touched
/// are omitted.
pub fn collect_grads<T: Real>(g: &Graph<T>, bound: &Bound) -> BTreeMap<String, Vec<T>> {
    bound
        .iter()
        .filter_map(|(name, &v)| g.grad(v).map(|gr| (name.clone(), gr.to_vec())))
        .collect()
}

fn finite_or_abort(step: u64, what: &str, values: &[(&str, f64)]) -> Result<()> {
    if values.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    let detail: Vec<String> = values.iter().map(|(k, v)| format!("{k}={v}")).collect();
    Err(Error::Numeric(format!(
        "non-finite {what} at step {step}: {}",
        detail.join(", ")
    )))
}

/// One XE step: update the online model by Adam, then the target by EMA.
pub fn xe_step<T: Real>(state: &mut TrainState<T>, batch: &[XeExample<'_>], lr: f64) -> Result<StepReport> {
    let mut g = Graph::new(Mode::Train(DropoutStream {
        seed: state.seed,
        stream: 0,
    }));
    let ob = state.online.bind(&mut g, true);
    let tb = (state.lambda_kd != 0.0).then(|| state.target.bind(&mut g, false));
    let parts = xe_loss(
        &mut g,
        (&state.online, &ob),
        tb.as_ref().map(|b| (&state.target, b)),
        batch,
        state.lambda_kd,
        state.step,
    )?;
    let loss = g.scalar(parts.loss).f64();
    finite_or_abort(
        state.step,
        "loss",
        &[("loss", loss), ("xe", parts.xe), ("kd", parts.kd)],
    )?;
    g.backward(parts.loss)?;
    let grads = collect_grads(&g, &ob);
    drop(ob);
    drop(g);
    adam_update(&mut state.online.params, &grads, &mut state.adam, lr)?;
    if state.ema_enabled {
        ema_update(&mut state.target.params, &state.online.params, state.momentum)?;
    }
    state.step += 1;
    Ok(StepReport {
        step: state.step,
        lr,
        xe_loss: Some(parts.xe),
        kd_loss: Some(parts.kd),
        reward_mean: None,
        baseline: None,
    })
}

/// Plain single-network XE training step, without any target network.
pub fn single_xe_step<T: Real>(
    model: &mut CaptionModel<T>,
    adam: &mut AdamState<T>,
    batch: &[XeExample<'_>],
    seed: u64,
    step: u64,
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::new(Mode::Train(DropoutStream { seed, stream: 0 }));
    let b = model.bind(&mut g, true);
    g.set_stream(online_stream(step));
    let mut total: Option<Var> = None;
    for ex in batch {
        let enc = model.encode_graph(&mut g, &b, ex.grid)?;
        let logits = model.decode_graph(&mut g, &b, &enc, ex.caption.inputs())?;
        let ce = g.cross_entropy(logits, ex.caption.targets(), ex.caption.target_mask())?;
        total = Some(match total {
            Some(t) => g.add(t, ce)?,
            None => ce,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("empty training batch"))?;
    let loss = g.scale(total, 1.0 / batch.len() as f64);
    g.backward(loss)?;
    let grads = collect_grads(&g, &b);
    let value = g.scalar(loss).f64();
    drop(b);
    drop(g);
    adam_update(&mut model.params, &grads, adam, lr)?;
    Ok(value)
}

/// Baseline (mean reward) and per-hypothesis coefficients `r_i − b`.
/// Equal rewards give coefficients that are exactly zero.
pub fn scst_coefficients(rewards: &[f64]) -> (f64, Vec<f64>) {
    if rewards.is_empty() {
        return (0.0, Vec::new());
    }
    let r0 = rewards[0];
    let shift = rewards.iter().map(|r| r - r0).sum::<f64>() / rewards.len() as f64;
    let baseline = r0 + shift;
    let coef = rewards.iter().map(|r| (r - r0) - shift).collect();
    (baseline, coef)
}

/// Teacher-forced logits of a hypothesis' tokens, `[T × N]`.
pub fn hypothesis_logits<T: Real>(
    g: &mut Graph<T>,
    model: &CaptionModel<T>,
    bound: &Bound,
    enc: &[Var],
    hyp: &Hypothesis,
) -> Result<Var> {
    if hyp.tokens.is_empty() {
        return Err(Error::invalid("hypothesis has no tokens"));
    }
    let mut inputs = Vec::with_capacity(hyp.tokens.len());
    inputs.push(BOS);
    inputs.extend_from_slice(&hyp.tokens[..hyp.tokens.len() - 1]);
    model.decode_graph(g, bound, enc, &inputs)
}

/// Sequence log-probability `Σ_τ log softmax(logits_τ)[w_τ]` as a scalar.
pub fn sequence_logprob<T: Real>(g: &mut Graph<T>, logits: Var, tokens: &[usize]) -> Result<Var> {
    let lp = g.log_softmax(logits);
    let picked = g.pick(lp, tokens)?;
    Ok(g.sum(picked))
}

/// `−(1/k) Σ_i c_i · log p(w^i)` for one image's beam.
pub fn policy_loss<T: Real>(g: &mut Graph<T>, logprobs: &[Var], coefficients: &[f64]) -> Result<Var> {
    if logprobs.len() != coefficients.len() || logprobs.is_empty() {
        return Err(Error::invalid("policy loss needs one coefficient per hypothesis"));
    }
    let k = logprobs.len() as f64;
    let mut total: Option<Var> = None;
    for (&lp, &c) in logprobs.iter().zip(coefficients) {
        let term = g.scale(lp, -c / k);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}

/// MSE between two hypotheses' logits over their common prefix length.
/// `target` is treated as detached.
pub fn distill_pair_logits<T: Real>(g: &mut Graph<T>, target: Var, online: Var) -> Result<Var> {
    let (tt, _) = g.value(target).last_axis();
    let (to, _) = g.value(online).last_axis();
    let m = tt.min(to);
    let t = if tt == m { target } else { g.slice_rows(target, 0, m)? };
    let o = if to == m { online } else { g.slice_rows(online, 0, m)? };
    g.masked_mse(t, o, &vec![true; m])
}

/// Index pairs (target hypothesis, online hypothesis) to distill on.
pub fn pairing<E: CaptionEmbedder + ?Sized>(
    strategy: Pairing,
    target: &[Hypothesis],
    online: &[Hypothesis],
    embedder: &E,
) -> Result<Vec<(usize, usize)>> {
    if target.is_empty() || online.is_empty() {
        return Err(Error::invalid("pairing needs non-empty beams"));
    }
    Ok(match strategy {
        Pairing::Best | Pairing::EmbedderBest => vec![(0, 0)],
        Pairing::All => (0..target.len().min(online.len())).map(|i| (i, i)).collect(),
        Pairing::HungarianBest | Pairing::HungarianAll => {
            let k = target.len().min(online.len());
            let cost = pairing_cost(&target[..k], &online[..k], embedder);
            let a = hungarian(&cost)?;
            if strategy == Pairing::HungarianBest {
                vec![(0, a.perm[0])]
            } else {
                a.perm.iter().enumerate().map(|(i, &j)| (i, j)).collect()
            }
        }
    })
}

/// Differentiable stand-in for the bag embedding: idf-weighted sum of the
/// per-step token distributions, L2-normalized, `[1 × N]`.
pub fn soft_embedding<T: Real>(g: &mut Graph<T>, logits: Var, embedder: &BagEmbedder) -> Result<Var> {
    let probs = g.softmax(logits);
    let bag = g.sum_rows(probs)?;
    let idf = g.constant(Tensor::new(
        vec![embedder.idf.len()],
        embedder.idf.iter().map(|&v| T::of(v)).collect(),
    )?);
    let weighted = g.mul_row(bag, idf)?;
    Ok(g.l2_normalize_rows(weighted))
}

/// Beams and rewards for one image, computed without gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedImage {
    pub online: Beam,
    pub target: Option<Beam>,
    pub rewards: Vec<f64>,
}

/// One SCST training image.
#[derive(Clone, Copy, Debug)]
pub struct ScstExample<'a> {
    pub grid: &'a FeatureGrid,
    pub refs: &'a [String],
}

/// Shared, read-only SCST inputs.
pub struct ScstContext<'a> {
    pub vocab: &'a Vocabulary,
    pub df: &'a DocFreq,
    pub embedder: &'a BagEmbedder,
}

pub fn decode_for_scst<T: Real>(
    state: &TrainState<T>,
    batch: &[ScstExample<'_>],
    cfg: &ScstConfig,
    ctx: &ScstContext<'_>,
) -> Result<Vec<DecodedImage>> {
    let beam_cfg = BeamConfig::new(cfg.beam_size, state.online.config.max_length);
    let mut out = Vec::with_capacity(batch.len());
    for ex in batch {
        let online = beam_search(&state.online.incremental(ex.grid)?, &beam_cfg)?;
        let target = if cfg.lambda_kd != 0.0 {
            Some(beam_search(&state.target.incremental(ex.grid)?, &beam_cfg)?)
        } else {
            None
        };
        let rewards = online
            .iter()
            .map(|h| reward(&ctx.vocab.decode(h.body()), ex.refs, ctx.df))
            .collect();
        out.push(DecodedImage {
            online,
            target,
            rewards,
        });
    }
    if out.iter().flat_map(|d| &d.online).all(|h| h.body().is_empty()) {
        return Err(Error::Data("every decoded hypothesis is empty".into()));
    }
    Ok(out)
}

pub struct ScstLoss {
    pub loss: Var,
    pub policy: f64,
    pub kd: f64,
    pub reward_mean: f64,
    pub baseline: f64,
}

/// SCST objective over a decoded batch: policy gradient with mean-reward
/// baseline plus `λ_KD` times the pairing distillation term. Runs without
/// dropout so the rescored sequences match the decoded ones.
pub fn scst_loss<T: Real>(
    g: &mut Graph<T>,
    online: (&CaptionModel<T>, &Bound),
    target: Option<(&CaptionModel<T>, &Bound)>,
    batch: &[ScstExample<'_>],
    decoded: &[DecodedImage],
    cfg: &ScstConfig,
    embedder: &BagEmbedder,
) -> Result<ScstLoss> {
    if batch.is_empty() || batch.len() != decoded.len() {
        return Err(Error::invalid("SCST batch and decoded beams must align"));
    }
    let (om, ob) = online;
    let mut total: Option<Var> = None;
    let mut kd_sum = 0.0;
    let mut reward_sum = 0.0;
    let mut baseline_sum = 0.0;
    let mut policy_sum = 0.0;
    for (ex, dec) in batch.iter().zip(decoded) {
        let (baseline, coef) = scst_coefficients(&dec.rewards);
        reward_sum += dec.rewards.iter().sum::<f64>() / dec.rewards.len() as f64;
        baseline_sum += baseline;
        let enc = om.encode_graph(g, ob, ex.grid)?;
        let mut logits = Vec::with_capacity(dec.online.len());
        let mut logprobs = Vec::with_capacity(dec.online.len());
        for h in &dec.online {
            let l = hypothesis_logits(g, om, ob, &enc, h)?;
            logprobs.push(sequence_logprob(g, l, &h.tokens)?);
            logits.push(l);
        }
        let mut term = policy_loss(g, &logprobs, &coef)?;
        policy_sum += g.scalar(term).f64();

        if let (Some((tm, tb)), Some(tbeam), true) = (target, dec.target.as_ref(), cfg.lambda_kd != 0.0) {
            let kd = match cfg.strategy {
                Pairing::EmbedderBest => {
                    let tv = embedder.embed(tbeam[0].body());
                    let tv = g.constant(Tensor::new(vec![1, tv.len()], tv.iter().map(|&v| T::of(v)).collect())?);
                    let ov = soft_embedding(g, logits[0], embedder)?;
                    g.masked_mse(tv, ov, &[true])?
                }
                strategy => {
                    let pairs = pairing(strategy, tbeam, &dec.online, embedder)?;
                    let tenc = tm.encode_graph(g, tb, ex.grid)?;
                    let mut acc: Option<Var> = None;
                    for &(i, j) in &pairs {
                        let lt = hypothesis_logits(g, tm, tb, &tenc, &tbeam[i])?;
                        let d = distill_pair_logits(g, lt, logits[j])?;
                        acc = Some(match acc {
                            Some(a) => g.add(a, d)?,
                            None => d,
                        });
                    }
                    let acc = acc.expect("at least one pair");
                    g.scale(acc, 1.0 / pairs.len() as f64)
                }
            };
            kd_sum += g.scalar(kd).f64();
            let w = g.scale(kd, cfg.lambda_kd);
            term = g.add(term, w)?;
        }
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let b = batch.len() as f64;
    let loss = g.scale(total.expect("non-empty batch"), 1.0 / b);
    Ok(ScstLoss {
        loss,
        policy: policy_sum / b,
        kd: kd_sum / b,
        reward_mean: reward_sum / b,
        baseline: baseline_sum / b,
    })
}

/// One SCST step at a fixed learning rate, then the EMA update.
pub fn scst_step<T: Real>(
    state: &mut TrainState<T>,
    batch: &[ScstExample<'_>],
    cfg: &ScstConfig,
    ctx: &ScstContext<'_>,
) -> Result<StepReport> {
    let decoded = decode_for_scst(state, batch, cfg, ctx)?;
    let mut g = Graph::eval();
    let ob = state.online.bind(&mut g, true);
    let tb = (cfg.lambda_kd != 0.0).then(|| state.target.bind(&mut g, false));
    let parts = scst_loss(
        &mut g,
        (&state.online, &ob),
        tb.as_ref().map(|b| (&state.target, b)),
        batch,
        &decoded,
        cfg,
        ctx.embedder,
    )?;
    let loss = g.scalar(parts.loss).f64();
    finite_or_abort(state.step, "SCST loss", &[("loss", loss), ("kd", parts.kd)])?;
    g.backward(parts.loss)?;
    let grads = collect_grads(&g, &ob);
    drop(ob);
    drop(g);
    adam_update(&mut state.online.params, &grads, &mut state.adam, cfg.lr)?;
    if state.ema_enabled {
        ema_update(&mut state.target.params, &state.online.params, state.momentum)?;
    }
    state.step += 1;
    Ok(StepReport {
        step: state.step,
        lr: cfg.lr,
        xe_loss: None,
        kd_loss: Some(parts.kd),
        reward_mean: Some(parts.reward_mean),
        baseline: Some(parts.baseline),
    })
}
