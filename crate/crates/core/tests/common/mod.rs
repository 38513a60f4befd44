#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use mtcaption::autodiff::{DropoutStream, Graph, Mode, Tensor, Var};
use mtcaption::data::{FeatureGrid, EOS};
use mtcaption::decoding::StepModel;
use mtcaption::model::ModelConfig;
use mtcaption::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries in ±[0.1, 1.1], away from the kink of relu.
pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let x: f64 = rng.random_range(-1.0..1.0);
            x.signum() * (0.1 + x.abs())
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_encoder_layers: 2,
        num_decoder_layers: 2,
        model_dim: 8,
        feedforward_dim: 12,
        num_heads: 2,
        num_memory_slots: 3,
        dropout: 0.0,
        vocab_size: 9,
        max_length: 8,
        mesh: false,
        feature_dim: 5,
    }
}

pub fn random_grid(rng: &mut ChaCha8Rng, id: u64, cells: usize, dim: usize) -> FeatureGrid {
    let data = (0..cells * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    FeatureGrid::new(id, cells, dim, data).unwrap()
}

// ----- finite differences -----

pub type Build = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// A differentiable operation checked against central differences.
pub struct GradCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Build,
    pub train_mode: bool,
}

fn weights(n: usize) -> Tensor<f64> {
    let mut r = rng(1000 + n as u64);
    Tensor::new(vec![n], (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds the case and reduces its output to a scalar by a fixed random
/// weighting.
fn scalar_loss(case: &GradCase, inputs: &[Tensor<f64>], as_params: bool) -> (Graph<f64>, Vec<Var>, Var) {
    let mode = if case.train_mode {
        Mode::Train(DropoutStream { seed: 5, stream: 0 })
    } else {
        Mode::Eval
    };
    let mut g = Graph::new(mode);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            if as_params {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
        .collect();
    let out = (case.build)(&mut g, &vars).unwrap();
    let n = g.value(out).numel();
    let loss = if n == 1 {
        out
    } else {
        let shape = g.value(out).shape().to_vec();
        let flat = g.reshape(out, &[n]).unwrap();
        let w = g.constant(weights(n));
        let p = g.mul(flat, w).unwrap();
        let _ = shape;
        g.sum(p)
    };
    (g, vars, loss)
}

/// Largest relative error `‖a − n‖ / (‖a‖ + ‖n‖)` over the inputs.
pub fn max_relative_error(case: &GradCase, inputs: &[Tensor<f64>], h: f64) -> f64 {
    let (mut g, vars, loss) = scalar_loss(case, inputs, true);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or(vec![0.0; t.numel()], |s| s.to_vec()))
        .collect();
    let eval = |inputs: &[Tensor<f64>]| {
        let (g, _, loss) = scalar_loss(case, inputs, false);
        g.scalar(loss)
    };
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.numel()];
        for (j, num) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            *num = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let diff: f64 = analytic[i]
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale =
            analytic[i].iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        if scale > 1e-12 {
            worst = worst.max(diff / scale);
        } else {
            worst = worst.max(diff);
        }
    }
    worst
}

fn c(g: &mut Graph<f64>, seed: u64, shape: &[usize]) -> Var {
    let t = rand_tensor(&mut rng(seed), shape);
    g.constant(t)
}

pub fn gradient_cases() -> Vec<GradCase> {
    fn case(name: &'static str, shapes: &[&[usize]], build: Build) -> GradCase {
        GradCase {
            name,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            build,
            train_mode: false,
        }
    }
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1])),
        case("matmul_nt", &[&[3, 4], &[2, 4]], |g, v| g.matmul_nt(v[0], v[1])),
        case("transpose", &[&[3, 4]], |g, v| g.transpose(v[0])),
        case("add", &[&[2, 3], &[2, 3]], |g, v| g.add(v[0], v[1])),
        case("sub", &[&[2, 3], &[2, 3]], |g, v| g.sub(v[0], v[1])),
        case("mul", &[&[2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1])),
        case("add_row", &[&[3, 4], &[4]], |g, v| g.add_row(v[0], v[1])),
        case("mul_row", &[&[3, 4], &[4]], |g, v| g.mul_row(v[0], v[1])),
        case("scale", &[&[2, 3]], |g, v| Ok(g.scale(v[0], -1.7))),
        case("add_const", &[&[2, 3]], |g, v| {
            let t = rand_tensor(&mut rng(9), &[2, 3]);
            g.add_const(v[0], &t)
        }),
        case("relu", &[&[3, 4]], |g, v| Ok(g.relu(v[0]))),
        case("sigmoid", &[&[3, 4]], |g, v| Ok(g.sigmoid(v[0]))),
        GradCase {
            train_mode: true,
            ..case("dropout", &[&[4, 5]], |g, v| g.dropout(v[0], 0.3))
        },
        case("concat_rows", &[&[2, 3], &[1, 3]], |g, v| g.concat_rows(&[v[0], v[1]])),
        case("concat_cols", &[&[2, 3], &[2, 2]], |g, v| g.concat_cols(&[v[0], v[1]])),
        case("slice_rows", &[&[4, 3]], |g, v| g.slice_rows(v[0], 1, 2)),
        case("slice_cols", &[&[3, 5]], |g, v| g.slice_cols(v[0], 2, 3)),
        case("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        case("embedding", &[&[5, 3]], |g, v| g.embedding(v[0], &[4, 0, 4, 2])),
        case("softmax", &[&[2, 5]], |g, v| Ok(g.softmax(v[0]))),
        case("softmax_axis0", &[&[3, 4]], |g, v| g.softmax_axis(v[0], 0)),
        case("log_softmax", &[&[3, 5]], |g, v| Ok(g.log_softmax(v[0]))),
        case("layer_norm", &[&[3, 6], &[6], &[6]], |g, v| {
            g.layer_norm(v[0], v[1], v[2])
        }),
        case("l2_normalize_rows", &[&[3, 4]], |g, v| Ok(g.l2_normalize_rows(v[0]))),
        case("sum", &[&[3, 4]], |g, v| Ok(g.sum(v[0]))),
        case("mean", &[&[3, 4]], |g, v| Ok(g.mean(v[0]))),
        case("sum_rows", &[&[3, 4]], |g, v| g.sum_rows(v[0])),
        case("pick", &[&[4, 3]], |g, v| g.pick(v[0], &[2, 0, 1, 2])),
        case("cross_entropy", &[&[5, 7]], |g, v| {
            g.cross_entropy(v[0], &[1, 6, 0, 3, 3], &[true, true, false, true, true])
        }),
        case("masked_mse", &[&[6, 8]], |g, v| {
            let t = c(g, 17, &[6, 8]);
            g.masked_mse(t, v[0], &[true, false, true, true, false, true])
        }),
        case("attention_block", &[&[3, 4], &[4, 4], &[5, 4]], |g, v| {
            let q = g.matmul(v[0], v[1])?;
            let s = g.matmul_nt(q, v[2])?;
            let s = g.scale(s, 0.5);
            let a = g.softmax(s);
            g.matmul(a, v[2])
        }),
    ]
}

// ----- beam-search oracle models -----

/// Next-token logits drawn from a generator keyed by the whole prefix, so
/// every prefix gets its own distribution.
pub struct PrefixModel {
    pub vocab: usize,
    pub seed: u64,
    pub scale: f64,
}

impl PrefixModel {
    pub fn logits(&self, prefix: &[usize]) -> Vec<f64> {
        let mut h = DefaultHasher::new();
        (self.seed, prefix).hash(&mut h);
        let mut r = rng(h.finish());
        (0..self.vocab)
            .map(|_| r.sample::<f64, _>(StandardNormal) * self.scale)
            .collect()
    }
}

impl StepModel for PrefixModel {
    type State = Vec<usize>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn start(&self) -> Result<(Vec<usize>, Vec<f64>)> {
        Ok((Vec::new(), self.logits(&[])))
    }

    fn advance(&self, state: &Vec<usize>, token: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let mut s = state.clone();
        s.push(token);
        let l = self.logits(&s);
        Ok((s, l))
    }
}

fn oracle_log_softmax(row: &[f64], j: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
    row[j] - m - z.ln()
}

/// Every complete sequence (ending in EOS, or reaching `max_len`) with its
/// log-probability, ranked best first, ties by token order.
pub fn enumerate_sequences(model: &PrefixModel, max_len: usize) -> Vec<(Vec<usize>, f64)> {
    fn walk(m: &PrefixModel, prefix: &mut Vec<usize>, lp: f64, max_len: usize, out: &mut Vec<(Vec<usize>, f64)>) {
        let row = m.logits(prefix);
        for t in 0..m.vocab {
            let score = lp + oracle_log_softmax(&row, t);
            prefix.push(t);
            if t == EOS || prefix.len() == max_len {
                out.push((prefix.clone(), score));
            } else {
                walk(m, prefix, score, max_len, out);
            }
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    walk(model, &mut Vec::new(), 0.0, max_len, &mut out);
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    out
}

// ----- assignment oracle -----

pub fn brute_force_assignment(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, best: &mut (Vec<usize>, f64)) {
        let k = cost.len();
        if row == k {
            let total: f64 = cur.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            if total < best.1 {
                *best = (cur.clone(), total);
            }
            return;
        }
        for j in 0..k {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(cost, row + 1, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (Vec::new(), f64::INFINITY);
    rec(cost, 0, &mut vec![false; cost.len()], &mut Vec::new(), &mut best);
    best
}

pub fn random_cost(rng: &mut ChaCha8Rng, k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| (0..k).map(|_| rng.random_range(0.0..10.0)).collect())
        .collect()
}

// ----- metric oracles -----

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(|w| w.to_lowercase()).collect()
}

fn grams(t: &[String], n: usize) -> Vec<Vec<String>> {
    if t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

fn count_of(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn unique(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut u: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !u.contains(g) {
            u.push(g.clone());
        }
    }
    u
}

pub fn bleu_oracle(cands: &[String], refs: &[Vec<String>], n: usize) -> f64 {
    let mut num = vec![0.0; n];
    let mut den = vec![0.0; n];
    let (mut c_len, mut r_len) = (0.0, 0.0);
    for (c, rs) in cands.iter().zip(refs) {
        let ct = toks(c);
        let rts: Vec<Vec<String>> = rs.iter().map(|r| toks(r)).collect();
        c_len += ct.len() as f64;
        let mut best = rts[0].len();
        for r in &rts {
            let d = (r.len() as i64 - ct.len() as i64).abs();
            let bd = (best as i64 - ct.len() as i64).abs();
            if d < bd || (d == bd && r.len() < best) {
                best = r.len();
            }
        }
        r_len += best as f64;
        for k in 1..=n {
            let cg = grams(&ct, k);
            for g in unique(&cg) {
                let mut max_r = 0;
                for r in &rts {
                    max_r = max_r.max(count_of(&grams(r, k), &g));
                }
                num[k - 1] += count_of(&cg, &g).min(max_r) as f64;
            }
            den[k - 1] += cg.len() as f64;
        }
    }
    let mut prod = 1.0;
    for k in 0..n {
        if num[k] == 0.0 {
            return 0.0;
        }
        prod *= num[k] / den[k];
    }
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len / c_len).exp()
    };
    bp * prod.powf(1.0 / n as f64)
}

pub fn rouge_oracle(cands: &[String], refs: &[Vec<String>]) -> f64 {
    let beta2 = 1.2f64 * 1.2;
    let mut total = 0.0;
    for (c, rs) in cands.iter().zip(refs) {
        let a = toks(c);
        let mut best: f64 = 0.0;
        for r in rs {
            let b = toks(r);
            let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
            for i in 1..=a.len() {
                for j in 1..=b.len() {
                    t[i][j] = if a[i - 1] == b[j - 1] {
                        t[i - 1][j - 1] + 1
                    } else {
                        t[i - 1][j].max(t[i][j - 1])
                    };
                }
            }
            let l = t[a.len()][b.len()] as f64;
            if l > 0.0 {
                let p = l / a.len() as f64;
                let rc = l / b.len() as f64;
                best = best.max((1.0 + beta2) * p * rc / (rc + beta2 * p));
            }
        }
        total += best;
    }
    total / cands.len() as f64
}

/// CIDEr-D spelled out: tf-idf with `log(#images) − log(max(1, df))`,
/// clipped products `min(h, r)·r`, cosine per order, Gaussian length penalty
/// (σ = 6) on the bigram count, mean over orders and references, ×10.
/// Weighted n-grams of one order.
type Grams = Vec<(Vec<String>, f64)>;

pub fn cider_oracle(cands: &[String], refs: &[Vec<String>]) -> f64 {
    let images = refs.len() as f64;
    let df = |g: &Vec<String>| -> f64 {
        refs.iter()
            .filter(|rs| rs.iter().any(|r| grams(&toks(r), g.len()).contains(g)))
            .count() as f64
    };
    let vector = |s: &str| -> (Vec<Grams>, f64) {
        let t = toks(s);
        let mut out = Vec::new();
        for n in 1..=4 {
            let gs = grams(&t, n);
            out.push(
                unique(&gs)
                    .into_iter()
                    .map(|g| {
                        let w = count_of(&gs, &g) as f64 * (images.ln() - df(&g).max(1.0).ln());
                        (g, w)
                    })
                    .collect(),
            );
        }
        (out, grams(&t, 2).len() as f64)
    };
    let mut total = 0.0;
    for (c, rs) in cands.iter().zip(refs) {
        let (hv, hl) = vector(c);
        let mut per_ref = 0.0;
        for r in rs {
            let (rv, rl) = vector(r);
            let mut s = 0.0;
            for n in 0..4 {
                let mut dot = 0.0;
                for (g, wh) in &hv[n] {
                    if let Some((_, wr)) = rv[n].iter().find(|(x, _)| x == g) {
                        dot += wh.min(*wr) * wr;
                    }
                }
                let nh = hv[n].iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
                let nr = rv[n].iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
                if nh != 0.0 && nr != 0.0 {
                    dot /= nh * nr;
                }
                s += dot * (-((hl - rl).powi(2)) / 72.0).exp();
            }
            per_ref += s / 4.0;
        }
        total += per_ref / rs.len() as f64 * 10.0;
    }
    total / cands.len() as f64
}

pub const WORDS: [&str; 7] = ["a", "red", "blue", "ball", "cube", "and", "there"];

pub fn random_sentence(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(1..8);
    (0..len)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

/// Up to 5 images with up to 5 references each; candidates are often
/// perturbed references so that matches are common.
pub fn random_corpus(rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<Vec<String>>) {
    let images = rng.random_range(1..=5);
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..images {
        let k = rng.random_range(1..=5);
        let rs: Vec<String> = (0..k).map(|_| random_sentence(rng)).collect();
        let c = if rng.random_bool(0.5) {
            let mut w: Vec<&str> = rs[0].split(' ').collect();
            if w.len() > 1 && rng.random_bool(0.5) {
                w.pop();
            }
            w.join(" ")
        } else {
            random_sentence(rng)
        };
        cands.push(c);
        refs.push(rs);
    }
    (cands, refs)
}

// ----- tiny training tasks -----

use mtcaption::assignment::BagEmbedder;
use mtcaption::data::{Dataset, SynthBundle, TokenSequence, Vocabulary};
use mtcaption::decoding::Hypothesis;
use mtcaption::metrics::DocFreq;
use mtcaption::model::CaptionModel;
use mtcaption::train::{
    adam_update, collect_grads, decode_for_scst, scst_loss, single_xe_step, xe_loss, xe_step, AdamState, DecodedImage,
    Pairing, RunConfig, ScstConfig, ScstContext, ScstExample, TrainState, XeExample,
};

/// Random grids and captions over a 9-token vocabulary of words `w3..w8`.
pub struct TinyTask {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub grids: Vec<FeatureGrid>,
    pub captions: Vec<TokenSequence>,
    pub refs: Vec<Vec<String>>,
    pub df: DocFreq,
    pub embedder: BagEmbedder,
}

pub fn tiny_task(seed: u64, images: usize) -> TinyTask {
    let cfg = tiny_config();
    let mut tokens: Vec<String> = ["<pad>", "<bos>", "<eos>"].iter().map(|s| s.to_string()).collect();
    tokens.extend((3..cfg.vocab_size).map(|i| format!("w{i}</w>")));
    let vocab = Vocabulary::from_parts(tokens, Vec::new()).unwrap();
    let mut r = rng(seed);
    let mut grids = Vec::new();
    let mut captions = Vec::new();
    let mut refs = Vec::new();
    let mut corpus = Vec::new();
    for i in 0..images {
        grids.push(random_grid(&mut r, i as u64, 4, cfg.feature_dim));
        let seqs: Vec<TokenSequence> = (0..3)
            .map(|_| {
                let body: Vec<usize> = (0..r.random_range(1..5))
                    .map(|_| r.random_range(3..cfg.vocab_size))
                    .collect();
                TokenSequence::from_body(&body).unwrap()
            })
            .collect();
        refs.push(seqs.iter().map(|s| vocab.detokenize(s)).collect());
        captions.push(seqs[0].clone());
        corpus.extend(seqs);
    }
    let df = DocFreq::build(&refs).unwrap();
    let embedder = BagEmbedder::from_corpus(cfg.vocab_size, &corpus);
    TinyTask {
        cfg,
        vocab,
        grids,
        captions,
        refs,
        df,
        embedder,
    }
}

impl TinyTask {
    pub fn xe_batch(&self, idx: &[usize]) -> Vec<XeExample<'_>> {
        idx.iter()
            .map(|&i| XeExample {
                grid: &self.grids[i],
                caption: &self.captions[i],
            })
            .collect()
    }

    pub fn scst_batch(&self, idx: &[usize]) -> Vec<ScstExample<'_>> {
        idx.iter()
            .map(|&i| ScstExample {
                grid: &self.grids[i],
                refs: &self.refs[i],
            })
            .collect()
    }

    pub fn ctx(&self) -> ScstContext<'_> {
        ScstContext {
            vocab: &self.vocab,
            df: &self.df,
            embedder: &self.embedder,
        }
    }

    /// f64 state whose target differs from the online model.
    pub fn state(&self, seed: u64, lambda_kd: f64) -> TrainState<f64> {
        let mut s = TrainState::new(self.cfg.clone(), seed, 0.9, lambda_kd).unwrap();
        s.target = CaptionModel::new(self.cfg.clone(), seed + 1000).unwrap();
        s
    }
}

pub fn scst_cfg(strategy: Pairing, lambda_kd: f64) -> ScstConfig {
    ScstConfig {
        strategy,
        beam_size: 3,
        lr: 1e-3,
        lambda_kd,
    }
}

/// Largest deviation of an EMA target after `steps` XE steps from the closed
/// form `λ^T θ_t(0) + Σ_s (1 − λ) λ^(T − s) θ_o(s)`, and whether the λ = 0
/// and λ = 1 endpoints hold bit for bit.
pub fn ema_closed_form(steps: usize, lambda: f64) -> (f64, bool) {
    let task = tiny_task(40, 6);
    let mut state = task.state(41, 0.5);
    state.momentum = lambda;
    let target0 = state.target.params.flatten();
    let mut onlines = Vec::new();
    for s in 0..steps {
        let idx = [s % 6, (s + 1) % 6];
        xe_step(&mut state, &task.xe_batch(&idx), 1e-2).unwrap();
        onlines.push(state.online.params.flatten());
    }
    let t = steps as i32;
    let got = state.target.params.flatten();
    let mut worst: f64 = 0.0;
    for j in 0..got.len() {
        let mut want = lambda.powi(t) * target0[j];
        for (s, o) in onlines.iter().enumerate() {
            want += (1.0 - lambda) * lambda.powi(t - 1 - s as i32) * o[j];
        }
        worst = worst.max((got[j] - want).abs());
    }
    let exact = if lambda == 0.0 {
        got.iter()
            .zip(onlines.last().unwrap())
            .all(|(a, b)| a.to_bits() == b.to_bits())
    } else if lambda == 1.0 {
        got.iter().zip(&target0).all(|(a, b)| a.to_bits() == b.to_bits())
    } else {
        true
    };
    (worst, exact)
}

fn grad_norms(g: &Graph<f64>, bound: &mtcaption::model::Bound) -> f64 {
    bound
        .iter()
        .filter_map(|(_, &v)| g.grad(v))
        .flat_map(|s| s.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Gradient norms reaching (target, online) parameters when both networks
/// are bound as trainable leaves and the XE + KD loss is differentiated.
pub fn xe_gradient_split(seed: u64) -> (f64, f64) {
    let task = tiny_task(seed, 4);
    let state = task.state(seed, 1.0);
    let mut g = Graph::new(Mode::Train(DropoutStream { seed, stream: 0 }));
    let ob = state.online.bind(&mut g, true);
    let tb = state.target.bind(&mut g, true);
    let l = xe_loss(
        &mut g,
        (&state.online, &ob),
        Some((&state.target, &tb)),
        &task.xe_batch(&[0, 1, 2]),
        1.0,
        0,
    )
    .unwrap();
    g.backward(l.loss).unwrap();
    (grad_norms(&g, &tb), grad_norms(&g, &ob))
}

/// Same split for the SCST objective under `strategy`.
pub fn scst_gradient_split(strategy: Pairing, seed: u64) -> (f64, f64) {
    let task = tiny_task(seed, 4);
    let state = task.state(seed, 1.0);
    let cfg = scst_cfg(strategy, 1.0);
    let batch = task.scst_batch(&[0, 1]);
    let mut decoded = decode_for_scst(&state, &batch, &cfg, &task.ctx()).unwrap();
    for d in &mut decoded {
        for (i, r) in d.rewards.iter_mut().enumerate() {
            *r = i as f64 * 0.3;
        }
    }
    let mut g = Graph::eval();
    let ob = state.online.bind(&mut g, true);
    let tb = state.target.bind(&mut g, true);
    let l = scst_loss(
        &mut g,
        (&state.online, &ob),
        Some((&state.target, &tb)),
        &batch,
        &decoded,
        &cfg,
        &task.embedder,
    )
    .unwrap();
    g.backward(l.loss).unwrap();
    (grad_norms(&g, &tb), grad_norms(&g, &ob))
}

/// Trains a mean-teacher state with λ_KD = 0 and EMA off next to a plain
/// single network; returns whether every online parameter and loss agrees
/// bit for bit after `steps` steps, with dropout active.
pub fn reduction_matches(steps: usize) -> bool {
    let task = tiny_task(50, 6);
    let cfg = ModelConfig {
        dropout: 0.2,
        ..task.cfg.clone()
    };
    let mut state = TrainState::<f64>::new(cfg.clone(), 51, 0.9, 0.0).unwrap();
    state.ema_enabled = false;
    let mut single = CaptionModel::<f64>::new(cfg, 51).unwrap();
    let mut adam = AdamState::new(&single.params);
    for s in 0..steps {
        let batch = task.xe_batch(&[s % 6, (s + 3) % 6]);
        let report = xe_step(&mut state, &batch, 1e-2).unwrap();
        let loss = single_xe_step(&mut single, &mut adam, &batch, 51, s as u64, 1e-2).unwrap();
        if report.xe_loss.unwrap().to_bits() != loss.to_bits() {
            return false;
        }
    }
    state.online.params == single.params && state.adam == adam
}

/// Relative error between the analytic SCST gradient and central
/// differences of the loss with the decoded beams, rewards and pairings
/// frozen.
pub fn scst_finite_difference_error(strategy: Pairing) -> f64 {
    let task = tiny_task(60, 4);
    let state = task.state(61, 0.5);
    let cfg = scst_cfg(strategy, 0.5);
    let batch = task.scst_batch(&[0, 1]);
    let mut decoded: Vec<DecodedImage> = decode_for_scst(&state, &batch, &cfg, &task.ctx()).unwrap();
    for d in &mut decoded {
        for (i, r) in d.rewards.iter_mut().enumerate() {
            *r = 1.0 / (1.0 + i as f64);
        }
    }
    let loss_of = |online: &CaptionModel<f64>| {
        let mut g = Graph::eval();
        let ob = online.bind(&mut g, false);
        let tb = state.target.bind(&mut g, false);
        let l = scst_loss(
            &mut g,
            (online, &ob),
            Some((&state.target, &tb)),
            &batch,
            &decoded,
            &cfg,
            &task.embedder,
        )
        .unwrap();
        g.scalar(l.loss)
    };
    let mut g = Graph::eval();
    let ob = state.online.bind(&mut g, true);
    let tb = state.target.bind(&mut g, false);
    let l = scst_loss(
        &mut g,
        (&state.online, &ob),
        Some((&state.target, &tb)),
        &batch,
        &decoded,
        &cfg,
        &task.embedder,
    )
    .unwrap();
    g.backward(l.loss).unwrap();
    let grads = collect_grads(&g, &ob);
    let mut r = rng(62);
    let (mut a_vec, mut n_vec) = (Vec::new(), Vec::new());
    let h = 1e-5;
    for name in state.online.params.names() {
        let n = state.online.params.get(name).unwrap().numel();
        for _ in 0..2 {
            let j = r.random_range(0..n);
            let mut plus = state.online.clone();
            plus.params.get_mut(name).unwrap().data_mut()[j] += h;
            let mut minus = state.online.clone();
            minus.params.get_mut(name).unwrap().data_mut()[j] -= h;
            n_vec.push((loss_of(&plus) - loss_of(&minus)) / (2.0 * h));
            a_vec.push(grads.get(name).map_or(0.0, |gr| gr[j]));
        }
    }
    let diff = a_vec
        .iter()
        .zip(&n_vec)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a_vec.iter().map(|a| a * a).sum::<f64>().sqrt() + n_vec.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / scale
}

/// Applies one SCST update from hand-set rewards and reports whether the
/// online parameters stayed bit-identical.
pub fn scst_update_is_noop(rewards: &[f64]) -> bool {
    let task = tiny_task(70, 4);
    let mut state = task.state(71, 0.0);
    let cfg = scst_cfg(Pairing::Best, 0.0);
    let batch = task.scst_batch(&[0]);
    let mut decoded = decode_for_scst(&state, &batch, &cfg, &task.ctx()).unwrap();
    decoded[0].rewards = rewards.iter().cycle().take(decoded[0].online.len()).cloned().collect();
    let before = state.online.params.clone();
    let mut g = Graph::eval();
    let ob = state.online.bind(&mut g, true);
    let l = scst_loss(
        &mut g,
        (&state.online, &ob),
        None,
        &batch,
        &decoded,
        &cfg,
        &task.embedder,
    )
    .unwrap();
    g.backward(l.loss).unwrap();
    let grads = collect_grads(&g, &ob);
    drop(ob);
    drop(g);
    adam_update(&mut state.online.params, &grads, &mut state.adam, 1e-2).unwrap();
    state.online.params == before
}

pub fn hyp_with_logits(tokens: &[usize], logits: Vec<Vec<f64>>) -> Hypothesis {
    Hypothesis {
        tokens: tokens.to_vec(),
        logprob: 0.0,
        logits,
        terminated: tokens.last() == Some(&EOS),
    }
}

// ----- synthetic runs -----

/// Small synthetic corpus and a compact model for end-to-end runs.
pub fn small_run(num_images: usize, seed: u64) -> (RunConfig, SynthBundle, Dataset) {
    let cfg = RunConfig {
        seed,
        num_images,
        num_val: 4,
        num_test: 4,
        val_images: 4,
        num_encoder_layers: 1,
        num_decoder_layers: 1,
        model_dim: 16,
        feedforward_dim: 32,
        num_heads: 2,
        num_memory_slots: 2,
        batch_size: 4,
        warmup: 20,
        val_every: 5,
        eval_beam: 2,
        scst_batch_size: 2,
        scst_beam: 2,
        scst_lr: 1e-3,
        ..RunConfig::default()
    };
    let bundle = SynthBundle::generate(&cfg.synth(), cfg.vocab_size, cfg.num_val, cfg.num_test).unwrap();
    let data = bundle.dataset().unwrap();
    (cfg, bundle, data)
}

/// Largest logit gap between a mesh model with gates pinned to the last
/// encoder layer and a plain model sharing its weights, and the same gap
/// with learned gates.
pub fn mesh_pinned_gap(seed: u64) -> (f64, f64) {
    use mtcaption::model::GateMode;
    let cfg = ModelConfig {
        mesh: true,
        ..tiny_config()
    };
    let mut mesh = CaptionModel::<f64>::new(cfg.clone(), seed).unwrap();
    mesh.gate_mode = GateMode::PinnedLast;
    let mut plain = CaptionModel::<f64>::new(
        ModelConfig {
            mesh: false,
            ..cfg.clone()
        },
        seed + 50,
    )
    .unwrap();
    let names: Vec<String> = plain.params.names().cloned().collect();
    for name in names {
        plain
            .params
            .insert(name.clone(), (**mesh.params.get(&name).unwrap()).clone());
    }
    let grid = random_grid(&mut rng(seed), 0, 4, cfg.feature_dim);
    let inputs = [mtcaption::data::BOS, 3, 5, 2];
    let logits = |m: &CaptionModel<f64>| {
        m.forward_teacher_forced(&m.encode(&grid).unwrap(), &inputs)
            .unwrap()
            .into_data()
    };
    let gap = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let pinned = gap(logits(&mesh), logits(&plain));
    mesh.gate_mode = GateMode::Learned;
    (pinned, gap(logits(&mesh), logits(&plain)))
}

/// Runs XE then SCST twice from scratch and once with an interruption and
/// resume in each stage; every log and checkpoint must agree byte for byte.
pub fn reproducibility_check() -> std::result::Result<(), String> {
    use mtcaption::model::Checkpoint;
    use mtcaption::train::{train_scst, train_xe};
    let (cfg, bundle, data) = small_run(24, 3);
    let cfg = RunConfig {
        xe_steps: 8,
        scst_steps: 4,
        dropout: 0.1,
        ..cfg
    };
    let v = &bundle.vocab;
    let full_run = || {
        let mut xe_log = Vec::new();
        let xe = train_xe(&cfg, &data, v, None, &mut xe_log).unwrap();
        let mut scst_log = Vec::new();
        let scst = train_scst(&cfg, &data, v, &xe.last, &mut scst_log).unwrap();
        (
            xe_log,
            xe.last.to_bytes().unwrap(),
            scst_log,
            scst.last.to_bytes().unwrap(),
        )
    };
    let a = full_run();
    if a != full_run() {
        return Err("two runs with one seed differ".into());
    }
    let half = RunConfig {
        xe_steps: 4,
        ..cfg.clone()
    };
    let mut log = Vec::new();
    let first = train_xe(&half, &data, v, None, &mut log).unwrap();
    let restored = Checkpoint::from_bytes(&first.last.to_bytes().unwrap()).unwrap();
    let resumed = train_xe(&cfg, &data, v, Some(&restored), &mut log).unwrap();
    if log != a.0 || resumed.last.to_bytes().unwrap() != a.1 {
        return Err("resumed XE run differs from the uninterrupted one".into());
    }
    let short = RunConfig {
        scst_steps: 2,
        ..cfg.clone()
    };
    let mut log = Vec::new();
    let part = train_scst(&short, &data, v, &resumed.last, &mut log).unwrap();
    let restored = Checkpoint::from_bytes(&part.last.to_bytes().unwrap()).unwrap();
    let rest = train_scst(&cfg, &data, v, &restored, &mut log).unwrap();
    if log != a.2 || rest.last.to_bytes().unwrap() != a.3 {
        return Err("resumed SCST run differs from the uninterrupted one".into());
    }
    Ok(())
}
