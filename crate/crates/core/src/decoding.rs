//! Beam search and greedy decoding over any next-token model.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{TokenSequence, EOS};
use crate::error::{Error, Result};

/// Autoregressive model seen one token at a time.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    /// State after BOS and the logits for the first generated token.
    fn start(&self) -> Result<(Self::State, Vec<f64>)>;

    /// State after feeding `token` and the logits for the token after it.
    fn advance(&self, state: &Self::State, token: usize) -> Result<(Self::State, Vec<f64>)>;
}

/// One decoded sequence. `tokens` excludes BOS; a terminated hypothesis ends
/// in EOS. `logits[τ]` is the distribution row that produced `tokens[τ]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub logits: Vec<Vec<f64>>,
    pub terminated: bool,
}

/// Hypotheses sorted by descending log-probability.
pub type Beam = Vec<Hypothesis>;

impl Hypothesis {
    /// Generated tokens without the trailing EOS.
    pub fn body(&self) -> &[usize] {
        if self.terminated {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }

    /// BOS + body + EOS, closing unterminated hypotheses with EOS.
    pub fn to_sequence(&self) -> Result<TokenSequence> {
        TokenSequence::from_body(self.body())
    }

    /// Sum of log-softmax of the stored logits at the chosen tokens.
    pub fn rescore(&self) -> f64 {
        self.tokens
            .iter()
            .zip(&self.logits)
            .map(|(&t, row)| log_softmax(row)[t])
            .sum()
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v - lse).collect()
}

/// Beam ordering: higher score first, then lexicographically smaller tokens.
fn rank(a_score: f64, a_tokens: &[usize], b_score: f64, b_tokens: &[usize]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_tokens.cmp(b_tokens))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
    /// When set, each live hypothesis expands by tokens drawn without
    /// replacement from its softmax (Gumbel top-k) instead of its top tokens.
    pub sample_seed: Option<u64>,
}

impl BeamConfig {
    pub fn new(beam_size: usize, max_len: usize) -> Self {
        BeamConfig {
            beam_size,
            max_len,
            sample_seed: None,
        }
    }
}

struct Live<S> {
    hyp: Hypothesis,
    state: Option<S>,
    next: Vec<f64>,
}

fn top_tokens(logp: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logp.len()).collect();
    idx.sort_by(|&a, &b| rank(logp[a], &[a], logp[b], &[b]));
    idx.truncate(k);
    idx
}

fn sampled_tokens(logp: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let keys: Vec<f64> = logp
        .iter()
        .map(|&l| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            l - (-u.ln()).ln()
        })
        .collect();
    top_tokens(&keys, k)
}

/// Beam search without length normalization. Finished hypotheses stay in
/// the candidate pool with their final score; the search stops once the
/// whole beam is finished or `max_len` tokens have been generated.
///
/// `beam_size` may exceed the vocabulary; each hypothesis then expands by
/// every token, which makes a wide enough beam an exhaustive search.
pub fn beam_search<M: StepModel>(model: &M, config: &BeamConfig) -> Result<Beam> {
    let k = config.beam_size;
    if k == 0 {
        return Err(Error::invalid("beam size must be at least 1"));
    }
    if config.max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let n = model.vocab_size();
    let mut rng = config.sample_seed.map(ChaCha8Rng::seed_from_u64);
    let (state, first) = model.start()?;
    check_width(&first, n)?;
    let mut beam = vec![Live {
        hyp: Hypothesis {
            tokens: Vec::new(),
            logprob: 0.0,
            logits: Vec::new(),
            terminated: false,
        },
        state: Some(state),
        next: first,
    }];

    for _ in 0..config.max_len {
        if beam.iter().all(|l| l.hyp.terminated) {
            break;
        }
        // (parent, token or None for a carried finished hypothesis, score, tokens)
        let mut cands: Vec<(usize, Option<usize>, f64, Vec<usize>)> = Vec::new();
        for (p, live) in beam.iter().enumerate() {
            if live.hyp.terminated {
                cands.push((p, None, live.hyp.logprob, live.hyp.tokens.clone()));
                continue;
            }
            let logp = log_softmax(&live.next);
            let picks = match rng.as_mut() {
                Some(r) => sampled_tokens(&logp, k.min(n), r),
                None => top_tokens(&logp, k.min(n)),
            };
            for t in picks {
                let mut toks = live.hyp.tokens.clone();
                toks.push(t);
                cands.push((p, Some(t), live.hyp.logprob + logp[t], toks));
            }
        }
        cands.sort_by(|a, b| rank(a.2, &a.3, b.2, &b.3));
        cands.truncate(k);

        let mut next_beam = Vec::with_capacity(cands.len());
        for (p, tok, score, tokens) in cands {
            let parent = &beam[p];
            let Some(t) = tok else {
                next_beam.push(Live {
                    hyp: parent.hyp.clone(),
                    state: None,
                    next: Vec::new(),
                });
                continue;
            };
            let mut logits = parent.hyp.logits.clone();
            logits.push(parent.next.clone());
            let terminated = t == EOS;
            let at_limit = tokens.len() == config.max_len;
            let (state, next) = if terminated || at_limit {
                (None, Vec::new())
            } else {
                let s = parent.state.as_ref().expect("live hypothesis keeps its state");
                let (s2, row) = model.advance(s, t)?;
                check_width(&row, n)?;
                (Some(s2), row)
            };
            next_beam.push(Live {
                hyp: Hypothesis {
                    tokens,
                    logprob: score,
                    logits,
                    terminated,
                },
                state,
                next,
            });
        }
        beam = next_beam;
    }
    Ok(beam.into_iter().map(|l| l.hyp).collect())
}

fn check_width(row: &[f64], n: usize) -> Result<()> {
    if row.len() != n {
        return Err(Error::Shape {
            op: "decode",
            left: vec![row.len()],
            right: vec![n],
        });
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits during decoding".into()));
    }
    Ok(())
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy<M: StepModel>(model: &M, max_len: usize) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let n = model.vocab_size();
    let (mut state, mut row) = model.start()?;
    check_width(&row, n)?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        logits: Vec::new(),
        terminated: false,
    };
    loop {
        let logp = log_softmax(&row);
        let t = top_tokens(&logp, 1)[0];
        hyp.tokens.push(t);
        hyp.logprob += logp[t];
        hyp.logits.push(row);
        if t == EOS {
            hyp.terminated = true;
            break;
        }
        if hyp.tokens.len() == max_len {
            break;
        }
        let (s, r) = model.advance(&state, t)?;
        check_width(&r, n)?;
        state = s;
        row = r;
    }
    Ok(hyp)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Logits depend only on the last token.
    struct Bigram {
        table: Vec<Vec<f64>>,
    }

    impl StepModel for Bigram {
        type State = usize;

        fn vocab_size(&self) -> usize {
            self.table[0].len()
        }

        fn start(&self) -> Result<(usize, Vec<f64>)> {
            Ok((1, self.table[1].clone()))
        }

        fn advance(&self, _: &usize, token: usize) -> Result<(usize, Vec<f64>)> {
            Ok((token, self.table[token].clone()))
        }
    }

    #[test]
    fn deterministic_model_gives_zero_logprob() {
        // BOS -> 3 -> 4 -> EOS with near-certain probability.
        let mut table = vec![vec![0.0; 5]; 5];
        table[1][3] = 1e4;
        table[3][4] = 1e4;
        table[4][EOS] = 1e4;
        let m = Bigram { table };
        let beam = beam_search(&m, &BeamConfig::new(3, 6)).unwrap();
        assert_eq!(beam[0].tokens, vec![3, 4, EOS]);
        assert!(beam[0].terminated);
        assert!(beam[0].logprob.abs() < 1e-6);
        assert!((beam[0].rescore() - beam[0].logprob).abs() < 1e-9);
        for w in beam.windows(2) {
            assert!(w[0].logprob >= w[1].logprob);
        }
    }

    #[test]
    fn ties_prefer_lower_ids() {
        let m = Bigram {
            table: vec![vec![0.0; 4]; 4],
        };
        let g = greedy(&m, 3).unwrap();
        assert_eq!(g.tokens, vec![0, 0, 0]);
        let beam = beam_search(&m, &BeamConfig::new(1, 3)).unwrap();
        assert_eq!(beam[0].tokens, g.tokens);
    }

    #[test]
    fn rejects_empty_beam() {
        let m = Bigram {
            table: vec![vec![0.0; 4]; 4],
        };
        assert!(beam_search(&m, &BeamConfig::new(0, 3)).is_err());
        assert!(greedy(&m, 0).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let m = Bigram {
            table: (0..5)
                .map(|i| (0..5).map(|j| ((i * 7 + j * 3) % 5) as f64).collect())
                .collect(),
        };
        let cfg = BeamConfig {
            sample_seed: Some(4),
            ..BeamConfig::new(3, 4)
        };
        assert_eq!(beam_search(&m, &cfg).unwrap(), beam_search(&m, &cfg).unwrap());
    }
}
