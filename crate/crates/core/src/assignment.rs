//! Optimal beam-to-beam pairing.

use crate::data::{TokenSequence, EOS};
use crate::decoding::Hypothesis;
use crate::error::{Error, Result};

/// Row `i` is matched to column `perm[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub perm: Vec<usize>,
    pub total: f64,
}

fn validate(cost: &[Vec<f64>]) -> Result<usize> {
    let k = cost.len();
    if k == 0 {
        return Err(Error::invalid("empty cost matrix"));
    }
    if let Some(r) = cost.iter().position(|row| row.len() != k) {
        return Err(Error::Shape {
            op: "hungarian",
            left: vec![k, cost[r].len()],
            right: vec![k, k],
        });
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("cost matrix has non-finite entries"));
    }
    Ok(k)
}

/// Minimum-cost perfect matching by shortest augmenting paths with
/// potentials, O(k³).
fn solve(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // p[j]: row matched to column j, 1-based, 0 = free.
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    perm
}

fn total_of(cost: &[Vec<f64>], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

/// Optimal assignment; among optimal ones, the lexicographically smallest
/// permutation (ties judged with a relative tolerance of 1e-9).
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let k = validate(cost)?;
    let best = total_of(cost, &solve(cost));
    let tol = 1e-9 * (1.0 + best.abs());

    let mut perm = Vec::with_capacity(k);
    let mut free_cols: Vec<usize> = (0..k).collect();
    let mut fixed = 0.0;
    for i in 0..k {
        let rest_rows = i + 1..k;
        let mut chosen = None;
        for (pos, &j) in free_cols.iter().enumerate() {
            let cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != j).collect();
            let rest = if cols.is_empty() {
                0.0
            } else {
                let sub: Vec<Vec<f64>> = rest_rows
                    .clone()
                    .map(|r| cols.iter().map(|&c| cost[r][c]).collect())
                    .collect();
                total_of(&sub, &solve(&sub))
            };
            if fixed + cost[i][j] + rest <= best + tol {
                chosen = Some(pos);
                break;
            }
        }
        let pos = chosen.expect("an optimal completion always exists");
        let j = free_cols.remove(pos);
        fixed += cost[i][j];
        perm.push(j);
    }
    let total = total_of(cost, &perm);
    Ok(Assignment { perm, total })
}

/// Maps a caption to a unit-norm vector of fixed dimension.
pub trait CaptionEmbedder {
    fn dim(&self) -> usize;

    /// Embedding of the caption body (without BOS/EOS).
    fn embed(&self, body: &[usize]) -> Vec<f64>;
}

/// Idf-weighted bag of token ids, L2-normalized. EOS always counts once, so
/// even an empty caption has a well-defined direction.
#[derive(Clone, Debug, PartialEq)]
pub struct BagEmbedder {
    pub idf: Vec<f64>,
}

impl BagEmbedder {
    /// Smoothed idf from a corpus of captions: ln((1 + D) / (1 + df)) + 1.
    pub fn from_corpus(vocab_size: usize, corpus: &[TokenSequence]) -> Self {
        let mut df = vec![0usize; vocab_size];
        for seq in corpus {
            let mut seen = vec![false; vocab_size];
            for &t in seq.body() {
                if t < vocab_size && !seen[t] {
                    seen[t] = true;
                    df[t] += 1;
                }
            }
        }
        let d = corpus.len() as f64;
        BagEmbedder {
            idf: df.iter().map(|&f| ((1.0 + d) / (1.0 + f as f64)).ln() + 1.0).collect(),
        }
    }

    /// Unnormalized bag vector.
    pub fn bag(&self, body: &[usize]) -> Vec<f64> {
        let mut v = vec![0.0; self.idf.len()];
        for &t in body.iter().chain(std::iter::once(&EOS)) {
            if t < v.len() {
                v[t] += self.idf[t];
            }
        }
        v
    }
}

impl CaptionEmbedder for BagEmbedder {
    fn dim(&self) -> usize {
        self.idf.len()
    }

    fn embed(&self, body: &[usize]) -> Vec<f64> {
        let mut v = self.bag(body);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// `cost[i][j] = 1 − cos(embed(target_i), embed(online_j))`, clamped to [0, 2].
pub fn pairing_cost<E: CaptionEmbedder + ?Sized>(
    target: &[Hypothesis],
    online: &[Hypothesis],
    embedder: &E,
) -> Vec<Vec<f64>> {
    let et: Vec<Vec<f64>> = target.iter().map(|h| embedder.embed(h.body())).collect();
    let eo: Vec<Vec<f64>> = online.iter().map(|h| embedder.embed(h.body())).collect();
    et.iter()
        .map(|a| eo.iter().map(|b| (1.0 - cosine(a, b)).clamp(0.0, 2.0)).collect())
        .collect()
}
