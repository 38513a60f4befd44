//! BLEU, ROUGE-L and CIDEr-D over lowercase whitespace tokens.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};

pub const CIDER_SIGMA: f64 = 6.0;
pub const ROUGE_BETA: f64 = 1.2;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Score {
    pub name: String,
    pub value: f64,
    pub per_image: Option<Vec<f64>>,
}

pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

type Counts = BTreeMap<Vec<String>, usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts {
    let mut out = Counts::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_default() += 1;
        }
    }
    out
}

fn check_aligned(candidates: &[String], references: &[Vec<String>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::invalid("empty candidate list"));
    }
    if candidates.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(|r| r.is_empty()) {
        return Err(Error::invalid(format!("image {i} has no references")));
    }
    Ok(())
}

/// Corpus BLEU-`n`: geometric mean of clipped precisions for orders `1..=n`
/// times the brevity penalty, using the closest reference length per image
/// (shorter on ties).
pub fn bleu(candidates: &[String], references: &[Vec<String>], n: usize) -> Result<Score> {
    check_aligned(candidates, references)?;
    if n == 0 {
        return Err(Error::invalid("BLEU order must be at least 1"));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, refs) in candidates.iter().zip(references) {
        let c = words(cand);
        let rs: Vec<Vec<String>> = refs.iter().map(|r| words(r)).collect();
        cand_len += c.len();
        ref_len += rs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(c.len()), l))
            .unwrap();
        for k in 1..=n {
            let cc = ngrams(&c, k);
            let mut max_ref = Counts::new();
            for r in &rs {
                for (g, cnt) in ngrams(r, k) {
                    let e = max_ref.entry(g).or_default();
                    *e = (*e).max(cnt);
                }
            }
            for (g, cnt) in cc {
                matched[k - 1] += cnt.min(max_ref.get(&g).copied().unwrap_or(0));
                total[k - 1] += cnt;
            }
        }
    }
    let value = if matched.contains(&0) {
        0.0
    } else {
        let log_p: f64 = matched
            .iter()
            .zip(&total)
            .map(|(&m, &t)| (m as f64 / t as f64).ln())
            .sum::<f64>()
            / n as f64;
        let bp = if cand_len > ref_len {
            1.0
        } else {
            (1.0 - ref_len as f64 / cand_len as f64).exp()
        };
        bp * log_p.exp()
    };
    Ok(Score {
        name: format!("BLEU-{n}"),
        value,
        per_image: None,
    })
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_f(c: &[String], r: &[String]) -> f64 {
    let l = lcs_len(c, r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rec = l as f64 / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

/// ROUGE-L F-measure, best reference per image, averaged over images.
pub fn rouge_l(candidates: &[String], references: &[Vec<String>]) -> Result<Score> {
    check_aligned(candidates, references)?;
    let per: Vec<f64> = candidates
        .iter()
        .zip(references)
        .map(|(cand, refs)| {
            let c = words(cand);
            refs.iter().map(|r| rouge_f(&c, &words(r))).fold(0.0, f64::max)
        })
        .collect();
    Ok(Score {
        name: "ROUGE-L".into(),
        value: per.iter().sum::<f64>() / per.len() as f64,
        per_image: Some(per),
    })
}

/// Document frequencies of 1..4-grams over a reference corpus, one document
/// per image.
#[derive(Clone, Debug, PartialEq)]
pub struct DocFreq {
    df: BTreeMap<Vec<String>, f64>,
    log_images: f64,
}

impl DocFreq {
    pub fn build(references: &[Vec<String>]) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::invalid("cannot build document frequencies from an empty corpus"));
        }
        let mut df = BTreeMap::new();
        for refs in references {
            let mut seen = BTreeSet::new();
            for r in refs {
                let w = words(r);
                for n in 1..=4 {
                    seen.extend(ngrams(&w, n).into_keys());
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        if df.is_empty() {
            return Err(Error::invalid("reference corpus has no n-grams"));
        }
        Ok(DocFreq {
            df,
            log_images: (references.len() as f64).ln(),
        })
    }

    pub fn num_images(&self) -> f64 {
        self.log_images.exp()
    }

    pub fn get(&self, gram: &[String]) -> f64 {
        self.df.get(gram).copied().unwrap_or(0.0)
    }

    fn idf(&self, gram: &[String]) -> f64 {
        self.log_images - self.get(gram).max(1.0).ln()
    }
}

struct TfIdf {
    vecs: [BTreeMap<Vec<String>, f64>; 4],
    norms: [f64; 4],
    length: f64,
}

impl TfIdf {
    fn new(text: &str, df: &DocFreq) -> Self {
        let w = words(text);
        let mut vecs: [BTreeMap<Vec<String>, f64>; 4] = Default::default();
        let mut norms = [0.0; 4];
        let mut length = 0.0;
        for n in 0..4 {
            for (g, tf) in ngrams(&w, n + 1) {
                let v = tf as f64 * df.idf(&g);
                norms[n] += v * v;
                if n == 1 {
                    length += tf as f64;
                }
                vecs[n].insert(g, v);
            }
            norms[n] = norms[n].sqrt();
        }
        TfIdf { vecs, norms, length }
    }

    fn sim(&self, r: &TfIdf) -> [f64; 4] {
        let delta = self.length - r.length;
        let mut val = [0.0; 4];
        for (n, v) in val.iter_mut().enumerate() {
            for (g, &vh) in &self.vecs[n] {
                if let Some(&vr) = r.vecs[n].get(g) {
                    *v += vh.min(vr) * vr;
                }
            }
            if self.norms[n] != 0.0 && r.norms[n] != 0.0 {
                *v /= self.norms[n] * r.norms[n];
            }
            *v *= (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        }
        val
    }
}

/// CIDEr-D of one candidate against its references.
pub fn cider_d_one(candidate: &str, refs: &[String], df: &DocFreq) -> f64 {
    if refs.is_empty() {
        return 0.0;
    }
    let h = TfIdf::new(candidate, df);
    let mut acc = [0.0; 4];
    for r in refs {
        let s = h.sim(&TfIdf::new(r, df));
        for n in 0..4 {
            acc[n] += s[n];
        }
    }
    acc.iter().sum::<f64>() / 4.0 / refs.len() as f64 * 10.0
}

pub fn cider_d(candidates: &[String], references: &[Vec<String>], df: &DocFreq) -> Result<Score> {
    check_aligned(candidates, references)?;
    let per: Vec<f64> = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| cider_d_one(c, r, df))
        .collect();
    Ok(Score {
        name: "CIDEr-D".into(),
        value: per.iter().sum::<f64>() / per.len() as f64,
        per_image: Some(per),
    })
}

/// SCST reward: CIDEr-D of a caption against one image's references.
pub fn reward(caption: &str, refs: &[String], df: &DocFreq) -> f64 {
    cider_d_one(caption, refs, df)
}

/// BLEU-1..4, ROUGE-L and CIDEr-D keyed by metric name. The document
/// frequencies come from `references` themselves.
pub fn evaluate_all(candidates: &[String], references: &[Vec<String>]) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for n in 1..=4 {
        let s = bleu(candidates, references, n)?;
        out.insert(s.name, s.value);
    }
    let s = rouge_l(candidates, references)?;
    out.insert(s.name, s.value);
    let df = DocFreq::build(references)?;
    let s = cider_d(candidates, references, &df)?;
    out.insert(s.name, s.value);
    Ok(out)
}
