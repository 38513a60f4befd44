use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::TokenSequence;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

/// Suffix marking the last symbol of a word, so detokenization can restore
/// word boundaries.
pub const END_OF_WORD: &str = "</w>";

const RESERVED: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// Subword vocabulary learned by greedy pair merging.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    index: HashMap<String, usize>,
    ranks: HashMap<(String, String), usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            tokens: v.tokens,
            merges: v.merges,
        }
    }
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        Vocabulary::from_parts(f.tokens, f.merges)
    }
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let last = chars.len() - 1;
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i == last {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn merge_word(symbols: &[String], pair: &(String, String)) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Learns merges until the vocabulary holds `target_size` tokens or no
/// adjacent pair is left. The most frequent pair wins; ties go to the
/// lexicographically smallest pair.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Vocabulary> {
    if target_size < 4 {
        return Err(Error::invalid(format!(
            "vocabulary size must be at least 4, got {target_size}"
        )));
    }
    let mut word_freq: BTreeMap<&str, usize> = BTreeMap::new();
    for line in corpus {
        for w in line.as_ref().split_whitespace() {
            *word_freq.entry(w).or_default() += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }

    let mut words: Vec<(Vec<String>, usize)> = word_freq.iter().map(|(w, &f)| (word_symbols(w), f)).collect();
    let mut alphabet: Vec<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
    alphabet.sort();
    alphabet.dedup();

    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    if tokens.len() + alphabet.len() > target_size {
        return Err(Error::invalid(format!(
            "vocabulary size {target_size} cannot hold the {} base symbols",
            alphabet.len()
        )));
    }
    tokens.extend(alphabet);

    let mut merges = Vec::new();
    while tokens.len() < target_size {
        let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (syms, f) in &words {
            for w in syms.windows(2) {
                *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += f;
            }
        }
        // BTreeMap iterates pairs in lexicographic order; keep the first maximum.
        let Some(best) = counts
            .iter()
            .fold(None::<(&(&str, &str), usize)>, |acc, (pair, &c)| match acc {
                Some((_, bc)) if bc >= c => acc,
                _ => Some((pair, c)),
            })
            .map(|(p, _)| (p.0.to_string(), p.1.to_string()))
        else {
            break;
        };
        for (syms, _) in words.iter_mut() {
            *syms = merge_word(syms, &best);
        }
        tokens.push(format!("{}{}", best.0, best.1));
        merges.push(best);
    }
    Vocabulary::from_parts(tokens, merges)
}

impl Vocabulary {
    pub fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        if tokens.len() < 4 || tokens[..3] != RESERVED.map(String::from) {
            return Err(Error::Data(
                "vocabulary must start with <pad>, <bos>, <eos> and hold at least one symbol".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let ranks = merges.iter().enumerate().map(|(i, m)| (m.clone(), i)).collect();
        Ok(Vocabulary {
            tokens,
            merges,
            index,
            ranks,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    fn encode_word(&self, word: &str) -> Result<Vec<usize>> {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            match best {
                Some(rank) => syms = merge_word(&syms, &self.merges[rank]),
                None => break,
            }
        }
        syms.iter()
            .map(|s| {
                self.id(s)
                    .ok_or_else(|| Error::Data(format!("symbol {s:?} of word {word:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Subword ids of `text` without BOS/EOS.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        for w in text.split_whitespace() {
            ids.extend(self.encode_word(w)?);
        }
        Ok(ids)
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        TokenSequence::from_body(&self.encode(text)?)
    }

    /// Text of a list of ids; reserved ids are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        for &id in ids {
            if id <= EOS {
                continue;
            }
            if let Some(t) = self.token(id) {
                s.push_str(t);
            }
        }
        s.replace(END_OF_WORD, " ").trim_end().to_string()
    }

    pub fn detokenize(&self, seq: &TokenSequence) -> String {
        self.decode(seq.body())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_symbol_corpus() {
        let v = build_vocab(&["a a a"], 4).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<bos>", "<eos>", "a</w>"]);
        assert!(v.merges().is_empty());
    }

    #[test]
    fn learns_the_only_pair() {
        // base symbols: "a", "b</w>"; the single merge needs a sixth slot.
        let v = build_vocab(&["ab ab"], 6).unwrap();
        assert_eq!(v.merges(), &[("a".to_string(), "b</w>".to_string())]);
        assert_eq!(v.encode("ab").unwrap(), vec![v.id("ab</w>").unwrap()]);

        let small = build_vocab(&["ab ab"], 5).unwrap();
        assert!(small.merges().is_empty());
    }

    #[test]
    fn ties_break_lexicographically() {
        // ("a","b</w>") and ("c","d</w>") both occur twice.
        let v = build_vocab(&["cd ab ab cd"], 9).unwrap();
        assert_eq!(v.merges()[0], ("a".to_string(), "b</w>".to_string()));
        assert_eq!(v.merges()[1], ("c".to_string(), "d</w>".to_string()));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(build_vocab(&["a"], 3).is_err());
        assert!(build_vocab::<&str>(&[], 10).is_err());
        assert!(build_vocab(&["   "], 10).is_err());
        assert!(build_vocab(&["abcdef"], 5).is_err());
    }

    #[test]
    fn stops_when_no_pairs_remain() {
        let v = build_vocab(&["the cat sat"], 500).unwrap();
        for w in ["the", "cat", "sat"] {
            assert_eq!(v.encode(w).unwrap().len(), 1);
        }
        assert!(v.len() < 500);
    }

    #[test]
    fn round_trip_and_unknown_symbol() {
        let corpus = ["a red ball and a blue cube", "there is a green star"];
        let v = build_vocab(&corpus, 30).unwrap();
        for line in corpus {
            let seq = v.tokenize(line).unwrap();
            assert_eq!(v.detokenize(&seq), line);
            assert_eq!(v.tokenize(&v.detokenize(&seq)).unwrap(), seq);
        }
        assert!(v.tokenize("zebra").is_err());
    }

    #[test]
    fn serde_round_trip() {
        let v = build_vocab(&["a red ball and a blue cube"], 25).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(v, back);
    }
}
