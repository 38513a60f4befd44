//! Tokenization, synthetic captioning data, and on-disk data formats.

mod captions;
mod features;
mod synth;
mod vocab;

pub use captions::{read_captions, write_captions, CaptionRecord};
pub use features::{decode_features, encode_features, read_features, write_features, FEATURE_MAGIC, FEATURE_VERSION};
pub use synth::{
    generate_synthetic_dataset, pair_embedding, projection, SynthConfig, SynthImage, COLORS, OBJECTS, TEMPLATES,
};
pub use vocab::{build_vocab, Vocabulary, BOS, END_OF_WORD, EOS, PAD};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tokenized caption: `BOS w1 .. wn EOS PAD*`, with `mask` set on every
/// non-padding position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<usize>,
    mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, mask: Vec<bool>) -> Result<Self> {
        if ids.len() != mask.len() {
            return Err(Error::invalid("token ids and mask differ in length"));
        }
        if ids.first() != Some(&BOS) || !mask[0] {
            return Err(Error::invalid("token sequence must begin with BOS"));
        }
        let valid = mask.iter().take_while(|&&m| m).count();
        if mask[valid..].iter().any(|&m| m) {
            return Err(Error::invalid("mask must be a prefix of ones"));
        }
        let eos: Vec<usize> = (0..valid).filter(|&i| ids[i] == EOS).collect();
        if eos != [valid - 1] {
            return Err(Error::invalid("exactly one EOS must end the valid tokens"));
        }
        if ids[..valid].contains(&PAD) {
            return Err(Error::invalid("PAD before EOS"));
        }
        Ok(TokenSequence { ids, mask })
    }

    /// `BOS body EOS`, no padding.
    pub fn from_body(body: &[usize]) -> Result<Self> {
        let mut ids = Vec::with_capacity(body.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(body);
        ids.push(EOS);
        let n = ids.len();
        TokenSequence::new(ids, vec![true; n])
    }

    pub fn padded(&self, len: usize) -> Result<Self> {
        if len < self.valid_len() {
            return Err(Error::invalid(format!(
                "cannot pad {} tokens into length {len}",
                self.valid_len()
            )));
        }
        let mut ids = self.ids[..self.valid_len()].to_vec();
        let mut mask = vec![true; ids.len()];
        ids.resize(len, PAD);
        mask.resize(len, false);
        Ok(TokenSequence { ids, mask })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of masked-in tokens, BOS and EOS included.
    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Tokens strictly between BOS and EOS.
    pub fn body(&self) -> &[usize] {
        &self.ids[1..self.valid_len() - 1]
    }

    /// Teacher-forcing inputs: every position whose successor is valid.
    pub fn inputs(&self) -> &[usize] {
        &self.ids[..self.len() - 1]
    }

    /// Next-token targets aligned with [`Self::inputs`].
    pub fn targets(&self) -> &[usize] {
        &self.ids[1..]
    }

    pub fn target_mask(&self) -> &[bool] {
        &self.mask[1..]
    }
}

const SPLIT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Visual input: `grid_size` feature vectors of `dim` values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub id: u64,
    pub grid_size: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(id: u64, grid_size: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if grid_size == 0 || dim == 0 {
            return Err(Error::invalid("feature grid extents must be positive"));
        }
        if data.len() != grid_size * dim {
            return Err(Error::invalid(format!(
                "feature grid {grid_size}x{dim} needs {} values, got {}",
                grid_size * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("feature grid {id} has non-finite entries")));
        }
        Ok(FeatureGrid {
            id,
            grid_size,
            dim,
            data,
        })
    }

    pub fn cell(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionedSample {
    pub features: FeatureGrid,
    pub references: Vec<TokenSequence>,
    /// Reference captions as text, used by the metrics.
    pub reference_text: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl Splits {
    /// Deterministic partition of `ids` into disjoint train/val/test sets.
    pub fn partition(ids: &[u64], num_val: usize, num_test: usize, seed: u64) -> Result<Self> {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;

        if num_val + num_test >= ids.len() {
            return Err(Error::Config(format!(
                "{} images cannot hold {num_val} val + {num_test} test images and a training set",
                ids.len()
            )));
        }
        let mut order = ids.to_vec();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
        order.shuffle(&mut rng);
        let mut val = order[..num_val].to_vec();
        let mut test = order[num_val..num_val + num_test].to_vec();
        let mut train = order[num_val + num_test..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        Ok(Splits { train, val, test })
    }
}

/// Tokenized samples grouped by split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<CaptionedSample>,
    pub val: Vec<CaptionedSample>,
    pub test: Vec<CaptionedSample>,
}

impl Dataset {
    /// Joins feature grids with their caption records by image id.
    pub fn assemble(
        features: Vec<FeatureGrid>,
        captions: &[CaptionRecord],
        vocab: &Vocabulary,
        splits: &Splits,
    ) -> Result<Self> {
        use std::collections::HashMap;

        let refs: HashMap<u64, &CaptionRecord> = captions.iter().map(|c| (c.id, c)).collect();
        let mut by_id: HashMap<u64, CaptionedSample> = HashMap::new();
        for f in features {
            let rec = refs
                .get(&f.id)
                .ok_or_else(|| Error::Data(format!("image {} has no captions", f.id)))?;
            let references = rec.refs.iter().map(|r| vocab.tokenize(r)).collect::<Result<Vec<_>>>()?;
            let reference_text = references.iter().map(|r| vocab.detokenize(r)).collect();
            by_id.insert(
                f.id,
                CaptionedSample {
                    features: f,
                    references,
                    reference_text,
                },
            );
        }
        let take = |ids: &[u64]| -> Result<Vec<CaptionedSample>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id)
                        .cloned()
                        .ok_or_else(|| Error::Data(format!("split lists unknown image {id}")))
                })
                .collect()
        };
        Ok(Dataset {
            train: take(&splits.train)?,
            val: take(&splits.val)?,
            test: take(&splits.test)?,
        })
    }
}

/// A generated corpus with everything needed to train on it.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthBundle {
    pub features: Vec<FeatureGrid>,
    pub captions: Vec<CaptionRecord>,
    pub vocab: Vocabulary,
    pub splits: Splits,
}

impl SynthBundle {
    /// Generates images, learns a vocabulary of up to `vocab_size` tokens
    /// from all captions and partitions the ids.
    pub fn generate(config: &SynthConfig, vocab_size: usize, num_val: usize, num_test: usize) -> Result<Self> {
        let images = generate_synthetic_dataset(config)?;
        let corpus: Vec<&str> = images
            .iter()
            .flat_map(|im| im.captions.iter().map(String::as_str))
            .collect();
        let vocab = build_vocab(&corpus, vocab_size).map_err(|e| Error::Config(e.to_string()))?;
        let ids: Vec<u64> = images.iter().map(|im| im.id).collect();
        let splits = Splits::partition(&ids, num_val, num_test, config.seed)?;
        let captions = images
            .iter()
            .map(|im| CaptionRecord {
                id: im.id,
                refs: im.captions.clone(),
            })
            .collect();
        let features = images.into_iter().map(|im| im.features).collect();
        Ok(SynthBundle {
            features,
            captions,
            vocab,
            splits,
        })
    }

    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::assemble(self.features.clone(), &self.captions, &self.vocab, &self.splits)
    }
}
