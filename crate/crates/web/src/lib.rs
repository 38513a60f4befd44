//! Browser bindings over the captioning core: score a caption against a
//! synthetic image's references, pair two beams by optimal assignment, and
//! plot the learning-rate and EMA schedules.

use std::collections::BTreeMap;

use mtcaption::assignment::{hungarian, pairing_cost, BagEmbedder};
use mtcaption::data::{
    build_vocab, generate_synthetic_dataset, SynthConfig, SynthImage, TokenSequence, Vocabulary, EOS,
};
use mtcaption::decoding::Hypothesis;
use mtcaption::metrics::{bleu, cider_d_one, rouge_l, DocFreq};
use mtcaption::train::noam_lr;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[derive(Serialize)]
pub struct ImageView {
    pub id: u64,
    pub objects: Vec<String>,
    pub references: Vec<String>,
}

#[derive(Serialize)]
pub struct PairingView {
    pub cost: Vec<Vec<f64>>,
    pub perm: Vec<usize>,
    pub total: f64,
}

#[derive(Serialize)]
pub struct ScheduleView {
    pub lr: Vec<f64>,
    /// Weight of the online state after step `s` inside the final target.
    pub ema_weight: Vec<f64>,
}

/// A generated corpus with its vocabulary, document frequencies and
/// caption embedder.
#[wasm_bindgen]
pub struct Demo {
    images: Vec<SynthImage>,
    vocab: Vocabulary,
    df: DocFreq,
    embedder: BagEmbedder,
}

impl Demo {
    pub fn build(seed: u64, num_images: usize) -> mtcaption::Result<Demo> {
        let cfg = SynthConfig {
            seed,
            num_images,
            ..SynthConfig::default()
        };
        let images = generate_synthetic_dataset(&cfg)?;
        let corpus: Vec<&str> = images
            .iter()
            .flat_map(|i| i.captions.iter().map(String::as_str))
            .collect();
        let vocab = build_vocab(&corpus, 200)?;
        let refs: Vec<Vec<String>> = images.iter().map(|i| i.captions.clone()).collect();
        let df = DocFreq::build(&refs)?;
        let seqs = corpus
            .iter()
            .map(|c| vocab.tokenize(c))
            .collect::<mtcaption::Result<Vec<TokenSequence>>>()?;
        let embedder = BagEmbedder::from_corpus(vocab.len(), &seqs);
        Ok(Demo {
            images,
            vocab,
            df,
            embedder,
        })
    }

    fn get(&self, id: usize) -> mtcaption::Result<&SynthImage> {
        self.images.get(id).ok_or_else(|| {
            mtcaption::Error::InvalidArgument(format!("image {id} out of range 0..{}", self.images.len()))
        })
    }

    pub fn image_view(&self, id: usize) -> mtcaption::Result<ImageView> {
        let im = self.get(id)?;
        Ok(ImageView {
            id: im.id,
            objects: im
                .pairs
                .iter()
                .map(|&(c, o)| format!("{} {}", mtcaption::data::COLORS[c], mtcaption::data::OBJECTS[o]))
                .collect(),
            references: im.captions.clone(),
        })
    }

    pub fn scores(&self, id: usize, candidate: &str) -> mtcaption::Result<BTreeMap<String, f64>> {
        let refs = &self.get(id)?.captions;
        let cands = [candidate.to_string()];
        let ref_sets = [refs.clone()];
        let mut out = BTreeMap::new();
        for n in 1..=4 {
            let s = bleu(&cands, &ref_sets, n)?;
            out.insert(s.name, s.value);
        }
        let r = rouge_l(&cands, &ref_sets)?;
        out.insert(r.name, r.value);
        out.insert("CIDEr-D".to_string(), cider_d_one(candidate, refs, &self.df));
        Ok(out)
    }

    /// Pairs two beams given one caption per line; the shorter beam sets k.
    pub fn pairing(&self, target: &str, online: &str) -> mtcaption::Result<PairingView> {
        let beam = |text: &str| -> mtcaption::Result<Vec<Hypothesis>> {
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|l| {
                    let mut tokens = self.vocab.encode(l)?;
                    tokens.push(EOS);
                    Ok(Hypothesis {
                        logits: vec![Vec::new(); tokens.len()],
                        tokens,
                        logprob: 0.0,
                        terminated: true,
                    })
                })
                .collect()
        };
        let (t, o) = (beam(target)?, beam(online)?);
        let k = t.len().min(o.len());
        if k == 0 {
            return Err(mtcaption::Error::InvalidArgument(
                "each beam needs at least one caption".into(),
            ));
        }
        let cost = pairing_cost(&t[..k], &o[..k], &self.embedder);
        let a = hungarian(&cost)?;
        Ok(PairingView {
            cost,
            perm: a.perm,
            total: a.total,
        })
    }
}

pub fn schedule_view(model_dim: usize, warmup: u64, lr_scale: f64, steps: u64, momentum: f64) -> ScheduleView {
    let lr = (1..=steps).map(|s| noam_lr(s, model_dim, warmup) * lr_scale).collect();
    let ema_weight = (1..=steps)
        .map(|s| (1.0 - momentum) * momentum.powi((steps - s) as i32))
        .collect();
    ScheduleView { lr, ema_weight }
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(js_err)
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, num_images: u32) -> Result<Demo, JsError> {
        Demo::build(seed as u64, num_images as usize).map_err(js_err)
    }

    #[wasm_bindgen(js_name = numImages)]
    pub fn num_images(&self) -> u32 {
        self.images.len() as u32
    }

    /// JSON `{id, objects, references}`.
    pub fn image(&self, id: u32) -> Result<String, JsError> {
        to_json(&self.image_view(id as usize).map_err(js_err)?)
    }

    /// JSON map from metric name to score.
    #[wasm_bindgen(js_name = scoreCaption)]
    pub fn score_caption(&self, id: u32, candidate: &str) -> Result<String, JsError> {
        to_json(&self.scores(id as usize, candidate).map_err(js_err)?)
    }

    /// JSON `{cost, perm, total}`.
    #[wasm_bindgen(js_name = pairBeams)]
    pub fn pair_beams(&self, target: &str, online: &str) -> Result<String, JsError> {
        to_json(&self.pairing(target, online).map_err(js_err)?)
    }
}

/// JSON `{lr, ema_weight}` over steps `1..=steps`.
#[wasm_bindgen]
pub fn schedules(model_dim: u32, warmup: u32, lr_scale: f64, steps: u32, momentum: f64) -> Result<String, JsError> {
    if !(0.0..=1.0).contains(&momentum) || model_dim == 0 || steps == 0 {
        return Err(JsError::new("need momentum in [0, 1] and positive model_dim and steps"));
    }
    to_json(&schedule_view(
        model_dim as usize,
        warmup as u64,
        lr_scale,
        steps as u64,
        momentum,
    ))
}
