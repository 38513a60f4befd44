//! Encoder-decoder captioning network.
//!
//! The encoder runs bidirectional self-attention over feature cells, with
//! learned memory slots appended to the keys and values of every layer. The
//! decoder is a causal transformer stack with sinusoidal positions; with
//! `mesh` enabled, each decoder layer cross-attends to every encoder layer and
//! mixes the results through sigmoid gates.

mod checkpoint;
mod config;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use params::{param_layout, Init, ModelParams};

use std::collections::HashMap;
use std::sync::Arc;

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::data::{FeatureGrid, BOS};
use crate::decoding::StepModel;
use crate::error::{Error, Result};

/// How mesh cross-attention outputs are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateMode {
    #[default]
    Learned,
    /// Use only the last encoder layer's cross-attention, ungated.
    PinnedLast,
}

/// Parameter handles inside one graph.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Per-layer encoder states, each `[G × model_dim]`.
#[derive(Clone, Debug)]
pub struct EncoderOutput<T> {
    pub layers: Vec<Arc<Tensor<T>>>,
}

impl<T: Real> EncoderOutput<T> {
    /// `[L_enc, G, model_dim]`
    pub fn shape(&self) -> [usize; 3] {
        let (g, d) = self.layers[0].dims2().unwrap();
        [self.layers.len(), g, d]
    }
}

/// Sinusoidal position table rows `offset..offset + len`.
pub fn sinusoidal_positions<T: Real>(offset: usize, len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for pos in offset..offset + len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            data.push(T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::from_parts(vec![len, d], data)
}

/// `[t × t]` additive mask: 0 where key ≤ query, a large negative value above.
pub fn causal_mask<T: Real>(t: usize) -> Tensor<T> {
    let neg = T::of(-1e9);
    let data = (0..t * t)
        .map(|k| if k % t > k / t { neg } else { T::zero() })
        .collect();
    Tensor::from_parts(vec![t, t], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionModel<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    pub gate_mode: GateMode,
}

impl<T: Real> CaptionModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(CaptionModel {
            config,
            params,
            gate_mode: GateMode::Learned,
        })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config)?;
        Ok(CaptionModel {
            config,
            params,
            gate_mode: GateMode::Learned,
        })
    }

    /// Inserts every parameter as a leaf. `trainable == false` makes them
    /// constants, which is how the target network enters a loss graph.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        self.bind_matching(g, trainable, |_| true)
    }

    fn bind_matching(&self, g: &mut Graph<T>, trainable: bool, keep: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .filter(|(name, _)| keep(name))
            .map(|(name, t)| {
                let v = if trainable {
                    g.param_shared(Arc::clone(t))
                } else {
                    g.constant_shared(Arc::clone(t))
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    fn linear(&self, g: &mut Graph<T>, b: &Bound, name: &str, x: Var) -> Result<Var> {
        let w = b.get(&format!("{name}.w"))?;
        let bias = b.get(&format!("{name}.b"))?;
        let y = g.matmul(x, w)?;
        g.add_row(y, bias)
    }

    fn norm(&self, g: &mut Graph<T>, b: &Bound, name: &str, x: Var) -> Result<Var> {
        let gain = b.get(&format!("{name}.g"))?;
        let bias = b.get(&format!("{name}.b"))?;
        g.layer_norm(x, gain, bias)
    }

    fn dropout(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.dropout(x, self.config.dropout)
    }

    fn feedforward(&self, g: &mut Graph<T>, b: &Bound, name: &str, x: Var) -> Result<Var> {
        let h = self.linear(g, b, &format!("{name}.1"), x)?;
        let h = g.relu(h);
        self.linear(g, b, &format!("{name}.2"), h)
    }

    /// Multi-head attention of `query_in` over already-projected keys/values.
    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        name: &str,
        query_in: Var,
        keys: Var,
        values: Var,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let q = self.linear(g, b, &format!("{name}.q"), query_in)?;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.num_heads);
        for h in 0..self.config.num_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(keys, h * dh, dh)?;
            let vh = g.slice_cols(values, h * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add_const(scores, m)?;
            }
            let att = g.softmax(scores);
            heads.push(g.matmul(att, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        self.linear(g, b, &format!("{name}.o"), merged)
    }

    fn check_grid(&self, grid: &FeatureGrid) -> Result<()> {
        if grid.dim != self.config.feature_dim {
            return Err(Error::Shape {
                op: "encode",
                left: vec![grid.grid_size, grid.dim],
                right: vec![self.config.feature_dim],
            });
        }
        Ok(())
    }

    /// Runs the encoder and returns every layer's output.
    pub fn encode_graph(&self, g: &mut Graph<T>, b: &Bound, grid: &FeatureGrid) -> Result<Vec<Var>> {
        self.check_grid(grid)?;
        let data = grid.data.iter().map(|&v| <T as Real>::from_f32(v)).collect();
        let input = g.constant(Tensor::matrix(grid.grid_size, grid.dim, data)?);
        let x = self.linear(g, b, "enc.in", input)?;
        let x = g.relu(x);
        let x = self.dropout(g, x)?;
        let mut x = self.norm(g, b, "enc.in.ln", x)?;

        let mut outputs = Vec::with_capacity(self.config.num_encoder_layers);
        for l in 0..self.config.num_encoder_layers {
            let p = format!("enc.{l}");
            let mut k = self.linear(g, b, &format!("{p}.attn.k"), x)?;
            let mut v = self.linear(g, b, &format!("{p}.attn.v"), x)?;
            if self.config.num_memory_slots > 0 {
                let mk = b.get(&format!("{p}.mem.k"))?;
                let mv = b.get(&format!("{p}.mem.v"))?;
                k = g.concat_rows(&[k, mk])?;
                v = g.concat_rows(&[v, mv])?;
            }
            let a = self.attend(g, b, &format!("{p}.attn"), x, k, v, None)?;
            let a = self.dropout(g, a)?;
            let r = g.add(x, a)?;
            let y = self.norm(g, b, &format!("{p}.ln1"), r)?;
            let f = self.feedforward(g, b, &format!("{p}.ff"), y)?;
            let f = self.dropout(g, f)?;
            let r = g.add(y, f)?;
            x = self.norm(g, b, &format!("{p}.ln2"), r)?;
            outputs.push(x);
        }
        Ok(outputs)
    }

    /// Cross-attention keys/values for decoder layer `l`: one pair per
    /// encoder layer when mesh is on, otherwise only the last one.
    fn cross_kv(&self, g: &mut Graph<T>, b: &Bound, l: usize, enc: &[Var]) -> Result<Vec<(Var, Var)>> {
        let used: &[Var] = if self.config.mesh && self.gate_mode == GateMode::Learned {
            enc
        } else {
            &enc[enc.len() - 1..]
        };
        used.iter()
            .map(|&e| {
                let k = self.linear(g, b, &format!("dec.{l}.cross.k"), e)?;
                let v = self.linear(g, b, &format!("dec.{l}.cross.v"), e)?;
                Ok((k, v))
            })
            .collect()
    }

    /// One decoder layer over new rows `x`. `past` holds the projected
    /// self-attention keys/values of earlier positions. Returns the layer
    /// output and the full key/value matrices including the new rows.
    #[allow(clippy::too_many_arguments)]
    fn decoder_layer(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        l: usize,
        x: Var,
        past: Option<(Var, Var)>,
        mask: Option<&Tensor<T>>,
        cross: &[(Var, Var)],
    ) -> Result<(Var, Var, Var)> {
        let p = format!("dec.{l}");
        let k_new = self.linear(g, b, &format!("{p}.self.k"), x)?;
        let v_new = self.linear(g, b, &format!("{p}.self.v"), x)?;
        let (k, v) = match past {
            Some((pk, pv)) => (g.concat_rows(&[pk, k_new])?, g.concat_rows(&[pv, v_new])?),
            None => (k_new, v_new),
        };
        let s = self.attend(g, b, &format!("{p}.self"), x, k, v, mask)?;
        let s = self.dropout(g, s)?;
        let r = g.add(x, s)?;
        let y = self.norm(g, b, &format!("{p}.ln1"), r)?;

        let c = if cross.len() == 1 {
            let (ck, cv) = cross[0];
            self.attend(g, b, &format!("{p}.cross"), y, ck, cv, None)?
        } else {
            let mut acc: Option<Var> = None;
            for (e, &(ck, cv)) in cross.iter().enumerate() {
                let ce = self.attend(g, b, &format!("{p}.cross"), y, ck, cv, None)?;
                let gate = self.linear(g, b, &format!("{p}.gate.{e}"), y)?;
                let gate = g.sigmoid(gate);
                let gated = g.mul(gate, ce)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, gated)?,
                    None => gated,
                });
            }
            let sum = acc.expect("mesh has at least one encoder layer");
            g.scale(sum, 1.0 / cross.len() as f64)
        };
        let c = self.dropout(g, c)?;
        let r = g.add(y, c)?;
        let z = self.norm(g, b, &format!("{p}.ln2"), r)?;
        let f = self.feedforward(g, b, &format!("{p}.ff"), z)?;
        let f = self.dropout(g, f)?;
        let r = g.add(z, f)?;
        let out = self.norm(g, b, &format!("{p}.ln3"), r)?;
        Ok((out, k, v))
    }

    fn embed(&self, g: &mut Graph<T>, b: &Bound, ids: &[usize], offset: usize) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let table = b.get("dec.embed")?;
        let e = g.embedding(table, ids)?;
        let pe = sinusoidal_positions(offset, ids.len(), self.config.model_dim);
        let x = g.add_const(e, &pe)?;
        self.dropout(g, x)
    }

    /// Teacher-forced logits `[T × N]` for input tokens `inputs` (BOS first).
    pub fn decode_graph(&self, g: &mut Graph<T>, b: &Bound, enc: &[Var], inputs: &[usize]) -> Result<Var> {
        if inputs.first() != Some(&BOS) {
            return Err(Error::invalid("decoder input must start with BOS"));
        }
        if inputs.len() > self.config.max_length {
            return Err(Error::invalid(format!(
                "decoder input of {} tokens exceeds max_length {}",
                inputs.len(),
                self.config.max_length
            )));
        }
        let t = inputs.len();
        let mask = causal_mask::<T>(t);
        let mut x = self.embed(g, b, inputs, 0)?;
        for l in 0..self.config.num_decoder_layers {
            let cross = self.cross_kv(g, b, l, enc)?;
            x = self.decoder_layer(g, b, l, x, None, Some(&mask), &cross)?.0;
        }
        self.linear(g, b, "dec.out", x)
    }

    /// Eval-mode encoder pass.
    pub fn encode(&self, grid: &FeatureGrid) -> Result<EncoderOutput<T>> {
        let mut g = Graph::eval();
        let b = self.bind_matching(&mut g, false, |n| n.starts_with("enc."));
        let outs = self.encode_graph(&mut g, &b, grid)?;
        Ok(EncoderOutput {
            layers: outs.iter().map(|&v| g.shared_value(v)).collect(),
        })
    }

    fn bind_encoder_output(g: &mut Graph<T>, enc: &EncoderOutput<T>) -> Vec<Var> {
        enc.layers.iter().map(|t| g.constant_shared(Arc::clone(t))).collect()
    }

    /// Eval-mode teacher-forced logits `[T × N]`.
    pub fn forward_teacher_forced(&self, enc: &EncoderOutput<T>, inputs: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::eval();
        let b = self.bind_matching(&mut g, false, |n| n.starts_with("dec."));
        let e = Self::bind_encoder_output(&mut g, enc);
        let logits = self.decode_graph(&mut g, &b, &e, inputs)?;
        Ok(g.value(logits).clone())
    }

    /// Next-token logits after `prefix`, which must start with BOS.
    pub fn decode_step(&self, prefix: &[usize], enc: &EncoderOutput<T>) -> Result<Vec<T>> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::invalid("prefix must start with BOS"));
        }
        if prefix.len() >= self.config.max_length {
            return Err(Error::invalid(format!(
                "prefix of {} tokens leaves no room under max_length {}",
                prefix.len(),
                self.config.max_length
            )));
        }
        let logits = self.forward_teacher_forced(enc, prefix)?;
        Ok(logits.row(prefix.len() - 1).to_vec())
    }

    /// Incremental decoder for `grid` with cached keys and values.
    pub fn incremental(&self, grid: &FeatureGrid) -> Result<IncrementalDecoder<'_, T>> {
        let enc = self.encode(grid)?;
        self.incremental_from(&enc)
    }

    pub fn incremental_from(&self, enc: &EncoderOutput<T>) -> Result<IncrementalDecoder<'_, T>> {
        let mut g = Graph::eval();
        let b = self.bind_matching(&mut g, false, |n| n.contains(".cross."));
        let e = Self::bind_encoder_output(&mut g, enc);
        let mut cross = Vec::with_capacity(self.config.num_decoder_layers);
        for l in 0..self.config.num_decoder_layers {
            let kv = self.cross_kv(&mut g, &b, l, &e)?;
            cross.push(
                kv.into_iter()
                    .map(|(k, v)| (g.shared_value(k), g.shared_value(v)))
                    .collect(),
            );
        }
        Ok(IncrementalDecoder { model: self, cross })
    }
}

/// Cached attention keys and values.
type KvPair<T> = (Arc<Tensor<T>>, Arc<Tensor<T>>);

/// Decoding state after consuming a prefix.
#[derive(Clone, Debug)]
pub struct DecoderState<T> {
    pub position: usize,
    layers: Vec<KvPair<T>>,
}

/// Eval-mode decoder that reuses self-attention keys/values across steps.
pub struct IncrementalDecoder<'a, T> {
    model: &'a CaptionModel<T>,
    #[allow(clippy::type_complexity)]
    cross: Vec<Vec<KvPair<T>>>,
}

impl<T: Real> IncrementalDecoder<'_, T> {
    /// Feeds `token` at the next position and returns next-token logits.
    pub fn feed(&self, state: Option<&DecoderState<T>>, token: usize) -> Result<(DecoderState<T>, Vec<T>)> {
        let m = self.model;
        let position = state.map_or(0, |s| s.position);
        if position >= m.config.max_length {
            return Err(Error::invalid("decoding past max_length"));
        }
        let mut g = Graph::eval();
        let b = m.bind_matching(&mut g, false, |n| {
            n.starts_with("dec.") && !n.contains(".cross.k") && !n.contains(".cross.v")
        });
        let mut x = m.embed(&mut g, &b, &[token], position)?;
        let mut layers = Vec::with_capacity(m.config.num_decoder_layers);
        for l in 0..m.config.num_decoder_layers {
            let past = state.map(|s| {
                let (k, v) = &s.layers[l];
                (g.constant_shared(Arc::clone(k)), g.constant_shared(Arc::clone(v)))
            });
            let cross: Vec<(Var, Var)> = self.cross[l]
                .iter()
                .map(|(k, v)| (g.constant_shared(Arc::clone(k)), g.constant_shared(Arc::clone(v))))
                .collect();
            let (out, k, v) = m.decoder_layer(&mut g, &b, l, x, past, None, &cross)?;
            layers.push((g.shared_value(k), g.shared_value(v)));
            x = out;
        }
        let logits = m.linear(&mut g, &b, "dec.out", x)?;
        Ok((
            DecoderState {
                position: position + 1,
                layers,
            },
            g.value(logits).data().to_vec(),
        ))
    }
}

impl<T: Real> StepModel for IncrementalDecoder<'_, T> {
    type State = DecoderState<T>;

    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn start(&self) -> Result<(Self::State, Vec<f64>)> {
        let (s, l) = self.feed(None, BOS)?;
        Ok((s, l.iter().map(|v| v.f64()).collect()))
    }

    fn advance(&self, state: &Self::State, token: usize) -> Result<(Self::State, Vec<f64>)> {
        let (s, l) = self.feed(Some(state), token)?;
        Ok((s, l.iter().map(|v| v.f64()).collect()))
    }
}
