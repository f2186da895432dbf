//! Decoder-only transformer used for both the teacher and the student.
//!
//! The body maps token ids to final-normed hidden states; the head is a
//! single linear map to vocabulary logits. A contiguous run of prefix-slot
//! ids stands in for image features and is filled either from the trainable
//! `prefix_table` or from an injected override.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, normal_matrix, Binder, BlockParams, NormParams, Params, Rotary, INIT_STD};
use crate::tape::{Tape, TraceEntry, Var};
use crate::tensor::Tensor;
use crate::tokenizer::{frame_question, Tokenizer};

fn default_rope_base() -> f64 {
    10000.0
}

/// Architecture hyperparameters as written in an experiment config; the
/// vocabulary comes from the paired tokenizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    #[serde(default)]
    pub d_ffn: Option<usize>,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    pub prefix_len: usize,
    #[serde(default)]
    pub seed: u64,
    /// Optional cross-check against the tokenizer's vocabulary size.
    #[serde(default)]
    pub vocab_size: Option<usize>,
}

impl ModelSpec {
    pub fn teacher_default() -> Self {
        Self {
            n_layers: 4,
            d_hidden: 64,
            n_heads: 4,
            d_ffn: None,
            rope_base: 10000.0,
            prefix_len: 6,
            seed: 1,
            vocab_size: None,
        }
    }

    pub fn student_default() -> Self {
        Self {
            n_layers: 2,
            d_hidden: 32,
            n_heads: 2,
            d_ffn: None,
            rope_base: 10000.0,
            prefix_len: 3,
            seed: 2,
            vocab_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    pub prefix_len: usize,
    pub seed: u64,
    /// Id of the prefix-slot special in the paired tokenizer.
    pub prefix_token: usize,
}

impl ModelConfig {
    pub fn from_spec(spec: &ModelSpec, tok: &Tokenizer) -> Result<Self> {
        if let Some(v) = spec.vocab_size {
            if v != tok.vocab_size() {
                return Err(Error::config(
                    "vocab_size",
                    format!("model expects {v} but tokenizer has {}", tok.vocab_size()),
                ));
            }
        }
        let cfg = Self {
            n_layers: spec.n_layers,
            d_hidden: spec.d_hidden,
            n_heads: spec.n_heads,
            d_ffn: spec.d_ffn.unwrap_or(4 * spec.d_hidden),
            vocab_size: tok.vocab_size(),
            rope_base: spec.rope_base,
            prefix_len: spec.prefix_len,
            seed: spec.seed,
            prefix_token: tok.specials().prefix,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn head_dim(&self) -> usize {
        self.d_hidden / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_hidden == 0 || self.d_hidden % self.n_heads != 0 {
            return Err(Error::contract(format!(
                "d_hidden {} must be a positive multiple of n_heads {}",
                self.d_hidden, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::contract(format!(
                "per-head dimension {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        if self.vocab_size == 0 || self.prefix_token >= self.vocab_size {
            return Err(Error::contract("prefix token must lie inside the vocabulary"));
        }
        if self.d_ffn == 0 || !(self.rope_base > 1.0) {
            return Err(Error::contract("d_ffn must be positive and rope_base > 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P = Tensor> {
    pub embedding: P,
    pub prefix_table: P,
    pub layers: Vec<BlockParams<P>>,
    pub final_norm: NormParams<P>,
    pub head: P,
}

impl Params for ModelParams<Tensor> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}embedding"), &self.embedding);
        f(format!("{prefix}prefix_table"), &self.prefix_table);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}layers.{i}."), f);
        }
        self.final_norm.visit(&format!("{prefix}final_norm."), f);
        f(format!("{prefix}head"), &self.head);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}embedding"), &mut self.embedding);
        f(format!("{prefix}prefix_table"), &mut self.prefix_table);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}layers.{i}."), f);
        }
        self.final_norm.visit_mut(&format!("{prefix}final_norm."), f);
        f(format!("{prefix}head"), &mut self.head);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub params: ModelParams,
}

fn no_params(_: &str) -> bool {
    false
}

impl ModelWeights {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_hidden;
        let embedding = normal_matrix(&mut rng, config.vocab_size, d, INIT_STD);
        let prefix_table = normal_matrix(&mut rng, config.prefix_len, d, INIT_STD);
        let layers = (0..config.n_layers)
            .map(|_| BlockParams::init(&mut rng, d, config.d_ffn))
            .collect();
        let head = normal_matrix(&mut rng, d, config.vocab_size, INIT_STD);
        Ok(Self {
            params: ModelParams {
                embedding,
                prefix_table,
                layers,
                final_norm: NormParams::new(d),
                head,
            },
            config,
        })
    }

    pub fn bind(&self, binder: &mut Binder<'_>, prefix: &str) -> Result<ModelParams<Var>> {
        let p = &self.params;
        let embedding = binder.bind(format!("{prefix}embedding"), &p.embedding)?;
        let prefix_table = binder.bind(format!("{prefix}prefix_table"), &p.prefix_table)?;
        let layers = p
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.bind(binder, &format!("{prefix}layers.{i}.")))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = p.final_norm.bind(binder, &format!("{prefix}final_norm."))?;
        let head = binder.bind(format!("{prefix}head"), &p.head)?;
        Ok(ModelParams {
            embedding,
            prefix_table,
            layers,
            final_norm,
            head,
        })
    }

    /// Binds only the head (for reading cached hidden states).
    pub fn bind_head(&self, binder: &mut Binder<'_>, prefix: &str) -> Result<Var> {
        binder.bind(format!("{prefix}head"), &self.params.head)
    }

    /// Untracked body pass.
    pub fn hidden(&self, ids: &[usize], prefix_override: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape, &no_params);
        let p = self.bind(&mut binder, "")?;
        let po = prefix_override.map(|t| tape.constant(t.clone())).transpose()?;
        let h = body_forward(&mut tape, &self.config, &p, ids, po)?;
        Ok(tape.value(h).clone())
    }

    /// Untracked head pass.
    pub fn logits(&self, hidden: &Tensor) -> Result<Tensor> {
        if hidden.cols() != self.config.d_hidden {
            return Err(Error::ShapeMismatch {
                op: "vlm_head_forward",
                lhs: hidden.shape().to_vec(),
                rhs: self.params.head.shape().to_vec(),
            });
        }
        hidden.matmul(&self.params.head)
    }

    pub fn num_body_params(&self) -> usize {
        self.params.num_params() - self.params.head.numel()
    }

    /// Greedy decoding of a completion for `prompt`. Ties go to the lowest id;
    /// any special id (normally `eos`) ends the completion.
    pub fn generate(&self, tok: &Tokenizer, prompt: &str, max_new: usize, payload: Option<&[usize]>) -> Result<String> {
        Ok(self.generate_traced(tok, prompt, max_new, payload, false)?.0)
    }

    /// As [`generate`](Self::generate), also returning the operation trace of
    /// every decoding step when `trace` is set.
    pub fn generate_traced(
        &self,
        tok: &Tokenizer,
        prompt: &str,
        max_new: usize,
        payload: Option<&[usize]>,
        trace: bool,
    ) -> Result<(String, Vec<Vec<TraceEntry>>)> {
        let sp = tok.specials();
        let mut ids = frame_question(tok, prompt, self.config.prefix_len)?;
        ids.push(sp.bos);
        let prefix = payload.map(|p| prefix_features(&self.config, p));
        let mut out = Vec::new();
        let mut traces = Vec::new();
        for _ in 0..max_new {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&mut tape, &no_params);
            let p = self.bind(&mut binder, "")?;
            let po = prefix.as_ref().map(|t| tape.constant(t.clone())).transpose()?;
            let h = body_forward(&mut tape, &self.config, &p, &ids, po)?;
            let last = tape.slice_rows(h, ids.len() - 1, ids.len())?;
            let logits = head_forward(&mut tape, &p, last)?;
            let next = argmax_lowest(tape.value(logits).data());
            if trace {
                traces.push(tape.trace());
            }
            if sp.contains(next) {
                break;
            }
            out.push(next);
            ids.push(next);
        }
        Ok((tok.decode(&out)?, traces))
    }
}

/// Index of the maximum; the first (lowest) index wins ties.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Locates the prefix-slot span in `ids`.
fn prefix_span(cfg: &ModelConfig, ids: &[usize]) -> Result<Option<(usize, usize)>> {
    let positions: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id == cfg.prefix_token)
        .map(|(i, _)| i)
        .collect();
    let Some(&start) = positions.first() else {
        return Ok(None);
    };
    let end = start + positions.len();
    if positions.len() != cfg.prefix_len || positions.last() != Some(&(end - 1)) {
        return Err(Error::contract(format!(
            "prefix slots must form one contiguous span of length {}, found {} at {:?}",
            cfg.prefix_len,
            positions.len(),
            positions
        )));
    }
    Ok(Some((start, end)))
}

/// Token (and prefix) embedding, causal RoPE block stack, final norm.
pub fn body_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    p: &ModelParams<Var>,
    ids: &[usize],
    prefix_override: Option<Var>,
) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::contract("vlm_body_forward needs at least one token"));
    }
    let mut x = tape.embedding(p.embedding, ids)?;
    if let Some((start, end)) = prefix_span(cfg, ids)? {
        let prefix = prefix_override.unwrap_or(p.prefix_table);
        let pv = tape.value(prefix);
        if pv.shape() != [cfg.prefix_len, cfg.d_hidden] {
            return Err(Error::ShapeMismatch {
                op: "prefix_override",
                lhs: pv.shape().to_vec(),
                rhs: vec![cfg.prefix_len, cfg.d_hidden],
            });
        }
        let mut parts = Vec::with_capacity(3);
        if start > 0 {
            parts.push(tape.slice_rows(x, 0, start)?);
        }
        parts.push(prefix);
        if end < ids.len() {
            parts.push(tape.slice_rows(x, end, ids.len())?);
        }
        x = tape.concat_rows(&parts)?;
    }
    let positions: Vec<usize> = (0..ids.len()).collect();
    let rotary = Rotary {
        base: cfg.rope_base,
        positions: &positions,
    };
    for layer in &p.layers {
        x = nn::block_forward(tape, layer, x, cfg.n_heads, Some(rotary))?;
    }
    nn::layer_norm(tape, x, &p.final_norm)
}

pub fn head_forward(tape: &mut Tape, p: &ModelParams<Var>, hidden: Var) -> Result<Var> {
    let (hv, wv) = (tape.value(hidden), tape.value(p.head));
    if hv.cols() != wv.rows() {
        return Err(Error::ShapeMismatch {
            op: "vlm_head_forward",
            lhs: hv.shape().to_vec(),
            rhs: wv.shape().to_vec(),
        });
    }
    tape.matmul(hidden, p.head)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fixed, untrained rendering of a task payload (e.g. grid cell symbols)
/// into `prefix_len × d_hidden` "image features" for one model. Each model
/// gets its own random projection keyed by its seed.
pub fn prefix_features(cfg: &ModelConfig, payload: &[usize]) -> Tensor {
    let (slots, d) = (cfg.prefix_len, cfg.d_hidden);
    let mut data = vec![0.0; slots * d];
    let norm = 1.0 / (payload.len().max(1) as f64).sqrt();
    for (cell, &sym) in payload.iter().enumerate() {
        let key = splitmix(cfg.seed ^ 0x5eed_0f_1ea7) ^ ((cell as u64) << 32) ^ sym as u64;
        for (k, v) in data.iter_mut().enumerate() {
            let h = splitmix(key.wrapping_mul(0x1000_0000_01b3) ^ k as u64);
            let u = (h >> 11) as f64 / (1u64 << 53) as f64;
            *v += norm * (2.0 * u - 1.0);
        }
    }
    Tensor::matrix(slots, d, data)
}
