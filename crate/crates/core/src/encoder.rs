//! Bidirectional Transformer encoder: summed token, position and segment
//! embeddings, a stack of post-norm self-attention blocks, and a tanh pooler
//! over the `[CLS]` state.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{
    rng::truncated_normal, Element, NumericsError, ParamStore, Tape, Tensor, Var,
};
use crate::tokenizer::TokenSequence;

/// Added to attention logits of masked key positions.
pub const MASK_LOGIT: f64 = -1e9;
pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("unknown preset {0:?} (expected base, large or toy)")]
    UnknownPreset(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {0} contains non-finite values")]
    NonFinite(String),
    #[error("sequence needs {needed} positions but the model has {available}")]
    TooLong { needed: usize, available: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub segment_types: usize,
    pub dropout_p: f64,
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (layers, hidden, heads, intermediate, vocab_size, max_positions) = match name {
            "base" => (12, 768, 12, 3072, 30522, 512),
            "large" => (24, 1024, 16, 4096, 30522, 512),
            "toy" => (2, 64, 2, 256, 2000, 64),
            other => return Err(EncoderError::UnknownPreset(other.to_string())),
        };
        Ok(Self {
            layers,
            hidden,
            heads,
            intermediate,
            vocab_size,
            max_positions,
            segment_types: 2,
            dropout_p: 0.1,
        })
    }

    pub fn with_vocab_size(mut self, vocab_size: usize) -> Self {
        self.vocab_size = vocab_size;
        self
    }

    pub fn head_width(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("intermediate", self.intermediate),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(EncoderError::InvalidConfig(format!(
                "{name} must be positive"
            )));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(EncoderError::InvalidConfig(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.segment_types != 2 {
            return Err(EncoderError::InvalidConfig(
                "segment_types must be 2".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(EncoderError::InvalidConfig(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// Flat `key -> value` view, used in checkpoint headers.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        [
            ("layers", self.layers.to_string()),
            ("hidden", self.hidden.to_string()),
            ("heads", self.heads.to_string()),
            ("intermediate", self.intermediate.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_positions", self.max_positions.to_string()),
            ("segment_types", self.segment_types.to_string()),
            ("dropout_p", self.dropout_p.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("model.{k}"), v))
        .collect()
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        fn field<V: std::str::FromStr>(pairs: &BTreeMap<String, String>, key: &str) -> Result<V> {
            let raw = pairs
                .get(&format!("model.{key}"))
                .ok_or_else(|| EncoderError::InvalidConfig(format!("missing model.{key}")))?;
            raw.parse()
                .map_err(|_| EncoderError::InvalidConfig(format!("bad model.{key}: {raw:?}")))
        }
        let config = Self {
            layers: field(pairs, "layers")?,
            hidden: field(pairs, "hidden")?,
            heads: field(pairs, "heads")?,
            intermediate: field(pairs, "intermediate")?,
            vocab_size: field(pairs, "vocab_size")?,
            max_positions: field(pairs, "max_positions")?,
            segment_types: field(pairs, "segment_types")?,
            dropout_p: field(pairs, "dropout_p")?,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Closed-form count of trainable encoder scalars.
pub fn param_count(c: &ModelConfig) -> usize {
    let (h, f) = (c.hidden, c.intermediate);
    let embeddings = (c.vocab_size + c.max_positions + c.segment_types) * h + 2 * h;
    let attention = 4 * (h * h + h);
    let ffn = 2 * h * f + f + h;
    let norms = 4 * h;
    embeddings + c.layers * (attention + ffn + norms) + h * h + h
}

/// Every encoder parameter name with its shape, in storage order.
pub fn param_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (h, f) = (c.hidden, c.intermediate);
    let mut shapes = vec![
        ("emb.tok".to_string(), vec![c.vocab_size, h]),
        ("emb.pos".to_string(), vec![c.max_positions, h]),
        ("emb.seg".to_string(), vec![c.segment_types, h]),
        ("emb.ln.g".to_string(), vec![h]),
        ("emb.ln.b".to_string(), vec![h]),
    ];
    for i in 0..c.layers {
        let p = format!("layer.{i}");
        for proj in ["q", "k", "v", "o"] {
            shapes.push((format!("{p}.attn.{proj}.w"), vec![h, h]));
            shapes.push((format!("{p}.attn.{proj}.b"), vec![h]));
        }
        shapes.push((format!("{p}.ffn.in.w"), vec![h, f]));
        shapes.push((format!("{p}.ffn.in.b"), vec![f]));
        shapes.push((format!("{p}.ffn.out.w"), vec![f, h]));
        shapes.push((format!("{p}.ffn.out.b"), vec![h]));
        for ln in ["ln1", "ln2"] {
            shapes.push((format!("{p}.{ln}.g"), vec![h]));
            shapes.push((format!("{p}.{ln}.b"), vec![h]));
        }
    }
    shapes.push(("pooler.w".to_string(), vec![h, h]));
    shapes.push(("pooler.b".to_string(), vec![h]));
    shapes
}

/// Gains are one, biases zero, everything else truncated normal.
pub fn init_tensor<R: Rng + ?Sized>(name: &str, shape: Vec<usize>, rng: &mut R) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = if name.ends_with(".g") {
        vec![1.0; n]
    } else if name.ends_with(".b") {
        vec![0.0; n]
    } else {
        (0..n)
            .map(|_| truncated_normal(rng, INIT_STD) as f32)
            .collect()
    };
    Tensor::from_vec(shape, data).expect("shape product matches data")
}

/// Fresh encoder parameters, deterministic in `rng`'s state.
pub fn init_params<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<ParamStore<f32>> {
    config.validate()?;
    let mut store = ParamStore::new();
    for (name, shape) in param_shapes(config) {
        let t = init_tensor(&name, shape, rng);
        store.insert(name, t)?;
    }
    Ok(store)
}

/// Verifies that `store` holds every encoder tensor with the right shape and
/// only finite values. Extra (head) tensors are ignored.
pub fn check_params<T: Element>(store: &ParamStore<T>, config: &ModelConfig) -> Result<()> {
    config.validate()?;
    for (name, shape) in param_shapes(config) {
        let t = store
            .get(&name)
            .ok_or_else(|| EncoderError::MissingParam(name.clone()))?;
        if t.shape() != shape.as_slice() {
            return Err(EncoderError::ParamShape {
                name,
                expected: shape,
                found: t.shape().to_vec(),
            });
        }
        if !t.all_finite() {
            return Err(EncoderError::NonFinite(name));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub o: (Var, Var),
    pub ffn_in: (Var, Var),
    pub ffn_out: (Var, Var),
    pub ln1: (Var, Var),
    pub ln2: (Var, Var),
}

/// Tape handles of the encoder parameters.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub tok: Var,
    pub pos: Var,
    pub seg: Var,
    pub ln: (Var, Var),
    pub layers: Vec<LayerVars>,
    pub pooler: (Var, Var),
}

/// Looks up the tape variable bound to `name`, given `bound` from
/// [`ParamStore::bind`].
pub fn bound_var<T: Element>(store: &ParamStore<T>, bound: &[Var], name: &str) -> Result<Var> {
    store
        .id(name)
        .map(|i| bound[i])
        .ok_or_else(|| EncoderError::MissingParam(name.to_string()))
}

impl EncoderVars {
    pub fn new<T: Element>(
        store: &ParamStore<T>,
        bound: &[Var],
        config: &ModelConfig,
    ) -> Result<Self> {
        let get = |name: &str| bound_var(store, bound, name);
        let pair = |prefix: &str, a: &str, b: &str| -> Result<(Var, Var)> {
            Ok((
                get(&format!("{prefix}.{a}"))?,
                get(&format!("{prefix}.{b}"))?,
            ))
        };
        let layers = (0..config.layers)
            .map(|i| {
                let p = format!("layer.{i}");
                Ok(LayerVars {
                    q: pair(&format!("{p}.attn.q"), "w", "b")?,
                    k: pair(&format!("{p}.attn.k"), "w", "b")?,
                    v: pair(&format!("{p}.attn.v"), "w", "b")?,
                    o: pair(&format!("{p}.attn.o"), "w", "b")?,
                    ffn_in: pair(&format!("{p}.ffn.in"), "w", "b")?,
                    ffn_out: pair(&format!("{p}.ffn.out"), "w", "b")?,
                    ln1: pair(&format!("{p}.ln1"), "g", "b")?,
                    ln2: pair(&format!("{p}.ln2"), "g", "b")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tok: get("emb.tok")?,
            pos: get("emb.pos")?,
            seg: get("emb.seg")?,
            ln: pair("emb.ln", "g", "b")?,
            layers,
            pooler: pair("pooler", "w", "b")?,
        })
    }
}

/// `x · w + b`
pub fn dense<T: Element>(tape: &mut Tape<T>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add_row(y, b)?)
}

/// `[n×n]` additive attention mask, or `None` when every key is visible.
pub fn mask_bias<T: Element>(tape: &mut Tape<T>, mask: &[u8]) -> Option<Var> {
    if mask.iter().all(|&m| m != 0) {
        return None;
    }
    let n = mask.len();
    let row: Vec<f64> = mask
        .iter()
        .map(|&m| if m == 0 { MASK_LOGIT } else { 0.0 })
        .collect();
    let data: Vec<f64> = (0..n).flat_map(|_| row.iter().copied()).collect();
    Some(tape.constant(Tensor::from_f64(vec![n, n], &data).expect("n×n mask")))
}

/// One post-norm Transformer block over `x: [n×H]`. Returns the block output
/// and the per-head attention probabilities.
#[allow(clippy::too_many_arguments)]
pub fn attention_block<T: Element, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    layer: &LayerVars,
    config: &ModelConfig,
    mask: Option<Var>,
    training: bool,
    rng: &mut R,
) -> Result<(Var, Vec<Var>)> {
    let (n, h) = tape.value(x).dims2();
    if h != config.hidden {
        return Err(NumericsError::ShapeMismatch {
            op: "attention_block",
            lhs: vec![n, h],
            rhs: vec![n, config.hidden],
        }
        .into());
    }
    if let Some(m) = mask {
        if tape.shape(m) != [n, n] {
            return Err(NumericsError::ShapeMismatch {
                op: "attention_block mask",
                lhs: tape.shape(m).to_vec(),
                rhs: vec![n, n],
            }
            .into());
        }
    }
    let p = config.dropout_p;
    let dh = config.head_width();
    let scale = 1.0 / (dh as f64).sqrt();
    let q = dense(tape, x, layer.q)?;
    let k = dense(tape, x, layer.k)?;
    let v = dense(tape, x, layer.v)?;
    let mut contexts = Vec::with_capacity(config.heads);
    let mut probs = Vec::with_capacity(config.heads);
    for head in 0..config.heads {
        let qh = tape.slice_cols(q, head * dh, dh)?;
        let kh = tape.slice_cols(k, head * dh, dh)?;
        let vh = tape.slice_cols(v, head * dh, dh)?;
        let raw = tape.matmul_t(qh, kh)?;
        let mut scores = tape.scale(raw, scale);
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let attn = tape.softmax(scores);
        probs.push(attn);
        let attn = tape.dropout(attn, p, training, rng)?;
        contexts.push(tape.matmul(attn, vh)?);
    }
    let ctx = if contexts.len() == 1 {
        contexts[0]
    } else {
        tape.concat_cols(&contexts)?
    };
    let attn_out = dense(tape, ctx, layer.o)?;
    let attn_out = tape.dropout(attn_out, p, training, rng)?;
    let res = tape.add(x, attn_out)?;
    let x1 = tape.layer_norm(res, layer.ln1.0, layer.ln1.1, LAYER_NORM_EPS)?;

    let inner = dense(tape, x1, layer.ffn_in)?;
    let inner = tape.gelu(inner);
    let ffn_out = dense(tape, inner, layer.ffn_out)?;
    let ffn_out = tape.dropout(ffn_out, p, training, rng)?;
    let res = tape.add(x1, ffn_out)?;
    let out = tape.layer_norm(res, layer.ln2.0, layer.ln2.1, LAYER_NORM_EPS)?;
    Ok((out, probs))
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Final hidden states, `[n×H]`.
    pub hidden: Var,
    /// `tanh(hidden[0] · W + b)`, shape `[H]`.
    pub pooled: Var,
    /// Attention probabilities indexed by layer, then head.
    pub attention: Vec<Vec<Var>>,
}

/// Encodes raw id, segment and mask rows of equal length.
#[allow(clippy::too_many_arguments)]
pub fn encode_ids<T: Element, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    vars: &EncoderVars,
    config: &ModelConfig,
    ids: &[u32],
    segments: &[u8],
    mask: &[u8],
    training: bool,
    rng: &mut R,
) -> Result<EncoderOutput> {
    let n = ids.len();
    if segments.len() != n || mask.len() != n || n == 0 {
        return Err(NumericsError::ShapeMismatch {
            op: "encode",
            lhs: vec![n],
            rhs: vec![segments.len(), mask.len()],
        }
        .into());
    }
    if n > config.max_positions {
        return Err(EncoderError::TooLong {
            needed: n,
            available: config.max_positions,
        });
    }
    let tok_ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let seg_ids: Vec<usize> = segments.iter().map(|&s| s as usize).collect();
    let pos_ids: Vec<usize> = (0..n).collect();
    let tok = tape.gather_rows(vars.tok, &tok_ids)?;
    let pos = tape.gather_rows(vars.pos, &pos_ids)?;
    let seg = tape.gather_rows(vars.seg, &seg_ids)?;
    let sum = tape.add_n(&[tok, pos, seg])?;
    let x = tape.layer_norm(sum, vars.ln.0, vars.ln.1, LAYER_NORM_EPS)?;
    let mut x = tape.dropout(x, config.dropout_p, training, rng)?;

    let bias = mask_bias(tape, mask);
    let mut attention = Vec::with_capacity(vars.layers.len());
    for layer in &vars.layers {
        let (out, probs) = attention_block(tape, x, layer, config, bias, training, rng)?;
        x = out;
        attention.push(probs);
    }
    let cls = tape.gather_rows(x, &[0])?;
    let pooled = dense(tape, cls, vars.pooler)?;
    let pooled = tape.tanh(pooled);
    let pooled = tape.reshape(pooled, vec![config.hidden])?;
    Ok(EncoderOutput {
        hidden: x,
        pooled,
        attention,
    })
}

/// Encodes the full padded sequence.
pub fn encode<T: Element, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    vars: &EncoderVars,
    config: &ModelConfig,
    seq: &TokenSequence,
    training: bool,
    rng: &mut R,
) -> Result<EncoderOutput> {
    encode_ids(
        tape,
        vars,
        config,
        &seq.ids,
        &seq.segment_ids,
        &seq.mask,
        training,
        rng,
    )
}

/// Encodes only the real (unpadded) prefix. Masked keys receive zero
/// attention weight, so the pooled output matches [`encode`] while the cost
/// scales with the text length instead of `max_len`.
pub fn encode_real<T: Element, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    vars: &EncoderVars,
    config: &ModelConfig,
    seq: &TokenSequence,
    training: bool,
    rng: &mut R,
) -> Result<EncoderOutput> {
    let n = seq.n_real;
    encode_ids(
        tape,
        vars,
        config,
        &seq.ids[..n],
        &seq.segment_ids[..n],
        &seq.mask[..n],
        training,
        rng,
    )
}

/// Inference-mode pooled vector for one sequence.
pub fn pooled_output<T: Element>(
    store: &ParamStore<T>,
    config: &ModelConfig,
    seq: &TokenSequence,
) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| false);
    let vars = EncoderVars::new(store, &bound, config)?;
    let mut rng = crate::numerics::rng::seeded(0);
    let out = encode_real(&mut tape, &vars, config, seq, false, &mut rng)?;
    Ok(tape.value(out.pooled).data().to_vec())
}
