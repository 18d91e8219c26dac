//! BERT-family sentence encoder loaded from an exported model directory:
//!
//! ```text
//! <dir>/model.safetensors   encoder weights
//! <dir>/config.json         architecture hyperparameters
//! <dir>/tokenizer.txt       tokenizer spec
//! <dir>/manifest.json       optional; declared "dim" is cross-checked
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{safetensors, EncoderBackend, EncoderError, EncoderOutput, Tensor};
use crate::tokenizer::{TokenBatch, TokenizerSpec};

pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const CONFIG_FILE: &str = "config.json";
pub const TOKENIZER_FILE: &str = "tokenizer.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Deserialize)]
pub struct BertConfig {
    #[serde(default)]
    pub model_type: Option<String>,
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    pub max_position_embeddings: usize,
    #[serde(default = "default_type_vocab")]
    pub type_vocab_size: usize,
    #[serde(default = "default_act")]
    pub hidden_act: String,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
}

fn default_type_vocab() -> usize {
    2
}
fn default_act() -> String {
    "gelu".into()
}
fn default_ln_eps() -> f64 {
    1e-12
}

#[derive(Debug, Deserialize)]
struct Manifest {
    dim: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
enum Activation {
    Gelu,
    GeluTanh,
    Relu,
}

#[derive(Debug)]
struct Linear {
    weight: Array2<f32>, // out x in
    bias: Array1<f32>,
}

impl Linear {
    fn forward(&self, x: ArrayView2<f32>) -> Array2<f32> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

#[derive(Debug)]
struct LayerNorm {
    gamma: Array1<f32>,
    beta: Array1<f32>,
    eps: f32,
}

impl LayerNorm {
    fn forward(&self, x: &mut Array2<f32>) {
        let width = x.ncols() as f32;
        for mut row in x.rows_mut() {
            let mean = row.sum() / width;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / width;
            let inv = 1.0 / (var + self.eps).sqrt();
            for ((v, g), b) in row.iter_mut().zip(&self.gamma).zip(&self.beta) {
                *v = (*v - mean) * inv * g + b;
            }
        }
    }
}

#[derive(Debug)]
struct Layer {
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    attn_norm: LayerNorm,
    intermediate: Linear,
    output: Linear,
    out_norm: LayerNorm,
}

/// Encoder loaded by [`load_backend`].
#[derive(Debug)]
pub struct LoadedBackend {
    config: BertConfig,
    activation: Activation,
    word: Array2<f32>,
    position: Array2<f32>,
    token_type: Array1<f32>,
    embed_norm: LayerNorm,
    layers: Vec<Layer>,
    tokenizer: TokenizerSpec,
    fingerprint: String,
}

struct Weights {
    tensors: HashMap<String, Tensor>,
    prefix: &'static str,
}

impl Weights {
    fn take(&mut self, names: &[&str], shape: &[usize]) -> Result<Tensor, EncoderError> {
        let found = names.iter().find_map(|n| {
            let key = format!("{}{}", self.prefix, n);
            self.tensors.remove(&key).map(|t| (key, t))
        });
        let (key, t) = found.ok_or_else(|| EncoderError::format(format!("tensor {}", names[0]), "missing"))?;
        if t.shape.len() != shape.len() {
            return Err(EncoderError::format(
                format!("rank {} for {key}", shape.len()),
                format!("rank {}", t.shape.len()),
            ));
        }
        for (&want, &got) in shape.iter().zip(&t.shape) {
            if want != got {
                return Err(EncoderError::DimMismatch {
                    what: key,
                    expected: want,
                    found: got,
                });
            }
        }
        Ok(t)
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Array2<f32>, EncoderError> {
        let t = self.take(&[name], &[rows, cols])?;
        Ok(Array2::from_shape_vec((rows, cols), t.data).expect("shape checked"))
    }

    fn vector(&mut self, names: &[&str], len: usize) -> Result<Array1<f32>, EncoderError> {
        Ok(Array1::from(self.take(names, &[len])?.data))
    }

    fn linear(&mut self, base: &str, out: usize, inp: usize) -> Result<Linear, EncoderError> {
        Ok(Linear {
            weight: self.matrix(&format!("{base}.weight"), out, inp)?,
            bias: self.vector(&[&format!("{base}.bias")], out)?,
        })
    }

    fn norm(&mut self, base: &str, len: usize, eps: f64) -> Result<LayerNorm, EncoderError> {
        Ok(LayerNorm {
            gamma: self.vector(&[&format!("{base}.weight"), &format!("{base}.gamma")], len)?,
            beta: self.vector(&[&format!("{base}.bias"), &format!("{base}.beta")], len)?,
            eps: eps as f32,
        })
    }
}

/// Loads an exported encoder directory.
pub fn load_backend(model_path: impl AsRef<Path>) -> Result<LoadedBackend, EncoderError> {
    let dir = model_path.as_ref();
    let weights_path = dir.join(WEIGHTS_FILE);
    if !dir.is_dir() || !weights_path.is_file() {
        return Err(EncoderError::ModelNotFound(dir.to_path_buf()));
    }
    let weight_bytes = fs::read(&weights_path)?;
    let config_bytes = fs::read(dir.join(CONFIG_FILE)).map_err(|e| EncoderError::format(CONFIG_FILE, e.to_string()))?;
    let tokenizer_text = fs::read_to_string(dir.join(TOKENIZER_FILE))
        .map_err(|e| EncoderError::format(TOKENIZER_FILE, e.to_string()))?;

    let config: BertConfig =
        serde_json::from_slice(&config_bytes).map_err(|e| EncoderError::format("BERT config.json", e.to_string()))?;
    if let Some(kind) = &config.model_type {
        if !matches!(kind.as_str(), "bert" | "roberta" | "xlm-roberta") {
            return Err(EncoderError::format("BERT-family model_type", kind.clone()));
        }
    }
    let activation = match config.hidden_act.as_str() {
        "gelu" => Activation::Gelu,
        "gelu_new" | "gelu_pytorch_tanh" => Activation::GeluTanh,
        "relu" => Activation::Relu,
        other => return Err(EncoderError::format("gelu/gelu_new/relu activation", other)),
    };
    let h = config.hidden_size;
    if config.num_attention_heads == 0 || !h.is_multiple_of(config.num_attention_heads) {
        return Err(EncoderError::DimMismatch {
            what: "hidden_size divisible by num_attention_heads".into(),
            expected: config.num_attention_heads,
            found: h,
        });
    }

    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.is_file() {
        let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)
            .map_err(|e| EncoderError::format("manifest.json", e.to_string()))?;
        if let Some(dim) = manifest.dim {
            if dim != h {
                return Err(EncoderError::DimMismatch {
                    what: "manifest dim vs hidden_size".into(),
                    expected: dim,
                    found: h,
                });
            }
        }
    }

    let mut tokenizer =
        TokenizerSpec::parse(&tokenizer_text).map_err(|e| EncoderError::format("tokenizer spec", e.to_string()))?;
    if tokenizer.max_token_id() as usize >= config.vocab_size {
        return Err(EncoderError::format(
            format!("tokenizer ids below vocab_size {}", config.vocab_size),
            format!("ids up to {} (no [UNK] entry?)", tokenizer.max_token_id()),
        ));
    }
    if tokenizer.max_input_length() > config.max_position_embeddings {
        tokenizer = tokenizer.with_max_input_length(config.max_position_embeddings)?;
    }

    let tensors = safetensors::parse(&weight_bytes)?;
    let prefix = if tensors.contains_key("embeddings.word_embeddings.weight") {
        ""
    } else if tensors.contains_key("bert.embeddings.word_embeddings.weight") {
        "bert."
    } else {
        return Err(EncoderError::format(
            "BERT weights (embeddings.word_embeddings.weight)",
            "no word embedding tensor",
        ));
    };
    let mut w = Weights { tensors, prefix };

    // The word table's width is the declared D; report it first when it disagrees.
    let word_shape = w.tensors[&format!("{prefix}embeddings.word_embeddings.weight")]
        .shape
        .clone();
    if word_shape.len() == 2 && word_shape[1] != h {
        return Err(EncoderError::DimMismatch {
            what: "embeddings.word_embeddings.weight".into(),
            expected: h,
            found: word_shape[1],
        });
    }

    let word = w.matrix("embeddings.word_embeddings.weight", config.vocab_size, h)?;
    let position = w.matrix(
        "embeddings.position_embeddings.weight",
        config.max_position_embeddings,
        h,
    )?;
    let token_type = w
        .matrix("embeddings.token_type_embeddings.weight", config.type_vocab_size, h)?
        .row(0)
        .to_owned();
    let embed_norm = w.norm("embeddings.LayerNorm", h, config.layer_norm_eps)?;
    let mut layers = Vec::with_capacity(config.num_hidden_layers);
    for i in 0..config.num_hidden_layers {
        let base = format!("encoder.layer.{i}");
        layers.push(Layer {
            query: w.linear(&format!("{base}.attention.self.query"), h, h)?,
            key: w.linear(&format!("{base}.attention.self.key"), h, h)?,
            value: w.linear(&format!("{base}.attention.self.value"), h, h)?,
            attn_out: w.linear(&format!("{base}.attention.output.dense"), h, h)?,
            attn_norm: w.norm(&format!("{base}.attention.output.LayerNorm"), h, config.layer_norm_eps)?,
            intermediate: w.linear(&format!("{base}.intermediate.dense"), config.intermediate_size, h)?,
            output: w.linear(&format!("{base}.output.dense"), h, config.intermediate_size)?,
            out_norm: w.norm(&format!("{base}.output.LayerNorm"), h, config.layer_norm_eps)?,
        });
    }

    let mut hasher = Sha256::new();
    for part in [&weight_bytes[..], &config_bytes[..], tokenizer_text.as_bytes()] {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    let fingerprint = format!(
        "bert:dim={h}:{}",
        digest.iter().map(|b| format!("{b:02x}")).collect::<String>()
    );

    Ok(LoadedBackend {
        config,
        activation,
        word,
        position,
        token_type,
        embed_norm,
        layers,
        tokenizer,
        fingerprint,
    })
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x / std::f32::consts::SQRT_2))
}

fn gelu_tanh(x: f32) -> f32 {
    let c = (2.0 / std::f32::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

impl LoadedBackend {
    pub fn config(&self) -> &BertConfig {
        &self.config
    }

    fn encode_row(&self, ids: &[u32], mask: &[u8]) -> Array2<f32> {
        let h = self.config.hidden_size;
        let len = ids.len();
        let mut x = Array2::zeros((len, h));
        for (t, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(t);
            row += &self.word.row(id as usize);
            row += &self.position.row(t);
            row += &self.token_type;
        }
        self.embed_norm.forward(&mut x);

        let heads = self.config.num_attention_heads;
        let head_dim = h / heads;
        let scale = 1.0 / (head_dim as f32).sqrt();
        let keys: Vec<usize> = (0..len).filter(|&t| mask[t] != 0).collect();

        for layer in &self.layers {
            let q = layer.query.forward(x.view());
            let k = layer.key.forward(x.view());
            let v = layer.value.forward(x.view());
            let mut context = Array2::zeros((len, h));
            for head in 0..heads {
                let cols = s![.., head * head_dim..(head + 1) * head_dim];
                let qh = q.slice(cols);
                let kh = k.slice(cols).select(Axis(0), &keys);
                let vh = v.slice(cols).select(Axis(0), &keys);
                let mut scores = qh.dot(&kh.t()) * scale;
                for mut row in scores.rows_mut() {
                    let max = row.fold(f32::NEG_INFINITY, |m, &s| m.max(s));
                    row.mapv_inplace(|s| (s - max).exp());
                    let sum = row.sum();
                    row /= sum;
                }
                context.slice_mut(cols).assign(&scores.dot(&vh));
            }
            let mut x1 = layer.attn_out.forward(context.view()) + &x;
            layer.attn_norm.forward(&mut x1);
            let mut inter = layer.intermediate.forward(x1.view());
            match self.activation {
                Activation::Gelu => inter.mapv_inplace(gelu),
                Activation::GeluTanh => inter.mapv_inplace(gelu_tanh),
                Activation::Relu => inter.mapv_inplace(|v| v.max(0.0)),
            }
            let mut x2 = layer.output.forward(inter.view()) + &x1;
            layer.out_norm.forward(&mut x2);
            x = x2;
        }
        x
    }
}

impl EncoderBackend for LoadedBackend {
    fn name(&self) -> &str {
        "bert"
    }

    fn dim(&self) -> usize {
        self.config.hidden_size
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn thread_safe(&self) -> bool {
        true
    }

    fn tokenizer(&self) -> Option<&TokenizerSpec> {
        Some(&self.tokenizer)
    }

    fn evaluate(&self, batch: &TokenBatch) -> Result<EncoderOutput<f32>, EncoderError> {
        let (b, l) = batch.ids.dim();
        if l > self.config.max_position_embeddings {
            return Err(EncoderError::SequenceTooLong {
                len: l,
                limit: self.config.max_position_embeddings,
            });
        }
        if let Some(&id) = batch.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(EncoderError::InvalidTokenId {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        let h = self.config.hidden_size;
        let mut hidden = Array3::zeros((b, l, h));
        for i in 0..b {
            let ids = batch.ids.row(i).to_vec();
            let mask = batch.attention_mask.row(i).to_vec();
            if mask.iter().all(|&m| m == 0) {
                // nothing to attend to; leave the row zero
                continue;
            }
            hidden.slice_mut(s![i, .., ..]).assign(&self.encode_row(&ids, &mask));
        }
        Ok(EncoderOutput {
            hidden_states: hidden,
            attention_mask: batch.attention_mask.clone(),
            dim: h,
        })
    }
}
