//! The encoder network: three convolutional blocks with two 2-factor
//! max-poolings between them, a time-wise attention summarizer over half of
//! the last block's filters, and a fully-connected projection to a
//! k-dimensional vector that is normalized per instance.
//!
//! A conv block is conv1d → instance norm → PReLU → dropout. After block 3,
//! the first half of the channels is the signal, the second half feeds a
//! time-wise softmax whose output weights a per-filter dot product over
//! time, collapsing any series length to one value per signal filter.
//!
//! # Weight file format
//!
//! Little-endian binary container:
//!
//! * bytes 0..8 — magic `TSENC` followed by the 3-digit format version `001`;
//! * a `u32` header byte-length, then the header: 14 `u32` words in fixed
//!   order — `filters[0..3]`, `kernels[0..3]`, `paddings[0..3]`, `k`, then
//!   `dropout_p` and `eps` as two words each (low, high halves of the f64
//!   bit pattern);
//! * every parameter tensor as consecutive `f64` values, in the order of
//!   [`EncoderParams::tensors`];
//! * a `u32` CRC-32 (IEEE) checksum of the parameter payload bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::numerics::{Graph, Mode, NodeId, NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("input length {got} below the minimum of {min} for this config")]
    InputTooShort { got: usize, min: usize },
    #[error("input batch must have shape [b, 1, t], got {0:?}")]
    BadInputShape(Vec<usize>),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Error)]
pub enum WeightFileError {
    #[error("not an encoder file")]
    NotAnEncoderFile,
    #[error("unsupported encoder file version {0:?}")]
    UnsupportedVersion(String),
    #[error("encoder file truncated or trailing data")]
    Truncated,
    #[error("encoder file checksum mismatch")]
    ChecksumMismatch,
    #[error("encoder file carries an invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const MAGIC: &[u8; 5] = b"TSENC";
const VERSION: &[u8; 3] = b"001";

/// Architecture hyperparameters. All parameter shapes follow from these.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub filters: [usize; 3],
    pub kernels: [usize; 3],
    pub paddings: [usize; 3],
    pub dropout_p: f64,
    /// Output dimensionality of the representation.
    pub k: usize,
    pub eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            filters: [128, 256, 512],
            kernels: [5, 11, 21],
            paddings: [2, 5, 10],
            dropout_p: 0.2,
            k: 256,
            eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    /// Scaled-down encoder; kernels and paddings keep their same-length
    /// defaults.
    pub fn with_filters_and_k(filters: [usize; 3], k: usize) -> Self {
        EncoderConfig {
            filters,
            k,
            ..EncoderConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let mut violations = Vec::new();
        if self.filters.iter().any(|&f| f == 0) {
            violations.push(format!("filters must be positive, got {:?}", self.filters));
        }
        if self.filters[2] % 2 != 0 {
            violations.push(format!(
                "last conv layer needs an even filter count to split for attention, got {}",
                self.filters[2]
            ));
        }
        if self.kernels.iter().any(|&kw| kw % 2 == 0 || kw == 0) {
            violations.push(format!("kernels must be odd, got {:?}", self.kernels));
        }
        if self.k < 1 {
            violations.push("k must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            violations.push(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if !(self.eps > 0.0) {
            violations.push(format!("eps {} must be positive", self.eps));
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(EncoderError::InvalidConfig(violations))
        }
    }

    /// Smallest accepted input length: series must survive both poolings
    /// and every conv window; anything under 4 samples is rejected rather
    /// than padded.
    pub fn min_input_len(&self) -> usize {
        for t in 1..=4096 {
            if self.forward_lengths(t).is_some() {
                return t.max(4);
            }
        }
        4097
    }

    /// Time extents after each conv stage, if `t` is long enough.
    fn forward_lengths(&self, t: usize) -> Option<[usize; 3]> {
        let conv = |t: usize, stage: usize| -> Option<usize> {
            let (kw, p) = (self.kernels[stage], self.paddings[stage]);
            (t + 2 * p >= kw).then(|| t + 2 * p - kw + 1)
        };
        let t1 = conv(t, 0)?;
        if t1 < 2 {
            return None;
        }
        let t2 = conv(t1 / 2, 1)?;
        if t2 < 2 {
            return None;
        }
        let t3 = conv(t2 / 2, 2)?;
        (t3 >= 1).then_some([t1, t2, t3])
    }
}

/// Learnable parameters of one conv block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub slope: Tensor,
}

/// The full learnable parameter set. Shapes are a pure function of the
/// config and independent of series length.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub blocks: [ConvBlockParams; 3],
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
    pub out_gamma: Tensor,
    pub out_beta: Tensor,
}

fn uniform_tensor<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
    .expect("shape/data agree")
}

/// Initializes encoder parameters: conv and FC weights and biases uniform
/// in ±sqrt(1/fan_in), PReLU slopes 0.25, norm affines at identity.
/// Deterministic given the RNG state.
pub fn build<R: Rng>(config: &EncoderConfig, rng: &mut R) -> Result<EncoderParams, EncoderError> {
    config.validate()?;
    let mut in_channels = 1usize;
    let mut blocks = Vec::with_capacity(3);
    for stage in 0..3 {
        let (c_out, kw) = (config.filters[stage], config.kernels[stage]);
        let bound = (1.0 / (in_channels * kw) as f64).sqrt();
        blocks.push(ConvBlockParams {
            weight: uniform_tensor(&[c_out, in_channels, kw], bound, rng),
            bias: uniform_tensor(&[c_out], bound, rng),
            gamma: Tensor::full(&[c_out], 1.0),
            beta: Tensor::zeros(&[c_out]),
            slope: Tensor::full(&[c_out], 0.25),
        });
        in_channels = c_out;
    }
    let attn_width = config.filters[2] / 2;
    let fc_bound = (1.0 / attn_width as f64).sqrt();
    let blocks: [ConvBlockParams; 3] = blocks.try_into().expect("three blocks");
    Ok(EncoderParams {
        blocks,
        fc_weight: uniform_tensor(&[config.k, attn_width], fc_bound, rng),
        fc_bias: uniform_tensor(&[config.k], fc_bound, rng),
        out_gamma: Tensor::full(&[config.k], 1.0),
        out_beta: Tensor::zeros(&[config.k]),
    })
}

impl EncoderParams {
    /// All parameter tensors in the fixed serialization order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(19);
        for b in &self.blocks {
            out.extend([&b.weight, &b.bias, &b.gamma, &b.beta, &b.slope]);
        }
        out.extend([&self.fc_weight, &self.fc_bias, &self.out_gamma, &self.out_beta]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let [b1, b2, b3] = &mut self.blocks;
        vec![
            &mut b1.weight,
            &mut b1.bias,
            &mut b1.gamma,
            &mut b1.beta,
            &mut b1.slope,
            &mut b2.weight,
            &mut b2.bias,
            &mut b2.gamma,
            &mut b2.beta,
            &mut b2.slope,
            &mut b3.weight,
            &mut b3.bias,
            &mut b3.gamma,
            &mut b3.beta,
            &mut b3.slope,
            &mut self.fc_weight,
            &mut self.fc_bias,
            &mut self.out_gamma,
            &mut self.out_beta,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Graph-side handles for one materialized parameter set.
pub struct EncoderLeaves {
    ids: Vec<NodeId>,
}

impl EncoderLeaves {
    /// Copies every parameter tensor into the graph as a leaf, in
    /// [`EncoderParams::tensors`] order.
    pub fn insert(graph: &mut Graph, params: &EncoderParams) -> Self {
        EncoderLeaves {
            ids: params
                .tensors()
                .into_iter()
                .map(|t| graph.leaf(t.clone()))
                .collect(),
        }
    }

    /// Wraps pre-existing leaf ids laid out in [`EncoderParams::tensors`]
    /// order.
    pub fn from_ids(ids: &[NodeId]) -> Self {
        assert_eq!(ids.len(), 19, "encoder has 19 parameter tensors");
        EncoderLeaves { ids: ids.to_vec() }
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    fn block(&self, stage: usize) -> (NodeId, NodeId, NodeId, NodeId, NodeId) {
        let o = stage * 5;
        (
            self.ids[o],
            self.ids[o + 1],
            self.ids[o + 2],
            self.ids[o + 3],
            self.ids[o + 4],
        )
    }
}

/// One conv block on the graph: conv1d → instance norm → PReLU → dropout.
fn conv_block_on_graph<R: Rng>(
    graph: &mut Graph,
    input: NodeId,
    leaves: &EncoderLeaves,
    stage: usize,
    config: &EncoderConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<NodeId, EncoderError> {
    let (weight, bias, gamma, beta, slope) = leaves.block(stage);
    let c = graph.conv1d(input, weight, bias, config.paddings[stage])?;
    let n = graph.instance_norm(c, gamma, beta, config.eps)?;
    let p = graph.prelu(n, slope)?;
    Ok(graph.dropout(p, config.dropout_p, mode, rng)?)
}

/// Full encoder on an existing graph. Returns the `[b, k]` output node and
/// the `[b, filters[2]/2, t']` attention-weight node.
pub fn encode_on_graph<R: Rng>(
    graph: &mut Graph,
    input: NodeId,
    leaves: &EncoderLeaves,
    config: &EncoderConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<(NodeId, NodeId), EncoderError> {
    let shape = graph.value(input).shape().to_vec();
    if shape.len() != 3 || shape[1] != 1 {
        return Err(EncoderError::BadInputShape(shape));
    }
    let t = shape[2];
    let min = config.min_input_len();
    if t < min || config.forward_lengths(t).is_none() {
        return Err(EncoderError::InputTooShort { got: t, min });
    }

    let b1 = conv_block_on_graph(graph, input, leaves, 0, config, mode, rng)?;
    let p1 = graph.max_pool2(b1)?;
    let b2 = conv_block_on_graph(graph, p1, leaves, 1, config, mode, rng)?;
    let p2 = graph.max_pool2(b2)?;
    let b3 = conv_block_on_graph(graph, p2, leaves, 2, config, mode, rng)?;

    let half = config.filters[2] / 2;
    let signal = graph.channel_slice(b3, 0, half)?;
    let logits = graph.channel_slice(b3, half, 2 * half)?;
    let attention = graph.softmax_time(logits)?;
    let summary = graph.attend_time(signal, attention)?;

    let projected = graph.linear(summary, leaves.ids[15], leaves.ids[16])?;
    let out = graph.instance_norm(projected, leaves.ids[17], leaves.ids[18], config.eps)?;
    Ok((out, attention))
}

/// Encodes a batch `[b, 1, t]` into representations `[b, k]`.
pub fn encode<R: Rng>(
    params: &EncoderParams,
    config: &EncoderConfig,
    batch: &Tensor,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor, EncoderError> {
    let mut graph = Graph::new();
    let input = graph.leaf(batch.clone());
    let leaves = EncoderLeaves::insert(&mut graph, params);
    let (out, _) = encode_on_graph(&mut graph, input, &leaves, config, mode, rng)?;
    Ok(graph.value(out).clone())
}

/// Deterministic eval-mode encoding.
pub fn encode_eval(
    params: &EncoderParams,
    config: &EncoderConfig,
    batch: &Tensor,
) -> Result<Tensor, EncoderError> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    encode(params, config, batch, Mode::Eval, &mut rng)
}

/// Eval-mode encoding that also exposes the per-filter attention weights,
/// for inspection and testing.
pub fn encode_with_attention(
    params: &EncoderParams,
    config: &EncoderConfig,
    batch: &Tensor,
) -> Result<(Tensor, Tensor), EncoderError> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut graph = Graph::new();
    let input = graph.leaf(batch.clone());
    let leaves = EncoderLeaves::insert(&mut graph, params);
    let (out, attention) =
        encode_on_graph(&mut graph, input, &leaves, config, Mode::Eval, &mut rng)?;
    Ok((graph.value(out).clone(), graph.value(attention).clone()))
}

/// Standalone attention summarizer over a `[b, c, t]` feature map with an
/// even channel count: first half is the signal, second half the attention
/// logits. Returns the `[b, c/2]` summary and the `[b, c/2, t]` weights.
pub fn attention_summarize(features: &Tensor) -> Result<(Tensor, Tensor), EncoderError> {
    let shape = features.shape();
    if shape.len() != 3 || shape[1] % 2 != 0 || shape[1] == 0 {
        return Err(EncoderError::BadInputShape(shape.to_vec()));
    }
    let half = shape[1] / 2;
    let mut graph = Graph::new();
    let input = graph.leaf(features.clone());
    let signal = graph.channel_slice(input, 0, half)?;
    let logits = graph.channel_slice(input, half, 2 * half)?;
    let attention = graph.softmax_time(logits)?;
    let summary = graph.attend_time(signal, attention)?;
    Ok((
        graph.value(summary).clone(),
        graph.value(attention).clone(),
    ))
}

/// Single conv block forward, for testing against the composed numerics ops.
pub fn conv_block<R: Rng>(
    input: &Tensor,
    block: &ConvBlockParams,
    padding: usize,
    eps: f64,
    dropout_p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor, EncoderError> {
    let mut graph = Graph::new();
    let x = graph.leaf(input.clone());
    let w = graph.leaf(block.weight.clone());
    let b = graph.leaf(block.bias.clone());
    let gamma = graph.leaf(block.gamma.clone());
    let beta = graph.leaf(block.beta.clone());
    let slope = graph.leaf(block.slope.clone());
    let c = graph.conv1d(x, w, b, padding)?;
    let n = graph.instance_norm(c, gamma, beta, eps)?;
    let p = graph.prelu(n, slope)?;
    let d = graph.dropout(p, dropout_p, mode, rng)?;
    Ok(graph.value(d).clone())
}

// ---------------------------------------------------------------------------
// Weight file serialization
// ---------------------------------------------------------------------------

fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xedb8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xffff_ffffu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xff) as usize] ^ (crc >> 8);
    }
    crc ^ 0xffff_ffff
}

fn header_words(config: &EncoderConfig) -> Vec<u32> {
    let mut words = Vec::with_capacity(14);
    words.extend(config.filters.iter().map(|&v| v as u32));
    words.extend(config.kernels.iter().map(|&v| v as u32));
    words.extend(config.paddings.iter().map(|&v| v as u32));
    words.push(config.k as u32);
    for real in [config.dropout_p, config.eps] {
        let bits = real.to_bits();
        words.push(bits as u32);
        words.push((bits >> 32) as u32);
    }
    words
}

fn config_from_words(words: &[u32]) -> Result<EncoderConfig, WeightFileError> {
    if words.len() != 14 {
        return Err(WeightFileError::BadConfig(format!(
            "expected 14 header words, got {}",
            words.len()
        )));
    }
    let real = |lo: u32, hi: u32| f64::from_bits((hi as u64) << 32 | lo as u64);
    let config = EncoderConfig {
        filters: [words[0] as usize, words[1] as usize, words[2] as usize],
        kernels: [words[3] as usize, words[4] as usize, words[5] as usize],
        paddings: [words[6] as usize, words[7] as usize, words[8] as usize],
        k: words[9] as usize,
        dropout_p: real(words[10], words[11]),
        eps: real(words[12], words[13]),
    };
    config
        .validate()
        .map_err(|e| WeightFileError::BadConfig(e.to_string()))?;
    Ok(config)
}

/// Writes params and config to a weight file. `load(save(x))` roundtrips
/// bit-identically.
pub fn save(
    params: &EncoderParams,
    config: &EncoderConfig,
    path: &Path,
) -> Result<(), WeightFileError> {
    let mut payload = Vec::with_capacity(params.param_count() * 8);
    for tensor in params.tensors() {
        for v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = Vec::new();
    file.extend_from_slice(MAGIC);
    file.extend_from_slice(VERSION);
    let header = header_words(config);
    file.extend_from_slice(&((header.len() * 4) as u32).to_le_bytes());
    for w in header {
        file.extend_from_slice(&w.to_le_bytes());
    }
    file.extend_from_slice(&payload);
    file.extend_from_slice(&crc32(&payload).to_le_bytes());
    let mut out = fs::File::create(path)?;
    out.write_all(&file)?;
    Ok(())
}

/// Reads a weight file written by [`save`].
pub fn load(path: &Path) -> Result<(EncoderParams, EncoderConfig), WeightFileError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[..5] != MAGIC {
        return Err(WeightFileError::NotAnEncoderFile);
    }
    if &bytes[5..8] != VERSION {
        return Err(WeightFileError::UnsupportedVersion(
            String::from_utf8_lossy(&bytes[5..8]).into_owned(),
        ));
    }
    let mut pos = 8usize;
    if pos + 4 > bytes.len() {
        return Err(WeightFileError::Truncated);
    }
    let header_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
    pos += 4;
    if header_len % 4 != 0 || pos + header_len > bytes.len() {
        return Err(WeightFileError::Truncated);
    }
    let words: Vec<u32> = bytes[pos..pos + header_len]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    pos += header_len;
    let config = config_from_words(&words)?;

    // Reconstruct the tensor shapes from the config, in serialization order.
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(19);
    let mut c_in = 1usize;
    for stage in 0..3 {
        let c_out = config.filters[stage];
        shapes.push(vec![c_out, c_in, config.kernels[stage]]);
        for _ in 0..4 {
            shapes.push(vec![c_out]);
        }
        c_in = c_out;
    }
    let half = config.filters[2] / 2;
    shapes.push(vec![config.k, half]);
    shapes.push(vec![config.k]);
    shapes.push(vec![config.k]);
    shapes.push(vec![config.k]);

    let payload_len: usize = shapes.iter().map(|s| s.iter().product::<usize>() * 8).sum();
    if bytes.len() != pos + payload_len + 4 {
        return Err(WeightFileError::Truncated);
    }
    let payload = &bytes[pos..pos + payload_len];
    let stored_crc = u32::from_le_bytes(bytes[pos + payload_len..].try_into().unwrap());
    if crc32(payload) != stored_crc {
        return Err(WeightFileError::ChecksumMismatch);
    }

    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut tensors: Vec<Tensor> = Vec::with_capacity(19);
    for shape in &shapes {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        tensors.push(Tensor::new(shape.clone(), data).expect("length checked"));
    }
    let mut it = tensors.into_iter();
    let mut block = || ConvBlockParams {
        weight: it.next().unwrap(),
        bias: it.next().unwrap(),
        gamma: it.next().unwrap(),
        beta: it.next().unwrap(),
        slope: it.next().unwrap(),
    };
    let blocks = [block(), block(), block()];
    let params = EncoderParams {
        blocks,
        fc_weight: it.next().unwrap(),
        fc_bias: it.next().unwrap(),
        out_gamma: it.next().unwrap(),
        out_beta: it.next().unwrap(),
    };
    Ok((params, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::mean_var;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_batch(b: usize, t: usize, seed: u64) -> Tensor {
        let mut r = rng(seed);
        Tensor::new(
            vec![b, 1, t],
            (0..b * t).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn tiny_config() -> EncoderConfig {
        EncoderConfig::with_filters_and_k([4, 6, 8], 5)
    }

    #[test]
    fn default_config_shapes() {
        let params = build(&EncoderConfig::default(), &mut rng(0)).unwrap();
        assert_eq!(params.blocks[0].weight.shape(), &[128, 1, 5]);
        assert_eq!(params.blocks[1].weight.shape(), &[256, 128, 11]);
        assert_eq!(params.blocks[2].weight.shape(), &[512, 256, 21]);
        assert_eq!(params.fc_weight.shape(), &[256, 256]);
        assert_eq!(params.out_gamma.shape(), &[256]);
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let config = tiny_config();
        let a = build(&config, &mut rng(7)).unwrap();
        let b = build(&config, &mut rng(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn build_honors_k() {
        let mut config = tiny_config();
        config.k = 64;
        let params = build(&config, &mut rng(1)).unwrap();
        assert_eq!(params.fc_weight.shape()[0], 64);
        let out = encode_eval(&params, &config, &random_batch(1, 24, 2)).unwrap();
        assert_eq!(out.shape(), &[1, 64]);
    }

    #[test]
    fn build_rejects_invalid_config_listing_violations() {
        let mut config = tiny_config();
        config.filters[2] = 7;
        config.kernels[1] = 4;
        config.k = 0;
        let err = build(&config, &mut rng(0)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("even filter count"), "{msg}");
        assert!(msg.contains("odd"), "{msg}");
        assert!(msg.contains("k must be"), "{msg}");
    }

    #[test]
    fn param_count_is_config_function() {
        let config = EncoderConfig::default();
        let a = build(&config, &mut rng(3)).unwrap();
        let b = build(&config, &mut rng(99)).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        let expected = (128 * 5 + 128 * 4)
            + (256 * 128 * 11 + 256 * 4)
            + (512 * 256 * 21 + 512 * 4)
            + (256 * 256 + 256)
            + 2 * 256;
        assert_eq!(a.param_count(), expected);
    }

    #[test]
    fn encode_output_dim_is_k_for_all_lengths() {
        let config = tiny_config();
        let params = build(&config, &mut rng(4)).unwrap();
        for t in [4usize, 24, 100, 571] {
            let out = encode_eval(&params, &config, &random_batch(2, t, t as u64)).unwrap();
            assert_eq!(out.shape(), &[2, config.k]);
            assert!(out.is_finite());
        }
    }

    #[test]
    fn encode_internal_lengths_for_t24() {
        let config = EncoderConfig::default();
        assert_eq!(config.forward_lengths(24), Some([24, 12, 6]));
        assert_eq!(config.min_input_len(), 4);
    }

    #[test]
    fn encode_rejects_short_series_naming_minimum() {
        let config = tiny_config();
        let params = build(&config, &mut rng(5)).unwrap();
        let err = encode_eval(&params, &config, &random_batch(1, 3, 0)).unwrap_err();
        assert!(err.to_string().contains("minimum of 4"), "{err}");
    }

    #[test]
    fn encode_is_deterministic_in_eval_mode() {
        let config = tiny_config();
        let params = build(&config, &mut rng(6)).unwrap();
        let one = random_batch(1, 30, 11);
        let mut two = Tensor::zeros(&[2, 1, 30]);
        two.data_mut()[..30].copy_from_slice(one.data());
        two.data_mut()[30..].copy_from_slice(one.data());
        let out = encode_eval(&params, &config, &two).unwrap();
        assert_eq!(out.row2(0), out.row2(1));
    }

    #[test]
    fn final_norm_standardizes_output_components() {
        let config = tiny_config();
        let mut params = build(&config, &mut rng(8)).unwrap();
        params.out_gamma = Tensor::full(&[config.k], 1.0);
        params.out_beta = Tensor::zeros(&[config.k]);
        let out = encode_eval(&params, &config, &random_batch(3, 50, 12)).unwrap();
        for i in 0..3 {
            let (mean, var) = mean_var(out.row2(i));
            assert!(mean.abs() < 1e-10, "mean {mean}");
            // normalized variance is v/(v+eps), shy of 1 when the projected
            // components have small spread
            assert!(var <= 1.0 + 1e-12 && var >= 1.0 - 1e-3, "var {var}");
        }
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let config = tiny_config();
        let params = build(&config, &mut rng(9)).unwrap();
        let (_, attention) =
            encode_with_attention(&params, &config, &random_batch(2, 40, 13)).unwrap();
        for i in 0..attention.shape()[0] {
            for c in 0..attention.shape()[1] {
                let sum: f64 = attention.row3(i, c).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
            }
        }
    }

    #[test]
    fn attention_summarize_uniform_logits_is_temporal_mean() {
        // signal channel [1,2,3], logit channel constant
        let features = Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 0.4, 0.4, 0.4]).unwrap();
        let (summary, weights) = attention_summarize(&features).unwrap();
        assert!((summary.data()[0] - 2.0).abs() < 1e-12);
        for w in weights.data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_summarize_single_step_passes_signal_through() {
        let features = Tensor::new(vec![1, 2, 1], vec![1.7, -4.0]).unwrap();
        let (summary, _) = attention_summarize(&features).unwrap();
        assert!((summary.data()[0] - 1.7).abs() < 1e-15);
    }

    #[test]
    fn attention_summarize_hand_case() {
        // h = [1,2,3], logits = [0, 0, ln 2] → weights [0.25, 0.25, 0.5]
        let features =
            Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 2.0f64.ln()]).unwrap();
        let (summary, _) = attention_summarize(&features).unwrap();
        assert!(
            (summary.data()[0] - 2.25).abs() < 1e-12,
            "{}",
            summary.data()[0]
        );
    }

    #[test]
    fn attention_summarize_rejects_odd_channels() {
        let features = Tensor::zeros(&[1, 3, 4]);
        assert!(attention_summarize(&features).is_err());
    }

    #[test]
    fn conv_block_matches_composed_ops() {
        let mut r = rng(14);
        let config = tiny_config();
        let params = build(&config, &mut r).unwrap();
        let input = random_batch(1, 24, 15);
        let block = &params.blocks[0];
        let mut eval_rng = rng(0);
        let got = conv_block(
            &input,
            block,
            config.paddings[0],
            config.eps,
            config.dropout_p,
            Mode::Eval,
            &mut eval_rng,
        )
        .unwrap();
        assert_eq!(got.shape(), &[1, config.filters[0], 24]);

        let mut g = Graph::new();
        let x = g.leaf(input);
        let w = g.leaf(block.weight.clone());
        let b = g.leaf(block.bias.clone());
        let gamma = g.leaf(block.gamma.clone());
        let beta = g.leaf(block.beta.clone());
        let slope = g.leaf(block.slope.clone());
        let c = g.conv1d(x, w, b, config.paddings[0]).unwrap();
        let n = g.instance_norm(c, gamma, beta, config.eps).unwrap();
        let p = g.prelu(n, slope).unwrap();
        assert_eq!(&got, g.value(p));
    }

    #[test]
    fn conv_block_zero_weights_zero_beta_gives_zero_output() {
        let config = tiny_config();
        let mut params = build(&config, &mut rng(16)).unwrap();
        params.blocks[0].weight = Tensor::zeros(params.blocks[0].weight.shape());
        params.blocks[0].bias = Tensor::zeros(params.blocks[0].bias.shape());
        let mut eval_rng = rng(0);
        let out = conv_block(
            &random_batch(1, 20, 17),
            &params.blocks[0],
            config.paddings[0],
            config.eps,
            config.dropout_p,
            Mode::Eval,
            &mut eval_rng,
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    fn temp_path(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("tsencode_encoder_tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn save_load_roundtrip_is_bit_identical() {
        let path = temp_path("roundtrip.tsenc");
        let config = tiny_config();
        let params = build(&config, &mut rng(18)).unwrap();
        save(&params, &config, &path).unwrap();
        let (loaded, loaded_config) = load(&path).unwrap();
        assert_eq!(params, loaded);
        assert_eq!(config, loaded_config);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn load_reports_k_from_file() {
        let path = temp_path("model64.tsenc");
        let mut config = tiny_config();
        config.k = 64;
        let params = build(&config, &mut rng(19)).unwrap();
        save(&params, &config, &path).unwrap();
        let (_, loaded_config) = load(&path).unwrap();
        assert_eq!(loaded_config.k, 64);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn corrupted_magic_is_not_an_encoder_file() {
        let path = temp_path("bad_magic.tsenc");
        let config = tiny_config();
        let params = build(&config, &mut rng(20)).unwrap();
        save(&params, &config, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(WeightFileError::NotAnEncoderFile)));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn version_truncation_and_checksum_errors_are_distinct() {
        let path = temp_path("corrupt.tsenc");
        let config = tiny_config();
        let params = build(&config, &mut rng(21)).unwrap();
        save(&params, &config, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut wrong_version = bytes.clone();
        wrong_version[7] = b'9';
        std::fs::write(&path, &wrong_version).unwrap();
        assert!(matches!(
            load(&path),
            Err(WeightFileError::UnsupportedVersion(_))
        ));

        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load(&path), Err(WeightFileError::Truncated)));

        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0xff;
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(load(&path), Err(WeightFileError::ChecksumMismatch)));

        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn crc32_known_value() {
        assert_eq!(crc32(b"123456789"), 0xcbf4_3926);
    }

    #[test]
    fn tiny_encoder_full_gradient_check() {
        use crate::numerics::grad_check;
        let config = EncoderConfig::with_filters_and_k([4, 4, 6], 3);
        let params = build(&config, &mut rng(22)).unwrap();
        let batch = random_batch(1, 16, 23);
        let inputs: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        let err = grad_check(&inputs, |g, ids| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let x = g.leaf(batch.clone());
            let leaves = EncoderLeaves::from_ids(ids);
            let (out, _) = encode_on_graph(g, x, &leaves, &config, Mode::Eval, &mut r).unwrap();
            g.cross_entropy(out, &[1]).unwrap()
        });
        assert!(err < 1e-4, "max relative error {err}");
    }
}
