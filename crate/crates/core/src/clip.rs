//! Dual-encoder image/text alignment and the age readout.
//!
//! Images are cut into patches, embedded linearly and mixed by FourierFormer
//! blocks; the mean over the patch grid is the image embedding. Each age
//! class has a text prompt ("a photo of a 12 year old person") encoded by a
//! one-layer transformer with learnable context tokens in front. Cosine
//! similarities at temperature `tau` give a distribution over classes, and
//! the predicted age is its expectation.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourierformer::{fourierformer_forward, BlockParams, FpeConfig};
use crate::numeric::{Scalar, Tape, Tensor, Var};
use crate::params::{param_struct, param_tree, Bind, Binder};

pub const SOS: &str = "<sos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

pub const DEFAULT_TEMPLATE: &str = "a photo of a {age} year old person";

/// Largest numeral that gets its own token.
pub const MAX_NUMERAL: u32 = 120;

const LN_EPS: f64 = 1e-5;

/// Closed word-level vocabulary. Ids 0, 1 and 2 are the start, end and unknown markers.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in [SOS, EOS, UNK].into_iter().map(str::to_string) {
            v.push(w);
        }
        for w in words {
            v.push(w.as_ref().to_lowercase());
        }
        v
    }

    fn push(&mut self, w: String) {
        if !self.index.contains_key(&w) {
            self.index.insert(w.clone(), self.words.len());
            self.words.push(w);
        }
    }

    /// Template words plus the numerals `0..=MAX_NUMERAL`.
    pub fn for_template(template: &str) -> Self {
        let words = template
            .split_whitespace()
            .filter(|w| *w != "{age}")
            .map(str::to_string)
            .chain((0..=MAX_NUMERAL).map(|n| n.to_string()));
        Self::new(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn sos(&self) -> usize {
        0
    }

    pub fn eos(&self) -> usize {
        1
    }

    pub fn unk(&self) -> usize {
        2
    }

    pub fn id(&self, word: &str) -> usize {
        self.index
            .get(&word.to_lowercase())
            .copied()
            .unwrap_or(self.unk())
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Numeric value of a numeral token, if it is one.
    pub fn numeral(&self, id: usize) -> Option<u32> {
        self.word(id).and_then(|w| w.parse().ok())
    }

    /// Lowercased whitespace-split word ids wrapped in start and end markers.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        if text.trim().is_empty() {
            return Err(Error::contract("tokenize_prompt", "empty text"));
        }
        if !text.is_ascii() {
            return Err(Error::contract("tokenize_prompt", "text must be ASCII"));
        }
        let mut ids = vec![self.sos()];
        ids.extend(text.split_whitespace().map(|w| self.id(w)));
        ids.push(self.eos());
        Ok(ids)
    }

    /// Words of `ids` joined by single spaces, markers dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != self.sos() && i != self.eos())
            .map(|&i| self.word(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn format_age(age: f64) -> String {
    if age.fract() == 0.0 {
        format!("{}", age as i64)
    } else {
        format!("{age}")
    }
}

/// One tokenized prompt per age class.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub template: String,
    pub ages: Vec<f64>,
    pub texts: Vec<String>,
    pub tokens: Vec<Vec<usize>>,
}

impl PromptSet {
    pub fn new(vocab: &Vocabulary, template: &str, ages: Vec<f64>) -> Result<Self> {
        if !template.contains("{age}") {
            return Err(Error::contract(
                "prompt_set",
                "template has no {age} placeholder",
            ));
        }
        if ages.is_empty() {
            return Err(Error::contract("prompt_set", "no age classes"));
        }
        if ages.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::contract(
                "prompt_set",
                "class ages must be strictly increasing",
            ));
        }
        let texts: Vec<String> = ages
            .iter()
            .map(|&a| template.replace("{age}", &format_age(a)))
            .collect();
        let tokens = texts
            .iter()
            .map(|t| vocab.tokenize(t))
            .collect::<Result<_>>()?;
        Ok(Self {
            template: template.to_string(),
            ages,
            texts,
            tokens,
        })
    }

    pub fn from_config(vocab: &Vocabulary, cfg: &AlignmentConfig) -> Result<Self> {
        Self::new(vocab, &cfg.template, cfg.class_ages())
    }

    pub fn len(&self) -> usize {
        self.ages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ages.is_empty()
    }

    /// Index of the class age nearest to `age`.
    pub fn class_of(&self, age: f64) -> usize {
        let mut best = 0;
        for (i, &a) in self.ages.iter().enumerate() {
            if (a - age).abs() < (self.ages[best] - age).abs() {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    #[default]
    Expectation,
    Argmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    pub tau: f64,
    pub dim: usize,
    pub text_layers: usize,
    pub text_hidden: usize,
    pub context_tokens: usize,
    /// Longest token sequence (markers included, context excluded).
    pub max_text_len: usize,
    pub image_size: usize,
    pub image_channels: usize,
    pub patch: usize,
    pub decoder_depth: usize,
    pub template: String,
    pub age_min: f64,
    pub age_max: f64,
    pub age_step: f64,
    /// Refine class text features with the visual context of each image.
    pub prompting: bool,
    /// Optional floor inside the log of the mismatched-pair term.
    pub loss_floor: Option<f64>,
    pub readout: Readout,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            dim: 64,
            text_layers: 1,
            text_hidden: 128,
            context_tokens: 9,
            max_text_len: 16,
            image_size: 32,
            image_channels: 3,
            patch: 4,
            decoder_depth: 2,
            template: DEFAULT_TEMPLATE.to_string(),
            age_min: 1.0,
            age_max: 80.0,
            age_step: 1.0,
            prompting: true,
            loss_floor: None,
            readout: Readout::Expectation,
        }
    }
}

impl AlignmentConfig {
    pub fn class_ages(&self) -> Vec<f64> {
        let n = ((self.age_max - self.age_min) / self.age_step + 1e-9).floor() as usize + 1;
        (0..n)
            .map(|i| self.age_min + i as f64 * self.age_step)
            .collect()
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let bad = |field: &str, message: String| Error::Config {
            path: format!("{path}.{field}"),
            message,
        };
        if !(self.tau > 0.0) {
            return Err(bad("tau", "must be positive".into()));
        }
        if self.dim == 0 {
            return Err(bad("dim", "must be at least 1".into()));
        }
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(bad(
                "patch",
                format!("must divide image_size {}", self.image_size),
            ));
        }
        if self.image_channels == 0 {
            return Err(bad("image_channels", "must be at least 1".into()));
        }
        if self.max_text_len < 2 {
            return Err(bad(
                "max_text_len",
                "must leave room for the start and end markers".into(),
            ));
        }
        if !self.template.contains("{age}") {
            return Err(bad("template", "must contain {age}".into()));
        }
        if !(self.age_step > 0.0) || !(self.age_max >= self.age_min) {
            return Err(bad(
                "age_step",
                "need age_step > 0 and age_max >= age_min".into(),
            ));
        }
        if let Some(f) = self.loss_floor {
            if !(f > 0.0) {
                return Err(bad("loss_floor", "must be positive when set".into()));
            }
        }
        Ok(())
    }
}

/// A single encoded vector with its source modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Tensor,
    pub modality: Modality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Image,
}

/// Stacks embeddings into an `[N, D]` matrix.
pub fn stack_embeddings(items: &[Embedding]) -> Result<Tensor> {
    let d = items
        .first()
        .map(|e| e.vector.len())
        .ok_or_else(|| Error::contract("stack", "no embeddings"))?;
    let mut data = Vec::with_capacity(items.len() * d);
    for e in items {
        if e.vector.len() != d {
            return Err(Error::dim(
                "stack",
                format!("embedding of {} vs {d}", e.vector.len()),
            ));
        }
        data.extend_from_slice(e.vector.data());
    }
    Tensor::new(vec![items.len(), d], data)
}

param_struct! {
    pub struct TextLayer => TextLayerVars {
        ln1_gamma, ln1_beta, wq, wk, wv, wo,
        ln2_gamma, ln2_beta, mlp_w1, mlp_b1, mlp_w2, mlp_b2,
    }
}

param_struct! {
    pub struct TextEmbed => TextEmbedVars {
        token_embedding, context, position, final_gamma, final_beta, projection,
    }
}

param_tree! {
    pub struct TextParams => TextVars { embed: TextEmbed, layers: Vec<TextLayer> }
}

param_struct! {
    pub struct Linear => LinearVars { weight, bias }
}

param_tree! {
    pub struct ImageParams => ImageVars { patch: Linear, blocks: Vec<BlockParams> }
}

param_tree! {
    /// Decoder over the visual grid and the projection added to text features.
    pub struct PromptParams => PromptVars { blocks: Vec<BlockParams>, head: Linear }
}

param_tree! {
    pub struct AlignmentModel => AlignmentVars { text: TextParams, image: ImageParams, prompt: PromptParams }
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

impl TextLayer {
    pub fn init<R: Rng + ?Sized>(d: usize, hidden: usize, rng: &mut R) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        Self {
            ln1_gamma: Tensor::ones(&[d]),
            ln1_beta: Tensor::zeros(&[d]),
            wq: Tensor::randn(&[d, d], s, rng),
            wk: Tensor::randn(&[d, d], s, rng),
            wv: Tensor::randn(&[d, d], s, rng),
            wo: Tensor::randn(&[d, d], s, rng),
            ln2_gamma: Tensor::ones(&[d]),
            ln2_beta: Tensor::zeros(&[d]),
            mlp_w1: Tensor::randn(&[d, hidden], s, rng),
            mlp_b1: Tensor::zeros(&[hidden]),
            mlp_w2: Tensor::randn(&[hidden, d], 1.0 / (hidden as f64).sqrt(), rng),
            mlp_b2: Tensor::zeros(&[d]),
        }
    }
}

impl TextParams {
    /// Numeral tokens start from a smooth sinusoidal code of their value so
    /// neighbouring ages begin close together; other tokens are Gaussian.
    pub fn init<R: Rng + ?Sized>(vocab: &Vocabulary, cfg: &AlignmentConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let mut table = Tensor::randn(&[vocab.len(), d], 1.0, rng);
        for id in 0..vocab.len() {
            if let Some(n) = vocab.numeral(id) {
                let row = &mut table.data_mut()[id * d..(id + 1) * d];
                for (j, v) in row.iter_mut().enumerate() {
                    let freq =
                        (j / 2 + 1) as f64 * std::f64::consts::PI / (2.0 * MAX_NUMERAL as f64);
                    let phase = n as f64 * freq;
                    *v = if j % 2 == 0 { phase.sin() } else { phase.cos() } as f32;
                }
            }
        }
        let embed = TextEmbed {
            token_embedding: table,
            context: Tensor::randn(&[cfg.context_tokens, d], 0.5, rng),
            position: Tensor::randn(&[cfg.context_tokens + cfg.max_text_len, d], 0.1, rng),
            final_gamma: Tensor::ones(&[d]),
            final_beta: Tensor::zeros(&[d]),
            projection: Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), rng),
        };
        let layers = (0..cfg.text_layers)
            .map(|_| TextLayer::init(d, cfg.text_hidden, rng))
            .collect();
        Self { embed, layers }
    }
}

impl AlignmentModel {
    pub fn init<R: Rng + ?Sized>(
        vocab: &Vocabulary,
        fpe: &FpeConfig,
        cfg: &AlignmentConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.dim;
        let patch_in = cfg.patch * cfg.patch * cfg.image_channels;
        let text = TextParams::init(vocab, cfg, rng);
        let image = ImageParams {
            patch: Linear::init(patch_in, d, rng),
            blocks: (0..fpe.blocks).map(|_| BlockParams::init(d, rng)).collect(),
        };
        let prompt = PromptParams {
            blocks: (0..cfg.decoder_depth)
                .map(|_| BlockParams::init(d, rng))
                .collect(),
            head: Linear::zeros(d, d),
        };
        Self {
            text,
            image,
            prompt,
        }
    }
}

/// `[C, D]` text embeddings for `C` token sequences.
#[derive(Debug, Clone, Copy)]
pub struct TextOutput {
    pub embeddings: Var,
    /// Some sequence exceeded the configured length and was cut.
    pub truncated: bool,
}

fn fit_length(ids: &[usize], max_len: usize, eos: usize) -> (Vec<usize>, bool) {
    if ids.len() <= max_len {
        return (ids.to_vec(), false);
    }
    let mut cut = ids[..max_len - 1].to_vec();
    cut.push(eos);
    (cut, true)
}

fn text_layer<T: Scalar>(tape: &mut Tape<T>, x: Var, l: &TextLayerVars) -> Result<Var> {
    let d = *tape.shape(x).last().unwrap();
    let h = tape.layer_norm(x, l.ln1_gamma, l.ln1_beta, LN_EPS)?;
    let q = tape.matmul(h, l.wq)?;
    let k = tape.matmul(h, l.wk)?;
    let v = tape.matmul(h, l.wv)?;
    let kt = tape.transpose(k)?;
    let s = tape.batch_matmul(q, kt)?;
    let s = tape.scale(s, 1.0 / (d as f64).sqrt());
    let p = tape.softmax(s);
    let a = tape.batch_matmul(p, v)?;
    let o = tape.matmul(a, l.wo)?;
    let x = tape.add(x, o)?;
    let h = tape.layer_norm(x, l.ln2_gamma, l.ln2_beta, LN_EPS)?;
    let m = tape.linear(h, l.mlp_w1, l.mlp_b1)?;
    let m = tape.tanh(m);
    let m = tape.linear(m, l.mlp_w2, l.mlp_b2)?;
    tape.add(x, m)
}

fn encode_group<T: Scalar>(tape: &mut Tape<T>, v: &TextVars, seqs: &[Vec<usize>]) -> Result<Var> {
    let (c, len) = (seqs.len(), seqs[0].len());
    let ctx_shape = tape.shape(v.embed.context).to_vec();
    let (k, d) = (ctx_shape[0], ctx_shape[1]);
    let t = k + len;
    if tape.shape(v.embed.position)[0] < t {
        return Err(Error::dim(
            "encode_text",
            format!("sequence of {t} positions exceeds the position table"),
        ));
    }
    let flat: Vec<usize> = seqs.iter().flatten().copied().collect();
    let tok = tape.gather(v.embed.token_embedding, &flat)?;
    let tok = tape.reshape(tok, &[c, len, d])?;
    let ctx = tape.broadcast_to(v.embed.context, &[c, k, d])?;
    let x = tape.concat(&[ctx, tok], 1)?;
    let pos = tape.slice(v.embed.position, 0, 0, t)?;
    let pos = tape.broadcast_to(pos, &[c, t, d])?;
    let mut x = tape.add(x, pos)?;
    for l in &v.layers {
        x = text_layer(tape, x, l)?;
    }
    let x = tape.layer_norm(x, v.embed.final_gamma, v.embed.final_beta, LN_EPS)?;
    let last = tape.slice(x, 1, t - 1, 1)?;
    let last = tape.reshape(last, &[c, d])?;
    tape.matmul(last, v.embed.projection)
}

/// Embeds tokens, prepends the context tokens, runs the sequence encoder and
/// projects the state at the end marker.
pub fn encode_text<T: Scalar>(
    tape: &mut Tape<T>,
    v: &TextVars,
    cfg: &AlignmentConfig,
    seqs: &[Vec<usize>],
) -> Result<TextOutput> {
    if seqs.is_empty() {
        return Err(Error::contract("encode_text", "no sequences"));
    }
    let mut truncated = false;
    let fitted: Vec<Vec<usize>> = seqs
        .iter()
        .map(|s| {
            let eos = *s.last().unwrap_or(&1);
            let (f, cut) = fit_length(s, cfg.max_text_len, eos);
            truncated |= cut;
            f
        })
        .collect();
    if fitted.iter().any(Vec::is_empty) {
        return Err(Error::contract("encode_text", "empty token sequence"));
    }
    // sequences of equal length share one batched pass
    let mut order: Vec<usize> = (0..fitted.len()).collect();
    order.sort_by_key(|&i| fitted[i].len());
    let mut parts: Vec<(Vec<usize>, Var)> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let len = fitted[order[start]].len();
        let end = order[start..]
            .iter()
            .position(|&i| fitted[i].len() != len)
            .map_or(order.len(), |p| start + p);
        let idx: Vec<usize> = order[start..end].to_vec();
        let group: Vec<Vec<usize>> = idx.iter().map(|&i| fitted[i].clone()).collect();
        parts.push((idx, encode_group(tape, v, &group)?));
        start = end;
    }
    let embeddings = if parts.len() == 1 && parts[0].0.iter().enumerate().all(|(a, &b)| a == b) {
        parts[0].1
    } else {
        let stacked = tape.concat(&parts.iter().map(|p| p.1).collect::<Vec<_>>(), 0)?;
        let position: Vec<usize> = parts.iter().flat_map(|p| p.0.iter().copied()).collect();
        let mut inverse = vec![0; position.len()];
        for (row, &orig) in position.iter().enumerate() {
            inverse[orig] = row;
        }
        tape.gather(stacked, &inverse)?
    };
    Ok(TextOutput {
        embeddings,
        truncated,
    })
}

/// Rearranges `[B, H, W, Cin]` (or `[H, W, Cin]`) into `[B, H/p, W/p, p*p*Cin]`.
pub fn patchify<T: Scalar>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    let (b, h, w, c) = match s.len() {
        3 => (1, s[0], s[1], s[2]),
        4 => (s[0], s[1], s[2], s[3]),
        _ => {
            return Err(Error::dim(
                "encode_image",
                format!("expected [B, H, W, C], got {s:?}"),
            ))
        }
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::dim(
            "encode_image",
            format!("{h}x{w} image is not divisible by patch {patch}"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(images.len());
    let d = images.data();
    for bi in 0..b {
        for gi in 0..gh {
            for gj in 0..gw {
                for pi in 0..patch {
                    let row = gi * patch + pi;
                    let base = ((bi * h + row) * w + gj * patch) * c;
                    out.extend_from_slice(&d[base..base + patch * c]);
                }
            }
        }
    }
    Tensor::new(vec![b, gh, gw, patch * patch * c], out)
}

#[derive(Debug, Clone, Copy)]
pub struct ImageOutput {
    /// `[B, D]` mean over the grid.
    pub embedding: Var,
    /// `[B, h, w, D]` visual context.
    pub grid: Var,
}

pub fn encode_image<T: Scalar>(
    tape: &mut Tape<T>,
    v: &ImageVars,
    fpe: &FpeConfig,
    cfg: &AlignmentConfig,
    images: &Tensor,
) -> Result<ImageOutput> {
    let patches = patchify(images, cfg.patch)?;
    let s = patches.shape().to_vec();
    let x = tape.constant(patches.cast());
    let x = tape.linear(x, v.patch.weight, v.patch.bias)?;
    let grid = fourierformer_forward(tape, x, &v.blocks, fpe)?;
    let d = *tape.shape(grid).last().unwrap();
    let flat = tape.reshape(grid, &[s[0], s[1] * s[2], d])?;
    let embedding = tape.mean_axis(flat, 1)?;
    Ok(ImageOutput { embedding, grid })
}

/// Adds `head(mean(decoder(grid_b)))` to every class text row for each image `b`.
///
/// `text` is `[C, D]`, `grid` is `[B, h, w, D]`; the result is `[B, C, D]`.
pub fn visual_context_prompting<T: Scalar>(
    tape: &mut Tape<T>,
    v: &PromptVars,
    fpe: &FpeConfig,
    text: Var,
    grid: Var,
) -> Result<Var> {
    let (ts, gs) = (tape.shape(text).to_vec(), tape.shape(grid).to_vec());
    if ts.len() != 2 || gs.len() != 4 || ts[1] != gs[3] {
        return Err(Error::dim(
            "visual_context_prompting",
            format!("text {ts:?} vs grid {gs:?}"),
        ));
    }
    let (b, c, d) = (gs[0], ts[0], ts[1]);
    let decoded = fourierformer_forward(tape, grid, &v.blocks, fpe)?;
    let flat = tape.reshape(decoded, &[b, gs[1] * gs[2], d])?;
    let pooled = tape.mean_axis(flat, 1)?;
    let shift = tape.linear(pooled, v.head.weight, v.head.bias)?;
    let shift = tape.reshape(shift, &[b, 1, d])?;
    let shift = tape.broadcast_to(shift, &[b, c, d])?;
    let text = tape.broadcast_to(text, &[b, c, d])?;
    tape.add(text, shift)
}

/// `[Ni, Nt]` cosine similarities over `tau`, one row per image.
pub fn cosine_logits<T: Scalar>(
    tape: &mut Tape<T>,
    texts: Var,
    images: Var,
    tau: f64,
) -> Result<Var> {
    let t = tape.l2_normalize(texts);
    let i = tape.l2_normalize(images);
    let tt = tape.transpose(t)?;
    let s = tape.matmul(i, tt)?;
    Ok(tape.scale(s, 1.0 / tau))
}

/// Class scores when every image has its own `[C, D]` text set (`texts: [B, C, D]`).
pub fn prompted_logits<T: Scalar>(
    tape: &mut Tape<T>,
    texts: Var,
    images: Var,
    tau: f64,
) -> Result<Var> {
    let ts = tape.shape(texts).to_vec();
    let t = tape.l2_normalize(texts);
    let i = tape.l2_normalize(images);
    let i = tape.reshape(i, &[ts[0], ts[2], 1])?;
    let s = tape.batch_matmul(t, i)?;
    let s = tape.reshape(s, &[ts[0], ts[1]])?;
    Ok(tape.scale(s, 1.0 / tau))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    /// Rows are images; each row is a distribution over texts.
    pub scores: Tensor<f64>,
    pub tau: f64,
}

fn check_alignment_inputs(
    texts: &Tensor,
    images: &Tensor,
    tau: f64,
    op: &'static str,
) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::contract(op, "tau must be positive"));
    }
    if texts.rank() != 2 || images.rank() != 2 || texts.shape()[1] != images.shape()[1] {
        return Err(Error::dim(
            op,
            format!("texts {:?} vs images {:?}", texts.shape(), images.shape()),
        ));
    }
    for (name, m) in [("text", texts), ("image", images)] {
        let d = m.shape()[1];
        if m.data().chunks(d).any(|r| r.iter().all(|&v| v == 0.0)) {
            return Err(Error::contract(op, format!("zero-norm {name} embedding")));
        }
    }
    Ok(())
}

/// `exp(cos(T_j, I_i) / tau)` normalized over texts `j` for every image `i`.
pub fn similarity_matrix(texts: &Tensor, images: &Tensor, tau: f64) -> Result<SimilarityMatrix> {
    check_alignment_inputs(texts, images, tau, "similarity_matrix")?;
    let mut tape = Tape::<f64>::new();
    let t = tape.constant(texts.cast());
    let i = tape.constant(images.cast());
    let logits = cosine_logits(&mut tape, t, i, tau)?;
    let p = tape.softmax(logits);
    Ok(SimilarityMatrix {
        scores: tape.value(p).clone(),
        tau,
    })
}

/// Matching loss over `N` aligned pairs (`texts[i]` belongs with `images[i]`).
///
/// First term: mean negative log-probability of the matching image among all
/// images, per text. Second term: mean log-probability of the mismatched
/// pairs under the same distribution, added with a plus sign. With `floor`
/// set, the second term uses `log(p + floor)`.
pub fn matching_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    texts: Var,
    images: Var,
    tau: f64,
    floor: Option<f64>,
) -> Result<Var> {
    let n = tape.shape(texts)[0];
    if tape.shape(images)[0] != n {
        return Err(Error::dim(
            "matching_loss",
            format!("{n} texts vs {} images", tape.shape(images)[0]),
        ));
    }
    // rows are texts here: the distribution runs over images
    let by_text = cosine_logits(tape, images, texts, tau)?;
    let logp = tape.log_softmax(by_text);
    let mut eye = Tensor::<T>::zeros(&[n, n]);
    for i in 0..n {
        eye.data_mut()[i * n + i] = T::one();
    }
    let eye = tape.constant(eye);
    let diag = tape.mul(logp, eye)?;
    let first = tape.sum(diag);
    let first = tape.scale(first, -1.0 / n as f64);
    if n < 2 {
        return Ok(first);
    }
    let off_mask =
        tape.constant(Tensor::<T>::ones(&[n, n]).zip_map(tape.value(eye), |a, b| a - b)?);
    let terms = match floor {
        None => logp,
        Some(f) => {
            let p = tape.softmax(by_text);
            let p = tape.offset(p, f);
            tape.log(p)
        }
    };
    let off = tape.mul(terms, off_mask)?;
    let second = tape.sum(off);
    let second = tape.scale(second, 1.0 / (n * (n - 1)) as f64);
    tape.add(first, second)
}

pub fn matching_loss(texts: &Tensor, images: &Tensor, tau: f64, floor: Option<f64>) -> Result<f64> {
    check_alignment_inputs(texts, images, tau, "matching_loss")?;
    if texts.shape()[0] != images.shape()[0] {
        return Err(Error::dim("matching_loss", "texts and images must pair up"));
    }
    let mut tape = Tape::<f64>::new();
    let t = tape.constant(texts.cast());
    let i = tape.constant(images.cast());
    let l = matching_loss_on_tape(&mut tape, t, i, tau, floor)?;
    tape.value(l).item()
}

/// Age from one image's class distribution.
pub fn predict_age(scores: &[f64], ages: &[f64], readout: Readout) -> Result<f64> {
    if scores.len() != ages.len() || scores.is_empty() {
        return Err(Error::dim(
            "predict_age",
            format!("{} scores for {} classes", scores.len(), ages.len()),
        ));
    }
    let total: f64 = scores.iter().sum();
    if (total - 1.0).abs() > 1e-5 || scores.iter().any(|&s| !(s >= 0.0)) {
        return Err(Error::contract(
            "predict_age",
            format!("scores sum to {total}, not 1"),
        ));
    }
    Ok(match readout {
        Readout::Expectation => scores.iter().zip(ages).map(|(s, a)| s * a).sum(),
        Readout::Argmax => {
            let mut best = 0;
            for (i, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = i;
                }
            }
            ages[best]
        }
    })
}

/// Everything one forward pass of the model produces for a batch.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    pub image_embedding: Var,
    pub grid: Var,
    /// `[C, D]` class text embeddings before visual prompting.
    pub class_text: Var,
    /// `[B, C]` cosine logits over `tau`.
    pub logits: Var,
    pub probs: Var,
    /// `[B]` expected age.
    pub predicted: Var,
    pub truncated: bool,
}

pub fn model_forward<T: Scalar>(
    tape: &mut Tape<T>,
    v: &AlignmentVars,
    fpe: &FpeConfig,
    cfg: &AlignmentConfig,
    prompts: &PromptSet,
    images: &Tensor,
) -> Result<ModelOutput> {
    let img = encode_image(tape, &v.image, fpe, cfg, images)?;
    let text = encode_text(tape, &v.text, cfg, &prompts.tokens)?;
    let logits = if cfg.prompting {
        let refined = visual_context_prompting(tape, &v.prompt, fpe, text.embeddings, img.grid)?;
        prompted_logits(tape, refined, img.embedding, cfg.tau)?
    } else {
        cosine_logits(tape, text.embeddings, img.embedding, cfg.tau)?
    };
    let probs = tape.softmax(logits);
    let c = prompts.len();
    let ages = tape.constant(Tensor::from_f64(&[c, 1], &prompts.ages)?);
    let pred = tape.matmul(probs, ages)?;
    let b = tape.shape(pred)[0];
    let predicted = tape.reshape(pred, &[b])?;
    Ok(ModelOutput {
        image_embedding: img.embedding,
        grid: img.grid,
        class_text: text.embeddings,
        logits,
        probs,
        predicted,
        truncated: text.truncated,
    })
}

/// Forward-only predictions for a batch of images.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub ages: Vec<f64>,
    /// `[B, D]`
    pub embeddings: Tensor,
    /// `[B, C]`
    pub probs: Tensor,
}

impl AlignmentModel {
    pub fn predict(
        &self,
        fpe: &FpeConfig,
        cfg: &AlignmentConfig,
        prompts: &PromptSet,
        images: &Tensor,
    ) -> Result<Predictions> {
        let mut tape = Tape::<f32>::new();
        let v = self.bind(&mut Binder::frozen(), &mut tape, "model");
        let out = model_forward(&mut tape, &v, fpe, cfg, prompts, images)?;
        let probs = tape.value(out.probs).clone();
        let c = prompts.len();
        let ages = probs
            .data()
            .chunks(c)
            .map(|row| {
                let row: Vec<f64> = row.iter().map(|&p| p as f64).collect();
                let total: f64 = row.iter().sum();
                let row: Vec<f64> = row.iter().map(|p| p / total).collect();
                predict_age(&row, &prompts.ages, cfg.readout)
            })
            .collect::<Result<_>>()?;
        Ok(Predictions {
            ages,
            embeddings: tape.value(out.image_embedding).clone(),
            probs,
        })
    }

    /// Class text embeddings `[C, D]` and the truncation flag.
    pub fn text_embeddings(
        &self,
        cfg: &AlignmentConfig,
        seqs: &[Vec<usize>],
    ) -> Result<(Tensor, bool)> {
        let mut tape = Tape::<f32>::new();
        let v = self.text.bind(&mut Binder::frozen(), &mut tape, "text");
        let out = encode_text(&mut tape, &v, cfg, seqs)?;
        Ok((tape.value(out.embeddings).clone(), out.truncated))
    }

    /// Image embedding `[B, D]` and visual grid `[B, h, w, D]`.
    pub fn image_embeddings(
        &self,
        fpe: &FpeConfig,
        cfg: &AlignmentConfig,
        images: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::<f32>::new();
        let v = self.image.bind(&mut Binder::frozen(), &mut tape, "image");
        let out = encode_image(&mut tape, &v, fpe, cfg, images)?;
        Ok((
            tape.value(out.embedding).clone(),
            tape.value(out.grid).clone(),
        ))
    }

    /// Prompted text states `[C, D]` for one visual grid `[h, w, D]`.
    pub fn prompt_text(&self, fpe: &FpeConfig, text: &Tensor, grid: &Tensor) -> Result<Tensor> {
        let gs = grid.shape();
        if gs.len() != 3 {
            return Err(Error::dim(
                "visual_context_prompting",
                format!("grid {gs:?}"),
            ));
        }
        let mut tape = Tape::<f32>::new();
        let v = self.prompt.bind(&mut Binder::frozen(), &mut tape, "prompt");
        let t = tape.constant(text.clone());
        let g = tape.constant(grid.reshape(&[1, gs[0], gs[1], gs[2]])?);
        let out = visual_context_prompting(&mut tape, &v, fpe, t, g)?;
        tape.value(out).reshape(text.shape())
    }
}
