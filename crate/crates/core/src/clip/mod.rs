//! Miniature CLIP-style dual encoder: a patch-embedding vision transformer
//! and a causal text transformer over a small learned vocabulary, trained
//! from scratch on the synthetic corpus and then frozen as the backbone.

pub mod tokenizer;

pub use tokenizer::{detokenize, tokenize, word_tokens, TokenSequence, Vocabulary};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, TransformerBlock};
use crate::params::{trunc_normal, ParamId, ParamStore, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::{lit, Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Parameter group names; the freeze schedules refer to these.
pub mod groups {
    pub const VISION_BACKBONE: &str = "vision_backbone";
    pub const TEXT_ENCODER: &str = "text_encoder";
    pub const WORD_EMBEDDINGS: &str = "word_embeddings";
    pub const TEMPERATURE: &str = "temperature";
    pub const TRIPLET_ENCODER: &str = "triplet_encoder";
    pub const ADAPTER: &str = "adapter";
    pub const VISUAL_PROMPTS: &str = "visual_prompts";
    pub const DEEP_PROMPTS: &str = "deep_prompts";
    pub const AIM: &str = "aim";
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Knowledge prompts fuse with patch features after this many layers;
    /// the remaining layers carry per-layer deep prompts.
    pub insert_layer: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            image_size: 32,
            patch_size: 8,
            width: 64,
            layers: 6,
            heads: 4,
            insert_layer: 3,
        }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "vision.image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !(1..self.layers).contains(&self.insert_layer) {
            return Err(Error::Config(format!(
                "vision.insert_layer {} must satisfy 1 <= l < layers ({})",
                self.insert_layer, self.layers
            )));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "vision.width {} must be divisible by heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    /// Patch count M.
    pub fn patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            vocab_size: 512,
            context_length: 32,
            width: 64,
            layers: 4,
            heads: 4,
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_length < 4 {
            return Err(Error::Config(format!(
                "text.context_length {} must be at least 4",
                self.context_length
            )));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "text.width {} must be divisible by heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// The dual encoder. Holds parameter ids and configs; values live in a
/// [`ParamStore`] so the same model description works at f32 and f64.
pub struct MiniClip {
    pub vision_cfg: VisionConfig,
    pub text_cfg: TextConfig,
    pub vocab: Vocabulary,

    pub patch_proj: Linear,
    pub class_token: ParamId,
    pub vision_pos: ParamId,
    pub vision_blocks: Vec<TransformerBlock>,
    pub vision_ln: LayerNorm,

    pub token_table: ParamId,
    pub text_pos: ParamId,
    pub text_blocks: Vec<TransformerBlock>,
    pub text_ln: LayerNorm,

    pub logit_scale: ParamId,
}

impl MiniClip {
    pub fn build<E: Scalar>(
        store: &mut ParamStore<E>,
        vision_cfg: VisionConfig,
        text_cfg: TextConfig,
        vocab: Vocabulary,
        rng: &mut Rng,
    ) -> Result<Self> {
        vision_cfg.validate()?;
        text_cfg.validate()?;
        if vocab.len() > text_cfg.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary of {} tokens exceeds text.vocab_size {}",
                vocab.len(),
                text_cfg.vocab_size
            )));
        }
        if vision_cfg.width != text_cfg.width {
            return Err(Error::Config(
                "vision and text widths must match for a shared embedding space".into(),
            ));
        }
        let d = vision_cfg.width;
        let patch_dim = vision_cfg.patch_size * vision_cfg.patch_size * 3;

        let vg = groups::VISION_BACKBONE;
        let patch_proj = Linear::new(store, vg, "patch_proj", patch_dim, d, true, rng)?;
        let class_token = store.add(vg, "class_token", trunc_normal(rng, 1, d, 0.02))?;
        let vision_pos = store.add(vg, "pos", trunc_normal(rng, vision_cfg.patches(), d, 0.02))?;
        let mut vision_blocks = Vec::new();
        for i in 0..vision_cfg.layers {
            vision_blocks.push(TransformerBlock::new(
                store,
                vg,
                &format!("block{i}"),
                d,
                vision_cfg.heads,
                4 * d,
                rng,
            )?);
        }
        let vision_ln = LayerNorm::new(store, vg, "ln_post", d)?;

        let token_table = store.add(
            groups::WORD_EMBEDDINGS,
            "table",
            trunc_normal(rng, vocab.len(), d, 0.02),
        )?;
        let tg = groups::TEXT_ENCODER;
        let text_pos = store.add(tg, "pos", trunc_normal(rng, text_cfg.context_length, d, 0.02))?;
        let mut text_blocks = Vec::new();
        for i in 0..text_cfg.layers {
            text_blocks.push(TransformerBlock::new(
                store,
                tg,
                &format!("block{i}"),
                d,
                text_cfg.heads,
                4 * d,
                rng,
            )?);
        }
        let text_ln = LayerNorm::new(store, tg, "ln_final", d)?;

        // exp(scale) starts at 1/0.07, the usual contrastive initialization
        let logit_scale = store.add(
            groups::TEMPERATURE,
            "logit_scale",
            Tensor::scalar(lit::<E>((1.0f64 / 0.07).ln())),
        )?;

        Ok(MiniClip {
            vision_cfg,
            text_cfg,
            vocab,
            patch_proj,
            class_token,
            vision_pos,
            vision_blocks,
            vision_ln,
            token_table,
            text_pos,
            text_blocks,
            text_ln,
            logit_scale,
        })
    }

    pub fn width(&self) -> usize {
        self.vision_cfg.width
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        tokenize(text, &self.vocab, self.text_cfg.context_length)
    }

    // ── text side ────────────────────────────────────────────────────

    /// Token embedding plus learned positional embedding: `[len(ids), d]`.
    pub fn embed_words<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        ids: &[usize],
    ) -> Result<Var> {
        if ids.len() > self.text_cfg.context_length {
            return Err(Error::Validation(format!(
                "{} ids exceed context length {}",
                ids.len(),
                self.text_cfg.context_length
            )));
        }
        let table = tape.param(store, self.token_table);
        let emb = tape.gather_rows(table, ids)?;
        let pos = tape.param(store, self.text_pos);
        let pos = tape.slice_rows(pos, 0, ids.len())?;
        tape.add(emb, pos)
    }

    /// Unit-norm text feature `[1, d]`, pooled at the EOS position. Padding
    /// never enters the computation: only positions up to EOS are encoded.
    pub fn encode_text<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        seq: &TokenSequence,
    ) -> Result<Var> {
        let real = &seq.ids[..=seq.eos_pos];
        let mut x = self.embed_words(tape, store, real)?;
        for block in &self.text_blocks {
            x = block.forward(tape, store, x, None, true)?;
        }
        let x = self.text_ln.forward(tape, store, x)?;
        let eos = tape.slice_rows(x, seq.eos_pos, 1)?;
        tape.l2_normalize_rows(eos)
    }

    /// Convenience: tokenize then encode, returning the plain value.
    pub fn encode_text_value<E: Scalar>(
        &self,
        store: &ParamStore<E>,
        text: &str,
    ) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let seq = self.tokenize(text);
        let z = self.encode_text(&mut tape, store, &seq)?;
        Ok(tape.value(z).clone())
    }

    // ── vision side ──────────────────────────────────────────────────

    fn patch_matrix<E: Scalar>(&self, image: &Tensor<f32>) -> Result<Tensor<E>> {
        let cfg = &self.vision_cfg;
        let shape = image.shape();
        if shape != [cfg.image_size, cfg.image_size, 3] {
            return Err(Error::Validation(format!(
                "image shape {shape:?} does not match configured [{0}, {0}, 3]; no implicit resize",
                cfg.image_size
            )));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("image values must lie in [0, 1]".into()));
        }
        let p = cfg.patch_size;
        let side = cfg.image_size / p;
        let mut data = Vec::with_capacity(cfg.patches() * p * p * 3);
        for gy in 0..side {
            for gx in 0..side {
                for py in 0..p {
                    for px in 0..p {
                        let y = gy * p + py;
                        let x = gx * p + px;
                        let base = (y * cfg.image_size + x) * 3;
                        for c in 0..3 {
                            data.push(lit::<E>(image.data()[base + c] as f64));
                        }
                    }
                }
            }
        }
        Tensor::matrix(cfg.patches(), p * p * 3, data)
    }

    /// Patch projection without position embeddings: `[M, d]`.
    pub fn patch_embed_raw<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        image: &Tensor<f32>,
    ) -> Result<Var> {
        let patches = tape.constant(self.patch_matrix::<E>(image)?);
        self.patch_proj.forward(tape, store, patches)
    }

    /// Patch embeddings with learned positions: the transformer input E0.
    pub fn patch_embed<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        image: &Tensor<f32>,
    ) -> Result<Var> {
        let raw = self.patch_embed_raw(tape, store, image)?;
        let pos = tape.param(store, self.vision_pos);
        tape.add(raw, pos)
    }

    /// `[class; E0]` tokens, `[M + 1, d]`.
    pub fn embed_image<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        image: &Tensor<f32>,
    ) -> Result<Var> {
        let e0 = self.patch_embed(tape, store, image)?;
        let class = tape.param(store, self.class_token);
        tape.concat_rows(&[class, e0])
    }

    pub fn run_vision_blocks<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        mut x: Var,
        range: std::ops::Range<usize>,
    ) -> Result<Var> {
        for block in &self.vision_blocks[range] {
            x = block.forward(tape, store, x, None, false)?;
        }
        Ok(x)
    }

    /// Final layer norm, class-token pooling, unit normalization.
    pub fn pool_class<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        x: Var,
    ) -> Result<Var> {
        let x = self.vision_ln.forward(tape, store, x)?;
        let class = tape.slice_rows(x, 0, 1)?;
        tape.l2_normalize_rows(class)
    }

    /// Full vision stack without any prompts: the pre-selection path.
    pub fn encode_image_plain<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        image: &Tensor<f32>,
    ) -> Result<Var> {
        let x = self.embed_image(tape, store, image)?;
        let x = self.run_vision_blocks(tape, store, x, 0..self.vision_cfg.layers)?;
        self.pool_class(tape, store, x)
    }

    pub fn encode_image_plain_value<E: Scalar>(
        &self,
        store: &ParamStore<E>,
        image: &Tensor<f32>,
    ) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let z = self.encode_image_plain(&mut tape, store, image)?;
        Ok(tape.value(z).clone())
    }

    /// `exp(logit_scale)` clamped to `[0.01, 100]`, as a tape scalar.
    pub fn temperature_scale<E: Scalar>(&self, tape: &mut Tape<E>, store: &ParamStore<E>) -> Var {
        let ls = tape.param(store, self.logit_scale);
        let s = tape.exp(ls);
        tape.clamp(s, lit::<E>(0.01), lit::<E>(100.0))
    }
}
