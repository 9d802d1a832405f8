//! Action-aware adaptive interaction.
//!
//! Patch features cross-attend into each adapted prompt family, a shared
//! self-attention pass yields per-family values and attention maps, and the
//! two maps are recombined as `lambda * A_t + (1 - lambda) * A_s` before
//! weighting the fused values. Interchangeable variants sit behind
//! [`FusionStrategy`] and are selected by name: `aim` (the full module),
//! `cat` (plain concatenation baseline), and `none` (identity passthrough,
//! the knowledge-free path).

use crate::clip::{groups, MiniClip};
use crate::error::{Error, Result};
use crate::knowledge::ActionKnowledge;
use crate::nn::{Linear, MultiHeadAttention};
use crate::params::{ParamStore, Rng};
use crate::prompts::{PromptBundle, PromptSpace};
use crate::tape::{Tape, Var};
use crate::tensor::{lit, Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Aim,
    Cat,
    None,
}

impl std::fmt::Display for FusionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionKind::Aim => "aim",
            FusionKind::Cat => "cat",
            FusionKind::None => "none",
        })
    }
}

impl std::str::FromStr for FusionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aim" => Ok(FusionKind::Aim),
            "cat" => Ok(FusionKind::Cat),
            "none" => Ok(FusionKind::None),
            other => Err(Error::Config(format!(
                "unknown fusion strategy {other:?}; registered: aim, cat, none"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AimConfig {
    /// Trade-off between the triplet and state attention maps.
    pub lambda: f64,
    pub heads: usize,
    pub fusion_mlp_hidden: usize,
    /// Interleave visual prompt tokens among patch tokens instead of
    /// appending them as a block.
    pub interleave: bool,
}

impl Default for AimConfig {
    fn default() -> Self {
        AimConfig {
            lambda: 0.7,
            heads: 4,
            fusion_mlp_hidden: 128,
            interleave: false,
        }
    }
}

impl AimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "aim.lambda {} must lie in [0, 1]",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Attention maps and fused values captured for inspection.
#[derive(Clone, Debug, Serialize)]
pub struct FusionTrace {
    pub a_t: Vec<Vec<f64>>,
    pub a_s: Vec<Vec<f64>>,
    pub a_combined: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub v_tilde: Vec<Vec<f64>>,
}

fn to_rows<E: Scalar>(t: &Tensor<E>) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|v| v.to_f64().unwrap()).collect())
        .collect()
}

/// One fusion variant. Takes the patch tokens at the insertion layer and the
/// prompt bundle; returns the token rows that replace the patch block.
pub trait FusionStrategy<E: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    fn fuse(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        patches: Var,
        bundle: &PromptBundle,
        want_trace: bool,
    ) -> Result<(Var, Option<FusionTrace>)>;
}

/// The full adaptive interaction module (cross-attention, shared
/// self-attention, fusion MLP, lambda-reweighted combination).
pub struct AimFusion {
    pub cfg: AimConfig,
    pub cross: MultiHeadAttention,
    pub self_attn: MultiHeadAttention,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl AimFusion {
    pub fn build<E: Scalar>(
        store: &mut ParamStore<E>,
        width: usize,
        cfg: AimConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let g = groups::AIM;
        Ok(AimFusion {
            cfg,
            cross: MultiHeadAttention::new(store, g, "cross", width, cfg.heads, rng)?,
            self_attn: MultiHeadAttention::new(store, g, "self", width, cfg.heads, rng)?,
            fc1: Linear::new(store, g, "fuse.fc1", 2 * width, cfg.fusion_mlp_hidden, true, rng)?,
            fc2: Linear::new(store, g, "fuse.fc2", cfg.fusion_mlp_hidden, width, true, rng)?,
        })
    }

    /// Prompt-informed patch features for one family: cross-attention with
    /// patches as queries and the family's prompts as keys/values. An
    /// all-masked family passes the patches through unchanged.
    fn inform<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        patches: Var,
        prompts: Var,
        mask: &[bool],
    ) -> Result<Var> {
        if mask.iter().any(|&m| m) {
            let (out, _) = self
                .cross
                .forward(tape, store, patches, prompts, prompts, Some(mask), false)?;
            Ok(out)
        } else {
            Ok(patches)
        }
    }
}

impl<E: Scalar> FusionStrategy<E> for AimFusion {
    fn name(&self) -> &'static str {
        "aim"
    }

    fn fuse(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        patches: Var,
        bundle: &PromptBundle,
        want_trace: bool,
    ) -> Result<(Var, Option<FusionTrace>)> {
        let pt = self.inform(tape, store, patches, bundle.p0_t, &bundle.mask_t)?;
        let ps = self.inform(tape, store, patches, bundle.p0_s, &bundle.mask_s)?;
        let (v_t, a_t) = self.self_attn.forward(tape, store, pt, pt, pt, None, false)?;
        let (v_s, a_s) = self.self_attn.forward(tape, store, ps, ps, ps, None, false)?;

        let cat = tape.concat_cols(&[v_t, v_s])?;
        let h = self.fc1.forward(tape, store, cat)?;
        let h = tape.relu(h);
        let v = self.fc2.forward(tape, store, h)?;

        let lambda = lit::<E>(self.cfg.lambda);
        let wt = tape.scale(a_t, lambda);
        let ws = tape.scale(a_s, E::one() - lambda);
        let a_comb = tape.add(wt, ws)?;
        let v_tilde = tape.matmul(a_comb, v)?;

        let trace = want_trace.then(|| FusionTrace {
            a_t: to_rows(tape.value(a_t)),
            a_s: to_rows(tape.value(a_s)),
            a_combined: to_rows(tape.value(a_comb)),
            v: to_rows(tape.value(v)),
            v_tilde: to_rows(tape.value(v_tilde)),
        });
        Ok((v_tilde, trace))
    }
}

/// Concatenation baseline: patches, then valid triplet prompt rows, then
/// valid state prompt rows, with no interaction.
pub struct CatFusion;

impl<E: Scalar> FusionStrategy<E> for CatFusion {
    fn name(&self) -> &'static str {
        "cat"
    }

    fn fuse(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        patches: Var,
        bundle: &PromptBundle,
        _want_trace: bool,
    ) -> Result<(Var, Option<FusionTrace>)> {
        let _ = store;
        let mut parts = vec![patches];
        for (p, mask) in [(bundle.p0_t, &bundle.mask_t), (bundle.p0_s, &bundle.mask_s)] {
            let valid = prefix_len(mask)?;
            if valid > 0 {
                parts.push(tape.slice_rows(p, 0, valid)?);
            }
        }
        Ok((tape.concat_rows(&parts)?, None))
    }
}

fn prefix_len(mask: &[bool]) -> Result<usize> {
    let n = mask.iter().take_while(|&&m| m).count();
    if mask[n..].iter().any(|&m| m) {
        return Err(Error::Validation(
            "prompt validity mask must be a prefix".into(),
        ));
    }
    Ok(n)
}

/// Identity passthrough: knowledge-free path, used for the plain-path
/// equivalence contract and the no-op re-ranking configuration.
pub struct NoFusion;

impl<E: Scalar> FusionStrategy<E> for NoFusion {
    fn name(&self) -> &'static str {
        "none"
    }

    fn fuse(
        &self,
        tape: &mut Tape<E>,
        _store: &ParamStore<E>,
        patches: Var,
        _bundle: &PromptBundle,
        _want_trace: bool,
    ) -> Result<(Var, Option<FusionTrace>)> {
        let _ = tape;
        Ok((patches, None))
    }
}

/// Assemble the post-fusion token sequence: class token, fused tokens, then
/// visual prompt tokens (interleaved among the leading tokens when asked).
/// Returns the sequence and the positions holding prompt tokens.
pub fn assemble_sequence<E: Scalar>(
    tape: &mut Tape<E>,
    class: Var,
    tokens: Var,
    visual_prompts: Option<Var>,
    interleave: bool,
) -> Result<(Var, Vec<usize>)> {
    let Some(pv) = visual_prompts else {
        return Ok((tape.concat_rows(&[class, tokens])?, Vec::new()));
    };
    let n = tape.value(pv).rows();
    let m = tape.value(tokens).rows();
    if !interleave || n > m {
        let seq = tape.concat_rows(&[class, tokens, pv])?;
        let positions = (1 + m..1 + m + n).collect();
        return Ok((seq, positions));
    }
    // alternate v_i and P_i for the first n pairs, then the remaining tokens
    let mut parts = vec![class];
    let mut positions = Vec::with_capacity(n);
    for i in 0..n {
        parts.push(tape.slice_rows(tokens, i, 1)?);
        positions.push(2 * i + 2);
        parts.push(tape.slice_rows(pv, i, 1)?);
    }
    if m > n {
        parts.push(tape.slice_rows(tokens, n, m - n)?);
    }
    Ok((tape.concat_rows(&parts)?, positions))
}

/// Run the remaining vision layers with per-layer deep prompt replacement,
/// then pool the class token into a unit-norm feature.
pub fn run_later_layers<E: Scalar>(
    tape: &mut Tape<E>,
    store: &ParamStore<E>,
    model: &MiniClip,
    space: &PromptSpace,
    mut x: Var,
    prompt_positions: &[usize],
) -> Result<Var> {
    for layer in model.vision_cfg.insert_layer..model.vision_cfg.layers {
        if !prompt_positions.is_empty() {
            if let Some(pid) = space.deep[layer] {
                let fresh = tape.param(store, pid);
                x = tape.replace_rows(x, prompt_positions, fresh)?;
            }
        }
        x = model.vision_blocks[layer].forward(tape, store, x, None, false)?;
    }
    model.pool_class(tape, store, x)
}

/// The full prompted image path: early layers, fusion at the insertion
/// layer, visual prompt assembly, later layers with deep prompts, pooling.
pub struct PromptedEncoder<'a, E: Scalar> {
    pub model: &'a MiniClip,
    pub space: &'a PromptSpace,
    pub fusion: &'a dyn FusionStrategy<E>,
    pub interleave: bool,
}

impl<E: Scalar> PromptedEncoder<'_, E> {
    pub fn encode(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        knowledge: &ActionKnowledge,
        image: &Tensor<f32>,
        want_trace: bool,
    ) -> Result<(Var, Option<FusionTrace>)> {
        let bundle = PromptBundle::build(tape, store, self.model, self.space, knowledge)?;
        self.encode_with_bundle(tape, store, &bundle, image, want_trace)
    }

    /// Variant for callers that reuse one prompt bundle across many images
    /// (re-ranking conditions every candidate image on the same knowledge).
    pub fn encode_with_bundle(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        bundle: &PromptBundle,
        image: &Tensor<f32>,
        want_trace: bool,
    ) -> Result<(Var, Option<FusionTrace>)> {
        let model = self.model;
        let x = model.embed_image(tape, store, image)?;
        let l = model.vision_cfg.insert_layer;
        let x = model.run_vision_blocks(tape, store, x, 0..l)?;
        let class = tape.slice_rows(x, 0, 1)?;
        let patches = tape.slice_rows(x, 1, model.vision_cfg.patches())?;

        let (tokens, trace) = self.fusion.fuse(tape, store, patches, bundle, want_trace)?;

        let pv = self.space.visual_prompts.map(|pid| tape.param(store, pid));
        let (seq, positions) = assemble_sequence(tape, class, tokens, pv, self.interleave)?;
        let z = run_later_layers(tape, store, model, self.space, seq, &positions)?;
        Ok((z, trace))
    }

    pub fn encode_value(
        &self,
        store: &ParamStore<E>,
        knowledge: &ActionKnowledge,
        image: &Tensor<f32>,
    ) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let (z, _) = self.encode(&mut tape, store, knowledge, image, false)?;
        Ok(tape.value(z).clone())
    }
}
