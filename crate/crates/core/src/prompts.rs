//! Action-aware prompt construction.
//!
//! Two prompt families derive from a caption's knowledge record: triplet
//! prompts, built by embedding subject/action/object words and running a
//! small transformer over the triplet set, and state prompts, built by
//! wrapping each state description in a fixed template and encoding it with
//! the frozen text encoder. Both pass through a shared bottleneck adapter.
//! Prompt tensors are padded to `k_max` rows with an explicit validity mask;
//! masked rows stay exactly zero through encoding and adaptation.

use crate::clip::{groups, MiniClip};
use crate::error::{Error, Result};
use crate::knowledge::{ActionKnowledge, ActionTriplet};
use crate::nn::{LayerNorm, Linear, TransformerBlock};
use crate::params::{trunc_normal, ParamId, ParamStore, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripletStyle {
    /// Learned triplet encoder over word embeddings.
    Encoder,
    /// Ablation: encode a hand-written sentence per triplet with the frozen
    /// text encoder instead.
    Handcraft,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// Prompt tensors are padded/truncated to this many rows.
    pub k_max: usize,
    pub triplet_encoder_layers: usize,
    pub triplet_encoder_heads: usize,
    /// Adapter bottleneck width t, t << d.
    pub adapter_bottleneck: usize,
    /// One adapter for both prompt families (the default) or one per family.
    pub shared_adapter: bool,
    /// Number N of learnable visual prompt tokens; 0 disables them.
    pub n_visual_prompts: usize,
    /// Independent learnable prompts per later vision layer.
    pub deep_prompts: bool,
    pub use_triplet_prompts: bool,
    pub use_state_prompts: bool,
    pub triplet_style: TripletStyle,
    pub state_template: String,
    pub handcraft_template: String,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            k_max: 8,
            triplet_encoder_layers: 2,
            triplet_encoder_heads: 4,
            adapter_bottleneck: 8,
            shared_adapter: true,
            n_visual_prompts: 4,
            deep_prompts: true,
            use_triplet_prompts: true,
            use_state_prompts: true,
            triplet_style: TripletStyle::Encoder,
            state_template:
                "Fine-grained state description of action triplet {triplet} is {description}"
                    .into(),
            handcraft_template:
                "A photo capturing a {subject} performing {action} in relation to {object}."
                    .into(),
        }
    }
}

impl PromptConfig {
    pub fn validate(&self, width: usize) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::Config("prompts.k_max must be positive".into()));
        }
        if self.adapter_bottleneck == 0 || self.adapter_bottleneck >= width {
            return Err(Error::Config(format!(
                "prompts.adapter_bottleneck {} must lie strictly between 0 and width {width}",
                self.adapter_bottleneck
            )));
        }
        if !self.state_template.contains("{description}") {
            return Err(Error::Config(
                "prompts.state_template must contain {description}".into(),
            ));
        }
        Ok(())
    }

    pub fn render_state(&self, triplet: &ActionTriplet, description: &str) -> String {
        self.state_template
            .replace("{triplet}", &triplet.render())
            .replace("{description}", description)
    }

    pub fn render_handcraft(&self, triplet: &ActionTriplet) -> String {
        self.handcraft_template
            .replace("{subject}", triplet.subject())
            .replace("{action}", triplet.action())
            .replace("{object}", triplet.object())
    }
}

/// Bottleneck adapter, Eq-order: `ReLU(LN(p) . W_down) . W_up`.
#[derive(Clone, Debug)]
pub struct PromptAdapter {
    pub ln: LayerNorm,
    pub down: Linear,
    pub up: Linear,
}

impl PromptAdapter {
    fn new<E: Scalar>(
        store: &mut ParamStore<E>,
        name: &str,
        width: usize,
        bottleneck: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(PromptAdapter {
            ln: LayerNorm::new(store, groups::ADAPTER, &format!("{name}.ln"), width)?,
            down: Linear::new(store, groups::ADAPTER, &format!("{name}.down"), width, bottleneck, false, rng)?,
            up: Linear::new(store, groups::ADAPTER, &format!("{name}.up"), bottleneck, width, false, rng)?,
        })
    }

    pub fn forward<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        p: Var,
    ) -> Result<Var> {
        let h = self.ln.forward(tape, store, p)?;
        let h = self.down.forward(tape, store, h)?;
        let h = tape.relu(h);
        self.up.forward(tape, store, h)
    }
}

/// All prompt-side parameters: triplet encoder, adapter(s), input-level
/// visual prompts, and per-layer deep prompts.
pub struct PromptSpace {
    pub cfg: PromptConfig,
    width: usize,
    pub field_proj: Linear,
    pub triplet_blocks: Vec<TransformerBlock>,
    pub adapter_t: PromptAdapter,
    pub adapter_s: PromptAdapter,
    pub visual_prompts: Option<ParamId>,
    /// Indexed by vision layer: entries below `insert_layer` are None.
    pub deep: Vec<Option<ParamId>>,
}

impl PromptSpace {
    pub fn build<E: Scalar>(
        store: &mut ParamStore<E>,
        model: &MiniClip,
        cfg: PromptConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let d = model.width();
        cfg.validate(d)?;
        let tg = groups::TRIPLET_ENCODER;
        let field_proj = Linear::new(store, tg, "field_proj", 3 * d, d, true, rng)?;
        let mut triplet_blocks = Vec::new();
        for i in 0..cfg.triplet_encoder_layers {
            triplet_blocks.push(TransformerBlock::new(
                store,
                tg,
                &format!("block{i}"),
                d,
                cfg.triplet_encoder_heads,
                4 * d,
                rng,
            )?);
        }

        let adapter_t = PromptAdapter::new(store, "shared", d, cfg.adapter_bottleneck, rng)?;
        let adapter_s = if cfg.shared_adapter {
            adapter_t.clone()
        } else {
            PromptAdapter::new(store, "state", d, cfg.adapter_bottleneck, rng)?
        };

        let visual_prompts = if cfg.n_visual_prompts > 0 {
            Some(store.add(
                groups::VISUAL_PROMPTS,
                "input",
                trunc_normal(rng, cfg.n_visual_prompts, d, 0.02),
            )?)
        } else {
            None
        };

        let mut deep = vec![None; model.vision_cfg.layers];
        if cfg.deep_prompts && cfg.n_visual_prompts > 0 {
            for (i, slot) in deep
                .iter_mut()
                .enumerate()
                .take(model.vision_cfg.layers)
                .skip(model.vision_cfg.insert_layer)
            {
                *slot = Some(store.add(
                    groups::DEEP_PROMPTS,
                    &format!("layer{i}"),
                    trunc_normal(rng, cfg.n_visual_prompts, d, 0.02),
                )?);
            }
        }

        Ok(PromptSpace {
            cfg,
            width: d,
            field_proj,
            triplet_blocks,
            adapter_t,
            adapter_s,
            visual_prompts,
            deep,
        })
    }

    fn zero_rows<E: Scalar>(&self, tape: &mut Tape<E>) -> Var {
        tape.constant(Tensor::zeros(vec![self.cfg.k_max, self.width]))
    }

    fn mask_matrix<E: Scalar>(&self, tape: &mut Tape<E>, mask: &[bool]) -> Var {
        let mut t = Tensor::zeros(vec![self.cfg.k_max, self.width]);
        for (i, &keep) in mask.iter().enumerate() {
            if keep {
                for j in 0..self.width {
                    t.set(i, j, E::one());
                }
            }
        }
        tape.constant(t)
    }

    /// Pad `rows` ([n, d], n <= k_max) with zero rows up to k_max.
    fn pad_rows<E: Scalar>(&self, tape: &mut Tape<E>, rows: Var, n: usize) -> Result<Var> {
        if n == self.cfg.k_max {
            return Ok(rows);
        }
        let pad = tape.constant(Tensor::zeros(vec![self.cfg.k_max - n, self.width]));
        tape.concat_rows(&[rows, pad])
    }

    /// Triplet prompt features p_t: `[k_max, d]` with a prefix-true mask.
    pub fn encode_triplet_prompts<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        model: &MiniClip,
        knowledge: &ActionKnowledge,
    ) -> Result<(Var, Vec<bool>)> {
        let triplets: Vec<&ActionTriplet> = knowledge
            .triplets
            .iter()
            .take(self.cfg.k_max)
            .collect();
        let mut mask = vec![false; self.cfg.k_max];
        if !self.cfg.use_triplet_prompts || triplets.is_empty() {
            return Ok((self.zero_rows(tape), mask));
        }
        for m in mask.iter_mut().take(triplets.len()) {
            *m = true;
        }

        if self.cfg.triplet_style == TripletStyle::Handcraft {
            let rows: Vec<Tensor<E>> = triplets
                .iter()
                .map(|t| {
                    let text = self.cfg.render_handcraft(t);
                    model.encode_text_value(store, &text)
                })
                .collect::<Result<_>>()?;
            let vars: Vec<Var> = rows.into_iter().map(|r| tape.constant(r)).collect();
            let stacked = tape.concat_rows(&vars)?;
            let padded = self.pad_rows(tape, stacked, triplets.len())?;
            return Ok((padded, mask));
        }

        // one row per triplet: mean-pooled word embeddings of each field,
        // concatenated to 3d and projected down to d
        let mut rows = Vec::with_capacity(triplets.len());
        for t in &triplets {
            let mut fields = Vec::with_capacity(3);
            for text in [t.subject(), t.action(), t.object()] {
                let words = crate::clip::word_tokens(text);
                let ids: Vec<usize> = if words.is_empty() {
                    vec![crate::clip::tokenizer::UNK]
                } else {
                    words
                        .iter()
                        .map(|w| model.vocab.id(w).unwrap_or(crate::clip::tokenizer::UNK))
                        .collect()
                };
                let emb = model.embed_words(tape, store, &ids)?;
                fields.push(tape.mean_rows(emb));
            }
            let cat = tape.concat_cols(&fields)?;
            rows.push(self.field_proj.forward(tape, store, cat)?);
        }
        let stacked = tape.concat_rows(&rows)?;
        let mut x = self.pad_rows(tape, stacked, triplets.len())?;
        // contextualize triplets over each other; no positional encoding, so
        // the encoding is permutation-equivariant in the triplet order
        for block in &self.triplet_blocks {
            x = block.forward(tape, store, x, Some(&mask), false)?;
        }
        let mm = self.mask_matrix(tape, &mask);
        let x = tape.mul(x, mm)?;
        Ok((x, mask))
    }

    /// State prompt features p_s: each description is wrapped in the state
    /// template and encoded by the frozen text encoder. The encoding is
    /// detached: no gradient reaches text-encoder parameters through this
    /// path in any stage.
    pub fn encode_state_prompts<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        model: &MiniClip,
        knowledge: &ActionKnowledge,
    ) -> Result<(Var, Vec<bool>)> {
        let n = knowledge.triplets.len().min(self.cfg.k_max);
        let mut mask = vec![false; self.cfg.k_max];
        if !self.cfg.use_state_prompts || n == 0 {
            return Ok((self.zero_rows(tape), mask));
        }
        for m in mask.iter_mut().take(n) {
            *m = true;
        }
        let mut data = Vec::with_capacity(self.cfg.k_max * self.width);
        for i in 0..n {
            let wrapped = self.cfg.render_state(&knowledge.triplets[i], &knowledge.states[i]);
            let row = model.encode_text_value(store, &wrapped)?;
            data.extend_from_slice(row.data());
        }
        data.resize(self.cfg.k_max * self.width, E::zero());
        let p_s = tape.constant(Tensor::matrix(self.cfg.k_max, self.width, data)?);
        Ok((p_s, mask))
    }

    /// Adapter application with masked rows forced back to exact zero.
    pub fn adapt<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        adapter: &PromptAdapter,
        p: Var,
        mask: &[bool],
    ) -> Result<Var> {
        let adapted = adapter.forward(tape, store, p)?;
        if mask.iter().all(|&m| m) {
            return Ok(adapted);
        }
        let mm = self.mask_matrix(tape, mask);
        tape.mul(adapted, mm)
    }
}

/// Both prompt families in raw and adapted form, with validity masks.
pub struct PromptBundle {
    pub p_t: Var,
    pub p_s: Var,
    pub p0_t: Var,
    pub p0_s: Var,
    pub mask_t: Vec<bool>,
    pub mask_s: Vec<bool>,
}

impl PromptBundle {
    pub fn build<E: Scalar>(
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        model: &MiniClip,
        space: &PromptSpace,
        knowledge: &ActionKnowledge,
    ) -> Result<Self> {
        let (p_t, mask_t) = space.encode_triplet_prompts(tape, store, model, knowledge)?;
        let (p_s, mask_s) = space.encode_state_prompts(tape, store, model, knowledge)?;
        let p0_t = space.adapt(tape, store, &space.adapter_t, p_t, &mask_t)?;
        let p0_s = space.adapt(tape, store, &space.adapter_s, p_s, &mask_s)?;
        Ok(PromptBundle {
            p_t,
            p_s,
            p0_t,
            p0_s,
            mask_t,
            mask_s,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::{TextConfig, VisionConfig, Vocabulary};
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;

    fn setup(cfg: PromptConfig) -> (ParamStore<f64>, MiniClip, PromptSpace) {
        let mut store = ParamStore::new();
        let vocab = Vocabulary::build(
            ["a red circle pushes a blue square".to_string(),
             "the circle is pushing the square changing its state".to_string(),
             "a green star avoids a yellow triangle".to_string(),
             // knowledge text brings base verb forms into the vocabulary
             "circle push square".to_string(),
             "star avoid triangle".to_string(),
             "square hold star".to_string()],
            256,
        )
        .unwrap();
        let mut rng = Rng::seed_from_u64(11);
        let model = MiniClip::build(
            &mut store,
            VisionConfig::default(),
            TextConfig::default(),
            vocab,
            &mut rng,
        )
        .unwrap();
        let space = PromptSpace::build(&mut store, &model, cfg, &mut rng).unwrap();
        (store, model, space)
    }

    fn knowledge(n: usize) -> ActionKnowledge {
        let combos = [
            ("circle", "push", "square"),
            ("star", "avoid", "triangle"),
            ("square", "hold", "star"),
        ];
        let triplets: Vec<ActionTriplet> = combos[..n]
            .iter()
            .map(|(s, a, o)| ActionTriplet::new(s, a, o).unwrap())
            .collect();
        let states = triplets
            .iter()
            .map(|t| format!("the {} is {}ing the {}", t.subject(), t.action(), t.object()))
            .collect();
        ActionKnowledge {
            caption_id: "k".into(),
            caption: "caption".into(),
            triplets,
            states,
        }
    }

    #[test]
    fn empty_knowledge_gives_all_masked_zero_bundle() {
        let (store, model, space) = setup(PromptConfig::default());
        let mut tape = Tape::new();
        let empty = ActionKnowledge::empty("e", "no actions here");
        let bundle = PromptBundle::build(&mut tape, &store, &model, &space, &empty).unwrap();
        assert!(bundle.mask_t.iter().all(|m| !m));
        assert!(bundle.mask_s.iter().all(|m| !m));
        for v in [bundle.p_t, bundle.p_s, bundle.p0_t, bundle.p0_s] {
            assert!(tape.value(v).data().iter().all(|x| *x == 0.0));
            assert_eq!(tape.value(v).shape(), &[8, 64]);
        }
    }

    #[test]
    fn passthrough_configuration_matches_manual_projection() {
        let mut cfg = PromptConfig::default();
        cfg.triplet_encoder_layers = 0;
        let (store, model, space) = setup(cfg);
        let k = knowledge(1);
        let mut tape = Tape::new();
        let (p_t, mask) = space
            .encode_triplet_prompts(&mut tape, &store, &model, &k)
            .unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 1);

        // manual: mean word embedding per field, concat, project
        let mut tape2 = Tape::new();
        let mut fields = Vec::new();
        for text in ["circle", "push", "square"] {
            let ids = vec![model.vocab.id(text).unwrap()];
            let emb = model.embed_words(&mut tape2, &store, &ids).unwrap();
            fields.push(tape2.mean_rows(emb));
        }
        let cat = tape2.concat_cols(&fields).unwrap();
        let want = space.field_proj.forward(&mut tape2, &store, cat).unwrap();
        for j in 0..64 {
            assert!((tape.value(p_t).at(0, j) - tape2.value(want).at(0, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn triplet_encoding_is_permutation_equivariant() {
        let (store, model, space) = setup(PromptConfig::default());
        let k = knowledge(3);
        let mut permuted = k.clone();
        permuted.triplets.rotate_left(1);
        permuted.states.rotate_left(1);

        let mut tape = Tape::new();
        let (a, _) = space.encode_triplet_prompts(&mut tape, &store, &model, &k).unwrap();
        let (b, _) = space
            .encode_triplet_prompts(&mut tape, &store, &model, &permuted)
            .unwrap();
        for i in 0..3 {
            let rot = (i + 1) % 3;
            for j in 0..64 {
                assert!(
                    (tape.value(a).at(rot, j) - tape.value(b).at(i, j)).abs() < 1e-9,
                    "row {rot} vs permuted row {i}"
                );
            }
        }
    }

    #[test]
    fn state_template_renders_exact_wrapped_string() {
        let cfg = PromptConfig::default();
        let t = ActionTriplet::new("man", "jumping", "air").unwrap();
        let s = cfg.render_state(
            &t,
            "lifting both feet off the ground and propelling the body upwards",
        );
        assert_eq!(
            s,
            "Fine-grained state description of action triplet <man, jumping, air> is \
             lifting both feet off the ground and propelling the body upwards"
        );
    }

    #[test]
    fn state_prompts_have_expected_shape_and_detached_gradient() {
        // nothing is frozen here: detachment, not freezing, must stop the flow
        let (store, model, space) = setup(PromptConfig::default());
        let k = knowledge(2);
        let mut tape = Tape::new();
        let bundle = PromptBundle::build(&mut tape, &store, &model, &space, &k).unwrap();
        assert_eq!(tape.value(bundle.p_s).shape(), &[8, 64]);

        let loss = tape.sum_all(bundle.p0_s);
        let grads = tape.backward(loss).unwrap();
        for &pid in store.group_params(groups::TEXT_ENCODER) {
            assert!(grads.param(pid).is_none(), "text encoder received gradient");
        }
        for &pid in store.group_params(groups::WORD_EMBEDDINGS) {
            assert!(grads.param(pid).is_none(), "word embeddings received gradient");
        }
        // but the adapter does learn through this path
        let adapter_grads: usize = store
            .group_params(groups::ADAPTER)
            .iter()
            .filter(|&&pid| grads.param(pid).is_some())
            .count();
        assert!(adapter_grads > 0);
    }

    #[test]
    fn adapter_bottleneck_shapes_and_zero_up_projection() {
        let (mut store, _model, space) = setup(PromptConfig::default());
        assert_eq!(store.get(space.adapter_t.down.w).shape(), &[64, 8]);
        assert_eq!(store.get(space.adapter_t.up.w).shape(), &[8, 64]);

        // parameter count 2*d*t + 2*d (LN affine) is well under d^2
        let total: usize = store
            .group_params(groups::ADAPTER)
            .iter()
            .map(|&id| store.get(id).numel())
            .sum();
        assert_eq!(total, 2 * 64 * 8 + 2 * 64);
        assert!(total < 64 * 64);

        store.set_value(space.adapter_t.up.w, Tensor::zeros(vec![8, 64])).unwrap();
        let mut tape = Tape::new();
        let p = tape.input(trunc_normal(&mut Rng::seed_from_u64(2), 8, 64, 1.0));
        let out = space.adapter_t.forward(&mut tape, &store, p).unwrap();
        assert!(tape.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn masked_rows_stay_exactly_zero_through_adapt() {
        let (store, model, space) = setup(PromptConfig::default());
        let k = knowledge(2);
        let mut tape = Tape::new();
        let bundle = PromptBundle::build(&mut tape, &store, &model, &space, &k).unwrap();
        for v in [bundle.p_t, bundle.p0_t, bundle.p_s, bundle.p0_s] {
            for row in 2..8 {
                assert!(
                    tape.value(v).row(row).iter().all(|x| *x == 0.0),
                    "padded row {row} leaked"
                );
            }
        }
    }

    #[test]
    fn adapter_passes_gradient_check() {
        let (mut store, _model, space) = setup(PromptConfig::default());
        let mut rng = Rng::seed_from_u64(3);
        let input = store.add("probe", "p", trunc_normal(&mut rng, 4, 64, 1.0)).unwrap();
        let mut targets = vec![input];
        targets.extend(store.group_params(groups::ADAPTER).iter().copied());
        let adapter = space.adapter_t.clone();
        let err = grad_check(&mut store, &targets, 1e-5, 5, &mut rng, move |tape, store| {
            let p = tape.param(store, input);
            let out = adapter.forward(tape, store, p)?;
            let sq = tape.mul(out, out)?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        assert!(err < 1e-4, "adapter rel error {err}");
    }

    #[test]
    fn handcraft_style_uses_text_encoder_rows() {
        let mut cfg = PromptConfig::default();
        cfg.triplet_style = TripletStyle::Handcraft;
        let (store, model, space) = setup(cfg);
        let k = knowledge(1);
        let mut tape = Tape::new();
        let (p_t, mask) = space
            .encode_triplet_prompts(&mut tape, &store, &model, &k)
            .unwrap();
        assert!(mask[0]);
        let want = model
            .encode_text_value(
                &store,
                "A photo capturing a circle performing push in relation to square.",
            )
            .unwrap();
        assert_eq!(tape.value(p_t).row(0), want.data());
    }
}
