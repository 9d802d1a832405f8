//! Instruction templates with in-context examples.
//!
//! Templates are ordinary config data loadable from a TOML file; the built-in
//! defaults cover triplet extraction and state-description generation.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const PLACEHOLDER: &str = "{input}";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Example {
    pub input: String,
    pub output: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct InstructionTemplate {
    pub system_text: String,
    pub in_context_examples: Vec<Example>,
    /// Format string carrying exactly one `{input}` placeholder.
    pub user_slot: String,
}

impl InstructionTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.in_context_examples.is_empty() {
            return Err(Error::Validation(
                "instruction template needs at least one in-context example".into(),
            ));
        }
        let count = self.user_slot.matches(PLACEHOLDER).count();
        if count != 1 {
            return Err(Error::Validation(format!(
                "user_slot must contain {PLACEHOLDER} exactly once, found {count}"
            )));
        }
        Ok(())
    }

    pub fn render_user(&self, input: &str) -> String {
        self.user_slot.replacen(PLACEHOLDER, input, 1)
    }

    /// Stable digest over all template content, used in cache keys so edits
    /// never reuse stale responses.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.system_text.as_bytes());
        for ex in &self.in_context_examples {
            h.update([0]);
            h.update(ex.input.as_bytes());
            h.update([1]);
            h.update(ex.output.as_bytes());
        }
        h.update([2]);
        h.update(self.user_slot.as_bytes());
        hex(&h.finalize())
    }

    pub fn triplet_default() -> Self {
        InstructionTemplate {
            system_text: "You extract action triplets from image captions. For each pair of \
                          entities that interact, output one line of the form \
                          <subject, action, object>, reusing words from the caption. Attribute \
                          statements may use the copula, as in <girl, is, small>. Output only \
                          triplet lines."
                .into(),
            in_context_examples: vec![
                Example {
                    input: "A man wearing a blue shirt is jumping in the air".into(),
                    output: "<man, jumping, air>".into(),
                },
                Example {
                    input: "two dogs chase a ball across the park".into(),
                    output: "<dogs, chase, ball>".into(),
                },
                Example {
                    input: "a small girl studies on a laptop".into(),
                    output: "<girl, study, laptop>\n<girl, is, small>".into(),
                },
            ],
            user_slot: "Caption: {input}".into(),
        }
    }

    pub fn state_default() -> Self {
        InstructionTemplate {
            system_text: "You describe the physical state implied by an action triplet in one \
                          short sentence, focusing on posture, contact, and motion of the \
                          entities. Output only the sentence."
                .into(),
            in_context_examples: vec![
                Example {
                    input: "<man, jumping, air>".into(),
                    output: "lifting both feet off the ground and propelling the body upwards"
                        .into(),
                },
                Example {
                    input: "<girl, laptop, study>".into(),
                    output: "She focuses on the laptop screen, types on the keyboard, and \
                             maintains a stable posture"
                        .into(),
                },
            ],
            user_slot: "Triplet: {input}".into(),
        }
    }
}

/// The two templates the pipeline needs.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TemplatePair {
    pub triplets: InstructionTemplate,
    pub states: InstructionTemplate,
}

impl Default for TemplatePair {
    fn default() -> Self {
        TemplatePair {
            triplets: InstructionTemplate::triplet_default(),
            states: InstructionTemplate::state_default(),
        }
    }
}

impl TemplatePair {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let pair: TemplatePair = toml::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        self.triplets.validate()?;
        self.states.validate()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TemplatePair::default().validate().unwrap();
    }

    #[test]
    fn placeholder_must_appear_exactly_once() {
        let mut t = InstructionTemplate::triplet_default();
        t.user_slot = "no placeholder".into();
        assert!(t.validate().is_err());
        t.user_slot = "{input} and {input}".into();
        assert!(t.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_every_component() {
        let base = InstructionTemplate::triplet_default();
        let fp = base.fingerprint();

        let mut t = base.clone();
        t.system_text.push('!');
        assert_ne!(fp, t.fingerprint());

        let mut t = base.clone();
        t.in_context_examples[0].output.push('x');
        assert_ne!(fp, t.fingerprint());

        let mut t = base;
        t.user_slot = "Text: {input}".into();
        assert_ne!(fp, t.fingerprint());
    }

    #[test]
    fn toml_round_trip() {
        let pair = TemplatePair::default();
        let text = toml::to_string(&pair).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("templates.toml");
        std::fs::write(&path, text).unwrap();
        assert_eq!(TemplatePair::load(&path).unwrap(), pair);
    }
}
