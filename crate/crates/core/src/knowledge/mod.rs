//! Action knowledge: subject-action-object triplets plus per-triplet state
//! descriptions, generated from captions through an LLM backend, parsed with
//! a strict format check, and persisted as a JSONL sidecar next to the corpus.

mod backend;
mod cache;
mod pipeline;
mod template;

pub use backend::{create_backend, registered_backends, ChatRequest, HttpBackend, LlmBackend, MockBackend, RequestKind};
pub use cache::ResponseCache;
pub use pipeline::{annotate_corpus, AnnotateSummary, GeneratorConfig, KnowledgeGenerator};
pub use template::{Example, InstructionTemplate, TemplatePair};

use crate::error::{Error, Result};
use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::ser::SerializeSeq;
use serde::{Deserialize, Serialize, Serializer};
use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// One subject-action-object record. Fields are trimmed, non-empty, and free
/// of the delimiter characters `<`, `>` and `,`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ActionTriplet {
    subject: String,
    action: String,
    object: String,
}

impl ActionTriplet {
    pub fn new(subject: &str, action: &str, object: &str) -> Result<Self> {
        let fields = [
            ("subject", subject.trim()),
            ("action", action.trim()),
            ("object", object.trim()),
        ];
        for (label, value) in fields {
            if value.is_empty() {
                return Err(Error::Validation(format!("triplet {label} is empty")));
            }
            if value.contains(['<', '>', ',']) {
                return Err(Error::Validation(format!(
                    "triplet {label} {value:?} contains a delimiter character"
                )));
            }
        }
        Ok(ActionTriplet {
            subject: fields[0].1.to_string(),
            action: fields[1].1.to_string(),
            object: fields[2].1.to_string(),
        })
    }

    pub fn subject(&self) -> &str {
        &self.subject
    }

    pub fn action(&self) -> &str {
        &self.action
    }

    pub fn object(&self) -> &str {
        &self.object
    }

    /// Canonical angle-bracket rendering: `<subject, action, object>`.
    pub fn render(&self) -> String {
        format!("<{}, {}, {}>", self.subject, self.action, self.object)
    }
}

impl std::fmt::Display for ActionTriplet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.render())
    }
}

impl Serialize for ActionTriplet {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(3))?;
        seq.serialize_element(&self.subject)?;
        seq.serialize_element(&self.action)?;
        seq.serialize_element(&self.object)?;
        seq.end()
    }
}

impl<'de> Deserialize<'de> for ActionTriplet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = ActionTriplet;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a [subject, action, object] array")
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<ActionTriplet, A::Error> {
                let s: String = seq.next_element()?.ok_or_else(|| de::Error::invalid_length(0, &self))?;
                let a: String = seq.next_element()?.ok_or_else(|| de::Error::invalid_length(1, &self))?;
                let o: String = seq.next_element()?.ok_or_else(|| de::Error::invalid_length(2, &self))?;
                if seq.next_element::<String>()?.is_some() {
                    return Err(de::Error::invalid_length(4, &self));
                }
                ActionTriplet::new(&s, &a, &o).map_err(de::Error::custom)
            }
        }
        deserializer.deserialize_seq(V)
    }
}

/// Parse one response line. Accepts `<a, b, c>` and `(a, b, c)` with
/// arbitrary internal whitespace; anything else is a rejection value, not an
/// error.
pub fn parse_triplet_line(line: &str) -> Option<ActionTriplet> {
    let line = line.trim();
    let inner = if let Some(rest) = line.strip_prefix('<') {
        rest.strip_suffix('>')?
    } else if let Some(rest) = line.strip_prefix('(') {
        rest.strip_suffix(')')?
    } else {
        return None;
    };
    let fields: Vec<&str> = inner.split(',').collect();
    if fields.len() != 3 {
        return None;
    }
    ActionTriplet::new(fields[0], fields[1], fields[2]).ok()
}

/// Per-caption knowledge bundle: the triplets and, aligned index for index,
/// one state description per triplet.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ActionKnowledge {
    pub caption_id: String,
    pub caption: String,
    pub triplets: Vec<ActionTriplet>,
    pub states: Vec<String>,
}

impl ActionKnowledge {
    pub fn empty(caption_id: &str, caption: &str) -> Self {
        ActionKnowledge {
            caption_id: caption_id.to_string(),
            caption: caption.to_string(),
            triplets: Vec::new(),
            states: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.caption.trim().is_empty() {
            return Err(Error::Validation(format!(
                "knowledge record {} has an empty caption",
                self.caption_id
            )));
        }
        if self.states.len() != self.triplets.len() {
            return Err(Error::Validation(format!(
                "knowledge record {}: {} states for {} triplets",
                self.caption_id,
                self.states.len(),
                self.triplets.len()
            )));
        }
        Ok(())
    }
}

/// In-memory view of a knowledge sidecar, keyed by caption id.
#[derive(Clone, Debug, Default)]
pub struct KnowledgeStore {
    records: HashMap<String, ActionKnowledge>,
    order: Vec<String>,
}

impl KnowledgeStore {
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut store = KnowledgeStore::default();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ActionKnowledge = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            rec.validate()?;
            store.insert(rec);
        }
        Ok(store)
    }

    pub fn insert(&mut self, rec: ActionKnowledge) {
        if !self.records.contains_key(&rec.caption_id) {
            self.order.push(rec.caption_id.clone());
        }
        self.records.insert(rec.caption_id.clone(), rec);
    }

    pub fn get(&self, caption_id: &str) -> Option<&ActionKnowledge> {
        self.records.get(caption_id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ActionKnowledge> {
        self.order.iter().map(|id| &self.records[id])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for rec in self.iter() {
            writeln!(f, "{}", serde_json::to_string(rec)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_both_bracket_forms() {
        let t = parse_triplet_line("<man, jumping, air>").unwrap();
        assert_eq!((t.subject(), t.action(), t.object()), ("man", "jumping", "air"));

        let t = parse_triplet_line("( girl ,  is , small )").unwrap();
        assert_eq!((t.subject(), t.action(), t.object()), ("girl", "is", "small"));
    }

    #[test]
    fn rejects_wrong_field_counts_and_forms() {
        assert!(parse_triplet_line("<man, jumping>").is_none());
        assert!(parse_triplet_line("<a, b, c, d>").is_none());
        assert!(parse_triplet_line("man, jumping, air").is_none());
        assert!(parse_triplet_line("<man, , air>").is_none());
        assert!(parse_triplet_line("").is_none());
        assert!(parse_triplet_line("<a, b, c> trailing").is_none());
    }

    #[test]
    fn sidecar_record_round_trips_with_stable_field_order() {
        let rec = ActionKnowledge {
            caption_id: "x-1".into(),
            caption: "a red circle pushes a blue square".into(),
            triplets: vec![ActionTriplet::new("circle", "push", "square").unwrap()],
            states: vec!["the circle is pushing the square".into()],
        };
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.starts_with(r#"{"caption_id":"x-1","caption":"#));
        assert!(json.contains(r#"["circle","push","square"]"#));
        let back: ActionKnowledge = serde_json::from_str(&json).unwrap();
        assert_eq!(rec, back);
    }

    #[test]
    fn mismatched_states_rejected_on_load() {
        let rec = ActionKnowledge {
            caption_id: "x".into(),
            caption: "c".into(),
            triplets: vec![ActionTriplet::new("a", "b", "c").unwrap()],
            states: vec![],
        };
        assert!(rec.validate().is_err());
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(
            s in "[a-z]{1,8}( [a-z]{1,8}){0,2}",
            a in "[a-z]{1,8}",
            o in "[a-z]{1,8}( [a-z]{1,8}){0,2}",
        ) {
            let t = ActionTriplet::new(&s, &a, &o).unwrap();
            let back = parse_triplet_line(&t.render()).unwrap();
            prop_assert_eq!(t, back);
        }
    }
}
