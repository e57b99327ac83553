//! Representation backend that asks a chat model for 1–5 attribute ratings
//! and uses the rating vector as the "embedding".

use std::sync::Arc;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::client::{ChatClient, ChatRequest};
use super::templates::PromptTemplates;
use super::attribute_key;
use crate::attributes::{Attribute, AttributeLexicon};
use crate::embedding::cache::hex;
use crate::embedding::EmbeddingProvider;
use crate::error::{Error, Result};

pub struct AttributeScoreProvider {
    client: Arc<dyn ChatClient>,
    templates: PromptTemplates,
    lexicon: AttributeLexicon,
    id: String,
}

#[derive(Serialize)]
struct ScoreContext<'a> {
    text: &'a str,
    attributes: &'a [Attribute],
}

impl AttributeScoreProvider {
    pub fn new(client: Arc<dyn ChatClient>, lexicon: AttributeLexicon, templates: PromptTemplates) -> Self {
        let digest = hex(&Sha256::digest(lexicon.names().join("\u{1f}").as_bytes()));
        Self {
            client,
            templates,
            id: format!("attribute-score-{}", &digest[..12]),
            lexicon,
        }
    }

    /// One `name: score` line per attribute; every attribute must appear
    /// with an integer in 1..=5.
    pub fn parse_scores(&self, reply: &str) -> Result<Vec<f64>> {
        let keys: Vec<String> = self.lexicon.names().iter().map(|n| attribute_key(n)).collect();
        let mut out = vec![None; keys.len()];
        for line in reply.lines() {
            let Some((name, value)) = line.rsplit_once(':') else { continue };
            let key = attribute_key(name.trim().trim_start_matches(['-', '*', ' ']));
            let Some(a) = keys.iter().position(|k| *k == key) else { continue };
            let v: u8 = value
                .trim()
                .trim_matches('*')
                .parse()
                .map_err(|_| Error::Validation(format!("bad score `{}` for `{key}`", value.trim())))?;
            if !(1..=5).contains(&v) {
                return Err(Error::Validation(format!("score {v} for `{key}` outside 1..=5")));
            }
            out[a].get_or_insert(v as f64);
        }
        out.into_iter()
            .zip(&keys)
            .map(|(v, k)| v.ok_or_else(|| Error::Validation(format!("no score for `{k}`"))))
            .collect()
    }
}

impl EmbeddingProvider for AttributeScoreProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts
            .iter()
            .map(|t| {
                let (system, user) = self.templates.render_pair(
                    "attribute_score",
                    &ScoreContext {
                        text: t,
                        attributes: &self.lexicon.attributes,
                    },
                )?;
                let reply = self.client.complete(&ChatRequest::new(system, user))?;
                self.parse_scores(&reply)
            })
            .collect()
    }
}
