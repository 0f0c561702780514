//! Pseudo-token interpretation: rank human-readable candidate words by
//! cosine similarity to learned pseudo-tokens in the token embedding
//! space, and export the rankings as word-cloud data.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::inversion::PseudoTokenSet;
use crate::prompt::Vocabulary;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Candidate words for one attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeWords {
    pub name: String,
    pub words: Vec<String>,
}

/// Per-attribute candidate word lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeVocabulary {
    pub attributes: Vec<AttributeWords>,
}

impl AttributeVocabulary {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let v: Self = serde_json::from_str(&text)?;
        v.validate_shape()?;
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    fn validate_shape(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(Error::Config("attribute vocabulary is empty".into()));
        }
        for a in &self.attributes {
            if a.words.is_empty() {
                return Err(Error::Config(format!(
                    "attribute '{}' has no candidate words",
                    a.name
                )));
            }
        }
        Ok(())
    }

    /// Every candidate word must tokenize under the given vocabulary.
    pub fn validate_against<A: Scalar>(
        &self,
        vocab: &Vocabulary,
        text: &TextEncoder<A>,
    ) -> Result<()> {
        self.validate_shape()?;
        for a in &self.attributes {
            for w in &a.words {
                word_token_embedding(text, vocab, w)?;
            }
        }
        Ok(())
    }
}

/// Token-space embedding of a candidate word: the mean of its sub-word
/// embedding rows (multi-word candidates like "light blue" average over
/// their parts).
pub fn word_token_embedding<A: Scalar>(
    text: &TextEncoder<A>,
    vocab: &Vocabulary,
    word: &str,
) -> Result<Tensor<A>> {
    let parts: Vec<&str> = word.split_whitespace().collect();
    if parts.is_empty() {
        return Err(Error::Input("candidate word is empty".into()));
    }
    let e = text.embedding_table().shape()[1];
    let mut acc = Tensor::zeros(&[e]);
    for part in &parts {
        let key = part.to_lowercase();
        let id = vocab
            .id_of(&key)
            .ok_or_else(|| Error::UnknownWord(key.clone()))?;
        if id as usize >= text.vocab_size() {
            return Err(Error::Input(format!(
                "token id {id} for '{key}' exceeds embedding table"
            )));
        }
        let row = Tensor::new(vec![e], text.embedding_table().row(id as usize).to_vec());
        acc = acc.add(&row);
    }
    Ok(acc.scale(A::one() / A::from_usize_(parts.len())))
}

/// One ranked candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedWord {
    pub word: String,
    pub cosine: f64,
}

/// Rank candidate words by descending cosine to the pseudo-token; ties
/// break to the earlier list position.
pub fn rank_words<A: Scalar>(
    pseudo_token: &Tensor<A>,
    candidates: &[String],
    text: &TextEncoder<A>,
    vocab: &Vocabulary,
) -> Result<Vec<RankedWord>> {
    if candidates.is_empty() {
        return Err(Error::Input("no candidate words".into()));
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for (i, w) in candidates.iter().enumerate() {
        let emb = word_token_embedding(text, vocab, w)?;
        let cosine = pseudo_token.cosine(&emb).to_f64_();
        if !cosine.is_finite() {
            return Err(Error::NonFinite(format!("cosine for word '{w}'")));
        }
        scored.push((i, w.clone(), cosine));
    }
    scored.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .map(|(_, word, cosine)| RankedWord { word, cosine })
        .collect())
}

/// One row of word-cloud export data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordCloudRow {
    pub image_id: String,
    pub attribute: String,
    pub rank: usize,
    pub word: String,
    pub cosine: f64,
}

/// Rank every attribute's candidates against the image's pseudo-tokens.
/// `top_n = 0` keeps all candidates.
pub fn interpret_tokens<A: Scalar>(
    image_id: &str,
    tokens: &PseudoTokenSet<A>,
    attribute_vocab: &AttributeVocabulary,
    text: &TextEncoder<A>,
    vocab: &Vocabulary,
    top_n: usize,
) -> Result<Vec<WordCloudRow>> {
    if tokens.vectors.len() != attribute_vocab.attributes.len() {
        return Err(Error::Input(format!(
            "pseudo-token count {} does not match attribute vocabulary size {}",
            tokens.vectors.len(),
            attribute_vocab.attributes.len()
        )));
    }
    let mut rows = Vec::new();
    for (token, attr) in tokens.vectors.iter().zip(&attribute_vocab.attributes) {
        let ranked = rank_words(token, &attr.words, text, vocab)?;
        let keep = if top_n == 0 { ranked.len() } else { top_n.min(ranked.len()) };
        for (rank, rw) in ranked.into_iter().take(keep).enumerate() {
            rows.push(WordCloudRow {
                image_id: image_id.to_string(),
                attribute: attr.name.clone(),
                rank: rank + 1,
                word: rw.word,
                cosine: rw.cosine,
            });
        }
    }
    Ok(rows)
}

/// CSV with the header `image_id,attribute,rank,word,cosine`.
pub fn wordcloud_csv(rows: &[WordCloudRow]) -> String {
    let mut out = String::from("image_id,attribute,rank,word,cosine\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6}\n",
            r.image_id, r.attribute, r.rank, r.word, r.cosine
        ));
    }
    out
}

pub fn export_wordcloud_data(rows: &[WordCloudRow], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(wordcloud_csv(rows).as_bytes())?;
    Ok(())
}
