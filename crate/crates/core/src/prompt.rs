//! Prompt template parsing, tokenization, pseudo-token injection and the
//! base image-text contrastive loss.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_rows, concat_scalars, mean_scalars, Tape, Var};
use crate::error::{Error, Result};
use crate::inversion::PseudoTokenSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The five canonical attribute slots of the default template.
pub const DEFAULT_ATTRIBUTE_NAMES: [&str; 5] =
    ["top", "underneath", "hairstyle", "shoes", "carrying"];

/// Default prompt template with one slot per pedestrian attribute.
pub const DEFAULT_TEMPLATE: &str = "A photo of a person wearing <S1> on top, \
     <S2> underneath, <S3> hairstyle, <S4> shoes, carrying <S5>.";

/// Template text with `<S1>`..`<SI>` placeholder markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub text: String,
    pub attribute_names: Vec<String>,
}

impl PromptTemplate {
    pub fn slot_count(&self) -> usize {
        self.attribute_names.len()
    }

    /// The template's plain words in textual order (may repeat).
    pub fn words(&self) -> Vec<String> {
        lex(&self.text)
            .expect("a parsed template lexes")
            .into_iter()
            .filter_map(|p| match p {
                Piece::Word(w) => Some(w),
                Piece::Slot(_) => None,
            })
            .collect()
    }
}

/// Lexical element of a template: either a word or an attribute slot.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Word(String),
    Slot(usize),
}

/// Lowercase word/punctuation tokenizer that keeps `<si>` markers intact.
fn lex(text: &str) -> Result<Vec<Piece>> {
    let lower = text.to_lowercase();
    let mut pieces = Vec::new();
    let bytes = lower.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c == '<' {
            let end = lower[i..]
                .find('>')
                .map(|p| i + p)
                .ok_or_else(|| Error::Template(format!("unterminated marker at byte {i}")))?;
            let inner = &lower[i + 1..end];
            let idx: usize = inner
                .strip_prefix('s')
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| Error::Template(format!("malformed marker <{inner}>")))?;
            if idx == 0 {
                return Err(Error::Template("slot numbering starts at <S1>".into()));
            }
            pieces.push(Piece::Slot(idx - 1));
            i = end + 1;
        } else if c.is_alphanumeric() {
            let start = i;
            while i < bytes.len() && (bytes[i] as char).is_alphanumeric() {
                i += 1;
            }
            pieces.push(Piece::Word(lower[start..i].to_string()));
        } else {
            i += 1; // whitespace and punctuation separate tokens
        }
    }
    Ok(pieces)
}

/// Parse a template, discovering slots in textual order.
pub fn parse_template(text: &str) -> Result<PromptTemplate> {
    let pieces = lex(text)?;
    let mut seen: Vec<usize> = Vec::new();
    for p in &pieces {
        if let Piece::Slot(i) = p {
            if seen.contains(i) {
                return Err(Error::Template(format!("duplicated slot <S{}>", i + 1)));
            }
            seen.push(*i);
        }
    }
    if seen.is_empty() {
        return Err(Error::Template("template has no <S1>.. slots".into()));
    }
    let count = seen.len();
    for (pos, &idx) in seen.iter().enumerate() {
        if idx != pos {
            if idx >= count {
                return Err(Error::Template(format!("missing slot <S{}>", pos + 1)));
            }
            return Err(Error::Template(format!(
                "slot <S{}> out of order at position {}",
                idx + 1,
                pos + 1
            )));
        }
    }
    let attribute_names = if count == DEFAULT_ATTRIBUTE_NAMES.len() {
        DEFAULT_ATTRIBUTE_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (1..=count).map(|i| format!("s{i}")).collect()
    };
    Ok(PromptTemplate {
        text: text.to_string(),
        attribute_names,
    })
}

/// Reserved token ids of a vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReservedIds {
    pub begin: u32,
    pub end: u32,
    pub pad: u32,
    pub placeholders: Vec<u32>,
}

/// Closed word vocabulary; token ids double as embedding-table rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub tokens: BTreeMap<String, u32>,
    pub reserved: ReservedIds,
}

impl Vocabulary {
    /// Build a vocabulary from words, assigning ids after the reserved block.
    pub fn from_words<I, S>(words: I, placeholder_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let placeholders: Vec<u32> = (3..3 + placeholder_count as u32).collect();
        let mut next = 3 + placeholder_count as u32;
        let mut tokens = BTreeMap::new();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !tokens.contains_key(&w) {
                tokens.insert(w, next);
                next += 1;
            }
        }
        let vocab = Self {
            tokens,
            reserved: ReservedIds {
                begin: 0,
                end: 1,
                pad: 2,
                placeholders,
            },
        };
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<u32> = self.tokens.values().copied().collect();
        ids.push(self.reserved.begin);
        ids.push(self.reserved.end);
        ids.push(self.reserved.pad);
        ids.extend(&self.reserved.placeholders);
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != n {
            return Err(Error::Config("vocabulary ids are not bijective".into()));
        }
        Ok(())
    }

    pub fn id_of(&self, word: &str) -> Option<u32> {
        self.tokens.get(word).copied()
    }

    /// Number of embedding rows required (max id + 1).
    pub fn table_size(&self) -> usize {
        let max_tok = self.tokens.values().copied().max().unwrap_or(0);
        let max_res = self
            .reserved
            .placeholders
            .iter()
            .copied()
            .chain([self.reserved.begin, self.reserved.end, self.reserved.pad])
            .max()
            .unwrap_or(0);
        max_tok.max(max_res) as usize + 1
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let vocab: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        vocab.validate()?;
        Ok(vocab)
    }
}

/// Token-id sequence of a template with recorded slot positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPrompt {
    pub token_ids: Vec<u32>,
    /// Index of `<Si>` in `token_ids`, one entry per attribute slot.
    pub placeholder_positions: Vec<usize>,
}

impl TokenizedPrompt {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Tokenize a template against a vocabulary; ids are bracketed by the
/// begin/end markers and slot positions are recorded.
pub fn tokenize(template: &PromptTemplate, vocab: &Vocabulary) -> Result<TokenizedPrompt> {
    let pieces = lex(&template.text)?;
    let mut token_ids = vec![vocab.reserved.begin];
    let mut placeholder_positions = vec![usize::MAX; template.slot_count()];
    for p in pieces {
        match p {
            Piece::Word(w) => {
                let id = vocab
                    .id_of(&w)
                    .ok_or_else(|| Error::UnknownWord(w.clone()))?;
                token_ids.push(id);
            }
            Piece::Slot(i) => {
                placeholder_positions[i] = token_ids.len();
                token_ids.push(vocab.reserved.placeholders[i]);
            }
        }
    }
    token_ids.push(vocab.reserved.end);
    Ok(TokenizedPrompt {
        token_ids,
        placeholder_positions,
    })
}

/// Embed a tokenized prompt, writing pseudo-token vectors into the slots.
pub fn inject_pseudo_tokens<A: Scalar>(
    tokens: &TokenizedPrompt,
    pseudo: &PseudoTokenSet<A>,
    embedding_table: &Tensor<A>,
) -> Result<Tensor<A>> {
    let e = embedding_table.shape()[1];
    if pseudo.vectors.len() != tokens.placeholder_positions.len() {
        return Err(Error::Input(format!(
            "pseudo-token count {} does not match slot count {}",
            pseudo.vectors.len(),
            tokens.placeholder_positions.len()
        )));
    }
    for v in &pseudo.vectors {
        if v.len() != e {
            return Err(Error::Input(format!(
                "pseudo-token dim {} does not match embedding dim {e}",
                v.len()
            )));
        }
    }
    let mut rows: Vec<Vec<A>> = tokens
        .token_ids
        .iter()
        .map(|&id| embedding_table.row(id as usize).to_vec())
        .collect();
    for (slot, &pos) in tokens.placeholder_positions.iter().enumerate() {
        rows[pos] = pseudo.vectors[slot].data().to_vec();
    }
    Ok(Tensor::from_rows(&rows))
}

/// Tape variant of [`inject_pseudo_tokens`]: slot rows are vars so the
/// gradient path into the pseudo-tokens stays live.
pub fn inject_pseudo_tokens_var<'t, A: Scalar>(
    tape: &'t Tape<A>,
    tokens: &TokenizedPrompt,
    pseudo: &[Var<'t, A>],
    embedding_table: &Tensor<A>,
) -> Var<'t, A> {
    assert_eq!(pseudo.len(), tokens.placeholder_positions.len());
    let mut rows: Vec<Var<'t, A>> = tokens
        .token_ids
        .iter()
        .map(|&id| {
            tape.leaf(Tensor::new(
                vec![embedding_table.shape()[1]],
                embedding_table.row(id as usize).to_vec(),
            ))
        })
        .collect();
    for (slot, &pos) in tokens.placeholder_positions.iter().enumerate() {
        rows[pos] = pseudo[slot];
    }
    concat_rows(tape, &rows)
}

fn check_batch<A: Scalar>(image_feats: &[Tensor<A>], text_feats: &[Tensor<A>], tau: A) -> Result<()> {
    if image_feats.is_empty() || image_feats.len() != text_feats.len() {
        return Err(Error::Input(format!(
            "batch sizes {} and {} must match and be nonzero",
            image_feats.len(),
            text_feats.len()
        )));
    }
    if tau <= A::zero() {
        return Err(Error::Input("temperature must be positive".into()));
    }
    for f in image_feats.iter().chain(text_feats) {
        if f.norm() == A::zero() {
            return Err(Error::Normalization("zero-norm feature vector".into()));
        }
    }
    Ok(())
}

/// Symmetric InfoNCE over diagonal-matched image/text pairs, cosine
/// similarity on L2-normalized features.
pub fn clip_contrastive_loss<A: Scalar>(
    image_feats: &[Tensor<A>],
    text_feats: &[Tensor<A>],
    tau: A,
) -> Result<A> {
    let tape = Tape::new();
    let iv: Vec<_> = image_feats.iter().map(|f| tape.leaf(f.clone())).collect();
    let tv: Vec<_> = text_feats.iter().map(|f| tape.leaf(f.clone())).collect();
    Ok(clip_contrastive_loss_var(&tape, &iv, &tv, tau)?.value().item())
}

/// Tape variant of [`clip_contrastive_loss`].
pub fn clip_contrastive_loss_var<'t, A: Scalar>(
    tape: &'t Tape<A>,
    image_feats: &[Var<'t, A>],
    text_feats: &[Var<'t, A>],
    tau: A,
) -> Result<Var<'t, A>> {
    let iv: Vec<Tensor<A>> = image_feats.iter().map(Var::value).collect();
    let tv: Vec<Tensor<A>> = text_feats.iter().map(Var::value).collect();
    check_batch(&iv, &tv, tau)?;
    let n = image_feats.len();
    let inv_tau = A::one() / tau;
    let img: Vec<_> = image_feats.iter().map(|f| f.l2_normalize()).collect();
    let txt: Vec<_> = text_feats.iter().map(|f| f.l2_normalize()).collect();
    // sims[a][b] = cos(img_a, txt_b) / tau
    let sims: Vec<Vec<Var<'t, A>>> = img
        .iter()
        .map(|v| txt.iter().map(|t| v.dot(*t).scale(inv_tau)).collect())
        .collect();
    let mut i2t_terms = Vec::with_capacity(n);
    let mut t2i_terms = Vec::with_capacity(n);
    for a in 0..n {
        let row = concat_scalars(tape, &sims[a]);
        i2t_terms.push(row.logsumexp().sub(sims[a][a]));
        let col: Vec<_> = (0..n).map(|b| sims[b][a]).collect();
        let col = concat_scalars(tape, &col);
        t2i_terms.push(col.logsumexp().sub(sims[a][a]));
    }
    let l_i2t = mean_scalars(tape, &i2t_terms);
    let l_t2i = mean_scalars(tape, &t2i_terms);
    Ok(l_i2t.add(l_t2i))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn five_slot_template() -> PromptTemplate {
        parse_template(DEFAULT_TEMPLATE).unwrap()
    }

    fn template_vocab() -> Vocabulary {
        Vocabulary::from_words(
            [
                "a", "photo", "of", "person", "wearing", "on", "top", "underneath", "hairstyle",
                "shoes", "carrying",
            ],
            5,
        )
        .unwrap()
    }

    #[test]
    fn default_template_has_five_named_slots() {
        let t = five_slot_template();
        assert_eq!(t.slot_count(), 5);
        assert_eq!(t.attribute_names, DEFAULT_ATTRIBUTE_NAMES.to_vec());
    }

    #[test]
    fn minimal_single_slot_template() {
        let t = parse_template("hello <S1>").unwrap();
        assert_eq!(t.slot_count(), 1);
        assert_eq!(t.attribute_names, vec!["s1".to_string()]);
    }

    #[test]
    fn duplicate_slot_is_rejected() {
        let err = parse_template("a <S1> b <S1>").unwrap_err();
        assert!(err.to_string().contains("<S1>"), "{err}");
    }

    #[test]
    fn missing_slot_is_rejected() {
        let err = parse_template("a <S1> b <S3>").unwrap_err();
        assert!(err.to_string().contains("missing") || err.to_string().contains("<S"), "{err}");
    }

    #[test]
    fn tokenize_slot_only_template() {
        let t = parse_template("<S1>").unwrap();
        let v = Vocabulary::from_words(Vec::<&str>::new(), 1).unwrap();
        let tok = tokenize(&t, &v).unwrap();
        assert_eq!(
            tok.token_ids,
            vec![v.reserved.begin, v.reserved.placeholders[0], v.reserved.end]
        );
        assert_eq!(tok.placeholder_positions, vec![1]);
    }

    #[test]
    fn tokenize_default_template_golden() {
        let t = five_slot_template();
        let v = template_vocab();
        let tok = tokenize(&t, &v).unwrap();
        // Golden sequence captured from the shipped vocabulary layout:
        // reserved 0..=7, then words alphabetically from id 8.
        let id = |w: &str| v.id_of(w).unwrap();
        let expected = vec![
            v.reserved.begin,
            id("a"),
            id("photo"),
            id("of"),
            id("a"),
            id("person"),
            id("wearing"),
            v.reserved.placeholders[0],
            id("on"),
            id("top"),
            v.reserved.placeholders[1],
            id("underneath"),
            v.reserved.placeholders[2],
            id("hairstyle"),
            v.reserved.placeholders[3],
            id("shoes"),
            id("carrying"),
            v.reserved.placeholders[4],
        ];
        let mut expected = expected;
        expected.push(v.reserved.end);
        assert_eq!(tok.token_ids, expected);
        assert_eq!(tok.placeholder_positions, vec![7, 10, 12, 14, 17]);
    }

    #[test]
    fn unknown_word_is_named_in_error() {
        let t = parse_template("zzqx <S1>").unwrap();
        let v = Vocabulary::from_words(Vec::<&str>::new(), 1).unwrap();
        let err = tokenize(&t, &v).unwrap_err();
        assert!(err.to_string().contains("zzqx"), "{err}");
    }

    #[test]
    fn single_pair_contrastive_loss_is_zero() {
        let f = vec![Tensor::new(vec![2], vec![1.0, 0.0])];
        let loss: f64 = clip_contrastive_loss(&f, &f, 0.07).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn orthonormal_pair_matches_hand_softmax() {
        let feats = vec![
            Tensor::new(vec![2], vec![1.0, 0.0]),
            Tensor::new(vec![2], vec![0.0, 1.0]),
        ];
        let tau = 0.07f64;
        let loss = clip_contrastive_loss(&feats, &feats, tau).unwrap();
        // each direction, each sample: -log(e^{1/tau} / (e^{1/tau} + e^{0}))
        let per = -((1.0 / tau).exp() / ((1.0 / tau).exp() + 1.0)).ln();
        assert!((loss - 2.0 * per).abs() < 1e-9, "{loss} vs {}", 2.0 * per);
    }

    #[test]
    fn contrastive_loss_is_scale_invariant() {
        let img = vec![
            Tensor::new(vec![3], vec![0.2, -0.4, 0.9]),
            Tensor::new(vec![3], vec![-1.0, 0.3, 0.1]),
        ];
        let txt = vec![
            Tensor::new(vec![3], vec![0.3, 0.5, -0.2]),
            Tensor::new(vec![3], vec![0.9, -0.1, 0.4]),
        ];
        let a: f64 = clip_contrastive_loss(&img, &txt, 0.07).unwrap();
        let img3: Vec<_> = img.iter().map(|f| f.scale(3.0)).collect();
        let b = clip_contrastive_loss(&img3, &txt, 0.07).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn zero_norm_feature_is_rejected() {
        let img = vec![Tensor::<f64>::zeros(&[3])];
        let txt = vec![Tensor::new(vec![3], vec![1.0, 0.0, 0.0])];
        assert!(clip_contrastive_loss(&img, &txt, 0.07).is_err());
    }
}
