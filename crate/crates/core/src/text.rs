//! Closed-vocabulary tokenizer and learned token embeddings standing in for
//! the text encoder.
//!
//! The vocabulary is `words ++ reserved`, where the reserved block holds
//! rarely used ids handed out to concept identifier tokens (`V*`). Padding
//! uses the out-of-range sentinel [`PAD_ID`] and embeds to zeros.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const SEQ_LEN: usize = 16;
pub const RESERVED_TOKENS: usize = 32;
pub const CONCEPT_TOKEN: &str = "V*";
pub const PAD_ID: u32 = u32::MAX;
const EMBED_STD: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
    reserved: usize,
    registered: Vec<u32>,
    class_words: BTreeSet<u32>,
    embeddings: Tensor,
}

/// Token ids of one prompt, padded to [`SEQ_LEN`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Number of real (unpadded) tokens.
    pub len: usize,
    /// Positions of the identifier token and its macro-class word(s).
    pub concept_indices: Vec<usize>,
}

impl TokenSequence {
    /// Keys that may receive attention. The empty prompt keeps slot 0 open
    /// (a zero embedding plus position 0) so attention rows stay stochastic.
    pub fn valid_mask(&self) -> Vec<bool> {
        (0..SEQ_LEN).map(|i| i < self.len.max(1)).collect()
    }
}

/// Prompt embedding plus the key mask consumed by cross-attention.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub emb: Tensor,
    pub valid: Arc<Vec<bool>>,
    pub concept_indices: Vec<usize>,
}

pub fn build_vocab(words: &[&str], d_txt: usize, seed: u64) -> Result<Vocabulary> {
    if words.is_empty() {
        return Err(Error::Input("vocabulary needs at least one word".into()));
    }
    if d_txt == 0 {
        return Err(Error::Input("embedding width must be positive".into()));
    }
    let mut index = HashMap::new();
    for (i, w) in words.iter().enumerate() {
        if w.is_empty() || w.contains(char::is_whitespace) || *w == CONCEPT_TOKEN {
            return Err(Error::Input(format!("invalid vocabulary word {w:?}")));
        }
        if index.insert(w.to_string(), i as u32).is_some() {
            return Err(Error::Input(format!("duplicate vocabulary word {w:?}")));
        }
    }
    let v = words.len() + RESERVED_TOKENS;
    let mut stream = rng::stream(seed, "vocab-embed", 0);
    Ok(Vocabulary {
        words: words.iter().map(|w| w.to_string()).collect(),
        index,
        reserved: RESERVED_TOKENS,
        registered: Vec::new(),
        class_words: BTreeSet::new(),
        embeddings: Tensor::randn(&[v, d_txt], EMBED_STD, &mut stream),
    })
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.words.len() + self.reserved
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn d_txt(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn reserved_range(&self) -> std::ops::Range<u32> {
        let start = self.words.len() as u32;
        start..start + self.reserved as u32
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn set_embeddings(&mut self, table: Tensor) -> Result<()> {
        if table.shape() != self.embeddings.shape() {
            return Err(Error::dim("set_embeddings", self.embeddings.shape(), table.shape()));
        }
        if !table.is_finite() {
            return Err(Error::Input("embedding table has non-finite entries".into()));
        }
        self.embeddings = table.detach();
        Ok(())
    }

    pub fn embedding_row(&self, id: u32) -> Result<Vec<f64>> {
        let d = self.d_txt();
        let i = id as usize;
        if i >= self.len() {
            return Err(Error::Vocabulary(format!("token id {id} out of range")));
        }
        Ok(self.embeddings.data()[i * d..(i + 1) * d].to_vec())
    }

    pub fn set_embedding_row(&mut self, id: u32, row: &[f64]) -> Result<()> {
        let d = self.d_txt();
        let i = id as usize;
        if i >= self.len() || row.len() != d {
            return Err(Error::dim("set_embedding_row", &[self.len(), d], &[i, row.len()]));
        }
        let mut data = self.embeddings.to_vec();
        data[i * d..(i + 1) * d].copy_from_slice(row);
        self.embeddings = Tensor::new(data, &[self.len(), d])?;
        Ok(())
    }

    /// Declares which words are macro classes; they join `V*` in the
    /// concept index set when they follow it.
    pub fn set_class_words(&mut self, classes: &[&str]) -> Result<()> {
        let mut set = BTreeSet::new();
        for c in classes {
            let id = self
                .id(c)
                .ok_or_else(|| Error::Vocabulary(format!("unknown class word {c:?}")))?;
            set.insert(id);
        }
        self.class_words = set;
        Ok(())
    }

    pub fn class_words(&self) -> Vec<(u32, &str)> {
        self.class_words
            .iter()
            .map(|&id| (id, self.words[id as usize].as_str()))
            .collect()
    }

    pub fn is_class(&self, id: u32) -> bool {
        self.class_words.contains(&id)
    }

    /// Claims the next unused reserved id for a new concept identifier.
    pub fn register_concept_token(&mut self) -> Result<u32> {
        let next = self
            .reserved_range()
            .find(|id| !self.registered.contains(id))
            .ok_or_else(|| {
                Error::Capacity(format!("all {} reserved concept ids are taken", self.reserved))
            })?;
        self.registered.push(next);
        Ok(next)
    }

    /// Makes a previously assigned identifier id the one `V*` resolves to.
    pub fn activate_concept(&mut self, id: u32) -> Result<()> {
        if !self.reserved_range().contains(&id) {
            return Err(Error::Vocabulary(format!("id {id} is not a reserved concept id")));
        }
        self.registered.retain(|&r| r != id);
        self.registered.push(id);
        Ok(())
    }

    pub fn active_concept(&self) -> Option<u32> {
        self.registered.last().copied()
    }

    pub fn registered_concepts(&self) -> &[u32] {
        &self.registered
    }

    pub fn embed(&self, tokens: &TokenSequence) -> Result<Tensor> {
        embed_with_table(tokens, &self.embeddings)
    }

    pub fn condition(&self, prompt: &str) -> Result<Conditioning> {
        let tokens = tokenize(prompt, self)?;
        Ok(Conditioning {
            emb: self.embed(&tokens)?,
            valid: Arc::new(tokens.valid_mask()),
            concept_indices: tokens.concept_indices,
        })
    }

    /// Conditioning for the empty prompt, used by classifier-free guidance.
    pub fn null_condition(&self) -> Result<Conditioning> {
        self.condition("")
    }
}

/// `"a photo of a V* <macro_class>"`.
pub fn render_template(macro_class: &str, vocab: &Vocabulary) -> Result<String> {
    let words: Vec<&str> = macro_class.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::Vocabulary("empty macro class".into()));
    }
    if let Some(w) = words.iter().find(|w| vocab.id(w).is_none()) {
        return Err(Error::Vocabulary(format!("unknown macro class word {w:?}")));
    }
    Ok(format!("a photo of a {CONCEPT_TOKEN} {}", words.join(" ")))
}

/// Template used when the macro class is deliberately dropped.
pub fn render_template_without_class() -> String {
    format!("a photo of a {CONCEPT_TOKEN}")
}

pub fn tokenize(prompt: &str, vocab: &Vocabulary) -> Result<TokenSequence> {
    let words: Vec<&str> = prompt.split_whitespace().take(SEQ_LEN).collect();
    let unknown: Vec<&str> = words
        .iter()
        .copied()
        .filter(|w| *w != CONCEPT_TOKEN && vocab.id(w).is_none())
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Vocabulary(format!("unknown words: {}", unknown.join(", "))));
    }
    let mut ids = Vec::with_capacity(SEQ_LEN);
    for w in &words {
        if *w == CONCEPT_TOKEN {
            let id = vocab.active_concept().ok_or_else(|| {
                Error::Vocabulary(format!("{CONCEPT_TOKEN} used but no concept token is registered"))
            })?;
            ids.push(id);
        } else {
            ids.push(vocab.id(w).expect("checked above"));
        }
    }
    let len = ids.len();

    let mut concept_indices = Vec::new();
    let no_classes = vocab.class_words.is_empty();
    for (p, w) in words.iter().enumerate() {
        if *w != CONCEPT_TOKEN {
            continue;
        }
        concept_indices.push(p);
        let mut q = p + 1;
        while q < len && words[q] != CONCEPT_TOKEN && vocab.is_class(ids[q]) {
            concept_indices.push(q);
            q += 1;
        }
        if no_classes && q == p + 1 && q < len && words[q] != CONCEPT_TOKEN {
            concept_indices.push(q);
        }
    }
    concept_indices.dedup();

    ids.resize(SEQ_LEN, PAD_ID);
    Ok(TokenSequence {
        ids,
        len,
        concept_indices,
    })
}

/// Sinusoidal position vector for slot `pos`.
pub fn position_vector(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * freq;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// Embeds a token sequence against an explicit table, which may be tracked.
pub fn embed_with_table(tokens: &TokenSequence, table: &Tensor) -> Result<Tensor> {
    let (v, d) = match table.shape() {
        [v, d] => (*v, *d),
        s => return Err(Error::dim("embed", s, &[0, 0])),
    };
    let padded = Tensor::concat_rows(&[table.clone(), Tensor::zeros(&[1, d])])?;
    let mut index = Vec::with_capacity(SEQ_LEN * d);
    for &id in &tokens.ids {
        let row = if id == PAD_ID {
            v
        } else if (id as usize) < v {
            id as usize
        } else {
            return Err(Error::Vocabulary(format!("token id {id} out of range for {v} rows")));
        };
        index.extend(row * d..(row + 1) * d);
    }
    let rows = padded.gather(Arc::new(index), &[tokens.ids.len(), d])?;
    let pos: Vec<f64> = (0..tokens.ids.len()).flat_map(|p| position_vector(p, d)).collect();
    rows.add(&Tensor::new(pos, &[tokens.ids.len(), d])?)
}

/// Replaces row `id` of `table` by a separate (possibly tracked) row tensor.
pub fn table_with_row(table: &Tensor, id: u32, row: &Tensor) -> Result<Tensor> {
    let v = table.shape()[0];
    let i = id as usize;
    if i >= v {
        return Err(Error::Vocabulary(format!("token id {id} out of range")));
    }
    let mut parts = Vec::new();
    if i > 0 {
        parts.push(table.slice_rows(0, i)?);
    }
    parts.push(row.reshape(&[1, table.shape()[1]])?);
    if i + 1 < v {
        parts.push(table.slice_rows(i + 1, v)?);
    }
    Tensor::concat_rows(&parts)
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    words: Vec<String>,
    reserved: usize,
    d_txt: usize,
    registered: Vec<u32>,
    class_words: Vec<String>,
    embeddings: String,
}

/// Writes `<stem>.json` (word list) and `<stem>.bin` (little-endian f64
/// embedding rows) into `dir`.
pub fn save_vocab(vocab: &Vocabulary, dir: &Path, stem: &str) -> Result<()> {
    let bin_name = format!("{stem}.bin");
    let file = VocabFile {
        words: vocab.words.clone(),
        reserved: vocab.reserved,
        d_txt: vocab.d_txt(),
        registered: vocab.registered.clone(),
        class_words: vocab.class_words().into_iter().map(|(_, w)| w.to_string()).collect(),
        embeddings: bin_name.clone(),
    };
    let json_path = dir.join(format!("{stem}.json"));
    std::fs::write(&json_path, serde_json::to_vec_pretty(&file)?).map_err(|e| Error::io(&json_path, e))?;
    let bytes: Vec<u8> = vocab.embeddings.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let bin_path = dir.join(bin_name);
    std::fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))
}

pub fn load_vocab(json_path: &Path) -> Result<Vocabulary> {
    let raw = std::fs::read(json_path).map_err(|e| Error::io(json_path, e))?;
    let file: VocabFile = serde_json::from_slice(&raw)?;
    let bin_path = json_path.parent().unwrap_or(Path::new(".")).join(&file.embeddings);
    let bytes = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let v = file.words.len() + file.reserved;
    if bytes.len() != v * file.d_txt * 8 {
        return Err(Error::Format(format!(
            "embedding blob has {} bytes, expected {}",
            bytes.len(),
            v * file.d_txt * 8
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let words: Vec<&str> = file.words.iter().map(String::as_str).collect();
    let mut vocab = build_vocab(&words, file.d_txt, 0)?;
    vocab.reserved = file.reserved;
    vocab.embeddings = Tensor::new(data, &[v, file.d_txt])?;
    vocab.registered = file.registered;
    let classes: Vec<&str> = file.class_words.iter().map(String::as_str).collect();
    vocab.set_class_words(&classes)?;
    Ok(vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn small() -> Vocabulary {
        build_vocab(&["a", "photo", "of", "dog"], 8, 0).unwrap()
    }

    #[test]
    fn vocab_size_counts_reserved_block() {
        assert_eq!(small().len(), 4 + 32);
        assert!(build_vocab(&[], 8, 0).is_err());
        assert!(build_vocab(&["a", "a"], 8, 0).is_err());
    }

    #[test]
    fn same_seed_same_table() {
        let a = build_vocab(&["x", "y"], 8, 3).unwrap();
        let b = build_vocab(&["x", "y"], 8, 3).unwrap();
        assert!(a.embeddings().bit_eq(b.embeddings()));
    }

    #[test]
    fn concept_tokens_come_from_the_reserved_block() {
        let mut v = small();
        let first = v.register_concept_token().unwrap();
        let second = v.register_concept_token().unwrap();
        assert_eq!(first, 4);
        assert_eq!(second, 5);
        for _ in 2..32 {
            v.register_concept_token().unwrap();
        }
        assert!(matches!(v.register_concept_token(), Err(Error::Capacity(_))));
    }

    #[test]
    fn template_rendering() {
        let mut v = build_vocab(&["a", "photo", "of", "dog", "car"], 8, 0).unwrap();
        assert_eq!(render_template("dog", &v).unwrap(), "a photo of a V* dog");
        assert_eq!(render_template("car", &v).unwrap(), "a photo of a V* car");
        assert!(matches!(render_template("", &v), Err(Error::Vocabulary(_))));
        v.set_class_words(&["dog", "car"]).unwrap();
        assert!(render_template("zebra", &v).is_err());
    }

    #[test]
    fn tokenize_marks_identifier_and_class() {
        let mut v = small();
        v.register_concept_token().unwrap();
        let t = tokenize("a photo of a V* dog", &v).unwrap();
        assert_eq!(t.len, 6);
        assert_eq!(t.ids.len(), SEQ_LEN);
        assert_eq!(t.concept_indices, vec![4, 5]);
        assert!(t.ids[6..].iter().all(|&i| i == PAD_ID));

        let plain = tokenize("a photo of a dog", &v).unwrap();
        assert!(plain.concept_indices.is_empty());

        let err = tokenize("a photo of a V* zebra", &v).unwrap_err().to_string();
        assert!(err.contains("zebra"), "{err}");
    }

    #[test]
    fn class_words_bound_multiword_concepts() {
        let mut v = build_vocab(&["a", "photo", "of", "teddy", "bear", "on", "beach"], 8, 0).unwrap();
        v.set_class_words(&["teddy", "bear"]).unwrap();
        v.register_concept_token().unwrap();
        let t = tokenize("a photo of a V* teddy bear on a beach", &v).unwrap();
        assert_eq!(t.concept_indices, vec![4, 5, 6]);
        let bare = tokenize("a photo of a V* on a beach", &v).unwrap();
        assert_eq!(bare.concept_indices, vec![4]);
    }

    #[test]
    fn empty_prompt_keeps_one_open_slot() {
        let v = small();
        let t = tokenize("", &v).unwrap();
        assert_eq!(t.len, 0);
        let mask = t.valid_mask();
        assert!(mask[0] && mask[1..].iter().all(|m| !m));
    }

    #[test]
    fn embed_single_token_is_row_plus_position() {
        let v = small();
        let t = tokenize("dog", &v).unwrap();
        let e = v.embed(&t).unwrap();
        let d = v.d_txt();
        let row = v.embedding_row(3).unwrap();
        let pos = position_vector(0, d);
        for j in 0..d {
            assert_eq!(e.data()[j], row[j] + pos[j]);
        }
        // padding rows carry only the position vector
        let pos1 = position_vector(1, d);
        assert_eq!(&e.data()[d..2 * d], pos1.as_slice());
    }

    #[test]
    fn swapping_tokens_only_moves_positions() {
        let v = small();
        let d = v.d_txt();
        let ab = v.embed(&tokenize("photo dog", &v).unwrap()).unwrap();
        let ba = v.embed(&tokenize("dog photo", &v).unwrap()).unwrap();
        let (p0, p1) = (position_vector(0, d), position_vector(1, d));
        for j in 0..d {
            let photo = ab.data()[j] - p0[j];
            let dog = ab.data()[d + j] - p1[j];
            assert!((ba.data()[j] - p0[j] - dog).abs() < 1e-15);
            assert!((ba.data()[d + j] - p1[j] - photo).abs() < 1e-15);
        }
        assert_eq!(&ab.data()[2 * d..], &ba.data()[2 * d..]);
    }

    #[test]
    fn embedding_row_gradient_matches_finite_differences() {
        let mut v = small();
        let id = v.register_concept_token().unwrap();
        let t = tokenize("a photo of a V* dog", &v).unwrap();
        let table = v.embeddings().clone();
        let probe = Tensor::randn(&[SEQ_LEN, v.d_txt()], 1.0, &mut rng::stream(1, "probe", 0));
        let row = Tensor::new(v.embedding_row(id).unwrap(), &[v.d_txt()]).unwrap();
        let err = grad_check(
            |r| {
                let e = embed_with_table(&t, &table_with_row(&table, id, r)?)?;
                Ok(e.square().mul(&probe)?.sum())
            },
            &row,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn vocab_roundtrips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = small();
        v.set_class_words(&["dog"]).unwrap();
        v.register_concept_token().unwrap();
        save_vocab(&v, dir.path(), "vocab").unwrap();
        let back = load_vocab(&dir.path().join("vocab.json")).unwrap();
        assert!(back.embeddings().bit_eq(v.embeddings()));
        assert_eq!(back.words(), v.words());
        assert_eq!(back.active_concept(), v.active_concept());
        assert!(back.is_class(3));
    }
}
