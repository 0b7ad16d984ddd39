//! Word-level tokenizer over a frequency-ranked vocabulary.
//!
//! Text is lowercased and split into maximal alphanumeric runs; everything
//! else (whitespace, punctuation) separates tokens and is dropped.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::corpus::{Corpus, Document};
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const NUM_RESERVED: u32 = 3;

pub const DEFAULT_MAX_LEN: usize = 256;

const RESERVED: [&str; 3] = ["[PAD]", "[UNK]", "[MASK]"];
const FILE_HEADER: &str =
    "# densecrab vocabulary v1: token on line i after this header has id i+3; ids 0=[PAD] 1=[UNK] 2=[MASK]";

/// Splits text into lowercased words.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from tokens ordered by id (reserved ids excluded).
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut token_to_id = HashMap::new();
        for tok in tokens {
            let tok = tok.into();
            if tok.is_empty() || words(&tok).next().as_deref() != Some(tok.as_str()) {
                return Err(Error::InvalidArgument(format!("`{tok}` is not a normalized word")));
            }
            let id = id_to_token.len() as u32;
            if token_to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::DuplicateId(tok));
            }
            id_to_token.push(tok);
        }
        Ok(Self {
            token_to_id,
            id_to_token,
        })
    }

    /// Number of ids, reserved ones included.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token[NUM_RESERVED as usize..]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(out, "{FILE_HEADER}").map_err(io)?;
        for tok in self.tokens() {
            writeln!(out, "{tok}").map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if i == 0 {
                if !line.starts_with("# densecrab vocabulary") {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: 1,
                        message: "missing vocabulary header".into(),
                    });
                }
                continue;
            }
            tokens.push(line);
        }
        Self::from_tokens(tokens).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })
    }
}

/// Builds a vocabulary keeping the `max_size - 3` most frequent words of the
/// corpus, ties broken lexicographically.
pub fn build_vocab(corpus: &Corpus, max_size: usize) -> Result<Vocabulary> {
    build_vocab_from_documents(corpus, max_size)
}

/// [`build_vocab`] over any document stream, e.g. several corpora chained.
pub fn build_vocab_from_documents<'a, I>(docs: I, max_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a Document>,
{
    if max_size <= NUM_RESERVED as usize {
        return Err(Error::InvalidArgument(format!(
            "vocabulary max size must exceed {NUM_RESERVED}, got {max_size}"
        )));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut any = false;
    for doc in docs {
        any = true;
        for w in words(&doc.full_text()) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    if !any {
        return Err(Error::Empty("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - NUM_RESERVED as usize);
    Vocabulary::from_tokens(ranked.into_iter().map(|(w, _)| w))
}

/// Integer token ids for one text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(ids: Vec<u32>) -> Self {
        Self(ids)
    }
}

/// Maps text to ids, unknown words to UNK, truncating to `max_len`.
pub fn tokenize(vocab: &Vocabulary, text: &str, max_len: usize) -> TokenSequence {
    TokenSequence(
        words(text)
            .take(max_len)
            .map(|w| vocab.id(&w).unwrap_or(UNK_ID))
            .collect(),
    )
}
