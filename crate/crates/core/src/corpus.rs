//! Corpus ingestion, vocabulary construction, symbol rendering, and
//! training-block assembly.
//!
//! Rendering conventions: at char level every word is followed by a SEP
//! symbol and the sentence-final SEP is replaced by EOS; in tag-prefixed
//! (salm) mode each word's tag symbol sits immediately before its first
//! lexical symbol. Word level is analogous with one symbol per word and no
//! SEP.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Char,
    Word,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Char => "char",
            Level::Word => "word",
        })
    }
}

impl std::str::FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(Level::Char),
            "word" => Ok(Level::Word),
            other => Err(Error::InvalidConfig(format!("unknown level {other:?}"))),
        }
    }
}

/// Whether sequences carry tag-prefix symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Salm,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Salm => "salm",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "salm" => Ok(Mode::Salm),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    /// One "token<TAB>TAG" per line, blank line between sentences.
    Conll2Col,
}

/// A sentence of (surface, tag) tokens. Surfaces are lowercased on load;
/// tags are kept verbatim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSentence {
    pub tokens: Vec<(String, String)>,
}

impl TaggedSentence {
    pub fn new(tokens: Vec<(String, String)>) -> Self {
        TaggedSentence { tokens }
    }

    pub fn surfaces(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|(s, _)| s.as_str())
    }
}

/// Read a tagged corpus file.
pub fn load_tagged_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<TaggedSentence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    match format {
        CorpusFormat::Conll2Col => parse_conll_2col(&text),
    }
}

/// Parse the two-column format from an in-memory string.
pub fn parse_conll_2col(text: &str) -> Result<Vec<TaggedSentence>> {
    let mut sentences = Vec::new();
    let mut current: Vec<(String, String)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            if !current.is_empty() {
                sentences.push(TaggedSentence::new(std::mem::take(&mut current)));
            }
            continue;
        }
        let (token, tag) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("expected \"token<TAB>TAG\", got {line:?}"),
        })?;
        let surface = token.to_lowercase();
        if surface.is_empty() {
            return Err(Error::Parse { line: line_no, msg: "empty token field".into() });
        }
        if surface.chars().any(char::is_whitespace) {
            return Err(Error::Parse { line: line_no, msg: format!("token {token:?} contains whitespace") });
        }
        if tag.is_empty() {
            return Err(Error::Parse { line: line_no, msg: "empty tag field".into() });
        }
        if tag.chars().any(char::is_whitespace) {
            return Err(Error::Parse { line: line_no, msg: format!("tag {tag:?} contains whitespace") });
        }
        current.push((surface, tag.to_string()));
    }
    if !current.is_empty() {
        sentences.push(TaggedSentence::new(current));
    }
    Ok(sentences)
}

/// Read a plain corpus: UTF-8, one sentence per line, blank lines skipped.
pub fn load_plain_corpus(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Split a corpus into (train pool, validation, test): the last
/// `val + test` sentences form the held-out sets, validation first.
pub fn split_corpus<T>(sentences: &[T], val: usize, test: usize) -> Result<(&[T], &[T], &[T])> {
    let held = val + test;
    if held >= sentences.len() {
        return Err(Error::InvalidConfig(format!(
            "split of {val} validation + {test} test sentences leaves no training data ({} total)",
            sentences.len()
        )));
    }
    let train_end = sentences.len() - held;
    let val_end = train_end + val;
    Ok((&sentences[..train_end], &sentences[train_end..val_end], &sentences[val_end..]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymbolKind {
    Lexical,
    Tag,
    Unk,
    Eos,
    Sep,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolEntry {
    pub text: String,
    pub kind: SymbolKind,
}

/// Bijective symbol <-> id table with dense ids from 0.
///
/// Layout: lexical symbols first (word level: by descending frequency, ties
/// by first occurrence; char level: first occurrence), then tags in first
/// occurrence order, then UNK, EOS, and (char level only) SEP.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    level: Level,
    entries: Vec<SymbolEntry>,
    lex_index: HashMap<String, usize>,
    tag_index: HashMap<String, usize>,
    unk: usize,
    eos: usize,
    sep: Option<usize>,
    tag_ids: Vec<usize>,
}

pub const UNK_TEXT: &str = "<unk>";
pub const EOS_TEXT: &str = "<eos>";
pub const SEP_TEXT: &str = "<sep>";

impl Vocabulary {
    /// Build from tagged sentences. `word_cap` bounds the lexical symbol
    /// count at word level; char level keeps every observed character.
    pub fn build(corpus: &[TaggedSentence], level: Level, word_cap: usize) -> Result<Self> {
        if word_cap == 0 {
            return Err(Error::InvalidConfig("word_cap must be at least 1".into()));
        }
        if corpus.is_empty() {
            return Err(Error::InvalidInput("cannot build a vocabulary from an empty corpus".into()));
        }

        let mut entries = Vec::new();
        let mut lex_index = HashMap::new();
        match level {
            Level::Word => {
                // frequency with first-occurrence tiebreak
                let mut freq: HashMap<&str, (usize, usize)> = HashMap::new();
                let mut order = 0usize;
                for sent in corpus {
                    for surface in sent.surfaces() {
                        let e = freq.entry(surface).or_insert((0, order));
                        e.0 += 1;
                        order += 1;
                    }
                }
                let mut ranked: Vec<(&str, (usize, usize))> = freq.into_iter().collect();
                ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
                ranked.truncate(word_cap);
                for (surface, _) in ranked {
                    lex_index.insert(surface.to_string(), entries.len());
                    entries.push(SymbolEntry { text: surface.to_string(), kind: SymbolKind::Lexical });
                }
            }
            Level::Char => {
                for sent in corpus {
                    for surface in sent.surfaces() {
                        for ch in surface.chars() {
                            let key = ch.to_string();
                            if !lex_index.contains_key(&key) {
                                lex_index.insert(key.clone(), entries.len());
                                entries.push(SymbolEntry { text: key, kind: SymbolKind::Lexical });
                            }
                        }
                    }
                }
            }
        }

        let mut tag_index = HashMap::new();
        for sent in corpus {
            for (_, tag) in &sent.tokens {
                if !tag_index.contains_key(tag) {
                    tag_index.insert(tag.clone(), entries.len());
                    entries.push(SymbolEntry { text: tag.clone(), kind: SymbolKind::Tag });
                }
            }
        }

        let unk = entries.len();
        entries.push(SymbolEntry { text: UNK_TEXT.into(), kind: SymbolKind::Unk });
        let eos = entries.len();
        entries.push(SymbolEntry { text: EOS_TEXT.into(), kind: SymbolKind::Eos });
        let sep = match level {
            Level::Char => {
                entries.push(SymbolEntry { text: SEP_TEXT.into(), kind: SymbolKind::Sep });
                Some(entries.len() - 1)
            }
            Level::Word => None,
        };

        let tag_ids = tag_index.values().copied().collect::<std::collections::BTreeSet<_>>();
        Ok(Vocabulary {
            level,
            entries,
            lex_index,
            tag_index,
            unk,
            eos,
            sep,
            tag_ids: tag_ids.into_iter().collect(),
        })
    }

    /// Reassemble from serialized parts (model file loading).
    pub(crate) fn from_entries(level: Level, entries: Vec<SymbolEntry>) -> Result<Self> {
        let mut lex_index = HashMap::new();
        let mut tag_index = HashMap::new();
        let mut unk = None;
        let mut eos = None;
        let mut sep = None;
        let mut tag_ids = Vec::new();
        for (id, e) in entries.iter().enumerate() {
            match e.kind {
                SymbolKind::Lexical => {
                    if lex_index.insert(e.text.clone(), id).is_some() {
                        return Err(Error::ModelFormat(format!("duplicate lexical symbol {:?}", e.text)));
                    }
                }
                SymbolKind::Tag => {
                    if tag_index.insert(e.text.clone(), id).is_some() {
                        return Err(Error::ModelFormat(format!("duplicate tag symbol {:?}", e.text)));
                    }
                    tag_ids.push(id);
                }
                SymbolKind::Unk => {
                    if unk.replace(id).is_some() {
                        return Err(Error::ModelFormat("duplicate unk symbol".into()));
                    }
                }
                SymbolKind::Eos => {
                    if eos.replace(id).is_some() {
                        return Err(Error::ModelFormat("duplicate eos symbol".into()));
                    }
                }
                SymbolKind::Sep => {
                    if sep.replace(id).is_some() {
                        return Err(Error::ModelFormat("duplicate sep symbol".into()));
                    }
                }
            }
        }
        let unk = unk.ok_or_else(|| Error::ModelFormat("vocabulary is missing unk".into()))?;
        let eos = eos.ok_or_else(|| Error::ModelFormat("vocabulary is missing eos".into()))?;
        if level == Level::Char && sep.is_none() {
            return Err(Error::ModelFormat("char-level vocabulary is missing sep".into()));
        }
        Ok(Vocabulary { level, entries, lex_index, tag_index, unk, eos, sep, tag_ids })
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[SymbolEntry] {
        &self.entries
    }

    pub fn unk(&self) -> usize {
        self.unk
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn sep(&self) -> Option<usize> {
        self.sep
    }

    /// Tag symbol ids in ascending order.
    pub fn tag_ids(&self) -> &[usize] {
        &self.tag_ids
    }

    pub fn lexical_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == SymbolKind::Lexical).count()
    }

    pub fn text(&self, id: usize) -> &str {
        &self.entries[id].text
    }

    pub fn kind(&self, id: usize) -> SymbolKind {
        self.entries[id].kind
    }

    pub fn tag_id(&self, tag: &str) -> Option<usize> {
        self.tag_index.get(tag).copied()
    }

    /// Lexical ids for one word (chars at char level, a single id at word
    /// level); out-of-vocabulary items map to UNK.
    pub fn encode_word(&self, surface: &str) -> Vec<usize> {
        match self.level {
            Level::Word => vec![self.lex_index.get(surface).copied().unwrap_or(self.unk)],
            Level::Char => surface
                .chars()
                .map(|ch| self.lex_index.get(ch.to_string().as_str()).copied().unwrap_or(self.unk))
                .collect(),
        }
    }

    /// Word text back from a span's ids: lexical symbols and UNK keep their
    /// text, separators vanish.
    pub fn decode_span(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            match self.kind(id) {
                SymbolKind::Lexical | SymbolKind::Unk => out.push_str(self.text(id)),
                SymbolKind::Tag => {}
                SymbolKind::Eos | SymbolKind::Sep => {}
            }
        }
        out
    }
}

/// Integer rendering of one sentence. `word_spans` are half-open index
/// ranges covering each word's lexical symbols (plus its trailing SEP at
/// char level); tag symbols and the final EOS sit outside every span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolSequence {
    pub ids: Vec<usize>,
    pub mode: Mode,
    pub level: Level,
    pub word_spans: Vec<(usize, usize)>,
}

/// Render one sentence against a vocabulary.
pub fn render_sequence(sentence: &TaggedSentence, vocab: &Vocabulary, mode: Mode) -> Result<SymbolSequence> {
    let mut ids = Vec::new();
    let mut spans = Vec::new();
    let n = sentence.tokens.len();
    for (i, (surface, tag)) in sentence.tokens.iter().enumerate() {
        if mode == Mode::Salm {
            let tag_id = vocab.tag_id(tag).ok_or_else(|| Error::UnknownTag(tag.clone()))?;
            ids.push(tag_id);
        }
        let start = ids.len();
        ids.extend(vocab.encode_word(surface));
        let last = i + 1 == n;
        if !last {
            if let Some(sep) = vocab.sep() {
                ids.push(sep);
            }
        }
        spans.push((start, ids.len()));
    }
    ids.push(vocab.eos());
    Ok(SymbolSequence { ids, mode, level: vocab.level(), word_spans: spans })
}

/// Per-word symbol groups for a plain (untagged) word sequence, excluding
/// tag slots. Each group carries the word's lexical ids plus its boundary
/// symbol: SEP after non-final words at char level, EOS closing the last
/// group when `final_eos` is set. With `final_eos` false the sequence is
/// treated as a fragment (the last char-level word still takes a SEP, and
/// no EOS is emitted at either level).
pub fn word_groups(words: &[&str], vocab: &Vocabulary, final_eos: bool) -> Result<Vec<Vec<usize>>> {
    let mut groups = Vec::with_capacity(words.len());
    let n = words.len();
    for (i, word) in words.iter().enumerate() {
        let surface = word.to_lowercase();
        if surface.is_empty() || surface.chars().any(char::is_whitespace) {
            return Err(Error::InvalidInput(format!("bad word {word:?} at position {i}")));
        }
        let mut group = vocab.encode_word(&surface);
        let last = i + 1 == n;
        if last && final_eos {
            group.push(vocab.eos());
        } else if let Some(sep) = vocab.sep() {
            group.push(sep);
        }
        groups.push(group);
    }
    Ok(groups)
}

/// One training block: `input[r][t]` predicts `target[r][t]`, which is the
/// next symbol of row r's stream.
#[derive(Debug, Clone)]
pub struct Block {
    pub index: usize,
    pub input: ndarray::Array2<usize>,
    pub target: ndarray::Array2<usize>,
}

impl Block {
    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }

    pub fn block_len(&self) -> usize {
        self.input.ncols()
    }
}

#[derive(Debug, Clone)]
pub struct BlockSet {
    pub batch_size: usize,
    pub block_len: usize,
    pub blocks: Vec<Block>,
}

impl BlockSet {
    pub fn total_cells(&self) -> usize {
        self.batch_size * self.block_len * self.blocks.len()
    }
}

/// Concatenate rendered sequences in corpus order, reshape into
/// `batch_size` contiguous rows, and slice the rows into next-symbol
/// prediction blocks of `block_len`. The tail that does not fill a whole
/// row (or a whole block plus one lookahead symbol) is dropped.
pub fn make_blocks(sequences: &[SymbolSequence], batch_size: usize, block_len: usize) -> Result<BlockSet> {
    if batch_size == 0 || block_len == 0 {
        return Err(Error::InvalidConfig("batch_size and block_len must be at least 1".into()));
    }
    let flat: Vec<usize> = sequences.iter().flat_map(|s| s.ids.iter().copied()).collect();
    let required = batch_size * (block_len + 1);
    if flat.len() < required {
        return Err(Error::InsufficientData { required, available: flat.len() });
    }
    let row_len = flat.len() / batch_size;
    let num_blocks = (row_len - 1) / block_len;
    let mut blocks = Vec::with_capacity(num_blocks);
    for k in 0..num_blocks {
        let mut input = ndarray::Array2::zeros((batch_size, block_len));
        let mut target = ndarray::Array2::zeros((batch_size, block_len));
        for r in 0..batch_size {
            let base = r * row_len + k * block_len;
            for t in 0..block_len {
                input[(r, t)] = flat[base + t];
                target[(r, t)] = flat[base + t + 1];
            }
        }
        blocks.push(Block { index: k, input, target });
    }
    Ok(BlockSet { batch_size, block_len, blocks })
}
