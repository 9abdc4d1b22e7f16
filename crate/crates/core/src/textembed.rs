//! Initial vectors for description and comment nodes.
//!
//! Two sources are supported: averaged word vectors read from a GloVe text
//! file, and precomputed sentence vectors delivered in the
//! [`interchange`](crate::interchange) container. A seeded uniform fallback
//! covers runs without any pretrained text knowledge.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::interchange::{self, VectorRecord};

const LONG_STOPWORDS: &str = include_str!("stopwords_long.txt");

/// Share of GloVe lines that may be skipped before loading fails.
const MAX_SKIPPED_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Default)]
pub struct Stoplist(HashSet<String>);

impl Stoplist {
    /// The 667-word long English stopword list.
    pub fn long_english() -> Self {
        Self::from_words(LONG_STOPWORDS.split_whitespace())
    }

    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Stoplist(words.into_iter().map(|w| w.as_ref().to_lowercase()).collect())
    }

    /// Reads a whitespace-separated word list.
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut words = HashSet::new();
        for line in reader.lines() {
            words.extend(line?.split_whitespace().map(str::to_lowercase));
        }
        Ok(Stoplist(words))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(token)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Lowercases, splits on non-alphanumeric characters and drops stopwords.
pub fn tokenize_and_strip(text: &str, stoplist: &Stoplist) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !stoplist.contains(t))
        .collect()
}

/// Token -> vector lookup with one shared dimension.
#[derive(Debug, Clone)]
pub struct WordVectorTable {
    dimension: usize,
    index: HashMap<String, usize>,
    data: Vec<f64>,
    /// Lines rejected while loading.
    pub skipped: usize,
    /// Entry lines read from the source, including ones not retained.
    pub lines: usize,
}

impl WordVectorTable {
    pub fn new(dimension: usize) -> Self {
        WordVectorTable { dimension, index: HashMap::new(), data: Vec::new(), skipped: 0, lines: 0 }
    }

    pub fn insert(&mut self, token: &str, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dimension {
            return Err(Error::Dimension { expected: self.dimension, actual: vector.len() });
        }
        match self.index.get(token) {
            Some(&row) => self.data[row * self.dimension..(row + 1) * self.dimension].copy_from_slice(vector),
            None => {
                self.index.insert(token.to_string(), self.index.len());
                self.data.extend_from_slice(vector);
            }
        }
        Ok(())
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&row| &self.data[row * self.dimension..(row + 1) * self.dimension])
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// Loads the GloVe text format (`token v1 ... vd` per line).
///
/// The dimension comes from the first line; later lines with a different
/// width or an unparsable number are skipped and counted. When `vocabulary`
/// is given only those tokens are retained, which keeps memory bounded for
/// the large published tables while still validating every line.
pub fn load_glove_text<R: BufRead>(reader: R, vocabulary: Option<&HashSet<String>>) -> Result<WordVectorTable> {
    let mut table: Option<WordVectorTable> = None;
    let mut values = Vec::new();
    let mut skipped = 0usize;
    let mut lines = 0usize;
    for line in reader.lines() {
        let line = line?;
        let mut fields = line.split(' ').filter(|f| !f.is_empty());
        let Some(token) = fields.next() else { continue };
        lines += 1;
        let keep = vocabulary.is_none_or(|v| v.contains(token));
        let dim = match &table {
            Some(t) => t.dimension,
            None => fields.clone().count(),
        };
        if dim == 0 {
            skipped += 1;
            continue;
        }
        let t = table.get_or_insert_with(|| WordVectorTable::new(dim));
        if !keep {
            if fields.count() != dim {
                skipped += 1;
            }
            continue;
        }
        values.clear();
        let mut ok = true;
        for f in fields {
            match f.parse::<f64>() {
                Ok(v) if v.is_finite() => values.push(v),
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok || values.len() != dim {
            skipped += 1;
            continue;
        }
        t.insert(token, &values)?;
    }
    let mut table = table.ok_or(Error::Empty("word vector file has no usable line"))?;
    if skipped as f64 > MAX_SKIPPED_FRACTION * lines as f64 {
        return Err(Error::Malformed {
            what: "word vectors",
            bad: skipped,
            total: lines,
            first_line: 0,
            first_message: format!("lines not matching dimension {}", table.dimension),
        });
    }
    if skipped > 0 {
        log::warn!("word vectors: skipped {skipped} of {lines} lines");
    }
    table.skipped = skipped;
    table.lines = lines;
    Ok(table)
}

/// Mean of the in-vocabulary token vectors; zero when none are known.
pub fn glove_embed<S: AsRef<str>>(tokens: &[S], table: &WordVectorTable) -> Vec<f64> {
    let mut sum = vec![0.0; table.dimension()];
    let mut known = 0usize;
    for v in tokens.iter().filter_map(|t| table.get(t.as_ref())) {
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
        known += 1;
    }
    if known > 0 {
        let inv = known as f64;
        sum.iter_mut().for_each(|s| *s /= inv);
    }
    sum
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TextKind {
    Description,
    Comment,
}

impl TextKind {
    pub fn code(self) -> u8 {
        match self {
            TextKind::Description => 0,
            TextKind::Comment => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(TextKind::Description),
            1 => Some(TextKind::Comment),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TextNodeId {
    pub kind: TextKind,
    pub ordinal: u64,
}

impl TextNodeId {
    pub fn description(ordinal: u64) -> Self {
        TextNodeId { kind: TextKind::Description, ordinal }
    }

    pub fn comment(ordinal: u64) -> Self {
        TextNodeId { kind: TextKind::Comment, ordinal }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingSet {
    dimension: usize,
    vectors: BTreeMap<TextNodeId, Vec<f64>>,
}

impl TextEmbeddingSet {
    pub fn new(dimension: usize) -> Self {
        TextEmbeddingSet { dimension, vectors: BTreeMap::new() }
    }

    pub fn insert(&mut self, id: TextNodeId, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dimension {
            return Err(Error::Dimension { expected: self.dimension, actual: vector.len() });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("text vector {id:?}")));
        }
        self.vectors.insert(id, vector);
        Ok(())
    }

    pub fn get(&self, id: TextNodeId) -> Option<&[f64]> {
        self.vectors.get(&id).map(Vec::as_slice)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TextNodeId, &[f64])> {
        self.vectors.iter().map(|(id, v)| (*id, v.as_slice()))
    }

    /// Writes the set in interchange form, ordered by (kind, ordinal).
    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let records: Vec<VectorRecord> = self
            .vectors
            .iter()
            .map(|(id, v)| VectorRecord { kind: id.kind.code(), ordinal: id.ordinal, values: v.clone() })
            .collect();
        interchange::write_records(out, self.dimension, &records)
    }

    /// Reads an interchange file. Several records for the same node are
    /// per-sentence vectors of one document and are averaged.
    pub fn read(bytes: &[u8]) -> Result<Self> {
        let (dimension, records) = interchange::read_records(bytes)?;
        let mut sums: BTreeMap<TextNodeId, (Vec<f64>, usize)> = BTreeMap::new();
        for r in records {
            let kind = TextKind::from_code(r.kind).ok_or_else(|| Error::Format {
                what: "text embedding file",
                offset: 0,
                message: format!("node kind {} is not a text node", r.kind),
            })?;
            let id = TextNodeId { kind, ordinal: r.ordinal };
            match sums.get_mut(&id) {
                Some((sum, n)) => {
                    sum.iter_mut().zip(&r.values).for_each(|(s, v)| *s += v);
                    *n += 1;
                }
                None => {
                    sums.insert(id, (r.values, 1));
                }
            }
        }
        let vectors = sums
            .into_iter()
            .map(|(id, (mut v, n))| {
                if n > 1 {
                    v.iter_mut().for_each(|x| *x /= n as f64);
                }
                (id, v)
            })
            .collect();
        Ok(TextEmbeddingSet { dimension, vectors })
    }
}

/// Averaged word vectors for each `(id, text)` pair.
pub fn embed_texts_glove<'a, I>(texts: I, table: &WordVectorTable, stoplist: &Stoplist) -> Result<TextEmbeddingSet>
where
    I: IntoIterator<Item = (TextNodeId, &'a str)>,
{
    let mut set = TextEmbeddingSet::new(table.dimension());
    for (id, text) in texts {
        let tokens = tokenize_and_strip(text, stoplist);
        set.insert(id, glove_embed(&tokens, table))?;
    }
    Ok(set)
}

/// Seeded uniform vectors on `[-0.5/dim, 0.5/dim]`, for runs without pretrained text.
pub fn random_text_embeddings<I>(ids: I, dimension: usize, seed: u64) -> TextEmbeddingSet
where
    I: IntoIterator<Item = TextNodeId>,
{
    let half_width = 0.5 / dimension as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = TextEmbeddingSet::new(dimension);
    for id in ids {
        let v = (0..dimension).map(|_| rng.gen_range(-half_width..=half_width)).collect();
        set.vectors.insert(id, v);
    }
    set
}

/// Vocabulary of all texts after stopword removal, for filtered table loads.
pub fn vocabulary<'a, I>(texts: I, stoplist: &Stoplist) -> HashSet<String>
where
    I: IntoIterator<Item = &'a str>,
{
    texts.into_iter().flat_map(|t| tokenize_and_strip(t, stoplist)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(entries: &[(&str, &[f64])]) -> WordVectorTable {
        let mut t = WordVectorTable::new(entries[0].1.len());
        for (k, v) in entries {
            t.insert(k, v).unwrap();
        }
        t
    }

    #[test]
    fn tokenizer_lowercases_and_strips() {
        let stop = Stoplist::from_words(["the"]);
        assert_eq!(tokenize_and_strip("The great Song", &stop), ["great", "song"]);
        assert!(tokenize_and_strip("the a an", &Stoplist::long_english()).is_empty());
        assert!(tokenize_and_strip("", &stop).is_empty());
    }

    #[test]
    fn long_list_size() {
        assert_eq!(Stoplist::long_english().len(), 667);
    }

    #[test]
    fn glove_means() {
        let t = table(&[("good", &[1.0, 3.0]), ("music", &[3.0, 5.0])]);
        assert_eq!(glove_embed(&["good"], &t), [1.0, 3.0]);
        assert_eq!(glove_embed(&["good", "music"], &t), [2.0, 4.0]);
        assert_eq!(glove_embed(&["good", "zzzz", "music"], &t), [2.0, 4.0]);
        assert_eq!(glove_embed(&["zzzz"], &t), [0.0, 0.0]);
        assert_eq!(glove_embed::<&str>(&[], &t), [0.0, 0.0]);
    }

    #[test]
    fn glove_text_parse() {
        let t = load_glove_text("cat 0.1 0.2\n".as_bytes(), None).unwrap();
        assert_eq!(t.dimension(), 2);
        assert_eq!(t.get("cat").unwrap(), [0.1, 0.2]);
    }

    #[test]
    fn glove_empty_stream_fails() {
        assert!(matches!(load_glove_text("".as_bytes(), None), Err(Error::Empty(_))));
    }

    #[test]
    fn glove_mismatched_lines_counted() {
        let mut text: String = (0..200).map(|i| format!("w{i} 1 2 3\n")).collect();
        text.push_str("bad 1 2\n");
        let t = load_glove_text(text.as_bytes(), None).unwrap();
        assert_eq!((t.len(), t.skipped, t.lines), (200, 1, 201));

        let text = "a 1 2\nb 1\nc 1 2\n";
        assert!(matches!(load_glove_text(text.as_bytes(), None), Err(Error::Malformed { bad: 1, total: 3, .. })));
    }

    #[test]
    fn glove_vocabulary_filter() {
        let vocab: HashSet<String> = ["b".to_string()].into();
        let t = load_glove_text("a 1 2\nb 3 4\n".as_bytes(), Some(&vocab)).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.lines, 2);
        assert_eq!(t.get("b").unwrap(), [3.0, 4.0]);
    }

    #[test]
    fn embedding_file_round_trip() {
        let mut set = TextEmbeddingSet::new(2);
        set.insert(TextNodeId::comment(7), vec![0.5, -0.25]).unwrap();
        let mut buf = Vec::new();
        set.write(&mut buf).unwrap();
        assert_eq!(TextEmbeddingSet::read(&buf).unwrap(), set);
    }

    #[test]
    fn sentence_vectors_are_averaged() {
        let records = [
            VectorRecord { kind: 0, ordinal: 3, values: vec![1.0, 0.0] },
            VectorRecord { kind: 0, ordinal: 3, values: vec![3.0, 2.0] },
            VectorRecord { kind: 1, ordinal: 3, values: vec![5.0, 5.0] },
        ];
        let mut buf = Vec::new();
        interchange::write_records(&mut buf, 2, &records).unwrap();
        let set = TextEmbeddingSet::read(&buf).unwrap();
        assert_eq!(set.get(TextNodeId::description(3)).unwrap(), [2.0, 1.0]);
        assert_eq!(set.get(TextNodeId::comment(3)).unwrap(), [5.0, 5.0]);
    }

    #[test]
    fn user_kind_rejected_in_text_file() {
        let mut buf = Vec::new();
        interchange::write_records(&mut buf, 1, &[VectorRecord { kind: 2, ordinal: 0, values: vec![1.0] }]).unwrap();
        assert!(TextEmbeddingSet::read(&buf).is_err());
    }

    #[test]
    fn random_init_bounds_and_determinism() {
        let ids: Vec<_> = (0..20).map(TextNodeId::comment).collect();
        let a = random_text_embeddings(ids.clone(), 16, 3);
        let b = random_text_embeddings(ids, 16, 3);
        assert_eq!(a, b);
        assert!(a.iter().all(|(_, v)| v.iter().all(|x| x.abs() <= 0.5 / 16.0)));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut set = TextEmbeddingSet::new(3);
        assert!(matches!(set.insert(TextNodeId::comment(0), vec![1.0]), Err(Error::Dimension { expected: 3, actual: 1 })));
    }
}
