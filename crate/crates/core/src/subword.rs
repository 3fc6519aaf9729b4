//! Frequency-merge BPE with character-offset alignment.
//!
//! Text is pre-split on whitespace, and every ASCII punctuation character
//! becomes a word of its own. Merges never cross word boundaries.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const RESERVED: [&str; 4] = [PAD, UNK, CLS, SEP];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

const VERSION_TAG: &str = "span2d-bpe v1";
const ALPHABET_TAG: &str = "[ALPHABET]";

/// Ordered merge rules plus the vocabulary they induce.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeTable {
    alphabet: Vec<char>,
    merges: Vec<(String, String)>,
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
}

/// Region a piece belongs to inside `[CLS] query [SEP] text [SEP]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PieceKind {
    Cls,
    Sep,
    Query,
    Text,
}

/// Assembled and tokenized `[CLS] query [SEP] text [SEP]` input.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq {
    ids: Vec<u32>,
    pieces: Vec<String>,
    continuation: Vec<bool>,
    spans: Vec<Option<(usize, usize)>>,
    kinds: Vec<PieceKind>,
    query_len: usize,
    query: String,
    text: String,
    truncated: bool,
}

/// Char-index ranges `[start, end)` of the words of `text`.
pub fn pre_split(text: &str) -> Vec<(usize, usize)> {
    let mut words = Vec::new();
    let mut start: Option<usize> = None;
    for (i, ch) in text.chars().enumerate() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                words.push((s, i));
            }
        } else if ch.is_ascii_punctuation() {
            if let Some(s) = start.take() {
                words.push((s, i));
            }
            words.push((i, i + 1));
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        words.push((s, text.chars().count()));
    }
    words
}

fn words_of(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    pre_split(text)
        .into_iter()
        .map(|(s, e)| chars[s..e].iter().collect())
        .collect()
}

/// Greedy BPE training: `num_merges` highest-frequency pair merges, ties
/// broken by the lexicographically smallest `(left, right)`. Stops early when
/// no adjacent pair is left.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], num_merges: usize) -> Result<MergeTable> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for line in corpus {
        for w in words_of(line.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut alphabet: Vec<char> = counts.keys().flat_map(|w| w.chars()).collect();
    alphabet.sort_unstable();
    alphabet.dedup();

    let mut words: Vec<(Vec<String>, usize)> = counts
        .into_iter()
        .map(|(w, n)| (w.chars().map(String::from).collect(), n))
        .collect();

    let mut merges = Vec::with_capacity(num_merges);
    for _ in 0..num_merges {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (pieces, n) in &words {
            for pair in pieces.windows(2) {
                *pairs.entry((&pair[0], &pair[1])).or_default() += n;
            }
        }
        let best = pairs
            .into_iter()
            .filter(|((l, r), _)| !forms_reserved(l, r))
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((l, r), _)) = best else {
            break;
        };
        let (l, r) = (l.to_string(), r.to_string());
        for (pieces, _) in &mut words {
            merge_in_place(pieces, &l, &r);
        }
        merges.push((l, r));
    }
    Ok(MergeTable::from_parts(alphabet, merges))
}

fn forms_reserved(l: &str, r: &str) -> bool {
    let joined = format!("{l}{r}");
    RESERVED.iter().any(|t| joined.contains(t))
}

fn merge_in_place(pieces: &mut Vec<String>, l: &str, r: &str) {
    let mut i = 0;
    while i + 1 < pieces.len() {
        if pieces[i] == l && pieces[i + 1] == r {
            let right = pieces.remove(i + 1);
            pieces[i].push_str(&right);
        }
        i += 1;
    }
}

impl MergeTable {
    fn from_parts(mut alphabet: Vec<char>, merges: Vec<(String, String)>) -> Self {
        alphabet.sort_unstable();
        alphabet.dedup();
        let mut vocab: Vec<String> = Vec::new();
        let mut index: HashMap<String, u32> = HashMap::new();
        let pieces = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(alphabet.iter().map(|c| c.to_string()))
            .chain(merges.iter().map(|(l, r)| format!("{l}{r}")));
        for piece in pieces {
            if !index.contains_key(&piece) {
                index.insert(piece.clone(), vocab.len() as u32);
                vocab.push(piece);
            }
        }
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(k, (l, r))| ((l.clone(), r.clone()), k))
            .collect();
        MergeTable {
            alphabet,
            merges,
            vocab,
            index,
            ranks,
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn id_of(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    /// Splits one pre-split word into pieces by applying merges in training order.
    pub fn split_word(&self, word: &str) -> Vec<String> {
        let mut pieces: Vec<String> = word.chars().map(String::from).collect();
        loop {
            let best = pieces
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else {
                break;
            };
            let (l, r) = &self.merges[rank];
            merge_in_place(&mut pieces, l, r);
        }
        pieces
    }

    /// Tokenizes and assembles `[CLS] query [SEP] sentence [SEP]`.
    ///
    /// The sentence is truncated (whole trailing words) so the sequence fits
    /// in `cap` pieces; the query is never truncated.
    pub fn encode(&self, query: &str, sentence: &str, cap: usize) -> Result<TokenSeq> {
        if query.trim().is_empty() {
            return Err(Error::EmptyText("query"));
        }
        if sentence.trim().is_empty() {
            return Err(Error::EmptyText("sentence"));
        }
        let mut seq = TokenSeq {
            ids: vec![CLS_ID],
            pieces: vec![CLS.to_string()],
            continuation: vec![false],
            spans: vec![None],
            kinds: vec![PieceKind::Cls],
            query_len: 0,
            query: query.to_string(),
            text: sentence.to_string(),
            truncated: false,
        };
        let query_pieces = self.tokenize(query);
        let needed = query_pieces.len() + 3;
        if needed > cap {
            return Err(Error::QueryTooLong { needed, cap });
        }
        for (piece, cont, span) in query_pieces {
            seq.push(self, piece, cont, Some(span), PieceKind::Query);
        }
        seq.push(self, SEP.to_string(), false, None, PieceKind::Sep);
        seq.query_len = seq.len() - 1;

        let mut text_pieces = self.tokenize(sentence);
        let room = cap - seq.len() - 1;
        if text_pieces.len() > room {
            seq.truncated = true;
            // back off to the start of a word cut in half, unless it is the only word
            let mut keep = room;
            while keep > 0 && text_pieces[keep].1 {
                keep -= 1;
            }
            if keep == 0 {
                keep = room;
            }
            text_pieces.truncate(keep);
        }
        for (piece, cont, span) in text_pieces {
            seq.push(self, piece, cont, Some(span), PieceKind::Text);
        }
        seq.push(self, SEP.to_string(), false, None, PieceKind::Sep);
        Ok(seq)
    }

    /// `(piece, continuation, char span)` for every piece of `text`.
    fn tokenize(&self, text: &str) -> Vec<(String, bool, (usize, usize))> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::new();
        for (ws, we) in pre_split(text) {
            let word: String = chars[ws..we].iter().collect();
            let mut at = ws;
            for (k, piece) in self.split_word(&word).into_iter().enumerate() {
                let n = piece.chars().count();
                out.push((piece, k > 0, (at, at + n)));
                at += n;
            }
        }
        out
    }

    /// Merge file: version tag, alphabet line, then one `left<TAB>right` per merge.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{VERSION_TAG}").unwrap();
        let alpha: String = self.alphabet.iter().collect();
        writeln!(s, "{ALPHABET_TAG}\t{alpha}").unwrap();
        for (l, r) in &self.merges {
            writeln!(s, "{l}\t{r}").unwrap();
        }
        s
    }

    /// Parses a merge file. Without an alphabet line the alphabet is the set
    /// of characters appearing in the merges.
    pub fn from_file_string(contents: &str, origin: &Path) -> Result<Self> {
        let mut lines = contents.lines();
        match lines.next() {
            Some(tag) if tag.trim_end() == VERSION_TAG => {}
            Some(tag) => {
                return Err(Error::format(
                    origin,
                    format!("unsupported version tag `{tag}`"),
                ))
            }
            None => return Err(Error::format(origin, "empty merge file")),
        }
        let mut alphabet = Vec::new();
        let mut merges = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let Some((l, r)) = line.split_once('\t') else {
                return Err(Error::Record {
                    path: origin.to_path_buf(),
                    line: n + 2,
                    reason: "expected `left<TAB>right`".into(),
                });
            };
            if l == ALPHABET_TAG {
                alphabet.extend(r.chars());
                continue;
            }
            if l.is_empty() || r.is_empty() || r.contains('\t') {
                return Err(Error::Record {
                    path: origin.to_path_buf(),
                    line: n + 2,
                    reason: "empty or malformed merge".into(),
                });
            }
            alphabet.extend(l.chars().chain(r.chars()));
            merges.push((l.to_string(), r.to_string()));
        }
        Ok(Self::from_parts(alphabet, merges))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let contents = std::fs::read_to_string(path)?;
        Self::from_file_string(&contents, path)
    }

    /// Hex SHA-256 of the serialized table.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            write!(s, "{b:02x}").unwrap();
            s
        })
    }
}

impl TokenSeq {
    fn push(
        &mut self,
        table: &MergeTable,
        piece: String,
        continuation: bool,
        span: Option<(usize, usize)>,
        kind: PieceKind,
    ) {
        let id = table.id_of(&piece).unwrap_or(UNK_ID);
        self.ids.push(id);
        self.pieces.push(piece);
        self.continuation.push(continuation);
        self.spans.push(span);
        self.kinds.push(kind);
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn continuation(&self) -> &[bool] {
        &self.continuation
    }

    pub fn kinds(&self) -> &[PieceKind] {
        &self.kinds
    }

    /// Char span of piece `i`; query pieces index the query, text pieces the sentence.
    pub fn span(&self, i: usize) -> Option<(usize, usize)> {
        self.spans.get(i).copied().flatten()
    }

    /// Number of query pieces including the query's `[SEP]`.
    pub fn query_len(&self) -> usize {
        self.query_len
    }

    pub fn query(&self) -> &str {
        &self.query
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Whether trailing sentence words were dropped to respect the cap.
    pub fn truncated(&self) -> bool {
        self.truncated
    }

    /// Index range of the sentence pieces.
    pub fn text_range(&self) -> std::ops::Range<usize> {
        self.query_len + 1..self.len() - 1
    }

    pub fn is_text(&self, i: usize) -> bool {
        self.kinds.get(i) == Some(&PieceKind::Text)
    }

    /// First piece of a word.
    pub fn is_word_start(&self, i: usize) -> bool {
        self.kinds.get(i).is_some() && !self.continuation[i]
    }

    /// Last piece of a word.
    pub fn is_word_end(&self, i: usize) -> bool {
        i < self.len() && !self.continuation.get(i + 1).copied().unwrap_or(false)
    }

    /// Piece index whose span starts at sentence char `c`.
    pub fn piece_starting_at(&self, c: usize) -> Option<usize> {
        self.text_range().find(|&i| self.span(i).map(|s| s.0) == Some(c))
    }

    /// Piece index whose span ends at sentence char `c`.
    pub fn piece_ending_at(&self, c: usize) -> Option<usize> {
        self.text_range().find(|&i| self.span(i).map(|s| s.1) == Some(c))
    }

    /// Sentence substring covered by pieces `start..=end`, recovered from
    /// char offsets.
    pub fn decode_span(&self, start: usize, end: usize) -> Result<String> {
        let (first, last) = self.char_range(start, end)?;
        Ok(self.text.chars().skip(first).take(last - first).collect())
    }

    /// Sentence char range `[start, end)` covered by pieces `start..=end`.
    pub fn char_range(&self, start: usize, end: usize) -> Result<(usize, usize)> {
        if start > end {
            return Err(Error::InvalidSpan {
                start,
                end,
                reason: "start after end",
            });
        }
        if !self.is_text(start) || !self.is_text(end) {
            return Err(Error::InvalidSpan {
                start,
                end,
                reason: "span touches a query or special position",
            });
        }
        let first = self.span(start).expect("text piece has a span").0;
        let last = self.span(end).expect("text piece has a span").1;
        Ok((first, last))
    }
}
