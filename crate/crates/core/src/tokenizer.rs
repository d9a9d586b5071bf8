//! Shared subword tokenizer: greedy byte-pair encoding over characters.
//!
//! Both architectures use one tokenizer trained on the combined corpus, so
//! comparisons never confound architecture with segmentation. Specials are
//! atomic: they are matched before BPE, never split, and never produced by a
//! merge. Ids are laid out specials-first in the order given at training
//! time, then the base alphabet in codepoint order, then merge products in
//! merge order.
//!
//! Canonical special order: `<pad>`, `<bos>`, `<eos>`, `<unk>`, separator,
//! then one language tag per language, e.g. `#hi#>`. The separator's surface
//! form is the newline character itself, which lets few-shot prompts joined
//! by newlines tokenize atomically even when no corpus line contains one.
//!
//! Spaces are rewritten to a visible marker (U+2581) before BPE and restored
//! on decode, so encode/decode round-trips are lossless for any string over
//! the trained alphabet.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";
pub const SEP_TOKEN: &str = "\n";

const SPACE_MARK: char = '\u{2581}';

/// Surface form of a language tag, exactly as the training data spells it.
pub fn lang_tag(code: &str) -> String {
    format!("#{code}#>")
}

/// The five standard specials followed by one tag per language code.
pub fn standard_specials<S: AsRef<str>>(langs: &[S]) -> Vec<String> {
    let mut out = vec![
        PAD_TOKEN.to_string(),
        BOS_TOKEN.to_string(),
        EOS_TOKEN.to_string(),
        UNK_TOKEN.to_string(),
        SEP_TOKEN.to_string(),
    ];
    out.extend(langs.iter().map(|l| lang_tag(l.as_ref())));
    out
}

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("vocab size {requested} below minimum {min_needed} (specials + alphabet)")]
    VocabTooSmall { requested: usize, min_needed: usize },
    #[error("missing required special token {0:?}")]
    MissingSpecial(String),
    #[error("duplicate or empty special token {0:?}")]
    BadSpecial(String),
    #[error("token id {id} outside vocab of size {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("tokenizer file, line {line}: {msg}")]
    BadFormat { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Learned merge table plus vocabulary and special tokens.
#[derive(Debug, Clone)]
pub struct SubwordTokenizer {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    specials: Vec<String>,
    /// specials ordered longest-first for the atomic pre-match
    match_order: Vec<(String, u32)>,
    alphabet: BTreeMap<char, u32>,
    merges: Vec<(String, String)>,
    merge_rules: Vec<(u32, u32, u32)>,
    pad: u32,
    bos: u32,
    eos: u32,
    unk: u32,
    sep: u32,
    tags: BTreeMap<String, u32>,
}

impl SubwordTokenizer {
    /// Greedy most-frequent-pair BPE until `vocab_size` is reached or no pair
    /// occurs at least twice. Equal-frequency ties go to the lexicographically
    /// smallest `(left, right)` string pair, so training is deterministic.
    pub fn train_bpe<S: AsRef<str>>(
        corpus: &[S],
        vocab_size: usize,
        specials: &[String],
    ) -> Result<Self, TokenizerError> {
        if corpus.iter().all(|s| s.as_ref().is_empty()) {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut base = Self::with_specials_and_alphabet(specials, {
            let match_order = ordered_for_match(specials);
            let mut alphabet = BTreeSet::new();
            for line in corpus {
                for piece in split_specials(line.as_ref(), &match_order) {
                    if let SpanOrSpecial::Span(span) = piece {
                        for ch in span.chars() {
                            match ch {
                                ' ' => alphabet.insert(SPACE_MARK),
                                // a literal U+2581 would collide with the
                                // space marker; it stays out and encodes as unk
                                SPACE_MARK => false,
                                c => alphabet.insert(c),
                            };
                        }
                    }
                }
            }
            alphabet
        })?;
        let min_needed = base.tokens.len();
        if vocab_size < min_needed {
            return Err(TokenizerError::VocabTooSmall {
                requested: vocab_size,
                min_needed,
            });
        }

        // working sequences: one per unbroken non-special span
        let mut seqs: Vec<Vec<u32>> = Vec::new();
        for line in corpus {
            for piece in split_specials(line.as_ref(), &base.match_order) {
                if let SpanOrSpecial::Span(span) = piece {
                    let mut cur: Vec<u32> = Vec::new();
                    for ch in span.chars() {
                        let ch = if ch == ' ' { SPACE_MARK } else { ch };
                        match base.alphabet.get(&ch) {
                            Some(&id) => cur.push(id),
                            None => {
                                if cur.len() > 1 {
                                    seqs.push(std::mem::take(&mut cur));
                                } else {
                                    cur.clear();
                                }
                            }
                        }
                    }
                    if cur.len() > 1 {
                        seqs.push(cur);
                    }
                }
            }
        }

        while base.tokens.len() < vocab_size {
            let Some((l, r)) = best_pair(&seqs, &base.tokens) else {
                break;
            };
            let product = format!("{}{}", base.tokens[l as usize], base.tokens[r as usize]);
            let pid = match base.ids.get(&product) {
                Some(&id) => id,
                None => {
                    let id = base.tokens.len() as u32;
                    base.tokens.push(product.clone());
                    base.ids.insert(product.clone(), id);
                    id
                }
            };
            base.merges.push((
                base.tokens[l as usize].clone(),
                base.tokens[r as usize].clone(),
            ));
            base.merge_rules.push((l, r, pid));
            for seq in &mut seqs {
                apply_merge(seq, l, r, pid);
            }
        }
        Ok(base)
    }

    fn with_specials_and_alphabet(
        specials: &[String],
        alphabet: BTreeSet<char>,
    ) -> Result<Self, TokenizerError> {
        let mut tokens: Vec<String> = Vec::new();
        let mut ids: HashMap<String, u32> = HashMap::new();
        for s in specials {
            if s.is_empty() || ids.contains_key(s) {
                return Err(TokenizerError::BadSpecial(s.clone()));
            }
            ids.insert(s.clone(), tokens.len() as u32);
            tokens.push(s.clone());
        }
        for required in [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN, SEP_TOKEN] {
            if !ids.contains_key(required) {
                return Err(TokenizerError::MissingSpecial(required.to_string()));
            }
        }
        let mut alpha_map = BTreeMap::new();
        for ch in alphabet {
            let s = ch.to_string();
            if ids.contains_key(&s) {
                continue; // single-char specials shadow alphabet entries
            }
            let id = tokens.len() as u32;
            ids.insert(s.clone(), id);
            tokens.push(s);
            alpha_map.insert(ch, id);
        }
        let tags = specials
            .iter()
            .filter(|s| s.len() > 3 && s.starts_with('#') && s.ends_with("#>"))
            .map(|s| (s.clone(), ids[s]))
            .collect();
        Ok(SubwordTokenizer {
            match_order: ordered_for_match(specials),
            pad: ids[PAD_TOKEN],
            bos: ids[BOS_TOKEN],
            eos: ids[EOS_TOKEN],
            unk: ids[UNK_TOKEN],
            sep: ids[SEP_TOKEN],
            specials: specials.to_vec(),
            alphabet: alpha_map,
            merges: Vec::new(),
            merge_rules: Vec::new(),
            tags,
            tokens,
            ids,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn pad_id(&self) -> u32 {
        self.pad
    }

    pub fn bos_id(&self) -> u32 {
        self.bos
    }

    pub fn eos_id(&self) -> u32 {
        self.eos
    }

    pub fn unk_id(&self) -> u32 {
        self.unk
    }

    pub fn sep_id(&self) -> u32 {
        self.sep
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    /// Id of a tag given its surface form, e.g. `#hi#>`.
    pub fn tag_id(&self, tag: &str) -> Option<u32> {
        self.tags.get(tag).copied()
    }

    /// Registered tags in id order, for error messages and routing checks.
    pub fn tags(&self) -> impl Iterator<Item = (&str, u32)> {
        self.tags.iter().map(|(s, &id)| (s.as_str(), id))
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Specials atomically first (longest match, left to right), then BPE
    /// merges in merge order over each remaining span. Characters outside the
    /// base alphabet become `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for piece in split_specials(text, &self.match_order) {
            match piece {
                SpanOrSpecial::Special(id) => out.push(id),
                SpanOrSpecial::Span(span) => self.encode_span(span, &mut out),
            }
        }
        out
    }

    fn encode_span(&self, span: &str, out: &mut Vec<u32>) {
        // runs of in-alphabet symbols, broken by unknown characters
        let mut run: Vec<u32> = Vec::new();
        let flush = |run: &mut Vec<u32>, out: &mut Vec<u32>| {
            if run.is_empty() {
                return;
            }
            for &(l, r, p) in &self.merge_rules {
                apply_merge(run, l, r, p);
            }
            out.extend_from_slice(run);
            run.clear();
        };
        for ch in span.chars() {
            let mapped = if ch == ' ' { SPACE_MARK } else { ch };
            let known = if ch == SPACE_MARK {
                None // literal marker is never in-alphabet: keeps decode lossless
            } else {
                self.alphabet.get(&mapped)
            };
            match known {
                Some(&id) => run.push(id),
                None => {
                    flush(&mut run, out);
                    out.push(self.unk);
                }
            }
        }
        flush(&mut run, out);
    }

    /// Concatenate token strings. PAD/BOS/EOS are dropped; other specials
    /// (tags, `<unk>`, the separator) render verbatim; the space marker turns
    /// back into a space.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for &id in ids {
            let Some(tok) = self.token(id) else {
                return Err(TokenizerError::IdOutOfRange {
                    id,
                    vocab: self.tokens.len(),
                });
            };
            if id == self.pad || id == self.bos || id == self.eos {
                continue;
            }
            if (id as usize) < self.specials.len() {
                out.push_str(tok);
                continue;
            }
            for ch in tok.chars() {
                out.push(if ch == SPACE_MARK { ' ' } else { ch });
            }
        }
        Ok(out)
    }

    // ── persistence ──────────────────────────────────────────────
    //
    // UTF-8 text, sections in order: header, `#specials` (one per line, id
    // order), `#alphabet` (one base symbol per line, id order), `#merges`
    // (`left<TAB>right` per line, merge order). Symbols are escaped
    // (\n, \t, \r, \\) so the separator special and any whitespace symbol
    // survive the line orientation. The alphabet section is required to
    // reconstruct bit-exact encoding: single characters that never merged
    // appear in no merge rule.

    pub fn to_file_string(&self) -> String {
        let mut s = String::from("BPE v1\n#specials\n");
        for sp in &self.specials {
            let _ = writeln!(s, "{}", escape(sp));
        }
        s.push_str("#alphabet\n");
        for ch in self.alphabet.keys() {
            let _ = writeln!(s, "{}", escape(&ch.to_string()));
        }
        s.push_str("#merges\n");
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{}\t{}", escape(l), escape(r));
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self, TokenizerError> {
        let bad = |line: usize, msg: &str| TokenizerError::BadFormat {
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "BPE v1")) => {}
            _ => return Err(bad(1, "expected header `BPE v1`")),
        }
        match lines.next() {
            Some((_, "#specials")) => {}
            _ => return Err(bad(2, "expected `#specials`")),
        }
        let mut specials = Vec::new();
        let mut alphabet_raw = Vec::new();
        let mut merges_raw: Vec<(String, String)> = Vec::new();
        #[derive(PartialEq)]
        enum Section {
            Specials,
            Alphabet,
            Merges,
        }
        let mut section = Section::Specials;
        for (i, line) in lines {
            let lineno = i + 1;
            match (line, &section) {
                ("#alphabet", Section::Specials) => section = Section::Alphabet,
                ("#merges", Section::Alphabet) => section = Section::Merges,
                ("#alphabet" | "#merges" | "#specials", _) => {
                    return Err(bad(lineno, "section out of order"))
                }
                (entry, Section::Specials) => specials.push(unescape(entry, lineno)?),
                (entry, Section::Alphabet) => {
                    let sym = unescape(entry, lineno)?;
                    let mut chars = sym.chars();
                    match (chars.next(), chars.next()) {
                        (Some(ch), None) => alphabet_raw.push(ch),
                        _ => return Err(bad(lineno, "alphabet entry must be one character")),
                    }
                }
                (entry, Section::Merges) => {
                    let Some((l, r)) = entry.split_once('\t') else {
                        return Err(bad(lineno, "merge line must be left<TAB>right"));
                    };
                    merges_raw.push((unescape(l, lineno)?, unescape(r, lineno)?));
                }
            }
        }
        if section != Section::Merges {
            return Err(bad(text.lines().count(), "missing #alphabet or #merges section"));
        }
        let mut tok =
            Self::with_specials_and_alphabet(&specials, alphabet_raw.into_iter().collect())?;
        for (l, r) in merges_raw {
            let (Some(&lid), Some(&rid)) = (tok.ids.get(&l), tok.ids.get(&r)) else {
                return Err(bad(0, &format!("merge ({l:?},{r:?}) references unknown token")));
            };
            let product = format!("{l}{r}");
            let pid = match tok.ids.get(&product) {
                Some(&id) => id,
                None => {
                    let id = tok.tokens.len() as u32;
                    tok.tokens.push(product.clone());
                    tok.ids.insert(product, id);
                    id
                }
            };
            tok.merges.push((l, r));
            tok.merge_rules.push((lid, rid, pid));
        }
        Ok(tok)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_file_string(&text)
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str, lineno: usize) -> Result<String, TokenizerError> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            other => {
                return Err(TokenizerError::BadFormat {
                    line: lineno,
                    msg: format!("bad escape \\{}", other.map(String::from).unwrap_or_default()),
                })
            }
        }
    }
    Ok(out)
}

fn ordered_for_match(specials: &[String]) -> Vec<(String, u32)> {
    let mut v: Vec<(String, u32)> = specials
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i as u32))
        .collect();
    v.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
    v
}

enum SpanOrSpecial<'a> {
    Span(&'a str),
    Special(u32),
}

/// Split text into maximal plain spans and atomic specials, longest match
/// first, scanning left to right.
fn split_specials<'a>(text: &'a str, match_order: &[(String, u32)]) -> Vec<SpanOrSpecial<'a>> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut span_start = 0usize;
    let mut i = 0usize;
    while i < bytes.len() {
        if !text.is_char_boundary(i) {
            i += 1;
            continue;
        }
        let rest = &text[i..];
        if let Some((s, id)) = match_order.iter().find(|(s, _)| rest.starts_with(s.as_str())) {
            if span_start < i {
                out.push(SpanOrSpecial::Span(&text[span_start..i]));
            }
            out.push(SpanOrSpecial::Special(*id));
            i += s.len();
            span_start = i;
        } else {
            i += 1;
        }
    }
    if span_start < bytes.len() {
        out.push(SpanOrSpecial::Span(&text[span_start..]));
    }
    out
}

/// Merge every adjacent (l, r) into p, scanning left to right.
fn apply_merge(seq: &mut Vec<u32>, l: u32, r: u32, p: u32) {
    if seq.len() < 2 {
        return;
    }
    let mut w = 0usize;
    let mut i = 0usize;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == l && seq[i + 1] == r {
            seq[w] = p;
            i += 2;
        } else {
            seq[w] = seq[i];
            i += 1;
        }
        w += 1;
    }
    seq.truncate(w);
}

/// Most frequent pair with count ≥ 2; ties broken by the lexicographically
/// smallest (left, right) token-string pair. `None` when no pair qualifies.
fn best_pair(seqs: &[Vec<u32>], tokens: &[String]) -> Option<(u32, u32)> {
    let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
    for seq in seqs {
        for w in seq.windows(2) {
            *counts.entry((w[0], w[1])).or_insert(0) += 1;
        }
    }
    let mut best: Option<((u32, u32), usize)> = None;
    for (&pair, &count) in &counts {
        if count < 2 {
            continue;
        }
        let better = match &best {
            None => true,
            Some((bp, bc)) => {
                count > *bc
                    || (count == *bc && {
                        let cand = (&tokens[pair.0 as usize], &tokens[pair.1 as usize]);
                        let cur = (&tokens[bp.0 as usize], &tokens[bp.1 as usize]);
                        cand < cur
                    })
            }
        };
        if better {
            best = Some((pair, count));
        }
    }
    best.map(|(p, _)| p)
}
