//! Corpus ingestion and direction-regime dataset assembly.
//!
//! Corpora are UTF-8 files with one `source<TAB>target` pair per line. A
//! [`DirectionConfig`] names which (source set → target set) mapping a model
//! trains on; the builder tags every example with its target language token,
//! interleaves directions with a seeded shuffle, and drops over-length
//! examples rather than truncating them (truncation silently corrupts pairs).
//!
//! Decoder-only examples are a single sequence `src ⊕ tag ⊕ tgt ⊕ eos` whose
//! loss mask covers only positions after the tag, matching the template
//! `source text #hi#> target text`. Encoder-decoder examples prepend the tag
//! to the encoder input and teacher-force the decoder.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ArchKind;
use crate::tokenizer::{lang_tag, SubwordTokenizer};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}, line {line}: expected exactly one TAB between source and target")]
    MalformedLine { path: String, line: usize },
    #[error("{path}, line {line}: empty {side} text")]
    EmptyField {
        path: String,
        line: usize,
        side: &'static str,
    },
    #[error("sentence pair languages must differ, got {0:?} twice")]
    SameLanguage(String),
    #[error("invalid length bounds: min {min} > max {max}")]
    BadLengthBounds { min: usize, max: usize },
    #[error("direction config: {0}")]
    BadDirectionConfig(String),
    #[error("no corpus provided for direction {src}->{tgt}")]
    MissingDirection { src: String, tgt: String },
    #[error("language tag {0:?} is not registered in the tokenizer")]
    UnregisteredTag(String),
    #[error("batch_size must be at least 1")]
    ZeroBatchSize,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One aligned sentence pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub src_lang: String,
    pub tgt_lang: String,
    pub src_text: String,
    pub tgt_text: String,
}

impl SentencePair {
    pub fn new(
        src_lang: impl Into<String>,
        tgt_lang: impl Into<String>,
        src_text: impl Into<String>,
        tgt_text: impl Into<String>,
    ) -> Result<Self, DataError> {
        let p = SentencePair {
            src_lang: src_lang.into(),
            tgt_lang: tgt_lang.into(),
            src_text: src_text.into(),
            tgt_text: tgt_text.into(),
        };
        if p.src_lang == p.tgt_lang {
            return Err(DataError::SameLanguage(p.src_lang));
        }
        debug_assert!(!p.src_text.is_empty() && !p.tgt_text.is_empty());
        Ok(p)
    }
}

/// Which (source set → target set) mapping one model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    OneToOne,
    OneToMany,
    ManyToOne,
    ManyToMany,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Regime::OneToOne => "one_to_one",
            Regime::OneToMany => "one_to_many",
            Regime::ManyToOne => "many_to_one",
            Regime::ManyToMany => "many_to_many",
        };
        write!(f, "{s}")
    }
}

/// How multi-direction examples are balanced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    /// Every pair from every direction (directions weigh by corpus size).
    #[default]
    Proportional,
    /// Each direction truncated to the smallest direction's size.
    UniformPerDirection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionConfig {
    pub regime: Regime,
    pub source_langs: Vec<String>,
    pub target_langs: Vec<String>,
    #[serde(default)]
    pub mixing: Mixing,
}

impl DirectionConfig {
    /// Checks the regime's arity invariants.
    pub fn validate(&self) -> Result<(), DataError> {
        let (s, t) = (self.source_langs.len(), self.target_langs.len());
        let bad = |msg: String| Err(DataError::BadDirectionConfig(msg));
        match self.regime {
            Regime::OneToOne if !(s == 1 && t == 1) => {
                bad(format!("one_to_one needs 1 source and 1 target, got {s} and {t}"))
            }
            Regime::OneToMany if !(s == 1 && t >= 2) => {
                bad(format!("one_to_many needs 1 source and ≥2 targets, got {s} and {t}"))
            }
            Regime::ManyToOne if !(s >= 2 && t == 1) => {
                bad(format!("many_to_one needs ≥2 sources and 1 target, got {s} and {t}"))
            }
            Regime::ManyToMany if !(s >= 2 && t >= 2) => {
                bad(format!("many_to_many needs ≥2 sources and ≥2 targets, got {s} and {t}"))
            }
            _ => {
                if self.directions().is_empty() {
                    bad("no direction with distinct source and target".to_string())
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Ordered (source, target) pairs with distinct languages.
    pub fn directions(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for s in &self.source_langs {
            for t in &self.target_langs {
                if s != t {
                    out.push((s.clone(), t.clone()));
                }
            }
        }
        out
    }
}

/// Tokenized, tagged example in the layout its architecture trains on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrainingExample {
    /// One causal sequence; `loss_mask[i]` is true only after the tag
    /// position, so the model is never trained to predict source text.
    DecoderOnly { tokens: Vec<u32>, loss_mask: Vec<bool> },
    /// Teacher-forced pair: encoder reads `tag ⊕ src ⊕ eos`, decoder reads
    /// `bos ⊕ tgt` and predicts `tgt ⊕ eos`.
    EncoderDecoder {
        enc_input: Vec<u32>,
        dec_input: Vec<u32>,
        labels: Vec<u32>,
    },
}

impl TrainingExample {
    /// Number of positions that contribute to the loss.
    pub fn loss_positions(&self) -> usize {
        match self {
            TrainingExample::DecoderOnly { loss_mask, .. } => {
                loss_mask.iter().filter(|&&b| b).count()
            }
            TrainingExample::EncoderDecoder { labels, .. } => labels.len(),
        }
    }
}

/// Assembled dataset for one direction config.
#[derive(Debug, Clone)]
pub struct DirectionDataset {
    pub examples: Vec<TrainingExample>,
    pub n_overlength_dropped: usize,
    /// Tag surface per emitted example, mainly for audits and tests.
    pub tags: Vec<String>,
}

pub struct CorpusLoad {
    pub pairs: Vec<SentencePair>,
    /// 1-based line numbers skipped in tolerant mode.
    pub skipped_lines: Vec<usize>,
}

/// One `src<TAB>tgt` pair per line, order preserved. Malformed lines abort
/// with their line number unless `skip_bad` tolerates them.
pub fn load_corpus_opts(
    path: &Path,
    src_lang: &str,
    tgt_lang: &str,
    skip_bad: bool,
) -> Result<CorpusLoad, DataError> {
    let text = std::fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let mut fail = |err: DataError| -> Result<(), DataError> {
            if skip_bad {
                skipped.push(lineno);
                Ok(())
            } else {
                Err(err)
            }
        };
        let Some((src, tgt)) = line.split_once('\t') else {
            fail(DataError::MalformedLine {
                path: display.clone(),
                line: lineno,
            })?;
            continue;
        };
        if tgt.contains('\t') {
            fail(DataError::MalformedLine {
                path: display.clone(),
                line: lineno,
            })?;
            continue;
        }
        if src.is_empty() || tgt.is_empty() {
            fail(DataError::EmptyField {
                path: display.clone(),
                line: lineno,
                side: if src.is_empty() { "source" } else { "target" },
            })?;
            continue;
        }
        pairs.push(SentencePair::new(src_lang, tgt_lang, src, tgt)?);
    }
    Ok(CorpusLoad {
        pairs,
        skipped_lines: skipped,
    })
}

pub fn load_corpus(
    path: &Path,
    src_lang: &str,
    tgt_lang: &str,
) -> Result<Vec<SentencePair>, DataError> {
    Ok(load_corpus_opts(path, src_lang, tgt_lang, false)?.pairs)
}

/// Keep pairs where BOTH sides' character counts lie in `[min_chars, max_chars]`.
pub fn filter_by_length(
    pairs: Vec<SentencePair>,
    min_chars: usize,
    max_chars: usize,
) -> Result<Vec<SentencePair>, DataError> {
    if min_chars > max_chars {
        return Err(DataError::BadLengthBounds {
            min: min_chars,
            max: max_chars,
        });
    }
    Ok(pairs
        .into_iter()
        .filter(|p| {
            let s = p.src_text.chars().count();
            let t = p.tgt_text.chars().count();
            (min_chars..=max_chars).contains(&s) && (min_chars..=max_chars).contains(&t)
        })
        .collect())
}

/// Stable key for corpora maps.
pub type DirectionKey = (String, String);

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64: stable across dependency versions
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Build the tagged, tokenized dataset for a direction config. Over-length
/// examples are dropped and counted; multi-direction examples are
/// interleaved by a seeded shuffle.
pub fn build_direction_dataset(
    corpora: &BTreeMap<DirectionKey, Vec<SentencePair>>,
    dc: &DirectionConfig,
    tokenizer: &SubwordTokenizer,
    arch: ArchKind,
    max_seq_len: usize,
    seed: u64,
) -> Result<DirectionDataset, DataError> {
    dc.validate()?;
    let mut per_direction: Vec<Vec<(TrainingExample, String)>> = Vec::new();
    let mut dropped = 0usize;
    for (src_lang, tgt_lang) in dc.directions() {
        let pairs = corpora
            .get(&(src_lang.clone(), tgt_lang.clone()))
            .ok_or_else(|| DataError::MissingDirection {
                src: src_lang.clone(),
                tgt: tgt_lang.clone(),
            })?;
        let tag = lang_tag(&tgt_lang);
        let tag_id = tokenizer
            .tag_id(&tag)
            .ok_or_else(|| DataError::UnregisteredTag(tag.clone()))?;
        let mut bucket = Vec::with_capacity(pairs.len());
        for pair in pairs {
            match encode_example(pair, tag_id, tokenizer, arch, max_seq_len) {
                Some(ex) => bucket.push((ex, tag.clone())),
                None => dropped += 1,
            }
        }
        per_direction.push(bucket);
    }

    if dc.mixing == Mixing::UniformPerDirection {
        let min_len = per_direction.iter().map(Vec::len).min().unwrap_or(0);
        for (i, bucket) in per_direction.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x1000 + i as u64));
            bucket.shuffle(&mut rng);
            bucket.truncate(min_len);
        }
    }

    let mut all: Vec<(TrainingExample, String)> = per_direction.into_iter().flatten().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x2000));
    all.shuffle(&mut rng);
    let (examples, tags) = all.into_iter().unzip();
    Ok(DirectionDataset {
        examples,
        tags,
        n_overlength_dropped: dropped,
    })
}

fn encode_example(
    pair: &SentencePair,
    tag_id: u32,
    tokenizer: &SubwordTokenizer,
    arch: ArchKind,
    max_seq_len: usize,
) -> Option<TrainingExample> {
    let src = tokenizer.encode(&pair.src_text);
    let tgt = tokenizer.encode(&pair.tgt_text);
    match arch {
        ArchKind::DecoderOnly => {
            let mut tokens = Vec::with_capacity(src.len() + tgt.len() + 2);
            tokens.extend_from_slice(&src);
            let tag_pos = tokens.len();
            tokens.push(tag_id);
            tokens.extend_from_slice(&tgt);
            tokens.push(tokenizer.eos_id());
            if tokens.len() > max_seq_len {
                return None;
            }
            let loss_mask = (0..tokens.len()).map(|i| i > tag_pos).collect();
            Some(TrainingExample::DecoderOnly { tokens, loss_mask })
        }
        ArchKind::EncoderDecoder => {
            let mut enc_input = Vec::with_capacity(src.len() + 2);
            enc_input.push(tag_id);
            enc_input.extend_from_slice(&src);
            enc_input.push(tokenizer.eos_id());
            let mut dec_input = Vec::with_capacity(tgt.len() + 1);
            dec_input.push(tokenizer.bos_id());
            dec_input.extend_from_slice(&tgt);
            let mut labels = tgt;
            labels.push(tokenizer.eos_id());
            if enc_input.len() > max_seq_len || dec_input.len() > max_seq_len {
                return None;
            }
            Some(TrainingExample::EncoderDecoder {
                enc_input,
                dec_input,
                labels,
            })
        }
    }
}

/// A right-padded batch. Padding positions are excluded from attention (as
/// keys) via the valid masks and from the loss via masks/ignored labels.
#[derive(Debug, Clone)]
pub enum Batch {
    DecoderOnly {
        /// row-major [batch, padded_len]
        tokens: Vec<Vec<u32>>,
        valid: Vec<Vec<bool>>,
        loss_mask: Vec<Vec<bool>>,
    },
    EncoderDecoder {
        enc: Vec<Vec<u32>>,
        enc_valid: Vec<Vec<bool>>,
        dec: Vec<Vec<u32>>,
        dec_valid: Vec<Vec<bool>>,
        /// -1 marks ignored (padding) positions
        labels: Vec<Vec<i64>>,
    },
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::DecoderOnly { tokens, .. } => tokens.len(),
            Batch::EncoderDecoder { enc, .. } => enc.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Seeded shuffle, then fixed-size chunks right-padded to each batch's max
/// length. A batch of one gets no padding.
pub fn make_batches(
    examples: &[TrainingExample],
    batch_size: usize,
    pad_id: u32,
    seed: u64,
) -> Result<Vec<Batch>, DataError> {
    if batch_size == 0 {
        return Err(DataError::ZeroBatchSize);
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x3000));
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let members: Vec<&TrainingExample> = chunk.iter().map(|&i| &examples[i]).collect();
        batches.push(pad_batch(&members, pad_id));
    }
    Ok(batches)
}

fn pad_batch(members: &[&TrainingExample], pad_id: u32) -> Batch {
    match members[0] {
        TrainingExample::DecoderOnly { .. } => {
            let max_len = members
                .iter()
                .map(|m| match m {
                    TrainingExample::DecoderOnly { tokens, .. } => tokens.len(),
                    _ => panic!("mixed architectures in one batch"),
                })
                .max()
                .unwrap();
            let mut tokens = Vec::new();
            let mut valid = Vec::new();
            let mut loss = Vec::new();
            for m in members {
                let TrainingExample::DecoderOnly {
                    tokens: t,
                    loss_mask,
                } = m
                else {
                    panic!("mixed architectures in one batch");
                };
                let mut row = t.clone();
                let mut v = vec![true; t.len()];
                let mut l = loss_mask.clone();
                row.resize(max_len, pad_id);
                v.resize(max_len, false);
                l.resize(max_len, false);
                tokens.push(row);
                valid.push(v);
                loss.push(l);
            }
            Batch::DecoderOnly {
                tokens,
                valid,
                loss_mask: loss,
            }
        }
        TrainingExample::EncoderDecoder { .. } => {
            let (mut enc_max, mut dec_max) = (0, 0);
            for m in members {
                let TrainingExample::EncoderDecoder {
                    enc_input,
                    dec_input,
                    ..
                } = m
                else {
                    panic!("mixed architectures in one batch");
                };
                enc_max = enc_max.max(enc_input.len());
                dec_max = dec_max.max(dec_input.len());
            }
            let (mut enc, mut enc_valid, mut dec, mut dec_valid, mut labels) =
                (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for m in members {
                let TrainingExample::EncoderDecoder {
                    enc_input,
                    dec_input,
                    labels: lab,
                } = m
                else {
                    unreachable!();
                };
                let mut e = enc_input.clone();
                let mut ev = vec![true; e.len()];
                e.resize(enc_max, pad_id);
                ev.resize(enc_max, false);
                let mut d = dec_input.clone();
                let mut dv = vec![true; d.len()];
                d.resize(dec_max, pad_id);
                dv.resize(dec_max, false);
                let mut l: Vec<i64> = lab.iter().map(|&t| t as i64).collect();
                l.resize(dec_max, -1);
                enc.push(e);
                enc_valid.push(ev);
                dec.push(d);
                dec_valid.push(dv);
                labels.push(l);
            }
            Batch::EncoderDecoder {
                enc,
                enc_valid,
                dec,
                dec_valid,
                labels,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::standard_specials;
    use std::io::Write;

    fn toy_tokenizer() -> SubwordTokenizer {
        let corpus: Vec<String> = vec![
            "hello world".into(),
            "namaste duniya".into(),
            "shukriya dost".into(),
        ];
        SubwordTokenizer::train_bpe(&corpus, 64, &standard_specials(&["en", "hi", "mr"])).unwrap()
    }

    fn tmp_corpus(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn load_single_pair() {
        let f = tmp_corpus("hello\tnamaste\n");
        let pairs = load_corpus(f.path(), "en", "hi").unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].src_text, "hello");
        assert_eq!(pairs[0].tgt_text, "namaste");
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let f = tmp_corpus("");
        assert!(load_corpus(f.path(), "en", "hi").unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = tmp_corpus("no tab here\n");
        let err = load_corpus(f.path(), "en", "hi").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");

        let loaded = load_corpus_opts(f.path(), "en", "hi", true).unwrap();
        assert_eq!(loaded.skipped_lines, vec![1]);
        assert!(loaded.pairs.is_empty());
    }

    #[test]
    fn order_preserved_and_double_tab_rejected() {
        let f = tmp_corpus("a\tb\nc\td\n");
        let pairs = load_corpus(f.path(), "en", "hi").unwrap();
        assert_eq!(pairs[0].src_text, "a");
        assert_eq!(pairs[1].src_text, "c");

        let f = tmp_corpus("a\tb\tc\n");
        assert!(load_corpus(f.path(), "en", "hi").is_err());
    }

    #[test]
    fn length_filter_paper_defaults() {
        let short = SentencePair::new("en", "hi", "tiny text?", "too short").unwrap();
        let kept = SentencePair::new(
            "en",
            "hi",
            "this sentence is comfortably over forty characters long",
            "yeh vakya bhi chalis aksharon se zyada lamba hai, theek hai",
        )
        .unwrap();
        let out = filter_by_length(vec![short.clone(), kept.clone()], 40, 200).unwrap();
        assert_eq!(out, vec![kept]);
    }

    #[test]
    fn length_filter_identity_and_both_sides_rule() {
        let p = SentencePair::new("en", "hi", "x", "y").unwrap();
        let out = filter_by_length(vec![p.clone()], 0, usize::MAX).unwrap();
        assert_eq!(out.len(), 1);

        // src 39 chars, tgt 50 chars: dropped because BOTH must be in range
        let src39 = "a".repeat(39);
        let tgt50 = "b".repeat(50);
        let p = SentencePair::new("en", "hi", src39, tgt50).unwrap();
        assert!(filter_by_length(vec![p], 40, 200).unwrap().is_empty());
    }

    #[test]
    fn length_filter_is_monotone_in_max() {
        let pairs: Vec<SentencePair> = (1..20)
            .map(|n| SentencePair::new("en", "hi", "a".repeat(n), "b".repeat(n)).unwrap())
            .collect();
        let small = filter_by_length(pairs.clone(), 0, 7).unwrap();
        let big = filter_by_length(pairs, 0, 13).unwrap();
        for p in &small {
            assert!(big.contains(p));
        }
    }

    fn corpora_en_to(langs: &[&str], n_pairs: usize) -> BTreeMap<DirectionKey, Vec<SentencePair>> {
        let mut m = BTreeMap::new();
        for &l in langs {
            let pairs = (0..n_pairs)
                .map(|i| {
                    SentencePair::new("en", l, format!("hello world {i}"), format!("namaste {i}"))
                        .unwrap()
                })
                .collect();
            m.insert(("en".to_string(), l.to_string()), pairs);
        }
        m
    }

    #[test]
    fn one_to_one_tags_every_example() {
        let tok = toy_tokenizer();
        let dc = DirectionConfig {
            regime: Regime::OneToOne,
            source_langs: vec!["en".into()],
            target_langs: vec!["hi".into()],
            mixing: Mixing::Proportional,
        };
        let ds = build_direction_dataset(
            &corpora_en_to(&["hi"], 3),
            &dc,
            &tok,
            ArchKind::DecoderOnly,
            64,
            9,
        )
        .unwrap();
        assert_eq!(ds.examples.len(), 3);
        assert!(ds.tags.iter().all(|t| t == "#hi#>"));
        let hi = tok.tag_id("#hi#>").unwrap();
        for ex in &ds.examples {
            let TrainingExample::DecoderOnly { tokens, loss_mask } = ex else {
                panic!()
            };
            let tag_pos = tokens.iter().position(|&t| t == hi).unwrap();
            assert!(loss_mask[..=tag_pos].iter().all(|&b| !b));
            assert!(loss_mask[tag_pos + 1..].iter().all(|&b| b));
            assert_eq!(*tokens.last().unwrap(), tok.eos_id());
        }
    }

    #[test]
    fn one_to_many_counts_by_construction() {
        let tok = toy_tokenizer();
        let dc = DirectionConfig {
            regime: Regime::OneToMany,
            source_langs: vec!["en".into()],
            target_langs: vec!["hi".into(), "mr".into()],
            mixing: Mixing::Proportional,
        };
        let ds = build_direction_dataset(
            &corpora_en_to(&["hi", "mr"], 2),
            &dc,
            &tok,
            ArchKind::DecoderOnly,
            64,
            9,
        )
        .unwrap();
        assert_eq!(ds.examples.len(), 4);
        let hi = ds.tags.iter().filter(|t| *t == "#hi#>").count();
        let mr = ds.tags.iter().filter(|t| *t == "#mr#>").count();
        assert_eq!((hi, mr), (2, 2));
    }

    #[test]
    fn many_to_one_tags_are_all_target() {
        let tok = toy_tokenizer();
        let mut corpora = BTreeMap::new();
        for src in ["hi", "mr"] {
            let pairs = (0..2)
                .map(|i| {
                    SentencePair::new(src, "en", format!("namaste {i}"), format!("hello {i}"))
                        .unwrap()
                })
                .collect();
            corpora.insert((src.to_string(), "en".to_string()), pairs);
        }
        let dc = DirectionConfig {
            regime: Regime::ManyToOne,
            source_langs: vec!["hi".into(), "mr".into()],
            target_langs: vec!["en".into()],
            mixing: Mixing::Proportional,
        };
        let ds =
            build_direction_dataset(&corpora, &dc, &tok, ArchKind::EncoderDecoder, 64, 9).unwrap();
        assert_eq!(ds.examples.len(), 4);
        assert!(ds.tags.iter().all(|t| t == "#en#>"));
        let en = tok.tag_id("#en#>").unwrap();
        for ex in &ds.examples {
            let TrainingExample::EncoderDecoder { enc_input, .. } = ex else {
                panic!()
            };
            assert_eq!(enc_input[0], en);
        }
    }

    #[test]
    fn missing_direction_and_unregistered_tag_error() {
        let tok = toy_tokenizer();
        let dc = DirectionConfig {
            regime: Regime::OneToOne,
            source_langs: vec!["en".into()],
            target_langs: vec!["hi".into()],
            mixing: Mixing::Proportional,
        };
        let empty = BTreeMap::new();
        assert!(matches!(
            build_direction_dataset(&empty, &dc, &tok, ArchKind::DecoderOnly, 64, 0),
            Err(DataError::MissingDirection { .. })
        ));

        let dc_bad = DirectionConfig {
            regime: Regime::OneToOne,
            source_langs: vec!["en".into()],
            target_langs: vec!["zz".into()],
            mixing: Mixing::Proportional,
        };
        let mut corpora = BTreeMap::new();
        corpora.insert(
            ("en".to_string(), "zz".to_string()),
            vec![SentencePair::new("en", "zz", "a", "b").unwrap()],
        );
        assert!(matches!(
            build_direction_dataset(&corpora, &dc_bad, &tok, ArchKind::DecoderOnly, 64, 0),
            Err(DataError::UnregisteredTag(_))
        ));
    }

    #[test]
    fn overlength_examples_dropped_with_count() {
        let tok = toy_tokenizer();
        let dc = DirectionConfig {
            regime: Regime::OneToOne,
            source_langs: vec!["en".into()],
            target_langs: vec!["hi".into()],
            mixing: Mixing::Proportional,
        };
        let mut corpora = BTreeMap::new();
        corpora.insert(
            ("en".to_string(), "hi".to_string()),
            vec![
                SentencePair::new("en", "hi", "hello", "namaste").unwrap(),
                SentencePair::new("en", "hi", "hello world hello world hello", "namaste").unwrap(),
            ],
        );
        // cut exactly at the short example's length: src ⊕ tag ⊕ tgt ⊕ eos
        let fits = tok.encode("hello").len() + tok.encode("namaste").len() + 2;
        let ds =
            build_direction_dataset(&corpora, &dc, &tok, ArchKind::DecoderOnly, fits, 0).unwrap();
        assert_eq!(ds.examples.len(), 1);
        assert_eq!(ds.n_overlength_dropped, 1);
    }

    #[test]
    fn dataset_build_is_seed_deterministic() {
        let tok = toy_tokenizer();
        let dc = DirectionConfig {
            regime: Regime::OneToMany,
            source_langs: vec!["en".into()],
            target_langs: vec!["hi".into(), "mr".into()],
            mixing: Mixing::Proportional,
        };
        let corpora = corpora_en_to(&["hi", "mr"], 5);
        let a = build_direction_dataset(&corpora, &dc, &tok, ArchKind::DecoderOnly, 64, 123)
            .unwrap();
        let b = build_direction_dataset(&corpora, &dc, &tok, ArchKind::DecoderOnly, 64, 123)
            .unwrap();
        assert_eq!(a.examples, b.examples);
        let c = build_direction_dataset(&corpora, &dc, &tok, ArchKind::DecoderOnly, 64, 124)
            .unwrap();
        assert_ne!(a.examples, c.examples, "different seed should reshuffle");
    }

    #[test]
    fn uniform_mixing_truncates_to_smallest_direction() {
        let tok = toy_tokenizer();
        let dc = DirectionConfig {
            regime: Regime::OneToMany,
            source_langs: vec!["en".into()],
            target_langs: vec!["hi".into(), "mr".into()],
            mixing: Mixing::UniformPerDirection,
        };
        let mut corpora = corpora_en_to(&["hi"], 6);
        corpora.extend(corpora_en_to(&["mr"], 2));
        let ds =
            build_direction_dataset(&corpora, &dc, &tok, ArchKind::DecoderOnly, 64, 5).unwrap();
        assert_eq!(ds.examples.len(), 4);
        assert_eq!(ds.tags.iter().filter(|t| *t == "#hi#>").count(), 2);
    }

    #[test]
    fn batch_of_one_has_no_padding() {
        let ex = TrainingExample::DecoderOnly {
            tokens: vec![1, 2, 3],
            loss_mask: vec![false, true, true],
        };
        let batches = make_batches(&[ex], 4, 0, 7).unwrap();
        assert_eq!(batches.len(), 1);
        let Batch::DecoderOnly { tokens, valid, .. } = &batches[0] else {
            panic!()
        };
        assert_eq!(tokens[0].len(), 3);
        assert!(valid[0].iter().all(|&v| v));
    }

    #[test]
    fn mixed_lengths_pad_to_batch_max() {
        let exs = vec![
            TrainingExample::DecoderOnly {
                tokens: vec![1, 2, 3],
                loss_mask: vec![false, true, true],
            },
            TrainingExample::DecoderOnly {
                tokens: vec![1, 2, 3, 4, 5],
                loss_mask: vec![false, true, true, true, true],
            },
        ];
        let batches = make_batches(&exs, 2, 99, 7).unwrap();
        let Batch::DecoderOnly { tokens, valid, loss_mask } = &batches[0] else {
            panic!()
        };
        assert!(tokens.iter().all(|r| r.len() == 5));
        let short_row = tokens.iter().position(|r| r[3] == 99).unwrap();
        assert_eq!(valid[short_row][3..], [false, false]);
        assert_eq!(loss_mask[short_row][3..], [false, false]);
    }

    #[test]
    fn batching_is_seed_deterministic() {
        let exs: Vec<TrainingExample> = (0..10)
            .map(|i| TrainingExample::DecoderOnly {
                tokens: vec![i, i + 1],
                loss_mask: vec![false, true],
            })
            .collect();
        let a = make_batches(&exs, 3, 0, 42).unwrap();
        let b = make_batches(&exs, 3, 0, 42).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let (Batch::DecoderOnly { tokens: tx, .. }, Batch::DecoderOnly { tokens: ty, .. }) =
                (x, y)
            else {
                panic!()
            };
            assert_eq!(tx, ty);
        }
    }
}
