//! Subword vocabulary: byte-pair-merge construction and greedy
//! longest-match tokenization.
//!
//! Text is lowercased and split on whitespace; each word is segmented
//! independently by repeatedly taking the longest vocabulary unit that
//! prefixes the remaining characters. Unknown spans collapse to one `<unk>`
//! per run. Tokenization is total: any string, including the empty one,
//! encodes without error.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::text::EncodedText;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<cls>", "<sep>"];

#[derive(Debug, Clone)]
pub struct Vocabulary {
    units: Vec<String>,
    index: HashMap<String, u32>,
    max_unit_chars: usize,
}

impl Vocabulary {
    pub fn from_units(units: Vec<String>) -> Result<Self> {
        if units.len() < RESERVED.len() {
            return Err(Error::Format(format!(
                "vocabulary of {} entries cannot hold the reserved tokens",
                units.len()
            )));
        }
        for (i, reserved) in RESERVED.iter().enumerate() {
            if units[i] != *reserved {
                return Err(Error::Format(format!(
                    "vocabulary entry {i} is `{}`, expected reserved `{reserved}`",
                    units[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(units.len());
        for (i, u) in units.iter().enumerate() {
            if index.insert(u.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry `{u}`")));
            }
        }
        let max_unit_chars = units
            .iter()
            .skip(RESERVED.len())
            .map(|u| u.chars().count())
            .max()
            .unwrap_or(1);
        Ok(Vocabulary {
            units,
            index,
            max_unit_chars,
        })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn id_of(&self, unit: &str) -> Option<u32> {
        self.index.get(unit).copied()
    }

    pub fn unit(&self, id: u32) -> Option<&str> {
        self.units.get(id as usize).map(|s| s.as_str())
    }

    /// One unit per line, id = line number.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for u in &self.units {
            let _ = writeln!(out, "{u}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let units: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        Vocabulary::from_units(units)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Vocabulary::from_text(&text)
    }
}

fn normalize(text: &str) -> String {
    text.to_lowercase()
}

/// Frequency-ranked byte-pair-merge vocabulary over a corpus.
///
/// Base characters are ranked by corpus frequency (ties lexicographic),
/// then merge products are appended in merge order until `size` entries
/// exist. Deterministic given corpus order; pair-count ties break to the
/// lexicographically smallest pair.
pub fn build_vocab(corpus: &[String], size: usize) -> Result<Vocabulary> {
    if size < RESERVED.len() + 1 {
        return Err(Error::Input(format!(
            "vocabulary size {size} leaves no room beyond the reserved tokens"
        )));
    }
    if corpus.iter().all(|t| normalize(t).split_whitespace().next().is_none()) {
        return Err(Error::Input("empty corpus".into()));
    }

    // word frequencies; BTreeMap for deterministic iteration
    let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
    for text in corpus {
        for word in normalize(text).split_whitespace() {
            *word_freq.entry(word.to_string()).or_insert(0) += 1;
        }
    }

    // character inventory ranked by frequency, ties lexicographic
    let mut char_freq: BTreeMap<char, u64> = BTreeMap::new();
    for (word, freq) in &word_freq {
        for ch in word.chars() {
            *char_freq.entry(ch).or_insert(0) += freq;
        }
    }
    let mut chars: Vec<(char, u64)> = char_freq.into_iter().collect();
    chars.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut units: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    for (ch, _) in &chars {
        if units.len() >= size {
            break;
        }
        units.push(ch.to_string());
    }

    // symbol sequences per word, merged in place
    let mut words: Vec<(Vec<String>, u64)> = word_freq
        .iter()
        .map(|(w, f)| (w.chars().map(|c| c.to_string()).collect(), *f))
        .collect();

    while units.len() < size {
        let mut pair_counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (symbols, freq) in &words {
            for pair in symbols.windows(2) {
                *pair_counts
                    .entry((pair[0].clone(), pair[1].clone()))
                    .or_insert(0) += freq;
            }
        }
        // ascending iteration means the first strict maximum is the
        // lexicographically smallest among ties
        let Some((best_pair, best_count)) = pair_counts
            .iter()
            .fold(None::<(&(String, String), u64)>, |acc, (p, &c)| match acc {
                Some((_, bc)) if c <= bc => acc,
                _ => Some((p, c)),
            })
        else {
            break;
        };
        if best_count == 0 {
            break;
        }
        let merged = format!("{}{}", best_pair.0, best_pair.1);
        let (left, right) = (best_pair.0.clone(), best_pair.1.clone());
        units.push(merged.clone());
        for (symbols, _) in &mut words {
            let mut i = 0;
            while i + 1 < symbols.len() {
                if symbols[i] == left && symbols[i + 1] == right {
                    symbols[i] = merged.clone();
                    symbols.remove(i + 1);
                } else {
                    i += 1;
                }
            }
        }
    }

    Vocabulary::from_units(units)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TokenizeStats {
    pub subwords: usize,
    pub truncated: bool,
}

/// Greedy longest-match segmentation of one word into vocabulary ids.
fn segment_word(word: &str, vocab: &Vocabulary, out: &mut Vec<u32>) {
    let chars: Vec<char> = word.chars().collect();
    let mut i = 0;
    let mut in_unknown_run = false;
    while i < chars.len() {
        let max_len = (chars.len() - i).min(vocab.max_unit_chars);
        let mut matched = None;
        for len in (1..=max_len).rev() {
            let candidate: String = chars[i..i + len].iter().collect();
            if let Some(id) = vocab.id_of(&candidate) {
                matched = Some((id, len));
                break;
            }
        }
        match matched {
            Some((id, len)) => {
                out.push(id);
                i += len;
                in_unknown_run = false;
            }
            None => {
                if !in_unknown_run {
                    out.push(UNK_ID);
                    in_unknown_run = true;
                }
                i += 1;
            }
        }
    }
}

/// Tokenize into `[cls] subwords [sep]` padded to `max_seq_len`, with the
/// mask marking real positions and all-zero segment ids.
///
/// ```
/// use memefuse_core::data::{build_vocab, tokenize};
///
/// let vocab = build_vocab(&["sun glow sun".to_string()], 32).unwrap();
/// let encoded = tokenize("sun glow", &vocab, 8).unwrap();
/// assert_eq!(encoded.input_ids[0], 2);           // [cls]
/// assert_eq!(encoded.input_mask[..4], [1, 1, 1, 1]);
/// ```
pub fn tokenize(text: &str, vocab: &Vocabulary, max_seq_len: usize) -> Result<EncodedText> {
    Ok(tokenize_with_stats(text, vocab, max_seq_len)?.0)
}

pub fn tokenize_with_stats(
    text: &str,
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<(EncodedText, TokenizeStats)> {
    if max_seq_len < 2 {
        return Err(Error::Input(format!(
            "max_seq_len {max_seq_len} cannot hold [cls] and [sep]"
        )));
    }
    let mut subwords = Vec::new();
    for word in normalize(text).split_whitespace() {
        segment_word(word, vocab, &mut subwords);
    }
    let stats = TokenizeStats {
        subwords: subwords.len(),
        truncated: subwords.len() > max_seq_len - 2,
    };
    subwords.truncate(max_seq_len - 2);

    let real = subwords.len() + 2;
    let mut input_ids = Vec::with_capacity(max_seq_len);
    input_ids.push(CLS_ID);
    input_ids.extend_from_slice(&subwords);
    input_ids.push(SEP_ID);
    input_ids.resize(max_seq_len, PAD_ID);
    let mut input_mask = vec![1u8; real];
    input_mask.resize(max_seq_len, 0);
    Ok((
        EncodedText {
            input_ids,
            input_mask,
            segment_ids: vec![0; max_seq_len],
        },
        stats,
    ))
}

/// Concatenate the units of non-special ids. For a single vocab-coverable
/// word this inverts `tokenize`; word boundaries are not representable.
pub fn detokenize(ids: &[u32], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for &id in ids {
        if id == PAD_ID || id == UNK_ID || id == CLS_ID || id == SEP_ID {
            continue;
        }
        if let Some(unit) = vocab.unit(id) {
            out.push_str(unit);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_of(units: &[&str]) -> Vocabulary {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(units.iter().map(|s| s.to_string()));
        Vocabulary::from_units(all).unwrap()
    }

    #[test]
    fn empty_string_is_cls_sep_padding() {
        let v = vocab_of(&["a"]);
        let enc = tokenize("", &v, 6).unwrap();
        assert_eq!(enc.input_ids, vec![CLS_ID, SEP_ID, 0, 0, 0, 0]);
        assert_eq!(enc.input_mask, vec![1, 1, 0, 0, 0, 0]);
        assert_eq!(enc.segment_ids, vec![0; 6]);
    }

    #[test]
    fn greedy_longest_match_hand_traced() {
        // "aaa" with units {a, aa}: longest-first gives [aa, a]
        let v = vocab_of(&["a", "aa"]);
        let enc = tokenize("aaa", &v, 8).unwrap();
        let aa = v.id_of("aa").unwrap();
        let a = v.id_of("a").unwrap();
        assert_eq!(&enc.input_ids[..4], &[CLS_ID, aa, a, SEP_ID]);
    }

    #[test]
    fn unknown_runs_collapse_to_single_unk() {
        let v = vocab_of(&["a"]);
        let enc = tokenize("aXYa", &v, 8).unwrap();
        let a = v.id_of("a").unwrap();
        assert_eq!(&enc.input_ids[..5], &[CLS_ID, a, UNK_ID, a, SEP_ID]);
    }

    #[test]
    fn truncation_keeps_first_subwords() {
        let v = vocab_of(&["a", "b"]);
        let (enc, stats) = tokenize_with_stats("a b a b a b", &v, 4).unwrap();
        assert!(stats.truncated);
        assert_eq!(enc.input_ids.len(), 4);
        let a = v.id_of("a").unwrap();
        let b = v.id_of("b").unwrap();
        assert_eq!(enc.input_ids, vec![CLS_ID, a, b, SEP_ID]);
        assert_eq!(enc.input_mask, vec![1, 1, 1, 1]);
    }

    #[test]
    fn single_char_corpus_builds_reserved_plus_char() {
        let corpus = vec!["a a a".to_string()];
        let v = build_vocab(&corpus, 10).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.unit(4), Some("a"));
    }

    #[test]
    fn two_word_corpus_merges_hand_traced() {
        // corpus: "ab ab abc"
        // chars by freq: a(3) b(3) c(1); first merge (a,b)x3 -> "ab";
        // second merge (ab,c)x1 -> "abc"
        let corpus = vec!["ab ab abc".to_string()];
        let v = build_vocab(&corpus, 9).unwrap();
        let units: Vec<&str> = (0..v.len()).map(|i| v.unit(i as u32).unwrap()).collect();
        assert_eq!(
            units,
            vec!["<pad>", "<unk>", "<cls>", "<sep>", "a", "b", "c", "ab", "abc"]
        );
    }

    #[test]
    fn rebuild_is_identical() {
        let corpus = vec![
            "the cat sat on the mat".to_string(),
            "the dog sat on the log".to_string(),
        ];
        let a = build_vocab(&corpus, 40).unwrap();
        let b = build_vocab(&corpus, 40).unwrap();
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn empty_corpus_is_input_error() {
        assert!(matches!(
            build_vocab(&["   ".to_string()], 10),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn vocab_text_roundtrip() {
        let corpus = vec!["hello world".to_string()];
        let v = build_vocab(&corpus, 24).unwrap();
        let reparsed = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(v.to_text(), reparsed.to_text());
    }

    #[test]
    fn detokenize_inverts_tokenize_for_coverable_words() {
        let corpus = vec!["glow dawn sky sun fox owl".to_string()];
        let v = build_vocab(&corpus, 48).unwrap();
        for word in ["glow", "dawn", "sky", "fox"] {
            let enc = tokenize(word, &v, 16).unwrap();
            assert_eq!(detokenize(&enc.input_ids, &v), word);
        }
    }
}
