//! Dialogue corpora: vocabulary, file format, length filtering and
//! tf-idf weighted learning rates.

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

pub type Token = usize;

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const EOS: Token = 2;
pub const UNK: Token = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Context utterances beyond this many are dropped (oldest first).
pub const MAX_CONTEXT: usize = 2;
pub const DEFAULT_MIN_RESPONSE_LEN: usize = 5;
pub const DEFAULT_TFIDF_CAP: f64 = 3.0;

/// Built-in English function words, plus punctuation.
pub const STOP_WORDS: &[&str] = &[
    "a", "an", "the", "i", "me", "my", "we", "our", "you", "your", "he", "she", "it", "its",
    "they", "them", "is", "am", "are", "was", "were", "be", "been", "do", "does", "did", "have",
    "has", "had", "and", "but", "or", "so", "of", "to", "in", "on", "at", "for", "with", "about",
    "what", "that", "this", "very", "much", "really", "yes", "no", "not", "too", ".", ",", "?",
    "!",
];

pub fn is_stop_word(word: &str) -> bool {
    STOP_WORDS.contains(&word)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, Token>,
    stop: Vec<bool>,
}

impl Vocab {
    /// Vocabulary over `words` in first-occurrence order, after the reserved ids.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
            stop: Vec::new(),
        };
        for r in RESERVED {
            v.push(r, false);
        }
        for w in words {
            if !v.index.contains_key(w) {
                v.push(w, is_stop_word(w));
            }
        }
        v
    }

    fn push(&mut self, word: &str, stop: bool) {
        self.index.insert(word.to_string(), self.tokens.len());
        self.tokens.push(word.to_string());
        self.stop.push(stop);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Token {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn lookup(&self, word: &str) -> Option<Token> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: Token) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn is_stop(&self, id: Token) -> bool {
        self.stop.get(id).copied().unwrap_or(false)
    }

    pub fn is_reserved(id: Token) -> bool {
        id < RESERVED.len()
    }

    pub fn encode(&self, text: &str) -> Vec<Token> {
        text.split(' ')
            .filter(|w| !w.is_empty())
            .map(|w| self.id(w))
            .collect()
    }

    pub fn decode(&self, ids: &[Token]) -> String {
        ids.iter()
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Non-reserved tokens, one per line.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut words = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() || line.contains(' ') || line.contains('\t') {
                return Err(Error::ParseError {
                    line: i + 1,
                    msg: format!("invalid vocabulary entry {line:?}"),
                });
            }
            if RESERVED.contains(&line) {
                return Err(Error::ParseError {
                    line: i + 1,
                    msg: format!("reserved token {line:?} listed explicitly"),
                });
            }
            words.push(line);
        }
        let v = Vocab::from_words(words.iter().copied());
        if v.len() != words.len() + RESERVED.len() {
            return Err(Error::ParseError {
                line: 0,
                msg: "duplicate vocabulary entries".into(),
            });
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&text)
    }

    /// SHA-256 of the vocabulary file contents, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Dialogue {
    /// Up to [`MAX_CONTEXT`] utterances, oldest first.
    pub context: Vec<Vec<Token>>,
    pub response: Vec<Token>,
}

impl Dialogue {
    pub fn new(mut context: Vec<Vec<Token>>, response: Vec<Token>) -> Result<Self> {
        if response.is_empty() {
            return Err(Error::EmptyResponse);
        }
        if context.len() > MAX_CONTEXT {
            context.drain(..context.len() - MAX_CONTEXT);
        }
        Ok(Self { context, response })
    }

    /// Context utterances concatenated into one token stream.
    pub fn flat_context(&self) -> Vec<Token> {
        self.context.concat()
    }

    pub fn with_response(&self, response: Vec<Token>) -> Self {
        Self {
            context: self.context.clone(),
            response,
        }
    }

    pub fn to_line(&self, vocab: &Vocab) -> String {
        let mut line = String::new();
        for u in &self.context {
            let _ = write!(line, "{}\t", vocab.decode(u));
        }
        line.push_str(&vocab.decode(&self.response));
        line
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub dialogues: Vec<Dialogue>,
}

fn split_line(line: &str, line_no: usize) -> Result<Vec<&str>> {
    let fields: Vec<&str> = line.split('\t').collect();
    for f in &fields {
        if f.is_empty() {
            return Err(Error::ParseError {
                line: line_no,
                msg: "empty field".into(),
            });
        }
        if f.starts_with(' ') || f.ends_with(' ') || f.contains("  ") {
            return Err(Error::ParseError {
                line: line_no,
                msg: "tokens must be separated by single spaces".into(),
            });
        }
    }
    Ok(fields)
}

fn parse_lines(text: &str) -> Result<Vec<Vec<&str>>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        rows.push(split_line(line, i + 1)?);
    }
    if rows.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(rows)
}

fn rows_to_dialogues(rows: &[Vec<&str>], vocab: &Vocab) -> Result<Vec<Dialogue>> {
    rows.iter()
        .map(|fields| {
            let (response, context) = fields.split_last().expect("nonempty row");
            Dialogue::new(
                context.iter().map(|u| vocab.encode(u)).collect(),
                vocab.encode(response),
            )
        })
        .collect()
}

/// Parses corpus text, building the vocabulary from it.
pub fn parse_corpus(text: &str) -> Result<Corpus> {
    let rows = parse_lines(text)?;
    let vocab = Vocab::from_words(
        rows.iter()
            .flat_map(|r| r.iter().flat_map(|u| u.split(' '))),
    );
    let dialogues = rows_to_dialogues(&rows, &vocab)?;
    Ok(Corpus { vocab, dialogues })
}

/// Parses corpus text against an existing vocabulary; unknown tokens map to UNK.
pub fn parse_corpus_with_vocab(text: &str, vocab: &Vocab) -> Result<Vec<Dialogue>> {
    rows_to_dialogues(&parse_lines(text)?, vocab)
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

pub fn load_corpus_with_vocab(path: &Path, vocab: &Vocab) -> Result<Vec<Dialogue>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus_with_vocab(&text, vocab)
}

pub fn corpus_to_string(dialogues: &[Dialogue], vocab: &Vocab) -> String {
    let mut s = String::new();
    for d in dialogues {
        s.push_str(&d.to_line(vocab));
        s.push('\n');
    }
    s
}

/// Keeps dialogues whose response has at least `threshold` tokens.
pub fn filter_min_length(dialogues: &[Dialogue], threshold: usize) -> Vec<Dialogue> {
    dialogues
        .iter()
        .filter(|d| d.response.len() >= threshold)
        .cloned()
        .collect()
}

/// Index of the dialogue whose response is the utterance immediately after
/// dialogue `i`'s response, when the corpus is in conversation order.
pub fn successor(dialogues: &[Dialogue], i: usize) -> Option<&[Token]> {
    let cur = &dialogues[i];
    let next = dialogues.get(i + 1)?;
    let mut expected = cur.context.clone();
    expected.push(cur.response.clone());
    if expected.len() > MAX_CONTEXT {
        expected.drain(..expected.len() - MAX_CONTEXT);
    }
    (next.context == expected).then_some(next.response.as_slice())
}

/// Document frequencies over a collection of sentences, stop words excluded.
#[derive(Clone, Debug)]
pub struct TfIdf {
    docs: usize,
    df: HashMap<Token, usize>,
}

impl TfIdf {
    pub fn fit<'a>(sentences: impl IntoIterator<Item = &'a [Token]>, vocab: &Vocab) -> Self {
        let mut df = HashMap::new();
        let mut docs = 0;
        for s in sentences {
            docs += 1;
            let types: HashSet<Token> = s.iter().copied().filter(|&t| !vocab.is_stop(t)).collect();
            for t in types {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        Self { docs, df }
    }

    /// Smoothed inverse document frequency `ln((1 + N) / (1 + df)) + 1`.
    pub fn idf(&self, token: Token) -> f64 {
        let df = self.df.get(&token).copied().unwrap_or(0) as f64;
        ((1.0 + self.docs as f64) / (1.0 + df)).ln() + 1.0
    }

    /// Summed tf-idf over the non-stop tokens of `sentence`; `None` if it has none.
    pub fn sentence_score(&self, sentence: &[Token], vocab: &Vocab) -> Option<f64> {
        let content: Vec<Token> = sentence
            .iter()
            .copied()
            .filter(|&t| !vocab.is_stop(t) && !Vocab::is_reserved(t))
            .collect();
        if content.is_empty() {
            return None;
        }
        // Σ_w tf(w)·idf(w) with tf = count / length, i.e. the mean idf over tokens.
        let n = content.len() as f64;
        Some(content.iter().map(|&t| self.idf(t)).sum::<f64>() / n)
    }
}

/// Per-example learning rates for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LearningRateSchedule {
    pub base_lr: f64,
    pub cap: f64,
    /// Relative weights; their mean over the batch is 1.
    pub multipliers: Vec<f64>,
}

impl LearningRateSchedule {
    /// `rate_i = N · lr · t_i / Σ t`, after capping every `t_i` at `cap · min t`.
    /// Missing scores (all-stop-word sentences) take the batch minimum.
    pub fn from_scores(scores: &[Option<f64>], base_lr: f64, cap: f64) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Config("tf-idf rates need a nonempty batch".into()));
        }
        if base_lr.is_nan() || base_lr <= 0.0 || cap.is_nan() || cap < 1.0 {
            return Err(Error::Config(format!(
                "invalid tf-idf rate parameters lr={base_lr} L={cap}"
            )));
        }
        let defined: Vec<f64> = scores.iter().flatten().copied().collect();
        let floor = defined.iter().copied().fold(f64::INFINITY, f64::min);
        let t: Vec<f64> = if defined.is_empty() {
            vec![1.0; scores.len()]
        } else {
            scores
                .iter()
                .map(|s| s.unwrap_or(floor).min(cap * floor))
                .collect()
        };
        let n = t.len() as f64;
        let total: f64 = t.iter().sum();
        let multipliers = t.iter().map(|ti| n * ti / total).collect();
        Ok(Self {
            base_lr,
            cap,
            multipliers,
        })
    }

    pub fn rates(&self) -> Vec<f64> {
        self.multipliers.iter().map(|m| m * self.base_lr).collect()
    }
}

/// Convenience wrapper returning the per-example rates directly.
pub fn tfidf_weighted_rates(scores: &[f64], base_lr: f64, cap: f64) -> Result<Vec<f64>> {
    let scores: Vec<Option<f64>> = scores.iter().map(|&s| Some(s)).collect();
    Ok(LearningRateSchedule::from_scores(&scores, base_lr, cap)?.rates())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_single_context_line() {
        let c = parse_corpus("hello there\thi ! how are you ?\n").unwrap();
        assert_eq!(c.dialogues.len(), 1);
        let d = &c.dialogues[0];
        assert_eq!(d.context.len(), 1);
        assert_eq!(c.vocab.decode(&d.context[0]), "hello there");
        assert_eq!(d.response.len(), 6);
    }

    #[test]
    fn keeps_last_two_context_utterances() {
        let c = parse_corpus("a b\tc d\te f\tg h i j k\n").unwrap();
        let d = &c.dialogues[0];
        assert_eq!(d.context.len(), 2);
        assert_eq!(c.vocab.decode(&d.context[0]), "c d");
        assert_eq!(c.vocab.decode(&d.context[1]), "e f");
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(
            parse_corpus("a b\tc\nhello\t\n"),
            Err(Error::ParseError { line: 2, .. })
        ));
        assert!(matches!(
            parse_corpus("a  b\tc\n"),
            Err(Error::ParseError { line: 1, .. })
        ));
        assert!(matches!(parse_corpus(""), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let c = parse_corpus("a b\tc d e f g\n").unwrap();
        let held = parse_corpus_with_vocab("a zzz\tc d e f g\n", &c.vocab).unwrap();
        assert_eq!(held[0].context[0], vec![c.vocab.id("a"), UNK]);
    }

    #[test]
    fn vocab_roundtrips_and_reserves_ids() {
        let c = parse_corpus("the cat\tthe dog is here .\n").unwrap();
        let v = &c.vocab;
        for (i, r) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(r), i);
            assert!(!v.is_stop(i));
        }
        assert!(v.is_stop(v.id("the")));
        assert!(!v.is_stop(v.id("cat")));
        let back = Vocab::from_file_string(&v.to_file_string()).unwrap();
        assert_eq!(&back, v);
        for id in 0..v.len() {
            assert_eq!(v.id(v.word(id)), id);
        }
    }

    #[test]
    fn min_length_filter() {
        let mk = |n: usize| Dialogue::new(vec![], vec![4; n]).unwrap();
        let ds = vec![mk(3), mk(5), mk(7)];
        let kept: Vec<usize> = filter_min_length(&ds, 5)
            .iter()
            .map(|d| d.response.len())
            .collect();
        assert_eq!(kept, vec![5, 7]);
        assert_eq!(filter_min_length(&ds, 0), ds);
    }

    #[test]
    fn empty_response_is_rejected() {
        assert!(matches!(
            Dialogue::new(vec![vec![4]], vec![]),
            Err(Error::EmptyResponse)
        ));
    }

    #[test]
    fn tfidf_rate_examples() {
        let r = tfidf_weighted_rates(&[1.0, 3.0], 0.1, 3.0).unwrap();
        assert!((r[0] - 0.05).abs() < 1e-12 && (r[1] - 0.15).abs() < 1e-12);
        let r = tfidf_weighted_rates(&[1.0, 10.0], 0.1, 3.0).unwrap();
        assert!((r[0] - 0.05).abs() < 1e-12 && (r[1] - 0.15).abs() < 1e-12);
        let r = tfidf_weighted_rates(&[2.0, 2.0, 2.0], 0.37, 3.0).unwrap();
        assert!(r.iter().all(|x| (x - 0.37).abs() < 1e-12));
    }

    #[test]
    fn all_stop_word_sentence_gets_batch_minimum() {
        let s = LearningRateSchedule::from_scores(&[Some(2.0), None, Some(4.0)], 1.0, 3.0).unwrap();
        assert!((s.multipliers[1] - s.multipliers[0]).abs() < 1e-12);
        let c = parse_corpus("x\tthe cat sat\nx\tthe the\n").unwrap();
        let tf = TfIdf::fit(c.dialogues.iter().map(|d| d.response.as_slice()), &c.vocab);
        assert!(tf
            .sentence_score(&c.dialogues[1].response, &c.vocab)
            .is_none());
        assert!(
            tf.sentence_score(&c.dialogues[0].response, &c.vocab)
                .unwrap()
                > 0.0
        );
    }

    #[test]
    fn rarer_words_score_higher() {
        let c = parse_corpus("x\tcat cat\nx\tcat dog\nx\tcat bird\n").unwrap();
        let tf = TfIdf::fit(c.dialogues.iter().map(|d| d.response.as_slice()), &c.vocab);
        let common = tf
            .sentence_score(&c.dialogues[0].response, &c.vocab)
            .unwrap();
        let rare = tf
            .sentence_score(&c.dialogues[1].response, &c.vocab)
            .unwrap();
        assert!(rare > common);
    }

    #[test]
    fn successor_follows_conversation_order() {
        let c = parse_corpus("u1\tu2 x\nu1\tu2 x\tu3 y\n").unwrap();
        assert_eq!(
            successor(&c.dialogues, 0),
            Some(c.dialogues[1].response.as_slice())
        );
        assert_eq!(successor(&c.dialogues, 1), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn multipliers_average_one_and_respect_cap(
                scores in proptest::collection::vec(0.01f64..100.0, 1..40),
                cap in 1.0f64..10.0,
            ) {
                let s = LearningRateSchedule::from_scores(
                    &scores.iter().map(|&x| Some(x)).collect::<Vec<_>>(), 0.5, cap).unwrap();
                let mean = s.multipliers.iter().sum::<f64>() / s.multipliers.len() as f64;
                prop_assert!((mean - 1.0).abs() <= 1e-12);
                prop_assert!(s.multipliers.iter().all(|&m| m <= cap + 1e-12));
                let total: f64 = s.rates().iter().sum();
                prop_assert!((total - scores.len() as f64 * 0.5).abs() <= 1e-9);
            }

            #[test]
            fn filtering_is_idempotent(lens in proptest::collection::vec(1usize..15, 0..30), k in 0usize..12) {
                let ds: Vec<Dialogue> = lens.iter().map(|&n| Dialogue::new(vec![], vec![5; n]).unwrap()).collect();
                let once = filter_min_length(&ds, k);
                prop_assert_eq!(filter_min_length(&once, k), once);
            }
        }
    }
}
