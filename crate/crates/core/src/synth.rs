//! Synthetic dialogue grammar with closed-form response probabilities.
//!
//! A conversation is three utterances: an opening about a noun of one topic,
//! an answer about a noun of the same topic, and a reaction. Reactions use
//! the same word multisets as answers in a different order, so answers and
//! reactions are indistinguishable by unigram counts alone. Each conversation
//! yields two corpus lines, `opening → answer` and `opening, answer →
//! reaction`, written consecutively.

use crate::corpus::{parse_corpus, Corpus, Dialogue, Vocab};
use crate::error::Result;
use crate::rng::{categorical, seeded};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Word(&'static str),
    Noun,
    Adj,
}

use Slot::{Adj, Noun, Word};

const OPENINGS: [&[Slot]; 3] = [
    &[
        Word("do"),
        Word("you"),
        Word("like"),
        Word("the"),
        Noun,
        Word("?"),
    ],
    &[
        Word("what"),
        Word("do"),
        Word("you"),
        Word("think"),
        Word("about"),
        Word("the"),
        Noun,
        Word("?"),
    ],
    &[
        Word("tell"),
        Word("me"),
        Word("about"),
        Word("your"),
        Noun,
        Word("."),
    ],
];

const ANSWERS: [&[Slot]; 3] = [
    &[
        Word("yes"),
        Word("i"),
        Word("like"),
        Word("the"),
        Noun,
        Word("very"),
        Word("much"),
        Word("."),
    ],
    &[
        Word("i"),
        Word("think"),
        Word("the"),
        Noun,
        Word("is"),
        Adj,
        Word("."),
    ],
    &[Word("my"), Noun, Word("is"), Word("really"), Adj, Word(".")],
];

// Same word multisets as ANSWERS, reordered.
const REACTIONS: [&[Slot]; 3] = [
    &[
        Word("i"),
        Word("like"),
        Word("the"),
        Noun,
        Word("very"),
        Word("much"),
        Word("yes"),
        Word("."),
    ],
    &[
        Word("the"),
        Noun,
        Word("is"),
        Adj,
        Word("i"),
        Word("think"),
        Word("."),
    ],
    &[Word("really"), Adj, Word("is"), Word("my"), Noun, Word(".")],
];

const TOPICS: [([&str; 3], &str); 8] = [
    (["pizza", "soup", "bread"], "tasty"),
    (["song", "band", "album"], "loud"),
    (["train", "hotel", "beach"], "far"),
    (["office", "boss", "meeting"], "busy"),
    (["match", "team", "coach"], "fast"),
    (["rain", "snow", "wind"], "cold"),
    (["dog", "cat", "bird"], "cute"),
    (["film", "actor", "show"], "funny"),
];

/// Probability that a follow-up keeps the noun of the utterance it replies to.
const SAME_NOUN: f64 = 0.5;
/// Probability of the preferred template for each follow-up.
const PREFERRED_TEMPLATE: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UtteranceKind {
    Opening,
    Answer,
    Reaction,
}

/// Structural reading of one grammatical utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Parsed {
    pub kind: UtteranceKind,
    pub template: usize,
    pub topic: usize,
    pub noun: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Grammar;

fn templates(kind: UtteranceKind) -> &'static [&'static [Slot]; 3] {
    match kind {
        UtteranceKind::Opening => &OPENINGS,
        UtteranceKind::Answer => &ANSWERS,
        UtteranceKind::Reaction => &REACTIONS,
    }
}

fn template_probs(preferred: usize) -> [f64; 3] {
    let other = (1.0 - PREFERRED_TEMPLATE) / 2.0;
    let mut p = [other; 3];
    p[preferred] = PREFERRED_TEMPLATE;
    p
}

fn noun_probs(same: usize) -> [f64; 3] {
    let other = (1.0 - SAME_NOUN) / 2.0;
    let mut p = [other; 3];
    p[same] = SAME_NOUN;
    p
}

impl Grammar {
    pub fn new() -> Self {
        Grammar
    }

    pub fn num_topics(&self) -> usize {
        TOPICS.len()
    }

    /// Every word the grammar can emit.
    pub fn words(&self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = Vec::new();
        let mut push = |w: &'static str| {
            if !out.contains(&w) {
                out.push(w);
            }
        };
        for group in [&OPENINGS, &ANSWERS, &REACTIONS] {
            for t in group.iter() {
                for s in t.iter() {
                    if let Word(w) = s {
                        push(w);
                    }
                }
            }
        }
        for (nouns, adj) in TOPICS {
            nouns.iter().for_each(|n| push(n));
            push(adj);
        }
        out
    }

    fn render(
        &self,
        kind: UtteranceKind,
        template: usize,
        topic: usize,
        noun: usize,
    ) -> Vec<String> {
        templates(kind)[template]
            .iter()
            .map(|s| match s {
                Word(w) => w.to_string(),
                Noun => TOPICS[topic].0[noun].to_string(),
                Adj => TOPICS[topic].1.to_string(),
            })
            .collect()
    }

    pub fn parse<S: AsRef<str>>(&self, utterance: &[S]) -> Option<Parsed> {
        for kind in [
            UtteranceKind::Opening,
            UtteranceKind::Answer,
            UtteranceKind::Reaction,
        ] {
            for (ti, t) in templates(kind).iter().enumerate() {
                if t.len() != utterance.len() {
                    continue;
                }
                let mut topic = None;
                let mut noun = None;
                let mut adj_topic = None;
                let ok = t.iter().zip(utterance).all(|(slot, w)| {
                    let w = w.as_ref();
                    match slot {
                        Word(x) => *x == w,
                        Noun => TOPICS.iter().enumerate().any(|(k, (ns, _))| {
                            ns.iter().position(|n| *n == w).is_some_and(|i| {
                                topic = Some(k);
                                noun = Some(i);
                                true
                            })
                        }),
                        Adj => TOPICS.iter().position(|(_, a)| *a == w).is_some_and(|k| {
                            adj_topic = Some(k);
                            true
                        }),
                    }
                });
                if !ok {
                    continue;
                }
                let (Some(topic), Some(noun)) = (topic, noun) else {
                    continue;
                };
                if adj_topic.is_some_and(|k| k != topic) {
                    continue;
                }
                return Some(Parsed {
                    kind,
                    template: ti,
                    topic,
                    noun,
                });
            }
        }
        None
    }

    fn follow_up(&self, last: Parsed) -> Option<(UtteranceKind, [f64; 3])> {
        match last.kind {
            UtteranceKind::Opening => Some((UtteranceKind::Answer, template_probs(last.template))),
            UtteranceKind::Answer => Some((
                UtteranceKind::Reaction,
                template_probs((last.template + 1) % 3),
            )),
            UtteranceKind::Reaction => None,
        }
    }

    /// Exact distribution of the next utterance given a context, or `None`
    /// when the grammar defines no continuation.
    pub fn response_distribution<S: AsRef<str>>(
        &self,
        context: &[Vec<S>],
    ) -> Option<Vec<(Vec<String>, f64)>> {
        let last = self.parse(context.last()?)?;
        let (kind, tp) = self.follow_up(last)?;
        let np = noun_probs(last.noun);
        let mut out = Vec::with_capacity(9);
        for (t, &pt) in tp.iter().enumerate() {
            for (n, &pn) in np.iter().enumerate() {
                out.push((self.render(kind, t, last.topic, n), pt * pn));
            }
        }
        Some(out)
    }

    /// `p(response | context)` under the grammar (0 when ungrammatical).
    pub fn response_prob<S: AsRef<str>, T: AsRef<str>>(
        &self,
        context: &[Vec<S>],
        response: &[T],
    ) -> f64 {
        self.response_distribution(context).map_or(0.0, |dist| {
            dist.iter()
                .filter(|(r, _)| {
                    r.len() == response.len()
                        && r.iter().zip(response).all(|(a, b)| a == b.as_ref())
                })
                .map(|(_, p)| p)
                .sum()
        })
    }

    /// Whether `response` has nonzero probability after `context`.
    pub fn is_consistent<S: AsRef<str>, T: AsRef<str>>(
        &self,
        context: &[Vec<S>],
        response: &[T],
    ) -> bool {
        self.response_prob(context, response) > 0.0
    }

    fn sample_follow_up<R: Rng>(&self, last: Parsed, rng: &mut R) -> Option<(Parsed, Vec<String>)> {
        let (kind, tp) = self.follow_up(last)?;
        let t = categorical(&tp, rng);
        let n = categorical(&noun_probs(last.noun), rng);
        let parsed = Parsed {
            kind,
            template: t,
            topic: last.topic,
            noun: n,
        };
        Some((parsed, self.render(kind, t, last.topic, n)))
    }

    pub fn sample_response<S: AsRef<str>, R: Rng>(
        &self,
        context: &[Vec<S>],
        rng: &mut R,
    ) -> Option<Vec<String>> {
        let last = self.parse(context.last()?)?;
        self.sample_follow_up(last, rng).map(|(_, u)| u)
    }

    /// One three-utterance conversation.
    pub fn sample_conversation<R: Rng>(&self, rng: &mut R) -> [Vec<String>; 3] {
        let topic = rng.gen_range(0..TOPICS.len());
        let noun = rng.gen_range(0..3);
        let template = rng.gen_range(0..3);
        let opening = Parsed {
            kind: UtteranceKind::Opening,
            template,
            topic,
            noun,
        };
        let u1 = self.render(UtteranceKind::Opening, template, topic, noun);
        let (answer, u2) = self
            .sample_follow_up(opening, rng)
            .expect("openings continue");
        let (_, u3) = self
            .sample_follow_up(answer, rng)
            .expect("answers continue");
        [u1, u2, u3]
    }
}

/// Corpus text of `n_dialogues` lines generated from the grammar.
pub fn synth_corpus_text(seed: u64, n_dialogues: usize) -> String {
    let grammar = Grammar::new();
    let mut rng = seeded(seed);
    let mut out = String::new();
    let mut lines = 0;
    while lines < n_dialogues {
        let [u1, u2, u3] = grammar.sample_conversation(&mut rng);
        out.push_str(&format!("{}\t{}\n", u1.join(" "), u2.join(" ")));
        lines += 1;
        if lines < n_dialogues {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                u1.join(" "),
                u2.join(" "),
                u3.join(" ")
            ));
            lines += 1;
        }
    }
    out
}

pub fn synth_corpus(seed: u64, n_dialogues: usize) -> Result<Corpus> {
    parse_corpus(&synth_corpus_text(seed, n_dialogues))
}

/// Perplexity of the responses (EOS included) under the grammar itself: the
/// floor any model of the corpus can reach in expectation.
pub fn grammar_perplexity(vocab: &Vocab, dialogues: &[Dialogue]) -> f64 {
    let grammar = Grammar::new();
    let (mut nll, mut tokens) = (0.0, 0usize);
    for d in dialogues {
        let context: Vec<Vec<&str>> = d
            .context
            .iter()
            .map(|u| u.iter().map(|&t| vocab.word(t)).collect())
            .collect();
        let response: Vec<&str> = d.response.iter().map(|&t| vocab.word(t)).collect();
        nll -= grammar.response_prob(&context, &response).ln();
        tokens += d.response.len() + 1;
    }
    (nll / tokens as f64).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::successor;

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(synth_corpus_text(1, 10), synth_corpus_text(1, 10));
        assert_ne!(synth_corpus_text(1, 10), synth_corpus_text(2, 10));
    }

    #[test]
    fn responses_within_length_bounds() {
        let c = synth_corpus(3, 500).unwrap();
        assert_eq!(c.dialogues.len(), 500);
        assert!(c
            .dialogues
            .iter()
            .all(|d| (5..=12).contains(&d.response.len())));
    }

    #[test]
    fn vocabulary_is_about_sixty_words() {
        let n = Grammar::new().words().len();
        assert!((45..=65).contains(&n), "{n}");
    }

    #[test]
    fn distributions_are_normalized_and_parse_back() {
        let g = Grammar::new();
        let mut rng = seeded(9);
        for _ in 0..50 {
            let [u1, u2, u3] = g.sample_conversation(&mut rng);
            for ctx in [vec![u1.clone()], vec![u1.clone(), u2.clone()]] {
                let dist = g.response_distribution(&ctx).unwrap();
                let total: f64 = dist.iter().map(|(_, p)| p).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
            assert!(g.is_consistent(std::slice::from_ref(&u1), &u2));
            assert!(g.is_consistent(&[u1.clone(), u2.clone()], &u3));
            assert_eq!(g.parse(&u3).unwrap().kind, UtteranceKind::Reaction);
            assert!(g.response_distribution(&[u3]).is_none());
        }
    }

    #[test]
    fn answers_and_reactions_share_word_multisets() {
        for (a, r) in ANSWERS.iter().zip(REACTIONS.iter()) {
            let mut a: Vec<_> = a.iter().map(|s| format!("{s:?}")).collect();
            let mut r: Vec<_> = r.iter().map(|s| format!("{s:?}")).collect();
            a.sort();
            r.sort();
            assert_eq!(a, r);
        }
    }

    #[test]
    fn conversation_lines_have_successors() {
        let c = synth_corpus(5, 20).unwrap();
        for i in (0..20).step_by(2) {
            assert!(successor(&c.dialogues, i).is_some());
            assert!(successor(&c.dialogues, i + 1).is_none());
        }
    }
}
