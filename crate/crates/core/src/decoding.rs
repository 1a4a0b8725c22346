//! Greedy, sampling, penalized beam search, backward-model reranking and
//! anti-language-model decoding.

use crate::autodiff::{log_softmax, Graph, Var};
use crate::corpus::{Token, Vocab, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::models::{with_eos, GenSession, Generator, LanguageModel, MAX_DECODE_LEN};
use crate::rng::{categorical, seeded};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

/// A model that emits next-token log-scores one step at a time.
pub trait StepModel {
    type State: Clone;
    fn vocab_size(&self) -> usize;
    fn start(&mut self) -> Result<Self::State>;
    /// Consumes `prev` and returns scores for every vocabulary entry.
    fn step(&mut self, state: &mut Self::State, prev: Token) -> Result<Vec<f64>>;
}

/// Tokens a decoder may emit: everything except padding and the start symbol.
pub fn emittable(token: Token) -> bool {
    token != PAD && token != BOS
}

/// Generator conditioned on a fixed context.
pub struct GeneratorStepper<'a> {
    gen: &'a Generator,
    graph: Graph<'a>,
    context: Vec<Token>,
}

impl<'a> GeneratorStepper<'a> {
    pub fn new(gen: &'a Generator, context: &[Token]) -> Self {
        Self {
            gen,
            graph: Graph::inference(&gen.params),
            context: context.to_vec(),
        }
    }
}

impl StepModel for GeneratorStepper<'_> {
    type State = GenSession;

    fn vocab_size(&self) -> usize {
        self.gen.dims.vocab
    }

    fn start(&mut self) -> Result<GenSession> {
        self.gen.begin(&mut self.graph, &self.context)
    }

    fn step(&mut self, state: &mut GenSession, prev: Token) -> Result<Vec<f64>> {
        let lp = self.gen.advance(&mut self.graph, state, prev)?;
        Ok(self.graph.value(lp).to_vec())
    }
}

/// Generator score minus a weighted language-model score.
pub struct AntiLmStepper<'a> {
    gen: GeneratorStepper<'a>,
    lm: &'a LanguageModel,
    lm_graph: Graph<'a>,
    weight: f64,
}

impl<'a> AntiLmStepper<'a> {
    pub fn new(gen: &'a Generator, lm: &'a LanguageModel, context: &[Token], weight: f64) -> Self {
        Self {
            gen: GeneratorStepper::new(gen, context),
            lm,
            lm_graph: Graph::inference(&lm.params),
            weight,
        }
    }
}

impl StepModel for AntiLmStepper<'_> {
    type State = (GenSession, Var);

    fn vocab_size(&self) -> usize {
        self.gen.vocab_size()
    }

    fn start(&mut self) -> Result<Self::State> {
        Ok((self.gen.start()?, self.lm.begin(&mut self.lm_graph)))
    }

    fn step(&mut self, state: &mut Self::State, prev: Token) -> Result<Vec<f64>> {
        let mut scores = self.gen.step(&mut state.0, prev)?;
        let lm = self.lm.advance(&mut self.lm_graph, &mut state.1, prev)?;
        for (s, l) in scores.iter_mut().zip(self.lm_graph.value(lm)) {
            *s -= self.weight * l;
        }
        Ok(scores)
    }
}

/// A decoded response (EOS stripped) with its score.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<Token>,
    pub score: f64,
}

fn argmax_emittable(scores: &[f64]) -> Token {
    let mut best = None;
    for (t, &s) in scores.iter().enumerate().filter(|(t, _)| emittable(*t)) {
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((t, s)),
        }
    }
    best.map(|(t, _)| t).unwrap_or(EOS)
}

fn strip_eos(mut tokens: Vec<Token>) -> Vec<Token> {
    if tokens.last() == Some(&EOS) {
        tokens.pop();
    }
    tokens
}

pub fn greedy_with<M: StepModel>(model: &mut M, max_len: usize) -> Result<Decoded> {
    let mut state = model.start()?;
    let (mut prev, mut tokens, mut score) = (BOS, Vec::new(), 0.0);
    for _ in 0..max_len {
        let scores = model.step(&mut state, prev)?;
        let t = argmax_emittable(&scores);
        score += scores[t];
        tokens.push(t);
        if t == EOS {
            break;
        }
        prev = t;
    }
    Ok(Decoded {
        tokens: strip_eos(tokens),
        score,
    })
}

/// Distribution used for sampling: emittable tokens only, logits divided by the temperature.
pub fn tempered_distribution(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    let scaled: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(t, &s)| {
            if emittable(t) {
                s / temperature
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    Ok(log_softmax(&scaled)?.into_iter().map(f64::exp).collect())
}

pub fn sample_with<M: StepModel>(
    model: &mut M,
    max_len: usize,
    temperature: f64,
    seed: u64,
) -> Result<Decoded> {
    let mut rng = seeded(seed);
    let mut state = model.start()?;
    let (tokens, score) =
        continue_sampling(model, &mut state, BOS, max_len, temperature, &mut rng)?;
    Ok(Decoded {
        tokens: strip_eos(tokens),
        score,
    })
}

/// Samples up to `budget` tokens after `prev`, keeping a final EOS.
/// Returns the tokens and the sum of their raw scores.
pub fn continue_sampling<M: StepModel, R: rand::Rng>(
    model: &mut M,
    state: &mut M::State,
    mut prev: Token,
    budget: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<(Vec<Token>, f64)> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let (mut tokens, mut score) = (Vec::new(), 0.0);
    for _ in 0..budget {
        let scores = model.step(state, prev)?;
        let t = categorical(&tempered_distribution(&scores, temperature)?, rng);
        score += scores[t];
        tokens.push(t);
        if t == EOS {
            break;
        }
        prev = t;
    }
    Ok((tokens, score))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<Token>,
    /// Raw log-score minus all sibling and repeat penalties so far.
    pub score: f64,
    /// Sum of raw per-step model scores.
    pub log_prob: f64,
    /// Index of the parent in the previous step's beam.
    pub parent: Option<usize>,
    /// Penalizable word types emitted so far.
    pub generated: BTreeSet<Token>,
}

impl BeamHypothesis {
    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }

    pub fn response(&self) -> &[Token] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

/// Ranking order: higher score, then lower token ids, then shorter.
pub fn hypothesis_order(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamSettings {
    pub width: usize,
    pub sibling_penalty: f64,
    pub repeat_penalty: f64,
    pub max_len: usize,
}

/// Sibling rank (0-based) of every emittable token under `scores`.
pub fn sibling_ranks(scores: &[f64]) -> Vec<(Token, usize)> {
    let mut order: Vec<Token> = (0..scores.len()).filter(|&t| emittable(t)).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.into_iter().enumerate().map(|(r, t)| (t, r)).collect()
}

/// Beam search with intra-sibling rank and repeated-type penalties.
/// `penalizable` selects the word types subject to the repeat penalty.
pub fn beam_search_with<M: StepModel>(
    model: &mut M,
    settings: &BeamSettings,
    penalizable: &dyn Fn(Token) -> bool,
) -> Result<Vec<BeamHypothesis>> {
    if settings.width == 0 || settings.max_len == 0 {
        return Err(Error::Config(
            "beam width and max length must be at least 1".into(),
        ));
    }
    let root = BeamHypothesis {
        tokens: Vec::new(),
        score: 0.0,
        log_prob: 0.0,
        parent: None,
        generated: BTreeSet::new(),
    };
    let mut live = vec![(root, model.start()?)];
    let mut finished = Vec::new();
    for step in 0..settings.max_len {
        let mut candidates: Vec<(BeamHypothesis, usize)> = Vec::new();
        let mut states = Vec::with_capacity(live.len());
        for (p, (hyp, state)) in live.iter().enumerate() {
            let mut state = state.clone();
            let prev = hyp.tokens.last().copied().unwrap_or(BOS);
            let scores = model.step(&mut state, prev)?;
            states.push(state);
            for (t, rank) in sibling_ranks(&scores) {
                let repeated = penalizable(t) && hyp.generated.contains(&t);
                let mut child = BeamHypothesis {
                    tokens: hyp.tokens.clone(),
                    score: hyp.score + scores[t]
                        - settings.sibling_penalty * rank as f64
                        - if repeated {
                            settings.repeat_penalty
                        } else {
                            0.0
                        },
                    log_prob: hyp.log_prob + scores[t],
                    parent: Some(p),
                    generated: hyp.generated.clone(),
                };
                child.tokens.push(t);
                if penalizable(t) {
                    child.generated.insert(t);
                }
                candidates.push((child, p));
            }
        }
        candidates.sort_by(|a, b| hypothesis_order(&a.0, &b.0));
        candidates.truncate(settings.width);
        let last_step = step + 1 == settings.max_len;
        let mut next = Vec::new();
        for (hyp, p) in candidates {
            if hyp.finished() || last_step {
                finished.push(hyp);
            } else {
                next.push((hyp, states[p].clone()));
            }
        }
        if next.is_empty() {
            break;
        }
        live = next;
    }
    finished.sort_by(hypothesis_order);
    finished.truncate(settings.width);
    Ok(finished)
}

/// Reranks by `(1-λ)·log p(y|x)/|y| + λ·log p(x|y)/|x|`, stable and descending.
pub fn mmi_backward_rerank(
    nbest: &[BeamHypothesis],
    context: &[Token],
    backward: &Generator,
    lambda: f64,
) -> Result<Vec<(BeamHypothesis, f64)>> {
    if nbest.is_empty() {
        return Err(Error::Config("cannot rerank an empty n-best list".into()));
    }
    let target = with_eos(context);
    let mut scored = Vec::with_capacity(nbest.len());
    for hyp in nbest {
        let forward = hyp.log_prob / hyp.tokens.len().max(1) as f64;
        let back: f64 = backward.log_prob(hyp.response(), &target)?.iter().sum();
        let back = back / target.len() as f64;
        scored.push((hyp.clone(), (1.0 - lambda) * forward + lambda * back));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scored)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Sample,
    Beam,
    MmiBackward,
    AntiLm,
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "greedy" => Strategy::Greedy,
            "sample" => Strategy::Sample,
            "beam" => Strategy::Beam,
            "mmi_backward" => Strategy::MmiBackward,
            "anti_lm" => Strategy::AntiLm,
            _ => return Err(Error::Config(format!("unknown decoding strategy {s:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub width: usize,
    pub sibling_penalty: f64,
    pub repeat_penalty: f64,
    pub temperature: f64,
    pub mmi_weight: f64,
    pub anti_lm_weight: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Beam,
            width: 5,
            sibling_penalty: 1.0,
            repeat_penalty: 1.0,
            temperature: 1.0,
            mmi_weight: 0.5,
            anti_lm_weight: 0.5,
            max_len: MAX_DECODE_LEN,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.width < 1 {
            return bad("beam width must be at least 1");
        }
        if self.max_len < 1 {
            return bad("max length must be at least 1");
        }
        if !(self.sibling_penalty >= 0.0
            && self.repeat_penalty >= 0.0
            && self.anti_lm_weight >= 0.0)
        {
            return bad("penalties and anti-LM weight must be non-negative");
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return bad("temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.mmi_weight) {
            return bad("MMI weight must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn beam(&self) -> BeamSettings {
        BeamSettings {
            width: self.width,
            sibling_penalty: self.sibling_penalty,
            repeat_penalty: self.repeat_penalty,
            max_len: self.max_len,
        }
    }
}

/// Optional auxiliary models needed by some strategies.
#[derive(Clone, Copy, Default)]
pub struct Auxiliary<'a> {
    pub backward: Option<&'a Generator>,
    pub lm: Option<&'a LanguageModel>,
}

/// Penalizable word types: content words of the vocabulary.
pub fn content_word(vocab: &Vocab) -> impl Fn(Token) -> bool + '_ {
    move |t| !Vocab::is_reserved(t) && !vocab.is_stop(t)
}

/// Best beam hypothesis (or, failing that, an empty response).
fn top(hyps: Vec<BeamHypothesis>) -> Decoded {
    hyps.into_iter()
        .next()
        .map(|h| Decoded {
            tokens: h.response().to_vec(),
            score: h.score,
        })
        .unwrap_or(Decoded {
            tokens: Vec::new(),
            score: f64::NEG_INFINITY,
        })
}

/// Decodes one response for the flattened `context`.
pub fn decode(
    gen: &Generator,
    vocab: &Vocab,
    context: &[Token],
    config: &DecodeConfig,
    aux: Auxiliary<'_>,
) -> Result<Decoded> {
    config.validate()?;
    let penal = content_word(vocab);
    let mut stepper = GeneratorStepper::new(gen, context);
    match config.strategy {
        Strategy::Greedy => greedy_with(&mut stepper, config.max_len),
        Strategy::Sample => sample_with(
            &mut stepper,
            config.max_len,
            config.temperature,
            config.seed,
        ),
        Strategy::Beam => Ok(top(beam_search_with(&mut stepper, &config.beam(), &penal)?)),
        Strategy::MmiBackward => {
            let backward = aux.backward.ok_or_else(|| {
                Error::Config("mmi_backward decoding needs a backward generator".into())
            })?;
            let nbest = beam_search_with(&mut stepper, &config.beam(), &penal)?;
            let ranked = mmi_backward_rerank(&nbest, context, backward, config.mmi_weight)?;
            let (h, score) = ranked.into_iter().next().expect("nonempty n-best");
            Ok(Decoded {
                tokens: h.response().to_vec(),
                score,
            })
        }
        Strategy::AntiLm => {
            let lm = aux
                .lm
                .ok_or_else(|| Error::Config("anti_lm decoding needs a language model".into()))?;
            Ok(top(anti_lm_beam(gen, lm, vocab, context, config)?))
        }
    }
}

pub fn beam_search(
    gen: &Generator,
    vocab: &Vocab,
    context: &[Token],
    config: &DecodeConfig,
) -> Result<Vec<BeamHypothesis>> {
    config.validate()?;
    beam_search_with(
        &mut GeneratorStepper::new(gen, context),
        &config.beam(),
        &content_word(vocab),
    )
}

pub fn anti_lm_beam(
    gen: &Generator,
    lm: &LanguageModel,
    vocab: &Vocab,
    context: &[Token],
    config: &DecodeConfig,
) -> Result<Vec<BeamHypothesis>> {
    config.validate()?;
    let mut stepper = AntiLmStepper::new(gen, lm, context, config.anti_lm_weight);
    beam_search_with(&mut stepper, &config.beam(), &content_word(vocab))
}

/// One line of a decode output file.
pub fn decode_line(
    vocab: &Vocab,
    context: &[Vec<Token>],
    response: &[Token],
    score: f64,
) -> String {
    let ctx: Vec<String> = context.iter().map(|u| vocab.decode(u)).collect();
    let mut line = String::new();
    let _ = write!(
        line,
        "{}\t{}\t{:.6}",
        ctx.join(" </s> "),
        vocab.decode(response),
        score
    );
    line
}

pub fn write_decode_file(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a decode output line into `(context, response, score)`.
pub fn parse_decode_line(line: &str) -> Option<(String, String, f64)> {
    let mut parts = line.split('\t');
    let (c, r, s) = (parts.next()?, parts.next()?, parts.next()?);
    if parts.next().is_some() {
        return None;
    }
    Some((c.to_string(), r.to_string(), s.parse().ok()?))
}
