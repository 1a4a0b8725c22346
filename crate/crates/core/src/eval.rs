//! Adversarial evaluation: evaluator families, adversarial success, the four
//! reliability scenarios and machine-vs-random accuracy. Evaluators own their
//! parameters under the `eval.` name prefix.

use crate::autodiff::{Graph, ParamId, ParamSet, Var};
use crate::corpus::{successor, Dialogue, Token, Vocab};
use crate::decoding::{decode, Auxiliary, DecodeConfig};
use crate::error::{Error, Result};
use crate::models::{
    with_eos, Builder, Discriminator, Generator, GruLayer, Init, ModelDims, HUMAN, MACHINE,
};
use crate::optim::Adam;
use crate::rng::{derive_seed, seeded};
use crate::train::{classifier_step, Labelled};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const EVAL_PREFIX: &str = "eval.";

/// Fails if any of `names` lies in the evaluator name space. Models under
/// evaluation are checked with this before evaluators are trained, so an
/// evaluator can never share or inherit parameters from them.
pub fn check_outside_eval<'a>(names: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let shared: Vec<&str> = names
        .into_iter()
        .filter(|n| n.starts_with(EVAL_PREFIX))
        .collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::SharedParameters(shared.join(", ")))
    }
}

/// A context with a (possibly empty) response.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Episode {
    pub context: Vec<Vec<Token>>,
    pub response: Vec<Token>,
}

impl From<&Dialogue> for Episode {
    fn from(d: &Dialogue) -> Self {
        Self {
            context: d.context.clone(),
            response: d.response.clone(),
        }
    }
}

impl Episode {
    pub fn new(context: Vec<Vec<Token>>, response: Vec<Token>) -> Self {
        Self { context, response }
    }

    /// Response as seen by classifiers (EOS appended, so never empty).
    pub fn terminated(&self) -> Vec<Token> {
        with_eos(&self.response)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EvaluatorKind {
    UnigramLinear,
    ConcatNeural,
    HierNeural,
    CombinedLinear,
}

impl FromStr for EvaluatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "unigram_linear" | "unigram" => Ok(Self::UnigramLinear),
            "concat_neural" | "concat" => Ok(Self::ConcatNeural),
            "hier_neural" | "hier" => Ok(Self::HierNeural),
            "combined_linear" | "combined" => Ok(Self::CombinedLinear),
            _ => Err(Error::Config(format!("unknown evaluator kind {s:?}"))),
        }
    }
}

impl fmt::Display for EvaluatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::UnigramLinear => "unigram_linear",
            Self::ConcatNeural => "concat_neural",
            Self::HierNeural => "hier_neural",
            Self::CombinedLinear => "combined_linear",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureFlags {
    pub unigram: bool,
    pub neural: bool,
    pub forward: bool,
    pub backward: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluatorSpec {
    pub kind: EvaluatorKind,
    pub features: FeatureFlags,
}

impl EvaluatorSpec {
    pub fn new(kind: EvaluatorKind) -> Self {
        let all = kind == EvaluatorKind::CombinedLinear;
        let features = FeatureFlags {
            unigram: all || kind == EvaluatorKind::UnigramLinear,
            neural: all
                || matches!(
                    kind,
                    EvaluatorKind::ConcatNeural | EvaluatorKind::HierNeural
                ),
            forward: all,
            backward: all,
        };
        Self { kind, features }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.features;
        if self.kind == EvaluatorKind::CombinedLinear
            && !(f.unigram && f.neural && f.forward && f.backward)
        {
            return Err(Error::Config(
                "the combined evaluator needs all four feature groups".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTrainConfig {
    pub dims: ModelDims,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hinge_epochs: usize,
    pub hinge_lr: f64,
    pub l2: f64,
    /// Uniform init range of the neural evaluators. At the generator's 0.08
    /// the two stacked recurrent layers sit on a chance-level plateau for
    /// many epochs, sometimes for the whole run.
    pub init_range: f64,
    /// Fraction of each scenario held out for measurement.
    pub test_fraction: f64,
}

impl EvalTrainConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            dims: ModelDims::new(vocab_size),
            epochs: 30,
            batch_size: 16,
            lr: 2e-3,
            hinge_epochs: 20,
            hinge_lr: 0.05,
            l2: 1e-4,
            init_range: 0.3,
            test_fraction: 0.3,
        }
    }
}

/// Binary human-vs-machine decision rule.
pub trait Classifier {
    fn is_human(&self, episode: &Episode) -> Result<bool>;
}

/// Always answers "human".
#[derive(Clone, Copy, Debug, Default)]
pub struct ConstantHuman;

impl Classifier for ConstantHuman {
    fn is_human(&self, _: &Episode) -> Result<bool> {
        Ok(true)
    }
}

impl Classifier for Discriminator {
    fn is_human(&self, e: &Episode) -> Result<bool> {
        Ok(self.score(&e.context, &e.terminated())? > 0.5)
    }
}

/// Word-level encoder per fixed slot (first context, last context, response),
/// concatenated and fed to a linear softmax layer.
#[derive(Clone, Debug)]
pub struct ConcatClassifier {
    pub params: ParamSet,
    dims: ModelDims,
    emb: ParamId,
    word: GruLayer,
    out_w: ParamId,
    out_b: ParamId,
}

impl ConcatClassifier {
    pub fn new(dims: ModelDims, init: Init) -> Self {
        let mut params = ParamSet::new();
        let mut b = Builder::new(&mut params, "eval.concat.", init);
        let emb = b.tensor("emb", vec![dims.vocab, dims.embed]);
        let word = b.gru("word", dims.embed, dims.hidden);
        let out_w = b.tensor("out.w", vec![2, 3 * dims.hidden]);
        let out_b = b.tensor("out.b", vec![2]);
        Self {
            params,
            dims,
            emb,
            word,
            out_w,
            out_b,
        }
    }

    fn slots(e: &Labelled) -> [&[Token]; 3] {
        let ctx = &e.0;
        let last = ctx.last().map_or(&[][..], |u| u.as_slice());
        let first = if ctx.len() >= 2 {
            ctx[ctx.len() - 2].as_slice()
        } else {
            &[][..]
        };
        [first, last, e.1.as_slice()]
    }

    fn log_probs(&self, g: &mut Graph<'_>, e: &Labelled) -> Result<Var> {
        let emb = g.param(self.emb);
        let mut parts = Vec::with_capacity(3);
        for slot in Self::slots(e) {
            let mut h = g.zeros(self.dims.hidden);
            for &t in slot {
                let x = g.row(emb, t)?;
                h = self.word.step(g, x, h)?;
            }
            parts.push(h);
        }
        let joined = g.concat(&parts)?;
        let (w, b) = (g.param(self.out_w), g.param(self.out_b));
        let logits = g.matvec(w, joined)?;
        let logits = g.add(logits, b)?;
        g.log_softmax(logits)
    }

    fn step(&mut self, opt: &mut Adam, batch: &[Labelled]) -> Result<f64> {
        let (grads, loss) = {
            let mut g = Graph::new(&self.params);
            let mut losses = Vec::with_capacity(batch.len());
            for e in batch {
                let lp = self.log_probs(&mut g, e)?;
                let picked = g.pick(lp, e.2)?;
                losses.push(g.scale(picked, -1.0 / batch.len() as f64));
            }
            let cat = g.concat(&losses)?;
            let loss = g.sum(cat);
            (g.backward(loss)?, g.scalar_value(loss))
        };
        opt.step(&mut self.params, &grads);
        Ok(loss)
    }

    pub fn human_probability(&self, e: &Episode) -> Result<f64> {
        let mut g = Graph::inference(&self.params);
        let lp = self.log_probs(&mut g, &(e.context.clone(), e.terminated(), HUMAN))?;
        Ok(g.value(lp)[HUMAN].exp())
    }
}

impl Classifier for ConcatClassifier {
    fn is_human(&self, e: &Episode) -> Result<bool> {
        Ok(self.human_probability(e)? > 0.5)
    }
}

/// Independently trained forward (context to response) and backward
/// (response to context) generators supplying likelihood features.
#[derive(Clone, Debug)]
pub struct LikelihoodModels {
    pub forward: Generator,
    pub backward: Generator,
}

/// Dense features for linear evaluators.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    flags: FeatureFlags,
    vocab_size: usize,
    neural: Option<Discriminator>,
    likelihood: Option<LikelihoodModels>,
}

impl FeatureExtractor {
    pub fn features(&self, e: &Episode) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        let y = e.terminated();
        if self.flags.unigram {
            let mut bag = vec![0.0; self.vocab_size];
            for &t in e.context.iter().flatten().chain(&e.response) {
                if t < self.vocab_size {
                    bag[t] += 1.0;
                }
            }
            out.extend(bag);
        }
        if self.flags.neural {
            let disc = self
                .neural
                .as_ref()
                .ok_or_else(|| Error::Config("missing neural encoder".into()))?;
            out.extend(disc.representation(&e.context, &y)?);
        }
        let flat: Vec<Token> = e.context.concat();
        if self.flags.forward || self.flags.backward {
            let lm = self.likelihood.as_ref().ok_or_else(|| {
                Error::Config("likelihood features need forward and backward generators".into())
            })?;
            if self.flags.forward {
                let lp: f64 = lm.forward.log_prob(&flat, &y)?.iter().sum();
                out.push(lp / y.len() as f64);
            }
            if self.flags.backward {
                let target = with_eos(&flat);
                let lp: f64 = lm.backward.log_prob(&e.response, &target)?.iter().sum();
                out.push(lp / target.len() as f64);
            }
        }
        Ok(out)
    }
}

/// Hinge-loss linear classifier on standardized features.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    extractor: FeatureExtractor,
    mean: Vec<f64>,
    scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearClassifier {
    fn standardize(&self, mut x: Vec<f64>) -> Vec<f64> {
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.scale) {
            *v = (*v - m) / s;
        }
        x
    }

    pub fn margin(&self, e: &Episode) -> Result<f64> {
        let x = self.standardize(self.extractor.features(e)?);
        Ok(self.weights.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + self.bias)
    }

    fn fit(
        extractor: FeatureExtractor,
        data: &[(Episode, f64)],
        config: &EvalTrainConfig,
        seed: u64,
    ) -> Result<Self> {
        let raw: Vec<Vec<f64>> = data
            .iter()
            .map(|(e, _)| extractor.features(e))
            .collect::<Result<_>>()?;
        let dim = raw.first().map_or(0, Vec::len);
        let n = raw.len() as f64;
        let mean: Vec<f64> = (0..dim)
            .map(|j| raw.iter().map(|x| x[j]).sum::<f64>() / n)
            .collect();
        let scale: Vec<f64> = (0..dim)
            .map(|j| {
                let var = raw.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut clf = Self {
            extractor,
            mean,
            scale,
            weights: vec![0.0; dim],
            bias: 0.0,
        };
        let xs: Vec<Vec<f64>> = raw.into_iter().map(|x| clf.standardize(x)).collect();
        let mut order: Vec<usize> = (0..xs.len()).collect();
        let mut rng = seeded(seed);
        for epoch in 0..config.hinge_epochs {
            order.shuffle(&mut rng);
            let lr = config.hinge_lr / (1.0 + epoch as f64);
            for &i in &order {
                let y = data[i].1;
                let m = y
                    * (clf
                        .weights
                        .iter()
                        .zip(&xs[i])
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
                        + clf.bias);
                for (w, v) in clf.weights.iter_mut().zip(&xs[i]) {
                    *w -= lr * config.l2 * *w;
                    if m < 1.0 {
                        *w += lr * y * v;
                    }
                }
                if m < 1.0 {
                    clf.bias += lr * y;
                }
            }
        }
        Ok(clf)
    }
}

impl Classifier for LinearClassifier {
    fn is_human(&self, e: &Episode) -> Result<bool> {
        Ok(self.margin(e)? > 0.0)
    }
}

fn labelled(positives: &[Episode], negatives: &[Episode]) -> Vec<Labelled> {
    positives
        .iter()
        .map(|e| (e.context.clone(), e.terminated(), HUMAN))
        .chain(
            negatives
                .iter()
                .map(|e| (e.context.clone(), e.terminated(), MACHINE)),
        )
        .collect()
}

fn train_hier(
    positives: &[Episode],
    negatives: &[Episode],
    config: &EvalTrainConfig,
    seed: u64,
) -> Result<Discriminator> {
    let init = Init::Uniform {
        range: config.init_range,
        seed,
    };
    let mut disc = Discriminator::new(config.dims, "eval.hier.", init);
    let mut opt = Adam::new(&disc.params, config.lr);
    let mut data = labelled(positives, negatives);
    let mut rng = seeded(derive_seed(seed, &[1]));
    for _ in 0..config.epochs {
        data.shuffle(&mut rng);
        for chunk in data.chunks(config.batch_size.max(1)) {
            classifier_step(&mut disc, &mut opt, chunk)?;
        }
    }
    Ok(disc)
}

fn train_concat(
    positives: &[Episode],
    negatives: &[Episode],
    config: &EvalTrainConfig,
    seed: u64,
) -> Result<ConcatClassifier> {
    let init = Init::Uniform {
        range: config.init_range,
        seed,
    };
    let mut clf = ConcatClassifier::new(config.dims, init);
    let mut opt = Adam::new(&clf.params, config.lr);
    let mut data = labelled(positives, negatives);
    let mut rng = seeded(derive_seed(seed, &[1]));
    for _ in 0..config.epochs {
        data.shuffle(&mut rng);
        for chunk in data.chunks(config.batch_size.max(1)) {
            clf.step(&mut opt, chunk)?;
        }
    }
    Ok(clf)
}

/// Trains an evaluator of the requested kind; positives are human-labelled.
pub fn train_evaluator(
    spec: &EvaluatorSpec,
    positives: &[Episode],
    negatives: &[Episode],
    seed: u64,
    config: &EvalTrainConfig,
    likelihood: Option<&LikelihoodModels>,
) -> Result<Box<dyn Classifier>> {
    spec.validate()?;
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::DegenerateTrainingSet(format!(
            "{} positives and {} negatives",
            positives.len(),
            negatives.len()
        )));
    }
    Ok(match spec.kind {
        EvaluatorKind::HierNeural => Box::new(train_hier(positives, negatives, config, seed)?),
        EvaluatorKind::ConcatNeural => Box::new(train_concat(positives, negatives, config, seed)?),
        EvaluatorKind::UnigramLinear | EvaluatorKind::CombinedLinear => {
            let neural = if spec.features.neural {
                Some(train_hier(
                    positives,
                    negatives,
                    config,
                    derive_seed(seed, &[2]),
                )?)
            } else {
                None
            };
            let extractor = FeatureExtractor {
                flags: spec.features,
                vocab_size: config.dims.vocab,
                neural,
                likelihood: likelihood.cloned(),
            };
            let data: Vec<(Episode, f64)> = positives
                .iter()
                .map(|e| (e.clone(), 1.0))
                .chain(negatives.iter().map(|e| (e.clone(), -1.0)))
                .collect();
            Box::new(LinearClassifier::fit(
                extractor,
                &data,
                config,
                derive_seed(seed, &[3]),
            )?)
        }
    })
}

/// Produces a freshly trained evaluator for each call.
pub trait EvaluatorFactory {
    fn train(
        &self,
        positives: &[Episode],
        negatives: &[Episode],
        seed: u64,
    ) -> Result<Box<dyn Classifier>>;
}

pub struct StandardFactory<'a> {
    pub spec: EvaluatorSpec,
    pub config: EvalTrainConfig,
    pub likelihood: Option<&'a LikelihoodModels>,
}

impl EvaluatorFactory for StandardFactory<'_> {
    fn train(
        &self,
        positives: &[Episode],
        negatives: &[Episode],
        seed: u64,
    ) -> Result<Box<dyn Classifier>> {
        train_evaluator(
            &self.spec,
            positives,
            negatives,
            seed,
            &self.config,
            self.likelihood,
        )
    }
}

/// Factory whose evaluators always answer "human".
pub struct ConstantFactory;

impl EvaluatorFactory for ConstantFactory {
    fn train(&self, _: &[Episode], _: &[Episode], _: u64) -> Result<Box<dyn Classifier>> {
        Ok(Box::new(ConstantHuman))
    }
}

/// Mean of the per-class accuracies.
pub fn balanced_accuracy(
    clf: &dyn Classifier,
    positives: &[Episode],
    negatives: &[Episode],
) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::DegenerateTrainingSet("empty test class".into()));
    }
    let mut pos = 0usize;
    for e in positives {
        pos += clf.is_human(e)? as usize;
    }
    let mut neg = 0usize;
    for e in negatives {
        neg += !clf.is_human(e)? as usize;
    }
    Ok(0.5 * (pos as f64 / positives.len() as f64 + neg as f64 / negatives.len() as f64))
}

pub fn adver_suc_from_accuracy(accuracy: f64) -> f64 {
    1.0 - accuracy
}

/// Fraction of test instances on which the evaluator is fooled.
pub fn adver_suc(
    clf: &dyn Classifier,
    positives: &[Episode],
    negatives: &[Episode],
) -> Result<f64> {
    Ok(adver_suc_from_accuracy(balanced_accuracy(
        clf, positives, negatives,
    )?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScenarioKind {
    HumanVsHuman,
    MachineVsMachine,
    HumanVsRandom,
    HumanVsNext,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::HumanVsHuman,
        ScenarioKind::MachineVsMachine,
        ScenarioKind::HumanVsRandom,
        ScenarioKind::HumanVsNext,
    ];

    /// AdverSuc of a perfect evaluator.
    pub fn gold(self) -> f64 {
        match self {
            ScenarioKind::HumanVsHuman | ScenarioKind::MachineVsMachine => 0.5,
            ScenarioKind::HumanVsRandom | ScenarioKind::HumanVsNext => 0.0,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ScenarioKind::HumanVsHuman => "human-vs-human",
            ScenarioKind::MachineVsMachine => "machine-vs-machine",
            ScenarioKind::HumanVsRandom => "human-vs-random",
            ScenarioKind::HumanVsNext => "human-vs-next",
        }
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.tag() == norm)
            .ok_or_else(|| Error::Config(format!("unknown scenario {s:?}")))
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Splits `items` into two disjoint halves after a seeded shuffle.
fn halves<T: Clone>(items: &[T], seed: u64) -> (Vec<T>, Vec<T>) {
    let mut v = items.to_vec();
    v.shuffle(&mut seeded(seed));
    let b = v.split_off(v.len().div_ceil(2));
    (v, b)
}

/// A human response drawn uniformly from other dialogues, differing from `true_response`.
fn random_response<R: Rng>(
    dialogues: &[Dialogue],
    true_response: &[Token],
    rng: &mut R,
) -> Option<Vec<Token>> {
    if dialogues.iter().all(|d| d.response == true_response) {
        return None;
    }
    loop {
        let cand = &dialogues[rng.gen_range(0..dialogues.len())].response;
        if cand != true_response {
            return Some(cand.clone());
        }
    }
}

/// Positive (human-labelled) and negative episodes for a scenario. For the
/// random and next-utterance scenarios every context appears once in each
/// class, so `positives[i]` and `negatives[i]` share a context.
pub fn build_scenario(
    kind: ScenarioKind,
    dialogues: &[Dialogue],
    machine: Option<&[Episode]>,
    seed: u64,
) -> Result<(Vec<Episode>, Vec<Episode>)> {
    if dialogues.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    match kind {
        ScenarioKind::HumanVsHuman => {
            let eps: Vec<Episode> = dialogues.iter().map(Episode::from).collect();
            Ok(halves(&eps, seed))
        }
        ScenarioKind::MachineVsMachine => match machine {
            Some(m) if !m.is_empty() => Ok(halves(m, seed)),
            _ => Err(Error::Config(
                "machine-vs-machine needs machine outputs".into(),
            )),
        },
        ScenarioKind::HumanVsRandom => {
            let mut rng = seeded(seed);
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for d in dialogues {
                if let Some(r) = random_response(dialogues, &d.response, &mut rng) {
                    pos.push(Episode::from(d));
                    neg.push(Episode::new(d.context.clone(), r));
                }
            }
            if neg.is_empty() {
                return Err(Error::DegenerateTrainingSet(
                    "all responses are identical".into(),
                ));
            }
            Ok((pos, neg))
        }
        ScenarioKind::HumanVsNext => {
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            for (i, d) in dialogues.iter().enumerate() {
                if let Some(next) = successor(dialogues, i) {
                    pos.push(Episode::from(d));
                    neg.push(Episode::new(d.context.clone(), next.to_vec()));
                }
            }
            if pos.is_empty() {
                return Err(Error::NoSuccessorAvailable);
            }
            Ok((pos, neg))
        }
    }
}

/// Train/test split by index, keeping `positives[i]` and `negatives[i]` together.
#[allow(clippy::type_complexity)]
pub fn split_scenario(
    positives: &[Episode],
    negatives: &[Episode],
    test_fraction: f64,
    seed: u64,
) -> ((Vec<Episode>, Vec<Episode>), (Vec<Episode>, Vec<Episode>)) {
    let split = |items: &[Episode], tag: u64| {
        let mut idx: Vec<usize> = (0..items.len()).collect();
        idx.shuffle(&mut seeded(derive_seed(seed, &[tag])));
        let n_test = ((items.len() as f64 * test_fraction).round() as usize)
            .clamp(1, items.len().saturating_sub(1).max(1));
        let test: Vec<Episode> = idx[..n_test].iter().map(|&i| items[i].clone()).collect();
        let train: Vec<Episode> = idx[n_test..].iter().map(|&i| items[i].clone()).collect();
        (train, test)
    };
    // Same tag for both classes: paired scenarios stay paired.
    let (ptr, pte) = split(positives, 0);
    let (ntr, nte) = split(negatives, 0);
    ((ptr, ntr), (pte, nte))
}

/// Trains a fresh evaluator on a split and returns its held-out AdverSuc.
pub fn measure_adver_suc(
    factory: &dyn EvaluatorFactory,
    positives: &[Episode],
    negatives: &[Episode],
    test_fraction: f64,
    seed: u64,
) -> Result<f64> {
    let ((ptr, ntr), (pte, nte)) = split_scenario(positives, negatives, test_fraction, seed);
    let clf = factory.train(&ptr, &ntr, derive_seed(seed, &[1]))?;
    adver_suc(clf.as_ref(), &pte, &nte)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: ScenarioKind,
    pub adver_suc: f64,
    pub gold: f64,
    pub deviation: f64,
}

impl ScenarioResult {
    pub fn new(scenario: ScenarioKind, adver_suc: f64) -> Self {
        let gold = scenario.gold();
        Self {
            scenario,
            adver_suc,
            gold,
            deviation: (adver_suc - gold).abs(),
        }
    }
}

/// Unweighted mean of absolute deviations from gold.
pub fn ere_from_results(results: &[ScenarioResult]) -> f64 {
    results.iter().map(|r| r.deviation).sum::<f64>() / results.len() as f64
}

/// Runs the listed scenarios with a fresh evaluator each.
pub fn run_scenarios(
    factory: &dyn EvaluatorFactory,
    kinds: &[ScenarioKind],
    dialogues: &[Dialogue],
    machine: Option<&[Episode]>,
    test_fraction: f64,
    seed: u64,
) -> Result<Vec<ScenarioResult>> {
    kinds
        .iter()
        .map(|&kind| {
            let s = derive_seed(seed, &[kind as u64]);
            let (pos, neg) = build_scenario(kind, dialogues, machine, s)?;
            Ok(ScenarioResult::new(
                kind,
                measure_adver_suc(factory, &pos, &neg, test_fraction, derive_seed(s, &[1]))?,
            ))
        })
        .collect()
}

/// Evaluator reliability error over all four scenarios.
pub fn ere(
    factory: &dyn EvaluatorFactory,
    dialogues: &[Dialogue],
    machine: &[Episode],
    test_fraction: f64,
    seed: u64,
) -> Result<(f64, Vec<ScenarioResult>)> {
    let results = run_scenarios(
        factory,
        &ScenarioKind::ALL,
        dialogues,
        Some(machine),
        test_fraction,
        seed,
    )?;
    Ok((ere_from_results(&results), results))
}

/// Held-out accuracy separating machine outputs from random human responses
/// paired with the same contexts.
pub fn machine_vs_random(
    factory: &dyn EvaluatorFactory,
    machine: &[Episode],
    dialogues: &[Dialogue],
    test_fraction: f64,
    seed: u64,
) -> Result<f64> {
    if machine.is_empty() {
        return Err(Error::DegenerateTrainingSet("no machine outputs".into()));
    }
    let mut rng = seeded(seed);
    let random: Vec<Episode> = machine
        .iter()
        .map(|m| {
            let r = random_response(dialogues, &m.response, &mut rng)
                .unwrap_or_else(|| m.response.clone());
            Episode::new(m.context.clone(), r)
        })
        .collect();
    let ((ptr, ntr), (pte, nte)) =
        split_scenario(&random, machine, test_fraction, derive_seed(seed, &[1]));
    let clf = factory.train(&ptr, &ntr, derive_seed(seed, &[2]))?;
    balanced_accuracy(clf.as_ref(), &pte, &nte)
}

/// Held-out AdverSuc of machine responses against the human responses for the same contexts.
pub fn generator_adver_suc(
    factory: &dyn EvaluatorFactory,
    human: &[Dialogue],
    machine: &[Episode],
    test_fraction: f64,
    seed: u64,
) -> Result<f64> {
    let pos: Vec<Episode> = human.iter().map(Episode::from).collect();
    measure_adver_suc(factory, &pos, machine, test_fraction, seed)
}

/// Decodes a response for every dialogue's context.
pub fn machine_outputs(
    gen: &Generator,
    vocab: &Vocab,
    dialogues: &[Dialogue],
    config: &DecodeConfig,
    aux: Auxiliary<'_>,
) -> Result<Vec<Episode>> {
    dialogues
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let cfg = DecodeConfig {
                seed: derive_seed(config.seed, &[i as u64]),
                ..*config
            };
            let y = decode(gen, vocab, &d.flat_context(), &cfg, aux)?;
            Ok(Episode::new(d.context.clone(), y.tokens))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub evaluator: EvaluatorKind,
    pub adver_suc: Option<f64>,
    pub scenarios: Vec<ScenarioResult>,
    /// Present only when all four scenarios were run.
    pub ere: Option<f64>,
    pub machine_vs_random: Option<f64>,
    pub seeds: Vec<u64>,
    pub config_hash: String,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `model,metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut rows = vec!["model,metric,value".to_string()];
        let mut push =
            |metric: String, v: f64| rows.push(format!("{},{},{:.6}", self.model, metric, v));
        if let Some(v) = self.adver_suc {
            push("adver_suc".into(), v);
        }
        if let Some(v) = self.ere {
            push("ere".into(), v);
        }
        if let Some(v) = self.machine_vs_random {
            push("machine_vs_random".into(), v);
        }
        for s in &self.scenarios {
            push(format!("adver_suc.{}", s.scenario), s.adver_suc);
            push(format!("deviation.{}", s.scenario), s.deviation);
        }
        rows.join("\n") + "\n"
    }
}
