//! Maximum-likelihood pretraining, discriminator pretraining, policy-gradient
//! updates (whole-sequence and per-step rewards), critic regression, teacher
//! forcing and the alternating adversarial loop.

use crate::autodiff::{Gradients, Graph, ParamSet};
use crate::corpus::{
    filter_min_length, Dialogue, LearningRateSchedule, TfIdf, Token, Vocab, BOS, EOS,
};
use crate::decoding::{
    continue_sampling, decode, Auxiliary, DecodeConfig, GeneratorStepper, StepModel, Strategy,
};
use crate::error::{Error, Result};
use crate::models::{
    with_eos, Critic, Discriminator, Generator, LanguageModel, HUMAN, MACHINE, MAX_DECODE_LEN,
};
use crate::optim::Adam;
use crate::rng::{derive_seed, seeded};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::str::FromStr;
use std::time::Instant;

pub const DEFAULT_ROLLOUTS: usize = 5;
/// Matches the MLE pretraining rate. The update is a batch mean clipped to
/// norm 5, and at 0.01 the generator barely moves within a few hundred steps.
pub const DEFAULT_RL_LR: f64 = 0.5;
pub const DEFAULT_TF_LR: f64 = 0.25;
pub const DEFAULT_GRAD_CLIP: f64 = 5.0;

fn non_finite(step: usize, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(step))
    }
}

/// Per-token perplexity of the responses (EOS included) under `gen`.
pub fn perplexity(gen: &Generator, dialogues: &[Dialogue]) -> Result<f64> {
    let (mut nll, mut tokens) = (0.0, 0usize);
    for d in dialogues {
        nll += gen.dialogue_nll(d)?;
        tokens += d.response.len() + 1;
    }
    if tokens == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok((nll / tokens as f64).exp())
}

/// One weighted score-function term: `Σ_t weights[t] · ∇ log p(y_t | x, y_<t)`.
#[derive(Clone, Debug)]
pub struct PolicyItem {
    pub context: Vec<Token>,
    pub tokens: Vec<Token>,
    pub weights: Vec<f64>,
}

/// Summed score-function gradient over `items`, divided by `normalizer`.
pub fn policy_gradient(
    gen: &Generator,
    items: &[PolicyItem],
    normalizer: f64,
) -> Result<Gradients> {
    let mut total = Gradients::new();
    for item in items {
        if item.weights.iter().all(|&w| w == 0.0) {
            continue;
        }
        let (g, _) = gen.weighted_score_gradient(&item.context, &item.tokens, &item.weights)?;
        total.add_scaled(&g, 1.0 / normalizer);
    }
    Ok(total)
}

/// Ascent step `θ ← θ + lr · clip(g)`; returns the pre-clip gradient norm.
pub fn ascend(params: &mut ParamSet, mut grads: Gradients, lr: f64, clip: f64) -> f64 {
    let norm = grads.clip_global_norm(clip);
    params.apply(&grads, lr);
    norm
}

/// One maximum-likelihood SGD step. Example `i` is weighted by
/// `multipliers[i]` (all ones when `None`).
pub fn mle_step(
    gen: &mut Generator,
    batch: &[Dialogue],
    lr: f64,
    multipliers: Option<&[f64]>,
    clip: f64,
) -> Result<f64> {
    let items: Vec<PolicyItem> = batch
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let tokens = with_eos(&d.response);
            let m = multipliers.map_or(1.0, |m| m[i]);
            PolicyItem {
                context: d.flat_context(),
                weights: vec![m; tokens.len()],
                tokens,
            }
        })
        .collect();
    let grads = policy_gradient(gen, &items, batch.len() as f64)?;
    Ok(ascend(&mut gen.params, grads, lr, clip))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay applied after `decay_after` epochs.
    pub lr_decay: f64,
    pub decay_after: usize,
    pub grad_clip: f64,
    pub tfidf_cap: f64,
    pub min_response_len: usize,
    pub seed: u64,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            lr: 0.5,
            lr_decay: 0.7,
            decay_after: 6,
            grad_clip: DEFAULT_GRAD_CLIP,
            tfidf_cap: crate::corpus::DEFAULT_TFIDF_CAP,
            min_response_len: crate::corpus::DEFAULT_MIN_RESPONSE_LEN,
            seed: 0,
        }
    }
}

impl MleConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr
            * self
                .lr_decay
                .powi(epoch.saturating_sub(self.decay_after) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Held-out perplexity before training and after each epoch.
    pub perplexities: Vec<f64>,
    pub steps: usize,
    pub examples: usize,
}

/// Maximum-likelihood pretraining with tf-idf-weighted per-example rates,
/// gradient clipping and learning-rate decay.
pub fn pretrain_generator(
    gen: &mut Generator,
    vocab: &Vocab,
    train: &[Dialogue],
    heldout: &[Dialogue],
    config: &MleConfig,
) -> Result<PretrainReport> {
    let data = filter_min_length(train, config.min_response_len);
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let tfidf = TfIdf::fit(data.iter().map(|d| d.response.as_slice()), vocab);
    let scores: Vec<Option<f64>> = data
        .iter()
        .map(|d| tfidf.sentence_score(&d.response, vocab))
        .collect();
    let mut perplexities = vec![perplexity(gen, heldout)?];
    let mut rng = seeded(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = config.lr_at(epoch);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<Dialogue> = chunk.iter().map(|&i| data[i].clone()).collect();
            let batch_scores: Vec<Option<f64>> = chunk.iter().map(|&i| scores[i]).collect();
            let schedule = LearningRateSchedule::from_scores(&batch_scores, lr, config.tfidf_cap)?;
            let norm = mle_step(
                gen,
                &batch,
                lr,
                Some(&schedule.multipliers),
                config.grad_clip,
            )?;
            non_finite(step, norm)?;
            step += 1;
        }
        if !gen.params.all_finite() {
            return Err(Error::Diverged(step));
        }
        let ppl = perplexity(gen, heldout)?;
        non_finite(step, ppl)?;
        perplexities.push(ppl);
    }
    Ok(PretrainReport {
        perplexities,
        steps: step,
        examples: data.len(),
    })
}

/// Response-to-context pairs for training a backward generator.
pub fn reverse_dialogues(dialogues: &[Dialogue]) -> Vec<Dialogue> {
    dialogues
        .iter()
        .map(|d| Dialogue {
            context: vec![d.response.clone()],
            response: d.flat_context(),
        })
        .filter(|d| !d.response.is_empty())
        .collect()
}

/// Maximum-likelihood training of the unconditional language model.
pub fn pretrain_lm(
    lm: &mut LanguageModel,
    sentences: &[Vec<Token>],
    config: &MleConfig,
) -> Result<Vec<f64>> {
    let mut rng = seeded(config.seed);
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    let mut losses = Vec::new();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = config.lr_at(epoch);
        let mut epoch_nll = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut total = Gradients::new();
            for &i in chunk {
                let y = with_eos(&sentences[i]);
                let mut g = Graph::new(&lm.params);
                let nll = lm.nll(&mut g, &y)?;
                epoch_nll += g.scalar_value(nll);
                total.add_scaled(&g.backward(nll)?, -1.0 / chunk.len() as f64);
            }
            ascend(&mut lm.params, total, lr, config.grad_clip);
        }
        non_finite(epoch, epoch_nll)?;
        losses.push(epoch_nll / sentences.len().max(1) as f64);
    }
    Ok(losses)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RewardMode {
    Reinforce,
    RegsMc,
    RegsPartial,
}

impl FromStr for RewardMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "reinforce" => Ok(RewardMode::Reinforce),
            "regs_mc" | "mc" => Ok(RewardMode::RegsMc),
            "regs_partial" | "partial" => Ok(RewardMode::RegsPartial),
            _ => Err(Error::Config(format!("unknown reward mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegsMode {
    Mc,
    Partial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TeacherForcing {
    Off,
    ConstantOne,
    Gated,
}

impl FromStr for TeacherForcing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "off" | "none" => Ok(TeacherForcing::Off),
            "constant_one" | "constant" => Ok(TeacherForcing::ConstantOne),
            "gated" => Ok(TeacherForcing::Gated),
            _ => Err(Error::Config(format!("unknown teacher forcing mode {s:?}"))),
        }
    }
}

/// Realized rewards and baselines for one generated response.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardTrace {
    pub context: Vec<Vec<Token>>,
    /// Generated tokens, ending in EOS unless truncated.
    pub tokens: Vec<Token>,
    pub rewards: Vec<f64>,
    pub baselines: Vec<f64>,
    pub mode: RewardMode,
}

impl RewardTrace {
    pub fn advantages(&self, clip: bool) -> Vec<f64> {
        self.rewards
            .iter()
            .zip(&self.baselines)
            .map(|(r, b)| {
                if clip {
                    (r - b).clamp(-1.0, 1.0)
                } else {
                    r - b
                }
            })
            .collect()
    }

    /// `(prefix, realized reward)` regression targets for the critic.
    pub fn critic_targets(&self) -> Vec<(&[Token], f64)> {
        match self.mode {
            RewardMode::Reinforce => vec![(&self.tokens[..], self.rewards[0])],
            _ => (1..=self.tokens.len())
                .map(|t| (&self.tokens[..t], self.rewards[t - 1]))
                .collect(),
        }
    }
}

/// Per-prefix rewards: prefix `y_{1:t}` is completed `rollouts` times by
/// sampling and scored by the discriminator; the full sequence is scored directly.
#[allow(clippy::too_many_arguments)]
pub fn mc_rollout_rewards(
    gen: &Generator,
    disc: &Discriminator,
    context: &[Vec<Token>],
    y: &[Token],
    rollouts: usize,
    seed: u64,
    max_len: usize,
    temperature: f64,
) -> Result<Vec<f64>> {
    if rollouts == 0 {
        return Err(Error::Config("rollout count must be at least 1".into()));
    }
    let flat: Vec<Token> = context.concat();
    let mut stepper = GeneratorStepper::new(gen, &flat);
    let mut state = stepper.start()?;
    let mut prev = BOS;
    let mut rewards = Vec::with_capacity(y.len());
    for t in 1..=y.len() {
        let prefix = &y[..t];
        if t == y.len() || prefix[t - 1] == EOS {
            rewards.push(disc.score(context, prefix)?);
            continue;
        }
        stepper.step(&mut state, prev)?;
        prev = prefix[t - 1];
        let mut total = 0.0;
        for n in 0..rollouts {
            let mut rng = seeded(derive_seed(seed, &[t as u64, n as u64]));
            let mut st = state;
            let budget = max_len.saturating_sub(t);
            let (tail, _) =
                continue_sampling(&mut stepper, &mut st, prev, budget, temperature, &mut rng)?;
            let mut full = prefix.to_vec();
            full.extend(tail);
            total += disc.score(context, &full)?;
        }
        rewards.push(total / rollouts as f64);
    }
    Ok(rewards)
}

/// One uniformly chosen prefix of each sequence.
pub fn partial_disc_pairs<R: Rng>(
    y_plus: &[Token],
    y_minus: &[Token],
    rng: &mut R,
) -> Result<(Vec<Token>, Vec<Token>)> {
    if y_plus.is_empty() || y_minus.is_empty() {
        return Err(Error::EmptyResponse);
    }
    let tp = rng.gen_range(1..=y_plus.len());
    let tm = rng.gen_range(1..=y_minus.len());
    Ok((y_plus[..tp].to_vec(), y_minus[..tm].to_vec()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub lr: f64,
    pub grad_clip: f64,
    pub clip_advantage: bool,
    pub rollouts: usize,
    pub temperature: f64,
    pub max_len: usize,
    /// Learning rate of teacher-forcing updates.
    pub tf_lr: f64,
    pub disc_lr: f64,
    pub critic_lr: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_RL_LR,
            grad_clip: DEFAULT_GRAD_CLIP,
            clip_advantage: false,
            rollouts: DEFAULT_ROLLOUTS,
            temperature: 1.0,
            max_len: MAX_DECODE_LEN,
            tf_lr: DEFAULT_TF_LR,
            disc_lr: 1e-3,
            critic_lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenStepReport {
    pub traces: Vec<RewardTrace>,
    pub reward_mean: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TeacherForcingReport {
    /// Human examples that received a nonzero update weight.
    pub applied: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub d_steps: usize,
    pub g_steps: usize,
    pub teacher_forcing: TeacherForcing,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            d_steps: 5,
            g_steps: 1,
            teacher_forcing: TeacherForcing::ConstantOne,
            iterations: 100,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.d_steps < 1 || self.g_steps < 1 {
            return Err(Error::Config(
                "d_steps and g_steps must be at least 1".into(),
            ));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub d_loss: f64,
    pub g_reward_mean: f64,
    pub critic_mse: f64,
    pub perplexity: f64,
    pub wall_ms: u64,
    pub seed: u64,
    pub config_hash: String,
    pub d_updates: usize,
    pub g_updates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscPretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beam_width: usize,
    pub mmi_weight: f64,
    pub seed: u64,
}

impl Default for DiscPretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 16,
            lr: 3e-3,
            beam_width: 5,
            mmi_weight: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscPretrainReport {
    pub beam_negatives: usize,
    pub sampled_negatives: usize,
    /// Balanced held-out accuracy against the mixed negatives.
    pub heldout_accuracy: f64,
    /// Balanced held-out accuracy against beam-search outputs only.
    pub heldout_beam_accuracy: f64,
    pub losses: Vec<f64>,
}

/// Labelled classifier example.
pub type Labelled = (Vec<Vec<Token>>, Vec<Token>, usize);

/// Machine responses for each dialogue: the first `⌈n/2⌉` (in a seeded
/// shuffled order) from beam search with backward reranking, the rest sampled.
pub fn discriminator_negatives(
    gen: &Generator,
    backward: &Generator,
    vocab: &Vocab,
    dialogues: &[Dialogue],
    config: &DiscPretrainConfig,
    seed: u64,
) -> Result<(Vec<Labelled>, usize, usize)> {
    let mut order: Vec<usize> = (0..dialogues.len()).collect();
    order.shuffle(&mut seeded(seed));
    let n_beam = dialogues.len().div_ceil(2);
    let aux = Auxiliary {
        backward: Some(backward),
        lm: None,
    };
    let mut out = Vec::with_capacity(dialogues.len());
    for (rank, &i) in order.iter().enumerate() {
        let d = &dialogues[i];
        let cfg = if rank < n_beam {
            DecodeConfig {
                width: config.beam_width,
                mmi_weight: config.mmi_weight,
                ..DecodeConfig::with_strategy(Strategy::MmiBackward)
            }
        } else {
            DecodeConfig {
                seed: derive_seed(seed, &[i as u64]),
                ..DecodeConfig::with_strategy(Strategy::Sample)
            }
        };
        let y = decode(gen, vocab, &d.flat_context(), &cfg, aux)?;
        out.push((d.context.clone(), with_eos(&y.tokens), MACHINE));
    }
    Ok((out, n_beam, dialogues.len() - n_beam))
}

fn humans(dialogues: &[Dialogue]) -> Vec<Labelled> {
    dialogues
        .iter()
        .map(|d| (d.context.clone(), with_eos(&d.response), HUMAN))
        .collect()
}

/// Mean of per-class accuracies with decision threshold `Q+ > 0.5`.
pub fn balanced_accuracy(disc: &Discriminator, examples: &[Labelled]) -> Result<f64> {
    let mut correct = [0usize; 2];
    let mut count = [0usize; 2];
    for (ctx, y, label) in examples {
        let human = disc.score(ctx, y)? > 0.5;
        count[*label] += 1;
        if human == (*label == HUMAN) {
            correct[*label] += 1;
        }
    }
    let rates: Vec<f64> = (0..2)
        .filter(|&c| count[c] > 0)
        .map(|c| correct[c] as f64 / count[c] as f64)
        .collect();
    Ok(rates.iter().sum::<f64>() / rates.len().max(1) as f64)
}

/// One Adam step on mean cross-entropy over `examples`; returns the pre-step loss.
pub fn classifier_step(
    disc: &mut Discriminator,
    opt: &mut Adam,
    examples: &[Labelled],
) -> Result<f64> {
    let (grads, loss) = {
        let mut g = Graph::new(&disc.params);
        let mut losses = Vec::with_capacity(examples.len());
        for (ctx, y, label) in examples {
            losses.push(disc.loss(&mut g, ctx, y, *label)?);
        }
        let cat = g.concat(&losses)?;
        let sum = g.sum(cat);
        let mean = g.scale(sum, 1.0 / examples.len() as f64);
        (g.backward(mean)?, g.scalar_value(mean))
    };
    opt.step(&mut disc.params, &grads);
    Ok(loss)
}

/// Trains a discriminator on human responses versus machine negatives.
pub fn pretrain_discriminator(
    disc: &mut Discriminator,
    gen: &Generator,
    backward: &Generator,
    vocab: &Vocab,
    train: &[Dialogue],
    heldout: &[Dialogue],
    config: &DiscPretrainConfig,
) -> Result<DiscPretrainReport> {
    let (negatives, beam_negatives, sampled_negatives) = discriminator_negatives(
        gen,
        backward,
        vocab,
        train,
        config,
        derive_seed(config.seed, &[1]),
    )?;
    let mut examples = humans(train);
    examples.extend(negatives);
    let mut opt = Adam::new(&disc.params, config.lr);
    let mut rng = seeded(derive_seed(config.seed, &[2]));
    let mut losses = Vec::new();
    for _ in 0..config.epochs {
        examples.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in examples.chunks(config.batch_size.max(1)) {
            total += classifier_step(disc, &mut opt, chunk)? * chunk.len() as f64;
        }
        losses.push(total / examples.len() as f64);
    }
    let (held_neg, _, _) = discriminator_negatives(
        gen,
        backward,
        vocab,
        heldout,
        config,
        derive_seed(config.seed, &[3]),
    )?;
    let mut held = humans(heldout);
    held.extend(held_neg);
    let heldout_accuracy = balanced_accuracy(disc, &held)?;
    let beam_cfg = DecodeConfig {
        width: config.beam_width,
        ..DecodeConfig::with_strategy(Strategy::Beam)
    };
    let mut held_beam = humans(heldout);
    for d in heldout {
        let y = decode(
            gen,
            vocab,
            &d.flat_context(),
            &beam_cfg,
            Auxiliary::default(),
        )?;
        held_beam.push((d.context.clone(), with_eos(&y.tokens), MACHINE));
    }
    Ok(DiscPretrainReport {
        beam_negatives,
        sampled_negatives,
        heldout_accuracy,
        heldout_beam_accuracy: balanced_accuracy(disc, &held_beam)?,
        losses,
    })
}

/// Context, prefix and realized reward.
type CriticTarget<'a> = (&'a [Vec<Token>], &'a [Token], f64);

/// Generator, discriminator and critic with their optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub gen: Generator,
    pub disc: Discriminator,
    pub critic: Critic,
    pub config: RlConfig,
    disc_opt: Adam,
    critic_opt: Adam,
}

impl Trainer {
    pub fn new(gen: Generator, disc: Discriminator, critic: Critic, config: RlConfig) -> Self {
        let disc_opt = Adam::new(&disc.params, config.disc_lr);
        let critic_opt = Adam::new(&critic.params, config.critic_lr);
        Self {
            gen,
            disc,
            critic,
            config,
            disc_opt,
            critic_opt,
        }
    }

    /// Samples a response (EOS kept) for `context`.
    pub fn sample(&self, context: &[Token], seed: u64) -> Result<Vec<Token>> {
        let mut stepper = GeneratorStepper::new(&self.gen, context);
        let mut state = stepper.start()?;
        let mut rng = seeded(seed);
        let (y, _) = continue_sampling(
            &mut stepper,
            &mut state,
            BOS,
            self.config.max_len,
            self.config.temperature,
            &mut rng,
        )?;
        Ok(y)
    }

    /// Applies `Σ_t A_t ∇ log p(y_t | ·)` averaged over traces at the RL rate.
    pub fn apply_traces(&mut self, traces: &[RewardTrace]) -> Result<f64> {
        let items: Vec<PolicyItem> = traces
            .iter()
            .map(|tr| PolicyItem {
                context: tr.context.concat(),
                tokens: tr.tokens.clone(),
                weights: tr.advantages(self.config.clip_advantage),
            })
            .collect();
        let grads = policy_gradient(&self.gen, &items, traces.len().max(1) as f64)?;
        Ok(ascend(
            &mut self.gen.params,
            grads,
            self.config.lr,
            self.config.grad_clip,
        ))
    }

    fn report(&mut self, traces: Vec<RewardTrace>) -> Result<GenStepReport> {
        let grad_norm = self.apply_traces(&traces)?;
        let reward_mean = traces
            .iter()
            .map(|t| *t.rewards.last().unwrap_or(&0.0))
            .sum::<f64>()
            / traces.len().max(1) as f64;
        Ok(GenStepReport {
            traces,
            reward_mean,
            grad_norm,
        })
    }

    /// Whole-sequence reward: `A = Q+({x,y}) − b({x,y})` on every token.
    pub fn reinforce_traces(&self, batch: &[Dialogue], seed: u64) -> Result<Vec<RewardTrace>> {
        let mut traces = Vec::with_capacity(batch.len());
        for (i, d) in batch.iter().enumerate() {
            let y = self.sample(&d.flat_context(), derive_seed(seed, &[i as u64]))?;
            let r = self.disc.score(&d.context, &y)?;
            let b = self.critic.value(&d.context, &y)?;
            traces.push(RewardTrace {
                context: d.context.clone(),
                rewards: vec![r; y.len()],
                baselines: vec![b; y.len()],
                tokens: y,
                mode: RewardMode::Reinforce,
            });
        }
        Ok(traces)
    }

    pub fn reinforce_step(&mut self, batch: &[Dialogue], seed: u64) -> Result<GenStepReport> {
        let traces = self.reinforce_traces(batch, seed)?;
        self.report(traces)
    }

    /// Per-step rewards `Q+(x, Y_t)` from rollouts or from the discriminator on prefixes.
    pub fn regs_traces(
        &self,
        batch: &[Dialogue],
        mode: RegsMode,
        seed: u64,
    ) -> Result<Vec<RewardTrace>> {
        let mut traces = Vec::with_capacity(batch.len());
        for (i, d) in batch.iter().enumerate() {
            let seed_i = derive_seed(seed, &[i as u64]);
            let y = self.sample(&d.flat_context(), seed_i)?;
            let rewards = match mode {
                RegsMode::Mc => mc_rollout_rewards(
                    &self.gen,
                    &self.disc,
                    &d.context,
                    &y,
                    self.config.rollouts,
                    derive_seed(seed_i, &[1]),
                    self.config.max_len,
                    self.config.temperature,
                )?,
                RegsMode::Partial => (1..=y.len())
                    .map(|t| self.disc.score(&d.context, &y[..t]))
                    .collect::<Result<_>>()?,
            };
            let baselines = (1..=y.len())
                .map(|t| self.critic.value(&d.context, &y[..t]))
                .collect::<Result<_>>()?;
            traces.push(RewardTrace {
                context: d.context.clone(),
                tokens: y,
                rewards,
                baselines,
                mode: match mode {
                    RegsMode::Mc => RewardMode::RegsMc,
                    RegsMode::Partial => RewardMode::RegsPartial,
                },
            });
        }
        Ok(traces)
    }

    pub fn regs_step(
        &mut self,
        batch: &[Dialogue],
        mode: RegsMode,
        seed: u64,
    ) -> Result<GenStepReport> {
        let traces = self.regs_traces(batch, mode, seed)?;
        self.report(traces)
    }

    /// Update on human responses: weight 1, or `r − b` when `r > b`.
    pub fn teacher_forcing_step(
        &mut self,
        batch: &[Dialogue],
        mode: TeacherForcing,
    ) -> Result<TeacherForcingReport> {
        let multipliers: Vec<f64> = match mode {
            TeacherForcing::Off => return Ok(TeacherForcingReport { applied: 0 }),
            TeacherForcing::ConstantOne => vec![1.0; batch.len()],
            TeacherForcing::Gated => batch
                .iter()
                .map(|d| {
                    let y = with_eos(&d.response);
                    let r = self.disc.score(&d.context, &y)?;
                    let b = self.critic.value(&d.context, &y)?;
                    Ok(if r > b { r - b } else { 0.0 })
                })
                .collect::<Result<_>>()?,
        };
        let applied = multipliers.iter().filter(|&&m| m != 0.0).count();
        if applied > 0 {
            mle_step(
                &mut self.gen,
                batch,
                self.config.tf_lr,
                Some(&multipliers),
                self.config.grad_clip,
            )?;
        }
        Ok(TeacherForcingReport { applied })
    }

    /// One regression step of the critic toward realized rewards; returns the pre-step MSE.
    pub fn critic_step(&mut self, traces: &[RewardTrace]) -> Result<f64> {
        let targets: Vec<CriticTarget<'_>> = traces
            .iter()
            .flat_map(|tr| {
                tr.critic_targets()
                    .into_iter()
                    .map(move |(p, r)| (tr.context.as_slice(), p, r))
            })
            .collect();
        if targets.is_empty() {
            return Ok(0.0);
        }
        let (grads, mse) = {
            let mut g = Graph::new(&self.critic.params);
            let mut sq = Vec::with_capacity(targets.len());
            for (ctx, prefix, r) in &targets {
                let v = self.critic.value_node(&mut g, ctx, prefix)?;
                let d = g.affine(v, 1.0, -r);
                sq.push(g.square(d));
            }
            let cat = g.concat(&sq)?;
            let sum = g.sum(cat);
            let mean = g.scale(sum, 1.0 / targets.len() as f64);
            (g.backward(mean)?, g.scalar_value(mean))
        };
        self.critic_opt.step(&mut self.critic.params, &grads);
        Ok(mse)
    }

    /// One discriminator update: human responses against fresh samples. With
    /// partial-sequence training, each pair is replaced by random prefixes with
    /// probability 1/2.
    pub fn discriminator_step(
        &mut self,
        batch: &[Dialogue],
        partial: bool,
        seed: u64,
    ) -> Result<f64> {
        let mut rng = seeded(derive_seed(seed, &[u64::MAX]));
        let mut examples = Vec::with_capacity(2 * batch.len());
        for (i, d) in batch.iter().enumerate() {
            let human = with_eos(&d.response);
            let machine = self.sample(&d.flat_context(), derive_seed(seed, &[i as u64]))?;
            let (pos, neg) = if partial && rng.gen_bool(0.5) {
                partial_disc_pairs(&human, &machine, &mut rng)?
            } else {
                (human, machine)
            };
            examples.push((d.context.clone(), pos, HUMAN));
            examples.push((d.context.clone(), neg, MACHINE));
        }
        classifier_step(&mut self.disc, &mut self.disc_opt, &examples)
    }

    fn snapshot(&self) -> (ParamSet, ParamSet, ParamSet) {
        (
            self.gen.params.clone(),
            self.disc.params.clone(),
            self.critic.params.clone(),
        )
    }

    fn restore(&mut self, snap: &(ParamSet, ParamSet, ParamSet)) {
        self.gen.params = snap.0.clone();
        self.disc.params = snap.1.clone();
        self.critic.params = snap.2.clone();
    }

    /// The alternating loop: per iteration, `d_steps` discriminator updates,
    /// then `g_steps` generator updates each followed by a critic update and a
    /// teacher-forcing update. On divergence the last good parameters are
    /// restored and `Diverged(iteration)` is returned.
    pub fn adversarial_train(
        &mut self,
        train: &[Dialogue],
        heldout: &[Dialogue],
        schedule: &TrainSchedule,
        mode: RewardMode,
        config_hash: &str,
        mut on_iteration: impl FnMut(&IterationMetrics, &Trainer) -> Result<()>,
    ) -> Result<Vec<IterationMetrics>> {
        schedule.validate()?;
        if train.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut log = Vec::with_capacity(schedule.iterations);
        let mut last_good = self.snapshot();
        for it in 0..schedule.iterations {
            let start = Instant::now();
            let seed_it = derive_seed(schedule.seed, &[it as u64]);
            let pick = |phase: u64, step: u64| -> Vec<Dialogue> {
                let mut rng = seeded(derive_seed(seed_it, &[phase, step]));
                rand::seq::index::sample(
                    &mut rng,
                    train.len(),
                    schedule.batch_size.min(train.len()),
                )
                .into_iter()
                .map(|i| train[i].clone())
                .collect()
            };
            let mut d_loss = 0.0;
            for s in 0..schedule.d_steps {
                let batch = pick(0, s as u64);
                d_loss += self.discriminator_step(
                    &batch,
                    mode == RewardMode::RegsPartial,
                    derive_seed(seed_it, &[1, s as u64]),
                )?;
            }
            d_loss /= schedule.d_steps as f64;
            let (mut reward, mut critic_mse) = (0.0, 0.0);
            for s in 0..schedule.g_steps {
                let batch = pick(2, s as u64);
                let seed = derive_seed(seed_it, &[3, s as u64]);
                let report = match mode {
                    RewardMode::Reinforce => self.reinforce_step(&batch, seed)?,
                    RewardMode::RegsMc => self.regs_step(&batch, RegsMode::Mc, seed)?,
                    RewardMode::RegsPartial => self.regs_step(&batch, RegsMode::Partial, seed)?,
                };
                reward += report.reward_mean;
                critic_mse += self.critic_step(&report.traces)?;
                self.teacher_forcing_step(&batch, schedule.teacher_forcing)?;
            }
            let ppl = perplexity(&self.gen, heldout)?;
            if !(self.gen.params.all_finite()
                && self.disc.params.all_finite()
                && self.critic.params.all_finite())
                || ppl.is_nan()
                || !d_loss.is_finite()
            {
                self.restore(&last_good);
                return Err(Error::Diverged(it));
            }
            last_good = self.snapshot();
            let metrics = IterationMetrics {
                iteration: it,
                d_loss,
                g_reward_mean: reward / schedule.g_steps as f64,
                critic_mse: critic_mse / schedule.g_steps as f64,
                perplexity: ppl,
                wall_ms: start.elapsed().as_millis() as u64,
                seed: schedule.seed,
                config_hash: config_hash.to_string(),
                d_updates: schedule.d_steps,
                g_updates: schedule.g_steps,
            };
            on_iteration(&metrics, self)?;
            log.push(metrics);
        }
        Ok(log)
    }
}

/// Serializes metrics as JSON lines.
pub fn metrics_to_jsonl(records: &[IterationMetrics]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_metrics_jsonl(text: &str) -> Result<Vec<IterationMetrics>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::ParseError {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Init, ModelDims};

    fn dims(v: usize) -> ModelDims {
        ModelDims {
            vocab: v,
            embed: 4,
            hidden: 6,
        }
    }

    fn dialogues() -> Vec<Dialogue> {
        vec![
            Dialogue::new(vec![vec![4, 5, 6]], vec![7, 8, 4, 5, 6]).unwrap(),
            Dialogue::new(vec![vec![5, 6], vec![7, 8]], vec![8, 7, 6, 5, 4]).unwrap(),
            Dialogue::new(vec![vec![6]], vec![4, 4, 5, 5, 6]).unwrap(),
        ]
    }

    fn trainer(seed: u64) -> Trainer {
        let d = dims(9);
        Trainer::new(
            Generator::new(d, "gen.", Init::Uniform { range: 0.3, seed }),
            Discriminator::new(
                d,
                "disc.",
                Init::Uniform {
                    range: 0.3,
                    seed: seed + 1,
                },
            ),
            Critic::new(
                d,
                "critic.",
                Init::Uniform {
                    range: 0.3,
                    seed: seed + 2,
                },
            ),
            RlConfig {
                max_len: 8,
                ..RlConfig::default()
            },
        )
    }

    fn delta(after: &ParamSet, before: &ParamSet) -> Vec<f64> {
        after
            .iter()
            .zip(before.iter())
            .flat_map(|((_, _, a), (_, _, b))| {
                a.values()
                    .iter()
                    .zip(b.values())
                    .map(|(x, y)| x - y)
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    #[test]
    fn rollout_mean_of_constant_discriminator() {
        let t = trainer(1);
        let constant = Discriminator::new(dims(9), "disc.", Init::Zeros);
        let r = mc_rollout_rewards(&t.gen, &constant, &[vec![4, 5]], &[6, 7, EOS], 5, 3, 8, 1.0)
            .unwrap();
        assert_eq!(r, vec![0.5; 3]);
        assert!(mc_rollout_rewards(&t.gen, &constant, &[vec![4]], &[6], 0, 3, 8, 1.0).is_err());
    }

    #[test]
    fn partial_pairs_contract() {
        let mut rng = seeded(0);
        let (p, m) = partial_disc_pairs(&[4, 5, 6], &[7], &mut rng).unwrap();
        assert!((1..=3).contains(&p.len()) && p[..] == [4, 5, 6][..p.len()]);
        assert_eq!(m, vec![7]);
        assert!(partial_disc_pairs(&[], &[7], &mut rng).is_err());
    }

    #[test]
    fn zero_advantage_leaves_generator_unchanged() {
        let mut t = trainer(2);
        let before = t.gen.params.clone();
        let mut traces = t.reinforce_traces(&dialogues(), 5).unwrap();
        for tr in &mut traces {
            tr.baselines = tr.rewards.clone();
        }
        t.apply_traces(&traces).unwrap();
        assert_eq!(t.gen.params, before);
    }

    #[test]
    fn reinforce_update_is_advantage_times_mle_gradient() {
        let t = trainer(3);
        let traces = t.reinforce_traces(&dialogues()[..1], 9).unwrap();
        let tr = &traces[0];
        let a = tr.rewards[0] - tr.baselines[0];
        let mut rl = t.clone();
        rl.apply_traces(&traces).unwrap();
        let (mle, _) = t
            .gen
            .weighted_score_gradient(
                &tr.context.concat(),
                &tr.tokens,
                &vec![1.0; tr.tokens.len()],
            )
            .unwrap();
        let mut expected = t.gen.params.clone();
        expected.apply(&mle, t.config.lr * a);
        for (x, y) in delta(&rl.gen.params, &t.gen.params)
            .iter()
            .zip(delta(&expected, &t.gen.params))
        {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_step_rewards_reduce_to_whole_sequence_reward() {
        let t = trainer(4);
        let batch = dialogues();
        let whole = t.reinforce_traces(&batch, 11).unwrap();
        let per_step: Vec<RewardTrace> = whole
            .iter()
            .map(|tr| RewardTrace {
                mode: RewardMode::RegsPartial,
                ..tr.clone()
            })
            .collect();
        let (mut a, mut b) = (t.clone(), t.clone());
        a.apply_traces(&whole).unwrap();
        b.apply_traces(&per_step).unwrap();
        for (x, y) in delta(&a.gen.params, &t.gen.params)
            .iter()
            .zip(delta(&b.gen.params, &t.gen.params))
        {
            assert!((x - y).abs() <= 1e-10);
        }

        // Constant discriminator and zero critic make every per-step reward equal.
        let mut c = t.clone();
        c.disc = Discriminator::new(dims(9), "disc.", Init::Zeros);
        c.critic = Critic::new(dims(9), "critic.", Init::Zeros);
        let mut d = c.clone();
        c.reinforce_step(&batch, 21).unwrap();
        d.regs_step(&batch, RegsMode::Partial, 21).unwrap();
        for (x, y) in delta(&c.gen.params, &t.gen.params)
            .iter()
            .zip(delta(&d.gen.params, &t.gen.params))
        {
            assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn constant_one_teacher_forcing_is_an_mle_step() {
        let t = trainer(5);
        let batch = dialogues();
        let mut tf = t.clone();
        tf.teacher_forcing_step(&batch, TeacherForcing::ConstantOne)
            .unwrap();
        let mut mle = t.gen.clone();
        mle_step(&mut mle, &batch, t.config.tf_lr, None, t.config.grad_clip).unwrap();
        assert_eq!(tf.gen.params, mle.params);
    }

    #[test]
    fn gated_teacher_forcing() {
        let base = trainer(6);
        let batch = &dialogues()[..1];
        let y = with_eos(&batch[0].response);
        // Zero discriminator gives r = 0.5; the critic bias sets b.
        let set_critic = |b: f64| {
            let mut c = Critic::new(dims(9), "critic.", Init::Zeros);
            let id = c.params.id("critic.head.b").unwrap();
            c.params.get_mut(id).values_mut()[0] = b;
            c
        };
        let mut t = base.clone();
        t.disc = Discriminator::new(dims(9), "disc.", Init::Zeros);
        t.config.grad_clip = f64::INFINITY;

        let mut closed = t.clone();
        closed.critic = set_critic(0.6);
        let rep = closed
            .teacher_forcing_step(batch, TeacherForcing::Gated)
            .unwrap();
        assert_eq!(rep.applied, 0);
        assert_eq!(closed.gen.params, t.gen.params);

        let mut open = t.clone();
        open.critic = set_critic(0.4);
        assert_eq!(open.disc.score(&batch[0].context, &y).unwrap(), 0.5);
        open.teacher_forcing_step(batch, TeacherForcing::Gated)
            .unwrap();
        let (mle, _) = t
            .gen
            .weighted_score_gradient(&batch[0].flat_context(), &y, &vec![1.0; y.len()])
            .unwrap();
        let mut expected = t.gen.params.clone();
        expected.apply(&mle, t.config.tf_lr * 0.1);
        for (x, e) in delta(&open.gen.params, &t.gen.params)
            .iter()
            .zip(delta(&expected, &t.gen.params))
        {
            assert!((x - e).abs() < 1e-12);
        }
    }

    #[test]
    fn critic_regresses_to_constant_reward() {
        let mut t = trainer(7);
        t.critic_opt = Adam::new(&t.critic.params, 0.01);
        let mut traces = t.reinforce_traces(&dialogues(), 1).unwrap();
        traces.extend(t.regs_traces(&dialogues(), RegsMode::Partial, 2).unwrap());
        for tr in &mut traces {
            tr.rewards.iter_mut().for_each(|r| *r = 0.7);
        }
        let mut mse = f64::INFINITY;
        for _ in 0..500 {
            mse = t.critic_step(&traces).unwrap();
            assert!(mse >= 0.0);
        }
        assert!(mse <= 0.01, "{mse}");
        assert!(
            (t.critic
                .value(&traces[0].context, &traces[0].tokens)
                .unwrap()
                - 0.7)
                .abs()
                < 0.05
        );
    }

    #[test]
    fn critic_at_true_reward_has_no_gradient() {
        let t = trainer(8);
        let mut critic = Critic::new(dims(9), "critic.", Init::Zeros);
        let id = critic.params.id("critic.head.b").unwrap();
        critic.params.get_mut(id).values_mut()[0] = 0.7;
        let mut g = Graph::new(&critic.params);
        let v = critic.value_node(&mut g, &[vec![4]], &[5, 6]).unwrap();
        let d = g.affine(v, 1.0, -0.7);
        let sq = g.square(d);
        assert!(g.backward(sq).unwrap().global_norm() < 1e-8);
        drop(t);
    }

    #[test]
    fn updates_touch_only_their_own_model() {
        let mut t = trainer(9);
        let (g0, d0, c0) = t.snapshot();
        t.discriminator_step(&dialogues(), true, 3).unwrap();
        assert_eq!(t.gen.params, g0);
        assert_eq!(t.critic.params, c0);
        assert_ne!(t.disc.params, d0);
        let d1 = t.disc.params.clone();
        let rep = t.reinforce_step(&dialogues(), 4).unwrap();
        assert_eq!(t.disc.params, d1);
        t.critic_step(&rep.traces).unwrap();
        assert_eq!(t.disc.params, d1);
    }

    #[test]
    fn schedule_defaults_and_update_counts() {
        let s = TrainSchedule::default();
        assert_eq!((s.d_steps, s.g_steps), (5, 1));
        let mut t = trainer(10);
        let data = dialogues();
        let sched = TrainSchedule {
            iterations: 2,
            batch_size: 2,
            ..s
        };
        let log = t
            .adversarial_train(&data, &data, &sched, RewardMode::Reinforce, "h", |_, _| {
                Ok(())
            })
            .unwrap();
        assert_eq!(log.len(), 2);
        assert!(log
            .iter()
            .all(|m| m.d_updates == 5 && m.g_updates == 1 && m.config_hash == "h"));
        let text = metrics_to_jsonl(&log).unwrap();
        assert_eq!(parse_metrics_jsonl(&text).unwrap(), log);
        assert!(TrainSchedule {
            d_steps: 0,
            ..TrainSchedule::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn training_runs_are_reproducible() {
        let data = dialogues();
        let sched = TrainSchedule {
            iterations: 2,
            batch_size: 2,
            ..TrainSchedule::default()
        };
        let run = || {
            let mut t = trainer(11);
            let mut log = t
                .adversarial_train(&data, &data, &sched, RewardMode::RegsMc, "h", |_, _| Ok(()))
                .unwrap();
            log.iter_mut().for_each(|m| m.wall_ms = 0);
            (log, t.gen.params)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mle_pretraining_reduces_perplexity() {
        let vocab = Vocab::from_words(["a", "b", "c", "d", "e"]);
        let mut gen = Generator::new(dims(vocab.len()), "gen.", Init::uniform(0));
        let data = dialogues();
        let report = pretrain_generator(
            &mut gen,
            &vocab,
            &data,
            &data,
            &MleConfig {
                epochs: 30,
                ..MleConfig::default()
            },
        )
        .unwrap();
        assert!(report.perplexities.last().unwrap() < &report.perplexities[0]);
    }
}
