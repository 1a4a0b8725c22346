//! Brute-force and closed-form checks: finite differences, exhaustive policy
//! enumeration, reduction identities, ERE arithmetic and the rollout variance law.

use advdial::autodiff::{
    finite_difference_check, Gradients, Graph, ParamId, ParamSet, Tensor, Var,
};
use advdial::corpus::{Dialogue, Token, Vocab, EOS};
use advdial::decoding::{decode, Auxiliary, DecodeConfig, Strategy};
use advdial::eval::{
    ere_from_results, run_scenarios, ConstantFactory, Episode, ScenarioKind, ScenarioResult,
};
use advdial::models::{Critic, Discriminator, Generator, Init, ModelDims, HUMAN, MACHINE};
use advdial::rng::{derive_seed, seeded};
use advdial::train::{
    mc_rollout_rewards, mle_step, policy_gradient, PolicyItem, RegsMode, RewardMode, RewardTrace,
    RlConfig, TeacherForcing, Trainer,
};
use advdial::Result;
use rand::Rng;

pub const FD_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub struct GradientErrors {
    pub ops: f64,
    pub generator: f64,
    pub discriminator: f64,
    pub critic: f64,
}

impl GradientErrors {
    pub fn worst(&self) -> f64 {
        self.ops
            .max(self.generator)
            .max(self.discriminator)
            .max(self.critic)
    }
}

/// A loss touching every differentiable graph operation.
fn all_ops(g: &mut Graph<'_>, [w, u, x, h]: [ParamId; 4]) -> Result<Var> {
    let (wv, uv, xv, hv) = (g.param(w), g.param(u), g.param(x), g.param(h));
    let gx = g.matvec(wv, xv)?;
    let gh = g.matvec(uv, hv)?;
    let h1 = g.gru(gx, gh, hv)?;
    let proj = g.mat_t_vec(wv, gx)?;
    let sig = g.sigmoid(proj);
    let th = g.tanh(sig);
    let ex = g.exp(th);
    let prod = g.mul(ex, xv)?;
    let diff = g.sub(prod, sig)?;
    let sm = g.softmax(diff)?;
    let ls = g.log_softmax(diff)?;
    let lg = g.log(sm);
    let both = g.add(lg, ls)?;
    let sq = g.square(both);
    let sc = g.affine(sq, 0.1, 0.3);
    let row = g.row(uv, 3)?;
    let cat = g.concat(&[h1, row])?;
    let sl = g.slice(cat, 1, 3)?;
    let st = g.stack(&[h1, row])?;
    let r0 = g.softmax(h1)?;
    let r1 = g.softmax(row)?;
    let probs = g.stack(&[r0, r1])?;
    let nll = g.sequence_nll(probs, &[1, 0])?;
    let dot = g.dot(sl, sl)?;
    let stp = g.pick(st, 2)?;
    let s0 = g.sum(sc);
    let parts = g.concat(&[s0, dot, stp, nll])?;
    Ok(g.sum(parts))
}

fn random_utterance<R: Rng>(rng: &mut R, vocab: usize, max_len: usize) -> Vec<Token> {
    (0..rng.gen_range(1..=max_len))
        .map(|_| rng.gen_range(4..vocab))
        .collect()
}

/// Central-difference errors for the raw operations and for the generator,
/// discriminator and critic losses at one random draw.
pub fn gradient_errors(seed: u64) -> Result<GradientErrors> {
    let mut rng = seeded(seed);
    let mut p = ParamSet::new();
    let ids = [
        p.add("w", Tensor::uniform(vec![6, 4], 0.8, &mut rng)),
        p.add("u", Tensor::uniform(vec![6, 2], 0.8, &mut rng)),
        p.add("x", Tensor::uniform(vec![4], 1.0, &mut rng)),
        p.add("h", Tensor::uniform(vec![2], 1.0, &mut rng)),
    ];
    let ops = finite_difference_check(&p, FD_EPS, |g| all_ops(g, ids))?;

    let dims = ModelDims {
        vocab: 7,
        embed: 3,
        hidden: 4,
    };
    let init = Init::Uniform { range: 0.5, seed };
    let context = vec![
        random_utterance(&mut rng, 7, 4),
        random_utterance(&mut rng, 7, 4),
    ];
    let flat = context.concat();
    let mut y = random_utterance(&mut rng, 7, 3);
    y.push(EOS);
    let label = if rng.gen_bool(0.5) { HUMAN } else { MACHINE };
    let target: f64 = rng.gen_range(0.0..1.0);

    let gen = Generator::new(dims, "gen.", init);
    let generator = finite_difference_check(&gen.params, FD_EPS, |g| gen.nll(g, &flat, &y))?;
    let disc = Discriminator::new(dims, "disc.", init);
    let discriminator =
        finite_difference_check(&disc.params, FD_EPS, |g| disc.loss(g, &context, &y, label))?;
    let critic = Critic::new(dims, "critic.", init);
    let critic = finite_difference_check(&critic.params, FD_EPS, |g| {
        let v = critic.value_node(g, &context, &y[..y.len() - 1])?;
        let d = g.affine(v, 1.0, -target);
        Ok(g.square(d))
    })?;
    Ok(GradientErrors {
        ops,
        generator,
        discriminator,
        critic,
    })
}

/// Smallest generator vocabulary: the encoder appends EOS (id 2) to every
/// context, so ids 0..=2 must exist. Every step is a 3-way softmax.
pub const TOY_VOCAB: usize = 3;
pub const TOY_HORIZON: usize = 3;

fn all_sequences() -> Vec<Vec<Token>> {
    let mut seqs = vec![vec![]];
    for _ in 0..TOY_HORIZON {
        seqs = seqs
            .into_iter()
            .flat_map(|s: Vec<Token>| {
                (0..TOY_VOCAB).map(move |t| {
                    let mut n = s.clone();
                    n.push(t);
                    n
                })
            })
            .collect();
    }
    seqs
}

fn flatten(params: &ParamSet, grads: &Gradients) -> Vec<f64> {
    params
        .iter()
        .flat_map(|(id, _, t)| {
            grads
                .get(id)
                .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
        })
        .collect()
}

fn expected_reward(
    gen: &Generator,
    context: &[Token],
    seqs: &[Vec<Token>],
    rewards: &[f64],
) -> Result<f64> {
    let mut total = 0.0;
    for (y, r) in seqs.iter().zip(rewards) {
        total += gen.log_prob(context, y)?.iter().sum::<f64>().exp() * r;
    }
    Ok(total)
}

/// Gradient of the expected reward by central differences, coordinate by coordinate.
fn exact_gradient(
    gen: &Generator,
    context: &[Token],
    seqs: &[Vec<Token>],
    rewards: &[f64],
) -> Result<Vec<f64>> {
    const EPS: f64 = 1e-5;
    let mut probe = gen.clone();
    let coords: Vec<(ParamId, usize)> = gen
        .params
        .iter()
        .flat_map(|(id, _, t)| (0..t.len()).map(move |k| (id, k)))
        .collect();
    let mut out = Vec::with_capacity(coords.len());
    for (id, k) in coords {
        let orig = probe.params.get(id).values()[k];
        probe.params.get_mut(id).values_mut()[k] = orig + EPS;
        let plus = expected_reward(&probe, context, seqs, rewards)?;
        probe.params.get_mut(id).values_mut()[k] = orig - EPS;
        let minus = expected_reward(&probe, context, seqs, rewards)?;
        probe.params.get_mut(id).values_mut()[k] = orig;
        out.push((plus - minus) / (2.0 * EPS));
    }
    Ok(out)
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm
}

#[derive(Clone, Copy, Debug)]
pub struct PolicyOracle {
    pub reinforce: f64,
    pub regs: f64,
}

/// Probability-weighted sum, over every sequence of the toy policy, of the
/// per-sample update the trainer would apply, compared with the exact
/// gradient of expected reward. REINFORCE uses a constant baseline; REGS
/// uses the exact expected reward of each prefix with per-step baselines
/// that do not depend on the token being scored.
pub fn policy_gradient_errors(seed: u64) -> Result<PolicyOracle> {
    let dims = ModelDims {
        vocab: TOY_VOCAB,
        embed: 2,
        hidden: 3,
    };
    let gen = Generator::new(dims, "gen.", Init::Uniform { range: 1.0, seed });
    let mut rng = seeded(derive_seed(seed, &[1]));
    let context: Vec<Token> = (0..2).map(|_| rng.gen_range(0..TOY_VOCAB)).collect();
    let seqs = all_sequences();
    let rewards: Vec<f64> = seqs.iter().map(|_| rng.gen_range(0.0..1.0)).collect();
    let exact = exact_gradient(&gen, &context, &seqs, &rewards)?;

    let step_log_probs: Vec<Vec<f64>> = seqs
        .iter()
        .map(|y| gen.log_prob(&context, y))
        .collect::<Result<_>>()?;
    let probs: Vec<f64> = step_log_probs
        .iter()
        .map(|lp| lp.iter().sum::<f64>().exp())
        .collect();
    // E[R | y_1..y_t]: completions weighted by their conditional probability.
    let prefix_value = |y: &[Token], t: usize| -> f64 {
        seqs.iter()
            .zip(&step_log_probs)
            .zip(&rewards)
            .filter(|((s, _), _)| s[..t] == y[..t])
            .map(|((_, lp), r)| lp[t..].iter().sum::<f64>().exp() * r)
            .sum()
    };

    let n = gen.params.num_values();
    let (mut reinforce, mut regs) = (vec![0.0; n], vec![0.0; n]);
    for ((y, &p), &r) in seqs.iter().zip(&probs).zip(&rewards) {
        let whole = RewardTrace {
            context: vec![context.clone()],
            tokens: y.clone(),
            rewards: vec![r; TOY_HORIZON],
            baselines: vec![0.4; TOY_HORIZON],
            mode: RewardMode::Reinforce,
        };
        let per_step = RewardTrace {
            rewards: (1..=TOY_HORIZON).map(|t| prefix_value(y, t)).collect(),
            baselines: (1..=TOY_HORIZON).map(|t| 0.2 + 0.1 * t as f64).collect(),
            mode: RewardMode::RegsMc,
            ..whole.clone()
        };
        for (trace, acc) in [(&whole, &mut reinforce), (&per_step, &mut regs)] {
            let item = PolicyItem {
                context: context.clone(),
                tokens: y.clone(),
                weights: trace.advantages(false),
            };
            let g = flatten(&gen.params, &policy_gradient(&gen, &[item], 1.0)?);
            acc.iter_mut().zip(g).for_each(|(a, v)| *a += p * v);
        }
    }
    Ok(PolicyOracle {
        reinforce: relative_error(&reinforce, &exact),
        regs: relative_error(&regs, &exact),
    })
}

fn toy_dims() -> ModelDims {
    ModelDims {
        vocab: 9,
        embed: 4,
        hidden: 6,
    }
}

fn toy_batch(seed: u64, n: usize) -> Vec<Dialogue> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|_| {
            let context = (0..rng.gen_range(1..=2))
                .map(|_| random_utterance(&mut rng, 9, 4))
                .collect();
            Dialogue::new(context, random_utterance(&mut rng, 9, 6)).expect("non-empty response")
        })
        .collect()
}

/// Trainer whose discriminator and critic are constant (zero weights), so
/// every prefix reward is 0.5 and every baseline 0.
fn constant_reward_trainer(seed: u64) -> Trainer {
    let d = toy_dims();
    Trainer::new(
        Generator::new(d, "gen.", Init::Uniform { range: 0.3, seed }),
        Discriminator::new(d, "disc.", Init::Zeros),
        Critic::new(d, "critic.", Init::Zeros),
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

/// Largest difference between the REINFORCE update and the REGS updates
/// (both reward modes) when per-step rewards and baselines are constant.
pub fn regs_reinforce_gap(seed: u64) -> Result<f64> {
    let t = constant_reward_trainer(seed);
    let batch = toy_batch(derive_seed(seed, &[1]), 4);
    let step_seed = derive_seed(seed, &[2]);
    let mut whole = t.clone();
    whole.reinforce_step(&batch, step_seed)?;
    let base = delta(&whole.gen.params, &t.gen.params);
    let mut worst: f64 = 0.0;
    for mode in [RegsMode::Mc, RegsMode::Partial] {
        let mut regs = t.clone();
        regs.regs_step(&batch, mode, step_seed)?;
        for (a, b) in delta(&regs.gen.params, &t.gen.params).iter().zip(&base) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Whether a CONSTANT_ONE teacher-forcing step leaves bit-identical
/// parameters to a plain MLE step at the same rate.
pub fn constant_one_is_mle(seed: u64) -> Result<bool> {
    let mut t = constant_reward_trainer(seed);
    let batch = toy_batch(derive_seed(seed, &[3]), 4);
    let mut mle = t.gen.clone();
    mle_step(&mut mle, &batch, t.config.tf_lr, None, t.config.grad_clip)?;
    t.teacher_forcing_step(&batch, TeacherForcing::ConstantOne)?;
    Ok(t.gen.params == mle.params)
}

/// Contexts (out of `dialogues`) where width-1 beam search without
/// penalties disagrees with greedy decoding.
pub fn beam_greedy_mismatches(
    gen: &Generator,
    vocab: &Vocab,
    dialogues: &[Dialogue],
) -> Result<usize> {
    let greedy = DecodeConfig::with_strategy(Strategy::Greedy);
    let beam = DecodeConfig {
        width: 1,
        sibling_penalty: 0.0,
        repeat_penalty: 0.0,
        ..DecodeConfig::with_strategy(Strategy::Beam)
    };
    let mut mismatches = 0;
    for d in dialogues {
        let ctx = d.flat_context();
        let a = decode(gen, vocab, &ctx, &greedy, Auxiliary::default())?;
        let b = decode(gen, vocab, &ctx, &beam, Auxiliary::default())?;
        if a.tokens != b.tokens || (a.score - b.score).abs() > 1e-12 {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

/// ERE of measured per-scenario AdverSuc values, in `ScenarioKind::ALL` order.
pub fn ere_of(measured: [f64; 4]) -> f64 {
    let results: Vec<ScenarioResult> = ScenarioKind::ALL
        .iter()
        .zip(measured)
        .map(|(&k, a)| ScenarioResult::new(k, a))
        .collect();
    ere_from_results(&results)
}

/// ERE of the evaluator that always answers "human", run through the full
/// scenario machinery.
pub fn constant_evaluator_ere(dialogues: &[Dialogue], seed: u64) -> Result<f64> {
    let machine: Vec<Episode> = dialogues
        .iter()
        .map(|d| {
            Episode::new(
                d.context.clone(),
                d.response.iter().rev().copied().collect(),
            )
        })
        .collect();
    let results = run_scenarios(
        &ConstantFactory,
        &ScenarioKind::ALL,
        dialogues,
        Some(&machine),
        0.3,
        seed,
    )?;
    Ok(ere_from_results(&results))
}

/// Variance of the rollout reward for the first prefix of `y` over
/// `repeats` independent calls, for each rollout count in `counts`.
pub fn rollout_variances(
    gen: &Generator,
    disc: &Discriminator,
    context: &[Vec<Token>],
    y: &[Token],
    counts: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    counts
        .iter()
        .map(|&n| {
            let draws: Vec<f64> = (0..repeats)
                .map(|i| {
                    Ok(mc_rollout_rewards(
                        gen,
                        disc,
                        context,
                        y,
                        n,
                        derive_seed(seed, &[n as u64, i as u64]),
                        20,
                        1.0,
                    )?[0])
                })
                .collect::<Result<_>>()?;
            Ok(super::mean_var(&draws).1)
        })
        .collect()
}

/// Observed variance ratios `var(1) / var(N)` against the predicted `N`,
/// from a randomly initialized generator and discriminator on vocabulary 12.
pub fn variance_law(seed: u64, counts: &[usize], repeats: usize) -> Result<Vec<(usize, f64)>> {
    let dims = ModelDims::new(12);
    let gen = Generator::new(dims, "gen.", Init::Uniform { range: 0.5, seed });
    let disc = Discriminator::new(
        dims,
        "disc.",
        Init::Uniform {
            range: 1.0,
            seed: seed + 1,
        },
    );
    let vars = rollout_variances(
        &gen,
        &disc,
        &[vec![4, 5, 6]],
        &[7, 8, EOS],
        counts,
        repeats,
        seed,
    )?;
    Ok(counts
        .iter()
        .zip(&vars)
        .map(|(&n, v)| (n, vars[0] / v))
        .collect())
}
