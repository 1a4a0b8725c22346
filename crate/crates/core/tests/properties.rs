use advdial::corpus::{Dialogue, Token, BOS, EOS, PAD};
use advdial::decoding::{
    beam_search_with, decode, hypothesis_order, Auxiliary, BeamSettings, DecodeConfig,
    GeneratorStepper, Strategy as Decoder,
};
use advdial::eval::{build_scenario, Episode, ScenarioKind};
use advdial::models::{Critic, Discriminator, Generator, Init, ModelDims};
use advdial::synth::synth_corpus;
use advdial::train::{RlConfig, Trainer};
use proptest::prelude::*;
use std::cmp::Ordering;

const VOCAB: usize = 9;

fn dims() -> ModelDims {
    ModelDims {
        vocab: VOCAB,
        embed: 4,
        hidden: 5,
    }
}

fn init(range: f64, seed: u64) -> Init {
    Init::Uniform { range, seed }
}

fn word() -> impl Strategy<Value = Token> {
    4..VOCAB
}

fn utterance() -> impl Strategy<Value = Vec<Token>> {
    prop::collection::vec(word(), 1..6)
}

fn context() -> impl Strategy<Value = Vec<Vec<Token>>> {
    prop::collection::vec(utterance(), 1..3)
}

fn flat(context: &[Vec<Token>]) -> Vec<Token> {
    context.concat()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn discriminator_probabilities_are_complementary_and_open(
        seed in any::<u64>(), range in 0.05f64..3.0, ctx in context(), y in utterance()
    ) {
        let disc = Discriminator::new(dims(), "disc.", init(range, seed));
        let q = disc.score(&ctx, &y).unwrap();
        prop_assert!(q > 0.0 && q < 1.0, "Q+ = {}", q);
        let q_minus = 1.0 - q;
        prop_assert!((q + q_minus - 1.0).abs() < 1e-12);
    }

    #[test]
    fn critic_values_are_finite(seed in any::<u64>(), range in 0.05f64..3.0, ctx in context(), y in prop::collection::vec(word(), 0..8)) {
        let critic = Critic::new(dims(), "critic.", init(range, seed));
        prop_assert!(critic.value(&ctx, &y).unwrap().is_finite());
    }

    #[test]
    fn generator_steps_are_distributions(seed in any::<u64>(), range in 0.05f64..3.0, ctx in context(), y in utterance()) {
        let gen = Generator::new(dims(), "gen.", init(range, seed));
        let probs = gen.stepwise_probs(&flat(&ctx), &y).unwrap();
        prop_assert_eq!(probs.shape(), &[y.len(), VOCAB][..]);
        for row in probs.values().chunks(VOCAB) {
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn beam_returns_sorted_terminated_hypotheses(
        seed in any::<u64>(),
        ctx in context(),
        width in 1usize..5,
        max_len in 1usize..6,
        sibling_penalty in 0.0f64..2.0,
        repeat_penalty in 0.0f64..2.0,
    ) {
        let gen = Generator::new(dims(), "gen.", init(1.0, seed));
        let settings = BeamSettings { width, sibling_penalty, repeat_penalty, max_len };
        let hyps = beam_search_with(&mut GeneratorStepper::new(&gen, &flat(&ctx)), &settings, &|t| t >= 4).unwrap();
        prop_assert!(!hyps.is_empty() && hyps.len() <= width);
        for h in &hyps {
            prop_assert!(h.finished() || h.tokens.len() == max_len, "{:?}", h.tokens);
            prop_assert!(h.tokens.len() <= max_len);
            prop_assert!(h.tokens.iter().all(|&t| t != PAD && t != BOS));
            prop_assert!(h.tokens.iter().rev().skip(1).all(|&t| t != EOS));
        }
        for pair in hyps.windows(2) {
            prop_assert_ne!(hypothesis_order(&pair[0], &pair[1]), Ordering::Greater);
        }
    }

    #[test]
    fn decoders_never_emit_pad_or_bos(seed in any::<u64>(), range in 0.1f64..3.0, ctx in context(), sample_seed in any::<u64>()) {
        let gen = Generator::new(dims(), "gen.", init(range, seed));
        let vocab = advdial::corpus::Vocab::from_words(["a", "b", "c", "d", "e"]);
        for strategy in [Decoder::Greedy, Decoder::Sample, Decoder::Beam] {
            let config = DecodeConfig { seed: sample_seed, max_len: 8, ..DecodeConfig::with_strategy(strategy) };
            let out = decode(&gen, &vocab, &flat(&ctx), &config, Auxiliary::default()).unwrap();
            prop_assert!(out.tokens.len() <= 8);
            prop_assert!(out.tokens.iter().all(|&t| t != PAD && t != BOS && t != EOS), "{:?}: {:?}", strategy, out.tokens);
        }
    }

    #[test]
    fn reinforce_rewards_are_probabilities(seed in any::<u64>(), ctxs in prop::collection::vec((context(), utterance()), 1..4)) {
        let batch: Vec<Dialogue> = ctxs.into_iter().map(|(c, r)| Dialogue::new(c, r).unwrap()).collect();
        let trainer = Trainer::new(
            Generator::new(dims(), "gen.", init(0.5, seed)),
            Discriminator::new(dims(), "disc.", init(1.0, seed ^ 1)),
            Critic::new(dims(), "critic.", init(1.0, seed ^ 2)),
            RlConfig { max_len: 6, ..RlConfig::default() },
        );
        for t in trainer.reinforce_traces(&batch, seed).unwrap() {
            prop_assert_eq!(t.rewards.len(), t.tokens.len());
            prop_assert!(t.rewards.iter().all(|r| *r > 0.0 && *r < 1.0 && *r == t.rewards[0]));
            prop_assert!(t.baselines.iter().all(|b| b.is_finite() && *b == t.baselines[0]));
        }
    }
}

fn balanced(pos: &[Episode], neg: &[Episode]) -> bool {
    pos.len().abs_diff(neg.len()) <= 1 && !pos.is_empty() && !neg.is_empty()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scenario_builders_are_label_balanced(corpus_seed in 0u64..1000, n in 3usize..60, seed in any::<u64>()) {
        let corpus = synth_corpus(corpus_seed, n).unwrap();
        let machine: Vec<Episode> = corpus.dialogues.iter().map(|d| Episode::new(d.context.clone(), vec![4, 5])).collect();
        for kind in ScenarioKind::ALL {
            let (pos, neg) = build_scenario(kind, &corpus.dialogues, Some(&machine), seed).unwrap();
            prop_assert!(balanced(&pos, &neg), "{:?}: {} vs {}", kind, pos.len(), neg.len());
        }
    }
}
