//! Models pretrained on a synthetic corpus, for tests that need trained behaviour.

use advdial::corpus::{Dialogue, Vocab};
use advdial::models::{Discriminator, Generator, Init, LanguageModel, ModelDims};
use advdial::synth::synth_corpus;
use advdial::train::{
    pretrain_discriminator, pretrain_generator, pretrain_lm, reverse_dialogues, DiscPretrainConfig,
    DiscPretrainReport, MleConfig, PretrainReport,
};
use advdial::Result;

#[derive(Clone, Debug)]
pub struct FixtureSpec {
    pub corpus_seed: u64,
    pub dialogues: usize,
    pub train: usize,
    pub heldout: usize,
    pub gen_epochs: usize,
    /// Language-model epochs; no language model when zero.
    pub lm_epochs: usize,
    /// Training dialogues used for discriminator pretraining.
    pub disc_examples: usize,
    pub seed: u64,
}

impl FixtureSpec {
    /// Corpus and schedule shared by the directional acceptance checks: 2000
    /// training, 200 held-out and 1000 test dialogues, three MLE epochs.
    pub fn acceptance(seed: u64) -> Self {
        Self {
            corpus_seed: 100 + seed,
            dialogues: 3200,
            train: 2000,
            heldout: 200,
            gen_epochs: 3,
            lm_epochs: 0,
            disc_examples: 1000,
            seed,
        }
    }
}

pub struct Pretrained {
    pub vocab: Vocab,
    pub dims: ModelDims,
    pub train: Vec<Dialogue>,
    pub heldout: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
    pub gen: Generator,
    pub backward: Generator,
    pub lm: Option<LanguageModel>,
    pub disc: Discriminator,
    pub gen_report: PretrainReport,
    pub disc_report: DiscPretrainReport,
}

impl Pretrained {
    pub fn build(spec: &FixtureSpec) -> Result<Self> {
        let corpus = synth_corpus(spec.corpus_seed, spec.dialogues)?;
        let (train, rest) = corpus.dialogues.split_at(spec.train);
        let (heldout, test) = rest.split_at(spec.heldout);
        let dims = ModelDims::new(corpus.vocab.len());
        let seed = spec.seed;
        let mle = MleConfig {
            epochs: spec.gen_epochs,
            seed,
            ..MleConfig::default()
        };
        let mut gen = Generator::new(dims, "gen.", Init::uniform(seed));
        let gen_report = pretrain_generator(&mut gen, &corpus.vocab, train, heldout, &mle)?;
        let mut backward = Generator::new(dims, "back.", Init::uniform(seed + 50));
        pretrain_generator(
            &mut backward,
            &corpus.vocab,
            &reverse_dialogues(train),
            heldout,
            &mle,
        )?;
        let lm = if spec.lm_epochs > 0 {
            let mut lm = LanguageModel::new(dims, "lm.", Init::uniform(seed + 75));
            let responses: Vec<_> = train.iter().map(|d| d.response.clone()).collect();
            pretrain_lm(
                &mut lm,
                &responses,
                &MleConfig {
                    epochs: spec.lm_epochs,
                    ..mle.clone()
                },
            )?;
            Some(lm)
        } else {
            None
        };
        let mut disc = Discriminator::new(dims, "disc.", Init::uniform(seed + 100));
        let disc_config = DiscPretrainConfig {
            seed,
            ..DiscPretrainConfig::default()
        };
        let disc_report = pretrain_discriminator(
            &mut disc,
            &gen,
            &backward,
            &corpus.vocab,
            &train[..spec.disc_examples.min(train.len())],
            heldout,
            &disc_config,
        )?;
        Ok(Self {
            vocab: corpus.vocab,
            dims,
            train: train.to_vec(),
            heldout: heldout.to_vec(),
            test: test.to_vec(),
            gen,
            backward,
            lm,
            disc,
            gen_report,
            disc_report,
        })
    }
}
