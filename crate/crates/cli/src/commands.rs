//! Subcommand bodies. Each reads its inputs from the run directory (or the
//! configured corpus), writes its outputs there, and refreshes the MANIFEST.

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::run::{verify_manifest, RunDir, CONFIG_FILE, MANIFEST};
use advdial::checkpoint::Checkpoint;
use advdial::corpus::{
    corpus_to_string, load_corpus, load_corpus_with_vocab, parse_corpus, Dialogue, Vocab,
};
use advdial::decoding::{
    decode, decode_line, parse_decode_line, write_decode_file, Auxiliary, Strategy,
};
use advdial::eval::{
    check_outside_eval, ere_from_results, generator_adver_suc, machine_outputs, machine_vs_random,
    run_scenarios, EvalReport, LikelihoodModels, ScenarioKind, StandardFactory,
};
use advdial::models::{Critic, Discriminator, Generator, Init, LanguageModel, ModelDims};
use advdial::rng::derive_seed;
use advdial::synth::synth_corpus;
use advdial::train::{
    metrics_to_jsonl, parse_metrics_jsonl, pretrain_discriminator, pretrain_generator, pretrain_lm,
    reverse_dialogues, Trainer,
};
use advdial::Error;
use serde::Serialize;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const CORPUS_FILE: &str = "corpus.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const GEN_CKPT: &str = "gen.ckpt.json";
pub const BACKWARD_CKPT: &str = "backward.ckpt.json";
pub const LM_CKPT: &str = "lm.ckpt.json";
pub const DISC_CKPT: &str = "disc.ckpt.json";
pub const ADV_GEN_CKPT: &str = "adv_gen.ckpt.json";
pub const ADV_DISC_CKPT: &str = "adv_disc.ckpt.json";
pub const CRITIC_CKPT: &str = "critic.ckpt.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

const KIND_GENERATOR: &str = "generator";
const KIND_DISCRIMINATOR: &str = "discriminator";
const KIND_CRITIC: &str = "critic";
const KIND_LM: &str = "language_model";

/// Which generator a decode or evaluation reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelChoice {
    Mle,
    Adversarial,
}

impl ModelChoice {
    fn checkpoint(self) -> &'static str {
        match self {
            ModelChoice::Mle => GEN_CKPT,
            ModelChoice::Adversarial => ADV_GEN_CKPT,
        }
    }
}

impl FromStr for ModelChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mle" => Ok(ModelChoice::Mle),
            "adversarial" | "adv" => Ok(ModelChoice::Adversarial),
            other => Err(format!(
                "unknown model {other:?} (expected mle or adversarial)"
            )),
        }
    }
}

impl fmt::Display for ModelChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelChoice::Mle => "mle",
            ModelChoice::Adversarial => "adversarial",
        })
    }
}

/// Corpus split into training, held-out (perplexity) and evaluation parts.
pub struct Data {
    pub vocab: Vocab,
    pub train: Vec<Dialogue>,
    pub heldout: Vec<Dialogue>,
    pub eval: Vec<Dialogue>,
}

fn load_data(cfg: &RunConfig, run: &RunDir) -> CliResult<Data> {
    let corpus_path = cfg.corpus_path().unwrap_or_else(|| run.file(CORPUS_FILE));
    let vocab_path = cfg
        .vocab_path()
        .or_else(|| Some(run.file(VOCAB_FILE)).filter(|p| p.exists()));
    let (vocab, mut dialogues) = match vocab_path {
        Some(vp) => {
            let vocab = Vocab::load(&vp)?;
            let dialogues = load_corpus_with_vocab(&corpus_path, &vocab)?;
            (vocab, dialogues)
        }
        None => {
            let corpus = load_corpus(&corpus_path)?;
            (corpus.vocab, corpus.dialogues)
        }
    };
    let (n_held, n_eval) = cfg.split_sizes()?;
    if dialogues.len() <= n_held + n_eval {
        return Err(Error::DegenerateTrainingSet(format!(
            "{} dialogues leave no training data after {n_held} held-out and {n_eval} evaluation dialogues",
            dialogues.len()
        ))
        .into());
    }
    let eval = dialogues.split_off(dialogues.len() - n_eval);
    let heldout = dialogues.split_off(dialogues.len() - n_held);
    Ok(Data {
        vocab,
        train: dialogues,
        heldout,
        eval,
    })
}

fn load_checkpoint(run: &RunDir, name: &str, vocab: &Vocab) -> CliResult<Checkpoint> {
    let ckpt = Checkpoint::load(&run.file(name))?;
    ckpt.check_vocab(vocab)?;
    if ckpt.config_hash != run.config_hash {
        return Err(Error::ConfigMismatch {
            expected: run.config_hash.clone(),
            found: ckpt.config_hash,
        }
        .into());
    }
    Ok(ckpt)
}

fn load_generator(
    run: &RunDir,
    name: &str,
    dims: ModelDims,
    prefix: &str,
    vocab: &Vocab,
) -> CliResult<Generator> {
    let ckpt = load_checkpoint(run, name, vocab)?;
    let mut gen = Generator::new(dims, prefix, Init::Zeros);
    ckpt.restore_into(KIND_GENERATOR, &mut gen.params)?;
    Ok(gen)
}

fn load_discriminator(
    run: &RunDir,
    name: &str,
    dims: ModelDims,
    vocab: &Vocab,
) -> CliResult<Discriminator> {
    let ckpt = load_checkpoint(run, name, vocab)?;
    let mut disc = Discriminator::new(dims, "disc.", Init::Zeros);
    ckpt.restore_into(KIND_DISCRIMINATOR, &mut disc.params)?;
    Ok(disc)
}

fn save_checkpoint(
    run: &RunDir,
    name: &str,
    kind: &str,
    dims: ModelDims,
    params: &advdial::autodiff::ParamSet,
    vocab: &Vocab,
) -> CliResult<PathBuf> {
    let ckpt = Checkpoint::capture(kind, dims, params, &vocab.hash(), &run.config_hash);
    run.write(name, ckpt.to_json()?.as_bytes())
}

fn write_json<T: Serialize>(run: &RunDir, name: &str, value: &T) -> CliResult<PathBuf> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    run.write(name, text.as_bytes())
}

/// Writes the synthetic corpus and its vocabulary.
pub fn synth(cfg: &RunConfig, run: &RunDir) -> CliResult<Vec<PathBuf>> {
    let corpus = synth_corpus(cfg.seed()?, cfg.synth_n()?)?;
    let text = corpus_to_string(&corpus.dialogues, &corpus.vocab);
    // The written file must load back to the same dialogues.
    let reparsed = parse_corpus(&text)?;
    debug_assert_eq!(reparsed.dialogues.len(), corpus.dialogues.len());
    let paths = vec![
        run.write(CORPUS_FILE, text.as_bytes())?,
        run.write(VOCAB_FILE, corpus.vocab.to_file_string().as_bytes())?,
    ];
    run.refresh_manifest()?;
    Ok(paths)
}

#[derive(Serialize)]
struct PretrainGenReport {
    forward_perplexities: Vec<f64>,
    backward_perplexities: Vec<f64>,
    lm_losses: Vec<f64>,
    train_dialogues: usize,
    heldout_dialogues: usize,
    /// Share of training dialogues kept by the minimum-length filter.
    retained_fraction: f64,
}

/// MLE pretraining of the forward generator, the backward generator used for
/// MMI reranking, and the language model used for anti-LM decoding.
pub fn pretrain_gen(cfg: &RunConfig, run: &RunDir) -> CliResult<Vec<PathBuf>> {
    let data = load_data(cfg, run)?;
    let dims = cfg.dims(data.vocab.len())?;
    let mle = cfg.mle()?;
    let seed = cfg.seed()?;
    let mut paths = Vec::new();
    if !run.file(VOCAB_FILE).exists() {
        paths.push(run.write(VOCAB_FILE, data.vocab.to_file_string().as_bytes())?);
    }

    log::info!(
        "pretraining forward generator on {} dialogues",
        data.train.len()
    );
    let mut gen = Generator::new(dims, "gen.", Init::uniform(derive_seed(seed, &[1])));
    let forward = pretrain_generator(&mut gen, &data.vocab, &data.train, &data.heldout, &mle)?;

    log::info!("pretraining backward generator");
    let mut backward = Generator::new(dims, "back.", Init::uniform(derive_seed(seed, &[2])));
    let reversed_held = reverse_dialogues(&data.heldout);
    let back = pretrain_generator(
        &mut backward,
        &data.vocab,
        &reverse_dialogues(&data.train),
        &reversed_held,
        &mle,
    )?;

    log::info!("pretraining language model");
    let mut lm = LanguageModel::new(dims, "lm.", Init::uniform(derive_seed(seed, &[3])));
    let responses: Vec<Vec<_>> = data.train.iter().map(|d| d.response.clone()).collect();
    let lm_losses = pretrain_lm(&mut lm, &responses, &mle)?;

    paths.push(save_checkpoint(
        run,
        GEN_CKPT,
        KIND_GENERATOR,
        dims,
        &gen.params,
        &data.vocab,
    )?);
    paths.push(save_checkpoint(
        run,
        BACKWARD_CKPT,
        KIND_GENERATOR,
        dims,
        &backward.params,
        &data.vocab,
    )?);
    paths.push(save_checkpoint(
        run,
        LM_CKPT,
        KIND_LM,
        dims,
        &lm.params,
        &data.vocab,
    )?);
    paths.push(write_json(
        run,
        "pretrain_gen.json",
        &PretrainGenReport {
            forward_perplexities: forward.perplexities,
            backward_perplexities: back.perplexities,
            lm_losses,
            train_dialogues: data.train.len(),
            heldout_dialogues: data.heldout.len(),
            retained_fraction: forward.examples as f64 / data.train.len() as f64,
        },
    )?);
    run.refresh_manifest()?;
    Ok(paths)
}

/// Discriminator pretraining against MMI-reranked beam outputs and samples.
pub fn pretrain_disc(cfg: &RunConfig, run: &RunDir) -> CliResult<Vec<PathBuf>> {
    let data = load_data(cfg, run)?;
    let dims = cfg.dims(data.vocab.len())?;
    let gen = load_generator(run, GEN_CKPT, dims, "gen.", &data.vocab)?;
    let backward = load_generator(run, BACKWARD_CKPT, dims, "back.", &data.vocab)?;
    let limit = match cfg.disc_examples()? {
        0 => data.train.len(),
        n => n.min(data.train.len()),
    };
    let mut disc = Discriminator::new(dims, "disc.", Init::uniform(derive_seed(cfg.seed()?, &[4])));
    log::info!("pretraining discriminator on {limit} dialogues");
    let report = pretrain_discriminator(
        &mut disc,
        &gen,
        &backward,
        &data.vocab,
        &data.train[..limit],
        &data.heldout,
        &cfg.disc_pretrain()?,
    )?;
    let paths = vec![
        save_checkpoint(
            run,
            DISC_CKPT,
            KIND_DISCRIMINATOR,
            dims,
            &disc.params,
            &data.vocab,
        )?,
        write_json(run, "pretrain_disc.json", &report)?,
    ];
    run.refresh_manifest()?;
    Ok(paths)
}

/// The alternating adversarial loop. Periodic generator checkpoints go to
/// `checkpoints/`. On divergence the last good models and the metrics so far
/// are still written before the error is returned.
pub fn adv_train(cfg: &RunConfig, run: &RunDir) -> CliResult<Vec<PathBuf>> {
    let data = load_data(cfg, run)?;
    let dims = cfg.dims(data.vocab.len())?;
    let gen = load_generator(run, GEN_CKPT, dims, "gen.", &data.vocab)?;
    let disc = load_discriminator(run, DISC_CKPT, dims, &data.vocab)?;
    let critic = Critic::new(dims, "critic.", Init::Zeros);
    let mut trainer = Trainer::new(gen, disc, critic, cfg.rl()?);
    let schedule = cfg.schedule()?;
    let every = cfg.checkpoint_every()?;
    let mut log = Vec::new();
    let mut periodic = Vec::new();
    let vocab_hash = data.vocab.hash();
    if every > 0 {
        std::fs::create_dir_all(run.file("checkpoints")).map_err(|source| Error::Io {
            path: run.file("checkpoints"),
            source,
        })?;
    }
    let outcome = trainer.adversarial_train(
        &data.train,
        &data.heldout,
        &schedule,
        cfg.reward_mode()?,
        &run.config_hash,
        |m, t| {
            log::info!(
                "iteration {} d_loss {:.4} reward {:.4} perplexity {:.4}",
                m.iteration,
                m.d_loss,
                m.g_reward_mean,
                m.perplexity
            );
            log.push(m.clone());
            if every > 0 && (m.iteration + 1) % every == 0 {
                let path = run.file(&format!(
                    "checkpoints/adv_gen-{:05}.ckpt.json",
                    m.iteration + 1
                ));
                Checkpoint::capture(
                    KIND_GENERATOR,
                    dims,
                    &t.gen.params,
                    &vocab_hash,
                    &run.config_hash,
                )
                .save(&path)?;
                periodic.push(path);
            }
            Ok(())
        },
    );
    let mut paths = periodic;
    paths.push(run.write(METRICS_FILE, metrics_to_jsonl(&log)?.as_bytes())?);
    paths.push(save_checkpoint(
        run,
        ADV_GEN_CKPT,
        KIND_GENERATOR,
        dims,
        &trainer.gen.params,
        &data.vocab,
    )?);
    paths.push(save_checkpoint(
        run,
        ADV_DISC_CKPT,
        KIND_DISCRIMINATOR,
        dims,
        &trainer.disc.params,
        &data.vocab,
    )?);
    paths.push(save_checkpoint(
        run,
        CRITIC_CKPT,
        KIND_CRITIC,
        dims,
        &trainer.critic.params,
        &data.vocab,
    )?);
    run.refresh_manifest()?;
    outcome?;
    Ok(paths)
}

/// Generator plus whatever auxiliary models the configured strategy needs.
struct DecodeModels {
    gen: Generator,
    backward: Option<Generator>,
    lm: Option<LanguageModel>,
}

impl DecodeModels {
    fn load(
        cfg: &RunConfig,
        run: &RunDir,
        model: ModelChoice,
        data: &Data,
        need_backward: bool,
    ) -> CliResult<Self> {
        let dims = cfg.dims(data.vocab.len())?;
        let strategy = cfg.decode()?.strategy;
        let gen = load_generator(run, model.checkpoint(), dims, "gen.", &data.vocab)?;
        let backward = if need_backward || strategy == Strategy::MmiBackward {
            Some(load_generator(
                run,
                BACKWARD_CKPT,
                dims,
                "back.",
                &data.vocab,
            )?)
        } else {
            None
        };
        let lm = if strategy == Strategy::AntiLm {
            let ckpt = load_checkpoint(run, LM_CKPT, &data.vocab)?;
            let mut lm = LanguageModel::new(dims, "lm.", Init::Zeros);
            ckpt.restore_into(KIND_LM, &mut lm.params)?;
            Some(lm)
        } else {
            None
        };
        Ok(Self { gen, backward, lm })
    }

    fn param_names(&self) -> impl Iterator<Item = &str> {
        let backward = self.backward.iter().flat_map(|b| b.params.names());
        let lm = self.lm.iter().flat_map(|l| l.params.names());
        self.gen.params.names().chain(backward).chain(lm)
    }

    fn aux(&self) -> Auxiliary<'_> {
        Auxiliary {
            backward: self.backward.as_ref(),
            lm: self.lm.as_ref(),
        }
    }
}

/// Decodes every evaluation context to `decode-<model>.tsv`.
pub fn decode_cmd(cfg: &RunConfig, run: &RunDir, model: ModelChoice) -> CliResult<Vec<PathBuf>> {
    let data = load_data(cfg, run)?;
    let models = DecodeModels::load(cfg, run, model, &data, false)?;
    let dc = cfg.decode()?;
    let mut lines = Vec::with_capacity(data.eval.len());
    for (i, d) in data.eval.iter().enumerate() {
        let c = advdial::decoding::DecodeConfig {
            seed: derive_seed(dc.seed, &[i as u64]),
            ..dc
        };
        let out = decode(
            &models.gen,
            &data.vocab,
            &d.flat_context(),
            &c,
            models.aux(),
        )?;
        lines.push(decode_line(&data.vocab, &d.context, &out.tokens, out.score));
    }
    let path = run.file(&format!("decode-{model}.tsv"));
    write_decode_file(&path, &lines)?;
    run.refresh_manifest()?;
    Ok(vec![path])
}

/// Adversarial evaluation of one generator. With `scenario` set, only that
/// scenario is measured and the report carries no AdverSuc, ERE or
/// machine-vs-random figures.
pub fn evaluate(
    cfg: &RunConfig,
    run: &RunDir,
    model: ModelChoice,
    scenario: Option<ScenarioKind>,
) -> CliResult<(EvalReport, Vec<PathBuf>)> {
    let data = load_data(cfg, run)?;
    let spec = cfg.evaluator()?;
    let needs_likelihood = spec.features.forward || spec.features.backward;
    let models = DecodeModels::load(cfg, run, model, &data, needs_likelihood)?;
    check_outside_eval(models.param_names())?;
    let likelihood = match (needs_likelihood, &models.backward) {
        (true, Some(back)) => Some(LikelihoodModels {
            forward: models.gen.clone(),
            backward: back.clone(),
        }),
        _ => None,
    };
    let eval_cfg = cfg.eval_train(data.vocab.len())?;
    let test_fraction = eval_cfg.test_fraction;
    let factory = StandardFactory {
        spec,
        config: eval_cfg,
        likelihood: likelihood.as_ref(),
    };
    let seed = cfg.seed()?;
    log::info!("decoding {} evaluation contexts", data.eval.len());
    let machine = machine_outputs(
        &models.gen,
        &data.vocab,
        &data.eval,
        &cfg.decode()?,
        models.aux(),
    )?;
    let kinds = match scenario {
        Some(k) => vec![k],
        None => cfg.scenarios()?,
    };
    log::info!("running {} scenario(s)", kinds.len());
    let scenarios = run_scenarios(
        &factory,
        &kinds,
        &data.eval,
        Some(&machine),
        test_fraction,
        derive_seed(seed, &[10]),
    )?;
    let full = scenario.is_none();
    let ere = (scenarios.len() == ScenarioKind::ALL.len()).then(|| ere_from_results(&scenarios));
    let adver_suc = if full {
        Some(generator_adver_suc(
            &factory,
            &data.eval,
            &machine,
            test_fraction,
            derive_seed(seed, &[11]),
        )?)
    } else {
        None
    };
    let mvr = if full {
        Some(machine_vs_random(
            &factory,
            &machine,
            &data.eval,
            test_fraction,
            derive_seed(seed, &[12]),
        )?)
    } else {
        None
    };
    let report = EvalReport {
        model: model.to_string(),
        evaluator: spec.kind,
        adver_suc,
        scenarios,
        ere,
        machine_vs_random: mvr,
        seeds: vec![seed],
        config_hash: run.config_hash.clone(),
    };
    let stem = match scenario {
        Some(k) => format!("report-{model}-{k}"),
        None => format!("report-{model}"),
    };
    let paths = vec![
        run.write(&format!("{stem}.json"), report.to_json()?.as_bytes())?,
        run.write(&format!("{stem}.csv"), report.to_csv().as_bytes())?,
    ];
    run.refresh_manifest()?;
    Ok((report, paths))
}

/// Checks one artifact against its documented format, chosen by file name.
pub fn validate_file(path: &Path) -> Result<(), String> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    let read = || std::fs::read_to_string(path).map_err(|e| e.to_string());
    let err = |e: Error| e.to_string();
    if name == MANIFEST {
        let problems = verify_manifest(path).map_err(|e| e.to_string())?;
        return if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("; "))
        };
    }
    if name == CONFIG_FILE {
        return RunConfig::parse(&read()?)
            .map(|_| ())
            .map_err(|e| e.to_string());
    }
    if name.ends_with(".ckpt.json") {
        return Checkpoint::from_json(&read()?).map(|_| ()).map_err(err);
    }
    if name.starts_with("report") && name.ends_with(".json") {
        return EvalReport::from_json(&read()?).map(|_| ()).map_err(err);
    }
    if name.ends_with(".jsonl") {
        return parse_metrics_jsonl(&read()?).map(|_| ()).map_err(err);
    }
    if name.ends_with(".json") {
        return serde_json::from_str::<serde_json::Value>(&read()?)
            .map(|_| ())
            .map_err(|e| e.to_string());
    }
    if name.ends_with(".csv") {
        return validate_csv(&read()?);
    }
    if name.ends_with(".tsv") {
        for (i, line) in read()?.lines().enumerate() {
            parse_decode_line(line).ok_or_else(|| {
                format!("line {}: expected context TAB response TAB score", i + 1)
            })?;
        }
        return Ok(());
    }
    if name == VOCAB_FILE || name.starts_with("vocab") {
        return Vocab::from_file_string(&read()?).map(|_| ()).map_err(err);
    }
    if name.ends_with(".txt") {
        let text = read()?;
        let vocab_path = path.with_file_name(VOCAB_FILE);
        return match Vocab::load(&vocab_path) {
            Ok(vocab) => advdial::corpus::parse_corpus_with_vocab(&text, &vocab)
                .map(|_| ())
                .map_err(err),
            Err(_) => parse_corpus(&text).map(|_| ()).map_err(err),
        };
    }
    Err("unrecognized artifact type".into())
}

fn validate_csv(text: &str) -> Result<(), String> {
    let mut lines = text.lines();
    if lines.next() != Some("model,metric,value") {
        return Err("expected header model,metric,value".into());
    }
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 || fields[2].parse::<f64>().is_err() {
            return Err(format!("row {}: expected model,metric,<number>", i + 1));
        }
    }
    Ok(())
}

/// Validates files and directories (recursively); prints one line per file.
pub fn validate(paths: &[PathBuf]) -> CliResult<usize> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            for name in crate::run::artifacts(p)? {
                files.push(p.join(name));
            }
            if p.join(MANIFEST).exists() {
                files.push(p.join(MANIFEST));
            }
        } else if p.exists() {
            files.push(p.clone());
        } else {
            return Err(Error::MissingArtifact(p.clone()).into());
        }
    }
    let mut failures = 0;
    for f in &files {
        match validate_file(f) {
            Ok(()) => println!("ok   {}", f.display()),
            Err(msg) => {
                failures += 1;
                println!("FAIL {}: {msg}", f.display());
            }
        }
    }
    if failures > 0 {
        return Err(CliError::ValidationFailed(failures));
    }
    Ok(files.len())
}
