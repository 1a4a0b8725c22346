//! Generator, hierarchical discriminator, critic and unconditional language
//! model, all built from the same gated recurrent cell.

use crate::autodiff::{log_softmax, Gradients, Graph, ParamId, ParamSet, Tensor, Var};
use crate::corpus::{Dialogue, Token, BOS, EOS};
use crate::error::{Error, Result};
use crate::rng::seeded;
use serde::{Deserialize, Serialize};

pub const DEFAULT_EMBED: usize = 16;
pub const DEFAULT_HIDDEN: usize = 32;
pub const INIT_RANGE: f64 = 0.08;
pub const MAX_DECODE_LEN: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl ModelDims {
    pub fn new(vocab: usize) -> Self {
        Self {
            vocab,
            embed: DEFAULT_EMBED,
            hidden: DEFAULT_HIDDEN,
        }
    }
}

/// Parameter initialization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-range, range]` from a seeded stream.
    Uniform {
        range: f64,
        seed: u64,
    },
    Zeros,
}

impl Init {
    pub fn uniform(seed: u64) -> Self {
        Init::Uniform {
            range: INIT_RANGE,
            seed,
        }
    }
}

/// Incrementally registers parameters under a name prefix.
pub(crate) struct Builder<'a> {
    params: &'a mut ParamSet,
    prefix: String,
    rng: Option<crate::rng::DetRng>,
    range: f64,
}

impl<'a> Builder<'a> {
    pub(crate) fn new(params: &'a mut ParamSet, prefix: &str, init: Init) -> Self {
        let (rng, range) = match init {
            Init::Uniform { range, seed } => (Some(seeded(seed)), range),
            Init::Zeros => (None, 0.0),
        };
        Self {
            params,
            prefix: prefix.to_string(),
            rng,
            range,
        }
    }

    pub(crate) fn tensor(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        let t = match &mut self.rng {
            Some(rng) => Tensor::uniform(shape, self.range, rng),
            None => Tensor::zeros(shape),
        };
        self.params.add(format!("{}{}", self.prefix, name), t)
    }

    pub(crate) fn gru(&mut self, name: &str, input: usize, hidden: usize) -> GruLayer {
        GruLayer {
            w: self.tensor(&format!("{name}.w"), vec![3 * hidden, input]),
            u: self.tensor(&format!("{name}.u"), vec![3 * hidden, hidden]),
            b: self.tensor(&format!("{name}.b"), vec![3 * hidden]),
            hidden,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GruLayer {
    w: ParamId,
    u: ParamId,
    b: ParamId,
    hidden: usize,
}

impl GruLayer {
    pub fn step(&self, g: &mut Graph<'_>, x: Var, h: Var) -> Result<Var> {
        let (w, u, b) = (g.param(self.w), g.param(self.u), g.param(self.b));
        let wx = g.matvec(w, x)?;
        let gx = g.add(wx, b)?;
        let gh = g.matvec(u, h)?;
        g.gru(gx, gh, h)
    }

    /// Runs from a zero state over `inputs`, returning every hidden state.
    pub fn run(&self, g: &mut Graph<'_>, inputs: &[Var]) -> Result<Vec<Var>> {
        let mut h = g.zeros(self.hidden);
        let mut out = Vec::with_capacity(inputs.len());
        for &x in inputs {
            h = self.step(g, x, h)?;
            out.push(h);
        }
        Ok(out)
    }
}

fn check_tokens(tokens: &[Token], vocab: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t >= vocab) {
        Some(&id) => Err(Error::TokenOutOfVocab {
            id,
            vocab_size: vocab,
        }),
        None => Ok(()),
    }
}

/// Response tokens followed by EOS.
pub fn with_eos(response: &[Token]) -> Vec<Token> {
    let mut y = response.to_vec();
    y.push(EOS);
    y
}

/// Encoder–decoder with bilinear attention: the policy `π(y | x)`.
#[derive(Clone, Debug)]
pub struct Generator {
    pub params: ParamSet,
    pub dims: ModelDims,
    emb: ParamId,
    encoder: GruLayer,
    decoder: GruLayer,
    attn: ParamId,
    comb_w: ParamId,
    comb_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Decoding state for one hypothesis: encoder memory plus decoder hidden state.
#[derive(Clone, Copy, Debug)]
pub struct GenSession {
    memory: Var,
    pub hidden: Var,
}

impl Generator {
    pub fn new(dims: ModelDims, prefix: &str, init: Init) -> Self {
        let mut params = ParamSet::new();
        let mut b = Builder::new(&mut params, prefix, init);
        let (v, e, h) = (dims.vocab, dims.embed, dims.hidden);
        let emb = b.tensor("emb", vec![v, e]);
        let encoder = b.gru("enc", e, h);
        let decoder = b.gru("dec", e, h);
        let attn = b.tensor("attn", vec![h, h]);
        let comb_w = b.tensor("comb.w", vec![h, 2 * h]);
        let comb_b = b.tensor("comb.b", vec![h]);
        let out_w = b.tensor("out.w", vec![v, h]);
        let out_b = b.tensor("out.b", vec![v]);
        Self {
            params,
            dims,
            emb,
            encoder,
            decoder,
            attn,
            comb_w,
            comb_b,
            out_w,
            out_b,
        }
    }

    /// Encodes the flattened context (followed by EOS) and primes the decoder.
    pub fn begin(&self, g: &mut Graph<'_>, context: &[Token]) -> Result<GenSession> {
        check_tokens(context, self.dims.vocab)?;
        let emb = g.param(self.emb);
        let mut inputs = Vec::with_capacity(context.len() + 1);
        for &t in context.iter().chain(std::iter::once(&EOS)) {
            inputs.push(g.row(emb, t)?);
        }
        let states = self.encoder.run(g, &inputs)?;
        let memory = g.stack(&states)?;
        Ok(GenSession {
            memory,
            hidden: *states.last().expect("at least EOS"),
        })
    }

    /// Feeds `prev` and returns log-probabilities of the next token.
    pub fn advance(&self, g: &mut Graph<'_>, s: &mut GenSession, prev: Token) -> Result<Var> {
        check_tokens(&[prev], self.dims.vocab)?;
        let emb = g.param(self.emb);
        let x = g.row(emb, prev)?;
        let h = self.decoder.step(g, x, s.hidden)?;
        s.hidden = h;
        let attn = g.param(self.attn);
        let query = g.mat_t_vec(attn, h)?;
        let scores = g.matvec(s.memory, query)?;
        let weights = g.softmax(scores)?;
        let ctx = g.mat_t_vec(s.memory, weights)?;
        let joined = g.concat(&[h, ctx])?;
        let (cw, cb) = (g.param(self.comb_w), g.param(self.comb_b));
        let pre = g.matvec(cw, joined)?;
        let pre = g.add(pre, cb)?;
        let hid = g.tanh(pre);
        let (ow, ob) = (g.param(self.out_w), g.param(self.out_b));
        let logits = g.matvec(ow, hid)?;
        let logits = g.add(logits, ob)?;
        g.log_softmax(logits)
    }

    /// Teacher-forced per-token log-probability nodes of `y` given `context`.
    pub fn token_log_probs(
        &self,
        g: &mut Graph<'_>,
        context: &[Token],
        y: &[Token],
    ) -> Result<Vec<Var>> {
        check_tokens(y, self.dims.vocab)?;
        let mut s = self.begin(g, context)?;
        let mut prev = BOS;
        let mut out = Vec::with_capacity(y.len());
        for &t in y {
            let lp = self.advance(g, &mut s, prev)?;
            out.push(g.pick(lp, t)?);
            prev = t;
        }
        Ok(out)
    }

    /// `log p(y_t | x, y_<t)` for each position of `y` (which should end in EOS).
    pub fn log_prob(&self, context: &[Token], y: &[Token]) -> Result<Vec<f64>> {
        let mut g = Graph::inference(&self.params);
        let vars = self.token_log_probs(&mut g, context, y)?;
        Ok(vars.iter().map(|&v| g.scalar_value(v)).collect())
    }

    /// Stepwise next-token distributions `[|y|, V]` under teacher forcing.
    pub fn stepwise_probs(&self, context: &[Token], y: &[Token]) -> Result<Tensor> {
        check_tokens(y, self.dims.vocab)?;
        let mut g = Graph::inference(&self.params);
        let mut s = self.begin(&mut g, context)?;
        let mut prev = BOS;
        let mut values = Vec::with_capacity(y.len() * self.dims.vocab);
        for &t in y {
            let lp = self.advance(&mut g, &mut s, prev)?;
            values.extend(g.value(lp).iter().map(|l| l.exp()));
            prev = t;
        }
        Tensor::new(vec![y.len(), self.dims.vocab], values)
    }

    /// Gradient of `Σ_t weights[t] · log p(y_t | x, y_<t)` and the summed log-probability.
    pub fn weighted_score_gradient(
        &self,
        context: &[Token],
        y: &[Token],
        weights: &[f64],
    ) -> Result<(Gradients, f64)> {
        if weights.len() != y.len() {
            return Err(Error::ShapeMismatch {
                op: "weighted_score_gradient",
                lhs: vec![y.len()],
                rhs: vec![weights.len()],
            });
        }
        let mut g = Graph::new(&self.params);
        let lps = self.token_log_probs(&mut g, context, y)?;
        let total_lp: f64 = lps.iter().map(|&v| g.scalar_value(v)).sum();
        let lp_vec = g.concat(&lps)?;
        let w = g.vector(weights.to_vec());
        let obj = g.dot(lp_vec, w)?;
        Ok((g.backward(obj)?, total_lp))
    }

    /// Sequence NLL `-Σ_t log p(y_t | ·)` as a graph node.
    pub fn nll(&self, g: &mut Graph<'_>, context: &[Token], y: &[Token]) -> Result<Var> {
        let lps = self.token_log_probs(g, context, y)?;
        let cat = g.concat(&lps)?;
        let s = g.sum(cat);
        Ok(g.scale(s, -1.0))
    }

    pub fn dialogue_nll(&self, d: &Dialogue) -> Result<f64> {
        Ok(-self
            .log_prob(&d.flat_context(), &with_eos(&d.response))?
            .iter()
            .sum::<f64>())
    }
}

/// Word-level recurrent encoding of each utterance followed by an
/// utterance-level recurrent encoding of the sequence.
#[derive(Clone, Debug)]
pub struct HierEncoder {
    emb: ParamId,
    word: GruLayer,
    utterance: GruLayer,
    pub hidden: usize,
}

impl HierEncoder {
    fn build(b: &mut Builder<'_>, dims: ModelDims) -> Self {
        Self {
            emb: b.tensor("emb", vec![dims.vocab, dims.embed]),
            word: b.gru("word", dims.embed, dims.hidden),
            utterance: b.gru("utt", dims.hidden, dims.hidden),
            hidden: dims.hidden,
        }
    }

    /// Vector for one utterance (zero vector for an empty one).
    pub fn encode_utterance(&self, g: &mut Graph<'_>, tokens: &[Token]) -> Result<Var> {
        let emb = g.param(self.emb);
        let mut h = g.zeros(self.hidden);
        for &t in tokens {
            let x = g.row(emb, t)?;
            h = self.word.step(g, x, h)?;
        }
        Ok(h)
    }

    /// Encodes the nonempty utterances in order.
    pub fn encode(&self, g: &mut Graph<'_>, utterances: &[&[Token]]) -> Result<Var> {
        let mut h = g.zeros(self.hidden);
        for u in utterances.iter().filter(|u| !u.is_empty()) {
            let x = self.encode_utterance(g, u)?;
            h = self.utterance.step(g, x, h)?;
        }
        Ok(h)
    }
}

fn episode<'a>(context: &'a [Vec<Token>], response: &'a [Token]) -> Vec<&'a [Token]> {
    let mut u: Vec<&[Token]> = context.iter().map(Vec::as_slice).collect();
    u.push(response);
    u
}

/// Hierarchical binary classifier producing `Q+` (human) and `Q-` (machine).
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub params: ParamSet,
    pub dims: ModelDims,
    pub encoder: HierEncoder,
    out_w: ParamId,
    out_b: ParamId,
}

pub const HUMAN: usize = 1;
pub const MACHINE: usize = 0;

impl Discriminator {
    pub fn new(dims: ModelDims, prefix: &str, init: Init) -> Self {
        let mut params = ParamSet::new();
        let mut b = Builder::new(&mut params, prefix, init);
        let encoder = HierEncoder::build(&mut b, dims);
        let out_w = b.tensor("out.w", vec![2, dims.hidden]);
        let out_b = b.tensor("out.b", vec![2]);
        Self {
            params,
            dims,
            encoder,
            out_w,
            out_b,
        }
    }

    /// Representation fed to the output layer.
    pub fn features(
        &self,
        g: &mut Graph<'_>,
        context: &[Vec<Token>],
        response: &[Token],
    ) -> Result<Var> {
        if response.is_empty() {
            return Err(Error::EmptyResponse);
        }
        check_tokens(response, self.dims.vocab)?;
        for u in context {
            check_tokens(u, self.dims.vocab)?;
        }
        self.encoder.encode(g, &episode(context, response))
    }

    /// Log-probabilities `[log Q-, log Q+]`.
    pub fn log_probs(
        &self,
        g: &mut Graph<'_>,
        context: &[Vec<Token>],
        response: &[Token],
    ) -> Result<Var> {
        let h = self.features(g, context, response)?;
        let (w, b) = (g.param(self.out_w), g.param(self.out_b));
        let logits = g.matvec(w, h)?;
        let logits = g.add(logits, b)?;
        g.log_softmax(logits)
    }

    /// `Q+({x, y})`.
    pub fn score(&self, context: &[Vec<Token>], response: &[Token]) -> Result<f64> {
        let mut g = Graph::inference(&self.params);
        let lp = self.log_probs(&mut g, context, response)?;
        Ok(g.value(lp)[HUMAN].exp())
    }

    /// Cross-entropy node for a labelled episode.
    pub fn loss(
        &self,
        g: &mut Graph<'_>,
        context: &[Vec<Token>],
        response: &[Token],
        label: usize,
    ) -> Result<Var> {
        let lp = self.log_probs(g, context, response)?;
        let picked = g.pick(lp, label)?;
        Ok(g.scale(picked, -1.0))
    }

    pub fn representation(&self, context: &[Vec<Token>], response: &[Token]) -> Result<Vec<f64>> {
        let mut g = Graph::inference(&self.params);
        let h = self.features(&mut g, context, response)?;
        Ok(g.value(h).to_vec())
    }
}

/// Value baseline `b(x, y_prefix)` with a hierarchical encoder.
#[derive(Clone, Debug)]
pub struct Critic {
    pub params: ParamSet,
    pub dims: ModelDims,
    encoder: HierEncoder,
    head_w: ParamId,
    head_b: ParamId,
}

impl Critic {
    pub fn new(dims: ModelDims, prefix: &str, init: Init) -> Self {
        let mut params = ParamSet::new();
        let mut b = Builder::new(&mut params, prefix, init);
        let encoder = HierEncoder::build(&mut b, dims);
        let head_w = b.tensor("head.w", vec![dims.hidden]);
        let head_b = b.tensor("head.b", vec![1]);
        Self {
            params,
            dims,
            encoder,
            head_w,
            head_b,
        }
    }

    /// Value node; an empty prefix encodes the context alone.
    pub fn value_node(
        &self,
        g: &mut Graph<'_>,
        context: &[Vec<Token>],
        prefix: &[Token],
    ) -> Result<Var> {
        check_tokens(prefix, self.dims.vocab)?;
        for u in context {
            check_tokens(u, self.dims.vocab)?;
        }
        let h = self.encoder.encode(g, &episode(context, prefix))?;
        let (w, b) = (g.param(self.head_w), g.param(self.head_b));
        let d = g.dot(w, h)?;
        g.add(d, b)
    }

    pub fn value(&self, context: &[Vec<Token>], prefix: &[Token]) -> Result<f64> {
        let mut g = Graph::inference(&self.params);
        let v = self.value_node(&mut g, context, prefix)?;
        Ok(g.scalar_value(v))
    }
}

/// Unconditional recurrent language model `p(y)`.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub params: ParamSet,
    pub dims: ModelDims,
    emb: ParamId,
    cell: GruLayer,
    out_w: ParamId,
    out_b: ParamId,
}

impl LanguageModel {
    pub fn new(dims: ModelDims, prefix: &str, init: Init) -> Self {
        let mut params = ParamSet::new();
        let mut b = Builder::new(&mut params, prefix, init);
        let emb = b.tensor("emb", vec![dims.vocab, dims.embed]);
        let cell = b.gru("cell", dims.embed, dims.hidden);
        let out_w = b.tensor("out.w", vec![dims.vocab, dims.hidden]);
        let out_b = b.tensor("out.b", vec![dims.vocab]);
        Self {
            params,
            dims,
            emb,
            cell,
            out_w,
            out_b,
        }
    }

    pub fn begin(&self, g: &mut Graph<'_>) -> Var {
        g.zeros(self.dims.hidden)
    }

    pub fn advance(&self, g: &mut Graph<'_>, hidden: &mut Var, prev: Token) -> Result<Var> {
        check_tokens(&[prev], self.dims.vocab)?;
        let emb = g.param(self.emb);
        let x = g.row(emb, prev)?;
        *hidden = self.cell.step(g, x, *hidden)?;
        let (w, b) = (g.param(self.out_w), g.param(self.out_b));
        let logits = g.matvec(w, *hidden)?;
        let logits = g.add(logits, b)?;
        g.log_softmax(logits)
    }

    pub fn token_log_probs(&self, g: &mut Graph<'_>, y: &[Token]) -> Result<Vec<Var>> {
        check_tokens(y, self.dims.vocab)?;
        let mut h = self.begin(g);
        let mut prev = BOS;
        let mut out = Vec::with_capacity(y.len());
        for &t in y {
            let lp = self.advance(g, &mut h, prev)?;
            out.push(g.pick(lp, t)?);
            prev = t;
        }
        Ok(out)
    }

    /// `log p(y)`; the empty sequence has log-probability 0.
    pub fn log_prob(&self, y: &[Token]) -> Result<f64> {
        let mut g = Graph::inference(&self.params);
        let lps = self.token_log_probs(&mut g, y)?;
        Ok(lps.iter().map(|&v| g.scalar_value(v)).sum())
    }

    pub fn nll(&self, g: &mut Graph<'_>, y: &[Token]) -> Result<Var> {
        let lps = self.token_log_probs(g, y)?;
        let cat = g.concat(&lps)?;
        let s = g.sum(cat);
        Ok(g.scale(s, -1.0))
    }
}

/// Next-token log-probabilities from a plain logit slice.
pub fn log_probs_from_logits(logits: &[f64]) -> Result<Vec<f64>> {
    log_softmax(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_check_coords, ParamId};
    use crate::rng::seeded;
    use rand::Rng;

    fn tiny() -> ModelDims {
        ModelDims {
            vocab: 7,
            embed: 3,
            hidden: 4,
        }
    }

    fn sample_coords(params: &ParamSet, n: usize, seed: u64) -> Vec<(ParamId, usize)> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|_| {
                let id = ParamId(rng.gen_range(0..params.len()));
                (id, rng.gen_range(0..params.get(id).len()))
            })
            .collect()
    }

    #[test]
    fn zero_generator_is_uniform() {
        let g = Generator::new(ModelDims::new(11), "gen.", Init::Zeros);
        let lp = g.log_prob(&[4, 5, 6], &[7, 8, EOS]).unwrap();
        for l in lp {
            assert!((l + 11f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn log_prob_matches_sequence_nll() {
        let g = Generator::new(
            tiny(),
            "gen.",
            Init::Uniform {
                range: 0.5,
                seed: 3,
            },
        );
        let (ctx, y) = (vec![4, 5], vec![6, 4, EOS]);
        let lp: f64 = g.log_prob(&ctx, &y).unwrap().iter().sum();
        let probs = g.stepwise_probs(&ctx, &y).unwrap();
        let nll = crate::autodiff::sequence_nll(&probs, &y).unwrap();
        assert!((lp + nll).abs() < 1e-10);
    }

    #[test]
    fn generator_rejects_out_of_vocab() {
        let g = Generator::new(tiny(), "gen.", Init::Zeros);
        assert!(matches!(
            g.log_prob(&[4], &[9, EOS]),
            Err(Error::TokenOutOfVocab { id: 9, .. })
        ));
    }

    #[test]
    fn zero_discriminator_and_critic() {
        let d = Discriminator::new(ModelDims::new(9), "disc.", Init::Zeros);
        assert_eq!(d.score(&[vec![4, 5]], &[6, 7]).unwrap(), 0.5);
        assert_eq!(d.score(&[], &[6]).unwrap(), 0.5);
        assert!(matches!(
            d.score(&[vec![4]], &[]),
            Err(Error::EmptyResponse)
        ));
        let c = Critic::new(ModelDims::new(9), "critic.", Init::Zeros);
        assert_eq!(c.value(&[vec![4, 5]], &[]).unwrap(), 0.0);
        assert_eq!(c.value(&[vec![4, 5]], &[6, 7, 8]).unwrap(), 0.0);
    }

    #[test]
    fn discriminator_probabilities_are_complementary() {
        let d = Discriminator::new(
            tiny(),
            "disc.",
            Init::Uniform {
                range: 1.0,
                seed: 5,
            },
        );
        let mut g = Graph::inference(&d.params);
        let lp = d.log_probs(&mut g, &[vec![4, 5]], &[6]).unwrap();
        let p: Vec<f64> = g.value(lp).iter().map(|l| l.exp()).collect();
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        assert!(p[1] > 0.0 && p[1] < 1.0);
    }

    #[test]
    fn zero_language_model() {
        let lm = LanguageModel::new(ModelDims::new(13), "lm.", Init::Zeros);
        let lp = lm.log_prob(&[4, 5, 6, EOS]).unwrap();
        assert!((lp + 4.0 * 13f64.ln()).abs() < 1e-12);
        assert_eq!(lm.log_prob(&[]).unwrap(), 0.0);
    }

    #[test]
    fn context_order_changes_hierarchical_encoding() {
        for seed in 0..20 {
            let d = Discriminator::new(tiny(), "disc.", Init::Uniform { range: 0.5, seed });
            let a = d.representation(&[vec![4, 5], vec![6]], &[5, 4]).unwrap();
            let b = d.representation(&[vec![6], vec![4, 5]], &[5, 4]).unwrap();
            assert_ne!(a, b, "seed {seed}");
        }
    }

    #[test]
    fn generator_log_prob_is_independent_of_other_examples() {
        let g = Generator::new(
            tiny(),
            "gen.",
            Init::Uniform {
                range: 0.3,
                seed: 2,
            },
        );
        let alone = g.log_prob(&[4, 5], &[6, EOS]).unwrap();
        let mut graph = Graph::inference(&g.params);
        g.token_log_probs(&mut graph, &[6, 6, 6], &[4, 4, EOS])
            .unwrap();
        let vars = g.token_log_probs(&mut graph, &[4, 5], &[6, EOS]).unwrap();
        for (a, v) in alone.iter().zip(vars) {
            assert!((a - graph.scalar_value(v)).abs() <= 1e-10);
        }
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        for seed in 0..5 {
            let init = Init::Uniform { range: 0.5, seed };
            let gen = Generator::new(tiny(), "gen.", init);
            let coords = sample_coords(&gen.params, 40, seed);
            let err = finite_difference_check_coords(&gen.params, 1e-4, &coords, |g| {
                gen.nll(g, &[4, 5, 6], &[5, 6, EOS])
            })
            .unwrap();
            assert!(err <= 1e-4, "generator {err}");

            let disc = Discriminator::new(tiny(), "disc.", init);
            let coords = sample_coords(&disc.params, 40, seed);
            let err = finite_difference_check_coords(&disc.params, 1e-4, &coords, |g| {
                disc.loss(g, &[vec![4, 5], vec![6]], &[5, 4], HUMAN)
            })
            .unwrap();
            assert!(err <= 1e-4, "discriminator {err}");

            let critic = Critic::new(tiny(), "critic.", init);
            let coords = sample_coords(&critic.params, 40, seed);
            let err = finite_difference_check_coords(&critic.params, 1e-4, &coords, |g| {
                let v = critic.value_node(g, &[vec![4, 5]], &[6])?;
                let d = g.affine(v, 1.0, -0.7);
                Ok(g.square(d))
            })
            .unwrap();
            assert!(err <= 1e-4, "critic {err}");
        }
    }
}
