//! The joint embedding/alignment model.
//!
//! Generative side: every L1 position i carries a latent embedding z_i with a
//! standard normal prior; x_i is drawn from softmax(W1 z_i + b1) and every L2
//! word y_j picks a position a_j uniformly from the m L1 positions (NULL
//! included) and is drawn from softmax(W2 z_{a_j} + b2).
//!
//! Inference side: an encoder (bag-of-words lookup or a BiLSTM) produces h_i,
//! and two affine heads give the diagonal Gaussian q(z_i | x) with
//! loc = M1 h_i + d1 and scale = softplus(M2 h_i + d2).
//!
//! Training heads can be normalised with complementary sum sampling (CSS):
//! the softmax normaliser is summed exactly over a class set C and estimated
//! on sampled negatives N with weight κ. The CSS class embeddings and biases
//! are the rows of W1/W2 and entries of b1/b2, so training and evaluation
//! share weights.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, Gradients, ParamStore, Tape, Tensor, TensorError, Var};
use crate::corpus::{CssSupport, SentencePair, Side};
use crate::gaussian::GaussianPosterior;
use crate::hiermodel;
use crate::parallel::{self, Execution};
use crate::rng::{self, Rng};
use crate::training::glorot_with;

/// Parameter names in the store.
pub mod names {
    pub const W1: &str = "gen.w1";
    pub const B1: &str = "gen.b1";
    pub const W2: &str = "gen.w2";
    pub const B2: &str = "gen.b2";
    pub const EMB: &str = "inf.emb";
    pub const M1: &str = "inf.m1";
    pub const D1: &str = "inf.d1";
    pub const M2: &str = "inf.m2";
    pub const D2: &str = "inf.d2";
    pub const FWD: &str = "inf.fwd";
    pub const BWD: &str = "inf.bwd";
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{side:?} token id {id} is outside a vocabulary of {size}")]
    Vocabulary { side: Side, id: usize, size: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("parameter `{name}`: {detail}")]
    Parameter { name: String, detail: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Bow,
    Birnn,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    /// Latent dimension d.
    pub latent_dim: usize,
    /// Deterministic embedding width d_x (also the LSTM width).
    pub embed_dim: usize,
    /// Adds the sentence-level latent variable.
    pub hierarchical: bool,
    /// Sentence latent dimension d_s.
    pub sentence_dim: usize,
    pub l1_vocab_size: usize,
    pub l2_vocab_size: usize,
}

impl ModelConfig {
    pub fn new(l1_vocab_size: usize, l2_vocab_size: usize) -> Self {
        Self {
            encoder: EncoderKind::Bow,
            latent_dim: 100,
            embed_dim: 128,
            hierarchical: false,
            sentence_dim: 16,
            l1_vocab_size,
            l2_vocab_size,
        }
    }

    /// Every trainable tensor with its shape; `true` marks matrices that get
    /// Glorot initialisation (vectors start at zero).
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, dx, vx, vy) = (self.latent_dim, self.embed_dim, self.l1_vocab_size, self.l2_vocab_size);
        let mut out: Vec<(String, Vec<usize>)> = vec![
            (names::W1.into(), vec![vx, d]),
            (names::B1.into(), vec![vx]),
            (names::W2.into(), vec![vy, d]),
            (names::B2.into(), vec![vy]),
            (names::EMB.into(), vec![vx, dx]),
            (names::M1.into(), vec![d, dx]),
            (names::D1.into(), vec![d]),
            (names::M2.into(), vec![d, dx]),
            (names::D2.into(), vec![d]),
        ];
        if self.encoder == EncoderKind::Birnn {
            for dir in [names::FWD, names::BWD] {
                out.extend(lstm_shapes(dir, dx, dx));
            }
        }
        if self.hierarchical {
            out.extend(hiermodel::parameter_shapes(self));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("latent_dim", self.latent_dim),
            ("embed_dim", self.embed_dim),
            ("sentence_dim", self.sentence_dim),
            ("l1_vocab_size", self.l1_vocab_size),
            ("l2_vocab_size", self.l2_vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::Contract(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

pub(crate) fn lstm_shapes(prefix: &str, input: usize, hidden: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        (format!("{prefix}.w_ih"), vec![4 * hidden, input]),
        (format!("{prefix}.w_hh"), vec![4 * hidden, hidden]),
        (format!("{prefix}.b"), vec![4 * hidden]),
    ]
}

/// Model configuration plus every trainable weight.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedAlign {
    config: ModelConfig,
    params: ParamStore,
}

impl EmbedAlign {
    /// Glorot-uniform matrices, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in config.parameter_shapes() {
            let t = if shape.len() == 2 {
                let mut rng = rng::rng_for(seed, &name, 0);
                glorot_with(&shape, &mut rng).expect("2-d shape")
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in config.parameter_shapes() {
            params.insert(name, Tensor::zeros(&shape));
        }
        Ok(Self { config, params })
    }

    /// Checks that `params` holds exactly the tensors `config` requires.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        for (name, shape) in &expected {
            match params.get(name) {
                None => {
                    return Err(ModelError::Parameter { name: name.clone(), detail: "missing".into() })
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(ModelError::Parameter {
                        name: name.clone(),
                        detail: format!("shape {:?}, expected {shape:?}", t.shape()),
                    })
                }
                Some(_) => {}
            }
        }
        if params.len() != expected.len() {
            let extra = params
                .names()
                .find(|n| !expected.iter().any(|(e, _)| e == n))
                .unwrap_or_default()
                .to_string();
            return Err(ModelError::Parameter { name: extra, detail: "not used by this configuration".into() });
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub(crate) fn check_pair(&self, pair: &SentencePair) -> Result<()> {
        check_ids(Side::L1, &pair.x, self.config.l1_vocab_size)?;
        check_ids(Side::L2, &pair.y, self.config.l2_vocab_size)
    }

    /// Posterior q(z | x) for an L1 sequence. In the hierarchical model the
    /// word posteriors are conditioned on the sentence posterior mean.
    pub fn posterior(&self, x: &[usize]) -> Result<GaussianPosterior> {
        check_ids(Side::L1, x, self.config.l1_vocab_size)?;
        let mut tape = Tape::new(&self.params);
        let post = if self.config.hierarchical {
            hiermodel::word_posterior_at_sentence_mean(&mut tape, &self.config, x)?
        } else {
            let h = encode(&mut tape, &self.config, x)?;
            infer_posterior(&mut tape, h)?
        };
        Ok(GaussianPosterior { loc: tape.value(post.loc).clone(), scale: tape.value(post.scale).clone() })
    }

    /// Draws unit-normal noise shaped for `pair` and this configuration.
    pub fn sample_noise(&self, pair: &SentencePair, rng: &mut Rng) -> Noise {
        Noise::sample(rng, pair.m(), &self.config)
    }

    /// Single-sample ELBO (hierarchical when configured).
    pub fn elbo(&self, pair: &SentencePair, alpha: f64, noise: &Noise, css: Option<CssPair<'_>>) -> Result<f64> {
        self.check_pair(pair)?;
        let mut tape = Tape::new(&self.params);
        let root = objective(&mut tape, &self.config, pair, alpha, noise, css)?;
        Ok(tape.value(root).item())
    }

    pub fn elbo_and_gradients(
        &self,
        pair: &SentencePair,
        alpha: f64,
        noise: &Noise,
        css: Option<CssPair<'_>>,
    ) -> Result<(f64, Gradients)> {
        self.check_pair(pair)?;
        let mut tape = Tape::new(&self.params);
        let root = objective(&mut tape, &self.config, pair, alpha, noise, css)?;
        let grads = tape.backward(root)?;
        Ok((tape.value(root).item(), grads))
    }

    /// log P(x_i | z_i) for a single position, exact or CSS-normalised.
    pub fn l1_log_prob(&self, z: &[f64], x_i: usize, css: Option<&CssSupport>) -> Result<f64> {
        check_ids(Side::L1, &[x_i], self.config.l1_vocab_size)?;
        let mut tape = Tape::new(&self.params);
        let zv = tape.constant(Tensor::matrix(1, z.len(), z.to_vec())?);
        let lp = l1_log_probs(&mut tape, zv, &[x_i], css, None)?;
        Ok(tape.value(lp).item())
    }

    /// log of the CSS normaliser for one latent vector on the given head.
    pub fn css_log_normalizer(&self, z: &[f64], css: &CssSupport) -> Result<f64> {
        let (w, b) = head_names(css.side());
        let mut tape = Tape::new(&self.params);
        let zv = tape.constant(Tensor::matrix(1, z.len(), z.to_vec())?);
        let (_, lse) = css_scores(&mut tape, zv, w, b, css, None)?;
        Ok(tape.value(lse).item())
    }

    /// log Σ_i (1/m) P(y_j | z_i) for latent rows `z` `[m, d]`.
    pub fn l2_log_marginal(&self, z: &Tensor, y_j: usize, css: Option<&CssSupport>) -> Result<f64> {
        check_ids(Side::L2, &[y_j], self.config.l2_vocab_size)?;
        let mut tape = Tape::new(&self.params);
        let zv = tape.constant(z.clone());
        let lm = l2_log_marginals(&mut tape, zv, &[y_j], css)?;
        Ok(tape.value(lm).item())
    }

    /// Exact L2 log-probabilities `[m][v_y]` for each row of `z`.
    pub fn l2_log_prob_table(&self, z: &Tensor) -> Vec<Vec<f64>> {
        head_log_prob_table(&self.params, names::W2, names::B2, z)
    }

    /// Monte Carlo estimate of log P(x, y) under the prior (see [`exact_log_marginal`]).
    pub fn exact_log_marginal(&self, pair: &SentencePair, draws: usize, seed: u64, exec: Execution) -> Result<MarginalEstimate> {
        self.check_pair(pair)?;
        if self.config.hierarchical {
            return Ok(hiermodel::exact_log_marginal(self, pair, draws, seed, exec));
        }
        Ok(exact_log_marginal(&self.params, self.config.latent_dim, pair, draws, seed, exec))
    }
}

pub(crate) fn check_ids(side: Side, ids: &[usize], size: usize) -> Result<()> {
    match ids.iter().find(|&&id| id >= size) {
        Some(&id) => Err(ModelError::Vocabulary { side, id, size }),
        None => Ok(()),
    }
}

/// CSS supports for the L1 and L2 heads of one batch.
#[derive(Clone, Copy, Debug)]
pub struct CssPair<'a> {
    pub l1: &'a CssSupport,
    pub l2: &'a CssSupport,
}

/// Unit-normal draws for one pair: `z` is `[m, d]`, `s` is `[d_s]` and only
/// used by the hierarchical model.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    pub z: Tensor,
    pub s: Option<Tensor>,
}

impl Noise {
    pub fn sample(rng: &mut Rng, m: usize, cfg: &ModelConfig) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(rng)).collect() };
        let z = Tensor::matrix(m, cfg.latent_dim, draw(m * cfg.latent_dim)).expect("positive dims");
        let s = cfg.hierarchical.then(|| Tensor::vector(draw(cfg.sentence_dim)));
        Self { z, s }
    }

    pub fn zeros(m: usize, cfg: &ModelConfig) -> Self {
        Self {
            z: Tensor::zeros(&[m, cfg.latent_dim]),
            s: cfg.hierarchical.then(|| Tensor::zeros(&[cfg.sentence_dim])),
        }
    }
}

/// Posterior parameters on a tape, both `[m, d]`.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars {
    pub loc: Var,
    pub scale: Var,
}

pub fn encode(tape: &mut Tape, cfg: &ModelConfig, x: &[usize]) -> Result<Var> {
    match cfg.encoder {
        EncoderKind::Bow => encode_bow(tape, cfg, x),
        EncoderKind::Birnn => encode_birnn(tape, cfg, x),
    }
}

/// h_i = row x_i of the embedding table; `[m, d_x]`.
pub fn encode_bow(tape: &mut Tape, cfg: &ModelConfig, x: &[usize]) -> Result<Var> {
    check_ids(Side::L1, x, cfg.l1_vocab_size)?;
    let emb = tape.param(names::EMB)?;
    Ok(tape.gather_rows(emb, x)?)
}

/// Hidden states of one LSTM over the rows of `inputs`, in processing order.
pub(crate) fn lstm(tape: &mut Tape, prefix: &str, inputs: &[Var], hidden: usize) -> Result<Vec<Var>> {
    let w_ih = tape.param(&format!("{prefix}.w_ih"))?;
    let w_hh = tape.param(&format!("{prefix}.w_hh"))?;
    let b = tape.param(&format!("{prefix}.b"))?;
    let zero_gates = tape.constant(Tensor::zeros(&[4 * hidden]));
    let mut h = tape.constant(Tensor::zeros(&[hidden]));
    let mut c = tape.constant(Tensor::zeros(&[hidden]));
    let mut out = Vec::with_capacity(inputs.len());
    for &x_t in inputs {
        let from_input = tape.affine(w_ih, x_t, b)?;
        let from_state = tape.affine(w_hh, h, zero_gates)?;
        let pre = tape.add(from_input, from_state)?;
        let i_pre = tape.slice(pre, 0, hidden)?;
        let f_pre = tape.slice(pre, hidden, hidden)?;
        let g_pre = tape.slice(pre, 2 * hidden, hidden)?;
        let o_pre = tape.slice(pre, 3 * hidden, hidden)?;
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        c = tape.add(keep, write)?;
        let squashed = tape.tanh(c);
        h = tape.mul(o, squashed)?;
        out.push(h);
    }
    Ok(out)
}

/// h_i = forward-LSTM state at i + backward-LSTM state at i; `[m, d_x]`.
pub fn encode_birnn(tape: &mut Tape, cfg: &ModelConfig, x: &[usize]) -> Result<Var> {
    let table = encode_bow(tape, cfg, x)?;
    let rows: Vec<Var> = (0..x.len()).map(|i| tape.row(table, i)).collect::<autodiff::Result<_>>()?;
    let fwd = lstm(tape, names::FWD, &rows, cfg.embed_dim)?;
    let reversed: Vec<Var> = rows.iter().rev().copied().collect();
    let mut bwd = lstm(tape, names::BWD, &reversed, cfg.embed_dim)?;
    bwd.reverse();
    let summed: Vec<Var> = fwd
        .iter()
        .zip(&bwd)
        .map(|(&a, &b)| tape.add(a, b))
        .collect::<autodiff::Result<_>>()?;
    Ok(tape.stack_rows(&summed)?)
}

/// loc = M1 h + d1, scale = softplus(M2 h + d2).
pub fn infer_posterior(tape: &mut Tape, h: Var) -> Result<PosteriorVars> {
    let (m1, d1) = (tape.param(names::M1)?, tape.param(names::D1)?);
    let (m2, d2) = (tape.param(names::M2)?, tape.param(names::D2)?);
    let loc = tape.linear(h, m1, Some(d1))?;
    let pre = tape.linear(h, m2, Some(d2))?;
    let scale = tape.softplus(pre);
    Ok(PosteriorVars { loc, scale })
}

/// z = loc + scale ⊙ ε.
pub fn reparam_sample(tape: &mut Tape, post: PosteriorVars, noise: &Tensor) -> Result<Var> {
    let eps = tape.constant(noise.clone());
    let spread = tape.mul(post.scale, eps)?;
    Ok(tape.add(post.loc, spread)?)
}

pub(crate) fn head_names(side: Side) -> (&'static str, &'static str) {
    match side {
        Side::L1 => (names::W1, names::B1),
        Side::L2 => (names::W2, names::B2),
    }
}

/// Scores u(z, c) = z·w_c + b_c (+ extra_c) over the CSS classes and the
/// per-row log normaliser log(Σ_C e^u + κ Σ_N e^u).
fn css_scores(
    tape: &mut Tape,
    z: Var,
    w: &str,
    b: &str,
    css: &CssSupport,
    extra_logits: Option<Var>,
) -> Result<(Var, Var)> {
    if css.positive().is_empty() {
        return Err(ModelError::Contract("CSS class set C is empty".into()));
    }
    let classes = css.classes();
    let (wv, bv) = (tape.param(w)?, tape.param(b)?);
    let wg = tape.gather_rows(wv, classes)?;
    let bg = tape.select(bv, classes)?;
    let mut scores = tape.linear(z, wg, Some(bg))?;
    if let Some(extra) = extra_logits {
        let picked = tape.select(extra, classes)?;
        scores = tape.add_row_vector(scores, picked)?;
    }
    let weights = tape.constant(Tensor::vector(css.log_weights()));
    let shifted = tape.add_row_vector(scores, weights)?;
    let lse = tape.logsumexp_rows(shifted)?;
    Ok((scores, lse))
}

fn css_positions(css: &CssSupport, ids: &[usize]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|&id| {
            css.positive_position(id).ok_or_else(|| {
                ModelError::Contract(format!("{:?} class {id} is not in the CSS class set C", css.side()))
            })
        })
        .collect()
}

/// log P(x_i | z_i) for each row i of `z` `[m, d]`; `[m]`.
///
/// `extra_logits` is a `[v_x]` vector added to every row's logits (used by
/// the hierarchical model for the sentence contribution).
pub fn l1_log_probs(
    tape: &mut Tape,
    z: Var,
    x: &[usize],
    css: Option<&CssSupport>,
    extra_logits: Option<Var>,
) -> Result<Var> {
    match css {
        None => {
            let (w, b) = (tape.param(names::W1)?, tape.param(names::B1)?);
            let mut logits = tape.linear(z, w, Some(b))?;
            if let Some(extra) = extra_logits {
                logits = tape.add_row_vector(logits, extra)?;
            }
            let lp = tape.log_softmax_rows(logits)?;
            Ok(tape.pick(lp, x)?)
        }
        Some(css) => {
            let pos = css_positions(css, x)?;
            let (scores, lse) = css_scores(tape, z, names::W1, names::B1, css, extra_logits)?;
            let num = tape.pick(scores, &pos)?;
            Ok(tape.sub(num, lse)?)
        }
    }
}

/// log P(y_j | z_i) as an `[m, n]` matrix.
pub fn l2_log_prob_matrix(tape: &mut Tape, z: Var, y: &[usize], css: Option<&CssSupport>) -> Result<Var> {
    match css {
        None => {
            let (w, b) = (tape.param(names::W2)?, tape.param(names::B2)?);
            let logits = tape.linear(z, w, Some(b))?;
            let lp = tape.log_softmax_rows(logits)?;
            Ok(tape.gather_cols(lp, y)?)
        }
        Some(css) => {
            let pos = css_positions(css, y)?;
            let (scores, lse) = css_scores(tape, z, names::W2, names::B2, css, None)?;
            let picked = tape.gather_cols(scores, &pos)?;
            Ok(tape.sub_col_vector(picked, lse)?)
        }
    }
}

/// log Σ_i (1/m) P(y_j | z_i) for every j; `[n]`.
pub fn l2_log_marginals(tape: &mut Tape, z: Var, y: &[usize], css: Option<&CssSupport>) -> Result<Var> {
    let m = tape.shape(z)[0];
    let table = l2_log_prob_matrix(tape, z, y, css)?;
    let by_target = tape.transpose(table)?;
    let lse = tape.logsumexp_rows(by_target)?;
    Ok(tape.add_scalar(lse, -(m as f64).ln()))
}

/// Per-row KL[N(loc, scale²) ‖ N(prior_mean, I)]; `[m]`. Without a prior
/// mean this is the KL to the standard normal.
pub fn kl_rows(tape: &mut Tape, post: PosteriorVars, prior_mean: Option<Var>) -> Result<Var> {
    let diff = match prior_mean {
        Some(mu) => {
            let neg = tape.scale(mu, -1.0);
            tape.add_row_vector(post.loc, neg)?
        }
        None => post.loc,
    };
    let sq_diff = tape.square(diff);
    let sq_scale = tape.square(post.scale);
    let spread = tape.add(sq_scale, sq_diff)?;
    let half = tape.scale(spread, 0.5);
    let log_scale = tape.log(post.scale)?;
    let terms = tape.sub(half, log_scale)?;
    let terms = tape.add_scalar(terms, -0.5);
    Ok(tape.sum_cols(terms)?)
}

/// Σ_i log P(x_i|z_i) + Σ_j log Σ_i (1/m) P(y_j|z_i) − α Σ_i KL_i with one
/// reparameterised sample shared by every term.
pub fn elbo(
    tape: &mut Tape,
    cfg: &ModelConfig,
    pair: &SentencePair,
    alpha: f64,
    noise: &Noise,
    css: Option<CssPair<'_>>,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ModelError::Contract(format!("annealing weight {alpha} outside [0, 1]")));
    }
    let h = encode(tape, cfg, &pair.x)?;
    let post = infer_posterior(tape, h)?;
    let z = reparam_sample(tape, post, &noise.z)?;
    let l1 = l1_log_probs(tape, z, &pair.x, css.map(|c| c.l1), None)?;
    let l1 = tape.sum(l1);
    let mut total = l1;
    if !pair.y.is_empty() {
        let l2 = l2_log_marginals(tape, z, &pair.y, css.map(|c| c.l2))?;
        let l2 = tape.sum(l2);
        total = tape.add(total, l2)?;
    }
    if alpha > 0.0 {
        let kl = kl_rows(tape, post, None)?;
        let kl = tape.sum(kl);
        let weighted = tape.scale(kl, alpha);
        total = tape.sub(total, weighted)?;
    }
    Ok(total)
}

/// The training objective for `cfg`: [`elbo`] or the hierarchical variant.
pub fn objective(
    tape: &mut Tape,
    cfg: &ModelConfig,
    pair: &SentencePair,
    alpha: f64,
    noise: &Noise,
    css: Option<CssPair<'_>>,
) -> Result<Var> {
    if cfg.hierarchical {
        hiermodel::elbo_s(tape, cfg, pair, alpha, noise, css)
    } else {
        elbo(tape, cfg, pair, alpha, noise, css)
    }
}

/// Exact log-softmax of `W z + b` for every row of `z`, without a tape.
pub(crate) fn head_log_prob_table(params: &ParamStore, w: &str, b: &str, z: &Tensor) -> Vec<Vec<f64>> {
    let (wt, bt) = (&params.get(w).expect("head weight"), &params.get(b).expect("head bias"));
    (0..z.rows())
        .map(|i| log_softmax_affine(wt, bt, z.row(i), None))
        .collect()
}

fn log_softmax_affine(w: &Tensor, b: &Tensor, z: &[f64], extra: Option<&[f64]>) -> Vec<f64> {
    let d = w.cols();
    let mut logits: Vec<f64> = (0..w.rows())
        .map(|c| {
            let row = &w.data()[c * d..(c + 1) * d];
            row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + b.data()[c]
        })
        .collect();
    if let Some(extra) = extra {
        logits.iter_mut().zip(extra).for_each(|(l, e)| *l += e);
    }
    let lse = autodiff::logsumexp_slice(&logits);
    logits.iter_mut().for_each(|l| *l -= lse);
    logits
}

/// Log joint likelihood log P(x, y | z) for fixed latent rows, computed
/// directly in probability space per L2 word. `l1_extra` is added to the L1
/// logits of every row.
pub(crate) fn log_joint(params: &ParamStore, pair: &SentencePair, z: &[Vec<f64>], l1_extra: Option<&[f64]>) -> f64 {
    let (w1, b1) = (params.get(names::W1).unwrap(), params.get(names::B1).unwrap());
    let (w2, b2) = (params.get(names::W2).unwrap(), params.get(names::B2).unwrap());
    let m = pair.m() as f64;
    let mut total = 0.0;
    let mut l2_tables = Vec::with_capacity(z.len());
    for (i, zi) in z.iter().enumerate() {
        total += log_softmax_affine(w1, b1, zi, l1_extra)[pair.x[i]];
        l2_tables.push(log_softmax_affine(w2, b2, zi, None));
    }
    for &y in &pair.y {
        let col: Vec<f64> = l2_tables.iter().map(|t| t[y]).collect();
        total += autodiff::logsumexp_slice(&col) - m.ln();
    }
    total
}

/// Log of a Monte Carlo average of likelihoods with its delta-method standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginalEstimate {
    pub log_estimate: f64,
    pub std_err: f64,
}

/// Combines per-draw log-likelihoods `l_k` into log((1/K) Σ e^{l_k}) and the
/// standard error of that log estimate, sd(w) / (√K · mean(w)).
pub fn log_mean_exp(values: &[f64]) -> MarginalEstimate {
    let k = values.len() as f64;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let mean = w.iter().sum::<f64>() / k;
    let var = if values.len() > 1 {
        w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    MarginalEstimate { log_estimate: max + mean.ln(), std_err: var.sqrt() / (k.sqrt() * mean) }
}

const ORACLE_CHUNK: usize = 4096;

/// Estimates log P(x, y) = log ∫ p(z) P(x, y | z) dz by sampling z from the
/// standard normal prior. Draws are generated in fixed-size chunks with
/// per-chunk seeds, so the result does not depend on the execution mode.
pub fn exact_log_marginal(
    params: &ParamStore,
    latent_dim: usize,
    pair: &SentencePair,
    draws: usize,
    seed: u64,
    exec: Execution,
) -> MarginalEstimate {
    use rand_distr::{Distribution, StandardNormal};
    let chunks = draws.div_ceil(ORACLE_CHUNK);
    let parts = parallel::map_range(exec, chunks, |c| {
        let mut rng = rng::rng_for(seed, "marginal-oracle", c as u64);
        let count = ORACLE_CHUNK.min(draws - c * ORACLE_CHUNK);
        (0..count)
            .map(|_| {
                let z: Vec<Vec<f64>> = (0..pair.m())
                    .map(|_| (0..latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
                    .collect();
                log_joint(params, pair, &z, None)
            })
            .collect::<Vec<f64>>()
    });
    log_mean_exp(&parts.concat())
}

/// Unwraps the tensor error inside a model error; used where a closure must
/// return plain tape errors (gradient checks).
pub fn tensor_only(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => panic!("unexpected model error: {other}"),
    }
}
