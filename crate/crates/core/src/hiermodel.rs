//! Sentence-level latent variable.
//!
//! Each pair gets a sentence embedding s ~ N(0, I) of size d_s. Word
//! embeddings are drawn around a mean predicted from s,
//! z_i | s ~ N(h(s), I) with h(s) = P2 tanh(P1 s + c1) + c2, and the L1 word
//! distribution sees both s and z_i.
//!
//! q(s | x) mean-pools the word embedding table over the sentence and applies
//! two affine heads. q(z_i | s, x) reuses the base posterior heads over h_i
//! plus an extra block over s. Concatenated inputs are implemented as split
//! weight blocks: `[M ; M_s] [h ; s] = M h + M_s s`. The s-block is added after
//! the base affine map, so zero s-blocks leave the base arithmetic untouched.

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::corpus::SentencePair;
use crate::model::{self, names as base, CssPair, EmbedAlign, MarginalEstimate, ModelConfig, ModelError, Noise, PosteriorVars, Result};
use crate::parallel::{self, Execution};
use crate::rng;

pub mod names {
    pub const SENT_MU: &str = "sent.mu";
    pub const SENT_DU: &str = "sent.du";
    pub const SENT_MS: &str = "sent.ms";
    pub const SENT_DS: &str = "sent.ds";
    pub const PRIOR_W1: &str = "prior.w1";
    pub const PRIOR_B1: &str = "prior.b1";
    pub const PRIOR_W2: &str = "prior.w2";
    pub const PRIOR_B2: &str = "prior.b2";
    pub const M1_S: &str = "inf.m1_s";
    pub const M2_S: &str = "inf.m2_s";
    pub const W1_S: &str = "gen.w1_s";
}

/// softplus⁻¹(1) = ln(e − 1). A sentence-scale bias with this value and zero
/// weights gives q(s | x) = N(0, I) exactly.
pub const UNIT_SCALE_BIAS: f64 = 0.541_324_854_612_918_1;

pub(crate) fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, ds, dx, vx) = (cfg.latent_dim, cfg.sentence_dim, cfg.embed_dim, cfg.l1_vocab_size);
    vec![
        (names::SENT_MU.into(), vec![ds, dx]),
        (names::SENT_DU.into(), vec![ds]),
        (names::SENT_MS.into(), vec![ds, dx]),
        (names::SENT_DS.into(), vec![ds]),
        (names::PRIOR_W1.into(), vec![ds, ds]),
        (names::PRIOR_B1.into(), vec![ds]),
        (names::PRIOR_W2.into(), vec![d, ds]),
        (names::PRIOR_B2.into(), vec![d]),
        (names::M1_S.into(), vec![d, ds]),
        (names::M2_S.into(), vec![d, ds]),
        (names::W1_S.into(), vec![vx, ds]),
    ]
}

/// Zeroes every sentence pathway of a hierarchical model and sets the
/// sentence scale to exactly one, so that `elbo_s` coincides with the base
/// ELBO for the same word noise.
pub fn zero_sentence_pathways(model: &mut EmbedAlign) -> Result<()> {
    if !model.config().hierarchical {
        return Err(ModelError::Contract("model has no sentence latent".into()));
    }
    let shapes = parameter_shapes(model.config());
    let params = model.params_mut();
    for (name, shape) in shapes {
        let fill = if name == names::SENT_DS { UNIT_SCALE_BIAS } else { 0.0 };
        params.insert(name, Tensor::filled(&shape, fill));
    }
    Ok(())
}

/// Copies a base model into a hierarchical one with zeroed sentence pathways.
pub fn extend_base(base_model: &EmbedAlign, sentence_dim: usize) -> Result<EmbedAlign> {
    let cfg = ModelConfig { hierarchical: true, sentence_dim, ..base_model.config().clone() };
    let mut params: ParamStore = base_model.params().clone();
    for (name, shape) in parameter_shapes(&cfg) {
        params.insert(name, Tensor::zeros(&shape));
    }
    let mut out = EmbedAlign::from_parts(cfg, params)?;
    zero_sentence_pathways(&mut out)?;
    Ok(out)
}

/// q(s | x): loc and scale, both `[d_s]`.
pub fn infer_sentence_posterior(tape: &mut Tape, cfg: &ModelConfig, x: &[usize]) -> Result<PosteriorVars> {
    if x.is_empty() {
        return Err(ModelError::Contract("empty sentence".into()));
    }
    let table = model::encode_bow(tape, cfg, x)?;
    let pooled = tape.mean_rows(table)?;
    let (mu, du) = (tape.param(names::SENT_MU)?, tape.param(names::SENT_DU)?);
    let (ms, ds) = (tape.param(names::SENT_MS)?, tape.param(names::SENT_DS)?);
    let loc = tape.affine(mu, pooled, du)?;
    let pre = tape.affine(ms, pooled, ds)?;
    let scale = tape.softplus(pre);
    Ok(PosteriorVars { loc, scale })
}

/// `w · s` for a weight block `[r, d_s]`; `[r]`.
fn s_block(tape: &mut Tape, name: &str, s: Var) -> Result<Var> {
    let w = tape.param(name)?;
    let rows = tape.shape(w)[0];
    let zero = tape.constant(Tensor::zeros(&[rows]));
    Ok(tape.affine(w, s, zero)?)
}

/// q(z_i | s, x): the base heads over h_i plus the s-blocks.
pub fn infer_word_posterior_conditioned(tape: &mut Tape, s: Var, h: Var) -> Result<PosteriorVars> {
    let (m1, d1) = (tape.param(base::M1)?, tape.param(base::D1)?);
    let (m2, d2) = (tape.param(base::M2)?, tape.param(base::D2)?);
    let loc = tape.linear(h, m1, Some(d1))?;
    let loc_s = s_block(tape, names::M1_S, s)?;
    let loc = tape.add_row_vector(loc, loc_s)?;
    let pre = tape.linear(h, m2, Some(d2))?;
    let pre_s = s_block(tape, names::M2_S, s)?;
    let pre = tape.add_row_vector(pre, pre_s)?;
    let scale = tape.softplus(pre);
    Ok(PosteriorVars { loc, scale })
}

/// h(s) = P2 tanh(P1 s + c1) + c2; `[d]`.
pub fn prior_mean(tape: &mut Tape, s: Var) -> Result<Var> {
    let (w1, b1) = (tape.param(names::PRIOR_W1)?, tape.param(names::PRIOR_B1)?);
    let (w2, b2) = (tape.param(names::PRIOR_W2)?, tape.param(names::PRIOR_B2)?);
    let hidden = tape.affine(w1, s, b1)?;
    let hidden = tape.tanh(hidden);
    Ok(tape.affine(w2, hidden, b2)?)
}

/// Word posterior evaluated at the sentence posterior mean (used for
/// prediction and embedding extraction).
pub(crate) fn word_posterior_at_sentence_mean(tape: &mut Tape, cfg: &ModelConfig, x: &[usize]) -> Result<PosteriorVars> {
    let sent = infer_sentence_posterior(tape, cfg, x)?;
    let h = model::encode(tape, cfg, x)?;
    infer_word_posterior_conditioned(tape, sent.loc, h)
}

/// ELBO with the sentence latent:
/// Σ_i log P(x_i | s, z_i) + Σ_j log Σ_i (1/m) P(y_j | z_i)
/// − α Σ_i KL[q(z_i | s, x) ‖ N(h(s), I)] − α KL[q(s | x) ‖ N(0, I)],
/// using one reparameterised s and one z per position.
pub fn elbo_s(
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
    let eps_s = noise
        .s
        .as_ref()
        .ok_or_else(|| ModelError::Contract("hierarchical objective needs sentence noise".into()))?;
    let sent = infer_sentence_posterior(tape, cfg, &pair.x)?;
    let s = model::reparam_sample(tape, sent, eps_s)?;

    let h = model::encode(tape, cfg, &pair.x)?;
    let post = infer_word_posterior_conditioned(tape, s, h)?;
    let z = model::reparam_sample(tape, post, &noise.z)?;

    let l1_extra = s_block(tape, names::W1_S, s)?;
    let l1 = model::l1_log_probs(tape, z, &pair.x, css.map(|c| c.l1), Some(l1_extra))?;
    let l1 = tape.sum(l1);
    let mut total = l1;
    if !pair.y.is_empty() {
        let l2 = model::l2_log_marginals(tape, z, &pair.y, css.map(|c| c.l2))?;
        let l2 = tape.sum(l2);
        total = tape.add(total, l2)?;
    }
    if alpha > 0.0 {
        let mu = prior_mean(tape, s)?;
        let kl_z = model::kl_rows(tape, post, Some(mu))?;
        let kl_z = tape.sum(kl_z);
        let weighted = tape.scale(kl_z, alpha);
        total = tape.sub(total, weighted)?;

        let as_row = tape.stack_rows(&[sent.loc])?;
        let scale_row = tape.stack_rows(&[sent.scale])?;
        let kl_s = model::kl_rows(tape, PosteriorVars { loc: as_row, scale: scale_row }, None)?;
        let kl_s = tape.sum(kl_s);
        let weighted = tape.scale(kl_s, alpha);
        total = tape.sub(total, weighted)?;
    }
    Ok(total)
}

fn affine_plain(w: &Tensor, x: &[f64], b: Option<&Tensor>) -> Vec<f64> {
    (0..w.rows())
        .map(|r| w.row(r).iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b.map_or(0.0, |b| b.data()[r]))
        .collect()
}

const ORACLE_CHUNK: usize = 4096;

/// Monte Carlo estimate of log P(x, y) = log ∫∫ p(s) p(z | s) P(x, y | s, z)
/// by ancestral sampling from the prior.
pub fn exact_log_marginal(
    model_: &EmbedAlign,
    pair: &SentencePair,
    draws: usize,
    seed: u64,
    exec: Execution,
) -> MarginalEstimate {
    use rand_distr::{Distribution, StandardNormal};
    let cfg = model_.config();
    let p = model_.params();
    let get = |n: &str| p.get(n).expect("hierarchical parameter");
    let chunks = draws.div_ceil(ORACLE_CHUNK);
    let parts = parallel::map_range(exec, chunks, |c| {
        let mut rng = rng::rng_for(seed, "marginal-oracle-s", c as u64);
        let count = ORACLE_CHUNK.min(draws - c * ORACLE_CHUNK);
        (0..count)
            .map(|_| {
                let s: Vec<f64> = (0..cfg.sentence_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let hidden: Vec<f64> = affine_plain(get(names::PRIOR_W1), &s, Some(get(names::PRIOR_B1)))
                    .into_iter()
                    .map(f64::tanh)
                    .collect();
                let mean = affine_plain(get(names::PRIOR_W2), &hidden, Some(get(names::PRIOR_B2)));
                let z: Vec<Vec<f64>> = (0..pair.m())
                    .map(|_| mean.iter().map(|mu| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        mu + e
                    }).collect())
                    .collect();
                let extra = affine_plain(get(names::W1_S), &s, None);
                model::log_joint(p, pair, &z, Some(&extra))
            })
            .collect::<Vec<f64>>()
    });
    model::log_mean_exp(&parts.concat())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{self, softplus};
    use crate::model::EncoderKind;
    use crate::rng::Rng;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            encoder: EncoderKind::Bow,
            latent_dim: 3,
            embed_dim: 4,
            hierarchical: true,
            sentence_dim: 2,
            l1_vocab_size: 6,
            l2_vocab_size: 5,
        }
    }

    #[test]
    fn unit_scale_bias_is_exact() {
        assert_eq!(softplus(UNIT_SCALE_BIAS), 1.0);
        assert_relative_eq!(UNIT_SCALE_BIAS, (1.0_f64.exp() - 1.0).ln(), epsilon = 1e-15);
    }

    #[test]
    fn sentence_posterior_zero_and_permutation() {
        let zero = EmbedAlign::zeroed(cfg()).unwrap();
        let mut tape = Tape::new(zero.params());
        let q = infer_sentence_posterior(&mut tape, zero.config(), &[0, 2, 3]).unwrap();
        assert!(tape.value(q.loc).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(q.scale).data().iter().all(|&v| (v - std::f64::consts::LN_2).abs() < 1e-15));

        let model = EmbedAlign::new(cfg(), 4).unwrap();
        let mut tape = Tape::new(model.params());
        let a = infer_sentence_posterior(&mut tape, model.config(), &[0, 2, 3, 5]).unwrap();
        let b = infer_sentence_posterior(&mut tape, model.config(), &[5, 3, 0, 2]).unwrap();
        for (x, y) in tape.value(a.loc).data().iter().zip(tape.value(b.loc).data()) {
            assert_relative_eq!(*x, *y, max_relative = 1e-14);
        }
        assert!(tape.value(a.scale).data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn conditioned_posterior_properties() {
        let zero = EmbedAlign::zeroed(cfg()).unwrap();
        let mut tape = Tape::new(zero.params());
        let s = tape.constant(Tensor::vector(vec![0.5, -1.0]));
        let h = model::encode(&mut tape, zero.config(), &[0, 2]).unwrap();
        let q = infer_word_posterior_conditioned(&mut tape, s, h).unwrap();
        assert!(tape.value(q.loc).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(q.scale).data().iter().all(|&v| (v - std::f64::consts::LN_2).abs() < 1e-15));

        let model = EmbedAlign::new(cfg(), 4).unwrap();
        let mut tape = Tape::new(model.params());
        let h = model::encode(&mut tape, model.config(), &[0, 2]).unwrap();
        let s1 = tape.constant(Tensor::vector(vec![0.5, -1.0]));
        let s2 = tape.constant(Tensor::vector(vec![-0.5, 2.0]));
        let q1 = infer_word_posterior_conditioned(&mut tape, s1, h).unwrap();
        let q2 = infer_word_posterior_conditioned(&mut tape, s2, h).unwrap();
        assert_ne!(tape.value(q1.loc), tape.value(q2.loc));

        let mut reduced = model.clone();
        zero_sentence_pathways(&mut reduced).unwrap();
        let mut tape = Tape::new(reduced.params());
        let h = model::encode(&mut tape, reduced.config(), &[0, 2]).unwrap();
        let s = tape.constant(Tensor::vector(vec![0.5, -1.0]));
        let cond = infer_word_posterior_conditioned(&mut tape, s, h).unwrap();
        let plain = model::infer_posterior(&mut tape, h).unwrap();
        assert_eq!(tape.value(cond.loc), tape.value(plain.loc));
        assert_eq!(tape.value(cond.scale), tape.value(plain.scale));
    }

    #[test]
    fn reduction_is_bit_exact() {
        let base_cfg = ModelConfig { hierarchical: false, ..cfg() };
        let mut rng = Rng::seed_from_u64(9);
        for seed in 0..10 {
            let base_model = EmbedAlign::new(base_cfg.clone(), seed).unwrap();
            let hier = extend_base(&base_model, 2).unwrap();
            let pair = SentencePair::new(1, vec![2, 3, 5], vec![1, 4, 2]);
            let noise = hier.sample_noise(&pair, &mut rng);
            let base_noise = Noise { z: noise.z.clone(), s: None };
            for alpha in [0.0, 0.3, 1.0] {
                let a = base_model.elbo(&pair, alpha, &base_noise, None).unwrap();
                let b = hier.elbo(&pair, alpha, &noise, None).unwrap();
                assert_eq!(a.to_bits(), b.to_bits(), "alpha {alpha}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn alpha_zero_drops_both_kl_terms() {
        let model = EmbedAlign::new(cfg(), 4).unwrap();
        let pair = SentencePair::new(1, vec![2, 3], vec![1, 4]);
        let mut rng = Rng::seed_from_u64(2);
        let noise = model.sample_noise(&pair, &mut rng);
        // the prior net only enters the z KL term; fix s by zeroing its noise
        let mut fixed = noise.clone();
        fixed.s = Some(Tensor::zeros(&[2]));
        let mut only_prior = model.clone();
        only_prior.params_mut().get_mut(names::PRIOR_B2).unwrap().data_mut()[0] += 3.0;
        assert_eq!(model.elbo(&pair, 0.0, &fixed, None).unwrap(), only_prior.elbo(&pair, 0.0, &fixed, None).unwrap());
        assert_ne!(model.elbo(&pair, 0.5, &fixed, None).unwrap(), only_prior.elbo(&pair, 0.5, &fixed, None).unwrap());
    }

    #[test]
    fn elbo_s_gradient_check() {
        let model = EmbedAlign::new(cfg(), 21).unwrap();
        let pair = SentencePair::new(1, vec![2, 3, 5], vec![1, 4]);
        let mut rng = Rng::seed_from_u64(3);
        let noise = model.sample_noise(&pair, &mut rng);
        let c = model.config().clone();
        let report = autodiff::gradient_check(
            |t| elbo_s(t, &c, &pair, 0.7, &noise, None).map_err(model::tensor_only),
            model.params(),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn missing_sentence_noise_is_an_error() {
        let model = EmbedAlign::new(cfg(), 4).unwrap();
        let pair = SentencePair::new(1, vec![2], vec![1]);
        let noise = Noise { z: Tensor::zeros(&[2, 3]), s: None };
        assert!(model.elbo(&pair, 0.0, &noise, None).is_err());
    }

    #[test]
    fn oracle_reduces_to_base_oracle_shape() {
        // with zero sentence pathways the extended marginal equals the base one
        let base_cfg = ModelConfig { hierarchical: false, ..cfg() };
        let zero = EmbedAlign::zeroed(base_cfg).unwrap();
        let hier = extend_base(&zero, 2).unwrap();
        let pair = SentencePair::new(1, vec![2, 3], vec![4]);
        let est = hier.exact_log_marginal(&pair, 500, 1, Execution::Sequential).unwrap();
        let expected = 3.0 * (1.0 / 6.0_f64).ln() + (1.0 / 5.0_f64).ln();
        assert_relative_eq!(est.log_estimate, expected, max_relative = 1e-13);
    }
}
