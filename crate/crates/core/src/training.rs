//! Initialisation, Adam, KL annealing, the training loop and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use log::{info, warn};
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{self, GoldSet};
use crate::autodiff::{Gradients, ParamStore, Tensor, TensorError};
use crate::corpus::{self, SentencePair, Side, Vocabulary};
use crate::model::{CssPair, EmbedAlign, ModelConfig, ModelError, Noise};
use crate::parallel::{self, Execution};
use crate::rng::{self, Rng};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite gradient for parameter `{param}` at update {update}")]
    NonFiniteGradient { param: String, update: u64 },
    #[error("non-finite objective at update {update}")]
    NonFiniteLoss { update: u64 },
    #[error(transparent)]
    Alignment(#[from] alignment::AlignmentError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint configuration mismatch: {0}")]
    ConfigMismatch(String),
}

pub type Result<T> = std::result::Result<T, TrainingError>;

/// Uniform on [−L, L] with L = sqrt(6 / (fan_in + fan_out)) for a
/// `[fan_out, fan_in]` weight.
pub fn glorot_with(shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
    let &[fan_out, fan_in] = shape else {
        return Err(TrainingError::Contract(format!("Glorot init needs a 2-d shape, got {shape:?}")));
    };
    let limit = glorot_limit(fan_in, fan_out);
    let dist = Uniform::new_inclusive(-limit, limit);
    let data = (0..fan_out * fan_in).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::new(shape.to_vec(), data).expect("size matches shape"))
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn glorot_init(shape: &[usize], seed: u64) -> Result<Tensor> {
    glorot_with(shape, &mut rng::rng_for(seed, "glorot", 0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> =
            params.iter().map(|(k, v)| (k.clone(), vec![0.0; v.len()])).collect();
        Self { config, step: 0, first: zeros.clone(), second: zeros }
    }
}

/// One bias-corrected Adam update that *descends* `grads`. Any non-finite
/// gradient aborts before touching the parameters.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if let Some(name) = grads.first_non_finite() {
        return Err(TrainingError::NonFiniteGradient { param: name.to_string(), update: state.step });
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state.first.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
        let v = state.second.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            let gk = g.data()[k];
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *w -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
    Ok(())
}

pub const ANNEAL_STEP: f64 = 1e-3;
pub const ANNEAL_INTERVAL: u64 = 500;

/// α(u) = min(1, 10⁻³ · ⌊u / 500⌋).
pub fn anneal_alpha(updates: u64) -> f64 {
    let ticks = updates / ANNEAL_INTERVAL;
    // 1000 ticks reach 1; computing ticks / 1000 avoids 0.001 * k drift
    if ticks >= 1000 {
        1.0
    } else {
        ticks as f64 / 1000.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Negatives sampled per head and batch.
    pub n_neg: usize,
    pub seed: u64,
    /// Use CSS-normalised heads during training.
    pub css: bool,
    /// Disables KL annealing (α = 1 throughout).
    pub no_anneal: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 100, lr: 1e-3, n_neg: 1000, seed: 1, css: true, no_anneal: false }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainingError::Contract("batch size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TrainingError::Contract("learning rate must be positive".into()));
        }
        Ok(())
    }
}

pub struct TrainData<'a> {
    pub train: &'a [SentencePair],
    pub valid: &'a [SentencePair],
    pub valid_gold: Option<&'a GoldSet>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Summed ELBO over the epoch divided by the number of tokens (both sides).
    pub mean_elbo_per_token: f64,
    /// α after the epoch's last update.
    pub alpha: f64,
    pub valid_aer: Option<f64>,
}

impl EpochMetrics {
    pub fn log_line(&self) -> String {
        let aer = self.valid_aer.map_or_else(|| "NA".to_string(), |a| format!("{a:.6}"));
        format!("{}\t{:.6}\t{:.6}\t{}", self.epoch, self.mean_elbo_per_token, self.alpha, aer)
    }
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation AER (the final
    /// epoch when no gold is available).
    pub best: EmbedAlign,
    pub best_aer: Option<f64>,
    pub best_epoch: usize,
    pub updates: u64,
    pub metrics: Vec<EpochMetrics>,
}

/// Objective and summed gradient of one batch.
pub struct BatchResult {
    pub elbo: f64,
    pub grads: Gradients,
}

/// Summed ELBO and its gradient over a batch. Noise is drawn sequentially
/// from `seed`; pairs are evaluated under `exec` and merged in batch order,
/// so both execution modes give bit-identical results.
pub fn batch_gradient(
    model: &EmbedAlign,
    batch: &[&SentencePair],
    alpha: f64,
    css: Option<CssPair<'_>>,
    seed: u64,
    exec: Execution,
) -> Result<BatchResult> {
    let mut rng = rng::rng_for(seed, "noise", 0);
    let noises: Vec<Noise> = batch.iter().map(|p| model.sample_noise(p, &mut rng)).collect();
    let parts = parallel::map_indexed(exec, batch, |k, pair| model.elbo_and_gradients(pair, alpha, &noises[k], css));
    let mut grads = Gradients::zeros_like(model.params());
    let mut elbo = 0.0;
    for part in parts {
        let (value, g) = part?;
        elbo += value;
        grads.accumulate(&g);
    }
    Ok(BatchResult { elbo, grads })
}

/// Alignment error rate of the model's approximate Viterbi links on
/// `pairs` against `gold`.
pub fn validation_aer(model: &EmbedAlign, pairs: &[SentencePair], gold: &GoldSet, exec: Execution) -> Result<f64> {
    let pred = alignment::align_corpus(model, pairs, exec)?;
    Ok(alignment::corpus_aer(exec, &pred, gold)?)
}

/// Runs the optimisation loop described in the crate docs.
///
/// Per epoch: shuffle, and per batch build CSS supports, draw noise, take the
/// gradient of the summed negative ELBO, apply Adam, advance α by one update.
/// After each epoch, compute validation AER and keep the best parameters.
pub fn train(initial: EmbedAlign, data: &TrainData<'_>, cfg: &TrainConfig, exec: Execution) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = initial;
    let gold = data.valid_gold.filter(|g| !g.is_empty());
    if gold.is_none() {
        warn!("no validation gold alignments; keeping the final epoch");
    }
    let mut adam = AdamState::new(model.params(), AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut updates: u64 = 0;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best = model.clone();
    let mut best_aer: Option<f64> = None;
    let mut best_epoch = 0;
    let (vx, vy) = (model.config().l1_vocab_size, model.config().l2_vocab_size);
    let tokens: usize = data.train.iter().map(SentencePair::num_tokens).sum();

    for epoch in 1..=cfg.epochs {
        let batches = corpus::make_batches(data.train, cfg.batch_size, rng::derive_seed(cfg.seed, "shuffle", epoch as u64));
        let mut epoch_elbo = 0.0;
        for batch in &batches {
            let alpha = if cfg.no_anneal { 1.0 } else { anneal_alpha(updates) };
            let batch_seed = rng::derive_seed(cfg.seed, "batch", updates);
            let supports = cfg.css.then(|| {
                (
                    corpus::build_css_support(&batch.pairs, vx, Side::L1, cfg.n_neg, rng::derive_seed(batch_seed, "css-l1", 0)),
                    corpus::build_css_support(&batch.pairs, vy, Side::L2, cfg.n_neg, rng::derive_seed(batch_seed, "css-l2", 0)),
                )
            });
            let css = supports.as_ref().map(|(l1, l2)| CssPair { l1, l2 });
            let BatchResult { elbo, mut grads } = match batch_gradient(&model, &batch.pairs, alpha, css, batch_seed, exec) {
                // diverged parameters show up as NaN fed into log/sqrt
                Err(TrainingError::Model(ModelError::Tensor(TensorError::Domain { .. }))) => {
                    return Err(TrainingError::NonFiniteLoss { update: updates })
                }
                r => r?,
            };
            if !elbo.is_finite() {
                return Err(TrainingError::NonFiniteLoss { update: updates });
            }
            grads.scale(-1.0);
            adam_step(model.params_mut(), &grads, &mut adam)?;
            epoch_elbo += elbo;
            updates += 1;
        }
        let valid_aer = match gold {
            Some(g) => Some(validation_aer(&model, data.valid, g, exec)?),
            None => None,
        };
        let m = EpochMetrics {
            epoch,
            mean_elbo_per_token: if tokens > 0 { epoch_elbo / tokens as f64 } else { 0.0 },
            alpha: if cfg.no_anneal { 1.0 } else { anneal_alpha(updates) },
            valid_aer,
        };
        info!("epoch {}", m.log_line());
        metrics.push(m);
        let improved = match (valid_aer, best_aer) {
            (Some(a), Some(b)) => a < b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            best = model.clone();
            best_aer = valid_aer;
            best_epoch = epoch;
        }
    }
    Ok(TrainOutcome { best, best_aer, best_epoch, updates, metrics })
}

pub fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let io_err = |source| TrainingError::Io { path: path.display().to_string(), source };
    let mut f = io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for m in metrics {
        writeln!(f, "{}", m.log_line()).map_err(io_err)?;
    }
    f.flush().map_err(io_err)
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u32,
    model: ModelConfig,
    l1_vocab: Vec<String>,
    l2_vocab: Vec<String>,
    updates: u64,
    best_aer: Option<f64>,
    params: Vec<StoredTensor>,
}

/// A trained model with its vocabularies and bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: EmbedAlign,
    pub l1_vocab: Vocabulary,
    pub l2_vocab: Vocabulary,
    pub updates: u64,
    pub best_aer: Option<f64>,
}

impl Checkpoint {
    /// Writes JSON; floats use shortest round-trip decimal form.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            model: self.model.config().clone(),
            l1_vocab: self.l1_vocab.tokens().to_vec(),
            l2_vocab: self.l2_vocab.tokens().to_vec(),
            updates: self.updates,
            best_aer: self.best_aer,
            params: self
                .model
                .params()
                .iter()
                .map(|(name, t)| StoredTensor { name: name.clone(), shape: t.shape().to_vec(), values: t.data().to_vec() })
                .collect(),
        };
        let text = serde_json::to_string(&file).map_err(|e| TrainingError::Format(e.to_string()))?;
        fs::write(path, text).map_err(|source| TrainingError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| TrainingError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct VersionOnly {
            version: u32,
        }
        if let Ok(v) = serde_json::from_str::<VersionOnly>(text) {
            if v.version != CHECKPOINT_VERSION {
                return Err(TrainingError::Version { found: v.version, expected: CHECKPOINT_VERSION });
            }
        }
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| TrainingError::Format(e.to_string()))?;
        let mut params = ParamStore::new();
        for t in file.params {
            let tensor = Tensor::new(t.shape, t.values).map_err(|e| TrainingError::Format(format!("params.{}: {e}", t.name)))?;
            params.insert(t.name, tensor);
        }
        let model = EmbedAlign::from_parts(file.model, params).map_err(|e| TrainingError::Format(e.to_string()))?;
        let vocab = |tokens: Vec<String>, field: &str| {
            Vocabulary::from_tokens(tokens).map_err(|e| TrainingError::Format(format!("{field}: {e}")))
        };
        Ok(Self {
            l1_vocab: vocab(file.l1_vocab, "l1_vocab")?,
            l2_vocab: vocab(file.l2_vocab, "l2_vocab")?,
            model,
            updates: file.updates,
            best_aer: file.best_aer,
        })
    }

    /// Fails unless the stored model matches the architecture the caller expects.
    pub fn expect_config(&self, encoder: crate::model::EncoderKind, hierarchical: bool) -> Result<()> {
        let cfg = self.model.config();
        if cfg.encoder != encoder || cfg.hierarchical != hierarchical {
            return Err(TrainingError::ConfigMismatch(format!(
                "checkpoint has encoder {:?} (hierarchical: {}), expected {:?} (hierarchical: {})",
                cfg.encoder, cfg.hierarchical, encoder, hierarchical
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderKind;
    use approx::assert_relative_eq;

    #[test]
    fn glorot_bounds_and_determinism() {
        let t = glorot_init(&[100, 100], 7).unwrap();
        let limit = glorot_limit(100, 100);
        assert!((limit - 0.1732051).abs() < 1e-7);
        assert!(t.data().iter().all(|v| v.abs() <= limit));
        assert_eq!(t, glorot_init(&[100, 100], 7).unwrap());
        let mean = t.data().iter().sum::<f64>() / 1e4;
        assert!(mean.abs() <= 3.0 * limit / (3e4_f64).sqrt());
        assert!(glorot_init(&[5], 1).is_err());
    }

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(w));
        s
    }

    fn scalar_grad(g: f64) -> Gradients {
        Gradients::from_store(&scalar_store(g))
    }

    #[test]
    fn adam_first_step_identity() {
        let mut p = scalar_store(0.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        let g = scalar_grad(1.0);
        adam_step(&mut p, &g, &mut st).unwrap();
        let delta = p.get("w").unwrap().item();
        assert_relative_eq!(delta, -1e-3 / (1.0 + 1e-8), max_relative = 1e-12);
        assert!((delta + 9.9999999e-4).abs() < 1e-11);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = scalar_store(2.5);
        let mut st = AdamState::new(&p, AdamConfig::default());
        for _ in 0..5 {
            let g = scalar_grad(0.0);
            adam_step(&mut p, &g, &mut st).unwrap();
        }
        assert_eq!(p.get("w").unwrap().item(), 2.5);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = scalar_store(0.0);
        let mut st = AdamState::new(&p, AdamConfig { lr: 1e-2, ..AdamConfig::default() });
        for _ in 0..5000 {
            let w = p.get("w").unwrap().item();
            let g = scalar_grad(2.0 * (w - 3.0));
            adam_step(&mut p, &g, &mut st).unwrap();
        }
        assert!((p.get("w").unwrap().item() - 3.0).abs() <= 1e-2);
    }

    #[test]
    fn adam_names_nan_parameter() {
        let mut p = scalar_store(0.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        let g = scalar_grad(f64::NAN);
        match adam_step(&mut p, &g, &mut st) {
            Err(TrainingError::NonFiniteGradient { param, .. }) => assert_eq!(param, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p.get("w").unwrap().item(), 0.0);
    }

    #[test]
    fn anneal_schedule_points() {
        assert_eq!(anneal_alpha(0), 0.0);
        assert_eq!(anneal_alpha(499), 0.0);
        assert_eq!(anneal_alpha(500), 0.001);
        assert_eq!(anneal_alpha(499_999), 0.999);
        assert_eq!(anneal_alpha(500_000), 1.0);
        assert_eq!(anneal_alpha(10_000_000), 1.0);
    }

    fn toy() -> (EmbedAlign, Vec<SentencePair>) {
        let cfg = ModelConfig {
            encoder: EncoderKind::Bow,
            latent_dim: 3,
            embed_dim: 4,
            hierarchical: false,
            sentence_dim: 2,
            l1_vocab_size: 8,
            l2_vocab_size: 8,
        };
        let pairs = (1..=7)
            .map(|k| SentencePair::new(k, vec![2 + k % 5, 3 + k % 4], vec![2 + k % 6, 4]))
            .collect();
        (EmbedAlign::new(cfg, 3).unwrap(), pairs)
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let (model, pairs) = toy();
        let data = TrainData { train: &pairs, valid: &pairs, valid_gold: None };
        let cfg = TrainConfig { epochs: 0, batch_size: 3, ..TrainConfig::default() };
        let out = train(model.clone(), &data, &cfg, Execution::Parallel).unwrap();
        assert_eq!(out.best, model);
        assert_eq!(out.updates, 0);
        assert_eq!(anneal_alpha(out.updates), 0.0);
    }

    #[test]
    fn training_is_deterministic_across_runs_and_modes() {
        let (model, pairs) = toy();
        let data = TrainData { train: &pairs, valid: &pairs, valid_gold: None };
        let cfg = TrainConfig { epochs: 2, batch_size: 3, n_neg: 2, ..TrainConfig::default() };
        let a = train(model.clone(), &data, &cfg, Execution::Parallel).unwrap();
        let b = train(model.clone(), &data, &cfg, Execution::Parallel).unwrap();
        let c = train(model, &data, &cfg, Execution::Sequential).unwrap();
        assert_eq!(a.best, b.best);
        assert_eq!(a.best, c.best);
        assert_eq!(a.metrics, c.metrics);
        assert_eq!(a.updates, 6);
    }

    #[test]
    fn checkpoint_round_trip_and_guards() {
        let (model, pairs) = toy();
        let vocab = |p: &str| {
            let mut tokens = vec![corpus::NULL_TOKEN.to_string(), corpus::UNK_TOKEN.to_string()];
            tokens.extend((2..8).map(|k| format!("{p}{k}")));
            Vocabulary::from_tokens(tokens).unwrap()
        };
        let ck = Checkpoint { model, l1_vocab: vocab("a"), l2_vocab: vocab("b"), updates: 4, best_aer: Some(0.25) };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let noise = Noise::sample(&mut rng::rng_for(1, "t", 0), pairs[0].m(), ck.model.config());
        assert_eq!(
            ck.model.elbo(&pairs[0], 0.5, &noise, None).unwrap().to_bits(),
            back.model.elbo(&pairs[0], 0.5, &noise, None).unwrap().to_bits()
        );

        let text = fs::read_to_string(&path).unwrap();
        assert!(matches!(Checkpoint::from_json(&text[..text.len() / 2]), Err(TrainingError::Format(_))));
        let bumped = text.replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(Checkpoint::from_json(&bumped), Err(TrainingError::Version { found: 9, .. })));
        assert!(matches!(back.expect_config(EncoderKind::Birnn, false), Err(TrainingError::ConfigMismatch(_))));
        assert!(back.expect_config(EncoderKind::Bow, false).is_ok());
    }
}
