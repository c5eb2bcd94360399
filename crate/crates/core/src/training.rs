//! Joint optimization of the reconstruction and summary objectives.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::corpus::{batch_iterator, EncodedPair};
use crate::error::{Error, Result};
use crate::generative::{reconstruct_pair_graph, PairOptions};
use crate::model::{Architecture, Model, ModelConfig};
use crate::summarizer::{similarity_objective, DEFAULT_SUMMARY_MAX_LEN};
use crate::tensor::{Matrix, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub tau: f64,
    pub kl_threshold: f64,
    pub kl_anneal_fraction: f64,
    pub word_dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub prior_hidden: usize,
    pub seed: u64,
    /// Stops after this many optimizer steps, continuing past
    /// `max_epochs` if needed. Also the horizon of the KL schedule.
    pub max_steps: Option<usize>,
    pub summary_max_len: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub positions: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            tau: 0.01,
            kl_threshold: 0.8,
            kl_anneal_fraction: 0.5,
            word_dropout: 0.4,
            learning_rate: 0.0005,
            batch_size: 16,
            max_epochs: 10,
            latent_dim: 300,
            embed_dim: 300,
            hidden: 600,
            heads: 10,
            layers: 1,
            prior_hidden: 600,
            seed: 0,
            max_steps: None,
            summary_max_len: DEFAULT_SUMMARY_MAX_LEN,
            grad_clip: 5.0,
            positions: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.word_dropout) {
            return bad("word_dropout must lie in [0, 1]");
        }
        if self.kl_threshold < 0.0 || !(0.0..=1.0).contains(&self.kl_anneal_fraction) {
            return bad("KL schedule parameters out of range");
        }
        if self.layers != 1 {
            return bad("only single-layer encoders and decoders are supported");
        }
        if [self.batch_size, self.latent_dim, self.embed_dim, self.hidden, self.heads, self.prior_hidden].contains(&0)
            || self.summary_max_len == 0
        {
            return bad("sizes must be positive");
        }
        if self.learning_rate <= 0.0 {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    pub fn model_config(&self, arch: Architecture, customer_vocab: usize, agent_vocab: usize) -> ModelConfig {
        ModelConfig {
            arch,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            latent_dim: self.latent_dim,
            prior_hidden: self.prior_hidden,
            heads: self.heads,
            customer_vocab,
            agent_vocab,
            positions: self.positions,
            labels: 0,
        }
    }

    /// Parses either a JSON object or `key = value` lines (`#` comments).
    /// Missing keys keep their defaults; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        let value = if trimmed.starts_with('{') {
            serde_json::from_str::<serde_json::Value>(text)?
        } else {
            let mut map = serde_json::Map::new();
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| Error::MalformedRecord {
                    index: i + 1,
                    message: format!("expected key = value, got {line:?}"),
                })?;
                let v = v.trim();
                let parsed = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
                map.insert(k.trim().to_string(), parsed);
            }
            serde_json::Value::Object(map)
        };
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Linear ramp from 0 to `kl_threshold`, reached at
/// `kl_anneal_fraction × total_steps`, constant afterwards.
pub fn kl_weight_schedule(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument("total_steps must be positive".into()));
    }
    let ramp = cfg.kl_anneal_fraction * total_steps as f64;
    if ramp <= 0.0 {
        return Ok(cfg.kl_threshold);
    }
    Ok(cfg.kl_threshold * (step as f64 / ramp).min(1.0))
}

/// `α ℒ_gen + (1 − α) ℒ_sum`
pub fn combined_objective(gen: f64, sum: f64, alpha: f64) -> f64 {
    alpha * gen + (1.0 - alpha) * sum
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moments. Parameters whose gradient is `None`
/// are left untouched and their moments are not advanced.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Matrix<T>> = store.iter().map(|(_, _, m)| Matrix::zeros(m.rows(), m.cols())).collect();
        Self { config, m: zeros.clone(), v: zeros, steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Matrix<T>>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                context: "gradient count",
                expected: self.m.len(),
                actual: grads.len(),
            });
        }
        self.steps += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let t = self.steps as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let (lr, eps) = (T::from_f64_lossy(c.learning_rate), T::from_f64_lossy(c.eps));
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let id = crate::autodiff::ParamId(i);
            if grad.shape() != store.get(id).shape() {
                return Err(Error::DimensionMismatch {
                    context: "gradient shape",
                    expected: store.get(id).len(),
                    actual: grad.len(),
                });
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let g = grad.data()[k];
                m[k] = b1 * m[k] + (T::one() - b1) * g;
                v[k] = b2 * v[k] + (T::one() - b2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] = p[k] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales gradients in place so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Matrix<T>>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.sq_norm().to_f64_lossy()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }
    norm
}

/// Dialogue-level domain labels for joint supervised training.
#[derive(Debug, Clone)]
pub struct Supervision {
    /// Label indices per dialogue id.
    pub labels: HashMap<String, Vec<usize>>,
    pub label_count: usize,
    pub multi_label: bool,
    pub lambda: f64,
}

/// Cross-entropy of classifier logits (1 × K) against target label indices:
/// per-label sigmoid when `multi_label`, otherwise softmax over labels
/// (using the first target).
pub fn classification_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[usize], multi_label: bool) -> Var {
    let k = g.shape(logits).1;
    if multi_label {
        // row j holds [0, l_j]; its log-softmax gives (log(1−σ), log σ)
        let zeros = g.constant(Matrix::zeros(k, 1));
        let col = g.transpose(logits);
        let pairs = g.concat_cols(&[zeros, col]);
        let lsm = g.log_softmax_rows(pairs);
        let picks: Vec<(usize, usize)> = (0..k).map(|j| (j, usize::from(targets.contains(&j)))).collect();
        let picked = g.pick(lsm, &picks);
        let total = g.sum(picked);
        g.neg(total)
    } else {
        let lsm = g.log_softmax_rows(logits);
        let picked = g.pick(lsm, &[(0, targets[0])]);
        let total = g.sum(picked);
        g.neg(total)
    }
}

/// Per-step statistics. `step` is the zero-based optimizer step used for
/// the KL schedule; loss components are means over the batch's pairs
/// (reconstruction) or dialogues (summary, classification).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub kl_weight: f64,
    pub nll_customer: f64,
    pub nll_agent: f64,
    pub kl_customer: f64,
    pub kl_agent: f64,
    /// ℒ_gen per pair.
    pub gen: f64,
    /// ℒ_sum per dialogue.
    pub sum: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification: Option<f64>,
    /// −ℒ, the minimized quantity.
    pub loss: f64,
    pub grad_norm: f64,
    pub pairs: usize,
    pub dialogues: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub epochs: usize,
    pub wall_clock_secs: f64,
}

/// Callbacks during training.
pub trait TrainObserver<T: Scalar> {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn on_epoch_end(&mut self, _epoch: usize, _store: &ParamStore<T>) -> Result<()> {
        Ok(())
    }
}

impl<T: Scalar> TrainObserver<T> for () {}

/// Total optimizer steps implied by the config and corpus.
pub fn total_steps(cfg: &TrainConfig, dialogues: usize) -> usize {
    cfg.max_steps.unwrap_or_else(|| cfg.max_epochs * dialogues.div_ceil(cfg.batch_size))
}

/// Loss components of one dialogue, unscaled.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DialogueStats {
    pub nll_customer: f64,
    pub nll_agent: f64,
    pub kl_customer: f64,
    pub kl_agent: f64,
    pub elbo: f64,
    pub similarity: f64,
    pub classification: f64,
    pub loss: f64,
}

fn rng_for(seed: u64, step: usize, dialogue: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 20) ^ dialogue as u64);
    rng
}

/// Scaling applied to one dialogue's terms so that summing over the
/// batch gives `α·mean_pairs(ELBO) + (1−α)·mean_dialogues(ℒ_sum)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchScale {
    pub kl_weight: f64,
    pub pair_weight: f64,
    pub dialogue_weight: f64,
}

/// Builds −ℒ for one dialogue (all of its pairs) in `g`.
pub fn dialogue_loss<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    model: &Model,
    pairs: &[EncodedPair],
    cfg: &TrainConfig,
    scale: &BatchScale,
    supervision: Option<&Supervision>,
    rng: &mut R,
) -> Result<(Var, DialogueStats)> {
    let opts = PairOptions::train(cfg.word_dropout, cfg.tau);
    let kl_weight = T::from_f64_lossy(scale.kl_weight);
    let mut stats = DialogueStats::default();
    let mut elbos = Vec::with_capacity(pairs.len());
    let mut e_x = Vec::with_capacity(pairs.len());
    let mut e_y = Vec::with_capacity(pairs.len());
    for p in pairs {
        let pg = reconstruct_pair_graph(g, model, &p.x, &p.y, &opts, rng)?;
        let b = pg.breakdown(g);
        stats.nll_customer += b.nll_customer.to_f64_lossy();
        stats.nll_agent += b.nll_agent.to_f64_lossy();
        stats.kl_customer += b.kl_customer.to_f64_lossy();
        stats.kl_agent += b.kl_agent.to_f64_lossy();
        elbos.push(pg.elbo_var(g, kl_weight));
        e_x.push(pg.e_x);
        e_y.push(pg.e_y);
    }
    let elbo_rows = g.concat_cols(&elbos);
    let elbo_sum = g.sum(elbo_rows);
    stats.elbo = g.scalar(elbo_sum).to_f64_lossy();
    let terms = similarity_objective(g, model, &e_x, &e_y, cfg.summary_max_len, T::from_f64_lossy(cfg.tau))?;
    stats.similarity = g.scalar(terms.similarity).to_f64_lossy();

    let gen = g.scale(elbo_sum, T::from_f64_lossy(cfg.alpha * scale.pair_weight));
    let sum = g.scale(terms.similarity, T::from_f64_lossy((1.0 - cfg.alpha) * scale.dialogue_weight));
    let mut objective = g.add(gen, sum);
    if let Some(sup) = supervision.filter(|s| s.lambda != 0.0) {
        let head = model
            .classifier
            .ok_or_else(|| Error::InvalidArgument("supervised training needs a classifier head".into()))?;
        let targets = sup
            .labels
            .get(&pairs[0].dialogue_id)
            .ok_or_else(|| Error::Missing(format!("no labels for dialogue {:?}", pairs[0].dialogue_id)))?;
        if targets.is_empty() {
            return Err(Error::Missing(format!("no labels for dialogue {:?}", pairs[0].dialogue_id)));
        }
        let features = g.concat_cols(&[terms.s_x, terms.s_y]);
        let logits = head.forward(g, features)?;
        let ce = classification_loss(g, logits, targets, sup.multi_label);
        stats.classification = g.scalar(ce).to_f64_lossy();
        let weighted = g.scale(ce, T::from_f64_lossy(sup.lambda * scale.dialogue_weight));
        objective = g.sub(objective, weighted);
    }
    let loss = g.neg(objective);
    stats.loss = g.scalar(loss).to_f64_lossy();
    Ok((loss, stats))
}

fn dialogue_step<T: Scalar>(
    store: &ParamStore<T>,
    model: &Model,
    pairs: &[EncodedPair],
    cfg: &TrainConfig,
    scale: &BatchScale,
    supervision: Option<&Supervision>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Option<Matrix<T>>>, DialogueStats)> {
    let mut g = Graph::new(store);
    let (loss, stats) = dialogue_loss(&mut g, model, pairs, cfg, scale, supervision, rng)?;
    if !stats.loss.is_finite() {
        return Ok((Vec::new(), stats));
    }
    Ok((g.backward(loss).into_param_grads(), stats))
}

fn accumulate<T: Scalar>(into: &mut [Option<Matrix<T>>], from: Vec<Option<Matrix<T>>>) {
    for (slot, g) in into.iter_mut().zip(from) {
        match (slot.as_mut(), g) {
            (Some(acc), Some(g)) => acc.add_assign(&g),
            (None, Some(g)) => *slot = Some(g),
            _ => {}
        }
    }
}

/// Trains `store` in place. Per step: a batch of whole dialogues, the
/// annealed ELBO of every pair and the similarity objective of every
/// dialogue, the gradient of −ℒ, global-norm clipping, and an Adam update.
/// Dialogues are processed in parallel but gradients are summed in batch
/// order, so results do not depend on the thread count.
pub fn train<T: Scalar>(
    model: &Model,
    store: &mut ParamStore<T>,
    pairs: &[EncodedPair],
    cfg: &TrainConfig,
    supervision: Option<&Supervision>,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("training corpus has no utterance pairs".into()));
    }
    let dialogues = crate::corpus::group_by_dialogue(pairs).len();
    let total = total_steps(cfg, dialogues);
    if total == 0 {
        return Err(Error::InvalidArgument("training would take zero steps".into()));
    }
    let start = Instant::now();
    let mut adam = Adam::new(store, AdamConfig::new(cfg.learning_rate));
    let mut report = TrainReport::default();
    let mut step = 0;
    let mut epoch = 0;
    let chunk = rayon::current_num_threads().max(1);
    while step < total {
        let batches = batch_iterator(pairs, cfg.batch_size, cfg.seed.wrapping_add(epoch as u64))?;
        for batch in batches {
            if step >= total {
                break;
            }
            let kl_weight = kl_weight_schedule(step, total, cfg)?;
            let pair_count = batch.pair_count();
            let scale = BatchScale {
                kl_weight,
                pair_weight: 1.0 / pair_count as f64,
                dialogue_weight: 1.0 / batch.dialogues.len() as f64,
            };
            let mut grads: Vec<Option<Matrix<T>>> = vec![None; store.len()];
            let mut totals = DialogueStats::default();
            let frozen: &ParamStore<T> = store;
            for (c, group) in batch.dialogues.chunks(chunk).enumerate() {
                let results: Vec<Result<_>> = group
                    .par_iter()
                    .enumerate()
                    .map(|(i, d)| {
                        let mut rng = rng_for(cfg.seed, step, c * chunk + i);
                        dialogue_step(frozen, model, d, cfg, &scale, supervision, &mut rng)
                    })
                    .collect();
                for r in results {
                    let (g, s) = r?;
                    if !s.loss.is_finite() {
                        return Err(Error::NonFiniteLoss { step, detail: format!("dialogue loss {}", s.loss) });
                    }
                    accumulate(&mut grads, g);
                    totals.nll_customer += s.nll_customer;
                    totals.nll_agent += s.nll_agent;
                    totals.kl_customer += s.kl_customer;
                    totals.kl_agent += s.kl_agent;
                    totals.elbo += s.elbo;
                    totals.similarity += s.similarity;
                    totals.classification += s.classification;
                    totals.loss += s.loss;
                }
            }
            if grads.iter().flatten().any(|g| !g.all_finite()) {
                return Err(Error::NonFiniteLoss { step, detail: "non-finite gradient".into() });
            }
            let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
            adam.step(store, &grads)?;
            let np = pair_count as f64;
            let nd = batch.dialogues.len() as f64;
            let record = StepRecord {
                step,
                epoch,
                kl_weight,
                nll_customer: totals.nll_customer / np,
                nll_agent: totals.nll_agent / np,
                kl_customer: totals.kl_customer / np,
                kl_agent: totals.kl_agent / np,
                gen: totals.elbo / np,
                sum: totals.similarity / nd,
                classification: supervision.filter(|s| s.lambda != 0.0).map(|_| totals.classification / nd),
                loss: totals.loss,
                grad_norm,
                pairs: pair_count,
                dialogues: batch.dialogues.len(),
            };
            log::debug!("step {step} loss {:.4} kl_weight {kl_weight:.4}", record.loss);
            observer.on_step(&record)?;
            report.records.push(record);
            step += 1;
        }
        observer.on_epoch_end(epoch, store)?;
        epoch += 1;
    }
    report.epochs = epoch;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Mean of `values` over trailing windows of `window`; entry `i` covers
/// `values[i+1-window..=i]` (shorter at the start).
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Header line of the JSONL training report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportHeader {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub total_steps: usize,
    pub parameters: usize,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}
