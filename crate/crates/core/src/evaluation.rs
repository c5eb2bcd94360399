//! ROUGE, reconstruction perplexity, and domain classification from
//! summary representations.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore};
use crate::corpus::{encode_pairs, pair_all, tokenize, Dialogue, EncodedPair, Speaker, Vocabulary};
use crate::error::{Error, Result};
use crate::generative::{reconstruct_pair, PairOptions};
use crate::model::Model;
use crate::summarizer::{summary_latents, SummaryRecord};
use crate::tensor::{softmax, Matrix};
use crate::training::{classification_loss, train, Adam, AdamConfig, Supervision, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when an input was too short for the metric to be defined.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

impl RougeScore {
    fn from_counts(overlap: usize, candidate: usize, reference: usize) -> Self {
        let precision = if candidate == 0 { 0.0 } else { overlap as f64 / candidate as f64 };
        let recall = if reference == 0 { 0.0 } else { overlap as f64 / reference as f64 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Self { precision, recall, f1, degenerate: false }
    }

    fn degenerate() -> Self {
        Self { degenerate: true, ..Self::default() }
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram overlap. A reference shorter than `n` scores zero and
/// is flagged as degenerate.
pub fn rouge_n<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> Result<RougeScore> {
    if n == 0 {
        return Err(Error::InvalidArgument("ROUGE-N needs n ≥ 1".into()));
    }
    if reference.len() < n {
        return Ok(RougeScore::degenerate());
    }
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap = refs.iter().map(|(g, &c)| c.min(cand.get(g).copied().unwrap_or(0))).sum();
    let cand_total = candidate.len().saturating_sub(n - 1);
    Ok(RougeScore::from_counts(overlap, cand_total, reference.len() + 1 - n))
}

pub fn lcs_length<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based precision and recall. An empty candidate or reference
/// scores zero and is flagged.
pub fn rouge_l<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> RougeScore {
    if candidate.is_empty() || reference.is_empty() {
        return RougeScore::degenerate();
    }
    RougeScore::from_counts(lcs_length(candidate, reference), candidate.len(), reference.len())
}

pub const METRICS: [&str; 3] = ["rouge-1", "rouge-2", "rouge-l"];

/// Mean F1 per role and metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RougeReport {
    pub measure: String,
    pub table: BTreeMap<String, BTreeMap<String, f64>>,
    pub scored: usize,
    /// Summaries with no matching reference, skipped.
    pub missing: usize,
    pub degenerate: usize,
}

/// Scores summaries against references keyed by dialogue id. Both sides
/// are tokenized like the corpus.
pub fn score_summaries(summaries: &[SummaryRecord], references: &[SummaryRecord]) -> Result<RougeReport> {
    if references.is_empty() {
        return Err(Error::Empty("reference set is empty".into()));
    }
    let by_id: HashMap<&str, &SummaryRecord> = references.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut sums: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let (mut scored, mut missing, mut degenerate) = (0, 0, 0);
    for s in summaries {
        let Some(r) = by_id.get(s.id.as_str()) else {
            missing += 1;
            continue;
        };
        scored += 1;
        for (role, cand, reference) in [
            (Speaker::Customer, &s.customer_summary, &r.customer_summary),
            (Speaker::Agent, &s.agent_summary, &r.agent_summary),
        ] {
            let (c, rf) = (tokenize(cand), tokenize(reference));
            let scores = [rouge_n(&c, &rf, 1)?, rouge_n(&c, &rf, 2)?, rouge_l(&c, &rf)];
            let row = sums.entry(role.as_str().to_string()).or_default();
            for (m, sc) in METRICS.iter().zip(scores) {
                degenerate += usize::from(sc.degenerate);
                *row.entry(m.to_string()).or_insert(0.0) += sc.f1;
            }
        }
    }
    if scored == 0 {
        return Err(Error::Missing("no summary has a matching reference".into()));
    }
    for row in sums.values_mut() {
        for v in row.values_mut() {
            *v /= scored as f64;
        }
    }
    Ok(RougeReport { measure: "f1".into(), table: sums, scored, missing, degenerate })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub customer_ppl: f64,
    pub agent_ppl: f64,
    pub customer_kl: f64,
    pub agent_kl: f64,
    pub pairs: usize,
    pub customer_tokens: usize,
    pub agent_tokens: usize,
}

/// `exp(total NLL / total target tokens)` per role with clean inputs and
/// posterior-mean latents; KL terms are means per pair.
pub fn perplexity(store: &ParamStore<f32>, model: &Model, pairs: &[EncodedPair], tau: f64) -> Result<PerplexityReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("no pairs to evaluate".into()));
    }
    let opts = PairOptions::eval_mean(tau);
    let parts: Vec<Result<_>> = pairs
        .par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            reconstruct_pair(store, model, &p.x, &p.y, &opts, &mut rng)
        })
        .collect();
    let (mut nx, mut ny, mut kx, mut ky) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut tx, mut ty) = (0usize, 0usize);
    for b in parts {
        let b = b?;
        nx += f64::from(b.nll_customer);
        ny += f64::from(b.nll_agent);
        kx += f64::from(b.kl_customer);
        ky += f64::from(b.kl_agent);
        tx += b.customer_tokens;
        ty += b.agent_tokens;
    }
    let n = pairs.len() as f64;
    Ok(PerplexityReport {
        customer_ppl: (nx / tx as f64).exp(),
        agent_ppl: (ny / ty as f64).exp(),
        customer_kl: kx / n,
        agent_kl: ky / n,
        pairs: pairs.len(),
        customer_tokens: tx,
        agent_tokens: ty,
    })
}

/// Area under the ROC curve by trapezoidal integration, with tied scores
/// forming one diagonal segment. Returns `None` without both classes.
pub fn auc(scores: &[f64], positives: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positives.len());
    let p = positives.iter().filter(|&&b| b).count();
    let n = positives.len() - p;
    if p == 0 || n == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let (tp0, fp0) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positives[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
    }
    Some(area / (p * n) as f64)
}

/// Mean one-vs-rest AUC over labels that have both classes present.
pub fn macro_auc(scores: &[Vec<f64>], targets: &[Vec<usize>], labels: usize) -> Result<(f64, Vec<Option<f64>>)> {
    let per: Vec<Option<f64>> = (0..labels)
        .map(|k| {
            let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
            let t: Vec<bool> = targets.iter().map(|t| t.contains(&k)).collect();
            auc(&s, &t)
        })
        .collect();
    let defined: Vec<f64> = per.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::InvalidArgument("no label has both positive and negative examples".into()));
    }
    Ok((defined.iter().sum::<f64>() / defined.len() as f64, per))
}

/// Affine classifier with per-feature standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub weight: Matrix<f64>,
    pub bias: Matrix<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub labels: Vec<String>,
    pub multi_label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { epochs: 200, learning_rate: 0.01 }
    }
}

impl ClassifierModel {
    /// Full-batch Adam on the mean cross-entropy.
    pub fn fit(
        features: &[Vec<f64>],
        targets: &[Vec<usize>],
        labels: Vec<String>,
        multi_label: bool,
        cfg: ClassifierConfig,
    ) -> Result<Self> {
        let n = features.len();
        if n == 0 {
            return Err(Error::Empty("no training examples for the classifier".into()));
        }
        let d = features[0].len();
        let k = labels.len();
        if k == 0 {
            return Err(Error::InvalidArgument("classifier needs at least one label".into()));
        }
        let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n as f64).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let var = features.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
                if var > 1e-12 {
                    1.0 / var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let x = Matrix::from_rows(
            &features.iter().map(|f| (0..d).map(|j| (f[j] - mean[j]) * scale[j]).collect()).collect::<Vec<_>>(),
        );
        let mut store = ParamStore::<f64>::new();
        let w = store.insert("weight", Matrix::zeros(d, k));
        let b = store.insert("bias", Matrix::zeros(1, k));
        let mut adam = Adam::new(&store, AdamConfig::new(cfg.learning_rate));
        for _ in 0..cfg.epochs {
            let grads = {
                let mut g = Graph::new(&store);
                let xv = g.constant(x.clone());
                let wv = g.param(w);
                let bv = g.param(b);
                let z = g.matmul(xv, wv);
                let logits = g.add_row(z, bv);
                let losses: Vec<_> = (0..n)
                    .map(|i| {
                        let row = g.row(logits, i);
                        classification_loss(&mut g, row, &targets[i], multi_label)
                    })
                    .collect();
                let all = g.concat_cols(&losses);
                let total = g.sum(all);
                let loss = g.scale(total, 1.0 / n as f64);
                g.backward(loss).into_param_grads()
            };
            adam.step(&mut store, &grads)?;
        }
        Ok(Self { weight: store.get(w).clone(), bias: store.get(b).clone(), mean, scale, labels, multi_label })
    }

    /// Per-label probabilities: sigmoid when multi-label, softmax otherwise.
    pub fn predict(&self, features: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = features.iter().enumerate().map(|(j, v)| (v - self.mean[j]) * self.scale[j]).collect();
        let logits = Matrix::row_vector(z).matmul(&self.weight);
        let logits: Vec<f64> = logits.data().iter().zip(self.bias.data()).map(|(a, b)| a + b).collect();
        if self.multi_label {
            logits.iter().map(|l| 1.0 / (1.0 + (-l).exp())).collect()
        } else {
            softmax(&logits)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub mode: String,
    pub auc: f64,
    pub per_label: BTreeMap<String, Option<f64>>,
    pub multi_label: bool,
    pub feature_dim: usize,
    pub train_dialogues: usize,
    pub test_dialogues: usize,
}

/// Maps dialogue domains to label indices. Single-label mode keeps the
/// first domain in sorted order. Errors when a dialogue has no label or
/// a label is not in `labels`.
pub fn label_targets(dialogues: &[Dialogue], labels: &[String], multi_label: bool) -> Result<Vec<Vec<usize>>> {
    dialogues
        .iter()
        .map(|d| {
            if d.domains.is_empty() {
                return Err(Error::Missing(format!("dialogue {:?} has no domain label", d.id)));
            }
            let mut idx = Vec::new();
            for dom in &d.domains {
                let i = labels.iter().position(|l| l == dom).ok_or_else(|| Error::UnseenLabel(dom.clone()))?;
                idx.push(i);
                if !multi_label {
                    break;
                }
            }
            Ok(idx)
        })
        .collect()
}

/// Trains a linear classifier on `features(train)` and reports macro AUC
/// on `features(test)`.
#[allow(clippy::too_many_arguments)]
pub fn classify_features(
    mode: &str,
    train_features: &[Vec<f64>],
    train: &[Dialogue],
    test_features: &[Vec<f64>],
    test: &[Dialogue],
    multi_label: bool,
    cfg: ClassifierConfig,
) -> Result<ClassificationReport> {
    let labels = crate::corpus::label_set(train);
    if labels.is_empty() {
        return Err(Error::Missing("training dialogues carry no domain labels".into()));
    }
    let train_targets = label_targets(train, &labels, multi_label)?;
    let test_targets = label_targets(test, &labels, multi_label)?;
    let clf = ClassifierModel::fit(train_features, &train_targets, labels.clone(), multi_label, cfg)?;
    let scores: Vec<Vec<f64>> = test_features.iter().map(|f| clf.predict(f)).collect();
    let (auc, per) = macro_auc(&scores, &test_targets, labels.len())?;
    Ok(ClassificationReport {
        mode: mode.to_string(),
        auc,
        per_label: labels.into_iter().zip(per).collect(),
        multi_label,
        feature_dim: train_features.first().map_or(0, Vec::len),
        train_dialogues: train.len(),
        test_dialogues: test.len(),
    })
}

/// Summary features `[e_X; e_Y]` of the re-encoded greedy summaries for
/// every dialogue, computed in parallel.
pub fn summary_features(
    store: &ParamStore<f32>,
    model: &Model,
    dialogues: &[Dialogue],
    vocabs: (&Vocabulary, &Vocabulary),
    max_len: usize,
) -> Result<Vec<Vec<f64>>> {
    dialogues
        .par_iter()
        .map(|d| {
            let f = crate::summarizer::summary_embeddings(store, model, d, vocabs, max_len)?;
            Ok(f.into_iter().map(f64::from).collect())
        })
        .collect()
}

/// Unsupervised classification: a frozen model's summary embeddings as
/// features for a separately trained linear classifier.
#[allow(clippy::too_many_arguments)]
pub fn classify_unsupervised(
    store: &ParamStore<f32>,
    model: &Model,
    train: &[Dialogue],
    test: &[Dialogue],
    vocabs: (&Vocabulary, &Vocabulary),
    multi_label: bool,
    max_len: usize,
    cfg: ClassifierConfig,
) -> Result<ClassificationReport> {
    let tr = summary_features(store, model, train, vocabs, max_len)?;
    let te = summary_features(store, model, test, vocabs, max_len)?;
    classify_features("unsupervised", &tr, train, &te, test, multi_label, cfg)
}

/// Scores test dialogues with a jointly trained classifier head on
/// `[s_X; s_Y]`.
pub fn evaluate_joint_head(
    store: &ParamStore<f32>,
    model: &Model,
    test: &[Dialogue],
    labels: &[String],
    vocabs: (&Vocabulary, &Vocabulary),
    multi_label: bool,
) -> Result<(f64, Vec<Option<f64>>)> {
    let head = model.classifier.ok_or_else(|| Error::Missing("model has no classifier head".into()))?;
    let targets = label_targets(test, labels, multi_label)?;
    let scores: Vec<Result<Vec<f64>>> = test
        .par_iter()
        .map(|d| {
            let s = summary_latents(store, model, d, vocabs)?;
            let mut g = Graph::new(store);
            let x = g.constant(Matrix::row_vector(s));
            let logits = head.forward(&mut g, x)?;
            let l: Vec<f64> = g.value(logits).data().iter().map(|&v| f64::from(v)).collect();
            Ok(if multi_label { l.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect() } else { softmax(&l) })
        })
        .collect();
    let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
    macro_auc(&scores, &targets, labels.len())
}

/// Attaches a classifier head on `[s_X; s_Y]`, trains all parameters
/// jointly on ℒ − λ·CE over `train`, and scores the head on `test`.
#[allow(clippy::too_many_arguments)]
pub fn classify_supervised_joint(
    model: &mut Model,
    store: &mut ParamStore<f32>,
    train_dialogues: &[Dialogue],
    test: &[Dialogue],
    vocabs: (&Vocabulary, &Vocabulary),
    cfg: &TrainConfig,
    lambda: f64,
    multi_label: bool,
) -> Result<(ClassificationReport, TrainReport)> {
    let labels = crate::corpus::label_set(train_dialogues);
    if labels.is_empty() {
        return Err(Error::Missing("training dialogues carry no domain labels".into()));
    }
    let targets = label_targets(train_dialogues, &labels, multi_label)?;
    // fail before training if the test split has an unseen label
    label_targets(test, &labels, multi_label)?;
    if model.classifier.is_none() {
        model.attach_classifier(store, labels.len(), cfg.seed)?;
    }
    let supervision = Supervision {
        labels: train_dialogues.iter().map(|d| d.id.clone()).zip(targets).collect(),
        label_count: labels.len(),
        multi_label,
        lambda,
    };
    let pairs = encode_pairs(&pair_all(train_dialogues), vocabs.0, vocabs.1);
    let report = train(model, store, &pairs, cfg, Some(&supervision), &mut ())?;
    let (auc, per) = evaluate_joint_head(store, model, test, &labels, vocabs, multi_label)?;
    let classification = ClassificationReport {
        mode: "supervised".into(),
        auc,
        per_label: labels.into_iter().zip(per).collect(),
        multi_label,
        feature_dim: 2 * model.config.latent_dim,
        train_dialogues: train_dialogues.len(),
        test_dialogues: test.len(),
    };
    Ok((classification, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn t(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn rouge_hand_cases() {
        let same = t("the cat sat");
        for n in [1, 2] {
            let s = rouge_n(&same, &same, n).unwrap();
            assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        }
        let s = rouge_n(&t("a b c"), &t("a d c"), 1).unwrap();
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15 && s.precision == s.recall);
        assert_eq!(rouge_n(&t("a b"), &t("c d"), 1).unwrap().f1, 0.0);
        assert!(rouge_n(&t("a b"), &t("a"), 2).unwrap().degenerate);
        assert!(rouge_n(&t("a"), &t("a"), 0).is_err());
        let l = rouge_l(&t("a b c d"), &t("a c b d"));
        assert_eq!((l.precision, l.recall), (0.75, 0.75));
        let l = rouge_l(&t("x a y"), &t("a b"));
        assert_eq!((l.precision, l.recall), (1.0 / 3.0, 0.5));
        assert!(rouge_l(&Vec::<&str>::new(), &t("a")).degenerate);
    }

    #[test]
    fn clipped_counts() {
        let s = rouge_n(&t("the the the"), &t("the cat"), 1).unwrap();
        assert_eq!((s.precision, s.recall), (1.0 / 3.0, 0.5));
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]), Some(0.75));
        assert_eq!(auc(&[0.3; 5], &[true, false, true, false, false]), Some(0.5));
        assert_eq!(auc(&[1.0, 2.0], &[false, true]), Some(1.0));
        assert_eq!(auc(&[1.0, 2.0], &[true, true]), None);
    }

    #[test]
    fn random_labels_give_chance_auc() {
        let mut total = 0.0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..400).map(|_| rng.random()).collect();
            let l: Vec<bool> = (0..400).map(|_| rng.random_bool(0.5)).collect();
            total += auc(&s, &l).unwrap();
        }
        assert!((total / 20.0 - 0.5).abs() < 0.05);
    }

    #[test]
    fn separable_features_classify_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut feats = Vec::new();
        let mut targets = Vec::new();
        for i in 0..60 {
            let c = i % 2;
            let centre = if c == 0 { -1.0 } else { 1.0 };
            feats.push((0..4).map(|_| centre + rng.random_range(-0.3..0.3)).collect::<Vec<f64>>());
            targets.push(vec![c]);
        }
        for multi in [false, true] {
            let clf = ClassifierModel::fit(
                &feats,
                &targets,
                vec!["a".into(), "b".into()],
                multi,
                ClassifierConfig::default(),
            )
            .unwrap();
            let scores: Vec<Vec<f64>> = feats.iter().map(|f| clf.predict(f)).collect();
            let (a, _) = macro_auc(&scores, &targets, 2).unwrap();
            assert_eq!(a, 1.0);
        }
    }

    #[test]
    fn score_summaries_self_and_missing() {
        let rec = |id: &str, c: &str, a: &str| SummaryRecord {
            id: id.into(),
            customer_summary: c.into(),
            agent_summary: a.into(),
            attention: BTreeMap::new(),
            copy_log: None,
        };
        let sums = vec![rec("1", "i need a taxi", "booked , ref ab12cd34"), rec("2", "x y", "z w")];
        let report = score_summaries(&sums, &sums[..1]).unwrap();
        assert_eq!((report.scored, report.missing), (1, 1));
        assert_eq!(report.table.len(), 2);
        for row in report.table.values() {
            assert_eq!(row.len(), 3);
            assert!(row.values().all(|&v| v == 1.0));
        }
        assert!(score_summaries(&sums, &[]).is_err());
    }

    fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<u8> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i]).collect();
            let mut it = b.iter();
            if sub.iter().all(|c| it.any(|d| d == c)) {
                best = best.max(sub.len());
            }
        }
        best
    }

    proptest! {
        #[test]
        fn lcs_matches_brute_force(a in prop::collection::vec(0u8..3, 0..=8), b in prop::collection::vec(0u8..3, 0..=8)) {
            let sa: Vec<String> = a.iter().map(|c| c.to_string()).collect();
            let sb: Vec<String> = b.iter().map(|c| c.to_string()).collect();
            prop_assert_eq!(lcs_length(&sa, &sb), brute_lcs(&a, &b));
        }

        #[test]
        fn adding_matched_token_never_lowers_recall(
            c in prop::collection::vec(0u8..4, 1..8),
            r in prop::collection::vec(0u8..4, 1..8),
            pick in 0usize..8,
        ) {
            let cs: Vec<String> = c.iter().map(|x| x.to_string()).collect();
            let rs: Vec<String> = r.iter().map(|x| x.to_string()).collect();
            let tok = rs[pick % rs.len()].clone();
            let mut more = cs.clone();
            more.push(tok);
            prop_assert!(rouge_n(&more, &rs, 1).unwrap().recall >= rouge_n(&cs, &rs, 1).unwrap().recall);
            prop_assert!(rouge_l(&more, &rs).recall >= rouge_l(&cs, &rs).recall);
        }
    }
}
