//! Per-speaker summaries of a whole dialogue: sentence-level attention
//! pooling, mean-latent decoding, the similarity objective, and the
//! inference-time factual copy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::corpus::{pair_utterances, Dialogue, FactualLexicon, Speaker, Vocabulary};
use crate::error::{Error, Result};
use crate::generative::{greedy_decode, soft_decode, GreedyDecode};
use crate::latent::{posterior_agent, posterior_customer};
use crate::model::Model;
use crate::seqmodel::{AttentionWeights, MultiHeadAttention};
use crate::tensor::{softmax, Scalar};

pub const DEFAULT_SUMMARY_MAX_LEN: usize = 30;
const COSINE_EPS: f64 = 1e-8;

/// Self-attention over the `n` utterance embeddings of one role
/// (queries, keys and values all the same set), mean-pooled into `1 × d`.
pub fn sentence_self_attention<T: Scalar>(
    g: &mut Graph<T>,
    mha: &MultiHeadAttention,
    embeddings: &[Var],
) -> Result<(Var, AttentionWeights<T>)> {
    if embeddings.is_empty() {
        return Err(Error::Empty("no utterance embeddings to attend over".into()));
    }
    let e = g.concat_rows(embeddings);
    let (attended, weights) = mha.forward(g, e, e, e, None, false)?;
    Ok((g.mean_rows(attended), weights))
}

/// `s_X = μ_x(ẽ_X)` and `s_Y = μ_y(ẽ_Y ⊕ s_X)`: posterior means with no noise.
pub fn summary_latent<T: Scalar>(g: &mut Graph<T>, model: &Model, pooled_x: Var, pooled_y: Var) -> Result<(Var, Var)> {
    let s_x = posterior_customer(g, &model.customer_posterior, pooled_x)?.mean;
    let s_y = posterior_agent(g, &model.agent_posterior, pooled_y, s_x)?.mean;
    Ok((s_x, s_y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedSummaries<T> {
    pub customer: GreedyDecode<T>,
    pub agent: GreedyDecode<T>,
}

/// Greedy agent summary from `s_Y`, then the customer summary from
/// `s_X ⊕ ỹ` where `ỹ` is the mean embedding of the agent summary.
pub fn decode_summaries<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model,
    s_x: Var,
    s_y: Var,
    max_len: usize,
) -> Result<DecodedSummaries<T>> {
    let agent = greedy_decode(g, &model.agent, s_y, max_len)?;
    let emb = model.agent.embedding.lookup(g, &agent.tokens)?;
    let y_tilde = g.mean_rows(emb);
    let cond = g.concat_cols(&[s_x, y_tilde]);
    let customer = greedy_decode(g, &model.customer, cond, max_len)?;
    Ok(DecodedSummaries { customer, agent })
}

/// `a·b / (|a||b| + ε)` for two row vectors.
pub fn cosine_similarity<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let ab = g.mul(a, b);
    let dot = g.sum(ab);
    let aa = g.mul(a, a);
    let na = g.sum(aa);
    let na = g.sqrt(na);
    let bb = g.mul(b, b);
    let nb = g.sum(bb);
    let nb = g.sqrt(nb);
    let denom = g.mul(na, nb);
    let denom = g.shift(denom, T::from_f64_lossy(COSINE_EPS));
    g.div(dot, denom)
}

/// Average cosine similarity between `summary` and every utterance embedding.
pub fn mean_similarity<T: Scalar>(g: &mut Graph<T>, summary: Var, utterances: &[Var]) -> Result<Var> {
    if utterances.is_empty() {
        return Err(Error::Empty("no utterances to compare against".into()));
    }
    let sims: Vec<Var> = utterances.iter().map(|&u| cosine_similarity(g, summary, u)).collect();
    let all = g.concat_cols(&sims);
    let total = g.sum(all);
    Ok(g.scale(total, T::one() / T::from_usize(utterances.len()).unwrap()))
}

/// Graph nodes of the summarization branch for one dialogue.
#[derive(Debug, Clone)]
pub struct SummaryTerms {
    /// Customer plus agent mean similarity, to be maximized.
    pub similarity: Var,
    pub s_x: Var,
    pub s_y: Var,
    pub customer_tokens: Vec<u32>,
    pub agent_tokens: Vec<u32>,
}

/// Differentiable summarization objective: soft-decoded summaries are
/// re-encoded by the role encoders and compared with the utterances.
pub fn similarity_objective<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model,
    e_x: &[Var],
    e_y: &[Var],
    max_len: usize,
    tau: T,
) -> Result<SummaryTerms> {
    let (pooled_x, _) = sentence_self_attention(g, &model.customer.sentence_attention, e_x)?;
    let (pooled_y, _) = sentence_self_attention(g, &model.agent.sentence_attention, e_y)?;
    let (s_x, s_y) = summary_latent(g, model, pooled_x, pooled_y)?;
    let agent = soft_decode(g, &model.agent, s_y, max_len, tau)?;
    let emb = model.agent.embedding.soft_lookup(g, agent.probs)?;
    let y_tilde = g.mean_rows(emb);
    let cond = g.concat_cols(&[s_x, y_tilde]);
    let customer = soft_decode(g, &model.customer, cond, max_len, tau)?;
    let summary_x = model.encode_soft(g, Speaker::Customer, customer.probs)?;
    let summary_y = model.encode_soft(g, Speaker::Agent, agent.probs)?;
    let sim_x = mean_similarity(g, summary_x, e_x)?;
    let sim_y = mean_similarity(g, summary_y, e_y)?;
    Ok(SummaryTerms {
        similarity: g.add(sim_x, sim_y),
        s_x,
        s_y,
        customer_tokens: customer.tokens,
        agent_tokens: agent.tokens,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyEntry {
    pub role: Speaker,
    pub position: usize,
    pub predicted: String,
    pub substituted: String,
}

/// Lexicon tokens of `source` in first-occurrence order.
fn factual_candidates<'a>(source: &'a [String], lexicon: &FactualLexicon) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for t in source {
        if lexicon.contains(t) && !out.contains(&t.as_str()) {
            out.push(t);
        }
    }
    out
}

/// Replaces each decoded lexicon token by the source lexicon token the
/// decoder found most probable at that step. Same-role source tokens are
/// preferred; the other role is consulted only when the same role has
/// none. Ties go to the earliest occurrence, and a token with no source
/// candidate is kept. A candidate outside the vocabulary is scored with
/// the probability of UNK.
#[allow(clippy::too_many_arguments)]
pub fn partial_copy<T: Scalar>(
    role: Speaker,
    decoded: &[String],
    step_logits: &[Vec<T>],
    vocab: &Vocabulary,
    lexicon: &FactualLexicon,
    same_role_source: &[String],
    other_role_source: &[String],
) -> (Vec<String>, Vec<CopyEntry>) {
    let same = factual_candidates(same_role_source, lexicon);
    let candidates = if same.is_empty() { factual_candidates(other_role_source, lexicon) } else { same };
    let mut out = decoded.to_vec();
    let mut log = Vec::new();
    if candidates.is_empty() {
        return (out, log);
    }
    for (pos, tok) in decoded.iter().enumerate() {
        if !lexicon.contains(tok) {
            continue;
        }
        let probs = softmax(&step_logits[pos]);
        let mut best = candidates[0];
        let mut best_p = probs[vocab.id(best) as usize];
        for &c in &candidates[1..] {
            let p = probs[vocab.id(c) as usize];
            if p > best_p {
                best = c;
                best_p = p;
            }
        }
        out[pos] = best.to_string();
        log.push(CopyEntry { role, position: pos, predicted: tok.clone(), substituted: best.to_string() });
    }
    (out, log)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SummarizeOptions {
    pub max_len: usize,
    pub copy: bool,
}

impl Default for SummarizeOptions {
    fn default() -> Self {
        Self { max_len: DEFAULT_SUMMARY_MAX_LEN, copy: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryResult {
    pub id: String,
    pub customer_summary: Vec<String>,
    pub agent_summary: Vec<String>,
    /// Head-averaged sentence attention (n × n) per role.
    pub attention: BTreeMap<Speaker, Vec<Vec<f64>>>,
    pub copy_log: Vec<CopyEntry>,
}

/// One line of a summary JSONL file. Summaries are space-joined tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub id: String,
    pub customer_summary: String,
    pub agent_summary: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attention: BTreeMap<String, Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub copy_log: Option<Vec<CopyEntry>>,
}

impl SummaryResult {
    pub fn summary(&self, role: Speaker) -> &[String] {
        match role {
            Speaker::Customer => &self.customer_summary,
            Speaker::Agent => &self.agent_summary,
        }
    }

    pub fn to_record(&self) -> SummaryRecord {
        SummaryRecord {
            id: self.id.clone(),
            customer_summary: self.customer_summary.join(" "),
            agent_summary: self.agent_summary.join(" "),
            attention: self.attention.iter().map(|(k, v)| (k.as_str().to_string(), v.clone())).collect(),
            copy_log: Some(self.copy_log.clone()),
        }
    }
}

fn averaged_rows<T: Scalar>(w: &AttentionWeights<T>) -> Vec<Vec<f64>> {
    let m = w.averaged();
    (0..m.rows()).map(|r| m.row(r).iter().map(|v| v.to_f64_lossy()).collect()).collect()
}

/// Utterance embeddings of one dialogue and their attention-pooled forms.
#[derive(Debug, Clone)]
pub struct DialogueEncoding<T> {
    pub e_x: Vec<Var>,
    pub e_y: Vec<Var>,
    pub pooled_x: Var,
    pub pooled_y: Var,
    pub weights_x: AttentionWeights<T>,
    pub weights_y: AttentionWeights<T>,
}

pub fn encode_dialogue<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model,
    dialogue: &Dialogue,
    vocabs: (&Vocabulary, &Vocabulary),
) -> Result<DialogueEncoding<T>> {
    let pairs = pair_utterances(dialogue);
    if pairs.is_empty() {
        return Err(Error::Empty(format!("dialogue {:?} has no customer/agent pairs", dialogue.id)));
    }
    let mut e_x = Vec::with_capacity(pairs.len());
    let mut e_y = Vec::with_capacity(pairs.len());
    for p in &pairs {
        e_x.push(model.encode_tokens(g, Speaker::Customer, &vocabs.0.encode(&p.x))?.1);
        e_y.push(model.encode_tokens(g, Speaker::Agent, &vocabs.1.encode(&p.y))?.1);
    }
    let (pooled_x, weights_x) = sentence_self_attention(g, &model.customer.sentence_attention, &e_x)?;
    let (pooled_y, weights_y) = sentence_self_attention(g, &model.agent.sentence_attention, &e_y)?;
    Ok(DialogueEncoding { e_x, e_y, pooled_x, pooled_y, weights_x, weights_y })
}

/// `[e_X; e_Y]`: the greedy summaries re-encoded by the role encoders.
pub fn summary_embeddings<T: Scalar>(
    store: &ParamStore<T>,
    model: &Model,
    dialogue: &Dialogue,
    vocabs: (&Vocabulary, &Vocabulary),
    max_len: usize,
) -> Result<Vec<T>> {
    let mut g = Graph::new(store);
    let enc = encode_dialogue(&mut g, model, dialogue, vocabs)?;
    let (s_x, s_y) = summary_latent(&mut g, model, enc.pooled_x, enc.pooled_y)?;
    let decoded = decode_summaries(&mut g, model, s_x, s_y, max_len)?;
    let (_, ex) = model.encode_tokens(&mut g, Speaker::Customer, &decoded.customer.tokens)?;
    let (_, ey) = model.encode_tokens(&mut g, Speaker::Agent, &decoded.agent.tokens)?;
    Ok(g.value(ex).data().iter().chain(g.value(ey).data()).copied().collect())
}

/// `[s_X; s_Y]` of one dialogue.
pub fn summary_latents<T: Scalar>(
    store: &ParamStore<T>,
    model: &Model,
    dialogue: &Dialogue,
    vocabs: (&Vocabulary, &Vocabulary),
) -> Result<Vec<T>> {
    let mut g = Graph::new(store);
    let enc = encode_dialogue(&mut g, model, dialogue, vocabs)?;
    let (s_x, s_y) = summary_latent(&mut g, model, enc.pooled_x, enc.pooled_y)?;
    Ok(g.value(s_x).data().iter().chain(g.value(s_y).data()).copied().collect())
}

/// Encodes every pair, pools per role, decodes both summaries from the
/// mean latents and applies the factual copy (unless disabled).
pub fn summarize_dialogue<T: Scalar>(
    store: &ParamStore<T>,
    model: &Model,
    dialogue: &Dialogue,
    vocabs: (&Vocabulary, &Vocabulary),
    lexicon: &FactualLexicon,
    opts: SummarizeOptions,
) -> Result<SummaryResult> {
    let (customer_vocab, agent_vocab) = vocabs;
    let mut g = Graph::new(store);
    let enc = encode_dialogue(&mut g, model, dialogue, vocabs)?;
    let (s_x, s_y) = summary_latent(&mut g, model, enc.pooled_x, enc.pooled_y)?;
    let (wx, wy) = (enc.weights_x, enc.weights_y);
    let decoded = decode_summaries(&mut g, model, s_x, s_y, opts.max_len)?;

    let mut customer_summary = customer_vocab.decode(&decoded.customer.tokens);
    let mut agent_summary = agent_vocab.decode(&decoded.agent.tokens);
    let mut copy_log = Vec::new();
    if opts.copy {
        let source = |role| dialogue.tokens_of(role).map(str::to_string).collect::<Vec<_>>();
        let (cs, as_) = (source(Speaker::Customer), source(Speaker::Agent));
        let (out, log) =
            partial_copy(Speaker::Agent, &agent_summary, &decoded.agent.step_logits, agent_vocab, lexicon, &as_, &cs);
        agent_summary = out;
        copy_log.extend(log);
        let (out, log) = partial_copy(
            Speaker::Customer,
            &customer_summary,
            &decoded.customer.step_logits,
            customer_vocab,
            lexicon,
            &cs,
            &as_,
        );
        customer_summary = out;
        copy_log.extend(log);
    }
    let attention = BTreeMap::from([(Speaker::Customer, averaged_rows(&wx)), (Speaker::Agent, averaged_rows(&wy))]);
    Ok(SummaryResult { id: dialogue.id.clone(), customer_summary, agent_summary, attention, copy_log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::corpus::{FactRule, Turn};
    use crate::model::{tiny, Architecture};
    use crate::seqmodel::ParamBuilder;
    use crate::tensor::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn random_rows(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Var> {
        (0..n).map(|_| g.constant(Matrix::row_vector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()))).collect()
    }

    #[test]
    fn single_input_and_duplicates_pool_identically() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mha = {
            let mut pb = ParamBuilder::create(&mut store, &mut rng);
            MultiHeadAttention::build(&mut pb, "s", 8, 2).unwrap()
        };
        let mut g = Graph::new(&store);
        let e = random_rows(&mut g, &mut rng, 1, 8);
        let (one, w1) = sentence_self_attention(&mut g, &mha, &e).unwrap();
        assert!(w1.heads().iter().all(|h| h.data() == [1.0]));
        // output projection of the single value row
        let v = g.param(mha.value);
        let o = g.param(mha.output);
        let vp = g.matmul(e[0], v);
        let expect = g.matmul(vp, o);
        for (a, b) in g.value(one).data().iter().zip(g.value(expect).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let dup = vec![e[0]; 4];
        let (four, w4) = sentence_self_attention(&mut g, &mha, &dup).unwrap();
        for (a, b) in g.value(one).data().iter().zip(g.value(four).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for h in w4.heads() {
            for r in 0..4 {
                assert!((h.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(h.row(r).iter().all(|&x| x >= 0.0));
            }
        }
        assert!(sentence_self_attention(&mut g, &mha, &[]).is_err());
    }

    #[test]
    fn cosine_cases() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Matrix::row_vector(vec![1.0, 2.0, 0.0]));
        let b = g.constant(Matrix::row_vector(vec![0.0, 0.0, 3.0]));
        let c = cosine_similarity(&mut g, a, a);
        assert!((g.scalar(c) - 1.0).abs() < 1e-8);
        let o = cosine_similarity(&mut g, a, b);
        assert_eq!(g.scalar(o), 0.0);
        let s = mean_similarity(&mut g, a, &[a, b]).unwrap();
        assert!((g.scalar(s) - 0.5).abs() < 1e-8);
        let z = g.constant(Matrix::zeros(1, 3));
        let zz = cosine_similarity(&mut g, z, z);
        assert_eq!(g.scalar(zz), 0.0);
    }

    #[test]
    fn summary_latent_dataflow() {
        let (model, store) = Model::init::<f64>(tiny(Architecture::Recurrent), 2).unwrap();
        let mut g = Graph::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let px = random_rows(&mut g, &mut rng, 1, 8)[0];
        let py1 = random_rows(&mut g, &mut rng, 1, 8)[0];
        let py2 = random_rows(&mut g, &mut rng, 1, 8)[0];
        let (sx1, sy1) = summary_latent(&mut g, &model, px, py1).unwrap();
        let (sx2, sy2) = summary_latent(&mut g, &model, px, py2).unwrap();
        assert_eq!(g.value(sx1), g.value(sx2));
        assert_ne!(g.value(sy1), g.value(sy2));
        assert_eq!(g.shape(sx1), (1, 3));
        // agent summary invariant to s_X given s_Y
        let d1 = decode_summaries(&mut g, &model, sx1, sy1, 5).unwrap();
        let other = random_rows(&mut g, &mut rng, 1, 3)[0];
        let d3 = decode_summaries(&mut g, &model, other, sy1, 5).unwrap();
        assert_eq!(d1.agent, d3.agent);
    }

    fn lexicon(tokens: &[&str]) -> FactualLexicon {
        let mut l = FactualLexicon::default();
        for t in tokens {
            l.insert(*t, FactRule::AlphanumericCode);
        }
        l
    }

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn copy_replaces_with_source_code() {
        let vocab = Vocabulary::from_tokens(Speaker::Agent, s(&["ref", "is", "lzludtvi", "qnvdz4rt"]));
        let lex = lexicon(&["lzludtvi", "qnvdz4rt"]);
        let decoded = s(&["ref", "is", "lzludtvi"]);
        let logits = vec![vec![0.0f64; vocab.size()]; 3];
        let (out, log) = partial_copy(Speaker::Agent, &decoded, &logits, &vocab, &lex, &s(&["the", "qnvdz4rt"]), &[]);
        assert_eq!(out, s(&["ref", "is", "qnvdz4rt"]));
        assert_eq!(log.len(), 1);
        assert_eq!((log[0].position, log[0].substituted.as_str()), (2, "qnvdz4rt"));
    }

    #[test]
    fn copy_prefers_most_probable_candidate_then_earliest() {
        let vocab = Vocabulary::from_tokens(Speaker::Agent, s(&["aaaa1111", "bbbb2222", "cccc3333"]));
        let lex = lexicon(&["aaaa1111", "bbbb2222", "cccc3333"]);
        let decoded = s(&["cccc3333"]);
        let mut logits = vec![vec![0.0f64; vocab.size()]];
        logits[0][vocab.id("bbbb2222") as usize] = 3.0;
        let source = s(&["aaaa1111", "x", "bbbb2222"]);
        let (out, _) = partial_copy(Speaker::Agent, &decoded, &logits, &vocab, &lex, &source, &[]);
        assert_eq!(out, s(&["bbbb2222"]));
        let flat = vec![vec![0.0f64; vocab.size()]];
        let (out, _) = partial_copy(Speaker::Agent, &decoded, &flat, &vocab, &lex, &source, &[]);
        assert_eq!(out, s(&["aaaa1111"]));
    }

    #[test]
    fn copy_role_preference_and_fallback() {
        let vocab = Vocabulary::from_tokens(Speaker::Customer, s(&["aaaa1111", "bbbb2222"]));
        let lex = lexicon(&["aaaa1111", "bbbb2222", "zzzz9999"]);
        let mut logits = vec![vec![0.0f64; vocab.size()]];
        logits[0][vocab.id("bbbb2222") as usize] = 5.0;
        let decoded = s(&["zzzz9999"]);
        let (out, _) =
            partial_copy(Speaker::Customer, &decoded, &logits, &vocab, &lex, &s(&["aaaa1111"]), &s(&["bbbb2222"]));
        assert_eq!(out, s(&["aaaa1111"]));
        let (out, _) = partial_copy(Speaker::Customer, &decoded, &logits, &vocab, &lex, &[], &s(&["bbbb2222"]));
        assert_eq!(out, s(&["bbbb2222"]));
        let (out, log) = partial_copy(Speaker::Customer, &decoded, &logits, &vocab, &lex, &[], &[]);
        assert_eq!(out, decoded);
        assert!(log.is_empty());
        let plain = s(&["hello"]);
        let (out, log) = partial_copy(Speaker::Customer, &plain, &logits, &vocab, &lex, &s(&["aaaa1111"]), &[]);
        assert_eq!(out, plain);
        assert!(log.is_empty());
    }

    fn dialogue() -> Dialogue {
        let turn = |sp, t: &str| Turn { speaker: sp, tokens: s(&t.split(' ').collect::<Vec<_>>()) };
        Dialogue {
            id: "d1".into(),
            turns: vec![
                turn(Speaker::Customer, "book a hotel"),
                turn(Speaker::Agent, "booked ref ab12cd34"),
                turn(Speaker::Customer, "thanks"),
                turn(Speaker::Agent, "bye"),
            ],
            domains: BTreeSet::new(),
        }
    }

    #[test]
    fn summarize_is_deterministic_and_well_formed() {
        for arch in [Architecture::Recurrent, Architecture::SelfAttentive] {
            let mut cfg = tiny(arch);
            let cv = Vocabulary::from_tokens(Speaker::Customer, s(&["book", "a", "hotel", "thanks", "ab12cd34"]));
            let av = Vocabulary::from_tokens(Speaker::Agent, s(&["booked", "ref", "ab12cd34", "bye"]));
            cfg.customer_vocab = cv.size();
            cfg.agent_vocab = av.size();
            let (model, store) = Model::init::<f32>(cfg, 3).unwrap();
            let lex = lexicon(&["ab12cd34"]);
            let opts = SummarizeOptions { max_len: 6, copy: true };
            let a = summarize_dialogue(&store, &model, &dialogue(), (&cv, &av), &lex, opts).unwrap();
            let b = summarize_dialogue(&store, &model, &dialogue(), (&cv, &av), &lex, opts).unwrap();
            assert_eq!(a, b);
            assert!(!a.customer_summary.is_empty() && a.customer_summary.len() <= 6);
            for rows in a.attention.values() {
                assert_eq!(rows.len(), 2);
                for r in rows {
                    assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
            for e in &a.copy_log {
                assert!(dialogue().turns.iter().any(|t| t.tokens.contains(&e.substituted)));
            }
            let record = serde_json::to_value(a.to_record()).unwrap();
            for key in ["id", "customer_summary", "agent_summary", "attention", "copy_log"] {
                assert!(record.get(key).is_some(), "{key}");
            }
            let empty = Dialogue { id: "e".into(), turns: vec![], domains: BTreeSet::new() };
            assert!(summarize_dialogue(&store, &model, &empty, (&cv, &av), &lex, opts).is_err());
        }
    }

    #[test]
    fn similarity_gradient_reaches_every_block() {
        for arch in [Architecture::Recurrent, Architecture::SelfAttentive] {
            let (model, store) = Model::init::<f64>(tiny(arch), 4).unwrap();
            let mut g = Graph::new(&store);
            let mut e_x = Vec::new();
            let mut e_y = Vec::new();
            for (x, y) in [(vec![4u32, 5], vec![6u32]), (vec![7], vec![5, 8])] {
                e_x.push(model.encode_tokens(&mut g, Speaker::Customer, &x).unwrap().1);
                e_y.push(model.encode_tokens(&mut g, Speaker::Agent, &y).unwrap().1);
            }
            let terms = similarity_objective(&mut g, &model, &e_x, &e_y, 4, 0.5).unwrap();
            let v = g.scalar(terms.similarity);
            assert!((-2.0..=2.0).contains(&v));
            let grads = g.backward(terms.similarity).into_param_grads();
            let nonzero = |name: &str| {
                let id = store.id(name).unwrap();
                grads[id.0].as_ref().is_some_and(|m| m.data().iter().any(|&x| x != 0.0))
            };
            for name in [
                "customer/embedding",
                "agent/output/weight",
                "customer/sentence_attention/value",
                "agent/sentence_attention/query",
                "latent/customer_posterior/mean/weight",
                "latent/agent_posterior/mean/weight",
            ] {
                assert!(nonzero(name), "{arch} {name}");
            }
            let dec = if arch == Architecture::Recurrent {
                "agent/decoder/cell/weight"
            } else {
                "agent/decoder/ff_in/weight"
            };
            assert!(nonzero(dec), "{dec}");
        }
    }
}
