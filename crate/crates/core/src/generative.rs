//! Joint reconstruction of a customer/agent utterance pair, the ELBO, and
//! sampling of new single-turn exchanges.
//!
//! The agent side is decoded first from `z_y`; its soft re-encoding `ỹ`
//! then conditions the customer decoder together with `z_x`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::corpus::{Speaker, BOS, EOS, PAD, SPECIAL_COUNT, UNK};
use crate::error::{Error, Result};
use crate::latent::{
    kl_divergence_var, kl_standard_normal_var, posterior_agent, posterior_customer, prior_agent, reparameterize,
    GaussianVars,
};
use crate::model::{Model, RoleModules};
use crate::tensor::{argmax, softmax_into, Matrix, Scalar};

/// `softmax(logits / tau)`
pub fn soft_argmax<T: Scalar>(logits: &[T], tau: T) -> Result<Vec<T>> {
    check_tau(tau)?;
    let scaled: Vec<T> = logits.iter().map(|&l| l / tau).collect();
    let mut out = vec![T::zero(); logits.len()];
    softmax_into(&scaled, None, &mut out);
    Ok(out)
}

/// Row-wise [`soft_argmax`] inside a graph; disallowed entries get probability 0.
pub fn soft_argmax_rows<T: Scalar>(g: &mut Graph<T>, logits: Var, tau: T, allowed: Option<&[bool]>) -> Result<Var> {
    check_tau(tau)?;
    let scaled = if tau == T::one() { logits } else { g.scale(logits, T::one() / tau) };
    Ok(g.softmax_rows(scaled, allowed))
}

fn check_tau<T: Scalar>(tau: T) -> Result<()> {
    if tau > T::zero() && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("soft-argmax temperature must be positive, got {tau}")))
    }
}

/// Replaces each non-special token by UNK with probability `rate`.
pub fn word_dropout<R: Rng>(tokens: &[u32], rate: f64, rng: &mut R) -> Vec<u32> {
    if rate <= 0.0 {
        return tokens.to_vec();
    }
    tokens
        .iter()
        .map(|&t| if (t as usize) >= SPECIAL_COUNT && rng.random_bool(rate.min(1.0)) { UNK } else { t })
        .collect()
}

pub fn standard_normal<T: Scalar, R: Rng>(rng: &mut R, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(z)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Word dropout on decoder inputs, sampled latents.
    Train,
    /// Clean decoder inputs.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairOptions {
    pub mode: Mode,
    pub word_dropout: f64,
    pub tau: f64,
    /// Use posterior means instead of samples.
    pub mean_latents: bool,
}

impl PairOptions {
    pub fn train(word_dropout: f64, tau: f64) -> Self {
        Self { mode: Mode::Train, word_dropout, tau, mean_latents: false }
    }

    pub fn eval(tau: f64) -> Self {
        Self { mode: Mode::Eval, word_dropout: 0.0, tau, mean_latents: false }
    }

    pub fn eval_mean(tau: f64) -> Self {
        Self { mean_latents: true, ..Self::eval(tau) }
    }
}

/// Graph nodes for one pair's reconstruction.
#[derive(Debug, Clone)]
pub struct PairGraph {
    pub nll_customer: Var,
    pub nll_agent: Var,
    pub kl_customer: Var,
    pub kl_agent: Var,
    pub e_x: Var,
    pub e_y: Var,
    pub q_x: GaussianVars,
    pub q_y: GaussianVars,
    pub p_y: GaussianVars,
    pub z_x: Var,
    pub z_y: Var,
    pub customer_tokens: usize,
    pub agent_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLossBreakdown<T> {
    /// Nats per sequence.
    pub nll_customer: T,
    pub nll_agent: T,
    pub kl_customer: T,
    pub kl_agent: T,
    /// Target tokens including the closing EOS.
    pub customer_tokens: usize,
    pub agent_tokens: usize,
}

impl PairGraph {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> PairLossBreakdown<T> {
        PairLossBreakdown {
            nll_customer: g.scalar(self.nll_customer),
            nll_agent: g.scalar(self.nll_agent),
            kl_customer: g.scalar(self.kl_customer),
            kl_agent: g.scalar(self.kl_agent),
            customer_tokens: self.customer_tokens,
            agent_tokens: self.agent_tokens,
        }
    }

    /// `−(NLL_x + NLL_y) − w (KL_x + KL_y)` as a graph node.
    pub fn elbo_var<T: Scalar>(&self, g: &mut Graph<T>, kl_weight: T) -> Var {
        let nll = g.add(self.nll_customer, self.nll_agent);
        let kl = g.add(self.kl_customer, self.kl_agent);
        let kl = g.scale(kl, kl_weight);
        let loss = g.add(nll, kl);
        g.neg(loss)
    }
}

/// `−(NLL_x + NLL_y) − kl_weight · (KL_x + KL_y)`, to be maximized.
pub fn elbo<T: Scalar>(b: &PairLossBreakdown<T>, kl_weight: T) -> T {
    -(b.nll_customer + b.nll_agent) - kl_weight * (b.kl_customer + b.kl_agent)
}

fn check_tokens(what: &str, ids: &[u32]) -> Result<()> {
    if ids.is_empty() {
        Err(Error::Empty(format!("{what} utterance")))
    } else {
        Ok(())
    }
}

fn with_bos(ids: &[u32]) -> Vec<u32> {
    std::iter::once(BOS).chain(ids.iter().copied()).collect()
}

fn with_eos(ids: &[u32]) -> Vec<u32> {
    ids.iter().copied().chain(std::iter::once(EOS)).collect()
}

/// Teacher-forced decode. Returns the summed NLL of `targets` and the logits.
pub fn teacher_forced<T: Scalar>(
    g: &mut Graph<T>,
    role: &RoleModules,
    inputs: &[u32],
    targets: &[u32],
    cond: Var,
) -> Result<(Var, Var)> {
    assert_eq!(inputs.len(), targets.len());
    let emb = role.embedding.lookup(g, inputs)?;
    let v = role.decoder.decode_sequence(g, emb, cond)?;
    let logits = role.output.logits(g, v)?;
    let lsm = g.log_softmax_rows(logits);
    for &t in targets {
        if t as usize >= role.output.vocab_size {
            return Err(Error::TokenOutOfRange { id: t as usize, size: role.output.vocab_size });
        }
    }
    let picks: Vec<(usize, usize)> = targets.iter().enumerate().map(|(i, &t)| (i, t as usize)).collect();
    let picked = g.pick(lsm, &picks);
    let total = g.sum(picked);
    Ok((g.neg(total), logits))
}

/// Agent-then-customer decoding for given latents. `x_inputs` and
/// `y_inputs` are the (possibly word-dropped) decoder inputs without BOS.
#[allow(clippy::too_many_arguments)]
fn decode_pair<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model,
    x: &[u32],
    y: &[u32],
    x_inputs: &[u32],
    y_inputs: &[u32],
    z_x: Var,
    z_y: Var,
    tau: T,
) -> Result<(Var, Var)> {
    let (nll_y, y_logits) = teacher_forced(g, &model.agent, &with_bos(y_inputs), &with_eos(y), z_y)?;
    // the last position predicts EOS and is not part of the utterance
    let y_logits = g.slice_rows(y_logits, 0, y.len());
    let soft_y = soft_argmax_rows(g, y_logits, tau, None)?;
    let y_tilde = model.agent.embedding.soft_lookup(g, soft_y)?;
    let y_tilde = g.mean_rows(y_tilde);
    let cond_x = g.concat_cols(&[z_x, y_tilde]);
    let (nll_x, _) = teacher_forced(g, &model.customer, &with_bos(x_inputs), &with_eos(x), cond_x)?;
    Ok((nll_x, nll_y))
}

/// Builds the full reconstruction of one pair in `g`.
pub fn reconstruct_pair_graph<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    model: &Model,
    x: &[u32],
    y: &[u32],
    opts: &PairOptions,
    rng: &mut R,
) -> Result<PairGraph> {
    check_tokens("customer", x)?;
    check_tokens("agent", y)?;
    let (y_inputs, x_inputs) = match opts.mode {
        Mode::Train => (word_dropout(y, opts.word_dropout, rng), word_dropout(x, opts.word_dropout, rng)),
        Mode::Eval => (y.to_vec(), x.to_vec()),
    };
    let latent = model.config.latent_dim;
    let (_, e_x) = model.encode_tokens(g, Speaker::Customer, x)?;
    let (_, e_y) = model.encode_tokens(g, Speaker::Agent, y)?;
    let q_x = posterior_customer(g, &model.customer_posterior, e_x)?;
    let z_x = if opts.mean_latents { q_x.mean } else { reparameterize(g, &q_x, &standard_normal(rng, latent))? };
    let q_y = posterior_agent(g, &model.agent_posterior, e_y, z_x)?;
    let z_y = if opts.mean_latents { q_y.mean } else { reparameterize(g, &q_y, &standard_normal(rng, latent))? };
    let p_y = prior_agent(g, &model.agent_prior, z_x)?;
    let tau = T::from_f64_lossy(opts.tau);
    let (nll_customer, nll_agent) = decode_pair(g, model, x, y, &x_inputs, &y_inputs, z_x, z_y, tau)?;
    let kl_customer = kl_standard_normal_var(g, &q_x)?;
    let kl_agent = kl_divergence_var(g, &q_y, &p_y)?;
    Ok(PairGraph {
        nll_customer,
        nll_agent,
        kl_customer,
        kl_agent,
        e_x,
        e_y,
        q_x,
        q_y,
        p_y,
        z_x,
        z_y,
        customer_tokens: x.len() + 1,
        agent_tokens: y.len() + 1,
    })
}

pub fn reconstruct_pair<T: Scalar, R: Rng>(
    store: &ParamStore<T>,
    model: &Model,
    x: &[u32],
    y: &[u32],
    opts: &PairOptions,
    rng: &mut R,
) -> Result<PairLossBreakdown<T>> {
    let mut g = Graph::new(store);
    let pg = reconstruct_pair_graph(&mut g, model, x, y, opts, rng)?;
    Ok(pg.breakdown(&g))
}

/// `(log p(x | ỹ, z_x), log p(y | z_y))` for explicit latent values.
pub fn pair_log_likelihood<T: Scalar>(
    store: &ParamStore<T>,
    model: &Model,
    x: &[u32],
    y: &[u32],
    z_x: &[T],
    z_y: &[T],
    tau: f64,
) -> Result<(T, T)> {
    check_tokens("customer", x)?;
    check_tokens("agent", y)?;
    let mut g = Graph::new(store);
    let zx = g.constant(Matrix::row_vector(z_x.to_vec()));
    let zy = g.constant(Matrix::row_vector(z_y.to_vec()));
    let (nx, ny) = decode_pair(&mut g, model, x, y, x, y, zx, zy, T::from_f64_lossy(tau))?;
    Ok((-g.scalar(nx), -g.scalar(ny)))
}

fn allowed_tokens(vocab: usize, first_step: bool) -> Vec<bool> {
    (0..vocab).map(|i| !(i == PAD as usize || i == BOS as usize || (first_step && i == EOS as usize))).collect()
}

/// Tokens emitted by greedy decoding (no BOS, no EOS) and the logits of
/// the step that produced each.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyDecode<T> {
    pub tokens: Vec<u32>,
    pub step_logits: Vec<Vec<T>>,
}

/// Greedy decoding from BOS. PAD and BOS are never emitted and EOS is
/// not allowed as the first token, so the output has 1..=max_len tokens.
pub fn greedy_decode<T: Scalar>(
    g: &mut Graph<T>,
    role: &RoleModules,
    cond: Var,
    max_len: usize,
) -> Result<GreedyDecode<T>> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    let vocab = role.output.vocab_size;
    let mut state = role.decoder.initial_state(g);
    let mut prev = BOS;
    let mut out = GreedyDecode { tokens: Vec::new(), step_logits: Vec::new() };
    for step in 0..max_len {
        let emb = role.embedding.lookup(g, &[prev])?;
        let (v, next_state) = role.decoder.step(g, emb, cond, state)?;
        state = next_state;
        let logits = role.output.logits(g, v)?;
        let row = g.value(logits).row(0).to_vec();
        let tok = argmax(&row, Some(&allowed_tokens(vocab, step == 0))) as u32;
        if tok == EOS {
            break;
        }
        out.tokens.push(tok);
        out.step_logits.push(row);
        prev = tok;
    }
    Ok(out)
}

/// Differentiable decode: each step feeds the expected embedding under
/// `soft_argmax(logits / tau)` back in. Stops when the most likely token
/// is EOS (never at the first step) or after `max_len` steps.
#[derive(Debug, Clone)]
pub struct SoftDecode {
    /// `t × vocab`, one distribution per emitted position.
    pub probs: Var,
    /// Argmax token of each emitted position.
    pub tokens: Vec<u32>,
}

pub fn soft_decode<T: Scalar>(
    g: &mut Graph<T>,
    role: &RoleModules,
    cond: Var,
    max_len: usize,
    tau: T,
) -> Result<SoftDecode> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    let vocab = role.output.vocab_size;
    let mut state = role.decoder.initial_state(g);
    let mut input = role.embedding.lookup(g, &[BOS])?;
    let mut rows = Vec::new();
    let mut tokens = Vec::new();
    for step in 0..max_len {
        let (v, next_state) = role.decoder.step(g, input, cond, state)?;
        state = next_state;
        let logits = role.output.logits(g, v)?;
        let allowed = allowed_tokens(vocab, step == 0);
        let probs = soft_argmax_rows(g, logits, tau, Some(&allowed))?;
        let tok = argmax(g.value(logits).row(0), Some(&allowed)) as u32;
        if tok == EOS {
            break;
        }
        rows.push(probs);
        tokens.push(tok);
        input = role.embedding.soft_lookup(g, probs)?;
    }
    Ok(SoftDecode { probs: g.concat_rows(&rows), tokens })
}

/// Samples `z_x ~ N(0, I)` and `z_y ~ p(z_y | z_x)`, then greedily decodes
/// the agent utterance and, conditioned on its embedding, the customer one.
/// Returns `(customer, agent)` token ids.
pub fn generate_pair<T: Scalar, R: Rng>(
    store: &ParamStore<T>,
    model: &Model,
    rng: &mut R,
    max_len: usize,
) -> Result<(Vec<u32>, Vec<u32>)> {
    let latent = model.config.latent_dim;
    let mut g = Graph::new(store);
    let z_x = g.constant(Matrix::row_vector(standard_normal(rng, latent)));
    let p_y = prior_agent(&mut g, &model.agent_prior, z_x)?;
    let z_y = reparameterize(&mut g, &p_y, &standard_normal(rng, latent))?;
    let agent = greedy_decode(&mut g, &model.agent, z_y, max_len)?;
    let y_tilde = model.agent.embedding.lookup(&mut g, &agent.tokens)?;
    let y_tilde = g.mean_rows(y_tilde);
    let cond = g.concat_cols(&[z_x, y_tilde]);
    let customer = greedy_decode(&mut g, &model.customer, cond, max_len)?;
    Ok((customer.tokens, agent.tokens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::{kl_divergence, GaussianParams};
    use crate::model::{tiny, Architecture};
    use crate::tensor::softmax;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const ARCHS: [Architecture; 2] = [Architecture::Recurrent, Architecture::SelfAttentive];

    #[test]
    fn soft_argmax_cases() {
        let mut logits = vec![0.0f64; 10];
        logits[0] = 1.0;
        let p = soft_argmax(&logits, 0.01).unwrap();
        assert!(p[0] >= 1.0 - 9.0 * (-100.0f64).exp());
        let u = soft_argmax(&[0.3f64; 4], 0.2).unwrap();
        assert!(u.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let l = [0.5f32, -1.0, 2.0];
        assert_eq!(soft_argmax(&l, 1.0).unwrap(), softmax(&l));
        assert!(soft_argmax(&l, 0.0).is_err());
        assert!(soft_argmax(&l, -1.0).is_err());
    }

    #[test]
    fn word_dropout_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let toks: Vec<u32> = vec![BOS, 5, 6, EOS, 7];
        assert_eq!(word_dropout(&toks, 0.0, &mut rng), toks);
        assert_eq!(word_dropout(&toks, 1.0, &mut rng), vec![BOS, UNK, UNK, EOS, UNK]);
        let many = vec![9u32; 100_000];
        let dropped = word_dropout(&many, 0.4, &mut rng);
        let frac = dropped.iter().filter(|&&t| t == UNK).count() as f64 / many.len() as f64;
        assert!((0.39..=0.41).contains(&frac), "{frac}");
    }

    #[test]
    fn kl_terms_match_closed_form() {
        for arch in ARCHS {
            let (model, store) = Model::init::<f64>(tiny(arch), 1).unwrap();
            let mut g = Graph::new(&store);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let pg =
                reconstruct_pair_graph(&mut g, &model, &[4, 5, 6], &[7, 8], &PairOptions::train(0.4, 0.01), &mut rng)
                    .unwrap();
            let (qx, qy, py) = (pg.q_x.values(&g), pg.q_y.values(&g), pg.p_y.values(&g));
            let b = pg.breakdown(&g);
            assert!((b.kl_customer - kl_divergence(&qx, &GaussianParams::standard(3))).abs() < 1e-12);
            assert!((b.kl_agent - kl_divergence(&qy, &py)).abs() < 1e-12);
            assert!(b.nll_customer > 0.0 && b.nll_agent > 0.0);
            assert_eq!((b.customer_tokens, b.agent_tokens), (4, 3));
        }
    }

    #[test]
    fn eval_mode_deterministic_given_seed() {
        for arch in ARCHS {
            let (model, store) = Model::init::<f32>(tiny(arch), 1).unwrap();
            let run = || {
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                reconstruct_pair(&store, &model, &[4, 5], &[6], &PairOptions::eval(0.01), &mut rng).unwrap()
            };
            let (a, b) = (run(), run());
            assert_eq!(a.nll_customer.to_bits(), b.nll_customer.to_bits());
            assert_eq!(a.nll_agent.to_bits(), b.nll_agent.to_bits());
        }
    }

    #[test]
    fn single_token_sequences_have_finite_positive_nll() {
        let (model, store) = Model::init::<f64>(tiny(Architecture::Recurrent), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = reconstruct_pair(&store, &model, &[4], &[5], &PairOptions::eval(0.01), &mut rng).unwrap();
        assert!(b.nll_customer.is_finite() && b.nll_customer > 0.0);
        assert!(b.nll_agent.is_finite() && b.nll_agent > 0.0);
        assert!(reconstruct_pair(&store, &model, &[], &[5], &PairOptions::eval(0.01), &mut rng).is_err());
    }

    #[test]
    fn elbo_algebra() {
        let b = PairLossBreakdown {
            nll_customer: 3.0,
            nll_agent: 2.0,
            kl_customer: 1.0,
            kl_agent: 0.5,
            customer_tokens: 1,
            agent_tokens: 1,
        };
        assert_eq!(elbo(&b, 0.0), -5.0);
        assert!(elbo(&b, 0.8) <= elbo(&b, 0.4));
        assert_eq!(elbo(&b, 0.8), -5.0 - 0.8 * 1.5);
    }

    #[test]
    fn elbo_var_matches_scalar_form() {
        let (model, store) = Model::init::<f64>(tiny(Architecture::SelfAttentive), 1).unwrap();
        let mut g = Graph::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pg = reconstruct_pair_graph(&mut g, &model, &[4, 5], &[6, 7], &PairOptions::eval(0.01), &mut rng).unwrap();
        let v = pg.elbo_var(&mut g, 0.3);
        assert!((g.scalar(v) - elbo(&pg.breakdown(&g), 0.3)).abs() < 1e-12);
    }

    #[test]
    fn agent_nll_ignores_customer_decoder() {
        for arch in ARCHS {
            let (model, mut store) = Model::init::<f64>(tiny(arch), 2).unwrap();
            let run = |store: &ParamStore<f64>| {
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                reconstruct_pair(store, &model, &[4, 5, 6], &[7, 8], &PairOptions::eval(0.5), &mut rng).unwrap()
            };
            let base = run(&store);
            let cust = store.id("customer/output/weight").unwrap();
            store.get_mut(cust).data_mut()[3] += 0.5;
            let after = run(&store);
            assert_eq!(base.nll_agent.to_bits(), after.nll_agent.to_bits());
            assert_ne!(base.nll_customer, after.nll_customer);

            let agent = store.id("agent/output/weight").unwrap();
            store.get_mut(agent).data_mut()[5] += 0.5;
            let again = run(&store);
            assert_ne!(after.nll_customer, again.nll_customer);
        }
    }

    #[test]
    fn greedy_decode_contract() {
        for arch in ARCHS {
            let (model, store) = Model::init::<f32>(tiny(arch), 6).unwrap();
            for seed in 0..5 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (c, a) = generate_pair(&store, &model, &mut rng, 7).unwrap();
                for seq in [&c, &a] {
                    assert!(!seq.is_empty() && seq.len() <= 7);
                    assert!(seq.iter().all(|&t| t != PAD && t != BOS && t != EOS));
                }
                let mut rng2 = ChaCha8Rng::seed_from_u64(seed);
                assert_eq!((c, a), generate_pair(&store, &model, &mut rng2, 7).unwrap());
            }
            let mut g = Graph::new(&store);
            let cond = g.constant(Matrix::zeros(1, 3));
            let d = greedy_decode(&mut g, &model.agent, cond, 5).unwrap();
            for (step, (t, logits)) in d.tokens.iter().zip(&d.step_logits).enumerate() {
                let allowed: Vec<f32> = logits
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != PAD as usize && *i != BOS as usize && (step > 0 || *i != EOS as usize))
                    .map(|(_, &l)| l)
                    .collect();
                let max = allowed.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                assert_eq!(logits[*t as usize], max);
            }
            assert!(greedy_decode(&mut g, &model.agent, cond, 0).is_err());
        }
    }

    #[test]
    fn soft_decode_rows_are_distributions_and_track_argmax() {
        for arch in ARCHS {
            let (model, store) = Model::init::<f64>(tiny(arch), 8).unwrap();
            let mut g = Graph::new(&store);
            let cond = g.constant(Matrix::row_vector(vec![0.3, -0.2, 0.9]));
            let sd = soft_decode(&mut g, &model.agent, cond, 6, 0.01).unwrap();
            let p = g.value(sd.probs).clone();
            assert_eq!(p.rows(), sd.tokens.len());
            for r in 0..p.rows() {
                let row = p.row(r);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert_eq!(row[PAD as usize], 0.0);
                assert_eq!(argmax(row, None) as u32, sd.tokens[r]);
            }
        }
    }
}
