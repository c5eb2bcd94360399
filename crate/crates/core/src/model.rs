//! Assembles every learnable block into one model and provides the
//! encoding helpers the generative and summarization paths share.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::corpus::Speaker;
use crate::error::{Error, Result};
use crate::latent::{GaussianProjection, LatentConfig, PriorMlp};
use crate::seqmodel::{
    pool_mean, BiLstmEncoder, ContextualSequence, Decoder, EmbeddingTable, Encoder, Linear, LstmCell,
    MultiHeadAttention, OutputLayer, ParamBuilder, RecurrentDecoder, SelfAttentiveDecoder, SelfAttentiveEncoder,
    TransformerBlock,
};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Recurrent,
    SelfAttentive,
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recurrent" => Ok(Self::Recurrent),
            "selfattentive" => Ok(Self::SelfAttentive),
            other => Err(Error::InvalidArgument(format!("unknown architecture {other:?}"))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Recurrent => "recurrent",
            Self::SelfAttentive => "selfattentive",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub embed_dim: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub prior_hidden: usize,
    pub heads: usize,
    pub customer_vocab: usize,
    pub agent_vocab: usize,
    /// Sinusoidal position encodings in the self-attentive blocks.
    pub positions: bool,
    /// Size of the optional domain-classifier head; 0 means none.
    pub labels: usize,
}

impl ModelConfig {
    pub fn new(arch: Architecture, customer_vocab: usize, agent_vocab: usize) -> Self {
        Self {
            arch,
            embed_dim: 300,
            hidden: 600,
            latent_dim: 300,
            prior_hidden: 600,
            heads: 10,
            customer_vocab,
            agent_vocab,
            positions: true,
            labels: 0,
        }
    }

    pub fn encoder_dim(&self) -> usize {
        match self.arch {
            Architecture::Recurrent => 2 * self.hidden,
            Architecture::SelfAttentive => self.embed_dim,
        }
    }

    pub fn latent(&self) -> LatentConfig {
        LatentConfig { latent_dim: self.latent_dim, prior_hidden: self.prior_hidden }
    }

    fn validate(&self) -> Result<()> {
        let dims = [self.embed_dim, self.hidden, self.latent_dim, self.prior_hidden, self.heads];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        if self.customer_vocab <= crate::corpus::SPECIAL_COUNT || self.agent_vocab <= crate::corpus::SPECIAL_COUNT {
            return Err(Error::InvalidArgument("vocabularies hold no ordinary tokens".into()));
        }
        Ok(())
    }
}

/// Everything owned by one speaker role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoleModules {
    pub embedding: EmbeddingTable,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub output: OutputLayer,
    pub sentence_attention: MultiHeadAttention,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Model {
    pub config: ModelConfig,
    pub customer: RoleModules,
    pub agent: RoleModules,
    pub customer_posterior: GaussianProjection,
    pub agent_posterior: GaussianProjection,
    pub agent_prior: PriorMlp,
    pub classifier: Option<Linear>,
}

/// Offset mixed into the seed for the classifier head so adding it never
/// shifts the initialization of the rest of the model.
const CLASSIFIER_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

impl Model {
    /// Fresh parameters from `seed`.
    pub fn init<T: Scalar>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = {
            let mut pb = ParamBuilder::create(&mut store, &mut rng);
            Self::build_core(&mut pb, &config)?
        };
        if config.labels > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ CLASSIFIER_SEED_OFFSET);
            let mut pb = ParamBuilder::create(&mut store, &mut rng);
            model.classifier = Some(Linear::build(&mut pb, "classifier", 2 * config.latent_dim, config.labels, true)?);
        }
        Ok((model, store))
    }

    /// Rebinds to parameters already in `store`, checking names and shapes.
    pub fn bind<T: Scalar>(config: ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::bind(store);
        let mut model = Self::build_core(&mut pb, &config)?;
        if config.labels > 0 {
            model.classifier = Some(Linear::build(&mut pb, "classifier", 2 * config.latent_dim, config.labels, true)?);
        }
        Ok(model)
    }

    fn build_core<T: Scalar>(pb: &mut ParamBuilder<T>, cfg: &ModelConfig) -> Result<Self> {
        let customer_cond = cfg.latent_dim + cfg.embed_dim;
        let customer = pb.scoped("customer", |pb| build_role(pb, cfg, cfg.customer_vocab, customer_cond))?;
        let agent = pb.scoped("agent", |pb| build_role(pb, cfg, cfg.agent_vocab, cfg.latent_dim))?;
        let enc = cfg.encoder_dim();
        pb.push("latent");
        let customer_posterior = GaussianProjection::build(pb, "customer_posterior", enc, cfg.latent_dim);
        let agent_posterior = GaussianProjection::build(pb, "agent_posterior", enc + cfg.latent_dim, cfg.latent_dim);
        let agent_prior = PriorMlp::build(pb, cfg.latent());
        pb.pop();
        Ok(Self {
            config: cfg.clone(),
            customer,
            agent,
            customer_posterior: customer_posterior?,
            agent_posterior: agent_posterior?,
            agent_prior: agent_prior?,
            classifier: None,
        })
    }

    /// Adds a fresh classifier head on `[s_X; s_Y]` with `labels` outputs,
    /// replacing any existing one.
    pub fn attach_classifier<T: Scalar>(&mut self, store: &mut ParamStore<T>, labels: usize, seed: u64) -> Result<()> {
        if labels == 0 {
            return Err(Error::InvalidArgument("classifier needs at least one label".into()));
        }
        if self.classifier.is_some() || store.id("classifier/weight").is_some() {
            return Err(Error::InvalidArgument("model already has a classifier head".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ CLASSIFIER_SEED_OFFSET);
        let mut pb = ParamBuilder::create(store, &mut rng);
        self.classifier = Some(Linear::build(&mut pb, "classifier", 2 * self.config.latent_dim, labels, true)?);
        self.config.labels = labels;
        Ok(())
    }

    pub fn role(&self, role: Speaker) -> &RoleModules {
        match role {
            Speaker::Customer => &self.customer,
            Speaker::Agent => &self.agent,
        }
    }

    /// Embeds and contextualizes token ids, then mean-pools into `1 × enc`.
    pub fn encode_tokens<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        role: Speaker,
        ids: &[u32],
    ) -> Result<(ContextualSequence, Var)> {
        let r = self.role(role);
        let emb = r.embedding.lookup(g, ids)?;
        let (seq, _) = r.encoder.contextualize(g, emb, &vec![true; ids.len()])?;
        let pooled = pool_mean(g, &seq)?;
        Ok((seq, pooled))
    }

    /// Like [`Model::encode_tokens`] but from per-position distributions
    /// over the role vocabulary (`t × vocab`), embedded as expectations.
    pub fn encode_soft<T: Scalar>(&self, g: &mut Graph<T>, role: Speaker, probs: Var) -> Result<Var> {
        let r = self.role(role);
        let emb = r.embedding.soft_lookup(g, probs)?;
        let t = g.shape(emb).0;
        let (seq, _) = r.encoder.contextualize(g, emb, &vec![true; t])?;
        pool_mean(g, &seq)
    }
}

fn build_role<T: Scalar>(
    pb: &mut ParamBuilder<T>,
    cfg: &ModelConfig,
    vocab: usize,
    cond_dim: usize,
) -> Result<RoleModules> {
    let embedding = EmbeddingTable::build(pb, vocab, cfg.embed_dim)?;
    let encoder = pb.scoped("encoder", |pb| {
        Ok(match cfg.arch {
            Architecture::Recurrent => Encoder::Recurrent(BiLstmEncoder {
                forward: LstmCell::build(pb, "forward", cfg.embed_dim, cfg.hidden)?,
                backward: LstmCell::build(pb, "backward", cfg.embed_dim, cfg.hidden)?,
            }),
            Architecture::SelfAttentive => Encoder::SelfAttentive(SelfAttentiveEncoder {
                block: TransformerBlock::build(pb, cfg.embed_dim, cfg.heads, cfg.hidden)?,
                positions: cfg.positions,
            }),
        })
    })?;
    let decoder = pb.scoped("decoder", |pb| {
        Ok(match cfg.arch {
            Architecture::Recurrent => Decoder::Recurrent(RecurrentDecoder {
                cell: LstmCell::build(pb, "cell", cfg.embed_dim + cond_dim, cfg.hidden)?,
                embed_dim: cfg.embed_dim,
                cond_dim,
            }),
            Architecture::SelfAttentive => Decoder::SelfAttentive(SelfAttentiveDecoder {
                cond_proj: Linear::build(pb, "condition", cond_dim, cfg.embed_dim, false)?,
                block: TransformerBlock::build(pb, cfg.embed_dim, cfg.heads, cfg.hidden)?,
                positions: cfg.positions,
            }),
        })
    })?;
    let output = OutputLayer::build(pb, vocab, decoder.output_dim())?;
    let sentence_attention =
        MultiHeadAttention::build_pooling(pb, "sentence_attention", encoder.output_dim(), cfg.heads)?;
    Ok(RoleModules { embedding, encoder, decoder, output, sentence_attention })
}

/// A very small configuration for unit tests.
#[cfg(test)]
pub(crate) fn tiny(arch: Architecture) -> ModelConfig {
    ModelConfig {
        arch,
        embed_dim: 6,
        hidden: 4,
        latent_dim: 3,
        prior_hidden: 5,
        heads: 2,
        customer_vocab: 10,
        agent_vocab: 9,
        positions: true,
        labels: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_recovers_identical_layout() {
        for arch in [Architecture::Recurrent, Architecture::SelfAttentive] {
            let (model, mut store) = Model::init::<f64>(tiny(arch), 3).unwrap();
            let bound = Model::bind(tiny(arch), &mut store).unwrap();
            assert_eq!(model, bound);
        }
    }

    #[test]
    fn parameter_names_are_path_like() {
        let (_, store) = Model::init::<f32>(tiny(Architecture::Recurrent), 0).unwrap();
        for name in [
            "customer/embedding",
            "customer/encoder/forward/weight",
            "agent/decoder/cell/weight",
            "agent/output/weight",
            "customer/sentence_attention/query",
            "latent/customer_posterior/mean/weight",
            "latent/agent_prior/log_variance/out/bias",
        ] {
            assert!(store.id(name).is_some(), "missing {name}");
        }
    }

    #[test]
    fn classifier_head_does_not_shift_other_parameters() {
        let (_, plain) = Model::init::<f32>(tiny(Architecture::Recurrent), 5).unwrap();
        let mut cfg = tiny(Architecture::Recurrent);
        cfg.labels = 3;
        let (m, with) = Model::init::<f32>(cfg, 5).unwrap();
        assert!(m.classifier.is_some());
        for (id, name, value) in plain.iter() {
            assert_eq!(with.get(id), value, "{name}");
        }
    }

    #[test]
    fn bind_rejects_wrong_shapes() {
        let (_, mut store) = Model::init::<f32>(tiny(Architecture::Recurrent), 0).unwrap();
        let mut cfg = tiny(Architecture::Recurrent);
        cfg.hidden = 5;
        assert!(matches!(Model::bind(cfg, &mut store), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn encoder_dims_per_architecture() {
        assert_eq!(tiny(Architecture::Recurrent).encoder_dim(), 8);
        assert_eq!(tiny(Architecture::SelfAttentive).encoder_dim(), 6);
    }
}
