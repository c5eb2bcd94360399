use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tete_core::autodiff::ParamStore;
use tete_core::checkpoint::Checkpoint;
use tete_core::corpus::{load_corpus, load_gazetteer, CorpusFormat, Dialogue, LexiconRules, Split};
use tete_core::evaluation::{
    classify_supervised_joint, classify_unsupervised, perplexity, score_summaries, ClassifierConfig,
};
use tete_core::generative::generate_pair;
use tete_core::model::{Architecture, Model};
use tete_core::pipeline::{PrepareOptions, PreparedCorpus};
use tete_core::summarizer::{summarize_dialogue, SummarizeOptions, SummaryRecord};
use tete_core::synthetic::{generate, SyntheticConfig};
use tete_core::training::{total_steps, train, ReportHeader, StepRecord, TrainConfig, TrainObserver};
use tete_core::{Error, Result};

use crate::{ClassifyMode, Command};

const MODEL_FILE: &str = "model.ckpt";
const REPORT_FILE: &str = "report.jsonl";

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Prepare { input, format, output_dir, min_freq, max_vocab, gazetteer, seed } => {
            let format: CorpusFormat = format.parse()?;
            let rules = match gazetteer {
                Some(p) => LexiconRules::with_gazetteer(load_gazetteer(p)?),
                None => LexiconRules::default(),
            };
            let dialogues = load_corpus(&input, format)?;
            let opts = PrepareOptions { format, seed, min_freq, max_size: max_vocab, rules };
            let prepared = PreparedCorpus::build(dialogues, &opts)?;
            prepared.save(&output_dir)?;
            log::info!(
                "{} dialogues ({} train / {} test / {} valid), vocab {}/{}, lexicon {}",
                prepared.dialogues.len(),
                prepared.splits.train.len(),
                prepared.splits.test.len(),
                prepared.splits.valid.len(),
                prepared.customer_vocab.size(),
                prepared.agent_vocab.size(),
                prepared.lexicon.len()
            );
            Ok(())
        }
        Command::Train { corpus_dir, config, arch, out, seed, max_steps } => {
            let mut cfg = match config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if max_steps.is_some() {
                cfg.max_steps = max_steps;
            }
            cmd_train(&corpus_dir, cfg, arch.into(), &out)
        }
        Command::Summarize { checkpoint, corpus_dir, split, max_len, no_copy, out } => {
            let split: Split = split.parse()?;
            cmd_summarize(&checkpoint, &corpus_dir, split, SummarizeOptions { max_len, copy: !no_copy }, out.as_deref())
        }
        Command::Evaluate { checkpoint, summaries, references, ppl, corpus_dir, split, out } => {
            let mut report = serde_json::Map::new();
            if let (Some(s), Some(r)) = (&summaries, &references) {
                let rouge = score_summaries(&read_records(s)?, &read_records(r)?)?;
                report.insert("rouge".into(), serde_json::to_value(rouge)?);
            }
            if ppl {
                let (Some(ck), Some(dir)) = (&checkpoint, &corpus_dir) else {
                    return Err(Error::InvalidArgument("--ppl needs --checkpoint and --corpus-dir".into()));
                };
                let (model, store, ckpt) = load_model(ck)?;
                let corpus = PreparedCorpus::load(dir)?;
                let dialogues = corpus.split(split.parse()?)?;
                let (cv, av) = ckpt.vocabularies();
                let pairs = tete_core::corpus::encode_pairs(&tete_core::corpus::pair_all(&dialogues), &cv, &av);
                let tau = ckpt.header.train.as_ref().map_or(TrainConfig::default().tau, |c| c.tau);
                report.insert("perplexity".into(), serde_json::to_value(perplexity(&store, &model, &pairs, tau)?)?);
            }
            if report.is_empty() {
                return Err(Error::InvalidArgument(
                    "nothing to evaluate: pass --summaries/--references or --ppl".into(),
                ));
            }
            write_output(out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))
        }
        Command::Classify { checkpoint, corpus_dir, mode, config, lambda, multi_label, max_len, out, save } => {
            let (mut model, mut store, mut ckpt) = load_model(&checkpoint)?;
            let corpus = PreparedCorpus::load(&corpus_dir)?;
            let train_d = corpus.split(Split::Train)?;
            let test_d = corpus.split(Split::Test)?;
            if test_d.is_empty() {
                return Err(Error::Empty("test split is empty".into()));
            }
            let multi = multi_label || train_d.iter().chain(&test_d).any(|d| d.domains.len() > 1);
            let (cv, av) = ckpt.vocabularies();
            let value = match mode {
                ClassifyMode::Unsupervised => {
                    let r = classify_unsupervised(
                        &store,
                        &model,
                        &train_d,
                        &test_d,
                        (&cv, &av),
                        multi,
                        max_len,
                        ClassifierConfig::default(),
                    )?;
                    serde_json::to_value(r)?
                }
                ClassifyMode::Supervised => {
                    let cfg = match config {
                        Some(p) => TrainConfig::load(p)?,
                        None => ckpt.header.train.clone().unwrap_or_default(),
                    };
                    let (r, rep) = classify_supervised_joint(
                        &mut model,
                        &mut store,
                        &train_d,
                        &test_d,
                        (&cv, &av),
                        &cfg,
                        lambda,
                        multi,
                    )?;
                    if let Some(path) = save {
                        ckpt.header.model = model.config.clone();
                        ckpt.header.labels = tete_core::corpus::label_set(&train_d);
                        ckpt.header.multi_label = multi;
                        ckpt.header.step += rep.records.len();
                        ckpt.header.train = Some(cfg);
                        ckpt.params = store;
                        ckpt.save(path)?;
                    }
                    serde_json::to_value(r)?
                }
            };
            write_output(out.as_deref(), &(serde_json::to_string_pretty(&value)? + "\n"))
        }
        Command::Generate { checkpoint, count, seed, max_len, out } => {
            if max_len == 0 {
                return Err(Error::InvalidArgument("--max-len must be positive".into()));
            }
            let (model, store, ckpt) = load_model(&checkpoint)?;
            let (cv, av) = ckpt.vocabularies();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut text = String::new();
            for _ in 0..count {
                let (x, y) = generate_pair(&store, &model, &mut rng, max_len)?;
                let rec = json!({ "customer": cv.decode(&x).join(" "), "agent": av.decode(&y).join(" ") });
                text.push_str(&rec.to_string());
                text.push('\n');
            }
            write_output(out.as_deref(), &text)
        }
        Command::MakeSynthetic { out, n_dialogues, n_domains, seed } => {
            let dialogues = generate(&SyntheticConfig { n_dialogues, n_domains, seed })?;
            write_output(Some(&out), &tete_core::corpus::to_native_jsonl(&dialogues))
        }
    }
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            fs::write(p, text).map_err(|e| Error::io(p, e))
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn read_records(path: &Path) -> Result<Vec<SummaryRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(index, l)| serde_json::from_str(l).map_err(|e| Error::MalformedRecord { index, message: e.to_string() }))
        .collect()
}

fn load_model(path: &Path) -> Result<(Model, ParamStore<f32>, Checkpoint)> {
    let mut ckpt = Checkpoint::load(path)?;
    let model = ckpt.model()?;
    let store = ckpt.params.clone();
    Ok((model, store, ckpt))
}

/// Streams step records to the report and refreshes the checkpoint at
/// every epoch boundary.
struct Progress<'a> {
    report: BufWriter<fs::File>,
    report_path: PathBuf,
    model: &'a Model,
    corpus: &'a PreparedCorpus,
    cfg: &'a TrainConfig,
    ckpt_path: PathBuf,
    steps: usize,
    total: usize,
}

impl Progress<'_> {
    fn checkpoint(&self, store: &ParamStore<f32>) -> Checkpoint {
        let mut ck = Checkpoint::new(self.model, store.clone(), &self.corpus.customer_vocab, &self.corpus.agent_vocab);
        ck.header.step = self.steps;
        ck.header.train = Some(self.cfg.clone());
        ck
    }
}

impl TrainObserver<f32> for Progress<'_> {
    fn on_step(&mut self, r: &StepRecord) -> Result<()> {
        self.steps = r.step + 1;
        let line = serde_json::to_string(r)?;
        writeln!(self.report, "{line}").map_err(|e| Error::io(&self.report_path, e))?;
        if r.step.is_multiple_of(10) || self.steps == self.total {
            log::info!(
                "step {}/{} epoch {} loss {:.4} gen {:.4} sum {:.4} kl {:.3}/{:.3} w {:.3}",
                self.steps,
                self.total,
                r.epoch,
                r.loss,
                r.gen,
                r.sum,
                r.kl_customer,
                r.kl_agent,
                r.kl_weight
            );
        }
        Ok(())
    }

    fn on_epoch_end(&mut self, _epoch: usize, store: &ParamStore<f32>) -> Result<()> {
        self.report.flush().map_err(|e| Error::io(&self.report_path, e))?;
        self.checkpoint(store).save(&self.ckpt_path)
    }
}

fn cmd_train(corpus_dir: &Path, cfg: TrainConfig, arch: Architecture, out: &Path) -> Result<()> {
    cfg.validate()?;
    let corpus = PreparedCorpus::load(corpus_dir)?;
    let train_dialogues = corpus.split(Split::Train)?;
    let pairs = corpus.encoded(Split::Train)?;
    let model_cfg = cfg.model_config(arch, corpus.customer_vocab.size(), corpus.agent_vocab.size());
    let (model, mut store) = Model::init::<f32>(model_cfg, cfg.seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let report_path = out.join(REPORT_FILE);
    let file = fs::File::create(&report_path).map_err(|e| Error::io(&report_path, e))?;
    let total = total_steps(&cfg, train_dialogues.len());
    let header = ReportHeader {
        config: cfg.clone(),
        model: model.config.clone(),
        total_steps: total,
        parameters: store.iter().map(|(_, _, m)| m.data().len()).sum(),
        notes: [
            ("objective".to_string(), "loss = -(alpha*ELBO/pairs + (1-alpha)*similarity/dialogues)".to_string()),
            ("grad_clip".to_string(), format!("global norm {}", cfg.grad_clip)),
        ]
        .into_iter()
        .collect(),
    };
    let mut report = BufWriter::new(file);
    writeln!(report, "{}", serde_json::to_string(&header)?).map_err(|e| Error::io(&report_path, e))?;
    let mut progress = Progress {
        report,
        report_path: report_path.clone(),
        model: &model,
        corpus: &corpus,
        cfg: &cfg,
        ckpt_path: out.join(MODEL_FILE),
        steps: 0,
        total,
    };
    let result = train(&model, &mut store, &pairs, &cfg, None, &mut progress);
    progress.report.flush().map_err(|e| Error::io(&report_path, e))?;
    let report = result?;
    progress.checkpoint(&store).save(out.join(MODEL_FILE))?;
    log::info!("{} steps in {:.1}s", report.records.len(), report.wall_clock_secs);
    Ok(())
}

fn cmd_summarize(
    checkpoint: &Path,
    corpus_dir: &Path,
    split: Split,
    opts: SummarizeOptions,
    out: Option<&Path>,
) -> Result<()> {
    if opts.max_len == 0 {
        return Err(Error::InvalidArgument("--max-len must be positive".into()));
    }
    let (model, store, ckpt) = load_model(checkpoint)?;
    let corpus = PreparedCorpus::load(corpus_dir)?;
    let dialogues: Vec<Dialogue> = corpus.split(split)?;
    if dialogues.is_empty() {
        return Err(Error::Empty(format!("split {split:?} has no dialogues")));
    }
    let (cv, av) = ckpt.vocabularies();
    let mut text = String::new();
    for d in &dialogues {
        let s = summarize_dialogue(&store, &model, d, (&cv, &av), &corpus.lexicon, opts)?;
        text.push_str(&serde_json::to_string(&s.to_record())?);
        text.push('\n');
    }
    write_output(out, &text)
}
