use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use leakgen::checkpoint::Checkpoint;
use leakgen::config::ExperimentConfig;
use leakgen::corpus::{
    read_corpus, read_sequences, write_sequences, OracleModel, SequenceBatch, Vocabulary,
};
use leakgen::discriminator::Discriminator;
use leakgen::evaluation::{
    bleu_n, eval_nll, feature_trace, gain_curve_csv, interaction_csv, interaction_export,
    relative_gain_curve, MetricReport, BLEU_CONVENTION,
};
use leakgen::experiment::{build_models, synthetic_data};
use leakgen::generator::Generator;
use leakgen::metrics::{provenance_line, MetricsRow, Phase, METRICS_HEADER};
use leakgen::rng::derive;
use leakgen::training::{Observer, TrainData, Trainer};
use leakgen::{Error, Result};

use crate::{Cli, Command, DataArgs, ModelArgs};

// seed namespaces for sampling commands
const S_SAMPLE: u64 = 101;
const S_EVAL: u64 = 102;
const S_TRACE: u64 = 103;
const S_INTERACT: u64 = 104;

/// Resolved configuration plus where outputs go.
struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
    provenance: String,
}

impl Run {
    fn header(&self) -> Vec<String> {
        vec![self.provenance.trim_start_matches("# ").to_string()]
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_text(&self, name: &str, body: &str) -> Result<PathBuf> {
        let p = self.path(name);
        let mut f = BufWriter::new(fs::File::create(&p)?);
        writeln!(f, "{}", self.provenance)?;
        f.write_all(body.as_bytes())?;
        f.flush()?;
        log::info!("wrote {}", p.display());
        Ok(p)
    }

    fn data_dir(&self, args: &DataArgs) -> PathBuf {
        args.data.clone().unwrap_or_else(|| self.out.clone())
    }

    fn checkpoint_meta(&self, ckpt: &mut Checkpoint) {
        ckpt.meta
            .push(("provenance".into(), self.provenance.clone()));
    }

    fn save_checkpoint(&self, mut ckpt: Checkpoint, path: &Path) -> Result<()> {
        self.checkpoint_meta(&mut ckpt);
        ckpt.save(path)?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    fn load_checkpoint(&self, path: &Path) -> Result<Checkpoint> {
        if !path.exists() {
            return Err(Error::Checkpoint(format!(
                "{} does not exist",
                path.display()
            )));
        }
        let c = Checkpoint::load(path)?;
        let expected = self.cfg.model_digest();
        if c.config_digest != expected {
            return Err(Error::Checkpoint(format!(
                "{} was written for model digest {}, current config has {expected}",
                path.display(),
                c.config_digest
            )));
        }
        Ok(c)
    }

    fn load_models(&self, args: &ModelArgs) -> Result<(Generator, Discriminator)> {
        let gp = args
            .generator
            .clone()
            .unwrap_or_else(|| self.path("generator.ckpt"));
        let dp = args
            .discriminator
            .clone()
            .unwrap_or_else(|| self.path("discriminator.ckpt"));
        let gen = Generator::from_checkpoint(&self.load_checkpoint(&gp)?)?;
        let disc = Discriminator::from_checkpoint(&self.load_checkpoint(&dp)?)?;
        if gen.config.feature_dim != disc.feature_dim() {
            return Err(Error::Checkpoint(
                "generator and discriminator checkpoints do not match".into(),
            ));
        }
        Ok((gen, disc))
    }
}

struct Data {
    vocab: Vocabulary,
    train: SequenceBatch,
    test: SequenceBatch,
    oracle: Option<OracleModel>,
}

impl Data {
    fn train_data(&self) -> TrainData<'_> {
        TrainData {
            train: &self.train,
            valid: &self.test,
            oracle: self.oracle.as_ref(),
        }
    }
}

fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::InvalidConfig(format!(
            "{} does not exist (run oracle-gen first or pass --data)",
            path.display()
        )))
    }
}

fn load_data(run: &Run, args: &DataArgs) -> Result<Data> {
    let cfg = &run.cfg;
    if cfg.is_synthetic() {
        let dir = run.data_dir(args);
        let vocab = Vocabulary::load(require(&dir.join("vocab.txt"))?)?;
        let train = read_sequences(require(&dir.join("train.txt"))?, &vocab, cfg.horizon)?;
        let test = read_sequences(require(&dir.join("test.txt"))?, &vocab, cfg.horizon)?;
        let oracle = OracleModel::from_checkpoint(
            &run.load_checkpoint(require(&dir.join("oracle.ckpt"))?)?,
        )?;
        if oracle.vocab_size != vocab.len() {
            return Err(Error::Checkpoint(
                "oracle and vocabulary sizes differ".into(),
            ));
        }
        return Ok(Data {
            vocab,
            train,
            test,
            oracle: Some(oracle),
        });
    }
    let sentences = read_corpus(require(Path::new(&cfg.corpus))?)?;
    let prepared = leakgen::corpus::prepare_corpus(&sentences, cfg.min_freq, cfg.horizon)?;
    log::info!(
        "corpus: {} sentences kept, {} dropped for rare tokens, {} too long, vocabulary {}",
        prepared.sequences.len(),
        prepared.dropped_rare,
        prepared.dropped_long,
        prepared.vocab.len()
    );
    let test = if cfg.test_corpus.is_empty() {
        log::warn!("no test_corpus configured; validating on the training set");
        prepared.sequences.clone()
    } else {
        let mut kept = Vec::new();
        let mut dropped = 0;
        for s in read_corpus(require(Path::new(&cfg.test_corpus))?)? {
            match prepared.vocab.encode(&s, cfg.horizon) {
                Ok(ids) => kept.push(ids),
                Err(_) => dropped += 1,
            }
        }
        if dropped > 0 {
            log::warn!("{dropped} test sentences dropped (unknown tokens or too long)");
        }
        kept
    };
    Ok(Data {
        vocab: prepared.vocab,
        train: prepared.sequences,
        test,
        oracle: None,
    })
}

fn resolve(cli: &Cli) -> Result<Run> {
    let mut cfg = match &cli.preset {
        Some(p) => ExperimentConfig::preset(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    fs::create_dir_all(&cli.out)?;
    let provenance = provenance_line(&cfg.digest(), cfg.seed);
    Ok(Run {
        cfg,
        out: cli.out.clone(),
        provenance,
    })
}

pub fn run(cli: &Cli) -> Result<()> {
    let run = resolve(cli)?;
    run.write_text("config.txt", &run.cfg.to_text())?;
    match &cli.command {
        Command::OracleGen => oracle_gen(&run),
        Command::Pretrain(data) => train(&run, data, None, true),
        Command::Train {
            data,
            generator,
            discriminator,
        } => {
            let models = match (generator, discriminator) {
                (Some(g), Some(d)) => Some(run.load_models(&ModelArgs {
                    data: data.clone(),
                    generator: Some(g.clone()),
                    discriminator: Some(d.clone()),
                })?),
                _ => None,
            };
            train(&run, data, models, false)
        }
        Command::Sample(m) => sample(&run, m),
        Command::EvalNll { models, oracle } => eval_nll_cmd(&run, models, oracle.as_deref()),
        Command::EvalBleu {
            candidates,
            references,
            baseline,
            order,
        } => eval_bleu(&run, candidates, references, baseline.as_deref(), *order),
        Command::Trace(m) => trace(&run, m),
        Command::Interact(m) => interact(&run, m),
    }
}

fn oracle_gen(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    if !cfg.is_synthetic() {
        return Err(Error::InvalidConfig(
            "oracle-gen needs an empty `corpus` key".into(),
        ));
    }
    let data = synthetic_data(cfg)?;
    let vocab = Vocabulary::synthetic(cfg.model_vocab_size());
    vocab.save(&run.path("vocab.txt"), &run.header())?;
    write_sequences(&run.path("train.txt"), &vocab, &data.train, &run.header())?;
    write_sequences(&run.path("test.txt"), &vocab, &data.test, &run.header())?;
    run.save_checkpoint(
        data.oracle.to_checkpoint(&cfg.model_digest()),
        &run.path("oracle.ckpt"),
    )?;
    let self_nll = data.oracle.nll(&data.test);
    log::info!(
        "oracle NLL of its own test set: {:.4} per sequence ({:.4} per token)",
        self_nll.per_sequence,
        self_nll.per_token
    );
    Ok(())
}

/// Streams metrics rows to disk and writes periodic checkpoints.
struct FileObserver<'a> {
    run: &'a Run,
    out: BufWriter<fs::File>,
}

impl<'a> FileObserver<'a> {
    fn new(run: &'a Run, name: &str) -> Result<Self> {
        let mut out = BufWriter::new(fs::File::create(run.path(name))?);
        writeln!(out, "{}", run.provenance)?;
        writeln!(
            out,
            "# nll_oracle = per-sequence summed NLL (nats) averaged over samples; divide by the horizon for per-token"
        )?;
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(FileObserver { run, out })
    }
}

impl Observer for FileObserver<'_> {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv())?;
        self.out.flush()?;
        if let Some(nll) = row.nll_oracle {
            log::info!("{} epoch {}: oracle NLL {nll:.4}", row.phase, row.epoch);
        }
        Ok(())
    }

    fn epoch_end(&mut self, phase: Phase, epoch: usize, trainer: &Trainer) -> Result<()> {
        let every = self.run.cfg.checkpoint_every;
        if phase == Phase::AdversarialG && every > 0 && epoch.is_multiple_of(every) {
            let dir = self.run.path("checkpoints");
            fs::create_dir_all(&dir)?;
            save_models(self.run, trainer, &dir, &format!("-adv{epoch}"))?;
        }
        Ok(())
    }
}

fn save_models(run: &Run, trainer: &Trainer, dir: &Path, suffix: &str) -> Result<()> {
    let digest = run.cfg.model_digest();
    run.save_checkpoint(
        trainer.generator.to_checkpoint(&digest),
        &dir.join(format!("generator{suffix}.ckpt")),
    )?;
    run.save_checkpoint(
        trainer.discriminator.to_checkpoint(&digest),
        &dir.join(format!("discriminator{suffix}.ckpt")),
    )
}

fn train(
    run: &Run,
    args: &DataArgs,
    models: Option<(Generator, Discriminator)>,
    pretrain_only: bool,
) -> Result<()> {
    let data = load_data(run, args)?;
    let cfg = &run.cfg;
    if !cfg.is_synthetic() {
        data.vocab.save(&run.path("vocab.txt"), &run.header())?;
    }
    let mut tc = cfg.train_config();
    if pretrain_only {
        tc.adv_epochs = 0;
    }
    let resumed = models.is_some();
    let (gen, disc) = match models {
        Some(m) => m,
        None => build_models(cfg, data.vocab.len())?,
    };
    let mut trainer = Trainer::new(tc, gen, disc)?;
    let name = if pretrain_only {
        "pretrain_metrics.csv"
    } else {
        "metrics.csv"
    };
    let mut obs = FileObserver::new(run, name)?;
    let summary = if resumed {
        trainer.run_adversarial(&data.train_data(), &mut obs)?
    } else {
        trainer.run(&data.train_data(), &mut obs)?
    };
    save_models(run, &trainer, &run.out, "")?;
    if let Some(m) = summary.pretrain_min() {
        log::info!("pre-training minimum validation NLL {m:.4}");
    }
    if let Some(m) = summary.adversarial_min() {
        log::info!("adversarial minimum validation NLL {m:.4}");
    }
    Ok(())
}

fn vocab_for(run: &Run, args: &DataArgs) -> Result<Vocabulary> {
    let p = run.data_dir(args).join("vocab.txt");
    Vocabulary::load(require(&p)?)
}

fn sample(run: &Run, m: &ModelArgs) -> Result<()> {
    let (gen, disc) = run.load_models(m)?;
    let vocab = vocab_for(run, &m.data)?;
    let ex = disc.extractor();
    let seqs = gen.sample(
        &ex,
        run.cfg.sample_count,
        gen.config.temperature_sample,
        derive(run.cfg.seed, &[S_SAMPLE]),
    );
    write_sequences(&run.path("samples.txt"), &vocab, &seqs, &run.header())?;
    log::info!(
        "wrote {} samples to {}",
        seqs.len(),
        run.path("samples.txt").display()
    );
    Ok(())
}

fn eval_nll_cmd(run: &Run, m: &ModelArgs, oracle: Option<&Path>) -> Result<()> {
    let (gen, disc) = run.load_models(m)?;
    let op = oracle
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.data_dir(&m.data).join("oracle.ckpt"));
    let oracle = OracleModel::from_checkpoint(&run.load_checkpoint(&op)?)?;
    let ex = disc.extractor();
    let n = run.cfg.eval_samples;
    let nll = eval_nll(&gen, &ex, &oracle, n, derive(run.cfg.seed, &[S_EVAL]));
    let digest = run.cfg.digest();
    let reports = [
        MetricReport {
            metric: "nll_oracle_per_sequence".into(),
            value: nll.per_sequence,
            config_digest: digest.clone(),
            samples: nll.count,
        },
        MetricReport {
            metric: "nll_oracle_per_token".into(),
            value: nll.per_token,
            config_digest: digest,
            samples: nll.count,
        },
    ];
    write_reports(run, "nll.csv", &reports, None)?;
    println!(
        "nll_oracle {:.6} per sequence, {:.6} per token ({n} samples)",
        nll.per_sequence, nll.per_token
    );
    Ok(())
}

fn write_reports(
    run: &Run,
    name: &str,
    reports: &[MetricReport],
    note: Option<&str>,
) -> Result<()> {
    let mut body = String::new();
    if let Some(n) = note {
        body.push_str(&format!("# {n}\n"));
    }
    body.push_str(MetricReport::CSV_HEADER);
    body.push('\n');
    for r in reports {
        body.push_str(&r.to_csv());
        body.push('\n');
    }
    run.write_text(name, &body)?;
    Ok(())
}

fn eval_bleu(
    run: &Run,
    candidates: &Path,
    references: &Path,
    baseline: Option<&Path>,
    order: usize,
) -> Result<()> {
    let cands = read_corpus(require(candidates)?)?;
    let refs = read_corpus(require(references)?)?;
    if refs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let digest = run.cfg.digest();
    let reports: Vec<MetricReport> = (2..=5)
        .map(|n| MetricReport {
            metric: format!("bleu{n}"),
            value: bleu_n(&cands, &refs, n),
            config_digest: digest.clone(),
            samples: cands.len(),
        })
        .collect();
    for r in &reports {
        println!("{} {:.6}", r.metric, r.value);
    }
    write_reports(run, "bleu.csv", &reports, Some(BLEU_CONVENTION))?;
    if let Some(b) = baseline {
        if !(2..=5).contains(&order) {
            return Err(Error::InvalidConfig("--order must be in 2..=5".into()));
        }
        let base = read_corpus(require(b)?)?;
        let points = relative_gain_curve(&cands, &base, &refs, &run.cfg.gain_edges()?, order);
        run.write_text("gain.csv", &gain_curve_csv(&points))?;
    }
    Ok(())
}

fn trace(run: &Run, m: &ModelArgs) -> Result<()> {
    let (gen, disc) = run.load_models(m)?;
    let data = load_data(run, &m.data)?;
    let reference: Vec<Vec<usize>> = data
        .test
        .iter()
        .take(run.cfg.trace_reference)
        .cloned()
        .collect();
    if reference.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let ex = disc.extractor();
    let tr = feature_trace(
        &gen,
        &ex,
        run.cfg.trace_sentences,
        &reference,
        derive(run.cfg.seed, &[S_TRACE]),
    );
    log::info!(
        "PCA variances of the top two components: {:.6}, {:.6}",
        tr.pca.variances[0],
        tr.pca.variances.get(1).copied().unwrap_or(0.0)
    );
    run.write_text("trace.csv", &tr.to_csv())?;
    Ok(())
}

fn interact(run: &Run, m: &ModelArgs) -> Result<()> {
    let (gen, disc) = run.load_models(m)?;
    let vocab = vocab_for(run, &m.data)?;
    let ex = disc.extractor();
    let episodes = gen.generate(
        &ex,
        run.cfg.interact_sentences,
        gen.config.temperature_sample,
        derive(run.cfg.seed, &[S_INTERACT]),
    );
    let rows = interaction_export(&episodes);
    let csv = interaction_csv(&rows, |t| vocab.token(t).unwrap_or("?").to_string());
    run.write_text("interaction.csv", &csv)?;
    Ok(())
}
