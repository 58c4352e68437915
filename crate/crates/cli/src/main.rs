mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use marn::analysis::{normalized_code_loss, project_codes_2d, projection_significance};
use marn::metrics::MetricsReport;
use marn::model::{Marn, ModelConfig};
use marn::text::corpus::write_corpus_to;
use marn::text::embeddings::format_word_vectors;
use marn::text::{
    generate_synthetic_corpus, load_code_mapping, load_embeddings, prepare_corpus, prepare_documents, read_corpus, split_dataset,
    Document, LabelSpace, Vocabulary,
};
use marn::trainer::{predict_documents, truth_matrix, Checkpoint, Trainer};
use marn::{MarnError, Result};
use serde::Serialize;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "marn", version, about = "Train and inspect multitask label-attention models for medical code prediction")]
struct Cli {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `data.output_dir`.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    no_ram: bool,
    #[arg(long, global = true)]
    no_mtl: bool,
    #[arg(long, global = true)]
    no_focal: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus, code mapping and word vectors.
    Synth,
    /// Build the vocabulary and write train/val/test splits.
    Preprocess,
    /// Fit a model on the prepared splits.
    Train,
    /// Score a checkpoint on a corpus file for both label branches.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Corpus file to score; defaults to the test split.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a diagnostic table for a checkpoint.
    Analyze {
        #[arg(value_enum)]
        which: Analysis,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Corpus file for the loss profile; defaults to the test split.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Project query vectors only instead of query and classifier vectors.
        #[arg(long)]
        query_only: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Analysis {
    LossProfile,
    Pca,
    CcsSignificance,
}

impl Analysis {
    fn file_name(self) -> &'static str {
        match self {
            Analysis::LossProfile => "loss_profile.tsv",
            Analysis::Pca => "pca.tsv",
            Analysis::CcsSignificance => "ccs_significance.tsv",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &MarnError) -> u8 {
    match e {
        MarnError::Numeric(_) => 3,
        _ => 2,
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(d) = &cli.output_dir {
        cfg.data.output_dir = d.clone();
    }
    let ab = &mut cfg.train.ablation;
    ab.use_ram &= !cli.no_ram;
    ab.use_mtl &= !cli.no_mtl;
    ab.use_focal &= !cli.no_focal;
    cfg.validate()?;
    match &cli.command {
        Command::Synth => synth(&cfg),
        Command::Preprocess => preprocess(&cfg),
        Command::Train => train(&cfg),
        Command::Evaluate { checkpoint, split, output } => evaluate(&cfg, cli.config.is_some(), checkpoint, split, output),
        Command::Analyze {
            which,
            checkpoint,
            corpus,
            query_only,
            output,
        } => analyze(&cfg, cli.config.is_some(), *which, checkpoint, corpus, *query_only, output),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MarnError + '_ {
    move |source| MarnError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, contents).map_err(io_err(path))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let corpus = generate_synthetic_corpus(&cfg.synth, cfg.seed)?;
    let mut buf = Vec::new();
    write_corpus_to(&mut buf, &corpus.docs)?;
    write_file(&cfg.data.corpus, &buf)?;
    write_file(&cfg.data.mapping, corpus.mapping.to_csv().as_bytes())?;
    if let Some(p) = &cfg.data.embeddings {
        write_file(p, format_word_vectors(&corpus.vectors, corpus.embedding_dim).as_bytes())?;
    }
    println!(
        "wrote {} documents, {} ICD codes, {} CCS codes, {} word vectors",
        corpus.docs.len(),
        corpus.mapping.len(),
        cfg.synth.n_ccs,
        corpus.vectors.len()
    );
    Ok(())
}

fn preprocess(cfg: &RunConfig) -> Result<()> {
    let raw = read_corpus(&cfg.data.corpus)?;
    let mapping = load_code_mapping(&cfg.data.mapping)?;
    let prepared = prepare_corpus(&raw, &mapping, cfg.min_doc_freq, cfg.max_len)?;
    let split = split_dataset(&raw, cfg.split, cfg.seed)?;
    for (path, docs) in [(cfg.train_file(), &split.train), (cfg.val_file(), &split.val), (cfg.test_file(), &split.test)] {
        let mut w = create(&path)?;
        write_corpus_to(&mut w, docs)?;
        w.flush().map_err(io_err(&path))?;
    }
    let mut vocab = prepared.vocab.tokens().join("\n");
    vocab.push('\n');
    write_file(&cfg.vocab_file(), vocab.as_bytes())?;
    let empty = prepared.docs.iter().filter(|d| d.is_empty()).count();
    println!(
        "{} documents ({} train, {} val, {} test), vocabulary {}, {} ICD / {} CCS codes, {} empty after preprocessing",
        raw.len(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        prepared.vocab.len(),
        prepared.labels.n_icd(),
        prepared.labels.n_ccs(),
        empty
    );
    Ok(())
}

fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Vocabulary::from_tokens(text.lines().map(String::from).collect())
}

fn encode(path: &Path, vocab: &Vocabulary, labels: &LabelSpace, max_len: usize) -> Result<Vec<Document>> {
    prepare_documents(&read_corpus(path)?, vocab, labels, max_len)
}

fn train(cfg: &RunConfig) -> Result<()> {
    let vocab = read_vocab(&cfg.vocab_file())?;
    let labels = LabelSpace::from_mapping(&load_code_mapping(&cfg.data.mapping)?)?;
    let train_docs = encode(&cfg.train_file(), &vocab, &labels, cfg.max_len)?;
    let val_docs = encode(&cfg.val_file(), &vocab, &labels, cfg.max_len)?;
    let embeddings = match &cfg.data.embeddings {
        Some(p) => Some(load_embeddings(p, &vocab, cfg.model.d_e, cfg.seed)?),
        None => None,
    };
    let mc = ModelConfig {
        vocab_size: vocab.len(),
        d_e: cfg.model.d_e,
        d_r: cfg.model.d_r,
        n_icd: labels.n_icd(),
        n_ccs: labels.n_ccs(),
        dropout: cfg.model.dropout,
    };
    let model = Marn::<f32>::new(&mc, embeddings.as_ref(), cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let outcome = trainer.fit(&train_docs, &val_docs)?;

    let path = cfg.history_file();
    let mut w = create(&path)?;
    for rec in &outcome.history {
        let line = serde_json::to_string(rec).map_err(|e| MarnError::Input(e.to_string()))?;
        writeln!(w, "{line}").map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    Checkpoint::from_trainer(&trainer, Some(outcome.best_monitor))
        .with_text(vocab.tokens().to_vec(), labels)
        .save(cfg.checkpoint_file())?;
    println!(
        "best epoch {} of {} (validation P@{} = {:.4}){}",
        outcome.best_epoch,
        outcome.history.len(),
        cfg.train.monitor_k,
        outcome.best_monitor,
        if outcome.stopped_early { ", stopped early" } else { "" }
    );
    Ok(())
}

/// Loads a checkpoint; with an explicit config its model settings must match.
fn load_checkpoint(cfg: &RunConfig, strict: bool, path: &Option<PathBuf>) -> Result<(Checkpoint, Vocabulary, LabelSpace)> {
    let path = path.clone().unwrap_or_else(|| cfg.checkpoint_file());
    let ck = Checkpoint::load(&path)?;
    let (Some(tokens), Some(labels)) = (ck.vocab.clone(), ck.labels.clone()) else {
        return Err(MarnError::Input(format!("{} holds no vocabulary or label space", path.display())));
    };
    if strict {
        let expected = ModelConfig {
            vocab_size: tokens.len(),
            d_e: cfg.model.d_e,
            d_r: cfg.model.d_r,
            n_icd: labels.n_icd(),
            n_ccs: labels.n_ccs(),
            dropout: cfg.model.dropout,
        };
        if ck.model.config != expected {
            return Err(config_mismatch(&ck.model.config, &expected));
        }
    }
    Ok((ck, Vocabulary::from_tokens(tokens)?, labels))
}

fn config_mismatch(found: &ModelConfig, expected: &ModelConfig) -> MarnError {
    MarnError::Checkpoint {
        field: "config".into(),
        message: format!("checkpoint model {found:?} does not match configured {expected:?}"),
    }
}

#[derive(Serialize)]
struct EvalReport {
    split: String,
    icd: MetricsReport,
    ccs: MetricsReport,
}

fn evaluate(cfg: &RunConfig, strict: bool, checkpoint: &Option<PathBuf>, split: &Option<PathBuf>, output: &Option<PathBuf>) -> Result<()> {
    let (ck, vocab, labels) = load_checkpoint(cfg, strict, checkpoint)?;
    let split = split.clone().unwrap_or_else(|| cfg.test_file());
    let docs = encode(&split, &vocab, &labels, cfg.max_len)?;
    let pred = predict_documents(&ck.model, &docs, ck.train.batch_size, ck.train.ablation.use_ram)?;
    let icd_truth = truth_matrix(&docs, labels.n_icd(), |d| &d.icd_labels);
    let ccs_truth = truth_matrix(&docs, labels.n_ccs(), |d| &d.ccs_labels);
    let report = EvalReport {
        split: split.display().to_string(),
        icd: MetricsReport::compute(&pred.icd, &icd_truth, labels.n_icd(), Some(labels.icd_codes()))?,
        ccs: MetricsReport::compute(&pred.ccs, &ccs_truth, labels.n_ccs(), Some(labels.ccs_codes()))?,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| MarnError::Input(e.to_string()))?;
    let out = output.clone().unwrap_or_else(|| cfg.data.output_dir.join("metrics.json"));
    write_file(&out, format!("{json}\n").as_bytes())?;
    println!(
        "{}: ICD micro-F1 {:.4}, micro-AUC {}; CCS micro-F1 {:.4}",
        report.split,
        report.icd.micro_f1,
        report.icd.micro_auc.map_or("undefined".into(), |a| format!("{a:.4}")),
        report.ccs.micro_f1
    );
    Ok(())
}

fn analyze(
    cfg: &RunConfig,
    strict: bool,
    which: Analysis,
    checkpoint: &Option<PathBuf>,
    corpus: &Option<PathBuf>,
    query_only: bool,
    output: &Option<PathBuf>,
) -> Result<()> {
    let (ck, vocab, labels) = load_checkpoint(cfg, strict, checkpoint)?;
    let out = output.clone().unwrap_or_else(|| cfg.data.output_dir.join(which.file_name()));
    let mut w = create(&out)?;
    match which {
        Analysis::LossProfile => {
            let path = corpus.clone().unwrap_or_else(|| cfg.test_file());
            let docs = encode(&path, &vocab, &labels, cfg.max_len)?;
            let profile = normalized_code_loss(
                &ck.model,
                &docs,
                Some(&labels),
                ck.train.ablation.use_ram,
                ck.train.batch_size,
                ck.train.loss.prob_eps,
            )?;
            profile.write_tsv(&mut w)?;
            let absent = profile.codes.iter().filter(|c| c.loss.is_none()).count();
            println!(
                "{} codes profiled on {} documents, {absent} absent; coefficient of variation {}",
                profile.codes.len(),
                profile.n_docs,
                profile.coefficient_of_variation().map_or("undefined".into(), |c| format!("{c:.4}"))
            );
        }
        Analysis::Pca => {
            let proj = project_codes_2d(&ck.model, Some(&labels), !query_only)?;
            proj.write_tsv(&mut w)?;
            println!(
                "{} codes projected; explained variance {:.4}, {:.4}",
                proj.codes.len(),
                proj.explained[0],
                proj.explained[1]
            );
        }
        Analysis::CcsSignificance => {
            let proj = project_codes_2d(&ck.model, Some(&labels), !query_only)?;
            let rep = projection_significance(&proj, &labels)?;
            rep.write_tsv(&mut w)?;
            println!("significant CCS codes: {} of {} (radius {:.6})", rep.count, rep.regions.len(), rep.radius);
            for r in &rep.regions {
                println!(
                    "{}\tn={}\tk={}\tp={:.4}\tT={}\t{}{}",
                    r.name,
                    r.n,
                    r.k,
                    r.p,
                    r.threshold,
                    if r.significant { "significant" } else { "not significant" },
                    if r.empty { " (empty region)" } else { "" }
                );
            }
        }
    }
    w.flush().map_err(io_err(&out))
}
