use std::path::{Path, PathBuf};

use accent_asr::experiment::{
    data_split, extracted_embeddings, fingerprint, load_corpus, run_ablation, run_analysis, run_train,
    write_analysis_outputs, write_extract_outputs, write_report, write_train_outputs, ExperimentConfig, ReportFile,
};
use accent_asr::synth::{write_utterances, Corpus};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "accent-asr", version, about = "Accent-robust CTC experiments on synthetic multi-accent data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus as JSON lines (`--seed` sets the corpus seed).
    GenData(Common),
    /// Train one model and write report, trace and checkpoint.
    Train(Common),
    /// Train the embedding extractor and write z-normalised utterance embeddings.
    ExtractEmb(Common),
    /// LDA, accent remap and t-SNE over extracted embeddings.
    Analyze(Common),
    /// Evaluate a labeled-embedding model under corrupted test labels.
    Ablate(Common),
    /// Merge report.json files from earlier runs into one table.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directories (or report.json files) to merge.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long, default_value = "Results")]
        title: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Dat,
    Mtl,
}

#[derive(Args)]
struct Common {
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Dotted `key=value` assignment, e.g. `train.epochs=4`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn config(&self, seed_key: &str) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("{seed_key}={s}"));
        }
        if let Some(m) = self.mode {
            let name = match m {
                ModeArg::Baseline => "baseline",
                ModeArg::Dat => "dat",
                ModeArg::Mtl => "mtl",
            };
            overrides.push(format!("train.mode=\"{name}\""));
        }
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p, &overrides),
            None => ExperimentConfig::with_overrides(&overrides),
        };
        cfg.context("invalid configuration")
    }
}

fn save_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()?).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(c: &Common) -> Result<()> {
    let cfg = c.config("corpus.seed")?;
    let corpus = Corpus::generate(&cfg.corpus)?;
    save_config(&c.out, &cfg)?;
    let path = c.out.join("corpus.jsonl");
    write_utterances(&path, &corpus.utterances)?;
    println!("wrote {} utterances to {}", corpus.utterances.len(), path.display());
    Ok(())
}

fn train(c: &Common) -> Result<()> {
    let cfg = c.config("seed")?;
    let utts = load_corpus(&cfg)?;
    let run = run_train(&cfg, &utts)?;
    save_config(&c.out, &cfg)?;
    write_train_outputs(&c.out, &run)?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |w| format!("{:.2}%", 100.0 * w));
    println!(
        "{}: WER non-dominant {}, novel {}, dominant {}",
        run.name,
        fmt(run.wer.non_dominant),
        fmt(run.wer.novel),
        fmt(run.wer.dominant)
    );
    if let Some(p) = run.final_probe_accuracy() {
        println!("final accent-probe accuracy {p:.3}");
    }
    println!("outputs in {}", c.out.display());
    Ok(())
}

fn extract(c: &Common) -> Result<()> {
    let cfg = c.config("seed")?;
    let utts = load_corpus(&cfg)?;
    let data = data_split(&cfg, &utts)?;
    let emb = extracted_embeddings(&cfg, &data)?;
    save_config(&c.out, &cfg)?;
    write_extract_outputs(&c.out, &fingerprint(&cfg)?, &emb)?;
    if let Some(a) = emb.validation_accuracy {
        println!("extractor validation accuracy {a:.3}");
    }
    println!("{} embeddings written to {}", emb.by_id.len(), c.out.display());
    Ok(())
}

fn analyze(c: &Common) -> Result<()> {
    let cfg = c.config("seed")?;
    let utts = load_corpus(&cfg)?;
    let data = data_split(&cfg, &utts)?;
    let emb = extracted_embeddings(&cfg, &data)?;
    let run = run_analysis(&cfg, &data, &emb)?;
    save_config(&c.out, &cfg)?;
    write_analysis_outputs(&c.out, &run)?;
    println!("groups {:?}", run.remap.groups);
    println!(
        "region ARI {:.3}, 5-NN purity accent {:.3} region {:.3}",
        run.report.region_ari, run.report.accent_purity, run.report.region_purity
    );
    Ok(())
}

fn ablate(c: &Common) -> Result<()> {
    let cfg = c.config("seed")?;
    let utts = load_corpus(&cfg)?;
    let run = run_ablation(&cfg, &utts, &cfg.ablation.rates)?;
    save_config(&c.out, &cfg)?;
    let report = ReportFile {
        fingerprint: run.fingerprint,
        rows: run.rows,
        wer: run.tables.into_iter().map(|t| t.2).collect(),
    };
    write_report(&c.out, "Corrupted accent labels", &report)?;
    print!("{}", std::fs::read_to_string(c.out.join("report.md"))?);
    Ok(())
}

fn report(c: &Common, inputs: &[PathBuf], title: &str) -> Result<()> {
    let mut merged = ReportFile {
        fingerprint: String::new(),
        rows: Vec::new(),
        wer: Vec::new(),
    };
    let mut prints = Vec::new();
    for p in inputs {
        let file = if p.is_dir() { p.join("report.json") } else { p.clone() };
        let r = ReportFile::load(&file)?;
        prints.push(r.fingerprint);
        merged.rows.extend(r.rows);
        merged.wer.extend(r.wer);
    }
    if merged.rows.is_empty() {
        bail!("no report rows in the given inputs");
    }
    merged.fingerprint = prints.join(",");
    write_report(&c.out, title, &merged)?;
    print!("{}", std::fs::read_to_string(c.out.join("report.md"))?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => train(c),
        Command::ExtractEmb(c) => extract(c),
        Command::Analyze(c) => analyze(c),
        Command::Ablate(c) => ablate(c),
        Command::Report { common, input, title } => report(common, input, title),
    }
}
