//! Command-line entry point: synthetic data generation, training,
//! evaluation, offline encoding, cache-based ranking and the scaling
//! benchmark.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fum_core::bench::{measure_scaling, MixerKind};
use fum_core::cache::{build_news_cache, build_user_cache, rank_from_cache, EmbeddingCache};
use fum_core::config::AppConfig;
use fum_core::data::load_dataset;
use fum_core::error::Error;
use fum_core::metrics::{evaluate, MetricReport};
use fum_core::model::FumModel;
use fum_core::store::{load_checkpoint, save_checkpoint};
use fum_core::synth::{generate_synthetic, write_synthetic};
use fum_core::trainer::{log_to_tsv, run_training};

#[derive(Parser)]
#[command(name = "fum", version, about = "Fine-grained news recommendation engine")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set seed=7. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic topic dataset under data_dir.
    Synth,
    /// Train on data_dir, write the checkpoint to model_path.
    Train,
    /// Evaluate a checkpoint on the eval split.
    Eval,
    /// Encode all news into news_cache.
    EncodeNews,
    /// Encode eval-split users into user_cache.
    EncodeUsers,
    /// Rank eval impressions from the caches alone.
    Rank,
    /// Time both sequence mixers over bench_lengths.
    Bench,
}

fn load_config(cli: &Cli) -> anyhow::Result<AppConfig> {
    let mut cfg = AppConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        cfg.apply_text(&text, &path.display().to_string())?;
    }
    for item in &cli.overrides {
        let Some((key, value)) = item.split_once('=') else {
            anyhow::bail!("--set expects key=value, got `{item}`");
        };
        cfg.set(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(text: &str, path: Option<&PathBuf>) -> anyhow::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::file(p, e))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    match cli.command {
        Command::Synth => {
            let dir = cfg.require_data_dir()?;
            let data = generate_synthetic(&cfg.synth)?;
            write_synthetic(&data, dir)?;
            println!(
                "wrote {} news, {} train and {} eval impressions to {}",
                data.news.len(),
                data.train.len(),
                data.eval.len(),
                dir.display()
            );
        }
        Command::Train => {
            let dir = cfg.require_data_dir()?;
            let bundle = load_dataset(dir, &cfg.train, cfg.pretrained_vectors.as_deref())?;
            if let Some(ratio) = bundle.pretrained_hit_ratio {
                eprintln!("pretrained vectors covered {:.1}% of the vocabulary", ratio * 100.0);
            }
            let outcome = run_training(&bundle, &cfg.train)?;
            save_checkpoint(&outcome.params, Some(&outcome.adam), cfg.require_model_path()?)?;
            if outcome.skipped_impressions > 0 {
                eprintln!(
                    "skipped {} train impressions without usable pairs",
                    outcome.skipped_impressions
                );
            }
            emit(&log_to_tsv(&outcome.log), cfg.metrics_out.as_ref())?;
        }
        Command::Eval => {
            let dir = cfg.require_data_dir()?;
            let bundle = load_dataset(dir, &cfg.train, None)?;
            let (store, _) = load_checkpoint(cfg.require_model_path()?)?;
            let model = FumModel::new(&cfg.train, bundle.vocab.len())?;
            let report = evaluate(&model, &store, &bundle.eval, &bundle.news)?;
            let mut text = String::from(MetricReport::TSV_HEADER);
            text.push('\n');
            text.push_str(&report.tsv_row(0, "eval", None));
            text.push('\n');
            emit(&text, cfg.metrics_out.as_ref())?;
        }
        Command::EncodeNews => {
            let dir = cfg.require_data_dir()?;
            let bundle = load_dataset(dir, &cfg.train, None)?;
            let (store, _) = load_checkpoint(cfg.require_model_path()?)?;
            let model = FumModel::new(&cfg.train, bundle.vocab.len())?;
            let cache = build_news_cache(&model, &store, &bundle.news)?;
            let path = cfg
                .news_cache
                .as_ref()
                .ok_or_else(|| Error::Config("news_cache is not set".into()))?;
            cache.save(path)?;
            println!("cached {} news vectors to {}", cache.len(), path.display());
        }
        Command::EncodeUsers => {
            let dir = cfg.require_data_dir()?;
            let bundle = load_dataset(dir, &cfg.train, None)?;
            let (store, _) = load_checkpoint(cfg.require_model_path()?)?;
            let model = FumModel::new(&cfg.train, bundle.vocab.len())?;
            let cache = build_user_cache(&model, &store, &bundle.eval, &bundle.news, cfg.train.ablation)?;
            let path = cfg
                .user_cache
                .as_ref()
                .ok_or_else(|| Error::Config("user_cache is not set".into()))?;
            cache.save(path)?;
            println!("cached {} user vectors to {}", cache.len(), path.display());
        }
        Command::Rank => {
            let dir = cfg.require_data_dir()?;
            let bundle = load_dataset(dir, &cfg.train, None)?;
            let news = EmbeddingCache::load(
                cfg.news_cache
                    .as_ref()
                    .ok_or_else(|| Error::Config("news_cache is not set".into()))?,
            )?;
            let users = EmbeddingCache::load(
                cfg.user_cache
                    .as_ref()
                    .ok_or_else(|| Error::Config("user_cache is not set".into()))?,
            )?;
            let ranked = rank_from_cache(&news, &users, &bundle.eval)?;
            let mut text = String::from("impression_id\tranking\tscores\n");
            for r in &ranked {
                let ids: Vec<&str> = r.ranked.iter().map(|(id, _)| id.as_str()).collect();
                let scores: Vec<String> = r.ranked.iter().map(|(_, s)| format!("{s:.6}")).collect();
                text.push_str(&format!(
                    "{}\t{}\t{}\n",
                    r.impression_id,
                    ids.join(" "),
                    scores.join(" ")
                ));
            }
            emit(&text, cfg.rank_out.as_ref())?;
        }
        Command::Bench => {
            let report = measure_scaling(&MixerKind::ALL, &cfg.bench)?;
            emit(&report.to_tsv(), cfg.metrics_out.as_ref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
