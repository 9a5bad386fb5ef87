use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use soapopt_core::corpus::section_inventory;
use soapopt_core::review_api::{self, ReviewerLabel, ServeOptions};
use soapopt_core::run::{self, Pipeline, RunConfig, RunDir, RunError};

/// Section-wise prompt optimization for clinical note summaries.
#[derive(Parser, Debug)]
#[command(name = "soapopt", version, about, propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load a dialogue CSV into <out>/dataset.json and print the section inventory.
    Ingest {
        /// CSV with columns id, section_header, section_text, dialogue.
        csv: PathBuf,
        /// Run directory to write into (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Sections with fewer records are dropped.
        #[arg(long, default_value_t = 10)]
        min_section_size: usize,
        /// Training samples per section, used for the evaluation-count column.
        #[arg(long, default_value_t = 5)]
        train_sample_size: usize,
    },
    /// Optimize per-section prompts as described by a TOML or JSON config.
    Optimize {
        /// Run config (.toml or .json).
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated section filter, e.g. CC,GENHX.
        #[arg(long)]
        sections: Option<String>,
        /// Sections optimized concurrently; also bounds parallel backend calls.
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
        parallel_sections: Option<u32>,
    },
    /// Score a prompt-set file on every section's evaluation records.
    Evaluate {
        /// Run directory created by `optimize`.
        #[arg(long)]
        run: PathBuf,
        /// Prompt-set JSON; relative paths are also looked up in the run directory.
        #[arg(long)]
        group: PathBuf,
        /// Model that writes the summaries.
        #[arg(long)]
        mentee: String,
    },
    /// Write score, delta and mentor-impact tables under <run>/report.
    Report {
        /// Run directory.
        #[arg(long)]
        run: PathBuf,
    },
    /// Serve the review API (and optionally a static UI bundle).
    Serve {
        /// Run directory with optimization traces.
        #[arg(long)]
        run: PathBuf,
        /// Port to listen on; 0 picks a free port.
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Address to bind.
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Reveal which prompt produced each side before voting.
        #[arg(long)]
        unblinded: bool,
        /// Directory with the built review UI, served at /.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
        /// Reviewer label recorded in the session.
        #[arg(long, value_enum, default_value_t = Reviewer::Expert)]
        reviewer: Reviewer,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Reviewer {
    Expert,
    NonExpert,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn execute(command: Command) -> Result<(), RunError> {
    match command {
        Command::Ingest {
            csv,
            out,
            min_section_size,
            train_sample_size,
        } => {
            let dataset = run::ingest(&csv, &out, min_section_size)?;
            println!("section\trecords\tevaluation");
            let mut eval_total = 0;
            for (section, n) in section_inventory(&dataset) {
                let eval = n.saturating_sub(train_sample_size);
                eval_total += eval;
                println!("{section}\t{n}\t{eval}");
            }
            println!("total\t{}\t{eval_total}", dataset.total_records());
            for (section, n) in &dataset.provenance.dropped_sections {
                println!("dropped\t{section}\t{n}");
            }
        }
        Command::Optimize {
            config,
            sections,
            parallel_sections,
        } => {
            let loaded = RunConfig::load(&config)?;
            let prepared = Pipeline::prepare(&loaded)?;
            let root = prepared.run.root.clone();
            drop(prepared);
            let parallel = parallel_sections.map(|n| n as usize);
            let pipeline = Pipeline::open_with(&root, parallel)?;
            let selected = pipeline.select_sections(sections.as_deref())?;
            let traces = pipeline.optimize(&selected, parallel.unwrap_or(1))?;
            for t in &traces {
                println!(
                    "{}\t{}\tR1={:.4}",
                    t.section, t.final_prompt.id, t.validation.rouge1.f1
                );
            }
            println!("traces: {}", RunDir::new(&root).traces().display());
        }
        Command::Evaluate { run, group, mentee } => {
            let pipeline = Pipeline::open(&run)?;
            let group = locate(&group, &run);
            let (table, csv) = pipeline.evaluate(&group, &mentee)?;
            print!("{}", table.to_csv());
            println!("written: {}", csv.display());
        }
        Command::Report { run } => {
            let pipeline = Pipeline::open(&run)?;
            for p in pipeline.report()? {
                println!("{}", p.display());
            }
        }
        Command::Serve {
            run,
            port,
            host,
            unblinded,
            ui_dir,
            reviewer,
        } => {
            let opts = ServeOptions {
                addr: SocketAddr::new(host, port),
                unblinded,
                ui_dir,
                reviewer_label: match reviewer {
                    Reviewer::Expert => ReviewerLabel::Expert,
                    Reviewer::NonExpert => ReviewerLabel::NonExpert,
                },
            };
            review_api::serve_forever(&run, opts, |addr| println!("listening on http://{addr}"))?;
        }
    }
    Ok(())
}

fn locate(path: &Path, run: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() && run.join(path).exists() {
        run.join(path)
    } else {
        path.to_path_buf()
    }
}
