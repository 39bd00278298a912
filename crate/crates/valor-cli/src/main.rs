//! Command-line driver: pretraining, fine-tuning, evaluation, synthetic data
//! generation, the audio-concept-density tool, and the ablation runner.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use valor::ablation::{render_table, run_ablation, AblationAxis};
use valor::data::{acd, corpus_stats, generate_example, load_corpus, save_dataset, ConceptOntology};
use valor::mga::ModalityGroup;
use valor::trainer::{Task, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "valor", about = "Desk-scale tri-modality pretraining framework", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Training configuration (TOML, flat key = value).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints, metrics, and reports.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the joint pretraining loop.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Adapt a pretrained checkpoint to one task and modality group.
    Finetune {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a checkpoint on the held-out synthetic retrieval split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write a synthetic tri-modality dataset directory.
    GenerateData {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of examples to generate.
        #[arg(long, default_value_t = 64)]
        count: usize,
    },
    /// Audio concept density of a caption corpus against an ontology.
    Acd {
        #[command(flatten)]
        common: CommonArgs,
        /// Ontology file: one concept phrase per line.
        #[arg(long)]
        ontology: PathBuf,
        /// Corpus file: one caption per line.
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train and score a named configuration grid.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// Grid axis: mga-groups, mgc-groups, alignment-variants,
        /// fusion-variants, or combine-tasks.
        #[arg(long)]
        axis: String,
    },
}

fn load_config(common: &CommonArgs) -> Result<TrainConfig> {
    let mut config = match &common.config {
        Some(path) => TrainConfig::load(path).with_context(|| format!("loading {path:?}"))?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn print_evals(evals: &[valor::trainer::GroupEval]) {
    for e in evals {
        println!("{:<5} R@1 {:.4}  R@5 {:.4}  R@10 {:.4}", e.group, e.r1, e.r5, e.r10);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Pretrain { common } => {
            let config = load_config(&common)?;
            let mut trainer = Trainer::new(config)?;
            let evals = trainer.pretrain(common.out.as_deref())?;
            println!("pretrained {} steps", trainer.step);
            print_evals(&evals);
        }
        Command::Finetune { common } => {
            let config = load_config(&common)?;
            if config.init_checkpoint.is_empty() {
                bail!("finetune needs init_checkpoint in the config");
            }
            let mut trainer = Trainer::from_checkpoint_file(Path::new(&config.init_checkpoint))?;
            let task = Task::parse(&config.finetune_task)?;
            let group = ModalityGroup::parse(&config.finetune_group)?;
            trainer.finetune(task, &group, config.finetune_steps)?;
            println!(
                "finetuned {} for {} steps on {}",
                config.finetune_task,
                config.finetune_steps,
                group.label()
            );
            if let Some(out) = &common.out {
                std::fs::create_dir_all(out)?;
                trainer.save_checkpoint(&out.join("checkpoint.bin"))?;
                let (evals, _) = trainer.evaluate()?;
                print_evals(&evals);
            }
        }
        Command::Eval { common } => {
            let config = load_config(&common)?;
            if config.init_checkpoint.is_empty() {
                bail!("eval needs init_checkpoint in the config");
            }
            let trainer = Trainer::from_checkpoint_file(Path::new(&config.init_checkpoint))?;
            let (evals, reports) = trainer.evaluate()?;
            print_evals(&evals);
            if let Some(out) = &common.out {
                std::fs::create_dir_all(out)?;
                for (label, report) in &reports {
                    std::fs::write(
                        out.join(format!("eval_{}.txt", label.to_lowercase())),
                        report.render(),
                    )?;
                }
            }
        }
        Command::GenerateData { common, count } => {
            let config = load_config(&common)?;
            let out = common.out.clone().context("generate-data needs --out")?;
            let gen = config.generator_config();
            let vocab = gen.vocabulary()?;
            let spec = config.dataset_spec()?;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(config.seed);
            let mut examples = Vec::with_capacity(count);
            for _ in 0..count {
                let entry = &spec.datasets[spec.sample(&mut rng)?];
                examples.push(generate_example(&gen, entry.has_audio, &mut rng)?);
            }
            save_dataset(&out, &examples, &vocab)?;
            println!("wrote {count} examples to {}", out.display());
        }
        Command::Acd { common, ontology, corpus } => {
            let ont = ConceptOntology::load(&ontology)?;
            let captions = load_corpus(&corpus)?;
            let density = acd(&captions, &ont)?;
            let stats = corpus_stats(&captions, &ont)?;
            println!("acd {density:.6}");
            println!("captions {}", stats.captions);
            println!("average_caption_length {:.4}", stats.average_length);
            if let Some(out) = &common.out {
                std::fs::create_dir_all(out)?;
                let mut body = format!(
                    "acd {density:.6}\ncaptions {}\naverage_caption_length {:.4}\n",
                    stats.captions, stats.average_length
                );
                for (phrase, count) in &stats.phrase_counts {
                    body.push_str(&format!("phrase {phrase} {count}\n"));
                }
                std::fs::write(out.join("acd_report.txt"), body)?;
            }
        }
        Command::Ablate { common, axis } => {
            let config = load_config(&common)?;
            let axis = AblationAxis::parse(&axis)?;
            let benchmarks: Vec<ModalityGroup> = config
                .eval_groups
                .iter()
                .map(|s| ModalityGroup::parse(s))
                .collect::<valor::Result<_>>()?;
            let result = run_ablation(&config, axis, &benchmarks)?;
            let table = render_table(&result);
            print!("{table}");
            if let Some(out) = &common.out {
                std::fs::create_dir_all(out)?;
                std::fs::write(out.join("ablation.txt"), table)?;
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
