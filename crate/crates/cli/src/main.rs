use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mogeo::config::TrainConfig;
use mogeo::cvmf::write_detections;
use mogeo::data::{generate_dataset, read_dataset, write_dataset, DatasetSplit, GenerateConfig, SplitName, SPLIT_FRACTIONS};
use mogeo::eval::ImageRule;
use mogeo::train::{ablate, evaluate_cmd, split_pairs, timing_report, train_cmd, Checkpoint};
use mogeo::viz::visualize;

#[derive(Parser, Debug)]
#[command(name = "mogeo", about = "Multi-object cross-view localization on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset directory.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        pairs: usize,
        #[arg(long, default_value_t = 2)]
        objects_min: usize,
        #[arg(long, default_value_t = 4)]
        objects_max: usize,
        /// Apply a random crop, flip and rescale to every reference image.
        #[arg(long)]
        v2: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split; writes checkpoint.bin and train_log.txt.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint; writes the report and detection records.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
        /// Use the literal image rule: correct when no object exceeds the threshold.
        #[arg(long)]
        literal_acci: bool,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score the full model and its three ablations.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the detection overlay and attention heatmaps of one pair.
    Visualize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pair: String,
        #[arg(long, default_value = "viz")]
        out: PathBuf,
    },
    /// Parameter count and mean inference time per pair.
    Timing {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate {
            seed,
            pairs,
            objects_min,
            objects_max,
            v2,
            out,
        } => {
            let cfg = GenerateConfig {
                seed,
                pairs,
                objects: (objects_min, objects_max),
                v2,
                ..GenerateConfig::default()
            };
            let data = generate_dataset(&cfg)?;
            let ids: Vec<String> = data.iter().map(|p| p.pair_id.clone()).collect();
            let split = DatasetSplit::apportion(&ids, SPLIT_FRACTIONS)?;
            let manifest = write_dataset(&data, &split, &out)?;
            for (name, n) in &manifest.counts {
                println!("{} {n}", name.as_str());
            }
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let outcome = train_cmd(&cfg, &data, &out)?;
            let last = outcome.history.last().context("no training steps ran")?;
            println!("steps {} final total {:.6}", outcome.checkpoint.step, last.total);
            println!("wrote {}", out.join("checkpoint.bin").display());
        }
        Command::Eval {
            ckpt,
            data,
            split,
            literal_acci,
            out,
        } => {
            let rule = if literal_acci { ImageRule::Literal } else { ImageRule::AllExceed };
            let (report, records) = evaluate_cmd(&ckpt, &data, split, rule)?;
            let dir = out.unwrap_or_else(|| ckpt.parent().map(Path::to_path_buf).unwrap_or_default());
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let report_path = dir.join(format!("eval_{}.txt", split.as_str()));
            std::fs::write(&report_path, report.to_text()).with_context(|| format!("writing {}", report_path.display()))?;
            write_detections(&dir.join(format!("detections_{}.txt", split.as_str())), &records)?;
            print!("{}", report.to_text());
        }
        Command::Ablate { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let (pairs, split) = read_dataset(&data)?;
            let train = split_pairs(&pairs, &split, SplitName::Train);
            let test = split_pairs(&pairs, &split, SplitName::Test);
            if train.is_empty() || test.is_empty() {
                bail!("ablation needs non-empty train and test splits");
            }
            let mut table = String::from("variant acc@0.25 acc@0.5 accI@0.25 accI@0.5 final_loss\n");
            for row in ablate(&cfg, &train, &test)? {
                table.push_str(&format!("{} {} {:.6}\n", row.name.replace(' ', "_"), row.report.summary_line(), row.final_loss.total));
            }
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            std::fs::write(out.join("ablation.txt"), &table)?;
            print!("{table}");
        }
        Command::Visualize { ckpt, data, pair, out } => {
            let (model, params) = Checkpoint::load(&ckpt)?.restore()?;
            let (pairs, _) = read_dataset(&data)?;
            let found = pairs
                .iter()
                .find(|p| p.pair_id == pair)
                .with_context(|| format!("no pair {pair} in {}", data.display()))?;
            let written = visualize(&model, &params, found, &out)?;
            println!("{}", written.overlay.display());
            for h in &written.heatmaps {
                println!("{}", h.path.display());
            }
        }
        Command::Timing { ckpt, data, split } => {
            let (model, params) = Checkpoint::load(&ckpt)?.restore()?;
            let (pairs, splits) = read_dataset(&data)?;
            let subset = split_pairs(&pairs, &splits, split);
            let t = timing_report(&model, &params, &subset)?;
            println!("parameters {} (analytic {})", t.param_count, t.analytic_param_count);
            println!("pairs {} mean seconds {:.6}", t.n_pairs, t.mean_seconds);
        }
    }
    Ok(())
}
