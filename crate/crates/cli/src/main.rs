use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Parser, Subcommand};
use serde_json::json;

use formnet::data::{generate_synthetic_corpus, load_dataset, save_dataset, SyntheticFormSpec};
use formnet::graph::DEFAULT_NEIGHBORS;
use formnet::harness::{self, AverageMode, TrainConfig};
use formnet::model::load_checkpoint;

#[derive(Parser)]
#[command(name = "formnet", version, about = "Form entity extraction with graph contrastive pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic form corpus to `<out>/data.json` plus page images.
    GenerateData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train with MLM and graph contrastive learning.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune BIOES tagging, optionally from a pre-trained checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a labeled dataset; prints metrics as JSON.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "micro")]
        mode: String,
    },
    /// Dump a graph, attention map or edge image feature as JSON.
    #[command(group(ArgGroup::new("what").required(true).args(["graph", "attention", "edge_image"])))]
    Inspect {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_name = "DOC_ID")]
        graph: Option<String>,
        #[arg(long, value_name = "DOC_ID")]
        attention: Option<String>,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, num_args = 3, value_names = ["DOC_ID", "I", "J"])]
        edge_image: Option<Vec<String>>,
        /// Neighbors per token for `--graph` without a checkpoint.
        #[arg(long, default_value_t = DEFAULT_NEIGHBORS)]
        neighbors: usize,
    },
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(v)?) {
        Err(e) if e.kind() == ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn generate(spec_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let spec: SyntheticFormSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", spec_path.display()))?;
    let docs = generate_synthetic_corpus(&spec)?;
    fs::create_dir_all(out)?;
    let path = out.join("data.json");
    save_dataset(&path, &docs)?;
    print_json(&json!({"documents": docs.len(), "dataset": path}))
}

fn inspect(cmd: Command) -> Result<()> {
    let Command::Inspect {
        data,
        ckpt,
        graph,
        attention,
        layer,
        edge_image,
        neighbors,
    } = cmd
    else {
        unreachable!()
    };
    let docs = load_dataset(&data)?;
    let ck = ckpt.as_deref().map(load_checkpoint).transpose()?;
    if let Some(id) = graph {
        let doc = harness::find_doc(&docs, &id)?;
        let (k, max) = match &ck {
            Some(c) => (c.model.config().neighbors, c.model.config().max_seq_len),
            None => (neighbors, usize::MAX),
        };
        return print_json(&harness::inspect_graph(doc, k, max)?);
    }
    let Some(ck) = ck else {
        bail!("--attention and --edge-image need --ckpt");
    };
    if let Some(id) = attention {
        let doc = harness::find_doc(&docs, &id)?;
        return print_json(&harness::inspect_attention(&ck.model, &ck.vocab, doc, layer)?);
    }
    let args = edge_image.expect("clap requires one of the inspect targets");
    let doc = harness::find_doc(&docs, &args[0])?;
    let i: usize = args[1].parse().context("edge endpoint I")?;
    let j: usize = args[2].parse().context("edge endpoint J")?;
    print_json(&harness::inspect_edge_image(&ck.model, &ck.vocab, doc, i, j)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { spec, out } => generate(&spec, &out),
        Command::Pretrain { config, out } => {
            let cfg = TrainConfig::from_file(&config)?;
            let trained = harness::pretrain(&cfg, &out)?;
            print_json(&json!({
                "checkpoint": out,
                "steps": trained.log.len(),
                "final": trained.log.last(),
                "parameters": trained.model.num_parameters(),
            }))
        }
        Command::Finetune { config, init, out } => {
            let cfg = TrainConfig::from_file(&config)?;
            let trained = harness::finetune(&cfg, init.as_deref(), &out)?;
            print_json(&json!({
                "checkpoint": out,
                "steps": trained.log.len(),
                "final": trained.log.last(),
            }))
        }
        Command::Evaluate { ckpt, data, mode } => {
            let mode: AverageMode = mode.parse()?;
            let report = harness::evaluate(&ckpt, &data, mode)?;
            print_json(&serde_json::to_value(report)?)
        }
        cmd @ Command::Inspect { .. } => inspect(cmd),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
