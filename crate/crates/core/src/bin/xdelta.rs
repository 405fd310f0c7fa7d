use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xdelta::error::Error;
use xdelta::pipeline::{run_pipeline, PipelineConfig, RunOutput, Stage};

#[derive(Parser)]
#[command(name = "xdelta", version, about = "Explain an edge CNN through a DELTA network against a base CNN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML config; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (artifacts/ and report/ are created inside).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override any config field, e.g. `loss.lambda_fnc=0`. Repeatable.
    #[arg(long = "stage-override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train or load the pair and check the accuracy gap.
    Validate(Common),
    /// Learn sparsity coefficients and fine-tune the base subgraph.
    Extract(Common),
    /// Build the DELTA network under the cost budget.
    Assemble(Common),
    /// Train DELTA with the combined loss.
    Train(Common),
    /// Compute activation maps and categorize explanations.
    Analyze(Common),
    /// Compute cost ratios and emit plots.
    Report(Common),
    /// Run every stage.
    All(Common),
    /// Print the effective config as TOML.
    ShowConfig(Common),
}

fn load(c: &Common) -> Result<PipelineConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p, &c.overrides)?,
        None => {
            let mut cfg = PipelineConfig::from_toml("", &c.overrides)?;
            cfg.resolve_paths(&std::env::current_dir()?);
            cfg
        }
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn summary(out: &RunOutput) {
    let v = &out.validation.verdict;
    println!(
        "pair: base {:.4}, edge {:.4}, gap {:.4}",
        v.base_accuracy, v.edge_accuracy, v.gap
    );
    if let Some(a) = &out.assembly {
        println!(
            "delta: {} params, {} MACs (truncated at layer {})",
            a.delta_cost.param_count, a.delta_cost.mac_count, a.truncate_at
        );
    }
    if let Some(t) = &out.training {
        if let Some(e) = &t.run.final_eval {
            println!("fused {:.4}, edge {:.4}, base {:.4}", e.fused_acc, e.edge_acc, e.base_acc);
        }
        if let Some(s) = t.correlation.correlation_score {
            println!("correlation score {s:.4} over {} images", t.correlation.subset_size);
        }
    }
    if let Some(g) = &out.geometric {
        println!("{} explanations categorized", g.records);
    }
    if let Some(r) = &out.ratios {
        println!(
            "P_D/E {:.4}  F_D/E {:.4}  P_D/B {:.4}  F_D/B {:.4}",
            r.p_delta_edge, r.f_delta_edge, r.p_delta_base, r.f_delta_base
        );
    }
    println!("bundle: {}", out.bundle_dir.display());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (common, stage) = match &cli.command {
        Command::Validate(c) => (c, Some(Stage::Validate)),
        Command::Extract(c) => (c, Some(Stage::Extract)),
        Command::Assemble(c) => (c, Some(Stage::Assemble)),
        Command::Train(c) => (c, Some(Stage::Train)),
        Command::Analyze(c) => (c, Some(Stage::Analyze)),
        Command::Report(c) | Command::All(c) => (c, Some(Stage::Report)),
        Command::ShowConfig(c) => (c, None),
    };
    let result = load(common).and_then(|cfg| match stage {
        None => cfg.to_toml().map(|t| print!("{t}")),
        Some(s) => run_pipeline(&cfg, s).map(|out| summary(&out)),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
