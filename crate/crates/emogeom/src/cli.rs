//! Command-line front end.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use emogeom_core::genprotocol::GenerationProtocol;
use emogeom_core::record::{BackendKind, Precision};
use emogeom_core::Error as CoreError;

use crate::error::{Error, Result};
use crate::pipeline::comprehension::{load_descriptors, load_sweep, reanalyze, run_extract, DescriptorsFile};
use crate::pipeline::decomposition::run_decomposition;
use crate::pipeline::equivalence::run_equivalence;
use crate::pipeline::generation::run_and_persist;
use crate::pipeline::steering::run_steering;
use crate::pipeline::Context;
use crate::registry::{load_model_table, read_json, write_json, Artifact, RunLayout};
use crate::report::config::PipelineConfig;
use crate::report::{compare, emit_report, ReportConfig};

#[derive(Debug, Parser)]
#[command(name = "emogeom", version, about = "Emotion-vector geometry for small language models")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Model id (built-in, local directory, or hub id); repeatable.
    #[arg(long = "model", global = true)]
    pub models: Vec<String>,
    /// Model table (CSV or JSON) with the descriptor columns.
    #[arg(long, global = true)]
    pub models_table: Option<PathBuf>,
    /// fp16, bf16, fp32 or int8.
    #[arg(long, global = true)]
    pub precision: Option<String>,
    /// named_hook or hidden_state_sequence.
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// Comma-separated layer indices.
    #[arg(long, global = true, value_delimiter = ',')]
    pub layers: Vec<usize>,
    /// Run root.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// TOML or JSON pipeline configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Matched,
    Alternative,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Comprehension extraction with the full layer sweep.
    Extract,
    /// Generation extraction under a protocol preset.
    GenExtract {
        #[arg(long, value_enum, default_value = "matched")]
        preset: Preset,
    },
    /// Compare vectors from the two backend styles.
    Equivalence,
    /// Steering traces and regime at the best layer.
    Steer,
    /// Recompute RDMs and descriptors from persisted vectors.
    Analyze,
    /// RDM-of-RDMs and size correlations over the run root.
    Compare,
    /// The four-condition decomposition.
    Decompose,
    /// Tables, figures and index under `<out>/report`.
    Report {
        /// JSON object of behavioral scores keyed by model id.
        #[arg(long)]
        behavioral: Option<PathBuf>,
    },
}

/// How a successful command ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Complete,
    Partial,
}

/// Process exit status for a command result.
pub fn exit_code(result: &Result<Outcome>) -> u8 {
    match result {
        Ok(Outcome::Complete) => 0,
        Ok(Outcome::Partial) => 3,
        Err(Error::Validation(_) | Error::Parse { .. } | Error::Capability(_)) => 2,
        Err(Error::Core(CoreError::Argument(_) | CoreError::Capability { .. })) => 2,
        Err(Error::Core(CoreError::MissingCondition(_))) => 3,
        Err(_) => 1,
    }
}

fn parse_precision(s: &str) -> Result<Precision> {
    s.parse().map_err(|e: CoreError| Error::Validation(e.to_string()))
}

fn parse_backend(s: &str) -> Result<BackendKind> {
    s.parse().map_err(|e: CoreError| Error::Validation(e.to_string()))
}

/// Config file (if any) with command-line flags applied on top.
pub fn resolve_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if !common.models.is_empty() {
        cfg.models = common.models.clone();
    }
    if let Some(t) = &common.models_table {
        cfg.models_table = Some(t.clone());
    }
    if let Some(p) = &common.precision {
        cfg.precision = parse_precision(p)?;
    }
    if let Some(b) = &common.backend {
        cfg.backend = parse_backend(b)?;
        cfg.backend_overrides.clear();
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn context(cfg: &PipelineConfig) -> Result<Context> {
    let mut ctx = Context::new(RunLayout::new(&cfg.out), cfg.corpus()?);
    if let Some(t) = &cfg.models_table {
        ctx.table = load_model_table(t)?;
    }
    Ok(ctx)
}

fn target_models(cfg: &PipelineConfig, ctx: &Context) -> Result<Vec<String>> {
    if !cfg.models.is_empty() {
        return Ok(cfg.models.clone());
    }
    if !ctx.table.is_empty() {
        return Ok(ctx.table.iter().map(|r| r.record.model_id.clone()).collect());
    }
    Err(Error::Validation("no models given; use --model, --models-table or the config".into()))
}

/// Model ids with persisted descriptors under the run root.
fn run_models(layout: &RunLayout) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for dir in layout.model_dirs()? {
        let p = dir.join("descriptors.json");
        if p.is_file() {
            ids.push(read_json::<Artifact<DescriptorsFile>>(&p)?.body.model.model_id);
        }
    }
    Ok(ids)
}

fn no_layers(common: &Common, command: &str) -> Result<()> {
    if common.layers.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(format!("--layers does not apply to {command}")))
    }
}

fn print_descriptors(d: &DescriptorsFile) {
    let x = &d.descriptors;
    println!(
        "{}: best layer {} of {} ({:.1}%), anisotropy {:.4}, rdm std {:.4}, steering {}",
        x.model_id,
        x.best_layer,
        d.model.n_layers,
        x.best_layer_pct * 100.0,
        x.anisotropy,
        x.rdm_std,
        x.steering_regime.as_str()
    );
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let common = &cli.common;
    let cfg = resolve_config(common)?;
    match &cli.command {
        Command::Extract => {
            no_layers(common, "extract")?;
            let ctx = context(&cfg)?;
            for id in target_models(&cfg, &ctx)? {
                let (model, record) = ctx.load(&id, cfg.precision, cfg.backend_for(&id))?;
                run_extract(&ctx, &model, &record)?;
                print_descriptors(&load_descriptors(&ctx, &id)?.body);
            }
        }
        Command::GenExtract { preset } => {
            no_layers(common, "gen-extract")?;
            let ctx = context(&cfg)?;
            let protocol = match preset {
                Preset::Matched => GenerationProtocol::matched(cfg.precision),
                Preset::Alternative => GenerationProtocol::alternative(cfg.precision),
            };
            let label = format!("{}_{}", preset.to_possible_value().expect("value").get_name(), cfg.precision);
            for id in target_models(&cfg, &ctx)? {
                let best = load_sweep(&ctx, &id).ok().map(|s| s.best_layer);
                let (model, _) = ctx.load(&id, protocol.precision, cfg.backend_for(&id))?;
                let (run, _, _) = run_and_persist(&ctx, &model, &label, &protocol, best)?;
                println!(
                    "{id}: {label} at layer {}, {} degenerate samples excluded",
                    run.layer,
                    run.degenerate_count()
                );
            }
        }
        Command::Equivalence => {
            let layer = match common.layers.as_slice() {
                [] => None,
                [l] => Some(*l),
                _ => return Err(Error::Validation("equivalence takes a single --layers value".into())),
            };
            let ctx = context(&cfg)?;
            for id in target_models(&cfg, &ctx)? {
                let (r, _) = run_equivalence(&ctx, &id, layer, cfg.precision)?;
                println!(
                    "{id}: layer {}, cosine min {:.6} mean {:.6}, RDM spearman {:.6}, relative frobenius {:.3e}",
                    r.layer, r.min_cosine, r.mean_cosine, r.rdm_spearman, r.relative_frobenius
                );
            }
        }
        Command::Steer => {
            no_layers(common, "steer")?;
            let ctx = context(&cfg)?;
            for id in target_models(&cfg, &ctx)? {
                let (model, _) = ctx.load(&id, cfg.precision, cfg.backend_for(&id))?;
                let (file, _) = run_steering(&ctx, &model, &cfg.steering)?;
                println!("{id}: layer {}, regime {}", file.layer, file.regime.as_str());
            }
        }
        Command::Analyze => {
            let layout = RunLayout::new(&cfg.out);
            let ids = if cfg.models.is_empty() { run_models(&layout)? } else { cfg.models.clone() };
            if ids.is_empty() {
                return Err(Error::Validation(format!("no extracted models under {}", cfg.out.display())));
            }
            let layers = (!common.layers.is_empty()).then_some(common.layers.as_slice());
            for id in ids {
                print_descriptors(&reanalyze(&layout, &id, layers)?);
            }
        }
        Command::Compare => {
            no_layers(common, "compare")?;
            let rc = ReportConfig::from_pipeline(&cfg)?;
            let c = compare(&cfg.out, &rc)?;
            write_json(&cfg.out.join("comparison.json"), &c)?;
            if let Some(x) = &c.rdm_of_rdms {
                for (i, a) in x.model_order.iter().enumerate() {
                    for (j, b) in x.model_order.iter().enumerate().skip(i + 1) {
                        println!("rho({a}, {b}) = {:.3}", x.matrix[i][j]);
                    }
                }
            }
            for r in c.size_correlations.iter().flatten() {
                println!(
                    "rho({:?}, {:?}) = {:.3}, p = {:.4} (n = {})",
                    r.predictor, r.outcome, r.rho, r.p_uncorrected, r.n
                );
            }
            for m in &c.missing {
                println!("missing: {} {} ({})", m.scope, m.item, m.reason);
            }
            if !c.missing.is_empty() {
                return Ok(Outcome::Partial);
            }
        }
        Command::Decompose => {
            no_layers(common, "decompose")?;
            let ctx = context(&cfg)?;
            for id in target_models(&cfg, &ctx)? {
                let r = run_decomposition(&ctx, &id, cfg.backend_for(&id))?;
                println!(
                    "{id}: A-C {:.3}, B-C {:.3}, C-D {:.3}, A-D {:.3}",
                    r.rho_ac, r.rho_bc, r.rho_cd, r.rho_ad
                );
            }
        }
        Command::Report { behavioral } => {
            no_layers(common, "report")?;
            let mut rc = ReportConfig::from_pipeline(&cfg)?;
            if let Some(b) = behavioral {
                if !b.is_file() {
                    return Err(Error::Validation(format!("{} does not exist", b.display())));
                }
                rc.options.behavioral = Some(b.clone());
            }
            let bundle = emit_report(&cfg.out, &rc)?;
            println!("report written to {}", bundle.out_dir.display());
            for m in &bundle.missing {
                println!("missing: {} {} ({})", m.scope, m.item, m.reason);
            }
            if !bundle.complete() {
                return Ok(Outcome::Partial);
            }
        }
    }
    Ok(Outcome::Complete)
}
