//! Operator front end for checkpoint surgery on selective state-space LMs.
//!
//! Subcommands cover the whole workflow: `gen-toy` materializes a seeded
//! synthetic checkpoint plus a sampled corpus, `inspect` prints dimensions and
//! parameter splits, `calibrate` collects activation statistics, `prune`
//! applies one of the five surgery methods, `eval` measures perplexity (and
//! optionally throughput), and `sweep` runs the masking-ratio or
//! per-component sensitivity ladders.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or contract error. Every flag
//! can also arrive through an `SSMPRUNE_`-prefixed environment variable, and
//! all parallelism respects `--threads` without changing any output bit.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ssmprune_core::calib::{CalibBundle, CalibSet};
use ssmprune_core::checkpoint;
use ssmprune_core::eval::{
    component_csv, component_sweep, measure_throughput, perplexity, ratio_sweep, sweep_csv,
    EvalReport, ThroughputRow,
};
use ssmprune_core::importance::{taylor_head_channel_scores, taylor_state_scores};
use ssmprune_core::prune::{
    apply_plan, compression_report, flap_prune, plan_headdim_pruning, plan_merge,
    plan_state_pruning, plan_wanda, zero_count, PruneMethod, PruneReport, TargetFilter,
};
use ssmprune_core::runtime::with_threads;
use ssmprune_core::toy::{build_toy_model, preset_dims, preset_names, sample_corpus};
use ssmprune_core::{Error, ModelDims, Result};

// ─── Flags ───────────────────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "ssmprune",
    version,
    about = "Surgery bench for Mamba-2-style state-space language models"
)]
struct RunConfig {
    /// Worker threads for parallel sections (0 = one per logical CPU).
    #[arg(long, global = true, default_value_t = 0, env = "SSMPRUNE_THREADS")]
    threads: usize,

    /// Seed for everything random (toy weights, corpus sampling).
    #[arg(long, global = true, default_value_t = 0, env = "SSMPRUNE_SEED")]
    seed: u64,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a seeded synthetic checkpoint (and optionally a sampled corpus).
    GenToy {
        /// One of the built-in configurations; see `--preset help`.
        #[arg(long, default_value = "toy", value_parser = parse_preset)]
        preset: ModelDims,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Also sample a calibration corpus from the model itself.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Sequences in the sampled corpus.
        #[arg(long, default_value_t = 8)]
        seqs: usize,
        /// Tokens per sampled sequence.
        #[arg(long, default_value_t = 32)]
        seq_len: usize,
    },

    /// Print dimensions, head pattern, and per-component parameter fractions.
    Inspect {
        /// Checkpoint to load; omit when using --preset.
        ckpt: Option<PathBuf>,
        /// Describe a built-in configuration closed-form instead of a file.
        #[arg(long, value_parser = parse_preset, conflicts_with = "ckpt")]
        preset: Option<ModelDims>,
    },

    /// Run a corpus through a model and save the statistics bundle.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        /// Token corpus (NDJSON arrays or the binary corpus format).
        #[arg(long)]
        data: PathBuf,
        /// Bundle output path (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Also accumulate gradient-times-weight saliency for Taylor scoring.
        #[arg(long, default_value_t = false)]
        taylor: bool,
    },

    /// Apply one surgery method and write checkpoint + plan + report.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = parse_method)]
        method: PruneMethod,
        /// Pruned checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Calibration bundle (required for wanda, state, headdim, flap).
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Fraction to remove, in [0, 1].
        #[arg(long, default_value_t = 0.25, value_parser = parse_ratio)]
        ratio: f64,
        /// Heads merged per surviving head (merge only; power of two).
        #[arg(long, default_value_t = 2)]
        factor: usize,
        /// Comma list drawn from in_proj,out_proj,mlp,lm_head (wanda only).
        #[arg(long, default_value = "in_proj,out_proj,mlp", value_parser = TargetFilter::parse_list)]
        targets: TargetFilter,
        /// Plan output path; defaults to `<out>.plan.json`.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Report output path; defaults to `<out>.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },

    /// Measure perplexity (and optionally throughput) on a corpus.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report output path (JSON); printed to stdout either way.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also time the forward pass (wall-clock; the one non-reproducible number).
        #[arg(long, default_value_t = false)]
        throughput: bool,
        /// Dense reference checkpoint for a speedup column.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },

    /// Mask at several ratios (or per component) and chart the perplexity.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Calibration bundle with activation norms.
        #[arg(long)]
        stats: PathBuf,
        #[arg(long, value_enum, default_value_t = SweepMode::Ratio)]
        mode: SweepMode,
        /// Masking ratios for ratio mode.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.25, 0.5])]
        ratios: Vec<f64>,
        /// Whole-model sparsity levels for component mode.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.05, 0.10, 0.15])]
        sparsities: Vec<f64>,
        /// Layers to mask in ratio mode.
        #[arg(long, default_value = "in_proj,out_proj,mlp", value_parser = TargetFilter::parse_list)]
        targets: TargetFilter,
        /// Write the table as CSV here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also write the rows inside a JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepMode {
    Ratio,
    Component,
}

fn parse_preset(name: &str) -> Result<ModelDims> {
    preset_dims(name).map_err(|_| {
        Error::Plan(format!(
            "unknown preset {name:?}; available: {}",
            preset_names().join(", ")
        ))
    })
}

fn parse_method(name: &str) -> Result<PruneMethod> {
    PruneMethod::parse(name)
}

fn parse_ratio(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("ratio {v} outside [0, 1]"));
    }
    Ok(v)
}

// ─── Entry point ─────────────────────────────────────────────────────────────

fn main() -> ExitCode {
    let cfg = match RunConfig::try_parse() {
        Ok(cfg) => cfg,
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    let threads = cfg.threads;
    let outcome = with_threads(threads, move || run(cfg)).and_then(|r| r);
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cfg: RunConfig) -> Result<()> {
    match cfg.cmd {
        Cmd::GenToy {
            preset,
            out,
            corpus,
            seqs,
            seq_len,
        } => gen_toy(&preset, cfg.seed, &out, corpus.as_deref(), seqs, seq_len),
        Cmd::Inspect { ckpt, preset } => inspect(ckpt.as_deref(), preset),
        Cmd::Calibrate {
            model,
            data,
            out,
            taylor,
        } => calibrate(&model, &data, &out, taylor),
        Cmd::Prune {
            model,
            method,
            out,
            stats,
            ratio,
            factor,
            targets,
            plan,
            report,
        } => prune(
            &model,
            method,
            &out,
            stats.as_deref(),
            ratio,
            factor,
            targets,
            plan,
            report,
        ),
        Cmd::Eval {
            model,
            data,
            report,
            throughput,
            baseline,
            batch,
            seq_len,
            repeats,
        } => eval_cmd(
            &model,
            &data,
            report.as_deref(),
            throughput,
            baseline.as_deref(),
            batch,
            seq_len,
            repeats,
        ),
        Cmd::Sweep {
            model,
            data,
            stats,
            mode,
            ratios,
            sparsities,
            targets,
            csv,
            report,
        } => sweep(
            &model,
            &data,
            &stats,
            mode,
            &ratios,
            &sparsities,
            targets,
            csv.as_deref(),
            report.as_deref(),
        ),
    }
}

// ─── Subcommands ─────────────────────────────────────────────────────────────

fn gen_toy(
    dims: &ModelDims,
    seed: u64,
    out: &Path,
    corpus: Option<&Path>,
    seqs: usize,
    seq_len: usize,
) -> Result<()> {
    let m = build_toy_model(dims, seed)?;
    checkpoint::save(out, dims, &m)?;
    println!(
        "wrote checkpoint {} ({} parameters, seed {seed})",
        out.display(),
        human(m.param_count())
    );
    if let Some(path) = corpus {
        let set = sample_corpus(&m, dims, seed, seqs, seq_len)?;
        set.write_path(path)?;
        println!(
            "wrote corpus {} ({} sequences x {} tokens)",
            path.display(),
            seqs,
            seq_len
        );
    }
    Ok(())
}

fn inspect(ckpt: Option<&Path>, preset: Option<ModelDims>) -> Result<()> {
    let (dims, params) = match (ckpt, preset) {
        (Some(path), None) => {
            let (dims, m) = checkpoint::load(path)?;
            println!("checkpoint {}", path.display());
            (dims, Some(m))
        }
        (None, Some(dims)) => {
            println!("preset configuration (closed-form, nothing materialized)");
            (dims, None)
        }
        _ => {
            return Err(Error::Plan(
                "inspect needs a checkpoint path or --preset, not both or neither".into(),
            ))
        }
    };

    println!(
        "dims: d_model {}  layers {}  vocab {}  conv {}  norm {}{}",
        dims.d_model,
        dims.n_layers,
        dims.vocab_size,
        dims.d_conv,
        dims.norm_len,
        if dims.has_mlp {
            format!("  mlp {}", dims.d_mlp)
        } else {
            String::new()
        }
    );
    println!(
        "heads: {} x head_dim {}  groups {}  state {}  pattern {}",
        dims.n_heads,
        dims.head_dim,
        dims.n_groups,
        dims.d_state,
        dims.head_pattern().name()
    );

    let report = match &params {
        Some(m) => {
            m.validate(&dims)?;
            PruneReport::from_models(m, m, 0)
        }
        None => compression_report(&dims, &dims)?,
    };
    println!(
        "params: total {}  embedding {}  ssm/layer {}{}",
        human(report.total_params_before),
        human(dims.embedding_params()),
        human(dims.ssm_params_per_layer()),
        if dims.has_mlp {
            format!("  mlp/layer {}", human(dims.mlp_params_per_layer()))
        } else {
            String::new()
        }
    );
    let f = report.fractions_before;
    println!(
        "ssm split: in_proj {}  conv {}  out_proj {}  misc {}",
        pct(f.in_proj),
        pct(f.conv),
        pct(f.out_proj),
        pct(f.other)
    );
    if let Some(m) = &params {
        if !m.is_uniform() {
            let heads: Vec<String> = m.blocks.iter().map(|b| b.n_heads.to_string()).collect();
            let groups: Vec<String> = m.blocks.iter().map(|b| b.n_groups.to_string()).collect();
            println!("per-layer heads: {}", heads.join(","));
            println!("per-layer groups: {}", groups.join(","));
        }
        if m.blocks.iter().any(|b| b.outproj_bias.is_some()) {
            println!("out_proj carries compensation biases");
        }
    }
    Ok(())
}

fn calibrate(model: &Path, data: &Path, out: &Path, taylor: bool) -> Result<()> {
    let (dims, m) = checkpoint::load(model)?;
    let set = CalibSet::read_path(data)?;
    set.validate(dims.vocab_size)?;
    let bundle = CalibBundle::collect(&m, &dims, &set, taylor)?;
    bundle.save(out)?;
    println!(
        "collected stats over {} sequences ({} tokens), {} layer keys",
        bundle.stats.sequences,
        bundle.stats.tokens,
        bundle.stats.layers.len()
    );
    println!(
        "wrote calibration bundle {} (taylor: {})",
        out.display(),
        if bundle.taylor.is_some() { "yes" } else { "no" }
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn prune(
    model: &Path,
    method: PruneMethod,
    out: &Path,
    stats: Option<&Path>,
    ratio: f64,
    factor: usize,
    targets: TargetFilter,
    plan_path: Option<PathBuf>,
    report_path: Option<PathBuf>,
) -> Result<()> {
    let (dims, m) = checkpoint::load(model)?;
    let bundle = match stats {
        Some(path) => {
            let b = CalibBundle::load(path)?;
            b.check_model(&dims)?;
            Some(b)
        }
        None => None,
    };
    let need_bundle = |what: &str| -> Result<&CalibBundle> {
        bundle
            .as_ref()
            .ok_or_else(|| Error::Plan(format!("{what} needs --stats <calibration bundle>")))
    };

    let (pruned, pruned_dims, plan, mut report) = match method {
        PruneMethod::Wanda => {
            let b = need_bundle("wanda")?;
            let plan = plan_wanda(ratio, targets)?;
            let (pruned, pd) = apply_plan(&m, &dims, &plan, Some(&b.stats))?;
            let zeroed = zero_count(&pruned) - zero_count(&m);
            let report = PruneReport::from_models(&m, &pruned, zeroed);
            (pruned, pd, plan, report)
        }
        PruneMethod::State => {
            let b = need_bundle("state pruning")?;
            let scores = taylor_state_scores(b.require_taylor()?, &m, &dims)?;
            let plan = plan_state_pruning(&scores, &m, &dims, ratio)?;
            let (pruned, pd) = apply_plan(&m, &dims, &plan, None)?;
            let report = PruneReport::from_models(&m, &pruned, 0);
            (pruned, pd, plan, report)
        }
        PruneMethod::HeadDim => {
            let b = need_bundle("head-dim pruning")?;
            let scores = taylor_head_channel_scores(b.require_taylor()?, &m, &dims)?;
            let plan = plan_headdim_pruning(&scores, &m, &dims, ratio)?;
            let (pruned, pd) = apply_plan(&m, &dims, &plan, None)?;
            let report = PruneReport::from_models(&m, &pruned, 0);
            (pruned, pd, plan, report)
        }
        PruneMethod::Merge => {
            let plan = plan_merge(factor)?;
            let (pruned, pd) = apply_plan(&m, &dims, &plan, None)?;
            let report = PruneReport::from_models(&m, &pruned, 0);
            (pruned, pd, plan, report)
        }
        PruneMethod::Flap => {
            let b = need_bundle("flap")?;
            flap_prune(&m, &dims, &b.stats, ratio)?
        }
    };
    report.clamped_layers = plan.clamped_layers.clone();

    checkpoint::save(out, &pruned_dims, &pruned)?;
    let plan_path = plan_path.unwrap_or_else(|| sibling(out, ".plan.json"));
    let report_path = report_path.unwrap_or_else(|| sibling(out, ".report.json"));
    plan.save(&plan_path)?;
    report.save(&report_path)?;

    match method {
        PruneMethod::Merge => println!(
            "method merge  factor {factor}  heads {} -> {}  groups {} -> {}",
            dims.n_heads, pruned_dims.n_heads, dims.n_groups, pruned_dims.n_groups
        ),
        PruneMethod::Wanda => println!(
            "method wanda  ratio {ratio}  targets {}  zeroed {}",
            targets_label(&targets),
            report.zeroed_weights
        ),
        _ => println!("method {}  ratio {ratio}", method.name()),
    }
    println!(
        "params {} -> {}  ssm compression {}  whole-model sparsity {}",
        human(report.total_params_before),
        human(report.total_params_after),
        pct(report.ssm_compression),
        pct(report.whole_model_sparsity)
    );
    if !report.clamped_layers.is_empty() {
        println!("clamped layers: {:?}", report.clamped_layers);
    }
    println!("wrote checkpoint {}", out.display());
    println!(
        "wrote plan {}  report {}",
        plan_path.display(),
        report_path.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    model: &Path,
    data: &Path,
    report_path: Option<&Path>,
    throughput: bool,
    baseline: Option<&Path>,
    batch: usize,
    seq_len: usize,
    repeats: usize,
) -> Result<()> {
    let (dims, m) = checkpoint::load(model)?;
    let set = CalibSet::read_path(data)?;
    let p = perplexity(&m, &dims, &set)?;
    println!(
        "perplexity {:.4}  (mean nll {:.6} over {} tokens)",
        p.perplexity, p.mean_nll, p.tokens
    );
    let mut report = EvalReport::new(p);

    if throughput {
        let tps = measure_throughput(&m, &dims, batch, seq_len, repeats)?;
        let mut rows = vec![ThroughputRow {
            label: "model".into(),
            tokens_per_second: tps,
            speedup: None,
        }];
        if let Some(base_path) = baseline {
            let (bd, bm) = checkpoint::load(base_path)?;
            let base_tps = measure_throughput(&bm, &bd, batch, seq_len, repeats)?;
            rows[0].speedup = Some(tps / base_tps);
            rows.push(ThroughputRow {
                label: "baseline".into(),
                tokens_per_second: base_tps,
                speedup: None,
            });
        }
        for row in &rows {
            match row.speedup {
                Some(s) => println!(
                    "throughput {}: {:.1} tok/s  ({:.2}x baseline)",
                    row.label, row.tokens_per_second, s
                ),
                None => println!("throughput {}: {:.1} tok/s", row.label, row.tokens_per_second),
            }
        }
        report.throughput = rows;
    }

    if let Some(path) = report_path {
        report.save(path)?;
        println!("wrote report {}", path.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    model: &Path,
    data: &Path,
    stats: &Path,
    mode: SweepMode,
    ratios: &[f64],
    sparsities: &[f64],
    targets: TargetFilter,
    csv_path: Option<&Path>,
    report_path: Option<&Path>,
) -> Result<()> {
    let (dims, m) = checkpoint::load(model)?;
    let set = CalibSet::read_path(data)?;
    let bundle = CalibBundle::load(stats)?;
    bundle.check_model(&dims)?;

    let mut report = EvalReport::new(perplexity(&m, &dims, &set)?);
    let csv = match mode {
        SweepMode::Ratio => {
            let rows = ratio_sweep(&m, &dims, &bundle.stats, &set, ratios, targets)?;
            let csv = sweep_csv(&rows);
            report.ratio_sweep = rows;
            csv
        }
        SweepMode::Component => {
            let rows = component_sweep(&m, &dims, &bundle.stats, &set, sparsities)?;
            let csv = component_csv(&rows);
            report.component_sweep = rows;
            csv
        }
    };

    match csv_path {
        Some(path) => {
            std::fs::write(path, &csv)?;
            println!("wrote csv {}", path.display());
        }
        None => print!("{csv}"),
    }
    if let Some(path) = report_path {
        report.save(path)?;
        println!("wrote report {}", path.display());
    }
    Ok(())
}

// ─── Formatting helpers ──────────────────────────────────────────────────────

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn targets_label(t: &TargetFilter) -> String {
    let mut parts = Vec::new();
    if t.in_proj {
        parts.push("in_proj");
    }
    if t.out_proj {
        parts.push("out_proj");
    }
    if t.mlp {
        parts.push("mlp");
    }
    if t.lm_head {
        parts.push("lm_head");
    }
    if parts.is_empty() {
        "none".into()
    } else {
        parts.join(",")
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn human(n: usize) -> String {
    if n >= 1_000_000_000 {
        format!("{:.2}B", n as f64 / 1e9)
    } else if n >= 1_000_000 {
        format!("{:.1}M", n as f64 / 1e6)
    } else {
        n.to_string()
    }
}
