//! `magnets`: train toy nested-transformer models on a synthetic source,
//! decode token grids under model-size schedules, and account inference cost.
//!
//! Every command resolves one `RunConfig` (defaults, a named preset, or a
//! config file), writes the fully materialized manifest next to its outputs,
//! and exits 0 on success, 2 on configuration errors, 3 on numeric failures.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use magnets::decoder::{decode, unmask_density, DecodeTrace, TokenGrid};
use magnets::flops::{gain_report, FlopsQuery, GainReport, ModelDims};
use magnets::io::{
    grids_csv, load_checkpoint, nll_table, save_checkpoint, trace_text, Checkpoint,
    OptimizerState, RunConfig, TrainMeta, PRESET_NAMES,
};
use magnets::nested::{NestedConfig, NestedWeights};
use magnets::numerics::Rng;
use magnets::schedules::{DecodeSchedule, ScheduleEntry};
use magnets::trainer::{eval_nll, run_training, LossMode, SyntheticSource};
use magnets::{Error, Result};

#[derive(Parser)]
#[command(name = "magnets", version, about = "Nested-model masked decoding toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file (sectioned key = value text; `base = <preset>` supported).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset; see `flops` output for the benchmark rows they mirror.
    #[arg(long, value_parser = preset_name)]
    preset: Option<String>,
    /// Output directory (overrides the config's `[output] dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn preset_name(s: &str) -> std::result::Result<String, String> {
    if PRESET_NAMES.contains(&s) {
        Ok(s.to_string())
    } else {
        Err(format!("unknown preset (known: {})", PRESET_NAMES.join(", ")))
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the toy nested model on the synthetic Markov source.
    Train {
        #[command(flatten)]
        common: Common,
        /// Override the configured step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Override the loss mode: gt-only, distill-only, or gt-to-distill.
        #[arg(long)]
        loss_mode: Option<String>,
    },
    /// Decode token grids and emit traces and unmasking-density maps.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to decode with (omit for freshly initialized weights).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Override the class to condition on.
        #[arg(long)]
        class: Option<u32>,
        /// Override how many grids to decode.
        #[arg(long)]
        count: Option<usize>,
        /// Override the base decode seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Reproduce the built-in cost tables and price the configured run.
    Flops {
        #[command(flatten)]
        common: Common,
    },
    /// Enumerate every model-size schedule at a step budget and price each.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Total decode iterations to split across model sizes.
        #[arg(long)]
        iters: Option<usize>,
        /// Score each schedule by decoding with this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Grids decoded per schedule when scoring quality.
        #[arg(long, default_value_t = 2)]
        samples: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train { common, steps, loss_mode } => cmd_train(&common, steps, loss_mode.as_deref()),
        Cmd::Generate { common, checkpoint, class, count, seed } => {
            cmd_generate(&common, checkpoint.as_deref(), class, count, seed)
        }
        Cmd::Flops { common } => cmd_flops(&common),
        Cmd::Sweep { common, iters, checkpoint, samples } => {
            cmd_sweep(&common, iters, checkpoint.as_deref(), samples)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

// =============================================================================
// Config resolution and output plumbing
// =============================================================================

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut c = match (&common.preset, &common.config) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "pass --preset or --config, not both (a file can start from a preset \
                 with `base = <name>`)"
                    .into(),
            ))
        }
        (Some(p), None) => RunConfig::preset(p)?,
        (None, Some(path)) => RunConfig::parse(&fs::read_to_string(path)?)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(dir) = &common.out {
        c.out_dir = dir.display().to_string();
    }
    Ok(c)
}

/// Create the output directory and drop the resolved manifest into it.
fn prepare_out(c: &RunConfig) -> Result<PathBuf> {
    c.validate()?;
    let dir = PathBuf::from(&c.out_dir);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("manifest.cfg"), c.emit())?;
    Ok(dir)
}

fn load_weights_for(
    config: &NestedConfig,
    checkpoint: Option<&Path>,
    fallback_seed: u64,
) -> Result<NestedWeights<f32>> {
    match checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            ckpt.expect_config(config)?;
            Ok(ckpt.weights)
        }
        None => {
            eprintln!("note: no checkpoint given; decoding with untrained weights");
            let mut rng = Rng::new(fallback_seed).substream(0);
            Ok(NestedWeights::init(config, &mut rng))
        }
    }
}

// =============================================================================
// train
// =============================================================================

fn cmd_train(common: &Common, steps: Option<usize>, loss_mode: Option<&str>) -> Result<()> {
    let mut c = resolve(common)?;
    if let Some(s) = steps {
        c.total_steps = s;
    }
    if let Some(m) = loss_mode {
        c.loss_mode = LossMode::parse(m)?;
    }
    let dir = prepare_out(&c)?;

    let config = c.nested_config()?;
    let train = c.train_config();
    let source = SyntheticSource::new(c.num_classes, c.vocab_size, c.source_seed)?;
    let oracle = source.conditional_entropy(c.max_positions)?;
    println!(
        "training {} steps, batch {}, loss mode {} (source entropy {oracle:.4})",
        train.total_steps,
        train.batch_size,
        train.loss_mode.name()
    );

    let mut log = String::new();
    let mut eval_err: Option<Error> = None;
    let (weights, opt, _) = run_training::<f32>(&config, &train, &source, |record, weights| {
        log.push_str(&record.log_line());
        log.push('\n');
        let due = (record.step + 1) % c.eval_every == 0 || record.step + 1 == train.total_steps;
        if due && eval_err.is_none() {
            for &factor in &c.factors {
                match eval_nll(&config, weights, factor, &source, c.eval_samples, c.eval_seed) {
                    Ok(nll) => {
                        let line = format!(
                            "eval step {:>6} p{factor} nll {nll:.6} (oracle {oracle:.6})",
                            record.step + 1
                        );
                        println!("{line}");
                        log.push_str(&line);
                        log.push('\n');
                    }
                    Err(e) => eval_err = Some(e),
                }
            }
        }
    })?;
    if let Some(e) = eval_err {
        return Err(e);
    }

    fs::write(dir.join("train_log.txt"), &log)?;
    let mut final_rows = Vec::new();
    for &factor in &c.factors {
        final_rows.push((factor, eval_nll(&config, &weights, factor, &source, c.eval_samples, c.eval_seed)?));
    }
    let table = nll_table(&final_rows, Some(oracle));
    print!("{table}");
    fs::write(dir.join("nll.txt"), &table)?;

    let ckpt = Checkpoint {
        config,
        weights,
        meta: TrainMeta { step: train.total_steps as u64, total_steps: train.total_steps as u64 },
        optimizer: Some(OptimizerState::capture(&opt)),
    };
    let path = dir.join("model.ckpt");
    save_checkpoint(&ckpt, &path)?;
    println!("checkpoint written to {}", path.display());
    Ok(())
}

// =============================================================================
// generate
// =============================================================================

fn cmd_generate(
    common: &Common,
    checkpoint: Option<&Path>,
    class: Option<u32>,
    count: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let mut c = resolve(common)?;
    if let Some(x) = class {
        c.class_id = x;
    }
    if let Some(x) = count {
        c.count = x;
    }
    if let Some(x) = seed {
        c.seed = x;
    }
    let dir = prepare_out(&c)?;

    let config = c.nested_config()?;
    let weights = load_weights_for(&config, checkpoint, c.train_seed)?;
    let schedule = c.decode_schedule()?;
    let geometry = c.geometry()?;
    let source = SyntheticSource::new(c.num_classes, c.vocab_size, c.source_seed)?;

    let mut grids: Vec<(u32, TokenGrid)> = Vec::with_capacity(c.count);
    let mut traces: Vec<DecodeTrace> = Vec::with_capacity(c.count);
    let mut trace_report = String::new();
    for i in 0..c.count {
        let mut scfg = c.sampler_config();
        scfg.seed = c.seed.wrapping_add(i as u64);
        if c.cond_tokens > 0 {
            let mut cond_rng = Rng::new(c.seed).substream(i as u64);
            let prefix = source.sample_grid(c.class_id, c.cond_tokens, &mut cond_rng)?;
            scfg.conditioning = prefix.into_iter().enumerate().collect();
        }
        let (grid, trace) = decode(&weights, &config, &schedule, geometry, Some(c.class_id), &scfg)?;
        let _ = writeln!(trace_report, "== sample {i} (seed {}) ==", scfg.seed);
        trace_report.push_str(&trace_text(&trace));
        trace_report.push('\n');
        grids.push((c.class_id, grid));
        traces.push(trace);
    }

    fs::write(dir.join("grids.csv"), grids_csv(&grids)?)?;
    fs::write(dir.join("traces.txt"), &trace_report)?;
    let density = unmask_density(&traces)?;
    fs::write(dir.join("density.csv"), density.to_csv())?;
    for k in 0..density.k_total() {
        fs::write(dir.join(format!("density_k{k:02}.pgm")), density.to_pgm(k))?;
    }

    println!(
        "decoded {} grid(s) of {} tokens over {} iterations; outputs in {}",
        c.count,
        geometry.num_tokens(),
        schedule.k_total(),
        dir.display()
    );
    print!("{trace_report}");
    Ok(())
}

// =============================================================================
// flops
// =============================================================================

fn suite(names_baseline: (&[&str], usize)) -> Result<GainReport> {
    let (names, baseline) = names_baseline;
    let mut queries: Vec<(String, FlopsQuery)> = Vec::new();
    for name in names {
        queries.push((name.to_string(), RunConfig::preset(name)?.flops_query()?));
    }
    let dims = ModelDims::L;
    let note = format!(
        "L ({} layers, hidden {}, mlp {}, {} heads), {:.0}M core params",
        dims.num_layers,
        dims.hidden,
        dims.mlp_dim,
        dims.num_heads,
        dims.core_params() as f64 / 1e6
    );
    gain_report(&queries, baseline, &dims, &note)
}

fn cmd_flops(common: &Common) -> Result<()> {
    let c = resolve(common)?;
    let dir = prepare_out(&c)?;

    let sections: [(&str, (&[&str], usize)); 3] = [
        (
            "class-conditional image generation, 257 tokens",
            (
                &[
                    "imagenet-maskgit-8",
                    "imagenet-maskgitpp-12-g4",
                    "imagenet-maskgitpp-16-g6",
                    "imagenet-magnets-12-g4",
                    "imagenet-magnets-16-g6",
                ][..],
                1,
            ),
        ),
        (
            "video generation, 1025 tokens",
            (&["ucf101-magvit", "ucf101-magnets"][..], 0),
        ),
        (
            "frame prediction, 1025 tokens / 512 conditioned",
            (&["k600-magvit-g2", "k600-magnets", "k600-magnets-g2"][..], 0),
        ),
    ];

    let mut text = String::new();
    let mut csv = String::new();
    for (title, spec) in sections {
        let report = suite(spec)?;
        let _ = writeln!(text, "## {title}");
        text.push_str(&report.render_text());
        text.push('\n');
        let _ = writeln!(csv, "# {title}");
        csv.push_str(&report.render_csv());
    }

    let query = c.flops_query()?;
    let dims = c.model_dims()?;
    let own = gain_report(&[("configured run".to_string(), query)], 0, &dims, &c.dims)?;
    let _ = writeln!(text, "## this configuration");
    text.push_str(&own.render_text());
    let _ = writeln!(csv, "# this configuration");
    csv.push_str(&own.render_csv());

    print!("{text}");
    fs::write(dir.join("flops.txt"), &text)?;
    fs::write(dir.join("flops.csv"), &csv)?;
    Ok(())
}

// =============================================================================
// sweep
// =============================================================================

struct SweepRow {
    direction: &'static str,
    literal: String,
    gflops: f64,
    gain: f64,
    nll: Option<f64>,
}

/// Mean per-token negative log-likelihood of a finished grid under the
/// source's exact law (uniform first token, then the class's Markov row).
fn grid_nll(source: &SyntheticSource, class: u32, grid: &TokenGrid) -> Result<f64> {
    let tokens = grid.tokens();
    let mut total = (source.vocab() as f64).ln();
    for w in tokens.windows(2) {
        let p = source.transition_row(class, w[0])?[w[1] as usize];
        total -= p.ln();
    }
    Ok(total / tokens.len() as f64)
}

fn cmd_sweep(
    common: &Common,
    iters: Option<usize>,
    checkpoint: Option<&Path>,
    samples: usize,
) -> Result<()> {
    let c = resolve(common)?;
    let dir = prepare_out(&c)?;
    let k_total = match iters {
        Some(k) => k,
        None => c.decode_schedule()?.k_total(),
    };
    if k_total == 0 {
        return Err(Error::Config("sweep needs at least one iteration".into()));
    }

    let config = c.nested_config()?;
    let source = SyntheticSource::new(c.num_classes, c.vocab_size, c.source_seed)?;
    let weights = match checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            ckpt.expect_config(&config)?;
            Some(ckpt.weights)
        }
        None => None,
    };
    let geometry = c.geometry()?;
    let guided_last = if c.guidance_scale != 0.0 { c.guidance_last } else { 0 };

    let baseline_query = FlopsQuery::baseline(k_total, c.total_tokens)
        .guided_last(guided_last)
        .conditioned(c.flops_cond_tokens);
    let dims = c.model_dims()?;
    let baseline_cost = magnets::flops::get_total_flops(&baseline_query, &dims)?;

    // Every split of the step budget across the four model sizes, walked
    // small-to-large (scale-up) and large-to-small (scale-down).
    let mut rows: Vec<SweepRow> = Vec::new();
    let mut partitions: Vec<[usize; 4]> = Vec::new();
    for k1 in 0..=k_total {
        for k2 in 0..=k_total - k1 {
            for k3 in 0..=k_total - k1 - k2 {
                partitions.push([k1, k2, k3, k_total - k1 - k2 - k3]);
            }
        }
    }
    for (direction, factors) in [("up", [8usize, 4, 2, 1]), ("down", [1usize, 2, 4, 8])] {
        for part in &partitions {
            let entries: Vec<ScheduleEntry> = factors
                .iter()
                .zip(part)
                .filter(|(_, &iterations)| iterations > 0)
                .map(|(&factor, &iterations)| ScheduleEntry { factor, iterations })
                .collect();
            let schedule = DecodeSchedule::new(entries, k_total)?;
            let mut q = FlopsQuery::baseline(k_total, c.total_tokens)
                .with_schedule(&schedule)
                .guided_last(guided_last)
                .conditioned(c.flops_cond_tokens);
            // The decoder drops cached rows whenever the factor switches, so
            // cost refreshes at switch points; the config's fixed refresh
            // list would not transfer across arbitrary schedules.
            if c.cache != magnets::decoder::CachePolicy::None {
                q = q.cached(schedule.switch_points());
            }
            let gflops = magnets::flops::get_total_flops(&q, &dims)?;
            let nll = match &weights {
                Some(w) => {
                    let mut sum = 0.0;
                    for i in 0..samples.max(1) {
                        let mut scfg = c.sampler_config();
                        scfg.refresh_at = None;
                        scfg.seed = c.seed.wrapping_add(i as u64);
                        let (grid, _) =
                            decode(w, &config, &schedule, geometry, Some(c.class_id), &scfg)?;
                        sum += grid_nll(&source, c.class_id, &grid)?;
                    }
                    Some(sum / samples.max(1) as f64)
                }
                None => None,
            };
            rows.push(SweepRow {
                direction,
                literal: schedule.to_string(),
                gflops,
                gain: baseline_cost / gflops,
                nll,
            });
        }
    }
    rows.sort_by(|a, b| {
        a.direction
            .cmp(b.direction)
            .then(a.gflops.total_cmp(&b.gflops))
            .then(a.literal.cmp(&b.literal))
    });

    let mut csv = String::from("direction,schedule,gflops,gain,nll_per_token\n");
    for r in &rows {
        let quality = match r.nll {
            Some(v) => format!("{v:.6}"),
            None => "-".into(),
        };
        let _ = writeln!(csv, "{},{},{:.6},{:.6},{}", r.direction, r.literal, r.gflops, r.gain, quality);
    }
    fs::write(dir.join("sweep.csv"), &csv)?;

    let per_direction = partitions.len();
    println!(
        "{per_direction} schedules per direction at K={k_total} ({} rows total); \
         full table in {}",
        rows.len(),
        dir.join("sweep.csv").display()
    );
    for direction in ["up", "down"] {
        println!("cheapest {direction}-schedules:");
        for r in rows.iter().filter(|r| r.direction == direction).take(5) {
            let quality = match r.nll {
                Some(v) => format!("  nll/token {v:.4}"),
                None => String::new(),
            };
            println!("  {:<24} {:>10.2} gflops  {:>5.2}x{quality}", r.literal, r.gflops, r.gain);
        }
    }
    Ok(())
}
