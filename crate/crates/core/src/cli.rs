//! `kvtriage` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 a checked
//! mathematical property failed.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eviction::{
    evict_layer, mean_window_attention, Allocation, Budget, EvictionConfig, HeadSnapshot, LogitScale,
    Selector, DEFAULT_POOL_KERNEL, DEFAULT_WINDOW,
};
use crate::io::{self, MaskRow};
use crate::perturbation::{bound_report, masked_attention, masked_softmax, Metric, SelectionMask};
use crate::selection::{
    attention_only_completion, brute_force_min_perturbation, brute_force_min_theta_hat,
    select_attention_only, select_perturbation_constrained, SelectionConfig, DEFAULT_ALPHA,
    DEFAULT_EPSILON, ORACLE_MAX_ENTRIES,
};
use crate::synthetic::{generate_head_at, generate_probes, SyntheticSpec};
use crate::tensor::{softmax_scaled, Matrix};
use crate::validation::{reduction_sweep, validate_assumption, SweepHead};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_VIOLATION: i32 = 3;

pub const THREADS_ENV: &str = "KVTRIAGE_THREADS";

const DEFAULT_BUDGETS: &str = "0.025,0.05,0.1,0.2,0.4";

#[derive(Debug, Parser)]
#[command(name = "kvtriage", version, about = "Perturbation-constrained KV-cache selection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a deterministic synthetic HeadDump corpus.
    Gen(GenArgs),
    /// Single-query selection on the last query row of every head.
    Select(SelectArgs),
    /// Observation-window eviction of every layer.
    Evict(EvictArgs),
    /// Check ℒ ≤ θ, the bound chain and the mask rewrite on every query row.
    BoundCheck(BoundCheckArgs),
    /// Stage-1 attention mass per head.
    AssumptionCheck(AssumptionArgs),
    /// Perturbation of both selectors across budgets on held-out queries.
    ReductionReport(ReductionArgs),
    /// Brute-force comparison on small heads.
    Oracle(OracleArgs),
}

#[derive(Debug, Args, Serialize)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    layers: u32,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    #[arg(long, default_value_t = 64)]
    model_dim: usize,
    /// Observation window rows stored per head.
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    /// Extra held-out query rows appended after the window rows.
    #[arg(long, default_value_t = 3)]
    probe_queries: usize,
    #[arg(long, default_value_t = 1.0)]
    zipf: f64,
    #[arg(long, default_value_t = 1.0)]
    value_scale: f64,
    #[arg(long, default_value_t = 0.1)]
    logit_noise: f64,
    #[arg(long, default_value_t = 1.0)]
    norm_spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize, Clone, Copy)]
struct SelectionFlags {
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long, value_enum, default_value_t = Metric::L1)]
    metric: Metric,
    #[arg(long, value_enum, default_value_t = LogitScale::SqrtHeadDim)]
    logit_scale: LogitScale,
}

#[derive(Debug, Args, Serialize, Clone, Copy)]
struct WindowFlags {
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = DEFAULT_POOL_KERNEL)]
    kernel: usize,
    #[arg(long, value_enum, default_value_t = Allocation::Flat)]
    allocation: Allocation,
    /// Minimum per-head budget under adaptive allocation [default: window].
    #[arg(long)]
    floor: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct SelectArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fraction (0.2, 20%) or entry count (48).
    #[arg(long, default_value = "0.2")]
    budget: Budget,
    #[arg(long, value_enum, default_value_t = Selector::PerturbationConstrained)]
    selector: Selector,
    #[command(flatten)]
    #[serde(flatten)]
    selection: SelectionFlags,
}

#[derive(Debug, Args, Serialize)]
struct EvictArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-head fraction (0.2, 20%) or entry count (48).
    #[arg(long, default_value = "0.2")]
    budget: Budget,
    #[arg(long, value_enum, default_value_t = Selector::PerturbationConstrained)]
    selector: Selector,
    #[command(flatten)]
    #[serde(flatten)]
    window: WindowFlags,
    #[command(flatten)]
    #[serde(flatten)]
    selection: SelectionFlags,
}

#[derive(Debug, Args, Serialize)]
struct BoundCheckArgs {
    #[arg(long)]
    input: PathBuf,
    /// Budget fractions to check.
    #[arg(long, value_delimiter = ',', default_value = DEFAULT_BUDGETS)]
    budgets: Vec<f64>,
    /// Optional CSV of per-check results.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    selection: SelectionFlags,
}

#[derive(Debug, Args, Serialize)]
struct AssumptionArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    budget: f64,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, value_enum, default_value_t = LogitScale::SqrtHeadDim)]
    logit_scale: LogitScale,
    /// Exit 3 when the satisfied fraction falls below this.
    #[arg(long)]
    min_satisfied: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
struct ReductionArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = DEFAULT_BUDGETS)]
    budgets: Vec<f64>,
    /// Trailing query rows held out of the window and used as probes.
    #[arg(long, default_value_t = 3)]
    probe_steps: usize,
    #[command(flatten)]
    #[serde(flatten)]
    window: WindowFlags,
    #[command(flatten)]
    #[serde(flatten)]
    selection: SelectionFlags,
}

#[derive(Debug, Args, Serialize)]
struct OracleArgs {
    #[arg(long)]
    input: PathBuf,
    /// Entries kept per head.
    #[arg(long, default_value_t = 2)]
    budget: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    selection: SelectionFlags,
}

/// Flattens a serializable argument struct into `key=value` pairs.
fn resolved_config<T: Serialize>(command: &str, args: &T) -> Vec<(String, String)> {
    let mut out = vec![("command".to_string(), command.to_string())];
    if let Ok(serde_json::Value::Object(map)) = serde_json::to_value(args) {
        for (k, v) in map {
            let v = match v {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            out.push((k, v));
        }
    }
    out
}

fn log_config(config: &[(String, String)]) {
    for (k, v) in config {
        eprintln!("# {k}={v}");
    }
}

fn configure_threads() {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
}

/// Outcome of a subcommand that ran to completion.
enum Outcome {
    Ok,
    Violations(usize),
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::InvalidKernel(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    configure_threads();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Select(a) => cmd_select(&a),
        Command::Evict(a) => cmd_evict(&a),
        Command::BoundCheck(a) => cmd_bound_check(&a),
        Command::AssumptionCheck(a) => cmd_assumption(&a),
        Command::ReductionReport(a) => cmd_reduction(&a),
        Command::Oracle(a) => cmd_oracle(&a),
    };
    match result {
        Ok(Outcome::Ok) => EXIT_OK,
        Ok(Outcome::Violations(n)) => {
            eprintln!("error: {n} property violation(s)");
            EXIT_VIOLATION
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn cmd_gen(args: &GenArgs) -> Result<Outcome> {
    let config = resolved_config("gen", args);
    log_config(&config);
    let spec = SyntheticSpec {
        n: args.n,
        head_dim: args.head_dim,
        model_dim: args.model_dim,
        n_heads: args.heads,
        window: args.window,
        zipf_exponent: args.zipf,
        value_scale: args.value_scale,
        logit_noise: args.logit_noise,
        norm_spread: args.norm_spread,
        seed: args.seed,
    };
    spec.validate()?;
    if args.window + args.probe_queries > args.n {
        return Err(Error::InvalidArgument(format!(
            "window {} plus {} probe rows exceed n = {}",
            args.window, args.probe_queries, args.n
        )));
    }
    let ids: Vec<(u32, u32)> = (0..args.layers)
        .flat_map(|l| (0..args.heads as u32).map(move |h| (l, h)))
        .collect();
    ids.par_iter()
        .map(|&(l, h)| {
            let mut snap = generate_head_at(&spec, l, h)?;
            if args.probe_queries > 0 {
                let probes = generate_probes(&spec, l, h, args.probe_queries)?;
                let mut data = snap.q_window.data().to_vec();
                data.extend_from_slice(probes.data());
                snap.q_window = Matrix::new(args.window + args.probe_queries, args.head_dim, data)?;
            }
            io::write_head_dump(&snap, &io::dump_path(&args.out, l, h))
        })
        .collect::<Result<()>>()?;
    // the manifest describes the corpus, not where it was written
    let manifest: Vec<(String, String)> = config.iter().filter(|(k, _)| k != "out").cloned().collect();
    io::write_summary(&args.out.join("corpus.json"), &config_map(&manifest))?;
    eprintln!("wrote {} heads to {}", ids.len(), args.out.display());
    Ok(Outcome::Ok)
}

fn config_map(config: &[(String, String)]) -> serde_json::Map<String, serde_json::Value> {
    config
        .iter()
        .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
        .collect()
}

fn last_query_attention(snap: &HeadSnapshot, scale: LogitScale) -> Result<Vec<f64>> {
    let last = snap
        .q_window
        .rows()
        .checked_sub(1)
        .ok_or_else(|| Error::Shape("head has no query rows".into()))?;
    query_attention(snap, last, scale)
}

fn query_attention(snap: &HeadSnapshot, row: usize, scale: LogitScale) -> Result<Vec<f64>> {
    let logits = snap.keys.row_dots(snap.q_window.row(row), 1.0)?;
    softmax_scaled(&logits, scale.divisor(snap.head_dim()))
}

fn selection_config(flags: &SelectionFlags, budget: usize) -> SelectionConfig {
    SelectionConfig::new(budget)
        .with_alpha(flags.alpha)
        .with_epsilon(flags.epsilon)
        .with_metric(flags.metric)
}

fn mask_row(snap: &HeadSnapshot, mask: &SelectionMask, stages: Option<(&SelectionMask, &SelectionMask)>) -> MaskRow {
    MaskRow {
        layer: snap.layer,
        head: snap.head,
        entries: snap.entries(),
        budget: mask.budget(),
        stage1: stages.map_or_else(String::new, |(s1, _)| io::format_indices(&s1.kept_indices())),
        stage2: stages.map_or_else(String::new, |(_, s2)| io::format_indices(&s2.kept_indices())),
        kept: io::format_indices(&mask.kept_indices()),
    }
}

fn cmd_select(args: &SelectArgs) -> Result<Outcome> {
    let config = resolved_config("select", args);
    log_config(&config);
    let heads = io::read_corpus(&args.input)?;
    let rows = heads
        .par_iter()
        .map(|snap| {
            let budget = args.budget.resolve(snap.entries())?;
            let a = last_query_attention(snap, args.selection.logit_scale)?;
            let (mask, row) = match args.selector {
                Selector::AttentionOnly => {
                    let m = select_attention_only(&a, budget)?;
                    let row = mask_row(snap, &m, None);
                    (m, row)
                }
                Selector::PerturbationConstrained => {
                    let norms = args.selection.metric.row_norms(&snap.projected_values()?);
                    let s = select_perturbation_constrained(&a, &norms, &selection_config(&args.selection, budget))?;
                    let row = mask_row(snap, &s.combined, Some((&s.stage1, &s.stage2)));
                    (s.combined, row)
                }
            };
            let mut compacted = snap.compact(&mask)?;
            let rows = compacted.q_window.rows();
            compacted.q_window = compacted.q_window.row_range(rows - 1, rows);
            io::write_head_dump(&compacted, &io::dump_path(&args.out, snap.layer, snap.head))?;
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    io::write_mask_report(&args.out.join("masks.csv"), &rows, &config)?;
    eprintln!("selected {} heads into {}", rows.len(), args.out.display());
    Ok(Outcome::Ok)
}

fn eviction_config(budget: Budget, selector: Selector, w: &WindowFlags, s: &SelectionFlags) -> EvictionConfig {
    EvictionConfig {
        budget,
        window: w.window,
        pool_kernel: w.kernel,
        allocation: w.allocation,
        selector,
        alpha: s.alpha,
        epsilon: s.epsilon,
        metric: s.metric,
        logit_scale: s.logit_scale,
        floor: w.floor,
    }
}

fn cmd_evict(args: &EvictArgs) -> Result<Outcome> {
    let config = resolved_config("evict", args);
    log_config(&config);
    let cfg = eviction_config(args.budget, args.selector, &args.window, &args.selection);
    cfg.validate()?;
    let heads = io::read_corpus(&args.input)?;
    let mut rows = Vec::with_capacity(heads.len());
    let mut violations = 0;
    for layer in io::group_by_layer(&heads) {
        let result = evict_layer(layer, &cfg)?;
        for (snap, ev) in layer.iter().zip(&result.heads) {
            let mask = ev.mask();
            let window_kept = (snap.entries() - cfg.window..snap.entries()).all(|i| mask.is_kept(i));
            if mask.budget() != ev.budget || !window_kept {
                violations += 1;
            }
            let stages = ev
                .selection
                .prefix_stages
                .as_ref()
                .map(|s| (&s.stage1, &s.stage2));
            rows.push(mask_row(snap, mask, stages));
            io::write_head_dump(&ev.compacted, &io::dump_path(&args.out, snap.layer, snap.head))?;
        }
        if result.allocation.per_head.iter().sum::<usize>() != result.allocation.total {
            violations += 1;
        }
    }
    io::write_mask_report(&args.out.join("masks.csv"), &rows, &config)?;
    eprintln!("evicted {} heads into {}", rows.len(), args.out.display());
    Ok(if violations == 0 {
        Outcome::Ok
    } else {
        Outcome::Violations(violations)
    })
}

#[derive(Debug, Serialize)]
struct BoundCheckRow {
    layer: u32,
    head: u32,
    query: usize,
    budget: usize,
    selector: &'static str,
    actual_l: f64,
    theta: f64,
    theta_hat: f64,
    theta_relax: f64,
    sigma: f64,
    rewrite_max_diff: f64,
    ok: bool,
}

fn check_head(snap: &HeadSnapshot, args: &BoundCheckArgs) -> Result<Vec<BoundCheckRow>> {
    let flags = &args.selection;
    let projected = snap.projected_values()?;
    let norms = flags.metric.row_norms(&projected);
    let divisor = flags.logit_scale.divisor(snap.head_dim());
    let mut rows = Vec::new();
    for q in 0..snap.q_window.rows() {
        let logits = snap.keys.row_dots(snap.q_window.row(q), 1.0)?;
        let a = softmax_scaled(&logits, divisor)?;
        for &fraction in &args.budgets {
            let budget = Budget::Fraction(fraction).resolve(snap.entries())?;
            let ours = select_perturbation_constrained(&a, &norms, &selection_config(flags, budget))?;
            let completion = attention_only_completion(&a, &ours.stage1, ours.stage2.budget())?;
            let baseline = ours.stage1.union(&completion)?;
            for (selector, mask, stage2) in [
                ("perturbation_constrained", &ours.combined, &ours.stage2),
                ("attention_only", &baseline, &completion),
            ] {
                let report = match bound_report(&a, &projected, &norms, mask, Some((&ours.stage1, stage2)), flags.metric) {
                    Ok(r) => r,
                    // vanishing kept mass in f64: nothing to check for this mask
                    Err(Error::DegenerateMask) => continue,
                    Err(e) => return Err(e),
                };
                let direct = masked_softmax(&logits, mask, divisor)?;
                let rewrite = masked_attention(&a, mask)?;
                let diff = direct
                    .iter()
                    .zip(&rewrite)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                rows.push(BoundCheckRow {
                    layer: snap.layer,
                    head: snap.head,
                    query: q,
                    budget,
                    selector,
                    actual_l: report.actual_l,
                    theta: report.theta,
                    theta_hat: report.theta_hat.unwrap_or(f64::NAN),
                    theta_relax: report.theta_relax.unwrap_or(f64::NAN),
                    sigma: report.sigma,
                    rewrite_max_diff: diff,
                    ok: report.bound_holds() && report.chain_holds() && diff < 1e-5,
                });
            }
        }
    }
    Ok(rows)
}

fn cmd_bound_check(args: &BoundCheckArgs) -> Result<Outcome> {
    let config = resolved_config("bound-check", args);
    log_config(&config);
    let heads = io::read_corpus(&args.input)?;
    let rows: Vec<BoundCheckRow> = heads
        .par_iter()
        .map(|h| check_head(h, args))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let failures = rows.iter().filter(|r| !r.ok).count();
    if let Some(out) = &args.out {
        io::write_csv(out, &rows, &config)?;
    }
    println!("bound-check: {} checks, {} violations", rows.len(), failures);
    Ok(if failures == 0 {
        Outcome::Ok
    } else {
        Outcome::Violations(failures)
    })
}

fn cmd_assumption(args: &AssumptionArgs) -> Result<Outcome> {
    let config = resolved_config("assumption-check", args);
    log_config(&config);
    let heads = io::read_corpus(&args.input)?;
    let attention = heads
        .par_iter()
        .map(|h| mean_window_attention(h, args.window, args.logit_scale))
        .collect::<Result<Vec<_>>>()?;
    let report = validate_assumption(&attention, args.budget, args.alpha)?;
    let ids: Vec<(u32, u32)> = heads.iter().map(|h| (h.layer, h.head)).collect();
    if let Some(out) = &args.out {
        io::write_assumption_report(&out.join("assumption.csv"), &report, &ids, &config)?;
        io::write_summary(
            &out.join("assumption_summary.json"),
            &serde_json::json!({
                "config": config_map(&config),
                "heads": report.sigma.len(),
                "fraction_satisfied": report.fraction_satisfied,
                "min_sigma": report.sigma.iter().copied().fold(f64::INFINITY, f64::min),
            }),
        )?;
    }
    println!(
        "assumption-check: {} heads, fraction with sigma > 0.5 = {:.4}",
        report.sigma.len(),
        report.fraction_satisfied
    );
    match args.min_satisfied {
        Some(min) if report.fraction_satisfied < min => Ok(Outcome::Violations(1)),
        _ => Ok(Outcome::Ok),
    }
}

fn cmd_reduction(args: &ReductionArgs) -> Result<Outcome> {
    let config = resolved_config("reduction-report", args);
    log_config(&config);
    let cfg = eviction_config(Budget::Fraction(1.0), Selector::PerturbationConstrained, &args.window, &args.selection);
    cfg.validate()?;
    let heads = io::read_corpus(&args.input)?
        .into_iter()
        .map(|h| SweepHead::hold_out(h, args.probe_steps))
        .collect::<Result<Vec<_>>>()?;
    let report = reduction_sweep(&heads, &args.budgets, &cfg, args.probe_steps)?;
    io::write_perturbation_report(&args.out.join("reduction.csv"), &report, &config)?;
    let by_budget = report.by_budget();
    io::write_summary(
        &args.out.join("reduction_summary.json"),
        &serde_json::json!({
            "config": config_map(&config),
            "by_budget": by_budget,
            "by_layer": report.by_layer(),
            "bound_violations": report.bound_violations().len(),
        }),
    )?;
    for b in &by_budget {
        println!(
            "budget {:>6}: mean L attention_only {:.6}, perturbation_constrained {:.6}, heads improved {:.1}%",
            b.budget_fraction,
            b.mean_l_baseline,
            b.mean_l_ours,
            100.0 * b.head_improved_fraction
        );
    }
    let violations = report.bound_violations().len();
    Ok(if violations == 0 {
        Outcome::Ok
    } else {
        Outcome::Violations(violations)
    })
}

#[derive(Debug, Serialize)]
struct OracleRow {
    layer: u32,
    head: u32,
    entries: usize,
    budget: usize,
    oracle_kept: String,
    oracle_l: f64,
    ours_kept: String,
    ours_l: f64,
    baseline_kept: String,
    baseline_l: f64,
    ours_matches_oracle: bool,
    greedy_theta_hat_exact: bool,
}

fn oracle_head(snap: &HeadSnapshot, args: &OracleArgs) -> Result<Option<OracleRow>> {
    let n = snap.entries();
    if n > ORACLE_MAX_ENTRIES {
        eprintln!(
            "skipping layer {} head {}: {n} entries exceed oracle limit {ORACLE_MAX_ENTRIES}",
            snap.layer, snap.head
        );
        return Ok(None);
    }
    let flags = &args.selection;
    let a = last_query_attention(snap, flags.logit_scale)?;
    let projected = snap.projected_values()?;
    let norms = flags.metric.row_norms(&projected);
    let (oracle, oracle_l) = brute_force_min_perturbation(&a, &projected, args.budget, flags.metric)?;
    let ours = select_perturbation_constrained(&a, &norms, &selection_config(flags, args.budget))?;
    let ours_l = crate::perturbation::output_perturbation(&a, &ours.combined, &projected, flags.metric)?;
    let baseline = select_attention_only(&a, args.budget)?;
    let baseline_l = crate::perturbation::output_perturbation(&a, &baseline, &projected, flags.metric)?;

    let exact = selection_config(flags, args.budget).with_epsilon(0.0);
    let greedy = select_perturbation_constrained(&a, &norms, &exact)?;
    let greedy_hat = crate::perturbation::theta_hat_bound(&a, &greedy.stage1, &greedy.stage2, &norms)?;
    let (_, best_hat) = brute_force_min_theta_hat(&a, &norms, &greedy.stage1, greedy.stage2.budget())?;
    let greedy_exact = !greedy_hat.assumption_holds || (greedy_hat.theta_hat - best_hat).abs() < 1e-9;

    Ok(Some(OracleRow {
        layer: snap.layer,
        head: snap.head,
        entries: n,
        budget: args.budget,
        oracle_kept: io::format_indices(&oracle.kept_indices()),
        oracle_l,
        ours_kept: io::format_indices(&ours.combined.kept_indices()),
        ours_l,
        baseline_kept: io::format_indices(&baseline.kept_indices()),
        baseline_l,
        ours_matches_oracle: ours_l <= oracle_l + 1e-9,
        greedy_theta_hat_exact: greedy_exact,
    }))
}

fn cmd_oracle(args: &OracleArgs) -> Result<Outcome> {
    let config = resolved_config("oracle", args);
    log_config(&config);
    let heads = io::read_corpus(&args.input)?;
    let rows: Vec<OracleRow> = heads
        .iter()
        .map(|h| oracle_head(h, args))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    for r in &rows {
        println!(
            "layer {} head {}: oracle {{{}}} L={:.6}; perturbation_constrained {{{}}} L={:.6}{}; attention_only {{{}}} L={:.6}",
            r.layer,
            r.head,
            r.oracle_kept.replace(' ', ","),
            r.oracle_l,
            r.ours_kept.replace(' ', ","),
            r.ours_l,
            if r.ours_matches_oracle { " (oracle-matching)" } else { "" },
            r.baseline_kept.replace(' ', ","),
            r.baseline_l,
        );
    }
    if let Some(out) = &args.out {
        io::write_csv(out, &rows, &config)?;
    }
    let failures = rows.iter().filter(|r| !r.greedy_theta_hat_exact).count();
    Ok(if failures == 0 {
        Outcome::Ok
    } else {
        Outcome::Violations(failures)
    })
}

/// Convenience for tests and embedding: runs with `kvtriage` as argv[0].
pub fn run_args(args: &[&str]) -> i32 {
    run(std::iter::once("kvtriage").chain(args.iter().copied()))
}

