use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;
use symcon_cli::runner::{
    box_with, cluster_names, parse_measure, simulate, solver_config, with_params, Output, Report,
};
use symcon_cli::scenario::{resolve_model, Ranges, SolverSpec};
use symcon_cli::{bundled_scenarios, run_scenario, Scenario};
use symcon_core::certify::{certify_contraction, certify_toward_subspace, CertifyConfig, DEFAULT_SAMPLES};
use symcon_core::expr::parse_expression;
use symcon_core::model::{coarsest_balanced_partition, LoadedModel};
use symcon_core::sampling::init_thread_pool;
use symcon_core::sim::{
    fcd_experiment, periodicity_check, sync_error, write_csv, FcdArm, Trajectory,
};
use symcon_core::certify::estimate_contraction_rate;
use symcon_core::symmetry::{fixed_subspace, linear_action_from_decl, synchrony_subspace, ScalingActionPair};

const EXIT_FAIL: u8 = 2;
const EXIT_ERROR: u8 = 1;

#[derive(Parser)]
#[command(name = "symcon", version, about = "Contraction certificates and symmetry analysis for dynamical networks")]
struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file: certificates, simulations and expectations.
    Run {
        scenario: PathBuf,
        /// Directory for report.json, CSVs and SVG plots.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Run a bundled scenario (or `all`) against its stored expectations.
    Reproduce {
        name: String,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Issue a sampled contraction certificate for a model.
    Check {
        model: String,
        #[arg(long, default_value = "2")]
        measure: String,
        /// JSON file holding the weight matrix as a list of rows.
        #[arg(long)]
        weight: Option<PathBuf>,
        /// Certify contraction toward the fixed subspace of this action.
        #[arg(long)]
        toward: Option<String>,
        /// Certify contraction toward the coarsest balanced synchrony subspace.
        #[arg(long, conflicts_with = "toward")]
        toward_sync: bool,
        /// Range override, `name=lo:hi` (repeatable).
        #[arg(long = "box", value_name = "NAME=LO:HI")]
        ranges: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
        /// Parameter override, `name=value` (repeatable).
        #[arg(long = "param", value_name = "NAME=VALUE")]
        params: Vec<String>,
    },
    /// Print the coarsest balanced partition of a network.
    Partition { model: String },
    /// Integrate a model and report a metric.
    Simulate {
        model: String,
        /// Comma-separated initial state (repeatable; `rate` uses the first two).
        #[arg(long, required = true)]
        x0: Vec<String>,
        #[arg(long)]
        horizon: f64,
        #[arg(long, default_value = "rk45")]
        method: String,
        #[arg(long, default_value_t = 1e-9)]
        rtol: f64,
        #[arg(long, default_value_t = 1e-12)]
        atol: f64,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
        #[arg(long, value_parser = ["sync", "period", "rate"])]
        metric: Option<String>,
        /// Period for the `period` metric.
        #[arg(long)]
        period: Option<f64>,
        #[arg(long = "param", value_name = "NAME=VALUE")]
        params: Vec<String>,
        /// Write one CSV per run here.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Paired fold-change simulation of two scaled copies of a model.
    Fcd {
        model: String,
        #[arg(long)]
        action_i: String,
        #[arg(long)]
        action_j: String,
        /// Input signal for arm i, `name=expr` (repeatable).
        #[arg(long, required = true)]
        input_i: Vec<String>,
        #[arg(long, required = true)]
        input_j: Vec<String>,
        /// Action parameters for arm i, `name=value`.
        #[arg(long)]
        param_i: Vec<String>,
        #[arg(long)]
        param_j: Vec<String>,
        /// States that must agree between the arms.
        #[arg(long, required = true, value_delimiter = ',')]
        shared: Vec<String>,
        #[arg(long)]
        x0: String,
        #[arg(long)]
        horizon: f64,
        /// Largest allowed gap between the shared states of the two arms.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 1e-9)]
        rtol: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    init_thread_pool();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAIL),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Run { scenario, out } => {
            let scn = Scenario::load(scenario)?;
            let report = run_scenario(&scn, &Output { dir: out.clone() })?;
            print_report(&report, cli.json)?;
            Ok(report.passed)
        }
        Command::Reproduce { name, out } => reproduce(name, out.as_deref(), cli.json),
        Command::Check {
            model,
            measure,
            weight,
            toward,
            toward_sync,
            ranges,
            samples,
            params,
        } => {
            let lm = with_params(&resolve_model(model, None)?, &key_values(params)?)?;
            let m = lm.system()?;
            let weight = match weight {
                None => None,
                Some(p) => Some(read_weight(p)?),
            };
            let kind = parse_measure(measure, weight.as_ref())?;
            let b = box_with(&m, &parse_ranges(ranges)?)?;
            let cfg = CertifyConfig::default().with_samples(*samples);
            let cert = if let Some(action) = toward {
                let decl = lm.action(action).ok_or_else(|| anyhow!("no action `{action}`"))?;
                let s = fixed_subspace(&linear_action_from_decl(&m, decl)?);
                certify_toward_subspace(&m, &s, &b, &kind, &cfg)?
            } else if *toward_sync {
                let spec = network(&lm)?;
                let s = synchrony_subspace(&m, &coarsest_balanced_partition(spec, None))?;
                certify_toward_subspace(&m, &s, &b, &kind, &cfg)?
            } else {
                certify_contraction(&m, &b, &kind, &cfg)?
            };
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&cert)?);
            } else {
                println!(
                    "{}: max {} = {:.6e}, margin {:.6e} over {} samples",
                    if cert.status.passed() { "PASS" } else { "FAIL" },
                    cert.measure,
                    cert.max_mu,
                    cert.margin,
                    cert.samples
                );
                if let Some(w) = &cert.witness {
                    println!("witness: x = {:?}, t = {}", w.x, w.t);
                }
            }
            Ok(cert.status.passed())
        }
        Command::Partition { model } => {
            let lm = resolve_model(model, None)?;
            let spec = network(&lm)?;
            let ids: Vec<String> = spec.nodes.iter().map(|n| n.id.clone()).collect();
            let clusters = cluster_names(&ids, &coarsest_balanced_partition(spec, None));
            if cli.json {
                println!("{}", json!({ "model": spec.name, "clusters": clusters }));
            } else {
                println!("{} clusters", clusters.len());
                for c in &clusters {
                    println!("{{{}}}", c.join(", "));
                }
            }
            Ok(true)
        }
        Command::Simulate {
            model,
            x0,
            horizon,
            method,
            rtol,
            atol,
            dt,
            metric,
            period,
            params,
            out,
        } => {
            let lm = with_params(&resolve_model(model, None)?, &key_values(params)?)?;
            let m = lm.system()?;
            let solver = SolverSpec {
                method: method.clone(),
                rtol: *rtol,
                atol: *atol,
                dt: *dt,
                ..SolverSpec::default()
            };
            let cfg = solver_config(&solver, *horizon)?;
            let x0s = x0.iter().map(|s| parse_vector(s)).collect::<Result<Vec<_>>>()?;
            let runs = x0s
                .par_iter()
                .map(|x| simulate(&m, x, &cfg))
                .collect::<Result<Vec<Trajectory>>>()?;
            if let Some(dir) = out {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                for (k, tr) in runs.iter().enumerate() {
                    write_csv(tr, &dir.join(format!("run-{k}.csv")))?;
                }
            }
            let value = match metric.as_deref() {
                None => None,
                Some("sync") => {
                    let spec = network(&lm)?;
                    let p = coarsest_balanced_partition(spec, None);
                    let e = sync_error(&runs[0], &m, &p)?;
                    Some(("sync error at t_end", *e.last().expect("nonempty")))
                }
                Some("period") => {
                    let t = period.ok_or_else(|| anyhow!("--metric period needs --period"))?;
                    Some(("periodicity residual", periodicity_check(&runs[0], t, t)?))
                }
                Some(_) => {
                    if runs.len() < 2 {
                        bail!("--metric rate needs two --x0 values");
                    }
                    let w = (0.1 * horizon, *horizon);
                    Some(("convergence rate", estimate_contraction_rate(&runs[0], &runs[1], w)?.rate))
                }
            };
            if cli.json {
                let finals: Vec<&[f64]> = runs.iter().map(|r| r.final_state()).collect();
                println!(
                    "{}",
                    json!({
                        "model_hash": m.model_hash(),
                        "states": m.states,
                        "final": finals,
                        "metric": value.map(|(k, v)| json!({ "name": k, "value": v })),
                    })
                );
            } else {
                for (k, r) in runs.iter().enumerate() {
                    println!("run {k}: x({}) = {:?}", r.t_end(), r.final_state());
                }
                if let Some((k, v)) = value {
                    println!("{k}: {v:.6e}");
                }
            }
            Ok(true)
        }
        Command::Fcd {
            model,
            action_i,
            action_j,
            input_i,
            input_j,
            param_i,
            param_j,
            shared,
            x0,
            horizon,
            tol,
            rtol,
        } => {
            let lm = resolve_model(model, None)?;
            let m = lm.system()?;
            let arm = |action: &str, inputs: &[String], params: &[String]| -> Result<FcdArm> {
                let decl = lm.action(action).ok_or_else(|| anyhow!("no action `{action}`"))?;
                let over = key_values(params)?;
                let over: Vec<(&str, f64)> = over.iter().map(|(k, v)| (k.as_str(), *v)).collect();
                let inputs = inputs
                    .iter()
                    .map(|s| {
                        let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("expected name=expr, got `{s}`"))?;
                        Ok((k.trim().to_string(), parse_expression(v)?))
                    })
                    .collect::<Result<_>>()?;
                Ok(FcdArm {
                    pair: ScalingActionPair::from_decl(&m, decl, &over)?,
                    inputs,
                })
            };
            let (ai, aj) = (arm(action_i, input_i, param_i)?, arm(action_j, input_j, param_j)?);
            let shared: Vec<&str> = shared.iter().map(String::as_str).collect();
            let solver = SolverSpec {
                rtol: *rtol,
                ..SolverSpec::default()
            };
            let cfg = solver_config(&solver, *horizon)?;
            let r = fcd_experiment(&m, &ai, &aj, &shared, &parse_vector(x0)?, &cfg, true)?;
            let pass = r.shared_gap <= *tol;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                println!(
                    "{}: shared gap {:.3e} (tolerance {tol:e}), transformed gap {:.3e}, x0_j = {:?}",
                    if pass { "PASS" } else { "FAIL" },
                    r.shared_gap,
                    r.transformed_gap,
                    r.x0_j
                );
            }
            Ok(pass)
        }
    }
}

fn reproduce(name: &str, out: Option<&Path>, as_json: bool) -> Result<bool> {
    let names: Vec<&str> = if name == "all" {
        bundled_scenarios().collect()
    } else {
        vec![name]
    };
    let scenarios = names.iter().map(|n| Scenario::bundled(n)).collect::<Result<Vec<_>>>()?;
    let reports = scenarios
        .par_iter()
        .map(|s| {
            let dir = out.map(|d| if names.len() > 1 { d.join(&s.name) } else { d.to_path_buf() });
            run_scenario(s, &Output { dir }).with_context(|| format!("scenario `{}`", s.name))
        })
        .collect::<Result<Vec<_>>>()?;
    if as_json {
        if reports.len() == 1 {
            println!("{}", serde_json::to_string_pretty(&reports[0])?);
        } else {
            println!("{}", serde_json::to_string_pretty(&reports)?);
        }
    } else {
        for r in &reports {
            print_report(r, false)?;
        }
    }
    Ok(reports.iter().all(|r| r.passed))
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "UNMET"
    }
}

fn print_report(r: &Report, as_json: bool) -> Result<()> {
    if as_json {
        println!("{}", serde_json::to_string_pretty(r)?);
        return Ok(());
    }
    println!("scenario {} ({}) model {}", r.scenario, if r.passed { "PASS" } else { "FAIL" }, r.model_hash);
    for c in &r.certificates {
        let margin = c.margin.map_or(String::new(), |m| format!(", margin {m:.6}"));
        println!("  certificate {:<24} {:<13} {}{margin} [{}]", c.name, c.kind, c.status, mark(c.met));
    }
    for s in &r.simulations {
        println!("  simulation  {} ({} runs)", s.name, s.runs);
        for m in &s.metrics {
            let bound = match (m.min, m.max) {
                (Some(lo), Some(hi)) => format!("in [{lo:e}, {hi:e}]"),
                (Some(lo), None) => format!(">= {lo:.6}"),
                (None, Some(hi)) => format!("<= {hi:e}"),
                (None, None) => String::new(),
            };
            println!("    {:<28} {:.6e} {bound} [{}]", m.name, m.value, mark(m.met));
        }
    }
    for f in &r.fcd {
        println!(
            "  fcd         {:<24} gap {:.3e}..{:.3e} over {} runs [{}]",
            f.name,
            f.smallest_gap,
            f.largest_gap,
            f.runs.len(),
            mark(f.met)
        );
    }
    Ok(())
}

fn network(lm: &LoadedModel) -> Result<&symcon_core::model::NetworkSpec> {
    lm.network().ok_or_else(|| anyhow!("this command needs a network model"))
}

fn key_values(items: &[String]) -> Result<BTreeMap<String, f64>> {
    items
        .iter()
        .map(|s| {
            let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("expected name=value, got `{s}`"))?;
            let v: f64 = v.trim().parse().with_context(|| format!("value of `{k}`"))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

fn parse_ranges(items: &[String]) -> Result<Ranges> {
    items
        .iter()
        .map(|s| {
            let (k, r) = s.split_once('=').ok_or_else(|| anyhow!("expected name=lo:hi, got `{s}`"))?;
            let (lo, hi) = r.split_once(':').ok_or_else(|| anyhow!("expected lo:hi, got `{r}`"))?;
            Ok((k.trim().to_string(), [lo.trim().parse()?, hi.trim().parse()?]))
        })
        .collect()
}

fn parse_vector(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad number `{v}`")))
        .collect()
}

fn read_weight(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} must hold a list of rows", path.display()))
}
