use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dfiv::harness::{generate_files, parse_pairs, run_experiment, run_tuning, RunOutput, RunSpec};

/// Deep feature instrumental variable regression experiments.
#[derive(Parser)]
#[command(name = "dfiv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a spec file.
    Run(RunArgs),
    /// Tune the regularization strengths from held-out stage losses.
    Tune(RunArgs),
    /// Compare alternating training with joint training of both networks.
    Ablate(RunArgs),
    /// Generate a dataset and write it as CSV.
    Gen(GenArgs),
}

#[derive(Args)]
struct Overrides {
    /// Override a spec key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for repeats.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    spec: PathBuf,
    /// Result file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct GenArgs {
    task: String,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

enum Failure {
    Usage(String),
    Run(String),
}

fn kv(items: &[String]) -> Result<Vec<(String, String)>, Failure> {
    items
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Failure::Usage(format!("expected KEY=VALUE, got `{s}`")))
        })
        .collect()
}

fn load_spec(
    path: &Path,
    o: &Overrides,
    out: Option<&PathBuf>,
    extra: &[(&str, String)],
) -> Result<RunSpec, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let mut pairs = parse_pairs(&text).map_err(|e| Failure::Usage(e.to_string()))?;
    pairs.extend(kv(&o.set)?);
    let flags = [
        ("threads", o.threads.map(|v| v.to_string())),
        ("seed", o.seed.map(|v| v.to_string())),
        ("repeats", o.repeats.map(|v| v.to_string())),
        ("output", out.map(|p| p.display().to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    }
    pairs.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    RunSpec::from_pairs(&pairs).map_err(|e| Failure::Usage(e.to_string()))
}

fn report(out: &RunOutput, to_stdout: bool) -> Result<(), Failure> {
    if to_stdout {
        print!(
            "{}",
            out.to_json().map_err(|e| Failure::Run(e.to_string()))?
        );
    }
    for r in &out.records {
        let rho = r.rho.map(|v| format!(" rho={v}")).unwrap_or_default();
        eprintln!(
            "{} {}{rho}: {} mean {:?} median {:?} se {:?} failures {}/{}",
            r.task,
            r.estimator,
            r.metric_name,
            r.mean,
            r.median,
            r.std_error,
            r.failures,
            r.repeats.len()
        );
    }
    if out.records.iter().any(|r| r.all_failed()) {
        let first = out
            .records
            .iter()
            .flat_map(|r| &r.repeats)
            .find_map(|p| p.error.clone());
        return Err(Failure::Run(format!(
            "every repeat failed: {}",
            first.unwrap_or_default()
        )));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(a) => {
            let spec = load_spec(&a.spec, &a.overrides, a.out.as_ref(), &[])?;
            let out = run_experiment(&spec).map_err(|e| Failure::Run(e.to_string()))?;
            report(&out, spec.output.is_none())
        }
        Command::Ablate(a) => {
            let spec = load_spec(
                &a.spec,
                &a.overrides,
                a.out.as_ref(),
                &[("task", "ablation_joint".into())],
            )?;
            let out = run_experiment(&spec).map_err(|e| Failure::Run(e.to_string()))?;
            report(&out, spec.output.is_none())
        }
        Command::Tune(a) => {
            let spec = load_spec(&a.spec, &a.overrides, a.out.as_ref(), &[])?;
            let t = run_tuning(&spec).map_err(|e| Failure::Run(e.to_string()))?;
            let json =
                serde_json::to_string_pretty(&t).map_err(|e| Failure::Run(e.to_string()))? + "\n";
            match &spec.output {
                Some(p) => dfiv::harness::write_atomic(p, json.as_bytes())
                    .map_err(|e| Failure::Run(e.to_string()))?,
                None => print!("{json}"),
            }
            eprintln!("lambda1 = {}\nlambda2 = {}", t.lambda1, t.lambda2);
            Ok(())
        }
        Command::Gen(g) => {
            let mut pairs = vec![
                ("task".to_string(), g.task.clone()),
                ("seed".to_string(), g.seed.to_string()),
                ("n".to_string(), g.n.to_string()),
            ];
            pairs.extend(kv(&g.set)?);
            let spec = RunSpec::from_pairs(&pairs).map_err(|e| Failure::Usage(e.to_string()))?;
            for p in generate_files(&spec, &g.out).map_err(|e| Failure::Run(e.to_string()))? {
                eprintln!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
