//! Single executable for the full workflow: synthetic data generation,
//! training, evaluation, attention cost reports, gradient checking,
//! hyperparameter sweeps, and a quick self test.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use config::Config;
use mstr_core::checkpoint::{read_checkpoint, write_checkpoint};
use mstr_core::complexity::scaling_report;
use mstr_core::data::{generate_synthetic_dataset, load_dataset, save_dataset};
use mstr_core::gradcheck;
use mstr_core::metrics::EvalMetrics;
use mstr_core::model::MstrConfig;
use mstr_core::selftest;
use mstr_core::trainer::{evaluate, train, write_history_csv};
use mstr_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mstr",
    about = "Multi-scale windowed-attention sequence classifier, desk scale",
    after_help = format!("CONFIGURATION KEYS (file lines or --set key=value):\n{}", Config::describe_keys()),
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat key=value configuration file, applied before --set overrides.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one configuration key; repeatable, applied in order.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Shorthand for --set out=DIR.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<String>,

    /// Shorthand for --set seed=N.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-scale dataset directory.
    GenData,
    /// Train per-seed models on a dataset directory.
    Train,
    /// Evaluate a checkpoint on a dataset split.
    Eval,
    /// Print and export the attention cost report.
    Flops,
    /// Verify analytic gradients against finite differences.
    Gradcheck,
    /// Train across the (p, L) grid and aggregate test metrics.
    Sweep,
    /// Run the quick property-check battery.
    Selftest,
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let mut cfg = Config::defaults();
    let layered: Result<()> = (|| {
        if let Some(path) = &cli.config {
            cfg.load_file(path)?;
        }
        cfg.apply_overrides(&cli.set)?;
        if let Some(out) = &cli.out {
            cfg.set("out", out)?;
        }
        if let Some(seed) = cli.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        Ok(())
    })();
    if let Err(e) = layered {
        eprintln!("error: {e}");
        return exit_code_for(&e);
    }

    let result = match cli.command {
        Command::GenData => run_gen_data(&cfg),
        Command::Train => run_train(&cfg),
        Command::Eval => run_eval(&cfg),
        Command::Flops => run_flops(&cfg),
        Command::Gradcheck => run_gradcheck(&cfg),
        Command::Sweep => run_sweep(&cfg),
        Command::Selftest => run_selftest(&cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

/// 1 for validation problems, 2 for runtime failures.
fn exit_code_for(e: &Error) -> ExitCode {
    match e {
        Error::Config(_)
        | Error::Contract(_)
        | Error::ShapeMismatch { .. }
        | Error::NotDivisible { .. }
        | Error::Empty(_) => ExitCode::from(1),
        Error::Format { .. } | Error::Io(_) | Error::Diverged { .. } => ExitCode::from(2),
    }
}

fn run_gen_data(cfg: &Config) -> Result<()> {
    let spec = cfg.synthetic_spec()?;
    let seed = cfg.u64_value("seed")?;
    let p = cfg.usize_value("fractal_p")?;
    let levels = cfg.usize_value("scale_levels")?;
    let out = cfg.out_dir()?;
    std::fs::create_dir_all(&out)?;

    let (dataset, _) = generate_synthetic_dataset(&spec, seed, p, levels)?;
    save_dataset(&out, &dataset)?;
    println!(
        "wrote dataset to {}: {} train / {} val / {} test samples, {} classes, dim {}",
        out.display(),
        dataset.train.len(),
        dataset.val.len(),
        dataset.test.len(),
        dataset.num_classes,
        dataset.input_dim
    );
    Ok(())
}

fn run_train(cfg: &Config) -> Result<()> {
    let data_dir = PathBuf::from(cfg.str_value("data_dir")?);
    let model_cfg = cfg.model_config()?;
    let train_cfg = cfg.train_config()?;
    let dataset = load_dataset(&data_dir, model_cfg.fractal_p, model_cfg.scale_levels)?;
    let out = cfg.out_dir()?;
    std::fs::create_dir_all(&out)?;

    let outcome = train(&model_cfg, &train_cfg, &dataset)?;
    write_history_csv(&out.join("history.csv"), &outcome.all_records())?;

    let mut test_was = Vec::new();
    for run in &outcome.runs {
        let ckpt = out.join(format!("checkpoint_seed{}.ckpt", run.seed));
        write_checkpoint(&ckpt, &model_cfg, &run.best_params)?;
        let line = if dataset.test.is_empty() {
            format!(
                "seed {}: best val WA {:.4} at epoch {}",
                run.seed, run.best_val.wa, run.best_epoch
            )
        } else {
            let test = evaluate(&run.best_params, &dataset.test, &model_cfg)?;
            test_was.push(test.wa);
            format!(
                "seed {}: best val WA {:.4} at epoch {}, test WA {:.4} UA {:.4} WF1 {:.4}",
                run.seed, run.best_val.wa, run.best_epoch, test.wa, test.ua, test.wf1
            )
        };
        println!("{line}");
    }
    if !test_was.is_empty() {
        println!("median test WA over seeds: {:.4}", median(&mut test_was));
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn format_metrics(m: &EvalMetrics) -> String {
    let mut out = format!("wa={:.6}\nua={:.6}\nwf1={:.6}\n", m.wa, m.ua, m.wf1);
    if !m.excluded_classes.is_empty() {
        out.push_str(&format!("excluded_classes={:?}\n", m.excluded_classes));
    }
    out.push_str("confusion=\n");
    for row in &m.confusion {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        out.push_str(&format!("  {}\n", cells.join(" ")));
    }
    out
}

fn run_eval(cfg: &Config) -> Result<()> {
    let ckpt_path = PathBuf::from(cfg.str_value("checkpoint")?);
    let data_dir = PathBuf::from(cfg.str_value("data_dir")?);
    let (model_cfg, params) = read_checkpoint(&ckpt_path)?;
    let dataset = load_dataset(&data_dir, model_cfg.fractal_p, model_cfg.scale_levels)?;
    let split = dataset.split(cfg.str_value("split")?)?;
    let metrics = evaluate(&params, split, &model_cfg)?;

    let report = format_metrics(&metrics);
    print!("{report}");
    let out = cfg.out_dir()?;
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("eval_metrics.txt"), report)?;
    Ok(())
}

fn run_flops(cfg: &Config) -> Result<()> {
    let t_list = cfg.usize_list("t_list")?;
    let f_dim = cfg.usize_value("model_dim")?;
    let p = cfg.usize_value("fractal_p")?;
    let levels = cfg.usize_value("scale_levels")?;

    let report = scaling_report(&t_list, f_dim, p, levels)?;
    let head = &report.rows[0];
    println!(
        "attention MACs per side at T={}, F={f_dim}, p={p}, L={levels}:",
        head.t_len
    );
    println!(
        "  vanilla analytic {} (counted {}), mstr analytic {} (counted {})",
        head.analytic_vtr, head.counted_vtr_macs, head.analytic_mstr, head.counted_mstr_macs
    );
    println!("  reduction {:.2}%", head.reduction_pct);
    println!();
    print!("{}", report.to_table());

    let out = cfg.out_dir()?;
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("flops.csv"), report.to_csv())?;
    println!("\nwrote {}", out.join("flops.csv").display());
    Ok(())
}

fn run_gradcheck(cfg: &Config) -> Result<()> {
    let seed = cfg.u64_value("seed")?;
    let mut results = gradcheck::check_primitives(seed);
    results.push(gradcheck::check_block_wo_gradient(seed)?);

    let mut tiny = MstrConfig::new(5, 8, 3);
    tiny.fractal_p = 3;
    tiny.scale_levels = 3;
    tiny.heads = 2;
    tiny.blocks = 1;
    results.extend(gradcheck::check_model_end_to_end(&tiny, seed)?);

    println!("{:<28} {:>12}  status", "op", "rel_err");
    let mut failures = 0;
    for r in &results {
        println!(
            "{:<28} {:>12.3e}  {}",
            r.name,
            r.rel_err,
            if r.pass { "pass" } else { "FAIL" }
        );
        if !r.pass {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(Error::config(format!("{failures} gradient checks failed")));
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// `(p, L, seed, test metrics)` for one trained sweep cell.
type SweepRow = (usize, usize, u64, EvalMetrics);

fn run_sweep(cfg: &Config) -> Result<()> {
    let spec = cfg.synthetic_spec()?;
    let seed = cfg.u64_value("seed")?;
    let base_model = cfg.model_config()?;
    let train_cfg = cfg.train_config()?;
    let p_grid = cfg.usize_list("sweep_p")?;
    let l_grid = cfg.usize_list("sweep_l")?;
    let out = cfg.out_dir()?;
    std::fs::create_dir_all(&out)?;

    let cells: Vec<(usize, usize)> = p_grid
        .iter()
        .flat_map(|&p| l_grid.iter().map(move |&l| (p, l)))
        .collect();

    // Cells are independent; run them in parallel and sort rows afterwards.
    let cell_rows: Vec<Result<Vec<SweepRow>>> = cells
        .par_iter()
        .map(|&(p, levels)| {
            let (dataset, _) = generate_synthetic_dataset(&spec, seed, p, levels)?;
            let mut model_cfg = base_model.clone();
            model_cfg.fractal_p = p;
            model_cfg.scale_levels = levels;
            let outcome = train(&model_cfg, &train_cfg, &dataset)?;
            let mut rows = Vec::new();
            for run in &outcome.runs {
                let test = evaluate(&run.best_params, &dataset.test, &model_cfg)?;
                rows.push((p, levels, run.seed, test));
            }
            Ok(rows)
        })
        .collect();

    let mut rows = Vec::new();
    for cell in cell_rows {
        rows.extend(cell?);
    }
    rows.sort_by_key(|(p, l, seed, _)| (*p, *l, *seed));

    let mut csv = String::from("p,L,seed,test_wa,test_ua,test_wf1\n");
    for (p, l, seed, m) in &rows {
        csv.push_str(&format!(
            "{p},{l},{seed},{:.6},{:.6},{:.6}\n",
            m.wa, m.ua, m.wf1
        ));
    }
    std::fs::write(out.join("sweep.csv"), csv)?;

    println!("{:>3} {:>3} {:>12}", "p", "L", "median WA");
    for &(p, l) in &cells {
        let mut was: Vec<f64> = rows
            .iter()
            .filter(|(rp, rl, _, _)| (*rp, *rl) == (p, l))
            .map(|(_, _, _, m)| m.wa)
            .collect();
        println!("{:>3} {:>3} {:>12.4}", p, l, median(&mut was));
    }
    println!("wrote {}", out.join("sweep.csv").display());
    Ok(())
}

fn run_selftest(cfg: &Config) -> Result<()> {
    let out = cfg.out_dir()?;
    std::fs::create_dir_all(&out)?;
    let results = selftest::run_all(&out, cfg.u64_value("seed")?)?;
    let mut failures = 0;
    for r in &results {
        println!(
            "{} {:<28} {}",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
        if !r.pass {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(Error::config(format!("{failures} self-test checks failed")));
    }
    Ok(())
}
