//! Command-line surface: training, evaluation, the two ablation sweeps, the
//! finite-difference diagnostic, and synthetic dataset generation.
//!
//! Every run writes `run.json` into the output directory with the fully
//! resolved configuration, so any result can be reproduced from its artifacts
//! alone.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, Parser, Subcommand};
use serde::Serialize;

use crate::autograd::{grad_check, GradCheckConfig, Phase, Tape, Tid};
use crate::data::{describe_source, generate_synthetic, write_dataset, DataSource, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{
    ablate_filters, ablate_lengths, evaluate, format_csv, format_table, make_splits, prepare_split,
    AblationRow, RankSummary, SplitResult,
};
use crate::model::{Model, ModelConfig};
use crate::params::ParamSet;
use crate::preprocess::{PreparedFrame, SequenceSample, NET_H, NET_W};
use crate::rng::RngStream;
use crate::tensor::FeatureMap;
use crate::train::{pair_loss_value, train, PairBatch, TrainConfig, Trainer};

#[derive(Parser)]
#[command(
    name = "stam-reid",
    about = "Video person re-identification with a spatio-temporal attentive ConvLSTM"
)]
struct Cli {
    /// key=value configuration file
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed (splits and training)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the first split's training half; writes checkpoints and the loss trace
    Train {
        /// Number of training epochs
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Load a checkpoint and rank the first split's test half
    Eval {
        /// Checkpoint file (default: <out_dir>/final.ckpt)
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Frames per sequence at evaluation
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Sweep the attentive filter count 0..=4, retraining per setting
    AblateFilters,
    /// Sweep the evaluation sequence length, training once per split
    AblateLength,
    /// Finite-difference verification of every gradient path
    Gradcheck,
    /// Materialize the configured synthetic dataset to disk
    Synth {
        /// Destination directory (default: <out_dir>/synth)
        #[arg(long, value_name = "DIR")]
        dest: Option<PathBuf>,
    },
}

/// Entry point; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Command::Train { epochs: Some(0) } = cli.command {
        let mut cmd = Cli::command();
        let _ = cmd
            .error(clap::error::ErrorKind::InvalidValue, "--epochs must be at least 1")
            .print();
        return 2;
    }
    match execute(cli) {
        Ok(diagnostics_failed) => {
            if diagnostics_failed {
                1
            } else {
                0
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::parse(&fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Command::Train { epochs: Some(n) } = cli.command {
        cfg.train.epochs = n;
    }
    if let Command::Eval { max_len: Some(n), .. } = cli.command {
        cfg.max_len = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_run_json(cfg: &RunConfig, command: &str) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    #[derive(Serialize)]
    struct RunRecord<'a> {
        command: &'a str,
        #[serde(flatten)]
        config: &'a RunConfig,
    }
    let text =
        serde_json::to_string_pretty(&RunRecord { command, config: cfg }).expect("config serializes");
    fs::write(cfg.out_dir.join("run.json"), text + "\n")?;
    Ok(())
}

/// Runs the parsed command; `Ok(true)` means diagnostics ran and failed.
fn execute(cli: Cli) -> Result<bool> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Train { .. } => {
            write_run_json(&cfg, "train")?;
            cmd_train(&cfg)?;
        }
        Command::Eval { checkpoint, .. } => {
            write_run_json(&cfg, "eval")?;
            cmd_eval(&cfg, checkpoint.as_deref())?;
        }
        Command::AblateFilters => {
            write_run_json(&cfg, "ablate-filters")?;
            let rows =
                ablate_filters(&cfg.source.load()?, &cfg.train, cfg.max_len, cfg.repetitions)?;
            report_ablation(&cfg, "Filters", "filters", &rows)?;
        }
        Command::AblateLength => {
            write_run_json(&cfg, "ablate-length")?;
            let rows = ablate_lengths(&cfg.source.load()?, &cfg.train, cfg.repetitions)?;
            report_ablation(&cfg, "Length", "length", &rows)?;
        }
        Command::Gradcheck => {
            write_run_json(&cfg, "gradcheck")?;
            return cmd_gradcheck();
        }
        Command::Synth { dest } => {
            write_run_json(&cfg, "synth")?;
            cmd_synth(&cfg, dest.as_deref())?;
        }
    }
    Ok(false)
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let ds = cfg.source.load()?;
    println!("data   {}", describe_source(&cfg.source));
    let splits = make_splits(&ds.ids(), cfg.repetitions, cfg.train.seed)?;
    let (train_set, _) = prepare_split(&ds, &splits[0])?;
    println!(
        "split  {} training / {} test identities (seed {})",
        splits[0].train_ids.len(),
        splits[0].test_ids.len(),
        splits[0].seed
    );
    let out = train(&train_set, &cfg.train, Some(&cfg.out_dir))?;
    if let Some(last) = out.trace.last() {
        println!("epoch {:>5}  loss {}", last.epoch, last.mean.total);
    }
    println!("wrote checkpoints and loss trace to {}", cfg.out_dir.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let ds = cfg.source.load()?;
    let splits = make_splits(&ds.ids(), cfg.repetitions, cfg.train.seed)?;
    let (train_set, test) = prepare_split(&ds, &splits[0])?;
    let mut model = Model::new(cfg.train.model_config(train_set.identities.len()), cfg.train.seed)?;
    let path =
        checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join("final.ckpt"));
    model.load_checkpoint(&path)?;
    let outcome = evaluate(&model, &test, cfg.max_len)?;

    let rows = vec![(cfg.max_len.to_string(), outcome.summary)];
    print!("{}", format_table("Length", &rows));
    fs::write(cfg.out_dir.join("results.csv"), format_csv("Length", &rows))?;
    fs::write(cfg.out_dir.join("results_table.txt"), format_table("Length", &rows))?;
    let line = serde_json::to_string(&SplitResult { seed: splits[0].seed, ranks: outcome.summary })
        .expect("result serializes");
    fs::write(cfg.out_dir.join("ranks.jsonl"), line + "\n")?;
    println!("wrote results to {}", cfg.out_dir.display());
    Ok(())
}

fn report_ablation(cfg: &RunConfig, label: &str, key: &str, rows: &[AblationRow]) -> Result<()> {
    let table_rows: Vec<(String, RankSummary)> =
        rows.iter().map(|r| (r.setting.to_string(), r.mean)).collect();
    let csv = format_csv(label, &table_rows);
    print!("{csv}");
    fs::write(cfg.out_dir.join("results.csv"), &csv)?;
    fs::write(cfg.out_dir.join("results_table.txt"), format_table(label, &table_rows))?;

    let mut jsonl = String::new();
    for row in rows {
        for split in &row.per_split {
            // Keyed by the swept axis so one file holds the whole sweep.
            let line = format!(
                "{{\"{key}\":{},{}",
                row.setting,
                serde_json::to_string(split)
                    .expect("result serializes")
                    .trim_start_matches('{')
            );
            jsonl.push_str(&line);
            jsonl.push('\n');
        }
    }
    fs::write(cfg.out_dir.join("ranks.jsonl"), jsonl)?;
    println!("wrote results to {}", cfg.out_dir.display());
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, dest: Option<&Path>) -> Result<()> {
    let DataSource::Synthetic(spec) = &cfg.source else {
        return Err(Error::Config("synth requires a synthetic source, not dataset=".into()));
    };
    let ds = generate_synthetic(spec)?;
    let dest = dest.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join("synth"));
    write_dataset(&ds, &dest)?;
    let frames: usize = ds.people.iter().map(|p| p.cam1.len() + p.cam2.len()).sum();
    println!("wrote {} identities ({frames} frames) to {}", ds.people.len(), dest.display());
    Ok(())
}

fn cmd_gradcheck() -> Result<bool> {
    let reports = gradient_suites()?;
    let mut failed = false;
    for r in &reports {
        println!(
            "{:<24} max rel err {:>12.3e}  (tol {:.0e})  {}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.passed { "ok" } else { "FAILED" }
        );
        failed |= !r.passed;
    }
    if failed {
        eprintln!("gradient check FAILED");
    }
    Ok(failed)
}

/// One finite-difference suite's outcome.
pub struct SuiteReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn finish_suite(
    name: &'static str,
    cfg: &GradCheckConfig,
    ps: &mut ParamSet,
    build: &mut dyn FnMut(&ParamSet) -> Result<(Tape, Tid)>,
) -> Result<SuiteReport> {
    let (tape, loss) = build(ps)?;
    let grads = tape.backward(&[(loss, FeatureMap::scalar(1.0))])?;
    tape.harvest_param_grads(&grads, ps);
    let mut forward = |p: &ParamSet| build(p).map(|(t, l)| t.value(l).item());
    let report = grad_check(ps, &mut forward, cfg)?;
    Ok(SuiteReport {
        name,
        max_rel_err: report.max_rel_err,
        tolerance: report.tolerance,
        passed: report.passed,
    })
}

/// Finite-difference suites covering every differentiable operation, the full
/// 2-frame branch, and the complete Siamese pair loss.
pub fn gradient_suites() -> Result<Vec<SuiteReport>> {
    let cfg = GradCheckConfig { samples_per_param: 12, ..Default::default() };
    let mut rng = RngStream::new(2024).fork("gradcheck-suite");
    let mut suites = Vec::new();

    {
        let mut ps = ParamSet::new();
        let x = ps.add("x", &[2, 3, 6, 5], |_| rng.uniform_in(-1.0, 1.0))?;
        let w = ps.add("w", &[4, 3, 3, 3], |_| rng.uniform_in(-0.5, 0.5))?;
        let b = ps.add("b", &[4], |_| rng.uniform_in(-0.2, 0.2))?;
        suites.push(finish_suite("conv2d", &cfg, &mut ps, &mut |p| {
            let mut tape = Tape::new();
            let (xt, wt, bt) = (tape.param(p, x), tape.param(p, w), tape.param(p, b));
            let y = tape.conv2d(xt, wt, Some(bt), (1, 1), 1)?;
            square_sum(tape, y)
        })?);
    }
    {
        let mut ps = ParamSet::new();
        let x = ps.add("x", &[1, 2, 5, 5], |_| rng.uniform_in(-1.0, 1.0))?;
        let w = ps.add("w", &[3, 2, 3, 3], |_| rng.uniform_in(-0.5, 0.5))?;
        suites.push(finish_suite("conv2d_asym_pad", &cfg, &mut ps, &mut |p| {
            let mut tape = Tape::new();
            let (xt, wt) = (tape.param(p, x), tape.param(p, w));
            let y = tape.conv2d(xt, wt, None, (2, 1), 1)?;
            square_sum(tape, y)
        })?);
    }
    {
        let mut ps = ParamSet::new();
        let x = ps.add("x", &[2, 3, 7, 5], |_| rng.uniform_in(-1.0, 1.0))?;
        suites.push(finish_suite("maxpool2", &cfg, &mut ps, &mut |p| {
            let mut tape = Tape::new();
            let xt = tape.param(p, x);
            let y = tape.maxpool2(xt)?;
            square_sum(tape, y)
        })?);
    }
    {
        let mut ps = ParamSet::new();
        let x = ps.add("x", &[2, 4, 3, 3], |_| rng.uniform_in(-2.0, 2.0))?;
        suites.push(finish_suite("tanh", &cfg, &mut ps, &mut |p| {
            let mut tape = Tape::new();
            let xt = tape.param(p, x);
            let y = tape.tanh(xt);
            square_sum(tape, y)
        })?);
    }
    {
        let mut ps = ParamSet::new();
        let x = ps.add("x", &[2, 4, 3, 3], |_| rng.uniform_in(-2.0, 2.0))?;
        suites.push(finish_suite("sigmoid", &cfg, &mut ps, &mut |p| {
            let mut tape = Tape::new();
            let xt = tape.param(p, x);
            let y = tape.sigmoid(xt);
            square_sum(tape, y)
        })?);
    }
    {
        let mut ps = ParamSet::new();
        let x = ps.add("x", &[2, 1, 4, 5], |_| rng.uniform_in(-1.5, 1.5))?;
        let weights = FeatureMap::uniform(2, 1, 4, 5, 1.0, &mut rng);
        suites.push(finish_suite("softmax_spatial", &cfg, &mut ps, &mut |p| {
            let mut tape = Tape::new();
            let xt = tape.param(p, x);
            let soft = tape.softmax_spatial(xt)?;
            let wl = tape.leaf(weights.clone());
            let y = tape.mul(soft, wl)?;
            square_sum(tape, y)
        })?);
    }
    {
        let mut ps = ParamSet::new();
        let x = ps.add("x", &[2, 4, 1, 1], |_| rng.uniform_in(-1.0, 1.0))?;
        let w = ps.add("w", &[4, 3], |_| rng.uniform_in(-0.6, 0.6))?;
        let b = ps.add("b", &[3], |_| rng.uniform_in(-0.2, 0.2))?;
        suites.push(finish_suite("linear", &cfg, &mut ps, &mut |p| {
            let mut tape = Tape::new();
            let (xt, wt, bt) = (tape.param(p, x), tape.param(p, w), tape.param(p, b));
            let y = tape.linear(xt, wt, bt)?;
            square_sum(tape, y)
        })?);
    }
    {
        let mut ps = ParamSet::new();
        let x = ps.add("x", &[2, 8, 2, 2], |_| rng.uniform_in(-1.0, 1.0))?;
        suites.push(finish_suite("dropout_train_mask", &cfg, &mut ps, &mut |p| {
            let mut tape = Tape::new();
            let xt = tape.param(p, x);
            // Pinned stream: every rebuild draws the identical mask.
            let mut mask_rng = RngStream::new(606).fork("mask");
            let y = tape.dropout(xt, 0.5, Phase::Train, &mut mask_rng)?;
            square_sum(tape, y)
        })?);
    }
    {
        let mut ps = ParamSet::new();
        let a = ps.add("a", &[2, 3, 2, 2], |_| rng.uniform_in(-1.0, 1.0))?;
        let b = ps.add("b", &[2, 3, 2, 2], |_| rng.uniform_in(-1.0, 1.0))?;
        suites.push(finish_suite("add", &cfg, &mut ps, &mut |p| {
            let mut tape = Tape::new();
            let (at, bt) = (tape.param(p, a), tape.param(p, b));
            let y = tape.add(at, bt)?;
            square_sum(tape, y)
        })?);
    }
    {
        let mut ps = ParamSet::new();
        let a = ps.add("a", &[2, 3, 2, 2], |_| rng.uniform_in(-1.0, 1.0))?;
        let b = ps.add("b", &[2, 3, 2, 2], |_| rng.uniform_in(-1.0, 1.0))?;
        suites.push(finish_suite("mul", &cfg, &mut ps, &mut |p| {
            let mut tape = Tape::new();
            let (at, bt) = (tape.param(p, a), tape.param(p, b));
            let y = tape.mul(at, bt)?;
            square_sum(tape, y)
        })?);
    }
    {
        let mut ps = ParamSet::new();
        let x = ps.add("x", &[2, 4, 3, 3], |_| rng.uniform_in(-1.0, 1.0))?;
        let map = ps.add("map", &[2, 1, 3, 3], |_| rng.uniform_in(-1.0, 1.0))?;
        suites.push(finish_suite("mul_map", &cfg, &mut ps, &mut |p| {
            let mut tape = Tape::new();
            let (xt, mt) = (tape.param(p, x), tape.param(p, map));
            let y = tape.mul_map(xt, mt)?;
            square_sum(tape, y)
        })?);
    }
    {
        let mut ps = ParamSet::new();
        let x = ps.add("x", &[1, 6, 2, 2], |_| rng.uniform_in(-1.0, 1.0))?;
        suites.push(finish_suite("slice_channels", &cfg, &mut ps, &mut |p| {
            let mut tape = Tape::new();
            let xt = tape.param(p, x);
            let lo = tape.slice_channels(xt, 0, 2)?;
            let hi = tape.slice_channels(xt, 2, 6)?;
            let sq_lo = tape.square(lo);
            let s_lo = tape.sum_all(sq_lo);
            let sq_hi = tape.square(hi);
            let sum_hi = tape.sum_all(sq_hi);
            let scaled = tape.mul_const(sum_hi, 2.0);
            let loss = tape.add(s_lo, scaled)?;
            Ok((tape, loss))
        })?);
    }
    {
        let mut ps = ParamSet::new();
        let x = ps.add("x", &[2, 3, 2, 2], |_| rng.uniform_in(-1.0, 1.0))?;
        suites.push(finish_suite("flatten", &cfg, &mut ps, &mut |p| {
            let mut tape = Tape::new();
            let xt = tape.param(p, x);
            let y = tape.flatten(xt);
            square_sum(tape, y)
        })?);
    }
    {
        let mut ps = ParamSet::new();
        let a = ps.add("a", &[2, 6], |_| rng.uniform_in(-1.0, 1.0))?;
        let b = ps.add("b", &[3, 6], |_| rng.uniform_in(-1.0, 1.0))?;
        let weights = FeatureMap::matrix(1, 6, (0..6).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
            .expect("weight row");
        suites.push(finish_suite("concat_mean_l2norm", &cfg, &mut ps, &mut |p| {
            let mut tape = Tape::new();
            let (at, bt) = (tape.param(p, a), tape.param(p, b));
            let rows = tape.concat_rows(at, bt)?;
            let mean = tape.mean_rows(rows);
            let unit = tape.l2_normalize_rows(mean, 1e-12);
            let wl = tape.leaf(weights.clone());
            let y = tape.mul(unit, wl)?;
            let loss = tape.sum_all(y);
            Ok((tape, loss))
        })?);
    }
    {
        let mut ps = ParamSet::new();
        let x = ps.add("x", &[3, 5], |_| rng.uniform_in(0.2, 1.2))?;
        let weights = FeatureMap::matrix(3, 5, (0..15).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
            .expect("weight rows");
        suites.push(finish_suite("l2_normalize_rows", &cfg, &mut ps, &mut |p| {
            let mut tape = Tape::new();
            let xt = tape.param(p, x);
            let unit = tape.l2_normalize_rows(xt, 1e-12);
            let wl = tape.leaf(weights.clone());
            let y = tape.mul(unit, wl)?;
            let loss = tape.sum_all(y);
            Ok((tape, loss))
        })?);
    }
    {
        let mut ps = ParamSet::new();
        let x = ps.add("x", &[4, 6], |_| rng.uniform_in(-1.0, 1.0))?;
        suites.push(finish_suite("mean_rows", &cfg, &mut ps, &mut |p| {
            let mut tape = Tape::new();
            let xt = tape.param(p, x);
            let y = tape.mean_rows(xt);
            square_sum(tape, y)
        })?);
    }
    {
        let mut ps = ParamSet::new();
        let a = ps.add("a", &[2, 3, 1, 1], |_| rng.uniform_in(-1.0, 1.0))?;
        let b = ps.add("b", &[2, 3, 1, 1], |_| rng.uniform_in(-1.0, 1.0))?;
        let c = ps.add("c", &[2, 3, 1, 1], |_| rng.uniform_in(-1.0, 1.0))?;
        suites.push(finish_suite("add_n", &cfg, &mut ps, &mut |p| {
            let mut tape = Tape::new();
            let xs = [tape.param(p, a), tape.param(p, b), tape.param(p, c)];
            let y = tape.add_n(&xs)?;
            square_sum(tape, y)
        })?);
    }
    {
        let mut ps = ParamSet::new();
        let logits = ps.add("logits", &[1, 5], |_| rng.uniform_in(-1.0, 1.0))?;
        suites.push(finish_suite("softmax_cross_entropy", &cfg, &mut ps, &mut |p| {
            let mut tape = Tape::new();
            let lt = tape.param(p, logits);
            let loss = tape.softmax_cross_entropy(lt, 2)?;
            Ok((tape, loss))
        })?);
    }
    {
        let mut ps = ParamSet::new();
        let x = ps.add("x", &[2, 3, 2, 2], |_| rng.uniform_in(-1.0, 1.0))?;
        suites.push(finish_suite("mul_const_square_sum", &cfg, &mut ps, &mut |p| {
            let mut tape = Tape::new();
            let xt = tape.param(p, x);
            let y = tape.mul_const(xt, 1.7);
            square_sum(tape, y)
        })?);
    }

    suites.push(branch_suite()?);
    suites.push(pair_suite()?);
    Ok(suites)
}

fn square_sum(mut tape: Tape, y: Tid) -> Result<(Tape, Tid)> {
    let sq = tape.square(y);
    let loss = tape.sum_all(sq);
    Ok((tape, loss))
}

/// Full 2-frame branch: descriptor energy plus a classification term.
fn branch_suite() -> Result<SuiteReport> {
    let config = ModelConfig { filters: 1, refine_steps: 2, identities: 3, dropout: 0.0 };
    let mut model = Model::new(config.clone(), 77)?;
    let frames = FeatureMap::uniform(2, 5, NET_H, NET_W, 1.0, &mut RngStream::new(78));
    let label = 1;

    let run = |m: &Model| -> Result<(Tape, Tid)> {
        let mut tape = Tape::new();
        let tp = m.tape_params(&mut tape);
        let mut rng = RngStream::new(0);
        let g = m.build_branch(&mut tape, &tp, &frames, Phase::Eval, &mut rng)?;
        let sq = tape.square(g.descriptor);
        let dsum = tape.sum_all(sq);
        let ce = tape.softmax_cross_entropy(g.logits, label)?;
        let loss = tape.add(dsum, ce)?;
        Ok((tape, loss))
    };

    let (tape, loss) = run(&model)?;
    let grads = tape.backward(&[(loss, FeatureMap::scalar(1.0))])?;
    tape.harvest_param_grads(&grads, &mut model.params);

    let mut forward = |ps: &ParamSet| -> Result<f64> {
        let mut probe = Model::new(config.clone(), 77)?;
        for (_, p) in ps.iter() {
            let id = probe.params.id_by_name(&p.name).expect("same architecture");
            probe.params.values_mut(id).copy_from_slice(&p.values);
        }
        let (t, l) = run(&probe)?;
        Ok(t.value(l).item())
    };
    let cfg = GradCheckConfig { samples_per_param: 3, ..Default::default() };
    let report = grad_check(&mut model.params, &mut forward, &cfg)?;
    Ok(SuiteReport {
        name: "branch_2frame",
        max_rel_err: report.max_rel_err,
        tolerance: report.tolerance,
        passed: report.passed,
    })
}

/// Complete pair loss: contrastive plus both classification terms.
fn pair_suite() -> Result<SuiteReport> {
    let cfg = TrainConfig {
        epochs: 1,
        seq_len: 2,
        filters: 1,
        refine_steps: 2,
        checkpoint_every: 0,
        ..Default::default()
    };
    let mut rng = RngStream::new(81);
    let mut seq = |person_id: usize, camera_id: u8| SequenceSample {
        frames: (0..2)
            .map(|_| PreparedFrame { channels: FeatureMap::uniform(1, 5, NET_H, NET_W, 1.0, &mut rng) })
            .collect(),
        person_id,
        camera_id,
    };
    let pair = PairBatch::new(seq(0, 1), seq(1, 2), false, 0, 1)?;

    let mut trainer = Trainer::new(cfg.clone(), 2)?;
    trainer.model.params.zero_grads();
    trainer.accumulate_pair_gradients(&pair, Phase::Eval)?;

    let margin = cfg.margin;
    let mut forward = |ps: &ParamSet| -> Result<f64> {
        let mut probe = Trainer::new(cfg.clone(), 2)?;
        for (_, p) in ps.iter() {
            let id = probe.model.params.id_by_name(&p.name).expect("same architecture");
            probe.model.params.values_mut(id).copy_from_slice(&p.values);
        }
        pair_loss_value(&probe.model, &pair, margin)
    };
    // Small step: the default can push a pooling window across an argmax tie.
    let check = GradCheckConfig { samples_per_param: 2, step: 5e-7, ..Default::default() };
    let report = grad_check(&mut trainer.model.params, &mut forward, &check)?;
    Ok(SuiteReport {
        name: "pair_loss",
        max_rel_err: report.max_rel_err,
        tolerance: report.tolerance,
        passed: report.passed,
    })
}
