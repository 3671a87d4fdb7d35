//! Command bodies and plain-text report emission.
//!
//! Every command writes into one output directory and can be re-run with the
//! same inputs: training resumes from the newest checkpoint, and finished
//! runs are left as they are.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::metrics::write_summary_csv;
use crate::prompt_pool::write_heatmap_csv;
use crate::trainer::{prepare, Evaluation, Prepared, Run, RunLog, TrainState, MANIFEST_FILE, RUN_LOG_FILE};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const CONFIG_FILE: &str = "config.toml";
pub const CURATION_FILE: &str = "curation.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const HEATMAP_FILE: &str = "heatmap.csv";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_DIR: &str = "report";

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Manifest plus a per-task original-vs-sampled size table.
pub fn curate(config: &Config, out: &Path) -> Result<Prepared> {
    let data = prepare(config)?;
    write(&out.join(CONFIG_FILE), &config.to_toml()?)?;
    write(&out.join(MANIFEST_FILE), &data.manifest.to_json()?)?;
    write(&out.join(CURATION_FILE), &curation_table(&data))?;
    Ok(data)
}

pub fn curation_table(data: &Prepared) -> String {
    let m = &data.manifest;
    let mut text = format!("# alpha={:?} head_budget={} seed={}\n", m.alpha, m.head_budget, m.seed);
    text.push_str("task_id,split,original_size,sampled_size,val_size\n");
    for task in m.all_task_ids() {
        let split = if m.is_seen(task) { "seen" } else { "unseen" };
        let val = m.val_offsets.get(task).map_or(0, Vec::len);
        let _ = writeln!(
            text,
            "{task},{split},{},{},{val}",
            m.original_train_sizes.get(task).copied().unwrap_or(0),
            m.sampled_train_sizes.get(task).copied().unwrap_or(0)
        );
    }
    text
}

/// Opens a run directory, resuming from its newest checkpoint when present.
pub fn open_run(config: &Config, out: &Path) -> Result<(Run, TrainState)> {
    let data = curate(config, out)?;
    let run = Run::new(data, Some(out))?;
    let state = match run.load_latest()? {
        Some(state) => state,
        None => run.init_state()?,
    };
    Ok((run, state))
}

pub fn pretrain_rankers(config: &Config, out: &Path) -> Result<TrainState> {
    let (mut run, mut state) = open_run(config, out)?;
    run.run_stage1(&mut state)?;
    run.write_run_log(&state)?;
    Ok(state)
}

pub fn train(config: &Config, out: &Path) -> Result<TrainState> {
    let (mut run, mut state) = open_run(config, out)?;
    run.train(&mut state, None)?;
    Ok(state)
}

/// Evaluates the newest checkpoint and writes summary, heat map and predictions.
pub fn evaluate(config: &Config, out: &Path) -> Result<Evaluation> {
    let data = prepare(config)?;
    let mut run = Run::new(data, Some(out))?;
    let state = run
        .load_latest()?
        .ok_or_else(|| Error::precondition(format!("no checkpoint under {}; run train first", out.display())))?;
    let eval = run.evaluate_suite(&state)?;
    write_evaluation(out, &run.data, &eval)?;
    Ok(eval)
}

pub fn write_evaluation(out: &Path, data: &Prepared, eval: &Evaluation) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_summary_csv(&out.join(SUMMARY_FILE), &eval.summary, &data.manifest, &data.metrics)?;
    write_heatmap_csv(&out.join(HEATMAP_FILE), &eval.frequency, data.config.pool.size)?;
    let mut lines = String::new();
    for p in &eval.predictions {
        lines.push_str(&serde_json::to_string(p)?);
        lines.push('\n');
    }
    write(&out.join(PREDICTIONS_FILE), &lines)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReportOutcome {
    pub written: Vec<PathBuf>,
    /// Parts of the bundle that could not be produced, with the reason.
    pub gaps: Vec<String>,
}

pub fn scoreboard_curve(log: &RunLog) -> String {
    let mut text = String::from("epoch,v_r1,v_r2,v_f,active_edges\n");
    for b in &log.scoreboards {
        let _ = writeln!(text, "{},{},{},{},{}", b.epoch, b.v_r1, b.v_r2, b.v_f, b.active_edges.join(" "));
    }
    text
}

pub fn loss_curve(log: &RunLog) -> String {
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut text = String::from("stage,epoch,step,loss_m,loss_f,loss_lm,loss_mkd\n");
    for s in &log.steps {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{}",
            s.stage,
            s.epoch,
            s.step,
            fmt(s.loss_m),
            fmt(s.loss_f),
            fmt(s.loss_lm),
            fmt(s.loss_mkd)
        );
    }
    text
}

pub fn heldout_curve(log: &RunLog) -> String {
    let mut text = String::from("epoch,kl_lm_r1\n");
    for (e, kl) in log.heldout_kl.iter().enumerate() {
        let _ = writeln!(text, "{e},{kl}");
    }
    text
}

/// Collects curves and tables of a run directory into `run/report/`. Missing
/// inputs become entries of `gaps.txt` instead of errors.
pub fn report(run_dir: &Path) -> Result<ReportOutcome> {
    if !run_dir.is_dir() {
        return Err(Error::invalid(format!("{} is not a run directory", run_dir.display())));
    }
    let dest = run_dir.join(REPORT_DIR);
    std::fs::create_dir_all(&dest).map_err(|e| Error::io(&dest, e))?;
    let mut outcome = ReportOutcome::default();
    let log_path = run_dir.join(RUN_LOG_FILE);
    match std::fs::read_to_string(&log_path) {
        Ok(text) => {
            let log: RunLog = serde_json::from_str(&text)?;
            for (name, body) in [
                ("scoreboard.csv", scoreboard_curve(&log)),
                ("losses.csv", loss_curve(&log)),
                ("heldout_kl.csv", heldout_curve(&log)),
            ] {
                write(&dest.join(name), &body)?;
                outcome.written.push(dest.join(name));
            }
            if log.scoreboards.is_empty() {
                outcome.gaps.push("scoreboard.csv: no Stage II epoch has finished".into());
            }
        }
        Err(_) => outcome.gaps.push(format!("{RUN_LOG_FILE}: missing, no training has run")),
    }
    for name in [CURATION_FILE, SUMMARY_FILE, HEATMAP_FILE] {
        let src = run_dir.join(name);
        if src.exists() {
            std::fs::copy(&src, dest.join(name)).map_err(|e| Error::io(&src, e))?;
            outcome.written.push(dest.join(name));
        } else {
            outcome.gaps.push(format!("{name}: missing"));
        }
    }
    let sweep = run_dir.join(SWEEP_FILE);
    if sweep.exists() {
        std::fs::copy(&sweep, dest.join(SWEEP_FILE)).map_err(|e| Error::io(&sweep, e))?;
        outcome.written.push(dest.join(SWEEP_FILE));
    }
    let mut gaps = outcome.gaps.join("\n");
    if !gaps.is_empty() {
        gaps.push('\n');
    }
    write(&dest.join("gaps.txt"), &gaps)?;
    Ok(outcome)
}

pub const SWEEP_FILE: &str = "sweep.csv";

pub fn sweep_cell_name(alpha: f64, unseen: usize) -> String {
    format!("alpha-{alpha:?}_unseen-{unseen}")
}

/// Trains and evaluates one run per `(alpha, unseen count)` cell, each in its
/// own subdirectory, and writes the grid of summaries.
pub fn sweep(config: &Config, out: &Path) -> Result<Vec<(f64, usize, Evaluation)>> {
    let mut cells = Vec::new();
    let mut grid = String::from("alpha,unseen_count,a_seen,a_unseen,head,tail\n");
    for &alpha in &config.eval.sweep_alphas {
        for &unseen in &config.eval.sweep_unseen_counts {
            let mut cfg = config.clone();
            cfg.curation.alpha = alpha;
            cfg.data.unseen_count = unseen;
            cfg.data.unseen_tasks.clear();
            let dir = out.join(sweep_cell_name(alpha, unseen));
            log::info!("sweep cell {}", dir.display());
            let (mut run, mut state) = open_run(&cfg, &dir)?;
            run.train(&mut state, None)?;
            let eval = run.evaluate_suite(&state)?;
            write_evaluation(&dir, &run.data, &eval)?;
            let s = &eval.summary;
            let unseen_avg = s.a_unseen.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(grid, "{alpha:?},{unseen},{},{unseen_avg},{},{}", s.a_seen, s.head_at_m, s.tail_at_n);
            cells.push((alpha, unseen, eval));
        }
    }
    write(&out.join(SWEEP_FILE), &grid)?;
    Ok(cells)
}
