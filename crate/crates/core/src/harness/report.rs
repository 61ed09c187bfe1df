//! CSV and summary writers.
//!
//! Column orders are part of the output contract; new columns go at the end.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::run::{mean_std, AblationOutput, ExperimentOutput, OcoOutput};

pub const RESULTS_COLUMNS: &str = "seed,tuner,round,target,test_error,val_score,best_arm,chosen,rounds_executed,rounds_forfeited,failed_arms,theta_entropy,config";
pub const ONLINE_COLUMNS: &str = "seed,tuner,round,best_test_error,arms_alive,theta_entropy";
pub const TRACE_COLUMNS: &str = "seed,tuner,arm,round,score,target,lambda,eta,grad_norm,theta_entropy,theta";
pub const ABLATION_COLUMNS: &str = "seed,tuner,round,epsilon,schedule,discount,test_error,val_score,rounds_executed,rounds_forfeited,theta_entropy";
pub const OCO_COLUMNS: &str = "seed,tuner,tau,round,k,arm,regret,avg_regret,similarity,theta_entropy";
pub const OCO_SUMMARY_COLUMNS: &str = "tuner,tau,k,seeds,mean_avg_regret,std_avg_regret,mean_similarity,floor";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn results_csv(out: &ExperimentOutput) -> String {
    let mut s = format!("{RESULTS_COLUMNS}\n");
    for r in &out.results {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.seed,
            r.tuner,
            r.rounds,
            r.target.as_str(),
            r.test_error,
            r.val_score,
            r.best_arm,
            r.chosen,
            r.rounds_executed,
            r.rounds_forfeited,
            r.failed_arms,
            opt(r.theta_entropy),
            r.config
        )
        .unwrap();
    }
    s
}

pub fn online_csv(out: &ExperimentOutput) -> String {
    let mut s = format!("{ONLINE_COLUMNS}\n");
    for o in &out.online {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            o.seed,
            o.tuner,
            o.round,
            o.best_test_error,
            o.arms_alive,
            opt(o.theta_entropy)
        )
        .unwrap();
    }
    s
}

pub fn trace_csv(out: &ExperimentOutput) -> String {
    let mut s = format!("{TRACE_COLUMNS}\n");
    for t in &out.trace {
        let r = &t.record;
        let tel = r.telemetry;
        let theta = r
            .theta
            .as_ref()
            .map(|th| th.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(";"))
            .unwrap_or_default();
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            t.seed,
            t.tuner,
            r.arm,
            r.round,
            r.score,
            r.target.as_str(),
            opt(tel.map(|x| x.lambda)),
            opt(tel.map(|x| x.eta)),
            opt(tel.map(|x| x.grad_norm)),
            opt(r.theta.as_deref().map(crate::tuners::fedex::entropy)),
            theta
        )
        .unwrap();
    }
    s
}

/// Mean and standard deviation of the test error per tuner, in first-seen order.
pub fn summary_table(out: &ExperimentOutput) -> String {
    let mut tuners: Vec<&str> = Vec::new();
    for r in &out.results {
        if !tuners.contains(&r.tuner.as_str()) {
            tuners.push(&r.tuner);
        }
    }
    let width = tuners.iter().map(|t| t.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<width$}  seeds  test_error (mean +- std)  rounds\n", "tuner");
    for t in tuners {
        let rows: Vec<_> = out.results.iter().filter(|r| r.tuner == t).collect();
        let errs: Vec<f64> = rows.iter().map(|r| r.test_error).collect();
        let (m, sd) = mean_std(&errs);
        let rounds = rows.iter().map(|r| r.rounds).max().unwrap_or(0);
        writeln!(s, "{t:<width$}  {:>5}  {m:>10.4} +- {sd:<10.4}  {rounds:>6}", rows.len()).unwrap();
    }
    s
}

pub fn ablation_csv(ab: &AblationOutput) -> String {
    let mut s = format!("{ABLATION_COLUMNS}\n");
    for r in &ab.output.results {
        let v = ab
            .variants
            .iter()
            .find(|v| v.variant.label == r.tuner)
            .expect("every row comes from a variant");
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.seed,
            r.tuner,
            r.rounds,
            opt(v.epsilon),
            opt(v.schedule.map(|x| x.as_str())),
            opt(v.discount),
            r.test_error,
            r.val_score,
            r.rounds_executed,
            r.rounds_forfeited,
            opt(r.theta_entropy)
        )
        .unwrap();
    }
    s
}

pub fn oco_csv(out: &OcoOutput) -> String {
    let mut s = format!("{OCO_COLUMNS}\n");
    for run in &out.runs {
        for r in &run.records {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                run.seed,
                run.mode.as_str(),
                run.tau,
                r.task,
                run.k,
                opt(r.arm),
                r.regret,
                r.avg_regret,
                r.similarity,
                r.theta_entropy
            )
            .unwrap();
        }
    }
    s
}

pub fn oco_summary_csv(out: &OcoOutput) -> String {
    let mut s = format!("{OCO_SUMMARY_COLUMNS}\n");
    for r in &out.summary {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.mode.as_str(),
            r.tau,
            r.k,
            r.seeds,
            r.mean_avg_regret,
            r.std_avg_regret,
            r.mean_similarity,
            r.floor
        )
        .unwrap();
    }
    s
}

pub fn oco_summary_text(out: &OcoOutput) -> String {
    let mut s = String::from("mode              tau     k  mean_avg_regret  std       similarity  floor\n");
    for r in &out.summary {
        writeln!(
            s,
            "{:<16}  {:>5}  {:>3}  {:>15.6}  {:<8.4}  {:>10.4}  {:.4}",
            r.mode.as_str(),
            r.tau,
            r.k,
            r.mean_avg_regret,
            r.std_avg_regret,
            r.mean_similarity,
            r.floor
        )
        .unwrap();
    }
    s.push('\n');
    for (mode, slope, resid) in &out.slopes {
        let resid = resid.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        writeln!(s, "{}: log-log slope {slope:.4}, floor-subtracted slope {resid}", mode.as_str()).unwrap();
    }
    s
}

fn write(dir: &Path, name: &str, body: &str) -> std::io::Result<()> {
    fs::write(dir.join(name), body)
}

pub fn write_experiment(dir: &Path, out: &ExperimentOutput, trace: bool) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    write(dir, "results.csv", &results_csv(out))?;
    write(dir, "online.csv", &online_csv(out))?;
    write(dir, "summary.txt", &summary_table(out))?;
    if trace {
        write(dir, "trace.csv", &trace_csv(out))?;
    }
    Ok(())
}

pub fn write_ablation(dir: &Path, ab: &AblationOutput, trace: bool) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    write(dir, "ablation.csv", &ablation_csv(ab))?;
    write(dir, "online.csv", &online_csv(&ab.output))?;
    write(dir, "summary.txt", &summary_table(&ab.output))?;
    if trace {
        write(dir, "trace.csv", &trace_csv(&ab.output))?;
    }
    Ok(())
}

pub fn write_oco(dir: &Path, out: &OcoOutput) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    write(dir, "oco.csv", &oco_csv(out))?;
    write(dir, "oco_summary.csv", &oco_summary_csv(out))?;
    write(dir, "oco_summary.txt", &oco_summary_text(out))
}
