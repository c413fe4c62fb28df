//! The `report` subcommand: summarize a run directory's CSVs to stdout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use alseg_core::metrics::{parse_curves, parse_phase_log};

use super::{CliError, CliResult, EXIT_OK};

/// Per-acquisition seed-averaged curve assembled from the emitted CSVs:
/// (labeled_count, mean test IOU) per phase, in phase order.
pub fn mean_curves(
    run_dir: &Path,
) -> Result<BTreeMap<String, Vec<(usize, f64)>>, CliError> {
    let curves = parse_curves(&read(run_dir.join("curves.csv"))?)?;
    let phase_log = parse_phase_log(&read(run_dir.join("phase_log.csv"))?)?;

    // labeled counts per (acquisition, phase) — identical across seeds
    let mut labeled: BTreeMap<(String, usize), usize> = BTreeMap::new();
    for row in &phase_log {
        labeled.insert((row.acquisition.clone(), row.phase), row.labeled_count);
    }

    // mean per (acquisition, phase) over seeds
    let mut sums: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
    for row in &curves {
        let e = sums.entry((row.acquisition.clone(), row.phase)).or_insert((0.0, 0));
        e.0 += row.test_iou;
        e.1 += 1;
    }

    let mut out: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for ((acq, phase), (sum, n)) in sums {
        let count = *labeled
            .get(&(acq.clone(), phase))
            .ok_or(CliError(format!("phase_log.csv has no row for {acq} phase {phase}")))?;
        out.entry(acq).or_default().push((count, sum / n as f64));
    }
    Ok(out)
}

/// Labeled count at the earliest phase whose mean IOU reaches
/// `fraction`·best, where best is that curve's own maximum.
pub fn labels_to_fraction_of_best(curve: &[(usize, f64)], fraction: f64) -> Option<usize> {
    let best = curve.iter().map(|&(_, iou)| iou).fold(f64::NEG_INFINITY, f64::max);
    let target = fraction * best;
    curve.iter().find(|&&(_, iou)| iou >= target).map(|&(count, _)| count)
}

fn read(path: PathBuf) -> Result<String, CliError> {
    std::fs::read_to_string(&path)
        .map_err(|e| CliError(format!("could not read {}: {e}", path.display())))
}

pub fn cmd_report(run_dir: PathBuf) -> CliResult {
    if !run_dir.is_dir() {
        return Err(CliError(format!("{} is not a directory", run_dir.display())));
    }
    if run_dir.join("curves.csv").exists() {
        report_al(&run_dir)
    } else if run_dir.join("leaderboard.csv").exists() {
        report_nas(&run_dir)
    } else {
        Err(CliError(format!(
            "{} holds neither curves.csv nor leaderboard.csv",
            run_dir.display()
        )))
    }
}

fn report_al(run_dir: &Path) -> CliResult {
    let curves = mean_curves(run_dir)?;
    println!("active-learning run: {}", run_dir.display());
    for (acq, curve) in &curves {
        let phases = curve.len();
        let (labels_used, _) = *curve.last().expect("curves have at least one phase");
        let best = curve.iter().map(|&(_, iou)| iou).fold(f64::NEG_INFINITY, f64::max);
        let at_98 = labels_to_fraction_of_best(curve, 0.98)
            .expect("the best point itself reaches 98% of best");
        println!(
            "  {acq}: {phases} phases, best IOU {best:.4}, labels used {labels_used}, \
             labels to reach 98% of best {at_98}"
        );
    }
    Ok(EXIT_OK)
}

fn report_nas(run_dir: &Path) -> CliResult {
    let body = read(run_dir.join("leaderboard.csv"))?;
    let mut lines = body.lines();
    match lines.next() {
        Some("rank,test_iou,batch,lr,encoder,decoder") => {}
        other => return Err(CliError(format!("unexpected leaderboard.csv header: {other:?}"))),
    }
    let rows: Vec<&str> = lines.collect();
    println!("search run: {}", run_dir.display());
    println!("  trials ranked: {}", rows.len());
    match rows.first() {
        Some(first) => {
            let fields: Vec<&str> = first.split(',').collect();
            if fields.len() != 6 {
                return Err(CliError("malformed leaderboard row".into()));
            }
            let iou: f64 =
                fields[1].parse().map_err(|_| CliError("malformed leaderboard IOU".into()))?;
            println!(
                "  best: IOU {:.4} (batch {}, lr {}, {} / {})",
                iou, fields[2], fields[3], fields[4], fields[5]
            );
        }
        None => println!("  best: (no trials)"),
    }
    Ok(EXIT_OK)
}
