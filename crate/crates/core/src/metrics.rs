//! IOU scoring, mask binarization, and report emission.
//!
//! All emitted files are byte-deterministic for fixed inputs: fixed column
//! order, 6-decimal fixed-point floats, LF line endings, and no
//! timestamps. Wallclock columns are therefore written as `0.000000` — the
//! measured values stay on the in-memory reports, but putting them in the
//! files would make reruns differ byte-for-byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::active_learning::CurveTable;
use crate::error::{Error, Result};
use crate::nas::{Leaderboard, TrialRecord};
use crate::tensor::Tensor;

/// Foreground intersection-over-union between two binary masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IouScore {
    pub value: f64,
    pub intersection: usize,
    pub union: usize,
}

/// Empty-vs-empty compares as 1.0 (perfect agreement) rather than NaN.
pub fn iou(pred: &[u8], truth: &[u8]) -> Result<IouScore> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "mask lengths differ: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.iter().chain(truth.iter()).any(|&v| v > 1) {
        return Err(Error::Data("masks must be strictly binary (0/1)".into()));
    }
    let mut intersection = 0;
    let mut union = 0;
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        if p == 1 && t == 1 {
            intersection += 1;
        }
        if p == 1 || t == 1 {
            union += 1;
        }
    }
    let value = if union == 0 { 1.0 } else { intersection as f64 / union as f64 };
    Ok(IouScore { value, intersection, union })
}

/// Per-pixel argmax over the two class channels of a 1×2×H×W logit (or
/// probability) map; ties go to class 0.
pub fn predict_mask(logits: &Tensor) -> Result<Vec<u8>> {
    let (n, c, h, w) = logits.dims4()?;
    if n != 1 {
        return Err(Error::Shape(format!("predict_mask expects a single image, got batch {n}")));
    }
    if c != 2 {
        return Err(Error::Unsupported(format!(
            "binarization is defined for exactly 2 classes, got {c}"
        )));
    }
    let data = logits.data();
    let plane = h * w;
    Ok((0..plane).map(|i| u8::from(data[plane + i] > data[i])).collect())
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

/// `phase_log.csv` body: one row per (run, phase).
pub fn render_phase_log(table: &CurveTable, pool_total: usize) -> Result<String> {
    if pool_total == 0 {
        return Err(Error::Parameter("pool_total must be positive".into()));
    }
    let mut out =
        String::from("phase,labeled_count,pct_of_pool,acquisition,seed,test_iou,train_loss_final,wallclock_s\n");
    for run in &table.runs {
        for r in &run.reports {
            let pct = r.labeled_count as f64 / pool_total as f64;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.phase,
                r.labeled_count,
                f6(pct),
                run.acquisition,
                run.seed,
                f6(r.test_iou),
                f6(r.train_loss_final),
                f6(0.0)
            )
            .expect("writing to a String cannot fail");
        }
    }
    Ok(out)
}

/// `curves.csv` body: the per-phase test IOU of every run, for external
/// plotting.
pub fn render_curves(table: &CurveTable) -> String {
    let mut out = String::from("phase,acquisition,seed,test_iou\n");
    for run in &table.runs {
        for r in &run.reports {
            writeln!(out, "{},{},{},{}", r.phase, run.acquisition, run.seed, f6(r.test_iou))
                .expect("writing to a String cannot fail");
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct QueriedPhase {
    phase: usize,
    queried_ids: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QueriedRun {
    acquisition: String,
    seed: u64,
    phases: Vec<QueriedPhase>,
}

/// `queried_ids.json` body: the full query ledger of every run.
pub fn render_queried_ids(table: &CurveTable) -> Result<String> {
    let runs: Vec<QueriedRun> = table
        .runs
        .iter()
        .map(|run| QueriedRun {
            acquisition: run.acquisition.to_string(),
            seed: run.seed,
            phases: run
                .reports
                .iter()
                .map(|r| QueriedPhase { phase: r.phase, queried_ids: r.queried_ids.clone() })
                .collect(),
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&runs)?;
    s.push('\n');
    Ok(s)
}

/// `trial_log.csv` body: one row per search trial, in trial order.
pub fn render_trial_log(trials: &[TrialRecord]) -> String {
    let mut out = String::from("trial,encoder,decoder,lr,batch,test_iou,failed,wallclock_s\n");
    for t in trials {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            t.trial,
            t.candidate.encoder,
            t.candidate.decoder,
            f6(t.candidate.lr),
            t.candidate.batch_size,
            f6(t.test_iou),
            t.failed,
            f6(0.0)
        )
        .expect("writing to a String cannot fail");
    }
    out
}

/// `leaderboard.csv` body: ranked rows, best first.
pub fn render_leaderboard(board: &Leaderboard) -> String {
    let mut out = String::from("rank,test_iou,batch,lr,encoder,decoder\n");
    for r in &board.rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.rank,
            f6(r.test_iou),
            r.batch_size,
            f6(r.lr),
            r.encoder,
            r.decoder
        )
        .expect("writing to a String cannot fail");
    }
    out
}

fn write_file(dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, body)?;
    Ok(path)
}

/// Write the active-learning report set (`phase_log.csv`, `curves.csv`,
/// `queried_ids.json`) into `out_dir`. Returns the paths written.
pub fn emit_al_reports(
    out_dir: &Path,
    table: &CurveTable,
    pool_total: usize,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    Ok(vec![
        write_file(out_dir, "phase_log.csv", &render_phase_log(table, pool_total)?)?,
        write_file(out_dir, "curves.csv", &render_curves(table))?,
        write_file(out_dir, "queried_ids.json", &render_queried_ids(table)?)?,
    ])
}

/// Write the search report set (`trial_log.csv`, `leaderboard.csv`) into
/// `out_dir`. Returns the paths written.
pub fn emit_nas_reports(
    out_dir: &Path,
    trials: &[TrialRecord],
    board: &Leaderboard,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    Ok(vec![
        write_file(out_dir, "trial_log.csv", &render_trial_log(trials))?,
        write_file(out_dir, "leaderboard.csv", &render_leaderboard(board))?,
    ])
}

/// Parsed row of a `curves.csv` body, for report summarization.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub phase: usize,
    pub acquisition: String,
    pub seed: u64,
    pub test_iou: f64,
}

/// Parsed row of a `phase_log.csv` body.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseLogRow {
    pub phase: usize,
    pub labeled_count: usize,
    pub pct_of_pool: f64,
    pub acquisition: String,
    pub seed: u64,
    pub test_iou: f64,
    pub train_loss_final: f64,
}

/// Parse a `phase_log.csv` body back into rows (header required).
pub fn parse_phase_log(body: &str) -> Result<Vec<PhaseLogRow>> {
    let mut lines = body.lines();
    match lines.next() {
        Some("phase,labeled_count,pct_of_pool,acquisition,seed,test_iou,train_loss_final,wallclock_s") => {}
        other => {
            return Err(Error::Data(format!("unexpected phase_log.csv header: {other:?}")));
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Data(format!(
                "phase_log.csv row {} has {} fields",
                i + 2,
                fields.len()
            )));
        }
        let parse_err =
            |what: &str| Error::Data(format!("phase_log.csv row {}: bad {what}", i + 2));
        rows.push(PhaseLogRow {
            phase: fields[0].parse().map_err(|_| parse_err("phase"))?,
            labeled_count: fields[1].parse().map_err(|_| parse_err("labeled_count"))?,
            pct_of_pool: fields[2].parse().map_err(|_| parse_err("pct_of_pool"))?,
            acquisition: fields[3].to_string(),
            seed: fields[4].parse().map_err(|_| parse_err("seed"))?,
            test_iou: fields[5].parse().map_err(|_| parse_err("test_iou"))?,
            train_loss_final: fields[6].parse().map_err(|_| parse_err("train_loss_final"))?,
        });
    }
    Ok(rows)
}

/// Parse a `curves.csv` body back into rows (header required).
pub fn parse_curves(body: &str) -> Result<Vec<CurveRow>> {
    let mut lines = body.lines();
    match lines.next() {
        Some("phase,acquisition,seed,test_iou") => {}
        other => {
            return Err(Error::Data(format!("unexpected curves.csv header: {other:?}")));
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Data(format!("curves.csv row {} has {} fields", i + 2, fields.len())));
        }
        let parse_err = |what: &str| Error::Data(format!("curves.csv row {}: bad {what}", i + 2));
        rows.push(CurveRow {
            phase: fields[0].parse().map_err(|_| parse_err("phase"))?,
            acquisition: fields[1].to_string(),
            seed: fields[2].parse().map_err(|_| parse_err("seed"))?,
            test_iou: fields[3].parse().map_err(|_| parse_err("test_iou"))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::Acquisition;
    use crate::active_learning::{CurveRun, PhaseReport};
    use crate::nas::{build_leaderboard, Candidate};
    use crate::rng::RngStream;
    use rand::Rng;

    #[test]
    fn iou_fixtures() {
        let ones = vec![1u8; 9];
        let zeros = vec![0u8; 9];
        assert_eq!(iou(&ones, &ones).unwrap().value, 1.0);
        let mut a = zeros.clone();
        let mut b = zeros.clone();
        a[0] = 1;
        b[5] = 1;
        assert_eq!(iou(&a, &b).unwrap().value, 0.0);

        // 4x4 grid: pred has 6 ones, truth has 4 ones, 3 overlap
        let mut pred = vec![0u8; 16];
        let mut truth = vec![0u8; 16];
        for i in 0..6 {
            pred[i] = 1;
        }
        for i in 3..7 {
            truth[i] = 1;
        }
        let score = iou(&pred, &truth).unwrap();
        assert_eq!(score.intersection, 3);
        assert_eq!(score.union, 7);
        assert!((score.value - 3.0 / 7.0).abs() < 1e-12);

        let empty = iou(&zeros, &zeros).unwrap();
        assert_eq!(empty.value, 1.0);
        assert_eq!((empty.intersection, empty.union), (0, 0));
    }

    #[test]
    fn iou_rejects_bad_inputs() {
        assert!(matches!(iou(&[0, 1], &[0, 1, 0]), Err(Error::Shape(_))));
        assert!(matches!(iou(&[0, 2], &[0, 1]), Err(Error::Data(_))));
        assert!(matches!(iou(&[0, 1], &[255, 1]), Err(Error::Data(_))));
    }

    fn random_mask(rng: &mut impl Rng, n: usize, p: f64) -> Vec<u8> {
        (0..n).map(|_| u8::from(rng.gen::<f64>() < p)).collect()
    }

    #[test]
    fn iou_is_symmetric_and_bounded() {
        let mut rng = RngStream::new(5, "iou-sym").rng();
        for _ in 0..50 {
            let a = random_mask(&mut rng, 64, 0.3);
            let b = random_mask(&mut rng, 64, 0.3);
            let ab = iou(&a, &b).unwrap();
            let ba = iou(&b, &a).unwrap();
            assert_eq!(ab, ba);
            assert!((0.0..=1.0).contains(&ab.value));
            assert_eq!(iou(&a, &a).unwrap().value, 1.0);
        }
    }

    #[test]
    fn adding_a_correct_pixel_never_decreases_iou() {
        let mut rng = RngStream::new(6, "iou-mono").rng();
        for _ in 0..50 {
            let mut pred = random_mask(&mut rng, 64, 0.25);
            let truth = random_mask(&mut rng, 64, 0.35);
            let before = iou(&pred, &truth).unwrap().value;
            if let Some(i) = (0..64).find(|&i| truth[i] == 1 && pred[i] == 0) {
                pred[i] = 1;
                let after = iou(&pred, &truth).unwrap();
                assert!(after.value >= before, "IOU fell from {before} to {}", after.value);
                // counting oracle: intersection and union both grew by one
                assert_eq!(
                    after.intersection,
                    pred.iter().zip(&truth).filter(|(&p, &t)| p == 1 && t == 1).count()
                );
            }
        }
    }

    #[test]
    fn predict_mask_fixtures() {
        let mut logits = Tensor::zeros(vec![1, 2, 2, 2]);
        // class 1 strictly greater everywhere
        for i in 4..8 {
            logits.data_mut()[i] = 1.0;
        }
        assert_eq!(predict_mask(&logits).unwrap(), vec![1, 1, 1, 1]);

        // equal logits: ties go to class 0
        let flat = Tensor::full(vec![1, 2, 2, 2], 0.7);
        assert_eq!(predict_mask(&flat).unwrap(), vec![0, 0, 0, 0]);

        // mixed margins match an elementwise comparison oracle
        let mut rng = RngStream::new(9, "margins").rng();
        let mut mixed = Tensor::zeros(vec![1, 2, 4, 4]);
        for v in mixed.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let data = mixed.data().to_vec();
        let expected: Vec<u8> = (0..16).map(|i| u8::from(data[16 + i] > data[i])).collect();
        assert_eq!(predict_mask(&mixed).unwrap(), expected);

        assert!(matches!(
            predict_mask(&Tensor::zeros(vec![1, 3, 2, 2])),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(
            predict_mask(&Tensor::zeros(vec![2, 2, 2, 2])),
            Err(Error::Shape(_))
        ));
    }

    fn fixture_table() -> CurveTable {
        CurveTable {
            runs: vec![CurveRun {
                acquisition: Acquisition::Mfe,
                seed: 17,
                reports: vec![
                    PhaseReport {
                        phase: 1,
                        labeled_count: 40,
                        test_iou: 0.5,
                        train_loss_final: 0.693147,
                        queried_ids: vec![3, 9],
                        wallclock_s: 1.25,
                    },
                    PhaseReport {
                        phase: 2,
                        labeled_count: 90,
                        test_iou: 0.8123,
                        train_loss_final: 0.4,
                        queried_ids: vec![1, 7],
                        wallclock_s: 2.5,
                    },
                ],
            }],
        }
    }

    #[test]
    fn phase_log_renders_exactly() {
        // labeled_count 90 over a 2700-image pool: the 3.3% row
        let body = render_phase_log(&fixture_table(), 2700).unwrap();
        let expected = "\
phase,labeled_count,pct_of_pool,acquisition,seed,test_iou,train_loss_final,wallclock_s
1,40,0.014815,MFE,17,0.500000,0.693147,0.000000
2,90,0.033333,MFE,17,0.812300,0.400000,0.000000
";
        assert_eq!(body, expected);
        assert!(render_phase_log(&fixture_table(), 0).is_err());
    }

    #[test]
    fn curves_render_and_parse_back() {
        let body = render_curves(&fixture_table());
        assert_eq!(
            body,
            "phase,acquisition,seed,test_iou\n1,MFE,17,0.500000\n2,MFE,17,0.812300\n"
        );
        let rows = parse_curves(&body).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].phase, 2);
        assert_eq!(rows[1].acquisition, "MFE");
        assert_eq!(rows[1].seed, 17);
        assert!((rows[1].test_iou - 0.8123).abs() < 1e-9);
        assert!(parse_curves("nope\n1,MFE,17,0.5\n").is_err());
        assert!(parse_curves("phase,acquisition,seed,test_iou\n1,MFE\n").is_err());
    }

    #[test]
    fn phase_log_parses_back() {
        let body = render_phase_log(&fixture_table(), 2700).unwrap();
        let rows = parse_phase_log(&body).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].labeled_count, 40);
        assert_eq!(rows[1].labeled_count, 90);
        assert!((rows[1].pct_of_pool - 0.033333).abs() < 1e-9);
        assert_eq!(rows[1].acquisition, "MFE");
        assert!((rows[1].test_iou - 0.8123).abs() < 1e-9);
        assert!(parse_phase_log("bad header\n").is_err());
        assert!(parse_phase_log(
            "phase,labeled_count,pct_of_pool,acquisition,seed,test_iou,train_loss_final,wallclock_s\n1,2\n"
        )
        .is_err());
    }

    #[test]
    fn empty_inputs_render_header_only() {
        let empty = CurveTable { runs: vec![] };
        assert_eq!(
            render_phase_log(&empty, 100).unwrap(),
            "phase,labeled_count,pct_of_pool,acquisition,seed,test_iou,train_loss_final,wallclock_s\n"
        );
        assert_eq!(render_curves(&empty), "phase,acquisition,seed,test_iou\n");
        assert_eq!(render_trial_log(&[]), "trial,encoder,decoder,lr,batch,test_iou,failed,wallclock_s\n");
        assert_eq!(
            render_leaderboard(&Leaderboard::default()),
            "rank,test_iou,batch,lr,encoder,decoder\n"
        );
    }

    #[test]
    fn queried_ledger_round_trips() {
        let body = render_queried_ids(&fixture_table()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert_eq!(v[0]["acquisition"], "MFE");
        assert_eq!(v[0]["seed"], 17);
        assert_eq!(v[0]["phases"][0]["queried_ids"], serde_json::json!([3, 9]));
        assert_eq!(v[0]["phases"][1]["phase"], 2);
    }

    #[test]
    fn trial_log_and_leaderboard_render_table_style_rows() {
        let trial = TrialRecord {
            trial: 0,
            candidate: Candidate {
                encoder: "timm-skresnet34".into(),
                decoder: "Linknet".into(),
                lr: 4e-5,
                batch_size: 4,
            },
            test_iou: 0.87,
            failed: false,
            wallclock_s: 3.7,
        };
        assert_eq!(
            render_trial_log(&[trial.clone()]),
            "trial,encoder,decoder,lr,batch,test_iou,failed,wallclock_s\n\
             0,timm-skresnet34,Linknet,0.000040,4,0.870000,false,0.000000\n"
        );
        let board = build_leaderboard(&[trial]);
        assert_eq!(
            render_leaderboard(&board),
            "rank,test_iou,batch,lr,encoder,decoder\n1,0.870000,4,0.000040,timm-skresnet34,Linknet\n"
        );
    }

    #[test]
    fn emission_is_byte_deterministic() {
        let table = fixture_table();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let paths_a = emit_al_reports(dir_a.path(), &table, 2700).unwrap();
        let paths_b = emit_al_reports(dir_b.path(), &table, 2700).unwrap();
        assert_eq!(paths_a.len(), 3);
        for (a, b) in paths_a.iter().zip(&paths_b) {
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        }
        let trials = vec![TrialRecord {
            trial: 0,
            candidate: Candidate {
                encoder: "enc-d3-c4".into(),
                decoder: "dec-w1-skipon".into(),
                lr: 1e-4,
                batch_size: 8,
            },
            test_iou: 0.5,
            failed: false,
            wallclock_s: 0.9,
        }];
        let board = build_leaderboard(&trials);
        let n1 = emit_nas_reports(dir_a.path(), &trials, &board).unwrap();
        let n2 = emit_nas_reports(dir_b.path(), &trials, &board).unwrap();
        for (a, b) in n1.iter().zip(&n2) {
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        }
    }
}
