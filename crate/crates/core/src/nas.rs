//! Random architecture search over a cartesian encoder/decoder/lr/batch
//! space: space definition, uniform candidate sampling (with or without
//! replacement), budgeted evaluation, and an IOU-ranked leaderboard.
//!
//! Encoder and decoder "names" are labels over the toy network family
//! (`enc-d4-c8`, `dec-w2-skipon`, ...). The label lists are plain strings,
//! so spaces of arbitrary cardinality can be described — candidates whose
//! labels don't parse simply fail evaluation and are recorded as failed
//! rather than dropped.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::active_learning::evaluate_mean_iou;
use crate::error::{Error, Result};
use crate::net::{build_model, train, DropoutPlacement, NetConfig};
use crate::rng::RngStream;
use crate::synthdata::Example;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub encoder_options: Vec<String>,
    pub decoder_options: Vec<String>,
    #[serde(default = "default_lr_options")]
    pub lr_options: Vec<f64>,
    #[serde(default = "default_batch_options")]
    pub batch_options: Vec<usize>,
}

pub fn default_lr_options() -> Vec<f64> {
    vec![1e-4, 4e-4, 1e-5, 5e-5, 1e-6, 4e-6]
}

pub fn default_batch_options() -> Vec<usize> {
    vec![4, 8, 16]
}

impl Default for SearchSpace {
    /// The full toy family: every depth/width encoder, every width/skip
    /// decoder, and the default learning-rate and batch-size sets.
    fn default() -> Self {
        let mut encoder_options = Vec::new();
        for d in 3..=5 {
            for c in [4, 8, 16] {
                encoder_options.push(format!("enc-d{d}-c{c}"));
            }
        }
        let mut decoder_options = Vec::new();
        for w in [1, 2] {
            for skip in ["on", "off"] {
                decoder_options.push(format!("dec-w{w}-skip{skip}"));
            }
        }
        SearchSpace {
            encoder_options,
            decoder_options,
            lr_options: default_lr_options(),
            batch_options: default_batch_options(),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_options.is_empty()
            || self.decoder_options.is_empty()
            || self.lr_options.is_empty()
            || self.batch_options.is_empty()
        {
            return Err(Error::Parameter("every option list must be non-empty".into()));
        }
        fn has_dup<T: PartialEq>(xs: &[T]) -> bool {
            xs.iter().enumerate().any(|(i, x)| xs[..i].contains(x))
        }
        if has_dup(&self.encoder_options)
            || has_dup(&self.decoder_options)
            || has_dup(&self.lr_options)
            || has_dup(&self.batch_options)
        {
            return Err(Error::Parameter("option lists must not contain duplicates".into()));
        }
        Ok(())
    }

    /// Mixed-radix decode of a flat index (encoder-major order).
    pub fn candidate_at(&self, index: usize) -> Result<Candidate> {
        if index >= space_size(self) {
            return Err(Error::Parameter(format!("candidate index {index} out of range")));
        }
        let b = self.batch_options.len();
        let l = self.lr_options.len();
        let d = self.decoder_options.len();
        let (rest, bi) = (index / b, index % b);
        let (rest, li) = (rest / l, rest % l);
        let (ei, di) = (rest / d, rest % d);
        Ok(Candidate {
            encoder: self.encoder_options[ei].clone(),
            decoder: self.decoder_options[di].clone(),
            lr: self.lr_options[li],
            batch_size: self.batch_options[bi],
        })
    }
}

/// Product of the option-list lengths.
pub fn space_size(space: &SearchSpace) -> usize {
    space.encoder_options.len()
        * space.decoder_options.len()
        * space.lr_options.len()
        * space.batch_options.len()
}

/// One point of the cartesian space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub encoder: String,
    pub decoder: String,
    pub lr: f64,
    pub batch_size: usize,
}

impl Candidate {
    /// Interpret the labels as a concrete net configuration (dropout off:
    /// search evaluates plain segmentation models). Labels outside the toy
    /// family are an error, which evaluation records as a failed trial.
    pub fn net_config(&self) -> Result<NetConfig> {
        let enc = self
            .encoder
            .strip_prefix("enc-d")
            .and_then(|rest| rest.split_once("-c"))
            .and_then(|(d, c)| Some((d.parse::<usize>().ok()?, c.parse::<usize>().ok()?)));
        let dec = self
            .decoder
            .strip_prefix("dec-w")
            .and_then(|rest| rest.split_once("-skip"))
            .and_then(|(w, s)| {
                let skip = match s {
                    "on" => true,
                    "off" => false,
                    _ => return None,
                };
                Some((w.parse::<usize>().ok()?, skip))
            });
        match (enc, dec) {
            (Some((depth, base)), Some((mult, skip))) => {
                let config = NetConfig {
                    encoder_depth: depth,
                    base_channels: base,
                    decoder_width_mult: mult,
                    dropout_placement: DropoutPlacement::None,
                    dropout_rate: 0.5,
                    num_classes: 2,
                    skip_connections: skip,
                };
                config.validate()?;
                Ok(config)
            }
            _ => Err(Error::Unsupported(format!(
                "labels {:?}/{:?} are outside the toy family",
                self.encoder, self.decoder
            ))),
        }
    }
}

/// Uniform draw over the space, or over the not-yet-drawn remainder when
/// `without_replacement` is set (`history` holds drawn flat indices).
pub fn sample_candidate(
    space: &SearchSpace,
    stream: &RngStream,
    without_replacement: bool,
    history: &BTreeSet<usize>,
) -> Result<(usize, Candidate)> {
    space.validate()?;
    let size = space_size(space);
    let mut rng = stream.rng();
    let index = if without_replacement {
        let remaining = size - history.len();
        if remaining == 0 {
            return Err(Error::Exhausted);
        }
        let j = rng.gen_range(0..remaining);
        // j-th index not yet in history, in ascending order
        let mut seen = 0;
        let mut found = None;
        for idx in 0..size {
            if history.contains(&idx) {
                continue;
            }
            if seen == j {
                found = Some(idx);
                break;
            }
            seen += 1;
        }
        found.expect("remaining count matches the scan")
    } else {
        rng.gen_range(0..size)
    };
    Ok((index, space.candidate_at(index)?))
}

/// Full training of one candidate followed by mean test IOU.
pub fn evaluate_candidate(
    candidate: &Candidate,
    train_set: &[Example],
    test_set: &[Example],
    epochs: usize,
    stream: &RngStream,
) -> Result<f64> {
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Data("candidate evaluation needs non-empty datasets".into()));
    }
    let config = candidate.net_config()?;
    let mut model = build_model(&config, &stream.with_tag("nas-init"))?;
    let refs: Vec<&Example> = train_set.iter().collect();
    train(
        &mut model,
        &refs,
        epochs,
        candidate.lr,
        candidate.batch_size,
        &stream.with_tag("nas-train"),
    )?;
    evaluate_mean_iou(&model, test_set)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub candidate: Candidate,
    pub test_iou: f64,
    pub failed: bool,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaderboardRow {
    pub rank: usize,
    pub test_iou: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub encoder: String,
    pub decoder: String,
}

/// Trials sorted by IOU (descending, earlier trial wins ties), with
/// standard competition ranking: IOUs equal to four decimals share a rank.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Leaderboard {
    pub rows: Vec<LeaderboardRow>,
}

pub fn build_leaderboard(trials: &[TrialRecord]) -> Leaderboard {
    let mut order: Vec<&TrialRecord> = trials.iter().collect();
    order.sort_by(|a, b| b.test_iou.total_cmp(&a.test_iou).then(a.trial.cmp(&b.trial)));
    let mut rows = Vec::with_capacity(order.len());
    let mut prev_key: Option<i64> = None;
    let mut prev_rank = 0;
    for (pos, t) in order.iter().enumerate() {
        let key = (t.test_iou * 10_000.0).round() as i64;
        let rank = match prev_key {
            Some(p) if p == key => prev_rank,
            _ => pos + 1,
        };
        prev_key = Some(key);
        prev_rank = rank;
        rows.push(LeaderboardRow {
            rank,
            test_iou: t.test_iou,
            batch_size: t.candidate.batch_size,
            lr: t.candidate.lr,
            encoder: t.candidate.encoder.clone(),
            decoder: t.candidate.decoder.clone(),
        });
    }
    Leaderboard { rows }
}

/// The search loop with an injectable evaluator (the real one trains a
/// model; tests pass closed-form scorers). Candidates are drawn
/// sequentially — trial t's draw depends only on the stream and the first t
/// draws, so a longer run extends a shorter one — and evaluated in
/// parallel. Evaluation errors become failed trials with IOU 0.
pub fn random_search_with<F>(
    space: &SearchSpace,
    n_trials: usize,
    without_replacement: bool,
    stream: &RngStream,
    evaluator: F,
) -> Result<(Vec<TrialRecord>, Leaderboard)>
where
    F: Fn(usize, &Candidate) -> Result<f64> + Sync,
{
    if n_trials < 1 {
        return Err(Error::Parameter("n_trials must be at least 1".into()));
    }
    space.validate()?;
    if without_replacement && n_trials > space_size(space) {
        return Err(Error::Exhausted);
    }
    let mut history = BTreeSet::new();
    let mut candidates = Vec::with_capacity(n_trials);
    for trial in 0..n_trials {
        let (index, candidate) =
            sample_candidate(space, &stream.child(trial as u64), without_replacement, &history)?;
        if without_replacement {
            history.insert(index);
        }
        candidates.push(candidate);
    }
    let trials: Vec<TrialRecord> = candidates
        .par_iter()
        .enumerate()
        .map(|(trial, candidate)| {
            let start = Instant::now();
            let (test_iou, failed) = match evaluator(trial, candidate) {
                Ok(iou) => (iou, false),
                Err(_) => (0.0, true),
            };
            TrialRecord {
                trial,
                candidate: candidate.clone(),
                test_iou,
                failed,
                wallclock_s: start.elapsed().as_secs_f64(),
            }
        })
        .collect();
    let leaderboard = build_leaderboard(&trials);
    Ok((trials, leaderboard))
}

/// Random search with real candidate training.
pub fn random_search(
    space: &SearchSpace,
    n_trials: usize,
    epochs_per_trial: usize,
    without_replacement: bool,
    train_set: &[Example],
    test_set: &[Example],
    stream: &RngStream,
) -> Result<(Vec<TrialRecord>, Leaderboard)> {
    random_search_with(space, n_trials, without_replacement, stream, |trial, candidate| {
        evaluate_candidate(candidate, train_set, test_set, epochs_per_trial, &stream.with_item(trial as u64))
    })
}
