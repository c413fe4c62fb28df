//! Uncertainty acquisition: per-pixel maps over a stack of Monte-Carlo
//! probability masks, per-image scalar scores, and top-K selection.
//!
//! All entropies use the natural logarithm with the convention 0·ln 0 = 0;
//! probabilities below 1e-12 are treated as exact zeros so that saturated
//! softmax outputs cannot produce infinities while one-hot fixtures still
//! come out exactly 0.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// T x C x H x W per-pixel class distributions from T stochastic passes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMaskStack {
    t: usize,
    c: usize,
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl ProbabilityMaskStack {
    /// Build a stack, enforcing the range and normalization invariants
    /// (channel sums within 1e-9 of 1).
    pub fn new(t: usize, c: usize, h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        let stack = Self::new_unchecked(t, c, h, w, values)?;
        stack.validate_normalization(1e-9)?;
        Ok(stack)
    }

    /// Build a stack checking only shape and value range, not normalization.
    /// Exists so tests can construct deliberately broken stacks; the scoring
    /// ops re-validate at a 1e-6 tolerance before computing anything.
    pub fn new_unchecked(t: usize, c: usize, h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if t == 0 || c < 2 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("invalid stack dims T={t} C={c} H={h} W={w}")));
        }
        if values.len() != t * c * h * w {
            return Err(Error::Shape(format!(
                "stack claims {t}x{c}x{h}x{w} but holds {} values",
                values.len()
            )));
        }
        if !values.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Data("stack probabilities must lie in [0,1]".into()));
        }
        Ok(Self { t, c, h, w, values })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.t, self.c, self.h, self.w)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn prob(&self, t: usize, c: usize, y: usize, x: usize) -> f64 {
        self.values[((t * self.c + c) * self.h + y) * self.w + x]
    }

    fn validate_normalization(&self, tol: f64) -> Result<()> {
        for t in 0..self.t {
            for p in 0..self.h * self.w {
                let sum: f64 = (0..self.c)
                    .map(|ch| self.values[(t * self.c + ch) * self.h * self.w + p])
                    .sum();
                if (sum - 1.0).abs() > tol {
                    return Err(Error::Data(format!(
                        "sample {t} pixel {p}: class probabilities sum to {sum}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The five query functions. Serialized names match [`Acquisition::parse`]
/// and `Display`, so config files and CSVs agree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Acquisition {
    /// Category-first entropy: mean over samples of each sample's entropy.
    #[serde(rename = "CFE")]
    Cfe,
    /// Mean-first entropy: entropy of the sample-averaged distribution.
    #[serde(rename = "MFE")]
    Mfe,
    /// Mutual information: |MFE - CFE|.
    #[serde(rename = "MI")]
    Mi,
    /// Population standard deviation of the foreground probability.
    #[serde(rename = "STD")]
    Std,
    /// Uniform draw, independent of mask content.
    Random,
}

impl Acquisition {
    pub const ALL: [Acquisition; 5] =
        [Acquisition::Cfe, Acquisition::Mfe, Acquisition::Mi, Acquisition::Std, Acquisition::Random];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CFE" => Ok(Acquisition::Cfe),
            "MFE" => Ok(Acquisition::Mfe),
            "MI" => Ok(Acquisition::Mi),
            "STD" => Ok(Acquisition::Std),
            "RANDOM" => Ok(Acquisition::Random),
            other => Err(Error::Parameter(format!(
                "unknown acquisition {other:?} (expected CFE, MFE, MI, STD, or Random)"
            ))),
        }
    }
}

impl fmt::Display for Acquisition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Acquisition::Cfe => "CFE",
            Acquisition::Mfe => "MFE",
            Acquisition::Mi => "MI",
            Acquisition::Std => "STD",
            Acquisition::Random => "Random",
        };
        f.write_str(s)
    }
}

/// Per-image scalar score under one acquisition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyScore {
    pub image_id: usize,
    pub acquisition: Acquisition,
    pub value: f64,
}

/// x ln x with 0 ln 0 = 0; inputs below 1e-12 count as zero.
#[inline]
fn plogp(p: f64) -> f64 {
    if p < 1e-12 {
        0.0
    } else {
        p * p.ln()
    }
}

/// Entropy of one sample's distribution at one pixel, channels in order.
/// Both entropy ops accumulate through this so that a degenerate stack —
/// all T samples bitwise equal — makes MFE and CFE bitwise equal too
/// (and MI exactly zero).
#[inline]
fn pixel_entropy(probs: impl Iterator<Item = f64>) -> f64 {
    let mut h = 0.0;
    for p in probs {
        h -= plogp(p);
    }
    h
}

/// Mean of T samples anchored at the first: x0 + (1/T)·Σ(x_t − x0). For
/// identical samples every delta is exactly zero, so the mean is exactly
/// x0 — the plain Σx_t/T form drifts by an ulp and would break the exact
/// MI == 0 and STD == 0 identities.
#[inline]
fn anchored_mean(first: f64, rest: impl Iterator<Item = f64>, inv_t: f64) -> f64 {
    let delta_sum: f64 = rest.map(|x| x - first).sum();
    first + delta_sum * inv_t
}

/// H_category: per pixel, -(1/T) sum_t sum_c p ln p.
pub fn category_first_entropy(stack: &ProbabilityMaskStack) -> Result<Vec<f64>> {
    stack.validate_normalization(1e-6)?;
    let (t, c, h, w) = stack.dims();
    let plane = h * w;
    let inv_t = 1.0 / t as f64;
    let mut map = vec![0.0; plane];
    for (p, m) in map.iter_mut().enumerate() {
        let sample_entropy =
            |ti: usize| pixel_entropy((0..c).map(|ch| stack.values()[(ti * c + ch) * plane + p]));
        *m = anchored_mean(sample_entropy(0), (1..t).map(sample_entropy), inv_t);
    }
    Ok(map)
}

/// H_mean: per pixel, entropy of the T-averaged distribution.
pub fn mean_first_entropy(stack: &ProbabilityMaskStack) -> Result<Vec<f64>> {
    stack.validate_normalization(1e-6)?;
    let (t, c, h, w) = stack.dims();
    let plane = h * w;
    let inv_t = 1.0 / t as f64;
    let mut map = vec![0.0; plane];
    for (p, m) in map.iter_mut().enumerate() {
        *m = pixel_entropy((0..c).map(|ch| {
            let at = |ti: usize| stack.values()[(ti * c + ch) * plane + p];
            // rounding can push the anchored mean an ulp outside [0,1];
            // clamp is the identity for in-range values, so exactness holds
            anchored_mean(at(0), (1..t).map(at), inv_t).clamp(0.0, 1.0)
        }));
    }
    Ok(map)
}

/// |H_mean - H_category| per pixel.
pub fn mutual_information(stack: &ProbabilityMaskStack) -> Result<Vec<f64>> {
    let cfe = category_first_entropy(stack)?;
    let mfe = mean_first_entropy(stack)?;
    Ok(mfe.iter().zip(cfe.iter()).map(|(m, c)| (m - c).abs()).collect())
}

/// Population (1/T) standard deviation across samples: class-1 probability
/// for C=2, summed per-class deviations for C>2.
pub fn std_uncertainty(stack: &ProbabilityMaskStack) -> Result<Vec<f64>> {
    stack.validate_normalization(1e-6)?;
    let (t, c, h, w) = stack.dims();
    let plane = h * w;
    let classes: Vec<usize> = if c == 2 { vec![1] } else { (0..c).collect() };
    let inv_t = 1.0 / t as f64;
    let mut map = vec![0.0; plane];
    for (p, m) in map.iter_mut().enumerate() {
        for &ch in &classes {
            let at = |ti: usize| stack.values()[(ti * c + ch) * plane + p];
            // variance over deltas from the first sample: identical samples
            // give all-zero deltas and an exact zero deviation
            let mean_delta: f64 = (1..t).map(|ti| at(ti) - at(0)).sum::<f64>() * inv_t;
            let var: f64 = (0..t)
                .map(|ti| {
                    let d = (at(ti) - at(0)) - mean_delta;
                    d * d
                })
                .sum::<f64>()
                * inv_t;
            *m += var.sqrt();
        }
    }
    Ok(map)
}

/// Uniform score in [0,1) keyed by (stream's seed, "acq-random", phase,
/// image_id); independent of any mask content.
pub fn random_score(image_id: usize, phase: u64, stream: &RngStream) -> f64 {
    stream
        .with_tag("acq-random")
        .with_phase(phase)
        .with_item(image_id as u64)
        .rng()
        .gen::<f64>()
}

/// Sum the per-pixel map into the image's scalar score. Random has no map;
/// use [`random_score`] for it.
pub fn score_image(
    stack: &ProbabilityMaskStack,
    acquisition: Acquisition,
    image_id: usize,
) -> Result<UncertaintyScore> {
    let map = match acquisition {
        Acquisition::Cfe => category_first_entropy(stack)?,
        Acquisition::Mfe => mean_first_entropy(stack)?,
        Acquisition::Mi => mutual_information(stack)?,
        Acquisition::Std => std_uncertainty(stack)?,
        Acquisition::Random => {
            return Err(Error::Parameter(
                "Random bypasses the uncertainty map; score it with random_score".into(),
            ))
        }
    };
    Ok(UncertaintyScore { image_id, acquisition, value: map.iter().sum() })
}

/// Ids of the k largest scores, descending, ties broken by ascending id.
/// k beyond the pool size is clamped (visible in the result's length).
pub fn select_top_k(scores: &[UncertaintyScore], k: usize) -> Result<Vec<usize>> {
    if let Some(first) = scores.first() {
        if scores.iter().any(|s| s.acquisition != first.acquisition) {
            return Err(Error::Parameter("scores mix acquisition types".into()));
        }
    }
    if scores.iter().any(|s| !s.value.is_finite() || s.value < 0.0) {
        return Err(Error::Data("scores must be finite and nonnegative".into()));
    }
    let mut order: Vec<&UncertaintyScore> = scores.iter().collect();
    order.sort_by(|a, b| {
        b.value.total_cmp(&a.value).then_with(|| a.image_id.cmp(&b.image_id))
    });
    Ok(order.into_iter().take(k.min(scores.len())).map(|s| s.image_id).collect())
}

// ---- interchange files -----------------------------------------------------

#[derive(Serialize, Deserialize)]
struct StackHeader {
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "C")]
    c: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "W")]
    w: usize,
}

/// Write `<name>.json` {T,C,H,W} plus `<name>.bin` little-endian f64 payload.
pub fn save_stack(dir: &Path, name: &str, stack: &ProbabilityMaskStack) -> Result<()> {
    let (t, c, h, w) = stack.dims();
    std::fs::write(
        dir.join(format!("{name}.json")),
        serde_json::to_string(&StackHeader { t, c, h, w })?,
    )?;
    let mut bytes = Vec::with_capacity(stack.values().len() * 8);
    for v in stack.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(dir.join(format!("{name}.bin")))?.write_all(&bytes)?;
    Ok(())
}

pub fn load_stack(dir: &Path, name: &str) -> Result<ProbabilityMaskStack> {
    let header: StackHeader =
        serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{name}.json")))?)?;
    let mut bytes = Vec::new();
    std::fs::File::open(dir.join(format!("{name}.bin")))?.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Data("stack payload is not a whole number of f64".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ProbabilityMaskStack::new(header.t, header.c, header.h, header.w, values)
}

/// Per-image score CSV: `image_id,acquisition,score`, 6-decimal fixed point.
pub fn write_score_csv(path: &Path, scores: &[UncertaintyScore]) -> Result<()> {
    let mut out = String::from("image_id,acquisition,score\n");
    for s in scores {
        out.push_str(&format!("{},{},{:.6}\n", s.image_id, s.acquisition, s.value));
    }
    std::fs::write(path, out)?;
    Ok(())
}
