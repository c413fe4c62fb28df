//! Synthetic ellipse-segmentation data: generation, preprocessing, and a
//! small deterministic augmentation set.
//!
//! Each example is a filled, rotated ellipse on a noisy dark background with
//! a brighter band around the boundary — a crude stand-in for a chamber wall.
//! Images are rendered at twice the target resolution and pushed through the
//! same resize/rescale path real inputs would take; masks are computed
//! analytically at the target resolution so they stay exactly binary.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Allowed square image sizes.
pub const VALID_SIZES: [usize; 5] = [16, 32, 64, 128, 256];

/// Mask foreground fraction is rejection-sampled into this closed range.
/// The band is deliberately narrow: object scale is roughly consistent
/// across the corpus, so per-image difficulty comes from shape, placement,
/// and contrast rather than raw size.
pub const FG_FRACTION_RANGE: (f64, f64) = (0.06, 0.20);

/// One image/mask pair. The image is 1x1xSxS in [0,1]; the mask is a flat
/// row-major SxS map with values in {0,1}.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: usize,
    pub image: Tensor,
    pub mask: Vec<u8>,
}

impl Example {
    pub fn side(&self) -> usize {
        self.image.shape()[3]
    }

    pub fn foreground_fraction(&self) -> f64 {
        let fg = self.mask.iter().filter(|&&v| v == 1).count();
        fg as f64 / self.mask.len() as f64
    }
}

#[derive(Debug, Clone, Copy)]
struct EllipseParams {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    angle: f64,
    interior: f64,
    band: f64,
}

/// Nominal ellipse area as a fraction of the image, before border clipping.
const AREA_RANGE: (f64, f64) = (0.08, 0.16);
/// Probability that an example comes from the elongated shape family.
const THIN_SHAPE_PROB: f64 = 0.28;
/// Semi-axis ratio for the two shape families. Most shapes are round-ish;
/// a minority are thin and elongated, which keeps the pool heterogeneous in
/// difficulty (long, narrow objects are markedly harder to segment at these
/// resolutions) without letting object size separate the two families.
const ROUND_ASPECT: (f64, f64) = (1.0, 1.8);
const THIN_ASPECT: (f64, f64) = (2.6, 3.8);

impl EllipseParams {
    fn draw(rng: &mut impl Rng) -> Self {
        let area = rng.gen_range(AREA_RANGE.0..AREA_RANGE.1);
        let thin = rng.gen::<f64>() < THIN_SHAPE_PROB;
        let aspect = if thin {
            rng.gen_range(THIN_ASPECT.0..THIN_ASPECT.1)
        } else {
            rng.gen_range(ROUND_ASPECT.0..ROUND_ASPECT.1)
        };
        // Semi-axes follow from area and aspect: pi * ax * ay = area.
        let ax = (area * aspect / std::f64::consts::PI).sqrt();
        let ay = (area / (aspect * std::f64::consts::PI)).sqrt();
        EllipseParams {
            cx: rng.gen_range(0.32..0.68),
            cy: rng.gen_range(0.32..0.68),
            ax,
            ay,
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            // per-image contrast jitter: some ellipses sit close to the
            // background level and are genuinely hard to segment
            interior: rng.gen_range(0.35..0.60),
            band: rng.gen_range(0.70..0.95),
        }
    }

    /// Normalized ellipse equation: <= 1 inside, grows outward.
    fn level(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.ax).powi(2) + (v / self.ay).powi(2)
    }
}

const BACKGROUND: f64 = 0.15;
const NOISE_SIGMA: f64 = 0.1;
const BAND_OUTER: f64 = 1.45;

/// Generate `n` examples of side `size`, deterministic in `(n, size, seed)`.
pub fn generate_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<Example>> {
    if n == 0 {
        return Err(Error::Parameter("dataset size must be at least 1".into()));
    }
    if !VALID_SIZES.contains(&size) {
        return Err(Error::Parameter(format!(
            "size must be one of {VALID_SIZES:?}, got {size}"
        )));
    }
    (0..n).map(|id| generate_example(id, size, seed)).collect()
}

fn generate_example(id: usize, size: usize, seed: u64) -> Result<Example> {
    let base = RngStream::new(seed, "synth-gen").with_item(id as u64);
    for attempt in 0.. {
        let mut rng = base.child(attempt).rng();
        let params = EllipseParams::draw(&mut rng);
        let mask = render_mask(&params, size);
        let fg = mask.iter().filter(|&&v| v == 1).count() as f64 / (size * size) as f64;
        if !(FG_FRACTION_RANGE.0..=FG_FRACTION_RANGE.1).contains(&fg) {
            continue;
        }
        let raw = render_image(&params, size * 2, &mut rng);
        let image = preprocess(&raw, size * 2, size * 2, size)?;
        return Ok(Example { id, image, mask });
    }
    unreachable!("rejection loop runs until a mask satisfies the fraction bound")
}

fn render_mask(params: &EllipseParams, size: usize) -> Vec<u8> {
    let mut mask = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let px = (x as f64 + 0.5) / size as f64;
            let py = (y as f64 + 0.5) / size as f64;
            if params.level(px, py) <= 1.0 {
                mask[y * size + x] = 1;
            }
        }
    }
    mask
}

fn render_image(params: &EllipseParams, side: usize, rng: &mut impl Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut img = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let px = (x as f64 + 0.5) / side as f64;
            let py = (y as f64 + 0.5) / side as f64;
            let level = params.level(px, py);
            let base = if level <= 1.0 {
                params.interior
            } else if level <= BAND_OUTER {
                params.band
            } else {
                BACKGROUND
            };
            img[y * side + x] = (base + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    img
}

/// Bilinear resize to `target` x `target` followed by min-max scaling into
/// [0,1]; constant inputs map to all zeros.
pub fn preprocess(raw: &[f64], h: usize, w: usize, target: usize) -> Result<Tensor> {
    if h == 0 || w == 0 || raw.len() != h * w {
        return Err(Error::Data(format!(
            "raw image claims {h}x{w} but holds {} values",
            raw.len()
        )));
    }
    if target == 0 {
        return Err(Error::Parameter("target size must be positive".into()));
    }
    let resized = bilinear_resize(raw, h, w, target, target);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &resized {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let data = if hi - lo <= 0.0 {
        vec![0.0; resized.len()]
    } else {
        resized.iter().map(|v| (v - lo) / (hi - lo)).collect()
    };
    Tensor::new(vec![1, 1, target, target], data)
}

/// Align-corners bilinear interpolation.
fn bilinear_resize(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow];
    let sy = if oh > 1 { (h - 1) as f64 / (oh - 1) as f64 } else { 0.0 };
    let sx = if ow > 1 { (w - 1) as f64 / (ow - 1) as f64 } else { 0.0 };
    for y in 0..oh {
        let fy = y as f64 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..ow {
            let fx = x as f64 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out[y * ow + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// The augmentation decisions for one example, drawn once and then applied.
/// Keeping the two steps separate makes identity/involution cases directly
/// constructible in tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Number of 90-degree clockwise rotations, 0..4.
    pub quarter_turns: u8,
    pub hflip: bool,
    pub transpose: bool,
    pub gauss_noise: bool,
    /// (gain, offset) jitter, if enabled.
    pub brightness: Option<(f64, f64)>,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        quarter_turns: 0,
        hflip: false,
        transpose: false,
        gauss_noise: false,
        brightness: None,
    };

    pub fn draw(rng: &mut impl Rng) -> Self {
        let quarter_turns = rng.gen_range(0..4u8);
        let hflip = rng.gen_bool(0.5);
        let transpose = rng.gen_bool(0.5);
        let gauss_noise = rng.gen_bool(0.2);
        let brightness = if rng.gen_bool(0.2) {
            Some((rng.gen_range(0.9..1.1), rng.gen_range(-0.05..0.05)))
        } else {
            None
        };
        AugmentParams { quarter_turns, hflip, transpose, gauss_noise, brightness }
    }
}

/// Draw augmentation decisions from `stream` and apply them.
pub fn augment(example: &Example, stream: &RngStream) -> Example {
    let mut rng = stream.rng();
    let params = AugmentParams::draw(&mut rng);
    apply_augment(example, &params, &mut rng)
}

/// Apply fixed augmentation decisions; `rng` is consumed only for the noise
/// field. Geometric transforms hit image and mask identically, so the mask
/// stays binary; the image is re-clipped to [0,1] at the end.
pub fn apply_augment(example: &Example, params: &AugmentParams, rng: &mut impl Rng) -> Example {
    let s = example.side();
    let mut image: Vec<f64> = example.image.data().to_vec();
    let mut mask = example.mask.clone();

    for _ in 0..params.quarter_turns % 4 {
        image = rot90_cw(&image, s);
        mask = rot90_cw(&mask, s);
    }
    if params.hflip {
        image = hflip(&image, s);
        mask = hflip(&mask, s);
    }
    if params.transpose {
        image = transpose(&image, s);
        mask = transpose(&mask, s);
    }
    if params.gauss_noise {
        let noise = Normal::new(0.0, 0.05).expect("valid sigma");
        for v in image.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    if let Some((gain, offset)) = params.brightness {
        for v in image.iter_mut() {
            *v = *v * gain + offset;
        }
    }
    for v in image.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Example {
        id: example.id,
        image: Tensor::new(vec![1, 1, s, s], image).expect("augment preserves shape"),
        mask,
    }
}

fn rot90_cw<T: Copy>(src: &[T], s: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for y in 0..s {
        for x in 0..s {
            out.push(src[(s - 1 - x) * s + y]);
        }
    }
    out
}

fn hflip<T: Copy>(src: &[T], s: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for y in 0..s {
        for x in 0..s {
            out.push(src[y * s + (s - 1 - x)]);
        }
    }
    out
}

fn transpose<T: Copy>(src: &[T], s: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for y in 0..s {
        for x in 0..s {
            out.push(src[x * s + y]);
        }
    }
    out
}

// ---- on-disk dataset layout ------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DatasetManifest {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    pub ids: Vec<usize>,
}

fn image_name(id: usize) -> String {
    format!("image_{id:04}.pgm")
}

fn mask_name(id: usize) -> String {
    format!("mask_{id:04}.pgm")
}

/// Write `manifest.json` plus one 8-bit PGM per image (round(255*x)) and per
/// mask ({0,255}) into `dir`.
pub fn save_dataset(dir: &Path, examples: &[Example], size: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = DatasetManifest {
        n: examples.len(),
        size,
        seed,
        ids: examples.iter().map(|e| e.id).collect(),
    };
    // serialize via BTreeMap-free struct: field order is declaration order
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    for ex in examples {
        let img_bytes: Vec<u8> = ex
            .image
            .data()
            .iter()
            .map(|&v| (255.0 * v).round().clamp(0.0, 255.0) as u8)
            .collect();
        write_pgm(&dir.join(image_name(ex.id)), size, size, &img_bytes)?;
        let mask_bytes: Vec<u8> = ex.mask.iter().map(|&v| if v == 1 { 255 } else { 0 }).collect();
        write_pgm(&dir.join(mask_name(ex.id)), size, size, &mask_bytes)?;
    }
    Ok(())
}

/// Read a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Vec<Example>, DatasetManifest)> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let s = manifest.size;
    let mut examples = Vec::with_capacity(manifest.ids.len());
    for &id in &manifest.ids {
        let (w, h, img) = read_pgm(&dir.join(image_name(id)))?;
        if (w, h) != (s, s) {
            return Err(Error::Data(format!("image {id} is {w}x{h}, manifest says {s}x{s}")));
        }
        let (w, h, mask_bytes) = read_pgm(&dir.join(mask_name(id)))?;
        if (w, h) != (s, s) {
            return Err(Error::Data(format!("mask {id} is {w}x{h}, manifest says {s}x{s}")));
        }
        let mut mask = Vec::with_capacity(mask_bytes.len());
        for b in mask_bytes {
            mask.push(match b {
                0 => 0u8,
                255 => 1u8,
                other => return Err(Error::Data(format!("mask {id} holds non-binary value {other}"))),
            });
        }
        let image = Tensor::new(
            vec![1, 1, s, s],
            img.iter().map(|&b| b as f64 / 255.0).collect(),
        )?;
        examples.push(Example { id, image, mask });
    }
    Ok((examples, manifest))
}

fn write_pgm(path: &Path, w: usize, h: usize, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(bytes)?;
    Ok(())
}

fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut header = Vec::new();
    // header = three whitespace-separated tokens after the magic
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Data(format!("{}: truncated PGM header", path.display())));
        }
        header.extend_from_slice(line.as_bytes());
        tokens = header
            .split(|b| b.is_ascii_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| String::from_utf8_lossy(t).to_string())
            .collect();
    }
    if tokens[0] != "P5" {
        return Err(Error::Data(format!("{}: not a P5 PGM", path.display())));
    }
    let w: usize = tokens[1].parse().map_err(|_| Error::Data("bad PGM width".into()))?;
    let h: usize = tokens[2].parse().map_err(|_| Error::Data("bad PGM height".into()))?;
    let maxval: usize = tokens[3].parse().map_err(|_| Error::Data("bad PGM maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Data(format!("{}: expected maxval 255, got {maxval}", path.display())));
    }
    let mut bytes = vec![0u8; w * h];
    reader.read_exact(&mut bytes)?;
    Ok((w, h, bytes))
}

/// Index a dataset by example id.
pub fn by_id(examples: &[Example]) -> BTreeMap<usize, &Example> {
    examples.iter().map(|e| (e.id, e)).collect()
}
