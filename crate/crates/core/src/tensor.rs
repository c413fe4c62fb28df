//! Dense double-precision tensors and the small set of differentiable
//! primitives the segmentation nets are built from.
//!
//! Everything is row-major `(N, C, H, W)` for 4-D data. Convolutions are
//! fixed at 3x3 with zero padding 1, pooling at non-overlapping 2x2, so every
//! stage halves or doubles the spatial size exactly. All public operations
//! return finite values; NaN/Inf anywhere is a bug, not a value.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Probabilities are clamped to at least this before any logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// Dense N-dimensional array, row-major, double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking the shape/length contract and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} values, got {}",
                data.len()
            )));
        }
        let t = Self { shape, data };
        t.check_finite()?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape, data: vec![0.0; numel] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape, data: vec![value; numel] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Interpret the shape as (N, C, H, W).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(Error::Shape(format!("expected 4-D tensor, got {other:?}"))),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Data("tensor contains non-finite values".into()))
        }
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Named gradient accumulator. Shapes must match the parameter they refer to.
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add `value` into the slot for `param_id`, creating it if absent.
    pub fn accumulate(&mut self, param_id: &str, value: Tensor) -> Result<()> {
        match self.map.get_mut(param_id) {
            None => {
                self.map.insert(param_id.to_string(), value);
            }
            Some(existing) => {
                if existing.shape() != value.shape() {
                    return Err(Error::Shape(format!(
                        "gradient shape {:?} does not match {:?} for {param_id}",
                        value.shape(),
                        existing.shape()
                    )));
                }
                for (a, b) in existing.data.iter_mut().zip(value.data.iter()) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, param_id: &str) -> Option<&Tensor> {
        self.map.get(param_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }
}

fn bad_channels(msg: String) -> Error {
    Error::Shape(msg)
}

/// 3x3 cross-correlation with zero padding 1; output spatial size equals
/// input spatial size. `kernel` is OutC x InC x 3 x 3, `bias` has length OutC.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let (n, in_c, h, w) = input.dims4()?;
    let (out_c, k_in, kh, kw) = kernel.dims4()?;
    if kh != 3 || kw != 3 {
        return Err(Error::Shape(format!("kernel must be 3x3, got {kh}x{kw}")));
    }
    if k_in != in_c {
        return Err(bad_channels(format!(
            "kernel expects {k_in} input channels, input has {in_c}"
        )));
    }
    if bias.len() != out_c {
        return Err(Error::Shape(format!(
            "bias length {} does not match {out_c} output channels",
            bias.len()
        )));
    }
    let plane = h * w;
    let mut out = vec![0.0; n * out_c * plane];
    for b in 0..n {
        for oc in 0..out_c {
            let out_plane = &mut out[(b * out_c + oc) * plane..][..plane];
            out_plane.fill(bias[oc]);
            for ic in 0..in_c {
                let in_plane = &input.data[(b * in_c + ic) * plane..][..plane];
                for ky in 0..3usize {
                    let dy = ky as isize - 1;
                    for kx in 0..3usize {
                        let dx = kx as isize - 1;
                        let wgt = kernel.data[((oc * in_c + ic) * 3 + ky) * 3 + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        accumulate_shifted(out_plane, in_plane, h, w, dy, dx, wgt);
                    }
                }
            }
        }
    }
    let t = Tensor { shape: vec![n, out_c, h, w], data: out };
    t.check_finite()?;
    Ok(t)
}

/// out[y][x] += wgt * in[y+dy][x+dx] over the in-bounds region.
#[inline]
fn accumulate_shifted(out: &mut [f64], inp: &[f64], h: usize, w: usize, dy: isize, dx: isize, wgt: f64) {
    let y_lo = (-dy).max(0) as usize;
    let y_hi = (h as isize - dy.max(0)) as usize;
    let x_lo = (-dx).max(0) as usize;
    let x_hi = (w as isize - dx.max(0)) as usize;
    if x_lo >= x_hi {
        return;
    }
    let len = x_hi - x_lo;
    for y in y_lo..y_hi {
        let sy = (y as isize + dy) as usize;
        let orow = &mut out[y * w + x_lo..y * w + x_lo + len];
        let irow = &inp[sy * w + (x_lo as isize + dx) as usize..][..len];
        for i in 0..len {
            orow[i] += wgt * irow[i];
        }
    }
}

/// Gradients of [`conv2d`] with respect to input, kernel, and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (n, in_c, h, w) = input.dims4()?;
    let (out_c, _, _, _) = kernel.dims4()?;
    let (gn, gc, gh, gw) = grad_out.dims4()?;
    if (gn, gc, gh, gw) != (n, out_c, h, w) {
        return Err(Error::Shape(format!(
            "grad shape {:?} does not match conv output {:?}",
            grad_out.shape(),
            [n, out_c, h, w]
        )));
    }
    let plane = h * w;
    let mut d_input = vec![0.0; input.numel()];
    let mut d_kernel = vec![0.0; kernel.numel()];
    let mut d_bias = vec![0.0; out_c];

    for b in 0..n {
        for oc in 0..out_c {
            let g_plane = &grad_out.data[(b * out_c + oc) * plane..][..plane];
            d_bias[oc] += g_plane.iter().sum::<f64>();
            for ic in 0..in_c {
                let in_plane = &input.data[(b * in_c + ic) * plane..][..plane];
                let di_plane = &mut d_input[(b * in_c + ic) * plane..][..plane];
                for ky in 0..3usize {
                    let dy = ky as isize - 1;
                    for kx in 0..3usize {
                        let dx = kx as isize - 1;
                        let widx = ((oc * in_c + ic) * 3 + ky) * 3 + kx;
                        let wgt = kernel.data[widx];
                        // dL/dinput: scatter grad through the same shift.
                        if wgt != 0.0 {
                            accumulate_shifted_transposed(di_plane, g_plane, h, w, dy, dx, wgt);
                        }
                        // dL/dkernel: dot of grad rows with shifted input rows.
                        d_kernel[widx] += shifted_dot(g_plane, in_plane, h, w, dy, dx);
                    }
                }
            }
        }
    }
    let d_input = Tensor { shape: input.shape.clone(), data: d_input };
    let d_kernel = Tensor { shape: kernel.shape.clone(), data: d_kernel };
    d_input.check_finite()?;
    d_kernel.check_finite()?;
    Ok((d_input, d_kernel, d_bias))
}

/// dinp[y+dy][x+dx] += wgt * grad[y][x] over the in-bounds region.
#[inline]
fn accumulate_shifted_transposed(
    dinp: &mut [f64],
    grad: &[f64],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    wgt: f64,
) {
    let y_lo = (-dy).max(0) as usize;
    let y_hi = (h as isize - dy.max(0)) as usize;
    let x_lo = (-dx).max(0) as usize;
    let x_hi = (w as isize - dx.max(0)) as usize;
    if x_lo >= x_hi {
        return;
    }
    let len = x_hi - x_lo;
    for y in y_lo..y_hi {
        let sy = (y as isize + dy) as usize;
        let drow = &mut dinp[sy * w + (x_lo as isize + dx) as usize..][..len];
        let grow = &grad[y * w + x_lo..y * w + x_lo + len];
        for i in 0..len {
            drow[i] += wgt * grow[i];
        }
    }
}

/// sum over (y, x) of grad[y][x] * inp[y+dy][x+dx].
#[inline]
fn shifted_dot(grad: &[f64], inp: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let y_lo = (-dy).max(0) as usize;
    let y_hi = (h as isize - dy.max(0)) as usize;
    let x_lo = (-dx).max(0) as usize;
    let x_hi = (w as isize - dx.max(0)) as usize;
    if x_lo >= x_hi {
        return 0.0;
    }
    let len = x_hi - x_lo;
    let mut acc = 0.0;
    for y in y_lo..y_hi {
        let sy = (y as isize + dy) as usize;
        let grow = &grad[y * w + x_lo..y * w + x_lo + len];
        let irow = &inp[sy * w + (x_lo as isize + dx) as usize..][..len];
        for i in 0..len {
            acc += grow[i] * irow[i];
        }
    }
    acc
}

/// 2x2 non-overlapping max pool. Returns the pooled tensor and, for each
/// output element, the flat index of its source element (for the backward
/// pass). Requires even H and W.
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("maxpool2 needs even spatial size, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    for bc in 0..n * c {
        let in_plane = &input.data[bc * h * w..][..h * w];
        let base = bc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = (2 * oy) * w + 2 * ox;
                let mut best = in_plane[best_idx];
                for (ddy, ddx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * oy + ddy) * w + 2 * ox + ddx;
                    if in_plane[idx] > best {
                        best = in_plane[idx];
                        best_idx = idx;
                    }
                }
                let o = bc * oh * ow + oy * ow + ox;
                out[o] = best;
                argmax[o] = base + best_idx;
            }
        }
    }
    Ok((Tensor { shape: vec![n, c, oh, ow], data: out }, argmax))
}

/// Route pooled gradients back to the elements that won the max.
pub fn maxpool2_backward(grad_out: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor> {
    if grad_out.numel() != argmax.len() {
        return Err(Error::Shape("argmax length does not match grad".into()));
    }
    let numel: usize = input_shape.iter().product();
    let mut d_input = vec![0.0; numel];
    for (g, &idx) in grad_out.data.iter().zip(argmax.iter()) {
        d_input[idx] += g;
    }
    Tensor::new(input_shape.to_vec(), d_input)
}

/// Nearest-neighbor 2x upsampling: each source pixel fills a 2x2 block.
pub fn upsample2(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0.0; n * c * oh * ow];
    for bc in 0..n * c {
        let in_plane = &input.data[bc * h * w..][..h * w];
        let out_plane = &mut out[bc * oh * ow..][..oh * ow];
        for y in 0..h {
            for x in 0..w {
                let v = in_plane[y * w + x];
                out_plane[(2 * y) * ow + 2 * x] = v;
                out_plane[(2 * y) * ow + 2 * x + 1] = v;
                out_plane[(2 * y + 1) * ow + 2 * x] = v;
                out_plane[(2 * y + 1) * ow + 2 * x + 1] = v;
            }
        }
    }
    Ok(Tensor { shape: vec![n, c, oh, ow], data: out })
}

/// Each source pixel receives the sum of its 2x2 block's gradients.
pub fn upsample2_backward(grad_out: &Tensor) -> Result<Tensor> {
    let (n, c, oh, ow) = grad_out.dims4()?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::Shape("upsample2 backward needs even grad size".into()));
    }
    let (h, w) = (oh / 2, ow / 2);
    let mut d_input = vec![0.0; n * c * h * w];
    for bc in 0..n * c {
        let g_plane = &grad_out.data[bc * oh * ow..][..oh * ow];
        let d_plane = &mut d_input[bc * h * w..][..h * w];
        for y in 0..h {
            for x in 0..w {
                d_plane[y * w + x] = g_plane[(2 * y) * ow + 2 * x]
                    + g_plane[(2 * y) * ow + 2 * x + 1]
                    + g_plane[(2 * y + 1) * ow + 2 * x]
                    + g_plane[(2 * y + 1) * ow + 2 * x + 1];
            }
        }
    }
    Ok(Tensor { shape: vec![n, c, h, w], data: d_input })
}

/// Elementwise max(0, x).
pub fn relu(input: &Tensor) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Subgradient: indicator(x > 0), so exactly 0 at 0.
pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != input.shape() {
        return Err(Error::Shape("relu backward shape mismatch".into()));
    }
    Ok(Tensor {
        shape: input.shape.clone(),
        data: grad_out
            .data
            .iter()
            .zip(input.data.iter())
            .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    })
}

/// Per-pixel softmax over the channel axis, computed with max subtraction.
/// Channel sums come out at 1 within 1e-12 and every entry is strictly
/// positive.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = logits.dims4()?;
    if c < 2 {
        return Err(Error::Shape(format!("softmax needs at least 2 channels, got {c}")));
    }
    let plane = h * w;
    let mut out = vec![0.0; logits.numel()];
    for b in 0..n {
        for p in 0..plane {
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(logits.data[(b * c + ch) * plane + p]);
            }
            let mut z = 0.0;
            for ch in 0..c {
                let e = (logits.data[(b * c + ch) * plane + p] - m).exp();
                out[(b * c + ch) * plane + p] = e;
                z += e;
            }
            for ch in 0..c {
                out[(b * c + ch) * plane + p] /= z;
            }
        }
    }
    let t = Tensor { shape: logits.shape.clone(), data: out };
    t.check_finite()?;
    Ok(t)
}

/// Inverted dropout: Bernoulli mask with keep probability `1 - rate`, kept
/// values scaled by `1 / (1 - rate)`. The mask comes exclusively from the
/// supplied stream, so the same key yields the same mask.
pub fn dropout(input: &Tensor, rate: f64, stream: &RngStream) -> Result<Tensor> {
    let mask = dropout_mask(input.numel(), rate, stream)?;
    Ok(apply_mask(input, &mask))
}

/// The scale mask behind [`dropout`]: each entry is 0 or `1/(1-rate)`.
pub fn dropout_mask(len: usize, rate: f64, stream: &RngStream) -> Result<Vec<f64>> {
    dropout_mask_from(&mut stream.rng(), len, rate)
}

/// Mask drawn from an already-open generator, for callers that consume
/// several masks from one stream in a fixed order.
pub fn dropout_mask_from(rng: &mut impl Rng, len: usize, rate: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!("dropout rate must be in [0,1), got {rate}")));
    }
    if rate == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let scale = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
        .collect())
}

pub fn apply_mask(input: &Tensor, mask: &[f64]) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input.data.iter().zip(mask.iter()).map(|(v, m)| v * m).collect(),
    }
}

/// Mean over all pixels of `-ln(probs[target] + eps)`, eps = 1e-12.
/// `targets` is the flattened (N, H, W) label map with values in 0..C.
pub fn cross_entropy_loss(probs: &Tensor, targets: &[u8]) -> Result<f64> {
    let (n, c, h, w) = probs.dims4()?;
    let plane = h * w;
    if targets.len() != n * plane {
        return Err(Error::Shape(format!(
            "target length {} does not match {n}x{h}x{w}",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| (t as usize) >= c) {
        return Err(Error::Label(format!("target class {bad} out of range for C={c}")));
    }
    let mut total = 0.0;
    for b in 0..n {
        for p in 0..plane {
            let t = targets[b * plane + p] as usize;
            total -= (probs.data[(b * c + t) * plane + p] + LOG_EPS).ln();
        }
    }
    Ok(total / (n * plane) as f64)
}

/// Gradient of the per-image pixel-summed cross entropy with respect to the
/// logits behind `probs`: `(softmax - onehot) / N`. This is the training
/// objective's gradient; the reported loss value stays the per-pixel mean.
pub fn softmax_ce_backward(probs: &Tensor, targets: &[u8]) -> Result<Tensor> {
    let (n, c, h, w) = probs.dims4()?;
    let plane = h * w;
    if targets.len() != n * plane {
        return Err(Error::Shape("target length mismatch in ce backward".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = probs.data.clone();
    for v in grad.iter_mut() {
        *v *= inv_n;
    }
    for b in 0..n {
        for p in 0..plane {
            let t = targets[b * plane + p] as usize;
            grad[(b * c + t) * plane + p] -= inv_n;
        }
    }
    Ok(Tensor { shape: probs.shape.clone(), data: grad })
}

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    shape: Vec<usize>,
    dtype: String,
    order: String,
}

/// Write `<name>.json` (shape header) and `<name>.bin` (raw little-endian
/// f64 payload) under `dir`.
pub fn dump_tensor(dir: &Path, name: &str, tensor: &Tensor) -> Result<()> {
    let header = DumpHeader {
        shape: tensor.shape.clone(),
        dtype: "f64".into(),
        order: "row-major".into(),
    };
    let json = serde_json::to_string(&header)?;
    std::fs::write(dir.join(format!("{name}.json")), json)?;
    let mut bytes = Vec::with_capacity(tensor.numel() * 8);
    for v in &tensor.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(dir.join(format!("{name}.bin")))?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Read back a tensor written by [`dump_tensor`].
pub fn load_tensor(dir: &Path, name: &str) -> Result<Tensor> {
    let json = std::fs::read_to_string(dir.join(format!("{name}.json")))?;
    let header: DumpHeader = serde_json::from_str(&json)?;
    if header.dtype != "f64" || header.order != "row-major" {
        return Err(Error::Data(format!(
            "unsupported tensor encoding {}/{}",
            header.dtype, header.order
        )));
    }
    let mut f = std::fs::File::open(dir.join(format!("{name}.bin")))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Data("tensor payload is not a whole number of f64".into()));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(header.shape, data)
}
