//! Small from-scratch CNN used for desk-scale runs and tests.
//!
//! Architecture for an `S × S` input (S a multiple of 8):
//!
//! ```text
//! conv3x3(3→8) → ReLU → avgpool2 → conv3x3(8→16) → ReLU → avgpool2
//!   → average over a 2×2 grid → 64 features → affine head → logits
//! ```
//!
//! Forward and backward passes are written out by hand over a single flat
//! parameter buffer. Samples in a batch are processed in parallel but their
//! gradients are summed in sample order, so results are bit-identical
//! regardless of thread count.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::loss::bce_multilabel_loss_grad;
use super::network::{BackboneProvider, BackboneSpec, BuildOptions, ImageBatch, Network};
use super::optim::{AdamW, AdamWConfig};
use super::TrainError;
use crate::fsutil;

pub const TINY_NAME: &str = "tiny";
pub const TINY_SIDE: u32 = 32;

const C1: usize = 8;
const C2: usize = 16;
const GRID: usize = 2;
const FEATURES: usize = C2 * GRID * GRID;

#[derive(Debug, Clone, Copy)]
struct Layout {
    classes: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wh: usize,
    bh: usize,
    len: usize,
}

impl Layout {
    fn new(classes: usize) -> Self {
        let w1 = 0;
        let b1 = w1 + C1 * 3 * 9;
        let w2 = b1 + C1;
        let b2 = w2 + C2 * C1 * 9;
        let wh = b2 + C2;
        let bh = wh + classes * FEATURES;
        let len = bh + classes;
        Self {
            classes,
            w1,
            b1,
            w2,
            b2,
            wh,
            bh,
            len,
        }
    }

    fn tensors(&self) -> [(&'static str, usize, Vec<usize>); 6] {
        [
            ("conv1.weight", self.w1, vec![C1, 3, 3, 3]),
            ("conv1.bias", self.b1, vec![C1]),
            ("conv2.weight", self.w2, vec![C2, C1, 3, 3]),
            ("conv2.bias", self.b2, vec![C2]),
            ("head.weight", self.wh, vec![self.classes, FEATURES]),
            ("head.bias", self.bh, vec![self.classes]),
        ]
    }
}

/// Parameter count of the tiny network with a `classes`-logit head.
pub fn tiny_parameter_count(classes: usize) -> u64 {
    Layout::new(classes).len as u64
}

/// 3×3 convolution, zero padding 1, stride 1, planes in CHW order.
fn conv3x3(input: &[f32], cin: usize, side: usize, weight: &[f32], bias: &[f32], cout: usize) -> Vec<f32> {
    let plane = side * side;
    let mut out = vec![0.0f32; cout * plane];
    for o in 0..cout {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.fill(bias[o]);
        for i in 0..cin {
            let src = &input[i * plane..(i + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let w = weight[((o * cin + i) * 3 + ky) * 3 + kx];
                    let (y0, y1) = (1usize.saturating_sub(ky), (side + 1 - ky).min(side));
                    let (x0, x1) = (1usize.saturating_sub(kx), (side + 1 - kx).min(side));
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let d = &mut dst[y * side + x0..y * side + x1];
                        let s = &src[sy * side + x0 + kx - 1..sy * side + x1 + kx - 1];
                        for (dv, sv) in d.iter_mut().zip(s) {
                            *dv += w * sv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients of [`conv3x3`] and, when asked,
/// the gradient with respect to its input.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f32],
    cin: usize,
    side: usize,
    weight: &[f32],
    cout: usize,
    dout: &[f32],
    dweight: &mut [f32],
    dbias: &mut [f32],
    mut dinput: Option<&mut [f32]>,
) {
    let plane = side * side;
    for o in 0..cout {
        let g = &dout[o * plane..(o + 1) * plane];
        dbias[o] += g.iter().sum::<f32>();
        for i in 0..cin {
            let src = &input[i * plane..(i + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let widx = ((o * cin + i) * 3 + ky) * 3 + kx;
                    let w = weight[widx];
                    let (y0, y1) = (1usize.saturating_sub(ky), (side + 1 - ky).min(side));
                    let (x0, x1) = (1usize.saturating_sub(kx), (side + 1 - kx).min(side));
                    let mut acc = 0.0f32;
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let gr = &g[y * side + x0..y * side + x1];
                        let sr = &src[sy * side + x0 + kx - 1..sy * side + x1 + kx - 1];
                        for (gv, sv) in gr.iter().zip(sr) {
                            acc += gv * sv;
                        }
                        if let Some(din) = dinput.as_deref_mut() {
                            let dr = &mut din[i * plane + sy * side + x0 + kx - 1..i * plane + sy * side + x1 + kx - 1];
                            for (dv, gv) in dr.iter_mut().zip(gr) {
                                *dv += w * gv;
                            }
                        }
                    }
                    dweight[widx] += acc;
                }
            }
        }
    }
}

fn avgpool2(input: &[f32], c: usize, side: usize) -> Vec<f32> {
    let half = side / 2;
    let mut out = vec![0.0f32; c * half * half];
    for ch in 0..c {
        let src = &input[ch * side * side..];
        for y in 0..half {
            for x in 0..half {
                let s = src[2 * y * side + 2 * x]
                    + src[2 * y * side + 2 * x + 1]
                    + src[(2 * y + 1) * side + 2 * x]
                    + src[(2 * y + 1) * side + 2 * x + 1];
                out[ch * half * half + y * half + x] = 0.25 * s;
            }
        }
    }
    out
}

fn avgpool2_backward(dout: &[f32], c: usize, side: usize) -> Vec<f32> {
    let half = side / 2;
    let mut din = vec![0.0f32; c * side * side];
    for ch in 0..c {
        for y in 0..side {
            for x in 0..side {
                din[ch * side * side + y * side + x] = 0.25 * dout[ch * half * half + (y / 2) * half + x / 2];
            }
        }
    }
    din
}

/// Mean of each cell of a `GRID × GRID` partition of every plane.
fn grid_pool(input: &[f32], c: usize, side: usize) -> Vec<f32> {
    let cell = side / GRID;
    let scale = 1.0 / (cell * cell) as f32;
    let mut out = vec![0.0f32; c * GRID * GRID];
    for ch in 0..c {
        for y in 0..side {
            for x in 0..side {
                out[ch * GRID * GRID + (y / cell) * GRID + x / cell] += input[ch * side * side + y * side + x];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

fn grid_pool_backward(dout: &[f32], c: usize, side: usize) -> Vec<f32> {
    let cell = side / GRID;
    let scale = 1.0 / (cell * cell) as f32;
    let mut din = vec![0.0f32; c * side * side];
    for ch in 0..c {
        for y in 0..side {
            for x in 0..side {
                din[ch * side * side + y * side + x] = scale * dout[ch * GRID * GRID + (y / cell) * GRID + x / cell];
            }
        }
    }
    din
}

fn relu(v: &[f32]) -> Vec<f32> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

fn relu_backward(grad: &mut [f32], pre: &[f32]) {
    for (g, &z) in grad.iter_mut().zip(pre) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Interleaved 8-bit RGB to planar values in [-0.5, 0.5].
fn to_planar(tile: &[u8], side: usize) -> Vec<f32> {
    let plane = side * side;
    let mut out = vec![0.0f32; 3 * plane];
    for (p, px) in tile.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + p] = px[c] as f32 / 255.0 - 0.5;
        }
    }
    out
}

struct Activations {
    x: Vec<f32>,
    z1: Vec<f32>,
    p1: Vec<f32>,
    z2: Vec<f32>,
    features: Vec<f32>,
    logits: Vec<f32>,
}

pub struct TinyNetwork {
    spec: BackboneSpec,
    layout: Layout,
    side: usize,
    params: Vec<f32>,
    optimizer: AdamW,
}

impl TinyNetwork {
    pub fn new(spec: BackboneSpec, opts: &BuildOptions) -> Result<Self, TrainError> {
        let side = check_side(opts.input_side)?;
        let layout = Layout::new(opts.classes);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut params = vec![0.0f32; layout.len];
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, gain: f32| {
            let bound = gain * (1.0 / fan_in as f32).sqrt();
            for p in &mut params[range] {
                *p = rng.gen_range(-bound..bound);
            }
        };
        // He-uniform for the ReLU stages, 1/sqrt(fan_in) for the head; biases start at zero
        fill(layout.w1..layout.b1, 27, 6f32.sqrt());
        fill(layout.w2..layout.b2, C1 * 9, 6f32.sqrt());
        fill(layout.wh..layout.bh, FEATURES, 1.0);
        Ok(Self {
            spec,
            layout,
            side,
            params,
            optimizer: AdamW::new(layout.len),
        })
    }

    fn forward(&self, tile: &[u8]) -> Activations {
        let l = &self.layout;
        let p = &self.params;
        let s = self.side;
        let x = to_planar(tile, s);
        let z1 = conv3x3(&x, 3, s, &p[l.w1..l.b1], &p[l.b1..l.w2], C1);
        let p1 = avgpool2(&relu(&z1), C1, s);
        let z2 = conv3x3(&p1, C1, s / 2, &p[l.w2..l.b2], &p[l.b2..l.wh], C2);
        let p2 = avgpool2(&relu(&z2), C2, s / 2);
        let features = grid_pool(&p2, C2, s / 4);
        let logits = (0..l.classes)
            .map(|k| {
                let w = &p[l.wh + k * FEATURES..l.wh + (k + 1) * FEATURES];
                p[l.bh + k] + w.iter().zip(&features).map(|(a, b)| a * b).sum::<f32>()
            })
            .collect();
        Activations {
            x,
            z1,
            p1,
            z2,
            features,
            logits,
        }
    }

    fn backward(&self, act: &Activations, dlogits: &[f32]) -> Vec<f32> {
        let l = &self.layout;
        let p = &self.params;
        let s = self.side;
        let mut grad = vec![0.0f32; l.len];
        let mut dfeat = vec![0.0f32; FEATURES];
        for (k, &dl) in dlogits.iter().enumerate() {
            grad[l.bh + k] += dl;
            let row = l.wh + k * FEATURES;
            for j in 0..FEATURES {
                grad[row + j] += dl * act.features[j];
                dfeat[j] += p[row + j] * dl;
            }
        }
        let dp2 = grid_pool_backward(&dfeat, C2, s / 4);
        let mut dz2 = avgpool2_backward(&dp2, C2, s / 2);
        relu_backward(&mut dz2, &act.z2);
        let mut dp1 = vec![0.0f32; C1 * (s / 2) * (s / 2)];
        let (g_lo, g_hi) = grad.split_at_mut(l.b2);
        conv3x3_backward(
            &act.p1,
            C1,
            s / 2,
            &p[l.w2..l.b2],
            C2,
            &dz2,
            &mut g_lo[l.w2..l.b2],
            &mut g_hi[..C2],
            Some(&mut dp1),
        );
        let mut dz1 = avgpool2_backward(&dp1, C1, s);
        relu_backward(&mut dz1, &act.z1);
        let (g_lo, g_hi) = grad.split_at_mut(l.b1);
        conv3x3_backward(
            &act.x,
            3,
            s,
            &p[l.w1..l.b1],
            C1,
            &dz1,
            &mut g_lo[l.w1..l.b1],
            &mut g_hi[..C1],
            None,
        );
        grad
    }

    fn check_batch(&self, batch: &ImageBatch) -> Result<(), TrainError> {
        if batch.side as usize != self.side {
            return Err(TrainError::Resolution(format!(
                "batch tiles are {}px, network expects {}px",
                batch.side, self.side
            )));
        }
        Ok(())
    }

    fn save_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let bytes: Vec<u8> = self.params.iter().flat_map(|v| v.to_le_bytes()).collect();
        let mut views = Vec::new();
        for (name, offset, shape) in self.layout.tensors() {
            let n: usize = shape.iter().product();
            let view = TensorView::new(Dtype::F32, shape, &bytes[offset * 4..(offset + n) * 4])
                .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            views.push((name, view));
        }
        let info = HashMap::from([
            ("architecture".to_string(), TINY_NAME.to_string()),
            ("input_side".to_string(), self.side.to_string()),
        ]);
        safetensors::serialize(views, Some(info)).map_err(|e| TrainError::Checkpoint(e.to_string()))
    }

    fn load_bytes(&mut self, bytes: &[u8]) -> Result<(), TrainError> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        for (name, offset, shape) in self.layout.tensors() {
            let t = st
                .tensor(name)
                .map_err(|e| TrainError::Checkpoint(format!("{name}: {e}")))?;
            if t.dtype() != Dtype::F32 || t.shape() != shape.as_slice() {
                return Err(TrainError::Checkpoint(format!(
                    "{name}: expected f32 {shape:?}, found {:?} {:?}",
                    t.dtype(),
                    t.shape()
                )));
            }
            for (i, chunk) in t.data().chunks_exact(4).enumerate() {
                self.params[offset + i] = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
        Ok(())
    }
}

fn check_side(side: u32) -> Result<usize, TrainError> {
    if side < 8 || !side.is_multiple_of(8) {
        return Err(TrainError::Resolution(format!(
            "tiny network needs a resolution that is a positive multiple of 8, got {side}"
        )));
    }
    Ok(side as usize)
}

impl Network for TinyNetwork {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn classes(&self) -> usize {
        self.layout.classes
    }

    fn input_side(&self) -> u32 {
        self.side as u32
    }

    fn parameter_count(&self) -> u64 {
        self.layout.len as u64
    }

    fn logits(&self, batch: &ImageBatch) -> Result<Vec<f32>, TrainError> {
        self.check_batch(batch)?;
        let rows: Vec<Vec<f32>> = (0..batch.len)
            .into_par_iter()
            .map(|i| self.forward(batch.tile(i)).logits)
            .collect();
        Ok(rows.concat())
    }

    fn train_step(&mut self, batch: &ImageBatch, targets: &[u8], opt: &AdamWConfig) -> Result<f64, TrainError> {
        self.check_batch(batch)?;
        let acts: Vec<Activations> = (0..batch.len)
            .into_par_iter()
            .map(|i| self.forward(batch.tile(i)))
            .collect();
        let logits: Vec<f64> = acts.iter().flat_map(|a| a.logits.iter().map(|&z| z as f64)).collect();
        let (loss, dlogits) = bce_multilabel_loss_grad(&logits, targets, self.layout.classes)?;
        let n = self.layout.classes;
        let grads: Vec<Vec<f32>> = acts
            .par_iter()
            .enumerate()
            .map(|(i, a)| {
                let dl: Vec<f32> = dlogits[i * n..(i + 1) * n].iter().map(|&g| g as f32).collect();
                self.backward(a, &dl)
            })
            .collect();
        let mut total = vec![0.0f32; self.layout.len];
        for g in &grads {
            for (t, v) in total.iter_mut().zip(g) {
                *t += v;
            }
        }
        self.optimizer.step(opt, &mut self.params, &total);
        Ok(loss)
    }

    fn save_weights(&self, path: &Path) -> Result<(), TrainError> {
        let bytes = self.save_bytes()?;
        fsutil::write_bytes_atomic(path, &bytes).map_err(|e| TrainError::Io {
            context: path.display().to_string(),
            source: e,
        })
    }
}

pub struct TinyProvider;

impl TinyProvider {
    fn default_spec() -> BackboneSpec {
        BackboneSpec {
            name: TINY_NAME.to_string(),
            pretrained: false,
            native_resolution: TINY_SIDE,
            parameter_count: Some(tiny_parameter_count(8)),
        }
    }
}

impl BackboneProvider for TinyProvider {
    fn names(&self) -> Vec<String> {
        vec![TINY_NAME.to_string()]
    }

    fn spec(&self, name: &str) -> Option<BackboneSpec> {
        name.eq_ignore_ascii_case(TINY_NAME).then(Self::default_spec)
    }

    fn build(&self, spec: &BackboneSpec, opts: &BuildOptions) -> Result<Box<dyn Network>, TrainError> {
        if spec.pretrained {
            return Err(TrainError::Pretrained(format!(
                "`{TINY_NAME}` is trained from scratch and has no pretrained weights"
            )));
        }
        let mut spec = spec.clone();
        spec.name = TINY_NAME.to_string();
        spec.parameter_count = Some(tiny_parameter_count(opts.classes));
        Ok(Box::new(TinyNetwork::new(spec, opts)?))
    }

    fn load(&self, spec: &BackboneSpec, opts: &BuildOptions, weights: &Path) -> Result<Box<dyn Network>, TrainError> {
        let mut spec = spec.clone();
        spec.pretrained = false;
        spec.parameter_count = Some(tiny_parameter_count(opts.classes));
        let mut net = TinyNetwork::new(spec, opts)?;
        let bytes = std::fs::read(weights).map_err(|e| TrainError::Io {
            context: weights.display().to_string(),
            source: e,
        })?;
        net.load_bytes(&bytes)?;
        Ok(Box::new(net))
    }
}
