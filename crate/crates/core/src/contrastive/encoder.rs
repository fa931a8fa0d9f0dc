//! Small fixed encoders with manually propagated gradients.
//!
//! 2D path: conv3x3(3->16, stride 2) -> tanh -> conv3x3(16->32) -> tanh ->
//! conv1x1(32->d), producing a feature map at half the input resolution.
//! 3D path: flattened 3x3x3 occupancy neighborhood -> affine(27->32) ->
//! tanh -> affine(32->d), one feature per occupied voxel.

use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use thiserror::Error;

use super::features::{FeatureMap, VoxelFeatures};
use crate::geometry::ColorImage;
use crate::voxels::OccupancyChunk;

pub const CONV1_CHANNELS: usize = 16;
pub const CONV2_CHANNELS: usize = 32;
pub const HIDDEN_3D: usize = 32;
pub const NEIGHBORHOOD: usize = 27;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EncoderError {
    #[error("image dimensions {0}x{1} must be even")]
    OddDimensions(u32, u32),
    #[error("cannot L2-normalize a zero feature vector")]
    NormalizationOfZeroVector,
    #[error("chunk has no occupied voxels")]
    EmptyChunk,
    #[error("pixel ({0}, {1}) outside the image")]
    PixelOutOfBounds(u32, u32),
    #[error("voxel {0} is not occupied in the chunk")]
    VoxelNotOccupied(u64),
}

/// All weights of the shared 2D encoder and the 3D voxel encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub dim: usize,
    pub normalize: bool,
    pub conv1_w: Vec<f64>, // [16][3][3][3]
    pub conv1_b: Vec<f64>, // [16]
    pub conv2_w: Vec<f64>, // [32][16][3][3]
    pub conv2_b: Vec<f64>, // [32]
    pub proj_w: Vec<f64>,  // [d][32]
    pub proj_b: Vec<f64>,  // [d]
    pub fc1_w: Vec<f64>,   // [32][27]
    pub fc1_b: Vec<f64>,   // [32]
    pub fc2_w: Vec<f64>,   // [d][32]
    pub fc2_b: Vec<f64>,   // [d]
}

impl EncoderParams {
    /// Seeded uniform init scaled by 1/sqrt(fan_in); zero biases.
    pub fn init(dim: usize, normalize: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensor = |len: usize, fan_in: usize| -> Vec<f64> {
            let s = 1.0 / (fan_in as f64).sqrt();
            (0..len).map(|_| rng.gen_range(-s..s)).collect()
        };
        Self {
            dim,
            normalize,
            conv1_w: tensor(CONV1_CHANNELS * 3 * 9, 27),
            conv1_b: vec![0.0; CONV1_CHANNELS],
            conv2_w: tensor(CONV2_CHANNELS * CONV1_CHANNELS * 9, CONV1_CHANNELS * 9),
            conv2_b: vec![0.0; CONV2_CHANNELS],
            proj_w: tensor(dim * CONV2_CHANNELS, CONV2_CHANNELS),
            proj_b: vec![0.0; dim],
            fc1_w: tensor(HIDDEN_3D * NEIGHBORHOOD, NEIGHBORHOOD),
            fc1_b: vec![0.0; HIDDEN_3D],
            fc2_w: tensor(dim * HIDDEN_3D, HIDDEN_3D),
            fc2_b: vec![0.0; dim],
        }
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            dim: self.dim,
            normalize: self.normalize,
            conv1_w: vec![0.0; self.conv1_w.len()],
            conv1_b: vec![0.0; self.conv1_b.len()],
            conv2_w: vec![0.0; self.conv2_w.len()],
            conv2_b: vec![0.0; self.conv2_b.len()],
            proj_w: vec![0.0; self.proj_w.len()],
            proj_b: vec![0.0; self.proj_b.len()],
            fc1_w: vec![0.0; self.fc1_w.len()],
            fc1_b: vec![0.0; self.fc1_b.len()],
            fc2_w: vec![0.0; self.fc2_w.len()],
            fc2_b: vec![0.0; self.fc2_b.len()],
        }
    }

    /// Tensors in the canonical serialization / flattening order.
    pub fn tensor_refs(&self) -> [&[f64]; 10] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.proj_w,
            &self.proj_b,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
        ]
    }

    pub fn tensor_muts(&mut self) -> [&mut Vec<f64>; 10] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }

    pub fn flat_len(&self) -> usize {
        self.tensor_refs().iter().map(|t| t.len()).sum()
    }

    pub fn flat_get(&self, mut idx: usize) -> f64 {
        for t in self.tensor_refs() {
            if idx < t.len() {
                return t[idx];
            }
            idx -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn flat_add(&mut self, mut idx: usize, delta: f64) {
        for t in self.tensor_muts() {
            if idx < t.len() {
                t[idx] += delta;
                return;
            }
            idx -= t.len();
        }
        panic!("flat index out of range");
    }

    /// self += scale * other, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        let others = other.tensor_refs();
        for (mine, theirs) in self.tensor_muts().into_iter().zip(others) {
            for (m, t) in mine.iter_mut().zip(theirs) {
                *m += scale * t;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensor_muts() {
            for x in t.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensor_refs().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Intermediate activations retained for the 2D backward pass.
pub struct ImageCache {
    half_w: usize,
    half_h: usize,
    input: Vec<f64>, // [3][h][w]
    h1: Vec<f64>,    // [16][h/2][w/2], post-tanh
    h2: Vec<f64>,    // [32][h/2][w/2], post-tanh
}

#[inline]
fn tanh_all(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = x.tanh();
    }
}

/// out[yo][xo] += w * in[yo - 1 + ky][xo - 1 + kx] over valid rows; the
/// inner loop is a contiguous shifted axpy.
fn conv_axpy_unit(out: &mut [f64], inp: &[f64], weight: f64, hh: usize, hw: usize, ky: usize, kx: usize) {
    let dy = ky as i64 - 1;
    let dx = kx as i64 - 1;
    let x0 = (-dx).max(0) as usize;
    let x1 = hw - dx.max(0) as usize;
    for yo in 0..hh {
        let yi = yo as i64 + dy;
        if yi < 0 || yi >= hh as i64 {
            continue;
        }
        let out_row = &mut out[yo * hw..(yo + 1) * hw];
        let in_row = &inp[yi as usize * hw..(yi as usize + 1) * hw];
        for xo in x0..x1 {
            out_row[xo] += weight * in_row[(xo as i64 + dx) as usize];
        }
    }
}

/// Transposed form of [`conv_axpy_unit`]: in-gradient[yi][xi] += w * g[yo][xo].
fn conv_axpy_unit_t(gin: &mut [f64], g: &[f64], weight: f64, hh: usize, hw: usize, ky: usize, kx: usize) {
    let dy = ky as i64 - 1;
    let dx = kx as i64 - 1;
    let x0 = (-dx).max(0) as usize;
    let x1 = hw - dx.max(0) as usize;
    for yo in 0..hh {
        let yi = yo as i64 + dy;
        if yi < 0 || yi >= hh as i64 {
            continue;
        }
        let gin_row = &mut gin[yi as usize * hw..(yi as usize + 1) * hw];
        let g_row = &g[yo * hw..(yo + 1) * hw];
        for xo in x0..x1 {
            gin_row[(xo as i64 + dx) as usize] += weight * g_row[xo];
        }
    }
}

/// Correlation reduction for the weight gradient of the stride-1 conv:
/// sum over cells of g[yo][xo] * in[yo - 1 + ky][xo - 1 + kx].
fn conv_dot_unit(g: &[f64], inp: &[f64], hh: usize, hw: usize, ky: usize, kx: usize) -> f64 {
    let dy = ky as i64 - 1;
    let dx = kx as i64 - 1;
    let x0 = (-dx).max(0) as usize;
    let x1 = hw - dx.max(0) as usize;
    let mut acc = 0.0;
    for yo in 0..hh {
        let yi = yo as i64 + dy;
        if yi < 0 || yi >= hh as i64 {
            continue;
        }
        let g_row = &g[yo * hw..(yo + 1) * hw];
        let in_row = &inp[yi as usize * hw..(yi as usize + 1) * hw];
        for xo in x0..x1 {
            acc += g_row[xo] * in_row[(xo as i64 + dx) as usize];
        }
    }
    acc
}

/// out[yo][xo] += w * in[2 yo - 1 + ky][2 xo - 1 + kx] over valid cells
/// (the stride-2 front conv).
fn conv_axpy_strided(
    out: &mut [f64],
    inp: &[f64],
    weight: f64,
    hh: usize,
    hw: usize,
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
) {
    let dx = kx as i64 - 1;
    let x0 = if kx == 0 { 1 } else { 0 };
    for yo in 0..hh {
        let yi = 2 * yo as i64 - 1 + ky as i64;
        if yi < 0 || yi >= h as i64 {
            continue;
        }
        let out_row = &mut out[yo * hw..(yo + 1) * hw];
        let in_row = &inp[yi as usize * w..(yi as usize + 1) * w];
        for xo in x0..hw {
            out_row[xo] += weight * in_row[(2 * xo as i64 + dx) as usize];
        }
    }
}

/// Weight-gradient reduction for the stride-2 conv.
fn conv_dot_strided(
    g: &[f64],
    inp: &[f64],
    hh: usize,
    hw: usize,
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
) -> f64 {
    let dx = kx as i64 - 1;
    let x0 = if kx == 0 { 1 } else { 0 };
    let mut acc = 0.0;
    for yo in 0..hh {
        let yi = 2 * yo as i64 - 1 + ky as i64;
        if yi < 0 || yi >= h as i64 {
            continue;
        }
        let g_row = &g[yo * hw..(yo + 1) * hw];
        let in_row = &inp[yi as usize * w..(yi as usize + 1) * w];
        for xo in x0..hw {
            acc += g_row[xo] * in_row[(2 * xo as i64 + dx) as usize];
        }
    }
    acc
}

/// Encodes an RGB image to a half-resolution feature map.
pub fn encode_image(params: &EncoderParams, img: &ColorImage) -> Result<FeatureMap, EncoderError> {
    encode_image_cached(params, img).map(|(fm, _)| fm)
}

/// As [`encode_image`], also returning the activations needed by
/// [`image_backward`].
pub fn encode_image_cached(
    params: &EncoderParams,
    img: &ColorImage,
) -> Result<(FeatureMap, ImageCache), EncoderError> {
    if img.width % 2 != 0 || img.height % 2 != 0 {
        return Err(EncoderError::OddDimensions(img.width, img.height));
    }
    let w = img.width as usize;
    let h = img.height as usize;
    let (hw, hh) = (w / 2, h / 2);
    let d = params.dim;

    // channel-major planes, values centered to [-0.5, 0.5]
    let mut input = vec![0.0f64; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let rgb = img.get(x as u32, y as u32);
            for c in 0..3 {
                input[(c * h + y) * w + x] = rgb[c] as f64 / 255.0 - 0.5;
            }
        }
    }

    // conv 3x3, stride 2, pad 1
    let mut h1 = vec![0.0f64; CONV1_CHANNELS * hh * hw];
    for oc in 0..CONV1_CHANNELS {
        let (out_plane, bias) = (&mut h1[oc * hh * hw..(oc + 1) * hh * hw], params.conv1_b[oc]);
        out_plane.fill(bias);
        for ic in 0..3 {
            let in_plane = &input[ic * h * w..(ic + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let weight = params.conv1_w[((oc * 3 + ic) * 3 + ky) * 3 + kx];
                    conv_axpy_strided(out_plane, in_plane, weight, hh, hw, h, w, ky, kx);
                }
            }
        }
    }
    tanh_all(&mut h1);

    // conv 3x3, stride 1, pad 1
    let mut h2 = vec![0.0f64; CONV2_CHANNELS * hh * hw];
    for oc in 0..CONV2_CHANNELS {
        let (out_plane, bias) = (&mut h2[oc * hh * hw..(oc + 1) * hh * hw], params.conv2_b[oc]);
        out_plane.fill(bias);
        for ic in 0..CONV1_CHANNELS {
            let in_plane = &h1[ic * hh * hw..(ic + 1) * hh * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let weight = params.conv2_w[((oc * CONV1_CHANNELS + ic) * 3 + ky) * 3 + kx];
                    conv_axpy_unit(out_plane, in_plane, weight, hh, hw, ky, kx);
                }
            }
        }
    }
    tanh_all(&mut h2);

    // pointwise projection to d channels, cell-major output
    let cells = hh * hw;
    let mut raw = vec![0.0f64; cells * d];
    for cell in 0..cells {
        for dc in 0..d {
            let mut acc = params.proj_b[dc];
            for c2 in 0..CONV2_CHANNELS {
                acc += params.proj_w[dc * CONV2_CHANNELS + c2] * h2[c2 * cells + cell];
            }
            raw[cell * d + dc] = acc;
        }
    }

    let fm = FeatureMap::from_raw(hw as u32, hh as u32, d, raw, params.normalize)?;
    Ok((fm, ImageCache { half_w: hw, half_h: hh, input, h1, h2 }))
}

/// Accumulates parameter gradients of the 2D path given the gradient of
/// the loss with respect to the raw (pre-normalization) features.
pub fn image_backward(
    params: &EncoderParams,
    cache: &ImageCache,
    grad_raw: &[f64],
    grads: &mut EncoderParams,
) {
    let (hw, hh) = (cache.half_w, cache.half_h);
    let (w, h) = (hw * 2, hh * 2);
    let d = params.dim;
    let cells = hh * hw;
    assert_eq!(grad_raw.len(), cells * d);

    // projection layer
    let mut gh2 = vec![0.0f64; CONV2_CHANNELS * cells];
    for cell in 0..cells {
        for dc in 0..d {
            let g = grad_raw[cell * d + dc];
            if g == 0.0 {
                continue;
            }
            grads.proj_b[dc] += g;
            for c2 in 0..CONV2_CHANNELS {
                grads.proj_w[dc * CONV2_CHANNELS + c2] += g * cache.h2[c2 * cells + cell];
                gh2[c2 * cells + cell] += g * params.proj_w[dc * CONV2_CHANNELS + c2];
            }
        }
    }

    // through tanh of conv2
    for (g, y) in gh2.iter_mut().zip(&cache.h2) {
        *g *= 1.0 - y * y;
    }

    // conv2 backward
    let mut gh1 = vec![0.0f64; CONV1_CHANNELS * cells];
    for oc in 0..CONV2_CHANNELS {
        let g_plane = &gh2[oc * cells..(oc + 1) * cells];
        grads.conv2_b[oc] += g_plane.iter().sum::<f64>();
        for ic in 0..CONV1_CHANNELS {
            let h1_plane = &cache.h1[ic * cells..(ic + 1) * cells];
            let gh1_plane = &mut gh1[ic * cells..(ic + 1) * cells];
            for ky in 0..3 {
                for kx in 0..3 {
                    let widx = ((oc * CONV1_CHANNELS + ic) * 3 + ky) * 3 + kx;
                    grads.conv2_w[widx] += conv_dot_unit(g_plane, h1_plane, hh, hw, ky, kx);
                    conv_axpy_unit_t(gh1_plane, g_plane, params.conv2_w[widx], hh, hw, ky, kx);
                }
            }
        }
    }

    // through tanh of conv1
    for (g, y) in gh1.iter_mut().zip(&cache.h1) {
        *g *= 1.0 - y * y;
    }

    // conv1 backward (input gradients are not needed)
    for oc in 0..CONV1_CHANNELS {
        let g_plane = &gh1[oc * cells..(oc + 1) * cells];
        grads.conv1_b[oc] += g_plane.iter().sum::<f64>();
        for ic in 0..3 {
            let in_plane = &cache.input[ic * h * w..(ic + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    grads.conv1_w[((oc * 3 + ic) * 3 + ky) * 3 + kx] +=
                        conv_dot_strided(g_plane, in_plane, hh, hw, h, w, ky, kx);
                }
            }
        }
    }
}

/// Activations retained for the 3D backward pass.
pub struct ChunkCache {
    neighborhoods: Vec<f64>, // [n][27]
    hidden: Vec<f64>,        // [n][32], post-tanh
}

/// Encodes every occupied voxel of a chunk.
pub fn encode_chunk(
    params: &EncoderParams,
    chunk: &OccupancyChunk,
) -> Result<VoxelFeatures, EncoderError> {
    if chunk.is_empty() {
        return Err(EncoderError::EmptyChunk);
    }
    encode_chunk_subset_cached(params, chunk, chunk.occupied()).map(|(vf, _)| vf)
}

/// Encodes only the listed occupied voxels (sorted, deduplicated); the
/// loss only ever references voxels present in its match set, so training
/// skips the rest of the chunk.
pub fn encode_chunk_subset_cached(
    params: &EncoderParams,
    chunk: &OccupancyChunk,
    voxels: &[u64],
) -> Result<(VoxelFeatures, ChunkCache), EncoderError> {
    let n = voxels.len();
    let d = params.dim;
    let mut neighborhoods = vec![0.0f64; n * NEIGHBORHOOD];
    let mut hidden = vec![0.0f64; n * HIDDEN_3D];
    let mut raw = vec![0.0f64; n * d];

    for (r, &voxel) in voxels.iter().enumerate() {
        if !chunk.is_occupied(voxel) {
            return Err(EncoderError::VoxelNotOccupied(voxel));
        }
        let nb = chunk.neighborhood(voxel);
        neighborhoods[r * NEIGHBORHOOD..(r + 1) * NEIGHBORHOOD].copy_from_slice(&nb);
        for o in 0..HIDDEN_3D {
            let mut acc = params.fc1_b[o];
            for i in 0..NEIGHBORHOOD {
                acc += params.fc1_w[o * NEIGHBORHOOD + i] * nb[i];
            }
            hidden[r * HIDDEN_3D + o] = acc.tanh();
        }
        for dc in 0..d {
            let mut acc = params.fc2_b[dc];
            for o in 0..HIDDEN_3D {
                acc += params.fc2_w[dc * HIDDEN_3D + o] * hidden[r * HIDDEN_3D + o];
            }
            raw[r * d + dc] = acc;
        }
    }

    let vf = VoxelFeatures::from_raw(voxels.to_vec(), d, raw, params.normalize)?;
    Ok((vf, ChunkCache { neighborhoods, hidden }))
}

/// Accumulates parameter gradients of the 3D path.
pub fn chunk_backward(
    params: &EncoderParams,
    cache: &ChunkCache,
    grad_raw: &[f64],
    grads: &mut EncoderParams,
) {
    let d = params.dim;
    let n = cache.hidden.len() / HIDDEN_3D;
    assert_eq!(grad_raw.len(), n * d);

    let mut gh = vec![0.0f64; HIDDEN_3D];
    for r in 0..n {
        gh.fill(0.0);
        let mut touched = false;
        for dc in 0..d {
            let g = grad_raw[r * d + dc];
            if g == 0.0 {
                continue;
            }
            touched = true;
            grads.fc2_b[dc] += g;
            for o in 0..HIDDEN_3D {
                grads.fc2_w[dc * HIDDEN_3D + o] += g * cache.hidden[r * HIDDEN_3D + o];
                gh[o] += g * params.fc2_w[dc * HIDDEN_3D + o];
            }
        }
        if !touched {
            continue;
        }
        for o in 0..HIDDEN_3D {
            let y = cache.hidden[r * HIDDEN_3D + o];
            let gz = gh[o] * (1.0 - y * y);
            if gz == 0.0 {
                continue;
            }
            grads.fc1_b[o] += gz;
            for i in 0..NEIGHBORHOOD {
                grads.fc1_w[o * NEIGHBORHOOD + i] += gz * cache.neighborhoods[r * NEIGHBORHOOD + i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::features::FeatureStore;

    fn random_image(w: u32, h: u32, seed: u64) -> ColorImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<u8> = (0..(w * h * 3) as usize).map(|_| rng.gen_range(0..=255)).collect();
        ColorImage::new(w, h, data)
    }

    #[test]
    fn output_is_half_resolution() {
        let params = EncoderParams::init(32, true, 1);
        let fm = encode_image(&params, &random_image(64, 48, 2)).unwrap();
        assert_eq!((fm.width, fm.height, fm.dim), (32, 24, 32));
        // normalized rows are unit length
        for i in 0..fm.count() {
            let n: f64 = fm.vector(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn odd_dimensions_are_rejected() {
        let params = EncoderParams::init(8, false, 1);
        let err = encode_image(&params, &random_image(63, 48, 2)).unwrap_err();
        assert!(matches!(err, EncoderError::OddDimensions(63, 48)));
    }

    #[test]
    fn zero_params_give_zero_features_and_normalization_error() {
        let mut params = EncoderParams::init(8, false, 1);
        for t in params.tensor_muts() {
            t.fill(0.0);
        }
        let fm = encode_image(&params, &random_image(16, 12, 3)).unwrap();
        assert!(fm.data().iter().all(|x| *x == 0.0));

        params.normalize = true;
        let err = encode_image(&params, &random_image(16, 12, 3)).unwrap_err();
        assert_eq!(err, EncoderError::NormalizationOfZeroVector);
    }

    #[test]
    fn perturbation_stays_within_receptive_field() {
        // conv3x3(s2,p1) then conv3x3(s1,p1): output cell (xo, yo) reads
        // inputs [2xo-3, 2xo+3] x [2yo-3, 2yo+3]
        let params = EncoderParams::init(8, false, 5);
        let img = random_image(32, 24, 7);
        let base = encode_image(&params, &img).unwrap();

        let (pu, pv) = (15u32, 9u32);
        let mut bumped = img.clone();
        let mut rgb = bumped.get(pu, pv);
        rgb[0] = rgb[0].wrapping_add(96);
        bumped.set(pu, pv, rgb);
        let out = encode_image(&params, &bumped).unwrap();

        let mut changed_inside = false;
        for yo in 0..base.height {
            for xo in 0..base.width {
                let cell = base.cell_index(xo, yo);
                let diff = base.vector(cell) != out.vector(cell);
                let in_field = (2 * xo as i64 - pu as i64).abs() <= 3
                    && (2 * yo as i64 - pv as i64).abs() <= 3;
                if !in_field {
                    assert!(!diff, "cell ({xo},{yo}) outside the receptive field changed");
                } else if diff {
                    changed_inside = true;
                }
            }
        }
        assert!(changed_inside);
    }

    #[test]
    fn isolated_voxel_feature_follows_the_affine_path() {
        use crate::voxels::OccupancyChunk;
        let params = EncoderParams::init(4, false, 9);
        let chunk = OccupancyChunk::new(0, [0.0; 3], 0.02, [5, 5, 5], vec![62]); // interior voxel
        let vf = encode_chunk(&params, &chunk).unwrap();
        assert_eq!(vf.count(), 1);
        // neighborhood is one-hot at the center slot (13)
        let mut expected = vec![0.0; 4];
        for dc in 0..4 {
            let mut acc = params.fc2_b[dc];
            for o in 0..HIDDEN_3D {
                let z = params.fc1_b[o] + params.fc1_w[o * NEIGHBORHOOD + 13];
                acc += params.fc2_w[dc * HIDDEN_3D + o] * z.tanh();
            }
            expected[dc] = acc;
        }
        for (got, want) in vf.vector(0).iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_neighborhoods_give_identical_features() {
        use crate::voxels::OccupancyChunk;
        let params = EncoderParams::init(6, true, 11);
        // two isolated voxels far apart: same one-hot neighborhood
        let chunk = OccupancyChunk::new(0, [0.0; 3], 0.02, [9, 9, 9], vec![120, 480]);
        let vf = encode_chunk(&params, &chunk).unwrap();
        assert_eq!(vf.vector(0), vf.vector(1));
    }

    #[test]
    fn empty_chunk_is_an_error() {
        use crate::voxels::OccupancyChunk;
        let params = EncoderParams::init(4, false, 1);
        let chunk = OccupancyChunk::new(0, [0.0; 3], 0.02, [3, 3, 3], vec![]);
        assert_eq!(encode_chunk(&params, &chunk), Err(EncoderError::EmptyChunk));
    }

    #[test]
    fn flat_access_round_trips() {
        let params = EncoderParams::init(4, false, 3);
        let mut copy = params.clone();
        let n = params.flat_len();
        assert_eq!(
            n,
            params.tensor_refs().iter().map(|t| t.len()).sum::<usize>()
        );
        copy.flat_add(0, 0.5);
        copy.flat_add(n - 1, -0.25);
        assert_eq!(copy.flat_get(0), params.flat_get(0) + 0.5);
        assert_eq!(copy.flat_get(n - 1), params.flat_get(n - 1) - 0.25);
    }

    #[test]
    fn add_scaled_matches_flat_arithmetic() {
        let a = EncoderParams::init(4, false, 3);
        let b = EncoderParams::init(4, false, 4);
        let mut c = a.clone();
        c.add_scaled(&b, -0.5);
        for i in (0..a.flat_len()).step_by(97) {
            assert!((c.flat_get(i) - (a.flat_get(i) - 0.5 * b.flat_get(i))).abs() < 1e-15);
        }
    }
}
