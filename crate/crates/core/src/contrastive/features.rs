//! Per-pixel and per-voxel feature containers.

use super::encoder::EncoderError;

/// Common view over 2D and 3D feature containers: a flat array of `count`
/// vectors of length `dim`. When built with normalization, `data` holds the
/// unit vectors and `norms` the pre-normalization lengths (needed to chain
/// gradients back to the raw features).
pub trait FeatureStore {
    fn dim(&self) -> usize;
    fn count(&self) -> usize;
    fn data(&self) -> &[f64];
    fn norms(&self) -> Option<&[f64]>;

    fn vector(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.data()[i * d..(i + 1) * d]
    }
}

/// Normalizes vectors in place, returning the original norms.
pub(crate) fn normalize_rows(data: &mut [f64], dim: usize) -> Result<Vec<f64>, EncoderError> {
    let count = data.len() / dim;
    let mut norms = Vec::with_capacity(count);
    for i in 0..count {
        let row = &mut data[i * dim..(i + 1) * dim];
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EncoderError::NormalizationOfZeroVector);
        }
        for x in row.iter_mut() {
            *x /= norm;
        }
        norms.push(norm);
    }
    Ok(norms)
}

/// Feature grid at half the source image resolution, one `dim`-vector per
/// cell in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: u32,
    pub height: u32,
    pub dim: usize,
    data: Vec<f64>,
    norms: Option<Vec<f64>>,
}

impl FeatureMap {
    /// Wraps raw feature values, normalizing per cell when requested.
    pub fn from_raw(
        width: u32,
        height: u32,
        dim: usize,
        mut data: Vec<f64>,
        normalize: bool,
    ) -> Result<Self, EncoderError> {
        assert_eq!(data.len(), width as usize * height as usize * dim);
        let norms = if normalize { Some(normalize_rows(&mut data, dim)?) } else { None };
        Ok(Self { width, height, dim, data, norms })
    }

    #[inline]
    pub fn cell_index(&self, cell_u: u32, cell_v: u32) -> usize {
        (cell_v as usize) * (self.width as usize) + cell_u as usize
    }

    /// Container index for a full-resolution pixel.
    pub fn cell_of_pixel(&self, u: u32, v: u32) -> Result<usize, EncoderError> {
        let (cu, cv) = pixel_to_featmap_coord(u, v, self.width * 2, self.height * 2)?;
        Ok(self.cell_index(cu, cv))
    }

    pub fn is_normalized(&self) -> bool {
        self.norms.is_some()
    }
}

impl FeatureStore for FeatureMap {
    fn dim(&self) -> usize {
        self.dim
    }

    fn count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    fn data(&self) -> &[f64] {
        &self.data
    }

    fn norms(&self) -> Option<&[f64]> {
        self.norms.as_deref()
    }
}

/// Maps a full-resolution pixel to its half-resolution feature cell by
/// floor division.
pub fn pixel_to_featmap_coord(
    u: u32,
    v: u32,
    image_width: u32,
    image_height: u32,
) -> Result<(u32, u32), EncoderError> {
    if u >= image_width || v >= image_height {
        return Err(EncoderError::PixelOutOfBounds(u, v));
    }
    Ok((u / 2, v / 2))
}

/// Features for the occupied voxels of one chunk, aligned with a sorted
/// voxel index list.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelFeatures {
    pub dim: usize,
    indices: Vec<u64>,
    data: Vec<f64>,
    norms: Option<Vec<f64>>,
}

impl VoxelFeatures {
    pub fn from_raw(
        indices: Vec<u64>,
        dim: usize,
        mut data: Vec<f64>,
        normalize: bool,
    ) -> Result<Self, EncoderError> {
        assert_eq!(data.len(), indices.len() * dim);
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]), "indices must be sorted");
        let norms = if normalize { Some(normalize_rows(&mut data, dim)?) } else { None };
        Ok(Self { dim, indices, data, norms })
    }

    pub fn voxel_indices(&self) -> &[u64] {
        &self.indices
    }

    /// Container rank of a voxel index.
    pub fn rank_of(&self, voxel: u64) -> Option<usize> {
        self.indices.binary_search(&voxel).ok()
    }

    pub fn is_normalized(&self) -> bool {
        self.norms.is_some()
    }
}

impl FeatureStore for VoxelFeatures {
    fn dim(&self) -> usize {
        self.dim
    }

    fn count(&self) -> usize {
        self.indices.len()
    }

    fn data(&self) -> &[f64] {
        &self.data
    }

    fn norms(&self) -> Option<&[f64]> {
        self.norms.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_mapping_floor_division() {
        assert_eq!(pixel_to_featmap_coord(0, 0, 64, 48).unwrap(), (0, 0));
        assert_eq!(pixel_to_featmap_coord(5, 3, 64, 48).unwrap(), (2, 1));
        assert_eq!(pixel_to_featmap_coord(63, 47, 64, 48).unwrap(), (31, 23));
        assert!(pixel_to_featmap_coord(64, 0, 64, 48).is_err());
    }

    #[test]
    fn normalization_produces_unit_rows() {
        let fm = FeatureMap::from_raw(2, 1, 2, vec![3.0, 4.0, 0.5, 0.0], true).unwrap();
        assert_eq!(fm.vector(0), &[0.6, 0.8]);
        assert_eq!(fm.vector(1), &[1.0, 0.0]);
        assert_eq!(fm.norms().unwrap(), &[5.0, 0.5]);
    }

    #[test]
    fn zero_vector_normalization_fails() {
        let err = FeatureMap::from_raw(1, 1, 2, vec![0.0, 0.0], true).unwrap_err();
        assert!(matches!(err, EncoderError::NormalizationOfZeroVector));
    }

    #[test]
    fn voxel_rank_lookup() {
        let vf = VoxelFeatures::from_raw(vec![3, 9, 40], 1, vec![1.0, 2.0, 3.0], false).unwrap();
        assert_eq!(vf.rank_of(9), Some(1));
        assert_eq!(vf.rank_of(10), None);
    }
}
