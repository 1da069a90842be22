//! Fixed geodesic attention and face splitting.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use super::layers::softmax_rows;
use crate::error::{Error, Result};
use crate::geometry::GeodesicField;

/// Row-stochastic attention matrix over a face subset, derived from rest-mesh
/// geodesic distances: `A_i· = softmax(−(D_i·/scale)^p_geo)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBias {
    weights: Array2<f64>,
}

impl AttentionBias {
    pub fn from_weights(weights: Array2<f64>) -> Result<Self> {
        if weights.nrows() != weights.ncols() {
            return Err(Error::Dimension(format!(
                "attention bias must be square, got {}x{}",
                weights.nrows(),
                weights.ncols()
            )));
        }
        Ok(AttentionBias { weights })
    }

    /// Uniform attention over `n` faces (used when no geometry is available).
    pub fn uniform(n: usize) -> Self {
        AttentionBias {
            weights: Array2::from_elem((n, n), 1.0 / n as f64),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.nrows() == 0
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// Reorders rows and columns: entry `(i, j)` of the result is entry
    /// `(perm[i], perm[j])` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = perm.len();
        AttentionBias {
            weights: Array2::from_shape_fn((n, n), |(i, j)| self.weights[(perm[i], perm[j])]),
        }
    }
}

pub fn geodesic_attention(field: &GeodesicField, subset: &[usize], p_geo: f64) -> Result<AttentionBias> {
    geodesic_attention_scaled(field, subset, p_geo, field.scale())
}

/// [`geodesic_attention`] with an explicit distance divisor in place of the
/// field's own.
pub fn geodesic_attention_scaled(
    field: &GeodesicField,
    subset: &[usize],
    p_geo: f64,
    scale: f64,
) -> Result<AttentionBias> {
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!("geodesic scale must be positive, got {scale}")));
    }
    if subset.is_empty() {
        return Err(Error::InvalidArgument("geodesic attention over an empty face subset".into()));
    }
    if !(p_geo > 0.0) || !p_geo.is_finite() {
        return Err(Error::InvalidArgument(format!("p_geo must be positive, got {p_geo}")));
    }
    if let Some(&bad) = subset.iter().find(|&&f| f >= field.face_count()) {
        return Err(Error::InvalidArgument(format!(
            "face {bad} outside a geodesic field of {} faces",
            field.face_count()
        )));
    }
    let n = subset.len();
    let mut logits = Array2::from_shape_fn((n, n), |(i, j)| {
        let d = field.get(subset[i], subset[j]);
        if d.is_infinite() {
            f64::NEG_INFINITY
        } else {
            -(d / scale).powf(p_geo)
        }
    });
    softmax_rows(&mut logits);
    Ok(AttentionBias { weights: logits })
}

/// Random partition of `0..face_count` into `n_s` subsets whose sizes differ
/// by at most one. Each subset is sorted ascending.
pub fn split_faces<R: Rng + ?Sized>(face_count: usize, n_s: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if n_s == 0 {
        return Err(Error::InvalidArgument("n_s must be at least 1".into()));
    }
    if n_s > face_count {
        return Err(Error::InvalidArgument(format!(
            "cannot split {face_count} faces into {n_s} subsets"
        )));
    }
    if n_s == 1 {
        return Ok(vec![(0..face_count).collect()]);
    }
    let mut order: Vec<usize> = (0..face_count).collect();
    order.shuffle(rng);
    let base = face_count / n_s;
    let extra = face_count % n_s;
    let mut out = Vec::with_capacity(n_s);
    let mut start = 0;
    for k in 0..n_s {
        let len = base + usize::from(k < extra);
        let mut part = order[start..start + len].to_vec();
        part.sort_unstable();
        out.push(part);
        start += len;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn field(n: usize, d: &[f32]) -> GeodesicField {
        GeodesicField::from_dense(n, d.to_vec(), 1.0).unwrap()
    }

    #[test]
    fn singleton_is_one() {
        let g = field(1, &[0.0]);
        let a = geodesic_attention(&g, &[0], 20.0).unwrap();
        assert_eq!(a.weights()[(0, 0)], 1.0);
    }

    #[test]
    fn two_faces_half_meter() {
        let g = field(2, &[0.0, 0.5, 0.5, 0.0]);
        let a = geodesic_attention(&g, &[0, 1], 1.0).unwrap();
        // 1 / (1 + e^-0.5) and e^-0.5 / (1 + e^-0.5)
        assert!((a.weights()[(0, 0)] - 0.622_459_331_201_854_6).abs() < 1e-12);
        assert!((a.weights()[(0, 1)] - 0.377_540_668_798_145_4).abs() < 1e-12);
    }

    #[test]
    fn infinite_distance_gets_zero_weight() {
        let g = field(2, &[0.0, f32::INFINITY, f32::INFINITY, 0.0]);
        let a = geodesic_attention(&g, &[0, 1], 20.0).unwrap();
        assert_eq!(a.weights()[(0, 1)], 0.0);
        assert_eq!(a.weights()[(0, 0)], 1.0);
    }

    #[test]
    fn empty_subset_rejected() {
        let g = field(1, &[0.0]);
        assert!(geodesic_attention(&g, &[], 1.0).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(split_faces(7, 1, &mut rng).unwrap(), vec![(0..7).collect::<Vec<_>>()]);
        let parts = split_faces(10, 4, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![3, 3, 2, 2]);
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(parts, split_faces(10, 4, &mut ChaCha8Rng::seed_from_u64(4)).unwrap());
        assert!(split_faces(3, 4, &mut rng).is_err());
        assert!(split_faces(3, 0, &mut rng).is_err());
    }
}
