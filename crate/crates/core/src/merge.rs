//! Density-weighted merge of the face and both eye feature maps into the
//! global feature map consumed by the decoder.

use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::FeatureMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub epsilon: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self { epsilon: 1e-8 }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(Error::Config(format!("merge epsilon {} outside (0, 1e-3]", self.epsilon)));
        }
        Ok(())
    }
}

fn check(face: &FeatureMap<impl Real>, other: &FeatureMap<impl Real>, name: &'static str) -> Result<()> {
    if face.features.dim() != other.features.dim() || face.density.dim() != other.density.dim() {
        return Err(Error::shape(
            name,
            format!("{:?}", face.features.dim()),
            format!("{:?}", other.features.dim()),
        ));
    }
    Ok(())
}

/// `F = (Σ_b f_b d_b) / max(ω, ε)` with `ω = Σ_b d_b` per pixel over the
/// face, right-eye, and left-eye branches. The returned density is the
/// diagnostic `min(ω, 1)`.
pub fn merge_features<T: Real>(
    face: &FeatureMap<T>,
    right_eye: &FeatureMap<T>,
    left_eye: &FeatureMap<T>,
    cfg: &MergeConfig,
) -> Result<FeatureMap<T>> {
    cfg.validate()?;
    check(face, right_eye, "merge right eye")?;
    check(face, left_eye, "merge left eye")?;
    let branches = [face, right_eye, left_eye];
    if branches.iter().any(|b| b.density.iter().any(|&d| d < T::zero())) {
        return Err(Error::Domain("negative density entering the feature merge".into()));
    }
    let (c, h, w) = face.features.dim();
    let eps = T::lit(cfg.epsilon);
    let mut features = Array3::zeros((c, h, w));
    let mut density = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let d = [face.density[[i, j]], right_eye.density[[i, j]], left_eye.density[[i, j]]];
            // eye terms are summed first so swapping the eyes is exact
            let omega = d[0] + (d[1] + d[2]);
            let denom = omega.max(eps);
            density[[i, j]] = omega.min(T::one());
            let wt = [d[0] / denom, d[1] / denom, d[2] / denom];
            for ch in 0..c {
                let eyes = right_eye.features[[ch, i, j]] * wt[1] + left_eye.features[[ch, i, j]] * wt[2];
                features[[ch, i, j]] = face.features[[ch, i, j]] * wt[0] + eyes;
            }
        }
    }
    Ok(FeatureMap { density, features })
}

/// Gradients for one merged branch.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchGrad<T> {
    pub density: Array2<T>,
    pub features: Array3<T>,
}

/// Backward of [`merge_features`] with respect to all six inputs, in
/// (face, right, left) order. The diagnostic density output carries no
/// gradient.
pub fn merge_backward<T: Real>(
    face: &FeatureMap<T>,
    right_eye: &FeatureMap<T>,
    left_eye: &FeatureMap<T>,
    merged: &FeatureMap<T>,
    d_merged: ArrayView3<T>,
    cfg: &MergeConfig,
) -> [BranchGrad<T>; 3] {
    let (c, h, w) = face.features.dim();
    let eps = T::lit(cfg.epsilon);
    let branches = [face, right_eye, left_eye];
    let mut grads: [BranchGrad<T>; 3] = std::array::from_fn(|_| BranchGrad {
        density: Array2::zeros((h, w)),
        features: Array3::zeros((c, h, w)),
    });
    for i in 0..h {
        for j in 0..w {
            let d: [T; 3] = std::array::from_fn(|b| branches[b].density[[i, j]]);
            let omega = d[0] + (d[1] + d[2]);
            let guarded = omega < eps;
            let inv = T::one() / omega.max(eps);
            for ch in 0..c {
                let g = d_merged[[ch, i, j]];
                if g == T::zero() {
                    continue;
                }
                let out = merged.features[[ch, i, j]];
                for b in 0..3 {
                    let f = branches[b].features[[ch, i, j]];
                    grads[b].features[[ch, i, j]] = g * d[b] * inv;
                    // ∂F/∂d_b = (f_b - F) / ω, or f_b / ε on the guard path
                    let df = if guarded { f } else { f - out };
                    grads[b].density[[i, j]] += g * df * inv;
                }
            }
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(d: f64, f: f64) -> FeatureMap<f64> {
        FeatureMap {
            density: Array2::from_elem((1, 1), d),
            features: Array3::from_elem((1, 1, 1), f),
        }
    }

    #[test]
    fn scalar_cases() {
        let cfg = MergeConfig::default();
        let m = merge_features(&map(1.0, 2.0), &map(1.0, 4.0), &map(0.0, 123.0), &cfg).unwrap();
        assert_eq!(m.features[[0, 0, 0]], 3.0);
        assert_eq!(m.density[[0, 0]], 1.0);
        let z = merge_features(&map(0.0, 2.0), &map(0.0, 4.0), &map(0.0, 5.0), &cfg).unwrap();
        assert_eq!(z.features[[0, 0, 0]], 0.0);
        let single = merge_features(&map(0.4, -1.5), &map(0.0, 4.0), &map(0.0, 5.0), &cfg).unwrap();
        assert_eq!(single.features[[0, 0, 0]], -1.5);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = MergeConfig::default();
        assert!(merge_features(&map(-0.1, 1.0), &map(0.0, 1.0), &map(0.0, 1.0), &cfg).is_err());
        let wide = FeatureMap::<f64>::zeros(2, 1, 1);
        assert!(matches!(
            merge_features(&map(0.1, 1.0), &wide, &map(0.0, 1.0), &cfg),
            Err(Error::Shape { .. })
        ));
        assert!(MergeConfig { epsilon: 0.5 }.validate().is_err());
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
        FeatureMap {
            density: uniform_matrix::<f64, _>(h, w, 1.0, rng).mapv(f64::abs),
            features: uniform_matrix::<f64, _>(c, h * w, 2.0, rng)
                .into_shape_with_order((c, h, w))
                .unwrap(),
        }
    }

    #[test]
    fn symmetric_in_eye_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (f, r, l) = (random_map(&mut rng, 3, 4, 5), random_map(&mut rng, 3, 4, 5), random_map(&mut rng, 3, 4, 5));
        let cfg = MergeConfig::default();
        assert_eq!(merge_features(&f, &r, &l, &cfg).unwrap(), merge_features(&f, &l, &r, &cfg).unwrap());
    }

    #[test]
    fn merge_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let maps = [random_map(&mut rng, 2, 2, 3), random_map(&mut rng, 2, 2, 3), random_map(&mut rng, 2, 2, 3)];
        let probe = uniform_matrix::<f64, _>(2, 6, 1.0, &mut rng).into_shape_with_order((2, 2, 3)).unwrap();
        let cfg = MergeConfig::default();
        let loss = |m: &[FeatureMap<f64>; 3]| (merge_features(&m[0], &m[1], &m[2], &cfg).unwrap().features * &probe).sum();
        let merged = merge_features(&maps[0], &maps[1], &maps[2], &cfg).unwrap();
        let grads = merge_backward(&maps[0], &maps[1], &maps[2], &merged, probe.view(), &cfg);
        let h = 1e-6;
        for b in 0..3 {
            for (idx, &g) in grads[b].density.indexed_iter() {
                let mut p = maps.clone();
                p[b].density[idx] += h;
                let mut m = maps.clone();
                m[b].density[idx] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!((fd - g).abs() < 1e-6, "branch {b} {idx:?}");
            }
            for (idx, &g) in grads[b].features.indexed_iter() {
                let mut p = maps.clone();
                p[b].features[idx] += h;
                let mut m = maps.clone();
                m[b].features[idx] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!((fd - g).abs() < 1e-6);
            }
        }
    }
}
