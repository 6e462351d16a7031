use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{MuseError, Result};
use crate::numerics::{derive_seed, Rng, Scalar, Shape4, Tensor4};

use super::qkv_io::load_qkv;

/// Independent value noise, relative to the member noise scale, on top of the part of a
/// value that is linear in its key's offset from the component centre.
pub const VALUE_NOISE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    IsotropicGaussian,
    GaussianMixture,
    File,
}

/// Description of a synthetic or recorded Q/K/V workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub batch: usize,
    pub heads: usize,
    pub n: usize,
    pub d: usize,
    pub c_true: usize,
    pub spread: f64,
    pub centroid_scale: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl WorkloadSpec {
    pub fn isotropic(batch: usize, heads: usize, n: usize, d: usize, seed: u64) -> Self {
        Self {
            kind: WorkloadKind::IsotropicGaussian,
            batch,
            heads,
            n,
            d,
            c_true: 1,
            spread: 1.0,
            centroid_scale: 0.0,
            seed,
            path: None,
        }
    }

    /// Mixture with unit centroid scale.
    pub fn mixture(n: usize, d: usize, c_true: usize, spread: f64, seed: u64) -> Self {
        Self {
            kind: WorkloadKind::GaussianMixture,
            batch: 1,
            heads: 1,
            n,
            d,
            c_true,
            spread,
            centroid_scale: 1.0,
            seed,
            path: None,
        }
    }

    pub fn file(path: impl Into<PathBuf>) -> Self {
        Self {
            kind: WorkloadKind::File,
            batch: 0,
            heads: 0,
            n: 0,
            d: 0,
            c_true: 1,
            spread: 1.0,
            centroid_scale: 0.0,
            seed: 0,
            path: Some(path.into()),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn shape(&self) -> Shape4 {
        Shape4::new(self.batch, self.heads, self.n, self.d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == WorkloadKind::File {
            return match self.path {
                Some(_) => Ok(()),
                None => Err(MuseError::config("file workload needs a path")),
            };
        }
        if self.batch == 0 || self.heads == 0 || self.n == 0 || self.d == 0 {
            return Err(MuseError::config(format!("invalid workload dims {}", self.shape())));
        }
        if self.kind == WorkloadKind::GaussianMixture {
            if !(self.spread > 0.0) || !self.spread.is_finite() {
                return Err(MuseError::config(format!("spread must be positive, got {}", self.spread)));
            }
            if self.c_true == 0 || self.c_true > self.n {
                return Err(MuseError::config(format!(
                    "c_true must be in 1..={}, got {}",
                    self.n, self.c_true
                )));
            }
            if !(self.centroid_scale >= 0.0) {
                return Err(MuseError::config("centroid_scale must be non-negative"));
            }
        }
        Ok(())
    }
}

/// A query/key/value triple of equal shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Qkv<T> {
    pub q: Tensor4<T>,
    pub k: Tensor4<T>,
    pub v: Tensor4<T>,
}

impl<T: Scalar> Qkv<T> {
    pub fn shape(&self) -> Shape4 {
        self.q.shape()
    }
}

fn gaussian(len: usize, sigma: f64, rng: &mut Rng) -> Vec<f64> {
    (0..len).map(|_| sigma * rng.normal()).collect()
}

/// One slice of a mixture. Queries and keys each get `c_true` component
/// centres and draw their labels independently; members sit at their centre
/// plus isotropic noise of scale `spread · centroid_scale`. Values follow
/// their key's label: `v = v_c + A (k − k_c) + VALUE_NOISE · noise` with a
/// random `A`.
fn mixture_slice(spec: &WorkloadSpec, rng: &mut Rng) -> [Vec<f64>; 3] {
    let (n, d, c) = (spec.n, spec.d, spec.c_true);
    let cs = spec.centroid_scale;
    let s = spec.spread * cs;
    let q_centres = gaussian(c * d, cs, rng);
    let k_centres = gaussian(c * d, cs, rng);
    let v_centres = gaussian(c * d, cs, rng);
    let mix = gaussian(d * d, 1.0 / (d as f64).sqrt(), rng);

    let mut q = Vec::with_capacity(n * d);
    for _ in 0..n {
        let l = rng.below(c);
        q.extend(q_centres[l * d..(l + 1) * d].iter().map(|&m| m + s * rng.normal()));
    }
    let mut k = Vec::with_capacity(n * d);
    let mut v = Vec::with_capacity(n * d);
    let mut offset = vec![0.0; d];
    for _ in 0..n {
        let l = rng.below(c);
        for (o, &m) in offset.iter_mut().zip(&k_centres[l * d..(l + 1) * d]) {
            *o = s * rng.normal();
            k.push(m + *o);
        }
        for a in 0..d {
            let lin: f64 = mix[a * d..(a + 1) * d].iter().zip(&offset).map(|(x, y)| x * y).sum();
            v.push(v_centres[l * d + a] + lin + VALUE_NOISE * s * rng.normal());
        }
    }
    [q, k, v]
}

/// Materialises a workload. Synthetic kinds are deterministic per seed:
/// slice `i` draws from stream `derive_seed(seed, i, 0)`.
pub fn generate<T: Scalar>(spec: &WorkloadSpec) -> Result<Qkv<T>> {
    spec.validate()?;
    if spec.kind == WorkloadKind::File {
        return load_qkv(spec.path.as_ref().expect("validated"));
    }
    let shape = spec.shape();
    let mut parts: [Vec<Vec<T>>; 3] = Default::default();
    for slice in 0..shape.slices() {
        let mut rng = Rng::new(derive_seed(spec.seed, slice as u64, 0));
        let raw = match spec.kind {
            WorkloadKind::IsotropicGaussian => {
                let len = shape.head_len();
                [gaussian(len, 1.0, &mut rng), gaussian(len, 1.0, &mut rng), gaussian(len, 1.0, &mut rng)]
            }
            WorkloadKind::GaussianMixture => mixture_slice(spec, &mut rng),
            WorkloadKind::File => unreachable!(),
        };
        for (dst, src) in parts.iter_mut().zip(raw) {
            dst.push(src.into_iter().map(T::of).collect());
        }
    }
    let [q, k, v] = parts;
    Ok(Qkv {
        q: Tensor4::from_heads(shape, q)?,
        k: Tensor4::from_heads(shape, k)?,
        v: Tensor4::from_heads(shape, v)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = WorkloadSpec::isotropic(2, 3, 16, 4, 99);
        let a = generate::<f64>(&spec).unwrap();
        let b = generate::<f64>(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate::<f64>(&spec.with_seed(100)).unwrap();
        assert_ne!(a.q, c.q);
        assert!(a.q.is_finite() && a.k.is_finite() && a.v.is_finite());
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(generate::<f64>(&WorkloadSpec::mixture(8, 2, 9, 0.1, 0)).is_err());
        assert!(generate::<f64>(&WorkloadSpec::mixture(8, 2, 2, 0.0, 0)).is_err());
        assert!(generate::<f64>(&WorkloadSpec::isotropic(1, 0, 8, 2, 0)).is_err());
    }

    #[test]
    fn vanishing_spread_collapses_members_onto_centres() {
        let spec = WorkloadSpec::mixture(64, 4, 4, 1e-30, 1);
        let w = generate::<f64>(&spec).unwrap();
        let mut rows: Vec<&[f64]> = w.q.data().chunks(4).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows.dedup();
        assert!(rows.len() <= 4);
    }
}
