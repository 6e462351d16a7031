use crate::attention::attend;
use crate::error::{MuseError, Result};
use crate::multipole::{cluster_heads, muse_acausal_frozen, MuseConfig};
use crate::numerics::{Scalar, Tensor4};

/// Central-difference directional derivatives of exact and approximate
/// outputs with respect to the queries.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub exact_dd: Vec<f64>,
    pub muse_dd: Vec<f64>,
    /// `‖muse_dd − exact_dd‖ / ‖exact_dd‖`.
    pub rel_gap: f64,
}

/// Probes `q ± eps·direction` (direction normalised to unit norm). The
/// clustering of the unperturbed queries is held fixed; centroids follow
/// the perturbed points.
pub fn fd_sensitivity<T: Scalar>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    config: &MuseConfig,
    direction: &Tensor4<T>,
    eps: f64,
) -> Result<FdReport> {
    if !(eps > 0.0) {
        return Err(MuseError::config(format!("eps must be positive, got {eps}")));
    }
    if direction.shape() != q.shape() {
        return Err(MuseError::shape(format!(
            "direction {} for queries {}",
            direction.shape(),
            q.shape()
        )));
    }
    let norm = direction.sq_norm().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(MuseError::config("direction must be non-zero and finite"));
    }
    let step = |sign: f64| {
        let f = T::of(sign * eps / norm);
        let data = q.data().iter().zip(direction.data()).map(|(&a, &b)| a + f * b).collect();
        Tensor4::new(q.shape(), data)
    };
    let (plus, minus) = (step(1.0)?, step(-1.0)?);
    let scale = T::of(config.scale_for(q.shape().d));
    let clusterings = cluster_heads(q, k, config)?;

    let diff = |a: &Tensor4<T>, b: &Tensor4<T>| -> Vec<f64> {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x.as_f64() - y.as_f64()) / (2.0 * eps))
            .collect()
    };
    let exact_dd = diff(
        &attend(&plus, k, v, None, scale)?.y,
        &attend(&minus, k, v, None, scale)?.y,
    );
    let muse_dd = diff(
        &muse_acausal_frozen(&plus, k, v, config, &clusterings)?.y,
        &muse_acausal_frozen(&minus, k, v, config, &clusterings)?.y,
    );
    if exact_dd.iter().chain(&muse_dd).any(|x| !x.is_finite()) {
        return Err(MuseError::NonFinite("finite-difference quotient".into()));
    }
    let num: f64 = exact_dd.iter().zip(&muse_dd).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = exact_dd.iter().map(|a| a * a).sum();
    if den == 0.0 {
        return Err(MuseError::ZeroReferenceNorm);
    }
    Ok(FdReport {
        exact_dd,
        muse_dd,
        rel_gap: (num / den).sqrt(),
    })
}
