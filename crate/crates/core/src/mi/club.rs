//! Contrastive log-ratio upper bound on MI from a known conditional density.

use super::{EstimatorKind, MIEstimate};
use crate::error::{Error, Result};

/// Conditional log-density `ln p(t | x)` evaluated on raw feature vectors.
pub type CondLogDensity<'a> = dyn Fn(&[f64], &[f64]) -> f64 + 'a;

/// How `p(t|x)` is modeled for the bound.
pub enum PtxModel<'a> {
    /// Closed-form conditional (the default route: the feature extractor is
    /// known, so the conditional is a Gaussian around it).
    Known(Box<CondLogDensity<'a>>),
    /// Variational conditional learned by an auxiliary network. Interface
    /// hook only; not implemented.
    AuxiliaryNet,
}

/// Monte-Carlo CLUB estimate on a paired sample:
/// mean of `ln p(t_i | x_i)` minus the mean of `ln p(t_j | x_i)` over all
/// `N^2` cross pairs.
pub fn club_upper_bound<F>(paired: &[(Vec<f64>, Vec<f64>)], cond_log_density: F) -> Result<MIEstimate>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    let n = paired.len();
    if n < 2 {
        return Err(Error::Domain(format!(
            "club_upper_bound needs >= 2 samples, got {n}"
        )));
    }
    let mut diag = 0.0;
    let mut cross = 0.0;
    for (i, (x, _)) in paired.iter().enumerate() {
        for (j, (_, t)) in paired.iter().enumerate() {
            let v = cond_log_density(x, t);
            cross += v;
            if i == j {
                diag += v;
            }
        }
    }
    Ok(MIEstimate {
        value: diag / n as f64 - cross / (n * n) as f64,
        kind: EstimatorKind::Club,
        samples: n,
        denominator: None,
    })
}

/// [`club_upper_bound`] through the model enum; the auxiliary-net route is a
/// stub and reports itself as unsupported.
pub fn club_upper_bound_with_model(
    paired: &[(Vec<f64>, Vec<f64>)],
    model: &PtxModel<'_>,
) -> Result<MIEstimate> {
    match model {
        PtxModel::Known(f) => club_upper_bound(paired, f),
        PtxModel::AuxiliaryNet => Err(Error::Unsupported(
            "auxiliary-net variational modeling of p(t|x) is an interface hook only".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_cond(sigma2: f64) -> impl Fn(&[f64], &[f64]) -> f64 {
        move |x: &[f64], t: &[f64]| {
            let d = (t[0] - x[0]) * (t[0] - x[0]);
            -0.5 * (std::f64::consts::TAU * sigma2).ln() - d / (2.0 * sigma2)
        }
    }

    #[test]
    fn repeated_pair_estimates_zero() {
        let paired: Vec<(Vec<f64>, Vec<f64>)> =
            (0..50).map(|_| (vec![0.7], vec![-0.2])).collect();
        let est = club_upper_bound(&paired, gaussian_cond(1.0)).unwrap();
        assert!(est.value.abs() < 1e-12, "{}", est.value);
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let paired = vec![(vec![0.0], vec![0.0])];
        assert!(club_upper_bound(&paired, gaussian_cond(1.0)).is_err());
    }

    #[test]
    fn auxiliary_net_hook_is_unsupported() {
        let paired = vec![(vec![0.0], vec![0.0]), (vec![1.0], vec![1.0])];
        assert!(matches!(
            club_upper_bound_with_model(&paired, &PtxModel::AuxiliaryNet),
            Err(Error::Unsupported(_))
        ));
    }
}
