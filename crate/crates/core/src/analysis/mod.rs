//! Theoretical constants of a measurement ensemble and the error bounds built on them.
//!
//! Suprema over time reduce to extrema over the finite [`SystemEnsemble`] the
//! measurement matrices are drawn from.

mod bounds;
mod moments;
mod report;

pub use bounds::{
    bound_finite_bounded, bound_finite_bounded_trajectory, bound_finite_stochastic,
    bound_finite_stochastic_scaled, gamma_star_bounded, gamma_star_stochastic, grid_argmin,
    h_bounded, h_covariance, h_mean, h_stochastic, log_grid, BoundedStep, GammaSearch,
    GammaStar, SearchMethod, StochasticBound, StochasticStep,
};
pub use moments::{error_step, propagate_error_moments, vectorized_sigma_step, ErrorMoments};
pub use report::BoundReport;

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::estimator::DEFAULT_RANK_TOLERANCE;
use crate::linalg::{self, spectral_norm, WeightedModel};
use crate::{Error, Result};

/// One `(A, Q)` pair of the library.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMember {
    pub a: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy)]
struct MemberSpectrum {
    /// Smallest nonzero eigenvalue of `AᵀQ⁻¹A`; `None` when `A` has rank 0.
    lambda_min: Option<f64>,
    /// `‖AᵀQ⁻¹‖₂`.
    c: f64,
    /// `‖Aᵀ ⊗ Aᵀ‖_F = ‖A‖_F²`.
    capital_c: f64,
    /// `‖Q⁻¹‖_F`.
    m: f64,
}

/// Finite library of measurement models sharing the state dimension.
#[derive(Debug, Clone)]
pub struct SystemEnsemble {
    members: Vec<EnsembleMember>,
    n_states: usize,
    rank_tolerance: f64,
    spectra: Vec<MemberSpectrum>,
}

impl SystemEnsemble {
    pub fn new(members: Vec<EnsembleMember>) -> Result<Self> {
        Self::with_rank_tolerance(members, DEFAULT_RANK_TOLERANCE)
    }

    pub fn with_rank_tolerance(members: Vec<EnsembleMember>, rank_tolerance: f64) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidParameter("ensemble must be nonempty".into()))?;
        let n_states = first.a.ncols();
        if n_states == 0 {
            return Err(Error::InvalidParameter("state dimension must be at least 1".into()));
        }
        let mut spectra = Vec::with_capacity(members.len());
        for (i, member) in members.iter().enumerate() {
            if member.a.ncols() != n_states {
                return Err(Error::Dimension(format!(
                    "member {i} has {} columns, expected {n_states}",
                    member.a.ncols()
                )));
            }
            spectra.push(member_spectrum(member, rank_tolerance)?);
        }
        Ok(Self {
            members,
            n_states,
            rank_tolerance,
            spectra,
        })
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }

    pub fn member(&self, index: usize) -> Result<&EnsembleMember> {
        self.members.get(index).ok_or_else(|| {
            Error::InvalidParameter(format!(
                "member index {index} out of range for ensemble of {}",
                self.members.len()
            ))
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn rank_tolerance(&self) -> f64 {
        self.rank_tolerance
    }

    /// Smallest nonzero eigenvalue `λ₁` of member `index`'s `J = AᵀQ⁻¹A`.
    pub fn lambda_min(&self, index: usize) -> Result<f64> {
        self.member(index)?;
        self.spectra[index]
            .lambda_min
            .ok_or(Error::RankDeficient { member: index })
    }

    /// `‖AᵀQ⁻¹‖₂` for member `index`.
    pub fn c(&self, index: usize) -> Result<f64> {
        self.member(index)?;
        Ok(self.spectra[index].c)
    }

    /// `(C(t), m(t))` for member `index`.
    pub fn kron_constants(&self, index: usize) -> Result<(f64, f64)> {
        self.member(index)?;
        let s = &self.spectra[index];
        Ok((s.capital_c, s.m))
    }

    /// True when the vertically stacked models of `indices` have full column rank.
    pub fn stack_is_full_rank(&self, indices: &[usize]) -> Result<bool> {
        let blocks = indices
            .iter()
            .map(|&i| self.member(i).map(|m| &m.a))
            .collect::<Result<Vec<_>>>()?;
        let stacked = linalg::vstack(&blocks);
        Ok(linalg::numerical_rank(&stacked, self.rank_tolerance) == self.n_states)
    }
}

fn member_spectrum(member: &EnsembleMember, rank_tolerance: f64) -> Result<MemberSpectrum> {
    let model = WeightedModel::new(&member.a, &member.q)?;
    let eigs = model.info.clone().symmetric_eigenvalues();
    let top = eigs.iter().cloned().fold(0.0_f64, f64::max);
    let lambda_min = if top > 0.0 {
        eigs.iter()
            .cloned()
            .filter(|&l| l > rank_tolerance * top)
            .fold(None, |acc: Option<f64>, l| Some(acc.map_or(l, |a| a.min(l))))
    } else {
        None
    };
    let m = if member.q.is_empty() {
        0.0
    } else {
        linalg::spd_cholesky(&member.q, "Q")?.inverse().norm()
    };
    Ok(MemberSpectrum {
        lambda_min,
        c: spectral_norm(&model.weighted_t),
        capital_c: member.a.norm_squared(),
        m,
    })
}

/// Orthonormal basis of `ker A` (N × K, with K = N − rank A).
pub fn kernel_basis(a: &DMatrix<f64>, rank_tolerance: f64) -> DMatrix<f64> {
    linalg::kernel_basis(a, rank_tolerance)
}

/// Smallest `τ` such that every `τ` consecutive models in `sequence` have kernels
/// intersecting only at the origin. `Ok(None)` when no window length up to the
/// sequence length achieves this.
pub fn observability_window(sequence: &[usize], ensemble: &SystemEnsemble) -> Result<Option<usize>> {
    if sequence.is_empty() {
        return Err(Error::InvalidParameter("sequence must be nonempty".into()));
    }
    for &i in sequence {
        ensemble.member(i)?;
    }
    // rank depends only on which members are in the window
    let mut cache: HashMap<Vec<usize>, bool> = HashMap::new();
    let mut full_rank = |window: &[usize]| -> Result<bool> {
        let mut key = window.to_vec();
        key.sort_unstable();
        key.dedup();
        if let Some(&hit) = cache.get(&key) {
            return Ok(hit);
        }
        let ok = ensemble.stack_is_full_rank(&key)?;
        cache.insert(key, ok);
        Ok(ok)
    };
    'tau: for tau in 1..=sequence.len() {
        for window in sequence.windows(tau) {
            if !full_rank(window)? {
                continue 'tau;
            }
        }
        return Ok(Some(tau));
    }
    Ok(None)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_finite() && gamma > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "gamma must be positive and finite, got {gamma}"
        )))
    }
}

/// `ψ = max over members of γ/(γ + λ₁)`.
pub fn psi(ensemble: &SystemEnsemble, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    let mut worst = 0.0_f64;
    for i in 0..ensemble.len() {
        let l1 = ensemble.lambda_min(i)?;
        worst = worst.max(gamma / (gamma + l1));
    }
    Ok(worst)
}

/// Ensemble-wide constants entering the asymptotic bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnsembleConstants {
    /// Smallest nonzero eigenvalue of any member's `AᵀQ⁻¹A`.
    pub lambda_bar: f64,
    /// Largest `‖AᵀQ⁻¹‖₂`.
    pub c: f64,
    /// Largest `‖Aᵀ ⊗ Aᵀ‖_F`.
    pub capital_c: f64,
    /// Largest `‖Q⁻¹‖_F`, with the noise covariance taken equal to `Q`.
    pub m: f64,
}

pub fn ensemble_constants(ensemble: &SystemEnsemble) -> Result<EnsembleConstants> {
    let mut out = EnsembleConstants {
        lambda_bar: f64::INFINITY,
        c: 0.0,
        capital_c: 0.0,
        m: 0.0,
    };
    for (i, s) in ensemble.spectra.iter().enumerate() {
        let l1 = s.lambda_min.ok_or(Error::RankDeficient { member: i })?;
        out.lambda_bar = out.lambda_bar.min(l1);
        out.c = out.c.max(s.c);
        out.capital_c = out.capital_c.max(s.capital_c);
        out.m = out.m.max(s.m);
    }
    Ok(out)
}

/// Spectral norm of the ordered product `Λ_last ⋯ Λ_first` of a window.
pub fn contraction_norm(window: &[DMatrix<f64>]) -> Result<f64> {
    let first = window
        .first()
        .ok_or_else(|| Error::InvalidParameter("window must be nonempty".into()))?;
    let n = first.nrows();
    let mut product = DMatrix::<f64>::identity(n, n);
    for (k, lambda) in window.iter().enumerate() {
        if lambda.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "window entry {k} is {}x{}, expected {n}x{n}",
                lambda.nrows(),
                lambda.ncols()
            )));
        }
        product = lambda * product;
    }
    Ok(spectral_norm(&product))
}
