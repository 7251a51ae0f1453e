//! The coupled excitation/emission forward map, absorbed-energy data, noise
//! injection, and error metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::geometry::{AngularFlux, AngularGrid, Grid, ScalarField};
use crate::par;
use crate::transport::{
    solve_rte, BoundarySource, RteProblem, RteSolution, ScatteringMatrix, SolveOptions,
    TransportError,
};

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error("solver failed for measurement {source}: {err}")]
    Solver {
        source: usize,
        #[source]
        err: TransportError,
    },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("relative error denominator is zero")]
    ZeroReference,
    #[error("measurement set has {sources} sources but {data} data fields")]
    SourceDataMismatch { sources: usize, data: usize },
}

/// Known optical coefficients of the tissue plus the admissible bounds
/// `[c1, c2]` for the unknown fluorophore absorption.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    pub mu_a_xi: ScalarField,
    pub mu_a_m: ScalarField,
    pub mu_s_x: ScalarField,
    pub mu_s_m: ScalarField,
    pub eta: ScalarField,
    pub c1: f64,
    pub c2: f64,
}

/// Boundary illuminations with their internal data fields.
#[derive(Debug, Clone)]
pub struct MeasurementSet {
    pub sources: Vec<BoundarySource>,
    pub data: Vec<ScalarField>,
    pub noise_level: f64,
    pub rng_seed: u64,
}

impl MeasurementSet {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn validate(&self) -> Result<(), ForwardError> {
        if self.sources.len() != self.data.len() {
            return Err(ForwardError::SourceDataMismatch {
                sources: self.sources.len(),
                data: self.data.len(),
            });
        }
        Ok(())
    }
}

/// Both fluxes of one coupled solve, with the sweep counts for budget
/// bookkeeping (one coupled solve = 2 RTE solves).
pub struct CoupledSolution {
    pub phi_x: AngularFlux,
    pub phi_m: AngularFlux,
    pub rte_solves: usize,
    /// Set when a sweep-count cap stopped an inner solve early; the last
    /// iterate is kept so callers can record the degradation without dying.
    pub degraded: bool,
}

/// Solves the excitation RTE (total absorption `mu_a_xi + mu_a_xf`, boundary
/// source `q_b`) and then the emission RTE driven by the isotropic volume
/// source `eta * mu_a_xf * (A~ phi_x)` with vacuum inflow.
pub fn solve_coupled(
    mu_a_xf: &ScalarField,
    coeffs: &CoefficientSet,
    kernel: &ScatteringMatrix,
    q_b: &BoundarySource,
    grid: &Grid,
    angles: &AngularGrid,
    opts: &SolveOptions,
    warm: Option<(&AngularFlux, &AngularFlux)>,
) -> Result<CoupledSolution, TransportError> {
    let mu_a_x = ScalarField {
        values: coeffs
            .mu_a_xi
            .values
            .iter()
            .zip(&mu_a_xf.values)
            .map(|(a, b)| a + b)
            .collect(),
    };
    let excitation = RteProblem {
        mu_a: &mu_a_x,
        mu_s: &coeffs.mu_s_x,
        kernel,
        volume_source: None,
        boundary_source: Some(q_b),
    };
    let tolerate = |res: Result<RteSolution, TransportError>| match res {
        Ok(sol) => Ok((sol.flux, false)),
        Err(TransportError::NotConverged { flux, .. }) => Ok((*flux, true)),
        Err(e) => Err(e),
    };
    let (phi_x, dx) = tolerate(solve_rte(grid, angles, &excitation, opts, warm.map(|w| w.0)))?;
    let (phi_m, dm) = tolerate(solve_emission(
        mu_a_xf,
        &coeffs.eta,
        coeffs,
        kernel,
        &phi_x,
        grid,
        angles,
        opts,
        warm.map(|w| w.1),
    ))?;
    Ok(CoupledSolution {
        phi_x,
        phi_m,
        rte_solves: 2,
        degraded: dx || dm,
    })
}

/// Emission solve with source `eta * mu * (A~ phi_x)`; the squeeze iteration
/// calls this with the cross-coupled pairings of envelopes and fluxes.
pub fn solve_emission(
    mu: &ScalarField,
    eta: &ScalarField,
    coeffs: &CoefficientSet,
    kernel: &ScatteringMatrix,
    phi_x: &AngularFlux,
    grid: &Grid,
    angles: &AngularGrid,
    opts: &SolveOptions,
    warm: Option<&AngularFlux>,
) -> Result<RteSolution, TransportError> {
    let a_tilde = crate::transport::apply_a_tilde(phi_x, angles);
    let src_field = ScalarField {
        values: eta
            .values
            .iter()
            .zip(&mu.values)
            .zip(&a_tilde.values)
            .map(|((e, m), a)| e * m * a)
            .collect(),
    };
    let q = AngularFlux::isotropic(grid, angles, &src_field);
    let emission = RteProblem {
        mu_a: &coeffs.mu_a_m,
        mu_s: &coeffs.mu_s_m,
        kernel,
        volume_source: Some(&q),
        boundary_source: None,
    };
    solve_rte(grid, angles, &emission, opts, warm)
}

/// Absorbed energy:
/// `h = (mu_a_xi + (1 - eta) mu_a_xf)(A phi_x) + mu_a_m (A phi_m)`.
pub fn heat(
    mu_a_xf: &ScalarField,
    coeffs: &CoefficientSet,
    phi_x: &AngularFlux,
    phi_m: &AngularFlux,
    angles: &AngularGrid,
) -> ScalarField {
    let a_x = crate::transport::apply_a(phi_x, angles);
    let a_m = crate::transport::apply_a(phi_m, angles);
    ScalarField {
        values: (0..mu_a_xf.len())
            .map(|c| {
                (coeffs.mu_a_xi.values[c] + (1.0 - coeffs.eta.values[c]) * mu_a_xf.values[c])
                    * a_x.values[c]
                    + coeffs.mu_a_m.values[c] * a_m.values[c]
            })
            .collect(),
    }
}

/// Full forward map: one absorbed-energy field per boundary source.
/// Measurements evaluate independently (in parallel when enabled) and are
/// combined in source order.
pub fn forward_map(
    mu_a_xf: &ScalarField,
    coeffs: &CoefficientSet,
    kernel: &ScatteringMatrix,
    sources: &[BoundarySource],
    grid: &Grid,
    angles: &AngularGrid,
    opts: &SolveOptions,
) -> Result<Vec<ScalarField>, ForwardError> {
    let results = par::map_indexed(sources.len(), |s| {
        solve_coupled(mu_a_xf, coeffs, kernel, &sources[s], grid, angles, opts, None)
            .map(|sol| heat(mu_a_xf, coeffs, &sol.phi_x, &sol.phi_m, angles))
            .map_err(|err| ForwardError::Solver { source: s, err })
    });
    results.into_iter().collect()
}

/// Multiplicative Gaussian noise `h * (1 + eps * N)`, reproducible per seed.
pub fn add_noise(h: &ScalarField, eps: f64, seed: u64) -> ScalarField {
    if eps == 0.0 {
        return h.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ScalarField {
        values: h
            .values
            .iter()
            .map(|v| {
                let n: f64 = StandardNormal.sample(&mut rng);
                v * (1.0 + eps * n)
            })
            .collect(),
    }
}

/// Relative L2 distance to a reference field over active cells.
pub fn relative_error(mu: &ScalarField, mu_star: &ScalarField) -> Result<f64, ForwardError> {
    let denom = mu_star.norm();
    if denom == 0.0 {
        return Err(ForwardError::ZeroReference);
    }
    let diff: f64 = mu
        .values
        .iter()
        .zip(&mu_star.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(diff / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_angular_grid, build_grid};
    use crate::transport::hg_kernel;

    fn small_setup() -> (Grid, AngularGrid, ScatteringMatrix, CoefficientSet) {
        let grid = build_grid(20.0, 12, 12).unwrap();
        let angles = build_angular_grid(8).unwrap();
        let kernel = hg_kernel(0.5, &angles).unwrap();
        let coeffs = CoefficientSet {
            mu_a_xi: ScalarField::from_fn(&grid, |x, _| 0.02 + 0.01 * (x * std::f64::consts::PI / 8.0).sin()),
            mu_a_m: ScalarField::from_fn(&grid, |x, _| 0.02 + 0.01 * (x * std::f64::consts::PI / 8.0).sin()),
            mu_s_x: ScalarField::from_fn(&grid, |_, y| 2.0 + (y * std::f64::consts::PI / 8.0).sin()),
            mu_s_m: ScalarField::from_fn(&grid, |_, y| 2.0 + (y * std::f64::consts::PI / 8.0).sin()),
            eta: ScalarField::constant(&grid, 0.3),
            c1: 0.01,
            c2: 0.04,
        };
        (grid, angles, kernel, coeffs)
    }

    fn uniform_beam(grid: &Grid, angles: &AngularGrid) -> BoundarySource {
        let mut qb = BoundarySource::zeros(grid, angles);
        for (b, bc) in grid.boundary().iter().enumerate() {
            for d in 0..angles.n_dir {
                let (tx, ty) = angles.direction(d);
                if tx * bc.normal.0 + ty * bc.normal.1 < 0.0 {
                    *qb.at_mut(b, d) = 1.0;
                }
            }
        }
        qb
    }

    fn loose() -> SolveOptions {
        SolveOptions {
            tol: 1e-10,
            max_sweeps: 5000,
        }
    }

    #[test]
    fn zero_eta_kills_emission_and_zero_source_kills_all() {
        let (grid, angles, kernel, mut coeffs) = small_setup();
        coeffs.eta = ScalarField::zeros(&grid);
        let mu = ScalarField::constant(&grid, 0.02);
        let qb = uniform_beam(&grid, &angles);
        let sol = solve_coupled(&mu, &coeffs, &kernel, &qb, &grid, &angles, &loose(), None).unwrap();
        assert!(sol.phi_m.norm() == 0.0);
        let h = heat(&mu, &coeffs, &sol.phi_x, &sol.phi_m, &angles);
        // eta = 0: h = (mu_a_xi + mu_a_xf) A phi_x
        let a_x = crate::transport::apply_a(&sol.phi_x, &angles);
        for c in 0..grid.n_cells() {
            let expect = (coeffs.mu_a_xi.values[c] + mu.values[c]) * a_x.values[c];
            assert!((h.values[c] - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
        let zero_qb = BoundarySource::zeros(&grid, &angles);
        let sol = solve_coupled(&mu, &coeffs, &kernel, &zero_qb, &grid, &angles, &loose(), None).unwrap();
        assert!(sol.phi_x.norm() == 0.0 && sol.phi_m.norm() == 0.0);
    }

    #[test]
    fn forward_linear_in_boundary_source() {
        let (grid, angles, kernel, coeffs) = small_setup();
        let mu = ScalarField::constant(&grid, 0.02);
        let qb = uniform_beam(&grid, &angles);
        let qb2 = qb.scale(2.0);
        let s1 = solve_coupled(&mu, &coeffs, &kernel, &qb, &grid, &angles, &loose(), None).unwrap();
        let s2 = solve_coupled(&mu, &coeffs, &kernel, &qb2, &grid, &angles, &loose(), None).unwrap();
        let scale_x = s2.phi_x.norm().max(1.0);
        for (a, b) in s1.phi_x.values.iter().zip(&s2.phi_x.values) {
            assert!((2.0 * a - b).abs() / scale_x < 1e-8);
        }
        let scale_m = s2.phi_m.norm().max(1e-30);
        for (a, b) in s1.phi_m.values.iter().zip(&s2.phi_m.values) {
            assert!((2.0 * a - b).abs() / scale_m < 1e-6);
        }
    }

    #[test]
    fn heat_matches_pointwise_formula() {
        let (grid, angles, kernel, coeffs) = small_setup();
        let mu = ScalarField::from_fn(&grid, |x, y| 0.02 + 0.01 * ((x + y) * 0.05).sin().abs());
        let qb = uniform_beam(&grid, &angles);
        let sol = solve_coupled(&mu, &coeffs, &kernel, &qb, &grid, &angles, &loose(), None).unwrap();
        let h = heat(&mu, &coeffs, &sol.phi_x, &sol.phi_m, &angles);
        // independent pointwise oracle with direct angular sums
        for c in 0..grid.n_cells() {
            let a_x: f64 = (0..angles.n_dir)
                .map(|d| angles.weight(d) * sol.phi_x.at(c, d))
                .sum();
            let a_m: f64 = (0..angles.n_dir)
                .map(|d| angles.weight(d) * sol.phi_m.at(c, d))
                .sum();
            let expect = (coeffs.mu_a_xi.values[c] + (1.0 - coeffs.eta.values[c]) * mu.values[c]) * a_x
                + coeffs.mu_a_m.values[c] * a_m;
            assert!((h.values[c] - expect).abs() <= 1e-12 * expect.abs().max(1e-12));
            assert!(h.values[c] > 0.0, "data positivity violated at cell {c}");
        }
    }

    #[test]
    fn forward_map_deterministic_and_order_preserving() {
        let (grid, angles, kernel, coeffs) = small_setup();
        let mu = ScalarField::constant(&grid, 0.02);
        let qb1 = uniform_beam(&grid, &angles);
        let qb2 = qb1.scale(0.5);
        let sources = vec![qb1.clone(), qb2.clone()];
        let out = forward_map(&mu, &coeffs, &kernel, &sources, &grid, &angles, &loose()).unwrap();
        let out2 = forward_map(&mu, &coeffs, &kernel, &sources, &grid, &angles, &loose()).unwrap();
        assert_eq!(out, out2, "forward map must be bitwise deterministic");
        let swapped = forward_map(&mu, &coeffs, &kernel, &[qb2, qb1], &grid, &angles, &loose()).unwrap();
        assert_eq!(out[0], swapped[1]);
        assert_eq!(out[1], swapped[0]);
        // S = 1 reduces to heat(solve_coupled(...))
        let single = forward_map(&mu, &coeffs, &kernel, &sources[..1], &grid, &angles, &loose()).unwrap();
        assert_eq!(single[0], out[0]);
    }

    #[test]
    fn noise_is_reproducible_and_calibrated() {
        let grid = build_grid(20.0, 64, 64).unwrap();
        let h = ScalarField::constant(&grid, 2.0);
        assert_eq!(add_noise(&h, 0.0, 42), h);
        let n1 = add_noise(&h, 0.05, 42);
        let n2 = add_noise(&h, 0.05, 42);
        assert_eq!(n1, n2);
        assert_ne!(add_noise(&h, 0.05, 43), n1);
        // sample std of (h~/h - 1) ~ 0.05 within 10%
        let ratios: Vec<f64> = n1.values.iter().map(|v| v / 2.0 - 1.0).collect();
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        let var = ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>()
            / (ratios.len() - 1) as f64;
        let std = var.sqrt();
        assert!((std - 0.05).abs() < 0.005, "std {std}");
    }

    #[test]
    fn relative_error_basics() {
        let grid = build_grid(20.0, 12, 12).unwrap();
        let mu_star = ScalarField::from_fn(&grid, |x, y| 1.0 + 0.1 * (x - y).abs());
        assert_eq!(relative_error(&mu_star, &mu_star).unwrap(), 0.0);
        let scaled = ScalarField {
            values: mu_star.values.iter().map(|v| 1.1 * v).collect(),
        };
        assert!((relative_error(&scaled, &mu_star).unwrap() - 0.1).abs() < 1e-12);
        assert!(relative_error(&mu_star, &ScalarField::zeros(&grid)).is_err());
        // independent summation oracle
        let other = ScalarField::from_fn(&grid, |x, _| 1.0 + 0.05 * x.abs());
        let mut num = 0.0;
        let mut den = 0.0;
        for (a, b) in other.values.iter().zip(&mu_star.values) {
            num += (a - b) * (a - b);
            den += b * b;
        }
        let oracle = (num / den).sqrt();
        assert!((relative_error(&other, &mu_star).unwrap() - oracle).abs() < 1e-14);
    }

    #[test]
    fn fixed_point_consistency_at_truth() {
        // F1(mu*) returns mu* when the data came from the same solver/grid.
        let (grid, angles, kernel, coeffs) = small_setup();
        let mu_star = ScalarField::from_fn(&grid, |x, y| {
            if (x + 5.0).powi(2) + y * y < 36.0 {
                0.035
            } else {
                0.015
            }
        });
        let qb = uniform_beam(&grid, &angles);
        let sol = solve_coupled(&mu_star, &coeffs, &kernel, &qb, &grid, &angles, &loose(), None).unwrap();
        let h_star = heat(&mu_star, &coeffs, &sol.phi_x, &sol.phi_m, &angles);
        let a_x = crate::transport::apply_a(&sol.phi_x, &angles);
        let a_m = crate::transport::apply_a(&sol.phi_m, &angles);
        for c in 0..grid.n_cells() {
            let f1 = (1.0 / (1.0 - coeffs.eta.values[c]))
                * ((h_star.values[c] - coeffs.mu_a_m.values[c] * a_m.values[c]) / a_x.values[c]
                    - coeffs.mu_a_xi.values[c]);
            assert!(
                (f1 - mu_star.values[c]).abs() < 1e-8,
                "fixed point broke at cell {c}: {f1} vs {}",
                mu_star.values[c]
            );
        }
    }
}
