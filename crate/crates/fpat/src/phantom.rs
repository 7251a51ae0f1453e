//! Synthetic phantoms: two piecewise-constant templates on the disc of
//! radius 20, plus the smooth background coefficient fields and the four
//! boundary-patch illuminations used by the experiments.

use thiserror::Error;

use crate::forward::CoefficientSet;
use crate::geometry::{AngularGrid, Grid, ScalarField};
use crate::transport::BoundarySource;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("unknown phantom template {0}; valid ids are 1 and 2")]
    UnknownTemplate(u8),
}

/// Which region receives the third quantum-efficiency value (0.7) in
/// template 1. The template's region list is ambiguous there; the default
/// reading is the fourth circle, the alternative is the ellipse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum T1EtaThird {
    #[default]
    Omega4,
    Omega5,
}

/// Bracketing bounds for the true coefficient values {0.01..0.04}, with a
/// 1e-6 margin keeping the inequalities strict.
pub const C1: f64 = 0.01 * (1.0 - 1e-6);
pub const C2: f64 = 0.04 * (1.0 + 1e-6);

///// Measurement positions on the rim, as angles: (20,0), (0,20), (-20,0), (0,-20).
pub const SOURCE_ANGLES: [f64; 4] = [
    0.0,
    std::f64::consts::FRAC_PI_2,
    std::f64::consts::PI,
    3.0 * std::f64::consts::FRAC_PI_2,
];

/// Arc half-width of the illuminated boundary patch, radians.
pub const PATCH_HALF_WIDTH: f64 = 0.15;
/// Inward cone half-angle around `-nu` for illuminated directions.
pub const CONE_HALF_ANGLE: f64 = std::f64::consts::FRAC_PI_3;
/// Strictly positive floor on the rest of the inflow boundary.
pub const SOURCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Phantom {
    pub template_id: u8,
    pub mu_a_xf_true: ScalarField,
    pub eta_true: ScalarField,
}

fn in_circle(x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
    (x - cx).powi(2) + (y - cy).powi(2) <= r * r
}

fn template1_mu(x: f64, y: f64) -> f64 {
    if in_circle(x, y, -10.0, 8.0, 4.0) {
        0.02
    } else if (x - 10.0).powi(2) / 16.0 + (y - 2.0).powi(2) / 100.0 <= 1.0 {
        0.03
    } else if in_circle(x, y, 0.0, -6.0, 4.0) {
        0.04
    } else {
        0.01
    }
}

fn template1_eta(x: f64, y: f64, third: T1EtaThird) -> f64 {
    if in_circle(x, y, 0.0, 8.0, 4.0) {
        0.5
    } else if in_circle(x, y, -10.0, -6.0, 4.0) {
        0.6
    } else {
        let in_third = match third {
            T1EtaThird::Omega4 => in_circle(x, y, 0.0, -6.0, 4.0),
            T1EtaThird::Omega5 => (x - 10.0).powi(2) / 16.0 + (y - 2.0).powi(2) / 100.0 <= 1.0,
        };
        if in_third {
            0.7
        } else {
            0.1
        }
    }
}

fn template2_regions(x: f64, y: f64) -> (bool, bool, bool) {
    let o1 = in_circle(x, y, -10.0, 4.0, 5.0);
    let o2 = (5.0..=12.0).contains(&x) && (0.0..=12.0).contains(&y);
    let o3 = (-8.0..=10.0).contains(&x) && (-12.0..=-4.0).contains(&y);
    (o1, o2, o3)
}

/// Piecewise-constant true fields for the requested template.
pub fn build_phantom(
    template_id: u8,
    grid: &Grid,
    t1_eta_third: T1EtaThird,
) -> Result<Phantom, PhantomError> {
    let (mu, eta) = match template_id {
        1 => (
            ScalarField::from_fn(grid, template1_mu),
            ScalarField::from_fn(grid, |x, y| template1_eta(x, y, t1_eta_third)),
        ),
        2 => (
            ScalarField::from_fn(grid, |x, y| {
                let (o1, o2, o3) = template2_regions(x, y);
                if o2 {
                    0.02
                } else if o3 {
                    0.03
                } else if o1 {
                    0.04
                } else {
                    0.01
                }
            }),
            ScalarField::from_fn(grid, |x, y| {
                let (o1, o2, o3) = template2_regions(x, y);
                if o2 {
                    0.5
                } else if o3 {
                    0.6
                } else if o1 {
                    0.7
                } else {
                    0.1
                }
            }),
        ),
        other => return Err(PhantomError::UnknownTemplate(other)),
    };
    Ok(Phantom {
        template_id,
        mu_a_xf_true: mu,
        eta_true: eta,
    })
}

/// Smooth background coefficients shared by both templates:
/// `mu_a_xi = mu_a_m = 0.02 + 0.01 sin(pi x / 8)` and
/// `mu_s_x = mu_s_m = 2 + sin(pi y / 8)`, with the given quantum efficiency.
pub fn background_coefficients(grid: &Grid, eta: ScalarField) -> CoefficientSet {
    let pi8 = std::f64::consts::PI / 8.0;
    CoefficientSet {
        mu_a_xi: ScalarField::from_fn(grid, |x, _| 0.02 + 0.01 * (pi8 * x).sin()),
        mu_a_m: ScalarField::from_fn(grid, |x, _| 0.02 + 0.01 * (pi8 * x).sin()),
        mu_s_x: ScalarField::from_fn(grid, |_, y| 2.0 + (pi8 * y).sin()),
        mu_s_m: ScalarField::from_fn(grid, |_, y| 2.0 + (pi8 * y).sin()),
        eta,
        c1: C1,
        c2: C2,
    }
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = a % two_pi;
    if a > std::f64::consts::PI {
        a -= two_pi;
    } else if a < -std::f64::consts::PI {
        a += two_pi;
    }
    a
}

/// Boundary beam centered at rim angle `position_angle`: value 1 on the patch
/// for inward directions within the cone, and a strictly positive floor on
/// the rest of the inflow boundary.
pub fn boundary_beam(grid: &Grid, angles: &AngularGrid, position_angle: f64) -> BoundarySource {
    let mut qb = BoundarySource::zeros(grid, angles);
    for (b, bc) in grid.boundary().iter().enumerate() {
        let (nx, ny) = bc.normal;
        let cell_angle = ny.atan2(nx);
        // cosine-tapered in both rim position and direction: a hard-edged
        // patch discretizes very differently on different staircases, a
        // smooth profile keeps datasets grid-consistent
        let off = wrap_angle(cell_angle - position_angle).abs() / PATCH_HALF_WIDTH;
        let patch = if off <= 1.0 {
            (std::f64::consts::FRAC_PI_2 * off).cos().powi(2)
        } else {
            0.0
        };
        for d in 0..angles.n_dir {
            let (tx, ty) = angles.direction(d);
            let dot_nu = tx * nx + ty * ny;
            if dot_nu >= 0.0 {
                continue; // not on the inflow boundary
            }
            let tilt = (-dot_nu).clamp(-1.0, 1.0).acos() / CONE_HALF_ANGLE;
            let cone = if tilt <= 1.0 {
                (std::f64::consts::FRAC_PI_2 * tilt).cos().powi(2)
            } else {
                0.0
            };
            *qb.at_mut(b, d) = (patch * cone).max(SOURCE_FLOOR);
        }
    }
    // normalize to unit injected power so datasets generated on different
    // resolutions are mutually consistent: the staircase patch covers a
    // grid-dependent number of faces, and without this the data scale
    // drifts by tens of percent between grids
    let face = grid.dx.min(grid.dy);
    let mut power = 0.0;
    for (b, bc) in grid.boundary().iter().enumerate() {
        let (nx, ny) = bc.normal;
        for d in 0..angles.n_dir {
            let (tx, ty) = angles.direction(d);
            let dot_nu = tx * nx + ty * ny;
            if dot_nu < 0.0 {
                power += face * angles.weight(d) * (-dot_nu) * qb.at(b, d);
            }
        }
    }
    qb.scale(1.0 / power)
}
