//! Pseudoinverse feature Jacobian and its rank-one update rules.

mod session;

use nalgebra::Matrix6x2;
use serde::{Deserialize, Serialize};

use crate::world::Twist;

pub use session::{
    compare_formulations, learn_session, learn_session_from, learn_with_robot, ComparisonReport, FormulationSummary, LearnError,
    LearningSession, LearningSetup, NoiseConfig, TrialResult, UpdateRecord, COMPARISON_CSV_HEADER, DEFAULT_SCHEDULE,
    LEARNING_DEPTH_M, RACQUETBALL_RADIUS_M,
};

/// Minimum `|de|^2` in px^2 for the `de`-normalized forms.
pub const EPS_DE: f64 = 1.0;
/// Minimum `|dx' L de|` for the forms normalized by that product.
pub const EPS_DEN: f64 = 1e-9;
/// L1 threshold on successive estimates.
pub const CONVERGENCE_L1: f64 = 1e-6;

/// Coupling of image x to camera x and image y to camera y.
pub const PLANAR_MASK: [[f64; 2]; 6] = [
    [1.0, 0.0],
    [0.0, 1.0],
    [0.0, 0.0],
    [0.0, 0.0],
    [0.0, 0.0],
    [0.0, 0.0],
];

pub const ALL_ONES: [[f64; 2]; 6] = [[1.0, 1.0]; 6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitVariant {
    Zeros,
    VosvsSeed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    /// Masked, `|de|^2`-normalized, alpha 0.5, zero start.
    Masked,
    /// Masked, `dx' L de`-normalized, alpha 0.5, seeded.
    Vosvs,
    /// Unmasked `|de|^2`-normalized rank-one update, alpha 1, zero start.
    BroydenBad,
    /// Unmasked `dx' L de`-normalized rank-one update, alpha 1, seeded.
    BroydenGood,
}

impl Formulation {
    pub const ALL: [Formulation; 4] = [
        Formulation::Masked,
        Formulation::Vosvs,
        Formulation::BroydenBad,
        Formulation::BroydenGood,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Formulation::Masked => "masked",
            Formulation::Vosvs => "vosvs",
            Formulation::BroydenBad => "broyden_bad",
            Formulation::BroydenGood => "broyden_good",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.label() == s)
    }

    /// Starting estimate used by this formulation.
    pub fn initial(&self) -> PseudoJacobian {
        match self {
            Formulation::Masked => PseudoJacobian::zeros(0.5, PLANAR_MASK),
            Formulation::Vosvs => PseudoJacobian::vosvs_seed(0.5, PLANAR_MASK),
            Formulation::BroydenBad => PseudoJacobian::zeros(1.0, ALL_ONES),
            Formulation::BroydenGood => PseudoJacobian::vosvs_seed(1.0, ALL_ONES),
        }
    }

    pub fn update(&self, l: &PseudoJacobian, dx: &Twist, de: [f64; 2]) -> Result<PseudoJacobian, DegenerateUpdate> {
        match self {
            Formulation::Masked => l.update_masked(dx, de),
            Formulation::Vosvs => l.update_vosvs(dx, de),
            Formulation::BroydenBad => l.update_broyden_bad(dx, de),
            Formulation::BroydenGood => l.update_broyden_good(dx, de),
        }
    }

    pub fn uses_product_denominator(&self) -> bool {
        matches!(self, Formulation::Vosvs | Formulation::BroydenGood)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error, Serialize, Deserialize)]
#[error("degenerate update: denominator {denominator:e} at or below {limit:e}")]
pub struct DegenerateUpdate {
    pub denominator: f64,
    pub limit: f64,
}

/// 6x2 estimate mapping image-feature change (px) to camera motion (m, rad).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoJacobian {
    pub lhat: [[f64; 2]; 6],
    pub alpha: f64,
    pub mask: [[f64; 2]; 6],
    pub init: InitVariant,
}

impl PseudoJacobian {
    pub fn zeros(alpha: f64, mask: [[f64; 2]; 6]) -> Self {
        Self {
            lhat: [[0.0; 2]; 6],
            alpha,
            mask,
            init: InitVariant::Zeros,
        }
    }

    /// Conventional nonzero start for the product-normalized forms: +1e-3 on
    /// both coupled entries. The x entry starts with the wrong sign, and
    /// `dx' L de` vanishes for exactly diagonal moves.
    pub fn vosvs_seed(alpha: f64, mask: [[f64; 2]; 6]) -> Self {
        let mut l = Self::zeros(alpha, mask);
        l.lhat[0][0] = 1e-3;
        l.lhat[1][1] = 1e-3;
        l.init = InitVariant::VosvsSeed;
        l
    }

    /// Fixed estimate with only the planar diagonal populated.
    pub fn diagonal(dx_dsx: f64, dy_dsy: f64) -> Self {
        let mut l = Self::zeros(0.5, PLANAR_MASK);
        l.lhat[0][0] = dx_dsx;
        l.lhat[1][1] = dy_dsy;
        l
    }

    pub fn matrix(&self) -> Matrix6x2<f64> {
        Matrix6x2::from_fn(|i, j| self.lhat[i][j])
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.lhat[row][col]
    }

    pub fn is_finite(&self) -> bool {
        self.lhat.iter().flatten().all(|v| v.is_finite())
    }

    /// `L de` as a 6-vector.
    pub fn apply(&self, de: [f64; 2]) -> [f64; 6] {
        let mut out = [0.0; 6];
        for (i, row) in self.lhat.iter().enumerate() {
            out[i] = row[0] * de[0] + row[1] * de[1];
        }
        out
    }

    fn residual(&self, dx: &Twist, de: [f64; 2]) -> [f64; 6] {
        let pred = self.apply(de);
        let mut r = [0.0; 6];
        for i in 0..6 {
            r[i] = dx[i] - pred[i];
        }
        r
    }

    /// `L + alpha ((dx - L de) de' / de'de) o H`.
    pub fn update_masked(&self, dx: &Twist, de: [f64; 2]) -> Result<Self, DegenerateUpdate> {
        let denom = de[0] * de[0] + de[1] * de[1];
        if denom <= EPS_DE || !denom.is_finite() {
            return Err(DegenerateUpdate {
                denominator: denom,
                limit: EPS_DE,
            });
        }
        let r = self.residual(dx, de);
        let mut next = *self;
        for i in 0..6 {
            for j in 0..2 {
                if self.mask[i][j] != 0.0 {
                    next.lhat[i][j] = self.lhat[i][j] + self.alpha * ((r[i] * de[j]) / denom);
                }
            }
        }
        Ok(next)
    }

    /// `L + (dx - L de) de' / de'de`, unmasked with unit gain.
    pub fn update_broyden_bad(&self, dx: &Twist, de: [f64; 2]) -> Result<Self, DegenerateUpdate> {
        let denom = de[0] * de[0] + de[1] * de[1];
        if denom <= EPS_DE || !denom.is_finite() {
            return Err(DegenerateUpdate {
                denominator: denom,
                limit: EPS_DE,
            });
        }
        let r = self.residual(dx, de);
        let mut next = *self;
        for i in 0..6 {
            for j in 0..2 {
                next.lhat[i][j] = self.lhat[i][j] + (r[i] * de[j]) / denom;
            }
        }
        Ok(next)
    }

    fn product_update(&self, dx: &Twist, de: [f64; 2], alpha: f64, masked: bool) -> Result<Self, DegenerateUpdate> {
        let mut w = [0.0; 2];
        for j in 0..2 {
            for i in 0..6 {
                w[j] += dx[i] * self.lhat[i][j];
            }
        }
        let denom = w[0] * de[0] + w[1] * de[1];
        if denom.abs() <= EPS_DEN || !denom.is_finite() {
            return Err(DegenerateUpdate {
                denominator: denom,
                limit: EPS_DEN,
            });
        }
        let r = self.residual(dx, de);
        let mut next = *self;
        for i in 0..6 {
            for j in 0..2 {
                if !masked || self.mask[i][j] != 0.0 {
                    next.lhat[i][j] = self.lhat[i][j] + alpha * ((r[i] * w[j]) / denom);
                }
            }
        }
        Ok(next)
    }

    /// `L + alpha ((dx - L de) dx' L / dx' L de) o H`.
    pub fn update_vosvs(&self, dx: &Twist, de: [f64; 2]) -> Result<Self, DegenerateUpdate> {
        self.product_update(dx, de, self.alpha, true)
    }

    /// `L + (dx - L de) dx' L / dx' L de`, unmasked with unit gain.
    pub fn update_broyden_good(&self, dx: &Twist, de: [f64; 2]) -> Result<Self, DegenerateUpdate> {
        self.product_update(dx, de, 1.0, false)
    }

    pub fn l1_distance(&self, other: &Self) -> f64 {
        self.lhat
            .iter()
            .flatten()
            .zip(other.lhat.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

pub fn has_converged(prev: &PseudoJacobian, next: &PseudoJacobian) -> bool {
    prev.l1_distance(next) < CONVERGENCE_L1
}
