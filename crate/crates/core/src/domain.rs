//! Closed intervals and axis-aligned input boxes.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DomainError {
    #[error("box bounds have lengths {lower} and {upper}")]
    LengthMismatch { lower: usize, upper: usize },
    #[error("dimension {dim}: lower bound {lower} exceeds upper bound {upper}")]
    Inverted { dim: usize, lower: f64, upper: f64 },
    #[error("dimension {dim}: bound is not finite")]
    NonFinite { dim: usize },
    #[error("box has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
}

/// A closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi, "inverted interval [{lo}, {hi}]");
        Self { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn encloses(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    /// Largest absolute value attained on the interval.
    pub fn magnitude(&self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }

    pub fn relu(&self) -> Interval {
        Interval {
            lo: self.lo.max(0.0),
            hi: self.hi.max(0.0),
        }
    }
}

/// Axis-aligned box `{x : lower[i] <= x[i] <= upper[i]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct InputBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Deserialize)]
struct RawBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl TryFrom<RawBox> for InputBox {
    type Error = DomainError;
    fn try_from(raw: RawBox) -> Result<Self, DomainError> {
        InputBox::new(raw.lower, raw.upper)
    }
}

impl InputBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, DomainError> {
        if lower.len() != upper.len() {
            return Err(DomainError::LengthMismatch {
                lower: lower.len(),
                upper: upper.len(),
            });
        }
        for (dim, (&l, &u)) in lower.iter().zip(&upper).enumerate() {
            if !l.is_finite() || !u.is_finite() {
                return Err(DomainError::NonFinite { dim });
            }
            if l > u {
                return Err(DomainError::Inverted {
                    dim,
                    lower: l,
                    upper: u,
                });
            }
        }
        Ok(Self { lower, upper })
    }

    /// Builds a box from `(lo, hi)` pairs. Panics on invalid bounds; meant
    /// for literals.
    pub fn from_bounds(bounds: &[(f64, f64)]) -> Self {
        let (lower, upper) = bounds.iter().copied().unzip();
        Self::new(lower, upper).expect("valid literal bounds")
    }

    pub fn point(x: &[f64]) -> Self {
        Self {
            lower: x.to_vec(),
            upper: x.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn interval(&self, i: usize) -> Interval {
        Interval {
            lo: self.lower[i],
            hi: self.upper[i],
        }
    }

    pub fn intervals(&self) -> Vec<Interval> {
        (0..self.dim()).map(|i| self.interval(i)).collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).collect()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| l + 0.5 * (u - l))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    pub fn encloses(&self, other: &InputBox) -> bool {
        self.dim() == other.dim()
            && (0..self.dim()).all(|i| self.interval(i).encloses(&other.interval(i)))
    }

    pub fn check_dim(&self, expected: usize) -> Result<(), DomainError> {
        if self.dim() != expected {
            return Err(DomainError::Dimension {
                expected,
                got: self.dim(),
            });
        }
        Ok(())
    }

    /// Projects `x` onto the box by clipping each coordinate.
    pub fn project(&self, x: &mut [f64]) {
        for (v, (l, u)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*l, *u);
        }
    }

    /// The vertex maximizing `direction · x` (ties go to the lower bound).
    pub fn vertex_towards(&self, direction: &[f64]) -> Vec<f64> {
        direction
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(d, (l, u))| if *d > 0.0 { *u } else { *l })
            .collect()
    }

    /// Splits at the midpoint of dimension `dim`.
    pub fn bisect(&self, dim: usize) -> (InputBox, InputBox) {
        let mid = self.lower[dim] + 0.5 * (self.upper[dim] - self.lower[dim]);
        let mut left = self.clone();
        let mut right = self.clone();
        left.upper[dim] = mid;
        right.lower[dim] = mid;
        (left, right)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| if u > l { rng.random_range(l..=u) } else { l })
            .collect()
    }
}
