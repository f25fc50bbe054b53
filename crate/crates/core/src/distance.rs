//! Distance functions between the outputs of two networks.
//!
//! Two kinds are supported. `L1` is the sum of absolute coordinate
//! differences. `CDistanceMin` measures `|y1 - y2|` only where both outputs
//! fall into a shared sign category (both nonnegative, both nonpositive, ...)
//! and composes the per-category maxima by taking their minimum.
//!
//! A category whose feasible set is empty over the domain is excluded from the
//! minimum. If every category is empty the two networks never share a sign on
//! the domain, and the distance falls back to the unconstrained L1 maximum.

use serde::{Deserialize, Serialize};

use crate::domain::{InputBox, Interval};
use crate::network::Network;
use crate::verifier::{self, BabConfig, MaxBracket, Objective, VerifyError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DistanceError {
    #[error("output vectors have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("category distances need scalar outputs, got length {0}")]
    NotScalar(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    NonNegative,
    NonPositive,
}

impl Sign {
    pub fn holds(self, v: f64) -> bool {
        match self {
            Sign::NonNegative => v >= 0.0,
            Sign::NonPositive => v <= 0.0,
        }
    }

    /// Restricts `iv` to the values satisfying the sign, or `None` if none do.
    pub fn clip(self, iv: Interval) -> Option<Interval> {
        match self {
            Sign::NonNegative if iv.hi >= 0.0 => Some(Interval {
                lo: iv.lo.max(0.0),
                hi: iv.hi,
            }),
            Sign::NonPositive if iv.lo <= 0.0 => Some(Interval {
                lo: iv.lo,
                hi: iv.hi.min(0.0),
            }),
            _ => None,
        }
    }

    /// Value of the linear form `c(y) <= 0` encoding the sign condition.
    pub fn violation(self, v: f64) -> f64 {
        match self {
            Sign::NonNegative => -v,
            Sign::NonPositive => v,
        }
    }
}

/// A sign condition on both scalar outputs of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Category {
    pub first: Sign,
    pub second: Sign,
}

impl Category {
    pub const BOTH_NONNEGATIVE: Category = Category {
        first: Sign::NonNegative,
        second: Sign::NonNegative,
    };
    pub const BOTH_NONPOSITIVE: Category = Category {
        first: Sign::NonPositive,
        second: Sign::NonPositive,
    };

    pub fn holds(&self, y1: f64, y2: f64) -> bool {
        self.first.holds(y1) && self.second.holds(y2)
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = |s: Sign| match s {
            Sign::NonNegative => ">= 0",
            Sign::NonPositive => "<= 0",
        };
        write!(f, "(N1 {} and N2 {})", s(self.first), s(self.second))
    }
}

fn default_categories() -> Vec<Category> {
    vec![Category::BOTH_NONNEGATIVE, Category::BOTH_NONPOSITIVE]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum DistanceSpec {
    #[serde(rename = "l1")]
    L1,
    #[serde(rename = "cdist")]
    CDistanceMin {
        #[serde(default = "default_categories")]
        categories: Vec<Category>,
    },
}

impl DistanceSpec {
    /// The sign-category distance with the two default categories.
    pub fn cdist() -> Self {
        DistanceSpec::CDistanceMin {
            categories: default_categories(),
        }
    }
}

/// Point evaluation of a distance.
///
/// For `CDistanceMin` a pair of outputs contributes `|y1 - y2|` if it falls
/// into some category and `0` otherwise.
pub fn eval_distance(spec: &DistanceSpec, y1: &[f64], y2: &[f64]) -> Result<f64, DistanceError> {
    if y1.len() != y2.len() {
        return Err(DistanceError::LengthMismatch(y1.len(), y2.len()));
    }
    match spec {
        DistanceSpec::L1 => Ok(y1.iter().zip(y2).map(|(a, b)| (a - b).abs()).sum()),
        DistanceSpec::CDistanceMin { categories } => {
            if y1.len() != 1 {
                return Err(DistanceError::NotScalar(y1.len()));
            }
            let (a, b) = (y1[0], y2[0]);
            Ok(if categories.iter().any(|c| c.holds(a, b)) {
                (a - b).abs()
            } else {
                0.0
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CategoryMax {
    /// No input in the domain puts both outputs into the category.
    Empty,
    Bracket(MaxBracket),
}

/// Brackets `max |N1(x) - N2(x)|` over the inputs of `domain` whose outputs
/// satisfy `category`. `pair` is the concatenation `[N1; N2]`.
pub fn category_max(
    pair: &Network,
    category: Category,
    domain: &InputBox,
    gap: f64,
    cfg: &BabConfig,
) -> Result<CategoryMax, VerifyError> {
    Ok(
        match verifier::maximize_objective(pair, &Objective::Category(category), domain, gap, cfg)? {
            Some(b) => CategoryMax::Bracket(b),
            None => CategoryMax::Empty,
        },
    )
}

/// Maximum of a distance over a domain, with the categories that were
/// excluded as empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMax {
    pub bracket: MaxBracket,
    pub excluded: Vec<Category>,
    /// Every category was empty and the L1 maximum was used instead.
    pub l1_fallback: bool,
}

pub fn distance_max(
    pair: &Network,
    spec: &DistanceSpec,
    domain: &InputBox,
    gap: f64,
    cfg: &BabConfig,
) -> Result<DistanceMax, VerifyError> {
    let l1 = || -> Result<MaxBracket, VerifyError> {
        verifier::maximize_objective(pair, &Objective::L1, domain, gap, cfg)?
            .ok_or_else(|| VerifyError::Objective("L1 objective has no feasible point".into()))
    };
    match spec {
        DistanceSpec::L1 => Ok(DistanceMax {
            bracket: l1()?,
            excluded: Vec::new(),
            l1_fallback: false,
        }),
        DistanceSpec::CDistanceMin { categories } => {
            let mut excluded = Vec::new();
            let mut best: Option<MaxBracket> = None;
            for &c in categories {
                match category_max(pair, c, domain, gap, cfg)? {
                    CategoryMax::Empty => excluded.push(c),
                    CategoryMax::Bracket(b) => {
                        best = Some(match best {
                            None => b,
                            Some(cur) => MaxBracket {
                                lower: cur.lower.min(b.lower),
                                upper: cur.upper.min(b.upper),
                                witness: if b.lower < cur.lower { b.witness } else { cur.witness },
                            },
                        });
                    }
                }
            }
            match best {
                Some(bracket) => Ok(DistanceMax {
                    bracket,
                    excluded,
                    l1_fallback: false,
                }),
                None => Ok(DistanceMax {
                    bracket: l1()?,
                    excluded,
                    l1_fallback: true,
                }),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::affine_network;

    fn line(slope: f64, offset: f64) -> Network {
        affine_network("line", vec![vec![slope]], vec![offset]).unwrap()
    }

    fn unit() -> InputBox {
        InputBox::from_bounds(&[(0.0, 1.0)])
    }

    #[test]
    fn point_evaluation() {
        assert_eq!(eval_distance(&DistanceSpec::L1, &[20.0], &[-20.0]).unwrap(), 40.0);
        let c = DistanceSpec::cdist();
        assert_eq!(eval_distance(&c, &[3.0], &[1.0]).unwrap(), 2.0);
        assert_eq!(eval_distance(&c, &[3.0], &[-1.0]).unwrap(), 0.0);
        assert!(matches!(
            eval_distance(&DistanceSpec::L1, &[1.0], &[1.0, 2.0]),
            Err(DistanceError::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn serde_shape() {
        assert_eq!(serde_json::to_string(&DistanceSpec::L1).unwrap(), r#"{"kind":"l1"}"#);
        let c: DistanceSpec = serde_json::from_str(r#"{"kind":"cdist"}"#).unwrap();
        assert_eq!(c, DistanceSpec::cdist());
    }

    #[test]
    fn category_max_identical_nets() {
        let pair = Network::concat(&line(1.0, 0.0), &line(1.0, 0.0)).unwrap();
        let cfg = BabConfig::default();
        match category_max(&pair, Category::BOTH_NONNEGATIVE, &unit(), 1e-3, &cfg).unwrap() {
            CategoryMax::Bracket(b) => {
                assert_eq!(b.lower, 0.0);
                assert!(b.upper <= 1e-3);
            }
            CategoryMax::Empty => panic!("category is not empty"),
        }
    }

    #[test]
    fn category_max_feasible_only_at_boundary() {
        let pair = Network::concat(&line(1.0, 0.0), &line(2.0, 0.0)).unwrap();
        let cfg = BabConfig::default();
        match category_max(&pair, Category::BOTH_NONPOSITIVE, &unit(), 1e-3, &cfg).unwrap() {
            CategoryMax::Bracket(b) => {
                assert_eq!(b.lower, 0.0);
                assert!(b.upper <= 1e-3, "{b:?}");
                assert_eq!(b.witness.as_deref(), Some(&[0.0][..]));
            }
            CategoryMax::Empty => panic!("x = 0 is feasible"),
        }
    }

    #[test]
    fn category_max_empty() {
        let pair = Network::concat(&line(1.0, 2.0), &line(-1.0, -2.0)).unwrap();
        let r = category_max(&pair, Category::BOTH_NONNEGATIVE, &unit(), 1e-3, &BabConfig::default());
        assert_eq!(r.unwrap(), CategoryMax::Empty);
    }

    #[test]
    fn empty_categories_are_excluded_from_the_min() {
        // N1 = x + 2 > 0 and N2 = 3x + 1 > 0 on [0, 1]: only the nonnegative category is populated.
        let pair = Network::concat(&line(1.0, 2.0), &line(3.0, 1.0)).unwrap();
        let d = distance_max(&pair, &DistanceSpec::cdist(), &unit(), 1e-3, &BabConfig::default()).unwrap();
        assert_eq!(d.excluded, vec![Category::BOTH_NONPOSITIVE]);
        assert!(!d.l1_fallback);
        // |2x - 1| peaks at x = 0 and x = 1 with value 1
        assert!((d.bracket.lower - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_empty_falls_back_to_l1() {
        let pair = Network::concat(&line(1.0, 2.0), &line(-1.0, -2.0)).unwrap();
        let d = distance_max(&pair, &DistanceSpec::cdist(), &unit(), 1e-3, &BabConfig::default()).unwrap();
        assert!(d.l1_fallback);
        assert!((d.bracket.lower - 6.0).abs() < 1e-12);
    }
}
