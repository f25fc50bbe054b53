//! Bound propagation through a network over an input box.
//!
//! Interval propagation pushes the box through with interval arithmetic,
//! giving a sound enclosure of every neuron's pre-activation value.
//!
//! Symbolic propagation instead carries, for every neuron, an affine lower and
//! upper bound in terms of the inputs. Unstable ReLUs are replaced by linear
//! relaxations of their lower and upper bound functions. Because the bounds
//! stay functions of the input, correlations between neurons that share
//! inputs survive, and the bounds are exact on boxes where every ReLU is
//! stable. The verifier uses these bounds to prune subproblems.

use crate::domain::{DomainError, InputBox, Interval};
use crate::network::{Activation, Layer, Network};

/// Phase of a ReLU over a whole box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Active,
    Inactive,
    Unstable,
}

impl Phase {
    pub fn of(pre: Interval) -> Phase {
        if pre.lo >= 0.0 {
            Phase::Active
        } else if pre.hi <= 0.0 {
            Phase::Inactive
        } else {
            Phase::Unstable
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerBounds {
    /// Enclosure of `W_l h_{l-1} + b_l` for every layer, output layer last.
    pub pre_activations: Vec<Vec<Interval>>,
}

impl LayerBounds {
    pub fn output(&self) -> &[Interval] {
        self.pre_activations.last().expect("at least one layer")
    }

    /// Phases of the hidden ReLUs, layer by layer.
    pub fn phases(&self) -> Vec<Vec<Phase>> {
        let hidden = &self.pre_activations[..self.pre_activations.len() - 1];
        hidden
            .iter()
            .map(|layer| layer.iter().copied().map(Phase::of).collect())
            .collect()
    }

    pub fn unstable_count(&self) -> usize {
        self.phases()
            .iter()
            .flatten()
            .filter(|p| **p == Phase::Unstable)
            .count()
    }
}

pub fn propagate_bounds(net: &Network, domain: &InputBox) -> Result<LayerBounds, DomainError> {
    domain.check_dim(net.input_dim())?;
    let mut lo = domain.lower().to_vec();
    let mut hi = domain.upper().to_vec();
    let mut pre_activations = Vec::with_capacity(net.layers().len());
    let (mut nlo, mut nhi) = (Vec::new(), Vec::new());
    for layer in net.layers() {
        affine_interval(layer, &lo, &hi, &mut nlo, &mut nhi);
        pre_activations.push(
            nlo.iter()
                .zip(&nhi)
                .map(|(&l, &h)| Interval { lo: l, hi: h })
                .collect(),
        );
        if layer.activation() == Activation::Relu {
            relu_in_place(&mut nlo, &mut nhi);
        }
        std::mem::swap(&mut lo, &mut nlo);
        std::mem::swap(&mut hi, &mut nhi);
    }
    Ok(LayerBounds { pre_activations })
}

/// Affine lower and upper bounds of every neuron of the current layer,
/// stored row by row as `[c_0, ..., c_{n-1}, constant]`.
#[derive(Debug, Default)]
pub(crate) struct Symbolic {
    n: usize,
    lo: Vec<f64>,
    up: Vec<f64>,
    next_lo: Vec<f64>,
    next_up: Vec<f64>,
}

impl Symbolic {
    pub fn width(&self) -> usize {
        self.lo.len() / (self.n + 1)
    }

    pub fn lower_eq(&self, i: usize) -> &[f64] {
        &self.lo[i * (self.n + 1)..(i + 1) * (self.n + 1)]
    }

    pub fn upper_eq(&self, i: usize) -> &[f64] {
        &self.up[i * (self.n + 1)..(i + 1) * (self.n + 1)]
    }
}

/// Minimum of the affine function `eq` over the box.
pub(crate) fn eq_min(eq: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    let n = lower.len();
    let mut v = eq[n];
    for ((c, l), u) in eq[..n].iter().zip(lower).zip(upper) {
        v += if *c >= 0.0 { c * l } else { c * u };
    }
    v
}

/// Maximum of the affine function `eq` over the box.
pub(crate) fn eq_max(eq: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    let n = lower.len();
    let mut v = eq[n];
    for ((c, l), u) in eq[..n].iter().zip(lower).zip(upper) {
        v += if *c >= 0.0 { c * u } else { c * l };
    }
    v
}

/// Symbolic propagation, leaving the output layer's bound functions in `sym`.
/// Returns whether every hidden ReLU is stable over the box, in which case the
/// lower and upper functions coincide with the network on the box.
pub(crate) fn propagate_symbolic(net: &Network, lower: &[f64], upper: &[f64], sym: &mut Symbolic) -> bool {
    let n = lower.len();
    let w = n + 1;
    sym.n = n;
    sym.lo.clear();
    sym.lo.resize(n * w, 0.0);
    for i in 0..n {
        sym.lo[i * w + i] = 1.0;
    }
    sym.up.clone_from(&sym.lo);
    let mut stable = true;
    for layer in net.layers() {
        let rows = layer.rows();
        sym.next_lo.clear();
        sym.next_lo.resize(rows * w, 0.0);
        sym.next_up.clear();
        sym.next_up.resize(rows * w, 0.0);
        for r in 0..rows {
            let lo_row = &mut sym.next_lo[r * w..(r + 1) * w];
            let up_row = &mut sym.next_up[r * w..(r + 1) * w];
            lo_row[n] = layer.bias()[r];
            up_row[n] = layer.bias()[r];
            for (j, &c) in layer.row(r).iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let (for_lo, for_up) = if c > 0.0 {
                    (&sym.lo[j * w..(j + 1) * w], &sym.up[j * w..(j + 1) * w])
                } else {
                    (&sym.up[j * w..(j + 1) * w], &sym.lo[j * w..(j + 1) * w])
                };
                for (d, s) in lo_row.iter_mut().zip(for_lo) {
                    *d += c * s;
                }
                for (d, s) in up_row.iter_mut().zip(for_up) {
                    *d += c * s;
                }
            }
            if layer.activation() == Activation::Relu {
                let (l_lo, l_hi) = (eq_min(lo_row, lower, upper), eq_max(lo_row, lower, upper));
                let (u_lo, u_hi) = (eq_min(up_row, lower, upper), eq_max(up_row, lower, upper));
                if l_lo >= 0.0 {
                    continue;
                }
                if u_hi <= 0.0 {
                    lo_row.iter_mut().for_each(|v| *v = 0.0);
                    up_row.iter_mut().for_each(|v| *v = 0.0);
                    continue;
                }
                stable = false;
                // relu(z) <= relu(U) <= chord of relu over U's range
                if u_lo < 0.0 {
                    let k = u_hi / (u_hi - u_lo);
                    up_row.iter_mut().for_each(|v| *v *= k);
                    up_row[n] -= k * u_lo;
                }
                // relu(z) >= relu(L) >= k L for k in [0, 1]
                if l_hi <= 0.0 {
                    lo_row.iter_mut().for_each(|v| *v = 0.0);
                } else {
                    let k = l_hi / (l_hi - l_lo);
                    lo_row.iter_mut().for_each(|v| *v *= k);
                }
            }
        }
        std::mem::swap(&mut sym.lo, &mut sym.next_lo);
        std::mem::swap(&mut sym.up, &mut sym.next_up);
    }
    stable
}

/// Output enclosure from symbolic propagation.
pub fn symbolic_output_bounds(net: &Network, domain: &InputBox) -> Result<Vec<Interval>, DomainError> {
    domain.check_dim(net.input_dim())?;
    let mut sym = Symbolic::default();
    propagate_symbolic(net, domain.lower(), domain.upper(), &mut sym);
    Ok((0..sym.width())
        .map(|i| Interval {
            lo: eq_min(sym.lower_eq(i), domain.lower(), domain.upper()),
            hi: eq_max(sym.upper_eq(i), domain.lower(), domain.upper()),
        })
        .collect())
}

fn affine_interval(layer: &Layer, lo: &[f64], hi: &[f64], out_lo: &mut Vec<f64>, out_hi: &mut Vec<f64>) {
    out_lo.clear();
    out_hi.clear();
    for (r, &b) in layer.bias().iter().enumerate() {
        let (mut l, mut h) = (b, b);
        for ((&w, &xl), &xh) in layer.row(r).iter().zip(lo).zip(hi) {
            if w >= 0.0 {
                l += w * xl;
                h += w * xh;
            } else {
                l += w * xh;
                h += w * xl;
            }
        }
        out_lo.push(l);
        out_hi.push(h);
    }
}

fn relu_in_place(lo: &mut [f64], hi: &mut [f64]) {
    for (l, h) in lo.iter_mut().zip(hi.iter_mut()) {
        *l = l.max(0.0);
        *h = h.max(0.0);
    }
}
