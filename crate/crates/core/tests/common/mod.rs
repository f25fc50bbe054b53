//! Brute-force reference for networks with one or two inputs.
//!
//! Inside one activation pattern a ReLU network is affine, so the maximum of
//! `|y1 - y2|` over a polygon cut out by pattern and sign constraints sits on
//! a vertex. Vertices are intersections of box faces with the zero sets of
//! every pre-activation and every output under every pattern. Evaluating the
//! real networks at all of those points, and keeping the best, gives the
//! exact maximum. Extra candidates are harmless since each one is a genuine
//! point of the box.

#![allow(dead_code)]

use concord_core::{Activation, Category, InputBox, Layer, Network};
use rand::Rng;

/// Affine form `w . x + b`.
#[derive(Debug, Clone)]
pub struct Form {
    pub w: Vec<f64>,
    pub b: f64,
}

/// All affine zero-set forms of a network: every hidden pre-activation and
/// every output, under every activation pattern.
pub fn pattern_forms(net: &Network) -> Vec<Form> {
    let relus = net.relu_count();
    assert!(relus <= 16, "pattern enumeration is exponential");
    let n = net.input_dim();
    let mut forms = Vec::new();
    for mask in 0u32..(1 << relus) {
        // Current layer values as affine forms of x.
        let mut values: Vec<Form> = (0..n)
            .map(|i| {
                let mut w = vec![0.0; n];
                w[i] = 1.0;
                Form { w, b: 0.0 }
            })
            .collect();
        let mut bit = 0;
        for layer in net.layers() {
            let mut next = Vec::with_capacity(layer.rows());
            for r in 0..layer.rows() {
                let mut w = vec![0.0; n];
                let mut b = layer.bias()[r];
                for (c, v) in values.iter().enumerate() {
                    let k = layer.weight(r, c);
                    b += k * v.b;
                    for (wi, vi) in w.iter_mut().zip(&v.w) {
                        *wi += k * vi;
                    }
                }
                let pre = Form { w, b };
                forms.push(pre.clone());
                match layer.activation() {
                    Activation::Relu => {
                        let active = mask >> bit & 1 == 1;
                        bit += 1;
                        next.push(if active {
                            pre
                        } else {
                            Form { w: vec![0.0; n], b: 0.0 }
                        });
                    }
                    Activation::Linear => next.push(pre),
                }
            }
            values = next;
        }
    }
    forms
}

fn box_faces(domain: &InputBox) -> Vec<Form> {
    let n = domain.dim();
    let mut out = Vec::new();
    for i in 0..n {
        for v in [domain.lower()[i], domain.upper()[i]] {
            let mut w = vec![0.0; n];
            w[i] = 1.0;
            out.push(Form { w, b: -v });
        }
    }
    out
}

/// Candidate maximizers of any piecewise-linear objective built from the
/// outputs of `nets` on `domain` (one or two inputs).
pub fn candidates(nets: &[&Network], domain: &InputBox) -> Vec<Vec<f64>> {
    let n = domain.dim();
    assert!(n == 1 || n == 2);
    let mut lines = box_faces(domain);
    for net in nets {
        lines.extend(pattern_forms(net));
    }
    lines.retain(|f| f.w.iter().any(|w| w.abs() > 1e-12));
    let mut out = Vec::new();
    let keep = |x: Vec<f64>, out: &mut Vec<Vec<f64>>| {
        let inside = (0..n).all(|i| x[i] >= domain.lower()[i] - 1e-9 && x[i] <= domain.upper()[i] + 1e-9);
        if inside && x.iter().all(|v| v.is_finite()) {
            let mut x = x;
            domain.project(&mut x);
            out.push(x);
        }
    };
    if n == 1 {
        for f in &lines {
            keep(vec![-f.b / f.w[0]], &mut out);
        }
        return out;
    }
    for (i, f) in lines.iter().enumerate() {
        for g in &lines[i + 1..] {
            let det = f.w[0] * g.w[1] - f.w[1] * g.w[0];
            if det.abs() < 1e-12 {
                continue;
            }
            let x0 = (-f.b * g.w[1] + g.b * f.w[1]) / det;
            let x1 = (-f.w[0] * g.b + g.w[0] * f.b) / det;
            keep(vec![x0, x1], &mut out);
        }
    }
    out
}

/// Exact `max |a(x) - b(x)|` over the domain, for scalar-output networks.
pub fn exact_l1_max(a: &Network, b: &Network, domain: &InputBox) -> f64 {
    candidates(&[a, b], domain)
        .iter()
        .map(|x| {
            a.forward(x).unwrap().iter().zip(b.forward(x).unwrap()).map(|(p, q)| (p - q).abs()).sum::<f64>()
        })
        .fold(0.0, f64::max)
}

/// Exact maximum of `|a(x) - b(x)|` over inputs whose outputs fall into the
/// category, or `None` when there are none.
pub fn exact_category_max(a: &Network, b: &Network, domain: &InputBox, category: Category) -> Option<f64> {
    candidates(&[a, b], domain)
        .iter()
        .filter_map(|x| {
            let (p, q) = (a.forward(x).unwrap()[0], b.forward(x).unwrap()[0]);
            let near = |s: concord_core::Sign, v: f64| s.holds(v) || v.abs() <= 1e-9;
            (near(category.first, p) && near(category.second, q)).then_some((p - q).abs())
        })
        .reduce(f64::max)
}

/// The category distance's maximum: the smallest per-category maximum over
/// the populated categories, or the L1 maximum if none is populated.
pub fn exact_cdist_max(a: &Network, b: &Network, domain: &InputBox, categories: &[Category]) -> f64 {
    categories
        .iter()
        .filter_map(|&c| exact_category_max(a, b, domain, c))
        .reduce(f64::min)
        .unwrap_or_else(|| exact_l1_max(a, b, domain))
}

/// Random scalar-output ReLU network with the given hidden widths.
pub fn random_network<R: Rng>(rng: &mut R, name: &str, input_dim: usize, hidden: &[usize]) -> Network {
    let mut sizes = vec![input_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    let last = sizes.len() - 2;
    let layers = sizes
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let weights = (0..w[1]).map(|_| (0..w[0]).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let bias = (0..w[1]).map(|_| rng.random_range(-1.0..1.0)).collect();
            let act = if l == last { Activation::Linear } else { Activation::Relu };
            Layer::new(weights, bias, act).unwrap()
        })
        .collect();
    Network::new(name, input_dim, layers).unwrap()
}

/// A random pair with one or two inputs and at most `max_relus` ReLUs in total.
pub fn random_pair<R: Rng>(rng: &mut R, max_relus: usize) -> (Network, Network, InputBox) {
    let dim = rng.random_range(1..=2);
    let shape = |rng: &mut R, budget: usize| -> Vec<usize> {
        let depth = rng.random_range(1..=2usize);
        let mut left = budget;
        let mut out = Vec::new();
        for _ in 0..depth {
            if left == 0 {
                break;
            }
            let w = rng.random_range(1..=left.min(3));
            out.push(w);
            left -= w;
        }
        out
    };
    let ha = shape(rng, max_relus / 2);
    let hb = shape(rng, max_relus - ha.iter().sum::<usize>());
    let a = random_network(rng, "a", dim, &ha);
    let b = random_network(rng, "b", dim, &hb);
    let bounds: Vec<(f64, f64)> = (0..dim)
        .map(|_| {
            let lo = rng.random_range(-2.0..1.0);
            (lo, lo + rng.random_range(0.2..2.0))
        })
        .collect();
    (a, b, InputBox::from_bounds(&bounds))
}
