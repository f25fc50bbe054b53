//! Feed-forward ReLU networks.
//!
//! A [`Network`] is a stack of dense affine layers. Every hidden layer applies
//! a ReLU, the final layer is linear. Networks are validated on construction
//! and immutable afterwards, so every evaluation routine here is a pure
//! function of its arguments.
//!
//! The JSON interchange format is
//!
//! ```json
//! { "name": "n1", "input_dim": 2,
//!   "layers": [ { "weights": [[1, 4], [-3, 2]], "bias": [1, -2], "activation": "relu" },
//!               { "weights": [[2, -1]], "bias": [0], "activation": "linear" } ] }
//! ```
//!
//! with weights stored row-major, one row per output neuron.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed network JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("network has no layers")]
    Empty,
    #[error("layer {layer}: {detail}")]
    DimensionMismatch { layer: usize, detail: String },
    #[error("layer {layer}: non-finite {what} at index {index}")]
    NonFinite {
        layer: usize,
        what: &'static str,
        index: usize,
    },
    #[error("layer {layer}: expected {expected} activation")]
    Activation { layer: usize, expected: Activation },
    #[error("input has length {got}, network expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("cannot concatenate networks with input dims {0} and {1}")]
    ConcatInputDim(usize, usize),
}

pub type Result<T, E = NetworkError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => f.write_str("relu"),
            Activation::Linear => f.write_str("linear"),
        }
    }
}

/// Dense affine layer followed by an activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl Layer {
    /// Builds a layer from row-major nested weights.
    pub fn new(weights: Vec<Vec<f64>>, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        Self::from_nested(0, weights, bias, activation)
    }

    fn from_nested(
        index: usize,
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        let rows = weights.len();
        let cols = weights.first().map_or(0, Vec::len);
        if let Some(r) = weights.iter().position(|row| row.len() != cols) {
            return Err(NetworkError::DimensionMismatch {
                layer: index,
                detail: format!(
                    "weight row {r} has {} entries, row 0 has {cols}",
                    weights[r].len()
                ),
            });
        }
        let flat = weights.into_iter().flatten().collect();
        Self::from_flat(index, rows, cols, flat, bias, activation)
    }

    /// Builds a layer from a flat row-major weight buffer.
    pub fn from_flat(
        index: usize,
        rows: usize,
        cols: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(NetworkError::DimensionMismatch {
                layer: index,
                detail: format!("weight matrix is {rows}x{cols}"),
            });
        }
        if weights.len() != rows * cols {
            return Err(NetworkError::DimensionMismatch {
                layer: index,
                detail: format!("{} weights for a {rows}x{cols} matrix", weights.len()),
            });
        }
        if bias.len() != rows {
            return Err(NetworkError::DimensionMismatch {
                layer: index,
                detail: format!("bias has {} entries, weights have {rows} rows", bias.len()),
            });
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(NetworkError::NonFinite {
                layer: index,
                what: "weight",
                index: i,
            });
        }
        if let Some(i) = bias.iter().position(|b| !b.is_finite()) {
            return Err(NetworkError::NonFinite {
                layer: index,
                what: "bias",
                index: i,
            });
        }
        Ok(Self {
            rows,
            cols,
            weights,
            bias,
            activation,
        })
    }

    /// Number of output neurons.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of inputs.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.cols..(r + 1) * self.cols]
    }

    pub fn weight(&self, r: usize, c: usize) -> f64 {
        self.weights[r * self.cols + c]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights_nested(&self) -> Vec<Vec<f64>> {
        self.weights.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    /// Writes `W x + b` into `out`.
    pub(crate) fn affine_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.bias.iter().enumerate().map(|(r, &b)| {
            self.row(r)
                .iter()
                .zip(x)
                .fold(b, |acc, (w, v)| acc + w * v)
        }));
    }

    fn identity(width: usize, activation: Activation) -> Self {
        let mut weights = vec![0.0; width * width];
        for i in 0..width {
            weights[i * width + i] = 1.0;
        }
        Self {
            rows: width,
            cols: width,
            weights,
            bias: vec![0.0; width],
            activation,
        }
    }
}

/// Pre-activation values of every layer for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `pre_activations[l]` is `W_l h_{l-1} + b_l`.
    pub pre_activations: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    name: String,
    input_dim: usize,
    layers: Vec<Layer>,
}

impl Network {
    /// Validates and assembles a network.
    pub fn new(name: impl Into<String>, input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NetworkError::Empty);
        }
        let last = layers.len() - 1;
        let mut width = input_dim;
        for (l, layer) in layers.iter().enumerate() {
            if layer.cols != width {
                return Err(NetworkError::DimensionMismatch {
                    layer: l,
                    detail: format!(
                        "weights have {} columns, previous layer produces {width} values",
                        layer.cols
                    ),
                });
            }
            let expected = if l == last {
                Activation::Linear
            } else {
                Activation::Relu
            };
            if layer.activation != expected {
                return Err(NetworkError::Activation { layer: l, expected });
            }
            width = layer.rows;
        }
        Ok(Self {
            name: name.into(),
            input_dim,
            layers,
        })
    }

    /// A network with the given layer sizes and all parameters zero.
    ///
    /// `sizes` lists every layer width including the input and the output,
    /// e.g. `[4, 32, 16, 1]`.
    pub fn zeros(name: impl Into<String>, sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(NetworkError::Empty);
        }
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let act = if l == last {
                    Activation::Linear
                } else {
                    Activation::Relu
                };
                Layer::from_flat(l, w[1], w[0], vec![0.0; w[0] * w[1]], vec![0.0; w[1]], act)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(name, sizes[0], layers)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].rows
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Layer widths, input first.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.layers.iter().map(Layer::rows))
            .collect()
    }

    pub fn relu_count(&self) -> usize {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(Layer::rows)
            .sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(NetworkError::InputDim {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.affine_into(&cur, &mut next);
            if layer.activation == Activation::Relu {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let mut pre = Vec::new();
            layer.affine_into(&cur, &mut pre);
            cur = match layer.activation {
                Activation::Relu => pre.iter().map(|v| v.max(0.0)).collect(),
                Activation::Linear => pre.clone(),
            };
            pre_activations.push(pre);
        }
        Ok(ForwardTrace {
            pre_activations,
            output: cur,
        })
    }

    /// Evaluates the network and the gradient of `cotangent · N(x)` with
    /// respect to `x`.
    ///
    /// The gradient is accumulated backwards through the activation pattern
    /// at `x`; a ReLU whose pre-activation is exactly zero counts as active.
    pub fn vjp(&self, x: &[f64], cotangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let trace = self.forward_trace(x)?;
        if cotangent.len() != self.output_dim() {
            return Err(NetworkError::DimensionMismatch {
                layer: self.layers.len() - 1,
                detail: format!(
                    "cotangent has {} entries, network has {} outputs",
                    cotangent.len(),
                    self.output_dim()
                ),
            });
        }
        let mut grad = cotangent.to_vec();
        for (layer, pre) in self.layers.iter().zip(&trace.pre_activations).rev() {
            if layer.activation == Activation::Relu {
                for (g, &p) in grad.iter_mut().zip(pre) {
                    if p < 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let mut prev = vec![0.0; layer.cols];
            for (r, &g) in grad.iter().enumerate() {
                if g != 0.0 {
                    for (p, w) in prev.iter_mut().zip(layer.row(r)) {
                        *p += w * g;
                    }
                }
            }
            grad = prev;
        }
        Ok((trace.output, grad))
    }

    /// Stacks two networks so they share one input; the outputs of `a` come
    /// first, then those of `b`.
    ///
    /// Hidden layers become block-diagonal. If the depths differ, the
    /// shallower network is first padded with exact identity layers.
    pub fn concat(a: &Network, b: &Network) -> Result<Network> {
        if a.input_dim != b.input_dim {
            return Err(NetworkError::ConcatInputDim(a.input_dim, b.input_dim));
        }
        let depth = a.layers.len().max(b.layers.len());
        let a = a.padded_to_depth(depth);
        let b = b.padded_to_depth(depth);
        let mut layers = Vec::with_capacity(depth);
        for (l, (la, lb)) in a.layers.iter().zip(&b.layers).enumerate() {
            let rows = la.rows + lb.rows;
            let cols = if l == 0 { a.input_dim } else { la.cols + lb.cols };
            let mut weights = vec![0.0; rows * cols];
            for r in 0..la.rows {
                weights[r * cols..r * cols + la.cols].copy_from_slice(la.row(r));
            }
            let offset = if l == 0 { 0 } else { la.cols };
            for r in 0..lb.rows {
                let start = (la.rows + r) * cols + offset;
                weights[start..start + lb.cols].copy_from_slice(lb.row(r));
            }
            let bias = la.bias.iter().chain(&lb.bias).copied().collect();
            layers.push(Layer {
                rows,
                cols,
                weights,
                bias,
                activation: la.activation,
            });
        }
        Network::new(format!("{}+{}", a.name, b.name), a.input_dim, layers)
    }

    /// Returns an equivalent network with exactly `depth` layers.
    fn padded_to_depth(&self, depth: usize) -> Network {
        let extra = depth.saturating_sub(self.layers.len());
        if extra == 0 {
            return self.clone();
        }
        let mut layers = self.layers.clone();
        let last = layers.pop().expect("validated networks have a layer");
        if layers.is_empty() {
            // No hidden layer to pass through: route x as relu(x) - relu(-x).
            let n = self.input_dim;
            let mut split = vec![0.0; 2 * n * n];
            for i in 0..n {
                split[i * n + i] = 1.0;
                split[(n + i) * n + i] = -1.0;
            }
            layers.push(Layer {
                rows: 2 * n,
                cols: n,
                weights: split,
                bias: vec![0.0; 2 * n],
                activation: Activation::Relu,
            });
            layers.extend((1..extra).map(|_| Layer::identity(2 * n, Activation::Relu)));
            let mut weights = Vec::with_capacity(last.rows * 2 * n);
            for r in 0..last.rows {
                weights.extend_from_slice(last.row(r));
                weights.extend(last.row(r).iter().map(|w| -w));
            }
            layers.push(Layer {
                rows: last.rows,
                cols: 2 * n,
                weights,
                bias: last.bias,
                activation: Activation::Linear,
            });
        } else {
            // Hidden outputs are already nonnegative, so an identity ReLU layer is exact.
            let width = last.cols;
            layers.extend((0..extra).map(|_| Layer::identity(width, Activation::Relu)));
            layers.push(last);
        }
        Network {
            name: self.name.clone(),
            input_dim: self.input_dim,
            layers,
        }
    }

    /// All weights and biases, layer by layer (weights row-major, then bias).
    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Same architecture with parameters replaced, in [`Network::parameters`] order.
    pub fn with_parameters(&self, params: &[f64]) -> Result<Network> {
        if params.len() != self.parameter_count() {
            return Err(NetworkError::DimensionMismatch {
                layer: 0,
                detail: format!(
                    "{} parameters supplied, architecture has {}",
                    params.len(),
                    self.parameter_count()
                ),
            });
        }
        let mut rest = params;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (w, tail) = rest.split_at(layer.weights.len());
            let (b, tail) = tail.split_at(layer.bias.len());
            rest = tail;
            layers.push(Layer::from_flat(
                l,
                layer.rows,
                layer.cols,
                w.to_vec(),
                b.to_vec(),
                layer.activation,
            )?);
        }
        Network::new(self.name.clone(), self.input_dim, layers)
    }

    pub fn from_json_str(text: &str) -> Result<Network> {
        let file: NetworkFile = serde_json::from_str(&quote_nonfinite_tokens(text))?;
        file.try_into()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&NetworkFile::from(self)).expect("finite values serialize")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Network> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| NetworkError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()).map_err(|source| NetworkError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

impl Serialize for Network {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        NetworkFile::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Network {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        NetworkFile::deserialize(d)?
            .try_into()
            .map_err(de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    name: String,
    input_dim: usize,
    layers: Vec<LayerFile>,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    weights: Vec<Vec<Real>>,
    bias: Vec<Real>,
    activation: Activation,
}

impl TryFrom<NetworkFile> for Network {
    type Error = NetworkError;

    fn try_from(file: NetworkFile) -> Result<Network> {
        let layers = file
            .layers
            .into_iter()
            .enumerate()
            .map(|(l, layer)| {
                let weights = layer
                    .weights
                    .into_iter()
                    .map(|row| row.into_iter().map(|r| r.0).collect())
                    .collect();
                let bias = layer.bias.into_iter().map(|r| r.0).collect();
                Layer::from_nested(l, weights, bias, layer.activation)
            })
            .collect::<Result<Vec<_>>>()?;
        Network::new(file.name, file.input_dim, layers)
    }
}

impl From<&Network> for NetworkFile {
    fn from(net: &Network) -> Self {
        NetworkFile {
            name: net.name.clone(),
            input_dim: net.input_dim,
            layers: net
                .layers
                .iter()
                .map(|l| LayerFile {
                    weights: l
                        .weights
                        .chunks(l.cols)
                        .map(|row| row.iter().copied().map(Real).collect())
                        .collect(),
                    bias: l.bias.iter().copied().map(Real).collect(),
                    activation: l.activation,
                })
                .collect(),
        }
    }
}

/// A JSON number, or one of the strings `"NaN"`, `"Infinity"`, `"-Infinity"`.
///
/// Exporters that follow JavaScript conventions write bare `NaN` tokens; those
/// are quoted before parsing so they reach validation and fail there with a
/// layer index instead of as an anonymous syntax error.
#[derive(Clone, Copy)]
struct Real(f64);

impl Serialize for Real {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.0)
    }
}

impl<'de> Deserialize<'de> for Real {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct RealVisitor;
        impl Visitor<'_> for RealVisitor {
            type Value = Real;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a number")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Real, E> {
                Ok(Real(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Real, E> {
                Ok(Real(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Real, E> {
                Ok(Real(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Real, E> {
                match v {
                    "NaN" => Ok(Real(f64::NAN)),
                    "Infinity" => Ok(Real(f64::INFINITY)),
                    "-Infinity" => Ok(Real(f64::NEG_INFINITY)),
                    other => Err(E::invalid_value(de::Unexpected::Str(other), &self)),
                }
            }
        }
        d.deserialize_any(RealVisitor)
    }
}

fn quote_nonfinite_tokens(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            rest = &rest[c.len_utf8()..];
            continue;
        }
        if c == '"' {
            in_string = true;
        }
        let token = ["-Infinity", "Infinity", "NaN"]
            .into_iter()
            .find(|t| rest.starts_with(t));
        if let Some(t) = token {
            out.push('"');
            out.push_str(t);
            out.push('"');
            rest = &rest[t.len()..];
        } else {
            out.push(c);
            rest = &rest[c.len_utf8()..];
        }
    }
    out
}

/// The two-input toy network used throughout the tests and docs.
///
/// Hidden pre-activations are `x1 + 4 x2 + 1` and `-3 x1 + 2 x2 - 2`; the
/// output is `2 relu(h1) - relu(h2)`.
pub fn toy_network() -> Network {
    let hidden = Layer::new(
        vec![vec![1.0, 4.0], vec![-3.0, 2.0]],
        vec![1.0, -2.0],
        Activation::Relu,
    )
    .expect("static layer");
    let out = Layer::new(vec![vec![2.0, -1.0]], vec![0.0], Activation::Linear).expect("static layer");
    Network::new("toy", 2, vec![hidden, out]).expect("static network")
}

/// A one-layer affine network `x -> W x + b`.
pub fn affine_network(
    name: impl Into<String>,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
) -> Result<Network> {
    let layer = Layer::new(weights, bias, Activation::Linear)?;
    Network::new(name, layer.cols(), vec![layer])
}
