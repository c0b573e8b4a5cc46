//! Predictors `f = h . phi`: a linear scorer or a ReLU multilayer
//! perceptron, both ending in a single logit.
//!
//! Parameter layout: layers in order from the input, each stored as its
//! weight matrix (`out x in`, row-major) followed by its bias vector.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    Mlp {
        hidden_layers: usize,
        hidden_dim: usize,
    },
}

impl Architecture {
    /// Desk-scale default MLP (3 x 32).
    pub fn mlp() -> Self {
        Architecture::Mlp {
            hidden_layers: 3,
            hidden_dim: 32,
        }
    }

    pub fn default_tap(&self) -> Tap {
        match *self {
            Architecture::Linear => Tap::Logit,
            Architecture::Mlp { hidden_layers, .. } => Tap::Hidden(hidden_layers - 1),
        }
    }

    /// `(fan_in, fan_out)` of each affine layer.
    pub fn layer_shapes(&self, input_dim: usize) -> Vec<(usize, usize)> {
        match *self {
            Architecture::Linear => vec![(input_dim, 1)],
            Architecture::Mlp {
                hidden_layers,
                hidden_dim,
            } => {
                let mut shapes = vec![(input_dim, hidden_dim)];
                shapes.extend((1..hidden_layers).map(|_| (hidden_dim, hidden_dim)));
                shapes.push((hidden_dim, 1));
                shapes
            }
        }
    }

    pub fn param_count(&self, input_dim: usize) -> usize {
        self.layer_shapes(input_dim)
            .iter()
            .map(|(i, o)| i * o + o)
            .sum()
    }
}

/// Which layer's output serves as the representation `phi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    Logit,
    /// Output of hidden layer `i` (0-based), after the rectifier.
    Hidden(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord {
    /// Post-activation output of every hidden layer.
    pub hidden: Vec<Vec<f64>>,
    pub representation: Vec<f64>,
    pub logit: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub arch: Architecture,
    pub input_dim: usize,
    pub tap: Tap,
    pub params: Vec<f64>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

const PROB_CLAMP: f64 = 1e-12;

/// Binary log-loss with the probability clamped to `[1e-12, 1 - 1e-12]`.
pub fn loss(prob: f64, y: u8) -> f64 {
    let p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

impl Predictor {
    /// Uniform weights in `+-1/sqrt(fan_in)`, zero biases.
    pub fn init(arch: Architecture, input_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 {
            return Err(invalid("input dimension must be at least 1"));
        }
        if let Architecture::Mlp {
            hidden_layers,
            hidden_dim,
        } = arch
        {
            if hidden_layers == 0 || hidden_dim == 0 {
                return Err(invalid("MLP needs at least one hidden layer of width >= 1"));
            }
        }
        let mut rng = rng_from_seed(seed);
        let mut params = Vec::with_capacity(arch.param_count(input_dim));
        for (fan_in, fan_out) in arch.layer_shapes(input_dim) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Predictor {
            arch,
            input_dim,
            tap: arch.default_tap(),
            params,
        })
    }

    pub fn with_tap(mut self, tap: Tap) -> Result<Self> {
        self.tap = tap;
        self.check_tap()?;
        Ok(self)
    }

    fn check_tap(&self) -> Result<()> {
        match (self.arch, self.tap) {
            (_, Tap::Logit) => Ok(()),
            (Architecture::Mlp { hidden_layers, .. }, Tap::Hidden(i)) if i < hidden_layers => {
                Ok(())
            }
            (_, Tap::Hidden(i)) => Err(invalid(format!("no hidden layer {i} to tap"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.arch.param_count(self.input_dim);
        if self.params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: self.params.len(),
            });
        }
        self.check_tap()
    }

    pub fn representation_dim(&self) -> usize {
        match (self.arch, self.tap) {
            (Architecture::Mlp { hidden_dim, .. }, Tap::Hidden(_)) => hidden_dim,
            _ => 1,
        }
    }

    /// Offsets of each layer's weights within `params`.
    fn offsets(&self) -> Vec<(usize, usize, usize)> {
        let mut at = 0;
        self.arch
            .layer_shapes(self.input_dim)
            .into_iter()
            .map(|(i, o)| {
                let start = at;
                at += i * o + o;
                (start, i, o)
            })
            .collect()
    }

    /// Weights of the final affine layer followed by its bias.
    pub fn output_layer_mut(&mut self) -> &mut [f64] {
        let (start, _, _) = *self.offsets().last().expect("at least one layer");
        &mut self.params[start..]
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardRecord> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let layers = self.offsets();
        let last = layers.len() - 1;
        let mut hidden = Vec::with_capacity(last);
        let mut input: Vec<f64> = x.to_vec();
        let mut out = Vec::new();
        for (l, &(start, n_in, n_out)) in layers.iter().enumerate() {
            let w = &self.params[start..start + n_in * n_out];
            let b = &self.params[start + n_in * n_out..start + n_in * n_out + n_out];
            out = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    row.iter().zip(&input).map(|(a, v)| a * v).sum::<f64>() + b[o]
                })
                .collect();
            if l < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
                hidden.push(out.clone());
                input = std::mem::take(&mut out);
            }
        }
        let logit = out[0];
        let representation = match self.tap {
            Tap::Logit => vec![logit],
            Tap::Hidden(i) => hidden[i].clone(),
        };
        Ok(ForwardRecord {
            hidden,
            representation,
            logit,
            probability: sigmoid(logit),
        })
    }

    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forward(x)?.logit)
    }

    pub fn predict_label(&self, x: &[f64]) -> Result<u8> {
        Ok(u8::from(self.logit(x)? > 0.0))
    }

    /// Mean log-loss over a batch.
    pub fn mean_loss(&self, features: &[&[f64]], labels: &[u8]) -> Result<f64> {
        check_batch(features, labels)?;
        let mut s = 0.0;
        for (x, &y) in features.iter().zip(labels) {
            s += loss(self.forward(x)?.probability, y);
        }
        Ok(s / features.len() as f64)
    }

    /// Gradient over `params` of the mean log-loss, plus the chain-ruled
    /// contribution of `tap_grads` (one vector per sample: the gradient of
    /// the already-weighted penalty with respect to that sample's
    /// representation).
    ///
    /// The loss part uses `(p - y) / n` at the logit, which is the exact
    /// gradient wherever the probability clamp is inactive.
    pub fn backward(
        &self,
        features: &[&[f64]],
        labels: &[u8],
        tap_grads: Option<&[Vec<f64>]>,
    ) -> Result<Vec<f64>> {
        check_batch(features, labels)?;
        let rep_dim = self.representation_dim();
        if let Some(t) = tap_grads {
            if t.len() != features.len() {
                return Err(Error::DimensionMismatch {
                    expected: features.len(),
                    got: t.len(),
                });
            }
            if let Some(bad) = t.iter().find(|g| g.len() != rep_dim) {
                return Err(Error::DimensionMismatch {
                    expected: rep_dim,
                    got: bad.len(),
                });
            }
        }
        let layers = self.offsets();
        let last = layers.len() - 1;
        let n = features.len() as f64;
        let mut grad = vec![0.0; self.params.len()];

        for (s, (x, &y)) in features.iter().zip(labels).enumerate() {
            let rec = self.forward(x)?;
            let tap = tap_grads.map(|t| t[s].as_slice());
            // delta: gradient with respect to the current layer's output
            let mut delta = vec![(rec.probability - f64::from(y)) / n];
            if let (Tap::Logit, Some(g)) = (self.tap, tap) {
                delta[0] += g[0];
            }
            for l in (0..=last).rev() {
                let (start, n_in, n_out) = layers[l];
                if l < last {
                    if let (Tap::Hidden(i), Some(g)) = (self.tap, tap) {
                        if i == l {
                            delta.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                        }
                    }
                    for (d, a) in delta.iter_mut().zip(&rec.hidden[l]) {
                        if *a <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                let input: &[f64] = if l == 0 { x } else { &rec.hidden[l - 1] };
                let w = &self.params[start..start + n_in * n_out];
                for o in 0..n_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &mut grad[start + o * n_in..start + (o + 1) * n_in];
                    row.iter_mut().zip(input).for_each(|(g, v)| *g += d * v);
                    grad[start + n_in * n_out + o] += d;
                }
                if l > 0 {
                    let mut prev = vec![0.0; n_in];
                    for o in 0..n_out {
                        let d = delta[o];
                        if d != 0.0 {
                            let row = &w[o * n_in..(o + 1) * n_in];
                            prev.iter_mut().zip(row).for_each(|(p, wv)| *p += d * wv);
                        }
                    }
                    delta = prev;
                }
            }
        }
        Ok(grad)
    }

    pub fn to_checkpoint(&self) -> String {
        let mut s = String::from("invrec-predictor 1\n");
        match self.arch {
            Architecture::Linear => s.push_str("kind linear\n"),
            Architecture::Mlp {
                hidden_layers,
                hidden_dim,
            } => {
                let _ = writeln!(s, "kind mlp {hidden_layers} {hidden_dim}");
            }
        }
        let _ = writeln!(s, "input_dim {}", self.input_dim);
        match self.tap {
            Tap::Logit => s.push_str("tap logit\n"),
            Tap::Hidden(i) => {
                let _ = writeln!(s, "tap hidden {i}");
            }
        }
        let _ = writeln!(s, "params {}", self.params.len());
        for p in &self.params {
            // shortest representation that parses back to the same bits
            let _ = writeln!(s, "{p:?}");
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Parse(format!("checkpoint ends before {what}")))
        };
        if next("header")?.trim() != "invrec-predictor 1" {
            return Err(Error::Parse("not a predictor checkpoint".into()));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad integer {s:?}")))
        };
        let kind: Vec<&str> = next("kind")?.split_whitespace().collect();
        let arch = match kind.as_slice() {
            ["kind", "linear"] => Architecture::Linear,
            ["kind", "mlp", l, d] => Architecture::Mlp {
                hidden_layers: num(l)?,
                hidden_dim: num(d)?,
            },
            _ => return Err(Error::Parse("bad kind line".into())),
        };
        let input_dim = match next("input_dim")?
            .split_whitespace()
            .collect::<Vec<_>>()
            .as_slice()
        {
            ["input_dim", d] => num(d)?,
            _ => return Err(Error::Parse("bad input_dim line".into())),
        };
        let tap = match next("tap")?
            .split_whitespace()
            .collect::<Vec<_>>()
            .as_slice()
        {
            ["tap", "logit"] => Tap::Logit,
            ["tap", "hidden", i] => Tap::Hidden(num(i)?),
            _ => return Err(Error::Parse("bad tap line".into())),
        };
        let count = match next("params")?
            .split_whitespace()
            .collect::<Vec<_>>()
            .as_slice()
        {
            ["params", c] => num(c)?,
            _ => return Err(Error::Parse("bad params line".into())),
        };
        let params = lines
            .map(|l| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad parameter {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if params.len() != count {
            return Err(Error::Parse(format!(
                "expected {count} parameters, found {}",
                params.len()
            )));
        }
        let p = Predictor {
            arch,
            input_dim,
            tap,
            params,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Predictor::from_checkpoint(&std::fs::read_to_string(path)?)
    }
}

fn check_batch(features: &[&[f64]], labels: &[u8]) -> Result<()> {
    if features.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            got: labels.len(),
        });
    }
    if features.is_empty() {
        return Err(invalid("empty batch"));
    }
    Ok(())
}
