//! Factorization score model: `score(u, i) = <user_u, item_i> + bias_i`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard deviation of the Gaussian used to initialize latent factors.
pub const INIT_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    MostPop,
    Wmf,
    Bpr,
    P3s1,
    P3s2,
    P3s3,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::MostPop,
        Method::Wmf,
        Method::Bpr,
        Method::P3s1,
        Method::P3s2,
        Method::P3s3,
    ];

    /// BPR and the three P3S variants are trained on item pairs.
    pub fn is_pairwise(self) -> bool {
        matches!(self, Method::Bpr | Method::P3s1 | Method::P3s2 | Method::P3s3)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::MostPop => "mostpop",
            Method::Wmf => "wmf",
            Method::Bpr => "bpr",
            Method::P3s1 => "p3s1",
            Method::P3s2 => "p3s2",
            Method::P3s3 => "p3s3",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let lower = s.to_ascii_lowercase().replace('-', "");
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == lower)
            .ok_or_else(|| format!("unknown method `{s}` (expected mostpop|wmf|bpr|p3s1|p3s2|p3s3)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Latent dimensionality.
    pub k: usize,
    /// Learning rate.
    pub eta: f64,
    /// Regularization strength.
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    pub method: Method,
    /// Confidence weight on observed cells, WMF only.
    pub wmf_alpha: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            k: 10,
            eta: 0.05,
            lambda: 0.01,
            epochs: 100,
            seed: 0,
            method: Method::P3s2,
            wmf_alpha: 40.0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.wmf_alpha.is_finite() && self.wmf_alpha >= 0.0) {
            return Err(Error::Config(format!(
                "wmf_alpha must be non-negative, got {}",
                self.wmf_alpha
            )));
        }
        Ok(())
    }
}

/// User factors (n x k), item factors (m x k) and item biases (m), stored
/// row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    n: usize,
    m: usize,
    k: usize,
    pub user_factors: Vec<f64>,
    pub item_factors: Vec<f64>,
    pub item_bias: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(n: usize, m: usize, k: usize) -> Self {
        ModelParams {
            n,
            m,
            k,
            user_factors: vec![0.0; n * k],
            item_factors: vec![0.0; m * k],
            item_bias: vec![0.0; m],
        }
    }

    pub fn from_parts(
        n: usize,
        m: usize,
        k: usize,
        user_factors: Vec<f64>,
        item_factors: Vec<f64>,
        item_bias: Vec<f64>,
    ) -> Result<Self> {
        if user_factors.len() != n * k || item_factors.len() != m * k || item_bias.len() != m {
            return Err(Error::Config(format!(
                "parameter blocks do not match n={n}, m={m}, k={k}"
            )));
        }
        Ok(ModelParams {
            n,
            m,
            k,
            user_factors,
            item_factors,
            item_bias,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn user(&self, u: usize) -> &[f64] {
        &self.user_factors[u * self.k..(u + 1) * self.k]
    }

    pub fn user_mut(&mut self, u: usize) -> &mut [f64] {
        &mut self.user_factors[u * self.k..(u + 1) * self.k]
    }

    pub fn item(&self, i: usize) -> &[f64] {
        &self.item_factors[i * self.k..(i + 1) * self.k]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.item_factors[i * self.k..(i + 1) * self.k]
    }

    pub fn is_finite(&self) -> bool {
        self.user_factors
            .iter()
            .chain(&self.item_factors)
            .chain(&self.item_bias)
            .all(|v| v.is_finite())
    }

    /// Sum of squared entries of all three blocks.
    pub fn squared_norm(&self) -> f64 {
        self.user_factors
            .iter()
            .chain(&self.item_factors)
            .chain(&self.item_bias)
            .map(|v| v * v)
            .sum()
    }

    pub(crate) fn check_user(&self, u: usize) -> Result<()> {
        if u >= self.n {
            return Err(Error::IndexOutOfRange {
                what: "user",
                index: u,
                len: self.n,
            });
        }
        Ok(())
    }

    pub(crate) fn check_item(&self, i: usize) -> Result<()> {
        if i >= self.m {
            return Err(Error::IndexOutOfRange {
                what: "item",
                index: i,
                len: self.m,
            });
        }
        Ok(())
    }

    /// Score without bounds checks beyond slice indexing.
    #[inline]
    pub(crate) fn score_unchecked(&self, u: usize, i: usize) -> f64 {
        dot(self.user(u), self.item(i)) + self.item_bias[i]
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draws user and item factors i.i.d. from N(0, 0.1^2) with a generator
/// seeded by `hyper.seed`; biases start at zero.
pub fn init(n: usize, m: usize, hyper: &HyperParams) -> Result<ModelParams> {
    if n == 0 || m == 0 {
        return Err(Error::Config(format!("cannot initialize a model with n={n}, m={m}")));
    }
    if hyper.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut params = ModelParams::zeros(n, m, hyper.k);
    for v in params.user_factors.iter_mut().chain(params.item_factors.iter_mut()) {
        *v = normal.sample(&mut rng);
    }
    Ok(params)
}

pub fn score(params: &ModelParams, u: usize, i: usize) -> Result<f64> {
    params.check_user(u)?;
    params.check_item(i)?;
    Ok(params.score_unchecked(u, i))
}

/// Scores of user `u` against every item.
pub fn score_all(params: &ModelParams, u: usize) -> Result<Vec<f64>> {
    params.check_user(u)?;
    let user = params.user(u);
    Ok((0..params.m)
        .map(|i| dot(user, params.item(i)) + params.item_bias[i])
        .collect())
}

/// Logistic function, evaluated without overflow for any finite input.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))`, accurate in both tails.
#[inline]
pub fn ln_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
