use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::cholesky_lower;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelId {
    M1,
    M2,
    M3,
    M4,
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().trim_start_matches(['m', 'M']) {
            "1" => Ok(ModelId::M1),
            "2" => Ok(ModelId::M2),
            "3" => Ok(ModelId::M3),
            "4" => Ok(ModelId::M4),
            _ => Err(Error::config(format!("unknown model `{s}`; expected 1, 2, 3 or 4"))),
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self {
            ModelId::M1 => 1,
            ModelId::M2 => 2,
            ModelId::M3 => 3,
            ModelId::M4 => 4,
        };
        write!(f, "{k}")
    }
}

impl ModelId {
    /// Models 3 and 4 have a covariate-dependent zero pattern.
    pub fn has_varying_sparsity(&self) -> bool {
        matches!(self, ModelId::M3 | ModelId::M4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: ModelId,
    pub p: usize,
    pub d: usize,
    pub n: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.d == 0 || self.n == 0 {
            return Err(Error::config("p, d and n must be positive"));
        }
        if matches!(self.id, ModelId::M2 | ModelId::M4) && self.d < 2 {
            return Err(Error::config(format!("model {} needs d >= 2", self.id)));
        }
        if self.id.has_varying_sparsity() && self.p < 3 {
            return Err(Error::config(format!("model {} needs p >= 3", self.id)));
        }
        Ok(())
    }
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// exp{−(x−c)²/(r²−(x−c)²)} inside |x−c| < r, zero outside.
fn bump(x: f64, c: f64, r: f64) -> f64 {
    let t = (x - c) * (x - c);
    if t >= r * r {
        0.0
    } else {
        (-t / (r * r - t)).exp()
    }
}

fn in_range(x: f64, lo: f64) -> bool {
    (lo..=1.0).contains(&x)
}

/// Band coefficients (first, second off-diagonal) of the varying-sparsity
/// models, before the exp(2a) scale.
fn band(a: f64, b: f64) -> (f64, f64) {
    let first = if in_range(a, -0.5) && in_range(b, -0.5) {
        0.5 * bump(a, 0.25, 0.75)
    } else {
        0.0
    };
    let second = if in_range(a, 0.3) && in_range(b, 0.3) {
        0.4 * bump(a, 0.65, 0.35)
    } else {
        0.0
    };
    (first, second)
}

fn zeta(p: usize, a: f64, b: f64) -> DMatrix<f64> {
    let (first, second) = band(a, b);
    let scale = (2.0 * a).exp();
    DMatrix::from_fn(p, p, |j, r| {
        scale
            * match j.abs_diff(r) {
                0 => 1.0,
                1 => first,
                2 => second,
                _ => 0.0,
            }
    })
}

fn scaled_ar1(p: usize, scale: f64, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |j, r| scale * rho.powi(j.abs_diff(r) as i32))
}

/// Σ(u) of the model.
pub fn true_cov(model: &ModelSpec, u: &[f64]) -> Result<DMatrix<f64>> {
    model.validate()?;
    if u.len() != model.d {
        return Err(Error::DimensionMismatch {
            expected: model.d,
            actual: u.len(),
        });
    }
    let p = model.p;
    Ok(match model.id {
        ModelId::M1 => scaled_ar1(p, u[0].exp(), normal_pdf(u[0])),
        ModelId::M2 => scaled_ar1(p, (u[0] + u[1]).exp(), normal_pdf(0.5 * (u[0] + u[1]))),
        ModelId::M3 => {
            // Model 3 ignores u₂ in its indicators.
            zeta(p, u[0], 1.0)
        }
        ModelId::M4 => (zeta(p, u[0], u[1]) + zeta(p, u[1], u[0])) * 0.5,
    })
}

/// n iid pairs with U uniform on [−1, 1]^d and Y ~ N(0, Σ(U)). Each sample
/// draws its d covariates and then its p normals.
pub fn sample_dataset(model: &ModelSpec, rng: &mut Rng) -> Result<Dataset> {
    model.validate()?;
    let (n, p, d) = (model.n, model.p, model.d);
    let mut u = DMatrix::zeros(n, d);
    let mut y = DMatrix::zeros(n, p);
    for i in 0..n {
        let ui: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let l = cholesky_lower(&true_cov(model, &ui)?)?;
        let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let yi = l * z;
        u.row_mut(i).copy_from_slice(&ui);
        y.row_mut(i).copy_from(&yi.transpose());
    }
    Dataset::new(y, u)
}

const FIXTURE: &str = include_str!("../../fixtures/test_points.csv");
const FIXTURE_SEED: u64 = 20_240_601;
const FIXTURE_COUNT: usize = 30;
const FIXTURE_DIM: usize = 20;

/// `count` points uniform on [−1, 1]^d from substream `("test-points", 0)`,
/// drawn row by row.
pub fn draw_test_points(count: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::substream(seed, "test-points", 0);
    (0..count)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect()
}

/// The checked-in 30 × 20 test-point table.
pub fn fixture_test_points() -> Vec<Vec<f64>> {
    FIXTURE
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| l.split(',').map(|c| c.trim().parse().expect("fixture is numeric")).collect())
        .collect()
}

/// The 30 frozen test points in dimension d: the first d fixture columns, or
/// a fresh draw from the fixture seed when d exceeds the fixture width.
pub fn test_points(d: usize) -> Vec<Vec<f64>> {
    if d <= FIXTURE_DIM {
        fixture_test_points().into_iter().map(|row| row[..d].to_vec()).collect()
    } else {
        draw_test_points(FIXTURE_COUNT, d, FIXTURE_SEED)
    }
}
