//! Domain types shared by every estimator.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Prepends the intercept to a covariate vector.
pub fn design_row(x: &[f64]) -> Result<DVector<f64>> {
    if let Some(j) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "covariate vector",
            row: j,
        });
    }
    Ok(DVector::from_iterator(
        x.len() + 1,
        std::iter::once(1.0).chain(x.iter().copied()),
    ))
}

/// Builds the `n x (p+1)` design matrix (intercept first) from raw covariates.
pub(crate) fn design_matrix(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = x.shape();
    DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] })
}

fn check_matrix_finite(m: &DMatrix<f64>, context: &'static str) -> Result<()> {
    for i in 0..m.nrows() {
        if m.row(i).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context, row: i });
        }
    }
    Ok(())
}

fn check_probabilities(v: &[f64], context: &str, allow_one: bool) -> Result<()> {
    for (i, &p) in v.iter().enumerate() {
        let ok = p > 0.0 && (p < 1.0 || (allow_one && p == 1.0));
        if !ok || !p.is_finite() {
            return Err(invalid(format!(
                "{context}[{i}] = {p} is not a probability in (0,{}",
                if allow_one { "1]" } else { "1)" }
            )));
        }
    }
    Ok(())
}

/// Propensity estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MethodKind {
    Clw,
    Ilr,
    Pilr,
    Alp,
}

impl MethodKind {
    /// The one-step estimators studied in the simulation tables.
    pub const ONE_STEP: [MethodKind; 3] = [MethodKind::Ilr, MethodKind::Pilr, MethodKind::Clw];
    pub const ALL: [MethodKind; 4] = [MethodKind::Clw, MethodKind::Ilr, MethodKind::Pilr, MethodKind::Alp];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::Clw => "CLW",
            MethodKind::Ilr => "ILR",
            MethodKind::Pilr => "PILR",
            MethodKind::Alp => "ALP",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "clw" => Ok(MethodKind::Clw),
            "ilr" => Ok(MethodKind::Ilr),
            "pilr" => Ok(MethodKind::Pilr),
            "alp" => Ok(MethodKind::Alp),
            other => Err(invalid(format!("unknown method `{other}`"))),
        }
    }
}

/// Simulation ground truth: covariates, outcomes and the true selection
/// probabilities of every population unit.
#[derive(Debug, Clone)]
pub struct FinitePopulation {
    x: DMatrix<f64>,
    y: DVector<f64>,
    pi_c_true: DVector<f64>,
    size_r: DVector<f64>,
    pi_r_true: DVector<f64>,
}

impl FinitePopulation {
    pub fn new(
        x: DMatrix<f64>,
        y: DVector<f64>,
        pi_c_true: DVector<f64>,
        size_r: DVector<f64>,
        pi_r_true: DVector<f64>,
    ) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(invalid("population is empty"));
        }
        for (name, len) in [
            ("y", y.len()),
            ("pi_c_true", pi_c_true.len()),
            ("size_r", size_r.len()),
            ("pi_r_true", pi_r_true.len()),
        ] {
            if len != n {
                return Err(invalid(format!("{name} has length {len}, expected {n}")));
            }
        }
        check_matrix_finite(&x, "population covariates")?;
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "population outcomes",
                row: i,
            });
        }
        check_probabilities(pi_c_true.as_slice(), "pi_c_true", false)?;
        check_probabilities(pi_r_true.as_slice(), "pi_r_true", true)?;
        if let Some(i) = size_r.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(invalid(format!("size_r[{i}] must be positive")));
        }
        Ok(Self {
            x,
            y,
            pi_c_true,
            size_r,
            pi_r_true,
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn pi_c_true(&self) -> &DVector<f64> {
        &self.pi_c_true
    }

    pub fn size_r(&self) -> &DVector<f64> {
        &self.size_r
    }

    pub fn pi_r_true(&self) -> &DVector<f64> {
        &self.pi_r_true
    }

    /// Finite-population mean of the outcome.
    pub fn mean_y(&self) -> f64 {
        self.y.mean()
    }

    /// Design matrix with the intercept column prepended.
    pub fn design(&self) -> DMatrix<f64> {
        design_matrix(&self.x)
    }

    /// Same population with the participation probabilities replaced.
    pub fn with_pi_c(&self, pi_c: DVector<f64>) -> Result<Self> {
        Self::new(
            self.x.clone(),
            self.y.clone(),
            pi_c,
            self.size_r.clone(),
            self.pi_r_true.clone(),
        )
    }

    /// Same population with the reference inclusion probabilities replaced.
    pub fn with_pi_r(&self, pi_r: DVector<f64>) -> Result<Self> {
        Self::new(
            self.x.clone(),
            self.y.clone(),
            self.pi_c_true.clone(),
            self.size_r.clone(),
            pi_r,
        )
    }

    /// Recalibrates the reference inclusion probabilities from the size
    /// measures so that their sum equals `round(f_r * N)`.
    pub fn with_reference_fraction(&self, f_r: f64) -> Result<Self> {
        if !(f_r > 0.0 && f_r <= 1.0) {
            return Err(invalid(format!("reference fraction {f_r} outside (0,1]")));
        }
        let n = (f_r * self.len() as f64).round().max(1.0);
        let pi = crate::designs::calibrate_inclusion_probs(self.size_r.as_slice(), n)?;
        self.with_pi_r(DVector::from_vec(pi))
    }
}

/// The stacked convenience and reference samples: the only input estimation sees.
#[derive(Debug, Clone)]
pub struct ObservedData {
    conv_x: DMatrix<f64>,
    conv_y: DVector<f64>,
    conv_pi_r: Option<DVector<f64>>,
    ref_x: DMatrix<f64>,
    ref_pi_r: DVector<f64>,
    ref_w: DVector<f64>,
    conv_design: DMatrix<f64>,
    ref_design: DMatrix<f64>,
}

impl ObservedData {
    pub fn new(
        conv_x: DMatrix<f64>,
        conv_y: DVector<f64>,
        conv_pi_r: Option<DVector<f64>>,
        ref_x: DMatrix<f64>,
        ref_pi_r: DVector<f64>,
    ) -> Result<Self> {
        let n_c = conv_x.nrows();
        let n_r = ref_x.nrows();
        if n_c == 0 {
            return Err(invalid("convenience sample is empty"));
        }
        if n_r == 0 {
            return Err(invalid("reference sample is empty"));
        }
        if conv_x.ncols() != ref_x.ncols() {
            return Err(invalid(format!(
                "convenience sample has {} covariates, reference sample has {}",
                conv_x.ncols(),
                ref_x.ncols()
            )));
        }
        if conv_y.len() != n_c {
            return Err(invalid("conv_y length differs from conv_x rows"));
        }
        if ref_pi_r.len() != n_r {
            return Err(invalid("ref_pi_r length differs from ref_x rows"));
        }
        check_matrix_finite(&conv_x, "convenience covariates")?;
        check_matrix_finite(&ref_x, "reference covariates")?;
        if let Some(i) = conv_y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "convenience outcomes",
                row: i,
            });
        }
        check_probabilities(ref_pi_r.as_slice(), "ref_pi_r", true)?;
        if let Some(p) = &conv_pi_r {
            if p.len() != n_c {
                return Err(invalid("conv_pi_r length differs from conv_x rows"));
            }
            check_probabilities(p.as_slice(), "conv_pi_r", true)?;
        }
        let ref_w = ref_pi_r.map(|p| 1.0 / p);
        let conv_design = design_matrix(&conv_x);
        let ref_design = design_matrix(&ref_x);
        Ok(Self {
            conv_x,
            conv_y,
            conv_pi_r,
            ref_x,
            ref_pi_r,
            ref_w,
            conv_design,
            ref_design,
        })
    }

    /// Extracts the samples `conv_idx` and `ref_idx` from a simulated population.
    /// Reference-design probabilities are attached to the convenience units too.
    pub fn from_population(
        pop: &FinitePopulation,
        conv_idx: &[usize],
        ref_idx: &[usize],
    ) -> Result<Self> {
        let pick_rows = |idx: &[usize]| pop.x.select_rows(idx.iter());
        let pick = |v: &DVector<f64>, idx: &[usize]| DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]));
        if let Some(&bad) = conv_idx.iter().chain(ref_idx).find(|&&i| i >= pop.len()) {
            return Err(invalid(format!("unit index {bad} outside population of {}", pop.len())));
        }
        Self::new(
            pick_rows(conv_idx),
            pick(&pop.y, conv_idx),
            Some(pick(&pop.pi_r_true, conv_idx)),
            pick_rows(ref_idx),
            pick(&pop.pi_r_true, ref_idx),
        )
    }

    pub fn n_conv(&self) -> usize {
        self.conv_x.nrows()
    }

    pub fn n_ref(&self) -> usize {
        self.ref_x.nrows()
    }

    pub fn n_covariates(&self) -> usize {
        self.conv_x.ncols()
    }

    /// Number of coefficients including the intercept.
    pub fn n_params(&self) -> usize {
        self.conv_x.ncols() + 1
    }

    pub fn conv_x(&self) -> &DMatrix<f64> {
        &self.conv_x
    }

    pub fn conv_y(&self) -> &DVector<f64> {
        &self.conv_y
    }

    pub fn conv_pi_r(&self) -> Option<&DVector<f64>> {
        self.conv_pi_r.as_ref()
    }

    pub fn ref_x(&self) -> &DMatrix<f64> {
        &self.ref_x
    }

    pub fn ref_pi_r(&self) -> &DVector<f64> {
        &self.ref_pi_r
    }

    pub fn ref_w(&self) -> &DVector<f64> {
        &self.ref_w
    }

    pub fn conv_design(&self) -> &DMatrix<f64> {
        &self.conv_design
    }

    pub fn ref_design(&self) -> &DMatrix<f64> {
        &self.ref_design
    }

    /// Fails unless the data carries everything `method` needs.
    pub fn check_method(&self, method: MethodKind) -> Result<()> {
        if method == MethodKind::Ilr && self.conv_pi_r.is_none() {
            return Err(Error::MissingField {
                method,
                field: "conv_pi_r",
            });
        }
        Ok(())
    }
}

/// Propensity-model coefficients, intercept first.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityParams(pub DVector<f64>);

impl PropensityParams {
    pub fn zeros(n: usize) -> Self {
        Self(DVector::zeros(n))
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.iter().any(|b| !b.is_finite()) {
            return Err(invalid("coefficients must be finite"));
        }
        Ok(Self(DVector::from_column_slice(v)))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|b| b.is_finite())
    }
}

/// Per-iteration solver diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterateSummary {
    pub loglik: f64,
    pub score_norm: f64,
    pub beta_norm: f64,
}

/// A fitted participation-probability model.
#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub method: MethodKind,
    /// For ALP these are the coefficients of the `pi_delta` logistic model.
    pub beta_hat: PropensityParams,
    /// Estimated participation probabilities of the convenience units. Only
    /// ALP can produce values at or above 1.
    pub pi_c_hat_conv: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Max-abs score divided by the number of stacked rows.
    pub score_norm: f64,
    pub loglik: f64,
    pub info_matrix: DMatrix<f64>,
    /// Number of iterations that needed extra diagonal damping.
    pub damped_steps: usize,
    /// ALP only: convenience rows whose inverted `pi_c` exceeds 1.
    pub n_pi_c_above_one: usize,
    /// ALP only: rows whose `pi_delta` hit the probability clamp.
    pub n_delta_saturated: usize,
    pub trace: Vec<IterateSummary>,
}

impl PropensityFit {
    /// Predicted participation probability for a raw covariate row.
    pub fn predict_pi_c(&self, x: &[f64]) -> Result<f64> {
        let row = design_row(x)?;
        if row.len() != self.beta_hat.len() {
            return Err(invalid("covariate length does not match the fitted model"));
        }
        let eta = row.dot(&self.beta_hat.0);
        Ok(match self.method {
            MethodKind::Alp => crate::propensity::links::alp_pi_c_from_eta(eta),
            _ => crate::propensity::links::LinkEval::new(eta, 1.0).pi_c,
        })
    }
}
