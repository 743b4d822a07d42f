//! Row-wise log-likelihood contributions for every estimator.
//!
//! Each estimator is a sum over the stacked sample of terms that depend on the
//! row's linear predictor only, so one evaluation loop serves all of them.

use nalgebra::{DMatrix, DVector};

use super::links::{clamp_eta, LinkEval};
use crate::error::{invalid, Error, Result};
use crate::linalg::{add_outer, symmetrize};
use crate::model::{MethodKind, ObservedData};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Kind {
    /// Reference-weighted pseudo-likelihood over the population.
    Clw,
    /// Composite link `pi_c / (pi_c + q)`: `q = pi_r` (ILR) or `q = 1` with
    /// reference weights (PILR).
    Ilr,
    Pilr,
    /// Weighted logistic regression for `pi_delta` (first step of ALP).
    Logistic,
}

impl Kind {
    pub(crate) fn of(method: MethodKind) -> Self {
        match method {
            MethodKind::Clw => Kind::Clw,
            MethodKind::Ilr => Kind::Ilr,
            MethodKind::Pilr => Kind::Pilr,
            MethodKind::Alp => Kind::Logistic,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Terms {
    ll: f64,
    /// d ll / d eta
    s: f64,
    /// expected -d2 ll / d eta2
    e: f64,
    /// observed -d2 ll / d eta2
    o: f64,
}

fn terms(kind: Kind, conv: bool, eta: f64, q: f64, v: f64) -> Terms {
    match kind {
        Kind::Clw => {
            if conv {
                // log(pi_c) - log(1 - pi_c) is the linear predictor itself
                Terms { ll: clamp_eta(eta), s: 1.0, e: 0.0, o: 0.0 }
            } else {
                let l = LinkEval::new(eta, 1.0);
                let h = v * l.pi_c * l.one_minus_pi_c;
                Terms { ll: v * l.one_minus_pi_c.ln(), s: -v * l.pi_c, e: h, o: h }
            }
        }
        Kind::Ilr | Kind::Pilr => {
            let l = LinkEval::new(eta, q);
            let (pc, qc) = (l.pi_c, l.one_minus_pi_c);
            let (pz, qz) = (l.pi_z_or_delta, l.one_minus_pi_z);
            let e = v * pz * qz * qc * qc;
            if conv {
                Terms { ll: v * pz.ln(), s: v * qz * qc, e, o: e + v * qz * pc * qc }
            } else {
                Terms { ll: v * qz.ln(), s: -v * pz * qc, e, o: e - v * pz * pc * qc }
            }
        }
        Kind::Logistic => {
            let l = LinkEval::new(eta, 1.0);
            let h = v * l.pi_c * l.one_minus_pi_c;
            if conv {
                Terms { ll: v * l.pi_c.ln(), s: v * l.one_minus_pi_c, e: h, o: h }
            } else {
                Terms { ll: v * l.one_minus_pi_c.ln(), s: -v * l.pi_c, e: h, o: h }
            }
        }
    }
}

/// What an evaluation should compute beyond the log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Want {
    Loglik,
    Score,
    Expected,
    Observed,
}

#[derive(Debug, Clone)]
pub(crate) struct Eval {
    pub loglik: f64,
    pub score: DVector<f64>,
    pub info: DMatrix<f64>,
}

/// An estimator bound to a dataset.
pub(crate) struct Problem<'a> {
    kind: Kind,
    data: &'a ObservedData,
}

impl<'a> Problem<'a> {
    pub(crate) fn new(method: MethodKind, data: &'a ObservedData) -> Result<Self> {
        data.check_method(method)?;
        Ok(Self { kind: Kind::of(method), data })
    }

    pub(crate) fn n_rows(&self) -> usize {
        self.data.n_conv() + self.data.n_ref()
    }

    pub(crate) fn n_params(&self) -> usize {
        self.data.n_params()
    }

    fn conv_q(&self, i: usize) -> f64 {
        match self.kind {
            Kind::Ilr => self.data.conv_pi_r().expect("checked at construction")[i],
            _ => 1.0,
        }
    }

    fn ref_q(&self, i: usize) -> f64 {
        match self.kind {
            Kind::Ilr => self.data.ref_pi_r()[i],
            _ => 1.0,
        }
    }

    fn ref_v(&self, i: usize) -> f64 {
        match self.kind {
            Kind::Ilr => 1.0,
            _ => self.data.ref_w()[i],
        }
    }

    pub(crate) fn eval(&self, beta: &DVector<f64>, want: Want) -> Result<Eval> {
        let k = self.n_params();
        if beta.len() != k {
            return Err(invalid(format!(
                "coefficient vector has length {}, model needs {k}",
                beta.len()
            )));
        }
        let mut out = Eval {
            loglik: 0.0,
            score: DVector::zeros(if want == Want::Loglik { 0 } else { k }),
            info: DMatrix::zeros(
                if matches!(want, Want::Expected | Want::Observed) { k } else { 0 },
                k,
            ),
        };
        let mut row = vec![0.0; k];
        let n_c = self.data.n_conv();
        let blocks = [
            (true, self.data.conv_design()),
            (false, self.data.ref_design()),
        ];
        for (conv, design) in blocks {
            let eta = design * beta;
            for i in 0..design.nrows() {
                let (q, v) = if conv {
                    (self.conv_q(i), 1.0)
                } else {
                    (self.ref_q(i), self.ref_v(i))
                };
                let t = terms(self.kind, conv, eta[i], q, v);
                if !t.ll.is_finite() || !t.s.is_finite() {
                    return Err(Error::NonFinite {
                        context: "log-likelihood",
                        row: if conv { i } else { n_c + i },
                    });
                }
                out.loglik += t.ll;
                if want == Want::Loglik {
                    continue;
                }
                for j in 0..k {
                    row[j] = design[(i, j)];
                }
                for j in 0..k {
                    out.score[j] += t.s * row[j];
                }
                match want {
                    Want::Expected => add_outer(&mut out.info, &row, t.e),
                    Want::Observed => add_outer(&mut out.info, &row, t.o),
                    _ => {}
                }
            }
        }
        if out.info.nrows() > 0 {
            symmetrize(&mut out.info);
        }
        Ok(out)
    }
}
