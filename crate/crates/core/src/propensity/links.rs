//! Link functions relating the latent participation probability to the
//! membership probabilities that are actually observable.

/// Linear predictors are clamped to `[-ETA_MAX, ETA_MAX]` before exponentiation.
pub const ETA_MAX: f64 = 35.0;
/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` at link evaluation.
pub const PROB_EPS: f64 = 1e-12;

#[inline]
pub fn clamp_eta(eta: f64) -> f64 {
    eta.clamp(-ETA_MAX, ETA_MAX)
}

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Logistic function, evaluated without overflow for either sign.
#[inline]
pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Stacked-sample membership probability `pi_c / (pi_c + pi_r)`.
pub fn crisp(pi_c: f64, pi_r: f64) -> f64 {
    pi_c / (pi_c + pi_r)
}

/// Membership probability when each sample only covers part of the population:
/// `pi_c p_c / (pi_c p_c + pi_r p_r)`.
pub fn crisp_with_coverage(pi_c: f64, p_c: f64, pi_r: f64, p_r: f64) -> f64 {
    let c = pi_c * p_c;
    c / (c + pi_r * p_r)
}

/// Membership probability in the union sample when overlapping units are
/// kept as reference records: `pi_c / (pi_c + pi_r - pi_c pi_r)`.
pub fn crisp_union_keep_reference(pi_c: f64, pi_r: f64) -> f64 {
    pi_c / (pi_c + pi_r - pi_c * pi_r)
}

/// Membership probability in the union sample when overlapping units are
/// kept as convenience records: `pi_c (1 - pi_r) / (pi_c + pi_r - pi_c pi_r)`.
pub fn crisp_union_keep_convenience(pi_c: f64, pi_r: f64) -> f64 {
    pi_c * (1.0 - pi_r) / (pi_c + pi_r - pi_c * pi_r)
}

/// `pi_delta = pi_c / (1 + pi_c)`: membership in the sample-plus-population stack.
pub fn delta_link(pi_c: f64) -> f64 {
    pi_c / (1.0 + pi_c)
}

/// Inverse of [`delta_link`]. The result exceeds 1 whenever `pi_delta > 0.5`.
pub fn alp_invert(pi_delta: f64) -> f64 {
    pi_delta / (1.0 - pi_delta)
}

/// Participation probability implied by a logistic `pi_delta` model at linear
/// predictor `eta`. Not clamped above: values above 1 are the point.
pub fn alp_pi_c_from_eta(eta: f64) -> f64 {
    alp_invert(clamp_prob(expit(clamp_eta(eta))))
}

/// Link quantities at one linear predictor, for a composite link
/// `pi_c / (pi_c + q)`. `q = pi_r` gives the stacked-sample link and `q = 1`
/// the `pi_delta` link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkEval {
    pub pi_c: f64,
    /// `1 - pi_c`, computed directly to keep precision near one.
    pub one_minus_pi_c: f64,
    pub pi_z_or_delta: f64,
    pub one_minus_pi_z: f64,
    pub d_pi_c_d_eta: f64,
}

impl LinkEval {
    pub fn new(eta: f64, q: f64) -> Self {
        let eta = clamp_eta(eta);
        let pi_c = clamp_prob(expit(eta));
        let one_minus_pi_c = clamp_prob(expit(-eta));
        let denom = pi_c + q;
        Self {
            pi_c,
            one_minus_pi_c,
            pi_z_or_delta: clamp_prob(pi_c / denom),
            one_minus_pi_z: clamp_prob(q / denom),
            d_pi_c_d_eta: pi_c * one_minus_pi_c,
        }
    }
}
