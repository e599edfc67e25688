//! Protocol rounds: coherent-state preparation, entangling-cloner
//! channels, relay Bell detection, conditional displacements and ADC.
//!
//! A protocol round produces the primed variables `(q'_A, p'_A, q'_B,
//! p'_B)` (the modulation data), the announced relay outcome
//! `Z = (q_Z, p_Z)`, and after post-processing the displaced raw keys
//! `X = (q_A, p_A)`, `Y = (q_B, p_B)` and their discretized images.
//!
//! Sign conventions, fixed here once and used everywhere:
//!
//! * the relay announces `q_Z = (q_B^rel - q_A^rel)/sqrt(2)` and
//!   `p_Z = (p_A^rel + p_B^rel)/sqrt(2)`, which makes
//!   `<q'_A q_Z>` negative and `<p'_A p_Z>` positive for the
//!   entangling-cloner channel;
//! * after displacement Bob's `p` is conjugated (`p_B -> -p_B`), the
//!   usual alignment step of the MDI key map. It turns the
//!   anti-correlated `p` residuals into correlated ones, so the raw-key
//!   covariance matrix takes the form `[[x I, z I], [z I, y I]]` with a
//!   single scalar `z > 0`.
//!
//! Sampling is deterministic and chunked: round `j` lives in chunk
//! `j / CHUNK_ROUNDS`, and each chunk draws from its own counter-based
//! RNG stream. Results are therefore bit-identical no matter how many
//! threads consume the chunks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};

/// Rounds per RNG chunk. Each chunk is an independent ChaCha stream, so
/// chunks can be generated in any order (or in parallel) with identical
/// results.
pub const CHUNK_ROUNDS: u64 = 1 << 16;

/// Largest block materialized in memory by [`sample_rounds`]. Larger
/// blocks must be processed chunk by chunk (see
/// [`crate::estimation::moments_from_simulation`]).
pub const MAX_IN_MEMORY_ROUNDS: u64 = 1 << 24;

/// Default ADC clipping range in units of the column standard deviation.
/// At 6.5 sigma the per-sample clipping probability is below 1e-10.
pub const DEFAULT_CLIP_SIGMA: f64 = 6.5;

/// Protocol and attack description: modulation variances, link
/// transmissivities, injected thermal noises, block size, ADC depth and
/// reconciliation efficiency. All variances are in shot-noise units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioParams {
    /// Alice's modulation variance `V_M^A >= 0`.
    pub vmod_a: f64,
    /// Bob's modulation variance `V_M^B >= 0`.
    pub vmod_b: f64,
    /// Transmissivity of the Alice-relay link, in `[0, 1]`.
    pub tau_a: f64,
    /// Transmissivity of the Bob-relay link, in `[0, 1]`.
    pub tau_b: f64,
    /// Variance of the thermal mode Eve injects on Alice's link (`>= 1`).
    pub omega_a: f64,
    /// Variance of the thermal mode Eve injects on Bob's link (`>= 1`).
    pub omega_b: f64,
    /// Block size (number of protocol rounds).
    pub n: u64,
    /// ADC depth: bits per quadrature, so the discretized pair has
    /// cardinality `2^(2d)`.
    pub d: u32,
    /// Reconciliation efficiency `beta` in `(0, 1]`.
    pub beta: f64,
}

impl ScenarioParams {
    /// Validates every field; all other constructors and the sampling
    /// entry points call this.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("vmod_a", self.vmod_a), ("vmod_b", self.vmod_b)] {
            if !v.is_finite() || v < 0.0 {
                return Err(CoreError::Domain(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        for (name, v) in [("tau_a", self.tau_a), ("tau_b", self.tau_b)] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(CoreError::Domain(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        for (name, v) in [("omega_a", self.omega_a), ("omega_b", self.omega_b)] {
            if !v.is_finite() || v < 1.0 {
                return Err(CoreError::Domain(format!(
                    "{name} must be a thermal variance >= 1, got {v}"
                )));
            }
        }
        if self.n == 0 {
            return Err(CoreError::Domain("block size n must be >= 1".into()));
        }
        if self.d == 0 || self.d > 15 {
            return Err(CoreError::Domain(format!(
                "ADC depth d must lie in 1..=15, got {}",
                self.d
            )));
        }
        if !self.beta.is_finite() || !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(CoreError::Domain(format!(
                "reconciliation efficiency must lie in (0, 1], got {}",
                self.beta
            )));
        }
        Ok(())
    }

    /// Builds a scenario from excess noises `xi = (1 - tau)(omega - 1)`
    /// instead of thermal variances. A lossless link (`tau = 1`) cannot
    /// carry excess noise.
    #[allow(clippy::too_many_arguments)]
    pub fn from_excess_noise(
        vmod_a: f64,
        vmod_b: f64,
        tau_a: f64,
        tau_b: f64,
        xi_a: f64,
        xi_b: f64,
        n: u64,
        d: u32,
        beta: f64,
    ) -> Result<Self> {
        let omega_of = |tau: f64, xi: f64, link: &str| -> Result<f64> {
            if !xi.is_finite() || xi < 0.0 {
                return Err(CoreError::Domain(format!(
                    "excess noise on link {link} must be nonnegative, got {xi}"
                )));
            }
            if xi == 0.0 {
                return Ok(1.0);
            }
            if tau >= 1.0 {
                return Err(CoreError::Domain(format!(
                    "link {link} is lossless (tau = {tau}) and cannot carry excess noise {xi}"
                )));
            }
            Ok(1.0 + xi / (1.0 - tau))
        };
        let params = Self {
            vmod_a,
            vmod_b,
            tau_a,
            tau_b,
            omega_a: omega_of(tau_a, xi_a, "A")?,
            omega_b: omega_of(tau_b, xi_b, "B")?,
            n,
            d,
            beta,
        };
        params.validate()?;
        Ok(params)
    }

    /// Excess noise on Alice's link, `xi_A = (1 - tau_A)(omega_A - 1)`.
    pub fn xi_a(&self) -> f64 {
        (1.0 - self.tau_a) * (self.omega_a - 1.0)
    }

    /// Excess noise on Bob's link, `xi_B = (1 - tau_B)(omega_B - 1)`.
    pub fn xi_b(&self) -> f64 {
        (1.0 - self.tau_b) * (self.omega_b - 1.0)
    }

    /// Variance of either Bell outcome quadrature,
    ///
    /// ```text
    /// nu = (tau_A V_M^A + tau_B V_M^B)/2 + 1 + (xi_A + xi_B)/2
    /// ```
    pub fn bell_variance(&self) -> f64 {
        0.5 * (self.tau_a * self.vmod_a + self.tau_b * self.vmod_b)
            + 1.0
            + 0.5 * (self.xi_a() + self.xi_b())
    }

    /// Closed-form second moments of `(q'_A, p'_A, q'_B, p'_B, q_Z, p_Z)`
    /// for the entangling-cloner attack.
    pub fn second_moments(&self) -> ScenarioSecondMoments {
        let nu = self.bell_variance();
        let ca = (self.tau_a / 2.0).sqrt() * self.vmod_a;
        let cb = (self.tau_b / 2.0).sqrt() * self.vmod_b;
        ScenarioSecondMoments {
            qa_sq: self.vmod_a,
            pa_sq: self.vmod_a,
            qb_sq: self.vmod_b,
            pb_sq: self.vmod_b,
            qz_sq: nu,
            pz_sq: nu,
            qz_pz: 0.0,
            qa_qz: -ca,
            qa_pz: 0.0,
            pa_qz: 0.0,
            pa_pz: ca,
            qb_qz: cb,
            qb_pz: 0.0,
            pb_qz: 0.0,
            pb_pz: cb,
        }
    }

    /// Optimal displacement coefficients for this scenario, from the
    /// closed-form moments.
    pub fn displacement_coeffs(&self) -> Result<DisplacementCoeffs> {
        DisplacementCoeffs::from_moments(&self.second_moments().z_block())
    }

    /// Closed-form covariance triple of the displaced raw keys:
    ///
    /// ```text
    /// x = V_M^A (1 - (tau_A/2) V_M^A / nu)
    /// y = V_M^B (1 - (tau_B/2) V_M^B / nu)
    /// z = sqrt(tau_A tau_B) V_M^A V_M^B / (2 nu)
    /// ```
    pub fn displaced_cm(&self) -> DisplacedCm {
        let nu = self.bell_variance();
        DisplacedCm {
            x: self.vmod_a * (1.0 - 0.5 * self.tau_a * self.vmod_a / nu),
            y: self.vmod_b * (1.0 - 0.5 * self.tau_b * self.vmod_b / nu),
            z: (self.tau_a * self.tau_b).sqrt() * self.vmod_a * self.vmod_b / (2.0 * nu),
        }
    }
}

/// Covariance triple `(x, y, z)` of the displaced raw keys, one scalar
/// per block of the canonical form `[[x I, z I], [z I, y I]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisplacedCm {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// Population second moments of `(q'_A, p'_A, q'_B, p'_B, q_Z, p_Z)`.
///
/// The two parties modulate independently, so primed cross moments
/// between A and B vanish identically and are not stored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioSecondMoments {
    pub qa_sq: f64,
    pub pa_sq: f64,
    pub qb_sq: f64,
    pub pb_sq: f64,
    pub qz_sq: f64,
    pub pz_sq: f64,
    pub qz_pz: f64,
    pub qa_qz: f64,
    pub qa_pz: f64,
    pub pa_qz: f64,
    pub pa_pz: f64,
    pub qb_qz: f64,
    pub qb_pz: f64,
    pub pb_qz: f64,
    pub pb_pz: f64,
}

impl ScenarioSecondMoments {
    /// The sub-block needed to solve for displacement coefficients.
    pub fn z_block(&self) -> ZBlockMoments {
        ZBlockMoments {
            qz_sq: self.qz_sq,
            pz_sq: self.pz_sq,
            qz_pz: self.qz_pz,
            qa_qz: self.qa_qz,
            qa_pz: self.qa_pz,
            pa_qz: self.pa_qz,
            pa_pz: self.pa_pz,
            qb_qz: self.qb_qz,
            qb_pz: self.qb_pz,
            pb_qz: self.pb_qz,
            pb_pz: self.pb_pz,
        }
    }

    /// Exact covariance triple of the displaced keys for *arbitrary*
    /// coefficients, by direct quadratic expansion of
    /// `star - u q_Z - v p_Z` (with Bob's `p` conjugated afterwards).
    ///
    /// With the optimal coefficients this reproduces
    /// [`ScenarioParams::displaced_cm`]; with suboptimal ones it serves
    /// as the ground truth for estimator calibration.
    pub fn displaced_cm(&self, c: &DisplacementCoeffs) -> DisplacedCm {
        let var = |s_sq: f64, s_qz: f64, s_pz: f64, u: f64, v: f64| {
            s_sq - 2.0 * u * s_qz - 2.0 * v * s_pz
                + u * u * self.qz_sq
                + v * v * self.pz_sq
                + 2.0 * u * v * self.qz_pz
        };
        // Cov(star_A - u_A Z, star_B - u_B Z); primed-primed cross is zero.
        let cov = |a_qz: f64, a_pz: f64, ua: f64, va: f64, b_qz: f64, b_pz: f64, ub: f64, vb: f64| {
            -ub * a_qz - vb * a_pz - ua * b_qz - va * b_pz
                + ua * ub * self.qz_sq
                + va * vb * self.pz_sq
                + (ua * vb + va * ub) * self.qz_pz
        };
        let x_q = var(self.qa_sq, self.qa_qz, self.qa_pz, c.u_qa, c.v_qa);
        let x_p = var(self.pa_sq, self.pa_qz, self.pa_pz, c.u_pa, c.v_pa);
        let y_q = var(self.qb_sq, self.qb_qz, self.qb_pz, c.u_qb, c.v_qb);
        let y_p = var(self.pb_sq, self.pb_qz, self.pb_pz, c.u_pb, c.v_pb);
        let z_q = cov(
            self.qa_qz, self.qa_pz, c.u_qa, c.v_qa, self.qb_qz, self.qb_pz, c.u_qb, c.v_qb,
        );
        // Bob's p is conjugated in the key map, flipping this covariance.
        let z_p = -cov(
            self.pa_qz, self.pa_pz, c.u_pa, c.v_pa, self.pb_qz, self.pb_pz, c.u_pb, c.v_pb,
        );
        DisplacedCm {
            x: 0.5 * (x_q + x_p),
            y: 0.5 * (y_q + y_p),
            z: 0.5 * (z_q + z_p),
        }
    }
}

/// Second moments of the relay outcome and its covariances with the
/// primed variables — the inputs of the displacement solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZBlockMoments {
    pub qz_sq: f64,
    pub pz_sq: f64,
    pub qz_pz: f64,
    pub qa_qz: f64,
    pub qa_pz: f64,
    pub pa_qz: f64,
    pub pa_pz: f64,
    pub qb_qz: f64,
    pub qb_pz: f64,
    pub pb_qz: f64,
    pub pb_pz: f64,
}

/// Optimal affine displacement coefficients `g_star = u_star q_Z +
/// v_star p_Z` for each `star` in `{q'_A, p'_A, q'_B, p'_B}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisplacementCoeffs {
    pub u_qa: f64,
    pub v_qa: f64,
    pub u_pa: f64,
    pub v_pa: f64,
    pub u_qb: f64,
    pub v_qb: f64,
    pub u_pb: f64,
    pub v_pb: f64,
}

impl DisplacementCoeffs {
    /// Solves the two-regressor least squares for every primed variable:
    ///
    /// ```text
    /// u = (<star qz> <pz^2> - <star pz> <qz pz>) / det
    /// v = (<star pz> <qz^2> - <star qz> <qz pz>) / det
    /// det = <qz^2> <pz^2> - <qz pz>^2
    /// ```
    pub fn from_moments(m: &ZBlockMoments) -> Result<Self> {
        let det = m.qz_sq * m.pz_sq - m.qz_pz * m.qz_pz;
        let scale = (m.qz_sq * m.pz_sq).abs().max(m.qz_pz * m.qz_pz);
        if !(det > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
            return Err(CoreError::SingularMoments(format!(
                "relay-outcome covariance is numerically singular (det = {det})"
            )));
        }
        let solve = |s_qz: f64, s_pz: f64| {
            (
                (s_qz * m.pz_sq - s_pz * m.qz_pz) / det,
                (s_pz * m.qz_sq - s_qz * m.qz_pz) / det,
            )
        };
        let (u_qa, v_qa) = solve(m.qa_qz, m.qa_pz);
        let (u_pa, v_pa) = solve(m.pa_qz, m.pa_pz);
        let (u_qb, v_qb) = solve(m.qb_qz, m.qb_pz);
        let (u_pb, v_pb) = solve(m.pb_qz, m.pb_pz);
        let out = Self {
            u_qa,
            v_qa,
            u_pa,
            v_pa,
            u_qb,
            v_qb,
            u_pb,
            v_pb,
        };
        if !out.as_array().iter().all(|c| c.is_finite()) {
            return Err(CoreError::SingularMoments(
                "displacement solve produced non-finite coefficients".into(),
            ));
        }
        Ok(out)
    }

    pub fn as_array(&self) -> [f64; 8] {
        [
            self.u_qa, self.v_qa, self.u_pa, self.v_pa, self.u_qb, self.v_qb, self.u_pb,
            self.v_pb,
        ]
    }

    /// The weights expressing the raw-key correlation `z` through the
    /// locally computable relay moments:
    ///
    /// ```text
    /// w1 = (u_{q'_A} u_{q'_B} + u_{p'_A} u_{p'_B}) / 2
    /// w2 = (v_{q'_A} v_{q'_B} + v_{p'_A} v_{p'_B}) / 2
    /// w3 = (u_{q'_A} v_{q'_B} + v_{q'_A} u_{q'_B}
    ///       + u_{p'_A} v_{p'_B} + v_{p'_A} u_{p'_B}) / 2
    /// ```
    ///
    /// evaluated on the *key-map* coefficient set, in which Bob's `p`
    /// coefficients carry the conjugation sign. For the entangling
    /// cloner this gives `w1 = w2 = -sqrt(tau_A tau_B) V_M^2 / (4 nu^2)`
    /// and `w3 = 0`.
    pub fn w_coefficients(&self) -> (f64, f64, f64) {
        // Conjugating p_B flips the sign of its displacement coefficients.
        let (u_pb, v_pb) = (-self.u_pb, -self.v_pb);
        let w1 = 0.5 * (self.u_qa * self.u_qb + self.u_pa * u_pb);
        let w2 = 0.5 * (self.v_qa * self.v_qb + self.v_pa * v_pb);
        let w3 = 0.5
            * (self.u_qa * self.v_qb
                + self.v_qa * self.u_qb
                + self.u_pa * v_pb
                + self.v_pa * u_pb);
        (w1, w2, w3)
    }
}

/// Columnar record of simulated rounds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoundBatch {
    qa_prime: Vec<f64>,
    pa_prime: Vec<f64>,
    qb_prime: Vec<f64>,
    pb_prime: Vec<f64>,
    qz: Vec<f64>,
    pz: Vec<f64>,
    displaced: Option<DisplacedColumns>,
    digitized: Option<DigitizedColumns>,
}

/// Displaced raw keys `X = (q_A, p_A)`, `Y = (q_B, p_B)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacedColumns {
    pub qa: Vec<f64>,
    pub pa: Vec<f64>,
    pub qb: Vec<f64>,
    pub pb: Vec<f64>,
}

/// Discretized symbols with cardinality `2^(2d)` each.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitizedColumns {
    pub xbar: Vec<u32>,
    pub ybar: Vec<u32>,
    pub d: u32,
}

impl RoundBatch {
    /// Builds a batch from the six primed/relay columns, which must all
    /// have the same nonzero length.
    pub fn from_columns(
        qa_prime: Vec<f64>,
        pa_prime: Vec<f64>,
        qb_prime: Vec<f64>,
        pb_prime: Vec<f64>,
        qz: Vec<f64>,
        pz: Vec<f64>,
    ) -> Result<Self> {
        let n = qa_prime.len();
        if n == 0 {
            return Err(CoreError::DegenerateInput("empty round batch".into()));
        }
        for (name, col) in [
            ("pa_prime", &pa_prime),
            ("qb_prime", &qb_prime),
            ("pb_prime", &pb_prime),
            ("qz", &qz),
            ("pz", &pz),
        ] {
            if col.len() != n {
                return Err(CoreError::Usage(format!(
                    "column {name} has length {} but qa_prime has {n}",
                    col.len()
                )));
            }
        }
        Ok(Self {
            qa_prime,
            pa_prime,
            qb_prime,
            pb_prime,
            qz,
            pz,
            displaced: None,
            digitized: None,
        })
    }

    pub fn len(&self) -> usize {
        self.qa_prime.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qa_prime.is_empty()
    }

    pub fn qa_prime(&self) -> &[f64] {
        &self.qa_prime
    }

    pub fn pa_prime(&self) -> &[f64] {
        &self.pa_prime
    }

    pub fn qb_prime(&self) -> &[f64] {
        &self.qb_prime
    }

    pub fn pb_prime(&self) -> &[f64] {
        &self.pb_prime
    }

    pub fn qz(&self) -> &[f64] {
        &self.qz
    }

    pub fn pz(&self) -> &[f64] {
        &self.pz
    }

    pub fn displaced(&self) -> Option<&DisplacedColumns> {
        self.displaced.as_ref()
    }

    pub fn digitized(&self) -> Option<&DigitizedColumns> {
        self.digitized.as_ref()
    }

    /// Concatenates another batch onto this one. Presence of displaced
    /// and digitized columns must match.
    pub fn extend(&mut self, other: RoundBatch) -> Result<()> {
        if self.displaced.is_some() != other.displaced.is_some()
            || self.digitized.is_some() != other.digitized.is_some()
        {
            return Err(CoreError::Usage(
                "cannot concatenate batches with different post-processing stages".into(),
            ));
        }
        self.qa_prime.extend_from_slice(&other.qa_prime);
        self.pa_prime.extend_from_slice(&other.pa_prime);
        self.qb_prime.extend_from_slice(&other.qb_prime);
        self.pb_prime.extend_from_slice(&other.pb_prime);
        self.qz.extend_from_slice(&other.qz);
        self.pz.extend_from_slice(&other.pz);
        if let (Some(a), Some(b)) = (self.displaced.as_mut(), other.displaced) {
            a.qa.extend_from_slice(&b.qa);
            a.pa.extend_from_slice(&b.pa);
            a.qb.extend_from_slice(&b.qb);
            a.pb.extend_from_slice(&b.pb);
        }
        if let (Some(a), Some(b)) = (self.digitized.as_mut(), other.digitized) {
            a.xbar.extend_from_slice(&b.xbar);
            a.ybar.extend_from_slice(&b.ybar);
        }
        Ok(())
    }
}

/// Number of RNG chunks covering a block of `n` rounds.
pub fn num_chunks(n: u64) -> u64 {
    n.div_ceil(CHUNK_ROUNDS)
}

/// Length of chunk `chunk` within a block of `n` rounds.
pub fn chunk_len(n: u64, chunk: u64) -> u64 {
    let start = chunk * CHUNK_ROUNDS;
    if start >= n {
        0
    } else {
        (n - start).min(CHUNK_ROUNDS)
    }
}

/// Samples the rounds of one chunk of the block described by `params`.
///
/// Chunk `c` draws from the ChaCha stream `c` of `seed`, so the full
/// block `(seed, n)` is a pure function of its arguments regardless of
/// evaluation order. Twelve normal deviates are consumed per round in a
/// fixed order (modulation, transmitted vacuum, cloner noise).
pub fn sample_chunk(params: &ScenarioParams, seed: u64, chunk: u64) -> Result<RoundBatch> {
    params.validate()?;
    let len = chunk_len(params.n, chunk);
    if len == 0 {
        return Err(CoreError::Usage(format!(
            "chunk {chunk} is outside the block of {} rounds",
            params.n
        )));
    }
    let len = len as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk);

    let (sa, sb) = (params.vmod_a.sqrt(), params.vmod_b.sqrt());
    let (ta, ra) = (params.tau_a.sqrt(), (1.0 - params.tau_a).sqrt());
    let (tb, rb) = (params.tau_b.sqrt(), (1.0 - params.tau_b).sqrt());
    let (wa, wb) = (params.omega_a.sqrt(), params.omega_b.sqrt());
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;

    let mut qa_prime = Vec::with_capacity(len);
    let mut pa_prime = Vec::with_capacity(len);
    let mut qb_prime = Vec::with_capacity(len);
    let mut pb_prime = Vec::with_capacity(len);
    let mut qz = Vec::with_capacity(len);
    let mut pz = Vec::with_capacity(len);

    for _ in 0..len {
        let qa: f64 = rng.sample::<f64, _>(StandardNormal) * sa;
        let pa: f64 = rng.sample::<f64, _>(StandardNormal) * sa;
        let qb: f64 = rng.sample::<f64, _>(StandardNormal) * sb;
        let pb: f64 = rng.sample::<f64, _>(StandardNormal) * sb;
        let vqa: f64 = rng.sample(StandardNormal);
        let vpa: f64 = rng.sample(StandardNormal);
        let vqb: f64 = rng.sample(StandardNormal);
        let vpb: f64 = rng.sample(StandardNormal);
        let eqa: f64 = rng.sample::<f64, _>(StandardNormal) * wa;
        let epa: f64 = rng.sample::<f64, _>(StandardNormal) * wa;
        let eqb: f64 = rng.sample::<f64, _>(StandardNormal) * wb;
        let epb: f64 = rng.sample::<f64, _>(StandardNormal) * wb;

        let qa_rel = ta * (qa + vqa) + ra * eqa;
        let pa_rel = ta * (pa + vpa) + ra * epa;
        let qb_rel = tb * (qb + vqb) + rb * eqb;
        let pb_rel = tb * (pb + vpb) + rb * epb;

        qa_prime.push(qa);
        pa_prime.push(pa);
        qb_prime.push(qb);
        pb_prime.push(pb);
        qz.push((qb_rel - qa_rel) * inv_sqrt2);
        pz.push((pa_rel + pb_rel) * inv_sqrt2);
    }

    RoundBatch::from_columns(qa_prime, pa_prime, qb_prime, pb_prime, qz, pz)
}

/// Samples a full block in memory. Blocks beyond
/// [`MAX_IN_MEMORY_ROUNDS`] are rejected; use the streaming estimator
/// for those.
pub fn sample_rounds(params: &ScenarioParams, seed: u64) -> Result<RoundBatch> {
    params.validate()?;
    if params.n > MAX_IN_MEMORY_ROUNDS {
        return Err(CoreError::Usage(format!(
            "block of {} rounds exceeds the in-memory limit of {}; process it chunk by chunk",
            params.n, MAX_IN_MEMORY_ROUNDS
        )));
    }
    let mut batch: Option<RoundBatch> = None;
    for chunk in 0..num_chunks(params.n) {
        let part = sample_chunk(params, seed, chunk)?;
        match batch.as_mut() {
            None => batch = Some(part),
            Some(b) => b.extend(part)?,
        }
    }
    Ok(batch.expect("n >= 1 produces at least one chunk"))
}

/// Applies the conditional displacements, producing the raw keys
///
/// ```text
/// q_A = q'_A - u q_Z - v p_Z        (same for p_A, q_B)
/// p_B = -(p'_B - u q_Z - v p_Z)     (conjugated)
/// ```
pub fn apply_displacement(mut batch: RoundBatch, coeffs: &DisplacementCoeffs) -> RoundBatch {
    let n = batch.len();
    let mut qa = Vec::with_capacity(n);
    let mut pa = Vec::with_capacity(n);
    let mut qb = Vec::with_capacity(n);
    let mut pb = Vec::with_capacity(n);
    for j in 0..n {
        let (z_q, z_p) = (batch.qz[j], batch.pz[j]);
        qa.push(batch.qa_prime[j] - coeffs.u_qa * z_q - coeffs.v_qa * z_p);
        pa.push(batch.pa_prime[j] - coeffs.u_pa * z_q - coeffs.v_pa * z_p);
        qb.push(batch.qb_prime[j] - coeffs.u_qb * z_q - coeffs.v_qb * z_p);
        pb.push(-(batch.pb_prime[j] - coeffs.u_pb * z_q - coeffs.v_pb * z_p));
    }
    batch.displaced = Some(DisplacedColumns { qa, pa, qb, pb });
    batch.digitized = None;
    batch
}

/// Discretizes the displaced keys with `d` bits per quadrature over
/// `[-clip_sigma s, +clip_sigma s]` around the column mean, where `s`
/// is the column's empirical standard deviation. Out-of-range values
/// are clipped into the edge bins, and
/// `Xbar = 2^d bin(q_A) + bin(p_A)` (likewise `Ybar`).
pub fn adc_discretize(mut batch: RoundBatch, d: u32, clip_sigma: f64) -> Result<RoundBatch> {
    if d == 0 || d > 15 {
        return Err(CoreError::Domain(format!(
            "ADC depth d must lie in 1..=15, got {d}"
        )));
    }
    if !(clip_sigma > 0.0) || !clip_sigma.is_finite() {
        return Err(CoreError::Domain(format!(
            "clip_sigma must be positive and finite, got {clip_sigma}"
        )));
    }
    let cols = batch.displaced.as_ref().ok_or_else(|| {
        CoreError::Usage("discretization requires displaced columns; apply_displacement first".into())
    })?;

    let bins_of = |col: &[f64], name: &str| -> Result<Vec<u32>> {
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        if !(sd > 0.0) {
            return Err(CoreError::DegenerateInput(format!(
                "column {name} has zero variance; nothing to discretize"
            )));
        }
        let lo = mean - clip_sigma * sd;
        let width = 2.0 * clip_sigma * sd / (1u32 << d) as f64;
        let top = (1u32 << d) - 1;
        Ok(col
            .iter()
            .map(|v| {
                let idx = ((v - lo) / width).floor();
                (idx.max(0.0) as u32).min(top)
            })
            .collect())
    };

    let qa = bins_of(&cols.qa, "q_A")?;
    let pa = bins_of(&cols.pa, "p_A")?;
    let qb = bins_of(&cols.qb, "q_B")?;
    let pb = bins_of(&cols.pb, "p_B")?;
    let scale = 1u32 << d;
    let xbar = qa.iter().zip(&pa).map(|(&q, &p)| scale * q + p).collect();
    let ybar = qb.iter().zip(&pb).map(|(&q, &p)| scale * q + p).collect();
    batch.digitized = Some(DigitizedColumns { xbar, ybar, d });
    Ok(batch)
}
