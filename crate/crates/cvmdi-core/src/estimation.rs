//! Communication-free parameter estimation and rigorous chi-squared
//! confidence bounds.
//!
//! Alice and Bob each know their own modulation data and the public
//! relay outcomes, so every moment needed for the displaced-key
//! covariance matrix is locally computable: the variances `x`, `y`
//! directly, the correlation `z` through the weights `w1, w2, w3`
//! applied to the relay second moments. No raw-key samples are
//! sacrificed.
//!
//! The confidence analysis is exact, not asymptotic: empirical second
//! moments of Gaussians are chi-squared distributed, and both tails obey
//! `Pr{ chi/n > 1+t }, Pr{ chi/n < 1-t } < exp(-n t^2 / 8)`. Widening
//! the five estimated moments by the half-width `t` and taking a union
//! bound over eight one-sided events gives a worst-case covariance
//! triple `(x_max, y_max, z_min)` that fails with probability at most
//! `eps_PE = 8 exp(-n t^2 / 8)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::protocol::{
    self, DisplacementCoeffs, RoundBatch, ScenarioParams, ZBlockMoments,
};

/// Relative tolerance for the polarization-identity consistency check
/// between the `(q+p)^2`, `(q-p)^2` sums and the direct `q^2`, `p^2`,
/// `qp` sums.
pub const POLARIZATION_TOL: f64 = 1e-9;

/// Compensated (Neumaier) accumulator: exact enough for sums of 1e9
/// doubles of mixed sign.
#[derive(Debug, Clone, Copy, Default)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Sums of the displaced-key square moments `(q^2 + p^2)/2` per party.
#[derive(Debug, Clone, Copy, PartialEq)]
struct DisplacedSums {
    a_sq: f64,
    b_sq: f64,
}

/// One-pass second-moment statistics of a block: relay moments, the
/// polarization sums for `<qz pz>`, the eight cross moments that feed
/// the displacement solve, and (once displacement has been applied) the
/// displaced square sums.
///
/// Internally raw *sums* are stored, so merging two disjoint batches is
/// plain addition and therefore associative; accessors expose the
/// `n^{-1} sum` normalizations.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMoments {
    n: u64,
    qz_sq: f64,
    pz_sq: f64,
    qz_plus_pz_sq: f64,
    qz_minus_pz_sq: f64,
    qz_pz: f64,
    qa_qz: f64,
    qa_pz: f64,
    pa_qz: f64,
    pa_pz: f64,
    qb_qz: f64,
    qb_pz: f64,
    pb_qz: f64,
    pb_pz: f64,
    displaced: Option<DisplacedSums>,
}

impl EmpiricalMoments {
    /// Sample count.
    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn mean_qz_sq(&self) -> f64 {
        self.qz_sq / self.n as f64
    }

    pub fn mean_pz_sq(&self) -> f64 {
        self.pz_sq / self.n as f64
    }

    pub fn mean_qz_plus_pz_sq(&self) -> f64 {
        self.qz_plus_pz_sq / self.n as f64
    }

    pub fn mean_qz_minus_pz_sq(&self) -> f64 {
        self.qz_minus_pz_sq / self.n as f64
    }

    /// Direct `n^{-1} sum qz pz` (diagnostic; the protocol estimates the
    /// same quantity through the polarization identity).
    pub fn mean_qz_pz(&self) -> f64 {
        self.qz_pz / self.n as f64
    }

    /// Empirical Bell variance `(n^{-1} sum qz^2 + n^{-1} sum pz^2)/2`.
    pub fn bell_variance_estimate(&self) -> f64 {
        0.5 * (self.mean_qz_sq() + self.mean_pz_sq())
    }

    /// Mean displaced square moments `(x_hat, y_hat)`, present once the
    /// accumulated batches carried displaced columns.
    pub fn displaced_means(&self) -> Option<(f64, f64)> {
        self.displaced
            .map(|d| (d.a_sq / self.n as f64, d.b_sq / self.n as f64))
    }

    /// The moment block consumed by the displacement solve.
    pub fn z_block(&self) -> ZBlockMoments {
        let n = self.n as f64;
        ZBlockMoments {
            qz_sq: self.qz_sq / n,
            pz_sq: self.pz_sq / n,
            qz_pz: self.qz_pz / n,
            qa_qz: self.qa_qz / n,
            qa_pz: self.qa_pz / n,
            pa_qz: self.pa_qz / n,
            pa_pz: self.pa_pz / n,
            qb_qz: self.qb_qz / n,
            qb_pz: self.qb_pz / n,
            pb_qz: self.pb_qz / n,
            pb_pz: self.pb_pz / n,
        }
    }

    /// Merges the statistics of two disjoint batches.
    pub fn merge(&self, other: &EmpiricalMoments) -> Result<EmpiricalMoments> {
        let displaced = match (self.displaced, other.displaced) {
            (Some(a), Some(b)) => Some(DisplacedSums {
                a_sq: a.a_sq + b.a_sq,
                b_sq: a.b_sq + b.b_sq,
            }),
            (None, None) => None,
            _ => {
                return Err(CoreError::Usage(
                    "cannot merge moments with and without displaced sums".into(),
                ))
            }
        };
        Ok(EmpiricalMoments {
            n: self.n + other.n,
            qz_sq: self.qz_sq + other.qz_sq,
            pz_sq: self.pz_sq + other.pz_sq,
            qz_plus_pz_sq: self.qz_plus_pz_sq + other.qz_plus_pz_sq,
            qz_minus_pz_sq: self.qz_minus_pz_sq + other.qz_minus_pz_sq,
            qz_pz: self.qz_pz + other.qz_pz,
            qa_qz: self.qa_qz + other.qa_qz,
            qa_pz: self.qa_pz + other.qa_pz,
            pa_qz: self.pa_qz + other.pa_qz,
            pa_pz: self.pa_pz + other.pa_pz,
            qb_qz: self.qb_qz + other.qb_qz,
            qb_pz: self.qb_pz + other.qb_pz,
            pb_qz: self.pb_qz + other.pb_qz,
            pb_pz: self.pb_pz + other.pb_pz,
            displaced,
        })
    }

    /// Population moments of a scenario, packaged as if they had been
    /// measured exactly on a block of `params.n` rounds. The displaced
    /// sums are the closed-form `x`, `y` under the optimal coefficients.
    ///
    /// This is the analytic twin of [`moments_from_simulation`]: feeding
    /// it to [`worst_case_cm`] reproduces the closed-form finite-size
    /// bounds.
    pub fn from_population(params: &ScenarioParams) -> Result<EmpiricalMoments> {
        params.validate()?;
        let sm = params.second_moments();
        let cm = params.displaced_cm();
        let n = params.n as f64;
        Ok(EmpiricalMoments {
            n: params.n,
            qz_sq: sm.qz_sq * n,
            pz_sq: sm.pz_sq * n,
            qz_plus_pz_sq: (sm.qz_sq + sm.pz_sq + 2.0 * sm.qz_pz) * n,
            qz_minus_pz_sq: (sm.qz_sq + sm.pz_sq - 2.0 * sm.qz_pz) * n,
            qz_pz: sm.qz_pz * n,
            qa_qz: sm.qa_qz * n,
            qa_pz: sm.qa_pz * n,
            pa_qz: sm.pa_qz * n,
            pa_pz: sm.pa_pz * n,
            qb_qz: sm.qb_qz * n,
            qb_pz: sm.qb_pz * n,
            pb_qz: sm.pb_qz * n,
            pb_pz: sm.pb_pz * n,
            displaced: Some(DisplacedSums {
                a_sq: cm.x * n,
                b_sq: cm.y * n,
            }),
        })
    }

    fn polarization_consistent(&self) -> bool {
        let plus_direct = self.qz_sq + self.pz_sq + 2.0 * self.qz_pz;
        let minus_direct = self.qz_sq + self.pz_sq - 2.0 * self.qz_pz;
        let scale = self.qz_sq.abs() + self.pz_sq.abs() + 2.0 * self.qz_pz.abs() + 1e-300;
        (self.qz_plus_pz_sq - plus_direct).abs() <= POLARIZATION_TOL * scale
            && (self.qz_minus_pz_sq - minus_direct).abs() <= POLARIZATION_TOL * scale
    }
}

/// Accumulates all second moments of a batch in one pass.
pub fn accumulate(batch: &RoundBatch) -> Result<EmpiricalMoments> {
    if batch.is_empty() {
        return Err(CoreError::Domain("cannot accumulate an empty batch".into()));
    }
    let (qz, pz) = (batch.qz(), batch.pz());
    let mut s = [Neumaier::default(); 13];
    for j in 0..batch.len() {
        let (zq, zp) = (qz[j], pz[j]);
        s[0].add(zq * zq);
        s[1].add(zp * zp);
        s[2].add((zq + zp) * (zq + zp));
        s[3].add((zq - zp) * (zq - zp));
        s[4].add(zq * zp);
        s[5].add(batch.qa_prime()[j] * zq);
        s[6].add(batch.qa_prime()[j] * zp);
        s[7].add(batch.pa_prime()[j] * zq);
        s[8].add(batch.pa_prime()[j] * zp);
        s[9].add(batch.qb_prime()[j] * zq);
        s[10].add(batch.qb_prime()[j] * zp);
        s[11].add(batch.pb_prime()[j] * zq);
        s[12].add(batch.pb_prime()[j] * zp);
    }
    let displaced = batch.displaced().map(|cols| {
        let mut a = Neumaier::default();
        let mut b = Neumaier::default();
        for j in 0..batch.len() {
            a.add(0.5 * (cols.qa[j] * cols.qa[j] + cols.pa[j] * cols.pa[j]));
            b.add(0.5 * (cols.qb[j] * cols.qb[j] + cols.pb[j] * cols.pb[j]));
        }
        DisplacedSums {
            a_sq: a.value(),
            b_sq: b.value(),
        }
    });
    let m = EmpiricalMoments {
        n: batch.len() as u64,
        qz_sq: s[0].value(),
        pz_sq: s[1].value(),
        qz_plus_pz_sq: s[2].value(),
        qz_minus_pz_sq: s[3].value(),
        qz_pz: s[4].value(),
        qa_qz: s[5].value(),
        qa_pz: s[6].value(),
        pa_qz: s[7].value(),
        pa_pz: s[8].value(),
        qb_qz: s[9].value(),
        qb_pz: s[10].value(),
        pb_qz: s[11].value(),
        pb_pz: s[12].value(),
        displaced,
    };
    if !m.polarization_consistent() {
        return Err(CoreError::Numerical(
            "polarization sums inconsistent with direct qz/pz sums".into(),
        ));
    }
    Ok(m)
}

/// Estimates `<qz pz>` from locally computable sums via the polarization
/// identity `<qz pz> = [ <(qz+pz)^2> - <(qz-pz)^2> ] / 4`.
pub fn qzpz_covariance_estimator(m: &EmpiricalMoments) -> f64 {
    0.25 * (m.mean_qz_plus_pz_sq() - m.mean_qz_minus_pz_sq())
}

/// Chi-squared confidence half-width `t = sqrt(8 ln(8/eps_PE) / n)`.
///
/// The widened moment bounds only make sense for `t < 1`; blocks too
/// small for that are reported as unusable.
pub fn confidence_t(n: u64, eps_pe: f64) -> Result<f64> {
    if n == 0 {
        return Err(CoreError::Domain("n must be at least 1".into()));
    }
    if !(eps_pe > 0.0 && eps_pe < 1.0) {
        return Err(CoreError::Domain(format!(
            "eps_pe must lie in (0, 1), got {eps_pe}"
        )));
    }
    let t = (8.0 * (8.0 / eps_pe).ln() / n as f64).sqrt();
    if t >= 1.0 {
        return Err(CoreError::BlockTooSmall(format!(
            "n = {n} gives confidence half-width t = {t:.3} >= 1 at eps_pe = {eps_pe:.3e}; \
             the block cannot be certified"
        )));
    }
    Ok(t)
}

/// Empirical violation rates of the two chi-squared tail bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailCheck {
    /// Fraction of trials with `chi/n > 1 + t`.
    pub upper_rate: f64,
    /// Fraction of trials with `chi/n < 1 - t`.
    pub lower_rate: f64,
    /// The analytic bound `exp(-n t^2 / 8)` for either side.
    pub bound: f64,
    pub trials: u64,
}

/// Monte Carlo check of the tail bounds
/// `Pr{ chi/n >< 1 +- t } < exp(-n t^2 / 8)`: draws `trials` empirical
/// variances of `n` standard Gaussians and counts the violations of
/// each side. Deterministic in `seed`; trials are partitioned into
/// fixed RNG streams so the counts do not depend on thread scheduling.
pub fn chi2_tail_check(n: u64, t: f64, trials: u64, seed: u64) -> Result<TailCheck> {
    if n == 0 || trials == 0 {
        return Err(CoreError::Domain(
            "need at least one sample and one trial".into(),
        ));
    }
    if !(t > 0.0) || !t.is_finite() {
        return Err(CoreError::Domain(format!(
            "half-width t must be positive and finite, got {t}"
        )));
    }
    const TRIALS_PER_STREAM: u64 = 64;
    let streams = trials.div_ceil(TRIALS_PER_STREAM);
    let (upper, lower) = (0..streams)
        .into_par_iter()
        .map(|stream| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            let lo = stream * TRIALS_PER_STREAM;
            let hi = (lo + TRIALS_PER_STREAM).min(trials);
            let mut up = 0u64;
            let mut down = 0u64;
            for _ in lo..hi {
                let mut acc = Neumaier::default();
                for _ in 0..n {
                    let g: f64 = rng.sample(StandardNormal);
                    acc.add(g * g);
                }
                let ratio = acc.value() / n as f64;
                if ratio > 1.0 + t {
                    up += 1;
                }
                if ratio < 1.0 - t {
                    down += 1;
                }
            }
            (up, down)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(TailCheck {
        upper_rate: upper as f64 / trials as f64,
        lower_rate: lower as f64 / trials as f64,
        bound: (-(n as f64) * t * t / 8.0).exp(),
        trials,
    })
}

/// Worst-case covariance triple certified at failure probability
/// `eps_pe`, with its confidence half-width and the signed correlation
/// diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorstCaseCM {
    /// Upper confidence bound on Alice's displaced variance.
    pub x_max: f64,
    /// Upper confidence bound on Bob's displaced variance.
    pub y_max: f64,
    /// Lower confidence bound on the displaced correlation magnitude.
    pub z_min: f64,
    /// Chi-squared half-width used for the widening.
    pub t: f64,
    /// Failure probability budgeted to parameter estimation.
    pub eps_pe: f64,
    /// Block size behind the bounds.
    pub n: u64,
    /// Point estimate of `z` along the weight route
    /// `w1 <qz^2> + w2 <pz^2> + w3 <qz pz>` (no widening). For the
    /// entangling cloner this comes out *negative*.
    pub z_signed_w_route: f64,
    /// Point estimate of `z` from direct covariance algebra of the
    /// displaced keys — the opposite sign of the weight route. The
    /// magnitude is what the bounds certify; both signed values are kept
    /// because the two derivations disagree on the overall sign.
    pub z_signed_direct: f64,
}

/// Computes the worst-case covariance triple from accumulated moments:
///
/// * `x_max = (1-t)^{-1} n^{-1} sum (q_A^2 + p_A^2)/2`, `y_max`
///   analogously;
/// * `z_min` is the minimum over the eight sign patterns
///   `(s1, s2, s3)` of the widened weight combination, each estimated
///   moment pushed independently to its unfavorable end.
pub fn worst_case_cm(
    m: &EmpiricalMoments,
    coeffs: &DisplacementCoeffs,
    eps_pe: f64,
) -> Result<WorstCaseCM> {
    let t = confidence_t(m.n(), eps_pe)?;
    worst_case_cm_with_t(m, coeffs, t, eps_pe)
}

/// Same as [`worst_case_cm`] but with an explicit half-width, which
/// tests use to probe the `t = 0` (no widening) limit.
pub fn worst_case_cm_with_t(
    m: &EmpiricalMoments,
    coeffs: &DisplacementCoeffs,
    t: f64,
    eps_pe: f64,
) -> Result<WorstCaseCM> {
    if !(0.0..1.0).contains(&t) {
        return Err(CoreError::BlockTooSmall(format!(
            "confidence half-width must satisfy 0 <= t < 1, got {t}"
        )));
    }
    let (a_mean, b_mean) = m.displaced_means().ok_or_else(|| {
        CoreError::Usage("worst-case bounds need displaced moments; displacement not applied".into())
    })?;
    let x_max = a_mean / (1.0 - t);
    let y_max = b_mean / (1.0 - t);
    let (w1, w2, w3) = coeffs.w_coefficients();
    let (mq, mp) = (m.mean_qz_sq(), m.mean_pz_sq());
    let (mplus, mminus) = (m.mean_qz_plus_pz_sq(), m.mean_qz_minus_pz_sq());

    let mut z_min = f64::INFINITY;
    for s1 in [-1.0, 1.0] {
        for s2 in [-1.0, 1.0] {
            for s3 in [-1.0, 1.0] {
                let v = w1 * mq / (1.0 + s1 * t)
                    + w2 * mp / (1.0 + s2 * t)
                    + w3 * (0.25 * mplus / (1.0 + s3 * t) - 0.25 * mminus / (1.0 - s3 * t));
                z_min = z_min.min(v.abs());
            }
        }
    }

    let z_w_route = w1 * mq + w2 * mp + w3 * qzpz_covariance_estimator(m);
    let wc = WorstCaseCM {
        x_max,
        y_max,
        z_min,
        t,
        eps_pe,
        n: m.n(),
        z_signed_w_route: z_w_route,
        z_signed_direct: -z_w_route,
    };
    if !(wc.x_max > 0.0) || !(wc.y_max > 0.0) {
        return Err(CoreError::Numerical(format!(
            "worst-case variances must be positive, got x_max = {}, y_max = {}",
            wc.x_max, wc.y_max
        )));
    }
    if !(wc.z_min * wc.z_min < wc.x_max * wc.y_max) {
        return Err(CoreError::Numerical(format!(
            "worst-case triple is not a valid covariance: z_min^2 = {} >= x_max y_max = {}",
            wc.z_min * wc.z_min,
            wc.x_max * wc.y_max
        )));
    }
    Ok(wc)
}

/// Runs the full estimation pipeline on simulated data: a first pass
/// over the block accumulates the relay and cross moments and solves for
/// the displacement coefficients; a second pass regenerates the same
/// rounds (same seed, same chunk streams), applies the displacement and
/// accumulates the displaced moments as well.
///
/// Chunks are processed in parallel but merged in chunk order, so the
/// result is a pure function of `(params, seed)`.
pub fn moments_from_simulation(
    params: &ScenarioParams,
    seed: u64,
) -> Result<(EmpiricalMoments, DisplacementCoeffs)> {
    params.validate()?;
    let chunks = protocol::num_chunks(params.n);

    let pass1: Vec<EmpiricalMoments> = (0..chunks)
        .into_par_iter()
        .map(|c| accumulate(&protocol::sample_chunk(params, seed, c)?))
        .collect::<Result<_>>()?;
    let first = merge_in_order(pass1)?;
    let coeffs = DisplacementCoeffs::from_moments(&first.z_block())?;

    let pass2: Vec<EmpiricalMoments> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let batch = protocol::sample_chunk(params, seed, c)?;
            accumulate(&protocol::apply_displacement(batch, &coeffs))
        })
        .collect::<Result<_>>()?;
    let moments = merge_in_order(pass2)?;
    Ok((moments, coeffs))
}

fn merge_in_order(parts: Vec<EmpiricalMoments>) -> Result<EmpiricalMoments> {
    let mut iter = parts.into_iter();
    let mut acc = iter
        .next()
        .ok_or_else(|| CoreError::Domain("no chunks to merge".into()))?;
    for part in iter {
        acc = acc.merge(&part)?;
    }
    Ok(acc)
}

/// Result of the union-bound calibration experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnionCalibration {
    /// Simulated blocks whose true covariance triple escaped the
    /// certified worst case.
    pub violations: u64,
    pub blocks: u64,
}

impl UnionCalibration {
    pub fn rate(&self) -> f64 {
        self.violations as f64 / self.blocks as f64
    }
}

/// Simulates `blocks` independent blocks of `params.n` rounds, runs the
/// full estimation pipeline on each, and counts how often the *true*
/// displaced covariance triple (computed in closed form for the
/// coefficients each block actually estimated) escapes the certified
/// worst case:
///
/// ```text
/// x > x_max  or  y > y_max  or  |z| < z_min
/// ```
///
/// The union bound promises a rate of at most `eps_pe`.
pub fn pe_union_calibration(
    params: &ScenarioParams,
    eps_pe: f64,
    blocks: u64,
    seed: u64,
) -> Result<UnionCalibration> {
    if blocks == 0 {
        return Err(CoreError::Domain("need at least one block".into()));
    }
    let sm = params.second_moments();
    let violations = (0..blocks)
        .into_par_iter()
        .map(|b| -> Result<u64> {
            let block_seed = derive_seed(seed, b);
            let (m, coeffs) = moments_from_simulation(params, block_seed)?;
            let wc = worst_case_cm(&m, &coeffs, eps_pe)?;
            let truth = sm.displaced_cm(&coeffs);
            let violated =
                truth.x > wc.x_max || truth.y > wc.y_max || truth.z.abs() < wc.z_min;
            Ok(u64::from(violated))
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(UnionCalibration { violations, blocks })
}

/// SplitMix64-style derivation of per-block seeds from a master seed.
fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use crate::protocol::{apply_displacement, sample_rounds};

    fn test_scenario(n: u64) -> ScenarioParams {
        ScenarioParams {
            vmod_a: 8.0,
            vmod_b: 8.0,
            tau_a: 0.95,
            tau_b: 0.8,
            omega_a: 1.02,
            omega_b: 1.05,
            n,
            d: 5,
            beta: 0.95,
        }
    }

    #[test]
    fn merging_halves_equals_full_accumulation() {
        let params = test_scenario(4_000);
        let batch = sample_rounds(&params, 5).unwrap();
        let full = accumulate(&batch).unwrap();

        let half_params = test_scenario(2_000);
        // Split the batch by re-sampling the two halves directly.
        let cols = |range: std::ops::Range<usize>| {
            RoundBatch::from_columns(
                batch.qa_prime()[range.clone()].to_vec(),
                batch.pa_prime()[range.clone()].to_vec(),
                batch.qb_prime()[range.clone()].to_vec(),
                batch.pb_prime()[range.clone()].to_vec(),
                batch.qz()[range.clone()].to_vec(),
                batch.pz()[range].to_vec(),
            )
            .unwrap()
        };
        let a = accumulate(&cols(0..2000)).unwrap();
        let b = accumulate(&cols(2000..4000)).unwrap();
        let merged = a.merge(&b).unwrap();
        assert_eq!(merged.n(), full.n());
        assert_relative_eq!(
            merged.mean_qz_sq(),
            full.mean_qz_sq(),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            merged.mean_qz_plus_pz_sq(),
            full.mean_qz_plus_pz_sq(),
            max_relative = 1e-12
        );
        let _ = half_params;
    }

    #[test]
    fn all_zero_batch_gives_zero_moments() {
        let zeros = vec![0.0; 100];
        let batch = RoundBatch::from_columns(
            zeros.clone(),
            zeros.clone(),
            zeros.clone(),
            zeros.clone(),
            zeros.clone(),
            zeros,
        )
        .unwrap();
        let m = accumulate(&batch).unwrap();
        assert_eq!(m.mean_qz_sq(), 0.0);
        assert_eq!(m.mean_qz_pz(), 0.0);
        assert_eq!(m.z_block().qa_qz, 0.0);
    }

    #[test]
    fn polarization_estimator_identity_cases() {
        // p_Z = q_Z exactly: the estimator returns the q variance.
        let q: Vec<f64> = (0..50).map(|i| (i as f64 - 24.5) / 10.0).collect();
        let batch = RoundBatch::from_columns(
            vec![0.0; 50],
            vec![0.0; 50],
            vec![0.0; 50],
            vec![0.0; 50],
            q.clone(),
            q.clone(),
        )
        .unwrap();
        let m = accumulate(&batch).unwrap();
        assert_relative_eq!(
            qzpz_covariance_estimator(&m),
            m.mean_qz_sq(),
            max_relative = 1e-12
        );
        // The estimator equals the direct product sum exactly, for any data.
        let params = test_scenario(3_000);
        let m = accumulate(&sample_rounds(&params, 9).unwrap()).unwrap();
        assert_relative_eq!(
            qzpz_covariance_estimator(&m),
            m.mean_qz_pz(),
            epsilon = 1e-12 * m.mean_qz_sq()
        );
    }

    #[test]
    fn confidence_t_reference_values() {
        // eps_PE = 1e-21, n = 1e9 gives t close to 6.352e-4.
        let t = confidence_t(1_000_000_000, 1e-21).unwrap();
        assert_relative_eq!(t, 6.352e-4, max_relative = 1e-3);
        // Quadrupling n halves t.
        let t4 = confidence_t(4_000_000_000, 1e-21).unwrap();
        assert_relative_eq!(t4, t / 2.0, max_relative = 1e-12);
    }

    #[test]
    fn confidence_t_boundary_is_rejected() {
        // n = ceil(8 ln(8/eps)) sits right at t = 1 for the matching eps.
        let n = 100u64;
        let eps = 8.0 * (-(n as f64) / 8.0).exp();
        assert!(matches!(
            confidence_t(n, eps),
            Err(CoreError::BlockTooSmall(_))
        ));
        // A slightly larger block passes.
        assert!(confidence_t(n + 1, eps).is_ok());
        // Parameter validation.
        assert!(confidence_t(0, 0.1).is_err());
        assert!(confidence_t(100, 0.0).is_err());
        assert!(confidence_t(100, 1.0).is_err());
    }

    #[test]
    fn worst_case_closed_forms_for_the_cloner() {
        // Population moments reproduce the closed-form widened bounds.
        let params = test_scenario(100_000);
        let eps_pe = 1e-10;
        let m = EmpiricalMoments::from_population(&params).unwrap();
        let coeffs = params.displacement_coeffs().unwrap();
        let wc = worst_case_cm(&m, &coeffs, eps_pe).unwrap();

        let nu = params.bell_variance();
        let t = confidence_t(params.n, eps_pe).unwrap();
        let vm2 = params.vmod_a * params.vmod_b;
        assert_relative_eq!(
            wc.z_min,
            (params.tau_a * params.tau_b).sqrt() / (2.0 * (1.0 + t)) * vm2 / nu,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            wc.x_max,
            params.vmod_a / (1.0 - t) * (1.0 - 0.5 * params.tau_a * params.vmod_a / nu),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            wc.y_max,
            params.vmod_b / (1.0 - t) * (1.0 - 0.5 * params.tau_b * params.vmod_b / nu),
            max_relative = 1e-12
        );
        // The two signed diagnostics disagree by an overall sign; the
        // direct route is positive for the cloner.
        assert!(wc.z_signed_direct > 0.0);
        assert_relative_eq!(
            wc.z_signed_direct,
            -wc.z_signed_w_route,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            wc.z_signed_direct,
            params.displaced_cm().z,
            max_relative = 1e-12
        );
    }

    #[test]
    fn zero_half_width_means_no_widening() {
        let params = test_scenario(10_000);
        let m = EmpiricalMoments::from_population(&params).unwrap();
        let coeffs = params.displacement_coeffs().unwrap();
        let wc = worst_case_cm_with_t(&m, &coeffs, 0.0, 1e-10).unwrap();
        let cm = params.displaced_cm();
        assert_relative_eq!(wc.x_max, cm.x, max_relative = 1e-12);
        assert_relative_eq!(wc.y_max, cm.y, max_relative = 1e-12);
        assert_relative_eq!(wc.z_min, cm.z, max_relative = 1e-12);
    }

    #[test]
    fn bounds_tighten_with_block_size() {
        let eps_pe = 1e-10;
        let m1 = EmpiricalMoments::from_population(&test_scenario(100_000)).unwrap();
        let m2 = EmpiricalMoments::from_population(&test_scenario(10_000_000)).unwrap();
        let coeffs = test_scenario(1).displacement_coeffs().unwrap();
        let w1 = worst_case_cm(&m1, &coeffs, eps_pe).unwrap();
        let w2 = worst_case_cm(&m2, &coeffs, eps_pe).unwrap();
        assert!(
            w2.x_max < w1.x_max,
            "x_max must shrink with n: {} vs {}",
            w2.x_max,
            w1.x_max
        );
        assert!(
            w2.z_min > w1.z_min,
            "z_min must grow with n: {} vs {}",
            w2.z_min,
            w1.z_min
        );
    }

    #[test]
    fn worst_case_needs_displaced_moments() {
        let params = test_scenario(10_000);
        let batch = sample_rounds(&params, 1).unwrap();
        let m = accumulate(&batch).unwrap();
        let coeffs = params.displacement_coeffs().unwrap();
        assert!(matches!(
            worst_case_cm(&m, &coeffs, 1e-10),
            Err(CoreError::Usage(_))
        ));
        // After displacement it works.
        let coeffs2 = coeffs;
        let m = accumulate(&apply_displacement(batch, &coeffs2)).unwrap();
        assert!(worst_case_cm(&m, &coeffs, 1e-10).is_ok());
    }

    #[test]
    fn streaming_pipeline_matches_in_memory_pipeline() {
        let params = test_scenario(30_000);
        let (m_stream, coeffs_stream) = moments_from_simulation(&params, 77).unwrap();

        // Reference: materialize the whole block, estimate, displace.
        let batch = sample_rounds(&params, 77).unwrap();
        let first = accumulate(&batch).unwrap();
        let coeffs = DisplacementCoeffs::from_moments(&first.z_block()).unwrap();
        let displaced = apply_displacement(batch, &coeffs);
        let m_ref = accumulate(&displaced).unwrap();

        assert_eq!(coeffs_stream, coeffs);
        assert_eq!(m_stream.n(), m_ref.n());
        assert_relative_eq!(
            m_stream.mean_qz_sq(),
            m_ref.mean_qz_sq(),
            max_relative = 1e-12
        );
        let (a_s, b_s) = m_stream.displaced_means().unwrap();
        let (a_r, b_r) = m_ref.displaced_means().unwrap();
        assert_relative_eq!(a_s, a_r, max_relative = 1e-12);
        assert_relative_eq!(b_s, b_r, max_relative = 1e-12);
    }

    #[test]
    fn derive_seed_spreads_indices() {
        let s0 = derive_seed(1, 0);
        let s1 = derive_seed(1, 1);
        let s2 = derive_seed(2, 0);
        assert_ne!(s0, s1);
        assert_ne!(s0, s2);
    }
}
