//! Composable secret-key rates: Holevo bound on Eve's information,
//! finite-size corrections against collective and general coherent
//! attacks, security-budget calculus, and rate optimization.
//!
//! The asymptotic rate is `r0 = beta I_AB - I_BE`, both informations
//! evaluated on the worst-case covariance triple certified by parameter
//! estimation. Finite-size rates subtract an AEP penalty of order
//! `1/sqrt(n)` plus the cost of conditioning the smooth min-entropy on
//! error-correction success, and — for coherent attacks — an energy-test
//! sacrifice and a de Finetti binomial penalty with a blown-up security
//! parameter `eps'' = (K^4/50) eps'`.

use crate::error::{CoreError, Result};
use crate::estimation::{
    confidence_t, moments_from_simulation, worst_case_cm, EmpiricalMoments, WorstCaseCM,
};
use crate::gaussian::{gaussian_mutual_information, CovMatrix, Quadrature};
use crate::protocol::{DisplacementCoeffs, ScenarioParams};
use std::f64::consts::LN_2;

/// Which party's variable the key is reconciled onto. The Holevo bound
/// conditions Eve's state on that party's measurement outcome.
///
/// The default is Alice, matching the protocol description (the relay
/// outcome steers Bob's data onto Alice's key) and required for positive
/// rates in asymmetric configurations: there Eve wiretaps only Bob's
/// link, so her information about Bob's variable exceeds `beta I_AB` at
/// every modulation, while her information about Alice's variable stays
/// small. For symmetric attacks the two sides give identical rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReconciliationSide {
    #[default]
    Alice,
    Bob,
}

/// Failure-probability budget of one finite-size analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecurityBudget {
    /// Leftover-hash (privacy amplification) parameter.
    pub eps: f64,
    /// Min-entropy smoothing parameter.
    pub eps_s: f64,
    /// Error-correction failure probability.
    pub eps_ec: f64,
    /// Parameter-estimation failure probability.
    pub eps_pe: f64,
    /// Error-correction success probability (an input constant, not
    /// estimated).
    pub p: f64,
}

impl SecurityBudget {
    /// Budget with all four epsilons equal.
    pub fn uniform(eps_each: f64, p: f64) -> Result<SecurityBudget> {
        let b = SecurityBudget {
            eps: eps_each,
            eps_s: eps_each,
            eps_ec: eps_each,
            eps_pe: eps_each,
            p,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eps", self.eps),
            ("eps_s", self.eps_s),
            ("eps_ec", self.eps_ec),
            ("eps_pe", self.eps_pe),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(CoreError::Domain(format!(
                    "{name} must lie in (0, 1), got {v}"
                )));
            }
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(CoreError::Domain(format!(
                "p must lie in (0, 1], got {}",
                self.p
            )));
        }
        if self.eps_prime() >= 1.0 {
            return Err(CoreError::Domain(format!(
                "eps' = {} must be below 1",
                self.eps_prime()
            )));
        }
        Ok(())
    }

    /// Total failure probability `eps' = eps + eps_s + eps_EC + eps_PE`.
    pub fn eps_prime(&self) -> f64 {
        self.eps + self.eps_s + self.eps_ec + self.eps_pe
    }
}

/// Derives the budget that achieves a target coherent-attack security
/// parameter `eps''` for de Finetti parameter `K`: sets
/// `eps' = 50 target / K^4` and splits it equally across the four
/// components.
pub fn budget_for_target(target_eps_double_prime: f64, big_k: u64, p: f64) -> Result<SecurityBudget> {
    if !(target_eps_double_prime > 0.0 && target_eps_double_prime < 1.0) {
        return Err(CoreError::Domain(format!(
            "target eps'' must lie in (0, 1), got {target_eps_double_prime}"
        )));
    }
    if big_k == 0 {
        return Err(CoreError::Domain("K must be at least 1".into()));
    }
    let eps_prime = 50.0 * target_eps_double_prime / (big_k as f64).powi(4);
    let each = eps_prime / 4.0;
    if each < f64::MIN_POSITIVE {
        return Err(CoreError::Domain(format!(
            "per-component epsilon underflows at K = {big_k}, target = {target_eps_double_prime}"
        )));
    }
    if eps_prime >= 1.0 {
        return Err(CoreError::Domain(format!(
            "derived eps' = {eps_prime} is not below 1"
        )));
    }
    SecurityBudget::uniform(each, p)
}

/// AEP correction `Delta_AEP(delta, d) = 4 (d+1) sqrt(log2(2 / delta^2))`
/// (the `1/sqrt(n)` prefactor is applied by the caller).
pub fn delta_aep(delta: f64, d: u32) -> Result<f64> {
    if !(delta > 0.0 && delta < std::f64::consts::SQRT_2) {
        return Err(CoreError::Domain(format!(
            "smoothing parameter must lie in (0, sqrt(2)), got {delta}"
        )));
    }
    Ok(4.0 * (d + 1) as f64 * (2.0 / (delta * delta)).log2().sqrt())
}

/// The earlier, looser AEP correction
/// `(d+1)^2 + 4(d+1) sqrt(log2(2/eps^2)) + 2 log2(2/(p^2 eps)) + 4 eps d / (p sqrt(n))`,
/// kept only for the comparison with [`delta_aep`].
pub fn delta_aep_legacy(eps: f64, d: u32, p: f64, n: u64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(CoreError::Domain(format!(
            "eps must lie in (0, 1), got {eps}"
        )));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(CoreError::Domain(format!("p must lie in (0, 1], got {p}")));
    }
    if n == 0 {
        return Err(CoreError::Domain("n must be at least 1".into()));
    }
    let dp1 = (d + 1) as f64;
    Ok(dp1 * dp1
        + 4.0 * dp1 * (2.0 / (eps * eps)).log2().sqrt()
        + 2.0 * (2.0 / (p * p * eps)).log2()
        + 4.0 * eps * d as f64 / (p * (n as f64).sqrt()))
}

/// `log2 C(K+4, 4)`, evaluated through logarithms so it never overflows.
pub fn log2_binomial_k4(big_k: u64) -> f64 {
    let k = big_k as f64;
    ((k + 1.0).ln() + (k + 2.0).ln() + (k + 3.0).ln() + (k + 4.0).ln() - 24.0f64.ln()) / LN_2
}

/// A finite-size rate with each correction term reported separately.
/// The rate decomposes as
/// `r = r0_weight * r0 - aep + theorem1 + hashing - de_finetti`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateBreakdown {
    pub r: f64,
    pub r0: f64,
    /// `(n-k)/n` for the coherent analysis, 1 otherwise.
    pub r0_weight: f64,
    /// Subtracted AEP penalty (positive).
    pub aep: f64,
    /// Added conditioning term `log2(p - (2/3) p eps_s) / n` (nonpositive).
    pub theorem1: f64,
    /// Added hashing term `2 log2(2 eps) / n` (nonpositive for eps < 1/2).
    pub hashing: f64,
    /// Subtracted de Finetti penalty (0 for the collective analysis).
    pub de_finetti: f64,
}

/// Finite-size rate against collective Gaussian attacks:
///
/// ```text
/// r = r0 - Delta_AEP((2/3) p eps_s, d)/sqrt(n)
///        + log2(p - (2/3) p eps_s)/n + 2 log2(2 eps)/n
/// ```
pub fn collective_rate(r0: f64, n: u64, budget: &SecurityBudget, d: u32) -> Result<RateBreakdown> {
    budget.validate()?;
    if n == 0 {
        return Err(CoreError::Domain("n must be at least 1".into()));
    }
    let nf = n as f64;
    let delta = (2.0 / 3.0) * budget.p * budget.eps_s;
    let aep = delta_aep(delta, d)? / nf.sqrt();
    let theorem1 = (budget.p - delta).log2() / nf;
    let hashing = 2.0 * (2.0 * budget.eps).log2() / nf;
    Ok(RateBreakdown {
        r: r0 - aep + theorem1 + hashing,
        r0,
        r0_weight: 1.0,
        aep,
        theorem1,
        hashing,
        de_finetti: 0.0,
    })
}

/// Finite-size rate against general coherent attacks via the Gaussian
/// de Finetti reduction: `k` signals feed the energy test, and the
/// security parameter blows up to `eps'' = (K^4/50) eps'`:
///
/// ```text
/// r = ((n-k)/n) r0 - (sqrt(n-k)/n) Delta_AEP((2/3) p eps_s, d)
///       + log2(p - (2/3) p eps_s)/n + 2 log2(2 eps)/n - (2/n) log2 C(K+4, 4)
/// ```
pub fn coherent_rate(
    r0: f64,
    n: u64,
    k: u64,
    big_k: u64,
    budget: &SecurityBudget,
    d: u32,
) -> Result<(RateBreakdown, f64)> {
    budget.validate()?;
    if k == 0 || k >= n {
        return Err(CoreError::Domain(format!(
            "energy-test size must satisfy 0 < k < n, got k = {k}, n = {n}"
        )));
    }
    if big_k == 0 {
        return Err(CoreError::Domain("K must be at least 1".into()));
    }
    let eps_double_prime = (big_k as f64).powi(4) / 50.0 * budget.eps_prime();
    if eps_double_prime >= 1.0 {
        return Err(CoreError::Domain(format!(
            "de Finetti blow-up gives eps'' = {eps_double_prime:.3e} >= 1; \
             tighten the budget (see budget_for_target)"
        )));
    }
    let nf = n as f64;
    let m = (n - k) as f64;
    let delta = (2.0 / 3.0) * budget.p * budget.eps_s;
    let aep = m.sqrt() / nf * delta_aep(delta, d)?;
    let theorem1 = (budget.p - delta).log2() / nf;
    let hashing = 2.0 * (2.0 * budget.eps).log2() / nf;
    let de_finetti = 2.0 * log2_binomial_k4(big_k) / nf;
    Ok((
        RateBreakdown {
            r: (m / nf) * r0 - aep + theorem1 + hashing - de_finetti,
            r0,
            r0_weight: m / nf,
            aep,
            theorem1,
            hashing,
            de_finetti,
        },
        eps_double_prime,
    ))
}

/// Holevo bound on Eve's information about the reconciled variable,
/// with the default side (see [`holevo_bound_mdi_with_side`] for the
/// side switch).
pub fn holevo_bound_mdi(params: &ScenarioParams) -> Result<f64> {
    holevo_bound_mdi_with_side(params, ReconciliationSide::default())
}

/// Holevo bound `chi_BE = S(E|Z) - S(E|Z,Y)` for the entangling-cloner
/// attack, via the entanglement-based Gaussian model.
///
/// Construction: Alice and Bob each keep one half of an EPR state of
/// variance `V_M + 1` (heterodyning the kept half reproduces the
/// coherent-state preparation exactly); Eve holds one EPR pair of
/// variance `omega` per link, one half of which is mixed with the signal
/// on the link beamsplitter. The relay mixes the two arriving modes on a
/// balanced beamsplitter and homodynes `q` of the minus port and `p` of
/// the plus port. The global conditional state stays pure, so Eve's
/// entropies equal those of the complementary modes:
/// `S(E|Z) = S(ab|Z)` and `S(E|Z,Y) = S(a|Z,Y)` (key on Bob's side; the
/// roles of `a` and `b` swap for Alice). The classical displacement is
/// an invertible function of the public outcome `Z`, so it does not
/// change these informations.
pub fn holevo_bound_mdi_with_side(params: &ScenarioParams, side: ReconciliationSide) -> Result<f64> {
    params.validate()?;
    // Mode order: a=0, A=1, b=2, B=3, eA=4, EA=5, eB=6, EB=7.
    let cm = CovMatrix::epr(params.vmod_a + 1.0)?
        .tensor(&CovMatrix::epr(params.vmod_b + 1.0)?)
        .tensor(&CovMatrix::epr(params.omega_a)?)
        .tensor(&CovMatrix::epr(params.omega_b)?);
    let cm = cm.apply_beamsplitter(1, 4, params.tau_a)?;
    let cm = cm.apply_beamsplitter(3, 6, params.tau_b)?;
    // Relay: plus port lands on index 1, minus port on index 3.
    let cm = cm.apply_beamsplitter(1, 3, 0.5)?;
    let cm = cm.condition_homodyne(3, Quadrature::Q)?;
    let cm = cm.condition_homodyne(1, Quadrature::P)?;
    // Remaining order: a=0, b=1, eA=2, EA=3, eB=4, EB=5.
    let s_e_given_z = cm.reduce(&[0, 1])?.von_neumann_entropy()?;
    let (het_mode, survivor) = match side {
        ReconciliationSide::Bob => (1, 0),   // heterodyne b, keep a
        ReconciliationSide::Alice => (0, 0), // heterodyne a; b slides to 0
    };
    let conditioned = cm.condition_heterodyne(het_mode)?;
    let s_e_given_zy = conditioned.reduce(&[survivor])?.von_neumann_entropy()?;
    let chi = s_e_given_z - s_e_given_zy;
    if chi < -1e-9 {
        return Err(CoreError::Numerical(format!(
            "Holevo bound came out negative: {chi}"
        )));
    }
    Ok(chi.max(0.0))
}

/// Attack parameters compatible with a worst-case covariance triple:
/// effective transmissivities and a total excess-noise pool whose split
/// across the two links is left to the adversary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorstCaseModel {
    pub vmod_a: f64,
    pub vmod_b: f64,
    pub tau_a: f64,
    pub tau_b: f64,
    pub xi_total: f64,
    /// Nominal fraction of the excess noise sitting on Alice's link,
    /// included as one of the candidate splits.
    pub nominal_xi_share_a: f64,
}

/// Candidate allocations of the excess-noise pool to Alice's link.
const XI_SPLITS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Cap on the effective cloner variance. Splits that would push `omega`
/// beyond it are clamped; reaching the cap requires a pathological
/// combination of near-lossless link and large inferred noise.
const OMEGA_CAP: f64 = 1e6;

/// Inverts the relay-variance closed forms at the worst-case triple,
/// pushing each physical parameter in the direction that favors Eve:
///
/// * link ratios `tau/nu` are recovered from the displaced variances
///   (`x = V (1 - (tau/2) V / nu)`), using the widened `x_max`, `y_max`
///   (smaller ratio, i.e. lossier link);
/// * the ratios are scaled by the low end `nu/(1+t)` of the relay
///   variance, again shrinking `tau`;
/// * the excess-noise pool is recovered from
///   `xi_tot = 2(nu - 1) - nu (r_A V_A + r_B V_B)` at the *high* end
///   `nu/(1-t)` with point-estimate ratios, enlarging it by about `2t`.
///
/// This is a calibrated monotone-pessimistic point mapping, not a
/// supremum over the whole confidence region; each parameter is shifted
/// adversarially through its own bound.
pub fn invert_worst_case(
    wc: &WorstCaseCM,
    vmod_a: f64,
    vmod_b: f64,
    nu_hat: f64,
    nominal_xi_share_a: f64,
) -> Result<WorstCaseModel> {
    if !(vmod_a > 0.0 && vmod_b > 0.0) {
        return Err(CoreError::Domain(
            "modulation variances must be positive to invert the attack".into(),
        ));
    }
    if !(nu_hat > 1.0) {
        return Err(CoreError::Domain(format!(
            "relay variance estimate must exceed 1 SNU, got {nu_hat}"
        )));
    }
    if !(0.0..=1.0).contains(&nominal_xi_share_a) {
        return Err(CoreError::Domain(format!(
            "noise share must lie in [0, 1], got {nominal_xi_share_a}"
        )));
    }
    let t = wc.t;
    let ratio = |x: f64, v: f64| 2.0 * (1.0 - x / v) / v;
    // Pessimized ratios (from the widened variances) and point ratios
    // (widening removed).
    let r_eff_a = ratio(wc.x_max, vmod_a).max(0.0);
    let r_eff_b = ratio(wc.y_max, vmod_b).max(0.0);
    let r_hat_a = ratio(wc.x_max * (1.0 - t), vmod_a).max(0.0);
    let r_hat_b = ratio(wc.y_max * (1.0 - t), vmod_b).max(0.0);
    let nu_lo = nu_hat / (1.0 + t);
    let nu_up = nu_hat / (1.0 - t);
    let tau_a = (r_eff_a * nu_lo).clamp(0.0, 1.0);
    let tau_b = (r_eff_b * nu_lo).clamp(0.0, 1.0);
    let xi_total =
        (2.0 * (nu_up - 1.0) - nu_up * (r_hat_a * vmod_a + r_hat_b * vmod_b)).max(0.0);
    Ok(WorstCaseModel {
        vmod_a,
        vmod_b,
        tau_a,
        tau_b,
        xi_total,
        nominal_xi_share_a,
    })
}

/// Eve's Holevo information maximized over the admissible allocations of
/// the excess-noise pool between the two links.
pub fn i_be_worst_case(model: &WorstCaseModel, side: ReconciliationSide) -> Result<f64> {
    let mut best: Option<f64> = None;
    for share in XI_SPLITS.iter().copied().chain([model.nominal_xi_share_a]) {
        let xi_a = share * model.xi_total;
        let xi_b = (1.0 - share) * model.xi_total;
        let omega = |xi: f64, tau: f64| -> Option<f64> {
            if xi <= 1e-12 {
                return Some(1.0);
            }
            if 1.0 - tau < 1e-12 {
                return None; // lossless link cannot carry excess noise
            }
            Some((1.0 + xi / (1.0 - tau)).min(OMEGA_CAP))
        };
        let (Some(omega_a), Some(omega_b)) =
            (omega(xi_a, model.tau_a), omega(xi_b, model.tau_b))
        else {
            continue;
        };
        let params = ScenarioParams {
            vmod_a: model.vmod_a,
            vmod_b: model.vmod_b,
            tau_a: model.tau_a,
            tau_b: model.tau_b,
            omega_a,
            omega_b,
            n: 1,
            d: 5,
            beta: 1.0,
        };
        let chi = holevo_bound_mdi_with_side(&params, side)?;
        best = Some(best.map_or(chi, |b: f64| b.max(chi)));
    }
    best.ok_or_else(|| {
        CoreError::Numerical(
            "no admissible excess-noise split: both links are lossless but noise was inferred"
                .into(),
        )
    })
}

/// Asymptotic rate point: `r0 = beta I_AB - I_BE` with both informations
/// evaluated on the worst-case parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymptoticPoint {
    pub r0: f64,
    pub i_ab: f64,
    pub i_be: f64,
}

/// Evaluates `r0 = beta I_AB - I_BE` on a worst-case triple and its
/// inverted attack model. May be negative.
pub fn asymptotic_rate(
    wc: &WorstCaseCM,
    model: &WorstCaseModel,
    beta: f64,
    side: ReconciliationSide,
) -> Result<AsymptoticPoint> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(CoreError::Domain(format!(
            "beta must lie in (0, 1], got {beta}"
        )));
    }
    let i_ab = gaussian_mutual_information(wc.x_max, wc.y_max, wc.z_min)?;
    let i_be = i_be_worst_case(model, side)?;
    Ok(AsymptoticPoint {
        r0: beta * i_ab - i_be,
        i_ab,
        i_be,
    })
}

/// How the moments feeding parameter estimation are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnalysisMode {
    /// Population moments from the closed forms (fast, deterministic).
    #[default]
    Analytic,
    /// Monte Carlo moments from the full sampling pipeline.
    Simulate,
}

/// Coherent-attack analysis settings: the target `eps''`, the
/// error-correction success probability, and the de Finetti parameter
/// (`None` defaults to `K = n`, the conservative reading of `K ~ n`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoherentSpec {
    pub target_eps_double_prime: f64,
    pub p: f64,
    pub big_k: Option<u64>,
}

/// Full configuration of one finite-size analysis point.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisSpec {
    pub side: ReconciliationSide,
    /// Budget for the collective-attack rate; `None` skips it.
    pub collective: Option<SecurityBudget>,
    /// Settings for the coherent-attack rate; `None` skips it.
    pub coherent: Option<CoherentSpec>,
    /// Optimize the modulation variance (shared by both parties). When
    /// false, the template's `vmod_a`/`vmod_b` are used as given.
    pub optimize_vmod: bool,
    pub mode: AnalysisMode,
    /// Seed for [`AnalysisMode::Simulate`]; ignored in analytic mode.
    pub seed: u64,
}

/// One finite-size result row. Rates that were not requested are NaN;
/// rates whose analysis aborted (block too small, security blow-up) are
/// reported as 0 with the reason recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub n: u64,
    pub d: u32,
    pub r_asymptotic: f64,
    pub r_collective: f64,
    pub r_coherent: f64,
    pub i_ab: f64,
    pub i_be: f64,
    pub vmod_opt: f64,
    pub k_opt: u64,
    pub eps_prime: f64,
    pub eps_double_prime: f64,
    pub t: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub z_min: f64,
    /// True when at least one requested analysis produced a rate.
    pub feasible: bool,
    /// Why an analysis aborted, when one did.
    pub abort_reason: Option<String>,
}

impl RateReport {
    /// "ok", or "abort:<reason>" for flagged rows.
    pub fn status(&self) -> String {
        match &self.abort_reason {
            None => "ok".to_string(),
            Some(r) => format!("abort:{r}"),
        }
    }
}

struct ModeEval {
    rate: f64,
    asy: AsymptoticPoint,
    wc: WorstCaseCM,
    k: u64,
    eps_double_prime: f64,
}

fn moments_for(
    params: &ScenarioParams,
    mode: AnalysisMode,
    seed: u64,
) -> Result<(EmpiricalMoments, DisplacementCoeffs)> {
    match mode {
        AnalysisMode::Analytic => Ok((
            EmpiricalMoments::from_population(params)?,
            params.displacement_coeffs()?,
        )),
        AnalysisMode::Simulate => moments_from_simulation(params, seed),
    }
}

/// Fraction of the total excess noise sitting on Alice's link in the
/// nominal scenario; seeds the split grid of [`i_be_worst_case`].
pub fn nominal_xi_share_a(template: &ScenarioParams) -> f64 {
    let (xa, xb) = (template.xi_a(), template.xi_b());
    if xa + xb > 0.0 {
        xa / (xa + xb)
    } else {
        0.5
    }
}

#[allow(clippy::too_many_arguments)]
fn eval_point(
    template: &ScenarioParams,
    vmod: f64,
    budget: &SecurityBudget,
    side: ReconciliationSide,
    share: f64,
    coherent: Option<(u64, u64)>, // (k, K)
    mode: AnalysisMode,
    seed: u64,
) -> Result<ModeEval> {
    let params = ScenarioParams {
        vmod_a: vmod,
        vmod_b: vmod,
        ..*template
    };
    params.validate()?;
    let (m, coeffs) = moments_for(&params, mode, seed)?;
    let wc = worst_case_cm(&m, &coeffs, budget.eps_pe)?;
    let model = invert_worst_case(&wc, vmod, vmod, m.bell_variance_estimate(), share)?;
    let asy = asymptotic_rate(&wc, &model, params.beta, side)?;
    match coherent {
        None => {
            let br = collective_rate(asy.r0, params.n, budget, params.d)?;
            Ok(ModeEval {
                rate: br.r,
                asy,
                wc,
                k: 0,
                eps_double_prime: f64::NAN,
            })
        }
        Some((k, big_k)) => {
            let (br, eps2) = coherent_rate(asy.r0, params.n, k, big_k, budget, params.d)?;
            Ok(ModeEval {
                rate: br.r,
                asy,
                wc,
                k,
                eps_double_prime: eps2,
            })
        }
    }
}

/// Candidate energy-test sizes: small fractions of the block (the rate
/// formula always prefers small `k`; the grid documents that).
fn k_grid(n: u64) -> Vec<u64> {
    let mut ks: Vec<u64> = [n / 10_000, n / 1_000, n / 100, n / 10]
        .into_iter()
        .map(|k| k.max(1))
        .filter(|&k| k < n)
        .collect();
    ks.dedup();
    ks
}

const VMOD_GRID_LO: f64 = 0.02;
const VMOD_GRID_HI: f64 = 1_000.0;
const VMOD_GRID_POINTS: usize = 24;
const GOLDEN_ITERS: usize = 48;

/// Maximizes a unimodal function on `[lo, hi]` (log axis) by coarse grid
/// plus golden-section refinement; returns the best argument and value
/// seen. Evaluation failures count as negative infinity.
fn maximize_log_axis(mut f: impl FnMut(f64) -> f64) -> (f64, f64) {
    let (llo, lhi) = (VMOD_GRID_LO.ln(), VMOD_GRID_HI.ln());
    let mut best_u = llo;
    let mut best_v = f64::NEG_INFINITY;
    let mut coarse = Vec::with_capacity(VMOD_GRID_POINTS);
    for i in 0..VMOD_GRID_POINTS {
        let u = llo + (lhi - llo) * i as f64 / (VMOD_GRID_POINTS - 1) as f64;
        let v = f(u.exp());
        coarse.push((u, v));
        if v > best_v {
            (best_u, best_v) = (u, v);
        }
    }
    if !best_v.is_finite() {
        return (best_u.exp(), best_v);
    }
    let idx = coarse.iter().position(|&(u, _)| u == best_u).unwrap();
    let mut a = coarse[idx.saturating_sub(1)].0;
    let mut b = coarse[(idx + 1).min(VMOD_GRID_POINTS - 1)].0;
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = b - (b - a) * INV_PHI;
    let mut x2 = a + (b - a) * INV_PHI;
    let mut f1 = f(x1.exp());
    let mut f2 = f(x2.exp());
    for _ in 0..GOLDEN_ITERS {
        if f1 >= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - (b - a) * INV_PHI;
            f1 = f(x1.exp());
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + (b - a) * INV_PHI;
            f2 = f(x2.exp());
        }
        let (u, v) = if f1 >= f2 { (x1, f1) } else { (x2, f2) };
        if v > best_v {
            (best_u, best_v) = (u, v);
        }
        if b - a < 1e-6 {
            break;
        }
    }
    (best_u.exp(), best_v)
}

/// Optimizes and evaluates the finite-size rates at block size `n`.
///
/// The modulation search always runs on the analytic closed forms (the
/// optimum of the population model); in [`AnalysisMode::Simulate`] the
/// final evaluation at the chosen modulation then uses Monte Carlo
/// moments. Collective and coherent analyses each get their own
/// optimization: the coherent analysis runs under its own derived budget
/// and additionally picks the energy-test size from a small grid.
pub fn optimize_rate(template: &ScenarioParams, n: u64, spec: &AnalysisSpec) -> Result<RateReport> {
    if spec.collective.is_none() && spec.coherent.is_none() {
        return Err(CoreError::Usage(
            "at least one of the collective/coherent analyses must be requested".into(),
        ));
    }
    let template = ScenarioParams { n, ..*template };
    template.validate()?;
    let share = nominal_xi_share_a(&template);
    let mut reasons: Vec<String> = Vec::new();

    // --- collective analysis ---
    let mut coll: Option<ModeEval> = None;
    let mut vmod_coll = template.vmod_a;
    if let Some(budget) = &spec.collective {
        budget.validate()?;
        match confidence_t(n, budget.eps_pe) {
            Err(CoreError::BlockTooSmall(_)) => {
                reasons.push("collective-block-too-small".into())
            }
            Err(e) => return Err(e),
            Ok(_) => {
                if spec.optimize_vmod {
                    let (v, val) = maximize_log_axis(|vm| {
                        eval_point(
                            &template,
                            vm,
                            budget,
                            spec.side,
                            share,
                            None,
                            AnalysisMode::Analytic,
                            0,
                        )
                        .map(|e| e.rate)
                        .unwrap_or(f64::NEG_INFINITY)
                    });
                    if val.is_finite() {
                        vmod_coll = v;
                    }
                }
                match eval_point(
                    &template,
                    vmod_coll,
                    budget,
                    spec.side,
                    share,
                    None,
                    spec.mode,
                    spec.seed,
                ) {
                    Ok(e) => coll = Some(e),
                    Err(CoreError::BlockTooSmall(_)) => {
                        reasons.push("collective-block-too-small".into())
                    }
                    Err(e) if spec.optimize_vmod => {
                        reasons.push(format!("collective-no-feasible-vmod ({e})"))
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }

    // --- coherent analysis ---
    let mut coh: Option<ModeEval> = None;
    let mut vmod_coh = template.vmod_a;
    let mut coh_budget: Option<SecurityBudget> = None;
    if let Some(cs) = &spec.coherent {
        let big_k = cs.big_k.unwrap_or(n);
        let budget = budget_for_target(cs.target_eps_double_prime, big_k, cs.p)?;
        coh_budget = Some(budget);
        match confidence_t(n, budget.eps_pe) {
            Err(CoreError::BlockTooSmall(_)) => reasons.push("coherent-block-too-small".into()),
            Err(e) => return Err(e),
            Ok(_) => {
                let ks = k_grid(n);
                if ks.is_empty() {
                    reasons.push("coherent-block-too-small".into());
                } else {
                    let best_k_at = |vm: f64| -> (u64, f64) {
                        ks.iter()
                            .map(|&k| {
                                let r = eval_point(
                                    &template,
                                    vm,
                                    &budget,
                                    spec.side,
                                    share,
                                    Some((k, big_k)),
                                    AnalysisMode::Analytic,
                                    0,
                                )
                                .map(|e| e.rate)
                                .unwrap_or(f64::NEG_INFINITY);
                                (k, r)
                            })
                            .max_by(|a, b| a.1.total_cmp(&b.1))
                            .unwrap()
                    };
                    if spec.optimize_vmod {
                        let (v, val) = maximize_log_axis(|vm| best_k_at(vm).1);
                        if val.is_finite() {
                            vmod_coh = v;
                        }
                    }
                    let (k_opt, k_val) = best_k_at(vmod_coh);
                    if !k_val.is_finite() {
                        reasons.push("coherent-no-feasible-vmod".into());
                    } else {
                        match eval_point(
                            &template,
                            vmod_coh,
                            &budget,
                            spec.side,
                            share,
                            Some((k_opt, big_k)),
                            spec.mode,
                            spec.seed,
                        ) {
                            Ok(e) => coh = Some(e),
                            Err(CoreError::BlockTooSmall(_)) => {
                                reasons.push("coherent-block-too-small".into())
                            }
                            Err(CoreError::Domain(msg)) if msg.contains("eps''") => {
                                reasons.push("coherent-eps-double-prime-blow-up".into())
                            }
                            Err(e) => return Err(e),
                        }
                    }
                }
            }
        }
    }

    // --- assemble the report ---
    let primary = coll.as_ref().or(coh.as_ref());
    let feasible = primary.is_some();
    let (r_asymptotic, i_ab, i_be, t, x_max, y_max, z_min) = match primary {
        Some(e) => (
            e.asy.r0,
            e.asy.i_ab,
            e.asy.i_be,
            e.wc.t,
            e.wc.x_max,
            e.wc.y_max,
            e.wc.z_min,
        ),
        None => (0.0, 0.0, 0.0, f64::NAN, f64::NAN, f64::NAN, f64::NAN),
    };
    let r_collective = match (&spec.collective, &coll) {
        (None, _) => f64::NAN,
        (Some(_), Some(e)) => e.rate,
        (Some(_), None) => 0.0,
    };
    let r_coherent = match (&spec.coherent, &coh) {
        (None, _) => f64::NAN,
        (Some(_), Some(e)) => e.rate,
        (Some(_), None) => 0.0,
    };
    let eps_prime = spec
        .collective
        .as_ref()
        .map(|b| b.eps_prime())
        .or(coh_budget.map(|b| b.eps_prime()))
        .unwrap_or(f64::NAN);
    let eps_double_prime = match (&spec.coherent, &coh) {
        (None, _) => f64::NAN,
        (Some(_), Some(e)) => e.eps_double_prime,
        (Some(_), None) => 0.0,
    };
    Ok(RateReport {
        n,
        d: template.d,
        r_asymptotic,
        r_collective,
        r_coherent,
        i_ab,
        i_be,
        vmod_opt: if coll.is_some() { vmod_coll } else { vmod_coh },
        k_opt: coh.as_ref().map_or(0, |e| e.k),
        eps_prime,
        eps_double_prime,
        t,
        x_max,
        y_max,
        z_min,
        feasible,
        abort_reason: if reasons.is_empty() {
            None
        } else {
            Some(reasons.join("; "))
        },
    })
}
