//! Epoch security parameters: closed-form failure bounds for the dual-layer
//! committee structure and a solver for the minimum safe proposer-shard size.
//!
//! All probabilities are computed exactly with big-integer numerator sums
//! over a shared binomial denominator and converted to f64 once at the end,
//! so no intermediate floating-point error accumulates.

use num::bigint::BigInt;
use num::{One, Signed, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sizing of one epoch: the whole network and its two committee layers.
///
/// Invariants: `fc_size * fc_count == network_size` and
/// `ps_size * ps_per_fc == fc_size`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochParams {
    /// Total node count N.
    pub network_size: u64,
    /// Fraction of malicious nodes f; the malicious population is ⌊f·N⌋.
    pub malicious_fraction: f64,
    /// Number of finalizer committees C.
    pub fc_count: u64,
    /// Finalizer committee size n = N / C.
    pub fc_size: u64,
    /// Proposer shards per finalizer committee K.
    pub ps_per_fc: u64,
    /// Proposer shard size m = n / K.
    pub ps_size: u64,
    /// Failure probability the epoch must stay under (2^-17 by default).
    pub target_epsilon: f64,
}

/// Default failure target: 2^-17.
pub const DEFAULT_EPSILON: f64 = 1.0 / (1u64 << 17) as f64;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("network size {n} is not divisible by fc count {c}")]
    FcCountMismatch { n: u64, c: u64 },
    #[error("fc size {n} is not divisible by ps-per-fc {k}")]
    PsSizeMismatch { n: u64, k: u64 },
    #[error("zero-sized component: {0}")]
    Zero(&'static str),
    #[error("malicious fraction {0} outside [0, 1)")]
    BadFraction(f64),
}

/// No proposer-shard size divides the committee evenly while keeping the
/// system failure bound under the target.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("no feasible proposer shard size for fc_size {fc_size} under target epsilon")]
pub struct NoFeasibleSize {
    pub fc_size: u64,
}

impl EpochParams {
    pub fn new(
        network_size: u64,
        malicious_fraction: f64,
        fc_count: u64,
        ps_per_fc: u64,
        target_epsilon: f64,
    ) -> Result<EpochParams, ParamError> {
        if network_size == 0 {
            return Err(ParamError::Zero("network_size"));
        }
        if fc_count == 0 {
            return Err(ParamError::Zero("fc_count"));
        }
        if ps_per_fc == 0 {
            return Err(ParamError::Zero("ps_per_fc"));
        }
        if !(0.0..1.0).contains(&malicious_fraction) {
            return Err(ParamError::BadFraction(malicious_fraction));
        }
        if network_size % fc_count != 0 {
            return Err(ParamError::FcCountMismatch {
                n: network_size,
                c: fc_count,
            });
        }
        let fc_size = network_size / fc_count;
        if fc_size % ps_per_fc != 0 {
            return Err(ParamError::PsSizeMismatch {
                n: fc_size,
                k: ps_per_fc,
            });
        }
        Ok(EpochParams {
            network_size,
            malicious_fraction,
            fc_count,
            fc_size,
            ps_per_fc,
            ps_size: fc_size / ps_per_fc,
            target_epsilon,
        })
    }

    /// Malicious population ⌊f·N⌋.
    pub fn malicious_count(&self) -> u64 {
        (self.malicious_fraction * self.network_size as f64).floor() as u64
    }

    /// Total number of proposer shards C·K.
    pub fn shard_count(&self) -> u64 {
        self.fc_count * self.ps_per_fc
    }
}

/// Intra-shard vote threshold: more than half the shard, ⌊m/2⌋ + 1.
pub fn quorum_ps(ps_size: u64) -> u64 {
    ps_size / 2 + 1
}

/// Finalizer vote threshold: ⌊2n/3⌋ + 1.
pub fn quorum_fc(fc_size: u64) -> u64 {
    2 * fc_size / 3 + 1
}

/// Breakdown of the per-committee and whole-system failure bounds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FailureReport {
    /// Probability a committee draw seats ≥ ⌊n/3⌋ malicious nodes.
    pub fc_case1: f64,
    /// Probability a proposer shard drawn from a below-threshold committee
    /// seats a malicious majority.
    pub ps_fail: f64,
    /// Union bound over the K shards of one committee.
    pub fc_case2_upper: f64,
    /// Per-committee failure bound (case 1 + case 2, clamped to 1).
    pub fc_upper: f64,
    /// Whole-system bound: C committees, clamped to 1.
    pub system_upper: f64,
    pub quorum_ps: u64,
    pub quorum_fc: u64,
}

fn big(v: u64) -> BigInt {
    BigInt::from(v)
}

/// C(n, k) as a big integer; zero when out of range.
fn binomial(n: u64, k: u64) -> BigInt {
    if k > n {
        return BigInt::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigInt::one();
    for i in 0..k {
        acc = acc * big(n - i) / big(i + 1);
    }
    acc
}

/// Exact ratio of two big integers as f64, safe for values far beyond the
/// f64 exponent range (num's to_f64 on the parts would overflow to inf).
fn ratio_to_f64(num: &BigInt, den: &BigInt) -> f64 {
    if num.is_zero() {
        return 0.0;
    }
    assert!(num.is_positive() && den.is_positive());
    let nb = num.bits() as i64;
    let db = den.bits() as i64;
    // Keep ~80 significant bits of each side, track the dropped exponent.
    let ns = (nb - 80).max(0);
    let ds = (db - 80).max(0);
    let nf = f64_of(num >> ns);
    let df = f64_of(den >> ds);
    let exp = (ns - ds) as i32;
    if exp < -1300 {
        return 0.0; // underflows f64 even before the mantissa ratio
    }
    (nf / df) * 2f64.powi(exp)
}

fn f64_of(v: BigInt) -> f64 {
    num::ToPrimitive::to_f64(&v).expect("shifted big integer fits f64")
}

/// Hypergeometric pmf: probability of exactly `observed` marked items in a
/// uniform draw of `draws` from a population with `marked` marked items.
/// Out-of-support arguments yield 0.
pub fn hypergeom_pmf(population: u64, marked: u64, draws: u64, observed: u64) -> f64 {
    assert!(marked <= population, "marked exceeds population");
    assert!(draws <= population, "draws exceed population");
    if observed > draws || observed > marked || draws - observed > population - marked {
        return 0.0;
    }
    let num = binomial(marked, observed) * binomial(population - marked, draws - observed);
    ratio_to_f64(&num, &binomial(population, draws))
}

/// Walks binomial values C(n, k), C(n, k±1), ... by exact multiply/divide,
/// avoiding a from-scratch product per term.
struct BinomWalker {
    n: u64,
    k: u64,
    val: BigInt,
}

impl BinomWalker {
    fn new(n: u64, k: u64) -> BinomWalker {
        BinomWalker {
            n,
            k,
            val: binomial(n, k),
        }
    }

    fn get(&self) -> &BigInt {
        &self.val
    }

    /// Advance k by one: C(n, k+1) = C(n, k) · (n−k) / (k+1).
    fn inc(&mut self) {
        if self.k >= self.n {
            self.val = BigInt::zero();
            self.k += 1;
            return;
        }
        self.val = &self.val * big(self.n - self.k) / big(self.k + 1);
        self.k += 1;
    }

    /// Retreat k by one: C(n, k−1) = C(n, k) · k / (n−k+1).
    fn dec(&mut self) {
        assert!(self.k > 0);
        if self.k > self.n {
            self.k -= 1;
            self.val = if self.k == self.n {
                BigInt::one()
            } else {
                BigInt::zero()
            };
            return;
        }
        self.val = &self.val * big(self.k) / big(self.n - self.k + 1);
        self.k -= 1;
    }
}

/// Case 1: the committee draw itself seats at least ⌊n/3⌋ malicious nodes,
/// breaking the BFT threshold. Σ_{x=⌊n/3⌋}^{n} Pr[X = x] with
/// X ~ Hypergeom(N, ⌊f·N⌋, n).
pub fn fc_case1_prob(params: &EpochParams) -> f64 {
    let n = params.fc_size;
    let nn = params.network_size;
    let mal = params.malicious_count();
    let lo = n / 3;
    let hi = n.min(mal);
    if lo > hi {
        return 0.0;
    }
    // Numerators share the denominator C(N, n); sum them exactly.
    let mut marked = BinomWalker::new(mal, lo);
    let mut rest = BinomWalker::new(nn - mal, n - lo);
    let mut sum = BigInt::zero();
    for x in lo..=hi {
        if n - x <= nn - mal {
            sum += marked.get() * rest.get();
        }
        if x < hi {
            marked.inc();
            rest.dec();
        }
    }
    ratio_to_f64(&sum, &binomial(nn, n))
}

/// Case 2 kernel: the committee stayed below its ⌊n/3⌋ threshold with x
/// malicious members, yet the shard of m drawn from it seats a malicious
/// half or more. Outer sum over x weighted by the committee draw pmf, inner
/// hypergeometric draw of the shard from the committee:
///
/// Σ_{x=1}^{⌊n/3⌋−1} Pr[X = x] · Σ_{y=⌊m/2⌋}^{m} C(x,y)·C(n−x,m−y) / C(n,m)
///
/// Terms with y > x or m−y > n−x are zero. The shared denominator is
/// C(N,n)·C(n,m); everything above it is summed in exact integers.
pub fn ps_fail_given_honest_fc(params: &EpochParams) -> f64 {
    let n = params.fc_size;
    let m = params.ps_size;
    let nn = params.network_size;
    let mal = params.malicious_count();
    let x_hi = (n / 3).saturating_sub(1).min(mal);
    let y_lo = m / 2;
    if x_hi < 1 || y_lo > m {
        return 0.0;
    }
    let mut weight_marked = BinomWalker::new(mal, 1);
    let mut weight_rest = BinomWalker::new(nn - mal, n - 1);
    let mut total = BigInt::zero();
    for x in 1..=x_hi {
        // Inner sum only contributes when the shard can seat y ≥ ⌊m/2⌋
        // malicious members out of the committee's x.
        if x >= y_lo && n - x >= m.saturating_sub(x) {
            let y_hi = m.min(x);
            let mut from_marked = BinomWalker::new(x, y_lo);
            let mut from_rest = BinomWalker::new(n - x, m - y_lo);
            let mut inner = BigInt::zero();
            for y in y_lo..=y_hi {
                if m - y <= n - x {
                    inner += from_marked.get() * from_rest.get();
                }
                if y < y_hi {
                    from_marked.inc();
                    from_rest.dec();
                }
            }
            if !inner.is_zero() && n - x <= nn - mal {
                total += weight_marked.get() * weight_rest.get() * inner;
            }
        }
        if x < x_hi {
            weight_marked.inc();
            weight_rest.dec();
        }
    }
    let den = binomial(nn, n) * binomial(n, m);
    ratio_to_f64(&total, &den)
}

/// Per-committee failure bound: case 1 plus a union bound of case 2 over the
/// K proposer shards, clamped to 1.
pub fn fc_failure_upper(params: &EpochParams) -> FailureReport {
    let fc_case1 = fc_case1_prob(params);
    let ps_fail = ps_fail_given_honest_fc(params);
    let fc_case2_upper = (params.ps_per_fc as f64 * ps_fail).min(1.0);
    let fc_upper = (fc_case1 + fc_case2_upper).min(1.0);
    let system_upper = (params.fc_count as f64 * fc_upper).min(1.0);
    FailureReport {
        fc_case1,
        ps_fail,
        fc_case2_upper,
        fc_upper,
        system_upper,
        quorum_ps: quorum_ps(params.ps_size),
        quorum_fc: quorum_fc(params.fc_size),
    }
}

/// Whole-system failure bound: C identical committees, union bound,
/// clamped to 1.
pub fn system_failure_upper(params: &EpochParams) -> f64 {
    fc_failure_upper(params).system_upper
}

/// Smallest proposer-shard size m dividing `fc_size` whose system failure
/// bound stays at or under `epsilon`. The bound is monotone non-increasing
/// in m, so the first feasible divisor is the answer.
pub fn solve_min_ps_size(
    network_size: u64,
    malicious_fraction: f64,
    fc_size: u64,
    epsilon: f64,
) -> Result<u64, NoFeasibleSize> {
    assert!(
        fc_size > 0 && network_size % fc_size == 0,
        "fc_size must divide network_size"
    );
    let fc_count = network_size / fc_size;
    let mut m = 1;
    while m <= fc_size {
        if fc_size % m == 0 {
            let params = EpochParams::new(
                network_size,
                malicious_fraction,
                fc_count,
                fc_size / m,
                epsilon,
            )
            .expect("divisor-derived params are consistent");
            if system_failure_upper(&params) <= epsilon {
                return Ok(m);
            }
        }
        m += 1;
    }
    Err(NoFeasibleSize { fc_size })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: u64, f: f64, c: u64, k: u64) -> EpochParams {
        EpochParams::new(n, f, c, k, DEFAULT_EPSILON).unwrap()
    }

    /// Exhaustive subset enumeration; the independent oracle for the pmf.
    fn enumerated_pmf(population: u64, marked: u64, draws: u64, observed: u64) -> f64 {
        let mut hit = 0u64;
        let mut total = 0u64;
        for mask in 0u32..(1 << population) {
            if mask.count_ones() as u64 != draws {
                continue;
            }
            total += 1;
            let in_marked = (mask & ((1u32 << marked) - 1)).count_ones() as u64;
            if in_marked == observed {
                hit += 1;
            }
        }
        hit as f64 / total as f64
    }

    #[test]
    fn pmf_matches_exhaustive_enumeration_small_populations() {
        for population in 1..=9 {
            for marked in 0..=population {
                for draws in 1..=population {
                    for observed in 0..=draws {
                        let got = hypergeom_pmf(population, marked, draws, observed);
                        let want = enumerated_pmf(population, marked, draws, observed);
                        assert!(
                            (got - want).abs() < 1e-12,
                            "pmf({population},{marked},{draws},{observed}) = {got}, enumeration {want}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn pmf_known_value() {
        // 2 marked of 5, draw 2, see 1: C(2,1)·C(3,1)/C(5,2) = 6/10.
        assert!((hypergeom_pmf(5, 2, 2, 1) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn pmf_out_of_support_is_zero() {
        assert_eq!(hypergeom_pmf(10, 3, 4, 4), 0.0); // more observed than marked
        assert_eq!(hypergeom_pmf(10, 9, 4, 0), 0.0); // cannot avoid marked
    }

    #[test]
    fn case1_whole_network_committee_is_certain() {
        // The single committee is the whole 12-node network; X is exactly 6,
        // which is ≥ ⌊12/3⌋.
        let p = params(12, 0.5, 1, 1);
        assert!((fc_case1_prob(&p) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn case1_tail_sums_pmf() {
        let p = params(20, 0.3, 2, 1);
        let mal = p.malicious_count();
        let want: f64 = (p.fc_size / 3..=p.fc_size)
            .map(|x| hypergeom_pmf(p.network_size, mal, p.fc_size, x))
            .sum();
        assert!((fc_case1_prob(&p) - want).abs() < 1e-12);
    }

    #[test]
    fn shard_equal_to_committee_cannot_fail_case2() {
        // m = n: every reachable x is below ⌊m/2⌋, so the inner sum is empty.
        let p = params(640, 0.25, 2, 1);
        assert_eq!(ps_fail_given_honest_fc(&p), 0.0);
    }

    #[test]
    fn quorum_thresholds() {
        assert_eq!(quorum_ps(16), 9);
        assert_eq!(quorum_ps(80), 41);
        assert_eq!(quorum_ps(86), 44);
        assert_eq!(quorum_fc(320), 214);
        assert_eq!(quorum_fc(430), 287);
        assert_eq!(quorum_fc(3), 3);
        assert_eq!(quorum_fc(4), 3);
    }

    #[test]
    fn reference_row_bound() {
        // First reference sizing: the bound lands at 4.3e-6.
        let p = params(640, 0.25, 2, 4);
        let rep = fc_failure_upper(&p);
        assert!(rep.system_upper < 7.6e-6, "bound {}", rep.system_upper);
        assert!(
            (rep.system_upper - 4.3e-6).abs() / 4.3e-6 < 0.05,
            "bound {} strays from 4.3e-6",
            rep.system_upper
        );
        assert!((rep.fc_upper - rep.system_upper / 2.0).abs() < 1e-12);
    }

    #[test]
    fn solver_recovers_reference_shard_size() {
        assert_eq!(solve_min_ps_size(640, 0.25, 320, 7.6e-6), Ok(80));
    }

    #[test]
    fn solver_reports_infeasible() {
        // Half the 8-node network malicious: even m = n = 8 fails.
        let err = solve_min_ps_size(8, 0.49, 8, 1e-6).unwrap_err();
        assert_eq!(err.fc_size, 8);
    }

    #[test]
    fn bound_monotone_in_shard_size() {
        // Over the divisors of n = 32 at N = 64, the system bound never
        // increases as m grows.
        let mut last = f64::INFINITY;
        for m in [1u64, 2, 4, 8, 16, 32] {
            let p = params(64, 0.25, 2, 32 / m);
            let b = system_failure_upper(&p);
            assert!(b <= last + 1e-15, "bound rose at m={m}: {b} > {last}");
            last = b;
        }
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        assert!(EpochParams::new(10, 0.2, 3, 1, 1e-5).is_err());
        assert!(EpochParams::new(12, 0.2, 3, 3, 1e-5).is_err());
        assert!(EpochParams::new(12, 1.0, 3, 2, 1e-5).is_err());
    }
}
