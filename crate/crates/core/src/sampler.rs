//! Monte-Carlo estimators over a generative model.
//!
//! Value estimates use geometric-horizon rollouts: with
//! `P(T = k) = (1 - gamma) gamma^(k-1)` for `k >= 1`, the undiscounted sum
//! `h(s_0,a_0) + ... + h(s_{T-1},a_{T-1})` is an unbiased estimate of the
//! discounted value. Estimators take the policy as an explicit table; the
//! solver builds it once per outer iteration.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cmdp::{Cmdp, PolicyMatrix, Signal};
use crate::error::{Error, Result};

/// Seeded random stream. Substreams for different outer iterations are
/// independent ChaCha streams under the same key.
#[derive(Debug, Clone)]
pub struct RngStream(ChaCha8Rng);

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Stream `index` of the family keyed by `seed`. Index 0 is reserved for
    /// [`RngStream::new`].
    pub fn substream(seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index.wrapping_add(1));
        Self(rng)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

/// Sampling access to a CMDP that counts every transition it draws.
#[derive(Debug)]
pub struct GenerativeModel<'a> {
    cmdp: &'a Cmdp,
    transitions: AtomicU64,
}

impl<'a> GenerativeModel<'a> {
    pub fn new(cmdp: &'a Cmdp) -> Self {
        Self {
            cmdp,
            transitions: AtomicU64::new(0),
        }
    }

    pub fn cmdp(&self) -> &'a Cmdp {
        self.cmdp
    }

    /// Transitions drawn so far.
    pub fn transitions(&self) -> u64 {
        self.transitions.load(Ordering::Relaxed)
    }

    pub fn draw_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.cmdp.rho, rng)
    }

    pub fn draw_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        self.transitions.fetch_add(1, Ordering::Relaxed);
        sample_categorical(self.cmdp.next_state_probs(s, a), rng)
    }

    pub fn signal(&self, sig: Signal, s: usize, a: usize) -> Result<f64> {
        Ok(self.cmdp.signal_table(sig)?[self.cmdp.pair(s, a)])
    }

    fn check_policy(&self, pi: &PolicyMatrix) -> Result<()> {
        if pi.num_states() != self.cmdp.num_states || pi.num_actions() != self.cmdp.num_actions {
            return Err(Error::DimensionMismatch(format!(
                "policy is {}x{}, CMDP is {}x{}",
                pi.num_states(),
                pi.num_actions(),
                self.cmdp.num_states,
                self.cmdp.num_actions
            )));
        }
        Ok(())
    }
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// `T ~ Geometric(1 - gamma)` on `{1, 2, ...}`.
pub fn draw_geometric_horizon<R: Rng + ?Sized>(gamma: f64, rng: &mut R) -> u64 {
    let mut t = 1;
    while rng.random::<f64>() < gamma {
        t += 1;
    }
    t
}

fn rollout<R: Rng + ?Sized>(
    m: &GenerativeModel<'_>,
    pi: &PolicyMatrix,
    table: &[f64],
    mut s: usize,
    mut a: usize,
    rng: &mut R,
) -> f64 {
    let c = m.cmdp;
    let horizon = draw_geometric_horizon(c.gamma, rng);
    let mut total = table[c.pair(s, a)];
    for _ in 1..horizon {
        s = m.draw_next(s, a, rng);
        a = sample_categorical(pi.row(s), rng);
        total += table[c.pair(s, a)];
    }
    total
}

/// Unbiased estimate of `Q_h(s, a)` from one geometric-horizon rollout.
pub fn estimate_q<R: Rng + ?Sized>(
    m: &GenerativeModel<'_>,
    pi: &PolicyMatrix,
    s: usize,
    a: usize,
    sig: Signal,
    rng: &mut R,
) -> Result<f64> {
    m.check_policy(pi)?;
    let table = m.cmdp.signal_table(sig)?;
    Ok(rollout(m, pi, table, s, a, rng))
}

/// Unbiased estimate of `V_h(s)`; the first action is drawn from the policy.
pub fn estimate_v<R: Rng + ?Sized>(
    m: &GenerativeModel<'_>,
    pi: &PolicyMatrix,
    s: usize,
    sig: Signal,
    rng: &mut R,
) -> Result<f64> {
    m.check_policy(pi)?;
    let table = m.cmdp.signal_table(sig)?;
    let a = sample_categorical(pi.row(s), rng);
    Ok(rollout(m, pi, table, s, a, rng))
}

/// Draws `s ~ d_rho^pi`: start from `rho` and, before every action, stop
/// with probability `1 - gamma`.
pub fn sample_visitation_state<R: Rng + ?Sized>(
    m: &GenerativeModel<'_>,
    pi: &PolicyMatrix,
    rng: &mut R,
) -> usize {
    let stop = 1.0 - m.cmdp.gamma;
    let mut s = m.draw_initial(rng);
    loop {
        if rng.random::<f64>() < stop {
            return s;
        }
        let a = sample_categorical(pi.row(s), rng);
        s = m.draw_next(s, a, rng);
    }
}

/// `A_hat = [Q_r - V_r] + sum_i lambda_i [Q_gi - V_gi]`, each term from its
/// own rollout. Constraints with `lambda_i = 0` contribute nothing and are
/// not sampled.
pub fn estimate_lagrangian_advantage<R: Rng + ?Sized>(
    m: &GenerativeModel<'_>,
    pi: &PolicyMatrix,
    lambda: &[f64],
    s: usize,
    a: usize,
    rng: &mut R,
) -> Result<f64> {
    m.check_policy(pi)?;
    if lambda.len() != m.cmdp.num_constraints() {
        return Err(Error::DimensionMismatch(format!(
            "lambda has {} entries, CMDP has {} constraints",
            lambda.len(),
            m.cmdp.num_constraints()
        )));
    }
    let advantage = |table: &[f64], rng: &mut R| {
        let q = rollout(m, pi, table, s, a, rng);
        let first = sample_categorical(pi.row(s), rng);
        q - rollout(m, pi, table, s, first, rng)
    };
    let mut total = advantage(&m.cmdp.reward, rng);
    for (l, g) in lambda.iter().zip(&m.cmdp.constraints) {
        if *l != 0.0 {
            total += l * advantage(g, rng);
        }
    }
    Ok(total)
}

/// `J_hat_gi = (1/N) sum_n V_hat_gi(s_n)` with `s_n ~ rho`.
pub fn estimate_constraint_return<R: Rng + ?Sized>(
    m: &GenerativeModel<'_>,
    pi: &PolicyMatrix,
    constraint: usize,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Invalid("constraint estimate needs at least one sample".into()));
    }
    let sig = Signal::Constraint(constraint);
    let mut total = 0.0;
    for _ in 0..samples {
        let s = m.draw_initial(rng);
        total += estimate_v(m, pi, s, sig, rng)?;
    }
    Ok(total / samples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::{exact_action_values, exact_return, exact_state_values, exact_visitation};
    use crate::cmdp::{fixtures, random_cmdp, CmdpSpec};
    use crate::policy::exact_lagrangian_advantage;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    struct Moments {
        n: f64,
        sum: f64,
        sum_sq: f64,
    }

    impl Moments {
        fn of(iter: impl Iterator<Item = f64>) -> Self {
            let mut m = Moments {
                n: 0.0,
                sum: 0.0,
                sum_sq: 0.0,
            };
            for x in iter {
                m.n += 1.0;
                m.sum += x;
                m.sum_sq += x * x;
            }
            m
        }
        fn mean(&self) -> f64 {
            self.sum / self.n
        }
        fn se(&self) -> f64 {
            let mean = self.mean();
            ((self.sum_sq / self.n - mean * mean).max(0.0) / self.n).sqrt()
        }
        fn assert_near(&self, expected: f64, what: &str) {
            let (mean, se) = (self.mean(), self.se());
            assert!(
                (mean - expected).abs() <= 3.0 * se + 1e-12,
                "{what}: mean {mean} vs {expected}, se {se}"
            );
        }
    }

    fn chi_square_p(counts: &[u64], probs: &[f64]) -> f64 {
        let n: u64 = counts.iter().sum();
        let mut stat = 0.0;
        let mut cells = 0;
        for (&c, &p) in counts.iter().zip(probs) {
            if p <= 0.0 {
                assert_eq!(c, 0);
                continue;
            }
            let e = p * n as f64;
            stat += (c as f64 - e).powi(2) / e;
            cells += 1;
        }
        1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat)
    }

    fn softish_policy(n: usize, m: usize, seed: u64) -> PolicyMatrix {
        let mut rng = RngStream::new(seed);
        let mut probs = Vec::new();
        for _ in 0..n {
            let row: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 0.1).collect();
            let sum: f64 = row.iter().sum();
            probs.extend(row.iter().map(|p| p / sum));
        }
        PolicyMatrix::new(n, m, probs).unwrap()
    }

    #[test]
    fn zero_discount_horizon_is_one() {
        let mut rng = RngStream::new(1);
        assert!((0..1000).all(|_| draw_geometric_horizon(0.0, &mut rng) == 1));
    }

    #[test]
    fn geometric_horizon_mean() {
        let mut rng = RngStream::new(2);
        Moments::of((0..1_000_000).map(|_| draw_geometric_horizon(0.8, &mut rng) as f64))
            .assert_near(5.0, "E[T]");
    }

    #[test]
    fn geometric_horizon_law() {
        let gamma: f64 = 0.8;
        let mut rng = RngStream::new(3);
        let mut counts = vec![0u64; 51];
        for _ in 0..1_000_000 {
            let t = draw_geometric_horizon(gamma, &mut rng) as usize;
            counts[t.min(51) - 1] += 1;
        }
        let mut probs: Vec<f64> = (1..=50).map(|k| (1.0 - gamma) * gamma.powi(k - 1)).collect();
        probs.push(gamma.powi(50));
        assert!(chi_square_p(&counts, &probs) > 0.001);
    }

    #[test]
    fn substreams_are_reproducible_and_distinct() {
        let draw = |mut r: RngStream| (0..8).map(|_| r.next_u64()).collect::<Vec<_>>();
        assert_eq!(draw(RngStream::substream(5, 3)), draw(RngStream::substream(5, 3)));
        assert_ne!(draw(RngStream::substream(5, 3)), draw(RngStream::substream(5, 4)));
        assert_ne!(draw(RngStream::substream(5, 0)), draw(RngStream::new(5)));
    }

    #[test]
    fn single_state_q_is_horizon_and_ledger_is_exact() {
        let c = fixtures::single_state(1.0, 0.8);
        let m = GenerativeModel::new(&c);
        let pi = PolicyMatrix::uniform(1, 1);
        let mut rng = RngStream::new(4);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| estimate_q(&m, &pi, 0, 0, Signal::Reward, &mut rng).unwrap())
            .collect();
        // Each rollout of length T draws T - 1 transitions.
        let expected_transitions: f64 = draws.iter().map(|t| t - 1.0).sum();
        assert_eq!(m.transitions() as f64, expected_transitions);
        Moments::of(draws.into_iter()).assert_near(5.0, "Q");
        Moments::of((0..100_000).map(|_| estimate_v(&m, &pi, 0, Signal::Reward, &mut rng).unwrap()))
            .assert_near(5.0, "V");
    }

    #[test]
    fn zero_signal_estimates_are_exactly_zero() {
        let mut c = random_cmdp(&CmdpSpec::new(4, 3, 1, 0.8), 1).unwrap();
        c.reward.iter_mut().for_each(|r| *r = 0.0);
        c.constraints[0].iter_mut().for_each(|g| *g = 0.0);
        let m = GenerativeModel::new(&c);
        let pi = PolicyMatrix::uniform(4, 3);
        let mut rng = RngStream::new(5);
        for _ in 0..100 {
            assert_eq!(estimate_q(&m, &pi, 1, 2, Signal::Reward, &mut rng).unwrap(), 0.0);
            assert_eq!(estimate_v(&m, &pi, 3, Signal::Reward, &mut rng).unwrap(), 0.0);
        }
        assert_eq!(estimate_constraint_return(&m, &pi, 0, 50, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn q_and_v_are_unbiased_on_random_instance() {
        let c = random_cmdp(&CmdpSpec::standard_preset(), 42).unwrap();
        let pi = softish_policy(10, 5, 42);
        let m = GenerativeModel::new(&c);
        let q = exact_action_values(&c, &pi, Signal::Reward).unwrap();
        let v = exact_state_values(&c, &pi, Signal::Constraint(0)).unwrap();
        let mut rng = RngStream::new(6);
        Moments::of((0..100_000).map(|_| estimate_q(&m, &pi, 3, 2, Signal::Reward, &mut rng).unwrap()))
            .assert_near(q[c.pair(3, 2)], "Q(3,2)");
        Moments::of(
            (0..100_000).map(|_| estimate_v(&m, &pi, 7, Signal::Constraint(0), &mut rng).unwrap()),
        )
        .assert_near(v[7], "V_g(7)");
    }

    #[test]
    fn chain_value_estimate() {
        let c = fixtures::two_state_chain(0.5);
        let m = GenerativeModel::new(&c);
        let pi = PolicyMatrix::uniform(2, 1);
        let mut rng = RngStream::new(7);
        Moments::of((0..100_000).map(|_| estimate_v(&m, &pi, 0, Signal::Reward, &mut rng).unwrap()))
            .assert_near(1.0, "V(s0)");
    }

    #[test]
    fn visitation_sampling_on_chain() {
        let c = fixtures::two_state_chain(0.5);
        let m = GenerativeModel::new(&c);
        let pi = PolicyMatrix::uniform(2, 1);
        let mut rng = RngStream::new(8);
        Moments::of((0..1_000_000).map(|_| (sample_visitation_state(&m, &pi, &mut rng) == 0) as u8 as f64))
            .assert_near(0.5, "Pr(s0)");
    }

    #[test]
    fn visitation_sampling_trivial_cases() {
        let c = fixtures::single_state(0.4, 0.9);
        let m = GenerativeModel::new(&c);
        let mut rng = RngStream::new(9);
        assert!((0..1000).all(|_| sample_visitation_state(&m, &PolicyMatrix::uniform(1, 1), &mut rng) == 0));

        // With gamma = 0 the sampler must return the initial state untouched.
        let mut chain = fixtures::two_state_chain(0.5);
        chain.gamma = 0.0;
        let m = GenerativeModel::new(&chain);
        assert!((0..1000).all(|_| sample_visitation_state(&m, &PolicyMatrix::uniform(2, 1), &mut rng) == 0));
        assert_eq!(m.transitions(), 0);
    }

    #[test]
    fn visitation_sampling_matches_exact_measure() {
        let c = random_cmdp(&CmdpSpec::standard_preset(), 42).unwrap();
        let pi = softish_policy(10, 5, 1);
        let m = GenerativeModel::new(&c);
        let mut rng = RngStream::new(10);
        let mut counts = vec![0u64; 10];
        for _ in 0..1_000_000 {
            counts[sample_visitation_state(&m, &pi, &mut rng)] += 1;
        }
        let exact = exact_visitation(&c, &pi).unwrap();
        assert!(chi_square_p(&counts, &exact) > 0.001);
    }

    #[test]
    fn transition_draws_match_table() {
        let c = random_cmdp(&CmdpSpec::standard_preset(), 3).unwrap();
        let m = GenerativeModel::new(&c);
        let mut rng = RngStream::new(11);
        let mut counts = vec![0u64; 10];
        for _ in 0..1_000_000 {
            counts[m.draw_next(4, 1, &mut rng)] += 1;
        }
        assert_eq!(m.transitions(), 1_000_000);
        assert!(chi_square_p(&counts, c.next_state_probs(4, 1)) > 0.001);
    }

    #[test]
    fn advantage_is_mean_zero_without_signal_variation() {
        let mut c = random_cmdp(&CmdpSpec::new(4, 3, 1, 0.8), 12).unwrap();
        c.reward.iter_mut().for_each(|r| *r = 0.5);
        let m = GenerativeModel::new(&c);
        let pi = softish_policy(4, 3, 12);
        let mut rng = RngStream::new(12);
        Moments::of(
            (0..100_000).map(|_| estimate_lagrangian_advantage(&m, &pi, &[0.0], 2, 1, &mut rng).unwrap()),
        )
        .assert_near(0.0, "A (constant reward)");

        let c = random_cmdp(&CmdpSpec::new(4, 1, 1, 0.8), 12).unwrap();
        let m = GenerativeModel::new(&c);
        let pi = PolicyMatrix::uniform(4, 1);
        Moments::of(
            (0..100_000).map(|_| estimate_lagrangian_advantage(&m, &pi, &[0.8], 2, 0, &mut rng).unwrap()),
        )
        .assert_near(0.0, "A (single action)");
    }

    #[test]
    fn advantage_is_unbiased() {
        let c = random_cmdp(&CmdpSpec::new(3, 2, 1, 0.8), 13).unwrap();
        let m = GenerativeModel::new(&c);
        let pi = softish_policy(3, 2, 13);
        let exact = exact_lagrangian_advantage(&c, &pi, &[0.5]).unwrap();
        let mut rng = RngStream::new(13);
        for (s, a) in [(0, 0), (2, 1)] {
            Moments::of(
                (0..100_000).map(|_| estimate_lagrangian_advantage(&m, &pi, &[0.5], s, a, &mut rng).unwrap()),
            )
            .assert_near(exact[c.pair(s, a)], "A_L");
        }
    }

    #[test]
    fn constraint_return_estimates() {
        let mut c = random_cmdp(&CmdpSpec::new(5, 3, 1, 0.8), 14).unwrap();
        c.constraints[0].iter_mut().for_each(|g| *g = 1.0);
        let m = GenerativeModel::new(&c);
        let pi = softish_policy(5, 3, 14);
        let mut rng = RngStream::new(14);
        Moments::of((0..10_000).map(|_| estimate_constraint_return(&m, &pi, 0, 10, &mut rng).unwrap()))
            .assert_near(5.0, "J_g (g = 1)");

        let c = random_cmdp(&CmdpSpec::standard_preset(), 42).unwrap();
        let m = GenerativeModel::new(&c);
        let pi = softish_policy(10, 5, 15);
        let exact = exact_return(&c, &pi, Signal::Constraint(0)).unwrap();
        Moments::of((0..100).map(|_| estimate_constraint_return(&m, &pi, 0, 1000, &mut rng).unwrap()))
            .assert_near(exact, "J_g");
    }

    #[test]
    fn constraint_return_error_shrinks_with_samples() {
        let c = random_cmdp(&CmdpSpec::standard_preset(), 42).unwrap();
        let m = GenerativeModel::new(&c);
        let pi = softish_policy(10, 5, 16);
        let mut rng = RngStream::new(16);
        let spread = |n: usize, rng: &mut RngStream| {
            let m = Moments::of((0..200).map(|_| estimate_constraint_return(&m, &pi, 0, n, rng).unwrap()));
            m.se() * (m.n).sqrt()
        };
        let small = spread(100, &mut rng);
        let large = spread(10_000, &mut rng);
        // sqrt(100) = 10x reduction expected; allow sampling slack on the ratio.
        let ratio = small / large;
        assert!((7.0..14.0).contains(&ratio), "ratio {ratio}");
        assert!(estimate_constraint_return(&m, &pi, 0, 0, &mut rng).is_err());
    }

    #[test]
    fn estimates_are_deterministic() {
        let c = random_cmdp(&CmdpSpec::standard_preset(), 42).unwrap();
        let pi = softish_policy(10, 5, 17);
        let run = || {
            let m = GenerativeModel::new(&c);
            let mut rng = RngStream::substream(99, 7);
            (0..50)
                .map(|_| estimate_lagrangian_advantage(&m, &pi, &[0.3], 1, 1, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
