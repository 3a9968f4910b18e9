//! Cross-method significance analysis: average ranks, the Friedman /
//! Iman–Davenport statistics, the Nemenyi critical difference and the
//! Bayesian signed-rank test with a region of practical equivalence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::envsim::mix_seed;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::Units;

/// Per-dataset ranks of k methods over N datasets (rows are datasets).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub methods: Vec<String>,
    pub datasets: Vec<String>,
    pub ranks: Vec<Vec<f64>>,
}

impl RankTable {
    pub fn new(methods: Vec<String>, datasets: Vec<String>, ranks: Vec<Vec<f64>>) -> Result<Self> {
        let k = methods.len();
        if ranks.len() != datasets.len() {
            return Err(Error::Config("one rank row per dataset required".into()));
        }
        for (row, name) in ranks.iter().zip(&datasets) {
            if row.len() != k {
                return Err(Error::Config(format!("dataset {name}: expected {k} ranks")));
            }
            let sum: f64 = row.iter().sum();
            let expected = (k * (k + 1)) as f64 / 2.0;
            if (sum - expected).abs() > 1e-9 || row.iter().any(|&r| r < 1.0 || r > k as f64) {
                return Err(Error::Config(format!("dataset {name}: not a (mid)rank permutation")));
            }
        }
        Ok(Self {
            methods,
            datasets,
            ranks,
        })
    }

    /// Ranks each row of scores, 1 = best, ties get midranks.
    pub fn from_scores(
        methods: Vec<String>,
        datasets: Vec<String>,
        scores: &[Vec<f64>],
        lower_is_better: &[bool],
    ) -> Result<Self> {
        if scores.len() != lower_is_better.len() {
            return Err(Error::Config("one orientation flag per dataset required".into()));
        }
        let ranks = scores
            .iter()
            .zip(lower_is_better)
            .map(|(row, &low)| {
                let oriented: Vec<f64> = row.iter().map(|&v| if low { v } else { -v }).collect();
                midranks(&oriented)
            })
            .collect();
        Self::new(methods, datasets, ranks)
    }

    pub fn k(&self) -> usize {
        self.methods.len()
    }

    pub fn n(&self) -> usize {
        self.datasets.len()
    }
}

/// Ascending ranks starting at 1 with ties resolved by midranks.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            ranks[t] = mid;
        }
        i = j + 1;
    }
    ranks
}

pub fn average_ranks(rt: &RankTable) -> Vec<f64> {
    let n = rt.n() as f64;
    (0..rt.k())
        .map(|j| rt.ranks.iter().map(|row| row[j]).sum::<f64>() / n)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Friedman {
    pub chi2: f64,
    pub f_stat: f64,
    /// `(k − 1, (k − 1)(N − 1))`.
    pub dof: (usize, usize),
}

impl Friedman {
    /// Upper-tail p-value of `f_stat` under the F distribution.
    pub fn p_value(&self) -> f64 {
        use statrs::distribution::{ContinuousCDF, FisherSnedecor};
        FisherSnedecor::new(self.dof.0 as f64, self.dof.1 as f64)
            .map(|d| 1.0 - d.cdf(self.f_stat))
            .unwrap_or(f64::NAN)
    }

    /// Critical value of the F distribution at level `alpha`.
    pub fn critical_value(&self, alpha: f64) -> f64 {
        use statrs::distribution::{ContinuousCDF, FisherSnedecor};
        FisherSnedecor::new(self.dof.0 as f64, self.dof.1 as f64)
            .map(|d| d.inverse_cdf(1.0 - alpha))
            .unwrap_or(f64::NAN)
    }
}

/// Friedman statistic from average ranks over `n` datasets, with the
/// Iman–Davenport F correction.
pub fn friedman_from_average_ranks(avg: &[f64], n: usize) -> Result<Friedman> {
    let k = avg.len();
    if n < 2 || k < 2 {
        return Err(Error::InsufficientData("friedman needs N >= 2 and k >= 2".into()));
    }
    let (kf, nf) = (k as f64, n as f64);
    let sum_sq: f64 = avg.iter().map(|r| r * r).sum();
    let chi2 = 12.0 * nf / (kf * (kf + 1.0)) * (sum_sq - kf * (kf + 1.0) * (kf + 1.0) / 4.0);
    let denom = nf * (kf - 1.0) - chi2;
    if denom.abs() < 1e-12 {
        return Err(Error::DegenerateStatistic(
            "chi2_F equals N(k-1); the F statistic is undefined".into(),
        ));
    }
    Ok(Friedman {
        chi2,
        f_stat: (nf - 1.0) * chi2 / denom,
        dof: (k - 1, (k - 1) * (n - 1)),
    })
}

pub fn friedman(rt: &RankTable) -> Result<Friedman> {
    friedman_from_average_ranks(&average_ranks(rt), rt.n())
}

/// Studentized range statistic over √2 for the Nemenyi test at α = 0.05,
/// indexed by k − 2 for k = 2..=10.
pub const NEMENYI_Q_005: [f64; 9] = [1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164];

pub fn nemenyi_q(k: usize) -> Result<f64> {
    if (2..=10).contains(&k) {
        Ok(NEMENYI_Q_005[k - 2])
    } else {
        Err(Error::Config(format!("no Nemenyi q value for k = {k}")))
    }
}

/// Critical difference `q_α·sqrt(k(k+1)/(6N))`.
pub fn nemenyi_cd(k: usize, n: usize, q_alpha: f64) -> f64 {
    q_alpha * ((k * (k + 1)) as f64 / (6.0 * n as f64)).sqrt()
}

/// Method pairs `(i, j)` whose average-rank gap exceeds `cd`.
pub fn significant_pairs(avg: &[f64], cd: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..avg.len() {
        for j in i + 1..avg.len() {
            if (avg[i] - avg[j]).abs() > cd {
                out.push((i, j));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedScores {
    pub method_a: String,
    pub method_b: String,
    /// `score_a − score_b` per dataset/scene, oriented so positive favours A.
    pub diffs: Vec<f64>,
    pub rope: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignedRankResult {
    pub p_a_wins: f64,
    pub p_rope: f64,
    pub p_b_wins: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignedRankConfig {
    pub prior_strength: f64,
    pub mc_samples: usize,
    pub seed: u64,
    /// Independent RNG substreams; the result depends on this, not on `exec`.
    pub shards: usize,
}

impl Default for SignedRankConfig {
    fn default() -> Self {
        Self {
            prior_strength: 0.5,
            mc_samples: 50_000,
            seed: 0,
            shards: 16,
        }
    }
}

/// Bayesian signed-rank test. Each Monte-Carlo draw weights the diffs (plus
/// one prior pseudo-observation at 0) with a Dirichlet sample and computes
/// the weighted mass of pair sums below `−2·rope`, inside the ROPE, and above
/// `2·rope`; the draw votes for the largest of the three. Returns the vote
/// fractions.
pub fn bayesian_signed_rank(ps: &PairedScores, cfg: &SignedRankConfig, exec: Exec) -> Result<SignedRankResult> {
    if ps.diffs.is_empty() {
        return Err(Error::InsufficientData("signed-rank test needs at least one pair".into()));
    }
    if cfg.mc_samples < 10_000 {
        return Err(Error::Config("signed-rank test needs at least 1e4 samples".into()));
    }
    if ps.diffs.iter().any(|d| !d.is_finite()) || !(ps.rope >= 0.0) || !(cfg.prior_strength > 0.0) {
        return Err(Error::Domain("diffs must be finite, rope >= 0 and prior strength > 0".into()));
    }
    let mut z = Vec::with_capacity(ps.diffs.len() + 1);
    z.push(0.0);
    z.extend_from_slice(&ps.diffs);
    let m = z.len();
    // Region of each pair sum: 0 = B wins (left), 1 = rope, 2 = A wins (right).
    let region: Vec<u8> = (0..m * m)
        .map(|ij| {
            let s = z[ij / m] + z[ij % m];
            if s < -2.0 * ps.rope {
                0
            } else if s > 2.0 * ps.rope {
                2
            } else {
                1
            }
        })
        .collect();
    let alpha: Vec<f64> = std::iter::once(cfg.prior_strength)
        .chain(std::iter::repeat_n(1.0, m - 1))
        .collect();
    let shards = cfg.shards.max(1);
    let per_shard: Vec<usize> = (0..shards)
        .map(|s| cfg.mc_samples / shards + usize::from(s < cfg.mc_samples % shards))
        .collect();
    let counts = exec.map_range(shards, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0xB5, s as u64]));
        let gammas: Vec<Gamma<f64>> = alpha.iter().map(|&a| Gamma::new(a, 1.0).expect("shape > 0")).collect();
        let mut w = vec![0.0; m];
        let mut votes = [0usize; 3];
        for _ in 0..per_shard[s] {
            let mut total = 0.0;
            for (wi, g) in w.iter_mut().zip(&gammas) {
                *wi = g.sample(&mut rng);
                total += *wi;
            }
            w.iter_mut().for_each(|wi| *wi /= total);
            let mut mass = [0.0f64; 3];
            for i in 0..m {
                let row = &region[i * m..(i + 1) * m];
                let mut acc = [0.0f64; 3];
                for (j, &r) in row.iter().enumerate() {
                    acc[r as usize] += w[j];
                }
                for t in 0..3 {
                    mass[t] += w[i] * acc[t];
                }
            }
            let winner = if mass[1] >= mass[0] && mass[1] >= mass[2] {
                1
            } else if mass[2] > mass[0] {
                2
            } else if mass[0] > mass[2] {
                0
            } else {
                1
            };
            votes[winner] += 1;
        }
        votes
    });
    let mut votes = [0usize; 3];
    for c in counts {
        for t in 0..3 {
            votes[t] += c[t];
        }
    }
    let n = cfg.mc_samples as f64;
    Ok(SignedRankResult {
        p_b_wins: votes[0] as f64 / n,
        p_rope: votes[1] as f64 / n,
        p_a_wins: votes[2] as f64 / n,
    })
}

/// Practical-equivalence half-width for a metric.
pub fn rope_for(metric: &str, units: Units) -> Result<f64> {
    match (metric.to_ascii_lowercase().as_str(), units) {
        ("ade" | "min_ade" | "fde" | "min_fde", Units::Meters) => Ok(0.5),
        ("ade" | "min_ade" | "fde" | "min_fde", Units::Pixels) => Ok(1.0),
        ("kde_nll" | "nll", _) => Ok(0.0),
        ("ecfl", _) => Ok(1.0),
        (other, _) => Err(Error::Config(format!("unknown metric '{other}'"))),
    }
}

/// Whether smaller values of the metric are better.
pub fn lower_is_better(metric: &str) -> Result<bool> {
    rope_for(metric, Units::Meters)?;
    Ok(!metric.eq_ignore_ascii_case("ecfl"))
}
