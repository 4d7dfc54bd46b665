//! Scheduling policies sharing one shape: reported CSI and average rates in,
//! an [`ActionIndex`] out.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{inner, norm_sqr, sinr_and_rates, single_user_max_rate, ComplexMatrix};
use crate::env::{action_count, decode_action, encode_action, pf_score, ActionIndex, UserSubset};
use crate::env::ProtoLattice;
use crate::error::{Error, Result};
use crate::sac::Checkpoint;

/// Exhaustive policies visit `O(2^L)` subsets; larger systems are refused.
pub const MAX_EXHAUSTIVE_USERS: usize = 16;

/// Users whose normalised channel correlation reaches this value are never
/// grouped together by [`opt_pf_ug`].
pub const GROUPING_CORRELATION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    Random,
    OptPf,
    OptMr,
    OptPfUg,
    Sac,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Random,
        PolicyKind::OptPf,
        PolicyKind::OptMr,
        PolicyKind::OptPfUg,
        PolicyKind::Sac,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::OptPf => "optpf",
            PolicyKind::OptMr => "optmr",
            PolicyKind::OptPfUg => "optpfug",
            PolicyKind::Sac => "sac",
        }
    }

    pub fn is_exhaustive(self) -> bool {
        matches!(self, PolicyKind::OptPf | PolicyKind::OptMr)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown policy {s:?} (expected random, optpf, optmr, optpfug or sac)")))
    }
}

pub fn random_policy<R: Rng + ?Sized>(rng: &mut R, num_actions: usize) -> ActionIndex {
    ActionIndex(rng.gen_range(0..num_actions))
}

/// Per-user rates of `members` with zero-forcing on the reported CSI, as a
/// length-`L` vector.
fn reported_rates(reported: &ComplexMatrix, members: &[usize], tx_power: f64, noise_variance: f64) -> Vec<f64> {
    let mut rates = vec![0.0; reported.cols()];
    for (&l, r) in members.iter().zip(sinr_and_rates(reported, reported, members, tx_power, noise_variance)) {
        rates[l] = r;
    }
    rates
}

/// PF score of `members` when the base station trusts the reported CSI.
pub fn subset_pf_score(reported: &ComplexMatrix, avg_rates: &[f64], members: &[usize], tx_power: f64, noise_variance: f64) -> f64 {
    pf_score(&reported_rates(reported, members, tx_power, noise_variance), avg_rates, members)
}

pub fn subset_sum_rate(reported: &ComplexMatrix, members: &[usize], tx_power: f64, noise_variance: f64) -> f64 {
    sinr_and_rates(reported, reported, members, tx_power, noise_variance).iter().sum()
}

fn check_exhaustive(num_users: usize) -> Result<()> {
    if num_users > MAX_EXHAUSTIVE_USERS {
        return Err(Error::Config(format!(
            "exhaustive scheduling over {num_users} users is refused (limit {MAX_EXHAUSTIVE_USERS})"
        )));
    }
    Ok(())
}

fn exhaustive_argmax(num_users: usize, max_selected: usize, mut score: impl FnMut(&[usize]) -> f64) -> Result<ActionIndex> {
    check_exhaustive(num_users)?;
    let mut best = (ActionIndex(0), f64::NEG_INFINITY);
    for a in 0..action_count(num_users, max_selected) {
        let subset = decode_action(ActionIndex(a), num_users, max_selected)?;
        let s = score(subset.members());
        if s > best.1 {
            best = (ActionIndex(a), s);
        }
    }
    Ok(best.0)
}

/// Exhaustive proportional-fair argmax over every subset of at most
/// `max_selected` users.
pub fn opt_pf(reported: &ComplexMatrix, avg_rates: &[f64], tx_power: f64, noise_variance: f64, max_selected: usize) -> Result<ActionIndex> {
    if avg_rates.len() != reported.cols() || avg_rates.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Contract("opt_pf needs one strictly positive average rate per user".into()));
    }
    exhaustive_argmax(reported.cols(), max_selected, |m| subset_pf_score(reported, avg_rates, m, tx_power, noise_variance))
}

/// Exhaustive sum-rate argmax.
pub fn opt_mr(reported: &ComplexMatrix, tx_power: f64, noise_variance: f64, max_selected: usize) -> Result<ActionIndex> {
    exhaustive_argmax(reported.cols(), max_selected, |m| subset_sum_rate(reported, m, tx_power, noise_variance))
}

/// `|h_iᴴ h_j| / (‖h_i‖ ‖h_j‖)`, zero if either channel vanishes.
pub fn channel_correlation(hi: &[num_complex::Complex64], hj: &[num_complex::Complex64]) -> f64 {
    let den = (norm_sqr(hi) * norm_sqr(hj)).sqrt();
    if den > 0.0 {
        inner(hi, hj).norm() / den
    } else {
        0.0
    }
}

/// Greedy user grouping: users in descending single-user PF ratio join the
/// first group where they are weakly correlated with every member and there
/// is room; otherwise they open a new group. The best group by PF score wins.
pub fn opt_pf_ug(reported: &ComplexMatrix, avg_rates: &[f64], tx_power: f64, noise_variance: f64, max_selected: usize) -> Result<ActionIndex> {
    let l = reported.cols();
    if avg_rates.len() != l || max_selected == 0 {
        return Err(Error::Contract("opt_pf_ug needs one average rate per user and N̄ ≥ 1".into()));
    }
    let cols: Vec<_> = (0..l).map(|u| reported.column(u)).collect();
    let ratio: Vec<f64> = (0..l).map(|u| single_user_max_rate(&cols[u], tx_power, noise_variance) / avg_rates[u]).collect();
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| ratio[b].total_cmp(&ratio[a]).then(a.cmp(&b)));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for u in order {
        let slot = groups.iter_mut().find(|g| {
            g.len() < max_selected && g.iter().all(|&v| channel_correlation(&cols[u], &cols[v]) < GROUPING_CORRELATION)
        });
        match slot {
            Some(g) => g.push(u),
            None => groups.push(vec![u]),
        }
    }
    let mut best: Option<(ActionIndex, f64)> = None;
    for g in groups {
        let subset = UserSubset::new(g, l, max_selected)?;
        let action = encode_action(&subset, l, max_selected)?;
        let s = subset_pf_score(reported, avg_rates, subset.members(), tx_power, noise_variance);
        let better = match best {
            None => true,
            Some((a, b)) => s > b || (s == b && action < a),
        };
        if better {
            best = Some((action, s));
        }
    }
    Ok(best.expect("at least one user").0)
}

/// Greedy Wolpertinger decision of a trained agent on a raw observation.
pub fn sac_policy(checkpoint: &Checkpoint, lattice: &ProtoLattice, raw_obs: &[f64]) -> Result<ActionIndex> {
    if raw_obs.len() != checkpoint.env.obs_dim() {
        return Err(Error::Shape(format!(
            "observation has {} entries, checkpoint expects {}",
            raw_obs.len(),
            checkpoint.env.obs_dim()
        )));
    }
    Ok(checkpoint.greedy_action(lattice, raw_obs)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn diag(gains: &[f64], m: usize) -> ComplexMatrix {
        ComplexMatrix::from_fn(m, gains.len(), |r, c| if r == c { Complex64::new(gains[c], 0.0) } else { Complex64::new(0.0, 0.0) })
    }

    #[test]
    fn names_roundtrip() {
        for p in PolicyKind::ALL {
            assert_eq!(p.name().parse::<PolicyKind>().unwrap(), p);
        }
        assert_eq!("OptPF-UG".parse::<PolicyKind>().unwrap(), PolicyKind::OptPfUg);
        assert!("best".parse::<PolicyKind>().is_err());
    }

    #[test]
    fn single_action_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_policy(&mut rng, 1), ActionIndex(0));
        let h = diag(&[1.0], 2);
        assert_eq!(opt_pf(&h, &[0.01], 1.0, 0.1, 1).unwrap(), ActionIndex(0));
        assert_eq!(opt_mr(&h, 1.0, 0.1, 1).unwrap(), ActionIndex(0));
        assert_eq!(opt_pf_ug(&h, &[0.01], 1.0, 0.1, 1).unwrap(), ActionIndex(0));
    }

    #[test]
    fn stronger_orthogonal_user_wins_single_slot() {
        let h = diag(&[2.0, 1.0], 2);
        assert_eq!(opt_pf(&h, &[1.0, 1.0], 1.0, 0.1, 1).unwrap(), ActionIndex(0));
        assert_eq!(opt_mr(&h, 1.0, 0.1, 1).unwrap(), ActionIndex(0));
    }

    #[test]
    fn orthogonal_grouping_takes_top_ratios() {
        // Ratios: user 1 > user 2 > user 0.
        let h = diag(&[1.0, 3.0, 2.0], 3);
        let a = opt_pf_ug(&h, &[1.0, 1.0, 1.0], 1.0, 0.1, 2).unwrap();
        assert_eq!(decode_action(a, 3, 2).unwrap().members(), &[1, 2]);
    }

    #[test]
    fn correlated_users_are_split() {
        let h = ComplexMatrix::from_fn(2, 2, |r, c| Complex64::new(if r == 0 { 1.0 } else { 0.1 * c as f64 }, 0.0));
        let a = opt_pf_ug(&h, &[1.0, 1.0], 1.0, 0.1, 2).unwrap();
        assert_eq!(decode_action(a, 2, 2).unwrap().len(), 1);
    }

    #[test]
    fn large_systems_refused() {
        let h = ComplexMatrix::zeros(4, 17);
        assert!(matches!(opt_mr(&h, 1.0, 0.1, 4), Err(Error::Config(_))));
    }

    #[test]
    fn non_positive_average_rate_rejected() {
        let h = diag(&[1.0, 1.0], 2);
        assert!(opt_pf(&h, &[1.0, 0.0], 1.0, 0.1, 2).is_err());
    }
}
