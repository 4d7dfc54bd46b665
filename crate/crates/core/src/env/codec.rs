//! Bijection between user subsets of size `1..=N̄` and dense action indices.
//!
//! Subsets are ordered by size first, then lexicographically within a size:
//! `{0}, {1}, …, {L-1}, {0,1}, {0,2}, …`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ActionIndex(pub usize);

/// Strictly increasing set of user indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UserSubset(Vec<usize>);

impl UserSubset {
    pub fn new(mut members: Vec<usize>, num_users: usize, max_selected: usize) -> Result<Self> {
        members.sort_unstable();
        if members.is_empty() || members.len() > max_selected {
            return Err(Error::Codec(format!(
                "subset size {} outside 1..={max_selected}",
                members.len()
            )));
        }
        if members.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Codec("duplicate user in subset".into()));
        }
        if let Some(&last) = members.last() {
            if last >= num_users {
                return Err(Error::Codec(format!("user {last} out of range (L={num_users})")));
            }
        }
        Ok(Self(members))
    }

    pub fn members(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, user: usize) -> bool {
        self.0.binary_search(&user).is_ok()
    }
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as usize
}

/// `Σ_{i=1..N̄} C(L, i)`.
pub fn action_count(num_users: usize, max_selected: usize) -> usize {
    (1..=max_selected.min(num_users))
        .map(|i| binomial(num_users, i))
        .sum()
}

pub fn encode_action(subset: &UserSubset, num_users: usize, max_selected: usize) -> Result<ActionIndex> {
    let members = subset.members();
    let k = members.len();
    if k == 0 || k > max_selected || members.iter().any(|&m| m >= num_users) {
        return Err(Error::Codec("subset incompatible with (L, N̄)".into()));
    }
    let offset: usize = (1..k).map(|i| binomial(num_users, i)).sum();
    let mut rank = 0;
    let mut next = 0;
    for (pos, &m) in members.iter().enumerate() {
        let remaining = k - 1 - pos;
        for skipped in next..m {
            rank += binomial(num_users - 1 - skipped, remaining);
        }
        next = m + 1;
    }
    Ok(ActionIndex(offset + rank))
}

pub fn decode_action(action: ActionIndex, num_users: usize, max_selected: usize) -> Result<UserSubset> {
    let total = action_count(num_users, max_selected);
    if action.0 >= total {
        return Err(Error::Codec(format!(
            "action {} out of range (|A| = {total})",
            action.0
        )));
    }
    let mut rank = action.0;
    let mut k = 1;
    while rank >= binomial(num_users, k) {
        rank -= binomial(num_users, k);
        k += 1;
    }
    let mut members = Vec::with_capacity(k);
    let mut candidate = 0;
    for pos in 0..k {
        let remaining = k - 1 - pos;
        loop {
            let block = binomial(num_users - 1 - candidate, remaining);
            if rank < block {
                break;
            }
            rank -= block;
            candidate += 1;
        }
        members.push(candidate);
        candidate += 1;
    }
    Ok(UserSubset(members))
}
