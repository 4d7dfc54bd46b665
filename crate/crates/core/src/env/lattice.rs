//! Equidistant embedding of the discrete action set into `[0, 1]^D`.

use serde::{Deserialize, Serialize};

use super::codec::ActionIndex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtoPoint(pub Vec<f64>);

impl ProtoPoint {
    pub fn coords(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtoLattice {
    dims: usize,
    points_per_dim: usize,
    action_count: usize,
    /// Row-major `action_count x dims` coordinates of the assigned points.
    coords: Vec<f64>,
}

/// Smallest `n` with `n^dims >= count`.
fn points_per_dim(count: usize, dims: usize) -> usize {
    let mut n = (count as f64).powf(1.0 / dims as f64).ceil().max(1.0) as usize;
    while n > 1 && (n - 1).checked_pow(dims as u32).map_or(false, |p| p >= count) {
        n -= 1;
    }
    while n.checked_pow(dims as u32).map_or(false, |p| p < count) {
        n += 1;
    }
    n
}

impl ProtoLattice {
    /// Actions are assigned to the first `action_count` lattice points in
    /// lexicographic coordinate order (dimension 0 most significant).
    pub fn new(action_count: usize, dims: usize) -> Self {
        assert!(dims >= 1 && action_count >= 1, "lattice needs D >= 1 and |A| >= 1");
        let n = points_per_dim(action_count, dims);
        let level = |d: usize| {
            if n == 1 {
                0.5
            } else {
                d as f64 / (n - 1) as f64
            }
        };
        let mut coords = Vec::with_capacity(action_count * dims);
        for a in 0..action_count {
            let mut digits = vec![0; dims];
            let mut rest = a;
            for slot in digits.iter_mut().rev() {
                *slot = rest % n;
                rest /= n;
            }
            coords.extend(digits.into_iter().map(level));
        }
        Self {
            dims,
            points_per_dim: n,
            action_count,
            coords,
        }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn points_per_dim(&self) -> usize {
        self.points_per_dim
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn total_points(&self) -> usize {
        self.points_per_dim.pow(self.dims as u32)
    }

    pub fn point(&self, action: ActionIndex) -> &[f64] {
        &self.coords[action.0 * self.dims..(action.0 + 1) * self.dims]
    }

    /// `min(k, |A|)` assigned actions nearest to `u` in Euclidean distance,
    /// ascending, ties broken by smaller action index.
    pub fn knn(&self, u: &[f64], k: usize) -> Vec<(ActionIndex, f64)> {
        debug_assert_eq!(u.len(), self.dims);
        let mut scored: Vec<(f64, usize)> = self
            .coords
            .chunks_exact(self.dims)
            .enumerate()
            .map(|(a, p)| {
                let d2: f64 = p.iter().zip(u).map(|(x, y)| (x - y) * (x - y)).sum();
                (d2, a)
            })
            .collect();
        let k = k.min(self.action_count);
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scored.len() {
            scored.select_nth_unstable_by(k, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        scored
            .into_iter()
            .map(|(d2, a)| (ActionIndex(a), d2.sqrt()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_sizes() {
        let l = ProtoLattice::new(8, 3);
        assert_eq!(l.points_per_dim(), 2);
        assert_eq!(l.point(ActionIndex(0)), &[0.0, 0.0, 0.0]);
        assert_eq!(l.point(ActionIndex(7)), &[1.0, 1.0, 1.0]);

        let l = ProtoLattice::new(162, 3);
        assert_eq!(l.points_per_dim(), 6);
        assert_eq!(l.total_points(), 216);
        assert!((l.point(ActionIndex(1))[2] - 0.2).abs() < 1e-15);

        assert_eq!(ProtoLattice::new(2516, 8).points_per_dim(), 3);
        let single = ProtoLattice::new(1, 2);
        assert_eq!(single.points_per_dim(), 1);
        assert_eq!(single.point(ActionIndex(0)), &[0.5, 0.5]);
        assert_eq!(ProtoLattice::new(9, 2).points_per_dim(), 3);
        assert_eq!(ProtoLattice::new(10, 2).points_per_dim(), 4);
    }

    #[test]
    fn knn_examples() {
        let l = ProtoLattice::new(8, 3);
        let nn = l.knn(&[0.4, 0.4, 0.4], 1);
        assert_eq!(nn[0].0, ActionIndex(0));
        assert!((nn[0].1 - 0.48f64.sqrt()).abs() < 1e-12);

        let exact = l.knn(&[1.0, 0.0, 1.0], 1);
        assert_eq!(exact[0], (ActionIndex(5), 0.0));

        assert_eq!(l.knn(&[0.5; 3], 100).len(), 8);
        // every corner equidistant from the centre: ties by index
        let all: Vec<usize> = l.knn(&[0.5; 3], 8).iter().map(|(a, _)| a.0).collect();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn surplus_points_never_returned() {
        let l = ProtoLattice::new(162, 3);
        // (1,1,1) is lattice point 215, unassigned
        let nn = l.knn(&[1.0, 1.0, 1.0], 5);
        assert!(nn.iter().all(|(a, _)| a.0 < 162));
        assert!(nn[0].1 > 0.0);
    }
}
