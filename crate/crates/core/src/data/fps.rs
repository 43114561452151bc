use crate::error::{Error, Result};

use super::cloud::{dist2, PointCloud};

/// Greedy max-min farthest point sampling. The first pick is
/// `start`; each later pick maximizes the distance to the nearest point
/// already chosen, ties going to the lowest index. Indices come back in
/// selection order.
pub fn fps_indices(cloud: &PointCloud, m: usize, start: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!("fps needs 1 <= m <= n, got m={m}, n={n}")));
    }
    if start >= n {
        return Err(Error::InvalidArgument(format!("fps start index {start} out of range for {n} points")));
    }
    let pts = cloud.points();
    let mut picked = Vec::with_capacity(m);
    let mut nearest = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut cur = start;
    for _ in 0..m {
        picked.push(cur);
        taken[cur] = true;
        let c = pts[cur];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            let d = dist2(p, &c);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if !taken[i] && nearest[i] > best_d {
                best_d = nearest[i];
                best = i;
            }
        }
        cur = best;
    }
    Ok(picked)
}

pub fn fps(cloud: &PointCloud, m: usize, start: usize) -> Result<PointCloud> {
    cloud.select(&fps_indices(cloud, m, start)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_example() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let s = fps(&c, 2, 0).unwrap();
        assert_eq!(s.points(), &[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
    }

    #[test]
    fn full_selection_is_permutation() {
        let c = PointCloud::new((0..9).map(|i| [i as f32 * 0.37 % 1.0, (i * i) as f32 * 0.1, 0.0]).collect()).unwrap();
        let mut idx = fps_indices(&c, 9, 4).unwrap();
        assert_eq!(idx[0], 4);
        idx.sort();
        assert_eq!(idx, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn too_many_is_error() {
        let c = PointCloud::new(vec![[0.0; 3]; 3]).unwrap();
        assert!(fps(&c, 4, 0).is_err());
    }

    #[test]
    fn duplicate_points_break_ties_by_index() {
        let c = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0; 3]]).unwrap();
        assert_eq!(fps_indices(&c, 4, 0).unwrap(), vec![0, 1, 2, 3]);
    }
}
