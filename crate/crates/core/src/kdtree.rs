//! Exact 2-d nearest-neighbor index (k-d tree, median split).
//!
//! Pruning only skips points that cannot improve the best squared distance,
//! so query results match a brute-force scan exactly.

pub(crate) struct KdTree2 {
    nodes: Vec<Node>,
    points: Vec<(f64, f64)>,
    root: i32,
}

struct Node {
    point: u32,
    left: i32,
    right: i32,
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    dx * dx + dy * dy
}

impl KdTree2 {
    pub(crate) fn build(points: &[(f64, f64)]) -> Self {
        let mut idx: Vec<u32> = (0..points.len() as u32).collect();
        let mut tree = KdTree2 {
            nodes: Vec::with_capacity(points.len()),
            points: points.to_vec(),
            root: -1,
        };
        tree.root = tree.build_range(&mut idx, 0);
        tree
    }

    fn build_range(&mut self, idx: &mut [u32], depth: usize) -> i32 {
        if idx.is_empty() {
            return -1;
        }
        let axis = depth % 2;
        let mid = idx.len() / 2;
        let pts = &self.points;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            let ka = if axis == 0 {
                pts[a as usize].0
            } else {
                pts[a as usize].1
            };
            let kb = if axis == 0 {
                pts[b as usize].0
            } else {
                pts[b as usize].1
            };
            ka.total_cmp(&kb)
        });
        let point = idx[mid];
        let node_id = self.nodes.len() as i32;
        self.nodes.push(Node {
            point,
            left: -1,
            right: -1,
        });
        let (lo, rest) = idx.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = self.build_range(lo, depth + 1);
        let right = self.build_range(hi, depth + 1);
        self.nodes[node_id as usize].left = left;
        self.nodes[node_id as usize].right = right;
        node_id
    }

    /// Squared distance from `query` to the nearest indexed point other than
    /// `exclude`. Returns `None` when no such point exists.
    pub(crate) fn nearest_excluding(&self, query: (f64, f64), exclude: usize) -> Option<f64> {
        let mut best = f64::INFINITY;
        self.search(self.root, 0, query, exclude, &mut best);
        if best.is_finite() {
            Some(best)
        } else {
            None
        }
    }

    fn search(&self, node: i32, depth: usize, query: (f64, f64), exclude: usize, best: &mut f64) {
        if node < 0 {
            return;
        }
        let n = &self.nodes[node as usize];
        let p = self.points[n.point as usize];
        if n.point as usize != exclude {
            let d2 = dist2(query, p);
            if d2 < *best {
                *best = d2;
            }
        }
        let axis = depth % 2;
        let diff = if axis == 0 {
            query.0 - p.0
        } else {
            query.1 - p.1
        };
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search(near, depth + 1, query, exclude, best);
        if diff * diff <= *best {
            self.search(far, depth + 1, query, exclude, best);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_nearest(points: &[(f64, f64)], i: usize) -> Option<f64> {
        points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &p)| dist2(points[i], p))
            .min_by(f64::total_cmp)
    }

    #[test]
    fn matches_brute_force_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1usize, 2, 3, 17, 300, 801] {
            let points: Vec<(f64, f64)> = (0..n)
                .map(|_| (rng.gen_range(0.0..512.0), rng.gen_range(0.0..512.0)))
                .collect();
            let tree = KdTree2::build(&points);
            for i in 0..n {
                assert_eq!(tree.nearest_excluding(points[i], i), brute_nearest(&points, i));
            }
        }
    }

    #[test]
    fn duplicate_points_give_zero_distance() {
        let points = vec![(5.0, 5.0), (5.0, 5.0), (9.0, 1.0)];
        let tree = KdTree2::build(&points);
        assert_eq!(tree.nearest_excluding(points[0], 0), Some(0.0));
    }
}
