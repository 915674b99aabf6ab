use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::CloudError;
use crate::geom3::Vec3;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static 3D k-d tree.
///
/// Queries return exactly what an exhaustive scan returns: the smallest
/// squared distance, ties resolved toward the lowest point index.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// Squared distance; the single definition shared by the tree and by
/// [`KdTree::nearest_exhaustive`].
#[inline]
pub(crate) fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

#[derive(PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> Self {
        let mut tree = KdTree { points: points.to_vec(), order: (0..points.len()).collect(), nodes: Vec::new() };
        if !points.is_empty() {
            let n = points.len();
            tree.build_node(0, n);
        }
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        if hi[axis] == lo[axis] {
            // All points coincide.
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Split { axis, value, left: 0, right: 0 });
        // [start, mid) has coordinates <= value, [mid, end) has >= value.
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// Index of and distance to the closest point.
    pub fn nearest(&self, query: &Vec3) -> Result<(usize, f64), CloudError> {
        if self.is_empty() {
            return Err(CloudError::EmptyTree);
        }
        let mut best = (f64::INFINITY, usize::MAX);
        self.nearest_in(0, query, &mut best);
        Ok((best.1, best.0.sqrt()))
    }

    fn nearest_in(&self, node: usize, q: &Vec3, best: &mut (f64, usize)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(&self.points[i], q);
                    if d < best.0 || (d == best.0 && i < best.1) {
                        *best = (d, i);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.nearest_in(near, q, best);
                // Equality still descends: a tie at the boundary may carry a lower index.
                if diff * diff <= best.0 {
                    self.nearest_in(far, q, best);
                }
            }
        }
    }

    /// The `k` closest points sorted by (distance, index).
    pub fn k_nearest(&self, query: &Vec3, k: usize) -> Vec<(usize, f64)> {
        if k == 0 || self.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_in(0, query, k, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.1, c.0.sqrt())).collect()
    }

    fn knn_in(&self, node: usize, q: &Vec3, k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let c = Candidate(dist2(&self.points[i], q), i);
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("full heap") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.knn_in(near, q, k, heap);
                let bound = if heap.len() < k { f64::INFINITY } else { heap.peek().expect("full heap").0 };
                if diff * diff <= bound {
                    self.knn_in(far, q, k, heap);
                }
            }
        }
    }

    /// Reference linear scan with the same tie rule.
    pub fn nearest_exhaustive(points: &[Vec3], query: &Vec3) -> Result<(usize, f64), CloudError> {
        let mut best = (f64::INFINITY, usize::MAX);
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, query);
            if d < best.0 {
                best = (d, i);
            }
        }
        if best.1 == usize::MAX {
            return Err(CloudError::EmptyTree);
        }
        Ok((best.1, best.0.sqrt()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::seeded_rng;
    use rand::Rng;

    fn random_points(seed: u64, n: usize) -> Vec<Vec3> {
        let mut rng = seeded_rng(seed);
        (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect()
    }

    #[test]
    fn single_point() {
        let p = Vec3::new(0.1, 0.2, 0.3);
        let t = KdTree::build(&[p]);
        assert_eq!(t.nearest(&p).unwrap(), (0, 0.0));
    }

    #[test]
    fn empty_tree_errors() {
        let t = KdTree::build(&[]);
        assert_eq!(t.nearest(&Vec3::zeros()), Err(CloudError::EmptyTree));
        assert!(t.k_nearest(&Vec3::zeros(), 3).is_empty());
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let mut pts: Vec<Vec3> = (0..10).map(|i| Vec3::new(10.0 + i as f64, 5.0, 5.0)).collect();
        pts[3] = Vec3::new(1.0, 0.0, 0.0);
        pts[7] = Vec3::new(-1.0, 0.0, 0.0);
        let t = KdTree::build(&pts);
        assert_eq!(t.nearest(&Vec3::zeros()).unwrap(), (3, 1.0));
    }

    #[test]
    fn matches_exhaustive_scan() {
        let pts = random_points(21, 1000);
        let t = KdTree::build(&pts);
        let mut rng = seeded_rng(22);
        for _ in 0..100 {
            let q = Vec3::new(rng.random_range(-0.2..1.2), rng.random_range(-0.2..1.2), rng.random_range(-0.2..1.2));
            assert_eq!(t.nearest(&q).unwrap(), KdTree::nearest_exhaustive(&pts, &q).unwrap());
        }
    }

    #[test]
    fn duplicate_heavy_grid_matches_exhaustive_scan() {
        // Many coordinates coincide with split planes and many queries tie.
        let mut pts = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                for k in 0..6 {
                    pts.push(Vec3::new(i as f64, j as f64, k as f64));
                    pts.push(Vec3::new(i as f64, j as f64, k as f64));
                }
            }
        }
        let t = KdTree::build(&pts);
        for i in 0..11 {
            for j in 0..11 {
                let q = Vec3::new(i as f64 * 0.5, j as f64 * 0.5, 2.5);
                assert_eq!(t.nearest(&q).unwrap(), KdTree::nearest_exhaustive(&pts, &q).unwrap());
            }
        }
    }

    #[test]
    fn knn_matches_sorted_scan() {
        let pts = random_points(23, 500);
        let t = KdTree::build(&pts);
        let q = Vec3::new(0.4, 0.5, 0.6);
        let mut all: Vec<(f64, usize)> = pts.iter().enumerate().map(|(i, p)| (dist2(p, &q), i)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let got = t.k_nearest(&q, 10);
        let want: Vec<(usize, f64)> = all[..10].iter().map(|&(d, i)| (i, d.sqrt())).collect();
        assert_eq!(got, want);
        assert_eq!(t.k_nearest(&q, 1000).len(), 500);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn nearest_equals_scan(seed in any::<u64>(), n in 1usize..400) {
                let pts = random_points(seed, n);
                let t = KdTree::build(&pts);
                let qs = random_points(seed.wrapping_add(1), 50);
                for q in &qs {
                    prop_assert_eq!(t.nearest(q).unwrap(), KdTree::nearest_exhaustive(&pts, q).unwrap());
                }
            }
        }
    }
}
