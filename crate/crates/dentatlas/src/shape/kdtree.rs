//! Minimal kd-tree over 3D points for nearest-neighbour queries.

use nalgebra::Point3;

/// Static kd-tree; construction is deterministic (median split with index
/// tie-breaking).
pub struct KdTree {
    points: Vec<Point3<f64>>,
    // node layout: implicit balanced tree over `order`
    order: Vec<u32>,
}

impl KdTree {
    pub fn build(points: &[Point3<f64>]) -> KdTree {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut tree = KdTree {
            points: points.to_vec(),
            order,
        };
        order = std::mem::take(&mut tree.order);
        let n = order.len();
        if n > 0 {
            let pts = tree.points.clone();
            build_recursive(&pts, &mut order, 0, n, 0);
        }
        tree.order = order;
        tree
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Index and squared distance of the nearest point.
    pub fn nearest(&self, query: &Point3<f64>) -> Option<(usize, f64)> {
        if self.order.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(query, 0, self.order.len(), 0, &mut best);
        Some(best)
    }

    /// Indices of up to `k` nearest points, closest first.
    pub fn k_nearest(&self, query: &Point3<f64>, k: usize) -> Vec<(usize, f64)> {
        if self.order.is_empty() || k == 0 {
            return Vec::new();
        }
        let mut heap: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        self.search_k(query, 0, self.order.len(), 0, k, &mut heap);
        heap.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        heap
    }

    fn search(
        &self,
        query: &Point3<f64>,
        lo: usize,
        hi: usize,
        depth: usize,
        best: &mut (usize, f64),
    ) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid] as usize;
        let p = self.points[idx];
        let d2 = (p - query).norm_squared();
        if d2 < best.1 || (d2 == best.1 && idx < best.0) {
            *best = (idx, d2);
        }
        let axis = depth % 3;
        let delta = query[axis] - p[axis];
        let (near, far) = if delta <= 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(query, near.0, near.1, depth + 1, best);
        if delta * delta < best.1 {
            self.search(query, far.0, far.1, depth + 1, best);
        }
    }

    fn search_k(
        &self,
        query: &Point3<f64>,
        lo: usize,
        hi: usize,
        depth: usize,
        k: usize,
        heap: &mut Vec<(usize, f64)>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid] as usize;
        let p = self.points[idx];
        let d2 = (p - query).norm_squared();
        let worst = heap.last().map_or(f64::INFINITY, |w| w.1);
        if heap.len() < k || d2 < worst {
            let pos = heap
                .binary_search_by(|probe| probe.1.partial_cmp(&d2).unwrap())
                .unwrap_or_else(|e| e);
            heap.insert(pos, (idx, d2));
            heap.truncate(k);
        }
        let axis = depth % 3;
        let delta = query[axis] - p[axis];
        let (near, far) = if delta <= 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search_k(query, near.0, near.1, depth + 1, k, heap);
        let worst = if heap.len() < k {
            f64::INFINITY
        } else {
            heap.last().unwrap().1
        };
        if delta * delta < worst {
            self.search_k(query, far.0, far.1, depth + 1, k, heap);
        }
    }
}

fn build_recursive(points: &[Point3<f64>], order: &mut [u32], lo: usize, hi: usize, depth: usize) {
    if hi - lo <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = (lo + hi) / 2;
    order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
        points[a as usize][axis]
            .partial_cmp(&points[b as usize][axis])
            .unwrap()
            .then(a.cmp(&b))
    });
    build_recursive(points, order, lo, mid, depth + 1);
    build_recursive(points, order, mid + 1, hi, depth + 1);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(seed: u64, n: usize) -> Vec<Point3<f64>> {
        let mut state = seed;
        let mut next = move || {
            state = state.wrapping_add(0x9E3779B97F4A7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            (z ^ (z >> 31)) as f64 / u64::MAX as f64
        };
        (0..n)
            .map(|_| Point3::new(next() * 10.0, next() * 10.0, next() * 10.0))
            .collect()
    }

    #[test]
    fn nearest_matches_brute_force() {
        let pts = cloud(42, 300);
        let tree = KdTree::build(&pts);
        for q in cloud(7, 50) {
            let (idx, d2) = tree.nearest(&q).unwrap();
            let brute = pts
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    (a.1 - q)
                        .norm_squared()
                        .partial_cmp(&(b.1 - q).norm_squared())
                        .unwrap()
                })
                .unwrap();
            assert_eq!((pts[idx] - q).norm_squared(), d2);
            assert!((d2 - (brute.1 - q).norm_squared()).abs() < 1e-12);
        }
    }

    #[test]
    fn k_nearest_matches_brute_force_set() {
        let pts = cloud(13, 200);
        let tree = KdTree::build(&pts);
        for q in cloud(99, 20) {
            let got = tree.k_nearest(&q, 8);
            assert_eq!(got.len(), 8);
            let mut brute: Vec<(usize, f64)> = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (p - q).norm_squared()))
                .collect();
            brute.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
            for (g, b) in got.iter().zip(&brute[..8]) {
                assert!((g.1 - b.1).abs() < 1e-12);
            }
        }
    }
}
