use crate::stats::RowMatrix;

const LEAF_SIZE: usize = 16;

/// Euclidean distance. Every metric path goes through this one function so
/// tree and exhaustive searches agree bit for bit.
#[inline]
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s.sqrt()
}

/// Lower bound on the distance from `q` to any point in the box; never
/// exceeds the distance computed by [`euclidean`] for a point inside it.
fn box_distance(q: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((x, l), h) in q.iter().zip(lo).zip(hi) {
        let d = if x < l {
            l - x
        } else if x > h {
            x - h
        } else {
            0.0
        };
        s += d * d;
    }
    s.sqrt()
}

#[derive(Debug)]
struct Node {
    lo: Vec<f64>,
    hi: Vec<f64>,
    // largest per-point radius in the subtree, used by ball queries
    max_radius: f64,
    kind: NodeKind,
}

#[derive(Debug)]
enum NodeKind {
    Leaf { start: usize, end: usize },
    Split { left: usize, right: usize },
}

/// Static k-d tree over the rows of a matrix.
#[derive(Debug)]
pub struct KdTree<'a> {
    points: &'a RowMatrix,
    order: Vec<usize>,
    nodes: Vec<Node>,
    radii: Option<Vec<f64>>,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a RowMatrix) -> Self {
        let mut tree = Self {
            points,
            order: (0..points.rows()).collect(),
            nodes: Vec::new(),
            radii: None,
        };
        if points.rows() > 0 {
            tree.build(0, points.rows());
        }
        tree
    }

    /// Attaches a radius to every point for [`KdTree::count_balls_containing`].
    pub fn with_radii(points: &'a RowMatrix, radii: Vec<f64>) -> Self {
        let mut tree = Self::new(points);
        tree.radii = Some(radii);
        tree.fill_max_radius(0);
        tree
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let n = self.points.cols();
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for &i in &self.order[start..end] {
            for (d, v) in self.points.row(i).iter().enumerate() {
                lo[d] = lo[d].min(*v);
                hi[d] = hi[d].max(*v);
            }
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            lo: lo.clone(),
            hi: hi.clone(),
            max_radius: 0.0,
            kind: NodeKind::Leaf { start, end },
        });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let axis = (0..n)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap();
        if hi[axis] == lo[axis] {
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points.row(a)[axis].total_cmp(&points.row(b)[axis]).then(a.cmp(&b))
        });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id].kind = NodeKind::Split { left, right };
        id
    }

    fn fill_max_radius(&mut self, id: usize) -> f64 {
        if self.nodes.is_empty() {
            return 0.0;
        }
        let m = match self.nodes[id].kind {
            NodeKind::Leaf { start, end } => {
                let radii = self.radii.as_ref().unwrap();
                self.order[start..end].iter().map(|&i| radii[i]).fold(0.0, f64::max)
            }
            NodeKind::Split { left, right } => self.fill_max_radius(left).max(self.fill_max_radius(right)),
        };
        self.nodes[id].max_radius = m;
        m
    }

    /// Distance to the nearest point, excluding index `skip`.
    pub fn nearest_distance(&self, q: &[f64], skip: Option<usize>) -> Option<f64> {
        let mut best = f64::INFINITY;
        if !self.nodes.is_empty() {
            self.nearest_rec(0, q, skip, &mut best);
        }
        best.is_finite().then_some(best)
    }

    fn nearest_rec(&self, id: usize, q: &[f64], skip: Option<usize>, best: &mut f64) {
        let node = &self.nodes[id];
        if box_distance(q, &node.lo, &node.hi) > *best {
            return;
        }
        match node.kind {
            NodeKind::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) != skip {
                        *best = best.min(euclidean(q, self.points.row(i)));
                    }
                }
            }
            NodeKind::Split { left, right } => {
                let dl = box_distance(q, &self.nodes[left].lo, &self.nodes[left].hi);
                let dr = box_distance(q, &self.nodes[right].lo, &self.nodes[right].hi);
                let (a, b) = if dl <= dr { (left, right) } else { (right, left) };
                self.nearest_rec(a, q, skip, best);
                self.nearest_rec(b, q, skip, best);
            }
        }
    }

    /// Distance to the `k`-th nearest point, excluding index `skip`.
    pub fn kth_distance(&self, q: &[f64], k: usize, skip: Option<usize>) -> Option<f64> {
        if k == 0 || self.nodes.is_empty() {
            return None;
        }
        // sorted ascending, at most k entries
        let mut best: Vec<f64> = Vec::with_capacity(k + 1);
        self.knn_rec(0, q, k, skip, &mut best);
        (best.len() == k).then(|| best[k - 1])
    }

    fn knn_rec(&self, id: usize, q: &[f64], k: usize, skip: Option<usize>, best: &mut Vec<f64>) {
        let node = &self.nodes[id];
        if best.len() == k && box_distance(q, &node.lo, &node.hi) > best[k - 1] {
            return;
        }
        match node.kind {
            NodeKind::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == skip {
                        continue;
                    }
                    let d = euclidean(q, self.points.row(i));
                    if best.len() < k || d < best[k - 1] {
                        let pos = best.partition_point(|&b| b <= d);
                        best.insert(pos, d);
                        best.truncate(k);
                    }
                }
            }
            NodeKind::Split { left, right } => {
                let dl = box_distance(q, &self.nodes[left].lo, &self.nodes[left].hi);
                let dr = box_distance(q, &self.nodes[right].lo, &self.nodes[right].hi);
                let (a, b) = if dl <= dr { (left, right) } else { (right, left) };
                self.knn_rec(a, q, k, skip, best);
                self.knn_rec(b, q, k, skip, best);
            }
        }
    }

    /// Number of points `i` with `euclidean(q, x_i) <= radius_i`.
    pub fn count_balls_containing(&self, q: &[f64]) -> usize {
        if self.nodes.is_empty() {
            return 0;
        }
        self.ball_rec(0, q)
    }

    fn ball_rec(&self, id: usize, q: &[f64]) -> usize {
        let node = &self.nodes[id];
        if box_distance(q, &node.lo, &node.hi) > node.max_radius {
            return 0;
        }
        match node.kind {
            NodeKind::Leaf { start, end } => {
                let radii = self.radii.as_ref().expect("tree built without radii");
                self.order[start..end]
                    .iter()
                    .filter(|&&i| euclidean(q, self.points.row(i)) <= radii[i])
                    .count()
            }
            NodeKind::Split { left, right } => self.ball_rec(left, q) + self.ball_rec(right, q),
        }
    }
}
