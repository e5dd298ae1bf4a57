use super::eigen::Vec3;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum KdNode {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Squared Euclidean distance. Every neighbor search in the crate goes
/// through this one expression so radius tests agree bit for bit.
#[inline]
pub fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Immutable kd-tree over a point set, split at the median of the widest axis.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<KdNode>,
}

impl SpatialIndex {
    pub fn build(points: &[Vec3]) -> Self {
        let mut index = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            index.build_node(0, points.len());
        }
        index
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&i, &j| {
            points[i][axis].total_cmp(&points[j][axis])
        });
        let value = self.points[self.order[mid]][axis];
        // placeholder, patched once children exist
        self.nodes.push(KdNode::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = KdNode::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &Vec3 {
        &self.points[i]
    }

    /// Every `(d², id)` with `d² <= radius²`, unordered.
    pub fn within_radius(&self, center: &Vec3, radius: f64) -> Vec<(f64, usize)> {
        let mut out = Vec::new();
        if self.nodes.is_empty() {
            return out;
        }
        let r2 = radius * radius;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            match self.nodes[n] {
                KdNode::Leaf { start, end } => {
                    for &i in &self.order[start..end] {
                        let d2 = dist2(&self.points[i], center);
                        if d2 <= r2 {
                            out.push((d2, i));
                        }
                    }
                }
                KdNode::Split {
                    axis,
                    value,
                    left,
                    right,
                } => {
                    // left holds coordinates <= value, right >= value; the
                    // slack keeps pruning conservative under rounding
                    let diff = center[axis] - value;
                    let reach = radius * (1.0 + 1e-9);
                    if diff <= reach {
                        stack.push(left);
                    }
                    if -diff <= reach {
                        stack.push(right);
                    }
                }
            }
        }
        out
    }

    /// Up to `k_max` points within `radius` of `center`, ascending by
    /// `(distance, id)`.
    pub fn nearest_within(&self, center: &Vec3, radius: f64, k_max: usize) -> Vec<usize> {
        let mut hits = self.within_radius(center, radius);
        sort_and_truncate(&mut hits, k_max)
    }
}

pub(crate) fn sort_and_truncate(hits: &mut Vec<(f64, usize)>, k_max: usize) -> Vec<usize> {
    hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    hits.truncate(k_max);
    hits.iter().map(|&(_, i)| i).collect()
}
