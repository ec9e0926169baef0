//! Flattened binary regression trees.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    /// Rows with `x[feature] < threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        gain: f64,
        /// Number of training rows that reached the node.
        cover: f64,
    },
    Leaf { value: f64, cover: f64 },
}

impl Node {
    pub fn cover(&self) -> f64 {
        match self {
            Node::Split { cover, .. } | Node::Leaf { cover, .. } => *cover,
        }
    }
}

/// Node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64, cover: f64) -> Self {
        Self {
            nodes: vec![Node::Leaf { value, cover }],
        }
    }

    /// A single split on `feature` at `threshold` (left value, right value).
    pub fn stump(feature: usize, threshold: f64, left: f64, right: f64, cover: (f64, f64)) -> Self {
        Self {
            nodes: vec![
                Node::Split {
                    feature,
                    threshold,
                    left: 1,
                    right: 2,
                    gain: 0.0,
                    cover: cover.0 + cover.1,
                },
                Node::Leaf {
                    value: left,
                    cover: cover.0,
                },
                Node::Leaf {
                    value: right,
                    cover: cover.1,
                },
            ],
        }
    }

    /// Leaf value reached by `row` (before the learning-rate scaling).
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value, .. } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if row[*feature] < *threshold { *left } else { *right },
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    /// Number of split levels on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }

    /// `(feature, threshold)` of every split, grouped by depth.
    pub fn splits_by_depth(&self) -> Vec<Vec<(usize, f64)>> {
        let mut out: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut stack = vec![(0usize, 0usize)];
        while let Some((i, d)) = stack.pop() {
            if let Node::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } = &self.nodes[i]
            {
                if out.len() <= d {
                    out.resize(d + 1, Vec::new());
                }
                out[d].push((*feature, *threshold));
                stack.push((*right, d + 1));
                stack.push((*left, d + 1));
            }
        }
        out
    }

    /// Features used by at least one split.
    pub fn used_features(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    /// Renumbers the nodes reachable from the root in depth-first order,
    /// dropping unreachable ones.
    pub fn compact(&self) -> Tree {
        fn go(src: &Tree, i: usize, out: &mut Vec<Node>) -> usize {
            let slot = out.len();
            out.push(src.nodes[i].clone());
            if let Node::Split { left, right, .. } = src.nodes[i] {
                let l = go(src, left, out);
                let r = go(src, right, out);
                if let Node::Split {
                    left: nl,
                    right: nr,
                    ..
                } = &mut out[slot]
                {
                    *nl = l;
                    *nr = r;
                }
            }
            slot
        }
        let mut out = Vec::with_capacity(self.nodes.len());
        go(self, 0, &mut out);
        Tree { nodes: out }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stump_routes_on_strict_less_than() {
        let t = Tree::stump(0, 0.0, -1.0, 1.0, (1.0, 1.0));
        assert_eq!(t.predict(&[-3.0]), -1.0);
        assert_eq!(t.predict(&[0.0]), 1.0);
        assert_eq!(t.depth(), 1);
        assert_eq!(t.n_leaves(), 2);
    }

    #[test]
    fn compact_drops_orphans() {
        let mut t = Tree::stump(1, 2.0, 3.0, 4.0, (1.0, 1.0));
        t.nodes.insert(1, Node::Leaf { value: 99.0, cover: 0.0 });
        if let Node::Split { left, right, .. } = &mut t.nodes[0] {
            *left = 2;
            *right = 3;
        }
        let c = t.compact();
        assert_eq!(c.nodes.len(), 3);
        assert_eq!(c.predict(&[0.0, 1.0]), 3.0);
        assert_eq!(c.predict(&[0.0, 5.0]), 4.0);
    }
}
