//! Second-order split finding and the three tree-growth strategies.

use rayon::prelude::*;

use super::binning::BinMapper;
use super::tree::{Node, Tree};
use super::GrowthMode;

/// Gains within this distance of zero count as zero.
pub(crate) const GAIN_EPS: f64 = 1e-12;

/// Work size (rows x features) above which histograms are built in parallel.
const PAR_THRESHOLD: usize = 16_384;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Regularization {
    pub l1: f64,
    pub l2: f64,
    pub min_child_weight: f64,
}

impl Regularization {
    fn soft(&self, g: f64) -> f64 {
        if g > self.l1 {
            g - self.l1
        } else if g < -self.l1 {
            g + self.l1
        } else {
            0.0
        }
    }

    /// Structure score `T(G)^2 / (H + l2)`.
    pub fn score(&self, g: f64, h: f64) -> f64 {
        let den = h + self.l2;
        if den <= 0.0 {
            return 0.0;
        }
        let t = self.soft(g);
        t * t / den
    }

    /// Optimal leaf weight `-T(G) / (H + l2)`.
    pub fn leaf_value(&self, g: f64, h: f64) -> f64 {
        let den = h + self.l2;
        if den <= 0.0 {
            return 0.0;
        }
        -self.soft(g) / den
    }

    pub fn split_gain(&self, left: (f64, f64), right: (f64, f64), parent: (f64, f64)) -> f64 {
        0.5 * (self.score(left.0, left.1) + self.score(right.0, right.1) - self.score(parent.0, parent.1))
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Bin {
    g: f64,
    h: f64,
    n: u32,
}

pub(crate) struct GrowInput<'a> {
    pub binned: &'a [Vec<u8>],
    pub mapper: &'a BinMapper,
    pub grad: &'a [f64],
    pub hess: &'a [f64],
    pub features: &'a [usize],
    pub reg: Regularization,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    feature: usize,
    /// Rows with bin < `split_bin` go left.
    split_bin: usize,
    gain: f64,
}

impl<'a> GrowInput<'a> {
    fn totals(&self, rows: &[u32]) -> (f64, f64) {
        rows.iter().fold((0.0, 0.0), |(g, h), &r| {
            (g + self.grad[r as usize], h + self.hess[r as usize])
        })
    }

    fn histogram(&self, feature: usize, rows: &[u32]) -> Vec<Bin> {
        let col = &self.binned[feature];
        let mut hist = vec![Bin::default(); self.mapper.n_bins(feature)];
        for &r in rows {
            let b = &mut hist[col[r as usize] as usize];
            b.g += self.grad[r as usize];
            b.h += self.hess[r as usize];
            b.n += 1;
        }
        hist
    }

    /// Histograms of every allowed feature, in `features` order.
    fn histograms(&self, rows: &[u32]) -> Vec<Vec<Bin>> {
        if rows.len() * self.features.len() >= PAR_THRESHOLD {
            self.features.par_iter().map(|&f| self.histogram(f, rows)).collect()
        } else {
            self.features.iter().map(|&f| self.histogram(f, rows)).collect()
        }
    }

    /// Best split of one node; ties keep the lowest feature, then the lowest
    /// threshold. Zero-gain splits are admissible (`min_gain = -GAIN_EPS`).
    fn best_split(&self, rows: &[u32], totals: (f64, f64), min_gain: f64) -> Option<Candidate> {
        let hists = self.histograms(rows);
        let n = rows.len() as u32;
        let mut best: Option<Candidate> = None;
        for (k, hist) in hists.iter().enumerate() {
            let feature = self.features[k];
            let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0u32);
            for s in 1..hist.len() {
                gl += hist[s - 1].g;
                hl += hist[s - 1].h;
                nl += hist[s - 1].n;
                let nr = n - nl;
                if nl == 0 || nr == 0 {
                    continue;
                }
                let (gr, hr) = (totals.0 - gl, totals.1 - hl);
                if hl < self.reg.min_child_weight || hr < self.reg.min_child_weight {
                    continue;
                }
                let gain = self.reg.split_gain((gl, hl), (gr, hr), totals);
                if gain >= min_gain && best.is_none_or(|b| gain > b.gain) {
                    best = Some(Candidate {
                        feature,
                        split_bin: s,
                        gain,
                    });
                }
            }
        }
        best
    }

    fn partition(&self, rows: &[u32], c: Candidate) -> (Vec<u32>, Vec<u32>) {
        let col = &self.binned[c.feature];
        rows.iter().partition(|&&r| (col[r as usize] as usize) < c.split_bin)
    }

    fn threshold(&self, c: Candidate) -> f64 {
        self.mapper.thresholds[c.feature][c.split_bin - 1]
    }
}

/// Tree under construction: nodes plus the gradient totals of each node.
struct Builder {
    nodes: Vec<Node>,
    totals: Vec<(f64, f64)>,
}

impl Builder {
    fn new() -> Self {
        Self {
            nodes: Vec::new(),
            totals: Vec::new(),
        }
    }

    fn push_leaf(&mut self, reg: &Regularization, totals: (f64, f64), cover: usize) -> usize {
        self.nodes.push(Node::Leaf {
            value: reg.leaf_value(totals.0, totals.1),
            cover: cover as f64,
        });
        self.totals.push(totals);
        self.nodes.len() - 1
    }

    fn make_split(&mut self, at: usize, feature: usize, threshold: f64, left: usize, right: usize, gain: f64) {
        let cover = self.nodes[at].cover();
        self.nodes[at] = Node::Split {
            feature,
            threshold,
            left,
            right,
            gain,
            cover,
        };
    }

    /// Collapses zero-gain splits whose children are both leaves, bottom-up.
    fn prune_zero_gain(&mut self, reg: &Regularization) {
        for i in (0..self.nodes.len()).rev() {
            if let Node::Split {
                left,
                right,
                gain,
                cover,
                ..
            } = self.nodes[i]
            {
                let leaves = matches!(self.nodes[left], Node::Leaf { .. }) && matches!(self.nodes[right], Node::Leaf { .. });
                if leaves && gain <= GAIN_EPS {
                    let (g, h) = self.totals[i];
                    self.nodes[i] = Node::Leaf {
                        value: reg.leaf_value(g, h),
                        cover,
                    };
                }
            }
        }
    }

    fn finish(self) -> Tree {
        Tree { nodes: self.nodes }.compact()
    }
}

pub(crate) fn grow_tree(input: &GrowInput<'_>, rows: Vec<u32>, mode: GrowthMode, max_depth: usize, num_leaves: usize) -> Tree {
    match mode {
        GrowthMode::DepthWise => grow_depthwise(input, rows, max_depth),
        GrowthMode::LeafWise => grow_leafwise(input, rows, num_leaves),
        GrowthMode::Symmetric => grow_symmetric(input, rows, max_depth),
    }
}

fn grow_depthwise(input: &GrowInput<'_>, rows: Vec<u32>, max_depth: usize) -> Tree {
    let reg = input.reg;
    let mut b = Builder::new();
    let root_totals = input.totals(&rows);
    b.push_leaf(&reg, root_totals, rows.len());
    let mut queue = std::collections::VecDeque::from([(0usize, rows, 0usize)]);
    while let Some((id, rows, depth)) = queue.pop_front() {
        if depth >= max_depth || rows.len() < 2 {
            continue;
        }
        let totals = b.totals[id];
        let Some(c) = input.best_split(&rows, totals, -GAIN_EPS) else {
            continue;
        };
        let (lrows, rrows) = input.partition(&rows, c);
        let l = b.push_leaf(&reg, input.totals(&lrows), lrows.len());
        let r = b.push_leaf(&reg, input.totals(&rrows), rrows.len());
        b.make_split(id, c.feature, input.threshold(c), l, r, c.gain.max(0.0));
        queue.push_back((l, lrows, depth + 1));
        queue.push_back((r, rrows, depth + 1));
    }
    b.prune_zero_gain(&reg);
    b.finish()
}

fn grow_leafwise(input: &GrowInput<'_>, rows: Vec<u32>, num_leaves: usize) -> Tree {
    let reg = input.reg;
    let mut b = Builder::new();
    let totals = input.totals(&rows);
    b.push_leaf(&reg, totals, rows.len());
    // (node id, rows, best candidate)
    let mut open: Vec<(usize, Vec<u32>, Option<Candidate>)> = Vec::new();
    let cand = input.best_split(&rows, totals, GAIN_EPS);
    open.push((0, rows, cand));
    let mut n_leaves = 1;
    while n_leaves < num_leaves {
        let pick = open
            .iter()
            .enumerate()
            .filter_map(|(k, (id, _, c))| c.map(|c| (k, *id, c.gain)))
            .max_by(|a, b| a.2.total_cmp(&b.2).then(b.1.cmp(&a.1)));
        let Some((k, _, _)) = pick else { break };
        let (id, rows, c) = open.swap_remove(k);
        let c = c.expect("picked a candidate");
        let (lrows, rrows) = input.partition(&rows, c);
        let lt = input.totals(&lrows);
        let rt = input.totals(&rrows);
        let l = b.push_leaf(&reg, lt, lrows.len());
        let r = b.push_leaf(&reg, rt, rrows.len());
        b.make_split(id, c.feature, input.threshold(c), l, r, c.gain);
        n_leaves += 1;
        let lc = input.best_split(&lrows, lt, GAIN_EPS);
        let rc = input.best_split(&rrows, rt, GAIN_EPS);
        open.push((l, lrows, lc));
        open.push((r, rrows, rc));
    }
    b.finish()
}

fn grow_symmetric(input: &GrowInput<'_>, rows: Vec<u32>, max_depth: usize) -> Tree {
    let reg = input.reg;
    // rows of every node at the current level, left-to-right
    let mut level: Vec<Vec<u32>> = vec![rows.clone()];
    // chosen (feature, split_bin, total gain, per-node gains) per level
    let mut chosen: Vec<(Candidate, Vec<f64>)> = Vec::new();
    for _ in 0..max_depth {
        let node_totals: Vec<(f64, f64)> = level.iter().map(|r| input.totals(r)).collect();
        let evaluate = |&feature: &usize| -> Option<(Candidate, Vec<f64>)> {
            let nb = input.mapper.n_bins(feature);
            if nb < 2 {
                return None;
            }
            let mut total = vec![0.0; nb];
            let mut per_node = vec![vec![0.0; level.len()]; nb];
            for (k, rows) in level.iter().enumerate() {
                if rows.is_empty() {
                    continue;
                }
                let hist = input.histogram(feature, rows);
                let t = node_totals[k];
                let n = rows.len() as u32;
                let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0u32);
                for s in 1..nb {
                    gl += hist[s - 1].g;
                    hl += hist[s - 1].h;
                    nl += hist[s - 1].n;
                    if nl == 0 || nl == n {
                        continue;
                    }
                    let (gr, hr) = (t.0 - gl, t.1 - hl);
                    if hl < reg.min_child_weight || hr < reg.min_child_weight {
                        continue;
                    }
                    let g = reg.split_gain((gl, hl), (gr, hr), t);
                    total[s] += g;
                    per_node[s][k] = g;
                }
            }
            let mut best: Option<usize> = None;
            for s in 1..nb {
                if best.is_none_or(|b| total[s] > total[b]) {
                    best = Some(s);
                }
            }
            best.map(|s| {
                (
                    Candidate {
                        feature,
                        split_bin: s,
                        gain: total[s],
                    },
                    std::mem::take(&mut per_node[s]),
                )
            })
        };
        let work: usize = level.iter().map(Vec::len).sum::<usize>() * input.features.len();
        let results: Vec<Option<(Candidate, Vec<f64>)>> = if work >= PAR_THRESHOLD {
            input.features.par_iter().map(evaluate).collect()
        } else {
            input.features.iter().map(evaluate).collect()
        };
        let mut best: Option<(Candidate, Vec<f64>)> = None;
        for r in results.into_iter().flatten() {
            if best.as_ref().is_none_or(|b| r.0.gain > b.0.gain) {
                best = Some(r);
            }
        }
        let Some((c, gains)) = best else { break };
        let mut next = Vec::with_capacity(level.len() * 2);
        for rows in &level {
            let (l, r) = input.partition(rows, c);
            next.push(l);
            next.push(r);
        }
        level = next;
        chosen.push((c, gains));
    }
    while chosen.last().is_some_and(|(c, _)| c.gain <= GAIN_EPS) {
        chosen.pop();
    }

    let mut b = Builder::new();
    let root_totals = input.totals(&rows);
    b.push_leaf(&reg, root_totals, rows.len());
    let mut frontier = vec![(0usize, rows)];
    for (c, gains) in &chosen {
        let threshold = input.threshold(*c);
        let mut next = Vec::with_capacity(frontier.len() * 2);
        for (k, (id, rows)) in frontier.into_iter().enumerate() {
            let (lrows, rrows) = input.partition(&rows, *c);
            let l = b.push_leaf(&reg, input.totals(&lrows), lrows.len());
            let r = b.push_leaf(&reg, input.totals(&rrows), rrows.len());
            b.make_split(id, c.feature, threshold, l, r, gains[k].max(0.0));
            next.push((l, lrows));
            next.push((r, rrows));
        }
        frontier = next;
    }
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gain_formula_matches_hand_values() {
        let reg = Regularization {
            l1: 0.0,
            l2: 1.0,
            min_child_weight: 0.0,
        };
        // G_L = -2, H_L = 1; G_R = 2, H_R = 1; parent 0, 2
        let g = reg.split_gain((-2.0, 1.0), (2.0, 1.0), (0.0, 2.0));
        assert!((g - 0.5 * (4.0 / 2.0 + 4.0 / 2.0)).abs() < 1e-15);
        assert_eq!(reg.leaf_value(-2.0, 1.0), 1.0);
        let l1 = Regularization { l1: 0.5, ..reg };
        assert_eq!(l1.leaf_value(-2.0, 1.0), 0.75);
        assert_eq!(l1.leaf_value(0.3, 1.0), 0.0);
    }
}
