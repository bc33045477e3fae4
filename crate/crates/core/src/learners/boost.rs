//! Gradient-boosted shallow regression trees (Newton boosting) with squared
//! error or log-loss.

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{expit, logit};

const MIN_LEAF: usize = 5;
const HESS_REG: f64 = 1e-6;
/// Largest Newton leaf step under log-loss, before shrinkage.
const MAX_LOGIT_STEP: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Loss {
    Squared,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf(f64),
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, row: ArrayView1<'_, f64>) -> f64 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                Node::Leaf(v) => return *v,
                Node::Split { feature, threshold, left, right } => {
                    idx = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedTrees {
    loss: Loss,
    init: f64,
    shrinkage: f64,
    trees: Vec<Tree>,
}

/// Most candidate thresholds per feature; features with at most this many
/// distinct values are split exactly.
pub const MAX_BINS: usize = 256;

#[derive(Clone, Copy, Default)]
struct Bin {
    g: f64,
    h: f64,
    count: usize,
}

impl std::ops::Sub for Bin {
    type Output = Bin;
    fn sub(self, o: Bin) -> Bin {
        Bin { g: self.g - o.g, h: self.h - o.h, count: self.count - o.count }
    }
}

#[derive(Clone, Copy)]
struct Frontier {
    node: usize,
    g: f64,
    h: f64,
    count: usize,
}

/// Quantile binning of the training covariates, fixed for the whole fit.
struct Binned {
    p: usize,
    /// Row-major bin indices, `n x p`.
    bins: Vec<u16>,
    /// Split threshold between bin `b` and `b + 1`, one vector per feature.
    cuts: Vec<Vec<f64>>,
    /// Start of each feature's bins in a node histogram.
    offset: Vec<usize>,
    total_bins: usize,
}

impl Binned {
    fn new(x: ArrayView2<'_, f64>) -> Self {
        let (n, p) = x.dim();
        let mut bins = vec![0u16; n * p];
        let mut cuts: Vec<Vec<f64>> = Vec::with_capacity(p);
        for (f, col) in x.columns().into_iter().enumerate() {
            let mut v: Vec<f64> = col.to_vec();
            v.sort_by(f64::total_cmp);
            let sorted = v.clone();
            v.dedup();
            // upper edges of each bin, as values present in the data
            let edges: Vec<f64> = if v.len() <= MAX_BINS {
                v.clone()
            } else {
                let mut e: Vec<f64> = (1..=MAX_BINS).map(|k| sorted[(k * n).div_ceil(MAX_BINS) - 1]).collect();
                e.dedup();
                e
            };
            // midpoint between each edge and the next larger data value
            cuts.push(edges.windows(2).map(|w| 0.5 * (w[0] + v[v.partition_point(|z| *z <= w[0])])).collect());
            for (i, z) in col.iter().enumerate() {
                bins[i * p + f] = edges.partition_point(|e| e < z) as u16;
            }
        }
        let mut offset = Vec::with_capacity(p);
        let mut total_bins = 0;
        for c in &cuts {
            offset.push(total_bins);
            total_bins += c.len() + 1;
        }
        Self { p, bins, cuts, offset, total_bins }
    }
}

fn leaf_value(g: f64, h: f64, loss: Loss) -> f64 {
    let v = -g / (h + HESS_REG);
    match loss {
        Loss::Squared => v,
        Loss::Logistic => v.clamp(-MAX_LOGIT_STEP, MAX_LOGIT_STEP),
    }
}

/// Best split of one node from its histogram: (gain, feature, bin).
fn best_split(hist: &[Bin], fr: &Frontier, binned: &Binned) -> Option<(f64, usize, usize)> {
    if fr.count < 2 * MIN_LEAF {
        return None;
    }
    let parent = fr.g * fr.g / (fr.h + HESS_REG);
    let mut best: Option<(f64, usize, usize)> = None;
    for (f, cuts) in binned.cuts.iter().enumerate() {
        let start = binned.offset[f];
        let (mut gl, mut hl, mut count) = (0.0, 0.0, 0usize);
        for (b, c) in hist[start..start + cuts.len()].iter().enumerate() {
            gl += c.g;
            hl += c.h;
            count += c.count;
            if c.count == 0 || count < MIN_LEAF || fr.count - count < MIN_LEAF {
                continue;
            }
            let (gr, hr) = (fr.g - gl, fr.h - hl);
            let gain = gl * gl / (hl + HESS_REG) + gr * gr / (hr + HESS_REG) - parent;
            if gain > 1e-12 * parent.abs().max(1e-300) && best.is_none_or(|bb| gain > bb.0) {
                best = Some((gain, f, b));
            }
        }
    }
    best
}

/// Grows one tree level by level from per-node gradient histograms, writing
/// the leaf value reached by each row into `values`. Only the smaller child
/// of each split is histogrammed; its sibling is the parent minus it.
fn grow_tree(grad: &[f64], hess: &[f64], binned: &Binned, depth: usize, loss: Loss, values: &mut [f64]) -> Tree {
    const DONE: u32 = u32::MAX;
    let n = grad.len();
    let (p, tb) = (binned.p, binned.total_bins);
    let mut nodes = vec![Node::Leaf(0.0)];
    // frontier slot of each row, or DONE once its leaf is final
    let mut slot = vec![0u32; n];
    let mut frontier = vec![Frontier { node: 0, g: grad.iter().sum(), h: hess.iter().sum(), count: n }];
    let mut hist = vec![Bin::default(); tb];
    for (((_, &g), &h), bins) in slot.iter().zip(grad).zip(hess).zip(binned.bins.chunks_exact(p.max(1))) {
        for (&off, &b) in binned.offset.iter().zip(bins) {
            let c = &mut hist[off + usize::from(b)];
            c.g += g;
            c.h += h;
            c.count += 1;
        }
    }
    for level in 0..=depth {
        let best: Vec<Option<(f64, usize, usize)>> = if level < depth && tb > p {
            frontier.iter().enumerate().map(|(k, fr)| best_split(&hist[k * tb..(k + 1) * tb], fr, binned)).collect()
        } else {
            vec![None; frontier.len()]
        };
        // children[k] = (feature, bin, left slot)
        let mut children: Vec<Option<(usize, u16, u32)>> = vec![None; frontier.len()];
        let mut next = Vec::new();
        for (k, fr) in frontier.iter().enumerate() {
            match best[k] {
                Some((_, feature, b)) => {
                    let left = nodes.len();
                    nodes.push(Node::Leaf(0.0));
                    nodes.push(Node::Leaf(0.0));
                    nodes[fr.node] = Node::Split { feature, threshold: binned.cuts[feature][b], left, right: left + 1 };
                    children[k] = Some((feature, b as u16, next.len() as u32));
                    for node in [left, left + 1] {
                        next.push(Frontier { node, g: 0.0, h: 0.0, count: 0 });
                    }
                }
                None => nodes[fr.node] = Node::Leaf(leaf_value(fr.g, fr.h, loss)),
            }
        }
        for (((s, v), (&g, &h)), bins) in
            slot.iter_mut().zip(values.iter_mut()).zip(grad.iter().zip(hess)).zip(binned.bins.chunks_exact(p.max(1)))
        {
            if *s == DONE {
                continue;
            }
            let k = *s as usize;
            match children[k] {
                None => {
                    if let Node::Leaf(lv) = nodes[frontier[k].node] {
                        *v = lv;
                    }
                    *s = DONE;
                }
                Some((feature, b, left)) => {
                    let c = left + u32::from(bins[feature] > b);
                    *s = c;
                    let fr = &mut next[c as usize];
                    fr.g += g;
                    fr.h += h;
                    fr.count += 1;
                }
            }
        }
        if next.is_empty() {
            break;
        }
        if level + 1 < depth {
            // histogram the smaller child of each split, derive the sibling
            let mut child_hist = vec![Bin::default(); next.len() * tb];
            let mut build = vec![false; next.len()];
            for pair in (0..next.len()).step_by(2) {
                build[if next[pair].count <= next[pair + 1].count { pair } else { pair + 1 }] = true;
            }
            for ((&s, (&g, &h)), bins) in slot.iter().zip(grad.iter().zip(hess)).zip(binned.bins.chunks_exact(p.max(1))) {
                if s == DONE || !build[s as usize] {
                    continue;
                }
                let base = s as usize * tb;
                for (&off, &b) in binned.offset.iter().zip(bins) {
                    let c = &mut child_hist[base + off + usize::from(b)];
                    c.g += g;
                    c.h += h;
                    c.count += 1;
                }
            }
            for (k, ch) in children.iter().enumerate() {
                if let Some((_, _, left)) = *ch {
                    let (l, r) = (left as usize, left as usize + 1);
                    let (built, other) = if build[l] { (l, r) } else { (r, l) };
                    for t in 0..tb {
                        child_hist[other * tb + t] = hist[k * tb + t] - child_hist[built * tb + t];
                    }
                }
            }
            hist = child_hist;
        }
        frontier = next;
    }
    Tree { nodes }
}

impl BoostedTrees {
    pub fn fit(
        x: ArrayView2<'_, f64>,
        y: ArrayView1<'_, f64>,
        w: ArrayView1<'_, f64>,
        loss: Loss,
        n_trees: usize,
        depth: usize,
        shrinkage: f64,
    ) -> Result<Self> {
        let n = y.len();
        let total: f64 = w.sum();
        if n == 0 || !(total > 0.0) {
            return Err(Error::invalid("boosting: empty or zero-weight training set"));
        }
        let ybar = y.iter().zip(w.iter()).map(|(y, w)| y * w).sum::<f64>() / total;
        let init = match loss {
            Loss::Squared => ybar,
            Loss::Logistic => logit(ybar.clamp(1e-6, 1.0 - 1e-6)),
        };
        let binned = Binned::new(x);
        let mut score = vec![init; n];
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n];
        let mut leaf = vec![0.0; n];
        let (y, w) = (y.to_vec(), w.to_vec());
        let mut trees = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            for ((g, h), ((s, yi), wi)) in grad.iter_mut().zip(hess.iter_mut()).zip(score.iter().zip(&y).zip(&w)) {
                match loss {
                    Loss::Squared => {
                        *g = wi * (s - yi);
                        *h = *wi;
                    }
                    Loss::Logistic => {
                        let p = expit(*s);
                        *g = wi * (p - yi);
                        *h = wi * (p * (1.0 - p)).max(1e-12);
                    }
                }
            }
            let tree = grow_tree(&grad, &hess, &binned, depth, loss, &mut leaf);
            let mut changed = false;
            for (s, v) in score.iter_mut().zip(&leaf) {
                let step = shrinkage * v;
                changed |= step != 0.0;
                *s += step;
            }
            trees.push(tree);
            if !changed {
                break;
            }
        }
        Ok(Self { loss, init, shrinkage, trees })
    }

    pub fn predict_row(&self, row: ArrayView1<'_, f64>) -> f64 {
        let raw = self.init + self.shrinkage * self.trees.iter().map(|t| t.predict(row)).sum::<f64>();
        match self.loss {
            Loss::Squared => raw.max(0.0),
            Loss::Logistic => expit(raw),
        }
    }
}
