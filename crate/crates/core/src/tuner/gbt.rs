//! Small gradient-boosted regression trees (squared loss).

#[derive(Debug, Clone, Copy)]
pub struct GbtParams {
    pub trees: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams { trees: 80, learning_rate: 0.15, max_depth: 4, min_leaf: 2 }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(f64),
    Split { feature: usize, threshold: f64, left: Box<Node>, right: Box<Node> },
}

impl Node {
    fn predict(&self, x: &[f64]) -> f64 {
        match self {
            Node::Leaf(v) => *v,
            Node::Split { feature, threshold, left, right } => {
                if x[*feature] <= *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Gbt {
    base: f64,
    rate: f64,
    trees: Vec<Node>,
}

fn mean(idx: &[usize], y: &[f64]) -> f64 {
    idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len().max(1) as f64
}

/// Best variance-reducing split as `(feature, threshold, gain)`.
fn best_split(idx: &[usize], x: &[Vec<f64>], y: &[f64], min_leaf: usize) -> Option<(usize, f64, f64)> {
    let n = idx.len();
    if n < 2 * min_leaf {
        return None;
    }
    let total: f64 = idx.iter().map(|&i| y[i]).sum();
    let mut best: Option<(usize, f64, f64)> = None;
    let mut order = idx.to_vec();
    for f in 0..x[idx[0]].len() {
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]));
        let mut left = 0.0;
        for k in 0..n - 1 {
            left += y[order[k]];
            let (xa, xb) = (x[order[k]][f], x[order[k + 1]][f]);
            let nl = k + 1;
            if xa == xb || nl < min_leaf || n - nl < min_leaf {
                continue;
            }
            let right = total - left;
            // reduction in squared error, up to a constant
            let gain = left * left / nl as f64 + right * right / (n - nl) as f64 - total * total / n as f64;
            if best.is_none_or(|(_, _, g)| gain > g + 1e-12) {
                best = Some((f, (xa + xb) / 2.0, gain));
            }
        }
    }
    best.filter(|&(_, _, g)| g > 1e-12)
}

fn grow(idx: &[usize], x: &[Vec<f64>], y: &[f64], depth: usize, p: &GbtParams) -> Node {
    if depth == 0 {
        return Node::Leaf(mean(idx, y));
    }
    let Some((feature, threshold, _)) = best_split(idx, x, y, p.min_leaf) else {
        return Node::Leaf(mean(idx, y));
    };
    let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| x[i][feature] <= threshold);
    Node::Split {
        feature,
        threshold,
        left: Box::new(grow(&l, x, y, depth - 1, p)),
        right: Box::new(grow(&r, x, y, depth - 1, p)),
    }
}

impl Gbt {
    pub fn fit(x: &[Vec<f64>], y: &[f64], p: &GbtParams) -> Gbt {
        let idx: Vec<usize> = (0..y.len()).collect();
        let base = mean(&idx, y);
        let mut pred = vec![base; y.len()];
        let mut trees = Vec::with_capacity(p.trees);
        for _ in 0..p.trees {
            let resid: Vec<f64> = y.iter().zip(&pred).map(|(a, b)| a - b).collect();
            let tree = grow(&idx, x, &resid, p.max_depth, p);
            for (i, row) in x.iter().enumerate() {
                pred[i] += p.learning_rate * tree.predict(row);
            }
            trees.push(tree);
        }
        Gbt { base, rate: p.learning_rate, trees }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.base + self.rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }
}
