//! K-nearest-neighbour and CART decision-tree classifiers over the same
//! scaled feature rows the MLP consumes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Row;
use crate::featurize::{fit_scaler, FeatureError, FeatureVector, ScaleMode, Scaler};
use crate::mlp::{check_container, MlpError, MODEL_FORMAT, MODEL_VERSION};
use crate::schedule::UnrollFactor;

const N_CLASSES: usize = UnrollFactor::ALL.len();

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} columns, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] MlpError),
}

/// Scaled rows paired with their labels.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabeledRows {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<UnrollFactor>,
}

impl LabeledRows {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<UnrollFactor>) -> Self {
        assert_eq!(x.len(), y.len());
        LabeledRows { x, y }
    }

    pub fn scaled(rows: &[Row], scaler: &Scaler) -> Self {
        LabeledRows {
            x: rows.iter().map(|r| scaler.transform(&r.features.to_row())).collect(),
            y: rows.iter().map(|r| r.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn width(&self) -> usize {
        self.x.first().map(Vec::len).unwrap_or(0)
    }
}

/// Label with the most votes; ties go to the smallest factor.
fn majority(counts: &[usize; N_CLASSES]) -> UnrollFactor {
    let mut best = 0;
    for c in 1..N_CLASSES {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    UnrollFactor::ALL[best]
}

fn check_query(train: &LabeledRows, q: &[f64]) -> Result<(), BaselineError> {
    if train.is_empty() {
        return Err(BaselineError::EmptyTrainingSet);
    }
    if q.len() != train.width() {
        return Err(BaselineError::DimensionMismatch {
            expected: train.width(),
            found: q.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig { k: 5 }
    }
}

/// Majority label among the `k` rows nearest to `q` in Euclidean distance.
/// Equal distances rank the lower row index first.
pub fn knn_predict(train: &LabeledRows, cfg: KnnConfig, q: &[f64]) -> Result<UnrollFactor, BaselineError> {
    check_query(train, q)?;
    if cfg.k == 0 || cfg.k > train.len() {
        return Err(BaselineError::InvalidConfig(format!(
            "k = {} must lie in 1..={}",
            cfg.k,
            train.len()
        )));
    }
    // squared distance preserves the order
    let mut dist: Vec<(f64, usize)> = train
        .x
        .iter()
        .enumerate()
        .map(|(i, r)| (r.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum(), i))
        .collect();
    dist.select_nth_unstable_by(cfg.k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut counts = [0usize; N_CLASSES];
    for &(_, i) in &dist[..cfg.k] {
        counts[train.y[i].class_index()] += 1;
    }
    Ok(majority(&counts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub max_depth: usize,
    pub min_samples_split: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            max_depth: 12,
            min_samples_split: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        label: UnrollFactor,
    },
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Nodes stored in preorder; the root is node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub width: usize,
    pub nodes: Vec<Node>,
}

/// Gini impurity of a class histogram.
pub fn gini(counts: &[usize; N_CLASSES], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

/// Size-weighted impurity of a two-way partition.
pub fn split_impurity(left: &[usize; N_CLASSES], right: &[usize; N_CLASSES]) -> f64 {
    let nl: usize = left.iter().sum();
    let nr: usize = right.iter().sum();
    (nl as f64 * gini(left, nl) + nr as f64 * gini(right, nr)) / (nl + nr) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestSplit {
    pub feature: usize,
    pub threshold: f64,
    pub impurity: f64,
}

/// Lowest weighted-Gini split over all features and midpoint thresholds.
/// The first candidate in (feature, threshold) order wins ties.
pub fn best_split(data: &LabeledRows, idx: &[usize]) -> Option<BestSplit> {
    let mut total = [0usize; N_CLASSES];
    for &i in idx {
        total[data.y[i].class_index()] += 1;
    }
    let mut best: Option<BestSplit> = None;
    let mut order = idx.to_vec();
    for f in 0..data.width() {
        order.sort_by(|&a, &b| data.x[a][f].total_cmp(&data.x[b][f]).then(a.cmp(&b)));
        let mut left = [0usize; N_CLASSES];
        for w in 0..order.len() - 1 {
            let c = data.y[order[w]].class_index();
            left[c] += 1;
            let (lo, hi) = (data.x[order[w]][f], data.x[order[w + 1]][f]);
            if lo == hi {
                continue;
            }
            let mut right = total;
            for k in 0..N_CLASSES {
                right[k] -= left[k];
            }
            let impurity = split_impurity(&left, &right);
            if best.is_none_or(|b| impurity < b.impurity) {
                best = Some(BestSplit {
                    feature: f,
                    threshold: lo + (hi - lo) / 2.0,
                    impurity,
                });
            }
        }
    }
    best
}

/// Greedy CART growth with Gini impurity.
pub fn tree_fit(train: &LabeledRows, cfg: TreeConfig) -> Result<Tree, BaselineError> {
    if train.is_empty() {
        return Err(BaselineError::EmptyTrainingSet);
    }
    if cfg.max_depth == 0 {
        return Err(BaselineError::InvalidConfig("max_depth must be at least 1".into()));
    }
    let mut tree = Tree {
        width: train.width(),
        nodes: Vec::new(),
    };
    let idx: Vec<usize> = (0..train.len()).collect();
    grow(train, &idx, 0, cfg, &mut tree.nodes);
    Ok(tree)
}

fn grow(data: &LabeledRows, idx: &[usize], depth: usize, cfg: TreeConfig, nodes: &mut Vec<Node>) -> usize {
    let mut counts = [0usize; N_CLASSES];
    for &i in idx {
        counts[data.y[i].class_index()] += 1;
    }
    let id = nodes.len();
    nodes.push(Node::Leaf {
        label: majority(&counts),
    });
    let parent = gini(&counts, idx.len());
    if depth >= cfg.max_depth || idx.len() < cfg.min_samples_split.max(2) || parent == 0.0 {
        return id;
    }
    let Some(split) = best_split(data, idx) else {
        return id;
    };
    if split.impurity >= parent {
        return id;
    }
    let (l, r): (Vec<usize>, Vec<usize>) = idx
        .iter()
        .partition(|&&i| data.x[i][split.feature] <= split.threshold);
    let left = grow(data, &l, depth + 1, cfg, nodes);
    let right = grow(data, &r, depth + 1, cfg, nodes);
    nodes[id] = Node::Split {
        feature: split.feature,
        threshold: split.threshold,
        left,
        right,
    };
    id
}

pub fn tree_predict(tree: &Tree, q: &[f64]) -> Result<UnrollFactor, BaselineError> {
    if q.len() != tree.width {
        return Err(BaselineError::DimensionMismatch {
            expected: tree.width,
            found: q.len(),
        });
    }
    let mut n = 0;
    loop {
        match tree.nodes[n] {
            Node::Leaf { label } => return Ok(label),
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => n = if q[feature] <= threshold { left } else { right },
        }
    }
}

impl Tree {
    pub fn depth(&self) -> usize {
        fn go(t: &Tree, n: usize) -> usize {
            match t.nodes[n] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }
}

/// A tree together with the scaler its rows were fitted through.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub config: TreeConfig,
    pub scaler: Scaler,
    pub tree: Tree,
}

impl TreeModel {
    pub fn fit(train: &[Row], cfg: TreeConfig, mode: ScaleMode) -> Result<Self, BaselineError> {
        if train.is_empty() {
            return Err(BaselineError::EmptyTrainingSet);
        }
        let rows: Vec<Vec<f64>> = train.iter().map(|r| r.features.to_row()).collect();
        let scaler = fit_scaler(&rows, mode)?;
        let tree = tree_fit(&LabeledRows::scaled(train, &scaler), cfg)?;
        Ok(TreeModel {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            kind: "tree".into(),
            config: cfg,
            scaler,
            tree,
        })
    }

    pub fn predict(&self, fv: &FeatureVector) -> Result<UnrollFactor, BaselineError> {
        tree_predict(&self.tree, &self.scaler.transform(&fv.to_row()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, BaselineError> {
        let v = check_container(text, "tree")?;
        let m: TreeModel = serde_json::from_value(v).map_err(|e| MlpError::CorruptFile(e.to_string()))?;
        let n = m.tree.nodes.len();
        let bad_child = m.tree.nodes.iter().enumerate().any(|(i, node)| match node {
            Node::Split { left, right, feature, .. } => {
                *left <= i || *right <= i || *left >= n || *right >= n || *feature >= m.tree.width
            }
            Node::Leaf { .. } => false,
        });
        if n == 0 || bad_child || m.tree.width != m.scaler.output_width() {
            return Err(MlpError::CorruptFile("inconsistent tree structure".into()).into());
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), BaselineError> {
        std::fs::write(path, self.to_json()).map_err(|source| {
            BaselineError::Model(MlpError::Io {
                path: path.display().to_string(),
                source,
            })
        })
    }

    pub fn load(path: &Path) -> Result<Self, BaselineError> {
        let text = std::fs::read_to_string(path).map_err(|source| {
            BaselineError::Model(MlpError::Io {
                path: path.display().to_string(),
                source,
            })
        })?;
        TreeModel::from_json(&text)
    }
}

/// KNN over the training rows, scaled like the other models.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    pub config: KnnConfig,
    pub scaler: Scaler,
    pub train: LabeledRows,
}

impl KnnModel {
    pub fn fit(train: &[Row], cfg: KnnConfig, mode: ScaleMode) -> Result<Self, BaselineError> {
        if train.is_empty() {
            return Err(BaselineError::EmptyTrainingSet);
        }
        let rows: Vec<Vec<f64>> = train.iter().map(|r| r.features.to_row()).collect();
        let scaler = fit_scaler(&rows, mode)?;
        let train = LabeledRows::scaled(train, &scaler);
        Ok(KnnModel {
            config: KnnConfig {
                k: cfg.k.min(train.len()),
            },
            scaler,
            train,
        })
    }

    pub fn predict(&self, fv: &FeatureVector) -> Result<UnrollFactor, BaselineError> {
        knn_predict(&self.train, self.config, &self.scaler.transform(&fv.to_row()))
    }
}

/// Two-column `model | accuracy` table, accuracy as a percentage.
pub fn accuracy_table(entries: &[(&str, f64)]) -> String {
    let w = entries.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut s = format!("{:<w$}  accuracy\n", "model");
    s.push_str(&format!("{}  --------\n", "-".repeat(w)));
    for (name, acc) in entries {
        s.push_str(&format!("{name:<w$}  {:>7.2}%\n", acc * 100.0));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(u: u32) -> UnrollFactor {
        UnrollFactor::new(u).unwrap()
    }

    fn hand_set() -> LabeledRows {
        // two interleaved clusters plus some stragglers
        let pts = [
            (0.0, 0.0, 2),
            (1.0, 0.0, 2),
            (0.0, 1.0, 2),
            (1.0, 1.0, 4),
            (2.0, 2.0, 4),
            (3.0, 2.0, 4),
            (2.0, 3.0, 4),
            (5.0, 5.0, 8),
            (6.0, 5.0, 8),
            (5.0, 6.0, 8),
            (6.0, 6.0, 0),
            (-1.0, 4.0, 16),
            (-2.0, 5.0, 16),
            (-1.5, 4.5, 16),
            (4.0, -1.0, 32),
            (5.0, -2.0, 32),
            (4.5, -1.5, 64),
            (3.0, 3.0, 0),
            (0.5, 0.5, 2),
            (2.5, 2.5, 4),
        ];
        LabeledRows::new(
            pts.iter().map(|&(a, b, _)| vec![a, b]).collect(),
            pts.iter().map(|&(_, _, l)| f(l)).collect(),
        )
    }

    #[test]
    fn knn_trivial_cases() {
        let s = hand_set();
        for i in 0..s.len() {
            assert_eq!(knn_predict(&s, KnnConfig { k: 1 }, &s.x[i]).unwrap(), s.y[i]);
        }
        // global majority: 4 has five votes, the most of any label
        let all = knn_predict(&s, KnnConfig { k: 20 }, &[100.0, 100.0]).unwrap();
        assert_eq!(all, f(4));
        assert!(matches!(
            knn_predict(&LabeledRows::default(), KnnConfig::default(), &[0.0]),
            Err(BaselineError::EmptyTrainingSet)
        ));
        assert!(knn_predict(&s, KnnConfig { k: 21 }, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn knn_vote_tie_prefers_smaller_factor() {
        let s = LabeledRows::new(vec![vec![0.0], vec![1.0], vec![-1.0]], vec![f(8), f(4), f(2)]);
        // k=2 at 0.4: nearest are 0.0 (8) and 1.0 (4), one vote each
        assert_eq!(knn_predict(&s, KnnConfig { k: 2 }, &[0.4]).unwrap(), f(4));
        // equidistant neighbours: lower index is ranked first
        assert_eq!(knn_predict(&s, KnnConfig { k: 1 }, &[0.5]).unwrap(), f(8));
    }

    #[test]
    fn tree_pure_set_is_one_leaf() {
        let s = LabeledRows::new(vec![vec![1.0, 2.0], vec![3.0, 4.0]], vec![f(16), f(16)]);
        let t = tree_fit(&s, TreeConfig::default()).unwrap();
        assert_eq!(t.nodes.len(), 1);
        assert_eq!(tree_predict(&t, &[-9.0, 9.0]).unwrap(), f(16));
    }

    #[test]
    fn tree_one_dimensional_split() {
        let xs = [-3.0, -2.0, -0.5, 0.0, 1.0, 2.5];
        let s = LabeledRows::new(
            xs.iter().map(|&x| vec![x]).collect(),
            xs.iter().map(|&x| if x < 0.0 { f(2) } else { f(4) }).collect(),
        );
        let t = tree_fit(&s, TreeConfig::default()).unwrap();
        match t.nodes[0] {
            Node::Split { threshold, .. } => assert!(threshold > -0.5 && threshold <= 0.0),
            _ => panic!("expected a split"),
        }
        assert_eq!(tree_predict(&t, &[-1.0]).unwrap(), f(2));
        assert_eq!(tree_predict(&t, &[0.5]).unwrap(), f(4));
        assert_eq!(t.depth(), 1);
    }

    #[test]
    fn depth_one_tree_matches_exhaustive_search() {
        let x: Vec<Vec<f64>> = (0..10)
            .map(|i| vec![((i * 7) % 10) as f64, ((i * 3) % 5) as f64, (i % 2) as f64])
            .collect();
        let y: Vec<UnrollFactor> = [0, 2, 2, 4, 0, 4, 2, 0, 4, 4].iter().map(|&u| f(u)).collect();
        let s = LabeledRows::new(x, y);
        // brute force: every feature and every observed value as a `<=` cut
        let mut best = f64::INFINITY;
        for feat in 0..3 {
            for t in s.x.iter().map(|r| r[feat]) {
                let (mut l, mut r) = ([0usize; 7], [0usize; 7]);
                for (row, lab) in s.x.iter().zip(&s.y) {
                    if row[feat] <= t { l[lab.class_index()] += 1 } else { r[lab.class_index()] += 1 }
                }
                if l.iter().sum::<usize>() > 0 && r.iter().sum::<usize>() > 0 {
                    best = best.min(split_impurity(&l, &r));
                }
            }
        }
        let t = tree_fit(&s, TreeConfig { max_depth: 1, min_samples_split: 2 }).unwrap();
        let Node::Split { feature, threshold, .. } = t.nodes[0] else { panic!("no split") };
        let (mut l, mut r) = ([0usize; 7], [0usize; 7]);
        for (row, lab) in s.x.iter().zip(&s.y) {
            if row[feature] <= threshold { l[lab.class_index()] += 1 } else { r[lab.class_index()] += 1 }
        }
        assert!((split_impurity(&l, &r) - best).abs() < 1e-12);
        assert_eq!(t.depth(), 1);
    }

    #[test]
    fn accuracy_table_shape() {
        let t = accuracy_table(&[("mlp", 0.2039), ("knn", 0.197)]);
        assert_eq!(t.lines().count(), 4);
        assert!(t.contains("20.39%"));
        assert!(t.contains("19.70%"));
    }
}
