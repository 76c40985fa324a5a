//! Global rules from counterfactuals: a CART tree separates benign
//! counterfactuals from their attack queries, and high-purity benign paths
//! become conjunctive filter rules.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{train_blackbox, BlackBoxClassifier, ClassifierMetrics};
use crate::data::{stratified_split, Dataset, FeatureSchema, FittedPreprocessor};
use crate::error::{Error, Result};
use crate::explain::CounterfactualBatch;
use crate::nn::Mat;
use crate::rng::rng_from;
use crate::train::TrainConfig;

pub const DEFAULT_PURITY: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        counts: [usize; 2],
    },
    Leaf {
        counts: [usize; 2],
    },
}

impl Node {
    pub fn counts(&self) -> [usize; 2] {
        match self {
            Node::Split { counts, .. } | Node::Leaf { counts } => *counts,
        }
    }

    /// Fraction of benign (label 0) rows at this node.
    pub fn benign_purity(&self) -> f64 {
        let c = self.counts();
        c[0] as f64 / (c[0] + c[1]) as f64
    }

    /// Majority label; ties go to benign.
    pub fn majority(&self) -> u8 {
        let c = self.counts();
        u8::from(c[1] > c[0])
    }
}

/// Binary CART classifier with Gini splits and no depth limit. Rows go left
/// when `x[feature] <= threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
    /// Leaves that stayed impure because their rows were indistinguishable.
    pub impure_leaves: usize,
}

fn gini(c: [usize; 2]) -> f64 {
    let n = (c[0] + c[1]) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let p = c[0] as f64 / n;
    let q = c[1] as f64 / n;
    1.0 - p * p - q * q
}

fn count(labels: &[u8], idx: &[usize]) -> [usize; 2] {
    let mut c = [0, 0];
    for &i in idx {
        c[labels[i] as usize] += 1;
    }
    c
}

fn best_split(rows: &Mat, labels: &[u8], idx: &[usize], schema: &FeatureSchema) -> Option<(usize, f64)> {
    let total = count(labels, idx);
    let n = idx.len() as f64;
    let mut best: Option<(f64, usize, f64)> = None;
    let mut order = idx.to_vec();
    for (j, feature) in schema.features().iter().enumerate() {
        order.sort_by(|&a, &b| rows.get(a, j).total_cmp(&rows.get(b, j)).then(a.cmp(&b)));
        let mut left = [0usize; 2];
        for w in 0..order.len() - 1 {
            left[labels[order[w]] as usize] += 1;
            let lo = rows.get(order[w], j);
            let hi = rows.get(order[w + 1], j);
            if lo == hi {
                continue;
            }
            let right = [total[0] - left[0], total[1] - left[1]];
            let nl = (w + 1) as f64;
            let score = (nl / n) * gini(left) + ((n - nl) / n) * gini(right);
            let threshold = if feature.is_categorical() { lo + 0.5 } else { lo + (hi - lo) / 2.0 };
            if best.is_none_or(|(s, _, _)| score < s) {
                best = Some((score, j, threshold));
            }
        }
    }
    best.map(|(_, j, t)| (j, t))
}

impl DecisionTree {
    /// Grows the tree to purity on original-unit rows whose categorical
    /// columns hold category indices. Split ties resolve to the lowest
    /// feature index, then the lowest threshold.
    pub fn fit(rows: &Mat, labels: &[u8], schema: &FeatureSchema) -> Result<Self> {
        if rows.rows() == 0 {
            return Err(Error::Empty("decision tree training rows".into()));
        }
        if labels.len() != rows.rows() {
            return Err(Error::shape("tree labels", rows.rows(), labels.len()));
        }
        if rows.cols() != schema.len() {
            return Err(Error::shape("tree row width", schema.len(), rows.cols()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidArgument(format!("label {bad} is not binary")));
        }
        let mut tree = DecisionTree {
            nodes: Vec::new(),
            impure_leaves: 0,
        };
        let root: Vec<usize> = (0..rows.rows()).collect();
        tree.nodes.push(Node::Leaf {
            counts: count(labels, &root),
        });
        let mut stack = vec![(0usize, root)];
        while let Some((id, idx)) = stack.pop() {
            let counts = count(labels, &idx);
            if counts[0] == 0 || counts[1] == 0 {
                continue;
            }
            let Some((feature, threshold)) = best_split(rows, labels, &idx, schema) else {
                tree.impure_leaves += 1;
                continue;
            };
            let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| rows.get(i, feature) <= threshold);
            let left = tree.nodes.len();
            tree.nodes.push(Node::Leaf {
                counts: count(labels, &l),
            });
            tree.nodes.push(Node::Leaf {
                counts: count(labels, &r),
            });
            tree.nodes[id] = Node::Split {
                feature,
                threshold,
                left,
                right: left + 1,
                counts,
            };
            stack.push((left + 1, r));
            stack.push((left, l));
        }
        if tree.impure_leaves > 0 {
            warn!("{} tree leaves hold identical rows with mixed labels", tree.impure_leaves);
        }
        Ok(tree)
    }

    pub fn leaf_of(&self, row: &[f64]) -> usize {
        let mut id = 0;
        while let Node::Split {
            feature,
            threshold,
            left,
            right,
            ..
        } = &self.nodes[id]
        {
            id = if row[*feature] <= *threshold { *left } else { *right };
        }
        id
    }

    pub fn predict(&self, row: &[f64]) -> u8 {
        self.nodes[self.leaf_of(row)].majority()
    }

    pub fn split_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Split { .. })).count()
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&i| matches!(self.nodes[i], Node::Leaf { .. }))
    }

    /// Root-to-node paths as (node id, went left) steps, for every leaf.
    fn leaf_paths(&self) -> Vec<(usize, Vec<(usize, bool)>)> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((id, path)) = stack.pop() {
            match &self.nodes[id] {
                Node::Leaf { .. } => out.push((id, path)),
                Node::Split { left, right, .. } => {
                    let mut r = path.clone();
                    r.push((id, false));
                    stack.push((*right, r));
                    let mut l = path;
                    l.push((id, true));
                    stack.push((*left, l));
                }
            }
        }
        out
    }
}

/// Trains the tree on benign counterfactuals (label 0) against their attack
/// queries (label 1), both in original units.
pub fn train_tree(cfs: &Mat, attacks: &Mat, schema: &FeatureSchema) -> Result<DecisionTree> {
    if cfs.rows() == 0 || attacks.rows() == 0 {
        return Err(Error::Empty("tree needs both counterfactuals and attacks".into()));
    }
    let mut all = Vec::with_capacity((cfs.rows() + attacks.rows()) * schema.len());
    all.extend_from_slice(cfs.as_slice());
    all.extend_from_slice(attacks.as_slice());
    let rows = Mat::from_vec(cfs.rows() + attacks.rows(), schema.len(), all)?;
    let mut labels = vec![0u8; cfs.rows()];
    labels.resize(rows.rows(), 1);
    DecisionTree::fit(&rows, &labels, schema)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Op {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
}

impl Op {
    pub fn symbol(self) -> &'static str {
        match self {
            Op::Gt => ">",
            Op::Ge => ">=",
            Op::Lt => "<",
            Op::Le => "<=",
        }
    }

    fn holds(self, x: f64, t: f64) -> bool {
        match self {
            Op::Gt => x > t,
            Op::Ge => x >= t,
            Op::Lt => x < t,
            Op::Le => x <= t,
        }
    }

    fn is_lower(self) -> bool {
        matches!(self, Op::Gt | Op::Ge)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub feature: String,
    pub op: Op,
    pub threshold: f64,
}

impl Atom {
    fn cmp_key(&self, other: &Atom, order: &dyn Fn(&str) -> usize) -> Ordering {
        order(&self.feature)
            .cmp(&order(&other.feature))
            .then(self.op.cmp(&other.op))
            .then(self.threshold.total_cmp(&other.threshold))
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.threshold;
        if t.fract() == 0.0 && t.abs() < 1e15 {
            write!(f, "{}{}{}", self.feature, self.op.symbol(), t as i64)
        } else {
            write!(f, "{}{}{:.2}", self.feature, self.op.symbol(), t)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub atoms: Vec<Atom>,
    /// Node ids along the tree path that produced the rule.
    pub path: Vec<usize>,
    pub support: usize,
    pub purity: f64,
}

impl Rule {
    fn resolve(&self, schema: &FeatureSchema) -> Result<Vec<(usize, Op, f64)>> {
        self.atoms
            .iter()
            .map(|a| {
                schema
                    .index_of(&a.feature)
                    .map(|j| (j, a.op, a.threshold))
                    .ok_or_else(|| Error::Config(format!("rule references unknown feature {:?}", a.feature)))
            })
            .collect()
    }

    pub fn matches(&self, schema: &FeatureSchema, row: &[f64]) -> Result<bool> {
        Ok(self.resolve(schema)?.iter().all(|&(j, op, t)| op.holds(row[j], t)))
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.atoms.is_empty() {
            return write!(f, "true");
        }
        for (i, a) in self.atoms.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{a}")?;
        }
        Ok(())
    }
}

fn path_atom(schema: &FeatureSchema, feature: usize, threshold: f64, left: bool) -> Atom {
    let f = &schema.features()[feature];
    let (op, threshold) = match (f.is_categorical(), left) {
        // category indices are integers, so `<= k + 0.5` reads as `< k + 1`
        (true, true) => (Op::Lt, threshold.ceil()),
        (true, false) => (Op::Ge, threshold.ceil()),
        (false, true) => (Op::Le, threshold),
        (false, false) => (Op::Gt, threshold),
    };
    Atom {
        feature: f.name.clone(),
        op,
        threshold,
    }
}

/// Rules for benign leaves whose path passes through a node with benign
/// purity above `purity`. With `strict_leaf` the leaf itself must qualify.
/// Rules whose own purity does not exceed `purity` are dropped.
pub fn extract_rules(tree: &DecisionTree, schema: &FeatureSchema, purity: f64, strict_leaf: bool) -> Vec<Rule> {
    let mut rules = Vec::new();
    for (leaf, path) in tree.leaf_paths() {
        let node = &tree.nodes[leaf];
        if node.majority() != 0 {
            continue;
        }
        let qualifies = if strict_leaf {
            node.benign_purity() > purity
        } else {
            node.benign_purity() > purity || path.iter().any(|&(id, _)| tree.nodes[id].benign_purity() > purity)
        };
        let leaf_purity = node.benign_purity();
        if !qualifies || leaf_purity <= purity {
            continue;
        }
        let atoms = path
            .iter()
            .map(|&(id, left)| match tree.nodes[id] {
                Node::Split { feature, threshold, .. } => path_atom(schema, feature, threshold, left),
                Node::Leaf { .. } => unreachable!("paths only step through splits"),
            })
            .collect();
        let mut ids: Vec<usize> = path.iter().map(|&(id, _)| id).collect();
        ids.push(leaf);
        rules.push(Rule {
            atoms,
            path: ids,
            support: node.counts()[0],
            purity: leaf_purity,
        });
    }
    rules
}

#[derive(Clone, Copy, Debug)]
struct Bound {
    value: f64,
    strict: bool,
}

#[derive(Clone, Copy, Debug, Default)]
struct Interval {
    lower: Option<Bound>,
    upper: Option<Bound>,
}

impl Interval {
    fn add(&mut self, op: Op, t: f64) {
        let b = Bound {
            value: t,
            strict: matches!(op, Op::Gt | Op::Lt),
        };
        if op.is_lower() {
            self.lower = Some(match self.lower {
                Some(l) if l.value > t || (l.value == t && l.strict) => l,
                _ => b,
            });
        } else {
            self.upper = Some(match self.upper {
                Some(u) if u.value < t || (u.value == t && u.strict) => u,
                _ => b,
            });
        }
    }

    fn is_empty(&self) -> bool {
        match (self.lower, self.upper) {
            (Some(l), Some(u)) => l.value > u.value || (l.value == u.value && (l.strict || u.strict)),
            _ => false,
        }
    }

    /// Whether `self` lies inside `other`.
    fn within(&self, other: &Interval) -> bool {
        let lower_ok = match (other.lower, self.lower) {
            (None, _) => true,
            (Some(_), None) => false,
            (Some(o), Some(s)) => s.value > o.value || (s.value == o.value && (s.strict || !o.strict)),
        };
        let upper_ok = match (other.upper, self.upper) {
            (None, _) => true,
            (Some(_), None) => false,
            (Some(o), Some(s)) => s.value < o.value || (s.value == o.value && (s.strict || !o.strict)),
        };
        lower_ok && upper_ok
    }

    fn atoms(&self, feature: &str) -> Vec<Atom> {
        let mut out = Vec::new();
        if let Some(l) = self.lower {
            out.push(Atom {
                feature: feature.to_string(),
                op: if l.strict { Op::Gt } else { Op::Ge },
                threshold: l.value,
            });
        }
        if let Some(u) = self.upper {
            out.push(Atom {
                feature: feature.to_string(),
                op: if u.strict { Op::Lt } else { Op::Le },
                threshold: u.value,
            });
        }
        out
    }
}

fn intervals(rule: &Rule, schema: &FeatureSchema) -> Result<Vec<Interval>> {
    let mut iv = vec![Interval::default(); schema.len()];
    for (j, op, t) in rule.resolve(schema)? {
        iv[j].add(op, t);
    }
    Ok(iv)
}

/// Tightens each rule to one bound per side per feature, drops rules with
/// empty intervals or whose region lies inside another rule's, and returns
/// the survivors in a canonical order. The union of matched rows is
/// unchanged.
pub fn simplify_rules(rules: &[Rule], schema: &FeatureSchema) -> Result<Vec<Rule>> {
    let mut merged: Vec<(Rule, Vec<Interval>)> = Vec::new();
    for r in rules {
        let iv = intervals(r, schema)?;
        if iv.iter().any(Interval::is_empty) {
            info!("dropping contradictory rule {r}");
            continue;
        }
        let atoms = schema
            .features()
            .iter()
            .zip(&iv)
            .flat_map(|(f, i)| i.atoms(&f.name))
            .collect();
        merged.push((
            Rule {
                atoms,
                ..r.clone()
            },
            iv,
        ));
    }
    let order = |name: &str| schema.index_of(name).unwrap_or(usize::MAX);
    merged.sort_by(|a, b| {
        let (x, y) = (&a.0.atoms, &b.0.atoms);
        x.iter()
            .zip(y)
            .map(|(p, q)| p.cmp_key(q, &order))
            .find(|o| o.is_ne())
            .unwrap_or(x.len().cmp(&y.len()))
    });
    let mut keep = vec![true; merged.len()];
    for i in 0..merged.len() {
        for j in 0..merged.len() {
            if i == j || !keep[j] {
                continue;
            }
            let inside = merged[i].1.iter().zip(&merged[j].1).all(|(a, b)| a.within(b));
            // identical regions keep the earlier rule
            let mutual = inside && merged[j].1.iter().zip(&merged[i].1).all(|(a, b)| a.within(b));
            if inside && (!mutual || j < i) {
                keep[i] = false;
                break;
            }
        }
    }
    Ok(merged.into_iter().zip(keep).filter(|(_, k)| *k).map(|((r, _), _)| r).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterMetrics {
    /// Fraction of attacks matching no rule.
    pub attack_filter_rate: Option<f64>,
    /// Fraction of benign rows matching some rule.
    pub benign_pass_rate: Option<f64>,
    pub attacks: usize,
    pub benign: usize,
}

/// Marks rows matching any rule as benign and scores the verdicts.
pub fn apply_rules(rules: &[Rule], schema: &FeatureSchema, rows: &Mat, labels: &[u8]) -> Result<(Vec<bool>, FilterMetrics)> {
    if labels.len() != rows.rows() {
        return Err(Error::shape("rule labels", rows.rows(), labels.len()));
    }
    let resolved: Vec<Vec<(usize, Op, f64)>> = rules.iter().map(|r| r.resolve(schema)).collect::<Result<_>>()?;
    let matched: Vec<bool> = (0..rows.rows())
        .into_par_iter()
        .map(|i| {
            let row = rows.row(i);
            resolved.iter().any(|r| r.iter().all(|&(j, op, t)| op.holds(row[j], t)))
        })
        .collect();
    let attacks = labels.iter().filter(|&&l| l == 1).count();
    let benign = labels.len() - attacks;
    let filtered = matched.iter().zip(labels).filter(|(&m, &l)| l == 1 && !m).count();
    let passed = matched.iter().zip(labels).filter(|(&m, &l)| l == 0 && m).count();
    let rate = |k: usize, n: usize| (n > 0).then(|| k as f64 / n as f64);
    Ok((
        matched,
        FilterMetrics {
            attack_filter_rate: rate(filtered, attacks),
            benign_pass_rate: rate(passed, benign),
            attacks,
            benign,
        },
    ))
}

/// Purity and support of a rule recomputed on labeled rows.
pub fn rule_purity(rule: &Rule, schema: &FeatureSchema, rows: &Mat, labels: &[u8]) -> Result<(usize, f64)> {
    let mut c = [0usize; 2];
    for (i, &l) in labels.iter().enumerate() {
        if rule.matches(schema, rows.row(i))? {
            c[l as usize] += 1;
        }
    }
    let n = c[0] + c[1];
    Ok((n, if n == 0 { f64::NAN } else { c[0] as f64 / n as f64 }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    pub rules: Vec<Rule>,
    pub purity_threshold: f64,
    pub strict_leaf: bool,
    /// "counterfactual" or "training-data".
    pub source: String,
    pub filter: Option<FilterMetrics>,
}

impl RuleSet {
    pub fn to_text(&self) -> String {
        self.rules.iter().map(|r| format!("{r}\n")).collect()
    }

    pub fn write(&self, text: &Path, json: &Path) -> Result<()> {
        std::fs::write(text, self.to_text())?;
        std::fs::write(json, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Trains the tree, extracts and simplifies rules, and scores them on the
/// extraction rows.
pub fn mine_rules(
    benign: &Mat,
    attacks: &Mat,
    schema: &FeatureSchema,
    purity: f64,
    strict_leaf: bool,
    source: &str,
) -> Result<(DecisionTree, RuleSet)> {
    let tree = train_tree(benign, attacks, schema)?;
    let rules = simplify_rules(&extract_rules(&tree, schema, purity, strict_leaf), schema)?;
    Ok((
        tree,
        RuleSet {
            rules,
            purity_threshold: purity,
            strict_leaf,
            source: source.into(),
            filter: None,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZeroDayConfig {
    pub test_fraction: f64,
    pub n_quantiles: usize,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    /// Held-out accuracy below this logs a warning.
    pub accuracy_floor: f64,
    pub purity: f64,
    pub strict_leaf: bool,
    /// Also mine rules with random benign training rows standing in for the
    /// counterfactuals.
    pub contrast: bool,
}

impl Default for ZeroDayConfig {
    fn default() -> Self {
        ZeroDayConfig {
            test_fraction: 0.2,
            n_quantiles: 1000,
            hidden: crate::classifier::BLACKBOX_HIDDEN.to_vec(),
            train: crate::classifier::blackbox_train_config(),
            accuracy_floor: 0.5,
            purity: DEFAULT_PURITY,
            strict_leaf: false,
            contrast: false,
        }
    }
}

/// Everything a counterfactual generator needs once the tagged attack has
/// been removed from training.
pub struct ZeroDayStage<'a> {
    pub train: &'a Dataset,
    pub preprocessor: &'a FittedPreprocessor,
    pub blackbox: &'a BlackBoxClassifier,
    /// Held-out attack rows of the test split, original units.
    pub queries: &'a Mat,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct ZeroDayOutcome {
    pub rules: RuleSet,
    pub tree: DecisionTree,
    /// Rules from random benign training rows, when requested.
    pub contrast: Option<RuleSet>,
    /// Fraction of held-out attack test rows the classifier flags as attacks.
    pub held_out_accuracy: f64,
    pub test_metrics: ClassifierMetrics,
    pub batches: Vec<CounterfactualBatch>,
}

/// Holds out `attack_tag` from training, trains the black box, generates
/// counterfactuals for the held-out attack's test rows with `generate`, and
/// mines rules from them. Filter metrics are measured on the held-out
/// attack test rows against the benign test rows.
pub fn zero_day_workflow<F>(d: &Dataset, attack_tag: &str, cfg: &ZeroDayConfig, seed: u64, generate: F) -> Result<ZeroDayOutcome>
where
    F: FnOnce(&ZeroDayStage) -> Result<Vec<CounterfactualBatch>>,
{
    let tagged = d.indices_with_tag(attack_tag);
    if tagged.is_empty() {
        return Err(Error::InvalidArgument(format!("no rows carry attack tag {attack_tag:?}")));
    }
    let (train_idx, test_idx) = stratified_split(d, cfg.test_fraction, seed);
    let is_tagged = |i: &usize| d.tags.as_ref().is_some_and(|t| t[*i] == attack_tag);
    let train_idx: Vec<usize> = train_idx.into_iter().filter(|i| !is_tagged(i)).collect();
    let held: Vec<usize> = test_idx.iter().copied().filter(is_tagged).collect();
    if held.is_empty() {
        return Err(Error::InvalidArgument(format!("test split holds no {attack_tag:?} rows")));
    }
    let benign_test: Vec<usize> = test_idx.iter().copied().filter(|&i| d.labels[i] == 0).collect();
    let train = d.subset(&train_idx);
    let test = d.subset(&test_idx);
    let pp = FittedPreprocessor::fit(&train, cfg.n_quantiles)?;
    let bb = train_blackbox(
        &pp.encode(&train.rows)?,
        &train.labels,
        &cfg.hidden,
        &cfg.train,
        &train.schema.hash(),
        seed,
    )?;
    let test_metrics = bb.evaluate(&pp.encode(&test.rows)?, &test.labels)?;
    let queries = d.rows.select_rows(&held);
    let flagged = bb.predict(&pp.encode(&queries)?)?;
    let held_out_accuracy = flagged.iter().filter(|&&p| p == 1).count() as f64 / held.len() as f64;
    info!("held-out {attack_tag:?} accuracy {:.4}", held_out_accuracy);
    if held_out_accuracy < cfg.accuracy_floor {
        warn!(
            "classifier flags only {:.1}% of held-out {attack_tag:?} rows; rules may be unreliable",
            100.0 * held_out_accuracy
        );
    }
    let batches = generate(&ZeroDayStage {
        train: &train,
        preprocessor: &pp,
        blackbox: &bb,
        queries: &queries,
        seed,
    })?;
    let mut cfs = Vec::new();
    let mut origins = Vec::new();
    for b in &batches {
        for c in 0..b.k() {
            if b.valid[c] {
                cfs.push(b.candidates.row(c).to_vec());
                origins.push(b.query.clone());
            }
        }
    }
    if cfs.is_empty() {
        return Err(Error::Empty("no valid counterfactuals for the held-out attack".into()));
    }
    let origins = Mat::from_rows(&origins)?;
    let (tree, mut rules) = mine_rules(
        &Mat::from_rows(&cfs)?,
        &origins,
        &d.schema,
        cfg.purity,
        cfg.strict_leaf,
        "counterfactual",
    )?;
    let mut eval_idx = held.clone();
    eval_idx.extend(&benign_test);
    let eval = d.subset(&eval_idx);
    rules.filter = Some(apply_rules(&rules.rules, &d.schema, &eval.rows, &eval.labels)?.1);
    let contrast = if cfg.contrast {
        let mut pool = train.indices_with_label(0);
        pool.shuffle(&mut rng_from(seed, &[0xC0_2742]));
        let picks: Vec<usize> = (0..cfs.len()).map(|i| pool[i % pool.len()]).collect();
        let (_, mut c) = mine_rules(
            &train.rows.select_rows(&picks),
            &origins,
            &d.schema,
            cfg.purity,
            cfg.strict_leaf,
            "training-data",
        )?;
        c.filter = Some(apply_rules(&c.rules, &d.schema, &eval.rows, &eval.labels)?.1);
        Some(c)
    } else {
        None
    };
    Ok(ZeroDayOutcome {
        rules,
        tree,
        contrast,
        held_out_accuracy,
        test_metrics,
        batches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Feature;

    fn one_d() -> FeatureSchema {
        FeatureSchema::new(vec![Feature::numerical("x")]).unwrap()
    }

    fn atom(f: &str, op: Op, t: f64) -> Atom {
        Atom {
            feature: f.into(),
            op,
            threshold: t,
        }
    }

    fn rule(atoms: Vec<Atom>) -> Rule {
        Rule {
            atoms,
            path: vec![],
            support: 0,
            purity: 1.0,
        }
    }

    #[test]
    fn separable_split_near_five() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64 + 0.25).collect();
        let labels: Vec<u8> = xs.iter().map(|&x| u8::from(x >= 5.0)).collect();
        let rows = Mat::from_vec(10, 1, xs).unwrap();
        let tree = DecisionTree::fit(&rows, &labels, &one_d()).unwrap();
        assert_eq!(tree.split_count(), 1);
        match tree.nodes[0] {
            Node::Split { threshold, .. } => assert_eq!(threshold, 4.75),
            _ => panic!("expected a split"),
        }
        let rules = extract_rules(&tree, &one_d(), 0.9, false);
        assert_eq!(rules.len(), 1);
        assert_eq!(rules[0].to_string(), "x<=4.75");
    }

    #[test]
    fn pure_input_has_no_splits() {
        let rows = Mat::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let tree = DecisionTree::fit(&rows, &[0, 0, 0], &one_d()).unwrap();
        assert_eq!(tree.split_count(), 0);
        assert_eq!(tree.nodes[0].benign_purity(), 1.0);
    }

    #[test]
    fn identical_rows_flag_impure_leaf() {
        let rows = Mat::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        let tree = DecisionTree::fit(&rows, &[0, 1], &one_d()).unwrap();
        assert_eq!(tree.impure_leaves, 1);
        assert!(extract_rules(&tree, &one_d(), 1.0, false).is_empty());
    }

    #[test]
    fn categorical_thresholds_are_half_integers() {
        let s = FeatureSchema::new(vec![Feature::categorical("c", ["a", "b", "c", "d"])]).unwrap();
        let rows = Mat::from_vec(4, 1, vec![0.0, 2.0, 2.0, 3.0]).unwrap();
        let tree = DecisionTree::fit(&rows, &[0, 1, 1, 1], &s).unwrap();
        match tree.nodes[0] {
            Node::Split { threshold, .. } => assert_eq!(threshold, 0.5),
            _ => panic!("expected a split"),
        }
        let rules = extract_rules(&tree, &s, 0.9, false);
        assert_eq!(rules[0].to_string(), "c<1");
    }

    #[test]
    fn merges_to_tightest_bound() {
        let out = simplify_rules(&[rule(vec![atom("x", Op::Lt, 5.0), atom("x", Op::Lt, 3.0)])], &one_d()).unwrap();
        assert_eq!(out[0].atoms, vec![atom("x", Op::Lt, 3.0)]);
    }

    #[test]
    fn subsumed_rule_is_dropped() {
        let s = FeatureSchema::new(vec![Feature::numerical("x"), Feature::numerical("y")]).unwrap();
        let a = rule(vec![atom("x", Op::Lt, 5.0)]);
        let b = rule(vec![atom("x", Op::Lt, 5.0), atom("y", Op::Gt, 1.0)]);
        let out = simplify_rules(&[b, a.clone()], &s).unwrap();
        assert_eq!(out, vec![a]);
    }

    #[test]
    fn contradictory_rule_is_dropped() {
        let r = rule(vec![atom("x", Op::Lt, 1.0), atom("x", Op::Ge, 1.0)]);
        assert!(simplify_rules(&[r], &one_d()).unwrap().is_empty());
    }

    #[test]
    fn empty_rule_list_filters_everything() {
        let rows = Mat::from_vec(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        let (m, f) = apply_rules(&[], &one_d(), &rows, &[0, 1, 1]).unwrap();
        assert_eq!(m, vec![false; 3]);
        assert_eq!(f.attack_filter_rate, Some(1.0));
        assert_eq!(f.benign_pass_rate, Some(0.0));
    }

    #[test]
    fn tautology_passes_everything() {
        let rows = Mat::from_vec(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        let (m, _) = apply_rules(&[rule(vec![atom("x", Op::Ge, -1e9)])], &one_d(), &rows, &[0, 1, 1]).unwrap();
        assert_eq!(m, vec![true; 3]);
    }

    #[test]
    fn unknown_feature_is_a_config_error() {
        let rows = Mat::from_vec(1, 1, vec![0.0]).unwrap();
        let err = apply_rules(&[rule(vec![atom("gone", Op::Lt, 1.0)])], &one_d(), &rows, &[0]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
