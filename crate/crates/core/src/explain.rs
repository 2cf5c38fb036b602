//! Exact interventional Shapley values against a background sample.
//!
//! The value of a coalition `S` is the mean model output over background
//! rows with the features in `S` replaced by the explained row's values.
//! For tree ensembles the game splits into one game per tree over that
//! tree's own split features, which keeps enumeration small.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::model::{Model, ModelError, Predictor, TreeEnsemble, TreeNode};
use crate::Scalar;

pub const MAX_FEATURES: usize = 15;
pub const MAX_BACKGROUND: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExplainError {
    #[error("{count} features exceed the enumeration bound of {max}")]
    TooManyFeatures { count: usize, max: usize },
    #[error("background sample is empty")]
    EmptyBackground,
    #[error("row has {found} values, model expects {expected}")]
    RowLength { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub feature: String,
    pub value: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapReport {
    pub row_id: String,
    /// Expected prediction over the background.
    pub base_value: f64,
    pub prediction: f64,
    /// One entry per model feature, in model column order.
    pub per_feature: Vec<Contribution>,
}

impl ShapReport {
    pub fn phi(&self, feature: &str) -> Option<f64> {
        self.per_feature.iter().find(|c| c.feature == feature).map(|c| c.phi)
    }

    /// `prediction - base_value - sum(phi)`.
    pub fn efficiency_gap(&self) -> f64 {
        self.prediction - self.base_value - self.per_feature.iter().map(|c| c.phi).sum::<f64>()
    }
}

/// `|S|! (n-|S|-1)! / n!` for every coalition size.
fn coalition_weights(n: usize) -> Vec<f64> {
    let fact: Vec<f64> = (0..=n).scan(1.0, |acc, k| {
        if k > 0 {
            *acc *= k as f64;
        }
        Some(*acc)
    })
    .collect();
    (0..n).map(|s| fact[s] * fact[n - s - 1] / fact[n]).collect()
}

/// Shapley values of the game `v` over `n` players given as a table
/// indexed by coalition bitmask.
fn shapley_from_table<T: Scalar>(v: &[T], n: usize) -> Vec<T> {
    let w: Vec<T> = coalition_weights(n).into_iter().map(T::of).collect();
    (0..n)
        .map(|i| {
            let bit = 1usize << i;
            (0..v.len())
                .filter(|s| s & bit == 0)
                .map(|s| w[s.count_ones() as usize] * (v[s | bit] - v[s]))
                .sum()
        })
        .collect()
}

fn check<T: Scalar>(n_features: usize, x: &[T], background: &[Vec<T>]) -> Result<(), ExplainError> {
    if n_features > MAX_FEATURES {
        return Err(ExplainError::TooManyFeatures {
            count: n_features,
            max: MAX_FEATURES,
        });
    }
    if background.is_empty() {
        return Err(ExplainError::EmptyBackground);
    }
    for r in std::iter::once(x).chain(background.iter().map(|b| b.as_slice())) {
        if r.len() != n_features {
            return Err(ExplainError::RowLength {
                expected: n_features,
                found: r.len(),
            });
        }
    }
    Ok(())
}

fn report<T: Scalar>(names: &[String], x: &[T], base: T, prediction: T, phi: &[T], row_id: &str) -> ShapReport {
    ShapReport {
        row_id: row_id.to_string(),
        base_value: base.as_f64(),
        prediction: prediction.as_f64(),
        per_feature: names
            .iter()
            .zip(x)
            .zip(phi)
            .map(|((n, v), p)| Contribution {
                feature: n.clone(),
                value: v.as_f64(),
                phi: p.as_f64(),
            })
            .collect(),
    }
}

/// Model-agnostic enumeration of all `2^F` coalitions.
pub fn shapley_enumerate<T, P>(model: &P, x: &[T], background: &[Vec<T>], row_id: &str) -> Result<ShapReport, ExplainError>
where
    T: Scalar,
    P: Predictor<T> + ?Sized,
{
    let n = model.feature_names().len();
    check(n, x, background)?;
    let nb = T::of_usize(background.len());
    let v: Vec<T> = (0..1usize << n)
        .into_par_iter()
        .map(|s| {
            let mut sum = T::zero();
            let mut row = vec![T::zero(); n];
            for b in background {
                for j in 0..n {
                    row[j] = if s >> j & 1 == 1 { x[j] } else { b[j] };
                }
                sum = sum + model.predict_row(&row);
            }
            sum / nb
        })
        .collect();
    let phi = shapley_from_table(&v, n);
    Ok(report(model.feature_names(), x, v[0], model.predict_row(x), &phi, row_id))
}

fn goes_left<T: Scalar>(v: T, threshold: T, default_left: bool) -> bool {
    if v.is_nan() {
        default_left
    } else {
        v < threshold
    }
}

/// Adds each leaf weight to every local coalition that routes the
/// composite row to that leaf.
fn accumulate<T: Scalar>(
    node: &TreeNode<T>,
    x: &[T],
    b: &[T],
    local: &BTreeMap<usize, usize>,
    full: usize,
    masks: (usize, usize),
    table: &mut [T],
) {
    let (inside, outside) = masks;
    match node {
        TreeNode::Leaf { weight } => {
            let free = full & !(inside | outside);
            let mut sub = free;
            loop {
                table[inside | sub] = table[inside | sub] + *weight;
                if sub == 0 {
                    break;
                }
                sub = (sub - 1) & free;
            }
        }
        TreeNode::Split {
            feature,
            threshold,
            default_left,
            left,
            right,
        } => {
            let child = |l: bool| if l { left.as_ref() } else { right.as_ref() };
            let dx = goes_left(x[*feature], *threshold, *default_left);
            let db = goes_left(b[*feature], *threshold, *default_left);
            if dx == db {
                return accumulate(child(dx), x, b, local, full, masks, table);
            }
            let bit = 1usize << local[feature];
            if inside & bit != 0 {
                accumulate(child(dx), x, b, local, full, masks, table);
            } else if outside & bit != 0 {
                accumulate(child(db), x, b, local, full, masks, table);
            } else {
                accumulate(child(dx), x, b, local, full, (inside | bit, outside), table);
                accumulate(child(db), x, b, local, full, (inside, outside | bit), table);
            }
        }
    }
}

/// Shapley values of one tree's game: base value and `(feature, phi)`.
fn tree_shapley<T: Scalar>(tree: &TreeNode<T>, x: &[T], background: &[Vec<T>]) -> (T, Vec<(usize, T)>) {
    let used = tree.used_features();
    let local: BTreeMap<usize, usize> = used.iter().enumerate().map(|(k, &f)| (f, k)).collect();
    let full = (1usize << used.len()) - 1;
    let mut table = vec![T::zero(); 1 << used.len()];
    for b in background {
        accumulate(tree, x, b, &local, full, (0, 0), &mut table);
    }
    let nb = T::of_usize(background.len());
    for t in &mut table {
        *t = *t / nb;
    }
    let phi = shapley_from_table(&table, used.len());
    (table[0], used.into_iter().zip(phi).collect())
}

/// Tree-ensemble path: per-tree games combined by linearity.
pub fn shapley_trees<T: Scalar>(
    ensemble: &dyn TreeEnsemble<T>,
    names: &[String],
    x: &[T],
    background: &[Vec<T>],
    row_id: &str,
) -> Result<ShapReport, ExplainError> {
    check(names.len(), x, background)?;
    let comps = ensemble.components();
    let parts: Vec<(T, Vec<(usize, T)>)> = comps
        .par_iter()
        .map(|(_, tree)| tree_shapley(tree, x, background))
        .collect();
    let mut base = ensemble.offset();
    let mut phi = vec![T::zero(); names.len()];
    let mut prediction = ensemble.offset();
    for ((w, tree), (b0, part)) in comps.iter().zip(&parts) {
        base = base + *w * *b0;
        prediction = prediction + *w * tree.predict(x);
        for (f, p) in part {
            phi[*f] = phi[*f] + *w * *p;
        }
    }
    Ok(report(names, x, base, prediction, &phi, row_id))
}

/// Exact Shapley values for one row; tree models take the per-tree path.
pub fn shapley_exact<T: Scalar>(model: &Model<T>, x: &[T], background: &[Vec<T>], row_id: &str) -> Result<ShapReport, ExplainError> {
    match model.as_ensemble() {
        Some(e) => shapley_trees(e, model.feature_names(), x, background, row_id),
        None => shapley_enumerate(model, x, background, row_id),
    }
}

/// Seeded subsample of at most `cap` rows, kept in table order.
pub fn background_sample<T: Scalar>(ds: &Dataset<T>, cap: usize, seed: u64) -> Vec<Vec<T>> {
    let n = ds.n_rows();
    if n <= cap {
        return ds.x.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| ds.x[i].clone()).collect()
}

/// Explains the selected rows of `table` (all rows when `rows` is `None`).
/// Row ids are the row timestamps.
pub fn explain_table<T: Scalar>(
    model: &Model<T>,
    table: &Dataset<T>,
    rows: Option<&[usize]>,
    background: &[Vec<T>],
) -> Result<Vec<ShapReport>, ExplainError> {
    if table.names != model.feature_names() {
        return Err(ModelError::SchemaMismatch {
            expected: model.feature_names().to_vec(),
            found: table.names.clone(),
        }
        .into());
    }
    let all: Vec<usize> = (0..table.n_rows()).collect();
    let rows = rows.unwrap_or(&all);
    rows.iter()
        .map(|&i| {
            let id = table.timestamps.get(i).map(|t| t.to_string()).unwrap_or_else(|| i.to_string());
            shapley_exact(model, &table.x[i], background, &id)
        })
        .collect()
}

/// Features by mean |phi|, descending; ties by name.
pub fn global_importance(reports: &[ShapReport]) -> Vec<(String, f64)> {
    let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for r in reports {
        for c in &r.per_feature {
            let e = acc.entry(&c.feature).or_insert((0.0, 0));
            e.0 += c.phi.abs();
            e.1 += 1;
        }
    }
    let mut out: Vec<(String, f64)> = acc.into_iter().map(|(k, (s, n))| (k.to_string(), s / n as f64)).collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

/// Long-format `(row_id, feature, value, phi)` table for beeswarm plots.
pub fn beeswarm_csv(reports: &[ShapReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["row_id", "feature", "value", "phi"]).expect("in-memory write");
    for r in reports {
        for c in &r.per_feature {
            w.write_record([r.row_id.as_str(), &c.feature, &c.value.to_string(), &c.phi.to_string()])
                .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{fit_gbt, fit_linear, GbtHyperParams, GbtModel, ModelSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("f{i}")).collect()
    }

    fn table(n: usize, p: usize, seed: u64, f: impl Fn(&[f64]) -> f64) -> Dataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let y = x.iter().map(|r| f(r) + rng.random_range(-0.05..0.05)).collect();
        Dataset::from_xy(names(p), x, y)
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    /// Average marginal contribution over every player ordering.
    fn permutation_oracle(model: &dyn Predictor<f64>, x: &[f64], background: &[Vec<f64>]) -> (f64, Vec<f64>) {
        let n = x.len();
        let value = |present: &[bool]| {
            background
                .iter()
                .map(|b| {
                    let row: Vec<f64> = (0..n).map(|j| if present[j] { x[j] } else { b[j] }).collect();
                    model.predict_row(&row)
                })
                .sum::<f64>()
                / background.len() as f64
        };
        let perms = permutations(n);
        let mut phi = vec![0.0; n];
        for p in &perms {
            let mut present = vec![false; n];
            let mut prev = value(&present);
            for &i in p {
                present[i] = true;
                let cur = value(&present);
                phi[i] += cur - prev;
                prev = cur;
            }
        }
        for v in &mut phi {
            *v /= perms.len() as f64;
        }
        (value(&vec![false; n]), phi)
    }

    fn five_feature_gbt() -> (Model<f64>, Dataset<f64>) {
        let ds = table(200, 5, 1, |r| 3.0 * r[0] * r[1] + (4.0 * r[2]).sin() - r[3] + 0.5 * r[4]);
        let m = ModelSpec::Gbt(GbtHyperParams { n_estimators: 30, max_depth: 4, learning_rate: 0.2, ..Default::default() })
            .fit(&ds, 0)
            .unwrap();
        (m, ds)
    }

    #[test]
    fn tree_path_matches_permutation_oracle() {
        let (m, ds) = five_feature_gbt();
        let bg: Vec<Vec<f64>> = ds.x[..20].to_vec();
        for x in ds.x.iter().skip(100).take(10) {
            let rep = shapley_exact(&m, x, &bg, "r").unwrap();
            let (base, phi) = permutation_oracle(&m, x, &bg);
            assert!((rep.base_value - base).abs() < 1e-9);
            for (c, o) in rep.per_feature.iter().zip(&phi) {
                assert!((c.phi - o).abs() < 1e-9, "{} vs {o}", c.phi);
            }
            let brute = shapley_enumerate(&m, x, &bg, "r").unwrap();
            for (a, b) in rep.per_feature.iter().zip(&brute.per_feature) {
                assert!((a.phi - b.phi).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn efficiency_on_hundred_rows() {
        let (m, ds) = five_feature_gbt();
        let bg = ds.x[..20].to_vec();
        for x in &ds.x[100..200] {
            let rep = shapley_exact(&m, x, &bg, "r").unwrap();
            assert!(rep.efficiency_gap().abs() < 1e-9, "{}", rep.efficiency_gap());
        }
    }

    #[test]
    fn unused_feature_is_exactly_zero() {
        // f2 never influences y, and a stump ensemble on f0 never splits on it.
        let ds = table(60, 3, 2, |r| if r[0] < 0.5 { 0.0 } else { 10.0 });
        let m = Model::Gbt(fit_gbt(&ds, &GbtHyperParams { n_estimators: 5, max_depth: 1, ..Default::default() }, 0).unwrap());
        let bg = ds.x[..15].to_vec();
        for x in &ds.x[20..30] {
            assert_eq!(shapley_exact(&m, x, &bg, "r").unwrap().per_feature[2].phi, 0.0);
            assert_eq!(shapley_enumerate(&m, x, &bg, "r").unwrap().per_feature[2].phi, 0.0);
        }
        let ranking = global_importance(&[shapley_exact(&m, &ds.x[25], &bg, "r").unwrap()]);
        assert_eq!(ranking.last().unwrap().1, 0.0);
    }

    #[test]
    fn duplicated_features_share_credit() {
        let stump = |f| TreeNode::Split {
            feature: f,
            threshold: 0.5,
            default_left: true,
            left: Box::new(TreeNode::Leaf { weight: -1.0 }),
            right: Box::new(TreeNode::Leaf { weight: 2.0 }),
        };
        let m = Model::Gbt(GbtModel {
            base_score: 1.0,
            learning_rate: 0.5,
            trees: vec![stump(0), stump(1)],
            feature_names: names(3),
            params: GbtHyperParams::default(),
        });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut row = || {
            let v: f64 = rng.random_range(0.0..1.0);
            vec![v, v, rng.random_range(0.0..1.0)]
        };
        let bg: Vec<Vec<f64>> = (0..10).map(|_| row()).collect();
        for _ in 0..10 {
            let x = row();
            let rep = shapley_exact(&m, &x, &bg, "r").unwrap();
            assert!((rep.per_feature[0].phi - rep.per_feature[1].phi).abs() < 1e-9);
        }
        let lin = Dataset::from_xy(names(2), (0..6).map(|i| vec![i as f64, i as f64]).collect(), (0..6).map(|i| 4.0 * i as f64).collect());
        let lm = Model::Linear(fit_linear(&lin).unwrap());
        let rep = shapley_exact(&lm, &[5.0, 5.0], &lin.x, "r").unwrap();
        assert!((rep.per_feature[0].phi - rep.per_feature[1].phi).abs() < 1e-9);
    }

    #[test]
    fn single_feature_game() {
        let ds = table(40, 1, 4, |r| 2.0 * r[0]);
        let m = ModelSpec::Gbt(GbtHyperParams { n_estimators: 10, ..Default::default() }).fit(&ds, 0).unwrap();
        let rep = shapley_exact(&m, &ds.x[3], &ds.x[10..20], "r").unwrap();
        assert!((rep.per_feature[0].phi - (rep.prediction - rep.base_value)).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let ds = table(20, 16, 5, |r| r[0]);
        let m = Model::Linear(fit_linear(&ds).unwrap());
        assert!(matches!(
            shapley_exact(&m, &ds.x[0], &ds.x, "r"),
            Err(ExplainError::TooManyFeatures { count: 16, .. })
        ));
        let small = table(20, 2, 5, |r| r[0]);
        let m = Model::Linear(fit_linear(&small).unwrap());
        assert_eq!(shapley_exact(&m, &small.x[0], &[], "r"), Err(ExplainError::EmptyBackground));
    }

    #[test]
    fn planted_importance_ranks_stronger_feature_first() {
        let mut wins = 0;
        for seed in 0..20 {
            let ds = table(150, 2, 100 + seed, |r| 5.0 * r[0] + r[1]);
            let m = ModelSpec::Gbt(GbtHyperParams { n_estimators: 40, max_depth: 3, learning_rate: 0.2, ..Default::default() })
                .fit(&ds, seed)
                .unwrap();
            let bg = background_sample(&ds, 30, seed);
            let reps = explain_table(&m, &ds, Some(&(0..50).collect::<Vec<_>>()), &bg).unwrap();
            if global_importance(&reps)[0].0 == "f0" {
                wins += 1;
            }
        }
        assert!(wins >= 19, "{wins}/20");
    }

    #[test]
    fn importance_ties_break_by_name() {
        let rep = |f: &str, phi| ShapReport {
            row_id: "0".into(),
            base_value: 0.0,
            prediction: 0.0,
            per_feature: vec![Contribution { feature: f.into(), value: 0.0, phi }],
        };
        let g = global_importance(&[rep("b", 1.0), rep("a", -1.0), rep("c", 3.0)]);
        let order: Vec<&str> = g.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(order, ["c", "a", "b"]);
    }

    #[test]
    fn beeswarm_has_one_line_per_contribution() {
        let (m, ds) = five_feature_gbt();
        let reps = explain_table(&m, &ds, Some(&[0, 1]), &ds.x[..5]).unwrap();
        assert_eq!(beeswarm_csv(&reps).lines().count(), 1 + 2 * 5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn efficiency_holds_for_random_rows(seed in 0u64..1000, a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0) {
            let ds = table(50, 3, seed, |r| r[0] - 2.0 * r[1] * r[2]);
            let m = ModelSpec::Gbt(GbtHyperParams { n_estimators: 8, max_depth: 3, ..Default::default() }).fit(&ds, 0).unwrap();
            let rep = shapley_exact(&m, &[a, b, c], &ds.x[..10], "p").unwrap();
            prop_assert!(rep.efficiency_gap().abs() < 1e-9);
        }
    }
}
