//! Supervised learners used as nuisance-function and proxy estimators:
//! lasso, CART, random forest, gradient boosting, a small neural network,
//! and two hybrids (convex-weighted ensemble and best-by-holdout), behind
//! a single spec/fit/predict interface. Weighted least squares with robust
//! and clustered variance lives here as well.

pub mod boosting;
pub mod forest;
pub mod lasso;
pub mod neural;
pub mod tree;
pub mod wols;

pub use wols::{weighted_ols, VarianceMode, WolsFit};

use crate::dataset::{default_names, expand_interactions};
use crate::error::{Error, Result};
use crate::stats::derive_seed;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

/// Learner families supported by [`fit_learner`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerMethod {
    Lasso,
    Tree,
    Forest,
    Boosting,
    NeuralNet,
    Ensemble,
    Best,
}

impl LearnerMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            LearnerMethod::Lasso => "lasso",
            LearnerMethod::Tree => "tree",
            LearnerMethod::Forest => "forest",
            LearnerMethod::Boosting => "boosting",
            LearnerMethod::NeuralNet => "neural_net",
            LearnerMethod::Ensemble => "ensemble",
            LearnerMethod::Best => "best",
        }
    }

    pub fn all() -> [LearnerMethod; 7] {
        [
            LearnerMethod::Lasso,
            LearnerMethod::Tree,
            LearnerMethod::Forest,
            LearnerMethod::Boosting,
            LearnerMethod::NeuralNet,
            LearnerMethod::Ensemble,
            LearnerMethod::Best,
        ]
    }
}

impl fmt::Display for LearnerMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LearnerMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LearnerMethod::all()
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown learner method '{s}'; expected one of lasso, tree, forest, \
                     boosting, neural_net, ensemble, best"
                ))
            })
    }
}

/// A fully specified learner: method, hyperparameter overrides, shared
/// cross-validation fold count, and seed. Hyperparameters not present in
/// the map take the documented per-method defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub method: LearnerMethod,
    #[serde(default)]
    pub hyperparameters: BTreeMap<String, f64>,
    #[serde(default = "default_cv_folds")]
    pub cv_folds: usize,
    pub seed: u64,
}

fn default_cv_folds() -> usize {
    10
}

/// One row of the hyperparameter schema: name, default, inclusive bounds,
/// and whether the value must be an integer. A `None` default marks an
/// optional parameter with no value unless supplied.
struct ParamDef {
    name: &'static str,
    default: Option<f64>,
    min: f64,
    max: f64,
    integer: bool,
}

const fn p_int(name: &'static str, default: f64, min: f64, max: f64) -> ParamDef {
    ParamDef {
        name,
        default: Some(default),
        min,
        max,
        integer: true,
    }
}

const fn p_real(name: &'static str, default: f64, min: f64, max: f64) -> ParamDef {
    ParamDef {
        name,
        default: Some(default),
        min,
        max,
        integer: false,
    }
}

fn schema(method: LearnerMethod) -> &'static [ParamDef] {
    const LASSO: &[ParamDef] = &[
        p_int("n_lambda", 100.0, 2.0, 10_000.0),
        p_real("lambda_min_ratio", 1e-4, 1e-12, 0.999),
        ParamDef {
            name: "fixed_lambda",
            default: None,
            min: 0.0,
            max: f64::INFINITY,
            integer: false,
        },
        p_int("interactions", 0.0, 0.0, 1.0),
    ];
    const TREE: &[ParamDef] = &[
        p_int("min_leaf", 5.0, 1.0, 1e9),
        p_int("max_depth", 0.0, 0.0, 1e9),
    ];
    const FOREST: &[ParamDef] = &[
        p_int("n_trees", 1000.0, 1.0, 1e6),
        p_int("mtry", 0.0, 0.0, 1e9), // 0 selects the p/3 default
        p_int("min_leaf", 5.0, 1.0, 1e9),
    ];
    const BOOSTING: &[ParamDef] = &[
        p_int("n_stages", 1000.0, 1.0, 1e6),
        p_real("shrinkage", 0.01, 1e-6, 1.999),
        p_real("bag_fraction", 0.5, 1e-6, 1.0),
        p_int("min_leaf", 1.0, 1.0, 1e9),
        p_int("depth_min", 1.0, 1.0, 64.0),
        p_int("depth_max", 4.0, 1.0, 64.0),
    ];
    const NEURAL: &[ParamDef] = &[
        p_int("n_hidden", 2.0, 1.0, 256.0),
        p_real("decay", 0.01, 0.0, f64::INFINITY),
        p_int("max_iter", 5000.0, 1.0, 1e9),
    ];
    const HYBRID: &[ParamDef] = &[p_real("holdout_fraction", 0.2, 1e-9, 0.5)];
    match method {
        LearnerMethod::Lasso => LASSO,
        LearnerMethod::Tree => TREE,
        LearnerMethod::Forest => FOREST,
        LearnerMethod::Boosting => BOOSTING,
        LearnerMethod::NeuralNet => NEURAL,
        LearnerMethod::Ensemble | LearnerMethod::Best => HYBRID,
    }
}

impl LearnerSpec {
    pub fn new(method: LearnerMethod, seed: u64) -> Self {
        LearnerSpec {
            method,
            hyperparameters: BTreeMap::new(),
            cv_folds: default_cv_folds(),
            seed,
        }
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.hyperparameters.insert(name.to_string(), value);
        self
    }

    /// Rejects unknown hyperparameter names and out-of-range or
    /// non-integer values; checks the fold count.
    pub fn validate(&self) -> Result<()> {
        let defs = schema(self.method);
        for (name, &value) in &self.hyperparameters {
            let def = defs.iter().find(|d| d.name == name).ok_or_else(|| {
                let known: Vec<&str> = defs.iter().map(|d| d.name).collect();
                Error::Config(format!(
                    "unknown hyperparameter '{name}' for method {}; known: {}",
                    self.method,
                    known.join(", ")
                ))
            })?;
            if !value.is_finite() {
                return Err(Error::Config(format!(
                    "hyperparameter '{name}' for method {} must be finite, got {value}",
                    self.method
                )));
            }
            if value < def.min || value > def.max {
                return Err(Error::Config(format!(
                    "hyperparameter '{name}' = {value} for method {} is outside [{}, {}]",
                    self.method, def.min, def.max
                )));
            }
            if def.integer && value.fract() != 0.0 {
                return Err(Error::Config(format!(
                    "hyperparameter '{name}' for method {} must be an integer, got {value}",
                    self.method
                )));
            }
        }
        if self.cv_folds < 2 {
            return Err(Error::Config(format!(
                "cv_folds must be at least 2, got {}",
                self.cv_folds
            )));
        }
        if let (Some(&lo), Some(&hi)) = (
            self.hyperparameters.get("depth_min"),
            self.hyperparameters.get("depth_max"),
        ) {
            if lo > hi {
                return Err(Error::Config(format!(
                    "depth_min = {lo} exceeds depth_max = {hi}"
                )));
            }
        }
        Ok(())
    }

    fn param(&self, name: &str) -> f64 {
        if let Some(&v) = self.hyperparameters.get(name) {
            return v;
        }
        schema(self.method)
            .iter()
            .find(|d| d.name == name)
            .and_then(|d| d.default)
            .unwrap_or_else(|| panic!("no default for hyperparameter '{name}'"))
    }

    fn param_usize(&self, name: &str) -> usize {
        self.param(name) as usize
    }

    fn param_opt(&self, name: &str) -> Option<f64> {
        self.hyperparameters.get(name).copied()
    }
}

/// A fitted learner. Prediction accepts rows of the original training
/// width; any interaction expansion requested at fit time is reapplied
/// internally.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Predictor {
    pub method: LearnerMethod,
    /// Named coefficients on the original scale (lasso only).
    pub coefficients: Option<Vec<(String, f64)>>,
    /// Holdout mean squared error, when a holdout was used (hybrids).
    pub oos_loss: Option<f64>,
    /// Width of rows accepted by `predict_row` (pre-expansion).
    input_width: usize,
    /// Pairwise interaction columns were appended at fit time.
    expanded: bool,
    model: Model,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Model {
    Constant(f64),
    Lasso(lasso::LassoModel),
    Tree(tree::RegTree),
    Forest(forest::RegForest),
    Boosting(boosting::BoostModel),
    Neural(neural::NeuralModel),
    /// Convex combination of previously fitted predictors.
    Ensemble(Vec<(f64, Predictor)>),
}

impl Predictor {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        assert_eq!(
            row.len(),
            self.input_width,
            "predictor trained on width {}, got row of width {}",
            self.input_width,
            row.len()
        );
        let expanded_row;
        let row: &[f64] = if self.expanded {
            expanded_row = expand_row(row);
            &expanded_row
        } else {
            row
        };
        match &self.model {
            Model::Constant(c) => *c,
            Model::Lasso(m) => m.predict_row(row),
            Model::Tree(m) => m.predict_row(row),
            Model::Forest(m) => m.predict_row(row),
            Model::Boosting(m) => m.predict_row(row),
            Model::Neural(m) => m.predict_row(row),
            Model::Ensemble(parts) => parts
                .iter()
                .map(|(w, p)| w * p.predict_row(row))
                .sum(),
        }
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| self.predict_row(x.row(i).as_slice().unwrap()))
            .collect()
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    /// Convex weights of an ensemble predictor, in candidate order.
    pub fn ensemble_weights(&self) -> Option<Vec<f64>> {
        match &self.model {
            Model::Ensemble(parts) => Some(parts.iter().map(|(w, _)| *w).collect()),
            _ => None,
        }
    }

    fn constant(method: LearnerMethod, value: f64, input_width: usize) -> Predictor {
        Predictor {
            method,
            coefficients: None,
            oos_loss: None,
            input_width,
            expanded: false,
            model: Model::Constant(value),
        }
    }
}

/// Appends pairwise products `row[i]*row[j]` (i < j) to a single row, in
/// the same order as the matrix-level interaction expansion.
fn expand_row(row: &[f64]) -> Vec<f64> {
    let p = row.len();
    let mut out = Vec::with_capacity(p + p * (p - 1) / 2);
    out.extend_from_slice(row);
    for i in 0..p {
        for j in i + 1..p {
            out.push(row[i] * row[j]);
        }
    }
    out
}

fn validate_fit_inputs(x: &Array2<f64>, y: &[f64], weights: Option<&[f64]>) -> Result<()> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::Data("cannot fit a learner on zero rows".into()));
    }
    if y.len() != n {
        return Err(Error::Data(format!(
            "outcome length {} does not match {} rows",
            y.len(),
            n
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("outcome contains non-finite values".into()));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::Data(format!(
                "weights length {} does not match {} rows",
                w.len(),
                n
            )));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data(
                "weights must be finite and nonnegative".into(),
            ));
        }
        if w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Data("weights sum to zero".into()));
        }
    }
    Ok(())
}

/// Fits the specified learner to `(x, y)`, optionally weighted. Column
/// names default to `x1..xp`; use [`fit_learner_named`] to control the
/// names used in lasso coefficient reporting.
pub fn fit_learner(
    spec: &LearnerSpec,
    x: &Array2<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
) -> Result<Predictor> {
    let names = default_names(x.ncols());
    fit_learner_named(spec, x, y, weights, &names)
}

/// [`fit_learner`] with explicit column names for coefficient reporting.
pub fn fit_learner_named(
    spec: &LearnerSpec,
    x: &Array2<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    names: &[String],
) -> Result<Predictor> {
    spec.validate()?;
    validate_fit_inputs(x, y, weights)?;
    if names.len() != x.ncols() {
        return Err(Error::Data(format!(
            "{} column names for {} columns",
            names.len(),
            x.ncols()
        )));
    }
    let n = x.nrows();

    // A constant outcome is fit exactly by its (weighted) mean under every
    // method; short-circuit so degenerate targets never reach an optimizer.
    if y.iter().all(|&v| v == y[0]) {
        return Ok(Predictor::constant(spec.method, y[0], x.ncols()));
    }

    let uses_cv = matches!(spec.method, LearnerMethod::Lasso | LearnerMethod::Tree);
    if uses_cv && n < 2 * spec.cv_folds {
        return Err(Error::Data(format!(
            "method {} needs at least {} rows for {}-fold cross-validation, got {n}",
            spec.method,
            2 * spec.cv_folds,
            spec.cv_folds
        )));
    }

    match spec.method {
        LearnerMethod::Lasso => {
            let expanded = spec.param("interactions") == 1.0;
            let (xf, names_f) = if expanded {
                expand_interactions(x, names, false)?
            } else {
                (x.clone(), names.to_vec())
            };
            let cfg = lasso::LassoConfig {
                n_lambda: spec.param_usize("n_lambda"),
                lambda_min_ratio: spec.param("lambda_min_ratio"),
                fixed_lambda: spec.param_opt("fixed_lambda"),
                cv_folds: spec.cv_folds,
                seed: derive_seed(spec.seed, &[0x1A55]),
            };
            let model = lasso::fit_lasso(&xf, y, weights, &cfg)?;
            let coefficients = Some(
                names_f
                    .iter()
                    .cloned()
                    .zip(model.coefficients.iter().copied())
                    .collect(),
            );
            Ok(Predictor {
                method: spec.method,
                coefficients,
                oos_loss: None,
                input_width: x.ncols(),
                expanded,
                model: Model::Lasso(model),
            })
        }
        LearnerMethod::Tree => {
            let min_leaf = spec.param_usize("min_leaf");
            let opts = tree::GrowOptions {
                mtry: usize::MAX,
                min_leaf,
                min_split: 2 * min_leaf,
                max_depth: spec.param_usize("max_depth"),
            };
            let model = tree::fit_cart(
                x,
                y,
                weights,
                &opts,
                spec.cv_folds,
                derive_seed(spec.seed, &[0x2EE1]),
            )?;
            Ok(Predictor {
                method: spec.method,
                coefficients: None,
                oos_loss: None,
                input_width: x.ncols(),
                expanded: false,
                model: Model::Tree(model),
            })
        }
        LearnerMethod::Forest => {
            let mtry = match spec.param_usize("mtry") {
                0 => (x.ncols() / 3).max(1),
                m => m.min(x.ncols()),
            };
            let opts = forest::RegForestOptions {
                n_trees: spec.param_usize("n_trees"),
                mtry,
                min_leaf: spec.param_usize("min_leaf"),
                seed: derive_seed(spec.seed, &[0xF03E]),
            };
            let model = forest::fit_reg_forest(x, y, weights, &opts);
            Ok(Predictor {
                method: spec.method,
                coefficients: None,
                oos_loss: None,
                input_width: x.ncols(),
                expanded: false,
                model: Model::Forest(model),
            })
        }
        LearnerMethod::Boosting => {
            let opts = boosting::BoostOptions {
                n_stages: spec.param_usize("n_stages"),
                shrinkage: spec.param("shrinkage"),
                subsample: spec.param("bag_fraction"),
                min_leaf: spec.param_usize("min_leaf"),
                depths: (spec.param_usize("depth_min"), spec.param_usize("depth_max")),
                seed: derive_seed(spec.seed, &[0xB057]),
            };
            let model = boosting::fit_boosting(x, y, weights, &opts)?;
            Ok(Predictor {
                method: spec.method,
                coefficients: None,
                oos_loss: None,
                input_width: x.ncols(),
                expanded: false,
                model: Model::Boosting(model),
            })
        }
        LearnerMethod::NeuralNet => {
            let opts = neural::NeuralOptions {
                n_hidden: spec.param_usize("n_hidden"),
                decay: spec.param("decay"),
                max_iter: spec.param_usize("max_iter"),
                seed: derive_seed(spec.seed, &[0x4E37]),
            };
            let model = neural::fit_neural(x, y, weights, &opts)?;
            Ok(Predictor {
                method: spec.method,
                coefficients: None,
                oos_loss: None,
                input_width: x.ncols(),
                expanded: false,
                model: Model::Neural(model),
            })
        }
        LearnerMethod::Ensemble | LearnerMethod::Best => {
            let mode = if spec.method == LearnerMethod::Ensemble {
                HybridMode::Ensemble
            } else {
                HybridMode::Best
            };
            let specs = default_hybrid_candidates(spec);
            fit_hybrid(
                &specs,
                mode,
                x,
                y,
                weights,
                spec.param("holdout_fraction"),
                spec.seed,
            )
        }
    }
}

/// The default candidate set for hybrid learners: lasso, boosting, random
/// forest, and neural network, each at its defaults with a derived seed.
fn default_hybrid_candidates(spec: &LearnerSpec) -> Vec<LearnerSpec> {
    [
        LearnerMethod::Lasso,
        LearnerMethod::Boosting,
        LearnerMethod::Forest,
        LearnerMethod::NeuralNet,
    ]
    .into_iter()
    .enumerate()
    .map(|(i, method)| LearnerSpec {
        method,
        hyperparameters: BTreeMap::new(),
        cv_folds: spec.cv_folds,
        seed: derive_seed(spec.seed, &[0xCA4D, i as u64]),
    })
    .collect()
}

/// Mean squared prediction error on a holdout sample.
pub fn evaluate_oos(predictor: &Predictor, x: &Array2<f64>, y: &[f64]) -> Result<f64> {
    if x.nrows() == 0 {
        return Err(Error::Data("holdout sample is empty".into()));
    }
    if x.nrows() != y.len() {
        return Err(Error::Data(format!(
            "holdout has {} rows but {} outcomes",
            x.nrows(),
            y.len()
        )));
    }
    if x.ncols() != predictor.input_width() {
        return Err(Error::Data(format!(
            "predictor trained on width {} but holdout has width {}",
            predictor.input_width(),
            x.ncols()
        )));
    }
    let mut err = 0.0;
    for (i, yi) in y.iter().enumerate() {
        let e = yi - predictor.predict_row(x.row(i).as_slice().unwrap());
        err += e * e;
    }
    Ok(err / x.nrows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HybridMode {
    Ensemble,
    Best,
}

/// Fits every candidate on a training split, scores each on the holdout,
/// and returns either the convex-weighted combination (weights solving
/// the simplex-constrained least-squares problem on holdout predictions)
/// or the single lowest-loss candidate, refit on the full sample.
pub fn fit_hybrid(
    specs: &[LearnerSpec],
    mode: HybridMode,
    x: &Array2<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    holdout_fraction: f64,
    seed: u64,
) -> Result<Predictor> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if specs.len() < 2 {
        return Err(Error::Config(format!(
            "hybrid fitting needs at least 2 candidate learners, got {}",
            specs.len()
        )));
    }
    if !(holdout_fraction > 0.0 && holdout_fraction <= 0.5) {
        return Err(Error::Config(format!(
            "holdout_fraction must lie in (0, 0.5], got {holdout_fraction}"
        )));
    }
    validate_fit_inputs(x, y, weights)?;
    let n = x.nrows();
    let n_hold = ((n as f64 * holdout_fraction).round() as usize).clamp(1, n - 2);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x8C1D]));
    order.shuffle(&mut rng);
    let (hold_rows, train_rows) = order.split_at(n_hold);

    let take = |rows: &[usize]| -> (Array2<f64>, Vec<f64>, Option<Vec<f64>>) {
        let mut xs = Array2::zeros((rows.len(), x.ncols()));
        for (r, &i) in rows.iter().enumerate() {
            xs.row_mut(r).assign(&x.row(i));
        }
        let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        let ws = weights.map(|w| rows.iter().map(|&i| w[i]).collect());
        (xs, ys, ws)
    };
    let (x_tr, y_tr, w_tr) = take(train_rows);
    let (x_ho, y_ho, w_ho) = take(hold_rows);

    // Fit candidates on the training split; skip failures, keep context.
    let mut fitted: Vec<(usize, Predictor, Vec<f64>, f64)> = Vec::new();
    let mut failures: Vec<String> = Vec::new();
    for (c, spec) in specs.iter().enumerate() {
        match fit_learner(spec, &x_tr, &y_tr, w_tr.as_deref()) {
            Ok(pred) => {
                let preds = pred.predict(&x_ho);
                let loss = weighted_mse(&preds, &y_ho, w_ho.as_deref());
                fitted.push((c, pred, preds, loss));
            }
            Err(e) => failures.push(format!("{}: {e}", spec.method)),
        }
    }
    if fitted.is_empty() {
        return Err(Error::Estimation(format!(
            "all hybrid candidates failed to fit: {}",
            failures.join("; ")
        )));
    }

    match mode {
        HybridMode::Best => {
            let mut best = 0usize;
            for k in 1..fitted.len() {
                if fitted[k].3 < fitted[best].3 {
                    best = k;
                }
            }
            let (c, _, _, loss) = &fitted[best];
            let mut refit = fit_learner(&specs[*c], x, y, weights)?;
            refit.oos_loss = Some(*loss);
            Ok(refit)
        }
        HybridMode::Ensemble => {
            let alphas = simplex_least_squares(
                &fitted.iter().map(|f| f.2.as_slice()).collect::<Vec<_>>(),
                &y_ho,
                w_ho.as_deref(),
            );
            // Holdout loss of the combined holdout-trained predictor.
            let combined: Vec<f64> = (0..y_ho.len())
                .map(|i| {
                    fitted
                        .iter()
                        .zip(&alphas)
                        .map(|(f, a)| a * f.2[i])
                        .sum()
                })
                .collect();
            let loss = weighted_mse(&combined, &y_ho, w_ho.as_deref());
            // Refit each weighted candidate on the full sample.
            let mut parts = Vec::new();
            for (k, f) in fitted.iter().enumerate() {
                if alphas[k] > 0.0 {
                    let refit = fit_learner(&specs[f.0], x, y, weights)?;
                    parts.push((alphas[k], refit));
                }
            }
            Ok(Predictor {
                method: LearnerMethod::Ensemble,
                coefficients: None,
                oos_loss: Some(loss),
                input_width: x.ncols(),
                expanded: false,
                model: Model::Ensemble(parts),
            })
        }
    }
}

fn weighted_mse(pred: &[f64], y: &[f64], w: Option<&[f64]>) -> f64 {
    let mut err = 0.0;
    let mut wsum = 0.0;
    for i in 0..y.len() {
        let wi = w.map_or(1.0, |w| w[i]);
        let e = y[i] - pred[i];
        err += wi * e * e;
        wsum += wi;
    }
    err / wsum
}

/// Solves `min_alpha || y - sum_c alpha_c pred_c ||^2_w` over the
/// probability simplex by projected gradient descent.
fn simplex_least_squares(preds: &[&[f64]], y: &[f64], w: Option<&[f64]>) -> Vec<f64> {
    let c = preds.len();
    let n = y.len();
    let mut alpha = vec![1.0 / c as f64; c];
    // Lipschitz bound for the gradient: 2 * trace(P' W P).
    let mut trace = 0.0;
    for p in preds {
        for i in 0..n {
            let wi = w.map_or(1.0, |w| w[i]);
            trace += wi * p[i] * p[i];
        }
    }
    let step = if trace > 0.0 { 1.0 / (2.0 * trace) } else { 1.0 };
    let mut grad = vec![0.0; c];
    for _ in 0..20_000 {
        // gradient of sum_i w_i (combo_i - y_i)^2
        for g in grad.iter_mut() {
            *g = 0.0;
        }
        for i in 0..n {
            let wi = w.map_or(1.0, |w| w[i]);
            let mut combo = 0.0;
            for (k, p) in preds.iter().enumerate() {
                combo += alpha[k] * p[i];
            }
            let e = 2.0 * wi * (combo - y[i]);
            for (k, p) in preds.iter().enumerate() {
                grad[k] += e * p[i];
            }
        }
        let proposal: Vec<f64> = alpha
            .iter()
            .zip(&grad)
            .map(|(a, g)| a - step * g)
            .collect();
        let next = project_to_simplex(&proposal);
        let delta: f64 = next
            .iter()
            .zip(&alpha)
            .map(|(a, b)| (a - b).abs())
            .sum();
        alpha = next;
        if delta < 1e-13 {
            break;
        }
    }
    alpha
}

/// Euclidean projection onto the probability simplex
/// (sorting-based algorithm).
fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        cumsum += uk;
        let candidate = (cumsum - 1.0) / (k + 1) as f64;
        if uk - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&vi| (vi - theta).max(0.0)).collect()
}
