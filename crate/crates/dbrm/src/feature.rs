//! The recursive nonlinear feature grammar.
//!
//! A feature is an expression tree over the input covariates. Interior nodes
//! are either a unary transform `g(child)`, a product of two features, or a
//! nonlinear projection `g(a0 + w1*c1 + ... + wk*ck)` whose weights were fitted
//! once and then frozen. Raw covariates sit at the leaves and have depth zero.
//!
//! Every feature carries a canonical key: a deterministic prefix serialization
//! with product operands sorted and projection weights rounded to six
//! significant digits. The key is the feature's identity for deduplication and
//! for the model registry. A human-readable infix twin (`display_string`) is
//! what reports print; it additionally flattens nested products so that
//! algebraically identical product chains read the same.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// A named scalar nonlinearity. The stored function must be total: finite
/// output for every finite input (partial functions are shipped here already
/// wrapped in their safe extension, e.g. `log` evaluates `ln(|x|+1)`).
#[derive(Clone)]
pub struct Transformation {
    name: String,
    apply: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl Transformation {
    pub fn new(name: impl Into<String>, apply: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self { name: name.into(), apply: Arc::new(apply) }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn apply(&self, x: f64) -> f64 {
        (self.apply)(x)
    }

    /// Builtin catalogue. All entries are total on finite inputs; names match
    /// what canonical keys and reports print.
    pub fn by_name(name: &str) -> Option<Transformation> {
        let t = match name {
            "sigmoid" => Transformation::new("sigmoid", |x: f64| {
                if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { let e = x.exp(); e / (1.0 + e) }
            }),
            "sin" => Transformation::new("sin", f64::sin),
            "cos" => Transformation::new("cos", f64::cos),
            "tanh" => Transformation::new("tanh", f64::tanh),
            "atan" => Transformation::new("atan", f64::atan),
            "gauss" => Transformation::new("gauss", |x: f64| (-x * x).exp()),
            "expnabs" => Transformation::new("expnabs", |x: f64| (-x.abs()).exp()),
            // log is shipped as its total extension ln(|x|+1)
            "log" => Transformation::new("log", |x: f64| x.abs().ln_1p()),
            // power transforms act on |x| so they stay real and total
            "cbrt" => Transformation::new("cbrt", |x: f64| x.abs().powf(1.0 / 3.0)),
            "sqrt" => Transformation::new("sqrt", |x: f64| x.abs().sqrt()),
            "pow2.3" => Transformation::new("pow2.3", |x: f64| x.abs().powf(2.3)),
            "pow3.5" => Transformation::new("pow3.5", |x: f64| x.abs().powf(3.5)),
            "relu" => Transformation::new("relu", |x: f64| x.max(0.0)),
            _ => return None,
        };
        Some(t)
    }
}

impl fmt::Debug for Transformation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Transformation({})", self.name)
    }
}

/// The set 𝒢 of nonlinearities available to the feature operators.
#[derive(Clone, Debug)]
pub struct TransformationSet {
    entries: Vec<Arc<Transformation>>,
}

#[derive(Debug, Error)]
pub enum TransformationSetError {
    #[error("duplicate transformation name `{0}`")]
    DuplicateName(String),
    #[error("unknown transformation name `{0}`")]
    UnknownName(String),
    #[error("transformation set must not be empty")]
    Empty,
}

impl TransformationSet {
    pub fn new(entries: Vec<Transformation>) -> Result<Self, TransformationSetError> {
        if entries.is_empty() {
            return Err(TransformationSetError::Empty);
        }
        for (i, a) in entries.iter().enumerate() {
            for b in &entries[i + 1..] {
                if a.name == b.name {
                    return Err(TransformationSetError::DuplicateName(a.name.clone()));
                }
            }
        }
        Ok(Self { entries: entries.into_iter().map(Arc::new).collect() })
    }

    pub fn from_names(names: &[&str]) -> Result<Self, TransformationSetError> {
        let mut entries = Vec::with_capacity(names.len());
        for n in names {
            entries.push(
                Transformation::by_name(n).ok_or_else(|| TransformationSetError::UnknownName(n.to_string()))?,
            );
        }
        Self::new(entries)
    }

    /// The set used for the binary classification protocols.
    pub fn classification() -> Self {
        Self::from_names(&["gauss", "tanh", "atan", "sin"]).unwrap()
    }

    /// The smaller inference set (includes the absolute cube root).
    pub fn g1() -> Self {
        Self::from_names(&["sigmoid", "sin", "tanh", "atan", "cbrt"]).unwrap()
    }

    /// The larger inference set with decaying exponential, log and powers.
    pub fn g2() -> Self {
        Self::from_names(&["sigmoid", "sin", "expnabs", "log", "cbrt", "pow2.3", "pow3.5"]).unwrap()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Arc<Transformation>] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Transformation>> {
        self.entries.iter().find(|t| t.name == name)
    }
}

/// One node of a feature tree.
#[derive(Clone, Debug)]
pub enum FeatureNode {
    /// Raw covariate (zero-based column index).
    Leaf(usize),
    /// `g(child)`.
    Transform { g: Arc<Transformation>, child: Arc<Feature> },
    /// `left * right`, operands stored in canonical-key order.
    Product { left: Arc<Feature>, right: Arc<Feature> },
    /// `g(intercept + weights·children)` with frozen weights. Children carry
    /// their weight in lockstep; zero-weight children are pruned on build.
    Projection {
        g: Arc<Transformation>,
        intercept: f64,
        weights: Vec<f64>,
        children: Vec<Arc<Feature>>,
    },
}

/// An immutable feature with cached depth, width and canonical key.
#[derive(Clone, Debug)]
pub struct Feature {
    node: FeatureNode,
    depth: usize,
    total_width: usize,
    key: String,
}

/// Depth, local width of the root step, and the recursive total width that the
/// model prior penalizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComplexityReport {
    pub depth: usize,
    pub local_width: usize,
    pub total_width: usize,
}

/// Rejection signals raised by the feature-generating operators. Callers react
/// by drawing a different operator or operand.
#[derive(Debug, Error, PartialEq)]
pub enum FeatureRejection {
    #[error("feature depth would exceed the configured maximum")]
    DepthOverflow,
    #[error("feature `{0}` evaluates to a non-finite value on the training data")]
    NonFinite(String),
    #[error("projection weight fit failed or degenerated")]
    DegenerateFit,
}

fn round_sig(x: f64, digits: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return 0.0;
    }
    let mag = x.abs().log10().floor() as i32;
    // magnitudes beyond the scaling range round to zero / stay as-is
    if mag < -250 {
        return 0.0;
    }
    if mag > 250 {
        return x;
    }
    let factor = 10f64.powi(digits - 1 - mag);
    (x * factor).round() / factor
}

/// Weights are serialized after rounding to 6 significant digits so that
/// floating-point noise cannot mint spuriously distinct keys.
fn fmt_weight(w: f64) -> String {
    format!("{}", round_sig(w, 6))
}

impl Feature {
    pub fn leaf(index: usize) -> Arc<Feature> {
        let key = format!("x{}", index + 1);
        Arc::new(Feature { node: FeatureNode::Leaf(index), depth: 0, total_width: 1, key })
    }

    pub fn node(&self) -> &FeatureNode {
        &self.node
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn total_width(&self) -> usize {
        self.total_width
    }

    /// Canonical key: deterministic prefix serialization. Equal keys mean
    /// structurally equal trees (up to 6-digit weight rounding).
    pub fn key(&self) -> &str {
        &self.key
    }

    fn local_width(&self) -> usize {
        match &self.node {
            FeatureNode::Leaf(_) => 1,
            FeatureNode::Transform { .. } | FeatureNode::Product { .. } => 1,
            FeatureNode::Projection { intercept, weights, .. } => {
                weights.iter().filter(|w| **w != 0.0).count() + usize::from(*intercept != 0.0)
            }
        }
    }

    /// Zero-based indices of every covariate referenced by this tree.
    pub fn leaf_indices(&self, out: &mut Vec<usize>) {
        match &self.node {
            FeatureNode::Leaf(i) => out.push(*i),
            FeatureNode::Transform { child, .. } => child.leaf_indices(out),
            FeatureNode::Product { left, right } => {
                left.leaf_indices(out);
                right.leaf_indices(out);
            }
            FeatureNode::Projection { children, .. } => {
                for c in children {
                    c.leaf_indices(out);
                }
            }
        }
    }

    /// Infix form for reports: products flatten and sort their factors, so a
    /// product chain prints like `x2*x2*x7` regardless of how it was grouped.
    pub fn display_string(&self) -> String {
        match &self.node {
            FeatureNode::Leaf(i) => format!("x{}", i + 1),
            FeatureNode::Transform { g, child } => format!("{}({})", g.name(), child.display_string()),
            FeatureNode::Product { .. } => {
                let mut factors = Vec::new();
                self.collect_factors(&mut factors);
                factors.sort();
                factors.join("*")
            }
            FeatureNode::Projection { g, intercept, weights, children } => {
                let mut body = fmt_weight(*intercept);
                for (w, c) in weights.iter().zip(children) {
                    let ws = fmt_weight(*w);
                    if ws.starts_with('-') {
                        body.push_str(&format!("{}*{}", ws, c.display_string()));
                    } else {
                        body.push_str(&format!("+{}*{}", ws, c.display_string()));
                    }
                }
                format!("{}({})", g.name(), body)
            }
        }
    }

    fn collect_factors(&self, out: &mut Vec<String>) {
        if let FeatureNode::Product { left, right } = &self.node {
            left.collect_factors(out);
            right.collect_factors(out);
        } else {
            out.push(self.display_string());
        }
    }
}

/// Tree depth: leaves are 0, every transform step adds one level, and a
/// product counts as a single extra transformation over its deeper operand.
pub fn depth(f: &Feature) -> usize {
    f.depth
}

/// Complexity accounting. Local width is 1 for transform and product steps and
/// the nonzero-coefficient count (intercept included when nonzero) for a
/// projection. Total width sums local widths over all interior nodes plus one
/// per leaf; it is the value `c(F)` consumed by the model prior.
pub fn complexity(f: &Feature) -> ComplexityReport {
    ComplexityReport { depth: f.depth, local_width: f.local_width(), total_width: f.total_width }
}

/// Theoretical number of features of exactly depth `d` over `m` covariates and
/// `g_size` nonlinearities, counted recursively. Saturates at `u128::MAX`
/// instead of overflowing; the count explodes with depth, so this is only used
/// for diagnostics.
pub fn feature_count(m: u128, g_size: u128, d: u32) -> u128 {
    assert!(m >= 1 && g_size >= 1);
    if d == 0 {
        return m;
    }
    let mut counts: Vec<u128> = vec![m];
    for depth_now in 1..=d {
        let below: u128 = counts.iter().fold(0u128, |a, b| a.saturating_add(*b));
        // once 2^below no longer fits, this and every deeper level saturate
        if below >= 127 {
            return u128::MAX;
        }
        let patterns = (1u128 << below) - 1;
        let gross = g_size.saturating_mul(patterns);
        let shallower: u128 = counts[1..].iter().fold(0u128, |a, b| a.saturating_add(*b));
        let q_d = gross.saturating_sub(shallower);
        if depth_now == d {
            return q_d;
        }
        counts.push(q_d);
    }
    unreachable!()
}

#[derive(Debug, Error)]
#[error("feature `{key}` evaluates to a non-finite value at row {row}")]
pub struct EvaluationError {
    pub key: String,
    pub row: usize,
}

/// Elementwise tree evaluation over the rows of `x`. The safety rules are
/// baked into the transformations, but products and projections can still
/// overflow to infinity; that is reported, naming the offending feature.
pub fn evaluate(f: &Feature, x: &DMatrix<f64>) -> Result<DVector<f64>, EvaluationError> {
    let col = evaluate_unchecked(f, x);
    for (row, v) in col.iter().enumerate() {
        if !v.is_finite() {
            return Err(EvaluationError { key: f.key().to_string(), row });
        }
    }
    Ok(col)
}

fn evaluate_unchecked(f: &Feature, x: &DMatrix<f64>) -> DVector<f64> {
    match &f.node {
        FeatureNode::Leaf(j) => x.column(*j).into_owned(),
        FeatureNode::Transform { g, child } => {
            let mut col = evaluate_unchecked(child, x);
            for v in col.iter_mut() {
                *v = g.apply(*v);
            }
            col
        }
        FeatureNode::Product { left, right } => {
            let mut a = evaluate_unchecked(left, x);
            let b = evaluate_unchecked(right, x);
            a.component_mul_assign(&b);
            a
        }
        FeatureNode::Projection { g, intercept, weights, children } => {
            let mut acc = DVector::from_element(x.nrows(), *intercept);
            for (w, c) in weights.iter().zip(children) {
                let col = evaluate_unchecked(c, x);
                acc.axpy(*w, &col, 1.0);
            }
            for v in acc.iter_mut() {
                *v = g.apply(*v);
            }
            acc
        }
    }
}

fn validate_finite(f: Arc<Feature>, x: Option<&DMatrix<f64>>) -> Result<Arc<Feature>, FeatureRejection> {
    if let Some(x) = x {
        if evaluate(&f, x).is_err() {
            return Err(FeatureRejection::NonFinite(f.key().to_string()));
        }
    }
    Ok(f)
}

/// Wrap `f` in the nonlinearity `g`. Rejects when the result would exceed
/// `d_max` or is non-finite on the supplied training matrix.
pub fn make_modification(
    f: &Arc<Feature>,
    g: &Arc<Transformation>,
    d_max: usize,
    x: Option<&DMatrix<f64>>,
) -> Result<Arc<Feature>, FeatureRejection> {
    let depth = f.depth + 1;
    if depth > d_max {
        return Err(FeatureRejection::DepthOverflow);
    }
    let key = format!("{}({})", g.name(), f.key());
    let feature = Arc::new(Feature {
        node: FeatureNode::Transform { g: Arc::clone(g), child: Arc::clone(f) },
        depth,
        total_width: f.total_width + 1,
        key,
    });
    validate_finite(feature, x)
}

/// Multiply two features. Operands are stored sorted by canonical key, so the
/// product is commutative at the identity level.
pub fn make_crossover(
    f1: &Arc<Feature>,
    f2: &Arc<Feature>,
    d_max: usize,
    x: Option<&DMatrix<f64>>,
) -> Result<Arc<Feature>, FeatureRejection> {
    let depth = 1 + f1.depth.max(f2.depth);
    if depth > d_max {
        return Err(FeatureRejection::DepthOverflow);
    }
    let (left, right) =
        if f1.key() <= f2.key() { (Arc::clone(f1), Arc::clone(f2)) } else { (Arc::clone(f2), Arc::clone(f1)) };
    let key = format!("mul({},{})", left.key(), right.key());
    let feature = Arc::new(Feature {
        node: FeatureNode::Product { left: Arc::clone(&left), right: Arc::clone(&right) },
        depth,
        total_width: left.total_width + right.total_width + 1,
        key,
    });
    validate_finite(feature, x)
}

/// Build a projection node from already-fitted weights (the weights come from
/// the GLM module's projection fit and are frozen constants afterwards).
/// Children with zero weight are pruned; an empty remainder is a degenerate
/// fit. `(child, weight)` pairs are stored sorted by child key.
pub fn make_projection(
    children: &[Arc<Feature>],
    weights: &[f64],
    intercept: f64,
    g: &Arc<Transformation>,
    d_max: usize,
    x: Option<&DMatrix<f64>>,
) -> Result<Arc<Feature>, FeatureRejection> {
    assert_eq!(children.len(), weights.len(), "one weight per projection child");
    let mut pairs: Vec<(Arc<Feature>, f64)> = children
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w != 0.0 && round_sig(**w, 6) != 0.0)
        .map(|(c, w)| (Arc::clone(c), *w))
        .collect();
    if pairs.is_empty() {
        return Err(FeatureRejection::DegenerateFit);
    }
    if !intercept.is_finite() || pairs.iter().any(|(_, w)| !w.is_finite()) {
        return Err(FeatureRejection::DegenerateFit);
    }
    pairs.sort_by(|a, b| a.0.key().cmp(b.0.key()));
    let depth = 1 + pairs.iter().map(|(c, _)| c.depth).max().unwrap();
    if depth > d_max {
        return Err(FeatureRejection::DepthOverflow);
    }
    let local = pairs.len() + usize::from(intercept != 0.0);
    let total_width = local + pairs.iter().map(|(c, _)| c.total_width).sum::<usize>();
    let mut key = format!("proj_{}({}", g.name(), fmt_weight(intercept));
    for (c, w) in &pairs {
        key.push_str(&format!(";{}:{}", fmt_weight(*w), c.key()));
    }
    key.push(')');
    let (children, weights): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let feature = Arc::new(Feature {
        node: FeatureNode::Projection { g: Arc::clone(g), intercept, weights, children },
        depth,
        total_width,
        key,
    });
    validate_finite(feature, x)
}

/// Relative residual tolerance below which a candidate column counts as
/// linearly dependent on the population's span.
pub const LINEAR_DEPENDENCE_TOL: f64 = 1e-8;

/// True when `candidate`'s column is (numerically) inside the span of the
/// constant column plus `columns`. Uses two rounds of modified Gram–Schmidt
/// against an orthonormal basis of the existing columns.
pub fn is_linearly_dependent(candidate: &DVector<f64>, basis: &[DVector<f64>]) -> bool {
    let norm0 = candidate.norm();
    if norm0 == 0.0 {
        return true;
    }
    let mut r = candidate.clone();
    for _ in 0..2 {
        for b in basis {
            let proj = b.dot(&r);
            r.axpy(-proj, b, 1.0);
        }
    }
    r.norm() < LINEAR_DEPENDENCE_TOL * norm0
}

/// Append `col`'s normalized residual to the basis unless the column is
/// already (numerically) in the span. Returns whether the basis grew.
pub fn extend_basis(basis: &mut Vec<DVector<f64>>, col: &DVector<f64>) -> bool {
    let norm0 = col.norm();
    if norm0 == 0.0 || !norm0.is_finite() {
        return false;
    }
    let mut r = col.clone();
    for _ in 0..2 {
        for b in basis.iter() {
            let proj = b.dot(&r);
            r.axpy(-proj, b, 1.0);
        }
    }
    let norm = r.norm();
    if norm < LINEAR_DEPENDENCE_TOL * norm0 {
        return false;
    }
    basis.push(r / norm);
    true
}

/// Orthonormal basis of the span of the constant column plus `columns`
/// (columns that are already dependent contribute nothing).
pub fn orthonormal_basis(n: usize, columns: &[&DVector<f64>]) -> Vec<DVector<f64>> {
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(columns.len() + 1);
    let ones = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    basis.push(ones);
    for col in columns {
        extend_basis(&mut basis, col);
    }
    basis
}

/// Parse a canonical key back into a feature tree. Inverse of [`Feature::key`]
/// up to weight rounding; used when an artifact is reloaded for prediction.
pub fn parse_key(key: &str, gset: &TransformationSet) -> Result<Arc<Feature>, KeyParseError> {
    let mut parser = KeyParser { input: key.as_bytes(), pos: 0, gset };
    let f = parser.parse_feature()?;
    if parser.pos != parser.input.len() {
        return Err(KeyParseError::Trailing(key.to_string()));
    }
    Ok(f)
}

#[derive(Debug, Error)]
pub enum KeyParseError {
    #[error("malformed feature key near byte {0}")]
    Malformed(usize),
    #[error("unknown transformation `{0}` in feature key")]
    UnknownTransformation(String),
    #[error("trailing input in feature key `{0}`")]
    Trailing(String),
}

struct KeyParser<'a> {
    input: &'a [u8],
    pos: usize,
    gset: &'a TransformationSet,
}

impl<'a> KeyParser<'a> {
    fn peek(&self) -> Option<u8> {
        self.input.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), KeyParseError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(KeyParseError::Malformed(self.pos))
        }
    }

    fn parse_feature(&mut self) -> Result<Arc<Feature>, KeyParseError> {
        let start = self.pos;
        if self.peek() == Some(b'x') {
            // leaf unless this is the start of an identifier like `x...(`?
            // identifiers always end in '(' so digits-after-x means a leaf.
            let mut j = self.pos + 1;
            while j < self.input.len() && self.input[j].is_ascii_digit() {
                j += 1;
            }
            if j > self.pos + 1 && (j == self.input.len() || !self.input[j].is_ascii_alphanumeric() && self.input[j] != b'(') {
                let idx: usize = std::str::from_utf8(&self.input[self.pos + 1..j])
                    .unwrap()
                    .parse()
                    .map_err(|_| KeyParseError::Malformed(start))?;
                if idx == 0 {
                    return Err(KeyParseError::Malformed(start));
                }
                self.pos = j;
                return Ok(Feature::leaf(idx - 1));
            }
        }
        // otherwise an identifier followed by '('
        let mut j = self.pos;
        while j < self.input.len() && self.input[j] != b'(' {
            j += 1;
        }
        if j == self.input.len() {
            return Err(KeyParseError::Malformed(start));
        }
        let name = std::str::from_utf8(&self.input[self.pos..j]).map_err(|_| KeyParseError::Malformed(start))?.to_string();
        self.pos = j;
        self.expect(b'(')?;
        if name == "mul" {
            let left = self.parse_feature()?;
            self.expect(b',')?;
            let right = self.parse_feature()?;
            self.expect(b')')?;
            make_crossover(&left, &right, usize::MAX, None).map_err(|_| KeyParseError::Malformed(start))
        } else if let Some(gname) = name.strip_prefix("proj_") {
            let g = self
                .gset
                .get(gname)
                .ok_or_else(|| KeyParseError::UnknownTransformation(gname.to_string()))?
                .clone();
            let intercept = self.parse_number()?;
            let mut children = Vec::new();
            let mut weights = Vec::new();
            while self.peek() == Some(b';') {
                self.pos += 1;
                let w = self.parse_number()?;
                self.expect(b':')?;
                let c = self.parse_feature()?;
                weights.push(w);
                children.push(c);
            }
            self.expect(b')')?;
            make_projection(&children, &weights, intercept, &g, usize::MAX, None)
                .map_err(|_| KeyParseError::Malformed(start))
        } else {
            let g = self
                .gset
                .get(&name)
                .ok_or(KeyParseError::UnknownTransformation(name))?
                .clone();
            let child = self.parse_feature()?;
            self.expect(b')')?;
            make_modification(&child, &g, usize::MAX, None).map_err(|_| KeyParseError::Malformed(start))
        }
    }

    fn parse_number(&mut self) -> Result<f64, KeyParseError> {
        let start = self.pos;
        let mut j = self.pos;
        while j < self.input.len() {
            let c = self.input[j];
            let numeric = c.is_ascii_digit()
                || c == b'.'
                || c == b'e'
                || c == b'E'
                || ((c == b'-' || c == b'+') && (j == start || self.input[j - 1] == b'e' || self.input[j - 1] == b'E'));
            if !numeric {
                break;
            }
            j += 1;
        }
        let s = std::str::from_utf8(&self.input[start..j]).map_err(|_| KeyParseError::Malformed(start))?;
        let v: f64 = s.parse().map_err(|_| KeyParseError::Malformed(start))?;
        self.pos = j;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gset() -> TransformationSet {
        TransformationSet::from_names(&["sin", "cos", "log", "gauss", "cbrt", "sigmoid"]).unwrap()
    }

    fn g(name: &str) -> Arc<Transformation> {
        Arc::new(Transformation::by_name(name).unwrap())
    }

    /// Independent brute-force oracle for depth/width used to cross-check the
    /// cached values maintained by the constructors.
    fn oracle_depth(f: &Feature) -> usize {
        match f.node() {
            FeatureNode::Leaf(_) => 0,
            FeatureNode::Transform { child, .. } => 1 + oracle_depth(child),
            FeatureNode::Product { left, right } => 1 + oracle_depth(left).max(oracle_depth(right)),
            FeatureNode::Projection { children, .. } => {
                1 + children.iter().map(|c| oracle_depth(c)).max().unwrap()
            }
        }
    }

    fn oracle_width(f: &Feature) -> usize {
        match f.node() {
            FeatureNode::Leaf(_) => 1,
            FeatureNode::Transform { child, .. } => 1 + oracle_width(child),
            FeatureNode::Product { left, right } => 1 + oracle_width(left) + oracle_width(right),
            FeatureNode::Projection { intercept, weights, children, .. } => {
                weights.iter().filter(|w| **w != 0.0).count()
                    + usize::from(*intercept != 0.0)
                    + children.iter().map(|c| oracle_width(c)).sum::<usize>()
            }
        }
    }

    #[test]
    fn depth_of_nested_transform_chain() {
        // sin(cos(log(x)) + exp(x)) has depth 3; the closest expressible
        // analogue here is a projection of depth-2 children.
        let x = Feature::leaf(0);
        let logx = make_modification(&x, &g("log"), 10, None).unwrap();
        let coslog = make_modification(&logx, &g("cos"), 10, None).unwrap();
        let gaussx = make_modification(&x, &g("gauss"), 10, None).unwrap();
        let f = make_projection(&[coslog, gaussx], &[1.0, 1.0], 0.0, &g("sin"), 10, None).unwrap();
        assert_eq!(depth(&f), 3);
        assert_eq!(oracle_depth(&f), 3);
    }

    #[test]
    fn depth_of_leaf_and_product() {
        let x1 = Feature::leaf(0);
        let x2 = Feature::leaf(1);
        assert_eq!(depth(&x1), 0);
        let prod = make_crossover(&x1, &x2, 10, None).unwrap();
        assert_eq!(depth(&prod), 1);
    }

    #[test]
    fn complexity_matches_brute_force_oracle() {
        let x1 = Feature::leaf(0);
        let x2 = Feature::leaf(1);
        assert_eq!(complexity(&x1), ComplexityReport { depth: 0, local_width: 1, total_width: 1 });

        // tanh(x1 * x2): transform 1 + product 1 + two leaves = 4
        let prod = make_crossover(&x1, &x2, 10, None).unwrap();
        let f = make_modification(&prod, &g("sin"), 10, None).unwrap();
        assert_eq!(complexity(&f).total_width, 4);
        assert_eq!(oracle_width(&f), 4);
    }

    #[test]
    fn nested_projection_width_recursion() {
        // g(a30 + w·(g(a10 + a1ᵀx), g(a20 + a2ᵀx))) with ‖a1‖₀ = 2, ‖a2‖₀ = 3:
        // inner locals (2+1) and (3+1), outer local (2+1), plus 5 leaves.
        let xs: Vec<_> = (0..5).map(Feature::leaf).collect();
        let inner1 =
            make_projection(&xs[0..2], &[0.5, -0.3], 1.0, &g("sigmoid"), 10, None).unwrap();
        let inner2 =
            make_projection(&xs[2..5], &[0.2, 0.4, -0.1], -0.5, &g("sigmoid"), 10, None).unwrap();
        let outer = make_projection(
            &[inner1.clone(), inner2.clone()],
            &[1.5, 2.5],
            0.7,
            &g("sigmoid"),
            10,
            None,
        )
        .unwrap();
        assert_eq!(complexity(&inner1).total_width, 3 + 2);
        assert_eq!(complexity(&inner2).total_width, 4 + 3);
        let report = complexity(&outer);
        assert_eq!(report.local_width, 3);
        assert_eq!(report.total_width, 3 + 5 + 7);
        assert_eq!(report.total_width, oracle_width(&outer));
        assert_eq!(report.depth, 2);
    }

    #[test]
    fn zero_intercept_does_not_count_toward_local_width() {
        let xs: Vec<_> = (0..2).map(Feature::leaf).collect();
        let f = make_projection(&xs, &[0.5, -0.3], 0.0, &g("sigmoid"), 10, None).unwrap();
        assert_eq!(complexity(&f).local_width, 2);
    }

    #[test]
    fn feature_count_small_cases() {
        assert_eq!(feature_count(2, 1, 0), 2);
        assert_eq!(feature_count(2, 1, 1), 3);
        assert_eq!(feature_count(3, 2, 1), 14);
        // saturates rather than overflowing
        assert_eq!(feature_count(50, 7, 4), u128::MAX);
    }

    #[test]
    fn feature_count_matches_exhaustive_depth_one_enumeration() {
        // depth-1 features over m=3, |G|=2: one function applied to each
        // nonzero support pattern over the three covariates.
        let m = 3usize;
        let g_size = 2usize;
        let mut count = 0u128;
        for pattern in 1u32..(1 << m) {
            let _ = pattern;
            count += g_size as u128;
        }
        assert_eq!(feature_count(3, 2, 1), count);
    }

    #[test]
    fn evaluate_basic_cases() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 0.0, 3.0, -8.0]);
        let leaf = Feature::leaf(0);
        let col = evaluate(&leaf, &x).unwrap();
        assert_eq!(col.as_slice(), &[1.0, 2.0, 3.0]);

        let gauss = make_modification(&Feature::leaf(1), &g("gauss"), 5, Some(&x)).unwrap();
        let col = evaluate(&gauss, &x).unwrap();
        assert!((col[0] - 1.0).abs() < 1e-15);

        let cbrt = make_modification(&Feature::leaf(1), &g("cbrt"), 5, Some(&x)).unwrap();
        let col = evaluate(&cbrt, &x).unwrap();
        assert!((col[2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_is_deterministic() {
        let x = DMatrix::from_fn(17, 3, |i, j| ((i * 3 + j) as f64).sin());
        let f = make_crossover(
            &make_modification(&Feature::leaf(0), &g("sin"), 5, None).unwrap(),
            &Feature::leaf(2),
            5,
            None,
        )
        .unwrap();
        let a = evaluate(&f, &x).unwrap();
        let b = evaluate(&f, &x).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn operators_respect_depth_cap() {
        let x1 = Feature::leaf(0);
        let mut f = x1.clone();
        for _ in 0..3 {
            f = make_modification(&f, &g("sin"), 3, None).unwrap();
        }
        assert_eq!(depth(&f), 3);
        assert_eq!(make_modification(&f, &g("cos"), 3, None).unwrap_err(), FeatureRejection::DepthOverflow);
        assert_eq!(make_crossover(&f, &x1, 3, None).unwrap_err(), FeatureRejection::DepthOverflow);
        assert_eq!(
            make_projection(&[f], &[1.0], 0.0, &g("cos"), 3, None).unwrap_err(),
            FeatureRejection::DepthOverflow
        );
    }

    #[test]
    fn modification_rejects_non_finite() {
        // pow3.5 of a large product overflows f64
        let x = DMatrix::from_row_slice(2, 1, &[1e100, 1.0]);
        let leaf = Feature::leaf(0);
        let sq = make_crossover(&leaf, &leaf, 5, Some(&x)).unwrap();
        let c = make_crossover(&sq, &sq, 5, Some(&x));
        assert!(matches!(c, Err(FeatureRejection::NonFinite(_))));
    }

    #[test]
    fn crossover_is_commutative_at_key_level() {
        let a = make_modification(&Feature::leaf(0), &g("sin"), 5, None).unwrap();
        let b = Feature::leaf(17);
        let ab = make_crossover(&a, &b, 5, None).unwrap();
        let ba = make_crossover(&b, &a, 5, None).unwrap();
        assert_eq!(ab.key(), ba.key());
        assert_eq!(ab.total_width(), ba.total_width());
    }

    #[test]
    fn crossover_width_is_sum_plus_one() {
        let a = make_modification(&Feature::leaf(0), &g("sin"), 5, None).unwrap();
        let b = Feature::leaf(1);
        let ab = make_crossover(&a, &b, 5, None).unwrap();
        assert_eq!(ab.total_width(), a.total_width() + b.total_width() + 1);
        let m = make_modification(&ab, &g("cos"), 5, None).unwrap();
        assert_eq!(m.total_width(), ab.total_width() + 1);
    }

    #[test]
    fn single_child_projection_matches_modification_surface() {
        let x = DMatrix::from_fn(11, 1, |i, _| (i as f64) / 3.0 - 1.5);
        let leaf = Feature::leaf(0);
        let proj = make_projection(&[leaf.clone()], &[1.0], 0.0, &g("sigmoid"), 5, Some(&x)).unwrap();
        let modf = make_modification(&leaf, &g("sigmoid"), 5, Some(&x)).unwrap();
        let a = evaluate(&proj, &x).unwrap();
        let b = evaluate(&modf, &x).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn projection_prunes_zero_weight_children() {
        let xs: Vec<_> = (0..3).map(Feature::leaf).collect();
        let f = make_projection(&xs, &[0.5, 0.0, -0.25], 1.0, &g("sigmoid"), 5, None).unwrap();
        if let FeatureNode::Projection { children, weights, .. } = f.node() {
            assert_eq!(children.len(), 2);
            assert!(weights.iter().all(|w| *w != 0.0));
        } else {
            panic!("expected projection node");
        }
        let all_zero = make_projection(&xs, &[0.0, 0.0, 0.0], 1.0, &g("sigmoid"), 5, None);
        assert_eq!(all_zero.unwrap_err(), FeatureRejection::DegenerateFit);
    }

    #[test]
    fn linear_dependence_detects_scaled_column() {
        let n = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let col: DVector<f64> = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let basis = orthonormal_basis(n, &[&col]);
        let mut scaled = col.clone();
        scaled *= 2.0;
        assert!(is_linearly_dependent(&scaled, &basis));
        // an affine shift is dependent too: the constant column is in the span
        let shifted = scaled.add_scalar(3.0);
        assert!(is_linearly_dependent(&shifted, &basis));
        let fresh: DVector<f64> = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        assert!(!is_linearly_dependent(&fresh, &basis));
    }

    fn random_feature(rng: &mut ChaCha8Rng, gs: &TransformationSet, depth_left: usize) -> Arc<Feature> {
        let choice = if depth_left == 0 { 0 } else { rng.gen_range(0..4u32) };
        match choice {
            0 => Feature::leaf(rng.gen_range(0..6)),
            1 => {
                let child = random_feature(rng, gs, depth_left - 1);
                let gt = gs.entries()[rng.gen_range(0..gs.len())].clone();
                make_modification(&child, &gt, usize::MAX, None).unwrap()
            }
            2 => {
                let a = random_feature(rng, gs, depth_left - 1);
                let b = random_feature(rng, gs, depth_left - 1);
                make_crossover(&a, &b, usize::MAX, None).unwrap()
            }
            _ => {
                let k = rng.gen_range(1..=3usize);
                let children: Vec<_> = (0..k).map(|_| random_feature(rng, gs, depth_left - 1)).collect();
                let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
                let intercept = if rng.gen_bool(0.5) { rng.gen_range(-1.0..1.0) } else { 0.0 };
                let gt = gs.entries()[rng.gen_range(0..gs.len())].clone();
                match make_projection(&children, &weights, intercept, &gt, usize::MAX, None) {
                    Ok(f) => f,
                    Err(_) => Feature::leaf(0),
                }
            }
        }
    }

    #[test]
    fn canonical_keys_round_trip_through_parser() {
        let gs = gset();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let f = random_feature(&mut rng, &gs, 3);
            let parsed = parse_key(f.key(), &gs).unwrap();
            assert_eq!(parsed.key(), f.key(), "round trip changed the key");
            assert_eq!(parsed.depth(), f.depth());
            assert_eq!(parsed.total_width(), f.total_width());
        }
    }

    #[test]
    fn key_collision_implies_structural_equality() {
        // distinct random trees must have distinct keys unless their
        // serializations coincide (which is the definition of equality here);
        // verify via evaluation on random data that equal keys mean equal maps.
        let gs = gset();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DMatrix::from_fn(13, 6, |i, j| ((i * 7 + j * 3) as f64 / 10.0).sin());
        let mut seen: Vec<(String, DVector<f64>)> = Vec::new();
        for _ in 0..300 {
            let f = random_feature(&mut rng, &gs, 3);
            let col = match evaluate(&f, &x) {
                Ok(c) => c,
                Err(_) => continue,
            };
            if let Some((_, prev)) = seen.iter().find(|(k, _)| *k == f.key()) {
                let diff = (prev - &col).norm();
                assert!(diff < 1e-6 * (1.0 + prev.norm()), "key collision with different value surface");
            } else {
                seen.push((f.key().to_string(), col));
            }
        }
    }

    #[test]
    fn display_string_flattens_products() {
        let x1 = Feature::leaf(0);
        let x2 = Feature::leaf(1);
        let x10 = Feature::leaf(9);
        let p1 = make_crossover(&x2, &x1, 5, None).unwrap();
        let p2 = make_crossover(&p1, &x10, 5, None).unwrap();
        assert_eq!(p2.display_string(), "x1*x10*x2");
        // alternative grouping prints identically
        let q1 = make_crossover(&x1, &x10, 5, None).unwrap();
        let q2 = make_crossover(&x2, &q1, 5, None).unwrap();
        assert_eq!(q2.display_string(), "x1*x10*x2");
        assert_ne!(p2.key(), q2.key(), "grouping stays visible in the canonical key");
    }

    #[test]
    fn projection_display_matches_report_format() {
        let f = make_projection(
            &[Feature::leaf(3), Feature::leaf(7)],
            &[0.24, -8.83],
            -10.33,
            &g("sigmoid"),
            5,
            None,
        )
        .unwrap();
        assert_eq!(f.display_string(), "sigmoid(-10.33+0.24*x4-8.83*x8)");
    }
}
