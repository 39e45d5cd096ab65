//! Linear centered kernel alignment and layer-wise stability/plasticity
//! profiles.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Error, Result};
use crate::nn::{Model, TapReduction};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where a feature matrix came from.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Provenance {
    pub layer: String,
    pub model: String,
    pub dataset: String,
}

/// `n × d` matrix of features, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<S: Scalar> {
    rows: usize,
    cols: usize,
    values: Vec<S>,
    pub tag: Provenance,
}

impl<S: Scalar> FeatureMatrix<S> {
    pub fn new(rows: usize, cols: usize, values: Vec<S>) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols != values.len() {
            return Err(shape_err!("{rows}x{cols} feature matrix with {} values", values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("feature matrix contains NaN or infinite values".into()));
        }
        Ok(Self { rows, cols, values, tag: Provenance::default() })
    }

    pub fn from_tensor(t: &Tensor<S>) -> Result<Self> {
        let rows = t.shape()[0];
        Self::new(rows, t.numel() / rows, t.data().to_vec())
    }

    pub fn with_tag(mut self, tag: Provenance) -> Self {
        self.tag = tag;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    fn rows_identical(&self) -> bool {
        let first = self.row(0);
        (1..self.rows).all(|r| self.row(r) == first)
    }
}

/// Subtracts each column's mean.
pub fn center<S: Scalar>(x: &FeatureMatrix<S>) -> Result<FeatureMatrix<S>> {
    if x.values.iter().any(|v| v.is_nan()) {
        return Err(Error::Data("cannot center NaN features".into()));
    }
    let n = S::from_usize_lossy(x.rows);
    let mut means = vec![S::zero(); x.cols];
    for r in 0..x.rows {
        for (m, &v) in means.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    let values = (0..x.rows)
        .flat_map(|r| x.row(r).iter().zip(&means).map(|(&v, &m)| v - m).collect::<Vec<_>>())
        .collect();
    Ok(FeatureMatrix { rows: x.rows, cols: x.cols, values, tag: x.tag.clone() })
}

/// Symmetric `n × n` Gram matrix of row inner products.
#[derive(Clone, Debug, PartialEq)]
pub struct Gram<S> {
    pub n: usize,
    pub values: Vec<S>,
}

impl<S: Scalar> Gram<S> {
    pub fn get(&self, i: usize, j: usize) -> S {
        self.values[i * self.n + j]
    }

    fn frobenius_dot(&self, other: &Gram<S>) -> S {
        self.values.iter().zip(&other.values).map(|(&a, &b)| a * b).sum()
    }
}

/// `K = Xc · Xcᵀ`, filled symmetrically so `K == Kᵀ` exactly.
pub fn gram<S: Scalar>(xc: &FeatureMatrix<S>) -> Gram<S> {
    let n = xc.rows;
    let mut values = vec![S::zero(); n * n];
    for i in 0..n {
        for j in i..n {
            let v = xc.row(i).iter().zip(xc.row(j)).map(|(&a, &b)| a * b).sum::<S>();
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    Gram { n, values }
}

/// Linear CKA, clamped to `[0, 1]`.
///
/// When every row of one argument is identical its centred Gram matrix is
/// zero and the score is undefined; if both arguments are degenerate the
/// score is defined as 1.
pub fn cka<S: Scalar>(x: &FeatureMatrix<S>, y: &FeatureMatrix<S>) -> Result<S> {
    if x.rows != y.rows {
        return Err(shape_err!("cka needs matching sample counts, got {} and {}", x.rows, y.rows));
    }
    if x.rows < 2 {
        return Err(contract_err!("cka needs at least 2 samples"));
    }
    match (x.rows_identical(), y.rows_identical()) {
        (true, true) => return Ok(S::one()),
        (true, false) | (false, true) => {
            return Err(Error::UndefinedScore(format!(
                "one side ({} / {}) has a zero centred Gram matrix",
                x.tag.layer, y.tag.layer
            )))
        }
        (false, false) => {}
    }
    let kx = gram(&center(x)?);
    let ky = gram(&center(y)?);
    let xy = kx.frobenius_dot(&ky);
    let (nx, ny) = (kx.frobenius_dot(&kx), ky.frobenius_dot(&ky));
    // a·sqrt(b/a) == sqrt(a·b) without overflow, exactly `a` when a == b,
    // and independent of argument order.
    let (lo, hi) = if nx <= ny { (nx, ny) } else { (ny, nx) };
    if !(lo > S::zero()) {
        return Err(Error::UndefinedScore("vanishing Gram norm".into()));
    }
    let score = xy / (lo * (hi / lo).sqrt());
    Ok(score.max(S::zero()).min(S::one()))
}

/// Stability and plasticity of one tapped layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer_index: usize,
    pub layer_name: String,
    pub stability: f64,
    pub plasticity: f64,
}

/// Per-layer scores for one stage of a continual run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaProfile {
    pub stage: usize,
    pub layers: Vec<LayerScore>,
}

impl CkaProfile {
    pub fn mean_stability(&self) -> f64 {
        self.layers.iter().map(|l| l.stability).sum::<f64>() / self.layers.len().max(1) as f64
    }

    pub fn mean_plasticity(&self) -> f64 {
        self.layers.iter().map(|l| l.plasticity).sum::<f64>() / self.layers.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer_index,layer_name,stability,plasticity\n");
        for l in &self.layers {
            writeln!(out, "{},{},{},{}", l.layer_index, l.layer_name, l.stability, l.plasticity).expect("string write");
        }
        out
    }

    pub fn from_csv(stage: usize, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("layer_index,layer_name,stability,plasticity") {
            return Err(Error::Format("missing CKA profile header".into()));
        }
        let layers = lines
            .filter(|l| !l.is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                let bad = || Error::Format(format!("malformed CKA row {line:?}"));
                if f.len() != 4 {
                    return Err(bad());
                }
                Ok(LayerScore {
                    layer_index: f[0].parse().map_err(|_| bad())?,
                    layer_name: f[1].to_string(),
                    stability: f[2].parse().map_err(|_| bad())?,
                    plasticity: f[3].parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { stage, layers })
    }
}

/// Models and evaluation batches for profiling stage `stage`.
pub struct ProfileInputs<'a, S: Scalar> {
    pub stage: usize,
    /// Encoder after the previous stage.
    pub previous: &'a Model<S>,
    /// Encoder after the current stage.
    pub current: &'a Model<S>,
    /// Encoder trained jointly on all data seen so far.
    pub joint: &'a Model<S>,
    /// Images from the tasks before this stage.
    pub old_data: &'a Tensor<S>,
    /// Images from the current task.
    pub new_data: &'a Tensor<S>,
    pub reduction: TapReduction,
    pub chunk: usize,
}

fn tap_matrices<S: Scalar>(
    model: &Model<S>,
    data: &Tensor<S>,
    reduction: TapReduction,
    chunk: usize,
) -> Result<Vec<(String, FeatureMatrix<f64>)>> {
    model
        .activations(data, chunk, reduction)?
        .into_iter()
        .map(|(name, t)| {
            let rows = t.shape()[0];
            let m = FeatureMatrix::new(rows, t.numel() / rows, t.data().iter().map(|v| v.as_f64()).collect())?;
            Ok((name.clone(), m.with_tag(Provenance { layer: name, ..Provenance::default() })))
        })
        .collect()
}

/// An undefined score (a tap whose activations are constant on one side only)
/// is reported as 0: no shared structure.
fn score(x: &FeatureMatrix<f64>, y: &FeatureMatrix<f64>) -> Result<f64> {
    match cka(x, y) {
        Ok(v) => Ok(v),
        Err(Error::UndefinedScore(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Stability `S = CKA(prev(old), cur(old))` and plasticity
/// `P = CKA(joint(new), cur(new))` for every tap.
pub fn stability_plasticity<S: Scalar>(inp: &ProfileInputs<'_, S>) -> Result<CkaProfile> {
    let names = inp.current.tap_names();
    if inp.previous.tap_names() != names || inp.joint.tap_names() != names {
        return Err(contract_err!("models being profiled expose different taps"));
    }
    let prev_old = tap_matrices(inp.previous, inp.old_data, inp.reduction, inp.chunk)?;
    let cur_old = tap_matrices(inp.current, inp.old_data, inp.reduction, inp.chunk)?;
    let joint_new = tap_matrices(inp.joint, inp.new_data, inp.reduction, inp.chunk)?;
    let cur_new = tap_matrices(inp.current, inp.new_data, inp.reduction, inp.chunk)?;
    let layers = names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            Ok(LayerScore {
                layer_index: i,
                layer_name: name.clone(),
                stability: score(&prev_old[i].1, &cur_old[i].1)?,
                plasticity: score(&joint_new[i].1, &cur_new[i].1)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CkaProfile { stage: inp.stage, layers })
}
