//! Synthetic convex training tasks with exact loss oracles and known optima.
//!
//! A task owns its full dataset. Workers see disjoint shards of it; the
//! parameter server evaluates the exact global loss on the whole set.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// `f(W) = (1/2n) sum (a_i^T W - b_i)^2`
    Quadratic,
    /// `f(W) = (1/n) sum log(1 + exp(-y_i a_i^T W)) + (reg/2) |W|^2`
    Logistic,
}

/// Everything needed to regenerate a task deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub dim: usize,
    pub examples: usize,
    /// Ratio of the largest to smallest feature variance.
    pub condition: f64,
    /// Label noise standard deviation (quadratic) or flip temperature (logistic).
    pub noise: f64,
    /// L2 regularisation, logistic only.
    pub reg: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn quadratic(dim: usize, examples: usize, condition: f64, seed: u64) -> Self {
        TaskSpec {
            kind: TaskKind::Quadratic,
            dim,
            examples,
            condition,
            noise: 0.1,
            reg: 0.0,
            seed,
        }
    }

    pub fn logistic(dim: usize, examples: usize, condition: f64, seed: u64) -> Self {
        TaskSpec {
            kind: TaskKind::Logistic,
            dim,
            examples,
            condition,
            noise: 1.0,
            reg: 1e-2,
            seed,
        }
    }

    pub fn build(&self) -> Result<TrainingTask> {
        if self.dim == 0 {
            return Err(Error::invalid("dim", "must be at least 1"));
        }
        if self.examples < self.dim {
            return Err(Error::Underdetermined {
                examples: self.examples,
                dim: self.dim,
            });
        }
        if !(self.condition >= 1.0 && self.condition.is_finite()) {
            return Err(Error::invalid("condition", "must be >= 1"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise", "must be non-negative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let d = self.dim;
        // feature scales geometric from 1 down to 1/sqrt(condition)
        let scales: Vec<f64> = (0..d)
            .map(|j| {
                let frac = if d == 1 { 0.0 } else { j as f64 / (d - 1) as f64 };
                self.condition.powf(-0.5 * frac)
            })
            .collect();
        let w_true: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let mut rows = Vec::with_capacity(self.examples * d);
        let mut targets = Vec::with_capacity(self.examples);
        for _ in 0..self.examples {
            let start = rows.len();
            for s in &scales {
                let z: f64 = rng.sample(StandardNormal);
                rows.push(z * s);
            }
            let margin: f64 = rows[start..].iter().zip(&w_true).map(|(a, w)| a * w).sum();
            let target = match self.kind {
                TaskKind::Quadratic => margin + self.noise * rng.sample::<f64, _>(StandardNormal),
                TaskKind::Logistic => {
                    let p = sigmoid(margin / self.noise.max(1e-12));
                    if rng.random::<f64>() < p {
                        1.0
                    } else {
                        -1.0
                    }
                }
            };
            targets.push(target);
        }
        TrainingTask::from_parts(self.clone(), rows, targets)
    }
}

/// `make_quadratic(dim, n, condition, seed)` with the default label noise.
pub fn make_quadratic(dim: usize, examples: usize, condition: f64, seed: u64) -> Result<TrainingTask> {
    TaskSpec::quadratic(dim, examples, condition, seed).build()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiniBatch {
    pub indices: Vec<usize>,
}

impl MiniBatch {
    pub fn new(indices: Vec<usize>) -> Self {
        MiniBatch { indices }
    }

    pub fn full(n: usize) -> Self {
        MiniBatch {
            indices: (0..n).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.indices.len()
    }
}

/// An immutable training task. Row-major design matrix, targets, and the
/// solved optimum.
#[derive(Debug, Clone)]
pub struct TrainingTask {
    spec: TaskSpec,
    rows: Vec<f64>,
    targets: Vec<f64>,
    optimum: ParamVector,
    optimal_loss: f64,
    /// `A^T A / n`, quadratic only.
    hessian: Vec<f64>,
    lipschitz: f64,
    condition_number: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl TrainingTask {
    /// Build a task from explicit data. `spec.dim`/`spec.examples` are
    /// overwritten from the data shape.
    pub fn from_data(kind: TaskKind, rows: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        if dim == 0 {
            return Err(Error::invalid("rows", "need at least one non-empty row"));
        }
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("rows", "ragged design matrix"));
        }
        if rows.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.len(),
                actual: targets.len(),
            });
        }
        let spec = TaskSpec {
            kind,
            dim,
            examples: rows.len(),
            condition: 1.0,
            noise: 0.0,
            reg: if kind == TaskKind::Logistic { 1e-2 } else { 0.0 },
            seed: 0,
        };
        if spec.examples < dim {
            return Err(Error::Underdetermined {
                examples: spec.examples,
                dim,
            });
        }
        Self::from_parts(spec, rows.into_iter().flatten().collect(), targets)
    }

    fn from_parts(mut spec: TaskSpec, rows: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        let d = spec.dim;
        let n = targets.len();
        spec.examples = n;
        if rows.iter().chain(&targets).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { what: "task data" });
        }
        let mut gram = vec![0.0; d * d];
        for row in rows.chunks_exact(d) {
            for i in 0..d {
                for j in 0..d {
                    gram[i * d + j] += row[i] * row[j];
                }
            }
        }
        gram.iter_mut().for_each(|x| *x /= n as f64);
        let eig = DMatrix::from_row_slice(d, d, &gram).symmetric_eigen();
        let lmax = eig.eigenvalues.max();
        let lmin = eig.eigenvalues.min();
        let mut task = TrainingTask {
            spec,
            rows,
            targets,
            optimum: ParamVector::zeros(d),
            optimal_loss: 0.0,
            hessian: Vec::new(),
            lipschitz: 0.0,
            condition_number: 0.0,
        };
        match task.spec.kind {
            TaskKind::Quadratic => {
                if lmin <= 1e-12 * lmax.max(1e-300) {
                    return Err(Error::Underdetermined { examples: n, dim: d });
                }
                let h = DMatrix::from_row_slice(d, d, &gram);
                let mut rhs = DVector::zeros(d);
                for (row, b) in task.rows.chunks_exact(d).zip(&task.targets) {
                    for i in 0..d {
                        rhs[i] += row[i] * b / n as f64;
                    }
                }
                let chol = h
                    .cholesky()
                    .ok_or_else(|| Error::NoConvergence("normal equations are not positive definite".into()))?;
                let sol = chol.solve(&rhs);
                task.optimum = ParamVector::new(sol.iter().copied().collect());
                task.hessian = gram;
                task.lipschitz = lmax;
                task.condition_number = lmax / lmin;
                task.optimal_loss = task.direct_loss(&task.optimum);
            }
            TaskKind::Logistic => {
                let reg = task.spec.reg;
                if reg <= 0.0 {
                    return Err(Error::invalid("reg", "logistic task needs positive regularisation"));
                }
                let smooth = 0.25 * lmax + reg;
                task.lipschitz = smooth;
                task.condition_number = smooth / reg;
                task.optimum = task.solve_logistic(smooth)?;
                task.optimal_loss = task.direct_loss(&task.optimum);
            }
        }
        Ok(task)
    }

    /// Full-batch gradient descent with step `1/L` until the gradient norm
    /// drops below 1e-10.
    fn solve_logistic(&self, smooth: f64) -> Result<ParamVector> {
        let mut w = ParamVector::zeros(self.dim());
        let step = 1.0 / smooth;
        for _ in 0..2_000_000 {
            let g = self.full_gradient_unchecked(&w);
            if g.norm() < 1e-10 {
                return Ok(w);
            }
            w.axpy(-step, &g);
        }
        Err(Error::NoConvergence(
            "logistic optimum: gradient descent did not reach 1e-10".into(),
        ))
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn kind(&self) -> TaskKind {
        self.spec.kind
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn optimum(&self) -> &ParamVector {
        &self.optimum
    }

    pub fn optimal_loss(&self) -> f64 {
        self.optimal_loss
    }

    /// Smoothness constant of the full loss (largest Hessian eigenvalue bound).
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn condition_number(&self) -> f64 {
        self.condition_number
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.rows[i * d..(i + 1) * d]
    }

    pub fn target(&self, i: usize) -> f64 {
        self.targets[i]
    }

    fn check_w(&self, w: &ParamVector) -> Result<()> {
        if w.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: w.dim(),
            });
        }
        Ok(())
    }

    fn example_grad_into(&self, i: usize, w: &[f64], scale: f64, out: &mut [f64]) {
        let a = self.row(i);
        let margin: f64 = a.iter().zip(w).map(|(x, y)| x * y).sum();
        let coeff = match self.spec.kind {
            TaskKind::Quadratic => margin - self.targets[i],
            TaskKind::Logistic => {
                let y = self.targets[i];
                -y * sigmoid(-y * margin)
            }
        };
        for (o, x) in out.iter_mut().zip(a) {
            *o += scale * coeff * x;
        }
    }

    /// Unbiased stochastic gradient over the examples in `batch`.
    pub fn minibatch_gradient(&self, w: &ParamVector, batch: &MiniBatch) -> Result<ParamVector> {
        self.check_w(w)?;
        if batch.indices.is_empty() {
            return Err(Error::invalid("batch", "must contain at least one example"));
        }
        if let Some(&bad) = batch.indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: self.len(),
            });
        }
        Ok(self.batch_gradient_unchecked(w, &batch.indices))
    }

    pub(crate) fn batch_gradient_unchecked(&self, w: &ParamVector, indices: &[usize]) -> ParamVector {
        let mut out = vec![0.0; self.dim()];
        let scale = 1.0 / indices.len() as f64;
        for &i in indices {
            self.example_grad_into(i, w.as_slice(), scale, &mut out);
        }
        if self.spec.kind == TaskKind::Logistic {
            for (o, x) in out.iter_mut().zip(w.as_slice()) {
                *o += self.spec.reg * x;
            }
        }
        ParamVector::new(out)
    }

    fn full_gradient_unchecked(&self, w: &ParamVector) -> ParamVector {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch_gradient_unchecked(w, &all)
    }

    pub fn full_gradient(&self, w: &ParamVector) -> Result<ParamVector> {
        self.check_w(w)?;
        Ok(self.full_gradient_unchecked(w))
    }

    /// Loss evaluated example by example.
    fn direct_loss(&self, w: &ParamVector) -> f64 {
        let n = self.len() as f64;
        let w = w.as_slice();
        let sum: f64 = (0..self.len())
            .map(|i| {
                let margin: f64 = self.row(i).iter().zip(w).map(|(a, b)| a * b).sum();
                match self.spec.kind {
                    TaskKind::Quadratic => 0.5 * (margin - self.targets[i]).powi(2),
                    TaskKind::Logistic => softplus(-self.targets[i] * margin),
                }
            })
            .sum();
        let mut loss = sum / n;
        if self.spec.kind == TaskKind::Logistic {
            loss += 0.5 * self.spec.reg * w.iter().map(|x| x * x).sum::<f64>();
        }
        loss
    }

    /// Exact global loss. The quadratic case uses `f* + e^T H e / 2`, which is
    /// exact because the gradient vanishes at the optimum.
    pub fn global_loss(&self, w: &ParamVector) -> Result<f64> {
        self.check_w(w)?;
        Ok(self.global_loss_unchecked(w))
    }

    pub(crate) fn global_loss_unchecked(&self, w: &ParamVector) -> f64 {
        match self.spec.kind {
            TaskKind::Quadratic => {
                let d = self.dim();
                let e: Vec<f64> = w
                    .as_slice()
                    .iter()
                    .zip(self.optimum.as_slice())
                    .map(|(a, b)| a - b)
                    .collect();
                let mut q = 0.0;
                for i in 0..d {
                    let hi = &self.hessian[i * d..(i + 1) * d];
                    let row: f64 = hi.iter().zip(&e).map(|(h, x)| h * x).sum();
                    q += e[i] * row;
                }
                self.optimal_loss + 0.5 * q.max(0.0)
            }
            TaskKind::Logistic => self.direct_loss(w),
        }
    }

    /// Split example indices across `m` workers. `skew = 0` gives iid shards;
    /// `skew = 1` gives label-sorted contiguous shards. Shard sizes differ by
    /// at most one.
    pub fn shards(&self, m: usize, skew: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
        if m == 0 {
            return Err(Error::invalid("workers", "must be at least 1"));
        }
        if m > self.len() {
            return Err(Error::invalid("workers", "more workers than examples"));
        }
        if !(0.0..=1.0).contains(&skew) {
            return Err(Error::invalid("skew", "must lie in [0, 1]"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5a4d);
        let mut order: Vec<usize> = (0..self.len()).collect();
        if skew > 0.0 {
            order.sort_by(|&a, &b| self.targets[a].total_cmp(&self.targets[b]).then(a.cmp(&b)));
            let n = order.len();
            for i in 0..n {
                if rng.random::<f64>() >= skew {
                    let j = rng.random_range(0..n);
                    order.swap(i, j);
                }
            }
        } else {
            order.shuffle(&mut rng);
        }
        let n = order.len();
        let base = n / m;
        let extra = n % m;
        let mut out = Vec::with_capacity(m);
        let mut start = 0;
        for k in 0..m {
            let len = base + usize::from(k < extra);
            out.push(order[start..start + len].to_vec());
            start += len;
        }
        Ok(out)
    }

    pub fn to_document(&self) -> TaskDocument {
        TaskDocument {
            spec: self.spec.clone(),
            rows: self.rows.chunks_exact(self.dim()).map(|r| r.to_vec()).collect(),
            targets: self.targets.clone(),
            optimum: self.optimum.clone(),
            optimal_loss: self.optimal_loss,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.to_document()).map_err(|e| Error::Format(e.to_string()))
    }

    /// Rebuilds the task from inline data; the stored optimum must agree with
    /// the recomputed one.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TaskDocument = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        doc.into_task()
    }
}

/// JSON export format: generating spec plus inline data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDocument {
    pub spec: TaskSpec,
    pub rows: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub optimum: ParamVector,
    pub optimal_loss: f64,
}

impl TaskDocument {
    pub fn into_task(self) -> Result<TrainingTask> {
        let dim = self.spec.dim;
        if self.rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Format("row length differs from spec.dim".into()));
        }
        let task = TrainingTask::from_parts(self.spec, self.rows.into_iter().flatten().collect(), self.targets)?;
        let drift = task.optimum.sub(&self.optimum).norm();
        if drift > 1e-8 * (1.0 + task.optimum.norm()) {
            return Err(Error::Format(format!("stored optimum differs from recomputed optimum by {drift:e}")));
        }
        Ok(task)
    }
}
