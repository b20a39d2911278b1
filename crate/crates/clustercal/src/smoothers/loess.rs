//! LOESS: local polynomial regression with tricube neighborhood weights and
//! bias-corrected AIC (Hurvich-Simonoff) span selection.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LoessError {
    #[error("need at least {need} observations for degree {degree}, got {got}")]
    TooFewPoints { need: usize, degree: usize, got: usize },
    #[error("span {span} gives a neighborhood of {q} points; degree {degree} needs {need}")]
    SpanTooSmall { span: f64, q: usize, degree: usize, need: usize },
    #[error("span must lie in (0, 1], got {0}")]
    BadSpan(f64),
    #[error("degree must be 1 or 2, got {0}")]
    BadDegree(usize),
    #[error("singular local fit near x = {0}; neighborhood has no spread")]
    SingularLocalFit(f64),
    #[error("no span in the grid admits a finite AICc")]
    NoFeasibleSpan,
    #[error("span grid is empty")]
    EmptySpanGrid,
    #[error("inputs must be finite and of equal length")]
    BadInput,
}

/// Prediction from a fitted LOESS model.
#[derive(Debug, Clone, Copy)]
pub struct LoessPrediction {
    pub estimate: f64,
    pub se: f64,
    /// Set when the query point lies outside the training range.
    pub extrapolated: bool,
}

/// Fitted LOESS smoother. Training data is retained; predictions refit the
/// local polynomial at each query point.
#[derive(Debug, Clone)]
pub struct LoessModel {
    /// Training abscissae sorted ascending.
    x: Vec<f64>,
    y: Vec<f64>,
    weight: Vec<f64>,
    pub span: f64,
    pub degree: usize,
    /// Effective degrees of freedom: trace of the smoother hat matrix.
    pub trace_hat: f64,
    /// Weighted residual sum of squares at the training points.
    pub rss: f64,
    fitted: Vec<f64>,
    q: usize,
}

impl LoessModel {
    pub fn n(&self) -> usize {
        self.x.len()
    }

    /// Fitted values in sorted-x order.
    pub fn fitted(&self) -> &[f64] {
        &self.fitted
    }

    /// Training abscissae in sorted order.
    pub fn x_sorted(&self) -> &[f64] {
        &self.x
    }

    /// Residual variance estimate RSS / (n - trace_hat).
    pub fn sigma2(&self) -> f64 {
        let df = (self.n() as f64 - self.trace_hat).max(1.0);
        self.rss / df
    }

    /// Local fit at `x0`: estimate plus the smoother row over the training
    /// points (the linear operator l(x0) with hat-row entries in sorted-x
    /// order, nonzero only on the neighborhood).
    fn local_fit(&self, x0: f64) -> Result<(f64, Vec<(usize, f64)>), LoessError> {
        let n = self.n();
        let (lo, hi) = neighborhood(&self.x, x0, self.q);
        let mut d_max = 0.0_f64;
        for i in lo..hi {
            d_max = d_max.max((self.x[i] - x0).abs());
        }
        let p = self.degree + 1;
        // Weighted normal equations on the centered polynomial basis.
        let mut ata = [[0.0_f64; 3]; 3];
        let mut aty = [0.0_f64; 3];
        let mut weights = Vec::with_capacity(hi - lo);
        for i in lo..hi {
            let d = (self.x[i] - x0).abs();
            let w = self.weight[i] * tricube(if d_max > 0.0 { d / d_max } else { 0.0 });
            weights.push(w);
            if w == 0.0 {
                continue;
            }
            let c = self.x[i] - x0;
            let basis = [1.0, c, c * c];
            for r in 0..p {
                for s in 0..p {
                    ata[r][s] += w * basis[r] * basis[s];
                }
                aty[r] += w * basis[r] * self.y[i];
            }
        }
        let inv = invert_small(&ata, p).ok_or(LoessError::SingularLocalFit(x0))?;
        let mut estimate = 0.0;
        for s in 0..p {
            estimate += inv[0][s] * aty[s];
        }
        // l_i = w_i * (first row of (B'WB)^{-1}) . b_i
        let mut row = Vec::with_capacity(hi - lo);
        for (k, i) in (lo..hi).enumerate() {
            let w = weights[k];
            if w == 0.0 {
                continue;
            }
            let c = self.x[i] - x0;
            let basis = [1.0, c, c * c];
            let mut l = 0.0;
            for s in 0..p {
                l += inv[0][s] * basis[s];
            }
            row.push((i, w * l));
        }
        Ok((estimate, row))
    }

    /// Point estimate at `x0`, flagged when extrapolating.
    pub fn predict(&self, x0: f64) -> Result<LoessPrediction, LoessError> {
        let pred = self.predict_se(x0)?;
        Ok(pred)
    }

    /// Estimate and standard error at `x0` from the smoother operator row:
    /// SE^2 = sigma2 * ||l(x0)||^2.
    pub fn predict_se(&self, x0: f64) -> Result<LoessPrediction, LoessError> {
        let (estimate, row) = self.local_fit(x0)?;
        let norm2: f64 = row.iter().map(|(_, l)| l * l).sum();
        let se = (self.sigma2() * norm2).max(0.0).sqrt();
        let extrapolated = x0 < self.x[0] || x0 > self.x[self.n() - 1];
        Ok(LoessPrediction { estimate, se, extrapolated })
    }
}

#[inline]
fn tricube(u: f64) -> f64 {
    let a = u.abs();
    if a >= 1.0 {
        0.0
    } else {
        let t = 1.0 - a * a * a;
        t * t * t
    }
}

/// Index range [lo, hi) of the `q` nearest neighbors of `x0` in sorted `x`,
/// breaking distance ties towards the left for determinism.
fn neighborhood(x: &[f64], x0: f64, q: usize) -> (usize, usize) {
    let n = x.len();
    let q = q.min(n);
    let mut hi = x.partition_point(|&v| v < x0);
    let mut lo = hi;
    while hi - lo < q {
        if lo == 0 {
            hi += 1;
        } else if hi == n {
            lo -= 1;
        } else if (x0 - x[lo - 1]) <= (x[hi] - x0) {
            lo -= 1;
        } else {
            hi += 1;
        }
    }
    (lo, hi)
}

/// Invert the leading p-by-p block of a small symmetric matrix via
/// unpivoted Gaussian elimination; None when singular.
fn invert_small(a: &[[f64; 3]; 3], p: usize) -> Option<[[f64; 3]; 3]> {
    let mut m = [[0.0_f64; 6]; 3];
    let mut scale = 0.0_f64;
    for r in 0..p {
        for s in 0..p {
            m[r][s] = a[r][s];
            scale = scale.max(a[r][s].abs());
        }
        m[r][p + r] = 1.0;
    }
    if scale == 0.0 {
        return None;
    }
    for col in 0..p {
        // Partial pivot within the block.
        let mut piv = col;
        for r in (col + 1)..p {
            if m[r][col].abs() > m[piv][col].abs() {
                piv = r;
            }
        }
        if m[piv][col].abs() < 1e-12 * scale {
            return None;
        }
        m.swap(col, piv);
        let d = m[col][col];
        for s in 0..(2 * p) {
            m[col][s] /= d;
        }
        for r in 0..p {
            if r == col {
                continue;
            }
            let f = m[r][col];
            if f != 0.0 {
                for s in 0..(2 * p) {
                    m[r][s] -= f * m[col][s];
                }
            }
        }
    }
    let mut inv = [[0.0_f64; 3]; 3];
    for r in 0..p {
        for s in 0..p {
            inv[r][s] = m[r][p + s];
        }
    }
    Some(inv)
}

/// Fit a LOESS smoother with tricube weights and the given span and degree.
pub fn loess_fit(x: &[f64], y: &[f64], span: f64, degree: usize) -> Result<LoessModel, LoessError> {
    if x.len() != y.len() || x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(LoessError::BadInput);
    }
    if !(1..=2).contains(&degree) {
        return Err(LoessError::BadDegree(degree));
    }
    if !(span > 0.0 && span <= 1.0) {
        return Err(LoessError::BadSpan(span));
    }
    let n = x.len();
    let need = degree + 2;
    if n < need {
        return Err(LoessError::TooFewPoints { need, degree, got: n });
    }
    let q = ((span * n as f64).ceil() as usize).min(n);
    if q < need {
        return Err(LoessError::SpanTooSmall { span, q, degree, need });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| x[i].partial_cmp(&x[j]).unwrap().then(i.cmp(&j)));
    let xs: Vec<f64> = order.iter().map(|&i| x[i]).collect();
    let ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();

    let mut model = LoessModel {
        x: xs,
        y: ys,
        weight: vec![1.0; n],
        span,
        degree,
        trace_hat: 0.0,
        rss: 0.0,
        fitted: Vec::with_capacity(n),
        q,
    };

    let mut trace = 0.0;
    let mut rss = 0.0;
    let mut fitted = Vec::with_capacity(n);
    for i in 0..n {
        let (est, row) = model.local_fit(model.x[i])?;
        fitted.push(est);
        for &(j, l) in &row {
            if j == i {
                trace += l;
            }
        }
        let r = model.y[i] - est;
        rss += model.weight[i] * r * r;
    }
    model.fitted = fitted;
    model.trace_hat = trace;
    model.rss = rss;
    Ok(model)
}

/// Bias-corrected AIC of a fitted LOESS model (Hurvich-Simonoff):
/// `log(RSS/n) + 1 + 2(tr+1)/(n - tr - 2)`. Returns +inf when the
/// denominator is not positive, which rejects the span.
pub fn loess_aicc(model: &LoessModel) -> f64 {
    let n = model.n() as f64;
    let tr = model.trace_hat;
    let denom = n - tr - 2.0;
    if denom <= 0.0 {
        return f64::INFINITY;
    }
    let sigma2 = (model.rss / n).max(1e-300);
    sigma2.ln() + 1.0 + 2.0 * (tr + 1.0) / denom
}

/// Pick the span from `span_grid` with the lowest AICc (degree-2 fits),
/// breaking ties towards the smallest span. Errors when every candidate is
/// infeasible.
pub fn loess_select_span(x: &[f64], y: &[f64], span_grid: &[f64]) -> Result<f64, LoessError> {
    if span_grid.is_empty() {
        return Err(LoessError::EmptySpanGrid);
    }
    let mut grid: Vec<f64> = span_grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best: Option<(f64, f64)> = None;
    for &span in &grid {
        let aicc = match loess_fit(x, y, span, 2) {
            Ok(model) => loess_aicc(&model),
            Err(_) => continue,
        };
        if !aicc.is_finite() {
            continue;
        }
        match best {
            Some((_, best_aicc)) if aicc >= best_aicc => {}
            _ => best = Some((span, aicc)),
        }
    }
    best.map(|(s, _)| s).ok_or(LoessError::NoFeasibleSpan)
}

/// Default span grid: 0.30 to 1.00 in steps of 0.05.
pub fn default_span_grid() -> Vec<f64> {
    (0..=14).map(|i| 0.30 + 0.05 * i as f64).collect()
}
