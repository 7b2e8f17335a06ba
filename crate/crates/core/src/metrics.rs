//! Distributional and paired metrics over embedding and posterior sets.
//!
//! Sets are `(n, d)` tensors, one row per item.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// `d × d`, row-major.
    pub cov: Tensor,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn check_set(set: &Tensor, what: &'static str) -> Result<(usize, usize)> {
    if set.rank() != 2 {
        return Err(Error::Contract(format!("{what} must be an (n, d) matrix, got {:?}", set.shape())));
    }
    if !set.is_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok((set.rows(), set.cols()))
}

/// Sample mean and unbiased (`n − 1`) covariance.
pub fn fit_gaussian(set: &Tensor) -> Result<GaussianStats> {
    let (n, d) = check_set(set, "embedding set")?;
    if n < 2 {
        return Err(Error::Contract(format!("need at least 2 samples to fit a Gaussian, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(set.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let row = set.row(i);
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in a..d {
                cov[a * d + b] += da * (row[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / (n - 1) as f64;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    Ok(GaussianStats {
        mean,
        cov: Tensor::matrix(d, d, cov)?,
    })
}

/// Eigenvalues (ascending) and eigenvectors (columns of the returned matrix)
/// of a symmetric matrix by cyclic Jacobi rotations.
pub fn eigen_sym(m: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    if m.rank() != 2 || m.rows() != m.cols() {
        return Err(Error::Contract(format!("eigen_sym needs a square matrix, got {:?}", m.shape())));
    }
    let n = m.rows();
    let mut a: Vec<f64> = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (m.at2(i, j) + m.at2(j, i));
        }
    }
    let mut v = Tensor::eye(n).into_data();
    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    while off(&a) >= JACOBI_TOL {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence(format!(
                "Jacobi eigensolver: off-diagonal norm {:e} after {JACOBI_MAX_SWEEPS} sweeps",
                off(&a)
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (new, &old) in order.iter().enumerate() {
        for k in 0..n {
            vecs[k * n + new] = v[k * n + old];
        }
    }
    Ok((values, Tensor::matrix(n, n, vecs)?))
}

/// PSD square root with eigenvalues clamped at 0.
pub fn sqrtm_psd(m: &Tensor) -> Result<Tensor> {
    let (values, vecs) = eigen_sym(m)?;
    let n = values.len();
    let mut scaled = vecs.clone();
    for k in 0..n {
        for j in 0..n {
            scaled.data_mut()[k * n + j] *= values[j].max(0.0).sqrt();
        }
    }
    scaled.matmul(&vecs.transpose()?)
}

fn trace(m: &Tensor) -> f64 {
    (0..m.rows()).map(|i| m.at2(i, i)).sum()
}

/// `‖μ_a − μ_b‖² + tr(Σ_a + Σ_b − 2·(Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2})`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("frechet_distance", &[a.dim()], &[b.dim()]));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let sa = sqrtm_psd(&a.cov)?;
    let inner = sa.matmul(&b.cov)?.matmul(&sa)?;
    let cross = sqrtm_psd(&inner)?;
    let fd = mean_term + trace(&a.cov) + trace(&b.cov) - 2.0 * trace(&cross);
    Ok(fd.max(0.0))
}

/// Fréchet distance between Gaussians fit to two embedding sets.
pub fn frechet_distance_sets(a: &Tensor, b: &Tensor) -> Result<f64> {
    frechet_distance(&fit_gaussian(a)?, &fit_gaussian(b)?)
}

fn check_posteriors(p: &Tensor, what: &'static str) -> Result<(usize, usize)> {
    let (n, c) = check_set(p, what)?;
    for i in 0..n {
        let row = p.row(i);
        if row.iter().any(|&v| v < 0.0) {
            return Err(Error::Contract(format!("{what} row {i} has a negative probability")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("{what} row {i} sums to {s}, not 1")));
        }
    }
    Ok((n, c))
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&p, &q)| {
            let (pc, qc) = (p.max(PROB_FLOOR), q.max(PROB_FLOOR));
            p * (pc.ln() - qc.ln())
        })
        .sum()
}

/// Mean over paired rows of `KL(ref_i ‖ gen_i)`.
pub fn paired_kl(reference: &Tensor, generated: &Tensor) -> Result<f64> {
    let (n, _) = check_posteriors(reference, "reference posteriors")?;
    check_posteriors(generated, "generated posteriors")?;
    if reference.shape() != generated.shape() {
        return Err(Error::shape("paired_kl", reference.shape(), generated.shape()));
    }
    if n == 0 {
        return Err(Error::Empty("posterior set"));
    }
    let total: f64 = (0..n).map(|i| kl(reference.row(i), generated.row(i))).sum();
    Ok((total / n as f64).max(0.0))
}

/// `exp(mean_i KL(p_i ‖ p̄))` with `p̄` the marginal posterior.
pub fn inception_score(p: &Tensor) -> Result<f64> {
    let (n, c) = check_posteriors(p, "posteriors")?;
    if n == 0 {
        return Err(Error::Empty("posterior set"));
    }
    let mut marginal = vec![0.0; c];
    for i in 0..n {
        for (m, v) in marginal.iter_mut().zip(p.row(i)) {
            *m += v / n as f64;
        }
    }
    let mean_kl: f64 = (0..n).map(|i| kl(p.row(i), &marginal)).sum::<f64>() / n as f64;
    Ok(mean_kl.max(0.0).exp())
}

/// Cosine similarity; zero if either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean cosine similarity between paired rows.
pub fn embedding_score(text: &Tensor, audio: &Tensor) -> Result<f64> {
    let (n, _) = check_set(text, "text embeddings")?;
    check_set(audio, "audio embeddings")?;
    if text.shape() != audio.shape() {
        return Err(Error::shape("embedding_score", text.shape(), audio.shape()));
    }
    if n == 0 {
        return Err(Error::Empty("embedding set"));
    }
    Ok((0..n).map(|i| cosine(text.row(i), audio.row(i))).sum::<f64>() / n as f64)
}

/// Minimum-cost perfect assignment for a square cost matrix.
/// Returns `assignment[row] = column`.
pub fn hungarian(cost: &Tensor) -> Result<Vec<usize>> {
    if cost.rank() != 2 || cost.rows() != cost.cols() {
        return Err(Error::Contract(format!("assignment needs a square cost matrix, got {:?}", cost.shape())));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("assignment cost".into()));
    }
    let n = cost.rows();
    // 1-based potentials formulation; column 0 is a virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.at2(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

/// Empirical 2-Wasserstein distance between equal-size point sets via an
/// exact optimal assignment on squared Euclidean costs.
pub fn wasserstein2(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (n, d) = check_set(a, "point set")?;
    check_set(b, "point set")?;
    if a.shape() != b.shape() {
        return Err(Error::shape("wasserstein2", a.shape(), b.shape()));
    }
    if n == 0 {
        return Err(Error::Empty("point set"));
    }
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = (0..d).map(|k| (a.at2(i, k) - b.at2(j, k)).powi(2)).sum();
        }
    }
    let cost = Tensor::matrix(n, n, cost)?;
    let assignment = hungarian(&cost)?;
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost.at2(i, j)).sum();
    Ok((total / n as f64).sqrt())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VecLine {
    id: String,
    vec: Vec<f64>,
}

/// Parses `{"id": ..., "vec": [...]}` lines. Blank lines are skipped; the
/// first row fixes the dimension. `source` names the input in errors.
pub fn parse_vector_jsonl(text: &str, source: &str) -> Result<(Vec<String>, Tensor)> {
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row: VecLine = serde_json::from_str(line).map_err(|e| Error::parse(source, lineno, e.to_string()))?;
        let d = *dim.get_or_insert(row.vec.len());
        if row.vec.len() != d {
            return Err(Error::parse(
                source,
                lineno,
                format!("vector has {} entries, expected {d}", row.vec.len()),
            ));
        }
        if row.vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(source, lineno, "non-finite value"));
        }
        ids.push(row.id);
        data.extend(row.vec);
    }
    let d = dim.unwrap_or(0);
    Ok((ids.clone(), Tensor::matrix(ids.len(), d, data)?))
}

pub fn read_vector_jsonl(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_vector_jsonl(&text, &path.display().to_string())
}

/// Parses a numeric CSV table with a header row, such as `flowlab sample`
/// output. A `label` column is dropped; row ids are the 1-based row numbers.
pub fn parse_vector_csv(text: &str, source: &str) -> Result<(Vec<String>, Tensor)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Tensor::matrix(0, 0, vec![]).map(|t| (vec![], t));
    };
    let keep: Vec<bool> = header.split(',').map(|h| h.trim() != "label").collect();
    let d = keep.iter().filter(|&&k| k).count();
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != keep.len() {
            return Err(Error::parse(source, i + 1, format!("expected {} fields, got {}", keep.len(), fields.len())));
        }
        for (f, _) in fields.iter().zip(&keep).filter(|(_, &k)| k) {
            let v: f64 = f.trim().parse().map_err(|_| Error::parse(source, i + 1, format!("not a number: {f:?}")))?;
            if !v.is_finite() {
                return Err(Error::parse(source, i + 1, "non-finite value"));
            }
            data.push(v);
        }
        ids.push((ids.len() + 1).to_string());
    }
    Ok((ids.clone(), Tensor::matrix(ids.len(), d, data)?))
}

/// JSON-lines vectors, or a CSV table when the extension is `.csv`.
pub fn read_vectors(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let source = path.display().to_string();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        parse_vector_csv(&text, &source)
    } else {
        parse_vector_jsonl(&text, &source)
    }
}
