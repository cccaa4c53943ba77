//! Input datasets, teacher labels, hyperplane-band geometry and the two
//! augmentation operators.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::csvio::{split_meta, MetaLine};
use crate::error::{check_dim, Error, Result};
use crate::net::Network;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    Gaussian,
    Uniform,
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distribution::Gaussian => "gaussian",
            Distribution::Uniform => "uniform",
        })
    }
}

impl FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Distribution::Gaussian),
            "uniform" => Ok(Distribution::Uniform),
            other => Err(Error::Parse(format!("unknown distribution {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMeta {
    pub distribution: Distribution,
    /// Standard deviation for Gaussian data, half-width for uniform data.
    pub sigma: f64,
    pub seed: u64,
}

/// Where a sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Base,
    AugAgnostic { parent: usize, axis: usize, sign: i8 },
    AugAware { parent: usize, teacher_node: usize, sign: i8 },
}

impl Provenance {
    pub fn is_base(self) -> bool {
        matches!(self, Provenance::Base)
    }

    pub fn parent(self) -> Option<usize> {
        match self {
            Provenance::Base => None,
            Provenance::AugAgnostic { parent, .. } | Provenance::AugAware { parent, .. } => Some(parent),
        }
    }
}

fn sign_char(sign: i8) -> char {
    if sign >= 0 {
        '+'
    } else {
        '-'
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Provenance::Base => f.write_str("base"),
            Provenance::AugAgnostic { parent, axis, sign } => {
                write!(f, "agnostic:{parent}:{axis}:{}", sign_char(sign))
            }
            Provenance::AugAware {
                parent,
                teacher_node,
                sign,
            } => write!(f, "aware:{parent}:{teacher_node}:{}", sign_char(sign)),
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "base" {
            return Ok(Provenance::Base);
        }
        let bad = || Error::Parse(format!("bad provenance tag {s:?}"));
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 4 {
            return Err(bad());
        }
        let parent = parts[1].parse().map_err(|_| bad())?;
        let index = parts[2].parse().map_err(|_| bad())?;
        let sign = match parts[3] {
            "+" => 1,
            "-" => -1,
            _ => return Err(bad()),
        };
        match parts[0] {
            "agnostic" => Ok(Provenance::AugAgnostic {
                parent,
                axis: index,
                sign,
            }),
            "aware" => Ok(Provenance::AugAware {
                parent,
                teacher_node: index,
                sign,
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N x d`; the trailing `1` is implicit.
    pub inputs: Array2<f64>,
    /// `N x C` teacher outputs when labeled.
    pub labels: Option<Array2<f64>>,
    pub provenance: Vec<Provenance>,
    pub meta: GeneratorMeta,
}

impl Dataset {
    pub fn from_inputs(inputs: Array2<f64>, meta: GeneratorMeta) -> Self {
        let n = inputs.nrows();
        Dataset {
            inputs,
            labels: None,
            provenance: vec![Provenance::Base; n],
            meta,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn sample(&self, i: usize) -> ArrayView1<'_, f64> {
        self.inputs.row(i)
    }

    pub fn labels(&self) -> Result<&Array2<f64>> {
        self.labels.as_ref().ok_or(Error::Unlabeled)
    }

    /// Samples at the given indices, keeping their provenance tags.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select(Axis(0), indices),
            labels: self.labels.as_ref().map(|l| l.select(Axis(0), indices)),
            provenance: indices.iter().map(|&i| self.provenance[i]).collect(),
            meta: self.meta,
        }
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn base_only(&self) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.provenance[i].is_base()).collect();
        self.select(&idx)
    }

    /// Mean MSE objective of `student` against the stored labels.
    pub fn loss(&self, student: &Network) -> Result<f64> {
        student.mean_loss(&self.inputs, self.labels()?)
    }

    pub fn to_csv_string(&self, meta: &MetaLine) -> Result<String> {
        let mut buf = Vec::new();
        meta.write_to(&mut buf)?;
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            let mut header = vec!["provenance".to_string()];
            header.extend((0..self.dim()).map(|u| format!("x{u}")));
            if let Some(l) = &self.labels {
                header.extend((0..l.ncols()).map(|c| format!("y{c}")));
            }
            w.write_record(&header)?;
            for i in 0..self.len() {
                let mut rec = vec![self.provenance[i].to_string()];
                rec.extend(self.inputs.row(i).iter().map(|v| v.to_string()));
                if let Some(l) = &self.labels {
                    rec.extend(l.row(i).iter().map(|v| v.to_string()));
                }
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
        String::from_utf8(buf).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Metadata line describing the generator of this dataset.
    pub fn meta_line(&self) -> MetaLine {
        MetaLine::new("dataset")
            .with("distribution", self.meta.distribution)
            .with("sigma", self.meta.sigma)
            .with("seed", self.meta.seed)
            .with("n", self.len())
            .with("d", self.dim())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, meta: &MetaLine) -> Result<()> {
        std::fs::write(path, self.to_csv_string(meta)?)?;
        Ok(())
    }

    pub fn from_csv_str(text: &str) -> Result<Dataset> {
        let (meta_line, body) = split_meta(text)?;
        let parse_field = |k: &str| -> Result<&str> {
            meta_line
                .get(k)
                .ok_or_else(|| Error::Parse(format!("dataset metadata lacks {k}")))
        };
        let meta = GeneratorMeta {
            distribution: parse_field("distribution")?.parse()?,
            sigma: parse_field("sigma")?
                .parse()
                .map_err(|_| Error::Parse("sigma".into()))?,
            seed: parse_field("seed")?
                .parse()
                .map_err(|_| Error::Parse("seed".into()))?,
        };
        let mut rdr = csv::Reader::from_reader(body.as_bytes());
        let header = rdr.headers()?.clone();
        let d = header.iter().filter(|h| h.starts_with('x')).count();
        let c = header.iter().filter(|h| h.starts_with('y')).count();
        let mut prov = Vec::new();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            check_dim("dataset csv columns", 1 + d + c, rec.len())?;
            prov.push(rec[0].parse()?);
            for v in rec.iter().skip(1) {
                let v: f64 = v.parse().map_err(|_| Error::Parse(format!("bad number {v:?}")))?;
                if xs.len() < prov.len() * d {
                    xs.push(v);
                } else {
                    ys.push(v);
                }
            }
        }
        let n = prov.len();
        let inputs = Array2::from_shape_vec((n, d), xs).map_err(|e| Error::Parse(e.to_string()))?;
        let labels = if c > 0 {
            Some(Array2::from_shape_vec((n, c), ys).map_err(|e| Error::Parse(e.to_string()))?)
        } else {
            None
        };
        Ok(Dataset {
            inputs,
            labels,
            provenance: prov,
            meta,
        })
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
        Dataset::from_csv_str(&std::fs::read_to_string(path)?)
    }
}

pub fn sample_gaussian(n: usize, d: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument("N and d must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = Array2::from_shape_simple_fn((n, d), || sigma * rng.sample::<f64, _>(StandardNormal));
    Ok(Dataset::from_inputs(
        inputs,
        GeneratorMeta {
            distribution: Distribution::Gaussian,
            sigma,
            seed,
        },
    ))
}

/// `U[-half_width, half_width]^d` samples.
pub fn sample_uniform(n: usize, d: usize, half_width: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument("N and d must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = Array2::from_shape_simple_fn((n, d), || rng.random_range(-half_width..=half_width));
    Ok(Dataset::from_inputs(
        inputs,
        GeneratorMeta {
            distribution: Distribution::Uniform,
            sigma: half_width,
            seed,
        },
    ))
}

pub fn sample(distribution: Distribution, n: usize, d: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    match distribution {
        Distribution::Gaussian => sample_gaussian(n, d, sigma, seed),
        Distribution::Uniform => sample_uniform(n, d, sigma, seed),
    }
}

/// Labels every sample with the teacher output.
pub fn label_with(teacher: &Network, data: &Dataset) -> Result<Dataset> {
    check_dim("label_with input", teacher.input_dim(), data.dim())?;
    let labels = teacher.forward_batch(&data.inputs)?.into_output();
    Ok(Dataset {
        labels: Some(labels),
        ..data.clone()
    })
}

/// `w̃^T x + b` for every sample, summed in coordinate order.
pub fn projections(data: &Dataset, w: ArrayView1<f64>) -> Result<Array1<f64>> {
    check_dim("band weight", data.dim() + 1, w.len())?;
    let d = data.dim();
    let bias = w[d];
    Ok(data
        .inputs
        .rows()
        .into_iter()
        .map(|x| x.iter().zip(w.iter()).fold(0.0, |acc, (a, b)| acc + b * a) + bias)
        .collect())
}

/// Number of samples in the hyperplane band `|w^T [x; 1]| <= eps`.
pub fn band_count(data: &Dataset, w: ArrayView1<f64>, eps: f64) -> Result<usize> {
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::InvalidArgument(format!("band width must be >= 0, got {eps}")));
    }
    Ok(projections(data, w)?.iter().filter(|p| p.abs() <= eps).count())
}

pub fn band_members(data: &Dataset, w: ArrayView1<f64>, eps: f64) -> Result<Vec<usize>> {
    Ok(projections(data, w)?
        .iter()
        .enumerate()
        .filter(|(_, p)| p.abs() <= eps)
        .map(|(i, _)| i)
        .collect())
}

/// A probe hyperplane and the band width at which it attained a maximum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Probe {
    pub w: Vec<f64>,
    pub eps: f64,
}

/// Empirical dataset-geometry constants. Finite probing only yields lower
/// bounds on the true constants, which quantify over all regular weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandStats {
    pub eps_grid: Vec<f64>,
    pub num_probes: usize,
    pub eta: f64,
    pub eta_probe: Probe,
    /// Band counts of the maximizing η probe at every grid width.
    pub eta_counts: Vec<usize>,
    pub mu: f64,
    pub mu_probe: Probe,
    /// Empirical second moment `mean((w̃^T x)^2)` of the maximizing μ probe.
    pub mu_probe_second_moment: f64,
    /// Set when the best band at the narrowest width holds more than half
    /// of the data, i.e. the data concentrate on a hyperplane.
    pub concentrated: bool,
}

pub const DEFAULT_EPS_GRID: [f64; 4] = [0.02, 0.05, 0.1, 0.2];
pub const DEFAULT_NUM_PROBES: usize = 1000;

pub fn random_unit(d: usize, rng: &mut impl Rng) -> Array1<f64> {
    loop {
        let v = Array1::from_shape_simple_fn(d, || rng.sample::<f64, _>(StandardNormal));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Regular hyperplanes used for the η estimate: random directions passing
/// through random samples, plus the least-variance direction through the
/// centroid.
pub fn eta_probe_family(data: &Dataset, num_probes: usize, seed: u64) -> Result<Vec<Array1<f64>>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = data.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::with_capacity(num_probes + 1);
    for _ in 0..num_probes {
        let dir = random_unit(d, &mut rng);
        let anchor = data.sample(rng.random_range(0..data.len()));
        let mut w = Array1::zeros(d + 1);
        w.slice_mut(ndarray::s![..d]).assign(&dir);
        w[d] = -dir.dot(&anchor);
        probes.push(w);
    }
    let mean = data.inputs.mean_axis(Axis(0)).expect("nonempty");
    let centered = &data.inputs - &mean;
    let cov = centered.t().dot(&centered) / data.len() as f64;
    let m = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let eig = SymmetricEigen::new(m);
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, &v)| if v < best.1 { (i, v) } else { best });
    let dir = Array1::from_shape_fn(d, |i| eig.eigenvectors[(i, imin)]);
    let norm = dir.dot(&dir).sqrt();
    let dir = dir / norm;
    let mut w = Array1::zeros(d + 1);
    w.slice_mut(ndarray::s![..d]).assign(&dir);
    w[d] = -dir.dot(&mean);
    probes.push(w);
    Ok(probes)
}

/// Estimates η and μ over random regular probes and a grid of band widths.
pub fn estimate_eta_mu(data: &Dataset, num_probes: usize, eps_grid: &[f64], seed: u64) -> Result<BandStats> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if num_probes < 100 {
        return Err(Error::InvalidArgument(format!("need at least 100 probes, got {num_probes}")));
    }
    if eps_grid.is_empty() || eps_grid.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::InvalidArgument("band widths must be positive".into()));
    }
    let first = data.sample(0);
    if data.inputs.rows().into_iter().all(|r| r == first) {
        return Err(Error::DegenerateData);
    }
    let n = data.len() as f64;
    let d = data.dim();
    let eps_min = eps_grid.iter().copied().fold(f64::INFINITY, f64::min);

    let mut eta = f64::NEG_INFINITY;
    let mut eta_probe = Probe { w: vec![], eps: 0.0 };
    let mut eta_counts = vec![];
    let mut widest_min_band = 0usize;
    for w in eta_probe_family(data, num_probes, seed)? {
        let p = projections(data, w.view())?;
        let counts: Vec<usize> = eps_grid
            .iter()
            .map(|&e| p.iter().filter(|v| v.abs() <= e).count())
            .collect();
        for (&e, &cnt) in eps_grid.iter().zip(&counts) {
            if e == eps_min {
                widest_min_band = widest_min_band.max(cnt);
            }
            let cand = (cnt as f64 - (d + 1) as f64) / (e * n);
            if cand > eta {
                eta = cand;
                eta_probe = Probe { w: w.to_vec(), eps: e };
                eta_counts = counts.clone();
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut mu = f64::NEG_INFINITY;
    let mut mu_probe = Probe { w: vec![], eps: 0.0 };
    let mut mu_moment = 0.0;
    for _ in 0..num_probes {
        let dir = random_unit(d, &mut rng);
        let q: Vec<f64> = data
            .inputs
            .rows()
            .into_iter()
            .map(|x| x.iter().zip(dir.iter()).fold(0.0, |acc, (a, b)| acc + a * b))
            .collect();
        for &e in eps_grid {
            let cnt = q.iter().filter(|v| v.abs() >= 1.0 / e).count();
            let cand = cnt as f64 / (e * e * n);
            if cand > mu {
                mu = cand;
                let mut w = dir.to_vec();
                w.push(0.0);
                mu_probe = Probe { w, eps: e };
                mu_moment = q.iter().map(|v| v * v).sum::<f64>() / n;
            }
        }
    }

    Ok(BandStats {
        eps_grid: eps_grid.to_vec(),
        num_probes,
        eta: eta.max(0.0),
        eta_probe,
        eta_counts,
        mu: mu.max(0.0),
        mu_probe,
        mu_probe_second_moment: mu_moment,
        concentrated: widest_min_band * 2 > data.len(),
    })
}

/// Shift `2 eps / (c K^{3/2})` shared by both augmentations.
pub fn augmentation_shift(eps: f64, c: f64, k: usize) -> f64 {
    2.0 * eps / (c * (k as f64).powf(1.5))
}

fn check_aug_args(eps: f64, c: f64, k: usize) -> Result<()> {
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!("augmentation constant c must be > 0, got {c}")));
    }
    if k < 2 {
        return Err(Error::InvalidArgument(format!("K must be >= 2, got {k}")));
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be >= 0, got {eps}")));
    }
    Ok(())
}

/// Teacher-agnostic augmentation: every sample is shifted by `±shift` along
/// each axis. The originals come first, in order. Labels are dropped.
pub fn augment_agnostic(data: &Dataset, eps: f64, c: f64, k: usize, max_samples: usize) -> Result<Dataset> {
    check_aug_args(eps, c, k)?;
    let n = data.len();
    let d = data.dim();
    let total = (2 * d + 1)
        .checked_mul(n)
        .ok_or(Error::Budget { requested: usize::MAX, budget: max_samples })?;
    if total > max_samples {
        return Err(Error::Budget {
            requested: total,
            budget: max_samples,
        });
    }
    let shift = augmentation_shift(eps, c, k);
    let mut inputs = Array2::zeros((total, d));
    inputs.slice_mut(ndarray::s![..n, ..]).assign(&data.inputs);
    let mut provenance = data.provenance.clone();
    provenance.reserve(total - n);
    let mut row = n;
    for i in 0..n {
        for u in 0..d {
            for sign in [1i8, -1] {
                let mut r = inputs.row_mut(row);
                r.assign(&data.inputs.row(i));
                r[u] += f64::from(sign) * shift;
                provenance.push(Provenance::AugAgnostic { parent: i, axis: u, sign });
                row += 1;
            }
        }
    }
    Ok(Dataset {
        inputs,
        labels: None,
        provenance,
        meta: data.meta,
    })
}

/// Teacher-aware augmentation: samples inside the `eps` band of a first-layer
/// teacher node are shifted by `±shift` along that node's unit normal.
/// Labels are recomputed with the teacher.
pub fn augment_aware(data: &Dataset, teacher: &Network, eps: f64, c: f64, k: usize) -> Result<Dataset> {
    check_aug_args(eps, c, k)?;
    check_dim("augment_aware input", teacher.input_dim(), data.dim())?;
    let w1 = teacher.weight(1);
    let d = data.dim();
    for (j, col) in w1.columns().into_iter().enumerate() {
        let norm = col.slice(ndarray::s![..d]).dot(&col.slice(ndarray::s![..d])).sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "teacher node {j} is not regular (|w| = {norm})"
            )));
        }
    }
    let shift = augmentation_shift(eps, c, k);
    let mut rows: Vec<Array1<f64>> = Vec::new();
    let mut provenance = data.provenance.clone();
    for (j, col) in w1.columns().into_iter().enumerate() {
        let dir = col.slice(ndarray::s![..d]);
        for i in band_members(data, col, eps)? {
            for sign in [1i8, -1] {
                let x = &data.inputs.row(i) + &(&dir * (f64::from(sign) * shift));
                rows.push(x);
                provenance.push(Provenance::AugAware {
                    parent: i,
                    teacher_node: j,
                    sign,
                });
            }
        }
    }
    let n = data.len();
    let mut inputs = Array2::zeros((n + rows.len(), d));
    inputs.slice_mut(ndarray::s![..n, ..]).assign(&data.inputs);
    for (r, x) in rows.iter().enumerate() {
        inputs.row_mut(n + r).assign(x);
    }
    let aug = Dataset {
        inputs,
        labels: None,
        provenance,
        meta: data.meta,
    };
    label_with(teacher, &aug)
}
