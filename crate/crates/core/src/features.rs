//! Feature vectors: storage, persistence, synthetic generators and
//! preprocessing (ℓ2 normalization, PCA whitening).
//!
//! Values are kept as `f32`, matching the on-disk format; every reduction
//! (norms, dot products, covariances) accumulates in `f64`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embeddings::Embeddings;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"MOM1";

/// Norm tolerance accepted for a row to count as unit length.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Rows closer than this to unit norm are already as normalized as `f32`
/// storage allows and are left untouched, which keeps normalization idempotent.
const F32_UNIT_SLACK: f64 = 4.0 * f32::EPSILON as f64;

/// An `n × d` matrix of item features. Item ids are the row indices `0..n`.
///
/// Labels are carried for evaluation and ablations only; graph construction,
/// mining and training never read them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    n: usize,
    dim: usize,
    data: Vec<f32>,
    labels: Option<Vec<i64>>,
    normalized: bool,
}

impl FeatureSet {
    pub fn new(n: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if n == 0 || dim == 0 {
            return Err(Error::InvalidParameter(format!(
                "feature set needs n > 0 and d > 0 (n={n} d={dim})"
            )));
        }
        if data.len() != n * dim {
            return Err(Error::DimMismatch {
                expected: n * dim,
                found: data.len(),
            });
        }
        Ok(Self {
            n,
            dim,
            data,
            labels: None,
            normalized: false,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn with_labels(mut self, labels: Vec<i64>) -> Result<Self> {
        if labels.len() != self.n {
            return Err(Error::DimMismatch {
                expected: self.n,
                found: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn dot(&self, i: usize, j: usize) -> f64 {
        self.row(i)
            .iter()
            .zip(self.row(j))
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    pub fn row_norm(&self, i: usize) -> f64 {
        self.row(i)
            .iter()
            .map(|&a| a as f64 * a as f64)
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_embeddings(&self) -> Embeddings {
        Embeddings::new(self.dim, self.data.iter().map(|&v| v as f64).collect())
    }

    /// Build a feature set from f64 rows, rounding to f32 storage.
    pub fn from_embeddings(emb: &Embeddings) -> Result<Self> {
        let data = emb.as_slice().iter().map(|&v| v as f32).collect();
        let mut fs = Self::new(emb.len(), emb.dim(), data)?;
        fs.normalized = fs.all_rows_unit();
        Ok(fs)
    }

    fn all_rows_unit(&self) -> bool {
        (0..self.n).all(|i| (self.row_norm(i) - 1.0).abs() <= UNIT_NORM_TOL)
    }
}

/// Divide every row by its Euclidean norm.
pub fn l2_normalize(features: &FeatureSet) -> Result<FeatureSet> {
    let mut data = features.data.clone();
    for i in 0..features.n {
        let norm = features.row_norm(i);
        if norm < 1e-12 {
            return Err(Error::ZeroVector(i));
        }
        if (norm - 1.0).abs() <= F32_UNIT_SLACK {
            continue;
        }
        for v in &mut data[i * features.dim..(i + 1) * features.dim] {
            *v = (*v as f64 / norm) as f32;
        }
    }
    Ok(FeatureSet {
        data,
        normalized: true,
        ..features.clone()
    })
}

/// Centering plus projection onto the leading principal axes, each scaled by
/// `1 / sqrt(eigenvalue + epsilon)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteningTransform {
    pub mean: Vec<f64>,
    /// `d × retained_dims`, row-major.
    pub projection: Vec<f64>,
    pub input_dim: usize,
    pub retained_dims: usize,
    /// Eigenvalues of the retained axes, descending.
    pub eigenvalues: Vec<f64>,
}

pub fn pca_whiten_fit(
    features: &FeatureSet,
    retained_dims: usize,
    epsilon: f64,
) -> Result<WhiteningTransform> {
    let (n, d) = (features.n, features.dim);
    if n < 2 {
        return Err(Error::InvalidParameter(
            "PCA whitening needs at least two items".into(),
        ));
    }
    if retained_dims == 0 || retained_dims > d.min(n - 1) {
        return Err(Error::InvalidParameter(format!(
            "retained_dims must be in 1..={} (got {retained_dims})",
            d.min(n - 1)
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter("epsilon must be > 0".into()));
    }

    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(features.row(i)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0; d];
    for i in 0..n {
        for ((c, &v), m) in centered.iter_mut().zip(features.row(i)).zip(&mean) {
            *c = v as f64 - m;
        }
        for a in 0..d {
            for b in a..d {
                cov[(a, b)] += centered[a] * centered[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / (n - 1) as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let found = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > epsilon)
        .count();
    if found < retained_dims {
        return Err(Error::RankDeficient {
            needed: retained_dims,
            found,
        });
    }

    let mut projection = vec![0.0; d * retained_dims];
    let mut eigenvalues = Vec::with_capacity(retained_dims);
    for (col, &axis) in order.iter().take(retained_dims).enumerate() {
        let lambda = eig.eigenvalues[axis];
        let v = eig.eigenvectors.column(axis);
        // deterministic sign: largest-magnitude component positive
        let pivot = (0..d)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        let scale = sign / (lambda + epsilon).sqrt();
        for row in 0..d {
            projection[row * retained_dims + col] = v[row] * scale;
        }
        eigenvalues.push(lambda);
    }

    Ok(WhiteningTransform {
        mean,
        projection,
        input_dim: d,
        retained_dims,
        eigenvalues,
    })
}

impl WhiteningTransform {
    /// Unit-length principal axis `c` (undoing the whitening scale).
    pub fn axis(&self, c: usize) -> Vec<f64> {
        let col: Vec<f64> = (0..self.input_dim)
            .map(|r| self.projection[r * self.retained_dims + c])
            .collect();
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        col.into_iter().map(|v| v / norm).collect()
    }

    pub fn apply(&self, features: &FeatureSet) -> Result<FeatureSet> {
        if features.dim != self.input_dim {
            return Err(Error::DimMismatch {
                expected: self.input_dim,
                found: features.dim,
            });
        }
        let k = self.retained_dims;
        let mut out = Vec::with_capacity(features.n * k);
        let mut centered = vec![0.0; self.input_dim];
        for i in 0..features.n {
            for ((c, &v), m) in centered.iter_mut().zip(features.row(i)).zip(&self.mean) {
                *c = v as f64 - m;
            }
            for col in 0..k {
                let s: f64 = centered
                    .iter()
                    .enumerate()
                    .map(|(r, c)| c * self.projection[r * k + col])
                    .sum();
                out.push(s as f32);
            }
        }
        let fs = FeatureSet::new(features.n, k, out)?;
        Ok(match &features.labels {
            Some(l) => fs.with_labels(l.clone())?,
            None => fs,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ManifoldKind {
    InterleavedMoons,
    ConcentricCircles,
    SwissRollSegments,
    GaussianClusters,
}

impl ManifoldKind {
    fn intrinsic_dim(self) -> usize {
        match self {
            ManifoldKind::SwissRollSegments => 3,
            _ => 2,
        }
    }
}

/// Parameters of a synthetic labeled manifold dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: ManifoldKind,
    /// Number of classes; interleaved moons require exactly 2.
    pub classes: usize,
    pub per_class: usize,
    /// Ambient dimension the manifold is embedded into.
    pub dim: usize,
    /// Standard deviation of isotropic Gaussian noise added in ambient space.
    pub noise: f64,
    /// Distance of the manifold from the origin along a direction orthogonal
    /// to it; keeps the data away from the origin so ℓ2 normalization does
    /// not fold it.
    pub offset: f64,
}

impl SyntheticSpec {
    pub fn new(kind: ManifoldKind, classes: usize, per_class: usize, dim: usize) -> Self {
        Self {
            kind,
            classes,
            per_class,
            dim,
            noise: 0.0,
            offset: 0.0,
        }
    }

    pub fn noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn offset(mut self, offset: f64) -> Self {
        self.offset = offset;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.per_class == 0 || self.dim == 0 {
            return Err(Error::BadSpec(format!(
                "classes, per_class and dim must be positive (got {}, {}, {})",
                self.classes, self.per_class, self.dim
            )));
        }
        if self.kind == ManifoldKind::InterleavedMoons && self.classes != 2 {
            return Err(Error::BadSpec("interleaved moons have exactly 2 classes".into()));
        }
        let needed = self.kind.intrinsic_dim() + usize::from(self.offset != 0.0);
        if self.dim < needed {
            return Err(Error::BadSpec(format!(
                "ambient dim {} too small, need at least {needed}",
                self.dim
            )));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() || !self.offset.is_finite() {
            return Err(Error::BadSpec("noise must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Random `dim × cols` matrix with orthonormal columns.
fn random_orthonormal(rng: &mut ChaCha8Rng, dim: usize, cols: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

fn intrinsic_point(spec: &SyntheticSpec, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    use std::f64::consts::PI;
    match spec.kind {
        ManifoldKind::InterleavedMoons => {
            let t = rng.random_range(0.0..PI);
            // centered on the midpoint of the two arcs
            if class == 0 {
                vec![t.cos() - 0.5, t.sin() - 0.25]
            } else {
                vec![0.5 - t.cos(), 0.25 - t.sin()]
            }
        }
        ManifoldKind::ConcentricCircles => {
            let r = (class + 1) as f64 / spec.classes as f64;
            let t = rng.random_range(0.0..2.0 * PI);
            vec![r * t.cos(), r * t.sin()]
        }
        ManifoldKind::SwissRollSegments => {
            let (lo, span) = (1.5 * PI, 3.0 * PI);
            let seg = span / spec.classes as f64;
            let t = rng.random_range(lo + seg * class as f64..lo + seg * (class + 1) as f64);
            let scale = 1.0 / (lo + span);
            let h: f64 = rng.random_range(-0.5..0.5);
            vec![t * t.cos() * scale, h, t * t.sin() * scale]
        }
        ManifoldKind::GaussianClusters => {
            // centers on a circle, adjacent centers at least 1 apart
            let angle = 2.0 * PI * class as f64 / spec.classes as f64;
            let radius = if spec.classes > 6 { 0.5 / (PI / spec.classes as f64).sin() } else { 1.0 };
            let spread = 0.25;
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            vec![radius * angle.cos() + spread * a, radius * angle.sin() + spread * b]
        }
    }
}

/// Generate a labeled synthetic manifold dataset. Pure function of `(spec, seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<FeatureSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = spec.kind.intrinsic_dim();
    // the offset direction only exists when there is an offset; validate()
    // guarantees the ambient space has room for it
    let cols = m + usize::from(spec.offset != 0.0);
    let basis = random_orthonormal(&mut rng, spec.dim, cols);
    let (span, extra) = basis.split_at(m);

    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    let mut x = vec![0.0; spec.dim];
    for class in 0..spec.classes {
        for _ in 0..spec.per_class {
            let u = intrinsic_point(spec, class, &mut rng);
            x.iter_mut().for_each(|v| *v = 0.0);
            for (coord, axis) in u.iter().zip(span) {
                x.iter_mut().zip(axis).for_each(|(v, a)| *v += coord * a);
            }
            if let Some(offset_dir) = extra.first() {
                x.iter_mut()
                    .zip(offset_dir)
                    .for_each(|(v, a)| *v += spec.offset * a);
            }
            for v in x.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *v += spec.noise * e;
            }
            data.extend(x.iter().map(|&v| v as f32));
            labels.push(class as i64);
        }
    }
    FeatureSet::new(n, spec.dim, data)?.with_labels(labels)
}

/// Sidecar path holding the labels of a feature file.
pub fn labels_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".labels");
    PathBuf::from(s)
}

pub fn encode_features(features: &FeatureSet) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + features.data.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(features.n as u32).to_le_bytes());
    buf.extend_from_slice(&(features.dim as u32).to_le_bytes());
    for v in &features.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSet> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedFile {
            expected: 12,
            found: bytes.len() as u64,
        });
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::BadMagic { expected: "MOM1" });
    }
    if bytes.len() < 12 {
        return Err(Error::TruncatedFile {
            expected: 12,
            found: bytes.len() as u64,
        });
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + (n as u64) * (d as u64) * 4;
    if (bytes.len() as u64) < expected {
        return Err(Error::TruncatedFile {
            expected,
            found: bytes.len() as u64,
        });
    }
    let data = bytes[12..expected as usize]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut fs = FeatureSet::new(n, d, data)?;
    fs.normalized = fs.all_rows_unit();
    Ok(fs)
}

/// Write the binary feature file and, when labels are present, the sidecar.
pub fn save_features(features: &FeatureSet, path: &Path) -> Result<()> {
    fs::write(path, encode_features(features)).map_err(|e| Error::from(e).at(path))?;
    if let Some(labels) = &features.labels {
        let lp = labels_path(path);
        let mut f = std::io::BufWriter::new(fs::File::create(&lp).map_err(|e| Error::from(e).at(&lp))?);
        for l in labels {
            writeln!(f, "{l}")?;
        }
        f.flush()?;
    }
    Ok(())
}

/// Load a feature file; labels are read from the sidecar when it exists.
pub fn load_features(path: &Path) -> Result<FeatureSet> {
    let bytes = fs::read(path).map_err(|e| Error::from(e).at(path))?;
    let fs = decode_features(&bytes).map_err(|e| e.at(path))?;
    let lp = labels_path(path);
    if lp.exists() {
        let labels = read_labels(&lp)?;
        return fs.with_labels(labels).map_err(|e| e.at(&lp));
    }
    Ok(fs)
}

pub fn read_labels(path: &Path) -> Result<Vec<i64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.trim().parse::<i64>().map_err(|e| Error::Parse {
                path: path.to_owned(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_set(n: usize, d: usize, seed: u64) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d)
            .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
            .collect();
        FeatureSet::new(n, d, data).unwrap()
    }

    #[test]
    fn normalize_three_four_five() {
        let fs = FeatureSet::from_rows(&[vec![3.0, 4.0], vec![1.0, 0.0]]).unwrap();
        let out = l2_normalize(&fs).unwrap();
        assert!((out.row(0)[0] - 0.6).abs() < 1e-7);
        assert!((out.row(0)[1] - 0.8).abs() < 1e-7);
        assert_eq!(out.row(1), &[1.0, 0.0]);
        assert!(out.is_normalized());
    }

    #[test]
    fn normalize_random_rows_are_unit() {
        let out = l2_normalize(&random_set(5, 3, 1)).unwrap();
        for i in 0..5 {
            assert!((out.row_norm(i) - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let fs = FeatureSet::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(l2_normalize(&fs), Err(Error::ZeroVector(1))));
    }

    #[test]
    fn normalize_is_idempotent() {
        let once = l2_normalize(&random_set(200, 16, 2)).unwrap();
        let twice = l2_normalize(&once).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((*a as f64 - *b as f64).abs() <= 1e-12);
        }
    }

    fn covariance(fs: &FeatureSet) -> Vec<Vec<f64>> {
        let (n, d) = (fs.len(), fs.dim());
        let mean: Vec<f64> = (0..d)
            .map(|c| (0..n).map(|i| fs.row(i)[c] as f64).sum::<f64>() / n as f64)
            .collect();
        (0..d)
            .map(|a| {
                (0..d)
                    .map(|b| {
                        (0..n)
                            .map(|i| (fs.row(i)[a] as f64 - mean[a]) * (fs.row(i)[b] as f64 - mean[b]))
                            .sum::<f64>()
                            / (n - 1) as f64
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn whitening_line_plus_noise_gives_identity_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f32>> = (0..500)
            .map(|_| {
                let t: f64 = rng.sample(StandardNormal);
                let e: f64 = rng.sample(StandardNormal);
                vec![(3.0 * t + 1.0) as f32, (1.5 * t + 0.1 * e - 2.0) as f32]
            })
            .collect();
        let fs = FeatureSet::from_rows(&rows).unwrap();
        let w = pca_whiten_fit(&fs, 2, 1e-9).unwrap();
        let cov = covariance(&w.apply(&fs).unwrap());
        for a in 0..2 {
            for b in 0..2 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((cov[a][b] - want).abs() < 1e-3, "cov[{a}][{b}] = {}", cov[a][b]);
            }
        }
    }

    #[test]
    fn whitening_isotropic_data_is_rotation() {
        // zero-mean with identity sample covariance: ±e1, ±e2 scaled so var = 1
        let s = (1.5f64).sqrt() as f32;
        let fs = FeatureSet::from_rows(&[
            vec![s, 0.0],
            vec![-s, 0.0],
            vec![0.0, s],
            vec![0.0, -s],
        ])
        .unwrap();
        let w = pca_whiten_fit(&fs, 2, 1e-12).unwrap();
        // projection columns orthonormal
        for a in 0..2 {
            for b in 0..2 {
                let p: f64 = (0..2).map(|r| w.projection[r * 2 + a] * w.projection[r * 2 + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((p - want).abs() < 1e-6);
            }
        }
        let cov = covariance(&w.apply(&fs).unwrap());
        assert!((cov[0][0] - 1.0).abs() < 1e-4 && (cov[1][1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn whitening_first_axis_of_collinear_toy_set() {
        let fs = FeatureSet::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![4.0, 0.0]]).unwrap();
        let w = pca_whiten_fit(&fs, 1, 1e-9).unwrap();
        let axis = w.axis(0);
        assert!((axis[0].abs() - 1.0).abs() < 1e-12 && axis[1].abs() < 1e-12);
        // variance of (0,2,4) with n-1 denominator is 4
        assert!((w.eigenvalues[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn whitening_rank_deficient() {
        let fs = FeatureSet::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![4.0, 0.0]]).unwrap();
        assert!(matches!(
            pca_whiten_fit(&fs, 2, 1e-9),
            Err(Error::RankDeficient { needed: 2, found: 1 })
        ));
    }

    #[test]
    fn noiseless_moons_lie_on_half_circles() {
        let spec = SyntheticSpec::new(ManifoldKind::InterleavedMoons, 2, 100, 2);
        let fs = generate_synthetic(&spec, 11).unwrap();
        assert_eq!(fs.len(), 200);
        assert!(!fs.is_normalized());
        let labels = fs.labels().unwrap();
        // recover the rotation from the class-0 arc: each arc has radius 1 around
        // its own center, and the centers are (-0.5,-0.25) and (0.5,0.25) rotated
        // by the same isometry, so the distance from a point to its center is 1.
        let centers = |class: i64| -> Vec<f64> {
            // mean of points on a half circle is center + (0, 2/π) rotated; avoid
            // that by fitting: center is equidistant from three points
            let pts: Vec<[f64; 2]> = (0..fs.len())
                .filter(|&i| labels[i] == class)
                .take(3)
                .map(|i| [fs.row(i)[0] as f64, fs.row(i)[1] as f64])
                .collect();
            circumcenter(pts[0], pts[1], pts[2]).to_vec()
        };
        for class in 0..2 {
            let c = centers(class);
            for i in (0..fs.len()).filter(|&i| labels[i] == class) {
                let dx = fs.row(i)[0] as f64 - c[0];
                let dy = fs.row(i)[1] as f64 - c[1];
                assert!(((dx * dx + dy * dy).sqrt() - 1.0).abs() < 1e-4);
            }
        }
        let (c0, c1) = (centers(0), centers(1));
        let dist = ((c0[0] - c1[0]).powi(2) + (c0[1] - c1[1]).powi(2)).sqrt();
        assert!((dist - (1.25f64).sqrt()).abs() < 1e-4);
    }

    fn circumcenter(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> [f64; 2] {
        let d = 2.0 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]));
        let sq = |p: [f64; 2]| p[0] * p[0] + p[1] * p[1];
        [
            (sq(a) * (b[1] - c[1]) + sq(b) * (c[1] - a[1]) + sq(c) * (a[1] - b[1])) / d,
            (sq(a) * (c[0] - b[0]) + sq(b) * (a[0] - c[0]) + sq(c) * (b[0] - a[0])) / d,
        ]
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec::new(ManifoldKind::SwissRollSegments, 4, 30, 10)
            .noise(0.05)
            .offset(2.0);
        let a = generate_synthetic(&spec, 5).unwrap();
        let b = generate_synthetic(&spec, 5).unwrap();
        assert_eq!(encode_features(&a), encode_features(&b));
        assert_eq!(a.labels(), b.labels());
        let c = generate_synthetic(&spec, 6).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn synthetic_rejects_bad_spec() {
        let bad = SyntheticSpec::new(ManifoldKind::GaussianClusters, 3, 0, 4);
        assert!(matches!(generate_synthetic(&bad, 0), Err(Error::BadSpec(_))));
        let bad = SyntheticSpec::new(ManifoldKind::InterleavedMoons, 3, 10, 4);
        assert!(matches!(generate_synthetic(&bad, 0), Err(Error::BadSpec(_))));
        let bad = SyntheticSpec::new(ManifoldKind::InterleavedMoons, 2, 10, 2).offset(1.0);
        assert!(matches!(generate_synthetic(&bad, 0), Err(Error::BadSpec(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let fs = random_set(4, 3, 9).with_labels(vec![0, 1, 1, 7]).unwrap();
        save_features(&fs, &path).unwrap();
        let back = load_features(&path).unwrap();
        assert_eq!(back, fs);
        assert_eq!(fs::read(&path).unwrap(), encode_features(&back));
    }

    #[test]
    fn load_rejects_bad_magic() {
        let mut bytes = encode_features(&random_set(2, 2, 1));
        bytes[0] = b'X';
        assert!(matches!(decode_features(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn load_rejects_truncated_payload() {
        let bytes = encode_features(&random_set(10, 3, 1));
        let short = &bytes[..bytes.len() - 12];
        match decode_features(short) {
            Err(Error::TruncatedFile { expected, found }) => {
                assert_eq!(expected, 12 + 10 * 3 * 4);
                assert_eq!(found, 12 + 9 * 3 * 4);
            }
            other => panic!("expected TruncatedFile, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_label_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        save_features(&random_set(3, 2, 1), &path).unwrap();
        fs::write(labels_path(&path), "0\n1\n").unwrap();
        let err = load_features(&path).unwrap_err();
        assert!(matches!(
            err,
            Error::File { ref source, .. } if matches!(**source, Error::DimMismatch { expected: 3, found: 2 })
        ));
    }
}
