//! Datasets: two-moons, multimodal views of a base set, the Gaussian-noise
//! protocol, and row-aligned CSV feature files.

use std::path::Path;

use mnp_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{MnpError, Result};

/// Number of noise levels in the robustness protocol.
pub const NOISE_LEVELS: usize = 10;

/// `M` feature matrices sharing `N` rows, plus integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalBatch {
    features: Vec<Tensor>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl MultimodalBatch {
    pub fn new(features: Vec<Tensor>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.is_empty() {
            return Err(MnpError::Contract("batch needs at least one modality".into()));
        }
        for (m, f) in features.iter().enumerate() {
            if !f.is_matrix() || f.rows() != labels.len() {
                return Err(MnpError::Contract(format!(
                    "modality {m} has shape {:?} for {} labels",
                    f.shape(),
                    labels.len()
                )));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(MnpError::Contract(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    /// Builds a batch from one-hot label rows.
    pub fn from_one_hot(features: Vec<Tensor>, one_hot: &Tensor) -> Result<Self> {
        let mut labels = Vec::with_capacity(one_hot.rows());
        for i in 0..one_hot.rows() {
            let row = one_hot.row_slice(i);
            let ones: Vec<usize> = (0..row.len()).filter(|&c| row[c] == 1.0).collect();
            if ones.len() != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(MnpError::Contract(format!("label row {i} is not one-hot")));
            }
            labels.push(ones[0]);
        }
        Self::new(features, labels, one_hot.cols())
    }

    pub fn features(&self) -> &[Tensor] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_modalities(&self) -> usize {
        self.features.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature dimension of each modality.
    pub fn dims(&self) -> Vec<usize> {
        self.features.iter().map(Tensor::cols).collect()
    }

    pub fn one_hot(&self) -> Tensor {
        one_hot(&self.labels, self.num_classes)
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.iter().map(|f| f.select_rows(idx)).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Same labels, different features.
    pub fn with_features(&self, features: Vec<Tensor>) -> Result<Self> {
        Self::new(features, self.labels.clone(), self.num_classes)
    }
}

pub fn one_hot(labels: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, &y) in labels.iter().enumerate() {
        t.set(i, y, 1.0);
    }
    t
}

/// Two interleaving half circles. The upper arc is class 0, the lower arc class 1.
///
/// The upper arc gets `n / 2` points (rounded down), the lower the rest; rows
/// are shuffled. Noise is zero-mean Gaussian with standard deviation `noise_std`.
pub fn make_moons(n: usize, noise_std: f64, seed: u64) -> Result<MultimodalBatch> {
    if n < 2 {
        return Err(MnpError::Contract("make_moons needs n >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_upper = n / 2;
    let n_lower = n - n_upper;
    let arc = |count: usize, i: usize| {
        if count == 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (count - 1) as f64
        }
    };
    let mut points = Vec::with_capacity(n);
    for i in 0..n_upper {
        let t = arc(n_upper, i);
        points.push(([t.cos(), t.sin()], 0));
    }
    for i in 0..n_lower {
        let t = arc(n_lower, i);
        points.push(([1.0 - t.cos(), 0.5 - t.sin()], 1));
    }
    points.shuffle(&mut rng);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for (p, y) in points {
        for v in p {
            let eps: f64 = if noise_std > 0.0 { rng.sample::<f64, _>(StandardNormal) * noise_std } else { 0.0 };
            data.push(v + eps);
        }
        labels.push(y);
    }
    MultimodalBatch::new(vec![Tensor::matrix(n, 2, data)?], labels, 2)
}

/// Axis-aligned rectangle `[x_min, x_max] x [y_min, y_max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    /// Bounding box of the rows of an `N x 2` matrix, padded by `pad` on each side.
    pub fn of_points(points: &Tensor, pad: f64) -> Self {
        let mut b = Bounds {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_min: f64::INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for i in 0..points.rows() {
            let (x, y) = (points.get(i, 0), points.get(i, 1));
            b.x_min = b.x_min.min(x);
            b.x_max = b.x_max.max(x);
            b.y_min = b.y_min.min(y);
            b.y_max = b.y_max.max(y);
        }
        Bounds {
            x_min: b.x_min - pad,
            x_max: b.x_max + pad,
            y_min: b.y_min - pad,
            y_max: b.y_max + pad,
        }
    }
}

/// `nx * ny` grid points, `y` outer and `x` inner, as an `(nx * ny) x 2` matrix.
pub fn mesh_grid(nx: usize, ny: usize, bounds: Bounds) -> Result<Tensor> {
    if nx < 2 || ny < 2 {
        return Err(MnpError::Contract("mesh grid needs at least 2 points per axis".into()));
    }
    let dx = (bounds.x_max - bounds.x_min) / (nx - 1) as f64;
    let dy = (bounds.y_max - bounds.y_min) / (ny - 1) as f64;
    let mut data = Vec::with_capacity(nx * ny * 2);
    for iy in 0..ny {
        for ix in 0..nx {
            data.push(bounds.x_min + ix as f64 * dx);
            data.push(bounds.y_min + iy as f64 * dy);
        }
    }
    Ok(Tensor::matrix(nx * ny, 2, data)?)
}

/// Standard deviation of the views' additive noise.
pub const VIEW_NOISE_STD: f64 = 0.05;

/// Random well-conditioned `d x d` map: an orthogonal matrix with per-axis
/// scales drawn from `[0.5, 2]`.
pub fn random_view_map(d: usize, rng: &mut impl Rng) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let scales: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
    let mut t = Tensor::zeros(&[d, d]);
    for (j, c) in cols.iter().enumerate() {
        for i in 0..d {
            t.set(i, j, c[i] * scales[j]);
        }
    }
    t
}

/// Applies `x -> x * map + noise` to the single modality of `base` once per map.
pub fn views_with_maps(base: &MultimodalBatch, maps: &[Tensor], noise_std: f64, seed: u64) -> Result<MultimodalBatch> {
    if base.num_modalities() != 1 {
        return Err(MnpError::Contract("views are built from a single-modality base".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = &base.features()[0];
    let mut views = Vec::with_capacity(maps.len());
    for map in maps {
        let mut v = x.matmul(map)?;
        if noise_std > 0.0 {
            let normal = Normal::new(0.0, noise_std).map_err(|e| MnpError::Contract(e.to_string()))?;
            v.data_mut().iter_mut().for_each(|e| *e += normal.sample(&mut rng));
        }
        views.push(v);
    }
    base.with_features(views)
}

/// `M` views of a single-modality base: fixed random linear maps plus N(0, 0.05^2) noise.
pub fn make_multimodal_views(base: &MultimodalBatch, m: usize, seed: u64) -> Result<MultimodalBatch> {
    if m < 2 {
        return Err(MnpError::Contract("multimodal views need M >= 2".into()));
    }
    let maps = view_maps(base.dims()[0], m, seed);
    views_with_maps(base, &maps, VIEW_NOISE_STD, seed.wrapping_add(1))
}

/// The maps [`make_multimodal_views`] uses for a given seed, so train and test
/// sets can share them.
pub fn view_maps(d: usize, m: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m).map(|_| random_view_map(d, &mut rng)).collect()
}

/// `logspace(-2, 1, 10)`.
pub fn noise_levels() -> [f64; NOISE_LEVELS] {
    let mut out = [0.0; NOISE_LEVELS];
    for (i, o) in out.iter_mut().enumerate() {
        *o = 10f64.powf(-2.0 + 3.0 * i as f64 / (NOISE_LEVELS - 1) as f64);
    }
    out
}

/// All `ceil(M / 2)`-element subsets of `0..M`, in lexicographic order.
pub fn noise_subsets(m: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, m: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for i in start..=m - left {
            cur.push(i);
            rec(i + 1, m, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if m > 0 {
        rec(0, m, m.div_ceil(2), &mut Vec::new(), &mut out);
    }
    out
}

/// Gaussian noise at one protocol level applied to a subset of modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    pub level: usize,
    pub modalities: Vec<usize>,
}

impl NoiseSpec {
    pub fn std(&self) -> f64 {
        noise_levels()[self.level]
    }
}

/// Returns a perturbed copy; untouched modalities are copied verbatim.
pub fn inject_noise(batch: &MultimodalBatch, spec: &NoiseSpec, seed: u64) -> Result<MultimodalBatch> {
    if spec.level >= NOISE_LEVELS {
        return Err(MnpError::Contract(format!("noise level {} out of range", spec.level)));
    }
    if let Some(&m) = spec.modalities.iter().find(|&&m| m >= batch.num_modalities()) {
        return Err(MnpError::Contract(format!("modality {m} out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, spec.std()).expect("positive std");
    let mut features = batch.features().to_vec();
    for &m in &spec.modalities {
        features[m].data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    batch.with_features(features)
}

fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| MnpError::Ingestion(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| MnpError::Ingestion(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| MnpError::Ingestion(format!("{} row {}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

/// One headerless numeric CSV as a matrix.
pub fn load_matrix(path: &Path) -> Result<Tensor> {
    let rows = read_matrix(path)?;
    Tensor::from_rows(&rows).map_err(|e| MnpError::Ingestion(format!("{}: {e}", path.display())))
}

/// Standardises columns with statistics fitted on `fit`; zero-variance columns
/// are only centred.
pub fn standardise(fit: &Tensor, apply: &[&Tensor]) -> Vec<Tensor> {
    let (n, d) = (fit.rows(), fit.cols());
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += fit.get(i, j);
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    for i in 0..n {
        for j in 0..d {
            sd[j] += (fit.get(i, j) - mean[j]).powi(2);
        }
    }
    sd.iter_mut().for_each(|v| {
        *v = (*v / n as f64).sqrt();
        if *v < 1e-12 {
            *v = 1.0;
        }
    });
    apply
        .iter()
        .map(|t| {
            let mut out = (*t).clone();
            for i in 0..out.rows() {
                for (j, v) in out.row_slice_mut(i).iter_mut().enumerate() {
                    *v = (*v - mean[j]) / sd[j];
                }
            }
            out
        })
        .collect()
}

/// Stratified split: within each class, `round(n_k * ratio)` shuffled rows go
/// to the first part. Both parts are returned shuffled.
pub fn stratified_split(labels: &[usize], num_classes: usize, ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let cut = (idx.len() as f64 * ratio).round() as usize;
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    (train, test)
}

/// Reads the files and splits them without standardising.
fn raw_split(
    modality_paths: &[impl AsRef<Path>],
    labels_path: &Path,
    split_ratio: f64,
    seed: u64,
) -> Result<(MultimodalBatch, MultimodalBatch)> {
    if modality_paths.is_empty() {
        return Err(MnpError::Ingestion("no modality files given".into()));
    }
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(MnpError::Config(format!("split ratio {split_ratio} outside (0, 1)")));
    }
    let raw_labels = read_matrix(labels_path)?;
    let mut labels = Vec::with_capacity(raw_labels.len());
    for (i, row) in raw_labels.iter().enumerate() {
        let v = *row.first().ok_or_else(|| MnpError::Ingestion(format!("{} row {} is empty", labels_path.display(), i + 1)))?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(MnpError::Ingestion(format!(
                "{} row {}: label {v} is not a non-negative integer",
                labels_path.display(),
                i + 1
            )));
        }
        labels.push(v as usize);
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);

    let mut features = Vec::with_capacity(modality_paths.len());
    for p in modality_paths {
        let p = p.as_ref();
        let rows = read_matrix(p)?;
        if rows.len() != labels.len() {
            return Err(MnpError::Ingestion(format!(
                "{} has {} rows but {} has {}",
                p.display(),
                rows.len(),
                labels_path.display(),
                labels.len()
            )));
        }
        features.push(Tensor::from_rows(&rows).map_err(|e| MnpError::Ingestion(format!("{}: {e}", p.display())))?);
    }
    let all = MultimodalBatch::new(features, labels, num_classes)?;
    let (train_idx, test_idx) = stratified_split(all.labels(), num_classes, split_ratio, seed);
    Ok((all.select(&train_idx), all.select(&test_idx)))
}

/// Loads one headerless CSV per modality plus a labels CSV of integers,
/// splits stratified at `split_ratio`, and standardises with train statistics.
pub fn load_feature_dataset(
    modality_paths: &[impl AsRef<Path>],
    labels_path: impl AsRef<Path>,
    split_ratio: f64,
    seed: u64,
) -> Result<(MultimodalBatch, MultimodalBatch)> {
    let (train, test) = raw_split(modality_paths, labels_path.as_ref(), split_ratio, seed)?;
    let mut train_f = Vec::new();
    let mut test_f = Vec::new();
    for m in 0..train.num_modalities() {
        let mut s = standardise(&train.features()[m], &[&train.features()[m], &test.features()[m]]).into_iter();
        train_f.push(s.next().expect("train"));
        test_f.push(s.next().expect("test"));
    }
    Ok((train.with_features(train_f)?, test.with_features(test_f)?))
}

/// Loads out-of-distribution feature files for a model trained on
/// [`load_feature_dataset`] with the same arguments, standardised with the
/// same training statistics. Widths must match the in-distribution files.
pub fn load_ood_features(
    modality_paths: &[impl AsRef<Path>],
    labels_path: impl AsRef<Path>,
    split_ratio: f64,
    seed: u64,
    ood_paths: &[impl AsRef<Path>],
) -> Result<Vec<Tensor>> {
    if ood_paths.len() != modality_paths.len() {
        return Err(MnpError::Ingestion(format!(
            "{} OOD files for {} modalities",
            ood_paths.len(),
            modality_paths.len()
        )));
    }
    let (train_raw, _) = raw_split(modality_paths, labels_path.as_ref(), split_ratio, seed)?;
    let mut out = Vec::with_capacity(ood_paths.len());
    for (m, p) in ood_paths.iter().enumerate() {
        let p = p.as_ref();
        let rows = read_matrix(p)?;
        let t = Tensor::from_rows(&rows).map_err(|e| MnpError::Ingestion(format!("{}: {e}", p.display())))?;
        let want = train_raw.features()[m].cols();
        if t.cols() != want {
            return Err(MnpError::Ingestion(format!(
                "{} has {} columns, modality {m} has {want}",
                p.display(),
                t.cols()
            )));
        }
        out.extend(standardise(&train_raw.features()[m], &[&t]));
    }
    Ok(out)
}

/// Writes `<prefix>_m<i>.csv` per modality and `<prefix>_labels.csv`.
pub fn write_feature_dataset(batch: &MultimodalBatch, dir: &Path, prefix: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (m, f) in batch.features().iter().enumerate() {
        let mut w = csv::Writer::from_path(dir.join(format!("{prefix}_m{m}.csv")))
            .map_err(|e| MnpError::Ingestion(e.to_string()))?;
        for i in 0..f.rows() {
            w.write_record(f.row_slice(i).iter().map(|v| format!("{v:e}")))
                .map_err(|e| MnpError::Ingestion(e.to_string()))?;
        }
        w.flush()?;
    }
    let mut w = csv::Writer::from_path(dir.join(format!("{prefix}_labels.csv"))).map_err(|e| MnpError::Ingestion(e.to_string()))?;
    for y in batch.labels() {
        w.write_record([y.to_string()]).map_err(|e| MnpError::Ingestion(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
