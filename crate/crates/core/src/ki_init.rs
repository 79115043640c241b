//! Training-free initialization of novel classifier rows.
//!
//! Novel-class weight vectors are predicted from the pretrained embedding
//! model: instance features are aggregated into per-class mean vectors, then
//! rescaled either to unit length or adaptively, dividing by the ratio
//! between the average length of per-class aggregated base features and the
//! average length of the pretrained base classifier rows. The adaptive
//! variant keeps novel rows on the same hyper-sphere as the base rows.
//!
//! Nothing in this module performs a gradient step or holds optimizer state,
//! and degenerate (zero-length) geometry is surfaced as an error rather than
//! silently normalized.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::{ClassifierKind, DetectorParams};
use crate::error::{CoreError, Result};
use crate::synthgen::ClassId;

const NOVEL_RANDOM_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Random,
    L2norm,
    Alr,
    Imprinted,
}

impl std::fmt::Display for InitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            InitMode::Random => "random",
            InitMode::L2norm => "l2norm",
            InitMode::Alr => "alr",
            InitMode::Imprinted => "imprinted",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for InitMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(InitMode::Random),
            "l2norm" => Ok(InitMode::L2norm),
            "alr" => Ok(InitMode::Alr),
            "imprinted" => Ok(InitMode::Imprinted),
            other => Err(CoreError::Config(format!("unknown init mode {other:?}"))),
        }
    }
}

/// Per-class weight vectors ready for installation, together with the raw
/// aggregates they came from and the length ratio used.
#[derive(Debug, Clone)]
pub struct CentroidSet {
    pub mode: InitMode,
    /// The estimated length ratio; 1.0 for modes that do not use it.
    pub ratio: f64,
    pub raw_aggregates: BTreeMap<ClassId, Array1<f64>>,
    pub centroids: BTreeMap<ClassId, Array1<f64>>,
}

/// Euclidean-length statistics backing the hyper-sphere observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub feature_length_mean: f64,
    pub feature_length_std: f64,
    pub centroid_length_mean: f64,
    pub centroid_length_std: f64,
}

fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

fn group_by_class(
    features: &[(ClassId, Array1<f64>)],
) -> BTreeMap<ClassId, Vec<&Array1<f64>>> {
    let mut map: BTreeMap<ClassId, Vec<&Array1<f64>>> = BTreeMap::new();
    for (class, v) in features {
        map.entry(*class).or_default().push(v);
    }
    map
}

fn class_means(
    features: &[(ClassId, Array1<f64>)],
) -> Result<BTreeMap<ClassId, Array1<f64>>> {
    if features.is_empty() {
        return Err(CoreError::Data("empty feature list".into()));
    }
    let mut out = BTreeMap::new();
    for (class, vecs) in group_by_class(features) {
        let dim = vecs[0].len();
        let mut mean = Array1::<f64>::zeros(dim);
        for v in &vecs {
            if v.len() != dim {
                return Err(CoreError::Shape(format!(
                    "inconsistent feature dimension for class {class}"
                )));
            }
            mean += *v;
        }
        mean.mapv_inplace(|x| x / vecs.len() as f64);
        out.insert(class, mean);
    }
    Ok(out)
}

/// Class-wise arithmetic mean over all shots and augmented views. Classes
/// with fewer than `k` available shots divide by their own actual count.
pub fn aggregate_centroids(
    features: &[(ClassId, Array1<f64>)],
    k: usize,
    views: usize,
) -> Result<BTreeMap<ClassId, Array1<f64>>> {
    if features.is_empty() {
        return Err(CoreError::Data("empty feature list".into()));
    }
    if views < 1 {
        return Err(CoreError::Config("views must be >= 1".into()));
    }
    for (class, vecs) in group_by_class(features) {
        let n = vecs.len();
        if n % views != 0 {
            return Err(CoreError::Data(format!(
                "class {class} has {n} vectors, not a multiple of R={views}"
            )));
        }
        if n / views > k {
            return Err(CoreError::Data(format!(
                "class {class} has {} shots, more than K={k}",
                n / views
            )));
        }
    }
    class_means(features)
}

/// The length ratio between per-class aggregated base feature means and the
/// pretrained base classifier rows: mean-of-feature-lengths over
/// mean-of-centroid-lengths, both taken across base classes.
pub fn estimate_alr_ratio(
    base_features: &[(ClassId, Array1<f64>)],
    base_centroids: &BTreeMap<ClassId, Array1<f64>>,
) -> Result<f64> {
    if base_centroids.is_empty() {
        return Err(CoreError::Data("no base centroids given".into()));
    }
    let means = class_means(base_features)?;
    for class in base_centroids.keys() {
        if !means.contains_key(class) {
            return Err(CoreError::Data(format!(
                "base features do not cover base class {class}"
            )));
        }
    }

    let mut feature_len_sum = 0.0;
    for (class, mean) in means.iter().filter(|(c, _)| base_centroids.contains_key(c)) {
        let len = norm(mean);
        if len <= 0.0 {
            return Err(CoreError::DegenerateGeometry(format!(
                "aggregated feature mean of class {class} has zero length"
            )));
        }
        feature_len_sum += len;
    }
    let mut centroid_len_sum = 0.0;
    for (class, row) in base_centroids {
        let len = norm(row);
        if len <= 0.0 {
            return Err(CoreError::DegenerateGeometry(format!(
                "base centroid of class {class} has zero length"
            )));
        }
        centroid_len_sum += len;
    }
    let n = base_centroids.len() as f64;
    Ok((feature_len_sum / n) / (centroid_len_sum / n))
}

/// Rescale raw aggregates into installable centroids: unit length, or
/// component-wise division by the estimated ratio. Directions are identical
/// across the two modes.
pub fn make_novel_centroids(
    raw: &BTreeMap<ClassId, Array1<f64>>,
    mode: InitMode,
    ratio: f64,
) -> Result<CentroidSet> {
    let rescale_mode = match mode {
        InitMode::L2norm | InitMode::Imprinted => InitMode::L2norm,
        InitMode::Alr => {
            if !(ratio > 0.0) {
                return Err(CoreError::Config(format!(
                    "adaptive re-scaling requires a positive ratio, got {ratio}"
                )));
            }
            InitMode::Alr
        }
        InitMode::Random => {
            return Err(CoreError::Config(
                "random initialization does not derive from aggregates".into(),
            ))
        }
    };
    let mut centroids = BTreeMap::new();
    for (class, v) in raw {
        let len = norm(v);
        if len <= 0.0 {
            return Err(CoreError::DegenerateGeometry(format!(
                "aggregated vector of class {class} has zero length"
            )));
        }
        let scaled = match rescale_mode {
            InitMode::L2norm => v.mapv(|x| x / len),
            InitMode::Alr => v.mapv(|x| x / ratio),
            _ => unreachable!(),
        };
        centroids.insert(*class, scaled);
    }
    Ok(CentroidSet {
        mode,
        ratio: if mode == InitMode::Alr { ratio } else { 1.0 },
        raw_aggregates: raw.clone(),
        centroids,
    })
}

/// Random novel rows (the transfer baseline), pre-drawn so installation is
/// deterministic and uniform across modes.
pub fn random_centroids(novel_ids: &[ClassId], dim: usize, seed: u64) -> CentroidSet {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, NOVEL_RANDOM_STD).unwrap();
    let centroids = novel_ids
        .iter()
        .map(|&c| (c, Array1::from_shape_fn(dim, |_| dist.sample(&mut rng))))
        .collect();
    CentroidSet {
        mode: InitMode::Random,
        ratio: 1.0,
        raw_aggregates: BTreeMap::new(),
        centroids,
    }
}

/// Write the centroids into the extended classifier's novel rows and zero
/// the novel biases. Base rows, the background row, the regressor and the
/// embedding model are untouched. The imprinted mode additionally switches
/// the classifier to its cosine form.
pub fn install_centroids(params: &DetectorParams, set: &CentroidSet) -> Result<DetectorParams> {
    if !params.extended {
        return Err(CoreError::Config(
            "classifier must be extended with novel rows before installation".into(),
        ));
    }
    let dim = params.classifier.weight.ncols();
    let mut out = params.clone();
    for &class in params.novel_ids() {
        let v = set.centroids.get(&class).ok_or_else(|| {
            CoreError::Data(format!("centroid set has no vector for novel class {class}"))
        })?;
        if v.len() != dim {
            return Err(CoreError::Shape(format!(
                "centroid for class {class} has dimension {}, classifier expects {dim}",
                v.len()
            )));
        }
        let row = params
            .row_of_class(class)
            .expect("novel id present in extended classifier");
        out.classifier.weight.row_mut(row).assign(v);
        out.classifier.bias[row] = 0.0;
    }
    if set.mode == InitMode::Imprinted {
        out.classifier_kind = ClassifierKind::Cosine;
    }
    Ok(out)
}

/// The pretrained classifier's base rows, keyed by class id. The background
/// row is not a class centroid and is excluded.
pub fn base_rows_as_centroids(params: &DetectorParams) -> BTreeMap<ClassId, Array1<f64>> {
    params.class_ids[..params.num_base]
        .iter()
        .map(|&class| {
            let row = params.row_of_class(class).expect("base row exists");
            (class, params.classifier.weight.row(row).to_owned())
        })
        .collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Length statistics of per-class aggregated feature means and of the given
/// centroid vectors (population standard deviation).
pub fn hypersphere_stats(
    features: &[(ClassId, Array1<f64>)],
    centroids: &BTreeMap<ClassId, Array1<f64>>,
) -> Result<LengthStats> {
    if centroids.is_empty() {
        return Err(CoreError::Data("no centroids given".into()));
    }
    let means = class_means(features)?;
    let feature_lengths: Vec<f64> = means.values().map(norm).collect();
    let centroid_lengths: Vec<f64> = centroids.values().map(norm).collect();
    let (fm, fs) = mean_std(&feature_lengths);
    let (cm, cs) = mean_std(&centroid_lengths);
    Ok(LengthStats {
        feature_length_mean: fm,
        feature_length_std: fs,
        centroid_length_mean: cm,
        centroid_length_std: cs,
    })
}

/// CSV dump of unit-normalized feature vectors and centroids for external
/// projection. Header: `class_id,is_centroid,v0,...,v{d-1}`; 6 decimals.
pub fn dump_embeddings(
    features: &[(ClassId, Array1<f64>)],
    centroids: &BTreeMap<ClassId, Array1<f64>>,
    path: &Path,
) -> Result<()> {
    let dim = features
        .first()
        .map(|(_, v)| v.len())
        .or_else(|| centroids.values().next().map(|v| v.len()))
        .ok_or_else(|| CoreError::Data("nothing to dump".into()))?;

    let mut s = String::from("class_id,is_centroid");
    for i in 0..dim {
        s.push_str(&format!(",v{i}"));
    }
    s.push('\n');

    let mut write_row = |class: ClassId, is_centroid: bool, v: &Array1<f64>| -> Result<()> {
        let len = norm(v);
        if len <= 0.0 {
            return Err(CoreError::DegenerateGeometry(format!(
                "zero-length vector for class {class} in embedding dump"
            )));
        }
        s.push_str(&format!("{class},{}", u8::from(is_centroid)));
        for x in v.iter() {
            s.push_str(&format!(",{:.6}", x / len));
        }
        s.push('\n');
        Ok(())
    };

    for (class, v) in features {
        write_row(*class, false, v)?;
    }
    for (class, v) in centroids {
        write_row(*class, true, v)?;
    }
    std::fs::write(path, s).map_err(|e| CoreError::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct CentroidSetJson {
    mode: InitMode,
    ratio: f64,
    centroids: BTreeMap<String, Vec<f64>>,
}

pub fn save_centroid_set(set: &CentroidSet, path: &Path) -> Result<()> {
    let json = CentroidSetJson {
        mode: set.mode,
        ratio: set.ratio,
        centroids: set
            .centroids
            .iter()
            .map(|(c, v)| (c.to_string(), v.to_vec()))
            .collect(),
    };
    let bytes = serde_json::to_vec_pretty(&json).map_err(|e| CoreError::json(path, e))?;
    std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub fn load_centroid_set(path: &Path) -> Result<CentroidSet> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let json: CentroidSetJson =
        serde_json::from_slice(&bytes).map_err(|e| CoreError::json(path, e))?;
    let mut centroids = BTreeMap::new();
    for (key, v) in json.centroids {
        let class: ClassId = key
            .parse()
            .map_err(|_| CoreError::Data(format!("bad class id key {key:?}")))?;
        centroids.insert(class, Array1::from_vec(v));
    }
    Ok(CentroidSet {
        mode: json.mode,
        ratio: json.ratio,
        raw_aggregates: BTreeMap::new(),
        centroids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    fn v(vals: &[f64]) -> Array1<f64> {
        Array1::from_vec(vals.to_vec())
    }

    #[test]
    fn aggregate_single_vector_is_identity() {
        let raw = aggregate_centroids(&[(3, v(&[1.0, 2.0, 3.0]))], 1, 1).unwrap();
        assert_eq!(raw[&3], v(&[1.0, 2.0, 3.0]));
    }

    #[test]
    fn aggregate_two_point_mean() {
        let raw = aggregate_centroids(&[(0, v(&[1.0, 0.0])), (0, v(&[0.0, 1.0]))], 2, 1).unwrap();
        assert_eq!(raw[&0], v(&[0.5, 0.5]));
    }

    #[test]
    fn aggregate_matches_second_pass_summation() {
        let mut rng = ChaCha12Rng::seed_from_u64(20);
        let feats: Vec<(ClassId, Array1<f64>)> = (0..20)
            .map(|_| (5, Array1::from_shape_fn(8, |_| rng.gen::<f64>() - 0.5)))
            .collect();
        let raw = aggregate_centroids(&feats, 20, 1).unwrap();
        // Independent Kahan-style second pass.
        let mut acc = vec![0.0f64; 8];
        let mut comp = vec![0.0f64; 8];
        for (_, f) in &feats {
            for i in 0..8 {
                let y = f[i] - comp[i];
                let t = acc[i] + y;
                comp[i] = (t - acc[i]) - y;
                acc[i] = t;
            }
        }
        for i in 0..8 {
            assert_abs_diff_eq!(raw[&5][i], acc[i] / 20.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn aggregate_empty_is_error() {
        assert!(aggregate_centroids(&[], 1, 1).is_err());
    }

    #[test]
    fn ratio_constant_lengths() {
        // Feature means of length 4, centroids of length 2.
        let feats = vec![(0, v(&[4.0, 0.0])), (1, v(&[0.0, 4.0]))];
        let centroids: BTreeMap<ClassId, Array1<f64>> =
            [(0, v(&[2.0, 0.0])), (1, v(&[0.0, 2.0]))].into();
        let h = estimate_alr_ratio(&feats, &centroids).unwrap();
        assert_abs_diff_eq!(h, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn ratio_two_class_arithmetic() {
        // Aggregated lengths {3, 5}, centroid lengths {1, 3}: 4/2 = 2.
        let feats = vec![(0, v(&[3.0, 0.0])), (1, v(&[0.0, 5.0]))];
        let centroids: BTreeMap<ClassId, Array1<f64>> =
            [(0, v(&[1.0, 0.0])), (1, v(&[0.0, 3.0]))].into();
        assert_abs_diff_eq!(
            estimate_alr_ratio(&feats, &centroids).unwrap(),
            2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn ratio_recovers_constructed_true_value() {
        // Every class's feature length is exactly c times its centroid
        // length with c = 4.
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut feats = Vec::new();
        let mut centroids = BTreeMap::new();
        for class in 0..8usize {
            let dir = Array1::from_shape_fn(16, |_| rng.gen::<f64>() - 0.5);
            let len = dir.dot(&dir).sqrt();
            let unit = dir.mapv(|x| x / len);
            let centroid_len = 0.5 + rng.gen::<f64>();
            centroids.insert(class, unit.mapv(|x| x * centroid_len));
            feats.push((class, unit.mapv(|x| x * centroid_len * 4.0)));
        }
        let h = estimate_alr_ratio(&feats, &centroids).unwrap();
        assert_abs_diff_eq!(h, 4.0, epsilon = 1e-9);
    }

    #[test]
    fn ratio_zero_centroid_is_degenerate() {
        let feats = vec![(0, v(&[1.0, 0.0]))];
        let centroids: BTreeMap<ClassId, Array1<f64>> = [(0, v(&[0.0, 0.0]))].into();
        assert!(matches!(
            estimate_alr_ratio(&feats, &centroids),
            Err(CoreError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn l2norm_and_alr_rescaling() {
        let raw: BTreeMap<ClassId, Array1<f64>> = [(9, v(&[3.0, 4.0]))].into();
        let l2 = make_novel_centroids(&raw, InitMode::L2norm, 1.0).unwrap();
        assert_abs_diff_eq!(l2.centroids[&9][0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(l2.centroids[&9][1], 0.8, epsilon = 1e-12);

        let alr = make_novel_centroids(&raw, InitMode::Alr, 2.0).unwrap();
        assert_abs_diff_eq!(alr.centroids[&9][0], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(alr.centroids[&9][1], 2.0, epsilon = 1e-12);
        assert_eq!(alr.ratio, 2.0);
    }

    #[test]
    fn l2norm_and_alr_share_direction() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let raw: BTreeMap<ClassId, Array1<f64>> = (0..4)
            .map(|c| (c, Array1::from_shape_fn(32, |_| rng.gen::<f64>() + 0.1)))
            .collect();
        let l2 = make_novel_centroids(&raw, InitMode::L2norm, 1.0).unwrap();
        let alr = make_novel_centroids(&raw, InitMode::Alr, 3.7).unwrap();
        for c in 0..4 {
            let a = &l2.centroids[&c];
            let b = &alr.centroids[&c];
            let cos = a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt());
            assert_abs_diff_eq!(cos, 1.0, epsilon = 1e-9);
            // The ALR vector is the exact componentwise division.
            for i in 0..32 {
                assert_eq!(b[i], raw[&c][i] / 3.7);
            }
        }
    }

    #[test]
    fn zero_aggregate_names_the_class() {
        let raw: BTreeMap<ClassId, Array1<f64>> = [(7, v(&[0.0, 0.0]))].into();
        let err = make_novel_centroids(&raw, InitMode::L2norm, 1.0).unwrap_err();
        assert!(err.to_string().contains('7'));
    }

    #[test]
    fn alr_requires_positive_ratio() {
        let raw: BTreeMap<ClassId, Array1<f64>> = [(1, v(&[1.0, 0.0]))].into();
        assert!(make_novel_centroids(&raw, InitMode::Alr, 0.0).is_err());
        assert!(make_novel_centroids(&raw, InitMode::Alr, -1.0).is_err());
    }

    #[test]
    fn stats_unit_vectors() {
        let feats = vec![(0, v(&[1.0, 0.0])), (1, v(&[0.0, 1.0]))];
        let centroids: BTreeMap<ClassId, Array1<f64>> =
            [(0, v(&[1.0, 0.0])), (1, v(&[0.0, 1.0]))].into();
        let s = hypersphere_stats(&feats, &centroids).unwrap();
        assert_abs_diff_eq!(s.feature_length_mean, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.feature_length_std, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.centroid_length_mean, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn stats_two_point_population_std() {
        let feats = vec![(0, v(&[1.0, 0.0]))];
        let centroids: BTreeMap<ClassId, Array1<f64>> =
            [(0, v(&[1.0, 0.0])), (1, v(&[0.0, 3.0]))].into();
        let s = hypersphere_stats(&feats, &centroids).unwrap();
        assert_abs_diff_eq!(s.centroid_length_mean, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.centroid_length_std, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn dump_round_trip_and_normalization() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let feats: Vec<(ClassId, Array1<f64>)> = (0..10)
            .map(|i| (i % 3, Array1::from_shape_fn(5, |_| rng.gen::<f64>() + 0.2)))
            .collect();
        let centroids: BTreeMap<ClassId, Array1<f64>> =
            [(0, v(&[1.0, 2.0, 3.0, 4.0, 5.0]))].into();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        dump_embeddings(&feats, &centroids, &path).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "class_id,is_centroid,v0,v1,v2,v3,v4");
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 11);
        for row in rows {
            let fields: Vec<f64> = row.split(',').map(|f| f.parse().unwrap()).collect();
            let len: f64 = fields[2..].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((len - 1.0).abs() < 1e-6, "row length {len}");
        }
        // Parse back the first feature row and compare against the source.
        let first = text.lines().nth(1).unwrap();
        let fields: Vec<f64> = first.split(',').map(|f| f.parse().unwrap()).collect();
        let src = &feats[0].1;
        let len = src.dot(src).sqrt();
        for i in 0..5 {
            assert!((fields[2 + i] - src[i] / len).abs() < 1e-6);
        }
    }

    #[test]
    fn centroid_set_json_round_trip() {
        let raw: BTreeMap<ClassId, Array1<f64>> =
            [(3, v(&[3.0, 4.0])), (7, v(&[1.0, 1.0]))].into();
        let set = make_novel_centroids(&raw, InitMode::Alr, 2.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("centroids.json");
        save_centroid_set(&set, &path).unwrap();
        let loaded = load_centroid_set(&path).unwrap();
        assert_eq!(loaded.mode, InitMode::Alr);
        assert_eq!(loaded.ratio, 2.5);
        assert_eq!(loaded.centroids[&3], set.centroids[&3]);
    }
}
