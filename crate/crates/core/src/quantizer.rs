//! k-means codebooks over frame features and unit encoding.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::featio::FeatureMatrix;
use crate::{Error, Exec, Result};

pub const CODEBOOK_MAGIC: &[u8; 4] = b"ULMC";
pub const CODEBOOK_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `K × D` centroids.
    pub centroids: Array2<f32>,
    pub inertia: f64,
    pub rng_seed: u64,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.centroids.ncols()
    }
}

/// Discrete units of one segment (or one whole recording before segmentation).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnitSequence {
    pub units: Vec<usize>,
    pub patient_id: String,
    pub segment_index: usize,
}

impl UnitSequence {
    pub fn new(units: Vec<usize>, patient_id: impl Into<String>, segment_index: usize) -> Self {
        Self {
            units,
            patient_id: patient_id.into(),
            segment_index,
        }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

/// Options for [`kmeans_fit`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansOptions {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once the relative inertia improvement drops below this.
    pub tol: f64,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            k: 100,
            max_iters: 300,
            tol: 1e-6,
            seed: 0,
            exec: Exec::Parallel,
        }
    }
}

/// Codebook plus the inertia measured after every assignment step.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub codebook: Codebook,
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid index (lowest index on ties) and its squared distance.
fn nearest(x: ArrayView1<f64>, centroids: ArrayView2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn stack_frames(features: &[FeatureMatrix]) -> Result<Array2<f64>> {
    let d = features
        .first()
        .map(|m| m.dim())
        .ok_or_else(|| Error::Invalid("no feature matrices to cluster".into()))?;
    let total: usize = features.iter().map(|m| m.frames()).sum();
    let mut data = Array2::<f64>::zeros((total, d));
    let mut row = 0;
    for (i, m) in features.iter().enumerate() {
        if m.dim() != d {
            return Err(Error::Dimension(format!("feature matrix {i} has D={}, expected {d}", m.dim())));
        }
        for r in m.data.rows() {
            data.row_mut(row).assign(&r.mapv(f64::from));
            row += 1;
        }
    }
    Ok(data)
}

fn count_distinct(features: &[FeatureMatrix], cap: usize) -> usize {
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    for m in features {
        for r in m.data.rows() {
            seen.insert(r.iter().map(|v| v.to_bits()).collect());
            if seen.len() >= cap {
                return seen.len();
            }
        }
    }
    seen.len()
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans_fit(features: &[FeatureMatrix], opts: KMeansOptions) -> Result<KMeansFit> {
    let k = opts.k;
    if k < 2 {
        return Err(Error::Config("k must be >= 2".into()));
    }
    let data = stack_frames(features)?;
    let distinct = count_distinct(features, k);
    if distinct < k {
        return Err(Error::TooFewDistinct { distinct, k });
    }
    let n = data.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut centroids = kmeans_pp(data.view(), k, &mut rng);

    let mut history = Vec::new();
    let mut assign = vec![0usize; n];
    let mut iterations = 0;
    loop {
        let pairs = opts
            .exec
            .map_range(n, |i| nearest(data.row(i), centroids.view()));
        let mut inertia = 0.0;
        for (i, (j, d)) in pairs.iter().enumerate() {
            assign[i] = *j;
            inertia += d;
        }
        let dist: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        history.push(inertia);
        let len = history.len();
        if len >= 2 {
            let prev = history[len - 2];
            if prev - inertia <= opts.tol * prev {
                break;
            }
        }
        if iterations >= opts.max_iters || inertia == 0.0 {
            break;
        }
        iterations += 1;
        centroids = update_centroids(data.view(), &assign, &dist, k);
    }
    let codebook = Codebook {
        centroids: centroids.mapv(|v| v as f32),
        inertia: *history.last().expect("at least one assignment"),
        rng_seed: opts.seed,
    };
    Ok(KMeansFit {
        codebook,
        inertia_history: history,
        iterations,
    })
}

fn kmeans_pp(data: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = data.nrows();
    let mut centroids = Array2::<f64>::zeros((k, data.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // Never pick a point that already coincides with a centroid.
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&w| w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&data.row(pick));
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(sq_dist(data.row(i), centroids.row(c)));
        }
    }
    centroids
}

/// Means of assigned points, accumulated in point-index order. Empty clusters
/// take the points farthest from their current centroids.
fn update_centroids(data: ArrayView2<f64>, assign: &[usize], dist: &[f64], k: usize) -> Array2<f64> {
    let d = data.ncols();
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (i, &j) in assign.iter().enumerate() {
        let mut row = sums.row_mut(j);
        row += &data.row(i);
        counts[j] += 1;
    }
    let mut order: Vec<usize> = (0..assign.len()).collect();
    // Farthest first; index breaks ties.
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let mut donors = order.into_iter();
    for j in 0..k {
        if counts[j] > 0 {
            let c = counts[j] as f64;
            sums.row_mut(j).mapv_inplace(|v| v / c);
        } else if let Some(i) = donors.next() {
            sums.row_mut(j).assign(&data.row(i));
        }
    }
    sums
}

pub fn kmeans_assign(m: &FeatureMatrix, cb: &Codebook, exec: Exec) -> Result<Vec<usize>> {
    if m.dim() != cb.feature_dim() {
        return Err(Error::Dimension(format!(
            "features have D={}, codebook has D={}",
            m.dim(),
            cb.feature_dim()
        )));
    }
    let c64 = cb.centroids.mapv(f64::from);
    Ok(exec.map_range(m.frames(), |t| {
        let x = m.data.row(t).mapv(f64::from);
        nearest(x.view(), c64.view()).0
    }))
}

/// Encodes a whole recording into units.
pub fn encode(m: &FeatureMatrix, cb: &Codebook, patient_id: &str, exec: Exec) -> Result<UnitSequence> {
    Ok(UnitSequence::new(kmeans_assign(m, cb, exec)?, patient_id, 0))
}

/// Collapses runs of equal adjacent units.
pub fn dedup_units(s: &UnitSequence) -> UnitSequence {
    let mut units = s.units.clone();
    units.dedup();
    UnitSequence {
        units,
        patient_id: s.patient_id.clone(),
        segment_index: s.segment_index,
    }
}

/// `ULMC`, u32 version, u32 K, u32 D, u64 seed, f64 inertia, K·D f32 (LE).
pub fn codebook_bytes(cb: &Codebook) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 4 * cb.centroids.len());
    out.extend_from_slice(CODEBOOK_MAGIC);
    out.extend_from_slice(&CODEBOOK_VERSION.to_le_bytes());
    out.extend_from_slice(&(cb.k() as u32).to_le_bytes());
    out.extend_from_slice(&(cb.feature_dim() as u32).to_le_bytes());
    out.extend_from_slice(&cb.rng_seed.to_le_bytes());
    out.extend_from_slice(&cb.inertia.to_le_bytes());
    for v in cb.centroids.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_codebook(cb: &Codebook, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&codebook_bytes(cb)).map_err(|e| Error::io(path, e))
}

pub fn parse_codebook(bytes: &[u8]) -> Result<Codebook> {
    if bytes.len() < 4 {
        return Err(Error::Truncated);
    }
    if &bytes[..4] != CODEBOOK_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 32 {
        return Err(Error::Truncated);
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != CODEBOOK_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CODEBOOK_VERSION,
        });
    }
    let k = u32_at(8) as usize;
    let d = u32_at(12) as usize;
    let seed = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let inertia = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
    let payload = &bytes[32..];
    if payload.len() < k * d * 4 {
        return Err(Error::Truncated);
    }
    let vals: Vec<f32> = payload[..k * d * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Codebook {
        centroids: Array2::from_shape_vec((k, d), vals).map_err(|e| Error::Invalid(e.to_string()))?,
        inertia,
        rng_seed: seed,
    })
}

pub fn read_codebook(path: &Path) -> Result<Codebook> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_codebook(&bytes)
}
