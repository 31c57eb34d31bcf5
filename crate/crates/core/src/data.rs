//! Synthetic GCD datasets and embedding CSV files.
//!
//! Each class owns an anchor direction and a low-dimensional subspace that
//! contains it. A sample is a fixed point in its class subspace (the latent);
//! its patch tokens scatter around the latent inside the subspace and pick up
//! isotropic noise outside it. A second "view" of a sample redraws only the
//! patch scatter and the noise.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::model::SampleBatch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_classes_known: usize,
    pub n_classes_novel: usize,
    pub samples_per_class: usize,
    pub patches_per_sample: usize,
    pub input_dim: usize,
    /// Intrinsic dimension of each class subspace, anchor direction included.
    pub class_subspace_dim: usize,
    /// Standard deviation of the isotropic noise outside the class subspace.
    pub noise_sigma: f64,
    /// Spread of sample latents around the anchor, inside the subspace.
    pub latent_sigma: f64,
    /// Spread of patch tokens around their sample latent, inside the subspace.
    pub patch_sigma: f64,
    pub labeled_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes_known: 10,
            n_classes_novel: 10,
            samples_per_class: 40,
            patches_per_sample: 8,
            input_dim: 64,
            class_subspace_dim: 4,
            noise_sigma: 0.3,
            latent_sigma: 0.5,
            patch_sigma: 0.3,
            labeled_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_classes(&self) -> usize {
        self.n_classes_known + self.n_classes_novel
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_classes_known == 0 {
            return bad("n_classes_known must be at least 1".into());
        }
        if self.samples_per_class < 2 {
            return bad("samples_per_class must be at least 2".into());
        }
        if self.patches_per_sample == 0 || self.input_dim == 0 {
            return bad("patches_per_sample and input_dim must be positive".into());
        }
        if self.class_subspace_dim == 0 || self.class_subspace_dim > self.input_dim {
            return bad(format!(
                "class_subspace_dim = {} must lie in [1, input_dim = {}]",
                self.class_subspace_dim, self.input_dim
            ));
        }
        for (name, v) in [("noise_sigma", self.noise_sigma), ("latent_sigma", self.latent_sigma), ("patch_sigma", self.patch_sigma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return bad(format!("labeled_fraction must lie in (0, 1], got {}", self.labeled_fraction));
        }
        Ok(())
    }
}

/// Orthonormal frame of one class: column 0 is the anchor.
#[derive(Clone, Debug, PartialEq)]
struct ClassFrame {
    /// s×d_in, unit orthogonal rows.
    basis: Matrix<f64>,
}

impl ClassFrame {
    fn anchor(&self) -> &[f64] {
        self.basis.row(0)
    }

    /// `Σ_k c_k · basis_k`.
    fn combine(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.basis.cols()];
        for (k, &c) in coeffs.iter().enumerate() {
            out.iter_mut().zip(self.basis.row(k)).for_each(|(o, &b)| *o += c * b);
        }
        out
    }

    /// Removes the in-subspace component.
    fn project_out(&self, v: &mut [f64]) {
        for k in 0..self.basis.rows() {
            let row = self.basis.row(k);
            let c = dot(v, row);
            v.iter_mut().zip(row).for_each(|(x, &b)| *x -= c * b);
        }
    }
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Gram-Schmidt of `v` against `basis` rows; false if nothing is left.
fn orthonormalize(v: &mut [f64], basis: &[Vec<f64>]) -> bool {
    for _ in 0..2 {
        for b in basis {
            let c = dot(v, b);
            v.iter_mut().zip(b).for_each(|(x, &y)| *x -= c * y);
        }
    }
    let n = dot(v, v).sqrt();
    if n < 1e-8 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// Unit anchors, mutually orthogonal while the classes fit in `d`.
fn draw_anchors(k: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(k);
    while anchors.len() < k {
        let mut v = gaussian(d, rng);
        let ok = if anchors.len() < d {
            orthonormalize(&mut v, &anchors)
        } else {
            orthonormalize(&mut v, &[])
        };
        if ok {
            anchors.push(v);
        }
    }
    anchors
}

fn draw_frame(anchor: Vec<f64>, s: usize, rng: &mut ChaCha8Rng) -> ClassFrame {
    let d = anchor.len();
    let mut rows = vec![anchor];
    while rows.len() < s {
        let mut v = gaussian(d, rng);
        if orthonormalize(&mut v, &rows) {
            rows.push(v);
        }
    }
    ClassFrame { basis: Matrix::from_rows(&rows).expect("equal row lengths") }
}

/// Generated dataset with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    /// All samples; patches are the first view.
    pub batch: SampleBatch<f64>,
    /// Ground-truth class of every sample, for evaluation.
    pub class_of: Vec<usize>,
    pub known_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    frames: Vec<ClassFrame>,
    /// Per-sample latent coefficients in the class frame.
    latents: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.class_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_of.is_empty()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.batch.is_labeled[i]).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.batch.is_labeled[i]).collect()
    }

    /// Unit anchor direction of a class.
    pub fn anchor(&self, class: usize) -> &[f64] {
        self.frames[class].anchor()
    }

    /// Noise-free centre of a sample (anchor plus latent offset).
    pub fn sample_center(&self, i: usize) -> Vec<f64> {
        let frame = &self.frames[self.class_of[i]];
        let mut coeffs = self.latents[i].clone();
        coeffs[0] += 1.0;
        frame.combine(&coeffs)
    }

    /// Fresh patch tokens for sample `i`.
    pub fn draw_patches(&self, i: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        let cfg = &self.config;
        let frame = &self.frames[self.class_of[i]];
        let center = self.sample_center(i);
        let s = cfg.class_subspace_dim;
        let rows: Vec<Vec<f64>> = (0..cfg.patches_per_sample)
            .map(|_| {
                let jitter: Vec<f64> = gaussian(s, rng).into_iter().map(|g| g * cfg.patch_sigma).collect();
                let mut noise = gaussian(cfg.input_dim, rng);
                frame.project_out(&mut noise);
                let inside = frame.combine(&jitter);
                (0..cfg.input_dim).map(|j| center[j] + inside[j] + cfg.noise_sigma * noise[j]).collect()
            })
            .collect();
        Matrix::from_rows(&rows).expect("equal row lengths")
    }

    /// A redrawn view of the given samples.
    pub fn view(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Vec<Matrix<f64>> {
        idx.iter().map(|&i| self.draw_patches(i, rng)).collect()
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            config: self.config.clone(),
            known_classes: self.known_classes.clone(),
            novel_classes: self.novel_classes.clone(),
            labeled_indices: self.labeled_indices(),
            unlabeled_indices: self.unlabeled_indices(),
            class_of: self.class_of.clone(),
        }
    }
}

/// Deterministic dataset for a configuration.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.n_classes();
    let anchors = draw_anchors(k, cfg.input_dim, &mut rng);
    let frames: Vec<ClassFrame> = anchors.into_iter().map(|a| draw_frame(a, cfg.class_subspace_dim, &mut rng)).collect();

    let n = k * cfg.samples_per_class;
    let class_of: Vec<usize> = (0..n).map(|i| i / cfg.samples_per_class).collect();
    let latents: Vec<Vec<f64>> = (0..n)
        .map(|_| gaussian(cfg.class_subspace_dim, &mut rng).into_iter().map(|g| g * cfg.latent_sigma).collect())
        .collect();

    let mut is_labeled = vec![false; n];
    for c in 0..cfg.n_classes_known {
        let mut members: Vec<usize> = (c * cfg.samples_per_class..(c + 1) * cfg.samples_per_class).collect();
        members.shuffle(&mut rng);
        let take = ((cfg.labeled_fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        for &i in &members[..take] {
            is_labeled[i] = true;
        }
    }

    let mut data = Dataset {
        config: cfg.clone(),
        batch: SampleBatch { patches: Vec::new(), labels: Vec::new(), is_labeled, is_known_class: Vec::new() },
        class_of,
        known_classes: (0..cfg.n_classes_known).collect(),
        novel_classes: (cfg.n_classes_known..k).collect(),
        frames,
        latents,
    };
    let patches: Vec<Matrix<f64>> = (0..n).map(|i| data.draw_patches(i, &mut rng)).collect();
    data.batch.patches = patches;
    data.batch.labels = (0..n).map(|i| data.batch.is_labeled[i].then_some(data.class_of[i])).collect();
    data.batch.is_known_class = data.class_of.iter().map(|&c| c < cfg.n_classes_known).collect();
    data.batch.validate(cfg.n_classes_known)?;
    Ok(data)
}

/// Config echo, class roster and split indices of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: SynthConfig,
    pub known_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub labeled_indices: Vec<usize>,
    pub unlabeled_indices: Vec<usize>,
    pub class_of: Vec<usize>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Regenerates the dataset and checks it against the recorded splits.
    pub fn regenerate(&self) -> Result<Dataset> {
        let data = gen_synthetic(&self.config)?;
        if data.manifest() != *self {
            return Err(Error::invalid("dataset manifest does not match its regenerated dataset"));
        }
        Ok(data)
    }
}

/// Writes `dim=<D>` followed by one comma-separated row per sample, with 17
/// significant digits so the values read back exactly.
pub fn save_embeddings(z: &Matrix<f64>, path: &Path) -> Result<()> {
    let mut out = format!("dim={}\n", z.cols());
    for i in 0..z.rows() {
        let row = z.row(i);
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v:.16e}").expect("writing to a String");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<Matrix<f64>> {
    parse_embeddings(&fs::read_to_string(path)?)
}

/// Parses the embedding CSV format; errors carry 1-based line numbers.
pub fn parse_embeddings(text: &str) -> Result<Matrix<f64>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty file".into() })?;
    let dim: usize = header
        .trim()
        .strip_prefix("dim=")
        .and_then(|d| d.trim().parse().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::Parse { line: 1, msg: format!("expected header `dim=<D>`, found `{header}`") })?;
    let mut data = Vec::new();
    let mut rows = 0;
    for (ln, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim {
            return Err(Error::Parse {
                line: ln + 1,
                msg: format!("row {} has {} values, header says dim={dim}", rows + 1, fields.len()),
            });
        }
        for f in fields {
            let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                line: ln + 1,
                msg: format!("row {}: `{}` is not a number", rows + 1, f.trim()),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { line: ln + 1, msg: format!("row {}: non-finite value", rows + 1) });
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Parse { line: 2, msg: "no embedding rows".into() });
    }
    Matrix::from_vec(rows, dim, data)
}

/// One unit vector per sample: the normalized mean of its patch tokens.
pub fn mean_patch_features(patches: &[Matrix<f64>]) -> Result<Matrix<f64>> {
    let rows: Vec<Vec<f64>> = patches
        .iter()
        .map(|p| {
            let mut m = vec![0.0; p.cols()];
            for i in 0..p.rows() {
                m.iter_mut().zip(p.row(i)).for_each(|(a, &b)| *a += b / p.rows() as f64);
            }
            m
        })
        .collect();
    Matrix::from_rows(&rows)?.normalize_rows()
}
