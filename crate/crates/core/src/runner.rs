//! Training loop, checkpoints, evaluation and the experiment configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cluster::{cluster_accuracy, estimate_k, ss_kmeans, EvaluationReport, KEstimate, MAX_ITER};
use crate::data::{
    gen_synthetic, load_embeddings, mean_patch_features, save_embeddings, Dataset, DatasetManifest, SynthConfig,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{
    cms_loss, cms_mean_shift, gcd_loss, has_positive_pairs, mtmc_loss, simgcd_losses, BaseLoss, LossConfig,
    MtmcOptions, PrototypeBank,
};
use crate::model::{embed, encode, EncoderDims, EncoderParams, PARAM_NAMES};
use crate::spectral::spectral_report;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub loss: LossConfig,
    pub d_model: usize,
    /// Embedding dimension D.
    pub embed_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Seeds initialization, batching and view draws.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub diagnostics_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            loss: LossConfig::default(),
            d_model: 32,
            embed_dim: 32,
            epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            diagnostics_every: 10,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets both the run seed and the dataset seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.loss.validate()?;
        if self.batch_size < 4 {
            return Err(Error::Config(format!("batch_size must be at least 4, got {}", self.batch_size)));
        }
        if self.d_model == 0 || self.embed_dim == 0 {
            return Err(Error::Config("d_model and embed_dim must be positive".into()));
        }
        if self.diagnostics_every == 0 {
            return Err(Error::Config("diagnostics_every must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config("beta1, beta2 must lie in [0, 1) and adam_eps must be positive".into()));
        }
        let n = self.synth.n_classes() * self.synth.samples_per_class;
        if self.batch_size > n {
            return Err(Error::Config(format!("batch_size {} exceeds the {n} samples", self.batch_size)));
        }
        Ok(())
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims::new(self.synth.input_dim, self.d_model, self.embed_dim)
    }
}

/// One logged line of metrics.csv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_base: f64,
    pub loss_mtmc: f64,
    pub entropy: f64,
    pub effective_rank: usize,
    pub frobenius_to_identity: f64,
    pub nuclear_norm: f64,
    pub acc_all: f64,
    pub acc_old: f64,
    pub acc_new: f64,
}

pub const METRICS_HEADER: &str = "epoch,loss_total,loss_base,loss_mtmc,entropy,effective_rank,frobenius_to_identity,nuclear_norm,acc_all,acc_old,acc_new";

impl MetricsRow {
    /// Shortest round-trip decimal form of every field.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.loss_total,
            self.loss_base,
            self.loss_mtmc,
            self.entropy,
            self.effective_rank,
            self.frobenius_to_identity,
            self.nuclear_norm,
            self.acc_all,
            self.acc_old,
            self.acc_new
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 11 {
            return Err(Error::invalid(format!("metrics row has {} fields, expected 11", f.len())));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| Error::invalid(format!("bad metrics field `{}`", f[i])));
        let int = |i: usize| f[i].parse::<usize>().map_err(|_| Error::invalid(format!("bad metrics field `{}`", f[i])));
        Ok(Self {
            epoch: int(0)?,
            loss_total: num(1)?,
            loss_base: num(2)?,
            loss_mtmc: num(3)?,
            entropy: num(4)?,
            effective_rank: int(5)?,
            frobenius_to_identity: num(6)?,
            nuclear_norm: num(7)?,
            acc_all: num(8)?,
            acc_old: num(9)?,
            acc_new: num(10)?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::invalid(format!("{} does not start with the metrics header", path.display())));
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricsRow::parse).collect()
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Matrix<f64>>,
    v: Vec<Matrix<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut Matrix<f64>], grads: &[Matrix<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid("adam: parameter and gradient counts differ"));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[k].shape() != g.shape() {
                return Err(Error::shape("adam", format!("parameter {k}: {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
            let (m, v) = (self.m[k].as_mut_slice(), self.v[k].as_mut_slice());
            for (((x, &gi), mi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Learned state of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub params: EncoderParams<f64>,
    pub prototypes: Option<PrototypeBank<f64>>,
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub model: Model,
    pub dataset: Dataset,
}

/// Losses, encoder gradients and the prototype gradient of one step.
type StepOutput = (StepLosses, Vec<Matrix<f64>>, Option<Matrix<f64>>);

/// Loss values of one optimization step.
#[derive(Clone, Copy, Debug, Default)]
struct StepLosses {
    total: f64,
    base: f64,
    mtmc: f64,
}

/// Diagnostics on the full unlabeled pool: spectral statistics of its
/// embeddings and clustering accuracy over the unlabeled samples.
pub fn diagnostics(model: &Model, data: &Dataset, seed: u64) -> Result<(crate::spectral::SpectralReport, EvaluationReport)> {
    let (z_all, _) = embed(&model.params, &data.batch.patches)?;
    let unlabeled = data.unlabeled_indices();
    let report = spectral_report(&z_all.select_rows(&unlabeled)?)?;
    let eval = evaluate_embeddings(&z_all, data, data.config.n_classes(), seed)?;
    Ok((report, eval))
}

/// Semi-supervised k-means over every sample, scored on the unlabeled ones.
pub fn evaluate_embeddings(z_all: &Matrix<f64>, data: &Dataset, k: usize, seed: u64) -> Result<EvaluationReport> {
    let labeled = data.labeled_indices();
    let labels: Vec<usize> = labeled.iter().map(|&i| data.class_of[i]).collect();
    let run = ss_kmeans(z_all, &labeled, &labels, k, MAX_ITER, seed)?;
    let unlabeled = data.unlabeled_indices();
    let pred: Vec<usize> = unlabeled.iter().map(|&i| run.assignments[i]).collect();
    let truth: Vec<usize> = unlabeled.iter().map(|&i| data.class_of[i]).collect();
    let known: Vec<bool> = unlabeled.iter().map(|&i| data.batch.is_known_class[i]).collect();
    let acc = cluster_accuracy(&pred, &truth, &known)?;
    Ok(EvaluationReport { k_used: k, acc_all: acc.all, acc_old: acc.old, acc_new: acc.new, iterations: run.iterations, seed })
}

/// Splits a shuffled index list into batches of `size`; a short tail is
/// folded into the previous batch.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < size) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

fn train_step(
    cfg: &RunConfig,
    model: &Model,
    data: &Dataset,
    idx: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    let view1 = data.view(idx, rng);
    let view2 = data.view(idx, rng);
    let labels: Vec<Option<usize>> = idx.iter().map(|&i| data.batch.labels[i]).collect();
    let labeled: Vec<bool> = idx.iter().map(|&i| data.batch.is_labeled[i]).collect();

    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape);
    let protos = model.prototypes.as_ref().map(|p| tape.leaf(p.c.clone()));
    let a = encode(&mut tape, &view1, &vars)?;
    let b = encode(&mut tape, &view2, &vars)?;

    // Without a labeled positive pair the supervised term is undefined for
    // this batch; fall back to the self-supervised term alone.
    let known_labels: Vec<usize> = labels.iter().zip(&labeled).filter(|(_, &l)| l).filter_map(|(y, _)| *y).collect();
    let mut lcfg = cfg.loss.clone();
    if !has_positive_pairs(&known_labels) {
        log::debug!("batch without labeled positive pairs: supervised term skipped");
        lcfg.lambda_bal = 0.0;
    }
    let base = match cfg.loss.base {
        BaseLoss::Gcd => gcd_loss(&mut tape, a.z, b.z, &labels, &labeled, &lcfg)?,
        BaseLoss::Cms => {
            let k = cfg.loss.k_neighbors.min(idx.len());
            let shifted = cms_mean_shift(tape.value(b.z), k)?;
            let s = tape.constant(shifted);
            cms_loss(&mut tape, a.z, s, &labels, &labeled, &lcfg)?
        }
        BaseLoss::SimGcd => {
            let c = protos.expect("prototype bank present for simgcd");
            let known = model.prototypes.as_ref().map_or(0, |p| p.known);
            let cls = simgcd_losses(&mut tape, a.h, b.h, &labels, &labeled, c, known, &lcfg)?.total;
            let rep = gcd_loss(&mut tape, a.z, b.z, &labels, &labeled, &lcfg)?;
            tape.add(cls, rep)?
        }
    };

    let unlabeled_rows: Vec<usize> = (0..idx.len()).filter(|&r| !labeled[r]).collect();
    let mtmc: Option<Var> = if cfg.loss.lambda_mtmc > 0.0 && unlabeled_rows.len() >= 2 {
        let zu = tape.row_select(a.z, &unlabeled_rows)?;
        mtmc_loss(&mut tape, zu, MtmcOptions::from(&cfg.loss))?
    } else {
        None
    };
    let total = match mtmc {
        Some(m) => {
            let weighted = tape.scale(m, cfg.loss.lambda_mtmc);
            tape.add(base, weighted)?
        }
        None => base,
    };
    let losses = StepLosses {
        total: tape.scalar(total),
        base: tape.scalar(base),
        mtmc: mtmc.map_or(0.0, |m| tape.scalar(m)),
    };
    if !losses.total.is_finite() {
        return Ok((losses, Vec::new(), None));
    }
    tape.backward(total)?;
    let grads = vars.all().iter().map(|&v| tape.grad(v)).collect();
    Ok((losses, grads, protos.map(|c| tape.grad(c))))
}

fn param_norms(model: &Model) -> Vec<(String, f64)> {
    PARAM_NAMES
        .iter()
        .zip(model.params.tensors())
        .map(|(n, m)| (n.to_string(), crate::linalg::frobenius_norm(m)))
        .collect()
}

/// Runs training and writes `metrics.csv`, the dataset manifest, the config
/// echo and the final checkpoint into `out`.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let data = gen_synthetic(&cfg.synth)?;
    data.manifest().save(&out.join("manifest.json"))?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model {
        params: EncoderParams::init(cfg.dims(), &mut rng)?,
        prototypes: match cfg.loss.base {
            BaseLoss::SimGcd => Some(PrototypeBank::init(
                cfg.synth.n_classes_known,
                cfg.synth.n_classes_novel,
                cfg.d_model,
                &mut rng,
            )?),
            _ => None,
        },
    };
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut adam_protos = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);

    let metrics_path = out.join("metrics.csv");
    fs::write(&metrics_path, format!("{METRICS_HEADER}\n"))?;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = StepLosses::default();
        let plan = batches(&order, cfg.batch_size);
        for (b, idx) in plan.iter().enumerate() {
            // Matrices refuse non-finite entries, so an overflow inside the
            // forward or backward pass surfaces as a panic.
            let step = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                train_step(cfg, &model, &data, idx, &mut rng)
            }));
            let (losses, grads, proto_grad) = match step {
                Ok(r) => r?,
                Err(_) => {
                    let nan = StepLosses { total: f64::NAN, base: f64::NAN, mtmc: f64::NAN };
                    dump_divergence(out, epoch, b, &nan, &model)?;
                    return Err(Error::Diverged { epoch, detail: format!("overflow in batch {b}, see divergence.json") });
                }
            };
            if !losses.total.is_finite() || !grads.iter().all(all_finite) {
                dump_divergence(out, epoch, b, &losses, &model)?;
                return Err(Error::Diverged { epoch, detail: format!("non-finite loss in batch {b}, see divergence.json") });
            }
            adam.step(&mut model.params.tensors_mut(), &grads)?;
            if let (Some(bank), Some(g)) = (model.prototypes.as_mut(), proto_grad) {
                adam_protos.step(&mut [&mut bank.c], &[g])?;
                if all_finite(&bank.c) {
                    bank.renormalize()?;
                }
            }
            let bad_protos = model.prototypes.as_ref().is_some_and(|p| !all_finite(&p.c));
            if bad_protos || !model.params.tensors().into_iter().all(all_finite) {
                dump_divergence(out, epoch, b, &losses, &model)?;
                return Err(Error::Diverged { epoch, detail: format!("non-finite parameters after batch {b}, see divergence.json") });
            }
            sums.total += losses.total;
            sums.base += losses.base;
            sums.mtmc += losses.mtmc;
        }
        if epoch % cfg.diagnostics_every == 0 || epoch == cfg.epochs {
            let n = plan.len() as f64;
            let (spec, eval) = diagnostics(&model, &data, cfg.seed)?;
            let row = MetricsRow {
                epoch,
                loss_total: sums.total / n,
                loss_base: sums.base / n,
                loss_mtmc: sums.mtmc / n,
                entropy: spec.entropy,
                effective_rank: spec.effective_rank_99,
                frobenius_to_identity: spec.frobenius_to_identity,
                nuclear_norm: spec.nuclear_norm,
                acc_all: eval.acc_all,
                acc_old: eval.acc_old,
                acc_new: eval.acc_new,
            };
            log::info!(
                "epoch {epoch}: loss {:.4} entropy {:.4} rank {} acc all/old/new {:.3}/{:.3}/{:.3}",
                row.loss_total,
                row.entropy,
                row.effective_rank,
                row.acc_all,
                row.acc_old,
                row.acc_new
            );
            append_line(&metrics_path, &row.csv_line())?;
            history.push(row);
        }
    }
    save_checkpoint(&model, cfg, &out.join("checkpoint"))?;
    Ok(TrainOutcome { metrics: history, model, dataset: data })
}

fn all_finite(m: &Matrix<f64>) -> bool {
    m.as_slice().iter().all(|x| x.is_finite())
}

fn dump_divergence(out: &Path, epoch: usize, batch: usize, losses: &StepLosses, model: &Model) -> Result<()> {
    let dump = serde_json::json!({
        "epoch": epoch,
        "batch": batch,
        "loss_total": losses.total.to_string(),
        "loss_base": losses.base.to_string(),
        "loss_mtmc": losses.mtmc.to_string(),
        "param_norms": param_norms(model)
            .into_iter()
            .map(|(n, v)| (n, serde_json::Value::String(v.to_string())))
            .collect::<serde_json::Map<_, _>>(),
    });
    fs::write(out.join("divergence.json"), serde_json::to_string_pretty(&dump)?)?;
    Ok(())
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new().append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    dims: EncoderDims,
    tensors: Vec<String>,
    prototypes_known: Option<usize>,
    config: RunConfig,
}

/// One embedding-format CSV per tensor plus `checkpoint.json`.
pub fn save_checkpoint(model: &Model, cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, m) in PARAM_NAMES.iter().zip(model.params.tensors()) {
        save_embeddings(m, &dir.join(format!("{name}.csv")))?;
    }
    if let Some(bank) = &model.prototypes {
        save_embeddings(&bank.c, &dir.join("prototypes.csv"))?;
    }
    let meta = CheckpointMeta {
        dims: model.params.dims(),
        tensors: PARAM_NAMES.iter().map(|s| s.to_string()).collect(),
        prototypes_known: model.prototypes.as_ref().map(|p| p.known),
        config: cfg.clone(),
    };
    fs::write(dir.join("checkpoint.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, RunConfig)> {
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(dir.join("checkpoint.json"))?)?;
    if meta.tensors != PARAM_NAMES {
        return Err(Error::invalid("checkpoint lists unexpected tensors"));
    }
    let tensors = PARAM_NAMES
        .iter()
        .map(|n| load_embeddings(&dir.join(format!("{n}.csv"))))
        .collect::<Result<Vec<_>>>()?;
    let params = EncoderParams::from_tensors(tensors)?;
    if params.dims() != meta.dims {
        return Err(Error::invalid("checkpoint tensors disagree with recorded dims"));
    }
    let prototypes = match meta.prototypes_known {
        Some(known) => {
            let c = load_embeddings(&dir.join("prototypes.csv"))?;
            if known > c.rows() {
                return Err(Error::invalid("checkpoint lists more known classes than prototypes"));
            }
            // Stored rows are already unit norm; renormalizing again would
            // perturb the last bits.
            Some(PrototypeBank { c, known })
        }
        None => None,
    };
    Ok((Model { params, prototypes }, meta.config))
}

/// Loads a checkpoint and a dataset manifest and clusters every sample.
pub fn evaluate(checkpoint: &Path, manifest: &Path, k: Option<usize>, seed: u64) -> Result<EvaluationReport> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let data = DatasetManifest::load(manifest)?.regenerate()?;
    if model.params.dims().d_in != data.config.input_dim {
        return Err(Error::invalid(format!(
            "checkpoint expects input_dim {}, dataset has {}",
            model.params.dims().d_in,
            data.config.input_dim
        )));
    }
    let (z, _) = embed(&model.params, &data.batch.patches)?;
    evaluate_embeddings(&z, &data, k.unwrap_or(data.config.n_classes()), seed)
}

/// K estimation on a dataset. Features default to the normalized mean patch
/// token of each sample.
pub fn estimate_k_on(
    data: &Dataset,
    features: Option<&Matrix<f64>>,
    k_min: usize,
    k_max: usize,
    seed: u64,
) -> Result<KEstimate> {
    let owned;
    let z = match features {
        Some(z) => {
            if z.rows() != data.len() {
                return Err(Error::invalid(format!("{} embedding rows for {} samples", z.rows(), data.len())));
            }
            z
        }
        None => {
            owned = mean_patch_features(&data.batch.patches)?;
            &owned
        }
    };
    let labeled = data.labeled_indices();
    let labels: Vec<usize> = labeled.iter().map(|&i| data.class_of[i]).collect();
    estimate_k(z, &labeled, &labels, k_min, k_max, seed)
}

/// Renders a history as the metrics.csv text.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        writeln!(s, "{}", r.csv_line()).expect("writing to a String");
    }
    s
}
