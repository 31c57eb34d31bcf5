//! Training objectives: contrastive GCD losses, the parametric SimGCD losses,
//! the CMS mean-shift variant, and the token manifold capacity term.
//!
//! Every loss is built on a [`Tape`] so it is trainable and gradient-checkable.
//! Embeddings are passed as tape handles; label and split information is plain
//! data.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::scalar::Scalar;

/// Which family of base objective drives training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseLoss {
    #[default]
    Gcd,
    SimGcd,
    Cms,
}

/// Sign convention for the manifold capacity term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MtmcSign {
    /// `-‖Z‖_*`: minimizing the loss maximizes the nuclear norm.
    #[default]
    MaximizeNorm,
    /// `+‖Z‖_*`, the sign of the three-line reference snippet.
    LiteralCode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    /// Weight of the supervised contrastive term, in [0, 1].
    pub lambda_bal: f64,
    pub lambda_mtmc: f64,
    pub lambda_e: f64,
    pub k_neighbors: usize,
    pub base: BaseLoss,
    /// Drop the positive from the self-supervised denominator (the literal
    /// `n ≠ i` reading).
    pub denominator_excludes_positive: bool,
    pub mtmc_sign: MtmcSign,
    /// Sum only the singular values inside the 99%-energy rank.
    pub mtmc_truncate_99: bool,
    /// Divide the capacity term by the number of unlabeled rows.
    pub mtmc_rescale_by_batch: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda_bal: 0.35,
            lambda_mtmc: 0.1,
            lambda_e: 1.0,
            k_neighbors: 4,
            base: BaseLoss::Gcd,
            denominator_excludes_positive: false,
            mtmc_sign: MtmcSign::MaximizeNorm,
            mtmc_truncate_99: false,
            mtmc_rescale_by_batch: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.lambda_bal) {
            return Err(Error::Config(format!("lambda_bal must lie in [0, 1], got {}", self.lambda_bal)));
        }
        if !(self.lambda_mtmc >= 0.0 && self.lambda_mtmc.is_finite()) {
            return Err(Error::Config(format!("lambda_mtmc must be >= 0, got {}", self.lambda_mtmc)));
        }
        if !(self.lambda_e >= 0.0 && self.lambda_e.is_finite()) {
            return Err(Error::Config(format!("lambda_e must be >= 0, got {}", self.lambda_e)));
        }
        if self.k_neighbors < 1 {
            return Err(Error::Config("k_neighbors must be >= 1".into()));
        }
        Ok(())
    }
}

/// Learnable class prototypes, one row per known and novel class.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank<T> {
    pub c: Matrix<T>,
    pub known: usize,
}

impl<T: Scalar> PrototypeBank<T> {
    /// Random unit rows.
    pub fn init<R: Rng + ?Sized>(known: usize, novel: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if known + novel == 0 || dim == 0 {
            return Err(Error::invalid("prototype bank needs at least one class and one dimension"));
        }
        let raw = Matrix::from_fn(known + novel, dim, |_, _| {
            let v: f64 = rng.sample(rand_distr::StandardNormal);
            T::lit(v)
        });
        Ok(Self { c: raw.normalize_rows()?, known })
    }

    pub fn from_matrix(c: Matrix<T>, known: usize) -> Result<Self> {
        if known > c.rows() {
            return Err(Error::invalid("more known classes than prototypes"));
        }
        Ok(Self { c: c.normalize_rows()?, known })
    }

    pub fn classes(&self) -> usize {
        self.c.rows()
    }

    /// Restores unit-norm rows after an optimizer step.
    pub fn renormalize(&mut self) -> Result<()> {
        self.c = self.c.normalize_rows()?;
        Ok(())
    }
}

fn check_pair<T: Scalar>(tape: &Tape<T>, z: Var, z2: Var, op: &'static str) -> Result<usize> {
    let (sa, sb) = (tape.shape(z), tape.shape(z2));
    if sa != sb {
        return Err(Error::shape(op, format!("views {sa:?} vs {sb:?}")));
    }
    Ok(sa.0)
}

fn diagonal_mask(b: usize) -> Vec<bool> {
    (0..b * b).map(|k| k / b == k % b).collect()
}

/// Self-supervised InfoNCE between two views:
/// `-(1/B) Σ_i log( exp(z_i·z'_i/τ) / Σ_n exp(z_i·z'_n/τ) )`.
///
/// With `excludes_positive` the denominator skips `n = i`.
pub fn selfsup_contrastive<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    z2: Var,
    tau: f64,
    excludes_positive: bool,
) -> Result<Var> {
    let b = check_pair(tape, z, z2, "selfsup_contrastive")?;
    if b < 2 {
        return Err(Error::invalid("selfsup_contrastive needs at least two samples"));
    }
    let logits = tape.matmul_t(z, z2)?;
    let logits = tape.scale(logits, T::lit(1.0 / tau));
    let mask = excludes_positive.then(|| diagonal_mask(b));
    let log_den = tape.row_log_softmax(logits, mask)?;
    if !excludes_positive {
        let eye = tape.constant(Matrix::identity(b));
        let picked = tape.hadamard(log_den, eye)?;
        let total = tape.sum(picked);
        return Ok(tape.scale(total, -T::one() / T::from_count(b)));
    }
    // The positive is excluded from the normalizer, so its log term is the
    // raw logit minus the log-normalizer of the remaining entries.
    let pos = tape.dot_rows(z, z2)?;
    let pos = tape.scale(pos, T::lit(1.0 / tau));
    let lse = log_normalizer_off_diagonal(tape, logits, log_den, b)?;
    let diff = tape.sub(pos, lse)?;
    let total = tape.sum(diff);
    Ok(tape.scale(total, -T::one() / T::from_count(b)))
}

/// Recovers `log Σ_{n≠i} exp(logit_in)` per row as a B×1 column from a
/// masked log-softmax: any included entry j gives `logit_ij - logsoftmax_ij`.
fn log_normalizer_off_diagonal<T: Scalar>(tape: &mut Tape<T>, logits: Var, log_sm: Var, b: usize) -> Result<Var> {
    // Pick column (i + 1) mod b for row i: always off-diagonal for b >= 2.
    let pick = Matrix::from_fn(b, b, |i, j| if j == (i + 1) % b { T::one() } else { T::zero() });
    let pick = tape.constant(pick);
    let diff = tape.sub(logits, log_sm)?;
    let chosen = tape.hadamard(diff, pick)?;
    let ones = tape.constant(Matrix::filled(b, 1, T::one()));
    tape.matmul(chosen, ones)
}

/// Per-anchor positive weights for supervised contrastive learning: anchor
/// `i` spreads weight `1/|P(i)|` over `P(i) = {j ≠ i : y_j = y_i}`. Returns the
/// weight matrix and the number of anchors with at least one positive.
fn positive_weights<T: Scalar>(labels: &[usize]) -> (Matrix<T>, usize) {
    let b = labels.len();
    let mut w = Matrix::zeros(b, b);
    let mut anchors = 0;
    for i in 0..b {
        let pos: Vec<usize> = (0..b).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        let share = T::one() / T::from_count(pos.len());
        for j in pos {
            w[(i, j)] = share;
        }
    }
    (w, anchors)
}

/// True when at least two entries share a label.
pub fn has_positive_pairs(labels: &[usize]) -> bool {
    let mut seen = HashMap::new();
    labels.iter().any(|&y| seen.insert(y, ()).is_some())
}

/// Supervised contrastive loss over labeled views:
/// `-(1/|A|) Σ_{i∈A} (1/|P(i)|) Σ_{j∈P(i)} log( exp(z_i·z'_j/τ) / Σ_{n≠i} exp(z_i·z'_n/τ) )`
/// where `A` holds the anchors that have at least one same-label partner.
pub fn sup_contrastive<T: Scalar>(tape: &mut Tape<T>, z: Var, z2: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let b = check_pair(tape, z, z2, "sup_contrastive")?;
    if labels.len() != b {
        return Err(Error::shape("sup_contrastive", format!("{} labels for {b} rows", labels.len())));
    }
    let (weights, anchors) = positive_weights::<T>(labels);
    if anchors == 0 {
        return Err(Error::invalid("sup_contrastive: no pair of samples shares a label"));
    }
    let logits = tape.matmul_t(z, z2)?;
    let logits = tape.scale(logits, T::lit(1.0 / tau));
    let log_sm = tape.row_log_softmax(logits, Some(diagonal_mask(b)))?;
    let w = tape.constant(weights);
    let picked = tape.hadamard(log_sm, w)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -T::one() / T::from_count(anchors)))
}

/// `(1 - λ_bal)·L^u(all rows) + λ_bal·L^l(labeled rows)`.
///
/// Either term is skipped outright when its weight is zero, so the endpoints
/// reproduce the single terms exactly.
pub fn gcd_loss<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    z2: Var,
    labels: &[Option<usize>],
    labeled: &[bool],
    cfg: &LossConfig,
) -> Result<Var> {
    let b = check_pair(tape, z, z2, "gcd_loss")?;
    if labels.len() != b || labeled.len() != b {
        return Err(Error::shape("gcd_loss", "labels/mask length differs from batch size"));
    }
    let lam = cfg.lambda_bal;
    let unsup = if lam < 1.0 {
        let u = selfsup_contrastive(tape, z, z2, cfg.tau, cfg.denominator_excludes_positive)?;
        Some(tape.scale(u, T::lit(1.0 - lam)))
    } else {
        None
    };
    let sup = if lam > 0.0 {
        let idx: Vec<usize> = (0..b).filter(|&i| labeled[i]).collect();
        let ys = idx
            .iter()
            .map(|&i| labels[i].ok_or_else(|| Error::invalid(format!("labeled row {i} has no label"))))
            .collect::<Result<Vec<_>>>()?;
        let zl = tape.row_select(z, &idx)?;
        let zl2 = tape.row_select(z2, &idx)?;
        let s = sup_contrastive(tape, zl, zl2, &ys, cfg.tau)?;
        Some(tape.scale(s, T::lit(lam)))
    } else {
        None
    };
    match (unsup, sup) {
        (Some(u), Some(s)) => tape.add(u, s),
        (Some(u), None) => Ok(u),
        (None, Some(s)) => Ok(s),
        (None, None) => unreachable!("lambda_bal is either < 1 or > 0"),
    }
}

/// Smallest count of leading values whose sum reaches 99% of the total.
fn energy_rank<T: Scalar>(values: &[T]) -> usize {
    let total: T = values.iter().copied().sum();
    let target = T::lit(0.99) * total;
    let mut acc = T::zero();
    for (i, &v) in values.iter().enumerate() {
        acc += v;
        if acc >= target {
            return i + 1;
        }
    }
    values.len()
}

/// Options for [`mtmc_loss`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MtmcOptions {
    pub sign: MtmcSign,
    pub truncate_99: bool,
    pub rescale_by_batch: bool,
}

impl From<&LossConfig> for MtmcOptions {
    fn from(cfg: &LossConfig) -> Self {
        Self { sign: cfg.mtmc_sign, truncate_99: cfg.mtmc_truncate_99, rescale_by_batch: cfg.mtmc_rescale_by_batch }
    }
}

/// Token manifold capacity loss on the unlabeled embeddings:
/// `-Σ_r σ_r(Z_u)` under the default sign.
///
/// Returns `Ok(None)` when fewer than two rows are given: a single unit row
/// has nuclear norm 1 regardless of the parameters.
pub fn mtmc_loss<T: Scalar>(tape: &mut Tape<T>, z_unlabeled: Var, opts: MtmcOptions) -> Result<Option<Var>> {
    let rows = tape.shape(z_unlabeled).0;
    if rows < 2 {
        log::warn!("mtmc_loss skipped: {rows} unlabeled row(s) in batch");
        return Ok(None);
    }
    let keep = if opts.truncate_99 {
        let s = crate::linalg::singular_values(tape.value(z_unlabeled))?;
        let energy: Vec<T> = s.iter().map(|&x| x * x).collect();
        Some(energy_rank(&energy))
    } else {
        None
    };
    let norm = tape.nuclear_norm_top(z_unlabeled, keep)?;
    let mut factor = match opts.sign {
        MtmcSign::MaximizeNorm => -T::one(),
        MtmcSign::LiteralCode => T::one(),
    };
    if opts.rescale_by_batch {
        factor /= T::from_count(rows);
    }
    Ok(Some(tape.scale(norm, factor)))
}

/// One-hot rows for labels, as a constant.
fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Matrix<T> {
    Matrix::from_fn(labels.len(), classes, |i, k| if labels[i] == k { T::one() } else { T::zero() })
}

/// Breakdown of the SimGCD objective.
#[derive(Clone, Copy, Debug)]
pub struct SimGcdTerms {
    pub total: Var,
    pub supervised: Option<Var>,
    pub distillation: Var,
    pub entropy: Var,
}

/// Parametric SimGCD objective on pre-projection features:
///
/// ```text
/// p_i  = softmax(ĥ_i · C / τ)            student, view 1
/// p'_i = softmax(ĥ'_i · C / (τ/2))       teacher, view 2, no gradient
/// L    = (1/|B^l|) Σ_{B^l} -log p_i[y_i]
///      + (1/|B|)   Σ_i -Σ_k p'_ik log p_ik
///      - λ_e · H( (1/2|B|) Σ_i (p_i + p'_i) )
/// ```
///
/// `ĥ` denotes row-normalized features. Labels must index known classes.
#[allow(clippy::too_many_arguments)]
pub fn simgcd_losses<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    h2: Var,
    labels: &[Option<usize>],
    labeled: &[bool],
    prototypes: Var,
    known_classes: usize,
    cfg: &LossConfig,
) -> Result<SimGcdTerms> {
    if tape.shape(h) != tape.shape(h2) {
        return Err(Error::shape("simgcd_losses", format!("views {:?} vs {:?}", tape.shape(h), tape.shape(h2))));
    }
    let teacher = simgcd_teacher(tape.value(h2), tape.value(prototypes), cfg.tau)?;
    simgcd_with_teacher(tape, h, teacher, labels, labeled, prototypes, known_classes, cfg)
}

/// Teacher probabilities `softmax(ĥ' · C / (τ/2))`, as plain values.
pub fn simgcd_teacher<T: Scalar>(h2: &Matrix<T>, prototypes: &Matrix<T>, tau: f64) -> Result<Matrix<T>> {
    let logits = h2.normalize_rows()?.matmul_t(prototypes)?.scale(T::lit(2.0 / tau));
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let p = tape.row_softmax(l);
    Ok(tape.value(p).clone())
}

/// [`simgcd_losses`] with precomputed teacher probabilities (B×K).
#[allow(clippy::too_many_arguments)]
pub fn simgcd_with_teacher<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    teacher: Matrix<T>,
    labels: &[Option<usize>],
    labeled: &[bool],
    prototypes: Var,
    known_classes: usize,
    cfg: &LossConfig,
) -> Result<SimGcdTerms> {
    let b = tape.shape(h).0;
    if labels.len() != b || labeled.len() != b {
        return Err(Error::shape("simgcd_losses", "labels/mask length differs from batch size"));
    }
    let (k, d) = tape.shape(prototypes);
    if d != tape.shape(h).1 {
        return Err(Error::shape("simgcd_losses", format!("prototypes {k}x{d} vs features {:?}", tape.shape(h))));
    }
    if teacher.shape() != (b, k) {
        return Err(Error::shape("simgcd_losses", format!("teacher {:?}, expected {:?}", teacher.shape(), (b, k))));
    }
    let hn = tape.l2_normalize_rows(h)?;
    let logits = tape.matmul_t(hn, prototypes)?;
    let logits = tape.scale(logits, T::lit(1.0 / cfg.tau));
    let log_p = tape.row_log_softmax(logits, None)?;
    let p = tape.row_softmax(logits);
    let teacher = tape.constant(teacher);

    let idx: Vec<usize> = (0..b).filter(|&i| labeled[i]).collect();
    let supervised = if idx.is_empty() {
        None
    } else {
        let ys = idx
            .iter()
            .map(|&i| match labels[i] {
                Some(y) if y < known_classes && y < k => Ok(y),
                Some(y) => Err(Error::invalid(format!("label {y} outside the {known_classes} known classes"))),
                None => Err(Error::invalid(format!("labeled row {i} has no label"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let lp = tape.row_select(log_p, &idx)?;
        let oh = tape.constant(one_hot(&ys, k));
        let picked = tape.hadamard(lp, oh)?;
        let total = tape.sum(picked);
        Some(tape.scale(total, -T::one() / T::from_count(idx.len())))
    };

    let cross = tape.hadamard(teacher, log_p)?;
    let cross = tape.sum(cross);
    let distillation = tape.scale(cross, -T::one() / T::from_count(b));

    let avg_row = tape.constant(Matrix::filled(1, b, T::one() / T::from_count(2 * b)));
    let mean_p = tape.matmul(avg_row, p)?;
    let mean_t = tape.matmul(avg_row, teacher)?;
    let mean = tape.add(mean_p, mean_t)?;
    let entropy = entropy_of_row(tape, mean)?;

    let reg = tape.scale(entropy, -T::lit(cfg.lambda_e));
    let mut total = tape.add(distillation, reg)?;
    if let Some(s) = supervised {
        total = tape.add(s, total)?;
    }
    Ok(SimGcdTerms { total, supervised, distillation, entropy })
}

/// Shannon entropy `-Σ m log m` of a 1×K probability row.
fn entropy_of_row<T: Scalar>(tape: &mut Tape<T>, m: Var) -> Result<Var> {
    let guard = tape.constant(Matrix::filled(1, tape.shape(m).1, T::lit(1e-12)));
    let safe = tape.add(m, guard)?;
    let lg = tape.log(safe)?;
    let plogp = tape.hadamard(m, lg)?;
    let s = tape.sum(plogp);
    Ok(tape.scale(s, -T::one()))
}

/// Mean-shift with a flat kernel: each row is replaced by the normalized sum
/// of its `k` nearest rows by dot product, itself included. Ties go to the
/// lower index.
pub fn cms_mean_shift<T: Scalar>(z_all: &Matrix<T>, k: usize) -> Result<Matrix<T>> {
    let n = z_all.rows();
    if k < 1 {
        return Err(Error::invalid("cms_mean_shift: k must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("cms_mean_shift: k = {k} exceeds {n} rows")));
    }
    let d = z_all.cols();
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        let zi = z_all.row(i);
        let mut others: Vec<(usize, T)> = (0..n).filter(|&j| j != i).map(|j| (j, dot(zi, z_all.row(j)))).collect();
        others.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite similarities").then(a.0.cmp(&b.0)));
        let mut acc: Vec<T> = zi.to_vec();
        for &(j, _) in others.iter().take(k - 1) {
            acc.iter_mut().zip(z_all.row(j)).for_each(|(a, &b)| *a += b);
        }
        let norm = dot(&acc, &acc).sqrt();
        if norm <= T::min_positive_value() {
            return Err(Error::invalid(format!("cms_mean_shift: neighborhood of row {i} sums to zero")));
        }
        out.row_mut(i).iter_mut().zip(&acc).for_each(|(o, &a)| *o = a / norm);
    }
    Ok(out)
}

/// GCD contrastive pair with the mean-shifted embedding standing in for the
/// second view. `shifted` is usually a constant computed by
/// [`cms_mean_shift`] on the second view.
pub fn cms_loss<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    shifted: Var,
    labels: &[Option<usize>],
    labeled: &[bool],
    cfg: &LossConfig,
) -> Result<Var> {
    gcd_loss(tape, z, shifted, labels, labeled, cfg)
}
