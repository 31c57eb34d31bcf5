//! One test per acceptance criterion. Each prints a single PASS/FAIL line
//! and then asserts, so `cargo test --test acceptance -- --nocapture` gives
//! a readable summary.

use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use manifold_gcd::autodiff::{finite_difference, max_relative_error, Tape, Var};
use manifold_gcd::cluster::hungarian;
use manifold_gcd::data::{gen_synthetic, SynthConfig};
use manifold_gcd::error::Result;
use manifold_gcd::linalg::{nuclear_norm, singular_values, svd, sym_eig, Matrix};
use manifold_gcd::losses::{
    cms_loss, cms_mean_shift, gcd_loss, mtmc_loss, selfsup_contrastive, simgcd_losses, simgcd_teacher,
    simgcd_with_teacher, sup_contrastive, LossConfig, MtmcOptions,
};
use manifold_gcd::runner::{estimate_k_on, train, MetricsRow, RunConfig};
use manifold_gcd::spectral::{
    autocorrelation, centroid, effective_rank_99, spectral_report, uniform_sphere, von_neumann_entropy,
    SpectralReport,
};

/// Criteria run one at a time so wall-clock budgets are not shared with
/// other criteria.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u32, name: &str, passed: bool, detail: &str) {
    println!("{} criterion {id} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    assert!(passed, "criterion {id} ({name}) failed: {detail}");
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    uniform_sphere(n, d, rng)
}

fn dense(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0))
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Worst relative error between reverse-mode and central-difference
/// gradients over every input.
fn gradient_error(inputs: &[Matrix<f64>], build: &Build) -> f64 {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| t.leaf(m.clone())).collect();
    let loss = build(&mut t, &vars).unwrap();
    t.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..inputs.len() {
        let numeric = finite_difference(&inputs[k], 1e-5, |m| {
            let mut t = Tape::new();
            let vars: Vec<Var> =
                inputs.iter().enumerate().map(|(j, x)| t.leaf(if j == k { m.clone() } else { x.clone() })).collect();
            let l = build(&mut t, &vars)?;
            Ok(t.scalar(l))
        })
        .unwrap();
        worst = worst.max(max_relative_error(&t.grad(vars[k]), &numeric, 1e-6));
    }
    worst
}

/// Random labels over `classes` with at least one repeated class.
fn labels_with_pair(b: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut y: Vec<usize> = (0..b).map(|_| rng.gen_range(0..classes)).collect();
    y[1] = y[0];
    y
}

#[test]
fn criterion_1_gradient_correctness() {
    let _serial = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = [0.0f64; 6];
    let names = ["selfsup", "sup", "gcd", "simgcd", "cms", "mtmc"];
    let cfg = LossConfig { tau: 0.5, ..LossConfig::default() };
    for _ in 0..20 {
        let b = rng.gen_range(4..=8);
        let d = rng.gen_range(3..=8);
        let z = unit_rows(b, d, &mut rng);
        let z2 = unit_rows(b, d, &mut rng);
        let y = labels_with_pair(b, 3, &mut rng);
        let labeled: Vec<bool> = (0..b).map(|i| i < 2 || rng.gen_bool(0.5)).collect();
        let labels: Vec<Option<usize>> = y.iter().zip(&labeled).map(|(&c, &l)| l.then_some(c)).collect();

        worst[0] = worst[0].max(gradient_error(&[z.clone(), z2.clone()], &|t, v| {
            selfsup_contrastive(t, v[0], v[1], cfg.tau, false)
        }));
        worst[1] = worst[1].max(gradient_error(&[z.clone(), z2.clone()], &|t, v| sup_contrastive(t, v[0], v[1], &y, cfg.tau)));
        worst[2] = worst[2].max(gradient_error(&[z.clone(), z2.clone()], &|t, v| gcd_loss(t, v[0], v[1], &labels, &labeled, &cfg)));

        // The teacher is a detached target, so the check holds it fixed.
        let h = dense(b, d, &mut rng);
        let h2 = dense(b, d, &mut rng);
        let protos = unit_rows(5, d, &mut rng);
        let teacher = simgcd_teacher(&h2, &protos, cfg.tau).unwrap();
        worst[3] = worst[3].max(gradient_error(&[h.clone(), protos.clone()], &|t, v| {
            Ok(simgcd_with_teacher(t, v[0], teacher.clone(), &labels, &labeled, v[1], 3, &cfg)?.total)
        }));
        // The full entry point agrees with the fixed-teacher form in value.
        let mut t = Tape::new();
        let (hv, h2v, pv) = (t.leaf(h.clone()), t.leaf(h2.clone()), t.leaf(protos.clone()));
        let full = simgcd_losses(&mut t, hv, h2v, &labels, &labeled, pv, 3, &cfg).unwrap().total;
        let mut t2 = Tape::new();
        let (hv2, pv2) = (t2.leaf(h), t2.leaf(protos));
        let fixed = simgcd_with_teacher(&mut t2, hv2, teacher, &labels, &labeled, pv2, 3, &cfg).unwrap().total;
        assert!((t.scalar(full) - t2.scalar(fixed)).abs() < 1e-12);

        let shifted = cms_mean_shift(&z2, cfg.k_neighbors.min(b)).unwrap();
        worst[4] = worst[4].max(gradient_error(std::slice::from_ref(&z), &|t, v| {
            let s = t.constant(shifted.clone());
            cms_loss(t, v[0], s, &labels, &labeled, &cfg)
        }));
    }
    // The nuclear norm is differentiable where singular values are simple
    // and nonzero; draw until 20 such instances are found.
    let mut checked = 0;
    while checked < 20 {
        let b = rng.gen_range(2..=8);
        let d = rng.gen_range(2..=8);
        let z = dense(b, d, &mut rng);
        let s = singular_values(&z).unwrap();
        if s.windows(2).any(|w| w[0] - w[1] < 0.05) || s[s.len() - 1] < 0.05 {
            continue;
        }
        worst[5] = worst[5].max(gradient_error(&[z], &|t, v| Ok(mtmc_loss(t, v[0], MtmcOptions::default())?.unwrap())));
        checked += 1;
    }
    let elapsed = start.elapsed();
    let detail = names.iter().zip(&worst).map(|(n, e)| format!("{n}={e:.1e}")).collect::<Vec<_>>().join(" ");
    verdict(
        1,
        "gradient correctness",
        worst.iter().all(|&e| e < 1e-4) && within(elapsed, 30),
        &format!("max rel err {detail} (limit 1e-4), {:.1}s", elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_2_nuclear_norm_bounds() {
    let _serial = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut violations = 0;
    let mut worst_gap: f64 = 0.0;
    for _ in 0..1000 {
        let p = rng.gen_range(1..=32);
        let d = rng.gen_range(1..=32);
        let c = unit_rows(p, d, &mut rng);
        let nn = nuclear_norm(&c).unwrap();
        if !(nn >= 0.0 && nn <= ((p * p.min(d)) as f64).sqrt()) {
            violations += 1;
        }
        // Orthonormal rows attain the upper bound.
        let pp = p.min(d);
        let q = svd(&dense(pp, d, &mut rng)).unwrap().vt;
        let gap = (nuclear_norm(&q).unwrap() - pp as f64).abs();
        worst_gap = worst_gap.max(gap);
    }
    let elapsed = start.elapsed();
    verdict(
        2,
        "nuclear norm bounds",
        violations == 0 && worst_gap <= 1e-9 && within(elapsed, 10),
        &format!("{violations}/1000 violations, orthonormal gap {worst_gap:.1e} (limit 1e-9), {:.1}s", elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_3_entropy_rank() {
    let _serial = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut failures = 0;
    let mut min_slack = f64::INFINITY;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=40);
        let d = rng.gen_range(1..=24);
        let a = autocorrelation(&unit_rows(n, d, &mut rng)).unwrap();
        let lam = sym_eig(&a).unwrap().values;
        let h = von_neumann_entropy(&lam).unwrap();
        let slack = (effective_rank_99(&lam).unwrap() as f64).ln() - h;
        min_slack = min_slack.min(slack);
        if slack < -1e-9 {
            failures += 1;
        }
    }
    let mut worst_eq: f64 = 0.0;
    for k in 1..=64 {
        let mut lam = vec![1.0 / k as f64; k];
        lam.extend(vec![0.0; 64 - k]);
        let h = von_neumann_entropy(&lam).unwrap();
        let r = effective_rank_99(&lam).unwrap();
        worst_eq = worst_eq.max(((r as f64).ln() - h).abs());
    }
    let elapsed = start.elapsed();
    verdict(
        3,
        "entropy-rank theorem",
        failures == 0 && worst_eq <= 1e-9 && within(elapsed, 5),
        &format!(
            "{failures}/1000 bound failures (min slack {min_slack:.2e}), uniform-spectrum equality error {worst_eq:.1e}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_4_identical_view_centroid() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    for k in [1, 2, 8, 64] {
        for _ in 0..50 {
            let d = rng.gen_range(1..=64);
            let v = unit_rows(1, d, &mut rng);
            let views = Matrix::from_fn(k, d, |_, j| v[(0, j)]);
            let c = centroid(&views);
            worst = worst.max((c.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs());
        }
    }
    verdict(4, "identical-view centroid", worst <= 1e-12, &format!("max |norm - 1| = {worst:.1e} for K in {{1,2,8,64}}"));
}

/// `n` rows drawn around four random directions.
fn four_clusters(n: usize, d: usize, spread: f64, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let centers = unit_rows(4, d, rng);
    let noise = unit_rows(n, d, rng);
    Matrix::from_fn(n, d, |i, j| centers[(i % 4, j)] + spread * noise[(i, j)]).normalize_rows().unwrap()
}

#[test]
fn criterion_5_uniformity_maximizes_nuclear_norm() {
    let _serial = serial();
    // Band from a 50-seed Monte Carlo at P = D = 256 (min 0.8471, max 0.8511,
    // sd 0.0009), widened by about two standard deviations. The large-size
    // limit is 8 / (3 pi) = 0.8488.
    const BAND: (f64, f64) = (0.845, 0.853);
    let start = Instant::now();
    let (p, d) = (256, 256);
    let scale = ((p * d) as f64).sqrt();
    let mut in_band = 0;
    let mut wins = 0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let u = nuclear_norm(&uniform_sphere(p, d, &mut rng)).unwrap() / scale;
        let c = nuclear_norm(&four_clusters(p, d, 0.5, &mut rng)).unwrap() / scale;
        lo = lo.min(u);
        hi = hi.max(u);
        in_band += usize::from((BAND.0..=BAND.1).contains(&u));
        wins += usize::from(u > c);
    }
    let elapsed = start.elapsed();
    verdict(
        5,
        "uniformity maximizes nuclear norm",
        in_band == 50 && wins >= 48 && within(elapsed, 60),
        &format!(
            "uniform ratio in [{lo:.4}, {hi:.4}], {in_band}/50 inside [{}, {}]; beats 4-cluster in {wins}/50; {:.1}s",
            BAND.0,
            BAND.1,
            elapsed.as_secs_f64()
        ),
    );
}

fn brute_force(cost: &[Vec<i64>]) -> i64 {
    fn go(cost: &[Vec<i64>], row: usize, used: &mut [bool]) -> i64 {
        if row == cost.len() {
            return 0;
        }
        let mut best = i64::MAX;
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                best = best.min(cost[row][c] + go(cost, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    go(cost, 0, &mut vec![false; cost.len()])
}

#[test]
fn criterion_6_hungarian_oracle() {
    let _serial = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.gen_range(1..=7);
        let cost: Vec<Vec<i64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(-50..=50)).collect()).collect();
        if hungarian(&cost).unwrap().total != brute_force(&cost) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        6,
        "hungarian oracle",
        mismatches == 0 && within(elapsed, 10),
        &format!("{mismatches}/200 mismatches against brute force, {:.1}s", elapsed.as_secs_f64()),
    );
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_7_mtmc_anti_collapse_trend() {
    let _serial = serial();
    let seeds: Vec<u64> = (0..5).collect();
    let run = |lambda: f64, seed: u64| -> (MetricsRow, Duration) {
        let mut cfg = RunConfig::default().with_seed(seed);
        cfg.loss.lambda_mtmc = lambda;
        cfg.diagnostics_every = cfg.epochs;
        let dir = tempfile::tempdir().unwrap();
        let start = Instant::now();
        let out = train(&cfg, dir.path()).unwrap();
        (out.metrics.last().cloned().unwrap(), start.elapsed())
    };
    let results: Vec<((MetricsRow, Duration), (MetricsRow, Duration))> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds.iter().map(|&seed| s.spawn(move || (run(0.1, seed), run(0.0, seed)))).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let on: Vec<&MetricsRow> = results.iter().map(|r| &r.0 .0).collect();
    let off: Vec<&MetricsRow> = results.iter().map(|r| &r.1 .0).collect();
    let slowest_pair = results.iter().map(|r| r.0 .1 + r.1 .1).max().unwrap();
    let med = |rows: &[&MetricsRow], f: fn(&MetricsRow) -> f64| median(rows.iter().map(|r| f(r)).collect());

    let entropy = (med(&on, |r| r.entropy), med(&off, |r| r.entropy));
    let rank = (med(&on, |r| r.effective_rank as f64), med(&off, |r| r.effective_rank as f64));
    let frob = (med(&on, |r| r.frobenius_to_identity), med(&off, |r| r.frobenius_to_identity));
    let acc = (med(&on, |r| r.acc_new), med(&off, |r| r.acc_new));
    let acc_wins = on.iter().zip(&off).filter(|(a, b)| a.acc_new > b.acc_new).count();
    for (s, (a, b)) in seeds.iter().zip(on.iter().zip(&off)) {
        println!(
            "  seed {s}: entropy {:.4}/{:.4} rank {}/{} frob {:.5}/{:.5} acc_new {:.4}/{:.4} (mtmc/base)",
            a.entropy, b.entropy, a.effective_rank, b.effective_rank, a.frobenius_to_identity, b.frobenius_to_identity,
            a.acc_new, b.acc_new
        );
    }
    // A single-threaded run of the pair must fit the budget; with scoped
    // workers sharing cores the per-run wall time is an upper bound.
    let passed = entropy.0 > entropy.1
        && rank.0 > rank.1
        && frob.0 < frob.1
        && acc.0 >= acc.1 - 0.02
        && acc_wins >= 3
        && within(slowest_pair, 300 * seeds.len() as u64);
    verdict(
        7,
        "mtmc anti-collapse trend",
        passed,
        &format!(
            "median entropy {:.4} vs {:.4}, rank {} vs {}, frobenius {:.5} vs {:.5}, acc_new {:.4} vs {:.4}, acc_new higher in {acc_wins}/5",
            entropy.0, entropy.1, rank.0, rank.1, frob.0, frob.1, acc.0, acc.1
        ),
    );
}

#[test]
fn criterion_8_k_estimation() {
    let _serial = serial();
    let start = Instant::now();
    let mut hits = 0;
    let mut found = Vec::new();
    for seed in 0..5u64 {
        let synth = SynthConfig { n_classes_known: 2, n_classes_novel: 3, seed, ..SynthConfig::default() };
        let data = gen_synthetic(&synth).unwrap();
        let est = estimate_k_on(&data, None, 2, 10, seed).unwrap();
        hits += usize::from(est.k.abs_diff(5) <= 1);
        found.push(est.k);
    }
    let elapsed = start.elapsed();
    verdict(
        8,
        "k estimation",
        hits >= 4 && within(elapsed, 120),
        &format!("estimates {found:?}, {hits}/5 within 1 of 5, {:.1}s", elapsed.as_secs_f64()),
    );
}

fn scalars(r: &SpectralReport) -> [f64; 8] {
    [
        r.entropy,
        r.effective_rank_99 as f64,
        r.frobenius_to_identity,
        r.nuclear_norm,
        r.manifold_radius,
        r.manifold_dim,
        r.capacity_load,
        r.capacity,
    ]
}

#[test]
fn criterion_9_spectral_invariances() {
    let _serial = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst_inv: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(2..=32);
        let d = rng.gen_range(2..=16);
        let z = unit_rows(n, d, &mut rng);
        let q = svd(&dense(d, d, &mut rng)).unwrap().u;
        let zq = z.matmul(&q).unwrap();
        let (a, b) = (scalars(&spectral_report(&z).unwrap()), scalars(&spectral_report(&zq).unwrap()));
        for (x, y) in a.iter().zip(&b) {
            worst_inv = worst_inv.max((x - y).abs() / x.abs().max(1.0));
        }
    }
    let mut worst_rec: f64 = 0.0;
    for _ in 0..500 {
        let m = rng.gen_range(1..=24);
        let n = rng.gen_range(1..=24);
        let a = dense(m, n, &mut rng);
        let rec = svd(&a).unwrap().reconstruct();
        let diff = rec.sub(&a).unwrap();
        let rel = manifold_gcd::linalg::frobenius_norm(&diff) / manifold_gcd::linalg::frobenius_norm(&a);
        worst_rec = worst_rec.max(rel);
    }
    let elapsed = start.elapsed();
    verdict(
        9,
        "spectral invariances",
        worst_inv <= 1e-8 && worst_rec <= 1e-10 && within(elapsed, 30),
        &format!(
            "max report change under rotation {worst_inv:.1e} (limit 1e-8), max svd reconstruction error {worst_rec:.1e} (limit 1e-10), {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

fn train_via_cli(config: &Path, out: &Path) -> String {
    let status = Command::new(env!("CARGO_BIN_EXE_manifold-gcd"))
        .args(["--quiet", "train", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    std::fs::read_to_string(out.join("metrics.csv")).unwrap()
}

#[test]
fn criterion_10_reproducibility() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    let cfg = RunConfig { epochs: 10, diagnostics_every: 2, ..RunConfig::default() };
    let mut cfg = cfg.with_seed(11);
    cfg.loss.lambda_mtmc = 0.1;
    std::fs::write(&config, serde_json::to_string(&cfg).unwrap()).unwrap();
    let a = train_via_cli(&config, &dir.path().join("a"));
    let b = train_via_cli(&config, &dir.path().join("b"));
    let rows = a.lines().count() - 1;
    verdict(
        10,
        "reproducibility",
        a == b && rows == 5,
        &format!("two train invocations, {rows} metrics rows each, files identical: {}", a == b),
    );
}
