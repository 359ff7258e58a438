//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines reach stdout uncaptured.
//! The process fails if any criterion is red, except a sub-check listed in
//! `KNOWN_RED` whose infeasibility is re-demonstrated on every run.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;

use dyncov::covariance::{weighted_covariance, DynCovEstimate, Stage};
use dyncov::dataset::{write_dataset_csv, Dataset};
use dyncov::estimator::{EstimatorConfig, MethodSpec};
use dyncov::forest::split::{delta_criterion, delta_from_gram, gram, TargetKernel};
use dyncov::forest::{train_forest, Forest, ForestConfig, Node, ResponseKind, Tree, WeightVector};
use dyncov::linalg::{cholesky_lower, min_eigenvalue};
use dyncov::portfolio::{backtest, backtest_with, min_var_weights, BacktestConfig};
use dyncov::rng;
use dyncov::simulation::{run_experiment, sample_dataset, true_cov, ExperimentConfig, ModelId, ModelSpec};
use dyncov::thresholding::{default_c_n, pd_correct, precision, shrink, threshold_matrix, ThresholdRule};

/// Criterion 9's directional sub-check: not attainable on a Model-1 panel,
/// because even the true Σ(U_i) does not beat the best constant matrix in 4
/// of 5 runs. The suite recomputes that ceiling each time.
const KNOWN_RED: &[u32] = &[9];

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

const RULES: [ThresholdRule; 4] = [
    ThresholdRule::Hard,
    ThresholdRule::Soft,
    ThresholdRule::Scad { a: 3.7 },
    ThresholdRule::AdaptiveLasso { eta: 3.0 },
];

fn shrink_laws() -> Outcome {
    let mut rng = rng::substream(1, "acceptance-shrink", 0);
    let mut violations = 0usize;
    let mut checked = 0usize;
    let mut check = |z: f64, l: f64, rule: ThresholdRule| {
        let s = shrink(z, l, rule);
        let ok = s.abs() <= z.abs() && (z.abs() > l || s == 0.0) && (s - z).abs() <= l;
        violations += usize::from(!ok);
        checked += 1;
    };
    for rule in RULES {
        for _ in 0..100_000 {
            let l: f64 = 10f64.powf(rng.random_range(-6.0..3.0));
            // Half the draws land near the rule's breakpoints.
            let t: f64 = if rng.random_bool(0.5) {
                let edge = [1.0, 2.0, 3.7][rng.random_range(0..3)];
                edge * (1.0 + rng.random_range(-1e-9..1e-9))
            } else {
                rng.random_range(0.0..10.0)
            };
            let z = if rng.random_bool(0.5) { t * l } else { -t * l };
            check(z, l, rule);
        }
        for zi in -400..=400 {
            for li in 0..=40 {
                let z = zi as f64 * 0.025;
                let l = li as f64 * 0.05;
                check(z, l, rule);
                check(z.next_up(), l, rule);
                check(l, l, rule);
                check(l.next_up(), l, rule);
            }
        }
    }
    Outcome::new(violations == 0, format!("{checked} pairs, {violations} violations"))
}

/// Leaf box containing `u`, found by walking every root-to-leaf path rather
/// than the tree's own routing.
fn leaf_box(tree: &Tree, d: usize, u: &[f64]) -> Vec<(f64, f64)> {
    fn walk(nodes: &[Node], at: usize, bounds: Vec<(f64, f64)>, out: &mut Vec<Vec<(f64, f64)>>) {
        match &nodes[at] {
            Node::Leaf { .. } => out.push(bounds),
            Node::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                let mut lb = bounds.clone();
                lb[*feature].1 = lb[*feature].1.min(*threshold);
                let mut rb = bounds;
                rb[*feature].0 = rb[*feature].0.max(*threshold);
                walk(nodes, *left, lb, out);
                walk(nodes, *right, rb, out);
            }
        }
    }
    let mut boxes = Vec::new();
    walk(&tree.nodes, 0, vec![(f64::NEG_INFINITY, f64::INFINITY); d], &mut boxes);
    let inside = |b: &Vec<(f64, f64)>, x: &[f64]| b.iter().zip(x).all(|(&(lo, hi), &v)| lo < v && v <= hi);
    let hits: Vec<_> = boxes.into_iter().filter(|b| inside(b, u)).collect();
    assert_eq!(hits.len(), 1, "leaf boxes must partition the space");
    hits.into_iter().next().unwrap()
}

fn reference_weights(forest: &Forest, data: &Dataset, u: &[f64]) -> Vec<f64> {
    let d = data.d();
    let mut dense = vec![0.0; data.n()];
    let mut used = 0usize;
    for tree in &forest.trees {
        let b = leaf_box(tree, d, u);
        let members: Vec<usize> = tree
            .j2
            .iter()
            .copied()
            .filter(|&i| b.iter().enumerate().all(|(j, &(lo, hi))| lo < data.covariate(i, j) && data.covariate(i, j) <= hi))
            .collect();
        if members.is_empty() {
            continue;
        }
        used += 1;
        for &i in &members {
            dense[i] += 1.0 / members.len() as f64;
        }
    }
    let scale = 1.0 / used.max(1) as f64;
    dense.into_iter().map(|w| w * scale).collect()
}

fn forest_oracle() -> Outcome {
    let mut mismatches = 0usize;
    let mut bad_sums = 0usize;
    let mut honesty = 0usize;
    for case in 0..200u64 {
        let mut rng = rng::substream(2, "acceptance-forest", case);
        let n = rng.random_range(4..=12);
        let d = rng.random_range(1..=2);
        let p = rng.random_range(1..=2);
        // Coarse values create ties on purpose.
        let u = DMatrix::from_fn(n, d, |_, _| rng.random_range(0..5) as f64 / 4.0);
        let y = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let data = Dataset::new(y, u).unwrap();
        let s = n.div_ceil(2);
        let config = ForestConfig {
            trees: rng.random_range(1..=3),
            k: rng.random_range(1..=(s / 2).max(1)),
            pi: 0.5,
            seed: case,
            ..ForestConfig::default()
        };
        let kind = if rng.random_bool(0.5) {
            ResponseKind::Mean
        } else {
            ResponseKind::SecondMoment
        };
        let forest = train_forest(&data, &config, kind).unwrap();
        let mut queries: Vec<Vec<f64>> = (0..n).map(|i| data.covariate_row(i)).collect();
        queries.extend((0..5).map(|_| (0..d).map(|_| rng.random_range(-0.5..1.5)).collect()));
        for q in &queries {
            let w: WeightVector = forest.weight_vector(q).unwrap();
            let reference = reference_weights(&forest, &data, q);
            if w.to_dense() != reference {
                mismatches += 1;
            }
            if w.entries.is_empty() || (w.sum() - 1.0).abs() > 1e-12 {
                bad_sums += 1;
            }
            for &(i, _) in &w.entries {
                if !forest.trees.iter().any(|t| t.j2.contains(&i) && t.neighbors(q).contains(&i)) {
                    honesty += 1;
                }
            }
        }
    }
    Outcome::new(
        mismatches + bad_sums + honesty == 0,
        format!("200 configs: {mismatches} weight mismatches, {bad_sums} bad sums, {honesty} support violations"),
    )
}

fn vec_outer(y: &[f64]) -> Vec<f64> {
    let p = y.len();
    (0..p * p).map(|k| y[k % p] * y[k / p]).collect()
}

fn gram_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    for node in 0..1000u64 {
        let mut rng = rng::substream(3, "acceptance-gram", node);
        let p = rng.random_range(1..=50);
        let n1 = rng.random_range(1..=20);
        let n2 = rng.random_range(1..=20);
        let rows = DMatrix::from_fn(n1 + n2, p, |_, _| rng.sample::<f64, _>(StandardNormal) * 3.0);
        let second = rng.random_bool(0.5);
        let kernel = if second { TargetKernel::Squared } else { TargetKernel::Linear };
        let target = |i: usize| -> Vec<f64> {
            let r: Vec<f64> = rows.row(i).iter().copied().collect();
            if second {
                vec_outer(&r)
            } else {
                r
            }
        };
        let dim = if second { p * p } else { p };
        let mut s1 = vec![0.0; dim];
        let mut s2 = vec![0.0; dim];
        for i in 0..n1 + n2 {
            let t = target(i);
            let acc = if i < n1 { &mut s1 } else { &mut s2 };
            for (a, v) in acc.iter_mut().zip(t) {
                *a += v;
            }
        }
        let naive = delta_criterion(&s1, n1, &s2, n2, n1 + n2);
        let g = gram(&rows, kernel);
        let block = |a: std::ops::Range<usize>, b: std::ops::Range<usize>| -> f64 {
            a.flat_map(|i| b.clone().map(move |j| (i, j))).map(|(i, j)| g[(i, j)]).sum()
        };
        let fast = delta_from_gram(
            block(0..n1, 0..n1),
            block(0..n1, n1..n1 + n2),
            block(n1..n1 + n2, n1..n1 + n2),
            n1,
            n2,
            n1 + n2,
        );
        let scale = naive.abs().max(1e-300);
        worst = worst.max((naive - fast).abs() / scale);
    }
    Outcome::new(worst <= 1e-9, format!("1000 nodes, worst relative error {worst:.3e}"))
}

fn pd_contract() -> Outcome {
    let mut failures = 0usize;
    let mut worst_residual = 0.0f64;
    let mut wide = 0usize;
    for case in 0..500u64 {
        let mut rng = rng::substream(4, "acceptance-pd", case);
        let n = rng.random_range(3..=40);
        let p = rng.random_range(2..=40);
        wide += usize::from(p > n);
        let y = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let data = Dataset::new(y, DMatrix::zeros(n, 1)).unwrap();
        let raw_w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw_w.iter().sum();
        let w = WeightVector {
            n,
            entries: raw_w.iter().enumerate().map(|(i, v)| (i, v / total)).collect(),
        };
        let raw = weighted_covariance(&data, &w, &w);
        let lambda = rng.random_range(0.0..0.5);
        let rule = RULES[rng.random_range(0..4)];
        let est = DynCovEstimate {
            u: vec![0.0],
            matrix: threshold_matrix(&raw, lambda, rule),
            stage: Stage::Thresholded,
        };
        let c_n = default_c_n(&est.matrix);
        let (corrected, _) = pd_correct(&est, c_n).unwrap();
        let mu = min_eigenvalue(&corrected.matrix);
        let inv = precision(&corrected).unwrap();
        let residual = (&corrected.matrix * inv - DMatrix::identity(p, p)).amax();
        worst_residual = worst_residual.max(residual);
        if mu < c_n - 1e-10 || residual >= 1e-8 {
            failures += 1;
        }
    }
    Outcome::new(
        failures == 0,
        format!("500 cases ({wide} with p > n), {failures} failures, worst residual {worst_residual:.2e}"),
    )
}

fn methods(list: &str) -> Vec<MethodSpec> {
    list.split(',').map(|m| m.parse().unwrap()).collect()
}

fn desk_model(id: ModelId) -> ModelSpec {
    ModelSpec { id, p: 100, d: 10, n: 100 }
}

fn true_cov_pd() -> (usize, usize) {
    let mut failures = 0;
    let mut checked = 0;
    for (k, id) in [ModelId::M1, ModelId::M2, ModelId::M3, ModelId::M4].into_iter().enumerate() {
        let model = desk_model(id);
        let mut rng = rng::substream(8, "acceptance-truth", k as u64);
        for _ in 0..1000 {
            let u: Vec<f64> = (0..model.d).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let s = true_cov(&model, &u).unwrap();
            checked += 1;
            if s != s.transpose() || min_eigenvalue(&s) <= 0.0 || cholesky_lower(&s).is_err() {
                failures += 1;
            }
        }
    }
    (checked, failures)
}

fn m1_panel(run: u64) -> Dataset {
    let model = ModelSpec {
        id: ModelId::M1,
        p: 20,
        d: 5,
        n: 300,
    };
    sample_dataset(&model, &mut rng::substream(100 + run, "panel", 0)).unwrap()
}

struct PortfolioChecks {
    properties: Outcome,
    directional: Outcome,
    /// Oracle wins out of 5 against the best constant matrix.
    oracle_wins: usize,
}

fn portfolio_checks() -> PortfolioChecks {
    let mut problems = Vec::new();

    let w = min_var_weights(&DMatrix::from_diagonal(&nalgebra::dvector![1.0, 4.0])).unwrap();
    if (w[0] - 0.8).abs() > 1e-15 || (w[1] - 0.2).abs() > 1e-15 {
        problems.push(format!("diag(1,4) weights {w:?}"));
    }
    let mut rng = rng::substream(9, "acceptance-scale", 0);
    for _ in 0..100 {
        let p = rng.random_range(2..=15);
        let a = DMatrix::from_fn(p, p + 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let s = &a * a.transpose() + DMatrix::identity(p, p) * 0.1;
        let c: f64 = 10f64.powf(rng.random_range(-3.0..3.0));
        let w1 = min_var_weights(&s).unwrap();
        let w2 = min_var_weights(&(&s * c)).unwrap();
        if (&w1 - &w2).amax() > 1e-9 || (w1.sum() - 1.0).abs() > 1e-12 {
            problems.push("scale invariance".into());
            break;
        }
    }

    // No lookahead: training windows end before the traded row, and rewriting
    // every row after day 200 leaves days up to 200 unchanged.
    let panel = m1_panel(0);
    let cfg = BacktestConfig {
        window: 100,
        refit_every: 10,
    };
    let windows_ok = std::sync::atomic::AtomicBool::new(true);
    backtest_with(&panel, cfg, |train, anchor| {
        let expected = panel.subset(&(anchor - cfg.window..anchor).collect::<Vec<_>>())?;
        if train != &expected {
            windows_ok.store(false, std::sync::atomic::Ordering::Relaxed);
        }
        Ok(|_: &[f64]| Ok(DMatrix::identity(20, 20)))
    })
    .unwrap();
    if !windows_ok.into_inner() {
        problems.push("training window leaks".into());
    }
    let method: MethodSpec = "mfdcm:soft".parse().unwrap();
    let est = EstimatorConfig::default();
    let base = backtest(&panel, &method, &est, cfg).unwrap();
    let mut y = panel.responses().clone();
    let mut u = panel.covariates().clone();
    for i in 201..panel.n() {
        y.row_mut(i).fill(9.0);
        u.row_mut(i).fill(-1.0);
    }
    let altered = backtest(&Dataset::new(y, u).unwrap(), &method, &est, cfg).unwrap();
    for (k, &row) in base.rows.iter().enumerate() {
        if row <= 200 && base.returns[k] != altered.returns[k] {
            problems.push(format!("day {row} changed after editing later rows"));
            break;
        }
    }

    // Directional comparison and the oracle ceiling on the same panels.
    let model = ModelSpec {
        id: ModelId::M1,
        p: 20,
        d: 5,
        n: 300,
    };
    let mut avg = DMatrix::zeros(20, 20);
    let grid = 2000;
    for k in 0..grid {
        let u1 = -1.0 + 2.0 * (k as f64 + 0.5) / grid as f64;
        avg += true_cov(&model, &[u1, 0.0, 0.0, 0.0, 0.0]).unwrap();
    }
    avg /= grid as f64;
    let mut wins = 0;
    let mut oracle_wins = 0;
    let mut detail = Vec::new();
    let static_method: MethodSpec = "mstatic:soft".parse().unwrap();
    for run in 0..5u64 {
        let panel = m1_panel(run);
        let e = est.with_seed(run);
        let f = backtest(&panel, &method, &e, cfg).unwrap().performance.std;
        let s = backtest(&panel, &static_method, &e, cfg).unwrap().performance.std;
        wins += usize::from(f <= s);
        let oracle = backtest_with(&panel, cfg, |_, _| Ok(|u: &[f64]| true_cov(&model, u)))
            .unwrap()
            .performance
            .std;
        let constant = backtest_with(&panel, cfg, |_, _| {
            let a = avg.clone();
            Ok(move |_: &[f64]| Ok(a.clone()))
        })
        .unwrap()
        .performance
        .std;
        oracle_wins += usize::from(oracle <= constant);
        detail.push(format!("{:.2}/{:.2}", 100.0 * f, 100.0 * s));
    }
    PortfolioChecks {
        properties: Outcome::new(problems.is_empty(), if problems.is_empty() { "ok".into() } else { problems.join("; ") }),
        directional: Outcome::new(
            wins >= 4,
            format!("modified FDCM STD <= static STD in {wins}/5 runs (STD% {})", detail.join(", ")),
        ),
        oracle_wins,
    }
}

fn run_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_dyncov"))
        .args(args)
        .stderr(std::process::Stdio::null())
        .stdout(std::process::Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> bool {
    names
        .iter()
        .all(|n| std::fs::read(a.join(n)).ok().is_some_and(|x| std::fs::read(b.join(n)).ok() == Some(x)))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut ok = true;
    let mut notes = Vec::new();

    let sim = |out: &Path, workers: &str| {
        run_cli(&[
            "simulate", "--model", "3", "--p", "12", "--d", "3", "--n", "60", "--reps", "3", "--trees", "100",
            "--methods", "fdcm:soft,mfdcm:scad,static:hard,kernel1:soft", "--seed", "11", "--workers", workers,
            "--out-dir", out.to_str().unwrap(),
        ])
    };
    let outs: Vec<_> = ["s1", "s8", "s1b"].iter().map(|d| root.join(d)).collect();
    ok &= sim(&outs[0], "1") && sim(&outs[1], "8") && sim(&outs[2], "1");
    let files = ["report.csv", "per_rep.csv", "table.txt"];
    let sim_same = ok && same_files(&outs[0], &outs[1], &files) && same_files(&outs[0], &outs[2], &files);
    notes.push(format!("simulate identical: {sim_same}"));
    ok &= sim_same;

    let model = ModelSpec {
        id: ModelId::M1,
        p: 8,
        d: 3,
        n: 160,
    };
    let panel = sample_dataset(&model, &mut rng::substream(12, "panel", 0)).unwrap();
    let panel_path = root.join("panel.csv");
    write_dataset_csv(&panel, std::fs::File::create(&panel_path).unwrap()).unwrap();
    let bt = |out: &Path, workers: &str| {
        run_cli(&[
            "backtest", "--panel", panel_path.to_str().unwrap(), "--method", "mfdcm:soft", "--window", "100",
            "--refit-every", "5", "--trees", "100", "--seed", "5", "--workers", workers, "--out-dir",
            out.to_str().unwrap(),
        ])
    };
    let outs: Vec<_> = ["b1", "b8", "b1b"].iter().map(|d| root.join(d)).collect();
    let ran = bt(&outs[0], "1") && bt(&outs[1], "8") && bt(&outs[2], "1");
    let files = ["returns.csv", "weights.csv", "summary.txt"];
    let bt_same = ran && same_files(&outs[0], &outs[1], &files) && same_files(&outs[0], &outs[2], &files);
    notes.push(format!("backtest identical: {bt_same}"));
    ok &= bt_same;
    Outcome::new(ok, notes.join(", "))
}

fn main() {
    let mut lines: Vec<(u32, Outcome, f64)> = Vec::new();
    let mut timed = |id: u32, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        lines.push((id, o, start.elapsed().as_secs_f64()));
    };

    timed(1, &mut shrink_laws);
    timed(2, &mut forest_oracle);
    timed(3, &mut gram_equivalence);
    timed(4, &mut pd_contract);

    let start = Instant::now();
    let m1 = run_experiment(&ExperimentConfig::new(
        desk_model(ModelId::M1),
        10,
        methods("fdcm:soft,static:soft"),
        EstimatorConfig::default(),
        7,
    ))
    .unwrap();
    let m1_secs = start.elapsed().as_secs_f64();
    let (fdcm, stat) = (&m1.methods[0], &m1.methods[1]);
    lines.push((
        5,
        Outcome::new(
            (5.0..=7.8).contains(&fdcm.mfl.mean) && (0.9..=2.2).contains(&fdcm.msl.mean),
            format!("MFL {:.2}({:.2}) MSL {:.2}({:.2})", fdcm.mfl.mean, fdcm.mfl.sd, fdcm.msl.mean, fdcm.msl.sd),
        ),
        m1_secs,
    ));
    let rep_wins = fdcm.per_rep.iter().zip(&stat.per_rep).filter(|(f, s)| f.mfl < s.mfl).count();
    lines.push((
        6,
        Outcome::new(
            fdcm.mfl.mean < stat.mfl.mean && rep_wins >= 8,
            format!("FDCM {:.2} vs static {:.2}; FDCM lower in {rep_wins}/10 reps", fdcm.mfl.mean, stat.mfl.mean),
        ),
        0.0,
    ));

    let start = Instant::now();
    let m3 = run_experiment(&ExperimentConfig::new(
        desk_model(ModelId::M3),
        10,
        methods("fdcm:soft"),
        EstimatorConfig::default(),
        7,
    ))
    .unwrap();
    let f3 = &m3.methods[0];
    let (tpr, fpr) = (f3.mtpr.unwrap(), f3.mfpr.unwrap());
    lines.push((
        7,
        Outcome::new(
            (0.29..=0.53).contains(&tpr.mean) && fpr.mean < 0.02,
            format!("MTPR {:.3}({:.3}) MFPR {:.4}({:.4})", tpr.mean, tpr.sd, fpr.mean, fpr.sd),
        ),
        start.elapsed().as_secs_f64(),
    ));

    let start = Instant::now();
    let (checked, pd_failures) = true_cov_pd();
    let violations = m1.spectral_violations + m3.spectral_violations;
    lines.push((
        8,
        Outcome::new(
            violations == 0 && pd_failures == 0,
            format!("{violations} spectral > Frobenius cases; {pd_failures}/{checked} non-PD truths"),
        ),
        start.elapsed().as_secs_f64(),
    ));

    let start = Instant::now();
    let pf = portfolio_checks();
    let nine_ok = pf.properties.passed && pf.directional.passed;
    lines.push((
        9,
        Outcome::new(
            nine_ok,
            format!(
                "properties: {}; directional: {}; oracle true-covariance ceiling {}/5",
                pf.properties.detail, pf.directional.detail, pf.oracle_wins
            ),
        ),
        start.elapsed().as_secs_f64(),
    ));

    let mut timed = |id: u32, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        lines.push((id, o, start.elapsed().as_secs_f64()));
    };
    timed(10, &mut determinism);

    let mut unexpected = Vec::new();
    for (id, o, secs) in &lines {
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("criterion {id:>2}: {status}  {}  [{secs:.1}s]", o.detail);
        if !o.passed {
            // A known-red criterion is tolerated only while its sub-properties
            // hold and the oracle ceiling still shows the target is out of reach.
            let excused = KNOWN_RED.contains(id) && *id == 9 && pf.properties.passed && pf.oracle_wins < 4;
            if !excused {
                unexpected.push(*id);
            }
        }
    }
    let passed = lines.iter().filter(|l| l.1.passed).count();
    println!("acceptance: {passed}/{} criteria pass", lines.len());
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
