//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line to stderr.

use std::io::Write;
use std::path::Path;

use cfopt::cli::{
    cmd_bench, cmd_explain, cmd_gen, cmd_train, mean_cost_reconstruction, BenchConfig, ExplainConfig, TrainConfig,
    TrainSection,
};
use cfopt::data::{generate, Dataset, GenSpec, Generated, LayerGen};
use cfopt::explain::{
    cf_opt_feature, energy, feature_energy, verify_with_oracle, ExplanationKind, ExplanationTask, MdmmConfig,
    DEFAULT_FEAS_TOL,
};
use cfopt::metrics::sample_tasks;
use cfopt::nn::{Activation, DenseNet};
use cfopt::optlayers::{enumerate_min, GridGraph, KnapsackGen, KnapsackInstance, OptLayer};
use cfopt::pipeline::{init_predictor, train_spo, Pipeline, SpoTrainConfig};
use cfopt::plausibility::{
    chi_mean, omega, prior_mass, region_objective, region_volume, verify_optimal_region, AnnulusRegion,
    RegularizerSpec,
};
use cfopt::vae::{cost_aware_elbo_with_noise, kl_closed_form, train_vae, Vae, VaeArch, VaeTrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "{verdict} criterion {id:>2} {name}: {detail}");
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn gauss(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[test]
fn criterion_01_hypersphere_constant() {
    let c = chi_mean(64).unwrap();
    report(1, "hypersphere constant", (c - 7.97).abs() <= 0.01, &format!("C_64 = {c:.5}"));
}

#[test]
fn criterion_02_prior_mass_table() {
    let expected = [
        (0.25, 27.6),
        (0.5, 52.1),
        (0.75, 71.2),
        (1.0, 84.4),
        (1.25, 92.4),
        (1.5, 96.7),
        (1.75, 98.7),
        (2.0, 99.5),
    ];
    let mut worst = 0.0f64;
    let mut got = Vec::new();
    for (kappa, pct) in expected {
        let m = 100.0 * prior_mass(&AnnulusRegion::hypersphere_band(64, kappa).unwrap()).unwrap();
        worst = worst.max((m - pct).abs());
        got.push(format!("{m:.2}"));
    }
    report(
        2,
        "prior mass table",
        worst <= 0.1,
        &format!("[{}], max deviation {worst:.3} points", got.join(", ")),
    );
}

#[test]
fn criterion_03_region_optimality() {
    let c = chi_mean(64).unwrap();
    let r = verify_optimal_region(64, 1e-16, 1001, 10.0).unwrap();
    let pass = (r.inner - c).abs() <= 0.01 && (r.outer - c).abs() <= 0.01;
    report(
        3,
        "region optimality",
        pass,
        &format!("a* = {:.4}, b* = {:.4}, C_64 = {c:.4}, step {:.4}", r.inner, r.outer, r.step),
    );
}

fn random_mlp(rng: &mut ChaCha8Rng, widths: &[usize], hidden: Activation) -> DenseNet {
    let mut net = DenseNet::mlp(widths, hidden, Activation::Identity, rng).unwrap();
    let p: Vec<f64> = net.params_flat().iter().map(|w| w + 0.3 * gauss(1, rng)[0]).collect();
    net.set_params_flat(&p).unwrap();
    net
}

fn set_vae_flat(v: &mut Vae, p: &[f64]) {
    let mut off = 0;
    for net in [&mut v.trunk, &mut v.head_mu, &mut v.head_logvar, &mut v.decoder] {
        let n = net.param_count();
        net.set_params_flat(&p[off..off + n]).unwrap();
        off += n;
    }
}

fn small_grid_pipeline(rng: &mut ChaCha8Rng, n_x: usize) -> Pipeline {
    let layer = OptLayer::Grid(GridGraph::new(3).unwrap());
    let w: Vec<f64> = (0..12 * n_x).map(|_| 0.5 * gauss(1, rng)[0]).collect();
    let b: Vec<f64> = (0..12).map(|_| rng.random_range(1.0..2.0)).collect();
    Pipeline::new(DenseNet::linear(w, b).unwrap(), layer).unwrap()
}

#[test]
fn criterion_04_gradient_suite() {
    const POINTS: usize = 50;
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let acts = [Activation::Relu, Activation::Sigmoid];

    let mut vjp = 0.0f64;
    let mut params = 0.0f64;
    for k in 0..POINTS {
        let net = random_mlp(&mut rng, &[5, 7, 6, 4], acts[k % 2]);
        let x = gauss(5, &mut rng);
        let v = gauss(4, &mut rng);
        let dot = |y: Vec<f64>| y.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        let g = net.vjp_input(&x, &v).unwrap();
        let fd = central_diff(&x, h, |x| dot(net.forward(x).unwrap()));
        vjp = vjp.max(rel_err(&g, &fd));
        let g = net.grad_params(&x, &v).unwrap().flat();
        let base = net.params_flat();
        let mut probe = net.clone();
        let fd = central_diff(&base, h, |p| {
            probe.set_params_flat(p).unwrap();
            dot(probe.forward(&x).unwrap())
        });
        params = params.max(rel_err(&g, &fd));
    }

    let mut reg = 0.0f64;
    for k in 0..POINTS {
        let n_z = rng.random_range(2..12);
        let beta = rng.random_range(0.1..3.0);
        let spec = if k % 2 == 0 {
            RegularizerSpec::hypersphere(beta, n_z).unwrap()
        } else {
            RegularizerSpec::loglik(beta).unwrap()
        };
        let z: Vec<f64> = gauss(n_z, &mut rng).iter().map(|v| 2.0 * v).collect();
        let fd = central_diff(&z, h, |z| omega(z, &spec).0);
        reg = reg.max(rel_err(&omega(&z, &spec).1, &fd));
    }

    let mut en = 0.0f64;
    let kinds = [ExplanationKind::Relative, ExplanationKind::Absolute, ExplanationKind::Epsilon];
    for k in 0..POINTS {
        let p = small_grid_pipeline(&mut rng, 4);
        let x0 = gauss(4, &mut rng);
        let task = match kinds[k % 3] {
            ExplanationKind::Epsilon => ExplanationTask::epsilon(&p, x0.clone(), rng.random_range(0.1..2.0)).unwrap(),
            kind => {
                let y0 = p.decide(&x0).unwrap().1.y;
                let alt = loop {
                    let c: Vec<f64> = (0..12).map(|_| rng.random_range(0.1..2.0)).collect();
                    let y = p.layer.solve(&c).unwrap().y;
                    if y != y0 {
                        break y;
                    }
                };
                if kind == ExplanationKind::Relative {
                    ExplanationTask::relative(&p, x0.clone(), alt).unwrap()
                } else {
                    ExplanationTask::absolute(&p, x0.clone(), alt).unwrap()
                }
            }
        };
        let lambda = rng.random_range(0.0..3.0);
        let cfg = MdmmConfig {
            rho: rng.random_range(0.5..2.0),
            reg: RegularizerSpec::hypersphere(rng.random_range(0.1..2.0), 3).unwrap(),
            ..MdmmConfig::default()
        };
        if k % 2 == 0 {
            let vae = Vae::init(
                &VaeArch {
                    n_x: 4,
                    n_z: 3,
                    hidden: vec![6],
                },
                &mut rng,
            )
            .unwrap();
            let z = gauss(3, &mut rng);
            let (_, g, _) = energy(&z, lambda, &task, &p, &vae, &cfg).unwrap();
            let fd = central_diff(&z, h, |z| energy(z, lambda, &task, &p, &vae, &cfg).unwrap().0);
            en = en.max(rel_err(&g, &fd));
        } else {
            let x = gauss(4, &mut rng);
            let (_, g, _) = feature_energy(&x, lambda, &task, &p, &cfg).unwrap();
            let fd = central_diff(&x, h, |x| feature_energy(x, lambda, &task, &p, &cfg).unwrap().0);
            en = en.max(rel_err(&g, &fd));
        }
    }

    let mut elbo = 0.0f64;
    for _ in 0..POINTS {
        let vae = Vae::init(
            &VaeArch {
                n_x: 4,
                n_z: 3,
                hidden: vec![5],
            },
            &mut rng,
        )
        .unwrap();
        let predictor = random_mlp(&mut rng, &[4, 6], Activation::Identity);
        let x = gauss(4, &mut rng);
        let eps = gauss(3, &mut rng);
        let alpha = rng.random_range(0.0..3.0);
        let g = cost_aware_elbo_with_noise(&vae, &predictor, &x, alpha, &eps).unwrap().1.flat();
        let mut probe = vae.clone();
        let fd = central_diff(&vae.params_flat(), h, |q| {
            set_vae_flat(&mut probe, q);
            cost_aware_elbo_with_noise(&probe, &predictor, &x, alpha, &eps).unwrap().0.total
        });
        elbo = elbo.max(rel_err(&g, &fd));
    }

    let pass = vjp <= 1e-5 && params <= 1e-5 && reg <= 1e-4 && en <= 1e-4 && elbo <= 1e-4;
    report(
        4,
        "gradient suite",
        pass,
        &format!(
            "max relative error vjp {vjp:.1e}, params {params:.1e}, omega {reg:.1e}, energy {en:.1e}, elbo {elbo:.1e}"
        ),
    );
}

#[test]
fn criterion_05_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut mismatches = 0;
    let mut checked = 0;
    for n in 2..=4 {
        let g = GridGraph::new(n).unwrap();
        let layer = OptLayer::Grid(g.clone());
        for _ in 0..100 {
            let theta: Vec<f64> = (0..g.num_edges()).map(|_| rng.random_range(0.01..5.0)).collect();
            checked += 1;
            if g.shortest_path(&theta).unwrap().objective != enumerate_min(&layer, &theta).unwrap().objective {
                mismatches += 1;
            }
        }
    }
    for m in 1..=12 {
        for _ in 0..100 {
            let spec = KnapsackGen {
                items: m,
                dims: 2,
                ..KnapsackGen::default()
            };
            let inst = KnapsackInstance::random(&spec, &mut rng).unwrap();
            let rewards: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..10.0)).collect();
            let best = inst.knapsack_max(&rewards).unwrap().objective;
            let layer = OptLayer::Knapsack(inst);
            let oracle = -enumerate_min(&layer, &layer.to_min_costs(&rewards)).unwrap().objective;
            checked += 1;
            if best != oracle {
                mismatches += 1;
            }
        }
    }
    report(
        5,
        "oracle equivalence",
        mismatches == 0,
        &format!("{mismatches} mismatches over {checked} instances (grids N = 2..4, knapsacks m = 1..12, d = 2)"),
    );
}

/// Linear SPO+ predictor on the default grid generator, trained on the first
/// 1000 of 2000 rows; the remaining rows are returned for task sampling.
fn trained_grid_pipeline() -> (Pipeline, Dataset) {
    let g = generate(&GenSpec::default()).unwrap();
    let (train, test) = g.data.split_at(1000);
    let p = Pipeline::new(init_predictor(10, g.layer.dim(), 1, 0).unwrap(), g.layer).unwrap();
    let (p, _) = train_spo(p, &train, &SpoTrainConfig::default()).unwrap();
    (p, test)
}

fn count_valid(tasks: &[ExplanationTask], p: &Pipeline) -> (usize, f64) {
    let mut valid = 0;
    let mut iters = 0usize;
    for t in tasks {
        let r = cf_opt_feature(t, p, &MdmmConfig::default()).unwrap();
        iters += r.iterations_run;
        if let Some(x) = &r.x_best {
            if verify_with_oracle(t, p, x, DEFAULT_FEAS_TOL).unwrap() {
                valid += 1;
            }
        }
    }
    (valid, iters as f64 / tasks.len() as f64)
}

#[test]
fn criterion_06_explanation_feasibility() {
    let (p, test) = trained_grid_pipeline();
    let rel = sample_tasks(&p, &test, ExplanationKind::Relative, None, 100, 61).unwrap();
    let eps = sample_tasks(&p, &test, ExplanationKind::Epsilon, Some(1.0), 100, 62).unwrap();
    let (vr, ir) = count_valid(&rel, &p);
    let (ve, ie) = count_valid(&eps, &p);
    report(
        6,
        "explanation feasibility",
        vr >= 90 && ve >= 90,
        &format!("valid relative {vr}/100 (mean {ir:.0} iterations), epsilon=1 {ve}/100 (mean {ie:.0} iterations)"),
    );
}

#[test]
fn criterion_07_epsilon_monotonicity() {
    let (p, test) = trained_grid_pipeline();
    let base = sample_tasks(&p, &test, ExplanationKind::Epsilon, Some(1.0), 50, 71).unwrap();
    let mut means = Vec::new();
    for eps in [0.2, 0.5, 1.0, 2.0] {
        let mut dist = Vec::new();
        for t in &base {
            let t = ExplanationTask {
                eps: Some(eps),
                ..t.clone()
            };
            if let Some(x) = cf_opt_feature(&t, &p, &MdmmConfig::default()).unwrap().x_best {
                dist.push(x.iter().zip(&t.x0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
            }
        }
        means.push((eps, dist.len(), dist.iter().sum::<f64>() / dist.len().max(1) as f64));
    }
    let violations = means.windows(2).filter(|w| w[1].2 < w[0].2).count();
    let detail = means
        .iter()
        .map(|(e, n, m)| format!("eps={e}: {m:.3} ({n} found)"))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        7,
        "epsilon monotonicity",
        violations <= 1,
        &format!("{detail}; {violations} violations"),
    );
}

#[test]
fn criterion_08_cost_aware_trend() {
    let g = generate(&GenSpec::default()).unwrap();
    let (train, rest) = g.data.split_at(1000);
    let p = Pipeline::new(init_predictor(10, g.layer.dim(), 1, 0).unwrap(), g.layer).unwrap();
    let (p, _) = train_spo(p, &train, &SpoTrainConfig::default()).unwrap();
    let heldout = &rest.contexts[..500];
    let arch = VaeArch {
        n_x: 10,
        n_z: 8,
        hidden: vec![32],
    };
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..3u64 {
        let mut errs = [0.0; 2];
        for (slot, alpha) in [0.0, 2.0].into_iter().enumerate() {
            let init = Vae::init(&arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let cfg = VaeTrainConfig {
                alpha,
                epochs: 60,
                learning_rate: 1e-3,
                batch_size: 64,
                seed,
                early_stopping: None,
            };
            let (vae, _) = train_vae(init, &train.contexts, &p.predictor, &cfg).unwrap();
            errs[slot] = mean_cost_reconstruction(&vae, &p, heldout).unwrap();
        }
        if errs[1] < errs[0] {
            wins += 1;
        }
        detail.push(format!("seed {seed}: alpha=0 {:.3}, alpha=2 {:.3}", errs[0], errs[1]));
    }
    report(
        8,
        "cost-aware trend",
        wins >= 2,
        &format!("{}; alpha=2 lower on {wins}/3 seeds", detail.join("; ")),
    );
}

fn log_normal_density(z: &[f64], mu: &[f64], logvar: &[f64]) -> f64 {
    z.iter()
        .zip(mu)
        .zip(logvar)
        .map(|((z, m), lv)| -0.5 * ((2.0 * std::f64::consts::PI).ln() + lv + (z - m).powi(2) / lv.exp()))
        .sum()
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn criterion_09_monte_carlo_checks() {
    const INPUTS: usize = 20;
    const SAMPLES: usize = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut kl_worst = 0.0f64;
    let mut region_worst = 0.0f64;
    for _ in 0..INPUTS {
        let d = rng.random_range(1..8);
        let mu: Vec<f64> = gauss(d, &mut rng);
        let logvar: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.0)).collect();
        let zeros = vec![0.0; d];
        let samples: Vec<f64> = (0..SAMPLES)
            .map(|_| {
                let z: Vec<f64> = (0..d)
                    .map(|k| mu[k] + (0.5 * logvar[k]).exp() * gauss(1, &mut rng)[0])
                    .collect();
                log_normal_density(&z, &mu, &logvar) - log_normal_density(&z, &zeros, &zeros)
            })
            .collect();
        let (m, se) = mean_and_se(&samples);
        kl_worst = kl_worst.max((kl_closed_form(&mu, &logvar).unwrap() - m).abs() / se);

        let dim = rng.random_range(1..20);
        let a = rng.random_range(0.0..(dim as f64).sqrt() + 1.0);
        let b = a + rng.random_range(0.0..1.5);
        let region = AnnulusRegion::new(a, b, dim).unwrap();
        let eta = rng.random_range(1e-3..1.0) / region_volume(&region).unwrap().max(1.0);
        let samples: Vec<f64> = (0..SAMPLES)
            .map(|_| {
                let r = norm(&gauss(dim, &mut rng));
                let gap = if r < a {
                    a - r
                } else if r > b {
                    r - b
                } else {
                    0.0
                };
                gap * gap
            })
            .collect();
        let (m, se) = mean_and_se(&samples);
        let mc = m + eta * region_volume(&region).unwrap();
        region_worst = region_worst.max((region_objective(&region, eta).unwrap() - mc).abs() / se);
    }
    report(
        9,
        "KL and region objective vs Monte Carlo",
        kl_worst <= 3.0 && region_worst <= 3.0,
        &format!("worst deviation KL {kl_worst:.2} SE, region objective {region_worst:.2} SE over {INPUTS} inputs"),
    );
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn full_run(root: &Path) {
    let data = root.join("data");
    let pipe = root.join("pipeline");
    cmd_gen(
        &GenSpec {
            samples: 300,
            seed: 11,
            layer: LayerGen::Grid { n: 3 },
            ..GenSpec::default()
        },
        &data,
    )
    .unwrap();
    let train = TrainConfig {
        seed: 11,
        data: Some(data.clone()),
        train: TrainSection {
            train_rows: 200,
            epochs: 8,
            learning_rate: 1e-2,
            patience: Some(3),
            ..TrainSection::default()
        },
    };
    cmd_train(&train, &pipe).unwrap();
    let explain = ExplainConfig {
        pipeline: Some(pipe.clone()),
        data: Some(data.clone()),
        row: Some(250),
        kind: ExplanationKind::Epsilon,
        trace: true,
        ..ExplainConfig::default()
    };
    cmd_explain(&explain, &root.join("explain")).unwrap();
    let bench = BenchConfig {
        seed: 11,
        data: Some(data),
        pipeline: Some(pipe),
        test_rows: 100,
        tasks: 8,
        eps: vec![0.5, 1.0],
        ..BenchConfig::default()
    };
    assert_eq!(cmd_bench(&bench, &root.join("bench")).unwrap().failures, 0);
}

#[test]
fn criterion_10_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    full_run(&run);
    let first = snapshot(&run);
    std::fs::rename(&run, tmp.path().join("first")).unwrap();
    full_run(&run);
    let second = snapshot(&run);
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    let pass = first.len() == second.len() && differing.is_empty() && Generated::load(&run.join("data")).is_ok();
    report(
        10,
        "determinism",
        pass,
        &format!(
            "{} files from gen/train/explain/bench compared, {} differ {:?}",
            first.len(),
            differing.len(),
            differing
        ),
    );
}
