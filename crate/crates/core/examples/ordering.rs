//! Scratch harness for the synthetic ordering experiment.
//! Usage: ordering <iters> <n_seeds> <noise_std> <class_count> <n_query> <variant>...

use fewsel::data::{synth_generate, SynthConfig};
use fewsel::eval::{msre, recovery_precision};
use fewsel::matrix::Matrix;
use fewsel::model::{reconstruct_selected, select, ModelConfig, ModelParams, Variant};
use fewsel::rng::stream_rng;
use fewsel::trainer::{train, TrainConfig};
use std::time::Instant;

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn normal_pdf(x: f64, mu: f64, sd: f64) -> f64 {
    let z = (x - mu) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

/// Bayes-style detector ceiling: score each coordinate by the likelihood of
/// the two support deviations under "signal" vs "noise or redundant", using
/// the true generative constants. Reports precision of the top-K coords.
fn oracle_precision(
    support: &Matrix,
    col_means: &[f64],
    signal: &[usize],
    noise_std: f64,
    k: usize,
) -> (f64, f64) {
    let amp = 0.2;
    let mu_red = 0.075;
    let sig_sd = noise_std * (1.0f64 + 1.5 * 1.5).sqrt();
    let mut llr: Vec<(f64, usize)> = Vec::new();
    let mut mag: Vec<(f64, usize)> = Vec::new();
    for j in 0..support.cols() {
        let d1 = support.get(0, j) - col_means[j];
        let d2 = support.get(1, j) - col_means[j];
        let p_sig: f64 = [d1, d2]
            .iter()
            .map(|&d| 0.5 * normal_pdf(d, -amp, sig_sd) + 0.5 * normal_pdf(d, amp, sig_sd))
            .product();
        let p_noise: f64 = [d1, d2]
            .iter()
            .map(|&d| normal_pdf(d, 0.0, 0.5 * noise_std))
            .product();
        let p_red: f64 = [d1, d2]
            .iter()
            .map(|&d| {
                0.5 * normal_pdf(d, -mu_red, noise_std) + 0.5 * normal_pdf(d, mu_red, noise_std)
            })
            .product();
        llr.push((p_sig.ln() - (0.5 * p_noise + 0.5 * p_red).ln(), j));
        mag.push((d1.abs() + d2.abs(), j));
    }
    let top = |scored: &mut Vec<(f64, usize)>| -> Vec<usize> {
        scored.sort_by(|a, b| f64::total_cmp(&b.0, &a.0));
        scored[..k].iter().map(|&(_, j)| j).collect()
    };
    let hits = |picks: &[usize]| {
        picks.iter().filter(|j| signal.contains(j)).count() as f64 / picks.len() as f64
    };
    (hits(&top(&mut llr)), hits(&top(&mut mag)))
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let iters: usize = args[0].parse().unwrap();
    let n_seeds: u64 = args[1].parse().unwrap();
    let noise_std: f64 = args[2].parse().unwrap();
    let class_count: usize = args[3].parse().unwrap();
    let n_query: usize = args[4].parse().unwrap();
    let variants: Vec<&str> = args[5..].iter().map(|s| s.as_str()).collect();

    for vname in &variants {
        let variant = Variant::parse(vname).unwrap();
        let mut precisions = Vec::new();
        let mut msres = Vec::new();
        for seed in 0..n_seeds {
            let t0 = Instant::now();
            let scfg = SynthConfig {
                source_tasks: 8,
                val_tasks: 2,
                m: 20,
                signal_count: 5,
                instances: 200,
                class_count,
                noise_std,
                seed,
            };
            let out = synth_generate(&scfg).unwrap();
            if std::env::var("SETS").is_ok() {
                for t in &out.collection.tasks {
                    println!("  {} signal={:?}", t.task_id, out.truth[&t.task_id].signal);
                }
            }
            let sources: Vec<_> = out
                .collection
                .tasks
                .iter()
                .filter(|t| t.task_id.starts_with("source"))
                .map(|t| t.unlabeled())
                .collect();
            let vals: Vec<_> = out
                .collection
                .tasks
                .iter()
                .filter(|t| t.task_id.starts_with("val"))
                .map(|t| t.unlabeled())
                .collect();
            let target = out
                .collection
                .tasks
                .iter()
                .find(|t| t.task_id == "target")
                .unwrap();
            let truth = &out.truth["target"];

            if std::env::var("ORACLE").is_ok() {
                let col_means: Vec<f64> = (0..target.x.cols())
                    .map(|j| {
                        (0..target.x.rows()).map(|i| target.x.get(i, j)).sum::<f64>()
                            / target.x.rows() as f64
                    })
                    .collect();
                let mut o_rng = stream_rng(seed, 4);
                let mut llr_p = Vec::new();
                let mut mag_p = Vec::new();
                for _ in 0..5 {
                    let ep = target
                        .unlabeled()
                        .sample_episode(&mut o_rng, 2, target.x.rows() - 2)
                        .unwrap();
                    let (support, _query): (Matrix, Matrix) = ep.materialize(&target.x).unwrap();
                    let (lp, mp) =
                        oracle_precision(&support, &col_means, &truth.signal, noise_std, 5);
                    llr_p.push(lp);
                    mag_p.push(mp);
                }
                println!(
                    "  oracle seed={seed}: llr prec={:.3} |d| prec={:.3}",
                    llr_p.iter().sum::<f64>() / 5.0,
                    mag_p.iter().sum::<f64>() / 5.0
                );
            }

            let mut mcfg = ModelConfig::for_shape(20, 5);
            variant.configure(&mut mcfg);
            let train_seed = std::env::var("TRAINSEED")
                .ok()
                .and_then(|s| s.parse::<u64>().ok())
                .map(|base| base * 1000 + seed)
                .unwrap_or(seed);
            let mut tcfg = TrainConfig {
                n_support: 2,
                n_query,
                max_iters: iters,
                seed: train_seed,
                use_noise: variant.use_noise,
                ..TrainConfig::default()
            };
            if let Some(tau) = variant.fixed_tau {
                tcfg.t0 = tau;
                tcfg.t1 = tau;
            }
            let mut init_rng = stream_rng(seed, 0);
            let mut params = ModelParams::init(&mut init_rng, &mcfg).unwrap();
            fewsel::model::fit_center(&mut params, &sources).unwrap();
            let bank_tasks: &[fewsel::data::UnlabeledTask] =
                if std::env::var("VALTASKS").is_ok() { &vals } else { &[] };
            let (trained, report) =
                train(&mcfg, &tcfg, &sources, bank_tasks, params, |_| Ok(())).unwrap();
            if std::env::var("RESPONSE").is_ok() {
                let center = trained.center.clone();
                let base = Matrix::from_fn(2, 20, |_, j| center.get(0, j));
                let base_la = select(&trained, &mcfg, &base).unwrap().log_alpha;
                println!("  response matrix (rows: probed coord, top-3 logit boosts):");
                for j in 0..20 {
                    let probe = Matrix::from_fn(2, 20, |i, jj| {
                        center.get(0, jj)
                            + if jj == j { if i == 0 { 0.3 } else { -0.3 } } else { 0.0 }
                    });
                    let la = select(&trained, &mcfg, &probe).unwrap().log_alpha;
                    let mut boosts: Vec<(usize, f64)> = (0..20)
                        .map(|c| {
                            let b: f64 = (0..la.rows())
                                .map(|k| la.get(k, c) - base_la.get(k, c))
                                .fold(f64::MIN, f64::max);
                            (c, b)
                        })
                        .collect();
                    boosts.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
                    let top: Vec<String> = boosts[..3]
                        .iter()
                        .map(|(c, b)| format!("{c}:{b:+.2}"))
                        .collect();
                    println!("    probe {j:2} -> {}", top.join(" "));
                }
            }

            let mut eval_rng = stream_rng(seed, 4);
            let mut p_draws = Vec::new();
            let mut m_draws = Vec::new();
            let mut sig_mass = 0.0;
            let mut gap_sum = 0.0;
            for d in 0..5 {
                let ep = target
                    .unlabeled()
                    .sample_episode(&mut eval_rng, 2, target.x.rows() - 2)
                    .unwrap();
                let (support, query): (Matrix, Matrix) = ep.materialize(&target.x).unwrap();
                let sel = select(&trained, &mcfg, &support).unwrap();
                p_draws.push(recovery_precision(&sel.dedup, &truth.signal));
                if d == 0 && std::env::var("PROBE").is_ok() {
                    let n_sig = sel.dedup.iter().filter(|j| truth.signal.contains(j)).count();
                    let n_red = sel
                        .dedup
                        .iter()
                        .filter(|j| truth.redundant.contains(j))
                        .count();
                    println!(
                        "  pick breakdown seed={seed}: dedup={:?} signal={n_sig} redundant={n_red} noise={}",
                        sel.dedup,
                        sel.dedup.len() - n_sig - n_red
                    );
                }
                let recon =
                    reconstruct_selected(&trained, &mcfg, &support, &query, &sel).unwrap();
                m_draws.push(msre(&query, &recon).unwrap());
                if d == 0 && std::env::var("ORACLEMSRE").is_ok() {
                    let mut osel = sel.clone();
                    osel.indices = truth.signal.clone();
                    osel.dedup = truth.signal.clone();
                    let orecon =
                        reconstruct_selected(&trained, &mcfg, &support, &query, &osel).unwrap();
                    println!(
                        "  oracle-picks msre={:.4} learned-picks msre={:.4}",
                        msre(&query, &orecon).unwrap(),
                        msre(&query, &recon).unwrap()
                    );
                }
                if d == 0 {
                    let la = &sel.log_alpha;
                    let is_sig = |j: usize| truth.signal.contains(&j);
                    for k in 0..la.rows() {
                        let row = la.row(k);
                        let mx = row.iter().cloned().fold(f64::MIN, f64::max);
                        let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
                        let z: f64 = exps.iter().sum();
                        sig_mass += (0..20).filter(|&j| is_sig(j)).map(|j| exps[j]).sum::<f64>()
                            / z
                            / la.rows() as f64;
                        let mean = row.iter().sum::<f64>() / 20.0;
                        gap_sum += (mx - mean) / la.rows() as f64;
                    }
                }
            }
            if std::env::var("PROBE").is_ok() {
                // estimate centers from the source pool, then plant fake
                // deviations and check whether selection follows them
                let mut centers = vec![0.0; 20];
                let mut count = 0.0;
                for t in out.collection.tasks.iter().filter(|t| t.task_id.starts_with("source")) {
                    for i in 0..t.x.rows() {
                        for j in 0..20 {
                            centers[j] += t.x.get(i, j);
                        }
                    }
                    count += t.x.rows() as f64;
                }
                for c in centers.iter_mut() {
                    *c /= count;
                }
                let planted = [2usize, 5, 11, 16, 19];
                let mut fake = Matrix::zeros(2, 20);
                for j in 0..20 {
                    fake.set(0, j, centers[j]);
                    fake.set(1, j, centers[j]);
                }
                for &j in &planted {
                    fake.set(0, j, centers[j] + 0.2);
                    fake.set(1, j, centers[j] - 0.2);
                }
                let sel = select(&trained, &mcfg, &fake).unwrap();
                let hits = sel.dedup.iter().filter(|j| planted.contains(j)).count();
                println!(
                    "  probe seed={seed}: planted {:?} picked {:?} hits={hits}",
                    planted, sel.dedup
                );
            }
            let p = p_draws.iter().sum::<f64>() / p_draws.len() as f64;
            let m = m_draws.iter().sum::<f64>() / m_draws.len() as f64;
            println!(
                "{vname} seed={seed} prec={p:.3} msre={m:.4} sig_mass={sig_mass:.3} gap={gap_sum:.2} best_val={:.5}@{} stop={:?} iters={} {:.1}s",
                report.best_val_msre,
                report.best_iteration,
                report.stop_reason,
                report.iterations_run,
                t0.elapsed().as_secs_f64()
            );
            precisions.push(p);
            msres.push(m);
        }
        println!(
            "== {vname}: median prec={:.3} median msre={:.4}",
            median(&mut precisions),
            median(&mut msres)
        );
    }

    let mut rand_ps = Vec::new();
    for seed in 0..n_seeds {
        let mut rng = stream_rng(seed, 5);
        let mut draws = Vec::new();
        for _ in 0..5 {
            let picks = fewsel::baselines::random_select(&mut rng, 20, 5).unwrap();
            let scfg = SynthConfig {
                source_tasks: 8,
                val_tasks: 2,
                m: 20,
                signal_count: 5,
                instances: 200,
                class_count,
                noise_std,
                seed,
            };
            let out = synth_generate(&scfg).unwrap();
            draws.push(recovery_precision(&picks, &out.truth["target"].signal));
        }
        rand_ps.push(draws.iter().sum::<f64>() / draws.len() as f64);
    }
    println!("== random: median prec={:.3}", median(&mut rand_ps));
}
