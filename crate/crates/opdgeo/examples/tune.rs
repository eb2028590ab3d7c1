//! Scratch harness for tuning toylab hyperparameters. Not part of the
//! shipped API; run with `cargo run --release --example tune -- <what>`.

use std::time::Instant;

use opdgeo::toylab::{
    evaluate, make_base, make_teacher, train, PolicyConfig, SyntheticTask, TaskConfig,
    TeacherConfig, TrainConfig, TrainMode,
};

fn main() {
    let what = std::env::args().nth(1).unwrap_or_else(|| "teacher".into());
    let task = SyntheticTask::new(TaskConfig::default()).unwrap();
    match what.as_str() {
        "teacher" => {
            for (lr, clip) in [(0.5, 1.0), (0.7, 1.0), (1.0, 1.0), (0.7, 2.0), (1.0, 2.0)] {
                for seed in [101u64, 102, 103] {
                    let cfg = TeacherConfig {
                        lr,
                        seed,
                        clip_norm: clip,
                        max_steps: 6000,
                        ..TeacherConfig::default()
                    };
                    let t0 = Instant::now();
                    match make_teacher(&task, &cfg) {
                        Ok(teacher) => {
                            let all: Vec<Vec<usize>> =
                                task.patterns().iter().map(|p| p.prompt.clone()).collect();
                            let rep = evaluate(&teacher, &task, None, &all, 0).unwrap();
                            println!(
                                "lr={lr} clip={clip} seed={seed}: OK acc={:.3} in {:?}",
                                rep.accuracy,
                                t0.elapsed()
                            );
                        }
                        Err(e) => println!(
                            "lr={lr} clip={clip} seed={seed}: FAIL {e} after {:?}",
                            t0.elapsed()
                        ),
                    }
                }
            }
        }
        "students" => {
            let t0 = Instant::now();
            let teacher = make_teacher(&task, &TeacherConfig::default()).unwrap();
            let trep = evaluate(&teacher, &task, None, &task.test_prompts(), 0).unwrap();
            println!("teacher acc={:.3} in {:?}", trep.accuracy, t0.elapsed());
            let target: f64 = std::env::args()
                .nth(2)
                .and_then(|s| s.parse().ok())
                .unwrap_or(0.35);
            let t0 = Instant::now();
            let base = make_base(&task, PolicyConfig::default(), 7, target).unwrap();
            let brep = evaluate(&base, &task, Some(&teacher), &task.test_prompts(), 0).unwrap();
            println!(
                "base(target {target}) acc={:.3} kl={:.3} in {:?}",
                brep.accuracy,
                brep.mean_kl.unwrap(),
                t0.elapsed()
            );
            for (mode, lr, batch, steps) in [
                (TrainMode::Opd, 0.02, 256, 900),
                (TrainMode::Opd, 0.03, 256, 900),
                (TrainMode::Rl, 0.05, 256, 600),
            ] {
                for seed in [11u64, 12, 13] {
                    let cfg =
                        TrainConfig { mode, lr, batch, steps, seed, ..TrainConfig::default() };
                    let t0 = Instant::now();
                    match train(&task, &base, Some(&teacher), &cfg) {
                        Ok(run) => {
                            let m = run.metrics.last().unwrap();
                            let crossing = run
                                .metrics
                                .iter()
                                .find(|m| m.accuracy >= 0.8)
                                .map(|m| (m.step, (m.delta_norm * 1e3).round() / 1e3));
                            let curve: Vec<f64> = run
                                .metrics
                                .iter()
                                .filter(|m| m.step % 100 == 0)
                                .map(|m| m.accuracy)
                                .collect();
                            println!(
                                "{mode} lr={lr} steps={steps} seed={seed}: acc={:.3} kl={:?} dnorm={:.3} cross@{:?} curve={curve:?} in {:?}",
                                m.accuracy,
                                m.kl_to_teacher.map(|k| (k * 1e3).round() / 1e3),
                                m.delta_norm,
                                crossing,
                                t0.elapsed()
                            );
                        }
                        Err(e) => println!(
                            "{mode} lr={lr} steps={steps} seed={seed}: FAIL {e} after {:?}",
                            t0.elapsed()
                        ),
                    }
                }
            }
        }
        "effopd" => {
            use opdgeo::effopd::{run_effopd, ScoreKind, TaskValidator, ValidationSet};
            use opdgeo::toylab::ToyTrainer;
            let kind = match std::env::args().nth(2).as_deref() {
                Some("acc") => ScoreKind::Accuracy,
                _ => ScoreKind::NegKlToTeacher,
            };
            let teacher = make_teacher(&task, &TeacherConfig::default()).unwrap();
            let base = make_base(&task, PolicyConfig::default(), 7, 0.35).unwrap();
            let steps = 600usize;
            let mut speedups = Vec::new();
            for seed in [11u64, 12, 13, 14, 15] {
                let cfg = TrainConfig { seed, steps, ..TrainConfig::for_mode(TrainMode::Opd) };
                let vset = ValidationSet::sample(&task, kind, seed).unwrap();
                let validator = TaskValidator { task: &task, set: &vset, teacher: Some(&teacher) };

                let t0 = Instant::now();
                let vanilla = train(&task, &base, Some(&teacher), &cfg).unwrap();
                let vanilla_secs = t0.elapsed().as_secs_f64();

                let t0 = Instant::now();
                let mut trainer = ToyTrainer::new(&task, &base, Some(&teacher), &cfg).unwrap();
                let eff = run_effopd(&mut trainer, steps, &validator).unwrap();
                let eff_secs = t0.elapsed().as_secs_f64();

                // Criterion curves: held-out greedy accuracy per step.
                let v_curve: Vec<f64> = vanilla.metrics.iter().map(|m| m.accuracy).collect();
                let e_curve: Vec<f64> = eff.run.metrics.iter().map(|m| m.accuracy).collect();
                let converged = *v_curve.last().unwrap();
                let target = converged - 0.02;
                let hit = |curve: &[f64]| {
                    curve.iter().position(|a| *a >= target).map(|i| i + 1)
                };
                let v_hit = hit(&v_curve);
                let e_hit = hit(&e_curve);
                let ks: Vec<u8> = eff.events.iter().map(|e| e.accepted_k).collect();
                let speedup = match (v_hit, e_hit) {
                    (Some(v), Some(e)) => v as f64 / e as f64,
                    _ => f64::NAN,
                };
                speedups.push(speedup);
                println!(
                    "seed {seed}: converged={converged:.3} eff_final={:.3} vanilla_hit={v_hit:?} eff_hit={e_hit:?} speedup={speedup:.2} accepted_k={ks:?} ({vanilla_secs:.1}s + {eff_secs:.1}s)",
                    e_curve.last().unwrap()
                );
            }
            speedups.sort_by(f64::total_cmp);
            println!("median speedup: {:.2}", speedups[speedups.len() / 2]);
        }
        "effopd2" => {
            use opdgeo::effopd::{run_effopd, ScoreKind, TaskValidator, Validate, ValidationSet};
            use opdgeo::toylab::ToyTrainer;
            let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.005);
            let steps: usize =
                std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(1200);
            let kind = match std::env::args().nth(4).as_deref() {
                Some("kl") => ScoreKind::NegKlToTeacher,
                _ => ScoreKind::Accuracy,
            };
            let teacher = make_teacher(&task, &TeacherConfig::default()).unwrap();
            let base = make_base(&task, PolicyConfig::default(), 7, 0.35).unwrap();
            let mut speedups = Vec::new();
            for seed in [11u64, 12, 13] {
                let cfg =
                    TrainConfig { seed, steps, lr, ..TrainConfig::for_mode(TrainMode::Opd) };
                let vset = ValidationSet::sample(&task, kind, seed).unwrap();
                let acc_set = ValidationSet::sample(&task, ScoreKind::Accuracy, seed).unwrap();
                let validator = TaskValidator { task: &task, set: &vset, teacher: Some(&teacher) };
                let acc_scorer =
                    TaskValidator { task: &task, set: &acc_set, teacher: Some(&teacher) };

                // Vanilla arm: bare stepping, score validation accuracy per step.
                // Vanilla arm. Same functional for both arms: validation-set
                // accuracy when the validator is accuracy, held-out metrics
                // accuracy otherwise.
                let t0 = Instant::now();
                let mut v_curve = Vec::with_capacity(steps);
                if matches!(kind, ScoreKind::Accuracy) {
                    let mut trainer =
                        ToyTrainer::new(&task, &base, Some(&teacher), &cfg).unwrap();
                    for _ in 0..steps {
                        trainer.step().unwrap();
                        v_curve.push(acc_scorer.score(trainer.policy()).unwrap());
                    }
                } else {
                    let run = train(&task, &base, Some(&teacher), &cfg).unwrap();
                    v_curve.extend(run.metrics.iter().map(|m| m.accuracy));
                }
                let vanilla_secs = t0.elapsed().as_secs_f64();

                // EffOPD arm.
                let t0 = Instant::now();
                let mut trainer = ToyTrainer::new(&task, &base, Some(&teacher), &cfg).unwrap();
                let eff = run_effopd(&mut trainer, steps, &validator).unwrap();
                let eff_secs = t0.elapsed().as_secs_f64();
                let e_curve: Vec<f64> = if matches!(kind, ScoreKind::Accuracy) {
                    eff.validation_curve.iter().map(|s| s.unwrap()).collect()
                } else {
                    eff.run.metrics.iter().map(|m| m.accuracy).collect()
                };

                let converged = *v_curve.last().unwrap();
                let late = v_curve[steps * 4 / 5];
                let target = converged - 0.02;
                let hit =
                    |c: &[f64]| c.iter().position(|a| *a >= target).map(|i| i + 1);
                let (v_hit, e_hit) = (hit(&v_curve), hit(&e_curve));
                let ks: Vec<u8> = eff.events.iter().map(|e| e.accepted_k).collect();
                let speedup = match (v_hit, e_hit) {
                    (Some(v), Some(e)) => v as f64 / e as f64,
                    _ => f64::NAN,
                };
                speedups.push(speedup);
                println!(
                    "seed {seed}: converged={converged:.3} (at80%={late:.3}) eff_final={:.3} vanilla_hit={v_hit:?} eff_hit={e_hit:?} speedup={speedup:.2} k={ks:?} ({vanilla_secs:.0}s+{eff_secs:.0}s)",
                    e_curve.last().unwrap()
                );
            }
            speedups.sort_by(f64::total_cmp);
            println!("median speedup: {:.2}", speedups[speedups.len() / 2]);
        }
        "effopd4" => {
            // KL validator steers acceptance; hits measured on validation-set
            // accuracy for both arms (the literal target metric).
            use opdgeo::effopd::{
                extrapolate_and_select, ScoreKind, TaskValidator, Validate, ValidationSet,
            };
            use opdgeo::toylab::ToyTrainer;
            use std::collections::BTreeMap;
            let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.005);
            let steps: usize =
                std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(1200);
            let teacher = make_teacher(&task, &TeacherConfig::default()).unwrap();
            let base = make_base(&task, PolicyConfig::default(), 7, 0.35).unwrap();
            let mut speedups = Vec::new();
            for seed in [11u64, 12, 13, 14, 15] {
                let cfg =
                    TrainConfig { seed, steps, lr, ..TrainConfig::for_mode(TrainMode::Opd) };
                let kl_set =
                    ValidationSet::sample(&task, ScoreKind::NegKlToTeacher, seed).unwrap();
                let acc_set = ValidationSet::sample(&task, ScoreKind::Accuracy, seed).unwrap();
                let validator =
                    TaskValidator { task: &task, set: &kl_set, teacher: Some(&teacher) };
                let acc_scorer =
                    TaskValidator { task: &task, set: &acc_set, teacher: Some(&teacher) };

                let t0 = Instant::now();
                let mut v_curve = Vec::with_capacity(steps);
                let mut trainer = ToyTrainer::new(&task, &base, Some(&teacher), &cfg).unwrap();
                for _ in 0..steps {
                    trainer.step().unwrap();
                    v_curve.push(acc_scorer.score(trainer.policy()).unwrap());
                }
                let vanilla_secs = t0.elapsed().as_secs_f64();

                let t0 = Instant::now();
                let mut trainer = ToyTrainer::new(&task, &base, Some(&teacher), &cfg).unwrap();
                let mut history = BTreeMap::new();
                history.insert(0usize, trainer.policy().clone());
                let mut e_curve = Vec::with_capacity(steps);
                let mut ks = Vec::new();
                for step in 1..=steps {
                    trainer.step().unwrap();
                    if step.is_power_of_two() {
                        let n = step.trailing_zeros();
                        let prev = if n == 0 { 0 } else { 1usize << (n - 1) };
                        let delta = trainer.policy().delta_from(&history[&prev]).unwrap();
                        let (accepted, ev) =
                            extrapolate_and_select(trainer.policy(), &delta, &validator);
                        trainer.set_policy(accepted).unwrap();
                        history.insert(step, trainer.policy().clone());
                        ks.push(ev.accepted_k);
                    }
                    e_curve.push(acc_scorer.score(trainer.policy()).unwrap());
                }
                let eff_secs = t0.elapsed().as_secs_f64();

                let converged = *v_curve.last().unwrap();
                let target = converged - 0.02;
                let hit = |c: &[f64]| c.iter().position(|a| *a >= target).map(|i| i + 1);
                let (v_hit, e_hit) = (hit(&v_curve), hit(&e_curve));
                let speedup = match (v_hit, e_hit) {
                    (Some(v), Some(e)) => v as f64 / e as f64,
                    _ => f64::NAN,
                };
                speedups.push(speedup);
                println!(
                    "seed {seed}: converged={converged:.3} eff_final={:.3} vanilla_hit={v_hit:?} eff_hit={e_hit:?} speedup={speedup:.2} k={ks:?} ({vanilla_secs:.0}s+{eff_secs:.0}s)",
                    e_curve.last().unwrap()
                );
            }
            speedups.sort_by(f64::total_cmp);
            println!("median speedup: {:.2}", speedups[speedups.len() / 2]);
        }
        "effopd3" => {
            use opdgeo::effopd::{run_effopd, ScoreKind, TaskValidator, Validate, ValidationSet};
            use opdgeo::toylab::ToyTrainer;
            let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.002);
            let v_steps: usize =
                std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(2500);
            let kind = match std::env::args().nth(4).as_deref() {
                Some("kl") => ScoreKind::NegKlToTeacher,
                _ => ScoreKind::Accuracy,
            };
            let small = PolicyConfig {
                vocab_size: 20,
                context_len: 6,
                d_model: 16,
                hidden: 32,
                layers: 4,
            };
            let t0 = Instant::now();
            let tcfg = TeacherConfig { policy: small.clone(), ..TeacherConfig::default() };
            let teacher = make_teacher(&task, &tcfg).unwrap();
            let trep = evaluate(&teacher, &task, None, &task.test_prompts(), 0).unwrap();
            println!("small teacher acc={:.3} in {:?}", trep.accuracy, t0.elapsed());
            let t0 = Instant::now();
            let base = make_base(&task, small.clone(), 7, 0.35).unwrap();
            let brep = evaluate(&base, &task, Some(&teacher), &task.test_prompts(), 0).unwrap();
            println!(
                "small base acc={:.3} kl={:.3} in {:?}",
                brep.accuracy,
                brep.mean_kl.unwrap(),
                t0.elapsed()
            );
            let mut speedups = Vec::new();
            for seed in [11u64, 12, 13, 14, 15] {
                let cfg =
                    TrainConfig { seed, steps: v_steps, lr, ..TrainConfig::for_mode(TrainMode::Opd) };
                let vset = ValidationSet::sample(&task, kind, seed).unwrap();
                let acc_set = ValidationSet::sample(&task, ScoreKind::Accuracy, seed).unwrap();
                let validator = TaskValidator { task: &task, set: &vset, teacher: Some(&teacher) };
                let acc_scorer =
                    TaskValidator { task: &task, set: &acc_set, teacher: Some(&teacher) };

                // Vanilla arm: bare stepping, validation accuracy per step.
                let t0 = Instant::now();
                let mut trainer = ToyTrainer::new(&task, &base, Some(&teacher), &cfg).unwrap();
                let mut v_curve = Vec::with_capacity(v_steps);
                for _ in 0..v_steps {
                    trainer.step().unwrap();
                    v_curve.push(acc_scorer.score(trainer.policy()).unwrap());
                }
                let vanilla_secs = t0.elapsed().as_secs_f64();

                // EffOPD arm: half the budget.
                let e_steps = v_steps / 2;
                let ecfg = TrainConfig { steps: e_steps, ..cfg.clone() };
                let t0 = Instant::now();
                let mut trainer = ToyTrainer::new(&task, &base, Some(&teacher), &ecfg).unwrap();
                let eff = run_effopd(&mut trainer, e_steps, &validator).unwrap();
                let eff_secs = t0.elapsed().as_secs_f64();
                let e_curve: Vec<f64> = if matches!(kind, ScoreKind::Accuracy) {
                    eff.validation_curve.iter().map(|s| s.unwrap()).collect()
                } else {
                    eff.run
                        .checkpoints
                        .iter()
                        .filter(|(s, _)| *s > 0)
                        .map(|(_, p)| acc_scorer.score(p).unwrap())
                        .collect()
                };

                let converged = *v_curve.last().unwrap();
                let late = v_curve[v_steps * 4 / 5];
                let target = converged - 0.02;
                let hit =
                    |c: &[f64]| c.iter().position(|a| *a >= target).map(|i| i + 1);
                let (v_hit, e_hit) = (hit(&v_curve), hit(&e_curve));
                let ks: Vec<u8> = eff.events.iter().map(|e| e.accepted_k).collect();
                let speedup = match (v_hit, e_hit) {
                    (Some(v), Some(e)) if matches!(kind, ScoreKind::Accuracy) => {
                        v as f64 / e as f64
                    }
                    _ => f64::NAN,
                };
                speedups.push(speedup);
                println!(
                    "seed {seed}: converged={converged:.3} (at80%={late:.3}) vanilla_hit={v_hit:?} eff_hit={e_hit:?} speedup={speedup:.2} k={ks:?} ({vanilla_secs:.0}s+{eff_secs:.0}s)"
                );
            }
            speedups.sort_by(f64::total_cmp);
            println!("median speedup: {:.2}", speedups[speedups.len() / 2]);
        }
        "smallgrid" => {
            let small = PolicyConfig {
                vocab_size: 20,
                context_len: 6,
                d_model: 16,
                hidden: 32,
                layers: 4,
            };
            let tcfg = TeacherConfig { policy: small.clone(), ..TeacherConfig::default() };
            let teacher = make_teacher(&task, &tcfg).unwrap();
            let base = make_base(&task, small.clone(), 7, 0.35).unwrap();
            for lr in [0.005, 0.01, 0.02, 0.04] {
                for seed in [11u64, 12] {
                    let cfg = TrainConfig {
                        seed,
                        steps: 1500,
                        lr,
                        ..TrainConfig::for_mode(TrainMode::Opd)
                    };
                    let t0 = Instant::now();
                    match train(&task, &base, Some(&teacher), &cfg) {
                        Ok(run) => {
                            let m = run.metrics.last().unwrap();
                            let curve: Vec<f64> = run
                                .metrics
                                .iter()
                                .filter(|m| m.step % 250 == 0)
                                .map(|m| m.accuracy)
                                .collect();
                            println!(
                                "lr={lr} seed={seed}: acc={:.3} kl={:.3} curve={curve:?} in {:?}",
                                m.accuracy,
                                m.kl_to_teacher.unwrap(),
                                t0.elapsed()
                            );
                        }
                        Err(e) => println!("lr={lr} seed={seed}: FAIL {e}"),
                    }
                }
            }
        }
        "opdexact" => {
            // Exact expected reverse-KL gradient (enumerate the vocabulary at
            // every context) -- if descent on this reaches KL ~ 0 the sampled
            // estimator is unbiased-but-noisy; if it also stalls the problem
            // is structural.
            use opdgeo::toylab::Grads;
            let teacher = make_teacher(&task, &TeacherConfig::default()).unwrap();
            let base = make_base(&task, PolicyConfig::default(), 7, 0.3).unwrap();
            let prompts = task.test_prompts();
            let mut policy = base.clone();
            for step in 0..=150 {
                if step % 25 == 0 {
                    let rep = evaluate(&policy, &task, Some(&teacher), &prompts, 0).unwrap();
                    println!(
                        "step {step}: acc={:.3} kl={:.4}",
                        rep.accuracy,
                        rep.mean_kl.unwrap()
                    );
                }
                let mut grads = Grads::zeros(policy.config());
                for prompt in &prompts {
                    let cache = policy.forward(prompt).unwrap();
                    let lp_s = cache.log_probs().to_vec();
                    let lp_t = teacher.forward(prompt).unwrap().log_probs().to_vec();
                    // dKL/dlogits for reverse KL at one context:
                    // sum_y p(y) (w(y) - sum_z p(z) w(z)) (e_y - p) collapses
                    // to dlogits[y] = p(y) * (w(y) - Ew).
                    let n = prompts.len() as f64;
                    let w: Vec<f64> =
                        lp_s.iter().zip(&lp_t).map(|(s, t)| s - t).collect();
                    let ew: f64 =
                        lp_s.iter().zip(&w).map(|(s, wv)| s.exp() * wv).sum();
                    let dlogits: Vec<f64> = lp_s
                        .iter()
                        .zip(&w)
                        .map(|(s, wv)| s.exp() * (wv - ew) / n)
                        .collect();
                    policy.backward(&cache, &dlogits, &mut grads);
                }
                policy = policy.apply_grads(&grads, 0.1).unwrap();
            }
        }
        other => eprintln!("unknown probe {other}"),
    }
}
