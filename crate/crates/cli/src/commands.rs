//! Subcommand implementations. Exit codes: 0 success, 1 certification
//! violation, 2 config/usage error, 3 aborted run.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};

use ma2ml_core::oracle::{multi_objective_reward, RewardOracle};
use ma2ml_core::space::JointSpace;
use ma2ml_core::trainer::{RunRecord, Trainer, TrainerError, Variant};
use ma2ml_core::verify;

use crate::config::{load_run_config, Overrides, ResolvedRun};
use crate::runio::{
    config_hash, fingerprint_hex, now_unix, ArtifactPaths, RunDir, RunManifest,
};

fn build_oracle(run: &ResolvedRun) -> Result<Box<dyn RewardOracle>> {
    run.config
        .oracle
        .build(&run.space, run.hyperparams.seed, &run.config_dir)
}

fn manifest_for(run: &ResolvedRun, space_path: &Path) -> RunManifest {
    RunManifest {
        config_hash: config_hash(&run.config),
        space_fingerprint: fingerprint_hex(&run.space),
        seed: run.hyperparams.seed,
        variant: run.config.variant,
        max_iter: run.hyperparams.max_iter,
        created_unix: now_unix(),
        finished_unix: None,
        resolved_config: run.config.clone(),
        space_path: space_path.display().to_string(),
        artifacts: ArtifactPaths::in_dir(),
    }
}

/// Drives a trainer to `limit`, writing artifacts on both clean stops and
/// aborts. Returns the process exit code.
fn drive(
    trainer: &mut Trainer,
    run_dir: &RunDir,
    mut manifest: RunManifest,
    limit: usize,
    checkpoint_every: Option<usize>,
) -> Result<i32> {
    let space = trainer.space;
    let every = checkpoint_every.unwrap_or(0);
    let outcome = loop {
        if trainer.iteration >= limit.min(trainer.hp.max_iter) {
            break Ok(());
        }
        match trainer.run_iteration() {
            Ok(()) => {
                if every > 0 && trainer.iteration.is_multiple_of(every) {
                    run_dir.write_checkpoint(&trainer.checkpoint())?;
                }
            }
            Err(e) => break Err(e),
        }
    };
    match outcome {
        Ok(()) => {
            let complete = trainer.iteration >= trainer.hp.max_iter;
            if complete {
                trainer.finalize_topk();
                manifest.finished_unix = Some(now_unix());
            }
            run_dir.write_logs(&trainer.record, space)?;
            run_dir.write_checkpoint(&trainer.checkpoint())?;
            run_dir.write_manifest(&manifest)?;
            if let Some(best) = trainer.record.best_reward() {
                println!(
                    "{} iterations, {} evaluations, best reward {best}",
                    trainer.iteration,
                    trainer.record.evals.len()
                );
            } else {
                println!("{} iterations, no successful evaluations", trainer.iteration);
            }
            Ok(0)
        }
        Err(TrainerError::PersistentOracleFailure(iter)) => {
            run_dir.write_logs(&trainer.record, space)?;
            run_dir.write_checkpoint(&trainer.checkpoint())?;
            run_dir.write_manifest(&manifest)?;
            eprintln!("aborted at iteration {iter}: oracle failed more than half of the batch for 3 consecutive iterations");
            Ok(3)
        }
        Err(e) => Err(e.into()),
    }
}

pub fn search(config_path: &Path, overrides: &Overrides, stop_after: Option<usize>) -> Result<i32> {
    let run = load_run_config(config_path, overrides)?;
    let oracle = build_oracle(&run)?;
    let space_path = crate::config::resolve_path(&run.config_dir, &run.config.space_ref);
    let mut trainer = Trainer::new(
        &run.space,
        oracle.as_ref(),
        run.config.variant,
        run.hyperparams.clone(),
        run.config.reward,
    )?;
    let run_dir = RunDir::create(&run.out_dir)?;
    let manifest = manifest_for(&run, &space_path);
    // the manifest lands before any artifact mutation
    run_dir.write_manifest(&manifest)?;
    let limit = stop_after.unwrap_or(run.hyperparams.max_iter);
    drive(
        &mut trainer,
        &run_dir,
        manifest,
        limit,
        run.config.checkpoint_every,
    )
}

pub fn resume(manifest_path: &Path, stop_after: Option<usize>) -> Result<i32> {
    let (dir, manifest) = RunDir::read_manifest(manifest_path)?;
    if config_hash(&manifest.resolved_config) != manifest.config_hash {
        bail!("manifest config hash mismatch; the manifest was edited");
    }
    let space_text = std::fs::read_to_string(&manifest.space_path)
        .with_context(|| format!("reading space config {}", manifest.space_path))?;
    let space = JointSpace::parse(&space_text)?;
    if fingerprint_hex(&space) != manifest.space_fingerprint {
        bail!(
            "space fingerprint mismatch: {} changed since the run started",
            manifest.space_path
        );
    }
    let hyperparams = manifest
        .resolved_config
        .hyperparams
        .merge_into(ma2ml_core::trainer::Hyperparams::default())?;
    let run = ResolvedRun {
        config_dir: Path::new(&manifest.space_path)
            .parent()
            .unwrap_or(Path::new("."))
            .to_path_buf(),
        space: space.clone(),
        hyperparams: hyperparams.clone(),
        out_dir: dir.clone(),
        config: manifest.resolved_config.clone(),
    };
    let oracle = build_oracle(&run)?;
    let run_dir = RunDir::create(&dir)?;
    let ckpt = run_dir.read_checkpoint()?;
    let mut trainer = Trainer::restore(
        &space,
        oracle.as_ref(),
        hyperparams.clone(),
        manifest.resolved_config.reward,
        ckpt,
    )?;
    let limit = stop_after.unwrap_or(hyperparams.max_iter);
    drive(
        &mut trainer,
        &run_dir,
        manifest,
        limit,
        run.config.checkpoint_every,
    )
}

fn best_so_far_curve(record: &RunRecord) -> Vec<(usize, f64)> {
    let mut best = f64::NEG_INFINITY;
    let mut out = Vec::new();
    for (i, eval) in record.evals.iter().enumerate() {
        if let Some(r) = eval.reward {
            best = best.max(r);
        }
        out.push((i + 1, best));
    }
    out
}

fn evals_to_threshold(record: &RunRecord, threshold: f64) -> Option<usize> {
    for (i, eval) in record.evals.iter().enumerate() {
        if eval.reward.is_some_and(|r| r >= threshold) {
            return Some(i + 1);
        }
    }
    None
}

pub fn compare(
    config_path: &Path,
    overrides: &Overrides,
    variants: &str,
    seeds: u64,
    threshold_flag: Option<f64>,
) -> Result<i32> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let variants: Vec<Variant> = variants
        .split(',')
        .map(|v| match v.trim() {
            "ma2ml" => Ok(Variant::Ma2ml),
            "lite" => Ok(Variant::Lite),
            "onpolicy" => Ok(Variant::Onpolicy),
            other => bail!("unknown variant `{other}`"),
        })
        .collect::<Result<_>>()?;
    if variants.is_empty() {
        bail!("need at least one variant");
    }
    let base = load_run_config(config_path, overrides)?;
    let run_dir = RunDir::create(&base.out_dir)?;
    let base_seed = base.hyperparams.seed;

    let mut curves = String::from("variant,seed,iteration,evals,batch_mean,best_so_far\n");
    // per variant, per seed: (final top-k mean, evals to threshold)
    let mut stats: Vec<Vec<(f64, Option<usize>)>> = vec![Vec::new(); variants.len()];

    for s in 0..seeds {
        let seed = base_seed + s;
        let mut run = ResolvedRun {
            config: base.config.clone(),
            config_dir: base.config_dir.clone(),
            space: base.space.clone(),
            hyperparams: base.hyperparams.clone(),
            out_dir: base.out_dir.clone(),
        };
        run.hyperparams.seed = seed;
        let oracle = build_oracle(&run)?;

        let threshold = match threshold_flag {
            Some(t) => Some(t),
            None => enumerated_threshold(&run, oracle.as_ref())?,
        };

        for (vi, &variant) in variants.iter().enumerate() {
            let mut trainer = Trainer::new(
                &run.space,
                oracle.as_ref(),
                variant,
                run.hyperparams.clone(),
                run.config.reward,
            )?;
            let record = trainer.run_search()?.clone();
            let curve = best_so_far_curve(&record);
            for summary in &record.summaries {
                let evals = (summary.iteration + 1) * run.hyperparams.batch_size;
                let best = curve
                    .get(evals.min(curve.len()).saturating_sub(1))
                    .map(|&(_, b)| b)
                    .unwrap_or(f64::NEG_INFINITY);
                curves.push_str(&format!(
                    "{variant},{seed},{},{evals},{},{}\n",
                    summary.iteration,
                    summary
                        .mean_reward
                        .map(|v| v.to_string())
                        .unwrap_or_default(),
                    if best.is_finite() {
                        best.to_string()
                    } else {
                        String::new()
                    },
                ));
            }
            let topk_mean = record.topk_mean_reward().unwrap_or(f64::NAN);
            let e2t = threshold.and_then(|t| evals_to_threshold(&record, t));
            stats[vi].push((topk_mean, e2t));
        }
    }

    std::fs::write(run_dir.path("compare_curves.csv"), curves)?;

    let mut summary =
        String::from("variant,seeds,mean_final_topk,median_evals_to_threshold,win_rate_vs_first\n");
    for (vi, variant) in variants.iter().enumerate() {
        let topk: Vec<f64> = stats[vi].iter().map(|(t, _)| *t).collect();
        let mean_topk = topk.iter().sum::<f64>() / topk.len() as f64;
        let mut e2ts: Vec<usize> = stats[vi].iter().filter_map(|(_, e)| *e).collect();
        e2ts.sort_unstable();
        let median = if e2ts.is_empty() {
            String::new()
        } else {
            e2ts[e2ts.len() / 2].to_string()
        };
        let wins = stats[vi]
            .iter()
            .zip(&stats[0])
            .filter(|((t, _), (t0, _))| t >= t0)
            .count();
        summary.push_str(&format!(
            "{variant},{seeds},{mean_topk},{median},{}\n",
            wins as f64 / seeds as f64
        ));
    }
    std::fs::write(run_dir.path("compare_summary.csv"), &summary)?;
    print!("{summary}");
    Ok(0)
}

/// 95% of the enumerated optimum reward, when enumeration is feasible.
fn enumerated_threshold(run: &ResolvedRun, oracle: &dyn RewardOracle) -> Result<Option<f64>> {
    let Some(total) = run.space.joint_cardinality() else {
        return Ok(None);
    };
    if total > 200_000 || matches!(run.config.oracle, crate::config::OracleConfig::Exec { .. }) {
        return Ok(None);
    }
    let mut best = f64::NEG_INFINITY;
    for action in run.space.enumerate_actions() {
        let res = oracle.evaluate(&run.space, &action);
        if res.failed {
            continue;
        }
        let reward = match &run.config.reward {
            Some(spec) => match multi_objective_reward(&res, spec) {
                Ok(r) => r,
                Err(_) => continue,
            },
            None => res.accuracy,
        };
        best = best.max(reward);
    }
    Ok(best.is_finite().then_some(0.95 * best))
}

pub fn certify(
    lambda: f64,
    agents: usize,
    actions: usize,
    iterations: usize,
    seeds: u64,
    sweeps: usize,
    out: Option<&Path>,
) -> Result<i32> {
    if lambda <= 0.0 {
        bail!("--lambda must be > 0 (the iteration tilts by exp(q/lambda))");
    }
    if agents == 0 || actions < 2 {
        bail!("need at least one agent with at least two actions");
    }
    let sizes = vec![actions; agents];
    let seed_list: Vec<u64> = (0..seeds).collect();
    let report = verify::certify_monotone(&sizes, lambda, iterations, &seed_list, sweeps)?;

    let mut csv = String::from("seed,k,j_init,j_reg,kl_to_previous,gap_to_optimum\n");
    for step in &report.steps {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            step.seed, step.k, step.j_init, step.j_reg, step.kl_to_previous, step.gap_to_optimum
        ));
    }
    if let Some(path) = out {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, &csv)?;
    }

    for seed in &report.seeds {
        println!(
            "seed {}: J {:.6} delta {:.3e} converged {} gap/range {:.4}",
            seed.seed, seed.final_j_init, seed.final_delta, seed.converged, seed.normalized_gap
        );
    }
    // exit status reflects the guarantee under certification (monotone
    // improvement); convergence is reported per seed, since at huge lambda
    // the increment decays on the 1/lambda timescale
    let ok = report.all_monotone();
    if !report.violations.is_empty() {
        for v in &report.violations {
            eprintln!(
                "violation: seed {} step {}: J {} -> {}",
                v.seed, v.k, v.j_prev, v.j_next
            );
        }
    }
    println!(
        "{}/{} seeds monotone and converged (lambda {lambda}, {agents} agents x {actions} actions, {iterations} iterations)",
        report.seeds.iter().filter(|s| s.converged).count(),
        seeds
    );
    Ok(if ok { 0 } else { 1 })
}

pub fn worker(space_path: &Path, oracle_flag: &str, oracle_seed: u64) -> Result<i32> {
    let space_text = std::fs::read_to_string(space_path)
        .with_context(|| format!("reading space config {space_path:?}"))?;
    let space = JointSpace::parse(&space_text)?;
    let oracle_cfg = crate::config::OracleConfig::from_flag(oracle_flag)?;
    if matches!(oracle_cfg, crate::config::OracleConfig::Exec { .. }) {
        bail!("the worker serves in-process oracles; exec would recurse");
    }
    let config_dir = space_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let oracle = oracle_cfg.build(&space, oracle_seed, &config_dir)?;
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    ma2ml_core::oracle::serve_requests(&space, &*oracle, stdin.lock(), stdout.lock())?;
    std::io::stdout().flush()?;
    Ok(0)
}
