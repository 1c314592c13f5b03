//! One function per subcommand. Each writes its artifacts under `out` and
//! returns the JSON summary it also stores there.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use bgk_core::ansatz::{Architecture, MicroMacroAnsatz};
use bgk_core::counterexamples::{
    kappa_threshold, log_log_slope, maxwellian_l2_distance, sweep_family1, sweep_family2,
    HomogeneousProblem, PerturbationSpec, SweepRow,
};
use bgk_core::maxwellian::MacroState;
use bgk_core::reference_solver::{macro_csv, solve_1d, solve_homogeneous_general, GridSolution};
use bgk_core::residuals_loss::ProblemSpec;
use bgk_core::trainer::{
    config_hash, evaluate, evaluate_values, history_csv, train, EvalReport, TrainConfig,
};
use bgk_core::weights::{integrability_check, Verdict, WeightFunction};

use crate::config::{
    CheckWeightConfig, CounterexampleConfig, EvaluateConfig, Prediction, ReferenceConfig,
    ReferenceSettings, SweepConfig, TrainCmdConfig,
};
use crate::CliError;

/// Output directory plus the hash stamped on every artifact.
pub struct Outputs {
    dir: PathBuf,
    hash: String,
}

impl Outputs {
    pub fn new<T: Serialize>(dir: &Path, config: &T) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let out = Self {
            dir: dir.to_path_buf(),
            hash: config_hash(config),
        };
        out.json(
            "config.json",
            &serde_json::to_value(config).expect("config serializes"),
        )?;
        Ok(out)
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `body` (header row first) after a `# config_hash=` line.
    pub fn csv(&self, name: &str, body: &str) -> Result<(), CliError> {
        let p = self.path(name);
        fs::write(&p, format!("# config_hash={}\n{body}", self.hash))
            .map_err(|e| CliError::io(&p, e))
    }

    pub fn json(&self, name: &str, v: &Value) -> Result<(), CliError> {
        let p = self.path(name);
        let text = serde_json::to_string_pretty(v).expect("json value");
        fs::write(&p, text + "\n").map_err(|e| CliError::io(&p, e))
    }
}

/// Summary and whether every asserted property held.
pub struct Outcome {
    pub summary: Value,
    pub passed: bool,
}

pub fn counterexample(cfg: &CounterexampleConfig, out: &Outputs) -> Result<Outcome, CliError> {
    if !matches!(cfg.family, 1 | 2) {
        return Err(CliError::config(format!(
            "family must be 1 or 2, got {}",
            cfg.family
        )));
    }
    if cfg.epsilons.len() < 2 {
        return Err(CliError::config("need at least two epsilons for a slope"));
    }
    for &e in &cfg.epsilons {
        PerturbationSpec::new(e)?;
    }
    if !(cfg.slope_tolerance >= 0.0) {
        return Err(CliError::config("slope_tolerance must be non-negative"));
    }
    let problem = HomogeneousProblem::default().with_terminal_time(cfg.terminal_time)?;
    let rows = match cfg.family {
        1 => sweep_family1(
            &cfg.epsilons,
            &problem,
            cfg.lambda_ini,
            &cfg.weight,
            cfg.t_eval,
        )?,
        _ => sweep_family2(&cfg.epsilons, &problem, &cfg.weight, cfg.t_eval)?,
    };

    let eps: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
    let loss: Vec<f64> = rows.iter().map(|r| r.standard_loss).collect();
    let slope = log_log_slope(&eps, &loss);
    let slope_ok = (slope - 2.0).abs() <= cfg.slope_tolerance;

    let floor = match cfg.family {
        1 => {
            // The ε → 0 limit of the Maxwellian gap.
            let unit = MacroState::new(1.0, [0.0; 3], 1.0)?;
            let limit = MacroState::new(1.0, [0.0; 3], 4.0 / 3.0)?;
            0.5 * (1.0 - (-cfg.t_eval).exp()) * maxwellian_l2_distance(&limit, &unit)
        }
        _ => kappa_threshold(cfg.terminal_time, cfg.t_eval),
    };
    let mut by_eps: Vec<&SweepRow> = rows.iter().collect();
    by_eps.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
    // The claims hold for sufficiently small ε: the rows above the floor must
    // form a non-empty tail of the sweep.
    let above: Vec<bool> = by_eps.iter().map(|r| r.error_or_bound > floor).collect();
    let first = above.iter().position(|&a| a);
    let floor_ok = first.is_some_and(|k| above[k..].iter().all(|&a| a));
    let floor_from = first.filter(|_| floor_ok).map(|k| by_eps[k].epsilon);

    let growth_ok = by_eps
        .windows(2)
        .all(|p| p[1].weighted_loss > p[0].weighted_loss);

    let mut csv =
        String::from("epsilon,standard_loss,weighted_loss,error_or_bound,maxwellian_gap\n");
    for r in &rows {
        let gap = r.maxwellian_gap.map(|g| g.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epsilon, r.standard_loss, r.weighted_loss, r.error_or_bound, gap
        ));
    }
    out.csv(&format!("counterexample{}.csv", cfg.family), &csv)?;

    let passed = slope_ok && floor_ok && growth_ok;
    let summary = json!({
        "family": cfg.family,
        "config_hash": out.hash(),
        "loss_slope": slope,
        "loss_slope_ok": slope_ok,
        "error_floor": floor,
        "error_floor_ok": floor_ok,
        "error_floor_holds_from_epsilon": floor_from,
        "weighted_growth_ok": growth_ok,
        "passed": passed,
    });
    out.json(&format!("counterexample{}.json", cfg.family), &summary)?;
    Ok(Outcome { summary, passed })
}

pub fn check_weight(cfg: &CheckWeightConfig, out: &Outputs) -> Result<Outcome, CliError> {
    let rep = integrability_check(&cfg.weight, cfg.decay, &cfg.radii)?;
    out.csv("check_weight.csv", &rep.to_csv())?;
    let passed = rep.verdict == Verdict::Finite;
    let summary = json!({
        "config_hash": out.hash(),
        "weight": cfg.weight,
        "verdict": rep.verdict,
        "numeric_verdict": rep.numeric_verdict,
        "tail_exponent": rep.tail_exponent,
        "passed": passed,
    });
    out.json("check_weight.json", &summary)?;
    Ok(Outcome { summary, passed })
}

fn solve_reference(
    problem: &ProblemSpec,
    s: &ReferenceSettings,
    times: &[f64],
) -> Result<GridSolution, CliError> {
    let grid = s.velocity.build()?;
    let sol = match problem.spatial_dim {
        0 => {
            problem.validate()?;
            let f0 = grid.tabulate(|v| problem.f0(&[0.0; 3], v));
            solve_homogeneous_general(&f0, &grid, problem.kn, times)?
        }
        1 => solve_1d(problem, s.nx, &grid, s.dt, times)?,
        d => {
            return Err(CliError::config(format!(
                "no reference solver for spatial_dim {d}"
            )))
        }
    };
    Ok(sol)
}

pub fn reference(cfg: &ReferenceConfig, out: &Outputs) -> Result<Outcome, CliError> {
    let started = Instant::now();
    let sol = solve_reference(&cfg.problem, &cfg.solver, &cfg.snapshots)?;
    let archive = out.path("reference.bgksol");
    sol.write_archive(&archive)?;
    out.csv("reference_macro.csv", &macro_csv(&sol)?)?;
    let summary = json!({
        "config_hash": out.hash(),
        "archive": archive,
        "nx": sol.nx(),
        "velocity_points": sol.grid.len(),
        "times": sol.times,
        "problem_hash": sol.meta.problem_hash,
        "runtime_seconds": started.elapsed().as_secs_f64(),
    });
    out.json("reference.json", &summary)?;
    Ok(Outcome {
        summary,
        passed: true,
    })
}

fn read_reference(path: &str) -> Result<GridSolution, CliError> {
    let p = Path::new(path);
    if !p.exists() {
        return Err(CliError::new(
            "missing_reference",
            format!("no reference archive at {path}"),
        ));
    }
    Ok(GridSolution::read_archive(p)?)
}

fn architecture_for(problem: &ProblemSpec, arch: &Option<Architecture>) -> Architecture {
    arch.clone()
        .unwrap_or_else(|| Architecture::for_problem(problem))
}

fn train_one(
    problem: &ProblemSpec,
    arch: &Architecture,
    train_cfg: &TrainConfig,
) -> Result<(MicroMacroAnsatz, Vec<bgk_core::trainer::HistoryRow>, f64), CliError> {
    let started = Instant::now();
    let init = MicroMacroAnsatz::init(arch.clone(), train_cfg.seed)?;
    let (model, history) = train(problem, &init, train_cfg)?;
    Ok((model, history, started.elapsed().as_secs_f64()))
}

pub fn train_cmd(cfg: &TrainCmdConfig, out: &Outputs) -> Result<Outcome, CliError> {
    let arch = architecture_for(&cfg.problem, &cfg.architecture);
    // Fail on a bad reference before spending time on training.
    let reference = cfg
        .evaluate
        .as_ref()
        .map(|e| read_reference(&e.reference))
        .transpose()?;
    let (model, history, runtime) = train_one(&cfg.problem, &arch, &cfg.train)?;
    model.save(&out.path("checkpoint.json"))?;
    out.csv("history.csv", &history_csv(&history))?;
    let mut summary = json!({
        "config_hash": out.hash(),
        "architecture_hash": arch.hash(),
        "param_count": model.param_count(),
        "iterations": history.len(),
        "final_losses": history.last(),
        "runtime_seconds": runtime,
    });
    if let (Some(e), Some(r)) = (&cfg.evaluate, &reference) {
        let mut rep = evaluate(&model, r, &r.grid, e.t)?;
        rep.config_hash = Some(out.hash().to_string());
        rep.final_losses = history.last().copied();
        out.json(
            "eval.json",
            &serde_json::to_value(&rep).expect("report serializes"),
        )?;
        summary["evaluation"] = serde_json::to_value(&rep).expect("report serializes");
    }
    out.json("train.json", &summary)?;
    Ok(Outcome {
        summary,
        passed: true,
    })
}

pub fn evaluate_cmd(cfg: &EvaluateConfig, out: &Outputs) -> Result<Outcome, CliError> {
    let reference = read_reference(&cfg.reference)?;
    let grid = match &cfg.velocity {
        Some(g) => g.build()?,
        None => reference.grid.clone(),
    };
    let mut rep: EvalReport = match &cfg.prediction {
        Prediction::Checkpoint { path } => {
            let model = MicroMacroAnsatz::load(Path::new(path), None)?;
            evaluate(&model, &reference, &grid, cfg.t)?
        }
        Prediction::Archive { path } => {
            let pred = read_reference(path)?;
            if pred.grid != reference.grid || grid != reference.grid || pred.x != reference.x {
                return Err(bgk_core::BgkError::GridMismatch(
                    "prediction and reference are on different grids".into(),
                )
                .into());
            }
            evaluate_values(pred.snapshot(cfg.t)?, &reference, cfg.t)?
        }
    };
    rep.config_hash = Some(out.hash().to_string());
    let summary = serde_json::to_value(&rep).expect("report serializes");
    out.json("eval.json", &summary)?;
    Ok(Outcome {
        summary,
        passed: true,
    })
}

#[derive(Debug, Clone, Serialize)]
struct SweepRecord {
    label: String,
    alpha: Option<f64>,
    beta: Option<f64>,
    seed: u64,
    report: EvalReport,
}

pub fn sweep(cfg: &SweepConfig, out: &Outputs) -> Result<Outcome, CliError> {
    if cfg.seeds.is_empty() || (cfg.alphas.is_empty() && !cfg.include_standard) {
        return Err(CliError::config(
            "sweep needs seeds and at least one weight setting",
        ));
    }
    let mut settings: Vec<(String, WeightFunction)> = Vec::new();
    if cfg.include_standard {
        settings.push(("standard".into(), WeightFunction::Identity));
    }
    for &a in &cfg.alphas {
        for &b in &cfg.betas {
            settings.push((
                format!("alpha={a},beta={b}"),
                WeightFunction::polynomial(a, b)?,
            ));
        }
    }
    let arch = architecture_for(&cfg.problem, &cfg.architecture);
    let reference = solve_reference(&cfg.problem, &cfg.reference, &[cfg.t_eval])?;

    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        for (label, w) in &settings {
            let tc = TrainConfig {
                weight: *w,
                seed,
                ..cfg.train.clone()
            };
            let (model, history, runtime) = train_one(&cfg.problem, &arch, &tc)?;
            let mut rep = evaluate(&model, &reference, &reference.grid, cfg.t_eval)?;
            rep.config_hash = Some(out.hash().to_string());
            rep.runtime_seconds = Some(runtime);
            rep.final_losses = history.last().copied();
            let (alpha, beta) = match *w {
                WeightFunction::Polynomial { alpha, beta } => (Some(alpha), Some(beta)),
                _ => (None, None),
            };
            records.push(SweepRecord {
                label: label.clone(),
                alpha,
                beta,
                seed,
                report: rep,
            });
        }
    }

    let mut csv = String::from(
        "label,alpha,beta,seed,rel_l2_f,rel_l1_f,rel_l1_rho,rel_l1_u1,rel_l1_u2,rel_l1_u3,rel_l1_T,final_total,runtime_seconds\n",
    );
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in &records {
        let e = &r.report;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.label.replace(',', ";"),
            opt(r.alpha),
            opt(r.beta),
            r.seed,
            e.rel_l2_f,
            e.rel_l1_f,
            e.rel_l1_rho,
            e.rel_l1_u[0],
            e.rel_l1_u[1],
            e.rel_l1_u[2],
            e.rel_l1_temperature,
            opt(e.final_losses.map(|h| h.total)),
            opt(e.runtime_seconds),
        ));
    }
    out.csv("sweep.csv", &csv)?;

    // Mean relative L² error per setting, then the β curve per α.
    let mean = |label: &str| {
        let v: Vec<f64> = records
            .iter()
            .filter(|r| r.label == label)
            .map(|r| r.report.rel_l2_f)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let table: Vec<Value> = settings
        .iter()
        .map(|(l, _)| json!({"label": l, "mean_rel_l2_f": mean(l)}))
        .collect();
    let mut curves = Vec::new();
    for &a in &cfg.alphas {
        let errs: Vec<f64> = cfg
            .betas
            .iter()
            .map(|b| mean(&format!("alpha={a},beta={b}")))
            .collect();
        let best = errs
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.total_cmp(y.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let interior = cfg.betas.len() >= 3 && best > 0 && best + 1 < cfg.betas.len();
        curves.push(json!({
            "alpha": a,
            "betas": cfg.betas,
            "mean_rel_l2_f": errs,
            "best_beta": cfg.betas.get(best),
            "interior_minimum": interior,
        }));
    }
    let summary = json!({
        "config_hash": out.hash(),
        "runs": records.len(),
        "table": table,
        "curves": curves,
    });
    out.json("sweep.json", &summary)?;
    Ok(Outcome {
        summary,
        passed: true,
    })
}
