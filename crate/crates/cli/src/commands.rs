use std::path::PathBuf;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use pmcts::algos::{make_specialization, AlgoKind, AlgoParams, SpecializationConfig};
use pmcts::diagnostics::{
    check_necessary_conditions, cumulative_regret, expected_cumulative_regret, gap_report, ConditionN, ConditionVerdict,
    GapOptions,
};
use pmcts::framework::{run_search, Mode, RunOptions};
use pmcts::rng::{self, derive_seed};
use pmcts::stats;

use crate::config::{EnvPreset, ExperimentConfig, ModeKind};
use crate::error::{CliError, CliResult};
use crate::output::{csv_with_header, finish_csv, write_json, write_trace, Staging};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepSummary {
    pub rep: usize,
    pub seed: u64,
    pub rollouts: usize,
    pub regret: f64,
    pub expected_regret: f64,
    pub recommended_action: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: usize,
    pub mean_regret: f64,
    pub std_regret: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunReport {
    pub reps: Vec<RepSummary>,
    pub curve: Vec<CurvePoint>,
    pub mean_regret: f64,
    pub std_regret: f64,
    pub files: Vec<PathBuf>,
}

fn curve_points(n: usize) -> Vec<usize> {
    let mut pts: Vec<usize> = (0..).map(|k| 1usize << k).take_while(|p| *p < n).collect();
    pts.push(n);
    pts
}

/// Repetitions of one configuration. Repetition r uses seed
/// derive_seed(seed, r); the environment is built once from the base seed.
pub fn cmd_run(cfg: &ExperimentConfig) -> CliResult<RunReport> {
    let spec = cfg.specialization()?;
    let env = cfg.env.build(cfg.seed)?;
    let mut staging = cfg.out.as_deref().map(Staging::new).transpose()?;
    let pts = curve_points(cfg.rollouts);
    let mut partial: Vec<Vec<f64>> = vec![Vec::new(); pts.len()];
    let mut reps = Vec::new();
    for rep in 0..cfg.reps {
        let seed = derive_seed(cfg.seed, rep as u64);
        let out = run_search(&env, &spec, &cfg.run_options(&spec, seed))?;
        let mut acc = 0.0;
        let mut j = 0;
        for (i, r) in out.trace.records.iter().enumerate() {
            acc += r.optimal_value - r.value;
            if i + 1 == pts[j] {
                partial[j].push(acc);
                j += 1;
            }
        }
        reps.push(RepSummary {
            rep,
            seed,
            rollouts: cfg.rollouts,
            regret: cumulative_regret(&out.trace)?,
            expected_regret: expected_cumulative_regret(&out.trace)?,
            recommended_action: out.recommend_action()?,
        });
        if let Some(st) = staging.as_mut() {
            write_trace(&st.path(&format!("trace_rep{rep}.csv")), cfg, &out.trace)?;
            write_json(&st.path(&format!("tree_rep{rep}.json")), cfg, &out.tree.dump())?;
        }
    }
    let regrets: Vec<f64> = reps.iter().map(|r| r.regret).collect();
    let curve: Vec<CurvePoint> = pts
        .iter()
        .zip(&partial)
        .map(|(n, xs)| CurvePoint { n: *n, mean_regret: stats::mean(xs), std_regret: stats::population_std(xs) })
        .collect();
    let mut report = RunReport {
        mean_regret: stats::mean(&regrets),
        std_regret: stats::population_std(&regrets),
        reps,
        curve,
        files: Vec::new(),
    };
    if let Some(mut st) = staging {
        let mut w = csv_with_header(&st.path("summary.csv"), cfg)?;
        for r in &report.reps {
            w.serialize(r)?;
        }
        finish_csv(
            w,
            &[
                ("mean_regret".into(), format!("{}", report.mean_regret)),
                ("std_regret".into(), format!("{}", report.std_regret)),
            ],
        )?;
        let mut w = csv_with_header(&st.path("curve.csv"), cfg)?;
        for p in &report.curve {
            w.serialize(p)?;
        }
        finish_csv(w, &[])?;
        report.files = st.commit()?;
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct SweepSpec {
    /// Environment, budget, mode and output come from here.
    pub base: ExperimentConfig,
    pub algos: Vec<AlgoKind>,
    pub workers: Vec<usize>,
    pub rollouts: Vec<usize>,
    pub seeds: usize,
    /// Draw this many random configurations instead of the cross-product.
    pub random_configs: Option<usize>,
    pub gap_trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config_id: usize,
    pub algo: AlgoKind,
    pub workers: usize,
    pub rollouts: usize,
    pub seed: u64,
    pub r_vl: f64,
    pub n_vl: f64,
    pub m_max: f64,
    pub regret: f64,
    pub expected_regret: f64,
    pub gap: f64,
    pub g_star: f64,
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
    pub g4: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub gap_vs_regret: Option<f64>,
    pub g_star_vs_regret: Option<f64>,
    pub g_star_vs_gap: Option<f64>,
    pub g1_vs_gap: Option<f64>,
    pub g2_vs_gap: Option<f64>,
    pub g3_vs_gap: Option<f64>,
    pub g4_vs_gap: Option<f64>,
}

impl Correlations {
    fn of(rows: &[SweepRow]) -> Self {
        let col = |f: fn(&SweepRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
        let gap = col(|r| r.gap);
        let regret = col(|r| r.expected_regret);
        Self {
            gap_vs_regret: stats::spearman(&gap, &regret),
            g_star_vs_regret: stats::spearman(&col(|r| r.g_star), &regret),
            g_star_vs_gap: stats::spearman(&col(|r| r.g_star), &gap),
            g1_vs_gap: stats::spearman(&col(|r| r.g1), &gap),
            g2_vs_gap: stats::spearman(&col(|r| r.g2), &gap),
            g3_vs_gap: stats::spearman(&col(|r| r.g3), &gap),
            g4_vs_gap: stats::spearman(&col(|r| r.g4), &gap),
        }
    }

    fn footer(&self, scope: &str) -> Vec<(String, String)> {
        let f = |v: Option<f64>| v.map_or("absent".to_string(), |x| format!("{x}"));
        vec![
            (format!("spearman_{scope}_gap_vs_regret"), f(self.gap_vs_regret)),
            (format!("spearman_{scope}_g_star_vs_regret"), f(self.g_star_vs_regret)),
            (format!("spearman_{scope}_g_star_vs_gap"), f(self.g_star_vs_gap)),
            (format!("spearman_{scope}_g1_vs_gap"), f(self.g1_vs_gap)),
            (format!("spearman_{scope}_g2_vs_gap"), f(self.g2_vs_gap)),
            (format!("spearman_{scope}_g3_vs_gap"), f(self.g3_vs_gap)),
            (format!("spearman_{scope}_g4_vs_gap"), f(self.g4_vs_gap)),
        ]
    }
}

#[derive(Clone, Debug, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// One row per configuration, averaged over seeds.
    pub config_means: Vec<SweepRow>,
    pub by_row: Correlations,
    pub by_config: Correlations,
    pub files: Vec<PathBuf>,
}

struct Cell {
    algo: AlgoKind,
    workers: usize,
    rollouts: usize,
    params: AlgoParams,
}

fn sweep_cells(spec: &SweepSpec) -> CliResult<Vec<Cell>> {
    if spec.algos.is_empty() || spec.workers.is_empty() || spec.rollouts.is_empty() || spec.seeds == 0 {
        return Err(CliError::Config("every sweep axis needs at least one value".into()));
    }
    let base = spec.base.params();
    let mut cells = Vec::new();
    match spec.random_configs {
        Some(0) => return Err(CliError::Config("random_configs must be at least 1".into())),
        Some(k) => {
            let mut r = rng::stream(spec.base.seed, 1 << 41);
            for _ in 0..k {
                let algo = spec.algos[r.random_range(0..spec.algos.len())];
                let workers = spec.workers[r.random_range(0..spec.workers.len())];
                let rollouts = spec.rollouts[r.random_range(0..spec.rollouts.len())];
                let params = AlgoParams {
                    r_vl: Some(r.random_range(1.0..=5.0)),
                    n_vl: Some(r.random_range(1.0..=5.0)),
                    m_max: Some(r.random_range(0.5..=1.0)),
                    ..base.clone()
                };
                cells.push(Cell { algo, workers, rollouts, params });
            }
        }
        None => {
            for &algo in &spec.algos {
                for &workers in &spec.workers {
                    for &rollouts in &spec.rollouts {
                        cells.push(Cell { algo, workers, rollouts, params: base.clone() });
                    }
                }
            }
        }
    }
    Ok(cells)
}

/// Runs every cell for every seed and measures gaps on each run. Seed s of
/// every cell uses the same environment and worker streams.
pub fn cmd_sweep(spec: &SweepSpec) -> CliResult<SweepReport> {
    let cells = sweep_cells(spec)?;
    let mut staging = spec.base.out.as_deref().map(Staging::new).transpose()?;
    let mut rows = Vec::new();
    let mut config_means = Vec::new();
    for (id, cell) in cells.iter().enumerate() {
        let workers = if cell.algo == AlgoKind::Uct { 1 } else { cell.workers };
        let cfg = make_specialization(cell.algo, workers, &cell.params)?;
        let mut mine = Vec::new();
        for s in 0..spec.seeds {
            let seed = derive_seed(spec.base.seed, s as u64);
            let env = spec.base.env.build(seed)?;
            let mut exp = spec.base.clone();
            exp.rollouts = cell.rollouts;
            let mut opts = exp.run_options(&cfg, seed);
            opts.diagnostics = true;
            opts.probe = true;
            let out = run_search(&env, &cfg, &opts)?;
            let gaps = gap_report(
                &env,
                &out,
                &GapOptions { trials: spec.gap_trials, seed: derive_seed(seed, 7), min_visits: 1 },
            )?;
            mine.push(SweepRow {
                config_id: id,
                algo: cell.algo,
                workers,
                rollouts: cell.rollouts,
                seed,
                r_vl: cell.params.r_vl.unwrap_or(f64::NAN),
                n_vl: cell.params.n_vl.unwrap_or(f64::NAN),
                m_max: cell.params.m_max.unwrap_or(f64::NAN),
                regret: cumulative_regret(&out.trace)?,
                expected_regret: expected_cumulative_regret(&out.trace)?,
                gap: gaps.weighted_gap,
                g_star: gaps.weighted_g_star,
                g1: gaps.weighted_g1,
                g2: gaps.weighted_g2,
                g3: gaps.weighted_g3,
                g4: gaps.weighted_g4,
            });
        }
        let avg = |f: fn(&SweepRow) -> f64| stats::mean(&mine.iter().map(f).collect::<Vec<_>>());
        config_means.push(SweepRow {
            seed: spec.base.seed,
            regret: avg(|r| r.regret),
            expected_regret: avg(|r| r.expected_regret),
            gap: avg(|r| r.gap),
            g_star: avg(|r| r.g_star),
            g1: avg(|r| r.g1),
            g2: avg(|r| r.g2),
            g3: avg(|r| r.g3),
            g4: avg(|r| r.g4),
            ..mine[0].clone()
        });
        rows.extend(mine);
    }
    let mut report = SweepReport {
        by_row: Correlations::of(&rows),
        by_config: Correlations::of(&config_means),
        rows,
        config_means,
        files: Vec::new(),
    };
    if let Some(mut st) = staging.take() {
        let mut w = csv_with_header(&st.path("sweep.csv"), &spec.base)?;
        for r in &report.rows {
            w.serialize(r)?;
        }
        let mut footer = report.by_row.footer("rows");
        footer.extend(report.by_config.footer("configs"));
        finish_csv(w, &footer)?;
        let mut w = csv_with_header(&st.path("sweep_configs.csv"), &spec.base)?;
        for r in &report.config_means {
            w.serialize(r)?;
        }
        finish_csv(w, &report.by_config.footer("configs"))?;
        report.files = st.commit()?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseRow {
    pub algo: String,
    pub workers: usize,
    pub condition_n: String,
    pub witness: Option<u64>,
    pub condition_q_violated: bool,
    pub largest_q_gap: f64,
}

/// Necessary-condition checks for each algorithm at M workers. `count`
/// replaces the pseudo count of every configuration when given.
pub fn cmd_diagnose(base: &ExperimentConfig, algos: &[AlgoKind], trials: usize) -> CliResult<Vec<(DiagnoseRow, ConditionVerdict)>> {
    if algos.is_empty() {
        return Err(CliError::Config("no algorithms to diagnose".into()));
    }
    let mut out = Vec::new();
    for &algo in algos {
        let mut exp = base.clone();
        exp.algo = algo;
        exp.workers = if algo == AlgoKind::Uct { 1 } else { base.workers };
        let cfg: SpecializationConfig = exp.specialization()?;
        let v = check_necessary_conditions(&cfg, trials, base.seed)?;
        let (verdict, witness) = match v.condition_n {
            ConditionN::Pass => ("pass", None),
            ConditionN::Fail { witness, .. } => ("fail", Some(witness)),
            ConditionN::NotCheckable => ("not_checkable", None),
        };
        let row = DiagnoseRow {
            algo: algo.name().to_string(),
            workers: cfg.workers,
            condition_n: verdict.into(),
            witness,
            condition_q_violated: v.condition_q.violated,
            largest_q_gap: v.condition_q.probes.iter().map(|p| p.gap).fold(0.0, f64::max),
        };
        out.push((row, v));
    }
    if let Some(dir) = &base.out {
        let mut st = Staging::new(dir)?;
        let mut w = csv_with_header(&st.path("conditions.csv"), base)?;
        for (r, _) in &out {
            w.serialize(r)?;
        }
        finish_csv(w, &[])?;
        st.commit()?;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SpeedupSpec {
    pub envs: Vec<EnvPreset>,
    pub algo: AlgoKind,
    pub workers: usize,
    pub rollouts: usize,
    pub delay_ms: u64,
    pub repeats: usize,
    /// Largest tolerated coefficient of variation of repeated timings.
    pub noise_threshold: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub env: String,
    pub workers: usize,
    pub rollouts: usize,
    pub delay_ms: u64,
    pub t1_ms: f64,
    pub tm_ms: f64,
    pub speedup: f64,
    pub noisy: bool,
}

#[derive(Clone, Debug, Default)]
pub struct SpeedupReport {
    pub rows: Vec<SpeedupRow>,
    pub mean_speedup: f64,
    pub noisy: bool,
    pub caveat: Option<String>,
}

fn timed(env: &pmcts::env::Mdp, cfg: &SpecializationConfig, spec: &SpeedupSpec, repeats: usize) -> CliResult<(f64, bool)> {
    let mut ts = Vec::new();
    for k in 0..repeats {
        let opts = RunOptions::new(spec.rollouts, derive_seed(spec.seed, k as u64), Mode::Parallel { delay_ms: spec.delay_ms });
        ts.push(run_search(env, cfg, &opts)?.stats.elapsed_ms);
    }
    let m = stats::mean(&ts);
    let noisy = ts.len() > 1 && m > 0.0 && stats::sample_std(&ts) / m > spec.noise_threshold;
    Ok((m, noisy))
}

/// Wall time with one worker over wall time with M workers, per preset.
pub fn cmd_speedup(spec: &SpeedupSpec) -> CliResult<SpeedupReport> {
    if spec.envs.is_empty() || spec.repeats == 0 || spec.workers == 0 {
        return Err(CliError::Config("speedup needs environments, repeats >= 1 and workers >= 1".into()));
    }
    let params = AlgoParams::defaults();
    let one = make_specialization(if spec.algo == AlgoKind::Uct { AlgoKind::Uct } else { spec.algo }, 1, &params)?;
    let many = make_specialization(spec.algo, spec.workers, &params)?;
    let mut rows = Vec::new();
    for preset in &spec.envs {
        let env = preset.build(spec.seed)?;
        let (t1, n1) = timed(&env, &one, spec, spec.repeats)?;
        let (tm, nm) = timed(&env, &many, spec, spec.repeats)?;
        rows.push(SpeedupRow {
            env: serde_json::to_string(preset)?,
            workers: spec.workers,
            rollouts: spec.rollouts,
            delay_ms: spec.delay_ms,
            t1_ms: t1,
            tm_ms: tm,
            speedup: t1 / tm,
            noisy: n1 || nm,
        });
    }
    let report = SpeedupReport {
        mean_speedup: stats::mean(&rows.iter().map(|r| r.speedup).collect::<Vec<_>>()),
        noisy: rows.iter().any(|r| r.noisy),
        caveat: (spec.delay_ms == 0).then(|| "simulation does not dominate: speedup is bounded by coordinator cost".into()),
        rows,
    };
    if let Some(dir) = &spec.out {
        let mut st = Staging::new(dir)?;
        let meta = serde_json::json!({
            "algo": spec.algo, "workers": spec.workers, "rollouts": spec.rollouts,
            "delay_ms": spec.delay_ms, "repeats": spec.repeats, "seed": spec.seed, "mode": ModeKind::Parallel,
        });
        let mut w = csv_with_header(&st.path("speedup.csv"), &meta)?;
        for r in &report.rows {
            w.serialize(r)?;
        }
        let mut footer = vec![("mean_speedup".to_string(), format!("{}", report.mean_speedup))];
        if let Some(c) = &report.caveat {
            footer.push(("caveat".into(), c.clone()));
        }
        finish_csv(w, &footer)?;
        st.commit()?;
    }
    Ok(report)
}
