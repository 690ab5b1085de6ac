use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pmcts::algos::AlgoKind;
use pmcts_cli::commands::{cmd_diagnose, cmd_run, cmd_speedup, cmd_sweep, SpeedupSpec, SweepSpec};
use pmcts_cli::config::{ConfigLayer, EnvPreset, ModeKind};
use pmcts_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "pmcts", version, about = "Parallel MCTS experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Repeated runs of one configuration.
    Run(Common),
    /// Cross-product or randomized sweep with gap measurements.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated algorithms.
        #[arg(long, value_delimiter = ',', default_value = "wu_uct,treep,vl_hard,vl_soft,bu_uct")]
        algos: Vec<AlgoKind>,
        #[arg(long = "workers-axis", value_delimiter = ',')]
        workers_axis: Vec<usize>,
        #[arg(long = "rollouts-axis", value_delimiter = ',')]
        rollouts_axis: Vec<usize>,
        /// Seeds per configuration.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Draw this many random configurations instead of the cross-product.
        #[arg(long)]
        random_configs: Option<usize>,
        #[arg(long, default_value_t = 20)]
        gap_trials: usize,
    },
    /// Necessary-condition verdicts per algorithm.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "leafp,rootp,treep,vl_hard,vl_soft,wu_uct,bu_uct")]
        algos: Vec<AlgoKind>,
        #[arg(long, default_value_t = 400)]
        trials: usize,
    },
    /// Wall-clock speedup of M workers over one.
    Speedup {
        /// Environment presets, separated by spaces when repeated.
        #[arg(long = "env", num_args = 1.., default_values_t = ["depth2:K=4".to_string(), "rtree:D=4,K=4".to_string()])]
        envs: Vec<String>,
        #[arg(long, default_value = "wu_uct")]
        algo: AlgoKind,
        #[arg(long, default_value_t = 8)]
        workers: usize,
        #[arg(long, default_value_t = 128)]
        rollouts: usize,
        #[arg(long, default_value_t = 50)]
        delay_ms: u64,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0.2)]
        noise_threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML or JSON file; its settings override flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    rollouts: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeKind>,
    #[arg(long)]
    tau_sim: Option<u64>,
    #[arg(long)]
    tau_syn: Option<usize>,
    #[arg(long)]
    delay_ms: Option<u64>,
    /// Fixed exploration constant.
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    r_vl: Option<f64>,
    #[arg(long)]
    n_vl: Option<f64>,
    #[arg(long)]
    m_max: Option<f64>,
    /// Pseudo count: zero, linear:SLOPE,INTERCEPT or scaled:FACTOR.
    #[arg(long)]
    count: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn layer(&self) -> CliResult<ConfigLayer> {
        let flags = ConfigLayer {
            env: self.env.clone(),
            algo: self.algo.clone(),
            workers: self.workers,
            rollouts: self.rollouts,
            reps: self.reps,
            seed: self.seed,
            mode: self.mode,
            tau_sim: self.tau_sim,
            tau_syn: self.tau_syn,
            delay_ms: self.delay_ms,
            c: self.c,
            r_vl: self.r_vl,
            n_vl: self.n_vl,
            m_max: self.m_max,
            count: self.count.clone(),
            out: self.out.clone(),
            ..Default::default()
        };
        Ok(match &self.config {
            Some(p) => flags.overlay(ConfigLayer::from_file(p)?),
            None => flags,
        })
    }
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::Run(common) => {
            let cfg = common.layer()?.resolve()?;
            let r = cmd_run(&cfg)?;
            println!("algo={} workers={} rollouts={} reps={}", cfg.algo, cfg.workers, cfg.rollouts, cfg.reps);
            println!("mean_regret={:.6} std_regret={:.6}", r.mean_regret, r.std_regret);
            if let Some(g) = cfg.env.gaps() {
                let b = pmcts::diagnostics::wu_uct_regret_bound(g, cfg.rollouts as u64, cfg.workers)?;
                println!("bound r_uct={:.4} excess={:.4}", b.r_uct, b.excess);
            }
            if let Some(dir) = r.files.first().and_then(|f| f.parent()) {
                println!("wrote {} files to {}", r.files.len(), dir.display());
            }
        }
        Cmd::Sweep { common, algos, workers_axis, rollouts_axis, seeds, random_configs, gap_trials } => {
            let mut layer = common.layer()?;
            layer.algo.get_or_insert_with(|| algos.first().map_or("wu_uct".into(), |a| a.name().into()));
            let base = layer.resolve()?;
            let spec = SweepSpec {
                workers: if workers_axis.is_empty() { vec![base.workers] } else { workers_axis },
                rollouts: if rollouts_axis.is_empty() { vec![base.rollouts] } else { rollouts_axis },
                base,
                algos,
                seeds,
                random_configs,
                gap_trials,
            };
            let r = cmd_sweep(&spec)?;
            println!("rows={} configs={}", r.rows.len(), r.config_means.len());
            println!("spearman(gap, regret) over configs = {:?}", r.by_config.gap_vs_regret);
            println!("spearman(G*, gap) over configs = {:?}", r.by_config.g_star_vs_gap);
            if let Some(dir) = r.files.first().and_then(|f| f.parent()) {
                println!("wrote {} files to {}", r.files.len(), dir.display());
            }
        }
        Cmd::Diagnose { common, algos, trials } => {
            let mut layer = common.layer()?;
            layer.env.get_or_insert_with(|| "depth2:K=2".into());
            layer.workers.get_or_insert(16);
            let base = layer.resolve()?;
            println!("{:<8} {:>3} {:<14} {:>7} {:<10}", "algo", "M", "condition_N", "witness", "Q_violated");
            for (row, _) in cmd_diagnose(&base, &algos, trials)? {
                let w = row.witness.map_or("-".to_string(), |x| x.to_string());
                println!("{:<8} {:>3} {:<14} {:>7} {:<10}", row.algo, row.workers, row.condition_n, w, row.condition_q_violated);
            }
        }
        Cmd::Speedup { envs, algo, workers, rollouts, delay_ms, repeats, noise_threshold, seed, out } => {
            let spec = SpeedupSpec {
                envs: envs.iter().map(|e| EnvPreset::parse(e)).collect::<CliResult<_>>()?,
                algo,
                workers,
                rollouts,
                delay_ms,
                repeats,
                noise_threshold,
                seed,
                out,
            };
            let r = cmd_speedup(&spec)?;
            for row in &r.rows {
                println!("{} t1={:.1}ms tM={:.1}ms speedup={:.2}", row.env, row.t1_ms, row.tm_ms, row.speedup);
            }
            println!("mean_speedup={:.3}", r.mean_speedup);
            if let Some(c) = &r.caveat {
                println!("note: {c}");
            }
            if r.noisy {
                return Err(CliError::Noisy("timings varied beyond the threshold; rerun advised".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
