//! Experiment configuration: flag and file layers, environment presets and
//! the resolved form written next to every output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pmcts::algos::{make_specialization, AlgoKind, AlgoParams, Exploration, PseudoCount, SpecializationConfig, SyncInterval};
use pmcts::env::{make_depth_two, make_random_tree, Mdp, RandomTreeParams};
use pmcts::framework::{Mode, RunOptions, SimInterval, Timing, VirtualClock, DEFAULT_DELAY_MS};
use pmcts::tree::TreeLimits;

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Virtual,
    Parallel,
}

/// One layer of settings. Flags form one layer, a config file another;
/// the file wins where both are set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    pub env: Option<String>,
    pub algo: Option<String>,
    pub workers: Option<usize>,
    pub rollouts: Option<usize>,
    pub reps: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<ModeKind>,
    pub timing: Option<Timing>,
    pub tau_sim: Option<u64>,
    pub tau_sim_range: Option<(u64, u64)>,
    pub tau_syn: Option<usize>,
    pub delay_ms: Option<u64>,
    /// Fixed exploration constant; the per-node value spread when unset.
    pub c: Option<f64>,
    pub r_vl: Option<f64>,
    pub n_vl: Option<f64>,
    pub m_max: Option<f64>,
    /// Pseudo-count override, e.g. `linear:1,-1`, `zero` or `scaled:2`.
    pub count: Option<String>,
    pub max_depth: Option<usize>,
    pub max_width: Option<usize>,
    pub out: Option<PathBuf>,
}

impl ConfigLayer {
    /// Reads a TOML or JSON layer, chosen by extension.
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if json {
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
        }
    }

    /// `self` with every field set in `top` replaced.
    pub fn overlay(mut self, top: ConfigLayer) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if top.$f.is_some() { self.$f = top.$f; } )* };
        }
        take!(env, algo, workers, rollouts, reps, seed, mode, timing, tau_sim, tau_sim_range, tau_syn, delay_ms, c, r_vl, n_vl, m_max, count, max_depth, max_width, out);
        self
    }

    pub fn resolve(self) -> CliResult<ExperimentConfig> {
        let env = self.env.ok_or_else(|| CliError::Config("no environment given (use --env)".into()))?;
        let env_spec = EnvPreset::parse(&env)?;
        let algo: AlgoKind = self
            .algo
            .as_deref()
            .unwrap_or("wu_uct")
            .parse()
            .map_err(|e: pmcts::Error| CliError::Config(e.to_string()))?;
        let workers = self.workers.unwrap_or(if algo == AlgoKind::Uct { 1 } else { 4 });
        let cfg = ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            env: env_spec,
            algo,
            workers,
            rollouts: self.rollouts.unwrap_or(1024),
            reps: self.reps.unwrap_or(1),
            seed: self.seed.unwrap_or(0),
            mode: self.mode.unwrap_or(ModeKind::Virtual),
            timing: self.timing,
            tau_sim: self.tau_sim,
            tau_sim_range: self.tau_sim_range,
            tau_syn: self.tau_syn,
            delay_ms: self.delay_ms.unwrap_or(DEFAULT_DELAY_MS),
            c: self.c,
            r_vl: self.r_vl,
            n_vl: self.n_vl,
            m_max: self.m_max,
            count: self.count.as_deref().map(parse_count).transpose()?,
            limits: TreeLimits {
                max_depth: self.max_depth.unwrap_or(TreeLimits::default().max_depth),
                max_width: self.max_width.unwrap_or(TreeLimits::default().max_width),
            },
            out: self.out,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse_count(s: &str) -> CliResult<PseudoCount> {
    let bad = || CliError::Config(format!("bad pseudo count '{s}' (zero, linear:SLOPE,INTERCEPT or scaled:FACTOR)"));
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
    match s.split_once(':') {
        None if s.trim() == "zero" => Ok(PseudoCount::Zero),
        Some(("linear", rest)) => {
            let (a, b) = rest.split_once(',').ok_or_else(bad)?;
            Ok(PseudoCount::Linear { slope: num(a)?, intercept: num(b)? })
        }
        Some(("scaled", f)) => Ok(PseudoCount::VisitScaled { factor: num(f)? }),
        _ => Err(bad()),
    }
}

/// Named environment families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EnvPreset {
    DepthTwo { gaps: Vec<f64>, sigma: f64 },
    /// Tree seed follows the run seed when `seed` is unset.
    RandomTree { depth: usize, branching: usize, sigma: f64, seed: Option<u64> },
    File { path: PathBuf },
}

impl EnvPreset {
    /// `depth2:K=4,gaps=0;0.2;0.3;0.5,sigma=1`, `rtree:D=4,K=4` or a path
    /// to an MDP JSON file (`file:PATH` or any name ending in `.json`).
    pub fn parse(s: &str) -> CliResult<Self> {
        let (family, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut kv = std::collections::BTreeMap::new();
        if family != "file" {
            for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                let (k, v) = part
                    .split_once('=')
                    .ok_or_else(|| CliError::Config(format!("bad preset field '{part}' in '{s}'")))?;
                kv.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let num = |k: &str| -> CliResult<Option<f64>> {
            kv.get(k)
                .map(|v| v.parse::<f64>().map_err(|_| CliError::Config(format!("bad value for {k} in '{s}'"))))
                .transpose()
        };
        let int = |k: &str| -> CliResult<Option<u64>> {
            kv.get(k)
                .map(|v| v.parse::<u64>().map_err(|_| CliError::Config(format!("bad value for {k} in '{s}'"))))
                .transpose()
        };
        let known = |allowed: &[&str]| -> CliResult<()> {
            match kv.keys().find(|k| !allowed.contains(&k.as_str())) {
                Some(k) => Err(CliError::Config(format!("unknown preset field '{k}' in '{s}'"))),
                None => Ok(()),
            }
        };
        match family {
            "depth2" => {
                known(&["K", "gaps", "sigma"])?;
                let sigma = num("sigma")?.unwrap_or(1.0);
                let gaps = match kv.get("gaps") {
                    Some(g) => g
                        .split([';', '|', ' '])
                        .filter(|t| !t.is_empty())
                        .map(|t| t.parse::<f64>().map_err(|_| CliError::Config(format!("bad gap '{t}' in '{s}'"))))
                        .collect::<CliResult<Vec<_>>>()?,
                    None => default_gaps(int("K")?.unwrap_or(4) as usize),
                };
                if let Some(k) = int("K")? {
                    if k as usize != gaps.len() {
                        return Err(CliError::Config(format!("K = {k} but {} gaps given", gaps.len())));
                    }
                }
                Ok(EnvPreset::DepthTwo { gaps, sigma })
            }
            "rtree" => {
                known(&["D", "K", "sigma", "seed"])?;
                Ok(EnvPreset::RandomTree {
                    depth: int("D")?.unwrap_or(4) as usize,
                    branching: int("K")?.unwrap_or(4) as usize,
                    sigma: num("sigma")?.unwrap_or(1.0),
                    seed: int("seed")?,
                })
            }
            "file" => Ok(EnvPreset::File { path: PathBuf::from(rest) }),
            _ if s.ends_with(".json") => Ok(EnvPreset::File { path: PathBuf::from(s) }),
            _ => Err(CliError::Config(format!("unknown environment '{s}' (depth2:..., rtree:... or a JSON file)"))),
        }
    }

    pub fn build(&self, run_seed: u64) -> CliResult<Mdp> {
        Ok(match self {
            EnvPreset::DepthTwo { gaps, sigma } => make_depth_two(gaps, *sigma, run_seed)?,
            EnvPreset::RandomTree { depth, branching, sigma, seed } => {
                let mut p = RandomTreeParams::new(*depth, *branching, seed.unwrap_or(run_seed));
                p.sigma = *sigma;
                make_random_tree(&p)?
            }
            EnvPreset::File { path } => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                Mdp::from_json(&text)?
            }
        })
    }

    /// Gaps of a depth-two preset.
    pub fn gaps(&self) -> Option<&[f64]> {
        match self {
            EnvPreset::DepthTwo { gaps, .. } => Some(gaps),
            _ => None,
        }
    }
}

/// Gaps spread evenly over [0, 0.5].
fn default_gaps(k: usize) -> Vec<f64> {
    if k == 4 {
        return vec![0.0, 0.2, 0.3, 0.5];
    }
    (0..k).map(|i| if k > 1 { 0.5 * i as f64 / (k - 1) as f64 } else { 0.0 }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub env: EnvPreset,
    pub algo: AlgoKind,
    pub workers: usize,
    pub rollouts: usize,
    pub reps: usize,
    pub seed: u64,
    pub mode: ModeKind,
    pub timing: Option<Timing>,
    pub tau_sim: Option<u64>,
    pub tau_sim_range: Option<(u64, u64)>,
    pub tau_syn: Option<usize>,
    pub delay_ms: u64,
    pub c: Option<f64>,
    pub r_vl: Option<f64>,
    pub n_vl: Option<f64>,
    pub m_max: Option<f64>,
    pub count: Option<PseudoCount>,
    pub limits: TreeLimits,
    /// Not part of the experiment, so left out of every emitted file.
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.reps == 0 {
            return Err(CliError::Config("repetitions must be at least 1".into()));
        }
        if self.rollouts == 0 {
            return Err(CliError::Config("rollout budget must be at least 1".into()));
        }
        if self.tau_sim.is_some() && self.tau_sim_range.is_some() {
            return Err(CliError::Config("give tau_sim or tau_sim_range, not both".into()));
        }
        self.specialization()?;
        Ok(())
    }

    pub fn params(&self) -> AlgoParams {
        let d = AlgoParams::defaults();
        AlgoParams {
            r_vl: self.r_vl.or(d.r_vl),
            n_vl: self.n_vl.or(d.n_vl),
            m_max: self.m_max.or(d.m_max),
            exploration: self.c.map_or(Exploration::NodeSpread, Exploration::Fixed),
            limits: self.limits,
        }
    }

    pub fn specialization(&self) -> CliResult<SpecializationConfig> {
        let mut cfg = make_specialization(self.algo, self.workers, &self.params())?;
        if let Some(k) = self.tau_syn {
            cfg.sync = SyncInterval::Every(k);
        }
        if let Some(c) = self.count {
            cfg.count = c;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn clock(&self, cfg: &SpecializationConfig) -> VirtualClock {
        let mut clock = VirtualClock::default_for(cfg);
        if let Some(t) = self.timing {
            clock.timing = t;
        }
        if let Some(steps) = self.tau_sim {
            clock.interval = SimInterval::Constant { steps };
        }
        if let Some((lo, hi)) = self.tau_sim_range {
            clock.interval = SimInterval::Uniform { lo, hi };
        }
        clock
    }

    pub fn run_options(&self, cfg: &SpecializationConfig, seed: u64) -> RunOptions {
        let mode = match self.mode {
            ModeKind::Virtual => Mode::Virtual(self.clock(cfg)),
            ModeKind::Parallel => Mode::Parallel { delay_ms: self.delay_ms },
        };
        RunOptions::new(self.rollouts, seed, mode)
    }
}
