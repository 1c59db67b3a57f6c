//! Run configuration: flat key = value sections with command-line
//! overrides, resolved against per-command defaults, then re-serialized as
//! the reproducibility record (`run.cfg`) so a saved record is itself a
//! valid --config file.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use qgdiff::training::Algorithm;
use qgdiff::{
    CGConfig, Error, GeneratorConfig, GridSpec, LossConfig, OptimizerConfig, PhysicalParams,
    Result, StepConfig,
};

/// Reproducibility record written next to every command's outputs.
pub const RUN_FILE: &str = "run.cfg";
const HEADER: &str = "qg-run v1";

/// Section/key/value triples exactly as written, before typing.
#[derive(Debug, Default)]
pub struct RawConfig {
    sections: HashMap<String, HashMap<String, String>>,
}

impl RawConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut sections: HashMap<String, HashMap<String, String>> = HashMap::new();
        let mut section: Option<String> = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line == HEADER {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.to_string());
                sections.entry(name.to_string()).or_default();
                continue;
            }
            let Some(sec) = &section else {
                return Err(Error::Config(format!(
                    "config line before any section: '{line}'"
                )));
            };
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("expected 'key = value' in [{sec}]: '{line}'"))
            })?;
            let prev = sections
                .get_mut(sec.as_str())
                .unwrap()
                .insert(k.trim().to_string(), v.trim().to_string());
            if prev.is_some() {
                return Err(Error::Config(format!(
                    "duplicate key '{}' in [{sec}]",
                    k.trim()
                )));
            }
        }
        Ok(RawConfig { sections })
    }

    /// Applies one `section.key=value` pair on top of the file values.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "override must look like section.key=value, got '{spec}'"
            ))
        })?;
        let (sec, key) = path.trim().split_once('.').ok_or_else(|| {
            Error::Config(format!(
                "override key must be section.key, got '{}'",
                path.trim()
            ))
        })?;
        self.sections
            .entry(sec.to_string())
            .or_default()
            .insert(key.trim().to_string(), value.trim().to_string());
        Ok(())
    }
}

/// Gradient-check problem size and thresholds.
#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    pub nx: usize,
    pub ny: usize,
    pub n_steps: usize,
    pub samples: usize,
    pub eps: f64,
    pub tol: f64,
    /// Check the ConvNet component instead of the gradient filter.
    pub convnet: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            nx: 32,
            ny: 24,
            n_steps: 6,
            samples: 2,
            eps: 1e-6,
            tol: 1e-5,
            convnet: false,
        }
    }
}

/// Fully resolved run settings: every section typed and validated.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub seed: u64,
    pub threads: usize,
    pub grid: GridSpec,
    pub physics: PhysicalParams,
    pub step: StepConfig,
    pub cg: CGConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub generator: GeneratorConfig,
    pub gradcheck: GradcheckConfig,
}

fn algorithm_name(a: &Algorithm) -> &'static str {
    match a {
        Algorithm::QuasiNewton => "quasi-newton",
        Algorithm::AdaptiveMoment => "adaptive-moment",
        Algorithm::GradientDescent => "gradient-descent",
    }
}

fn parse_algorithm(s: &str) -> Result<Algorithm> {
    match s {
        "quasi-newton" | "lbfgs" => Ok(Algorithm::QuasiNewton),
        "adaptive-moment" | "adam" => Ok(Algorithm::AdaptiveMoment),
        "gradient-descent" | "gd" => Ok(Algorithm::GradientDescent),
        other => Err(Error::Config(format!(
            "unknown algorithm '{other}' (quasi-newton, adaptive-moment, gradient-descent)"
        ))),
    }
}

struct Sect {
    name: &'static str,
    map: HashMap<String, String>,
}

impl Sect {
    fn new(name: &'static str, map: Option<HashMap<String, String>>) -> Self {
        Sect {
            name,
            map: map.unwrap_or_default(),
        }
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn f64_or(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse::<f64>().map_err(|_| {
                Error::Config(format!("[{}] {key}: invalid number '{v}'", self.name))
            }),
        }
    }

    fn usize_or(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse::<usize>().map_err(|_| {
                Error::Config(format!("[{}] {key}: invalid integer '{v}'", self.name))
            }),
        }
    }

    fn u64_or(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse::<u64>().map_err(|_| {
                Error::Config(format!("[{}] {key}: invalid integer '{v}'", self.name))
            }),
        }
    }

    fn bool_or(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse::<bool>().map_err(|_| {
                Error::Config(format!("[{}] {key}: invalid bool '{v}'", self.name))
            }),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(k) = self.map.keys().next() {
            return Err(Error::Config(format!(
                "unknown key '{k}' in [{}]",
                self.name
            )));
        }
        Ok(())
    }
}

/// Merges defaults <- config file <- overrides <- flags and validates.
/// `opt_default` carries the command-specific optimizer defaults so the
/// record reflects what actually ran.
pub fn resolve(
    mut raw: RawConfig,
    opt_default: &OptimizerConfig,
    seed_flag: Option<u64>,
    threads_flag: Option<usize>,
) -> Result<Resolved> {
    let mut run = Sect::new("run", raw.sections.remove("run"));
    // Provenance keys from a reread record; informational only.
    for key in ["command", "version", "dataset", "component", "initial", "role", "init"] {
        let _ = run.take(key);
    }
    let seed = match seed_flag {
        Some(s) => {
            let _ = run.take("seed");
            s
        }
        None => run.u64_or("seed", 0)?,
    };
    let threads = match threads_flag {
        Some(t) => {
            let _ = run.take("threads");
            t
        }
        None => run.usize_or("threads", 0)?,
    };
    run.finish()?;

    let mut s = Sect::new("grid", raw.sections.remove("grid"));
    let grid = GridSpec::new(
        s.usize_or("nx", 200)?,
        s.usize_or("ny", 150)?,
        s.f64_or("dx", 5500.0)?,
        s.f64_or("dy", 5500.0)?,
    )?;
    s.finish()?;

    let d = PhysicalParams::default();
    let mut s = Sect::new("physics", raw.sections.remove("physics"));
    let physics = PhysicalParams {
        g: s.f64_or("g", d.g)?,
        f: s.f64_or("f", d.f)?,
        beta: s.f64_or("beta", d.beta)?,
        l_r: s.f64_or("l_r", d.l_r)?,
        d: s.f64_or("d", d.d)?,
    };
    physics.validate()?;
    s.finish()?;

    let d = StepConfig::default();
    let mut s = Sect::new("step", raw.sections.remove("step"));
    let step = StepConfig {
        dt: s.f64_or("dt", d.dt)?,
        n_steps: s.usize_or("n_steps", d.n_steps)?,
        cfl_max: s.f64_or("cfl_max", d.cfl_max)?,
    };
    step.validate()?;
    s.finish()?;

    let d = CGConfig::default();
    let mut s = Sect::new("cg", raw.sections.remove("cg"));
    let cg = CGConfig {
        max_iters: s.usize_or("max_iters", d.max_iters)?,
        tol: s.f64_or("tol", d.tol)?,
        unrolled: s.bool_or("unrolled", d.unrolled)?,
    };
    cg.validate()?;
    s.finish()?;

    let d = LossConfig::default();
    let mut s = Sect::new("loss", raw.sections.remove("loss"));
    let loss = LossConfig {
        lambda_l2: s.f64_or("lambda_l2", d.lambda_l2)?,
        divergence_weight: s.f64_or("divergence_weight", d.divergence_weight)?,
        scale_by_target_variance: s
            .bool_or("scale_by_target_variance", d.scale_by_target_variance)?,
    };
    loss.validate()?;
    s.finish()?;

    let mut s = Sect::new("optimizer", raw.sections.remove("optimizer"));
    let optimizer = OptimizerConfig {
        algorithm: match s.take("algorithm") {
            None => opt_default.algorithm,
            Some(v) => parse_algorithm(&v)?,
        },
        lr: s.f64_or("lr", opt_default.lr)?,
        decay_factor: s.f64_or("decay_factor", opt_default.decay_factor)?,
        decay_every: s.usize_or("decay_every", opt_default.decay_every)?,
        max_epochs: s.usize_or("max_epochs", opt_default.max_epochs)?,
        batch_size: s.usize_or("batch_size", opt_default.batch_size)?,
        grad_tol: s.f64_or("grad_tol", opt_default.grad_tol)?,
        history: s.usize_or("history", opt_default.history)?,
        checkpoint_every: s.usize_or("checkpoint_every", opt_default.checkpoint_every)?,
    };
    optimizer.validate()?;
    s.finish()?;

    let d = GeneratorConfig::default();
    let mut s = Sect::new("generator", raw.sections.remove("generator"));
    let generator = GeneratorConfig {
        n_eddies_min: s.usize_or("n_eddies_min", d.n_eddies_min)?,
        n_eddies_max: s.usize_or("n_eddies_max", d.n_eddies_max)?,
        amp_min: s.f64_or("amp_min", d.amp_min)?,
        amp_max: s.f64_or("amp_max", d.amp_max)?,
        radius_min: s.f64_or("radius_min", d.radius_min)?,
        radius_max: s.f64_or("radius_max", d.radius_max)?,
        spinup_days: s.usize_or("spinup_days", d.spinup_days)?,
        kappa: s.f64_or("kappa", d.kappa)?,
        train_count: s.usize_or("train_count", d.train_count)?,
        test_count: s.usize_or("test_count", d.test_count)?,
        gap_days: s.usize_or("gap_days", d.gap_days)?,
    };
    generator.validate()?;
    s.finish()?;

    let d = GradcheckConfig::default();
    let mut s = Sect::new("gradcheck", raw.sections.remove("gradcheck"));
    let gradcheck = GradcheckConfig {
        nx: s.usize_or("nx", d.nx)?,
        ny: s.usize_or("ny", d.ny)?,
        n_steps: s.usize_or("n_steps", d.n_steps)?,
        samples: s.usize_or("samples", d.samples)?,
        eps: s.f64_or("eps", d.eps)?,
        tol: s.f64_or("tol", d.tol)?,
        convnet: match s.take("model") {
            None => d.convnet,
            Some(v) => match v.as_str() {
                "filter" => false,
                "convnet" => true,
                other => {
                    return Err(Error::Config(format!(
                        "[gradcheck] model must be filter or convnet, got '{other}'"
                    )))
                }
            },
        },
    };
    if gradcheck.samples == 0 {
        return Err(Error::Config("[gradcheck] samples must be at least 1".into()));
    }
    if !(gradcheck.eps > 0.0 && gradcheck.tol > 0.0) {
        return Err(Error::Config(
            "[gradcheck] eps and tol must be positive".into(),
        ));
    }
    s.finish()?;

    if let Some(sec) = raw.sections.keys().next() {
        return Err(Error::Config(format!("unknown config section [{sec}]")));
    }
    Ok(Resolved {
        seed,
        threads,
        grid,
        physics,
        step,
        cg,
        loss,
        optimizer,
        generator,
        gradcheck,
    })
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

impl Resolved {
    /// The reproducibility record: the full resolved configuration plus the
    /// command, version, and provenance of the inputs. Deliberately free of
    /// timestamps so identical runs write identical records.
    pub fn to_text(&self, command: &str, extras: &[(&str, String)]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{HEADER}");
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(s, "command = {command}");
        let _ = writeln!(s, "version = {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "threads = {}", self.threads);
        for (k, v) in extras {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "\n[grid]");
        let _ = writeln!(s, "nx = {}", self.grid.nx);
        let _ = writeln!(s, "ny = {}", self.grid.ny);
        let _ = writeln!(s, "dx = {}", fmt_f64(self.grid.dx));
        let _ = writeln!(s, "dy = {}", fmt_f64(self.grid.dy));
        let _ = writeln!(s, "\n[physics]");
        let _ = writeln!(s, "g = {}", fmt_f64(self.physics.g));
        let _ = writeln!(s, "f = {}", fmt_f64(self.physics.f));
        let _ = writeln!(s, "beta = {}", fmt_f64(self.physics.beta));
        let _ = writeln!(s, "l_r = {}", fmt_f64(self.physics.l_r));
        let _ = writeln!(s, "d = {}", fmt_f64(self.physics.d));
        let _ = writeln!(s, "\n[step]");
        let _ = writeln!(s, "dt = {}", fmt_f64(self.step.dt));
        let _ = writeln!(s, "n_steps = {}", self.step.n_steps);
        let _ = writeln!(s, "cfl_max = {}", fmt_f64(self.step.cfl_max));
        let _ = writeln!(s, "\n[cg]");
        let _ = writeln!(s, "max_iters = {}", self.cg.max_iters);
        let _ = writeln!(s, "tol = {}", fmt_f64(self.cg.tol));
        let _ = writeln!(s, "unrolled = {}", self.cg.unrolled);
        let _ = writeln!(s, "\n[loss]");
        let _ = writeln!(s, "lambda_l2 = {}", fmt_f64(self.loss.lambda_l2));
        let _ = writeln!(
            s,
            "divergence_weight = {}",
            fmt_f64(self.loss.divergence_weight)
        );
        let _ = writeln!(
            s,
            "scale_by_target_variance = {}",
            self.loss.scale_by_target_variance
        );
        let _ = writeln!(s, "\n[optimizer]");
        let _ = writeln!(s, "algorithm = {}", algorithm_name(&self.optimizer.algorithm));
        let _ = writeln!(s, "lr = {}", fmt_f64(self.optimizer.lr));
        let _ = writeln!(s, "decay_factor = {}", fmt_f64(self.optimizer.decay_factor));
        let _ = writeln!(s, "decay_every = {}", self.optimizer.decay_every);
        let _ = writeln!(s, "max_epochs = {}", self.optimizer.max_epochs);
        let _ = writeln!(s, "batch_size = {}", self.optimizer.batch_size);
        let _ = writeln!(s, "grad_tol = {}", fmt_f64(self.optimizer.grad_tol));
        let _ = writeln!(s, "history = {}", self.optimizer.history);
        let _ = writeln!(s, "checkpoint_every = {}", self.optimizer.checkpoint_every);
        let _ = writeln!(s, "\n[generator]");
        let g = &self.generator;
        let _ = writeln!(s, "n_eddies_min = {}", g.n_eddies_min);
        let _ = writeln!(s, "n_eddies_max = {}", g.n_eddies_max);
        let _ = writeln!(s, "amp_min = {}", fmt_f64(g.amp_min));
        let _ = writeln!(s, "amp_max = {}", fmt_f64(g.amp_max));
        let _ = writeln!(s, "radius_min = {}", fmt_f64(g.radius_min));
        let _ = writeln!(s, "radius_max = {}", fmt_f64(g.radius_max));
        let _ = writeln!(s, "spinup_days = {}", g.spinup_days);
        let _ = writeln!(s, "kappa = {}", fmt_f64(g.kappa));
        let _ = writeln!(s, "train_count = {}", g.train_count);
        let _ = writeln!(s, "test_count = {}", g.test_count);
        let _ = writeln!(s, "gap_days = {}", g.gap_days);
        let _ = writeln!(s, "\n[gradcheck]");
        let gc = &self.gradcheck;
        let _ = writeln!(s, "nx = {}", gc.nx);
        let _ = writeln!(s, "ny = {}", gc.ny);
        let _ = writeln!(s, "n_steps = {}", gc.n_steps);
        let _ = writeln!(s, "samples = {}", gc.samples);
        let _ = writeln!(s, "eps = {}", fmt_f64(gc.eps));
        let _ = writeln!(s, "tol = {}", fmt_f64(gc.tol));
        let _ = writeln!(s, "model = {}", if gc.convnet { "convnet" } else { "filter" });
        s
    }
}
