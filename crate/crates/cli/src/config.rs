//! Run configuration, read from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use goursat::geometry::{shapes, CurveSpec, GridOptions, Point, Refinement};
use goursat::optimize::PgOptions;
use goursat::problem::{builtin, ProblemSpec, QuadraticFamily};
use goursat::tsunami::{BasinModel, ObsCoords};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Forward,
    AdjointCheck,
    GradientCheck,
    Optimize,
    TsunamiTwin,
    TsunamiInvert,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Forward => "forward",
            Command::AdjointCheck => "adjoint-check",
            Command::GradientCheck => "gradient-check",
            Command::Optimize => "optimize",
            Command::TsunamiTwin => "tsunami-twin",
            Command::TsunamiInvert => "tsunami-invert",
        }
    }

    fn is_tsunami(self) -> bool {
        matches!(self, Command::TsunamiTwin | Command::TsunamiInvert)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    pub command: Option<Command>,
    #[serde(default)]
    pub seed: u64,
    /// Output directory, relative to the working directory.
    pub out: Option<PathBuf>,
    pub problem: Option<ProblemConfig>,
    pub domain: Option<DomainConfig>,
    pub grid: Option<GridOptions>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub adjoint_check: AdjointCheckConfig,
    #[serde(default)]
    pub gradient_check: GradientCheckConfig,
    #[serde(default)]
    pub optimize: OptimizeConfig,
    pub tsunami: Option<TsunamiConfig>,
    /// Directory of the config file; relative data paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// A built-in problem `id`, or a `family` with explicit coefficients.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub id: Option<String>,
    pub family: Option<QuadraticFamily>,
}

impl ProblemConfig {
    pub fn build(&self) -> Result<ProblemSpec, CliError> {
        match (&self.id, &self.family) {
            (Some(id), None) => Ok(builtin(id)?),
            (id, Some(f)) => Ok(f.build(id.as_deref().unwrap_or("family"))?),
            (None, None) => Err(CliError::Config("problem: give `id` or `family`".into())),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainConfig {
    Rectangle { a: f64, b: f64 },
    QuarterDisk { radius: f64 },
    /// Polyline through (2, 0), (2, 1), (1, 1), (1, 2), (0, 2).
    Staircase,
    Triangle { a: f64 },
    /// Corners from `(s_max, 0)` to `(0, t_max)`.
    Polyline { points: Vec<Point> },
    Curves {
        arcs: Vec<CurveSpec>,
        #[serde(default)]
        vertices: Vec<Point>,
    },
}

impl DomainConfig {
    pub fn curves(&self) -> (Vec<CurveSpec>, Vec<Point>) {
        match self {
            DomainConfig::Rectangle { a, b } => (shapes::rectangle(*a, *b), vec![]),
            DomainConfig::QuarterDisk { radius } => (shapes::quarter_disk(*radius), vec![]),
            DomainConfig::Staircase => (shapes::staircase(), vec![]),
            DomainConfig::Triangle { a } => (shapes::triangle(*a), vec![]),
            DomainConfig::Polyline { points } => (shapes::polyline(points), vec![]),
            DomainConfig::Curves { arcs, vertices } => (arcs.clone(), vertices.clone()),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Picard stopping tolerance for the state.
    pub state: f64,
    pub max_iter: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { state: goursat::optimize::STATE_TOL, max_iter: goursat::optimize::STATE_MAX_ITER }
    }
}

/// Affine control `value + s_slope s + t_slope t` in every component.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub value: f64,
    pub s_slope: f64,
    pub t_slope: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdjointCheckConfig {
    pub checkpoints: usize,
    pub rel_tol: f64,
}

impl Default for AdjointCheckConfig {
    fn default() -> Self {
        AdjointCheckConfig { checkpoints: 20, rel_tol: 1e-2 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientCheckConfig {
    pub directions: usize,
    pub eps: f64,
    pub rel_tol: f64,
}

impl Default for GradientCheckConfig {
    fn default() -> Self {
        GradientCheckConfig { directions: 10, eps: 1e-4, rel_tol: 1e-3 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeConfig {
    pub solver: PgOptions,
    pub extremum_samples: usize,
    pub extremum_lattice: usize,
    pub extremum_rel_tol: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig { solver: PgOptions::default(), extremum_samples: 200, extremum_lattice: 11, extremum_rel_tol: 1e-6 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsunamiConfig {
    pub model: BasinModel,
    /// Replace `t_range[1]` by the value that makes the rectangle compatible.
    #[serde(default)]
    pub auto_t2: bool,
    pub h_max: f64,
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub noise: f64,
    pub truth: Option<Bump>,
    pub observations: Option<ObservationsConfig>,
    #[serde(default = "twin_solver")]
    pub solver: PgOptions,
    /// Pass when the error at the smallest `λ` is below this.
    pub threshold: Option<f64>,
    /// Pass only if the error decreases strictly as `λ` decreases.
    #[serde(default)]
    pub expect_monotone: bool,
}

fn twin_solver() -> PgOptions {
    PgOptions { max_iter: 400, tol: 1e-12, stall_ok: true, ..PgOptions::default() }
}

/// `amplitude exp(-((r - r0)^2 + (t - t0)^2) / width)` in physical coordinates.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub amplitude: f64,
    pub center: [f64; 2],
    pub width: f64,
}

impl Bump {
    pub fn eval(&self, r: f64, t: f64) -> f64 {
        let d = (r - self.center[0]).powi(2) + (t - self.center[1]).powi(2);
        self.amplitude * (-d / self.width).exp()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationsConfig {
    pub path: PathBuf,
    pub coords: ObsCoords,
    #[serde(default = "yes")]
    pub has_header: bool,
    /// Zero-based columns holding the two coordinates and the value.
    #[serde(default = "first_three")]
    pub columns: [usize; 3],
}

fn yes() -> bool {
    true
}

fn first_three() -> [usize; 3] {
    [0, 1, 2]
}

/// Command-line overrides applied after parsing.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub command: Option<Command>,
    pub seed: Option<u64>,
    pub h_max: Option<f64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<RunConfig, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        RunConfig::from_toml(&text, &base)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        match (self.command, o.command) {
            (Some(a), Some(b)) if a != b => {
                return Err(CliError::Config(format!("command: config says `{}` but `{}` was requested", a.name(), b.name())))
            }
            (None, Some(b)) => self.command = Some(b),
            _ => {}
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(h) = o.h_max {
            if let Some(g) = &mut self.grid {
                g.h_max = h;
            }
            if let Some(t) = &mut self.tsunami {
                t.h_max = h;
            }
        }
        if o.out.is_some() {
            self.out = o.out.clone();
        }
        Ok(())
    }

    pub fn command(&self) -> Result<Command, CliError> {
        self.command.ok_or_else(|| CliError::Config("command: not given in the config or on the command line".into()))
    }

    /// Cross-field checks that serde cannot express.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.into()));
        if self.schema != SCHEMA_VERSION {
            return Err(CliError::Config(format!("schema: expected {SCHEMA_VERSION}, found {}", self.schema)));
        }
        let cmd = self.command()?;
        if cmd.is_tsunami() {
            let Some(t) = &self.tsunami else { return bad("tsunami: section is required for tsunami commands") };
            if !(t.h_max > 0.0) {
                return bad("tsunami.h_max: must be positive");
            }
            if t.lambdas.is_empty() || t.lambdas.iter().any(|l| !(*l > 0.0)) {
                return bad("tsunami.lambdas: need at least one positive value");
            }
            if !(t.noise >= 0.0) {
                return bad("tsunami.noise: must be non-negative");
            }
            if cmd == Command::TsunamiTwin && t.truth.is_none() {
                return bad("tsunami.truth: required by tsunami-twin");
            }
            if cmd == Command::TsunamiInvert && t.observations.is_none() {
                return bad("tsunami.observations: required by tsunami-invert");
            }
            return Ok(());
        }
        if self.problem.is_none() {
            return bad("problem: section is required");
        }
        if self.domain.is_none() {
            return bad("domain: section is required");
        }
        match &self.grid {
            None => return bad("grid: section is required"),
            Some(g) if !(g.h_max > 0.0) => return bad("grid.h_max: must be positive"),
            Some(g) if g.refine.iter().any(|r: &Refinement| !(r.h > 0.0)) => return bad("grid.refine.h: must be positive"),
            _ => {}
        }
        if cmd == Command::GradientCheck && !(self.gradient_check.eps > 0.0) {
            return bad("gradient_check.eps: must be positive");
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWIN: &str = r#"
schema = 1
command = "tsunami-twin"
[tsunami]
h_max = 0.25
lambdas = [1e-3]
[tsunami.model]
omega = 0.5
g = 1.0
c = 1.0
r_range = [0.0, 1.0]
t_range = [0.0, 1.0]
[tsunami.model.depth]
kind = "constant"
h0 = 1.0
[tsunami.truth]
amplitude = 1.0
center = [0.5, 0.5]
width = 0.05
"#;

    fn parse(text: &str) -> Result<RunConfig, CliError> {
        let cfg = RunConfig::from_toml(text, Path::new("."))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn config_error(text: &str) -> String {
        match parse(text) {
            Err(e @ CliError::Config(_)) => {
                assert_eq!(e.exit_code(), 2);
                e.to_string()
            }
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn twin_config_parses_with_defaults() {
        let cfg = parse(TWIN).unwrap();
        let t = cfg.tsunami.unwrap();
        assert_eq!(cfg.seed, 0);
        assert!(t.solver.stall_ok && t.solver.max_iter == 400);
        assert_eq!(t.noise, 0.0);
    }

    #[test]
    fn missing_depth_profile_names_the_field() {
        let text = TWIN.replace("[tsunami.model.depth]\nkind = \"constant\"\nh0 = 1.0\n", "");
        let msg = config_error(&text);
        assert!(msg.contains("depth"), "{msg}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let msg = config_error(&TWIN.replace("h_max = 0.25", "h_max = 0.25\nhmax = 0.1"));
        assert!(msg.contains("hmax"), "{msg}");
        let msg = config_error(&TWIN.replace("kind = \"constant\"", "kind = \"cubic\""));
        assert!(msg.contains("cubic"), "{msg}");
    }

    #[test]
    fn schema_and_command_are_checked() {
        assert!(config_error(&TWIN.replace("schema = 1", "schema = 2")).starts_with("invalid configuration: schema"));
        let mut cfg = RunConfig::from_toml(TWIN, Path::new(".")).unwrap();
        let e = cfg.apply(&Overrides { command: Some(Command::Forward), ..Overrides::default() }).unwrap_err();
        assert!(e.to_string().contains("command"));
        let mut cfg = RunConfig::from_toml(&TWIN.replace("command = \"tsunami-twin\"\n", ""), Path::new(".")).unwrap();
        assert!(cfg.validate().is_err());
        cfg.apply(&Overrides { command: Some(Command::TsunamiTwin), seed: Some(9), h_max: Some(0.125), out: None }).unwrap();
        cfg.validate().unwrap();
        assert_eq!((cfg.seed, cfg.tsunami.unwrap().h_max), (9, 0.125));
    }

    #[test]
    fn section_requirements() {
        let grid = "schema = 1\ncommand = \"forward\"\n[problem]\nid = \"lq\"\n[domain]\nshape = \"staircase\"\n";
        assert!(config_error(grid).contains("grid"));
        assert!(config_error(&format!("{grid}[grid]\nh_max = 0.0\n")).contains("grid.h_max"));
        let cfg = parse(&format!("{grid}[grid]\nh_max = 0.25\n")).unwrap();
        assert!(matches!(cfg.domain, Some(DomainConfig::Staircase)));
        let unknown = parse(&format!("{grid}[grid]\nh_max = 0.25\n").replace("\"lq\"", "\"nope\"")).unwrap();
        assert!(matches!(unknown.problem.unwrap().build(), Err(CliError::Config(m)) if m.contains("nope")));
        assert!(config_error(&TWIN.replace("[tsunami.truth]", "[unused]")).contains("unused"));
        assert!(config_error(&TWIN.replace("lambdas = [1e-3]", "lambdas = [0.0]")).contains("lambdas"));
    }

    #[test]
    fn bump_peaks_at_its_center() {
        let b = Bump { amplitude: 2.0, center: [0.5, 0.25], width: 0.1 };
        assert_eq!(b.eval(0.5, 0.25), 2.0);
        assert!((b.eval(0.6, 0.25) - 2.0 * (-0.1f64).exp()).abs() < 1e-15);
    }
}
