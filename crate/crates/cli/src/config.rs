//! Experiment configuration: a TOML file plus `section.key=value` overrides.
//! Every field has a default and the resolved config is echoed into the manifest.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use urlab::elliptic::SolverConfig;
use urlab::geometry::{make_cantor_set, make_lipschitz_graph, make_plane_set, sawtooth};
use urlab::identities::VerifyConfig;
use urlab::wasserstein::{AlphaConfig, LpConfig};
use urlab::whitney::{CensusConfig, WhitneyConfig};
use urlab::DiscreteMeasure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetKind {
    Plane,
    Graph,
    Cantor,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SetSection {
    pub kind: SetKind,
    pub n: usize,
    pub d: usize,
    /// Half-width of the sampled window.
    pub extent: f64,
    pub spacing: f64,
    /// Lipschitz constant of the sawtooth graph.
    pub lambda: f64,
    pub period: f64,
    /// Cantor generation.
    pub m: usize,
    /// Columnar point file for kind = "file".
    pub path: String,
}

impl Default for SetSection {
    fn default() -> Self {
        SetSection {
            kind: SetKind::Plane,
            n: 3,
            d: 1,
            extent: 1.0,
            spacing: 1.0 / 256.0,
            lambda: 0.2,
            period: 0.1,
            m: 4,
            path: String::new(),
        }
    }
}

impl SetSection {
    pub fn build(&self) -> Result<DiscreteMeasure> {
        Ok(match self.kind {
            SetKind::Plane => make_plane_set(self.n, self.d, self.extent, self.spacing)?,
            SetKind::Graph => make_lipschitz_graph(
                self.n,
                self.d,
                &sawtooth(self.lambda, self.period, self.n - self.d),
                self.lambda,
                self.extent,
                self.spacing,
            )?,
            SetKind::Cantor => make_cantor_set(self.m)?,
            SetKind::File => {
                if self.path.is_empty() {
                    bail!("set.kind = \"file\" needs set.path");
                }
                let f = std::fs::File::open(&self.path).with_context(|| format!("opening {}", self.path))?;
                DiscreteMeasure::read_columnar(std::io::BufReader::new(f))?
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BallSection {
    /// Number of seeded balls (centers on the support, dyadic radii in the window).
    pub count: usize,
    /// Explicit balls instead: centers are snapped to the support.
    pub centers: Vec<Vec<f64>>,
    pub radii: Vec<f64>,
}

impl Default for BallSection {
    fn default() -> Self {
        BallSection {
            count: 32,
            centers: Vec::new(),
            radii: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AhlforsSection {
    /// C_σ above this fails the check.
    pub bound: f64,
}

impl Default for AhlforsSection {
    fn default() -> Self {
        AhlforsSection { bound: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlphaSection {
    /// LP sample cap.
    pub cap: usize,
    pub lp_max_iter: usize,
    /// Simplex iterations and parameter tolerance of the flat-measure search.
    pub max_iter: usize,
    pub xtol: f64,
    pub max_flat_points: usize,
}

impl Default for AlphaSection {
    fn default() -> Self {
        let a = AlphaConfig::default();
        AlphaSection {
            cap: a.lp.cap,
            lp_max_iter: a.lp.max_iter,
            max_iter: a.max_iter,
            xtol: a.xtol,
            max_flat_points: a.max_flat_points,
        }
    }
}

impl AlphaSection {
    pub fn config(&self) -> AlphaConfig {
        AlphaConfig {
            lp: LpConfig {
                cap: self.cap,
                max_iter: self.lp_max_iter,
            },
            max_iter: self.max_iter,
            xtol: self.xtol,
            max_flat_points: self.max_flat_points,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistancesSection {
    pub beta: f64,
    pub alpha: f64,
    pub probes: usize,
    /// Minimum probe distance in spacings.
    pub min_dist: f64,
    /// Maximum probe distance as a fraction of the extent.
    pub max_dist: f64,
    /// Finite-difference step as a fraction of the distance.
    pub fd_step: f64,
}

impl Default for DistancesSection {
    fn default() -> Self {
        let v = VerifyConfig::default();
        DistancesSection {
            beta: v.beta,
            alpha: v.alpha,
            probes: v.probes,
            min_dist: v.min_dist,
            max_dist: v.max_dist,
            fd_step: v.fd_step,
        }
    }
}

impl DistancesSection {
    pub fn config(&self, seed: u64) -> VerifyConfig {
        VerifyConfig {
            probes: self.probes,
            min_dist: self.min_dist,
            max_dist: self.max_dist,
            beta: self.beta,
            alpha: self.alpha,
            fd_step: self.fd_step,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WhitneySection {
    /// Scale factor of the α balls.
    pub lambda: f64,
    pub epsilon: f64,
    pub k_max: u32,
    pub depth: u32,
    /// Evaluate μ_Q and α_{Q,k} for every cube of the dump.
    pub with_alpha: bool,
    /// Square sums: k, point near which x is chosen, radii, deepest level.
    pub k: u32,
    pub point: Vec<f64>,
    pub radii: Vec<f64>,
    /// Deepest census level; 0 picks 2m+2 for Cantor sets and 10 otherwise.
    pub max_level: u32,
    /// Cantor generations compared by ur-sum; empty uses set.m only.
    pub cantor_levels: Vec<usize>,
    pub census_samples: usize,
    pub exact_limit: usize,
}

impl Default for WhitneySection {
    fn default() -> Self {
        let w = WhitneyConfig::default();
        let c = CensusConfig::default();
        WhitneySection {
            lambda: w.lambda,
            epsilon: w.epsilon,
            k_max: w.k_max,
            depth: 8,
            with_alpha: false,
            k: 0,
            point: vec![0.0, 0.0, 0.0],
            radii: vec![0.1],
            max_level: 0,
            cantor_levels: Vec::new(),
            census_samples: c.samples,
            exact_limit: c.exact_limit,
        }
    }
}

impl WhitneySection {
    pub fn config(&self, alpha: &AlphaSection) -> WhitneyConfig {
        WhitneyConfig {
            lambda: self.lambda,
            epsilon: self.epsilon,
            k_max: self.k_max,
            alpha: alpha.config(),
        }
    }

    pub fn census(&self, seed: u64) -> CensusConfig {
        CensusConfig {
            samples: self.census_samples,
            exact_limit: self.exact_limit,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CarlesonFunction {
    /// f ≡ 1.
    One,
    /// Indicator of E₂ for the ball (e_center, e_radius).
    E2,
    /// a(X) from the Whitney analysis.
    A,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CarlesonSection {
    pub function: CarlesonFunction,
    pub squared: bool,
    /// h = smallest radius / cells_per_radius.
    pub cells_per_radius: f64,
    /// Excluded shell around Γ in units of h.
    pub shell: f64,
    pub e_center: Vec<f64>,
    pub e_radius: f64,
    pub eps: f64,
    /// Exponents of a(X).
    pub a_alpha: f64,
    pub a_beta: f64,
}

impl Default for CarlesonSection {
    fn default() -> Self {
        CarlesonSection {
            function: CarlesonFunction::One,
            squared: false,
            cells_per_radius: 32.0,
            shell: urlab::carleson::SHELL,
            e_center: vec![0.0, 0.0, 0.0],
            e_radius: 0.25,
            eps: 0.01,
            a_alpha: 1.0,
            a_beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Constant,
    /// g = first coordinate.
    Linear,
    /// g = 1 where the first coordinate exceeds the threshold.
    Halfspace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub center: Vec<f64>,
    pub half_width: f64,
    pub h: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            center: vec![0.0, 0.0, 0.0],
            half_width: 0.5,
            h: 1.0 / 64.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    pub threshold: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            kind: DataKind::Halfspace,
            threshold: 0.0,
        }
    }
}

impl DataSection {
    pub fn eval(&self, p: &[f64]) -> f64 {
        match self.kind {
            DataKind::Constant => 1.0,
            DataKind::Linear => p[0],
            DataKind::Halfspace => {
                if p[0] > self.threshold {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmSection {
    pub pole: Vec<f64>,
}

impl Default for HmSection {
    fn default() -> Self {
        HmSection {
            pole: vec![0.0, 0.0, 0.25],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AinftySection {
    pub center: Vec<f64>,
    pub radius: f64,
    pub sets: usize,
    pub deltas: Vec<f64>,
}

impl Default for AinftySection {
    fn default() -> Self {
        AinftySection {
            center: vec![0.0, 0.0, 0.0],
            radius: 0.25,
            sets: 64,
            deltas: vec![0.01, 0.05, 0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnSection {
    /// h = r / cells_per_radius (at least 32).
    pub cells_per_radius: f64,
    pub data: DataKind,
}

impl Default for SnSection {
    fn default() -> Self {
        SnSection {
            cells_per_radius: 32.0,
            data: DataKind::Linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub set: SetSection,
    pub balls: BallSection,
    pub ahlfors: AhlforsSection,
    pub alpha: AlphaSection,
    pub distances: DistancesSection,
    pub whitney: WhitneySection,
    pub carleson: CarlesonSection,
    pub solver: SolverConfig,
    pub grid: GridSection,
    pub data: DataSection,
    pub hm: HmSection,
    pub ainfty: AinftySection,
    pub sn: SnSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output: PathBuf::from("run"),
            set: SetSection::default(),
            balls: BallSection::default(),
            ahlfors: AhlforsSection::default(),
            alpha: AlphaSection::default(),
            distances: DistancesSection::default(),
            whitney: WhitneySection::default(),
            carleson: CarlesonSection::default(),
            solver: SolverConfig::default(),
            grid: GridSection::default(),
            data: DataSection::default(),
            hm: HmSection::default(),
            ainfty: AinftySection::default(),
            sn: SnSection::default(),
        }
    }
}

/// Parses the right-hand side of an override as a TOML value; bare words become strings.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .with_context(|| format!("override `{spec}` is not of the form section.key=value"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override `{spec}` has an empty key");
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .with_context(|| format!("override `{spec}`: `{k}` is not a section"))?;
    }
    let value = parse_value(raw.trim());
    // numeric keys given integer literals, e.g. solver.beta=2
    let value = match (&value, cur.get(keys[keys.len() - 1])) {
        (toml::Value::Integer(i), Some(toml::Value::Float(_))) => toml::Value::Float(*i as f64),
        _ => value,
    };
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Defaults, then the file (if any), then the overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = toml::Table::try_from(ExperimentConfig::default()).context("serializing defaults")?;
        let mut table = base;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let file: toml::Table = text
                .parse()
                .with_context(|| format!("parsing config {}", p.display()))?;
            merge(&mut table, file);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
        cfg.solver.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => {
                base.insert(k, toml::Value::Float(i as f64));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
