//! Line-oriented `key = value` configuration with `#` comments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use soc_core::classifier::{ClassifierConfig, SparsityMode};
use soc_core::learning::{KsvdConfig, Strategy};
use soc_core::mask::{MaskEstimatorConfig, Neighborhood, PairwiseModel};
use soc_core::solvers::SolverConfig;
use soc_core::synth::{OcclusionShape, RegionKind, SynthSpec};

use crate::pipeline::{Method, ScenarioSpec};
use crate::CliError;

/// Every key the commands understand.
pub const KNOWN_KEYS: &[&str] = &[
    // corpus generation
    "classes",
    "samples_per_class",
    "test_per_class",
    "height",
    "width",
    "subspace_dim",
    "noise_sigma",
    "class_contrast",
    "occlusions",
    "collect_subjects",
    "collect_per_subject",
    "invalid_subjects",
    "invalid_per_subject",
    "unknown_occlusion",
    "unknown_per_subject",
    "seed",
    // inputs
    "corpus",
    "samples",
    "occlusion_dictionary",
    "results",
    // collection
    "strategy",
    "labeled",
    "h",
    "beta",
    "tau_schedule",
    "max_outer_iters",
    "neighborhood",
    "pairwise",
    "degeneracy_floor",
    // features
    "feature_height",
    "feature_width",
    // training
    "atoms",
    "sparsity",
    "ksvd_iterations",
    "code_penalty",
    // classification
    "mode",
    "method",
    "epsilon",
    "lambda",
    "q",
    "max_iters",
    "tol",
    "theta_face",
    "theta_occlusion",
    "verbose",
    // sweep
    "sizes",
];

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    /// Directory relative paths in the file resolve against.
    base: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg = RunConfig {
            values: BTreeMap::new(),
            base: base.to_path_buf(),
        };
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("config line {}: expected key = value", no + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, &base)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(CliError::Usage(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CliError::Usage(format!("bad value `{v}` for `{key}`"))),
        }
    }

    fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("bad value `{v}` for `{key}`"))),
        }
    }

    fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, CliError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| CliError::Usage(format!("bad list item `{s}` for `{key}`")))
                })
                .collect::<Result<Vec<T>, _>>()
                .map(Some),
        }
    }

    /// A path key, resolved against the config file directory. Must exist.
    pub fn input_path(&self, key: &str) -> Result<PathBuf, CliError> {
        let v = self
            .get_str(key)
            .ok_or_else(|| CliError::Usage(format!("missing required key `{key}`")))?;
        let p = self.base.join(v);
        if !p.exists() {
            return Err(CliError::Data(format!("`{key}` path {} does not exist", p.display())));
        }
        Ok(p)
    }

    /// Optional path key; must exist when given.
    pub fn optional_input_path(&self, key: &str) -> Result<Option<PathBuf>, CliError> {
        match self.get_str(key) {
            None | Some("") | Some("none") => Ok(None),
            Some(_) => self.input_path(key).map(Some),
        }
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get("seed", 1)
    }

    pub fn scenario(&self) -> Result<ScenarioSpec, CliError> {
        let d = ScenarioSpec::default();
        let s = &d.synth;
        let occlusion_shapes = match self.get_str("occlusions") {
            None => s.occlusion_shapes.clone(),
            Some(v) => parse_shapes(v)?,
        };
        let unknown_occlusion = match self.get_str("unknown_occlusion") {
            None | Some("none") => None,
            Some(v) => {
                let (lo, hi) = v
                    .split_once(':')
                    .ok_or_else(|| CliError::Usage("unknown_occlusion expects lo:hi".into()))?;
                let p = |x: &str| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|_| CliError::Usage(format!("bad fraction `{x}`")))
                };
                Some((p(lo)?, p(hi)?))
            }
        };
        Ok(ScenarioSpec {
            synth: SynthSpec {
                classes: self.get("classes", s.classes)?,
                samples_per_class: self.get("samples_per_class", s.samples_per_class)?,
                test_per_class: self.get("test_per_class", s.test_per_class)?,
                height: self.get("height", s.height)?,
                width: self.get("width", s.width)?,
                subspace_dim: self.get("subspace_dim", s.subspace_dim)?,
                occlusion_shapes,
                noise_sigma: self.get("noise_sigma", s.noise_sigma)?,
                class_contrast: self.get("class_contrast", s.class_contrast)?,
                seed: self.seed()?,
            },
            collect_subjects: self.get("collect_subjects", d.collect_subjects)?,
            collect_per_subject: self.get("collect_per_subject", d.collect_per_subject)?,
            invalid_subjects: self.get("invalid_subjects", d.invalid_subjects)?,
            invalid_per_subject: self.get("invalid_per_subject", d.invalid_per_subject)?,
            unknown_occlusion,
            unknown_per_subject: self.get("unknown_per_subject", d.unknown_per_subject)?,
        })
    }

    pub fn strategy(&self) -> Result<Strategy, CliError> {
        self.get("strategy", Strategy::Soc)
    }

    pub fn labeled(&self) -> Result<bool, CliError> {
        self.get("labeled", true)
    }

    pub fn mask(&self) -> Result<MaskEstimatorConfig, CliError> {
        let d = MaskEstimatorConfig::default();
        let neighborhood = match self.get_str("neighborhood") {
            None => d.neighborhood,
            Some("4") => Neighborhood::Four,
            Some("8") => Neighborhood::Eight,
            Some(v) => return Err(CliError::Usage(format!("neighborhood must be 4 or 8, got `{v}`"))),
        };
        let pairwise = match self.get_str("pairwise") {
            None => d.pairwise,
            Some("potts") => PairwiseModel::Potts,
            Some("cooccurrence") => PairwiseModel::Cooccurrence,
            Some(v) => return Err(CliError::Usage(format!("unknown pairwise model `{v}`"))),
        };
        let cfg = MaskEstimatorConfig {
            h: self.get("h", d.h)?,
            beta: self.get("beta", d.beta)?,
            tau_schedule: self.get_list("tau_schedule")?.unwrap_or(d.tau_schedule),
            max_outer_iters: self.get("max_outer_iters", d.max_outer_iters)?,
            neighborhood,
            pairwise,
            degeneracy_floor: self.get("degeneracy_floor", d.degeneracy_floor)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn feature_shape(&self) -> Result<(usize, usize), CliError> {
        Ok((self.get("feature_height", 12)?, self.get("feature_width", 10)?))
    }

    pub fn ksvd(&self) -> Result<KsvdConfig, CliError> {
        let d = KsvdConfig::default();
        Ok(KsvdConfig {
            atom_count: self.get("atoms", d.atom_count)?,
            sparsity_budget: self.get("sparsity", d.sparsity_budget)?,
            iterations: self.get("ksvd_iterations", d.iterations)?,
            seed: self.seed()?,
            code_penalty: self.get("code_penalty", d.code_penalty)?,
        })
    }

    pub fn classifier(&self) -> Result<ClassifierConfig, CliError> {
        let d = ClassifierConfig::default();
        let s = SolverConfig::default();
        let q = match self.get_str("q") {
            None => s.q_norm,
            Some("inf") => f64::INFINITY,
            Some(_) => self.get("q", s.q_norm)?,
        };
        let cfg = ClassifierConfig {
            sparsity_mode: self.get("mode", SparsityMode::Structured)?,
            solver: SolverConfig {
                epsilon: self.get("epsilon", s.epsilon)?,
                lambda: self.get_opt("lambda")?,
                q_norm: q,
                max_iters: self.get("max_iters", s.max_iters)?,
                tol: self.get("tol", s.tol)?,
                ..s
            },
            theta_face: self.get("theta_face", d.theta_face)?,
            theta_occlusion: self.get("theta_occlusion", d.theta_occlusion)?,
            baseline_identity_occlusion: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn method(&self) -> Result<Method, CliError> {
        match self.get_str("method").unwrap_or("soc") {
            "soc" => Ok(Method::Soc),
            "src" => Ok(Method::Src),
            "src-identity" => Ok(Method::SrcIdentity),
            v => Err(CliError::Usage(format!("unknown method `{v}`"))),
        }
    }

    pub fn sizes(&self) -> Result<Vec<usize>, CliError> {
        Ok(self
            .get_list("sizes")?
            .unwrap_or_else(|| vec![2, 3, 5, 7, 10, 20, 30, 40, 50, 60]))
    }
}

/// `name:region:fraction` items separated by commas.
pub fn parse_shapes(v: &str) -> Result<Vec<OcclusionShape>, CliError> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let parts: Vec<&str> = item.trim().split(':').collect();
            if parts.len() != 3 {
                return Err(CliError::Usage(format!(
                    "occlusion `{item}` should read name:region:fraction"
                )));
            }
            let region: RegionKind = parts[1]
                .parse()
                .map_err(|_| CliError::Usage(format!("unknown region `{}`", parts[1])))?;
            let fraction: f64 = parts[2]
                .parse()
                .map_err(|_| CliError::Usage(format!("bad fraction `{}`", parts[2])))?;
            Ok(OcclusionShape::new(parts[0], region, fraction))
        })
        .collect()
}
