//! Experiment plans: a flat TOML file naming a problem, an optimizer variant
//! and a budget.
//!
//! ```toml
//! problem = "mb_10"
//! variant = "pls+gaussian"
//! repetitions = 10
//! total_budget = 810
//! doe_size = "d"          # "5", "d", "2d" or an integer
//! base_seed = 0
//! output_dir = "results/mb10"
//! ```
//!
//! Optional keys: `d_e` (2), `budget_per_subspace` (20 d_e), `max_nb_it`,
//! `problem_seed` (0), `workers`, `clock` ("off" or "wall").

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use egorse::embeddings::MethodTag;
use egorse::problems::{problem_by_name, EmbeddedProblem};
use egorse::{EgorseConfig, EgorseError, Result};
use serde::Deserialize;

/// The six optimizer variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Gaussian,
    Hash,
    Pls,
    PlsGaussian,
    Mgp,
    MgpGaussian,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Gaussian,
        Variant::Hash,
        Variant::Pls,
        Variant::PlsGaussian,
        Variant::Mgp,
        Variant::MgpGaussian,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Gaussian => "gaussian",
            Variant::Hash => "hash",
            Variant::Pls => "pls",
            Variant::PlsGaussian => "pls+gaussian",
            Variant::Mgp => "mgp",
            Variant::MgpGaussian => "mgp+gaussian",
        }
    }

    pub fn methods(&self) -> Vec<MethodTag> {
        match self {
            Variant::Gaussian => vec![MethodTag::Gaussian],
            Variant::Hash => vec![MethodTag::Hash],
            Variant::Pls => vec![MethodTag::Pls],
            Variant::PlsGaussian => vec![MethodTag::Pls, MethodTag::Gaussian],
            Variant::Mgp => vec![MethodTag::Mgp],
            Variant::MgpGaussian => vec![MethodTag::Mgp, MethodTag::Gaussian],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.as_str()).collect();
                format!("unknown variant '{s}' (expected one of {})", names.join(", "))
            })
    }
}

/// Size rule of the initial design.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DoeRule {
    Dim,
    TwiceDim,
    Fixed(usize),
}

impl DoeRule {
    pub fn size(&self, d: usize) -> usize {
        match self {
            DoeRule::Dim => d,
            DoeRule::TwiceDim => 2 * d,
            DoeRule::Fixed(n) => *n,
        }
    }
}

impl FromStr for DoeRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "d" => Ok(DoeRule::Dim),
            "2d" => Ok(DoeRule::TwiceDim),
            n => n
                .parse()
                .map(DoeRule::Fixed)
                .map_err(|_| format!("doe_size '{s}' is not \"d\", \"2d\" or an integer")),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum DoeField {
    Int(i64),
    Text(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlan {
    problem: Option<String>,
    variant: Option<String>,
    repetitions: Option<i64>,
    total_budget: Option<i64>,
    doe_size: Option<DoeField>,
    base_seed: Option<u64>,
    output_dir: Option<String>,
    d_e: Option<i64>,
    budget_per_subspace: Option<i64>,
    max_nb_it: Option<i64>,
    problem_seed: Option<u64>,
    workers: Option<i64>,
    clock: Option<String>,
}

/// A plan whose arithmetic has been checked.
#[derive(Debug, Clone)]
pub struct ResolvedPlan {
    pub problem: String,
    pub problem_seed: u64,
    pub variant: Variant,
    pub repetitions: usize,
    pub total_budget: usize,
    pub doe_rule: DoeRule,
    pub base_seed: u64,
    pub output_dir: PathBuf,
    pub workers: Option<usize>,
    /// Outer iterations of a two-method variant with the same budget.
    pub base_max_nb_it: usize,
    /// Template with `seed = base_seed`; run `r` uses `base_seed + r`.
    pub config: EgorseConfig,
}

impl ResolvedPlan {
    pub fn config_for(&self, repetition: usize) -> EgorseConfig {
        EgorseConfig {
            seed: self.base_seed.wrapping_add(repetition as u64),
            ..self.config.clone()
        }
    }

    pub fn build_problem(&self) -> Result<EmbeddedProblem> {
        problem_by_name(&self.problem, self.problem_seed)
    }
}

impl fmt::Display for ResolvedPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        let methods: Vec<_> = c.methods.iter().map(|m| m.as_str()).collect();
        writeln!(f, "problem             = {} (d = {}, problem_seed = {})", self.problem, c.d, self.problem_seed)?;
        writeln!(f, "variant             = {}", self.variant)?;
        writeln!(f, "methods             = [{}]", methods.join(", "))?;
        writeln!(f, "repetitions         = {}", self.repetitions)?;
        writeln!(f, "seeds               = {}..={}", self.base_seed, self.base_seed + self.repetitions as u64 - 1)?;
        writeln!(f, "d_e                 = {}", c.d_e)?;
        writeln!(f, "initial_doe_size    = {}", c.initial_doe_size)?;
        writeln!(f, "budget_per_subspace = {}", c.budget_per_subspace)?;
        if c.methods.len() == 1 {
            writeln!(f, "max_nb_it           = {} (base {} doubled for a single-method variant)", c.max_nb_it, self.base_max_nb_it)?;
        } else {
            writeln!(f, "max_nb_it           = {}", c.max_nb_it)?;
        }
        writeln!(
            f,
            "total_budget        = {} = {} + {} x {} x {}",
            self.total_budget,
            c.initial_doe_size,
            c.max_nb_it,
            c.methods.len(),
            c.budget_per_subspace
        )?;
        writeln!(f, "wall_clock          = {}", if c.record_wall_clock { "wall" } else { "off" })?;
        write!(f, "output_dir          = {}", self.output_dir.display())
    }
}

/// Reads and resolves a plan file. Relative output directories are taken
/// relative to the plan file.
pub fn load_plan(path: &Path) -> Result<ResolvedPlan> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EgorseError::Plan(format!("cannot read {}: {e}", path.display())))?;
    let mut plan = parse_plan(&text)?;
    if plan.output_dir.is_relative() {
        if let Some(parent) = path.parent() {
            plan.output_dir = parent.join(&plan.output_dir);
        }
    }
    Ok(plan)
}

/// Parses and resolves plan text, listing every violated check.
pub fn parse_plan(text: &str) -> Result<ResolvedPlan> {
    let raw: RawPlan = toml::from_str(text).map_err(|e| EgorseError::Plan(format!("unparseable plan: {e}")))?;
    let mut errors: Vec<String> = Vec::new();
    let mut need = |field: &str, present: bool| {
        if !present {
            errors.push(format!("{field}: missing"));
        }
    };
    need("problem", raw.problem.is_some());
    need("variant", raw.variant.is_some());
    need("total_budget", raw.total_budget.is_some());
    need("base_seed", raw.base_seed.is_some());
    need("output_dir", raw.output_dir.is_some());

    let positive = |errors: &mut Vec<String>, field: &str, v: Option<i64>, min: i64| -> Option<usize> {
        match v {
            Some(v) if v < min => {
                errors.push(format!("{field}: {v} is below {min}"));
                None
            }
            Some(v) => Some(v as usize),
            None => None,
        }
    };

    let variant = raw.variant.as_deref().and_then(|s| match s.parse::<Variant>() {
        Ok(v) => Some(v),
        Err(e) => {
            errors.push(format!("variant: {e}"));
            None
        }
    });
    let problem = raw.problem.as_deref().and_then(|name| match problem_by_name(name, raw.problem_seed.unwrap_or(0)) {
        Ok(p) => Some(p),
        Err(e) => {
            errors.push(format!("problem: {e}"));
            None
        }
    });
    let doe_rule = match &raw.doe_size {
        None => Some(DoeRule::Dim),
        Some(DoeField::Int(n)) if *n >= 0 => Some(DoeRule::Fixed(*n as usize)),
        Some(DoeField::Int(n)) => {
            errors.push(format!("doe_size: {n} is negative"));
            None
        }
        Some(DoeField::Text(s)) => match s.parse() {
            Ok(r) => Some(r),
            Err(e) => {
                errors.push(e);
                None
            }
        },
    };
    let repetitions = positive(&mut errors, "repetitions", Some(raw.repetitions.unwrap_or(10)), 1);
    let total_budget = positive(&mut errors, "total_budget", raw.total_budget, 1);
    let d_e = positive(&mut errors, "d_e", Some(raw.d_e.unwrap_or(2)), 1);
    let budget_per_subspace = positive(
        &mut errors,
        "budget_per_subspace",
        raw.budget_per_subspace.or(d_e.map(|d_e| 20 * d_e as i64)),
        1,
    );
    let explicit_it = positive(&mut errors, "max_nb_it", raw.max_nb_it, 0);
    let workers = positive(&mut errors, "workers", raw.workers, 1);
    let record_wall_clock = match raw.clock.as_deref() {
        None | Some("off") => false,
        Some("wall") => true,
        Some(other) => {
            errors.push(format!("clock: '{other}' is not \"off\" or \"wall\""));
            false
        }
    };

    let mut resolved = None;
    if let (Some(variant), Some(problem), Some(doe_rule), Some(d_e), Some(bps), Some(total)) =
        (variant, problem.as_ref(), doe_rule, d_e, budget_per_subspace, total_budget)
    {
        let d = problem.d();
        let doe = doe_rule.size(d);
        let methods = variant.methods();
        let t = methods.len();
        // Budgets are equalized against a two-method variant.
        let per_base_iteration = 2 * bps;
        let base = match explicit_it {
            Some(base) => {
                let expected = doe + base * per_base_iteration;
                if expected != total {
                    errors.push(format!(
                        "total_budget: {total} != initial_doe_size + max_nb_it x T x budget_per_subspace = {doe} + {} x {t} x {bps} = {expected}",
                        base * 2 / t
                    ));
                }
                Some(base)
            }
            None if total < doe || (total - doe) % per_base_iteration != 0 => {
                errors.push(format!(
                    "total_budget: {total} - initial_doe_size {doe} is not a multiple of 2 x budget_per_subspace = {per_base_iteration}"
                ));
                None
            }
            None => Some((total - doe) / per_base_iteration),
        };
        if let Some(base) = base {
            let config = EgorseConfig {
                d_e,
                methods,
                max_nb_it: base * 2 / t,
                budget_per_subspace: bps,
                initial_doe_size: doe,
                seed: raw.base_seed.unwrap_or(0),
                record_wall_clock,
                ..EgorseConfig::new(d)
            };
            match config.validate() {
                Err(e) => errors.push(format!("config: {e}")),
                Ok(()) => {
                    resolved = Some((config, base));
                }
            }
        }
    }

    if !errors.is_empty() {
        return Err(EgorseError::Plan(errors.join("; ")));
    }
    let (config, base_max_nb_it) = resolved.expect("all checks passed");
    Ok(ResolvedPlan {
        problem: raw.problem.unwrap_or_default(),
        problem_seed: raw.problem_seed.unwrap_or(0),
        variant: variant.expect("checked"),
        repetitions: repetitions.expect("checked"),
        total_budget: total_budget.expect("checked"),
        doe_rule: doe_rule.expect("checked"),
        base_seed: raw.base_seed.expect("checked"),
        output_dir: PathBuf::from(raw.output_dir.expect("checked")),
        workers,
        base_max_nb_it,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MB10: &str = r#"
problem = "mb_10"
variant = "pls+gaussian"
total_budget = 810
doe_size = "d"
base_seed = 0
output_dir = "out"
"#;

    #[test]
    fn resolves_paired_variant() {
        let p = parse_plan(MB10).unwrap();
        assert_eq!(p.config.max_nb_it, 10);
        assert_eq!(p.config.total_evaluations(), 810);
        assert_eq!(p.repetitions, 10);
        assert!(p.to_string().contains("max_nb_it           = 10"));
    }

    #[test]
    fn single_method_variant_doubles() {
        let p = parse_plan(&MB10.replace("pls+gaussian", "gaussian")).unwrap();
        assert_eq!(p.config.max_nb_it, 20);
        assert_eq!(p.config.total_evaluations(), 810);
        assert!(p.to_string().contains("base 10 doubled"));
        let p = parse_plan(&format!("{}max_nb_it = 10\n", MB10.replace("pls+gaussian", "hash"))).unwrap();
        assert_eq!(p.config.max_nb_it, 20);
    }

    #[test]
    fn arithmetic_and_names_are_reported() {
        let e = parse_plan(&MB10.replace("810", "811")).unwrap_err().to_string();
        assert!(e.contains("total_budget"), "{e}");
        let e = parse_plan(&format!("{MB10}max_nb_it = 9\n")).unwrap_err().to_string();
        assert!(e.contains("total_budget") && e.contains("730"), "{e}");
        let e = parse_plan(&MB10.replace("pls+gaussian", "egorse-foo")).unwrap_err().to_string();
        assert!(e.contains("variant") && e.contains("egorse-foo"), "{e}");
        let e = parse_plan(&MB10.replace("base_seed = 0\n", "")).unwrap_err().to_string();
        assert!(e.contains("base_seed: missing"), "{e}");
        let e = parse_plan(&MB10.replace("mb_10", "rover_60")).unwrap_err().to_string();
        assert!(e.contains("problem"), "{e}");
        assert!(parse_plan("problem = [").is_err());
        assert!(parse_plan(&format!("{MB10}colour = 1\n")).is_err());
    }

    #[test]
    fn doe_rules() {
        assert_eq!("2d".parse::<DoeRule>().unwrap().size(7), 14);
        assert_eq!("5".parse::<DoeRule>().unwrap().size(7), 5);
        let p = parse_plan(&MB10.replace("\"d\"", "5").replace("810", "805")).unwrap();
        assert_eq!(p.config.initial_doe_size, 5);
        assert!("x".parse::<DoeRule>().is_err());
    }
}
