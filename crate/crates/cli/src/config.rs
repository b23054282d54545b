//! Flat `key = value` run configuration.
//!
//! Blank lines and text after `#` are ignored. Every key is optional and
//! falls back to the library default; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use emd_core::corrector::{Cancellation, CorrectorSpace};
use emd_core::schedule::{GenWeighting, NoiseFeatures, ScheduleKind, ScoreWeighting};
use emd_core::{Activation, DistillConfig, GeneratorLoss, GeneratorMode, MixtureTeacher};

use crate::error::{CliError, CliResult};

/// Environment variable that replaces `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "EMD_OUTPUT_DIR";

pub const KEYS: &[&str] = &[
    "seed",
    "output_dir",
    "teacher.path",
    "teacher.builtin",
    "teacher.neural_steps",
    "schedule.kind",
    "schedule.lambda_min",
    "schedule.lambda_max",
    "schedule.lambda_star",
    "corrector.space",
    "corrector.steps",
    "corrector.step_eps",
    "corrector.step_z",
    "corrector.sample_z",
    "corrector.cancellation",
    "distill.batch_size",
    "distill.iterations",
    "distill.score_ratio",
    "distill.lr_g",
    "distill.lr_s",
    "distill.beta1",
    "distill.beta2",
    "distill.gen_weighting",
    "distill.score_weighting",
    "distill.generator_loss",
    "distill.warmup_steps",
    "distill.grad_norm_limit",
    "model.latent_dim",
    "model.generator_hidden",
    "model.score_hidden",
    "model.activation",
    "model.generator_mode",
    "model.features",
    "eval.every",
    "eval.samples",
    "checkpoint.every",
];

#[derive(Debug, Clone, PartialEq)]
pub enum TeacherSource {
    Builtin(String),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub distill: DistillConfig,
    pub teacher: TeacherSource,
    /// Score-matching steps for a neural stand-in of the teacher; 0 uses the
    /// analytic score.
    pub teacher_neural_steps: usize,
    pub output_dir: PathBuf,
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            distill: DistillConfig::default(),
            teacher: TeacherSource::Builtin("ring8".into()),
            teacher_neural_steps: 0,
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
        }
    }
}

fn invalid(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("config key `{key}`: {msg}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> CliResult<T> {
    v.parse().map_err(|_| invalid(key, format!("cannot parse `{v}`")))
}

fn choice<T>(key: &str, v: &str, parsed: Option<T>) -> CliResult<T> {
    parsed.ok_or_else(|| invalid(key, format!("unknown value `{v}`")))
}

fn widths(key: &str, v: &str) -> CliResult<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|w| num(key, w.trim())).collect()
}

fn boolean(key: &str, v: &str) -> CliResult<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(invalid(key, format!("expected true or false, got `{v}`"))),
    }
}

/// Splits the text into keys and values, rejecting duplicates, unknown keys
/// and lines without `=`.
pub fn parse_pairs(text: &str) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Validation(format!(
                "config line {}: expected `key = value`, got `{line}`",
                i + 1
            )));
        };
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(invalid(k, format!("unknown key on line {}", i + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(invalid(k, format!("set twice (line {})", i + 1)));
        }
    }
    Ok(out)
}

impl RunConfig {
    /// Parses and validates. Relative teacher paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> CliResult<Self> {
        let pairs = parse_pairs(text)?;
        if pairs.contains_key("teacher.path") && pairs.contains_key("teacher.builtin") {
            return Err(invalid("teacher.path", "conflicts with teacher.builtin; set one"));
        }
        let mut rc = RunConfig::default();
        let d = &mut rc.distill;
        let (mut step_eps, mut step_z) = (d.corrector.gamma_eps.sqrt(), d.corrector.gamma_z.sqrt());
        for (k, v) in &pairs {
            let (k, v) = (k.as_str(), v.as_str());
            match k {
                "seed" => d.seed = num(k, v)?,
                "output_dir" => rc.output_dir = PathBuf::from(v),
                "teacher.path" => rc.teacher = TeacherSource::File(base.join(v)),
                "teacher.builtin" => rc.teacher = TeacherSource::Builtin(v.to_string()),
                "teacher.neural_steps" => rc.teacher_neural_steps = num(k, v)?,
                "schedule.kind" => d.schedule.kind = choice(k, v, ScheduleKind::parse(v))?,
                "schedule.lambda_min" => d.schedule.lambda_min = num(k, v)?,
                "schedule.lambda_max" => d.schedule.lambda_max = num(k, v)?,
                "schedule.lambda_star" => d.schedule.lambda_star = num(k, v)?,
                "corrector.space" => d.corrector.space = choice(k, v, CorrectorSpace::parse(v))?,
                "corrector.steps" => d.corrector.steps = num(k, v)?,
                "corrector.step_eps" => step_eps = num(k, v)?,
                "corrector.step_z" => step_z = num(k, v)?,
                "corrector.sample_z" => d.corrector.sample_z = boolean(k, v)?,
                "corrector.cancellation" => {
                    d.corrector.cancellation = choice(k, v, Cancellation::parse(v))?
                }
                "distill.batch_size" => d.batch_size = num(k, v)?,
                "distill.iterations" => d.iterations = num(k, v)?,
                "distill.score_ratio" => d.score_ratio = num(k, v)?,
                "distill.lr_g" => d.lr_g = num(k, v)?,
                "distill.lr_s" => d.lr_s = num(k, v)?,
                "distill.beta1" => d.beta1 = num(k, v)?,
                "distill.beta2" => d.beta2 = num(k, v)?,
                "distill.gen_weighting" => d.gen_weighting = choice(k, v, GenWeighting::parse(v))?,
                "distill.score_weighting" => {
                    d.score_weighting = choice(k, v, ScoreWeighting::parse(v))?
                }
                "distill.generator_loss" => {
                    d.generator_loss = choice(k, v, GeneratorLoss::parse(v))?
                }
                "distill.warmup_steps" => d.warmup_steps = num(k, v)?,
                "distill.grad_norm_limit" => d.grad_norm_limit = num(k, v)?,
                "model.latent_dim" => d.model.latent_dim = num(k, v)?,
                "model.generator_hidden" => d.model.generator_hidden = widths(k, v)?,
                "model.score_hidden" => d.model.score_hidden = widths(k, v)?,
                "model.activation" => d.model.activation = choice(k, v, Activation::parse(v))?,
                "model.generator_mode" => {
                    d.model.generator_mode = choice(k, v, GeneratorMode::parse(v))?
                }
                "model.features" => d.model.features = choice(k, v, NoiseFeatures::parse(v))?,
                "eval.every" => d.eval_every = num(k, v)?,
                "eval.samples" => d.eval_samples = num(k, v)?,
                "checkpoint.every" => rc.checkpoint_every = num(k, v)?,
                _ => unreachable!("key list and match arms disagree on `{k}`"),
            }
        }
        if !(step_eps.is_finite() && (0.0..=1.0).contains(&step_eps)) {
            return Err(invalid("corrector.step_eps", format!("must lie in [0, 1], got {step_eps}")));
        }
        if !(step_z.is_finite() && step_z >= 0.0) {
            return Err(invalid("corrector.step_z", format!("must be non-negative, got {step_z}")));
        }
        d.corrector.gamma_eps = step_eps * step_eps;
        d.corrector.gamma_z = step_z * step_z;
        rc.distill.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        if let TeacherSource::File(p) = &rc.teacher {
            if !p.is_file() {
                return Err(invalid("teacher.path", format!("no such file {}", p.display())));
            }
        }
        if let TeacherSource::Builtin(name) = &rc.teacher {
            builtin_teacher(name).ok_or_else(|| invalid("teacher.builtin", format!("unknown teacher `{name}`")))?;
        }
        Ok(rc)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// `output_dir`, unless the environment overrides it.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }

    pub fn load_teacher(&self) -> CliResult<MixtureTeacher> {
        match &self.teacher {
            TeacherSource::Builtin(name) => builtin_teacher(name)
                .ok_or_else(|| invalid("teacher.builtin", format!("unknown teacher `{name}`"))),
            TeacherSource::File(p) => load_teacher_file(p),
        }
    }

    /// Canonical text form with every key spelled out.
    pub fn to_text(&self) -> String {
        let d = &self.distill;
        let join = |v: &[usize]| v.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(", ");
        let teacher = match &self.teacher {
            TeacherSource::Builtin(n) => format!("teacher.builtin = {n}"),
            TeacherSource::File(p) => format!("teacher.path = {}", p.display()),
        };
        [
            format!("seed = {}", d.seed),
            format!("output_dir = {}", self.output_dir.display()),
            teacher,
            format!("teacher.neural_steps = {}", self.teacher_neural_steps),
            format!("schedule.kind = {}", d.schedule.kind.name()),
            format!("schedule.lambda_min = {:?}", d.schedule.lambda_min),
            format!("schedule.lambda_max = {:?}", d.schedule.lambda_max),
            format!("schedule.lambda_star = {:?}", d.schedule.lambda_star),
            format!("corrector.space = {}", d.corrector.space.name()),
            format!("corrector.steps = {}", d.corrector.steps),
            format!("corrector.step_eps = {:?}", d.corrector.gamma_eps.sqrt()),
            format!("corrector.step_z = {:?}", d.corrector.gamma_z.sqrt()),
            format!("corrector.sample_z = {}", d.corrector.sample_z),
            format!("corrector.cancellation = {}", d.corrector.cancellation.name()),
            format!("distill.batch_size = {}", d.batch_size),
            format!("distill.iterations = {}", d.iterations),
            format!("distill.score_ratio = {}", d.score_ratio),
            format!("distill.lr_g = {:?}", d.lr_g),
            format!("distill.lr_s = {:?}", d.lr_s),
            format!("distill.beta1 = {:?}", d.beta1),
            format!("distill.beta2 = {:?}", d.beta2),
            format!("distill.gen_weighting = {}", d.gen_weighting.name()),
            format!("distill.score_weighting = {}", d.score_weighting.name()),
            format!("distill.generator_loss = {}", d.generator_loss.name()),
            format!("distill.warmup_steps = {}", d.warmup_steps),
            format!("distill.grad_norm_limit = {:?}", d.grad_norm_limit),
            format!("model.latent_dim = {}", d.model.latent_dim),
            format!("model.generator_hidden = {}", join(&d.model.generator_hidden)),
            format!("model.score_hidden = {}", join(&d.model.score_hidden)),
            format!("model.activation = {}", d.model.activation.name()),
            format!("model.generator_mode = {}", d.model.generator_mode.name()),
            format!("model.features = {}", d.model.features.name()),
            format!("eval.every = {}", d.eval_every),
            format!("eval.samples = {}", d.eval_samples),
            format!("checkpoint.every = {}", self.checkpoint_every),
        ]
        .join("\n")
            + "\n"
    }
}

pub fn builtin_teacher(name: &str) -> Option<MixtureTeacher> {
    match name {
        "ring8" => Some(MixtureTeacher::ring8()),
        "standard_normal_2d" => Some(MixtureTeacher::standard_normal(2)),
        _ => None,
    }
}

pub fn load_teacher_file(path: &Path) -> CliResult<MixtureTeacher> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read teacher {}: {e}", path.display())))?;
    MixtureTeacher::from_text(&text)
        .map_err(|e| CliError::Validation(format!("teacher {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> CliResult<RunConfig> {
        RunConfig::parse(text, Path::new("."))
    }

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn step_sizes_are_squared() {
        let rc = parse("corrector.step_eps = 0.4\ncorrector.step_z = 0.004\n").unwrap();
        assert!((rc.distill.corrector.gamma_eps - 0.16).abs() < 1e-15);
        assert!((rc.distill.corrector.gamma_z - 1.6e-5).abs() < 1e-18);
    }

    #[test]
    fn text_form_round_trips() {
        let rc = parse("seed = 9\ncorrector.steps = 3\nmodel.generator_hidden = 8, 4\ndistill.lr_g = 0.25\n").unwrap();
        assert_eq!(parse(&rc.to_text()).unwrap(), rc);
    }

    #[test]
    fn errors_name_the_key() {
        for (text, key) in [
            ("distill.batch_size = many", "distill.batch_size"),
            ("corrector.cancellation = partial", "corrector.cancellation"),
            ("corrector.step_eps = 1.5", "corrector.step_eps"),
            ("corrector.sample_z = yes", "corrector.sample_z"),
            ("distill.score_ratio = 0", "distill.score_ratio"),
            ("model.hidden_layers = 3", "model.hidden_layers"),
            ("seed = 1\nseed = 2", "seed"),
            ("teacher.path = /definitely/missing.teacher", "teacher.path"),
            ("teacher.builtin = spiral", "teacher.builtin"),
            ("schedule.lambda_min = 5\nschedule.lambda_max = 1", "schedule.lambda_min"),
        ] {
            let err = parse(text).unwrap_err();
            assert!(matches!(err, CliError::Validation(_)));
            assert!(err.to_string().contains(key), "{text}: {err}");
        }
        assert!(parse("just words").is_err());
    }

    #[test]
    fn every_key_is_handled() {
        let rc = RunConfig::default();
        let text = rc.to_text();
        let pairs = parse_pairs(&text).unwrap();
        for k in KEYS {
            assert!(pairs.contains_key(*k) || *k == "teacher.path", "{k} missing from text form");
        }
    }
}
