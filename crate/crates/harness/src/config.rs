//! Sectioned `key = value` experiment configuration.
//!
//! Sections are `[model] [train] [perturb] [robustify] [attack] [smooth]
//! [output]` plus a global `seed` before the first section. Unknown sections
//! or keys are hard errors with line numbers; a silent typo would corrupt an
//! experiment. Every key has a default, several of which derive from the
//! perturbation geometry (`delta = eps`, `alpha = eps/4`, norm-dependent
//! optimizer and learning rate).

use std::cell::Cell;
use std::collections::BTreeSet;

use preempt_core::attack::PgdConfig;
use preempt_core::diffnet::Activation;
use preempt_core::geometry::{NormP, PerturbSpec};
use preempt_core::preempt::{GradMode, InitMode, RobustOptimizer, RobustifyConfig};
use preempt_core::recon::WhiteboxConfig;
use preempt_core::smooth::SmoothConfig;
use preempt_core::train::{CheckpointRule, TrainConfig, TrainMode};
use preempt_core::Scalar;

use crate::dataset::DataKind;
use crate::error::{HarnessError, Result};

const SECTIONS: [&str; 7] = [
    "model",
    "train",
    "perturb",
    "robustify",
    "attack",
    "smooth",
    "output",
];

#[derive(Debug)]
struct Entry {
    section: String,
    key: String,
    value: String,
    line: usize,
    used: Cell<bool>,
}

/// Parsed but untyped config text.
#[derive(Debug)]
pub struct RawConfig {
    entries: Vec<Entry>,
    text: String,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut section = String::new();
        let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| HarnessError::config_at(line_no, "unterminated section"))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(HarnessError::config_at(
                        line_no,
                        format!("unknown section [{name}]"),
                    ));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::config_at(line_no, format!("expected key = value, got {line:?}"))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(HarnessError::config_at(line_no, "empty key"));
            }
            if !seen.insert((section.clone(), key.clone())) {
                return Err(HarnessError::config_at(
                    line_no,
                    format!("duplicate key {key:?} in section [{section}]"),
                ));
            }
            entries.push(Entry {
                section: section.clone(),
                key,
                value,
                line: line_no,
                used: Cell::new(false),
            });
        }
        Ok(Self {
            entries,
            text: text.to_string(),
        })
    }

    /// Applies `section.key=value` overrides (empty section for globals).
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| HarnessError::config(format!("override {spec:?} needs key=value")))?;
        let (section, key) = match path.trim().split_once('.') {
            Some((s, k)) => (s.trim().to_string(), k.trim().to_string()),
            None => (String::new(), path.trim().to_string()),
        };
        if !section.is_empty() && !SECTIONS.contains(&section.as_str()) {
            return Err(HarnessError::config(format!(
                "unknown section in override: {section:?}"
            )));
        }
        self.entries.retain(|e| !(e.section == section && e.key == key));
        self.entries.push(Entry {
            section,
            key,
            value: value.trim().to_string(),
            line: 0,
            used: Cell::new(false),
        });
        Ok(())
    }

    fn lookup(&self, section: &str, key: &str) -> Option<&Entry> {
        self.entries
            .iter()
            .find(|e| e.section == section && e.key == key)
            .inspect(|e| e.used.set(true))
    }

    fn get<T, F>(&self, section: &str, key: &str, default: T, parse: F) -> Result<T>
    where
        F: FnOnce(&str) -> Option<T>,
    {
        match self.lookup(section, key) {
            None => Ok(default),
            Some(e) => parse(&e.value).ok_or_else(|| {
                HarnessError::config_at(
                    e.line,
                    format!("invalid value for {}.{}: {:?}", section, key, e.value),
                )
            }),
        }
    }

    fn get_opt<T, F>(&self, section: &str, key: &str, parse: F) -> Result<Option<T>>
    where
        F: FnOnce(&str) -> Option<T>,
    {
        match self.lookup(section, key) {
            None => Ok(None),
            Some(e) => parse(&e.value).map(Some).ok_or_else(|| {
                HarnessError::config_at(
                    e.line,
                    format!("invalid value for {}.{}: {:?}", section, key, e.value),
                )
            }),
        }
    }

    fn reject_unused(&self) -> Result<()> {
        if let Some(e) = self.entries.iter().find(|e| !e.used.get()) {
            let place = if e.section.is_empty() {
                e.key.clone()
            } else {
                format!("{}.{}", e.section, e.key)
            };
            return Err(HarnessError::config_at(
                e.line,
                format!("unknown key {place:?}"),
            ));
        }
        Ok(())
    }
}

fn parse_f64(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn parse_usize(s: &str) -> Option<usize> {
    s.parse().ok()
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

fn parse_hidden(s: &str) -> Option<Vec<usize>> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Some(Vec::new());
    }
    s.split(',').map(|t| t.trim().parse().ok()).collect()
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone)]
pub struct Config {
    pub seed: u64,
    // [model]
    pub hidden: Vec<usize>,
    pub activation: Activation,
    // [train] data generation
    pub data_kind: DataKind,
    pub data_dim: usize,
    pub data_per_class: usize,
    pub train_frac: f64,
    // [train] optimization
    pub train_mode: TrainMode,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub l_steps: usize,
    pub k_steps: usize,
    pub train_beta: f64,
    pub checkpoint: Option<CheckpointRule>,
    // [perturb]
    pub p: NormP,
    pub eps: f64,
    pub delta: f64,
    pub delta_overridden: bool,
    // [robustify]
    pub max_iter: usize,
    pub rob_t_steps: usize,
    pub rob_alpha: f64,
    pub n_samples: usize,
    pub rob_beta: f64,
    pub init_mode: InitMode,
    pub optimizer: RobustOptimizer,
    pub grad_mode: GradMode,
    // [attack]
    pub atk_t_steps: usize,
    pub atk_alpha: f64,
    pub restarts: usize,
    pub random_start: bool,
    pub eval_count: usize,
    // [smooth]
    pub sigma: f64,
    pub n_pred: usize,
    pub n_cert: usize,
    pub m_samples: usize,
    pub conf_alpha: f64,
    pub smooth_beta: f64,
    pub smooth_eval_count: usize,
    // [output]
    pub out_dir: std::path::PathBuf,
    /// Original text, kept so reports can reproduce the run.
    pub snapshot: String,
}

impl Default for Config {
    fn default() -> Self {
        Config::resolve(&RawConfig::parse("").expect("empty config parses"))
            .expect("defaults resolve")
    }
}

impl Config {
    pub fn from_text(text: &str) -> Result<Self> {
        Self::resolve(&RawConfig::parse(text)?)
    }

    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        Self::resolve(raw)
    }

    fn resolve(raw: &RawConfig) -> Result<Self> {
        let seed = raw.get("", "seed", 7u64, |s| s.parse().ok())?;

        let hidden = raw.get("model", "hidden", vec![16, 16], parse_hidden)?;
        let activation = raw.get("model", "activation", Activation::Tanh, Activation::parse)?;

        let data_kind = raw.get("train", "data_kind", DataKind::Gauss2, DataKind::parse)?;
        let data_dim = raw.get("train", "data_dim", 8, parse_usize)?;
        let data_per_class = raw.get("train", "data_per_class", 1000, parse_usize)?;
        let train_frac = raw.get("train", "train_frac", 0.5, parse_f64)?;
        let train_mode = raw.get(
            "train",
            "mode",
            TrainMode::PreemptRobust,
            TrainMode::parse,
        )?;
        let epochs = raw.get("train", "epochs", 30, parse_usize)?;
        let lr = raw.get("train", "lr", 0.1, parse_f64)?;
        let momentum = raw.get("train", "momentum", 0.9, parse_f64)?;
        let weight_decay = raw.get("train", "weight_decay", 5e-4, parse_f64)?;
        let batch_size = raw.get("train", "batch_size", 64, parse_usize)?;
        let l_steps = raw.get("train", "l_steps", 1, parse_usize)?;
        let k_steps = raw.get("train", "k_steps", 10, parse_usize)?;
        let checkpoint = raw.get("train", "checkpoint", None, |s| match s {
            "auto" => Some(None),
            "latest" => Some(Some(CheckpointRule::Latest)),
            "best_holdout" => Some(Some(CheckpointRule::BestHoldout)),
            _ => None,
        })?;

        let p = raw.get("perturb", "p", NormP::LInf, NormP::parse)?;
        let eps = raw.get("perturb", "eps", default_eps(p), parse_f64)?;
        let delta_opt = raw.get_opt("perturb", "delta", parse_f64)?;
        let delta_overridden = delta_opt.is_some();
        let delta = delta_opt.unwrap_or(eps);

        let train_beta = raw.get("train", "beta", delta, parse_f64)?;

        let max_iter = raw.get("robustify", "max_iter", 100, parse_usize)?;
        let rob_t_steps = raw.get("robustify", "t_steps", 20, parse_usize)?;
        let rob_alpha = raw.get("robustify", "alpha", eps / 4.0, parse_f64)?;
        let n_samples = raw.get("robustify", "n_samples", 1, parse_usize)?;
        let default_beta = match p {
            NormP::LInf => 0.1,
            NormP::L2 => 0.001,
        };
        let rob_beta = raw.get("robustify", "beta", default_beta, parse_f64)?;
        let init_mode = raw.get("robustify", "init", InitMode::AtOriginal, |s| match s {
            "at_original" => Some(InitMode::AtOriginal),
            "random_in_delta_ball" => Some(InitMode::RandomInDeltaBall),
            _ => None,
        })?;
        let default_opt = match p {
            NormP::LInf => RobustOptimizer::TanhRmsprop,
            NormP::L2 => RobustOptimizer::ProjectedGd,
        };
        let optimizer = raw.get("robustify", "optimizer", default_opt, |s| match s {
            "auto" => Some(default_opt),
            "projected_gd" => Some(RobustOptimizer::ProjectedGd),
            "tanh_rmsprop" => Some(RobustOptimizer::TanhRmsprop),
            _ => None,
        })?;
        let grad_mode = raw.get(
            "robustify",
            "grad_mode",
            GradMode::FirstOrder,
            |s| match s {
                "first_order" => Some(GradMode::FirstOrder),
                "exact" => Some(GradMode::Exact),
                _ => None,
            },
        )?;

        let atk_t_steps = raw.get("attack", "t_steps", 20, parse_usize)?;
        let atk_alpha = raw.get("attack", "alpha", eps / 4.0, parse_f64)?;
        let restarts = raw.get("attack", "restarts", 10, parse_usize)?;
        let random_start = raw.get("attack", "random_start", true, parse_bool)?;
        let eval_count = raw.get("attack", "eval_count", 200, parse_usize)?;

        let sigma = raw.get("smooth", "sigma", 0.0, parse_f64)?;
        let n_pred = raw.get("smooth", "n_pred", 50, parse_usize)?;
        let n_cert = raw.get("smooth", "n_cert", 10_000, parse_usize)?;
        let m_samples = raw.get("smooth", "m", 5, parse_usize)?;
        let conf_alpha = raw.get("smooth", "conf_alpha", 0.001, parse_f64)?;
        let smooth_beta = raw.get("smooth", "beta", 0.005, parse_f64)?;
        let smooth_eval_count = raw.get("smooth", "eval_count", 200, parse_usize)?;

        let out_dir = raw.get("output", "dir", "out".into(), |s| {
            Some(std::path::PathBuf::from(s))
        })?;

        raw.reject_unused()?;

        Ok(Config {
            seed,
            hidden,
            activation,
            data_kind,
            data_dim,
            data_per_class,
            train_frac,
            train_mode,
            epochs,
            lr,
            momentum,
            weight_decay,
            batch_size,
            l_steps,
            k_steps,
            train_beta,
            checkpoint,
            p,
            eps,
            delta,
            delta_overridden,
            max_iter,
            rob_t_steps,
            rob_alpha,
            n_samples,
            rob_beta,
            init_mode,
            optimizer,
            grad_mode,
            atk_t_steps,
            atk_alpha,
            restarts,
            random_start,
            eval_count,
            sigma,
            n_pred,
            n_cert,
            m_samples,
            conf_alpha,
            smooth_beta,
            smooth_eval_count,
            out_dir,
            snapshot: raw.text.clone(),
        })
    }

    pub fn perturb_spec(&self) -> Result<PerturbSpec<Scalar>> {
        Ok(PerturbSpec::new(self.p, self.eps, self.delta)?)
    }

    pub fn train_config(&self, mode: TrainMode) -> Result<TrainConfig<Scalar>> {
        let spec = self.perturb_spec()?;
        let mut cfg = TrainConfig::standard(mode, spec);
        cfg.epochs = self.epochs;
        cfg.inner_min_steps = self.l_steps;
        cfg.min_step = self.train_beta;
        cfg.inner_max_steps = self.k_steps;
        cfg.max_step = self.atk_alpha;
        cfg.lr = self.lr;
        cfg.momentum = self.momentum;
        cfg.weight_decay = self.weight_decay;
        cfg.batch_size = self.batch_size;
        if let Some(rule) = self.checkpoint {
            cfg.checkpoint = rule;
        }
        Ok(cfg)
    }

    pub fn robustify_config(&self) -> Result<RobustifyConfig<Scalar>> {
        let spec = self.perturb_spec()?;
        let mut cfg = RobustifyConfig::standard(&spec);
        cfg.max_iter = self.max_iter;
        cfg.inner.steps = self.rob_t_steps;
        cfg.inner.step_size = self.rob_alpha;
        cfg.inner.random_start = true;
        cfg.n_samples = self.n_samples;
        cfg.lr = self.rob_beta;
        cfg.init_mode = self.init_mode;
        cfg.optimizer = self.optimizer;
        cfg.grad_mode = self.grad_mode;
        Ok(cfg)
    }

    pub fn attack_config(&self) -> PgdConfig<Scalar> {
        PgdConfig {
            steps: self.atk_t_steps,
            step_size: self.atk_alpha,
            random_start: self.random_start,
            restarts: self.restarts,
        }
    }

    pub fn whitebox_config(&self) -> Result<WhiteboxConfig<Scalar>> {
        let spec = self.perturb_spec()?;
        let mut cfg = WhiteboxConfig::standard(&spec);
        cfg.recon = self.robustify_config()?;
        cfg.attack = self.attack_config();
        Ok(cfg)
    }

    pub fn smooth_config(&self) -> SmoothConfig<Scalar> {
        SmoothConfig {
            sigma: self.sigma,
            n_pred: self.n_pred,
            n_cert: self.n_cert,
            m: self.m_samples,
            conf_alpha: self.conf_alpha,
        }
    }

    /// Robustification settings for the smoothed experiment (its own
    /// learning rate; always first-order).
    pub fn smooth_robustify_config(&self) -> Result<RobustifyConfig<Scalar>> {
        let mut cfg = self.robustify_config()?;
        cfg.lr = self.smooth_beta;
        cfg.grad_mode = GradMode::FirstOrder;
        Ok(cfg)
    }
}

fn default_eps(p: NormP) -> f64 {
    match p {
        NormP::LInf => 0.1,
        NormP::L2 => 0.3,
    }
}
