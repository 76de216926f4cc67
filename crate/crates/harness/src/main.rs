//! `preempt` CLI: preemptive robustification experiments end to end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use preempt_core::attack::{pgd, pgd_restarts};
use preempt_core::diffnet::{io as model_io, Classifier};
use preempt_core::preempt::{check_lemma1, robustify};
use preempt_core::recon::{eval_whitebox, whitebox_attack};
use preempt_core::rngstream;
use preempt_core::smooth::cert_eval;
use preempt_core::train::TrainMode;
use preempt_core::{Scalar, Vec64};

use preempt_harness::config::{Config, RawConfig};
use preempt_harness::dataset::{
    gen_dataset, load_dataset, load_robustified, save_dataset, save_robustified, DataKind,
    Dataset, RobustifiedSet,
};
use preempt_harness::error::{HarnessError, Result};
use preempt_harness::pipeline::{eval_slice, run_pipeline, train_model};
use preempt_harness::report::emit_report;
use preempt_harness::selftest::run_selftest;

#[derive(Parser)]
#[command(
    name = "preempt",
    about = "Preemptive robustification of classifier inputs against man-in-the-middle adversaries",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file (sectioned key = value); flags and --set override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key: `--set section.key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Root seed; beats the PREEMPT_SEED env var and the config file.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<Config> {
        let text = match &self.config {
            Some(path) => std::fs::read_to_string(path)?,
            None => String::new(),
        };
        let mut raw = RawConfig::parse(&text)?;
        if let Ok(env_seed) = std::env::var("PREEMPT_SEED") {
            let parsed: u64 = env_seed.parse().map_err(|_| {
                HarnessError::config(format!("PREEMPT_SEED must be an integer, got {env_seed:?}"))
            })?;
            raw.apply_override(&format!("seed={parsed}"))?;
        }
        for s in &self.sets {
            raw.apply_override(s)?;
        }
        if let Some(seed) = self.seed {
            raw.apply_override(&format!("seed={seed}"))?;
        }
        Config::from_raw(&raw)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy dataset file.
    GenData {
        #[command(flatten)]
        common: Common,
        /// gauss2 | rings | bars (default from config)
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long = "per-class")]
        per_class: Option<usize>,
        #[arg(long = "train-frac")]
        train_frac: Option<f64>,
        #[arg(long, default_value = "data.prds")]
        out: PathBuf,
    },
    /// Train a model on a dataset (generated if no file is given).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// plain | adversarial | preempt_robust (default from config)
        #[arg(long)]
        mode: Option<String>,
        #[arg(long, default_value = "model.prdf")]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Robustify the evaluation split of a dataset around a trained model.
    Robustify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "robustified.prrb")]
        out: PathBuf,
        /// Also write the certificate-check CSV here.
        #[arg(long)]
        lemma1: Option<PathBuf>,
    },
    /// Grey-box attack evaluation (clean / PGD / multi-restart PGD).
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Attack these robustified points instead of the originals.
        #[arg(long)]
        robustified: Option<PathBuf>,
        #[arg(long, default_value = "attack.csv")]
        out: PathBuf,
    },
    /// Adaptive white-box attack evaluation with reconstruction distances.
    Whitebox {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        robustified: PathBuf,
        #[arg(long, default_value = "distances.csv")]
        out: PathBuf,
    },
    /// Certified smoothing evaluation of raw or robustified points.
    SmoothCertify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        robustified: Option<PathBuf>,
        #[arg(long, default_value = "certify.csv")]
        out: PathBuf,
    },
    /// Run the full four-row evaluation pipeline and emit all CSVs.
    Report {
        #[command(flatten)]
        common: Common,
        /// Output directory (default from config [output] dir).
        #[arg(long = "out-dir")]
        out_dir: Option<PathBuf>,
    },
    /// Deterministic end-to-end self-check; exit code 4 on failure.
    Selftest {
        #[command(flatten)]
        common: Common,
        #[arg(long = "out-dir", default_value = "selftest-out")]
        out_dir: PathBuf,
    },
}

fn load_model(path: &Path) -> Result<Classifier<Scalar>> {
    Ok(model_io::load(path)?)
}

fn eval_points(
    ds: &Dataset,
    robustified: &Option<PathBuf>,
    cap: usize,
) -> Result<Vec<(usize, Vec64, usize, Vec64)>> {
    // (orig index, x_o, label, point under evaluation)
    match robustified {
        None => Ok(eval_slice(ds, cap)
            .into_iter()
            .map(|(i, x, y)| (i, x.clone(), y, x))
            .collect()),
        Some(path) => {
            let set = load_robustified(path)?;
            set.rows
                .into_iter()
                .map(|(i, y, x_r)| {
                    let x_o = ds
                        .examples
                        .get(i)
                        .ok_or_else(|| {
                            HarnessError::config(format!(
                                "robustified row references example {i} beyond dataset"
                            ))
                        })?
                        .0
                        .clone();
                    Ok((i, x_o, y, x_r))
                })
                .collect()
        }
    }
}

fn cmd_gen_data(
    common: &Common,
    kind: Option<String>,
    dim: Option<usize>,
    per_class: Option<usize>,
    train_frac: Option<f64>,
    out: &Path,
) -> Result<()> {
    let cfg = common.load()?;
    let kind = match kind {
        Some(s) => DataKind::parse(&s)
            .ok_or_else(|| HarnessError::config(format!("unknown dataset kind {s:?}")))?,
        None => cfg.data_kind,
    };
    let ds = gen_dataset(
        kind,
        per_class.unwrap_or(cfg.data_per_class),
        dim.unwrap_or(cfg.data_dim),
        cfg.seed,
        train_frac.unwrap_or(cfg.train_frac),
    )?;
    save_dataset(&ds, out)?;
    println!(
        "wrote {} ({} examples, {} train / {} test)",
        out.display(),
        ds.examples.len(),
        ds.train_idx.len(),
        ds.test_idx.len()
    );
    Ok(())
}

fn cmd_train(
    common: &Common,
    data: &Option<PathBuf>,
    mode: Option<String>,
    out: &Path,
    history: &Option<PathBuf>,
) -> Result<()> {
    let mut cfg = common.load()?;
    if let Some(s) = mode {
        cfg.train_mode = TrainMode::parse(&s)
            .ok_or_else(|| HarnessError::config(format!("unknown training mode {s:?}")))?;
    }
    let ds = match data {
        Some(path) => load_dataset(path)?,
        None => gen_dataset(
            cfg.data_kind,
            cfg.data_per_class,
            cfg.data_dim,
            cfg.seed,
            cfg.train_frac,
        )?,
    };
    if ds.meta.dim != cfg.data_dim {
        cfg.data_dim = ds.meta.dim;
    }
    let outcome = train_model(&cfg, &ds, cfg.train_mode)?;
    model_io::save(&outcome.model, out)?;
    if let Some(hist_path) = history {
        std::fs::write(
            hist_path,
            preempt_harness::report::history_csv(&outcome.history),
        )?;
    }
    let last = outcome.history.last();
    println!(
        "trained {} model ({} epochs, selected epoch {}); holdout acc {:.4}, robust {:.4}; wrote {}",
        cfg.train_mode.name(),
        outcome.history.len(),
        outcome.selected_epoch,
        last.map_or(0.0, |r| r.holdout_acc),
        last.map_or(0.0, |r| r.holdout_robust_acc),
        out.display()
    );
    Ok(())
}

fn cmd_robustify(
    common: &Common,
    model_path: &Path,
    data: &Path,
    out: &Path,
    lemma1: &Option<PathBuf>,
) -> Result<()> {
    let cfg = common.load()?;
    let model = load_model(model_path)?;
    let ds = load_dataset(data)?;
    let spec = cfg.perturb_spec()?;
    let rcfg = cfg.robustify_config()?;
    let eval = eval_slice(&ds, cfg.eval_count);

    let mut rows = Vec::with_capacity(eval.len());
    let mut lemma1_csv = String::from("example_id,h_tilde,satisfied,implied_bound,pred_preserved\n");
    let mut satisfied = 0usize;
    for (orig_id, x_o, y_o) in &eval {
        let mut rng = rngstream::derive(cfg.seed, "defend", &[*orig_id as u64]);
        let report = robustify(&model, x_o, &spec, &rcfg, &mut rng)?;
        if lemma1.is_some() {
            let mut l1_rng = rngstream::derive(cfg.seed, "lemma1", &[*orig_id as u64]);
            let l1 = check_lemma1(&model, x_o, &report.x_r, &spec, &cfg.attack_config(), &mut l1_rng)?;
            satisfied += l1.satisfied as usize;
            use std::fmt::Write as _;
            let _ = writeln!(
                lemma1_csv,
                "{},{},{},{},{}",
                orig_id,
                l1.h_tilde,
                l1.satisfied,
                l1.implied_bound.unwrap_or(0.0),
                l1.prediction_preserved
            );
        }
        rows.push((*orig_id, *y_o, report.x_r));
    }
    let n = rows.len();
    save_robustified(&RobustifiedSet { rows }, ds.meta.dim, out)?;
    if let Some(path) = lemma1 {
        std::fs::write(path, lemma1_csv)?;
        println!(
            "certificate condition satisfied on {}/{} points",
            satisfied, n
        );
    }
    println!("robustified {} points -> {}", n, out.display());
    Ok(())
}

fn cmd_attack(
    common: &Common,
    model_path: &Path,
    data: &Path,
    robustified: &Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let cfg = common.load()?;
    let model = load_model(model_path)?;
    let ds = load_dataset(data)?;
    let spec = cfg.perturb_spec()?;
    let single = {
        let mut c = cfg.attack_config();
        c.restarts = 1;
        c
    };
    let multi = cfg.attack_config();
    let points = eval_points(&ds, robustified, cfg.eval_count)?;

    let mut csv = String::from("example_id,clean_correct,pgd_correct,pgd_restarts_correct\n");
    let (mut clean, mut grey, mut grey10) = (0usize, 0usize, 0usize);
    for (orig_id, _x_o, y_o, point) in &points {
        let i = *orig_id as u64;
        let clean_ok = model.predict(point)? == *y_o;
        let target = model.predict(point)?;
        let mut rng = rngstream::derive(cfg.seed, "grey", &[i]);
        let adv = pgd(&model, point, target, &spec, &single, &mut rng)?;
        let grey_ok = clean_ok && model.predict(&adv)? == *y_o;
        let mut rng = rngstream::derive(cfg.seed, "grey10", &[i]);
        let adv = pgd_restarts(&model, point, target, &spec, &multi, &mut rng)?;
        let grey10_ok = clean_ok && model.predict(&adv)? == *y_o;
        clean += clean_ok as usize;
        grey += grey_ok as usize;
        grey10 += grey10_ok as usize;
        use std::fmt::Write as _;
        let _ = writeln!(csv, "{orig_id},{clean_ok},{grey_ok},{grey10_ok}");
    }
    std::fs::write(out, csv)?;
    let n = points.len().max(1) as f64;
    println!(
        "clean {:.4}  grey_pgd {:.4}  grey_pgd_restarts {:.4}  ({} examples) -> {}",
        clean as f64 / n,
        grey as f64 / n,
        grey10 as f64 / n,
        points.len(),
        out.display()
    );
    Ok(())
}

fn cmd_whitebox(
    common: &Common,
    model_path: &Path,
    data: &Path,
    robustified: &Path,
    out: &Path,
) -> Result<()> {
    let cfg = common.load()?;
    let model = load_model(model_path)?;
    let ds = load_dataset(data)?;
    let spec = cfg.perturb_spec()?;
    let wb_cfg = cfg.whitebox_config()?;
    let points = eval_points(&ds, &Some(robustified.to_path_buf()), cfg.eval_count)?;

    let mut csv = String::from("example_id,recon_dist,eps_prime,attack_dist,misclassified,valid\n");
    let mut robust = 0usize;
    for (orig_id, x_o, y_o, x_r) in &points {
        let mut rng = rngstream::derive(cfg.seed, "whitebox", &[*orig_id as u64]);
        let outcome = whitebox_attack(&model, x_r, *y_o, &spec, &wb_cfg, &mut rng)?;
        let verdict = eval_whitebox(&model, &outcome.candidates, x_o, *y_o, &spec)?;
        let clean_ok = model.predict(x_r)? == *y_o;
        robust += (clean_ok && verdict.robust) as usize;
        let recon_dist = spec.p.distance(&outcome.reconstruction, x_o);
        for c in &verdict.candidates {
            use std::fmt::Write as _;
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{}",
                orig_id, recon_dist, c.eps_prime, c.dist, c.misclassified, c.valid
            );
        }
    }
    std::fs::write(out, csv)?;
    let n = points.len().max(1) as f64;
    println!(
        "white-box accuracy {:.4} ({} examples) -> {}",
        robust as f64 / n,
        points.len(),
        out.display()
    );
    Ok(())
}

fn cmd_smooth_certify(
    common: &Common,
    model_path: &Path,
    data: &Path,
    robustified: &Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let cfg = common.load()?;
    let model = load_model(model_path)?;
    let ds = load_dataset(data)?;
    let spec = cfg.perturb_spec()?;
    let s_cfg = cfg.smooth_config();
    let points = eval_points(&ds, robustified, cfg.smooth_eval_count)?;
    let tagged = robustified.is_some();

    let examples: Vec<(Vec64, usize)> = points
        .iter()
        .map(|(_, _, y, point)| (point.clone(), *y))
        .collect();
    let stream = if tagged { "cert-robustified" } else { "cert-raw" };
    let report = cert_eval(&model, &examples, spec.eps, &s_cfg, cfg.seed, stream)?;

    let mut csv =
        String::from("example_id,robustified,predicted,correct,pA_lower,radius,abstain\n");
    for (r, (orig_id, ..)) in report.rows.iter().zip(&points) {
        use std::fmt::Write as _;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            orig_id, tagged, r.predicted, r.correct, r.p_lower, r.radius, r.abstain
        );
    }
    std::fs::write(out, csv)?;
    println!(
        "smoothed clean {:.4}  certified@eps {:.4}  abstain {:.4} ({} examples) -> {}",
        report.clean_smoothed_accuracy,
        report.certified_accuracy,
        report.abstain_rate,
        points.len(),
        out.display()
    );
    Ok(())
}

fn cmd_report(common: &Common, out_dir: &Option<PathBuf>) -> Result<()> {
    let cfg = common.load()?;
    let dir = out_dir.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let report = run_pipeline(&cfg)?;
    let files = emit_report(&report, &dir)?;
    println!("model,preempt,clean,grey_pgd,grey_pgd_restarts,white_pgd");
    for row in &report.rows {
        println!(
            "{},{},{:.4},{:.4},{:.4},{:.4}",
            row.model_mode.name(),
            if row.preemption { "ours" } else { "none" },
            row.clean,
            row.grey_pgd,
            row.grey_pgd_restarts,
            row.white_pgd
        );
    }
    if let Some(cert) = &report.cert {
        println!(
            "certified@eps: raw {:.4} -> robustified {:.4}",
            cert.raw_certified_acc, cert.robustified_certified_acc
        );
    }
    println!("wrote {} artifacts to {}", files.len(), dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::GenData {
            common,
            kind,
            dim,
            per_class,
            train_frac,
            out,
        } => {
            cmd_gen_data(common, kind.clone(), *dim, *per_class, *train_frac, out)?;
        }
        Command::Train {
            common,
            data,
            mode,
            out,
            history,
        } => cmd_train(common, data, mode.clone(), out, history)?,
        Command::Robustify {
            common,
            model,
            data,
            out,
            lemma1,
        } => cmd_robustify(common, model, data, out, lemma1)?,
        Command::Attack {
            common,
            model,
            data,
            robustified,
            out,
        } => cmd_attack(common, model, data, robustified, out)?,
        Command::Whitebox {
            common,
            model,
            data,
            robustified,
            out,
        } => cmd_whitebox(common, model, data, robustified, out)?,
        Command::SmoothCertify {
            common,
            model,
            data,
            robustified,
            out,
        } => cmd_smooth_certify(common, model, data, robustified, out)?,
        Command::Report { common, out_dir } => cmd_report(common, out_dir)?,
        Command::Selftest { common, out_dir } => {
            let cfg_seed = common.load()?.seed;
            let outcome = run_selftest(out_dir, Some(cfg_seed))?;
            for f in &outcome.findings {
                eprintln!("selftest: {f}");
            }
            if outcome.passed {
                println!("selftest passed (artifacts in {})", out_dir.display());
            } else {
                eprintln!("selftest FAILED ({} findings)", outcome.findings.len());
            }
            return Ok(outcome.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
