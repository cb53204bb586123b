//! Command-line front end: data generation, training, inference, evaluation,
//! gradient checks and ablation tables.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use stereodrop::checks::{modules, run_checks, DEFAULT_SEEDS};
use stereodrop::container::{parse_kv, read_array, write_array};
use stereodrop::metrics::{EvalReport, EvalRow};
use stereodrop::synth::{generate_dataset, list_samples, load_dataset, read_sample, DropMode};
use stereodrop::train::{ablate, evaluate, infer, train, AblationRow, TrainOutputs, Trainer, ABLATION_HEADER};
use stereodrop::{Checkpoint, Error, SceneSpec, StereoSample, Tensor, TrainConfig, VariantSpec};

#[derive(Parser)]
#[command(name = "stereodrop", version, about = "Stereo waterdrop removal with row-wise dilated attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic stereo waterdrop dataset.
    Gen {
        #[arg(long)]
        scenes: usize,
        #[arg(long, default_value_t = 1)]
        per_scene: usize,
        #[arg(long, default_value = "mixed")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 96)]
        width: usize,
        #[arg(long, default_value_t = 48)]
        height: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss log (CSV).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Continue from this checkpoint instead of a fresh initialisation.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Restore one sample directory, or every sample under a dataset directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score restored outputs against the clean ground truth.
    Eval {
        /// Output directory of `infer`; without it the corrupted inputs are scored.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference gradient checks (exit 0 iff every target passes).
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
        /// Check only this seed (default: seeds 0..10).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train several variants and write a comparison table.
    Ablate {
        /// Comma-separated variant names.
        #[arg(long, default_value = "ours,TTT,RTT,RRR,FD,1row,5row,mono,nocat,noAC")]
        variants: String,
        /// Comma-separated training seeds.
        #[arg(long, default_value = "0")]
        seeds: String,
        /// Held-out evaluation set (defaults to the training data).
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Run configuration: a `key = value` file plus one flag per field.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    lr_decay_factor: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    /// Four comma-separated perceptual tap weights.
    #[arg(long)]
    lambdas: Option<String>,
    #[arg(long)]
    extractor_seed: Option<String>,
    #[arg(long)]
    width: Option<String>,
    #[arg(long)]
    height: Option<String>,
    #[arg(long)]
    stem: Option<String>,
    /// Three comma-separated encoder widths.
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    deterministic: Option<String>,
    #[arg(long)]
    augment: Option<String>,
    #[arg(long)]
    max_steps: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(&'static str, &str)> {
        let pairs: [(&'static str, &Option<String>); 17] = [
            ("variant", &self.variant),
            ("lr", &self.lr),
            ("lr_decay_factor", &self.lr_decay_factor),
            ("epochs", &self.epochs),
            ("batch", &self.batch),
            ("seed", &self.seed),
            ("alpha", &self.alpha),
            ("lambdas", &self.lambdas),
            ("extractor_seed", &self.extractor_seed),
            ("width", &self.width),
            ("height", &self.height),
            ("stem", &self.stem),
            ("channels", &self.channels),
            ("checkpoint_every", &self.checkpoint_every),
            ("deterministic", &self.deterministic),
            ("augment", &self.augment),
            ("max_steps", &self.max_steps),
        ];
        pairs
            .into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect()
    }

    /// Resolves the config and loads its data. Image dims default to those of
    /// the data unless set explicitly.
    fn resolve(&self) -> Result<(TrainConfig, Vec<StereoSample>), Failure> {
        let mut cfg = TrainConfig::default();
        let mut explicit = BTreeSet::new();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            for (k, v) in parse_kv(path, &text)? {
                cfg.set(&k, &v)?;
                explicit.insert(k);
            }
        }
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
        }
        for (k, v) in self.overrides() {
            cfg.set(k, v).map_err(|e| Failure::Usage(e.to_string()))?;
            explicit.insert(k.to_string());
        }
        VariantSpec::named(&cfg.variant).map_err(|e| Failure::Usage(e.to_string()))?;
        let dir = cfg
            .data
            .clone()
            .ok_or_else(|| Failure::Usage("no training data: pass --data or set `data` in the config".into()))?;
        let data = load_dataset(&dir)?;
        if !explicit.contains("width") {
            cfg.width = data[0].width();
        }
        if !explicit.contains("height") {
            cfg.height = data[0].height();
        }
        cfg.validate()?;
        Ok((cfg, data))
    }
}

enum Failure {
    Usage(String),
    Lib(Error),
    Checks(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn to_png(t: &Tensor<f32>, path: &Path) -> Result<(), Failure> {
    let (_, c, h, w) = t.dims4()?;
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| (t.at4(0, ch.min(c - 1), y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path)
        .map_err(|e| Failure::Lib(Error::Io { path: path.to_path_buf(), source: std::io::Error::other(e) }))
}

/// Where the restoration of `sample` lives under `out`.
fn sample_out(root: &Path, sample: &Path, out: &Path) -> PathBuf {
    if sample == root {
        out.to_path_buf()
    } else {
        out.join(sample.file_name().unwrap_or_default())
    }
}

fn label_of(root: &Path, sample: &Path) -> String {
    let p = if sample == root { root } else { sample };
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn cmd_gen(scenes: usize, per_scene: usize, mode: &str, seed: u64, width: usize, height: usize, out: &Path) -> Result<(), Failure> {
    let mode: DropMode = mode.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    let base = SceneSpec { width, height, mode, ..SceneSpec::default() };
    base.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let names = generate_dataset(&base, scenes, per_scene, seed, out)?;
    println!("wrote {} samples to {}", names.len(), out.display());
    Ok(())
}

fn cmd_train(out: &Path, metrics: Option<&Path>, resume: Option<&Path>, args: &ConfigArgs) -> Result<(), Failure> {
    let (cfg, data) = args.resolve()?;
    info!("training `{}` on {} samples ({}x{})", cfg.variant, data.len(), cfg.width, cfg.height);
    let ckpt = match resume {
        None => train(cfg, &data, TrainOutputs { checkpoint: Some(out), metrics })?.0,
        Some(path) => {
            let mut prev = Checkpoint::load(path)?;
            if prev.config.model_config()? != cfg.model_config()? {
                return Err(Failure::Usage(format!("{} was trained with a different model layout", path.display())));
            }
            prev.config = cfg;
            let mut t = Trainer::from_checkpoint(prev)?;
            let mut log = match metrics {
                Some(p) => {
                    let f = fs::File::create(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
                    Some((p, std::io::BufWriter::new(f)))
                }
                None => None,
            };
            if let Some((p, f)) = log.as_mut() {
                use std::io::Write;
                writeln!(f, "{}", stereodrop::train::METRICS_HEADER).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
            }
            let result = t.run(
                &data,
                |s| {
                    if let Some((p, f)) = log.as_mut() {
                        use std::io::Write;
                        writeln!(f, "{}", s.csv_line()).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
                    }
                    Ok(())
                },
                |_| Ok(()),
            );
            t.checkpoint().save(out)?;
            result?;
            t.checkpoint()
        }
    };
    println!("trained {} steps ({} epochs); checkpoint {}", ckpt.adam.t, ckpt.epoch, out.display());
    Ok(())
}

fn cmd_infer(ckpt: &Path, sample: &Path, out: &Path) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(ckpt)?;
    let dirs = list_samples(sample)?;
    if dirs.is_empty() {
        return Err(Failure::Lib(Error::Manifest { path: sample.to_path_buf(), msg: "no sample directories found".into() }));
    }
    for dir in &dirs {
        let s = read_sample(dir)?;
        let res = infer(&ckpt, &s.input_l, &s.input_r)?;
        let dest = sample_out(sample, dir, out);
        fs::create_dir_all(&dest).map_err(|e| Error::Io { path: dest.clone(), source: e })?;
        for (name, t) in [("out_l", &res.out_l), ("out_r", &res.out_r), ("disp_l", &res.disp_l), ("disp_r", &res.disp_r)] {
            write_array(&dest.join(format!("{name}.bin")), t)?;
        }
        to_png(&res.out_l, &dest.join("out_l.png"))?;
        to_png(&res.out_r, &dest.join("out_r.png"))?;
    }
    println!("restored {} samples into {}", dirs.len(), out.display());
    Ok(())
}

fn cmd_eval(pred: Option<&Path>, gt: &Path, report: &Path) -> Result<(), Failure> {
    let dirs = list_samples(gt)?;
    if dirs.is_empty() {
        return Err(Failure::Lib(Error::Manifest { path: gt.to_path_buf(), msg: "no sample directories found".into() }));
    }
    let start = std::time::Instant::now();
    let mut rows = Vec::new();
    for dir in &dirs {
        let s = read_sample(dir)?;
        let label = label_of(gt, dir);
        let row = match pred {
            Some(p) => {
                let d = sample_out(gt, dir, p);
                let (l, r) = (read_array(&d.join("out_l.bin"))?, read_array(&d.join("out_r.bin"))?);
                EvalRow::evaluate(label, (&l, &r), (&s.clean_l, &s.clean_r))?
            }
            None => EvalRow::evaluate(label, (&s.input_l, &s.input_r), (&s.clean_l, &s.clean_r))?,
        };
        rows.push(row);
    }
    let rep = EvalReport {
        variant: if pred.is_some() { "pred" } else { "input" }.into(),
        rows,
        runtime_secs: start.elapsed().as_secs_f64(),
    };
    fs::write(report, rep.to_csv()).map_err(|e| Error::Io { path: report.to_path_buf(), source: e })?;
    let agg = rep.aggregate();
    println!("{} samples: psnr {:.3} dB, ssim {:.4}", rep.rows.len(), agg.mean_psnr(), agg.mean_ssim());
    Ok(())
}

fn cmd_gradcheck(module: Option<&str>, seed: Option<u64>) -> Result<(), Failure> {
    if let Some(m) = module {
        if !modules().contains(&m) {
            return Err(Failure::Usage(format!("unknown module `{m}` (known: {})", modules().join(", "))));
        }
    }
    let seeds: Vec<u64> = match seed {
        Some(s) => vec![s],
        None => (0..DEFAULT_SEEDS as u64).collect(),
    };
    let outcomes = run_checks(module, &seeds)?;
    let mut failed = 0;
    for o in &outcomes {
        let tag = if o.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!o.passed());
        println!("{:<10} {:<28} seed {:>3}  max rel err {:.2e}  {tag}", o.module, o.name, o.seed, o.worst);
    }
    println!("{} checks, {failed} failed", outcomes.len());
    if failed > 0 {
        return Err(Failure::Checks(failed));
    }
    Ok(())
}

fn cmd_ablate(variants: &str, seeds: &str, test: Option<&Path>, out: &Path, args: &ConfigArgs) -> Result<(), Failure> {
    let names: Vec<&str> = variants.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    for n in &names {
        VariantSpec::named(n).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::Usage(format!("--seeds: cannot parse `{seeds}`")))?;
    let (cfg, data) = args.resolve()?;
    let test_set = match test {
        Some(dir) => load_dataset(dir)?,
        None => data.clone(),
    };
    fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    let runs_path = out.join("ablation_runs.csv");
    let mut runs = format!("{ABLATION_HEADER}\n");
    let rows = ablate(&cfg, &names, &seeds, &data, &test_set, |r| {
        println!("{}", r.csv_line());
        let _ = writeln!(runs, "{}", r.csv_line());
        let _ = fs::write(&runs_path, &runs);
    })?;
    let labels: Vec<String> = (0..test_set.len()).map(|i| format!("test{i:03}")).collect();
    let input = evaluate(None, &test_set, &labels)?.aggregate();
    fs::write(out.join("ablation.csv"), table(&rows, input.mean_psnr(), input.mean_ssim()))
        .map_err(|e| Error::Io { path: out.join("ablation.csv"), source: e })?;
    println!("wrote {}", out.join("ablation.csv").display());
    Ok(())
}

/// One row per variant, metrics averaged over seeds, plus the corrupted input.
fn table(rows: &[AblationRow], input_psnr: f64, input_ssim: f64) -> String {
    let mut out = String::from("variant,psnr,ssim,seeds\n");
    let _ = writeln!(out, "input,{input_psnr:.6},{input_ssim:.6},0");
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant.as_str()) {
            order.push(&r.variant);
        }
    }
    for v in order {
        let of: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == v).collect();
        let n = of.len() as f64;
        let psnr = of.iter().map(|r| r.psnr).sum::<f64>() / n;
        let ssim = of.iter().map(|r| r.ssim).sum::<f64>() / n;
        let _ = writeln!(out, "{v},{psnr:.6},{ssim:.6},{}", of.len());
    }
    out
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen { scenes, per_scene, mode, seed, width, height, out } => {
            cmd_gen(scenes, per_scene, &mode, seed, width, height, &out)
        }
        Command::Train { out, metrics, resume, cfg } => cmd_train(&out, metrics.as_deref(), resume.as_deref(), &cfg),
        Command::Infer { ckpt, sample, out } => cmd_infer(&ckpt, &sample, &out),
        Command::Eval { pred, gt, report } => cmd_eval(pred.as_deref(), &gt, &report),
        Command::Gradcheck { module, seed } => cmd_gradcheck(module.as_deref(), seed),
        Command::Ablate { variants, seeds, test, out, cfg } => cmd_ablate(&variants, &seeds, test.as_deref(), &out, &cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Checks(n)) => {
            eprintln!("error: {n} gradient checks failed");
            ExitCode::from(3)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
