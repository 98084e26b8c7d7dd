use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advdm_core::attacks::{verify_budget, AttackMode, AttackRegistry, AttackTrace};
use advdm_core::checkpoint::{embedding_checkpoint, images_checkpoint, read_embedding, read_images, Checkpoint};
use advdm_core::data::{encode_idx_images, load_dataset, parse_idx_images, Dataset};
use advdm_core::defenses::{DefenseConfig, DefenseRegistry};
use advdm_core::diffusion::sample;
use advdm_core::experiment::models::{checkpoint_dir, prepare_classifier, prepare_codec, prepare_denoiser};
use advdm_core::experiment::run::{attack_groups_traced, defense_context, select_groups, target_class};
use advdm_core::experiment::{
    config_schema, median, prepare_models, run_scenario, AttackJob, Budget, CellEnv, ExperimentConfig, Models,
    RunOutcome, TrainPolicy,
};
use advdm_core::inversion::{invert, ConditionEmbedding};
use advdm_core::metrics::{embed, report, FeatureSource};
use advdm_core::tensor::{RngStream, Tensor};
use advdm_core::{Error, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

/// Toy latent diffusion lab: train models, craft L∞ adversarial examples
/// against them, and measure what conditional generation does with those.
#[derive(Parser)]
#[command(name = "advdm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration in TOML. Built-in defaults apply when omitted.
    #[arg(long, short, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed. Training commands use it as the training seed; attack,
    /// invert, generate and defend use it for their random draws; evaluate
    /// and sweep run this single experiment seed instead of the configured
    /// list.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Run directory, overriding `output_dir` from the configuration.
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    /// Log filter: error, warn, info, debug or trace.
    #[arg(long, default_value = "info", value_name = "LEVEL")]
    log: String,
}

#[derive(Args, Clone)]
struct NeedsModels {
    /// Fail instead of training when a checkpoint is missing or stale.
    #[arg(long)]
    no_train: bool,
}

/// Overrides for `[defense.params]`.
#[derive(Args, Clone)]
struct DefenseFlags {
    /// JPEG quality factor, 1 to 100.
    #[arg(long)]
    quality: Option<u8>,
    /// TV weight λ.
    #[arg(long)]
    tv_lambda: Option<f32>,
    /// TV gradient-descent iterations.
    #[arg(long)]
    tv_iters: Option<usize>,
    /// Down-up resampling factor, at least 1.
    #[arg(long)]
    resample_factor: Option<f32>,
    /// Diffpure depth in steps; defaults to a quarter of the schedule.
    #[arg(long)]
    t_star: Option<usize>,
}

impl DefenseFlags {
    fn apply(&self, p: &mut DefenseConfig) -> Result<()> {
        if let Some(v) = self.quality {
            p.quality = v;
        }
        if let Some(v) = self.tv_lambda {
            p.tv_lambda = v;
        }
        if let Some(v) = self.tv_iters {
            p.tv_iters = v;
        }
        if let Some(v) = self.resample_factor {
            p.resample_factor = v;
        }
        if self.t_star.is_some() {
            p.t_star = self.t_star;
        }
        p.validate()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the latent codec and save `checkpoints/codec.ckpt`.
    TrainCodec {
        #[command(flatten)]
        common: Common,
    },
    /// Train the denoiser (on codec latents when `diffusion.latent`) and save
    /// `checkpoints/denoiser.ckpt`. Trains the codec first if needed.
    TrainDiffusion {
        #[command(flatten)]
        common: Common,
    },
    /// Train the classifier used by `pgd_classifier` and save
    /// `checkpoints/classifier.ckpt`.
    TrainClassifier {
        #[command(flatten)]
        common: Common,
    },
    /// Perturb the image groups of the target class and save them.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: NeedsModels,
        /// Attack name; defaults to the first configured one that is not `none`.
        #[arg(long)]
        method: Option<String>,
        /// L∞ budget as a number or a fraction such as 8/255.
        #[arg(long)]
        epsilon: Option<String>,
        /// Attack iterations.
        #[arg(long)]
        n_steps: Option<usize>,
        /// Per-step length as a number or a fraction; capped at the budget.
        #[arg(long)]
        alpha: Option<String>,
        /// Where diffusion-aware attacks differentiate the loss.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Class to attack; defaults to `seed % classes`.
        #[arg(long)]
        class: Option<usize>,
        /// Output file: `.idx` for 8-bit IDX, anything else for exact f32.
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
        /// Per-iteration trace CSV (`group,step,t,loss,max_delta`).
        #[arg(long, value_name = "FILE")]
        trace: Option<PathBuf>,
    },
    /// Fit a condition vector S* to a group of images.
    Invert {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: NeedsModels,
        /// Image file from `attack` or `defend`, or an IDX image file.
        /// Defaults to the first clean group of the target class.
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        /// Class of the default group.
        #[arg(long)]
        class: Option<usize>,
        /// Embedding checkpoint to write.
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
    /// Sample images under an inverted embedding or a class condition.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: NeedsModels,
        /// Embedding checkpoint from `invert`.
        #[arg(long, value_name = "FILE", conflicts_with = "class")]
        embedding: Option<PathBuf>,
        /// Condition on this class instead of an embedding.
        #[arg(long)]
        class: Option<usize>,
        /// Number of samples; defaults to `scenario.samples_per_group`.
        #[arg(long)]
        count: Option<usize>,
        /// Output file: `.idx` for 8-bit IDX, anything else for exact f32.
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
    /// Apply a preprocessing defense to an image file.
    Defend {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: NeedsModels,
        /// Image file to defend.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Defense name.
        #[arg(long)]
        defense: String,
        #[command(flatten)]
        params: DefenseFlags,
        /// Output file: `.idx` for 8-bit IDX, anything else for exact f32.
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
    /// Score generated images against a clean class, or, without
    /// `--generated`, run every configured cell once (sweep axes ignored).
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: NeedsModels,
        /// Generated image file to score.
        #[arg(long, value_name = "FILE")]
        generated: Option<PathBuf>,
        /// Reference class; defaults to the first label in the file.
        #[arg(long)]
        class: Option<usize>,
    },
    /// Run every cell over the configured sweep axes and print medians.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: NeedsModels,
    },
    /// Print the JSON schema of the configuration file.
    Schema,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn policy(m: &NeedsModels) -> TrainPolicy {
    if m.no_train {
        TrainPolicy::Never
    } else {
        TrainPolicy::IfMissing
    }
}

fn save_images(path: &Path, x: &Tensor, labels: &[usize], data: &Dataset) -> Result<()> {
    if path.extension().is_some_and(|e| e == "idx") {
        let (h, w) = data.image_size.ok_or_else(|| Error::Mode("IDX output needs image data".into()))?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, encode_idx_images(x, h, w)?)?;
    } else {
        images_checkpoint(x, labels, data.image_size).save(path)?;
    }
    info!("wrote {} rows to {}", x.rows(), path.display());
    Ok(())
}

fn load_images(path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(advdm_core::checkpoint::MAGIC) {
        let (x, labels, _) = read_images(&Checkpoint::from_bytes(&bytes)?)?;
        Ok((x, labels))
    } else {
        let (x, _) = parse_idx_images(&bytes)?;
        Ok((x, Vec::new()))
    }
}

fn seed_of(common: &Common, cfg: &ExperimentConfig) -> u64 {
    common.seed.unwrap_or(cfg.seeds[0])
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    use std::io::Write as _;
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        // a closed pipe (`advdm schema | head`) is not an error
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn print_medians(out: &RunOutcome) {
    let mut groups: BTreeMap<(String, String, String, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &out.rows {
        let key = (r.attack.clone(), r.defense.clone(), format!("{:.5}", r.epsilon), r.n_steps);
        let e = groups.entry(key).or_default();
        e.0.push(r.fid);
        e.1.push(r.precision);
    }
    println!("{:<16} {:<10} {:>9} {:>6} {:>6} {:>12} {:>10}", "attack", "defense", "epsilon", "N", "seeds", "median_fid", "median_p");
    for ((a, d, eps, n), (fid, p)) in &groups {
        println!("{a:<16} {d:<10} {eps:>9} {n:>6} {:>6} {:>12.5} {:>10.3}", fid.len(), median(fid), median(p));
    }
    for f in &out.failures {
        println!("FAILED {} / {} seed {}: {}", f.attack, f.defense, f.seed, f.error);
    }
    println!("manifest: {}", out.run_dir.join("manifest.json").display());
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Schema => {
            print_json(&config_schema())?;
        }
        Command::TrainCodec { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.codec.seed = s;
            }
            let data = load_dataset(&cfg.dataset)?;
            match prepare_codec(&cfg, &data, TrainPolicy::IfMissing)? {
                Some((_, hash)) => println!("{} {hash}", checkpoint_dir(&cfg).join("codec.ckpt").display()),
                None => println!("this configuration does not use a codec"),
            }
        }
        Command::TrainDiffusion { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.diffusion.train.seed = s;
            }
            let data = load_dataset(&cfg.dataset)?;
            let codec = prepare_codec(&cfg, &data, TrainPolicy::IfMissing)?;
            let (_, _, hash) = prepare_denoiser(&cfg, &data, codec.as_ref().map(|c| &c.0), TrainPolicy::IfMissing)?;
            println!("{} {hash}", checkpoint_dir(&cfg).join("denoiser.ckpt").display());
        }
        Command::TrainClassifier { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.classifier.seed = s;
            }
            let data = load_dataset(&cfg.dataset)?;
            let (_, hash) = prepare_classifier(&cfg, &data, TrainPolicy::IfMissing)?;
            println!("{} {hash}", checkpoint_dir(&cfg).join("classifier.ckpt").display());
        }
        Command::Attack { common, models, method, epsilon, n_steps, alpha, mode, class, output, trace } => {
            let mut cfg = load_config(&common)?;
            if let Some(a) = alpha {
                cfg.attack.alpha = Budget::parse(&a)?;
            }
            if let Some(m) = mode {
                cfg.attack.mode = m.into();
            }
            let method = match method {
                Some(m) => m,
                None => cfg.attack.methods.iter().find(|m| *m != "none").cloned().unwrap_or_else(|| "advdm".into()),
            };
            AttackRegistry::default().get(&method)?;
            if !cfg.attack.methods.contains(&method) {
                cfg.attack.methods.push(method.clone());
            }
            cfg.scenario.target_class = class.or(cfg.scenario.target_class);
            let job = AttackJob {
                attack: method,
                seed: seed_of(&common, &cfg),
                epsilon: epsilon.map(|e| Budget::parse(&e)).transpose()?.unwrap_or(cfg.attack.epsilon),
                n_steps: n_steps.unwrap_or(cfg.attack.n_steps),
            };
            cfg.attack.config(job.epsilon, job.n_steps).validate()?;
            let data = load_dataset(&cfg.dataset)?;
            let m = prepare_models(&cfg, &data, policy(&models))?;
            let env = CellEnv { cfg: &cfg, data: &data, models: &m };
            let mut traces = Vec::new();
            let a = attack_groups_traced(&env, &job, trace.is_some().then_some(&mut traces))?;
            if let Some(path) = &trace {
                write_traces(path, &traces)?;
            }
            let x0 = Tensor::concat_rows(&a.clean)?;
            let x = Tensor::concat_rows(&a.adversarial)?;
            let budget = verify_budget(&x0, &x, job.epsilon.0, data.range)?;
            let out = output.unwrap_or_else(|| cfg.output_dir.join("adversarial.ckpt"));
            save_images(&out, &x, &vec![a.class; x.rows()], &data)?;
            print_json(&serde_json::json!({
                "attack": job.attack, "class": a.class, "epsilon": job.epsilon.0, "n_steps": job.n_steps,
                "images": x.rows(), "budget_pass": budget.pass, "max_deviation": budget.max_deviation,
                "seconds": a.secs, "output": out,
            }))?;
            if !budget.pass {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Invert { common, models, input, class, output } => {
            let mut cfg = load_config(&common)?;
            cfg.scenario.target_class = class.or(cfg.scenario.target_class);
            let seed = seed_of(&common, &cfg);
            let data = load_dataset(&cfg.dataset)?;
            let m = prepare_models(&cfg, &data, policy(&models))?;
            let group = match input {
                Some(p) => load_images(&p)?.0,
                None => {
                    let k = target_class(&cfg, &data, seed);
                    let g = select_groups(&data, k, 1, cfg.inversion.group_size, seed)?;
                    data.data.select_rows(&g[0])
                }
            };
            let z = m.to_model_space(&group)?;
            let (s, rep) = invert(&m.denoiser, &m.schedule, &z, &cfg.inversion, &mut RngStream::new(seed).derive(200))?;
            let out = output.unwrap_or_else(|| cfg.output_dir.join("embedding.ckpt"));
            let hash = embedding_checkpoint(&s).save(&out)?;
            print_json(&serde_json::json!({
                "group_rows": group.rows(), "nearest_class": s.nearest_class(&m.denoiser),
                "final_loss": rep.curve.last(), "output": out, "sha256": hash,
            }))?;
        }
        Command::Generate { common, models, embedding, class, count, output } => {
            let cfg = load_config(&common)?;
            let seed = seed_of(&common, &cfg);
            let data = load_dataset(&cfg.dataset)?;
            let m = prepare_models(&cfg, &data, policy(&models))?;
            let cond = match (embedding, class) {
                (Some(p), _) => read_embedding(&Checkpoint::load(&p)?)?,
                (None, Some(k)) => ConditionEmbedding::from_class(&m.denoiser, k)?,
                (None, None) => return Err(Error::Config("pass --embedding or --class".into())),
            };
            let count = count.unwrap_or(cfg.scenario.samples_per_group);
            let z = sample(&m.denoiser, &m.schedule, &cond.vector, &mut RngStream::new(seed).derive(300), count)?;
            let x = m.to_data_space(&z, data.range)?;
            let out = output.unwrap_or_else(|| cfg.output_dir.join("generated.ckpt"));
            save_images(&out, &x, &vec![cond.nearest_class(&m.denoiser); x.rows()], &data)?;
        }
        Command::Defend { common, models, input, defense, params, output } => {
            let mut cfg = load_config(&common)?;
            params.apply(&mut cfg.defense.params)?;
            let data = load_dataset(&cfg.dataset)?;
            let registry = DefenseRegistry::default();
            let d = registry.get(&defense)?;
            let m = prepare_models(&cfg, &data, policy(&models))?;
            let (x, labels) = load_images(&input)?;
            let mut rng = RngStream::new(seed_of(&common, &cfg)).derive(400);
            let y = d.apply(&defense_context(&m, &data), &x, &cfg.defense.params, &mut rng)?;
            let out = output.unwrap_or_else(|| cfg.output_dir.join(format!("defended-{defense}.ckpt")));
            save_images(&out, &y, &labels, &data)?;
        }
        Command::Evaluate { common, models, generated: Some(path), class } => {
            let cfg = load_config(&common)?;
            let data = load_dataset(&cfg.dataset)?;
            let m: Models = prepare_models(&cfg, &data, policy(&models))?;
            let (x, labels) = load_images(&path)?;
            let k = class
                .or(labels.first().copied())
                .ok_or_else(|| Error::Config("pass --class for unlabeled images".into()))?;
            let codec = m.codec.as_ref();
            let real = embed(codec, &data.class_data(k), cfg.metrics.features, FeatureSource::Real)?;
            let gen = embed(codec, &x, cfg.metrics.features, FeatureSource::Generated)?;
            let r = report(&real, &gen, cfg.metrics.k)?;
            print_json(&serde_json::json!({
                "class": k, "fid": r.fid, "precision": r.precision, "recall": r.recall,
                "n_real": r.n_real, "n_gen": r.n_gen, "k": r.k,
            }))?;
        }
        Command::Evaluate { common, models, generated: None, .. } => {
            let mut cfg = load_config(&common)?;
            cfg.sweep = Default::default();
            if let Some(s) = common.seed {
                cfg.seeds = vec![s];
            }
            let out = run_scenario(&cfg, policy(&models))?;
            print_medians(&out);
            return Ok(exit_for(&out));
        }
        Command::Sweep { common, models } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.seeds = vec![s];
            }
            let out = run_scenario(&cfg, policy(&models))?;
            print_medians(&out);
            return Ok(exit_for(&out));
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Concatenates per-group traces with a leading group column.
fn write_traces(path: &Path, traces: &[AttackTrace]) -> Result<()> {
    let mut s = format!("group,{}\n", AttackTrace::CSV_HEADER);
    for (g, t) in traces.iter().enumerate() {
        for line in t.to_csv().lines().skip(1) {
            s.push_str(&format!("{g},{line}\n"));
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Pixel,
    Latent,
}

impl From<ModeArg> for AttackMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Pixel => AttackMode::Pixel,
            ModeArg::Latent => AttackMode::Latent,
        }
    }
}

fn exit_for(out: &RunOutcome) -> ExitCode {
    if out.all_succeeded() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn log_level(cli: &Cli) -> &str {
    match &cli.command {
        Command::Schema => "warn",
        Command::TrainCodec { common }
        | Command::TrainDiffusion { common }
        | Command::TrainClassifier { common }
        | Command::Attack { common, .. }
        | Command::Invert { common, .. }
        | Command::Generate { common, .. }
        | Command::Defend { common, .. }
        | Command::Evaluate { common, .. }
        | Command::Sweep { common, .. } => &common.log,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(log_level(&cli)).format_timestamp_secs().init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
