use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use veinmotion::checkpoint::{restore, Checkpoint};
use veinmotion::config::RunConfig;
use veinmotion::dataset::{ingest, load_image, save_image, Dataset};
use veinmotion::{Error, Result};
use veinmotion::fvreval::{compute_eer, score_pairs, train_fvr, Augmentor, ScoreSet};
use veinmotion::grid::render_grid;
use veinmotion::model::{ModelConfig, MtModel};
use veinmotion::mtaug::{augment, collect_deltas, fit_basis, MotionBasis};
use veinmotion::mttrain::train;
use veinmotion::veinsim::{generate, write_dataset};

#[derive(Parser, Debug)]
#[command(name = "veinmotion", version, about = "Motion-transfer augmentation for finger-vein recognition")]
struct Cli {
    /// `key = value` run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-image work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    overwrite: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic finger-vein dataset.
    SynthGen,
    /// Train the motion-transfer model.
    TrainMt {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fit the motion basis and store it in the checkpoint.
    AnalyzeMotion {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write MT-Aug variants of every input image.
    Augment {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory or a single image.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train the recognition embedder and report the EER.
    TrainFvr {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Equal error rate from a score file or from an embedder and a test set.
    EvalEer {
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Grid of animations along the leading motion directions.
    RenderGrid {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MT_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::new(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let ctx = Ctx { cli: &cli, cfg: &cfg };
    match &cli.command {
        Command::SynthGen => ctx.synth_gen(),
        Command::TrainMt { data } => ctx.train_mt(data),
        Command::AnalyzeMotion { checkpoint, data } => ctx.analyze_motion(checkpoint, data),
        Command::Augment { checkpoint, input } => ctx.augment(checkpoint, input),
        Command::TrainFvr { checkpoint, data, test } => ctx.train_fvr(checkpoint, data, test),
        Command::EvalEer { scores, checkpoint, data } => ctx.eval_eer(scores, checkpoint, data),
        Command::RenderGrid { checkpoint, data } => ctx.render_grid(checkpoint, data),
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    cfg: &'a RunConfig,
}

fn pick(flag: &Option<PathBuf>, key: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| key.clone())
        .ok_or_else(|| Error::InvalidArgument(format!("no {what} given (flag or config key)")))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path.to_path_buf(), e))
}

fn basis_of(ck: &Checkpoint) -> Result<MotionBasis> {
    ck.basis()?
        .ok_or_else(|| Error::InvalidArgument("checkpoint has no motion basis (run analyze-motion)".into()))
}

impl Ctx<'_> {
    fn out(&self) -> Result<PathBuf> {
        self.cli
            .out
            .clone()
            .ok_or_else(|| Error::InvalidArgument("--out is required".into()))
    }

    /// `--out` for a file that must not be replaced silently.
    fn out_file(&self) -> Result<PathBuf> {
        let out = self.out()?;
        if out.exists() && !self.cli.overwrite {
            return Err(Error::InvalidArgument(format!("{} exists (use --overwrite)", out.display())));
        }
        Ok(out)
    }

    fn load_data(&self, flag: &Option<PathBuf>, config: &ModelConfig) -> Result<Dataset> {
        let dir = pick(flag, &self.cfg.data_dir, "data directory")?;
        ingest(&dir, config.height, config.width)
    }

    fn load_checkpoint(&self, flag: &Option<PathBuf>) -> Result<Checkpoint> {
        Checkpoint::load(&pick(flag, &self.cfg.checkpoint, "checkpoint")?)
    }

    fn synth_gen(&self) -> Result<()> {
        let out = self.out()?;
        let data = generate(&self.cfg.synth)?;
        write_dataset(&out, &data, self.cli.overwrite)?;
        log::info!("wrote {} images of {} classes to {}", data.dataset.len(), self.cfg.synth.classes, out.display());
        Ok(())
    }

    fn train_mt(&self, data: &Option<PathBuf>) -> Result<()> {
        let out = self.out_file()?;
        let ds = self.load_data(data, &self.cfg.model)?;
        let mut model = MtModel::new(self.cfg.model.clone())?;
        if let Some(fw) = &self.cfg.feature_weights {
            let ck = Checkpoint::load(fw)?;
            let t = ck
                .get("pyramid")
                .ok_or_else(|| Error::Checkpoint(format!("{}: no pyramid section", fw.display())))?;
            restore(&mut model.store, "pyramid", t)?;
        }
        let log_path = self.cfg.metrics_log.clone().unwrap_or_else(|| with_suffix(&out, ".metrics.tsv"));
        let mut log_file = fs::File::create(&log_path).map_err(|e| Error::io(log_path.clone(), e))?;
        let io = |e| Error::io(&log_path, e);
        writeln!(log_file, "epoch\tloss_perc\tloss_eq\ttotal").map_err(io)?;
        let mut write_err = None;
        train(&mut model, &ds.images, &ds.labels, &self.cfg.train, |m| {
            println!("{m}");
            if let Err(e) = writeln!(log_file, "{m}") {
                write_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = write_err {
            return Err(io(e));
        }
        Checkpoint::from_model(&model).save(&out)?;
        log::info!("saved {}", out.display());
        Ok(())
    }

    fn analyze_motion(&self, checkpoint: &Option<PathBuf>, data: &Option<PathBuf>) -> Result<()> {
        let src = pick(checkpoint, &self.cfg.checkpoint, "checkpoint")?;
        let out = match &self.cli.out {
            Some(_) => self.out_file()?,
            None => src.clone(),
        };
        let mut ck = Checkpoint::load(&src)?;
        let model = ck.to_model()?;
        let ds = self.load_data(data, &model.config)?;
        let deltas = collect_deltas(&ds, |x| model.detect(x))?;
        let basis = fit_basis(&deltas, self.cfg.aug.n)?;
        for (i, v) in basis.variances.iter().enumerate() {
            println!("component {i}\tvariance {v:.6}");
        }
        write_text(&with_suffix(&out, ".basis.txt"), &basis.to_text())?;
        ck.set_basis(&basis);
        ck.save(&out)
    }

    fn augment(&self, checkpoint: &Option<PathBuf>, input: &Option<PathBuf>) -> Result<()> {
        let out = self.out()?;
        let ck = self.load_checkpoint(checkpoint)?;
        let model = ck.to_model()?;
        let basis = basis_of(&ck)?;
        let input = pick(input, &self.cfg.data_dir, "input")?;
        let (images, names): (Vec<_>, Vec<_>) = if input.is_file() {
            let stem = input.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let x = load_image(&input)?;
            model.check_image(&x)?;
            (vec![x], vec![stem])
        } else {
            let ds = ingest(&input, model.config.height, model.config.width)?;
            (ds.images, ds.names)
        };
        if out.exists() && fs::read_dir(&out).map(|mut d| d.next().is_some()).unwrap_or(true) {
            if !self.cli.overwrite {
                return Err(Error::InvalidArgument(format!("{} exists and is not empty (use --overwrite)", out.display())));
            }
            fs::remove_dir_all(&out).map_err(|e| Error::io(out.clone(), e))?;
        }
        let (cfg, seed) = (self.cfg, self.cfg.train.seed);
        let results: Vec<Result<()>> = images
            .par_iter()
            .zip(&names)
            .enumerate()
            .map(|(i, (x, name))| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ i as u64);
                let base = out.join(name);
                if let Some(dir) = base.parent() {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir.to_path_buf(), e))?;
                }
                for v in 0..cfg.variants {
                    let scale = match cfg.aug_scale {
                        Some(s) => s,
                        None => rng.gen_range(cfg.aug.scale_min..=cfg.aug.scale_max),
                    };
                    let y = augment(&model, &basis, x, scale as f64, &mut rng)?;
                    save_image(&with_suffix(&base, &format!("_aug{v:02}.png")), &y)?;
                }
                Ok(())
            })
            .collect();
        results.into_iter().collect::<Result<Vec<_>>>()?;
        log::info!("wrote {} variants to {}", images.len() * cfg.variants, out.display());
        Ok(())
    }

    fn train_fvr(&self, checkpoint: &Option<PathBuf>, data: &Option<PathBuf>, test: &Option<PathBuf>) -> Result<()> {
        let out = self.out_file()?;
        let mt = match pick(checkpoint, &self.cfg.checkpoint, "checkpoint") {
            Ok(p) => Some(Checkpoint::load(&p)?),
            Err(_) => None,
        };
        let model_cfg = match &mt {
            Some(ck) => ck.model_config()?,
            None => self.cfg.model.clone(),
        };
        let ds = self.load_data(data, &model_cfg)?;
        let (train, test) = match pick(test, &self.cfg.test_dir, "test directory") {
            Ok(dir) => (ds, ingest(&dir, model_cfg.height, model_cfg.width)?),
            Err(_) => ds.split_per_class(self.cfg.train_per_class),
        };
        let parts = match (&mt, self.cfg.mt_aug) {
            (Some(ck), true) => Some((ck.to_model()?, basis_of(ck)?)),
            (None, true) => {
                return Err(Error::InvalidArgument("mt_aug needs a checkpoint with a motion basis (or set mt_aug = false)".into()))
            }
            (_, false) => None,
        };
        let augmentor = parts.as_ref().map(|(model, basis)| Augmentor {
            model,
            basis,
            config: self.cfg.aug.clone(),
        });
        let res = train_fvr(&train, &test, augmentor, &self.cfg.fvr)?;
        for e in &res.log {
            log::info!("fvr epoch {}\tloss {:.6}", e.epoch, e.loss);
        }
        let scores_path = self.cfg.scores.clone().unwrap_or_else(|| with_suffix(&out, ".scores.txt"));
        write_text(&scores_path, &res.scores.to_text())?;
        let mut ck = mt.unwrap_or_default();
        ck.set_meta(&model_cfg);
        ck.set_embedder(&res.model);
        ck.save(&out)?;
        println!("EER {:.4}", res.eer);
        Ok(())
    }

    fn eval_eer(&self, scores: &Option<PathBuf>, checkpoint: &Option<PathBuf>, data: &Option<PathBuf>) -> Result<()> {
        let set = match pick(scores, &self.cfg.scores, "score file") {
            Ok(p) if checkpoint.is_none() => ScoreSet::load(&p)?,
            _ => {
                let ck = self.load_checkpoint(checkpoint)?;
                let c = ck.model_config()?;
                let model = ck
                    .embedder(c.height, c.width)?
                    .ok_or_else(|| Error::InvalidArgument("checkpoint has no embedder (run train-fvr)".into()))?;
                let ds = self.load_data(data, &c)?;
                score_pairs(&model, &ds, self.cfg.fvr.all_impostors, self.cfg.fvr.seed ^ 0x5eed)?
            }
        };
        let (eer, threshold) = compute_eer(&set)?;
        log::info!(
            "{} genuine, {} impostor scores; threshold {threshold:.6}",
            set.genuine.len(),
            set.impostor.len()
        );
        println!("EER {eer:.4}");
        Ok(())
    }

    fn render_grid(&self, checkpoint: &Option<PathBuf>, data: &Option<PathBuf>) -> Result<()> {
        let out = self.out_file()?;
        let ck = self.load_checkpoint(checkpoint)?;
        let model = ck.to_model()?;
        let basis = basis_of(&ck)?;
        let ds = self.load_data(data, &model.config)?;
        let sources: Vec<_> = ds.images.into_iter().take(self.cfg.grid_rows).collect();
        let grid = render_grid(&model, &basis, &sources, self.cfg.grid_dirs)?;
        save_image(&out, &grid)
    }
}
