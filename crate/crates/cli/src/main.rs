use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use teachnet::analysis::alignment_report;
use teachnet::connectivity::{build_path_with_options, eval_path, DEFAULT_MATCH_RHO};
use teachnet::csvio::MetaLine;
use teachnet::data::{augment_agnostic, augment_aware, label_with, sample, Dataset, Distribution};
use teachnet::teacher::{build_teacher, TeacherSpec};
use teachnet::train::{init_student, theorem_condition_report, train, AugmentationKind, TrainConfig};
use teachnet::vmats::identity_residuals;
use teachnet::Network;
use teachnet_cli::config::{Experiment, ExperimentConfig};
use teachnet_cli::experiments::{self, gradient_check, verify_identities, AUGMENT_CAP, CONDITION_KAPPA};
use teachnet_cli::output::Sink;
use teachnet_cli::OUT_ENV;

#[derive(Parser)]
#[command(name = "teachnet", version, about = "Teacher-student rectified network laboratory")]
struct Cli {
    /// Root directory for experiment outputs.
    #[arg(long, env = OUT_ENV, default_value = "runs", global = true)]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AugKind {
    Agnostic,
    Aware,
}

#[derive(Subcommand)]
enum Command {
    /// Build a teacher from a calibration sample and save it as JSON.
    GenTeacher {
        /// Layer sizes, e.g. 20,10,20.
        #[arg(long, value_delimiter = ',', default_value = "20,10,20")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 0.0)]
        polarity: f64,
        #[arg(long, default_value_t = 0.0)]
        c_leaky: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample inputs, optionally labelled by a teacher.
    GenData {
        #[arg(long)]
        n: usize,
        /// Input dimension; taken from the teacher when one is given.
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long, default_value = "gaussian")]
        distribution: Distribution,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Augment a dataset along the axes or along teacher normals.
    Augment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, value_enum)]
        kind: AugKind,
        #[arg(long, default_value_t = 0.5)]
        eps: f64,
        #[arg(long, default_value_t = 0.01)]
        c: f64,
        /// Total first-layer node count K; defaults to teacher + 5x students.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a student on a dataset labelled by a teacher.
    Train {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        /// Student width per hidden layer as a multiple of the teacher's.
        #[arg(long, default_value_t = 5)]
        factor: usize,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stop once the per-sample sup of the first-layer gradient drops below this.
        #[arg(long)]
        stop_g1: Option<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Alignment, summary and condition reports for a trained student.
    Analyze {
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
        #[arg(long, default_value_t = 1)]
        layer: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Check the recursive gradient identity and analytic gradients.
    Verify {
        /// Check a specific pair on the given data instead of random nets.
        #[arg(long, requires_all = ["teacher", "data"])]
        student: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        triples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build and evaluate the low-loss path between two solutions.
    Connectivity {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MATCH_RHO)]
        min_rho: f64,
        #[arg(long, default_value_t = 11)]
        points: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run a named experiment over its seeds.
    Experiment {
        name: Experiment,
        /// JSON config; missing keys come from the experiment preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        factor: Option<usize>,
        /// Full-scale sizes instead of the desk presets.
        #[arg(long)]
        full: bool,
        /// Output directory, relative to the output root.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Print the resolved config and exit.
        #[arg(long)]
        dry_run: bool,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenTeacher { sizes, polarity, c_leaky, sigma, seed, out } => {
            let spec = TeacherSpec { layer_sizes: sizes, polarity, c_leaky, seed, ..TeacherSpec::default() };
            spec.validate()?;
            let d = spec.layer_sizes[0];
            let cal = sample(Distribution::Gaussian, (100 * d).max(2000), d, sigma, seed.wrapping_add(1))?;
            let teacher = build_teacher(&spec, &cal)?;
            teacher.save(&out).with_context(|| format!("writing {}", out.display()))?;
            println!("teacher {:?} -> {}", teacher.layer_sizes(), out.display());
        }
        Command::GenData { n, dim, distribution, sigma, seed, teacher, out } => {
            let teacher = teacher.map(|p| load_net(&p)).transpose()?;
            let d = match (&teacher, dim) {
                (Some(t), _) => t.input_dim(),
                (None, Some(d)) => d,
                (None, None) => bail!("give --dim or --teacher"),
            };
            let mut data = sample(distribution, n, d, sigma, seed)?;
            if let Some(t) = &teacher {
                data = label_with(t, &data)?;
            }
            data.save_csv(&out, &data.meta_line())?;
            println!("{} samples in {d} dims -> {}", data.len(), out.display());
        }
        Command::Augment { data, teacher, kind, eps, c, k, out } => {
            let base = load_data(&data)?;
            let teacher = load_net(&teacher)?;
            let k = k.unwrap_or(6 * teacher.width(1));
            let aug = match kind {
                AugKind::Agnostic => label_with(&teacher, &augment_agnostic(&base, eps, c, k, AUGMENT_CAP)?)?,
                AugKind::Aware => augment_aware(&base, &teacher, eps, c, k)?,
            };
            let kind_name = match kind {
                AugKind::Agnostic => "agnostic",
                AugKind::Aware => "aware",
            };
            let meta = aug.meta_line().with("augment", kind_name).with("eps", eps).with("c", c).with("k", k);
            aug.save_csv(&out, &meta)?;
            println!("{} -> {} samples -> {}", base.len(), aug.len(), out.display());
        }
        Command::Train { teacher, data, eval, factor, epochs, lr, batch, seed, stop_g1, out_dir } => {
            let teacher = load_net(&teacher)?;
            let data = load_data(&data)?;
            let eval = load_data(&eval)?;
            let sizes = scaled_sizes(&teacher, factor);
            let student = init_student(&sizes, teacher.activation(), seed)?;
            let cfg = TrainConfig {
                learning_rate: lr,
                batch_size: batch,
                epochs,
                seed,
                stop_when_g1_below: stop_g1,
                ..TrainConfig::default()
            };
            let out = train(&student, &teacher, &data, &eval, &cfg)?;
            std::fs::create_dir_all(&out_dir)?;
            let meta = MetaLine::new("trace").with("seed", seed).with("factor", factor);
            std::fs::write(out_dir.join("trace.csv"), out.trace.to_csv(&meta)?)?;
            out.student.save(out_dir.join("student.json"))?;
            let last = out.trace.last().expect("trace has epoch 0");
            println!(
                "epochs {} train {:.4e} eval {:.4e} g1 {:.3e}{}",
                last.epoch,
                last.train_loss,
                last.eval_loss,
                last.g1_sup,
                if out.stopped_early { " (stopped early)" } else { "" }
            );
        }
        Command::Analyze { student, teacher, data, eps, layer, out_dir } => {
            let student = load_net(&student)?;
            let teacher = load_net(&teacher)?;
            let data = load_data(&data)?;
            let report = alignment_report(&student, &teacher, &data, layer, eps)?;
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(out_dir.join("alignment.csv"), report.to_csv(&MetaLine::new("alignment"), 0)?)?;
            std::fs::write(out_dir.join("pairs.csv"), report.pairs_csv(&MetaLine::new("pairs"))?)?;
            if student.depth() >= 2 && layer == 1 {
                let cond = theorem_condition_report(&student, &teacher, &data, eps, CONDITION_KAPPA, AugmentationKind::Agnostic)?;
                std::fs::write(out_dir.join("conditions.csv"), cond.to_csv(&MetaLine::new("conditions"))?)?;
            }
            let aligned = report.teachers.iter().filter(|t| t.aligned).count();
            let best: Vec<String> = report.teachers.iter().map(|t| format!("{:.3}", t.best_rho)).collect();
            println!("aligned teachers {aligned}/{}; best rho [{}]", report.teachers.len(), best.join(", "));
        }
        Command::Verify { student, teacher, data, triples, seed } => match (student, teacher, data) {
            (Some(s), Some(t), Some(d)) => {
                let (s, t, d) = (load_net(&s)?, load_net(&t)?, load_data(&d)?);
                let mut worst: f64 = 0.0;
                for i in 0..d.len() {
                    for r in identity_residuals(&s, &t, d.sample(i))? {
                        worst = worst.max(r);
                    }
                }
                println!("max identity residual over {} samples: {worst:.3e}", d.len());
            }
            _ => {
                let cfg = ExperimentConfig::preset(Experiment::VerifyIdentities);
                let id = verify_identities(&cfg, triples, seed)?;
                for (depth, n, r) in &id.per_depth {
                    println!("depth {depth}: {n} triples, max residual {r:.3e}");
                }
                let g = gradient_check(100, 1e-5, seed)?;
                println!("max identity residual {:.3e}", id.max_residual);
                println!("gradient check: {} nets, max relative error {:.3e}", g.nets, g.max_rel_err);
            }
        },
        Command::Connectivity { a, b, teacher, data, min_rho, points, out_dir } => {
            let (a, b, teacher) = (load_net(&a)?, load_net(&b)?, load_net(&teacher)?);
            let data = load_data(&data)?;
            let data = if data.labels.is_some() { data } else { label_with(&teacher, &data)? };
            let ra = alignment_report(&a, &teacher, &data, 1, 0.05)?;
            let rb = alignment_report(&b, &teacher, &data, 1, 0.05)?;
            let path = build_path_with_options(&a, &b, &ra, &rb, min_rho)?;
            let e = eval_path(&path, &data, points)?;
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(out_dir.join("path.json"), path.to_json()?)?;
            std::fs::write(out_dir.join("path.csv"), e.to_csv(&MetaLine::new("path"))?)?;
            println!(
                "{} segments; endpoint {:.3e}, path max {:.3e}, straight max {:.3e}",
                path.num_segments(),
                e.endpoint_loss,
                e.path_max,
                e.straight_max
            );
        }
        Command::Experiment { name, config, seeds, epochs, lr, factor, full, out_dir, dry_run } => {
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::preset(name),
            };
            if cfg.experiment != name {
                bail!("config is for {} but {} was requested", cfg.experiment, name);
            }
            if full {
                cfg = cfg.full_profile();
            }
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(l) = lr {
                cfg.train.learning_rate = l;
            }
            if let Some(f) = factor {
                cfg.overrealization = f;
            }
            if let Some(d) = out_dir {
                cfg.out_dir = Some(d);
            }
            cfg.validate()?;
            if dry_run {
                println!("{}", serde_json::to_string_pretty(&cfg)?);
                return Ok(());
            }
            let dir = cfg.output_dir(&cli.out_root);
            let hash = cfg.hash();
            let sink = Sink::new(Some(dir.clone()), &hash, name.name());
            sink.write(None, "config.json", |_| Ok(serde_json::to_string_pretty(&cfg)?))?;
            let outcome = experiments::run(&cfg, &sink).with_context(|| format!("experiment {name} (partial outputs flagged)"))?;
            println!("{}", experiments::summary_line(&outcome));
            println!("config {hash} -> {}", dir.display());
        }
    }
    Ok(())
}

fn load_net(path: &Path) -> Result<Network> {
    Network::load(path).with_context(|| format!("loading network {}", path.display()))
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::load_csv(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn scaled_sizes(teacher: &Network, factor: usize) -> Vec<usize> {
    let sizes = teacher.layer_sizes();
    let last = sizes.len() - 1;
    sizes
        .iter()
        .enumerate()
        .map(|(i, &s)| if i == 0 || i == last { s } else { s * factor })
        .collect()
}
