use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use gaugesphere::artifacts::{build_rotmaps, mesh_from_container, mesh_to_container, rotmaps_to_container, tables_to_container, RotationMode};
use gaugesphere::config::ModelConfig;
use gaugesphere::container::Container;
use gaugesphere::harness::dataset::{dataset_from_container, dataset_to_container, make_synthetic_dataset, pose_perturb_dataset, SceneStyle};
use gaugesphere::harness::render::{render_field, render_labels, write_png};
use gaugesphere::harness::stress::stress_model;
use gaugesphere::harness::train::train_from;
use gaugesphere::icosphere::build_icosphere;
use gaugesphere::model::{Checkpoint, Geometry, Model};
use gaugesphere::{selftest, Error, Result};

#[derive(Parser)]
#[command(name = "gaugesphere", version, about = "Rotation-robust spherical transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Field {
    Labels,
    Features,
    Prediction,
}

#[derive(Subcommand)]
enum Command {
    /// Build an icosphere and write it as a mesh container.
    Mesh {
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Geodesic cache and coarser-rank transfer for a mesh file.
    Tables {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long, default_value_t = 3)]
        anchors: usize,
        #[arg(long, default_value_t = 16)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample rotations and dump their token/output index maps.
    Rotmap {
        #[arg(long)]
        mesh_token: PathBuf,
        #[arg(long)]
        mesh_out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// capped35, uniform or zyx
        #[arg(long, default_value = "uniform")]
        mode: String,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic segmentation dataset.
    GenData {
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Apply a per-sample capped rotation of at most this many degrees.
        #[arg(long)]
        pose_max_deg: Option<f64>,
        #[arg(long, default_value_t = 35)]
        pose_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes a checkpoint and a JSON-lines epoch log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint under random ZYX rotations.
    Stress {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Must agree with the checkpoint's architecture when given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        rotations: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one sample to an equirectangular PNG.
    Render {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, value_enum, default_value_t = Field::Labels)]
        field: Field,
        /// Required for `--field prediction`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the property suite; exits 1 if any check fails.
    Selftest {
        /// Also write the outcomes as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print the default configuration file.
    Config,
}

fn write_json(path: &Path, v: serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(&v).expect("serializable") + "\n")?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Mesh { rank, out } => {
            let mesh = build_icosphere(rank)?;
            mesh_to_container(&mesh).write(&out)?;
            println!("rank {rank}: {} vertices, {} faces -> {}", mesh.len(), mesh.faces.len(), out.display());
        }
        Command::Tables { mesh, anchors, bins, out } => {
            if anchors == 0 || bins == 0 {
                return Err(Error::Config("anchors and bins must be positive".into()));
            }
            let m = mesh_from_container(&Container::read(&mesh)?)?;
            tables_to_container(&m, anchors, bins)?.write(&out)?;
            println!("rank {} tables -> {}", m.rank, out.display());
        }
        Command::Rotmap { mesh_token, mesh_out, seed, mode, count, out } => {
            let mode: RotationMode = mode.parse()?;
            let token = mesh_from_container(&Container::read(&mesh_token)?)?;
            let output = mesh_from_container(&Container::read(&mesh_out)?)?;
            let sets = build_rotmaps(mode, count, seed, &token, &output)?;
            rotmaps_to_container(&sets, &token, &output, json!({"seed": seed, "mode": format!("{mode:?}").to_lowercase()})).write(&out)?;
            println!("{count} rotation map sets -> {}", out.display());
        }
        Command::GenData { rank, count, seed, pose_max_deg, pose_seed, out } => {
            let mesh = build_icosphere(rank)?;
            let mut data = make_synthetic_dataset(&mesh, count, seed, &SceneStyle::default())?;
            let mut meta = json!({"seed": seed});
            if let Some(deg) = pose_max_deg {
                if !(0.0..=180.0).contains(&deg) {
                    return Err(Error::Config(format!("pose cap must lie in [0, 180] degrees, got {deg}")));
                }
                data = pose_perturb_dataset(&data, &mesh, deg.to_radians(), pose_seed)?;
                meta["pose"] = json!({"max_deg": deg, "seed": pose_seed});
            }
            dataset_to_container(&data, rank, meta)?.write(&out)?;
            println!("{count} samples at rank {rank} -> {}", out.display());
        }
        Command::Train { config, data, val, out, log } => {
            let cfg = ModelConfig::load(&config)?;
            let (train_set, rank) = dataset_from_container(&Container::read(&data)?)?;
            if rank != cfg.output_rank {
                return Err(Error::Config(format!("dataset is rank {rank}, config output_rank is {}", cfg.output_rank)));
            }
            let val_set = match val {
                Some(p) => Some(dataset_from_container(&Container::read(&p)?)?.0),
                None => None,
            };
            let geo = Geometry::build(&cfg)?;
            let mut log_file = match &log {
                Some(p) => Some(BufWriter::new(File::create(p)?)),
                None => None,
            };
            let output = train_from(
                Checkpoint::new(Model::new(&cfg)?),
                &geo,
                &train_set,
                val_set.as_deref(),
                log_file.as_mut().map(|w| w as &mut dyn Write),
            )?;
            if let Some(w) = log_file.as_mut() {
                w.flush()?;
            }
            output.checkpoint.save(&out)?;
            if let Some(last) = output.log.last() {
                println!("epoch {} seg {:.4} eq {:.4} val mIoU {:?}", last.epoch, last.seg_loss, last.eq_loss, last.val_miou);
            }
            println!("checkpoint -> {}", out.display());
        }
        Command::Stress { checkpoint, data, config, rotations, repeats, seed, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            if let Some(p) = config {
                let cfg = ModelConfig::load(&p)?;
                if cfg.output_rank != ck.model.config.output_rank || cfg.levels != ck.model.config.levels || cfg.dim != ck.model.config.dim {
                    return Err(Error::Config("config does not match the checkpoint architecture".into()));
                }
            }
            let (set, rank) = dataset_from_container(&Container::read(&data)?)?;
            if rank != ck.model.config.output_rank {
                return Err(Error::Config(format!("dataset is rank {rank}, checkpoint output rank is {}", ck.model.config.output_rank)));
            }
            let geo = Geometry::build(&ck.model.config)?;
            let report = stress_model(&ck.model, &geo, &set, rotations, repeats, seed)?;
            write_json(&out, serde_json::to_value(&report).expect("report serializes"))?;
            println!("base mIoU {:.2}  SO(3) mIoU {:.2} -> {}", report.base_miou, report.so3_miou, out.display());
        }
        Command::Render { data, sample, field, checkpoint, height, out } => {
            let (set, rank) = dataset_from_container(&Container::read(&data)?)?;
            let s = set.get(sample).ok_or_else(|| Error::Data(format!("sample {sample} out of range ({} samples)", set.len())))?;
            let mesh = build_icosphere(rank)?;
            let img = match field {
                Field::Labels => render_labels(&s.labels, &mesh, height)?,
                Field::Features => render_field(s.features.view(), &mesh, height)?,
                Field::Prediction => {
                    let p = checkpoint.ok_or_else(|| Error::Config("--field prediction needs --checkpoint".into()))?;
                    let ck = Checkpoint::load(&p)?;
                    if ck.model.config.output_rank != rank {
                        return Err(Error::Config("checkpoint and dataset ranks differ".into()));
                    }
                    let geo = Geometry::build(&ck.model.config)?;
                    let x0 = geo.tokens_from_output(s.features.view())?;
                    render_labels(&ck.model.predict(&geo, x0.view())?, &mesh, height)?
                }
            };
            write_png(&img, &out)?;
            println!("{}x{} -> {}", img.width, img.height, out.display());
        }
        Command::Selftest { json } => {
            let outcomes = selftest::run_all();
            for o in &outcomes {
                println!("{}", o.line());
            }
            if let Some(p) = json {
                write_json(&p, serde_json::to_value(&outcomes).expect("outcomes serialize"))?;
            }
            if outcomes.iter().any(|o| !o.passed) {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Config => print!("{}", ModelConfig::default().to_toml_string()),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
