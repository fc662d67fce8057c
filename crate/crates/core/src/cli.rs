//! Command-line entry point.
//!
//! Exit status is 0 on success, 2 for usage errors (reported by clap) and 1
//! for any error raised while running a command.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::dataset::{self, mirror, DatasetManifest, FaceSample, Image, Landmarks, OccludedSide};
use crate::embedder::{self, Embedder, EmbedderTraining};
use crate::error::{Error, Result};
use crate::evalkit::{self, RowMeta, Source};
use crate::trainer::{self, TrainingConfig};

#[derive(Debug, Parser)]
#[command(name = "tpgan", version, about = "Frontal face synthesis with a two-pathway GAN")]
pub struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory for outputs whose path is not given explicitly.
    #[arg(long, global = true, env = "TPGAN_OUT_DIR", default_value = "tpgan-out")]
    pub out_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic paired dataset (train split, plus probe/gallery
    /// splits when --probe-identities is positive).
    DatasetGen(DatasetGenArgs),
    /// Train the identity embedder on a training manifest.
    TrainEmbedder(TrainEmbedderArgs),
    /// Train the generator and discriminator.
    Train(TrainArgs),
    /// Frontalize a single image with explicit landmarks.
    Synthesize(SynthesizeArgs),
    /// Rank-1 recognition of synthesized frontals against a gallery.
    Evaluate(EvaluateArgs),
    /// Export embeddings of a manifest's images as CSV.
    Embed(EmbedArgs),
    /// Write a profile | synthesis | ground-truth comparison grid.
    Grid(GridArgs),
}

#[derive(Debug, Args)]
pub struct DatasetGenArgs {
    /// Number of training identities.
    #[arg(long)]
    pub identities: u32,
    /// Comma-separated yaw angles in degrees.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0,15,30,45,60,75,90")]
    pub yaws: Vec<i32>,
    /// Held-out identities rendered into probe and gallery splits.
    #[arg(long, default_value_t = 0)]
    pub probe_identities: u32,
    /// Output directory (defaults to <out-dir>/data).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainEmbedderArgs {
    /// Training manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    /// Output checkpoint (defaults to <out-dir>/embedder.ckpt).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML training configuration; omitted keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config overrides as key=value (dotted keys reach nested tables).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Training manifest (overrides train_manifest in the config).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Embedder checkpoint (overrides embedder_checkpoint in the config).
    #[arg(long)]
    pub embedder: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    /// Input profile image (128×128 PNG).
    #[arg(long)]
    pub input: PathBuf,
    /// Landmarks as "x1,y1,x2,y2,x3,y3,x4,y4": left eye, right eye, nose, mouth.
    #[arg(long, allow_hyphen_values = true)]
    pub landmarks: String,
    #[arg(long)]
    pub generator: PathBuf,
    /// Mirror the input first (for faces whose occluded side is on the image left).
    #[arg(long)]
    pub flip: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub generator: PathBuf,
    #[arg(long)]
    pub embedder: PathBuf,
    #[arg(long)]
    pub probes: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    /// JSON report (defaults to <out-dir>/recognition.json).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub embedder: PathBuf,
    /// Manifest whose profile images are embedded.
    #[arg(long)]
    pub data: PathBuf,
    /// Also embed frontals synthesized by this generator.
    #[arg(long)]
    pub generator: Option<PathBuf>,
    /// Append the first two principal components.
    #[arg(long)]
    pub pca: bool,
    /// Output CSV (defaults to <out-dir>/embeddings.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub generator: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Number of rows, taken from the start of the manifest.
    #[arg(long, default_value_t = 3)]
    pub count: usize,
    /// Output PNG (defaults to <out-dir>/grid.png).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn or_default(path: &Option<PathBuf>, out_dir: &Path, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| out_dir.join(name))
}

pub fn execute(cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::DatasetGen(a) => {
            let out = or_default(&a.out, &cli.out_dir, "data");
            if a.probe_identities > 0 {
                let b = dataset::generate_benchmark(a.identities, a.probe_identities, &a.yaws, seed, &out)?;
                println!(
                    "wrote {} train, {} probe and {} gallery samples to {}",
                    b.train.len(),
                    b.probe.len(),
                    b.gallery.len(),
                    out.display()
                );
            } else {
                let m = dataset::generate_synthetic(a.identities, &a.yaws, seed, &out)?;
                println!("wrote {} samples to {}", m.len(), out.display());
            }
        }
        Command::TrainEmbedder(a) => {
            let manifest = DatasetManifest::load(&a.data)?;
            let samples = manifest.load_all()?;
            let options = EmbedderTraining {
                epochs: a.epochs,
                batch_size: a.batch_size,
                learning_rate: a.learning_rate,
                seed,
            };
            let (emb, report) = embedder::train_embedder(&samples, options)?;
            let out = or_default(&a.out, &cli.out_dir, "embedder.ckpt");
            emb.save(&out)?;
            println!(
                "embedder trained: accuracy {:.4}, final loss {:.4}; saved to {}",
                report.train_accuracy,
                report.final_loss,
                out.display()
            );
        }
        Command::Train(a) => {
            let base = match &a.config {
                Some(p) => TrainingConfig::load(p)?,
                None => TrainingConfig {
                    output_dir: cli.out_dir.join("run"),
                    ..TrainingConfig::default()
                },
            };
            let mut config = base.with_overrides(&a.overrides)?;
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            if a.data.is_some() {
                config.train_manifest = a.data.clone();
            }
            if a.embedder.is_some() {
                config.embedder_checkpoint = a.embedder.clone();
            }
            let manifest_path = config
                .train_manifest
                .clone()
                .ok_or_else(|| Error::Config("no training manifest (use --data or train_manifest)".into()))?;
            let manifest = DatasetManifest::load(&manifest_path)?;
            let ckpt = trainer::train(&config, &manifest)?;
            println!("training finished; checkpoint {}", ckpt.display());
        }
        Command::Synthesize(a) => {
            let image = Image::load_png(&a.input)?;
            let landmarks = Landmarks::parse(&a.landmarks)?;
            let mut sample = FaceSample {
                frontal_image: image.clone(),
                profile_image: image,
                landmarks_profile: landmarks,
                identity: 0,
                yaw_degrees: 0,
                occluded: OccludedSide::None,
            };
            sample.validate()?;
            if a.flip {
                sample = mirror(&sample);
            }
            let g = trainer::load_generator(&a.generator)?;
            let out = g
                .generator
                .frontalize(&sample.profile_image.to_tensor().unsqueeze(0), &[sample.landmarks_profile])?;
            let mut result = Image::from_tensor(&out.get(0))?;
            if a.flip {
                result = result.mirrored();
            }
            result.save_png(&a.out)?;
            println!("wrote {}", a.out.display());
        }
        Command::Evaluate(a) => {
            let g = trainer::load_generator(&a.generator)?;
            let emb = Embedder::load(&a.embedder)?;
            let probes = DatasetManifest::load(&a.probes)?.load_all()?;
            let gallery = DatasetManifest::load(&a.gallery)?.load_all()?;
            let train_ids: BTreeSet<u32> = g.info.identities.iter().copied().collect();
            let result = evalkit::rank1_eval(&g.generator, &emb, &probes, &gallery, &train_ids)?;
            let out = or_default(&a.report, &cli.out_dir, "recognition.json");
            write_text(&out, &result.to_json())?;
            for (yaw, acc) in &result.per_yaw {
                println!(
                    "yaw {yaw:+4}: synthesized {:.3}  baseline {:.3}  ({} probes)",
                    acc.synthesized, acc.baseline, acc.probes
                );
            }
            println!("report written to {}", out.display());
        }
        Command::Embed(a) => {
            let emb = Embedder::load(&a.embedder)?;
            let samples = DatasetManifest::load(&a.data)?.load_all()?;
            let mut tensors = vec![emb.embed_batched(&embedder::stack_profiles(&samples), 64)?];
            let mut meta: Vec<RowMeta> = samples
                .iter()
                .map(|s| RowMeta {
                    identity: s.identity,
                    yaw: s.yaw_degrees,
                    source: Source::Profile,
                })
                .collect();
            if let Some(path) = &a.generator {
                let g = trainer::load_generator(path)?;
                let syn = evalkit::synthesize_frontals(&g.generator, &samples)?;
                tensors.push(emb.embed_batched(&syn, 64)?);
                meta.extend(samples.iter().map(|s| RowMeta {
                    identity: s.identity,
                    yaw: s.yaw_degrees,
                    source: Source::Synthesized,
                }));
            }
            let out = or_default(&a.out, &cli.out_dir, "embeddings.csv");
            evalkit::export_embeddings(&tch::Tensor::cat(&tensors, 0), &meta, &out, a.pca)?;
            println!("wrote {} rows to {}", meta.len(), out.display());
        }
        Command::Grid(a) => {
            let g = trainer::load_generator(&a.generator)?;
            let manifest = DatasetManifest::load(&a.data)?;
            let n = a.count.min(manifest.len());
            let samples = (0..n).map(|i| manifest.load_sample(i)).collect::<Result<Vec<_>>>()?;
            let out = or_default(&a.out, &cli.out_dir, "grid.png");
            evalkit::emit_image_grid(&g.generator, &samples, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["tpgan", "no-such-command"]), 2);
        assert_eq!(run(["tpgan", "dataset-gen", "--identities", "2", "--bogus"]), 2);
        assert_eq!(run(["tpgan", "--help"]), 0);
    }

    #[test]
    fn module_errors_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d");
        let out = out.to_str().unwrap();
        assert_eq!(run(["tpgan", "dataset-gen", "--identities", "1", "--out", out]), 1);
    }

    #[test]
    fn negative_yaws_parse() {
        let cli = Cli::try_parse_from(["tpgan", "dataset-gen", "--identities", "2", "--yaws", "-30,0,30"]).unwrap();
        match cli.command {
            Command::DatasetGen(a) => assert_eq!(a.yaws, vec![-30, 0, 30]),
            _ => unreachable!(),
        }
    }
}
