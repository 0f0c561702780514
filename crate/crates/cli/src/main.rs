//! Command-line driver: synthetic data generation, the two training
//! stages, batch attack, retrieval evaluation and pseudo-token
//! interpretation.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use prompt_attack_core::attack::{
    apply_perturbation, train_attack, AttackLogEntry, PerturbationGenerator, SurrogateModel,
    VisualSurrogate,
};
use prompt_attack_core::checkpoint::{load_checkpoint, save_checkpoint};
use prompt_attack_core::config::RunConfig;
use prompt_attack_core::encoders::{
    build_reference_encoders, encoders_from_arrays, encoders_to_arrays, JointSpaceConfig,
};
use prompt_attack_core::error::{Error, Result};
use prompt_attack_core::imageio::save_png;
use prompt_attack_core::interpret::{export_wordcloud_data, interpret_tokens};
use prompt_attack_core::inversion::{train_inversion, InversionNetworks, TrainLogEntry};
use prompt_attack_core::metrics::evaluate;
use prompt_attack_core::prompt::{parse_template, tokenize, Vocabulary, DEFAULT_TEMPLATE};
use prompt_attack_core::synthdata::{
    all_color_words, attribute_vocabulary, calibrate_color_embeddings, generate_dataset,
    load_reid_folder, write_dataset, HandcraftedExtractor, ATTRIBUTE_COUNT,
};
use prompt_attack_core::tensor::Tensor;
use prompt_attack_core::{defenses, Real, RealSyntheticDataset};

#[derive(Parser)]
#[command(name = "prompt-attack", about = "Attribute-aware retrieval attack pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus `--set key=value` dotted-path overrides.
#[derive(Args)]
struct ConfigArgs {
    /// Optional YAML/JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set stage2.epsilon=0.05
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for ov in &self.overrides {
            let (key, value) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{ov}' is not KEY=VALUE")))?;
            cfg.apply_override(key, value)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic re-identification dataset.
    SynthGen {
        /// Output folder for PNGs and attributes.json.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Stage 1: train the per-attribute inversion networks.
    TrainInversion {
        /// Dataset folder (PID_cCAM_SEQ.png).
        #[arg(long)]
        data: PathBuf,
        /// Output model checkpoint.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Stage 2: train the perturbation generator against the surrogate.
    TrainAttack {
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Output model checkpoint (encoders + nets + generator).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write adversarial images for a dataset folder.
    Attack {
        #[arg(long)]
        data: PathBuf,
        /// Model checkpoint containing a trained generator.
        #[arg(long)]
        model: PathBuf,
        /// Output folder for adversarial PNGs and manifest.json.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score clean and adversarial retrieval on the victim models.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Output report path (.json); a .csv sibling is written too.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Rank candidate words against each image's pseudo-tokens.
    Interpret {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Output word-cloud CSV.
        #[arg(long)]
        out: PathBuf,
        /// Keep the top N words per attribute (0 = all).
        #[arg(long, default_value_t = 3)]
        top: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn build_vocab() -> Result<Vocabulary> {
    let template = parse_template(DEFAULT_TEMPLATE)?;
    Vocabulary::from_words(
        template.words().iter().chain(&all_color_words()),
        template.slot_count(),
    )
}

/// Joint-space config sized to the dataset images.
fn joint_config(cfg: &RunConfig) -> JointSpaceConfig {
    JointSpaceConfig {
        image_size: (cfg.dataset.height, cfg.dataset.width),
        ..cfg.joint_space.clone()
    }
}

struct Model {
    visual: prompt_attack_core::RealVisualEncoder,
    text: prompt_attack_core::RealTextEncoder,
    nets: InversionNetworks<Real>,
    generator: Option<PerturbationGenerator<Real>>,
}

fn load_model(path: &Path) -> Result<Model> {
    let ck = load_checkpoint::<Real>(path)?;
    let encoder_arrays: Vec<_> = ck
        .arrays
        .iter()
        .filter(|(n, _)| !n.starts_with("inversion.") && !n.starts_with("generator."))
        .cloned()
        .collect();
    let inversion_arrays: Vec<_> = ck
        .arrays
        .iter()
        .filter(|(n, _)| n.starts_with("inversion."))
        .cloned()
        .collect();
    let generator_arrays: Vec<_> = ck
        .arrays
        .iter()
        .filter(|(n, _)| n.starts_with("generator."))
        .cloned()
        .collect();
    let (visual, text) = encoders_from_arrays(encoder_arrays)?;
    let mut nets = InversionNetworks::from_arrays(&inversion_arrays)?;
    nets.frozen = true;
    let generator = if generator_arrays.is_empty() {
        None
    } else {
        Some(PerturbationGenerator::from_arrays(&generator_arrays)?)
    };
    Ok(Model { visual, text, nets, generator })
}

fn save_model(path: &Path, model: &Model, digest: &str) -> Result<()> {
    let mut arrays = encoders_to_arrays(&model.visual, &model.text);
    arrays.extend(model.nets.named_arrays());
    if let Some(g) = &model.generator {
        arrays.extend(g.named_arrays());
    }
    save_checkpoint(path, &arrays, digest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn defense_transform(
    cfg: &RunConfig,
) -> Result<Option<Box<dyn Fn(&Tensor<Real>) -> Result<Tensor<Real>>>>> {
    if cfg.defenses.trim().is_empty() {
        return Ok(None);
    }
    let chain = defenses::parse_defense_chain(&cfg.defenses)?;
    let seed = cfg.stage2.seed;
    Ok(Some(Box::new(move |x: &Tensor<Real>| {
        defenses::apply_defense_chain(&chain, x, seed)
    })))
}

fn subset<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_digest: String,
    images: usize,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::SynthGen { out, config } => {
            let cfg = config.resolve()?;
            let ds: RealSyntheticDataset = generate_dataset(&cfg.dataset)?;
            write_dataset(&ds, &out)?;
            write_json(
                &out.join("run.json"),
                &RunManifest {
                    command: "synth-gen",
                    config_digest: cfg.digest(),
                    images: ds.len(),
                },
            )?;
            println!(
                "wrote {} images for {} identities to {}",
                ds.len(),
                cfg.dataset.identities,
                out.display()
            );
        }
        Command::TrainInversion { data, out, config } => {
            let cfg = config.resolve()?;
            let ds: RealSyntheticDataset = load_reid_folder(&data)?;
            let js = joint_config(&cfg);
            let vocab = build_vocab()?;
            let (visual, mut text) =
                build_reference_encoders::<Real>(cfg.stage1.seed, &js, vocab.table_size())?;
            calibrate_color_embeddings(&mut text, &vocab, &visual, js.image_size.0, js.image_size.1)?;
            let template = parse_template(DEFAULT_TEMPLATE)?;
            let tokens = tokenize(&template, &vocab)?;
            let mut nets = InversionNetworks::seeded(
                cfg.stage1.seed,
                ATTRIBUTE_COUNT,
                js.feature_dim,
                js.token_embedding_dim,
            );
            let log: Vec<TrainLogEntry> = train_inversion(
                &ds.images,
                &ds.pids(),
                &visual,
                &text,
                &tokens,
                &mut nets,
                &cfg.stage1,
            )?;
            let model = Model { visual, text, nets, generator: None };
            save_model(&out, &model, &cfg.digest())?;
            write_json(&out.with_extension("log.json"), &log)?;
            let last = log.last().expect("at least one epoch");
            println!(
                "stage 1 done: {} epochs, final loss {:.4}; model at {}",
                log.len(),
                last.total,
                out.display()
            );
        }
        Command::TrainAttack { data, model, out, config } => {
            let cfg = config.resolve()?;
            let ds: RealSyntheticDataset = load_reid_folder(&data)?;
            let mut m = load_model(&model)?;
            let (h, w) = m.visual.config.image_size;
            let surrogate = HandcraftedExtractor::<Real>::new(h, w, cfg.dataset.seed)?;
            let mut gen = PerturbationGenerator::seeded(cfg.stage2.seed, cfg.stage2.generator);
            let log: Vec<AttackLogEntry> = train_attack(
                &ds.images,
                &ds.pids(),
                &m.visual,
                &m.nets,
                &surrogate,
                &mut gen,
                &cfg.stage2,
            )?;
            m.generator = Some(gen);
            save_model(&out, &m, &cfg.digest())?;
            write_json(&out.with_extension("log.json"), &log)?;
            let last = log.last().expect("at least one epoch");
            println!(
                "stage 2 done: {} epochs, final loss {:.4}; model at {}",
                log.len(),
                last.total,
                out.display()
            );
        }
        Command::Attack { data, model, out, config } => {
            let cfg = config.resolve()?;
            let ds: RealSyntheticDataset = load_reid_folder(&data)?;
            let m = load_model(&model)?;
            let gen = m.generator.as_ref().ok_or_else(|| {
                Error::Load("checkpoint has no trained generator; run train-attack first".into())
            })?;
            std::fs::create_dir_all(&out)?;
            let eps = cfg.stage2.epsilon;
            #[derive(Serialize)]
            struct PerImage {
                file: String,
                max_abs_delta: f64,
                mean_abs_delta: f64,
            }
            let mut rows = Vec::with_capacity(ds.len());
            for (img, name) in ds.images.iter().zip(&ds.filenames) {
                let adv = apply_perturbation(gen, img, eps)?;
                save_png(&adv, &out.join(name))?;
                let deltas: Vec<f64> = img
                    .data()
                    .iter()
                    .zip(adv.data())
                    .map(|(a, b)| (a - b).abs())
                    .collect();
                rows.push(PerImage {
                    file: name.clone(),
                    max_abs_delta: deltas.iter().copied().fold(0.0, f64::max),
                    mean_abs_delta: deltas.iter().sum::<f64>() / deltas.len() as f64,
                });
            }
            #[derive(Serialize)]
            struct AttackManifest {
                config_digest: String,
                epsilon: f64,
                images: Vec<PerImage>,
            }
            write_json(
                &out.join("manifest.json"),
                &AttackManifest {
                    config_digest: cfg.digest(),
                    epsilon: eps,
                    images: rows,
                },
            )?;
            println!("wrote {} adversarial images to {}", ds.len(), out.display());
        }
        Command::Evaluate { data, model, out, config } => {
            let cfg = config.resolve()?;
            let m = load_model(&model)?;
            let gen = m.generator.as_ref().ok_or_else(|| {
                Error::Load("checkpoint has no trained generator; run train-attack first".into())
            })?;
            let (h, w) = m.visual.config.image_size;
            let handcrafted = HandcraftedExtractor::<Real>::new(h, w, cfg.dataset.seed)?;
            let joint = VisualSurrogate {
                encoder: m.visual.clone(),
                label: "joint-space-visual".to_string(),
            };
            let victims: Vec<&dyn SurrogateModel<Real>> = vec![&handcrafted, &joint];
            // Prefer explicit query/ and gallery/ splits; otherwise split
            // the single folder by camera (camera 0 = query).
            let (queries, qm, gallery, gm) = if data.join("query").is_dir() {
                let qd: RealSyntheticDataset = load_reid_folder(&data.join("query"))?;
                let gd: RealSyntheticDataset = load_reid_folder(&data.join("gallery"))?;
                (qd.images, qd.items, gd.images, gd.items)
            } else {
                let ds: RealSyntheticDataset = load_reid_folder(&data)?;
                let (q, g) = ds.query_gallery_split();
                (
                    subset(&ds.images, &q),
                    subset(&ds.items, &q),
                    subset(&ds.images, &g),
                    subset(&ds.items, &g),
                )
            };
            let defense = defense_transform(&cfg)?;
            let report = evaluate(
                &victims, &queries, &qm, &gallery, &gm, gen, cfg.stage2.epsilon,
                cfg.stage2.metric, defense.as_deref(),
            )?;
            report.write_json(&out)?;
            report.write_csv(&out.with_extension("csv"))?;
            println!(
                "clean aAP {:.2}, adversarial aAP {:.2}, mDR {:.2}%",
                report.clean_aap, report.adversarial_aap, report.mean_drop_rate
            );
        }
        Command::Interpret { data, model, out, top, config } => {
            let _cfg = config.resolve()?;
            let ds: RealSyntheticDataset = load_reid_folder(&data)?;
            let m = load_model(&model)?;
            let vocab = build_vocab()?;
            let attr_vocab = attribute_vocabulary();
            let mut rows = Vec::new();
            for (img, name) in ds.images.iter().zip(&ds.filenames) {
                let feat = m.visual.encode_image(img)?;
                let tokens = m.nets.invert(&feat)?;
                let id = name.trim_end_matches(".png");
                rows.extend(interpret_tokens(id, &tokens, &attr_vocab, &m.text, &vocab, top)?);
            }
            export_wordcloud_data(&rows, &out)?;
            println!("wrote {} ranked rows to {}", rows.len(), out.display());
        }
    }
    Ok(())
}
