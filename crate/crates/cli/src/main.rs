use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use sere_core::checkpoint::Checkpoint;
use sere_core::dsp::{self, FeatureConfig, StaticFeatures};
use sere_core::idfe::{self, EmbeddingSequence, EnhancedRepresentation};
use sere_core::irf::{self, IrfParams};
use sere_core::manifest::Manifest;
use sere_core::toy::{ToyConfig, ToyCorpus};
use sere_core::trainer::{self, TrainConfig};
use sere_core::{pca, report, tensor_file, Result, SereError};

#[derive(Parser)]
#[command(name = "sere", version, about = "Cross-lingual speech emotion recognition from frozen embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Static prosodic and spectral features (F0, energy, MFCC c2, centroid) per WAV file.
    Extract {
        wavs: Vec<PathBuf>,
        /// Directory for `<stem>.feat`; defaults to each input's directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// JSON feature settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Wrap a raw little-endian f32 dump as a tensor file.
    Import {
        raw: PathBuf,
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resonance of two utterances; prints the IRF score.
    Resonate(ResonateArgs),
    /// Semi-supervised training from a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Score a checkpoint on the eval_target rows of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Stratified folds of the eval set; 1 scores it whole.
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per fold of the eval set and score the held-out fold.
    Cv {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Two-component PCA of pooled representations as `id,label,pc1,pc2`.
    ExportPlot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic two-language corpus and its manifest.
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct ResonateArgs {
    a: PathBuf,
    b: PathBuf,
    /// Static features for A; with it, A holds embeddings rather than enhanced frames.
    #[arg(long)]
    features_a: Option<PathBuf>,
    #[arg(long)]
    features_b: Option<PathBuf>,
    /// Gate weights and resonance parameters from a trained model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// CSV of the resonance matrix (`i,j,r`).
    #[arg(long)]
    matrix_out: Option<PathBuf>,
    /// CSV of the row alignment (`i,j_star,r`).
    #[arg(long)]
    alignment_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainOpts {
    /// JSON run config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    projection: bool,
    #[arg(long)]
    disable_proto: bool,
    #[arg(long)]
    disable_dual: bool,
}

impl TrainOpts {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| SereError::Io { path: path.clone(), source: e })?;
                TrainConfig::from_json(&text).map_err(|e| match e {
                    SereError::Parse { line, message, .. } => SereError::Parse { path: path.clone(), line, message },
                    other => other,
                })?
            }
            None => TrainConfig::default(),
        };
        if let Ok(seed) = std::env::var("SERE_SEED") {
            cfg.seed = seed
                .trim()
                .parse()
                .map_err(|_| SereError::Config(format!("SERE_SEED must be an unsigned integer, got {seed:?}")))?;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.lambda1 {
            cfg.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            cfg.lambda2 = v;
        }
        if self.batch_size.is_some() {
            cfg.batch_size = self.batch_size;
        }
        cfg.projection |= self.projection;
        cfg.disable_proto |= self.disable_proto;
        cfg.disable_dual |= self.disable_dual;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SereError + '_ {
    move |e| SereError::Io { path: path.to_path_buf(), source: e }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    tensor_file::write_atomic(path, text.as_bytes())
}

fn csv_line(fields: &[String]) -> String {
    let mut line = fields.join(",");
    line.push('\n');
    line
}

fn extract(wavs: &[PathBuf], out_dir: Option<&Path>, config: Option<&Path>) -> Result<()> {
    if wavs.is_empty() {
        return Err(SereError::Precondition("no input files".into()));
    }
    let cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str::<FeatureConfig>(&text).map_err(|e| SereError::Parse {
                path: p.to_path_buf(),
                line: e.line(),
                message: e.to_string(),
            })?
        }
        None => FeatureConfig::default(),
    };
    let mut failures = 0;
    for wav in wavs {
        let run = || -> Result<PathBuf> {
            let bytes = std::fs::read(wav).map_err(io_err(wav))?;
            let audio = dsp::decode_wav(&bytes)?;
            let features = dsp::extract_static(&audio, &cfg)?;
            let name = wav.file_stem().map(PathBuf::from).unwrap_or_else(|| "out".into());
            let dest = match out_dir {
                Some(d) => d.join(name).with_extension("feat"),
                None => wav.with_extension("feat"),
            };
            tensor_file::write(&dest, features.values())?;
            Ok(dest)
        };
        match run() {
            Ok(dest) => println!("{}", dest.display()),
            Err(e) => {
                failures += 1;
                eprintln!("{}: {e}", wav.display());
            }
        }
    }
    if failures > 0 {
        return Err(SereError::Validation(format!("{failures} of {} files failed", wavs.len())));
    }
    Ok(())
}

fn load_enhanced(path: &Path, features: Option<&Path>, model: Option<&Checkpoint>) -> Result<EnhancedRepresentation> {
    let values = tensor_file::read(path)?;
    match features {
        None => {
            if values.ncols() <= 4 {
                return Err(SereError::Shape(format!(
                    "{} has {} columns; enhanced frames need embeddings plus 4 dynamic columns",
                    path.display(),
                    values.ncols()
                )));
            }
            Ok(EnhancedRepresentation { u: values, burst: None })
        }
        Some(f) => {
            let feats = StaticFeatures::new(tensor_file::read(f)?)?;
            let h = EmbeddingSequence::new(path.display().to_string(), values)?;
            let (gate, eps) = match model {
                Some(ck) => (ck.model.idfe.clone(), ck.epsilon),
                None => (idfe::IdfeParams::zeros(h.dim()), idfe::DEFAULT_EPSILON),
            };
            if gate.w.len() != h.dim() {
                return Err(SereError::Shape(format!(
                    "{} has dimension {}, the checkpoint gate expects {}",
                    path.display(),
                    h.dim(),
                    gate.w.len()
                )));
            }
            Ok(idfe::run_idfe(&feats, &h, &gate, eps)?.1)
        }
    }
}

fn resonate(args: &ResonateArgs) -> Result<()> {
    let ck = args.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let mut params = ck.as_ref().map_or(IrfParams::default(), |c| c.model.irf);
    params.alpha = args.alpha.unwrap_or(params.alpha);
    params.beta = args.beta.unwrap_or(params.beta);
    params.gamma = args.gamma.unwrap_or(params.gamma);
    params.delta = args.delta.unwrap_or(params.delta);
    params.validate()?;
    let mut a = load_enhanced(&args.a, args.features_a.as_deref(), ck.as_ref())?;
    let mut b = load_enhanced(&args.b, args.features_b.as_deref(), ck.as_ref())?;
    let res = irf::resonate(&mut a, &mut b, &params)?;
    if let Some(path) = &args.matrix_out {
        let mut text = String::from("i,j,r\n");
        for ((i, j), r) in res.matrix.indexed_iter() {
            text.push_str(&csv_line(&[i.to_string(), j.to_string(), r.to_string()]));
        }
        write_text(path, &text)?;
    }
    if let Some(path) = &args.alignment_out {
        let mut text = String::from("i,j_star,r\n");
        for (i, &j) in res.alignment.iter().enumerate() {
            text.push_str(&csv_line(&[i.to_string(), j.to_string(), res.matrix[[i, j]].to_string()]));
        }
        write_text(path, &text)?;
    }
    println!("{:.6}", res.irf);
    Ok(())
}

fn train(manifest: &Path, out: &Path, opts: &TrainOpts) -> Result<()> {
    let cfg = opts.resolve()?;
    let manifest = Manifest::load(manifest)?;
    let data = manifest.load_dataset(cfg.epsilon)?;
    let outcome = trainer::train(&cfg, &data)?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    Checkpoint {
        model: outcome.model.clone(),
        classes: data.classes.clone(),
        references: outcome.references.clone(),
        epsilon: cfg.epsilon,
    }
    .save(out)?;
    let target_ids: Vec<String> = data.unlabeled_target.iter().map(|u| u.id.clone()).collect();
    write_text(&out.join("losses.csv"), &report::losses_csv(&outcome.epochs)?)?;
    write_text(
        &out.join("pseudo_labels.csv"),
        &report::pseudo_labels_csv(&outcome, &target_ids, &data.classes)?,
    )?;
    write_text(&out.join("irf_hist.csv"), &report::irf_histogram_csv(&outcome.epochs)?)?;
    let first = outcome.epochs[0].loss.total;
    println!(
        "epochs {} steps {} loss {first} -> {}",
        outcome.epochs.len(),
        outcome.steps,
        outcome.final_loss.total
    );
    Ok(())
}

fn print_reports(reports: &[trainer::EvalReport]) {
    for r in reports {
        println!("fold {} uar {:.6}", r.fold, r.uar);
    }
    println!("mean uar {:.6}", trainer::mean_uar(reports));
}

fn eval(checkpoint: &Path, manifest: &Path, folds: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let manifest = Manifest::load(manifest)?;
    if !manifest.classes.is_empty() {
        ck.check_classes(&manifest.classes)?;
    }
    let data = manifest.load_dataset_with_classes(&ck.classes, ck.epsilon)?;
    if data.eval_target.is_empty() {
        return Err(SereError::Precondition("manifest has no eval_target rows".into()));
    }
    if folds == 0 {
        return Err(SereError::Config("folds must be at least 1".into()));
    }
    let reports = trainer::evaluate_folds(&ck.model, &data.eval_target, &ck.references(), folds, seed)?;
    let out = out.map_or_else(|| checkpoint.join("eval.csv"), Path::to_path_buf);
    write_text(&out, &report::eval_csv(&reports, &ck.classes)?)?;
    print_reports(&reports);
    Ok(())
}

fn cross_validate(manifest: &Path, folds: usize, out: &Path, opts: &TrainOpts) -> Result<()> {
    let cfg = opts.resolve()?;
    let manifest = Manifest::load(manifest)?;
    let data = manifest.load_dataset(cfg.epsilon)?;
    let reports = trainer::cross_validate(&cfg, &data, folds)?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    write_text(&out.join("eval.csv"), &report::eval_csv(&reports, &data.classes)?)?;
    print_reports(&reports);
    Ok(())
}

fn export_plot(checkpoint: &Path, manifest: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let manifest = Manifest::load(manifest)?;
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut pooled = Vec::new();
    for e in &manifest.entries {
        let utt = sere_core::manifest::load_utterance(e, ck.epsilon)?;
        pooled.push(ck.model.encode(&utt)?.pooled());
        ids.push(e.id.clone());
        labels.push(e.label.clone().unwrap_or_default());
    }
    let dim = pooled.first().map_or(0, |p| p.len());
    let x = Array2::from_shape_fn((pooled.len(), dim), |(i, k)| pooled[i][k]);
    let scores = pca::project2(&x)?;
    let mut text = String::from("id,label,pc1,pc2\n");
    for (i, id) in ids.iter().enumerate() {
        text.push_str(&csv_line(&[
            id.clone(),
            labels[i].clone(),
            scores[[i, 0]].to_string(),
            scores[[i, 1]].to_string(),
        ]));
    }
    write_text(out, &text)
}

fn toy(out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = ToyConfig::default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let path = ToyCorpus::generate(&cfg).write(out)?;
    println!("{}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Extract { wavs, out_dir, config } => extract(&wavs, out_dir.as_deref(), config.as_deref()),
        Command::Import { raw, rows, cols, out } => {
            let bytes = std::fs::read(&raw).map_err(io_err(&raw))?;
            let m = tensor_file::import_raw(&bytes, rows, cols)?;
            tensor_file::write(&out, &m)
        }
        Command::Resonate(args) => resonate(&args),
        Command::Train { manifest, out, opts } => train(&manifest, &out, &opts),
        Command::Eval { checkpoint, manifest, folds, seed, out } => {
            eval(&checkpoint, &manifest, folds, seed, out.as_deref())
        }
        Command::Cv { manifest, folds, out, opts } => cross_validate(&manifest, folds, &out, &opts),
        Command::ExportPlot { checkpoint, manifest, out } => export_plot(&checkpoint, &manifest, &out),
        Command::Toy { out, seed } => toy(&out, seed),
    }
}

fn exit_code(e: &SereError) -> u8 {
    match e {
        SereError::Divergence { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
