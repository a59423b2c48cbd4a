//! Command line frontend for the superpixel capsule pipeline.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use supix::capsroute::predicted_class;
use supix::entropy;
use supix::explain;
use supix::harness::dataset::{crop_resize, export_dir, ingest_dir, Dataset};
use supix::harness::model::{Model, ModelConfig};
use supix::harness::sweep::{sweep, sweep_csv};
use supix::harness::synth::{synth_dataset, texture_image};
use supix::harness::train::{evaluate, train, StopRule, TrainOptions};
use supix::slic::{region_mean_image, segment, SlicParams};
use supix::tensorio::{read_ppm, write_pgm, write_ppm};

#[derive(Parser)]
#[command(name = "supix", about = "Superpixel capsule networks: segmentation, entropy analysis, training, and per-region explanations", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment an image into superpixels and write the mean-color render
    Segment(SegmentArgs),
    /// Compare superpixel entropy against sliding-window entropy over a range of region counts
    EntropySweep(EntropySweepArgs),
    /// Generate the synthetic shape dataset or mosaic test textures
    Synth(SynthArgs),
    /// Train a model and write the checkpoint plus per-epoch metrics
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Classify a single image
    Infer(InferArgs),
    /// Render per-superpixel contribution heatmaps for one image
    Explain(ExplainArgs),
    /// Train a grid of models over superpixel counts and capsule widths
    Sweep(SweepArgs),
    /// Verify every backward pass against central finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SlicArgs {
    /// Number of superpixels
    #[arg(long, short = 's', default_value_t = 36)]
    superpixels: usize,
    /// Compactness weight m balancing color against position
    #[arg(long, default_value_t = 0.1)]
    compactness: f64,
    /// Gaussian pre-smoothing sigma in pixels (0 disables)
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// k-means iterations
    #[arg(long, default_value_t = 10)]
    iterations: usize,
}

impl SlicArgs {
    fn params(&self) -> SlicParams {
        let mut params = SlicParams::new(self.superpixels);
        params.compactness = self.compactness;
        params.sigma = self.sigma;
        params.iterations = self.iterations;
        params
    }
}

#[derive(Args)]
struct SegmentArgs {
    /// Input PPM image
    #[arg(long, short)]
    input: PathBuf,
    #[command(flatten)]
    slic: SlicArgs,
    /// Output PPM painted with per-region mean colors
    #[arg(long, short)]
    out: PathBuf,
    /// Optional CSV of pixel labels (y,x,label)
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct EntropySweepArgs {
    /// Input PPM image
    #[arg(long, short)]
    input: PathBuf,
    /// Region counts to test
    #[arg(long, short = 's', value_delimiter = ',', default_value = "1,13,24,145,425,894,7185")]
    superpixels: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    compactness: f64,
    /// Output CSV path
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Samples per shape class
    #[arg(long, default_value_t = 10)]
    per_class: usize,
    /// Generator seed
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Write this many 256x256 mosaic textures instead of the shape dataset
    #[arg(long)]
    textures: Option<usize>,
    /// Output directory
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON file with model configuration fields (flags below override it)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Square input size in pixels
    #[arg(long)]
    input_size: Option<usize>,
    /// Backbone stages as convsxchannels, e.g. 1x16,1x32,2x64
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<String>>,
    #[arg(long, short = 's')]
    superpixels: Option<usize>,
    /// Capsule dimension per class
    #[arg(long, short = 'q')]
    class_dim: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    routing_iters: Option<usize>,
    #[arg(long)]
    m_plus: Option<f64>,
    #[arg(long)]
    m_minus: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    compactness: Option<f64>,
    #[arg(long)]
    slic_sigma: Option<f64>,
    #[arg(long)]
    slic_iterations: Option<usize>,
    #[arg(long)]
    caps_init: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn build(&self) -> Result<ModelConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", path.display()))?
            }
            None => ModelConfig::default(),
        };
        if let Some(v) = self.input_size {
            config.input = v;
        }
        if let Some(specs) = &self.stages {
            config.stages = specs
                .iter()
                .map(|spec| {
                    let (convs, channels) = spec
                        .split_once(['x', 'X'])
                        .with_context(|| format!("stage {spec:?} is not convsxchannels"))?;
                    Ok((convs.trim().parse()?, channels.trim().parse()?))
                })
                .collect::<Result<Vec<_>>>()?;
        }
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { config.$field = v; })*
            };
        }
        take!(
            superpixels, class_dim, classes, routing_iters, m_plus, m_minus, lambda,
            learning_rate, batch_size, epochs, val_fraction, compactness, slic_sigma,
            slic_iterations, caps_init, seed
        );
        Ok(config)
    }
}

#[derive(Args)]
struct DataArgs {
    /// Directory with one subdirectory of PPM images per class
    #[arg(long)]
    data: Option<PathBuf>,
    /// Generate the synthetic shape dataset with this many samples per class
    #[arg(long)]
    synth: Option<usize>,
    /// Seed for --synth
    #[arg(long, default_value_t = 7)]
    data_seed: u64,
}

impl DataArgs {
    fn load(&self, input_size: usize) -> Result<Dataset> {
        match (&self.data, self.synth) {
            (Some(dir), None) => {
                let (dataset, skipped) = ingest_dir(dir, input_size)?;
                if skipped > 0 {
                    eprintln!("warning: skipped {skipped} unreadable files");
                }
                Ok(dataset)
            }
            (None, Some(per_class)) => {
                let mut dataset = synth_dataset(per_class, self.data_seed);
                for sample in dataset.samples.iter_mut() {
                    sample.image = crop_resize(&sample.image, input_size);
                }
                Ok(dataset)
            }
            _ => bail!("pass exactly one of --data or --synth"),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Where to save the trained model
    #[arg(long, short)]
    out: PathBuf,
    /// Per-epoch metrics CSV path
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Directory for per-epoch checkpoints
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Stop once validation accuracy reaches this value...
    #[arg(long)]
    stop_acc: Option<f64>,
    /// ...and the train/val accuracy gap is at most this value
    #[arg(long, default_value_t = 1.0)]
    stop_gap: f64,
    /// Print per-epoch progress
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained model checkpoint
    #[arg(long, short)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct InferArgs {
    /// Trained model checkpoint
    #[arg(long, short)]
    model: PathBuf,
    /// Input PPM image
    #[arg(long, short)]
    input: PathBuf,
}

#[derive(Args)]
struct ExplainArgs {
    /// Trained model checkpoint
    #[arg(long, short)]
    model: PathBuf,
    /// Input PPM image
    #[arg(long, short)]
    input: PathBuf,
    /// Class to render (defaults to the predicted class)
    #[arg(long)]
    class: Option<usize>,
    /// Output PGM heatmap
    #[arg(long, short)]
    out: PathBuf,
    /// Optional PPM blend of the heatmap over the input
    #[arg(long)]
    overlay: Option<PathBuf>,
    /// Optional CSV of raw per-superpixel contributions for every class
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Superpixel counts to sweep
    #[arg(long, value_delimiter = ',', default_value = "10,16,25,36,50,100,200")]
    s_list: Vec<usize>,
    /// Capsule widths to sweep
    #[arg(long, value_delimiter = ',', default_value = "16,64")]
    q_list: Vec<usize>,
    /// Output CSV path
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Print per-cell progress
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run_segment(args: SegmentArgs) -> Result<()> {
    let image = read_ppm(&args.input)?;
    let seg = segment(&image, &args.slic.params())?;
    write_ppm(&args.out, &region_mean_image(&image, &seg)?)?;
    if let Some(path) = &args.labels {
        let mut csv = String::from("y,x,label\n");
        for y in 0..seg.height {
            for x in 0..seg.width {
                csv.push_str(&format!("{y},{x},{}\n", seg.labels[y * seg.width + x]));
            }
        }
        write_text(path, &csv)?;
    }
    println!(
        "{} regions over {}x{} pixels -> {}",
        seg.count(),
        image.width,
        image.height,
        args.out.display()
    );
    Ok(())
}

fn run_entropy_sweep(args: EntropySweepArgs) -> Result<()> {
    let image = read_ppm(&args.input)?;
    let mut params = SlicParams::new(1);
    params.compactness = args.compactness;
    let reports = entropy::entropy_sweep(&image, &args.superpixels, &params)?;
    print!("{}", entropy::report_csv(&reports));
    if let Some(path) = &args.out {
        entropy::write_report_csv(path, &reports)?;
    }
    Ok(())
}

fn run_synth(args: SynthArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    if let Some(count) = args.textures {
        for i in 0..count {
            let image = texture_image(args.seed + i as u64);
            write_ppm(args.out.join(format!("texture_{i:03}.ppm")), &image)?;
        }
        println!("wrote {count} textures to {}", args.out.display());
    } else {
        let dataset = synth_dataset(args.per_class, args.seed);
        export_dir(&dataset, &args.out)?;
        println!(
            "wrote {} samples ({} per class) to {}",
            dataset.samples.len(),
            args.per_class,
            args.out.display()
        );
    }
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let config = args.config.build()?;
    let dataset = args.data.load(config.input)?;
    let options = TrainOptions {
        checkpoint_dir: args.checkpoint_dir.clone(),
        stop: args.stop_acc.map(|min_val_accuracy| StopRule {
            min_val_accuracy,
            max_accuracy_gap: args.stop_gap,
        }),
        verbose: args.verbose,
    };
    let (model, metrics) = train::<f32>(&config, &dataset, &options)?;
    let last_epoch = metrics.rows.last().map_or(0, |row| row.epoch);
    model.save(&args.out, last_epoch)?;
    if let Some(path) = &args.metrics {
        write_text(path, &metrics.csv())?;
    }
    match (metrics.last("train"), metrics.last("val")) {
        (Some(tr), Some(va)) => println!(
            "epoch {}: train acc {:.3}, val acc {:.3} ({:.1}s) -> {}",
            last_epoch,
            tr.accuracy,
            va.accuracy,
            metrics.wall_seconds,
            args.out.display()
        ),
        _ => println!("saved untrained model to {}", args.out.display()),
    }
    Ok(())
}

fn print_eval(result: &supix::harness::train::EvalResult, classes: usize) {
    println!("loss {:.6}", result.loss);
    println!("accuracy {:.4}", result.accuracy);
    println!("confusion (rows = true class):");
    for row in result.confusion.chunks(classes) {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:6}")).collect();
        println!("  {}", cells.join(" "));
    }
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let (model, _) = Model::<f32>::load(&args.model)?;
    let dataset = args.data.load(model.config.input)?;
    let result = evaluate(&model, &dataset)?;
    print_eval(&result, model.config.classes);
    Ok(())
}

fn run_infer(args: InferArgs) -> Result<()> {
    let (model, _) = Model::<f32>::load(&args.model)?;
    let image = crop_resize(&read_ppm(&args.input)?, model.config.input);
    let cache = model.cache_for(&image)?;
    let forward = model.forward(&image, &cache)?;
    let class = predicted_class(&forward.probs);
    println!("class {class}");
    for (j, p) in forward.probs.iter().enumerate() {
        println!("  p[{j}] = {p:.4}");
    }
    Ok(())
}

fn run_explain(args: ExplainArgs) -> Result<()> {
    let (model, _) = Model::<f32>::load(&args.model)?;
    let image = crop_resize(&read_ppm(&args.input)?, model.config.input);
    let cache = model.cache_for(&image)?;
    let forward = model.forward(&image, &cache)?;
    let predicted = predicted_class(&forward.probs);
    let class = args.class.unwrap_or(predicted);
    let map = explain::contribution(&forward.state);
    let rendered = explain::render_contribution(&map, class, &cache.seg)?;
    write_pgm(&args.out, &rendered.heatmap)?;
    if rendered.flat {
        eprintln!("warning: contributions for class {class} are flat; heatmap is uniform");
    }
    if let Some(path) = &args.overlay {
        write_ppm(path, &explain::overlay(&rendered.heatmap, &image)?)?;
    }
    if let Some(path) = &args.csv {
        write_text(path, &explain::contribution_csv(&map))?;
    }
    println!(
        "predicted class {predicted}; rendered class {class} over {} regions -> {}",
        cache.seg.count(),
        args.out.display()
    );
    Ok(())
}

fn run_sweep(args: SweepArgs) -> Result<()> {
    let config = args.config.build()?;
    let dataset = args.data.load(config.input)?;
    let options = TrainOptions {
        verbose: args.verbose,
        ..TrainOptions::default()
    };
    let cells = sweep::<f32>(&config, &args.s_list, &args.q_list, &dataset, &options)?;
    let csv = sweep_csv(&cells);
    print!("{csv}");
    if let Some(path) = &args.out {
        write_text(path, &csv)?;
    }
    let failed = cells.iter().filter(|c| c.error.is_some()).count();
    if failed > 0 {
        eprintln!("warning: {failed} of {} cells failed", cells.len());
    }
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<()> {
    let reports = supix::check::run_all(args.seed)?;
    let mut all_pass = true;
    for report in &reports {
        println!("{}", report.line());
        all_pass &= report.passed();
    }
    if !all_pass {
        bail!("gradient checks failed");
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Segment(args) => run_segment(args),
        Command::EntropySweep(args) => run_entropy_sweep(args),
        Command::Synth(args) => run_synth(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Infer(args) => run_infer(args),
        Command::Explain(args) => run_explain(args),
        Command::Sweep(args) => run_sweep(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    }
}
