//! Command-line frontend: train, cluster, probe, score and visualize.
//!
//! Exit codes: 0 success, 2 usage error, 3 input/format error, 4 numeric
//! failure. Diagnostics go to standard error; machine-readable output goes
//! to files or standard output only.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use deepcluster_core::dataio::{
    load_assignments_csv, load_csv_matrix, load_idx, load_pnm_dir, write_assignments_csv,
    write_idx, write_pgm,
};
use deepcluster_core::error::Error as CoreError;
use deepcluster_core::eval::{knn_retrieval, linear_probe, synthesize_max_activation};
use deepcluster_core::featpipe::{fit_transform_pipeline, l2_normalize, pca_whiten_transform};
use deepcluster_core::kmeans::kmeans_fit;
use deepcluster_core::metrics::nmi;
use deepcluster_core::model::{forward_collect, LayerSpec, NetConfig};
use deepcluster_core::pic::pic_cluster;
use deepcluster_core::preprocess::{central_crop, sobel_transform};
use deepcluster_core::rng::SeededRng;
use deepcluster_core::synth;
use deepcluster_core::tensor::Tensor;
use deepcluster_core::trainer::{
    effective_input_shape, extract_features, load_checkpoint, resume_deepcluster,
    run_deepcluster, TrainConfig,
};
use deepcluster_core::Dataset;

#[derive(Parser)]
#[command(
    name = "deepcluster",
    about = "Alternating clustering / pseudo-label training for visual features",
    version
)]
struct Cli {
    /// Cap the worker pool (default: all cores). Results do not depend on
    /// this value.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the alternating training loop on an image dataset.
    Train(TrainArgs),
    /// Reduce, whiten, L2-normalize and cluster raw feature vectors.
    Cluster(ClusterArgs),
    /// Train a linear classifier on frozen features of a checkpoint.
    Probe(ProbeArgs),
    /// Normalized mutual information between two assignment files.
    Nmi(NmiArgs),
    /// Nearest neighbors of a query image in feature space.
    Retrieve(RetrieveArgs),
    /// Synthesize the input that maximizes one filter's activation.
    Visualize(VisualizeArgs),
    /// Print a run's metrics log to standard output.
    ExportMetrics(ExportArgs),
    /// Generate a bundled synthetic dataset as IDX files.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training config (JSON). Omitted fields take the documented
    /// defaults; `net` defaults to the desk architecture sized to the
    /// data.
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory: images.idx [+ labels.idx], MNIST-style names,
    /// or .pgm/.ppm files [+ labels.csv].
    #[arg(long)]
    data: PathBuf,
    /// Run directory (created if absent).
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the latest checkpoint in --out.
    #[arg(long)]
    resume: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Algo {
    Kmeans,
    Pic,
}

#[derive(Args)]
struct ClusterArgs {
    /// Numeric CSV of feature vectors, one row per item.
    #[arg(long)]
    features: PathBuf,
    /// Skip the first line of the CSV.
    #[arg(long)]
    header: bool,
    #[arg(long, value_enum)]
    algo: Algo,
    /// Cluster count (k-means only).
    #[arg(long)]
    k: Option<usize>,
    /// Lloyd iterations (k-means only).
    #[arg(long, default_value_t = 20)]
    iters: usize,
    /// Kernel bandwidth (PIC only).
    #[arg(long, default_value_t = 0.2)]
    sigma: f64,
    /// Damping weight on the graph term (PIC only).
    #[arg(long, default_value_t = 1e-3)]
    alpha: f64,
    /// Neighbors per node (PIC only).
    #[arg(long, default_value_t = 5)]
    nn: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output assignments CSV (id,cluster).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    /// Checkpoint directory (manifest.json + weights.bin).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// conv1, conv2, feature, or a raw layer index.
    #[arg(long)]
    layer: String,
    /// Output CSV (layer,accuracy).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    lr: f32,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct NmiArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    query_id: usize,
    #[arg(long)]
    topk: usize,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Layer index into the network body.
    #[arg(long)]
    layer: usize,
    /// Channel (or unit) to maximize.
    #[arg(long)]
    filter: usize,
    /// Output PGM; multi-channel inputs write one file per channel.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    steps: usize,
    #[arg(long, default_value_t = 0.5)]
    step_size: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ExportFormat {
    Csv,
    Json,
}

#[derive(Args)]
struct ExportArgs {
    /// Run directory containing metrics.csv.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum, default_value_t = ExportFormat::Csv)]
    format: ExportFormat,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SynthKind {
    /// Ten-class digits-style images, 28x28.
    Digits,
    /// Two-class blob images, 28x28.
    Blobs2,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKind,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::NumericFailure(_)) | Some(CoreError::NonFinite(_)) => 4,
        Some(_) => 3,
        None => 3,
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train(args) => cmd_train(args),
        Command::Cluster(args) => cmd_cluster(args),
        Command::Probe(args) => cmd_probe(args),
        Command::Nmi(args) => cmd_nmi(args),
        Command::Retrieve(args) => cmd_retrieve(args),
        Command::Visualize(args) => cmd_visualize(args),
        Command::ExportMetrics(args) => cmd_export(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

/// Loads a dataset directory: IDX pair, MNIST-style names, or PNM files.
fn load_dataset(dir: &Path) -> anyhow::Result<Dataset> {
    let idx = dir.join("images.idx");
    if idx.exists() {
        let labels = dir.join("labels.idx");
        let labels = labels.exists().then_some(labels);
        return Ok(load_idx(&idx, labels.as_deref())?);
    }
    let mnist = dir.join("train-images-idx3-ubyte");
    if mnist.exists() {
        let labels = dir.join("train-labels-idx1-ubyte");
        let labels = labels.exists().then_some(labels);
        return Ok(load_idx(&mnist, labels.as_deref())?);
    }
    Ok(load_pnm_dir(dir)?)
}

/// Fills defaults into a partial training config: seed 0, k-means with
/// uniform sampling, k = 8x the class count when labels exist, and the
/// desk network sized to the preprocessed data.
fn resolve_train_config(
    raw: &str,
    data: &Dataset,
    seed_override: Option<u64>,
) -> anyhow::Result<TrainConfig> {
    let mut value: Value = serde_json::from_str(raw)
        .map_err(|e| CoreError::Format(format!("config parse: {e}")))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| CoreError::Format("config must be a JSON object".into()))?;
    obj.entry("clustering").or_insert(Value::from("kmeans"));
    obj.entry("sampler").or_insert(Value::from("uniform"));
    obj.entry("seed").or_insert(Value::from(0u64));
    obj.entry("sobel").or_insert(Value::from(true));
    if !obj.contains_key("k") {
        let classes = data
            .labels()
            .map(|l| l.iter().copied().max().unwrap_or(0) + 1)
            .ok_or_else(|| {
                CoreError::InvalidArg("config omits k and the data has no labels".into())
            })?;
        obj.insert("k".into(), Value::from(8 * classes));
    }
    if !obj.contains_key("net") {
        let sobel = obj["sobel"].as_bool().unwrap_or(true);
        let net = NetConfig::desk_default(effective_input_shape(data, sobel));
        obj.insert("net".into(), serde_json::to_value(net)?);
    }
    let mut cfg: TrainConfig = serde_json::from_value(value)
        .map_err(|e| CoreError::Format(format!("config fields: {e}")))?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let data = load_dataset(&args.data)?;
    let raw = fs::read_to_string(&args.config)
        .map_err(|e| CoreError::Format(format!("{}: {e}", args.config.display())))?;
    let cfg = resolve_train_config(&raw, &data, args.seed)?;
    let summary = if args.resume {
        resume_deepcluster(&cfg, &data, &args.out)?
    } else {
        run_deepcluster(&cfg, &data, &args.out)?
    };
    for r in &summary.records {
        eprintln!(
            "epoch {:>4}  loss {:.4}  clusters {}{}{}",
            r.epoch,
            r.mean_train_loss,
            r.n_clusters,
            r.nmi_vs_labels
                .map(|v| format!("  nmi(labels) {v:.4}"))
                .unwrap_or_default(),
            r.nmi_vs_prev
                .map(|v| format!("  nmi(prev) {v:.4}"))
                .unwrap_or_default(),
        );
    }
    eprintln!(
        "run complete: {} epochs into {}",
        summary.epochs_run,
        summary.out_dir.display()
    );
    Ok(())
}

fn cmd_cluster(args: ClusterArgs) -> anyhow::Result<()> {
    let x = load_csv_matrix(&args.features, args.header)?;
    let (pipelined, _, _) = fit_transform_pipeline(&x, 256)?;
    let assignments = match args.algo {
        Algo::Kmeans => {
            let k = args
                .k
                .ok_or_else(|| CoreError::InvalidArg("k-means needs --k".into()))?;
            if k > pipelined.rows() {
                return Err(CoreError::InvalidArg(format!(
                    "k exceeds n ({k} > {})",
                    pipelined.rows()
                ))
                .into());
            }
            let mut rng = SeededRng::new(args.seed);
            let model = kmeans_fit(&pipelined, k, args.iters, &mut rng)?;
            eprintln!(
                "k-means: inertia {:.6}, {} empty-cluster repairs",
                model.inertia(),
                model.n_reassigned()
            );
            model.assignments().to_vec()
        }
        Algo::Pic => {
            let (assignments, count, _) = pic_cluster(
                &pipelined,
                args.nn,
                args.sigma,
                args.alpha,
                deepcluster_core::pic::DEFAULT_MAX_ITERS,
                deepcluster_core::pic::DEFAULT_TOL,
            )?;
            eprintln!("pic: {count} clusters");
            assignments
        }
    };
    let ids: Vec<u64> = (0..assignments.len() as u64).collect();
    write_assignments_csv(&args.out, &ids, &assignments)?;
    Ok(())
}

/// Resolves a probe layer name to a body layer index: `conv<i>` means the
/// output of the i-th pooling stage (or relu when there is no pool),
/// `feature` means the configured feature layer.
fn resolve_probe_layer(net: &NetConfig, name: &str) -> anyhow::Result<usize> {
    if let Ok(idx) = name.parse::<usize>() {
        if idx >= net.layers.len() {
            return Err(CoreError::InvalidArg(format!(
                "layer index {idx} out of range ({} layers)",
                net.layers.len()
            ))
            .into());
        }
        return Ok(idx);
    }
    if name == "feature" {
        return Ok(net.feature_layer);
    }
    if let Some(stage) = name.strip_prefix("conv") {
        let stage: usize = stage
            .parse()
            .map_err(|_| CoreError::InvalidArg(format!("bad layer name {name:?}")))?;
        let pools: Vec<usize> = net
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::MaxPool { .. }))
            .map(|(i, _)| i)
            .collect();
        if stage >= 1 && stage <= pools.len() {
            return Ok(pools[stage - 1]);
        }
        return Err(CoreError::InvalidArg(format!(
            "no pooling stage {stage} (have {})",
            pools.len()
        ))
        .into());
    }
    Err(CoreError::InvalidArg(format!("bad layer name {name:?}")).into())
}

/// Eval-mode outputs of one layer for every image, flattened row-wise.
fn layer_features(
    net: &deepcluster_core::NetState,
    cfg: &TrainConfig,
    data: &Dataset,
    layer: usize,
) -> anyhow::Result<deepcluster_core::FeatureMatrix> {
    let [c, h, w] = cfg.net.input_shape;
    let n = data.len();
    let shapes = cfg.net.layer_shapes()?;
    let d: usize = shapes[layer].iter().product();
    let mut out = deepcluster_core::FeatureMatrix::zeros(n, d);
    let bs = 128usize.min(n);
    let mut start = 0;
    while start < n {
        let end = (start + bs).min(n);
        let mut buf = Vec::with_capacity((end - start) * c * h * w);
        for i in start..end {
            let cropped = central_crop(data.image(i), (h, w))?;
            let view = if cfg.sobel {
                sobel_transform(&cropped)?
            } else {
                cropped
            };
            buf.extend_from_slice(view.data());
        }
        let inputs = Tensor::from_vec(&[end - start, c, h, w], buf)?;
        let outputs = forward_collect(net, &inputs)?;
        let act = &outputs[layer];
        let rows = end - start;
        let per = act.len() / rows;
        for (row, i) in (start..end).enumerate() {
            out.row_mut(i)
                .copy_from_slice(&act.data()[row * per..(row + 1) * per]);
        }
        start = end;
    }
    Ok(out)
}

fn cmd_probe(args: ProbeArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let data = load_dataset(&args.data)?;
    let labels = data
        .labels()
        .ok_or_else(|| CoreError::InvalidArg("probe needs labeled data".into()))?
        .to_vec();
    let layer = resolve_probe_layer(&ckpt.config.net, &args.layer)?;
    let features = layer_features(&ckpt.net, &ckpt.config, &data, layer)?;
    let acc = linear_probe(
        &features,
        &labels,
        (args.train_frac, args.seed),
        args.lr,
        args.epochs,
    )?;
    fs::write(
        &args.out,
        format!("layer,accuracy\n{},{:.6}\n", args.layer, acc),
    )?;
    println!("{acc:.6}");
    Ok(())
}

fn cmd_nmi(args: NmiArgs) -> anyhow::Result<()> {
    let a = load_assignments_csv(&args.a)?;
    let b = load_assignments_csv(&args.b)?;
    let value = nmi(&a, &b)?;
    println!("{value:.6}");
    Ok(())
}

fn cmd_retrieve(args: RetrieveArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let data = load_dataset(&args.data)?;
    let features = extract_features(&ckpt.net, &data, &ckpt.config)?;
    // Match the clustering geometry when the checkpoint carries the
    // epoch's feature pipeline.
    let features = match &ckpt.pca {
        Some(pca) => {
            let mut y = pca_whiten_transform(pca, &features)?;
            l2_normalize(&mut y);
            y
        }
        None => features,
    };
    let ids = knn_retrieval(&features, args.query_id, args.topk)?;
    for id in ids {
        println!("{id}");
    }
    Ok(())
}

fn cmd_visualize(args: VisualizeArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let img = synthesize_max_activation(
        &ckpt.net,
        args.layer,
        args.filter,
        args.steps,
        args.step_size,
        args.seed,
    )?;
    let &[c, h, w] = img.shape() else {
        return Err(CoreError::ShapeMismatch("synthesized image shape".into()).into());
    };
    let lo = img.data().iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = img.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut written = Vec::new();
    for ch in 0..c {
        let path = if c == 1 {
            args.out.clone()
        } else {
            channel_path(&args.out, ch)
        };
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        write_pgm(&path, plane, h, w, lo, hi)?;
        written.push(path);
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn channel_path(base: &Path, channel: usize) -> PathBuf {
    let stem = base.file_stem().unwrap_or_default().to_string_lossy();
    let ext = base.extension().map(|e| e.to_string_lossy().into_owned());
    let name = match ext {
        Some(ext) => format!("{stem}_c{channel}.{ext}"),
        None => format!("{stem}_c{channel}"),
    };
    base.with_file_name(name)
}

fn cmd_export(args: ExportArgs) -> anyhow::Result<()> {
    let path = args.run.join("metrics.csv");
    let text = fs::read_to_string(&path)
        .map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))?;
    match args.format {
        ExportFormat::Csv => print!("{text}"),
        ExportFormat::Json => {
            let mut lines = text.lines();
            let header: Vec<&str> = lines
                .next()
                .ok_or_else(|| CoreError::Format("empty metrics.csv".into()))?
                .split(',')
                .collect();
            let mut rows = Vec::new();
            for line in lines {
                let mut obj = serde_json::Map::new();
                for (key, cell) in header.iter().zip(line.split(',')) {
                    let v = if cell.is_empty() {
                        Value::Null
                    } else if let Ok(i) = cell.parse::<i64>() {
                        Value::from(i)
                    } else if let Ok(f) = cell.parse::<f64>() {
                        Value::from(f)
                    } else {
                        Value::from(cell)
                    };
                    obj.insert((*key).to_string(), v);
                }
                rows.push(Value::Object(obj));
            }
            println!("{}", serde_json::to_string_pretty(&rows)?);
        }
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let data = match args.kind {
        SynthKind::Digits => synth::digits(args.n, args.seed)?,
        SynthKind::Blobs2 => synth::two_blob_images(args.n, args.seed)?,
    };
    write_idx(&data, &args.out)?;
    eprintln!(
        "wrote {} images to {}",
        data.len(),
        args.out.join("images.idx").display()
    );
    Ok(())
}
