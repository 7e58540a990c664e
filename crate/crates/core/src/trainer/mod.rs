//! The alternating training loop: extract features, reduce/whiten/
//! normalize, cluster, reset the head, then train one epoch on the
//! pseudo-labels. Every epoch appends a metrics row and writes a
//! checkpoint.
//!
//! All randomness derives from (seed, purpose, epoch [, image id]), never
//! from a shared consumed stream, so a run resumed from any checkpoint
//! reproduces the uninterrupted run bitwise.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataio::{write_assignments_csv, Dataset};
use crate::error::{Error, Result};
use crate::eval::linear_probe;
use crate::featpipe::{fit_transform_pipeline, FeatureMatrix};
use crate::kmeans::{kmeans_fit_opts, KmeansOpts};
use crate::metrics::{cluster_histogram, nmi};
use crate::model::{
    backward, forward, reset_head, sgd_step, softmax_nll_loss, Mode, NetConfig, NetState,
};
use crate::pic;
use crate::preprocess::{central_crop, horizontal_flip, random_resized_crop, sobel_transform};
use crate::rng::SeededRng;
use crate::sampling::{inverse_size_weights, uniform_cluster_sampler};
use crate::tensor::Tensor;

// Stream labels for deriving per-purpose generators.
const STREAM_INIT: u64 = 0x01;
const STREAM_CLUSTER: u64 = 0x02;
const STREAM_HEAD: u64 = 0x03;
const STREAM_SAMPLER: u64 = 0x04;
const STREAM_DROPOUT: u64 = 0x05;
const STREAM_AUGMENT: u64 = 0x06;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusteringAlgo {
    Kmeans,
    Pic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Draw uniformly over clusters, then uniformly within the cluster.
    Uniform,
    /// One shuffled pass with inverse-cluster-size loss weights.
    Weights,
    /// One shuffled pass, unit weights. Debug only: no defense against
    /// dominant clusters.
    Plain,
}

/// Power iteration clustering parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicParams {
    pub nn: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for PicParams {
    fn default() -> Self {
        Self {
            nn: pic::DEFAULT_NN,
            sigma: pic::DEFAULT_SIGMA,
            alpha: pic::DEFAULT_ALPHA,
            max_iters: pic::DEFAULT_MAX_ITERS,
            tol: pic::DEFAULT_TOL,
        }
    }
}

fn default_true() -> bool {
    true
}
fn default_kmeans_iters() -> usize {
    20
}
fn default_pca_dim() -> usize {
    256
}
fn default_momentum() -> f32 {
    0.9
}
fn default_batch_size() -> usize {
    256
}
fn default_lr() -> f32 {
    0.05
}
fn default_reassign_period() -> usize {
    1
}
fn default_crop_scale() -> (f64, f64) {
    (0.5, 1.0)
}
fn default_crop_ratio() -> (f64, f64) {
    (0.75, 4.0 / 3.0)
}
fn default_flip_p() -> f64 {
    0.5
}

/// Resolved training configuration. The copy written to the run directory
/// is the frozen record of what actually ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Cluster count for k-means (ignored by PIC, which discovers it).
    pub k: usize,
    pub clustering: ClusteringAlgo,
    #[serde(default = "default_kmeans_iters")]
    pub kmeans_iters: usize,
    #[serde(default = "default_pca_dim")]
    pub pca_dim: usize,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default)]
    pub weight_decay: f32,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub sampler: SamplerKind,
    #[serde(default = "default_true")]
    pub sobel: bool,
    #[serde(default = "default_reassign_period")]
    pub reassign_period_epochs: usize,
    pub seed: u64,
    pub net: NetConfig,
    /// Stop when the probe metric has not improved for this many epochs.
    /// Requires labels; off by default.
    #[serde(default)]
    pub stop_patience: Option<usize>,
    #[serde(default = "default_crop_scale")]
    pub crop_scale: (f64, f64),
    #[serde(default = "default_crop_ratio")]
    pub crop_ratio: (f64, f64),
    #[serde(default = "default_flip_p")]
    pub flip_p: f64,
    #[serde(default)]
    pub pic: PicParams,
    /// Debug lever: disable the empty-cluster repair inside k-means.
    #[serde(default = "default_true")]
    pub empty_cluster_repair: bool,
    /// Debug lever: keep the head across reassignments.
    #[serde(default = "default_true")]
    pub reset_head_each_epoch: bool,
}

impl TrainConfig {
    /// Desk-scale defaults for a labeled image dataset: k defaults to 8x
    /// the class count, reflecting that moderate over-segmentation helps.
    pub fn desk_default(input_shape: [usize; 3], k: usize, seed: u64) -> Self {
        Self {
            epochs: 10,
            k,
            clustering: ClusteringAlgo::Kmeans,
            kmeans_iters: default_kmeans_iters(),
            pca_dim: default_pca_dim(),
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: 0.0,
            batch_size: default_batch_size(),
            sampler: SamplerKind::Uniform,
            sobel: true,
            reassign_period_epochs: 1,
            seed,
            net: NetConfig::desk_default(input_shape),
            stop_patience: None,
            crop_scale: default_crop_scale(),
            crop_ratio: default_crop_ratio(),
            flip_p: default_flip_p(),
            pic: PicParams::default(),
            empty_cluster_repair: true,
            reset_head_each_epoch: true,
        }
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean squared distance objective (k-means only).
    pub inertia: Option<f64>,
    /// Discovered cluster count (PIC only).
    pub pic_cluster_count: Option<usize>,
    pub nmi_vs_labels: Option<f64>,
    pub nmi_vs_prev: Option<f64>,
    pub n_empty_repaired: usize,
    pub mean_train_loss: f64,
    pub wall_seconds: f64,
    /// Empty clusters remaining after (or without) repair.
    pub n_empty: usize,
    /// Largest cluster's share of all points.
    pub max_cluster_share: f64,
    /// Realized cluster count (equals the head dimension this epoch).
    pub n_clusters: usize,
}

/// Outcome of a run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub epochs_run: usize,
    pub records: Vec<EpochRecord>,
    pub out_dir: PathBuf,
    pub stopped_early: bool,
}

const METRICS_HEADER: &str = "epoch,inertia,pic_cluster_count,nmi_vs_labels,nmi_vs_prev,n_empty_repaired,mean_train_loss,n_empty,max_cluster_share,n_clusters";

fn fmt_opt_f64(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn metrics_row(r: &EpochRecord) -> String {
    format!(
        "{},{},{},{},{},{},{:.6},{},{:.6},{}",
        r.epoch,
        fmt_opt_f64(r.inertia),
        r.pic_cluster_count
            .map(|c| c.to_string())
            .unwrap_or_default(),
        fmt_opt_f64(r.nmi_vs_labels),
        fmt_opt_f64(r.nmi_vs_prev),
        r.n_empty_repaired,
        r.mean_train_loss,
        r.n_empty,
        r.max_cluster_share,
        r.n_clusters,
    )
}

/// The expected post-preprocessing input shape for a dataset.
pub fn effective_input_shape(data: &Dataset, sobel: bool) -> [usize; 3] {
    let &[c, h, w] = data.image_shape() else {
        unreachable!("dataset images are [C,H,W]")
    };
    if sobel {
        [2, h, w]
    } else {
        [c, h, w]
    }
}

fn validate(cfg: &TrainConfig, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArg("dataset is empty".into()));
    }
    if cfg.clustering == ClusteringAlgo::Kmeans {
        if cfg.k < 2 {
            return Err(Error::InvalidArg("k-means training wants k >= 2".into()));
        }
        if cfg.k > data.len() {
            return Err(Error::InvalidArg(format!(
                "k exceeds n ({} > {})",
                cfg.k,
                data.len()
            )));
        }
    }
    if cfg.net.has_batchnorm() && cfg.batch_size < 2 {
        return Err(Error::InvalidArg(
            "batch size must be >= 2 with batchnorm".into(),
        ));
    }
    if cfg.reassign_period_epochs < 1 {
        return Err(Error::InvalidArg("reassign period must be >= 1".into()));
    }
    let expect = effective_input_shape(data, cfg.sobel);
    if cfg.net.input_shape != expect {
        return Err(Error::ShapeMismatch(format!(
            "network input {:?} does not match preprocessed data {:?}",
            cfg.net.input_shape, expect
        )));
    }
    cfg.net.validate()
}

/// Preprocesses one image for feature extraction: central crop to the
/// network dims, then the Sobel transform when enabled.
fn eval_view(img: &Tensor, cfg: &TrainConfig) -> Result<Tensor> {
    let [_, h, w] = cfg.net.input_shape;
    let cropped = central_crop(img, (h, w))?;
    if cfg.sobel {
        sobel_transform(&cropped)
    } else {
        Ok(cropped)
    }
}

/// Augments one image for training: random resized crop, random flip,
/// then Sobel. The stream is a pure function of (seed, image id, epoch).
fn train_view(img: &Tensor, id: u64, epoch: usize, cfg: &TrainConfig) -> Result<Tensor> {
    let mut rng = SeededRng::stream(cfg.seed, &[STREAM_AUGMENT, id, epoch as u64]);
    let [_, h, w] = cfg.net.input_shape;
    let cropped = random_resized_crop(img, &mut rng, (h, w), cfg.crop_scale, cfg.crop_ratio)?;
    let flipped = horizontal_flip(&cropped, &mut rng, cfg.flip_p)?;
    if cfg.sobel {
        sobel_transform(&flipped)
    } else {
        Ok(flipped)
    }
}

/// Extracts eval-mode features of every central-cropped (and optionally
/// Sobel-transformed) image at the feature layer. Row order is dataset
/// order; runs in batches.
pub fn extract_features(net: &NetState, data: &Dataset, cfg: &TrainConfig) -> Result<FeatureMatrix> {
    let mut eval_net = net.clone();
    eval_net.set_mode(Mode::Eval);
    let d = cfg.net.feature_dim()?;
    let n = data.len();
    let mut out = FeatureMatrix::zeros(n, d);
    let bs = 256usize.min(n);
    let mut rng = SeededRng::new(0); // eval mode draws nothing
    let mut start = 0;
    while start < n {
        let end = (start + bs).min(n);
        let mut batch = Vec::with_capacity((end - start) * cfg.net.input_shape.iter().product::<usize>());
        for i in start..end {
            let view = eval_view(data.image(i), cfg)?;
            batch.extend_from_slice(view.data());
        }
        let [c, h, w] = cfg.net.input_shape;
        let inputs = Tensor::from_vec(&[end - start, c, h, w], batch)?;
        let (_, features, _) = forward(&mut eval_net, &inputs, &mut rng)?;
        for (row, i) in (start..end).enumerate() {
            out.row_mut(i).copy_from_slice(&features.data()[row * d..(row + 1) * d]);
        }
        start = end;
    }
    Ok(out)
}

struct ClusterOutcome {
    assignments: Vec<usize>,
    realized_k: usize,
    inertia: Option<f64>,
    pic_cluster_count: Option<usize>,
    n_empty_repaired: usize,
    n_empty: usize,
}

fn cluster_features(
    cfg: &TrainConfig,
    pipelined: &FeatureMatrix,
    epoch: usize,
) -> Result<ClusterOutcome> {
    match cfg.clustering {
        ClusteringAlgo::Kmeans => {
            let mut rng = SeededRng::stream(cfg.seed, &[STREAM_CLUSTER, epoch as u64]);
            let model = kmeans_fit_opts(
                pipelined,
                cfg.k,
                cfg.kmeans_iters,
                &mut rng,
                KmeansOpts {
                    repair_empty: cfg.empty_cluster_repair,
                },
            )?;
            Ok(ClusterOutcome {
                assignments: model.assignments().to_vec(),
                realized_k: cfg.k,
                inertia: Some(model.inertia()),
                pic_cluster_count: None,
                n_empty_repaired: model.n_reassigned(),
                n_empty: model.n_empty(),
            })
        }
        ClusteringAlgo::Pic => {
            let p = cfg.pic;
            let (assignments, count, _v) =
                pic::pic_cluster(pipelined, p.nn, p.sigma, p.alpha, p.max_iters, p.tol)?;
            Ok(ClusterOutcome {
                assignments,
                realized_k: count,
                inertia: None,
                pic_cluster_count: Some(count),
                n_empty_repaired: 0,
                n_empty: 0,
            })
        }
    }
    .map(|outcome| {
        let _ = epoch;
        outcome
    })
}

/// Builds the epoch's training order and per-example weights.
fn epoch_draws(
    cfg: &TrainConfig,
    assignments: &[usize],
    epoch: usize,
) -> Result<(Vec<usize>, Vec<f32>)> {
    let n = assignments.len();
    let mut rng = SeededRng::stream(cfg.seed, &[STREAM_SAMPLER, epoch as u64]);
    match cfg.sampler {
        SamplerKind::Uniform => {
            let draws = uniform_cluster_sampler(assignments, n, &mut rng)?;
            let weights = vec![1.0f32; n];
            Ok((draws, weights))
        }
        SamplerKind::Weights => {
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            let w = inverse_size_weights(assignments)?;
            let weights = order.iter().map(|&i| w[i]).collect();
            Ok((order, weights))
        }
        SamplerKind::Plain => {
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            Ok((order, vec![1.0f32; n]))
        }
    }
}

/// Runs one epoch of mini-batch SGD on pseudo-labels. Returns the mean
/// batch loss.
fn train_one_epoch(
    net: &mut NetState,
    data: &Dataset,
    cfg: &TrainConfig,
    assignments: &[usize],
    epoch: usize,
) -> Result<f64> {
    let (draws, weights) = epoch_draws(cfg, assignments, epoch)?;
    let [c, h, w] = cfg.net.input_shape;
    let img_len = c * h * w;
    net.set_mode(Mode::Train);
    let mut total_loss = 0.0f64;
    let mut batches = 0usize;
    for (batch_idx, chunk) in draws.chunks(cfg.batch_size).enumerate() {
        if chunk.len() < 2 && cfg.net.has_batchnorm() {
            continue; // trailing sliver cannot carry batch statistics
        }
        let mut buf = Vec::with_capacity(chunk.len() * img_len);
        let mut labels = Vec::with_capacity(chunk.len());
        let mut wts = Vec::with_capacity(chunk.len());
        for (pos, &idx) in chunk.iter().enumerate() {
            let view = train_view(data.image(idx), data.ids()[idx], epoch, cfg)?;
            buf.extend_from_slice(view.data());
            labels.push(assignments[idx]);
            wts.push(weights[batch_idx * cfg.batch_size + pos]);
        }
        let inputs = Tensor::from_vec(&[chunk.len(), c, h, w], buf)?;
        let mut drop_rng =
            SeededRng::stream(cfg.seed, &[STREAM_DROPOUT, epoch as u64, batch_idx as u64]);
        let (cache, _, logits) = forward(net, &inputs, &mut drop_rng)?;
        let (loss, dlogits) = softmax_nll_loss(&logits, &labels, &wts).map_err(|e| match e {
            Error::NonFinite(_) => Error::NumericFailure(format!(
                "divergence at epoch {epoch}, batch {batch_idx}; last checkpoint retained"
            )),
            other => other,
        })?;
        let grads = backward(net, &cache, &dlogits)?;
        sgd_step(net, &grads, cfg.lr, cfg.momentum, cfg.weight_decay).map_err(|e| match e {
            Error::NonFinite(_) => Error::NumericFailure(format!(
                "divergence at epoch {epoch}, batch {batch_idx}; last checkpoint retained"
            )),
            other => other,
        })?;
        total_loss += loss as f64;
        batches += 1;
    }
    if batches == 0 {
        return Err(Error::InvalidArg(
            "no trainable batches (batch size vs dataset size)".into(),
        ));
    }
    Ok(total_loss / batches as f64)
}

/// Runs the full alternating loop, writing into `out_dir`:
/// `config.json`, `metrics.csv`, `timings.csv`,
/// `checkpoints/epoch_%04d/{manifest.json,weights.bin}` and
/// `assignments/epoch_%04d.csv`.
pub fn run_deepcluster(cfg: &TrainConfig, data: &Dataset, out_dir: &Path) -> Result<RunSummary> {
    run_impl(cfg, data, out_dir, false)
}

/// Continues a run from the latest checkpoint in `out_dir` up to
/// `cfg.epochs`. The result is bitwise identical to an uninterrupted run
/// with the same seed.
pub fn resume_deepcluster(cfg: &TrainConfig, data: &Dataset, out_dir: &Path) -> Result<RunSummary> {
    run_impl(cfg, data, out_dir, true)
}

fn checkpoint_dir(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epoch:04}"))
}

fn latest_checkpoint_epoch(out_dir: &Path) -> Option<usize> {
    let dir = out_dir.join("checkpoints");
    let mut best = None;
    for entry in fs::read_dir(dir).ok()?.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(num) = name.strip_prefix("epoch_") {
            if let Ok(e) = num.parse::<usize>() {
                best = Some(best.map_or(e, |b: usize| b.max(e)));
            }
        }
    }
    best
}

fn run_impl(cfg: &TrainConfig, data: &Dataset, out_dir: &Path, resume: bool) -> Result<RunSummary> {
    validate(cfg, data)?;
    fs::create_dir_all(out_dir)?;
    fs::create_dir_all(out_dir.join("checkpoints"))?;
    fs::create_dir_all(out_dir.join("assignments"))?;

    // Freeze the resolved config.
    let config_json = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::InvalidArg(format!("config encode: {e}")))?;
    fs::write(out_dir.join("config.json"), config_json + "\n")?;

    let metrics_path = out_dir.join("metrics.csv");
    let timings_path = out_dir.join("timings.csv");

    let (mut net, start_epoch, mut prev_assignments) = if resume {
        let epoch = latest_checkpoint_epoch(out_dir).ok_or_else(|| {
            Error::Checkpoint(format!("no checkpoints under {}", out_dir.display()))
        })?;
        let ckpt = load_checkpoint(&checkpoint_dir(out_dir, epoch))?;
        let mut frozen = ckpt.config.clone();
        frozen.epochs = cfg.epochs;
        if &frozen != cfg {
            return Err(Error::InvalidArg(
                "resume config differs from the checkpointed run (beyond epochs)".into(),
            ));
        }
        let prev = read_last_assignments(out_dir, epoch);
        (ckpt.net, epoch, prev)
    } else {
        let mut rng = SeededRng::stream(cfg.seed, &[STREAM_INIT]);
        let head_k = if cfg.clustering == ClusteringAlgo::Kmeans {
            cfg.k
        } else {
            2 // placeholder until the first PIC epoch sizes it
        };
        let net = NetState::new(cfg.net.clone(), head_k.max(2), &mut rng)?;
        save_checkpoint(&checkpoint_dir(out_dir, 0), &net, cfg, 0, None)?;
        fs::write(&metrics_path, format!("{METRICS_HEADER}\n"))?;
        fs::write(&timings_path, "epoch,wall_seconds\n")?;
        (net, 0, None)
    };

    let mut records = Vec::new();
    let mut best_probe: Option<(f64, usize)> = None;
    let mut stopped_early = false;

    for epoch in (start_epoch + 1)..=cfg.epochs {
        let t0 = Instant::now();

        // (1) Features of the frozen net on deterministic views.
        let features = extract_features(&net, data, cfg)?;

        // (2)+(3) Reduce/whiten/normalize, then cluster (every
        // reassign_period_epochs; otherwise keep the previous labels).
        let reassign = (epoch - start_epoch - 1) % cfg.reassign_period_epochs == 0
            || prev_assignments.is_none();
        let (outcome, pca) = if reassign {
            let (pipelined, pca, _zero_rows) = fit_transform_pipeline(&features, cfg.pca_dim)?;
            (cluster_features(cfg, &pipelined, epoch)?, Some(pca))
        } else {
            let assignments = prev_assignments.clone().unwrap();
            let realized_k = assignments.iter().copied().max().unwrap_or(0) + 1;
            (
                ClusterOutcome {
                    assignments,
                    realized_k,
                    inertia: None,
                    pic_cluster_count: None,
                    n_empty_repaired: 0,
                    n_empty: 0,
                },
                None,
            )
        };

        if outcome.realized_k < 2 {
            return Err(Error::NumericFailure(format!(
                "clustering collapsed to {} cluster(s) at epoch {epoch}",
                outcome.realized_k
            )));
        }

        let nmi_vs_prev = match (&prev_assignments, reassign) {
            (Some(prev), true) => Some(nmi(&outcome.assignments, prev)?),
            _ => None,
        };
        let nmi_vs_labels = match data.labels() {
            Some(labels) => Some(nmi(&outcome.assignments, labels)?),
            None => None,
        };

        // (4) Fresh head for the new pseudo-labels.
        if reassign && cfg.reset_head_each_epoch || net.head_dim() != outcome.realized_k {
            let mut rng = SeededRng::stream(cfg.seed, &[STREAM_HEAD, epoch as u64]);
            reset_head(&mut net, outcome.realized_k, &mut rng)?;
        }

        // (5) One epoch of pseudo-label SGD.
        let mean_train_loss =
            train_one_epoch(&mut net, data, cfg, &outcome.assignments, epoch)?;

        // (6) Record, export, checkpoint.
        let sizes = cluster_histogram(&outcome.assignments, Some(outcome.realized_k));
        let max_share = sizes.first().copied().unwrap_or(0) as f64 / data.len() as f64;
        let record = EpochRecord {
            epoch,
            inertia: outcome.inertia,
            pic_cluster_count: outcome.pic_cluster_count,
            nmi_vs_labels,
            nmi_vs_prev,
            n_empty_repaired: outcome.n_empty_repaired,
            mean_train_loss,
            wall_seconds: t0.elapsed().as_secs_f64(),
            n_empty: outcome.n_empty,
            max_cluster_share: max_share,
            n_clusters: outcome.realized_k,
        };
        append_line(&metrics_path, &metrics_row(&record))?;
        append_line(
            &timings_path,
            &format!("{},{:.3}", epoch, record.wall_seconds),
        )?;
        write_assignments_csv(
            &out_dir.join("assignments").join(format!("epoch_{epoch:04}.csv")),
            data.ids(),
            &outcome.assignments,
        )?;
        save_checkpoint(&checkpoint_dir(out_dir, epoch), &net, cfg, epoch, pca.as_ref())?;

        // Optional probe-based stopping on frozen features.
        if let (Some(patience), Some(labels)) = (cfg.stop_patience, data.labels()) {
            let acc = linear_probe(&features, labels, (0.8, cfg.seed ^ 0x9e37), 0.1, 100)?;
            let improved = best_probe.map_or(true, |(best, _)| acc > best);
            if improved {
                best_probe = Some((acc, epoch));
                copy_checkpoint(&checkpoint_dir(out_dir, epoch), &out_dir.join("checkpoints/best"))?;
            } else if let Some((_, best_epoch)) = best_probe {
                if epoch - best_epoch >= patience {
                    stopped_early = true;
                }
            }
        }

        prev_assignments = Some(outcome.assignments);
        records.push(record);
        if stopped_early {
            break;
        }
    }

    Ok(RunSummary {
        epochs_run: records.last().map_or(start_epoch, |r| r.epoch),
        records,
        out_dir: out_dir.to_path_buf(),
        stopped_early,
    })
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

fn read_last_assignments(out_dir: &Path, epoch: usize) -> Option<Vec<usize>> {
    let path = out_dir.join("assignments").join(format!("epoch_{epoch:04}.csv"));
    crate::dataio::load_assignments_csv(&path).ok()
}

fn copy_checkpoint(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to)?;
    for name in ["manifest.json", "weights.bin"] {
        fs::copy(from.join(name), to.join(name))?;
    }
    Ok(())
}
