//! Downstream probes over frozen features: linear classification,
//! nearest-neighbor retrieval, and activation-maximizing input synthesis.

use crate::error::{Error, Result};
use crate::featpipe::FeatureMatrix;
use crate::model::{
    backward_from_layer, forward, softmax_nll_loss, Mode, NetState,
};
use crate::rng::SeededRng;
use crate::tensor::{matmul, Tensor};

/// Trains a linear classifier with softmax NLL on frozen features by
/// mini-batch SGD and returns held-out accuracy. The features and any
/// network that produced them are never updated.
///
/// `split` is (train fraction, shuffle seed). Weights start at zero, so
/// the outcome is deterministic given the split.
pub fn linear_probe(
    features: &FeatureMatrix,
    labels: &[usize],
    split: (f64, u64),
    lr: f32,
    epochs: usize,
) -> Result<f64> {
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} feature rows vs {} labels",
            labels.len()
        )));
    }
    let (train_frac, seed) = split;
    if !(0.0 < train_frac && train_frac < 1.0) {
        return Err(Error::InvalidArg(format!(
            "train fraction {train_frac} out of (0,1)"
        )));
    }
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let d = features.dim();

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SeededRng::stream(seed, &[0x5b11]);
    rng.shuffle(&mut order);
    let n_train = ((n as f64 * train_frac).round() as usize).clamp(1, n - 1);
    let (train_idx, test_idx) = order.split_at(n_train);
    let mut seen = vec![false; classes];
    for &i in train_idx {
        seen[labels[i]] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::InvalidArg(
            "train split has fewer than 2 classes".into(),
        ));
    }

    let mut w = Tensor::zeros(&[d, classes]);
    let mut b = vec![0.0f32; classes];
    let batch = 128usize.min(n_train).max(1);
    let mut epoch_order = train_idx.to_vec();
    for epoch in 0..epochs {
        let mut erng = SeededRng::stream(seed, &[0x5b12, epoch as u64]);
        erng.shuffle(&mut epoch_order);
        for chunk in epoch_order.chunks(batch) {
            let bs = chunk.len();
            let mut xbuf = Vec::with_capacity(bs * d);
            let mut ybuf = Vec::with_capacity(bs);
            for &i in chunk {
                xbuf.extend_from_slice(features.row(i));
                ybuf.push(labels[i]);
            }
            let x = Tensor::from_vec(&[bs, d], xbuf)?;
            let mut logits = matmul(&x, &w)?;
            for row in logits.data_mut().chunks_exact_mut(classes) {
                for (v, &bv) in row.iter_mut().zip(&b) {
                    *v += bv;
                }
            }
            let (_, dlogits) = softmax_nll_loss(&logits, &ybuf, &vec![1.0; bs])?;
            // dW = x^T dlogits; db = column sums. Plain SGD.
            for (xi, drow) in x
                .data()
                .chunks_exact(d)
                .zip(dlogits.data().chunks_exact(classes))
            {
                for (j, &xv) in xi.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &mut w.data_mut()[j * classes..(j + 1) * classes];
                    for (wv, &g) in wrow.iter_mut().zip(drow) {
                        *wv -= lr * xv * g;
                    }
                }
                for (bv, &g) in b.iter_mut().zip(drow) {
                    *bv -= lr * g;
                }
            }
        }
    }

    let mut correct = 0usize;
    for &i in test_idx {
        let row = features.row(i);
        let mut best = 0usize;
        let mut best_v = f32::NEG_INFINITY;
        for cls in 0..classes {
            let mut v = b[cls];
            for (j, &xv) in row.iter().enumerate() {
                v += xv * w.data()[j * classes + cls];
            }
            if v > best_v {
                best_v = v;
                best = cls;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_idx.len() as f64)
}

/// The `topk` nearest rows to `query_id` by Euclidean distance, query
/// excluded, distance ties broken toward the lower id.
pub fn knn_retrieval(features: &FeatureMatrix, query_id: usize, topk: usize) -> Result<Vec<usize>> {
    let n = features.rows();
    if query_id >= n {
        return Err(Error::InvalidArg(format!(
            "unknown query id {query_id} (have {n} rows)"
        )));
    }
    if topk >= n {
        return Err(Error::InvalidArg(format!("topk {topk} must be < n ({n})")));
    }
    let q = features.row(query_id);
    let mut dists: Vec<(f64, usize)> = (0..n)
        .filter(|&i| i != query_id)
        .map(|i| {
            let mut acc = 0.0f64;
            for (&a, &b) in q.iter().zip(features.row(i)) {
                let diff = a as f64 - b as f64;
                acc += diff * diff;
            }
            (acc, i)
        })
        .collect();
    dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(dists.into_iter().take(topk).map(|(_, i)| i).collect())
}

/// Synthesizes an input that maximizes the mean activation of one channel
/// (or one unit, for flat layers) at `layer`, by gradient ascent from a
/// small-noise start. The input re-clips to [-3, 3] after every step and
/// the step size halves whenever a step would decrease the objective, so
/// the objective sequence is non-decreasing. Returns the [C,H,W] image.
pub fn synthesize_max_activation(
    net: &NetState,
    layer: usize,
    filter: usize,
    steps: usize,
    step_size: f32,
    seed: u64,
) -> Result<Tensor> {
    if layer >= net.config.layers.len() {
        return Err(Error::InvalidArg(format!(
            "layer {layer} out of range ({} layers)",
            net.config.layers.len()
        )));
    }
    let shapes = net.config.layer_shapes()?;
    let out_shape = &shapes[layer];
    let (channels, spatial) = match out_shape.as_slice() {
        [c, h, w] => (*c, h * w),
        [d] => (*d, 1),
        other => {
            return Err(Error::InvalidArg(format!(
                "layer {layer} output {other:?} not supported"
            )))
        }
    };
    if filter >= channels {
        return Err(Error::InvalidArg(format!(
            "filter {filter} out of range ({channels} channels at layer {layer})"
        )));
    }

    let mut eval_net = net.clone();
    eval_net.set_mode(Mode::Eval);
    let [c, h, w] = net.config.input_shape;
    let mut x = Tensor::zeros(&[1, c, h, w]);
    {
        let mut rng = SeededRng::stream(seed, &[0x5e17]);
        x.fill_normal(0.1, &mut rng);
    }
    // Mean activation of the target channel at the layer output.
    let objective = |net: &mut NetState, x: &Tensor| -> Result<(f64, crate::model::ForwardCache)> {
        let (cache, _, _) = forward(net, x, &mut SeededRng::new(0))?;
        let act = activation_of(net, x, layer)?;
        let mut sum = 0.0f64;
        for s in 0..spatial {
            sum += act.data()[filter * spatial + s] as f64;
        }
        Ok((sum / spatial as f64, cache))
    };

    let (mut current_obj, mut cache) = objective(&mut eval_net, &x)?;
    let mut eta = step_size;
    for _ in 0..steps {
        // Gradient of the mean target activation with respect to the input.
        let mut dact = Tensor::zeros(&[1, out_shape.iter().product::<usize>()]);
        for s in 0..spatial {
            dact.data_mut()[filter * spatial + s] = 1.0 / spatial as f32;
        }
        let dact = dact.reshape(&prepend_batch(out_shape))?;
        let dx = backward_from_layer(&eval_net, &cache, layer, dact)?;

        let mut accepted = false;
        for _ in 0..20 {
            let mut candidate = x.clone();
            for (cv, &g) in candidate.data_mut().iter_mut().zip(dx.data()) {
                *cv = (*cv + eta * g).clamp(-3.0, 3.0);
            }
            let (cand_obj, cand_cache) = objective(&mut eval_net, &candidate)?;
            if cand_obj >= current_obj {
                x = candidate;
                current_obj = cand_obj;
                cache = cand_cache;
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            break; // step size underflowed; objective cannot improve
        }
    }
    x.reshape(&[c, h, w])
}

fn prepend_batch(shape: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(shape.len() + 1);
    s.push(1);
    s.extend_from_slice(shape);
    s
}

/// Output of layer `layer` for a single input, eval mode.
fn activation_of(net: &mut NetState, x: &Tensor, layer: usize) -> Result<Tensor> {
    let outputs = crate::model::forward_collect(net, x)?;
    Ok(outputs[layer].clone())
}
