//! Dataset and matrix ingestion: IDX image/label files, binary PGM/PPM,
//! and numeric CSV. Plus the CSV writers used for assignments and metrics.
//!
//! All pixel data is scaled by 1/255 into [0,1] on load. Labels are never
//! consumed by the training path; they exist for evaluation only.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::featpipe::FeatureMatrix;
use crate::tensor::Tensor;

pub const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
pub const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

/// A set of images with optional ground-truth labels.
///
/// Labels are evaluation-only: the trainer produces bitwise-identical
/// parameters whether or not they are present.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<Tensor>,
    labels: Option<Vec<usize>>,
    ids: Vec<u64>,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Option<Vec<usize>>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidArg("dataset has no images".into()));
        }
        let shape = images[0].shape().to_vec();
        if images.iter().any(|im| im.shape() != shape.as_slice()) {
            return Err(Error::ShapeMismatch(
                "all dataset images must share one shape".into(),
            ));
        }
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.len()
                )));
            }
        }
        let ids = (0..images.len() as u64).collect();
        Ok(Self {
            images,
            labels,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Shape [C,H,W] shared by every image.
    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    /// Copy with labels removed.
    pub fn without_labels(&self) -> Self {
        Self {
            images: self.images.clone(),
            labels: None,
            ids: self.ids.clone(),
        }
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format(format!("truncated: {what}")));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Loads an IDX image file (magic 0x00000803) and optionally an IDX label
/// file (magic 0x00000801). Pixels are u8 scaled by 1/255; images come out
/// as single-channel [1,H,W] tensors.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let bytes = fs::read(images_path)?;
    let magic = read_be_u32(&bytes, 0, "IDX image header")?;
    if magic != IDX_MAGIC_IMAGES {
        return Err(Error::Format(format!(
            "bad magic 0x{magic:08x} in {} (want 0x{IDX_MAGIC_IMAGES:08x})",
            images_path.display()
        )));
    }
    let n = read_be_u32(&bytes, 4, "IDX image count")? as usize;
    let h = read_be_u32(&bytes, 8, "IDX image rows")? as usize;
    let w = read_be_u32(&bytes, 12, "IDX image cols")? as usize;
    if h == 0 || w == 0 {
        return Err(Error::Format("IDX image dims must be positive".into()));
    }
    let payload = &bytes[16.min(bytes.len())..];
    let want = n * h * w;
    if payload.len() < want {
        return Err(Error::Format(format!(
            "truncated IDX payload: {} bytes for {} declared",
            payload.len(),
            want
        )));
    }
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let px = &payload[i * h * w..(i + 1) * h * w];
        let data: Vec<f32> = px.iter().map(|&b| b as f32 / 255.0).collect();
        images.push(Tensor::from_vec(&[1, h, w], data)?);
    }

    let labels = match labels_path {
        None => None,
        Some(lp) => Some(load_idx_labels(lp, n)?),
    };
    Dataset::new(images, labels)
}

fn load_idx_labels(path: &Path, expect_n: usize) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    let magic = read_be_u32(&bytes, 0, "IDX label header")?;
    if magic != IDX_MAGIC_LABELS {
        return Err(Error::Format(format!(
            "bad magic 0x{magic:08x} in {} (want 0x{IDX_MAGIC_LABELS:08x})",
            path.display()
        )));
    }
    let n = read_be_u32(&bytes, 4, "IDX label count")? as usize;
    if n != expect_n {
        return Err(Error::Format(format!(
            "label count {n} does not match image count {expect_n}"
        )));
    }
    let payload = &bytes[8.min(bytes.len())..];
    if payload.len() < n {
        return Err(Error::Format("truncated IDX label payload".into()));
    }
    Ok(payload[..n].iter().map(|&b| b as usize).collect())
}

/// Writes images (and labels, when present) as an IDX pair under `dir`
/// using the names `images.idx` and `labels.idx`. Pixels are rounded to u8.
pub fn write_idx(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let shape = dataset.image_shape();
    let &[c, h, w] = shape else {
        return Err(Error::ShapeMismatch(format!(
            "IDX writer wants [C,H,W] images, got {shape:?}"
        )));
    };
    if c != 1 {
        return Err(Error::InvalidArg(
            "IDX writer supports single-channel images only".into(),
        ));
    }
    let mut bytes = Vec::with_capacity(16 + dataset.len() * h * w);
    bytes.extend_from_slice(&IDX_MAGIC_IMAGES.to_be_bytes());
    bytes.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    bytes.extend_from_slice(&(h as u32).to_be_bytes());
    bytes.extend_from_slice(&(w as u32).to_be_bytes());
    for im in dataset.images() {
        for &v in im.data() {
            bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(dir.join("images.idx"), bytes)?;

    if let Some(labels) = dataset.labels() {
        let mut lb = Vec::with_capacity(8 + labels.len());
        lb.extend_from_slice(&IDX_MAGIC_LABELS.to_be_bytes());
        lb.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        for &l in labels {
            if l > u8::MAX as usize {
                return Err(Error::InvalidArg(format!("label {l} exceeds u8 range")));
            }
            lb.push(l as u8);
        }
        fs::write(dir.join("labels.idx"), lb)?;
    }
    Ok(())
}

/// Loads a binary PGM (P5, one channel) or PPM (P6, three channels) image
/// with maxval <= 255. Header whitespace is tolerated and '#' comment lines
/// are skipped.
pub fn load_pnm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    parse_pnm(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn parse_pnm(bytes: &[u8]) -> Result<Tensor> {
    let magic = bytes.get(0..2).ok_or_else(|| Error::Format("empty file".into()))?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        _ => {
            return Err(Error::Format(format!(
                "unsupported magic {:?} (want P5 or P6)",
                String::from_utf8_lossy(magic)
            )))
        }
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        *field = parse_pnm_int(bytes, &mut pos)?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval > 255 {
        return Err(Error::Format(format!("maxval {maxval} > 255 unsupported")));
    }
    if maxval == 0 || w == 0 || h == 0 {
        return Err(Error::Format("zero dimension or maxval".into()));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Format("missing header terminator".into()));
    }
    pos += 1;
    let want = w * h * channels;
    let payload = bytes
        .get(pos..pos + want)
        .ok_or_else(|| Error::Format(format!("truncated payload (want {want} bytes)")))?;
    // Interleaved RGB on disk, planar [C,H,W] in memory.
    let mut data = vec![0.0f32; want];
    for (i, &b) in payload.iter().enumerate() {
        let ch = i % channels;
        let pix = i / channels;
        data[ch * w * h + pix] = b as f32 / maxval as f32;
    }
    Tensor::from_vec(&[channels, h, w], data)
}

fn parse_pnm_int(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    // Skip whitespace and '#' comments.
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_digit() => break,
            Some(_) => return Err(Error::Format("unexpected byte in header".into())),
            None => return Err(Error::Format("truncated header".into())),
        }
    }
    let mut v: usize = 0;
    while let Some(&b) = bytes.get(*pos) {
        if !b.is_ascii_digit() {
            break;
        }
        v = v
            .checked_mul(10)
            .and_then(|v| v.checked_add((b - b'0') as usize))
            .ok_or_else(|| Error::Format("header value overflow".into()))?;
        *pos += 1;
    }
    Ok(v)
}

/// Writes one channel of an image as binary PGM, mapping [lo,hi] to 0..255.
pub fn write_pgm(path: &Path, plane: &[f32], h: usize, w: usize, lo: f32, hi: f32) -> Result<()> {
    if plane.len() != h * w {
        return Err(Error::ShapeMismatch(format!(
            "{} values for {h}x{w} PGM",
            plane.len()
        )));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Vec::with_capacity(32 + h * w);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    for &v in plane {
        out.push((((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads a dataset from a directory of .pgm/.ppm files, ids assigned in
/// lexicographic filename order. Labels, if present, come from a
/// `labels.csv` file of `filename,label` rows.
pub fn load_pnm_dir(dir: &Path) -> Result<Dataset> {
    let mut names: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".pgm") || n.ends_with(".ppm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Format(format!(
            "no .pgm/.ppm files in {}",
            dir.display()
        )));
    }
    let mut label_map = std::collections::BTreeMap::new();
    let labels_file = dir.join("labels.csv");
    if labels_file.exists() {
        for (lineno, line) in fs::read_to_string(&labels_file)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (name, label) = line.split_once(',').ok_or_else(|| {
                Error::Format(format!("labels.csv line {}: want name,label", lineno + 1))
            })?;
            let label: usize = label.trim().parse().map_err(|_| {
                Error::Format(format!("labels.csv line {}: bad label", lineno + 1))
            })?;
            label_map.insert(name.trim().to_string(), label);
        }
    }
    let images: Vec<Tensor> = names
        .iter()
        .map(|n| load_pnm(&dir.join(n)))
        .collect::<Result<_>>()?;
    let labels = if label_map.is_empty() {
        None
    } else {
        Some(
            names
                .iter()
                .map(|n| {
                    label_map
                        .get(n)
                        .copied()
                        .ok_or_else(|| Error::Format(format!("no label for {n}")))
                })
                .collect::<Result<Vec<_>>>()?,
        )
    };
    Dataset::new(images, labels)
}

/// Reads a rectangular numeric CSV into an n x d matrix, row order
/// preserved. `skip_header` drops the first line.
pub fn load_csv_matrix(path: &Path, skip_header: bool) -> Result<FeatureMatrix> {
    let text = fs::read_to_string(path)?;
    parse_csv_matrix(&text, skip_header)
}

pub(crate) fn parse_csv_matrix(text: &str, skip_header: bool) -> Result<FeatureMatrix> {
    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 && skip_header {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f32> = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f32>().map_err(|_| {
                    Error::Format(format!("unparsable cell {:?} at line {}", cell, lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Format(format!("ragged row at line {}", lineno + 1)))
            }
            _ => {}
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format("empty input".into()));
    }
    let d = width.unwrap();
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in &rows {
        data.extend_from_slice(r);
    }
    FeatureMatrix::from_vec(rows.len(), d, data)
}

/// Writes a feature matrix as CSV with '.' decimals, '\n' line ends and no
/// trailing comma. Values use shortest-roundtrip formatting, so a load of
/// the written file reproduces them exactly.
pub fn write_csv_matrix(path: &Path, m: &FeatureMatrix) -> Result<()> {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row = m.row(i);
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes cluster assignments as `id,cluster` CSV with a header row.
pub fn write_assignments_csv(path: &Path, ids: &[u64], assignments: &[usize]) -> Result<()> {
    if ids.len() != assignments.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} ids for {} assignments",
            ids.len(),
            assignments.len()
        )));
    }
    let mut f = fs::File::create(path)?;
    let mut out = String::from("id,cluster\n");
    for (id, a) in ids.iter().zip(assignments) {
        out.push_str(&format!("{id},{a}\n"));
    }
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Reads an `id,cluster` CSV (header optional) into assignments sorted by id.
pub fn load_assignments_csv(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    let mut pairs: Vec<(u64, usize)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line == "id,cluster") {
            continue;
        }
        let (id, cl) = line
            .split_once(',')
            .ok_or_else(|| Error::Format(format!("line {}: want id,cluster", lineno + 1)))?;
        let id: u64 = id
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("line {}: bad id", lineno + 1)))?;
        let cl: usize = cl
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("line {}: bad cluster", lineno + 1)))?;
        pairs.push((id, cl));
    }
    if pairs.is_empty() {
        return Err(Error::Format("empty input".into()));
    }
    pairs.sort_by_key(|&(id, _)| id);
    Ok(pairs.into_iter().map(|(_, c)| c).collect())
}
