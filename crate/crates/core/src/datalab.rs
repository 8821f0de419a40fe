//! Datasets: procedurally rendered shapes, Dirichlet label-skew partitions,
//! stratified label subsampling, and PGM/PPM folder ingestion.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::microtensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("class {0} has no samples")]
    TooFewSamples(usize),
    #[error("label fraction {0} outside (0, 1]")]
    FractionOutOfRange(f64),
    #[error("invalid partition request: {0}")]
    InvalidPartition(String),
    #[error("cannot read image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("image {path} is {got:?}, expected {expected:?}")]
    SizeMismatch { path: PathBuf, got: [usize; 3], expected: [usize; 3] },
    #[error("unknown label {label:?} in manifest line {line}")]
    UnknownLabel { label: String, line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
    pub split: Split,
    pub classes: usize,
}

impl Dataset {
    pub fn empty(classes: usize, split: Split) -> Self {
        Self { images: vec![], labels: vec![], ids: vec![], split, classes }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Samples at the given positions, in that order.
    pub fn select(&self, positions: &[usize], split: Split) -> Dataset {
        Dataset {
            images: positions.iter().map(|&i| self.images[i].clone()).collect(),
            labels: positions.iter().map(|&i| self.labels[i]).collect(),
            ids: positions.iter().map(|&i| self.ids[i]).collect(),
            split,
            classes: self.classes,
        }
    }

    /// Positions of `ids`; panics on an unknown id.
    pub fn positions_of(&self, ids: &[u64]) -> Vec<usize> {
        let index: BTreeMap<u64, usize> = self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        ids.iter().map(|id| index[id]).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }
}

/// Stratified split into `(train, test)` with `round(test_fraction·n_c)`
/// test samples per class.
pub fn split_train_test<R: Rng + ?Sized>(data: &Dataset, test_fraction: f64, rng: &mut R) -> (Dataset, Dataset) {
    let mut train = vec![];
    let mut test = vec![];
    for members in by_class(&data.labels, data.classes) {
        let mut members = members;
        members.shuffle(rng);
        let k = (test_fraction * members.len() as f64).round() as usize;
        test.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (data.select(&train, Split::Train), data.select(&test, Split::Test))
}

fn by_class(labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]; classes];
    for (i, &y) in labels.iter().enumerate() {
        out[y].push(i);
    }
    out
}

// ---- synthetic shapes ------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub side: usize,
    pub channels: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Shape radius range as a fraction of the image side.
    pub scale: [f64; 2],
    /// Random distractor strokes drawn under the shape.
    pub clutter: usize,
    /// Shape intensity above the background.
    pub contrast: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { classes: 2, per_class: 300, side: 32, channels: 1, noise: 0.1, scale: [0.15, 0.3], clutter: 0, contrast: 0.8 }
    }
}

const SHAPES: usize = 6;

/// Pixel coverage of shape `kind` at offset `(dx, dy)` from its centre.
fn shape_hit(kind: usize, dx: f64, dy: f64, r: f64) -> bool {
    let t = (r * 0.35).max(1.0);
    match kind % SHAPES {
        0 => dx * dx + dy * dy <= r * r,
        1 => (dx.abs() <= t / 2.0 && dy.abs() <= r) || (dy.abs() <= t / 2.0 && dx.abs() <= r),
        2 => {
            let m = dx.abs().max(dy.abs());
            m <= r && m >= r - t
        }
        3 => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        4 => ((dx - dy).abs() <= t * 0.7 || (dx + dy).abs() <= t * 0.7) && dx.abs() <= r && dy.abs() <= r,
        _ => {
            let d = (dx * dx + dy * dy).sqrt();
            d <= r && d >= r - t
        }
    }
}

fn render<R: Rng + ?Sized>(spec: &SynthSpec, class: usize, rng: &mut R) -> Tensor {
    let side = spec.side as f64;
    let (lo, hi) = (spec.scale[0].min(spec.scale[1]), spec.scale[0].max(spec.scale[1]));
    let r = side * if hi > lo { rng.random_range(lo..=hi) } else { lo };
    // Integer centres keep rasterization translation-invariant.
    let margin = r.ceil().min((side / 2.0).floor()) as usize;
    let span = spec.side - margin;
    let cx = if span > margin { rng.random_range(margin..=span) } else { spec.side / 2 } as f64;
    let cy = if span > margin { rng.random_range(margin..=span) } else { spec.side / 2 } as f64;
    let intensity = spec.contrast * (1.0 - 0.3 * (class / SHAPES) as f64 / (spec.classes / SHAPES + 1) as f64);
    let n = spec.side;
    let mut plane = vec![0.0; n * n];
    for _ in 0..spec.clutter {
        let (x0, y0) = (rng.random_range(0.0..side), rng.random_range(0.0..side));
        let ang: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let len = rng.random_range(0.2..0.6) * side;
        let level = rng.random_range(0.3..1.0) * spec.contrast;
        for s in 0..(len as usize * 2) {
            let u = s as f64 / 2.0;
            let (x, y) = (x0 + u * ang.cos(), y0 + u * ang.sin());
            if x >= 0.0 && y >= 0.0 && (x as usize) < n && (y as usize) < n {
                plane[y as usize * n + x as usize] = level;
            }
        }
    }
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if shape_hit(class, dx, dy, r) {
                plane[y * n + x] = intensity;
            }
        }
    }
    let tint: Vec<f64> = if spec.channels == 1 { vec![1.0] } else { (0..spec.channels).map(|_| rng.random_range(0.6..1.0)).collect() };
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let mut data = Vec::with_capacity(n * n * spec.channels);
    for &v in &plane {
        for &t in &tint {
            let e = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push((v * t + e).clamp(0.0, 1.0));
        }
    }
    Tensor::new(vec![n, n, spec.channels], data).expect("image shape")
}

/// `per_class` images of each class, interleaved by class, with ids `0..n`.
pub fn synth_dataset<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Dataset {
    assert!(spec.classes >= 2, "need at least two classes");
    let mut out = Dataset::empty(spec.classes, Split::Train);
    for i in 0..spec.per_class {
        for c in 0..spec.classes {
            out.images.push(render(spec, c, rng));
            out.labels.push(c);
            out.ids.push((i * spec.classes + c) as u64);
        }
    }
    out
}

// ---- partitioning ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub clients: usize,
    pub delta: f64,
    /// `rho[i][m]`: share of class `i` sent to client `m`.
    pub rho: Vec<Vec<f64>>,
    /// Sample ids per client.
    pub assignment: Vec<Vec<u64>>,
    /// `histograms[m][i]`: class-`i` count at client `m`.
    pub histograms: Vec<Vec<usize>>,
}

fn dirichlet<R: Rng + ?Sized>(m: usize, delta: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(delta, 1.0).expect("positive concentration");
    for _ in 0..1000 {
        let draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|d| d / total).collect();
        }
    }
    // Every draw underflowed: the concentration is tiny, so all mass goes to one client.
    let mut v = vec![0.0; m];
    v[rng.random_range(0..m)] = 1.0;
    v
}

/// Integer counts summing to `total` from proportions, by largest remainder
/// (ties to the lower index).
pub fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Label-skew split: each class's shares over `m` clients follow `Dir_m(δ)`.
/// `size_skew`, when given, multiplies client `k`'s share of every class
/// before the row is renormalized.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    data: &Dataset,
    m: usize,
    delta: f64,
    size_skew: Option<&[f64]>,
    rng: &mut R,
) -> Result<PartitionPlan> {
    if m == 0 || !(delta > 0.0) {
        return Err(DataError::InvalidPartition(format!("clients {m}, delta {delta}")));
    }
    if let Some(s) = size_skew {
        if s.len() != m || s.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(DataError::InvalidPartition("size multipliers must be positive, one per client".into()));
        }
    }
    let members = by_class(&data.labels, data.classes);
    if let Some(empty) = members.iter().position(|c| c.is_empty()) {
        return Err(DataError::TooFewSamples(empty));
    }
    let mut rho = Vec::with_capacity(data.classes);
    let mut assignment = vec![vec![]; m];
    let mut histograms = vec![vec![0; data.classes]; m];
    for (class, idx) in members.into_iter().enumerate() {
        let mut row = dirichlet(m, delta, rng);
        if let Some(s) = size_skew {
            row.iter_mut().zip(s).for_each(|(r, k)| *r *= k);
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|r| *r /= total);
        }
        let counts = largest_remainder(&row, idx.len());
        let mut idx = idx;
        idx.shuffle(rng);
        let mut start = 0;
        for (client, &c) in counts.iter().enumerate() {
            assignment[client].extend(idx[start..start + c].iter().map(|&i| data.ids[i]));
            histograms[client][class] += c;
            start += c;
        }
        rho.push(row);
    }
    for a in &mut assignment {
        a.sort_unstable();
    }
    Ok(PartitionPlan { clients: m, delta, rho, assignment, histograms })
}

/// Partition manifest: client id to sample ids, plus the share matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub clients: usize,
    pub delta: f64,
    pub rho: Vec<Vec<f64>>,
    pub assignment: BTreeMap<String, Vec<u64>>,
}

impl PartitionPlan {
    pub fn manifest(&self) -> PartitionManifest {
        PartitionManifest {
            clients: self.clients,
            delta: self.delta,
            rho: self.rho.clone(),
            assignment: self.assignment.iter().enumerate().map(|(m, ids)| (m.to_string(), ids.clone())).collect(),
        }
    }

    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, &self.manifest())?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeterogeneityScore {
    /// Mean Shannon entropy (nats) of client label histograms, over
    /// non-empty clients.
    pub mean_entropy: f64,
    /// Largest total-variation distance between two non-empty clients.
    pub max_tv: f64,
    /// `ln Ω − mean_entropy`; grows with heterogeneity.
    pub entropy_deficit: f64,
}

pub fn heterogeneity_score(plan: &PartitionPlan) -> HeterogeneityScore {
    let classes = plan.rho.len();
    let dists: Vec<Vec<f64>> = plan
        .histograms
        .iter()
        .filter_map(|h| {
            let n: usize = h.iter().sum();
            (n > 0).then(|| h.iter().map(|&c| c as f64 / n as f64).collect())
        })
        .collect();
    let entropy = |p: &Vec<f64>| -> f64 { -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>() };
    let mean_entropy = if dists.is_empty() { 0.0 } else { dists.iter().map(entropy).sum::<f64>() / dists.len() as f64 };
    let mut max_tv = 0.0f64;
    for i in 0..dists.len() {
        for j in i + 1..dists.len() {
            let tv = 0.5 * dists[i].iter().zip(&dists[j]).map(|(a, b)| (a - b).abs()).sum::<f64>();
            max_tv = max_tv.max(tv);
        }
    }
    HeterogeneityScore { mean_entropy, max_tv, entropy_deficit: (classes as f64).ln() - mean_entropy }
}

// ---- label subsampling -----------------------------------------------------

/// Splits a shard, given as positions into `labels`, into a class-stratified
/// labeled subset of `⌈fraction·n⌉` samples and the unlabeled remainder.
pub fn subsample_labels<R: Rng + ?Sized>(shard: &[usize], labels: &[usize], fraction: f64, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::FractionOutOfRange(fraction));
    }
    let n = shard.len();
    let target = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in shard {
        groups.entry(labels[i]).or_default().push(i);
    }
    let sizes: Vec<f64> = groups.values().map(|g| g.len() as f64 / n.max(1) as f64).collect();
    let quotas = largest_remainder(&sizes, target.min(n));
    let mut labeled = vec![];
    let mut unlabeled = vec![];
    for (members, q) in groups.into_values().zip(quotas) {
        let mut members = members;
        members.shuffle(rng);
        labeled.extend_from_slice(&members[..q.min(members.len())]);
        unlabeled.extend_from_slice(&members[q.min(members.len())..]);
    }
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok((labeled, unlabeled))
}

// ---- PGM/PPM ---------------------------------------------------------------

fn unreadable(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::UnreadableImage { path: path.to_path_buf(), reason: reason.into() }
}

/// Reads a binary P5 (grey) or P6 (RGB) image as `H×W×C` in `[0, 1]`.
pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| unreadable(path, e.to_string()))?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(unreadable(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(unreadable(path, format!("unsupported magic {other}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| unreadable(path, format!("bad header field {s}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(unreadable(path, "bad dimensions or maxval"));
    }
    let wide = maxval > 255;
    let count = w * h * channels;
    let need = count * if wide { 2 } else { 1 };
    if bytes.len() < pos + need {
        return Err(unreadable(path, "truncated pixel data"));
    }
    let px = &bytes[pos..pos + need];
    let data = (0..count)
        .map(|i| {
            let v = if wide { u16::from_be_bytes([px[2 * i], px[2 * i + 1]]) as f64 } else { px[i] as f64 };
            v / maxval as f64
        })
        .collect();
    Ok(Tensor::new(vec![h, w, channels], data).expect("pnm shape"))
}

/// Writes an `H×W×1` or `H×W×3` image at 8 bits, rounding `v·255`.
pub fn write_pnm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    let magic = match s.get(2) {
        Some(1) => "P5",
        Some(3) => "P6",
        _ => return Err(DataError::InvalidPartition(format!("cannot write image of shape {s:?}"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out)?;
    Ok(())
}

/// Loads images listed in `manifest` (lines of `relative/path,label`; blank
/// lines and `#` comments ignored) from `dir`.
pub fn load_folder(dir: &Path, manifest: &Path, shape: [usize; 3], classes: usize) -> Result<Dataset> {
    let text = fs::read_to_string(manifest)?;
    let mut out = Dataset::empty(classes, Split::Train);
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (file, label) = line.rsplit_once(',').ok_or_else(|| DataError::UnknownLabel { label: line.to_string(), line: lineno + 1 })?;
        let label_str = label.trim();
        let y = label_str
            .parse::<usize>()
            .ok()
            .filter(|&y| y < classes)
            .ok_or_else(|| DataError::UnknownLabel { label: label_str.to_string(), line: lineno + 1 })?;
        let path = dir.join(file.trim());
        let img = read_pnm(&path)?;
        let got = [img.shape()[0], img.shape()[1], img.shape()[2]];
        if got != shape {
            return Err(DataError::SizeMismatch { path, got, expected: shape });
        }
        out.ids.push(out.images.len() as u64);
        out.images.push(img);
        out.labels.push(y);
    }
    Ok(out)
}
