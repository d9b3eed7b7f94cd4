//! Synthetic embedding data and the binary container used for datasets and
//! checkpoints.
//!
//! Every file starts with the 8-byte magic `EMOSPC01`, a little-endian `u32`
//! manifest length and a UTF-8 JSON manifest. The manifest describes the
//! payload that follows completely, so no shape knowledge is needed out of
//! band. Floating-point payloads are stored as little-endian `f32` and widened
//! to `f64` on load.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bank::PrototypeBank;
use crate::error::{EmoError, Result};
use crate::fusion::FusionNet;
use crate::guidance::GuidanceConfig;
use crate::linalg::{dot, normalize, normalize_in_place, norm, orthogonal_init, Mat};
use crate::mapper::Mapper;
use crate::rng::Rng;
use crate::training::{Sample, TrainConfig};

pub const MAGIC: &[u8; 8] = b"EMOSPC01";
pub const FORMAT_VERSION: u32 = 1;
pub const KIND_DATASET: &str = "dataset";
pub const KIND_CHECKPOINT: &str = "checkpoint";
/// Prototype norms read back from `f32` storage must be this close to 1.
pub const STORED_NORM_TOL: f64 = 1e-5;
/// Scale of the offset separating a subcluster centre from its category anchor.
pub const SUBCLUSTER_OFFSET: f64 = 0.3;

/// Paired visual/text embeddings with category labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    visual: Mat,
    textual: Mat,
    labels: Vec<usize>,
    classes: usize,
    names: Option<Vec<String>>,
}

impl EmbeddingDataset {
    pub fn new(
        visual: Mat,
        textual: Mat,
        labels: Vec<usize>,
        classes: usize,
        names: Option<Vec<String>>,
    ) -> Result<Self> {
        let ds = Self {
            visual,
            textual,
            labels,
            classes,
            names,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.visual.rows() != n || self.textual.rows() != n {
            return Err(EmoError::ShapeMismatch(format!(
                "{} visual rows, {} textual rows, {n} labels",
                self.visual.rows(),
                self.textual.rows()
            )));
        }
        if let Some(names) = &self.names {
            if names.len() != n {
                return Err(EmoError::ShapeMismatch(format!("{} names for {n} samples", names.len())));
            }
        }
        if self.classes == 0 {
            return Err(EmoError::InvalidConfig("dataset needs at least one class".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(EmoError::IndexOutOfRange {
                index: bad,
                len: self.classes,
            });
        }
        if !self.visual.is_finite() || !self.textual.is_finite() {
            return Err(EmoError::InvariantViolation("non-finite embedding entry".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn visual_dim(&self) -> usize {
        self.visual.cols()
    }

    pub fn text_dim(&self) -> usize {
        self.textual.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn visual(&self) -> &Mat {
        &self.visual
    }

    pub fn textual(&self) -> &Mat {
        &self.textual
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    pub fn sample(&self, i: usize) -> Sample<'_> {
        Sample {
            visual: self.visual.row(i),
            text: self.textual.row(i),
            label: self.labels[i],
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = Sample<'_>> + '_ {
        (0..self.len()).map(move |i| self.sample(i))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub dim: usize,
    pub categories: usize,
    pub subclusters: usize,
    pub samples_per_subcluster: usize,
    pub visual_noise: f64,
    pub text_noise: f64,
    pub cross_modal_correlation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            categories: 8,
            subclusters: 2,
            samples_per_subcluster: 50,
            visual_noise: 0.05,
            text_noise: 0.05,
            cross_modal_correlation: 0.5,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(EmoError::InvalidConfig(msg));
        if self.dim == 0 || self.categories == 0 || self.subclusters == 0 || self.samples_per_subcluster == 0 {
            return bad("dim, categories, subclusters and samples_per_subcluster must be positive".into());
        }
        if self.categories > self.dim {
            return bad(format!(
                "{} categories need at least as many dimensions, got {}",
                self.categories, self.dim
            ));
        }
        for (name, v) in [("visual_noise", self.visual_noise), ("text_noise", self.text_noise)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.cross_modal_correlation) {
            return bad("cross_modal_correlation must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Non-fatal concerns about the configuration.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.categories * self.subclusters > self.dim {
            out.push(format!(
                "{} subclusters in {} dimensions may not be separable",
                self.categories * self.subclusters,
                self.dim
            ));
        }
        out
    }

    pub fn total_samples(&self) -> usize {
        self.categories * self.subclusters * self.samples_per_subcluster
    }
}

/// Clustered unit-norm embeddings around orthonormal category anchors.
///
/// With one subcluster per category the centre is the anchor itself;
/// otherwise each centre is the anchor pushed along a random direction
/// orthogonal to it. Values are rounded to `f32` so that a saved and
/// reloaded dataset equals the generated one exactly.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<EmbeddingDataset> {
    cfg.validate()?;
    let d = cfg.dim;
    let mut rng = Rng::new(cfg.seed);
    let anchors = orthogonal_init(cfg.categories, d, &mut rng.fork())?;
    let mut noise_rng = rng.fork();

    let n = cfg.total_samples();
    let mut visual = Vec::with_capacity(n * d);
    let mut textual = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let rho = cfg.cross_modal_correlation;

    for (c, anchor) in anchors.row_iter().enumerate() {
        for _ in 0..cfg.subclusters {
            let center = if cfg.subclusters == 1 {
                anchor.to_vec()
            } else {
                let mut g = noise_rng.normal_vec(d);
                let along = dot(&g, anchor);
                g.iter_mut().zip(anchor).for_each(|(x, a)| *x -= along * a);
                normalize_in_place(&mut g)?;
                let shifted: Vec<f64> = anchor.iter().zip(&g).map(|(a, o)| a + SUBCLUSTER_OFFSET * o).collect();
                normalize(&shifted)?
            };
            for _ in 0..cfg.samples_per_subcluster {
                let nv = noise_rng.normal_vec(d);
                let v: Vec<f64> = center.iter().zip(&nv).map(|(c, e)| c + cfg.visual_noise * e).collect();
                let v = normalize(&v)?;
                let nt = noise_rng.normal_vec(d);
                let t: Vec<f64> = (0..d)
                    .map(|i| rho * v[i] + (1.0 - rho) * center[i] + cfg.text_noise * nt[i])
                    .collect();
                let t = normalize(&t)?;
                visual.extend(v.iter().map(|&x| x as f32 as f64));
                textual.extend(t.iter().map(|&x| x as f32 as f64));
                labels.push(c);
            }
        }
    }
    EmbeddingDataset::new(
        Mat::from_vec(n, d, visual)?,
        Mat::from_vec(n, d, textual)?,
        labels,
        cfg.categories,
        None,
    )
}

// ---------------------------------------------------------------------------
// Container primitives

fn format_error(offset: usize, message: impl Into<String>) -> EmoError {
    EmoError::FormatError {
        offset: offset as u64,
        message: message.into(),
    }
}

fn write_container(manifest: &Value, payload: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec(manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    out
}

fn push_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &x in values {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

/// Bounds-checked cursor over a byte buffer that reports absolute offsets.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(format_error(
                self.pos,
                format!("truncated {what}: need {n} bytes, {available} available"),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| format_error(self.pos, format!("{what} size overflows")))?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn mat(&mut self, rows: usize, cols: usize, what: &str) -> Result<Mat> {
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| format_error(self.pos, format!("{what} size overflows")))?;
        Mat::from_vec(rows, cols, self.f32s(count, what)?)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(format_error(
                self.pos,
                format!("{} trailing bytes after payload", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

/// Parse magic and manifest; returns the manifest of the expected kind and a
/// reader positioned at the payload.
fn read_container<'a>(buf: &'a [u8], kind: &str) -> Result<(Value, Reader<'a>)> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(format_error(0, "bad magic, not an emospace container"));
    }
    let len = r.u32("manifest length")? as usize;
    let start = r.pos;
    let text = r.take(len, "manifest")?;
    let manifest: Value =
        serde_json::from_slice(text).map_err(|e| format_error(start, format!("manifest is not valid JSON: {e}")))?;
    let version = manifest
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| format_error(start, "manifest lacks an integer format_version"))?;
    if version != FORMAT_VERSION as u64 {
        return Err(EmoError::VersionError {
            found: version.min(u32::MAX as u64) as u32,
            expected: FORMAT_VERSION,
        });
    }
    let found = manifest.get("kind").and_then(Value::as_str).unwrap_or("");
    if found != kind {
        return Err(format_error(start, format!("expected a {kind} container, found kind {found:?}")));
    }
    Ok((manifest, r))
}

fn parse_manifest<T: serde::de::DeserializeOwned>(manifest: Value) -> Result<T> {
    serde_json::from_value(manifest).map_err(|e| format_error(MAGIC.len() + 4, format!("manifest: {e}")))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(std::fs::read(path)?)
}

/// Write through a sibling temporary file so readers never observe a partial file.
fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    format_version: u32,
    kind: String,
    #[serde(rename = "N")]
    n: usize,
    d_v: usize,
    d_t: usize,
    m: usize,
    has_names: bool,
}

pub fn dataset_to_bytes(ds: &EmbeddingDataset) -> Vec<u8> {
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        kind: KIND_DATASET.into(),
        n: ds.len(),
        d_v: ds.visual_dim(),
        d_t: ds.text_dim(),
        m: ds.classes(),
        has_names: ds.names.is_some(),
    };
    let mut payload = Vec::new();
    push_f32s(&mut payload, ds.visual.as_slice());
    push_f32s(&mut payload, ds.textual.as_slice());
    for &l in &ds.labels {
        payload.extend_from_slice(&(l as u32).to_le_bytes());
    }
    if let Some(names) = &ds.names {
        for name in names {
            payload.extend_from_slice(&(name.len() as u32).to_le_bytes());
            payload.extend_from_slice(name.as_bytes());
        }
    }
    write_container(&serde_json::to_value(manifest).expect("manifest serializes"), &payload)
}

/// Parse a dataset from either the binary container or JSON lines.
pub fn dataset_from_bytes(buf: &[u8]) -> Result<EmbeddingDataset> {
    if !buf.starts_with(MAGIC) {
        if let Some(first) = buf.iter().find(|b| !b.is_ascii_whitespace()) {
            if *first == b'{' {
                return dataset_from_json_lines(buf);
            }
        }
    }
    let (manifest, mut r) = read_container(buf, KIND_DATASET)?;
    let m: DatasetManifest = parse_manifest(manifest)?;
    let visual = r.mat(m.n, m.d_v, "visual matrix")?;
    let textual = r.mat(m.n, m.d_t, "textual matrix")?;
    let mut labels = Vec::with_capacity(m.n.min(buf.len() / 4));
    for _ in 0..m.n {
        labels.push(r.u32("labels")? as usize);
    }
    let names = if m.has_names {
        let mut names = Vec::with_capacity(m.n.min(buf.len() / 4));
        for _ in 0..m.n {
            let len = r.u32("name length")? as usize;
            let at = r.pos;
            let bytes = r.take(len, "name")?;
            names.push(
                String::from_utf8(bytes.to_vec()).map_err(|_| format_error(at, "name is not valid UTF-8"))?,
            );
        }
        Some(names)
    } else {
        None
    };
    r.finish()?;
    EmbeddingDataset::new(visual, textual, labels, m.m, names)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonSample {
    visual: Vec<f64>,
    textual: Vec<f64>,
    label: usize,
    #[serde(default)]
    name: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonHeader {
    classes: usize,
}

/// One JSON object per line. An optional first line `{"classes": m}` fixes
/// the class count; otherwise it is one more than the largest label.
fn dataset_from_json_lines(buf: &[u8]) -> Result<EmbeddingDataset> {
    let text = std::str::from_utf8(buf).map_err(|e| format_error(e.valid_up_to(), "JSON lines input is not UTF-8"))?;
    let mut classes = None;
    let mut samples = Vec::new();
    let mut offset = 0;
    for (idx, line) in text.split_inclusive('\n').enumerate() {
        let at = offset;
        offset += line.len();
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if idx == 0 && line.contains("\"classes\"") {
            let h: JsonHeader =
                serde_json::from_str(line).map_err(|e| format_error(at, format!("header line: {e}")))?;
            classes = Some(h.classes);
            continue;
        }
        let s: JsonSample =
            serde_json::from_str(line).map_err(|e| format_error(at, format!("line {}: {e}", idx + 1)))?;
        samples.push((at, s));
    }
    let Some((_, first)) = samples.first() else {
        return Err(EmoError::EmptyDataset);
    };
    let (d_v, d_t) = (first.visual.len(), first.textual.len());
    let with_names = samples.iter().any(|(_, s)| s.name.is_some());
    let classes = classes.unwrap_or_else(|| samples.iter().map(|(_, s)| s.label + 1).max().unwrap_or(1));
    let mut visual = Vec::with_capacity(samples.len() * d_v);
    let mut textual = Vec::with_capacity(samples.len() * d_t);
    let mut labels = Vec::with_capacity(samples.len());
    let mut names = Vec::new();
    for (at, s) in &samples {
        if s.visual.len() != d_v || s.textual.len() != d_t {
            return Err(format_error(*at, "embedding length differs from the first sample"));
        }
        visual.extend_from_slice(&s.visual);
        textual.extend_from_slice(&s.textual);
        labels.push(s.label);
        names.push(s.name.clone().unwrap_or_default());
    }
    let n = labels.len();
    EmbeddingDataset::new(
        Mat::from_vec(n, d_v, visual)?,
        Mat::from_vec(n, d_t, textual)?,
        labels,
        classes,
        with_names.then_some(names),
    )
}

pub fn save_dataset(ds: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &dataset_to_bytes(ds))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    dataset_from_bytes(&read_file(path.as_ref())?)
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Everything needed to resume guidance from a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: FusionNet,
    pub bank: PrototypeBank,
    pub mapper: Option<Mapper>,
    pub guidance: Option<GuidanceConfig>,
    /// Training configuration echoed for provenance; its seed is the run seed.
    pub train_config: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockSpec {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankManifest {
    usage: Vec<u64>,
    merge_threshold: f64,
    split_threshold: f64,
    generation: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GuidanceManifest {
    k_pos: usize,
    k_neg: usize,
    tau_temp: f64,
    alpha_attn: f64,
    renormalize_rows: bool,
    neg_scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format_version: u32,
    kind: String,
    seed: u64,
    config: TrainConfig,
    bank: BankManifest,
    guidance: Option<GuidanceManifest>,
    blocks: Vec<BlockSpec>,
}

fn block(name: &str, rows: usize, cols: usize) -> BlockSpec {
    BlockSpec {
        name: name.into(),
        rows,
        cols,
    }
}

pub fn checkpoint_to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let net = &ck.net;
    let mut blocks = vec![
        block("fusion.w1", net.w1.rows(), net.w1.cols()),
        block("fusion.w2", net.w2.rows(), net.w2.cols()),
        block("fusion.ug", net.ug.rows(), net.ug.cols()),
        block("fusion.wg", 1, net.wg.len()),
        block("bank.prototypes", ck.bank.len(), ck.bank.dim()),
    ];
    let mut payload = Vec::new();
    push_f32s(&mut payload, net.w1.as_slice());
    push_f32s(&mut payload, net.w2.as_slice());
    push_f32s(&mut payload, net.ug.as_slice());
    push_f32s(&mut payload, &net.wg);
    push_f32s(&mut payload, ck.bank.prototypes().as_slice());
    if let Some(m) = &ck.mapper {
        blocks.push(block("mapper.w_in", m.w_in.rows(), m.w_in.cols()));
        blocks.push(block("mapper.b_in", 1, m.b_in.len()));
        blocks.push(block("mapper.w_out", m.w_out.rows(), m.w_out.cols()));
        blocks.push(block("mapper.b_out", 1, m.b_out.len()));
        push_f32s(&mut payload, m.w_in.as_slice());
        push_f32s(&mut payload, &m.b_in);
        push_f32s(&mut payload, m.w_out.as_slice());
        push_f32s(&mut payload, &m.b_out);
    }
    let guidance = ck.guidance.as_ref().map(|g| {
        blocks.push(block("guidance.wp", g.wp.rows(), g.wp.cols()));
        push_f32s(&mut payload, g.wp.as_slice());
        GuidanceManifest {
            k_pos: g.k_pos,
            k_neg: g.k_neg,
            tau_temp: g.tau_temp,
            alpha_attn: g.alpha_attn,
            renormalize_rows: g.renormalize_rows,
            neg_scale: g.neg_scale,
        }
    });
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        kind: KIND_CHECKPOINT.into(),
        seed: ck.train_config.seed,
        config: ck.train_config.clone(),
        bank: BankManifest {
            usage: ck.bank.usage().to_vec(),
            merge_threshold: ck.bank.merge_threshold(),
            split_threshold: ck.bank.split_threshold(),
            generation: ck.bank.generation(),
        },
        guidance,
        blocks,
    };
    write_container(&serde_json::to_value(manifest).expect("manifest serializes"), &payload)
}

/// Parse and validate a checkpoint.
///
/// Prototype rows must be unit-norm to within `f32` storage accuracy; they are
/// then renormalized in `f64`.
pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let (manifest, mut r) = read_container(buf, KIND_CHECKPOINT)?;
    let m: CheckpointManifest = parse_manifest(manifest)?;
    if m.seed != m.config.seed {
        return Err(EmoError::InvariantViolation(format!(
            "manifest seed {} disagrees with the config echo {}",
            m.seed, m.config.seed
        )));
    }
    let mut mats = std::collections::BTreeMap::new();
    for b in &m.blocks {
        let mat = r.mat(b.rows, b.cols, &b.name)?;
        if mats.insert(b.name.clone(), mat).is_some() {
            return Err(EmoError::InvariantViolation(format!("duplicate block {}", b.name)));
        }
    }
    r.finish()?;
    fn take(mats: &mut std::collections::BTreeMap<String, Mat>, name: &str) -> Result<Mat> {
        mats.remove(name)
            .ok_or_else(|| EmoError::InvariantViolation(format!("missing block {name}")))
    }

    let as_shape = |e: EmoError| match e {
        EmoError::InvariantViolation(_) => e,
        other => EmoError::InvariantViolation(other.to_string()),
    };
    let net = FusionNet::from_parts(
        take(&mut mats, "fusion.w1")?,
        take(&mut mats, "fusion.w2")?,
        take(&mut mats, "fusion.ug")?,
        take(&mut mats, "fusion.wg")?.into_vec(),
    )
    .map_err(as_shape)?;

    let mut protos = take(&mut mats, "bank.prototypes")?;
    for i in 0..protos.rows() {
        let n = norm(protos.row(i));
        if !n.is_finite() || (n - 1.0).abs() > STORED_NORM_TOL {
            return Err(EmoError::InvariantViolation(format!("prototype {i} has norm {n}")));
        }
        normalize_in_place(protos.row_mut(i)).map_err(as_shape)?;
    }
    if protos.cols() != net.config().visual_dim {
        return Err(EmoError::InvariantViolation(format!(
            "prototype dimension {} differs from the fused dimension {}",
            protos.cols(),
            net.config().visual_dim
        )));
    }
    let bank = PrototypeBank::from_parts(
        protos,
        m.bank.usage,
        m.bank.merge_threshold,
        m.bank.split_threshold,
        m.bank.generation,
    )?;

    let mapper = if mats.contains_key("mapper.w_in") {
        let mapper = Mapper {
            w_in: take(&mut mats, "mapper.w_in")?,
            b_in: take(&mut mats, "mapper.b_in")?.into_vec(),
            w_out: take(&mut mats, "mapper.w_out")?,
            b_out: take(&mut mats, "mapper.b_out")?.into_vec(),
        };
        mapper.validate().map_err(as_shape)?;
        Some(mapper)
    } else {
        None
    };

    let guidance = match m.guidance {
        Some(g) => {
            let cfg = GuidanceConfig {
                k_pos: g.k_pos,
                k_neg: g.k_neg,
                tau_temp: g.tau_temp,
                alpha_attn: g.alpha_attn,
                wp: take(&mut mats, "guidance.wp")?,
                renormalize_rows: g.renormalize_rows,
                neg_scale: g.neg_scale,
            };
            cfg.validate().map_err(as_shape)?;
            if cfg.wp.cols() != bank.dim() {
                return Err(EmoError::InvariantViolation(format!(
                    "head projection width {} differs from prototype dimension {}",
                    cfg.wp.cols(),
                    bank.dim()
                )));
            }
            Some(cfg)
        }
        None => None,
    };
    if let Some(name) = mats.keys().next() {
        return Err(EmoError::InvariantViolation(format!("unexpected block {name}")));
    }
    Ok(Checkpoint {
        net,
        bank,
        mapper,
        guidance,
        train_config: m.config,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &checkpoint_to_bytes(ck))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    checkpoint_from_bytes(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionConfig;

    fn tiny() -> SynthConfig {
        SynthConfig {
            dim: 8,
            categories: 3,
            subclusters: 2,
            samples_per_subcluster: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_harness_shape() {
        let ds = generate_synthetic(&SynthConfig::default()).unwrap();
        assert_eq!(ds.len(), 800);
        assert_eq!(ds.classes(), 8);
        assert_eq!((ds.visual_dim(), ds.text_dim()), (32, 32));
        for s in ds.samples() {
            assert!((norm(s.visual) - 1.0).abs() < 1e-6);
            assert!((norm(s.text) - 1.0).abs() < 1e-6);
        }
        assert!(SynthConfig::default().warnings().is_empty());
    }

    #[test]
    fn noiseless_single_subcluster_hits_anchors() {
        let cfg = SynthConfig {
            visual_noise: 0.0,
            text_noise: 0.0,
            cross_modal_correlation: 0.0,
            subclusters: 1,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let anchors = orthogonal_init(8, 32, &mut Rng::new(42).fork()).unwrap();
        let mut correct = 0;
        for s in ds.samples() {
            for (x, a) in s.visual.iter().zip(anchors.row(s.label)) {
                assert_eq!(*x, *a as f32 as f64);
            }
            assert_eq!(s.visual, s.text);
            let best = (0..8)
                .max_by(|&a, &b| dot(s.visual, anchors.row(a)).total_cmp(&dot(s.visual, anchors.row(b))))
                .unwrap();
            correct += usize::from(best == s.label);
        }
        assert_eq!(correct, ds.len());
    }

    #[test]
    fn full_correlation_without_noise_ties_modalities() {
        let cfg = SynthConfig {
            visual_noise: 0.0,
            text_noise: 0.0,
            cross_modal_correlation: 1.0,
            ..tiny()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.visual(), ds.textual());
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(generate_synthetic(&tiny()).unwrap(), generate_synthetic(&tiny()).unwrap());
        let other = SynthConfig { seed: 7, ..tiny() };
        assert_ne!(generate_synthetic(&tiny()).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn crowded_config_warns() {
        let cfg = SynthConfig {
            dim: 8,
            categories: 8,
            subclusters: 2,
            ..SynthConfig::default()
        };
        assert_eq!(cfg.warnings().len(), 1);
        assert!(matches!(
            SynthConfig { categories: 9, ..cfg }.validate(),
            Err(EmoError::InvalidConfig(_))
        ));
    }

    #[test]
    fn dataset_bytes_round_trip() {
        let ds = generate_synthetic(&tiny()).unwrap();
        let bytes = dataset_to_bytes(&ds);
        assert_eq!(&bytes[..8], MAGIC);
        let back = dataset_from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(dataset_to_bytes(&back), bytes);
    }

    #[test]
    fn names_round_trip() {
        let ds = generate_synthetic(&tiny()).unwrap();
        let names: Vec<String> = (0..ds.len()).map(|i| format!("img_{i}_é")).collect();
        let named = EmbeddingDataset::new(
            ds.visual().clone(),
            ds.textual().clone(),
            ds.labels().to_vec(),
            ds.classes(),
            Some(names),
        )
        .unwrap();
        assert_eq!(dataset_from_bytes(&dataset_to_bytes(&named)).unwrap(), named);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = dataset_to_bytes(&generate_synthetic(&tiny()).unwrap());
        for cut in [3, 10, 20, bytes.len() - 1] {
            match dataset_from_bytes(&bytes[..cut]) {
                Err(EmoError::FormatError { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            dataset_from_bytes(&extra),
            Err(EmoError::FormatError { offset, .. }) if offset as usize == bytes.len()
        ));
    }

    #[test]
    fn future_version_rejected() {
        let manifest = serde_json::json!({
            "format_version": 999, "kind": "dataset", "N": 0, "d_v": 1, "d_t": 1, "m": 1, "has_names": false
        });
        let bytes = write_container(&manifest, &[]);
        assert!(matches!(
            dataset_from_bytes(&bytes),
            Err(EmoError::VersionError { found: 999, expected: 1 })
        ));
    }

    #[test]
    fn bad_magic_and_label_range() {
        assert!(matches!(
            dataset_from_bytes(b"NOTMAGIC\0\0\0\0"),
            Err(EmoError::FormatError { offset: 0, .. })
        ));
        let manifest = serde_json::json!({
            "format_version": 1, "kind": "dataset", "N": 1, "d_v": 1, "d_t": 1, "m": 2, "has_names": false
        });
        let mut payload = Vec::new();
        push_f32s(&mut payload, &[1.0, 1.0]);
        payload.extend_from_slice(&5u32.to_le_bytes());
        assert!(matches!(
            dataset_from_bytes(&write_container(&manifest, &payload)),
            Err(EmoError::IndexOutOfRange { index: 5, len: 2 })
        ));
    }

    #[test]
    fn json_lines_fallback() {
        let text = "{\"classes\": 3}\n{\"visual\": [1, 0], \"textual\": [0, 1], \"label\": 2, \"name\": \"a\"}\n\n{\"visual\": [0.5, 0.5], \"textual\": [1, 0], \"label\": 0}\n";
        let ds = dataset_from_bytes(text.as_bytes()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.classes(), 3);
        assert_eq!(ds.labels(), &[2, 0]);
        assert_eq!(ds.names().unwrap(), &["a".to_string(), String::new()]);
        let bad = "{\"visual\": [1], \"textual\": [1], \"label\": 0}\n{\"visual\": [1, 2], \"textual\": [1], \"label\": 0}\n";
        assert!(matches!(
            dataset_from_bytes(bad.as_bytes()),
            Err(EmoError::FormatError { .. })
        ));
    }

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = Rng::new(3);
        let cfg = FusionConfig {
            visual_dim: 8,
            text_dim: 8,
            head_hidden: 4,
            gate_hidden: 4,
            classes: 3,
        };
        let net = FusionNet::init(&cfg, &mut rng).unwrap();
        let mut bank = PrototypeBank::orthogonal(4, 8, 0.3, 0.7, &mut rng).unwrap();
        bank.update_usage(&[0, 1, 1, 3]).unwrap();
        let mapper = Mapper::init_with_hidden(8, 5, 6, &mut rng).unwrap();
        let guidance = GuidanceConfig::new(8, 2, &mut rng);
        Checkpoint {
            net,
            bank,
            mapper: Some(mapper),
            guidance: Some(guidance),
            train_config: TrainConfig {
                seed: 1234,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn checkpoint_round_trip_is_stable() {
        let ck = sample_checkpoint();
        let bytes = checkpoint_to_bytes(&ck);
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(checkpoint_to_bytes(&back), bytes);
        assert_eq!(back.train_config.seed, 1234);
        assert_eq!(back.bank.usage(), ck.bank.usage());
        for (a, b) in back.net.w1.as_slice().iter().zip(ck.net.w1.as_slice()) {
            assert_eq!(*a as f32, *b as f32);
        }
        let q: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        assert_eq!(back.bank.assign(&q).unwrap().0, ck.bank.assign(&q).unwrap().0);
        let (manifest, _) = read_container(&bytes, KIND_CHECKPOINT).unwrap();
        assert_eq!(manifest["seed"], 1234);
    }

    #[test]
    fn checkpoint_without_optional_parts() {
        let ck = Checkpoint {
            mapper: None,
            guidance: None,
            ..sample_checkpoint()
        };
        let back = checkpoint_from_bytes(&checkpoint_to_bytes(&ck)).unwrap();
        assert!(back.mapper.is_none() && back.guidance.is_none());
    }

    #[test]
    fn zero_prototype_row_rejected() {
        let ck = sample_checkpoint();
        let bytes = checkpoint_to_bytes(&ck);
        let (manifest, r) = read_container(&bytes, KIND_CHECKPOINT).unwrap();
        let m: CheckpointManifest = parse_manifest(manifest).unwrap();
        let mut offset = r.pos;
        for b in &m.blocks {
            if b.name == "bank.prototypes" {
                break;
            }
            offset += 4 * b.rows * b.cols;
        }
        let mut corrupt = bytes.clone();
        corrupt[offset..offset + 4 * 8].fill(0);
        assert!(matches!(
            checkpoint_from_bytes(&corrupt),
            Err(EmoError::InvariantViolation(_))
        ));
    }

    #[test]
    fn kind_mismatch_rejected() {
        let bytes = dataset_to_bytes(&generate_synthetic(&tiny()).unwrap());
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(EmoError::FormatError { .. })));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&tiny()).unwrap();
        let path = dir.path().join("d.emo");
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
        assert!(matches!(load_dataset(dir.path().join("missing")), Err(EmoError::Io(_))));
        let ck = sample_checkpoint();
        let cpath = dir.path().join("c.emo");
        save_checkpoint(&ck, &cpath).unwrap();
        assert_eq!(checkpoint_to_bytes(&load_checkpoint(&cpath).unwrap()), checkpoint_to_bytes(&ck));
    }
}
