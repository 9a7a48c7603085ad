//! Synthetic surveillance-style chunks, the fixed client topologies, and
//! stratified train/test splitting.
//!
//! Each chunk shows a bright square blob drifting over a noisy background.
//! "Fight" chunks move fast, "NonFight" chunks barely move, so the label is
//! carried by frame-to-frame differences. Clients differ in background level,
//! blob size and speed scaling on top of their label counts.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{ParamSet, PartitionTag};
use crate::nn::Batch;
use crate::seed::{derive_seed, fnv1a64, STREAM_DATA};
use crate::tensor::{Element, Tensor};

pub const LABEL_NONFIGHT: usize = 0;
pub const LABEL_FIGHT: usize = 1;

/// Pixel noise standard deviation.
pub const NOISE_SIGMA: f64 = 0.05;
/// Per-frame displacement scale in pixels, before the client's speed scaling.
pub const FIGHT_SPEED: f64 = 2.0;
pub const NONFIGHT_SPEED: f64 = 0.25;
pub const BLOB_LEVEL: f64 = 1.0;

/// Frames per chunk.
pub const CHUNK_FRAMES: usize = 16;

/// Number of non-overlapping `chunk_size`-frame chunks in a video.
pub fn chunks_per_video(frame_count: usize, chunk_size: usize) -> Result<usize> {
    if chunk_size == 0 {
        return Err(Error::config("chunk_size", "must be at least 1"));
    }
    Ok(frame_count / chunk_size)
}

/// Feature skew applied to one client's data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Skew {
    pub bg_offset: f64,
    pub blob_radius: usize,
    pub speed_scale: f64,
}

impl Default for Skew {
    fn default() -> Self {
        Skew {
            bg_offset: 0.0,
            blob_radius: 1,
            speed_scale: 1.0,
        }
    }
}

impl Skew {
    /// Topology skew: background, blob size and speed step with the client id.
    pub fn for_client(client_id: u32) -> Self {
        Skew {
            bg_offset: 0.1 * client_id as f64,
            blob_radius: 1 + (client_id as usize % 3),
            speed_scale: 1.0 + 0.25 * client_id as f64,
        }
    }

    pub fn validate(&self, field: &str, dims: [usize; 3]) -> Result<()> {
        if !(0.0..1.0).contains(&self.bg_offset) {
            return Err(Error::config(format!("{field}.bg_offset"), "must lie in [0, 1)"));
        }
        if self.blob_radius < 1 {
            return Err(Error::config(format!("{field}.blob_radius"), "must be at least 1"));
        }
        if !(self.speed_scale > 0.0 && self.speed_scale.is_finite()) {
            return Err(Error::config(format!("{field}.speed_scale"), "must be positive"));
        }
        let side = 2 * self.blob_radius + 1;
        if side > dims[1] || side > dims[2] {
            return Err(Error::config(
                format!("{field}.blob_radius"),
                format!("blob of side {side} does not fit a {}x{} frame", dims[1], dims[2]),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientSpec {
    pub client_id: u32,
    pub fight_count: usize,
    pub nonfight_count: usize,
    #[serde(default)]
    pub skew: Skew,
}

impl ClientSpec {
    pub fn total(&self) -> usize {
        self.fight_count + self.nonfight_count
    }
}

/// The client label distributions of the three reference experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyFixture {
    Table1,
    Table2,
    Table3,
}

impl TopologyFixture {
    pub const ALL: [TopologyFixture; 3] = [Self::Table1, Self::Table2, Self::Table3];

    pub fn name(self) -> &'static str {
        match self {
            Self::Table1 => "table1",
            Self::Table2 => "table2",
            Self::Table3 => "table3",
        }
    }

    /// `(fight, nonfight)` per client, client ids starting at 1.
    pub fn clients(self) -> &'static [(usize, usize)] {
        match self {
            Self::Table1 => &[(900, 900), (900, 900)],
            Self::Table2 => &[(641, 27), (655, 1305), (504, 468)],
            Self::Table3 => &[(570, 402), (151, 49), (1019, 777), (695, 1207)],
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Self::Table1 => "Balanced, RWF dataset",
            Self::Table2 => "Imbalanced, RWF dataset",
            Self::Table3 => "Imbalanced, RWF & Crowd Violence datasets",
        }
    }
}

impl fmt::Display for TopologyFixture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TopologyFixture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config("topology", format!("unknown fixture `{s}`")))
    }
}

/// Exact rational scale factor in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scale {
    num: u64,
    den: u64,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Scale {
    pub const ONE: Scale = Scale { num: 1, den: 1 };

    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 || num == 0 || num > den {
            return Err(Error::config("scale", format!("{num}/{den} is not in (0, 1]")));
        }
        let g = gcd(num, den);
        Ok(Scale { num: num / g, den: den / g })
    }

    /// Parses `"p/q"` or a plain decimal such as `"0.05"` exactly.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::config("scale", format!("cannot parse `{s}` as a rational"));
        if let Some((p, q)) = s.split_once('/') {
            let p = p.trim().parse().map_err(|_| bad())?;
            let q = q.trim().parse().map_err(|_| bad())?;
            return Self::new(p, q);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 18 || (int.is_empty() && frac.is_empty()) {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac_v: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let num = int
            .checked_mul(den)
            .and_then(|v| v.checked_add(frac_v))
            .ok_or_else(bad)?;
        Self::new(num, den)
    }

    /// Uses the shortest decimal that round-trips `v`.
    pub fn from_f64(v: f64) -> Result<Self> {
        if !v.is_finite() {
            return Err(Error::config("scale", "must be finite"));
        }
        Self::parse(&format!("{v}"))
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `round(scale * count)`, halves rounding up.
    pub fn apply(self, count: usize) -> usize {
        let twice = 2 * count as u128 * self.num as u128 + self.den as u128;
        (twice / (2 * self.den as u128)) as usize
    }

    fn is_decimal(self) -> bool {
        let mut d = self.den;
        while d.is_multiple_of(2) {
            d /= 2;
        }
        while d.is_multiple_of(5) {
            d /= 5;
        }
        d == 1
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_decimal() {
            write!(f, "{}", self.as_f64())
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl Serialize for Scale {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_decimal() {
            s.serialize_f64(self.as_f64())
        } else {
            s.serialize_str(&self.to_string())
        }
    }
}

impl<'de> Deserialize<'de> for Scale {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        let parsed = match Raw::deserialize(d)? {
            Raw::Num(v) => Scale::from_f64(v),
            Raw::Text(s) => Scale::parse(&s),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

/// Generator identity recorded with every dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetMeta {
    pub spec_id: String,
    pub seed: u64,
}

/// Labelled chunks stored as one `[n, F, H, W]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkDataset<T> {
    inputs: Tensor<T>,
    labels: Vec<usize>,
    pub meta: DatasetMeta,
}

impl<T: Element> ChunkDataset<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>, meta: DatasetMeta) -> Result<Self> {
        Batch::new(inputs.clone(), labels.clone())?;
        Ok(ChunkDataset { inputs, labels, meta })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor<T> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_dims(&self) -> [usize; 3] {
        let d = self.inputs.dims();
        [d[1], d[2], d[3]]
    }

    /// `(nonfight, fight)` counts.
    pub fn label_counts(&self) -> (usize, usize) {
        let fight = self.labels.iter().filter(|&&l| l == LABEL_FIGHT).count();
        (self.len() - fight, fight)
    }

    pub fn sample(&self, i: usize) -> (&[T], usize) {
        let row = self.inputs.len() / self.len();
        (&self.inputs.data()[i * row..(i + 1) * row], self.labels[i])
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch<T>> {
        let inputs = self.inputs.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Batch::new(inputs, labels)
    }

    pub fn full_batch(&self) -> Batch<T> {
        Batch {
            inputs: self.inputs.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(ChunkDataset {
            inputs: self.inputs.gather_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            meta: self.meta.clone(),
        })
    }

    /// Container form: tensor `inputs` `[n, F, H, W]` and `labels` `[n]`.
    pub fn to_param_set(&self) -> ParamSet<T> {
        let labels = Tensor::new(
            vec![self.len()],
            self.labels.iter().map(|&l| T::from_f64(l as f64)).collect(),
        )
        .expect("dataset is non-empty");
        ParamSet::new(
            PartitionTag::Dataset,
            vec![("inputs".into(), self.inputs.clone()), ("labels".into(), labels)],
        )
        .expect("names are distinct")
    }

    pub fn from_param_set(set: &ParamSet<T>, meta: DatasetMeta) -> Result<Self> {
        if set.tag() != PartitionTag::Dataset {
            return Err(Error::IncompatibleParams(format!("expected a dataset, got {:?}", set.tag())));
        }
        let inputs = set
            .get("inputs")
            .ok_or_else(|| Error::IncompatibleParams("dataset has no `inputs` tensor".into()))?;
        let labels = set
            .get("labels")
            .ok_or_else(|| Error::IncompatibleParams("dataset has no `labels` tensor".into()))?;
        let labels = labels
            .data()
            .iter()
            .map(|v| match v.to_f64() {
                0.0 => Ok(LABEL_NONFIGHT),
                1.0 => Ok(LABEL_FIGHT),
                other => Err(Error::IncompatibleParams(format!("label {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(inputs.clone(), labels, meta)
    }
}

fn validate_dims(dims: [usize; 3]) -> Result<()> {
    let [f, h, w] = dims;
    if f < 2 {
        return Err(Error::config("dims", format!("need at least 2 frames, got {f}")));
    }
    if h < 4 || w < 4 {
        return Err(Error::config("dims", format!("frames must be at least 4x4, got {h}x{w}")));
    }
    Ok(())
}

/// Folds `x` back into `[lo, hi]` by mirror reflection.
fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let y = (x - lo).rem_euclid(2.0 * span);
    lo + if y > span { 2.0 * span - y } else { y }
}

/// Renders one chunk into `out` (`F*H*W` values) and returns the sampled
/// per-frame displacement magnitudes.
fn render_chunk(
    rng: &mut ChaCha8Rng,
    dims: [usize; 3],
    skew: &Skew,
    label: usize,
    out: &mut Vec<f64>,
) -> Vec<f64> {
    let [frames, h, w] = dims;
    let r = skew.blob_radius as f64;
    let (x_hi, y_hi) = ((w - 1) as f64 - r, (h - 1) as f64 - r);
    let mut cx = if x_hi > r { rng.random_range(r..=x_hi) } else { r };
    let mut cy = if y_hi > r { rng.random_range(r..=y_hi) } else { r };
    let base = if label == LABEL_FIGHT { FIGHT_SPEED } else { NONFIGHT_SPEED };
    let step = Normal::new(0.0, skew.speed_scale * base).expect("positive sigma");
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    let rad = skew.blob_radius as i64;
    let mut steps = Vec::with_capacity(frames - 1);
    for t in 0..frames {
        let (bx, by) = (cx.round() as i64, cy.round() as i64);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let inside = (x - bx).abs() <= rad && (y - by).abs() <= rad;
                let level = if inside { BLOB_LEVEL } else { skew.bg_offset };
                out.push((level + noise.sample(rng)).clamp(0.0, 1.0));
            }
        }
        if t + 1 < frames {
            let mag: f64 = step.sample(rng).abs();
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            cx = reflect(cx + mag * angle.cos(), r, x_hi);
            cy = reflect(cy + mag * angle.sin(), r, y_hi);
            steps.push(mag);
        }
    }
    steps
}

/// Like [`generate_client_data`], also returning each sample's mean sampled
/// per-frame blob displacement.
pub fn generate_with_motion<T: Element>(
    spec: &ClientSpec,
    dims: [usize; 3],
    seed: u64,
) -> Result<(ChunkDataset<T>, Vec<f64>)> {
    validate_dims(dims)?;
    spec.skew.validate("skew", dims)?;
    if spec.total() == 0 {
        return Err(Error::config(
            format!("clients[{}]", spec.client_id),
            "needs at least one sample",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.total();
    let labels: Vec<usize> = std::iter::repeat_n(LABEL_FIGHT, spec.fight_count)
        .chain(std::iter::repeat_n(LABEL_NONFIGHT, spec.nonfight_count))
        .collect();
    let mut pixels = Vec::with_capacity(n * dims.iter().product::<usize>());
    let mut motion = Vec::with_capacity(n);
    for &label in &labels {
        let steps = render_chunk(&mut rng, dims, &spec.skew, label, &mut pixels);
        motion.push(steps.iter().sum::<f64>() / steps.len() as f64);
    }
    let inputs = Tensor::new(
        vec![n, dims[0], dims[1], dims[2]],
        pixels.into_iter().map(T::from_f64).collect(),
    )?;
    let meta = DatasetMeta {
        spec_id: format!(
            "blob-v1:client={},fight={},nonfight={},bg={},radius={},speed={}",
            spec.client_id,
            spec.fight_count,
            spec.nonfight_count,
            spec.skew.bg_offset,
            spec.skew.blob_radius,
            spec.skew.speed_scale
        ),
        seed,
    };
    Ok((ChunkDataset::new(inputs, labels, meta)?, motion))
}

/// Renders `fight_count` Fight chunks followed by `nonfight_count` NonFight
/// chunks; a pure function of `(spec, dims, seed)`.
pub fn generate_client_data<T: Element>(
    spec: &ClientSpec,
    dims: [usize; 3],
    seed: u64,
) -> Result<ChunkDataset<T>> {
    Ok(generate_with_motion(spec, dims, seed)?.0)
}

/// Scales a topology's cells and attaches per-client skew. Errors when a
/// nonzero cell would round to zero samples.
pub fn scaled_specs(cells: &[(usize, usize)], scale: Scale) -> Result<Vec<ClientSpec>> {
    cells
        .iter()
        .enumerate()
        .map(|(i, &(fight, nonfight))| {
            let client_id = i as u32 + 1;
            let (f, nf) = (scale.apply(fight), scale.apply(nonfight));
            if (fight > 0 && f == 0) || (nonfight > 0 && nf == 0) {
                return Err(Error::config(
                    "scale",
                    format!("{scale} leaves client {client_id} with an empty class (cells {fight}/{nonfight})"),
                ));
            }
            Ok(ClientSpec {
                client_id,
                fight_count: f,
                nonfight_count: nf,
                skew: Skew::for_client(client_id),
            })
        })
        .collect()
}

/// Generates every client of a fixture, each from its own derived data seed.
pub fn build_topology<T: Element>(
    fixture: TopologyFixture,
    scale: Scale,
    dims: [usize; 3],
    seed: u64,
) -> Result<Vec<ChunkDataset<T>>> {
    generate_clients(&scaled_specs(fixture.clients(), scale)?, dims, seed)
}

pub fn generate_clients<T: Element>(
    specs: &[ClientSpec],
    dims: [usize; 3],
    seed: u64,
) -> Result<Vec<ChunkDataset<T>>> {
    specs
        .iter()
        .map(|s| generate_client_data(s, dims, derive_seed(seed, STREAM_DATA, s.client_id as u64)))
        .collect()
}

fn sample_hash<T: Element>(values: &[T], label: usize) -> u64 {
    let mut bytes = Vec::with_capacity(values.len() * 8 + 1);
    bytes.push(label as u8);
    for v in values {
        bytes.extend_from_slice(&v.to_bits_u64().to_le_bytes());
    }
    fnv1a64(&bytes)
}

/// Stratified split. Samples are first put into a canonical content order so
/// the result does not depend on the order of `ds`; then a seeded shuffle
/// picks `round(n_class * test_fraction)` test samples per class.
pub fn train_test_split<T: Element>(
    ds: &ChunkDataset<T>,
    test_fraction: f64,
    seed: u64,
) -> Result<(ChunkDataset<T>, ChunkDataset<T>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config("test_fraction", "must lie strictly between 0 and 1"));
    }
    let mut order: Vec<(usize, u64, usize)> = (0..ds.len())
        .map(|i| {
            let (x, l) = ds.sample(i);
            (l, sample_hash(x, l), i)
        })
        .collect();
    order.sort_unstable();
    let mut canonical: Vec<usize> = order.into_iter().map(|(_, _, i)| i).collect();
    canonical.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let (n0, n1) = ds.label_counts();
    let quota = |n: usize| (n as f64 * test_fraction + 0.5).floor() as usize;
    let mut want = [quota(n0), quota(n1)];
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for i in canonical {
        let l = ds.labels[i];
        if want[l] > 0 {
            want[l] -= 1;
            test.push(i);
        } else {
            train.push(i);
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Split(format!(
            "{} samples ({n0} nonfight, {n1} fight) at fraction {test_fraction} leave an empty side",
            ds.len()
        )));
    }
    Ok((ds.subset(&train)?, ds.subset(&test)?))
}
