//! Split model: base layers (aggregated by the server) followed by
//! personalization layers (retained on each client).

mod format;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, LayerSpec};
use crate::tensor::{Element, Tensor};

pub use format::{deserialize, fnv1a32, peek_header, serialize, serialized_len, FileHeader, MAGIC, VERSION};

/// Named architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// frame_diff, 2 conv, flatten, 2 dense over a `[16, 8, 8]` chunk.
    Mini,
    /// frame_diff, 5 conv, flatten, 3 dense over a `[16, 32, 32]` chunk.
    #[serde(rename = "diffgated53")]
    DiffGated53,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Mini => "mini",
            Arch::DiffGated53 => "diffgated53",
        }
    }

    /// Default per-sample input `[frames, height, width]`.
    pub fn input_dims(self) -> [usize; 3] {
        match self {
            Arch::Mini => [16, 8, 8],
            Arch::DiffGated53 => [16, 32, 32],
        }
    }

    pub fn layers(self) -> Vec<LayerSpec> {
        match self {
            Arch::Mini => vec![
                LayerSpec::FrameDiff,
                LayerSpec::conv(15, 8, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::conv(8, 8, 3, 2, 1),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::dense(8 * 4 * 4, 32),
                LayerSpec::Relu,
                LayerSpec::dense(32, 2),
            ],
            Arch::DiffGated53 => {
                let channels = [15, 16, 24, 32, 32, 32];
                let strides = [1, 2, 1, 2, 1];
                let mut layers = vec![LayerSpec::FrameDiff];
                for (i, &stride) in strides.iter().enumerate() {
                    layers.push(LayerSpec::conv(channels[i], channels[i + 1], 3, stride, 1));
                    layers.push(LayerSpec::Relu);
                }
                layers.push(LayerSpec::Flatten);
                // 32x32 -> 32 -> 16 -> 16 -> 8 -> 8
                layers.push(LayerSpec::dense(32 * 8 * 8, 128));
                layers.push(LayerSpec::Relu);
                layers.push(LayerSpec::dense(128, 32));
                layers.push(LayerSpec::Relu);
                layers.push(LayerSpec::dense(32, 2));
                layers
            }
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mini" => Ok(Arch::Mini),
            "diffgated53" => Ok(Arch::DiffGated53),
            other => Err(Error::config("arch", format!("unknown architecture `{other}`"))),
        }
    }
}

/// Which slice of a model (or which kind of payload) a [`ParamSet`] carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PartitionTag {
    Base,
    Personal,
    Full,
    /// Reserved for exported datasets.
    Dataset,
}

impl PartitionTag {
    pub fn code(self) -> u8 {
        match self {
            PartitionTag::Base => 0,
            PartitionTag::Personal => 1,
            PartitionTag::Full => 2,
            PartitionTag::Dataset => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(PartitionTag::Base),
            1 => Some(PartitionTag::Personal),
            2 => Some(PartitionTag::Full),
            3 => Some(PartitionTag::Dataset),
            _ => None,
        }
    }
}

/// Parses `"<layer>.<weight|bias>"` into `(layer, is_bias)`.
pub fn parse_param_name(name: &str) -> Option<(usize, bool)> {
    let (layer, kind) = name.split_once('.')?;
    let layer = layer.parse().ok()?;
    match kind {
        "weight" => Some((layer, false)),
        "bias" => Some((layer, true)),
        _ => None,
    }
}

pub fn param_name(layer: usize, bias: bool) -> String {
    format!("{layer}.{}", if bias { "bias" } else { "weight" })
}

/// Ordered named tensors tagged with the partition they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    tag: PartitionTag,
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Element> ParamSet<T> {
    /// Names must be unique; parameter partitions additionally require
    /// `<layer>.<weight|bias>` names in layer order.
    pub fn new(tag: PartitionTag, entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (name, _) in &entries {
            if !seen.insert(name.as_str()) {
                return Err(Error::IncompatibleParams(format!("duplicate tensor name `{name}`")));
            }
        }
        if tag != PartitionTag::Dataset {
            let mut prev: Option<(usize, bool)> = None;
            for (name, _) in &entries {
                let key = parse_param_name(name).ok_or_else(|| {
                    Error::IncompatibleParams(format!("`{name}` is not a parameter name"))
                })?;
                if prev.is_some_and(|p| p >= key) {
                    return Err(Error::IncompatibleParams(format!(
                        "`{name}` is out of layer order"
                    )));
                }
                prev = Some(key);
            }
        }
        Ok(ParamSet { tag, entries })
    }

    pub fn empty(tag: PartitionTag) -> Self {
        ParamSet { tag, entries: Vec::new() }
    }

    pub fn tag(&self) -> PartitionTag {
        self.tag
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<(String, Tensor<T>)> {
        self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Same tag, names and dims, in the same order.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.tag == other.tag
            && self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ta), (b, tb))| a == b && ta.dims() == tb.dims())
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.tag == other.tag
            && self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ta), (b, tb))| a == b && ta.bit_eq(tb))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if !self.same_layout(other) {
            return Err(Error::IncompatibleParams("parameter sets differ in layout".into()));
        }
        self.tensors()
            .zip(other.tensors())
            .try_fold(0.0f64, |m, (a, b)| Ok(m.max(a.max_abs_diff(b)?)))
    }
}

/// Ordered layer stack with a split index: layers `[0, split)` are base,
/// `[split, end)` are personalization.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel<T> {
    specs: Vec<LayerSpec>,
    input_dims: [usize; 3],
    split_index: usize,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

impl<T: Element> SplitModel<T> {
    pub fn new(
        specs: Vec<LayerSpec>,
        input_dims: [usize; 3],
        split_index: usize,
        params: Vec<Tensor<T>>,
    ) -> Result<Self> {
        nn::infer_shapes(input_dims, &specs)?;
        nn::check_params(&specs, &params)?;
        validate_split(&specs, split_index)?;
        let names = specs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.has_params())
            .flat_map(|(i, _)| [param_name(i, false), param_name(i, true)])
            .collect();
        Ok(SplitModel {
            specs,
            input_dims,
            split_index,
            names,
            params,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.input_dims
    }

    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Replaces all parameters at once; dims must match.
    pub fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        nn::check_params(&self.specs, &params)?;
        self.params = params;
        Ok(())
    }

    /// True when parameter `i` (in parameter order) belongs to the base partition.
    pub fn is_base_param(&self, i: usize) -> bool {
        let (layer, _) = parse_param_name(&self.names[i]).expect("names are generated");
        layer < self.split_index
    }

    pub fn base_mask(&self) -> Vec<bool> {
        (0..self.params.len()).map(|i| self.is_base_param(i)).collect()
    }

    pub fn base_names(&self) -> Vec<&str> {
        self.partition_names(true)
    }

    pub fn personal_names(&self) -> Vec<&str> {
        self.partition_names(false)
    }

    fn partition_names(&self, base: bool) -> Vec<&str> {
        (0..self.names.len())
            .filter(|&i| self.is_base_param(i) == base)
            .map(|i| self.names[i].as_str())
            .collect()
    }

    pub fn full(&self) -> ParamSet<T> {
        ParamSet {
            tag: PartitionTag::Full,
            entries: self.names.iter().cloned().zip(self.params.iter().cloned()).collect(),
        }
    }

    fn partition(&self, tag: PartitionTag, base: bool) -> ParamSet<T> {
        ParamSet {
            tag,
            entries: (0..self.params.len())
                .filter(|&i| self.is_base_param(i) == base)
                .map(|i| (self.names[i].clone(), self.params[i].clone()))
                .collect(),
        }
    }

    pub fn base(&self) -> ParamSet<T> {
        self.partition(PartitionTag::Base, true)
    }

    pub fn personal(&self) -> ParamSet<T> {
        self.partition(PartitionTag::Personal, false)
    }

    /// Overwrites the tensors of one partition (or all of them for `Full`).
    /// Either every tensor is replaced or, on error, none is.
    fn load_partition(&mut self, set: &ParamSet<T>) -> Result<()> {
        let idx: Vec<usize> = match set.tag {
            PartitionTag::Base => (0..self.params.len()).filter(|&i| self.is_base_param(i)).collect(),
            PartitionTag::Personal => {
                (0..self.params.len()).filter(|&i| !self.is_base_param(i)).collect()
            }
            PartitionTag::Full => (0..self.params.len()).collect(),
            PartitionTag::Dataset => {
                return Err(Error::IncompatibleParams("cannot load a dataset as parameters".into()))
            }
        };
        if idx.len() != set.entries.len() {
            return Err(Error::IncompatibleParams(format!(
                "{:?} partition has {} tensors, got {}",
                set.tag,
                idx.len(),
                set.entries.len()
            )));
        }
        for (&i, (name, t)) in idx.iter().zip(&set.entries) {
            if *name != self.names[i] || t.dims() != self.params[i].dims() {
                return Err(Error::IncompatibleParams(format!(
                    "expected `{}` {:?}, got `{name}` {:?}",
                    self.names[i],
                    self.params[i].dims(),
                    t.dims()
                )));
            }
        }
        for (&i, (_, t)) in idx.iter().zip(&set.entries) {
            self.params[i] = t.clone();
        }
        Ok(())
    }

    pub fn load(&mut self, set: &ParamSet<T>) -> Result<()> {
        self.load_partition(set)
    }
}

fn validate_split(specs: &[LayerSpec], split: usize) -> Result<()> {
    if split == 0 || split >= specs.len() {
        return Err(Error::InvalidArchitecture(format!(
            "split index {split} must lie strictly inside 0..{}",
            specs.len()
        )));
    }
    if !matches!(specs[split], LayerSpec::Dense { .. }) {
        return Err(Error::InvalidArchitecture(format!(
            "split index {split} must point at the first dense layer"
        )));
    }
    if let Some(i) = specs[..split].iter().position(|s| matches!(s, LayerSpec::Dense { .. })) {
        return Err(Error::InvalidArchitecture(format!(
            "dense layer {i} precedes the split at {split}"
        )));
    }
    if let Some(i) = specs[split..]
        .iter()
        .position(|s| matches!(s, LayerSpec::Conv2d(_) | LayerSpec::FrameDiff | LayerSpec::Flatten))
    {
        return Err(Error::InvalidArchitecture(format!(
            "{} layer {} follows the split at {split}",
            specs[split + i].kind(),
            split + i
        )));
    }
    if !specs[..split].iter().any(LayerSpec::has_params) {
        return Err(Error::InvalidArchitecture("base partition has no parameters".into()));
    }
    Ok(())
}

/// Builds a named architecture with seeded initialization; the split falls
/// at the first dense layer.
pub fn build_model<T: Element>(arch: Arch, seed: u64) -> SplitModel<T> {
    let specs = arch.layers();
    let split = specs
        .iter()
        .position(|s| matches!(s, LayerSpec::Dense { .. }))
        .expect("every architecture has a dense head");
    let params = nn::init_params(&specs, seed);
    SplitModel::new(specs, arch.input_dims(), split, params).expect("built-in architectures are valid")
}

pub fn split_params<T: Element>(model: &SplitModel<T>) -> (ParamSet<T>, ParamSet<T>) {
    (model.base(), model.personal())
}

/// Reassembles a full set from its base and personal halves.
pub fn merge<T: Element>(base: &ParamSet<T>, personal: &ParamSet<T>) -> Result<ParamSet<T>> {
    if base.tag != PartitionTag::Base || personal.tag != PartitionTag::Personal {
        return Err(Error::IncompatibleParams(format!(
            "merge needs base + personal, got {:?} + {:?}",
            base.tag, personal.tag
        )));
    }
    let mut entries: Vec<_> = base.entries.iter().chain(&personal.entries).cloned().collect();
    entries.sort_by_key(|(n, _)| parse_param_name(n));
    ParamSet::new(PartitionTag::Full, entries)
}

/// Returns a copy of `model` carrying `base` as its base partition; personal
/// tensors are untouched. On error `model` is unchanged.
pub fn load_base<T: Element>(model: &SplitModel<T>, base: &ParamSet<T>) -> Result<SplitModel<T>> {
    if base.tag != PartitionTag::Base {
        return Err(Error::IncompatibleParams(format!(
            "expected a base partition, got {:?}",
            base.tag
        )));
    }
    let mut out = model.clone();
    out.load_partition(base)?;
    Ok(out)
}

pub fn load_personal<T: Element>(
    model: &SplitModel<T>,
    personal: &ParamSet<T>,
) -> Result<SplitModel<T>> {
    if personal.tag != PartitionTag::Personal {
        return Err(Error::IncompatibleParams(format!(
            "expected a personal partition, got {:?}",
            personal.tag
        )));
    }
    let mut out = model.clone();
    out.load_partition(personal)?;
    Ok(out)
}
