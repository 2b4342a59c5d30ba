//! Cross-modal datasets: a synthetic generator with a global modality gap,
//! seen/unseen class splits, and the `OANDS1` binary file format.
//!
//! File layout (little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 6 | magic `OANDS1` |
//! | 4 | u32 instance count |
//! | 4 | u32 feature dimension |
//! | 4 | u32 class count |
//! | per instance | u32 class id, u8 modality (0 sketch, 1 image), `d_in` × f64 features |

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{OanError, Result};
use crate::modality::Modality;
use crate::rng;

pub const DATASET_MAGIC: &[u8; 6] = b"OANDS1";

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub features: Vec<f64>,
    pub class_id: usize,
    pub modality: Modality,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossModalDataset {
    instances: Vec<Instance>,
    d_in: usize,
    num_classes: usize,
}

impl CrossModalDataset {
    /// Validates feature widths, class ids, and that each class has both modalities.
    pub fn new(instances: Vec<Instance>, num_classes: usize) -> Result<Self> {
        let d_in = instances.first().map_or(0, |i| i.features.len());
        if d_in == 0 {
            return Err(OanError::config("dataset needs instances with non-empty features"));
        }
        let mut seen = vec![[false; 2]; num_classes];
        for (i, inst) in instances.iter().enumerate() {
            if inst.features.len() != d_in {
                return Err(OanError::Shape {
                    op: "dataset instance",
                    left: (i, inst.features.len()),
                    right: (i, d_in),
                });
            }
            if inst.class_id >= num_classes {
                return Err(OanError::Label {
                    row: i,
                    label: inst.class_id,
                    classes: num_classes,
                });
            }
            seen[inst.class_id][inst.modality.index()] = true;
        }
        if let Some(c) = seen.iter().position(|m| !(m[0] && m[1])) {
            return Err(OanError::config(format!("class {c} lacks a sketch or an image instance")));
        }
        Ok(Self {
            instances,
            d_in,
            num_classes,
        })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Instance count per `(class, modality)`.
    pub fn counts(&self) -> Vec<[usize; 2]> {
        let mut c = vec![[0; 2]; self.num_classes];
        for inst in &self.instances {
            c[inst.class_id][inst.modality.index()] += 1;
        }
        c
    }

    /// Stacks the features of `ids` into a tensor.
    pub fn features(&self, ids: &[usize]) -> Tensor<f64> {
        let data = ids.iter().flat_map(|&i| self.instances[i].features.iter().copied()).collect();
        Tensor::new(ids.len(), self.d_in, data).expect("uniform feature width")
    }

    pub fn labels(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().map(|&i| self.instances[i].class_id).collect()
    }

    pub fn modalities(&self, ids: &[usize]) -> Vec<Modality> {
        ids.iter().map(|&i| self.instances[i].modality).collect()
    }

    /// Indices of instances whose class is in `classes` and modality matches.
    pub fn select(&self, classes: &[usize], modality: Option<Modality>) -> Vec<usize> {
        let set: BTreeSet<usize> = classes.iter().copied().collect();
        (0..self.instances.len())
            .filter(|&i| {
                let inst = &self.instances[i];
                set.contains(&inst.class_id) && modality.is_none_or(|m| m == inst.modality)
            })
            .collect()
    }

    /// Shuffled training batches over seen-class instances of both modalities.
    /// A trailing single-instance batch is dropped.
    pub fn training_batches(&self, split: &SeenUnseenSplit, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
        if batch_size < 2 {
            return Err(OanError::config("batch_size must be >= 2"));
        }
        split.check_covers(self.num_classes)?;
        let mut ids = self.select(split.seen(), None);
        ids.shuffle(&mut rng::seeded(seed));
        let mut batches: Vec<Vec<usize>> = ids.chunks(batch_size).map(<[usize]>::to_vec).collect();
        if batches.last().is_some_and(|b| b.len() < 2) {
            log::info!("dropping trailing batch with a single instance");
            batches.pop();
        }
        for b in &batches {
            if let Some(&i) = b.iter().find(|&&i| !split.is_seen(self.instances[i].class_id)) {
                return Err(OanError::config(format!(
                    "unseen class {} leaked into a training batch",
                    self.instances[i].class_id
                )));
            }
        }
        Ok(batches)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(18 + self.instances.len() * (5 + 8 * self.d_in));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&(self.instances.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.d_in as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        for inst in &self.instances {
            out.extend_from_slice(&(inst.class_id as u32).to_le_bytes());
            out.push(inst.modality.code());
            for v in &inst.features {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(6)?;
        if magic != DATASET_MAGIC {
            if magic.starts_with(&DATASET_MAGIC[..5]) {
                return Err(OanError::Version {
                    expected: "OANDS1".into(),
                    found: String::from_utf8_lossy(magic).into_owned(),
                });
            }
            return Err(OanError::Format {
                offset: 0,
                message: "missing OANDS magic".into(),
            });
        }
        let n = r.u32()? as usize;
        let d_in = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let expected = n.saturating_mul(5 + 8 * d_in);
        if r.remaining() != expected {
            return Err(OanError::Format {
                offset: r.offset(),
                message: format!("expected {expected} record bytes, found {}", r.remaining()),
            });
        }
        let mut instances = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.offset();
            let class_id = r.u32()? as usize;
            if class_id >= classes {
                return Err(OanError::Format {
                    offset: at,
                    message: format!("class id {class_id} >= class count {classes}"),
                });
            }
            let at = r.offset();
            let modality = Modality::from_code(r.u8()?).ok_or_else(|| OanError::Format {
                offset: at,
                message: "modality byte must be 0 or 1".into(),
            })?;
            let features = (0..d_in).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            instances.push(Instance {
                features,
                class_id,
                modality,
            });
        }
        Self::new(instances, classes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(|e| OanError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| OanError::io(&path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Little-endian cursor reporting byte offsets on failure.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(OanError::Format {
                offset: self.offset(),
                message: format!("truncated: need {n} bytes, {} left", self.remaining()),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub per_class_per_modality: usize,
    pub d_in: usize,
    pub modality_shift: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 15,
            per_class_per_modality: 20,
            d_in: 16,
            modality_shift: 0.5,
            noise_std: 0.1,
            seed: 1,
        }
    }
}

/// Class prototypes on the unit sphere; each modality adds its own fixed
/// unit offset scaled by `modality_shift`, plus isotropic Gaussian noise.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<CrossModalDataset> {
    if cfg.num_classes < 2 {
        return Err(OanError::config("synthetic data needs at least 2 classes"));
    }
    if cfg.per_class_per_modality == 0 || cfg.d_in == 0 {
        return Err(OanError::config("per-class count and d_in must be >= 1"));
    }
    if !(cfg.noise_std >= 0.0) || !cfg.noise_std.is_finite() {
        return Err(OanError::config(format!("noise_std must be >= 0, got {}", cfg.noise_std)));
    }
    if !cfg.modality_shift.is_finite() {
        return Err(OanError::config("modality_shift must be finite"));
    }
    let mut r = rng::seeded(cfg.seed);
    let prototypes: Vec<Vec<f64>> = (0..cfg.num_classes).map(|_| rng::unit_vector(&mut r, cfg.d_in)).collect();
    let offsets = [rng::unit_vector(&mut r, cfg.d_in), rng::unit_vector(&mut r, cfg.d_in)];

    let mut instances = Vec::with_capacity(cfg.num_classes * cfg.per_class_per_modality * 2);
    for (class_id, proto) in prototypes.iter().enumerate() {
        for modality in Modality::ALL {
            let off = &offsets[modality.index()];
            for _ in 0..cfg.per_class_per_modality {
                let features = proto
                    .iter()
                    .zip(off)
                    .map(|(&p, &o)| {
                        let noise = if cfg.noise_std > 0.0 {
                            cfg.noise_std * rng::normal(&mut r)
                        } else {
                            0.0
                        };
                        p + cfg.modality_shift * o + noise
                    })
                    .collect();
                instances.push(Instance {
                    features,
                    class_id,
                    modality,
                });
            }
        }
    }
    CrossModalDataset::new(instances, cfg.num_classes)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeenUnseenSplit {
    seen: Vec<usize>,
    unseen: Vec<usize>,
}

impl SeenUnseenSplit {
    /// Explicit split; the two sets must be disjoint.
    pub fn new(mut seen: Vec<usize>, mut unseen: Vec<usize>) -> Result<Self> {
        seen.sort_unstable();
        unseen.sort_unstable();
        seen.dedup();
        unseen.dedup();
        if seen.iter().any(|c| unseen.binary_search(c).is_ok()) {
            return Err(OanError::config("seen and unseen classes overlap"));
        }
        if seen.is_empty() || unseen.is_empty() {
            return Err(OanError::config("split needs at least one seen and one unseen class"));
        }
        Ok(Self { seen, unseen })
    }

    pub fn seen(&self) -> &[usize] {
        &self.seen
    }

    pub fn unseen(&self) -> &[usize] {
        &self.unseen
    }

    pub fn is_seen(&self, class: usize) -> bool {
        self.seen.binary_search(&class).is_ok()
    }

    /// Position of a seen class among the sorted seen classes.
    pub fn seen_index(&self, class: usize) -> Option<usize> {
        self.seen.binary_search(&class).ok()
    }

    fn check_covers(&self, num_classes: usize) -> Result<()> {
        if self.seen.len() + self.unseen.len() != num_classes
            || self.seen.iter().chain(&self.unseen).any(|&c| c >= num_classes)
        {
            return Err(OanError::config(format!(
                "split does not partition {num_classes} classes"
            )));
        }
        Ok(())
    }
}

/// Uniformly random partition with `num_unseen` held-out classes.
pub fn make_split(num_classes: usize, num_unseen: usize, seed: u64) -> Result<SeenUnseenSplit> {
    if num_unseen == 0 || num_unseen >= num_classes {
        return Err(OanError::config(format!(
            "num_unseen must be in [1, {}), got {num_unseen}",
            num_classes
        )));
    }
    let mut classes: Vec<usize> = (0..num_classes).collect();
    classes.shuffle(&mut rng::seeded(seed));
    let unseen = classes[..num_unseen].to_vec();
    let seen = classes[num_unseen..].to_vec();
    SeenUnseenSplit::new(seen, unseen)
}
