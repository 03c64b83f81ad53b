//! Training tuples (depth, extract mask, support mask, label), their
//! generation from simulated extractions, augmentation, splitting and the
//! binary dataset file.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Class, DepthImage, Grid, LabelImage, MaskImage};
use crate::render::{make_label, make_masks, render, visible_ids, CameraSpec, RenderError};
use crate::sim::{generate_scene, simulate_extraction, ObjectId, ObjectSet, Scene, ShelfSpec, SimConfig, SimError};

pub const MAGIC: &[u8; 4] = b"SHPK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("invalid dataset configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordMeta {
    pub scene_seed: u64,
    pub object_set: ObjectSet,
    pub object_count: usize,
    pub extract_id: ObjectId,
    pub support_id: Option<ObjectId>,
    pub collapsed_ids: Vec<ObjectId>,
    #[serde(default)]
    pub augmented: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingRecord {
    pub depth: DepthImage,
    pub mask_extract: MaskImage,
    pub mask_support: MaskImage,
    pub label: LabelImage,
    pub meta: RecordMeta,
}

impl TrainingRecord {
    pub fn width(&self) -> usize {
        self.depth.width
    }

    pub fn height(&self) -> usize {
        self.depth.height
    }

    pub fn collapse_free(&self) -> bool {
        self.meta.collapsed_ids.is_empty()
    }

    /// Checks shapes and that label E/S pixels coincide with the masks.
    pub fn validate(&self) -> Result<(), String> {
        let d = &self.depth;
        if !(d.same_shape(&self.mask_extract) && d.same_shape(&self.mask_support) && d.same_shape(&self.label)) {
            return Err("images differ in resolution".into());
        }
        for i in 0..d.len() {
            let (e, s, l) = (self.mask_extract.data[i], self.mask_support.data[i], self.label.data[i]);
            if e > 1 || s > 1 || (e == 1 && s == 1) {
                return Err(format!("bad mask values at pixel {i}"));
            }
            if (l == Class::Extract) != (e == 1) || (l == Class::Support) != (s == 1) {
                return Err(format!("label and masks disagree at pixel {i}"));
            }
        }
        Ok(())
    }
}

/// Renders `scene`, simulates the action and labels the pre-extraction view.
pub fn generate_record(
    scene: &Scene,
    extract_id: ObjectId,
    support_id: Option<ObjectId>,
    camera: &CameraSpec,
    sim_config: &SimConfig,
) -> Result<TrainingRecord, DatasetError> {
    let (depth, instances) = render(scene, camera);
    let (mask_extract, mask_support) = make_masks(&instances, extract_id, support_id)?;
    let outcome = simulate_extraction(scene, extract_id, support_id, sim_config)?;
    let label = make_label(&instances, &outcome);
    Ok(TrainingRecord {
        depth,
        mask_extract,
        mask_support,
        label,
        meta: RecordMeta {
            scene_seed: scene.seed,
            object_set: scene.object_set,
            object_count: scene.objects.len(),
            extract_id,
            support_id,
            collapsed_ids: outcome.collapsed_ids,
            augmented: false,
        },
    })
}

/// Mirrors all four images left-right and marks the record augmented.
pub fn augment_flip(record: &TrainingRecord) -> TrainingRecord {
    TrainingRecord {
        depth: record.depth.flip_horizontal(),
        mask_extract: record.mask_extract.flip_horizontal(),
        mask_support: record.mask_support.flip_horizontal(),
        label: record.label.flip_horizontal(),
        meta: RecordMeta {
            augmented: !record.meta.augmented,
            ..record.meta.clone()
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.9,
            seed: 0,
        }
    }
}

/// Shuffled split. The train part is followed by a flipped copy of each of
/// its records; validation records are never augmented.
pub fn split(records: &[TrainingRecord], spec: &SplitSpec) -> (Vec<TrainingRecord>, Vec<TrainingRecord>) {
    assert!(
        spec.train_fraction > 0.0 && spec.train_fraction < 1.0,
        "train fraction must lie in (0, 1)"
    );
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = if n < 2 {
        n
    } else {
        ((n as f64 * spec.train_fraction).round() as usize).clamp(1, n - 1)
    };
    let mut train: Vec<TrainingRecord> = order[..n_train].iter().map(|&i| records[i].clone()).collect();
    let flipped: Vec<TrainingRecord> = train.iter().map(augment_flip).collect();
    train.extend(flipped);
    let val = order[n_train..].iter().map(|&i| records[i].clone()).collect();
    (train, val)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub scenes: usize,
    pub pairs_per_scene: usize,
    pub object_set: ObjectSet,
    pub object_count: usize,
    pub master_seed: u64,
    pub resolution: usize,
    pub shelf: ShelfSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scenes: 2000,
            pairs_per_scene: 1,
            object_set: ObjectSet::Varied,
            object_count: 6,
            master_seed: 0,
            resolution: 64,
            shelf: ShelfSpec::default(),
        }
    }
}

/// Seed of scene `index` under `master`: the splitmix64 output at counter
/// position `index`.
pub fn scene_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Up to `k` ordered (extract, support) pairs of distinct visible ids, drawn
/// uniformly without replacement.
pub fn sample_pairs(visible: &[ObjectId], k: usize, seed: u64) -> Vec<(ObjectId, ObjectId)> {
    let mut pairs: Vec<(ObjectId, ObjectId)> = visible
        .iter()
        .flat_map(|&e| visible.iter().filter(move |&&s| s != e).map(move |&s| (e, s)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a1f_5eed);
    let (chosen, _) = pairs.partial_shuffle(&mut rng, k);
    chosen.to_vec()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub records: usize,
    pub scenes: usize,
    pub collapse_free: usize,
    pub collapse_free_fraction: f64,
    /// Total pixels per class, in E, S, C, B order.
    pub class_pixels: [u64; 4],
    pub class_fractions: [f64; 4],
    /// Records containing at least one C pixel.
    pub records_with_collapse_pixels: usize,
}

pub fn summarize(records: &[TrainingRecord], scenes: usize) -> DatasetSummary {
    let mut s = DatasetSummary {
        records: records.len(),
        scenes,
        ..Default::default()
    };
    for r in records {
        let counts = r.label.class_counts();
        for (total, c) in s.class_pixels.iter_mut().zip(counts) {
            *total += c as u64;
        }
        s.collapse_free += usize::from(r.collapse_free());
        s.records_with_collapse_pixels += usize::from(counts[Class::Collapse as usize] > 0);
    }
    let total: u64 = s.class_pixels.iter().sum();
    if total > 0 {
        s.class_fractions = s.class_pixels.map(|c| c as f64 / total as f64);
    }
    if !records.is_empty() {
        s.collapse_free_fraction = s.collapse_free as f64 / records.len() as f64;
    }
    s
}

/// Generates every record of `config` in scene order. `progress` is called
/// after each scene with the number of scenes done.
pub fn generate_records(
    config: &DatasetConfig,
    sim: &SimConfig,
    mut progress: impl FnMut(usize),
) -> Result<Vec<TrainingRecord>, DatasetError> {
    if config.scenes == 0 || config.object_count == 0 || config.pairs_per_scene == 0 {
        return Err(DatasetError::InvalidConfig(
            "scenes, object_count and pairs_per_scene must be ≥ 1".into(),
        ));
    }
    let camera = CameraSpec::for_shelf(&config.shelf, config.resolution);
    camera.validate(&config.shelf)?;
    let mut records = Vec::with_capacity(config.scenes * config.pairs_per_scene);
    for i in 0..config.scenes {
        let seed = scene_seed(config.master_seed, i as u64);
        let scene = generate_scene(&config.shelf, config.object_set, config.object_count, seed, sim)?;
        let instances = render(&scene, &camera).1;
        for (e, s) in sample_pairs(&visible_ids(&instances), config.pairs_per_scene, seed) {
            records.push(generate_record(&scene, e, Some(s), &camera, sim)?);
        }
        progress(i + 1);
    }
    Ok(records)
}

/// Regenerates the label of a stored record from its metadata alone.
pub fn regenerate_label(
    meta: &RecordMeta,
    shelf: &ShelfSpec,
    resolution: usize,
    sim: &SimConfig,
) -> Result<LabelImage, DatasetError> {
    let scene = generate_scene(shelf, meta.object_set, meta.object_count, meta.scene_seed, sim)?;
    let camera = CameraSpec::for_shelf(shelf, resolution);
    let record = generate_record(&scene, meta.extract_id, meta.support_id, &camera, sim)?;
    Ok(if meta.augmented {
        record.label.flip_horizontal()
    } else {
        record.label
    })
}

pub fn encode_dataset(records: &[TrainingRecord]) -> Result<Vec<u8>, DatasetError> {
    let (h, w) = records.first().map_or((0, 0), |r| (r.height(), r.width()));
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(DatasetError::InvalidConfig("resolution exceeds u16".into()));
    }
    let mut out = Vec::with_capacity(20 + records.len() * (w * h * 7 + 200));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    for r in records {
        if r.height() != h || r.width() != w {
            return Err(DatasetError::InvalidConfig("records differ in resolution".into()));
        }
        out.extend_from_slice(&r.depth.to_raw_le());
        out.extend_from_slice(&r.mask_extract.data);
        out.extend_from_slice(&r.mask_support.data);
        out.extend(r.label.data.iter().map(|c| c.code()));
        let meta = serde_json::to_vec(&r.meta).expect("meta serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| DatasetError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DatasetError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(usize, usize, Vec<TrainingRecord>), DatasetError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(DatasetError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(c.array()?);
    if version != VERSION {
        return Err(DatasetError::Format(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(c.array()?) as usize;
    let h = u16::from_le_bytes(c.array()?) as usize;
    let w = u16::from_le_bytes(c.array()?) as usize;
    let n = w * h;
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let depth = Grid::from_raw_le(w, h, c.take(4 * n)?).expect("length checked");
        let mask_extract = Grid::from_vec(w, h, c.take(n)?.to_vec());
        let mask_support = Grid::from_vec(w, h, c.take(n)?.to_vec());
        let label = c
            .take(n)?
            .iter()
            .map(|&b| Class::from_code(b).ok_or_else(|| DatasetError::Format(format!("bad class code {b}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let len = u32::from_le_bytes(c.array()?) as usize;
        let meta = serde_json::from_slice(c.take(len)?).map_err(|e| DatasetError::Format(e.to_string()))?;
        records.push(TrainingRecord {
            depth,
            mask_extract,
            mask_support,
            label: Grid::from_vec(w, h, label),
            meta,
        });
    }
    if c.pos != bytes.len() {
        return Err(DatasetError::Format("trailing bytes after declared records".into()));
    }
    Ok((h, w, records))
}

pub fn write_dataset(path: &Path, records: &[TrainingRecord]) -> Result<(), DatasetError> {
    let bytes = encode_dataset(records)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<TrainingRecord>, DatasetError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(decode_dataset(&bytes)?.2)
}

/// Generates the dataset of `config` and writes it to `out_path`.
pub fn generate_dataset(
    config: &DatasetConfig,
    sim: &SimConfig,
    out_path: &Path,
    progress: impl FnMut(usize),
) -> Result<DatasetSummary, DatasetError> {
    let records = generate_records(config, sim, progress)?;
    write_dataset(out_path, &records)?;
    Ok(summarize(&records, config.scenes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::mask_centroid;

    fn small_config(scenes: usize, pairs: usize) -> DatasetConfig {
        DatasetConfig {
            scenes,
            pairs_per_scene: pairs,
            master_seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn counts_and_round_trip() {
        let records = generate_records(&small_config(2, 3), &SimConfig::default(), |_| {}).unwrap();
        assert_eq!(records.len(), 6);
        for r in &records {
            r.validate().unwrap();
        }
        let bytes = encode_dataset(&records).unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 6);
        let (h, w, back) = decode_dataset(&bytes).unwrap();
        assert_eq!((h, w), (64, 64));
        assert_eq!(back, records);
        assert_eq!(encode_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn decode_rejects_corruption() {
        let records = generate_records(&small_config(1, 1), &SimConfig::default(), |_| {}).unwrap();
        let bytes = encode_dataset(&records).unwrap();
        assert!(decode_dataset(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_dataset(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode_dataset(&magic).is_err());
        let mut code = bytes;
        code[20 + 64 * 64 * 6] = 9;
        assert!(decode_dataset(&code).is_err());
    }

    #[test]
    fn labels_regenerate_from_meta() {
        let sim = SimConfig::default();
        let records = generate_records(&small_config(2, 2), &sim, |_| {}).unwrap();
        for r in records.iter().chain([augment_flip(&records[0])].iter()) {
            let label = regenerate_label(&r.meta, &ShelfSpec::default(), 64, &sim).unwrap();
            assert_eq!(label, r.label);
        }
    }

    #[test]
    fn flip_properties() {
        let r = &generate_records(&small_config(1, 1), &SimConfig::default(), |_| {}).unwrap()[0];
        let f = augment_flip(r);
        assert!(f.meta.augmented);
        assert_eq!(&augment_flip(&f), r);
        assert_eq!(f.label.class_counts(), r.label.class_counts());
        let (_, c0) = mask_centroid(&r.mask_extract).unwrap();
        let (_, c1) = mask_centroid(&f.mask_extract).unwrap();
        assert!((c1 - (63.0 - c0)).abs() < 1e-9);
        f.validate().unwrap();
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let base = &generate_records(&small_config(1, 1), &SimConfig::default(), |_| {}).unwrap()[0];
        let records: Vec<TrainingRecord> = (0..100)
            .map(|i| {
                let mut r = base.clone();
                r.meta.scene_seed = i;
                r
            })
            .collect();
        let spec = SplitSpec { train_fraction: 0.9, seed: 3 };
        let (train, val) = split(&records, &spec);
        assert_eq!((train.len(), val.len()), (180, 10));
        assert_eq!(train.iter().filter(|r| r.meta.augmented).count(), 90);
        assert!(val.iter().all(|r| !r.meta.augmented));
        for v in &val {
            assert!(train.iter().all(|t| t.meta.scene_seed != v.meta.scene_seed));
        }
        let (train2, val2) = split(&records, &spec);
        assert_eq!((train2, val2), (train, val));
        let (t, v) = split(&records[..2], &SplitSpec { train_fraction: 0.5, seed: 0 });
        assert_eq!((t.len(), v.len()), (2, 1));
    }

    #[test]
    fn pair_sampling() {
        let pairs = sample_pairs(&[0, 1, 2, 3], 100, 1);
        assert_eq!(pairs.len(), 12);
        let mut sorted = pairs.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 12);
        assert!(pairs.iter().all(|(e, s)| e != s));
        assert_eq!(sample_pairs(&[0, 1, 2, 3], 3, 1), sample_pairs(&[0, 1, 2, 3], 3, 1));
        assert!(sample_pairs(&[4], 2, 0).is_empty());
    }

    #[test]
    fn scene_seeds_are_distinct() {
        let mut seeds: Vec<u64> = (0..1000).map(|i| scene_seed(7, i)).collect();
        seeds.sort();
        seeds.dedup();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(scene_seed(7, 0), scene_seed(8, 0));
    }
}
