//! Synthetic two-domain shapes dataset and its `DSF1` file format.
//!
//! Source-domain images come with a pixel mask for every object; target
//! images carry only their label set. Each sample draws from its own RNG
//! stream (`seed`, sample index), so generation order never matters.

mod shapes;

use std::fs;
use std::path::Path;

use shapes::{dilate, Placement};

use crate::error::{Error, Result};
use crate::model::parse_num;
use crate::tensor::{derive_seed, write_stf_bytes, Cursor, Rng, Tensor};

pub const DSF_MAGIC: &[u8; 4] = b"DSF1";

/// The shape vocabulary. Ids are global across both domains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Triangle,
    Cross,
    Ring,
    Bar,
    Disk,
    Square,
}

impl Category {
    pub const ALL: [Category; 6] =
        [Category::Triangle, Category::Cross, Category::Ring, Category::Bar, Category::Disk, Category::Square];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Category::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Triangle => "triangle",
            Category::Cross => "cross",
            Category::Ring => "ring",
            Category::Bar => "bar",
            Category::Disk => "disk",
            Category::Square => "square",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| Error::config(format!("unknown category {s:?}")))
    }
}

/// Number of categories across both domains.
pub const NUM_CATEGORIES: usize = Category::ALL.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

/// One image with its labels, ascending by category id, and per-label masks
/// `[H, W]` in the same order.
///
/// Training data follows the weak-supervision split: source samples carry a
/// mask per label and target samples none. Evaluation sets are the one
/// exception and give target samples masks too, for scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub domain: Domain,
    pub labels: Vec<usize>,
    pub masks: Vec<Tensor>,
}

impl Sample {
    pub fn has_masks(&self) -> bool {
        !self.masks.is_empty()
    }

    fn validate(&self, index: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::arg(format!("sample {index}: {msg}")));
        if self.labels.is_empty() {
            return bad("no labels".into());
        }
        if self.labels.windows(2).any(|w| w[0] >= w[1]) || self.labels.iter().any(|&l| l >= NUM_CATEGORIES) {
            return bad(format!("labels {:?} must be ascending category ids", self.labels));
        }
        match (self.domain, self.masks.len()) {
            (Domain::Source, n) if n != self.labels.len() => bad(format!("source sample has {n} masks")),
            (Domain::Target, n) if n != 0 && n != self.labels.len() => bad(format!("target sample has {n} masks")),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count(&self, domain: Domain) -> usize {
        self.samples.iter().filter(|s| s.domain == domain).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub source: Vec<Category>,
    pub target: Vec<Category>,
    pub n_source: usize,
    pub n_target: usize,
    /// Objects per image are drawn uniformly from `1..=max_objects`.
    pub max_objects: usize,
    pub noise_std: f64,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: vec![Category::Triangle, Category::Cross, Category::Ring, Category::Bar],
            target: vec![Category::Disk, Category::Square],
            n_source: 2000,
            n_target: 1000,
            max_objects: 2,
            noise_std: 0.05,
            image_size: 32,
            seed: 0,
        }
    }
}

/// Size ranges for shapes in one- and two-object images.
const R_SINGLE: (f64, f64) = (5.0, 8.0);
const R_PAIR: (f64, f64) = (5.0, 6.5);
const INTENSITY: (f64, f64) = (0.5, 1.0);
const PLACEMENT_TRIES: usize = 200;

/// Stream tags separating evaluation sets from the training set.
const EVAL_STREAM: u64 = 0xE7A1;

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.source.is_empty() || self.target.is_empty() {
            return Err(Error::config("both domains need at least one category"));
        }
        if let Some(c) = self.source.iter().find(|c| self.target.contains(c)) {
            return Err(Error::config(format!("category {} is in both domains", c.name())));
        }
        for v in [&self.source, &self.target] {
            let mut ids: Vec<usize> = v.iter().map(|c| c.id()).collect();
            ids.sort_unstable();
            ids.dedup();
            if ids.len() != v.len() {
                return Err(Error::config("duplicate category within a domain"));
            }
        }
        if self.n_source == 0 || self.n_target == 0 {
            return Err(Error::config("sample counts must be at least 1"));
        }
        if !(1..=2).contains(&self.max_objects) {
            return Err(Error::config("max_objects must be 1 or 2"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config("noise_std must be a non-negative number"));
        }
        if self.image_size < 24 {
            return Err(Error::config("image_size must be at least 24"));
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let names = |v: &[Category]| v.iter().map(|c| c.name()).collect::<Vec<_>>().join(",");
        vec![
            ("source", names(&self.source)),
            ("target", names(&self.target)),
            ("n_source", self.n_source.to_string()),
            ("n_target", self.n_target.to_string()),
            ("max_objects", self.max_objects.to_string()),
            ("noise_std", format!("{:?}", self.noise_std)),
            ("image_size", self.image_size.to_string()),
            ("data_seed", self.seed.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let cats = |v: &str| v.split(',').map(Category::parse).collect::<Result<Vec<_>>>();
        match key {
            "source" => self.source = cats(value)?,
            "target" => self.target = cats(value)?,
            "n_source" => self.n_source = parse_num(value)?,
            "n_target" => self.n_target = parse_num(value)?,
            "max_objects" => self.max_objects = parse_num(value)?,
            "noise_std" => self.noise_std = parse_num(value)?,
            "image_size" => self.image_size = parse_num(value)?,
            "data_seed" => self.seed = parse_num(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Renders one image with `objects` distinct categories drawn from `vocab`.
fn render(
    vocab: &[Category],
    objects: usize,
    size: usize,
    noise_std: f64,
    rng: &mut Rng,
) -> (Tensor, Vec<usize>, Vec<Tensor>) {
    let objects = objects.min(vocab.len());
    let mut pool = vocab.to_vec();
    let mut cats = Vec::with_capacity(objects);
    for _ in 0..objects {
        cats.push(pool.remove(rng.below(pool.len())));
    }
    let r_range = if objects > 1 { R_PAIR } else { R_SINGLE };

    let supports = 'placement: loop {
        let mut supports: Vec<(Category, Vec<bool>)> = Vec::with_capacity(objects);
        let mut occupied = vec![false; size * size];
        for &c in &cats {
            let mut placed = None;
            for _ in 0..PLACEMENT_TRIES {
                let m = Placement::random(c, size, r_range, rng).rasterize(size);
                if m.iter().zip(&occupied).all(|(a, b)| !(*a && *b)) {
                    placed = Some(m);
                    break;
                }
            }
            let Some(m) = placed else { continue 'placement };
            for (o, d) in occupied.iter_mut().zip(dilate(&m, size)) {
                *o |= d;
            }
            supports.push((c, m));
        }
        break supports;
    };

    let mut image = vec![0.0; size * size];
    for (_, m) in &supports {
        let intensity = rng.uniform(INTENSITY.0, INTENSITY.1);
        for (px, &inside) in image.iter_mut().zip(m) {
            if inside {
                *px = intensity;
            }
        }
    }
    if noise_std > 0.0 {
        for px in &mut image {
            *px = (*px + noise_std * rng.normal()).clamp(0.0, 1.0);
        }
    }

    let mut order: Vec<usize> = (0..supports.len()).collect();
    order.sort_by_key(|&i| supports[i].0.id());
    let labels = order.iter().map(|&i| supports[i].0.id()).collect();
    let masks = order
        .iter()
        .map(|&i| {
            let v = supports[i].1.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            Tensor::from_parts(vec![size, size], v)
        })
        .collect();
    (Tensor::from_parts(vec![1, size, size], image), labels, masks)
}

fn make_sample(cfg: &DatasetConfig, domain: Domain, objects: usize, keep_masks: bool, rng: &mut Rng) -> Sample {
    let vocab = if domain == Domain::Source { &cfg.source } else { &cfg.target };
    let (image, labels, masks) = render(vocab, objects, cfg.image_size, cfg.noise_std, rng);
    Sample { image, domain, labels, masks: if keep_masks { masks } else { Vec::new() } }
}

/// `n_source` source samples followed by `n_target` target samples.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let total = cfg.n_source + cfg.n_target;
    let samples = (0..total)
        .map(|i| {
            let mut rng = Rng::stream(cfg.seed, i as u64);
            let objects = 1 + rng.below(cfg.max_objects);
            let domain = if i < cfg.n_source { Domain::Source } else { Domain::Target };
            make_sample(cfg, domain, objects, domain == Domain::Source, &mut rng)
        })
        .collect();
    Ok(Dataset { samples })
}

/// How many objects each evaluation image holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalObjects {
    /// Uniform in `1..=max_objects`, like the training set.
    Mixed,
    /// Always one object per target category, up to two.
    Pair,
}

/// Held-out target-domain images with masks, drawn from streams disjoint
/// from [`generate_dataset`]'s.
pub fn generate_eval_set(cfg: &DatasetConfig, n: usize, objects: EvalObjects) -> Result<Dataset> {
    cfg.validate()?;
    let tag = match objects {
        EvalObjects::Mixed => 0,
        EvalObjects::Pair => 1,
    };
    let seed = derive_seed(derive_seed(cfg.seed, EVAL_STREAM), tag);
    let samples = (0..n)
        .map(|i| {
            let mut rng = Rng::stream(seed, i as u64);
            let k = match objects {
                EvalObjects::Mixed => 1 + rng.below(cfg.max_objects),
                EvalObjects::Pair => 2,
            };
            make_sample(cfg, Domain::Target, k, true, &mut rng)
        })
        .collect();
    Ok(Dataset { samples })
}

const MASKS_FLAG: u8 = 0x80;

/// `DSF1` encoding: magic, u32 sample count, then per sample a domain byte
/// (0 source, 1 target; bit 7 set on target samples that carry masks), a u8
/// label count, u16 label ids, the image as STF and the masks as STF in
/// label order. All integers little-endian.
pub fn dataset_to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(DSF_MAGIC);
    out.extend_from_slice(&(ds.samples.len() as u32).to_le_bytes());
    for (i, s) in ds.samples.iter().enumerate() {
        s.validate(i)?;
        let domain = match s.domain {
            Domain::Source => 0,
            Domain::Target if s.has_masks() => 1 | MASKS_FLAG,
            Domain::Target => 1,
        };
        out.push(domain);
        out.push(s.labels.len() as u8);
        for &l in &s.labels {
            out.extend_from_slice(&(l as u16).to_le_bytes());
        }
        out.extend_from_slice(&write_stf_bytes(&s.image));
        for m in &s.masks {
            out.extend_from_slice(&write_stf_bytes(m));
        }
    }
    Ok(out)
}

pub fn dataset_from_bytes(buf: &[u8]) -> Result<Dataset> {
    let mut c = Cursor::new(buf, 0);
    c.expect_magic(DSF_MAGIC)?;
    let n = c.u32()? as usize;
    let mut samples = Vec::with_capacity(n.min(1 << 16));
    for i in 0..n {
        let at = c.offset();
        let tag = c.u8()?;
        let (domain, with_masks) = match tag {
            0 => (Domain::Source, true),
            1 => (Domain::Target, false),
            t if t == 1 | MASKS_FLAG => (Domain::Target, true),
            t => return Err(Error::format(at, format!("sample {i}: unknown domain byte {t:#04x}"))),
        };
        let k = c.u8()? as usize;
        let labels: Vec<usize> = (0..k).map(|_| c.u16().map(usize::from)).collect::<Result<_>>()?;
        let image = c.tensor()?;
        let masks = if with_masks { (0..k).map(|_| c.tensor()).collect::<Result<_>>()? } else { Vec::new() };
        let s = Sample { image, domain, labels, masks };
        s.validate(i).map_err(|e| Error::format(at, e.to_string()))?;
        samples.push(s);
    }
    if !c.is_at_end() {
        return Err(Error::format(c.offset(), "trailing bytes after last sample"));
    }
    Ok(Dataset { samples })
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, dataset_to_bytes(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    dataset_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> DatasetConfig {
        DatasetConfig { n_source: 40, n_target: 20, seed, ..Default::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small(3)).unwrap();
        let b = generate_dataset(&small(3)).unwrap();
        assert_eq!(dataset_to_bytes(&a).unwrap(), dataset_to_bytes(&b).unwrap());
        assert_ne!(a, generate_dataset(&small(4)).unwrap());
    }

    #[test]
    fn domains_and_masks_follow_the_split() {
        let cfg = small(5);
        let ds = generate_dataset(&cfg).unwrap();
        assert_eq!(ds.count(Domain::Source), 40);
        assert_eq!(ds.count(Domain::Target), 20);
        for s in &ds.samples {
            let vocab = if s.domain == Domain::Source { &cfg.source } else { &cfg.target };
            assert!(s.labels.iter().all(|&l| vocab.contains(&Category::from_id(l).unwrap())));
            assert_eq!(s.has_masks(), s.domain == Domain::Source);
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn source_mask_coverage_is_bounded() {
        let ds = generate_dataset(&DatasetConfig::default()).unwrap();
        let mut seen = 0;
        for s in ds.samples.iter().filter(|s| s.domain == Domain::Source) {
            for m in &s.masks {
                let frac = m.sum() / m.len() as f64;
                assert!((0.03..=0.6).contains(&frac), "{frac}");
                seen += 1;
            }
        }
        assert!(seen >= 2000);
    }

    #[test]
    fn overlapping_vocabularies_are_rejected() {
        let cfg = DatasetConfig { target: vec![Category::Disk, Category::Bar], ..Default::default() };
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn noiseless_single_shape_image_matches_mask() {
        let cfg = DatasetConfig { noise_std: 0.0, max_objects: 1, ..small(6) };
        let ds = generate_dataset(&cfg).unwrap();
        for s in ds.samples.iter().filter(|s| s.has_masks()) {
            for (px, m) in s.image.data().iter().zip(s.masks[0].data()) {
                assert_eq!(*px > 0.0, *m == 1.0);
            }
        }
    }

    #[test]
    fn two_object_masks_are_disjoint_with_margin() {
        let ds = generate_eval_set(&small(7), 30, EvalObjects::Pair).unwrap();
        for s in &ds.samples {
            assert_eq!(s.labels, vec![Category::Disk.id(), Category::Square.id()]);
            let a: Vec<bool> = s.masks[0].data().iter().map(|&v| v == 1.0).collect();
            let grown = dilate(&a, 32);
            assert!(grown.iter().zip(s.masks[1].data()).all(|(g, &m)| !(*g && m == 1.0)));
        }
    }

    #[test]
    fn round_trips_through_bytes_and_files() {
        let ds = generate_dataset(&small(8)).unwrap();
        let back = dataset_from_bytes(&dataset_to_bytes(&ds).unwrap()).unwrap();
        assert_eq!(back, ds);
        let eval = generate_eval_set(&small(8), 5, EvalObjects::Mixed).unwrap();
        assert_eq!(dataset_from_bytes(&dataset_to_bytes(&eval).unwrap()).unwrap(), eval);
        let empty = Dataset::default();
        assert_eq!(dataset_from_bytes(&dataset_to_bytes(&empty).unwrap()).unwrap(), empty);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.dsf");
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn truncation_and_bad_magic_report_offsets() {
        let ds = generate_dataset(&small(9)).unwrap();
        let bytes = dataset_to_bytes(&ds).unwrap();
        let cut = bytes.len() - 100;
        match dataset_from_bytes(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
            other => panic!("expected a format error, got {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(dataset_from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad_domain = bytes;
        bad_domain[8] = 7;
        assert!(matches!(dataset_from_bytes(&bad_domain), Err(Error::Format { offset: 8, .. })));
    }
}
