//! Synthetic scenes, their captions, and the on-disk dataset formats.
//!
//! A scene holds one or two shapes on a 16×16 grid. Each region's feature
//! row is one-hot color ⊕ one-hot shape ⊕ one-hot size (d_feat = 10), with
//! optional Gaussian noise. Boxes have integer corners, so every position
//! value is exact in binary32.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::binio::{put_f32s, put_str, put_u32, ByteReader};
use crate::error::{Error, Result};
use crate::representation::{position_vector, RegionSet};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

pub const GRID: f64 = 16.0;
pub const FEAT_DIM: usize = 10;
pub const FEATURES_MAGIC: &[u8; 8] = b"XGPTFEAT";
pub const FEATURES_VERSION: u32 = 1;

pub const COLORS: [&str; 4] = ["red", "blue", "green", "yellow"];
pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "star"];
pub const SIZES: [&str; 2] = ["small", "large"];

/// Every word the grammar can emit.
pub const GRAMMAR_WORDS: [&str; 14] = [
    "a", "small", "large", "red", "blue", "green", "yellow", "circle", "square", "triangle", "star", "left", "of",
    "above",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Relation {
    LeftOf,
    Above,
}

impl Relation {
    pub fn words(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::Above => "above",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject {
    pub color: usize,
    pub shape: usize,
    pub size: usize,
    /// `(x1, y1, x2, y2)` in grid units.
    pub bbox: [f64; 4],
}

impl SceneObject {
    pub fn phrase(&self) -> String {
        format!("a {} {} {}", SIZES[self.size], COLORS[self.color], SHAPES[self.shape])
    }
}

/// One or two objects; two-object scenes carry the relation of the first
/// object to the second.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub relation: Option<Relation>,
}

impl Scene {
    pub fn caption(&self) -> String {
        match (self.objects.as_slice(), self.relation) {
            ([a], None) => a.phrase(),
            ([a, b], Some(r)) => format!("{} {} {}", a.phrase(), r.words(), b.phrase()),
            _ => unreachable!("scenes hold one object or two related objects"),
        }
    }
}

fn overlaps(a0: f64, a1: f64, b0: f64, b1: f64) -> bool {
    a0 < b1 && b0 < a1
}

/// Which relation, if any, holds from `a` to `b`. Left-of needs `a` wholly
/// left of `b` with overlapping rows; above needs `a` wholly above `b` with
/// overlapping columns.
pub fn relation_between(a: &[f64; 4], b: &[f64; 4]) -> Option<Relation> {
    let left = a[2] <= b[0] && overlaps(a[1], a[3], b[1], b[3]);
    let above = a[3] <= b[1] && overlaps(a[0], a[2], b[0], b[2]);
    match (left, above) {
        (true, false) => Some(Relation::LeftOf),
        (false, true) => Some(Relation::Above),
        _ => None,
    }
}

fn side<R: Rng + ?Sized>(size: usize, rng: &mut R) -> f64 {
    (if size == 0 { rng.random_range(3..=4) } else { rng.random_range(6..=7) }) as f64
}

fn random_object<R: Rng + ?Sized>(rng: &mut R) -> (usize, usize, usize) {
    (rng.random_range(0..4), rng.random_range(0..4), rng.random_range(0..2))
}

/// Draws a scene: half the time one object, otherwise two in a relation.
pub fn random_scene<R: Rng + ?Sized>(rng: &mut R) -> Scene {
    let place = |rng: &mut R, len: f64| rng.random_range(0..=(GRID - len) as u32) as f64;
    if rng.random_bool(0.5) {
        let (color, shape, size) = random_object(rng);
        let s = side(size, rng);
        let (x, y) = (place(rng, s), place(rng, s));
        return Scene {
            objects: vec![SceneObject {
                color,
                shape,
                size,
                bbox: [x, y, x + s, y + s],
            }],
            relation: None,
        };
    }
    let relation = if rng.random_bool(0.5) { Relation::LeftOf } else { Relation::Above };
    let (ca, sa, za) = random_object(rng);
    let (cb, sb, zb) = random_object(rng);
    let (la, lb) = (side(za, rng), side(zb, rng));
    // Along the relation axis: a then b with a gap of zero or more. Across
    // it: positions drawn until the extents overlap.
    let slack = GRID - la - lb;
    let start = rng.random_range(0..=slack as u32) as f64;
    let gap = rng.random_range(0..=(slack - start) as u32) as f64;
    let (a_along, b_along) = (start, start + la + gap);
    let (a_across, b_across) = loop {
        let (p, q) = (place(rng, la), place(rng, lb));
        if overlaps(p, p + la, q, q + lb) {
            break (p, q);
        }
    };
    let boxes = match relation {
        Relation::LeftOf => (
            [a_along, a_across, a_along + la, a_across + la],
            [b_along, b_across, b_along + lb, b_across + lb],
        ),
        Relation::Above => (
            [a_across, a_along, a_across + la, a_along + la],
            [b_across, b_along, b_across + lb, b_along + lb],
        ),
    };
    let scene = Scene {
        objects: vec![
            SceneObject {
                color: ca,
                shape: sa,
                size: za,
                bbox: boxes.0,
            },
            SceneObject {
                color: cb,
                shape: sb,
                size: zb,
                bbox: boxes.1,
            },
        ],
        relation: Some(relation),
    };
    debug_assert_eq!(relation_between(&boxes.0, &boxes.1), Some(relation));
    scene
}

/// Region rows for `scene`, listed in `order`.
pub fn scene_regions<R: Rng + ?Sized>(scene: &Scene, order: &[usize], noise: f64, rng: &mut R) -> Result<RegionSet> {
    let n = scene.objects.len();
    let mut data = Vec::with_capacity(n * FEAT_DIM);
    let mut positions = Vec::with_capacity(n);
    let normal = (noise > 0.0).then(|| Normal::new(0.0, noise).expect("finite noise"));
    for &i in order {
        let o = &scene.objects[i];
        let mut row = [0.0; FEAT_DIM];
        row[o.color] = 1.0;
        row[4 + o.shape] = 1.0;
        row[8 + o.size] = 1.0;
        if let Some(d) = &normal {
            for v in &mut row {
                *v += d.sample(rng);
            }
        }
        data.extend_from_slice(&row);
        positions.push(position_vector(o.bbox, GRID, GRID)?);
    }
    RegionSet::new(Tensor::new(vec![n, FEAT_DIM], data)?, positions)
}

fn one_hot(block: &[f64]) -> Option<usize> {
    let mut hot = None;
    for (i, &v) in block.iter().enumerate() {
        match v {
            1.0 if hot.is_none() => hot = Some(i),
            0.0 => {}
            _ => return None,
        }
    }
    hot
}

/// Reads the unique grammar caption back out of noiseless region rows.
pub fn caption_oracle(regions: &RegionSet) -> Result<String> {
    if regions.feat_dim() != FEAT_DIM {
        return Err(Error::Oracle(format!("expected {FEAT_DIM} features, got {}", regions.feat_dim())));
    }
    let n = regions.len();
    let mut objects = Vec::with_capacity(n);
    for i in 0..n {
        let row = regions.features().row(i);
        let decode = |lo: usize, hi: usize| {
            one_hot(&row[lo..hi]).ok_or_else(|| Error::Oracle(format!("region {i} is not one-hot in features {lo}..{hi}")))
        };
        let p = regions.positions()[i];
        objects.push(SceneObject {
            color: decode(0, 4)?,
            shape: decode(4, 8)?,
            size: decode(8, 10)?,
            bbox: [p[0] * GRID, p[1] * GRID, p[2] * GRID, p[3] * GRID],
        });
    }
    match objects.as_slice() {
        [a] => Ok(a.phrase()),
        [a, b] => {
            let forward = relation_between(&a.bbox, &b.bbox);
            let backward = relation_between(&b.bbox, &a.bbox);
            let scene = match (forward, backward) {
                (Some(r), None) => Scene { objects: vec![*a, *b], relation: Some(r) },
                (None, Some(r)) => Scene { objects: vec![*b, *a], relation: Some(r) },
                _ => return Err(Error::Oracle("two regions without a unique relation".into())),
            };
            Ok(scene.caption())
        }
        _ => Err(Error::Oracle(format!("{n} regions; scenes hold one or two"))),
    }
}

/// One image: id, regions and its caption.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub regions: RegionSet,
    pub caption: String,
}

/// Deterministic examples `first..first + count` of the stream for `seed`.
/// Region rows are shuffled so that row order carries no information.
pub fn generate_examples(count: usize, seed: u64, noise: f64, first: usize) -> Result<Vec<Example>> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Input(format!("noise must be a non-negative number, got {noise}")));
    }
    (first..first + count)
        .map(|i| {
            let mut rng = RngStream::new(seed, i as u64, "scene").rng();
            let scene = random_scene(&mut rng);
            let order: Vec<usize> = if scene.objects.len() == 2 && rng.random_bool(0.5) { vec![1, 0] } else { (0..scene.objects.len()).collect() };
            Ok(Example {
                id: format!("{i:06}"),
                regions: scene_regions(&scene, &order, noise, &mut rng)?,
                caption: scene.caption(),
            })
        })
        .collect()
}

pub fn grammar_vocabulary() -> Vocabulary {
    Vocabulary::new(GRAMMAR_WORDS).expect("grammar words are distinct")
}

pub fn features_to_bytes(examples: &[Example]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURES_MAGIC);
    put_u32(&mut out, FEATURES_VERSION);
    put_u32(&mut out, examples.len() as u32);
    for e in examples {
        put_str(&mut out, &e.id);
        put_u32(&mut out, e.regions.len() as u32);
        put_u32(&mut out, e.regions.feat_dim() as u32);
        put_f32s(&mut out, e.regions.features().data());
        for p in e.regions.positions() {
            put_f32s(&mut out, p);
        }
    }
    out
}

/// `(id, regions)` records of a feature file.
pub fn features_from_bytes(buf: &[u8]) -> Result<Vec<(String, RegionSet)>> {
    if buf.is_empty() {
        return Err(Error::format(0, "empty feature file"));
    }
    let mut r = ByteReader::new(buf);
    if r.take(8, "magic")? != FEATURES_MAGIC {
        return Err(Error::format(0, "bad feature file magic"));
    }
    let at = r.offset();
    let version = r.u32("version")?;
    if version != FEATURES_VERSION {
        return Err(Error::format(at, format!("unsupported feature file version {version}")));
    }
    let count = r.u32("record count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id = r.string("record id")?;
        let at = r.offset();
        let n = r.u32("region count")? as usize;
        let d = r.u32("feature dimension")? as usize;
        if n == 0 || d == 0 {
            return Err(Error::format(at, format!("record {id:?} has {n} regions of dimension {d}")));
        }
        let numel = n
            .checked_mul(d)
            .ok_or_else(|| Error::format(at, "feature block overflows"))?;
        let features = r.f32s(numel, "features")?;
        let positions: Vec<[f64; 5]> = r
            .f32s(n * 5, "positions")?
            .chunks_exact(5)
            .map(|c| [c[0], c[1], c[2], c[3], c[4]])
            .collect();
        let regions = Tensor::new(vec![n, d], features)
            .and_then(|f| RegionSet::new(f, positions))
            .map_err(|e| Error::format(at, format!("record {id:?}: {e}")))?;
        out.push((id, regions));
    }
    if !r.at_end() {
        return Err(Error::format(r.offset(), "trailing bytes after last record"));
    }
    Ok(out)
}

pub fn manifest_text(examples: &[Example]) -> String {
    let mut s = String::new();
    for e in examples {
        let _ = writeln!(s, "{}\t{}", e.id, e.caption);
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (id, caption) = line
            .split_once('\t')
            .ok_or_else(|| Error::Input(format!("manifest line {} lacks a tab", i + 1)))?;
        if let Some((prev, _)) = out.last() {
            if prev.as_str() >= id {
                return Err(Error::Input(format!("manifest line {}: ids must ascend", i + 1)));
            }
        }
        out.push((id.to_string(), caption.to_string()));
    }
    Ok(out)
}

pub const MANIFEST: &str = "manifest.tsv";
pub const FEATURES: &str = "features.bin";
pub const VOCAB: &str = "vocab.txt";

/// Writes `manifest.tsv`, `features.bin` and `vocab.txt` into `dir`.
pub fn write_dataset(dir: &Path, examples: &[Example], vocab: &Vocabulary) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    };
    write(MANIFEST, manifest_text(examples).as_bytes())?;
    write(FEATURES, &features_to_bytes(examples))?;
    write(VOCAB, vocab.to_text().as_bytes())
}

pub fn generate_dataset(count: usize, seed: u64, noise: f64, dir: &Path) -> Result<Vec<Example>> {
    if count == 0 {
        return Err(Error::Input("dataset needs at least one example".into()));
    }
    let examples = generate_examples(count, seed, noise, 0)?;
    write_dataset(dir, &examples, &grammar_vocabulary())?;
    Ok(examples)
}

/// Reads a dataset directory; the vocabulary falls back to the grammar's
/// when `vocab.txt` is absent.
pub fn load_dataset(dir: &Path) -> Result<(Vec<Example>, Vocabulary)> {
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read(&p).map_err(|e| Error::io(p, e))
    };
    let manifest = parse_manifest(
        &String::from_utf8(read(MANIFEST)?).map_err(|_| Error::Input("manifest is not UTF-8".into()))?,
    )?;
    let features = features_from_bytes(&read(FEATURES)?)?;
    if manifest.len() != features.len() {
        return Err(Error::Input(format!(
            "manifest has {} lines but feature file has {} records",
            manifest.len(),
            features.len()
        )));
    }
    let vocab_path = dir.join(VOCAB);
    let vocab = if vocab_path.exists() { Vocabulary::load(&vocab_path)? } else { grammar_vocabulary() };
    let examples = manifest
        .into_iter()
        .zip(features)
        .map(|((id, caption), (fid, regions))| {
            if id != fid {
                return Err(Error::Input(format!("manifest id {id:?} does not match feature id {fid:?}")));
            }
            Ok(Example { id, regions, caption })
        })
        .collect::<Result<_>>()?;
    Ok((examples, vocab))
}
