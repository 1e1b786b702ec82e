//! Taxonomy records: data model, line-delimited record files, per-level
//! statistics and a deterministic synthetic corpus generator.
//!
//! Synthetic images share one background distribution across classes; a
//! class is identified only by a small motif (a coloured pixel pattern no
//! larger than a patch) stamped inside a few random patches.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{at_path, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Subphylum,
    Class,
    Order,
    Family,
    Genus,
    Species,
}

impl Level {
    /// Highest to lowest.
    pub const ALL: [Level; 6] = [
        Level::Subphylum,
        Level::Class,
        Level::Order,
        Level::Family,
        Level::Genus,
        Level::Species,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Level::Subphylum => "subphylum",
            Level::Class => "class",
            Level::Order => "order",
            Level::Family => "family",
            Level::Genus => "genus",
            Level::Species => "species",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Level::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown taxonomy level `{s}`")))
    }
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Level::parse(s)
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// RGB image, row-major `H × W × 3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * 3;
        &self.data[i..i + 3]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let i = (row * self.width + col) * 3;
        &mut self.data[i..i + 3]
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Binary PPM (`P6`, maxval 255).
    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(at_path(path))?;
        let bad = |m: &str| Error::invalid(format!("{}: {m}", path.display()));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(bad("not a binary PPM"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if max != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        let body = &bytes[pos + 1..];
        if body.len() < w * h * 3 {
            return Err(bad("truncated pixel data"));
        }
        Image::from_rgb8(h, w, &body[..w * h * 3])
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(at_path(path))?;
        write!(f, "P6\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.to_rgb8())?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageRef {
    /// Binary PPM, relative to the record file's directory.
    Path(String),
    Inline(InlineImage),
}

/// 8-bit RGB pixels, base64 encoded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineImage {
    pub height: usize,
    pub width: usize,
    pub rgb8: String,
}

impl ImageRef {
    pub fn inline(image: &Image) -> Self {
        ImageRef::Inline(InlineImage {
            height: image.height,
            width: image.width,
            rgb8: B64.encode(image.to_rgb8()),
        })
    }

    pub fn resolve(&self, base_dir: &Path) -> Result<Image> {
        match self {
            ImageRef::Path(p) => Image::read_ppm(&base_dir.join(p)),
            ImageRef::Inline(i) => {
                let bytes = B64
                    .decode(&i.rgb8)
                    .map_err(|e| Error::invalid(format!("inline image: {e}")))?;
                Image::from_rgb8(i.height, i.width, &bytes)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Description {
    pub level: Level,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomyRecord {
    pub id: String,
    pub image: ImageRef,
    pub labels: BTreeMap<Level, String>,
    pub descriptions: Vec<Description>,
    /// Auxiliary levels (subclass, suborder, ...), carried but not validated.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub auxiliary: BTreeMap<String, String>,
}

impl TaxonomyRecord {
    pub fn label(&self, level: Level) -> &str {
        self.labels.get(&level).map(String::as_str).unwrap_or("")
    }

    /// Checks the per-record invariants: all six levels present and
    /// non-empty, descriptions ordered high to low.
    pub fn validate(&self) -> Result<()> {
        for level in Level::ALL {
            match self.labels.get(&level) {
                Some(name) if !name.trim().is_empty() => {}
                _ => {
                    return Err(Error::Hierarchy(format!(
                        "record `{}` is missing level {level}",
                        self.id
                    )))
                }
            }
        }
        for pair in self.descriptions.windows(2) {
            if pair[0].level > pair[1].level {
                return Err(Error::Hierarchy(format!(
                    "record `{}`: description for {} comes after {}",
                    self.id, pair[1].level, pair[0].level
                )));
            }
        }
        Ok(())
    }
}

/// Every child name at level `k+1` must map to a single parent at level `k`.
pub fn check_hierarchy(records: &[TaxonomyRecord]) -> Result<()> {
    for pair in Level::ALL.windows(2) {
        let (parent, child) = (pair[0], pair[1]);
        let mut seen: HashMap<&str, &str> = HashMap::new();
        for r in records {
            let (p, c) = (r.label(parent), r.label(child));
            match seen.get(c) {
                Some(&prev) if prev != p => {
                    return Err(Error::Hierarchy(format!(
                        "{child} `{c}` has two {parent} parents: `{prev}` and `{p}`"
                    )))
                }
                Some(_) => {}
                None => {
                    seen.insert(c, p);
                }
            }
        }
    }
    Ok(())
}

pub fn parse_records<R: BufRead>(reader: R) -> Result<Vec<TaxonomyRecord>> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TaxonomyRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        rec.validate()?;
        records.push(rec);
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    for pair in records.windows(2) {
        if pair[0].id == pair[1].id {
            return Err(Error::invalid(format!("duplicate record id `{}`", pair[0].id)));
        }
    }
    check_hierarchy(&records)?;
    Ok(records)
}

/// Reads a record file; records come back validated and sorted by id.
pub fn load_records(path: &Path) -> Result<Vec<TaxonomyRecord>> {
    let f = fs::File::open(path).map_err(at_path(path))?;
    parse_records(BufReader::new(f))
}

pub fn write_records<W: Write>(records: &[TaxonomyRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_records(records: &[TaxonomyRecord], path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(at_path(path))?;
    let mut w = std::io::BufWriter::new(f);
    write_records(records, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Directory that relative image paths in `record_file` are resolved against.
pub fn base_dir(record_file: &Path) -> PathBuf {
    record_file
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn resolve_images(records: &[TaxonomyRecord], base_dir: &Path) -> Result<Vec<Image>> {
    records.iter().map(|r| r.image.resolve(base_dir)).collect()
}

pub type CorpusStats = BTreeMap<Level, BTreeMap<String, usize>>;

pub fn corpus_stats(records: &[TaxonomyRecord]) -> Result<CorpusStats> {
    if records.is_empty() {
        return Err(Error::invalid("corpus_stats on an empty corpus"));
    }
    let mut stats = CorpusStats::new();
    for r in records {
        for level in Level::ALL {
            *stats
                .entry(level)
                .or_default()
                .entry(r.label(level).to_string())
                .or_default() += 1;
        }
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Synthetic corpus

pub const PAD: &str = "[PAD]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const CTX: &str = "[CTX]";
pub const SEP: &str = "[SEP]";
pub const RESERVED: [&str; 5] = [PAD, BOS, EOS, CTX, SEP];

const GRAMMAR: [&str; 7] = ["has", "motif", "at", "micro", "scale", "hexapoda", "insecta"];

pub const MOTIF_COLORS: [(&str, [u8; 3]); 6] = [
    ("red", [255, 0, 0]),
    ("green", [0, 255, 0]),
    ("blue", [0, 0, 255]),
    ("yellow", [255, 255, 0]),
    ("magenta", [255, 0, 255]),
    ("cyan", [0, 255, 255]),
];

pub const MOTIF_SHAPES: [&str; 5] = ["block", "ring", "cross", "diagonal", "checker"];

/// Largest class count with a distinct (colour, shape) pair per class.
pub const MAX_SYNTHETIC_CLASSES: usize = MOTIF_COLORS.len() * MOTIF_SHAPES.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub motif_size: usize,
    pub motifs_per_image: usize,
    /// Half-width of the per-image background base colour around mid-grey.
    pub background_jitter: f64,
    /// Half-width of an independent colour offset added to every patch.
    pub patch_tint: f64,
    pub vocab: Vec<String>,
    pub seed: u64,
}

impl SyntheticCorpusSpec {
    /// 32×32 images, 8-pixel patches, a 4×4 motif stamped in every patch
    /// over a mid-grey background with independently tinted patches.
    pub fn desk(num_classes: usize, samples_per_class: usize, seed: u64) -> Self {
        Self {
            num_classes,
            samples_per_class,
            height: 32,
            width: 32,
            patch_size: 8,
            motif_size: 4,
            motifs_per_image: 16,
            background_jitter: 0.0,
            patch_tint: 0.15,
            vocab: default_vocab(num_classes),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.num_classes == 0 || self.samples_per_class == 0 {
            return bad("need at least one class and one sample".into());
        }
        if self.patch_size == 0
            || self.height % self.patch_size != 0
            || self.width % self.patch_size != 0
        {
            return bad(format!(
                "{}x{} image does not tile into {}-pixel patches",
                self.height, self.width, self.patch_size
            ));
        }
        if self.motif_size == 0 || self.motif_size > self.patch_size {
            return bad(format!(
                "motif size {} must be in 1..={}",
                self.motif_size, self.patch_size
            ));
        }
        let patches = (self.height / self.patch_size) * (self.width / self.patch_size);
        if self.motifs_per_image == 0 || self.motifs_per_image > patches {
            return bad(format!("motifs_per_image must be in 1..={patches}"));
        }
        if !(0.0..=0.4).contains(&self.background_jitter) {
            return bad(format!("background_jitter {} not in [0, 0.4]", self.background_jitter));
        }
        if !(0.0..=0.4).contains(&self.patch_tint) {
            return bad(format!("patch_tint {} not in [0, 0.4]", self.patch_tint));
        }
        for r in RESERVED {
            if !self.vocab.iter().any(|t| t == r) {
                return Err(Error::Vocab(format!("reserved token {r} missing")));
            }
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }
}

/// Reserved tokens, grammar words, colours, shapes and every taxon name the
/// generator emits for `num_classes` classes.
pub fn default_vocab(num_classes: usize) -> Vec<String> {
    let mut v: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    v.extend(GRAMMAR.iter().map(|s| s.to_string()));
    v.extend(MOTIF_COLORS.iter().map(|(n, _)| n.to_string()));
    v.extend(MOTIF_SHAPES.iter().map(|s| s.to_string()));
    let names: BTreeSet<String> = (0..num_classes)
        .flat_map(|c| taxon_names(c).into_iter().skip(2))
        .collect();
    v.extend(names);
    v
}

fn taxon_names(class: usize) -> [String; 6] {
    [
        "hexapoda".into(),
        "insecta".into(),
        format!("order{}", class / 4),
        format!("family{}", class / 2),
        format!("genus{class}"),
        format!("species{class}"),
    ]
}

/// Everything that defines one synthetic class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProfile {
    pub index: usize,
    pub color_name: &'static str,
    pub color: [u8; 3],
    pub shape_name: &'static str,
    /// `motif_size × motif_size`, row-major.
    pub mask: Vec<bool>,
    pub labels: BTreeMap<Level, String>,
    pub descriptions: Vec<Description>,
}

fn shape_mask(shape: &str, m: usize) -> Vec<bool> {
    let mut mask = vec![false; m * m];
    for i in 0..m {
        for j in 0..m {
            mask[i * m + j] = match shape {
                "block" => true,
                "ring" => i == 0 || j == 0 || i == m - 1 || j == m - 1,
                "cross" => i == m / 2 || j == m / 2,
                "diagonal" => i == j,
                "checker" => (i + j) % 2 == 0,
                _ => unreachable!("unknown motif shape"),
            };
        }
    }
    mask
}

pub fn class_profiles(spec: &SyntheticCorpusSpec) -> Result<Vec<ClassProfile>> {
    spec.validate()?;
    if spec.num_classes > MAX_SYNTHETIC_CLASSES {
        return Err(Error::Vocab(format!(
            "at most {MAX_SYNTHETIC_CLASSES} classes can be named, asked for {}",
            spec.num_classes
        )));
    }
    let vocab: BTreeSet<&str> = spec.vocab.iter().map(String::as_str).collect();
    let nc = MOTIF_COLORS.len();
    let ns = MOTIF_SHAPES.len();
    (0..spec.num_classes)
        .map(|c| {
            // Shape-major: consecutive classes share a colour and differ in shape.
            let (color_name, color) = MOTIF_COLORS[(c / ns) % nc];
            let shape_name = MOTIF_SHAPES[c % ns];
            let names = taxon_names(c);
            let labels: BTreeMap<Level, String> =
                Level::ALL.into_iter().zip(names.iter().cloned()).collect();
            let mut descriptions: Vec<Description> = Level::ALL[..5]
                .iter()
                .zip(&names)
                .map(|(&level, name)| Description {
                    level,
                    text: name.clone(),
                })
                .collect();
            descriptions.push(Description {
                level: Level::Species,
                text: format!("{} has {color_name} {shape_name} motif at micro scale", names[5]),
            });
            for d in &descriptions {
                for tok in d.text.split_whitespace() {
                    if !vocab.contains(tok) {
                        return Err(Error::Vocab(format!(
                            "token `{tok}` needed to name class {c} is not in the vocabulary"
                        )));
                    }
                }
            }
            Ok(ClassProfile {
                index: c,
                color_name,
                color,
                shape_name,
                mask: shape_mask(shape_name, spec.motif_size),
                labels,
                descriptions,
            })
        })
        .collect()
}

/// Per-image background parameters; drawn from one distribution for all
/// classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Background {
    pub base: [f64; 3],
    pub gradient_angle: f64,
    pub gradient_amplitude: f64,
    pub stripe_frequency: f64,
    pub stripe_angle: f64,
    pub stripe_phase: f64,
    pub stripe_amplitude: f64,
    /// Colour offset of every patch, row-major over the patch grid.
    pub patch_tints: Vec<[f64; 3]>,
}

/// Top-left pixel of a motif stamp.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stamp {
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleLayout {
    pub background: Background,
    pub stamps: Vec<Stamp>,
}

/// Draws a background and `motifs_per_image` stamp positions, each fully
/// inside a distinct patch.
pub fn sample_layout<R: Rng>(spec: &SyntheticCorpusSpec, rng: &mut R) -> SampleLayout {
    let tau = std::f64::consts::TAU;
    let background = Background {
        base: [0; 3].map(|_| 0.5 + spec.background_jitter * rng.gen_range(-1.0..1.0)),
        gradient_angle: rng.gen_range(0.0..tau),
        gradient_amplitude: rng.gen_range(0.0..0.15),
        stripe_frequency: rng.gen_range(0.3..0.9),
        stripe_angle: rng.gen_range(0.0..tau),
        stripe_phase: rng.gen_range(0.0..tau),
        stripe_amplitude: rng.gen_range(0.05..0.15),
        patch_tints: (0..spec.num_patches())
            .map(|_| [0; 3].map(|_| spec.patch_tint * rng.gen_range(-1.0..1.0)))
            .collect(),
    };
    let grid_w = spec.width / spec.patch_size;
    let slack = spec.patch_size - spec.motif_size;
    let mut patches = index::sample(rng, spec.num_patches(), spec.motifs_per_image).into_vec();
    patches.sort_unstable();
    let stamps = patches
        .into_iter()
        .map(|p| {
            let (pr, pc) = (p / grid_w, p % grid_w);
            Stamp {
                row: pr * spec.patch_size + rng.gen_range(0..=slack),
                col: pc * spec.patch_size + rng.gen_range(0..=slack),
            }
        })
        .collect();
    SampleLayout { background, stamps }
}

/// Background only, quantised to 8 bits and kept inside `[0.1, 0.9]` so no
/// background pixel can equal a motif colour channel (0 or 1).
pub fn render_background(spec: &SyntheticCorpusSpec, bg: &Background) -> Image {
    let mut img = Image::zeros(spec.height, spec.width);
    let (gc, gs) = (bg.gradient_angle.cos(), bg.gradient_angle.sin());
    let (sc, ss) = (bg.stripe_angle.cos(), bg.stripe_angle.sin());
    let (h, w) = (spec.height as f64, spec.width as f64);
    let grid_w = spec.width / spec.patch_size;
    for r in 0..spec.height {
        for c in 0..spec.width {
            let (y, x) = (r as f64 / h - 0.5, c as f64 / w - 0.5);
            let grad = bg.gradient_amplitude * (gc * x + gs * y);
            let stripe = bg.stripe_amplitude
                * (bg.stripe_frequency * (sc * c as f64 + ss * r as f64) + bg.stripe_phase).sin();
            let tint = bg.patch_tints[(r / spec.patch_size) * grid_w + c / spec.patch_size];
            let px = img.pixel_mut(r, c);
            for ch in 0..3 {
                let v = (bg.base[ch] + tint[ch] + grad + stripe).clamp(0.1, 0.9);
                px[ch] = (v * 255.0).round() / 255.0;
            }
        }
    }
    img
}

pub fn render(spec: &SyntheticCorpusSpec, profile: &ClassProfile, layout: &SampleLayout) -> Image {
    let mut img = render_background(spec, &layout.background);
    let m = spec.motif_size;
    let color = profile.color.map(|c| c as f64 / 255.0);
    for s in &layout.stamps {
        for i in 0..m {
            for j in 0..m {
                if profile.mask[i * m + j] {
                    img.pixel_mut(s.row + i, s.col + j).copy_from_slice(&color);
                }
            }
        }
    }
    img
}

/// Deterministic for a fixed spec: records are ordered class-major and ids
/// sort in generation order.
pub fn generate_synthetic(spec: &SyntheticCorpusSpec) -> Result<Vec<TaxonomyRecord>> {
    let profiles = class_profiles(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for p in &profiles {
        for s in 0..spec.samples_per_class {
            let layout = sample_layout(spec, &mut rng);
            let img = render(spec, p, &layout);
            records.push(TaxonomyRecord {
                id: format!("syn-c{:03}-s{:05}", p.index, s),
                image: ImageRef::inline(&img),
                labels: p.labels.clone(),
                descriptions: p.descriptions.clone(),
                auxiliary: BTreeMap::new(),
            });
        }
    }
    Ok(records)
}
