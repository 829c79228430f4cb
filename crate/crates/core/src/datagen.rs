//! Synthetic two-color training pairs and their on-disk layout.
//!
//! Each input is a flat background with one hard-edged foreground shape.
//! Confusable inputs look different to normal vision (L gap ≥ 15) but
//! nearly identical after dichromat simulation (simulated L gap < 8). The
//! target rescales saturation and value of one region until the simulated
//! gap reaches 15 plus a margin; hue is untouched.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::colorlab::{hsv_to_rgb_px, lightness_px, rgb_to_hsv_px, simulate_cvd_px, CvdKind, RgbImage};
use crate::imageio::{dequantize, quantize, read_png, write_png, PngError};

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const MANIFEST_MAGIC: &str = "cudkit-dataset";
pub const MANIFEST_VERSION: u32 = 1;
/// Largest hue drift tolerated after 8-bit rounding, as a fraction of a turn.
pub const HUE_TOLERANCE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("image must be at least 16x16, got {0}x{1}")]
    TooSmall(usize, usize),
    #[error("no pair found after {attempts} attempts; most often violated: {criterion}")]
    Exhausted { attempts: usize, criterion: &'static str },
    #[error("fraction {0} outside [0,1]")]
    Fraction(f64),
    #[error(transparent)]
    Png(#[from] PngError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {detail}")]
    Manifest { path: PathBuf, detail: String },
    #[error("{path} line {line}: {detail}")]
    Entry { path: PathBuf, line: usize, detail: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub kind: CvdKind,
    pub min_normal_gap: f64,
    pub max_input_sim_gap: f64,
    pub target_sim_gap: f64,
    /// Extra simulated gap demanded of targets beyond `target_sim_gap`.
    pub margin: f64,
    pub max_attempts: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            kind: CvdKind::Deuteranopia,
            min_normal_gap: 15.0,
            max_input_sim_gap: 8.0,
            target_sim_gap: 15.0,
            margin: 2.0,
            max_attempts: 20_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Rectangle,
    Disc,
    Glyph,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairMeta {
    pub seed: u64,
    pub kind: CvdKind,
    /// True for pairs whose input already satisfies the gap criterion.
    pub already_cud: bool,
    pub background: [u8; 3],
    pub foreground: [u8; 3],
    pub target_background: [u8; 3],
    pub target_foreground: [u8; 3],
    pub normal_gap: f64,
    pub input_sim_gap: f64,
    pub target_sim_gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub input: RgbImage,
    pub target: RgbImage,
    /// Pixel indices of the background and the foreground shape.
    pub regions: [Vec<usize>; 2],
    pub meta: PairMeta,
}

fn color(px: [u8; 3]) -> [f64; 3] {
    px.map(dequantize)
}

fn to_bytes(rgb: [f64; 3]) -> [u8; 3] {
    rgb.map(quantize)
}

fn hex(px: [u8; 3]) -> String {
    format!("{:02x}{:02x}{:02x}", px[0], px[1], px[2])
}

fn parse_hex(s: &str) -> Option<[u8; 3]> {
    if s.len() != 6 {
        return None;
    }
    let mut out = [0u8; 3];
    for (k, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * k..2 * k + 2)?, 16).ok()?;
    }
    Some(out)
}

pub fn normal_gap(a: [u8; 3], b: [u8; 3]) -> f64 {
    (lightness_px(color(a)) - lightness_px(color(b))).abs()
}

pub fn simulated_gap(a: [u8; 3], b: [u8; 3], kind: CvdKind) -> f64 {
    let l = |c: [u8; 3]| lightness_px(simulate_cvd_px(color(c), kind));
    (l(a) - l(b)).abs()
}

fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    d.min(1.0 - d)
}

/// Hue families prone to red-green confusion: (hue range in degrees, S range, V range).
type Range = (f64, f64);

const FAMILIES: [(Range, Range, Range); 4] = [
    ((-15.0, 15.0), (0.45, 1.0), (0.35, 1.0)),
    ((75.0, 150.0), (0.35, 1.0), (0.3, 0.95)),
    ((15.0, 45.0), (0.45, 1.0), (0.25, 0.75)),
    ((45.0, 75.0), (0.4, 1.0), (0.3, 0.9)),
];

fn hsv_bytes(h_deg: f64, s: f64, v: f64) -> [u8; 3] {
    to_bytes(hsv_to_rgb_px([h_deg.rem_euclid(360.0) / 360.0, s, v]))
}

fn sample_color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    let ((h0, h1), (s0, s1), (v0, v1)) = FAMILIES[rng.gen_range(0..FAMILIES.len())];
    hsv_bytes(rng.gen_range(h0..h1), rng.gen_range(s0..s1), rng.gen_range(v0..v1))
}

fn simulated_lightness(rgb: [f64; 3], kind: CvdKind) -> f64 {
    lightness_px(simulate_cvd_px(rgb, kind))
}

/// Value in [0,1] at which hue `h` and saturation `s` reach simulated
/// lightness `l`, if any; simulated lightness grows with value.
fn solve_value(h: f64, s: f64, l: f64, kind: CvdKind) -> Option<f64> {
    let at = |v: f64| simulated_lightness(hsv_to_rgb_px([h, s, v]), kind);
    if !(0.0..=at(1.0)).contains(&l) {
        return None;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if at(mid) < l {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(hi)
}

/// A saturated red and a green whose value is solved to sit a chosen
/// distance away in simulated lightness. Confusable pairs with a normal gap
/// of 15 only exist near this corner of the gamut.
fn sample_confusable(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> Option<([u8; 3], [u8; 3])> {
    let red = hsv_bytes(
        rng.gen_range(-12.0..12.0),
        rng.gen_range(0.8..1.0),
        rng.gen_range(0.7..1.0),
    );
    let h = rng.gen_range(80.0..160.0) / 360.0;
    let s = rng.gen_range(0.4..1.0);
    let offset = rng.gen_range(0.5..1.0) * cfg.max_input_sim_gap;
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let l = simulated_lightness(color(red), cfg.kind) + sign * offset;
    let v = solve_value(h, s, l, cfg.kind)?;
    let green = to_bytes(hsv_to_rgb_px([h, s, v]));
    Some(if rng.gen_bool(0.5) { (red, green) } else { (green, red) })
}

/// Foreground mask for a random shape covering a moderate share of the frame.
fn sample_shape(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Shape, Vec<bool>) {
    let shape = [Shape::Rectangle, Shape::Disc, Shape::Glyph][rng.gen_range(0..3)];
    let mut mask = vec![false; h * w];
    match shape {
        Shape::Rectangle => {
            let rh = rng.gen_range(h / 4..=h * 3 / 4);
            let rw = rng.gen_range(w / 4..=w * 3 / 4);
            let y0 = rng.gen_range(0..=h - rh);
            let x0 = rng.gen_range(0..=w - rw);
            for y in y0..y0 + rh {
                mask[y * w + x0..y * w + x0 + rw].fill(true);
            }
        }
        Shape::Disc => {
            let side = h.min(w) as f64;
            let r = rng.gen_range(side * 0.2..side * 0.4);
            let cy = rng.gen_range(r..h as f64 - r);
            let cx = rng.gen_range(r..w as f64 - r);
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    mask[y * w + x] = dy * dy + dx * dx <= r * r;
                }
            }
        }
        Shape::Glyph => {
            // random blocks on a 4×4 grid, at least 4 and at most 12 cells lit
            let lit: Vec<bool> = loop {
                let cells: Vec<bool> = (0..16).map(|_| rng.gen_bool(0.5)).collect();
                let n = cells.iter().filter(|&&c| c).count();
                if (4..=12).contains(&n) {
                    break cells;
                }
            };
            for y in 0..h {
                for x in 0..w {
                    mask[y * w + x] = lit[(y * 4 / h) * 4 + x * 4 / w];
                }
            }
        }
    }
    (shape, mask)
}

fn render(h: usize, w: usize, mask: &[bool], bg: [u8; 3], fg: [u8; 3]) -> RgbImage {
    let (b, f) = (color(bg), color(fg));
    RgbImage::from_fn(h, w, |y, x| if mask[y * w + x] { f } else { b }).expect("8-bit colors are in range")
}

fn regions(mask: &[bool]) -> [Vec<usize>; 2] {
    let bg = (0..mask.len()).filter(|&i| !mask[i]).collect();
    let fg = (0..mask.len()).filter(|&i| mask[i]).collect();
    [bg, fg]
}

/// S and V scale factors, cheapest first.
fn scale_candidates() -> Vec<(f64, f64)> {
    let steps: Vec<f64> = (4..=40).map(|k| k as f64 * 0.05).collect();
    let mut out: Vec<(f64, f64)> = steps.iter().flat_map(|&s| steps.iter().map(move |&v| (s, v))).collect();
    out.retain(|&(s, v)| (s, v) != (1.0, 1.0));
    out.sort_by(|a, b| {
        let ca = (a.0 - 1.0).abs() + (a.1 - 1.0).abs();
        let cb = (b.0 - 1.0).abs() + (b.1 - 1.0).abs();
        ca.total_cmp(&cb)
    });
    out
}

/// Rescales S and V of `c` so the pair reaches the required simulated gap.
fn find_target(c: [u8; 3], other: [u8; 3], cfg: &GenConfig, candidates: &[(f64, f64)]) -> Option<[u8; 3]> {
    let [h, s, v] = rgb_to_hsv_px(color(c));
    let need = cfg.target_sim_gap + cfg.margin;
    candidates.iter().find_map(|&(ks, kv)| {
        let (s2, v2) = (s * ks, v * kv);
        if s2 > 1.0 || !(0.05..=1.0).contains(&v2) {
            return None;
        }
        let t = to_bytes(hsv_to_rgb_px([h, s2, v2]));
        let [h2, s3, _] = rgb_to_hsv_px(color(t));
        if s3 > 1e-9 && hue_distance(h, h2) > HUE_TOLERANCE {
            return None;
        }
        (simulated_gap(t, other, cfg.kind) >= need).then_some(t)
    })
}

fn check_size(cfg: &GenConfig) -> Result<(), DataError> {
    if cfg.height < 16 || cfg.width < 16 {
        return Err(DataError::TooSmall(cfg.height, cfg.width));
    }
    Ok(())
}

#[derive(Default)]
struct Rejections {
    normal: usize,
    confusable: usize,
    already: usize,
    target: usize,
}

impl Rejections {
    fn worst(&self) -> &'static str {
        let all = [
            (self.normal, "normal-vision L gap ≥ 15"),
            (self.confusable, "simulated L gap < 8"),
            (self.already, "simulated L gap ≥ 15 on the input"),
            (self.target, "reachable target simulated L gap"),
        ];
        all.iter().max_by_key(|(n, _)| *n).map(|(_, s)| *s).unwrap_or("none")
    }
}

/// A confusable input and its S/V-adjusted target. Deterministic per seed.
pub fn gen_pair(seed: u64, cfg: &GenConfig) -> Result<SamplePair, DataError> {
    check_size(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates = scale_candidates();
    let mut rej = Rejections::default();
    for _ in 0..cfg.max_attempts {
        let Some((bg, fg)) = sample_confusable(&mut rng, cfg) else {
            rej.confusable += 1;
            continue;
        };
        let ng = normal_gap(bg, fg);
        if ng < cfg.min_normal_gap {
            rej.normal += 1;
            continue;
        }
        let sg = simulated_gap(bg, fg, cfg.kind);
        if sg >= cfg.max_input_sim_gap {
            rej.confusable += 1;
            continue;
        }
        let fg_first = rng.gen_bool(0.5);
        let found = if fg_first {
            find_target(fg, bg, cfg, &candidates).map(|t| (bg, t))
        } else {
            find_target(bg, fg, cfg, &candidates).map(|t| (t, fg))
        };
        let Some((tbg, tfg)) = found else {
            rej.target += 1;
            continue;
        };
        let (_, mask) = sample_shape(&mut rng, cfg.height, cfg.width);
        let input = render(cfg.height, cfg.width, &mask, bg, fg);
        let target = render(cfg.height, cfg.width, &mask, tbg, tfg);
        return Ok(SamplePair {
            input,
            target,
            regions: regions(&mask),
            meta: PairMeta {
                seed,
                kind: cfg.kind,
                already_cud: false,
                background: bg,
                foreground: fg,
                target_background: tbg,
                target_foreground: tfg,
                normal_gap: ng,
                input_sim_gap: sg,
                target_sim_gap: simulated_gap(tbg, tfg, cfg.kind),
            },
        });
    }
    Err(DataError::Exhausted {
        attempts: cfg.max_attempts,
        criterion: rej.worst(),
    })
}

/// An input that already meets the simulated gap criterion; target = input.
pub fn gen_cud_pair(seed: u64, cfg: &GenConfig) -> Result<SamplePair, DataError> {
    check_size(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rej = Rejections::default();
    for _ in 0..cfg.max_attempts {
        let (bg, fg) = (sample_color(&mut rng), sample_color(&mut rng));
        let sg = simulated_gap(bg, fg, cfg.kind);
        if sg < cfg.target_sim_gap {
            rej.already += 1;
            continue;
        }
        let (_, mask) = sample_shape(&mut rng, cfg.height, cfg.width);
        let input = render(cfg.height, cfg.width, &mask, bg, fg);
        return Ok(SamplePair {
            target: input.clone(),
            input,
            regions: regions(&mask),
            meta: PairMeta {
                seed,
                kind: cfg.kind,
                already_cud: true,
                background: bg,
                foreground: fg,
                target_background: bg,
                target_foreground: fg,
                normal_gap: normal_gap(bg, fg),
                input_sim_gap: sg,
                target_sim_gap: sg,
            },
        });
    }
    Err(DataError::Exhausted {
        attempts: cfg.max_attempts,
        criterion: rej.worst(),
    })
}

/// Number of already-CUD pairs among `n` for a given fraction.
pub fn cud_count(n: usize, cud_fraction: f64) -> Result<usize, DataError> {
    if !(0.0..=1.0).contains(&cud_fraction) {
        return Err(DataError::Fraction(cud_fraction));
    }
    Ok((n as f64 * cud_fraction).round() as usize)
}

/// `n` pairs with seeds `base_seed..base_seed + n`; already-CUD pairs are
/// spread evenly through the sequence.
pub fn gen_dataset(n: usize, base_seed: u64, cud_fraction: f64, cfg: &GenConfig) -> Result<Vec<SamplePair>, DataError> {
    let k = cud_count(n, cud_fraction)?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = base_seed + i as u64;
            // pair i is already-CUD when ⌊(i+1)k/n⌋ steps past ⌊ik/n⌋
            let is_cud = (i + 1) * k / n > i * k / n;
            if is_cud {
                gen_cud_pair(seed, cfg)
            } else {
                gen_pair(seed, cfg)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub kind: CvdKind,
    pub seed: u64,
    pub already_cud: bool,
    pub input_file: String,
    pub target_file: String,
    pub background: [u8; 3],
    pub foreground: [u8; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

const COLUMNS: [&str; 9] = [
    "id",
    "split",
    "kind",
    "seed",
    "already_cud",
    "input",
    "target",
    "background",
    "foreground",
];

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_MAGIC}\t{}\n{}\n", self.version, COLUMNS.join("\t"));
        for e in &self.entries {
            let fields = [
                e.id.clone(),
                e.split.to_string(),
                e.kind.short_name().to_string(),
                e.seed.to_string(),
                u8::from(e.already_cud).to_string(),
                e.input_file.clone(),
                e.target_file.clone(),
                hex(e.background),
                hex(e.foreground),
            ];
            out.push_str(&fields.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, DataError> {
        let manifest_err = |detail: String| DataError::Manifest {
            path: path.to_path_buf(),
            detail,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| manifest_err("empty manifest".into()))?;
        let version = match header.split('\t').collect::<Vec<_>>()[..] {
            [MANIFEST_MAGIC, v] => v
                .parse::<u32>()
                .map_err(|_| manifest_err(format!("bad version field {v:?}")))?,
            _ => return Err(manifest_err(format!("not a dataset manifest: {header:?}"))),
        };
        if version != MANIFEST_VERSION {
            return Err(manifest_err(format!(
                "unsupported version {version}, expected {MANIFEST_VERSION}"
            )));
        }
        let cols = lines
            .next()
            .ok_or_else(|| manifest_err("missing column header".into()))?;
        if cols.split('\t').ne(COLUMNS.iter().copied()) {
            return Err(manifest_err(format!("unexpected columns: {cols:?}")));
        }
        let mut entries = Vec::new();
        let mut seeds = HashSet::new();
        for (k, line) in lines.enumerate() {
            let line_no = k + 3;
            if line.trim().is_empty() {
                continue;
            }
            let entry_err = |detail: String| DataError::Entry {
                path: path.to_path_buf(),
                line: line_no,
                detail,
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != COLUMNS.len() {
                return Err(entry_err(format!(
                    "expected {} fields, found {}",
                    COLUMNS.len(),
                    f.len()
                )));
            }
            let named = |i: usize, detail: String| entry_err(format!("entry {}: {}: {detail}", f[0], COLUMNS[i]));
            let entry = ManifestEntry {
                id: f[0].to_string(),
                split: f[1].parse().map_err(|e| named(1, e))?,
                kind: f[2]
                    .parse()
                    .map_err(|e: <CvdKind as FromStr>::Err| named(2, e.to_string()))?,
                seed: f[3]
                    .parse()
                    .map_err(|_| named(3, format!("{:?} is not an integer", f[3])))?,
                already_cud: match f[4] {
                    "0" => false,
                    "1" => true,
                    other => return Err(named(4, format!("{other:?} is not 0 or 1"))),
                },
                input_file: f[5].to_string(),
                target_file: f[6].to_string(),
                background: parse_hex(f[7]).ok_or_else(|| named(7, format!("{:?} is not a hex color", f[7])))?,
                foreground: parse_hex(f[8]).ok_or_else(|| named(8, format!("{:?} is not a hex color", f[8])))?,
            };
            if !seeds.insert(entry.seed) {
                return Err(named(3, format!("duplicate seed {}", entry.seed)));
            }
            entries.push(entry);
        }
        Ok(Self { version, entries })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes PNGs and a manifest into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, train: &[SamplePair], val: &[SamplePair]) -> Result<DatasetManifest, DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(train.len() + val.len());
    for (split, pairs) in [(Split::Train, train), (Split::Val, val)] {
        for p in pairs {
            let id = format!("{split}_{:06}", p.meta.seed);
            let input_file = format!("{id}_input.png");
            let target_file = format!("{id}_target.png");
            write_png(&p.input, &dir.join(&input_file))?;
            write_png(&p.target, &dir.join(&target_file))?;
            entries.push(ManifestEntry {
                id,
                split,
                kind: p.meta.kind,
                seed: p.meta.seed,
                already_cud: p.meta.already_cud,
                input_file,
                target_file,
                background: p.meta.background,
                foreground: p.meta.foreground,
            });
        }
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        entries,
    };
    let path = dir.join(MANIFEST_NAME);
    // rejects duplicate seeds before anything refers to the manifest
    DatasetManifest::parse(&manifest.to_text(), &path)?;
    fs::write(&path, manifest.to_text()).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, DataError> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    DatasetManifest::parse(&text, &path)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<SamplePair>,
    pub val: Vec<SamplePair>,
}

/// Loads every pair listed in the manifest. Regions are recovered from the
/// listed foreground color; pixels of any other color are rejected.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest = read_manifest(dir)?;
    let mpath = dir.join(MANIFEST_NAME);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (k, e) in manifest.entries.iter().enumerate() {
        let entry_err = |detail: String| DataError::Entry {
            path: mpath.clone(),
            line: k + 3,
            detail: format!("entry {}: {detail}", e.id),
        };
        let input = read_png(&dir.join(&e.input_file))?;
        let target = read_png(&dir.join(&e.target_file))?;
        if input.height() != target.height() || input.width() != target.width() {
            return Err(entry_err("input and target sizes differ".into()));
        }
        let mut mask = Vec::with_capacity(input.num_pixels());
        let (mut tbg, mut tfg) = (None, None);
        for (i, px) in input.pixels().enumerate() {
            let b = to_bytes(px);
            let is_fg = if b == e.foreground {
                true
            } else if b == e.background {
                false
            } else {
                return Err(entry_err(format!(
                    "input pixel {i} has color {} not in the manifest",
                    hex(b)
                )));
            };
            let slot = if is_fg { &mut tfg } else { &mut tbg };
            slot.get_or_insert(to_bytes(target.pixel_at(i)));
            mask.push(is_fg);
        }
        let (Some(tbg), Some(tfg)) = (tbg, tfg) else {
            return Err(entry_err("input does not contain both colors".into()));
        };
        let pair = SamplePair {
            regions: regions(&mask),
            meta: PairMeta {
                seed: e.seed,
                kind: e.kind,
                already_cud: e.already_cud,
                background: e.background,
                foreground: e.foreground,
                target_background: tbg,
                target_foreground: tfg,
                normal_gap: normal_gap(e.background, e.foreground),
                input_sim_gap: simulated_gap(e.background, e.foreground, e.kind),
                target_sim_gap: simulated_gap(tbg, tfg, e.kind),
            },
            input,
            target,
        };
        match e.split {
            Split::Train => train.push(pair),
            Split::Val => val.push(pair),
        }
    }
    Ok(Dataset { manifest, train, val })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::stencil_mask;
    use crate::metrics::cud_gap;

    fn small() -> GenConfig {
        GenConfig {
            height: 16,
            width: 20,
            ..GenConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = small();
        assert_eq!(gen_pair(7, &cfg).unwrap(), gen_pair(7, &cfg).unwrap());
        assert_ne!(gen_pair(7, &cfg).unwrap().input, gen_pair(8, &cfg).unwrap().input);
    }

    #[test]
    fn pairs_meet_gap_criteria_by_metric() {
        for kind in [CvdKind::Deuteranopia, CvdKind::Protanopia] {
            let cfg = GenConfig { kind, ..small() };
            for seed in 0..20 {
                let p = gen_pair(seed, &cfg).unwrap();
                let [bg, fg] = &p.regions;
                assert!(!bg.is_empty() && !fg.is_empty());
                let l = |img: &RgbImage, r: &[usize]| {
                    r.iter().map(|&i| lightness_px(img.pixel_at(i))).sum::<f64>() / r.len() as f64
                };
                assert!((l(&p.input, bg) - l(&p.input, fg)).abs() >= 15.0);
                assert!(cud_gap(&p.input, bg, fg, kind).unwrap() < 8.0);
                assert!(cud_gap(&p.target, bg, fg, kind).unwrap() >= 17.0);
                assert!((cud_gap(&p.target, bg, fg, kind).unwrap() - p.meta.target_sim_gap).abs() < 0.5);
            }
        }
    }

    #[test]
    fn target_keeps_hue_and_changes_one_region() {
        let cfg = small();
        for seed in 0..20 {
            let p = gen_pair(seed, &cfg).unwrap();
            let mut changed = [false, false];
            for (r, region) in p.regions.iter().enumerate() {
                for &i in region {
                    let (a, b) = (p.input.pixel_at(i), p.target.pixel_at(i));
                    changed[r] |= a != b;
                    let (ha, hb) = (rgb_to_hsv_px(a), rgb_to_hsv_px(b));
                    if ha[1] > 0.0 && hb[1] > 0.0 {
                        assert!(hue_distance(ha[0], hb[0]) <= HUE_TOLERANCE);
                    }
                }
            }
            assert_eq!(changed.iter().filter(|&&c| c).count(), 1);
        }
    }

    #[test]
    fn cud_pairs_are_identity() {
        let cfg = small();
        for seed in 0..10 {
            let p = gen_cud_pair(seed, &cfg).unwrap();
            assert_eq!(p.input, p.target);
            assert!(stencil_mask(&p.input, &p.target).unwrap().is_empty());
            assert!(cud_gap(&p.input, &p.regions[0], &p.regions[1], cfg.kind).unwrap() >= 15.0);
        }
    }

    #[test]
    fn impossible_config_names_criterion() {
        let cfg = GenConfig {
            min_normal_gap: 200.0,
            max_attempts: 50,
            ..small()
        };
        match gen_pair(1, &cfg) {
            Err(DataError::Exhausted { criterion, .. }) => assert!(criterion.contains("normal-vision")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            gen_pair(1, &GenConfig { height: 8, ..small() }),
            Err(DataError::TooSmall(8, 20))
        ));
    }

    #[test]
    fn mixing_ratio() {
        let cfg = small();
        for (n, frac) in [(10, 0.3), (7, 0.5), (12, 0.0), (5, 1.0)] {
            let pairs = gen_dataset(n, 100, frac, &cfg).unwrap();
            let cud = pairs.iter().filter(|p| p.meta.already_cud).count();
            assert!((cud as f64 - n as f64 * frac).abs() <= 1.0);
            let seeds: HashSet<u64> = pairs.iter().map(|p| p.meta.seed).collect();
            assert_eq!(seeds.len(), n);
        }
        assert!(gen_dataset(3, 0, 1.5, &cfg).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let pairs = gen_dataset(10, 0, 0.2, &cfg).unwrap();
        let (train, val) = pairs.split_at(7);
        let m = write_dataset(dir.path(), train, val).unwrap();
        assert_eq!(m.entries.len(), 10);
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        assert_eq!(ds.train.len(), 7);
        assert_eq!(ds.val.len(), 3);
        for (a, b) in ds.train.iter().chain(&ds.val).zip(&pairs) {
            assert_eq!(a.input, b.input);
            assert_eq!(a.target, b.target);
            assert_eq!(a.regions, b.regions);
            assert_eq!(a.meta, b.meta);
        }
    }

    #[test]
    fn corrupt_manifest_entry_named() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = gen_dataset(3, 0, 0.0, &small()).unwrap();
        write_dataset(dir.path(), &pairs, &[]).unwrap();
        let path = dir.path().join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).unwrap();
        let bad = text.replacen("\tdeutan\t1\t", "\tdeutan\tx1\t", 1);
        fs::write(&path, bad).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("train_000001"), "{err}");
        assert!(err.contains("seed"), "{err}");

        fs::write(&path, text.replace("cudkit-dataset\t1", "cudkit-dataset\t9")).unwrap();
        assert!(read_dataset(dir.path()).unwrap_err().to_string().contains("version"));
        fs::write(&path, &text).unwrap();
        fs::remove_file(dir.path().join("train_000002_target.png")).unwrap();
        assert!(read_dataset(dir.path())
            .unwrap_err()
            .to_string()
            .contains("train_000002_target.png"));
    }
}
