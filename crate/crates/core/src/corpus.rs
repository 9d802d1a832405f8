//! Synthetic action-discrimination corpus.
//!
//! Each item is a procedurally rendered 32x32 scene of two colored shapes
//! whose relative geometry encodes one of six actions, paired with a
//! grammar-generated caption. The grammar also records the ground-truth
//! subject-action-object triplet, which the mock LLM backend must recover and
//! against which the test suite checks the whole knowledge pipeline.
//!
//! On-disk layout under a corpus directory:
//!   images/<caption_id>.ppm   binary P6 portable pixmap
//!   <split>.manifest          one JSON record per line
//!   truth.triplets            one JSON record per line (tests + oracles only)

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng as _;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

pub const DEFAULT_IMAGE_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Star,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Star,
    ];

    pub fn noun(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Star => "star",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [50, 90, 230],
            Color::Yellow => [230, 210, 50],
        }
    }
}

/// The closed verb set. Each action maps to a deterministic geometric
/// relation between subject and object in the rendered scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Push,
    Pull,
    Hold,
    Chase,
    Face,
    Avoid,
}

impl Action {
    pub const ALL: [Action; 6] = [
        Action::Push,
        Action::Pull,
        Action::Hold,
        Action::Chase,
        Action::Face,
        Action::Avoid,
    ];

    /// Base verb, as it appears in triplets.
    pub fn base(self) -> &'static str {
        match self {
            Action::Push => "push",
            Action::Pull => "pull",
            Action::Hold => "hold",
            Action::Chase => "chase",
            Action::Face => "face",
            Action::Avoid => "avoid",
        }
    }

    /// Third-person form, as it appears in captions.
    pub fn conjugated(self) -> &'static str {
        match self {
            Action::Push => "pushes",
            Action::Pull => "pulls",
            Action::Hold => "holds",
            Action::Chase => "chases",
            Action::Face => "faces",
            Action::Avoid => "avoids",
        }
    }

    pub fn from_base(word: &str) -> Option<Action> {
        Action::ALL.iter().copied().find(|a| a.base() == word)
    }

    pub fn from_conjugated(word: &str) -> Option<Action> {
        Action::ALL.iter().copied().find(|a| a.conjugated() == word)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Entity {
    pub shape: ShapeKind,
    pub color: Color,
}

impl Entity {
    pub fn phrase(&self) -> String {
        format!("{} {}", self.color.word(), self.shape.noun())
    }
}

/// Full description of one renderable scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub subject: Entity,
    pub object: Entity,
    pub action: Action,
    pub layout_seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.subject == self.object {
            return Err(Error::Validation(
                "scene subject and object must differ in at least one attribute".into(),
            ));
        }
        Ok(())
    }

    /// Grammar caption: `a <color> <shape> <verb>s a <color> <shape>`.
    pub fn caption(&self) -> String {
        format!(
            "a {} {} a {}",
            self.subject.phrase(),
            self.action.conjugated(),
            self.object.phrase()
        )
    }

    /// Ground-truth triplet recorded by the grammar.
    pub fn truth_triplet(&self) -> (String, String, String) {
        (
            self.subject.shape.noun().to_string(),
            self.action.base().to_string(),
            self.object.shape.noun().to_string(),
        )
    }
}

// ── rendering ────────────────────────────────────────────────────────

struct Canvas {
    size: usize,
    pixels: Vec<u8>, // H * W * 3
}

impl Canvas {
    fn new(size: usize) -> Self {
        Canvas {
            size,
            pixels: vec![0u8; size * size * 3],
        }
    }

    fn put(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.size as i64 || y >= self.size as i64 {
            return;
        }
        let idx = (y as usize * self.size + x as usize) * 3;
        self.pixels[idx..idx + 3].copy_from_slice(&rgb);
    }

    fn shape(&mut self, kind: ShapeKind, cx: i64, cy: i64, r: i64, rgb: [u8; 3]) {
        for dy in -r..=r {
            for dx in -r..=r {
                let inside = match kind {
                    ShapeKind::Circle => dx * dx + dy * dy <= r * r,
                    ShapeKind::Square => dx.abs() <= r - 1 && dy.abs() <= r - 1,
                    ShapeKind::Triangle => dy >= -r && dy <= r && dx.abs() * 2 <= dy + r,
                    ShapeKind::Star => {
                        dx.abs() + dy.abs() <= r - 1 || dx == 0 || dy == 0
                    }
                };
                if inside {
                    self.put(cx + dx, cy + dy, rgb);
                }
            }
        }
    }

    fn hline(&mut self, y: i64, x0: i64, x1: i64, rgb: [u8; 3]) {
        for x in x0..=x1 {
            self.put(x, y, rgb);
        }
    }

    fn vline(&mut self, x: i64, y0: i64, y1: i64, rgb: [u8; 3]) {
        for y in y0..=y1 {
            self.put(x, y, rgb);
        }
    }
}

const MARKER: [u8; 3] = [255, 255, 255];

/// Rasterize a scene. Same spec always yields identical pixels; the layout
/// seed only jitters the whole composition by up to one pixel.
pub fn render_scene(spec: &SceneSpec, image_size: usize) -> Result<Tensor<f32>> {
    spec.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.layout_seed);
    let jx: i64 = rng.gen_range(-1..=1);
    let jy: i64 = rng.gen_range(-1..=1);
    let s = image_size as i64 / 32; // geometry is authored on a 32-grid
    if image_size % 32 != 0 {
        return Err(Error::Validation(format!(
            "image size {image_size} must be a multiple of 32"
        )));
    }

    let mut canvas = Canvas::new(image_size);
    let sub = spec.subject;
    let obj = spec.object;
    let r = 5 * s;
    let at = |x: i64, y: i64| (x * s + jx, y * s + jy);

    match spec.action {
        Action::Push => {
            // contact plus a pressure bar at the interface
            let (sx, sy) = at(9, 16);
            let (ox, oy) = at(20, 16);
            canvas.shape(sub.shape, sx, sy, r, sub.color.rgb());
            canvas.shape(obj.shape, ox, oy, r, obj.color.rgb());
            let (mx, my) = at(14, 16);
            for dy in -2 * s..=2 * s {
                canvas.vline(mx, my + dy, my + dy, MARKER);
                canvas.vline(mx + 1, my + dy, my + dy, MARKER);
            }
        }
        Action::Pull => {
            // separation with a tow line between centers
            let (sx, sy) = at(8, 16);
            let (ox, oy) = at(24, 16);
            canvas.shape(sub.shape, sx, sy, r, sub.color.rgb());
            canvas.shape(obj.shape, ox, oy, r, obj.color.rgb());
            canvas.hline(sy, sx + r, ox - r, MARKER);
        }
        Action::Hold => {
            // subject above, object below, overlapping column
            let (sx, sy) = at(16, 9);
            let (ox, oy) = at(16, 21);
            canvas.shape(obj.shape, ox, oy, r, obj.color.rgb());
            canvas.shape(sub.shape, sx, sy, r, sub.color.rgb());
        }
        Action::Chase => {
            // wide gap, motion dashes trailing the subject
            let (sx, sy) = at(10, 16);
            let (ox, oy) = at(26, 16);
            canvas.shape(sub.shape, sx, sy, r, sub.color.rgb());
            canvas.shape(obj.shape, ox, oy, r, obj.color.rgb());
            let (dx, dy) = at(2, 16);
            canvas.hline(dy, dx - 1, dx, MARKER);
            canvas.hline(dy - 2 * s, dx - 1, dx, MARKER);
            canvas.hline(dy + 2 * s, dx - 1, dx, MARKER);
        }
        Action::Face => {
            // separated, with facing-edge ticks on both shapes
            let (sx, sy) = at(8, 16);
            let (ox, oy) = at(24, 16);
            canvas.shape(sub.shape, sx, sy, r, sub.color.rgb());
            canvas.shape(obj.shape, ox, oy, r, obj.color.rgb());
            canvas.vline(sx + r + s, sy - 2 * s, sy + 2 * s, MARKER);
            canvas.vline(ox - r - s, oy - 2 * s, oy + 2 * s, MARKER);
        }
        Action::Avoid => {
            // maximal diagonal separation
            let (sx, sy) = at(8, 8);
            let (ox, oy) = at(24, 24);
            canvas.shape(sub.shape, sx, sy, r, sub.color.rgb());
            canvas.shape(obj.shape, ox, oy, r, obj.color.rgb());
        }
    }

    let data: Vec<f32> = canvas.pixels.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![image_size, image_size, 3], data)
}

// ── PPM I/O ──────────────────────────────────────────────────────────

/// Write a `[H, W, 3]` tensor with values in [0, 1] as binary P6.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::Validation(format!(
            "expected [H, W, 3] image, got {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut out = Vec::with_capacity(h * w * 3 + 32);
    out.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    for &v in image.data() {
        out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    let mut r = BufReader::new(&bytes[..]);
    let mut header = String::new();
    // magic, dimensions, maxval: three whitespace-delimited tokens lines
    let mut fields = Vec::new();
    while fields.len() < 4 {
        header.clear();
        r.read_line(&mut header)?;
        if header.is_empty() {
            return Err(Error::Data(format!("{}: truncated PPM header", path.display())));
        }
        let line = header.split('#').next().unwrap_or("");
        fields.extend(line.split_whitespace().map(str::to_string));
    }
    if fields[0] != "P6" {
        return Err(Error::Data(format!("{}: not a binary PPM", path.display())));
    }
    let w: usize = fields[1].parse().map_err(|_| Error::Data("bad PPM width".into()))?;
    let h: usize = fields[2].parse().map_err(|_| Error::Data("bad PPM height".into()))?;
    if fields[3] != "255" {
        return Err(Error::Data("PPM maxval must be 255".into()));
    }
    let mut data = vec![0u8; w * h * 3];
    r.read_exact(&mut data)
        .map_err(|_| Error::Data(format!("{}: truncated PPM payload", path.display())))?;
    Tensor::new(
        vec![h, w, 3],
        data.iter().map(|&b| b as f32 / 255.0).collect(),
    )
}

// ── manifests and corpus build ───────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestItem {
    pub caption_id: String,
    pub image_path: String,
    pub caption: String,
}

#[derive(Clone, Debug)]
pub struct CorpusManifest {
    pub split: String,
    pub root: PathBuf,
    pub items: Vec<ManifestItem>,
}

impl CorpusManifest {
    pub fn load(corpus_dir: &Path, split: &str) -> Result<Self> {
        let path = corpus_dir.join(format!("{split}.manifest"));
        let file = fs::File::open(&path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut items = Vec::new();
        let mut ids = HashSet::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let item: ManifestItem = serde_json::from_str(&line).map_err(|e| {
                Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            if !ids.insert(item.caption_id.clone()) {
                return Err(Error::Data(format!(
                    "duplicate caption_id {} in {split} manifest",
                    item.caption_id
                )));
            }
            items.push(item);
        }
        Ok(CorpusManifest {
            split: split.to_string(),
            root: corpus_dir.to_path_buf(),
            items,
        })
    }

    pub fn image(&self, idx: usize) -> Result<Tensor<f32>> {
        read_ppm(&self.root.join(&self.items[idx].image_path))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TruthRecord {
    pub caption_id: String,
    pub subject: String,
    pub action: String,
    pub object: String,
}

pub fn load_truth(corpus_dir: &Path) -> Result<Vec<TruthRecord>> {
    let path = corpus_dir.join("truth.triplets");
    let file = fs::File::open(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 256,
            val: 64,
            test: 64,
        }
    }
}

/// Build the corpus on disk. Deterministic in `(counts, seed, image_size)`:
/// two builds produce byte-identical trees.
///
/// Entity pairs are disjoint across splits. Val and test items come in pairs
/// sharing entities but differing in action, so every query has at least one
/// action-confusable distractor in its gallery.
pub fn build_corpus(
    out_dir: &Path,
    counts: SplitCounts,
    seed: u64,
    image_size: usize,
) -> Result<Vec<CorpusManifest>> {
    let entities: Vec<Entity> = ShapeKind::ALL
        .iter()
        .flat_map(|&shape| Color::ALL.iter().map(move |&color| Entity { shape, color }))
        .collect();
    let mut pairs: Vec<(Entity, Entity)> = Vec::new();
    for &a in &entities {
        for &b in &entities {
            if a != b {
                pairs.push((a, b));
            }
        }
    }
    // deterministic shuffle
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for i in (1..pairs.len()).rev() {
        let j = rng.gen_range(0..=i);
        pairs.swap(i, j);
    }

    for (split, n) in [("val", counts.val), ("test", counts.test)] {
        if n < 2 || n % 2 != 0 {
            return Err(Error::Validation(format!(
                "{split} count {n} must be even and at least 2 so every item has an action distractor"
            )));
        }
    }
    let val_pairs = counts.val / 2;
    let test_pairs = counts.test / 2;
    let train_pairs_avail = pairs
        .len()
        .checked_sub(val_pairs + test_pairs)
        .ok_or_else(|| Error::Validation("not enough entity pairs for the requested splits".into()))?;
    if counts.train > train_pairs_avail * 2 || counts.train == 0 {
        return Err(Error::Validation(format!(
            "train count {} not in 1..={} (two items per remaining entity pair)",
            counts.train,
            train_pairs_avail * 2
        )));
    }

    fs::create_dir_all(out_dir.join("images"))?;
    let mut manifests = Vec::new();
    let mut truth_lines = Vec::new();
    let mut pair_cursor = 0usize;

    for (split, n_items) in [
        ("train", counts.train),
        ("val", counts.val),
        ("test", counts.test),
    ] {
        let n_pairs = match split {
            "train" => {
                // two-item pairs first, then singles
                counts.train - counts.train / 2
            }
            _ => n_items / 2,
        };
        let split_pairs = &pairs[pair_cursor..pair_cursor + n_pairs];
        pair_cursor += n_pairs;

        // Deal actions off a single rotating counter; a pair taking two items
        // receives consecutive verbs, which are always distinct.
        let mut specs = Vec::with_capacity(n_items);
        let mut verb_counter = 0usize;
        let doubles = n_items - n_pairs;
        for (pi, &(subject, object)) in split_pairs.iter().enumerate() {
            let take = if pi < doubles { 2 } else { 1 };
            for _ in 0..take {
                let action = Action::ALL[verb_counter % Action::ALL.len()];
                verb_counter += 1;
                specs.push(SceneSpec {
                    subject,
                    object,
                    action,
                    layout_seed: seed
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        .wrapping_add(specs.len() as u64)
                        ^ split_tag(split),
                });
            }
        }

        let mut items = Vec::with_capacity(n_items);
        for (idx, spec) in specs.iter().enumerate() {
            let caption_id = format!("{split}-{idx:04}");
            let image_rel = format!("images/{caption_id}.ppm");
            let image = render_scene(spec, image_size)?;
            write_ppm(&out_dir.join(&image_rel), &image)?;
            let (s, a, o) = spec.truth_triplet();
            truth_lines.push(serde_json::to_string(&TruthRecord {
                caption_id: caption_id.clone(),
                subject: s,
                action: a,
                object: o,
            })?);
            items.push(ManifestItem {
                caption_id,
                image_path: image_rel,
                caption: spec.caption(),
            });
        }

        let manifest_path = out_dir.join(format!("{split}.manifest"));
        let mut f = fs::File::create(&manifest_path)?;
        for item in &items {
            writeln!(f, "{}", serde_json::to_string(item)?)?;
        }
        manifests.push(CorpusManifest {
            split: split.to_string(),
            root: out_dir.to_path_buf(),
            items,
        });
    }

    let mut f = fs::File::create(out_dir.join("truth.triplets"))?;
    for line in &truth_lines {
        writeln!(f, "{line}")?;
    }
    Ok(manifests)
}

fn split_tag(split: &str) -> u64 {
    match split {
        "train" => 0x5452,
        "val" => 0x5641,
        _ => 0x5445,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(action: Action, seed: u64) -> SceneSpec {
        SceneSpec {
            subject: Entity {
                shape: ShapeKind::Circle,
                color: Color::Red,
            },
            object: Entity {
                shape: ShapeKind::Square,
                color: Color::Blue,
            },
            action,
            layout_seed: seed,
        }
    }

    #[test]
    fn caption_follows_grammar() {
        let s = spec(Action::Push, 0);
        assert_eq!(s.caption(), "a red circle pushes a blue square");
        assert_eq!(
            s.truth_triplet(),
            ("circle".into(), "push".into(), "square".into())
        );
    }

    #[test]
    fn rendering_is_deterministic_and_in_range() {
        let s = spec(Action::Chase, 1234);
        let a = render_scene(&s, 32).unwrap();
        let b = render_scene(&s, 32).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn identical_entities_rejected() {
        let e = Entity {
            shape: ShapeKind::Star,
            color: Color::Green,
        };
        let bad = SceneSpec {
            subject: e,
            object: e,
            action: Action::Face,
            layout_seed: 0,
        };
        assert!(render_scene(&bad, 32).is_err());
    }

    #[test]
    fn actions_render_pairwise_distinct_over_full_grid() {
        let entities: Vec<Entity> = ShapeKind::ALL
            .iter()
            .flat_map(|&shape| Color::ALL.iter().map(move |&color| Entity { shape, color }))
            .collect();
        for &a in &entities {
            for &b in &entities {
                if a == b {
                    continue;
                }
                let renders: Vec<Tensor<f32>> = Action::ALL
                    .iter()
                    .map(|&action| {
                        render_scene(
                            &SceneSpec {
                                subject: a,
                                object: b,
                                action,
                                layout_seed: 0,
                            },
                            32,
                        )
                        .unwrap()
                    })
                    .collect();
                for i in 0..renders.len() {
                    for j in i + 1..renders.len() {
                        assert_ne!(
                            renders[i].data(),
                            renders[j].data(),
                            "{:?} vs {:?} render identically",
                            Action::ALL[i],
                            Action::ALL[j]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn ppm_round_trip_preserves_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let img = render_scene(&spec(Action::Hold, 7), 32).unwrap();
        let path = dir.path().join("x.ppm");
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(img.data(), back.data());
    }

    #[test]
    fn build_is_deterministic_balanced_and_distractored() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let counts = SplitCounts::default();
        let m1 = build_corpus(dir1.path(), counts, 99, 32).unwrap();
        let m2 = build_corpus(dir2.path(), counts, 99, 32).unwrap();

        assert_eq!(m1.len(), 3);
        assert_eq!(m1[0].len(), 256);
        assert_eq!(m1[1].len(), 64);
        assert_eq!(m1[2].len(), 64);

        // byte-identical builds
        for split in ["train", "val", "test"] {
            let f1 = fs::read(dir1.path().join(format!("{split}.manifest"))).unwrap();
            let f2 = fs::read(dir2.path().join(format!("{split}.manifest"))).unwrap();
            assert_eq!(f1, f2);
        }
        for item in m1.iter().flat_map(|m| &m.items) {
            let b1 = fs::read(dir1.path().join(&item.image_path)).unwrap();
            let b2 = fs::read(dir2.path().join(&item.image_path)).unwrap();
            assert_eq!(b1, b2, "{}", item.caption_id);
        }

        // verb balance within one per split
        for m in &m1 {
            let mut counts = std::collections::HashMap::new();
            for item in &m.items {
                let verb = item
                    .caption
                    .split_whitespace()
                    .find(|w| Action::from_conjugated(w).is_some())
                    .unwrap()
                    .to_string();
                *counts.entry(verb).or_insert(0usize) += 1;
            }
            let min = counts.values().min().unwrap();
            let max = counts.values().max().unwrap();
            assert!(max - min <= 1, "{}: verb counts {counts:?}", m.split);
        }

        // split disjointness by entity pair (captions encode the pair)
        let pair_of = |caption: &str| {
            let words: Vec<&str> = caption.split_whitespace().collect();
            (words[1].to_string(), words[2].to_string(), words[5].to_string(), words[6].to_string())
        };
        let sets: Vec<HashSet<_>> = m1
            .iter()
            .map(|m| m.items.iter().map(|i| pair_of(&i.caption)).collect())
            .collect();
        assert!(sets[0].is_disjoint(&sets[1]));
        assert!(sets[0].is_disjoint(&sets[2]));
        assert!(sets[1].is_disjoint(&sets[2]));

        // every val/test item has a same-entities-different-action distractor
        for m in &m1[1..] {
            for (i, item) in m.items.iter().enumerate() {
                let p = pair_of(&item.caption);
                let found = m
                    .items
                    .iter()
                    .enumerate()
                    .any(|(j, other)| j != i && pair_of(&other.caption) == p && other.caption != item.caption);
                assert!(found, "no distractor for {}", item.caption_id);
            }
        }

        // truth agrees with captions
        let truth = load_truth(dir1.path()).unwrap();
        assert_eq!(truth.len(), 256 + 64 + 64);
        for (rec, item) in truth.iter().zip(m1.iter().flat_map(|m| &m.items)) {
            assert_eq!(rec.caption_id, item.caption_id);
            assert!(item.caption.contains(&rec.subject));
            assert!(item.caption.contains(&rec.object));
        }
    }

    #[test]
    fn infeasible_counts_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bad = SplitCounts {
            train: 10_000,
            val: 64,
            test: 64,
        };
        assert!(build_corpus(dir.path(), bad, 1, 32).is_err());
        let odd = SplitCounts {
            train: 16,
            val: 63,
            test: 64,
        };
        assert!(build_corpus(dir.path(), odd, 1, 32).is_err());
    }
}
