//! Parametric shape scenes, their renderer, and bilingual caption grammars.
//!
//! Pixel mapping (both resolutions, normalized coordinates `u = (x+½)/res`):
//! - background black, or a 4-pixel-periodic gray (0.4) tile pattern when a
//!   motif is present;
//! - shape centred at `cx ∈ {0.3, 0.5, 0.7}` (left/center/right), `cy = 0.5`,
//!   half-extent 0.18 (small) or 0.30 (large), filled with a saturated color;
//! - circle of radius r, square of half-side 0.7r, upward triangle of height
//!   2r and base 2.2r.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{write_png, Image};
use crate::textcond::{tokenize, Caption, Language};

macro_rules! attribute_enum {
    ($name:ident { $($var:ident = $a:literal / $b:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($var),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];

            pub fn index(self) -> usize {
                self as usize
            }

            /// Terminal realizing this value in the given language.
            pub fn word(self, lang: Language) -> &'static str {
                match (self, lang) {
                    $(($name::$var, Language::A) => $a, ($name::$var, Language::B) => $b,)+
                }
            }
        }
    };
}

attribute_enum!(ShapeKind { Circle = "circle" / "yuan", Square = "square" / "fang", Triangle = "triangle" / "sanjiao" });
attribute_enum!(Color {
    Red = "red" / "hong",
    Green = "green" / "lv",
    Blue = "blue" / "lan",
    Yellow = "yellow" / "huang",
    Cyan = "cyan" / "qing",
    Magenta = "magenta" / "zi",
});
attribute_enum!(Position { Left = "left" / "zuo", Center = "center" / "zhong", Right = "right" / "you" });
attribute_enum!(Size { Small = "small" / "xiao", Large = "large" / "da" });

/// B-exclusive background motifs. Each is a binary 4×4 tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motif {
    Yunwen,
    Huiwen,
    Wanzi,
    Lingge,
    Bowen,
    Dianwen,
    Gewen,
    Tiaowen,
}

impl Motif {
    pub const ALL: &'static [Motif] = &[
        Motif::Yunwen,
        Motif::Huiwen,
        Motif::Wanzi,
        Motif::Lingge,
        Motif::Bowen,
        Motif::Dianwen,
        Motif::Gewen,
        Motif::Tiaowen,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn word(self) -> &'static str {
        match self {
            Motif::Yunwen => "yunwen",
            Motif::Huiwen => "huiwen",
            Motif::Wanzi => "wanzi",
            Motif::Lingge => "lingge",
            Motif::Bowen => "bowen",
            Motif::Dianwen => "dianwen",
            Motif::Gewen => "gewen",
            Motif::Tiaowen => "tiaowen",
        }
    }

    /// Tile membership at pixel `(x, y)`; the tile repeats every 4 pixels.
    pub fn tile(self, x: usize, y: usize) -> bool {
        let (x, y) = (x % 4, y % 4);
        match self {
            Motif::Yunwen => y % 2 == 0,
            Motif::Huiwen => x % 2 == 0,
            Motif::Wanzi => (x + y) % 2 == 0,
            Motif::Lingge => (x + 4 - y) % 4 == 0,
            Motif::Bowen => (x + y) % 4 == 3,
            Motif::Dianwen => x % 2 == 0 && y % 2 == 0,
            Motif::Gewen => x == 0 || y == 0,
            Motif::Tiaowen => y < 2,
        }
    }
}

/// Gray level of motif pattern pixels.
pub const MOTIF_LEVEL: f64 = 0.4;
pub const RESOLUTIONS: [usize; 2] = [16, 32];
pub const FILLERS_A: [&str; 14] = [
    "bright", "simple", "clean", "plain", "sharp", "solid", "flat", "neat", "bold", "crisp", "smooth", "tidy",
    "vivid", "calm",
];
pub const FILLERS_B: [&str; 14] = [
    "liang", "jian", "jing", "su", "rui", "shi", "ping", "zheng", "cu", "cui", "hua", "qi", "xian", "mei",
];
pub const FUNCTION_A: [&str; 4] = ["a", "on", "the", "at"];
pub const FUNCTION_B: [&str; 4] = ["yige", "zai", "de", "bian"];

/// One drawable scene: the attribute tuple a caption describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Scene {
    pub shape: ShapeKind,
    pub color: Color,
    pub position: Position,
    pub size: Size,
    pub motif: Option<Motif>,
}

/// Number of motif-free attribute classes.
pub const NUM_CLASSES: usize = 3 * 6 * 3 * 2;

impl Scene {
    /// Motif-free scene from its class index in `0..NUM_CLASSES`.
    pub fn from_class(idx: usize) -> Self {
        assert!(idx < NUM_CLASSES);
        let size = Size::ALL[idx % 2];
        let position = Position::ALL[(idx / 2) % 3];
        let color = Color::ALL[(idx / 6) % 6];
        let shape = ShapeKind::ALL[idx / 36];
        Scene {
            shape,
            color,
            position,
            size,
            motif: None,
        }
    }

    pub fn class_index(&self) -> usize {
        ((self.shape.index() * 6 + self.color.index()) * 3 + self.position.index()) * 2 + self.size.index()
    }

    pub fn with_motif(mut self, motif: Option<Motif>) -> Self {
        self.motif = motif;
        self
    }

    /// Every motif-free scene in class order.
    pub fn all() -> impl Iterator<Item = Scene> {
        (0..NUM_CLASSES).map(Scene::from_class)
    }
}

pub fn sample_scene(seed: u64, allow_motif: bool) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_scene_with(&mut rng, allow_motif)
}

pub fn sample_scene_with<R: Rng + ?Sized>(rng: &mut R, allow_motif: bool) -> Scene {
    let class = rng.gen_range(0..NUM_CLASSES);
    let motif = if allow_motif && rng.gen_bool(0.5) {
        Some(Motif::ALL[rng.gen_range(0..Motif::ALL.len())])
    } else {
        None
    };
    Scene::from_class(class).with_motif(motif)
}

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Magenta => [1.0, 0.0, 1.0],
        }
    }
}

impl Position {
    pub fn center_u(self) -> f64 {
        match self {
            Position::Left => 0.3,
            Position::Center => 0.5,
            Position::Right => 0.7,
        }
    }
}

impl Size {
    pub fn half_extent(self) -> f64 {
        match self {
            Size::Small => 0.18,
            Size::Large => 0.30,
        }
    }
}

/// Binary footprint of a shape placement.
pub fn shape_mask(shape: ShapeKind, position: Position, size: Size, res: usize) -> Vec<bool> {
    let cx = position.center_u();
    let cy = 0.5;
    let r = size.half_extent();
    let mut mask = vec![false; res * res];
    for y in 0..res {
        for x in 0..res {
            let u = (x as f64 + 0.5) / res as f64;
            let v = (y as f64 + 0.5) / res as f64;
            let inside = match shape {
                ShapeKind::Circle => (u - cx).powi(2) + (v - cy).powi(2) <= r * r,
                ShapeKind::Square => (u - cx).abs() <= 0.7 * r && (v - cy).abs() <= 0.7 * r,
                ShapeKind::Triangle => {
                    let top = cy - r;
                    v >= top && v <= cy + r && (u - cx).abs() <= 1.1 * r * (v - top) / (2.0 * r)
                }
            };
            mask[y * res + x] = inside;
        }
    }
    mask
}

pub fn check_resolution(res: usize) -> Result<()> {
    if RESOLUTIONS.contains(&res) {
        Ok(())
    } else {
        Err(Error::Config(format!("unsupported resolution {res}; expected 16 or 32")))
    }
}

pub fn render(scene: &Scene, res: usize) -> Result<Image> {
    check_resolution(res)?;
    let mask = shape_mask(scene.shape, scene.position, scene.size, res);
    let rgb = scene.color.rgb();
    let mut img = Image::black(res, res);
    for y in 0..res {
        for x in 0..res {
            let px = if mask[y * res + x] {
                rgb
            } else if scene.motif.is_some_and(|m| m.tile(x, y)) {
                [MOTIF_LEVEL; 3]
            } else {
                [0.0; 3]
            };
            img.set(x, y, px);
        }
    }
    Ok(img)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthMode {
    Short,
    Long,
}

fn fillers(scene: &Scene) -> (usize, usize) {
    let c = scene.class_index();
    let f1 = c % 14;
    let f2 = (c * 5 + 3) % 14;
    (f1, if f2 == f1 { (f1 + 1) % 14 } else { f2 })
}

/// Realizes the scene in one language. Language A cannot express motifs, so
/// the A realization of a motif scene is its motif-free projection.
pub fn realize(scene: &Scene, lang: Language, mode: LengthMode) -> String {
    let (f1, f2) = fillers(scene);
    let mut w: Vec<&str> = Vec::new();
    match lang {
        Language::A => {
            let core = [
                scene.size.word(lang),
                scene.color.word(lang),
                scene.shape.word(lang),
            ];
            match mode {
                LengthMode::Short => {
                    w.extend(core);
                    w.push(scene.position.word(lang));
                }
                LengthMode::Long => {
                    w.extend(["a", FILLERS_A[f1], FILLERS_A[f2]]);
                    w.extend(core);
                    w.extend(["on", "the", scene.position.word(lang)]);
                }
            }
        }
        Language::B => {
            if mode == LengthMode::Long {
                w.push("zai");
            }
            w.extend([scene.position.word(lang), "bian"]);
            if mode == LengthMode::Long {
                w.extend(["yige", FILLERS_B[f1], FILLERS_B[f2]]);
            }
            w.extend([scene.color.word(lang), scene.size.word(lang), "de"]);
            if let Some(m) = scene.motif {
                w.push(m.word());
            }
            w.push(scene.shape.word(lang));
        }
    }
    w.join(" ")
}

/// Captions for one scene: `(A counterpart, B caption)`. The A side is
/// `None` for motif scenes unless `force_counterpart` asks for the
/// motif-free projection.
pub fn caption_pair(
    scene: &Scene,
    mode: LengthMode,
    force_counterpart: bool,
) -> (Option<Caption>, Caption) {
    let b = tokenize(&realize(scene, Language::B, mode), Language::B).expect("grammar B is in vocabulary");
    let a = (scene.motif.is_none() || force_counterpart).then(|| {
        tokenize(&realize(scene, Language::A, mode), Language::A).expect("grammar A is in vocabulary")
    });
    (a, b)
}

/// Recovers the attribute tuple from caption text.
pub fn parse(text: &str, lang: Language) -> Result<Scene> {
    let mut shape = None;
    let mut color = None;
    let mut position = None;
    let mut size = None;
    let mut motif = None;
    fn put<V: Copy + std::fmt::Debug>(slot: &mut Option<V>, v: V, w: &str) -> Result<()> {
        if slot.replace(v).is_some() {
            return Err(Error::Parse(format!("attribute given twice at {w:?}")));
        }
        Ok(())
    }
    for w in text.split_whitespace() {
        if let Some(&v) = ShapeKind::ALL.iter().find(|v| v.word(lang) == w) {
            put(&mut shape, v, w)?;
        } else if let Some(&v) = Color::ALL.iter().find(|v| v.word(lang) == w) {
            put(&mut color, v, w)?;
        } else if let Some(&v) = Position::ALL.iter().find(|v| v.word(lang) == w) {
            put(&mut position, v, w)?;
        } else if let Some(&v) = Size::ALL.iter().find(|v| v.word(lang) == w) {
            put(&mut size, v, w)?;
        } else if let Some(&m) = Motif::ALL.iter().find(|m| lang == Language::B && m.word() == w) {
            put(&mut motif, m, w)?;
        } else if !crate::textcond::Vocabulary::builtin(lang).contains(w) {
            return Err(Error::Lexical {
                terminal: w.to_string(),
                language: lang.tag(),
            });
        }
    }
    match (shape, color, position, size) {
        (Some(shape), Some(color), Some(position), Some(size)) => Ok(Scene {
            shape,
            color,
            position,
            size,
            motif,
        }),
        _ => Err(Error::Parse(format!("{text:?} does not name every attribute"))),
    }
}

/// Manifest line of a dataset dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub file: String,
    pub language: Language,
    pub caption: String,
    pub attributes: Scene,
}

/// Writes `count` scenes per split as PNGs plus a newline-delimited
/// manifest. Returns the manifest paths.
pub fn dump_dataset(
    dir: &Path,
    splits: &[(&str, u64, usize)],
    res: usize,
    allow_motif: bool,
    mode: LengthMode,
) -> Result<Vec<std::path::PathBuf>> {
    let mut manifests = Vec::new();
    for &(split, seed, count) in splits {
        let sdir = dir.join(split);
        std::fs::create_dir_all(&sdir)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mpath = sdir.join("manifest.jsonl");
        let mut out = std::io::BufWriter::new(std::fs::File::create(&mpath)?);
        for i in 0..count {
            let scene = sample_scene_with(&mut rng, allow_motif);
            let file = format!("{i:05}.png");
            write_png(&sdir.join(&file), &render(&scene, res)?)?;
            for lang in [Language::A, Language::B] {
                if lang == Language::A && scene.motif.is_some() {
                    continue;
                }
                let rec = ManifestRecord {
                    file: file.clone(),
                    language: lang,
                    caption: realize(&scene, lang, mode),
                    attributes: scene,
                };
                serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::from)?;
                out.write_all(b"\n")?;
            }
        }
        out.flush()?;
        manifests.push(mpath);
    }
    Ok(manifests)
}
