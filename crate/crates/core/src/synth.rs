//! Procedural food scenes with exact nutrition and depth ground truth.
//!
//! A scene is a plate of elliptical dome-shaped items. Each item comes from a
//! prototype (ingredient, footprint, height, texture) placed with a position
//! and an area scale. Labels follow placed mass: the grams of an item are its
//! areal density times its full footprint area times the fraction of the
//! footprint inside the canvas, and nutrients come from a per-100 g table.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nutrifuse_tensor::{io as tensor_io, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nutrition::NutritionVector;

/// name, kcal, fat, carbohydrate, protein per 100 g, bulk density (g/cm^3), RGB.
const BUILTIN: [(&str, f64, f64, f64, f64, f64, [f64; 3]); 14] = [
    ("rice", 130.0, 0.3, 28.2, 2.7, 0.85, [0.95, 0.94, 0.88]),
    ("chicken", 165.0, 3.6, 0.0, 31.0, 1.05, [0.86, 0.72, 0.52]),
    ("broccoli", 34.0, 0.4, 6.6, 2.8, 0.35, [0.20, 0.55, 0.18]),
    ("salmon", 208.0, 13.0, 0.0, 20.0, 1.05, [0.96, 0.55, 0.40]),
    ("egg", 155.0, 10.6, 1.1, 12.6, 1.03, [0.98, 0.85, 0.25]),
    ("tofu", 76.0, 4.8, 1.9, 8.0, 1.0, [0.93, 0.91, 0.78]),
    ("potato", 87.0, 0.1, 20.1, 1.9, 1.08, [0.85, 0.75, 0.45]),
    ("carrot", 41.0, 0.2, 9.6, 0.9, 0.64, [0.95, 0.50, 0.10]),
    ("beef", 250.0, 15.0, 0.0, 26.0, 1.05, [0.45, 0.22, 0.15]),
    ("noodles", 138.0, 2.1, 25.0, 4.5, 0.7, [0.96, 0.87, 0.60]),
    ("spinach", 23.0, 0.4, 3.6, 2.9, 0.3, [0.08, 0.35, 0.10]),
    ("pork belly", 518.0, 53.0, 0.0, 9.3, 0.95, [0.90, 0.70, 0.68]),
    ("tomato", 18.0, 0.2, 3.9, 0.9, 0.95, [0.85, 0.12, 0.10]),
    ("corn", 96.0, 1.5, 21.0, 3.4, 0.72, [0.98, 0.80, 0.15]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ingredient {
    /// Nutrients per 100 g; the mass component is 100.
    pub per_100g: NutritionVector,
    /// Bulk density in g/cm^3, used to turn item volume into grams.
    pub density: f64,
    pub color: [f64; 3],
}

/// Ingredient name -> nutrients per 100 g.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NutrientDatabase {
    pub entries: BTreeMap<String, Ingredient>,
}

impl NutrientDatabase {
    pub fn builtin() -> Self {
        let entries = BUILTIN
            .iter()
            .map(|&(name, kcal, fat, carb, protein, density, color)| {
                let per_100g = NutritionVector::from_array([kcal, 100.0, fat, carb, protein]);
                (name.to_string(), Ingredient { per_100g, density, color })
            })
            .collect();
        NutrientDatabase { entries }
    }

    pub fn insert(&mut self, name: &str, ingredient: Ingredient) -> Result<()> {
        if !ingredient.per_100g.is_nonnegative() || !(ingredient.density > 0.0) {
            return Err(Error::Param(format!("ingredient `{name}` needs nonnegative nutrients and positive density")));
        }
        self.entries.insert(name.to_string(), ingredient);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Ingredient> {
        self.entries.get(name).ok_or_else(|| Error::UnknownIngredient(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

/// `sum grams / 100 * table[name]`, with the mass component equal to the total grams.
pub fn annotate_from_ingredients(ingredients: &[(String, f64)], db: &NutrientDatabase) -> Result<NutritionVector> {
    let mut total = NutritionVector::default();
    for (name, grams) in ingredients {
        if !(*grams >= 0.0 && grams.is_finite()) {
            return Err(Error::Param(format!("`{name}` has invalid weight {grams}")));
        }
        let mut part = db.get(name)?.per_100g.scaled(grams / 100.0);
        part.mass = *grams;
        total = total.add(part);
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub canvas: usize,
    pub num_samples: usize,
    pub train_ratio: f64,
    pub seed: u64,
    pub prototypes_per_ingredient: usize,
    /// Restricts the library to these ingredients; empty means all.
    pub ingredients: Vec<String>,
    pub min_items: usize,
    pub max_items: usize,
    /// Area scale range applied per placement.
    pub scale_range: [f64; 2],
    /// Ellipse semi-axis range as a fraction of the canvas side.
    pub radius_range: [f64; 2],
    /// Dome peak height range in meters.
    pub height_range: [f64; 2],
    /// Physical width the canvas covers, in meters.
    pub plate_width: f64,
    /// Camera-to-plate distance in meters; background depth.
    pub camera_distance: f64,
    /// Also write 8-bit PPM previews.
    pub previews: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            canvas: 128,
            num_samples: 2000,
            train_ratio: 0.7,
            seed: 7,
            prototypes_per_ingredient: 3,
            ingredients: Vec::new(),
            min_items: 1,
            max_items: 4,
            scale_range: [0.6, 1.4],
            radius_range: [0.08, 0.2],
            height_range: [0.01, 0.05],
            plate_width: 0.3,
            camera_distance: 0.6,
            previews: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("data.{m}")));
        let range_ok = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite();
        if self.canvas < 8 {
            return bad("canvas must be at least 8");
        }
        if self.num_samples < 2 {
            return bad("num_samples must be at least 2");
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return bad("train_ratio must lie in (0, 1)");
        }
        if self.prototypes_per_ingredient == 0 || self.min_items == 0 || self.min_items > self.max_items {
            return bad("prototypes_per_ingredient and min_items must be positive with min_items <= max_items");
        }
        if !range_ok(self.scale_range) || !range_ok(self.radius_range) || !range_ok(self.height_range) {
            return bad("ranges must be positive and ordered");
        }
        if !(self.plate_width > 0.0) || !(self.camera_distance > self.height_range[1]) {
            return bad("plate_width must be positive and camera_distance above the tallest item");
        }
        Ok(())
    }

    /// Side of one pixel in centimeters.
    pub fn pixel_pitch_cm(&self) -> f64 {
        self.plate_width * 100.0 / self.canvas as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemPrototype {
    pub id: usize,
    pub seed: u64,
    pub ingredient: String,
    pub color: [f64; 3],
    pub texture_seed: u64,
    /// Semi-axes in pixels at scale 1.
    pub rx: f64,
    pub ry: f64,
    /// Dome peak height in meters.
    pub height: f64,
    /// Mean grams per pixel over the footprint.
    pub grams_per_px2: f64,
    /// Nutrients per pixel of footprint.
    pub density: NutritionVector,
}

impl ItemPrototype {
    /// Footprint area in pixels at area scale `s`.
    pub fn area(&self, s: f64) -> f64 {
        PI * self.rx * self.ry * s
    }

    /// Full (unclipped) nutrients at area scale `s`.
    pub fn total(&self, s: f64) -> NutritionVector {
        self.density.scaled(self.area(s))
    }

    /// Squared normalized radius of offset `(dx, dy)` at scale `s`.
    pub fn radius_sq(&self, dx: f64, dy: f64, s: f64) -> f64 {
        let k = s.sqrt();
        (dx / (self.rx * k)).powi(2) + (dy / (self.ry * k)).powi(2)
    }

    /// Paraboloid height at offset `(dx, dy)`; zero outside the footprint.
    pub fn height_at(&self, dx: f64, dy: f64, s: f64) -> f64 {
        let r2 = self.radius_sq(dx, dy, s);
        if r2 < 1.0 {
            self.height * (1.0 - r2)
        } else {
            0.0
        }
    }
}

/// Deterministic prototype of `ingredient` from `seed`.
pub fn gen_prototype(id: usize, seed: u64, ingredient: &str, db: &NutrientDatabase, cfg: &SynthConfig) -> Result<ItemPrototype> {
    let ing = db.get(ingredient)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.canvas as f64;
    let mut color = ing.color;
    color.iter_mut().for_each(|v| *v = (*v + rng.gen_range(-0.04..=0.04)).clamp(0.0, 1.0));
    let rx = rng.gen_range(cfg.radius_range[0]..=cfg.radius_range[1]) * c;
    let ry = rng.gen_range(cfg.radius_range[0]..=cfg.radius_range[1]) * c;
    let height = rng.gen_range(cfg.height_range[0]..=cfg.height_range[1]);
    let texture_seed = rng.gen();
    // A paraboloid of peak h holds half the volume of its bounding cylinder.
    let grams_per_px2 = ing.density * (height * 100.0) / 2.0 * cfg.pixel_pitch_cm().powi(2);
    let mut density = ing.per_100g.scaled(grams_per_px2 / 100.0);
    density.mass = grams_per_px2;
    Ok(ItemPrototype {
        id,
        seed,
        ingredient: ingredient.to_string(),
        color,
        texture_seed,
        rx,
        ry,
        height,
        grams_per_px2,
        density,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub prototype: usize,
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
}

/// Footprint pixels (by pixel center) inside the canvas over those on an
/// unbounded grid.
pub fn unclipped_fraction(p: &ItemPrototype, pl: &Placement, canvas: usize) -> f64 {
    let (x0, x1, y0, y1) = footprint_bounds(p, pl);
    let (mut inside, mut total) = (0usize, 0usize);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if p.radius_sq(x as f64 + 0.5 - pl.cx, y as f64 + 0.5 - pl.cy, pl.scale) < 1.0 {
                total += 1;
                if x >= 0 && y >= 0 && (x as usize) < canvas && (y as usize) < canvas {
                    inside += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        inside as f64 / total as f64
    }
}

fn footprint_bounds(p: &ItemPrototype, pl: &Placement) -> (i64, i64, i64, i64) {
    let k = pl.scale.sqrt();
    let (ex, ey) = (p.rx * k, p.ry * k);
    (
        (pl.cx - ex).floor() as i64 - 1,
        (pl.cx + ex).ceil() as i64 + 1,
        (pl.cy - ey).floor() as i64 - 1,
        (pl.cy + ey).ceil() as i64 + 1,
    )
}

fn lookup<'a>(prototypes: &'a [ItemPrototype], id: usize) -> Result<&'a ItemPrototype> {
    prototypes
        .iter()
        .find(|p| p.id == id)
        .ok_or_else(|| Error::Param(format!("placement refers to unknown prototype {id}")))
}

/// Ingredient weights of a placement list: full grams times unclipped fraction.
pub fn placement_ingredients(prototypes: &[ItemPrototype], placements: &[Placement], canvas: usize) -> Result<Vec<(String, f64)>> {
    placements
        .iter()
        .map(|pl| {
            let p = lookup(prototypes, pl.prototype)?;
            if !(pl.scale > 0.0 && pl.scale.is_finite()) {
                return Err(Error::Param(format!("placement scale must be positive, got {}", pl.scale)));
            }
            let grams = p.grams_per_px2 * p.area(pl.scale) * unclipped_fraction(p, pl, canvas);
            Ok((p.ingredient.clone(), grams))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub canvas: usize,
    pub placements: Vec<Placement>,
    /// `3 x H x W` in `[0, 1]`.
    pub rgb: Vec<f64>,
    /// `H x W`, camera distance in meters.
    pub depth: Vec<f64>,
    pub ingredients: Vec<(String, f64)>,
    pub label: NutritionVector,
    pub seed: u64,
}

fn texture_tile(seed: u64) -> [f64; 64] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::array::from_fn(|_| rng.gen_range(0.85..1.15))
}

/// Renders items in order (later ones on top) and labels them from geometry.
pub fn compose_scene(
    prototypes: &[ItemPrototype],
    placements: &[Placement],
    db: &NutrientDatabase,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<Scene> {
    let n = cfg.canvas;
    let plane = n * n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rgb = vec![0.0; 3 * plane];
    for i in 0..plane {
        let v = 0.9 + rng.gen_range(-0.02..0.02);
        rgb[i] = v;
        rgb[plane + i] = v;
        rgb[2 * plane + i] = v - 0.03;
    }
    let mut height = vec![0.0f64; plane];
    for pl in placements {
        let p = lookup(prototypes, pl.prototype)?;
        let tile = texture_tile(p.texture_seed);
        let (x0, x1, y0, y1) = footprint_bounds(p, pl);
        for y in y0.max(0)..=y1.min(n as i64 - 1) {
            for x in x0.max(0)..=x1.min(n as i64 - 1) {
                let (dx, dy) = (x as f64 + 0.5 - pl.cx, y as f64 + 0.5 - pl.cy);
                let r2 = p.radius_sq(dx, dy, pl.scale);
                if r2 >= 1.0 {
                    continue;
                }
                let i = y as usize * n + x as usize;
                height[i] = height[i].max(p.height_at(dx, dy, pl.scale));
                let t = tile[((dy.floor() as i64).rem_euclid(8) * 8 + (dx.floor() as i64).rem_euclid(8)) as usize];
                let shade = 0.75 + 0.25 * (1.0 - r2);
                for c in 0..3 {
                    rgb[c * plane + i] = (p.color[c] * t * shade).clamp(0.0, 1.0);
                }
            }
        }
    }
    let depth = height.iter().map(|h| cfg.camera_distance - h).collect();
    let ingredients = placement_ingredients(prototypes, placements, n)?;
    let label = annotate_from_ingredients(&ingredients, db)?;
    Ok(Scene { canvas: n, placements: placements.to_vec(), rgb, depth, ingredients, label, seed })
}

/// Prototype library: `prototypes_per_ingredient` for each allowed ingredient.
pub fn gen_library(db: &NutrientDatabase, cfg: &SynthConfig) -> Result<Vec<ItemPrototype>> {
    let names: Vec<String> = if cfg.ingredients.is_empty() {
        db.names().into_iter().map(String::from).collect()
    } else {
        cfg.ingredients.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x11b_7a7e);
    let mut out = Vec::new();
    for name in &names {
        for _ in 0..cfg.prototypes_per_ingredient {
            out.push(gen_prototype(out.len(), rng.gen(), name, db, cfg)?);
        }
    }
    Ok(out)
}

/// Random placements for one scene.
pub fn random_placements(prototypes: &[ItemPrototype], cfg: &SynthConfig, seed: u64) -> Vec<Placement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.canvas as f64;
    let count = rng.gen_range(cfg.min_items..=cfg.max_items);
    (0..count)
        .map(|_| Placement {
            prototype: prototypes[rng.gen_range(0..prototypes.len())].id,
            cx: rng.gen_range(0.1 * c..0.9 * c),
            cy: rng.gen_range(0.1 * c..0.9 * c),
            scale: rng.gen_range(cfg.scale_range[0]..=cfg.scale_range[1]),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Param(format!("unknown split `{other}` (expected train or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngredientWeight {
    pub name: String,
    pub grams: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub id: String,
    /// Relative to the corpus directory.
    pub rgb_path: PathBuf,
    pub depth_path: PathBuf,
    pub ingredients: Vec<IngredientWeight>,
    pub label: NutritionVector,
    pub split: Split,
    pub seed: u64,
    pub placements: Vec<Placement>,
}

impl SceneManifest {
    pub fn ingredient_pairs(&self) -> Vec<(String, f64)> {
        self.ingredients.iter().map(|i| (i.name.clone(), i.grams)).collect()
    }
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const PROTOTYPES_FILE: &str = "prototypes.json";
pub const CORPUS_FILE: &str = "corpus.json";

/// Train/test assignment: a seeded shuffle with the first `round(n * ratio)` in train.
pub fn assign_splits(n: usize, ratio: f64, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5b1_17));
    let n_train = ((n as f64 * ratio).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut splits = vec![Split::Test; n];
    order[..n_train].iter().for_each(|&i| splits[i] = Split::Train);
    splits
}

fn write_ppm(path: &Path, rgb: &[f64], n: usize) -> Result<()> {
    let plane = n * n;
    let mut bytes = format!("P6\n{n} {n}\n255\n").into_bytes();
    for i in 0..plane {
        for c in 0..3 {
            bytes.push((rgb[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    tensor_io::save(path, t).map_err(|e| Error::data(path.display().to_string(), e))
}

/// Writes the full corpus to `dir` and returns its manifests.
pub fn gen_dataset(cfg: &SynthConfig, dir: &Path) -> Result<Vec<SceneManifest>> {
    cfg.validate()?;
    let db = NutrientDatabase::builtin();
    let prototypes = gen_library(&db, cfg)?;
    for sub in ["rgb", "depth"].iter().chain(cfg.previews.then_some(&"preview")) {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let splits = assign_splits(cfg.num_samples, cfg.train_ratio, cfg.seed);
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.canvas;
    let mut manifests = Vec::with_capacity(cfg.num_samples);
    for (i, split) in splits.into_iter().enumerate() {
        let seed: u64 = seeds.gen();
        let id = format!("s{i:05}");
        let placements = random_placements(&prototypes, cfg, seed);
        let scene = compose_scene(&prototypes, &placements, &db, cfg, seed).map_err(|e| Error::data(&id, e))?;
        let rgb_path = PathBuf::from("rgb").join(format!("{id}.ntsr"));
        let depth_path = PathBuf::from("depth").join(format!("{id}.ntsr"));
        write_tensor(&dir.join(&rgb_path), &Tensor::from_f64(&[3, n, n], &scene.rgb)?)?;
        write_tensor(&dir.join(&depth_path), &Tensor::from_f64(&[1, n, n], &scene.depth)?)?;
        if cfg.previews {
            write_ppm(&dir.join("preview").join(format!("{id}.ppm")), &scene.rgb, n)?;
        }
        manifests.push(SceneManifest {
            id,
            rgb_path,
            depth_path,
            ingredients: scene.ingredients.into_iter().map(|(name, grams)| IngredientWeight { name, grams }).collect(),
            label: scene.label,
            split,
            seed,
            placements,
        });
    }
    let mut index = Vec::new();
    for m in &manifests {
        serde_json::to_writer(&mut index, m).expect("manifest serializes");
        index.push(b'\n');
    }
    write_file(&dir.join(MANIFEST_FILE), &index)?;
    write_file(&dir.join(PROTOTYPES_FILE), &serde_json::to_vec_pretty(&prototypes).expect("prototypes serialize"))?;
    write_file(&dir.join(CORPUS_FILE), &serde_json::to_vec_pretty(cfg).expect("config serializes"))?;
    Ok(manifests)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_manifests(dir: &Path) -> Result<Vec<SceneManifest>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::data(format!("{} line {}", path.display(), i + 1), e)))
        .collect()
}

pub fn read_prototypes(dir: &Path) -> Result<Vec<ItemPrototype>> {
    let path = dir.join(PROTOTYPES_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(path.display().to_string(), e))
}

pub fn read_corpus_config(dir: &Path) -> Result<SynthConfig> {
    let path = dir.join(CORPUS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(path.display().to_string(), e))
}
