//! Procedural paired data with known ground-truth warps, plus ingestion of
//! real datasets from a manifest.
//!
//! Every synthetic person is built by warping a generated cloth with a known
//! TPS transform and compositing it onto a drawn body. The mask is the
//! in-range extent of the warped cloth canvas, which makes the triplet
//! invariants exact: the agnostic image equals the person outside the mask,
//! the worn cloth is the warped cloth restricted to the mask and zero
//! elsewhere, and evaluating the warp loss at the true theta leaves only
//! resampling error at the canvas boundary.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::tps::{self, PadMode, TpsTheta};

pub const DEFAULT_MASK_FILL: f32 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Stripes,
    Checks,
    Logo,
    Solid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// The exact masked region (stands in for parsing-derived masks).
    ParsingLike,
    /// Axis-aligned bounding rectangle of the region, filled.
    BoundingBox,
}

/// How to turn a base region into the agnostic mask.
#[derive(Debug, Clone)]
pub struct MaskSpec {
    pub mode: MaskMode,
    pub fill: f32,
    pub region: Mask,
}

/// One training record. `true_theta` is present for synthetic data only.
#[derive(Debug, Clone)]
pub struct TryOnTriplet {
    pub person: Image,
    pub cloth: Image,
    pub worn_cloth: Image,
    pub agnostic: Image,
    pub alt_cloth: Image,
    pub true_theta: Option<TpsTheta>,
    pub mask: Mask,
}

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub height: usize,
    pub width: usize,
    pub warp_magnitude: f64,
    pub mask_mode: MaskMode,
    pub fill: f32,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            height: 64,
            width: 64,
            warp_magnitude: 0.15,
            mask_mode: MaskMode::ParsingLike,
            fill: DEFAULT_MASK_FILL,
        }
    }
}

fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn norm_coord(i: usize, n: usize) -> f32 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f32 / (n - 1) as f32
    }
}

/// Colors stay below 0.85 so the white background remains distinguishable.
fn rand_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [
        rng.gen_range(-0.9f32..0.85),
        rng.gen_range(-0.9f32..0.85),
        rng.gen_range(-0.9f32..0.85),
    ]
}

struct TeeShape {
    torso_hw: f32,
    top: f32,
    bottom: f32,
    sleeve_x: f32,
    sleeve_bottom: f32,
    neck_hw: f32,
    neck_depth: f32,
}

impl TeeShape {
    fn sample(rng: &mut ChaCha8Rng) -> TeeShape {
        TeeShape {
            torso_hw: rng.gen_range(0.34..0.46),
            top: rng.gen_range(-0.68..-0.58),
            bottom: rng.gen_range(0.62..0.8),
            sleeve_x: rng.gen_range(0.78..0.94),
            sleeve_bottom: rng.gen_range(-0.12..0.1),
            neck_hw: rng.gen_range(0.1..0.18),
            neck_depth: rng.gen_range(0.08..0.16),
        }
    }

    fn contains(&self, u: f32, v: f32) -> bool {
        let in_torso = u.abs() <= self.torso_hw && v >= self.top && v <= self.bottom;
        let in_sleeve = u.abs() > self.torso_hw
            && u.abs() <= self.sleeve_x
            && v >= self.top
            && v <= self.sleeve_bottom;
        if !(in_torso || in_sleeve) {
            return false;
        }
        // neck notch: shallow parabola cut at the top center
        if u.abs() < self.neck_hw {
            let t = u / self.neck_hw;
            if v < self.top + self.neck_depth * (1.0 - t * t) {
                return false;
            }
        }
        true
    }
}

enum PatternPaint {
    Solid {
        color: [f32; 3],
    },
    Stripes {
        a: f32,
        b: f32,
        period: f32,
        c0: [f32; 3],
        c1: [f32; 3],
    },
    Checks {
        pu: f32,
        pv: f32,
        c0: [f32; 3],
        c1: [f32; 3],
    },
    Logo {
        base: [f32; 3],
        shapes: Vec<(f32, f32, f32, [f32; 3])>, // (cu, cv, radius, color)
    },
}

impl PatternPaint {
    fn sample(pattern: Pattern, rng: &mut ChaCha8Rng) -> PatternPaint {
        match pattern {
            Pattern::Solid => PatternPaint::Solid {
                color: rand_color(rng),
            },
            Pattern::Stripes => {
                let angle: f32 = match rng.gen_range(0u8..3) {
                    0 => 0.0,
                    1 => std::f32::consts::FRAC_PI_2,
                    _ => rng.gen_range(0.3f32..1.2),
                };
                PatternPaint::Stripes {
                    a: angle.cos(),
                    b: angle.sin(),
                    period: rng.gen_range(0.14f32..0.3),
                    c0: rand_color(rng),
                    c1: rand_color(rng),
                }
            }
            Pattern::Checks => PatternPaint::Checks {
                pu: rng.gen_range(0.14f32..0.3),
                pv: rng.gen_range(0.14f32..0.3),
                c0: rand_color(rng),
                c1: rand_color(rng),
            },
            Pattern::Logo => {
                let base = rand_color(rng);
                let n = rng.gen_range(3usize..6);
                let shapes = (0..n)
                    .map(|_| {
                        (
                            rng.gen_range(-0.5f32..0.5),
                            rng.gen_range(-0.4f32..0.5),
                            rng.gen_range(0.08f32..0.22),
                            rand_color(rng),
                        )
                    })
                    .collect();
                PatternPaint::Logo { base, shapes }
            }
        }
    }

    fn color_at(&self, u: f32, v: f32) -> [f32; 3] {
        match self {
            PatternPaint::Solid { color } => *color,
            PatternPaint::Stripes { a, b, period, c0, c1 } => {
                let t = ((a * u + b * v) / period).floor() as i64;
                if t.rem_euclid(2) == 0 {
                    *c0
                } else {
                    *c1
                }
            }
            PatternPaint::Checks { pu, pv, c0, c1 } => {
                let t = (u / pu).floor() as i64 + (v / pv).floor() as i64;
                if t.rem_euclid(2) == 0 {
                    *c0
                } else {
                    *c1
                }
            }
            PatternPaint::Logo { base, shapes } => {
                let mut c = *base;
                for (cu, cv, r, col) in shapes {
                    if (u - cu).powi(2) + (v - cv).powi(2) <= r * r {
                        c = *col;
                    }
                }
                c
            }
        }
    }
}

/// Deterministic-for-seed cloth image: a garment-shaped silhouette with the
/// requested pattern on a white background.
pub fn generate_cloth(pattern: Pattern, seed: u64, height: usize, width: usize) -> Image {
    let pattern_id = match pattern {
        Pattern::Stripes => 1u64,
        Pattern::Checks => 2,
        Pattern::Logo => 3,
        Pattern::Solid => 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, pattern_id));
    let shape = TeeShape::sample(&mut rng);
    let paint = PatternPaint::sample(pattern, &mut rng);
    let mut data = Array3::from_elem((3, height, width), 1.0f32);
    for y in 0..height {
        let v = norm_coord(y, height);
        for x in 0..width {
            let u = norm_coord(x, width);
            if shape.contains(u, v) {
                let c = paint.color_at(u, v);
                for ch in 0..3 {
                    data[[ch, y, x]] = c[ch];
                }
            }
        }
    }
    Image::new(data)
}

/// Garment silhouette of a cloth image: anything not white.
pub fn cloth_alpha(cloth: &Image) -> Array2<f32> {
    let (h, w) = (cloth.height(), cloth.width());
    Array2::from_shape_fn((h, w), |(y, x)| {
        let white = (0..cloth.channels()).all(|c| cloth.data[[c, y, x]] > 0.97);
        if white {
            0.0
        } else {
            1.0
        }
    })
}

fn image_to_f64(img: &Image) -> Array3<f64> {
    img.data.mapv(|v| v as f64)
}

fn plane_to_f64(plane: &Array2<f32>) -> Array3<f64> {
    let (h, w) = (plane.shape()[0], plane.shape()[1]);
    Array3::from_shape_fn((1, h, w), |(_, y, x)| plane[[y, x]] as f64)
}

/// Draw a simple person: background, head, neck, legs. The garment arrives
/// by compositing in [`synthesize_person`].
fn draw_body(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Image {
    let bg = [
        rng.gen_range(0.2f32..0.5),
        rng.gen_range(0.25f32..0.55),
        rng.gen_range(0.3f32..0.6),
    ];
    let skin = [
        0.65 + rng.gen_range(-0.1f32..0.15),
        0.35 + rng.gen_range(-0.1f32..0.1),
        0.05 + rng.gen_range(-0.1f32..0.1),
    ];
    let pants = rand_color(rng);
    let head_r = rng.gen_range(0.11f32..0.15);
    let head_cy = -0.78 + rng.gen_range(-0.03f32..0.03);
    let torso_hw = rng.gen_range(0.28f32..0.36);
    let mut data = Array3::zeros((3, height, width));
    for y in 0..height {
        let v = norm_coord(y, height);
        for x in 0..width {
            let u = norm_coord(x, width);
            let mut c = bg;
            // legs / lower body
            if v > 0.3 && v < 0.97 && u.abs() < torso_hw {
                c = pants;
            }
            // torso skin (mostly covered by the garment later)
            if v > -0.6 && v <= 0.3 && u.abs() < torso_hw {
                c = skin;
            }
            // neck
            if v > -0.72 && v <= -0.55 && u.abs() < 0.09 {
                c = skin;
            }
            // head
            if u * u + (v - head_cy) * (v - head_cy) <= head_r * head_r {
                c = skin;
            }
            for ch in 0..3 {
                data[[ch, y, x]] = c[ch];
            }
        }
    }
    Image::new(data)
}

/// Sample a smooth random theta whose per-control-point displacement is at
/// most `magnitude`, warp the cloth with it, composite onto a drawn body.
pub fn synthesize_person(
    cloth: &Image,
    body_seed: u64,
    warp_magnitude: f64,
) -> Result<(Image, TpsTheta)> {
    if !(0.0..=0.3).contains(&warp_magnitude) {
        return Err(Error::contract(format!(
            "warp magnitude {warp_magnitude} outside [0, 0.3]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(body_seed, 0xB0D7));
    let mut values = TpsTheta::identity().values().to_vec();
    for k in 0..tps::NUM_CONTROL_POINTS {
        let r = rng.gen_range(0.0..1.0f64) * warp_magnitude;
        let ang = rng.gen_range(0.0..std::f64::consts::TAU);
        values[2 * k] += r * ang.cos();
        values[2 * k + 1] += r * ang.sin();
    }
    let theta = TpsTheta::from_values(values)?;
    let (h, w) = (cloth.height(), cloth.width());
    let body = draw_body(&mut rng, h, w);

    let lattice = tps::shared_lattice();
    let grid = tps::grid_from_theta(&theta, lattice, h, w);
    let warped_cloth = tps::bilinear_sample(&image_to_f64(cloth), &grid, PadMode::Zeros);
    let warped_alpha = tps::bilinear_sample(&plane_to_f64(&cloth_alpha(cloth)), &grid, PadMode::Zeros);

    let mut data = body.data.clone();
    for y in 0..h {
        for x in 0..w {
            let a = warped_alpha[[0, y, x]] as f32;
            if a > 0.0 {
                for c in 0..3 {
                    let wc = warped_cloth[[c, y, x]] as f32;
                    data[[c, y, x]] = a * wc + (1.0 - a) * data[[c, y, x]];
                }
            }
        }
    }
    Ok((Image::new(data), theta))
}

/// In-range extent of the warped cloth canvas: where the sampling grid stays
/// inside `[-1, 1]^2`.
pub fn warp_region(theta: &TpsTheta, height: usize, width: usize) -> Mask {
    let grid = tps::grid_from_theta(theta, tps::shared_lattice(), height, width);
    let mut data = Array2::zeros((height, width));
    for y in 0..height {
        for x in 0..width {
            let gx = grid.coords[[y, x, 0]];
            let gy = grid.coords[[y, x, 1]];
            if gx.abs() <= 1.0 && gy.abs() <= 1.0 {
                data[[y, x]] = 1.0;
            }
        }
    }
    Mask { data }
}

/// Replace the masked region with the fill value. The returned mask is the
/// one actually applied (the bounding-box mode rectangularizes the region).
pub fn make_agnostic(person: &Image, spec: &MaskSpec) -> (Image, Mask) {
    assert_eq!(person.height(), spec.region.height());
    assert_eq!(person.width(), spec.region.width());
    let mask = match spec.mode {
        MaskMode::ParsingLike => spec.region.clone(),
        MaskMode::BoundingBox => {
            let mut m = Mask::zeros(spec.region.height(), spec.region.width());
            if let Some((y0, x0, y1, x1)) = spec.region.bounding_box() {
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        m.data[[y, x]] = 1.0;
                    }
                }
            }
            m
        }
    };
    let mut data = person.data.clone();
    for y in 0..person.height() {
        for x in 0..person.width() {
            if mask.data[[y, x]] > 0.5 {
                for c in 0..person.channels() {
                    data[[c, y, x]] = spec.fill;
                }
            }
        }
    }
    (Image::new(data), mask)
}

const PATTERN_CYCLE: [Pattern; 3] = [Pattern::Stripes, Pattern::Checks, Pattern::Logo];

/// Deterministic triplet for (dataset_seed, index). The alternative cloth
/// uses a different pattern and seed than the worn one.
pub fn sample_triplet(dataset_seed: u64, index: usize, opts: &SynthOptions) -> TryOnTriplet {
    let cloth_seed = mix_seed(dataset_seed, (index as u64) * 4);
    let body_seed = mix_seed(dataset_seed, (index as u64) * 4 + 1);
    let alt_seed = mix_seed(dataset_seed, (index as u64) * 4 + 2);
    let pattern_a = PATTERN_CYCLE[index % 3];
    let pattern_b = PATTERN_CYCLE[(index + 1) % 3];

    let cloth = generate_cloth(pattern_a, cloth_seed, opts.height, opts.width);
    let alt_cloth = generate_cloth(pattern_b, alt_seed, opts.height, opts.width);
    let (person, theta) =
        synthesize_person(&cloth, body_seed, opts.warp_magnitude).expect("magnitude validated");

    let region = warp_region(&theta, opts.height, opts.width);
    let spec = MaskSpec {
        mode: opts.mask_mode,
        fill: opts.fill,
        region,
    };
    let (agnostic, mask) = make_agnostic(&person, &spec);

    let lattice = tps::shared_lattice();
    let grid = tps::grid_from_theta(&theta, lattice, opts.height, opts.width);
    let warped = tps::bilinear_sample(&image_to_f64(&cloth), &grid, PadMode::Zeros);
    let mut worn = Array3::zeros((3, opts.height, opts.width));
    for y in 0..opts.height {
        for x in 0..opts.width {
            if mask.data[[y, x]] > 0.5 {
                for c in 0..3 {
                    worn[[c, y, x]] = warped[[c, y, x]] as f32;
                }
            }
        }
    }

    TryOnTriplet {
        person,
        cloth,
        worn_cloth: Image::new(worn),
        agnostic,
        alt_cloth,
        true_theta: Some(theta),
        mask,
    }
}

// ---------------------------------------------------------------------------
// real-data ingestion
// ---------------------------------------------------------------------------

pub const MANIFEST_HEADER: &str = "person,cloth,mask,view";

#[derive(Debug, Clone)]
struct ManifestRow {
    line_no: usize,
    person: PathBuf,
    cloth: PathBuf,
    mask: PathBuf,
}

/// Rows of a parsed manifest; back-view rows are already dropped.
#[derive(Debug)]
pub struct RealDataset {
    rows: Vec<ManifestRow>,
    fill: f32,
}

/// Parse a manifest of `person,cloth,mask,view` rows. Paths are relative to
/// the manifest's directory. Rows tagged `back` are skipped; malformed rows
/// are reported with their line number.
pub fn ingest_real(manifest: &Path) -> Result<RealDataset> {
    let text = std::fs::read_to_string(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if i == 0 {
            if trimmed != MANIFEST_HEADER {
                return Err(Error::format(format!(
                    "manifest line 1: expected header `{MANIFEST_HEADER}`, got `{trimmed}`"
                )));
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::format(format!(
                "manifest line {line_no}: expected 4 comma-separated fields, got {}",
                fields.len()
            )));
        }
        if fields[3] == "back" {
            continue;
        }
        rows.push(ManifestRow {
            line_no,
            person: base.join(fields[0]),
            cloth: base.join(fields[1]),
            mask: base.join(fields[2]),
        });
    }
    Ok(RealDataset {
        rows,
        fill: DEFAULT_MASK_FILL,
    })
}

impl RealDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Load one triplet; the alternative cloth comes from the next row
    /// (cyclically).
    pub fn triplet(&self, i: usize) -> Result<TryOnTriplet> {
        let row = &self.rows[i];
        let ctx = |what: &str, e: Error| {
            Error::format(format!(
                "manifest line {}: {what}: {e}",
                row.line_no
            ))
        };
        let person = Image::load_png(&row.person).map_err(|e| ctx("person image", e))?;
        let cloth = Image::load_png(&row.cloth).map_err(|e| ctx("cloth image", e))?;
        let mask = Mask::load_png(&row.mask).map_err(|e| ctx("parsing mask", e))?;
        if cloth.height() != person.height()
            || cloth.width() != person.width()
            || mask.height() != person.height()
            || mask.width() != person.width()
        {
            return Err(Error::format(format!(
                "manifest line {}: resolution mismatch between person/cloth/mask",
                row.line_no
            )));
        }
        let next = &self.rows[(i + 1) % self.rows.len()];
        let alt_cloth = if next.line_no == row.line_no {
            cloth.clone()
        } else {
            Image::load_png(&next.cloth)
                .map_err(|e| Error::format(format!("manifest line {}: alt cloth: {e}", next.line_no)))?
        };
        let spec = MaskSpec {
            mode: MaskMode::ParsingLike,
            fill: self.fill,
            region: mask.clone(),
        };
        let (agnostic, mask) = make_agnostic(&person, &spec);
        // parser-isolated worn cloth: person pixels inside the mask
        let mut worn = Array3::zeros(person.data.raw_dim());
        for y in 0..person.height() {
            for x in 0..person.width() {
                if mask.data[[y, x]] > 0.5 {
                    for c in 0..3 {
                        worn[[c, y, x]] = person.data[[c, y, x]];
                    }
                }
            }
        }
        Ok(TryOnTriplet {
            person,
            cloth,
            worn_cloth: Image::new(worn),
            agnostic,
            alt_cloth,
            true_theta: None,
            mask,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<TryOnTriplet>> + '_ {
        (0..self.rows.len()).map(|i| self.triplet(i))
    }
}

/// Export a synthetic dataset in the manifest layout (person/, cloth/,
/// mask/ directories plus manifest.csv and a ground-truth thetas.json).
pub fn write_dataset(dir: &Path, count: usize, seed: u64, opts: &SynthOptions) -> Result<()> {
    for sub in ["person", "cloth", "mask"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    let mut thetas: Vec<Vec<f64>> = Vec::new();
    for i in 0..count {
        let t = sample_triplet(seed, i, opts);
        let name = format!("{i:05}.png");
        t.person.save_png(&dir.join("person").join(&name))?;
        t.cloth.save_png(&dir.join("cloth").join(&name))?;
        t.mask.save_png(&dir.join("mask").join(&name))?;
        manifest.push_str(&format!(
            "person/{name},cloth/{name},mask/{name},front\n"
        ));
        thetas.push(t.true_theta.as_ref().unwrap().values().to_vec());
    }
    std::fs::write(dir.join("manifest.csv"), manifest)?;
    let theta_json = serde_json::to_string(&thetas)
        .map_err(|e| Error::format(format!("theta serialization: {e}")))?;
    std::fs::write(dir.join("thetas.json"), theta_json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cloth_patterns_deterministic_and_distinct() {
        let a = generate_cloth(Pattern::Stripes, 3, 64, 64);
        let b = generate_cloth(Pattern::Stripes, 3, 64, 64);
        assert_eq!(a.data, b.data);
        let c = generate_cloth(Pattern::Stripes, 4, 64, 64);
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn solid_cloth_constant_inside_white_outside() {
        let img = generate_cloth(Pattern::Solid, 11, 64, 64);
        let alpha = cloth_alpha(&img);
        let mut inside_color: Option<[f32; 3]> = None;
        let mut inside_count = 0;
        for y in 0..64 {
            for x in 0..64 {
                if alpha[[y, x]] > 0.5 {
                    inside_count += 1;
                    let c = [img.data[[0, y, x]], img.data[[1, y, x]], img.data[[2, y, x]]];
                    match inside_color {
                        None => inside_color = Some(c),
                        Some(prev) => assert_eq!(prev, c),
                    }
                } else {
                    for ch in 0..3 {
                        assert_eq!(img.data[[ch, y, x]], 1.0);
                    }
                }
            }
        }
        assert!(inside_count > 64 * 64 / 5, "silhouette too small");
    }

    #[test]
    fn synthesize_person_zero_magnitude_is_identity_composite() {
        let cloth = generate_cloth(Pattern::Checks, 5, 64, 64);
        let (person, theta) = synthesize_person(&cloth, 9, 0.0).unwrap();
        assert!(theta.is_identity());
        // inside the garment silhouette the person shows the cloth exactly
        let alpha = cloth_alpha(&cloth);
        for y in 0..64 {
            for x in 0..64 {
                if alpha[[y, x]] > 0.5 {
                    for c in 0..3 {
                        let diff = (person.data[[c, y, x]] - cloth.data[[c, y, x]]).abs();
                        assert!(diff <= 1e-6, "at ({y},{x},{c}): {diff}");
                    }
                }
            }
        }
        assert!(synthesize_person(&cloth, 9, 0.5).is_err());
    }

    #[test]
    fn synthesized_warp_is_self_consistent() {
        // re-applying the returned theta reproduces the composited region
        let cloth = generate_cloth(Pattern::Stripes, 6, 64, 64);
        let (person, theta) = synthesize_person(&cloth, 10, 0.2).unwrap();
        let grid = tps::grid_from_theta(&theta, tps::shared_lattice(), 64, 64);
        let warped = tps::bilinear_sample(&image_to_f64(&cloth), &grid, PadMode::Zeros);
        let alpha = tps::bilinear_sample(&plane_to_f64(&cloth_alpha(&cloth)), &grid, PadMode::Zeros);
        let mut acc = 0.0f64;
        let mut n = 0usize;
        for y in 0..64 {
            for x in 0..64 {
                if alpha[[0, y, x]] > 0.999 {
                    for c in 0..3 {
                        acc += (person.data[[c, y, x]] as f64 - warped[[c, y, x]]).abs();
                        n += 1;
                    }
                }
            }
        }
        let mean = acc / n as f64;
        assert!(mean <= 0.02, "mean {mean}");
    }

    #[test]
    fn make_agnostic_edge_cases() {
        let person = generate_cloth(Pattern::Logo, 8, 32, 32); // any image works
        let empty = MaskSpec {
            mode: MaskMode::ParsingLike,
            fill: 0.0,
            region: Mask::zeros(32, 32),
        };
        let (ap, m) = make_agnostic(&person, &empty);
        assert_eq!(ap.data, person.data);
        assert_eq!(m.count_ones(), 0);

        let full = MaskSpec {
            mode: MaskMode::ParsingLike,
            fill: 0.25,
            region: Mask::full(32, 32),
        };
        let (ap, _) = make_agnostic(&person, &full);
        assert!(ap.data.iter().all(|&v| v == 0.25));

        let mut region = Mask::zeros(32, 32);
        region.data[[5, 7]] = 1.0;
        region.data[[10, 20]] = 1.0;
        let boxed = MaskSpec {
            mode: MaskMode::BoundingBox,
            fill: 0.0,
            region,
        };
        let (_, m) = make_agnostic(&person, &boxed);
        assert_eq!(m.count_ones(), 6 * 14); // rows 5..=10, cols 7..=20
    }

    #[test]
    fn triplet_determinism_and_distinct_cloths() {
        let opts = SynthOptions::default();
        let a = sample_triplet(123, 4, &opts);
        let b = sample_triplet(123, 4, &opts);
        assert_eq!(a.person.data, b.person.data);
        assert_eq!(a.worn_cloth.data, b.worn_cloth.data);
        assert_eq!(a.agnostic.data, b.agnostic.data);
        assert_eq!(a.mask.data, b.mask.data);
        assert_ne!(a.cloth.data, a.alt_cloth.data);
    }

    #[test]
    fn parallel_generation_matches_serial() {
        use rayon::prelude::*;
        let opts = SynthOptions::default();
        let serial: Vec<TryOnTriplet> =
            (0..8).map(|i| sample_triplet(7, i, &opts)).collect();
        let parallel: Vec<TryOnTriplet> = (0..8)
            .into_par_iter()
            .map(|i| sample_triplet(7, i, &opts))
            .collect();
        for (a, b) in serial.iter().zip(parallel.iter()) {
            assert_eq!(a.person.data, b.person.data);
            assert_eq!(a.worn_cloth.data, b.worn_cloth.data);
        }
    }

    #[test]
    fn triplet_invariants_hold_across_samples() {
        let opts = SynthOptions::default();
        for index in 0..100 {
            let t = sample_triplet(99, index, &opts);
            let (h, w) = (t.person.height(), t.person.width());
            for img in [&t.cloth, &t.worn_cloth, &t.agnostic, &t.alt_cloth] {
                assert_eq!((img.height(), img.width()), (h, w));
            }
            for y in 0..h {
                for x in 0..w {
                    let masked = t.mask.data[[y, x]] > 0.5;
                    for c in 0..3 {
                        if masked {
                            assert_eq!(t.agnostic.data[[c, y, x]], opts.fill);
                        } else {
                            assert_eq!(t.agnostic.data[[c, y, x]], t.person.data[[c, y, x]]);
                            assert_eq!(t.worn_cloth.data[[c, y, x]], 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn warp_oracle_soundness_mean_over_samples() {
        // ground-truth theta nearly zeroes the warp loss; only boundary
        // resampling remains
        let opts = SynthOptions::default();
        let mut total = 0.0f64;
        let n = 25;
        for index in 0..n {
            let t = sample_triplet(77, index, &opts);
            let theta = t.true_theta.as_ref().unwrap();
            let grid = tps::grid_from_theta(theta, tps::shared_lattice(), 64, 64);
            let warped = tps::bilinear_sample(&image_to_f64(&t.cloth), &grid, PadMode::Zeros);
            let mut acc = 0.0f64;
            for ((c, y, x), v) in t.worn_cloth.data.indexed_iter() {
                acc += (warped[[c, y, x]] - *v as f64).abs();
            }
            total += acc / (3 * 64 * 64) as f64;
        }
        let mean = total / n as f64;
        assert!(mean <= 0.02, "mean warp loss {mean}");
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions::default();
        write_dataset(dir.path(), 3, 5, &opts).unwrap();
        let ds = ingest_real(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(ds.len(), 3);
        let triplets: Vec<_> = ds.iter().collect::<Result<Vec<_>>>().unwrap();
        for t in &triplets {
            assert!(t.true_theta.is_none());
            // mask consistency survives the PNG round trip
            for y in 0..t.person.height() {
                for x in 0..t.person.width() {
                    if t.mask.data[[y, x]] < 0.5 {
                        for c in 0..3 {
                            assert_eq!(t.agnostic.data[[c, y, x]], t.person.data[[c, y, x]]);
                        }
                    }
                }
            }
        }

        // empty manifest: header only
        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, format!("{MANIFEST_HEADER}\n")).unwrap();
        assert_eq!(ingest_real(&empty).unwrap().len(), 0);

        // back rows are dropped
        let back = dir.path().join("back.csv");
        std::fs::write(
            &back,
            format!(
                "{MANIFEST_HEADER}\nperson/00000.png,cloth/00000.png,mask/00000.png,back\n"
            ),
        )
        .unwrap();
        assert_eq!(ingest_real(&back).unwrap().len(), 0);

        // malformed row names its line
        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, format!("{MANIFEST_HEADER}\nonly,three,fields\n")).unwrap();
        let err = ingest_real(&bad).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
