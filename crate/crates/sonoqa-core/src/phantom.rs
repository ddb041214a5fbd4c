//! Deterministic synthetic phantoms with exact ground truth.
//!
//! Each sample renders a section's essential structures as parameterized
//! bright/dark primitives (ellipses, bars, crescents) at anatomically
//! plausible relative positions inside a tissue outline, then applies the
//! acquisition artifacts real scans suffer from: multiplicative speckle,
//! dark shadow wedges, and whole-plane rotation. Non-standard samples omit
//! or attenuate at least one essential structure. Everything derives from
//! the sample seed, so images and annotations are bit-reproducible.
//!
//! Realism is not the goal; the generator only has to exercise the failure
//! modes the pipeline must survive (noise, confusable look-alike shapes,
//! rotated planes) while providing exact boxes and quality flags.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::anatomy::{abbrev_of, section_structures, structure_by_abbrev, Section, SECTIONS};
use crate::detector::BBox;
use crate::error::{Error, Result};
use crate::preprocess::GrayImage;
use crate::rng::Rng;

/// Probability that a confusable decoy primitive is co-rendered.
pub const DECOY_PROBABILITY: f64 = 0.4;
/// Contrast factor applied to attenuated (flag-0) structures.
pub const ATTENUATED_CONTRAST: f64 = 0.3;
/// Intensities are clamped here so the overlay-text threshold never fires
/// on anatomy.
pub const MAX_INTENSITY: f64 = 0.97;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Acquisition-artifact parameters for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradeParams {
    /// Multiplicative speckle strength in [0, 1].
    pub speckle: f64,
    pub shadow_count: u32,
    /// Shadow opacity in [0, 1].
    pub shadow_opacity: f64,
    /// Whole-plane rotation in degrees, |angle| ≤ 45.
    pub rotation_deg: f64,
    /// Essential structures to omit or attenuate (class ids). Empty means
    /// the generator picks its own for non-standard samples.
    pub dropout: Vec<usize>,
}

impl Default for DegradeParams {
    fn default() -> Self {
        DegradeParams {
            speckle: 0.12,
            shadow_count: 0,
            shadow_opacity: 0.18,
            rotation_deg: 0.0,
            dropout: Vec::new(),
        }
    }
}

impl DegradeParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.speckle) || !(0.0..=1.0).contains(&self.shadow_opacity) {
            return Err(Error::Parameter(
                "speckle and shadow opacity must lie in [0,1]".into(),
            ));
        }
        if !(self.rotation_deg.abs() <= 45.0) {
            return Err(Error::Parameter(format!(
                "rotation must lie in [-45°, 45°], got {}",
                self.rotation_deg
            )));
        }
        Ok(())
    }
}

/// One annotated structure instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: BBox,
    /// 1 = meets the quality requirement, 0 = attenuated/unclear.
    pub flag: u8,
}

/// A generated image with exact ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub image: GrayImage,
    pub section: Section,
    pub annotations: Vec<Annotation>,
    pub plane_standard: bool,
    pub seed: u64,
}

impl PhantomSample {
    /// Re-derive the plane label from the annotations: standard iff every
    /// essential structure of the section is present with flag 1.
    pub fn derived_plane_standard(&self) -> bool {
        section_structures(self.section).iter().all(|s| {
            self.annotations.iter().any(|a| a.class_id == s.id && a.flag == 1)
        })
    }
}

/// Geometric support of one rendered structure (pixel centers, after
/// rotation), exposed so tests can verify the tight-box invariant.
#[derive(Debug, Clone)]
pub struct StructureSupport {
    pub class_id: usize,
    pub points: Vec<(f64, f64)>,
}

// ---- canvas ------------------------------------------------------------------

struct Canvas {
    size: usize,
    data: Vec<f64>,
}

type Mask = Vec<(usize, usize)>;

impl Canvas {
    fn new(size: usize, base: f64) -> Self {
        Canvas { size, data: vec![base; size * size] }
    }

    fn put(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.size + x] = v.clamp(0.0, MAX_INTENSITY);
    }

    fn bounds(&self, c: f64, r: f64) -> (usize, usize) {
        let lo = libm::floor(c - r - 1.0).max(0.0) as usize;
        let hi = (libm::ceil(c + r + 1.0).max(0.0) as usize).min(self.size);
        (lo, hi)
    }

    fn ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, v: f64) -> Mask {
        let mut mask = Vec::new();
        let (y0, y1) = self.bounds(cy, ry);
        let (x0, x1) = self.bounds(cx, rx);
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    self.put(x, y, v);
                    mask.push((x, y));
                }
            }
        }
        mask
    }

    /// Thick segment of the given length through (cx, cy) at `angle`
    /// radians from vertical.
    fn bar(&mut self, cx: f64, cy: f64, len: f64, thick: f64, angle: f64, v: f64) -> Mask {
        let (dirx, diry) = (libm::sin(angle), libm::cos(angle));
        let r = 0.5 * len + thick;
        let mut mask = Vec::new();
        let (y0, y1) = self.bounds(cy, r);
        let (x0, x1) = self.bounds(cx, r);
        for y in y0..y1 {
            for x in x0..x1 {
                let px = x as f64 + 0.5 - cx;
                let py = y as f64 + 0.5 - cy;
                let along = px * dirx + py * diry;
                let perp = px * diry - py * dirx;
                if along.abs() <= 0.5 * len && perp.abs() <= 0.5 * thick {
                    self.put(x, y, v);
                    mask.push((x, y));
                }
            }
        }
        mask
    }

    /// Lune: a disk with an offset disk removed.
    fn crescent(&mut self, cx: f64, cy: f64, r: f64, v: f64) -> Mask {
        let hole_cx = cx + 0.55 * r;
        let hole_r = 0.85 * r;
        let mut mask = Vec::new();
        let (y0, y1) = self.bounds(cy, r);
        let (x0, x1) = self.bounds(cx, r);
        for y in y0..y1 {
            for x in x0..x1 {
                let px = x as f64 + 0.5 - cx;
                let py = y as f64 + 0.5 - cy;
                let hx = x as f64 + 0.5 - hole_cx;
                if px * px + py * py <= r * r && hx * hx + py * py > hole_r * hole_r {
                    self.put(x, y, v);
                    mask.push((x, y));
                }
            }
        }
        mask
    }
}

fn mask_bbox(mask: &Mask) -> Option<BBox> {
    if mask.is_empty() {
        return None;
    }
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for &(x, y) in mask {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64).ok()
}

// ---- layout ------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fate {
    Full,
    Attenuated,
    Omitted,
}

struct Jitter<'a> {
    rng: &'a mut Rng,
    u: f64,
}

impl Jitter<'_> {
    fn pos(&mut self, v: f64) -> f64 {
        (v + self.rng.range_f64(-3.0, 3.0)) * self.u
    }

    fn len(&mut self, v: f64) -> f64 {
        v * self.u * self.rng.range_f64(0.88, 1.12)
    }
}

enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Bar { cx: f64, cy: f64, len: f64, thick: f64, angle: f64 },
    Crescent { cx: f64, cy: f64, r: f64 },
    /// Bright wall around a dark lumen; the support is the outer ellipse.
    Rimmed { cx: f64, cy: f64, rx: f64, ry: f64, lumen: f64 },
}

struct StructurePlan {
    class_id: usize,
    shape: Shape,
    peak: f64,
    backdrop: f64,
}

fn paint(canvas: &mut Canvas, plan: &StructurePlan, fate: Fate) -> Option<Mask> {
    if fate == Fate::Omitted {
        return None;
    }
    let contrast = if fate == Fate::Attenuated { ATTENUATED_CONTRAST } else { 1.0 };
    let v = plan.backdrop + contrast * (plan.peak - plan.backdrop);
    let mask = match plan.shape {
        Shape::Ellipse { cx, cy, rx, ry } => canvas.ellipse(cx, cy, rx, ry, v),
        Shape::Bar { cx, cy, len, thick, angle } => canvas.bar(cx, cy, len, thick, angle, v),
        Shape::Crescent { cx, cy, r } => canvas.crescent(cx, cy, r, v),
        Shape::Rimmed { cx, cy, rx, ry, lumen } => {
            let rim_v = plan.backdrop + contrast * (0.82 - plan.backdrop);
            let lumen_v = plan.backdrop + contrast * (lumen - plan.backdrop);
            let outer = canvas.ellipse(cx, cy, rx, ry, rim_v);
            canvas.ellipse(cx, cy, rx * 0.62, ry * 0.62, lumen_v);
            outer
        }
    };
    Some(mask)
}

/// Structure plans of one section, positions jittered from the seed stream.
fn section_plan(section: Section, j: &mut Jitter<'_>) -> Vec<StructurePlan> {
    let s = |a: &str| structure_by_abbrev(a).expect("registry abbrev").id;
    match section {
        Section::Head => {
            let fill = 0.32;
            vec![
                StructurePlan {
                    class_id: s("BM"),
                    shape: Shape::Bar {
                        cx: j.pos(64.0),
                        cy: j.pos(64.0),
                        len: j.len(64.0),
                        thick: 2.6 * j.u,
                        angle: j.rng.range_f64(-0.017, 0.017),
                    },
                    peak: 0.82,
                    backdrop: fill,
                },
                StructurePlan {
                    class_id: s("CSP"),
                    shape: Shape::Ellipse {
                        cx: j.pos(64.0),
                        cy: j.pos(47.0),
                        rx: j.len(7.0),
                        ry: j.len(5.0),
                    },
                    peak: 0.07,
                    backdrop: fill,
                },
                StructurePlan {
                    class_id: s("T"),
                    shape: Shape::Ellipse {
                        cx: j.pos(79.0),
                        cy: j.pos(70.0),
                        rx: j.len(12.0),
                        ry: j.len(7.5),
                    },
                    peak: 0.58,
                    backdrop: fill,
                },
                StructurePlan {
                    class_id: s("TV"),
                    shape: Shape::Ellipse {
                        cx: j.pos(55.0),
                        cy: j.pos(66.0),
                        rx: j.len(8.0),
                        ry: j.len(4.5),
                    },
                    peak: 0.10,
                    backdrop: fill,
                },
                StructurePlan {
                    class_id: s("LS"),
                    shape: Shape::Crescent { cx: j.pos(38.0), cy: j.pos(72.0), r: j.len(8.0) },
                    peak: 0.80,
                    backdrop: fill,
                },
                StructurePlan {
                    class_id: s("CP"),
                    shape: Shape::Ellipse {
                        cx: j.pos(80.0),
                        cy: j.pos(46.0),
                        rx: j.len(10.0),
                        ry: j.len(6.0),
                    },
                    peak: 0.86,
                    backdrop: fill,
                },
            ]
        }
        Section::Abdominal => {
            let fill = 0.34;
            vec![
                StructurePlan {
                    class_id: s("ST"),
                    shape: Shape::Ellipse {
                        cx: j.pos(44.0),
                        cy: j.pos(56.0),
                        rx: j.len(12.0),
                        ry: j.len(8.5),
                    },
                    peak: 0.05,
                    backdrop: fill,
                },
                StructurePlan {
                    class_id: s("SP"),
                    shape: Shape::Ellipse {
                        cx: j.pos(64.0),
                        cy: j.pos(99.0),
                        rx: j.len(4.5),
                        ry: j.len(7.0),
                    },
                    peak: 0.92,
                    backdrop: fill,
                },
                StructurePlan {
                    class_id: s("UV"),
                    shape: Shape::Rimmed {
                        cx: j.pos(68.0),
                        cy: j.pos(66.0),
                        rx: j.len(9.0),
                        ry: j.len(6.5),
                        lumen: 0.15,
                    },
                    peak: 0.82,
                    backdrop: fill,
                },
                StructurePlan {
                    class_id: s("AO"),
                    shape: Shape::Ellipse {
                        cx: j.pos(79.0),
                        cy: j.pos(91.0),
                        rx: j.len(6.0),
                        ry: j.len(6.0),
                    },
                    peak: 0.07,
                    backdrop: fill,
                },
            ]
        }
        Section::Heart => {
            let fill = 0.45;
            let chamber = |j: &mut Jitter<'_>, id, cx, cy, rx, ry, peak| StructurePlan {
                class_id: id,
                shape: Shape::Ellipse {
                    cx: j.pos(cx),
                    cy: j.pos(cy),
                    rx: j.len(rx),
                    ry: j.len(ry),
                },
                peak,
                backdrop: fill,
            };
            vec![
                chamber(j, s("LV"), 46.0, 48.0, 14.0, 8.0, 0.04),
                chamber(j, s("LA"), 50.0, 76.0, 9.0, 8.5, 0.14),
                chamber(j, s("RV"), 81.0, 47.0, 10.0, 11.0, 0.10),
                chamber(j, s("RA"), 82.0, 75.0, 11.0, 6.5, 0.20),
                chamber(j, s("DAO"), 64.0, 98.0, 6.5, 6.5, 0.08),
            ]
        }
    }
}

fn paint_body(canvas: &mut Canvas, section: Section, u: f64) {
    let (rx, ry, ring, fill) = match section {
        Section::Head => (54.0, 44.0, 0.88, 0.32),
        Section::Abdominal => (50.0, 47.0, 0.84, 0.34),
        Section::Heart => (52.0, 46.0, 0.80, 0.45),
    };
    let c = 64.0 * u;
    canvas.ellipse(c, c, rx * u, ry * u, ring);
    canvas.ellipse(c, c, (rx - 4.5) * u, (ry - 4.5) * u, fill);
}

/// Paint a look-alike of a real structure (unannotated clutter): a
/// midline-like bar, an umbilical-vein-like rimmed ellipse, or an extra
/// chamber-like blob.
fn paint_decoy(canvas: &mut Canvas, section: Section, rng: &mut Rng, u: f64) {
    match section {
        Section::Head => {
            let side = if rng.chance(0.5) { 1.0 } else { -1.0 };
            let cx = (64.0 + side * rng.range_f64(16.0, 24.0)) * u;
            canvas.bar(cx, 64.0 * u, 36.0 * u, 2.0 * u, rng.range_f64(-0.02, 0.02), 0.60);
        }
        Section::Abdominal => {
            let cx = rng.range_f64(42.0, 50.0) * u;
            let cy = rng.range_f64(78.0, 86.0) * u;
            canvas.ellipse(cx, cy, 7.5 * u, 5.0 * u, 0.80);
            canvas.ellipse(cx, cy, 4.6 * u, 3.1 * u, 0.16);
        }
        Section::Heart => {
            let cx = rng.range_f64(58.0, 70.0) * u;
            canvas.ellipse(cx, 34.0 * u, 8.0 * u, 5.5 * u, 0.12);
        }
    }
}

// ---- degradation ----------------------------------------------------------------

/// Rotate a box's corners around (cx, cy) and take the axis-aligned hull,
/// clipped to the image. None when nothing remains inside.
pub fn rotate_box(b: BBox, angle_deg: f64, cx: f64, cy: f64, w: f64, h: f64) -> Option<BBox> {
    let a = angle_deg * core::f64::consts::PI / 180.0;
    let (sin, cos) = (libm::sin(a), libm::cos(a));
    let corners =
        [(b.x_min, b.y_min), (b.x_max, b.y_min), (b.x_min, b.y_max), (b.x_max, b.y_max)];
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (px, py) in corners {
        let dx = px - cx;
        let dy = py - cy;
        let rx = cx + dx * cos - dy * sin;
        let ry = cy + dx * sin + dy * cos;
        x0 = x0.min(rx);
        y0 = y0.min(ry);
        x1 = x1.max(rx);
        y1 = y1.max(ry);
    }
    BBox::new(x0, y0, x1, y1).ok().and_then(|b| b.clip(w, h))
}

pub fn rotate_point(p: (f64, f64), angle_deg: f64, cx: f64, cy: f64) -> (f64, f64) {
    let a = angle_deg * core::f64::consts::PI / 180.0;
    let (sin, cos) = (libm::sin(a), libm::cos(a));
    let dx = p.0 - cx;
    let dy = p.1 - cy;
    (cx + dx * cos - dy * sin, cy + dx * sin + dy * cos)
}

const ROTATION_FILL: f64 = 0.03;

fn rotate_image(image: &GrayImage, angle_deg: f64) -> GrayImage {
    let (w, h) = (image.width(), image.height());
    let (cx, cy) = (w as f64 * 0.5, h as f64 * 0.5);
    let a = -angle_deg * core::f64::consts::PI / 180.0; // inverse map
    let (sin, cos) = (libm::sin(a), libm::cos(a));
    let mut out = Vec::with_capacity(w * h);
    let sample = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            ROTATION_FILL
        } else {
            image.get(x as usize, y as usize)
        }
    };
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let sx = cx + dx * cos - dy * sin - 0.5;
            let sy = cy + dx * sin + dy * cos - 0.5;
            let ix = libm::floor(sx) as isize;
            let iy = libm::floor(sy) as isize;
            let fx = sx - ix as f64;
            let fy = sy - iy as f64;
            let v = (1.0 - fy)
                * ((1.0 - fx) * sample(ix, iy) + fx * sample(ix + 1, iy))
                + fy * ((1.0 - fx) * sample(ix, iy + 1) + fx * sample(ix + 1, iy + 1));
            out.push(v.clamp(0.0, 1.0));
        }
    }
    GrayImage::new(w, h, out).expect("rotation preserves range")
}

/// Apply rotation, then speckle and shadow wedges, to an image and its
/// boxes (boxes become the rotated corners' axis-aligned hulls).
/// Zero-strength parameters return the inputs unchanged.
pub fn degrade(
    image: &GrayImage,
    boxes: &[BBox],
    params: &DegradeParams,
    seed: u64,
) -> Result<(GrayImage, Vec<BBox>)> {
    params.validate()?;
    let (w, h) = (image.width() as f64, image.height() as f64);
    let mut img = image.clone();
    let mut out_boxes = boxes.to_vec();

    if params.rotation_deg != 0.0 {
        img = rotate_image(&img, params.rotation_deg);
        out_boxes = boxes
            .iter()
            .filter_map(|&b| rotate_box(b, params.rotation_deg, w * 0.5, h * 0.5, w, h))
            .collect();
    }

    let mut rng = Rng::new(seed).fork(0x5ec3);
    if params.speckle > 0.0 {
        let mut data = Vec::with_capacity(img.width() * img.height());
        for &v in img.data() {
            let n = 1.0 + params.speckle * (2.0 * rng.next_f64() - 1.0);
            data.push((v * n).clamp(0.0, MAX_INTENSITY));
        }
        img = GrayImage::new(img.width(), img.height(), data)?;
    }

    let mut shadow_rng = Rng::new(seed).fork(0x5a0d);
    for _ in 0..params.shadow_count {
        if params.shadow_opacity == 0.0 {
            break;
        }
        let x0 = shadow_rng.range_f64(0.15, 0.85) * w;
        let half0 = shadow_rng.range_f64(1.5, 4.0);
        let slope = shadow_rng.range_f64(0.05, 0.14);
        let factor = 1.0 - params.shadow_opacity;
        for y in 0..img.height() {
            let half = half0 + slope * y as f64;
            let lo = libm::floor(x0 - half).max(0.0) as usize;
            let hi = (libm::ceil(x0 + half).max(0.0) as usize).min(img.width());
            for x in lo..hi {
                let v = img.get(x, y) * factor;
                img.set(x, y, v);
            }
        }
    }
    Ok((img, out_boxes))
}

// ---- sample generation -------------------------------------------------------------

/// Render one sample. `standard` controls whether every essential
/// structure is rendered intact; acquisition artifacts come from `params`
/// and apply either way. Bit-identical for identical arguments.
pub fn generate_sample(
    section: Section,
    standard: bool,
    params: &DegradeParams,
    seed: u64,
) -> Result<PhantomSample> {
    generate_sample_sized(section, standard, params, seed, 128)
}

pub fn generate_sample_sized(
    section: Section,
    standard: bool,
    params: &DegradeParams,
    seed: u64,
    image_size: usize,
) -> Result<PhantomSample> {
    Ok(generate_sample_detailed(section, standard, params, seed, image_size)?.0)
}

/// As [`generate_sample`], also returning each structure's geometric
/// support (rotated pixel centers) for verification.
pub fn generate_sample_detailed(
    section: Section,
    standard: bool,
    params: &DegradeParams,
    seed: u64,
    image_size: usize,
) -> Result<(PhantomSample, Vec<StructureSupport>)> {
    params.validate()?;
    if image_size < 64 || !image_size.is_multiple_of(32) {
        return Err(Error::Config(format!(
            "image size must be ≥ 64 and divisible by 32, got {image_size}"
        )));
    }
    let root = Rng::new(seed);
    let u = image_size as f64 / 128.0;

    // decide the fate of every essential structure
    let essentials = section_structures(section);
    let mut fates: BTreeMap<usize, Fate> =
        essentials.iter().map(|s| (s.id, Fate::Full)).collect();
    if !standard {
        let mut pick = root.fork(3);
        let bad_ids: Vec<usize> = if params.dropout.is_empty() {
            let mut ids: Vec<usize> = essentials.iter().map(|s| s.id).collect();
            pick.shuffle(&mut ids);
            let n_bad = 1 + usize::from(pick.chance(0.5));
            ids.truncate(n_bad);
            ids
        } else {
            for id in &params.dropout {
                if !fates.contains_key(id) {
                    return Err(Error::Input(format!(
                        "dropout structure {} does not belong to the {section} section",
                        abbrev_of(*id)
                    )));
                }
            }
            params.dropout.clone()
        };
        for id in bad_ids {
            let fate = if pick.chance(0.5) { Fate::Omitted } else { Fate::Attenuated };
            fates.insert(id, fate);
        }
    }

    // render
    let mut canvas = Canvas::new(image_size, 0.08);
    paint_body(&mut canvas, section, u);
    let mut decoy_rng = root.fork(2);
    if decoy_rng.chance(DECOY_PROBABILITY) {
        paint_decoy(&mut canvas, section, &mut decoy_rng, u);
    }
    let mut layout_rng = root.fork(1);
    let plans = section_plan(section, &mut Jitter { rng: &mut layout_rng, u });
    let mut annotations = Vec::new();
    let mut masks: Vec<(usize, Mask, u8)> = Vec::new();
    for plan in &plans {
        let fate = fates[&plan.class_id];
        if let Some(mask) = paint(&mut canvas, plan, fate) {
            let flag = u8::from(fate == Fate::Full);
            if let Some(bbox) = mask_bbox(&mask) {
                annotations.push(Annotation { class_id: plan.class_id, bbox, flag });
                masks.push((plan.class_id, mask, flag));
            }
        }
    }

    // artifacts
    let rendered = GrayImage::new(image_size, image_size, canvas.data)?;
    let boxes: Vec<BBox> = annotations.iter().map(|a| a.bbox).collect();
    let (image, rotated_boxes) = degrade(&rendered, &boxes, params, seed)?;
    if rotated_boxes.len() != annotations.len() {
        return Err(Error::Contract("a structure was rotated out of frame".into()));
    }
    for (a, b) in annotations.iter_mut().zip(&rotated_boxes) {
        a.bbox = *b;
    }

    let (cx, cy) = (image_size as f64 * 0.5, image_size as f64 * 0.5);
    let supports = masks
        .into_iter()
        .map(|(class_id, mask, _)| StructureSupport {
            class_id,
            points: mask
                .into_iter()
                .map(|(x, y)| {
                    rotate_point(
                        (x as f64 + 0.5, y as f64 + 0.5),
                        params.rotation_deg,
                        cx,
                        cy,
                    )
                })
                .collect(),
        })
        .collect();

    let mut sample =
        PhantomSample { image, section, annotations, plane_standard: true, seed };
    sample.plane_standard = sample.derived_plane_standard();
    if standard && !sample.plane_standard {
        return Err(Error::Contract("standard sample lost a structure".into()));
    }
    Ok((sample, supports))
}

// ---- dataset generation ---------------------------------------------------------

/// Desk-scale dataset composition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub head: usize,
    pub abdominal: usize,
    pub heart: usize,
    /// Fraction of standard planes per section.
    pub standard_ratio: f64,
    pub image_size: usize,
    pub speckle: f64,
    pub shadow_opacity: f64,
    pub max_shadows: u32,
    pub max_rotation_deg: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            head: 300,
            abdominal: 300,
            heart: 300,
            standard_ratio: 0.5,
            image_size: 128,
            speckle: 0.12,
            shadow_opacity: 0.18,
            max_shadows: 1,
            max_rotation_deg: 12.0,
        }
    }
}

impl DatasetConfig {
    pub fn count(&self, section: Section) -> usize {
        match section {
            Section::Head => self.head,
            Section::Abdominal => self.abdominal,
            Section::Heart => self.heart,
        }
    }

    pub fn total(&self) -> usize {
        self.head + self.abdominal + self.heart
    }

    pub fn validate(&self) -> Result<()> {
        for section in SECTIONS {
            let n = self.count(section);
            if n != 0 && n < 5 {
                return Err(Error::Config(format!(
                    "{section} count must be 0 or ≥ 5, got {n}"
                )));
            }
        }
        if self.total() == 0 {
            return Err(Error::Config("empty dataset".into()));
        }
        if !(0.0..=1.0).contains(&self.standard_ratio) {
            return Err(Error::Config("standard_ratio must lie in [0,1]".into()));
        }
        if !(self.max_rotation_deg.abs() <= 45.0) {
            return Err(Error::Config("max rotation must lie within ±45°".into()));
        }
        DegradeParams {
            speckle: self.speckle,
            shadow_opacity: self.shadow_opacity,
            ..DegradeParams::default()
        }
        .validate()
        .map_err(|e| Error::Config(format!("{e}")))?;
        Ok(())
    }
}

/// Everything needed to (re)create one dataset sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedSample {
    pub section: Section,
    pub index: usize,
    pub standard: bool,
    pub split: Split,
    pub seed: u64,
    pub params: DegradeParams,
}

/// Deterministic dataset plan: per-section sample parameters and the 3:1:1
/// split assignment. The i-th entry of a section is identical across runs
/// with the same (config, seed).
pub fn plan_dataset(config: &DatasetConfig, seed: u64) -> Result<Vec<PlannedSample>> {
    config.validate()?;
    let root = Rng::new(seed);
    let mut plan = Vec::with_capacity(config.total());
    for (si, section) in SECTIONS.iter().enumerate() {
        let count = config.count(*section);
        if count == 0 {
            continue;
        }
        let n_standard = libm::round(config.standard_ratio * count as f64) as usize;
        let mut split_rng = root.fork(0x517).fork(si as u64);
        let (train_idx, val_idx, _test_idx) = crate::trainer::split_dataset(
            count,
            &crate::trainer::SplitSpec { seed: split_rng.next_u64() },
        )?;
        let mut split_of = vec![Split::Test; count];
        for &i in &train_idx {
            split_of[i] = Split::Train;
        }
        for &i in &val_idx {
            split_of[i] = Split::Val;
        }
        for (index, &split) in split_of.iter().enumerate() {
            let mut srng = root.fork(0x5a4d).fork(si as u64).fork(index as u64);
            let params = DegradeParams {
                speckle: config.speckle,
                shadow_count: srng.below(config.max_shadows as usize + 1) as u32,
                shadow_opacity: config.shadow_opacity,
                rotation_deg: srng.range_f64(-config.max_rotation_deg, config.max_rotation_deg),
                dropout: Vec::new(),
            };
            plan.push(PlannedSample {
                section: *section,
                index,
                standard: index < n_standard,
                split,
                seed: srng.next_u64(),
                params,
            });
        }
    }
    Ok(plan)
}

/// Generate every planned sample through `sink` (streaming, so callers can
/// write to disk without holding the dataset in memory).
pub fn generate_dataset_into(
    config: &DatasetConfig,
    seed: u64,
    mut sink: impl FnMut(&PlannedSample, &PhantomSample) -> Result<()>,
) -> Result<()> {
    for planned in plan_dataset(config, seed)? {
        let sample = generate_sample_sized(
            planned.section,
            planned.standard,
            &planned.params,
            planned.seed,
            config.image_size,
        )?;
        sink(&planned, &sample)?;
    }
    Ok(())
}

/// In-memory convenience for tests and training.
pub fn generate_dataset(
    config: &DatasetConfig,
    seed: u64,
) -> Result<Vec<(PlannedSample, PhantomSample)>> {
    let mut out = Vec::with_capacity(config.total());
    generate_dataset_into(config, seed, |p, s| {
        out.push((p.clone(), s.clone()));
        Ok(())
    })?;
    Ok(out)
}

// ---- annotation serialization ------------------------------------------------------

pub const STANDARD_LABEL: &str = "standard";
pub const NON_STANDARD_LABEL: &str = "non-standard";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub class: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub flag: u8,
}

/// On-disk annotation schema; the single source of ground truth for
/// training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub image: String,
    pub section: Section,
    pub structures: Vec<AnnotationEntry>,
    pub plane_label: String,
    pub seed: u64,
}

impl PhantomSample {
    pub fn annotation_file(&self, image_path: String) -> AnnotationFile {
        AnnotationFile {
            image: image_path,
            section: self.section,
            structures: self
                .annotations
                .iter()
                .map(|a| AnnotationEntry {
                    class: abbrev_of(a.class_id),
                    bbox: [a.bbox.x_min, a.bbox.y_min, a.bbox.x_max, a.bbox.y_max],
                    flag: a.flag,
                })
                .collect(),
            plane_label: if self.plane_standard {
                STANDARD_LABEL.into()
            } else {
                NON_STANDARD_LABEL.into()
            },
            seed: self.seed,
        }
    }
}

impl AnnotationFile {
    pub fn annotations(&self) -> Result<Vec<Annotation>> {
        self.structures
            .iter()
            .map(|e| {
                Ok(Annotation {
                    class_id: structure_by_abbrev(&e.class)?.id,
                    bbox: BBox::new(e.bbox[0], e.bbox[1], e.bbox[2], e.bbox[3])?,
                    flag: e.flag,
                })
            })
            .collect()
    }

    pub fn plane_standard(&self) -> bool {
        self.plane_label == STANDARD_LABEL
    }
}

/// Manifest of a generated dataset: relative paths plus split assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub image_size: usize,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub annotation: String,
    pub section: Section,
    pub split: Split,
}

/// Relative file stems used by the on-disk layout.
pub fn sample_paths(section: Section, index: usize, image_ext: &str) -> (String, String) {
    (
        format!("images/{section}_{index:04}.{image_ext}"),
        format!("annotations/{section}_{index:04}.json"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_standard_has_six_intact_structures() {
        let p = DegradeParams::default();
        let s = generate_sample(Section::Head, true, &p, 42).unwrap();
        assert_eq!(s.annotations.len(), 6);
        assert!(s.annotations.iter().all(|a| a.flag == 1));
        assert!(s.plane_standard);
    }

    #[test]
    fn abdominal_dropout_umbilical_vein() {
        let uv = structure_by_abbrev("UV").unwrap().id;
        let p = DegradeParams { dropout: vec![uv], ..DegradeParams::default() };
        let s = generate_sample(Section::Abdominal, false, &p, 7).unwrap();
        let uv_ann: Vec<_> = s.annotations.iter().filter(|a| a.class_id == uv).collect();
        assert!(uv_ann.is_empty() || uv_ann[0].flag == 0);
        assert!(!s.plane_standard);
        assert!(!s.derived_plane_standard());
    }

    #[test]
    fn dropout_of_foreign_structure_is_rejected() {
        let lv = structure_by_abbrev("LV").unwrap().id;
        let p = DegradeParams { dropout: vec![lv], ..DegradeParams::default() };
        assert!(generate_sample(Section::Head, false, &p, 7).is_err());
    }

    #[test]
    fn generation_is_bit_identical() {
        let p = DegradeParams { rotation_deg: 7.5, shadow_count: 1, ..DegradeParams::default() };
        let a = generate_sample(Section::Heart, false, &p, 99).unwrap();
        let b = generate_sample(Section::Heart, false, &p, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_strength_degrade_is_identity() {
        let img = GrayImage::filled(64, 64, 0.5).unwrap();
        let boxes = [BBox::new(10.0, 10.0, 20.0, 30.0).unwrap()];
        let p = DegradeParams {
            speckle: 0.0,
            shadow_count: 0,
            shadow_opacity: 0.0,
            rotation_deg: 0.0,
            dropout: vec![],
        };
        let (out, out_boxes) = degrade(&img, &boxes, &p, 5).unwrap();
        assert_eq!(out, img);
        assert_eq!(out_boxes, boxes.to_vec());
    }

    #[test]
    fn rotation_zero_leaves_boxes() {
        let b = BBox::new(10.0, 20.0, 30.0, 25.0).unwrap();
        let r = rotate_box(b, 0.0, 64.0, 64.0, 128.0, 128.0).unwrap();
        assert_eq!(r, b);
    }

    #[test]
    fn rotation_90_swaps_hull_extents() {
        let b = BBox::new(60.0, 54.0, 80.0, 59.0).unwrap(); // 20×5 off-center
        let r = rotate_box(b, 90.0, 64.0, 64.0, 128.0, 128.0).unwrap();
        assert!((r.width() - b.height()).abs() < 1e-9);
        assert!((r.height() - b.width()).abs() < 1e-9);
    }

    #[test]
    fn boxes_bound_support_exactly_without_rotation() {
        for seed in [1u64, 2, 3] {
            for section in SECTIONS {
                let p = DegradeParams { rotation_deg: 0.0, ..DegradeParams::default() };
                let (s, supports) =
                    generate_sample_detailed(section, true, &p, seed, 128).unwrap();
                for sup in &supports {
                    let ann = s
                        .annotations
                        .iter()
                        .find(|a| a.class_id == sup.class_id)
                        .expect("annotated");
                    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
                    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                    for &(x, y) in &sup.points {
                        assert!(
                            x >= ann.bbox.x_min
                                && x <= ann.bbox.x_max
                                && y >= ann.bbox.y_min
                                && y <= ann.bbox.y_max,
                            "support escapes its box"
                        );
                        x0 = x0.min(x - 0.5);
                        y0 = y0.min(y - 0.5);
                        x1 = x1.max(x + 0.5);
                        y1 = y1.max(y + 0.5);
                    }
                    // without rotation the box IS the support's extent
                    assert!((x0 - ann.bbox.x_min).abs() < 1e-9);
                    assert!((x1 - ann.bbox.x_max).abs() < 1e-9);
                    assert!((y0 - ann.bbox.y_min).abs() < 1e-9);
                    assert!((y1 - ann.bbox.y_max).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn boxes_stay_tight_under_default_rotation() {
        // box area ≤ 1.5 × the rotated support's axis-aligned extent
        let mut worst: f64 = 0.0;
        for seed in 0u64..20 {
            let mut rot = Rng::new(seed).fork(9);
            let p = DegradeParams {
                rotation_deg: rot.range_f64(-12.0, 12.0),
                ..DegradeParams::default()
            };
            let section = SECTIONS[(seed % 3) as usize];
            let (s, supports) =
                generate_sample_detailed(section, true, &p, seed, 128).unwrap();
            for sup in &supports {
                let ann = s.annotations.iter().find(|a| a.class_id == sup.class_id).unwrap();
                let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
                let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                for &(x, y) in &sup.points {
                    x0 = x0.min(x - 0.5);
                    y0 = y0.min(y - 0.5);
                    x1 = x1.max(x + 0.5);
                    y1 = y1.max(y + 0.5);
                }
                let support_area = (x1 - x0) * (y1 - y0);
                worst = worst.max(ann.bbox.area() / support_area);
            }
        }
        assert!(worst <= 1.5, "worst box/support ratio {worst}");
    }

    #[test]
    fn dataset_counts_and_ratio() {
        let cfg = DatasetConfig {
            head: 20,
            abdominal: 10,
            heart: 0,
            ..DatasetConfig::default()
        };
        let plan = plan_dataset(&cfg, 1).unwrap();
        assert_eq!(plan.len(), 30);
        let head_standard =
            plan.iter().filter(|p| p.section == Section::Head && p.standard).count();
        assert_eq!(head_standard, 10);
        // per-section 3:1:1 split
        let head_train = plan
            .iter()
            .filter(|p| p.section == Section::Head && p.split == Split::Train)
            .count();
        assert_eq!(head_train, 12);
    }

    #[test]
    fn plan_is_deterministic() {
        let cfg = DatasetConfig { head: 10, abdominal: 5, heart: 5, ..DatasetConfig::default() };
        assert_eq!(plan_dataset(&cfg, 3).unwrap(), plan_dataset(&cfg, 3).unwrap());
    }

    #[test]
    fn decoys_cover_at_least_a_fifth_of_samples() {
        // Deterministic count over 200 seeds: the decoy coin is fork(2).
        let hits = (0..200u64)
            .filter(|&seed| Rng::new(seed).fork(2).chance(DECOY_PROBABILITY))
            .count();
        assert!(hits >= 40, "only {hits}/200 samples carry a decoy");
    }

    #[test]
    fn plane_label_consistency_over_dataset() {
        let cfg = DatasetConfig { head: 6, abdominal: 6, heart: 6, ..DatasetConfig::default() };
        for (planned, sample) in generate_dataset(&cfg, 11).unwrap() {
            assert_eq!(sample.plane_standard, sample.derived_plane_standard());
            assert_eq!(sample.plane_standard, planned.standard);
            for a in &sample.annotations {
                assert!(a.bbox.x_min >= 0.0 && a.bbox.x_max <= 128.0);
                assert!(a.bbox.y_min >= 0.0 && a.bbox.y_max <= 128.0);
            }
        }
    }

    #[test]
    fn annotation_file_roundtrip() {
        let p = DegradeParams::default();
        let s = generate_sample(Section::Abdominal, false, &p, 13).unwrap();
        let file = s.annotation_file("images/abdominal_0000.png".into());
        assert_eq!(file.plane_standard(), s.plane_standard);
        let back = file.annotations().unwrap();
        assert_eq!(back, s.annotations);
    }
}
