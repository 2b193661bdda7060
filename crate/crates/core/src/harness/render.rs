//! Rasterization for the synthetic scenes. Vehicles are drawn face by
//! face (far to near) with 4x4 supersampled coverage so edges are
//! anti-aliased and sit exactly on the projected wireframe.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::{point_in_polygon, CameraModel, ImagePoint};
use crate::image::{clamp_u8, ycbcr_to_rgb, GrayImage, RgbImage};
use crate::vehicle_model::{front_facing, posed_vertices, DeformableModel, FaceKind, Pose};

const SUB: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehiclePalette {
    pub cb: f64,
    pub cr: f64,
    pub side_y: f64,
    pub top_y: f64,
    pub glass_y: f64,
    pub front_y: f64,
}

impl VehiclePalette {
    /// Adjacent faces alternate between dark and light with the side in
    /// between, so every wireframe edge has a luminance step.
    pub fn with_chroma(cb: f64, cr: f64) -> Self {
        Self { cb, cr, side_y: 125.0, top_y: 225.0, glass_y: 25.0, front_y: 30.0 }
    }

    pub fn nth(i: usize) -> Self {
        const CHROMA: [(f64, f64); 4] = [(100.0, 170.0), (160.0, 110.0), (110.0, 100.0), (150.0, 150.0)];
        let (cb, cr) = CHROMA[i % CHROMA.len()];
        Self::with_chroma(cb, cr)
    }

    pub fn color(&self, kind: FaceKind) -> [u8; 3] {
        let y = match kind {
            FaceKind::Side => self.side_y,
            FaceKind::Hood | FaceKind::Roof | FaceKind::Rear => self.top_y,
            FaceKind::Windshield | FaceKind::RearWindow => self.glass_y,
            FaceKind::Front | FaceKind::Bottom => self.front_y,
        };
        ycbcr_to_rgb([y, self.cb, self.cr])
    }
}

/// Blends `color` into `img` with per-pixel coverage of the region
/// described by `hit`, within the pixel bounding box `bbox`. Pixels with
/// coverage at least one half get `id` in `mask`.
fn fill_coverage(
    img: &mut RgbImage,
    mut mask: Option<(&mut GrayImage, u8)>,
    bbox: (f64, f64, f64, f64),
    color: [u8; 3],
    hit: impl Fn(f64, f64) -> bool,
) {
    if img.width == 0 || img.height == 0 {
        return;
    }
    let x0 = (bbox.0 - 1.0).floor().max(0.0) as usize;
    let y0 = (bbox.1 - 1.0).floor().max(0.0) as usize;
    let x1 = ((bbox.2 + 1.0).ceil().max(0.0) as usize).min(img.width - 1);
    let y1 = ((bbox.3 + 1.0).ceil().max(0.0) as usize).min(img.height - 1);
    if bbox.2 < -1.0 || bbox.3 < -1.0 || x0 > x1 || y0 > y1 {
        return;
    }
    for y in y0..=y1 {
        for x in x0..=x1 {
            let mut n = 0;
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let px = x as f64 - 0.5 + (sx as f64 + 0.5) / SUB as f64;
                    let py = y as f64 - 0.5 + (sy as f64 + 0.5) / SUB as f64;
                    if hit(px, py) {
                        n += 1;
                    }
                }
            }
            if n == 0 {
                continue;
            }
            let a = n as f64 / (SUB * SUB) as f64;
            let old = img.get(x, y);
            let mut out = [0u8; 3];
            for k in 0..3 {
                out[k] = clamp_u8(a * color[k] as f64 + (1.0 - a) * old[k] as f64);
            }
            img.set(x, y, out);
            if let Some((m, id)) = mask.as_mut() {
                if 2 * n >= SUB * SUB {
                    m.set(x, y, *id);
                }
            }
        }
    }
}

pub fn fill_polygon(img: &mut RgbImage, mask: Option<(&mut GrayImage, u8)>, poly: &[(f64, f64)], color: [u8; 3]) {
    if poly.len() < 3 {
        return;
    }
    let bbox = poly.iter().fold((f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY), |b, p| {
        (b.0.min(p.0), b.1.min(p.1), b.2.max(p.0), b.3.max(p.1))
    });
    fill_coverage(img, mask, bbox, color, |x, y| point_in_polygon(poly, x, y));
}

/// Draws the front-facing faces of the posed model, farthest first.
/// Returns false (drawing nothing) when a vertex is behind the camera.
pub fn render_vehicle(
    img: &mut RgbImage,
    mut mask: Option<(&mut GrayImage, u8)>,
    model: &DeformableModel,
    pose: &Pose,
    camera: &CameraModel,
    palette: &VehiclePalette,
) -> bool {
    let world = posed_vertices(model, pose);
    let mut proj = Vec::with_capacity(world.len());
    let mut depth = Vec::with_capacity(world.len());
    for p in &world {
        match camera.project(p) {
            Ok((q, d)) => {
                proj.push(q);
                depth.push(d);
            }
            Err(_) => return false,
        }
    }
    let facing = front_facing(model, pose, camera);
    let mut order: Vec<(usize, f64)> = model
        .faces
        .iter()
        .enumerate()
        .filter(|(i, _)| facing[*i])
        .map(|(i, f)| (i, f.loop_.iter().map(|&v| depth[v]).sum::<f64>() / f.loop_.len() as f64))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (fi, _) in order {
        let f = &model.faces[fi];
        let poly: Vec<(f64, f64)> = f.loop_.iter().map(|&v| (proj[v].u, proj[v].v)).collect();
        let m = mask.as_mut().map(|(m, id)| (&mut **m, *id));
        fill_polygon(img, m, &poly, palette.color(f.kind));
    }
    true
}

/// A filled 2D capsule (stadium) between `head` and `foot`: the segment
/// dilated by `radius`.
pub fn render_capsule(
    img: &mut RgbImage,
    mask: Option<(&mut GrayImage, u8)>,
    head: &ImagePoint,
    foot: &ImagePoint,
    radius: f64,
    color: [u8; 3],
) {
    let (dx, dy) = (foot.u - head.u, foot.v - head.v);
    let l2 = dx * dx + dy * dy;
    let bbox = (head.u.min(foot.u) - radius, head.v.min(foot.v) - radius, head.u.max(foot.u) + radius, head.v.max(foot.v) + radius);
    fill_coverage(img, mask, bbox, color, |x, y| {
        let t = if l2 > 0.0 { (((x - head.u) * dx + (y - head.v) * dy) / l2).clamp(0.0, 1.0) } else { 0.0 };
        let (px, py) = (head.u + t * dx - x, head.v + t * dy - y);
        px * px + py * py <= radius * radius
    });
}

/// Axis-aligned rectangle `(left, top, width, height)`, solid.
pub fn fill_rect(img: &mut RgbImage, mask: Option<(&mut GrayImage, u8)>, rect: (f64, f64, f64, f64), color: [u8; 3]) {
    let (l, t, w, h) = rect;
    fill_coverage(img, mask, (l, t, l + w, t + h), color, |x, y| x >= l && x < l + w && y >= t && y < t + h);
}

/// Adds i.i.d. Gaussian noise to every channel.
pub fn add_noise<R: Rng>(img: &mut RgbImage, sigma: f64, rng: &mut R) {
    if sigma <= 0.0 {
        return;
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    for p in img.data.iter_mut() {
        *p = clamp_u8(*p as f64 + n.sample(rng));
    }
}
