use nalgebra::{Matrix3, Vector3};

use super::TrackingError;
use crate::geometry::{point_in_polygon, CameraModel, Point3};
use crate::image::{rgb_to_ycbcr, RgbImage};
use crate::segmentation::{bhattacharyya_similarity, ColorSpace, KernelHistogram};
use crate::vehicle_model::{compute_fes, front_facing, pose_and_project, posed_vertices, DeformableModel, FesResult, GradientField, Pose};

/// Color bin of every pixel of a frame, computed once per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBins {
    pub width: usize,
    pub height: usize,
    pub space: ColorSpace,
    pub bins: Vec<u16>,
}

impl FrameBins {
    pub fn new(frame: &RgbImage, space: ColorSpace) -> Self {
        let bins = frame.data.chunks_exact(3).map(|p| space.bin(&rgb_to_ycbcr([p[0], p[1], p[2]])) as u16).collect();
        Self { width: frame.width, height: frame.height, space, bins }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelHit {
    pub pixel: usize,
    pub face: usize,
    /// Distance from the camera center along the viewing ray.
    pub depth: f64,
    pub point: Vector3<f64>,
}

/// Nearest front-facing face under every covered pixel of a posed model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRaster {
    pub hits: Vec<PixelHit>,
    pub facing: Vec<bool>,
}

impl ModelRaster {
    pub fn face_pixel_counts(&self, faces: usize, exclude: Option<&[bool]>) -> Vec<usize> {
        let mut n = vec![0; faces];
        for h in &self.hits {
            if exclude.is_none_or(|e| !e[h.pixel]) {
                n[h.face] += 1;
            }
        }
        n
    }
}

pub fn rasterize_model(
    model: &DeformableModel,
    pose: &Pose,
    camera: &CameraModel,
    width: usize,
    height: usize,
) -> Result<ModelRaster, TrackingError> {
    let world = posed_vertices(model, pose);
    let proj = world
        .iter()
        .map(|p| camera.project(p).map(|(q, _)| (q.u, q.v)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| TrackingError::NotProjectable)?;
    let facing = front_facing(model, pose, camera);
    let center = camera.center().to_vector();
    struct FaceRef {
        id: usize,
        poly: Vec<(f64, f64)>,
        bbox: (f64, f64, f64, f64),
        normal: Vector3<f64>,
        offset: f64,
    }
    let faces: Vec<FaceRef> = model
        .faces
        .iter()
        .enumerate()
        .filter(|(i, _)| facing[*i])
        .map(|(i, f)| {
            let poly: Vec<(f64, f64)> = f.loop_.iter().map(|&v| proj[v]).collect();
            let bbox = poly.iter().fold((f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY), |b, p| {
                (b.0.min(p.0), b.1.min(p.1), b.2.max(p.0), b.3.max(p.1))
            });
            let normal = pose.rotate(&f.normal);
            let offset = normal.dot(&world[f.loop_[0]].to_vector());
            FaceRef { id: i, poly, bbox, normal, offset }
        })
        .collect();
    let mut hits = Vec::new();
    if faces.is_empty() || width == 0 || height == 0 {
        return Ok(ModelRaster { hits, facing });
    }
    let (lo_x, lo_y, hi_x, hi_y) = faces.iter().fold((f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY), |b, f| {
        (b.0.min(f.bbox.0), b.1.min(f.bbox.1), b.2.max(f.bbox.2), b.3.max(f.bbox.3))
    });
    if hi_x < 0.0 || hi_y < 0.0 || lo_x > (width - 1) as f64 || lo_y > (height - 1) as f64 {
        return Ok(ModelRaster { hits, facing });
    }
    let x0 = lo_x.ceil().max(0.0) as usize;
    let y0 = lo_y.ceil().max(0.0) as usize;
    let x1 = (hi_x.floor() as usize).min(width - 1);
    let y1 = (hi_y.floor() as usize).min(height - 1);
    let m: Matrix3<f64> = camera.r.transpose() * camera.k_inv();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (xf, yf) = (x as f64, y as f64);
            let mut best: Option<(usize, f64, Vector3<f64>)> = None;
            for f in &faces {
                if xf < f.bbox.0 || xf > f.bbox.2 || yf < f.bbox.1 || yf > f.bbox.3 || !point_in_polygon(&f.poly, xf, yf) {
                    continue;
                }
                let dir = (m * Vector3::new(xf, yf, 1.0)).normalize();
                let den = f.normal.dot(&dir);
                if den.abs() < 1e-12 {
                    continue;
                }
                let t = (f.offset - f.normal.dot(&center)) / den;
                if t > 0.0 && best.as_ref().is_none_or(|b| t < b.1) {
                    best = Some((f.id, t, center + dir * t));
                }
            }
            if let Some((face, depth, point)) = best {
                hits.push(PixelHit { pixel: y * width + x, face, depth, point });
            }
        }
    }
    Ok(ModelRaster { hits, facing })
}

/// Spatial weight of a 3D kernel sample at squared normalized radius `r2`.
pub fn spatial_weight(r2: f64) -> f64 {
    (-2.0 * r2).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub face_id: usize,
    /// Face polygon in the body frame.
    pub polygon: Vec<Point3>,
    /// Area centroid in the body frame.
    pub centroid: Point3,
    /// Half the largest vertex-to-vertex distance of the face.
    pub bandwidth: f64,
    pub target_hist: KernelHistogram,
    pub weight: f64,
    /// Visible projected area in pixels.
    pub visible_area: f64,
}

impl Kernel {
    pub fn world_centroid(&self, pose: &Pose, clearance: f64) -> Vector3<f64> {
        pose.transform(&self.centroid, clearance).to_vector()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelConstraints {
    /// Index of the reference kernel in the kernel list.
    pub reference: usize,
    /// Body-frame reference axes through the reference face corner.
    pub v_a: Vector3<f64>,
    pub v_b: Vector3<f64>,
    /// Per kernel (the reference entry is unused and zero).
    pub lengths: Vec<f64>,
    pub phi: Vec<f64>,
    pub zeta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintResiduals {
    /// `|P_k - P_ref|^2 - L^2` per non-reference kernel.
    pub distance: Vec<f64>,
    /// Cosine residuals against `v_a` and `v_b`.
    pub angle_a: Vec<f64>,
    pub angle_b: Vec<f64>,
}

impl ConstraintResiduals {
    pub fn max_abs(&self) -> f64 {
        self.distance.iter().chain(&self.angle_a).chain(&self.angle_b).fold(0.0, |m, r| m.max(r.abs()))
    }
}

impl KernelConstraints {
    pub fn from_kernels(kernels: &[Kernel], reference: usize) -> Self {
        let poly = &kernels[reference].polygon;
        let o = poly[0].to_vector();
        let ea = poly[1].to_vector() - o;
        let eb = poly[poly.len() - 1].to_vector() - o;
        let v_a = ea.normalize();
        let v_b = (eb - v_a * eb.dot(&v_a)).normalize();
        let c_ref = kernels[reference].centroid.to_vector();
        let mut lengths = vec![0.0; kernels.len()];
        let mut phi = vec![0.0; kernels.len()];
        let mut zeta = vec![0.0; kernels.len()];
        for (k, kern) in kernels.iter().enumerate() {
            if k == reference {
                continue;
            }
            let v = kern.centroid.to_vector() - c_ref;
            let l = v.norm();
            lengths[k] = l;
            phi[k] = (v_a.dot(&v) / l).clamp(-1.0, 1.0).acos();
            zeta[k] = (v_b.dot(&v) / l).clamp(-1.0, 1.0).acos();
        }
        Self { reference, v_a, v_b, lengths, phi, zeta }
    }

    /// Distance and angle residuals of the kernel centroids placed at
    /// `pose` in the world.
    pub fn residuals(&self, kernels: &[Kernel], pose: &Pose, clearance: f64) -> ConstraintResiduals {
        let p_ref = kernels[self.reference].world_centroid(pose, clearance);
        let va = pose.rotate(&self.v_a);
        let vb = pose.rotate(&self.v_b);
        let mut out = ConstraintResiduals { distance: Vec::new(), angle_a: Vec::new(), angle_b: Vec::new() };
        for (k, kern) in kernels.iter().enumerate() {
            if k == self.reference {
                continue;
            }
            let v = kern.world_centroid(pose, clearance) - p_ref;
            out.distance.push(v.norm_squared() - self.lengths[k] * self.lengths[k]);
            out.angle_a.push(va.dot(&v) / (va.norm() * v.norm()) - self.phi[k].cos());
            out.angle_b.push(vb.dot(&v) / (vb.norm() * v.norm()) - self.zeta[k].cos());
        }
        out
    }
}

/// Gaussian-weighted histograms of the kernels' faces at `pose`. Returns
/// per kernel the raw bin weights and the number of contributing pixels.
fn face_histograms(
    model: &DeformableModel,
    kernels: &[Kernel],
    raster: &ModelRaster,
    pose: &Pose,
    bins: &FrameBins,
    exclude: Option<&[bool]>,
) -> Vec<(Vec<f64>, usize)> {
    let clearance = model.shape.ground_clearance;
    let mut slot = vec![usize::MAX; model.faces.len()];
    for (k, kern) in kernels.iter().enumerate() {
        slot[kern.face_id] = k;
    }
    let centers: Vec<Vector3<f64>> = kernels.iter().map(|k| k.world_centroid(pose, clearance)).collect();
    let nbins = bins.space.bin_count();
    let mut out: Vec<(Vec<f64>, usize)> = kernels.iter().map(|_| (vec![0.0; nbins], 0)).collect();
    for h in &raster.hits {
        let k = slot[h.face];
        if k == usize::MAX || exclude.is_some_and(|e| e[h.pixel]) {
            continue;
        }
        let bw = kernels[k].bandwidth;
        let r2 = (h.point - centers[k]).norm_squared() / (bw * bw);
        out[k].0[bins.bins[h.pixel] as usize] += spatial_weight(r2);
        out[k].1 += 1;
    }
    out
}

fn face_diameter(poly: &[Point3]) -> f64 {
    let mut d = 0.0f64;
    for a in poly {
        for b in poly {
            d = d.max(a.dist(b));
        }
    }
    d
}

/// Builds one kernel per visible face (at least `min_pixels` pixels not in
/// `exclude`), with area-proportional weights, plus the rigid constraints
/// relative to the largest kernel.
pub fn init_kernels(
    model: &DeformableModel,
    pose: &Pose,
    camera: &CameraModel,
    bins: &FrameBins,
    exclude: Option<&[bool]>,
    min_pixels: usize,
) -> Result<(Vec<Kernel>, KernelConstraints), TrackingError> {
    let raster = rasterize_model(model, pose, camera, bins.width, bins.height)?;
    let counts = raster.face_pixel_counts(model.faces.len(), exclude);
    let mut kernels: Vec<Kernel> = Vec::new();
    for (f, face) in model.faces.iter().enumerate() {
        if counts[f] < min_pixels.max(1) {
            continue;
        }
        let polygon: Vec<Point3> = face.loop_.iter().map(|&v| model.vertices[v]).collect();
        let (_, centroid) = model.face_area_centroid(f);
        kernels.push(Kernel {
            face_id: f,
            bandwidth: face_diameter(&polygon) / 2.0,
            polygon,
            centroid,
            target_hist: KernelHistogram { space: bins.space, bins: Vec::new() },
            weight: 0.0,
            visible_area: counts[f] as f64,
        });
    }
    if kernels.is_empty() {
        return Err(TrackingError::NoVisibleFaces);
    }
    let hists = face_histograms(model, &kernels, &raster, pose, bins, exclude);
    let mut kept = Vec::new();
    for (mut k, (h, _)) in kernels.into_iter().zip(hists) {
        if let Some(hist) = KernelHistogram::from_weights(bins.space, h) {
            k.target_hist = hist;
            kept.push(k);
        }
    }
    if kept.is_empty() {
        return Err(TrackingError::NoVisibleFaces);
    }
    let areas: Vec<f64> = kept.iter().map(|k| k.visible_area).collect();
    set_weights(&mut kept, &areas)?;
    let reference = reference_kernel(&kept);
    let constraints = KernelConstraints::from_kernels(&kept, reference);
    Ok((kept, constraints))
}

/// Kernel with the largest visible area; ties go to the lower index.
pub fn reference_kernel(kernels: &[Kernel]) -> usize {
    let mut best = 0;
    for (i, k) in kernels.iter().enumerate() {
        if k.visible_area > kernels[best].visible_area {
            best = i;
        }
    }
    best
}

/// Sets visible areas and area-proportional weights summing to one.
pub fn set_weights(kernels: &mut [Kernel], areas: &[f64]) -> Result<(), TrackingError> {
    let total: f64 = areas.iter().sum();
    if !(total > 0.0) {
        for k in kernels.iter_mut() {
            k.visible_area = 0.0;
            k.weight = 0.0;
        }
        return Err(TrackingError::NoVisibleFaces);
    }
    for (k, &a) in kernels.iter_mut().zip(areas) {
        k.visible_area = a;
        k.weight = a / total;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelTerm {
    pub weight: f64,
    /// Bhattacharyya coefficient against the target histogram.
    pub similarity: f64,
    /// Sample-weighted FES of the face's edges.
    pub fitness: f64,
    pub pixels: usize,
}

impl KernelTerm {
    pub fn cost(&self) -> f64 {
        self.weight * ((1.0 - self.similarity) + (1.0 - self.fitness))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostBreakdown {
    pub total: f64,
    pub terms: Vec<KernelTerm>,
    pub fes: FesResult,
}

/// Everything the pose cost needs besides the pose itself.
#[derive(Debug, Clone, Copy)]
pub struct CostContext<'a> {
    pub model: &'a DeformableModel,
    pub kernels: &'a [Kernel],
    pub camera: &'a CameraModel,
    pub bins: &'a FrameBins,
    pub field: &'a GradientField,
    /// Pixels owned by other objects, left out of every histogram.
    pub exclude: Option<&'a [bool]>,
}

impl CostContext<'_> {
    /// Weighted sum over kernels of color dissimilarity and edge misfit,
    /// in `[0, 2]`.
    pub fn cost(&self, pose: &Pose) -> Result<CostBreakdown, TrackingError> {
        if self.kernels.iter().all(|k| k.weight <= 0.0) {
            return Err(TrackingError::NoVisibleFaces);
        }
        let raster = rasterize_model(self.model, pose, self.camera, self.bins.width, self.bins.height)?;
        let hists = face_histograms(self.model, self.kernels, &raster, pose, self.bins, self.exclude);
        let segs = pose_and_project(self.model, pose, self.camera).map_err(|_| TrackingError::NotProjectable)?;
        let fes = compute_fes(self.field, &segs).map_err(|e| TrackingError::Model(e.to_string()))?;
        let mut terms = Vec::with_capacity(self.kernels.len());
        let mut total = 0.0;
        for (k, (h, n)) in self.kernels.iter().zip(hists) {
            let similarity = match KernelHistogram::from_weights(self.bins.space, h) {
                Some(cand) => bhattacharyya_similarity(&cand, &k.target_hist).unwrap_or(0.0),
                None => 0.0,
            };
            let face = &self.model.faces[k.face_id];
            let (mut s, mut c) = (0.0, 0usize);
            for e in fes.per_edge.iter().filter(|e| face.edges.contains(&e.edge)) {
                s += e.score * e.samples as f64;
                c += e.samples;
            }
            let fitness = if c > 0 { s / c as f64 } else { 0.0 };
            let t = KernelTerm { weight: k.weight, similarity, fitness, pixels: n };
            total += t.cost();
            terms.push(t);
        }
        Ok(CostBreakdown { total, terms, fes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracking::testutil::scene;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shoelace(poly: &[(f64, f64)]) -> f64 {
        let n = poly.len();
        (0..n).map(|i| poly[i].0 * poly[(i + 1) % n].1 - poly[(i + 1) % n].0 * poly[i].1).sum::<f64>().abs() / 2.0
    }

    #[test]
    fn uniform_face_has_single_bin_histogram() {
        let (cam, img, model, pose) = scene();
        let bins = FrameBins::new(&img, ColorSpace::YCbCr);
        let (kernels, _) = init_kernels(&model, &pose, &cam, &bins, None, 20).unwrap();
        assert!(kernels.len() >= 3);
        let side = kernels.iter().max_by(|a, b| a.visible_area.total_cmp(&b.visible_area)).unwrap();
        let top = side.target_hist.bins.iter().cloned().fold(0.0, f64::max);
        assert!(top > 0.95, "{top}");
        let flat = FrameBins::new(&RgbImage::filled(640, 360, [200, 10, 10]), ColorSpace::YCbCr);
        let (kernels, _) = init_kernels(&model, &pose, &cam, &flat, None, 1).unwrap();
        for k in &kernels {
            assert_eq!(k.target_hist.bins.iter().filter(|&&b| b > 0.0).count(), 1);
            assert!((k.target_hist.sum() - 1.0).abs() < 1e-12);
        }
        assert!((kernels.iter().map(|k| k.weight).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constraints_hold_on_the_model_itself() {
        let (cam, img, model, pose) = scene();
        let bins = FrameBins::new(&img, ColorSpace::YCbCr);
        let (kernels, c) = init_kernels(&model, &pose, &cam, &bins, None, 20).unwrap();
        assert!(c.v_a.dot(&c.v_b).abs() < 1e-9);
        assert!((c.v_a.norm() - 1.0).abs() < 1e-12 && (c.v_b.norm() - 1.0).abs() < 1e-12);
        for (k, l) in c.lengths.iter().enumerate() {
            assert!(k == c.reference || *l > 0.0);
        }
        let r = c.residuals(&kernels, &Pose::new(0.0, 0.0, 0.0), 0.0);
        assert!(r.max_abs() < 1e-12, "{r:?}");
        let r = c.residuals(&kernels, &Pose::new(7.3, -2.1, 2.9), model.shape.ground_clearance);
        assert!(r.max_abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn reference_matches_polygon_area_oracle() {
        let (cam, _, model, _) = scene();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bins = FrameBins::new(&RgbImage::filled(640, 360, [90, 90, 90]), ColorSpace::YCbCr);
        let mut compared = 0;
        for _ in 0..20 {
            let pose = Pose::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-3.1..3.1));
            let (kernels, c) = init_kernels(&model, &pose, &cam, &bins, None, 1).unwrap();
            let world = posed_vertices(&model, &pose);
            let facing = front_facing(&model, &pose, &cam);
            let mut areas: Vec<(f64, usize)> = (0..model.faces.len())
                .filter(|&f| facing[f])
                .map(|f| {
                    let poly: Vec<(f64, f64)> = model.faces[f].loop_.iter().map(|&v| {
                        let (q, _) = cam.project(&world[v]).unwrap();
                        (q.u, q.v)
                    }).collect();
                    (shoelace(&poly), f)
                })
                .collect();
            areas.sort_by(|a, b| b.0.total_cmp(&a.0));
            // Skip near ties, where pixel counting may legitimately differ.
            if areas.len() > 1 && areas[0].0 < 1.05 * areas[1].0 {
                continue;
            }
            assert_eq!(kernels[c.reference].face_id, areas[0].1);
            compared += 1;
        }
        assert!(compared >= 15, "{compared}");
    }

    #[test]
    fn cost_is_zero_color_term_at_init_pose_and_prefers_truth() {
        let (cam, img, model, pose) = scene();
        let bins = FrameBins::new(&img, ColorSpace::YCbCr);
        let field = GradientField::from_image(&img);
        let (kernels, _) = init_kernels(&model, &pose, &cam, &bins, None, 20).unwrap();
        let ctx = CostContext { model: &model, kernels: &kernels, camera: &cam, bins: &bins, field: &field, exclude: None };
        let at = ctx.cost(&pose).unwrap();
        for t in &at.terms {
            assert!((1.0 - t.similarity).abs() < 1e-9);
        }
        assert!(at.total >= 0.0 && at.total <= 2.0);
        let shifted = Pose::new(pose.x - 0.5 * pose.theta.sin(), pose.y + 0.5 * pose.theta.cos(), pose.theta);
        assert!(at.total < ctx.cost(&shifted).unwrap().total);
    }

    #[test]
    fn doubling_gradients_keeps_grid_argmin() {
        let (cam, img, model, pose) = scene();
        let bins = FrameBins::new(&img, ColorSpace::YCbCr);
        let lum = img.luminance();
        let f1 = GradientField::from_luminance(img.width, img.height, &lum);
        let doubled: Vec<f64> = lum.iter().map(|v| 2.0 * v).collect();
        let f2 = GradientField::from_luminance(img.width, img.height, &doubled);
        let (kernels, _) = init_kernels(&model, &pose, &cam, &bins, None, 20).unwrap();
        let argmin = |field: &GradientField| {
            let ctx = CostContext { model: &model, kernels: &kernels, camera: &cam, bins: &bins, field, exclude: None };
            let mut best = (f64::INFINITY, 0);
            let mut k = 0;
            for dx in [-0.3, 0.0, 0.3] {
                for dy in [-0.3, 0.0, 0.3] {
                    for dt in [-5.0f64, 0.0, 5.0] {
                        let p = Pose::new(pose.x + dx, pose.y + dy, pose.theta + dt.to_radians());
                        let c = ctx.cost(&p).unwrap().total;
                        if c < best.0 {
                            best = (c, k);
                        }
                        k += 1;
                    }
                }
            }
            best.1
        };
        assert_eq!(argmin(&f1), argmin(&f2));
    }

    #[test]
    fn excluded_pixels_and_empty_kernels() {
        let (cam, img, model, pose) = scene();
        let bins = FrameBins::new(&img, ColorSpace::YCbCr);
        let all = vec![true; 640 * 360];
        assert_eq!(init_kernels(&model, &pose, &cam, &bins, Some(&all), 1).unwrap_err(), TrackingError::NoVisibleFaces);
        let (mut kernels, _) = init_kernels(&model, &pose, &cam, &bins, None, 1).unwrap();
        let zeros = vec![0.0; kernels.len()];
        assert_eq!(set_weights(&mut kernels, &zeros), Err(TrackingError::NoVisibleFaces));
    }
}
