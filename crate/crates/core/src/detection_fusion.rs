//! Fusion of two detectors' outputs: IOU matching, learned box merging,
//! learned class arbitration, 3x3 tiling and non-maximum suppression.

use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Rect;

/// Detections matched across detectors need IOU strictly above this.
pub const MATCH_IOU: f64 = 0.5;
/// Relative singular value below which a design matrix is rank deficient.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("frame {width}x{height} is too small to tile (needs at least 2x2)")]
    FrameTooSmall { width: usize, height: usize },
    #[error("fusion weights are not fitted")]
    UnfittedWeights,
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Source {
    A,
    B,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::A => "A",
            Source::B => "B",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame: u64,
    pub class: String,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
    pub source: Source,
}

impl Detection {
    pub fn bbox(&self) -> Rect {
        Rect::from_center(self.cx, self.cy, self.w, self.h)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn validate(&self) -> Result<(), String> {
        if ![self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err("non-finite box".into());
        }
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err("box width and height must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err("confidence outside [0, 1]".into());
        }
        Ok(())
    }
}

pub fn iou(b1: &Rect, b2: &Rect) -> f64 {
    b1.iou(b2)
}

/// The 3x3 grid of half-size tiles. Columns start at 0, floor(W/4) and
/// W - ceil(W/2) (the last column is pinned to the right edge so the
/// tiles always cover the frame); rows likewise.
pub fn tile_frame(width: usize, height: usize) -> Result<Vec<Rect>, FusionError> {
    if width < 2 || height < 2 {
        return Err(FusionError::FrameTooSmall { width, height });
    }
    let starts = |n: usize| {
        let t = n.div_ceil(2);
        ([0, n / 4, n - t], t)
    };
    let (xs, tw) = starts(width);
    let (ys, th) = starts(height);
    let mut out = Vec::with_capacity(9);
    for &y in &ys {
        for &x in &xs {
            out.push(Rect::new(x as f64, y as f64, tw as f64, th as f64));
        }
    }
    Ok(out)
}

/// Greedy NMS: highest confidence first (ties to the earlier input),
/// suppressing same-class boxes whose IOU with a kept box exceeds
/// `iou_thresh`. Returns the kept detections in selection order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let bi = dets[i].bbox();
        if kept.iter().all(|&k| dets[k].class != dets[i].class || dets[k].bbox().iou(&bi) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeights {
    /// Per-dimension merge weights on (cx, cy, w, h) for detector A and B.
    pub w1: [f64; 4],
    pub w2: [f64; 4],
    /// Arbitration weights on the A and B scores.
    pub w3: f64,
    pub w4: f64,
    pub fitted: bool,
}

impl FusionWeights {
    pub fn unfitted() -> Self {
        Self { w1: [0.0; 4], w2: [0.0; 4], w3: 0.0, w4: 0.0, fitted: false }
    }

    pub fn new(w1: [f64; 4], w2: [f64; 4], w3: f64, w4: f64) -> Self {
        Self { w1, w2, w3, w4, fitted: true }
    }

    pub fn to_array(&self) -> [f64; 10] {
        let mut a = [0.0; 10];
        a[..4].copy_from_slice(&self.w1);
        a[4..8].copy_from_slice(&self.w2);
        a[8] = self.w3;
        a[9] = self.w4;
        a
    }

    /// Ten whitespace-separated numbers: w1 (4), w2 (4), w3, w4.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let a = self.to_array();
        writeln!(w, "{}", a.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" "))
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, FusionError> {
        let mut vals = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| FusionError::Io(e.to_string()))?;
            let body = line.split('#').next().unwrap_or("");
            for tok in body.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| FusionError::Parse { line: n + 1, message: format!("not a number: {tok:?}") })?;
                if !v.is_finite() {
                    return Err(FusionError::Parse { line: n + 1, message: "non-finite weight".into() });
                }
                vals.push(v);
            }
        }
        if vals.len() != 10 {
            return Err(FusionError::Parse { line: 0, message: format!("expected 10 weights, found {}", vals.len()) });
        }
        let mut w1 = [0.0; 4];
        let mut w2 = [0.0; 4];
        w1.copy_from_slice(&vals[..4]);
        w2.copy_from_slice(&vals[4..8]);
        Ok(Self::new(w1, w2, vals[8], vals[9]))
    }

    pub fn save(&self, path: &Path) -> Result<(), FusionError> {
        let f = std::fs::File::create(path).map_err(|e| FusionError::Io(format!("{}: {e}", path.display())))?;
        self.write_to(f).map_err(|e| FusionError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, FusionError> {
        let f = std::fs::File::open(path).map_err(|e| FusionError::Io(format!("{}: {e}", path.display())))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

pub fn merge_boxes(b1: &[f64; 4], b2: &[f64; 4], weights: &FusionWeights) -> Result<[f64; 4], FusionError> {
    if !weights.fitted {
        return Err(FusionError::UnfittedWeights);
    }
    Ok(std::array::from_fn(|d| weights.w1[d] * b1[d] + weights.w2[d] * b2[d]))
}

/// Which detector's class to trust: A iff `w3 s1 + w4 s2 >= 0`.
pub fn arbitrate_class(s1: f64, s2: f64, weights: &FusionWeights) -> Result<Source, FusionError> {
    if !weights.fitted {
        return Err(FusionError::UnfittedWeights);
    }
    Ok(if weights.w3 * s1 + weights.w4 * s2 >= 0.0 { Source::A } else { Source::B })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeSample {
    pub a: [f64; 4],
    pub b: [f64; 4],
    pub truth: [f64; 4],
}

/// Scores of both detectors on a class conflict; `label` is +1 when A was
/// right and -1 when B was.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArbitrationSample {
    pub s1: f64,
    pub s2: f64,
    pub label: f64,
}

/// Least squares without intercept of `y` on two regressors.
fn ols2(rows: &[(f64, f64)], y: &[f64]) -> Result<(f64, f64), FusionError> {
    if rows.len() < 2 {
        return Err(FusionError::RankDeficient);
    }
    let x = DMatrix::from_fn(rows.len(), 2, |i, j| if j == 0 { rows[i].0 } else { rows[i].1 });
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if !(smax > 0.0) || svd.singular_values.min() <= RANK_TOL * smax {
        return Err(FusionError::RankDeficient);
    }
    let sol = svd.solve(&DVector::from_column_slice(y), 0.0).map_err(|_| FusionError::RankDeficient)?;
    Ok((sol[0], sol[1]))
}

pub fn fit_fusion_weights(merge: &[MergeSample], arbitration: &[ArbitrationSample]) -> Result<FusionWeights, FusionError> {
    let mut w1 = [0.0; 4];
    let mut w2 = [0.0; 4];
    for d in 0..4 {
        let rows: Vec<(f64, f64)> = merge.iter().map(|s| (s.a[d], s.b[d])).collect();
        let y: Vec<f64> = merge.iter().map(|s| s.truth[d]).collect();
        (w1[d], w2[d]) = ols2(&rows, &y)?;
    }
    let rows: Vec<(f64, f64)> = arbitration.iter().map(|s| (s.s1, s.s2)).collect();
    let y: Vec<f64> = arbitration.iter().map(|s| s.label).collect();
    let (w3, w4) = ols2(&rows, &y)?;
    Ok(FusionWeights::new(w1, w2, w3, w4))
}

/// Fuses one frame of detections from A and B. Pairs with IOU above
/// `iou_match` are matched greedily by descending IOU. A same-class pair
/// becomes one merged box with the higher confidence (and that
/// detection's source, A on ties); a class conflict keeps the detection
/// arbitration picks. Unmatched detections pass through, and the result
/// goes through NMS at 0.5.
pub fn fuse(a: &[Detection], b: &[Detection], weights: &FusionWeights, iou_match: f64) -> Result<Vec<Detection>, FusionError> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, da) in a.iter().enumerate() {
        for (j, db) in b.iter().enumerate() {
            let v = da.bbox().iou(&db.bbox());
            if v > iou_match {
                pairs.push((v, i, j));
            }
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut out = Vec::new();
    for (_, i, j) in pairs {
        if used_a[i] || used_b[j] {
            continue;
        }
        used_a[i] = true;
        used_b[j] = true;
        let (da, db) = (&a[i], &b[j]);
        if da.class == db.class {
            let m = merge_boxes(&da.as_array(), &db.as_array(), weights)?;
            let lead = if db.confidence > da.confidence { db } else { da };
            out.push(Detection {
                frame: da.frame,
                class: da.class.clone(),
                cx: m[0],
                cy: m[1],
                w: m[2],
                h: m[3],
                confidence: da.confidence.max(db.confidence),
                source: lead.source,
            });
        } else {
            out.push(match arbitrate_class(da.confidence, db.confidence, weights)? {
                Source::A => da.clone(),
                Source::B => db.clone(),
            });
        }
    }
    out.extend(a.iter().zip(&used_a).filter(|(_, u)| !**u).map(|(d, _)| d.clone()));
    out.extend(b.iter().zip(&used_b).filter(|(_, u)| !**u).map(|(d, _)| d.clone()));
    Ok(nms(&out, MATCH_IOU))
}

/// What a detector run tile by tile reports: every detection that lies
/// wholly inside a tile, once per such tile, in tile order.
pub fn detections_per_tile(dets: &[Detection], tiles: &[Rect]) -> Vec<Detection> {
    tiles.iter().flat_map(|t| dets.iter().filter(move |d| t.contains_rect(&d.bbox())).cloned()).collect()
}

/// Detection CSV with header `frame,class,cx,cy,w,h,confidence,source`.
pub fn read_detections<R: Read>(r: R) -> Result<Vec<Detection>, FusionError> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header = rd.headers().map_err(|e| FusionError::Parse { line: 1, message: e.to_string() })?;
    let expected = ["frame", "class", "cx", "cy", "w", "h", "confidence", "source"];
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(FusionError::Parse { line: 1, message: format!("header must be {}", expected.join(",")) });
    }
    let mut out = Vec::new();
    for (k, rec) in rd.deserialize::<Detection>().enumerate() {
        let line = k + 2;
        let d = rec.map_err(|e| FusionError::Parse { line, message: e.to_string() })?;
        d.validate().map_err(|m| FusionError::Parse { line, message: m })?;
        out.push(d);
    }
    Ok(out)
}

pub fn write_detections<W: Write>(w: W, dets: &[Detection]) -> Result<(), FusionError> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(["frame", "class", "cx", "cy", "w", "h", "confidence", "source"]).map_err(|e| FusionError::Io(e.to_string()))?;
    for d in dets {
        wr.serialize(d).map_err(|e| FusionError::Io(e.to_string()))?;
    }
    wr.flush().map_err(|e| FusionError::Io(e.to_string()))
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>, FusionError> {
    let f = std::fs::File::open(path).map_err(|e| FusionError::Io(format!("{}: {e}", path.display())))?;
    read_detections(f)
}

/// Fuses two detection lists frame by frame.
pub fn fuse_frames(a: &[Detection], b: &[Detection], weights: &FusionWeights) -> Result<Vec<Detection>, FusionError> {
    let mut frames: Vec<u64> = a.iter().chain(b).map(|d| d.frame).collect();
    frames.sort_unstable();
    frames.dedup();
    let mut out = Vec::new();
    for f in frames {
        let fa: Vec<Detection> = a.iter().filter(|d| d.frame == f).cloned().collect();
        let fb: Vec<Detection> = b.iter().filter(|d| d.frame == f).cloned().collect();
        out.extend(fuse(&fa, &fb, weights, MATCH_IOU)?);
    }
    Ok(out)
}
