//! CLEAR MOT evaluation over bounding boxes.
//!
//! Per frame, ground truth and hypotheses are matched on IOU above a
//! threshold. Pairs matched in the previous frame are kept while they still
//! clear the threshold; the rest are matched optimally (Hungarian). An
//! identity switch is counted whenever a ground truth object is matched to
//! a hypothesis other than the one it was last matched to.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Read;
use std::path::Path;

use serde::Serialize;

use super::HarnessError;
use crate::assignment::max_score_assignment;
use crate::geometry::Rect;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotBox {
    pub frame: u64,
    pub id: u64,
    pub bbox: Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchEntry {
    pub frame: u64,
    pub gt_id: u64,
    pub hyp_id: u64,
    pub iou: f64,
    pub switch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MotReport {
    pub mota: f64,
    /// Mean IOU of matched pairs, in [0, 1].
    pub motp: f64,
    /// False positives per frame.
    pub faf: f64,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub idsw: usize,
    pub total_gt: usize,
    pub matched: usize,
    pub frames: usize,
    #[serde(skip)]
    pub matches: Vec<MatchEntry>,
}

impl MotReport {
    /// MOTA recomputed from the counts (an empty ground truth counts as
    /// one object so the ratio stays finite).
    pub fn mota_from_counts(&self) -> f64 {
        1.0 - (self.fn_ + self.fp + self.idsw) as f64 / self.total_gt.max(1) as f64
    }

    pub fn motp_from_matches(&self) -> f64 {
        if self.matches.is_empty() {
            0.0
        } else {
            self.matches.iter().map(|m| m.iou).sum::<f64>() / self.matches.len() as f64
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable summary; MOTP in percent.
    pub fn summary(&self) -> String {
        format!(
            "MOTA {:.4}  MOTP {:.2}%  FAF {:.4}  FP {}  FN {}  IDSW {}  GT {}  frames {}",
            self.mota,
            100.0 * self.motp,
            self.faf,
            self.fp,
            self.fn_,
            self.idsw,
            self.total_gt,
            self.frames
        )
    }
}

fn by_frame(boxes: &[MotBox]) -> BTreeMap<u64, Vec<MotBox>> {
    let mut m: BTreeMap<u64, Vec<MotBox>> = BTreeMap::new();
    for b in boxes {
        m.entry(b.frame).or_default().push(*b);
    }
    for v in m.values_mut() {
        v.sort_by_key(|b| b.id);
    }
    m
}

pub fn evaluate_mot(gt: &[MotBox], hyp: &[MotBox], iou_thresh: f64) -> MotReport {
    let g = by_frame(gt);
    let h = by_frame(hyp);
    let frames: BTreeSet<u64> = g.keys().chain(h.keys()).copied().collect();
    let empty = Vec::new();
    let mut last: HashMap<u64, u64> = HashMap::new();
    let mut prev_pairs: HashMap<u64, u64> = HashMap::new();
    let (mut fp, mut fn_, mut idsw, mut total_gt) = (0, 0, 0, 0);
    let mut matches = Vec::new();
    for f in &frames {
        let gs = g.get(f).unwrap_or(&empty);
        let hs = h.get(f).unwrap_or(&empty);
        total_gt += gs.len();
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        let mut g_used = vec![false; gs.len()];
        let mut h_used = vec![false; hs.len()];
        for (i, gb) in gs.iter().enumerate() {
            let Some(&hid) = prev_pairs.get(&gb.id) else { continue };
            if let Some(j) = hs.iter().position(|hb| hb.id == hid) {
                if !h_used[j] && gb.bbox.iou(&hs[j].bbox) > iou_thresh {
                    pairs.push((i, j));
                    g_used[i] = true;
                    h_used[j] = true;
                }
            }
        }
        let gi: Vec<usize> = (0..gs.len()).filter(|&i| !g_used[i]).collect();
        let hj: Vec<usize> = (0..hs.len()).filter(|&j| !h_used[j]).collect();
        let scores: Vec<Vec<f64>> = gi.iter().map(|&i| hj.iter().map(|&j| gs[i].bbox.iou(&hs[j].bbox)).collect()).collect();
        for (r, a) in max_score_assignment(&scores, iou_thresh).into_iter().enumerate() {
            if let Some(c) = a {
                pairs.push((gi[r], hj[c]));
            }
        }
        pairs.sort();
        prev_pairs.clear();
        for &(i, j) in &pairs {
            let (gid, hid) = (gs[i].id, hs[j].id);
            let switch = last.get(&gid).is_some_and(|&p| p != hid);
            idsw += switch as usize;
            last.insert(gid, hid);
            prev_pairs.insert(gid, hid);
            matches.push(MatchEntry { frame: *f, gt_id: gid, hyp_id: hid, iou: gs[i].bbox.iou(&hs[j].bbox), switch });
        }
        fn_ += gs.len() - pairs.len();
        fp += hs.len() - pairs.len();
    }
    let mut r = MotReport {
        mota: 0.0,
        motp: 0.0,
        faf: if frames.is_empty() { 0.0 } else { fp as f64 / frames.len() as f64 },
        fp,
        fn_,
        idsw,
        total_gt,
        matched: matches.len(),
        frames: frames.len(),
        matches,
    };
    r.mota = r.mota_from_counts();
    r.motp = r.motp_from_matches();
    r
}

const REQUIRED: [&str; 6] = ["frame", "id", "bb_left", "bb_top", "bb_width", "bb_height"];

/// Reads any CSV that has the columns `frame,id,bb_left,bb_top,bb_width,
/// bb_height` (in any order, other columns ignored).
pub fn read_mot_csv<R: Read>(r: R) -> Result<Vec<MotBox>, HarnessError> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header = rd.headers().map_err(|e| HarnessError::Parse { line: 1, message: e.to_string() })?.clone();
    let mut idx = [0usize; 6];
    for (k, name) in REQUIRED.iter().enumerate() {
        idx[k] = header
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| HarnessError::Parse { line: 1, message: format!("missing column {name}") })?;
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| HarnessError::Parse { line: e.position().map_or(0, |p| p.line() as usize), message: e.to_string() })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let err = |m: String| HarnessError::Parse { line, message: m };
        let field = |k: usize| rec.get(idx[k]).ok_or_else(|| err(format!("missing {}", REQUIRED[k])));
        let int = |k: usize| field(k)?.parse::<u64>().map_err(|e| err(format!("{}: {e}", REQUIRED[k])));
        let num = |k: usize| {
            let v = field(k)?.parse::<f64>().map_err(|e| err(format!("{}: {e}", REQUIRED[k])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(err(format!("{} is not finite", REQUIRED[k])))
            }
        };
        let b = MotBox { frame: int(0)?, id: int(1)?, bbox: Rect::new(num(2)?, num(3)?, num(4)?, num(5)?) };
        if b.bbox.width < 0.0 || b.bbox.height < 0.0 {
            return Err(err("negative box size".into()));
        }
        if !seen.insert((b.frame, b.id)) {
            return Err(err(format!("duplicate id {} in frame {}", b.id, b.frame)));
        }
        out.push(b);
    }
    Ok(out)
}

pub fn load_mot_csv(path: &Path) -> Result<Vec<MotBox>, HarnessError> {
    let f = std::fs::File::open(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    read_mot_csv(f)
}
