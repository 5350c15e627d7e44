//! Instance-level segmentation scores: greedy max-IoU matching followed by
//! per-instance precision, recall and IoU.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub id: u32,
    /// Row-major `height × width` cells.
    pub cells: Vec<bool>,
}

impl Mask {
    pub fn area(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub height: usize,
    pub width: usize,
    pub masks: Vec<Mask>,
}

impl MaskSet {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            masks: Vec::new(),
        }
    }

    /// Adds a mask; rejects empty masks, wrong sizes and duplicate ids.
    pub fn push(&mut self, id: u32, cells: Vec<bool>) -> Result<()> {
        if cells.len() != self.height * self.width {
            return shape_err(format!(
                "mask {id} has {} cells, expected {}x{}",
                cells.len(),
                self.height,
                self.width
            ));
        }
        if !cells.iter().any(|&c| c) {
            return invalid(format!("mask {id} is empty"));
        }
        if self.masks.iter().any(|m| m.id == id) {
            return invalid(format!("duplicate mask id {id}"));
        }
        self.masks.push(Mask { id, cells });
        Ok(())
    }

    /// Builds one mask per nonzero label of a row-major label grid.
    pub fn from_labels(height: usize, width: usize, labels: &[u32]) -> Result<Self> {
        if labels.len() != height * width {
            return shape_err(format!("label grid has {} cells, expected {}", labels.len(), height * width));
        }
        let mut ids: Vec<u32> = labels.iter().copied().filter(|&l| l != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        let mut set = Self::new(height, width);
        for id in ids {
            set.push(id, labels.iter().map(|&l| l == id).collect())?;
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

fn check_dims(a: &MaskSet, b: &MaskSet) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return shape_err(format!(
            "mask sets are {}x{} and {}x{}",
            a.height, a.width, b.height, b.width
        ));
    }
    Ok(())
}

fn overlap(a: &Mask, b: &Mask) -> usize {
    a.cells.iter().zip(&b.cells).filter(|(x, y)| **x && **y).count()
}

pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.cells.len() != b.cells.len() {
        return shape_err(format!("masks of {} and {} cells", a.cells.len(), b.cells.len()));
    }
    let inter = overlap(a, b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return invalid("IoU of two empty masks");
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub gt: u32,
    pub pred: u32,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    /// In selection order.
    pub pairs: Vec<MatchPair>,
    pub unmatched_pred: Vec<u32>,
    pub unmatched_gt: Vec<u32>,
}

/// Greedy one-to-one matching by descending IoU over all pairs with IoU > 0.
/// Ties go to the lower gt id, then the lower pred id.
pub fn match_instances(gt: &MaskSet, pred: &MaskSet) -> Result<MatchResult> {
    check_dims(gt, pred)?;
    let mut cands = Vec::new();
    for g in &gt.masks {
        for p in &pred.masks {
            let v = iou(g, p)?;
            if v > 0.0 {
                cands.push(MatchPair {
                    gt: g.id,
                    pred: p.id,
                    iou: v,
                });
            }
        }
    }
    cands.sort_by(|a, b| b.iou.total_cmp(&a.iou).then(a.gt.cmp(&b.gt)).then(a.pred.cmp(&b.pred)));
    let mut out = MatchResult::default();
    for c in cands {
        if out.pairs.iter().any(|p| p.gt == c.gt || p.pred == c.pred) {
            continue;
        }
        out.pairs.push(c);
    }
    out.unmatched_gt = gt
        .masks
        .iter()
        .map(|m| m.id)
        .filter(|id| !out.pairs.iter().any(|p| p.gt == *id))
        .collect();
    out.unmatched_pred = pred
        .masks
        .iter()
        .map(|m| m.id)
        .filter(|id| !out.pairs.iter().any(|p| p.pred == *id))
        .collect();
    out.unmatched_gt.sort_unstable();
    out.unmatched_pred.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AiouDenominator {
    /// Total ground-truth mask area; a perfect prediction scores 1.
    #[default]
    MaskTotal,
    /// Image area.
    ImageArea,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub gt: u32,
    pub pred: Option<u32>,
    pub p: f64,
    pub r: f64,
    pub iou: f64,
    pub area: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub m_p: f64,
    pub m_r: f64,
    pub m_iou: f64,
    pub a_iou: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub instances: Vec<InstanceScore>,
}

pub fn compute_report(gt: &MaskSet, pred: &MaskSet) -> Result<MetricsReport> {
    compute_report_with(gt, pred, AiouDenominator::MaskTotal)
}

pub fn compute_report_with(gt: &MaskSet, pred: &MaskSet, denom: AiouDenominator) -> Result<MetricsReport> {
    compute_pooled(&[(gt, pred)], denom)
}

/// Scores several frames at once, pooling every ground-truth instance.
pub fn compute_pooled(frames: &[(&MaskSet, &MaskSet)], denom: AiouDenominator) -> Result<MetricsReport> {
    let mut instances = Vec::new();
    let (mut fp, mut image_area) = (0, 0);
    for (gt, pred) in frames {
        let m = match_instances(gt, pred)?;
        fp += m.unmatched_pred.len();
        image_area += gt.height * gt.width;
        let mut order: Vec<&Mask> = gt.masks.iter().collect();
        order.sort_by_key(|m| m.id);
        for g in order {
            let area = g.area();
            let score = match m.pairs.iter().find(|p| p.gt == g.id) {
                Some(pair) => {
                    let pm = pred.masks.iter().find(|p| p.id == pair.pred).expect("matched id exists");
                    let inter = overlap(g, pm) as f64;
                    InstanceScore {
                        gt: g.id,
                        pred: Some(pair.pred),
                        p: inter / pm.area() as f64,
                        r: inter / area as f64,
                        iou: pair.iou,
                        area,
                    }
                }
                None => InstanceScore {
                    gt: g.id,
                    pred: None,
                    p: 0.0,
                    r: 0.0,
                    iou: 0.0,
                    area,
                },
            };
            instances.push(score);
        }
    }
    if instances.is_empty() {
        return invalid("ground truth has no instances");
    }
    let n = instances.len() as f64;
    let mean = |f: fn(&InstanceScore) -> f64| instances.iter().map(f).sum::<f64>() / n;
    let total_area: usize = match denom {
        AiouDenominator::MaskTotal => instances.iter().map(|i| i.area).sum(),
        AiouDenominator::ImageArea => image_area,
    };
    let a_iou = instances.iter().map(|i| i.area as f64 * i.iou).sum::<f64>() / total_area as f64;
    let tp = instances.iter().filter(|i| i.pred.is_some()).count();
    Ok(MetricsReport {
        m_p: mean(|i| i.p),
        m_r: mean(|i| i.r),
        m_iou: mean(|i| i.iou),
        a_iou,
        tp,
        fp,
        fn_: instances.len() - tp,
        instances,
    })
}

impl MetricsReport {
    /// JSON with every real printed to six decimals.
    pub fn to_json(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{{\"mP\":{:.6},\"mR\":{:.6},\"mIoU\":{:.6},\"aIoU\":{:.6},\"tp\":{},\"fp\":{},\"fn\":{},\"instances\":[",
            self.m_p, self.m_r, self.m_iou, self.a_iou, self.tp, self.fp, self.fn_
        );
        for (i, inst) in self.instances.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let pred = inst.pred.map_or("null".to_string(), |p| p.to_string());
            let _ = write!(
                s,
                "{{\"gt\":{},\"pred\":{},\"p\":{:.6},\"r\":{:.6},\"iou\":{:.6},\"area\":{}}}",
                inst.gt, pred, inst.p, inst.r, inst.iou, inst.area
            );
        }
        s.push_str("]}");
        s
    }
}

/// `id: start,len start,len …` per line over row-major cells, preceded by a
/// `# HxW` header.
pub fn format_rle(set: &MaskSet) -> String {
    let mut out = format!("# {}x{}\n", set.height, set.width);
    for m in &set.masks {
        let _ = write!(out, "{}:", m.id);
        let mut i = 0;
        while i < m.cells.len() {
            if m.cells[i] {
                let start = i;
                while i < m.cells.len() && m.cells[i] {
                    i += 1;
                }
                let _ = write!(out, " {},{}", start, i - start);
            } else {
                i += 1;
            }
        }
        out.push('\n');
    }
    out
}

pub fn parse_rle(text: &str, origin: &Path) -> Result<MaskSet> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hn, header) = lines.next().ok_or_else(|| err(1, "missing `# HxW` header".into()))?;
    let dims = header
        .trim()
        .strip_prefix('#')
        .and_then(|d| d.trim().split_once('x'))
        .and_then(|(h, w)| Some((h.trim().parse::<usize>().ok()?, w.trim().parse::<usize>().ok()?)))
        .ok_or_else(|| err(hn + 1, format!("bad header `{header}`")))?;
    let (h, w) = dims;
    let mut set = MaskSet::new(h, w);
    for (n, line) in lines {
        let (id, runs) = line
            .split_once(':')
            .ok_or_else(|| err(n + 1, "expected `id: start,len ...`".into()))?;
        let id: u32 = id.trim().parse().map_err(|_| err(n + 1, format!("bad id `{id}`")))?;
        let mut cells = vec![false; h * w];
        for run in runs.split_whitespace() {
            let (s, l) = run
                .split_once(',')
                .and_then(|(s, l)| Some((s.parse::<usize>().ok()?, l.parse::<usize>().ok()?)))
                .ok_or_else(|| err(n + 1, format!("bad run `{run}`")))?;
            if l == 0 || s + l > h * w {
                return Err(err(n + 1, format!("run {s},{l} outside {h}x{w}")));
            }
            cells[s..s + l].iter_mut().for_each(|c| *c = true);
        }
        set.push(id, cells).map_err(|e| err(n + 1, e.to_string()))?;
    }
    Ok(set)
}

pub fn read_rle(path: impl AsRef<Path>) -> Result<MaskSet> {
    let path = path.as_ref();
    parse_rle(&std::fs::read_to_string(path)?, path)
}

pub fn write_rle(path: impl AsRef<Path>, set: &MaskSet) -> Result<()> {
    std::fs::write(path, format_rle(set))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn block(h: usize, w: usize, y0: usize, x0: usize, bh: usize, bw: usize) -> Vec<bool> {
        let mut c = vec![false; h * w];
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                c[y * w + x] = true;
            }
        }
        c
    }

    fn set(h: usize, w: usize, masks: Vec<(u32, Vec<bool>)>) -> MaskSet {
        let mut s = MaskSet::new(h, w);
        for (id, c) in masks {
            s.push(id, c).unwrap();
        }
        s
    }

    #[test]
    fn iou_examples() {
        let a = Mask { id: 1, cells: block(4, 4, 0, 0, 2, 2) };
        let b = Mask { id: 2, cells: block(4, 4, 0, 1, 2, 2) };
        let far = Mask { id: 3, cells: block(4, 4, 2, 2, 2, 2) };
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &far).unwrap(), 0.0);
        assert_eq!(iou(&a, &b).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn shifted_block_report() {
        let gt = set(4, 4, vec![(1, block(4, 4, 0, 0, 2, 2))]);
        let pred = set(4, 4, vec![(1, block(4, 4, 0, 1, 2, 2))]);
        let r = compute_report(&gt, &pred).unwrap();
        assert_eq!(r.m_iou, 1.0 / 3.0);
        assert_eq!(r.m_p, 0.5);
        assert_eq!(r.m_r, 0.5);
    }

    #[test]
    fn contested_pred_goes_to_best_gt() {
        // pred covers 6 of gt1's 10 cells and 3 of gt2's cells.
        let gt1 = block(10, 10, 0, 0, 1, 10);
        let gt2 = block(10, 10, 1, 0, 1, 10);
        let mut pred = block(10, 10, 0, 0, 1, 6);
        pred[10..13].iter_mut().for_each(|c| *c = true);
        let gt = set(10, 10, vec![(1, gt1), (2, gt2)]);
        let p = set(10, 10, vec![(7, pred)]);
        let m = match_instances(&gt, &p).unwrap();
        assert_eq!(m.pairs.len(), 1);
        assert_eq!((m.pairs[0].gt, m.pairs[0].pred), (1, 7));
        assert_eq!(m.unmatched_gt, vec![2]);
        assert!(m.unmatched_pred.is_empty());
    }

    #[test]
    fn empty_prediction() {
        let gt = set(4, 4, vec![(1, block(4, 4, 0, 0, 2, 2)), (2, block(4, 4, 2, 2, 1, 1))]);
        let r = compute_report(&gt, &MaskSet::new(4, 4)).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (0, 0, 2));
        assert_eq!(r.m_r, 0.0);
        assert!(compute_report(&MaskSet::new(4, 4), &gt).is_err());
        assert!(compute_report(&gt, &MaskSet::new(4, 5)).is_err());
    }

    #[test]
    fn area_weighted_example() {
        // gt1: area 60, pred covers 30 of it exactly -> IoU 0.5; gt2: area 20, exact.
        let gt1 = block(10, 10, 0, 0, 6, 10);
        let gt2 = block(10, 10, 6, 0, 2, 10);
        let pred1 = block(10, 10, 0, 0, 3, 10);
        let gt = set(10, 10, vec![(1, gt1), (2, gt2.clone())]);
        let pred = set(10, 10, vec![(1, pred1), (2, gt2)]);
        let r = compute_report(&gt, &pred).unwrap();
        assert_eq!(r.m_iou, 0.75);
        assert_eq!(r.a_iou, 0.625);
        let img = compute_report_with(&gt, &pred, AiouDenominator::ImageArea).unwrap();
        assert_eq!(img.a_iou, 0.5);
    }

    #[test]
    fn json_uses_fixed_decimals() {
        let gt = set(4, 4, vec![(1, block(4, 4, 0, 0, 2, 2))]);
        let pred = set(4, 4, vec![(3, block(4, 4, 0, 1, 2, 2))]);
        let j = compute_report(&gt, &pred).unwrap().to_json();
        assert_eq!(
            j,
            "{\"mP\":0.500000,\"mR\":0.500000,\"mIoU\":0.333333,\"aIoU\":0.333333,\"tp\":1,\"fp\":0,\"fn\":0,\
             \"instances\":[{\"gt\":1,\"pred\":3,\"p\":0.500000,\"r\":0.500000,\"iou\":0.333333,\"area\":4}]}"
        );
        let v: serde_json::Value = serde_json::from_str(&j).unwrap();
        assert_eq!(v["instances"][0]["area"], 4);
    }

    #[test]
    fn rle_round_trip_and_errors() {
        let s = set(3, 4, vec![(2, block(3, 4, 0, 1, 2, 2)), (5, block(3, 4, 2, 0, 1, 4))]);
        let text = format_rle(&s);
        assert_eq!(text, "# 3x4\n2: 1,2 5,2\n5: 8,4\n");
        assert_eq!(parse_rle(&text, Path::new("m")).unwrap(), s);
        for bad in ["2: 1,2\n", "# 3x4\n2: 11,2\n", "# 3x4\n2 1,2\n", "# 3x4\n2:\n", "# 3x4\n1: 0,1\n1: 1,1\n"] {
            assert!(parse_rle(bad, Path::new("m")).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn masks_reject_bad_input() {
        let mut s = MaskSet::new(2, 2);
        assert!(s.push(1, vec![false; 4]).is_err());
        assert!(s.push(1, vec![true; 3]).is_err());
        let labels = MaskSet::from_labels(2, 2, &[0, 3, 3, 1]).unwrap();
        assert_eq!(labels.masks.iter().map(|m| m.id).collect::<Vec<_>>(), vec![1, 3]);
    }

    fn gmask_of(s: &MaskSet, id: u32) -> &Mask {
        s.masks.iter().find(|m| m.id == id).unwrap()
    }

    fn mask_set(h: usize, w: usize, max: usize) -> impl Strategy<Value = MaskSet> {
        proptest::collection::vec(proptest::collection::vec(any::<bool>(), h * w), 0..=max).prop_map(move |ms| {
            let mut s = MaskSet::new(h, w);
            for (i, c) in ms.into_iter().enumerate() {
                let _ = s.push(i as u32 + 1, c);
            }
            s
        })
    }

    fn pair_strategy() -> impl Strategy<Value = (MaskSet, MaskSet)> {
        (1usize..=5, 1usize..=5).prop_flat_map(|(h, w)| (mask_set(h, w, 4), mask_set(h, w, 4)))
    }

    proptest! {
        #[test]
        fn self_report_is_perfect(gt in (1usize..=6, 1usize..=6).prop_flat_map(|(h, w)| mask_set(h, w, 5))) {
            prop_assume!(!gt.is_empty());
            let r = compute_report(&gt, &gt).unwrap();
            prop_assert_eq!((r.m_p, r.m_r, r.m_iou, r.a_iou), (1.0, 1.0, 1.0, 1.0));
        }

        #[test]
        fn shuffling_masks_changes_nothing((gt, pred) in pair_strategy(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            prop_assume!(!gt.is_empty());
            let base = compute_report(&gt, &pred).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (mut g2, mut p2) = (gt.clone(), pred.clone());
            g2.masks.shuffle(&mut rng);
            p2.masks.shuffle(&mut rng);
            let r = compute_report(&g2, &p2).unwrap();
            prop_assert_eq!((r.m_p, r.m_r, r.m_iou, r.a_iou, r.tp, r.fp), (base.m_p, base.m_r, base.m_iou, base.a_iou, base.tp, base.fp));
        }

        #[test]
        fn aggregates_stay_in_unit_interval((gt, pred) in pair_strategy()) {
            prop_assume!(!gt.is_empty());
            let r = compute_report(&gt, &pred).unwrap();
            for v in [r.m_p, r.m_r, r.m_iou, r.a_iou] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert_eq!(r.tp + r.fn_, gt.len());
            prop_assert_eq!(r.tp + r.fp, pred.len());
        }

        #[test]
        fn eroding_a_matched_pred_never_helps((gt, pred) in pair_strategy(), pick in any::<usize>()) {
            prop_assume!(!gt.is_empty());
            let base = compute_report(&gt, &pred).unwrap();
            let Some(inst) = base.instances.iter().find(|i| i.pred.is_some()) else { return Ok(()); };
            let pid = inst.pred.unwrap();
            let gmask = &gt.masks.iter().find(|m| m.id == inst.gt).unwrap().cells;
            let mut eroded = pred.clone();
            let pm = eroded.masks.iter_mut().find(|m| m.id == pid).unwrap();
            // A pred touching several gts can rematch to a better one once eroded.
            let touches_other = gt.masks.iter().any(|g| g.id != inst.gt && overlap(g, pm) > 0);
            prop_assume!(!touches_other);
            let shared: Vec<usize> = (0..pm.cells.len()).filter(|&i| pm.cells[i] && gmask[i]).collect();
            pm.cells[shared[pick % shared.len()]] = false;
            prop_assume!(pm.area() > 0);
            let r = compute_report(&gt, &eroded).unwrap();
            prop_assert!(r.m_iou <= base.m_iou + 1e-15);
            let before = inst.iou;
            let after = iou(gmask_of(&gt, inst.gt), eroded.masks.iter().find(|m| m.id == pid).unwrap()).unwrap();
            prop_assert!(after < before);
        }
    }
}
