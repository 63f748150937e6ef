//! Brute-force reference implementations and random fixtures for the test
//! suites. Boxes are generated on an integer grid so areas can be counted
//! cell by cell and compared with the library bit for bit.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sos_core::{BBox, ScoredBox};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Integer box inside `[0, extent]^2`; zero width or height allowed when
/// `degenerate` is set.
pub fn grid_box(rng: &mut ChaCha8Rng, extent: i64, degenerate: bool) -> BBox {
    let lo = if degenerate { 0 } else { 1 };
    let w = rng.random_range(lo..=extent / 2);
    let h = rng.random_range(lo..=extent / 2);
    let x = rng.random_range(0..=extent - w);
    let y = rng.random_range(0..=extent - h);
    BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64).unwrap()
}

/// Scores from a small set so that ties are common.
pub fn tied_score(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(0..=20) as f64 / 20.0
}

fn cells(a1: f64, a2: f64, b1: f64, b2: f64) -> i64 {
    let (a1, a2, b1, b2) = (a1 as i64, a2 as i64, b1 as i64, b2 as i64);
    (a1..a2).filter(|t| (b1..b2).contains(t)).count() as i64
}

pub fn area_cells(b: &BBox) -> i64 {
    cells(b.x1, b.x2, b.x1, b.x2) * cells(b.y1, b.y2, b.y1, b.y2)
}

pub fn inter_cells(a: &BBox, b: &BBox) -> i64 {
    cells(a.x1, a.x2, b.x1, b.x2) * cells(a.y1, a.y2, b.y1, b.y2)
}

pub fn iou_oracle(a: &BBox, b: &BBox) -> f64 {
    let i = inter_cells(a, b);
    let u = area_cells(a) + area_cells(b) - i;
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

pub fn containment_oracle(u: &BBox, v: &BBox) -> f64 {
    let av = area_cells(v);
    if av == 0 {
        0.0
    } else {
        inter_cells(u, v) as f64 / av as f64
    }
}

/// Position of the best remaining candidate: highest score, then lowest index.
fn pick_best(remaining: &[usize], scores: &[f64]) -> usize {
    let mut best = 0;
    for pos in 1..remaining.len() {
        let (i, b) = (remaining[pos], remaining[best]);
        if scores[i] > scores[b] || (scores[i] == scores[b] && i < b) {
            best = pos;
        }
    }
    best
}

/// Greedy NMS by repeated selection and suppression of the remainder.
pub fn nms_oracle(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..boxes.len()).collect();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let best = remaining.remove(pick_best(&remaining, scores));
        kept.push(best);
        remaining.retain(|&j| iou_oracle(&boxes[best], &boxes[j]) <= thr);
    }
    kept
}

/// Indices sorted by descending score, lower index first on ties.
pub fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..scores.len()).collect();
    let mut out = Vec::new();
    while !remaining.is_empty() {
        out.push(remaining.remove(pick_best(&remaining, scores)));
    }
    out
}

/// Seed mining with `p = p_percent / 100`, the candidate count taken as an
/// exact integer ceiling.
pub fn mine_oracle(
    proposals: &[BBox],
    scores: &[Vec<f64>],
    labels: &BTreeSet<usize>,
    p_percent: usize,
    s_t: f64,
    nms_thr: f64,
) -> Vec<ScoredBox> {
    let n = proposals.len();
    let top = ((n * p_percent).div_ceil(100)).max(1);
    let mut out = Vec::new();
    for &c in labels {
        let s = &scores[c];
        let picked: Vec<usize> = ranked(s).into_iter().take(top).filter(|&r| s[r] >= s_t).collect();
        let boxes: Vec<BBox> = picked.iter().map(|&r| proposals[r]).collect();
        let sc: Vec<f64> = picked.iter().map(|&r| s[r]).collect();
        for k in nms_oracle(&boxes, &sc, nms_thr) {
            out.push(ScoredBox::new(boxes[k], sc[k], c));
        }
    }
    out
}

/// Pseudo-groundtruth filtering. Containment removal visits the per-class
/// candidates from the lowest priority (lowest score, later input first)
/// and drops a box covered beyond `t_con` by any other box still present.
pub fn pgf_oracle(dets: &[ScoredBox], labels: &BTreeSet<usize>, t_keep: f64, t_top: f64, t_con: f64) -> Vec<ScoredBox> {
    let mut out = Vec::new();
    for &c in labels {
        let idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class_id == c).collect();
        if idx.is_empty() {
            continue;
        }
        let scores: Vec<f64> = idx.iter().map(|&i| dets[i].score).collect();
        let order = ranked(&scores);
        let top = order[0];
        if scores[top] < t_top {
            continue;
        }
        let mut set: BTreeSet<usize> = (0..idx.len()).filter(|&k| scores[k] >= t_keep).collect();
        set.insert(top);
        for &v in order.iter().rev() {
            if !set.contains(&v) {
                continue;
            }
            let covered = set
                .iter()
                .any(|&u| u != v && containment_oracle(&dets[idx[u]].bbox, &dets[idx[v]].bbox) > t_con);
            if covered {
                set.remove(&v);
            }
        }
        out.extend(order.iter().filter(|k| set.contains(k)).map(|&k| dets[idx[k]]));
    }
    out
}

/// All-points interpolated AP from an explicit precision/recall table.
pub fn ap_oracle(is_tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut table = Vec::new();
    let mut tp = 0;
    for (k, &hit) in is_tp.iter().enumerate() {
        tp += hit as usize;
        table.push((tp, tp as f64 / (k + 1) as f64));
    }
    let mut area = 0.0;
    let mut prev_tp = 0;
    for k in 0..table.len() {
        if table[k].0 > prev_tp {
            prev_tp = table[k].0;
            let best = table[k..].iter().map(|r| r.1).fold(0.0, f64::max);
            area += best;
        }
    }
    area / n_gt as f64
}

/// Per-class AP at one threshold for detections and ground truth given per
/// image, with a single global greedy pass over score-sorted detections.
pub fn class_ap_oracle(dets: &[Vec<ScoredBox>], gts: &[Vec<ScoredBox>], class: usize, thr: f64) -> Option<f64> {
    let n_gt = gts.iter().flatten().filter(|g| g.class_id == class).count();
    if n_gt == 0 {
        return None;
    }
    // (score, image, index within image)
    let mut pool: Vec<(f64, usize, usize)> = Vec::new();
    for (im, ds) in dets.iter().enumerate() {
        for (k, d) in ds.iter().enumerate() {
            if d.class_id == class {
                pool.push((d.score, im, k));
            }
        }
    }
    pool.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::new();
    for (_, im, k) in pool {
        let d = &dets[im][k];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts[im].iter().enumerate() {
            if gt.class_id != class || taken[im][g] {
                continue;
            }
            let o = iou_oracle(&d.bbox, &gt.bbox);
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        match best {
            Some((g, o)) if o >= thr => {
                taken[im][g] = true;
                hits.push(true);
            }
            _ => hits.push(false),
        }
    }
    Some(ap_oracle(&hits, n_gt))
}

/// `C x N` double-softmax scores by explicit loops.
pub fn wsddn_oracle(xc: &[Vec<f64>], xd: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let c = xc.len();
    let n = xc[0].len();
    let mut out = vec![vec![0.0; n]; c];
    for i in 0..c {
        for r in 0..n {
            let col_max = (0..c).map(|k| xc[k][r]).fold(f64::NEG_INFINITY, f64::max);
            let denom_c: f64 = (0..c).map(|k| (xc[k][r] - col_max).exp()).sum();
            let row_max = (0..n).map(|q| xd[i][q]).fold(f64::NEG_INFINITY, f64::max);
            let denom_d: f64 = (0..n).map(|q| (xd[i][q] - row_max).exp()).sum();
            out[i][r] = (xc[i][r] - col_max).exp() / denom_c * ((xd[i][r] - row_max).exp() / denom_d);
        }
    }
    out
}

/// MIL loss of the double-softmax scores, straight from the formulas.
pub fn mil_objective(xc: &[Vec<f64>], xd: &[Vec<f64>], y: &[f64]) -> f64 {
    let s = wsddn_oracle(xc, xd);
    let eps = 1e-6;
    s.iter()
        .zip(y)
        .map(|(row, &yc)| {
            let phi: f64 = row.iter().sum::<f64>().clamp(eps, 1.0 - eps);
            -(yc * phi.ln() + (1.0 - yc) * (1.0 - phi).ln())
        })
        .sum()
}
