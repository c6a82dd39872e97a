//! Bipartite matching, detection losses, Gaussian saliency, prototype-class
//! assignment and the prototype alignment loss.

use std::io::Write;

use crate::bbox::{giou, BBox};
use crate::data::Target;
use crate::detr::Detection;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Default offset inside the alignment logarithm.
pub const ALIGN_EPS: f64 = 1e-3;

/// One-to-one assignment of queries to targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    /// `(query, target)` sorted by query index.
    pub pairs: Vec<(usize, usize)>,
}

impl MatchResult {
    pub fn target_of(&self, query: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == query).map(|p| p.1)
    }

    /// Sum of matched costs, accumulated in target order.
    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        let mut by_target = self.pairs.clone();
        by_target.sort_by_key(|p| p.1);
        by_target.iter().map(|&(q, t)| cost[q][t]).sum()
    }
}

/// Minimum-cost assignment of every target (column) to a distinct query
/// (row) of a `[Q][T]` cost matrix, via Kuhn–Munkres with potentials.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<MatchResult> {
    let q = cost.len();
    let t = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != t) {
        return Err(Error::contract("ragged cost matrix"));
    }
    if t > q {
        return Err(Error::contract(format!("{t} targets exceed {q} queries")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::contract("matching costs must be finite"));
    }
    if t == 0 {
        return Ok(MatchResult { pairs: Vec::new() });
    }
    // Rows of the working problem are targets (n = t ≤ m = q); 1-based with a
    // sentinel column 0.
    let (n, m) = (t, q);
    let a = |i: usize, j: usize| cost[j - 1][i - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (j - 1, p[j] - 1)).collect();
    pairs.sort_unstable();
    Ok(MatchResult { pairs })
}

/// Weights of the three matching cost terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchCoefficients {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for MatchCoefficients {
    fn default() -> Self {
        MatchCoefficients {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// `class·(−p(target)) + l1·‖Δbox‖₁ + giou·(1 − gIoU)`.
pub fn detection_cost(det: &Detection, target: &Target, coef: &MatchCoefficients) -> Result<f64> {
    let prob = det.probabilities()[target.class];
    let g = giou(&det.bbox.corners(), &target.bbox.corners())?;
    Ok(coef.class * -prob + coef.l1 * det.bbox.l1(&target.bbox) + coef.giou * (1.0 - g))
}

/// `[Q][T]` cost matrix for one image.
pub fn cost_matrix(dets: &[Detection], targets: &[Target], coef: &MatchCoefficients) -> Result<Vec<Vec<f64>>> {
    dets.iter()
        .map(|d| targets.iter().map(|t| detection_cost(d, t, coef)).collect())
        .collect()
}

/// Gaussian focus on a box, at feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub values: Vec<f64>,
    pub valid_mask: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

impl SaliencyMap {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    /// Mass falling on cells whose centers lie inside `bbox`.
    pub fn mass_inside(&self, bbox: &BBox) -> f64 {
        let mut s = 0.0;
        for i in 0..self.height {
            for j in 0..self.width {
                let (x, y) = ((j as f64 + 0.5) / self.width as f64, (i as f64 + 0.5) / self.height as f64);
                if bbox.contains(x, y) {
                    s += self.get(i, j);
                }
            }
        }
        s
    }
}

/// Axis-aligned Gaussian with mean `(cx, cy)` and deviations `w/6`, `h/6`,
/// evaluated at normalized cell centers, zeroed on invalid cells and
/// renormalized over the valid ones.
pub fn build_saliency(bbox: &BBox, grid: (usize, usize), valid_mask: &[bool]) -> Result<SaliencyMap> {
    let (h, w) = grid;
    if !(bbox.w > 0.0 && bbox.h > 0.0) {
        return Err(Error::contract(format!("saliency needs a box with positive size, got {bbox:?}")));
    }
    if valid_mask.len() != h * w {
        return Err(Error::Shape {
            op: "build_saliency",
            lhs: vec![h, w],
            rhs: vec![valid_mask.len()],
        });
    }
    let (sx, sy) = (bbox.w / 6.0, bbox.h / 6.0);
    let mut values = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            if valid_mask[i * w + j] {
                let dx = ((j as f64 + 0.5) / w as f64 - bbox.cx) / sx;
                let dy = ((i as f64 + 0.5) / h as f64 - bbox.cy) / sy;
                values[i * w + j] = (-0.5 * (dx * dx + dy * dy)).exp();
            }
        }
    }
    let total: f64 = values.iter().sum();
    if !valid_mask.iter().any(|&v| v) {
        return Err(Error::contract("saliency grid has no valid cells"));
    }
    if total > 0.0 {
        values.iter_mut().for_each(|v| *v /= total);
    } else {
        // Box far from every valid cell: the Gaussian underflows, so fall
        // back to the valid cell nearest the box center.
        let nearest = (0..h * w)
            .filter(|&k| valid_mask[k])
            .min_by(|&a, &b| {
                let d = |k: usize| {
                    let dx = ((k % w) as f64 + 0.5) / w as f64 - bbox.cx;
                    let dy = ((k / w) as f64 + 0.5) / h as f64 - bbox.cy;
                    (dx / sx).powi(2) + (dy / sy).powi(2)
                };
                d(a).total_cmp(&d(b))
            })
            .expect("at least one valid cell");
        values[nearest] = 1.0;
    }
    Ok(SaliencyMap {
        values,
        valid_mask: valid_mask.to_vec(),
        height: h,
        width: w,
    })
}

/// Which class owns each prototype.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrototypeAssignment {
    pub class_of: Vec<usize>,
    pub classes: usize,
}

impl PrototypeAssignment {
    /// Prototypes owned by `class`, ascending.
    pub fn owned(&self, class: usize) -> Vec<usize> {
        (0..self.class_of.len()).filter(|&p| self.class_of[p] == class).collect()
    }

    pub fn num_prototypes(&self) -> usize {
        self.class_of.len()
    }

    /// `[K, P]` 0/1 ownership matrix.
    pub fn ownership(&self) -> Vec<Vec<f64>> {
        (0..self.classes)
            .map(|c| self.class_of.iter().map(|&o| f64::from(o == c)).collect())
            .collect()
    }
}

/// Round-robin over `P − Σ extra` prototypes, then each override's extra
/// prototypes appended in the order given.
pub fn assign_prototypes(num_prototypes: usize, classes: usize, overrides: &[(usize, usize)]) -> Result<PrototypeAssignment> {
    if classes == 0 {
        return Err(Error::config("at least one class is required"));
    }
    if let Some(&(c, _)) = overrides.iter().find(|o| o.0 >= classes) {
        return Err(Error::config(format!("prototype override names class {c}, but there are {classes} classes")));
    }
    let extra: usize = overrides.iter().map(|o| o.1).sum();
    if num_prototypes < classes + extra {
        return Err(Error::config(format!(
            "{num_prototypes} prototypes cannot cover {classes} classes plus {extra} override prototypes"
        )));
    }
    let base = num_prototypes - extra;
    let mut class_of: Vec<usize> = (0..base).map(|p| p % classes).collect();
    for &(c, n) in overrides {
        class_of.extend(std::iter::repeat(c).take(n));
    }
    Ok(PrototypeAssignment { class_of, classes })
}

/// Result of [`alignment_loss`].
#[derive(Clone, Copy, Debug)]
pub struct AlignmentTerm {
    pub loss: Var,
    /// Set when there was nothing to align; `loss` is then a constant 0.
    pub no_detections: bool,
}

/// `(1/D) Σ_d −log(ε + m_s(d)ᵀ Σ_{p∈C(d)} m_p(p))` over matched targets.
///
/// `prototype_map` is location-major `[H·W, P]`; each matched entry is the
/// target class and its saliency map.
pub fn alignment_loss(
    tape: &mut Tape,
    prototype_map: Var,
    matched: &[(usize, &SaliencyMap)],
    assign: &PrototypeAssignment,
    eps: f64,
) -> Result<AlignmentTerm> {
    if !(eps > 0.0) {
        return Err(Error::contract(format!("alignment epsilon must be positive, got {eps}")));
    }
    if matched.is_empty() {
        return Ok(AlignmentTerm {
            loss: tape.constant(Tensor::scalar(0.0)),
            no_detections: true,
        });
    }
    let (hw, np) = (tape.shape(prototype_map)[0], tape.shape(prototype_map)[1]);
    if np != assign.num_prototypes() {
        return Err(Error::Shape {
            op: "alignment_loss",
            lhs: vec![hw, np],
            rhs: vec![assign.num_prototypes()],
        });
    }
    let d = matched.len();
    let mut sal = Vec::with_capacity(d * hw);
    let mut mask = Vec::with_capacity(d * np);
    for (class, s) in matched {
        if s.values.len() != hw {
            return Err(Error::Shape {
                op: "alignment_loss",
                lhs: vec![hw],
                rhs: vec![s.values.len()],
            });
        }
        sal.extend_from_slice(&s.values);
        mask.extend(assign.class_of.iter().map(|&o| f64::from(o == *class)));
    }
    let sal = tape.constant(Tensor::new([d, hw], sal)?);
    let mask = tape.constant(Tensor::new([d, np], mask)?);
    let per_proto = tape.matmul(sal, prototype_map)?;
    let owned = tape.mul(per_proto, mask)?;
    let aligned = tape.sum_axis(owned, 1)?;
    let shifted = tape.add_scalar(aligned, eps);
    let logs = tape.log(shifted);
    let mean = tape.mean(logs);
    Ok(AlignmentTerm {
        loss: tape.neg(mean),
        no_detections: false,
    })
}

/// Alignment weight over training progress `t ∈ [0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AlignSchedule {
    Constant(f64),
    Linear { start: f64, end: f64 },
}

impl AlignSchedule {
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            AlignSchedule::Constant(c) => c,
            AlignSchedule::Linear { start, end } => start + (end - start) * t.clamp(0.0, 1.0),
        }
    }
}

impl Default for AlignSchedule {
    fn default() -> Self {
        AlignSchedule::Linear { start: 1.2, end: 0.7 }
    }
}

/// Weights of the training loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossCoefficients {
    pub class: f64,
    /// Cross-entropy weight of the "no object" class.
    pub no_object: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        LossCoefficients {
            class: 1.0,
            no_object: 0.1,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// Unweighted term values plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub ce: f64,
    pub l1: f64,
    pub giou: f64,
    pub align: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn add(&mut self, o: &LossTerms) {
        self.ce += o.ce;
        self.l1 += o.l1;
        self.giou += o.giou;
        self.align += o.align;
        self.total += o.total;
    }

    pub fn scaled(&self, c: f64) -> LossTerms {
        LossTerms {
            ce: self.ce * c,
            l1: self.l1 * c,
            giou: self.giou * c,
            align: self.align * c,
            total: self.total * c,
        }
    }
}

/// Tape handles for the three detection terms of one image.
#[derive(Clone, Copy, Debug)]
pub struct DetectionLossVars {
    pub ce: Var,
    pub l1: Var,
    pub giou: Var,
}

/// Weighted cross-entropy over all queries (unmatched ones target "no
/// object"), plus mean L1 and mean `1 − gIoU` over matched pairs.
pub fn detection_losses(
    tape: &mut Tape,
    logits: Var,
    boxes: Var,
    targets: &[Target],
    m: &MatchResult,
    coef: &LossCoefficients,
) -> Result<DetectionLossVars> {
    let (q, k1) = (tape.shape(logits)[0], tape.shape(logits)[1]);
    let mut onehot = vec![0.0; q * k1];
    let mut weight_sum = 0.0;
    for qi in 0..q {
        let (cls, wt) = match m.target_of(qi) {
            Some(t) => (targets[t].class, 1.0),
            None => (k1 - 1, coef.no_object),
        };
        onehot[qi * k1 + cls] = wt;
        weight_sum += wt;
    }
    let logp = tape.log_softmax(logits, 1)?;
    let onehot = tape.constant(Tensor::new([q, k1], onehot)?);
    let picked = tape.mul(logp, onehot)?;
    let picked = tape.sum(picked);
    let ce = tape.scale(picked, -1.0 / weight_sum);

    if m.pairs.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(DetectionLossVars { ce, l1: zero, giou: zero });
    }
    let n = m.pairs.len() as f64;
    let rows: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
    let tgt: Vec<f64> = m.pairs.iter().flat_map(|p| targets[p.1].bbox.to_array()).collect();
    let pred = tape.gather_rows(boxes, &rows)?;
    let tgt = tape.constant(Tensor::new([rows.len(), 4], tgt)?);
    let diff = tape.sub(pred, tgt)?;
    let diff = tape.abs(diff);
    let l1 = tape.sum(diff);
    let l1 = tape.scale(l1, 1.0 / n);

    let giou_sum = giou_on_tape(tape, pred, tgt)?;
    let giou_loss = tape.scale(giou_sum, -1.0 / n);
    let giou_loss = tape.add_scalar(giou_loss, 1.0);
    Ok(DetectionLossVars { ce, l1, giou: giou_loss })
}

/// `Σ_rows gIoU(a_row, b_row)` for `[N, 4]` center-format boxes.
fn giou_on_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let corners = |tape: &mut Tape, x: Var| -> Result<[Var; 4]> {
        let c = tape.slice(x, 1, 0, 2)?;
        let s = tape.slice(x, 1, 2, 2)?;
        let half = tape.scale(s, 0.5);
        let lo = tape.sub(c, half)?;
        let hi = tape.add(c, half)?;
        Ok([
            tape.slice(lo, 1, 0, 1)?,
            tape.slice(lo, 1, 1, 1)?,
            tape.slice(hi, 1, 0, 1)?,
            tape.slice(hi, 1, 1, 1)?,
        ])
    };
    let area = |tape: &mut Tape, c: &[Var; 4]| -> Result<Var> {
        let w = tape.sub(c[2], c[0])?;
        let h = tape.sub(c[3], c[1])?;
        tape.mul(w, h)
    };
    let ca = corners(tape, a)?;
    let cb = corners(tape, b)?;
    let ix0 = tape.maximum(ca[0], cb[0])?;
    let iy0 = tape.maximum(ca[1], cb[1])?;
    let ix1 = tape.minimum(ca[2], cb[2])?;
    let iy1 = tape.minimum(ca[3], cb[3])?;
    let iw = tape.sub(ix1, ix0)?;
    let iw = tape.relu(iw);
    let ih = tape.sub(iy1, iy0)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;
    let aa = area(tape, &ca)?;
    let ab = area(tape, &cb)?;
    let sum = tape.add(aa, ab)?;
    let union = tape.sub(sum, inter)?;
    let hx0 = tape.minimum(ca[0], cb[0])?;
    let hy0 = tape.minimum(ca[1], cb[1])?;
    let hx1 = tape.maximum(ca[2], cb[2])?;
    let hy1 = tape.maximum(ca[3], cb[3])?;
    let hull = area(tape, &[hx0, hy0, hx1, hy1])?;
    let iou = tape.div(inter, union)?;
    let gap = tape.sub(hull, union)?;
    let gap = tape.div(gap, hull)?;
    let g = tape.sub(iou, gap)?;
    Ok(tape.sum(g))
}

/// Writes the per-epoch loss report.
pub fn write_loss_csv(mut out: impl Write, rows: &[(usize, LossTerms)], config_hash: &str) -> Result<()> {
    writeln!(out, "epoch,ce,l1,giou,align,total,config_hash")?;
    for (epoch, t) in rows {
        writeln!(
            out,
            "{epoch},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{config_hash}",
            t.ce, t.l1, t.giou, t.align, t.total
        )?;
    }
    Ok(())
}
