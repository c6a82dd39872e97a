//! Explainability scores over prototype and attention maps, and COCO-style
//! mean average precision.

use std::io::Write;

use crate::bbox::{iou, BBox};
use crate::data::Target;
use crate::detr::AttentionMap;
use crate::error::{Error, Result};
use crate::losses::PrototypeAssignment;
use crate::neck::PrototypeMap;

/// `(1/HW) Σ_{ij} (1 − max_p m_p(p, i, j))`.
pub fn exclusion_error(m: &PrototypeMap) -> f64 {
    let hw = m.cells();
    let mut acc = 0.0;
    for cell in 0..hw {
        let mut mx: f64 = 0.0;
        for p in 0..m.num_prototypes {
            mx = mx.max(m.values()[p * hw + cell]);
        }
        acc += 1.0 - mx;
    }
    acc / hw as f64
}

/// Attention-weighted share of prototype activation outside the owner set of
/// each detection's target class; `None` when there are no detections.
///
/// `matched` pairs a target class with the detection's attention map.
pub fn alignment_error(matched: &[(usize, &AttentionMap)], m: &PrototypeMap, assign: &PrototypeAssignment) -> Option<f64> {
    if matched.is_empty() {
        return None;
    }
    let hw = m.cells();
    let own = assign.ownership();
    let mut total = 0.0;
    for (class, att) in matched {
        let mut aligned = vec![0.0; hw];
        for (p, &o) in own[*class].iter().enumerate() {
            if o > 0.0 {
                for (a, v) in aligned.iter_mut().zip(m.channel(p)) {
                    *a += v;
                }
            }
        }
        total += att.values.iter().zip(&aligned).map(|(w, a)| w * (1.0 - a)).sum::<f64>();
    }
    Some(total / matched.len() as f64)
}

/// Exponentiated entropy of the spatially averaged prototype distribution.
pub fn perplexity(m: &PrototypeMap) -> f64 {
    let hw = m.cells() as f64;
    let h: f64 = m
        .totals()
        .into_iter()
        .map(|t| t / hw)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    h.exp()
}

/// Mean number of strictly positive prototype activations per cell.
pub fn avg_active_prototypes(m: &PrototypeMap) -> f64 {
    let active = m.values().iter().filter(|&&v| v > 0.0).count();
    active as f64 / m.cells() as f64
}

/// A ranked prediction for mAP.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// IoU thresholds `0.50, 0.55, …, 0.95`.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapResult {
    /// Mean over thresholds and evaluated classes.
    pub map: f64,
    /// Per threshold, mean over evaluated classes.
    pub per_threshold: [f64; 10],
    /// `ap[class][threshold]`; `None` for classes without targets.
    pub per_class: Vec<Option<[f64; 10]>>,
}

impl MapResult {
    pub fn map_50(&self) -> f64 {
        self.per_threshold[0]
    }
}

/// 101-point interpolated AP from `(score, is_tp)` pairs.
///
/// Equal scores form one group: a precision/recall point is emitted only
/// after a whole group, so the order inside a tie never matters.
fn average_precision(mut hits: Vec<(f64, bool)>, num_targets: usize) -> f64 {
    hits.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < hits.len() {
        let s = hits[i].0;
        while i < hits.len() && hits[i].0 == s {
            if hits[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp as f64 / num_targets as f64, tp as f64 / (tp + fp) as f64));
    }
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        while k < points.len() && points[k].0 < r {
            k += 1;
        }
        if k < points.len() {
            sum += points[k].1;
        }
    }
    sum / 101.0
}

/// COCO-style mAP over IoU thresholds 0.50:0.05:0.95, single area range,
/// unlimited detections. Within an image, predictions are matched greedily
/// in descending score (input order breaks ties) to the unmatched target of
/// highest IoU. Classes without targets are skipped.
pub fn coco_map(preds: &[Vec<ScoredBox>], targets: &[Vec<Target>], classes: usize) -> Result<MapResult> {
    if preds.len() != targets.len() {
        return Err(Error::contract(format!("{} prediction lists for {} images", preds.len(), targets.len())));
    }
    let thr = iou_thresholds();
    let mut per_class = vec![None; classes];
    for (c, slot) in per_class.iter_mut().enumerate() {
        let num_targets: usize = targets.iter().map(|ts| ts.iter().filter(|t| t.class == c).count()).sum();
        if num_targets == 0 {
            continue;
        }
        let mut hits: Vec<Vec<(f64, bool)>> = vec![Vec::new(); thr.len()];
        for (ps, ts) in preds.iter().zip(targets) {
            let gts: Vec<_> = ts.iter().filter(|t| t.class == c).map(|t| t.bbox.corners()).collect();
            let mut order: Vec<&ScoredBox> = ps.iter().filter(|p| p.class == c).collect();
            order.sort_by(|a, b| b.score.total_cmp(&a.score));
            for (ti, &t) in thr.iter().enumerate() {
                let mut taken = vec![false; gts.len()];
                for p in &order {
                    let pc = p.bbox.corners();
                    let mut best: Option<(usize, f64)> = None;
                    for (g, gc) in gts.iter().enumerate() {
                        if taken[g] {
                            continue;
                        }
                        let v = iou(&pc, gc);
                        if v >= t && best.map_or(true, |(_, b)| v > b) {
                            best = Some((g, v));
                        }
                    }
                    if let Some((g, _)) = best {
                        taken[g] = true;
                    }
                    hits[ti].push((p.score, best.is_some()));
                }
            }
        }
        let mut ap = [0.0; 10];
        for (ti, h) in hits.into_iter().enumerate() {
            ap[ti] = average_precision(h, num_targets);
        }
        *slot = Some(ap);
    }
    let evaluated: Vec<[f64; 10]> = per_class.iter().flatten().copied().collect();
    if evaluated.is_empty() {
        return Err(Error::Data("no ground-truth objects to evaluate against".into()));
    }
    let mut per_threshold = [0.0; 10];
    for (ti, v) in per_threshold.iter_mut().enumerate() {
        *v = evaluated.iter().map(|a| a[ti]).sum::<f64>() / evaluated.len() as f64;
    }
    let map = per_threshold.iter().sum::<f64>() / 10.0;
    Ok(MapResult {
        map,
        per_threshold,
        per_class,
    })
}

/// One evaluation row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub ee: f64,
    /// Absent when no image had a matched detection, or without a neck.
    pub ae: Option<f64>,
    pub px: f64,
    pub aap: f64,
    pub map_50_95: f64,
    pub map_50: f64,
    pub mode: String,
    pub prototypes: usize,
    pub config_hash: String,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.12e}"))
}

pub const METRICS_HEADER: &str = "ee,ae,px,aap,map_50_95,map_50,mode,prototypes,config_hash";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{:.12e},{},{:.12e},{:.12e},{:.12e},{:.12e},{},{},{}",
            self.ee,
            opt(self.ae),
            self.px,
            self.aap,
            self.map_50_95,
            self.map_50,
            self.mode,
            self.prototypes,
            self.config_hash
        )
    }
}

pub fn write_metrics_csv(mut out: impl Write, rows: &[MetricsReport]) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Mean and sample standard deviation (`n − 1`; 0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-score mean and std over several runs.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub runs: usize,
    pub ee: (f64, f64),
    pub ae: (f64, f64),
    pub px: (f64, f64),
    pub aap: (f64, f64),
    pub map_50_95: (f64, f64),
    pub map_50: (f64, f64),
}

pub fn aggregate(reports: &[MetricsReport]) -> Aggregate {
    let col = |f: &dyn Fn(&MetricsReport) -> Option<f64>| mean_std(&reports.iter().filter_map(f).collect::<Vec<_>>());
    Aggregate {
        runs: reports.len(),
        ee: col(&|r| Some(r.ee)),
        ae: col(&|r| r.ae),
        px: col(&|r| Some(r.px)),
        aap: col(&|r| Some(r.aap)),
        map_50_95: col(&|r| Some(r.map_50_95)),
        map_50: col(&|r| Some(r.map_50)),
    }
}

pub fn write_aggregate_csv(mut out: impl Write, agg: &Aggregate, config_hash: &str) -> Result<()> {
    writeln!(out, "score,mean,std,runs,config_hash")?;
    for (name, (m, s)) in [
        ("ee", agg.ee),
        ("ae", agg.ae),
        ("px", agg.px),
        ("aap", agg.aap),
        ("map_50_95", agg.map_50_95),
        ("map_50", agg.map_50),
    ] {
        writeln!(out, "{name},{m:.12e},{s:.12e},{},{config_hash}", agg.runs)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::{argmax_onehot, sparsemax, NormKind};
    use crate::losses::assign_prototypes;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, p: usize, h: usize, w: usize, kind: NormKind) -> PrototypeMap {
        let mut vals = vec![0.0; p * h * w];
        for cell in 0..h * w {
            let z: Vec<f64> = (0..p).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let d = match kind {
                NormKind::Softmax => {
                    let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.iter().map(|v| v / s).collect()
                }
                NormKind::Sparsemax => sparsemax(&z),
                NormKind::Argmax => argmax_onehot(&z),
            };
            for k in 0..p {
                vals[k * h * w + cell] = d[k];
            }
        }
        PrototypeMap::new(vals, p, h, w, kind).unwrap()
    }

    fn random_attention(rng: &mut ChaCha8Rng, h: usize, w: usize) -> AttentionMap {
        let v: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: f64 = v.iter().sum();
        AttentionMap {
            values: v.into_iter().map(|x| x / s).collect(),
            height: h,
            width: w,
        }
    }

    #[test]
    fn scores_match_loop_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = assign_prototypes(6, 3, &[]).unwrap();
        for kind in [NormKind::Softmax, NormKind::Sparsemax, NormKind::Argmax] {
            for _ in 0..20 {
                let (h, w) = (3, 4);
                let m = random_map(&mut rng, 6, h, w, kind);
                let mut ee = 0.0;
                let mut aap = 0.0;
                let mut mean = vec![0.0; 6];
                for i in 0..h {
                    for j in 0..w {
                        let mut mx: f64 = 0.0;
                        for p in 0..6 {
                            mx = mx.max(m.get(p, i, j));
                            if m.get(p, i, j) > 0.0 {
                                aap += 1.0;
                            }
                            mean[p] += m.get(p, i, j) / (h * w) as f64;
                        }
                        ee += 1.0 - mx;
                    }
                }
                let hw = (h * w) as f64;
                assert!((exclusion_error(&m) - ee / hw).abs() <= 1e-12);
                assert!((avg_active_prototypes(&m) - aap / hw).abs() <= 1e-12);
                let mut ent = 0.0;
                for p in mean {
                    if p > 0.0 {
                        ent -= p * p.ln();
                    }
                }
                assert!((perplexity(&m) - f64::exp(ent)).abs() <= 1e-12);

                let atts: Vec<AttentionMap> = (0..3).map(|_| random_attention(&mut rng, h, w)).collect();
                let matched: Vec<(usize, &AttentionMap)> = atts.iter().enumerate().map(|(d, at)| (d % 3, at)).collect();
                let mut ae = 0.0;
                for (c, at) in &matched {
                    for i in 0..h {
                        for j in 0..w {
                            let mut owned = 0.0;
                            for p in 0..6 {
                                if a.class_of[p] == *c {
                                    owned += m.get(p, i, j);
                                }
                            }
                            ae += at.get(i, j) * (1.0 - owned);
                        }
                    }
                }
                ae /= matched.len() as f64;
                assert!((alignment_error(&matched, &m, &a).unwrap() - ae).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn argmax_and_softmax_exact_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let am = random_map(&mut rng, 5, 4, 4, NormKind::Argmax);
        assert_eq!(exclusion_error(&am), 0.0);
        assert_eq!(avg_active_prototypes(&am), 1.0);
        let sm = random_map(&mut rng, 5, 4, 4, NormKind::Softmax);
        assert_eq!(avg_active_prototypes(&sm), 5.0);
    }

    #[test]
    fn uniform_and_single_maps() {
        let p = 4;
        let u = PrototypeMap::new(vec![0.25; p * 9], p, 3, 3, NormKind::Softmax).unwrap();
        assert!((exclusion_error(&u) - 0.75).abs() < 1e-12);
        assert!((perplexity(&u) - 4.0).abs() < 1e-9);
        let mut v = vec![0.0; p * 9];
        v[..9].fill(1.0);
        let one = PrototypeMap::new(v, p, 3, 3, NormKind::Argmax).unwrap();
        assert!((perplexity(&one) - 1.0).abs() < 1e-9);
        // argmax map using 4 of 8 prototypes equally
        let mut v = vec![0.0; 8 * 4];
        for cell in 0..4 {
            v[(2 * cell) * 4 + cell] = 1.0;
        }
        let four = PrototypeMap::new(v, 8, 2, 2, NormKind::Argmax).unwrap();
        assert!((perplexity(&four) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn alignment_error_extremes() {
        let a = assign_prototypes(2, 2, &[]).unwrap();
        let m = PrototypeMap::new(vec![1., 1., 1., 1., 0., 0., 0., 0.], 2, 2, 2, NormKind::Argmax).unwrap();
        let att = AttentionMap {
            values: vec![0.25; 4],
            height: 2,
            width: 2,
        };
        assert_eq!(alignment_error(&[(0, &att)], &m, &a), Some(0.0));
        assert_eq!(alignment_error(&[(1, &att)], &m, &a), Some(1.0));
        assert_eq!(alignment_error(&[], &m, &a), None);
    }

    fn t(class: usize, cx: f64) -> Target {
        Target {
            class,
            bbox: BBox::new(cx, 0.5, 0.2, 0.2),
        }
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let targets = vec![vec![t(0, 0.3), t(1, 0.7)], vec![t(0, 0.5)]];
        let preds: Vec<Vec<ScoredBox>> = targets
            .iter()
            .map(|ts| ts.iter().map(|x| ScoredBox { class: x.class, score: 1.0, bbox: x.bbox }).collect())
            .collect();
        assert!((coco_map(&preds, &targets, 2).unwrap().map - 1.0).abs() < 1e-12);
        assert_eq!(coco_map(&[vec![], vec![]], &targets, 2).unwrap().map, 0.0);
    }

    #[test]
    fn one_hit_of_two_targets_at_iou_point_six() {
        // Shifted box with IoU exactly 0.6: 0.2×0.2 boxes offset by dx
        // have IoU (0.2 − dx)/(0.2 + dx) = 0.6 at dx = 0.05.
        let targets = vec![vec![t(0, 0.3), t(0, 0.7)]];
        let pred = ScoredBox {
            class: 0,
            score: 0.9,
            bbox: BBox::new(0.35, 0.5, 0.2, 0.2),
        };
        let r = coco_map(&[vec![pred]], &targets, 1).unwrap();
        let ap = r.per_class[0].unwrap();
        // recall 0.5 at precision 1 covers recall samples 0.00..=0.50
        let half = 51.0 / 101.0;
        assert!((ap[0] - half).abs() < 1e-12 && (ap[1] - half).abs() < 1e-12);
        // IoU is 0.6 up to rounding, so the 0.60 threshold may go either way;
        // everything above must be zero.
        assert!(ap[3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn class_without_targets_is_skipped() {
        let targets = vec![vec![t(0, 0.3)]];
        let preds = vec![vec![
            ScoredBox { class: 0, score: 0.8, bbox: t(0, 0.3).bbox },
            ScoredBox { class: 1, score: 0.9, bbox: t(0, 0.7).bbox },
        ]];
        let r = coco_map(&preds, &targets, 2).unwrap();
        assert!(r.per_class[1].is_none());
        assert!((r.map - 1.0).abs() < 1e-12);
        assert!(coco_map(&[vec![]], &[vec![]], 2).is_err());
    }

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    fn arb_image() -> impl Strategy<Value = (Vec<Target>, Vec<ScoredBox>)> {
        let tgt = (0..2usize, 0.2..0.8f64, 0.2..0.8f64).prop_map(|(c, x, y)| Target { class: c, bbox: BBox::new(x, y, 0.2, 0.2) });
        // coarse scores so ties are common
        let pred = (0..2usize, 0..4u8, 0.2..0.8f64, 0.2..0.8f64).prop_map(|(c, s, x, y)| ScoredBox {
            class: c,
            score: s as f64 / 4.0,
            bbox: BBox::new(x, y, 0.2, 0.2),
        });
        (prop::collection::vec(tgt, 0..3), prop::collection::vec(pred, 0..4))
    }

    proptest! {
        #[test]
        fn map_invariant_to_image_order(images in prop::collection::vec(arb_image(), 1..5), rot in 0usize..5) {
            let (targets, preds): (Vec<_>, Vec<_>) = images.into_iter().unzip();
            prop_assume!(targets.iter().any(|t| !t.is_empty()));
            let a = coco_map(&preds, &targets, 2).unwrap();
            let k = rot % targets.len();
            let mut t2 = targets.clone();
            let mut p2 = preds.clone();
            t2.rotate_left(k);
            p2.rotate_left(k);
            let b = coco_map(&p2, &t2, 2).unwrap();
            prop_assert!((a.map - b.map).abs() < 1e-12);
        }

        #[test]
        fn px_invariant_to_spatial_permutation(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_map(&mut rng, 4, 3, 3, NormKind::Softmax);
            let mut vals = m.values().to_vec();
            for p in 0..4 {
                vals[p * 9..(p + 1) * 9].reverse();
            }
            let r = PrototypeMap::new(vals, 4, 3, 3, NormKind::Softmax).unwrap();
            prop_assert!((perplexity(&m) - perplexity(&r)).abs() < 1e-12);
        }

        #[test]
        fn scores_stay_in_their_ranges(seed in 0u64..10_000, p in 2usize..10, h in 1usize..6, w in 1usize..6, kind_ix in 0usize..3, dets in 1usize..4) {
            let kind = [NormKind::Softmax, NormKind::Sparsemax, NormKind::Argmax][kind_ix];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_map(&mut rng, p, h, w, kind);
            let a = assign_prototypes(p, (p / 2).max(1), &[]).unwrap();
            let atts: Vec<AttentionMap> = (0..dets).map(|_| random_attention(&mut rng, h, w)).collect();
            let pairs: Vec<(usize, &AttentionMap)> = atts.iter().enumerate().map(|(i, att)| (i % a.classes, att)).collect();
            let (ee, ae) = (exclusion_error(&m), alignment_error(&pairs, &m, &a).unwrap());
            let (px, aap) = (perplexity(&m), avg_active_prototypes(&m));
            let top = p as f64 + 1e-9;
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&ee));
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&ae));
            prop_assert!((1.0 - 1e-9..=top).contains(&px), "px {px}");
            prop_assert!((1.0..=top).contains(&aap), "aap {aap}");
        }
    }
}
