//! Explainability scores and COCO-style mAP on hand-made inputs.
//!
//!     cargo run --example metrics

use protoneck::activations::NormKind;
use protoneck::bbox::BBox;
use protoneck::data::Target;
use protoneck::detr::AttentionMap;
use protoneck::losses::assign_prototypes;
use protoneck::metrics::{alignment_error, avg_active_prototypes, coco_map, exclusion_error, perplexity, ScoredBox};
use protoneck::neck::PrototypeMap;

fn main() -> protoneck::Result<()> {
    let (p, g) = (4, 2);
    let cells = g * g;
    let uniform = PrototypeMap::new(vec![1.0 / p as f64; p * cells], p, g, g, NormKind::Softmax)?;
    // cell c is owned by prototype c
    let mut onehot = vec![0.0; p * cells];
    for c in 0..cells {
        onehot[c * cells + c] = 1.0;
    }
    let winner = PrototypeMap::new(onehot, p, g, g, NormKind::Argmax)?;
    for (name, m) in [("uniform", &uniform), ("one-hot", &winner)] {
        println!(
            "{name:>8}: EE {:.4}  PX {:.4}  AAP {:.4}",
            exclusion_error(m),
            perplexity(m),
            avg_active_prototypes(m)
        );
    }

    // prototypes 0 and 2 belong to class 0; a detection of class 0 attends cell 0
    let assign = assign_prototypes(p, 2, &[])?;
    let att = AttentionMap {
        values: vec![1.0, 0.0, 0.0, 0.0],
        height: g,
        width: g,
    };
    println!("AE, class 0 at cell 0: {:?}", alignment_error(&[(0, &att)], &winner, &assign));
    println!("AE, class 1 at cell 0: {:?}", alignment_error(&[(1, &att)], &winner, &assign));

    let target = BBox::new(0.5, 0.5, 0.4, 0.4);
    let targets = vec![vec![Target { class: 0, bbox: target }]];
    for (label, bbox) in [("exact", target), ("shifted", BBox::new(0.56, 0.5, 0.4, 0.4))] {
        let preds = vec![vec![ScoredBox { class: 0, score: 0.9, bbox }]];
        let r = coco_map(&preds, &targets, 1)?;
        println!("{label:>8} box: mAP@0.50 {:.4}  mAP@[.50:.95] {:.4}", r.map_50(), r.map);
    }
    Ok(())
}
