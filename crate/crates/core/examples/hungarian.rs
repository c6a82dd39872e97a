//! Optimal one-to-one assignment of queries to targets.
//!
//!     cargo run --example hungarian

use protoneck::losses::hungarian_match;

fn main() -> protoneck::Result<()> {
    // rows are queries, columns are targets
    let cost = vec![
        vec![4.0, 1.0, 3.0],
        vec![2.0, 0.0, 5.0],
        vec![3.0, 2.0, 2.0],
        vec![0.5, 6.0, 1.0],
    ];
    let m = hungarian_match(&cost)?;
    for &(q, t) in &m.pairs {
        println!("query {q} -> target {t} (cost {})", cost[q][t]);
    }
    println!("total cost {}", m.total_cost(&cost));
    let unmatched: Vec<usize> = (0..cost.len()).filter(|&q| m.target_of(q).is_none()).collect();
    println!("unmatched queries {unmatched:?}");
    Ok(())
}
