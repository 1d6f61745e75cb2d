//! Pairwise precision, recall and F1 of a clustering against the truth.

use vblink::pairwise_metrics;

fn main() -> vblink::Result<()> {
    let truth = [0, 0, 1];
    for (name, predicted) in [
        ("perfect", [5, 5, 2]),
        ("merged", [0, 0, 0]),
        ("split", [0, 1, 2]),
    ] {
        let s = pairwise_metrics(&predicted, &truth)?;
        println!(
            "{name:>8}: precision {:.3} recall {:.3} F1 {:.3} entities {} vs {}",
            s.pairwise_precision, s.pairwise_recall, s.pairwise_f1, s.estimated_entity_count, s.true_entity_count
        );
    }
    Ok(())
}
