//! The small-cluster regime: entity count grows with the data.

use vblink::eval::score_linkage;
use vblink::genmodel::{sample_dataset, GenConfig, Layout, NoiseModel};
use vblink::{fit, map_linkage, FitOptions, HyperParams};

fn main() -> vblink::Result<()> {
    for per_db in [50, 100, 200, 400] {
        let (corpus, truth) = sample_dataset(&GenConfig {
            layout: Layout::SmallCluster {
                records_per_db: vec![per_db, per_db],
                max_per_entity: 3,
            },
            cardinalities: vec![12; 6],
            noise: NoiseModel::Peaked { distortion: 0.02 },
            seed: 5,
        })?;
        let n = corpus.total_records();
        let hp = HyperParams::symmetric(n, 0.1, &corpus.cardinalities())?;
        let (state, report) = fit(&corpus, &hp, &FitOptions::default())?;
        let score = score_linkage(&map_linkage(&state), &truth)?;
        println!(
            "N={n:4} entities={:4} estimated={:4} F1={:.3} sweeps={}",
            truth.entity_count(),
            score.estimated_entity_count,
            score.pairwise_f1,
            report.sweeps_run
        );
    }
    Ok(())
}
