//! Sample synthetic databases from the generative model and write them out.

use vblink::genmodel::{sample_dataset, write_ground_truth, GenConfig, Layout, NoiseModel};

fn main() -> vblink::Result<()> {
    let config = GenConfig {
        layout: Layout::Standard {
            entities: 100,
            records_per_db: vec![300, 300],
        },
        cardinalities: vec![10; 5],
        noise: NoiseModel::Peaked { distortion: 0.02 },
        seed: 7,
    };
    let (corpus, truth) = sample_dataset(&config)?;
    println!(
        "{} records from {} entities ({} appear at least once)",
        corpus.total_records(),
        truth.entity_count(),
        truth.occupied_entities()
    );
    println!("entity 1 latent values: {:?}", (0..5).map(|f| truth.latent_value(0, f)).collect::<Vec<_>>());
    println!("entity 1 field 1 noise: {:?}", truth.noise_distribution(0, 0));

    // Dirichlet noise draws β directly from the prior instead.
    let dirichlet = GenConfig {
        noise: NoiseModel::symmetric_dirichlet(0.1, &[10; 5]),
        ..config
    };
    let (_, truth) = sample_dataset(&dirichlet)?;
    let beta = truth.noise_distribution(0, 0);
    println!("Dirichlet(0.1) β for entity 1 field 1: max {:.3}", beta.iter().cloned().fold(0.0, f64::max));

    let out = std::env::temp_dir().join("vblink-synth");
    std::fs::create_dir_all(&out).expect("temp dir");
    let mut written = corpus.write_databases(&out)?;
    written.extend(write_ground_truth(&truth, corpus.schema(), &out)?);
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}
