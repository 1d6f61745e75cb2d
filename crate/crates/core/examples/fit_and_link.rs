//! Fit the variational model to synthetic data and score the linkage.

use vblink::eval::score_linkage;
use vblink::genmodel::{sample_dataset, GenConfig, Layout, NoiseModel};
use vblink::{fit, map_linkage, FitOptions, HyperParams};

fn main() -> vblink::Result<()> {
    let (corpus, truth) = sample_dataset(&GenConfig {
        layout: Layout::Standard {
            entities: 200,
            records_per_db: vec![300, 300],
        },
        cardinalities: vec![10; 8],
        noise: NoiseModel::Peaked { distortion: 0.02 },
        seed: 2024,
    })?;
    let hp = HyperParams::symmetric(600, 0.1, &corpus.cardinalities())?;

    let mut best = None;
    for seed in 0..5 {
        let (state, report) = fit(&corpus, &hp, &FitOptions { seed, ..FitOptions::default() })?;
        println!(
            "seed {seed}: {} sweeps, converged {}, ELBO {:.3}",
            report.sweeps_run,
            report.converged,
            report.final_elbo()
        );
        if best.as_ref().map_or(true, |(_, e)| report.final_elbo() > *e) {
            best = Some((state, report.final_elbo()));
        }
    }
    let (state, _) = best.expect("five fits");
    let linkage = map_linkage(&state);
    let score = score_linkage(&linkage, &truth)?;
    println!("{score:#?}");

    let uncertain = linkage.max_prob.iter().filter(|&&p| p < 0.9).count();
    println!("{uncertain} records with max responsibility below 0.9");
    Ok(())
}
