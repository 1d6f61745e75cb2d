//! Save a partially fitted state, reload it and finish the fit.

use vblink::engine::{fit_from, init_state, read_checkpoint, write_checkpoint, write_lambda_csv};
use vblink::genmodel::{sample_dataset, GenConfig, Layout, NoiseModel};
use vblink::{FitOptions, HyperParams};

fn main() -> vblink::Result<()> {
    let (corpus, _) = sample_dataset(&GenConfig {
        layout: Layout::Standard {
            entities: 50,
            records_per_db: vec![80, 70],
        },
        cardinalities: vec![8; 4],
        noise: NoiseModel::Peaked { distortion: 0.05 },
        seed: 12,
    })?;
    let hp = HyperParams::symmetric(100, 0.1, &corpus.cardinalities())?;
    let mut state = init_state(&corpus, &hp, 0)?;
    let partial = FitOptions {
        max_sweeps: 2,
        ..FitOptions::default()
    };
    let report = fit_from(&mut state, &corpus, &hp, &partial, |_| {})?;
    println!("stopped after {} sweeps at ELBO {:.4}", report.sweeps_run, report.final_elbo());

    let dir = std::env::temp_dir().join("vblink-checkpoint");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let path = dir.join("state.ckpt");
    write_checkpoint(&path, corpus.records_per_db(), &hp, &state)?;
    println!("checkpoint: {} bytes", std::fs::metadata(&path).expect("metadata").len());

    let mut resumed = read_checkpoint(&path)?;
    assert_eq!(resumed.state, state);
    let report = fit_from(&mut resumed.state, &corpus, &resumed.hyper, &FitOptions::default(), |_| {})?;
    println!("resumed: converged {} at ELBO {:.4}", report.converged, report.final_elbo());
    write_lambda_csv(dir.join("lambda.csv"), corpus.schema(), &resumed.state)?;
    Ok(())
}
