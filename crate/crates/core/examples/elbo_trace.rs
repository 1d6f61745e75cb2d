//! Watch the ELBO sweep by sweep and check the λ gradient.

use vblink::engine::{elbo, elbo_grad_lambda, fit_from, init_state, update_lambda};
use vblink::genmodel::{sample_dataset, GenConfig, Layout, NoiseModel};
use vblink::{FitOptions, HyperParams};

fn main() -> vblink::Result<()> {
    let (corpus, _) = sample_dataset(&GenConfig {
        layout: Layout::Standard {
            entities: 30,
            records_per_db: vec![60, 40],
        },
        cardinalities: vec![6, 4, 5],
        noise: NoiseModel::Peaked { distortion: 0.1 },
        seed: 3,
    })?;
    let hp = HyperParams::symmetric(40, 0.5, &corpus.cardinalities())?;
    let mut state = init_state(&corpus, &hp, 1)?;

    // Finite differences against the analytic gradient at a perturbed λ.
    state.set_lambda(2, 1, 3, 1.7);
    let g = elbo_grad_lambda(&state, &corpus, &hp, 2, 1, 3)?;
    let h = 1e-5;
    let mut probe = state.clone();
    probe.set_lambda(2, 1, 3, 1.7 + h);
    let up = elbo(&probe, &corpus, &hp)?;
    probe.set_lambda(2, 1, 3, 1.7 - h);
    let down = elbo(&probe, &corpus, &hp)?;
    println!("gradient {g:.9}, central difference {:.9}", (up - down) / (2.0 * h));
    update_lambda(&mut state, &corpus, &hp)?;
    println!("after the λ update: {:.3e}", elbo_grad_lambda(&state, &corpus, &hp, 2, 1, 3)?);

    let mut previous = elbo(&state, &corpus, &hp)?;
    println!("sweep,elbo,increment");
    let report = fit_from(&mut state, &corpus, &hp, &FitOptions::default(), |event| {
        println!("{},{:.6},{:.3e}", event.sweep, event.elbo, event.elbo - previous);
        previous = event.elbo;
    })?;
    println!("converged: {} after {} sweeps", report.converged, report.sweeps_run);
    Ok(())
}
