//! Compare the variational bound with the exact evidence on tiny instances.

use vblink::engine::fit;
use vblink::eval::posterior_cocluster_estimate;
use vblink::oracle::{exact_posterior, DEFAULT_BUDGET};
use vblink::{Corpus, FitOptions, HyperParams, Schema};

fn main() -> vblink::Result<()> {
    let schema = Schema::with_cardinalities(&[2])?;
    let corpus = Corpus::from_codes(schema, vec![vec![vec![1], vec![1]]])?;
    for k in 1..=3 {
        let hp = HyperParams::symmetric(k, 1.0, &[2])?;
        let exact = exact_posterior(&corpus, &hp, DEFAULT_BUDGET)?;
        let (state, report) = fit(&corpus, &hp, &FitOptions::default())?;
        let co = posterior_cocluster_estimate(&state, &[(0, 1)])?[0];
        println!(
            "K={k}: log p(x) = {:.12}  ELBO = {:.12}  gap = {:.3e}  P(same) exact {:.6} vs q {:.6}",
            exact.log_evidence,
            report.final_elbo(),
            exact.log_evidence - report.final_elbo(),
            exact.cocluster(0, 1),
            co
        );
    }

    let schema = Schema::with_cardinalities(&[3, 4])?;
    let rows = vec![vec![1, 2], vec![1, 2], vec![3, 4], vec![1, 1], vec![3, 4], vec![2, 3]];
    let corpus = Corpus::from_codes(schema, vec![rows])?;
    let hp = HyperParams::symmetric(4, 0.5, &[3, 4])?;
    let exact = exact_posterior(&corpus, &hp, DEFAULT_BUDGET)?;
    let (_, report) = fit(&corpus, &hp, &FitOptions::default())?;
    println!(
        "6 records, K=4: {} assignments, gap {:.6}",
        exact.assignment_log_probs.len(),
        exact.log_evidence - report.final_elbo()
    );
    for row in exact.cocluster_matrix() {
        println!("  {}", row.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>().join(" "));
    }
    Ok(())
}
