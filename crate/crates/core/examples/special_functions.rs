//! Digamma, trigamma and log-sum-exp.

use vblink::numerics::{digamma, ln_gamma, log_sum_exp, trigamma};

fn main() -> vblink::Result<()> {
    println!("{:>8} {:>22} {:>22} {:>22}", "x", "ln Γ(x)", "ψ(x)", "ψ₁(x)");
    for x in [0.001, 0.1, 0.5, 1.0, 2.5, 10.0, 100.0] {
        println!("{x:>8} {:>22.15} {:>22.15} {:>22.15}", ln_gamma(x), digamma(x)?, trigamma(x)?);
    }
    println!("ψ(2) − ψ(1) = {}", digamma(2.0)? - digamma(1.0)?);
    println!("digamma(0) -> {}", digamma(0.0).unwrap_err());

    let scores = [-1000.0, -1001.0, -1002.5];
    let norm = log_sum_exp(&scores)?;
    let probs: Vec<f64> = scores.iter().map(|s| (s - norm).exp()).collect();
    println!("log_sum_exp {scores:?} = {norm}");
    println!("normalized: {probs:?}");
    Ok(())
}
