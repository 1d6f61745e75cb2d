//! Exact posterior over assignments by exhaustive enumeration.
//!
//! `β` is integrated out in closed form: for a fixed assignment `z`, each
//! (entity, field) cell contributes the Dirichlet-multinomial factor
//! `B(A_f + c_kf(z)) / B(A_f)`, where `c_kf(z)` counts the values of field
//! `f` among the records assigned to `k`. Summing over all `K^N`
//! assignments with the uniform prior `K^{-N}` gives the evidence `p(x)`.
//! Only usable on tiny instances; it exists to certify the variational
//! engine.

use crate::corpus::Corpus;
use crate::engine::HyperParams;
use crate::error::{Error, Result};
use crate::numerics::{ln_gamma, log_sum_exp_nonempty};

pub const DEFAULT_BUDGET: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ExactPosterior {
    pub log_evidence: f64,
    /// `log p(z | x)` for assignment index `i = Σ_n z_n K^n`
    /// (record 0 is the least significant digit).
    pub assignment_log_probs: Vec<f64>,
    records: usize,
    /// Row-major `N × N` co-cluster probabilities.
    cocluster: Vec<f64>,
}

impl ExactPosterior {
    /// `P(z_i = z_j | x)` for flat record indices.
    pub fn cocluster(&self, i: usize, j: usize) -> f64 {
        self.cocluster[i * self.records + j]
    }

    pub fn cocluster_matrix(&self) -> Vec<Vec<f64>> {
        self.cocluster.chunks(self.records.max(1)).map(<[f64]>::to_vec).collect()
    }
}

fn check_budget(entities: usize, records: usize, budget: u64) -> Result<u64> {
    u32::try_from(records)
        .ok()
        .and_then(|n| (entities as u64).checked_pow(n))
        .filter(|&total| total <= budget)
        .ok_or(Error::BudgetExceeded {
            entities,
            records,
            budget,
        })
}

/// Per-cell log Dirichlet-multinomial factors with count-indexed lookup
/// tables, so that every factor is recomputed exactly rather than updated
/// incrementally.
struct CellTables {
    /// `[f][v][c] = ln Γ(A_fv + c)`
    value: Vec<Vec<Vec<f64>>>,
    /// `[f][c] = ln Γ(Σ_v A_fv + c)`
    total: Vec<Vec<f64>>,
    /// `ln B(A_f)`
    prior: Vec<f64>,
}

impl CellTables {
    fn new(hp: &HyperParams, records: usize) -> Self {
        let mut value = Vec::new();
        let mut total = Vec::new();
        let mut prior = Vec::new();
        for alpha in hp.alpha_fields() {
            let sum: f64 = alpha.iter().sum();
            value.push(
                alpha
                    .iter()
                    .map(|&a| (0..=records).map(|c| ln_gamma(a + c as f64)).collect())
                    .collect(),
            );
            total.push((0..=records).map(|c| ln_gamma(sum + c as f64)).collect());
            prior.push(alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>() - ln_gamma(sum));
        }
        CellTables { value, total, prior }
    }

    fn log_factor(&self, f: usize, counts: &[usize]) -> f64 {
        let n: usize = counts.iter().sum();
        let ln_b: f64 = counts.iter().enumerate().map(|(v, &c)| self.value[f][v][c]).sum::<f64>() - self.total[f][n];
        ln_b - self.prior[f]
    }
}

/// Walks every assignment in index order, yielding `(z, log p(z, x))`.
fn enumerate(corpus: &Corpus, hp: &HyperParams, mut visit: impl FnMut(&[usize], f64)) {
    let n = corpus.total_records();
    let k_count = hp.entities();
    let cards = corpus.cardinalities();
    let f_count = cards.len();
    let tables = CellTables::new(hp, n);
    let z_prior = -(n as f64) * (k_count as f64).ln();

    // counts[k][f][v]
    let mut counts: Vec<Vec<Vec<usize>>> = (0..k_count).map(|_| cards.iter().map(|&v| vec![0; v]).collect()).collect();
    let mut cells = vec![0.0; k_count * f_count];
    let mut z = vec![0usize; n];
    for rec in corpus.records() {
        for (f, &x) in rec.iter().enumerate() {
            counts[0][f][x as usize] += 1;
        }
    }
    let refresh = |cells: &mut [f64], counts: &[Vec<Vec<usize>>], k: usize| {
        for f in 0..f_count {
            cells[k * f_count + f] = tables.log_factor(f, &counts[k][f]);
        }
    };
    for k in 0..k_count {
        refresh(&mut cells, &counts, k);
    }

    loop {
        visit(&z, z_prior + cells.iter().sum::<f64>());
        // Odometer increment, record 0 fastest.
        let mut i = 0;
        loop {
            if i == n {
                return;
            }
            let old = z[i];
            let new = if old + 1 < k_count { old + 1 } else { 0 };
            for (f, &x) in corpus.record(i).iter().enumerate() {
                counts[old][f][x as usize] -= 1;
                counts[new][f][x as usize] += 1;
            }
            z[i] = new;
            refresh(&mut cells, &counts, old);
            refresh(&mut cells, &counts, new);
            if new != 0 {
                break;
            }
            i += 1;
        }
    }
}

/// Exact posterior with an explicit enumeration budget on `K^N`.
pub fn exact_posterior(corpus: &Corpus, hp: &HyperParams, budget: u64) -> Result<ExactPosterior> {
    let n = corpus.total_records();
    let total = check_budget(hp.entities(), n, budget)?;
    if hp.alpha_fields().len() != corpus.field_count()
        || hp.alpha_fields().iter().zip(corpus.cardinalities()).any(|(a, v)| a.len() != v)
    {
        return Err(Error::Argument("concentration shape does not match the corpus".into()));
    }

    let mut log_joint = Vec::with_capacity(total as usize);
    enumerate(corpus, hp, |_, lj| log_joint.push(lj));
    let log_evidence = log_sum_exp_nonempty(&log_joint);
    let assignment_log_probs: Vec<f64> = log_joint.iter().map(|lj| lj - log_evidence).collect();

    let mut cocluster = vec![0.0; n * n];
    let mut index = 0;
    enumerate(corpus, hp, |z, _| {
        let w = assignment_log_probs[index].exp();
        index += 1;
        for i in 0..n {
            for j in i + 1..n {
                if z[i] == z[j] {
                    cocluster[i * n + j] += w;
                }
            }
        }
    });
    for i in 0..n {
        cocluster[i * n + i] = 1.0;
        for j in i + 1..n {
            let p = cocluster[i * n + j].min(1.0);
            cocluster[i * n + j] = p;
            cocluster[j * n + i] = p;
        }
    }

    Ok(ExactPosterior {
        log_evidence,
        assignment_log_probs,
        records: n,
        cocluster,
    })
}

/// `log p(x)` under the default budget of 10^6 assignments.
pub fn exact_log_evidence(corpus: &Corpus, hp: &HyperParams) -> Result<f64> {
    check_budget(hp.entities(), corpus.total_records(), DEFAULT_BUDGET)?;
    let mut log_joint = Vec::new();
    enumerate(corpus, hp, |_, lj| log_joint.push(lj));
    Ok(log_sum_exp_nonempty(&log_joint))
}

/// `P(z_i = z_j | x)` for every pair of flat records, default budget.
pub fn exact_cocluster(corpus: &Corpus, hp: &HyperParams) -> Result<Vec<Vec<f64>>> {
    exact_posterior(corpus, hp, DEFAULT_BUDGET).map(|p| p.cocluster_matrix())
}
