//! Mean-field coordinate-ascent variational inference.
//!
//! The approximating family factorizes as
//! `q(β, z) = Π_n Cat(z_n | φ_n) · Π_{k,f} Dir(β_kf | λ_kf)`.
//! A sweep replaces every responsibility row `φ_n` with its optimum given
//! `λ`, then every `λ_kf` with its optimum given `φ`:
//!
//! ```text
//! φ_nk ∝ exp Σ_f [ψ(λ_{k f x_nf}) − ψ(Σ_u λ_kfu)]
//! λ_kfv = A_fv + Σ_n φ_nk 1{x_nf = v}
//! ```
//!
//! Each step maximizes the ELBO in its block, so the per-sweep ELBO trace is
//! nondecreasing.
//!
//! Parallel phases partition records (φ) or entities (λ) and reduce in a
//! fixed order, so results are bit-identical for any worker count.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;

use crate::corpus::{Corpus, Schema};
use crate::error::{Error, Result};
use crate::numerics::{digamma_unchecked, ln_gamma, trigamma_unchecked};

/// Records per partial sum in parallel reductions. Fixed so that the
/// reduction tree does not depend on the worker count.
const REDUCTION_CHUNK: usize = 1024;
/// Entities per task in the λ update.
const ENTITY_BLOCK: usize = 16;
/// Share of each initial `φ_n` placed on the record's anchor entity.
pub const ANCHOR_MASS: f64 = 0.05;

/// Number of latent entities and the Dirichlet prior on every `β_kf`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    entities: usize,
    alpha: Vec<Vec<f64>>,
}

impl HyperParams {
    /// `alpha[f]` is the concentration vector of field `f`, in code order.
    pub fn new(entities: usize, alpha: Vec<Vec<f64>>) -> Result<Self> {
        if entities == 0 {
            return Err(Error::Argument("K must be at least 1".into()));
        }
        if alpha.iter().flatten().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(Error::Argument("every Dirichlet concentration must be positive and finite".into()));
        }
        Ok(HyperParams { entities, alpha })
    }

    /// Same concentration for every value of every field.
    pub fn symmetric(entities: usize, alpha: f64, cardinalities: &[usize]) -> Result<Self> {
        HyperParams::new(entities, cardinalities.iter().map(|&v| vec![alpha; v]).collect())
    }

    pub fn entities(&self) -> usize {
        self.entities
    }

    pub fn alpha(&self, f: usize) -> &[f64] {
        &self.alpha[f]
    }

    pub fn alpha_fields(&self) -> &[Vec<f64>] {
        &self.alpha
    }

    fn check(&self, corpus: &Corpus) -> Result<()> {
        let cards = corpus.cardinalities();
        if self.alpha.len() != cards.len() || self.alpha.iter().zip(&cards).any(|(a, &v)| a.len() != v) {
            return Err(Error::Argument(format!(
                "concentration shape {:?} does not match field cardinalities {cards:?}",
                self.alpha.iter().map(Vec::len).collect::<Vec<_>>()
            )));
        }
        Ok(())
    }

    fn flat_alpha(&self) -> Vec<f64> {
        self.alpha.iter().flatten().copied().collect()
    }
}

/// Variational parameters: responsibilities `φ` (records × entities, rows on
/// the simplex) and Dirichlet parameters `λ` (entities × fields × values).
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    entities: usize,
    records: usize,
    cardinalities: Vec<usize>,
    offsets: Vec<usize>,
    width: usize,
    phi: Vec<f64>,
    lambda: Vec<f64>,
}

impl VariationalState {
    fn empty(corpus: &Corpus, entities: usize) -> Self {
        let cardinalities = corpus.cardinalities();
        let offsets = field_offsets(&cardinalities);
        let width = cardinalities.iter().sum();
        let records = corpus.total_records();
        VariationalState {
            entities,
            records,
            cardinalities,
            offsets,
            width,
            phi: vec![0.0; records * entities],
            lambda: vec![0.0; entities * width],
        }
    }

    /// Builds a state from explicit parameters. `phi` is records × entities
    /// row-major; `lambda` is entities × (fields laid out consecutively).
    pub fn from_parts(corpus: &Corpus, hp: &HyperParams, phi: Vec<f64>, lambda: Vec<f64>) -> Result<Self> {
        hp.check(corpus)?;
        let mut state = VariationalState::empty(corpus, hp.entities);
        if phi.len() != state.phi.len() || lambda.len() != state.lambda.len() {
            return Err(Error::Argument("variational parameter shapes do not match the corpus".into()));
        }
        if lambda.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::Argument("λ must be positive and finite".into()));
        }
        for row in phi.chunks(hp.entities) {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Argument("each φ row must be a probability vector".into()));
            }
        }
        state.phi = phi;
        state.lambda = lambda;
        Ok(state)
    }

    pub fn entities(&self) -> usize {
        self.entities
    }

    pub fn records(&self) -> usize {
        self.records
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    /// Responsibilities of flat record `n` over all entities.
    pub fn phi_row(&self, n: usize) -> &[f64] {
        &self.phi[n * self.entities..(n + 1) * self.entities]
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    /// `λ_kf·` indexed by 0-based value index.
    pub fn lambda(&self, k: usize, f: usize) -> &[f64] {
        let start = k * self.width + self.offsets[f];
        &self.lambda[start..start + self.cardinalities[f]]
    }

    pub fn lambda_flat(&self) -> &[f64] {
        &self.lambda
    }

    pub fn set_lambda(&mut self, k: usize, f: usize, v: usize, value: f64) {
        assert!(value > 0.0, "λ must stay positive");
        self.lambda[k * self.width + self.offsets[f] + v] = value;
    }

    /// Replaces one responsibility row; `row` must lie on the simplex.
    pub fn set_phi_row(&mut self, n: usize, row: &[f64]) -> Result<()> {
        let sum: f64 = row.iter().sum();
        if row.len() != self.entities || row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Argument("φ row must be a probability vector over the entities".into()));
        }
        self.phi[n * self.entities..(n + 1) * self.entities].copy_from_slice(row);
        Ok(())
    }

    /// Relabels entities: entity `k` becomes `perm[k]`.
    pub fn permute_entities(&self, perm: &[usize]) -> Result<Self> {
        let k = self.entities;
        let mut seen = vec![false; k];
        if perm.len() != k || perm.iter().any(|&p| p >= k || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Argument("not a permutation of the entities".into()));
        }
        let mut out = self.clone();
        for n in 0..self.records {
            for (old, &new) in perm.iter().enumerate() {
                out.phi[n * k + new] = self.phi[n * k + old];
            }
        }
        for (old, &new) in perm.iter().enumerate() {
            out.lambda[new * self.width..(new + 1) * self.width]
                .copy_from_slice(&self.lambda[old * self.width..(old + 1) * self.width]);
        }
        Ok(out)
    }

    fn check_against(&self, corpus: &Corpus, hp: &HyperParams) -> Result<()> {
        hp.check(corpus)?;
        if self.records != corpus.total_records()
            || self.entities != hp.entities
            || self.cardinalities != corpus.cardinalities()
        {
            return Err(Error::Argument("variational state does not match the corpus or K".into()));
        }
        Ok(())
    }
}

fn field_offsets(cardinalities: &[usize]) -> Vec<usize> {
    cardinalities
        .iter()
        .scan(0, |acc, &v| {
            let start = *acc;
            *acc += v;
            Some(start)
        })
        .collect()
}

/// Seeded initialization. Entities are shuffled once and record `n` is
/// anchored to entity `perm[n mod K]`; `φ_n` is `1 − ANCHOR_MASS` times a
/// symmetric Dirichlet(1) draw (normalized unit exponentials) plus
/// `ANCHOR_MASS` on the anchor. `λ` is then set by one λ update.
///
/// Exactly uniform `φ` is a fixed point of the updates, so the jitter is
/// what lets entities differentiate. The anchors keep distinct records
/// apart at the start: with small concentrations an empty entity scores
/// far below any occupied one, so coordinate ascent merges clusters
/// readily but almost never splits them.
pub fn init_state(corpus: &Corpus, hp: &HyperParams, seed: u64) -> Result<VariationalState> {
    hp.check(corpus)?;
    let k_count = hp.entities;
    let mut state = VariationalState::empty(corpus, k_count);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut anchors: Vec<usize> = (0..k_count).collect();
    anchors.shuffle(&mut rng);
    for (n, row) in state.phi.chunks_mut(k_count).enumerate() {
        let mut total = 0.0;
        for p in row.iter_mut() {
            let e: f64 = Exp1.sample(&mut rng);
            *p = e;
            total += e;
        }
        for p in row.iter_mut() {
            *p = ((1.0 - ANCHOR_MASS) * (*p / total)).max(f64::MIN_POSITIVE);
        }
        row[anchors[n % k_count]] += ANCHOR_MASS;
    }
    update_lambda(&mut state, corpus, hp)?;
    Ok(state)
}

/// `E_q[log β_kfv] = ψ(λ_kfv) − ψ(Σ_u λ_kfu)`, entities × width.
fn expected_log_beta(state: &VariationalState) -> Vec<f64> {
    let mut out = vec![0.0; state.lambda.len()];
    if state.width == 0 {
        return out;
    }
    out.par_chunks_mut(state.width)
        .zip(state.lambda.par_chunks(state.width))
        .for_each(|(dst, lam)| {
            for (f, &off) in state.offsets.iter().enumerate() {
                let cell = &lam[off..off + state.cardinalities[f]];
                let total = digamma_unchecked(cell.iter().sum());
                for (d, &l) in dst[off..].iter_mut().zip(cell) {
                    *d = digamma_unchecked(l) - total;
                }
            }
        });
    out
}

#[inline]
fn record_columns(corpus: &Corpus, offsets: &[usize], n: usize, cols: &mut Vec<usize>) {
    cols.clear();
    cols.extend(corpus.record(n).iter().zip(offsets).map(|(&x, &off)| off + x as usize));
}

/// Coordinate update of every responsibility row given `λ`, computed in
/// log space: `φ_nk = exp(s_nk − logsumexp_k s_n·)`.
pub fn update_phi(state: &mut VariationalState, corpus: &Corpus, hp: &HyperParams) -> Result<()> {
    state.check_against(corpus, hp)?;
    let elog = expected_log_beta(state);
    let (k_count, width, offsets) = (state.entities, state.width, &state.offsets);
    state
        .phi
        .par_chunks_mut(k_count)
        .enumerate()
        .with_min_len(64)
        .for_each_init(Vec::new, |cols, (n, row)| {
            record_columns(corpus, offsets, n, cols);
            let mut max = f64::NEG_INFINITY;
            for (k, score) in row.iter_mut().enumerate() {
                let base = &elog[k * width..(k + 1) * width];
                let s: f64 = cols.iter().map(|&c| base[c]).sum();
                *score = s;
                max = max.max(s);
            }
            let norm = max + row.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
            for p in row.iter_mut() {
                *p = (*p - norm).exp().max(f64::MIN_POSITIVE);
            }
        });
    Ok(())
}

/// Expected counts `c_kfv = Σ_n φ_nk 1{x_nf = v}`, entities × width.
/// Every cell accumulates in record order whatever the partition.
fn expected_counts(state: &VariationalState, corpus: &Corpus) -> Vec<f64> {
    let (k_count, width, offsets) = (state.entities, state.width, &state.offsets);
    let mut counts = vec![0.0; state.lambda.len()];
    if width == 0 {
        return counts;
    }
    counts
        .par_chunks_mut(ENTITY_BLOCK * width)
        .enumerate()
        .for_each(|(block, dst)| {
            let k0 = block * ENTITY_BLOCK;
            let kb = dst.len() / width.max(1);
            let mut cols = Vec::with_capacity(offsets.len());
            for n in 0..state.records {
                record_columns(corpus, offsets, n, &mut cols);
                let row = &state.phi[n * k_count + k0..n * k_count + k0 + kb];
                for (j, &p) in row.iter().enumerate() {
                    let cell = &mut dst[j * width..(j + 1) * width];
                    for &c in cols.iter() {
                        cell[c] += p;
                    }
                }
            }
        });
    counts
}

fn set_lambda_from_counts(state: &mut VariationalState, counts: &[f64], alpha: &[f64]) {
    for (lam, cnt) in state.lambda.chunks_mut(state.width.max(1)).zip(counts.chunks(state.width.max(1))) {
        for ((l, &c), &a) in lam.iter_mut().zip(cnt).zip(alpha) {
            *l = a + c;
        }
    }
}

/// Coordinate update `λ_kfv = A_fv + Σ_n φ_nk 1{x_nf = v}`.
pub fn update_lambda(state: &mut VariationalState, corpus: &Corpus, hp: &HyperParams) -> Result<()> {
    state.check_against(corpus, hp)?;
    let counts = expected_counts(state, corpus);
    set_lambda_from_counts(state, &counts, &hp.flat_alpha());
    Ok(())
}

/// Evidence lower bound `E_q[log p(β, z, x)] − E_q[log q(β, z)]`, including
/// the uniform prior on assignments (`−N log K`), so that it lower-bounds the
/// exact log evidence.
pub fn elbo(state: &VariationalState, corpus: &Corpus, hp: &HyperParams) -> Result<f64> {
    state.check_against(corpus, hp)?;
    let counts = expected_counts(state, corpus);
    Ok(elbo_from_counts(state, &counts, hp))
}

fn elbo_from_counts(state: &VariationalState, counts: &[f64], hp: &HyperParams) -> f64 {
    let alpha = hp.flat_alpha();
    let prior_norm: Vec<f64> = hp
        .alpha
        .iter()
        .map(|a| ln_gamma(a.iter().sum()) - a.iter().map(|&x| ln_gamma(x)).sum::<f64>())
        .collect();

    // Per entity: the two Dirichlet terms and the expected log-likelihood,
    // combined as Σ_f [log B(λ_kf) − log B(A_f) + Σ_v (A_fv + c_kfv − λ_kfv) E[log β_kfv]].
    let per_entity: Vec<f64> = state
        .lambda
        .par_chunks(state.width.max(1))
        .zip(counts.par_chunks(state.width.max(1)))
        .map(|(lam, cnt)| {
            let mut total = 0.0;
            for (f, &off) in state.offsets.iter().enumerate() {
                let v = state.cardinalities[f];
                let cell = &lam[off..off + v];
                let sum: f64 = cell.iter().sum();
                let psi_sum = digamma_unchecked(sum);
                let mut term = prior_norm[f] - ln_gamma(sum);
                for u in 0..v {
                    let l = cell[u];
                    term += ln_gamma(l) + (alpha[off + u] + cnt[off + u] - l) * (digamma_unchecked(l) - psi_sum);
                }
                total += term;
            }
            total
        })
        .collect();

    let entropy_parts: Vec<f64> = state
        .phi
        .par_chunks(REDUCTION_CHUNK * state.entities)
        .map(|chunk| chunk.iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum::<f64>())
        .collect();

    let z_prior = -(state.records as f64) * (state.entities as f64).ln();
    per_entity.iter().sum::<f64>() + entropy_parts.iter().sum::<f64>() + z_prior
}

/// ∂ELBO/∂λ_kfv with `v` a 0-based value index:
/// `ψ₁(λ_kfv)[A_fv − λ_kfv + c_kfv] − ψ₁(Σ_u λ_kfu) Σ_u [A_fu − λ_kfu + c_kfu]`.
pub fn elbo_grad_lambda(
    state: &VariationalState,
    corpus: &Corpus,
    hp: &HyperParams,
    k: usize,
    f: usize,
    v: usize,
) -> Result<f64> {
    state.check_against(corpus, hp)?;
    if k >= state.entities || f >= state.cardinalities.len() || v >= state.cardinalities[f] {
        return Err(Error::Index(format!("λ coordinate ({k}, {f}, {v})")));
    }
    let mut counts = vec![0.0; state.cardinalities[f]];
    for n in 0..state.records {
        counts[corpus.record(n)[f] as usize] += state.phi[n * state.entities + k];
    }
    let lam = state.lambda(k, f);
    let alpha = hp.alpha(f);
    let residual = |u: usize| alpha[u] - lam[u] + counts[u];
    let total: f64 = (0..lam.len()).map(residual).sum();
    Ok(trigamma_unchecked(lam[v]) * residual(v) - trigamma_unchecked(lam.iter().sum()) * total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_sweeps: usize,
    /// Stop once `|ΔELBO| ≤ rel_tol · |ELBO|`.
    pub rel_tol: f64,
    pub seed: u64,
    pub workers: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_sweeps: 1000,
            rel_tol: 1e-8,
            seed: 0,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// ELBO of the initialized state, before the first sweep.
    pub initial_elbo: f64,
    /// ELBO after each sweep.
    pub elbo_trace: Vec<f64>,
    pub sweeps_run: usize,
    pub converged: bool,
    /// Seconds.
    pub wall_time: f64,
}

impl FitReport {
    pub fn final_elbo(&self) -> f64 {
        self.elbo_trace.last().copied().unwrap_or(self.initial_elbo)
    }
}

/// Passed to the observer after every completed sweep.
pub struct SweepEvent<'a> {
    /// 1-based sweep number.
    pub sweep: usize,
    pub elbo: f64,
    pub state: &'a VariationalState,
}

/// Initializes from `options.seed` and runs coordinate ascent.
pub fn fit(corpus: &Corpus, hp: &HyperParams, options: &FitOptions) -> Result<(VariationalState, FitReport)> {
    let pool = worker_pool(options.workers)?;
    let mut state = pool.install(|| init_state(corpus, hp, options.seed))?;
    let report = fit_from(&mut state, corpus, hp, options, |_| {})?;
    Ok((state, report))
}

/// Runs coordinate ascent from an existing state (φ then λ per sweep),
/// calling `observer` after each sweep.
pub fn fit_from(
    state: &mut VariationalState,
    corpus: &Corpus,
    hp: &HyperParams,
    options: &FitOptions,
    mut observer: impl FnMut(&SweepEvent<'_>),
) -> Result<FitReport> {
    if options.max_sweeps == 0 {
        return Err(Error::Argument("max_sweeps must be at least 1".into()));
    }
    if !(options.rel_tol > 0.0) {
        return Err(Error::Argument("rel_tol must be positive".into()));
    }
    state.check_against(corpus, hp)?;
    let pool = worker_pool(options.workers)?;
    let started = Instant::now();
    let alpha = hp.flat_alpha();

    let initial_elbo = pool.install(|| elbo(state, corpus, hp))?;
    if !initial_elbo.is_finite() {
        return Err(numerical_failure(0, state));
    }
    let mut previous = initial_elbo;
    let mut trace = Vec::new();
    let mut converged = false;
    for sweep in 1..=options.max_sweeps {
        let value = pool.install(|| -> Result<f64> {
            update_phi(state, corpus, hp)?;
            let counts = expected_counts(state, corpus);
            set_lambda_from_counts(state, &counts, &alpha);
            Ok(elbo_from_counts(state, &counts, hp))
        })?;
        if !value.is_finite() {
            return Err(numerical_failure(sweep, state));
        }
        trace.push(value);
        observer(&SweepEvent {
            sweep,
            elbo: value,
            state,
        });
        if (value - previous).abs() <= options.rel_tol * value.abs() {
            converged = true;
            break;
        }
        previous = value;
    }
    Ok(FitReport {
        initial_elbo,
        sweeps_run: trace.len(),
        elbo_trace: trace,
        converged,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    if workers == 0 {
        return Err(Error::Argument("workers must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Argument(format!("cannot start {workers} workers: {e}")))
}

fn numerical_failure(sweep: usize, state: &VariationalState) -> Error {
    let (lo, hi) = state
        .lambda
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &l| (lo.min(l), hi.max(l)));
    let bad_phi = state.phi.iter().filter(|p| !p.is_finite()).count();
    let bad_lambda = state.lambda.iter().filter(|l| !l.is_finite()).count();
    Error::NumericalFailure {
        sweep,
        stats: format!("λ range [{lo}, {hi}], {bad_lambda} non-finite λ, {bad_phi} non-finite φ"),
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"VBLKCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume or inspect a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub records_per_db: Vec<usize>,
    pub hyper: HyperParams,
    pub state: VariationalState,
}

/// Binary little-endian layout:
///
/// ```text
/// magic "VBLKCKPT" | version u32
/// D u64 | R_d u64 × D | F u64 | V_f u64 × F | K u64
/// A f64 × Σ V_f | λ f64 × K·Σ V_f | φ f64 × N·K
/// ```
pub fn write_checkpoint(
    path: impl AsRef<Path>,
    records_per_db: &[usize],
    hp: &HyperParams,
    state: &VariationalState,
) -> Result<()> {
    let path = path.as_ref();
    if records_per_db.iter().sum::<usize>() != state.records {
        return Err(Error::Argument("database sizes do not match the state".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut put = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(path, e));
    put(CHECKPOINT_MAGIC)?;
    put(&CHECKPOINT_VERSION.to_le_bytes())?;
    put(&(records_per_db.len() as u64).to_le_bytes())?;
    for &r in records_per_db {
        put(&(r as u64).to_le_bytes())?;
    }
    put(&(state.cardinalities.len() as u64).to_le_bytes())?;
    for &v in &state.cardinalities {
        put(&(v as u64).to_le_bytes())?;
    }
    put(&(state.entities as u64).to_le_bytes())?;
    for x in hp.alpha.iter().flatten().chain(&state.lambda).chain(&state.phi) {
        put(&x.to_le_bytes())?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let bad = |m: &str| Error::format("checkpoint", path, m);
    let mut read = |buf: &mut [u8]| input.read_exact(buf).map_err(|_| bad("truncated file"));

    let mut magic = [0u8; 8];
    read(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut word = [0u8; 4];
    read(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let next_u64 = |read: &mut dyn FnMut(&mut [u8]) -> Result<()>| -> Result<usize> {
        let mut b = [0u8; 8];
        read(&mut b)?;
        usize::try_from(u64::from_le_bytes(b)).map_err(|_| bad("size overflow"))
    };
    let d = next_u64(&mut read)?;
    let records_per_db = (0..d).map(|_| next_u64(&mut read)).collect::<Result<Vec<_>>>()?;
    let f = next_u64(&mut read)?;
    let cardinalities = (0..f).map(|_| next_u64(&mut read)).collect::<Result<Vec<_>>>()?;
    let entities = next_u64(&mut read)?;
    let records: usize = records_per_db.iter().sum();
    let width: usize = cardinalities.iter().sum();

    let mut floats = |count: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(count);
        let mut b = [0u8; 8];
        for _ in 0..count {
            read(&mut b)?;
            out.push(f64::from_le_bytes(b));
        }
        Ok(out)
    };
    let flat_alpha = floats(width)?;
    let lambda = floats(entities * width)?;
    let phi = floats(records * entities)?;

    let offsets = field_offsets(&cardinalities);
    let alpha = offsets
        .iter()
        .zip(&cardinalities)
        .map(|(&o, &v)| flat_alpha[o..o + v].to_vec())
        .collect();
    let hyper = HyperParams::new(entities, alpha).map_err(|e| bad(&e.to_string()))?;
    Ok(Checkpoint {
        records_per_db,
        hyper,
        state: VariationalState {
            entities,
            records,
            cardinalities,
            offsets,
            width,
            phi,
            lambda,
        },
    })
}

/// Writes `entity,field,value,lambda` rows with 1-based entity ids and raw
/// field names and values.
pub fn write_lambda_csv(path: impl AsRef<Path>, schema: &Schema, state: &VariationalState) -> Result<()> {
    let path = path.as_ref();
    if schema.cardinalities() != state.cardinalities {
        return Err(Error::Argument("schema does not match the state".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["entity", "field", "value", "lambda"]).map_err(|e| Error::csv(path, e))?;
    for k in 0..state.entities {
        let id = (k + 1).to_string();
        for (f, field) in schema.fields().iter().enumerate() {
            for (value, l) in field.values().zip(state.lambda(k, f)) {
                w.write_record([id.as_str(), &field.name, value, &l.to_string()])
                    .map_err(|e| Error::csv(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Schema;

    /// One database, one field per entry of `cards`, rows of 1-based codes.
    fn corpus(cards: &[usize], rows: &[&[u32]]) -> Corpus {
        let schema = Schema::with_cardinalities(cards).unwrap();
        Corpus::from_codes(schema, vec![rows.iter().map(|r| r.to_vec()).collect()]).unwrap()
    }

    #[test]
    fn init_single_entity_is_certain() {
        let c = corpus(&[2], &[&[1], &[2], &[1]]);
        let hp = HyperParams::symmetric(1, 1.0, &[2]).unwrap();
        let s = init_state(&c, &hp, 4).unwrap();
        assert!(s.phi().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn init_is_seeded_and_on_the_simplex() {
        let rows: Vec<[u32; 1]> = (0..10).map(|i| [1 + i % 3]).collect();
        let refs: Vec<&[u32]> = rows.iter().map(|r| &r[..]).collect();
        let c = corpus(&[3], &refs);
        let hp = HyperParams::symmetric(3, 0.5, &[3]).unwrap();
        let a = init_state(&c, &hp, 17).unwrap();
        assert_eq!(a, init_state(&c, &hp, 17).unwrap());
        assert_ne!(a, init_state(&c, &hp, 18).unwrap());
        for n in 0..10 {
            let row = a.phi_row(n);
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn lambda_without_records_is_the_prior() {
        let c = corpus(&[2, 3], &[]);
        let hp = HyperParams::new(2, vec![vec![0.5, 1.5], vec![0.1, 0.2, 0.3]]).unwrap();
        let s = init_state(&c, &hp, 0).unwrap();
        for k in 0..2 {
            assert_eq!(s.lambda(k, 0), &[0.5, 1.5]);
            assert_eq!(s.lambda(k, 1), &[0.1, 0.2, 0.3]);
        }
        assert_eq!(elbo(&s, &c, &hp).unwrap(), 0.0);
        for (f, v) in [(0, 0), (0, 1), (1, 2)] {
            assert_eq!(elbo_grad_lambda(&s, &c, &hp, 1, f, v).unwrap(), 0.0);
        }
    }

    #[test]
    fn lambda_counts_plus_prior() {
        let c = corpus(&[2], &[&[1], &[1]]);
        let hp = HyperParams::symmetric(1, 1.0, &[2]).unwrap();
        let s = init_state(&c, &hp, 0).unwrap();
        assert_eq!(s.lambda(0, 0), &[3.0, 1.0]);
    }

    #[test]
    fn lambda_split_responsibilities() {
        let c = corpus(&[2], &[&[1], &[2]]);
        let hp = HyperParams::symmetric(2, 0.5, &[2]).unwrap();
        let mut s = VariationalState::from_parts(&c, &hp, vec![0.5; 4], vec![1.0; 4]).unwrap();
        update_lambda(&mut s, &c, &hp).unwrap();
        assert_eq!(s.lambda(0, 0), &[1.0, 1.0]);
        assert_eq!(s.lambda(1, 0), &[1.0, 1.0]);
    }

    #[test]
    fn phi_hand_evaluation() {
        let c = corpus(&[2], &[&[1]]);
        let hp = HyperParams::symmetric(2, 1.0, &[2]).unwrap();
        let mut s = VariationalState::from_parts(&c, &hp, vec![0.5, 0.5], vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        update_phi(&mut s, &c, &hp).unwrap();
        // s = (ψ(2) − ψ(3), ψ(1) − ψ(3)) = (−0.5, −1.5): a logistic of 1.
        assert!((s.phi_row(0)[0] - 0.7310585786300049).abs() <= 1e-12);
        assert!((s.phi_row(0)[1] - 0.2689414213699951).abs() <= 1e-12);
    }

    #[test]
    fn phi_symmetry_and_single_entity() {
        let c = corpus(&[3, 2], &[&[1, 2], &[3, 1]]);
        let hp = HyperParams::symmetric(4, 0.3, &[3, 2]).unwrap();
        let lambda: Vec<f64> = [0.7, 1.3, 2.0, 0.4, 5.0].repeat(4);
        let mut s = VariationalState::from_parts(&c, &hp, vec![0.25; 8], lambda).unwrap();
        s.set_phi_row(0, &[0.7, 0.1, 0.1, 0.1]).unwrap();
        update_phi(&mut s, &c, &hp).unwrap();
        for p in s.phi() {
            assert!((p - 0.25).abs() <= 1e-15);
        }

        let hp1 = HyperParams::symmetric(1, 0.3, &[3, 2]).unwrap();
        let mut s1 = VariationalState::from_parts(&c, &hp1, vec![1.0; 2], vec![0.9, 1.0, 1.1, 2.0, 3.0]).unwrap();
        update_phi(&mut s1, &c, &hp1).unwrap();
        assert_eq!(s1.phi(), &[1.0, 1.0]);
    }

    #[test]
    fn single_value_fields_do_not_move_phi() {
        let with = corpus(&[1, 3], &[&[1, 2], &[1, 3]]);
        let without = corpus(&[3], &[&[2], &[3]]);
        let hp_with = HyperParams::symmetric(2, 0.5, &[1, 3]).unwrap();
        let hp_without = HyperParams::symmetric(2, 0.5, &[3]).unwrap();
        let mut a = init_state(&with, &hp_with, 3).unwrap();
        let mut b = init_state(&without, &hp_without, 3).unwrap();
        update_phi(&mut a, &with, &hp_with).unwrap();
        update_phi(&mut b, &without, &hp_without).unwrap();
        for (x, y) in a.phi().iter().zip(b.phi()) {
            assert!((x - y).abs() <= 1e-14);
        }
    }

    #[test]
    fn single_entity_elbo_is_the_evidence() {
        let c = corpus(&[2], &[&[1], &[1]]);
        let hp = HyperParams::symmetric(1, 1.0, &[2]).unwrap();
        let s = init_state(&c, &hp, 0).unwrap();
        let value = elbo(&s, &c, &hp).unwrap();
        assert!((value - (1.0f64 / 3.0).ln()).abs() <= 1e-12, "{value}");
    }

    #[test]
    fn gradient_vanishes_after_lambda_update() {
        let c = corpus(&[3, 2], &[&[1, 2], &[3, 1], &[3, 2], &[2, 2]]);
        let hp = HyperParams::new(3, vec![vec![0.2, 0.5, 1.0], vec![0.7, 0.7]]).unwrap();
        let s = init_state(&c, &hp, 9).unwrap();
        for k in 0..3 {
            for (f, card) in [(0, 3), (1, 2)] {
                for v in 0..card {
                    assert!(elbo_grad_lambda(&s, &c, &hp, k, f, v).unwrap().abs() <= 1e-8);
                }
            }
        }
        assert!(matches!(elbo_grad_lambda(&s, &c, &hp, 3, 0, 0), Err(Error::Index(_))));
    }

    #[test]
    fn argument_validation() {
        let c = corpus(&[2], &[&[1]]);
        assert!(HyperParams::symmetric(0, 1.0, &[2]).is_err());
        assert!(HyperParams::symmetric(1, 0.0, &[2]).is_err());
        let wrong_shape = HyperParams::symmetric(1, 1.0, &[3]).unwrap();
        assert!(init_state(&c, &wrong_shape, 0).is_err());
        let hp = HyperParams::symmetric(2, 1.0, &[2]).unwrap();
        let bad = FitOptions {
            max_sweeps: 0,
            ..FitOptions::default()
        };
        assert!(fit(&c, &hp, &bad).is_err());
        let bad = FitOptions {
            workers: 0,
            ..FitOptions::default()
        };
        assert!(fit(&c, &hp, &bad).is_err());
        assert!(VariationalState::from_parts(&c, &hp, vec![0.6, 0.6], vec![1.0; 4]).is_err());
        assert!(VariationalState::from_parts(&c, &hp, vec![0.5, 0.5], vec![0.0; 4]).is_err());
    }

    #[test]
    fn single_entity_fit_converges_immediately() {
        let c = corpus(&[2], &[&[1], &[1]]);
        let hp = HyperParams::symmetric(1, 1.0, &[2]).unwrap();
        let (_, report) = fit(&c, &hp, &FitOptions::default()).unwrap();
        assert!(report.converged);
        assert!(report.sweeps_run <= 2);
        assert!((report.final_elbo() - (1.0f64 / 3.0).ln()).abs() <= 1e-12);
    }

    #[test]
    fn more_entities_than_records() {
        let c = corpus(&[4], &[&[1], &[4]]);
        let hp = HyperParams::symmetric(6, 0.5, &[4]).unwrap();
        let (state, report) = fit(&c, &hp, &FitOptions::default()).unwrap();
        assert!(report.final_elbo().is_finite());
        let total: f64 = state.lambda_flat().iter().map(|l| l - 0.5).sum();
        assert!((total - 2.0).abs() <= 1e-12);
    }

    #[test]
    fn permutation_relabels() {
        let c = corpus(&[2], &[&[1], &[2]]);
        let hp = HyperParams::symmetric(3, 0.5, &[2]).unwrap();
        let s = init_state(&c, &hp, 2).unwrap();
        let p = s.permute_entities(&[2, 0, 1]).unwrap();
        assert_eq!(p.phi_row(0)[2], s.phi_row(0)[0]);
        assert_eq!(p.lambda(0, 0), s.lambda(1, 0));
        assert!(s.permute_entities(&[0, 0, 1]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let schema = Schema::with_cardinalities(&[3, 2]).unwrap();
        let c = Corpus::from_codes(schema, vec![vec![vec![1, 2], vec![3, 1]], vec![vec![2, 2]]]).unwrap();
        let hp = HyperParams::new(2, vec![vec![0.1, 0.2, 0.3], vec![1.0 / 3.0, 0.7]]).unwrap();
        let (state, _) = fit(&c, &hp, &FitOptions::default()).unwrap();
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("state.ckpt");
        write_checkpoint(&path, c.records_per_db(), &hp, &state).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.records_per_db, vec![2, 1]);
        assert_eq!(back.hyper, hp);
        assert_eq!(back.state, state);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.state.phi()), bits(state.phi()));

        std::fs::write(&path, b"VBLKCKPT\x02\x00\x00\x00").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format { .. })));
    }
}
