//! Seeded synthetic corpora with known ground truth.
//!
//! Records are generated as noisy copies of latent individuals: each
//! individual `k` has, per field `f`, a categorical noise distribution
//! `β_kf` whose plurality sits at the individual's true value `v*_kf`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Schema};
use crate::error::{Error, Result};

/// How records are allocated to latent individuals.
#[derive(Debug, Clone, PartialEq)]
pub enum Layout {
    /// `entities` individuals; each record picks one uniformly at random.
    Standard {
        entities: usize,
        records_per_db: Vec<usize>,
    },
    /// Small-cluster regime: individuals are created with between 1 and
    /// `max_per_entity` records each until every record is covered, so the
    /// number of individuals grows linearly with the number of records.
    SmallCluster {
        records_per_db: Vec<usize>,
        max_per_entity: usize,
    },
}

impl Layout {
    pub fn records_per_db(&self) -> &[usize] {
        match self {
            Layout::Standard { records_per_db, .. } | Layout::SmallCluster { records_per_db, .. } => records_per_db,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    /// `β_kf ~ Dir(A_f)`, one concentration vector per field.
    Dirichlet(Vec<Vec<f64>>),
    /// `β_kf` puts `1 − ε` on the true value and spreads `ε` uniformly over
    /// the remaining values.
    Peaked { distortion: f64 },
}

impl NoiseModel {
    pub fn symmetric_dirichlet(concentration: f64, cardinalities: &[usize]) -> Self {
        NoiseModel::Dirichlet(cardinalities.iter().map(|&v| vec![concentration; v]).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub layout: Layout,
    pub cardinalities: Vec<usize>,
    pub noise: NoiseModel,
    pub seed: u64,
}

/// The generator's hidden state. Positions and labels are 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    entities: usize,
    records_per_db: Vec<usize>,
    cardinalities: Vec<usize>,
    /// Entity of each flat record.
    assignments: Vec<usize>,
    /// `entities × fields` 0-based value indices.
    latent_values: Vec<u32>,
    /// `entities × Σ_f V_f` probabilities, fields laid out consecutively.
    noise: Vec<f64>,
}

impl GroundTruth {
    pub(crate) fn new(
        entities: usize,
        records_per_db: Vec<usize>,
        cardinalities: Vec<usize>,
        assignments: Vec<usize>,
        latent_values: Vec<u32>,
        noise: Vec<f64>,
    ) -> Result<Self> {
        let width: usize = cardinalities.iter().sum();
        if records_per_db.iter().sum::<usize>() != assignments.len()
            || latent_values.len() != entities * cardinalities.len()
            || noise.len() != entities * width
            || assignments.iter().any(|&z| z >= entities)
        {
            return Err(Error::Argument("inconsistent ground-truth dimensions".into()));
        }
        Ok(GroundTruth {
            entities,
            records_per_db,
            cardinalities,
            assignments,
            latent_values,
            noise,
        })
    }

    pub fn records_per_db(&self) -> &[usize] {
        &self.records_per_db
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn entity_count(&self) -> usize {
        self.entities
    }

    /// Entity of each flat record (0-based).
    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    /// 1-based true code of field `f` for entity `k`.
    pub fn latent_value(&self, k: usize, f: usize) -> u32 {
        self.latent_values[k * self.cardinalities.len() + f] + 1
    }

    /// `β_kf·`, indexed by 0-based value index.
    pub fn noise_distribution(&self, k: usize, f: usize) -> &[f64] {
        let width: usize = self.cardinalities.iter().sum();
        let offset: usize = self.cardinalities[..f].iter().sum();
        &self.noise[k * width + offset..k * width + offset + self.cardinalities[f]]
    }

    /// Number of distinct entities that own at least one record.
    pub fn occupied_entities(&self) -> usize {
        let mut seen = vec![false; self.entity_count()];
        self.assignments.iter().for_each(|&z| seen[z] = true);
        seen.into_iter().filter(|&s| s).count()
    }
}

fn validate(config: &GenConfig) -> Result<()> {
    if config.cardinalities.contains(&0) {
        return Err(Error::Argument("every field needs at least one value".into()));
    }
    if config.layout.records_per_db().is_empty() {
        return Err(Error::Argument("at least one database is required".into()));
    }
    match &config.layout {
        Layout::Standard { entities: 0, records_per_db } if records_per_db.iter().sum::<usize>() > 0 => {
            return Err(Error::Argument("records need at least one entity".into()))
        }
        Layout::SmallCluster { max_per_entity: 0, .. } => {
            return Err(Error::Argument("max records per entity must be at least 1".into()))
        }
        _ => {}
    }
    match &config.noise {
        NoiseModel::Peaked { distortion } => {
            for &v in &config.cardinalities {
                let upper = 1.0 - 1.0 / v as f64;
                let ok = *distortion == 0.0 || (*distortion > 0.0 && *distortion < upper);
                if !ok {
                    return Err(Error::Argument(format!(
                        "distortion {distortion} outside [0, {upper}) for a field with {v} values"
                    )));
                }
            }
        }
        NoiseModel::Dirichlet(alpha) => {
            if alpha.len() != config.cardinalities.len()
                || alpha.iter().zip(&config.cardinalities).any(|(a, &v)| a.len() != v)
            {
                return Err(Error::Argument("Dirichlet concentration shape does not match the fields".into()));
            }
            if alpha.iter().flatten().any(|&a| !(a > 0.0) || !a.is_finite()) {
                return Err(Error::Argument("Dirichlet concentrations must be positive".into()));
            }
        }
    }
    Ok(())
}

/// Samples a corpus and its ground truth. Deterministic given `config.seed`.
pub fn sample_dataset(config: &GenConfig) -> Result<(Corpus, GroundTruth)> {
    validate(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let cards = &config.cardinalities;
    let records_per_db = config.layout.records_per_db().to_vec();
    let n: usize = records_per_db.iter().sum();

    // Allocation first in small-cluster mode, since it decides K.
    let (entities, assignments) = match &config.layout {
        Layout::Standard { entities, .. } => (*entities, None),
        Layout::SmallCluster { max_per_entity, .. } => {
            let mut blocks = Vec::with_capacity(n);
            let mut k = 0;
            while blocks.len() < n {
                let size = rng.gen_range(1..=*max_per_entity).min(n - blocks.len());
                blocks.extend(std::iter::repeat(k).take(size));
                k += 1;
            }
            blocks.shuffle(&mut rng);
            (k, Some(blocks))
        }
    };

    let width: usize = cards.iter().sum();
    let mut latent_values = Vec::with_capacity(entities * cards.len());
    let mut noise = Vec::with_capacity(entities * width);
    for _ in 0..entities {
        for (f, &v) in cards.iter().enumerate() {
            match &config.noise {
                NoiseModel::Peaked { distortion } => {
                    let truth = rng.gen_range(0..v);
                    let off = if v > 1 { distortion / (v - 1) as f64 } else { 0.0 };
                    noise.extend((0..v).map(|u| if u == truth { 1.0 - distortion } else { off }));
                    latent_values.push(truth as u32);
                }
                NoiseModel::Dirichlet(alpha) => {
                    let beta = sample_dirichlet(&alpha[f], &mut rng);
                    latent_values.push(argmax(&beta) as u32);
                    noise.extend(beta);
                }
            }
        }
    }

    let assignments = assignments.unwrap_or_else(|| (0..n).map(|_| rng.gen_range(0..entities)).collect());

    let offsets: Vec<usize> = cards
        .iter()
        .scan(0, |acc, &v| {
            let start = *acc;
            *acc += v;
            Some(start)
        })
        .collect();
    let mut cells = Vec::with_capacity(n * cards.len());
    for &z in &assignments {
        for (f, &v) in cards.iter().enumerate() {
            let beta = &noise[z * width + offsets[f]..z * width + offsets[f] + v];
            cells.push(sample_categorical(beta, &mut rng) as u32);
        }
    }

    let schema = Schema::with_cardinalities(cards)?;
    let corpus = Corpus::from_indices(schema, records_per_db.clone(), cells)?;
    let truth = GroundTruth {
        entities,
        records_per_db,
        cardinalities: cards.clone(),
        assignments,
        latent_values,
        noise,
    };
    Ok((corpus, truth))
}

/// Dirichlet draw through log-gamma variates, using
/// `Gamma(a) = Gamma(a + 1) · U^{1/a}` so that tiny concentrations do not
/// underflow to an all-zero vector.
fn sample_dirichlet(alpha: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    use rand_distr::{Distribution, Gamma};
    let logs: Vec<f64> = alpha
        .iter()
        .map(|&a| {
            let g: f64 = Gamma::new(a + 1.0, 1.0).expect("positive shape").sample(rng);
            let u: f64 = rng.gen::<f64>();
            g.ln() + (1.0 - u).ln() / a
        })
        .collect();
    let norm = crate::numerics::log_sum_exp_nonempty(&logs);
    let mut beta: Vec<f64> = logs.iter().map(|l| (l - norm).exp()).collect();
    let total: f64 = beta.iter().sum();
    beta.iter_mut().for_each(|b| *b /= total);
    beta
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the cumulative total; fall back to the last
    // value with positive mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

pub const TRUTH_FILE: &str = "truth.csv";
pub const LATENT_VALUES_FILE: &str = "latent_values.csv";
pub const NOISE_FILE: &str = "noise.csv";

/// Writes `truth.csv` (`db,record,entity`), `latent_values.csv`
/// (`entity,field,value`) and `noise.csv` (`entity,field,value,probability`)
/// into `dir`. Positions and entity ids are 1-based; fields and values are
/// written as raw strings from `schema`.
pub fn write_ground_truth(truth: &GroundTruth, schema: &Schema, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if schema.cardinalities() != truth.cardinalities {
        return Err(Error::Argument("schema does not match the ground truth fields".into()));
    }

    let truth_path = dir.join(TRUTH_FILE);
    let mut out = CsvOut::create(&truth_path)?;
    out.line(format_args!("db,record,entity"))?;
    let mut n = 0;
    for (d, &rows) in truth.records_per_db.iter().enumerate() {
        for r in 0..rows {
            out.line(format_args!("{},{},{}", d + 1, r + 1, truth.assignments[n] + 1))?;
            n += 1;
        }
    }
    out.finish()?;

    let latent_path = dir.join(LATENT_VALUES_FILE);
    let noise_path = dir.join(NOISE_FILE);
    let mut latent = csv_writer(&latent_path)?;
    let mut noise = csv_writer(&noise_path)?;
    latent
        .write_record(["entity", "field", "value"])
        .map_err(|e| Error::csv(&latent_path, e))?;
    noise
        .write_record(["entity", "field", "value", "probability"])
        .map_err(|e| Error::csv(&noise_path, e))?;
    for k in 0..truth.entity_count() {
        let id = (k + 1).to_string();
        for (f, field) in schema.fields().iter().enumerate() {
            let value = schema.raw_value(f, truth.latent_value(k, f)).expect("validated");
            latent
                .write_record([id.as_str(), &field.name, value])
                .map_err(|e| Error::csv(&latent_path, e))?;
            for (u, p) in truth.noise_distribution(k, f).iter().enumerate() {
                let value = schema.value_at(f, u as u32).expect("validated");
                noise
                    .write_record([id.as_str(), &field.name, value, &p.to_string()])
                    .map_err(|e| Error::csv(&noise_path, e))?;
            }
        }
    }
    latent.flush().map_err(|e| Error::io(&latent_path, e))?;
    noise.flush().map_err(|e| Error::io(&noise_path, e))?;
    Ok(vec![truth_path, latent_path, noise_path])
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

pub(crate) struct CsvOut<'a> {
    path: &'a Path,
    out: BufWriter<File>,
}

impl<'a> CsvOut<'a> {
    pub(crate) fn create(path: &'a Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(CsvOut {
            path,
            out: BufWriter::new(file),
        })
    }

    pub(crate) fn line(&mut self, args: std::fmt::Arguments<'_>) -> Result<()> {
        self.out.write_fmt(args).and_then(|_| self.out.write_all(b"\n")).map_err(|e| Error::io(self.path, e))
    }

    pub(crate) fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(self.path, e))
    }
}
