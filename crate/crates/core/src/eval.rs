//! Linkage decisions from a fitted state and their pairwise scores.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Schema};
use crate::engine::VariationalState;
use crate::error::{Error, Result};
use crate::genmodel::{GroundTruth, LATENT_VALUES_FILE, NOISE_FILE, TRUTH_FILE};

/// MAP entity per flat record. Labels are 0-based in memory and written
/// 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Linkage {
    pub map_entity: Vec<usize>,
    pub max_prob: Vec<f64>,
    pub entity_count_estimate: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkageScore {
    pub pairwise_precision: f64,
    pub pairwise_recall: f64,
    pub pairwise_f1: f64,
    pub true_entity_count: usize,
    pub estimated_entity_count: usize,
}

/// Argmax of every responsibility row; ties go to the smallest entity index.
pub fn map_linkage(state: &VariationalState) -> Linkage {
    let mut map_entity = Vec::with_capacity(state.records());
    let mut max_prob = Vec::with_capacity(state.records());
    for n in 0..state.records() {
        let (k, p) = state
            .phi_row(n)
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &p)| if p > best.1 { (k, p) } else { best });
        map_entity.push(k);
        max_prob.push(p);
    }
    Linkage {
        entity_count_estimate: distinct(&map_entity),
        map_entity,
        max_prob,
    }
}

fn distinct(labels: &[usize]) -> usize {
    let mut seen: Vec<usize> = labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

fn pairs(count: u64) -> u64 {
    count * count.saturating_sub(1) / 2
}

/// Pairwise precision, recall and F1 of two labelings of the same records,
/// from the label contingency table. An empty predicted-positive set gives
/// precision 1 and an empty true-positive set gives recall 1.
pub fn pairwise_metrics(predicted: &[usize], truth: &[usize]) -> Result<LinkageScore> {
    if predicted.len() != truth.len() {
        return Err(Error::Argument(format!(
            "{} predicted labels for {} true labels",
            predicted.len(),
            truth.len()
        )));
    }
    let mut joint: HashMap<(usize, usize), u64> = HashMap::new();
    let mut pred_sizes: HashMap<usize, u64> = HashMap::new();
    let mut true_sizes: HashMap<usize, u64> = HashMap::new();
    for (&p, &t) in predicted.iter().zip(truth) {
        *joint.entry((p, t)).or_default() += 1;
        *pred_sizes.entry(p).or_default() += 1;
        *true_sizes.entry(t).or_default() += 1;
    }
    let tp: u64 = joint.values().map(|&c| pairs(c)).sum();
    let pred_pos: u64 = pred_sizes.values().map(|&c| pairs(c)).sum();
    let true_pos: u64 = true_sizes.values().map(|&c| pairs(c)).sum();

    let precision = if pred_pos == 0 { 1.0 } else { tp as f64 / pred_pos as f64 };
    let recall = if true_pos == 0 { 1.0 } else { tp as f64 / true_pos as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(LinkageScore {
        pairwise_precision: precision,
        pairwise_recall: recall,
        pairwise_f1: f1,
        true_entity_count: true_sizes.len(),
        estimated_entity_count: pred_sizes.len(),
    })
}

/// Scores a linkage against generator ground truth.
pub fn score_linkage(predicted: &Linkage, truth: &GroundTruth) -> Result<LinkageScore> {
    pairwise_metrics(&predicted.map_entity, truth.assignments())
}

/// Mean-field co-cluster probability `Σ_k φ_ik φ_jk` for flat record pairs.
pub fn posterior_cocluster_estimate(state: &VariationalState, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|&(i, j)| {
            if i >= state.records() || j >= state.records() {
                return Err(Error::Index(format!("record pair ({i}, {j}) of {}", state.records())));
            }
            Ok(state.phi_row(i).iter().zip(state.phi_row(j)).map(|(a, b)| a * b).sum())
        })
        .collect()
}

/// Writes `db,record,entity,max_prob` rows, positions and labels 1-based.
pub fn write_linkage_csv(out: impl Write, corpus: &Corpus, linkage: &Linkage) -> std::io::Result<()> {
    let mut out = BufWriter::new(out);
    writeln!(out, "db,record,entity,max_prob")?;
    let mut n = 0;
    for (d, &rows) in corpus.records_per_db().iter().enumerate() {
        for r in 0..rows {
            writeln!(out, "{},{},{},{}", d + 1, r + 1, linkage.map_entity[n] + 1, linkage.max_prob[n])?;
            n += 1;
        }
    }
    out.flush()
}

/// A labeling read from a `db,record,entity[,...]` file, keyed by
/// 1-based `(db, record)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordLabels {
    pub positions: Vec<(usize, usize)>,
    /// 1-based entity ids as written.
    pub labels: Vec<usize>,
}

impl RecordLabels {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(BufReader::new(file));
        let header = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
        if header.len() < 3 || &header[0] != "db" || &header[1] != "record" || &header[2] != "entity" {
            return Err(Error::format("labels", path, "header must start with db,record,entity"));
        }
        let mut positions = Vec::new();
        let mut labels = Vec::new();
        for (row, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            let field = |i: usize| -> Result<usize> {
                rec[i]
                    .parse::<usize>()
                    .ok()
                    .filter(|&x| x >= 1)
                    .ok_or_else(|| Error::format("labels", path, format!("row {}: `{}` is not a 1-based id", row + 1, &rec[i])))
            };
            positions.push((field(0)?, field(1)?));
            labels.push(field(2)?);
        }
        Ok(RecordLabels { positions, labels })
    }

    /// Pairs labels from two files by record position; both must cover the
    /// same records.
    pub fn align(predicted: &RecordLabels, truth: &RecordLabels) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut by_position: HashMap<(usize, usize), usize> = HashMap::with_capacity(truth.labels.len());
        for (&pos, &label) in truth.positions.iter().zip(&truth.labels) {
            if by_position.insert(pos, label).is_some() {
                return Err(Error::Argument(format!("record {pos:?} listed twice in the truth")));
            }
        }
        if predicted.positions.len() != by_position.len() {
            return Err(Error::Argument(format!(
                "linkage covers {} records, truth covers {}",
                predicted.positions.len(),
                by_position.len()
            )));
        }
        let mut truth_labels = Vec::with_capacity(predicted.labels.len());
        for pos in &predicted.positions {
            let label = by_position
                .remove(pos)
                .ok_or_else(|| Error::Argument(format!("record {pos:?} is missing from the truth or repeated")))?;
            truth_labels.push(label);
        }
        Ok((predicted.labels.clone(), truth_labels))
    }
}

/// Reads ground truth written by [`crate::genmodel::write_ground_truth`].
/// Records in `truth.csv` must be in database-major order with record
/// numbers running from 1 in each database.
pub fn read_ground_truth(dir: impl AsRef<Path>, schema: &Schema) -> Result<GroundTruth> {
    let dir = dir.as_ref();
    let truth_path = dir.join(TRUTH_FILE);
    let labels = RecordLabels::read(&truth_path)?;
    let mut records_per_db: Vec<usize> = Vec::new();
    for &(d, r) in &labels.positions {
        if d < records_per_db.len() {
            return Err(Error::format("truth", &truth_path, "records are not in database order"));
        }
        records_per_db.resize(d, 0);
        if r != records_per_db[d - 1] + 1 {
            return Err(Error::format("truth", &truth_path, "records are not numbered consecutively"));
        }
        records_per_db[d - 1] = r;
    }
    let assignments: Vec<usize> = labels.labels.iter().map(|l| l - 1).collect();

    let cards = schema.cardinalities();
    let f_count = cards.len();
    let width: usize = cards.iter().sum();
    let offsets: Vec<usize> = cards.iter().scan(0, |a, &v| {
        let s = *a;
        *a += v;
        Some(s)
    }).collect();

    let latent_path = dir.join(LATENT_VALUES_FILE);
    let mut latent: Vec<Option<u32>> = Vec::new();
    for row in read_rows(&latent_path, &["entity", "field", "value"])? {
        let k = parse_id(&latent_path, &row[0])?;
        let f = field_index(schema, &latent_path, &row[1])?;
        let v = schema
            .index_of(f, &row[2])
            .ok_or_else(|| Error::format("latent values", &latent_path, format!("unknown value `{}`", &row[2])))?;
        if latent.len() < k * f_count {
            latent.resize(k * f_count, None);
        }
        latent[(k - 1) * f_count + f] = Some(v);
    }
    let entities = if f_count == 0 {
        assignments.iter().max().map_or(0, |m| m + 1)
    } else {
        latent.len() / f_count
    };
    let latent_values = latent
        .into_iter()
        .collect::<Option<Vec<u32>>>()
        .ok_or_else(|| Error::format("latent values", &latent_path, "an entity is missing a field"))?;

    let noise_path = dir.join(NOISE_FILE);
    let mut noise = vec![f64::NAN; entities * width];
    for row in read_rows(&noise_path, &["entity", "field", "value", "probability"])? {
        let k = parse_id(&noise_path, &row[0])?;
        let f = field_index(schema, &noise_path, &row[1])?;
        let v = schema
            .index_of(f, &row[2])
            .ok_or_else(|| Error::format("noise", &noise_path, format!("unknown value `{}`", &row[2])))?;
        let p: f64 = row[3]
            .parse()
            .map_err(|_| Error::format("noise", &noise_path, format!("bad probability `{}`", &row[3])))?;
        let slot = noise
            .get_mut((k - 1) * width + offsets[f] + v as usize)
            .ok_or_else(|| Error::format("noise", &noise_path, format!("entity {k} has no latent values")))?;
        *slot = p;
    }
    if noise.iter().any(|p| p.is_nan()) {
        return Err(Error::format("noise", &noise_path, "incomplete noise table"));
    }

    GroundTruth::new(entities, records_per_db, cards, assignments, latent_values, noise)
}

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let got = reader.headers().map_err(|e| Error::csv(path, e))?;
    if got.iter().ne(header.iter().copied()) {
        return Err(Error::format("header", path, format!("expected {}", header.join(","))));
    }
    reader.records().map(|r| r.map_err(|e| Error::csv(path, e))).collect()
}

fn parse_id(path: &Path, s: &str) -> Result<usize> {
    s.parse::<usize>()
        .ok()
        .filter(|&x| x >= 1)
        .ok_or_else(|| Error::format("entity id", path, format!("`{s}` is not a 1-based id")))
}

fn field_index(schema: &Schema, path: &Path, name: &str) -> Result<usize> {
    schema
        .field_names()
        .iter()
        .position(|f| *f == name)
        .ok_or_else(|| Error::format("field", path, format!("unknown field `{name}`")))
}

/// Flat JSON object with the five score fields.
pub fn write_score_json(path: impl AsRef<Path>, score: &LinkageScore) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(score).expect("plain struct serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::HyperParams;
    use proptest::prelude::*;

    fn state_with_rows(rows: &[&[f64]]) -> VariationalState {
        let k = rows[0].len();
        let schema = Schema::with_cardinalities(&[]).unwrap();
        let corpus = Corpus::from_codes(schema, vec![vec![vec![]; rows.len()]]).unwrap();
        let hp = HyperParams::new(k, vec![]).unwrap();
        VariationalState::from_parts(&corpus, &hp, rows.concat(), vec![]).unwrap()
    }

    #[test]
    fn map_argmax_and_ties() {
        let s = state_with_rows(&[&[0.2, 0.7, 0.1], &[0.5, 0.5, 0.0], &[0.1, 0.2, 0.7]]);
        let l = map_linkage(&s);
        assert_eq!(l.map_entity, vec![1, 0, 2]);
        assert_eq!(l.max_prob, vec![0.7, 0.5, 0.7]);
        assert_eq!(l.entity_count_estimate, 3);

        let single = state_with_rows(&[&[1.0], &[1.0]]);
        let l = map_linkage(&single);
        assert_eq!(l.map_entity, vec![0, 0]);
        assert_eq!(l.entity_count_estimate, 1);
    }

    #[test]
    fn pairwise_examples() {
        let perfect = pairwise_metrics(&[4, 4, 9], &[0, 0, 1]).unwrap();
        assert_eq!(
            (perfect.pairwise_precision, perfect.pairwise_recall, perfect.pairwise_f1),
            (1.0, 1.0, 1.0)
        );
        // truth {a,b},{c}
        let merged = pairwise_metrics(&[0, 0, 0], &[0, 0, 1]).unwrap();
        assert!((merged.pairwise_precision - 1.0 / 3.0).abs() <= 1e-15);
        assert_eq!(merged.pairwise_recall, 1.0);
        assert!((merged.pairwise_f1 - 0.5).abs() <= 1e-15);
        assert_eq!((merged.true_entity_count, merged.estimated_entity_count), (2, 1));

        let split = pairwise_metrics(&[0, 1, 2], &[0, 0, 1]).unwrap();
        assert_eq!(
            (split.pairwise_precision, split.pairwise_recall, split.pairwise_f1),
            (1.0, 0.0, 0.0)
        );

        let singletons = pairwise_metrics(&[0, 1, 2], &[5, 6, 7]).unwrap();
        assert_eq!(singletons.pairwise_f1, 1.0);
        assert!(pairwise_metrics(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn cocluster_estimates() {
        let s = state_with_rows(&[&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[1.0 / 3.0; 3], &[1.0 / 3.0; 3]]);
        let got = posterior_cocluster_estimate(&s, &[(0, 1), (2, 3)]).unwrap();
        assert_eq!(got[0], 1.0);
        assert!((got[1] - 1.0 / 3.0).abs() <= 1e-15);
        let t = state_with_rows(&[&[0.7, 0.3], &[0.4, 0.6]]);
        let got = posterior_cocluster_estimate(&t, &[(0, 1), (1, 0)]).unwrap();
        assert!((got[0] - 0.46).abs() <= 1e-15);
        assert_eq!(got[0], got[1]);
        assert!(matches!(posterior_cocluster_estimate(&t, &[(0, 2)]), Err(Error::Index(_))));
    }

    #[test]
    fn linkage_file_round_trip() {
        let schema = Schema::with_cardinalities(&[]).unwrap();
        let corpus = Corpus::from_codes(schema, vec![vec![vec![]; 2], vec![vec![]]]).unwrap();
        let linkage = Linkage {
            map_entity: vec![0, 2, 0],
            max_prob: vec![0.9, 0.5, 1.0],
            entity_count_estimate: 2,
        };
        let mut buf = Vec::new();
        write_linkage_csv(&mut buf, &corpus, &linkage).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "db,record,entity,max_prob\n1,1,1,0.9\n1,2,3,0.5\n2,1,1,1\n"
        );
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("linkage.csv");
        std::fs::write(&path, buf).unwrap();
        let labels = RecordLabels::read(&path).unwrap();
        assert_eq!(labels.positions, vec![(1, 1), (1, 2), (2, 1)]);
        assert_eq!(labels.labels, vec![1, 3, 1]);

        let shuffled = RecordLabels {
            positions: vec![(2, 1), (1, 1), (1, 2)],
            labels: vec![7, 7, 8],
        };
        let (p, t) = RecordLabels::align(&labels, &shuffled).unwrap();
        assert_eq!(p, vec![1, 3, 1]);
        assert_eq!(t, vec![7, 8, 7]);
        let short = RecordLabels {
            positions: vec![(1, 1)],
            labels: vec![1],
        };
        assert!(RecordLabels::align(&labels, &short).is_err());
    }

    proptest! {
        #[test]
        fn metrics_invariant_to_relabeling_and_order(
            pairs in prop::collection::vec((0usize..5, 0usize..5), 0..40),
            shift in 1usize..100,
            seed in any::<u64>(),
        ) {
            let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let base = pairwise_metrics(&pred, &truth).unwrap();
            let relabeled: Vec<usize> = pred.iter().map(|p| (p * 7 + shift) % 1000).collect();
            prop_assert_eq!(pairwise_metrics(&relabeled, &truth).unwrap(), base);

            use rand::{seq::SliceRandom, SeedableRng};
            let mut idx: Vec<usize> = (0..pred.len()).collect();
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let p2: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
            let t2: Vec<usize> = idx.iter().map(|&i| truth[i]).collect();
            prop_assert_eq!(pairwise_metrics(&p2, &t2).unwrap(), base);

            for v in [base.pairwise_precision, base.pairwise_recall, base.pairwise_f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn map_linkage_invariances(
            rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 1..10),
            rot in 0usize..4,
        ) {
            let normalized: Vec<Vec<f64>> = rows.iter().map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(|x| x / s).collect()
            }).collect();
            let refs: Vec<&[f64]> = normalized.iter().map(Vec::as_slice).collect();
            let state = state_with_rows(&refs);
            let base = map_linkage(&state);

            // Order-preserving transform of each row (squaring, renormalized).
            let squared: Vec<Vec<f64>> = normalized.iter().map(|r| {
                let s: f64 = r.iter().map(|x| x * x).sum();
                r.iter().map(|x| x * x / s).collect()
            }).collect();
            let refs: Vec<&[f64]> = squared.iter().map(Vec::as_slice).collect();
            prop_assert_eq!(&map_linkage(&state_with_rows(&refs)).map_entity, &base.map_entity);

            // Equivariance under relabeling, away from ties.
            let perm: Vec<usize> = (0..4).map(|k| (k + rot) % 4).collect();
            let permuted = map_linkage(&state.permute_entities(&perm).unwrap());
            for (n, row) in normalized.iter().enumerate() {
                let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if row.iter().filter(|&&x| x == top).count() == 1 {
                    prop_assert_eq!(permuted.map_entity[n], perm[base.map_entity[n]]);
                }
            }

            let all: Vec<(usize, usize)> = (0..refs.len()).flat_map(|i| (0..refs.len()).map(move |j| (i, j))).collect();
            let co = posterior_cocluster_estimate(&state, &all).unwrap();
            for (idx, &(i, j)) in all.iter().enumerate() {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&co[idx]));
                prop_assert_eq!(co[idx], co[j * refs.len() + i]);
            }
        }
    }
}
