//! Load two CSV databases into a shared categorical encoding.

use std::fs;

use vblink::{load_databases, Schema, SchemaPolicy};

fn main() -> vblink::Result<()> {
    let dir = std::env::temp_dir().join("vblink-encode");
    fs::create_dir_all(&dir).expect("temp dir");
    let census = dir.join("census.csv");
    let survey = dir.join("survey.csv");
    fs::write(&census, "gender,county,birth_year\nM,Adams,1950\nF,Brown,1962\nF,Adams,1962\n").expect("write");
    fs::write(&survey, "gender,county,birth_year\nF,Brown,1962\nM,Clark,1950\n").expect("write");

    let corpus = load_databases(&[&census, &survey], SchemaPolicy::UnionOfObserved)?;
    println!("{} databases, {} records", corpus.database_count(), corpus.total_records());
    for field in corpus.schema().fields() {
        let values: Vec<&str> = field.values().collect();
        println!("{:>10}: {:?}", field.name, values);
    }
    for d in 0..corpus.database_count() {
        for r in 0..corpus.records_per_db()[d] {
            let codes: Vec<u32> = (0..corpus.field_count()).map(|f| corpus.code(d, r, f).unwrap()).collect();
            println!("db {} record {} -> {:?} {:?}", d + 1, r + 1, codes, corpus.decode(d, r)?);
        }
    }

    // A fixed schema keeps codes stable across runs and rejects unseen values.
    let schema_path = dir.join("schema.tsv");
    corpus.schema().write(&schema_path)?;
    let schema = Schema::read(&schema_path)?;
    let again = load_databases(&[&survey], SchemaPolicy::Explicit(schema))?;
    println!("survey alone, fixed schema: first record codes {:?}", again.record(0));
    Ok(())
}
