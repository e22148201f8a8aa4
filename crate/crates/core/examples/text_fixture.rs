//! Writes the word-based text fixture (corpus, training and test JSONL).
//!
//! `cargo run -p unidex-core --example text_fixture -- OUT_DIR [seed]`

use std::fs;
use std::path::PathBuf;

use unidex_core::synthetic::text_fixture;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().ok_or("usage: text_fixture OUT_DIR [seed]")?);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);
    let fixture = text_fixture(8, 4, 5, seed)?;
    fs::create_dir_all(&out)?;

    let corpus: Vec<String> = fixture
        .corpus
        .iter()
        .map(serde_json::to_string)
        .collect::<Result<_, _>>()?;
    fs::write(out.join("corpus.jsonl"), corpus.join("\n") + "\n")?;
    let train: Vec<String> = fixture.train.iter().map(|t| t.to_json()).collect();
    fs::write(out.join("train.jsonl"), train.join("\n") + "\n")?;
    let test: Vec<String> = fixture
        .test
        .iter()
        .map(serde_json::to_string)
        .collect::<Result<_, _>>()?;
    fs::write(out.join("test.jsonl"), test.join("\n") + "\n")?;
    println!(
        "wrote {} docs, {} training instances, {} test queries to {}",
        fixture.corpus.len(),
        fixture.train.len(),
        fixture.test.len(),
        out.display()
    );
    Ok(())
}
