//! Parse a MovieLens-1M style pair of files, binarize, split 8:1:1 and
//! partition the test users by training history.
//!
//! `cargo run --example movielens -- ratings.dat movies.dat`; without
//! arguments the bundled test fixture is used.

use std::path::PathBuf;

use sasrecllm::data::{parse_movielens, prepare_bundle, record_stats};

fn main() -> Result<(), sasrecllm::Error> {
    let fixture = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/movielens");
    let mut args = std::env::args().skip(1).map(PathBuf::from);
    let ratings = args.next().unwrap_or_else(|| fixture.join("ratings.dat"));
    let movies = args.next().unwrap_or_else(|| fixture.join("movies.dat"));

    let parsed = parse_movielens(&ratings, &movies)?;
    println!(
        "{} lines: {} malformed, {} without a title",
        parsed.lines, parsed.rejected, parsed.missing_title
    );
    let s = record_stats(&parsed.records);
    println!("{} ratings from {} users on {} items, {} liked", s.records, s.users, s.items, s.positives);

    let b = prepare_bundle(&parsed.records)?;
    println!(
        "train {} / validation {} / test {} (warm {}, cold {})",
        b.train.len(),
        b.validation.len(),
        b.test.len(),
        b.warm_test.len(),
        b.cold_test.len()
    );
    let longest = b.test.iter().max_by_key(|e| e.history.len()).expect("nonempty test split");
    println!(
        "longest test history: user {} with {} liked items before rating \"{}\"",
        longest.user,
        longest.history.len(),
        b.title(longest.item)
    );
    println!("bundle hash {:016x}", b.content_hash());
    Ok(())
}
