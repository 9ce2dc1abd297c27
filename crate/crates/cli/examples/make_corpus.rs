//! Regenerate the bundled synthetic corpus:
//! cargo run -p sparseloco-cli --example make_corpus [-- <path> [bytes] [seed]]

use sparseloco::hetero::data::synthetic_corpus;

fn main() {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "data/corpus.txt".to_string());
    let bytes: usize = args
        .next()
        .map(|s| s.parse().expect("bytes must be an integer"))
        .unwrap_or(5_000_000);
    let seed: u64 = args
        .next()
        .map(|s| s.parse().expect("seed must be an integer"))
        .unwrap_or(42);
    let text = synthetic_corpus(seed, bytes);
    if let Some(parent) = std::path::Path::new(&path).parent() {
        std::fs::create_dir_all(parent).expect("create corpus directory");
    }
    std::fs::write(&path, text).expect("write corpus");
    println!("wrote {bytes} bytes (seed {seed}) to {path}");
}
