//! Run the built-in invariant suite and print one line per check.

fn main() {
    let filter = std::env::args().nth(1);
    let results = flowlab::selftest::run(filter.as_deref());
    for r in &results {
        println!("{}", r.line());
    }
    if results.iter().any(|r| !r.passed) {
        std::process::exit(1);
    }
}
