//! Caption selection on a planted corpus: best candidate per segment,
//! similarity threshold, keyword blocklist, then a threshold sweep.

use flowlab::captions::{
    best_caption, build_dataset, keyword_filter, planted_corpus, segment_count, toy_embedder, FilterConfig,
};
use flowlab::Result;

fn main() -> Result<()> {
    let corpus = planted_corpus(40, 16, 9);
    let cfg = FilterConfig::default();
    let (accepted, summary) = build_dataset(&corpus.records, &corpus.candidates, &cfg, &toy_embedder)?;
    let expected = corpus.expected_summary(&cfg);
    println!(
        "accepted {}, below threshold {}, keyword {} (planted: {}, {}, {})",
        summary.accepted, summary.rejected_threshold, summary.rejected_keyword,
        expected.accepted, expected.rejected_threshold, expected.rejected_keyword,
    );
    println!("hours covered: {:.4}", summary.total_hours);
    for a in accepted.iter().take(3) {
        println!("  {} seg {}: {:.3} {:?}", a.record_id, a.segment, a.similarity, a.caption);
    }

    println!("threshold sweep:");
    for threshold in [0.2, 0.3, 0.45, 0.6, 0.8] {
        let cfg = FilterConfig { threshold, ..FilterConfig::default() };
        let (_, s) = build_dataset(&corpus.records, &corpus.candidates, &cfg, &toy_embedder)?;
        println!("  {threshold:.2}: {} accepted of {}", s.accepted, s.total());
    }

    let audio = [1.0, 0.0, 0.0];
    let cands: [&[f64]; 3] = [&[0.0, 1.0, 0.0], &[0.6, 0.8, 0.0], &[0.3, 0.0, 0.95]];
    let pick = best_caption(&cands, &audio, 0.45)?;
    println!("best of three: {pick:?}");
    println!("blocked: {:?}", keyword_filter("A noisy recording, far and distant", &cfg.keyword_blocklist));
    println!("segments in 95 s at 10 s: {}", segment_count(95.0, 10.0)?);
    let e = toy_embedder("rain on a tin roof")?;
    println!("toy embedding dim {}, norm {:.6}", e.len(), e.iter().map(|v| v * v).sum::<f64>().sqrt());
    Ok(())
}
