use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoder::LookupEmbedder;

fn clean_text(len: usize) -> String {
    let mut s = String::new();
    let mut i = 0;
    while s.len() < len {
        s.push_str(&format!("word{i} "));
        i += 1;
    }
    s.trim_end().to_string() + "."
}

#[test]
fn quality_examples() {
    let cfg = CurationConfig {
        min_chars: 10,
        ..Default::default()
    };
    let short = PairRecord::new("ok", clean_text(50));
    assert_eq!(quality_filter(&short, &cfg), Verdict::Drop(DropReason::TooShort));

    let repeated = vec!["the same line of text"; 10].join("\n");
    assert!((dup_line_fraction(&repeated) - 0.9).abs() < 1e-15);
    let dup = PairRecord::new(clean_text(40), repeated);
    assert_eq!(quality_filter(&dup, &cfg), Verdict::Drop(DropReason::DupLines));

    let clean = PairRecord::new(clean_text(200), clean_text(200));
    assert_eq!(quality_filter(&clean, &CurationConfig::default()), Verdict::Keep);

    let long = PairRecord::new(clean_text(30), clean_text(25_000));
    assert_eq!(
        quality_filter(&long, &CurationConfig::default()),
        Verdict::Drop(DropReason::TooLong)
    );

    let loops = PairRecord::new(clean_text(30), "a b c a b c a b c a b c".to_string());
    assert_eq!(
        quality_filter(&loops, &CurationConfig::default()),
        Verdict::Drop(DropReason::DupNgrams)
    );
}

#[test]
fn refine_examples() {
    assert_eq!(refine_text("Title\nA full sentence here."), "A full sentence here.");
    assert_eq!(refine_text("  Two words.  \nAnd an unfinished"), "Two words.");
    assert_eq!(refine_text("what is rust"), "what is rust");
    let rec = PairRecord::new("Only\nOne\nWord", "A real passage.");
    assert!(refine(&rec).is_none());
}

#[test]
fn refine_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pieces = ["alpha", "beta.", "gamma!", "delta?", "eps", "\n", "\n", "  ", "zeta\"", "eta)."];
    for _ in 0..1000 {
        let n = rng.gen_range(0..30);
        let text: String = (0..n)
            .map(|_| format!("{} ", pieces[rng.gen_range(0..pieces.len())]))
            .collect();
        let once = refine_text(&text);
        assert_eq!(refine_text(&once), once, "input {text:?}");
    }
}

#[test]
fn near_dedup_examples() {
    let cfg = CurationConfig::default();
    let a = PairRecord::new("one two three four five", "six seven eight nine ten");
    let out = near_dedup(vec![a.clone(), a.clone()], &cfg);
    assert_eq!(out, vec![a]);

    // 4 and 5 shingles sharing 3: exact Jaccard 3/6.
    let x = PairRecord::new("w1 w2 w3 w4", "w5 w6");
    let y = PairRecord::new("w1 w2 w3 w4", "w5 z6 z7");
    let j = jaccard(&record_shingles(&x), &record_shingles(&y));
    assert!((j - 0.5).abs() < 1e-15, "{j}");
    assert_eq!(near_dedup(vec![x.clone(), y.clone()], &cfg), vec![x, y]);
}

#[test]
fn near_dedup_preserves_order_and_keeps_first() {
    let cfg = CurationConfig::default();
    let base = "the quick brown fox jumps over the lazy dog near the river bank today";
    let recs = vec![
        PairRecord::new("first unique query here", "completely different passage text one"),
        PairRecord::new(base, "a b c d e f g h i j k l m n o p"),
        PairRecord::new("second unique query here", "another passage with other words"),
        PairRecord::new(base, "a b c d e f g h i j k l m n o p"),
    ];
    let out = near_dedup(recs.clone(), &cfg);
    assert_eq!(out, vec![recs[0].clone(), recs[1].clone(), recs[2].clone()]);
}

#[test]
fn config_validation() {
    assert!(CurationConfig::default().validate().is_ok());
    let bad = CurationConfig {
        lsh_bands: 30,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
    let bad = CurationConfig {
        dedup_jaccard_threshold: 1.0,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
}

fn lookup(records: &[PairRecord], rng: &mut ChaCha8Rng) -> LookupEmbedder {
    let mut e = LookupEmbedder::default();
    for r in records {
        e.insert(r.q.clone(), (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
        e.insert(r.p.clone(), (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
    }
    e
}

#[test]
fn sample_size_one_keeps_everything() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let recs: Vec<PairRecord> = (0..20)
        .map(|i| PairRecord::new(format!("q{i}"), format!("p{i}")))
        .collect();
    let emb = lookup(&recs, &mut rng);
    let cfg = CurationConfig {
        consistency_sample_size: 1,
        consistency_top_k: 1,
        ..Default::default()
    };
    assert_eq!(consistency_filter(recs.clone(), &emb, &cfg).unwrap(), recs);
}

#[test]
fn consistency_ranks_match_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 300;
    let q: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let p: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let cfg = CurationConfig {
        consistency_sample_size: 120,
        seed: 5,
        ..Default::default()
    };
    let sampled = consistency_sample(n, &cfg).unwrap();
    let ranks = consistency_ranks(&q, &p, &sampled).unwrap();
    for i in 0..n {
        let mut pool = candidate_pool(i, &sampled);
        assert_eq!(pool.len(), 120);
        let sims: Vec<(f64, usize)> = pool
            .drain(..)
            .map(|j| {
                let dot: f64 = q[i].iter().zip(&p[j]).map(|(a, b)| a * b).sum();
                let nq: f64 = q[i].iter().map(|v| v * v).sum::<f64>().sqrt();
                let np: f64 = p[j].iter().map(|v| v * v).sum::<f64>().sqrt();
                (dot / (nq * np), j)
            })
            .collect();
        let mut sorted = sims.clone();
        sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let pos = sorted.iter().position(|&(_, j)| j == i).unwrap() + 1;
        assert_eq!(ranks[i], pos);
    }
}

#[test]
fn oversized_sample_is_a_config_error() {
    let cfg = CurationConfig {
        consistency_sample_size: 10,
        ..Default::default()
    };
    assert!(matches!(consistency_sample(5, &cfg), Err(Error::Config(_))));
}

#[test]
fn pipeline_logs_drops_by_line() {
    let cfg = CurationConfig::default();
    let good = PairRecord::new(clean_text(40), clean_text(80));
    let recs = vec![
        good.clone(),
        PairRecord::new("ok", clean_text(80)),
        good.clone(),
        PairRecord::new("Heading\nSubheading\nFootnotes", clean_text(80)),
    ];
    let out = run_pipeline(recs, None, &cfg).unwrap();
    assert_eq!(out.kept, vec![good]);
    let reasons: Vec<(usize, DropReason)> = out.dropped.iter().map(|d| (d.line, d.reason)).collect();
    assert_eq!(
        reasons,
        vec![
            (2, DropReason::TooShort),
            (3, DropReason::NearDuplicate),
            (4, DropReason::EmptyAfterRefine)
        ]
    );
}

#[test]
fn jsonl_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.jsonl");
    let recs = vec![PairRecord::new("a", "b"), PairRecord::new("c\nd", "é")];
    write_jsonl(&path, &recs).unwrap();
    assert_eq!(read_jsonl::<PairRecord>(&path).unwrap(), recs);
    std::fs::write(&path, "{\"q\": 1}\n").unwrap();
    let err = read_jsonl::<PairRecord>(&path).unwrap_err();
    assert!(err.to_string().contains("line 1"), "{err}");
}

proptest::proptest! {
    #[test]
    fn refine_is_idempotent_on_arbitrary_text(text in "(?s).{0,200}") {
        let once = refine_text(&text);
        proptest::prop_assert_eq!(refine_text(&once), once);
    }

    #[test]
    fn jaccard_is_symmetric_and_bounded(a in "[a-d ]{0,40}", b in "[a-d ]{0,40}") {
        let (x, y) = (PairRecord::new(a, "p"), PairRecord::new(b, "p"));
        let (sx, sy) = (record_shingles(&x), record_shingles(&y));
        let j = jaccard(&sx, &sy);
        proptest::prop_assert_eq!(j, jaccard(&sy, &sx));
        proptest::prop_assert!((0.0..=1.0).contains(&j));
    }
}
