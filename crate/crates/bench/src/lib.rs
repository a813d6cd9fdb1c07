//! Criterion benchmarks for the tensor kernels, encoder, tokenizer and MinHash; see `benches/`.
