//! Criterion benchmarks for the convolution kernels live in `benches/`.
