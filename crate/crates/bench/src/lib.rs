//! Criterion benchmarks live in `benches/`: `solvers` times outer
//! iterations and single response computations, `nn` the MLP passes.
