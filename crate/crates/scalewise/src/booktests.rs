//! Compiles the guide's code snippets as doc-tests so the book can never
//! drift from the library. `cargo test --doc` runs them.

#![allow(unused)]

macro_rules! book_chapter {
    ($name:ident, $path:literal) => {
        #[cfg(doctest)]
        #[doc = include_str!($path)]
        pub struct $name;
    };
}

book_chapter!(Introduction, "../../../book/src/introduction.md");
book_chapter!(TensorsAndAutodiff, "../../../book/src/tensors-and-autodiff.md");
book_chapter!(ResidualQuantization, "../../../book/src/residual-quantization.md");
book_chapter!(TransformerChapter, "../../../book/src/transformer.md");
book_chapter!(SamplingChapter, "../../../book/src/sampling.md");
book_chapter!(TrainingChapter, "../../../book/src/training.md");
book_chapter!(AnalysisChapter, "../../../book/src/analysis-and-benchmarks.md");
book_chapter!(CliChapter, "../../../book/src/cli-and-formats.md");
