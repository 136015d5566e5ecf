//! Progressive chunk-by-chunk compression of a context into accumulated
//! beacon activations, and decoding on top of them.

mod cache;
mod generate;
mod plan;

pub use cache::{
    accumulate_on_tape, append_context, compress_context, encode_and_accumulate, CompressedCache,
    Encoded, LayerCache, CACHE_KIND,
};
pub use generate::{generate, tail_logits, GenerateOptions, Sampling, Session};
pub use plan::{interleave, interleave_tokens, partition, plan_chunks, ChunkSpec, RatioPolicy};
