//! Segmentation into overlapping chunks, the stacked intra/inter-chunk
//! recurrent blocks, and overlap-add back to a sequence.

mod block;
mod chunk;
mod norm;

pub use block::{
    dprnn_block, dprnn_stack, dprnn_stack_eval, inter_chunk_pass, intra_chunk_pass, BlockVars,
    DprnnBlockParams, PathParams, PathVars,
};
pub use chunk::{choose_chunk_size, overlap_add, segment, ChunkLayout, ChunkTensor};
pub use norm::{LayerNormStats, LN_EPS};
