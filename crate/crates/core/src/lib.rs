//! Sparse tensor algebra as streaming dataflow.
//!
//! Tensors are stored as fibertrees ([`storage`]), streamed level by level
//! as token sequences ([`stream`]), and transformed by dataflow blocks
//! ([`blocks`]) wired into graphs ([`graph`]). Graphs run on a
//! cycle-approximate simulator ([`sim`]) and are produced from tensor index
//! notation by the compiler in [`custard`].

pub mod stream;
pub mod storage;
pub mod blocks;
pub mod graph;
pub mod sim;
pub mod custard;
pub mod bench;
