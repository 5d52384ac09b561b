//! Retrieval-based response selection with a dual LSTM encoder, trained
//! with in-batch hard negatives that may include the input context itself,
//! so the model stops ranking echoes of the context at the top.
pub mod checkpoint;
pub mod encoder;
pub mod eval;
pub mod mining;
pub mod numerics;
pub mod synthetic;
pub mod text;
pub mod training;
