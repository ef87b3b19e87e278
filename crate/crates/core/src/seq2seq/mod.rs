//! A small Transformer encoder-decoder: training, forced decoding, search
//! and hidden-state dumps.

pub mod decode;
pub mod layers;
pub mod model;
pub mod states;
pub mod train;

pub use decode::{DecodeMode, Hypothesis, PosteriorSequence};
pub use model::{ModelConfig, Seq2Seq, Vocab, BOS, EOS, UNK};
pub use states::{read_hsd, write_hsd, Side, StateMatrix};
pub use train::{collect_states, dump_states, pair_ids, train, TrainConfig, TrainReport};
