//! Synthetic corpus, optimizers, training and adaptation loops, evaluation and checkpoints.

mod batch;
mod checkpoint;
mod config;
mod eval;
mod optim;
mod synth;
mod train;
mod vocab;

pub use batch::{batch_loss, training_batch, Batch};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_spec, save_checkpoint, ModelSpec, MAGIC, VERSION,
};
pub use config::{DataConfig, RunConfig};
pub use eval::{embed_scenes, embed_strings, evaluate, recall_at_k, EvalMetrics, Embeddings};
pub use optim::{
    optimizer_step, Moments, OptimizerConfig, OptimizerKind, OptimizerState, ScheduleConfig, TRUST_RATIO_MAX,
};
pub use synth::{
    all_tags, gen_corpus, held_out, tag_prompt, tag_text, CorpusStream, Domain, SceneObject, Split, SyntheticScene,
    CHANNELS, IMAGE_SIZE,
};
pub use train::{
    evaluate_loss, prepare_adapt_model, train, train_step, StepMetrics, TrainOutcome, CHECKPOINT_FILE,
    MAX_LOGIT_SCALE, METRICS_FILE,
};
pub use vocab::{Vocab, COLORS, EOS, PAD, SHAPES};
