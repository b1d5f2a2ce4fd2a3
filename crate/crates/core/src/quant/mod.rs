//! Grouped low-bit quantization, grouped low-rank adapters and the
//! recovery fine-tuning loop that trains them on a frozen quantized base.

pub mod adapter;
pub mod quantize;
pub mod recovery;

pub use adapter::{
    adapter_delta, block_indicator, merge_adapters, quantized_linear_forward, AdapterInit, AdapterPair,
    DEFAULT_ALPHA,
};
pub use quantize::{dequantize, effective_blocks, quantize_grouped, QuantGroupedMatrix};
pub use recovery::{
    finetune_recovery, init_adapters, load_quantized, merge_recovered, quantize_model, save_quantized,
    AdapterSet, QuantConfig, QuantizedModel, RecoveryConfig, RecoveryMode, RecoveryReport,
};
