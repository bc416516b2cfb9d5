//! Optimiser, metric, training loop and experiment harness.

mod harness;
mod metric;
mod optim;
mod report;
mod run;

pub use harness::{
    ablation_variants, format_layer_set, paper_layer_combos, parse_layer_set, run_ablation, sweep_layers,
    write_ablation_csv, write_sweep_csv, AblationRow, LayerCombo, SweepRow,
};
pub use metric::{normalize_answer, soft_targets, vqa_accuracy};
pub use optim::{adam_step, Adam, AdamState, LrSchedule, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use report::{
    paired_t_test, read_jsonl, report_by_length, report_by_qtype, write_jsonl, write_length_csv, write_qtype_csv,
    LengthRow, PairedTTest, QtypeRow,
};
pub use run::{
    config_fingerprint, dump_attention, evaluate, train, train_from_scratch, AttentionRecord, EpochLog, EvalRecord,
    RunReport, TrainConfig, TrainOutcome,
};
