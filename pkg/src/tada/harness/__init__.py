from .corpus import (
    Manifest,
    OracleDecoder,
    SynthConfig,
    TemplateBank,
    UttRecord,
    gen_corpus,
    load_corpus,
    oracle_decode,
    save_corpus,
    utterance_arrays,
)
from .evaluate import EvalCase, MetricsReport, benchmark, edit_distance, evaluate, run_tts_cases
from .recipes import (
    TrainBudget,
    TrainedStack,
    aligner_pairs,
    build_prompts,
    extract_alignments,
    sample_eval_texts,
    train_full_stack,
)

__all__ = [
    "EvalCase",
    "Manifest",
    "MetricsReport",
    "OracleDecoder",
    "SynthConfig",
    "TemplateBank",
    "TrainBudget",
    "TrainedStack",
    "UttRecord",
    "aligner_pairs",
    "benchmark",
    "build_prompts",
    "edit_distance",
    "evaluate",
    "extract_alignments",
    "gen_corpus",
    "load_corpus",
    "oracle_decode",
    "run_tts_cases",
    "sample_eval_texts",
    "save_corpus",
    "train_full_stack",
    "utterance_arrays",
]
