from .adherence import LongClipScorer, TextImageScorer, clip_adherence
from .analysis import (
    SimilarityRow,
    analyze_feature_dump,
    format_similarity_table,
    matched_feature_similarity,
)
from .benchmark import BenchmarkIndex, BenchmarkSet, EditSpec, load_benchmark
from .extractors import (
    DinoV3Extractor,
    FeatureExtractorClient,
    ForegroundMaskClient,
    FullForegroundMask,
    LocalContrastMask,
    PatchStatsExtractor,
)
from .judge import JUDGE_SYSTEM_PROMPT, STUDY_QUESTION, Judgement, compile_comparison_image, vlm_2afc
from .nn_metric import ConsistencyReport, NnCorrespondence, dino_matchsim, nn_correspondences
from .report import evaluate_run, format_report

__all__ = [
    "dino_matchsim",
    "nn_correspondences",
    "NnCorrespondence",
    "ConsistencyReport",
    "clip_adherence",
    "TextImageScorer",
    "LongClipScorer",
    "vlm_2afc",
    "Judgement",
    "compile_comparison_image",
    "STUDY_QUESTION",
    "JUDGE_SYSTEM_PROMPT",
    "matched_feature_similarity",
    "analyze_feature_dump",
    "format_similarity_table",
    "SimilarityRow",
    "load_benchmark",
    "BenchmarkIndex",
    "BenchmarkSet",
    "EditSpec",
    "PatchStatsExtractor",
    "DinoV3Extractor",
    "FeatureExtractorClient",
    "ForegroundMaskClient",
    "LocalContrastMask",
    "FullForegroundMask",
    "evaluate_run",
    "format_report",
]
