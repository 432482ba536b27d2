from .analysis import (
    ALIGN_HEADER,
    FAILED,
    LENGTH_HEADER,
    PROFILE_HEADER,
    AlignmentHistogram,
    align_summary_bins,
    corpus_rouge,
    length_bucket_report,
    needle_recall,
    profile_memory_time,
    segment_bounds,
    split_sentences,
    strip_special,
    write_csv,
)
from .decoding import beam_decode, beam_search, exhaustive_search, greedy_decode
from .rouge import RougeScore, lcs_length, rouge_l, rouge_n
