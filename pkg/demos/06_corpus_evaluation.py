"""Score the committed mini-corpus against its ground truth.

An implementation counts as detected when a positive block starts inside one
of its address ranges. Benign samples should produce no positives at all.
"""

from _paths import CORPUS

from tadaspot.rating import RatingConfig
from tadaspot.report import AnalysisConfig, evaluate_corpus

for threshold in (7, 9):
    result = evaluate_corpus(CORPUS / "ground_truth.txt", AnalysisConfig(rating=RatingConfig(threshold=threshold)))
    stats = result.stats
    print(f"threshold {threshold}: overall {stats.overall.detected}/{stats.overall.total} = {stats.overall.rate}%")
    for group in (stats.by_tactic, stats.by_kind, stats.by_string):
        print("   " + "  ".join(f"{k}={t.detected}/{t.total}" for k, t in group.items()))
    missed = [ident for ident, hit in result.outcomes if not hit]
    print(f"   missed: {missed or 'none'}; benign positives: {sum(result.benign_positives.values())}")
