"""
Scanpath metrics
================

String metrics on object sequences, MultiMatch on object centres, and the
behavioural "Overall" difference, recomputed from published behaviour
percentages.
"""

from dataclasses import asdict

from oat.datasets import GridLayout
from oat.metrics import behavior_stats, classify_saccades, fed, multimatch, overall_difference, sequence_score, stats_from_percentages

a = [3, 5, 7, 7, 12]
b = [3, 5, 9, 12]
print("FED:", fed(a, b))
print("SS:", round(sequence_score(a, b), 3))

# search / revisit / refix counts and whether the path ends on the target
print("saccades of [1, 2, 2, 1, 9] with target 9:", classify_saccades([1, 2, 2, 1, 9], 9))
print(behavior_stats([[1, 2, 2, 1, 9], [4, 9]], 9))

# MultiMatch works on coordinates, so map objects to their cell centres
layout = GridLayout.regular(3, 4)
mm = multimatch([layout.center(o) for o in a], [layout.center(o) for o in b], layout.diag)
print("MultiMatch:", {k: round(v, 3) for k, v in asdict(mm).items()}, "average", round(mm.average, 3))

# Overall = mean relative difference over the five behavioural fields
human = stats_from_percentages(85.8, 2.3, 11.9, 91.7, 8.4)
rows = {
    "Random": (95.5, 3.6, 0.9, 1.1, 8.8),
    "Center": (86.5, 10.3, 3.2, 1.3, 8.9),
    "OAT": (85.3, 3.0, 11.7, 89.4, 8.5),
}
for name, row in rows.items():
    print(f"{name:>7}: Overall {overall_difference(stats_from_percentages(*row), human):.3f}")
