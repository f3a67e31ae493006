"""Detection metrics on a small score set, plus the score file round trip."""

import tempfile
from pathlib import Path

from ifom import metrics

s = metrics.ScoreSet(attack_scores=[0.9, 0.8, 0.4], bonafide_scores=[0.1, 0.2, 0.6])

curve = metrics.roc(s)
for thr, fpr, tpr in curve.points():
    print(f"thr={thr:>5}  fpr={fpr:.3f}  tpr={tpr:.3f}")

print(metrics.eer(s))              # 1/3
print(metrics.auc(s))              # 8/9: 8 of 9 attack/bona fide pairs ranked correctly
print(metrics.ace(s, 0.5))         # 1/3: one miss among attacks, one false alarm among bona fide
print(metrics.tdr_at_fdr(s, 0.01)) # no bona fide may pass, so only 0.9 and 0.8 are caught

# the same numbers from a score file, as written by `ifom evaluate`
with tempfile.TemporaryDirectory() as d:
    path = Path(d) / "scores.csv"
    rows = [(f"a{i}", "attack", v) for i, v in enumerate(s.attack_scores)]
    rows += [(f"b{i}", "bona_fide", v) for i, v in enumerate(s.bonafide_scores)]
    metrics.write_score_file(path, rows)
    print(path.read_text())
    print(metrics.report(metrics.scoreset_from_file(path)))
