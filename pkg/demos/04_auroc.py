"""Ranking metrics: rank-based AUROC against the pairwise definition, and image scores from maps."""
import numpy as np

from noise2norm.evaluation import auroc, image_score

rng = np.random.default_rng(0)
labels = rng.integers(0, 2, 300)
scores = rng.standard_normal(300) + 0.8 * labels  # positives shifted up

pos, neg = scores[labels == 1], scores[labels == 0]
pairwise = ((pos[:, None] > neg[None, :]) + 0.5 * (pos[:, None] == neg[None, :])).mean()
print(f"rank AUROC {auroc(scores, labels):.6f}  pairwise {pairwise:.6f}")

# ties count half
print("all tied:", auroc([1.0, 1.0, 1.0, 1.0], [0, 1, 0, 1]))

# an image is scored by the peak of its anomaly map
amap = rng.random((64, 64)) * 0.1
amap[30:34, 40:44] += 0.5
print("image score:", image_score(amap))
