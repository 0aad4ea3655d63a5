"""Train a small classifier, explain it, and score images from their saliency maps.

Run: python demos/01_saliency_scores.py   (about a minute on one core)
"""
import numpy as np

from ideal import features as F
from ideal.alloop import STANDARD_TRAIN
from ideal.nnet import Classifier, train_classifier
from ideal.saliency import mass_inside, saliency_batch
from ideal.synthdata import DatasetSpec, evaluation_labels, generate_dataset, lesion_mask, split

# A synthetic chest-like task with a clearly visible lesion, so the maps are easy to read.
spec = DatasetSpec(n_images=200, size=32, positive_fraction=0.5, contrast=0.3, seed=0)
ds = generate_dataset(spec)
pool = split(ds, seed=0)
train_ids = list(pool.unlabeled)
X, y = ds.images(train_ids), evaluation_labels(ds, train_ids)
val = (ds.images(list(pool.validation)), evaluation_labels(ds, list(pool.validation)))
model, hist = train_classifier(Classifier(size=32, seed=0), X, y, STANDARD_TRAIN, val=val)
print(f"trained for {len(hist.epochs)} epochs, best validation accuracy at epoch {hist.best_epoch}")

# Explain held-out positives with both attribution methods.
test_ids = list(pool.test)
pos = [i for i, v in zip(test_ids, evaluation_labels(ds, test_ids)) if v == 1]
masks = np.array([lesion_mask(ds, i, dilation=4) for i in pos])
for method in ("deep_taylor", "grad_cam"):
    maps = saliency_batch(model, ds.images(pos), method)[0]
    print(f"{method:12s} mean mass inside the lesion: {mass_inside(maps, masks).mean():.3f}")

# Turn every test map into informativeness scores.
maps = saliency_batch(model, ds.images(test_ids), "deep_taylor")[0]
kurt = np.array([F.kurtosis_score(m) for m in maps])
borda = F.borda_rank(F.feature_matrix(maps, "first_order"),
                     [F.FIRST_ORDER_DIRECTIONS[n] for n in F.FIRST_ORDER], test_ids)
print("highest kurtosis:", [test_ids[i] for i in np.argsort(-kurt)[:5]])
print("Borda winners   :", borda.order[:5])
