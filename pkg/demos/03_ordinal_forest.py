"""The self-supervised stage behind deep_features, step by step.

Cluster autoencoder latents of saliency maps, ask the oracle for one
representative per cluster, order clusters by how much each representative
improves validation AUC, and teach an online forest the resulting levels.

Run: python demos/03_ordinal_forest.py   (about a minute on one core)
"""
import numpy as np

from ideal import deepsel
from ideal.alloop import STANDARD_DATASET, STANDARD_TRAIN
from ideal.nnet import Classifier, prepare_map, train_autoencoder, train_classifier
from ideal.saliency import saliency_batch
from ideal.strategies import deep_latents
from ideal.synthdata import Oracle, evaluation_labels, generate_dataset, split

ds = generate_dataset(STANDARD_DATASET)
pool = split(ds, seed=0)
ids = list(pool.unlabeled)
init, rest = ids[:20], ids[20:]
val_ids = list(pool.validation)
val = (ds.images(val_ids), evaluation_labels(ds, val_ids))
train = (ds.images(init), evaluation_labels(ds, init))
base, _ = train_classifier(Classifier(size=32, seed=0), *train, STANDARD_TRAIN, val=val)

maps = saliency_batch(base, ds.images(rest), "deep_taylor")[0]
ae, losses = train_autoencoder(np.array([prepare_map(m) for m in maps]), epochs=60, seed=0)
print(f"autoencoder reconstruction MSE {losses[0]:.4f} -> {losses[-1]:.4f}")
Z = deep_latents(ae, maps)

oracle = Oracle(ds)
ssl = deepsel.run_self_supervised_training(rest, Z, ds.images(rest), oracle, base, train, val,
                                           K=10, cfg=STANDARD_TRAIN, probe_epochs=3)
print(f"{len(ssl.journal)} rounds, {ssl.queries} oracle queries (10 per round)")
first = ssl.journal[0]
print("round 1 cluster sizes  :", first["cluster_sizes"])
print("round 1 ordinal labels :", first["ordinal_labels"])
levels, order = deepsel.rf_rank(ssl.forest, Z, rest)
print("forest's top five picks:", order[:5])
print(f"expected level range   : {levels.min():.2f} .. {levels.max():.2f}")
