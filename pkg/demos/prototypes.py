"""Train a prototype bank with InfoNCE, then refine proposals by attention."""
import numpy as np

from frustumbox.proto import (AttentionParams, TrainConfig, cross_attention_refine,
                              infonce_loss, nearest_prototype, train_prototypes)

rng = np.random.default_rng(0)
classes, dim = 4, 16
anchors = np.linalg.qr(rng.normal(size=(dim, classes)))[0].T  # orthonormal class anchors
bank = rng.normal(size=(classes, dim))
print("initial loss", round(infonce_loss(anchors, bank), 4),
      "nearest prototypes", nearest_prototype(anchors, bank))

bank, trace = train_prototypes(bank, anchors, TrainConfig(steps=300))
print("final loss", round(trace[-1], 6), "nearest prototypes", nearest_prototype(anchors, bank))
print("loss every 50 steps", np.round(trace[::50], 4))

# untrained projections: each row is a softmax over the four prototypes
params = AttentionParams.random(dim, rng, heads=4)
proposals = anchors[[2, 2, 0]] + 0.05 * rng.normal(size=(3, dim))
hat, tilde, weights = cross_attention_refine(proposals, bank, params, return_weights=True)
print("head-0 attention rows\n", np.round(weights[0], 3))
print("refined features keep the residual:", np.allclose(tilde - hat, proposals))
