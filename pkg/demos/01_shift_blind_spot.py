"""Why parameter distance misleads for softmax models.

Subtracting the same vector from every class row of a softmax model leaves
all predictions unchanged, yet moves the parameters as far as we like. The
loss gap sees two identical models; the parameter norm sees two strangers.
"""
import numpy as np

from lcfl.data import ClientDataset
from lcfl.metrics import loss_gap_matrix, param_norm_matrix
from lcfl.model import ModelSpec, init_params, shift_classes

rng = np.random.default_rng(0)
spec = ModelSpec("softmax", input_dim=5, num_classes=4)
w = init_params(spec, rng)

clients = [ClientDataset(rng.standard_normal((50, 5)), rng.integers(0, 4, 50), i) for i in range(2)]

print(f"{'|phi|':>8} {'loss gap':>12} {'param norm':>12} {'sqrt(K)|phi|':>14}")
for size in (0.0, 1.0, 10.0, 100.0):
    phi = np.full(spec.input_dim + 1, size / np.sqrt(spec.input_dim + 1))
    pair = [w, shift_classes(spec, w, phi)]
    gap = loss_gap_matrix(spec, clients, pair).values[0, 1]
    norm = param_norm_matrix(pair).values[0, 1]
    print(f"{size:8.1f} {gap:12.2e} {norm:12.4f} {np.sqrt(4) * size:14.4f}")
