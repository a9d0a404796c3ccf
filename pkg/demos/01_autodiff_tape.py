"""
Reverse-mode gradients on a tape
================================

Every model quantity is built from a handful of numpy primitives recorded on
a tape. Here we differentiate a small attention read-out and compare with
central finite differences.
"""
import numpy as np

from mgacl import diffcore as dc

rng = np.random.default_rng(0)
u0 = rng.normal(size=4)
tails0 = rng.normal(size=(5, 4))

# leaves are registered on the tape by name
tape = dc.Tape()
u = tape.param(u0, "u")
tails = tape.param(tails0, "tails")

# softmax attention of u over five tails, then a read-out
weights = dc.softmax(dc.matvec(tails, u))
readout = dc.weighted_sum(weights, tails)
loss = dc.log(dc.sigmoid(dc.dot(u, readout)))

grads = dc.backward(tape, loss)
print("loss", loss.item())
print("d loss / d u", np.round(grads["u"], 6))


def loss_at(x):
    w = dc.softmax(dc.matvec(tails0, x))
    return dc.log(dc.sigmoid(dc.dot(x, dc.weighted_sum(w, tails0)))).item()


h = 1e-6
numeric = np.array([(loss_at(u0 + h * e) - loss_at(u0 - h * e)) / (2 * h) for e in np.eye(4)])
print("finite differences", np.round(numeric, 6))
print("nodes on tape:", len(tape.nodes), "visited in backward:", tape.backward_visits)
