"""Input constructors shared by several test modules."""

import numpy as np

from roadfuse.autodiff import Tensor, grad_check
from roadfuse.ingest import RoadSegment
from roadfuse.models import BackboneSpec, FusionSpec, build_model

GC_TOL = 1e-4
# finite differences of a structurally zero gradient (a bias feeding a train-mode
# batchnorm) are pure rounding noise of order 1e-16 * |f| / eps
GC_ATOL = 1e-8


def away_from_kinks(rng, *shape, gap=0.05):
    """Distinct values at least ``gap`` apart and away from zero, so relu/max/maxpool
    stay differentiable under the finite-difference step."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2 + 0.5) * gap
    return Tensor(vals.reshape(shape), requires_grad=True)


def generic_point(model, seed=7):
    """Move affine and bias terms off their init values. At init every BN beta
    is 0, which makes relu(gamma * xhat) scale-free ahead of the next batchnorm
    and leaves gradients that only the BN epsilon keeps from being zero."""
    prng = np.random.default_rng(seed)
    for name, p in model.params.items():
        if name.endswith(".gamma"):
            p.data[...] = prng.uniform(0.5, 1.5, p.data.shape)
        elif name.endswith(".beta") or name.endswith(".b"):
            p.data[...] = prng.normal(0.0, 0.3, p.data.shape)


def topology_grad_error(kind, stage, op, train, max_per_tensor=4):
    """Worst gradient-check error of a width-2, depth-2 model in float64."""
    m = build_model(BackboneSpec(kind, 2, 2), FusionSpec(stage, op), seed=1, dtype=np.float64)
    generic_point(m)
    rng = np.random.default_rng(3)
    sat = Tensor(rng.standard_normal((2, 4, 8, 8)), requires_grad=True)
    gps = Tensor(rng.random((2, 1, 8, 8)), requires_grad=True) if stage != "none" else None
    tensors = [sat] + ([gps] if gps is not None else []) + list(m.params.values())
    return grad_check(lambda g: m.forward(sat, gps, train=train, graph=g), tensors,
                      eps=1e-5, max_per_tensor=max_per_tensor, atol=GC_ATOL)


def random_segments(rng, spec, n, classes=("motorway", "footway", "residential", "primary", "track_grade3")):
    w = spec.width * spec.pixel_size
    h = spec.height * spec.pixel_size
    segs = []
    for _ in range(n):
        k = int(rng.integers(2, 5))
        xs = spec.origin_x + rng.uniform(-0.1 * w, 1.1 * w, size=k)
        ys = spec.origin_y - rng.uniform(-0.1 * h, 1.1 * h, size=k)
        segs.append(RoadSegment(tuple(zip(xs, ys)), classes[int(rng.integers(len(classes)))]))
    return segs
