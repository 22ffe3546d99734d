import numpy as np
import pytest

from imicnn import dsp, ingest


def central_diff(f, x, h=1e-5, points=3):
    """Central-difference gradient of scalar ``f`` at array ``x`` (perturbed in place).

    ``points=5`` uses the fourth-order stencil; only meaningful for smooth ``f``
    where a larger ``h`` can be afforded without crossing kinks.
    """
    taps, denom = {3: (((1, 1), (-1, -1)), 2),
                   5: (((2, -1), (1, 8), (-1, -8), (-2, 1)), 12)}[points]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        acc = 0.0
        for k, c in taps:
            x[i] = old + k * h
            acc += c * f()
        x[i] = old
        g[i] = acc / (denom * h)
    return g


def rel_err(a, b, floor=1e-8):
    """Max elementwise |a - b| / max(|a|, |b|), denominators floored at ``floor``."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))))


@pytest.fixture(scope="session")
def synth_samples():
    """20 HC + 20 IMI samples from 8 synthetic patients (5 samples each)."""
    out = []
    for i in range(4):
        for label in ("HC", "IMI"):
            seed = 100 + i + (50 if label == "IMI" else 0)
            rec = ingest.synth_record(label, 32, 1000, seed, patient_id=f"{label}{i}")
            out.extend(dsp.make_samples(rec)[:5])
    return out
