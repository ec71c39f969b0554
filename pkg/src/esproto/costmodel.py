"""Dominant memory terms of meta-gradient computation.

Backpropagation stores every intermediate tensor of every inner step
(``g * l``); forward-mode differentiation stores the state-by-parameter
Jacobian (``D_psi * D_phi``); ES stores the population matrix
(``P * D_phi``). All byte counts are exact integers.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from fractions import Fraction

from .nncore import EmbeddingNet, activation_bytes


class UndefinedThresholdError(ValueError):
    pass


@dataclass(frozen=True)
class CostInputs:
    g: int
    l: int
    D_phi: int
    D_psi: int
    P: int
    bytes_per_scalar: int = 4

    def __post_init__(self):
        for name in ("l", "D_phi", "D_psi", "P", "bytes_per_scalar"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.g, int) or self.g < 0:
            raise ValueError(f"g must be a non-negative integer, got {self.g!r}")


@dataclass(frozen=True)
class CostReport:
    omega_bp: int
    omega_fm: int
    omega_es: int
    l1: int
    l2: int
    fm_to_es: Fraction
    # unrounded crossover lengths; l1/l2 are their ceilings
    l1_exact: Fraction
    l2_exact: Fraction

    @property
    def fm_to_es_ratio(self) -> float:
        return float(self.fm_to_es)

    def as_dict(self) -> dict:
        out = asdict(self)
        for key in ("fm_to_es", "l1_exact", "l2_exact"):
            value = getattr(self, key)
            out[key] = f"{value.numerator}/{value.denominator}"
        out["fm_to_es_ratio"] = self.fm_to_es_ratio
        return out


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def compute_costs(inp: CostInputs) -> CostReport:
    if inp.g == 0:
        raise UndefinedThresholdError("crossover task lengths are undefined for g = 0")
    b = inp.bytes_per_scalar
    omega_fm = inp.D_psi * inp.D_phi * b
    omega_es = inp.P * inp.D_phi * b
    return CostReport(
        omega_bp=inp.g * inp.l,
        omega_fm=omega_fm,
        omega_es=omega_es,
        l1=_ceil_div(omega_fm, inp.g),
        l2=_ceil_div(omega_es, inp.g),
        fm_to_es=Fraction(inp.D_psi, inp.P),
        l1_exact=Fraction(omega_fm, inp.g),
        l2_exact=Fraction(omega_es, inp.g),
    )


def protonet_state_size(channels: int, way: int, net: EmbeddingNet | None = None) -> int:
    """Prototype state held during a task: embedding dim times way."""
    net = EmbeddingNet(channels=channels) if net is None else net
    return net.embedding_dim * way


def protonet_inputs(channels: int, way: int, P: int, l: int = 1, g: int | None = None, batch: int | None = None):
    """CostInputs for the reference ProtoNet.

    ``g`` defaults to the measured activation bytes of one forward pass over
    a ``way``-way batch of ``batch`` images (20 per class if not given).
    """
    net = EmbeddingNet(channels=channels)
    if g is None:
        g = activation_bytes(net, batch if batch is not None else 20 * way)
    return CostInputs(g=g, l=l, D_phi=net.param_count, D_psi=protonet_state_size(channels, way, net), P=P)


def maml_inputs(D_phi: int, P: int, g: int, l: int = 1) -> CostInputs:
    """MAML keeps a full adapted parameter copy, so D_psi = D_phi."""
    return CostInputs(g=g, l=l, D_phi=D_phi, D_psi=D_phi, P=P)


def format_report(inp: CostInputs, rep: CostReport) -> str:
    rows = [
        ("D_phi", inp.D_phi),
        ("D_psi", inp.D_psi),
        ("P", inp.P),
        ("g (bytes/step)", inp.g),
        ("l (steps)", inp.l),
        ("omega_bp (bytes)", rep.omega_bp),
        ("omega_fm (bytes)", rep.omega_fm),
        ("omega_es (bytes)", rep.omega_es),
        ("l1 (bp = fm)", rep.l1),
        ("l2 (bp = es)", rep.l2),
        ("fm / es", f"{rep.fm_to_es_ratio:g}"),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def report_json(inp: CostInputs, rep: CostReport) -> str:
    return json.dumps({"inputs": asdict(inp), "report": rep.as_dict()}, indent=2)
