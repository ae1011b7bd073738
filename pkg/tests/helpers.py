"""Small builders shared by the test modules."""

from __future__ import annotations

from metanas.genotype import CellGenotype, CellKind, Individual, NodeGene


def cell(kind: CellKind, *nodes: tuple[str, int]) -> CellGenotype:
    """Build a cell from ``("0110", op)`` pairs."""
    return CellGenotype(nodes=tuple(NodeGene(links=tuple(int(b) for b in bits), op=op)
                                    for bits, op in nodes), kind=kind)


def individual(normal, reduction, id: int = 0) -> Individual:
    return Individual(id=id, normal=cell(CellKind.NORMAL, *normal),
                      reduction=cell(CellKind.REDUCTION, *reduction))


def relative_errors(analytic, numeric, floor: float = 1e-6):
    """Element-wise ``|a - n| / max(|a|, |n|, floor)``."""
    import numpy as np

    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f, x, coords, eps: float = 1e-6):
    """Central differences of scalar ``f`` at ``x`` along the given coordinates."""
    import numpy as np

    out = []
    for i in coords:
        e = np.zeros_like(x)
        e[i] = eps
        out.append((f(x + e) - f(x - e)) / (2 * eps))
    return np.array(out)


def gradient_check(f, x, analytic, coords, eps: float = 1e-6, kink_tol: float = 1e-3):
    """Compare ``analytic`` with central differences of ``f`` at ``coords``.

    A coordinate whose forward and backward one-sided slopes disagree by more
    than ``kink_tol`` (relative) straddles a non-differentiable point (a ReLU
    or max-pool switch); there the analytic value only has to lie between the
    two slopes.  Returns ``(worst relative error at smooth coordinates,
    number of kinks, whether every kink was bracketed)``.
    """
    import numpy as np

    f0 = f(x)
    worst, kinks, bracketed = 0.0, 0, True
    for i in coords:
        e = np.zeros_like(x)
        e[i] = eps
        fwd = (f(x + e) - f0) / eps
        bwd = (f0 - f(x - e)) / eps
        a = float(analytic[i])
        if relative_errors([fwd], [bwd])[0] > kink_tol:
            kinks += 1
            lo, hi = min(fwd, bwd), max(fwd, bwd)
            slack = kink_tol * max(abs(lo), abs(hi))
            bracketed &= lo - slack <= a <= hi + slack
            continue
        worst = max(worst, float(relative_errors([a], [(fwd + bwd) / 2])[0]))
    return worst, kinks, bracketed
