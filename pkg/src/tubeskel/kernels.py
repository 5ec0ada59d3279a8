"""Backend selection for the hot loops.

The compiled extension is preferred; the pure-Python module is used when it is
missing or when ``TUBESKEL_PURE_PYTHON`` is set to a non-empty value other than 0.
"""
import os

if os.environ.get("TUBESKEL_PURE_PYTHON", "0") not in ("", "0"):
    from tubeskel._fallback import edt_pass, geodesic_bfs, penalty_dijkstra

    BACKEND = "python"
else:
    try:
        from tubeskel._kernels import edt_pass, geodesic_bfs, penalty_dijkstra

        BACKEND = "cython"
    except ImportError:  # extension not built
        from tubeskel._fallback import edt_pass, geodesic_bfs, penalty_dijkstra

        BACKEND = "python"

__all__ = ["BACKEND", "edt_pass", "geodesic_bfs", "penalty_dijkstra"]
